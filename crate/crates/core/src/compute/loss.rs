use crate::error::{Error, Result};

use super::{Real, Tensor};

/// Mean softmax cross-entropy over the batch, with `dlogits = (softmax - onehot) / n`.
/// Computed in `f64` with a max shift.
pub fn softmax_cross_entropy<T: Real>(
    logits: &Tensor<T>,
    labels: &[usize],
) -> Result<(f64, Tensor<T>)> {
    let (n, k) = logits.dims2()?;
    if labels.len() != n {
        return Err(Error::InvalidArgument(format!(
            "{} labels for {} rows",
            labels.len(),
            n
        )));
    }
    let mut loss = 0f64;
    let mut d = Tensor::zeros(&[n, k]);
    let inv_n = 1.0 / n as f64;
    for (r, &label) in labels.iter().enumerate() {
        if label >= k {
            return Err(Error::InvalidArgument(format!(
                "label {label} out of range for {k} classes"
            )));
        }
        let row = logits.outer(r);
        let max = row
            .iter()
            .map(|v| v.as_f64())
            .fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = row.iter().map(|v| (v.as_f64() - max).exp()).collect();
        let z: f64 = exps.iter().sum();
        loss += z.ln() - (row[label].as_f64() - max);
        let dr = d.outer_mut(r);
        for c in 0..k {
            let onehot = if c == label { 1.0 } else { 0.0 };
            dr[c] = T::from_f64c((exps[c] / z - onehot) * inv_n);
        }
    }
    Ok((loss * inv_n, d))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uniform_two_class() {
        let l = Tensor::from_vec(&[1, 2], vec![0.0f64, 0.0]).unwrap();
        let (loss, _) = softmax_cross_entropy(&l, &[0]).unwrap();
        assert!((loss - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn large_margin_is_stable() {
        let l = Tensor::from_vec(&[1, 2], vec![30.0f32, -30.0]).unwrap();
        let (loss, d) = softmax_cross_entropy(&l, &[0]).unwrap();
        assert!((0.0..1e-9).contains(&loss));
        assert!(d.all_finite());
    }

    #[test]
    fn gradient_rows_sum_to_zero_and_shift_invariance() {
        let l = Tensor::from_vec(&[2, 3], vec![0.3f64, -1.2, 2.0, 5.0, 4.0, -3.0]).unwrap();
        let (loss, d) = softmax_cross_entropy(&l, &[2, 0]).unwrap();
        for r in 0..2 {
            assert!(d.outer(r).iter().sum::<f64>().abs() < 1e-15);
        }
        let shifted = l.map(|v| v + 17.0);
        let (loss2, _) = softmax_cross_entropy(&shifted, &[2, 0]).unwrap();
        assert!((loss - loss2).abs() < 1e-6);
    }

    #[test]
    fn label_out_of_range() {
        let l = Tensor::<f32>::zeros(&[1, 3]);
        assert!(softmax_cross_entropy(&l, &[3]).is_err());
    }
}
