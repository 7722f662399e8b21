use crate::error::{shape_err, Error, Result};

use super::Tensor;

/// Central-difference step.
pub const FD_STEP: f64 = 1e-5;

/// Compares analytic gradients against central finite differences.
///
/// `f` maps the inputs to `(scalar value, analytic gradient per input)`. Every input
/// element is perturbed by `±FD_STEP`; the returned error is the maximum over elements
/// of `|a - n| / max(1, |a|, |n|)`.
pub fn grad_check<F>(f: F, inputs: &[Tensor<f64>]) -> Result<f64>
where
    F: FnMut(&[Tensor<f64>]) -> (Tensor<f64>, Vec<Tensor<f64>>),
{
    grad_check_step(f, inputs, FD_STEP)
}

/// [`grad_check`] with an explicit step, for functions whose natural scale is not 1.
pub fn grad_check_step<F>(mut f: F, inputs: &[Tensor<f64>], step: f64) -> Result<f64>
where
    F: FnMut(&[Tensor<f64>]) -> (Tensor<f64>, Vec<Tensor<f64>>),
{
    if !(step > 0.0 && step.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "finite-difference step {step}"
        )));
    }
    let (value, analytic) = f(inputs);
    if value.len() != 1 {
        return Err(Error::InvalidArgument(format!(
            "grad_check needs a scalar function, got shape {:?}",
            value.shape()
        )));
    }
    if analytic.len() != inputs.len() {
        return Err(shape_err!(
            "{} gradients for {} inputs",
            analytic.len(),
            inputs.len()
        ));
    }
    for (a, x) in analytic.iter().zip(inputs) {
        if a.shape() != x.shape() {
            return Err(shape_err!(
                "gradient {:?} for input {:?}",
                a.shape(),
                x.shape()
            ));
        }
    }
    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    let mut worst = 0.0f64;
    for t in 0..inputs.len() {
        for i in 0..inputs[t].len() {
            let orig = inputs[t].data()[i];
            work[t].data_mut()[i] = orig + step;
            let plus = f(&work).0.data()[0];
            work[t].data_mut()[i] = orig - step;
            let minus = f(&work).0.data()[0];
            work[t].data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * step);
            let a = analytic[t].data()[i];
            let err = (a - numeric).abs() / 1f64.max(a.abs()).max(numeric.abs());
            worst = worst.max(err);
        }
    }
    Ok(worst)
}
