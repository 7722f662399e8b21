use super::{Parameter, Real};

/// One SGD step with heavy-ball momentum and L2 weight decay:
/// `v <- momentum * v + grad + weight_decay * value; value <- value - lr * v`.
pub fn sgd_update<T: Real>(param: &mut Parameter<T>, lr: T, momentum: T, weight_decay: T) {
    let Parameter {
        value,
        grad,
        momentum: buf,
    } = param;
    for ((w, &g), v) in value
        .data_mut()
        .iter_mut()
        .zip(grad.data())
        .zip(buf.data_mut())
    {
        *v = momentum * *v + g + weight_decay * *w;
        *w -= lr * *v;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::compute::Tensor;

    fn param(v: f64, g: f64) -> Parameter<f64> {
        let mut p = Parameter::new(Tensor::from_vec(&[1], vec![v]).unwrap());
        p.grad.data_mut()[0] = g;
        p
    }

    #[test]
    fn plain_step() {
        let mut p = param(1.0, 0.1);
        sgd_update(&mut p, 0.1, 0.0, 0.0);
        assert!((p.value.data()[0] - 0.99).abs() < 1e-15);
    }

    #[test]
    fn zero_grad_zero_buffer_is_noop() {
        let mut p = param(0.37, 0.0);
        sgd_update(&mut p, 0.5, 0.9, 0.0);
        assert_eq!(p.value.data()[0], 0.37);
    }

    #[test]
    fn momentum_matches_hand_recurrence() {
        let (lr, mu, wd) = (0.05f64, 0.9, 1e-4);
        let grads = [0.3, -0.2];
        let mut p = param(1.5, grads[0]);
        let (mut w, mut v) = (1.5f64, 0.0f64);
        for &g in &grads {
            p.grad.data_mut()[0] = g;
            sgd_update(&mut p, lr, mu, wd);
            v = mu * v + g + wd * w;
            w -= lr * v;
        }
        assert!((p.value.data()[0] - w).abs() < 1e-7);
        assert!((p.momentum.data()[0] - v).abs() < 1e-7);
    }
}
