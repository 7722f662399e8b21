use crate::error::{shape_err, Result};

use super::{Real, Tensor};

/// `max(0, x)` elementwise.
pub fn relu<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| if v > T::zero() { v } else { T::zero() })
}

/// Passes `dy` where the forward input was strictly positive (subgradient 0 at 0).
pub fn relu_backward<T: Real>(dy: &Tensor<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
    if dy.shape() != x.shape() {
        return Err(shape_err!("relu dy {:?} vs x {:?}", dy.shape(), x.shape()));
    }
    let data = dy
        .data()
        .iter()
        .zip(x.data())
        .map(|(&d, &v)| if v > T::zero() { d } else { T::zero() })
        .collect();
    Tensor::from_vec(dy.shape(), data)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn forward_and_subgradient() {
        let x = Tensor::from_vec(&[3], vec![-1.0f32, 0.0, 2.0]).unwrap();
        assert_eq!(relu(&x).data(), &[0.0, 0.0, 2.0]);
        let dy = Tensor::full(&[3], 1.0f32);
        assert_eq!(relu_backward(&dy, &x).unwrap().data(), &[0.0, 0.0, 1.0]);
    }

    #[test]
    fn commutes_with_positive_scale() {
        let x = Tensor::from_vec(&[2], vec![-2.0f32, 4.0]).unwrap();
        let a = relu(&x.map(|v| v * 0.5));
        let b = relu(&x).map(|v| v * 0.5);
        assert_eq!(a, b);
        assert_eq!(a.data(), &[0.0, 2.0]);
    }
}
