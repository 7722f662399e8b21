use crate::error::{Error, Result};

use super::{Real, Rng, Tensor};

/// He-normal initialization: zero mean, variance `2 / fan_in`, where fan_in is the
/// product of every dimension after the first.
pub fn he_init<T: Real>(rng: &mut Rng, shape: &[usize]) -> Result<Tensor<T>> {
    if shape.is_empty() || shape.contains(&0) {
        return Err(Error::InvalidArgument(format!(
            "he_init needs a nonempty shape, got {shape:?}"
        )));
    }
    let fan_in: usize = shape[1..].iter().product::<usize>().max(1);
    let std = (2.0 / fan_in as f64).sqrt();
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| T::from_f64c(rng.normal() * std)).collect();
    Tensor::from_vec(shape, data)
}
