//! Per-channel batch normalization over NCHW tensors.
//!
//! Batch statistics are accumulated in `f64`. Running variance uses the unbiased
//! estimate; normalization uses the biased one.

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};

use super::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BnConfig {
    pub eps: f64,
    pub momentum: f64,
}

impl Default for BnConfig {
    fn default() -> Self {
        BnConfig {
            eps: 1e-5,
            momentum: 0.1,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BnState<T = f32> {
    pub running_mean: Tensor<T>,
    pub running_var: Tensor<T>,
    /// Set by the first train-mode step; eval mode refuses to run before that.
    pub populated: bool,
}

impl<T: Real> BnState<T> {
    pub fn new(channels: usize) -> Self {
        BnState {
            running_mean: Tensor::zeros(&[channels]),
            running_var: Tensor::full(&[channels], T::one()),
            populated: false,
        }
    }

    pub fn channels(&self) -> usize {
        self.running_mean.len()
    }
}

#[derive(Clone, Debug)]
pub struct BnCache<T> {
    pub xhat: Tensor<T>,
    pub inv_std: Vec<T>,
    pub mode: Mode,
}

pub fn batchnorm<T: Real>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    state: &mut BnState<T>,
    mode: Mode,
    cfg: BnConfig,
) -> Result<(Tensor<T>, BnCache<T>)> {
    let (n, c, h, w) = x.dims4()?;
    if gamma.len() != c || beta.len() != c || state.channels() != c {
        return Err(shape_err!(
            "batchnorm over {c} channels with gamma {}, beta {}, state {}",
            gamma.len(),
            beta.len(),
            state.channels()
        ));
    }
    let plane = h * w;
    let m = n * plane;
    let mut mean = vec![0f64; c];
    let mut inv_std = vec![T::zero(); c];
    match mode {
        Mode::Train => {
            if m < 2 {
                return Err(Error::InvalidArgument(
                    "batchnorm train mode needs batch x spatial >= 2".into(),
                ));
            }
            let mom = T::from_f64c(cfg.momentum);
            for ch in 0..c {
                let mut s = 0f64;
                for b in 0..n {
                    for &v in &x.data()[(b * c + ch) * plane..(b * c + ch + 1) * plane] {
                        s += v.as_f64();
                    }
                }
                let mu = s / m as f64;
                let mut ss = 0f64;
                for b in 0..n {
                    for &v in &x.data()[(b * c + ch) * plane..(b * c + ch + 1) * plane] {
                        let d = v.as_f64() - mu;
                        ss += d * d;
                    }
                }
                let var = ss / m as f64;
                mean[ch] = mu;
                inv_std[ch] = T::from_f64c(1.0 / (var + cfg.eps).sqrt());
                let unbiased = ss / (m - 1) as f64;
                let rm = &mut state.running_mean.data_mut()[ch];
                *rm = (T::one() - mom) * *rm + mom * T::from_f64c(mu);
                let rv = &mut state.running_var.data_mut()[ch];
                *rv = (T::one() - mom) * *rv + mom * T::from_f64c(unbiased);
            }
            state.populated = true;
        }
        Mode::Eval => {
            if !state.populated {
                return Err(Error::State(
                    "batchnorm eval mode before any train step".into(),
                ));
            }
            for ch in 0..c {
                mean[ch] = state.running_mean.data()[ch].as_f64();
                inv_std[ch] =
                    T::from_f64c(1.0 / (state.running_var.data()[ch].as_f64() + cfg.eps).sqrt());
            }
        }
    }
    let mut xhat = Tensor::zeros(x.shape());
    let mut y = Tensor::zeros(x.shape());
    for b in 0..n {
        for ch in 0..c {
            let range = (b * c + ch) * plane..(b * c + ch + 1) * plane;
            let mu = T::from_f64c(mean[ch]);
            let (is, g, bt) = (inv_std[ch], gamma.data()[ch], beta.data()[ch]);
            for ((xh, yv), &v) in xhat.data_mut()[range.clone()]
                .iter_mut()
                .zip(&mut y.data_mut()[range.clone()])
                .zip(&x.data()[range])
            {
                *xh = (v - mu) * is;
                *yv = g * *xh + bt;
            }
        }
    }
    Ok((
        y,
        BnCache {
            xhat,
            inv_std,
            mode,
        },
    ))
}

/// Returns `(dx, dgamma, dbeta)`; parameter gradients only when `param_grads` is set.
pub fn batchnorm_backward<T: Real>(
    dy: &Tensor<T>,
    gamma: &Tensor<T>,
    cache: &BnCache<T>,
    param_grads: bool,
) -> Result<(Tensor<T>, Option<(Tensor<T>, Tensor<T>)>)> {
    if dy.shape() != cache.xhat.shape() {
        return Err(shape_err!(
            "batchnorm dy {:?} vs cached {:?}",
            dy.shape(),
            cache.xhat.shape()
        ));
    }
    let (n, c, h, w) = dy.dims4()?;
    let plane = h * w;
    let m = (n * plane) as f64;
    let mut sum_dy = vec![0f64; c];
    let mut sum_dy_xhat = vec![0f64; c];
    for b in 0..n {
        for ch in 0..c {
            let range = (b * c + ch) * plane..(b * c + ch + 1) * plane;
            for (&d, &xh) in dy.data()[range.clone()]
                .iter()
                .zip(&cache.xhat.data()[range])
            {
                sum_dy[ch] += d.as_f64();
                sum_dy_xhat[ch] += d.as_f64() * xh.as_f64();
            }
        }
    }
    let mut dx = Tensor::zeros(dy.shape());
    for b in 0..n {
        for ch in 0..c {
            let range = (b * c + ch) * plane..(b * c + ch + 1) * plane;
            let g = gamma.data()[ch];
            let is = cache.inv_std[ch];
            match cache.mode {
                Mode::Eval => {
                    let k = g * is;
                    for (o, &d) in dx.data_mut()[range.clone()]
                        .iter_mut()
                        .zip(&dy.data()[range])
                    {
                        *o = d * k;
                    }
                }
                Mode::Train => {
                    let mean_dy = T::from_f64c(sum_dy[ch] / m);
                    let mean_dy_xhat = T::from_f64c(sum_dy_xhat[ch] / m);
                    let k = g * is;
                    for ((o, &d), &xh) in dx.data_mut()[range.clone()]
                        .iter_mut()
                        .zip(&dy.data()[range.clone()])
                        .zip(&cache.xhat.data()[range])
                    {
                        *o = k * (d - mean_dy - xh * mean_dy_xhat);
                    }
                }
            }
        }
    }
    let pg = param_grads.then(|| {
        let dgamma = Tensor::from_vec(&[c], sum_dy_xhat.iter().map(|&v| T::from_f64c(v)).collect())
            .expect("len c");
        let dbeta = Tensor::from_vec(&[c], sum_dy.iter().map(|&v| T::from_f64c(v)).collect())
            .expect("len c");
        (dgamma, dbeta)
    });
    Ok((dx, pg))
}
