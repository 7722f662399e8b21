//! Channel-wise scaled-sigmoid gates.
//!
//! Each gated layer owns one [`GateSet`]: a real parameter `s` per (block, channel),
//! a shared scale `delta`, and an enabled flag. The gate value is
//! `p = sigmoid(delta * s)`; as `delta` grows, `p` converges to [`binarize`]`(s)`.

use serde::{Deserialize, Serialize};

use crate::compute::{Parameter, Real, Tensor};
use crate::error::{shape_err, Error, Result};

/// Logistic of `delta * s`, evaluated so it saturates instead of overflowing.
#[inline]
pub fn scaled_sigmoid<T: Real>(s: T, delta: T) -> T {
    let z = delta * s;
    if z >= T::zero() {
        T::one() / (T::one() + (-z).exp())
    } else {
        let e = z.exp();
        e / (T::one() + e)
    }
}

/// Hard keep/drop decision: 1 iff `s > 0`.
#[inline]
pub fn binarize<T: Real>(s: T) -> bool {
    s > T::zero()
}

/// `d sigmoid(delta * s) / ds = delta * p * (1 - p)`.
#[inline]
pub fn sigmoid_slope<T: Real>(s: T, delta: T) -> T {
    let p = scaled_sigmoid(s, delta);
    delta * p * (T::one() - p)
}

/// Which expression is used for `dp/ds`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GateGradForm {
    /// `delta * p * (1 - p)`, the derivative of the logistic.
    #[default]
    ChainRule,
    /// `delta^2 * s * (1 - delta * s)`. Not a derivative of the forward map; kept only
    /// so the gradient checker can show that it disagrees with finite differences.
    Printed,
}

impl GateGradForm {
    #[inline]
    pub fn slope<T: Real>(self, s: T, delta: T) -> T {
        match self {
            GateGradForm::ChainRule => sigmoid_slope(s, delta),
            GateGradForm::Printed => delta * delta * s * (T::one() - delta * s),
        }
    }
}

/// Exponential scale schedule from `delta0` to `delta_max` over `epochs` epochs.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DeltaSchedule {
    pub delta0: f64,
    pub delta_max: f64,
    pub epochs: usize,
}

impl Default for DeltaSchedule {
    fn default() -> Self {
        DeltaSchedule {
            delta0: 1.0,
            delta_max: 1e4,
            epochs: 20,
        }
    }
}

impl DeltaSchedule {
    pub fn validate(&self) -> Result<()> {
        if !(self.delta0 >= 1.0 && self.delta0 <= self.delta_max && self.delta_max.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "delta schedule needs 1 <= delta0 <= delta_max, got {} / {}",
                self.delta0, self.delta_max
            )));
        }
        if self.epochs == 0 {
            return Err(Error::InvalidArgument(
                "delta schedule needs at least one epoch".into(),
            ));
        }
        Ok(())
    }

    /// `delta0 * (delta_max / delta0)^(i / (n - 1))`; endpoints are returned exactly.
    pub fn delta(&self, epoch: usize) -> Result<f64> {
        if epoch >= self.epochs {
            return Err(Error::InvalidArgument(format!(
                "epoch {epoch} outside schedule of {} epochs",
                self.epochs
            )));
        }
        if self.epochs == 1 || epoch == self.epochs - 1 {
            return Ok(self.delta_max);
        }
        if epoch == 0 {
            return Ok(self.delta0);
        }
        let t = epoch as f64 / (self.epochs - 1) as f64;
        Ok(self.delta0 * (self.delta_max / self.delta0).powf(t))
    }
}

/// Architecture parameters of one layer, block-major: entry `(i, j)` gates channel
/// `j` of block `i`.
#[derive(Clone, Debug, PartialEq)]
pub struct GateSet<T = f32> {
    pub s: Parameter<T>,
    pub delta: T,
    pub enabled: bool,
    block_sizes: Vec<usize>,
}

impl<T: Real> GateSet<T> {
    /// Disabled gates with `s = 0` and `delta = 1`.
    pub fn new(block_sizes: &[usize]) -> Self {
        let total = block_sizes.iter().sum();
        GateSet {
            s: Parameter::zeros(&[total]),
            delta: T::one(),
            enabled: false,
            block_sizes: block_sizes.to_vec(),
        }
    }

    pub fn block_sizes(&self) -> &[usize] {
        &self.block_sizes
    }

    pub fn len(&self) -> usize {
        self.s.len()
    }

    pub fn is_empty(&self) -> bool {
        self.s.is_empty()
    }

    pub fn block_range(&self, block: usize) -> std::ops::Range<usize> {
        let start: usize = self.block_sizes[..block].iter().sum();
        start..start + self.block_sizes[block]
    }

    pub fn block_s(&self, block: usize) -> &[T] {
        &self.s.value.data()[self.block_range(block)]
    }

    /// Gate values `sigmoid(delta * s)` of one block.
    pub fn probs(&self, block: usize) -> Vec<T> {
        self.block_s(block)
            .iter()
            .map(|&s| scaled_sigmoid(s, self.delta))
            .collect()
    }

    pub fn all_probs(&self) -> Vec<T> {
        self.s
            .value
            .data()
            .iter()
            .map(|&s| scaled_sigmoid(s, self.delta))
            .collect()
    }

    pub fn set_delta(&mut self, delta: f64) -> Result<()> {
        if delta.is_nan() || delta < 1.0 {
            return Err(Error::InvalidArgument(format!(
                "delta must be >= 1, got {delta}"
            )));
        }
        self.delta = T::from_f64c(delta);
        Ok(())
    }

    /// Enables the gates with `s = 0` and fresh optimizer state.
    pub fn reset_enabled(&mut self) {
        self.s.value.fill(T::zero());
        self.s.zero_grad();
        self.s.reset_momentum();
        self.enabled = true;
    }

    /// Rebuilds the set keeping only entries flagged in `keep` (block-major).
    /// Blocks left without entries are dropped.
    pub fn retain(&self, keep: &[Vec<bool>]) -> Result<GateSet<T>> {
        if keep.len() != self.block_sizes.len() {
            return Err(shape_err!(
                "mask has {} blocks, gate set {}",
                keep.len(),
                self.block_sizes.len()
            ));
        }
        let mut sizes = Vec::with_capacity(keep.len());
        let mut vals = Vec::new();
        for (b, mask) in keep.iter().enumerate() {
            if mask.len() != self.block_sizes[b] {
                return Err(shape_err!(
                    "mask for block {b} has {} entries, gate set {}",
                    mask.len(),
                    self.block_sizes[b]
                ));
            }
            let s = self.block_s(b);
            vals.extend(s.iter().zip(mask).filter(|(_, &k)| k).map(|(&v, _)| v));
            let kept = mask.iter().filter(|&&k| k).count();
            if kept > 0 {
                sizes.push(kept);
            }
        }
        let total = vals.len();
        Ok(GateSet {
            s: Parameter::new(Tensor::from_vec(&[total], vals)?),
            delta: self.delta,
            enabled: self.enabled,
            block_sizes: sizes,
        })
    }
}

/// Multiplies channel `c` of an NCHW tensor by `probs[c]`. Disabled gates are an
/// identity and return the input unchanged.
pub fn gate_apply<T: Real>(x: &Tensor<T>, gates: &GateSet<T>, block: usize) -> Result<Tensor<T>> {
    if !gates.enabled {
        return Ok(x.clone());
    }
    scale_channels(x, &gates.probs(block))
}

pub(crate) fn scale_channels<T: Real>(x: &Tensor<T>, probs: &[T]) -> Result<Tensor<T>> {
    let (n, c, h, w) = x.dims4()?;
    if probs.len() != c {
        return Err(shape_err!("{} gate values for {} channels", probs.len(), c));
    }
    let plane = h * w;
    let mut y = x.clone();
    for b in 0..n {
        for (ch, &p) in probs.iter().enumerate() {
            for v in &mut y.data_mut()[(b * c + ch) * plane..(b * c + ch + 1) * plane] {
                *v *= p;
            }
        }
    }
    Ok(y)
}

/// Per-channel `sum_{n,h,w} dy * x`, i.e. `dL/dp` for `y = x * p`.
pub(crate) fn channel_dot<T: Real>(dy: &Tensor<T>, x: &Tensor<T>) -> Result<Vec<T>> {
    let (n, c, h, w) = x.dims4()?;
    if dy.shape() != x.shape() {
        return Err(shape_err!("gate dy {:?} vs x {:?}", dy.shape(), x.shape()));
    }
    let plane = h * w;
    let mut acc = vec![0f64; c];
    for b in 0..n {
        for (ch, a) in acc.iter_mut().enumerate() {
            let r = (b * c + ch) * plane..(b * c + ch + 1) * plane;
            for (&d, &v) in dy.data()[r.clone()].iter().zip(&x.data()[r]) {
                *a += d.as_f64() * v.as_f64();
            }
        }
    }
    Ok(acc.into_iter().map(T::from_f64c).collect())
}

/// `ds[j] = upstream[j] * dp/ds` for the entries of one block.
pub fn gate_grad<T: Real>(
    upstream: &[T],
    gates: &GateSet<T>,
    block: usize,
    form: GateGradForm,
) -> Result<Vec<T>> {
    if !gates.enabled {
        return Err(Error::State(
            "gate gradient requested while gates are disabled".into(),
        ));
    }
    let s = gates.block_s(block);
    if upstream.len() != s.len() {
        return Err(shape_err!(
            "{} upstream values for {} gates",
            upstream.len(),
            s.len()
        ));
    }
    Ok(upstream
        .iter()
        .zip(s)
        .map(|(&u, &sv)| u * form.slope(sv, gates.delta))
        .collect())
}

/// Sparsity penalty `lambda_a * sum sigmoid(delta * s)` over every enabled gate; when
/// `accumulate` is set its gradient is added to each `s.grad`.
pub fn penalty<'a, T: Real + 'a>(
    gates: impl IntoIterator<Item = &'a mut GateSet<T>>,
    lambda_a: f64,
    accumulate: bool,
) -> f64 {
    let mut total = 0f64;
    let lam = T::from_f64c(lambda_a);
    for g in gates {
        if !g.enabled {
            continue;
        }
        let delta = g.delta;
        let GateSet { s, .. } = g;
        for (&sv, gr) in s.value.data().iter().zip(s.grad.data_mut()) {
            total += scaled_sigmoid(sv, delta).as_f64();
            if accumulate && lambda_a != 0.0 {
                *gr += lam * sigmoid_slope(sv, delta);
            }
        }
    }
    lambda_a * total
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct BinarizationStats {
    pub fraction_binarized: f64,
    pub fraction_active: f64,
}

/// Fraction of gates with `p <= tol` or `p >= 1 - tol`, and fraction with `p >= 1 - tol`.
pub fn binarization_stats<'a, T: Real + 'a>(
    gates: impl IntoIterator<Item = &'a GateSet<T>>,
    tol: f64,
) -> BinarizationStats {
    let (mut total, mut bin, mut active) = (0usize, 0usize, 0usize);
    for g in gates {
        for p in g.all_probs() {
            let p = p.as_f64();
            total += 1;
            if p >= 1.0 - tol {
                active += 1;
                bin += 1;
            } else if p <= tol {
                bin += 1;
            }
        }
    }
    if total == 0 {
        return BinarizationStats::default();
    }
    BinarizationStats {
        fraction_binarized: bin as f64 / total as f64,
        fraction_active: active as f64 / total as f64,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::compute::grad_check;
    use proptest::prelude::*;

    fn gates_with(s: &[f64], delta: f64) -> GateSet<f64> {
        let mut g = GateSet::new(&[s.len()]);
        g.s.value.data_mut().copy_from_slice(s);
        g.delta = delta;
        g.enabled = true;
        g
    }

    #[test]
    fn sigmoid_values() {
        assert_eq!(scaled_sigmoid(0.0f64, 7.0), 0.5);
        assert!((scaled_sigmoid(0.5f64, 10.0) - 0.993_307_149_075_715).abs() < 1e-12);
        let p = scaled_sigmoid(0.01f64, 1e4);
        assert!(1.0 - p < 1e-43);
        assert_eq!(scaled_sigmoid(0.01f32, 1e4), 1.0);
        for z in [1e8f64, -1e8] {
            let p = scaled_sigmoid(1.0, z);
            assert!(p == 0.0 || p == 1.0);
        }
        assert_eq!(scaled_sigmoid(-1.0f32, 1e8), 0.0);
    }

    #[test]
    fn binarize_threshold() {
        assert!(binarize(0.7));
        assert!(!binarize(0.0));
        assert!(!binarize(-0.3));
    }

    #[test]
    fn apply_disabled_is_identity() {
        let x = Tensor::from_vec(&[1, 2, 1, 1], vec![2.0f64, -4.0]).unwrap();
        let mut g = gates_with(&[0.0, 0.0], 1.0);
        g.enabled = false;
        assert_eq!(gate_apply(&x, &g, 0).unwrap(), x);
        g.enabled = true;
        assert_eq!(gate_apply(&x, &g, 0).unwrap().data(), &[1.0, -2.0]);
        let g = gates_with(&[1.0, -1.0], 1e4);
        let x = Tensor::from_vec(&[1, 2, 1, 1], vec![3.0f64, 5.0]).unwrap();
        assert_eq!(gate_apply(&x, &g, 0).unwrap().data(), &[3.0, 0.0]);
    }

    #[test]
    fn apply_rejects_count_mismatch() {
        let x = Tensor::<f64>::zeros(&[1, 3, 1, 1]);
        assert!(gate_apply(&x, &gates_with(&[0.0, 0.0], 1.0), 0).is_err());
    }

    #[test]
    fn grad_values() {
        let g = gates_with(&[0.0], 1.0);
        assert_eq!(
            gate_grad(&[1.0], &g, 0, GateGradForm::ChainRule).unwrap(),
            vec![0.25]
        );
        let g = gates_with(&[0.0], 2.0);
        assert_eq!(
            gate_grad(&[1.0], &g, 0, GateGradForm::ChainRule).unwrap(),
            vec![0.5]
        );
        let mut g = gates_with(&[0.0], 1.0);
        g.enabled = false;
        assert!(gate_grad(&[1.0], &g, 0, GateGradForm::ChainRule).is_err());
    }

    #[test]
    fn chain_rule_matches_finite_differences_printed_does_not() {
        let mut rng = crate::compute::Rng::new(17);
        let mut worst_printed = 0.0f64;
        for _ in 0..50 {
            let delta = 1.0 + rng.uniform() * 99.0;
            let s = (rng.uniform() - 0.5) * 4.0 / delta;
            let x = Tensor::from_vec(&[1], vec![s]).unwrap();
            let f = |form: GateGradForm| {
                move |inp: &[Tensor<f64>]| {
                    let sv = inp[0].data()[0];
                    (
                        Tensor::scalar(scaled_sigmoid(sv, delta)),
                        vec![Tensor::scalar(form.slope(sv, delta))],
                    )
                }
            };
            let err = grad_check(f(GateGradForm::ChainRule), std::slice::from_ref(&x)).unwrap();
            assert!(err < 1e-7, "delta {delta} s {s}: {err}");
            worst_printed = worst_printed.max(grad_check(f(GateGradForm::Printed), &[x]).unwrap());
        }
        assert!(worst_printed > 1e-2);
    }

    #[test]
    fn penalty_values() {
        let mut gs = [gates_with(&[0.0; 64], 1.0)];
        let v = penalty(gs.iter_mut(), 1e-4, true);
        assert!((v - 3.2e-3).abs() < 1e-15);
        assert!(gs[0]
            .s
            .grad
            .data()
            .iter()
            .all(|&g| (g - 0.25e-4).abs() < 1e-18));

        let mut gs = [gates_with(&[0.3, -0.2], 1.0)];
        assert_eq!(penalty(gs.iter_mut(), 0.0, true), 0.0);
        assert!(gs[0].s.grad.data().iter().all(|&g| g == 0.0));

        let mut gs = [gates_with(&[0.01, -0.01, 0.5, -3.0], 1e4)];
        penalty(gs.iter_mut(), 1e-4, true);
        assert!(
            gs[0].s.grad.data().iter().all(|&g| g.abs() <= 1e-40),
            "{:?}",
            gs[0].s.grad.data()
        );
    }

    #[test]
    fn schedule_endpoints_and_midpoint() {
        let s = DeltaSchedule {
            delta0: 1.0,
            delta_max: 1e4,
            epochs: 5,
        };
        assert_eq!(s.delta(0).unwrap(), 1.0);
        assert_eq!(s.delta(4).unwrap(), 1e4);
        assert!((s.delta(2).unwrap() - 100.0).abs() < 1e-9);
        assert!(s.delta(5).is_err());
        let one = DeltaSchedule { epochs: 1, ..s };
        assert_eq!(one.delta(0).unwrap(), 1e4);
    }

    #[test]
    fn stats_counting() {
        let fresh = gates_with(&[0.0; 8], 1.0);
        assert_eq!(binarization_stats([&fresh], 1e-3).fraction_binarized, 0.0);
        let sat = gates_with(&[1.0, -1.0, 1.0, -1.0], 1e4);
        assert_eq!(binarization_stats([&sat], 1e-3).fraction_binarized, 1.0);
        let mixed = gates_with(
            &[1.0, 1.0, 1.0, 1.0, 1.0, -1.0, -1.0, -1.0, -1.0, -1.0],
            1e4,
        );
        assert_eq!(binarization_stats([&mixed], 1e-3).fraction_active, 0.5);
    }

    #[test]
    fn retain_keeps_selected_entries() {
        let mut g = GateSet::<f64>::new(&[3, 2]);
        g.s.value
            .data_mut()
            .copy_from_slice(&[0.1, -0.2, 0.3, 0.4, -0.5]);
        let r = g
            .retain(&[vec![true, false, true], vec![false, true]])
            .unwrap();
        assert_eq!(r.block_sizes(), &[2, 1]);
        assert_eq!(r.s.value.data(), &[0.1, 0.3, -0.5]);
        let dropped = g
            .retain(&[vec![true, true, false], vec![false, false]])
            .unwrap();
        assert_eq!(dropped.block_sizes(), &[2]);
    }

    proptest! {
        #[test]
        fn distance_to_binary_is_monotone_in_delta(s in prop_oneof![-5.0f64..-1e-3, 1e-3f64..5.0], d1 in 1.0f64..1e4, d2 in 1.0f64..1e4) {
            let (lo, hi) = if d1 <= d2 { (d1, d2) } else { (d2, d1) };
            let b = if binarize(s) { 1.0 } else { 0.0 };
            prop_assert!((scaled_sigmoid(s, hi) - b).abs() <= (scaled_sigmoid(s, lo) - b).abs());
        }

        #[test]
        fn gate_grad_even_in_s(s in -2.0f64..2.0, delta in 1.0f64..100.0, up in -3.0f64..3.0) {
            let a = gate_grad(&[up], &gates_with(&[s], delta), 0, GateGradForm::ChainRule).unwrap()[0];
            let b = gate_grad(&[up], &gates_with(&[-s], delta), 0, GateGradForm::ChainRule).unwrap()[0];
            prop_assert!((a - b).abs() <= 1e-12 * a.abs().max(1.0));
        }

        #[test]
        fn penalty_descends_along_its_gradient(s in proptest::collection::vec(-2.0f64..2.0, 1..16), delta in 1.0f64..10.0, lr in 1e-4f64..1e-2) {
            let mut gs = [gates_with(&s, delta)];
            let before = penalty(gs.iter_mut(), 1.0, true);
            let g = &mut gs[0];
            let grads = g.s.grad.data().to_vec();
            for (v, d) in g.s.value.data_mut().iter_mut().zip(grads) {
                *v -= lr * d;
            }
            let after = penalty(gs.iter_mut(), 1.0, false);
            prop_assert!(after <= before + 1e-15);
        }
    }
}
