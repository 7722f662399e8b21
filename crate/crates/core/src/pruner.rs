//! Turning converged gates into a smaller network, and counting what it costs.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::compute::{ConvGeom, Mode, Real, Rng, Tensor};
use crate::error::{shape_err, Error, Result};
use crate::gating::binarize;
use crate::model::{BlockTopology, Layer, Model, ModelSpec, OpKind, Topology, Unit};

/// Scale used when forcing gates to exact zeros and ones.
pub const BINARY_DELTA: f64 = 1e4;

/// Keep flags of one block, with the original index of each current channel.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockMask {
    pub origin: usize,
    pub index: Vec<usize>,
    pub keep: Vec<bool>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerMask {
    pub blocks: Vec<BlockMask>,
    /// Every gate was off and one channel was kept anyway.
    pub rescued: bool,
}

impl LayerMask {
    pub fn kept(&self) -> usize {
        self.blocks
            .iter()
            .map(|b| b.keep.iter().filter(|&&k| k).count())
            .sum()
    }

    pub fn len(&self) -> usize {
        self.blocks.iter().map(|b| b.keep.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChannelMask {
    pub layers: Vec<LayerMask>,
}

impl ChannelMask {
    /// Keeps every existing channel.
    pub fn full<T: Real>(model: &Model<T>) -> Self {
        Self::from_fn(model, |_, _| true)
    }

    fn from_fn<T: Real>(model: &Model<T>, mut keep: impl FnMut(&Layer<T>, usize) -> bool) -> Self {
        let layers = model
            .layers()
            .into_iter()
            .map(|l| {
                let mut flat = 0;
                let blocks = l
                    .blocks
                    .iter()
                    .map(|b| {
                        let keep = (0..b.out_channels())
                            .map(|_| {
                                flat += 1;
                                keep(l, flat - 1)
                            })
                            .collect();
                        BlockMask {
                            origin: b.origin,
                            index: b.out_index.clone(),
                            keep,
                        }
                    })
                    .collect();
                LayerMask {
                    blocks,
                    rescued: false,
                }
            })
            .collect();
        ChannelMask { layers }
    }

    pub fn kept(&self) -> usize {
        self.layers.iter().map(|l| l.kept()).sum()
    }

    pub fn is_full(&self) -> bool {
        self.layers.iter().all(|l| l.kept() == l.len())
    }

    pub fn rescued_layers(&self) -> Vec<usize> {
        self.layers
            .iter()
            .enumerate()
            .filter(|(_, l)| l.rescued)
            .map(|(i, _)| i)
            .collect()
    }
}

/// What to do when every gate of a layer is off.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CollapsePolicy {
    /// Keep the channel with the largest `s` (lowest index on ties).
    #[default]
    KeepMax,
    /// Leave the layer empty; [`prune`] then refuses it.
    Strict,
}

/// `keep = binarize(s)` per gate, then the collapse policy per layer.
pub fn derive_masks<T: Real>(model: &Model<T>, policy: CollapsePolicy) -> ChannelMask {
    let mut masks = ChannelMask::from_fn(model, |l, j| binarize(l.gates.s.value.data()[j]));
    for (lm, layer) in masks.layers.iter_mut().zip(model.layers()) {
        if lm.kept() > 0 || policy == CollapsePolicy::Strict {
            continue;
        }
        let s = layer.gates.s.value.data();
        let mut best = 0;
        for (j, &v) in s.iter().enumerate() {
            if v > s[best] {
                best = j;
            }
        }
        let mut flat = best;
        for b in &mut lm.blocks {
            if flat < b.keep.len() {
                b.keep[flat] = true;
                break;
            }
            flat -= b.keep.len();
        }
        lm.rescued = true;
    }
    masks
}

fn check_masks<T: Real>(model: &Model<T>, masks: &ChannelMask) -> Result<()> {
    let layers = model.layers();
    if layers.len() != masks.layers.len() {
        return Err(Error::InvalidArgument(format!(
            "mask has {} layers, model {}",
            masks.layers.len(),
            layers.len()
        )));
    }
    for (li, (l, m)) in layers.iter().zip(&masks.layers).enumerate() {
        if l.blocks.len() != m.blocks.len() {
            return Err(Error::InvalidArgument(format!(
                "layer {li}: mask has {} blocks, model {}",
                m.blocks.len(),
                l.blocks.len()
            )));
        }
        for (b, bm) in l.blocks.iter().zip(&m.blocks) {
            if b.origin != bm.origin || b.out_index != bm.index || bm.keep.len() != bm.index.len() {
                return Err(Error::InvalidArgument(format!(
                    "layer {li}: mask does not describe block {}",
                    b.origin
                )));
            }
        }
        if m.kept() == 0 {
            return Err(Error::LayerCollapse { layer: li });
        }
    }
    Ok(())
}

fn gather_cols<T: Real>(w: &Tensor<T>, cols: &[usize]) -> Result<Tensor<T>> {
    let (r, c) = w.dims2()?;
    let g = w.clone().reshape(&[r, c, 1, 1])?.gather_channels(cols)?;
    g.reshape(&[r, cols.len()])
}

fn positions_in(map: &[usize], sub: &[usize]) -> Result<Vec<usize>> {
    sub.iter()
        .map(|v| {
            map.iter()
                .position(|m| m == v)
                .ok_or_else(|| shape_err!("channel {v} not present before pruning"))
        })
        .collect()
}

/// Removes every channel whose keep flag is off, together with the matching input
/// slices of its consumers. Surviving values are copied bit for bit, BN running
/// statistics are gathered, and all gates come out disabled.
pub fn prune<T: Real>(model: &Model<T>, masks: &ChannelMask) -> Result<Model<T>> {
    check_masks(model, masks)?;
    let topo = Topology {
        layers: masks
            .layers
            .iter()
            .map(|lm| {
                lm.blocks
                    .iter()
                    .filter_map(|bm| {
                        let out_index: Vec<usize> = bm
                            .index
                            .iter()
                            .zip(&bm.keep)
                            .filter(|(_, &k)| k)
                            .map(|(&i, _)| i)
                            .collect();
                        (!out_index.is_empty()).then_some(BlockTopology {
                            origin: bm.origin,
                            out_index,
                        })
                    })
                    .collect()
            })
            .collect(),
    };
    let mut out = Model::<T>::skeleton(&model.spec, &topo)?;
    out.bn_config = model.bn_config;
    out.grad_form = model.grad_form;
    let old_layers = model.layers();
    for ((old, new), lm) in old_layers
        .into_iter()
        .zip(out.layers_mut())
        .zip(&masks.layers)
    {
        let cols = positions_in(&old.in_map, &new.in_map)?;
        for nb in &mut new.blocks {
            let ob = old
                .blocks
                .iter()
                .find(|b| b.origin == nb.origin)
                .ok_or_else(|| Error::State(format!("block {} vanished", nb.origin)))?;
            let rows = positions_in(&ob.out_index, &nb.out_index)?;
            nb.weight.value = ob.weight.value.gather_outer(&rows).gather_channels(&cols)?;
            if let (Some(od), Some(nd)) = (&ob.depthwise, &mut nb.depthwise) {
                nd.value = od.value.gather_outer(&cols);
            }
            nb.gamma.value = ob.gamma.value.gather_outer(&rows);
            nb.beta.value = ob.beta.value.gather_outer(&rows);
            nb.bn.running_mean = ob.bn.running_mean.gather_outer(&rows);
            nb.bn.running_var = ob.bn.running_var.gather_outer(&rows);
            nb.bn.populated = ob.bn.populated;
        }
        let keep: Vec<Vec<bool>> = lm.blocks.iter().map(|b| b.keep.clone()).collect();
        let mut gates = old.gates.retain(&keep)?;
        gates.enabled = false;
        if gates.block_sizes() != new.gates.block_sizes() {
            return Err(Error::State(
                "gate layout disagrees with pruned blocks".into(),
            ));
        }
        new.gates = gates;
    }
    let cols = positions_in(&model.head.in_map, &out.head.in_map)?;
    out.head.weight.value = gather_cols(&model.head.weight.value, &cols)?;
    out.head.bias.value = model.head.bias.value.clone();
    Ok(out)
}

/// Copy of `model` whose gates are exactly the keep flags: `s = ±1` at a scale where
/// the sigmoid rounds to 0 or 1.
pub fn apply_masks_as_gates<T: Real>(model: &Model<T>, masks: &ChannelMask) -> Result<Model<T>> {
    check_masks(model, masks)?;
    let mut m = model.clone();
    for (l, lm) in m.layers_mut().into_iter().zip(&masks.layers) {
        let flags: Vec<bool> = lm
            .blocks
            .iter()
            .flat_map(|b| b.keep.iter().copied())
            .collect();
        for (s, k) in l.gates.s.value.data_mut().iter_mut().zip(flags) {
            *s = if k { T::one() } else { -T::one() };
        }
        l.gates.delta = T::from_f64c(BINARY_DELTA);
        l.gates.enabled = true;
    }
    Ok(m)
}

/// Largest absolute logit difference between two models in eval mode over
/// `num_inputs` standard-normal images.
pub fn equivalence_check<T: Real>(
    gated: &Model<T>,
    pruned: &Model<T>,
    num_inputs: usize,
    rng: &mut Rng,
) -> Result<f64> {
    for g in gated.gates().filter(|g| g.enabled) {
        if g.all_probs()
            .iter()
            .any(|&p| p != T::zero() && p != T::one())
        {
            return Err(Error::InvalidArgument(
                "gated model has non-binary gates".into(),
            ));
        }
    }
    if gated.spec.in_channels != pruned.spec.in_channels
        || gated.spec.input_size != pruned.spec.input_size
    {
        return Err(shape_err!("models disagree on input shape"));
    }
    let (mut a, mut b) = (gated.clone(), pruned.clone());
    let (c, s) = (gated.spec.in_channels, gated.spec.input_size);
    let mut worst = 0f64;
    let mut done = 0;
    while done < num_inputs {
        let n = (num_inputs - done).min(25);
        let data = (0..n * c * s * s)
            .map(|_| T::from_f64c(rng.normal()))
            .collect();
        let x = Tensor::from_vec(&[n, c, s, s], data)?;
        let ya = a.infer(&x, Mode::Eval)?;
        let yb = b.infer(&x, Mode::Eval)?;
        if ya.shape() != yb.shape() {
            return Err(shape_err!("logits {:?} vs {:?}", ya.shape(), yb.shape()));
        }
        worst = worst.max(ya.max_abs_diff(&yb));
        done += n;
    }
    Ok(worst)
}

fn out_size(size: usize, kernel: usize, stride: usize) -> Result<usize> {
    ConvGeom::new(stride, kernel / 2)
        .out_size(size, kernel)
        .ok_or_else(|| shape_err!("kernel {kernel} does not fit {size}"))
}

/// Multiply-accumulates of each gated layer, in execution order.
pub fn layer_flops<T: Real>(model: &Model<T>) -> Result<Vec<u64>> {
    let mut size = model.spec.input_size;
    let mut out = Vec::new();
    let mut layer = |l: &Layer<T>, size: usize| -> Result<usize> {
        let ho = out_size(size, l.spec.blocks[0].kernel, l.spec.stride())?;
        let hw = (ho * ho) as u64;
        let cin = l.in_map.len() as u64;
        let mut total = 0u64;
        for b in &l.blocks {
            let n = b.out_channels() as u64;
            let k2 = (b.spec.kernel * b.spec.kernel) as u64;
            total += match b.spec.kind {
                OpKind::Standard => k2 * cin * n * hw,
                OpKind::DepthwiseSeparable => k2 * cin * hw + cin * n * hw,
                OpKind::Pointwise => cin * n * hw,
            };
        }
        out.push(total);
        Ok(ho)
    };
    for u in &model.units {
        size = match u {
            Unit::Layer(l) => layer(l, size)?,
            Unit::Residual(r) => {
                let h = layer(&r.first, size)?;
                layer(&r.second, h)?
            }
            Unit::MaxPool(p) => (size - p.kernel) / p.stride + 1,
        };
    }
    Ok(out)
}

/// Convolution and classifier multiply-accumulates; BN, ReLU, pooling and biases
/// are not counted.
pub fn count_flops<T: Real>(model: &Model<T>) -> Result<u64> {
    let head = (model.head.in_map.len() * model.spec.num_classes) as u64;
    Ok(layer_flops(model)?.iter().sum::<u64>() + head)
}

/// Conv and classifier weights, classifier bias and BN scale/shift.
pub fn count_params<T: Real>(model: &Model<T>) -> u64 {
    model.num_weights() as u64
}

/// `log10` of the number of channel subsets, `2^(sum M N)`.
pub fn search_space_log10(spec: &ModelSpec) -> f64 {
    std::f64::consts::LOG10_2 * spec.total_gates() as f64
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerReport {
    pub name: String,
    pub kept: usize,
    pub total: usize,
    pub rescued: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArchReport {
    pub model: String,
    pub layers: Vec<LayerReport>,
    pub flops: u64,
    pub params: u64,
    pub baseline_flops: u64,
    pub baseline_params: u64,
    /// `baseline / current`.
    pub flops_ratio: f64,
    pub params_ratio: f64,
    pub search_space_log10: f64,
    pub lambda_a: f64,
    pub seed: u64,
}

/// `"125.49(1.00×)"`: value in millions and compression ratio, two decimals each.
pub fn format_cell(value: u64, ratio: f64) -> String {
    format!("{:.2}({:.2}×)", value as f64 / 1e6, ratio)
}

impl ArchReport {
    pub fn new<T: Real>(
        baseline: &Model<T>,
        current: &Model<T>,
        masks: Option<&ChannelMask>,
        lambda_a: f64,
        seed: u64,
    ) -> Result<Self> {
        let flops = count_flops(current)?;
        let params = count_params(current);
        let baseline_flops = count_flops(baseline)?;
        let baseline_params = count_params(baseline);
        if flops == 0 || params == 0 {
            return Err(Error::State("model with no cost".into()));
        }
        let spec_layers = current.spec.layers();
        let layers = current
            .named_layers()
            .into_iter()
            .enumerate()
            .map(|(i, (name, l))| LayerReport {
                name,
                kept: l.blocks.iter().map(|b| b.out_channels()).sum(),
                total: spec_layers[i].gate_count(),
                rescued: masks.is_some_and(|m| m.layers.get(i).is_some_and(|lm| lm.rescued)),
            })
            .collect();
        Ok(ArchReport {
            model: current.spec.name.clone(),
            layers,
            flops,
            params,
            baseline_flops,
            baseline_params,
            flops_ratio: baseline_flops as f64 / flops as f64,
            params_ratio: baseline_params as f64 / params as f64,
            search_space_log10: search_space_log10(&current.spec),
            lambda_a,
            seed,
        })
    }

    pub fn flops_cell(&self) -> String {
        format_cell(self.flops, self.flops_ratio)
    }

    pub fn params_cell(&self) -> String {
        format_cell(self.params, self.params_ratio)
    }
}

impl fmt::Display for ArchReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "# {} (1 FLOP = 1 multiply-accumulate; BN, ReLU and bias excluded)",
            self.model
        )?;
        writeln!(f, "FLOPs (M)   {}", self.flops_cell())?;
        writeln!(f, "Params (M)  {}", self.params_cell())?;
        writeln!(
            f,
            "search space 10^{:.2}, lambda_a {}, seed {}",
            self.search_space_log10, self.lambda_a, self.seed
        )?;
        for l in &self.layers {
            writeln!(
                f,
                "{:<10} {:>5}/{:<5}{}",
                l.name,
                l.kept,
                l.total,
                if l.rescued { " rescued" } else { "" }
            )?;
        }
        Ok(())
    }
}
