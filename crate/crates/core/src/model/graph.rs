use serde::{Deserialize, Serialize};

use crate::compute::{
    batchnorm, batchnorm_backward, conv2d, conv2d_backward, global_avg_pool,
    global_avg_pool_backward, he_init, linear, linear_backward, max_pool, max_pool_backward, relu,
    relu_backward, BnCache, BnConfig, BnState, ConvGeom, Mode, Parameter, Real, Rng, Tensor,
};
use crate::error::{shape_err, Error, Result};
use crate::gating::{channel_dot, scale_channels, GateGradForm, GateSet};

use super::align::{check_map, positions, scatter_add, subsample, subsample_backward, union};
use super::spec::{BlockSpec, GateOrder, LayerSpec, ModelSpec, OpKind, UnitSpec};

/// Which parameter set a backward pass writes gradients into.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Targets {
    Weights,
    Gates,
    Both,
}

impl Targets {
    pub fn weights(self) -> bool {
        matches!(self, Targets::Weights | Targets::Both)
    }

    pub fn gates(self) -> bool {
        matches!(self, Targets::Gates | Targets::Both)
    }
}

/// Images with their class labels.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch<T = f32> {
    pub images: Tensor<T>,
    pub labels: Vec<usize>,
}

impl<T: Real> Batch<T> {
    pub fn new(images: Tensor<T>, labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        let (n, ..) = images.dims4()?;
        if n == 0 {
            return Err(Error::InvalidArgument("empty batch".into()));
        }
        if labels.len() != n {
            return Err(shape_err!("{} labels for {} images", labels.len(), n));
        }
        if let Some(&l) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::InvalidArgument(format!(
                "label {l} outside {num_classes} classes"
            )));
        }
        Ok(Batch { images, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// Which channels of a layer's blocks exist, by original block and channel index.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockTopology {
    pub origin: usize,
    pub out_index: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Topology {
    pub layers: Vec<Vec<BlockTopology>>,
}

impl Topology {
    pub fn full(spec: &ModelSpec) -> Self {
        let layers = spec
            .layers()
            .iter()
            .map(|l| {
                l.blocks
                    .iter()
                    .enumerate()
                    .map(|(i, b)| BlockTopology {
                        origin: i,
                        out_index: (0..b.out_channels).collect(),
                    })
                    .collect()
            })
            .collect();
        Topology { layers }
    }
}

#[derive(Clone, Debug)]
struct BlockCache<T> {
    mid: Option<Tensor<T>>,
    bn: BnCache<T>,
    gate_in: Option<Tensor<T>>,
    relu_in: Option<Tensor<T>>,
}

/// One operation block: conv, BN, optional gate and ReLU.
#[derive(Clone, Debug)]
pub struct Block<T = f32> {
    pub spec: BlockSpec,
    /// Index of this block in the unpruned layer.
    pub origin: usize,
    /// Depthwise kernel `[C_in, 1, k, k]` of a separable block.
    pub depthwise: Option<Parameter<T>>,
    /// `[N, C_in, k, k]`, or `[N, C_in, 1, 1]` for separable and pointwise blocks.
    pub weight: Parameter<T>,
    pub gamma: Parameter<T>,
    pub beta: Parameter<T>,
    pub bn: BnState<T>,
    /// Original channel index of each output channel.
    pub out_index: Vec<usize>,
    cache: Option<BlockCache<T>>,
}

fn cached<T>(slot: &Option<Tensor<T>>) -> Result<&Tensor<T>> {
    slot.as_ref()
        .ok_or_else(|| Error::State("missing cached activation".into()))
}

impl<T: Real> Block<T> {
    fn skeleton(spec: BlockSpec, origin: usize, out_index: Vec<usize>, cin: usize) -> Self {
        let n = out_index.len();
        let k = spec.kernel;
        let (depthwise, weight) = match spec.kind {
            OpKind::Standard => (None, Parameter::zeros(&[n, cin, k, k])),
            OpKind::DepthwiseSeparable => (
                Some(Parameter::zeros(&[cin, 1, k, k])),
                Parameter::zeros(&[n, cin, 1, 1]),
            ),
            OpKind::Pointwise => (None, Parameter::zeros(&[n, cin, 1, 1])),
        };
        Block {
            spec,
            origin,
            depthwise,
            weight,
            gamma: Parameter::new(Tensor::full(&[n], T::one())),
            beta: Parameter::zeros(&[n]),
            bn: BnState::new(n),
            out_index,
            cache: None,
        }
    }

    pub fn out_channels(&self) -> usize {
        self.out_index.len()
    }

    pub fn in_channels(&self) -> usize {
        self.weight.shape()[1]
    }

    /// Geometry of `weight`'s convolution.
    pub fn geom(&self) -> ConvGeom {
        match self.spec.kind {
            OpKind::Standard => ConvGeom::new(self.spec.stride, self.spec.pad()),
            OpKind::DepthwiseSeparable => ConvGeom::new(1, 0),
            OpKind::Pointwise => ConvGeom::new(self.spec.stride, 0),
        }
    }

    pub fn depthwise_geom(&self) -> ConvGeom {
        ConvGeom::grouped(self.spec.stride, self.spec.pad(), self.in_channels())
    }

    fn conv_forward(&self, x: &Tensor<T>) -> Result<(Option<Tensor<T>>, Tensor<T>)> {
        match &self.depthwise {
            None => Ok((None, conv2d(x, &self.weight.value, self.geom())?)),
            Some(dw) => {
                let t = conv2d(x, &dw.value, self.depthwise_geom())?;
                let z = conv2d(&t, &self.weight.value, self.geom())?;
                Ok((Some(t), z))
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn forward(
        &mut self,
        x: &Tensor<T>,
        probs: Option<&[T]>,
        order: GateOrder,
        apply_relu: bool,
        mode: Mode,
        cfg: BnConfig,
        record: bool,
    ) -> Result<Tensor<T>> {
        let (mid, z) = self.conv_forward(x)?;
        let mut gate_in = None;
        let mut relu_in = None;
        let gate = |v: Tensor<T>, slot: &mut Option<Tensor<T>>| -> Result<Tensor<T>> {
            match probs {
                None => Ok(v),
                Some(p) => {
                    let y = scale_channels(&v, p)?;
                    if record {
                        *slot = Some(v);
                    }
                    Ok(y)
                }
            }
        };
        let act = |v: Tensor<T>, slot: &mut Option<Tensor<T>>| -> Tensor<T> {
            if !apply_relu {
                return v;
            }
            let y = relu(&v);
            if record {
                *slot = Some(v);
            }
            y
        };
        let (y, bn) = match order {
            GateOrder::ConvSsBnRelu => {
                let g = gate(z, &mut gate_in)?;
                let (b, c) = batchnorm(
                    &g,
                    &self.gamma.value,
                    &self.beta.value,
                    &mut self.bn,
                    mode,
                    cfg,
                )?;
                (act(b, &mut relu_in), c)
            }
            GateOrder::ConvBnSsRelu => {
                let (b, c) = batchnorm(
                    &z,
                    &self.gamma.value,
                    &self.beta.value,
                    &mut self.bn,
                    mode,
                    cfg,
                )?;
                let g = gate(b, &mut gate_in)?;
                (act(g, &mut relu_in), c)
            }
            GateOrder::ConvBnReluSs => {
                let (b, c) = batchnorm(
                    &z,
                    &self.gamma.value,
                    &self.beta.value,
                    &mut self.bn,
                    mode,
                    cfg,
                )?;
                let r = act(b, &mut relu_in);
                (gate(r, &mut gate_in)?, c)
            }
        };
        self.cache = record.then_some(BlockCache {
            mid,
            bn,
            gate_in,
            relu_in,
        });
        Ok(y)
    }

    fn bn_backward(
        &mut self,
        d: &Tensor<T>,
        cache: &BnCache<T>,
        need_w: bool,
    ) -> Result<Tensor<T>> {
        let (dx, pg) = batchnorm_backward(d, &self.gamma.value, cache, need_w)?;
        if let Some((dg, db)) = pg {
            self.gamma.grad.add_assign(&dg)?;
            self.beta.grad.add_assign(&db)?;
        }
        Ok(dx)
    }

    /// Returns `dx` (when requested) and `dL/dp` per channel (when gated and requested).
    #[allow(clippy::too_many_arguments)]
    fn backward(
        &mut self,
        x: &Tensor<T>,
        dy: Tensor<T>,
        probs: Option<&[T]>,
        order: GateOrder,
        apply_relu: bool,
        need_w: bool,
        need_dp: bool,
        need_dx: bool,
    ) -> Result<(Option<Tensor<T>>, Option<Vec<T>>)> {
        let cache = self
            .cache
            .take()
            .ok_or_else(|| Error::State("backward without forward".into()))?;
        let relu_back = |d: Tensor<T>| -> Result<Tensor<T>> {
            if apply_relu {
                relu_backward(&d, cached(&cache.relu_in)?)
            } else {
                Ok(d)
            }
        };
        let gate_back = |d: Tensor<T>| -> Result<(Tensor<T>, Option<Vec<T>>)> {
            match probs {
                None => Ok((d, None)),
                Some(p) => {
                    let dp = if need_dp {
                        Some(channel_dot(&d, cached(&cache.gate_in)?)?)
                    } else {
                        None
                    };
                    Ok((scale_channels(&d, p)?, dp))
                }
            }
        };
        let (dz, dp) = match order {
            GateOrder::ConvSsBnRelu => {
                let db = relu_back(dy)?;
                let dg = self.bn_backward(&db, &cache.bn, need_w)?;
                gate_back(dg)?
            }
            GateOrder::ConvBnSsRelu => {
                let dg = relu_back(dy)?;
                let (db, dp) = gate_back(dg)?;
                (self.bn_backward(&db, &cache.bn, need_w)?, dp)
            }
            GateOrder::ConvBnReluSs => {
                let (dr, dp) = gate_back(dy)?;
                let db = relu_back(dr)?;
                (self.bn_backward(&db, &cache.bn, need_w)?, dp)
            }
        };
        let dx = match self.depthwise.take() {
            None => {
                let (dx, dw) =
                    conv2d_backward(x, &self.weight.value, &dz, self.geom(), need_dx, need_w)?;
                if let Some(dw) = dw {
                    self.weight.grad.add_assign(&dw)?;
                }
                dx
            }
            Some(mut dwp) => {
                let res: Result<Option<Tensor<T>>> = (|| {
                    let mid = cached(&cache.mid)?;
                    let (dmid, dpw) =
                        conv2d_backward(mid, &self.weight.value, &dz, self.geom(), true, need_w)?;
                    if let Some(g) = dpw {
                        self.weight.grad.add_assign(&g)?;
                    }
                    let geom = ConvGeom::grouped(self.spec.stride, self.spec.pad(), dwp.shape()[0]);
                    let dmid =
                        dmid.ok_or_else(|| Error::State("missing depthwise gradient".into()))?;
                    let (dx, ddw) = conv2d_backward(x, &dwp.value, &dmid, geom, need_dx, need_w)?;
                    if let Some(g) = ddw {
                        dwp.grad.add_assign(&g)?;
                    }
                    Ok(dx)
                })();
                self.depthwise = Some(dwp);
                res?
            }
        };
        Ok((dx, dp))
    }
}

/// A gated layer: parallel blocks summed into the union of their channel maps.
#[derive(Clone, Debug)]
pub struct Layer<T = f32> {
    pub spec: LayerSpec,
    pub blocks: Vec<Block<T>>,
    /// One gate entry per existing (block, channel), in block order.
    pub gates: GateSet<T>,
    pub in_map: Vec<usize>,
    pub out_map: Vec<usize>,
    scatter: Vec<Vec<usize>>,
    input: Option<Tensor<T>>,
}

impl<T: Real> Layer<T> {
    fn skeleton(spec: &LayerSpec, topo: &[BlockTopology], in_map: Vec<usize>) -> Result<Self> {
        if topo.is_empty() {
            return Err(Error::InvalidArgument(
                "layer topology without blocks".into(),
            ));
        }
        let mut blocks = Vec::with_capacity(topo.len());
        let mut out_map = Vec::new();
        let mut last_origin = None;
        for bt in topo {
            let Some(&bs) = spec.blocks.get(bt.origin) else {
                return Err(Error::InvalidArgument(format!(
                    "block origin {} outside layer",
                    bt.origin
                )));
            };
            if last_origin.is_some_and(|o| o >= bt.origin) {
                return Err(Error::InvalidArgument(
                    "block origins must be increasing".into(),
                ));
            }
            last_origin = Some(bt.origin);
            check_map(&bt.out_index, bs.out_channels)?;
            if bt.out_index.is_empty() || bt.out_index.windows(2).any(|w| w[0] >= w[1]) {
                return Err(Error::InvalidArgument(
                    "block channel list must be sorted and non-empty".into(),
                ));
            }
            out_map = union(&out_map, &bt.out_index);
            blocks.push(Block::skeleton(
                bs,
                bt.origin,
                bt.out_index.clone(),
                in_map.len(),
            ));
        }
        let scatter = blocks
            .iter()
            .map(|b| positions(&out_map, &b.out_index))
            .collect::<Result<_>>()?;
        let sizes: Vec<usize> = blocks.iter().map(|b| b.out_channels()).collect();
        Ok(Layer {
            spec: spec.clone(),
            blocks,
            gates: GateSet::new(&sizes),
            in_map,
            out_map,
            scatter,
            input: None,
        })
    }

    /// Single block writing every output channel in order: the conventional layer.
    fn is_plain(&self) -> bool {
        self.blocks.len() == 1 && self.blocks[0].out_index == self.out_map
    }

    pub fn width(&self) -> usize {
        self.spec.width()
    }

    pub fn scatter_positions(&self, block: usize) -> &[usize] {
        &self.scatter[block]
    }

    fn block_probs(&self) -> Vec<Option<Vec<T>>> {
        (0..self.blocks.len())
            .map(|b| self.gates.enabled.then(|| self.gates.probs(b)))
            .collect()
    }

    pub(crate) fn forward(
        &mut self,
        x: &Tensor<T>,
        order: GateOrder,
        mode: Mode,
        cfg: BnConfig,
        record: bool,
    ) -> Result<Tensor<T>> {
        let (_, c, ..) = x.dims4()?;
        if c != self.in_map.len() {
            return Err(shape_err!(
                "layer expects {} input channels, got {}",
                self.in_map.len(),
                c
            ));
        }
        let probs = self.block_probs();
        let plain = self.is_plain();
        let relu = self.spec.relu;
        let mut out: Option<Tensor<T>> = None;
        for (b, blk) in self.blocks.iter_mut().enumerate() {
            let y = blk.forward(x, probs[b].as_deref(), order, relu, mode, cfg, record)?;
            if plain {
                out = Some(y);
                break;
            }
            let (n, _, h, w) = y.dims4()?;
            let acc = out.get_or_insert_with(|| Tensor::zeros(&[n, self.out_map.len(), h, w]));
            scatter_add(acc, &y, &self.scatter[b])?;
        }
        self.input = record.then(|| x.clone());
        out.ok_or_else(|| Error::State("layer without blocks".into()))
    }

    fn backward(
        &mut self,
        dout: Tensor<T>,
        order: GateOrder,
        targets: Targets,
        form: GateGradForm,
        need_dx: bool,
    ) -> Result<Option<Tensor<T>>> {
        let x = self
            .input
            .take()
            .ok_or_else(|| Error::State("backward without forward".into()))?;
        let probs = self.block_probs();
        let need_dp = targets.gates() && self.gates.enabled;
        let plain = self.is_plain();
        let relu = self.spec.relu;
        let mut dout = Some(dout);
        let mut dx: Option<Tensor<T>> = None;
        for b in 0..self.blocks.len() {
            let dy = if plain {
                dout.take()
                    .ok_or_else(|| Error::State("plain layer with several blocks".into()))?
            } else {
                cached(&dout)?.gather_channels(&self.scatter[b])?
            };
            let (dxb, dp) = self.blocks[b].backward(
                &x,
                dy,
                probs[b].as_deref(),
                order,
                relu,
                targets.weights(),
                need_dp,
                need_dx,
            )?;
            if let Some(dp) = dp {
                let range = self.gates.block_range(b);
                let delta = self.gates.delta;
                let s = &mut self.gates.s;
                for ((g, &sv), d) in s.grad.data_mut()[range.clone()]
                    .iter_mut()
                    .zip(&s.value.data()[range])
                    .zip(dp)
                {
                    *g += d * form.slope(sv, delta);
                }
            }
            match (&mut dx, dxb) {
                (None, Some(v)) => dx = Some(v),
                (Some(acc), Some(v)) => acc.add_assign(&v)?,
                _ => {}
            }
        }
        Ok(dx)
    }
}

/// `relu(second(first(x)) + skip(x))` with a parameter-free shortcut.
#[derive(Clone, Debug)]
pub struct Residual<T = f32> {
    pub first: Layer<T>,
    pub second: Layer<T>,
    pub stride: usize,
    /// Channel offset of the zero-padded shortcut.
    pub offset: usize,
    pub skip_map: Vec<usize>,
    pub out_map: Vec<usize>,
    branch_pos: Vec<usize>,
    skip_pos: Vec<usize>,
    cache: Option<(Vec<usize>, Tensor<T>)>,
}

impl<T: Real> Residual<T> {
    fn forward(
        &mut self,
        x: &Tensor<T>,
        order: GateOrder,
        mode: Mode,
        cfg: BnConfig,
        record: bool,
    ) -> Result<Tensor<T>> {
        let h = self.first.forward(x, order, mode, cfg, record)?;
        let b = self.second.forward(&h, order, mode, cfg, record)?;
        let skip = subsample(x, self.stride)?;
        let (n, _, ho, wo) = b.dims4()?;
        let (_, _, sh, sw) = skip.dims4()?;
        if (sh, sw) != (ho, wo) {
            return Err(shape_err!(
                "residual branch {:?} and shortcut {:?} disagree spatially",
                b.shape(),
                skip.shape()
            ));
        }
        let mut sum = Tensor::zeros(&[n, self.out_map.len(), ho, wo]);
        scatter_add(&mut sum, &b, &self.branch_pos)?;
        scatter_add(&mut sum, &skip, &self.skip_pos)?;
        let y = relu(&sum);
        self.cache = record.then(|| (x.shape().to_vec(), sum));
        Ok(y)
    }

    fn backward(
        &mut self,
        dy: Tensor<T>,
        order: GateOrder,
        targets: Targets,
        form: GateGradForm,
        need_dx: bool,
    ) -> Result<Option<Tensor<T>>> {
        let (in_shape, sum) = self
            .cache
            .take()
            .ok_or_else(|| Error::State("backward without forward".into()))?;
        let dsum = relu_backward(&dy, &sum)?;
        let db = dsum.gather_channels(&self.branch_pos)?;
        let dh = self.second.backward(db, order, targets, form, true)?;
        let dh = dh.ok_or_else(|| Error::State("missing branch gradient".into()))?;
        let dx = self.first.backward(dh, order, targets, form, need_dx)?;
        match dx {
            Some(mut dx) => {
                let dskip = dsum.gather_channels(&self.skip_pos)?;
                dx.add_assign(&subsample_backward(&dskip, self.stride, &in_shape)?)?;
                Ok(Some(dx))
            }
            None => Ok(None),
        }
    }
}

#[derive(Clone, Debug)]
pub struct Pool {
    pub kernel: usize,
    pub stride: usize,
    cache: Option<(Vec<usize>, Vec<usize>)>,
}

#[derive(Clone, Debug)]
#[allow(clippy::large_enum_variant)]
pub enum Unit<T = f32> {
    Layer(Layer<T>),
    Residual(Residual<T>),
    MaxPool(Pool),
}

/// Global average pooling followed by a linear classifier.
#[derive(Clone, Debug)]
pub struct Head<T = f32> {
    pub weight: Parameter<T>,
    pub bias: Parameter<T>,
    pub in_map: Vec<usize>,
    cache: Option<(Vec<usize>, Tensor<T>)>,
}

/// Executable network: parameters, BN statistics, gates and channel maps.
#[derive(Clone, Debug)]
pub struct Model<T = f32> {
    pub spec: ModelSpec,
    pub units: Vec<Unit<T>>,
    pub head: Head<T>,
    pub bn_config: BnConfig,
    pub grad_form: GateGradForm,
    recorded: Option<Mode>,
}

impl<T: Real> Model<T> {
    /// Full-width network with He-normal conv and classifier weights, unit BN scale,
    /// zero biases and disabled gates.
    pub fn new(spec: &ModelSpec, rng: &mut Rng) -> Result<Self> {
        let mut m = Self::skeleton(spec, &Topology::full(spec))?;
        for (name, p) in m.params_mut() {
            if name.ends_with(".w") || name.ends_with(".dw") {
                p.value = he_init(rng, p.value.shape())?;
            }
        }
        Ok(m)
    }

    /// Zero-weight network restricted to `topo`; channel maps are derived from it.
    pub fn skeleton(spec: &ModelSpec, topo: &Topology) -> Result<Self> {
        spec.validate()?;
        let layer_specs = spec.layers();
        if topo.layers.len() != layer_specs.len() {
            return Err(Error::InvalidArgument(format!(
                "topology has {} layers, spec {}",
                topo.layers.len(),
                layer_specs.len()
            )));
        }
        let mut cur: Vec<usize> = (0..spec.in_channels).collect();
        let mut width = spec.in_channels;
        let mut li = 0;
        let mut units = Vec::with_capacity(spec.units.len());
        for u in &spec.units {
            match u {
                UnitSpec::Layer(ls) => {
                    let layer = Layer::skeleton(ls, &topo.layers[li], cur)?;
                    li += 1;
                    cur = layer.out_map.clone();
                    width = ls.width();
                    units.push(Unit::Layer(layer));
                }
                UnitSpec::Residual { first, second, .. } => {
                    let a = Layer::skeleton(first, &topo.layers[li], cur.clone())?;
                    let b = Layer::skeleton(second, &topo.layers[li + 1], a.out_map.clone())?;
                    li += 2;
                    let offset = (second.width() - width) / 2;
                    let skip_map: Vec<usize> = cur.iter().map(|&c| c + offset).collect();
                    let out_map = union(&b.out_map, &skip_map);
                    let branch_pos = positions(&out_map, &b.out_map)?;
                    let skip_pos = positions(&out_map, &skip_map)?;
                    cur = out_map.clone();
                    width = second.width();
                    units.push(Unit::Residual(Residual {
                        first: a,
                        second: b,
                        stride: first.stride(),
                        offset,
                        skip_map,
                        out_map,
                        branch_pos,
                        skip_pos,
                        cache: None,
                    }));
                }
                UnitSpec::MaxPool { kernel, stride } => units.push(Unit::MaxPool(Pool {
                    kernel: *kernel,
                    stride: *stride,
                    cache: None,
                })),
            }
        }
        let head = Head {
            weight: Parameter::zeros(&[spec.num_classes, cur.len()]),
            bias: Parameter::zeros(&[spec.num_classes]),
            in_map: cur,
            cache: None,
        };
        Ok(Model {
            spec: spec.clone(),
            units,
            head,
            bn_config: BnConfig::default(),
            grad_form: GateGradForm::default(),
            recorded: None,
        })
    }

    pub fn topology(&self) -> Topology {
        let layers = self
            .layers()
            .iter()
            .map(|l| {
                l.blocks
                    .iter()
                    .map(|b| BlockTopology {
                        origin: b.origin,
                        out_index: b.out_index.clone(),
                    })
                    .collect()
            })
            .collect();
        Topology { layers }
    }

    /// Same network in another scalar type, caches dropped.
    pub fn cast<U: Real>(&self) -> Result<Model<U>> {
        let mut out = Model::<U>::skeleton(&self.spec, &self.topology())?;
        out.bn_config = self.bn_config;
        out.grad_form = self.grad_form;
        for ((_, src), (_, dst)) in self.params().into_iter().zip(out.params_mut()) {
            dst.value = src.value.cast();
            dst.grad = src.grad.cast();
            dst.momentum = src.momentum.cast();
        }
        for ((_, src), (_, dst)) in self.bn_states().into_iter().zip(out.bn_states_mut()) {
            dst.running_mean = src.running_mean.cast();
            dst.running_var = src.running_var.cast();
            dst.populated = src.populated;
        }
        for (src, dst) in self.layers().into_iter().zip(out.layers_mut()) {
            dst.gates.s.value = src.gates.s.value.cast();
            dst.gates.s.grad = src.gates.s.grad.cast();
            dst.gates.s.momentum = src.gates.s.momentum.cast();
            dst.gates.delta = U::from_f64c(src.gates.delta.as_f64());
            dst.gates.enabled = src.gates.enabled;
        }
        Ok(out)
    }

    pub fn num_classes(&self) -> usize {
        self.spec.num_classes
    }

    pub fn order(&self) -> GateOrder {
        self.spec.order
    }

    /// Gated layers in execution order, with their parameter-name prefixes.
    pub fn named_layers(&self) -> Vec<(String, &Layer<T>)> {
        let mut out = Vec::new();
        for (i, u) in self.units.iter().enumerate() {
            match u {
                Unit::Layer(l) => out.push((format!("u{i}"), l)),
                Unit::Residual(r) => {
                    out.push((format!("u{i}.a"), &r.first));
                    out.push((format!("u{i}.b"), &r.second));
                }
                Unit::MaxPool(_) => {}
            }
        }
        out
    }

    pub fn named_layers_mut(&mut self) -> Vec<(String, &mut Layer<T>)> {
        unit_layers_mut(&mut self.units)
    }

    pub fn layers(&self) -> Vec<&Layer<T>> {
        self.named_layers().into_iter().map(|(_, l)| l).collect()
    }

    pub fn layers_mut(&mut self) -> Vec<&mut Layer<T>> {
        self.named_layers_mut()
            .into_iter()
            .map(|(_, l)| l)
            .collect()
    }

    pub fn gates(&self) -> impl Iterator<Item = &GateSet<T>> {
        self.layers().into_iter().map(|l| &l.gates)
    }

    pub fn gates_mut(&mut self) -> impl Iterator<Item = &mut GateSet<T>> {
        self.layers_mut().into_iter().map(|l| &mut l.gates)
    }

    /// Weights in a fixed order, named like `u3.a.b0.w`.
    pub fn params(&self) -> Vec<(String, &Parameter<T>)> {
        let mut out = Vec::new();
        for (prefix, l) in self.named_layers() {
            for b in &l.blocks {
                let p = format!("{prefix}.b{}", b.origin);
                if let Some(dw) = &b.depthwise {
                    out.push((format!("{p}.dw"), dw));
                }
                out.push((format!("{p}.w"), &b.weight));
                out.push((format!("{p}.gamma"), &b.gamma));
                out.push((format!("{p}.beta"), &b.beta));
            }
        }
        out.push(("head.w".into(), &self.head.weight));
        out.push(("head.bias".into(), &self.head.bias));
        out
    }

    pub fn params_mut(&mut self) -> Vec<(String, &mut Parameter<T>)> {
        let mut out = Vec::new();
        for (prefix, l) in unit_layers_mut(&mut self.units) {
            for b in &mut l.blocks {
                let p = format!("{prefix}.b{}", b.origin);
                if let Some(dw) = &mut b.depthwise {
                    out.push((format!("{p}.dw"), dw));
                }
                out.push((format!("{p}.w"), &mut b.weight));
                out.push((format!("{p}.gamma"), &mut b.gamma));
                out.push((format!("{p}.beta"), &mut b.beta));
            }
        }
        out.push(("head.w".into(), &mut self.head.weight));
        out.push(("head.bias".into(), &mut self.head.bias));
        out
    }

    pub fn bn_states(&self) -> Vec<(String, &BnState<T>)> {
        let mut out = Vec::new();
        for (prefix, l) in self.named_layers() {
            for b in &l.blocks {
                out.push((format!("{prefix}.b{}.bn", b.origin), &b.bn));
            }
        }
        out
    }

    pub fn bn_states_mut(&mut self) -> Vec<(String, &mut BnState<T>)> {
        let mut out = Vec::new();
        for (prefix, l) in self.named_layers_mut() {
            for b in &mut l.blocks {
                out.push((format!("{prefix}.b{}.bn", b.origin), &mut b.bn));
            }
        }
        out
    }

    pub fn num_weights(&self) -> usize {
        self.params().iter().map(|(_, p)| p.len()).sum()
    }

    pub fn zero_grad(&mut self) {
        for (_, p) in self.params_mut() {
            p.zero_grad();
        }
        for g in self.gates_mut() {
            g.s.zero_grad();
        }
    }

    /// Enables every gate set with `s = 0` and the given scale.
    pub fn enable_gates(&mut self, delta: f64) -> Result<()> {
        for g in self.gates_mut() {
            g.reset_enabled();
            g.set_delta(delta)?;
        }
        Ok(())
    }

    pub fn disable_gates(&mut self) {
        for g in self.gates_mut() {
            g.enabled = false;
        }
    }

    pub fn set_delta(&mut self, delta: f64) -> Result<()> {
        for g in self.gates_mut() {
            g.set_delta(delta)?;
        }
        Ok(())
    }

    pub fn gates_enabled(&self) -> bool {
        self.gates().any(|g| g.enabled)
    }

    /// Forward pass that records what [`Model::backward`] needs.
    pub fn forward(&mut self, x: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        self.recorded = None;
        let y = self.run(x, mode, true)?;
        self.recorded = Some(mode);
        Ok(y)
    }

    /// Forward pass without caching; train mode still updates BN statistics.
    pub fn infer(&mut self, x: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        self.recorded = None;
        self.run(x, mode, false)
    }

    fn run(&mut self, x: &Tensor<T>, mode: Mode, record: bool) -> Result<Tensor<T>> {
        let (_, c, h, w) = x.dims4()?;
        if c != self.spec.in_channels || h != w || h != self.spec.input_size {
            return Err(shape_err!(
                "input {:?} does not match [*, {}, {2}, {2}]",
                x.shape(),
                self.spec.in_channels,
                self.spec.input_size
            ));
        }
        let order = self.spec.order;
        let cfg = self.bn_config;
        let mut cur: Option<Tensor<T>> = None;
        for u in &mut self.units {
            let input = cur.as_ref().unwrap_or(x);
            let y = match u {
                Unit::Layer(l) => l.forward(input, order, mode, cfg, record)?,
                Unit::Residual(r) => r.forward(input, order, mode, cfg, record)?,
                Unit::MaxPool(p) => {
                    let (y, arg) = max_pool(input, p.kernel, p.stride)?;
                    p.cache = record.then(|| (input.shape().to_vec(), arg));
                    y
                }
            };
            cur = Some(y);
        }
        let feat_in = cur.as_ref().unwrap_or(x);
        let feat = global_avg_pool(feat_in)?;
        let logits = linear(&feat, &self.head.weight.value, &self.head.bias.value)?;
        self.head.cache = record.then(|| (feat_in.shape().to_vec(), feat));
        Ok(logits)
    }

    /// Accumulates gradients of the loss whose logit gradient is `dlogits` into the
    /// selected parameter set; the other set is left untouched.
    pub fn backward(&mut self, dlogits: &Tensor<T>, targets: Targets) -> Result<()> {
        let mode = self
            .recorded
            .take()
            .ok_or_else(|| Error::State("backward without a recorded forward".into()))?;
        if targets.weights() && mode != Mode::Train {
            return Err(Error::State(
                "weight gradients need a train-mode forward".into(),
            ));
        }
        let order = self.spec.order;
        let form = self.grad_form;
        let (in_shape, feat) = self
            .head
            .cache
            .take()
            .ok_or_else(|| Error::State("backward without forward".into()))?;
        let (dfeat, dw, db) = linear_backward(&feat, &self.head.weight.value, dlogits, true)?;
        if targets.weights() {
            self.head.weight.grad.add_assign(&dw)?;
            self.head.bias.grad.add_assign(&db)?;
        }
        let dfeat = dfeat.ok_or_else(|| Error::State("missing feature gradient".into()))?;
        let mut d = global_avg_pool_backward(&dfeat, &in_shape)?;
        for (i, u) in self.units.iter_mut().enumerate().rev() {
            let need_dx = i > 0;
            let next = match u {
                Unit::Layer(l) => l.backward(d, order, targets, form, need_dx)?,
                Unit::Residual(r) => r.backward(d, order, targets, form, need_dx)?,
                Unit::MaxPool(p) => {
                    let (shape, arg) = p
                        .cache
                        .take()
                        .ok_or_else(|| Error::State("backward without forward".into()))?;
                    Some(max_pool_backward(&d, &arg, &shape)?)
                }
            };
            match next {
                Some(v) => d = v,
                None => break,
            }
        }
        Ok(())
    }
}

fn unit_layers_mut<T>(units: &mut [Unit<T>]) -> Vec<(String, &mut Layer<T>)> {
    let mut out = Vec::new();
    for (i, u) in units.iter_mut().enumerate() {
        match u {
            Unit::Layer(l) => out.push((format!("u{i}"), l)),
            Unit::Residual(r) => {
                out.push((format!("u{i}.a"), &mut r.first));
                out.push((format!("u{i}.b"), &mut r.second));
            }
            Unit::MaxPool(_) => {}
        }
    }
    out
}
