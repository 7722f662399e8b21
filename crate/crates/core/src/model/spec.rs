use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OpKind {
    /// Dense k x k convolution.
    Standard,
    /// Depthwise k x k convolution followed directly by a 1 x 1 projection.
    DepthwiseSeparable,
    /// 1 x 1 convolution.
    Pointwise,
}

/// One of the parallel operation blocks of a layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockSpec {
    pub kind: OpKind,
    pub kernel: usize,
    pub stride: usize,
    pub out_channels: usize,
}

impl BlockSpec {
    pub fn conv(kernel: usize, stride: usize, out_channels: usize) -> Self {
        BlockSpec {
            kind: OpKind::Standard,
            kernel,
            stride,
            out_channels,
        }
    }

    pub fn separable(kernel: usize, stride: usize, out_channels: usize) -> Self {
        BlockSpec {
            kind: OpKind::DepthwiseSeparable,
            kernel,
            stride,
            out_channels,
        }
    }

    pub fn pointwise(stride: usize, out_channels: usize) -> Self {
        BlockSpec {
            kind: OpKind::Pointwise,
            kernel: 1,
            stride,
            out_channels,
        }
    }

    pub fn pad(&self) -> usize {
        self.kernel / 2
    }
}

/// Where the scaled-sigmoid gate sits relative to batch norm and ReLU.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum GateOrder {
    #[serde(rename = "conv-ss-bn-relu")]
    ConvSsBnRelu,
    #[default]
    #[serde(rename = "conv-bn-ss-relu")]
    ConvBnSsRelu,
    #[serde(rename = "conv-bn-relu-ss")]
    ConvBnReluSs,
}

impl GateOrder {
    pub const ALL: [GateOrder; 3] = [
        GateOrder::ConvSsBnRelu,
        GateOrder::ConvBnSsRelu,
        GateOrder::ConvBnReluSs,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            GateOrder::ConvSsBnRelu => "conv-ss-bn-relu",
            GateOrder::ConvBnSsRelu => "conv-bn-ss-relu",
            GateOrder::ConvBnReluSs => "conv-bn-relu-ss",
        }
    }
}

impl fmt::Display for GateOrder {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for GateOrder {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        GateOrder::ALL
            .into_iter()
            .find(|o| o.as_str().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::InvalidArgument(format!("unknown gate order `{s}`")))
    }
}

/// A gated layer: `M >= 1` parallel blocks whose outputs are summed.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub blocks: Vec<BlockSpec>,
    /// Apply ReLU per block. Off for the last layer of a residual branch, whose
    /// ReLU comes after the skip addition.
    pub relu: bool,
}

impl LayerSpec {
    pub fn single(block: BlockSpec) -> Self {
        LayerSpec {
            blocks: vec![block],
            relu: true,
        }
    }

    pub fn multi(blocks: Vec<BlockSpec>) -> Self {
        LayerSpec { blocks, relu: true }
    }

    pub fn width(&self) -> usize {
        self.blocks[0].out_channels
    }

    pub fn stride(&self) -> usize {
        self.blocks[0].stride
    }

    /// Gate count, `M * N`.
    pub fn gate_count(&self) -> usize {
        self.blocks.iter().map(|b| b.out_channels).sum()
    }

    pub fn validate(&self) -> Result<()> {
        let Some(first) = self.blocks.first() else {
            return Err(Error::InvalidArgument("layer without blocks".into()));
        };
        for b in &self.blocks {
            if b.out_channels == 0 {
                return Err(Error::InvalidArgument(
                    "block with zero output channels".into(),
                ));
            }
            if b.kernel % 2 == 0 {
                return Err(Error::InvalidArgument(format!(
                    "even kernel size {}",
                    b.kernel
                )));
            }
            if b.stride == 0 {
                return Err(Error::InvalidArgument("zero stride".into()));
            }
            if b.kind == OpKind::Pointwise && b.kernel != 1 {
                return Err(Error::InvalidArgument(
                    "pointwise block with kernel != 1".into(),
                ));
            }
            if b.stride != first.stride || b.out_channels != first.out_channels {
                return Err(Error::InvalidArgument(
                    "blocks of one layer must share stride and width".into(),
                ));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum UnitSpec {
    Layer(LayerSpec),
    /// `relu(second(first(x)) + skip(x))`; the skip subsamples by the first layer's
    /// stride and zero-pads channels symmetrically when the width grows.
    Residual {
        first: LayerSpec,
        second: LayerSpec,
        downsample: bool,
    },
    MaxPool {
        kernel: usize,
        stride: usize,
    },
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub name: String,
    pub in_channels: usize,
    pub input_size: usize,
    pub num_classes: usize,
    pub order: GateOrder,
    pub units: Vec<UnitSpec>,
}

impl ModelSpec {
    /// Gated layers in execution order.
    pub fn layers(&self) -> Vec<&LayerSpec> {
        let mut out = Vec::new();
        for u in &self.units {
            match u {
                UnitSpec::Layer(l) => out.push(l),
                UnitSpec::Residual { first, second, .. } => {
                    out.push(first);
                    out.push(second);
                }
                UnitSpec::MaxPool { .. } => {}
            }
        }
        out
    }

    /// `sum_l M^l * N^l`.
    pub fn total_gates(&self) -> usize {
        self.layers().iter().map(|l| l.gate_count()).sum()
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_classes == 0 || self.in_channels == 0 || self.input_size == 0 {
            return Err(Error::InvalidArgument(
                "model needs classes, input channels and input size".into(),
            ));
        }
        let mut channels = self.in_channels;
        let mut size = self.input_size;
        for (i, u) in self.units.iter().enumerate() {
            match u {
                UnitSpec::Layer(l) => {
                    l.validate()?;
                    channels = l.width();
                    size = size.div_ceil(l.stride());
                }
                UnitSpec::Residual {
                    first,
                    second,
                    downsample,
                } => {
                    first.validate()?;
                    second.validate()?;
                    if second.relu {
                        return Err(Error::InvalidArgument(format!(
                            "unit {i}: residual second layer must not apply relu"
                        )));
                    }
                    if second.stride() != 1 || first.width() != second.width() {
                        return Err(Error::InvalidArgument(format!(
                            "unit {i}: residual second layer must keep shape"
                        )));
                    }
                    let out = second.width();
                    if out < channels || !(out - channels).is_multiple_of(2) {
                        return Err(Error::InvalidArgument(format!(
                            "unit {i}: skip cannot pad {channels} to {out} channels"
                        )));
                    }
                    let needs = first.stride() != 1 || out != channels;
                    if needs != *downsample {
                        return Err(Error::InvalidArgument(format!(
                            "unit {i}: downsample flag inconsistent with shapes"
                        )));
                    }
                    channels = out;
                    size = size.div_ceil(first.stride());
                }
                UnitSpec::MaxPool { kernel, stride } => {
                    if *kernel == 0 || *stride == 0 || size < *kernel {
                        return Err(Error::InvalidArgument(format!("unit {i}: bad pool")));
                    }
                    size = (size - kernel) / stride + 1;
                }
            }
        }
        Ok(())
    }
}

fn conv_layer(width: usize, stride: usize) -> UnitSpec {
    UnitSpec::Layer(LayerSpec::single(BlockSpec::conv(3, stride, width)))
}

fn residual(in_width: usize, width: usize, stride: usize) -> UnitSpec {
    UnitSpec::Residual {
        first: LayerSpec::single(BlockSpec::conv(3, stride, width)),
        second: LayerSpec {
            blocks: vec![BlockSpec::conv(3, 1, width)],
            relu: false,
        },
        downsample: stride != 1 || in_width != width,
    }
}

fn pool() -> UnitSpec {
    UnitSpec::MaxPool {
        kernel: 2,
        stride: 2,
    }
}

/// CIFAR-style ResNet of depth `6n + 2` with widths 16/32/64 and zero-padding shortcuts.
pub fn resnet_cifar(depth: usize, num_classes: usize) -> Result<ModelSpec> {
    if depth < 8 || !(depth - 2).is_multiple_of(6) {
        return Err(Error::InvalidArgument(format!(
            "resnet depth must be 6n+2, got {depth}"
        )));
    }
    let n = (depth - 2) / 6;
    let mut units = vec![conv_layer(16, 1)];
    let mut w = 16;
    for (stage, width) in [16usize, 32, 64].into_iter().enumerate() {
        for i in 0..n {
            let stride = if stage > 0 && i == 0 { 2 } else { 1 };
            units.push(residual(w, width, stride));
            w = width;
        }
    }
    Ok(ModelSpec {
        name: format!("resnet{depth}"),
        in_channels: 3,
        input_size: 32,
        num_classes,
        order: GateOrder::default(),
        units,
    })
}

pub const PRESETS: [&str; 8] = [
    "tiny",
    "vgg_mini",
    "resnet_mini",
    "mobilenet_mini",
    "supernet_mini",
    "supernet_sep_mini",
    "resnet56",
    "vgg16",
];

/// Named architectures for 3 x 32 x 32 inputs.
pub fn preset(name: &str, num_classes: usize) -> Result<ModelSpec> {
    let units = match name {
        "tiny" => vec![conv_layer(8, 1), pool(), conv_layer(16, 1)],
        "vgg_mini" => vec![
            conv_layer(32, 1),
            conv_layer(32, 1),
            pool(),
            conv_layer(64, 1),
            conv_layer(64, 1),
            pool(),
            conv_layer(128, 1),
            conv_layer(128, 1),
        ],
        "resnet_mini" => {
            return resnet_cifar(20, num_classes).map(|s| ModelSpec {
                name: name.into(),
                ..s
            })
        }
        "resnet56" => return resnet_cifar(56, num_classes),
        "mobilenet_mini" => {
            let mut u = vec![conv_layer(16, 1)];
            for (w, s) in [(32, 1), (64, 2), (64, 1), (128, 2), (128, 1)] {
                u.push(UnitSpec::Layer(LayerSpec::single(BlockSpec::separable(
                    3, s, w,
                ))));
            }
            u
        }
        "supernet_mini" | "supernet_sep_mini" => {
            let mk: fn(usize, usize, usize) -> BlockSpec = if name == "supernet_mini" {
                BlockSpec::conv
            } else {
                BlockSpec::separable
            };
            let layer =
                |w: usize| UnitSpec::Layer(LayerSpec::multi(vec![mk(3, 1, w), mk(5, 1, w)]));
            vec![
                layer(16),
                layer(16),
                pool(),
                layer(32),
                layer(32),
                pool(),
                layer(64),
            ]
        }
        "vgg16" => {
            let mut u = Vec::new();
            for (w, reps) in [(64, 2), (128, 2), (256, 3), (512, 3), (512, 3)] {
                for _ in 0..reps {
                    u.push(conv_layer(w, 1));
                }
                u.push(pool());
            }
            u
        }
        _ => return Err(Error::UnknownPreset(name.to_string())),
    };
    Ok(ModelSpec {
        name: name.into(),
        in_channels: 3,
        input_size: 32,
        num_classes,
        order: GateOrder::default(),
        units,
    })
}
