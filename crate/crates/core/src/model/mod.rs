//! Network description and the forward/backward executor.

mod align;
mod graph;
mod spec;

pub use align::residual_align;
pub use graph::{
    Batch, Block, BlockTopology, Head, Layer, Model, Pool, Residual, Targets, Topology, Unit,
};
pub use spec::{
    preset, resnet_cifar, BlockSpec, GateOrder, LayerSpec, ModelSpec, OpKind, UnitSpec, PRESETS,
};
