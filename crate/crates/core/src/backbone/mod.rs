//! Frozen miniature BERT-style encoder.

mod config;
mod forward;
mod model;

pub use config::{BackboneConfig, TINY_INIT_STD};
pub(crate) use forward::{build_graph, check_compatible};
pub use forward::{forward, forward_frozen, ExampleTrace, ForwardOutput, GateMode, LayerTrace};
pub use model::{
    backbone_param_specs, init_backbone, layer_param_name, tensor_checksum, BackboneModel, LayerParam, ParamKind,
    ParamSpec, INIT_STD,
};
