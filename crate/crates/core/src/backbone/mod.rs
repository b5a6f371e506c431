//! Shared-weight embedding network.
//!
//! One [`ParameterSet`] serves every stream. Layers `1..=verification_tap_layer`
//! are shared; their activation is projected by `fcv` into the verification
//! embedding, and for identification two streams' activations are fused by
//! absolute difference and sent through the remaining conv layers, the
//! hidden fc layers and a two-way softmax.

mod checkpoint;
mod config;
mod network;
mod params;

pub use checkpoint::{
    load_checkpoint, save_checkpoint, Checkpoint, TrainState, FORMAT_VERSION, MAGIC,
};
pub use config::{BackboneConfig, ConvSpec, InputShape};
pub use network::{BoundParams, FourStreamOutput, NegativePairs, Network, TRIPLET_PAIRS};
pub use params::{param_role, ParamRole, ParameterSet};
