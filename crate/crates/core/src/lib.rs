//! Quartet-loss deep metric learning.
//!
//! A shared-weight embedding network trained on groups of four images
//! (anchor, positive, and two negatives from two further identities), with a
//! verification embedding tapped from the low layers and a pair-similarity
//! identification head on top, evaluated by cumulative match characteristic
//! (CMC) curves.

pub mod autodiff;
pub mod backbone;
pub mod data;
pub mod error;
pub mod evaluation;
pub mod experiment;
mod io;
pub mod losses;
pub mod sampler;
pub mod scalar;
pub mod trainer;

pub use autodiff::{Graph, NodeId, Tensor};
pub use error::{Error, Result};
pub use scalar::Scalar;

pub type Tensor64 = Tensor<f64>;
pub type Tensor32 = Tensor<f32>;
pub type Graph64 = Graph<f64>;
pub type ParameterSet64 = backbone::ParameterSet<f64>;
pub type ParameterSet32 = backbone::ParameterSet<f32>;
pub type Checkpoint64 = backbone::Checkpoint<f64>;
pub type LabeledDataset64 = data::LabeledDataset<f64>;
pub type LabeledDataset32 = data::LabeledDataset<f32>;
pub type Trainer64<'a> = trainer::Trainer<'a, f64>;
