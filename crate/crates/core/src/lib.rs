//! Feature-difference change detection with iterative difference-enhanced
//! transformers (IDET), built on a small reverse-mode tensor engine.

pub mod autodiff;
pub mod backbone;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod degrade;
pub mod error;
pub mod experiments;
pub mod idet;
pub mod metrics;
pub mod model;
pub mod msidet;
pub mod nn;
pub mod params;
pub mod rng;
pub mod tensor;
pub mod training;

pub use autodiff::{Gradients, Graph, Var};
pub use error::{Error, Result};
pub use metrics::{ConfusionCounts, Mask, MetricReport};
pub use model::{Arch, Model, ModelConfig};
pub use msidet::{ChangeMaps, MsIdet, MsIdetConfig, Variant};
pub use nn::Session;
pub use params::{ParamBuilder, ParamId, ParamStore, Parameter};
pub use rng::RngSeed;
pub use tensor::{Scalar, Tensor};
