//! Domain-adversarial 3D convolutional action recognition.
//!
//! A self-contained engine: dense tensors with reverse-mode autodiff
//! ([`graph`]), 3D convolution and friends ([`nn`]), a shared feature
//! extractor with an action head and a gradient-reversed domain head
//! ([`model`]), a synthetic day/night video task ([`data`]), the adversarial
//! training loop and a source-only control ([`train`]), and evaluation
//! ([`metrics`]).

pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod params;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use graph::{Graph, Var};
pub use model::{BlockKind, BlockSpec, DiNetModel, DomainCoupling, InputNorm, ModelConfig};
pub use nn::Mode;
pub use params::{ParamGroup, ParamId, ParamStore};
pub use tensor::{Precision, Scalar, Tensor};
