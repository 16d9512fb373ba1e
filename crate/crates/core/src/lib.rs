//! Conditional multiscale normalizing flows on small images, with exact
//! likelihoods, per-pixel likelihood attribution, and sample-quality metrics.
//!
//! Everything runs on plain `f64` tensors with a tape-based reverse-mode
//! autodiff engine; no BLAS, no GPU, bit-reproducible given a seed.

pub mod attribution;
pub mod coupling;
pub mod datagen;
pub mod error;
pub mod layers;
pub mod metrics;
pub mod model;
pub mod tensor;

pub use error::{FlowError, Result};
pub use model::{FlowConfig, FlowModel, FlowTask, StageDesc, TrainOptions};
pub use tensor::{GradTape, NodeId, ParamId, ParamStore, Rng, Tensor, TraceSession};
