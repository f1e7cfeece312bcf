//! Token-level Kahneman-Tversky preference optimization (TKTO) at desk scale.
//!
//! The crate bundles everything needed to study token-level preference
//! optimization end to end:
//!
//! * [`autodiff`]: a small reverse-mode autodiff tape over `f64` tensors,
//! * [`model`]: a one-block causal transformer policy,
//! * [`data`]: a synthetic polyseme task with utterance-level labels,
//! * [`objectives`]: SFT, DPO, sequence-level KTO, contrastive token weights
//!   and the token-level TKTO loss,
//! * [`trainer`]: deterministic training loops and the two-step pipeline,
//! * [`eval`]: accuracy, edit-distance error rate, reward and weight analyses.

pub mod autodiff;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod eval;
pub mod objectives;
pub mod optim;
pub mod recipe;
pub mod tensor;
pub mod trainer;

pub mod model;

pub use autodiff::{Graph, Var};
pub use data::{Dataset, Label, Sample, SampleMeta, TaskConfig};
pub use error::{Error, Result};
pub use model::{Model, ModelConfig};
pub use objectives::{BaselineMode, TktoConfig, TokenWeightTable, WeightConfig};
pub use optim::OptimizerKind;
pub use tensor::Tensor;
pub use trainer::{Objective, PipelineConfig, Probe, RunLog, TrainConfig};
