//! In-context learning of Gaussian single-index models with a one-layer
//! selective state-space model.
//!
//! Bottom-up: [`hermite`] (link functions, quadrature, exponents),
//! [`sampler`] (tasks and prompts), [`embedding`] (feature map), [`ssm`]
//! (the gated recurrence), [`predictor`] (MLP head and test error),
//! [`pretrain`] (two-stage training), [`analysis`] (diagnostics and the
//! kernel ridge baseline), and [`experiment`] (config-driven pipelines).

// `!(x > 0.0)` is deliberate throughout: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod analysis;
pub mod config;
pub mod embedding;
pub mod error;
pub mod experiment;
pub mod hermite;
pub mod plot;
pub mod predictor;
pub mod pretrain;
pub mod rng;
pub mod sampler;
pub mod selftest;
pub mod ssm;

pub use config::{ExperimentConfig, ModelKind};
pub use embedding::{EmbeddedPrompt, FeatureMap};
pub use error::{Error, Result};
pub use experiment::{Checkpoint, Diagnostics, ResultRow};
pub use hermite::{GatingConstants, LinkFunction};
pub use predictor::{Metric, MlpParams, Predictor, TrainedModel};
pub use pretrain::{EtaMode, Lambda2, PretrainOutput, TrainConfig};
pub use rng::RngStream;
pub use sampler::{FeatureSpace, Prompt};
pub use ssm::MambaParams;
