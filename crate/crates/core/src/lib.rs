//! Sequential late-fusion MHA-LSTM for multi-modal sentiment classification.
//!
//! The crate is self-contained: a small reverse-mode autodiff core
//! ([`graph`]), LSTM and attention layers ([`layers`]), the fusion network
//! ([`fusion`]), corpus handling and synthetic data ([`data`]), Adam training
//! and gradient checking ([`training`]), metrics ([`metrics`]) and the
//! command-line front end ([`cli`]).

pub mod cli;
pub mod data;
pub mod error;
pub mod evaluate;
pub mod exec;
pub mod fusion;
pub mod graph;
pub mod layers;
pub mod metrics;
pub mod model_io;
pub mod precision;
pub mod reference;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use exec::Execution;
pub use fusion::{FusionConfig, FusionMode, ModelParams};
pub use tensor::Tensor;
