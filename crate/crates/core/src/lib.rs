//! Disentangled graph auto-encoders for link prediction and node clustering.
//!
//! The crate is organised bottom-up: [`tensor`] and [`autodiff`] supply dense
//! matrices and reverse-mode gradients, [`graph`] and [`synth`] supply data,
//! and the model pieces ([`encoder`], [`flows`], [`decoder`], [`objectives`])
//! are combined by [`train`]. [`eval`] holds the link-prediction and
//! clustering metrics.

pub mod autodiff;
pub mod checkpoint;
pub mod config;
pub mod decoder;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod flows;
pub mod gradcheck;
pub mod graph;
pub mod model;
pub mod objectives;
pub mod optim;
pub mod report;
pub mod synth;
pub mod tensor;
pub mod train;

pub use autodiff::{Axis, Gradients, Tape, Var};
pub use config::ExperimentConfig;
pub use error::{Error, Result};
pub use graph::{EdgeSplit, Graph, Labels};
pub use model::{Mode, ModelConfig, ModelParams};
pub use objectives::LossReport;
pub use synth::SyntheticSpec;
pub use tensor::Tensor;
pub use train::{RunHistory, TrainConfig};
