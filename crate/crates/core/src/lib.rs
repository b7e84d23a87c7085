//! Rectified flow laboratory: base flow training, reflow, one-step
//! distillation and the metrics used to compare them.

pub mod config;
pub mod datagen;
pub mod distill;
pub mod error;
pub mod eval;
pub mod export;
pub mod flow;
pub mod metrics;
pub mod nn;
pub mod pipeline;
pub mod reflow;
pub mod rng;
pub mod stage;
pub mod train;

pub use error::{Error, Result};
pub use stage::{FlowStage, StageRole};
