//! Minimal neural-network toolkit: parameters, a reverse-mode tape, the
//! conditional MLP velocity network, and AdamW with an EMA shadow.

pub mod mlp;
pub mod optim;
pub mod params;
pub mod tape;

pub use mlp::{MlpVelocityNet, NetConfig, NULL_CONDITION};
pub use optim::{AdamWConfig, OptimizerState};
pub use params::{ParamBlock, ParamStore};
pub use tape::{NodeId, Tape};
