//! The multi-scale interaction network: fusion front-end (MFM), three
//! interacting paths (MIM), up-fusion (UFM) and prediction heads.

pub mod config;
pub mod network;

pub use config::{Heads, MfmConfig, MimConfig, ModelConfig, UfmConfig, UfmStage};
pub use network::{CostReport, MimFeatures, Minet, ModelOutputs, ModuleCost};
