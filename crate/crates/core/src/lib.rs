pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod losses;
pub mod model;
pub mod nn;
pub mod postprocess;
pub mod projection;
pub mod trainer;

pub use error::{Error, Result};
