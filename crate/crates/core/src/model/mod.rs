//! The TransIP architecture.

mod config;
mod params;
mod transip;

pub use config::ModelConfig;
pub use params::Params;
pub use transip::{Prediction, TransIp};
