//! Transformer interatomic potentials that learn rotational equivariance
//! through a latent contrastive objective.

pub mod checkpoint;
mod error;
pub mod eval;
pub mod losses;
pub mod model;
pub mod moldata;
pub mod train;

pub use error::{Error, Result};
