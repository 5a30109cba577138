//! Minimal reverse-mode tensor engine.
//!
//! The operation set is exactly what a small transformer energy model
//! needs. Backward rules are themselves recorded as tape operations, so
//! gradients can be differentiated again; this is how a force loss
//! (a function of `dE/dr`) is trained.
//!
//! ```
//! use transip_tensor::{grad, Array, Tape};
//!
//! let tape = Tape::new();
//! let x = tape.var(Array::scalar(2.0)).unwrap();
//! let y = x.mul(&x).unwrap().mul(&x).unwrap();
//! let dy = grad(&y, &[&x], true).unwrap().remove(0);
//! assert_eq!(dy.item(), 12.0);
//! let d2y = grad(&dy, &[&x], false).unwrap().remove(0);
//! assert_eq!(d2y.item(), 12.0);
//! ```

pub mod array;
mod ops;
mod tape;
mod tensor;

pub use array::{Array, RopeTable};
pub use tape::{grad, Tape};
pub use tensor::Tensor;

#[derive(Debug, thiserror::Error)]
pub enum TensorError {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch { op: &'static str, lhs: Vec<usize>, rhs: Vec<usize> },
    #[error("{op}: {msg}")]
    InvalidArgument { op: &'static str, msg: String },
    #[error("gradient requested of a non-scalar output with shape {0:?}")]
    NonScalar(Vec<usize>),
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error("tensors belong to different tapes")]
    TapeMismatch,
    #[error("gelu derivative of order {0} is not available")]
    UnsupportedOrder(u8),
}

pub type Result<T, E = TensorError> = std::result::Result<T, E>;
