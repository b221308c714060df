//! Minimal dense-tensor arithmetic with reverse-mode differentiation.
//!
//! The crate is deliberately small: an eager [`Graph`] that records ops as
//! they run, a [`ParamStore`] holding named learnable tensors, a
//! finite-difference oracle in [`gradcheck`], and a binary checkpoint format.
//! Everything runs in `f64` on one thread.

pub mod checkpoint;
pub mod error;
pub mod gradcheck;
pub mod graph;
mod kernels;
pub mod param;
pub mod tensor;

pub use error::{NumError, Result};
pub use gradcheck::{finite_difference_check, relative_error, FdOptions, FdReport};
pub use graph::{broadcast_shape, Graph, Var};
pub use param::{Gradients, ParamId, ParamStore, Parameter};
pub use tensor::{l2_normalize_rows, Tensor};
