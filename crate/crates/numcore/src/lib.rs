//! Tensors, a reverse-mode tape, and the small linear algebra kit the
//! attention experiments need.

mod autodiff;
mod error;
mod gradcheck;
pub mod kernels;
pub mod linalg;
pub mod ops;
mod rng;
mod scalar;
mod tensor;

pub use autodiff::{RopeTable, Unary, Var};
pub use error::{NumError, Result};
pub use gradcheck::grad_check;
pub use kernels::Mask;
pub use rng::{stream_id, Rng, RngState};
pub use scalar::{exp_f32, DType, Scalar};
pub use tensor::Tensor;
