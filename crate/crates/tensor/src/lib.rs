//! Dense `f64` tensors with a recording tape for reverse-mode
//! differentiation, numerically stable softmax / cross-entropy kernels,
//! and a bias-corrected Adam optimizer.

mod adam;
mod error;
pub mod functional;
mod tape;
mod tensor;

pub use adam::{AdamConfig, AdamState};
pub use error::{Result, TensorError};
pub use tape::{concat, Tape, Var};
pub use tensor::Tensor;
