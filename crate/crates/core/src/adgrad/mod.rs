//! Reverse-mode automatic differentiation over batched real matrices.
//!
//! A [`Tape`] records primitive applications as they execute. Values are
//! 64-bit; [`Tensor::to_f32`] provides the 32-bit storage form used by
//! checkpoints. `measure_prob` wraps the collective measurement so that
//! gradients reach the projector parameters that produced a probability.
//!
//! ```
//! use negadapt::adgrad::{Tape, Tensor};
//!
//! let mut tape = Tape::new();
//! let w = tape.param(Tensor::scalar(3.0));
//! let sq = tape.hadamard(w, w).unwrap();
//! let grads = tape.backward(sq).unwrap();
//! assert_eq!(grads.get(w).unwrap().item(), Some(6.0));
//! ```

mod adam;
pub mod check;
mod tape;
mod tensor;

pub use adam::AdamState;
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AdError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("backward needs a scalar loss, got shape {0:?}")]
    NotScalar(Vec<usize>),
}
