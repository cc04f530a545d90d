//! Dense tensor engine with tape-based reverse-mode differentiation.
//!
//! Tensors are immutable row-major arrays, generic over [`Element`] so the
//! same model code runs in `f32` for training and `f64` for gradient
//! checks. No broadcasting exists beyond repeating an operand over leading
//! dimensions; everything else needs an explicit reshape.

mod element;
mod error;
mod tensor;

pub mod checkpoint;
pub mod grad_check;
pub mod kernels;
pub mod tape;

pub use checkpoint::{read_checkpoint, write_checkpoint};
pub use element::Element;
pub use error::{IoError, Result, TensorError};
pub use grad_check::{grad_check, grad_check_at, relative_error};
pub use kernels::PoolKind;
pub use tape::{BatchStats, Gradients, NodeId, NormStats, Tape, Var, GATHER_ZERO};
pub use tensor::{numel, strides_of, Tensor};
