//! Minimal dense tensors with tape-based reverse-mode differentiation.
//!
//! Values live on a [`Tape`]; every primitive records its backward rule
//! and [`Tape::backward`] propagates gradients in reverse recording order.
//! Trainable values are kept in a [`ParamStore`] and placed on a fresh tape
//! for each step. Training runs in `f32`; gradient checks run in `f64`.

pub mod conv;
mod element;
mod error;
mod gradcheck;
mod kernels;
mod ops;
mod param;
pub mod suite;
mod tape;
mod tensor;

pub use element::{Element, Strides};
pub use error::{Result, TensorError};
pub use gradcheck::{grad_check, GradCheckOptions, GradCheckReport};
pub use param::{read_records, write_records, Group, ParamId, ParamStore, Parameter, Record, STORE_MAGIC, STORE_VERSION};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;
