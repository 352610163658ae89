// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod adam;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod conv;
pub mod data;
pub mod dropout;
pub mod error;
pub mod likelihood;
pub mod metrics;
pub mod model;
pub mod tape;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tape::{Gradients, Tape, Var};
pub use tensor::{DType, Scalar, Tensor};

/// Default floating-point precision, `f32` unless the `f64` feature is enabled.
#[cfg(not(feature = "f64"))]
pub type Real = f32;
#[cfg(feature = "f64")]
pub type Real = f64;
