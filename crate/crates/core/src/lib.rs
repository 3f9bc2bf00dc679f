//! Binary neural network training with a differentiable meta-quantizer.

pub mod binarize;
pub mod diagnostics;
pub mod error;
pub mod meta;
pub mod metrics;
pub mod nn;
pub mod optim;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{DType, Graph, Scalar, Tensor, Var};
