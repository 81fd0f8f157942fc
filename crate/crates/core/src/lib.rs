pub mod autodiff;
pub mod checkpoint;
pub mod data;
pub mod discriminator;
pub mod error;
pub mod eval;
pub mod generator;
pub mod kernels;
pub mod nn;
pub mod semantic;
pub mod tensor;
pub mod training;

pub use autodiff::{grad_check, Tape, Var};
pub use error::{Error, Result};
pub use semantic::{Constraint, ConstraintSet, MetricKind, SemanticSpace};
pub use tensor::{Real, Tensor, TensorError};
