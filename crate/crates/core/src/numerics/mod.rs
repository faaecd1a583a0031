//! Tensor algebra, reverse-mode autodiff, Adam and the symmetric
//! eigensolver.

pub mod gradcheck;
pub mod linalg;
pub mod optim;
mod tape;
mod tensor;

pub use gradcheck::{check_params, finite_difference_check, GradCheckReport, DEFAULT_STEP};
pub use linalg::{sym_eig, SymEig};
pub use optim::{OptimizerState, Schedule};
pub use tape::{concat_cols, concat_rows, gelu, softmax_rows_kernel, Gradients, NodeId, Tape, Var};
pub use tensor::Tensor;

/// Layer-norm epsilon used throughout.
pub const LAYER_NORM_EPS: f64 = 1e-12;
