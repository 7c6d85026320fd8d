//! Dense tensors, a reverse-mode tape, Adam and small linear-algebra helpers.

mod check;
mod linalg;
mod optim;
mod tape;
mod tensor;

pub use check::{
    compare_gradient, finite_difference_check, finite_difference_check_sampled, FdReport,
};
pub use linalg::{least_squares_solve, LeastSquares};
pub use optim::{AdamConfig, AdamState};
pub use tape::{sigmoid, Tape, Var};
pub use tensor::{gemm, Matrix};
