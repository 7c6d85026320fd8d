use nalgebra::DMatrix;

use super::Matrix;
use crate::error::{Error, Result};

/// Minimum-norm least-squares solution of `M X = B`.
#[derive(Debug, Clone)]
pub struct LeastSquares {
    pub solution: Matrix,
    /// `‖M X − B‖_F`.
    pub residual: f64,
    /// Numerical rank of `M`.
    pub rank: usize,
}

fn to_na(m: &Matrix) -> DMatrix<f64> {
    DMatrix::from_row_slice(m.rows(), m.cols(), m.as_slice())
}

fn from_na(m: &DMatrix<f64>) -> Matrix {
    Matrix::from_fn(m.nrows(), m.ncols(), |i, j| m[(i, j)])
}

/// Applies the pseudo-inverse of the square matrix `m` to `b` via SVD.
/// Singular values below `max(n) * eps * σ_max` are treated as zero.
pub fn least_squares_solve(m: &Matrix, b: &Matrix) -> Result<LeastSquares> {
    let n = m.rows();
    if m.cols() != n {
        return Err(Error::shape(
            "least_squares_solve",
            "square M",
            format!("{:?}", m.shape()),
        ));
    }
    if b.rows() != n {
        return Err(Error::shape("least_squares_solve", n, b.rows()));
    }
    if n == 0 {
        return Ok(LeastSquares {
            solution: Matrix::zeros(0, b.cols()),
            residual: 0.0,
            rank: 0,
        });
    }
    let svd = to_na(m).svd(true, true);
    let smax = svd.singular_values.max();
    let tol = n as f64 * f64::EPSILON * smax;
    let rank = svd.singular_values.iter().filter(|&&s| s > tol).count();
    let x = svd
        .solve(&to_na(b), tol)
        .map_err(|e| Error::InvalidArgument(format!("svd solve failed: {e}")))?;
    let solution = from_na(&x);
    let residual = m.matmul(&solution).sub(b).frobenius_norm();
    Ok(LeastSquares {
        solution,
        residual,
        rank,
    })
}
