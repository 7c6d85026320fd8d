use crate::diff::Matrix;

/// Square-or-rectangular sparse matrix in compressed-row layout.
#[derive(Debug, Clone, PartialEq)]
pub struct CsrMatrix {
    rows: usize,
    cols: usize,
    indptr: Vec<usize>,
    indices: Vec<usize>,
    values: Vec<f64>,
}

impl CsrMatrix {
    /// Builds from `(row, col, value)` triplets. Duplicates are summed.
    pub fn from_triplets(rows: usize, cols: usize, triplets: &[(usize, usize, f64)]) -> Self {
        let mut sorted = triplets.to_vec();
        sorted.sort_by_key(|a| (a.0, a.1));
        let mut indptr = vec![0usize; rows + 1];
        let mut indices = Vec::with_capacity(sorted.len());
        let mut values: Vec<f64> = Vec::with_capacity(sorted.len());
        let mut last: Option<(usize, usize)> = None;
        for &(r, c, v) in &sorted {
            assert!(r < rows && c < cols, "triplet ({r}, {c}) out of bounds");
            if last == Some((r, c)) {
                *values.last_mut().unwrap() += v;
                continue;
            }
            indices.push(c);
            values.push(v);
            indptr[r + 1] += 1;
            last = Some((r, c));
        }
        for i in 0..rows {
            indptr[i + 1] += indptr[i];
        }
        Self {
            rows,
            cols,
            indptr,
            indices,
            values,
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    /// Column indices and values of row `i`.
    pub fn row(&self, i: usize) -> (&[usize], &[f64]) {
        let (s, e) = (self.indptr[i], self.indptr[i + 1]);
        (&self.indices[s..e], &self.values[s..e])
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        let (idx, val) = self.row(i);
        match idx.binary_search(&j) {
            Ok(p) => val[p],
            Err(_) => 0.0,
        }
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// `self * dense`.
    pub fn matmul_dense(&self, dense: &Matrix) -> Matrix {
        assert_eq!(self.cols, dense.rows(), "spmm inner dimension mismatch");
        let d = dense.cols();
        let mut out = Matrix::zeros(self.rows, d);
        for i in 0..self.rows {
            let (idx, val) = self.row(i);
            let orow = out.row_mut(i);
            for (&j, &a) in idx.iter().zip(val) {
                for (o, x) in orow.iter_mut().zip(dense.row(j)) {
                    *o += a * x;
                }
            }
        }
        out
    }

    /// `selfᵀ * dense`.
    pub fn transpose_matmul_dense(&self, dense: &Matrix) -> Matrix {
        assert_eq!(self.rows, dense.rows(), "spmm_t inner dimension mismatch");
        let d = dense.cols();
        let mut out = Matrix::zeros(self.cols, d);
        for i in 0..self.rows {
            let (idx, val) = self.row(i);
            let grow = dense.row(i);
            for (&j, &a) in idx.iter().zip(val) {
                let orow = out.row_mut(j);
                for (o, g) in orow.iter_mut().zip(grow) {
                    *o += a * g;
                }
            }
        }
        out
    }

    pub fn to_dense(&self) -> Matrix {
        let mut out = Matrix::zeros(self.rows, self.cols);
        for i in 0..self.rows {
            let (idx, val) = self.row(i);
            for (&j, &v) in idx.iter().zip(val) {
                out[(i, j)] = v;
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn spmm_matches_dense_product() {
        let s =
            CsrMatrix::from_triplets(3, 3, &[(0, 0, 1.0), (0, 2, 2.0), (2, 1, -1.0), (0, 2, 0.5)]);
        assert_eq!(s.nnz(), 3);
        assert_eq!(s.get(0, 2), 2.5);
        let x = Matrix::from_fn(3, 2, |i, j| (i + 2 * j) as f64);
        let dense = s.to_dense();
        assert!(s.matmul_dense(&x).max_abs_diff(&dense.matmul(&x)) < 1e-15);
        assert!(
            s.transpose_matmul_dense(&x)
                .max_abs_diff(&dense.transpose().matmul(&x))
                < 1e-15
        );
    }
}
