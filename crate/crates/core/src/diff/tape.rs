//! Reverse-mode tape over dense matrices.
//!
//! Every recorded node stores its forward value; `Tape::gradient` walks the
//! nodes in reverse insertion order and accumulates adjoints. Only nodes that
//! depend on a `var` leaf take part in the reverse pass.

use std::sync::Arc;

use super::tensor::{gemm, Matrix};
use crate::error::{Error, Result};
use crate::sparse::CsrMatrix;

/// Handle to a node recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    SpMM(Arc<CsrMatrix>, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Relu(Var),
    Prelu(Var, Var),
    Sigmoid(Var),
    Exp(Var),
    Expm1(Var),
    Ln(Var),
    Square(Var),
    Rsqrt(Var),
    Clamp(Var, f64, f64),
    Sum(Var),
    Mean(Var),
    ColMean(Var),
    RowSum(Var),
    RowDot(Var, Var),
    ScaleRows(Var, Var),
    ScaleCols(Var, Var),
    BroadcastRows(Var),
    SelectRows(Var, Arc<Vec<usize>>),
    ScatterSym(Var, Arc<Vec<(usize, usize)>>),
}

#[derive(Debug, Clone)]
struct Node {
    value: Matrix,
    op: Op,
    needs_grad: bool,
}

#[derive(Debug, Default, Clone)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// A differentiable leaf (parameter or attacked input).
    pub fn var(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.shape()
    }

    /// Scalar value of a 1x1 node.
    pub fn item(&self, v: Var) -> f64 {
        self.nodes[v.0].value.item()
    }

    fn push(&mut self, value: Matrix, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(Error::shape(op, format!("{sa:?}"), format!("{sb:?}")));
        }
        Ok(())
    }

    fn unary(&mut self, a: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let value = self.value(a).map(f);
        let ng = self.ng(a);
        self.push(value, op, ng)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.1 != sb.0 {
            return Err(Error::shape("matmul", format!("inner {}", sa.1), sb.0));
        }
        let value = gemm(self.value(a), false, self.value(b), false);
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(value, Op::MatMul(a, b), ng))
    }

    /// Sparse constant times dense node. No gradient flows to the sparse side.
    pub fn spmm(&mut self, s: &Arc<CsrMatrix>, x: Var) -> Result<Var> {
        if s.cols() != self.shape(x).0 {
            return Err(Error::shape("spmm", s.cols(), self.shape(x).0));
        }
        let value = s.matmul_dense(self.value(x));
        let ng = self.ng(x);
        Ok(self.push(value, Op::SpMM(Arc::clone(s), x), ng))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let value = self.value(a).transpose();
        let ng = self.ng(a);
        self.push(value, Op::Transpose(a), ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let value = self.value(a).add(self.value(b));
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(value, Op::Add(a, b), ng))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let value = self.value(a).sub(self.value(b));
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(value, Op::Sub(a, b), ng))
    }

    /// Element-wise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let value = self.value(a).zip_map(self.value(b), |x, y| x * y);
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(value, Op::Mul(a, b), ng))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        self.unary(a, Op::Scale(a, s), |x| x * s)
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Var {
        self.unary(a, Op::AddScalar(a), |x| x + s)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, Op::Relu(a), |x| x.max(0.0))
    }

    /// PReLU with a single learnable slope (`slope` must be 1x1).
    pub fn prelu(&mut self, a: Var, slope: Var) -> Result<Var> {
        if self.shape(slope) != (1, 1) {
            return Err(Error::shape(
                "prelu",
                "(1, 1)",
                format!("{:?}", self.shape(slope)),
            ));
        }
        let s = self.item(slope);
        let value = self.value(a).map(|x| if x > 0.0 { x } else { s * x });
        let ng = self.ng(a) || self.ng(slope);
        Ok(self.push(value, Op::Prelu(a, slope), ng))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, Op::Sigmoid(a), sigmoid)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, Op::Exp(a), f64::exp)
    }

    /// `exp(x) - 1`, accurate near zero.
    pub fn expm1(&mut self, a: Var) -> Var {
        self.unary(a, Op::Expm1(a), f64::exp_m1)
    }

    pub fn ln(&mut self, a: Var) -> Var {
        self.unary(a, Op::Ln(a), f64::ln)
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(a, Op::Square(a), |x| x * x)
    }

    /// `x^(-1/2)`.
    pub fn rsqrt(&mut self, a: Var) -> Var {
        self.unary(a, Op::Rsqrt(a), |x| 1.0 / x.sqrt())
    }

    /// Clamp to `[lo, hi]`; the gradient is zero outside the open interval.
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        self.unary(a, Op::Clamp(a, lo, hi), |x| x.clamp(lo, hi))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let value = Matrix::scalar(self.value(a).sum());
        let ng = self.ng(a);
        self.push(value, Op::Sum(a), ng)
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let m = self.value(a);
        if m.is_empty() {
            return Err(Error::InvalidArgument("mean of an empty matrix".into()));
        }
        let value = Matrix::scalar(m.sum() / m.len() as f64);
        let ng = self.ng(a);
        Ok(self.push(value, Op::Mean(a), ng))
    }

    /// Column-wise mean, `n x c -> 1 x c`.
    pub fn col_mean(&mut self, a: Var) -> Result<Var> {
        let m = self.value(a);
        if m.rows() == 0 {
            return Err(Error::InvalidArgument("column mean of zero rows".into()));
        }
        let mut value = Matrix::zeros(1, m.cols());
        for i in 0..m.rows() {
            for (o, x) in value.as_mut_slice().iter_mut().zip(m.row(i)) {
                *o += x;
            }
        }
        let value = value.scale(1.0 / m.rows() as f64);
        let ng = self.ng(a);
        Ok(self.push(value, Op::ColMean(a), ng))
    }

    /// Row sums, `n x c -> n x 1`.
    pub fn row_sum(&mut self, a: Var) -> Var {
        let m = self.value(a);
        let data = (0..m.rows()).map(|i| m.row(i).iter().sum()).collect();
        let value = Matrix::from_vec(m.rows(), 1, data).expect("row_sum shape");
        let ng = self.ng(a);
        self.push(value, Op::RowSum(a), ng)
    }

    /// Row-wise dot products, `n x c, n x c -> n x 1`.
    pub fn row_dot(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("row_dot", a, b)?;
        let (ma, mb) = (self.value(a), self.value(b));
        let data = (0..ma.rows())
            .map(|i| ma.row(i).iter().zip(mb.row(i)).map(|(x, y)| x * y).sum())
            .collect();
        let value = Matrix::from_vec(ma.rows(), 1, data).expect("row_dot shape");
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(value, Op::RowDot(a, b), ng))
    }

    /// Multiplies row `i` of `a` by `v[i]`; `v` has one entry per row.
    pub fn scale_rows(&mut self, a: Var, v: Var) -> Result<Var> {
        let (m, s) = (self.value(a), self.value(v));
        if s.len() != m.rows() {
            return Err(Error::shape("scale_rows", m.rows(), s.len()));
        }
        let s = s.as_slice();
        let value = Matrix::from_fn(m.rows(), m.cols(), |i, j| m[(i, j)] * s[i]);
        let ng = self.ng(a) || self.ng(v);
        Ok(self.push(value, Op::ScaleRows(a, v), ng))
    }

    /// Multiplies column `j` of `a` by `v[j]`; `v` has one entry per column.
    pub fn scale_cols(&mut self, a: Var, v: Var) -> Result<Var> {
        let (m, s) = (self.value(a), self.value(v));
        if s.len() != m.cols() {
            return Err(Error::shape("scale_cols", m.cols(), s.len()));
        }
        let s = s.as_slice();
        let value = Matrix::from_fn(m.rows(), m.cols(), |i, j| m[(i, j)] * s[j]);
        let ng = self.ng(a) || self.ng(v);
        Ok(self.push(value, Op::ScaleCols(a, v), ng))
    }

    /// Repeats a `1 x c` row `n` times.
    pub fn broadcast_rows(&mut self, a: Var, n: usize) -> Result<Var> {
        let m = self.value(a);
        if m.rows() != 1 {
            return Err(Error::shape("broadcast_rows", "1 row", m.rows()));
        }
        let value = Matrix::from_fn(n, m.cols(), |_, j| m[(0, j)]);
        let ng = self.ng(a);
        Ok(self.push(value, Op::BroadcastRows(a), ng))
    }

    /// Gathers rows by index; repeated indices accumulate in the gradient.
    pub fn select_rows(&mut self, a: Var, idx: Arc<Vec<usize>>) -> Result<Var> {
        let m = self.value(a);
        if let Some(&bad) = idx.iter().find(|&&i| i >= m.rows()) {
            return Err(Error::shape("select_rows", format!("< {}", m.rows()), bad));
        }
        let value = m.select_rows(&idx);
        let ng = self.ng(a);
        Ok(self.push(value, Op::SelectRows(a, idx), ng))
    }

    /// Scatters the `k x 1` vector `p` into a symmetric `n x n` matrix with
    /// `out[u][v] = out[v][u] = p[k]` for `pairs[k] = (u, v)`, `u != v`.
    pub fn scatter_sym(
        &mut self,
        p: Var,
        pairs: Arc<Vec<(usize, usize)>>,
        n: usize,
    ) -> Result<Var> {
        let pv = self.value(p);
        if pv.len() != pairs.len() {
            return Err(Error::shape("scatter_sym", pairs.len(), pv.len()));
        }
        let mut value = Matrix::zeros(n, n);
        for (k, &(u, v)) in pairs.iter().enumerate() {
            if u >= n || v >= n || u == v {
                return Err(Error::InvalidArgument(format!(
                    "bad scatter pair ({u}, {v})"
                )));
            }
            value[(u, v)] += pv.as_slice()[k];
            value[(v, u)] += pv.as_slice()[k];
        }
        let ng = self.ng(p);
        Ok(self.push(value, Op::ScatterSym(p, pairs), ng))
    }

    /// `sigmoid(z_i · B · s_i)` for each row pair, giving an `n x 1` column.
    pub fn bilinear_sigmoid(&mut self, z: Var, weight: Var, s: Var) -> Result<Var> {
        let zb = self.matmul(z, weight)?;
        let logits = self.row_dot(zb, s)?;
        Ok(self.sigmoid(logits))
    }

    /// Reverse pass from the scalar `loss`. Returns one gradient per `wrt`
    /// entry; leaves recorded with [`Tape::constant`] get zeros.
    pub fn gradient(&self, loss: Var, wrt: &[Var]) -> Result<Vec<Matrix>> {
        for v in std::iter::once(&loss).chain(wrt) {
            if v.0 >= self.nodes.len() {
                return Err(Error::NotOnTape(v.0));
            }
        }
        if self.shape(loss) != (1, 1) {
            return Err(Error::shape(
                "gradient",
                "scalar loss",
                format!("{:?}", self.shape(loss)),
            ));
        }
        let mut adj: Vec<Option<Matrix>> = vec![None; loss.0 + 1];
        adj[loss.0] = Some(Matrix::scalar(1.0));

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = adj[idx].take() else { continue };
            self.backward_node(node, &g, &mut adj);
            // Keep leaf adjoints for the caller.
            if matches!(node.op, Op::Leaf) {
                adj[idx] = Some(g);
            }
        }

        Ok(wrt
            .iter()
            .map(|v| {
                adj.get(v.0).and_then(|g| g.clone()).unwrap_or_else(|| {
                    let (r, c) = self.shape(*v);
                    Matrix::zeros(r, c)
                })
            })
            .collect())
    }

    fn backward_node(&self, node: &Node, g: &Matrix, adj: &mut [Option<Matrix>]) {
        let val = |v: Var| &self.nodes[v.0].value;
        let mut acc = |v: Var, grad: Matrix| {
            if !self.nodes[v.0].needs_grad {
                return;
            }
            match &mut adj[v.0] {
                Some(existing) => existing.add_assign(&grad),
                slot @ None => *slot = Some(grad),
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if self.ng(*a) {
                    acc(*a, gemm(g, false, val(*b), true));
                }
                if self.ng(*b) {
                    acc(*b, gemm(val(*a), true, g, false));
                }
            }
            Op::SpMM(s, x) => acc(*x, s.transpose_matmul_dense(g)),
            Op::Transpose(a) => acc(*a, g.transpose()),
            Op::Add(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.clone());
            }
            Op::Sub(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.scale(-1.0));
            }
            Op::Mul(a, b) => {
                if self.ng(*a) {
                    acc(*a, g.zip_map(val(*b), |g, y| g * y));
                }
                if self.ng(*b) {
                    acc(*b, g.zip_map(val(*a), |g, x| g * x));
                }
            }
            Op::Scale(a, s) => acc(*a, g.scale(*s)),
            Op::AddScalar(a) => acc(*a, g.clone()),
            Op::Relu(a) => acc(*a, g.zip_map(val(*a), |g, x| if x > 0.0 { g } else { 0.0 })),
            Op::Prelu(a, slope) => {
                let s = val(*slope).item();
                if self.ng(*a) {
                    acc(
                        *a,
                        g.zip_map(val(*a), |g, x| if x > 0.0 { g } else { s * g }),
                    );
                }
                if self.ng(*slope) {
                    let ds: f64 = g
                        .as_slice()
                        .iter()
                        .zip(val(*a).as_slice())
                        .map(|(g, &x)| if x > 0.0 { 0.0 } else { g * x })
                        .sum();
                    acc(*slope, Matrix::scalar(ds));
                }
            }
            Op::Sigmoid(a) => acc(*a, g.zip_map(&node.value, |g, y| g * y * (1.0 - y))),
            Op::Exp(a) => acc(*a, g.zip_map(&node.value, |g, y| g * y)),
            Op::Expm1(a) => acc(*a, g.zip_map(&node.value, |g, y| g * (y + 1.0))),
            Op::Ln(a) => acc(*a, g.zip_map(val(*a), |g, x| g / x)),
            Op::Square(a) => acc(*a, g.zip_map(val(*a), |g, x| 2.0 * g * x)),
            Op::Rsqrt(a) => acc(*a, g.zip_map(&node.value, |g, y| -0.5 * g * y * y * y)),
            Op::Clamp(a, lo, hi) => acc(
                *a,
                g.zip_map(val(*a), |g, x| if x > *lo && x < *hi { g } else { 0.0 }),
            ),
            Op::Sum(a) => {
                let (r, c) = val(*a).shape();
                acc(*a, Matrix::filled(r, c, g.item()));
            }
            Op::Mean(a) => {
                let (r, c) = val(*a).shape();
                acc(*a, Matrix::filled(r, c, g.item() / (r * c) as f64));
            }
            Op::ColMean(a) => {
                let (r, c) = val(*a).shape();
                let inv = 1.0 / r as f64;
                acc(*a, Matrix::from_fn(r, c, |_, j| g[(0, j)] * inv));
            }
            Op::RowSum(a) => {
                let (r, c) = val(*a).shape();
                acc(*a, Matrix::from_fn(r, c, |i, _| g[(i, 0)]));
            }
            Op::RowDot(a, b) => {
                let (ma, mb) = (val(*a), val(*b));
                let (r, c) = ma.shape();
                if self.ng(*a) {
                    acc(*a, Matrix::from_fn(r, c, |i, j| g[(i, 0)] * mb[(i, j)]));
                }
                if self.ng(*b) {
                    acc(*b, Matrix::from_fn(r, c, |i, j| g[(i, 0)] * ma[(i, j)]));
                }
            }
            Op::ScaleRows(a, v) => {
                let (ma, mv) = (val(*a), val(*v));
                let (r, c) = ma.shape();
                let s = mv.as_slice();
                if self.ng(*a) {
                    acc(*a, Matrix::from_fn(r, c, |i, j| g[(i, j)] * s[i]));
                }
                if self.ng(*v) {
                    let data = (0..r)
                        .map(|i| g.row(i).iter().zip(ma.row(i)).map(|(g, x)| g * x).sum())
                        .collect();
                    let (vr, vc) = mv.shape();
                    acc(*v, Matrix::from_vec(vr, vc, data).expect("scale_rows grad"));
                }
            }
            Op::ScaleCols(a, v) => {
                let (ma, mv) = (val(*a), val(*v));
                let (r, c) = ma.shape();
                let s = mv.as_slice();
                if self.ng(*a) {
                    acc(*a, Matrix::from_fn(r, c, |i, j| g[(i, j)] * s[j]));
                }
                if self.ng(*v) {
                    let mut data = vec![0.0; c];
                    for i in 0..r {
                        for ((d, g), x) in data.iter_mut().zip(g.row(i)).zip(ma.row(i)) {
                            *d += g * x;
                        }
                    }
                    let (vr, vc) = mv.shape();
                    acc(*v, Matrix::from_vec(vr, vc, data).expect("scale_cols grad"));
                }
            }
            Op::BroadcastRows(a) => {
                let c = val(*a).cols();
                let mut out = Matrix::zeros(1, c);
                for i in 0..g.rows() {
                    for (o, x) in out.as_mut_slice().iter_mut().zip(g.row(i)) {
                        *o += x;
                    }
                }
                acc(*a, out);
            }
            Op::SelectRows(a, idx) => {
                let (r, c) = val(*a).shape();
                let mut out = Matrix::zeros(r, c);
                for (o, &i) in idx.iter().enumerate() {
                    for (d, x) in out.row_mut(i).iter_mut().zip(g.row(o)) {
                        *d += x;
                    }
                }
                acc(*a, out);
            }
            Op::ScatterSym(p, pairs) => {
                let (r, c) = val(*p).shape();
                let data = pairs.iter().map(|&(u, v)| g[(u, v)] + g[(v, u)]).collect();
                acc(*p, Matrix::from_vec(r, c, data).expect("scatter_sym grad"));
            }
        }
    }
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gradient_of_sum_is_all_ones() {
        let mut t = Tape::new();
        let x = t.var(Matrix::from_fn(3, 4, |i, j| (i * j) as f64 - 1.5));
        let s = t.sum(x);
        let g = t.gradient(s, &[x]).unwrap();
        assert_eq!(g[0], Matrix::filled(3, 4, 1.0));
    }

    #[test]
    fn sigmoid_of_zero_dot_has_quarter_slope() {
        let xs = Matrix::from_rows(&[vec![0.3, -1.2, 2.0]]).unwrap();
        let mut t = Tape::new();
        let w = t.var(Matrix::zeros(3, 1));
        let x = t.constant(xs.clone());
        let wx = t.matmul(x, w).unwrap();
        let y = t.sigmoid(wx);
        let g = t.gradient(y, &[w]).unwrap();
        assert!(g[0].max_abs_diff(&xs.transpose().scale(0.25)) < 1e-15);
    }

    #[test]
    fn unknown_node_is_an_error() {
        let mut t = Tape::new();
        let x = t.var(Matrix::scalar(1.0));
        assert!(matches!(
            t.gradient(x, &[Var(42)]),
            Err(Error::NotOnTape(42))
        ));
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let mut t = Tape::new();
        let x = t.var(Matrix::zeros(2, 2));
        assert!(t.gradient(x, &[x]).is_err());
    }

    #[test]
    fn constants_get_zero_gradient() {
        let mut t = Tape::new();
        let c = t.constant(Matrix::filled(2, 1, 3.0));
        let x = t.var(Matrix::filled(2, 1, 1.0));
        let p = t.mul(c, x).unwrap();
        let s = t.sum(p);
        let g = t.gradient(s, &[c, x]).unwrap();
        assert_eq!(g[0], Matrix::zeros(2, 1));
        assert_eq!(g[1], Matrix::filled(2, 1, 3.0));
    }

    #[test]
    fn shape_errors_are_reported() {
        let mut t = Tape::new();
        let a = t.var(Matrix::zeros(2, 3));
        let b = t.var(Matrix::zeros(2, 3));
        assert!(t.matmul(a, b).is_err());
        let c = t.var(Matrix::zeros(3, 2));
        assert!(t.add(a, c).is_err());
    }

    #[test]
    fn sigmoid_is_stable_for_large_inputs() {
        assert_eq!(sigmoid(1000.0), 1.0);
        assert_eq!(sigmoid(-1000.0), 0.0);
        assert!((sigmoid(0.0) - 0.5).abs() < 1e-15);
    }
}
