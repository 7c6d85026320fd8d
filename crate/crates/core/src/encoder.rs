//! Two-layer graph-convolution encoder with a diagonal Gaussian head, plus
//! the linear SGC propagation used for discriminator summaries.

use std::sync::Arc;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::diff::{Matrix, Tape, Var};
use crate::error::{Error, Result};
use crate::graph::{AttributedGraph, NormalizedAdjacency};
use crate::rng::{stream, Stream};
use crate::sparse::CsrMatrix;

pub const LOGVAR_MIN: f64 = -10.0;
pub const LOGVAR_MAX: f64 = 10.0;
const PRELU_INIT: f64 = 0.25;

/// Encoder, Gaussian head and bilinear discriminator weights.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams {
    pub w1: Matrix,
    pub w2: Matrix,
    pub prelu1: Matrix,
    pub prelu2: Matrix,
    pub head_mu: Matrix,
    pub head_logvar: Matrix,
    pub bilinear: Matrix,
}

/// Names in checkpoint order.
pub const PARAM_NAMES: [&str; 7] = [
    "w1",
    "w2",
    "prelu1",
    "prelu2",
    "head_mu",
    "head_logvar",
    "bilinear",
];

fn glorot(rows: usize, cols: usize, rng: &mut impl Rng) -> Matrix {
    let limit = (6.0 / (rows + cols) as f64).sqrt();
    Matrix::from_fn(rows, cols, |_, _| rng.random_range(-limit..limit))
}

impl EncoderParams {
    /// Glorot-uniform weights, PReLU slopes at 0.25.
    pub fn init(input_dim: usize, hidden_dim: usize, embed_dim: usize, seed: u64) -> Result<Self> {
        if input_dim == 0 || hidden_dim == 0 || embed_dim == 0 {
            return Err(Error::InvalidConfig(format!(
                "encoder dims must be positive: d={input_dim} h={hidden_dim} m={embed_dim}"
            )));
        }
        let mut rng = stream(seed, Stream::Init, 0);
        Ok(Self {
            w1: glorot(input_dim, hidden_dim, &mut rng),
            w2: glorot(hidden_dim, embed_dim, &mut rng),
            prelu1: Matrix::scalar(PRELU_INIT),
            prelu2: Matrix::scalar(PRELU_INIT),
            head_mu: glorot(embed_dim, embed_dim, &mut rng),
            head_logvar: glorot(embed_dim, embed_dim, &mut rng),
            bilinear: glorot(embed_dim, embed_dim, &mut rng),
        })
    }

    pub fn input_dim(&self) -> usize {
        self.w1.rows()
    }

    pub fn hidden_dim(&self) -> usize {
        self.w1.cols()
    }

    pub fn embed_dim(&self) -> usize {
        self.w2.cols()
    }

    pub fn tensors(&self) -> [&Matrix; 7] {
        [
            &self.w1,
            &self.w2,
            &self.prelu1,
            &self.prelu2,
            &self.head_mu,
            &self.head_logvar,
            &self.bilinear,
        ]
    }

    pub fn tensors_mut(&mut self) -> [&mut Matrix; 7] {
        [
            &mut self.w1,
            &mut self.w2,
            &mut self.prelu1,
            &mut self.prelu2,
            &mut self.head_mu,
            &mut self.head_logvar,
            &mut self.bilinear,
        ]
    }

    pub fn shapes(&self) -> Vec<(usize, usize)> {
        self.tensors().iter().map(|m| m.shape()).collect()
    }

    /// Rebuilds from tensors in [`PARAM_NAMES`] order, checking shapes.
    pub fn from_tensors(t: Vec<Matrix>) -> Result<Self> {
        let [w1, w2, prelu1, prelu2, head_mu, head_logvar, bilinear]: [Matrix; 7] = t
            .try_into()
            .map_err(|v: Vec<Matrix>| Error::shape("EncoderParams", 7, v.len()))?;
        let (d, h) = w1.shape();
        let m = w2.cols();
        let expect = [
            ("w1", (d, h), w1.shape()),
            ("w2", (h, m), w2.shape()),
            ("prelu1", (1, 1), prelu1.shape()),
            ("prelu2", (1, 1), prelu2.shape()),
            ("head_mu", (m, m), head_mu.shape()),
            ("head_logvar", (m, m), head_logvar.shape()),
            ("bilinear", (m, m), bilinear.shape()),
        ];
        for (name, want, got) in expect {
            if want != got {
                return Err(Error::shape(
                    "EncoderParams",
                    format!("{name} {want:?}"),
                    format!("{got:?}"),
                ));
            }
        }
        let p = Self {
            w1,
            w2,
            prelu1,
            prelu2,
            head_mu,
            head_logvar,
            bilinear,
        };
        if !p.tensors().iter().all(|m| m.is_finite()) {
            return Err(Error::NonFinite("encoder parameters".into()));
        }
        Ok(p)
    }

    /// Records every tensor on `tape`, as differentiable leaves when
    /// `trainable`, as constants otherwise.
    pub fn record(&self, tape: &mut Tape, trainable: bool) -> ParamVars {
        let mut put = |m: &Matrix| {
            if trainable {
                tape.var(m.clone())
            } else {
                tape.constant(m.clone())
            }
        };
        ParamVars {
            w1: put(&self.w1),
            w2: put(&self.w2),
            prelu1: put(&self.prelu1),
            prelu2: put(&self.prelu2),
            head_mu: put(&self.head_mu),
            head_logvar: put(&self.head_logvar),
            bilinear: put(&self.bilinear),
        }
    }
}

/// Tape handles for an [`EncoderParams`].
#[derive(Debug, Clone, Copy)]
pub struct ParamVars {
    pub w1: Var,
    pub w2: Var,
    pub prelu1: Var,
    pub prelu2: Var,
    pub head_mu: Var,
    pub head_logvar: Var,
    pub bilinear: Var,
}

impl ParamVars {
    pub fn all(&self) -> [Var; 7] {
        [
            self.w1,
            self.w2,
            self.prelu1,
            self.prelu2,
            self.head_mu,
            self.head_logvar,
            self.bilinear,
        ]
    }

    /// SGC weight shared with the encoder: `W1 · W2`.
    pub fn theta_eff(&self, tape: &mut Tape) -> Result<Var> {
        tape.matmul(self.w1, self.w2)
    }
}

/// Propagation operator for a forward pass: a fixed sparse `Â`, or a dense
/// `Â` recorded on the tape (used by the structure attack's relaxation).
#[derive(Debug, Clone)]
pub enum Adjacency {
    Sparse(Arc<CsrMatrix>),
    Dense(Var),
}

impl From<&NormalizedAdjacency> for Adjacency {
    fn from(a: &NormalizedAdjacency) -> Self {
        Adjacency::Sparse(Arc::clone(a.csr()))
    }
}

impl Adjacency {
    pub fn propagate(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        match self {
            Adjacency::Sparse(s) => tape.spmm(s, x),
            Adjacency::Dense(a) => tape.matmul(*a, x),
        }
    }
}

/// Tape handles of a forward pass.
#[derive(Debug, Clone, Copy)]
pub struct EncoderOutput {
    pub mu: Var,
    pub logvar: Var,
}

/// `H1 = PReLU(Â X W1)`, `H2 = PReLU(Â H1 W2)`, `mu = H2 Wμ`,
/// `logvar = clamp(H2 Wσ, -10, 10)`.
pub fn gcn_forward(
    tape: &mut Tape,
    p: &ParamVars,
    adj: &Adjacency,
    x: Var,
) -> Result<EncoderOutput> {
    let ax = adj.propagate(tape, x)?;
    let h1 = tape.matmul(ax, p.w1)?;
    let h1 = tape.prelu(h1, p.prelu1)?;
    let ah = adj.propagate(tape, h1)?;
    let h2 = tape.matmul(ah, p.w2)?;
    let h2 = tape.prelu(h2, p.prelu2)?;
    let mu = tape.matmul(h2, p.head_mu)?;
    let lv = tape.matmul(h2, p.head_logvar)?;
    let logvar = tape.clamp(lv, LOGVAR_MIN, LOGVAR_MAX);
    Ok(EncoderOutput { mu, logvar })
}

/// Reparameterised sample `z = mu + exp(logvar / 2) ⊙ noise`.
pub fn sample_z_on_tape(tape: &mut Tape, out: &EncoderOutput, noise: &Matrix) -> Result<Var> {
    let eta = tape.constant(noise.clone());
    let half = tape.scale(out.logvar, 0.5);
    let std = tape.exp(half);
    let scaled = tape.mul(std, eta)?;
    tape.add(out.mu, scaled)
}

pub fn standard_normal(rows: usize, cols: usize, seed: u64) -> Matrix {
    let mut rng = stream(seed, Stream::Noise, 0);
    Matrix::from_fn(rows, cols, |_, _| StandardNormal.sample(&mut rng))
}

/// Whether an embedding came from the clean or the perturbed graph.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EmbeddingSource {
    Benign,
    Adversarial,
}

/// Concrete per-node Gaussian parameters and representation.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingSet {
    pub mu: Matrix,
    pub logvar: Matrix,
    /// Sampled representation, or a copy of `mu` when deterministic.
    pub z: Matrix,
    /// Noise used for `z`, if sampled.
    pub noise: Option<Matrix>,
    pub source: EmbeddingSource,
}

impl EmbeddingSet {
    /// Fills `z` with a reparameterised sample drawn from `seed`.
    pub fn sample_z(&self, seed: u64) -> EmbeddingSet {
        let noise = standard_normal(self.mu.rows(), self.mu.cols(), seed);
        let z = Matrix::from_fn(self.mu.rows(), self.mu.cols(), |i, j| {
            self.mu[(i, j)] + (0.5 * self.logvar[(i, j)]).exp() * noise[(i, j)]
        });
        EmbeddingSet {
            z,
            noise: Some(noise),
            ..self.clone()
        }
    }
}

/// Deterministic forward pass (`z = mu`) outside any training tape.
pub fn embed(
    params: &EncoderParams,
    adj: &NormalizedAdjacency,
    features: &Matrix,
    source: EmbeddingSource,
) -> Result<EmbeddingSet> {
    check_input(params, adj.n(), features)?;
    let mut tape = Tape::new();
    let p = params.record(&mut tape, false);
    let x = tape.constant(features.clone());
    let out = gcn_forward(&mut tape, &p, &adj.into(), x)?;
    let mu = tape.value(out.mu).clone();
    Ok(EmbeddingSet {
        z: mu.clone(),
        logvar: tape.value(out.logvar).clone(),
        mu,
        noise: None,
        source,
    })
}

/// Embeds a graph with its own normalised adjacency.
pub fn embed_graph(params: &EncoderParams, g: &AttributedGraph) -> Result<EmbeddingSet> {
    let adj = crate::graph::normalize_adjacency(g);
    embed(params, &adj, g.features(), EmbeddingSource::Benign)
}

pub(crate) fn check_input(params: &EncoderParams, n: usize, features: &Matrix) -> Result<()> {
    if features.rows() != n {
        return Err(Error::shape("encoder input rows", n, features.rows()));
    }
    if features.cols() != params.input_dim() {
        return Err(Error::shape(
            "encoder input dim",
            params.input_dim(),
            features.cols(),
        ));
    }
    Ok(())
}

/// `Â^K X Θ` by K sparse products; `Â^K` is never formed.
pub fn sgc_on_tape(tape: &mut Tape, theta: Var, adj: &Adjacency, x: Var, k: usize) -> Result<Var> {
    if k == 0 {
        return Err(Error::InvalidArgument("SGC depth K must be >= 1".into()));
    }
    let (d, m) = tape.shape(theta);
    // Project first when it shrinks the propagated width.
    let mut h = if m < d { tape.matmul(x, theta)? } else { x };
    for _ in 0..k {
        h = adj.propagate(tape, h)?;
    }
    if m < d {
        Ok(h)
    } else {
        tape.matmul(h, theta)
    }
}

pub fn sgc_forward(
    theta: &Matrix,
    adj: &NormalizedAdjacency,
    x: &Matrix,
    k: usize,
) -> Result<Matrix> {
    if x.rows() != adj.n() || x.cols() != theta.rows() {
        return Err(Error::shape(
            "sgc_forward",
            format!("{}x{}", adj.n(), theta.rows()),
            format!("{}x{}", x.rows(), x.cols()),
        ));
    }
    let mut tape = Tape::new();
    let t = tape.constant(theta.clone());
    let xv = tape.constant(x.clone());
    let out = sgc_on_tape(&mut tape, t, &adj.into(), xv, k)?;
    Ok(tape.value(out).clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::normalize_adjacency;

    fn tiny_graph() -> AttributedGraph {
        AttributedGraph::new(
            4,
            vec![(0, 1), (1, 2), (2, 3)],
            Matrix::from_fn(4, 3, |i, j| ((i * 3 + j) as f64).sin()),
            None,
        )
        .unwrap()
    }

    #[test]
    fn zero_features_and_heads_give_zero_mean() {
        let g = tiny_graph();
        let mut p = EncoderParams::init(3, 5, 4, 0).unwrap();
        p.head_mu = Matrix::zeros(4, 4);
        let e = embed(
            &p,
            &normalize_adjacency(&g),
            &Matrix::zeros(4, 3),
            EmbeddingSource::Benign,
        )
        .unwrap();
        assert_eq!(e.mu, Matrix::zeros(4, 4));
    }

    #[test]
    fn single_node_identity_path_is_linear() {
        let x = Matrix::from_rows(&[vec![0.5, -1.5]]).unwrap();
        let g = AttributedGraph::new(1, vec![], x.clone(), None).unwrap();
        let mut p = EncoderParams::init(2, 2, 2, 0).unwrap();
        p.w1 = Matrix::identity(2);
        p.w2 = Matrix::identity(2);
        p.prelu1 = Matrix::scalar(1.0);
        p.prelu2 = Matrix::scalar(1.0);
        let e = embed_graph(&p, &g).unwrap();
        assert!(e.mu.max_abs_diff(&x.matmul(&p.head_mu)) < 1e-15);
    }

    #[test]
    fn sample_with_floor_variance_stays_near_mean() {
        let mu = Matrix::from_fn(5, 3, |i, j| i as f64 - j as f64);
        let e = EmbeddingSet {
            z: mu.clone(),
            logvar: Matrix::filled(5, 3, LOGVAR_MIN),
            mu: mu.clone(),
            noise: None,
            source: EmbeddingSource::Benign,
        };
        let s = e.sample_z(3);
        let noise = s.noise.as_ref().unwrap();
        for i in 0..5 {
            for j in 0..3 {
                let bound = (-5f64).exp() * noise[(i, j)].abs();
                assert!((s.z[(i, j)] - mu[(i, j)]).abs() <= bound + 1e-15);
            }
        }
        assert_eq!(s, e.sample_z(3));
    }

    #[test]
    fn sample_mean_converges() {
        let mu = Matrix::from_rows(&[vec![0.7, -2.0]]).unwrap();
        let logvar = Matrix::from_rows(&[vec![0.0, 1.0]]).unwrap();
        let e = EmbeddingSet {
            z: mu.clone(),
            logvar: logvar.clone(),
            mu: mu.clone(),
            noise: None,
            source: EmbeddingSource::Benign,
        };
        let draws = 10_000;
        let mut acc = [0.0; 2];
        for s in 0..draws {
            let z = e.sample_z(s as u64).z;
            acc[0] += z[(0, 0)];
            acc[1] += z[(0, 1)];
        }
        for j in 0..2 {
            let mean = acc[j] / draws as f64;
            let sigma = (0.5 * logvar[(0, j)]).exp();
            assert!(
                (mean - mu[(0, j)]).abs() < 3.0 * sigma / (draws as f64).sqrt(),
                "dim {j}: {mean}"
            );
        }
    }

    #[test]
    fn sgc_identity_adjacency() {
        let g = AttributedGraph::new(
            3,
            vec![],
            Matrix::from_fn(3, 2, |i, j| (i + j) as f64),
            None,
        )
        .unwrap();
        let theta = Matrix::from_rows(&[vec![1.0, 2.0, 0.0], vec![-1.0, 0.5, 3.0]]).unwrap();
        let out = sgc_forward(&theta, &normalize_adjacency(&g), g.features(), 1).unwrap();
        assert!(out.max_abs_diff(&g.features().matmul(&theta)) < 1e-15);
    }

    #[test]
    fn sgc_is_linear_and_rejects_zero_depth() {
        let g = tiny_graph();
        let a = normalize_adjacency(&g);
        let theta = Matrix::from_fn(3, 2, |i, j| (i as f64 + 1.0) * (j as f64 - 0.5));
        let x1 = g.features().clone();
        let x2 = x1.map(|v| v * v - 0.3);
        let lhs = sgc_forward(&theta, &a, &x1.add(&x2), 2).unwrap();
        let rhs = sgc_forward(&theta, &a, &x1, 2)
            .unwrap()
            .add(&sgc_forward(&theta, &a, &x2, 2).unwrap());
        assert!(lhs.max_abs_diff(&rhs) < 1e-12);
        assert!(sgc_forward(&theta, &a, &x1, 0).is_err());
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let g = tiny_graph();
        let p = EncoderParams::init(5, 4, 4, 0).unwrap();
        assert!(embed_graph(&p, &g).is_err());
    }
}
