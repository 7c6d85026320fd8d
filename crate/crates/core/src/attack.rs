//! Adversarial perturbations.
//!
//! Attackers here *minimise* a loss recorded through an [`AttackLoss`]; the
//! trainer passes the RGIB objective, the evaluation harness passes a negated
//! classification loss.

use std::collections::BTreeSet;
use std::sync::Arc;

use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::diff::{least_squares_solve, Matrix, Tape, Var};
use crate::encoder::Adjacency;
use crate::error::{Error, Result};
use crate::graph::{normalize_adjacency, AttributedGraph, NormalizedAdjacency};
use crate::rng::{stream, Stream};

/// A scalar loss recorded on a tape for a given propagation operator and
/// (possibly perturbed) feature matrix.
pub trait AttackLoss {
    fn record(&self, tape: &mut Tape, adj: &Adjacency, features: Var) -> Result<Var>;
}

impl<F> AttackLoss for F
where
    F: Fn(&mut Tape, &Adjacency, Var) -> Result<Var>,
{
    fn record(&self, tape: &mut Tape, adj: &Adjacency, features: Var) -> Result<Var> {
        self(tape, adj, features)
    }
}

/// How a PGD step uses the gradient.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum StepRule {
    /// Each row moves `step` along its own normalised gradient.
    #[default]
    RowNormalized,
    /// `ΔX ← ΔX − step · ∇`.
    Raw,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PerturbationSpec {
    /// ℓ2,∞ radius of the feature perturbation.
    pub epsilon: f64,
    pub pgd_iters: usize,
    /// Defaults to `2.5 · epsilon / pgd_iters`.
    pub pgd_step: Option<f64>,
    pub step_rule: StepRule,
    /// Maximum number of flipped node pairs.
    pub edge_budget: usize,
    pub structure_iters: usize,
    /// Randomised-rounding draws for the structure attack.
    pub rounding_samples: usize,
}

impl Default for PerturbationSpec {
    fn default() -> Self {
        Self {
            epsilon: 1e-3,
            pgd_iters: 5,
            pgd_step: None,
            step_rule: StepRule::RowNormalized,
            edge_budget: 0,
            structure_iters: 20,
            rounding_samples: 20,
        }
    }
}

impl PerturbationSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon >= 0.0 && self.epsilon.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "epsilon {} must be >= 0",
                self.epsilon
            )));
        }
        if self.pgd_iters == 0 {
            return Err(Error::InvalidConfig("pgd_iters must be >= 1".into()));
        }
        if self.structure_iters == 0 || self.rounding_samples == 0 {
            return Err(Error::InvalidConfig(
                "structure_iters and rounding_samples must be >= 1".into(),
            ));
        }
        if let Some(s) = self.pgd_step {
            if !(s > 0.0 && s.is_finite()) {
                return Err(Error::InvalidConfig(format!("pgd_step {s} must be > 0")));
            }
        }
        Ok(())
    }

    pub fn step_size(&self) -> f64 {
        self.pgd_step
            .unwrap_or(2.5 * self.epsilon / self.pgd_iters as f64)
    }
}

/// Additive feature perturbation `ΔX`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeaturePerturbation {
    pub delta: Matrix,
}

#[derive(Serialize, Deserialize)]
struct SparseRows {
    rows: usize,
    cols: usize,
    /// `(row, values)` for every nonzero row.
    entries: Vec<(usize, Vec<f64>)>,
}

impl Serialize for FeaturePerturbation {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        let d = &self.delta;
        SparseRows {
            rows: d.rows(),
            cols: d.cols(),
            entries: (0..d.rows())
                .filter(|&i| d.row(i).iter().any(|&x| x != 0.0))
                .map(|i| (i, d.row(i).to_vec()))
                .collect(),
        }
        .serialize(s)
    }
}

impl<'de> Deserialize<'de> for FeaturePerturbation {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        use serde::de::Error as _;
        let sr = SparseRows::deserialize(d)?;
        let mut delta = Matrix::zeros(sr.rows, sr.cols);
        for (i, vals) in sr.entries {
            if i >= sr.rows || vals.len() != sr.cols {
                return Err(D::Error::custom(format!("bad perturbation row {i}")));
            }
            delta.row_mut(i).copy_from_slice(&vals);
        }
        Ok(FeaturePerturbation { delta })
    }
}

impl FeaturePerturbation {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            delta: Matrix::zeros(rows, cols),
        }
    }

    /// `max_i ‖ΔX_i‖₂`.
    pub fn l2inf_norm(&self) -> f64 {
        self.delta.row_norms().into_iter().fold(0.0, f64::max)
    }

    pub fn apply(&self, features: &Matrix) -> Matrix {
        features.add(&self.delta)
    }
}

/// Set of toggled node pairs, each `(u, v)` with `u < v`.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct StructurePerturbation {
    pub flips: Vec<(usize, usize)>,
}

impl StructurePerturbation {
    pub fn len(&self) -> usize {
        self.flips.len()
    }

    pub fn is_empty(&self) -> bool {
        self.flips.is_empty()
    }

    pub fn apply(&self, g: &AttributedGraph) -> Result<AttributedGraph> {
        g.flip_edges(&self.flips)
    }
}

/// Row-wise projection onto the ℓ2,∞ ball: `r ← r · min(1, ε / ‖r‖₂)`.
pub fn project_l2inf(delta: &Matrix, epsilon: f64) -> Matrix {
    let mut out = delta.clone();
    project_l2inf_in_place(&mut out, epsilon);
    out
}

/// In-place [`project_l2inf`]. Rescaled rows are shrunk by a few ulps if
/// rounding leaves their computed norm above `epsilon`, so the projection is
/// exactly idempotent.
pub fn project_l2inf_in_place(delta: &mut Matrix, epsilon: f64) {
    let norm_of = |r: &[f64]| r.iter().map(|x| x * x).sum::<f64>().sqrt();
    for i in 0..delta.rows() {
        let row = delta.row_mut(i);
        let norm = norm_of(row);
        if norm > epsilon {
            let s = if norm > 0.0 { epsilon / norm } else { 0.0 };
            row.iter_mut().for_each(|x| *x *= s);
            while norm_of(row) > epsilon {
                row.iter_mut().for_each(|x| *x *= 1.0 - f64::EPSILON);
            }
        }
    }
}

#[derive(Debug, Clone)]
pub struct FeatureAttackResult {
    /// Lowest-loss iterate.
    pub perturbation: FeaturePerturbation,
    pub loss_at_zero: f64,
    pub loss: f64,
    /// Loss at every evaluated iterate, starting with the initial point.
    pub trace: Vec<f64>,
}

impl FeatureAttackResult {
    /// `loss_at_zero − loss`, never negative.
    pub fn loss_drop(&self) -> f64 {
        self.loss_at_zero - self.loss
    }
}

fn record_at(
    loss: &dyn AttackLoss,
    adj: &Adjacency,
    features: &Matrix,
    delta: &Matrix,
    with_grad: bool,
) -> Result<(f64, Option<Matrix>)> {
    let mut tape = Tape::new();
    let x = tape.constant(features.clone());
    let d = if with_grad {
        tape.var(delta.clone())
    } else {
        tape.constant(delta.clone())
    };
    let xa = tape.add(x, d)?;
    let l = loss.record(&mut tape, adj, xa)?;
    let value = tape.item(l);
    if !value.is_finite() {
        return Err(Error::NonFinite("attack loss".into()));
    }
    let grad = if with_grad {
        Some(tape.gradient(l, &[d])?.remove(0))
    } else {
        None
    };
    Ok((value, grad))
}

/// Feature PGD from `ΔX = 0`. See [`pgd_feature_attack_from`].
pub fn pgd_feature_attack(
    graph: &AttributedGraph,
    loss: &dyn AttackLoss,
    spec: &PerturbationSpec,
) -> Result<FeatureAttackResult> {
    let adj = normalize_adjacency(graph);
    pgd_feature_attack_on(&(&adj).into(), graph.features(), loss, spec, None)
}

/// Projected gradient *descent* on `ΔX` inside the ℓ2,∞ ball, starting from
/// `init` (zero when `None`). Returns the lowest-loss iterate seen, so the
/// reported loss never exceeds the loss at the starting point.
pub fn pgd_feature_attack_on(
    adj: &Adjacency,
    features: &Matrix,
    loss: &dyn AttackLoss,
    spec: &PerturbationSpec,
    init: Option<&Matrix>,
) -> Result<FeatureAttackResult> {
    spec.validate()?;
    let (n, d) = features.shape();
    let mut delta = match init {
        Some(m) if m.shape() != (n, d) => {
            return Err(Error::shape(
                "pgd init",
                format!("{n}x{d}"),
                format!("{:?}", m.shape()),
            ))
        }
        Some(m) => project_l2inf(m, spec.epsilon),
        None => Matrix::zeros(n, d),
    };
    let loss_at_zero = record_at(loss, adj, features, &Matrix::zeros(n, d), false)?.0;
    if spec.epsilon == 0.0 {
        return Ok(FeatureAttackResult {
            perturbation: FeaturePerturbation::zeros(n, d),
            loss_at_zero,
            loss: loss_at_zero,
            trace: vec![loss_at_zero],
        });
    }
    let step = spec.step_size();
    let mut best = (loss_at_zero, Matrix::zeros(n, d));
    let mut trace = Vec::with_capacity(spec.pgd_iters + 1);
    for _ in 0..spec.pgd_iters {
        let (value, grad) = record_at(loss, adj, features, &delta, true)?;
        trace.push(value);
        if value < best.0 {
            best = (value, delta.clone());
        }
        let grad = grad.expect("gradient requested");
        apply_step(&mut delta, &grad, step, spec.step_rule);
        project_l2inf_in_place(&mut delta, spec.epsilon);
    }
    let (value, _) = record_at(loss, adj, features, &delta, false)?;
    trace.push(value);
    if value < best.0 {
        best = (value, delta);
    }
    Ok(FeatureAttackResult {
        perturbation: FeaturePerturbation { delta: best.1 },
        loss_at_zero,
        loss: best.0,
        trace,
    })
}

fn apply_step(delta: &mut Matrix, grad: &Matrix, step: f64, rule: StepRule) {
    match rule {
        StepRule::Raw => delta.axpy(-step, grad),
        StepRule::RowNormalized => {
            for i in 0..delta.rows() {
                let g = grad.row(i);
                let norm = g.iter().map(|x| x * x).sum::<f64>().sqrt();
                if norm > 0.0 {
                    for (d, gi) in delta.row_mut(i).iter_mut().zip(g) {
                        *d -= step * gi / norm;
                    }
                }
            }
        }
    }
}

/// Candidate pairs for the structure attack: every pair for `n <= 3000`,
/// otherwise all edges plus an equal number of seeded non-edges.
pub fn structure_candidates(g: &AttributedGraph, seed: u64) -> Vec<(usize, usize)> {
    let n = g.num_nodes();
    if n <= 3000 {
        let mut c = Vec::with_capacity(n * n.saturating_sub(1) / 2);
        for u in 0..n {
            for v in (u + 1)..n {
                c.push((u, v));
            }
        }
        return c;
    }
    let mut rng = stream(seed, Stream::StructureAttack, 1);
    let mut set: BTreeSet<(usize, usize)> = g.edges().iter().copied().collect();
    let target = 2 * g.num_edges();
    let max_pairs = n * (n - 1) / 2;
    while set.len() < target.min(max_pairs) {
        let u = rng.random_range(0..n);
        let v = rng.random_range(0..n);
        if u != v {
            set.insert((u.min(v), u.max(v)));
        }
    }
    set.into_iter().collect()
}

/// Euclidean projection onto `{p ∈ [0,1]^k : Σ p ≤ budget}` by bisection on
/// the shift `μ` in `clip(p − μ, 0, 1)`.
pub fn project_budget(p: &mut [f64], budget: f64) {
    let clipped_sum = |mu: f64| p.iter().map(|&x| (x - mu).clamp(0.0, 1.0)).sum::<f64>();
    if clipped_sum(0.0) <= budget {
        p.iter_mut().for_each(|x| *x = x.clamp(0.0, 1.0));
        return;
    }
    let hi_p = p.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let (mut lo, mut hi) = (0.0, hi_p.max(0.0));
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if clipped_sum(mid) > budget {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo < 1e-14 {
            break;
        }
    }
    // `hi` is always feasible.
    p.iter_mut().for_each(|x| *x = (*x - hi).clamp(0.0, 1.0));
}

#[derive(Debug, Clone)]
pub struct StructureAttackResult {
    pub perturbation: StructurePerturbation,
    pub loss_before: f64,
    pub loss: f64,
    /// Relaxed flip probabilities after the last gradient step.
    pub relaxed_mass: f64,
}

/// Records the dense normalised adjacency of `A ⊕ flips(p)` on the tape.
fn relaxed_adjacency(
    tape: &mut Tape,
    base: &Matrix,
    sign: &Matrix,
    p: Var,
    pairs: &Arc<Vec<(usize, usize)>>,
) -> Result<Var> {
    let n = base.rows();
    let s = tape.scatter_sym(p, Arc::clone(pairs), n)?;
    let sign = tape.constant(sign.clone());
    let signed = tape.mul(sign, s)?;
    let a_tilde_base = tape.constant(base.clone());
    let a_tilde = tape.add(a_tilde_base, signed)?;
    let deg = tape.row_sum(a_tilde);
    let dinv = tape.rsqrt(deg);
    let left = tape.scale_rows(a_tilde, dinv)?;
    tape.scale_cols(left, dinv)
}

fn sparse_loss(loss: &dyn AttackLoss, g: &AttributedGraph, features: &Matrix) -> Result<f64> {
    let adj = normalize_adjacency(g);
    let mut tape = Tape::new();
    let x = tape.constant(features.clone());
    let l = loss.record(&mut tape, &(&adj).into(), x)?;
    Ok(tape.item(l))
}

/// Relaxed projected-gradient structure attack with randomised rounding.
///
/// Flip probabilities `p` over candidate pairs are driven down the loss with
/// step `1/√t` along `∇/‖∇‖∞`, then projected onto the budget polytope.
/// Discrete flips come from the best of `rounding_samples` Bernoulli(p)
/// draws that respect the budget.
pub fn pgd_structure_attack(
    graph: &AttributedGraph,
    loss: &dyn AttackLoss,
    spec: &PerturbationSpec,
    seed: u64,
) -> Result<StructureAttackResult> {
    spec.validate()?;
    let features = graph.features();
    let loss_before = sparse_loss(loss, graph, features)?;
    if spec.edge_budget == 0 {
        return Ok(StructureAttackResult {
            perturbation: StructurePerturbation::default(),
            loss_before,
            loss: loss_before,
            relaxed_mass: 0.0,
        });
    }
    let cands = Arc::new(structure_candidates(graph, seed));
    if spec.edge_budget > cands.len() {
        return Err(Error::InvalidArgument(format!(
            "edge budget {} exceeds {} candidate pairs",
            spec.edge_budget,
            cands.len()
        )));
    }
    let n = graph.num_nodes();
    let mut base = Matrix::identity(n);
    let mut sign = Matrix::filled(n, n, 1.0);
    for &(u, v) in graph.edges() {
        base[(u, v)] = 1.0;
        base[(v, u)] = 1.0;
        sign[(u, v)] = -1.0;
        sign[(v, u)] = -1.0;
    }
    let budget = spec.edge_budget as f64;
    let mut p = Matrix::zeros(cands.len(), 1);
    for t in 0..spec.structure_iters {
        let mut tape = Tape::new();
        let pv = tape.var(p.clone());
        let a_hat = relaxed_adjacency(&mut tape, &base, &sign, pv, &cands)?;
        let x = tape.constant(features.clone());
        let l = loss.record(&mut tape, &Adjacency::Dense(a_hat), x)?;
        if !tape.item(l).is_finite() {
            return Err(Error::NonFinite("structure attack loss".into()));
        }
        let g = tape.gradient(l, &[pv])?.remove(0);
        let gmax = g.max_abs();
        if gmax == 0.0 {
            break;
        }
        let lr = 1.0 / ((t + 1) as f64).sqrt();
        p.axpy(-lr / gmax, &g);
        project_budget(p.as_mut_slice(), budget);
    }
    let relaxed_mass = p.sum();

    let mut rng = stream(seed, Stream::StructureAttack, 0);
    let probs = p.as_slice();
    let mut best: Option<(f64, Vec<(usize, usize)>)> = None;
    for _ in 0..spec.rounding_samples {
        let mut flips = Vec::new();
        for _ in 0..100 {
            flips = cands
                .iter()
                .zip(probs)
                .filter(|(_, &pk)| pk > 0.0 && rng.random::<f64>() < pk)
                .map(|(&c, _)| c)
                .collect();
            if flips.len() <= spec.edge_budget {
                break;
            }
        }
        if flips.len() > spec.edge_budget {
            // Keep the most probable flips.
            let mut ranked: Vec<(f64, (usize, usize))> = flips
                .iter()
                .map(|c| (probs[cands.binary_search(c).unwrap()], *c))
                .collect();
            ranked.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
            flips = ranked
                .into_iter()
                .take(spec.edge_budget)
                .map(|x| x.1)
                .collect();
            flips.sort_unstable();
        }
        let value = sparse_loss(loss, &graph.flip_edges(&flips)?, features)?;
        if best.as_ref().is_none_or(|b| value < b.0) {
            best = Some((value, flips));
        }
    }
    let (value, flips) = best.expect("at least one rounding sample");
    Ok(StructureAttackResult {
        perturbation: StructurePerturbation { flips },
        loss_before,
        loss: value,
        relaxed_mass,
    })
}

/// `count` distinct node pairs toggled uniformly at random.
pub fn random_flips(g: &AttributedGraph, count: usize, seed: u64) -> Result<StructurePerturbation> {
    let n = g.num_nodes();
    let total = n * n.saturating_sub(1) / 2;
    if count > total {
        return Err(Error::InvalidArgument(format!(
            "{count} flips requested, only {total} pairs"
        )));
    }
    let mut rng = stream(seed, Stream::StructureAttack, 2);
    let mut flips: Vec<(usize, usize)> = sample(&mut rng, total, count)
        .into_iter()
        .map(|k| pair_from_index(k, n))
        .collect();
    flips.sort_unstable();
    Ok(StructurePerturbation { flips })
}

/// Inverse of the row-major enumeration of pairs `u < v`.
fn pair_from_index(mut k: usize, n: usize) -> (usize, usize) {
    let mut u = 0;
    loop {
        let row = n - 1 - u;
        if k < row {
            return (u, u + 1 + k);
        }
        k -= row;
        u += 1;
    }
}

#[derive(Debug, Clone)]
pub struct EquivalentPerturbation {
    pub delta: Matrix,
    /// `‖Â^K (X + ΔX) − Â′^K X‖_F`; zero up to rounding when `Â` is nonsingular.
    pub residual: f64,
    /// Smallest numerical rank seen across the K solves.
    pub rank: usize,
}

/// `ΔX = (Â⁺)^K Â′^K X − X`, so an SGC of depth K sees the same output on
/// `(Â, X + ΔX)` as on `(Â′, X)` whenever `Â` is invertible.
pub fn equivalent_feature_perturbation(
    adj: &NormalizedAdjacency,
    adj_perturbed: &NormalizedAdjacency,
    features: &Matrix,
    k: usize,
) -> Result<EquivalentPerturbation> {
    if k == 0 {
        return Err(Error::InvalidArgument("K must be >= 1".into()));
    }
    if adj.n() != adj_perturbed.n() || features.rows() != adj.n() {
        return Err(Error::shape(
            "equivalent_feature_perturbation",
            adj.n(),
            format!("{} / {}", adj_perturbed.n(), features.rows()),
        ));
    }
    let mut target = features.clone();
    for _ in 0..k {
        target = adj_perturbed.matmul(&target);
    }
    let dense = adj.to_dense();
    let mut y = target.clone();
    let mut rank = adj.n();
    for _ in 0..k {
        let ls = least_squares_solve(&dense, &y)?;
        rank = rank.min(ls.rank);
        y = ls.solution;
    }
    let delta = y.sub(features);
    let mut check = features.add(&delta);
    for _ in 0..k {
        check = adj.matmul(&check);
    }
    Ok(EquivalentPerturbation {
        residual: check.sub(&target).frobenius_norm(),
        delta,
        rank,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SurrogateConfig {
    pub iters: usize,
    /// Step size on the relative MSE.
    pub lr: f64,
    pub momentum: f64,
    /// Output rows per stochastic step; `None` uses every row.
    pub batch_rows: Option<usize>,
    pub seed: u64,
}

impl Default for SurrogateConfig {
    fn default() -> Self {
        Self {
            iters: 500,
            lr: 0.1,
            momentum: 0.9,
            batch_rows: None,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SurrogateFit {
    pub delta: Matrix,
    pub mse_before: f64,
    pub mse_after: f64,
}

fn mse_on_tape(tape: &mut Tape, a: Var, b: Var, rows: Option<&Arc<Vec<usize>>>) -> Result<Var> {
    let diff = tape.sub(a, b)?;
    let diff = match rows {
        Some(r) => tape.select_rows(diff, Arc::clone(r))?,
        None => diff,
    };
    let sq = tape.square(diff);
    tape.mean(sq)
}

/// Fits `ΔX` so that `g(Â, X + ΔX)` mimics `g(Â′, X)` under mean squared
/// error, by (stochastic) gradient descent with momentum from `ΔX = 0`.
///
/// Steps are taken on the MSE divided by its value at `ΔX = 0`, so `lr` does
/// not depend on the scale of `g`'s output.
pub fn fit_feature_surrogate(
    forward: &dyn AttackLoss,
    adj: &NormalizedAdjacency,
    adj_perturbed: &NormalizedAdjacency,
    features: &Matrix,
    cfg: &SurrogateConfig,
) -> Result<SurrogateFit> {
    let target = {
        let mut tape = Tape::new();
        let x = tape.constant(features.clone());
        let out = forward.record(&mut tape, &adj_perturbed.into(), x)?;
        tape.value(out).clone()
    };
    let n = features.rows();
    let adj_op: Adjacency = adj.into();
    let mse_at = |delta: &Matrix,
                  rows: Option<&Arc<Vec<usize>>>,
                  grad: bool|
     -> Result<(f64, Option<Matrix>)> {
        let mut tape = Tape::new();
        let x = tape.constant(features.clone());
        let d = if grad {
            tape.var(delta.clone())
        } else {
            tape.constant(delta.clone())
        };
        let xa = tape.add(x, d)?;
        let out = forward.record(&mut tape, &adj_op, xa)?;
        let t = tape.constant(target.clone());
        let l = mse_on_tape(&mut tape, out, t, rows)?;
        let v = tape.item(l);
        let g = if grad {
            Some(tape.gradient(l, &[d])?.remove(0))
        } else {
            None
        };
        Ok((v, g))
    };
    let mut delta = Matrix::zeros(features.rows(), features.cols());
    let mse_before = mse_at(&delta, None, false)?.0;
    if mse_before == 0.0 {
        return Ok(SurrogateFit {
            delta,
            mse_before,
            mse_after: 0.0,
        });
    }
    let mut velocity = Matrix::zeros(delta.rows(), delta.cols());
    let mut rng = stream(cfg.seed, Stream::Surrogate, 0);
    for _ in 0..cfg.iters {
        let rows = cfg
            .batch_rows
            .filter(|&b| b < n)
            .map(|b| Arc::new(sample(&mut rng, n, b).into_vec()));
        let (v, g) = mse_at(&delta, rows.as_ref(), true)?;
        if !v.is_finite() {
            return Err(Error::NonFinite("surrogate fit".into()));
        }
        let g = g.expect("gradient requested").scale(1.0 / mse_before);
        velocity = velocity.scale(cfg.momentum);
        velocity.axpy(1.0, &g);
        delta.axpy(-cfg.lr, &velocity);
    }
    let mse_after = mse_at(&delta, None, false)?.0;
    Ok(SurrogateFit {
        delta,
        mse_before,
        mse_after,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn projection_cases() {
        let eps = 0.5;
        let m = Matrix::from_rows(&[vec![0.6, 0.8], vec![0.15, 0.2], vec![0.0, 0.0]]).unwrap();
        let p = project_l2inf(&m, eps);
        let norms = p.row_norms();
        assert!((norms[0] - eps).abs() < 1e-15);
        assert_eq!(p.row(1), m.row(1));
        assert_eq!(p.row(2), &[0.0, 0.0]);
        assert_eq!(project_l2inf(&p, eps), p);
        assert_eq!(project_l2inf(&m, 0.0), Matrix::zeros(3, 2));
    }

    #[test]
    fn budget_projection_is_feasible() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..200 {
            let k = rng.random_range(1..40);
            let budget = rng.random_range(0.0..k as f64);
            let mut p: Vec<f64> = (0..k).map(|_| rng.random_range(-1.0..3.0)).collect();
            project_budget(&mut p, budget);
            assert!(p.iter().all(|&x| (0.0..=1.0).contains(&x)));
            assert!(p.iter().sum::<f64>() <= budget + 1e-9);
        }
        let mut inside = vec![0.2, 0.3];
        project_budget(&mut inside, 1.0);
        assert_eq!(inside, vec![0.2, 0.3]);
    }

    #[test]
    fn pair_enumeration_round_trips() {
        let n = 7;
        let mut k = 0;
        for u in 0..n {
            for v in (u + 1)..n {
                assert_eq!(pair_from_index(k, n), (u, v));
                k += 1;
            }
        }
    }

    #[test]
    fn perturbation_json_is_row_sparse() {
        let mut d = Matrix::zeros(4, 2);
        d[(2, 1)] = 0.25;
        let fp = FeaturePerturbation { delta: d };
        let s = serde_json::to_string(&fp).unwrap();
        assert_eq!(s, r#"{"rows":4,"cols":2,"entries":[[2,[0.0,0.25]]]}"#);
        let back: FeaturePerturbation = serde_json::from_str(&s).unwrap();
        assert_eq!(back, fp);
        assert!(serde_json::from_str::<FeaturePerturbation>(
            r#"{"rows":1,"cols":2,"entries":[[3,[0.0,0.0]]]}"#
        )
        .is_err());
    }

    #[test]
    fn spec_validation() {
        assert!(PerturbationSpec::default().validate().is_ok());
        assert!(PerturbationSpec {
            epsilon: -1.0,
            ..Default::default()
        }
        .validate()
        .is_err());
        assert!(PerturbationSpec {
            pgd_iters: 0,
            ..Default::default()
        }
        .validate()
        .is_err());
        let s = PerturbationSpec {
            epsilon: 0.2,
            pgd_iters: 5,
            ..Default::default()
        };
        assert!((s.step_size() - 0.1).abs() < 1e-15);
    }
}
