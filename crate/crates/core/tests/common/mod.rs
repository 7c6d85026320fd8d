#![allow(dead_code)]

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use rgib_core::attack::{equivalent_feature_perturbation, project_l2inf, random_flips, AttackLoss};
use rgib_core::diff::{finite_difference_check_sampled, FdReport, Matrix, Tape, Var};
use rgib_core::encoder::{
    gcn_forward, sgc_forward, Adjacency, EncoderParams, ParamVars, PARAM_NAMES,
};
use rgib_core::graph::{
    generate_sbm, normalize_adjacency, row_l2_normalize, AttributedGraph, SbmSpec,
};
use rgib_core::mi::{jsd_mi, kl_gauss_diag_on_tape, Estimator, PairBatch};
use rgib_core::trainer::{record_objective, EpochContext, TrainConfig};
use rgib_core::Result;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn gaussian(rng: &mut impl Rng, rows: usize, cols: usize) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| rng.sample(StandardNormal))
}

/// Erdős–Rényi graph with Gaussian features and no labels.
pub fn random_graph(rng: &mut impl Rng, n: usize, d: usize, p: f64) -> AttributedGraph {
    let mut edges = Vec::new();
    for u in 0..n {
        for v in (u + 1)..n {
            if rng.random_bool(p) {
                edges.push((u, v));
            }
        }
    }
    let x = gaussian(rng, n, d);
    AttributedGraph::new(n, edges, x, None).unwrap()
}

pub fn sbm(
    n_per_block: usize,
    blocks: usize,
    p_in: f64,
    p_out: f64,
    dim: usize,
    seed: u64,
) -> AttributedGraph {
    let g = generate_sbm(
        &SbmSpec {
            n_per_block,
            blocks,
            p_in,
            p_out,
            feature_dim: dim,
            feature_shift: 1.0,
        },
        seed,
    )
    .unwrap();
    let x = row_l2_normalize(g.features());
    g.with_features(x).unwrap()
}

/// `D^{-1/2} (A + I) D^{-1/2}` built straight from the edge list.
pub fn dense_norm_adj(g: &AttributedGraph) -> Matrix {
    let n = g.num_nodes();
    let mut a = Matrix::identity(n);
    for &(u, v) in g.edges() {
        a[(u, v)] = 1.0;
        a[(v, u)] = 1.0;
    }
    let deg: Vec<f64> = (0..n).map(|i| a.row(i).iter().sum()).collect();
    Matrix::from_fn(n, n, |i, j| a[(i, j)] / (deg[i] * deg[j]).sqrt())
}

pub fn smallest_singular_value(m: &Matrix) -> f64 {
    let dm = DMatrix::from_row_slice(m.rows(), m.cols(), m.as_slice());
    dm.singular_values().min()
}

/// Randomised encoder weights, including non-default PReLU slopes.
pub fn random_params(rng: &mut impl Rng, d: usize, h: usize, m: usize) -> EncoderParams {
    let mut p = EncoderParams::init(d, h, m, rng.random()).unwrap();
    p.prelu1 = Matrix::from_fn(1, 1, |_, _| rng.random_range(0.05..0.5));
    p.prelu2 = Matrix::from_fn(1, 1, |_, _| rng.random_range(0.05..0.5));
    p.bilinear = gaussian(rng, m, m).scale(0.3);
    p
}

fn with_leaf(p: ParamVars, idx: usize, x: Var) -> ParamVars {
    let mut q = p;
    *[
        &mut q.w1,
        &mut q.w2,
        &mut q.prelu1,
        &mut q.prelu2,
        &mut q.head_mu,
        &mut q.head_logvar,
        &mut q.bilinear,
    ][idx] = x;
    q
}

pub const FD_STEP: f64 = 1e-5;
/// Instances with a PReLU pre-activation closer than this to zero are redrawn,
/// so no central difference straddles a kink.
pub const KINK_MARGIN: f64 = 1e-3;

/// Smallest `|pre-activation|` over both PReLU layers, computed densely.
pub fn kink_distance(p: &EncoderParams, a: &Matrix, x: &Matrix) -> f64 {
    let prelu = |m: &Matrix, slope: f64| m.map(|v| if v > 0.0 { v } else { slope * v });
    let pre1 = a.matmul(&x.matmul(&p.w1));
    let h1 = prelu(&pre1, p.prelu1.as_slice()[0]);
    let pre2 = a.matmul(&h1.matmul(&p.w2));
    pre1.as_slice()
        .iter()
        .chain(pre2.as_slice())
        .fold(f64::INFINITY, |m, v| m.min(v.abs()))
}
pub const FD_TOL: f64 = 1e-4;
const FD_COORDS: usize = 16;

/// One randomised instance of the gradient suite: every encoder, discriminator,
/// KL and objective gradient against central differences.
pub fn gradient_instance(seed: u64) -> Result<Vec<(String, FdReport)>> {
    let mut rng = rng(seed);
    let n = rng.random_range(4..=10);
    let d = rng.random_range(2..=6);
    let h = rng.random_range(2..=6);
    let m = rng.random_range(2..=5);
    let g = random_graph(&mut rng, n, d, 0.35);
    let adj: Adjacency = (&normalize_adjacency(&g)).into();
    let x = g.features().clone();
    let flipped = {
        let u = rng.random_range(0..n - 1);
        g.flip_edges(&[(u, u + 1)])?
    };
    let delta = project_l2inf(&gaussian(&mut rng, n, d), 0.1);
    let xa = x.add(&delta);
    let views = [(dense_norm_adj(&g), &x), (dense_norm_adj(&flipped), &xa)];
    let params = loop {
        let p = random_params(&mut rng, d, h, m);
        if views
            .iter()
            .all(|(a, f)| kink_distance(&p, a, f) >= KINK_MARGIN)
        {
            break p;
        }
    };
    let fd = |f: &dyn Fn(&mut Tape, Var) -> Result<Var>, at: &Matrix, s: u64| {
        finite_difference_check_sampled(f, at, FD_STEP, FD_TOL, FD_COORDS, s)
    };
    let mut out = Vec::new();

    // Encoder: a random linear functional of (mu, logvar).
    let r_mu = gaussian(&mut rng, n, m);
    let r_lv = gaussian(&mut rng, n, m);
    let encoder_probe = |tape: &mut Tape, p: &ParamVars, xv: Var| -> Result<Var> {
        let o = gcn_forward(tape, p, &adj, xv)?;
        let a = tape.constant(r_mu.clone());
        let b = tape.constant(r_lv.clone());
        let s1 = tape.mul(o.mu, a)?;
        let s2 = tape.mul(o.logvar, b)?;
        let t = tape.add(s1, s2)?;
        Ok(tape.sum(t))
    };
    let tensors = params.tensors();
    for (k, name) in PARAM_NAMES.iter().enumerate().take(6) {
        let f = |tape: &mut Tape, leaf: Var| {
            let p = with_leaf(params.record(tape, false), k, leaf);
            let xv = tape.constant(x.clone());
            encoder_probe(tape, &p, xv)
        };
        out.push((
            format!("encoder/{name}"),
            fd(&f, tensors[k], seed ^ k as u64)?,
        ));
    }
    let f = |tape: &mut Tape, leaf: Var| {
        let p = params.record(tape, false);
        encoder_probe(tape, &p, leaf)
    };
    out.push(("encoder/features".into(), fd(&f, &x, seed)?));

    // Discriminator: JSD estimate over fixed positive and negative pairs.
    let reps = gaussian(&mut rng, n, m);
    let s_pos = gaussian(&mut rng, n, m);
    let s_neg = gaussian(&mut rng, n, m);
    let jsd = |tape: &mut Tape, w: Var, r: Var| -> Result<Var> {
        let sp = tape.constant(s_pos.clone());
        let sn = tape.constant(s_neg.clone());
        jsd_mi(
            tape,
            w,
            &PairBatch {
                reps: r,
                summaries: sp,
            },
            &PairBatch {
                reps: r,
                summaries: sn,
            },
        )
    };
    let f = |tape: &mut Tape, leaf: Var| {
        let r = tape.constant(reps.clone());
        jsd(tape, leaf, r)
    };
    out.push((
        "discriminator/bilinear".into(),
        fd(&f, &params.bilinear, seed)?,
    ));
    let f = |tape: &mut Tape, leaf: Var| {
        let w = tape.constant(params.bilinear.clone());
        jsd(tape, w, leaf)
    };
    out.push(("discriminator/reps".into(), fd(&f, &reps, seed)?));

    // KL between diagonal Gaussians, each argument in turn.
    let kl_args = [
        gaussian(&mut rng, n, m),
        gaussian(&mut rng, n, m).scale(0.5),
        gaussian(&mut rng, n, m),
        gaussian(&mut rng, n, m).scale(0.5),
    ];
    for (k, name) in ["mu_a", "logvar_a", "mu_b", "logvar_b"].iter().enumerate() {
        let f = |tape: &mut Tape, leaf: Var| {
            let v: Vec<Var> = (0..4)
                .map(|i| {
                    if i == k {
                        leaf
                    } else {
                        tape.constant(kl_args[i].clone())
                    }
                })
                .collect();
            kl_gauss_diag_on_tape(tape, v[0], v[1], v[2], v[3])
        };
        out.push((format!("kl/{name}"), fd(&f, &kl_args[k], seed ^ k as u64)?));
    }

    // Full objective on a perturbed view, both estimators.
    let adv_adj: Adjacency = (&normalize_adjacency(&flipped)).into();
    let ctx = EpochContext::from_seed(n, m, seed);
    for estimator in [Estimator::Smi, Estimator::Readout] {
        let cfg = TrainConfig {
            alpha: rng.random_range(0.0..1.0),
            beta: rng.random_range(0.0..1.0),
            hidden_dim: h,
            embed_dim: m,
            estimator,
            sgc_k: rng.random_range(1..=2),
            ..TrainConfig::default()
        };
        let tag = match estimator {
            Estimator::Smi => "smi",
            Estimator::Readout => "readout",
        };
        let objective = |tape: &mut Tape, p: &ParamVars, xa_var: Var| -> Result<Var> {
            Ok(record_objective(tape, p, &adj, &x, Some((&adv_adj, xa_var)), &ctx, &cfg)?.total)
        };
        for (k, name) in PARAM_NAMES.iter().enumerate() {
            let f = |tape: &mut Tape, leaf: Var| {
                let p = with_leaf(params.record(tape, false), k, leaf);
                let xv = tape.constant(xa.clone());
                objective(tape, &p, xv)
            };
            out.push((
                format!("objective-{tag}/{name}"),
                fd(&f, tensors[k], seed ^ k as u64)?,
            ));
        }
        let f = |tape: &mut Tape, leaf: Var| {
            let p = params.record(tape, false);
            objective(tape, &p, leaf)
        };
        out.push((
            format!("objective-{tag}/adversarial-features"),
            fd(&f, &xa, seed)?,
        ));
    }
    Ok(out)
}

/// `Â^K` applied densely, `K` times.
pub fn dense_power_apply(a: &Matrix, x: &Matrix, k: usize) -> Matrix {
    (0..k).fold(x.clone(), |acc, _| a.matmul(&acc))
}

/// The encoder's `mu` as a matrix-valued map, for surrogate fitting.
pub struct Forward<'a>(pub &'a EncoderParams);

impl AttackLoss for Forward<'_> {
    fn record(&self, tape: &mut Tape, adj: &Adjacency, features: Var) -> Result<Var> {
        let p = self.0.record(tape, false);
        Ok(gcn_forward(tape, &p, adj, features)?.mu)
    }
}

/// Checks a projection of `m` row by row against the closed form.
pub fn projection_is_exact(m: &Matrix, eps: f64) -> bool {
    let p = project_l2inf(m, eps);
    (0..m.rows()).all(|i| {
        let r = m.row(i);
        let norm = r.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm <= eps {
            p.row(i) == r
        } else {
            r.iter()
                .zip(p.row(i))
                .all(|(a, b)| (b - a * eps / norm).abs() <= 1e-15 * a.abs().max(1.0))
        }
    })
}

/// Residual of the equivalence identity on one random instance, computed
/// with an independent dense adjacency. `None` if `Â` is near-singular.
pub fn equivalence_residual(seed: u64) -> Option<(f64, f64)> {
    let mut rng = rng(seed);
    let n = rng.random_range(3..=20);
    let k = rng.random_range(1..=2);
    let g = random_graph(&mut rng, n, 4, 0.3);
    let a = dense_norm_adj(&g);
    if smallest_singular_value(&a) < 1e-3 {
        return None;
    }
    let flips = random_flips(&g, rng.random_range(1..=n.min(6)), seed).unwrap();
    let gp = flips.apply(&g).unwrap();
    let eq = equivalent_feature_perturbation(
        &normalize_adjacency(&g),
        &normalize_adjacency(&gp),
        g.features(),
        k,
    )
    .unwrap();
    let lhs = dense_power_apply(&a, &g.features().add(&eq.delta), k);
    let rhs = dense_power_apply(&dense_norm_adj(&gp), g.features(), k);
    let theta = gaussian(&mut rng, 4, 3);
    let s1 = sgc_forward(
        &theta,
        &normalize_adjacency(&g),
        &g.features().add(&eq.delta),
        k,
    )
    .unwrap();
    let s2 = sgc_forward(&theta, &normalize_adjacency(&gp), g.features(), k).unwrap();
    Some((lhs.sub(&rhs).frobenius_norm(), s1.sub(&s2).frobenius_norm()))
}
