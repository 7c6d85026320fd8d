//! Mutual-information estimation.
//!
//! Î(S;Z) and Î(S;Z′) use the Jensen-Shannon lower bound
//! `E_pos[log D] + E_neg[log(1 − D)]` with a bilinear discriminator
//! `D(z, s) = σ(zᵀ B s)`. The summary `s` of a node is either its K-hop SGC
//! aggregation (`smi`) or a sigmoid mean-pool readout of the benign
//! representations (`readout`). The conditional term I(S′;Z′|S) is replaced
//! by its upper bound, the KL divergence between the adversarial and benign
//! Gaussian encoders.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::diff::{sigmoid, Matrix, Tape, Var};
use crate::encoder::{sgc_forward, Adjacency, EncoderParams};
use crate::error::{Error, Result};
use crate::graph::{AttributedGraph, NormalizedAdjacency};
use crate::rng::{stream, Stream};

/// Discriminator scores are clamped into `[D_CLAMP, 1 − D_CLAMP]` before logs.
pub const D_CLAMP: f64 = 1e-7;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Estimator {
    #[default]
    Smi,
    Readout,
}

impl std::str::FromStr for Estimator {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "smi" => Ok(Estimator::Smi),
            "readout" => Ok(Estimator::Readout),
            other => Err(Error::InvalidConfig(format!("unknown estimator {other:?}"))),
        }
    }
}

/// Row `i` of `reps` is paired with row `i` of `summaries`.
#[derive(Debug, Clone, Copy)]
pub struct PairBatch {
    pub reps: Var,
    pub summaries: Var,
}

/// Summary of `node`: its row of `Â^K X (W1 W2)`.
pub fn smi_summary(
    params: &EncoderParams,
    adj: &NormalizedAdjacency,
    features: &Matrix,
    node: usize,
    k: usize,
) -> Result<Vec<f64>> {
    if node >= adj.n() {
        return Err(Error::NodeOutOfRange { node, n: adj.n() });
    }
    let theta = params.w1.matmul(&params.w2);
    let all = sgc_forward(&theta, adj, features, k)?;
    Ok(all.row(node).to_vec())
}

/// All SMI summaries on the tape, `n x m`.
pub fn smi_summaries_on_tape(
    tape: &mut Tape,
    theta_eff: Var,
    adj: &Adjacency,
    features: Var,
    k: usize,
) -> Result<Var> {
    crate::encoder::sgc_on_tape(tape, theta_eff, adj, features, k)
}

/// `σ(mean of the rows of z)`.
pub fn readout_summary(z: &Matrix) -> Result<Vec<f64>> {
    if z.rows() == 0 {
        return Err(Error::InvalidArgument(
            "readout of an empty representation set".into(),
        ));
    }
    let n = z.rows() as f64;
    Ok((0..z.cols())
        .map(|j| sigmoid((0..z.rows()).map(|i| z[(i, j)]).sum::<f64>() / n))
        .collect())
}

/// Tape version of [`readout_summary`], `1 x m`.
pub fn readout_summary_on_tape(tape: &mut Tape, z: Var) -> Result<Var> {
    let m = tape.col_mean(z)?;
    Ok(tape.sigmoid(m))
}

/// `σ(zᵀ B s)`.
pub fn discriminate(bilinear: &Matrix, z: &[f64], summary: &[f64]) -> Result<f64> {
    let m = bilinear.rows();
    if bilinear.cols() != m || z.len() != m || summary.len() != m {
        return Err(Error::shape(
            "discriminate",
            format!("{m}-vectors and {m}x{m} weight"),
            format!("{} / {} / {:?}", z.len(), summary.len(), bilinear.shape()),
        ));
    }
    let mut logit = 0.0;
    for (i, zi) in z.iter().enumerate() {
        let bs: f64 = bilinear
            .row(i)
            .iter()
            .zip(summary)
            .map(|(b, s)| b * s)
            .sum();
        logit += zi * bs;
    }
    Ok(sigmoid(logit))
}

/// Seeded row permutation for negative sampling. For `n > 1` the identity
/// is never returned.
pub fn shuffle_permutation(n: usize, seed: u64) -> Vec<usize> {
    let mut perm: Vec<usize> = (0..n).collect();
    let mut rng = stream(seed, Stream::Negatives, 0);
    perm.shuffle(&mut rng);
    if n > 1 && perm.iter().enumerate().all(|(i, &p)| i == p) {
        perm.rotate_left(1);
    }
    perm
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum NegativeMode {
    #[default]
    RowShuffle,
}

/// Corrupted view of a graph used for negative pairs.
#[derive(Debug, Clone)]
pub struct CorruptedView {
    pub graph: AttributedGraph,
    /// Row `i` of the corrupted features is row `permutation[i]` of the original.
    pub permutation: Vec<usize>,
}

/// Same structure, feature rows permuted.
pub fn sample_negatives(
    g: &AttributedGraph,
    mode: NegativeMode,
    seed: u64,
) -> Result<CorruptedView> {
    match mode {
        NegativeMode::RowShuffle => {
            let permutation = shuffle_permutation(g.num_nodes(), seed);
            let graph = g.with_features(g.features().select_rows(&permutation))?;
            Ok(CorruptedView { graph, permutation })
        }
    }
}

fn clamped_scores(tape: &mut Tape, bilinear: Var, pairs: &PairBatch) -> Result<Var> {
    let d = tape.bilinear_sigmoid(pairs.reps, bilinear, pairs.summaries)?;
    Ok(tape.clamp(d, D_CLAMP, 1.0 - D_CLAMP))
}

/// Jensen-Shannon MI estimate: mean over positives of `log D` plus mean over
/// negatives of `log(1 − D)`.
pub fn jsd_mi(
    tape: &mut Tape,
    bilinear: Var,
    positive: &PairBatch,
    negative: &PairBatch,
) -> Result<Var> {
    for (name, b) in [("positive", positive), ("negative", negative)] {
        if tape.shape(b.reps).0 == 0 {
            return Err(Error::InvalidArgument(format!("jsd_mi: no {name} pairs")));
        }
    }
    let dp = clamped_scores(tape, bilinear, positive)?;
    let log_dp = tape.ln(dp);
    let pos = tape.mean(log_dp)?;

    let dn = clamped_scores(tape, bilinear, negative)?;
    let neg_dn = tape.scale(dn, -1.0);
    let one_minus = tape.add_scalar(neg_dn, 1.0);
    let log_dn = tape.ln(one_minus);
    let neg = tape.mean(log_dn)?;
    tape.add(pos, neg)
}

/// Broadcasts a `1 x m` summary so it pairs with every row of `reps`.
pub fn pair_with_summary(tape: &mut Tape, reps: Var, summary: Var) -> Result<PairBatch> {
    let n = tape.shape(reps).0;
    let summaries = tape.broadcast_rows(summary, n)?;
    Ok(PairBatch { reps, summaries })
}

/// `KL(N(mu_a, e^{lv_a}) ‖ N(mu_b, e^{lv_b}))` summed over dimensions and
/// averaged over rows. Written as `½ Σ [expm1(u) − u + (Δμ)² e^{−lv_b}]`
/// with `u = lv_a − lv_b`, which is exactly zero for equal inputs.
pub fn kl_gauss_diag_on_tape(
    tape: &mut Tape,
    mu_a: Var,
    lv_a: Var,
    mu_b: Var,
    lv_b: Var,
) -> Result<Var> {
    for (x, y) in [(mu_a, lv_a), (mu_a, mu_b), (mu_a, lv_b)] {
        if tape.shape(x) != tape.shape(y) {
            return Err(Error::shape(
                "kl_gauss_diag",
                format!("{:?}", tape.shape(x)),
                format!("{:?}", tape.shape(y)),
            ));
        }
    }
    let n = tape.shape(mu_a).0;
    if n == 0 {
        return Err(Error::InvalidArgument("kl_gauss_diag of zero rows".into()));
    }
    let u = tape.sub(lv_a, lv_b)?;
    let em = tape.expm1(u);
    let var_term = tape.sub(em, u)?;
    let dmu = tape.sub(mu_a, mu_b)?;
    let dmu2 = tape.square(dmu);
    let neg_lvb = tape.scale(lv_b, -1.0);
    let inv_vb = tape.exp(neg_lvb);
    let mean_term = tape.mul(dmu2, inv_vb)?;
    let total = tape.add(var_term, mean_term)?;
    let s = tape.sum(total);
    Ok(tape.scale(s, 0.5 / n as f64))
}

pub fn kl_gauss_diag(mu_a: &Matrix, lv_a: &Matrix, mu_b: &Matrix, lv_b: &Matrix) -> Result<f64> {
    let mut tape = Tape::new();
    let v = [mu_a, lv_a, mu_b, lv_b].map(|m| tape.constant(m.clone()));
    let kl = kl_gauss_diag_on_tape(&mut tape, v[0], v[1], v[2], v[3])?;
    Ok(tape.item(kl))
}

/// Plain-value JSD estimate for fixed score vectors, used in tests and reports.
pub fn jsd_from_scores(pos: &[f64], neg: &[f64]) -> Result<f64> {
    if pos.is_empty() || neg.is_empty() {
        return Err(Error::InvalidArgument("jsd_from_scores: no pairs".into()));
    }
    let c = |d: f64| d.clamp(D_CLAMP, 1.0 - D_CLAMP);
    let p = pos.iter().map(|&d| c(d).ln()).sum::<f64>() / pos.len() as f64;
    let q = neg.iter().map(|&d| (1.0 - c(d)).ln()).sum::<f64>() / neg.len() as f64;
    Ok(p + q)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{k_hop_subgraph, normalize_adjacency};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn readout_cases() {
        let r = vec![0.3, -1.0];
        let z = Matrix::from_rows(&[r.clone(), r.clone(), r.clone()]).unwrap();
        let s = readout_summary(&z).unwrap();
        assert!((s[0] - sigmoid(0.3)).abs() < 1e-15 && (s[1] - sigmoid(-1.0)).abs() < 1e-15);
        assert_eq!(readout_summary(&Matrix::zeros(4, 3)).unwrap(), vec![0.5; 3]);
        let sym = Matrix::from_rows(&[vec![2.0, -3.0], vec![-2.0, 3.0]]).unwrap();
        assert_eq!(readout_summary(&sym).unwrap(), vec![0.5; 2]);
        assert!(readout_summary(&Matrix::zeros(0, 3)).is_err());
    }

    #[test]
    fn discriminator_spot_values() {
        let e1 = [1.0, 0.0, 0.0];
        assert_eq!(discriminate(&Matrix::zeros(3, 3), &e1, &e1).unwrap(), 0.5);
        let d = discriminate(&Matrix::identity(3), &e1, &e1).unwrap();
        assert!((d - 0.731_058_578_630_004_9).abs() < 1e-12);
        assert!(discriminate(&Matrix::identity(3), &e1[..2], &e1).is_err());
    }

    #[test]
    fn permutation_is_never_identity_and_reproducible() {
        for seed in 0..200 {
            let p = shuffle_permutation(2, seed);
            assert_eq!(p, vec![1, 0]);
        }
        let a = shuffle_permutation(50, 5);
        assert_eq!(a, shuffle_permutation(50, 5));
        let mut sorted = a.clone();
        sorted.sort_unstable();
        assert_eq!(sorted, (0..50).collect::<Vec<_>>());
        assert_eq!(shuffle_permutation(1, 0), vec![0]);
    }

    #[test]
    fn negatives_preserve_row_multiset_and_structure() {
        let g = AttributedGraph::new(
            4,
            vec![(0, 1), (2, 3)],
            Matrix::from_fn(4, 2, |i, j| (10 * i + j) as f64),
            None,
        )
        .unwrap();
        let v = sample_negatives(&g, NegativeMode::RowShuffle, 9).unwrap();
        assert_eq!(v.graph.edges(), g.edges());
        let mut a: Vec<Vec<u64>> = (0..4)
            .map(|i| g.features().row(i).iter().map(|x| x.to_bits()).collect())
            .collect();
        let mut b: Vec<Vec<u64>> = (0..4)
            .map(|i| {
                v.graph
                    .features()
                    .row(i)
                    .iter()
                    .map(|x| x.to_bits())
                    .collect()
            })
            .collect();
        a.sort();
        b.sort();
        assert_eq!(a, b);
    }

    #[test]
    fn uninformative_discriminator_gives_two_log_half() {
        let mut t = Tape::new();
        let b = t.var(Matrix::zeros(3, 3));
        let z = t.constant(Matrix::from_fn(5, 3, |i, j| (i * j) as f64));
        let s = t.constant(Matrix::from_fn(5, 3, |i, j| (i + j) as f64));
        let pairs = PairBatch {
            reps: z,
            summaries: s,
        };
        let mi = jsd_mi(&mut t, b, &pairs, &pairs).unwrap();
        assert!((t.item(mi) - 2.0 * 0.5f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn saturated_scores_approach_zero_from_below() {
        let v = jsd_from_scores(&[1.0; 4], &[0.0; 4]).unwrap();
        assert!(v < 0.0 && v > -1e-6);
        assert!(jsd_from_scores(&[], &[0.5]).is_err());
    }

    #[test]
    fn jsd_rejects_empty_batches() {
        let mut t = Tape::new();
        let b = t.var(Matrix::zeros(2, 2));
        let e = t.constant(Matrix::zeros(0, 2));
        let f = t.constant(Matrix::zeros(3, 2));
        let empty = PairBatch {
            reps: e,
            summaries: e,
        };
        let full = PairBatch {
            reps: f,
            summaries: f,
        };
        assert!(jsd_mi(&mut t, b, &empty, &full).is_err());
    }

    #[test]
    fn kl_spot_values() {
        let z = Matrix::zeros(1, 1);
        assert_eq!(kl_gauss_diag(&z, &z, &z, &z).unwrap(), 0.0);
        let one = Matrix::scalar(1.0);
        assert!((kl_gauss_diag(&one, &z, &z, &z).unwrap() - 0.5).abs() < 1e-15);
        // Var ratio e: ½(e − 1 − 1) per dimension.
        let kl = kl_gauss_diag(&z, &one, &z, &z).unwrap();
        assert!((kl - 0.5 * (1f64.exp() - 2.0)).abs() < 1e-15);
        assert!(kl_gauss_diag(&z, &z, &Matrix::zeros(2, 1), &z).is_err());
    }

    #[test]
    fn kl_is_nonnegative_and_zero_iff_equal() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..1000 {
            let (r, c) = (rng.random_range(1..5), rng.random_range(1..5));
            let mut m = || Matrix::from_fn(r, c, |_, _| rng.random_range(-3.0..3.0));
            let (ma, la, mb, lb) = (m(), m(), m(), m());
            let kl = kl_gauss_diag(&ma, &la, &mb, &lb).unwrap();
            assert!(kl >= 0.0, "{kl}");
            assert!(kl > 1e-12);
            assert_eq!(kl_gauss_diag(&ma, &la, &ma, &la).unwrap(), 0.0);
        }
    }

    #[test]
    fn isolated_node_summary_is_projected_features() {
        let x = Matrix::from_rows(&[vec![1.0, 2.0], vec![-1.0, 0.5], vec![0.0, 3.0]]).unwrap();
        let g = AttributedGraph::new(3, vec![(0, 1)], x.clone(), None).unwrap();
        let p = EncoderParams::init(2, 4, 3, 1).unwrap();
        let s = smi_summary(&p, &normalize_adjacency(&g), &x, 2, 2).unwrap();
        let want = x.select_rows(&[2]).matmul(&p.w1.matmul(&p.w2));
        for (a, b) in s.iter().zip(want.row(0)) {
            assert!((a - b).abs() < 1e-14);
        }
        assert!(smi_summary(&p, &normalize_adjacency(&g), &x, 3, 2).is_err());
    }

    #[test]
    fn summary_matches_explicit_receptive_field() {
        // Boundary-node degrees enter the normalisation, so the subgraph is
        // cut one hop beyond the propagation depth.
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for trial in 0..20 {
            let n = rng.random_range(5..=20);
            let mut edges = Vec::new();
            for u in 0..n {
                for v in (u + 1)..n {
                    if rng.random_bool(0.2) {
                        edges.push((u, v));
                    }
                }
            }
            let x = Matrix::from_fn(n, 3, |_, _| rng.random_range(-1.0..1.0));
            let g = AttributedGraph::new(n, edges, x.clone(), None).unwrap();
            let p = EncoderParams::init(3, 4, 2, trial).unwrap();
            let k = 1 + trial as usize % 2;
            let node = rng.random_range(0..n);
            let full = smi_summary(&p, &normalize_adjacency(&g), &x, node, k).unwrap();
            let sub = k_hop_subgraph(&g, node, k + 1).unwrap();
            let local = smi_summary(
                &p,
                &normalize_adjacency(&sub.graph),
                sub.graph.features(),
                sub.center_local,
                k,
            )
            .unwrap();
            for (a, b) in full.iter().zip(&local) {
                assert!((a - b).abs() < 1e-12, "trial {trial}: {a} vs {b}");
            }
        }
    }
}
