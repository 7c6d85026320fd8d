//! Exact information-theoretic checks on small discrete distributions, and an
//! empirical adversarial-risk estimate for trained encoders.
//!
//! All information quantities are in nats.

use rand::Rng;
use rand_distr::Exp1;
use serde::Serialize;

use crate::attack::{pgd_feature_attack_on, project_l2inf, AttackLoss, PerturbationSpec};
use crate::diff::{Matrix, Tape};
use crate::encoder::{Adjacency, EncoderParams};
use crate::error::{Error, Result};
use crate::eval::{ClassifierAttack, LogReg};
use crate::graph::{normalize_adjacency, AttributedGraph};
use crate::rng::{stream, Stream};

/// Tolerance on the total mass of a joint table.
pub const MASS_TOL: f64 = 1e-12;

/// Dense joint distribution over named finite variables. The last variable
/// varies fastest in `probs`.
#[derive(Debug, Clone, PartialEq)]
pub struct DiscreteJoint {
    names: Vec<String>,
    sizes: Vec<usize>,
    probs: Vec<f64>,
}

impl DiscreteJoint {
    pub fn new(names: &[&str], sizes: &[usize], probs: Vec<f64>) -> Result<Self> {
        if names.len() != sizes.len() || names.is_empty() {
            return Err(Error::InvalidDistribution(
                "need one alphabet size per variable".into(),
            ));
        }
        if sizes.contains(&0) {
            return Err(Error::InvalidDistribution("empty alphabet".into()));
        }
        let cells: usize = sizes.iter().product();
        if probs.len() != cells {
            return Err(Error::InvalidDistribution(format!(
                "table has {} entries, alphabets need {cells}",
                probs.len()
            )));
        }
        if let Some(p) = probs.iter().find(|p| !(p.is_finite() && **p >= 0.0)) {
            return Err(Error::InvalidDistribution(format!(
                "invalid probability {p}"
            )));
        }
        let mass: f64 = probs.iter().sum();
        if (mass - 1.0).abs() > MASS_TOL {
            return Err(Error::InvalidDistribution(format!(
                "total mass {mass} != 1"
            )));
        }
        Ok(Self {
            names: names.iter().map(|s| s.to_string()).collect(),
            sizes: sizes.to_vec(),
            probs,
        })
    }

    /// `p(x₀)·p(x₁|x₀)·…·p(x_k|x_{k−1})`. `transitions[i][a][b]` is
    /// `p(x_{i+1} = b | x_i = a)`.
    pub fn markov_chain(
        names: &[&str],
        initial: &[f64],
        transitions: &[Vec<Vec<f64>>],
    ) -> Result<Self> {
        if names.len() != transitions.len() + 1 {
            return Err(Error::InvalidDistribution(
                "need one transition per link".into(),
            ));
        }
        let mut sizes = vec![initial.len()];
        for (i, t) in transitions.iter().enumerate() {
            if t.len() != sizes[i] {
                return Err(Error::InvalidDistribution(format!(
                    "transition {i} has {} rows",
                    t.len()
                )));
            }
            let width = t.first().map_or(0, Vec::len);
            if t.iter().any(|row| row.len() != width) {
                return Err(Error::InvalidDistribution(format!(
                    "transition {i} is ragged"
                )));
            }
            sizes.push(width);
        }
        let mut probs = initial.to_vec();
        for t in transitions {
            let width = t[0].len();
            let mut next = Vec::with_capacity(probs.len() * width);
            for (flat, &p) in probs.iter().enumerate() {
                let last = flat % t.len();
                next.extend(t[last].iter().map(|q| p * q));
            }
            probs = next;
        }
        Self::new(names, &sizes, probs)
    }

    /// Markov chain with Dirichlet(1) initial and transition rows.
    pub fn random_markov_chain(
        names: &[&str],
        sizes: &[usize],
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if names.len() != sizes.len() || sizes.is_empty() {
            return Err(Error::InvalidDistribution(
                "need one alphabet size per variable".into(),
            ));
        }
        let initial = dirichlet_ones(sizes[0], rng);
        let transitions: Vec<Vec<Vec<f64>>> = sizes
            .windows(2)
            .map(|w| (0..w[0]).map(|_| dirichlet_ones(w[1], rng)).collect())
            .collect();
        Self::markov_chain(names, &initial, &transitions)
    }

    /// Like [`random_markov_chain`](Self::random_markov_chain) but with a
    /// uniform first variable.
    pub fn random_uniform_chain(
        names: &[&str],
        sizes: &[usize],
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if names.len() != sizes.len() || sizes.is_empty() {
            return Err(Error::InvalidDistribution(
                "need one alphabet size per variable".into(),
            ));
        }
        let initial = vec![1.0 / sizes[0] as f64; sizes[0]];
        let transitions: Vec<Vec<Vec<f64>>> = sizes
            .windows(2)
            .map(|w| (0..w[0]).map(|_| dirichlet_ones(w[1], rng)).collect())
            .collect();
        Self::markov_chain(names, &initial, &transitions)
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn sizes(&self) -> &[usize] {
        &self.sizes
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    fn index_of(&self, name: &str) -> Result<usize> {
        self.names
            .iter()
            .position(|n| n == name)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown variable {name:?}")))
    }

    fn indices(&self, names: &[&str]) -> Result<Vec<usize>> {
        names.iter().map(|n| self.index_of(n)).collect()
    }

    /// Marginal table over `vars` (indices), in the order given.
    fn marginal_idx(&self, vars: &[usize]) -> Vec<f64> {
        let cells: usize = vars.iter().map(|&v| self.sizes[v]).product();
        let mut out = vec![0.0; cells];
        let mut digits = vec![0usize; self.sizes.len()];
        for &p in &self.probs {
            let mut k = 0;
            for &v in vars {
                k = k * self.sizes[v] + digits[v];
            }
            out[k] += p;
            for d in (0..digits.len()).rev() {
                digits[d] += 1;
                if digits[d] < self.sizes[d] {
                    break;
                }
                digits[d] = 0;
            }
        }
        out
    }

    pub fn marginal(&self, vars: &[&str]) -> Result<Vec<f64>> {
        Ok(self.marginal_idx(&self.indices(vars)?))
    }

    /// Joint restricted to `vars`, in the order given.
    pub fn marginalize(&self, vars: &[&str]) -> Result<DiscreteJoint> {
        let idx = self.indices(vars)?;
        let sizes: Vec<usize> = idx.iter().map(|&v| self.sizes[v]).collect();
        let probs = self.marginal_idx(&idx);
        let mass: f64 = probs.iter().sum();
        DiscreteJoint::new(vars, &sizes, probs.into_iter().map(|p| p / mass).collect())
    }

    pub fn entropy(&self, vars: &[&str]) -> Result<f64> {
        Ok(-self.marginal(vars)?.iter().map(|&p| xlogx(p)).sum::<f64>())
    }
}

fn xlogx(p: f64) -> f64 {
    if p > 0.0 {
        p * p.ln()
    } else {
        0.0
    }
}

fn dirichlet_ones(k: usize, rng: &mut impl Rng) -> Vec<f64> {
    let draws: Vec<f64> = (0..k).map(|_| rng.sample::<f64, _>(Exp1)).collect();
    let total: f64 = draws.iter().sum();
    draws.into_iter().map(|x| x / total).collect()
}

/// Dirichlet(1) joint over `sizes` with no conditional structure.
pub fn random_joint(names: &[&str], sizes: &[usize], seed: u64) -> Result<DiscreteJoint> {
    let mut rng = stream(seed, Stream::Theory, 0);
    DiscreteJoint::new(
        names,
        sizes,
        dirichlet_ones(sizes.iter().product(), &mut rng),
    )
}

/// `I(A;B | C)` summed directly over the joint of `A ∪ B ∪ C`.
pub fn brute_force_cmi(
    joint: &DiscreteJoint,
    a: &[&str],
    b: &[&str],
    cond: &[&str],
) -> Result<f64> {
    let (ia, ib, ic) = (joint.indices(a)?, joint.indices(b)?, joint.indices(cond)?);
    let all: Vec<usize> = ia.iter().chain(&ib).chain(&ic).copied().collect();
    let mut sorted = all.clone();
    sorted.sort_unstable();
    sorted.dedup();
    if sorted.len() != all.len() {
        return Err(Error::InvalidArgument(
            "variable sets must be disjoint".into(),
        ));
    }
    let size = |vs: &[usize]| vs.iter().map(|&v| joint.sizes[v]).product::<usize>();
    let (na, nb, nc) = (size(&ia), size(&ib), size(&ic));
    let abc = joint.marginal_idx(&all);
    let ac = joint.marginal_idx(&[ia.clone(), ic.clone()].concat());
    let bc = joint.marginal_idx(&[ib.clone(), ic.clone()].concat());
    let c = joint.marginal_idx(&ic);
    let mut total = 0.0;
    for x in 0..na {
        for y in 0..nb {
            for z in 0..nc {
                let p = abc[(x * nb + y) * nc + z];
                if p > 0.0 {
                    total += p * (p * c[z] / (ac[x * nc + z] * bc[y * nc + z])).ln();
                }
            }
        }
    }
    Ok(total)
}

pub fn brute_force_mi(joint: &DiscreteJoint, a: &[&str], b: &[&str]) -> Result<f64> {
    brute_force_cmi(joint, a, b, &[])
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Decomposition {
    pub i_sp_zp: f64,
    pub i_sp_zp_given_s: f64,
    pub i_s_zp: f64,
    pub residual: f64,
}

/// Tolerance for treating a conditional MI as zero.
pub const MARKOV_TOL: f64 = 1e-10;

/// `|I(S′;Z′) − I(S′;Z′|S) − I(S;Z′)|` for a joint over `(S, S′, Z′)` (in that
/// order) that is Markov `S − S′ − Z′`.
pub fn check_decomposition(joint: &DiscreteJoint) -> Result<Decomposition> {
    let [s, sp, zp] = three_names(joint)?;
    let leak = brute_force_cmi(joint, &[s], &[zp], &[sp])?;
    if leak > MARKOV_TOL {
        return Err(Error::InvalidDistribution(format!(
            "joint is not Markov {s} - {sp} - {zp}: conditional MI {leak:e}"
        )));
    }
    let i_sp_zp = brute_force_mi(joint, &[sp], &[zp])?;
    let i_sp_zp_given_s = brute_force_cmi(joint, &[sp], &[zp], &[s])?;
    let i_s_zp = brute_force_mi(joint, &[s], &[zp])?;
    Ok(Decomposition {
        i_sp_zp,
        i_sp_zp_given_s,
        i_s_zp,
        residual: (i_sp_zp - i_sp_zp_given_s - i_s_zp).abs(),
    })
}

fn three_names(joint: &DiscreteJoint) -> Result<[&str; 3]> {
    match joint.names() {
        [a, b, c] => Ok([a.as_str(), b.as_str(), c.as_str()]),
        other => Err(Error::InvalidArgument(format!(
            "expected 3 variables, got {}",
            other.len()
        ))),
    }
}

/// Fano lower bound on `Pr(Ŷ ≠ Y)`: `max(0, 1 − (mi + log 2) / log k)`.
/// Vacuous (zero) for `k < 2`.
pub fn fano_bound(mi_nats: f64, alphabet_size: usize) -> f64 {
    if alphabet_size < 2 {
        return 0.0;
    }
    (1.0 - (mi_nats + std::f64::consts::LN_2) / (alphabet_size as f64).ln()).max(0.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct FanoCheck {
    pub error: f64,
    pub mutual_information: f64,
    pub bound: f64,
    pub margin: f64,
}

fn require_uniform(joint: &DiscreteJoint, var: &str) -> Result<()> {
    let p = joint.marginal(&[var])?;
    let u = 1.0 / p.len() as f64;
    if p.iter().any(|&q| (q - u).abs() > 1e-9) {
        return Err(Error::InvalidDistribution(format!(
            "{var} is not uniform: {p:?}"
        )));
    }
    Ok(())
}

fn error_rate(joint: &DiscreteJoint) -> f64 {
    let (ky, kh) = (joint.sizes()[0], joint.sizes()[1]);
    let table = joint.marginal_idx(&[0, 1]);
    let hit: f64 = (0..ky.min(kh)).map(|y| table[y * kh + y]).sum();
    1.0 - hit
}

/// Fano margin `Pr(Ŷ≠Y) − bound` for a joint over `(Y, Ŷ)` with uniform `Y`.
pub fn check_fano(joint: &DiscreteJoint) -> Result<FanoCheck> {
    if joint.names().len() != 2 {
        return Err(Error::InvalidArgument(
            "expected a joint over (Y, Ŷ)".into(),
        ));
    }
    let (y, yh) = (joint.names()[0].clone(), joint.names()[1].clone());
    require_uniform(joint, &y)?;
    let mi = brute_force_mi(joint, &[&y], &[&yh])?;
    let error = error_rate(joint);
    let bound = fano_bound(mi, joint.sizes()[0]);
    Ok(FanoCheck {
        error,
        mutual_information: mi,
        bound,
        margin: error - bound,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct DataProcessing {
    pub i_xy: f64,
    pub i_yz: f64,
    pub i_xz: f64,
    /// `I(X;Y) − I(X;Z)`.
    pub margin_xy: f64,
    /// `I(Y;Z) − I(X;Z)`.
    pub margin_yz: f64,
}

/// Data-processing margins for a joint over a Markov chain `(X, Y, Z)`.
pub fn check_data_processing(joint: &DiscreteJoint) -> Result<DataProcessing> {
    let [x, y, z] = three_names(joint)?;
    let i_xy = brute_force_mi(joint, &[x], &[y])?;
    let i_yz = brute_force_mi(joint, &[y], &[z])?;
    let i_xz = brute_force_mi(joint, &[x], &[z])?;
    Ok(DataProcessing {
        i_xy,
        i_yz,
        i_xz,
        margin_xy: i_xy - i_xz,
        margin_yz: i_yz - i_xz,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct AdversarialChain {
    pub error: f64,
    pub i_s_zp: f64,
    pub i_sp_zp: f64,
    /// Bound through `I(S;Z′)`.
    pub bound: f64,
    /// Looser bound through `I(S′;Z′)`.
    pub bound_loose: f64,
    /// `error − bound`.
    pub margin: f64,
    /// `bound − bound_loose`.
    pub tightening: f64,
}

/// Error lower bounds along `Y − S − S′ − Z′ − Ŷ`, for a joint over those five
/// variables in that order with uniform `Y`.
pub fn check_adversarial_chain(joint: &DiscreteJoint) -> Result<AdversarialChain> {
    let names: Vec<&str> = joint.names().iter().map(String::as_str).collect();
    let [y, s, sp, zp, yh] = names[..] else {
        return Err(Error::InvalidArgument(format!(
            "expected 5 variables, got {}",
            names.len()
        )));
    };
    require_uniform(joint, y)?;
    let k = joint.sizes()[0];
    let i_s_zp = brute_force_mi(joint, &[s], &[zp])?;
    let i_sp_zp = brute_force_mi(joint, &[sp], &[zp])?;
    let error = error_rate(&joint.marginalize(&[y, yh])?);
    let bound = fano_bound(i_s_zp, k);
    let bound_loose = fano_bound(i_sp_zp, k);
    Ok(AdversarialChain {
        error,
        i_s_zp,
        i_sp_zp,
        bound,
        bound_loose,
        margin: error - bound,
        tightening: bound - bound_loose,
    })
}

/// Worst case of one randomised check.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CheckOutcome {
    pub name: &'static str,
    /// Largest residual or smallest margin seen.
    pub worst: f64,
    pub threshold: f64,
    pub passed: bool,
}

/// Worst-case outcomes of the decomposition, Fano, data-processing and
/// adversarial-chain checks over `draws` random joints each (alphabets 2–5).
pub fn verify_all(draws: usize, seed: u64) -> Result<Vec<CheckOutcome>> {
    let mut rng = stream(seed, Stream::Theory, 1);
    let mut dec = 0.0f64;
    let (mut fano, mut dpi, mut chain) = (f64::INFINITY, f64::INFINITY, f64::INFINITY);
    for _ in 0..draws {
        let mut sz = || rng.random_range(2..=5usize);
        let (a, b, c, d, k) = (sz(), sz(), sz(), sz(), sz());

        let j = DiscreteJoint::random_markov_chain(&["s", "sp", "zp"], &[a, b, c], &mut rng)?;
        dec = dec.max(check_decomposition(&j)?.residual);

        let j = DiscreteJoint::random_markov_chain(&["x", "y", "z"], &[a, b, c], &mut rng)?;
        let r = check_data_processing(&j)?;
        dpi = dpi.min(r.margin_xy.min(r.margin_yz));

        let j = DiscreteJoint::random_uniform_chain(&["y", "yh"], &[k, k], &mut rng)?;
        fano = fano.min(check_fano(&j)?.margin);

        let j = DiscreteJoint::random_uniform_chain(
            &["y", "s", "sp", "zp", "yh"],
            &[k, b, c, d, k],
            &mut rng,
        )?;
        let r = check_adversarial_chain(&j)?;
        chain = chain.min(r.margin.min(r.tightening));
    }
    let lower = |name, worst: f64, threshold: f64| CheckOutcome {
        name,
        worst,
        threshold,
        passed: worst >= threshold,
    };
    Ok(vec![
        CheckOutcome {
            name: "decomposition residual",
            worst: dec,
            threshold: MARKOV_TOL,
            passed: dec < MARKOV_TOL,
        },
        lower("fano margin", fano, -1e-9),
        lower("data-processing margin", dpi, -1e-10),
        lower("adversarial chain margin", chain, -1e-9),
    ])
}

/// Lower estimate of the adversarial risk of `classifier ∘ encoder`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AdvRisk {
    pub epsilon: f64,
    /// Fraction of evaluated nodes misclassified at some perturbation found.
    pub risk: f64,
    pub clean_error: f64,
    /// Per evaluated node: a misclassifying perturbation was found.
    #[serde(skip)]
    pub fooled: Vec<bool>,
    /// Last perturbation of the sweep, used to warm-start larger radii.
    #[serde(skip)]
    pub delta: Matrix,
}

/// Attacks `classifier ∘ encoder` on `nodes` with feature PGD at each radius
/// in `epsilons` (ascending). Each radius warm-starts from the previous one
/// and inherits its witnesses, so the estimate is non-decreasing in ε.
/// `n_seeds` adds random restarts inside each ball.
#[allow(clippy::too_many_arguments)]
pub fn adv_risk_sweep(
    classifier: &LogReg,
    params: &EncoderParams,
    graph: &AttributedGraph,
    labels: &[usize],
    nodes: &[usize],
    epsilons: &[f64],
    spec: &PerturbationSpec,
    n_seeds: usize,
    seed: u64,
) -> Result<Vec<AdvRisk>> {
    if nodes.is_empty() {
        return Err(Error::InvalidArgument("no nodes to attack".into()));
    }
    if epsilons.windows(2).any(|w| w[1] < w[0]) {
        return Err(Error::InvalidArgument("epsilons must be ascending".into()));
    }
    let n = graph.num_nodes();
    if labels.len() != n || nodes.iter().any(|&v| v >= n) {
        return Err(Error::InvalidArgument(
            "labels or nodes do not match the graph".into(),
        ));
    }
    let picked: Vec<usize> = nodes.iter().map(|&v| labels[v]).collect();
    let probe = ClassifierAttack::new(classifier, params, nodes, &picked)?;
    let adj: Adjacency = (&normalize_adjacency(graph)).into();
    let features = graph.features();

    // Clean predictions.
    let mut tape = Tape::new();
    let x = tape.constant(features.clone());
    probe.record(&mut tape, &adj, x)?;
    let clean_fooled = probe.fooled();
    let clean_error = clean_fooled.iter().filter(|&&f| f).count() as f64 / nodes.len() as f64;

    let mut warm = Matrix::zeros(n, graph.feature_dim());
    let mut out = Vec::with_capacity(epsilons.len());
    for (k, &eps) in epsilons.iter().enumerate() {
        let spec = PerturbationSpec {
            epsilon: eps,
            ..*spec
        };
        let mut best: Option<(f64, Matrix)> = None;
        for r in 0..n_seeds.max(1) {
            let init = if r == 0 {
                project_l2inf(&warm, eps)
            } else {
                let mut rng = stream(seed, Stream::Eval, ((k as u64) << 16) | r as u64);
                let noise = Matrix::from_fn(n, graph.feature_dim(), |_, _| {
                    rng.random::<f64>() * 2.0 - 1.0
                });
                project_l2inf(&noise, eps)
            };
            let res = pgd_feature_attack_on(&adj, features, &probe, &spec, Some(&init))?;
            if best.as_ref().is_none_or(|(l, _)| res.loss < *l) {
                best = Some((res.loss, res.perturbation.delta));
            }
        }
        warm = best.map(|(_, d)| d).expect("at least one restart");
        let fooled = probe.fooled();
        out.push(AdvRisk {
            epsilon: eps,
            risk: fooled.iter().filter(|&&f| f).count() as f64 / nodes.len() as f64,
            clean_error,
            fooled,
            delta: warm.clone(),
        });
    }
    Ok(out)
}

/// Single-radius adversarial risk estimate.
#[allow(clippy::too_many_arguments)]
pub fn empirical_adv_risk(
    classifier: &LogReg,
    params: &EncoderParams,
    graph: &AttributedGraph,
    labels: &[usize],
    nodes: &[usize],
    spec: &PerturbationSpec,
    n_seeds: usize,
    seed: u64,
) -> Result<AdvRisk> {
    let mut v = adv_risk_sweep(
        classifier,
        params,
        graph,
        labels,
        nodes,
        &[spec.epsilon],
        spec,
        n_seeds,
        seed,
    )?;
    Ok(v.pop().expect("one radius"))
}
