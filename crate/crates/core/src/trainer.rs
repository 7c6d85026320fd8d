//! Bi-level training loop.
//!
//! Each epoch runs a simulation step, where PGD looks for a feature (and in
//! `rgib-s` mode, structure) perturbation that minimises the objective, then
//! one Adam step that maximises the objective at that perturbation.
//!
//! Objective: `α·Î(S;Z′) + (1−α)·Î(S;Z) − β·KL(p(Z′|S′) ‖ p(Z|S))`, with
//! every summary taken from the benign graph.

use std::sync::Arc;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::attack::{
    pgd_feature_attack_on, pgd_structure_attack, AttackLoss, PerturbationSpec, StepRule,
    StructurePerturbation,
};
use crate::diff::{AdamConfig, AdamState, Matrix, Tape, Var};
use crate::encoder::{
    gcn_forward, sample_z_on_tape, standard_normal, Adjacency, EncoderParams, ParamVars,
};
use crate::error::{Error, Result};
use crate::graph::{normalize_adjacency, AttributedGraph, NormalizedAdjacency};
use crate::mi::{
    jsd_mi, kl_gauss_diag_on_tape, pair_with_summary, readout_summary_on_tape, shuffle_permutation,
    smi_summaries_on_tape, Estimator, PairBatch,
};
use crate::rng::{child_seed, Stream};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    /// Feature-only simulation step.
    #[default]
    Rgib,
    /// Structure attack followed by feature PGD in the simulation step.
    RgibS,
    /// No simulation step and no KL term.
    InfomaxOnly,
}

impl std::str::FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "rgib" => Ok(Mode::Rgib),
            "rgib-s" => Ok(Mode::RgibS),
            "infomax-only" => Ok(Mode::InfomaxOnly),
            other => Err(Error::InvalidConfig(format!("unknown mode {other:?}"))),
        }
    }
}

/// Flat training configuration. Unknown keys are rejected when parsed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub alpha: f64,
    pub beta: f64,
    pub epsilon: f64,
    pub pgd_iters: usize,
    pub pgd_step: Option<f64>,
    pub step_rule: StepRule,
    pub epochs: usize,
    pub hidden_dim: usize,
    pub embed_dim: usize,
    pub lr: f64,
    pub seed: u64,
    pub estimator: Estimator,
    pub sgc_k: usize,
    pub mode: Mode,
    /// Structure flips per simulation step in `rgib-s` mode.
    pub edge_budget: usize,
    pub structure_iters: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            alpha: 0.5,
            beta: 0.1,
            epsilon: 1e-3,
            pgd_iters: 5,
            pgd_step: None,
            step_rule: StepRule::RowNormalized,
            epochs: 500,
            hidden_dim: 512,
            embed_dim: 512,
            lr: 1e-3,
            seed: 0,
            estimator: Estimator::Smi,
            sgc_k: 2,
            mode: Mode::Rgib,
            edge_budget: 0,
            structure_iters: 20,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if !(0.0..=1.0).contains(&self.alpha) {
            return bad(format!("alpha {} outside [0, 1]", self.alpha));
        }
        if !(self.beta >= 0.0 && self.beta.is_finite()) {
            return bad(format!("beta {} must be >= 0", self.beta));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("lr {} must be > 0", self.lr));
        }
        if self.hidden_dim == 0 || self.embed_dim == 0 {
            return bad("hidden_dim and embed_dim must be >= 1".into());
        }
        if self.sgc_k == 0 {
            return bad("sgc_k must be >= 1".into());
        }
        self.attack_spec().validate()
    }

    /// Effective configuration: `infomax-only` forces `beta = 0`.
    pub fn effective(&self) -> TrainConfig {
        let mut c = self.clone();
        if c.mode == Mode::InfomaxOnly {
            c.beta = 0.0;
        }
        c
    }

    pub fn attack_spec(&self) -> PerturbationSpec {
        PerturbationSpec {
            epsilon: self.epsilon,
            pgd_iters: self.pgd_iters,
            pgd_step: self.pgd_step,
            step_rule: self.step_rule,
            edge_budget: self.edge_budget,
            structure_iters: self.structure_iters,
            ..PerturbationSpec::default()
        }
    }
}

/// Randomness consumed by one objective evaluation.
#[derive(Debug, Clone)]
pub struct EpochContext {
    /// Reparameterisation noise, shared by benign and adversarial passes.
    pub noise: Matrix,
    /// Negative-sampling row permutation.
    pub permutation: Arc<Vec<usize>>,
}

impl EpochContext {
    pub fn from_seed(n: usize, embed_dim: usize, seed: u64) -> Self {
        Self {
            noise: standard_normal(n, embed_dim, child_seed(seed, Stream::Noise, 0)),
            permutation: Arc::new(shuffle_permutation(
                n,
                child_seed(seed, Stream::Negatives, 0),
            )),
        }
    }
}

/// Tape handles for the objective and its terms.
#[derive(Debug, Clone, Copy)]
pub struct ObjectiveVars {
    pub mi_adv: Var,
    pub mi_benign: Var,
    pub kl: Option<Var>,
    pub total: Var,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ObjectiveValues {
    pub mi_adv: f64,
    pub mi_benign: f64,
    /// Absent when the adversarial path is never built (`infomax-only`).
    pub kl: Option<f64>,
    pub total: f64,
}

impl ObjectiveVars {
    pub fn values(&self, tape: &Tape) -> ObjectiveValues {
        ObjectiveValues {
            mi_adv: tape.item(self.mi_adv),
            mi_benign: tape.item(self.mi_benign),
            kl: self.kl.map(|k| tape.item(k)),
            total: tape.item(self.total),
        }
    }
}

/// Records the objective. `adversarial` is `None` for the infomax-only
/// learner, in which case no Z′ pass and no KL term are recorded.
pub fn record_objective(
    tape: &mut Tape,
    p: &ParamVars,
    benign_adj: &Adjacency,
    features: &Matrix,
    adversarial: Option<(&Adjacency, Var)>,
    ctx: &EpochContext,
    cfg: &TrainConfig,
) -> Result<ObjectiveVars> {
    let x = tape.constant(features.clone());
    let benign = gcn_forward(tape, p, benign_adj, x)?;
    let z = sample_z_on_tape(tape, &benign, &ctx.noise)?;
    let x_neg = tape.select_rows(x, Arc::clone(&ctx.permutation))?;

    let adv = match adversarial {
        Some((adj, xa)) => {
            let out = gcn_forward(tape, p, adj, xa)?;
            let za = sample_z_on_tape(tape, &out, &ctx.noise)?;
            Some((out, za))
        }
        None => None,
    };

    // Positive / negative pairings for a representation matrix.
    let (pairs_for, mi_benign) = match cfg.estimator {
        Estimator::Smi => {
            let theta = p.theta_eff(tape)?;
            let s_pos = smi_summaries_on_tape(tape, theta, benign_adj, x, cfg.sgc_k)?;
            let s_neg = smi_summaries_on_tape(tape, theta, benign_adj, x_neg, cfg.sgc_k)?;
            let pairs = move |reps: Var| -> (PairBatch, PairBatch) {
                (
                    PairBatch {
                        reps,
                        summaries: s_pos,
                    },
                    PairBatch {
                        reps,
                        summaries: s_neg,
                    },
                )
            };
            let (pos, neg) = pairs(z);
            let mi = jsd_mi(tape, p.bilinear, &pos, &neg)?;
            (Summaries::Smi(Box::new(pairs)), mi)
        }
        Estimator::Readout => {
            let summary = readout_summary_on_tape(tape, z)?;
            let neg_out = gcn_forward(tape, p, benign_adj, x_neg)?;
            let z_neg = sample_z_on_tape(tape, &neg_out, &ctx.noise)?;
            let neg = pair_with_summary(tape, z_neg, summary)?;
            let pos = pair_with_summary(tape, z, summary)?;
            let mi = jsd_mi(tape, p.bilinear, &pos, &neg)?;
            (Summaries::Readout { summary, neg }, mi)
        }
    };

    let Some((adv_out, za)) = adv else {
        return Ok(ObjectiveVars {
            mi_adv: mi_benign,
            mi_benign,
            kl: None,
            total: mi_benign,
        });
    };

    let mi_adv = match pairs_for {
        Summaries::Smi(pairs) => {
            let (pos, neg) = pairs(za);
            jsd_mi(tape, p.bilinear, &pos, &neg)?
        }
        Summaries::Readout { summary, neg } => {
            let pos = pair_with_summary(tape, za, summary)?;
            jsd_mi(tape, p.bilinear, &pos, &neg)?
        }
    };
    let kl = kl_gauss_diag_on_tape(tape, adv_out.mu, adv_out.logvar, benign.mu, benign.logvar)?;

    let a = tape.scale(mi_adv, cfg.alpha);
    let b = tape.scale(mi_benign, 1.0 - cfg.alpha);
    let mut total = tape.add(a, b)?;
    if cfg.beta != 0.0 {
        let k = tape.scale(kl, cfg.beta);
        total = tape.sub(total, k)?;
    }
    Ok(ObjectiveVars {
        mi_adv,
        mi_benign,
        kl: Some(kl),
        total,
    })
}

enum Summaries {
    Smi(Box<dyn Fn(Var) -> (PairBatch, PairBatch)>),
    Readout { summary: Var, neg: PairBatch },
}

/// Value of the objective at `features + ΔX` on the benign structure, with
/// noise and negatives drawn from `seed`.
pub fn rgib_objective(
    benign: &AttributedGraph,
    perturbed_features: &Matrix,
    params: &EncoderParams,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<ObjectiveValues> {
    let cfg = cfg.effective();
    cfg.validate()?;
    crate::encoder::check_input(params, benign.num_nodes(), perturbed_features)?;
    let adj: Adjacency = (&normalize_adjacency(benign)).into();
    let ctx = EpochContext::from_seed(benign.num_nodes(), params.embed_dim(), seed);
    let mut tape = Tape::new();
    let p = params.record(&mut tape, false);
    let adversarial = if cfg.mode == Mode::InfomaxOnly {
        None
    } else {
        Some(tape.constant(perturbed_features.clone()))
    };
    let o = record_objective(
        &mut tape,
        &p,
        &adj,
        benign.features(),
        adversarial.map(|x| (&adj, x)),
        &ctx,
        &cfg,
    )?;
    Ok(o.values(&tape))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub mi_adv: f64,
    pub mi_benign: f64,
    pub kl: Option<f64>,
    pub objective: f64,
    /// Objective decrease achieved by the simulation step.
    pub attack_loss_drop: f64,
    /// Wall-clock seconds since training started, at the end of this epoch.
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TrainHistory {
    pub records: Vec<EpochRecord>,
}

impl TrainHistory {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Mean wall-clock seconds per epoch.
    pub fn seconds_per_epoch(&self) -> f64 {
        match self.records.last() {
            Some(r) => r.seconds / self.records.len() as f64,
            None => 0.0,
        }
    }
}

/// Perturbation found by one simulation step.
#[derive(Debug, Clone)]
pub struct Simulation {
    pub flips: StructurePerturbation,
    /// Normalised adjacency of the (possibly flipped) graph.
    pub adjacency: NormalizedAdjacency,
    pub delta: Matrix,
    pub loss_drop: f64,
}

pub struct Trainer<'g> {
    graph: &'g AttributedGraph,
    cfg: TrainConfig,
    adj: NormalizedAdjacency,
}

impl<'g> Trainer<'g> {
    pub fn new(graph: &'g AttributedGraph, cfg: &TrainConfig) -> Result<Self> {
        let cfg = cfg.effective();
        cfg.validate()?;
        if graph.num_nodes() == 0 {
            return Err(Error::InvalidGraph("cannot train on an empty graph".into()));
        }
        Ok(Self {
            adj: normalize_adjacency(graph),
            graph,
            cfg,
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn init_params(&self) -> Result<EncoderParams> {
        EncoderParams::init(
            self.graph.feature_dim(),
            self.cfg.hidden_dim,
            self.cfg.embed_dim,
            child_seed(self.cfg.seed, Stream::Init, 0),
        )
    }

    pub fn epoch_context(&self, epoch: usize) -> EpochContext {
        EpochContext::from_seed(
            self.graph.num_nodes(),
            self.cfg.embed_dim,
            child_seed(self.cfg.seed, Stream::Noise, epoch as u64),
        )
    }

    /// Attack objective at `params`: the training objective as a function of
    /// the adversarial view.
    pub fn attack_loss<'a>(
        &'a self,
        params: &'a EncoderParams,
        ctx: &'a EpochContext,
    ) -> impl Fn(&mut Tape, &Adjacency, Var) -> Result<Var> + 'a {
        move |tape: &mut Tape, adj: &Adjacency, xa: Var| {
            let p = params.record(tape, false);
            let benign: Adjacency = (&self.adj).into();
            let o = record_objective(
                tape,
                &p,
                &benign,
                self.graph.features(),
                Some((adj, xa)),
                ctx,
                &self.cfg,
            )?;
            Ok(o.total)
        }
    }

    /// Simulation step: the perturbation the attacker picks against `params`.
    pub fn simulate(
        &self,
        params: &EncoderParams,
        ctx: &EpochContext,
        epoch: usize,
    ) -> Result<Simulation> {
        let n = self.graph.num_nodes();
        let d = self.graph.feature_dim();
        if self.cfg.mode == Mode::InfomaxOnly {
            return Ok(Simulation {
                flips: StructurePerturbation::default(),
                adjacency: self.adj.clone(),
                delta: Matrix::zeros(n, d),
                loss_drop: 0.0,
            });
        }
        let loss = self.attack_loss(params, ctx);
        let spec = self.cfg.attack_spec();
        let (flips, adjacency, structure_drop) =
            if self.cfg.mode == Mode::RgibS && spec.edge_budget > 0 {
                let seed = child_seed(self.cfg.seed, Stream::StructureAttack, epoch as u64);
                let r = pgd_structure_attack(self.graph, &loss as &dyn AttackLoss, &spec, seed)?;
                let flipped = r.perturbation.apply(self.graph)?;
                let drop = r.loss_before - r.loss;
                (r.perturbation, normalize_adjacency(&flipped), drop)
            } else {
                (StructurePerturbation::default(), self.adj.clone(), 0.0)
            };
        let fa = pgd_feature_attack_on(
            &(&adjacency).into(),
            self.graph.features(),
            &loss as &dyn AttackLoss,
            &spec,
            None,
        )?;
        Ok(Simulation {
            flips,
            adjacency,
            loss_drop: structure_drop + fa.loss_drop(),
            delta: fa.perturbation.delta,
        })
    }

    fn record_at(
        &self,
        tape: &mut Tape,
        p: &ParamVars,
        sim: &Simulation,
        ctx: &EpochContext,
    ) -> Result<ObjectiveVars> {
        let benign: Adjacency = (&self.adj).into();
        if self.cfg.mode == Mode::InfomaxOnly {
            return record_objective(
                tape,
                p,
                &benign,
                self.graph.features(),
                None,
                ctx,
                &self.cfg,
            );
        }
        let xa = tape.constant(self.graph.features().add(&sim.delta));
        let adv: Adjacency = (&sim.adjacency).into();
        record_objective(
            tape,
            p,
            &benign,
            self.graph.features(),
            Some((&adv, xa)),
            ctx,
            &self.cfg,
        )
    }

    /// Objective value at `params` for the simulation of `epoch`, i.e. the
    /// value that epoch logs when it starts from `params`.
    pub fn epoch_objective(&self, params: &EncoderParams, epoch: usize) -> Result<ObjectiveValues> {
        let ctx = self.epoch_context(epoch);
        let sim = self.simulate(params, &ctx, epoch)?;
        let mut tape = Tape::new();
        let p = params.record(&mut tape, false);
        Ok(self.record_at(&mut tape, &p, &sim, &ctx)?.values(&tape))
    }

    /// Runs `cfg.epochs` epochs from freshly initialised parameters.
    pub fn run(&self) -> Result<(EncoderParams, TrainHistory)> {
        let params = self.init_params()?;
        self.run_from(params, 0, self.cfg.epochs)
    }

    /// Runs epochs `start..end` from `params` with a fresh Adam state.
    pub fn run_from(
        &self,
        mut params: EncoderParams,
        start: usize,
        end: usize,
    ) -> Result<(EncoderParams, TrainHistory)> {
        let mut adam = AdamState::new(
            AdamConfig {
                lr: self.cfg.lr,
                ..AdamConfig::default()
            },
            &params.shapes(),
        );
        let mut history = TrainHistory::default();
        let clock = Instant::now();
        for epoch in start..end {
            let ctx = self.epoch_context(epoch);
            let sim = self.simulate(&params, &ctx, epoch)?;

            let mut tape = Tape::new();
            let p = params.record(&mut tape, true);
            let obj = self.record_at(&mut tape, &p, &sim, &ctx)?;
            let values = obj.values(&tape);
            if !values.total.is_finite() {
                return Err(Error::NonFinite(format!(
                    "objective at epoch {epoch}: {values:?}"
                )));
            }
            let grads: Vec<Matrix> = tape
                .gradient(obj.total, &p.all())?
                .into_iter()
                .map(|g| g.scale(-1.0))
                .collect();
            if let Some(bad) = grads.iter().position(|g| !g.is_finite()) {
                return Err(Error::NonFinite(format!(
                    "gradient of {} at epoch {epoch}",
                    crate::encoder::PARAM_NAMES[bad]
                )));
            }
            adam.step(&mut params.tensors_mut(), &grads)?;

            history.records.push(EpochRecord {
                epoch,
                mi_adv: values.mi_adv,
                mi_benign: values.mi_benign,
                kl: values.kl,
                objective: values.total,
                attack_loss_drop: sim.loss_drop,
                seconds: clock.elapsed().as_secs_f64(),
            });
        }
        Ok((params, history))
    }
}

/// Trains from scratch. Deterministic for a fixed config.
pub fn train(graph: &AttributedGraph, cfg: &TrainConfig) -> Result<(EncoderParams, TrainHistory)> {
    Trainer::new(graph, cfg)?.run()
}
