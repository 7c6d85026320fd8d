//! Experiment orchestration: train, attack and evaluate over a seed list,
//! then persist per-seed artifacts and an aggregated summary.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::attack::{
    pgd_feature_attack_on, pgd_structure_attack, AttackLoss, FeaturePerturbation, PerturbationSpec,
    StructurePerturbation,
};
use crate::diff::Matrix;
use crate::encoder::{embed, EmbeddingSource, EncoderParams};
use crate::error::{Error, Result};
use crate::eval::{
    kmeans_nmi, link_prediction, random_split, ClassifierAttack, Condition, EvalReport, LogReg,
    LogRegConfig, NodeSplit, Protocol, REPORT_HEADER,
};
use crate::graph::{generate_sbm, normalize_adjacency, row_l2_normalize, AttributedGraph, SbmSpec};
use crate::io::{self, Checkpoint};
use crate::rng::{child_seed, Stream};
use crate::trainer::{Mode, TrainConfig, TrainHistory, Trainer};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", deny_unknown_fields)]
pub enum Dataset {
    /// Graph file in the documented line format.
    File(PathBuf),
    Sbm {
        #[serde(flatten)]
        spec: SbmSpec,
        #[serde(default)]
        seed: u64,
    },
}

impl Dataset {
    /// Loads the graph, row-ℓ2-normalising features when asked.
    pub fn load(&self, normalize: bool) -> Result<AttributedGraph> {
        let g = match self {
            Dataset::File(p) => io::load_graph_file(p)?,
            Dataset::Sbm { spec, seed } => generate_sbm(spec, *seed)?,
        };
        if normalize {
            g.with_features(row_l2_normalize(g.features()))
        } else {
            Ok(g)
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Node,
    Link,
    Cluster,
}

impl Task {
    fn metric(self) -> &'static str {
        match self {
            Task::Node => "accuracy",
            Task::Link => "auc",
            Task::Cluster => "nmi",
        }
    }
}

impl std::str::FromStr for Task {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "node" => Ok(Task::Node),
            "link" => Ok(Task::Link),
            "cluster" => Ok(Task::Cluster),
            other => Err(Error::InvalidArgument(format!("unknown task {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", deny_unknown_fields)]
pub enum SplitSpec {
    Random {
        train: f64,
        val: f64,
    },
    /// First `20·C` nodes train, the next 500 validate, the last 1000 test.
    Planetoid,
}

impl Default for SplitSpec {
    fn default() -> Self {
        SplitSpec::Random {
            train: 0.1,
            val: 0.1,
        }
    }
}

impl SplitSpec {
    pub fn split(&self, g: &AttributedGraph, seed: u64) -> Result<NodeSplit> {
        match *self {
            SplitSpec::Random { train, val } => random_split(g.num_nodes(), train, val, seed),
            SplitSpec::Planetoid => {
                let n = g.num_nodes();
                let n_train = 20 * g.num_classes();
                if n < n_train + 500 + 1000 {
                    return Err(Error::InvalidGraph(format!(
                        "planetoid split needs >= {} nodes",
                        n_train + 1500
                    )));
                }
                Ok(NodeSplit {
                    train: (0..n_train).collect(),
                    val: (n_train..n_train + 500).collect(),
                    test: (n - 1000..n).collect(),
                })
            }
        }
    }
}

fn default_true() -> bool {
    true
}

fn default_tasks() -> Vec<Task> {
    vec![Task::Node]
}

fn default_restarts() -> usize {
    10
}

fn default_link_frac() -> f64 {
    0.1
}

fn default_bench_epochs() -> usize {
    3
}

/// Everything needed to reproduce one experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentManifest {
    pub dataset: Dataset,
    #[serde(default = "default_true")]
    pub normalize_features: bool,
    #[serde(default)]
    pub train: TrainConfig,
    /// Evaluation-time attack.
    #[serde(default)]
    pub attack: PerturbationSpec,
    /// When set, overrides `attack.edge_budget` with `round(fraction · |E|)`.
    #[serde(default)]
    pub edge_budget_fraction: Option<f64>,
    #[serde(default = "default_tasks")]
    pub tasks: Vec<Task>,
    pub seeds: Vec<u64>,
    pub output_dir: PathBuf,
    #[serde(default)]
    pub split: SplitSpec,
    #[serde(default)]
    pub protocol: Protocol,
    #[serde(default)]
    pub logreg: LogRegConfig,
    #[serde(default = "default_restarts")]
    pub kmeans_restarts: usize,
    #[serde(default = "default_link_frac")]
    pub link_test_frac: f64,
    #[serde(default = "default_bench_epochs")]
    pub bench_epochs: usize,
}

impl ExperimentManifest {
    pub fn load(path: &Path) -> Result<Self> {
        let m: ExperimentManifest = io::read_json(path).map_err(|e| match e {
            Error::Parse { msg, .. } => Error::InvalidConfig(format!("{}: {msg}", path.display())),
            other => other,
        })?;
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(Error::InvalidConfig("seed list is empty".into()));
        }
        if self.tasks.is_empty() {
            return Err(Error::InvalidConfig("task list is empty".into()));
        }
        if let Some(f) = self.edge_budget_fraction {
            if !(0.0..=1.0).contains(&f) {
                return Err(Error::InvalidConfig(format!(
                    "edge_budget_fraction {f} outside [0, 1]"
                )));
            }
        }
        self.train.validate()?;
        self.attack.validate()
    }

    /// Evaluation attack with the edge budget resolved against `g`.
    pub fn resolved_attack(&self, g: &AttributedGraph) -> PerturbationSpec {
        let mut spec = self.attack;
        if let Some(f) = self.edge_budget_fraction {
            spec.edge_budget = (f * g.num_edges() as f64).round() as usize;
        }
        spec
    }
}

fn attack_is_active(spec: &PerturbationSpec) -> bool {
    spec.epsilon > 0.0 || spec.edge_budget > 0
}

/// Structure flips first, then feature PGD on the flipped graph.
pub fn attack_graph(
    graph: &AttributedGraph,
    loss: &dyn AttackLoss,
    spec: &PerturbationSpec,
    seed: u64,
) -> Result<(StructurePerturbation, FeaturePerturbation, AttributedGraph)> {
    let (flips, flipped) = if spec.edge_budget > 0 {
        let r = pgd_structure_attack(
            graph,
            loss,
            spec,
            child_seed(seed, Stream::StructureAttack, 0),
        )?;
        let g = r.perturbation.apply(graph)?;
        (r.perturbation, g)
    } else {
        (StructurePerturbation::default(), graph.clone())
    };
    let fa = pgd_feature_attack_on(
        &(&normalize_adjacency(&flipped)).into(),
        flipped.features(),
        loss,
        spec,
        None,
    )?;
    let attacked = flipped.with_features(fa.perturbation.apply(flipped.features()))?;
    Ok((flips, fa.perturbation, attacked))
}

/// Per-seed outcome.
#[derive(Debug, Clone)]
pub struct SeedRun {
    pub seed: u64,
    pub params: EncoderParams,
    pub history: TrainHistory,
    pub structure: StructurePerturbation,
    pub features: FeaturePerturbation,
    /// `(task, condition) → value`.
    pub metrics: BTreeMap<(Task, ConditionKey), f64>,
}

/// Orderable stand-in for [`Condition`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum ConditionKey {
    Benign,
    Adversarial,
}

impl From<ConditionKey> for Condition {
    fn from(c: ConditionKey) -> Self {
        match c {
            ConditionKey::Benign => Condition::Benign,
            ConditionKey::Adversarial => Condition::Adversarial,
        }
    }
}

fn mu_on(params: &EncoderParams, g: &AttributedGraph) -> Result<Matrix> {
    Ok(embed(
        params,
        &normalize_adjacency(g),
        g.features(),
        EmbeddingSource::Benign,
    )?
    .mu)
}

/// Trains with `cfg.seed = seed`, attacks, and evaluates every task.
pub fn run_seed(
    manifest: &ExperimentManifest,
    graph: &AttributedGraph,
    seed: u64,
) -> Result<SeedRun> {
    let cfg = TrainConfig {
        seed,
        ..manifest.train.clone()
    };
    let trainer = Trainer::new(graph, &cfg)?;
    let (params, history) = trainer.run()?;
    let spec = manifest.resolved_attack(graph);

    let needs_labels = manifest
        .tasks
        .iter()
        .any(|t| matches!(t, Task::Node | Task::Cluster));
    let labels = graph.labels();
    if needs_labels && labels.is_none() {
        return Err(Error::InvalidGraph(
            "node and cluster tasks need labels".into(),
        ));
    }

    let benign_mu = mu_on(&params, graph)?;
    let split = labels
        .map(|_| manifest.split.split(graph, seed))
        .transpose()?;
    let classifier = match (labels, &split) {
        (Some(y), Some(s)) => {
            let ys: Vec<usize> = s.train.iter().map(|&i| y[i]).collect();
            Some(LogReg::fit(
                &benign_mu.select_rows(&s.train),
                &ys,
                graph.num_classes(),
                &manifest.logreg,
            )?)
        }
        _ => None,
    };

    let attack_seed = child_seed(seed, Stream::Eval, 1);
    let (structure, features, adv_mu) = if attack_is_active(&spec) {
        let (flips, delta, attacked) = match (&classifier, labels, &split) {
            (Some(clf), Some(y), Some(s)) => {
                let ys: Vec<usize> = s.test.iter().map(|&i| y[i]).collect();
                let target = ClassifierAttack::new(clf, &params, &s.test, &ys)?;
                attack_graph(graph, &target, &spec, attack_seed)?
            }
            _ => {
                let ctx = trainer.epoch_context(cfg.epochs);
                let target = trainer.attack_loss(&params, &ctx);
                attack_graph(graph, &target, &spec, attack_seed)?
            }
        };
        let mu = mu_on(&params, &attacked)?;
        (flips, delta, Some(mu))
    } else {
        (
            StructurePerturbation::default(),
            FeaturePerturbation::zeros(graph.num_nodes(), graph.feature_dim()),
            None,
        )
    };

    let mut metrics = BTreeMap::new();
    let mut conditions = vec![(ConditionKey::Benign, &benign_mu)];
    if let Some(m) = &adv_mu {
        conditions.push((ConditionKey::Adversarial, m));
    }
    for &task in &manifest.tasks {
        for &(cond, mu) in &conditions {
            let value = match task {
                Task::Node => {
                    let (y, s) = (labels.expect("checked"), split.as_ref().expect("labelled"));
                    let ys: Vec<usize> = s.test.iter().map(|&i| y[i]).collect();
                    let clf = match (cond, manifest.protocol) {
                        (ConditionKey::Adversarial, Protocol::Retrain) => {
                            let yt: Vec<usize> = s.train.iter().map(|&i| y[i]).collect();
                            LogReg::fit(
                                &mu.select_rows(&s.train),
                                &yt,
                                graph.num_classes(),
                                &manifest.logreg,
                            )?
                        }
                        _ => classifier.clone().expect("labelled"),
                    };
                    crate::eval::accuracy(&clf.predict(&mu.select_rows(&s.test))?, &ys)
                }
                Task::Link => {
                    link_prediction(mu, graph, manifest.link_test_frac, seed, &manifest.logreg)?
                }
                Task::Cluster => kmeans_nmi(
                    mu,
                    labels.expect("checked"),
                    graph.num_classes().max(2),
                    manifest.kmeans_restarts,
                    seed,
                )?,
            };
            metrics.insert((task, cond), value);
        }
    }

    Ok(SeedRun {
        seed,
        params,
        history,
        structure,
        features,
        metrics,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub task: Task,
    pub metric: String,
    pub condition: Condition,
    pub mean: f64,
    pub std: f64,
    pub n_seeds: usize,
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub seeds: Vec<u64>,
    pub train: TrainConfig,
    pub attack: PerturbationSpec,
    pub rows: Vec<SummaryRow>,
}

impl RunSummary {
    pub fn get(&self, task: Task, condition: Condition) -> Option<&SummaryRow> {
        self.rows
            .iter()
            .find(|r| r.task == task && r.condition == condition)
    }
}

/// Combined perturbation as written to `perturbation.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PerturbationFile {
    pub structure: StructurePerturbation,
    pub features: FeaturePerturbation,
}

impl PerturbationFile {
    /// Flips edges, then adds the feature perturbation.
    pub fn apply(&self, g: &AttributedGraph) -> Result<AttributedGraph> {
        let flipped = self.structure.apply(g)?;
        if self.features.delta.shape() != flipped.features().shape() {
            return Err(Error::shape(
                "perturbation",
                format!("{:?}", flipped.features().shape()),
                format!("{:?}", self.features.delta.shape()),
            ));
        }
        flipped.with_features(self.features.apply(flipped.features()))
    }
}

fn report_rows(runs: &[&SeedRun], attack_json: &str) -> Result<Vec<EvalReport>> {
    let keys: Vec<(Task, ConditionKey)> = runs[0].metrics.keys().copied().collect();
    keys.into_iter()
        .map(|(task, cond)| {
            let values: Vec<f64> = runs.iter().map(|r| r.metrics[&(task, cond)]).collect();
            let json = if cond == ConditionKey::Adversarial {
                attack_json
            } else {
                "{}"
            };
            EvalReport::aggregate(
                match task {
                    Task::Node => "node",
                    Task::Link => "link",
                    Task::Cluster => "cluster",
                },
                task.metric(),
                &values,
                cond.into(),
                json.to_string(),
            )
        })
        .collect()
}

fn metrics_csv(rows: &[EvalReport]) -> Result<Vec<u8>> {
    let mut w = csv::WriterBuilder::new()
        .has_headers(false)
        .from_writer(Vec::new());
    w.write_record(REPORT_HEADER)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.into_inner()
        .map_err(|e| Error::InvalidArgument(e.to_string()))
}

/// Runs every seed, then writes `metrics.csv`, `summary.json` and per-seed
/// `seed-<s>/{checkpoint.json, history.csv, metrics.csv, perturbation.json}`.
/// Nothing is written unless every seed succeeds.
pub fn run(manifest: &ExperimentManifest) -> Result<RunSummary> {
    manifest.validate()?;
    let graph = manifest.dataset.load(manifest.normalize_features)?;
    let spec = manifest.resolved_attack(&graph);
    let attack_json = serde_json::to_string(&spec)?;

    let runs = manifest
        .seeds
        .iter()
        .map(|&s| run_seed(manifest, &graph, s))
        .collect::<Result<Vec<_>>>()?;

    let all: Vec<&SeedRun> = runs.iter().collect();
    let reports = report_rows(&all, &attack_json)?;
    let rows = reports
        .iter()
        .map(|r| {
            let task: Task = r.task.parse()?;
            let cond = if r.condition == Condition::Benign {
                ConditionKey::Benign
            } else {
                ConditionKey::Adversarial
            };
            Ok(SummaryRow {
                task,
                metric: r.metric.clone(),
                condition: r.condition,
                mean: r.value,
                std: r.std,
                n_seeds: r.n_seeds,
                values: runs.iter().map(|s| s.metrics[&(task, cond)]).collect(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let summary = RunSummary {
        seeds: manifest.seeds.clone(),
        train: manifest.train.clone(),
        attack: spec,
        rows,
    };

    let out = &manifest.output_dir;
    for r in &runs {
        let dir = out.join(format!("seed-{}", r.seed));
        let cfg = TrainConfig {
            seed: r.seed,
            ..manifest.train.clone()
        };
        io::save_checkpoint(
            &dir.join("checkpoint.json"),
            &Checkpoint {
                config: cfg,
                epochs_completed: r.history.len(),
                params: r.params.clone(),
            },
        )?;
        io::write_history(&dir.join("history.csv"), &r.history)?;
        io::write_atomic(
            &dir.join("metrics.csv"),
            &metrics_csv(&report_rows(&[r], &attack_json)?)?,
        )?;
        io::write_json(
            &dir.join("perturbation.json"),
            &PerturbationFile {
                structure: r.structure.clone(),
                features: r.features.clone(),
            },
        )?;
    }
    io::write_atomic(&out.join("metrics.csv"), &metrics_csv(&reports)?)?;
    io::write_json(&out.join("summary.json"), &summary)?;
    Ok(summary)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub nodes: usize,
    pub edges: usize,
    pub epochs: usize,
    pub edge_budget: usize,
    pub rgib_seconds_per_epoch: f64,
    pub rgib_s_seconds_per_epoch: f64,
    /// `rgib_s / rgib`.
    pub ratio: f64,
}

/// Wall-clock seconds per epoch for `rgib` and `rgib-s` on the manifest's
/// graph, using the first seed and `bench_epochs` epochs.
pub fn bench(manifest: &ExperimentManifest) -> Result<BenchReport> {
    manifest.validate()?;
    let graph = manifest.dataset.load(manifest.normalize_features)?;
    let seed = manifest.seeds[0];
    let mut edge_budget = manifest.train.edge_budget;
    if let Some(f) = manifest.edge_budget_fraction {
        edge_budget = (f * graph.num_edges() as f64).round() as usize;
    }
    let base = TrainConfig {
        seed,
        epochs: manifest.bench_epochs.max(1),
        edge_budget,
        ..manifest.train.clone()
    };
    let time = |mode: Mode| -> Result<f64> {
        let cfg = TrainConfig {
            mode,
            ..base.clone()
        };
        let (_, h) = Trainer::new(&graph, &cfg)?.run()?;
        Ok(h.seconds_per_epoch())
    };
    let rgib = time(Mode::Rgib)?;
    let rgib_s = time(Mode::RgibS)?;
    Ok(BenchReport {
        nodes: graph.num_nodes(),
        edges: graph.num_edges(),
        epochs: base.epochs,
        edge_budget,
        rgib_seconds_per_epoch: rgib,
        rgib_s_seconds_per_epoch: rgib_s,
        ratio: rgib_s / rgib,
    })
}
