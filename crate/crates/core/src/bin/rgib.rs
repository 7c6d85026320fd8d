use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use rgib_core::attack::PerturbationSpec;
use rgib_core::encoder::{embed, EmbeddingSource};
use rgib_core::eval::{self, Condition, EvalReport, LogRegConfig, Protocol};
use rgib_core::experiment::{
    self, attack_graph, Dataset, ExperimentManifest, PerturbationFile, SplitSpec, Task,
};
use rgib_core::graph::{generate_sbm, normalize_adjacency, AttributedGraph, SbmSpec};
use rgib_core::io::{self, Checkpoint};
use rgib_core::mi::Estimator;
use rgib_core::theory::verify_all;
use rgib_core::trainer::{Mode, TrainConfig, Trainer};
use rgib_core::{Error, Result};

#[derive(Parser)]
#[command(
    name = "rgib",
    version,
    about = "Robust graph information bottleneck embeddings"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train an encoder and write a checkpoint plus history.
    Train(TrainArgs),
    /// Attack a trained encoder and write the perturbation.
    Attack(AttackArgs),
    /// Evaluate a checkpoint on downstream tasks.
    Eval(EvalArgs),
    /// Run the information-theoretic checks.
    Verify(VerifyArgs),
    /// Time rgib against rgib-s per epoch.
    Bench(BenchArgs),
    /// Generate a stochastic block model graph file.
    GenSbm(GenSbmArgs),
    /// Run a full experiment manifest.
    Run(RunArgs),
}

#[derive(Args)]
struct GraphArgs {
    /// Graph file.
    #[arg(long)]
    graph: PathBuf,
    /// Keep raw features instead of row-ℓ2-normalising them.
    #[arg(long)]
    no_normalize: bool,
}

impl GraphArgs {
    fn load(&self) -> Result<AttributedGraph> {
        Dataset::File(self.graph.clone()).load(!self.no_normalize)
    }
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    graph: GraphArgs,
    /// Flat JSON config; flags below override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: u64,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    beta: Option<f64>,
    #[arg(long)]
    epsilon: Option<f64>,
    #[arg(long)]
    pgd_iters: Option<usize>,
    #[arg(long)]
    pgd_step: Option<f64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    hidden_dim: Option<usize>,
    #[arg(long)]
    embed_dim: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    estimator: Option<Estimator>,
    #[arg(long)]
    sgc_k: Option<usize>,
    #[arg(long)]
    mode: Option<Mode>,
    #[arg(long)]
    edge_budget: Option<usize>,
    #[arg(long)]
    structure_iters: Option<usize>,
}

impl TrainArgs {
    fn config(&self) -> Result<TrainConfig> {
        let mut c = match &self.config {
            Some(p) => io::load_config(p)?,
            None => TrainConfig::default(),
        };
        macro_rules! over {
            ($($f:ident),*) => { $( if let Some(v) = self.$f { c.$f = v; } )* };
        }
        over!(
            alpha,
            beta,
            epsilon,
            pgd_iters,
            epochs,
            hidden_dim,
            embed_dim,
            lr,
            estimator,
            sgc_k,
            mode,
            edge_budget,
            structure_iters
        );
        if self.pgd_step.is_some() {
            c.pgd_step = self.pgd_step;
        }
        c.seed = self.seed;
        c.validate()?;
        Ok(c)
    }
}

#[derive(Args)]
struct SpecArgs {
    #[arg(long, default_value_t = 1e-3)]
    epsilon: f64,
    #[arg(long, default_value_t = 5)]
    pgd_iters: usize,
    #[arg(long)]
    pgd_step: Option<f64>,
    /// Structure flips; 0 disables the structure attack.
    #[arg(long, default_value_t = 0)]
    edge_budget: usize,
    #[arg(long, default_value_t = 20)]
    structure_iters: usize,
}

impl SpecArgs {
    fn spec(&self) -> Result<PerturbationSpec> {
        let s = PerturbationSpec {
            epsilon: self.epsilon,
            pgd_iters: self.pgd_iters,
            pgd_step: self.pgd_step,
            edge_budget: self.edge_budget,
            structure_iters: self.structure_iters,
            ..PerturbationSpec::default()
        };
        s.validate()?;
        Ok(s)
    }
}

#[derive(Args)]
struct AttackArgs {
    #[command(flatten)]
    graph: GraphArgs,
    #[arg(long)]
    checkpoint: PathBuf,
    #[command(flatten)]
    spec: SpecArgs,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output perturbation JSON.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    graph: GraphArgs,
    #[arg(long)]
    checkpoint: PathBuf,
    /// Perturbation JSON from `attack`; adds adversarial rows.
    #[arg(long)]
    perturbation: Option<PathBuf>,
    #[arg(long, value_delimiter = ',', default_value = "node")]
    tasks: Vec<Task>,
    #[arg(long, default_value_t = 0.1)]
    train_frac: f64,
    #[arg(long, default_value_t = 0.1)]
    val_frac: f64,
    /// Use the fixed planetoid split instead of a random one.
    #[arg(long)]
    planetoid: bool,
    /// Train the classifier on adversarial embeddings too.
    #[arg(long)]
    retrain: bool,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Metrics CSV; rows are appended.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct VerifyArgs {
    /// Random joints per check.
    #[arg(long, default_value_t = 1000)]
    draws: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct BenchArgs {
    /// Experiment manifest; without one a 900-node SBM is used.
    #[arg(long)]
    manifest: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
}

#[derive(Args)]
struct GenSbmArgs {
    #[arg(long, default_value_t = 100)]
    nodes_per_block: usize,
    #[arg(long, default_value_t = 3)]
    blocks: usize,
    #[arg(long, default_value_t = 0.1)]
    p_in: f64,
    #[arg(long, default_value_t = 0.01)]
    p_out: f64,
    #[arg(long, default_value_t = 32)]
    feature_dim: usize,
    #[arg(long, default_value_t = 1.0)]
    feature_shift: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    manifest: PathBuf,
}

fn train(a: &TrainArgs) -> Result<()> {
    let cfg = a.config()?;
    let g = a.graph.load()?;
    let (params, history) = Trainer::new(&g, &cfg)?.run()?;
    io::save_checkpoint(
        &a.out.join("checkpoint.json"),
        &Checkpoint {
            epochs_completed: history.len(),
            config: cfg,
            params,
        },
    )?;
    io::write_history(&a.out.join("history.csv"), &history)?;
    if let Some(last) = history.records.last() {
        println!("epoch {} objective {:.6}", last.epoch, last.objective);
    }
    println!("wrote {}", a.out.display());
    Ok(())
}

fn attack(a: &AttackArgs) -> Result<()> {
    let g = a.graph.load()?;
    let ckpt = io::load_checkpoint(&a.checkpoint)?;
    let spec = a.spec.spec()?;
    let trainer = Trainer::new(&g, &ckpt.config)?;
    let ctx = trainer.epoch_context(ckpt.epochs_completed);
    let loss = trainer.attack_loss(&ckpt.params, &ctx);
    let (structure, features, _) = attack_graph(&g, &loss, &spec, a.seed)?;
    println!(
        "flipped {} edges, max row norm {:.3e}",
        structure.len(),
        features.l2inf_norm()
    );
    io::write_json(
        &a.out,
        &PerturbationFile {
            structure,
            features,
        },
    )
}

fn eval_cmd(a: &EvalArgs) -> Result<()> {
    let g = a.graph.load()?;
    let ckpt = io::load_checkpoint(&a.checkpoint)?;
    let mu = |g: &AttributedGraph| -> Result<_> {
        Ok(embed(
            &ckpt.params,
            &normalize_adjacency(g),
            g.features(),
            EmbeddingSource::Benign,
        )?
        .mu)
    };
    let benign = mu(&g)?;
    let perturbation: Option<PerturbationFile> =
        a.perturbation.as_deref().map(io::read_json).transpose()?;
    let attack_json = a.perturbation.as_ref().map_or_else(
        || "{}".to_string(),
        |p| serde_json::json!({ "perturbation": p }).to_string(),
    );
    let adversarial = perturbation
        .map(|p| p.apply(&g).and_then(|h| mu(&h)))
        .transpose()?;
    let split = if a.planetoid {
        SplitSpec::Planetoid
    } else {
        SplitSpec::Random {
            train: a.train_frac,
            val: a.val_frac,
        }
    };
    let cfg = LogRegConfig::default();
    let protocol = if a.retrain {
        Protocol::Retrain
    } else {
        Protocol::Evasion
    };
    let mut rows = Vec::new();
    for &task in &a.tasks {
        let mut conds = vec![(Condition::Benign, &benign, "{}".to_string())];
        if let Some(m) = &adversarial {
            conds.push((Condition::Adversarial, m, attack_json.clone()));
        }
        for (cond, z, json) in conds {
            let labels = || {
                g.labels()
                    .ok_or_else(|| Error::InvalidGraph(format!("{task:?} needs labels")))
            };
            let (name, metric, value) = match task {
                Task::Node => {
                    let s = split.split(&g, a.seed)?;
                    let adv = (cond == Condition::Adversarial).then_some(z);
                    let acc =
                        eval::node_classification(&benign, adv, labels()?, &s, protocol, &cfg)?;
                    ("node", "accuracy", acc)
                }
                Task::Link => (
                    "link",
                    "auc",
                    eval::link_prediction(z, &g, 0.1, a.seed, &cfg)?,
                ),
                Task::Cluster => (
                    "cluster",
                    "nmi",
                    eval::kmeans_nmi(z, labels()?, g.num_classes().max(2), 10, a.seed)?,
                ),
            };
            println!("{name:<8} {metric:<9} {cond:?}: {value:.4}");
            rows.push(EvalReport::aggregate(name, metric, &[value], cond, json)?);
        }
    }
    eval::append_reports(&a.out, &rows)
}

fn verify(a: &VerifyArgs) -> Result<bool> {
    let checks = verify_all(a.draws, a.seed)?;
    println!("{:<26} {:>14}  result", "check", "worst");
    for c in &checks {
        println!(
            "{:<26} {:>14.3e}  {}",
            c.name,
            c.worst,
            if c.passed { "pass" } else { "FAIL" }
        );
    }
    Ok(checks.iter().all(|c| c.passed))
}

fn bench(a: &BenchArgs) -> Result<()> {
    let mut m = match &a.manifest {
        Some(p) => ExperimentManifest::load(p)?,
        None => ExperimentManifest {
            dataset: Dataset::Sbm {
                spec: SbmSpec {
                    n_per_block: 300,
                    blocks: 3,
                    p_in: 0.02,
                    p_out: 0.002,
                    feature_dim: 32,
                    feature_shift: 1.0,
                },
                seed: 0,
            },
            normalize_features: true,
            train: TrainConfig {
                hidden_dim: 32,
                embed_dim: 32,
                edge_budget: 50,
                ..TrainConfig::default()
            },
            attack: PerturbationSpec::default(),
            edge_budget_fraction: None,
            tasks: vec![Task::Node],
            seeds: vec![0],
            output_dir: PathBuf::from("."),
            split: SplitSpec::default(),
            protocol: Protocol::Evasion,
            logreg: LogRegConfig::default(),
            kmeans_restarts: 10,
            link_test_frac: 0.1,
            bench_epochs: 3,
        },
    };
    if let Some(e) = a.epochs {
        m.bench_epochs = e;
    }
    let r = experiment::bench(&m)?;
    println!(
        "nodes {} edges {} epochs {} edge_budget {}",
        r.nodes, r.edges, r.epochs, r.edge_budget
    );
    println!("rgib    {:.4} s/epoch", r.rgib_seconds_per_epoch);
    println!("rgib-s  {:.4} s/epoch", r.rgib_s_seconds_per_epoch);
    println!("ratio   {:.2}", r.ratio);
    Ok(())
}

fn gen_sbm(a: &GenSbmArgs) -> Result<()> {
    let spec = SbmSpec {
        n_per_block: a.nodes_per_block,
        blocks: a.blocks,
        p_in: a.p_in,
        p_out: a.p_out,
        feature_dim: a.feature_dim,
        feature_shift: a.feature_shift,
    };
    let g = generate_sbm(&spec, a.seed)?;
    io::write_graph_file(&a.out, &g)?;
    println!(
        "{} nodes, {} edges -> {}",
        g.num_nodes(),
        g.num_edges(),
        a.out.display()
    );
    Ok(())
}

fn run(a: &RunArgs) -> Result<()> {
    let m = ExperimentManifest::load(&a.manifest)?;
    let s = experiment::run(&m)?;
    for r in &s.rows {
        println!(
            "{:<8} {:<9} {:<12} {:.4} ± {:.4} (n={})",
            format!("{:?}", r.task).to_lowercase(),
            r.metric,
            format!("{:?}", r.condition).to_lowercase(),
            r.mean,
            r.std,
            r.n_seeds
        );
    }
    println!("wrote {}", Path::new(&m.output_dir).display());
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    let outcome = match &cli.command {
        Command::Train(a) => train(a),
        Command::Attack(a) => attack(a),
        Command::Eval(a) => eval_cmd(a),
        Command::Verify(a) => match verify(a) {
            Ok(true) => Ok(()),
            Ok(false) => Err(Error::NonFinite("verification check failed".into())),
            Err(e) => Err(e),
        },
        Command::Bench(a) => bench(a),
        Command::GenSbm(a) => gen_sbm(a),
        Command::Run(a) => run(a),
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
