//! Command-line front end for the `gpn` crate.
//!
//! [`run`] parses arguments and returns the process exit code: 0 on
//! success, 1 on a runtime failure and 2 on a usage error.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;

use gpn::data::{generate_sbm, load_dataset, SbmSpec};
use gpn::episodic::{self, MetaTestConfig, TrainConfig};
use gpn::gradcheck::{self, GradcheckConfig};
use gpn::graph::DEFAULT_CENTRALITY_EPS;
use gpn::model::GraphContext;
use gpn::protonet::PrototypeStrategy;
use gpn::{params_io, AttributedGraph, EdgeDirection, ModelParams, Real};

pub const PARAMS_FILE: &str = "params.gpn";
pub const HISTORY_FILE: &str = "history.jsonl";
pub const REPORT_JSON: &str = "report.json";
pub const REPORT_CSV: &str = "report.csv";

#[derive(Debug, Parser)]
#[command(name = "gpn", version, about = "Graph prototypical networks for few-shot node classification")]
pub struct Cli {
    /// Log progress to stderr (repeat for more detail).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    pub verbose: u8,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a stochastic block model dataset bundle.
    GenerateSynth(GenerateArgs),
    /// Meta-train on the train split, validating on the val split.
    Train(TrainArgs),
    /// Meta-test frozen parameters on the test split.
    Evaluate(EvaluateArgs),
    /// Write the support-versus-query similarity matrix of one test task.
    ExportSimilarity(SimilarityArgs),
    /// Compare analytic gradients with central finite differences.
    Gradcheck(GradcheckArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Precision {
    F32,
    F64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum StrategyArg {
    Gpn,
    GpnNaive,
}

impl From<StrategyArg> for PrototypeStrategy {
    fn from(s: StrategyArg) -> Self {
        match s {
            StrategyArg::Gpn => PrototypeStrategy::Weighted,
            StrategyArg::GpnNaive => PrototypeStrategy::Mean,
        }
    }
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 10)]
    pub classes: usize,
    #[arg(long, alias = "per-class", default_value_t = 60)]
    pub nodes_per_class: usize,
    #[arg(long, default_value_t = 0.1)]
    pub p_in: f64,
    #[arg(long, default_value_t = 0.005)]
    pub p_out: f64,
    #[arg(long, default_value_t = 32)]
    pub dim: usize,
    #[arg(long, default_value_t = 1.0)]
    pub class_mean_scale: f64,
    #[arg(long, default_value_t = 0.5)]
    pub noise_std: f64,
    /// Train/val/test class counts, e.g. `5,2,3`. Defaults to a 50/20/30
    /// split of `--classes`.
    #[arg(long, value_delimiter = ',')]
    pub splits: Option<Vec<usize>>,
}

#[derive(Debug, Args)]
pub struct DataArgs {
    /// Dataset bundle directory.
    #[arg(long)]
    pub data: PathBuf,
    /// Use in-degree for node centrality (the edges file lists `u -> v`).
    #[arg(long)]
    pub directed: bool,
}

#[derive(Debug, Args)]
pub struct EpisodeArgs {
    /// Classes per task.
    #[arg(long = "n", default_value_t = 5)]
    pub n_way: usize,
    /// Support nodes per class.
    #[arg(long = "k", default_value_t = 3)]
    pub k_shot: usize,
    /// Query nodes per class (defaults to `--k`).
    #[arg(long = "m")]
    pub m_query: Option<usize>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, value_enum, default_value_t = StrategyArg::Gpn)]
    pub strategy: StrategyArg,
    #[arg(long, value_enum, default_value_t = Precision::F64)]
    pub precision: Precision,
}

impl EpisodeArgs {
    fn m(&self) -> usize {
        self.m_query.unwrap_or(self.k_shot)
    }

    fn check(&self) -> Result<(), CliError> {
        if self.n_way < 2 {
            return Err(CliError::Usage(format!("--n must be at least 2, got {}", self.n_way)));
        }
        if self.k_shot == 0 || self.m() == 0 {
            return Err(CliError::Usage("--k and --m must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub episode: EpisodeArgs,
    #[arg(long, default_value_t = 300)]
    pub episodes: usize,
    #[arg(long, default_value_t = 0.5)]
    pub dropout: f64,
    /// Output directory for parameters and history.
    #[arg(long, default_value = ".")]
    pub out: PathBuf,
    /// Parameter file (defaults to `<out>/params.gpn`).
    #[arg(long)]
    pub params: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub episode: EpisodeArgs,
    #[arg(long)]
    pub params: PathBuf,
    /// Tasks per repeat.
    #[arg(long, default_value_t = 50)]
    pub tasks: usize,
    #[arg(long, default_value_t = 10)]
    pub repeats: usize,
    /// Support nodes per class replaced by nodes of other classes.
    #[arg(long, default_value_t = 0)]
    pub mislabeled: usize,
    /// Also write `report.json` and `report.csv` into this directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SimilarityArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub episode: EpisodeArgs,
    #[arg(long)]
    pub params: PathBuf,
    /// CSV destination; stdout when omitted.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    /// Number of random graphs to check.
    #[arg(long, default_value_t = 10)]
    pub seeds: u64,
    /// First seed.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 0.0)]
    pub dropout: f64,
    #[arg(long, value_enum, default_value_t = StrategyArg::Gpn)]
    pub strategy: StrategyArg,
    /// Maximum accepted relative error.
    #[arg(long, default_value_t = 1e-4)]
    pub tolerance: f64,
}

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Runtime(anyhow::Error),
}

impl<E: Into<anyhow::Error>> From<E> for CliError {
    fn from(e: E) -> Self {
        CliError::Runtime(e.into())
    }
}

/// Parses `args` (including the program name) and runs the command,
/// writing results to `stdout`.
pub fn run<I, S>(args: I, stdout: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let level = match cli.verbose {
        0 => log::LevelFilter::Warn,
        1 => log::LevelFilter::Info,
        _ => log::LevelFilter::Debug,
    };
    let _ = env_logger::Builder::new()
        .filter_level(level)
        .parse_default_env()
        .try_init();

    match execute(cli.command, stdout) {
        Ok(()) => 0,
        Err(CliError::Usage(msg)) => {
            eprintln!("error: {msg}");
            2
        }
        Err(CliError::Runtime(e)) => {
            eprintln!("error: {e:#}");
            1
        }
    }
}

fn execute(command: Command, stdout: &mut dyn Write) -> Result<(), CliError> {
    match command {
        Command::GenerateSynth(a) => generate(a, stdout),
        Command::Train(a) => train(a, stdout),
        Command::Evaluate(a) => evaluate(a, stdout),
        Command::ExportSimilarity(a) => export_similarity(a, stdout),
        Command::Gradcheck(a) => run_gradcheck(a, stdout),
    }
}

fn load(data: &DataArgs) -> anyhow::Result<AttributedGraph> {
    let direction = if data.directed {
        EdgeDirection::Directed
    } else {
        EdgeDirection::Undirected
    };
    let (g, stats) =
        load_dataset(&data.data, direction).with_context(|| format!("loading {}", data.data.display()))?;
    log::info!("loaded {stats:?}");
    Ok(g)
}

fn load_params(path: &Path) -> anyhow::Result<ModelParams<f64>> {
    params_io::load(path).with_context(|| format!("reading parameters {}", path.display()))
}

fn generate(a: GenerateArgs, stdout: &mut dyn Write) -> Result<(), CliError> {
    let mut spec = SbmSpec {
        nodes_per_class: a.nodes_per_class,
        p_in: a.p_in,
        p_out: a.p_out,
        feature_dim: a.dim,
        class_mean_scale: a.class_mean_scale,
        noise_std: a.noise_std,
        seed: a.seed,
        ..SbmSpec::with_classes(a.classes)
    };
    if let Some(s) = &a.splits {
        if s.len() != 3 {
            return Err(CliError::Usage(format!("--splits takes three counts, got {}", s.len())));
        }
        (spec.train_classes, spec.val_classes, spec.test_classes) = (s[0], s[1], s[2]);
    }
    spec.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    let bundle = generate_sbm(&spec)?;
    bundle.write(&a.out)?;
    let g = bundle.to_graph(EdgeDirection::Undirected)?;
    let stats = gpn::data::DatasetStats::of(&g);
    writeln!(stdout, "{}", serde_json::to_string(&stats)?)?;
    Ok(())
}

fn train(a: TrainArgs, stdout: &mut dyn Write) -> Result<(), CliError> {
    a.episode.check()?;
    if !(0.0..1.0).contains(&a.dropout) {
        return Err(CliError::Usage(format!("--dropout must lie in [0, 1), got {}", a.dropout)));
    }
    let g = load(&a.data)?;
    let config = TrainConfig {
        n_way: a.episode.n_way,
        k_shot: a.episode.k_shot,
        m_query: a.episode.m(),
        episodes: a.episodes,
        dropout: a.dropout,
        seed: a.episode.seed,
        strategy: a.episode.strategy.into(),
        ..TrainConfig::default()
    };
    let outcome = match a.episode.precision {
        Precision::F64 => train_as::<f64>(&g, &config)?,
        Precision::F32 => train_as::<f32>(&g, &config)?,
    };

    fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    let params_path = a.params.unwrap_or_else(|| a.out.join(PARAMS_FILE));
    params_io::save(&params_path, &outcome.params)?;
    let history_path = a.out.join(HISTORY_FILE);
    fs::write(&history_path, episodic::history_to_jsonl(&outcome.history))
        .with_context(|| format!("writing {}", history_path.display()))?;

    let summary = json!({
        "episodes_run": outcome.history.len(),
        "initial_loss": outcome.history.first().map(|r| r.train_loss),
        "final_loss": outcome.history.last().map(|r| r.train_loss),
        "best_val_accuracy": outcome.best_val_accuracy,
        "stopped_early": outcome.stopped_early,
        "params": params_path,
        "history": history_path,
    });
    writeln!(stdout, "{summary}")?;
    Ok(())
}

fn train_as<T: Real>(
    g: &AttributedGraph,
    config: &TrainConfig,
) -> anyhow::Result<episodic::TrainOutcome<f64>> {
    let o = episodic::train::<T>(g, config)?;
    Ok(episodic::TrainOutcome {
        params: o.params.cast(),
        history: o.history,
        best_val_accuracy: o.best_val_accuracy,
        stopped_early: o.stopped_early,
    })
}

fn evaluate(a: EvaluateArgs, stdout: &mut dyn Write) -> Result<(), CliError> {
    a.episode.check()?;
    if a.tasks == 0 || a.repeats == 0 {
        return Err(CliError::Usage("--tasks and --repeats must be positive".into()));
    }
    let g = load(&a.data)?;
    let params = load_params(&a.params)?;
    check_dims(&g, &params)?;
    let cfg = MetaTestConfig {
        n_way: a.episode.n_way,
        k_shot: a.episode.k_shot,
        m_query: a.episode.m(),
        num_tasks: a.tasks,
        repeats: a.repeats,
        seed: a.episode.seed,
        strategy: a.episode.strategy.into(),
        centrality_eps: DEFAULT_CENTRALITY_EPS,
        mislabeled_per_class: a.mislabeled,
        threads: episodic::threads_from_env(),
    };
    let report = match a.episode.precision {
        Precision::F64 => episodic::meta_test(&g, &params, &cfg)?,
        Precision::F32 => episodic::meta_test(&g, &params.cast::<f32>(), &cfg)?,
    };
    if let Some(dir) = &a.out {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        fs::write(dir.join(REPORT_JSON), report.to_json() + "\n")?;
        fs::write(dir.join(REPORT_CSV), report.to_csv())?;
    }
    writeln!(stdout, "{}", report.to_json())?;
    Ok(())
}

fn check_dims(g: &AttributedGraph, params: &ModelParams<f64>) -> anyhow::Result<()> {
    if params.feature_dim() != g.feature_dim() {
        bail!(
            "parameters expect {} features but the dataset has {}",
            params.feature_dim(),
            g.feature_dim()
        );
    }
    Ok(())
}

fn export_similarity(a: SimilarityArgs, stdout: &mut dyn Write) -> Result<(), CliError> {
    a.episode.check()?;
    let g = load(&a.data)?;
    let params = load_params(&a.params)?;
    check_dims(&g, &params)?;
    let cfg = MetaTestConfig {
        n_way: a.episode.n_way,
        k_shot: a.episode.k_shot,
        m_query: a.episode.m(),
        num_tasks: 1,
        repeats: 1,
        seed: a.episode.seed,
        strategy: a.episode.strategy.into(),
        ..MetaTestConfig::default()
    };
    let task = episodic::meta_test_tasks(&g, &cfg, 0)?.remove(0);
    let csv = match a.episode.precision {
        Precision::F64 => similarity_as(&g, &params, &task, cfg.strategy)?,
        Precision::F32 => similarity_as(&g, &params.cast::<f32>(), &task, cfg.strategy)?,
    };
    match &a.out {
        Some(path) => fs::write(path, csv).with_context(|| format!("writing {}", path.display()))?,
        None => stdout.write_all(csv.as_bytes())?,
    }
    Ok(())
}

fn similarity_as<T: Real>(
    g: &AttributedGraph,
    params: &ModelParams<T>,
    task: &episodic::EpisodeTask,
    strategy: PrototypeStrategy,
) -> anyhow::Result<String> {
    let ctx = GraphContext::<T>::new(g, DEFAULT_CENTRALITY_EPS);
    Ok(episodic::similarity_for_task(&ctx, params, task, strategy)?.to_csv())
}

fn run_gradcheck(a: GradcheckArgs, stdout: &mut dyn Write) -> Result<(), CliError> {
    if a.seeds == 0 {
        return Err(CliError::Usage("--seeds must be positive".into()));
    }
    if !(0.0..1.0).contains(&a.dropout) {
        return Err(CliError::Usage(format!("--dropout must lie in [0, 1), got {}", a.dropout)));
    }
    let cfg = GradcheckConfig {
        dropout: a.dropout,
        strategy: a.strategy.into(),
        ..GradcheckConfig::default()
    };
    let mut worst: f64 = 0.0;
    for seed in a.seed..a.seed + a.seeds {
        let r = gradcheck::check_seed(&cfg, seed)?;
        worst = worst.max(r.max_rel_error());
        writeln!(stdout, "{}", serde_json::to_string(&r)?)?;
    }
    writeln!(stdout, "{}", json!({ "max_rel_error": worst, "tolerance": a.tolerance }))?;
    if worst.is_nan() || worst >= a.tolerance {
        return Err(CliError::Runtime(anyhow::anyhow!(
            "max relative error {worst:e} exceeds {:e}",
            a.tolerance
        )));
    }
    Ok(())
}
