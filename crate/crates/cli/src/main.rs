//! Command-line driver: collect datasets, train offline policies, evaluate
//! them with bootstrapped lower bounds, and run the full gated experiment.

use std::path::PathBuf;
use std::process::ExitCode;
use std::str::FromStr;

use clap::{Args, Parser, Subcommand};

use opegate_core::bootstrap::{hcope_lower_bound, BootstrapError, BoundMethod};
use opegate_core::data::{behavior_value_stats, collect, read_dataset, write_dataset};
use opegate_core::harness::output::{
    emit_outputs, figure2_chart, figure3_chart, read_results_csv,
};
use opegate_core::harness::plot::render_line_chart;
use opegate_core::harness::{
    aggregate, prepare_behavior_policy, run_experiment, standard_estimator, EstimatorKind,
    ExperimentConfig, HarnessError,
};
use opegate_core::improve::{
    improve, read_checkpoint, write_checkpoint, ImproveConfig, Method,
};
use opegate_core::linear::{read_snapshot, write_snapshot};
use opegate_core::rng::derive_seed;

#[derive(Parser)]
#[command(
    name = "opegate",
    version,
    about = "Offline policy learning with bootstrapped off-policy lower bounds gating deployment"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Synthesize the data-source policy and collect a trajectory dataset.
    Collect(CollectArgs),
    /// Train an offline policy on a dataset file.
    Train(TrainArgs),
    /// Bootstrap lower bounds for a saved policy on a test dataset.
    Evaluate(EvaluateArgs),
    /// Run the full multi-run train/test/gate experiment.
    Experiment(ExperimentArgs),
    /// Regenerate figures from results.csv files.
    Plot(PlotArgs),
}

#[derive(Args)]
struct CollectArgs {
    /// Trajectories to collect.
    #[arg(long, default_value_t = 300)]
    collect: usize,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Online episodes used to train the data-source policy.
    #[arg(long)]
    behavior_episodes: Option<usize>,
    /// Experiment config JSON supplying the environment.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    /// Training dataset (trajectory line format).
    #[arg(long)]
    data: PathBuf,
    /// bc | ddqn | bcq
    #[arg(long)]
    method: Option<String>,
    /// Gradient steps to run.
    #[arg(long)]
    updates: Option<usize>,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Continue from a checkpoint written by a previous train call.
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Where to write the evaluation policy snapshot.
    #[arg(long)]
    out: PathBuf,
    /// Optionally also write a resumable checkpoint.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
}

#[derive(Args)]
struct EvaluateArgs {
    /// Test dataset (trajectory line format).
    #[arg(long)]
    data: PathBuf,
    /// Policy snapshot to evaluate.
    #[arg(long)]
    policy: PathBuf,
    /// Comma-separated list from wis, mb, wdr.
    #[arg(long, default_value = "wis,mb,wdr")]
    estimators: String,
    #[arg(long)]
    delta: Option<f64>,
    #[arg(long = "B")]
    b: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Force one bound method (percentile | bca) for all estimators.
    #[arg(long)]
    bound_method: Option<String>,
    /// Experiment config JSON supplying estimation settings.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args)]
struct ExperimentArgs {
    /// paper | desk
    #[arg(long, default_value = "paper")]
    preset: String,
    /// bc | ddqn | bcq
    #[arg(long)]
    method: Option<String>,
    /// Comma-separated list from wis, mb, wdr.
    #[arg(long)]
    estimators: Option<String>,
    #[arg(long)]
    delta: Option<f64>,
    #[arg(long = "B")]
    b: Option<usize>,
    #[arg(long)]
    iterations: Option<usize>,
    #[arg(long)]
    runs: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Base config JSON (mirrors the experiment config schema); flags
    /// override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct PlotArgs {
    /// results.csv files; figure3 overlays one series per file.
    #[arg(long, required = true, num_args = 1..)]
    csv: Vec<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

enum CliError {
    Config(String),
    Unstable(String),
    Other(String),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::Unstable(_) => 3,
            CliError::Other(_) => 1,
        }
    }

    fn message(&self) -> &str {
        match self {
            CliError::Config(m) | CliError::Unstable(m) | CliError::Other(m) => m,
        }
    }
}

fn classify_harness(e: HarnessError) -> CliError {
    match e {
        HarnessError::Config(m) => CliError::Config(m),
        HarnessError::Bootstrap(BootstrapError::EstimatorUnstable { .. }) => {
            CliError::Unstable(e.to_string())
        }
        other => CliError::Other(other.to_string()),
    }
}

fn classify_bootstrap(e: BootstrapError) -> CliError {
    match e {
        BootstrapError::EstimatorUnstable { .. } => CliError::Unstable(e.to_string()),
        BootstrapError::BadConfig(m) => CliError::Config(m),
        other => CliError::Other(other.to_string()),
    }
}

fn other(e: impl std::fmt::Display) -> CliError {
    CliError::Other(e.to_string())
}

fn load_config(path: &PathBuf) -> Result<ExperimentConfig, CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
    serde_json::from_str(&text)
        .map_err(|e| CliError::Config(format!("invalid config {}: {e}", path.display())))
}

fn parse_method(s: &str) -> Result<Method, CliError> {
    Method::from_str(s).map_err(CliError::Config)
}

fn parse_estimators(s: &str) -> Result<Vec<EstimatorKind>, CliError> {
    s.split(',')
        .map(str::trim)
        .filter(|p| !p.is_empty())
        .map(|p| EstimatorKind::from_str(p).map_err(CliError::Config))
        .collect()
}

fn run_collect(args: CollectArgs) -> Result<(), CliError> {
    let base = match &args.config {
        Some(path) => load_config(path)?,
        None => ExperimentConfig::default(),
    };
    let mut cfg = base;
    if let Some(episodes) = args.behavior_episodes {
        cfg.behavior_episodes = episodes;
    }
    cfg.base_seed = args.seed;
    cfg.validate().map_err(classify_harness)?;

    let behavior = prepare_behavior_policy(&cfg);
    let dataset = collect(&behavior, args.collect, &cfg.env, args.seed, 0, "behavior-q")
        .map_err(other)?;
    let (mean, se) = behavior_value_stats(&dataset).map_err(other)?;
    write_dataset(&args.out, &dataset).map_err(other)?;
    println!(
        "collected {} trajectories (mean return {mean:.2} ± {se:.2}) -> {}",
        dataset.len(),
        args.out.display()
    );
    Ok(())
}

fn run_train(args: TrainArgs) -> Result<(), CliError> {
    let dataset = read_dataset(&args.data).map_err(other)?;

    let (mut cfg, prior) = match &args.resume {
        Some(path) => {
            let (cfg, _, state) = read_checkpoint(path).map_err(other)?;
            (cfg, Some(state))
        }
        None => {
            let method = parse_method(args.method.as_deref().unwrap_or("ddqn"))?;
            let mut cfg = ImproveConfig::for_method(method);
            cfg.seed = args.seed;
            (cfg, None)
        }
    };
    if let Some(method) = &args.method {
        let requested = parse_method(method)?;
        if prior.is_some() && requested != cfg.method {
            return Err(CliError::Config(format!(
                "checkpoint was trained with {}, cannot resume as {requested}",
                cfg.method
            )));
        }
        cfg.method = requested;
    }
    if let Some(updates) = args.updates {
        cfg.updates_per_iteration = updates;
    }
    cfg.validate()
        .map_err(|e| CliError::Config(e.to_string()))?;

    let (state, policy) = improve(&dataset, &cfg, prior).map_err(other)?;
    write_snapshot(&args.out, &policy).map_err(other)?;
    println!(
        "trained {} for {} updates (total {}) -> {}",
        cfg.method,
        cfg.updates_per_iteration,
        state.update_counter,
        args.out.display()
    );
    if let Some(ckpt) = &args.checkpoint {
        write_checkpoint(ckpt, &state, &cfg).map_err(other)?;
        println!("checkpoint -> {}", ckpt.display());
    }
    Ok(())
}

fn run_evaluate(args: EvaluateArgs) -> Result<(), CliError> {
    let mut cfg = match &args.config {
        Some(path) => load_config(path)?,
        None => ExperimentConfig::default(),
    };
    if let Some(delta) = args.delta {
        cfg.bootstrap.delta = delta;
    }
    if let Some(b) = args.b {
        cfg.bootstrap.b = b;
        cfg.bootstrap.wdr_b = b;
    }
    if let Some(method) = &args.bound_method {
        cfg.bootstrap.method_override = Some(match method.as_str() {
            "percentile" => BoundMethod::Percentile,
            "bca" => BoundMethod::Bca,
            otherwise => {
                return Err(CliError::Config(format!(
                    "unknown bound method {otherwise:?}, expected percentile|bca"
                )))
            }
        });
    }
    cfg.estimators = parse_estimators(&args.estimators)?;
    if cfg.estimators.is_empty() {
        return Err(CliError::Config("no estimators requested".to_string()));
    }
    cfg.gating_estimator = None;
    cfg.validate().map_err(classify_harness)?;

    let dataset = read_dataset(&args.data).map_err(other)?;
    let policy = read_snapshot(&args.policy).map_err(other)?;
    let seed = args.seed.unwrap_or(cfg.base_seed);

    for (idx, kind) in cfg.estimators.iter().enumerate() {
        let estimator = standard_estimator(*kind, &policy, &cfg.ope, &cfg.env);
        let bootstrap_cfg = opegate_core::bootstrap::BootstrapConfig {
            b: match kind {
                EstimatorKind::Wdr => cfg.bootstrap.wdr_b,
                _ => cfg.bootstrap.b,
            },
            delta: cfg.bootstrap.delta,
            method: cfg
                .bootstrap
                .method_override
                .unwrap_or_else(|| kind.default_bound_method()),
            seed: derive_seed(seed, &[idx as u64]),
        };
        let report = hcope_lower_bound(&*estimator, &dataset, &bootstrap_cfg, &kind.to_string())
            .map_err(classify_bootstrap)?;
        println!("{}", serde_json::to_string(&report).expect("report serializes"));
    }
    Ok(())
}

fn run_experiment_cmd(args: ExperimentArgs) -> Result<(), CliError> {
    let mut cfg = match &args.config {
        Some(path) => load_config(path)?,
        None => match args.preset.as_str() {
            "paper" => ExperimentConfig::paper(Method::Ddqn),
            "desk" => ExperimentConfig::desk(Method::Ddqn),
            otherwise => {
                return Err(CliError::Config(format!(
                    "unknown preset {otherwise:?}, expected paper|desk"
                )))
            }
        },
    };
    if let Some(method) = &args.method {
        let method = parse_method(method)?;
        cfg.improve = ImproveConfig {
            seed: cfg.improve.seed,
            ..ImproveConfig::for_method(method)
        };
    }
    if let Some(estimators) = &args.estimators {
        cfg.estimators = parse_estimators(estimators)?;
        if let Some(gate) = cfg.gating_estimator {
            if !cfg.estimators.contains(&gate) {
                cfg.gating_estimator = cfg.estimators.first().copied();
            }
        }
    }
    if let Some(delta) = args.delta {
        cfg.bootstrap.delta = delta;
    }
    if let Some(b) = args.b {
        cfg.bootstrap.b = b;
        cfg.bootstrap.wdr_b = b.min(cfg.bootstrap.wdr_b);
    }
    if let Some(iterations) = args.iterations {
        cfg.max_iterations = iterations;
    }
    if let Some(runs) = args.runs {
        cfg.runs = runs;
    }
    if let Some(seed) = args.seed {
        cfg.base_seed = seed;
    }
    cfg.output_dir = Some(args.out.clone());
    cfg.validate().map_err(classify_harness)?;

    let records = run_experiment(&cfg).map_err(classify_harness)?;
    for (run, record) in records.iter().enumerate() {
        match record.stopped_at() {
            Some(iter) => println!("run {run}: deployment-ready at iteration {iter}"),
            None => println!(
                "run {run}: not ready after {} iterations",
                record.rows.len()
            ),
        }
    }
    let table = aggregate(&records, cfg.max_iterations).map_err(classify_harness)?;
    let written = emit_outputs(&table, &cfg).map_err(classify_harness)?;
    for path in written {
        println!("wrote {}", path.display());
    }
    Ok(())
}

fn run_plot(args: PlotArgs) -> Result<(), CliError> {
    std::fs::create_dir_all(&args.out)
        .map_err(|e| CliError::Other(format!("cannot create {}: {e}", args.out.display())))?;
    let mut by_method = Vec::new();
    for path in &args.csv {
        let rows = read_results_csv(path).map_err(classify_harness)?;
        if rows.is_empty() {
            return Err(CliError::Other(format!("{} has no rows", path.display())));
        }
        let method = rows[0].method.clone();
        let fig2 = args.out.join(format!("figure2_{method}.svg"));
        std::fs::write(&fig2, render_line_chart(&figure2_chart(&rows, &method)))
            .map_err(|e| CliError::Other(format!("cannot write {}: {e}", fig2.display())))?;
        println!("wrote {}", fig2.display());
        by_method.push((method, rows));
    }
    let fig3 = args.out.join("figure3.svg");
    std::fs::write(&fig3, render_line_chart(&figure3_chart(&by_method)))
        .map_err(|e| CliError::Other(format!("cannot write {}: {e}", fig3.display())))?;
    println!("wrote {}", fig3.display());
    Ok(())
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Collect(args) => run_collect(args),
        Command::Train(args) => run_train(args),
        Command::Evaluate(args) => run_evaluate(args),
        Command::Experiment(args) => run_experiment_cmd(args),
        Command::Plot(args) => run_plot(args),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {}", err.message());
            ExitCode::from(err.exit_code())
        }
    }
}
