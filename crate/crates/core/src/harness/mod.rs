//! The train/test/gate loop and the multi-run experiment driver.
//!
//! Each iteration requests a fresh batch of trajectories from the data
//! source, splits it, continues offline training on the train part, and
//! bootstraps lower bounds on the test part. A run stops (deployment-ready)
//! as soon as the gating estimator's lower bound exceeds the data source's
//! own value estimate, or after the iteration cap.
//!
//! Every stochastic component draws from a stream derived from the base
//! seed, a run tag, and an iteration tag, so datasets are fresh on every
//! iteration, runs are independent, and the whole experiment reproduces
//! byte for byte.

pub mod output;
pub mod plot;

use std::path::PathBuf;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bootstrap::{
    hcope_lower_bound, BootstrapConfig, BootstrapError, BootstrapSummary, BoundMethod,
    EstimatorError, LowerBoundReport,
};
use crate::data::{
    behavior_value_stats, collect, make_behavior_policy, split, DataError, Dataset, SplitSpec,
};
use crate::improve::{improve, ImproveConfig, ImproveError, ImproverState, Method};
use crate::linear::GreedyPolicy;
use crate::mdp::{rollout, trajectory_return, DiscretePolicy, EnvConfig, MdpError};
use crate::ope::{
    build_model, compute_weights, estimate_behavior_policy, mb_estimate, model_value_functions,
    tv_distance, OpeError, StateDiscretizer,
};
use crate::rng::{derive_seed, stream_rng};

const TAG_BEHAVIOR: u64 = 1;
const TAG_RUN: u64 = 2;
const TAG_COLLECT: u64 = 3;
const TAG_SPLIT: u64 = 4;
const TAG_IMPROVE: u64 = 5;
const TAG_ORACLE: u64 = 6;
const TAG_EVAL: u64 = 7;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("invalid experiment config: {0}")]
    Config(String),

    #[error("cannot aggregate mixed records: {0}")]
    MixedRecords(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Data(#[from] DataError),

    #[error(transparent)]
    Improve(#[from] ImproveError),

    #[error(transparent)]
    Ope(#[from] OpeError),

    #[error(transparent)]
    Bootstrap(#[from] BootstrapError),

    #[error(transparent)]
    Mdp(#[from] MdpError),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

/// Which off-policy estimator backs an evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EstimatorKind {
    Wis,
    Mb,
    Wdr,
}

impl EstimatorKind {
    /// Bound method each estimator defaults to.
    pub fn default_bound_method(self) -> BoundMethod {
        match self {
            EstimatorKind::Wis => BoundMethod::Bca,
            EstimatorKind::Mb | EstimatorKind::Wdr => BoundMethod::Percentile,
        }
    }
}

impl std::fmt::Display for EstimatorKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            EstimatorKind::Wis => write!(f, "wis"),
            EstimatorKind::Mb => write!(f, "mb"),
            EstimatorKind::Wdr => write!(f, "wdr"),
        }
    }
}

impl std::str::FromStr for EstimatorKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "wis" => Ok(EstimatorKind::Wis),
            "mb" => Ok(EstimatorKind::Mb),
            "wdr" => Ok(EstimatorKind::Wdr),
            other => Err(format!("unknown estimator {other:?}, expected wis|mb|wdr")),
        }
    }
}

/// Estimation settings shared by all estimators.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OpeSettings {
    /// Grid resolution for the estimated behavior policy.
    pub bins_per_dim: usize,
    /// Grid resolution for the estimated transition model. Coarser than
    /// the behavior grid: a test split only supports a few thousand
    /// (cell, action) visits, and unvisited pairs simulate as pessimistic
    /// self-loops, so an over-fine model drowns good policies in sinks.
    pub model_bins_per_dim: usize,
    pub smoothing_alpha: f64,
    /// Monte Carlo rollouts per model-based estimate.
    pub mb_rollouts: usize,
    pub gamma: f64,
    /// Model horizon; defaults to the environment's macro-step cap.
    pub model_horizon: Option<usize>,
}

impl Default for OpeSettings {
    fn default() -> Self {
        Self {
            bins_per_dim: 32,
            model_bins_per_dim: 16,
            smoothing_alpha: 1.0,
            mb_rollouts: 10_000,
            gamma: 1.0,
            model_horizon: None,
        }
    }
}

/// Bootstrap sizing: `b` resamples everywhere except WDR, whose per-resample
/// value re-estimation is expensive enough to warrant its own budget.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BootstrapSettings {
    pub b: usize,
    pub wdr_b: usize,
    pub delta: f64,
    /// Force one bound method for every estimator instead of the
    /// per-estimator defaults.
    pub method_override: Option<BoundMethod>,
}

impl Default for BootstrapSettings {
    fn default() -> Self {
        Self {
            b: 2000,
            wdr_b: 224,
            delta: 0.05,
            method_override: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub improve: ImproveConfig,
    pub estimators: Vec<EstimatorKind>,
    /// The estimator whose lower bound gates deployment. All configured
    /// estimators are logged regardless. `None` disables the gate.
    pub gating_estimator: Option<EstimatorKind>,
    pub bootstrap: BootstrapSettings,
    pub ope: OpeSettings,
    /// Trajectories requested from the data source per iteration.
    pub n_per_iteration: usize,
    pub n_train: usize,
    pub max_iterations: usize,
    pub runs: usize,
    pub base_seed: u64,
    pub env: EnvConfig,
    /// Online episodes used to synthesize the behavior policy.
    pub behavior_episodes: usize,
    /// Episodes for the diagnostic true-value estimate; 0 disables it.
    pub true_value_episodes: usize,
    /// Keep iterating after the gate first passes (the pass is still
    /// recorded on its iteration).
    pub continue_after_pass: bool,
    pub output_dir: Option<PathBuf>,
}

/// Environment used by the experiment protocol: episodes start from a
/// random position and velocity near the valley floor, so every episode
/// takes a real swing to solve. Full-box starts mass-produce one-step
/// episodes whose zero returns degenerate the importance-sampling
/// estimators.
pub fn protocol_env() -> EnvConfig {
    EnvConfig {
        start_position_min: -0.9,
        start_position_max: -0.3,
        start_velocity_min: -0.02,
        start_velocity_max: 0.02,
        ..EnvConfig::default()
    }
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            improve: ImproveConfig::for_method(Method::Ddqn),
            estimators: vec![EstimatorKind::Wis, EstimatorKind::Mb, EstimatorKind::Wdr],
            gating_estimator: Some(EstimatorKind::Mb),
            bootstrap: BootstrapSettings::default(),
            ope: OpeSettings::default(),
            n_per_iteration: 300,
            n_train: 20,
            max_iterations: 10,
            runs: 40,
            base_seed: 1,
            env: protocol_env(),
            behavior_episodes: 150,
            true_value_episodes: 1000,
            continue_after_pass: false,
            output_dir: None,
        }
    }
}

impl ExperimentConfig {
    /// Full-scale protocol: 40 runs, B = 2000 (224 for WDR).
    pub fn paper(method: Method) -> Self {
        Self {
            improve: ImproveConfig::for_method(method),
            ..Self::default()
        }
    }

    /// Desk-scale protocol for fast execution: 10 runs, B = 500 for every
    /// estimator, and 1000 model rollouts.
    pub fn desk(method: Method) -> Self {
        Self {
            improve: ImproveConfig::for_method(method),
            runs: 10,
            bootstrap: BootstrapSettings {
                b: 500,
                wdr_b: 500,
                ..BootstrapSettings::default()
            },
            ope: OpeSettings {
                mb_rollouts: 1000,
                ..OpeSettings::default()
            },
            ..Self::default()
        }
    }

    pub fn method(&self) -> Method {
        self.improve.method
    }

    pub fn n_test(&self) -> usize {
        self.n_per_iteration - self.n_train
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        let bad = |msg: String| Err(HarnessError::Config(msg));
        if self.n_train > self.n_per_iteration {
            return bad(format!(
                "n_train {} exceeds n_per_iteration {}",
                self.n_train, self.n_per_iteration
            ));
        }
        if self.n_per_iteration == 0 {
            return bad("n_per_iteration must be positive".to_string());
        }
        if self.n_train == 0 {
            return bad("n_train must be positive: training needs data".to_string());
        }
        if self.runs == 0 {
            return bad("runs must be >= 1".to_string());
        }
        if self.max_iterations == 0 {
            return bad("max_iterations must be >= 1".to_string());
        }
        if let Some(gate) = self.gating_estimator {
            if !self.estimators.contains(&gate) {
                return bad(format!(
                    "gating estimator {gate} is not in the estimator list"
                ));
            }
        }
        if self.bootstrap.b < 2 || self.bootstrap.wdr_b < 2 {
            return bad("bootstrap B must be >= 2".to_string());
        }
        if !(self.bootstrap.delta > 0.0 && self.bootstrap.delta < 1.0) {
            return bad(format!(
                "delta must lie in (0, 1), got {}",
                self.bootstrap.delta
            ));
        }
        if self.ope.bins_per_dim == 0 {
            return bad("bins_per_dim must be positive".to_string());
        }
        if self.ope.mb_rollouts == 0 {
            return bad("mb_rollouts must be positive".to_string());
        }
        self.improve
            .validate()
            .map_err(|e| HarnessError::Config(e.to_string()))?;
        self.env
            .validate()
            .map_err(|e| HarnessError::Config(e.to_string()))?;
        Ok(())
    }

    fn bootstrap_config_for(&self, kind: EstimatorKind, seed: u64) -> BootstrapConfig {
        BootstrapConfig {
            b: match kind {
                EstimatorKind::Wdr => self.bootstrap.wdr_b,
                _ => self.bootstrap.b,
            },
            delta: self.bootstrap.delta,
            method: self
                .bootstrap
                .method_override
                .unwrap_or_else(|| kind.default_bound_method()),
            seed,
        }
    }
}

/// Everything an evaluator may condition on within one iteration.
pub struct EvalContext<'a> {
    pub iteration: usize,
    pub vb_hat: f64,
    pub policy: &'a dyn DiscretePolicy,
    pub cfg: &'a ExperimentConfig,
    /// Derived stream seed unique to (run, iteration, estimator).
    pub seed: u64,
}

/// One safety evaluation per iteration. Implemented by the standard
/// bootstrap pipelines; tests inject custom ones to drive the control flow.
pub trait IterationEvaluator: Sync {
    fn name(&self) -> String;

    fn evaluate(
        &self,
        test: &Dataset,
        ctx: &EvalContext<'_>,
    ) -> Result<LowerBoundReport, BootstrapError>;
}

/// Builds the full estimation pipeline for `kind` as a bootstrap statistic:
/// the behavior policy and the model are fit on whatever dataset the closure
/// is handed, so every bootstrap resample re-estimates them.
pub fn standard_estimator<'a>(
    kind: EstimatorKind,
    policy: &'a dyn DiscretePolicy,
    ope: &OpeSettings,
    env: &EnvConfig,
) -> Box<dyn Fn(&Dataset, &mut ChaCha8Rng) -> Result<f64, EstimatorError> + Sync + 'a> {
    let disc = StateDiscretizer::new(ope.bins_per_dim);
    let model_disc = StateDiscretizer::new(ope.model_bins_per_dim);
    let alpha = ope.smoothing_alpha;
    let gamma = ope.gamma;
    let horizon = ope.model_horizon.unwrap_or(env.max_macro_steps as usize);
    let rollouts = ope.mb_rollouts;
    match kind {
        EstimatorKind::Wis => Box::new(move |d, _| {
            let pib = estimate_behavior_policy(d, disc, alpha)?;
            let w = compute_weights(policy, &pib, d)?;
            Ok(crate::ope::wis_estimate(&w, d, gamma)?)
        }),
        EstimatorKind::Mb => Box::new(move |d, rng| {
            let model = build_model(d, model_disc, gamma, horizon)?;
            Ok(mb_estimate(&model, policy, rollouts, rng))
        }),
        EstimatorKind::Wdr => Box::new(move |d, _| {
            let pib = estimate_behavior_policy(d, disc, alpha)?;
            let w = compute_weights(policy, &pib, d)?;
            let model = build_model(d, model_disc, gamma, horizon)?;
            let vf = model_value_functions(&model, policy);
            Ok(crate::ope::wdr_estimate(&w, d, &vf, gamma)?)
        }),
    }
}

/// The standard bootstrap evaluation for one estimator kind.
pub struct StandardEvaluator {
    pub kind: EstimatorKind,
}

impl IterationEvaluator for StandardEvaluator {
    fn name(&self) -> String {
        self.kind.to_string()
    }

    fn evaluate(
        &self,
        test: &Dataset,
        ctx: &EvalContext<'_>,
    ) -> Result<LowerBoundReport, BootstrapError> {
        let estimator = standard_estimator(self.kind, ctx.policy, &ctx.cfg.ope, &ctx.cfg.env);
        let bootstrap_cfg = ctx.cfg.bootstrap_config_for(self.kind, ctx.seed);
        hcope_lower_bound(&*estimator, test, &bootstrap_cfg, &self.name())
    }
}

pub fn standard_evaluators(cfg: &ExperimentConfig) -> Vec<Box<dyn IterationEvaluator>> {
    cfg.estimators
        .iter()
        .map(|&kind| Box::new(StandardEvaluator { kind }) as Box<dyn IterationEvaluator>)
        .collect()
}

/// One iteration's record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationRow {
    /// 1-based iteration index.
    pub iteration: usize,
    /// Seed the iteration's dataset was collected with; distinct per
    /// iteration by construction.
    pub dataset_seed: u64,
    pub collection_time: u64,
    pub n_train: usize,
    pub n_test: usize,
    /// Data source value estimate over the full fresh dataset.
    pub vb_hat: f64,
    pub vb_se: f64,
    /// One report per configured estimator, in estimator order. Failed
    /// evaluations are recorded as min-return fallbacks with a note.
    pub reports: Vec<LowerBoundReport>,
    /// Diagnostic only: never read by the control flow.
    pub true_value: Option<f64>,
    pub tv_mean: f64,
    pub tv_total: f64,
    /// True when the gate passed on this iteration.
    pub stopped: bool,
}

/// Record of one full run of the loop.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub run_seed: u64,
    pub method: Method,
    pub estimator_names: Vec<String>,
    pub rows: Vec<IterationRow>,
}

impl RunRecord {
    /// Iteration at which the gate first passed, if it did.
    pub fn stopped_at(&self) -> Option<usize> {
        self.rows.iter().find(|r| r.stopped).map(|r| r.iteration)
    }
}

/// Trains the experiment's data-source policy from the base seed. Shared by
/// every run so the data distribution is one fixed unknown.
pub fn prepare_behavior_policy(cfg: &ExperimentConfig) -> GreedyPolicy {
    let mut rng = stream_rng(cfg.base_seed, &[TAG_BEHAVIOR]);
    make_behavior_policy(&mut rng, cfg.behavior_episodes, &cfg.env)
}

/// Monte Carlo mean undiscounted return of `policy` in the real
/// environment. Diagnostic only — the framework being tested never gets to
/// do this.
pub fn true_value_oracle(
    policy: &dyn DiscretePolicy,
    env: &EnvConfig,
    episodes: usize,
    rng: &mut ChaCha8Rng,
) -> Result<f64, MdpError> {
    let episodes = episodes.max(1);
    let mut total = 0.0;
    for _ in 0..episodes {
        let traj = rollout(policy, env, rng, false)?;
        total += trajectory_return(&traj, 1.0);
    }
    Ok(total / episodes as f64)
}

fn fallback_report(
    name: String,
    test: &Dataset,
    ctx: &EvalContext<'_>,
    error: &BootstrapError,
) -> LowerBoundReport {
    // Safe default: score the policy at the worst observed return so the
    // gate cannot pass off the back of an estimator failure.
    let min_return = test
        .returns(ctx.cfg.ope.gamma)
        .into_iter()
        .fold(f64::INFINITY, f64::min);
    let stats = BootstrapSummary {
        mean: min_return,
        sd: 0.0,
        min: min_return,
        q25: min_return,
        median: min_return,
        q75: min_return,
        max: min_return,
    };
    LowerBoundReport {
        estimator: name,
        point_estimate: min_return,
        lower_bound: min_return,
        method: BoundMethod::Percentile,
        delta: ctx.cfg.bootstrap.delta,
        b: 0,
        seed: ctx.seed,
        n: test.len(),
        stats,
        failed_resamples: 0,
        bca_fallback: false,
        note: Some(format!("fallback to min return: {error}")),
    }
}

/// Runs the loop once with custom evaluators and an optional gate index
/// into them. This is the test seam; [`run_safe_eval`] wires in the
/// standard evaluators and the configured gate.
pub fn run_safe_eval_with(
    cfg: &ExperimentConfig,
    run_seed: u64,
    behavior: &dyn DiscretePolicy,
    evaluators: &[Box<dyn IterationEvaluator>],
    gate: Option<usize>,
) -> Result<RunRecord, HarnessError> {
    if let Some(g) = gate {
        if g >= evaluators.len() {
            return Err(HarnessError::Config(format!(
                "gate index {g} out of range for {} evaluators",
                evaluators.len()
            )));
        }
    }
    let mut improve_cfg = cfg.improve.clone();
    improve_cfg.seed = derive_seed(run_seed, &[TAG_IMPROVE]);

    let mut improver: Option<ImproverState> = None;
    let mut rows = Vec::new();
    let mut passed_before = false;

    for iteration in 1..=cfg.max_iterations {
        let dataset_seed = derive_seed(run_seed, &[TAG_COLLECT, iteration as u64]);
        let d = collect(
            behavior,
            cfg.n_per_iteration,
            &cfg.env,
            dataset_seed,
            iteration as u64,
            "behavior-q",
        )?;
        let (vb_hat, vb_se) = behavior_value_stats(&d)?;
        let (train, test) = split(
            &d,
            &SplitSpec {
                n_train: cfg.n_train,
                shuffle_seed: derive_seed(run_seed, &[TAG_SPLIT, iteration as u64]),
            },
        )?;

        let (next_state, policy) = improve(&train, &improve_cfg, improver.take())?;
        improver = Some(next_state);

        let disc = StateDiscretizer::new(cfg.ope.bins_per_dim);
        let pib_hat = estimate_behavior_policy(&test, disc, cfg.ope.smoothing_alpha)?;
        let tv = tv_distance(&pib_hat, &policy, &test)?;

        let true_value = if cfg.true_value_episodes > 0 {
            let mut rng =
                stream_rng(derive_seed(run_seed, &[TAG_ORACLE, iteration as u64]), &[]);
            Some(true_value_oracle(
                &policy,
                &cfg.env,
                cfg.true_value_episodes,
                &mut rng,
            )?)
        } else {
            None
        };

        let mut reports = Vec::with_capacity(evaluators.len());
        for (e_idx, evaluator) in evaluators.iter().enumerate() {
            let ctx = EvalContext {
                iteration,
                vb_hat,
                policy: &policy,
                cfg,
                seed: derive_seed(run_seed, &[TAG_EVAL, iteration as u64, e_idx as u64]),
            };
            let report = evaluator
                .evaluate(&test, &ctx)
                .unwrap_or_else(|e| fallback_report(evaluator.name(), &test, &ctx, &e));
            reports.push(report);
        }

        let gate_passes = gate
            .map(|g| reports[g].lower_bound > vb_hat)
            .unwrap_or(false);
        let stopped = gate_passes && !passed_before;

        rows.push(IterationRow {
            iteration,
            dataset_seed,
            collection_time: iteration as u64,
            n_train: train.len(),
            n_test: test.len(),
            vb_hat,
            vb_se,
            reports,
            true_value,
            tv_mean: tv.mean,
            tv_total: tv.total,
            stopped,
        });

        if gate_passes {
            passed_before = true;
            if !cfg.continue_after_pass {
                break;
            }
        }
    }

    Ok(RunRecord {
        run_seed,
        method: cfg.method(),
        estimator_names: evaluators.iter().map(|e| e.name()).collect(),
        rows,
    })
}

/// One run of the safe-evaluation loop with the configured estimators and
/// gate.
pub fn run_safe_eval(cfg: &ExperimentConfig, run_seed: u64) -> Result<RunRecord, HarnessError> {
    cfg.validate()?;
    let behavior = prepare_behavior_policy(cfg);
    let evaluators = standard_evaluators(cfg);
    let gate = cfg
        .gating_estimator
        .map(|g| cfg.estimators.iter().position(|&e| e == g).expect("validated"));
    run_safe_eval_with(cfg, run_seed, &behavior, &evaluators, gate)
}

/// All runs of the configured experiment, in parallel over derived seeds.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<Vec<RunRecord>, HarnessError> {
    use rayon::prelude::*;
    cfg.validate()?;
    let behavior = prepare_behavior_policy(cfg);
    let evaluators = standard_evaluators(cfg);
    let gate = cfg
        .gating_estimator
        .map(|g| cfg.estimators.iter().position(|&e| e == g).expect("validated"));
    (0..cfg.runs)
        .into_par_iter()
        .map(|run| {
            let run_seed = derive_seed(cfg.base_seed, &[TAG_RUN, run as u64]);
            run_safe_eval_with(cfg, run_seed, &behavior, &evaluators, gate)
        })
        .collect()
}

// ── Aggregation ─────────────────────────────────────────────────────────

/// Mean with its standard error (`sd/√runs`); the SE is absent for a single
/// run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanSe {
    pub mean: f64,
    pub se: Option<f64>,
}

fn mean_se(values: &[f64]) -> MeanSe {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let se = if values.len() < 2 {
        None
    } else {
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
        Some((var / n).sqrt())
    };
    MeanSe { mean, se }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimatorAggregate {
    pub name: String,
    pub lower_bound: MeanSe,
    pub point_estimate: MeanSe,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationAggregate {
    pub iteration: usize,
    /// Runs whose value at this iteration is carried forward from an
    /// earlier stop.
    pub carried_runs: usize,
    pub vb_hat: MeanSe,
    pub true_value: Option<MeanSe>,
    pub tv_mean: MeanSe,
    pub estimators: Vec<EstimatorAggregate>,
}

/// Per-run padded rows plus per-iteration aggregates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateTable {
    pub method: Method,
    pub estimators: Vec<String>,
    pub max_iterations: usize,
    pub runs: usize,
    pub rows: Vec<output::CsvRow>,
    pub iterations: Vec<IterationAggregate>,
}

/// Aligns runs by iteration index, carrying each early-stopped run's last
/// row forward (flagged), and computes per-iteration means and standard
/// errors of every numeric series.
pub fn aggregate(
    records: &[RunRecord],
    max_iterations: usize,
) -> Result<AggregateTable, HarnessError> {
    let first = records
        .first()
        .ok_or_else(|| HarnessError::MixedRecords("no records".to_string()))?;
    for r in records {
        if r.method != first.method {
            return Err(HarnessError::MixedRecords(format!(
                "methods differ: {} vs {}",
                r.method, first.method
            )));
        }
        if r.estimator_names != first.estimator_names {
            return Err(HarnessError::MixedRecords(
                "estimator lists differ".to_string(),
            ));
        }
        if r.rows.is_empty() {
            return Err(HarnessError::MixedRecords("empty run record".to_string()));
        }
        if r.rows.len() > max_iterations {
            return Err(HarnessError::MixedRecords(format!(
                "run has {} rows, more than max_iterations {}",
                r.rows.len(),
                max_iterations
            )));
        }
    }

    let estimators = first.estimator_names.clone();
    let mut rows = Vec::new();
    let mut iterations = Vec::with_capacity(max_iterations);

    for iter_idx in 1..=max_iterations {
        let mut carried_runs = 0;
        let mut vb = Vec::new();
        let mut tv = Vec::new();
        let mut truth: Vec<f64> = Vec::new();
        let mut lbs: Vec<Vec<f64>> = vec![Vec::new(); estimators.len()];
        let mut points: Vec<Vec<f64>> = vec![Vec::new(); estimators.len()];

        for (run, record) in records.iter().enumerate() {
            let (row, carried) = match record.rows.iter().find(|r| r.iteration == iter_idx) {
                Some(row) => (row, false),
                None => (record.rows.last().expect("nonempty"), true),
            };
            if carried {
                carried_runs += 1;
            }
            vb.push(row.vb_hat);
            tv.push(row.tv_mean);
            if let Some(t) = row.true_value {
                truth.push(t);
            }
            for (e, report) in row.reports.iter().enumerate() {
                lbs[e].push(report.lower_bound);
                points[e].push(report.point_estimate);
            }
            rows.extend(output::csv_rows_for(
                run,
                iter_idx,
                record.method,
                row,
                carried,
            ));
        }

        iterations.push(IterationAggregate {
            iteration: iter_idx,
            carried_runs,
            vb_hat: mean_se(&vb),
            true_value: (truth.len() == records.len()).then(|| mean_se(&truth)),
            tv_mean: mean_se(&tv),
            estimators: estimators
                .iter()
                .enumerate()
                .map(|(e, name)| EstimatorAggregate {
                    name: name.clone(),
                    lower_bound: mean_se(&lbs[e]),
                    point_estimate: mean_se(&points[e]),
                })
                .collect(),
        });
    }

    Ok(AggregateTable {
        method: first.method,
        estimators,
        max_iterations,
        runs: records.len(),
        rows,
        iterations,
    })
}


#[cfg(test)]
mod tests {
    use super::*;
    use crate::mdp::State;

    fn tiny_cfg() -> ExperimentConfig {
        ExperimentConfig {
            improve: ImproveConfig {
                updates_per_iteration: 20,
                ..ImproveConfig::for_method(Method::Ddqn)
            },
            estimators: vec![EstimatorKind::Mb],
            gating_estimator: Some(EstimatorKind::Mb),
            bootstrap: BootstrapSettings {
                b: 16,
                wdr_b: 16,
                ..BootstrapSettings::default()
            },
            ope: OpeSettings {
                mb_rollouts: 50,
                ..OpeSettings::default()
            },
            n_per_iteration: 12,
            n_train: 4,
            max_iterations: 3,
            runs: 2,
            base_seed: 5,
            env: EnvConfig {
                max_macro_steps: 25,
                ..EnvConfig::default()
            },
            behavior_episodes: 5,
            true_value_episodes: 10,
            continue_after_pass: false,
            output_dir: None,
        }
    }

    struct ConstantEvaluator {
        name: &'static str,
        value: f64,
    }

    impl IterationEvaluator for ConstantEvaluator {
        fn name(&self) -> String {
            self.name.to_string()
        }

        fn evaluate(
            &self,
            test: &Dataset,
            ctx: &EvalContext<'_>,
        ) -> Result<LowerBoundReport, BootstrapError> {
            let value = self.value;
            let constant = move |_: &Dataset, _: &mut ChaCha8Rng| Ok(value);
            let cfg = BootstrapConfig {
                b: 8,
                delta: ctx.cfg.bootstrap.delta,
                method: BoundMethod::Percentile,
                seed: ctx.seed,
            };
            hcope_lower_bound(&constant, test, &cfg, self.name)
        }
    }

    /// Lower bound pinned just above the data value: passes immediately.
    struct AlwaysPass;

    impl IterationEvaluator for AlwaysPass {
        fn name(&self) -> String {
            "always-pass".to_string()
        }

        fn evaluate(
            &self,
            test: &Dataset,
            ctx: &EvalContext<'_>,
        ) -> Result<LowerBoundReport, BootstrapError> {
            ConstantEvaluator {
                name: "always-pass",
                value: ctx.vb_hat + 1.0,
            }
            .evaluate(test, ctx)
        }
    }

    #[test]
    fn config_validation_catches_bad_gates_and_splits() {
        let mut cfg = tiny_cfg();
        cfg.gating_estimator = Some(EstimatorKind::Wdr);
        assert!(matches!(cfg.validate(), Err(HarnessError::Config(_))));

        let mut cfg = tiny_cfg();
        cfg.n_train = cfg.n_per_iteration + 1;
        assert!(matches!(cfg.validate(), Err(HarnessError::Config(_))));
    }

    #[test]
    fn always_pass_stops_at_iteration_one() {
        let cfg = tiny_cfg();
        let behavior = prepare_behavior_policy(&cfg);
        let evaluators: Vec<Box<dyn IterationEvaluator>> = vec![Box::new(AlwaysPass)];
        let record = run_safe_eval_with(&cfg, 99, &behavior, &evaluators, Some(0)).unwrap();
        assert_eq!(record.rows.len(), 1);
        assert_eq!(record.stopped_at(), Some(1));
        assert!(record.rows[0].stopped);
    }

    #[test]
    fn never_pass_runs_all_iterations_with_distinct_seeds() {
        let cfg = tiny_cfg();
        let behavior = prepare_behavior_policy(&cfg);
        let evaluators: Vec<Box<dyn IterationEvaluator>> = vec![Box::new(ConstantEvaluator {
            name: "never-pass",
            value: -1e18,
        })];
        let record = run_safe_eval_with(&cfg, 7, &behavior, &evaluators, Some(0)).unwrap();
        assert_eq!(record.rows.len(), cfg.max_iterations);
        assert_eq!(record.stopped_at(), None);

        let mut seeds: Vec<u64> = record.rows.iter().map(|r| r.dataset_seed).collect();
        seeds.sort_unstable();
        seeds.dedup();
        assert_eq!(seeds.len(), cfg.max_iterations, "dataset seeds must differ");
    }

    #[test]
    fn continue_after_pass_records_the_first_pass_only() {
        let mut cfg = tiny_cfg();
        cfg.continue_after_pass = true;
        let behavior = prepare_behavior_policy(&cfg);
        let evaluators: Vec<Box<dyn IterationEvaluator>> = vec![Box::new(AlwaysPass)];
        let record = run_safe_eval_with(&cfg, 3, &behavior, &evaluators, Some(0)).unwrap();
        assert_eq!(record.rows.len(), cfg.max_iterations);
        let stops: Vec<bool> = record.rows.iter().map(|r| r.stopped).collect();
        assert_eq!(stops, vec![true, false, false]);
    }

    #[test]
    fn oracle_is_a_pure_diagnostic() {
        // Identical control flow and reports with the oracle on or off.
        let mut with = tiny_cfg();
        with.true_value_episodes = 10;
        let mut without = tiny_cfg();
        without.true_value_episodes = 0;

        let a = run_safe_eval(&with, 11).unwrap();
        let b = run_safe_eval(&without, 11).unwrap();
        assert_eq!(a.rows.len(), b.rows.len());
        for (ra, rb) in a.rows.iter().zip(&b.rows) {
            assert_eq!(ra.stopped, rb.stopped);
            assert_eq!(ra.reports, rb.reports);
            assert!(ra.true_value.is_some());
            assert!(rb.true_value.is_none());
        }
    }

    #[test]
    fn true_value_oracle_matches_data_source_estimate() {
        let env = EnvConfig {
            max_macro_steps: 40,
            ..EnvConfig::default()
        };
        let policy = |_: &State| [0.3, 0.3, 0.4];
        let n = 1000;
        let oracle = true_value_oracle(&policy, &env, n, &mut stream_rng(1, &[])).unwrap();
        let d = collect(&policy, n, &env, 2, 0, "p").unwrap();
        let (mean, se) = behavior_value_stats(&d).unwrap();
        // Two independent Monte Carlo estimates of the same value.
        assert!(
            (oracle - mean).abs() < 2.0 * se * 2f64.sqrt(),
            "oracle {oracle} vs dataset mean {mean} (se {se})"
        );
    }

    #[test]
    fn runs_are_deterministic_given_seed() {
        let cfg = tiny_cfg();
        let a = run_safe_eval(&cfg, 4).unwrap();
        let b = run_safe_eval(&cfg, 4).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn aggregate_carries_stopped_runs_forward() {
        let cfg = tiny_cfg();
        let behavior = prepare_behavior_policy(&cfg);
        // Run 0 stops at iteration 1; run 1 never stops.
        let evaluators_pass: Vec<Box<dyn IterationEvaluator>> = vec![Box::new(AlwaysPass)];
        let evaluators_fail: Vec<Box<dyn IterationEvaluator>> =
            vec![Box::new(ConstantEvaluator {
                name: "always-pass", // same name so the records aggregate
                value: -1e18,
            })];
        let r0 = run_safe_eval_with(&cfg, 1, &behavior, &evaluators_pass, Some(0)).unwrap();
        let r1 = run_safe_eval_with(&cfg, 2, &behavior, &evaluators_fail, Some(0)).unwrap();

        let table = aggregate(&[r0, r1], cfg.max_iterations).unwrap();
        assert_eq!(table.iterations.len(), 3);
        assert_eq!(table.iterations[0].carried_runs, 0);
        assert_eq!(table.iterations[1].carried_runs, 1);
        assert_eq!(table.iterations[2].carried_runs, 1);
        // 2 runs × 3 iterations × 1 estimator.
        assert_eq!(table.rows.len(), 6);
        let carried = table.rows.iter().filter(|r| r.carried_forward).count();
        assert_eq!(carried, 2);
    }

    #[test]
    fn aggregate_arithmetic_matches_hand_values() {
        let cfg = tiny_cfg();
        let behavior = prepare_behavior_policy(&cfg);
        let ev = |v: f64| -> Vec<Box<dyn IterationEvaluator>> {
            vec![Box::new(ConstantEvaluator {
                name: "const",
                value: v,
            })]
        };
        let r0 = run_safe_eval_with(&cfg, 1, &behavior, &ev(2.0), None).unwrap();
        let r1 = run_safe_eval_with(&cfg, 2, &behavior, &ev(6.0), None).unwrap();
        let table = aggregate(&[r0, r1], cfg.max_iterations).unwrap();
        let first = &table.iterations[0].estimators[0];
        assert_eq!(first.lower_bound.mean, 4.0);
        // SE of {2, 6} is |2-6|/2 = 2.
        assert_eq!(first.lower_bound.se, Some(2.0));

        // A single run reports no SE.
        let r_single = run_safe_eval_with(&cfg, 3, &behavior, &ev(1.0), None).unwrap();
        let table = aggregate(&[r_single], cfg.max_iterations).unwrap();
        assert_eq!(table.iterations[0].estimators[0].lower_bound.se, None);
    }

    #[test]
    fn aggregate_rejects_mixed_records() {
        let cfg = tiny_cfg();
        let behavior = prepare_behavior_policy(&cfg);
        let mut a =
            run_safe_eval_with(&cfg, 1, &behavior, &standard_evaluators(&cfg), None).unwrap();
        let b = run_safe_eval_with(&cfg, 2, &behavior, &standard_evaluators(&cfg), None).unwrap();
        a.method = Method::Bc;
        assert!(matches!(
            aggregate(&[a, b.clone()], cfg.max_iterations),
            Err(HarnessError::MixedRecords(_))
        ));

        let mut c = b.clone();
        c.estimator_names = vec!["other".to_string()];
        assert!(matches!(
            aggregate(&[b, c], cfg.max_iterations),
            Err(HarnessError::MixedRecords(_))
        ));
    }

    #[test]
    fn standard_evaluators_produce_reports() {
        let mut cfg = tiny_cfg();
        cfg.estimators = vec![EstimatorKind::Wis, EstimatorKind::Mb, EstimatorKind::Wdr];
        cfg.gating_estimator = Some(EstimatorKind::Mb);
        cfg.true_value_episodes = 0;
        let record = run_safe_eval(&cfg, 21).unwrap();
        for row in &record.rows {
            assert_eq!(row.reports.len(), 3);
            for report in &row.reports {
                assert!(report.lower_bound.is_finite());
                assert!(
                    report.lower_bound <= report.point_estimate + 1e-9 || report.note.is_some()
                );
            }
        }
    }
}
