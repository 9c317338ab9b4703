//! Offline policy improvement over the linear models.
//!
//! Three learners, one per family:
//!
//! - behavioral cloning (BC): supervised softmax classification of logged
//!   actions — it never reads rewards, so it can at best imitate the data;
//! - double Q-learning (DDQN): TD updates toward a target network, with the
//!   bootstrap action chosen by the online network;
//! - batch-constrained Q-learning (BCQ): the DDQN update with the bootstrap
//!   argmax restricted to actions the (estimated) data-collection policy
//!   takes often enough.
//!
//! Learner state persists across harness iterations: each call to
//! [`improve`] continues training from the prior state on the new batch of
//! data.

use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::Dataset;
use crate::linear::{
    argmax, greedy_policy, LinearError, LinearQ, PolicySnapshot, SoftmaxPolicy, TileCoder,
};
use crate::mdp::{Action, DiscretePolicy, State, NUM_ACTIONS};
use crate::ope::{EstimatedBehaviorPolicy, OpeError, StateDiscretizer};
use crate::rng::{stream_rng, unit_f64};

#[derive(Debug, Error)]
pub enum ImproveError {
    #[error("training set is empty")]
    EmptyTrainSet,

    #[error("training batch is empty")]
    EmptyBatch,

    #[error("no transitions with observed successors in the training set")]
    NoTransitions,

    #[error("prior state was trained with {prior:?}, config says {requested:?}")]
    MethodMismatch { prior: Method, requested: Method },

    #[error("invalid improve config: {0}")]
    BadConfig(String),

    #[error(transparent)]
    Linear(#[from] LinearError),

    #[error(transparent)]
    Ope(#[from] OpeError),

    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed checkpoint: {0}")]
    MalformedCheckpoint(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Bc,
    Ddqn,
    Bcq,
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Method::Bc => write!(f, "bc"),
            Method::Ddqn => write!(f, "ddqn"),
            Method::Bcq => write!(f, "bcq"),
        }
    }
}

impl std::str::FromStr for Method {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "bc" => Ok(Method::Bc),
            "ddqn" => Ok(Method::Ddqn),
            "bcq" => Ok(Method::Bcq),
            other => Err(format!("unknown method {other:?}, expected bc|ddqn|bcq")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImproveConfig {
    pub method: Method,
    /// Gradient steps per [`improve`] call.
    pub updates_per_iteration: usize,
    pub learning_rate: f64,
    pub gamma: f64,
    /// Updates between target-network syncs (DDQN/BCQ).
    pub target_sync_interval: usize,
    /// BCQ action filter: keep actions with
    /// `π̂_b(a|s) / max_a' π̂_b(a'|s) >= bcq_threshold`.
    pub bcq_threshold: f64,
    pub batch_size: usize,
    pub seed: u64,
    /// Uniform mass mixed into the exported greedy policy (DDQN/BCQ) so
    /// importance ratios against it stay well-defined.
    pub soften: f64,
}

impl ImproveConfig {
    /// Tuned per-method defaults. Gradients are batch means, so the step
    /// size is scaled for batch_size 32.
    ///
    /// DDQN/BCQ export an unsoftened greedy policy: mixing uniform noise
    /// into the evaluated policy only degrades it, and the importance
    /// estimators already handle zero overlap explicitly.
    pub fn for_method(method: Method) -> Self {
        let base = Self {
            method,
            updates_per_iteration: 2_000,
            learning_rate: 0.25,
            gamma: 1.0,
            target_sync_interval: 100,
            bcq_threshold: 0.3,
            batch_size: 32,
            seed: 0,
            soften: 0.0,
        };
        match method {
            Method::Bc => Self {
                learning_rate: 0.5,
                ..base
            },
            Method::Ddqn | Method::Bcq => base,
        }
    }

    pub fn validate(&self) -> Result<(), ImproveError> {
        let bad = |msg: &str| Err(ImproveError::BadConfig(msg.to_string()));
        if self.learning_rate <= 0.0 {
            return bad("learning_rate must be positive");
        }
        if !(0.0..=1.0).contains(&self.gamma) {
            return bad("gamma must lie in [0, 1]");
        }
        if self.target_sync_interval == 0 {
            return bad("target_sync_interval must be positive");
        }
        if !(0.0..=1.0).contains(&self.bcq_threshold) {
            return bad("bcq_threshold must lie in [0, 1]");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive");
        }
        if !(0.0..1.0).contains(&self.soften) {
            return bad("soften must lie in [0, 1)");
        }
        Ok(())
    }
}

/// A logged (state, action) pair — all BC needs.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LabeledState {
    pub state: State,
    pub action: Action,
}

/// A logged transition with an observed successor.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Transition {
    pub state: State,
    pub action: Action,
    pub reward: f64,
    pub next_state: State,
    pub done: bool,
}

/// Persistent learner state, carried across iterations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImproverState {
    pub method: Method,
    pub coder: TileCoder,
    /// Q weights for DDQN/BCQ, classifier logits for BC.
    pub online: LinearQ,
    /// Stale copy of `online` used for bootstrap targets (DDQN/BCQ).
    pub target: LinearQ,
    pub update_counter: u64,
    rng: ChaCha8Rng,
    bcq_disc: StateDiscretizer,
    bcq_counts: Vec<u32>,
}

impl ImproverState {
    pub fn new(method: Method, coder: TileCoder, seed: u64) -> Self {
        let online = LinearQ::zeros(coder.feature_count());
        let bcq_disc = StateDiscretizer::default();
        Self {
            method,
            target: online.clone(),
            online,
            coder,
            update_counter: 0,
            rng: stream_rng(seed, &[]),
            bcq_disc,
            bcq_counts: vec![0; StateDiscretizer::default().num_cells() * NUM_ACTIONS],
        }
    }

    fn sync_target_if_due(&mut self, interval: usize) {
        if self.update_counter % interval as u64 == 0 {
            self.target = self.online.clone();
        }
    }

    /// The count-based behavior estimate BCQ masks with, over everything
    /// this learner has seen so far.
    pub fn bcq_behavior_policy(&self) -> Result<EstimatedBehaviorPolicy, ImproveError> {
        Ok(EstimatedBehaviorPolicy::from_counts(
            self.bcq_disc,
            self.bcq_counts.clone(),
            1.0,
        )?)
    }
}

// ── Losses and gradients ────────────────────────────────────────────────

/// Mean cross-entropy of the softmax classifier against logged actions.
pub fn bc_loss(classifier: &LinearQ, coder: &TileCoder, batch: &[LabeledState]) -> f64 {
    let mut total = 0.0;
    for sample in batch {
        let logits = classifier.q_from_features(&coder.features(&sample.state));
        let max = logits[argmax(&logits)];
        let log_z = (0..NUM_ACTIONS)
            .map(|a| (logits[a] - max).exp())
            .sum::<f64>()
            .ln()
            + max;
        total += log_z - logits[sample.action.index()];
    }
    total / batch.len() as f64
}

/// Mean cross-entropy gradient, flattened `(NUM_ACTIONS, feature_count)`.
pub fn bc_gradient(classifier: &LinearQ, coder: &TileCoder, batch: &[LabeledState]) -> Vec<f64> {
    let mut grad = vec![0.0; NUM_ACTIONS * classifier.feature_count()];
    let scale = 1.0 / batch.len() as f64;
    for sample in batch {
        let features = coder.features(&sample.state);
        let logits = classifier.q_from_features(&features);
        let probs = crate::linear::mixed_softmax(&logits, 1.0, 0.0);
        for a in 0..NUM_ACTIONS {
            let residual = probs[a] - if a == sample.action.index() { 1.0 } else { 0.0 };
            for &f in &features {
                grad[a * classifier.feature_count() + f as usize] += scale * residual;
            }
        }
    }
    grad
}

/// Half mean squared TD error against fixed per-sample targets.
pub fn td_loss(
    online: &LinearQ,
    coder: &TileCoder,
    batch: &[Transition],
    targets: &[f64],
) -> f64 {
    let mut total = 0.0;
    for (sample, &y) in batch.iter().zip(targets) {
        let q = online.q_from_features(&coder.features(&sample.state));
        total += 0.5 * (q[sample.action.index()] - y).powi(2);
    }
    total / batch.len() as f64
}

/// Gradient of [`td_loss`], flattened `(NUM_ACTIONS, feature_count)`.
pub fn td_gradient(
    online: &LinearQ,
    coder: &TileCoder,
    batch: &[Transition],
    targets: &[f64],
) -> Vec<f64> {
    let mut grad = vec![0.0; NUM_ACTIONS * online.feature_count()];
    let scale = 1.0 / batch.len() as f64;
    for (sample, &y) in batch.iter().zip(targets) {
        let features = coder.features(&sample.state);
        let q = online.q_from_features(&features);
        let delta = q[sample.action.index()] - y;
        for &f in &features {
            grad[sample.action.index() * online.feature_count() + f as usize] +=
                scale * delta;
        }
    }
    grad
}

fn apply_gradient(weights: &mut LinearQ, grad: &[f64], learning_rate: f64) {
    let feature_count = weights.feature_count();
    for a in 0..NUM_ACTIONS {
        for f in 0..feature_count {
            let g = grad[a * feature_count + f];
            if g != 0.0 {
                *weights.weight_mut(a, f) -= learning_rate * g;
            }
        }
    }
}

fn argmax_masked(values: &[f64; 3], mask: &[bool; 3]) -> usize {
    let mut best = usize::MAX;
    for a in 0..NUM_ACTIONS {
        if mask[a] && (best == usize::MAX || values[a] > values[best]) {
            best = a;
        }
    }
    assert!(best != usize::MAX, "action mask must never be empty");
    best
}

/// Bootstrap targets `y = r + γ Q_target(s', argmax_masked Q_online(s'))`,
/// or `y = r` on terminal transitions.
fn bootstrap_targets(
    state: &ImproverState,
    batch: &[Transition],
    gamma: f64,
    mask_for: impl Fn(&State) -> [bool; 3],
) -> Vec<f64> {
    batch
        .iter()
        .map(|tr| {
            if tr.done {
                tr.reward
            } else {
                let features = state.coder.features(&tr.next_state);
                let online_q = state.online.q_from_features(&features);
                let best = argmax_masked(&online_q, &mask_for(&tr.next_state));
                tr.reward + gamma * state.target.q_from_features(&features)[best]
            }
        })
        .collect()
}

// ── Update steps ────────────────────────────────────────────────────────

/// One supervised step minimizing cross-entropy on the batch.
pub fn bc_update(
    mut state: ImproverState,
    batch: &[LabeledState],
    cfg: &ImproveConfig,
) -> Result<ImproverState, ImproveError> {
    if batch.is_empty() {
        return Err(ImproveError::EmptyBatch);
    }
    let grad = bc_gradient(&state.online, &state.coder, batch);
    apply_gradient(&mut state.online, &grad, cfg.learning_rate);
    state.update_counter += 1;
    Ok(state)
}

fn td_update(
    mut state: ImproverState,
    batch: &[Transition],
    cfg: &ImproveConfig,
    mask_for: impl Fn(&State) -> [bool; 3],
) -> Result<ImproverState, ImproveError> {
    if batch.is_empty() {
        return Err(ImproveError::EmptyBatch);
    }
    let targets = bootstrap_targets(&state, batch, cfg.gamma, mask_for);
    let grad = td_gradient(&state.online, &state.coder, batch, &targets);
    apply_gradient(&mut state.online, &grad, cfg.learning_rate);
    state.update_counter += 1;
    state.sync_target_if_due(cfg.target_sync_interval);
    Ok(state)
}

/// One double-Q TD step on the batch.
pub fn ddqn_update(
    state: ImproverState,
    batch: &[Transition],
    cfg: &ImproveConfig,
) -> Result<ImproverState, ImproveError> {
    td_update(state, batch, cfg, |_| [true; 3])
}

/// Action mask BCQ applies at a successor state.
pub fn bcq_mask(pib_hat: &dyn DiscretePolicy, state: &State, threshold: f64) -> [bool; 3] {
    let probs = pib_hat.probs(state);
    let max = probs[argmax(&probs)];
    let mut mask = [false; 3];
    for a in 0..NUM_ACTIONS {
        mask[a] = probs[a] / max >= threshold;
    }
    mask
}

/// The DDQN step with the bootstrap argmax restricted to sufficiently
/// probable behavior actions. With `bcq_threshold = 0` this is exactly
/// [`ddqn_update`].
pub fn bcq_update(
    state: ImproverState,
    batch: &[Transition],
    pib_hat: &dyn DiscretePolicy,
    cfg: &ImproveConfig,
) -> Result<ImproverState, ImproveError> {
    let threshold = cfg.bcq_threshold;
    td_update(state, batch, cfg, |s| bcq_mask(pib_hat, s, threshold))
}

// ── Dataset-level driver ────────────────────────────────────────────────

/// Flattens a dataset into BC samples (every step).
pub fn labeled_states(train: &Dataset) -> Vec<LabeledState> {
    train
        .trajectories
        .iter()
        .flat_map(|t| t.steps())
        .map(|s| LabeledState {
            state: s.state,
            action: s.action,
        })
        .collect()
}

/// Flattens a dataset into TD transitions. The final step of a
/// horizon-capped trajectory has no observed successor and is dropped; the
/// final step of a terminated trajectory becomes a `done` transition.
pub fn transitions(train: &Dataset) -> Vec<Transition> {
    let mut out = Vec::new();
    for traj in &train.trajectories {
        let steps = traj.steps();
        for (t, step) in steps.iter().enumerate() {
            if t + 1 < steps.len() {
                out.push(Transition {
                    state: step.state,
                    action: step.action,
                    reward: step.reward,
                    next_state: steps[t + 1].state,
                    done: false,
                });
            } else if traj.terminated {
                out.push(Transition {
                    state: step.state,
                    action: step.action,
                    reward: step.reward,
                    next_state: step.state,
                    done: true,
                });
            }
        }
    }
    out
}

fn sample_indices(rng: &mut ChaCha8Rng, len: usize, batch_size: usize) -> Vec<usize> {
    (0..batch_size)
        .map(|_| ((unit_f64(rng) * len as f64) as usize).min(len - 1))
        .collect()
}

/// Runs `updates_per_iteration` steps of the configured method on the
/// training set, continuing from `prior` when given, and exports the
/// evaluation policy: the softmax classifier for BC, the softened greedy
/// head for DDQN/BCQ.
pub fn improve(
    train: &Dataset,
    cfg: &ImproveConfig,
    prior: Option<ImproverState>,
) -> Result<(ImproverState, PolicySnapshot), ImproveError> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(ImproveError::EmptyTrainSet);
    }
    let mut state = match prior {
        Some(prior) => {
            if prior.method != cfg.method {
                return Err(ImproveError::MethodMismatch {
                    prior: prior.method,
                    requested: cfg.method,
                });
            }
            prior
        }
        None => ImproverState::new(cfg.method, TileCoder::default(), cfg.seed),
    };

    match cfg.method {
        Method::Bc => {
            let samples = labeled_states(train);
            for _ in 0..cfg.updates_per_iteration {
                let batch: Vec<LabeledState> =
                    sample_indices(&mut state.rng, samples.len(), cfg.batch_size)
                        .into_iter()
                        .map(|i| samples[i])
                        .collect();
                state = bc_update(state, &batch, cfg)?;
            }
        }
        Method::Ddqn | Method::Bcq => {
            let samples = transitions(train);
            if samples.is_empty() {
                return Err(ImproveError::NoTransitions);
            }
            let pib_hat = if cfg.method == Method::Bcq {
                for tr in &samples {
                    state.bcq_counts
                        [state.bcq_disc.cell_index(&tr.state) * NUM_ACTIONS + tr.action.index()] +=
                        1;
                }
                Some(state.bcq_behavior_policy()?)
            } else {
                None
            };
            for _ in 0..cfg.updates_per_iteration {
                let batch: Vec<Transition> =
                    sample_indices(&mut state.rng, samples.len(), cfg.batch_size)
                        .into_iter()
                        .map(|i| samples[i])
                        .collect();
                state = match &pib_hat {
                    Some(pib) => bcq_update(state, &batch, pib, cfg)?,
                    None => ddqn_update(state, &batch, cfg)?,
                };
            }
        }
    }

    let exported = export_policy(&state, cfg)?;
    Ok((state, exported))
}

/// The evaluation policy implied by the current learner state.
pub fn export_policy(
    state: &ImproverState,
    cfg: &ImproveConfig,
) -> Result<PolicySnapshot, ImproveError> {
    Ok(match state.method {
        Method::Bc => PolicySnapshot::Softmax(SoftmaxPolicy::new(
            state.online.clone(),
            state.coder.clone(),
            1.0,
            0.0,
        )?),
        Method::Ddqn | Method::Bcq => PolicySnapshot::Greedy(greedy_policy(
            state.online.clone(),
            state.coder.clone(),
            cfg.soften,
        )?),
    })
}

// ── Checkpoints ─────────────────────────────────────────────────────────

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointHeader {
    update_counter: u64,
    method: Method,
    config: ImproveConfig,
}

/// Writes a checkpoint: `{update_counter, method, config}` header, the
/// exported policy in the snapshot format, then the full resumable state.
pub fn write_checkpoint(
    path: &Path,
    state: &ImproverState,
    cfg: &ImproveConfig,
) -> Result<(), ImproveError> {
    let io_err = |source| ImproveError::Io {
        path: path.display().to_string(),
        source,
    };
    let header = serde_json::to_string(&CheckpointHeader {
        update_counter: state.update_counter,
        method: state.method,
        config: cfg.clone(),
    })
    .expect("header serializes");
    let snapshot = export_policy(state, cfg)?;
    crate::linear::write_snapshot_with_prefix(path, &[header], &snapshot)?;

    let state_json = serde_json::to_string(state).expect("state serializes");
    let mut file = std::fs::OpenOptions::new()
        .append(true)
        .open(path)
        .map_err(io_err)?;
    writeln!(file, "{state_json}").map_err(io_err)?;
    Ok(())
}

/// Reads back a checkpoint: the config it was written with, the exported
/// policy, and the resumable state.
pub fn read_checkpoint(
    path: &Path,
) -> Result<(ImproveConfig, PolicySnapshot, ImproverState), ImproveError> {
    let io_err = |source| ImproveError::Io {
        path: path.display().to_string(),
        source,
    };
    let file = File::open(path).map_err(io_err)?;
    let lines: Vec<String> = BufReader::new(file)
        .lines()
        .collect::<Result<_, _>>()
        .map_err(io_err)?;
    if lines.len() < 6 {
        return Err(ImproveError::MalformedCheckpoint(format!(
            "expected 6 lines, found {}",
            lines.len()
        )));
    }
    let header: CheckpointHeader = serde_json::from_str(&lines[0])
        .map_err(|e| ImproveError::MalformedCheckpoint(e.to_string()))?;
    let snapshot = crate::linear::snapshot_from_lines(lines[1..5].iter().cloned(), 2)?;
    let state: ImproverState = serde_json::from_str(&lines[5])
        .map_err(|e| ImproveError::MalformedCheckpoint(e.to_string()))?;
    if state.update_counter != header.update_counter {
        return Err(ImproveError::MalformedCheckpoint(
            "header and state disagree on update_counter".to_string(),
        ));
    }
    Ok((header.config, snapshot, state))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::collect;
    use crate::mdp::EnvConfig;

    fn tiny_config(method: Method) -> ImproveConfig {
        ImproveConfig {
            updates_per_iteration: 50,
            ..ImproveConfig::for_method(method)
        }
    }

    fn small_dataset(seed: u64) -> Dataset {
        let env = EnvConfig {
            max_macro_steps: 40,
            ..EnvConfig::default()
        };
        let policy = |_: &State| [0.25, 0.25, 0.5];
        collect(&policy, 10, &env, seed, 0, "t").unwrap()
    }

    fn state_at(p: f64) -> State {
        State::new(p, 0.0).unwrap()
    }

    #[test]
    fn ddqn_target_formula() {
        let coder = TileCoder::new(1, 8).unwrap();
        let mut state = ImproverState::new(Method::Ddqn, coder.clone(), 0);
        let s_next = state_at(0.2);
        let f_next = coder.features(&s_next);
        // Online prefers action 2 at s'; target values it at -5.
        *state.online.weight_mut(2, f_next[0] as usize) = 1.0;
        state.target = state.online.clone();
        *state.target.weight_mut(2, f_next[0] as usize) = -5.0;

        let batch = [Transition {
            state: state_at(-1.0),
            action: Action::Left,
            reward: -1.0,
            next_state: s_next,
            done: false,
        }];
        let targets = bootstrap_targets(&state, &batch, 1.0, |_| [true; 3]);
        assert_eq!(targets, vec![-6.0]);

        // Terminal transitions ignore the target network entirely.
        let batch = [Transition {
            done: true,
            reward: 0.0,
            ..batch[0]
        }];
        let targets = bootstrap_targets(&state, &batch, 1.0, |_| [true; 3]);
        assert_eq!(targets, vec![0.0]);
    }

    #[test]
    fn bcq_mask_arithmetic() {
        let pib = |_: &State| [0.7, 0.25, 0.05];
        let mask = bcq_mask(&pib, &state_at(0.0), 0.3);
        assert_eq!(mask, [true, true, false]);
        // Threshold 0 admits everything; threshold 1 keeps only the mode.
        assert_eq!(bcq_mask(&pib, &state_at(0.0), 0.0), [true; 3]);
        assert_eq!(bcq_mask(&pib, &state_at(0.0), 1.0), [true, false, false]);
    }

    #[test]
    fn bc_converges_on_degenerate_labels() {
        // Every state maps to action 2.
        let env = EnvConfig {
            max_macro_steps: 30,
            ..EnvConfig::default()
        };
        let right = |_: &State| [0.0, 0.0, 1.0];
        let d = collect(&right, 8, &env, 3, 0, "right").unwrap();
        let cfg = ImproveConfig {
            updates_per_iteration: 4000,
            learning_rate: 0.5 / 8.0,
            ..ImproveConfig::for_method(Method::Bc)
        };
        let (_, policy) = improve(&d, &cfg, None).unwrap();
        for traj in &d.trajectories {
            for step in traj.steps() {
                assert!(policy.probs(&step.state)[2] > 0.95);
            }
        }
    }

    #[test]
    fn bc_steps_descend_the_loss() {
        let mut rng = stream_rng(17, &[]);
        let coder = TileCoder::new(2, 4).unwrap();
        for _ in 0..100 {
            let mut state = ImproverState::new(Method::Bc, coder.clone(), 1);
            for a in 0..NUM_ACTIONS {
                for f in 0..coder.feature_count() {
                    *state.online.weight_mut(a, f) = unit_f64(&mut rng) - 0.5;
                }
            }
            let batch: Vec<LabeledState> = (0..8)
                .map(|_| LabeledState {
                    state: state_at(unit_f64(&mut rng) * 1.7 - 1.2),
                    action: Action::from_index((unit_f64(&mut rng) * 3.0) as u8)
                        .unwrap_or(Action::Right),
                })
                .collect();
            let cfg = ImproveConfig {
                learning_rate: 1e-3,
                ..ImproveConfig::for_method(Method::Bc)
            };
            let before = bc_loss(&state.online, &coder, &batch);
            let state = bc_update(state, &batch, &cfg).unwrap();
            let after = bc_loss(&state.online, &coder, &batch);
            assert!(after <= before + 1e-12, "loss rose: {before} -> {after}");
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = stream_rng(23, &[]);
        let coder = TileCoder::new(2, 3).unwrap();
        let feature_count = coder.feature_count();
        let h = 1e-5;

        for trial in 0..5 {
            let mut weights = LinearQ::zeros(feature_count);
            for a in 0..NUM_ACTIONS {
                for f in 0..feature_count {
                    *weights.weight_mut(a, f) = unit_f64(&mut rng) * 2.0 - 1.0;
                }
            }
            let bc_batch: Vec<LabeledState> = (0..6)
                .map(|_| LabeledState {
                    state: state_at(unit_f64(&mut rng) * 1.7 - 1.2),
                    action: Action::from_index((unit_f64(&mut rng) * 3.0) as u8)
                        .unwrap_or(Action::Right),
                })
                .collect();
            let td_batch: Vec<Transition> = bc_batch
                .iter()
                .map(|s| Transition {
                    state: s.state,
                    action: s.action,
                    reward: -unit_f64(&mut rng),
                    next_state: s.state,
                    done: false,
                })
                .collect();
            let targets: Vec<f64> = td_batch.iter().map(|_| unit_f64(&mut rng) * 4.0 - 2.0).collect();

            let checks: [(Box<dyn Fn(&LinearQ) -> f64>, Vec<f64>); 2] = [
                (
                    Box::new(|w: &LinearQ| bc_loss(w, &coder, &bc_batch)),
                    bc_gradient(&weights, &coder, &bc_batch),
                ),
                (
                    Box::new(|w: &LinearQ| td_loss(w, &coder, &td_batch, &targets)),
                    td_gradient(&weights, &coder, &td_batch, &targets),
                ),
            ];
            for (loss, analytic) in &checks {
                for a in 0..NUM_ACTIONS {
                    for f in 0..feature_count {
                        let mut plus = weights.clone();
                        *plus.weight_mut(a, f) += h;
                        let mut minus = weights.clone();
                        *minus.weight_mut(a, f) -= h;
                        let numeric = (loss(&plus) - loss(&minus)) / (2.0 * h);
                        let exact = analytic[a * feature_count + f];
                        let scale = exact.abs().max(numeric.abs()).max(1e-6);
                        assert!(
                            (numeric - exact).abs() / scale < 1e-4,
                            "trial {trial}: grad mismatch at ({a},{f}): {exact} vs {numeric}"
                        );
                    }
                }
            }
        }
    }

    #[test]
    fn ddqn_reaches_dynamic_programming_values_on_a_chain() {
        // Two states in distinct tiles; left/coast self-loop on s0, right
        // advances to s1, everything from s1 terminates with reward 0.
        let coder = TileCoder::new(1, 8).unwrap();
        let s0 = state_at(-1.0);
        let s1 = state_at(0.2);
        let batch = vec![
            Transition { state: s0, action: Action::Left, reward: -1.0, next_state: s0, done: false },
            Transition { state: s0, action: Action::Coast, reward: -1.0, next_state: s0, done: false },
            Transition { state: s0, action: Action::Right, reward: -1.0, next_state: s1, done: false },
            Transition { state: s1, action: Action::Left, reward: 0.0, next_state: s1, done: true },
            Transition { state: s1, action: Action::Coast, reward: 0.0, next_state: s1, done: true },
            Transition { state: s1, action: Action::Right, reward: 0.0, next_state: s1, done: true },
        ];
        let cfg = ImproveConfig {
            learning_rate: 0.2,
            target_sync_interval: 10,
            gamma: 1.0,
            ..ImproveConfig::for_method(Method::Ddqn)
        };
        let mut state = ImproverState::new(Method::Ddqn, coder.clone(), 0);
        for _ in 0..2000 {
            state = ddqn_update(state, &batch, &cfg).unwrap();
        }

        // Exact values by value iteration on the same chain.
        let mut q = [[0.0f64; 3]; 2];
        for _ in 0..200 {
            let max = |row: [f64; 3]| row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            q = [
                [-1.0 + max(q[0]), -1.0 + max(q[0]), -1.0 + max(q[1])],
                [0.0, 0.0, 0.0],
            ];
        }

        let learned0 = state.online.q_values(&coder, &s0);
        let learned1 = state.online.q_values(&coder, &s1);
        for a in 0..3 {
            assert!(
                (learned0[a] - q[0][a]).abs() < 1e-3,
                "s0 action {a}: {} vs {}",
                learned0[a],
                q[0][a]
            );
            assert!(
                (learned1[a] - q[1][a]).abs() < 1e-3,
                "s1 action {a}: {} vs {}",
                learned1[a],
                q[1][a]
            );
        }
    }

    #[test]
    fn bcq_with_zero_threshold_matches_ddqn_bit_for_bit() {
        let d = small_dataset(5);
        let ddqn_cfg = ImproveConfig {
            updates_per_iteration: 300,
            seed: 42,
            ..ImproveConfig::for_method(Method::Ddqn)
        };
        let bcq_cfg = ImproveConfig {
            method: Method::Bcq,
            bcq_threshold: 0.0,
            ..ddqn_cfg.clone()
        };
        let (ddqn_state, _) = improve(&d, &ddqn_cfg, None).unwrap();
        let (bcq_state, _) = improve(&d, &bcq_cfg, None).unwrap();
        for a in 0..NUM_ACTIONS {
            for f in 0..ddqn_state.online.feature_count() {
                assert_eq!(
                    ddqn_state.online.weight(a, f).to_bits(),
                    bcq_state.online.weight(a, f).to_bits(),
                    "weight ({a},{f}) diverged"
                );
            }
        }
    }

    #[test]
    fn bcq_argmax_respects_the_mask() {
        let pib = |_: &State| [0.05, 0.7, 0.25];
        let mask = bcq_mask(&pib, &state_at(0.0), 0.3);
        assert_eq!(mask, [false, true, true]);
        // Even if action 0 has the best Q, it is excluded.
        let q = [10.0, 1.0, 2.0];
        assert_eq!(argmax_masked(&q, &mask), 2);
    }

    #[test]
    fn zero_updates_returns_prior_unchanged() {
        let d = small_dataset(6);
        let cfg = ImproveConfig {
            updates_per_iteration: 40,
            seed: 9,
            ..ImproveConfig::for_method(Method::Ddqn)
        };
        let (state, _) = improve(&d, &cfg, None).unwrap();
        let frozen = ImproveConfig {
            updates_per_iteration: 0,
            ..cfg
        };
        let (after, _) = improve(&d, &frozen, Some(state.clone())).unwrap();
        assert_eq!(after.online, state.online);
        assert_eq!(after.update_counter, state.update_counter);
    }

    #[test]
    fn bc_never_reads_rewards() {
        // Same trajectories, different rewards: identical BC weights.
        let d = small_dataset(7);
        let mut shifted = d.clone();
        for traj in &mut shifted.trajectories {
            let steps: Vec<_> = traj
                .steps()
                .iter()
                .map(|s| crate::mdp::Step {
                    reward: s.reward * 100.0 - 3.0,
                    ..s.clone()
                })
                .collect();
            *traj = crate::mdp::Trajectory::new(steps, traj.terminated).unwrap();
        }
        let cfg = tiny_config(Method::Bc);
        let (a, _) = improve(&d, &cfg, None).unwrap();
        let (b, _) = improve(&shifted, &cfg, None).unwrap();
        assert_eq!(a.online, b.online);
    }

    #[test]
    fn target_network_is_a_stale_snapshot() {
        let d = small_dataset(8);
        let cfg = ImproveConfig {
            updates_per_iteration: 25,
            target_sync_interval: 10,
            seed: 3,
            ..ImproveConfig::for_method(Method::Ddqn)
        };
        let (state, _) = improve(&d, &cfg, None).unwrap();
        // 25 updates, sync at 10 and 20: target is the online net as of
        // update 20, which differs from the online net at 25.
        assert_ne!(state.target, state.online);
        assert_eq!(state.update_counter, 25);
    }

    #[test]
    fn method_mismatch_is_rejected() {
        let d = small_dataset(9);
        let (state, _) = improve(&d, &tiny_config(Method::Ddqn), None).unwrap();
        let err = improve(&d, &tiny_config(Method::Bc), Some(state));
        assert!(matches!(err, Err(ImproveError::MethodMismatch { .. })));
    }

    #[test]
    fn checkpoint_round_trip_resumes_exactly() {
        let d = small_dataset(10);
        let cfg = ImproveConfig {
            updates_per_iteration: 30,
            seed: 77,
            ..ImproveConfig::for_method(Method::Bcq)
        };
        let (state, _) = improve(&d, &cfg, None).unwrap();

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt.jsonl");
        write_checkpoint(&path, &state, &cfg).unwrap();
        let (read_cfg, _, read_state) = read_checkpoint(&path).unwrap();
        assert_eq!(read_cfg, cfg);
        assert_eq!(read_state, state);

        // Continuing from the file matches continuing in memory, bit for bit.
        let (mem, _) = improve(&d, &cfg, Some(state)).unwrap();
        let (disk, _) = improve(&d, &cfg, Some(read_state)).unwrap();
        assert_eq!(mem, disk);
    }
}
