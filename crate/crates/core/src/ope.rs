//! Off-policy point estimators and diagnostics.
//!
//! Everything here consumes logged trajectories plus a target policy and an
//! *estimated* behavior policy — the true behavior policy is never visible.
//! Four estimators are provided:
//!
//! - weighted importance sampling (WIS) over whole-trajectory ratios,
//! - per-decision weighted importance sampling (PDWIS), which normalizes
//!   cumulative ratios across trajectories at every time step,
//! - model-based (MB): fit a discretized transition/reward model and average
//!   returns of trajectories simulated in it,
//! - weighted doubly-robust (WDR): PDWIS with the model's value functions
//!   subtracted as a control variate.
//!
//! Variable-length trajectories use the absorbing convention: a trajectory
//! shorter than `t` keeps its final cumulative ratio in the per-decision
//! denominator at `t`.

use rand::RngCore;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::Dataset;
use crate::mdp::{
    sample_action, trajectory_return, Action, DiscretePolicy, State, NUM_ACTIONS, POSITION_MAX,
    POSITION_MIN, VELOCITY_MAX, VELOCITY_MIN,
};

/// Sentinel for the absorbing terminal outcome in the estimated model.
pub const TERMINAL_CELL: u32 = u32::MAX;

/// Reward assumed for state-action pairs the data never visited. Matches the
/// per-step penalty of the environment, so unexplored regions look bad
/// rather than good to the simulated policy.
pub const UNVISITED_REWARD: f64 = -1.0;

#[derive(Debug, Error)]
pub enum OpeError {
    #[error("dataset is empty")]
    EmptyDataset,

    #[error(
        "estimated behavior probability is zero at position {position}, velocity {velocity}, \
         action {action}; smoothing should make this impossible"
    )]
    ZeroBehaviorProbability {
        position: f64,
        velocity: f64,
        action: usize,
    },

    #[error("no overlap: every trajectory's final importance ratio is zero")]
    NoOverlap,

    #[error("alpha must be positive, got {0}")]
    BadAlpha(f64),

    #[error("weights were computed for {expected} trajectories, dataset has {got}")]
    WeightShape { expected: usize, got: usize },

    #[error("model distribution for cell {cell}, action {action} sums to {sum}, expected 1")]
    BadModelDistribution { cell: u32, action: usize, sum: f64 },
}

// ── State discretization ────────────────────────────────────────────────

/// Uniform grid over the state box, used as the discrete support for the
/// estimated behavior policy and the estimated model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StateDiscretizer {
    pub bins_per_dim: usize,
}

impl Default for StateDiscretizer {
    fn default() -> Self {
        Self { bins_per_dim: 32 }
    }
}

impl StateDiscretizer {
    pub fn new(bins_per_dim: usize) -> Self {
        assert!(bins_per_dim >= 1);
        Self { bins_per_dim }
    }

    pub fn num_cells(&self) -> usize {
        self.bins_per_dim * self.bins_per_dim
    }

    pub fn cell_index(&self, state: &State) -> usize {
        let bins = self.bins_per_dim as f64;
        let p = state.position.clamp(POSITION_MIN, POSITION_MAX);
        let v = state.velocity.clamp(VELOCITY_MIN, VELOCITY_MAX);
        let bp = (((p - POSITION_MIN) / (POSITION_MAX - POSITION_MIN) * bins) as usize)
            .min(self.bins_per_dim - 1);
        let bv = (((v - VELOCITY_MIN) / (VELOCITY_MAX - VELOCITY_MIN) * bins) as usize)
            .min(self.bins_per_dim - 1);
        bp * self.bins_per_dim + bv
    }

    /// Center of the given cell, used when a policy must be queried for a
    /// discretized state.
    pub fn cell_center(&self, cell: usize) -> State {
        let bins = self.bins_per_dim as f64;
        let bp = (cell / self.bins_per_dim) as f64;
        let bv = (cell % self.bins_per_dim) as f64;
        State::clamped(
            POSITION_MIN + (bp + 0.5) / bins * (POSITION_MAX - POSITION_MIN),
            VELOCITY_MIN + (bv + 0.5) / bins * (VELOCITY_MAX - VELOCITY_MIN),
        )
    }
}

// ── Estimated behavior policy ───────────────────────────────────────────

/// Count-based conditional action distribution over discretized states with
/// additive smoothing. Strictly positive everywhere, so importance ratios
/// stay finite.
#[derive(Debug, Clone, PartialEq)]
pub struct EstimatedBehaviorPolicy {
    disc: StateDiscretizer,
    counts: Vec<u32>,
    alpha: f64,
}

impl EstimatedBehaviorPolicy {
    /// Builds the policy from raw per-(cell, action) counts. `counts` is
    /// row-major over cells.
    pub fn from_counts(
        disc: StateDiscretizer,
        counts: Vec<u32>,
        alpha: f64,
    ) -> Result<Self, OpeError> {
        if alpha <= 0.0 || !alpha.is_finite() {
            return Err(OpeError::BadAlpha(alpha));
        }
        assert_eq!(counts.len(), disc.num_cells() * NUM_ACTIONS);
        Ok(Self { disc, counts, alpha })
    }

    pub fn probs_for_cell(&self, cell: usize) -> [f64; 3] {
        let base = cell * NUM_ACTIONS;
        let total: u32 = self.counts[base..base + NUM_ACTIONS].iter().sum();
        let denom = total as f64 + NUM_ACTIONS as f64 * self.alpha;
        let mut probs = [0.0; 3];
        for (a, p) in probs.iter_mut().enumerate() {
            *p = (self.counts[base + a] as f64 + self.alpha) / denom;
        }
        probs
    }

    pub fn visits(&self, cell: usize) -> u32 {
        let base = cell * NUM_ACTIONS;
        self.counts[base..base + NUM_ACTIONS].iter().sum()
    }

    pub fn discretizer(&self) -> StateDiscretizer {
        self.disc
    }
}

impl DiscretePolicy for EstimatedBehaviorPolicy {
    fn probs(&self, state: &State) -> [f64; 3] {
        self.probs_for_cell(self.disc.cell_index(state))
    }
}

/// Fits the smoothed count model on every step of `test`.
pub fn estimate_behavior_policy(
    test: &Dataset,
    disc: StateDiscretizer,
    alpha: f64,
) -> Result<EstimatedBehaviorPolicy, OpeError> {
    if test.is_empty() {
        return Err(OpeError::EmptyDataset);
    }
    if alpha <= 0.0 || !alpha.is_finite() {
        return Err(OpeError::BadAlpha(alpha));
    }
    let mut counts = vec![0u32; disc.num_cells() * NUM_ACTIONS];
    for traj in &test.trajectories {
        for step in traj.steps() {
            counts[disc.cell_index(&step.state) * NUM_ACTIONS + step.action.index()] += 1;
        }
    }
    Ok(EstimatedBehaviorPolicy { disc, counts, alpha })
}

// ── Importance weights ──────────────────────────────────────────────────

/// Cumulative importance ratios per trajectory and their per-decision
/// normalization across trajectories.
///
/// Ratio products over hundreds of steps overflow and underflow f64, so
/// cumulative ratios are held in log space and every normalization runs
/// through a shifted-exponential sum. Zero ratios are `-inf` logs.
#[derive(Debug, Clone)]
pub struct ImportanceWeights {
    /// `log_cum[i][t] = Σ_{j<=t} ln(π_θ(A_j|S_j) / π̂_b(A_j|S_j))`.
    log_cum: Vec<Vec<f64>>,
    /// `norm[i][t] = held(ρ)[i][t] / Σ_j held(ρ)[j][t]`, zero where the
    /// denominator vanishes; computed stably from the logs.
    norm: Vec<Vec<f64>>,
}

impl ImportanceWeights {
    pub fn num_trajectories(&self) -> usize {
        self.log_cum.len()
    }

    /// Final cumulative ratio of trajectory `i` (may underflow to 0 for
    /// long, poorly-overlapping trajectories; estimation uses the logs).
    pub fn final_ratio(&self, i: usize) -> f64 {
        self.final_log_ratio(i).exp()
    }

    pub fn final_log_ratio(&self, i: usize) -> f64 {
        *self.log_cum[i].last().expect("trajectories are nonempty")
    }

    /// Cumulative ratios of trajectory `i` in linear scale.
    pub fn cumulative(&self, i: usize) -> Vec<f64> {
        self.log_cum[i].iter().map(|l| l.exp()).collect()
    }

    pub fn log_cumulative(&self, i: usize) -> &[f64] {
        &self.log_cum[i]
    }

    pub fn normalized(&self, i: usize) -> &[f64] {
        &self.norm[i]
    }

    /// Normalized final weights `ρ_L^i / Σ_j ρ_L^j`, or `None` when every
    /// final ratio is zero.
    pub fn normalized_final(&self) -> Option<Vec<f64>> {
        let logs: Vec<f64> = (0..self.num_trajectories())
            .map(|i| self.final_log_ratio(i))
            .collect();
        normalize_logs(&logs)
    }
}

/// Shift-and-exponentiate normalization: returns `exp(l_i - max) / Σ_j
/// exp(l_j - max)`, or `None` when all logs are `-inf`.
fn normalize_logs(logs: &[f64]) -> Option<Vec<f64>> {
    let max = logs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return None;
    }
    let shifted: Vec<f64> = logs.iter().map(|l| (l - max).exp()).collect();
    let total: f64 = shifted.iter().sum();
    Some(shifted.into_iter().map(|s| s / total).collect())
}

/// Computes cumulative ratios and per-decision normalized weights for the
/// dataset under `pi_theta` against `pib_hat`.
pub fn compute_weights(
    pi_theta: &dyn DiscretePolicy,
    pib_hat: &dyn DiscretePolicy,
    d: &Dataset,
) -> Result<ImportanceWeights, OpeError> {
    if d.is_empty() {
        return Err(OpeError::EmptyDataset);
    }
    let mut log_cum = Vec::with_capacity(d.len());
    for traj in &d.trajectories {
        let mut logs = Vec::with_capacity(traj.len());
        let mut log_product = 0.0;
        for step in traj.steps() {
            let a = step.action.index();
            let p_b = pib_hat.probs(&step.state)[a];
            if p_b <= 0.0 {
                return Err(OpeError::ZeroBehaviorProbability {
                    position: step.state.position,
                    velocity: step.state.velocity,
                    action: a,
                });
            }
            log_product += (pi_theta.probs(&step.state)[a] / p_b).ln();
            logs.push(log_product);
        }
        log_cum.push(logs);
    }

    let max_len = log_cum.iter().map(Vec::len).max().unwrap_or(0);
    let n = log_cum.len();
    // Per-decision normalization with the absorbing convention: shorter
    // trajectories hold their final log ratio.
    let mut norm: Vec<Vec<f64>> = log_cum
        .iter()
        .map(|logs| vec![0.0; logs.len()])
        .collect();
    let mut held = vec![0.0f64; n];
    for t in 0..max_len {
        for (i, logs) in log_cum.iter().enumerate() {
            held[i] = if t < logs.len() {
                logs[t]
            } else {
                *logs.last().expect("nonempty")
            };
        }
        match normalize_logs(&held) {
            Some(weights) => {
                for (i, logs) in log_cum.iter().enumerate() {
                    if t < logs.len() {
                        norm[i][t] = weights[i];
                    }
                }
            }
            None => {
                // Zero mass everywhere at this step: weights stay zero.
            }
        }
    }

    Ok(ImportanceWeights { log_cum, norm })
}

fn check_shape(weights: &ImportanceWeights, d: &Dataset) -> Result<(), OpeError> {
    if d.is_empty() {
        return Err(OpeError::EmptyDataset);
    }
    if weights.num_trajectories() != d.len() {
        return Err(OpeError::WeightShape {
            expected: weights.num_trajectories(),
            got: d.len(),
        });
    }
    Ok(())
}

/// Weighted importance sampling: returns weighted by normalized final
/// ratios. Always a convex combination of the observed returns.
pub fn wis_estimate(
    weights: &ImportanceWeights,
    d: &Dataset,
    gamma: f64,
) -> Result<f64, OpeError> {
    check_shape(weights, d)?;
    let max = (0..d.len())
        .map(|i| weights.final_log_ratio(i))
        .fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return Err(OpeError::NoOverlap);
    }
    let mut numerator = 0.0;
    let mut denominator = 0.0;
    for (i, traj) in d.trajectories.iter().enumerate() {
        let rho = (weights.final_log_ratio(i) - max).exp();
        numerator += rho * trajectory_return(traj, gamma);
        denominator += rho;
    }
    Ok(numerator / denominator)
}

/// Per-decision weighted importance sampling:
/// `Σ_i Σ_t w_t^i γ^t R_t^i` with weights normalized at every `t`.
pub fn pdwis_estimate(
    weights: &ImportanceWeights,
    d: &Dataset,
    gamma: f64,
) -> Result<f64, OpeError> {
    check_shape(weights, d)?;
    let overlap = (0..d.len())
        .map(|i| weights.final_log_ratio(i))
        .any(|l| l > f64::NEG_INFINITY);
    if !overlap {
        return Err(OpeError::NoOverlap);
    }
    let mut total = 0.0;
    for (i, traj) in d.trajectories.iter().enumerate() {
        let w = weights.normalized(i);
        let mut discount = 1.0;
        for (t, step) in traj.steps().iter().enumerate() {
            total += w[t] * discount * step.reward;
            discount *= gamma;
        }
    }
    Ok(total)
}

// ── Estimated model ─────────────────────────────────────────────────────

/// Discretized empirical MDP model: transition and mean-reward tables over
/// (cell, action) pairs plus an initial cell distribution.
///
/// Pairs with no observed successor are flagged unvisited and simulate as a
/// self-loop paying [`UNVISITED_REWARD`] per step.
#[derive(Debug, Clone)]
pub struct EstimatedModel {
    disc: StateDiscretizer,
    gamma: f64,
    horizon: usize,
    /// Outcome distribution per `cell * 3 + action`, sorted by outcome cell;
    /// [`TERMINAL_CELL`] sorts last. Empty means unvisited.
    transitions: Vec<Vec<(u32, f64)>>,
    /// Mean observed reward per pair, [`UNVISITED_REWARD`] where none seen.
    rewards: Vec<f64>,
    /// Initial cell distribution, sorted by cell.
    d0: Vec<(u32, f64)>,
}

impl EstimatedModel {
    pub fn discretizer(&self) -> StateDiscretizer {
        self.disc
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    pub fn is_visited(&self, cell: usize, action: usize) -> bool {
        !self.transitions[cell * NUM_ACTIONS + action].is_empty()
    }

    pub fn reward(&self, cell: usize, action: usize) -> f64 {
        self.rewards[cell * NUM_ACTIONS + action]
    }

    pub fn outcomes(&self, cell: usize, action: usize) -> &[(u32, f64)] {
        &self.transitions[cell * NUM_ACTIONS + action]
    }

    pub fn initial_distribution(&self) -> &[(u32, f64)] {
        &self.d0
    }

    /// Builds a model directly from known tables (used to inject an exact
    /// model). Every listed distribution must sum to 1.
    pub fn from_parts(
        disc: StateDiscretizer,
        gamma: f64,
        horizon: usize,
        entries: &[(u32, usize, Vec<(u32, f64)>, f64)],
        d0: &[(u32, f64)],
    ) -> Result<Self, OpeError> {
        let mut transitions = vec![Vec::new(); disc.num_cells() * NUM_ACTIONS];
        let mut rewards = vec![UNVISITED_REWARD; disc.num_cells() * NUM_ACTIONS];
        for (cell, action, outcomes, reward) in entries {
            let sum: f64 = outcomes.iter().map(|(_, p)| p).sum();
            if (sum - 1.0).abs() > 1e-9 {
                return Err(OpeError::BadModelDistribution {
                    cell: *cell,
                    action: *action,
                    sum,
                });
            }
            let mut sorted = outcomes.clone();
            sorted.sort_by_key(|(o, _)| *o);
            let idx = *cell as usize * NUM_ACTIONS + action;
            transitions[idx] = sorted;
            rewards[idx] = *reward;
        }
        let sum: f64 = d0.iter().map(|(_, p)| p).sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(OpeError::BadModelDistribution {
                cell: TERMINAL_CELL,
                action: 0,
                sum,
            });
        }
        let mut d0 = d0.to_vec();
        d0.sort_by_key(|(c, _)| *c);
        Ok(Self {
            disc,
            gamma,
            horizon,
            transitions,
            rewards,
            d0,
        })
    }
}

/// Fits transition, reward, and start-state tables from data.
///
/// Rewards come from every step. Transition counts come from steps with an
/// observed successor: the following step's state, or the terminal outcome
/// when the trajectory ends by reaching the goal. The last step of a
/// horizon-capped trajectory has no observed successor and feeds only the
/// reward table.
pub fn build_model(
    d: &Dataset,
    disc: StateDiscretizer,
    gamma: f64,
    horizon: usize,
) -> Result<EstimatedModel, OpeError> {
    if d.is_empty() {
        return Err(OpeError::EmptyDataset);
    }
    let slots = disc.num_cells() * NUM_ACTIONS;
    let mut reward_sums = vec![0.0; slots];
    let mut reward_counts = vec![0u32; slots];
    // Packed (pair, outcome) keys, sorted once and run-length encoded.
    let mut observed: Vec<u64> = Vec::new();
    let mut d0_cells: Vec<u32> = Vec::new();

    for traj in &d.trajectories {
        let steps = traj.steps();
        d0_cells.push(disc.cell_index(&steps[0].state) as u32);
        for (t, step) in steps.iter().enumerate() {
            let pair = (disc.cell_index(&step.state) * NUM_ACTIONS + step.action.index()) as u64;
            reward_sums[pair as usize] += step.reward;
            reward_counts[pair as usize] += 1;
            let outcome = if t + 1 < steps.len() {
                Some(disc.cell_index(&steps[t + 1].state) as u32)
            } else if traj.terminated {
                Some(TERMINAL_CELL)
            } else {
                None
            };
            if let Some(next) = outcome {
                observed.push(pair << 32 | next as u64);
            }
        }
    }

    let mut transitions = vec![Vec::new(); slots];
    observed.sort_unstable();
    let mut i = 0;
    while i < observed.len() {
        let key = observed[i];
        let mut j = i;
        while j < observed.len() && observed[j] == key {
            j += 1;
        }
        transitions[(key >> 32) as usize].push((key as u32, (j - i) as f64));
        i = j;
    }
    for outcomes in transitions.iter_mut() {
        let total: f64 = outcomes.iter().map(|(_, c)| c).sum();
        for (_, c) in outcomes.iter_mut() {
            *c /= total.max(1.0);
        }
    }

    let rewards = reward_sums
        .iter()
        .zip(&reward_counts)
        .map(|(&s, &c)| if c > 0 { s / c as f64 } else { UNVISITED_REWARD })
        .collect();

    d0_cells.sort_unstable();
    let n = d0_cells.len() as f64;
    let mut d0 = Vec::new();
    let mut i = 0;
    while i < d0_cells.len() {
        let cell = d0_cells[i];
        let mut j = i;
        while j < d0_cells.len() && d0_cells[j] == cell {
            j += 1;
        }
        d0.push((cell, (j - i) as f64 / n));
        i = j;
    }

    Ok(EstimatedModel {
        disc,
        gamma,
        horizon,
        transitions,
        rewards,
        d0,
    })
}

fn sample_cumulative(pairs: &[(u32, f64)], u: f64) -> u32 {
    let mut acc = 0.0;
    for &(outcome, p) in pairs {
        acc += p;
        if u < acc {
            return outcome;
        }
    }
    pairs.last().expect("nonempty distribution").0
}

/// Monte Carlo mean return of `rollouts` episodes simulated in the model
/// while following `pi_theta` (queried at cell centers).
pub fn mb_estimate(
    model: &EstimatedModel,
    pi_theta: &dyn DiscretePolicy,
    rollouts: usize,
    rng: &mut dyn RngCore,
) -> f64 {
    let mut policy_cache: Vec<Option<[f64; 3]>> = vec![None; model.disc.num_cells()];
    let mut total = 0.0;
    for _ in 0..rollouts {
        let mut cell = sample_cumulative(&model.d0, crate::rng::unit_f64(rng)) as usize;
        let mut ret = 0.0;
        let mut discount = 1.0;
        for _ in 0..model.horizon {
            let probs = *policy_cache[cell]
                .get_or_insert_with(|| pi_theta.probs(&model.disc.cell_center(cell)));
            let action = sample_action(&probs, rng).index();
            let pair = cell * NUM_ACTIONS + action;
            ret += discount * model.rewards[pair];
            discount *= model.gamma;
            let outcomes = &model.transitions[pair];
            if outcomes.is_empty() {
                continue; // unvisited: self-loop
            }
            let next = sample_cumulative(outcomes, crate::rng::unit_f64(rng));
            if next == TERMINAL_CELL {
                break;
            }
            cell = next as usize;
        }
        total += ret;
    }
    total / rollouts.max(1) as f64
}

// ── Model value functions ───────────────────────────────────────────────

/// Finite-horizon state and state-action value tables of a policy in an
/// estimated model, indexed by steps-elapsed `h` (so `q_at(t, ...)` is the
/// value-to-go from time `t`).
#[derive(Debug, Clone)]
pub struct ModelValueFunctions {
    disc: StateDiscretizer,
    horizon: usize,
    q: Vec<f64>,
    v: Vec<f64>,
}

impl ModelValueFunctions {
    /// All-zero tables: turns the WDR control variate off.
    pub fn zeros(disc: StateDiscretizer, horizon: usize) -> Self {
        Self {
            disc,
            horizon,
            q: vec![0.0; horizon * disc.num_cells() * NUM_ACTIONS],
            v: vec![0.0; (horizon + 1) * disc.num_cells()],
        }
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    pub fn q_at(&self, h: usize, cell: usize, action: usize) -> f64 {
        if h >= self.horizon {
            return 0.0;
        }
        self.q[(h * self.disc.num_cells() + cell) * NUM_ACTIONS + action]
    }

    pub fn v_at(&self, h: usize, cell: usize) -> f64 {
        if h > self.horizon {
            return 0.0;
        }
        self.v[h * self.disc.num_cells() + cell]
    }

    pub fn q_for_state(&self, h: usize, state: &State, action: Action) -> f64 {
        self.q_at(h, self.disc.cell_index(state), action.index())
    }

    pub fn v_for_state(&self, h: usize, state: &State) -> f64 {
        self.v_at(h, self.disc.cell_index(state))
    }
}

/// Backward dynamic programming over the model:
/// `q_h(c,a) = R̂(c,a) + γ Σ_{c'} P̂(c'|c,a) v_{h+1}(c')` with
/// `v_h(c) = Σ_a π(a|c) q_h(c,a)` and `v_horizon ≡ 0`. Unvisited pairs
/// self-loop.
pub fn model_value_functions(
    model: &EstimatedModel,
    pi_theta: &dyn DiscretePolicy,
) -> ModelValueFunctions {
    let cells = model.disc.num_cells();
    let horizon = model.horizon;
    let mut vf = ModelValueFunctions::zeros(model.disc, horizon);

    let policy_probs: Vec<[f64; 3]> = (0..cells)
        .map(|c| pi_theta.probs(&model.disc.cell_center(c)))
        .collect();

    for h in (0..horizon).rev() {
        for cell in 0..cells {
            let mut v_h = 0.0;
            for action in 0..NUM_ACTIONS {
                let pair = cell * NUM_ACTIONS + action;
                let outcomes = &model.transitions[pair];
                let future = if outcomes.is_empty() {
                    vf.v_at(h + 1, cell)
                } else {
                    outcomes
                        .iter()
                        .map(|&(o, p)| {
                            if o == TERMINAL_CELL {
                                0.0
                            } else {
                                p * vf.v_at(h + 1, o as usize)
                            }
                        })
                        .sum::<f64>()
                };
                let q = model.rewards[pair] + model.gamma * future;
                vf.q[(h * cells + cell) * NUM_ACTIONS + action] = q;
                v_h += policy_probs[cell][action] * q;
            }
            vf.v[h * cells + cell] = v_h;
        }
    }
    vf
}

/// Weighted doubly-robust estimate:
/// `PDWIS - Σ_i Σ_t γ^t (w_t^i q̂_t(S_t,A_t) - w_{t-1}^i v̂_t(S_t))` with
/// `w_{-1}^i := 1/n`.
pub fn wdr_estimate(
    weights: &ImportanceWeights,
    d: &Dataset,
    vf: &ModelValueFunctions,
    gamma: f64,
) -> Result<f64, OpeError> {
    let pdwis = pdwis_estimate(weights, d, gamma)?;
    let n = d.len() as f64;
    let mut correction = 0.0;
    for (i, traj) in d.trajectories.iter().enumerate() {
        let w = weights.normalized(i);
        let mut discount = 1.0;
        for (t, step) in traj.steps().iter().enumerate() {
            let w_prev = if t == 0 { 1.0 / n } else { w[t - 1] };
            correction += discount
                * (w[t] * vf.q_for_state(t, &step.state, step.action)
                    - w_prev * vf.v_for_state(t, &step.state));
            discount *= gamma;
        }
    }
    Ok(pdwis - correction)
}

// ── Total variation diagnostic ──────────────────────────────────────────

/// Half-L1 distance between two policies' action distributions over the
/// states visited in a dataset.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TvDistance {
    /// Mean over visited states; lies in [0, 1].
    pub mean: f64,
    /// Raw sum over visited states.
    pub total: f64,
}

/// Divergence between the estimated behavior policy and the target policy
/// over every state occurrence in `test`.
pub fn tv_distance(
    pib_hat: &dyn DiscretePolicy,
    pi_theta: &dyn DiscretePolicy,
    test: &Dataset,
) -> Result<TvDistance, OpeError> {
    if test.is_empty() {
        return Err(OpeError::EmptyDataset);
    }
    let mut total = 0.0;
    let mut visits = 0usize;
    for traj in &test.trajectories {
        for step in traj.steps() {
            let a = pib_hat.probs(&step.state);
            let b = pi_theta.probs(&step.state);
            total +=
                0.5 * ((a[0] - b[0]).abs() + (a[1] - b[1]).abs() + (a[2] - b[2]).abs());
            visits += 1;
        }
    }
    Ok(TvDistance {
        mean: total / visits as f64,
        total,
    })
}
