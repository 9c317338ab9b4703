//! Modified mountain-car environment and the trajectory data model.
//!
//! The environment is the classic mountain car with two changes: each chosen
//! action is held constant for `action_repeat` inner dynamics updates (one
//! "macro-step"), and episodes start from a uniformly random position and
//! velocity over the full state box. Reward is -1 per macro-step and 0 on
//! the macro-step that reaches the goal.
//!
//! Inner-tick dynamics are a bit-exact contract shared with recorded data:
//!
//! ```text
//! v' = clip(v + 0.001·(a-1) - 0.0025·cos(3p), -0.07, 0.07)
//! p' = clip(p + v', -1.2, 0.6)
//! if p' <= -1.2 { v' = 0 }
//! terminal when p' >= goal
//! ```
//!
//! All arithmetic is 64-bit binary floating point, in exactly that order.

pub mod io;

use rand::RngCore;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng::uniform;

/// Number of discrete actions.
pub const NUM_ACTIONS: usize = 3;

pub const POSITION_MIN: f64 = -1.2;
pub const POSITION_MAX: f64 = 0.6;
pub const VELOCITY_MIN: f64 = -0.07;
pub const VELOCITY_MAX: f64 = 0.07;

const FORCE: f64 = 0.001;
const GRAVITY: f64 = 0.0025;

#[derive(Debug, Error)]
pub enum MdpError {
    #[error("state out of range or non-finite: position={0}, velocity={1}")]
    InvalidState(f64, f64),

    #[error("invalid action index {0}, must be one of 0, 1, 2")]
    InvalidAction(u8),

    #[error("cannot step from a terminal state (position {position} >= goal {goal})")]
    TerminalState { position: f64, goal: f64 },

    #[error("trajectory must contain at least one step")]
    EmptyTrajectory,

    #[error("invalid environment config: {0}")]
    InvalidConfig(String),

    #[error("policy returned an invalid distribution {probs:?} (sum {sum})")]
    InvalidDistribution { probs: [f64; 3], sum: f64 },
}

/// A point in the 2-D state box.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct State {
    pub position: f64,
    pub velocity: f64,
}

impl State {
    /// Validating constructor: both fields finite and inside their closed ranges.
    pub fn new(position: f64, velocity: f64) -> Result<Self, MdpError> {
        let ok = position.is_finite()
            && velocity.is_finite()
            && (POSITION_MIN..=POSITION_MAX).contains(&position)
            && (VELOCITY_MIN..=VELOCITY_MAX).contains(&velocity);
        if ok {
            Ok(Self { position, velocity })
        } else {
            Err(MdpError::InvalidState(position, velocity))
        }
    }

    /// Clamps arbitrary finite coordinates into the state box.
    pub fn clamped(position: f64, velocity: f64) -> Self {
        Self {
            position: position.clamp(POSITION_MIN, POSITION_MAX),
            velocity: velocity.clamp(VELOCITY_MIN, VELOCITY_MAX),
        }
    }
}

/// One of the three discrete pushes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Action {
    Left,
    Coast,
    Right,
}

impl Action {
    pub const ALL: [Action; 3] = [Action::Left, Action::Coast, Action::Right];

    pub fn index(self) -> usize {
        match self {
            Action::Left => 0,
            Action::Coast => 1,
            Action::Right => 2,
        }
    }

    pub fn from_index(index: u8) -> Result<Self, MdpError> {
        match index {
            0 => Ok(Action::Left),
            1 => Ok(Action::Coast),
            2 => Ok(Action::Right),
            other => Err(MdpError::InvalidAction(other)),
        }
    }

    /// Signed force direction: -1, 0, +1.
    fn force_sign(self) -> f64 {
        self.index() as f64 - 1.0
    }
}

/// One logged decision: the state seen, the action taken, the reward
/// received, and (when the logger was not blinded) the probability the
/// behavior policy assigned to that action.
#[derive(Debug, Clone, PartialEq)]
pub struct Step {
    pub state: State,
    pub action: Action,
    pub reward: f64,
    pub behavior_prob: Option<f64>,
}

/// An ordered sequence of steps ending either at the goal (`terminated`) or
/// at the horizon cap. This is the i.i.d. unit of all estimation.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    steps: Vec<Step>,
    pub terminated: bool,
}

impl Trajectory {
    pub fn new(steps: Vec<Step>, terminated: bool) -> Result<Self, MdpError> {
        if steps.is_empty() {
            return Err(MdpError::EmptyTrajectory);
        }
        Ok(Self { steps, terminated })
    }

    pub fn steps(&self) -> &[Step] {
        &self.steps
    }

    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }
}

/// Horizon-shortening and start-distribution parameters of the modified
/// environment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EnvConfig {
    /// Inner dynamics updates per macro-step.
    pub action_repeat: u32,
    /// Episode cap, in macro-steps.
    pub max_macro_steps: u32,
    pub goal_position: f64,
    /// Episode start ranges. Default to the full state box; narrower
    /// ranges reproduce the start variants used with this environment.
    pub start_position_min: f64,
    pub start_position_max: f64,
    pub start_velocity_min: f64,
    pub start_velocity_max: f64,
}

impl Default for EnvConfig {
    fn default() -> Self {
        Self {
            action_repeat: 4,
            max_macro_steps: 250,
            goal_position: 0.5,
            start_position_min: POSITION_MIN,
            start_position_max: POSITION_MAX,
            start_velocity_min: VELOCITY_MIN,
            start_velocity_max: VELOCITY_MAX,
        }
    }
}

impl EnvConfig {
    pub fn validate(&self) -> Result<(), MdpError> {
        if self.action_repeat < 1 {
            return Err(MdpError::InvalidConfig("action_repeat must be >= 1".into()));
        }
        if self.max_macro_steps < 1 {
            return Err(MdpError::InvalidConfig(
                "max_macro_steps must be >= 1".into(),
            ));
        }
        if !self.goal_position.is_finite() {
            return Err(MdpError::InvalidConfig("goal_position must be finite".into()));
        }
        let ranges_ok = POSITION_MIN <= self.start_position_min
            && self.start_position_min < self.start_position_max
            && self.start_position_max <= POSITION_MAX
            && VELOCITY_MIN <= self.start_velocity_min
            && self.start_velocity_min < self.start_velocity_max
            && self.start_velocity_max <= VELOCITY_MAX;
        if !ranges_ok {
            return Err(MdpError::InvalidConfig(format!(
                "start ranges [{}, {}) x [{}, {}) must be nonempty and inside the state box",
                self.start_position_min,
                self.start_position_max,
                self.start_velocity_min,
                self.start_velocity_max
            )));
        }
        Ok(())
    }

    /// Samples a start state from the configured ranges, redrawing the rare
    /// draws that already sit past the goal.
    pub fn sample_start(&self, rng: &mut dyn RngCore) -> State {
        loop {
            let state = State {
                position: uniform(rng, self.start_position_min, self.start_position_max),
                velocity: uniform(rng, self.start_velocity_min, self.start_velocity_max),
            };
            if state.position < self.goal_position {
                return state;
            }
        }
    }
}

/// Any object yielding a full probability distribution over the three
/// actions given a state. Policies must be shareable across threads.
pub trait DiscretePolicy: Sync {
    fn probs(&self, state: &State) -> [f64; 3];

    fn prob(&self, state: &State, action: Action) -> f64 {
        self.probs(state)[action.index()]
    }
}

impl<F> DiscretePolicy for F
where
    F: Fn(&State) -> [f64; 3] + Sync,
{
    fn probs(&self, state: &State) -> [f64; 3] {
        self(state)
    }
}

impl DiscretePolicy for Box<dyn DiscretePolicy + '_> {
    fn probs(&self, state: &State) -> [f64; 3] {
        (**self).probs(state)
    }
}

/// Samples an action from `probs` using one uniform draw.
pub fn sample_action(probs: &[f64; 3], rng: &mut dyn RngCore) -> Action {
    let u = crate::rng::unit_f64(rng);
    let mut acc = 0.0;
    for action in Action::ALL {
        acc += probs[action.index()];
        if u < acc {
            return action;
        }
    }
    // Guard against round-off on the cumulative sum.
    Action::Right
}

/// One inner dynamics update. Returns the next state and whether the goal
/// was reached. This is the bit-exact contract other tooling records against.
pub fn inner_tick(state: &State, action: Action, goal_position: f64) -> (State, bool) {
    let mut velocity = state.velocity + FORCE * action.force_sign()
        - GRAVITY * (3.0 * state.position).cos();
    velocity = velocity.clamp(VELOCITY_MIN, VELOCITY_MAX);
    let position = (state.position + velocity).clamp(POSITION_MIN, POSITION_MAX);
    if position <= POSITION_MIN {
        velocity = 0.0;
    }
    (State { position, velocity }, position >= goal_position)
}

/// Uniform start state over the full position and velocity boxes.
pub fn env_reset(rng: &mut dyn RngCore) -> State {
    let position = uniform(rng, POSITION_MIN, POSITION_MAX);
    let velocity = uniform(rng, VELOCITY_MIN, VELOCITY_MAX);
    State { position, velocity }
}

/// Applies `action` for up to `cfg.action_repeat` inner ticks, stopping as
/// soon as the goal is crossed. Reward is 0 on the goal-reaching macro-step
/// and -1 otherwise.
pub fn env_step(
    state: &State,
    action: Action,
    cfg: &EnvConfig,
) -> Result<(State, f64, bool), MdpError> {
    if state.position >= cfg.goal_position {
        return Err(MdpError::TerminalState {
            position: state.position,
            goal: cfg.goal_position,
        });
    }
    let mut current = *state;
    let mut done = false;
    for _ in 0..cfg.action_repeat {
        let (next, reached) = inner_tick(&current, action, cfg.goal_position);
        current = next;
        if reached {
            done = true;
            break;
        }
    }
    let reward = if done { 0.0 } else { -1.0 };
    Ok((current, reward, done))
}

fn validate_probs(probs: &[f64; 3]) -> Result<(), MdpError> {
    let sum: f64 = probs.iter().sum();
    let ok = probs.iter().all(|p| p.is_finite() && *p >= 0.0) && (sum - 1.0).abs() <= 1e-9;
    if ok {
        Ok(())
    } else {
        Err(MdpError::InvalidDistribution { probs: *probs, sum })
    }
}

/// Generates one episode by sampling actions from `policy`.
///
/// Start states that are already past the goal are redrawn, so every
/// trajectory has at least one step. When `record_probs` is set each step
/// stores the policy's probability of the action it recorded.
pub fn rollout(
    policy: &dyn DiscretePolicy,
    cfg: &EnvConfig,
    rng: &mut dyn RngCore,
    record_probs: bool,
) -> Result<Trajectory, MdpError> {
    cfg.validate()?;
    let mut state = cfg.sample_start(rng);

    let mut steps = Vec::new();
    let mut terminated = false;
    for _ in 0..cfg.max_macro_steps {
        let probs = policy.probs(&state);
        validate_probs(&probs)?;
        let action = sample_action(&probs, rng);
        let behavior_prob = record_probs.then(|| probs[action.index()]);
        let (next, reward, done) = env_step(&state, action, cfg)?;
        steps.push(Step {
            state,
            action,
            reward,
            behavior_prob,
        });
        state = next;
        if done {
            terminated = true;
            break;
        }
    }
    Trajectory::new(steps, terminated)
}

/// Discounted return `Σ_t γ^t R_t` over the trajectory's steps.
pub fn trajectory_return(traj: &Trajectory, gamma: f64) -> f64 {
    let mut total = 0.0;
    let mut discount = 1.0;
    for step in traj.steps() {
        total += discount * step.reward;
        discount *= gamma;
    }
    total
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream_rng;
    use proptest::prelude::*;

    #[test]
    fn reset_is_deterministic_under_fixed_seed() {
        let a = env_reset(&mut stream_rng(42, &[]));
        let b = env_reset(&mut stream_rng(42, &[]));
        assert_eq!(a, b);
    }

    #[test]
    fn reset_samples_cover_the_box_with_uniform_mean() {
        let mut rng = stream_rng(7, &[]);
        let n = 10_000;
        let mut sum_p = 0.0;
        for _ in 0..n {
            let s = env_reset(&mut rng);
            assert!((POSITION_MIN..POSITION_MAX).contains(&s.position));
            assert!((VELOCITY_MIN..VELOCITY_MAX).contains(&s.velocity));
            sum_p += s.position;
        }
        // Uniform[-1.2, 0.6) has mean -0.3 and sd = 1.8/sqrt(12).
        let mean = sum_p / n as f64;
        let se = (1.8 / 12f64.sqrt()) / (n as f64).sqrt();
        assert!(
            (mean + 0.3).abs() < 3.0 * se,
            "mean {mean} not within 3 SE ({se}) of -0.3"
        );
    }

    #[test]
    fn stepping_past_goal_is_rejected() {
        let cfg = EnvConfig::default();
        let state = State::new(0.55, 0.0).unwrap();
        assert!(matches!(
            env_step(&state, Action::Coast, &cfg),
            Err(MdpError::TerminalState { .. })
        ));
    }

    #[test]
    fn goal_reaching_step_has_zero_reward() {
        let cfg = EnvConfig::default();
        let state = State::new(0.49, 0.07).unwrap();
        for action in Action::ALL {
            let (_, reward, done) = env_step(&state, action, &cfg).unwrap();
            assert!(done);
            assert_eq!(reward, 0.0);
        }
    }

    #[test]
    fn pushing_right_from_rest_moves_right() {
        let cfg = EnvConfig::default();
        let state = State::new(-0.5, 0.0).unwrap();
        let (next, reward, done) = env_step(&state, Action::Right, &cfg).unwrap();
        assert!(next.position > -0.5);
        assert!(!done);
        assert_eq!(reward, -1.0);
    }

    #[test]
    fn force_is_monotone_in_action() {
        let cfg = EnvConfig::default();
        let state = State::new(-0.5, 0.0).unwrap();
        let (left, _, _) = env_step(&state, Action::Left, &cfg).unwrap();
        let (right, _, _) = env_step(&state, Action::Right, &cfg).unwrap();
        assert!(left.velocity < right.velocity);
    }

    #[test]
    fn always_right_from_valley_oscillates_below_goal() {
        // Reference simulation: from rest at -0.5 the right push is weaker
        // than gravity near the slopes, so the car swings between roughly
        // -1.11 and -0.27 and never crosses the goal within the cap. The
        // velocity changes sign on every swing.
        let cfg = EnvConfig::default();
        let mut state = State::new(-0.5, 0.0).unwrap();
        let mut saw_negative_velocity = false;
        let mut saw_positive_velocity = false;
        let mut max_position = f64::NEG_INFINITY;
        for _ in 0..cfg.max_macro_steps {
            let (next, _, done) = env_step(&state, Action::Right, &cfg).unwrap();
            saw_negative_velocity |= next.velocity < 0.0;
            saw_positive_velocity |= next.velocity > 0.0;
            max_position = max_position.max(next.position);
            state = next;
            assert!(!done, "always-right must not solve from rest at -0.5");
        }
        assert!(saw_negative_velocity && saw_positive_velocity);
        assert!(
            max_position < -0.2,
            "oscillation peak {max_position} unexpectedly high"
        );
    }

    #[test]
    fn rollout_is_deterministic_and_records_probs() {
        let cfg = EnvConfig::default();
        let uniform_policy = |_: &State| [1.0 / 3.0; 3];
        let a = rollout(&uniform_policy, &cfg, &mut stream_rng(3, &[]), true).unwrap();
        let b = rollout(&uniform_policy, &cfg, &mut stream_rng(3, &[]), true).unwrap();
        assert_eq!(a, b);
        for step in a.steps() {
            assert_eq!(step.behavior_prob, Some(1.0 / 3.0));
        }
        let blind = rollout(&uniform_policy, &cfg, &mut stream_rng(3, &[]), false).unwrap();
        assert!(blind.steps().iter().all(|s| s.behavior_prob.is_none()));
    }

    #[test]
    fn rollout_rejects_invalid_policy_distribution() {
        let cfg = EnvConfig::default();
        let bad = |_: &State| [0.5, 0.5, 0.5];
        assert!(matches!(
            rollout(&bad, &cfg, &mut stream_rng(0, &[]), false),
            Err(MdpError::InvalidDistribution { .. })
        ));
    }

    #[test]
    fn returns_match_hand_arithmetic() {
        let mk = |rewards: &[f64], terminated| {
            let steps = rewards
                .iter()
                .map(|&reward| Step {
                    state: State::new(-0.5, 0.0).unwrap(),
                    action: Action::Coast,
                    reward,
                    behavior_prob: None,
                })
                .collect();
            Trajectory::new(steps, terminated).unwrap()
        };
        assert_eq!(trajectory_return(&mk(&[-1.0, -1.0, 0.0], true), 1.0), -2.0);
        assert_eq!(trajectory_return(&mk(&[-1.0, -1.0], false), 0.5), -1.5);
    }

    #[test]
    fn goal_trajectory_return_is_one_less_than_length() {
        let cfg = EnvConfig::default();
        let mut rng = stream_rng(11, &[]);
        let always_right = |_: &State| [0.0, 0.0, 1.0];
        let mut checked = 0;
        for _ in 0..50 {
            let traj = rollout(&always_right, &cfg, &mut rng, false).unwrap();
            if traj.terminated {
                assert_eq!(trajectory_return(&traj, 1.0), -((traj.len() - 1) as f64));
                checked += 1;
            }
        }
        assert!(checked > 0, "no terminated trajectories to check");
    }

    #[test]
    fn empty_trajectory_is_rejected() {
        assert!(matches!(
            Trajectory::new(Vec::new(), false),
            Err(MdpError::EmptyTrajectory)
        ));
    }

    proptest! {
        #[test]
        fn dynamics_are_deterministic_and_boxed(
            p in POSITION_MIN..POSITION_MAX,
            v in VELOCITY_MIN..VELOCITY_MAX,
            a in 0u8..3,
        ) {
            let cfg = EnvConfig::default();
            let state = State::new(p, v).unwrap();
            prop_assume!(state.position < cfg.goal_position);
            let action = Action::from_index(a).unwrap();
            let (s1, r1, d1) = env_step(&state, action, &cfg).unwrap();
            let (s2, r2, d2) = env_step(&state, action, &cfg).unwrap();
            prop_assert_eq!(s1.position.to_bits(), s2.position.to_bits());
            prop_assert_eq!(s1.velocity.to_bits(), s2.velocity.to_bits());
            prop_assert_eq!(r1, r2);
            prop_assert_eq!(d1, d2);
            prop_assert!(State::new(s1.position, s1.velocity).is_ok());
            if s1.position <= POSITION_MIN {
                prop_assert_eq!(s1.velocity, 0.0);
            }
        }

        #[test]
        fn rollout_length_and_termination_are_consistent(seed in 0u64..500) {
            let cfg = EnvConfig { max_macro_steps: 60, ..EnvConfig::default() };
            let mut rng = stream_rng(seed, &[9]);
            let policy = |_: &State| [0.2, 0.3, 0.5];
            let traj = rollout(&policy, &cfg, &mut rng, false).unwrap();
            prop_assert!(traj.len() <= cfg.max_macro_steps as usize);
            let g = trajectory_return(&traj, 1.0);
            prop_assert!(g <= 0.0 && g >= -(traj.len() as f64));
            if traj.terminated {
                prop_assert_eq!(g, -((traj.len() - 1) as f64));
                prop_assert_eq!(traj.steps().last().unwrap().reward, 0.0);
            } else {
                prop_assert_eq!(traj.len(), cfg.max_macro_steps as usize);
                prop_assert_eq!(g, -(traj.len() as f64));
            }
        }
    }
}
