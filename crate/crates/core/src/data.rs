//! The simulated data source: a medium-quality behavior policy, blind
//! trajectory collection, train/test splitting, and dataset files.
//!
//! Everything downstream of this module sees only trajectories. Behavior
//! probabilities are deliberately left unrecorded during collection, so
//! estimators must work from an estimated behavior policy.

use std::path::Path;

use rand::RngCore;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linear::{greedy_policy, GreedyPolicy, LinearQ, TileCoder};
use crate::mdp::io::{
    read_trajectories, write_trajectories, TrajectoryFileError, TrajectoryFileHeader, ENV_NAME,
    FORMAT_VERSION,
};
use crate::mdp::{
    env_step, trajectory_return, DiscretePolicy, EnvConfig, MdpError, Trajectory,
};
use crate::rng::{stream_rng, unit_f64};

#[derive(Debug, Error)]
pub enum DataError {
    #[error("dataset is empty")]
    EmptyDataset,

    #[error("n_train {n_train} exceeds dataset size {size}")]
    SplitTooLarge { n_train: usize, size: usize },

    #[error(transparent)]
    Mdp(#[from] MdpError),

    #[error(transparent)]
    File(#[from] TrajectoryFileError),
}

/// Provenance carried with every dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub source_seed: u64,
    pub behavior_policy_id: String,
    /// Logical collection clock (iteration counter), not wall time, so that
    /// outputs stay byte-reproducible.
    pub collection_time: u64,
    pub env: EnvConfig,
}

/// A bag of trajectories plus provenance.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub trajectories: Vec<Trajectory>,
    pub meta: DatasetMeta,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.trajectories.len()
    }

    pub fn is_empty(&self) -> bool {
        self.trajectories.is_empty()
    }

    /// Per-trajectory discounted returns.
    pub fn returns(&self, gamma: f64) -> Vec<f64> {
        self.trajectories
            .iter()
            .map(|t| trajectory_return(t, gamma))
            .collect()
    }
}

/// How to partition a dataset into train and test.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub n_train: usize,
    pub shuffle_seed: u64,
}

/// Trains a tabular-over-tiles Q-learner online for `online_episodes`
/// episodes and returns its greedy head mixed with 30% uniform — a
/// medium-quality data source that solves the task, slowly.
pub fn make_behavior_policy(
    rng: &mut dyn RngCore,
    online_episodes: usize,
    env: &EnvConfig,
) -> GreedyPolicy {
    let coder = TileCoder::default();
    let mut q = LinearQ::zeros(coder.feature_count());
    // Step size kept small so the default episode budget lands mid-way
    // between uniform random and a converged controller.
    let alpha = 0.04 / coder.num_tilings() as f64;
    let epsilon = 0.3;
    let gamma = 1.0;

    let mut feats = Vec::with_capacity(coder.num_tilings());
    let mut next_feats = Vec::with_capacity(coder.num_tilings());
    for _ in 0..online_episodes {
        let mut state = env.sample_start(rng);
        for _ in 0..env.max_macro_steps {
            coder.features_into(&state, &mut feats);
            let qs = q.q_from_features(&feats);
            let action = if unit_f64(rng) < epsilon {
                let u = unit_f64(rng);
                crate::mdp::Action::from_index((u * 3.0) as u8).unwrap_or(crate::mdp::Action::Right)
            } else {
                crate::mdp::Action::from_index(crate::linear::argmax(&qs) as u8).unwrap()
            };
            let (next, reward, done) = env_step(&state, action, env).expect("non-terminal state");
            let target = if done {
                reward
            } else {
                coder.features_into(&next, &mut next_feats);
                let next_qs = q.q_from_features(&next_feats);
                reward + gamma * next_qs[crate::linear::argmax(&next_qs)]
            };
            let delta = target - qs[action.index()];
            for &f in &feats {
                *q.weight_mut(action.index(), f as usize) += alpha * delta;
            }
            state = next;
            if done {
                break;
            }
        }
    }

    greedy_policy(q, coder, 0.3).expect("0.3 is a valid mix")
}

/// Collects `n` trajectories from `policy` with behavior probabilities left
/// unrecorded. Each trajectory draws from its own derived stream.
pub fn collect(
    policy: &dyn DiscretePolicy,
    n: usize,
    cfg: &EnvConfig,
    seed: u64,
    collection_time: u64,
    behavior_policy_id: &str,
) -> Result<Dataset, DataError> {
    let mut trajectories = Vec::with_capacity(n);
    for i in 0..n {
        let mut rng = stream_rng(seed, &[i as u64]);
        trajectories.push(crate::mdp::rollout(policy, cfg, &mut rng, false)?);
    }
    Ok(Dataset {
        trajectories,
        meta: DatasetMeta {
            source_seed: seed,
            behavior_policy_id: behavior_policy_id.to_string(),
            collection_time,
            env: cfg.clone(),
        },
    })
}

/// Disjoint shuffled partition: exactly `n_train` trajectories in the first
/// part, the remainder in the second.
pub fn split(dataset: &Dataset, spec: &SplitSpec) -> Result<(Dataset, Dataset), DataError> {
    let size = dataset.len();
    if spec.n_train > size {
        return Err(DataError::SplitTooLarge {
            n_train: spec.n_train,
            size,
        });
    }
    let mut order: Vec<usize> = (0..size).collect();
    let mut rng = stream_rng(spec.shuffle_seed, &[]);
    // Fisher-Yates over the index vector.
    for i in (1..size).rev() {
        let j = (unit_f64(&mut rng) * (i + 1) as f64) as usize;
        order.swap(i, j.min(i));
    }
    let pick = |indices: &[usize]| Dataset {
        trajectories: indices
            .iter()
            .map(|&i| dataset.trajectories[i].clone())
            .collect(),
        meta: dataset.meta.clone(),
    };
    let (train_idx, test_idx) = order.split_at(spec.n_train);
    Ok((pick(train_idx), pick(test_idx)))
}

/// Mean undiscounted return per trajectory with its standard error.
pub fn behavior_value_stats(dataset: &Dataset) -> Result<(f64, f64), DataError> {
    if dataset.is_empty() {
        return Err(DataError::EmptyDataset);
    }
    let returns = dataset.returns(1.0);
    let n = returns.len() as f64;
    let mean = returns.iter().sum::<f64>() / n;
    let se = if returns.len() < 2 {
        0.0
    } else {
        let var = returns.iter().map(|g| (g - mean).powi(2)).sum::<f64>() / (n - 1.0);
        (var / n).sqrt()
    };
    Ok((mean, se))
}

/// Mean undiscounted return of the dataset — the data source's own value.
pub fn behavior_value_estimate(dataset: &Dataset) -> Result<f64, DataError> {
    behavior_value_stats(dataset).map(|(mean, _)| mean)
}

/// Writes the dataset in the trajectory line format, with provenance in the
/// header.
pub fn write_dataset(path: &Path, dataset: &Dataset) -> Result<(), DataError> {
    let env = &dataset.meta.env;
    let header = TrajectoryFileHeader {
        version: FORMAT_VERSION,
        env: ENV_NAME.to_string(),
        action_repeat: env.action_repeat,
        max_macro_steps: env.max_macro_steps,
        seed: dataset.meta.source_seed,
        goal_position: Some(env.goal_position),
        start_position_min: Some(env.start_position_min),
        start_position_max: Some(env.start_position_max),
        start_velocity_min: Some(env.start_velocity_min),
        start_velocity_max: Some(env.start_velocity_max),
        behavior_policy_id: Some(dataset.meta.behavior_policy_id.clone()),
        collection_time: Some(dataset.meta.collection_time),
    };
    write_trajectories(path, &header, &dataset.trajectories)?;
    Ok(())
}

pub fn read_dataset(path: &Path) -> Result<Dataset, DataError> {
    let (header, trajectories) = read_trajectories(path)?;
    let defaults = EnvConfig::default();
    Ok(Dataset {
        trajectories,
        meta: DatasetMeta {
            source_seed: header.seed,
            behavior_policy_id: header.behavior_policy_id.unwrap_or_default(),
            collection_time: header.collection_time.unwrap_or(0),
            env: EnvConfig {
                action_repeat: header.action_repeat,
                max_macro_steps: header.max_macro_steps,
                goal_position: header.goal_position.unwrap_or(defaults.goal_position),
                start_position_min: header
                    .start_position_min
                    .unwrap_or(defaults.start_position_min),
                start_position_max: header
                    .start_position_max
                    .unwrap_or(defaults.start_position_max),
                start_velocity_min: header
                    .start_velocity_min
                    .unwrap_or(defaults.start_velocity_min),
                start_velocity_max: header
                    .start_velocity_max
                    .unwrap_or(defaults.start_velocity_max),
            },
        },
    })
}
