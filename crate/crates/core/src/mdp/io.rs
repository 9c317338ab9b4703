//! Trajectory files: line-delimited JSON, one trajectory per line, preceded
//! by a one-line header object.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{Action, State, Step, Trajectory};

/// Format version written by this crate.
pub const FORMAT_VERSION: u32 = 1;
/// Environment tag carried by every trajectory file.
pub const ENV_NAME: &str = "mountaincar-mod";

#[derive(Debug, Error)]
pub enum TrajectoryFileError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed line {line}: {source}")]
    Malformed {
        line: usize,
        #[source]
        source: serde_json::Error,
    },

    #[error("file is empty, expected a header line")]
    MissingHeader,

    #[error("unsupported env {0:?}, expected {ENV_NAME:?}")]
    WrongEnv(String),

    #[error("unsupported format version {0}")]
    WrongVersion(u32),

    #[error("invalid trajectory on line {line}: {reason}")]
    InvalidTrajectory { line: usize, reason: String },
}

/// Header object on the first line of every trajectory file.
///
/// The optional fields carry dataset provenance when present; readers must
/// tolerate their absence.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryFileHeader {
    pub version: u32,
    pub env: String,
    pub action_repeat: u32,
    pub max_macro_steps: u32,
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub goal_position: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub start_position_min: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub start_position_max: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub start_velocity_min: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub start_velocity_max: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub behavior_policy_id: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub collection_time: Option<u64>,
}

#[derive(Serialize, Deserialize)]
struct TrajectoryLine {
    steps: Vec<StepRepr>,
    terminated: bool,
}

/// On-disk step layout: `[position, velocity, action, reward, behavior_prob]`.
#[derive(Serialize, Deserialize)]
struct StepRepr(f64, f64, u8, f64, Option<f64>);

impl From<&Step> for StepRepr {
    fn from(step: &Step) -> Self {
        StepRepr(
            step.state.position,
            step.state.velocity,
            step.action.index() as u8,
            step.reward,
            step.behavior_prob,
        )
    }
}

impl StepRepr {
    fn into_step(self) -> Result<Step, String> {
        let state = State::new(self.0, self.1).map_err(|e| e.to_string())?;
        let action = Action::from_index(self.2).map_err(|e| e.to_string())?;
        Ok(Step {
            state,
            action,
            reward: self.3,
            behavior_prob: self.4,
        })
    }
}

fn io_err(path: &Path, source: std::io::Error) -> TrajectoryFileError {
    TrajectoryFileError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// Writes a header line followed by one JSON trajectory per line.
pub fn write_trajectories(
    path: &Path,
    header: &TrajectoryFileHeader,
    trajectories: &[Trajectory],
) -> Result<(), TrajectoryFileError> {
    let file = File::create(path).map_err(|e| io_err(path, e))?;
    let mut out = BufWriter::new(file);
    let header_json = serde_json::to_string(header).expect("header serializes");
    writeln!(out, "{header_json}").map_err(|e| io_err(path, e))?;
    for traj in trajectories {
        let line = TrajectoryLine {
            steps: traj.steps().iter().map(StepRepr::from).collect(),
            terminated: traj.terminated,
        };
        let json = serde_json::to_string(&line).expect("trajectory serializes");
        writeln!(out, "{json}").map_err(|e| io_err(path, e))?;
    }
    out.flush().map_err(|e| io_err(path, e))
}

/// Reads a trajectory file back, validating header and step contents.
pub fn read_trajectories(
    path: &Path,
) -> Result<(TrajectoryFileHeader, Vec<Trajectory>), TrajectoryFileError> {
    let file = File::open(path).map_err(|e| io_err(path, e))?;
    let reader = BufReader::new(file);
    let mut lines = reader.lines().enumerate();

    let (_, first) = lines.next().ok_or(TrajectoryFileError::MissingHeader)?;
    let first = first.map_err(|e| io_err(path, e))?;
    let header: TrajectoryFileHeader = serde_json::from_str(&first)
        .map_err(|source| TrajectoryFileError::Malformed { line: 1, source })?;
    if header.env != ENV_NAME {
        return Err(TrajectoryFileError::WrongEnv(header.env));
    }
    if header.version != FORMAT_VERSION {
        return Err(TrajectoryFileError::WrongVersion(header.version));
    }

    let mut trajectories = Vec::new();
    for (idx, line) in lines {
        let line_no = idx + 1;
        let line = line.map_err(|e| io_err(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let parsed: TrajectoryLine = serde_json::from_str(&line)
            .map_err(|source| TrajectoryFileError::Malformed { line: line_no, source })?;
        let steps = parsed
            .steps
            .into_iter()
            .map(StepRepr::into_step)
            .collect::<Result<Vec<_>, _>>()
            .map_err(|reason| TrajectoryFileError::InvalidTrajectory { line: line_no, reason })?;
        let traj = Trajectory::new(steps, parsed.terminated).map_err(|e| {
            TrajectoryFileError::InvalidTrajectory {
                line: line_no,
                reason: e.to_string(),
            }
        })?;
        trajectories.push(traj);
    }
    Ok((header, trajectories))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mdp::{rollout, EnvConfig};
    use crate::rng::stream_rng;

    fn sample_trajectories(n: usize) -> Vec<Trajectory> {
        let cfg = EnvConfig {
            max_macro_steps: 40,
            ..EnvConfig::default()
        };
        let policy = |_: &State| [0.3, 0.3, 0.4];
        let mut rng = stream_rng(5, &[]);
        (0..n)
            .map(|_| rollout(&policy, &cfg, &mut rng, true).unwrap())
            .collect()
    }

    fn header() -> TrajectoryFileHeader {
        TrajectoryFileHeader {
            version: FORMAT_VERSION,
            env: ENV_NAME.to_string(),
            action_repeat: 4,
            max_macro_steps: 40,
            seed: 5,
            goal_position: Some(0.5),
            start_position_min: None,
            start_position_max: None,
            start_velocity_min: None,
            start_velocity_max: None,
            behavior_policy_id: None,
            collection_time: None,
        }
    }

    #[test]
    fn round_trip_is_lossless() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("trajs.jsonl");
        let trajs = sample_trajectories(7);
        write_trajectories(&path, &header(), &trajs).unwrap();
        let (read_header, read_trajs) = read_trajectories(&path).unwrap();
        assert_eq!(read_header, header());
        assert_eq!(read_trajs, trajs);
    }

    #[test]
    fn header_line_is_a_plain_json_object() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("trajs.jsonl");
        write_trajectories(&path, &header(), &sample_trajectories(1)).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let first = text.lines().next().unwrap();
        let value: serde_json::Value = serde_json::from_str(first).unwrap();
        assert_eq!(value["env"], ENV_NAME);
        assert_eq!(value["version"], FORMAT_VERSION);
        assert_eq!(value["action_repeat"], 4);
    }

    #[test]
    fn wrong_env_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("trajs.jsonl");
        let mut bad = header();
        bad.env = "cartpole".to_string();
        write_trajectories(&path, &bad, &sample_trajectories(1)).unwrap();
        assert!(matches!(
            read_trajectories(&path),
            Err(TrajectoryFileError::WrongEnv(_))
        ));
    }

    #[test]
    fn malformed_line_reports_its_number() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("trajs.jsonl");
        write_trajectories(&path, &header(), &sample_trajectories(1)).unwrap();
        let mut text = std::fs::read_to_string(&path).unwrap();
        text.push_str("{not json\n");
        std::fs::write(&path, text).unwrap();
        match read_trajectories(&path) {
            Err(TrajectoryFileError::Malformed { line, .. }) => assert_eq!(line, 3),
            other => panic!("expected malformed error, got {other:?}"),
        }
    }
}
