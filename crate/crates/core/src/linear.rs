//! Tile coding and linear function approximation over the 2-D state box.
//!
//! Tile coding turns a state into a sparse binary feature vector: each of
//! `num_tilings` shifted grids contributes exactly one active index, so a
//! linear model over these features is a fast piecewise-constant
//! approximator with generalization controlled by the overlap of the grids.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::mdp::{
    DiscretePolicy, State, NUM_ACTIONS, POSITION_MAX, POSITION_MIN, VELOCITY_MAX, VELOCITY_MIN,
};

#[derive(Debug, Error)]
pub enum LinearError {
    #[error("tile coder needs at least one tiling and one tile per dimension")]
    DegenerateCoder,

    #[error("temperature must be positive, got {0}")]
    BadTemperature(f64),

    #[error("uniform_mix must lie in [0, 1), got {0}")]
    BadMix(f64),

    #[error("weight row has {got} entries, expected {expected}")]
    WeightShape { got: usize, expected: usize },

    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed snapshot line {line}: {reason}")]
    MalformedSnapshot { line: usize, reason: String },
}

/// Index of the largest value; ties resolve to the lowest index so that runs
/// are bit-reproducible.
pub fn argmax(values: &[f64; 3]) -> usize {
    let mut best = 0;
    for i in 1..NUM_ACTIONS {
        if values[i] > values[best] {
            best = i;
        }
    }
    best
}

/// A stack of offset grids over the state box.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TileCoder {
    num_tilings: usize,
    tiles_per_dim: usize,
}

impl TileCoder {
    pub fn new(num_tilings: usize, tiles_per_dim: usize) -> Result<Self, LinearError> {
        if num_tilings == 0 || tiles_per_dim == 0 {
            return Err(LinearError::DegenerateCoder);
        }
        Ok(Self {
            num_tilings,
            tiles_per_dim,
        })
    }

    pub fn num_tilings(&self) -> usize {
        self.num_tilings
    }

    pub fn tiles_per_dim(&self) -> usize {
        self.tiles_per_dim
    }

    /// `num_tilings × tiles_per_dim²` total features.
    pub fn feature_count(&self) -> usize {
        self.num_tilings * self.tiles_per_dim * self.tiles_per_dim
    }

    /// Writes the active feature index of every tiling into `out`.
    ///
    /// States outside the box are clamped to its boundary. Exactly
    /// `num_tilings` indices are produced, one per tiling.
    pub fn features_into(&self, state: &State, out: &mut Vec<u32>) {
        out.clear();
        let tiles = self.tiles_per_dim as f64;
        let p = state.position.clamp(POSITION_MIN, POSITION_MAX);
        let v = state.velocity.clamp(VELOCITY_MIN, VELOCITY_MAX);
        let cell_p = (POSITION_MAX - POSITION_MIN) / tiles;
        let cell_v = (VELOCITY_MAX - VELOCITY_MIN) / tiles;
        for tiling in 0..self.num_tilings {
            // Tiling i is displaced by i/num_tilings of a cell per dimension.
            let shift = tiling as f64 / self.num_tilings as f64;
            let ip = (((p - POSITION_MIN) / cell_p + shift).floor() as i64)
                .clamp(0, self.tiles_per_dim as i64 - 1) as usize;
            let iv = (((v - VELOCITY_MIN) / cell_v + shift).floor() as i64)
                .clamp(0, self.tiles_per_dim as i64 - 1) as usize;
            let base = tiling * self.tiles_per_dim * self.tiles_per_dim;
            out.push((base + ip * self.tiles_per_dim + iv) as u32);
        }
    }

    pub fn features(&self, state: &State) -> Vec<u32> {
        let mut out = Vec::with_capacity(self.num_tilings);
        self.features_into(state, &mut out);
        out
    }
}

impl Default for TileCoder {
    /// 8 tilings of 8×8 tiles.
    fn default() -> Self {
        Self {
            num_tilings: 8,
            tiles_per_dim: 8,
        }
    }
}

/// Linear action-value function: one weight row per action.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearQ {
    /// Row-major `(NUM_ACTIONS, feature_count)`.
    weights: Vec<f64>,
    feature_count: usize,
}

impl LinearQ {
    pub fn zeros(feature_count: usize) -> Self {
        Self {
            weights: vec![0.0; NUM_ACTIONS * feature_count],
            feature_count,
        }
    }

    pub fn from_rows(rows: [Vec<f64>; 3]) -> Result<Self, LinearError> {
        let feature_count = rows[0].len();
        for row in &rows {
            if row.len() != feature_count {
                return Err(LinearError::WeightShape {
                    got: row.len(),
                    expected: feature_count,
                });
            }
        }
        let mut weights = Vec::with_capacity(NUM_ACTIONS * feature_count);
        for row in rows {
            weights.extend(row);
        }
        Ok(Self {
            weights,
            feature_count,
        })
    }

    pub fn feature_count(&self) -> usize {
        self.feature_count
    }

    pub fn weight(&self, action: usize, feature: usize) -> f64 {
        self.weights[action * self.feature_count + feature]
    }

    pub fn weight_mut(&mut self, action: usize, feature: usize) -> &mut f64 {
        &mut self.weights[action * self.feature_count + feature]
    }

    pub fn row(&self, action: usize) -> &[f64] {
        let start = action * self.feature_count;
        &self.weights[start..start + self.feature_count]
    }

    /// Sum of the active features' weights, per action.
    pub fn q_from_features(&self, features: &[u32]) -> [f64; 3] {
        let mut q = [0.0; 3];
        for (action, value) in q.iter_mut().enumerate() {
            let row = action * self.feature_count;
            for &f in features {
                *value += self.weights[row + f as usize];
            }
        }
        q
    }

    pub fn q_values(&self, coder: &TileCoder, state: &State) -> [f64; 3] {
        self.q_from_features(&coder.features(state))
    }
}

/// Numerically stable softmax with temperature and a uniform floor:
/// `p = (1 - mix)·softmax(logits/temperature) + mix/3`.
pub fn mixed_softmax(logits: &[f64; 3], temperature: f64, uniform_mix: f64) -> [f64; 3] {
    let scaled = [
        logits[0] / temperature,
        logits[1] / temperature,
        logits[2] / temperature,
    ];
    let max = scaled[argmax(&scaled)];
    let exps = [
        (scaled[0] - max).exp(),
        (scaled[1] - max).exp(),
        (scaled[2] - max).exp(),
    ];
    let z: f64 = exps.iter().sum();
    let mut probs = [0.0; 3];
    for i in 0..NUM_ACTIONS {
        probs[i] = (1.0 - uniform_mix) * exps[i] / z + uniform_mix / NUM_ACTIONS as f64;
    }
    probs
}

/// Stochastic policy: softmax over linear logits, mixed with uniform.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SoftmaxPolicy {
    pub weights: LinearQ,
    pub coder: TileCoder,
    pub temperature: f64,
    pub uniform_mix: f64,
}

impl SoftmaxPolicy {
    pub fn new(
        weights: LinearQ,
        coder: TileCoder,
        temperature: f64,
        uniform_mix: f64,
    ) -> Result<Self, LinearError> {
        if temperature <= 0.0 || !temperature.is_finite() {
            return Err(LinearError::BadTemperature(temperature));
        }
        if !(0.0..1.0).contains(&uniform_mix) {
            return Err(LinearError::BadMix(uniform_mix));
        }
        if weights.feature_count() != coder.feature_count() {
            return Err(LinearError::WeightShape {
                got: weights.feature_count(),
                expected: coder.feature_count(),
            });
        }
        Ok(Self {
            weights,
            coder,
            temperature,
            uniform_mix,
        })
    }

    pub fn probs_from_features(&self, features: &[u32]) -> [f64; 3] {
        let logits = self.weights.q_from_features(features);
        mixed_softmax(&logits, self.temperature, self.uniform_mix)
    }
}

impl DiscretePolicy for SoftmaxPolicy {
    fn probs(&self, state: &State) -> [f64; 3] {
        self.probs_from_features(&self.coder.features(state))
    }
}

/// Greedy head over a linear Q with a uniform floor: the argmax action gets
/// `(1 - soften) + soften/3`, the others `soften/3`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GreedyPolicy {
    pub q: LinearQ,
    pub coder: TileCoder,
    pub soften: f64,
}

impl GreedyPolicy {
    pub fn probs_from_features(&self, features: &[u32]) -> [f64; 3] {
        let q = self.q.q_from_features(features);
        let best = argmax(&q);
        let mut probs = [self.soften / NUM_ACTIONS as f64; 3];
        probs[best] += 1.0 - self.soften;
        probs
    }
}

impl DiscretePolicy for GreedyPolicy {
    fn probs(&self, state: &State) -> [f64; 3] {
        self.probs_from_features(&self.coder.features(state))
    }
}

/// Softened greedy policy over a learned Q.
pub fn greedy_policy(q: LinearQ, coder: TileCoder, soften: f64) -> Result<GreedyPolicy, LinearError> {
    if !(0.0..1.0).contains(&soften) {
        return Err(LinearError::BadMix(soften));
    }
    if q.feature_count() != coder.feature_count() {
        return Err(LinearError::WeightShape {
            got: q.feature_count(),
            expected: coder.feature_count(),
        });
    }
    Ok(GreedyPolicy { q, coder, soften })
}

// ── Snapshots ───────────────────────────────────────────────────────────

/// Snapshot header: first line of a policy file. The weight rows follow,
/// one JSON array per action.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SnapshotHeader {
    pub kind: String,
    pub num_tilings: usize,
    pub tiles_per_dim: usize,
    pub temperature: f64,
    pub uniform_mix: f64,
}

/// A policy that can be persisted and evaluated.
#[derive(Debug, Clone, PartialEq)]
pub enum PolicySnapshot {
    Softmax(SoftmaxPolicy),
    Greedy(GreedyPolicy),
}

impl PolicySnapshot {
    pub fn kind(&self) -> &'static str {
        match self {
            PolicySnapshot::Softmax(_) => "softmax",
            PolicySnapshot::Greedy(_) => "greedy",
        }
    }

    fn header(&self) -> SnapshotHeader {
        match self {
            PolicySnapshot::Softmax(p) => SnapshotHeader {
                kind: "softmax".to_string(),
                num_tilings: p.coder.num_tilings(),
                tiles_per_dim: p.coder.tiles_per_dim(),
                temperature: p.temperature,
                uniform_mix: p.uniform_mix,
            },
            PolicySnapshot::Greedy(p) => SnapshotHeader {
                kind: "greedy".to_string(),
                num_tilings: p.coder.num_tilings(),
                tiles_per_dim: p.coder.tiles_per_dim(),
                temperature: 1.0,
                uniform_mix: p.soften,
            },
        }
    }

    fn matrix(&self) -> &LinearQ {
        match self {
            PolicySnapshot::Softmax(p) => &p.weights,
            PolicySnapshot::Greedy(p) => &p.q,
        }
    }
}

impl DiscretePolicy for PolicySnapshot {
    fn probs(&self, state: &State) -> [f64; 3] {
        match self {
            PolicySnapshot::Softmax(p) => p.probs(state),
            PolicySnapshot::Greedy(p) => p.probs(state),
        }
    }
}

fn io_err(path: &Path, source: std::io::Error) -> LinearError {
    LinearError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// Writes `extra_header_lines` (already-serialized JSON objects), then the
/// snapshot header, then one weight row per action.
pub fn write_snapshot_with_prefix(
    path: &Path,
    prefix_lines: &[String],
    snapshot: &PolicySnapshot,
) -> Result<(), LinearError> {
    let file = File::create(path).map_err(|e| io_err(path, e))?;
    let mut out = BufWriter::new(file);
    for line in prefix_lines {
        writeln!(out, "{line}").map_err(|e| io_err(path, e))?;
    }
    let header = serde_json::to_string(&snapshot.header()).expect("header serializes");
    writeln!(out, "{header}").map_err(|e| io_err(path, e))?;
    for action in 0..NUM_ACTIONS {
        let row = serde_json::to_string(snapshot.matrix().row(action)).expect("row serializes");
        writeln!(out, "{row}").map_err(|e| io_err(path, e))?;
    }
    out.flush().map_err(|e| io_err(path, e))
}

pub fn write_snapshot(path: &Path, snapshot: &PolicySnapshot) -> Result<(), LinearError> {
    write_snapshot_with_prefix(path, &[], snapshot)
}

/// Parses a snapshot from an iterator of lines. Returns the parsed policy.
pub fn snapshot_from_lines<I: Iterator<Item = String>>(
    mut lines: I,
    first_line_no: usize,
) -> Result<PolicySnapshot, LinearError> {
    let malformed = |line: usize, reason: String| LinearError::MalformedSnapshot { line, reason };
    let header_line = lines
        .next()
        .ok_or_else(|| malformed(first_line_no, "missing header".to_string()))?;
    let header: SnapshotHeader = serde_json::from_str(&header_line)
        .map_err(|e| malformed(first_line_no, e.to_string()))?;
    let coder = TileCoder::new(header.num_tilings, header.tiles_per_dim)
        .map_err(|e| malformed(first_line_no, e.to_string()))?;

    let mut rows: [Vec<f64>; 3] = Default::default();
    for (i, row) in rows.iter_mut().enumerate() {
        let line_no = first_line_no + 1 + i;
        let line = lines
            .next()
            .ok_or_else(|| malformed(line_no, "missing weight row".to_string()))?;
        *row = serde_json::from_str(&line).map_err(|e| malformed(line_no, e.to_string()))?;
    }
    let weights = LinearQ::from_rows(rows).map_err(|e| malformed(first_line_no, e.to_string()))?;

    match header.kind.as_str() {
        "softmax" => Ok(PolicySnapshot::Softmax(
            SoftmaxPolicy::new(weights, coder, header.temperature, header.uniform_mix)
                .map_err(|e| malformed(first_line_no, e.to_string()))?,
        )),
        "greedy" => Ok(PolicySnapshot::Greedy(
            greedy_policy(weights, coder, header.uniform_mix)
                .map_err(|e| malformed(first_line_no, e.to_string()))?,
        )),
        other => Err(malformed(first_line_no, format!("unknown kind {other:?}"))),
    }
}

pub fn read_snapshot(path: &Path) -> Result<PolicySnapshot, LinearError> {
    let file = File::open(path).map_err(|e| io_err(path, e))?;
    let lines = BufReader::new(file)
        .lines()
        .collect::<Result<Vec<_>, _>>()
        .map_err(|e| io_err(path, e))?;
    snapshot_from_lines(lines.into_iter(), 1)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn single_tiling_center_state_has_one_feature() {
        let coder = TileCoder::new(1, 2).unwrap();
        let center = State::new(
            (POSITION_MIN + POSITION_MAX) / 2.0,
            (VELOCITY_MIN + VELOCITY_MAX) / 2.0,
        )
        .unwrap();
        let feats = coder.features(&center);
        assert_eq!(feats.len(), 1);
        assert!((feats[0] as usize) < coder.feature_count());
    }

    #[test]
    fn corner_state_yields_valid_indices() {
        let coder = TileCoder::default();
        let corner = State::new(POSITION_MIN, VELOCITY_MIN).unwrap();
        let feats = coder.features(&corner);
        assert_eq!(feats.len(), 8);
        assert!(feats.iter().all(|&f| (f as usize) < coder.feature_count()));
    }

    #[test]
    fn nearby_states_in_same_cells_share_features() {
        let coder = TileCoder::default();
        let a = State::new(-0.500, 0.010).unwrap();
        let b = State::new(-0.4999, 0.0100001).unwrap();
        assert_eq!(coder.features(&a), coder.features(&b));
    }

    #[test]
    fn q_values_are_sums_over_active_features() {
        let coder = TileCoder::default();
        let state = State::new(-0.5, 0.0).unwrap();
        let zero = LinearQ::zeros(coder.feature_count());
        assert_eq!(zero.q_values(&coder, &state), [0.0, 0.0, 0.0]);

        let ones = LinearQ::from_rows([
            vec![1.0; coder.feature_count()],
            vec![1.0; coder.feature_count()],
            vec![1.0; coder.feature_count()],
        ])
        .unwrap();
        assert_eq!(ones.q_values(&coder, &state), [8.0, 8.0, 8.0]);
    }

    #[test]
    fn inactive_feature_perturbation_changes_nothing() {
        let coder = TileCoder::default();
        let state = State::new(-0.5, 0.0).unwrap();
        let active = coder.features(&state);
        let mut q = LinearQ::zeros(coder.feature_count());
        let inactive = (0..coder.feature_count() as u32)
            .find(|f| !active.contains(f))
            .unwrap();
        *q.weight_mut(1, inactive as usize) = 123.0;
        assert_eq!(q.q_values(&coder, &state), [0.0, 0.0, 0.0]);
    }

    #[test]
    fn softmax_matches_hand_arithmetic() {
        // Equal logits, no mix.
        let p = mixed_softmax(&[0.0, 0.0, 0.0], 1.0, 0.0);
        for v in p {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        // ln 2 logit doubles the first probability.
        let p = mixed_softmax(&[2f64.ln(), 0.0, 0.0], 1.0, 0.0);
        assert!((p[0] - 0.5).abs() < 1e-12);
        assert!((p[1] - 0.25).abs() < 1e-12);
        assert!((p[2] - 0.25).abs() < 1e-12);
        // Greedy limit with 30% uniform mix.
        let p = mixed_softmax(&[1e6, 0.0, 0.0], 1.0, 0.3);
        assert!((p[0] - 0.8).abs() < 1e-12);
        assert!((p[1] - 0.1).abs() < 1e-12);
        assert!((p[2] - 0.1).abs() < 1e-12);
    }

    #[test]
    fn greedy_policy_distributes_soften_mass() {
        let coder = TileCoder::new(1, 1).unwrap();
        let mk = |qs: [f64; 3], soften| {
            let q = LinearQ::from_rows([vec![qs[0]], vec![qs[1]], vec![qs[2]]]).unwrap();
            greedy_policy(q, coder.clone(), soften).unwrap()
        };
        let state = State::new(-0.5, 0.0).unwrap();

        let p = mk([1.0, 5.0, 2.0], 0.0).probs(&state);
        assert_eq!(p, [0.0, 1.0, 0.0]);

        let p = mk([1.0, 5.0, 2.0], 0.05).probs(&state);
        assert!((p[0] - 0.05 / 3.0).abs() < 1e-15);
        assert!((p[1] - (0.95 + 0.05 / 3.0)).abs() < 1e-15);
        assert!((p[2] - 0.05 / 3.0).abs() < 1e-15);

        // Ties resolve to the lowest index.
        let p = mk([5.0, 5.0, 2.0], 0.0).probs(&state);
        assert_eq!(p, [1.0, 0.0, 0.0]);
    }

    #[test]
    fn snapshot_round_trip() {
        let coder = TileCoder::new(2, 3).unwrap();
        let mut weights = LinearQ::zeros(coder.feature_count());
        *weights.weight_mut(0, 0) = -1.5;
        *weights.weight_mut(2, 17) = 0.25;
        let softmax = PolicySnapshot::Softmax(
            SoftmaxPolicy::new(weights.clone(), coder.clone(), 0.7, 0.3).unwrap(),
        );
        let greedy =
            PolicySnapshot::Greedy(greedy_policy(weights, coder, 0.05).unwrap());

        let dir = tempfile::tempdir().unwrap();
        for (name, snap) in [("s.jsonl", softmax), ("g.jsonl", greedy)] {
            let path = dir.path().join(name);
            write_snapshot(&path, &snap).unwrap();
            let read = read_snapshot(&path).unwrap();
            assert_eq!(read, snap);
        }
    }

    proptest! {
        #[test]
        fn emitted_distributions_are_valid(
            l0 in -50.0..50.0f64,
            l1 in -50.0..50.0f64,
            l2 in -50.0..50.0f64,
            temperature in 0.05..10.0f64,
            mix in 0.0..0.9f64,
        ) {
            let p = mixed_softmax(&[l0, l1, l2], temperature, mix);
            let sum: f64 = p.iter().sum();
            prop_assert!((sum - 1.0).abs() < 1e-12);
            for v in p {
                prop_assert!(v >= mix / 3.0 - 1e-15);
                prop_assert!(v.is_finite());
            }
        }

        #[test]
        fn positive_logit_scaling_preserves_argmax(
            l0 in -20.0..20.0f64,
            l1 in -20.0..20.0f64,
            l2 in -20.0..20.0f64,
            scale in 0.01..100.0f64,
        ) {
            let base = [l0, l1, l2];
            let scaled = [l0 * scale, l1 * scale, l2 * scale];
            let p_base = mixed_softmax(&base, 1.0, 0.0);
            let p_scaled = mixed_softmax(&scaled, 1.0, 0.0);
            prop_assert_eq!(argmax(&p_base), argmax(&base));
            prop_assert_eq!(argmax(&p_scaled), argmax(&base));
        }

        #[test]
        fn every_state_activates_one_feature_per_tiling(
            p in POSITION_MIN..POSITION_MAX,
            v in VELOCITY_MIN..VELOCITY_MAX,
            tilings in 1usize..12,
            tiles in 1usize..12,
        ) {
            let coder = TileCoder::new(tilings, tiles).unwrap();
            let feats = coder.features(&State::new(p, v).unwrap());
            prop_assert_eq!(feats.len(), tilings);
            for (tiling, &f) in feats.iter().enumerate() {
                let lo = (tiling * tiles * tiles) as u32;
                let hi = ((tiling + 1) * tiles * tiles) as u32;
                prop_assert!(f >= lo && f < hi);
            }
        }
    }
}
