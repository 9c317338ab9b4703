//! Trajectory-level bootstrap resampling and approximate high-confidence
//! lower bounds.
//!
//! The statistic of interest is an off-policy estimate of a policy's value.
//! Whole trajectories are the i.i.d. unit, so resampling happens at the
//! trajectory level, and the estimator is re-run from scratch on every
//! resample — including any behavior-policy or model fitting inside it.
//! The resulting bootstrap distribution yields a `1-δ` lower bound via the
//! percentile rule or the bias-corrected and accelerated (BCa) adjustment.
//!
//! Bounds are approximate: the bootstrap distribution stands in for the
//! sampling distribution, which is only asymptotically justified.

use rand::RngCore;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};
use thiserror::Error;

use crate::data::Dataset;
use crate::ope::OpeError;
use crate::rng::stream_rng;

#[derive(Debug, Error)]
pub enum BootstrapError {
    #[error("dataset is empty")]
    EmptyDataset,

    #[error("invalid bootstrap config: {0}")]
    BadConfig(String),

    #[error("bootstrap statistics are empty")]
    EmptyStats,

    #[error("non-finite bootstrap statistic {0}")]
    NonFiniteStatistic(f64),

    #[error("estimator unstable: failed on {failed} of {total} resamples (> 10%)")]
    EstimatorUnstable { failed: usize, total: usize },

    #[error("estimator failed on the full test set: {0}")]
    PointEstimateFailed(String),
}

/// Estimator failure inside a bootstrap evaluation.
#[derive(Debug, Clone, Error)]
#[error("{0}")]
pub struct EstimatorError(pub String);

impl From<OpeError> for EstimatorError {
    fn from(e: OpeError) -> Self {
        EstimatorError(e.to_string())
    }
}

/// The bootstrapped statistic: a full estimation pipeline over a dataset.
/// The stream argument is derived per resample so results are independent
/// of evaluation order.
pub type Estimator<'a> = dyn Fn(&Dataset, &mut ChaCha8Rng) -> Result<f64, EstimatorError> + Sync + 'a;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BoundMethod {
    Percentile,
    Bca,
}

impl std::fmt::Display for BoundMethod {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            BoundMethod::Percentile => write!(f, "percentile"),
            BoundMethod::Bca => write!(f, "bca"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BootstrapConfig {
    /// Number of bootstrap resamples.
    pub b: usize,
    /// Risk level: the bound is a `1-delta` lower confidence bound.
    pub delta: f64,
    pub method: BoundMethod,
    pub seed: u64,
}

impl BootstrapConfig {
    pub fn validate(&self) -> Result<(), BootstrapError> {
        if self.b < 2 {
            return Err(BootstrapError::BadConfig(format!(
                "B must be >= 2, got {}",
                self.b
            )));
        }
        if !(self.delta > 0.0 && self.delta < 1.0) {
            return Err(BootstrapError::BadConfig(format!(
                "delta must lie in (0, 1), got {}",
                self.delta
            )));
        }
        Ok(())
    }
}

impl Default for BootstrapConfig {
    fn default() -> Self {
        Self {
            b: 2000,
            delta: 0.05,
            method: BoundMethod::Percentile,
            seed: 0,
        }
    }
}

/// Distribution summary of the bootstrap statistics.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BootstrapSummary {
    pub mean: f64,
    pub sd: f64,
    pub min: f64,
    pub q25: f64,
    pub median: f64,
    pub q75: f64,
    pub max: f64,
}

impl BootstrapSummary {
    fn from_sorted(sorted: &[f64]) -> Self {
        let n = sorted.len() as f64;
        let mean = sorted.iter().sum::<f64>() / n;
        let var = if sorted.len() < 2 {
            0.0
        } else {
            sorted.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)
        };
        let q = |p: f64| interpolated_quantile(sorted, p);
        Self {
            mean,
            sd: var.sqrt(),
            min: sorted[0],
            q25: q(0.25),
            median: q(0.5),
            q75: q(0.75),
            max: sorted[sorted.len() - 1],
        }
    }
}

/// The output of one high-confidence evaluation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LowerBoundReport {
    pub estimator: String,
    /// Estimate on the full test set.
    pub point_estimate: f64,
    /// `1-delta` lower bound on the policy's value.
    pub lower_bound: f64,
    pub method: BoundMethod,
    pub delta: f64,
    pub b: usize,
    pub seed: u64,
    /// Trajectories in the test set.
    pub n: usize,
    pub stats: BootstrapSummary,
    /// Resamples the estimator failed on (skipped).
    pub failed_resamples: usize,
    /// True when BCa was requested but degenerate inputs forced the
    /// percentile rule.
    pub bca_fallback: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
}

/// Same-size resample of whole trajectories, drawn with replacement.
pub fn resample(d: &Dataset, rng: &mut dyn RngCore) -> Dataset {
    let n = d.len();
    let trajectories = (0..n)
        .map(|_| {
            let idx = ((crate::rng::unit_f64(rng) * n as f64) as usize).min(n - 1);
            d.trajectories[idx].clone()
        })
        .collect();
    Dataset {
        trajectories,
        meta: d.meta.clone(),
    }
}

/// Linear interpolation between order statistics with 1-indexed ranks:
/// rank `h = 1 + p(n-1)`. `sorted` must be ascending.
fn interpolated_quantile(sorted: &[f64], p: f64) -> f64 {
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let h = 1.0 + p * (n as f64 - 1.0);
    let lo = (h.floor() as usize - 1).min(n - 1);
    let frac = h - h.floor();
    if lo + 1 >= n {
        sorted[n - 1]
    } else {
        sorted[lo] + frac * (sorted[lo + 1] - sorted[lo])
    }
}

fn checked_sorted(stats: &[f64]) -> Result<Vec<f64>, BootstrapError> {
    if stats.is_empty() {
        return Err(BootstrapError::EmptyStats);
    }
    if let Some(&bad) = stats.iter().find(|x| !x.is_finite()) {
        return Err(BootstrapError::NonFiniteStatistic(bad));
    }
    let mut sorted = stats.to_vec();
    sorted.sort_by(f64::total_cmp);
    Ok(sorted)
}

fn check_delta(delta: f64) -> Result<(), BootstrapError> {
    if delta > 0.0 && delta < 1.0 {
        Ok(())
    } else {
        Err(BootstrapError::BadConfig(format!(
            "delta must lie in (0, 1), got {delta}"
        )))
    }
}

/// Empirical `delta`-quantile of the bootstrap statistics.
pub fn percentile_lower_bound(stats: &[f64], delta: f64) -> Result<f64, BootstrapError> {
    check_delta(delta)?;
    let sorted = checked_sorted(stats)?;
    Ok(interpolated_quantile(&sorted, delta))
}

/// BCa bound plus whether degenerate inputs forced the percentile rule.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BcaBound {
    pub lower_bound: f64,
    pub fell_back_to_percentile: bool,
}

/// Bias-corrected and accelerated bound: the percentile level is shifted by
/// the bias term `z0` (fraction of statistics below the point estimate) and
/// the acceleration `a` (jackknife skewness).
pub fn bca_lower_bound(
    stats: &[f64],
    theta_hat: f64,
    jackknife_stats: &[f64],
    delta: f64,
) -> Result<BcaBound, BootstrapError> {
    check_delta(delta)?;
    let sorted = checked_sorted(stats)?;
    let b = sorted.len();

    let count_less = sorted.iter().filter(|&&x| x < theta_hat).count();
    if count_less == 0 || count_less == b {
        // The point estimate sits outside the bootstrap distribution; the
        // bias correction is infinite, so report the plain percentile bound.
        return Ok(BcaBound {
            lower_bound: interpolated_quantile(&sorted, delta),
            fell_back_to_percentile: true,
        });
    }

    let normal = Normal::new(0.0, 1.0).expect("standard normal");
    let z0 = normal.inverse_cdf(count_less as f64 / b as f64);
    let z_delta = normal.inverse_cdf(delta);

    let acceleration = if jackknife_stats.len() < 2 {
        0.0
    } else {
        let n = jackknife_stats.len() as f64;
        let mean = jackknife_stats.iter().sum::<f64>() / n;
        let d2: f64 = jackknife_stats.iter().map(|x| (mean - x).powi(2)).sum();
        let d3: f64 = jackknife_stats.iter().map(|x| (mean - x).powi(3)).sum();
        if d2 <= 0.0 {
            0.0
        } else {
            d3 / (6.0 * d2.powf(1.5))
        }
    };

    let shift = z0 + z_delta;
    let denom = 1.0 - acceleration * shift;
    if denom <= 0.0 {
        return Ok(BcaBound {
            lower_bound: interpolated_quantile(&sorted, delta),
            fell_back_to_percentile: true,
        });
    }
    let adjusted = normal
        .cdf(z0 + shift / denom)
        .clamp(1e-12, 1.0 - 1e-12);
    Ok(BcaBound {
        lower_bound: interpolated_quantile(&sorted, adjusted),
        fell_back_to_percentile: false,
    })
}

/// Runs the full high-confidence pipeline: point estimate, `B` resampled
/// re-estimates (each refitting whatever the estimator fits internally),
/// and the configured lower bound.
///
/// Isolated estimator failures are skipped and counted; more than 10%
/// failures abort with [`BootstrapError::EstimatorUnstable`].
pub fn hcope_lower_bound(
    estimator: &Estimator<'_>,
    d_test: &Dataset,
    cfg: &BootstrapConfig,
    name: &str,
) -> Result<LowerBoundReport, BootstrapError> {
    cfg.validate()?;
    if d_test.is_empty() {
        return Err(BootstrapError::EmptyDataset);
    }

    let point_estimate = estimator(d_test, &mut stream_rng(cfg.seed, &[0]))
        .map_err(|e| BootstrapError::PointEstimateFailed(e.to_string()))?;

    let results: Vec<Option<f64>> = (0..cfg.b)
        .into_par_iter()
        .map(|b| {
            let mut resample_rng = stream_rng(cfg.seed, &[1, b as u64]);
            let resampled = resample(d_test, &mut resample_rng);
            let mut estimator_rng = stream_rng(cfg.seed, &[2, b as u64]);
            estimator(&resampled, &mut estimator_rng).ok()
        })
        .collect();
    let stats: Vec<f64> = results.iter().filter_map(|r| *r).collect();
    let failed = cfg.b - stats.len();
    if failed * 10 > cfg.b {
        return Err(BootstrapError::EstimatorUnstable {
            failed,
            total: cfg.b,
        });
    }

    let sorted = checked_sorted(&stats)?;
    let (lower_bound, bca_fallback, note) = match cfg.method {
        BoundMethod::Percentile => (interpolated_quantile(&sorted, cfg.delta), false, None),
        BoundMethod::Bca => {
            if d_test.len() < 2 {
                (
                    interpolated_quantile(&sorted, cfg.delta),
                    true,
                    Some("jackknife needs at least 2 trajectories".to_string()),
                )
            } else {
                let jackknife: Vec<f64> = (0..d_test.len())
                    .into_par_iter()
                    .filter_map(|i| {
                        let mut held_out = d_test.clone();
                        held_out.trajectories.remove(i);
                        let mut rng = stream_rng(cfg.seed, &[3, i as u64]);
                        estimator(&held_out, &mut rng).ok()
                    })
                    .collect();
                let bca = bca_lower_bound(&sorted, point_estimate, &jackknife, cfg.delta)?;
                let note = bca
                    .fell_back_to_percentile
                    .then(|| "bca degenerate, used percentile".to_string());
                (bca.lower_bound, bca.fell_back_to_percentile, note)
            }
        }
    };

    Ok(LowerBoundReport {
        estimator: name.to_string(),
        point_estimate,
        lower_bound,
        method: cfg.method,
        delta: cfg.delta,
        b: cfg.b,
        seed: cfg.seed,
        n: d_test.len(),
        stats: BootstrapSummary::from_sorted(&sorted),
        failed_resamples: failed,
        bca_fallback,
        note,
    })
}
