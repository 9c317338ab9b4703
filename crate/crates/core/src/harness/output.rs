//! Result files: the per-run CSV, the config echo, and the figures.

use std::fs::File;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::plot::{render_line_chart, ChartSpec, Series};
use super::{AggregateTable, ExperimentConfig, HarnessError, IterationRow};
use crate::improve::Method;

/// One results.csv row: one estimator evaluation of one run iteration.
/// Rows after a run's stopping iteration are synthesized by carrying its
/// last values forward and flagging them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CsvRow {
    pub run: usize,
    pub iteration: usize,
    pub method: String,
    pub estimator: String,
    pub bound_method: String,
    pub delta: Option<f64>,
    pub b: Option<usize>,
    pub n_train: usize,
    pub n_test: usize,
    pub point_estimate: Option<f64>,
    pub lower_bound: Option<f64>,
    pub vb_hat: f64,
    pub true_value: Option<f64>,
    pub tv_distance: f64,
    pub stopped: bool,
    pub carried_forward: bool,
}

/// Expands one iteration record into CSV rows: one per estimator, or a
/// single estimator-less row when none are configured (the schema is
/// stable either way).
pub fn csv_rows_for(
    run: usize,
    iteration: usize,
    method: Method,
    row: &IterationRow,
    carried_forward: bool,
) -> Vec<CsvRow> {
    let stopped = row.stopped && !carried_forward;
    let base = CsvRow {
        run,
        iteration,
        method: method.to_string(),
        estimator: String::new(),
        bound_method: String::new(),
        delta: None,
        b: None,
        n_train: row.n_train,
        n_test: row.n_test,
        point_estimate: None,
        lower_bound: None,
        vb_hat: row.vb_hat,
        true_value: row.true_value,
        tv_distance: row.tv_mean,
        stopped,
        carried_forward,
    };
    if row.reports.is_empty() {
        return vec![base];
    }
    row.reports
        .iter()
        .map(|report| CsvRow {
            estimator: report.estimator.clone(),
            bound_method: report.method.to_string(),
            delta: Some(report.delta),
            b: Some(report.b),
            point_estimate: Some(report.point_estimate),
            lower_bound: Some(report.lower_bound),
            ..base.clone()
        })
        .collect()
}

pub fn write_results_csv(path: &Path, rows: &[CsvRow]) -> Result<(), HarnessError> {
    let mut writer = csv::Writer::from_path(path).map_err(HarnessError::Csv)?;
    for row in rows {
        writer.serialize(row)?;
    }
    writer.flush().map_err(|e| HarnessError::Io {
        path: path.display().to_string(),
        source: e,
    })?;
    Ok(())
}

pub fn read_results_csv(path: &Path) -> Result<Vec<CsvRow>, HarnessError> {
    let mut reader = csv::Reader::from_path(path).map_err(HarnessError::Csv)?;
    let mut rows = Vec::new();
    for record in reader.deserialize() {
        rows.push(record?);
    }
    Ok(rows)
}

const PALETTE: [&str; 6] = [
    "#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b",
];

fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len().max(1) as f64
}

fn se(values: &[f64]) -> Option<f64> {
    if values.len() < 2 {
        return None;
    }
    let m = mean(values);
    let n = values.len() as f64;
    let var = values.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (n - 1.0);
    Some((var / n).sqrt())
}

fn series_with_band(label: &str, per_iteration: &[(usize, Vec<f64>)], dashed: bool) -> Series {
    let mut points = Vec::new();
    let mut band = Vec::new();
    for (iteration, values) in per_iteration {
        let x = *iteration as f64;
        let m = mean(values);
        points.push((x, m));
        if let Some(s) = se(values) {
            band.push((x, m - s, m + s));
        }
    }
    Series {
        label: label.to_string(),
        color: None,
        points,
        band: (!band.is_empty()).then_some(band),
        dashed,
    }
}

/// Groups `values_of(row)` by iteration, in iteration order, filtered by
/// `keep`.
fn group_by_iteration(
    rows: &[CsvRow],
    keep: impl Fn(&CsvRow) -> bool,
    value_of: impl Fn(&CsvRow) -> Option<f64>,
    dedupe_runs: bool,
) -> Vec<(usize, Vec<f64>)> {
    let mut iterations: Vec<usize> = rows
        .iter()
        .filter(|r| keep(r))
        .map(|r| r.iteration)
        .collect();
    iterations.sort_unstable();
    iterations.dedup();
    iterations
        .into_iter()
        .map(|iteration| {
            let mut seen_runs = Vec::new();
            let values = rows
                .iter()
                .filter(|r| keep(r) && r.iteration == iteration)
                .filter(|r| {
                    if !dedupe_runs {
                        return true;
                    }
                    if seen_runs.contains(&r.run) {
                        false
                    } else {
                        seen_runs.push(r.run);
                        true
                    }
                })
                .filter_map(|r| value_of(r))
                .collect();
            (iteration, values)
        })
        .collect()
}

/// Lower-bound and true-value series against the data-source baseline, for
/// a single method's rows.
pub fn figure2_chart(rows: &[CsvRow], method: &str) -> ChartSpec {
    let estimators: Vec<String> = {
        let mut names: Vec<String> = rows
            .iter()
            .filter(|r| !r.estimator.is_empty())
            .map(|r| r.estimator.clone())
            .collect();
        names.sort();
        names.dedup();
        names
    };

    let mut series = Vec::new();
    for (i, name) in estimators.iter().enumerate() {
        let grouped = group_by_iteration(
            rows,
            |r| &r.estimator == name,
            |r| r.lower_bound,
            false,
        );
        let mut s = series_with_band(&format!("{name} lower bound"), &grouped, false);
        s.color = Some(PALETTE[i % PALETTE.len()].to_string());
        series.push(s);
    }

    let truth = group_by_iteration(rows, |r| r.true_value.is_some(), |r| r.true_value, true);
    if !truth.is_empty() {
        let mut s = series_with_band("true value", &truth, true);
        s.color = Some("#444444".to_string());
        series.push(s);
    }

    let vb_values: Vec<f64> = {
        let grouped = group_by_iteration(rows, |_| true, |r| Some(r.vb_hat), true);
        grouped.iter().flat_map(|(_, v)| v.iter().copied()).collect()
    };
    let baseline = mean(&vb_values);

    ChartSpec {
        title: format!("Safe evaluation, {method} improvement"),
        x_label: "iteration".to_string(),
        y_label: "undiscounted return".to_string(),
        series,
        hline: Some((baseline, "data source value".to_string())),
    }
}

/// Mean policy divergence per iteration, one series per method.
pub fn figure3_chart(rows_by_method: &[(String, Vec<CsvRow>)]) -> ChartSpec {
    let mut series = Vec::new();
    for (i, (method, rows)) in rows_by_method.iter().enumerate() {
        let grouped = group_by_iteration(rows, |_| true, |r| Some(r.tv_distance), true);
        let mut s = series_with_band(method, &grouped, false);
        s.color = Some(PALETTE[i % PALETTE.len()].to_string());
        series.push(s);
    }
    ChartSpec {
        title: "Divergence between estimated behavior and target policies".to_string(),
        x_label: "iteration".to_string(),
        y_label: "total variation distance".to_string(),
        series,
        hline: None,
    }
}

/// Writes results.csv, the figures, and a config echo into the configured
/// output directory. Returns the written paths.
pub fn emit_outputs(
    table: &AggregateTable,
    cfg: &ExperimentConfig,
) -> Result<Vec<PathBuf>, HarnessError> {
    let dir = cfg.output_dir.clone().ok_or_else(|| {
        HarnessError::Config("output_dir is required to emit outputs".to_string())
    })?;
    std::fs::create_dir_all(&dir).map_err(|e| HarnessError::Io {
        path: dir.display().to_string(),
        source: e,
    })?;
    let mut written = Vec::new();

    let csv_path = dir.join("results.csv");
    write_results_csv(&csv_path, &table.rows)?;
    written.push(csv_path);

    let config_path = dir.join("config.json");
    let mut file = File::create(&config_path).map_err(|e| HarnessError::Io {
        path: config_path.display().to_string(),
        source: e,
    })?;
    let config_json = serde_json::to_string_pretty(cfg).expect("config serializes");
    writeln!(file, "{config_json}").map_err(|e| HarnessError::Io {
        path: config_path.display().to_string(),
        source: e,
    })?;
    written.push(config_path);

    let method = table.method.to_string();
    let fig2_path = dir.join(format!("figure2_{method}.svg"));
    write_text(&fig2_path, &render_line_chart(&figure2_chart(&table.rows, &method)))?;
    written.push(fig2_path);

    let fig3_path = dir.join("figure3.svg");
    let by_method = vec![(method, table.rows.clone())];
    write_text(&fig3_path, &render_line_chart(&figure3_chart(&by_method)))?;
    written.push(fig3_path);

    Ok(written)
}

fn write_text(path: &Path, text: &str) -> Result<(), HarnessError> {
    std::fs::write(path, text).map_err(|e| HarnessError::Io {
        path: path.display().to_string(),
        source: e,
    })
}

#[cfg(test)]
mod tests {
    use super::super::tests_support::well_formed_xml;
    use super::super::{
        aggregate, prepare_behavior_policy, run_safe_eval_with, standard_evaluators,
        BootstrapSettings, EstimatorKind, ExperimentConfig, OpeSettings,
    };
    use super::*;
    use crate::improve::{ImproveConfig, Method};
    use crate::mdp::EnvConfig;

    fn tiny_cfg(estimators: Vec<EstimatorKind>) -> ExperimentConfig {
        ExperimentConfig {
            improve: ImproveConfig {
                updates_per_iteration: 10,
                ..ImproveConfig::for_method(Method::Bc)
            },
            estimators,
            gating_estimator: None,
            bootstrap: BootstrapSettings {
                b: 8,
                wdr_b: 8,
                ..BootstrapSettings::default()
            },
            ope: OpeSettings {
                mb_rollouts: 20,
                ..OpeSettings::default()
            },
            n_per_iteration: 8,
            n_train: 3,
            max_iterations: 2,
            runs: 2,
            base_seed: 3,
            env: EnvConfig {
                max_macro_steps: 15,
                ..EnvConfig::default()
            },
            behavior_episodes: 3,
            true_value_episodes: 5,
            continue_after_pass: false,
            output_dir: None,
        }
    }

    fn table_for(cfg: &ExperimentConfig) -> AggregateTable {
        let behavior = prepare_behavior_policy(cfg);
        let evaluators = standard_evaluators(cfg);
        let records: Vec<_> = (0..cfg.runs)
            .map(|r| {
                run_safe_eval_with(cfg, r as u64 + 1, &behavior, &evaluators, None).unwrap()
            })
            .collect();
        aggregate(&records, cfg.max_iterations).unwrap()
    }

    #[test]
    fn csv_round_trips_and_has_the_full_schema() {
        let cfg = tiny_cfg(vec![EstimatorKind::Mb, EstimatorKind::Wis]);
        let table = table_for(&cfg);
        // runs × iterations × estimators rows.
        assert_eq!(table.rows.len(), 2 * 2 * 2);

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("results.csv");
        write_results_csv(&path, &table.rows).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let header = text.lines().next().unwrap();
        assert_eq!(
            header,
            "run,iteration,method,estimator,bound_method,delta,b,n_train,n_test,\
             point_estimate,lower_bound,vb_hat,true_value,tv_distance,stopped,carried_forward"
        );
        let back = read_results_csv(&path).unwrap();
        assert_eq!(back, table.rows);
    }

    #[test]
    fn empty_estimator_list_keeps_schema_and_one_row_per_iteration() {
        let cfg = tiny_cfg(vec![]);
        let table = table_for(&cfg);
        assert_eq!(table.rows.len(), 2 * 2);
        for row in &table.rows {
            assert!(row.estimator.is_empty());
            assert!(row.lower_bound.is_none());
            assert!(row.vb_hat.is_finite());
            assert!(row.true_value.is_some());
        }
    }

    #[test]
    fn outputs_are_written_and_svgs_are_well_formed() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = tiny_cfg(vec![EstimatorKind::Mb]);
        cfg.output_dir = Some(dir.path().join("out"));
        let table = table_for(&cfg);
        let written = emit_outputs(&table, &cfg).unwrap();
        assert_eq!(written.len(), 4);
        for path in &written {
            assert!(path.exists(), "{} missing", path.display());
        }
        for path in written.iter().filter(|p| p.extension().unwrap() == "svg") {
            let text = std::fs::read_to_string(path).unwrap();
            assert!(well_formed_xml(&text), "{} is not well-formed", path.display());
            assert!(text.contains("<svg"));
        }
        let config_text =
            std::fs::read_to_string(dir.path().join("out").join("config.json")).unwrap();
        let parsed: ExperimentConfig = serde_json::from_str(&config_text).unwrap();
        assert_eq!(parsed, cfg);
    }

    #[test]
    fn unwritable_output_dir_reports_the_path() {
        let mut cfg = tiny_cfg(vec![EstimatorKind::Mb]);
        cfg.output_dir = Some(PathBuf::from("/proc/definitely/not/writable"));
        let table = table_for(&cfg);
        match emit_outputs(&table, &cfg) {
            Err(HarnessError::Io { path, .. }) => assert!(path.contains("/proc/definitely")),
            other => panic!("expected io error with path, got {other:?}"),
        }
    }
}
