//! Probe: dry-run of the desk-scale acceptance checks on a few runs.
//! Not part of the suite.

use opegate_core::harness::{run_safe_eval, EstimatorKind, ExperimentConfig};
use opegate_core::improve::Method;

fn main() {
    // (a) DDQN: MB gate passes by iteration <= 6; (c) WIS below MB at the
    // final iteration.
    let mut cfg = ExperimentConfig::desk(Method::Ddqn);
    cfg.estimators = vec![EstimatorKind::Wis, EstimatorKind::Mb];
    cfg.gating_estimator = Some(EstimatorKind::Mb);
    cfg.true_value_episodes = 300;
    cfg.base_seed = 7;
    println!("== ddqn desk ==");
    for seed in [1u64, 2, 3, 4] {
        let record = run_safe_eval(&cfg, seed).unwrap();
        for row in &record.rows {
            let wis = &row.reports[0];
            let mb = &row.reports[1];
            println!(
                "  seed {seed} iter {}: vb={:.0}±{:.0} true={} wis={:.0}{} mb={:.0}/{:.0} stop={}",
                row.iteration,
                row.vb_hat,
                row.vb_se,
                row.true_value.map(|t| format!("{t:.0}")).unwrap_or_default(),
                wis.lower_bound,
                if wis.note.is_some() { "(FB)" } else { "" },
                mb.lower_bound,
                mb.point_estimate,
                row.stopped,
            );
        }
    }

    // (b) BC: no estimator bound above vb + 1 SE at any iteration.
    let mut cfg = ExperimentConfig::desk(Method::Bc);
    cfg.estimators = vec![EstimatorKind::Wis, EstimatorKind::Mb, EstimatorKind::Wdr];
    cfg.gating_estimator = Some(EstimatorKind::Mb);
    cfg.true_value_episodes = 300;
    cfg.base_seed = 7;
    println!("== bc desk ==");
    for seed in [1u64, 2] {
        let record = run_safe_eval(&cfg, seed).unwrap();
        let mut worst = f64::NEG_INFINITY;
        let mut desc = String::new();
        for row in &record.rows {
            for report in &row.reports {
                let margin = report.lower_bound - (row.vb_hat + row.vb_se);
                if margin > worst {
                    worst = margin;
                    desc = format!(
                        "iter {} {} lb {:.1} vs {:.1}",
                        row.iteration,
                        report.estimator,
                        report.lower_bound,
                        row.vb_hat + row.vb_se
                    );
                }
            }
        }
        let last = record.rows.last().unwrap();
        println!(
            "  seed {seed}: stop={:?} true_last={} tv_last={:.2} worst margin {:.1} ({desc})",
            record.stopped_at(),
            last.true_value.map(|t| format!("{t:.0}")).unwrap_or_default(),
            last.tv_mean,
            worst,
        );
    }
}
