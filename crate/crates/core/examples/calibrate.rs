//! Calibration sweep: prints policy values, per-iteration bounds, and
//! timing so defaults can be tuned. Not part of the test suite.

use std::time::Instant;

use opegate_core::data::{behavior_value_stats, collect, make_behavior_policy};
use opegate_core::harness::{
    prepare_behavior_policy, run_safe_eval, true_value_oracle, EstimatorKind, ExperimentConfig,
};
use opegate_core::improve::Method;
use opegate_core::mdp::{EnvConfig, State};
use opegate_core::rng::stream_rng;

fn policy_value(policy: &dyn opegate_core::mdp::DiscretePolicy, env: &EnvConfig) -> (f64, f64) {
    let d = collect(policy, 1000, env, 9999, 0, "probe").unwrap();
    behavior_value_stats(&d).unwrap()
}

fn main() {
    let env = EnvConfig::default();
    let uniform = |_: &State| [1.0 / 3.0; 3];
    let (v_uniform, se_u) = policy_value(&uniform, &env);
    println!("uniform random: {v_uniform:.1} ± {se_u:.1}");

    for episodes in [50usize, 100, 150, 300, 600] {
        let pb = make_behavior_policy(&mut stream_rng(1, &[1]), episodes, &env);
        let (v, se) = policy_value(&pb, &env);
        println!("behavior policy @ {episodes} episodes: {v:.1} ± {se:.1}");
    }

    let mut cfg = ExperimentConfig::desk(Method::Ddqn);
    cfg.estimators = vec![EstimatorKind::Wis, EstimatorKind::Mb, EstimatorKind::Wdr];
    cfg.gating_estimator = Some(EstimatorKind::Mb);
    cfg.true_value_episodes = 1000;
    cfg.base_seed = 1;

    let behavior = prepare_behavior_policy(&cfg);
    let (vb, vb_se) = policy_value(&behavior, &env);
    println!("experiment behavior policy: {vb:.1} ± {vb_se:.1}");
    let oracle = true_value_oracle(&behavior, &env, 1000, &mut stream_rng(5, &[])).unwrap();
    println!("behavior oracle check: {oracle:.1}");

    for method in [Method::Ddqn, Method::Bc] {
        println!("== {method} desk run ==");
        let mut mcfg = cfg.clone();
        mcfg.improve = opegate_core::improve::ImproveConfig::for_method(method);
        let start = Instant::now();
        let record = run_safe_eval(&mcfg, 42).unwrap();
        println!("run took {:.1}s", start.elapsed().as_secs_f64());
        for row in &record.rows {
            let bounds: Vec<String> = row
                .reports
                .iter()
                .map(|r| {
                    format!(
                        "{}={:.1}(pt {:.1}{})",
                        r.estimator,
                        r.lower_bound,
                        r.point_estimate,
                        if r.note.is_some() { ", FALLBACK" } else { "" }
                    )
                })
                .collect();
            println!(
                "iter {}: vb={:.1}±{:.1} true={} tv={:.3} stopped={} {}",
                row.iteration,
                row.vb_hat,
                row.vb_se,
                row.true_value.map(|t| format!("{t:.1}")).unwrap_or_default(),
                row.tv_mean,
                row.stopped,
                bounds.join(" ")
            );
        }
    }
}
