//! Probe: valley-start variants — episode lengths, behavior quality, and a
//! full desk run per candidate. Not part of the suite.

use opegate_core::data::{behavior_value_stats, collect, make_behavior_policy};
use opegate_core::harness::{run_safe_eval, EstimatorKind, ExperimentConfig};
use opegate_core::improve::Method;
use opegate_core::mdp::{EnvConfig, State};
use opegate_core::rng::stream_rng;

fn probe_env(env: &EnvConfig, label: &str) {
    let uniform = |_: &State| [1.0 / 3.0; 3];
    let d = collect(&uniform, 500, env, 7, 0, "u").unwrap();
    let min_len = d.trajectories.iter().map(|t| t.len()).min().unwrap();
    let (vu, _) = behavior_value_stats(&d).unwrap();
    print!("{label}: uniform v={vu:.1} minlen {min_len}");
    for episodes in [100usize, 150, 250] {
        let pb = make_behavior_policy(&mut stream_rng(1, &[1]), episodes, env);
        let d = collect(&pb, 400, env, 8, 0, "b").unwrap();
        let (v, _) = behavior_value_stats(&d).unwrap();
        let min_b = d.trajectories.iter().map(|t| t.len()).min().unwrap();
        print!("  pb@{episodes}: {v:.0} (minlen {min_b})");
    }
    println!();
}

fn main() {
    let valley = EnvConfig {
        start_position_max: -0.4,
        start_position_min: -0.6,
        start_velocity_min: -0.01,
        start_velocity_max: 0.01,
        ..EnvConfig::default()
    };
    let wide_valley = EnvConfig {
        start_position_max: -0.3,
        start_position_min: -0.9,
        start_velocity_min: -0.02,
        start_velocity_max: 0.02,
        ..EnvConfig::default()
    };
    probe_env(&valley, "valley");
    probe_env(&wide_valley, "wide-valley");

    for (env, episodes, label) in [
        (valley.clone(), 150usize, "valley"),
        (wide_valley.clone(), 150, "wide-valley"),
    ] {
        for method in [Method::Ddqn, Method::Bc] {
            println!("== desk {method} {label} ==");
            let mut cfg = ExperimentConfig::desk(method);
            cfg.env = env.clone();
            cfg.behavior_episodes = episodes;
            cfg.estimators = vec![EstimatorKind::Wis, EstimatorKind::Mb, EstimatorKind::Wdr];
            cfg.gating_estimator = Some(EstimatorKind::Mb);
            cfg.true_value_episodes = 400;
            cfg.base_seed = 2;
            let record = run_safe_eval(&cfg, 42).unwrap();
            for row in &record.rows {
                let bounds: Vec<String> = row
                    .reports
                    .iter()
                    .map(|r| {
                        format!("{}={:.1}/{:.1}", r.estimator, r.lower_bound, r.point_estimate)
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
}
