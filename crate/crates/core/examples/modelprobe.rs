//! Probe: where does the model-based estimate's pessimism come from, and
//! how do start ranges shape minimum episode lengths. Not part of the suite.

use opegate_core::data::{behavior_value_stats, collect, make_behavior_policy, split, SplitSpec};
use opegate_core::harness::true_value_oracle;
use opegate_core::improve::{improve, ImproveConfig, Method};
use opegate_core::mdp::{sample_action, DiscretePolicy, EnvConfig, State};
use opegate_core::ope::{build_model, StateDiscretizer, TERMINAL_CELL};
use opegate_core::rng::{stream_rng, unit_f64};

fn main() {
    // Minimum episode lengths under uniform-random behavior.
    for (pos_max, vel) in [
        (0.6, 0.07),
        (-0.2, 0.07),
        (-0.3, 0.07),
        (-0.4, 0.04),
        (-0.5, 0.03),
        (-0.6, 0.07),
    ] {
        let env = EnvConfig {
            start_position_max: pos_max,
            start_velocity_min: -vel,
            start_velocity_max: vel,
            ..EnvConfig::default()
        };
        let uniform = |_: &State| [1.0 / 3.0; 3];
        let d = collect(&uniform, 600, &env, 7, 0, "u").unwrap();
        let min_len = d.trajectories.iter().map(|t| t.len()).min().unwrap();
        let mean_len =
            d.trajectories.iter().map(|t| t.len()).sum::<usize>() as f64 / d.len() as f64;
        let (v, _) = behavior_value_stats(&d).unwrap();
        println!(
            "pos_max {pos_max} vel ±{vel}: uniform v={v:.1}, len min {min_len} mean {mean_len:.0}"
        );
    }

    // Model pessimism probe at one promising start range.
    let env = EnvConfig {
        start_position_max: -0.4,
        start_velocity_min: -0.04,
        start_velocity_max: 0.04,
        ..EnvConfig::default()
    };
    for episodes in [100usize, 150, 250, 400] {
        let pb = make_behavior_policy(&mut stream_rng(1, &[1]), episodes, &env);
        let d = collect(&pb, 600, &env, 8, 0, "b").unwrap();
        let (v, _) = behavior_value_stats(&d).unwrap();
        println!("behavior @ {episodes}: v={v:.1}");
    }

    let behavior = make_behavior_policy(&mut stream_rng(1, &[1]), 250, &env);
    // Train a DDQN target on four fresh 20-trajectory train splits.
    let mut cfg = ImproveConfig::for_method(Method::Ddqn);
    cfg.seed = 11;
    let mut state = None;
    let mut policy = None;
    let mut test_set = None;
    for iter in 0..4 {
        let d = collect(&behavior, 300, &env, 100 + iter, iter, "b").unwrap();
        let (train, test) = split(
            &d,
            &SplitSpec {
                n_train: 20,
                shuffle_seed: iter,
            },
        )
        .unwrap();
        let (s, p) = improve(&train, &cfg, state.take()).unwrap();
        state = Some(s);
        policy = Some(p);
        test_set = Some(test);
    }
    let policy = policy.unwrap();
    let test = test_set.unwrap();
    let truth = true_value_oracle(&policy, &env, 2000, &mut stream_rng(3, &[])).unwrap();
    let (vb, _) = behavior_value_stats(&test).unwrap();
    println!("ddqn true value: {truth:.1}, test-set vb: {vb:.1}");

    for bins in [12usize, 16, 24, 32] {
        let disc = StateDiscretizer::new(bins);
        let model = build_model(&test, disc, 1.0, 250).unwrap();
        // Hand-rolled model rollouts with sink accounting.
        let mut rng = stream_rng(9, &[]);
        let mut total = 0.0;
        let mut sunk = 0usize;
        let mut clean_total = 0.0;
        let mut clean_count = 0usize;
        let rollouts = 3000;
        for _ in 0..rollouts {
            let mut cell = {
                let u = unit_f64(&mut rng);
                let mut acc = 0.0;
                let mut chosen = model.initial_distribution()[0].0;
                for &(c, p) in model.initial_distribution() {
                    acc += p;
                    if u < acc {
                        chosen = c;
                        break;
                    }
                }
                chosen as usize
            };
            let mut ret = 0.0;
            let mut hit_sink = false;
            for _ in 0..250 {
                let probs = policy.probs(&disc.cell_center(cell));
                let a = sample_action(&probs, &mut rng).index();
                ret += model.reward(cell, a);
                let outcomes = model.outcomes(cell, a);
                if outcomes.is_empty() {
                    hit_sink = true;
                    continue;
                }
                let u = unit_f64(&mut rng);
                let mut acc = 0.0;
                let mut next = outcomes[outcomes.len() - 1].0;
                for &(c, p) in outcomes {
                    acc += p;
                    if u < acc {
                        next = c;
                        break;
                    }
                }
                if next == TERMINAL_CELL {
                    break;
                }
                cell = next as usize;
            }
            total += ret;
            if hit_sink {
                sunk += 1;
            } else {
                clean_total += ret;
                clean_count += 1;
            }
        }
        println!(
            "bins {bins}: mb={:.1}, sink fraction {:.2}, clean-rollout mean {:.1} (n={})",
            total / rollouts as f64,
            sunk as f64 / rollouts as f64,
            clean_total / clean_count.max(1) as f64,
            clean_count
        );
    }
}

// (extended probe appended during calibration)
