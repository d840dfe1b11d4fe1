//! Paired short PPO runs at lambda = 0 (per-segment credit) and lambda = 1
//! (trajectory-level credit at segment decision points) on the same world
//! and seed: watch the Tier-2 tool rates diverge.
//!
//! ```bash
//! cargo run --release -p segcredit --example train_selectivity
//! ```

use segcredit::ppo::{train_loop, PpoConfig, WarmupSpec};
use segcredit::toolworld::{generate_world, WorldConfig};

fn main() {
    let world = generate_world(&WorldConfig::with_seed(1)).unwrap();
    println!("paired 60-step runs on an identical world and seed:\n");
    for lambda in [0.0, 1.0] {
        let cfg = PpoConfig { seed: 3, lambda, max_steps: 60, eval_interval: 30, ..PpoConfig::default() };
        let spec = WarmupSpec::default();
        let art = train_loop(&world, &cfg, &spec).expect("gate passes on the default world");
        let first = &art.log_rows[0];
        let tail: Vec<_> = art.log_rows.iter().rev().take(10).collect();
        let t2 = tail.iter().map(|r| r.tier2_tool_rate).sum::<f64>() / tail.len() as f64;
        let t1 = tail.iter().map(|r| r.tier1_tool_rate).sum::<f64>() / tail.len() as f64;
        let reward = tail.iter().map(|r| r.mean_reward).sum::<f64>() / tail.len() as f64;
        println!(
            "lambda {lambda}: gate auc {:.2} | step0 tier2 tool rate {:.2} -> tail {:.2} | tier1 tail {:.2} | reward {:.2}",
            art.gate.auc, first.tier2_tool_rate, t2, t1, reward
        );
        let mixed = segcredit::ppo::mixed_sign_trajectories(&art.advantage_rows);
        println!(
            "           mixed-sign trajectories in the advantage log: {mixed}{}",
            if lambda == 1.0 { " (structurally zero at lambda 1)" } else { "" }
        );
    }
}
