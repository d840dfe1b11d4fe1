//! Calibration of a warmed-up critic's V(s0) against realized outcomes:
//! reliability deciles, ECE, Brier, AUC, and explained variance.
//!
//! ```bash
//! cargo run --release -p segcredit --example calibrate
//! ```

use rand_chacha::ChaCha8Rng;
use segcredit::critic::featurize;
use segcredit::metrics::{calibration, explained_variance};
use segcredit::policy::{sample_trajectory, PolicyParams, RolloutMode};
use segcredit::ppo::{train_loop, PpoConfig, WarmupSpec};
use segcredit::toolworld::{generate_world, WorldConfig};

fn main() {
    let world = generate_world(&WorldConfig::with_seed(1)).unwrap();
    let cfg = PpoConfig { seed: 2, max_steps: 0, ..PpoConfig::default() };
    let art = train_loop(&world, &cfg, &WarmupSpec::default()).expect("gate passes");
    println!(
        "warmed-up critic: gate auc {:.3}, sign {:.3}, ev {:.3}\n",
        art.gate.auc, art.gate.sign_accuracy, art.gate.explained_variance
    );

    // Fresh rollouts on held-out questions; V(s0) should track the realized
    // success rate decile by decile.
    let policy = PolicyParams::warm_start();
    let mut rng = <ChaCha8Rng as rand::SeedableRng>::seed_from_u64(99);
    let mut preds = Vec::new();
    let mut outcomes = Vec::new();
    for q in world.heldout_questions() {
        for mode in [RolloutMode::NoTool, RolloutMode::ForcedTool] {
            for _ in 0..3 {
                let rec = sample_trajectory(&policy, q, &world, mode, 1.0, &mut rng);
                preds.push(art.critic.value(&featurize(&rec.trajectory.boundaries[0], q)));
                outcomes.push(rec.reward());
            }
        }
    }
    let report = calibration(&preds, &outcomes).unwrap();
    println!("bin        mean_pred  actual  count");
    for b in &report.bins {
        if b.count == 0 {
            continue;
        }
        println!(
            "[{:.1},{:.1})    {:.3}    {:.3}   {}",
            b.lo, b.hi, b.mean_pred, b.actual_rate, b.count
        );
    }
    println!(
        "\nece {:.4}, brier {:.4}, auc {:.3}, ev {:.3}  (n = {})",
        report.ece,
        report.brier,
        report.auc,
        explained_variance(&preds, &outcomes).unwrap(),
        preds.len()
    );
}
