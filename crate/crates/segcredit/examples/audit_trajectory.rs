//! Per-segment advantage audit: roll out one question, value every
//! boundary with a warmed-up critic, and print the advantage of each
//! segment — the workflow behind the sign-behavior tables.
//!
//! ```bash
//! cargo run --release -p segcredit --example audit_trajectory
//! ```

use rand_chacha::ChaCha8Rng;
use segcredit::advantage::{segment_advantages, telescope_check};
use segcredit::critic::featurize;
use segcredit::policy::{sample_trajectory, PolicyParams, RolloutMode};
use segcredit::ppo::{train_loop, PpoConfig, WarmupSpec};
use segcredit::toolworld::{generate_world, QuestionKind, Tier, WorldConfig};

fn main() {
    let world = generate_world(&WorldConfig::with_seed(1)).unwrap();
    let cfg = PpoConfig { seed: 4, max_steps: 0, ..PpoConfig::default() };
    let art = train_loop(&world, &cfg, &WarmupSpec::default()).expect("gate passes");
    let policy = PolicyParams::warm_start();

    // A tool-dependent multi-hop question, forced through the tool path.
    let q = world
        .questions
        .iter()
        .find(|q| {
            q.hops == 2
                && q.kind == QuestionKind::Retrieval
                && art.tiers.get(&q.id).map(|l| l.tier) == Some(Tier::Tier1)
        })
        .expect("a Tier-1 2-hop question exists");
    println!("question {}: {:?}\n", q.id, q.text);

    let mut rng = <ChaCha8Rng as rand::SeedableRng>::seed_from_u64(5);
    let rec = sample_trajectory(&policy, q, &world, RolloutMode::ForcedTool, 1.0, &mut rng);
    let values: Vec<f64> = rec
        .trajectory
        .segment_start_boundaries()
        .iter()
        .map(|b| art.critic.value(&featurize(b, q)))
        .collect();
    let adv = segment_advantages(&values, rec.reward()).unwrap();

    println!("reward: {}", rec.reward());
    println!("segment      kind        V_before  V_after  advantage");
    for (k, seg) in rec.trajectory.segments.iter().enumerate() {
        let v_after = if k + 1 < values.len() { values[k + 1] } else { rec.reward() };
        println!(
            "{k:>7}  {:>10}    {:>7.3}  {:>7.3}   {:>+8.3}",
            format!("{:?}", seg.kind).to_lowercase(),
            values[k],
            v_after,
            adv.values[k]
        );
    }
    println!(
        "\nsum of advantages = {:+.3} = R - V(s0) (residual {:.1e})",
        adv.values.iter().sum::<f64>(),
        telescope_check(&adv)
    );
    for (p, ann) in rec.annotations.iter().enumerate() {
        println!(
            "pair {p}: retrieval surfaced the fact = {}, extraction kept it = {}",
            ann.surfaced, ann.kept
        );
    }
}
