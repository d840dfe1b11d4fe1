//! Warm up the critic on the four outcome buckets and run the verification
//! gate, comparing curated, random-data, and cold-start variants.
//!
//! ```bash
//! cargo run --release -p segcredit --example critic_warmup
//! ```

use rand_chacha::ChaCha8Rng;
use segcredit::critic::{
    build_gate_set, build_random_warmup_set, build_warmup_set, label_all, train_mc, verify_gate,
    BucketCounts, CriticParams, MlpCritic, TrainMcConfig,
};
use segcredit::policy::PolicyParams;
use segcredit::toolworld::{generate_world, Tier, WorldConfig};

fn stream(seed: u64) -> ChaCha8Rng {
    <ChaCha8Rng as rand::SeedableRng>::seed_from_u64(seed)
}

fn main() {
    let world = generate_world(&WorldConfig::with_seed(1)).unwrap();
    let policy = PolicyParams::warm_start();
    let labels = label_all(&world, &policy, &mut stream(11));
    let tier2 = labels.values().filter(|l| l.tier == Tier::Tier2).count() as f64
        / labels.len() as f64;
    println!("tier composition: {:.1}% Tier 2", 100.0 * tier2);

    let heldout = world.heldout_questions();
    let items = build_gate_set(&world, &policy, &labels, &heldout, 2, &mut stream(12));
    println!("gate set: {} held-out rollouts", items.len());

    // Curated: the four outcome buckets, tier-balanced.
    let counts = BucketCounts::from_tier_fractions(1200, tier2);
    let set = build_warmup_set(&world, &policy, &counts, &labels, &mut stream(13)).unwrap();
    let examples: Vec<_> = set.iter().map(|e| (e.features, e.target)).collect();
    println!("curated warm-up: {} trajectories -> {} boundary examples", counts.total(), set.len());
    let init = CriticParams::new(128, &mut stream(14));
    let curated = train_mc(&init, &examples, &TrainMcConfig::default(), &mut stream(15)).unwrap();
    let report = verify_gate(&MlpCritic { params: &curated }, &items).unwrap();
    println!(
        "curated: auc {:.3}, sign {:.3}, ev {:.3}, passed {}",
        report.auc, report.sign_accuracy, report.explained_variance, report.passed
    );

    // Random-data: uncurated free-mode rollouts, real targets.
    let rset = build_random_warmup_set(&world, &policy, 1200, &labels, &mut stream(16));
    let rex: Vec<_> = rset.iter().map(|e| (e.features, e.target)).collect();
    let random = train_mc(&init, &rex, &TrainMcConfig::default(), &mut stream(17)).unwrap();
    let rreport = verify_gate(&MlpCritic { params: &random }, &items).unwrap();
    println!(
        "random:  auc {:.3}, sign {:.3}, ev {:.3}, passed {}",
        rreport.auc, rreport.sign_accuracy, rreport.explained_variance, rreport.passed
    );

    // Cold start: the zero-initialized head predicts exactly 0.5.
    let cold = CriticParams::new(128, &mut stream(18));
    let creport = verify_gate(&MlpCritic { params: &cold }, &items).unwrap();
    println!(
        "cold:    auc {:.3}, sign {:.3}, ev {:.3}, passed {}",
        creport.auc, creport.sign_accuracy, creport.explained_variance, creport.passed
    );
}
