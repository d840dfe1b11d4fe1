//! Per-segment advantages from boundary values and a terminal reward: the
//! one-step form, the lambda family, telescoping, and the lambda = 1
//! collapse to trajectory-level credit.
//!
//! ```bash
//! cargo run -p segcredit --example advantages
//! ```

use segcredit::advantage::{gae_segment, segment_advantages, smdp_td, telescope_check};

fn main() {
    // An invoke-assimilate-commit triple: boundary values at the segment
    // starts, terminal reward replacing the final value.
    let values = [0.3, 0.6, 0.8];
    let adv = segment_advantages(&values, 1.0).unwrap();
    println!("V = {values:?}, R = 1");
    for (name, a) in ["invoke (query quality)", "assimilate (extraction quality)", "commit (answer commitment)"]
        .iter()
        .zip(&adv.values)
    {
        println!("  A({name}) = {a:+.3}");
    }
    println!("  telescoping residual: {:.2e}", telescope_check(&adv));

    // Within-trajectory sign divergence: a good search whose extraction
    // lost the fact, in a failed episode.
    let mixed = segment_advantages(&[0.5, 0.9, 0.4], 0.0).unwrap();
    println!("\nV = [0.5, 0.9, 0.4], R = 0 -> A = {:?}", mixed.values);
    println!("  invoke positive, assimilate negative, in one trajectory");

    // The lambda family interpolates toward trajectory-level credit: at
    // lambda = 1 every segment gets R - V_k and the signs can no longer
    // diverge within a trajectory.
    println!("\nlambda sweep on the same fixture:");
    for lambda in [0.0, 0.25, 0.5, 0.75, 1.0] {
        let a = gae_segment(&[0.5, 0.9, 0.4], 0.0, lambda).unwrap();
        println!("  lambda {lambda:.2}: {:?}", a.values.iter().map(|x| (x * 1000.0).round() / 1000.0).collect::<Vec<_>>());
    }
    let collapsed = gae_segment(&[0.3, 0.6, 0.8], 1.0, 1.0).unwrap();
    println!("lambda 1, R = 1: A = {:?} = R - V_k", collapsed.values);

    // The general SMDP TD error, which the training path specializes with
    // gamma = 1 and terminal-only reward.
    println!(
        "\nsmdp_td(r=0, V'=1, V=0, gamma=0.99, tau=100) = {:.4}",
        smdp_td(0.0, 1.0, 0.0, 0.99, 100)
    );
}
