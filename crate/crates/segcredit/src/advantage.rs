//! Per-segment advantages from boundary critic values and a terminal reward.
//!
//! With boundary values `V_0 .. V_N` (one per segment start) and terminal
//! reward `R`, the one-step form assigns each intermediate segment the change
//! in value across it and the final segment the reward residual:
//!
//! ```text
//! A_k = V_{k+1} - V_k   (k < N)        A_N = R - V_N
//! ```
//!
//! Summed along a trajectory the intermediate values cancel pairwise, so the
//! total credit is always `R - V_0`: segment-level credit redistributes the
//! trajectory-level total, never inflates it. The general GAE family over the
//! same deltas interpolates between that one-step form (`lambda = 0`) and
//! trajectory-level credit applied at every segment (`lambda = 1`, where
//! every `A_k` collapses to `R - V_k` and all advantages in a trajectory
//! share one sign).

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::trajectory::Trajectory;

#[derive(Debug, Error, PartialEq)]
pub enum AdvantageError {
    #[error("boundary value list is empty")]
    EmptyBoundaries,
    #[error("boundary value count {values} does not match segment count {segments}")]
    LengthMismatch { values: usize, segments: usize },
    #[error("lambda {0} outside [0, 1]")]
    LambdaOutOfRange(f64),
}

/// Advantages for one trajectory, one value per segment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmentAdvantages {
    /// One advantage per segment, in order.
    pub values: Vec<f64>,
    /// Critic value at each segment-start boundary, `V_0 .. V_N`.
    pub boundary_values: Vec<f64>,
    /// Terminal reward, 0 or 1.
    pub reward: f64,
    /// The lambda these advantages were computed at.
    pub lambda: f64,
}

impl SegmentAdvantages {
    /// Advantages for a parsed trajectory, checking that the value vector
    /// matches the segment count.
    pub fn for_trajectory(
        traj: &Trajectory,
        boundary_values: &[f64],
        lambda: f64,
    ) -> Result<Self, AdvantageError> {
        if boundary_values.len() != traj.segments.len() {
            return Err(AdvantageError::LengthMismatch {
                values: boundary_values.len(),
                segments: traj.segments.len(),
            });
        }
        gae_segment(boundary_values, traj.reward, lambda)
    }
}

/// One-step (lambda = 0) segment advantages.
///
/// `boundary_values` holds the critic value at the start of each segment;
/// the value after the final segment is replaced by the reward.
pub fn segment_advantages(
    boundary_values: &[f64],
    reward: f64,
) -> Result<SegmentAdvantages, AdvantageError> {
    if boundary_values.is_empty() {
        return Err(AdvantageError::EmptyBoundaries);
    }
    let n = boundary_values.len();
    let mut values = Vec::with_capacity(n);
    for k in 0..n - 1 {
        values.push(boundary_values[k + 1] - boundary_values[k]);
    }
    values.push(reward - boundary_values[n - 1]);
    Ok(SegmentAdvantages {
        values,
        boundary_values: boundary_values.to_vec(),
        reward,
        lambda: 0.0,
    })
}

/// Segment-level GAE with discount 1 and terminal-only reward.
///
/// Deltas are `d_j = V_{j+1} - V_j` for `j < N` and `d_N = R - V_N` (the
/// `V(s_{N+1}) == 0` convention folded into the last delta, never a phantom
/// boundary). Advantages follow the backward recursion
/// `A_N = d_N`, `A_k = d_k + lambda * A_{k+1}`.
pub fn gae_segment(
    boundary_values: &[f64],
    reward: f64,
    lambda: f64,
) -> Result<SegmentAdvantages, AdvantageError> {
    if !(0.0..=1.0).contains(&lambda) || lambda.is_nan() {
        return Err(AdvantageError::LambdaOutOfRange(lambda));
    }
    if boundary_values.is_empty() {
        return Err(AdvantageError::EmptyBoundaries);
    }
    let n = boundary_values.len();
    let mut deltas = Vec::with_capacity(n);
    for j in 0..n - 1 {
        deltas.push(boundary_values[j + 1] - boundary_values[j]);
    }
    deltas.push(reward - boundary_values[n - 1]);

    let mut values = vec![0.0; n];
    let mut acc = 0.0;
    for k in (0..n).rev() {
        acc = deltas[k] + lambda * acc;
        values[k] = acc;
    }
    Ok(SegmentAdvantages {
        values,
        boundary_values: boundary_values.to_vec(),
        reward,
        lambda,
    })
}

/// Telescoping residual `|sum_k A_k - (R - V_0)|` for lambda = 0 advantages.
/// Exact cancellation bounds this by floating-point noise (< 1e-12).
pub fn telescope_check(adv: &SegmentAdvantages) -> f64 {
    let total: f64 = adv.values.iter().sum();
    (total - (adv.reward - adv.boundary_values[0])).abs()
}

/// SMDP per-segment TD error: `r_k + gamma^tau_k * V_next - V_cur`.
///
/// The training path fixes gamma = 1 and terminal-only reward, which reduces
/// this to the cases in [`segment_advantages`]; the general form is kept for
/// unit-level checks. Requires `gamma` in (0, 1].
pub fn smdp_td(r_k: f64, v_next: f64, v_cur: f64, gamma: f64, tau_k: u32) -> f64 {
    assert!(gamma > 0.0 && gamma <= 1.0, "gamma must lie in (0, 1]");
    r_k + gamma.powi(tau_k as i32) * v_next - v_cur
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn assert_close(a: &[f64], b: &[f64], tol: f64) {
        assert_eq!(a.len(), b.len());
        for (x, y) in a.iter().zip(b) {
            assert!((x - y).abs() <= tol, "{x} vs {y}");
        }
    }

    #[test]
    fn one_step_triple_by_hand() {
        let adv = segment_advantages(&[0.3, 0.6, 0.8], 1.0).unwrap();
        assert_close(&adv.values, &[0.3, 0.2, 0.2], 1e-15);
    }

    #[test]
    fn constant_values_matching_reward_give_zero_advantages() {
        let adv = segment_advantages(&[0.4, 0.4, 0.4, 0.4], 0.4).unwrap();
        assert_close(&adv.values, &[0.0, 0.0, 0.0, 0.0], 1e-15);
    }

    #[test]
    fn sign_divergence_fixture() {
        // Positive invoke and negative assimilate inside one failed trajectory.
        let adv = segment_advantages(&[0.5, 0.9, 0.4], 0.0).unwrap();
        assert_close(&adv.values, &[0.4, -0.5, -0.4], 1e-15);
        assert!(adv.values[0] > 0.0 && adv.values[1] < 0.0);
    }

    #[test]
    fn empty_boundaries_rejected() {
        assert_eq!(
            segment_advantages(&[], 1.0).unwrap_err(),
            AdvantageError::EmptyBoundaries
        );
    }

    #[test]
    fn lambda_zero_matches_one_step_route() {
        let v = [0.12, 0.5, 0.77, 0.3, 0.9];
        let a = segment_advantages(&v, 1.0).unwrap();
        let b = gae_segment(&v, 1.0, 0.0).unwrap();
        assert_close(&a.values, &b.values, 0.0);
    }

    #[test]
    fn lambda_one_collapses_to_reward_minus_value() {
        let adv = gae_segment(&[0.3, 0.6, 0.8], 1.0, 1.0).unwrap();
        assert_close(&adv.values, &[0.7, 0.4, 0.2], 1e-15);
    }

    #[test]
    fn lambda_out_of_range_rejected() {
        assert!(matches!(
            gae_segment(&[0.5], 1.0, 1.5),
            Err(AdvantageError::LambdaOutOfRange(_))
        ));
        assert!(matches!(
            gae_segment(&[0.5], 1.0, -0.1),
            Err(AdvantageError::LambdaOutOfRange(_))
        ));
    }

    #[test]
    fn telescoping_by_hand() {
        let adv = segment_advantages(&[0.3, 0.6, 0.8], 1.0).unwrap();
        let total: f64 = adv.values.iter().sum();
        assert!((total - 0.7).abs() < 1e-15);
        assert!(telescope_check(&adv) < 1e-15);
    }

    #[test]
    fn single_segment_advantage_is_reward_residual() {
        let adv = segment_advantages(&[0.25], 1.0).unwrap();
        assert_close(&adv.values, &[0.75], 1e-15);
        assert!(telescope_check(&adv) == 0.0);
    }

    #[test]
    fn smdp_td_reductions() {
        // gamma = 1, r = 0: plain value difference.
        assert_eq!(smdp_td(0.0, 0.8, 0.3, 1.0, 57), 0.5);
        // Terminal: V_next = 0 leaves R - V_cur.
        assert_eq!(smdp_td(1.0, 0.0, 0.4, 1.0, 3), 0.6);
        // Discounted long segment: 0.99^100 ~ 0.3660.
        let td = smdp_td(0.0, 1.0, 0.0, 0.99, 100);
        assert!((td - 0.99f64.powi(100)).abs() < 1e-15);
        assert!((td - 0.3660).abs() < 1e-4);
    }

    // Brute-force oracle: the explicit double sum A_k = sum_l lambda^l d_{k+l}.
    fn gae_double_sum(values: &[f64], reward: f64, lambda: f64) -> Vec<f64> {
        let n = values.len();
        let mut deltas = Vec::with_capacity(n);
        for j in 0..n - 1 {
            deltas.push(values[j + 1] - values[j]);
        }
        deltas.push(reward - values[n - 1]);
        (0..n)
            .map(|k| {
                (0..n - k)
                    .map(|l| lambda.powi(l as i32) * deltas[k + l])
                    .sum()
            })
            .collect()
    }

    proptest! {
        #[test]
        fn telescoping_holds_for_random_vectors(
            values in proptest::collection::vec(0.0f64..=1.0, 1..=15),
            reward in prop_oneof![Just(0.0), Just(1.0)],
        ) {
            let adv = segment_advantages(&values, reward).unwrap();
            prop_assert!(telescope_check(&adv) <= 1e-12);
        }

        #[test]
        fn recursion_matches_double_sum_oracle(
            values in proptest::collection::vec(0.0f64..=1.0, 1..=15),
            reward in prop_oneof![Just(0.0), Just(1.0)],
            lambda in 0.0f64..=1.0,
        ) {
            let adv = gae_segment(&values, reward, lambda).unwrap();
            let oracle = gae_double_sum(&values, reward, lambda);
            for (a, b) in adv.values.iter().zip(&oracle) {
                prop_assert!((a - b).abs() <= 1e-12);
            }
        }

        #[test]
        fn lambda_one_advantages_share_reward_side(
            values in proptest::collection::vec(0.0f64..=1.0, 1..=15),
            reward in prop_oneof![Just(0.0), Just(1.0)],
        ) {
            let adv = gae_segment(&values, reward, 1.0).unwrap();
            for (k, a) in adv.values.iter().enumerate() {
                prop_assert!((a - (reward - values[k])).abs() <= 1e-12);
                if reward == 1.0 {
                    prop_assert!(*a >= 0.0);
                } else {
                    prop_assert!(*a <= 0.0);
                }
            }
        }
    }
}
