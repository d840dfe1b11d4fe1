//! Segment-level credit assignment for tool-use reinforcement learning,
//! exercised against a procedurally generated synthetic tool world.
//!
//! A rollout interleaves model text with tool calls. Structural delimiters
//! (closing code fences, `</context>` tags, EOS) cut it into *segments* —
//! invoke, assimilate, commit — and a calibrated critic evaluated at the
//! segment boundaries turns a single terminal reward into per-segment
//! advantages. The pieces:
//!
//! - [`trajectory`] — segment/boundary data model, the rollout parser, and
//!   the JSONL wire format.
//! - [`toolworld`] — synthetic fact graph, noisy BM25-lite retriever,
//!   arithmetic tool, exact-match reward, and tier labeling.
//! - [`policy`] — a toy stochastic policy over structured tool-use decisions
//!   with exact log-probabilities and analytic gradients.
//! - [`critic`] — boundary-state featurizer + 2-layer MLP value head trained
//!   on Monte-Carlo targets, warm-up buckets, and the verification gate.
//! - [`advantage`] — per-segment advantages: the one-step form, the general
//!   segment-level GAE-lambda family, and the telescoping identity.
//! - [`ppo`] — segment-level clipped PPO learner and the training loop.
//! - [`metrics`] — calibration (ECE/Brier/AUC), explained variance,
//!   selectivity, and sign-behavior reports.
//! - [`cli`] — the experiment lifecycle as subcommands with reproducibility
//!   manifests.
//!
//! Everything is deterministic given a seed: randomness flows from one
//! experiment seed through named substreams ([`rng::Substreams`]), and all
//! file outputs are byte-stable across reruns.

pub mod advantage;
pub mod cli;
pub mod critic;
pub mod metrics;
pub mod policy;
pub mod ppo;
pub mod rng;
pub mod toolworld;
pub mod trajectory;

pub use advantage::{gae_segment, segment_advantages, smdp_td, telescope_check, SegmentAdvantages};
pub use policy::{PolicyParams, RolloutMode, RolloutRecord};
pub use toolworld::{compute_reward, generate_world, World, WorldConfig};
pub use trajectory::{segment_rollout, BoundaryState, Segment, SegmentKind, Trajectory};
