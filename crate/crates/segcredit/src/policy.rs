//! Toy parameterized stochastic policy over structured tool-use decisions.
//!
//! The policy stands in for the LLM actor: every rollout is realized through
//! a small template grammar, so generation is well-formed by construction,
//! and every choice is an explicit softmax decision with exact
//! log-probabilities and analytic gradients. Four decision kinds:
//!
//! - **InvokeOrAnswer** at each persistent boundary: call a tool or commit.
//! - **QueryChoice** inside an invoke: which query/expression to run.
//! - **ExtractionChoice** inside an assimilate: faithful, lossy (drops the
//!   fact), or empty — the三 diagnostic extraction styles.
//! - **AnswerChoice** inside the commit: read the answer off the context or
//!   answer from parametric memory.
//!
//! Token log-probabilities within a segment are the owning decision's
//! log-probability split uniformly over its tokens; the segment loss applies
//! one advantage to all of them, so the split is free to be simple.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::toolworld::{
    compute_reward, execute_arithmetic, retrieve, Question, QuestionKind, RetrievalResult, World,
};
use crate::trajectory::{segment_rollout, RawRollout, Trajectory, MAX_SEGMENTS};

/// Maximum invoke segments per episode (2K+1 <= MAX_SEGMENTS).
pub const MAX_INVOKES: usize = (MAX_SEGMENTS - 1) / 2;

const REASON_INVOKE: &str = "i will use a tool .";
const REASON_ANSWER: &str = "i can answer directly .";

/// The system-prompt prefix realizing each rollout mode. The critic sees the
/// prompt block, so the mode is part of the state, exactly as a system
/// prompt would be.
pub fn prompt_for(mode: RolloutMode, question_text: &str) -> String {
    match mode {
        RolloutMode::Free => format!("you may use tools . {question_text}"),
        RolloutMode::ForcedTool => format!("you must use a tool . {question_text}"),
        RolloutMode::NoTool => format!("answer directly without tools . {question_text}"),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecisionKind {
    InvokeOrAnswer,
    QueryChoice,
    ExtractionChoice,
    AnswerChoice,
}

impl DecisionKind {
    pub const ALL: [DecisionKind; 4] = [
        DecisionKind::InvokeOrAnswer,
        DecisionKind::QueryChoice,
        DecisionKind::ExtractionChoice,
        DecisionKind::AnswerChoice,
    ];

    /// Feature dimension of this decision kind's candidates.
    pub fn dim(self) -> usize {
        match self {
            DecisionKind::InvokeOrAnswer => 6,
            DecisionKind::QueryChoice => 4,
            DecisionKind::ExtractionChoice => 4,
            DecisionKind::AnswerChoice => 4,
        }
    }

    /// Start of this kind's weight block inside theta.
    pub fn offset(self) -> usize {
        match self {
            DecisionKind::InvokeOrAnswer => 0,
            DecisionKind::QueryChoice => 6,
            DecisionKind::ExtractionChoice => 10,
            DecisionKind::AnswerChoice => 14,
        }
    }
}

/// Total parameter dimension: one linear block per decision kind.
pub const THETA_DIM: usize = 18;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IoAChoice {
    Answer,
    Invoke,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExtractionStyle {
    Faithful,
    Lossy,
    Empty,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnswerSource {
    FromContext,
    FromMemory,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Payload {
    Choice(IoAChoice),
    Query { text: String, calc: bool },
    Extraction { text: String, style: ExtractionStyle },
    Answer { text: String, source: AnswerSource },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub features: Vec<f64>,
    pub payload: Payload,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecisionPoint {
    pub kind: DecisionKind,
    pub candidates: Vec<Candidate>,
    pub chosen: usize,
    /// Log-probability of the chosen candidate under the generating params
    /// (the importance-ratio snapshot).
    pub logprob: f64,
    /// Segment this decision's tokens live in.
    pub segment: usize,
    /// Global token indices `[start, end)` owned by this decision.
    pub token_span: (usize, usize),
}

/// Oracle bookkeeping for one invoke-assimilate pair: did retrieval surface
/// the gold-relevant fact, and did the extraction keep it. Never visible to
/// the policy or critic.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PairAnnotation {
    pub surfaced: bool,
    pub kept: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RolloutMode {
    Free,
    ForcedTool,
    NoTool,
}

/// Raw tool result awaiting assimilation (the transient part of the state).
#[derive(Debug, Clone, PartialEq)]
pub enum PendingRaw {
    Search { result: RetrievalResult, target: Option<usize> },
    Calc { output: String },
}

/// Enough resumable state to continue the decision process from a boundary.
/// One snapshot per segment-start boundary.
#[derive(Debug, Clone, PartialEq)]
pub struct RolloutSnapshot {
    pub covered: Vec<bool>,
    pub invokes: usize,
    pub extractions: Vec<String>,
    pub pending: Option<PendingRaw>,
    pub mode: RolloutMode,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RolloutRecord {
    pub trajectory: Trajectory,
    pub decisions: Vec<DecisionPoint>,
    pub annotations: Vec<PairAnnotation>,
    pub snapshots: Vec<RolloutSnapshot>,
    pub temperature: f64,
    pub mode: RolloutMode,
}

impl RolloutRecord {
    pub fn reward(&self) -> f64 {
        self.trajectory.reward
    }
}

#[derive(Debug, Error)]
pub enum PolicyError {
    #[error("checkpoint i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("checkpoint parse: {0}")]
    Json(#[from] serde_json::Error),
    #[error("unsupported checkpoint version {0:?}")]
    BadVersion(String),
    #[error("checkpoint dimension {got} != expected {want}")]
    BadDim { got: usize, want: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyParams {
    pub theta: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct PolicyCheckpoint {
    version: String,
    dims: Vec<usize>,
    theta: Vec<f64>,
}

const POLICY_CKPT_VERSION: &str = "segcredit.policy.v1";

impl PolicyParams {
    pub fn zeros() -> Self {
        Self { theta: vec![0.0; THETA_DIM] }
    }

    /// Hand-set weights standing in for a pretrained base model: competent
    /// query formulation, mostly-faithful extraction, and sensible answer
    /// sourcing, with tool selectivity (the invoke-or-answer block) left
    /// untrained at zero.
    pub fn warm_start() -> Self {
        let mut p = Self::zeros();
        // InvokeOrAnswer: answer scales with coverage, invoke with the gap —
        // a retry-friendly stopping rule. The tier-selectivity weights
        // (answer-when-known, invoke-when-known) stay untrained at zero.
        p.set(DecisionKind::InvokeOrAnswer, &[-0.6, 0.0, 0.0, 2.4, 0.0, 1.5]);
        // QueryChoice: [fact_overlap, len_norm, is_offtopic, is_targeted]
        p.set(DecisionKind::QueryChoice, &[2.0, -0.5, 0.0, 0.0]);
        // ExtractionChoice: [is_faithful, is_lossy, is_empty, fidelity]
        p.set(DecisionKind::ExtractionChoice, &[0.8, -0.3, -1.2, 1.4]);
        // AnswerChoice: [is_ctx, is_mem, ctx_looks_done, mem_looks_done]
        p.set(DecisionKind::AnswerChoice, &[-3.5, 0.0, 5.5, 0.0]);
        p
    }

    pub fn block(&self, kind: DecisionKind) -> &[f64] {
        &self.theta[kind.offset()..kind.offset() + kind.dim()]
    }

    fn set(&mut self, kind: DecisionKind, w: &[f64]) {
        assert_eq!(w.len(), kind.dim());
        self.theta[kind.offset()..kind.offset() + kind.dim()].copy_from_slice(w);
    }

    pub fn save(&self, path: &std::path::Path) -> Result<(), PolicyError> {
        let ckpt = PolicyCheckpoint {
            version: POLICY_CKPT_VERSION.to_string(),
            dims: DecisionKind::ALL.iter().map(|k| k.dim()).collect(),
            theta: self.theta.clone(),
        };
        std::fs::write(path, serde_json::to_string_pretty(&ckpt)?)?;
        Ok(())
    }

    pub fn load(path: &std::path::Path) -> Result<Self, PolicyError> {
        let ckpt: PolicyCheckpoint = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        if ckpt.version != POLICY_CKPT_VERSION {
            return Err(PolicyError::BadVersion(ckpt.version));
        }
        if ckpt.theta.len() != THETA_DIM {
            return Err(PolicyError::BadDim { got: ckpt.theta.len(), want: THETA_DIM });
        }
        Ok(Self { theta: ckpt.theta })
    }
}

/// Softmax probabilities of one decision under the given params.
pub fn decision_probs(
    params: &PolicyParams,
    kind: DecisionKind,
    candidates: &[Candidate],
    temperature: f64,
) -> Vec<f64> {
    let w = params.block(kind);
    let scores: Vec<f64> = candidates
        .iter()
        .map(|c| c.features.iter().zip(w).map(|(f, w)| f * w).sum::<f64>() / temperature)
        .collect();
    let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
    let z: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / z).collect()
}

/// Sum of chosen-action log-probabilities over the record's decisions.
pub fn log_prob(params: &PolicyParams, record: &RolloutRecord) -> f64 {
    record
        .decisions
        .iter()
        .map(|d| decision_probs(params, d.kind, &d.candidates, record.temperature)[d.chosen].ln())
        .sum()
}

/// Analytic gradient of [`log_prob`] with respect to theta:
/// `(phi_chosen - E_p[phi]) / temperature` accumulated into each decision's
/// block.
pub fn grad_log_prob(params: &PolicyParams, record: &RolloutRecord) -> Vec<f64> {
    let mut grad = vec![0.0; THETA_DIM];
    for d in &record.decisions {
        accumulate_decision_grad(params, d, record.temperature, 1.0, &mut grad);
    }
    grad
}

/// Adds `scale * d log pi(chosen | decision) / d theta` into `grad`.
pub fn accumulate_decision_grad(
    params: &PolicyParams,
    d: &DecisionPoint,
    temperature: f64,
    scale: f64,
    grad: &mut [f64],
) {
    let probs = decision_probs(params, d.kind, &d.candidates, temperature);
    let off = d.kind.offset();
    let dim = d.kind.dim();
    for j in 0..dim {
        let mean: f64 = d
            .candidates
            .iter()
            .zip(&probs)
            .map(|(c, p)| p * c.features[j])
            .sum();
        grad[off + j] += scale * (d.candidates[d.chosen].features[j] - mean) / temperature;
    }
}

fn choose(
    params: &PolicyParams,
    kind: DecisionKind,
    candidates: &[Candidate],
    temperature: f64,
    greedy: bool,
    rng: &mut ChaCha8Rng,
) -> (usize, f64) {
    let probs = decision_probs(params, kind, candidates, temperature);
    let chosen = if greedy {
        probs
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).unwrap().then(b.0.cmp(&a.0)))
            .map(|(i, _)| i)
            .unwrap()
    } else {
        let u: f64 = rng.gen();
        let mut acc = 0.0;
        let mut pick = candidates.len() - 1;
        for (i, p) in probs.iter().enumerate() {
            acc += p;
            if u < acc {
                pick = i;
                break;
            }
        }
        pick
    };
    (chosen, probs[chosen].ln())
}

fn token_overlap(a: &str, b: &str) -> usize {
    let bt: Vec<&str> = b.split_whitespace().collect();
    a.split_whitespace().filter(|t| bt.contains(t)).count()
}

/// What the policy can see of its own progress: a relation-blind walk over
/// its extraction blocks. Each extraction line whose first token matches
/// the current anchor advances the walk, whatever its relation — so a
/// confusable retrieval (right entity, wrong relation) fools it. Returns
/// (apparent depth, current anchor, total hops).
pub fn anchored_progress(q: &Question, extractions: &[String]) -> (usize, String, usize) {
    match q.kind {
        QuestionKind::Arithmetic => {
            let q_toks: Vec<&str> = q.text.split_whitespace().collect();
            let fresh = extractions.iter().flat_map(|e| e.split_whitespace()).any(|t| {
                !q_toks.contains(&t)
                    && t.chars().all(|c| c.is_ascii_digit() || c == '-' || c == '/')
                    && t.chars().any(|c| c.is_ascii_digit())
            });
            (usize::from(fresh), String::new(), 1)
        }
        QuestionKind::Retrieval => {
            let (rels, anchor0) = q.parse_structure();
            let hops = rels.len().max(1);
            let mut anchor = anchor0.to_string();
            let mut depth = 0usize;
            for e in extractions {
                for line in e.lines() {
                    let toks: Vec<&str> = line.split_whitespace().collect();
                    if depth < hops && toks.len() >= 3 && toks[0] == anchor {
                        anchor = toks[toks.len() - 1].to_string();
                        depth += 1;
                    }
                }
            }
            (depth, anchor, hops)
        }
    }
}

struct Engine<'w> {
    world: &'w World,
    q: &'w Question,
    temperature: f64,
    greedy: bool,
    // Text assembly; unused by continuations.
    lines: Vec<String>,
    tool_outputs: Vec<String>,
    token_cursor: usize,
    segment_idx: usize,
    decisions: Vec<DecisionPoint>,
    annotations: Vec<PairAnnotation>,
    snapshots: Vec<RolloutSnapshot>,
    tracing: bool,
}

impl<'w> Engine<'w> {
    fn new(world: &'w World, q: &'w Question, temperature: f64, greedy: bool, tracing: bool) -> Self {
        Self {
            world,
            q,
            temperature,
            greedy,
            lines: Vec::new(),
            tool_outputs: Vec::new(),
            token_cursor: 0,
            segment_idx: 0,
            decisions: Vec::new(),
            annotations: Vec::new(),
            snapshots: Vec::new(),
            tracing,
        }
    }

    fn table_hit(&self) -> bool {
        self.q.parametric_known && self.world.knowledge.contains_key(&self.q.id)
    }

    fn push_line(&mut self, line: String) -> (usize, usize) {
        let n = line.split_whitespace().count();
        let span = (self.token_cursor, self.token_cursor + n);
        self.token_cursor += n;
        if self.tracing {
            self.lines.push(line);
        }
        span
    }

    fn record_decision(
        &mut self,
        kind: DecisionKind,
        candidates: Vec<Candidate>,
        chosen: usize,
        logprob: f64,
        span: (usize, usize),
    ) {
        if self.tracing {
            self.decisions.push(DecisionPoint {
                kind,
                candidates,
                chosen,
                logprob,
                segment: self.segment_idx,
                token_span: span,
            });
        }
    }

    fn ioa_candidates(&self, state: &RolloutSnapshot) -> Vec<Candidate> {
        let hit = f64::from(self.table_hit());
        let (depth, _, hops) = anchored_progress(self.q, &state.extractions);
        let cov = depth as f64 / hops as f64;
        let answer = Candidate {
            features: vec![1.0, 0.0, hit, cov, 0.0, 0.0],
            payload: Payload::Choice(IoAChoice::Answer),
        };
        let invoke = Candidate {
            features: vec![0.0, 1.0, 0.0, 0.0, hit, 1.0 - cov],
            payload: Payload::Choice(IoAChoice::Invoke),
        };
        let must_answer = state.mode == RolloutMode::NoTool || state.invokes >= MAX_INVOKES;
        let must_invoke =
            state.mode == RolloutMode::ForcedTool && state.invokes == 0 && !must_answer;
        if must_answer {
            vec![answer]
        } else if must_invoke {
            vec![invoke]
        } else {
            vec![answer, invoke]
        }
    }

    fn query_candidates(&self, state: &RolloutSnapshot, rng: &mut ChaCha8Rng) -> Vec<Candidate> {
        match self.q.kind {
            QuestionKind::Arithmetic => {
                let expr = self.q.expr.clone().unwrap_or_else(|| "0".to_string());
                // A plausible slip: perturb the first number.
                let perturbed: String = {
                    let mut toks: Vec<String> =
                        expr.split_whitespace().map(|s| s.to_string()).collect();
                    if let Some(first) = toks.iter_mut().find(|t| t.parse::<i64>().is_ok()) {
                        let v: i64 = first.parse().unwrap();
                        *first = (v + 9).to_string();
                    }
                    toks.join(" ")
                };
                let offtopic = "1 + 1".to_string();
                [expr, perturbed, offtopic]
                    .into_iter()
                    .enumerate()
                    .map(|(i, text)| {
                        let gold_expr = self.q.expr.as_deref().unwrap_or("");
                        let denom = gold_expr.split_whitespace().count().max(1) as f64;
                        let overlap = token_overlap(&text, gold_expr) as f64 / denom;
                        let len_norm = text.split_whitespace().count() as f64 / 10.0;
                        Candidate {
                            features: vec![
                                overlap,
                                len_norm,
                                f64::from(i == 2),
                                f64::from(i == 0),
                            ],
                            payload: Payload::Query { text, calc: true },
                        }
                    })
                    .collect()
            }
            QuestionKind::Retrieval => {
                let fb = &self.world.fact_base;
                // What the policy believes it needs next: the anchored-walk
                // entity plus the next relation from the question text. A
                // fooled walk targets the wrong entity and the errors
                // propagate.
                let (depth, anchor, _) = anchored_progress(self.q, &state.extractions);
                let (rels, _) = self.q.parse_structure();
                let next_rel = rels.get(depth.min(rels.len().saturating_sub(1))).copied();
                let expectation = match next_rel {
                    Some(r) => format!("{anchor} {r}"),
                    None => String::new(),
                };
                let targeted = if expectation.is_empty() {
                    self.q.text.clone()
                } else {
                    expectation.clone()
                };
                let broad = self.q.text.clone();
                let offtopic = format!(
                    "{} {}",
                    fb.entities[rng.gen_range(0..fb.entities.len())],
                    fb.relations[rng.gen_range(0..fb.relations.len())]
                );
                [(targeted, false, true), (broad, false, false), (offtopic, true, false)]
                    .into_iter()
                    .map(|(text, off, targ)| {
                        let overlap = if expectation.is_empty() {
                            0.0
                        } else {
                            token_overlap(&text, &expectation) as f64 / 2.0
                        };
                        let len_norm = text.split_whitespace().count() as f64 / 10.0;
                        Candidate {
                            features: vec![overlap, len_norm, f64::from(off), f64::from(targ)],
                            payload: Payload::Query { text, calc: false },
                        }
                    })
                    .collect()
            }
        }
    }

    fn extraction_candidates(&self, state: &RolloutSnapshot) -> Vec<Candidate> {
        let pending = state.pending.as_ref().expect("extraction needs pending raw");
        let (faithful, lossy): (String, String) = match pending {
            PendingRaw::Search { result, .. } => {
                // Reading the passages: prefer one whose subject (first
                // token) appears in the query, then by term overlap.
                let query_toks: Vec<&str> = result.query.split_whitespace().collect();
                let best = result
                    .passages
                    .iter()
                    .enumerate()
                    .max_by_key(|(i, p)| {
                        let subj = p.text.split_whitespace().next().unwrap_or("");
                        (
                            query_toks.contains(&subj),
                            token_overlap(&p.text, &result.query),
                            usize::MAX - i,
                        )
                    })
                    .map(|(_, p)| p.text.clone())
                    .unwrap_or_default();
                let mut toks: Vec<&str> = best.split_whitespace().collect();
                toks.pop(); // drop the object: the "lost the answer" failure
                (best.clone(), toks.join(" "))
            }
            PendingRaw::Calc { output } => (output.clone(), "computed something".to_string()),
        };
        // Faithfulness to the source the model is reading from, not to any
        // gold fact: the faithful copy scores 1, the object-dropping copy
        // about 2/3, the empty extraction 0.
        let source = faithful.clone();
        let source_len = source.split_whitespace().count().max(1);
        let styles = [
            (faithful, ExtractionStyle::Faithful),
            (lossy, ExtractionStyle::Lossy),
            (String::new(), ExtractionStyle::Empty),
        ];
        styles
            .into_iter()
            .map(|(text, style)| {
                let fidelity = token_overlap(&text, &source) as f64 / source_len as f64;
                Candidate {
                    features: vec![
                        f64::from(style == ExtractionStyle::Faithful),
                        f64::from(style == ExtractionStyle::Lossy),
                        f64::from(style == ExtractionStyle::Empty),
                        fidelity,
                    ],
                    payload: Payload::Extraction { text, style },
                }
            })
            .collect()
    }

    fn answer_candidates(&self, state: &RolloutSnapshot, rng: &mut ChaCha8Rng) -> Vec<Candidate> {
        let hit = self.table_hit();
        // Reading off the context: last token of the most recent non-empty
        // extraction block.
        let ctx_answer = state
            .extractions
            .iter()
            .rev()
            .find(|e| !e.trim().is_empty())
            .and_then(|e| e.split_whitespace().last())
            .unwrap_or("unknown")
            .to_string();
        // Parametric memory: the remembered answer surfaces with the entry's
        // recall probability, otherwise a confident distractor. A
        // complete-looking context anchors the model and halves effective
        // recall — the distraction cost of having invoked tools, which no
        // commit-time choice can undo.
        let (depth_pre, _, hops_pre) = anchored_progress(self.q, &state.extractions);
        let distracted = depth_pre >= hops_pre && !state.extractions.is_empty();
        let mem_draw: f64 = rng.gen();
        let mem_answer = if hit {
            let entry = &self.world.knowledge[&self.q.id];
            let effective = if distracted { entry.recall * 0.5 } else { entry.recall };
            if mem_draw < effective {
                entry.answer.clone()
            } else {
                self.distractor()
            }
        } else {
            self.distractor()
        };
        // Answer-source features are structural only: the policy cannot
        // condition on whether its memory is actually right (confidently
        // wrong answers are real), so trusting a complete-looking context
        // over memory is a population-level compromise it must strike.
        let looks_done = f64::from(depth_pre >= hops_pre);
        vec![
            Candidate {
                features: vec![1.0, 0.0, looks_done, 0.0],
                payload: Payload::Answer { text: ctx_answer, source: AnswerSource::FromContext },
            },
            Candidate {
                features: vec![0.0, 1.0, 0.0, looks_done],
                payload: Payload::Answer { text: mem_answer, source: AnswerSource::FromMemory },
            },
        ]
    }

    /// A deterministic wrong answer for this question.
    fn distractor(&self) -> String {
        match self.q.kind {
            QuestionKind::Arithmetic => {
                let base: i64 = self.q.gold_answer.parse().unwrap_or(0);
                format!("{}", base + 13)
            }
            QuestionKind::Retrieval => {
                let start = crate::rng::fnv1a(self.q.id.as_bytes()) as usize;
                let ents = &self.world.fact_base.entities;
                for k in 0..ents.len() {
                    let cand = &ents[(start + k) % ents.len()];
                    if *cand != self.q.gold_answer {
                        return cand.clone();
                    }
                }
                "unknown".to_string()
            }
        }
    }

    /// Runs the decision process from `state` to the terminal answer.
    /// Returns the prediction.
    fn drive_with(
        &mut self,
        params: &PolicyParams,
        state: &mut RolloutSnapshot,
        rng: &mut ChaCha8Rng,
    ) -> String {
        loop {
            if self.tracing {
                self.snapshots.push(state.clone());
            }
            if state.pending.is_some() {
                // Assimilate segment.
                let candidates = self.extraction_candidates(state);
                let (chosen, lp) = choose(
                    params,
                    DecisionKind::ExtractionChoice,
                    &candidates,
                    self.temperature,
                    self.greedy,
                    rng,
                );
                let Payload::Extraction { text, .. } = candidates[chosen].payload.clone() else {
                    unreachable!()
                };
                let span_start = self.token_cursor;
                self.push_line("<context>".to_string());
                if !text.is_empty() {
                    self.push_line(text.clone());
                }
                let (_, span_end) = self.push_line("</context>".to_string());
                self.record_decision(
                    DecisionKind::ExtractionChoice,
                    candidates,
                    chosen,
                    lp,
                    (span_start, span_end),
                );
                // Update coverage and the pair annotation.
                let pending = state.pending.take().unwrap();
                let (surfaced, kept) = match &pending {
                    PendingRaw::Search { result, target } => {
                        let surfaced = result.surfaced_relevant();
                        let kept = match target {
                            Some(i) => {
                                let passage =
                                    &self.world.fact_base.passages[self.q.chain[*i].0];
                                surfaced && text.contains(passage.as_str())
                            }
                            None => false,
                        };
                        (surfaced, kept)
                    }
                    PendingRaw::Calc { output } => {
                        let ok = !output.starts_with("ERROR");
                        (ok, ok && !output.is_empty() && text.contains(output.as_str()))
                    }
                };
                if self.tracing {
                    self.annotations.push(PairAnnotation { surfaced, kept });
                }
                match self.q.kind {
                    QuestionKind::Retrieval => {
                        for (i, f) in self.q.chain.iter().enumerate() {
                            if !state.covered[i]
                                && text.contains(self.world.fact_base.passages[f.0].as_str())
                            {
                                state.covered[i] = true;
                            }
                        }
                    }
                    QuestionKind::Arithmetic => {
                        if let PendingRaw::Calc { output } = &pending {
                            if !output.starts_with("ERROR") && text.contains(output.as_str()) {
                                state.covered[0] = true;
                            }
                        }
                    }
                }
                state.extractions.push(text);
                self.segment_idx += 1;
                continue;
            }

            // Persistent boundary: invoke or answer.
            let candidates = self.ioa_candidates(state);
            let (chosen, lp) = choose(
                params,
                DecisionKind::InvokeOrAnswer,
                &candidates,
                self.temperature,
                self.greedy,
                rng,
            );
            let choice = match &candidates[chosen].payload {
                Payload::Choice(c) => *c,
                _ => unreachable!(),
            };
            match choice {
                IoAChoice::Invoke => {
                    let span = self.push_line(REASON_INVOKE.to_string());
                    self.record_decision(
                        DecisionKind::InvokeOrAnswer,
                        candidates,
                        chosen,
                        lp,
                        span,
                    );
                    let q_cands = self.query_candidates(state, rng);
                    let (q_chosen, q_lp) = choose(
                        params,
                        DecisionKind::QueryChoice,
                        &q_cands,
                        self.temperature,
                        self.greedy,
                        rng,
                    );
                    let Payload::Query { text: query, calc } = q_cands[q_chosen].payload.clone()
                    else {
                        unreachable!()
                    };
                    let span_start = self.token_cursor;
                    self.push_line(crate::trajectory::FENCE.to_string());
                    let (pending, raw_output) = if calc {
                        let output = execute_arithmetic(&query);
                        self.push_line(format!("calc ( {query} )"));
                        (PendingRaw::Calc { output: output.clone() }, output)
                    } else {
                        let target = state.covered.iter().position(|c| !c);
                        let result = retrieve(
                            &self.world.fact_base,
                            &query,
                            self.world.config.top_k,
                            self.world.config.noise_rate,
                            rng,
                            &self.q.chain,
                        )
                        .expect("world passages are never empty");
                        let raw = result.raw_output();
                        self.push_line(format!("search ( {query} )"));
                        (PendingRaw::Search { result, target }, raw)
                    };
                    let (_, span_end) = self.push_line(crate::trajectory::FENCE.to_string());
                    self.record_decision(
                        DecisionKind::QueryChoice,
                        q_cands,
                        q_chosen,
                        q_lp,
                        (span_start, span_end),
                    );
                    if self.tracing {
                        self.tool_outputs.push(raw_output);
                        self.lines.push(crate::trajectory::TOOL_OUTPUT_MARK.to_string());
                    }
                    self.token_cursor += 1; // the environment placeholder token
                    state.pending = Some(pending);
                    state.invokes += 1;
                    self.segment_idx += 1;
                }
                IoAChoice::Answer => {
                    let span = self.push_line(REASON_ANSWER.to_string());
                    self.record_decision(
                        DecisionKind::InvokeOrAnswer,
                        candidates,
                        chosen,
                        lp,
                        span,
                    );
                    let a_cands = self.answer_candidates(state, rng);
                    let (a_chosen, a_lp) = choose(
                        params,
                        DecisionKind::AnswerChoice,
                        &a_cands,
                        self.temperature,
                        self.greedy,
                        rng,
                    );
                    let Payload::Answer { text: answer, .. } = a_cands[a_chosen].payload.clone()
                    else {
                        unreachable!()
                    };
                    let span_start = self.token_cursor;
                    self.push_line(format!("the answer is \\boxed{{{answer}}}"));
                    let (_, span_end) = self.push_line(crate::trajectory::EOS_MARK.to_string());
                    self.record_decision(
                        DecisionKind::AnswerChoice,
                        a_cands,
                        a_chosen,
                        a_lp,
                        (span_start, span_end),
                    );
                    return answer;
                }
            }
        }
    }
}

/// Samples one rollout: decisions through the template grammar, tools
/// executed against the world, text segmented via the trajectory parser.
pub fn sample_trajectory(
    params: &PolicyParams,
    q: &Question,
    world: &World,
    mode: RolloutMode,
    temperature: f64,
    rng: &mut ChaCha8Rng,
) -> RolloutRecord {
    run_rollout(params, q, world, mode, temperature, rng, false)
}

/// Deterministic argmax decisions, for evaluation.
pub fn greedy_trajectory(
    params: &PolicyParams,
    q: &Question,
    world: &World,
    mode: RolloutMode,
    rng: &mut ChaCha8Rng,
) -> RolloutRecord {
    run_rollout(params, q, world, mode, 1.0, rng, true)
}

/// Resumes the decision process from a boundary snapshot and returns the
/// episode reward. Used by the brute-force oracle critic.
pub fn continue_rollout(
    params: &PolicyParams,
    q: &Question,
    world: &World,
    snapshot: &RolloutSnapshot,
    temperature: f64,
    rng: &mut ChaCha8Rng,
) -> f64 {
    let mut engine = Engine::new(world, q, temperature, false, false);
    let mut state = snapshot.clone();
    let prediction = engine.drive_with(params, &mut state, rng);
    compute_reward(&prediction, &q.gold_answer)
}

fn run_rollout(
    params: &PolicyParams,
    q: &Question,
    world: &World,
    mode: RolloutMode,
    temperature: f64,
    rng: &mut ChaCha8Rng,
    greedy: bool,
) -> RolloutRecord {
    let mut engine = Engine::new(world, q, temperature, greedy, true);
    let chain_len = match q.kind {
        QuestionKind::Retrieval => q.chain.len(),
        QuestionKind::Arithmetic => 1,
    };
    let mut state = RolloutSnapshot {
        covered: vec![false; chain_len.max(1)],
        invokes: 0,
        extractions: Vec::new(),
        pending: None,
        mode,
    };
    let prediction = engine.drive_with(params, &mut state, rng);
    let reward = compute_reward(&prediction, &q.gold_answer);

    let text = engine.lines.join("\n");
    let prompt = prompt_for(mode, &q.text);
    let raw = RawRollout {
        question_id: &q.id,
        prompt: &prompt,
        text: &text,
        tool_outputs: &engine.tool_outputs,
        reward,
    };
    let mut trajectory =
        segment_rollout(&raw).expect("template grammar produces well-formed rollouts");

    // Distribute each decision's log-probability uniformly over its tokens.
    for d in &engine.decisions {
        let seg = &mut trajectory.segments[d.segment];
        let n = (d.token_span.1 - d.token_span.0) as f64;
        for t in d.token_span.0..d.token_span.1 {
            debug_assert!(t >= seg.span.0 && t < seg.span.1);
            seg.logprobs[t - seg.span.0] = d.logprob / n;
        }
    }

    RolloutRecord {
        trajectory,
        decisions: engine.decisions,
        annotations: engine.annotations,
        snapshots: engine.snapshots,
        temperature,
        mode,
    }
}
