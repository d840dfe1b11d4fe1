//! Procedurally generated multi-hop QA universe with a noisy retriever and
//! an arithmetic tool.
//!
//! A world is a functional fact graph (each `(subject, relation)` pair names
//! at most one object), one synthetic passage per fact, a question set whose
//! gold chains are derivable from the facts, an exact-match reward, and a
//! knowledge table that makes tier composition a controllable parameter
//! instead of an emergent property of a trained model.

pub mod arith;

pub use arith::execute_arithmetic;

use std::collections::{BTreeMap, HashMap};

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng::fnv1a;

/// BM25 parameters, standard defaults.
const BM25_K1: f64 = 1.2;
const BM25_B: f64 = 0.75;

#[derive(Debug, Error)]
pub enum WorldError {
    #[error("need at least 10 entities, got {0}")]
    TooFewEntities(usize),
    #[error("hop mix must sum to 1, got {0}")]
    BadHopMix(f64),
    #[error("infeasible world: {0}")]
    InfeasibleWorld(String),
    #[error("retrieval over an empty passage index")]
    EmptyIndex,
    #[error("world dump i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("world dump parse: {0}")]
    Json(#[from] serde_json::Error),
    #[error("world dump line {line}: {reason}")]
    BadDump { line: usize, reason: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorldConfig {
    pub seed: u64,
    pub n_entities: usize,
    pub n_questions: usize,
    /// Probability of a question requiring 1..=4 hops. Must sum to 1.
    pub hop_mix: [f64; 4],
    /// Probability that a retrieval call has its top passage replaced by an
    /// irrelevant one.
    pub noise_rate: f64,
    /// Fraction of 1-hop questions that are arithmetic.
    pub arith_frac: f64,
    /// Target fraction of questions present in the knowledge table.
    pub known_frac: f64,
    /// Per-entry recall probability of the knowledge table.
    pub recall: f64,
    pub n_relations: usize,
    /// Retriever top-k.
    pub top_k: usize,
    /// Distractor facts added per chain fact.
    pub distractor_ratio: f64,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self {
            seed: 1,
            n_entities: 120,
            n_questions: 500,
            hop_mix: [0.40, 0.40, 0.14, 0.06],
            noise_rate: 0.12,
            arith_frac: 0.25,
            known_frac: 0.40,
            recall: 0.98,
            n_relations: 12,
            top_k: 3,
            distractor_ratio: 1.5,
        }
    }
}

impl WorldConfig {
    pub fn with_seed(seed: u64) -> Self {
        Self { seed, ..Self::default() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct FactId(pub usize);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Fact {
    pub subject: String,
    pub relation: String,
    pub object: String,
}

impl Fact {
    /// The synthetic passage for this fact.
    pub fn passage(&self) -> String {
        format!("{} {} {}", self.subject, self.relation, self.object)
    }
}

/// Fact store plus the derived retrieval index.
#[derive(Debug, Clone)]
pub struct FactBase {
    pub entities: Vec<String>,
    pub relations: Vec<String>,
    pub facts: Vec<Fact>,
    pub passages: Vec<String>,
    postings: HashMap<String, Vec<(usize, usize)>>, // term -> (passage, tf)
    avg_len: f64,
    lens: Vec<usize>,
}

impl PartialEq for FactBase {
    fn eq(&self, other: &Self) -> bool {
        self.entities == other.entities
            && self.relations == other.relations
            && self.facts == other.facts
    }
}

impl FactBase {
    fn build(entities: Vec<String>, relations: Vec<String>, facts: Vec<Fact>) -> Self {
        let passages: Vec<String> = facts.iter().map(Fact::passage).collect();
        let mut postings: HashMap<String, Vec<(usize, usize)>> = HashMap::new();
        let mut lens = Vec::with_capacity(passages.len());
        for (i, p) in passages.iter().enumerate() {
            let toks: Vec<&str> = p.split_whitespace().collect();
            lens.push(toks.len());
            let mut tf: BTreeMap<&str, usize> = BTreeMap::new();
            for t in toks {
                *tf.entry(t).or_default() += 1;
            }
            for (t, n) in tf {
                postings.entry(t.to_string()).or_default().push((i, n));
            }
        }
        let avg_len = if lens.is_empty() {
            0.0
        } else {
            lens.iter().sum::<usize>() as f64 / lens.len() as f64
        };
        Self { entities, relations, facts, passages, postings, avg_len, lens }
    }

    pub fn len(&self) -> usize {
        self.facts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.facts.is_empty()
    }

    /// BM25-lite score of every passage against the query; only passages
    /// sharing at least one term score above zero.
    fn bm25(&self, query: &str) -> Vec<(usize, f64)> {
        let n = self.passages.len() as f64;
        let mut scores: BTreeMap<usize, f64> = BTreeMap::new();
        let mut q_terms: Vec<&str> = query.split_whitespace().collect();
        q_terms.sort_unstable();
        q_terms.dedup();
        for term in q_terms {
            let Some(list) = self.postings.get(term) else { continue };
            let df = list.len() as f64;
            let idf = ((n - df + 0.5) / (df + 0.5) + 1.0).ln();
            for &(doc, tf) in list {
                let tf = tf as f64;
                let dl = self.lens[doc] as f64;
                let norm = tf * (BM25_K1 + 1.0)
                    / (tf + BM25_K1 * (1.0 - BM25_B + BM25_B * dl / self.avg_len));
                *scores.entry(doc).or_default() += idf * norm;
            }
        }
        scores.into_iter().collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QuestionKind {
    Retrieval,
    Arithmetic,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Question {
    pub id: String,
    pub text: String,
    pub hops: u8,
    pub gold_answer: String,
    pub kind: QuestionKind,
    /// Whether the toy policy's knowledge table contains this answer.
    pub parametric_known: bool,
    /// Gold support chain, first hop first. Empty for arithmetic questions.
    pub chain: Vec<FactId>,
    /// The expression, for arithmetic questions.
    pub expr: Option<String>,
}

impl Question {
    /// Relation sequence in hop order plus the anchor entity, parsed from
    /// the question's own text: "what is rB of rA of e0" -> ([rA, rB], "e0").
    /// Empty for arithmetic questions.
    pub fn parse_structure(&self) -> (Vec<&str>, &str) {
        let toks: Vec<&str> = self.text.split_whitespace().collect();
        let anchor = toks.last().copied().unwrap_or("");
        let mut rels: Vec<&str> = toks
            .iter()
            .copied()
            .skip(2)
            .step_by(2)
            .take_while(|t| *t != anchor)
            .collect();
        rels.reverse();
        if self.kind == QuestionKind::Arithmetic {
            rels.clear();
        }
        (rels, anchor)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KnowledgeEntry {
    pub answer: String,
    pub recall: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct World {
    pub config: WorldConfig,
    pub fact_base: FactBase,
    pub questions: Vec<Question>,
    /// Question id -> remembered answer with per-entry recall probability.
    pub knowledge: BTreeMap<String, KnowledgeEntry>,
}

/// One retrieved passage with the oracle relevance flag. The flag is for
/// gate evaluation and tests only; the policy and critic never see it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievedPassage {
    pub fact: FactId,
    pub text: String,
    pub score: f64,
    pub relevant: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalResult {
    pub query: String,
    pub passages: Vec<RetrievedPassage>,
}

impl RetrievalResult {
    pub fn surfaced_relevant(&self) -> bool {
        self.passages.iter().any(|p| p.relevant)
    }

    /// Raw stdout the rollout loop injects after the invoke segment.
    pub fn raw_output(&self) -> String {
        self.passages
            .iter()
            .map(|p| p.text.as_str())
            .collect::<Vec<_>>()
            .join("\n")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Tier {
    Tier1,
    Tier2,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TierLabel {
    pub tier: Tier,
    /// Correct no-tool rollouts out of 5.
    pub successes: u8,
}

/// Generates a world deterministically from its config.
pub fn generate_world(cfg: &WorldConfig) -> Result<World, WorldError> {
    if cfg.n_entities < 10 {
        return Err(WorldError::TooFewEntities(cfg.n_entities));
    }
    let mix_sum: f64 = cfg.hop_mix.iter().sum();
    if (mix_sum - 1.0).abs() > 1e-9 {
        return Err(WorldError::BadHopMix(mix_sum));
    }
    if cfg.n_questions > cfg.n_entities * cfg.n_relations {
        return Err(WorldError::InfeasibleWorld(format!(
            "{} questions exceed the {} derivable chains of a {}-entity, {}-relation graph",
            cfg.n_questions,
            cfg.n_entities * cfg.n_relations,
            cfg.n_entities,
            cfg.n_relations
        )));
    }

    let mut rng = crate::rng::Substreams::new(cfg.seed).stream("world");
    let entities: Vec<String> = (0..cfg.n_entities).map(|i| format!("ent{i}")).collect();
    let relations: Vec<String> = (0..cfg.n_relations).map(|i| format!("rel{i}")).collect();

    // (subject, relation) -> fact index. Functional so queries are unambiguous.
    let mut edges: BTreeMap<(usize, usize), usize> = BTreeMap::new();
    // Per-relation subject/object sets: a new fact (s, r, o) is rejected if
    // s already appears as an object of r or o as a subject of r. This keeps
    // "s r" queries unambiguous — no passage "w r s" can tie with "s r o" —
    // so targeted retrieval fails only through injected noise.
    let mut subjects_of: BTreeMap<usize, std::collections::BTreeSet<usize>> = BTreeMap::new();
    let mut objects_of: BTreeMap<usize, std::collections::BTreeSet<usize>> = BTreeMap::new();
    let mut facts: Vec<(usize, usize, usize)> = Vec::new();
    let mut questions = Vec::new();

    let draw_hops = |rng: &mut rand_chacha::ChaCha8Rng| -> u8 {
        let u: f64 = rng.gen();
        let mut acc = 0.0;
        for (i, w) in cfg.hop_mix.iter().enumerate() {
            acc += w;
            if u < acc {
                return (i + 1) as u8;
            }
        }
        4
    };

    for qi in 0..cfg.n_questions {
        let id = format!("q{qi:05}");
        let hops = draw_hops(&mut rng);
        let arith = hops == 1 && rng.gen::<f64>() < cfg.arith_frac;
        if arith {
            let a: i64 = rng.gen_range(2..=999);
            let op = ["+", "-", "*", "/"][rng.gen_range(0..4)];
            let b: i64 = if op == "/" {
                let d: i64 = rng.gen_range(2..=99);
                d
            } else {
                rng.gen_range(2..=999)
            };
            let expr = if op == "/" {
                // Keep division golds integral.
                let m: i64 = rng.gen_range(2..=99);
                format!("{} / {}", b * m, b)
            } else {
                format!("{a} {op} {b}")
            };
            let gold = execute_arithmetic(&expr);
            debug_assert!(!gold.starts_with("ERROR"));
            questions.push(Question {
                text: format!("compute {expr}"),
                id,
                hops: 1,
                gold_answer: gold,
                kind: QuestionKind::Arithmetic,
                parametric_known: false,
                chain: Vec::new(),
                expr: Some(expr),
            });
            continue;
        }

        // Build a gold chain of `hops` facts, creating edges as needed.
        let mut built = None;
        'attempt: for _ in 0..50 {
            let mut chain = Vec::new();
            let mut cur = rng.gen_range(0..cfg.n_entities);
            let start = cur;
            let mut ok = true;
            for _ in 0..hops {
                let reuse = rng.gen::<f64>() < 0.3;
                let mut placed = false;
                if reuse {
                    let existing: Vec<_> = relations
                        .iter()
                        .enumerate()
                        .filter_map(|(r, _)| edges.get(&(cur, r)).copied())
                        .collect();
                    if !existing.is_empty() {
                        let f = existing[rng.gen_range(0..existing.len())];
                        chain.push(f);
                        cur = facts[f].2;
                        placed = true;
                    }
                }
                if !placed {
                    for _ in 0..cfg.n_relations * 4 {
                        let r = rng.gen_range(0..cfg.n_relations);
                        if let Some(&f) = edges.get(&(cur, r)) {
                            // Relation taken: fall back to following it.
                            chain.push(f);
                            cur = facts[f].2;
                            placed = true;
                            break;
                        }
                        let o = rng.gen_range(0..cfg.n_entities);
                        if o == cur
                            || objects_of.get(&r).is_some_and(|set| set.contains(&cur))
                            || subjects_of.get(&r).is_some_and(|set| set.contains(&o))
                        {
                            continue;
                        }
                        let f = facts.len();
                        facts.push((cur, r, o));
                        edges.insert((cur, r), f);
                        subjects_of.entry(r).or_default().insert(cur);
                        objects_of.entry(r).or_default().insert(o);
                        chain.push(f);
                        cur = o;
                        placed = true;
                        break;
                    }
                }
                if !placed {
                    ok = false;
                    break;
                }
            }
            if ok {
                built = Some((start, chain, cur));
                break 'attempt;
            }
        }
        let Some((start, chain, end)) = built else {
            return Err(WorldError::InfeasibleWorld(format!(
                "could not derive a {hops}-hop chain for question {qi}"
            )));
        };

        // "what is relB of relA of ent0": outermost relation first.
        let mut text = String::from("what is");
        for f in chain.iter().rev() {
            text.push(' ');
            text.push_str(&relations[facts[*f].1]);
            text.push_str(" of");
        }
        text.push(' ');
        text.push_str(&entities[start]);
        questions.push(Question {
            id,
            text,
            hops,
            gold_answer: entities[end].clone(),
            kind: QuestionKind::Retrieval,
            parametric_known: false,
            chain: chain.into_iter().map(FactId).collect(),
            expr: None,
        });
    }

    // Distractor facts for retrieval texture.
    let n_distractors = (facts.len() as f64 * cfg.distractor_ratio) as usize;
    let mut added = 0;
    let mut guard = 0;
    while added < n_distractors && guard < n_distractors * 20 {
        guard += 1;
        let s = rng.gen_range(0..cfg.n_entities);
        let r = rng.gen_range(0..cfg.n_relations);
        let o = rng.gen_range(0..cfg.n_entities);
        if o == s
            || edges.contains_key(&(s, r))
            || objects_of.get(&r).is_some_and(|set| set.contains(&s))
            || subjects_of.get(&r).is_some_and(|set| set.contains(&o))
        {
            continue;
        }
        let f = facts.len();
        facts.push((s, r, o));
        edges.insert((s, r), f);
        subjects_of.entry(r).or_default().insert(s);
        objects_of.entry(r).or_default().insert(o);
        added += 1;
    }

    // Knowledge table: membership probability decays with hop count, scaled
    // to hit the configured fraction overall (weighted reservoir ranking).
    let hop_weight = |h: u8| -> f64 { [1.0, 0.6, 0.3, 0.15][(h - 1) as usize] };
    let mut keyed: Vec<(f64, usize)> = questions
        .iter()
        .enumerate()
        .map(|(i, q)| {
            let u: f64 = rng.gen_range(1e-12..1.0);
            (u.powf(1.0 / hop_weight(q.hops)), i)
        })
        .collect();
    keyed.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
    let n_known = (cfg.known_frac * questions.len() as f64).round() as usize;
    let mut knowledge = BTreeMap::new();
    for &(_, qi) in keyed.iter().take(n_known) {
        questions[qi].parametric_known = true;
        knowledge.insert(
            questions[qi].id.clone(),
            KnowledgeEntry { answer: questions[qi].gold_answer.clone(), recall: cfg.recall },
        );
    }

    let fact_structs: Vec<Fact> = facts
        .iter()
        .map(|&(s, r, o)| Fact {
            subject: entities[s].clone(),
            relation: relations[r].clone(),
            object: entities[o].clone(),
        })
        .collect();

    Ok(World {
        config: cfg.clone(),
        fact_base: FactBase::build(entities, relations, fact_structs),
        questions,
        knowledge,
    })
}

impl World {
    pub fn question(&self, id: &str) -> Option<&Question> {
        self.questions.iter().find(|q| q.id == id)
    }

    /// Rebuilds the world with every entity surface form renamed through
    /// `f(index, old_name)`. Structure (ids, chains, table membership, hash
    /// priors) is untouched; only entity text changes — including gold
    /// answers and the passages that contain them. This is the lever for
    /// the no-leakage audits: features must not move under it.
    pub fn with_renamed_entities(&self, f: impl Fn(usize, &str) -> String) -> World {
        let map: BTreeMap<&str, String> = self
            .fact_base
            .entities
            .iter()
            .enumerate()
            .map(|(i, e)| (e.as_str(), f(i, e)))
            .collect();
        let rename = |s: &str| -> String {
            s.split_whitespace()
                .map(|t| map.get(t).cloned().unwrap_or_else(|| t.to_string()))
                .collect::<Vec<_>>()
                .join(" ")
        };
        let entities: Vec<String> =
            self.fact_base.entities.iter().map(|e| map[e.as_str()].clone()).collect();
        let facts: Vec<Fact> = self
            .fact_base
            .facts
            .iter()
            .map(|x| Fact {
                subject: map[x.subject.as_str()].clone(),
                relation: x.relation.clone(),
                object: map[x.object.as_str()].clone(),
            })
            .collect();
        let questions: Vec<Question> = self
            .questions
            .iter()
            .map(|q| Question {
                text: rename(&q.text),
                gold_answer: rename(&q.gold_answer),
                ..q.clone()
            })
            .collect();
        let knowledge: BTreeMap<String, KnowledgeEntry> = self
            .knowledge
            .iter()
            .map(|(id, e)| {
                (id.clone(), KnowledgeEntry { answer: rename(&e.answer), recall: e.recall })
            })
            .collect();
        World {
            config: self.config.clone(),
            fact_base: FactBase::build(entities, self.fact_base.relations.clone(), facts),
            questions,
            knowledge,
        }
    }

    /// Question ids hash-split 4:1 into training and held-out pools.
    pub fn is_heldout(id: &str) -> bool {
        fnv1a(id.as_bytes()) % 5 == 0
    }

    pub fn training_questions(&self) -> Vec<&Question> {
        self.questions.iter().filter(|q| !Self::is_heldout(&q.id)).collect()
    }

    pub fn heldout_questions(&self) -> Vec<&Question> {
        self.questions.iter().filter(|q| Self::is_heldout(&q.id)).collect()
    }
}

/// Retrieves the top-k passages for a query.
///
/// Scores are BM25 with k1 = 1.2, b = 0.75; ties and zero-overlap queries
/// fall back to passage order, so identical `(query, rng_state)` always
/// yields an identical result. With probability `noise_rate` the top passage
/// is replaced (in place) by a uniformly random passage from outside
/// `gold_chain`. Relevance flags mark gold-chain membership and exist for
/// oracle tests and gate annotation only.
pub fn retrieve(
    fb: &FactBase,
    query: &str,
    k: usize,
    noise_rate: f64,
    rng: &mut impl Rng,
    gold_chain: &[FactId],
) -> Result<RetrievalResult, WorldError> {
    assert!(k >= 1, "retrieval needs k >= 1");
    if fb.is_empty() {
        return Err(WorldError::EmptyIndex);
    }
    let mut scored = fb.bm25(query);
    // Highest score first; ties by passage index.
    scored.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
    let mut top: Vec<(usize, f64)> = scored.into_iter().take(k).collect();
    // Zero-overlap remainder in index order.
    let mut next_fill = 0usize;
    while top.len() < k.min(fb.len()) {
        if !top.iter().any(|&(d, _)| d == next_fill) {
            top.push((next_fill, 0.0));
        }
        next_fill += 1;
    }

    let noise_draw: f64 = rng.gen();
    if noise_draw < noise_rate {
        // Replace the top passage with an irrelevant one, preferring
        // confusable passages that share an entity with the query (the
        // classic retrieval failure: right entity, wrong relation).
        let q_toks: Vec<&str> = query.split_whitespace().collect();
        let confusable: Vec<usize> = (0..fb.len())
            .filter(|i| {
                let subj = fb.passages[*i].split_whitespace().next().unwrap_or("");
                q_toks.contains(&subj)
                    && !gold_chain.iter().any(|f| f.0 == *i)
                    && *i != top[0].0
            })
            .collect();
        if !confusable.is_empty() {
            top[0] = (confusable[rng.gen_range(0..confusable.len())], 0.0);
        } else {
            for _ in 0..64 {
                let cand = rng.gen_range(0..fb.len());
                let in_chain = gold_chain.iter().any(|f| f.0 == cand);
                if !in_chain && cand != top[0].0 {
                    top[0] = (cand, 0.0);
                    break;
                }
            }
        }
    }

    let passages = top
        .into_iter()
        .map(|(doc, score)| RetrievedPassage {
            fact: FactId(doc),
            text: fb.passages[doc].clone(),
            score,
            relevant: gold_chain.iter().any(|f| f.0 == doc),
        })
        .collect();
    Ok(RetrievalResult { query: query.to_string(), passages })
}

/// Exact-match normalization: lowercase, strip punctuation, drop the
/// articles {a, an, the}, collapse whitespace.
pub fn normalize_em(text: &str) -> String {
    let lowered = text.to_lowercase();
    let cleaned: String = lowered
        .chars()
        .map(|c| if c.is_alphanumeric() || c == '/' || c == '-' { c } else { ' ' })
        .collect();
    cleaned
        .split_whitespace()
        .filter(|w| !matches!(*w, "a" | "an" | "the"))
        .collect::<Vec<_>>()
        .join(" ")
}

/// Terminal exact-match reward. Equality after normalization, or the
/// normalized prediction containing the normalized gold as a substring
/// (multi-word entity rule; the containment runs one way only).
pub fn compute_reward(prediction: &str, gold: &str) -> f64 {
    let p = normalize_em(prediction);
    let g = normalize_em(gold);
    if g.is_empty() {
        return f64::from(p.is_empty());
    }
    if p == g || p.contains(&g) {
        1.0
    } else {
        0.0
    }
}

/// Labels a question by 5-rollout no-tool consistency: Tier 2 iff at least
/// one rollout is correct. The caller supplies the no-tool rollout as a
/// closure returning the episode reward.
pub fn label_tier<R: Rng, F: FnMut(&Question, &mut R) -> f64>(
    q: &Question,
    mut rollout: F,
    rng: &mut R,
) -> TierLabel {
    let mut successes = 0u8;
    for _ in 0..5 {
        if rollout(q, rng) >= 1.0 {
            successes += 1;
        }
    }
    TierLabel {
        tier: if successes >= 1 { Tier::Tier2 } else { Tier::Tier1 },
        successes,
    }
}

// ---------------------------------------------------------------------------
// World dump (JSONL) for reproducibility.
// ---------------------------------------------------------------------------

#[derive(Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
enum DumpLine {
    Config(WorldConfig),
    Entities { names: Vec<String> },
    Relations { names: Vec<String> },
    Fact(Fact),
    Question(Question),
    Knowledge { id: String, entry: KnowledgeEntry },
}

impl World {
    /// One JSON object per line: config, entities, relations, facts,
    /// questions, knowledge entries.
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        let mut push = |l: &DumpLine| {
            out.push_str(&serde_json::to_string(l).expect("dump serializes"));
            out.push('\n');
        };
        push(&DumpLine::Config(self.config.clone()));
        push(&DumpLine::Entities { names: self.fact_base.entities.clone() });
        push(&DumpLine::Relations { names: self.fact_base.relations.clone() });
        for f in &self.fact_base.facts {
            push(&DumpLine::Fact(f.clone()));
        }
        for q in &self.questions {
            push(&DumpLine::Question(q.clone()));
        }
        for (id, entry) in &self.knowledge {
            push(&DumpLine::Knowledge { id: id.clone(), entry: entry.clone() });
        }
        out
    }

    pub fn from_jsonl(text: &str) -> Result<Self, WorldError> {
        let mut config = None;
        let mut entities = Vec::new();
        let mut relations = Vec::new();
        let mut facts = Vec::new();
        let mut questions = Vec::new();
        let mut knowledge = BTreeMap::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            match serde_json::from_str::<DumpLine>(line)? {
                DumpLine::Config(c) => config = Some(c),
                DumpLine::Entities { names } => entities = names,
                DumpLine::Relations { names } => relations = names,
                DumpLine::Fact(f) => facts.push(f),
                DumpLine::Question(q) => questions.push(q),
                DumpLine::Knowledge { id, entry } => {
                    knowledge.insert(id, entry);
                }
            }
            let _ = i;
        }
        let config = config.ok_or(WorldError::BadDump {
            line: 0,
            reason: "missing config line".into(),
        })?;
        Ok(World {
            config,
            fact_base: FactBase::build(entities, relations, facts),
            questions,
            knowledge,
        })
    }
}
