//! Trajectory/segment data model and the rollout parser.
//!
//! A raw rollout interleaves model text, fenced code blocks, tool-output
//! placeholders, `<context>` blocks, and a terminal answer ending at `<eos>`.
//! Parsing cuts it into segments at the structurally observable boundaries:
//!
//! - **invoke**: reasoning plus a code block, ends at the closing fence;
//! - **assimilate**: the extraction, ends at `</context>`;
//! - **commit**: the final answer, ends at `<eos>`.
//!
//! A trajectory with K tool calls has 2K+1 segments. Raw tool output is
//! passed out-of-band (`tool_outputs`) and never re-parsed; the rollout text
//! marks where it was injected with a `<tool_output/>` line. Boundary states
//! snapshot the full context at each segment edge: *transient* states still
//! carry the raw tool output as their final block, *persistent* states have
//! had it replaced by the model's extraction. Because of that replacement,
//! every generated span contains model tokens only — no gradient masking is
//! ever needed downstream.
//!
//! Tokens are whitespace-delimited; all delimiters stand on their own line.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Delimiters, each of which must begin (and fill) a line, case-sensitive.
pub const FENCE: &str = "```";
pub const TOOL_OUTPUT_MARK: &str = "<tool_output/>";
pub const CONTEXT_OPEN: &str = "<context>";
pub const CONTEXT_CLOSE: &str = "</context>";
pub const EOS_MARK: &str = "<eos>";

/// Hard cap on segments per episode; longer rollouts are truncated, not
/// rejected.
pub const MAX_SEGMENTS: usize = 15;

/// Wire-format version tag.
pub const WIRE_FMT: &str = "segcredit.v1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SegmentKind {
    Invoke,
    Assimilate,
    Commit,
}

/// The closing marker a segment ends at. Determined by the segment kind.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Delimiter {
    CodeFence,
    ContextClose,
    Eos,
}

impl Delimiter {
    pub fn for_kind(kind: SegmentKind) -> Self {
        match kind {
            SegmentKind::Invoke => Delimiter::CodeFence,
            SegmentKind::Assimilate => Delimiter::ContextClose,
            SegmentKind::Commit => Delimiter::Eos,
        }
    }
}

/// One segment of model-generated text.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Segment {
    pub kind: SegmentKind,
    /// The segment's text, delimiter included.
    pub text: String,
    /// Per-token log-probabilities under the generating policy. Zero when
    /// the trajectory was parsed from text rather than sampled.
    pub logprobs: Vec<f64>,
    /// Global token indices `[start, end)` of the generated span. Skipped on
    /// the wire and recomputed from the texts when reading back.
    #[serde(skip)]
    pub span: (usize, usize),
    #[serde(skip, default = "default_delimiter")]
    pub delimiter: Delimiter,
}

fn default_delimiter() -> Delimiter {
    Delimiter::Eos
}

impl Segment {
    pub fn token_count(&self) -> usize {
        self.span.1 - self.span.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BlockTag {
    Prompt,
    ModelText,
    RawToolOutput,
    Extraction,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Block {
    pub tag: BlockTag,
    pub text: String,
}

impl Block {
    pub fn new(tag: BlockTag, text: impl Into<String>) -> Self {
        Self { tag, text: text.into() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BoundaryKind {
    Persistent,
    Transient,
}

/// Context snapshot at a segment edge, where the critic is evaluated.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundaryState {
    pub kind: BoundaryKind,
    pub blocks: Vec<Block>,
    /// Boundary ordinal within the trajectory.
    #[serde(skip)]
    pub index: usize,
}

impl BoundaryState {
    pub fn raw_block_count(&self) -> usize {
        self.blocks
            .iter()
            .filter(|b| b.tag == BlockTag::RawToolOutput)
            .count()
    }

    pub fn extraction_blocks(&self) -> impl Iterator<Item = &Block> {
        self.blocks.iter().filter(|b| b.tag == BlockTag::Extraction)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub question_id: String,
    pub segments: Vec<Segment>,
    /// One boundary per segment edge: `segments.len() + 1` entries.
    pub boundaries: Vec<BoundaryState>,
    /// Terminal reward, 0 or 1.
    pub reward: f64,
    /// Set when the rollout exceeded [`MAX_SEGMENTS`] and was cut.
    #[serde(default)]
    pub truncated: bool,
    /// Global indices of environment-injected tokens (the tool-output
    /// placeholders). Recomputed from structure when reading the wire format.
    #[serde(skip)]
    pub env_token_indices: Vec<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MalformedKind {
    UnclosedFence,
    MissingToolOutputMarker,
    MissingContextClose,
    MissingContextOpen,
    MissingEos,
    TextAfterEos,
    UnexpectedMarker,
}

#[derive(Debug, Error, PartialEq)]
pub enum TrajectoryError {
    #[error("malformed rollout at byte {offset}: {kind:?}")]
    MalformedRollout { offset: usize, kind: MalformedKind },
    #[error("rollout has {blocks} code blocks but {outputs} tool outputs were supplied")]
    ToolOutputCount { blocks: usize, outputs: usize },
    #[error("boundary state is not transient")]
    NotTransient,
    #[error("segment index {index} out of range for {count} segments")]
    IndexOutOfRange { index: usize, count: usize },
}

#[derive(Debug, Error)]
pub enum WireError {
    #[error("unsupported wire format tag {0:?}, expected {WIRE_FMT:?}")]
    BadVersion(String),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// Whitespace tokenization. Delimiters stand on their own lines, so they come
/// out as standalone tokens.
pub fn tokenize(text: &str) -> Vec<&str> {
    text.split_whitespace().collect()
}

fn is_fence_line(line: &str) -> bool {
    line.starts_with(FENCE)
}

struct Lines<'a> {
    text: &'a str,
    pos: usize,
}

impl<'a> Lines<'a> {
    fn new(text: &'a str) -> Self {
        Self { text, pos: 0 }
    }

    /// Offset and content of the next line, without consuming it.
    fn peek(&self) -> Option<(usize, &'a str)> {
        if self.pos >= self.text.len() {
            return None;
        }
        let rest = &self.text[self.pos..];
        let end = rest.find('\n').unwrap_or(rest.len());
        Some((self.pos, &rest[..end]))
    }

    fn advance(&mut self) {
        if let Some((off, line)) = self.peek() {
            let end = off + line.len();
            // Step over the newline unless the line ends the text.
            self.pos = if end < self.text.len() { end + 1 } else { end };
        }
    }

    fn eof_offset(&self) -> usize {
        self.text.len()
    }
}

/// Everything segment_rollout needs to know about where a rollout came from.
#[derive(Debug, Clone)]
pub struct RawRollout<'a> {
    pub question_id: &'a str,
    pub prompt: &'a str,
    pub text: &'a str,
    pub tool_outputs: &'a [String],
    pub reward: f64,
}

/// Parses a raw rollout into a [`Trajectory`].
///
/// Every character of model output lands in exactly one segment; the
/// `<tool_output/>` placeholder lines are the only environment-injected
/// tokens and belong to no segment. Errors identify the byte offset of the
/// violation.
pub fn segment_rollout(raw: &RawRollout) -> Result<Trajectory, TrajectoryError> {
    let mut lines = Lines::new(raw.text);
    let mut segments: Vec<Segment> = Vec::new();
    let mut boundaries = vec![BoundaryState {
        kind: BoundaryKind::Persistent,
        blocks: vec![Block::new(BlockTag::Prompt, raw.prompt)],
        index: 0,
    }];
    let mut env_token_indices = Vec::new();
    let mut token_cursor = 0usize;
    let mut tool_idx = 0usize;
    let mut truncated = false;

    fn push_segment(
        segments: &mut Vec<Segment>,
        kind: SegmentKind,
        text: String,
        token_cursor: &mut usize,
    ) {
        let n = tokenize(&text).len();
        let span = (*token_cursor, *token_cursor + n);
        *token_cursor += n;
        segments.push(Segment {
            kind,
            text,
            logprobs: vec![0.0; n],
            span,
            delimiter: Delimiter::for_kind(kind),
        });
    }

    'outer: loop {
        // Accumulate model text until a structural delimiter decides whether
        // this region is an invoke (code fence) or the commit (eos).
        let mut region: Vec<&str> = Vec::new();
        let (kind, text) = loop {
            let Some((off, line)) = lines.peek() else {
                return Err(TrajectoryError::MalformedRollout {
                    offset: lines.eof_offset(),
                    kind: MalformedKind::MissingEos,
                });
            };
            if is_fence_line(line) {
                let fence_off = off;
                region.push(line);
                lines.advance();
                // Code lines until the closing fence.
                loop {
                    let Some((_, code_line)) = lines.peek() else {
                        return Err(TrajectoryError::MalformedRollout {
                            offset: fence_off,
                            kind: MalformedKind::UnclosedFence,
                        });
                    };
                    region.push(code_line);
                    lines.advance();
                    if is_fence_line(code_line) {
                        break;
                    }
                }
                break (SegmentKind::Invoke, region.join("\n"));
            } else if line == EOS_MARK {
                region.push(line);
                lines.advance();
                break (SegmentKind::Commit, region.join("\n"));
            } else if line == TOOL_OUTPUT_MARK || line == CONTEXT_OPEN || line == CONTEXT_CLOSE {
                return Err(TrajectoryError::MalformedRollout {
                    offset: off,
                    kind: MalformedKind::UnexpectedMarker,
                });
            } else {
                region.push(line);
                lines.advance();
            }
        };

        match kind {
            SegmentKind::Commit => {
                push_segment(&mut segments, SegmentKind::Commit, text.clone(), &mut token_cursor);
                let prev = boundaries.last().unwrap().clone();
                let mut blocks = prev.blocks;
                blocks.push(Block::new(BlockTag::ModelText, text));
                boundaries.push(BoundaryState {
                    kind: BoundaryKind::Persistent,
                    blocks,
                    index: boundaries.len(),
                });
                // Only whitespace may follow the EOS marker.
                while let Some((off, line)) = lines.peek() {
                    if !line.trim().is_empty() {
                        return Err(TrajectoryError::MalformedRollout {
                            offset: off,
                            kind: MalformedKind::TextAfterEos,
                        });
                    }
                    lines.advance();
                }
                break 'outer;
            }
            SegmentKind::Invoke => {
                if tool_idx >= raw.tool_outputs.len() {
                    return Err(TrajectoryError::ToolOutputCount {
                        blocks: tool_idx + 1,
                        outputs: raw.tool_outputs.len(),
                    });
                }
                push_segment(&mut segments, SegmentKind::Invoke, text.clone(), &mut token_cursor);
                let prev = boundaries.last().unwrap().clone();
                let mut blocks = prev.blocks;
                blocks.push(Block::new(BlockTag::ModelText, text));
                blocks.push(Block::new(
                    BlockTag::RawToolOutput,
                    raw.tool_outputs[tool_idx].clone(),
                ));
                tool_idx += 1;
                boundaries.push(BoundaryState {
                    kind: BoundaryKind::Transient,
                    blocks,
                    index: boundaries.len(),
                });
                if segments.len() >= MAX_SEGMENTS {
                    truncated = true;
                    break 'outer;
                }

                // The placeholder line marking where raw output was injected.
                match lines.peek() {
                    Some((_, line)) if line == TOOL_OUTPUT_MARK => {
                        env_token_indices.push(token_cursor);
                        token_cursor += 1;
                        lines.advance();
                    }
                    Some((off, _)) => {
                        return Err(TrajectoryError::MalformedRollout {
                            offset: off,
                            kind: MalformedKind::MissingToolOutputMarker,
                        });
                    }
                    None => {
                        return Err(TrajectoryError::MalformedRollout {
                            offset: lines.eof_offset(),
                            kind: MalformedKind::MissingToolOutputMarker,
                        });
                    }
                }

                // Assimilate region: everything through `</context>`.
                let mut assim: Vec<&str> = Vec::new();
                let mut extraction: Vec<&str> = Vec::new();
                let mut open_seen = false;
                loop {
                    let Some((off, line)) = lines.peek() else {
                        return Err(TrajectoryError::MalformedRollout {
                            offset: lines.eof_offset(),
                            kind: MalformedKind::MissingContextClose,
                        });
                    };
                    if is_fence_line(line) || line == EOS_MARK {
                        // Hit the next segment's delimiter first.
                        return Err(TrajectoryError::MalformedRollout {
                            offset: off,
                            kind: MalformedKind::MissingContextClose,
                        });
                    }
                    if line == CONTEXT_CLOSE {
                        if !open_seen {
                            return Err(TrajectoryError::MalformedRollout {
                                offset: off,
                                kind: MalformedKind::MissingContextOpen,
                            });
                        }
                        assim.push(line);
                        lines.advance();
                        break;
                    }
                    if line == CONTEXT_OPEN {
                        open_seen = true;
                    } else if open_seen {
                        extraction.push(line);
                    }
                    assim.push(line);
                    lines.advance();
                }
                let assim_text = assim.join("\n");
                push_segment(
                    &mut segments,
                    SegmentKind::Assimilate,
                    assim_text,
                    &mut token_cursor,
                );
                let transient = boundaries.last().unwrap().clone();
                let mut persistent = replace_tool_output(&transient, &extraction.join("\n"))
                    .expect("boundary after invoke is transient");
                persistent.index = boundaries.len();
                boundaries.push(persistent);
                if segments.len() >= MAX_SEGMENTS {
                    truncated = true;
                    break 'outer;
                }
            }
            SegmentKind::Assimilate => unreachable!(),
        }
    }

    if !truncated && tool_idx != raw.tool_outputs.len() {
        return Err(TrajectoryError::ToolOutputCount {
            blocks: tool_idx,
            outputs: raw.tool_outputs.len(),
        });
    }

    Ok(Trajectory {
        question_id: raw.question_id.to_string(),
        segments,
        boundaries,
        reward: raw.reward,
        truncated,
        env_token_indices,
    })
}

/// The context-replacement step: substitutes the raw tool output with the
/// model's extraction, turning a transient state into the next persistent
/// one. All other blocks are untouched; the new state's ordinal advances
/// by one.
pub fn replace_tool_output(
    state: &BoundaryState,
    extraction: &str,
) -> Result<BoundaryState, TrajectoryError> {
    if state.kind != BoundaryKind::Transient {
        return Err(TrajectoryError::NotTransient);
    }
    let raw_pos = state
        .blocks
        .iter()
        .rposition(|b| b.tag == BlockTag::RawToolOutput)
        .ok_or(TrajectoryError::NotTransient)?;
    let mut blocks = state.blocks.clone();
    blocks[raw_pos] = Block::new(BlockTag::Extraction, extraction);
    Ok(BoundaryState {
        kind: BoundaryKind::Persistent,
        blocks,
        index: state.index + 1,
    })
}

/// The model-token index set `g_k` of segment `k`.
pub fn model_token_set(traj: &Trajectory, k: usize) -> Result<BTreeSet<usize>, TrajectoryError> {
    let seg = traj.segments.get(k).ok_or(TrajectoryError::IndexOutOfRange {
        index: k,
        count: traj.segments.len(),
    })?;
    Ok((seg.span.0..seg.span.1).collect())
}

impl Trajectory {
    pub fn invoke_count(&self) -> usize {
        self.segments
            .iter()
            .filter(|s| s.kind == SegmentKind::Invoke)
            .count()
    }

    /// Boundary states at segment starts — the states the critic is trained
    /// and evaluated on. The post-commit boundary is structural only.
    pub fn segment_start_boundaries(&self) -> &[BoundaryState] {
        &self.boundaries[..self.segments.len()]
    }

    /// Checks every structural invariant; returns the first violation.
    /// Truncated trajectories only promise the boundary-count relation.
    pub fn validate(&self) -> Result<(), String> {
        if self.boundaries.len() != self.segments.len() + 1 {
            return Err(format!(
                "boundaries {} != segments {} + 1",
                self.boundaries.len(),
                self.segments.len()
            ));
        }
        if self.segments.len() > MAX_SEGMENTS {
            return Err(format!("{} segments exceeds cap", self.segments.len()));
        }
        for (i, b) in self.boundaries.iter().enumerate() {
            let raws = b.raw_block_count();
            match b.kind {
                BoundaryKind::Transient => {
                    if raws != 1 || b.blocks.last().map(|b| b.tag) != Some(BlockTag::RawToolOutput)
                    {
                        return Err(format!("transient boundary {i} raw-block shape wrong"));
                    }
                }
                BoundaryKind::Persistent => {
                    if raws != 0 {
                        return Err(format!("persistent boundary {i} holds raw output"));
                    }
                }
            }
        }
        if self.truncated {
            return Ok(());
        }
        if self.segments.is_empty() {
            return Err("empty trajectory".into());
        }
        if self.segments.last().unwrap().kind != SegmentKind::Commit {
            return Err("last segment is not commit".into());
        }
        if self.segments.len() != 2 * self.invoke_count() + 1 {
            return Err(format!(
                "segment count {} != 2K+1 with K={}",
                self.segments.len(),
                self.invoke_count()
            ));
        }
        if self.boundaries[0].kind != BoundaryKind::Persistent
            || self.boundaries.last().unwrap().kind != BoundaryKind::Persistent
        {
            return Err("first/last boundary not persistent".into());
        }
        for (k, seg) in self.segments.iter().enumerate() {
            if seg.delimiter != Delimiter::for_kind(seg.kind) {
                return Err(format!("segment {k} delimiter does not match kind"));
            }
            if seg.logprobs.len() != seg.token_count() {
                return Err(format!("segment {k} logprob length mismatch"));
            }
            let expect_next = match seg.kind {
                SegmentKind::Invoke => BoundaryKind::Transient,
                _ => BoundaryKind::Persistent,
            };
            if self.boundaries[k + 1].kind != expect_next {
                return Err(format!("boundary {} kind breaks alternation", k + 1));
            }
            if seg.kind == SegmentKind::Invoke
                && self.segments.get(k + 1).map(|s| s.kind) != Some(SegmentKind::Assimilate)
            {
                return Err(format!("invoke at {k} not followed by assimilate"));
            }
        }
        // Provenance purity: spans are disjoint and avoid environment tokens.
        let env: BTreeSet<usize> = self.env_token_indices.iter().copied().collect();
        let mut seen = BTreeSet::new();
        for seg in &self.segments {
            for t in seg.span.0..seg.span.1 {
                if env.contains(&t) {
                    return Err(format!("model span contains environment token {t}"));
                }
                if !seen.insert(t) {
                    return Err(format!("token {t} in two segments"));
                }
            }
        }
        Ok(())
    }

    /// Serializes to one JSONL line in the `segcredit.v1` wire format.
    pub fn to_jsonl(&self) -> String {
        let wire = WireTrajectory {
            fmt: WIRE_FMT.to_string(),
            question_id: self.question_id.clone(),
            reward: self.reward,
            truncated: self.truncated,
            segments: self.segments.clone(),
            boundaries: self.boundaries.clone(),
        };
        serde_json::to_string(&wire).expect("trajectory serializes")
    }

    /// Parses one JSONL line, recomputing token spans and boundary ordinals
    /// from the stored texts.
    pub fn from_jsonl(line: &str) -> Result<Self, WireError> {
        let wire: WireTrajectory = serde_json::from_str(line)?;
        if wire.fmt != WIRE_FMT {
            return Err(WireError::BadVersion(wire.fmt));
        }
        let mut traj = Trajectory {
            question_id: wire.question_id,
            segments: wire.segments,
            boundaries: wire.boundaries,
            reward: wire.reward,
            truncated: wire.truncated,
            env_token_indices: Vec::new(),
        };
        let mut cursor = 0usize;
        for i in 0..traj.segments.len() {
            let kind = traj.segments[i].kind;
            traj.segments[i].delimiter = Delimiter::for_kind(kind);
            let n = tokenize(&traj.segments[i].text).len();
            traj.segments[i].span = (cursor, cursor + n);
            cursor += n;
            if kind == SegmentKind::Invoke {
                // The placeholder token sits between invoke and assimilate.
                traj.env_token_indices.push(cursor);
                cursor += 1;
            }
        }
        for (i, b) in traj.boundaries.iter_mut().enumerate() {
            b.index = i;
        }
        Ok(traj)
    }
}

#[derive(Serialize, Deserialize)]
struct WireTrajectory {
    fmt: String,
    question_id: String,
    reward: f64,
    #[serde(default)]
    truncated: bool,
    segments: Vec<Segment>,
    boundaries: Vec<BoundaryState>,
}
