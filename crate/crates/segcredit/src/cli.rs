//! The experiment lifecycle as subcommands: world generation, critic
//! warm-up with the verification gate, PPO training, evaluation, and
//! trajectory audits.
//!
//! Exit codes: 0 success, 1 domain error, 2 usage error, 3 gate failure.
//! Every command writes a manifest recording its full configuration and the
//! content hashes of its inputs; rerunning with an identical manifest
//! produces byte-identical outputs, because all randomness flows from the
//! manifest seed through named substreams.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use crate::critic::{featurize, CriticParams};
use crate::metrics;
use crate::policy::{greedy_trajectory, sample_trajectory, PolicyParams, RolloutMode};
use crate::ppo::{self, PpoConfig, PpoError, WarmupMode, WarmupSpec};
use crate::rng::{content_hash, Substreams};
use crate::toolworld::{generate_world, Tier, World, WorldConfig};
use crate::trajectory::Trajectory;

pub const EXIT_OK: i32 = 0;
pub const EXIT_DOMAIN: i32 = 1;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_GATE: i32 = 3;

const MANIFEST_VERSION: &str = "segcredit.manifest.v1";

#[derive(Parser)]
#[command(
    name = "segcredit",
    version,
    about = "Segment-level credit assignment laboratory on a synthetic tool world"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic tool world and write its dump.
    GenWorld(GenWorldArgs),
    /// Build warm-up buckets, train the critic, and run the verification gate.
    Warmup(WarmupArgs),
    /// Full run: warm-up, gate, then segment-level PPO with logs.
    Train(TrainArgs),
    /// Evaluate a policy/critic pair on held-out questions.
    Eval(EvalArgs),
    /// Per-segment advantage audit of a trajectory dump.
    Audit(AuditArgs),
}

#[derive(Args, Clone)]
struct GenWorldArgs {
    #[arg(long)]
    seed: u64,
    #[arg(long, default_value_t = 120)]
    entities: usize,
    #[arg(long, default_value_t = 500)]
    questions: usize,
    /// Comma-separated probabilities for 1..4 hops; must sum to 1.
    #[arg(long, default_value = "0.40,0.40,0.14,0.06")]
    hop_mix: String,
    #[arg(long, default_value_t = 0.12)]
    noise_rate: f64,
    #[arg(long, default_value_t = 0.25)]
    arith_frac: f64,
    #[arg(long, default_value_t = 0.40)]
    known_frac: f64,
    #[arg(long, default_value_t = 0.98)]
    recall: f64,
    #[arg(long, default_value_t = 12)]
    relations: usize,
    #[arg(long, default_value_t = 3)]
    top_k: usize,
    #[arg(long, default_value = "out/world")]
    out: PathBuf,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum WarmupModeArg {
    Curated,
    Random,
    Cold,
}

impl From<WarmupModeArg> for WarmupMode {
    fn from(m: WarmupModeArg) -> Self {
        match m {
            WarmupModeArg::Curated => WarmupMode::Curated,
            WarmupModeArg::Random => WarmupMode::Random,
            WarmupModeArg::Cold => WarmupMode::Cold,
        }
    }
}

#[derive(Args, Clone)]
struct WarmupArgs {
    /// Path to a world dump (world.jsonl).
    #[arg(long)]
    world: PathBuf,
    #[arg(long)]
    seed: u64,
    #[arg(long, value_enum, default_value = "curated")]
    warmup: WarmupModeArg,
    /// Warm-up trajectory budget.
    #[arg(long, default_value_t = 1000)]
    trajectories: usize,
    #[arg(long, default_value_t = 128)]
    hidden: usize,
    /// Emit the checkpoint and report even when the gate fails.
    #[arg(long)]
    allow_cold_start: bool,
    #[arg(long, default_value = "out/warmup")]
    out: PathBuf,
}

#[derive(Args, Clone)]
struct TrainArgs {
    #[arg(long)]
    world: PathBuf,
    #[arg(long)]
    seed: u64,
    #[arg(long, default_value_t = 0.0)]
    lambda: f64,
    #[arg(long, default_value_t = 200)]
    steps: usize,
    #[arg(long, value_enum, default_value = "curated")]
    warmup: WarmupModeArg,
    #[arg(long, default_value_t = 1000)]
    trajectories: usize,
    #[arg(long)]
    allow_cold_start: bool,
    #[arg(long, default_value_t = 12)]
    rollout_batch: usize,
    #[arg(long, default_value_t = 5)]
    n_samples: usize,
    #[arg(long, default_value_t = 25)]
    eval_interval: usize,
    #[arg(long, default_value = "out/train")]
    out: PathBuf,
}

#[derive(Args, Clone)]
struct EvalArgs {
    #[arg(long)]
    world: PathBuf,
    /// Policy checkpoint; the warm-start policy when omitted.
    #[arg(long)]
    policy: Option<PathBuf>,
    /// Critic checkpoint; a fresh (constant 0.5) critic when omitted.
    #[arg(long)]
    critic: Option<PathBuf>,
    #[arg(long)]
    seed: u64,
    /// Temperature-1 sampling instead of the default greedy decisions.
    #[arg(long)]
    sampled: bool,
    /// Rollouts per held-out question (sampled mode).
    #[arg(long, default_value_t = 1)]
    rollouts: usize,
    #[arg(long, default_value = "out/eval")]
    out: PathBuf,
}

#[derive(Args)]
struct AuditArgs {
    /// Trajectory dump, one segcredit.v1 JSON object per line.
    #[arg(long)]
    trajectories: PathBuf,
    #[arg(long)]
    world: PathBuf,
    /// Critic checkpoint; a fresh (constant 0.5) critic when omitted.
    #[arg(long)]
    critic: Option<PathBuf>,
    #[arg(long, default_value_t = 0.0)]
    lambda: f64,
    /// Output CSV path.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, thiserror::Error)]
enum CliError {
    #[error("{0}")]
    Domain(String),
    #[error(transparent)]
    Ppo(#[from] PpoError),
    #[error(transparent)]
    World(#[from] crate::toolworld::WorldError),
    #[error(transparent)]
    Critic(#[from] crate::critic::CriticError),
    #[error(transparent)]
    Policy(#[from] crate::policy::PolicyError),
    #[error(transparent)]
    Wire(#[from] crate::trajectory::WireError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl CliError {
    fn exit_code(&self) -> i32 {
        match self {
            CliError::Ppo(PpoError::GateFailed { .. }) => EXIT_GATE,
            _ => EXIT_DOMAIN,
        }
    }
}

/// Reproducibility record written next to every command's outputs.
#[derive(Debug, Serialize, Deserialize)]
pub struct ExperimentManifest {
    pub version: String,
    pub command: String,
    pub seed: u64,
    pub config: serde_json::Value,
    /// Content hashes of every input file, keyed by path as given.
    pub inputs: BTreeMap<String, String>,
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    std::fs::write(path, bytes)?;
    Ok(())
}

fn write_manifest(
    out: &Path,
    command: &str,
    seed: u64,
    config: serde_json::Value,
    inputs: &[(&str, &Path)],
) -> Result<(), CliError> {
    let mut hashed = BTreeMap::new();
    for (label, path) in inputs {
        let bytes = std::fs::read(path)?;
        hashed.insert(label.to_string(), content_hash(&bytes));
    }
    let manifest = ExperimentManifest {
        version: MANIFEST_VERSION.to_string(),
        command: command.to_string(),
        seed,
        config,
        inputs: hashed,
    };
    write_file(&out.join("manifest.json"), serde_json::to_string_pretty(&manifest)?.as_bytes())
}

fn load_world(path: &Path) -> Result<World, CliError> {
    let text = std::fs::read_to_string(path)?;
    Ok(World::from_jsonl(&text)?)
}

fn parse_hop_mix(s: &str) -> Result<[f64; 4], CliError> {
    let parts: Vec<f64> = s
        .split(',')
        .map(|p| p.trim().parse::<f64>())
        .collect::<Result<_, _>>()
        .map_err(|e| CliError::Domain(format!("bad --hop-mix: {e}")))?;
    if parts.len() != 4 {
        return Err(CliError::Domain(format!(
            "--hop-mix needs 4 comma-separated values, got {}",
            parts.len()
        )));
    }
    Ok([parts[0], parts[1], parts[2], parts[3]])
}

/// Output directories default under `out/`; the SEGCREDIT_OUT environment
/// variable overrides that base for paths the user did not set explicitly.
fn resolve_out(given: &std::path::Path, default_leaf: &str) -> PathBuf {
    let default = Path::new("out").join(default_leaf);
    if given == default {
        if let Ok(base) = std::env::var("SEGCREDIT_OUT") {
            return Path::new(&base).join(default_leaf);
        }
    }
    given.to_path_buf()
}

pub fn run() -> i32 {
    let cli = Cli::parse();
    let result = match cli.cmd {
        Cmd::GenWorld(args) => cmd_gen_world(&args),
        Cmd::Warmup(args) => cmd_warmup(&args),
        Cmd::Train(args) => cmd_train(&args),
        Cmd::Eval(args) => cmd_eval(&args),
        Cmd::Audit(args) => cmd_audit(&args),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn cmd_gen_world(args: &GenWorldArgs) -> Result<i32, CliError> {
    let args = &GenWorldArgs { out: resolve_out(&args.out, "world"), ..args.clone() };
    let cfg = WorldConfig {
        seed: args.seed,
        n_entities: args.entities,
        n_questions: args.questions,
        hop_mix: parse_hop_mix(&args.hop_mix)?,
        noise_rate: args.noise_rate,
        arith_frac: args.arith_frac,
        known_frac: args.known_frac,
        recall: args.recall,
        n_relations: args.relations,
        top_k: args.top_k,
        distractor_ratio: WorldConfig::default().distractor_ratio,
    };
    let world = generate_world(&cfg)?;
    write_file(&args.out.join("world.jsonl"), world.to_jsonl().as_bytes())?;
    write_file(
        &args.out.join("world.config.json"),
        serde_json::to_string_pretty(&cfg)?.as_bytes(),
    )?;
    write_manifest(&args.out, "gen-world", args.seed, serde_json::to_value(&cfg)?, &[])?;
    println!(
        "world: {} questions, {} facts -> {}",
        world.questions.len(),
        world.fact_base.len(),
        args.out.display()
    );
    Ok(EXIT_OK)
}

fn warmup_spec(mode: WarmupModeArg, trajectories: usize, allow_cold_start: bool) -> WarmupSpec {
    WarmupSpec {
        mode: mode.into(),
        total_trajectories: trajectories,
        train: crate::critic::TrainMcConfig::default(),
        allow_cold_start,
    }
}

fn cmd_warmup(args: &WarmupArgs) -> Result<i32, CliError> {
    let args = &WarmupArgs { out: resolve_out(&args.out, "warmup"), ..args.clone() };
    let world = load_world(&args.world)?;
    let spec = warmup_spec(args.warmup, args.trajectories, true);
    let cfg = PpoConfig {
        seed: args.seed,
        max_steps: 0,
        critic_hidden: args.hidden,
        ..PpoConfig::default()
    };
    // max_steps = 0: the loop stops after warm-up, gate, and one evaluation.
    let artifacts = ppo::train_loop(&world, &cfg, &spec)?;
    artifacts.critic.save(&ensure_dir(&args.out)?.join("critic.json"))?;
    write_file(
        &args.out.join("gate_report.json"),
        serde_json::to_string_pretty(&artifacts.gate)?.as_bytes(),
    )?;
    let mut dump = String::new();
    for e in &artifacts.warmup_examples {
        let _ = writeln!(dump, "{}", serde_json::to_string(e)?);
    }
    write_file(&args.out.join("warmup_set.jsonl"), dump.as_bytes())?;
    write_file(
        &args.out.join("tiers.json"),
        serde_json::to_string_pretty(&artifacts.tiers)?.as_bytes(),
    )?;
    write_manifest(
        &args.out,
        "warmup",
        args.seed,
        serde_json::json!({
            "warmup": mode_name(args.warmup),
            "trajectories": args.trajectories,
            "hidden": args.hidden,
            "allow_cold_start": args.allow_cold_start,
        }),
        &[("world", &args.world)],
    )?;
    println!(
        "gate: auc {:.3}, sign {:.3}, ev {:.3}, passed {}",
        artifacts.gate.auc,
        artifacts.gate.sign_accuracy,
        artifacts.gate.explained_variance,
        artifacts.gate.passed
    );
    if !artifacts.gate.passed && !args.allow_cold_start {
        eprintln!("error: verification gate failed");
        return Ok(EXIT_GATE);
    }
    Ok(EXIT_OK)
}

fn mode_name(m: WarmupModeArg) -> &'static str {
    match m {
        WarmupModeArg::Curated => "curated",
        WarmupModeArg::Random => "random",
        WarmupModeArg::Cold => "cold",
    }
}

fn ensure_dir(dir: &Path) -> Result<PathBuf, CliError> {
    std::fs::create_dir_all(dir)?;
    Ok(dir.to_path_buf())
}

fn cmd_train(args: &TrainArgs) -> Result<i32, CliError> {
    let args = &TrainArgs { out: resolve_out(&args.out, "train"), ..args.clone() };
    let world = load_world(&args.world)?;
    let spec = warmup_spec(args.warmup, args.trajectories, args.allow_cold_start);
    let cfg = PpoConfig {
        seed: args.seed,
        lambda: args.lambda,
        max_steps: args.steps,
        rollout_batch: args.rollout_batch,
        n_samples_per_prompt: args.n_samples,
        eval_interval: args.eval_interval,
        ..PpoConfig::default()
    };
    write_manifest(
        &args.out,
        "train",
        args.seed,
        serde_json::json!({
            "ppo": &cfg,
            "warmup": mode_name(args.warmup),
            "trajectories": args.trajectories,
            "allow_cold_start": args.allow_cold_start,
        }),
        &[("world", &args.world)],
    )?;
    let artifacts = match ppo::train_loop(&world, &cfg, &spec) {
        Ok(a) => a,
        Err(PpoError::GateFailed { report }) => {
            write_file(
                &args.out.join("gate_report.json"),
                serde_json::to_string_pretty(&report)?.as_bytes(),
            )?;
            eprintln!("error: verification gate failed");
            return Ok(EXIT_GATE);
        }
        Err(e) => return Err(e.into()),
    };
    write_file(
        &args.out.join("gate_report.json"),
        serde_json::to_string_pretty(&artifacts.gate)?.as_bytes(),
    )?;
    write_file(&args.out.join("train_log.csv"), ppo::log_csv(&artifacts.log_rows).as_bytes())?;
    write_file(
        &args.out.join("advantages.csv"),
        ppo::advantages_csv(&artifacts.advantage_rows).as_bytes(),
    )?;
    write_file(&args.out.join("eval.csv"), ppo::evals_csv(&artifacts.eval_rows).as_bytes())?;
    artifacts.policy.save(&args.out.join("policy.json"))?;
    artifacts.critic.save(&args.out.join("critic.json"))?;
    let ckpt_dir = args.out.join("checkpoints");
    std::fs::create_dir_all(&ckpt_dir)?;
    for (step, policy, critic) in &artifacts.checkpoints {
        policy.save(&ckpt_dir.join(format!("policy_step{step:05}.json")))?;
        critic.save(&ckpt_dir.join(format!("critic_step{step:05}.json")))?;
    }
    let last = artifacts.log_rows.last();
    println!(
        "trained {} steps: mean reward {:.3}, tier2 tool rate {:.3}, tier1 tool rate {:.3}",
        artifacts.log_rows.len(),
        last.map(|r| r.mean_reward).unwrap_or(0.0),
        last.map(|r| r.tier2_tool_rate).unwrap_or(0.0),
        last.map(|r| r.tier1_tool_rate).unwrap_or(0.0),
    );
    Ok(EXIT_OK)
}

fn cmd_eval(args: &EvalArgs) -> Result<i32, CliError> {
    let args = &EvalArgs { out: resolve_out(&args.out, "eval"), ..args.clone() };
    let world = load_world(&args.world)?;
    let policy = match &args.policy {
        Some(p) => PolicyParams::load(p)?,
        None => PolicyParams::warm_start(),
    };
    let streams = Substreams::new(args.seed);
    let critic = match &args.critic {
        Some(p) => CriticParams::load(p)?,
        None => CriticParams::new(128, &mut streams.stream("critic-init")),
    };
    let mut tier_rng = streams.stream("tier");
    let tiers = crate::critic::label_all(&world, &PolicyParams::warm_start(), &mut tier_rng);

    let mut rng = streams.stream("eval");
    let mut preds = Vec::new();
    let mut outcomes = Vec::new();
    let mut items = Vec::new();
    for q in world.heldout_questions() {
        for _ in 0..args.rollouts.max(1) {
            let rec = if args.sampled {
                sample_trajectory(&policy, q, &world, RolloutMode::Free, 1.0, &mut rng)
            } else {
                greedy_trajectory(&policy, q, &world, RolloutMode::Free, &mut rng)
            };
            preds.push(critic.value(&featurize(&rec.trajectory.boundaries[0], q)));
            outcomes.push(rec.reward());
            items.push(metrics::EvalTrajectory {
                tier: tiers.get(&q.id).map(|l| l.tier).unwrap_or(Tier::Tier1),
                tool_calls: rec.trajectory.invoke_count(),
                reward: rec.reward(),
            });
        }
    }
    let calibration = metrics::calibration(&preds, &outcomes)
        .map_err(|e| CliError::Domain(format!("calibration: {e}")))?;
    let selectivity = metrics::selectivity(&items);
    write_file(
        &args.out.join("calibration.json"),
        serde_json::to_string_pretty(&calibration)?.as_bytes(),
    )?;
    write_file(
        &args.out.join("selectivity.json"),
        serde_json::to_string_pretty(&selectivity)?.as_bytes(),
    )?;
    // Flat CSV for external plotting.
    let mut csv = String::from("bin_lo,bin_hi,mean_pred,actual_rate,count\n");
    for b in &calibration.bins {
        let _ = writeln!(csv, "{},{},{},{},{}", b.lo, b.hi, b.mean_pred, b.actual_rate, b.count);
    }
    write_file(&args.out.join("calibration.csv"), csv.as_bytes())?;
    let sel_csv = format!(
        "tier1_tool_rate,tier2_tool_rate,tier2_em,mean_tool_calls,n_tier1,n_tier2\n{},{},{},{},{},{}\n",
        selectivity.tier1_tool_rate,
        selectivity.tier2_tool_rate,
        selectivity.tier2_em,
        selectivity.mean_tool_calls,
        selectivity.n_tier1,
        selectivity.n_tier2
    );
    write_file(&args.out.join("selectivity.csv"), sel_csv.as_bytes())?;
    let mut inputs: Vec<(&str, &Path)> = vec![("world", &args.world)];
    if let Some(p) = &args.policy {
        inputs.push(("policy", p));
    }
    if let Some(c) = &args.critic {
        inputs.push(("critic", c));
    }
    write_manifest(
        &args.out,
        "eval",
        args.seed,
        serde_json::json!({
            "sampled": args.sampled,
            "rollouts": args.rollouts,
        }),
        &inputs,
    )?;
    println!(
        "eval: ece {:.3}, auc {:.3}, tier1 tool rate {:.3}, tier2 tool rate {:.3}, tier2 em {:.3}",
        calibration.ece,
        calibration.auc,
        selectivity.tier1_tool_rate,
        selectivity.tier2_tool_rate,
        selectivity.tier2_em
    );
    Ok(EXIT_OK)
}

fn cmd_audit(args: &AuditArgs) -> Result<i32, CliError> {
    let world = load_world(&args.world)?;
    let streams = Substreams::new(0);
    let critic = match &args.critic {
        Some(p) => CriticParams::load(p)?,
        None => CriticParams::new(128, &mut streams.stream("critic-init")),
    };
    let text = std::fs::read_to_string(&args.trajectories)?;
    let mut csv = String::from("trajectory,segment,kind,v_before,v_after,advantage\n");
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let traj = Trajectory::from_jsonl(line)?;
        let q = world
            .question(&traj.question_id)
            .ok_or_else(|| {
                CliError::Domain(format!(
                    "line {}: question {:?} not in world",
                    i + 1,
                    traj.question_id
                ))
            })?
            .clone();
        let values: Vec<f64> = traj
            .segment_start_boundaries()
            .iter()
            .map(|b| critic.value(&featurize(b, &q)))
            .collect();
        let adv = crate::advantage::gae_segment(&values, traj.reward, args.lambda)
            .map_err(|e| CliError::Domain(e.to_string()))?;
        for (k, seg) in traj.segments.iter().enumerate() {
            let kind = match seg.kind {
                crate::trajectory::SegmentKind::Invoke => "invoke",
                crate::trajectory::SegmentKind::Assimilate => "assimilate",
                crate::trajectory::SegmentKind::Commit => "commit",
            };
            let v_after =
                if k + 1 < values.len() { values[k + 1] } else { traj.reward };
            let _ = writeln!(
                csv,
                "{},{},{},{},{},{}",
                traj.question_id, k, kind, values[k], v_after, adv.values[k]
            );
        }
    }
    write_file(&args.out, csv.as_bytes())?;
    let mut inputs: Vec<(&str, &Path)> =
        vec![("world", &args.world), ("trajectories", &args.trajectories)];
    if let Some(c) = &args.critic {
        inputs.push(("critic", c));
    }
    if let Some(parent) = args.out.parent() {
        write_manifest(
            parent,
            "audit",
            0,
            serde_json::json!({ "lambda": args.lambda }),
            &inputs,
        )?;
    }
    println!("audit -> {}", args.out.display());
    Ok(EXIT_OK)
}
