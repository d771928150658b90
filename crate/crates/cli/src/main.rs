//! `actvrnn`: runs the pipeline one stage at a time, or a whole grid.
//!
//! Every stage writes into its `--out` directory: its artifacts, the
//! resolved `config.conf` (with the config hash and seed in its header) and
//! a JSONL log whose first line is a header record. Downstream stages start
//! from the upstream directory's `config.conf` and seed.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use actvrnn::action::{accuracy, examples, EnrichedCorpus};
use actvrnn::checkpoint;
use actvrnn::corpus::{self, SplitSpec, Splits};
use actvrnn::diagnostics::gradcheck_suite;
use actvrnn::eval::config::{parse_document, read_document, Entry};
use actvrnn::eval::grid::{self, GridSpec};
use actvrnn::eval::pipeline;
use actvrnn::eval::{roc_auc, run_grid, RunConfig};
use actvrnn::policy::PolicyNet;
use actvrnn::reward::RewardKind;
use actvrnn::vrnn::Vrnn;
use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use serde_json::json;

/// Overrides the default output root (`runs/`) when `--out` is not given.
const OUT_ENV: &str = "ACTVRNN_OUT";

#[derive(Parser)]
#[command(
    name = "actvrnn",
    version,
    about = "Dialogue reward learning from expert demonstrations"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate expert demonstrations and split them by supervision level.
    GenCorpus(GenCorpus),
    /// Train the action learner on a generated corpus and enrich it.
    TrainActions(TrainActions),
    /// Train the reward model selected by `reward`.
    TrainReward(TrainReward),
    /// Train a dialogue policy against a trained reward.
    TrainPolicy(TrainPolicy),
    /// Greedy evaluation of a trained policy.
    Evaluate(Evaluate),
    /// Finite-difference checks of every trained objective.
    Gradcheck(Gradcheck),
    /// Run a grid of full pipelines and write summary CSVs.
    Reproduce(Reproduce),
}

#[derive(Args)]
struct Common {
    /// Config file of `key = value` lines (supports `include <path>`).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one config key; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct GenCorpus {
    #[command(flatten)]
    common: Common,
    /// Number of dialogues.
    #[arg(long)]
    n: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Supervision fractions `fully,partial,unlabeled`.
    #[arg(long)]
    split: Option<String>,
}

#[derive(Args)]
struct TrainActions {
    #[command(flatten)]
    common: Common,
    /// Output directory of `gen-corpus`.
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct TrainReward {
    #[command(flatten)]
    common: Common,
    /// Output directory of `train-actions`.
    #[arg(long)]
    enriched: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct TrainPolicy {
    #[command(flatten)]
    common: Common,
    /// Output directory of `train-reward`.
    #[arg(long)]
    reward: PathBuf,
    #[arg(long)]
    episodes: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct Evaluate {
    #[command(flatten)]
    common: Common,
    /// Output directory of `train-policy`.
    #[arg(long)]
    policy: PathBuf,
    #[arg(long)]
    dialogues: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct Gradcheck {
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct Reproduce {
    #[command(flatten)]
    common: Common,
    /// Built-in grid: table2-small, table3-small or fig4-small.
    #[arg(long, conflicts_with = "grid")]
    preset: Option<String>,
    /// Grid file; `grid.*` keys select the axes.
    #[arg(long)]
    grid: Option<PathBuf>,
    /// Run this seed only.
    #[arg(long, conflicts_with = "seeds")]
    seed: Option<u64>,
    /// Seeds as `0,1,2` or `0..5`.
    #[arg(long)]
    seeds: Option<String>,
    #[arg(long)]
    workers: Option<usize>,
}

/// What train-reward hands to train-policy.
#[derive(Serialize, Deserialize)]
struct RewardArtifact {
    kind: RewardKind,
    vrnn: Option<Vrnn>,
    enriched: Option<EnrichedCorpus>,
}

fn out_dir(common_out: &Option<PathBuf>, stage: &str) -> Result<PathBuf> {
    let dir = match common_out {
        Some(p) => p.clone(),
        None => std::env::var_os(OUT_ENV)
            .map(PathBuf::from)
            .unwrap_or_else(|| PathBuf::from("runs"))
            .join(stage),
    };
    fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    Ok(dir)
}

fn set_entries(sets: &[String]) -> Result<Vec<Entry>> {
    sets.iter()
        .map(|s| {
            let (k, v) = s
                .split_once('=')
                .with_context(|| format!("--set {s:?} is not KEY=VALUE"))?;
            Ok(Entry {
                key: k.trim().to_string(),
                value: v.trim().to_string(),
                line: 0,
            })
        })
        .collect()
}

/// Upstream config (if any), then `--config`, then `--set`.
fn resolve(base: RunConfig, common: &Common) -> Result<RunConfig> {
    let mut cfg = base;
    let mut entries = match &common.config {
        Some(p) => read_document(p)?,
        None => Vec::new(),
    };
    entries.extend(set_entries(&common.sets)?);
    for e in &entries {
        cfg.set(&e.key, &e.value)
            .with_context(|| format!("config key {:?}", e.key))?;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn header_line(cfg: &RunConfig, seed: u64, stage: &str) -> String {
    format!("# config_hash={} seed={seed} stage={stage}\n", cfg.hash())
}

fn write_config(dir: &Path, cfg: &RunConfig, seed: u64, stage: &str) -> Result<()> {
    fs::write(dir.join("config.conf"), header_line(cfg, seed, stage) + &cfg.to_text())?;
    Ok(())
}

/// Reads an upstream `config.conf` and the seed in its header.
fn read_upstream(dir: &Path, stage: &str) -> Result<(RunConfig, u64)> {
    let path = dir.join("config.conf");
    let text = fs::read_to_string(&path).map_err(|_| actvrnn::Error::MissingArtifact {
        path: path.clone(),
        stage: stage.to_string(),
    })?;
    let seed = text
        .lines()
        .next()
        .and_then(|l| l.split_whitespace().find_map(|w| w.strip_prefix("seed=")))
        .and_then(|s| s.parse().ok())
        .with_context(|| format!("{} lacks a seed header", path.display()))?;
    let cfg = RunConfig::from_text(&text).with_context(|| format!("reading {}", path.display()))?;
    Ok((cfg, seed))
}

struct Log {
    file: fs::File,
}

impl Log {
    fn create(dir: &Path, name: &str, cfg: &RunConfig, seed: u64, stage: &str) -> Result<Self> {
        let mut file = fs::File::create(dir.join(name))?;
        writeln!(
            file,
            "{}",
            json!({"stage": stage, "config_hash": cfg.hash(), "seed": seed, "version": env!("CARGO_PKG_VERSION")})
        )?;
        Ok(Log { file })
    }

    fn record<T: Serialize>(&mut self, value: &T) -> Result<()> {
        writeln!(self.file, "{}", serde_json::to_string(value)?)?;
        Ok(())
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(value)? + "\n")?;
    Ok(())
}

fn gen_corpus(a: &GenCorpus) -> Result<()> {
    let mut cfg = resolve(RunConfig::default(), &a.common)?;
    if let Some(n) = a.n {
        cfg.corpus.size = n;
    }
    if let Some(s) = &a.split {
        let p = SplitSpec::parse(s, 0)?;
        cfg.split.fully = p.fully;
        cfg.split.partial = p.partial;
        cfg.split.unlabeled = p.unlabeled;
    }
    cfg.validate()?;
    let dir = out_dir(&a.common.out, "gen-corpus")?;
    let full = pipeline::corpus_stage(&cfg, a.seed)?;
    let (splits, ledger) = pipeline::split_stage(&cfg, &full, a.seed)?;
    corpus::save(&full, &dir.join("corpus.jsonl"))?;
    for (name, part) in [
        ("fully", &splits.fully),
        ("partial", &splits.partial),
        ("unlabeled", &splits.unlabeled),
    ] {
        corpus::save(part, &dir.join(format!("{name}.jsonl")))?;
    }
    checkpoint::save(&dir.join("ledger.json"), "ledger", &cfg.hash(), &ledger)?;
    write_config(&dir, &cfg, a.seed, "gen-corpus")?;
    let mut log = Log::create(&dir, "log.jsonl", &cfg, a.seed, "gen-corpus")?;
    let counts = json!({
        "dialogues": full.dialogues.len(),
        "fully": splits.fully.dialogues.len(),
        "partial": splits.partial.dialogues.len(),
        "unlabeled": splits.unlabeled.dialogues.len(),
    });
    log.record(&counts)?;
    println!("{counts}");
    Ok(())
}

fn train_actions(a: &TrainActions) -> Result<()> {
    let (base, upstream_seed) = read_upstream(&a.corpus, "gen-corpus")?;
    let cfg = resolve(base, &a.common)?;
    let seed = a.seed.unwrap_or(upstream_seed);
    let part = |name: &str| corpus::load(&a.corpus.join(format!("{name}.jsonl")));
    let splits = Splits {
        fully: part("fully")?,
        partial: part("partial")?,
        unlabeled: part("unlabeled")?,
    };
    let dir = out_dir(&a.common.out, "train-actions")?;
    let artifact = pipeline::action_stage(&cfg, &splits, seed)?;
    let enriched = pipeline::enrich_stage(&artifact, &splits)?;
    let heldout = pipeline::heldout_corpus(&cfg, seed)?;
    let heldout_accuracy = accuracy(&artifact.model, &examples(&heldout))?;
    checkpoint::save(&dir.join("actions.json"), "action-artifact", &cfg.hash(), &artifact)?;
    checkpoint::save(&dir.join("enriched.json"), "enriched-corpus", &cfg.hash(), &enriched)?;
    write_config(&dir, &cfg, seed, "train-actions")?;
    let mut log = Log::create(&dir, "log.jsonl", &cfg, seed, "train-actions")?;
    for (epoch, terms) in artifact.log.epochs.iter().enumerate() {
        log.record(&json!({"epoch": epoch, "terms": terms}))?;
    }
    let metrics = json!({"heldout_accuracy": heldout_accuracy, "enriched_turns": enriched.num_turns()});
    write_json(&dir.join("metrics.json"), &metrics)?;
    println!("{metrics}");
    Ok(())
}

fn train_reward(a: &TrainReward) -> Result<()> {
    let (base, upstream_seed) = read_upstream(&a.enriched, "train-actions")?;
    let cfg = resolve(base, &a.common)?;
    let seed = a.seed.unwrap_or(upstream_seed);
    let dir = out_dir(&a.common.out, "train-reward")?;
    let enriched = if cfg.reward.uses_demonstrations() {
        let (_, e): (String, EnrichedCorpus) =
            checkpoint::load(&a.enriched.join("enriched.json"), "enriched-corpus", "train-actions")?;
        Some(e)
    } else {
        None
    };
    let mut log = Log::create(&dir, "log.jsonl", &cfg, seed, "train-reward")?;
    let mut metrics = json!({"reward": cfg.reward});
    let mut vrnn = None;
    if let Some(e) = &enriched {
        if let Some((model, train_log)) = pipeline::reward_stage(&cfg, e, seed)? {
            log.record(&json!({"epoch": "initial", "stats": train_log.initial}))?;
            for (epoch, stats) in train_log.epochs.iter().enumerate() {
                log.record(&json!({"epoch": epoch, "stats": stats}))?;
            }
            let handle = pipeline::reward_handle(&cfg, Some(e), Some(&model), seed)?;
            let heldout = pipeline::heldout_corpus(&cfg, seed)?;
            let (expert, random) = pipeline::paired_scores(&cfg, &handle, &heldout, seed)?;
            metrics["elbo_initial"] = json!(train_log.initial.elbo);
            metrics["elbo_final"] = json!(train_log.epochs.last().map(|x| x.elbo));
            metrics["reward_auc"] = json!(roc_auc(&expert, &random)?);
            vrnn = Some(model);
        }
    }
    let artifact = RewardArtifact {
        kind: cfg.reward,
        vrnn,
        enriched,
    };
    checkpoint::save(&dir.join("reward.json"), "reward", &cfg.hash(), &artifact)?;
    write_config(&dir, &cfg, seed, "train-reward")?;
    write_json(&dir.join("metrics.json"), &metrics)?;
    println!("{metrics}");
    Ok(())
}

fn train_policy(a: &TrainPolicy) -> Result<()> {
    let (base, upstream_seed) = read_upstream(&a.reward, "train-reward")?;
    let mut cfg = resolve(base, &a.common)?;
    if let Some(n) = a.episodes {
        cfg.policy.episodes = n;
    }
    cfg.validate()?;
    let seed = a.seed.unwrap_or(upstream_seed);
    let (_, artifact): (String, RewardArtifact) =
        checkpoint::load(&a.reward.join("reward.json"), "reward", "train-reward")?;
    if artifact.kind != cfg.reward {
        bail!(
            "reward artifact holds {} but the config selects {}; rerun train-reward",
            artifact.kind,
            cfg.reward
        );
    }
    let dir = out_dir(&a.common.out, "train-policy")?;
    let mut handle = pipeline::reward_handle(&cfg, artifact.enriched.as_ref(), artifact.vrnn.as_ref(), seed)?;
    let (policy, episodes) = pipeline::policy_stage(&cfg, &mut handle, seed)?;
    checkpoint::save(&dir.join("policy.json"), "policy", &cfg.hash(), &policy)?;
    write_config(&dir, &cfg, seed, "train-policy")?;
    let mut log = Log::create(&dir, "episodes.jsonl", &cfg, seed, "train-policy")?;
    for e in &episodes {
        log.record(e)?;
    }
    let tail = &episodes[episodes.len() - episodes.len().div_ceil(10)..];
    let rate = tail.iter().filter(|e| e.success).count() as f64 / tail.len().max(1) as f64;
    println!("{}", json!({"episodes": episodes.len(), "final_tenth_success": rate}));
    Ok(())
}

fn evaluate(a: &Evaluate) -> Result<()> {
    let (base, upstream_seed) = read_upstream(&a.policy, "train-policy")?;
    let mut cfg = resolve(base, &a.common)?;
    if let Some(n) = a.dialogues {
        cfg.eval.dialogues = n;
    }
    cfg.validate()?;
    let seed = a.seed.unwrap_or(upstream_seed);
    let (_, policy): (String, PolicyNet) = checkpoint::load(&a.policy.join("policy.json"), "policy", "train-policy")?;
    let dir = out_dir(&a.common.out, "evaluate")?;
    let report = pipeline::evaluate_stage(&cfg, &policy, seed)?;
    write_config(&dir, &cfg, seed, "evaluate")?;
    write_json(&dir.join("metrics.json"), &report)?;
    let mut log = Log::create(&dir, "log.jsonl", &cfg, seed, "evaluate")?;
    log.record(&report)?;
    println!(
        "{}",
        json!({"entity_f1": report.entity_f1, "success_rate": report.success_rate, "avg_turns": report.avg_turns})
    );
    Ok(())
}

fn gradcheck(a: &Gradcheck) -> Result<bool> {
    let reports = gradcheck_suite(a.seed)?;
    let text = serde_json::to_string_pretty(&reports)?;
    if let Some(dir) = &a.out {
        fs::create_dir_all(dir)?;
        fs::write(dir.join("gradcheck.json"), text.clone() + "\n")?;
    }
    println!("{text}");
    Ok(reports.iter().all(|r| r.pass))
}

fn reproduce(a: &Reproduce) -> Result<()> {
    let mut entries = match (&a.preset, &a.grid) {
        (Some(name), None) => parse_document(grid::preset(name)?, None)?,
        (None, Some(path)) => read_document(path)?,
        (None, None) => bail!("reproduce needs --preset or --grid"),
        (Some(_), Some(_)) => unreachable!("clap rejects both"),
    };
    if let Some(p) = &a.common.config {
        entries.extend(read_document(p)?);
    }
    entries.extend(set_entries(&a.common.sets)?);
    let mut spec = GridSpec::from_entries(&entries)?;
    if let Some(s) = a.seed {
        spec.seeds = vec![s];
    }
    if let Some(s) = &a.seeds {
        spec.seeds = GridSpec::from_text(&format!("grid.seeds = {s}\n"))?.seeds;
    }
    if let Some(w) = a.workers {
        spec.workers = w.max(1);
    }
    let stage = a.preset.as_deref().unwrap_or("reproduce");
    let dir = out_dir(&a.common.out, stage)?;
    fs::write(
        dir.join("config.conf"),
        format!("# config_hash={} seeds={:?}\n", spec.hash(), spec.seeds) + &spec.base.to_text(),
    )?;
    let result = run_grid(&spec, &dir)?;
    let failed = result.rows.iter().filter(|r| !r.ok()).count();
    for s in &result.summary {
        println!("{}", serde_json::to_string(s)?);
    }
    println!(
        "wrote {} ({} runs, {failed} failed)",
        dir.join("summary.csv").display(),
        result.rows.len()
    );
    Ok(())
}

fn run(cli: Cli) -> Result<bool> {
    match &cli.command {
        Command::GenCorpus(a) => gen_corpus(a)?,
        Command::TrainActions(a) => train_actions(a)?,
        Command::TrainReward(a) => train_reward(a)?,
        Command::TrainPolicy(a) => train_policy(a)?,
        Command::Evaluate(a) => evaluate(a)?,
        Command::Gradcheck(a) => return gradcheck(a),
        Command::Reproduce(a) => reproduce(a)?,
    }
    Ok(true)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
