//! Experiment grids: supervision splits × reward handles × VRNN modes × seeds.
//!
//! A grid document is a run configuration plus `grid.*` keys:
//!
//! ```text
//! include base.conf
//! grid.splits = 0.1,0.9,0 ; 0.1,0,0.9
//! grid.rewards = act-vrnn, ss-vrnn, handcrafted
//! grid.modes = full
//! grid.seeds = 0,1,2,3,4
//! grid.workers = 1
//! ```
//!
//! Output layout under the grid directory:
//!
//! * `grid.csv`: one row per `(cell, seed)`; failed runs carry `status = failed`
//!   and the error text.
//! * `summary.csv`: one row per cell with medians over the successful seeds.
//! * `cells/<cell>/seed-<s>/`: resolved config, metrics, per-episode JSONL log
//!   and the `done.json` completion marker that makes reruns resume.
//!
//! Both CSV files start with a `# config_hash=<hex>` line.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::config::{parse_document, read_document, Entry, RunConfig, SplitSettings};
use super::pipeline::{run_cell, CellOutcome, StageCache};
use crate::error::{Error, Result};
use crate::reward::RewardKind;
use crate::vrnn::VrnnMode;

/// Built-in grids at desk scale: `(name, document)`.
pub const PRESETS: &[(&str, &str)] = &[
    (
        "table2-small",
        "corpus.preset = two-domain\n\
         grid.splits = 0.1,0.9,0\n\
         grid.rewards = handcrafted, adversarial, ss-gdpl, act-gdpl, ss-vrnn, act-vrnn\n\
         grid.seeds = 0..5\n",
    ),
    (
        "table3-small",
        "corpus.preset = two-domain\n\
         grid.splits = 0.1,0,0.9; 0.1,0.45,0.45\n\
         grid.rewards = handcrafted, act-gdpl, act-vrnn\n\
         grid.seeds = 0..5\n",
    ),
    (
        "fig4-small",
        "corpus.preset = two-domain\n\
         grid.splits = 0.1,0.9,0\n\
         grid.rewards = act-vrnn\n\
         grid.modes = full, stochastic, deterministic\n\
         grid.seeds = 0..5\n",
    ),
];

pub fn preset(name: &str) -> Result<&'static str> {
    PRESETS
        .iter()
        .find(|(n, _)| *n == name)
        .map(|(_, doc)| *doc)
        .ok_or_else(|| {
            let names: Vec<&str> = PRESETS.iter().map(|(n, _)| *n).collect();
            Error::Config(format!(
                "unknown preset {name:?} (expected one of {})",
                names.join(", ")
            ))
        })
}

#[derive(Clone, Debug, PartialEq)]
pub struct GridSpec {
    pub base: RunConfig,
    pub splits: Vec<SplitSettings>,
    pub rewards: Vec<RewardKind>,
    pub modes: Vec<VrnnMode>,
    pub seeds: Vec<u64>,
    pub workers: usize,
}

/// One grid cell: a fully resolved configuration and its name.
#[derive(Clone, Debug, PartialEq)]
pub struct Cell {
    pub name: String,
    pub config: RunConfig,
}

fn list(value: &str, sep: char) -> Vec<&str> {
    value.split(sep).map(str::trim).filter(|s| !s.is_empty()).collect()
}

fn parse_list<T>(key: &str, value: &str, sep: char, parse: impl Fn(&str) -> Result<T>) -> Result<Vec<T>> {
    let items = list(value, sep).into_iter().map(parse).collect::<Result<Vec<T>>>()?;
    if items.is_empty() {
        return Err(Error::Config(format!("{key} lists nothing")));
    }
    Ok(items)
}

/// Seeds as `0,1,2` or a half-open range `0..5`.
fn parse_seeds(value: &str) -> Result<Vec<u64>> {
    let bad = |e: std::num::ParseIntError| Error::Config(format!("grid.seeds = {value:?}: {e}"));
    if let Some((a, b)) = value.split_once("..") {
        let (a, b) = (
            a.trim().parse::<u64>().map_err(bad)?,
            b.trim().parse::<u64>().map_err(bad)?,
        );
        if a >= b {
            return Err(Error::Config(format!("grid.seeds range {value:?} is empty")));
        }
        return Ok((a..b).collect());
    }
    parse_list("grid.seeds", value, ',', |s| s.parse::<u64>().map_err(bad))
}

fn fmt_frac(x: f64) -> String {
    format!("{x}")
}

fn split_name(s: &SplitSettings) -> String {
    format!(
        "f{}-p{}-u{}",
        fmt_frac(s.fully),
        fmt_frac(s.partial),
        fmt_frac(s.unlabeled)
    )
}

fn mode_name(m: VrnnMode) -> &'static str {
    match m {
        VrnnMode::Full => "full",
        VrnnMode::DeterministicOnly => "deterministic",
        VrnnMode::StochasticOnly => "stochastic",
    }
}

impl GridSpec {
    /// A grid of just the base configuration and the given seeds.
    pub fn single(base: RunConfig, seeds: Vec<u64>) -> Self {
        GridSpec {
            splits: vec![base.split],
            rewards: vec![base.reward],
            modes: vec![base.vrnn.mode],
            base,
            seeds,
            workers: 1,
        }
    }

    pub fn from_entries(entries: &[Entry]) -> Result<Self> {
        let mut base = RunConfig::default();
        let mut grid = Vec::new();
        for e in entries {
            if e.key.starts_with("grid.") {
                grid.push(e);
            } else {
                base.set(&e.key, &e.value).map_err(|err| match err {
                    Error::Config(message) => Error::Parse { line: e.line, message },
                    other => other,
                })?;
            }
        }
        base.validate()?;
        let mut spec = GridSpec::single(base, vec![0]);
        for e in grid {
            let v = e.value.as_str();
            match e.key.as_str() {
                "grid.splits" => {
                    spec.splits = parse_list(&e.key, v, ';', |s| {
                        let p = crate::corpus::SplitSpec::parse(s, 0)?;
                        Ok(SplitSettings {
                            fully: p.fully,
                            partial: p.partial,
                            unlabeled: p.unlabeled,
                        })
                    })?
                }
                "grid.rewards" => spec.rewards = parse_list(&e.key, v, ',', |s| s.parse())?,
                "grid.modes" => spec.modes = parse_list(&e.key, v, ',', |s| s.parse())?,
                "grid.seeds" => spec.seeds = parse_seeds(v)?,
                "grid.workers" => {
                    spec.workers = v
                        .parse::<usize>()
                        .ok()
                        .filter(|&w| w > 0)
                        .ok_or_else(|| Error::Config(format!("grid.workers = {v:?} must be a positive integer")))?
                }
                other => {
                    return Err(Error::Parse {
                        line: e.line,
                        message: format!("unknown grid key {other:?}"),
                    })
                }
            }
        }
        Ok(spec)
    }

    pub fn from_text(text: &str) -> Result<Self> {
        Self::from_entries(&parse_document(text, None)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_entries(&read_document(path)?)
    }

    /// Cells in a fixed order. The VRNN mode only varies for VRNN handles.
    pub fn cells(&self) -> Vec<Cell> {
        let mut out = Vec::new();
        for split in &self.splits {
            for &reward in &self.rewards {
                let modes: &[VrnnMode] = if reward.vrnn_input().is_some() {
                    &self.modes
                } else {
                    &self.modes[..1]
                };
                for &mode in modes {
                    let mut config = self.base.clone();
                    config.split = *split;
                    config.reward = reward;
                    config.vrnn.mode = mode;
                    let mut name = format!("{}_{}", split_name(split), reward.name());
                    if reward.vrnn_input().is_some() {
                        name = format!("{name}_{}", mode_name(mode));
                    }
                    out.push(Cell { name, config });
                }
            }
        }
        out
    }

    /// Hash of the base configuration together with the grid axes.
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        for c in self.cells() {
            h.update(c.name.as_bytes());
            h.update(b":");
            h.update(c.config.hash().as_bytes());
            h.update(b"\n");
        }
        for s in &self.seeds {
            h.update(format!("seed={s}\n").as_bytes());
        }
        hex::encode(h.finalize())
    }
}

/// One `(cell, seed)` row of `grid.csv`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridRow {
    pub cell: String,
    pub seed: u64,
    pub preset: String,
    pub split: String,
    pub reward: String,
    pub vrnn_mode: String,
    /// `ok` or `failed`.
    pub status: String,
    pub entity_f1: Option<f64>,
    pub success_rate: Option<f64>,
    pub avg_turns: Option<f64>,
    pub action_accuracy: Option<f64>,
    pub elbo_initial: Option<f64>,
    pub elbo_final: Option<f64>,
    pub reward_auc: Option<f64>,
    /// Success rate per goal domain count, as `domains:rate` pairs.
    pub success_by_domains: String,
    pub config_hash: String,
    pub error: String,
}

impl GridRow {
    fn new(cell: &Cell, seed: u64) -> Self {
        let c = &cell.config;
        GridRow {
            cell: cell.name.clone(),
            seed,
            preset: c.corpus.preset.name().to_string(),
            split: split_name(&c.split),
            reward: c.reward.name().to_string(),
            vrnn_mode: if c.reward.vrnn_input().is_some() {
                mode_name(c.vrnn.mode).to_string()
            } else {
                String::new()
            },
            status: String::new(),
            entity_f1: None,
            success_rate: None,
            avg_turns: None,
            action_accuracy: None,
            elbo_initial: None,
            elbo_final: None,
            reward_auc: None,
            success_by_domains: String::new(),
            config_hash: c.hash(),
            error: String::new(),
        }
    }

    fn fill(&mut self, o: &CellOutcome) {
        self.status = "ok".into();
        self.entity_f1 = Some(o.report.entity_f1);
        self.success_rate = Some(o.report.success_rate);
        self.avg_turns = Some(o.report.avg_turns);
        self.action_accuracy = o.action_accuracy;
        self.elbo_initial = o.elbo_initial;
        self.elbo_final = o.elbo_final;
        self.reward_auc = o.reward_auc;
        self.success_by_domains = o
            .report
            .by_domains
            .iter()
            .map(|(k, b)| format!("{k}:{}", b.success_rate))
            .collect::<Vec<_>>()
            .join(" ");
    }

    pub fn ok(&self) -> bool {
        self.status == "ok"
    }
}

/// Per-cell medians over the successful seeds of `grid.csv`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub cell: String,
    pub split: String,
    pub reward: String,
    pub vrnn_mode: String,
    pub seeds_ok: usize,
    pub seeds_failed: usize,
    pub success_median: Option<f64>,
    pub success_q1: Option<f64>,
    pub success_q3: Option<f64>,
    pub entity_f1_median: Option<f64>,
    pub avg_turns_median: Option<f64>,
    pub action_accuracy_median: Option<f64>,
    pub reward_auc_median: Option<f64>,
}

/// Linear-interpolated quantile of `xs` (`q` in `[0, 1]`); `None` when empty.
pub fn quantile(xs: &[f64], q: f64) -> Option<f64> {
    if xs.is_empty() {
        return None;
    }
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    let pos = q * (v.len() - 1) as f64;
    let (lo, hi) = (pos.floor() as usize, pos.ceil() as usize);
    Some(v[lo] + (v[hi] - v[lo]) * (pos - lo as f64))
}

pub fn median(xs: &[f64]) -> Option<f64> {
    quantile(xs, 0.5)
}

pub fn summarize(rows: &[GridRow]) -> Vec<SummaryRow> {
    let mut names: Vec<&str> = Vec::new();
    for r in rows {
        if !names.contains(&r.cell.as_str()) {
            names.push(&r.cell);
        }
    }
    names
        .into_iter()
        .map(|name| {
            let cell: Vec<&GridRow> = rows.iter().filter(|r| r.cell == name).collect();
            let ok: Vec<&&GridRow> = cell.iter().filter(|r| r.ok()).collect();
            let col = |f: fn(&GridRow) -> Option<f64>| -> Vec<f64> { ok.iter().filter_map(|r| f(r)).collect() };
            let success = col(|r| r.success_rate);
            SummaryRow {
                cell: name.to_string(),
                split: cell[0].split.clone(),
                reward: cell[0].reward.clone(),
                vrnn_mode: cell[0].vrnn_mode.clone(),
                seeds_ok: ok.len(),
                seeds_failed: cell.len() - ok.len(),
                success_median: median(&success),
                success_q1: quantile(&success, 0.25),
                success_q3: quantile(&success, 0.75),
                entity_f1_median: median(&col(|r| r.entity_f1)),
                avg_turns_median: median(&col(|r| r.avg_turns)),
                action_accuracy_median: median(&col(|r| r.action_accuracy)),
                reward_auc_median: median(&col(|r| r.reward_auc)),
            }
        })
        .collect()
}

/// Writes `rows` as CSV preceded by the config-hash comment line.
pub fn write_csv<T: Serialize>(path: &Path, config_hash: &str, rows: &[T]) -> Result<()> {
    let mut buf = format!("# config_hash={config_hash}\n").into_bytes();
    {
        let mut w = csv::Writer::from_writer(&mut buf);
        for r in rows {
            w.serialize(r)?;
        }
        w.flush()?;
    }
    fs::write(path, buf)?;
    Ok(())
}

/// Reads a CSV written by `write_csv`; returns the embedded hash and rows.
pub fn read_csv<T: serde::de::DeserializeOwned>(path: &Path) -> Result<(String, Vec<T>)> {
    let text = fs::read_to_string(path)?;
    let (first, rest) = text.split_once('\n').unwrap_or((&text, ""));
    let hash = first
        .strip_prefix("# config_hash=")
        .ok_or_else(|| Error::Parse {
            line: 1,
            message: "missing `# config_hash=` header".into(),
        })?
        .to_string();
    let mut r = csv::Reader::from_reader(rest.as_bytes());
    let rows = r.deserialize().collect::<std::result::Result<Vec<T>, _>>()?;
    Ok((hash, rows))
}

#[derive(Serialize, Deserialize)]
struct DoneMarker {
    config_hash: String,
    row: GridRow,
}

pub fn cell_dir(out: &Path, cell: &str, seed: u64) -> PathBuf {
    out.join("cells").join(cell).join(format!("seed-{seed}"))
}

fn run_one(cell: &Cell, seed: u64, out: &Path, cache: &StageCache) -> Result<GridRow> {
    let dir = cell_dir(out, &cell.name, seed);
    let marker = dir.join("done.json");
    let hash = cell.config.hash();
    if let Ok(text) = fs::read_to_string(&marker) {
        if let Ok(done) = serde_json::from_str::<DoneMarker>(&text) {
            if done.config_hash == hash {
                return Ok(done.row);
            }
        }
    }
    fs::create_dir_all(&dir)?;
    fs::write(dir.join("config.conf"), cell.config.to_text())?;
    let mut row = GridRow::new(cell, seed);
    match run_cell(&cell.config, seed, cache) {
        Ok(outcome) => {
            row.fill(&outcome);
            fs::write(dir.join("metrics.json"), serde_json::to_string_pretty(&outcome.report)?)?;
            let mut log = fs::File::create(dir.join("episodes.jsonl"))?;
            for e in &outcome.episodes {
                writeln!(log, "{}", serde_json::to_string(e)?)?;
            }
            let done = DoneMarker {
                config_hash: hash,
                row: row.clone(),
            };
            fs::write(&marker, serde_json::to_string(&done)?)?;
        }
        Err(e) => {
            row.status = "failed".into();
            row.error = e.to_string();
            // no marker: a rerun retries the cell
            let _ = fs::remove_file(&marker);
        }
    }
    Ok(row)
}

/// Result of a grid run, as written to disk.
#[derive(Clone, Debug, PartialEq)]
pub struct GridResult {
    pub config_hash: String,
    pub rows: Vec<GridRow>,
    pub summary: Vec<SummaryRow>,
}

/// Runs every `(cell, seed)` not already marked done, with up to
/// `spec.workers` threads, and writes `grid.csv` and `summary.csv`.
pub fn run_grid(spec: &GridSpec, out: &Path) -> Result<GridResult> {
    run_grid_with(spec, out, &StageCache::default())
}

/// As `run_grid`, sharing `cache` with the caller.
pub fn run_grid_with(spec: &GridSpec, out: &Path, cache: &StageCache) -> Result<GridResult> {
    if spec.seeds.is_empty() {
        return Err(Error::Config("grid needs at least one seed".into()));
    }
    fs::create_dir_all(out)?;
    let cells = spec.cells();
    let jobs: Vec<(&Cell, u64)> = cells
        .iter()
        .flat_map(|c| spec.seeds.iter().map(move |&s| (c, s)))
        .collect();
    let results: Mutex<Vec<Option<Result<GridRow>>>> = Mutex::new((0..jobs.len()).map(|_| None).collect());
    let next = AtomicUsize::new(0);
    std::thread::scope(|scope| {
        for _ in 0..spec.workers.min(jobs.len()) {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                let Some(&(cell, seed)) = jobs.get(i) else {
                    break;
                };
                let r = run_one(cell, seed, out, cache);
                results.lock().unwrap_or_else(|e| e.into_inner())[i] = Some(r);
            });
        }
    });
    let rows = results
        .into_inner()
        .unwrap_or_else(|e| e.into_inner())
        .into_iter()
        .map(|r| r.expect("every job ran"))
        .collect::<Result<Vec<_>>>()?;
    let summary = summarize(&rows);
    let config_hash = spec.hash();
    write_csv(&out.join("grid.csv"), &config_hash, &rows)?;
    write_csv(&out.join("summary.csv"), &config_hash, &summary)?;
    Ok(GridResult {
        config_hash,
        rows,
        summary,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quantiles() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), Some(2.0));
        assert_eq!(median(&[1.0, 2.0, 3.0, 4.0]), Some(2.5));
        assert_eq!(quantile(&[0.0, 1.0, 2.0, 3.0, 4.0], 0.25), Some(1.0));
        assert_eq!(median(&[]), None);
    }

    #[test]
    fn cells_skip_modes_for_non_vrnn_rewards() {
        let spec = GridSpec::from_text(
            "grid.rewards = act-vrnn, handcrafted\ngrid.modes = full, stochastic\ngrid.splits = 0.1,0.9,0; 0.1,0,0.9\n",
        )
        .unwrap();
        let names: Vec<String> = spec.cells().into_iter().map(|c| c.name).collect();
        assert_eq!(
            names,
            [
                "f0.1-p0.9-u0_act-vrnn_full",
                "f0.1-p0.9-u0_act-vrnn_stochastic",
                "f0.1-p0.9-u0_handcrafted",
                "f0.1-p0-u0.9_act-vrnn_full",
                "f0.1-p0-u0.9_act-vrnn_stochastic",
                "f0.1-p0-u0.9_handcrafted",
            ]
        );
    }

    #[test]
    fn presets_parse() {
        for (name, doc) in PRESETS {
            let spec = GridSpec::from_text(doc).unwrap();
            assert_eq!(spec.seeds.len(), 5, "{name}");
        }
        assert!(preset("table9").is_err());
    }

    #[test]
    fn seeds_forms() {
        assert_eq!(parse_seeds("0..3").unwrap(), vec![0, 1, 2]);
        assert_eq!(parse_seeds("7, 9").unwrap(), vec![7, 9]);
        assert!(parse_seeds("3..3").is_err());
        assert!(GridSpec::from_text("grid.colour = red\n").is_err());
    }
}
