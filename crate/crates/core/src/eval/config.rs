//! Flat `key = value` run configuration with includes and a content hash.
//!
//! Every hyperparameter of every stage is addressable by a dotted key
//! (`action.lr`, `vrnn.mode`, `split.partial`, ...). Unknown keys are
//! rejected. The run seed is not part of the configuration: it drives every
//! stage seed, so an artifact is identified by `(config hash, seed)`.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::action::ActionConfig;
use crate::corpus::SplitSpec;
use crate::env::Preset;
use crate::error::{Error, Result};
use crate::policy::PolicyConfig;
use crate::reward::{DiscConfig, HandcraftedRewardConfig, RewardKind};
use crate::vrnn::VrnnConfig;

const MAX_INCLUDE_DEPTH: usize = 16;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorpusSettings {
    pub preset: Preset,
    /// Demonstration dialogues to generate.
    pub size: usize,
    pub max_turns: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitSettings {
    pub fully: f64,
    pub partial: f64,
    pub unlabeled: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalSettings {
    /// Greedy evaluation dialogues per trained policy.
    pub dialogues: usize,
    /// Fresh expert dialogues for held-out action accuracy and reward scoring.
    pub heldout: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub corpus: CorpusSettings,
    pub split: SplitSettings,
    pub reward: RewardKind,
    pub action: ActionConfig,
    pub vrnn: VrnnConfig,
    pub disc: DiscConfig,
    pub handcrafted: HandcraftedRewardConfig,
    pub policy: PolicyConfig,
    pub eval: EvalSettings,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            corpus: CorpusSettings {
                preset: Preset::TwoDomain,
                size: 1000,
                max_turns: 20,
            },
            split: SplitSettings {
                fully: 0.1,
                partial: 0.9,
                unlabeled: 0.0,
            },
            reward: RewardKind::ActVrnn,
            action: ActionConfig::default(),
            vrnn: VrnnConfig::default(),
            disc: DiscConfig::default(),
            handcrafted: HandcraftedRewardConfig::default(),
            policy: PolicyConfig::default(),
            eval: EvalSettings {
                dialogues: 500,
                heldout: 200,
            },
        }
    }
}

/// Keys that belong to each pipeline stage, by prefix. A stage's hash covers
/// its own keys and those of every stage it consumes.
pub const CORPUS_KEYS: &[&str] = &["corpus."];
pub const ACTION_KEYS: &[&str] = &["corpus.", "split.", "action.", "eval.heldout"];
pub const REWARD_KEYS: &[&str] = &["corpus.", "split.", "action.", "eval.heldout", "reward", "vrnn."];

fn is_seed_key(key: &str) -> bool {
    key.ends_with(".seed")
}

fn flatten(prefix: &str, v: &Value, out: &mut BTreeMap<String, Value>) {
    match v {
        Value::Object(map) => {
            for (k, child) in map {
                let key = if prefix.is_empty() {
                    k.clone()
                } else {
                    format!("{prefix}.{k}")
                };
                flatten(&key, child, out);
            }
        }
        _ => {
            if !is_seed_key(prefix) {
                out.insert(prefix.to_string(), v.clone());
            }
        }
    }
}

fn lookup<'a>(root: &'a mut Value, key: &str) -> Option<&'a mut Value> {
    key.split('.')
        .try_fold(root, |node, part| node.as_object_mut()?.get_mut(part))
}

/// Parses `raw` into the JSON type of `current`.
fn coerce(current: &Value, raw: &str) -> std::result::Result<Value, String> {
    match current {
        Value::Bool(_) => raw.parse::<bool>().map(Value::Bool).map_err(|e| e.to_string()),
        Value::Number(n) if n.is_u64() || n.is_i64() => {
            if let Ok(u) = raw.parse::<u64>() {
                Ok(Value::from(u))
            } else {
                raw.parse::<i64>().map(Value::from).map_err(|e| e.to_string())
            }
        }
        Value::Number(_) => {
            let x = raw.parse::<f64>().map_err(|e| e.to_string())?;
            serde_json::Number::from_f64(x)
                .map(Value::Number)
                .ok_or_else(|| format!("{raw} is not finite"))
        }
        Value::String(_) => Ok(Value::String(raw.to_string())),
        other => Err(format!("cannot set a {other} value from text")),
    }
}

fn render(v: &Value) -> String {
    match v {
        Value::String(s) => s.clone(),
        Value::Number(n) => match n.as_f64() {
            Some(x) if !(n.is_u64() || n.is_i64()) => format!("{x:?}"),
            _ => n.to_string(),
        },
        other => other.to_string(),
    }
}

impl RunConfig {
    /// Resolved settings as sorted `key -> value` text.
    pub fn entries(&self) -> BTreeMap<String, String> {
        let v = serde_json::to_value(self).expect("config serializes");
        let mut flat = BTreeMap::new();
        flatten("", &v, &mut flat);
        flat.into_iter().map(|(k, v)| (k, render(&v))).collect()
    }

    pub fn keys(&self) -> Vec<String> {
        self.entries().into_keys().collect()
    }

    pub fn get(&self, key: &str) -> Option<String> {
        self.entries().remove(key)
    }

    /// Sets one key from its text form, checking type and validity.
    pub fn set(&mut self, key: &str, raw: &str) -> Result<()> {
        let mut v = serde_json::to_value(&*self)?;
        let slot = match lookup(&mut v, key) {
            Some(slot) if !is_seed_key(key) && !slot.is_object() => slot,
            _ => return Err(Error::Config(format!("unknown config key {key:?}"))),
        };
        *slot = coerce(slot, raw.trim()).map_err(|e| Error::Config(format!("{key} = {raw:?}: {e}")))?;
        let updated: RunConfig =
            serde_json::from_value(v).map_err(|e| Error::Config(format!("{key} = {raw:?}: {e}")))?;
        *self = updated;
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        if self.corpus.size == 0 || self.corpus.max_turns == 0 || self.eval.dialogues == 0 || self.eval.heldout == 0 {
            return Err(Error::Config(
                "corpus size, turn limit and evaluation sizes must be positive".into(),
            ));
        }
        self.split_spec(0)?;
        self.action.validate()?;
        self.vrnn.validate()?;
        self.handcrafted.validate()?;
        self.policy.validate()
    }

    pub fn split_spec(&self, seed: u64) -> Result<SplitSpec> {
        SplitSpec::new(self.split.fully, self.split.partial, self.split.unlabeled, seed)
    }

    /// The resolved configuration as a loadable document.
    pub fn to_text(&self) -> String {
        self.entries()
            .into_iter()
            .map(|(k, v)| format!("{k} = {v}\n"))
            .collect()
    }

    /// Hex SHA-256 of the whole resolved configuration.
    pub fn hash(&self) -> String {
        digest(self.entries().iter())
    }

    /// Hash over the keys matching any of `prefixes` (exact key or `prefix.`).
    pub fn stage_hash(&self, prefixes: &[&str]) -> String {
        let entries = self.entries();
        digest(
            entries
                .iter()
                .filter(|(k, _)| prefixes.iter().any(|p| k.starts_with(p))),
        )
    }

    /// Applies `(key, value)` pairs in order.
    pub fn apply<'a>(&mut self, pairs: impl IntoIterator<Item = (&'a str, &'a str)>) -> Result<()> {
        for (k, v) in pairs {
            self.set(k, v)?;
        }
        Ok(())
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        for e in parse_document(text, None)? {
            cfg.set(&e.key, &e.value).map_err(|err| at_line(e.line, err))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut cfg = RunConfig::default();
        for e in read_document(path)? {
            cfg.set(&e.key, &e.value).map_err(|err| at_line(e.line, err))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn at_line(line: usize, err: Error) -> Error {
    match err {
        Error::Config(message) => Error::Parse { line, message },
        other => other,
    }
}

fn digest<'a>(entries: impl Iterator<Item = (&'a String, &'a String)>) -> String {
    let mut h = Sha256::new();
    for (k, v) in entries {
        h.update(k.as_bytes());
        h.update(b"=");
        h.update(v.as_bytes());
        h.update(b"\n");
    }
    hex::encode(h.finalize())
}

/// One `key = value` line, after includes are expanded.
#[derive(Clone, Debug, PartialEq)]
pub struct Entry {
    pub key: String,
    pub value: String,
    pub line: usize,
}

/// Parses a document. `include <path>` lines are resolved against `base`
/// (the including file's directory); without a base they are an error.
pub fn parse_document(text: &str, base: Option<&Path>) -> Result<Vec<Entry>> {
    parse_at_depth(text, base, 0)
}

pub fn read_document(path: &Path) -> Result<Vec<Entry>> {
    read_at_depth(path, 0)
}

fn read_at_depth(path: &Path, depth: usize) -> Result<Vec<Entry>> {
    let text =
        fs::read_to_string(path).map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
    let base = path
        .parent()
        .map(Path::to_path_buf)
        .unwrap_or_else(|| PathBuf::from("."));
    parse_at_depth(&text, Some(&base), depth)
}

fn parse_at_depth(text: &str, base: Option<&Path>, depth: usize) -> Result<Vec<Entry>> {
    if depth > MAX_INCLUDE_DEPTH {
        return Err(Error::Config("config includes nest too deeply (cycle?)".into()));
    }
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let content = raw.split('#').next().unwrap_or("").trim();
        if content.is_empty() {
            continue;
        }
        if let Some(rest) = content.strip_prefix("include ") {
            let base = base.ok_or(Error::Parse {
                line,
                message: "include is only allowed in config files".into(),
            })?;
            out.extend(read_at_depth(&base.join(rest.trim()), depth + 1)?);
            continue;
        }
        let (k, v) = content.split_once('=').ok_or_else(|| Error::Parse {
            line,
            message: format!("expected `key = value`, got {content:?}"),
        })?;
        let key = k.trim();
        if key.is_empty() {
            return Err(Error::Parse {
                line,
                message: "empty key".into(),
            });
        }
        out.push(Entry {
            key: key.to_string(),
            value: v.trim().to_string(),
            line,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_text() {
        let cfg = RunConfig::default();
        let back = RunConfig::from_text(&cfg.to_text()).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.hash(), cfg.hash());
    }

    #[test]
    fn seeds_are_not_keys() {
        let cfg = RunConfig::default();
        assert!(cfg.keys().iter().all(|k| !k.ends_with("seed")));
        let mut c = cfg.clone();
        assert!(c.set("policy.seed", "3").is_err());
    }

    #[test]
    fn typed_values() {
        let mut c = RunConfig::default();
        c.set("vrnn.mode", "stochastic").unwrap();
        c.set("reward", "ss-gdpl").unwrap();
        c.set("policy.lr", "1e-3").unwrap();
        c.set("policy.terminal_bonus", "true").unwrap();
        c.set("corpus.preset", "one-domain").unwrap();
        assert_eq!(c.get("vrnn.mode").as_deref(), Some("stochastic"));
        assert_eq!(c.policy.lr, 1e-3);
        assert!(c.set("vrnn.mode", "sideways").is_err());
        assert!(c.set("policy.episodes", "-4").is_err());
        assert!(c.set("policy.episodes", "1.5").is_err());
        assert!(c.set("policy", "1").is_err());
    }
}
