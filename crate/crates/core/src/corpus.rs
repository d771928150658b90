//! Expert demonstrations: generation, supervision masking, and JSONL storage.
//!
//! File layout: the first line is a [`CorpusHeader`]; each following line
//! is one [`Demonstration`]. States are stored as sorted lists of set-bit
//! indices, utterances as token ids, actions as action ids. A sidecar file
//! `<corpus>.vocab.tsv` lists `id<TAB>token` and `id<TAB>action-name` rows.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::env::render::{render_system, render_user, Utterance, Vocab, SEP};
use crate::env::{expert_policy, is_success, sample_goal, DialogueEnv, SchemaSet, UserGoal};
use crate::error::{Error, Result};
use crate::seed::{stream_rng, STREAM_GOAL, STREAM_RENDER, STREAM_SPLIT};

pub const CORPUS_FORMAT: &str = "actvrnn-corpus";
pub const CORPUS_VERSION: u32 = 1;

/// Set-bit indices of a binary state vector.
pub type StateBits = Vec<u16>;

pub fn to_bits(dense: &[f64]) -> StateBits {
    dense
        .iter()
        .enumerate()
        .filter(|(_, &x)| x != 0.0)
        .map(|(i, _)| i as u16)
        .collect()
}

pub fn to_dense(bits: &[u16], width: usize) -> Vec<f64> {
    let mut v = vec![0.0; width];
    for &b in bits {
        v[b as usize] = 1.0;
    }
    v
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Level {
    Fully,
    Partial,
    Unlabeled,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DemoTurn {
    /// State before the system speaks; absent in unlabeled dialogues.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub state: Option<StateBits>,
    /// Present only in fully labeled dialogues.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub action: Option<usize>,
    pub system: Utterance,
    pub user: Utterance,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Demonstration {
    pub id: u64,
    pub level: Level,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub goal: Option<UserGoal>,
    /// The user's first utterance, before any system turn.
    pub opening: Utterance,
    pub turns: Vec<DemoTurn>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub final_state: Option<StateBits>,
}

impl Demonstration {
    pub fn len(&self) -> usize {
        self.turns.len()
    }

    pub fn is_empty(&self) -> bool {
        self.turns.is_empty()
    }

    /// State after turn `t`'s user reply.
    pub fn next_state(&self, t: usize) -> Option<&StateBits> {
        match self.turns.get(t + 1) {
            Some(turn) => turn.state.as_ref(),
            None => self.final_state.as_ref(),
        }
    }

    /// Utterance history before system turn `t`: the opening, then every
    /// earlier system and user utterance, separated by `<sep>`.
    pub fn context(&self, t: usize) -> Vec<u32> {
        let mut c = self.opening.clone();
        for turn in &self.turns[..t] {
            c.push(SEP);
            c.extend_from_slice(&turn.system);
            c.push(SEP);
            c.extend_from_slice(&turn.user);
        }
        c
    }

    fn check_level(&self) -> Result<()> {
        if self.turns.len() < 2 {
            return Err(Error::State(format!("dialogue {} has fewer than two turns", self.id)));
        }
        let ok = match self.level {
            Level::Fully => {
                self.final_state.is_some() && self.turns.iter().all(|t| t.state.is_some() && t.action.is_some())
            }
            Level::Partial => {
                self.final_state.is_some() && self.turns.iter().all(|t| t.state.is_some() && t.action.is_none())
            }
            Level::Unlabeled => {
                self.final_state.is_none() && self.turns.iter().all(|t| t.state.is_none() && t.action.is_none())
            }
        };
        if ok {
            Ok(())
        } else {
            Err(Error::State(format!(
                "dialogue {} fields do not match level {:?}",
                self.id, self.level
            )))
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorpusHeader {
    pub format: String,
    pub version: u32,
    pub config_hash: String,
    pub seed: u64,
    pub schemas: SchemaSet,
    pub max_turns: usize,
    pub state_width: usize,
    pub num_actions: usize,
    pub vocab: Vec<String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Corpus {
    pub header: CorpusHeader,
    pub dialogues: Vec<Demonstration>,
}

impl Corpus {
    pub fn vocab(&self) -> Vocab {
        Vocab::from_tokens(self.header.vocab.clone())
    }

    pub fn env(&self) -> Result<DialogueEnv> {
        DialogueEnv::new(self.header.schemas.clone(), self.header.max_turns)
    }

    fn with_dialogues(&self, dialogues: Vec<Demonstration>) -> Corpus {
        Corpus {
            header: self.header.clone(),
            dialogues,
        }
    }
}

/// Rolls out the expert on `n` sampled goals, fully annotated.
pub fn generate_corpus(
    schemas: &SchemaSet,
    n: usize,
    seed: u64,
    max_turns: usize,
    config_hash: &str,
) -> Result<Corpus> {
    if n == 0 {
        return Err(Error::Config("corpus size must be at least 1".into()));
    }
    let mut env = DialogueEnv::new(schemas.clone(), max_turns)?;
    let vocab = Vocab::build(schemas);
    let mut goal_rng = stream_rng(seed, STREAM_GOAL);
    let mut render_rng = stream_rng(seed, STREAM_RENDER);
    let mut dialogues = Vec::with_capacity(n);
    for id in 0..n as u64 {
        let goal = sample_goal(schemas, &mut goal_rng);
        env.reset_with_goal(goal.clone());
        let opening = render_user(&vocab, schemas, env.opening(), &mut render_rng)?;
        let mut turns = Vec::new();
        loop {
            let state = env.state()?;
            let bits = to_bits(&state.encode(schemas));
            let a = expert_policy(state, env.actions());
            let system = render_system(&vocab, schemas, env.actions().get(a), &mut render_rng)?;
            let out = env.step(a)?;
            let user = render_user(&vocab, schemas, &out.user, &mut render_rng)?;
            turns.push(DemoTurn {
                state: Some(bits),
                action: Some(a),
                system,
                user,
            });
            if out.done {
                if !out.success {
                    return Err(Error::State(format!("expert failed on dialogue {id}")));
                }
                break;
            }
        }
        debug_assert!(is_success(&goal, env.state()?).0);
        dialogues.push(Demonstration {
            id,
            level: Level::Fully,
            goal: Some(goal),
            opening,
            turns,
            final_state: Some(to_bits(&env.encoded_state()?)),
        });
    }
    Ok(Corpus {
        header: CorpusHeader {
            format: CORPUS_FORMAT.into(),
            version: CORPUS_VERSION,
            config_hash: config_hash.into(),
            seed,
            schemas: schemas.clone(),
            max_turns,
            state_width: env.state_width(),
            num_actions: env.actions().len(),
            vocab: vocab.tokens().to_vec(),
        },
        dialogues,
    })
}

/// Supervision-level fractions `(fully, partial, unlabeled)` and split seed.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub fully: f64,
    pub partial: f64,
    pub unlabeled: f64,
    pub seed: u64,
}

impl SplitSpec {
    pub fn new(fully: f64, partial: f64, unlabeled: f64, seed: u64) -> Result<Self> {
        let s = SplitSpec {
            fully,
            partial,
            unlabeled,
            seed,
        };
        s.validate()?;
        Ok(s)
    }

    /// Parses `f,p,u`.
    pub fn parse(text: &str, seed: u64) -> Result<Self> {
        let parts: Vec<f64> = text
            .split(',')
            .map(|p| p.trim().parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::Config(format!("split {text:?}: {e}")))?;
        if parts.len() != 3 {
            return Err(Error::Config(format!("split {text:?} needs three fractions f,p,u")));
        }
        Self::new(parts[0], parts[1], parts[2], seed)
    }

    pub fn validate(&self) -> Result<()> {
        let f = [self.fully, self.partial, self.unlabeled];
        if f.iter().any(|x| !(0.0..=1.0).contains(x)) {
            return Err(Error::Config(format!("split fractions {f:?} must lie in [0, 1]")));
        }
        let sum: f64 = f.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!("split fractions {f:?} sum to {sum}, not 1")));
        }
        Ok(())
    }

    /// Dialogue counts per level for a corpus of `n`.
    pub fn counts(&self, n: usize) -> (usize, usize, usize) {
        let nf = (self.fully * n as f64).round() as usize;
        let np = ((self.partial * n as f64).round() as usize).min(n - nf);
        (nf, np, n - nf - np)
    }
}

/// The three supervision levels; every dialogue lands in exactly one.
#[derive(Clone, Debug, PartialEq)]
pub struct Splits {
    pub fully: Corpus,
    pub partial: Corpus,
    pub unlabeled: Corpus,
}

/// Hidden fields removed by masking, keyed by dialogue id.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Ledger {
    pub hidden: BTreeMap<u64, Demonstration>,
}

pub fn mask_labels(corpus: &Corpus, spec: &SplitSpec) -> Result<(Splits, Ledger)> {
    spec.validate()?;
    let n = corpus.dialogues.len();
    if n < 10 {
        return Err(Error::Config(format!(
            "corpus of {n} dialogues is too small to split (need at least 10)"
        )));
    }
    if let Some(d) = corpus.dialogues.iter().find(|d| d.level != Level::Fully) {
        return Err(Error::State(format!("dialogue {} is already masked", d.id)));
    }
    let (nf, np, _) = spec.counts(n);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut stream_rng(spec.seed, STREAM_SPLIT));
    let mut levels = vec![Level::Unlabeled; n];
    for (rank, &i) in order.iter().enumerate() {
        if rank < nf {
            levels[i] = Level::Fully;
        } else if rank < nf + np {
            levels[i] = Level::Partial;
        }
    }
    let mut ledger = Ledger::default();
    let (mut f, mut p, mut u) = (Vec::new(), Vec::new(), Vec::new());
    for (d, level) in corpus.dialogues.iter().zip(levels) {
        ledger.hidden.insert(d.id, d.clone());
        let mut m = d.clone();
        m.level = level;
        m.goal = None;
        for t in &mut m.turns {
            if level != Level::Fully {
                t.action = None;
            }
            if level == Level::Unlabeled {
                t.state = None;
            }
        }
        if level == Level::Unlabeled {
            m.final_state = None;
        }
        match level {
            Level::Fully => f.push(m),
            Level::Partial => p.push(m),
            Level::Unlabeled => u.push(m),
        }
    }
    Ok((
        Splits {
            fully: corpus.with_dialogues(f),
            partial: corpus.with_dialogues(p),
            unlabeled: corpus.with_dialogues(u),
        },
        ledger,
    ))
}

/// Refills masked fields from the ledger, in original id order.
pub fn restore(splits: &Splits, ledger: &Ledger) -> Result<Corpus> {
    let mut all: Vec<&Demonstration> = splits
        .fully
        .dialogues
        .iter()
        .chain(&splits.partial.dialogues)
        .chain(&splits.unlabeled.dialogues)
        .collect();
    all.sort_by_key(|d| d.id);
    let mut out = Vec::with_capacity(all.len());
    for d in all {
        let full = ledger
            .hidden
            .get(&d.id)
            .ok_or_else(|| Error::State(format!("dialogue {} missing from ledger", d.id)))?;
        let mut r = d.clone();
        r.level = Level::Fully;
        r.goal = full.goal.clone();
        r.final_state = full.final_state.clone();
        if r.turns.len() != full.turns.len() {
            return Err(Error::State(format!(
                "dialogue {} turn count differs from ledger",
                d.id
            )));
        }
        for (t, ft) in r.turns.iter_mut().zip(&full.turns) {
            t.state = ft.state.clone();
            t.action = ft.action;
        }
        out.push(r);
    }
    Ok(splits.fully.with_dialogues(out))
}

fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".vocab.tsv");
    PathBuf::from(s)
}

pub fn to_jsonl(corpus: &Corpus) -> Result<String> {
    let mut out = serde_json::to_string(&corpus.header)?;
    out.push('\n');
    for d in &corpus.dialogues {
        out.push_str(&serde_json::to_string(d)?);
        out.push('\n');
    }
    Ok(out)
}

pub fn save(corpus: &Corpus, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(to_jsonl(corpus)?.as_bytes())?;
    w.flush()?;
    let mut side = BufWriter::new(File::create(sidecar_path(path))?);
    writeln!(side, "# tokens")?;
    for (i, t) in corpus.header.vocab.iter().enumerate() {
        writeln!(side, "{i}\t{t}")?;
    }
    writeln!(side, "# actions")?;
    let env = corpus.env()?;
    for (i, name) in env.actions().names().iter().enumerate() {
        writeln!(side, "{i}\t{name}")?;
    }
    side.flush()?;
    Ok(())
}

pub fn load(path: &Path) -> Result<Corpus> {
    let file = File::open(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::MissingArtifact {
            path: path.to_path_buf(),
            stage: "gen-corpus".into(),
        },
        _ => Error::Io(e),
    })?;
    from_reader(BufReader::new(file))
}

pub fn from_reader(reader: impl BufRead) -> Result<Corpus> {
    let mut lines = reader.lines();
    let parse_err = |line: usize, message: String| Error::Parse { line, message };
    let first = lines.next().ok_or_else(|| parse_err(1, "empty corpus file".into()))??;
    let value: serde_json::Value = serde_json::from_str(&first).map_err(|e| parse_err(1, e.to_string()))?;
    if value.get("format").and_then(|f| f.as_str()) != Some(CORPUS_FORMAT) {
        return Err(parse_err(1, format!("not an {CORPUS_FORMAT} file")));
    }
    let version = value.get("version").and_then(|v| v.as_u64()).unwrap_or(0) as u32;
    if version != CORPUS_VERSION {
        return Err(Error::Version {
            found: version,
            expected: CORPUS_VERSION,
        });
    }
    let header: CorpusHeader = serde_json::from_value(value).map_err(|e| parse_err(1, e.to_string()))?;
    header.schemas.validate()?;
    let mut dialogues = Vec::new();
    for (i, line) in lines.enumerate() {
        let lineno = i + 2;
        let line = line?;
        let d: Demonstration = serde_json::from_str(&line)
            .map_err(|e| parse_err(lineno, format!("{e} (last complete dialogue on line {})", lineno - 1)))?;
        d.check_level().map_err(|e| parse_err(lineno, e.to_string()))?;
        dialogues.push(d);
    }
    Ok(Corpus { header, dialogues })
}

/// Mean turns per dialogue.
pub fn mean_turns(corpus: &Corpus) -> f64 {
    let total: usize = corpus.dialogues.iter().map(Demonstration::len).sum();
    total as f64 / corpus.dialogues.len().max(1) as f64
}
