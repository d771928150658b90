//! The experiment pipeline as composable stages:
//! corpus → splits → action learning → enrichment → reward → policy → metrics.
//!
//! Each stage is a pure function of the resolved configuration and the run
//! seed. `StageCache` memoizes stage outputs by `(stage hash, seed)`, so
//! grid cells that agree on upstream settings share the work without
//! changing any result.

use std::collections::HashMap;
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};

use super::config::{RunConfig, ACTION_KEYS, CORPUS_KEYS, REWARD_KEYS};
use super::metrics::{evaluate_policy, report, roc_auc, MetricReport};
use crate::action::{accuracy, enrich, examples, train_action_model, ActionArtifact, EnrichedCorpus};
use crate::corpus::{generate_corpus, mask_labels, to_dense, Corpus, Ledger, Splits};
use crate::env::DialogueEnv;
use crate::error::{Error, Result};
use crate::policy::{run_episode, train_policy, EpisodeLog, PolicyNet};
use crate::reward::{ablation_wiring, RewardHandle, RewardInputs};
use crate::seed::{stream_rng, HELDOUT_SALT, STREAM_EVAL, STREAM_SCORE};
use crate::vrnn::{train_vrnn, Vrnn, VrnnTrainLog};
use rand::Rng;

pub fn environment(cfg: &RunConfig) -> Result<DialogueEnv> {
    DialogueEnv::new(cfg.corpus.preset.schemas(), cfg.corpus.max_turns)
}

pub fn corpus_stage(cfg: &RunConfig, seed: u64) -> Result<Corpus> {
    generate_corpus(
        &cfg.corpus.preset.schemas(),
        cfg.corpus.size,
        seed,
        cfg.corpus.max_turns,
        &cfg.stage_hash(CORPUS_KEYS),
    )
}

/// Fresh fully annotated expert dialogues, disjoint in seed from the training corpus.
pub fn heldout_corpus(cfg: &RunConfig, seed: u64) -> Result<Corpus> {
    generate_corpus(
        &cfg.corpus.preset.schemas(),
        cfg.eval.heldout,
        seed.wrapping_add(HELDOUT_SALT),
        cfg.corpus.max_turns,
        &cfg.stage_hash(CORPUS_KEYS),
    )
}

pub fn split_stage(cfg: &RunConfig, corpus: &Corpus, seed: u64) -> Result<(Splits, Ledger)> {
    mask_labels(corpus, &cfg.split_spec(seed)?)
}

pub fn action_stage(cfg: &RunConfig, splits: &Splits, seed: u64) -> Result<ActionArtifact> {
    let config = crate::action::ActionConfig {
        seed,
        ..cfg.action.clone()
    };
    let (model, context, log) = train_action_model(&splits.fully, &splits.partial, &splits.unlabeled, &config)?;
    Ok(ActionArtifact { model, context, log })
}

pub fn enrich_stage(artifact: &ActionArtifact, splits: &Splits) -> Result<EnrichedCorpus> {
    let parts: Vec<&Corpus> = [&splits.fully, &splits.partial, &splits.unlabeled]
        .into_iter()
        .filter(|c| !c.dialogues.is_empty())
        .collect();
    enrich(&parts, &artifact.model, artifact.context.as_ref())
}

/// Trains the VRNN the configured handle needs; `None` for handles without one.
pub fn reward_stage(cfg: &RunConfig, enriched: &EnrichedCorpus, seed: u64) -> Result<Option<(Vrnn, VrnnTrainLog)>> {
    let Some(input) = cfg.reward.vrnn_input() else {
        return Ok(None);
    };
    let config = crate::vrnn::VrnnConfig {
        seed,
        ..cfg.vrnn.clone()
    };
    train_vrnn(enriched, input, &config).map(Some)
}

pub fn reward_handle(
    cfg: &RunConfig,
    enriched: Option<&EnrichedCorpus>,
    vrnn: Option<&Vrnn>,
    seed: u64,
) -> Result<RewardHandle> {
    let inputs = RewardInputs {
        enriched,
        vrnn,
        handcrafted: cfg.handcrafted,
        disc: crate::reward::DiscConfig {
            seed,
            ..cfg.disc.clone()
        },
    };
    ablation_wiring(cfg.reward, &inputs)
}

pub fn policy_stage(cfg: &RunConfig, handle: &mut RewardHandle, seed: u64) -> Result<(PolicyNet, Vec<EpisodeLog>)> {
    let config = crate::policy::PolicyConfig {
        seed,
        ..cfg.policy.clone()
    };
    let mut env = environment(cfg)?;
    train_policy(&mut env, handle, &config)
}

/// Greedy evaluation on `eval.dialogues` goals of the seed's evaluation stream.
pub fn evaluate_stage(cfg: &RunConfig, policy: &PolicyNet, seed: u64) -> Result<MetricReport> {
    let mut env = environment(cfg)?;
    let mut rng = stream_rng(seed, STREAM_EVAL);
    let batch = evaluate_policy(&mut env, policy, cfg.eval.dialogues, &mut rng)?;
    report(&batch, vec![seed], &cfg.hash())
}

/// Per-turn rewards of held-out expert dialogues and of as many
/// uniform-random rollouts, as `(expert, random)`.
pub fn paired_scores(
    cfg: &RunConfig,
    handle: &RewardHandle,
    heldout: &Corpus,
    seed: u64,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let width = heldout.header.state_width;
    let mut expert = Vec::new();
    for d in &heldout.dialogues {
        let states: Vec<Vec<f64>> = d
            .turns
            .iter()
            .map(|t| t.state.as_ref().map(|b| to_dense(b, width)))
            .collect::<Option<_>>()
            .ok_or_else(|| Error::State(format!("held-out dialogue {} lacks states", d.id)))?;
        let actions: Vec<usize> = d
            .turns
            .iter()
            .map(|t| t.action)
            .collect::<Option<_>>()
            .ok_or_else(|| Error::State(format!("held-out dialogue {} lacks actions", d.id)))?;
        expert.extend(handle.score(&states, &actions, true)?);
    }
    let mut env = environment(cfg)?;
    let k = env.actions().len();
    let mut rng = stream_rng(seed, STREAM_SCORE);
    let mut random = Vec::new();
    for _ in 0..heldout.dialogues.len() {
        env.reset(&mut rng);
        let t = run_episode(&mut env, handle, &mut rng, |_, _, rng| {
            Ok((rng.random_range(0..k), 0.0))
        })?;
        random.extend(t.steps.iter().map(|s| s.reward));
    }
    Ok((expert, random))
}

/// Everything one `(cell, seed)` run reports.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellOutcome {
    pub report: MetricReport,
    /// Held-out action-prediction accuracy of the action model.
    pub action_accuracy: Option<f64>,
    pub elbo_initial: Option<f64>,
    pub elbo_final: Option<f64>,
    /// ROC-AUC of per-turn rewards, expert against random dialogues.
    pub reward_auc: Option<f64>,
    pub episodes: Vec<EpisodeLog>,
}

/// Output of the demonstration-side stages.
#[derive(Debug)]
pub struct DemoStages {
    pub artifact: ActionArtifact,
    pub enriched: EnrichedCorpus,
    pub heldout: Corpus,
    pub heldout_accuracy: f64,
}

type Slot<T> = Arc<Mutex<Option<Arc<T>>>>;

struct Memo<T> {
    slots: Mutex<HashMap<(String, u64), Slot<T>>>,
}

impl<T> Default for Memo<T> {
    fn default() -> Self {
        Memo {
            slots: Mutex::new(HashMap::new()),
        }
    }
}

impl<T> Memo<T> {
    fn get_or(&self, key: (String, u64), compute: impl FnOnce() -> Result<T>) -> Result<Arc<T>> {
        let slot = {
            let mut slots = self.slots.lock().unwrap_or_else(|e| e.into_inner());
            slots.entry(key).or_default().clone()
        };
        // holding the slot lock makes concurrent requests for the same key wait
        let mut guard = slot.lock().unwrap_or_else(|e| e.into_inner());
        if let Some(v) = guard.as_ref() {
            return Ok(v.clone());
        }
        let v = Arc::new(compute()?);
        *guard = Some(v.clone());
        Ok(v)
    }
}

/// Memoized stage outputs, safe to share between grid workers.
#[derive(Default)]
pub struct StageCache {
    corpora: Memo<Corpus>,
    demos: Memo<DemoStages>,
    vrnns: Memo<Option<(Vrnn, VrnnTrainLog)>>,
}

impl StageCache {
    pub fn corpus(&self, cfg: &RunConfig, seed: u64) -> Result<Arc<Corpus>> {
        self.corpora
            .get_or((cfg.stage_hash(CORPUS_KEYS), seed), || corpus_stage(cfg, seed))
    }

    pub fn demos(&self, cfg: &RunConfig, seed: u64) -> Result<Arc<DemoStages>> {
        self.demos.get_or((cfg.stage_hash(ACTION_KEYS), seed), || {
            let corpus = self.corpus(cfg, seed)?;
            let (splits, _) = split_stage(cfg, &corpus, seed)?;
            let artifact = action_stage(cfg, &splits, seed)?;
            let enriched = enrich_stage(&artifact, &splits)?;
            let heldout = heldout_corpus(cfg, seed)?;
            let heldout_accuracy = accuracy(&artifact.model, &examples(&heldout))?;
            Ok(DemoStages {
                artifact,
                enriched,
                heldout,
                heldout_accuracy,
            })
        })
    }

    pub fn vrnn(&self, cfg: &RunConfig, seed: u64) -> Result<Arc<Option<(Vrnn, VrnnTrainLog)>>> {
        self.vrnns.get_or((cfg.stage_hash(REWARD_KEYS), seed), || {
            let demos = self.demos(cfg, seed)?;
            reward_stage(cfg, &demos.enriched, seed)
        })
    }
}

/// Runs every stage of one configuration and seed.
pub fn run_cell(cfg: &RunConfig, seed: u64, cache: &StageCache) -> Result<CellOutcome> {
    cfg.validate()?;
    let mut out = CellOutcome {
        report: MetricReport::default(),
        action_accuracy: None,
        elbo_initial: None,
        elbo_final: None,
        reward_auc: None,
        episodes: Vec::new(),
    };
    let demos = if cfg.reward.uses_demonstrations() {
        let d = cache.demos(cfg, seed)?;
        out.action_accuracy = Some(d.heldout_accuracy);
        Some(d)
    } else {
        None
    };
    let trained = match cfg.reward.vrnn_input() {
        Some(_) => Some(cache.vrnn(cfg, seed)?),
        None => None,
    };
    let vrnn = match trained.as_deref() {
        Some(Some((model, log))) => {
            out.elbo_initial = Some(log.initial.elbo);
            out.elbo_final = log.epochs.last().map(|e| e.elbo);
            Some(model)
        }
        _ => None,
    };
    let mut handle = reward_handle(cfg, demos.as_ref().map(|d| &d.enriched), vrnn, seed)?;
    if let (Some(d), Some(_)) = (&demos, vrnn) {
        let (expert, random) = paired_scores(cfg, &handle, &d.heldout, seed)?;
        out.reward_auc = Some(roc_auc(&expert, &random)?);
    }
    let (policy, episodes) = policy_stage(cfg, &mut handle, seed)?;
    out.report = evaluate_stage(cfg, &policy, seed)?;
    out.episodes = episodes;
    Ok(out)
}
