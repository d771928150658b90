//! Minibatch training of the action learner.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::bounds::{objective, ObjectiveNoise, ObjectiveTerms, TurnExample};
use super::context::{train_context_model, ContextModel};
use super::model::{ActionConfig, ActionModel};
use crate::corpus::{to_dense, Corpus, Demonstration};
use crate::error::{Error, Result};
use crate::math::{argmax, Adam, Tape};
use crate::seed::{stream_rng, STREAM_TRAIN};

/// Flattens dialogues into per-turn examples.
pub fn examples(corpus: &Corpus) -> Vec<TurnExample> {
    let width = corpus.header.state_width;
    corpus
        .dialogues
        .iter()
        .flat_map(|d| dialogue_examples(d, width))
        .collect()
}

pub fn dialogue_examples(d: &Demonstration, width: usize) -> Vec<TurnExample> {
    (0..d.turns.len())
        .map(|t| {
            let turn = &d.turns[t];
            TurnExample {
                utt: turn.system.clone(),
                prev: if t > 0 {
                    d.turns[t - 1].system.clone()
                } else {
                    Vec::new()
                },
                next: d.turns.get(t + 1).map(|n| n.system.clone()).unwrap_or_default(),
                state: turn.state.as_ref().map(|s| to_dense(s, width)),
                next_state: d.next_state(t).map(|s| to_dense(s, width)),
                action: turn.action,
            }
        })
        .collect()
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ActionTrainLog {
    /// Mean per-step terms for each epoch.
    pub epochs: Vec<ObjectiveTerms>,
    /// Mean per-turn state reconstruction loss of the context model per epoch.
    pub context: Vec<f64>,
}

/// Cycles through a shuffled pool, reshuffling at each wrap.
struct Pool<'a> {
    items: Vec<&'a TurnExample>,
    pos: usize,
}

impl<'a> Pool<'a> {
    fn new(items: &'a [TurnExample], rng: &mut impl Rng) -> Self {
        let mut items: Vec<&TurnExample> = items.iter().collect();
        items.shuffle(rng);
        Pool { items, pos: 0 }
    }

    fn take(&mut self, n: usize, rng: &mut impl Rng) -> Vec<&'a TurnExample> {
        let mut out = Vec::with_capacity(n);
        if self.items.is_empty() {
            return out;
        }
        while out.len() < n.min(self.items.len()) {
            if self.pos == self.items.len() {
                self.items.shuffle(rng);
                self.pos = 0;
            }
            out.push(self.items[self.pos]);
            self.pos += 1;
        }
        out
    }
}

/// Trains predictor, embeddings and both VAEs jointly, then the context
/// model used for unlabeled-state placeholders.
///
/// One epoch is one pass over the fully labeled turns; every step pairs a
/// labeled minibatch with a minibatch from each other nonempty level, so
/// runs with and without extra data take the same number of steps.
pub fn train_action_model(
    fully: &Corpus,
    partial: &Corpus,
    unlabeled: &Corpus,
    config: &ActionConfig,
) -> Result<(ActionModel, Option<ContextModel>, ActionTrainLog)> {
    let ex_f = examples(fully);
    if ex_f.is_empty() {
        return Err(Error::Config("at least some fully labeled dialogues required".into()));
    }
    let ex_p = examples(partial);
    let ex_u = examples(unlabeled);
    let h = &fully.header;
    let mut model = ActionModel::new(config.clone(), h.state_width, h.num_actions, h.vocab.len())?;
    let mut rng = stream_rng(config.seed, STREAM_TRAIN);
    let mut opt = Adam::new(config.lr);
    let bs = config.batch_size;
    let steps = ex_f.len().div_ceil(bs);
    let mut pool_f = Pool::new(&ex_f, &mut rng);
    let mut pool_p = Pool::new(&ex_p, &mut rng);
    let mut pool_u = Pool::new(&ex_u, &mut rng);
    let mut log = ActionTrainLog::default();

    for _ in 0..config.epochs {
        let mut acc = ObjectiveTerms::default();
        for _ in 0..steps {
            let bf = pool_f.take(bs, &mut rng);
            let bp = pool_p.take(bs, &mut rng);
            let bu = pool_u.take(bs, &mut rng);
            let noise = ObjectiveNoise::sample(config.latent_dim, bf.len(), bp.len(), bu.len(), &mut rng);
            let mut tape = Tape::new();
            let (loss, terms) = objective(&model, &mut tape, &model.params, &bf, &bp, &bu, &noise)?;
            if !terms.objective.is_finite() {
                return Err(Error::Numeric("action-learning objective".into()));
            }
            tape.backward(loss);
            tape.accumulate(&mut model.params);
            opt.step(&mut model.params);
            add_terms(&mut acc, &terms, 1.0 / steps as f64);
        }
        log.epochs.push(acc);
    }

    let context = if ex_u.is_empty() {
        None
    } else {
        let (ctx, losses) = train_context_model(&model, &[fully, partial], config)?;
        log.context = losses;
        Some(ctx)
    };
    Ok((model, context, log))
}

fn add_terms(acc: &mut ObjectiveTerms, t: &ObjectiveTerms, w: f64) {
    acc.labeled += w * t.labeled;
    acc.unlabeled += w * t.unlabeled;
    acc.classification += w * t.classification;
    acc.response_labeled += w * t.response_labeled;
    acc.response_unlabeled += w * t.response_unlabeled;
    acc.text_classification += w * t.text_classification;
    acc.objective += w * t.objective;
}

/// Argmax accuracy of `f_A(a | u, s, s')` on labeled turns.
pub fn accuracy(model: &ActionModel, turns: &[TurnExample]) -> Result<f64> {
    let labeled: Vec<&TurnExample> = turns.iter().filter(|t| t.action.is_some()).collect();
    if labeled.is_empty() {
        return Err(Error::State("no labeled turns to score".into()));
    }
    let mut hits = 0usize;
    for chunk in labeled.chunks(256) {
        let utts: Vec<&[u32]> = chunk.iter().map(|t| t.utt.as_slice()).collect();
        let s: Vec<&[f64]> = chunk.iter().map(|t| t.state.as_deref().unwrap_or(&[])).collect();
        let n: Vec<&[f64]> = chunk.iter().map(|t| t.next_state.as_deref().unwrap_or(&[])).collect();
        let probs = model.predict_batch(&utts, &s, &n)?;
        hits += probs
            .iter()
            .zip(chunk)
            .filter(|(p, t)| Some(argmax(p)) == t.action)
            .count();
    }
    Ok(hits as f64 / labeled.len() as f64)
}

/// Argmax accuracy of the text-only predictor on labeled turns.
pub fn text_accuracy(model: &ActionModel, turns: &[TurnExample]) -> Result<f64> {
    let labeled: Vec<&TurnExample> = turns.iter().filter(|t| t.action.is_some()).collect();
    if labeled.is_empty() {
        return Err(Error::State("no labeled turns to score".into()));
    }
    let mut hits = 0usize;
    for chunk in labeled.chunks(256) {
        let u: Vec<&[u32]> = chunk.iter().map(|t| t.utt.as_slice()).collect();
        let p: Vec<&[u32]> = chunk.iter().map(|t| t.prev.as_slice()).collect();
        let n: Vec<&[u32]> = chunk.iter().map(|t| t.next.as_slice()).collect();
        let probs = model.predict_text_batch(&u, &p, &n)?;
        hits += probs
            .iter()
            .zip(chunk)
            .filter(|(p, t)| Some(argmax(p)) == t.action)
            .count();
    }
    Ok(hits as f64 / labeled.len() as f64)
}
