//! Maps every demonstration turn to an action id and its embedding.

use serde::{Deserialize, Serialize};

use super::context::ContextModel;
use super::model::ActionModel;
use super::train::dialogue_examples;
use crate::corpus::{to_dense, Corpus, Level};
use crate::error::{Error, Result};
use crate::math::{argmax, Matrix};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnrichedTurn {
    /// True state, or the context-model placeholder for text-only dialogues.
    pub state: Vec<f64>,
    /// True action for labeled turns, otherwise the predicted argmax.
    pub action: usize,
    pub embedding: Vec<f64>,
    /// Predictive distribution over actions.
    pub probs: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnrichedDialogue {
    pub id: u64,
    pub level: Level,
    pub turns: Vec<EnrichedTurn>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnrichedCorpus {
    pub state_width: usize,
    pub num_actions: usize,
    pub embed_dim: usize,
    pub table: Matrix,
    pub dialogues: Vec<EnrichedDialogue>,
}

impl EnrichedCorpus {
    pub fn num_turns(&self) -> usize {
        self.dialogues.iter().map(|d| d.turns.len()).sum()
    }
}

fn weighted_row(table: &Matrix, probs: &[f64]) -> Vec<f64> {
    let mut e = vec![0.0; table.cols];
    for (a, p) in probs.iter().enumerate() {
        for (o, x) in e.iter_mut().zip(table.row(a)) {
            *o += p * x;
        }
    }
    e
}

/// Enriches all dialogues of `corpora`. Fully labeled turns keep their
/// action; partially labeled turns take the argmax of the state-aware
/// predictor; text-only turns take the argmax of the text predictor and a
/// placeholder state from `context`.
pub fn enrich(corpora: &[&Corpus], model: &ActionModel, context: Option<&ContextModel>) -> Result<EnrichedCorpus> {
    let table = model.embedding_table().clone();
    let soft = model.config.soft_enrichment;
    let mut dialogues = Vec::new();
    for c in corpora {
        let width = c.header.state_width;
        if width != model.state_width || c.header.num_actions != model.num_actions {
            return Err(Error::dim(
                "enrichment corpus",
                format!("state width {} and {} actions", model.state_width, model.num_actions),
                format!("state width {width} and {} actions", c.header.num_actions),
            ));
        }
        for d in &c.dialogues {
            let ex = dialogue_examples(d, width);
            let utts: Vec<&[u32]> = ex.iter().map(|e| e.utt.as_slice()).collect();
            let (states, probs) = match d.level {
                Level::Fully | Level::Partial => {
                    let s: Vec<Vec<f64>> = d
                        .turns
                        .iter()
                        .map(|t| t.state.as_ref().map(|b| to_dense(b, width)))
                        .collect::<Option<_>>()
                        .ok_or_else(|| Error::State(format!("dialogue {} lacks states", d.id)))?;
                    let sr: Vec<&[f64]> = ex.iter().map(|e| e.state.as_deref().unwrap_or(&[])).collect();
                    let nr: Vec<&[f64]> = ex.iter().map(|e| e.next_state.as_deref().unwrap_or(&[])).collect();
                    (s, model.predict_batch(&utts, &sr, &nr)?)
                }
                Level::Unlabeled => {
                    let ctx = context.ok_or_else(|| {
                        Error::Config("text-only dialogues need a trained context model for state placeholders".into())
                    })?;
                    let mut s = ctx.placeholders(model, d)?;
                    s.truncate(d.turns.len());
                    let pr: Vec<&[u32]> = ex.iter().map(|e| e.prev.as_slice()).collect();
                    let nx: Vec<&[u32]> = ex.iter().map(|e| e.next.as_slice()).collect();
                    (s, model.predict_text_batch(&utts, &pr, &nx)?)
                }
            };
            let turns = ex
                .iter()
                .zip(states)
                .zip(probs)
                .map(|((e, state), probs)| {
                    let (action, embedding) = match e.action {
                        Some(a) if d.level == Level::Fully => (a, table.row(a).to_vec()),
                        _ => {
                            let a = argmax(&probs);
                            let emb = if soft {
                                weighted_row(&table, &probs)
                            } else {
                                table.row(a).to_vec()
                            };
                            (a, emb)
                        }
                    };
                    EnrichedTurn {
                        state,
                        action,
                        embedding,
                        probs,
                    }
                })
                .collect();
            dialogues.push(EnrichedDialogue {
                id: d.id,
                level: d.level,
                turns,
            });
        }
    }
    Ok(EnrichedCorpus {
        state_width: model.state_width,
        num_actions: model.num_actions,
        embed_dim: model.config.embed_dim,
        table,
        dialogues,
    })
}
