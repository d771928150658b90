//! Semi-supervised action prediction and action-embedding learning.

mod bounds;
mod context;
mod enrich;
mod model;
mod train;

pub use bounds::{
    classification_loss, expect_with_entropy, labeled_response, labeled_transition, objective, unlabeled_response,
    unlabeled_transition, BoundParts, Encodings, ObjectiveNoise, ObjectiveTerms, TurnExample,
};
pub use context::{train_context_model, ContextModel};
pub use enrich::{enrich, EnrichedCorpus, EnrichedDialogue, EnrichedTurn};
pub use model::{bernoulli_loglik, rows_matrix, ActionConfig, ActionModel, EMBEDDING_TABLE};
pub use train::{accuracy, dialogue_examples, examples, text_accuracy, train_action_model, ActionTrainLog};

use serde::{Deserialize, Serialize};

/// Everything the action stage produces, as persisted on disk.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ActionArtifact {
    pub model: ActionModel,
    pub context: Option<ContextModel>,
    pub log: ActionTrainLog,
}
