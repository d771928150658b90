//! Synthetic multi-domain task-oriented dialogue environment.

pub mod action;
pub mod expert;
pub mod render;
pub mod schema;
pub mod state;
pub mod user;

pub use action::{ActType, ActionSet, SystemAction};
pub use expert::{expert_action, expert_policy};
pub use render::{render_system, render_user, Utterance, Vocab, MAX_UTTERANCE_LEN};
pub use schema::{DomainSchema, InformableSlot, Preset, SchemaSet, SCHEMA_VERSION};
pub use state::{
    is_success, sample_goal, state_layout, state_width, DialogueState, DomainGoal, EntityCounts, RequestStatus,
    SlotValue, UserGoal,
};
pub use user::{user_opening, user_step, UserAct, UserMove, UserTurn};

use rand::Rng;

use crate::error::{Error, Result};

pub const DEFAULT_MAX_TURNS: usize = 20;

/// Result of one system turn.
#[derive(Clone, Debug, PartialEq)]
pub struct StepOutcome {
    pub user: UserMove,
    pub done: bool,
    /// Meaningful once `done` is set.
    pub success: bool,
}

/// One environment instance: schema, action set and the running episode.
#[derive(Clone, Debug)]
pub struct DialogueEnv {
    schemas: SchemaSet,
    actions: ActionSet,
    max_turns: usize,
    goal: Option<UserGoal>,
    state: Option<DialogueState>,
    opening: UserMove,
}

impl DialogueEnv {
    pub fn new(schemas: SchemaSet, max_turns: usize) -> Result<Self> {
        schemas.validate()?;
        if max_turns == 0 {
            return Err(Error::Config("max_turns must be positive".into()));
        }
        let actions = ActionSet::build(&schemas);
        Ok(DialogueEnv {
            schemas,
            actions,
            max_turns,
            goal: None,
            state: None,
            opening: Vec::new(),
        })
    }

    pub fn schemas(&self) -> &SchemaSet {
        &self.schemas
    }

    pub fn actions(&self) -> &ActionSet {
        &self.actions
    }

    pub fn max_turns(&self) -> usize {
        self.max_turns
    }

    pub fn state_width(&self) -> usize {
        state_width(&self.schemas)
    }

    /// Samples a fresh goal and returns the state after the user's opening.
    pub fn reset(&mut self, rng: &mut impl Rng) -> &DialogueState {
        let goal = sample_goal(&self.schemas, rng);
        self.reset_with_goal(goal)
    }

    pub fn reset_with_goal(&mut self, goal: UserGoal) -> &DialogueState {
        let (opening, state) = user_opening(&self.schemas, &goal);
        self.goal = Some(goal);
        self.opening = opening;
        self.state.insert(state)
    }

    pub fn opening(&self) -> &UserMove {
        &self.opening
    }

    pub fn goal(&self) -> Result<&UserGoal> {
        self.goal
            .as_ref()
            .ok_or_else(|| Error::State("environment not reset".into()))
    }

    pub fn state(&self) -> Result<&DialogueState> {
        self.state
            .as_ref()
            .ok_or_else(|| Error::State("environment not reset".into()))
    }

    pub fn encoded_state(&self) -> Result<Vec<f64>> {
        Ok(self.state()?.encode(&self.schemas))
    }

    pub fn step(&mut self, action_id: usize) -> Result<StepOutcome> {
        if action_id >= self.actions.len() {
            return Err(Error::State(format!(
                "action id {action_id} outside action set of {}",
                self.actions.len()
            )));
        }
        let goal = self
            .goal
            .as_ref()
            .ok_or_else(|| Error::State("environment not reset".into()))?;
        let state = self
            .state
            .as_ref()
            .ok_or_else(|| Error::State("environment not reset".into()))?;
        let turn = user_step(goal, state, self.actions.get(action_id), self.max_turns)?;
        let success = turn.done && is_success(goal, &turn.state).0;
        self.state = Some(turn.state);
        Ok(StepOutcome {
            user: turn.acts,
            done: turn.done,
            success,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seed::{stream_rng, STREAM_GOAL};

    fn run(seed: u64) -> Vec<Vec<f64>> {
        let mut env = DialogueEnv::new(Preset::ThreeDomain.schemas(), DEFAULT_MAX_TURNS).unwrap();
        let mut rng = stream_rng(seed, STREAM_GOAL);
        env.reset(&mut rng);
        let mut states = vec![env.encoded_state().unwrap()];
        loop {
            let a = expert_policy(env.state().unwrap(), env.actions());
            let out = env.step(a).unwrap();
            states.push(env.encoded_state().unwrap());
            if out.done {
                assert!(out.success);
                break;
            }
        }
        states
    }

    #[test]
    fn same_seed_same_trajectory() {
        assert_eq!(run(9), run(9));
    }

    #[test]
    fn step_errors() {
        let mut env = DialogueEnv::new(Preset::OneDomain.schemas(), 20).unwrap();
        assert!(matches!(env.step(0), Err(Error::State(_))));
        env.reset(&mut stream_rng(1, 0));
        assert!(env.step(999).is_err());
    }
}
