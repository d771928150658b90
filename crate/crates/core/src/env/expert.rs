//! Deterministic priority-rule system policy used to generate demonstrations.

use super::action::{ActType, ActionSet, SystemAction};
use super::state::DialogueState;

/// Picks the expert action from the dialogue state alone (the goal is never
/// consulted). Priority within the focus domain: answer pending requests,
/// ask for missing constraints, offer, book; then `reqmore` to move on, and
/// `bye` once the user has nothing left.
pub fn expert_action(state: &DialogueState) -> SystemAction {
    let Some(d) = state.focus() else {
        let act = if state.user_done {
            ActType::Bye
        } else {
            ActType::Reqmore
        };
        return SystemAction::new(act, None, vec![]);
    };
    let st = &state.domains[d];
    let pending = st.first_pending(2);
    if !pending.is_empty() {
        return SystemAction::new(ActType::Inform, Some(d), pending);
    }
    let missing = st.first_unstated(2);
    if !missing.is_empty() {
        return SystemAction::new(ActType::Request, Some(d), missing);
    }
    if !st.offered {
        return SystemAction::new(ActType::Offer, Some(d), vec![]);
    }
    if st.book_wanted && !st.booked {
        return SystemAction::new(ActType::Book, Some(d), vec![]);
    }
    SystemAction::new(ActType::Reqmore, None, vec![])
}

pub fn expert_policy(state: &DialogueState, actions: &ActionSet) -> usize {
    let a = expert_action(state);
    actions.id_of(&a).expect("expert actions are members of the action set")
}
