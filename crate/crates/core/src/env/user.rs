//! Rule-based user simulator operating on dialogue acts.

use serde::{Deserialize, Serialize};

use super::action::{ActType, SystemAction};
use super::schema::SchemaSet;
use super::state::{DialogueState, RequestStatus, SlotValue, UserGoal};
use crate::error::{Error, Result};

/// One user dialogue act; a user turn carries one or more of these.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum UserAct {
    Inform {
        domain: usize,
        slot: usize,
        value: SlotValue,
    },
    Request {
        domain: usize,
        slots: Vec<usize>,
    },
    WantBook {
        domain: usize,
    },
    Thanks,
    Finished,
}

pub type UserMove = Vec<UserAct>;

/// Outcome of one user turn.
#[derive(Clone, Debug, PartialEq)]
pub struct UserTurn {
    pub acts: UserMove,
    pub state: DialogueState,
    pub done: bool,
}

fn state_constraints(state: &mut DialogueState, goal: &UserGoal, d: usize, slots: &[usize], acts: &mut UserMove) {
    let Some(g) = goal.for_domain(d) else { return };
    for &c in slots {
        if state.domains[d].constraints[c].is_some() {
            continue;
        }
        let value = g.constraint(c).map_or(SlotValue::DontCare, SlotValue::Value);
        state.domains[d].constraints[c] = Some(value);
        acts.push(UserAct::Inform {
            domain: d,
            slot: c,
            value,
        });
    }
    if !state.domains[d].done {
        state.domains[d].active = true;
    }
}

/// Opens the next goal domain not yet raised, stating up to two constraints.
fn open_next_domain(state: &mut DialogueState, goal: &UserGoal, acts: &mut UserMove) -> bool {
    let Some(g) = goal
        .domains
        .iter()
        .find(|g| !state.domains[g.domain].active && !state.domains[g.domain].done)
    else {
        return false;
    };
    let slots: Vec<usize> = g.constraints.iter().take(2).map(|c| c.0).collect();
    let d = g.domain;
    state_constraints(state, goal, d, &slots, acts);
    state.domains[d].active = true;
    true
}

/// The user's first utterance, before any system turn.
pub fn user_opening(schemas: &SchemaSet, goal: &UserGoal) -> (UserMove, DialogueState) {
    let mut state = DialogueState::initial(schemas);
    let mut acts = Vec::new();
    open_next_domain(&mut state, goal, &mut acts);
    (acts, state)
}

/// Applies a system act and the user's response.
///
/// Rules, by system act:
/// * `inform(d, r..)`: each slot is one provided entity; a pending request
///   on an offered domain becomes satisfied and counts as correct.
/// * `request(d, c..)`: on a goal domain the user states each unstated slot
///   (goal value or "don't care").
/// * `offer(d)`: valid on an active goal domain with every slot stated and
///   no prior offer; the user then asks all goal requests and, if wanted,
///   a booking. Provides one entity per goal constraint (one when `d` is
///   not in the goal).
/// * `book(d)`: valid after an offer when booking is wanted.
/// * `reqmore`: completed open domains are closed; the user raises the next
///   goal domain or, when none remains, declares itself finished.
/// * `bye`: ends the dialogue once the user is finished.
///
/// When the system act changes nothing, the user volunteers the next
/// unstated goal constraint of the focus domain, or repeats a pending
/// request. The dialogue ends at `max_turns` regardless.
pub fn user_step(goal: &UserGoal, state: &DialogueState, action: &SystemAction, max_turns: usize) -> Result<UserTurn> {
    if state.done {
        return Err(Error::State("user step after the dialogue ended".into()));
    }
    let mut s = state.clone();
    s.turn += 1;
    let mut acts = Vec::new();
    let mut progressed = false;
    let mut ended = false;

    match action.act {
        ActType::Inform => {
            let d = action.domain.expect("inform carries a domain");
            for &r in &action.slots {
                s.entities.provided += 1;
                let st = &mut s.domains[d];
                if st.offered && st.requests[r] == RequestStatus::Pending {
                    st.requests[r] = RequestStatus::Satisfied;
                    s.entities.correct += 1;
                    progressed = true;
                }
            }
            if progressed {
                acts.push(UserAct::Thanks);
            }
        }
        ActType::Request => {
            let d = action.domain.expect("request carries a domain");
            if goal.for_domain(d).is_some() && !s.domains[d].done {
                let before = acts.len();
                state_constraints(&mut s, goal, d, &action.slots, &mut acts);
                progressed = acts.len() > before;
            }
        }
        ActType::Offer => {
            let d = action.domain.expect("offer carries a domain");
            let g = goal.for_domain(d);
            s.entities.provided += g.map_or(1, |g| g.constraints.len());
            let st = &s.domains[d];
            if let Some(g) = g {
                if st.active && !st.done && st.all_stated() && !st.offered {
                    let st = &mut s.domains[d];
                    st.offered = true;
                    for &r in &g.requests {
                        st.requests[r] = RequestStatus::Pending;
                    }
                    st.book_wanted = g.book;
                    s.entities.correct += g.constraints.len();
                    acts.push(UserAct::Request {
                        domain: d,
                        slots: g.requests.clone(),
                    });
                    if g.book {
                        acts.push(UserAct::WantBook { domain: d });
                    }
                    progressed = true;
                }
            }
        }
        ActType::Book => {
            let d = action.domain.expect("book carries a domain");
            s.entities.provided += 1;
            let st = &mut s.domains[d];
            if st.offered && st.book_wanted && !st.booked {
                st.booked = true;
                s.entities.correct += 1;
                acts.push(UserAct::Thanks);
                progressed = true;
            }
        }
        ActType::Reqmore => {
            let mut closed = false;
            for st in s.domains.iter_mut() {
                if st.active && !st.done && st.complete() {
                    st.done = true;
                    closed = true;
                }
            }
            if s.focus().is_none() && !s.user_done {
                if open_next_domain(&mut s, goal, &mut acts) {
                    progressed = true;
                } else {
                    s.user_done = true;
                    acts.push(UserAct::Finished);
                    progressed = true;
                }
            } else if closed {
                progressed = true;
            }
        }
        ActType::Bye => {
            if s.user_done {
                ended = true;
                progressed = true;
                acts.push(UserAct::Thanks);
            }
        }
    }

    if !progressed {
        volunteer(&mut s, goal, &mut acts);
    }

    let done = ended || s.turn >= max_turns;
    s.done = done;
    Ok(UserTurn { acts, state: s, done })
}

fn volunteer(s: &mut DialogueState, goal: &UserGoal, acts: &mut UserMove) {
    if let Some(d) = s.focus() {
        if let Some(g) = goal.for_domain(d) {
            if let Some(&(c, _)) = g
                .constraints
                .iter()
                .find(|(c, _)| s.domains[d].constraints[*c].is_none())
            {
                state_constraints(s, goal, d, &[c], acts);
                return;
            }
        }
        let pending = s.domains[d].first_pending(2);
        if !pending.is_empty() {
            acts.push(UserAct::Request {
                domain: d,
                slots: pending,
            });
            return;
        }
    }
    if s.user_done {
        acts.push(UserAct::Finished);
    } else {
        acts.push(UserAct::Thanks);
    }
}
