//! User goals, dialogue state, and the fixed-width state encoding.
//!
//! State vector layout, per domain in schema order:
//!
//! | bits                  | meaning                                        |
//! |-----------------------|------------------------------------------------|
//! | 1                     | `active`: the user has opened this domain      |
//! | 1                     | `done`: the user has moved past this domain    |
//! | one per informable    | constraint stated (a value or "don't care")    |
//! | two per requestable   | request pending, request satisfied             |
//! | 1                     | entity offered                                 |
//! | 2 (bookable only)     | booking wanted, booked                         |
//!
//! followed by one global `user_done` bit. The turn counter is tracked but
//! not encoded.

use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::schema::SchemaSet;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DomainGoal {
    pub domain: usize,
    /// `(informable slot, value index)`, sorted by slot.
    pub constraints: Vec<(usize, usize)>,
    /// Requestable slot indices, sorted.
    pub requests: Vec<usize>,
    pub book: bool,
}

impl DomainGoal {
    pub fn constraint(&self, slot: usize) -> Option<usize> {
        self.constraints.iter().find(|(s, _)| *s == slot).map(|(_, v)| *v)
    }

    /// Entities a perfect system provides: the offer's matched constraints,
    /// every request, and the booking when wanted.
    pub fn required_entities(&self) -> usize {
        self.constraints.len() + self.requests.len() + usize::from(self.book)
    }
}

/// Domains in the order the user will raise them.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct UserGoal {
    pub domains: Vec<DomainGoal>,
}

impl UserGoal {
    pub fn for_domain(&self, d: usize) -> Option<&DomainGoal> {
        self.domains.iter().find(|g| g.domain == d)
    }

    pub fn required_entities(&self) -> usize {
        self.domains.iter().map(DomainGoal::required_entities).sum()
    }

    pub fn validate(&self, schemas: &SchemaSet) -> Result<()> {
        if self.domains.is_empty() || self.domains.len() > 3 {
            return Err(Error::State(format!("goal spans {} domains", self.domains.len())));
        }
        for g in &self.domains {
            let dom = schemas
                .domains
                .get(g.domain)
                .ok_or_else(|| Error::State(format!("goal domain {} out of range", g.domain)))?;
            if g.constraints
                .iter()
                .any(|&(s, v)| s >= dom.informable.len() || v >= dom.informable[s].values.len())
            {
                return Err(Error::State("goal constraint out of range".into()));
            }
            if g.requests.iter().any(|&r| r >= dom.requestable.len()) {
                return Err(Error::State("goal request out of range".into()));
            }
            if g.book && !dom.bookable {
                return Err(Error::State(format!("domain {} is not bookable", dom.name)));
            }
        }
        let constraints: usize = self.domains.iter().map(|g| g.constraints.len()).sum();
        let requests: usize = self.domains.iter().map(|g| g.requests.len()).sum();
        if constraints == 0 || requests == 0 {
            return Err(Error::State("goal needs a constraint and a request".into()));
        }
        Ok(())
    }
}

/// Draws a goal over 1–3 domains. Each chosen domain gets a nonempty random
/// subset of constraints with random values, 1–3 requests and, when
/// bookable, a fair-coin booking wish.
pub fn sample_goal(schemas: &SchemaSet, rng: &mut impl Rng) -> UserGoal {
    let nd = schemas.domains.len();
    let count = rng.random_range(1..=nd.min(3));
    let chosen = sample(rng, nd, count).into_vec();
    let domains = chosen
        .into_iter()
        .map(|d| {
            let dom = &schemas.domains[d];
            let ni = dom.informable.len();
            let nc = rng.random_range(1..=ni);
            let mut slots = sample(rng, ni, nc).into_vec();
            slots.sort_unstable();
            let constraints = slots
                .into_iter()
                .map(|s| (s, rng.random_range(0..dom.informable[s].values.len())))
                .collect();
            let nr = dom.requestable.len();
            let k = rng.random_range(1..=nr.min(3));
            let mut requests = sample(rng, nr, k).into_vec();
            requests.sort_unstable();
            let book = dom.bookable && rng.random_bool(0.5);
            DomainGoal {
                domain: d,
                constraints,
                requests,
                book,
            }
        })
        .collect();
    UserGoal { domains }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum SlotValue {
    Value(usize),
    DontCare,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum RequestStatus {
    #[default]
    None,
    Pending,
    Satisfied,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DomainStatus {
    pub active: bool,
    pub done: bool,
    pub constraints: Vec<Option<SlotValue>>,
    pub requests: Vec<RequestStatus>,
    pub offered: bool,
    pub book_wanted: bool,
    pub booked: bool,
}

impl DomainStatus {
    pub fn all_stated(&self) -> bool {
        self.constraints.iter().all(Option::is_some)
    }

    pub fn first_pending(&self, k: usize) -> Vec<usize> {
        (0..self.requests.len())
            .filter(|&r| self.requests[r] == RequestStatus::Pending)
            .take(k)
            .collect()
    }

    pub fn first_unstated(&self, k: usize) -> Vec<usize> {
        (0..self.constraints.len())
            .filter(|&c| self.constraints[c].is_none())
            .take(k)
            .collect()
    }

    /// Offered, no pending request, and booked if a booking was wanted.
    pub fn complete(&self) -> bool {
        self.offered && !self.requests.contains(&RequestStatus::Pending) && (!self.book_wanted || self.booked)
    }
}

/// System-provided entity tally, the basis of Entity-F1.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct EntityCounts {
    pub provided: usize,
    pub correct: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DialogueState {
    pub domains: Vec<DomainStatus>,
    pub user_done: bool,
    pub turn: usize,
    pub done: bool,
    pub entities: EntityCounts,
}

impl DialogueState {
    pub fn initial(schemas: &SchemaSet) -> Self {
        let domains = schemas
            .domains
            .iter()
            .map(|d| DomainStatus {
                active: false,
                done: false,
                constraints: vec![None; d.informable.len()],
                requests: vec![RequestStatus::None; d.requestable.len()],
                offered: false,
                book_wanted: false,
                booked: false,
            })
            .collect();
        DialogueState {
            domains,
            user_done: false,
            turn: 0,
            done: false,
            entities: EntityCounts::default(),
        }
    }

    /// Lowest-index domain that is open and not yet finished.
    pub fn focus(&self) -> Option<usize> {
        self.domains.iter().position(|d| d.active && !d.done)
    }

    pub fn encode(&self, schemas: &SchemaSet) -> Vec<f64> {
        let mut v = Vec::with_capacity(state_width(schemas));
        let b = |x: bool| if x { 1.0 } else { 0.0 };
        for (st, dom) in self.domains.iter().zip(&schemas.domains) {
            v.push(b(st.active));
            v.push(b(st.done));
            v.extend(st.constraints.iter().map(|c| b(c.is_some())));
            for r in &st.requests {
                v.push(b(*r == RequestStatus::Pending));
                v.push(b(*r == RequestStatus::Satisfied));
            }
            v.push(b(st.offered));
            if dom.bookable {
                v.push(b(st.book_wanted));
                v.push(b(st.booked));
            }
        }
        v.push(b(self.user_done));
        v
    }
}

pub fn state_width(schemas: &SchemaSet) -> usize {
    schemas
        .domains
        .iter()
        .map(|d| 3 + d.informable.len() + 2 * d.requestable.len() + if d.bookable { 2 } else { 0 })
        .sum::<usize>()
        + 1
}

/// Ordered field names of the state vector.
pub fn state_layout(schemas: &SchemaSet) -> Vec<String> {
    let mut names = Vec::new();
    for d in &schemas.domains {
        names.push(format!("{}.active", d.name));
        names.push(format!("{}.done", d.name));
        for s in &d.informable {
            names.push(format!("{}.{}.stated", d.name, s.name));
        }
        for r in &d.requestable {
            names.push(format!("{}.{}.pending", d.name, r));
            names.push(format!("{}.{}.satisfied", d.name, r));
        }
        names.push(format!("{}.offered", d.name));
        if d.bookable {
            names.push(format!("{}.book_wanted", d.name));
            names.push(format!("{}.booked", d.name));
        }
    }
    names.push("user_done".into());
    names
}

/// Success: every goal constraint acknowledged by an offer, every request
/// answered and every wanted booking made. Extra entities lower Entity-F1
/// but do not fail the dialogue.
pub fn is_success(goal: &UserGoal, state: &DialogueState) -> (bool, EntityCounts, usize) {
    let required = goal.required_entities();
    let counts = state.entities;
    let all_met = goal.domains.iter().all(|g| {
        let st = &state.domains[g.domain];
        st.offered
            && g.requests.iter().all(|&r| st.requests[r] == RequestStatus::Satisfied)
            && (!g.book || st.booked)
            && g.constraints.iter().all(|&(c, _)| st.constraints[c].is_some())
    });
    let success = all_met && counts.correct == required;
    (success, counts, required)
}

#[cfg(test)]
pub(crate) mod tests {
    use std::collections::HashSet;

    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::env::schema::{DomainSchema, InformableSlot, Preset, SCHEMA_VERSION};

    pub(crate) fn tiny_schema() -> SchemaSet {
        SchemaSet {
            version: SCHEMA_VERSION,
            name: "tiny".into(),
            domains: vec![DomainSchema {
                name: "restaurant".into(),
                informable: vec![InformableSlot {
                    name: "food".into(),
                    values: vec!["thai".into(), "indian".into(), "french".into(), "british".into()],
                }],
                requestable: vec!["phone".into()],
                bookable: false,
            }],
        }
    }

    #[test]
    fn only_option_goal() {
        let s = tiny_schema();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let g = sample_goal(&s, &mut rng);
        assert_eq!(g.domains.len(), 1);
        assert_eq!(g.domains[0].constraints.len(), 1);
        assert_eq!(g.domains[0].constraints[0].0, 0);
        assert_eq!(g.domains[0].requests, vec![0]);
        g.validate(&s).unwrap();
    }

    #[test]
    fn goal_sampling_is_deterministic() {
        let s = Preset::ThreeDomain.schemas();
        let a = sample_goal(&s, &mut ChaCha8Rng::seed_from_u64(42));
        let b = sample_goal(&s, &mut ChaCha8Rng::seed_from_u64(42));
        assert_eq!(a, b);
    }

    #[test]
    fn every_domain_appears_and_goals_valid() {
        for p in Preset::ALL {
            let s = p.schemas();
            let mut rng = ChaCha8Rng::seed_from_u64(7);
            let mut seen = HashSet::new();
            let mut counts = HashSet::new();
            for _ in 0..10_000 {
                let g = sample_goal(&s, &mut rng);
                g.validate(&s).unwrap();
                counts.insert(g.domains.len());
                for d in &g.domains {
                    seen.insert(d.domain);
                    let cs: HashSet<_> = d.constraints.iter().map(|c| c.0).collect();
                    assert_eq!(cs.len(), d.constraints.len());
                }
            }
            assert_eq!(seen.len(), s.domains.len());
            assert_eq!(counts.len(), s.domains.len().min(3));
        }
    }

    #[test]
    fn layout_matches_width() {
        for p in Preset::ALL {
            let s = p.schemas();
            let st = DialogueState::initial(&s);
            assert_eq!(st.encode(&s).len(), state_width(&s));
            assert_eq!(state_layout(&s).len(), state_width(&s));
        }
        assert_eq!(state_width(&Preset::TwoDomain.schemas()), 32);
    }
}
