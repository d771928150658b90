//! Templated utterance rendering with synonym noise.

use std::collections::{BTreeSet, HashMap};

use rand::seq::IndexedRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::action::{ActType, SystemAction};
use super::schema::SchemaSet;
use super::state::SlotValue;
use super::user::UserAct;
use crate::error::{Error, Result};

pub const MAX_UTTERANCE_LEN: usize = 24;
pub const SYNONYM_RATE: f64 = 0.2;
pub const PAD: u32 = 0;
pub const SEP: u32 = 1;

/// Token-id sequence, nonempty and at most [`MAX_UTTERANCE_LEN`] long.
pub type Utterance = Vec<u32>;

// Templates: `D` is the domain word, `S` the slot list, `V` the
// slot/value list. The first token of every system template is unique to
// its act type.
const INFORM: [&str; 3] = ["here is the D V", "sure the D has V", "its D V"];
const REQUEST: [&str; 3] = [
    "what S would you like for the D",
    "which S for the D",
    "do you have a S in mind for the D",
];
const OFFER: [&str; 3] = ["i found a D that matches", "how about this D", "there is a D that fits"];
const BOOK: [&str; 3] = [
    "booked the D for you",
    "done the D is reserved",
    "your D reservation is confirmed",
];
const REQMORE: [&str; 3] = [
    "anything else for you today",
    "can i help with something else",
    "need anything more",
];
const BYE: [&str; 3] = [
    "goodbye and have a nice day",
    "bye for now",
    "thank you for calling goodbye",
];

const USER_INFORM: [&str; 3] = ["i want a D with V", "looking for a D V", "the D should have V"];
const USER_REQUEST: [&str; 3] = [
    "what is the S of the D",
    "tell me the D S",
    "could i get the S for the D",
];
const USER_BOOK: [&str; 3] = ["please book the D", "book the D please", "reserve the D for me"];
const USER_THANKS: [&str; 3] = ["thanks", "great thanks", "ok cool"];
const USER_FINISHED: [&str; 3] = ["that is all", "nothing else", "all set"];

fn synonyms(word: &str) -> &'static [&'static str] {
    match word {
        "restaurant" => &["eatery", "diner"],
        "hotel" => &["lodging", "inn"],
        "attraction" => &["sight", "venue"],
        "food" => &["cuisine"],
        "area" => &["part", "district"],
        "pricerange" => &["price", "budget"],
        "day" => &["date"],
        "stars" => &["rating"],
        "type" => &["kind", "category"],
        "address" => &["location"],
        "phone" => &["number", "telephone"],
        "postcode" => &["zip"],
        "parking" => &["carpark"],
        "internet" => &["wifi"],
        "fee" => &["cost"],
        _ => &[],
    }
}

fn system_templates(act: ActType) -> &'static [&'static str; 3] {
    match act {
        ActType::Inform => &INFORM,
        ActType::Request => &REQUEST,
        ActType::Offer => &OFFER,
        ActType::Book => &BOOK,
        ActType::Reqmore => &REQMORE,
        ActType::Bye => &BYE,
    }
}

/// Token inventory built from the schema and templates; ids are stable for
/// a fixed schema set.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocab {
    tokens: Vec<String>,
    #[serde(skip)]
    index: HashMap<String, u32>,
}

impl Vocab {
    pub fn build(schemas: &SchemaSet) -> Self {
        let mut words = BTreeSet::new();
        let all = INFORM
            .iter()
            .chain(&REQUEST)
            .chain(&OFFER)
            .chain(&BOOK)
            .chain(&REQMORE)
            .chain(&BYE)
            .chain(&USER_INFORM)
            .chain(&USER_REQUEST)
            .chain(&USER_BOOK)
            .chain(&USER_THANKS)
            .chain(&USER_FINISHED);
        for t in all {
            for w in t.split_whitespace().filter(|w| !matches!(*w, "D" | "S" | "V")) {
                words.insert(w.to_string());
            }
        }
        words.extend(["and", "any", "is"].map(String::from));
        let push_content = |w: &str, words: &mut BTreeSet<String>| {
            words.insert(w.to_string());
            words.extend(synonyms(w).iter().map(|s| s.to_string()));
        };
        for d in &schemas.domains {
            push_content(&d.name, &mut words);
            for s in &d.informable {
                push_content(&s.name, &mut words);
                words.extend(s.values.iter().cloned());
            }
            for r in &d.requestable {
                push_content(r, &mut words);
                words.insert(format!("{r}_value"));
            }
        }
        let tokens: Vec<String> = ["<pad>", "<sep>"].iter().map(|s| s.to_string()).chain(words).collect();
        Self::from_tokens(tokens)
    }

    pub fn from_tokens(tokens: Vec<String>) -> Self {
        let index = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i as u32)).collect();
        Vocab { tokens, index }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<u32> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: u32) -> &str {
        &self.tokens[id as usize]
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn encode(&self, words: &[String]) -> Result<Utterance> {
        words
            .iter()
            .map(|w| {
                self.id(w)
                    .ok_or_else(|| Error::State(format!("token {w:?} not in vocabulary")))
            })
            .collect()
    }

    pub fn decode(&self, ids: &[u32]) -> String {
        ids.iter().map(|&i| self.token(i)).collect::<Vec<_>>().join(" ")
    }

    /// Checks an utterance is nonempty, short enough and in range.
    pub fn check(&self, u: &[u32]) -> Result<()> {
        if u.is_empty() || u.len() > MAX_UTTERANCE_LEN {
            return Err(Error::State(format!(
                "utterance length {} outside 1..={MAX_UTTERANCE_LEN}",
                u.len()
            )));
        }
        if let Some(&bad) = u.iter().find(|&&t| t as usize >= self.len()) {
            return Err(Error::State(format!(
                "token id {bad} outside vocabulary of {}",
                self.len()
            )));
        }
        Ok(())
    }
}

fn noisy(word: &str, rng: &mut impl Rng) -> String {
    let syn = synonyms(word);
    if !syn.is_empty() && rng.random_bool(SYNONYM_RATE) {
        syn.choose(rng).expect("nonempty").to_string()
    } else {
        word.to_string()
    }
}

fn fill(template: &str, d: &[String], s: &[String], v: &[String]) -> Vec<String> {
    let mut out = Vec::new();
    for w in template.split_whitespace() {
        match w {
            "D" => out.extend_from_slice(d),
            "S" => out.extend_from_slice(s),
            "V" => out.extend_from_slice(v),
            _ => out.push(w.to_string()),
        }
    }
    out
}

fn join_and(parts: Vec<Vec<String>>) -> Vec<String> {
    let mut out = Vec::new();
    for (i, p) in parts.into_iter().enumerate() {
        if i > 0 {
            out.push("and".into());
        }
        out.extend(p);
    }
    out
}

/// Renders a system action as words.
pub fn render_system_words(schemas: &SchemaSet, action: &SystemAction, rng: &mut impl Rng) -> Vec<String> {
    let template = *system_templates(action.act).choose(rng).expect("templates");
    let Some(di) = action.domain else {
        return fill(template, &[], &[], &[]);
    };
    let dom = &schemas.domains[di];
    let d = vec![noisy(&dom.name, rng)];
    let (s, v) = match action.act {
        ActType::Inform => {
            let parts = action
                .slots
                .iter()
                .map(|&r| {
                    let name = &dom.requestable[r];
                    vec![noisy(name, rng), "is".into(), format!("{name}_value")]
                })
                .collect();
            (vec![], join_and(parts))
        }
        ActType::Request => {
            let parts = action
                .slots
                .iter()
                .map(|&c| vec![noisy(&dom.informable[c].name, rng)])
                .collect();
            (join_and(parts), vec![])
        }
        _ => (vec![], vec![]),
    };
    fill(template, &d, &s, &v)
}

/// Renders a user move; multiple acts are joined with "and".
pub fn render_user_words(schemas: &SchemaSet, acts: &[UserAct], rng: &mut impl Rng) -> Vec<String> {
    let mut parts: Vec<Vec<String>> = Vec::new();
    // consecutive informs on one domain share a single template
    let mut i = 0;
    while i < acts.len() {
        match &acts[i] {
            UserAct::Inform { domain, .. } => {
                let dom = &schemas.domains[*domain];
                let mut vals = Vec::new();
                while let Some(UserAct::Inform {
                    domain: d2,
                    slot,
                    value,
                }) = acts.get(i)
                {
                    if d2 != domain {
                        break;
                    }
                    let slot_def = &dom.informable[*slot];
                    vals.push(match value {
                        SlotValue::Value(v) => vec![slot_def.values[*v].clone(), noisy(&slot_def.name, rng)],
                        SlotValue::DontCare => vec!["any".into(), noisy(&slot_def.name, rng)],
                    });
                    i += 1;
                }
                let t = USER_INFORM.choose(rng).expect("templates");
                parts.push(fill(t, &[noisy(&dom.name, rng)], &[], &join_and(vals)));
                continue;
            }
            UserAct::Request { domain, slots } => {
                let dom = &schemas.domains[*domain];
                let s = join_and(slots.iter().map(|&r| vec![noisy(&dom.requestable[r], rng)]).collect());
                let t = USER_REQUEST.choose(rng).expect("templates");
                parts.push(fill(t, &[noisy(&dom.name, rng)], &s, &[]));
            }
            UserAct::WantBook { domain } => {
                let t = USER_BOOK.choose(rng).expect("templates");
                parts.push(fill(t, &[noisy(&schemas.domains[*domain].name, rng)], &[], &[]));
            }
            UserAct::Thanks => parts.push(fill(USER_THANKS.choose(rng).expect("templates"), &[], &[], &[])),
            UserAct::Finished => parts.push(fill(USER_FINISHED.choose(rng).expect("templates"), &[], &[], &[])),
        }
        i += 1;
    }
    if parts.is_empty() {
        parts.push(vec!["ok".into()]);
    }
    join_and(parts)
}

fn finish(vocab: &Vocab, mut words: Vec<String>) -> Result<Utterance> {
    words.truncate(MAX_UTTERANCE_LEN);
    vocab.encode(&words)
}

pub fn render_system(
    vocab: &Vocab,
    schemas: &SchemaSet,
    action: &SystemAction,
    rng: &mut impl Rng,
) -> Result<Utterance> {
    finish(vocab, render_system_words(schemas, action, rng))
}

pub fn render_user(vocab: &Vocab, schemas: &SchemaSet, acts: &[UserAct], rng: &mut impl Rng) -> Result<Utterance> {
    finish(vocab, render_user_words(schemas, acts, rng))
}
