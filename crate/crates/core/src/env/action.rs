use std::collections::HashMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use super::schema::SchemaSet;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ActType {
    Inform,
    Request,
    Offer,
    Book,
    Reqmore,
    Bye,
}

impl ActType {
    pub const ALL: [ActType; 6] = [
        ActType::Inform,
        ActType::Request,
        ActType::Offer,
        ActType::Book,
        ActType::Reqmore,
        ActType::Bye,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ActType::Inform => "inform",
            ActType::Request => "request",
            ActType::Offer => "offer",
            ActType::Book => "book",
            ActType::Reqmore => "reqmore",
            ActType::Bye => "bye",
        }
    }
}

/// One element of the finite system action set.
///
/// `slots` index the domain's requestable slots for `Inform` and its
/// informable slots for `Request`; they are sorted and hold at most two.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SystemAction {
    pub act: ActType,
    pub domain: Option<usize>,
    pub slots: Vec<usize>,
}

impl SystemAction {
    pub fn new(act: ActType, domain: Option<usize>, slots: Vec<usize>) -> Self {
        SystemAction { act, domain, slots }
    }
}

/// The enumerated action set with stable integer ids.
#[derive(Clone, Debug)]
pub struct ActionSet {
    actions: Vec<SystemAction>,
    names: Vec<String>,
    index: HashMap<SystemAction, usize>,
}

fn pairs(n: usize) -> impl Iterator<Item = Vec<usize>> {
    (0..n).flat_map(move |i| (i + 1..n).map(move |j| vec![i, j]))
}

impl ActionSet {
    /// Per domain in schema order: single informs, paired informs, single
    /// requests, paired requests, offer, book (when bookable). Then the
    /// domain-free `reqmore` and `bye`.
    pub fn build(schemas: &SchemaSet) -> Self {
        let mut actions = Vec::new();
        for (d, dom) in schemas.domains.iter().enumerate() {
            let nr = dom.requestable.len();
            let ni = dom.informable.len();
            for r in 0..nr {
                actions.push(SystemAction::new(ActType::Inform, Some(d), vec![r]));
            }
            for p in pairs(nr) {
                actions.push(SystemAction::new(ActType::Inform, Some(d), p));
            }
            for c in 0..ni {
                actions.push(SystemAction::new(ActType::Request, Some(d), vec![c]));
            }
            for p in pairs(ni) {
                actions.push(SystemAction::new(ActType::Request, Some(d), p));
            }
            actions.push(SystemAction::new(ActType::Offer, Some(d), vec![]));
            if dom.bookable {
                actions.push(SystemAction::new(ActType::Book, Some(d), vec![]));
            }
        }
        actions.push(SystemAction::new(ActType::Reqmore, None, vec![]));
        actions.push(SystemAction::new(ActType::Bye, None, vec![]));

        let names = actions.iter().map(|a| describe(a, schemas)).collect();
        let index = actions.iter().cloned().enumerate().map(|(i, a)| (a, i)).collect();
        ActionSet { actions, names, index }
    }

    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }

    pub fn get(&self, id: usize) -> &SystemAction {
        &self.actions[id]
    }

    pub fn id_of(&self, action: &SystemAction) -> Option<usize> {
        self.index.get(action).copied()
    }

    pub fn name(&self, id: usize) -> &str {
        &self.names[id]
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, &SystemAction)> {
        self.actions.iter().enumerate()
    }
}

fn describe(a: &SystemAction, schemas: &SchemaSet) -> String {
    let Some(d) = a.domain else {
        return a.act.name().to_string();
    };
    let dom = &schemas.domains[d];
    let slot_names: Vec<&str> = a
        .slots
        .iter()
        .map(|&s| match a.act {
            ActType::Inform => dom.requestable[s].as_str(),
            _ => dom.informable[s].name.as_str(),
        })
        .collect();
    if slot_names.is_empty() {
        format!("{}({})", a.act.name(), dom.name)
    } else {
        format!("{}({};{})", a.act.name(), dom.name, slot_names.join(","))
    }
}

impl fmt::Display for ActType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}
