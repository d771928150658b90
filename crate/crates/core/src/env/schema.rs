use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct InformableSlot {
    pub name: String,
    pub values: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DomainSchema {
    pub name: String,
    pub informable: Vec<InformableSlot>,
    pub requestable: Vec<String>,
    pub bookable: bool,
}

/// A versioned set of domains; the unit shipped as a preset.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SchemaSet {
    pub version: u32,
    pub name: String,
    pub domains: Vec<DomainSchema>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Preset {
    OneDomain,
    TwoDomain,
    ThreeDomain,
}

impl Preset {
    pub const ALL: [Preset; 3] = [Preset::OneDomain, Preset::TwoDomain, Preset::ThreeDomain];

    pub fn name(self) -> &'static str {
        match self {
            Preset::OneDomain => "one-domain",
            Preset::TwoDomain => "two-domain",
            Preset::ThreeDomain => "three-domain",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Preset::ALL
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown preset {s:?} (one-domain, two-domain, three-domain)")))
    }

    pub fn schemas(self) -> SchemaSet {
        let n = match self {
            Preset::OneDomain => 1,
            Preset::TwoDomain => 2,
            Preset::ThreeDomain => 3,
        };
        SchemaSet {
            version: SCHEMA_VERSION,
            name: self.name().to_string(),
            domains: [restaurant(), hotel(), attraction()].into_iter().take(n).collect(),
        }
    }
}

fn slot(name: &str, values: &[&str]) -> InformableSlot {
    InformableSlot {
        name: name.to_string(),
        values: values.iter().map(|v| v.to_string()).collect(),
    }
}

fn strings(xs: &[&str]) -> Vec<String> {
    xs.iter().map(|s| s.to_string()).collect()
}

fn restaurant() -> DomainSchema {
    DomainSchema {
        name: "restaurant".into(),
        informable: vec![
            slot("food", &["italian", "chinese", "indian", "british", "french", "thai"]),
            slot("area", &["north", "south", "east", "west", "centre"]),
            slot("pricerange", &["cheap", "moderate", "expensive", "luxury"]),
            slot("day", &["monday", "tuesday", "friday", "saturday", "sunday"]),
        ],
        requestable: strings(&["address", "phone", "postcode"]),
        bookable: true,
    }
}

fn hotel() -> DomainSchema {
    DomainSchema {
        name: "hotel".into(),
        informable: vec![
            slot("area", &["north", "south", "east", "west", "centre"]),
            slot("pricerange", &["cheap", "moderate", "expensive", "luxury"]),
            slot("stars", &["one", "two", "three", "four", "five"]),
        ],
        requestable: strings(&["address", "phone", "parking", "internet"]),
        bookable: true,
    }
}

fn attraction() -> DomainSchema {
    DomainSchema {
        name: "attraction".into(),
        informable: vec![
            slot("type", &["museum", "park", "theatre", "gallery", "college"]),
            slot("area", &["north", "south", "east", "west", "centre"]),
        ],
        requestable: strings(&["address", "phone", "fee"]),
        bookable: false,
    }
}

impl SchemaSet {
    pub fn validate(&self) -> Result<()> {
        if self.version != SCHEMA_VERSION {
            return Err(Error::Version {
                found: self.version,
                expected: SCHEMA_VERSION,
            });
        }
        if self.domains.is_empty() {
            return Err(Error::Config("schema set has no domains".into()));
        }
        let mut names = HashSet::new();
        for d in &self.domains {
            if !names.insert(&d.name) {
                return Err(Error::Config(format!("duplicate domain {}", d.name)));
            }
            if d.informable.is_empty() || d.requestable.is_empty() {
                return Err(Error::Config(format!(
                    "domain {} needs at least one informable and one requestable slot",
                    d.name
                )));
            }
            let mut slots = HashSet::new();
            for s in d.informable.iter().map(|s| &s.name).chain(&d.requestable) {
                if !slots.insert(s) {
                    return Err(Error::Config(format!("slot {s} repeated in domain {}", d.name)));
                }
            }
            for s in &d.informable {
                if s.values.is_empty() {
                    return Err(Error::Config(format!(
                        "slot {}.{} has an empty vocabulary",
                        d.name, s.name
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let set: SchemaSet = serde_json::from_str(text)?;
        set.validate()?;
        Ok(set)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_validate_and_round_trip() {
        for p in Preset::ALL {
            let s = p.schemas();
            s.validate().unwrap();
            assert!(s
                .domains
                .iter()
                .flat_map(|d| &d.informable)
                .all(|i| (4..=8).contains(&i.values.len())));
            assert_eq!(SchemaSet::from_json(&s.to_json().unwrap()).unwrap(), s);
            assert_eq!(Preset::parse(p.name()).unwrap(), p);
        }
    }

    #[test]
    fn wrong_version_rejected() {
        let mut s = Preset::OneDomain.schemas();
        s.version = 7;
        let err = SchemaSet::from_json(&s.to_json().unwrap()).unwrap_err();
        assert!(matches!(err, Error::Version { found: 7, .. }));
    }

    #[test]
    fn repeated_slot_rejected() {
        let mut s = Preset::OneDomain.schemas();
        s.domains[0].requestable.push("food".into());
        assert!(s.validate().is_err());
    }
}
