//! Partition of tensor names into parameter groups by longest matching prefix.

use std::collections::{BTreeMap, HashSet};
use std::fmt;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

use crate::tensorstore::Checkpoint;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum GroupError {
    #[error("invalid group spec: {0}")]
    InvalidSpec(String),
    #[error("unmatched: {0}")]
    Unmatched(String),
    #[error("ambiguous: {name} matches prefixes of equal length in groups {first:?} and {second:?}")]
    Ambiguous {
        name: String,
        first: String,
        second: String,
    },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Group {
    pub id: String,
    pub prefixes: Vec<String>,
}

/// What to do with names that match no prefix.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub enum UnmatchedPolicy {
    #[default]
    Error,
    DefaultGroup(String),
}

impl fmt::Display for UnmatchedPolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            UnmatchedPolicy::Error => f.write_str("error"),
            UnmatchedPolicy::DefaultGroup(id) => write!(f, "default:{id}"),
        }
    }
}

impl Serialize for UnmatchedPolicy {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for UnmatchedPolicy {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        if s == "error" {
            Ok(UnmatchedPolicy::Error)
        } else if let Some(id) = s.strip_prefix("default:") {
            Ok(UnmatchedPolicy::DefaultGroup(id.to_string()))
        } else {
            Err(serde::de::Error::custom(format!(
                "unmatched policy must be \"error\" or \"default:<id>\", got {s:?}"
            )))
        }
    }
}

/// Ordered groups of name prefixes.
///
/// JSON form: `{"groups":[{"id":..,"prefixes":[..]}], "unmatched":"error"|"default:<id>"}`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroupSpec {
    pub groups: Vec<Group>,
    #[serde(default)]
    pub unmatched: UnmatchedPolicy,
}

impl GroupSpec {
    pub fn new(groups: Vec<Group>, unmatched: UnmatchedPolicy) -> Result<Self, GroupError> {
        let spec = Self { groups, unmatched };
        spec.validate()?;
        Ok(spec)
    }

    /// Convenience constructor: one prefix per group, unmatched names are an error.
    pub fn from_prefixes<'a>(pairs: impl IntoIterator<Item = (&'a str, &'a str)>) -> Result<Self, GroupError> {
        Self::new(
            pairs
                .into_iter()
                .map(|(id, prefix)| Group {
                    id: id.to_string(),
                    prefixes: vec![prefix.to_string()],
                })
                .collect(),
            UnmatchedPolicy::Error,
        )
    }

    pub fn validate(&self) -> Result<(), GroupError> {
        let mut ids = HashSet::new();
        for g in &self.groups {
            if g.id.is_empty() {
                return Err(GroupError::InvalidSpec("empty group id".into()));
            }
            if !ids.insert(g.id.as_str()) {
                return Err(GroupError::InvalidSpec(format!("duplicate group id {:?}", g.id)));
            }
            if g.prefixes.iter().any(String::is_empty) {
                return Err(GroupError::InvalidSpec(format!(
                    "group {:?} has an empty prefix",
                    g.id
                )));
            }
        }
        if let UnmatchedPolicy::DefaultGroup(id) = &self.unmatched {
            if !ids.contains(id.as_str()) {
                return Err(GroupError::InvalidSpec(format!(
                    "default group {id:?} is not declared"
                )));
            }
        }
        Ok(())
    }

    pub fn group_ids(&self) -> impl Iterator<Item = &str> {
        self.groups.iter().map(|g| g.id.as_str())
    }

    pub fn contains_group(&self, id: &str) -> bool {
        self.groups.iter().any(|g| g.id == id)
    }

    /// Resolves a single name under the longest-prefix rule.
    pub fn resolve(&self, name: &str) -> Result<&str, GroupError> {
        let matches: Vec<(usize, &str)> = self
            .groups
            .iter()
            .filter_map(|g| {
                g.prefixes
                    .iter()
                    .filter(|p| name.starts_with(p.as_str()))
                    .map(String::len)
                    .max()
                    .map(|len| (len, g.id.as_str()))
            })
            .collect();
        let Some(longest) = matches.iter().map(|(len, _)| *len).max() else {
            return match &self.unmatched {
                UnmatchedPolicy::Error => Err(GroupError::Unmatched(name.to_string())),
                UnmatchedPolicy::DefaultGroup(id) => Ok(id.as_str()),
            };
        };
        let mut winners = matches.iter().filter(|(len, _)| *len == longest).map(|(_, id)| *id);
        let first = winners.next().expect("at least one match");
        if let Some(second) = winners.next() {
            return Err(GroupError::Ambiguous {
                name: name.to_string(),
                first: first.to_string(),
                second: second.to_string(),
            });
        }
        Ok(first)
    }
}

/// Total assignment of tensor names to group ids.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Partition {
    assignment: BTreeMap<String, String>,
}

impl Partition {
    pub fn group_of(&self, name: &str) -> Option<&str> {
        self.assignment.get(name).map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.assignment.len()
    }

    pub fn is_empty(&self) -> bool {
        self.assignment.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &str)> {
        self.assignment.iter().map(|(k, v)| (k.as_str(), v.as_str()))
    }

    /// Names per group, in lexicographic order.
    pub fn members(&self, group: &str) -> Vec<&str> {
        self.iter().filter(|(_, g)| *g == group).map(|(n, _)| n).collect()
    }
}

pub fn partition(ckpt: &Checkpoint, spec: &GroupSpec) -> Result<Partition, GroupError> {
    partition_names(ckpt.names(), spec)
}

pub fn partition_names<'a>(
    names: impl IntoIterator<Item = &'a str>,
    spec: &GroupSpec,
) -> Result<Partition, GroupError> {
    spec.validate()?;
    let assignment = names
        .into_iter()
        .map(|name| Ok((name.to_string(), spec.resolve(name)?.to_string())))
        .collect::<Result<_, GroupError>>()?;
    Ok(Partition { assignment })
}
