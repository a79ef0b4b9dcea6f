use alloc::collections::BTreeSet;
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use crate::error::{Error, Result};

/// Ordered set of predictable labels.
///
/// Label indices are `0..len()`. The start symbol is not a label; it is
/// addressed by [`Tagset::start_id`], which equals `len()`, matching the extra
/// row of a lattice's transition table.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Tagset {
    labels: Vec<String>,
}

impl Tagset {
    pub fn new<S: Into<String>>(labels: impl IntoIterator<Item = S>) -> Result<Self> {
        let labels: Vec<String> = labels.into_iter().map(Into::into).collect();
        if labels.is_empty() {
            return Err(Error::Tagset("tagset must contain at least one label".into()));
        }
        let mut seen = BTreeSet::new();
        for l in &labels {
            if l.is_empty() {
                return Err(Error::Tagset("empty label name".into()));
            }
            if !seen.insert(l.as_str()) {
                return Err(Error::Tagset(format!("duplicate label {l:?}")));
            }
        }
        Ok(Tagset { labels })
    }

    /// Sorted, deduplicated tagset over every label seen.
    pub fn from_observed<'a>(labels: impl IntoIterator<Item = &'a str>) -> Result<Self> {
        let set: BTreeSet<&str> = labels.into_iter().collect();
        Tagset::new(set)
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn start_id(&self) -> usize {
        self.labels.len()
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn name(&self, id: usize) -> Option<&str> {
        self.labels.get(id).map(String::as_str)
    }

    pub fn id(&self, name: &str) -> Option<usize> {
        self.labels.iter().position(|l| l == name)
    }

    pub fn encode(&self, names: &[impl AsRef<str>]) -> Result<Vec<usize>> {
        names
            .iter()
            .map(|n| {
                self.id(n.as_ref())
                    .ok_or_else(|| Error::Tagset(format!("unknown label {:?}", n.as_ref())))
            })
            .collect()
    }

    pub fn decode(&self, ids: &[usize]) -> Result<Vec<&str>> {
        ids.iter()
            .map(|&i| {
                self.name(i).ok_or(Error::IndexOutOfRange {
                    what: "label",
                    index: i,
                    limit: self.len(),
                })
            })
            .collect()
    }
}
