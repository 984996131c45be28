//! Dot-separated key paths and their array-index normalization.

use std::collections::BTreeSet;
use std::fmt;

use serde_json::Value;

pub fn is_index(segment: &str) -> bool {
    !segment.is_empty() && segment.bytes().all(|b| b.is_ascii_digit())
}

/// Splits a dot-path, dropping numeric (array index) segments.
pub fn normalized_segments(path: &str) -> Vec<&str> {
    path.split('.').filter(|s| !is_index(s)).collect()
}

pub fn normalize(path: &str) -> String {
    normalized_segments(path).join(".")
}

pub fn join(prefix: &str, key: &str) -> String {
    if prefix.is_empty() {
        key.to_string()
    } else {
        format!("{prefix}.{key}")
    }
}

/// One step in a location inside a JSON tree.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Segment {
    Key(String),
    Index(usize),
}

/// Exact location of a node, including array indices.
#[derive(Debug, Clone, Default, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Location(pub Vec<Segment>);

impl Location {
    pub fn root() -> Self {
        Location(Vec::new())
    }

    pub fn is_root(&self) -> bool {
        self.0.is_empty()
    }

    pub fn child_key(&self, key: &str) -> Self {
        let mut v = self.0.clone();
        v.push(Segment::Key(key.to_string()));
        Location(v)
    }

    pub fn child_index(&self, i: usize) -> Self {
        let mut v = self.0.clone();
        v.push(Segment::Index(i));
        Location(v)
    }

    pub fn is_prefix_of(&self, other: &Location) -> bool {
        other.0.len() >= self.0.len() && other.0[..self.0.len()] == self.0[..]
    }

    /// Key names only, indices dropped.
    pub fn names(&self) -> Vec<&str> {
        self.0
            .iter()
            .filter_map(|s| match s {
                Segment::Key(k) => Some(k.as_str()),
                Segment::Index(_) => None,
            })
            .collect()
    }

    /// Normalized dot-path, e.g. `trade.tradeIdentifier.assignedIdentifier`.
    pub fn dot_path(&self) -> String {
        self.names().join(".")
    }

    /// Last key name at or above this location.
    pub fn last_key(&self) -> Option<&str> {
        self.names().last().copied()
    }

    pub fn get<'v>(&self, root: &'v Value) -> Option<&'v Value> {
        self.0.iter().try_fold(root, |v, seg| match seg {
            Segment::Key(k) => v.get(k.as_str()),
            Segment::Index(i) => v.get(*i),
        })
    }

    pub fn get_mut<'v>(&self, root: &'v mut Value) -> Option<&'v mut Value> {
        self.0.iter().try_fold(root, |v, seg| match seg {
            Segment::Key(k) => v.get_mut(k.as_str()),
            Segment::Index(i) => v.get_mut(*i),
        })
    }
}

impl fmt::Display for Location {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.0.is_empty() {
            return f.write_str("$");
        }
        let parts: Vec<String> = self
            .0
            .iter()
            .map(|s| match s {
                Segment::Key(k) => k.clone(),
                Segment::Index(i) => i.to_string(),
            })
            .collect();
        f.write_str(&parts.join("."))
    }
}

/// Leaf paths of a JSON value with array indices removed.
///
/// Scalars (including `null`) are leaves. Empty objects and arrays contribute
/// nothing.
pub fn flatten_leaves(value: &Value) -> BTreeSet<String> {
    fn walk(v: &Value, prefix: &str, out: &mut BTreeSet<String>) {
        match v {
            Value::Object(map) => {
                for (k, child) in map {
                    walk(child, &join(prefix, k), out);
                }
            }
            Value::Array(items) => {
                for child in items {
                    walk(child, prefix, out);
                }
            }
            _ => {
                if !prefix.is_empty() {
                    out.insert(prefix.to_string());
                }
            }
        }
    }
    let mut out = BTreeSet::new();
    walk(value, "", &mut out);
    out
}

/// Every key occurrence in a value as `(normalized path, value)`, in document order.
pub fn key_occurrences(value: &Value) -> Vec<(String, &Value)> {
    fn walk<'v>(v: &'v Value, prefix: &str, out: &mut Vec<(String, &'v Value)>) {
        match v {
            Value::Object(map) => {
                for (k, child) in map {
                    let path = join(prefix, k);
                    out.push((path.clone(), child));
                    walk(child, &path, out);
                }
            }
            Value::Array(items) => {
                for child in items {
                    walk(child, prefix, out);
                }
            }
            _ => {}
        }
    }
    let mut out = Vec::new();
    walk(value, "", &mut out);
    out
}
