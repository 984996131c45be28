//! Minimal template derivation from a schema index and example instances.
//!
//! Example documents are flattened into a [`KeyPathSet`]; the schema is then
//! walked from the root, keeping only properties whose path is a prefix of
//! (or equal to) some example key. Object nodes carry the schema description
//! under an annotation key and leaves hold typed placeholders.

use std::collections::BTreeSet;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::error::{parse_json, read_to_string, Error, Result};
use crate::keypath;
use crate::schema::{PropertyDef, PropertyKind, ScalarType, SchemaIndex};

pub const DATE_PLACEHOLDER: &str = "YYYY-MM-DD";

/// True for a valid calendar date written as `YYYY-MM-DD`.
pub fn is_iso_date(s: &str) -> bool {
    s.len() == 10
        && s.bytes().enumerate().all(|(i, b)| if i == 4 || i == 7 { b == b'-' } else { b.is_ascii_digit() })
        && chrono::NaiveDate::parse_from_str(s, "%Y-%m-%d").is_ok()
}

/// Key under which an object node's schema description is stored.
pub const ANNOTATION_KEY: &str = "description";

/// Annotation key used when the object also has a data field named `description`.
pub const ALT_ANNOTATION_KEY: &str = "_template_description";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Placeholder {
    EmptyText,
    EmptyList,
    EmptyObject,
    Date,
    ZeroNumber,
    FalseBoolean,
}

impl Placeholder {
    pub fn for_scalar(ty: ScalarType) -> Self {
        match ty {
            ScalarType::String | ScalarType::Enum => Placeholder::EmptyText,
            ScalarType::Date => Placeholder::Date,
            ScalarType::Number | ScalarType::Integer => Placeholder::ZeroNumber,
            ScalarType::Boolean => Placeholder::FalseBoolean,
        }
    }

    pub fn value(self) -> Value {
        match self {
            Placeholder::EmptyText => Value::String(String::new()),
            Placeholder::EmptyList => Value::Array(Vec::new()),
            Placeholder::EmptyObject => Value::Object(Map::new()),
            Placeholder::Date => Value::String(DATE_PLACEHOLDER.to_string()),
            Placeholder::ZeroNumber => Value::from(0),
            Placeholder::FalseBoolean => Value::Bool(false),
        }
    }

    /// Recognizes a placeholder value. `0` and `false` only count when
    /// they are exactly the neutral values.
    pub fn classify(v: &Value) -> Option<Self> {
        match v {
            Value::String(s) if s.is_empty() => Some(Placeholder::EmptyText),
            Value::String(s) if s == DATE_PLACEHOLDER => Some(Placeholder::Date),
            Value::Array(a) if a.is_empty() => Some(Placeholder::EmptyList),
            Value::Object(o) if o.is_empty() => Some(Placeholder::EmptyObject),
            Value::Number(n) if n.as_f64() == Some(0.0) => Some(Placeholder::ZeroNumber),
            Value::Bool(false) => Some(Placeholder::FalseBoolean),
            _ => None,
        }
    }
}

/// The annotation key in use for an object node, if any.
///
/// When `_template_description` is present, `description` is a data field.
pub fn annotation_key(obj: &Map<String, Value>) -> Option<&'static str> {
    if obj.contains_key(ALT_ANNOTATION_KEY) {
        Some(ALT_ANNOTATION_KEY)
    } else if obj.contains_key(ANNOTATION_KEY) {
        Some(ANNOTATION_KEY)
    } else {
        None
    }
}

/// Data (non-annotation) entries of an object node, in order.
pub fn data_entries(obj: &Map<String, Value>) -> impl Iterator<Item = (&String, &Value)> {
    let ann = annotation_key(obj);
    obj.iter().filter(move |(k, _)| Some(k.as_str()) != ann)
}

/// Removes annotation keys everywhere in the tree.
pub fn strip_annotations(v: &Value) -> Value {
    match v {
        Value::Object(obj) => Value::Object(
            data_entries(obj)
                .map(|(k, c)| (k.clone(), strip_annotations(c)))
                .collect(),
        ),
        Value::Array(items) => Value::Array(items.iter().map(strip_annotations).collect()),
        other => other.clone(),
    }
}

/// Flattened leaf paths of the example documents (symbol K).
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct KeyPathSet {
    paths: BTreeSet<String>,
    source_count: usize,
}

impl KeyPathSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_paths<I, S>(paths: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let paths = paths
            .into_iter()
            .map(|p| keypath::normalize(p.as_ref()))
            .filter(|p| !p.is_empty())
            .collect();
        KeyPathSet { paths, source_count: 0 }
    }

    pub fn add_example(&mut self, example: &Value) {
        self.paths.extend(keypath::flatten_leaves(example));
        self.source_count += 1;
    }

    pub fn paths(&self) -> &BTreeSet<String> {
        &self.paths
    }

    pub fn source_count(&self) -> usize {
        self.source_count
    }

    pub fn len(&self) -> usize {
        self.paths.len()
    }

    pub fn is_empty(&self) -> bool {
        self.paths.is_empty()
    }

    pub fn contains(&self, path: &str) -> bool {
        self.paths.contains(path)
    }

    /// True iff `path` equals some key or is a proper prefix of one.
    pub fn covers(&self, path: &str) -> bool {
        if self.paths.contains(path) {
            return true;
        }
        let dotted = format!("{path}.");
        self.paths
            .range(dotted.clone()..)
            .next()
            .is_some_and(|k| k.starts_with(&dotted))
    }
}

/// Lists `.json` files directly or recursively under `dir`, sorted.
pub(crate) fn json_files(dir: &Path) -> Result<Vec<std::path::PathBuf>> {
    if !dir.is_dir() {
        return Err(Error::EmptyExampleDir(dir.to_path_buf()));
    }
    let mut files = Vec::new();
    for entry in walkdir::WalkDir::new(dir).sort_by_file_name() {
        let entry = entry.map_err(|e| Error::io(dir, e.into()))?;
        if entry.file_type().is_file() && entry.path().extension().and_then(|e| e.to_str()) == Some("json") {
            files.push(entry.into_path());
        }
    }
    Ok(files)
}

pub fn flatten_examples(example_dir: impl AsRef<Path>) -> Result<KeyPathSet> {
    let dir = example_dir.as_ref();
    let files = json_files(dir)?;
    if files.is_empty() {
        return Err(Error::EmptyExampleDir(dir.to_path_buf()));
    }
    let mut keys = KeyPathSet::new();
    for file in files {
        let text = read_to_string(&file)?;
        keys.add_example(&parse_json(&file, &text)?);
    }
    Ok(keys)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Template {
    pub contract_type: String,
    pub schema_root: String,
    #[serde(rename = "template")]
    pub tree: Value,
}

impl Template {
    pub fn to_pretty_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("template serializes")
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = read_to_string(path)?;
        let value = parse_json(path, &text)?;
        serde_json::from_value(value).map_err(|e| Error::MalformedDocument {
            file: path.to_path_buf(),
            offset: 0,
            message: e.to_string(),
        })
    }

    pub fn stats(&self) -> TemplateStats {
        template_stats(&self.tree)
    }
}

pub fn build_template(index: &SchemaIndex, keys: &KeyPathSet, contract_type: &str) -> Result<Template> {
    if keys.is_empty() {
        return Err(Error::Precondition("key set must be non-empty".into()));
    }
    let builder = TemplateBuilder { index, keys };
    let tree = builder.traverse(index.root_id(), "", 0)?;
    Ok(Template {
        contract_type: contract_type.to_string(),
        schema_root: index.root_id().to_string(),
        tree: prune_empty(&Value::Object(tree)),
    })
}

struct TemplateBuilder<'a> {
    index: &'a SchemaIndex,
    keys: &'a KeyPathSet,
}

impl TemplateBuilder<'_> {
    fn traverse(&self, doc_id: &str, prefix: &str, depth: usize) -> Result<Map<String, Value>> {
        if depth > self.index.depth_guard() {
            return Err(Error::CycleDetected(prefix.to_string()));
        }
        let doc = self.index.document(doc_id).ok_or_else(|| Error::UnresolvedRef {
            from: prefix.to_string(),
            reference: doc_id.to_string(),
            at: None,
        })?;
        let mut out = Map::new();
        for (name, prop) in &doc.properties {
            let path = keypath::join(prefix, name);
            if !self.keys.covers(&path) {
                continue;
            }
            let node = match prop.kind {
                PropertyKind::ObjectRef | PropertyKind::InlineObject => self.object_node(prop, &path, depth)?,
                PropertyKind::ArrayOfRef => Value::Array(vec![self.object_node(prop, &path, depth)?]),
                PropertyKind::ArrayOfScalar => Value::Array(vec![placeholder_for(prop).value()]),
                PropertyKind::Scalar => placeholder_for(prop).value(),
            };
            out.insert(name.clone(), node);
        }
        Ok(out)
    }

    fn object_node(&self, prop: &PropertyDef, path: &str, depth: usize) -> Result<Value> {
        let target = prop.ref_target.as_deref().ok_or_else(|| Error::UnresolvedRef {
            from: path.to_string(),
            reference: prop.name.clone(),
            at: None,
        })?;
        let fields = self.traverse(target, path, depth + 1)?;
        let description = self
            .index
            .document(target)
            .and_then(|d| d.description.clone())
            .or_else(|| prop.description.clone());
        Ok(Value::Object(annotate(fields, description)))
    }
}

fn placeholder_for(prop: &PropertyDef) -> Placeholder {
    Placeholder::for_scalar(prop.scalar_type.unwrap_or(ScalarType::String))
}

/// Puts the description annotation first in the node.
fn annotate(fields: Map<String, Value>, description: Option<String>) -> Map<String, Value> {
    let (key, text) = if fields.contains_key(ANNOTATION_KEY) {
        (ALT_ANNOTATION_KEY, Some(description.unwrap_or_default()))
    } else {
        (ANNOTATION_KEY, description)
    };
    let Some(text) = text else {
        return fields;
    };
    let mut out = Map::with_capacity(fields.len() + 1);
    out.insert(key.to_string(), Value::String(text));
    out.extend(fields);
    out
}

fn is_empty_structure(v: &Value) -> bool {
    match v {
        Value::Object(o) => o.is_empty(),
        Value::Array(a) => a.is_empty(),
        _ => false,
    }
}

/// Removes empty objects and lists, treating annotation-only objects as empty.
///
/// Placeholder leaves (`""`, `0`, `false`, the date token) are kept.
pub fn prune_empty(tree: &Value) -> Value {
    match tree {
        Value::Object(obj) => {
            let ann = annotation_key(obj);
            let mut out = Map::new();
            let mut has_data = false;
            for (k, v) in obj {
                if Some(k.as_str()) == ann {
                    out.insert(k.clone(), v.clone());
                    continue;
                }
                let pruned = prune_empty(v);
                if !is_empty_structure(&pruned) {
                    has_data = true;
                    out.insert(k.clone(), pruned);
                }
            }
            if has_data {
                Value::Object(out)
            } else {
                Value::Object(Map::new())
            }
        }
        Value::Array(items) => Value::Array(
            items
                .iter()
                .map(prune_empty)
                .filter(|v| !is_empty_structure(v))
                .collect(),
        ),
        other => other.clone(),
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TemplateStats {
    pub leaf_count: usize,
    pub max_depth: usize,
    pub object_count: usize,
}

/// Counts leaves and non-root objects; `max_depth` is the deepest top-level
/// field under the leaf-depth-1 convention.
pub fn template_stats(tree: &Value) -> TemplateStats {
    fn walk(v: &Value, stats: &mut TemplateStats) {
        match v {
            Value::Object(obj) => {
                for (_, c) in data_entries(obj) {
                    if c.is_object() {
                        stats.object_count += 1;
                    }
                    walk(c, stats);
                }
            }
            Value::Array(items) => {
                for c in items {
                    if c.is_object() {
                        stats.object_count += 1;
                    }
                    walk(c, stats);
                }
            }
            _ => stats.leaf_count += 1,
        }
    }
    let mut stats = TemplateStats::default();
    match tree {
        Value::Object(obj) => {
            walk(tree, &mut stats);
            stats.max_depth = data_entries(obj)
                .map(|(_, c)| crate::populate::node_depth(c))
                .max()
                .unwrap_or(0);
        }
        Value::Array(_) => {
            walk(tree, &mut stats);
            stats.max_depth = crate::populate::node_depth(tree);
        }
        _ => {
            stats.leaf_count = 1;
            stats.max_depth = 1;
        }
    }
    stats
}
