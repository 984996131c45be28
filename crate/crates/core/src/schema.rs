//! Loading and querying a directory of interlinked JSON schema documents.
//!
//! Every `.json` file under the schema directory becomes a [`SchemaDocument`]
//! keyed by its `/`-separated path relative to that directory. Inline object
//! schemas, `definitions`/`$defs` fragments and composite (`allOf`/`anyOf`/
//! `oneOf`) groups are registered as synthetic documents whose ids carry a
//! JSON-pointer fragment, e.g. `trade.schema.json#/properties/tradeDate`.
//! Property kinds therefore only ever point at document ids, which keeps path
//! lookup a plain walk over `properties`.

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::path::{Path, PathBuf};
use std::sync::OnceLock;

use indexmap::IndexMap;
use regex::Regex;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::error::{parse_json, read_to_string, Error, Result};
use crate::keypath;

/// Default bound on the number of segments followed during a path lookup.
pub const DEFAULT_DEPTH_GUARD: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PropertyKind {
    Scalar,
    ObjectRef,
    ArrayOfRef,
    ArrayOfScalar,
    InlineObject,
}

impl PropertyKind {
    /// True when the property holds an object (or a list of objects) with its own properties.
    pub fn is_structured(self) -> bool {
        matches!(
            self,
            PropertyKind::ObjectRef | PropertyKind::ArrayOfRef | PropertyKind::InlineObject
        )
    }

    pub fn is_array(self) -> bool {
        matches!(self, PropertyKind::ArrayOfRef | PropertyKind::ArrayOfScalar)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScalarType {
    String,
    Number,
    Integer,
    Boolean,
    Date,
    Enum,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PropertyDef {
    pub name: String,
    pub kind: PropertyKind,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ref_target: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub scalar_type: Option<ScalarType>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub description: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub enum_values: Option<Vec<String>>,
    /// Composite alternative the property was merged from, e.g. `oneOf[1]`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub origin: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SchemaDocument {
    pub id: String,
    pub properties: IndexMap<String, PropertyDef>,
    pub description: Option<String>,
    /// False for documents that cannot be reached from the root.
    pub reachable: bool,
    /// True for documents carved out of another file (inline objects, fragments).
    pub synthetic: bool,
    /// Composite members merged into `properties`, as `(label, document id)`.
    pub includes: Vec<(String, String)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SchemaIndex {
    root_id: String,
    documents: BTreeMap<String, SchemaDocument>,
    depth_guard: usize,
}

impl SchemaIndex {
    pub fn root_id(&self) -> &str {
        &self.root_id
    }

    pub fn documents(&self) -> &BTreeMap<String, SchemaDocument> {
        &self.documents
    }

    pub fn document(&self, id: &str) -> Option<&SchemaDocument> {
        self.documents.get(id)
    }

    pub fn root(&self) -> &SchemaDocument {
        &self.documents[&self.root_id]
    }

    pub fn depth_guard(&self) -> usize {
        self.depth_guard
    }

    pub fn with_depth_guard(mut self, guard: usize) -> Self {
        self.depth_guard = guard.max(1);
        self
    }

    /// Ids of file-backed documents that the root never references.
    pub fn unreachable(&self) -> impl Iterator<Item = &str> {
        self.documents
            .values()
            .filter(|d| !d.reachable && !d.synthetic)
            .map(|d| d.id.as_str())
    }

    /// Canonical id for `ref_text` as written inside `from_doc`.
    pub fn resolve_ref(&self, from_doc: &str, ref_text: &str) -> Result<String> {
        let id = canonical_ref(from_doc, ref_text).ok_or_else(|| unresolved(from_doc, ref_text))?;
        if self.documents.contains_key(&id) {
            Ok(id)
        } else {
            Err(unresolved(from_doc, ref_text))
        }
    }

    /// Looks up a dot-path, following references from the root.
    ///
    /// Numeric segments are stripped before lookup. Paths that do not start
    /// at the root are retried against unreachable documents, so keys from
    /// examples that bypass the root still resolve.
    pub fn path_exists(&self, path: &str) -> Result<Option<&PropertyDef>> {
        if path.trim().is_empty() {
            return Err(Error::Precondition("path must be non-empty".into()));
        }
        let segments = keypath::normalized_segments(path);
        if segments.is_empty() || segments.iter().any(|s| s.is_empty()) {
            return Ok(None);
        }
        if segments.len() > self.depth_guard {
            return Err(Error::CycleDetected(path.to_string()));
        }
        if let Some(def) = self.lookup_from(&self.root_id, &segments) {
            return Ok(Some(def));
        }
        Ok(self
            .unreachable()
            .find_map(|id| self.lookup_from(id, &segments)))
    }

    /// Lookup relative to an arbitrary document; no depth guard applied.
    pub fn lookup_from(&self, doc_id: &str, segments: &[&str]) -> Option<&PropertyDef> {
        let mut doc = self.documents.get(doc_id)?;
        let (last, interior) = segments.split_last()?;
        for seg in interior {
            let prop = doc.properties.get(*seg)?;
            doc = self.documents.get(prop.ref_target.as_deref()?)?;
        }
        doc.properties.get(*last)
    }

    /// Bounded enumeration of every legal path up to `max_segments` long.
    pub fn path_table(&self, max_segments: usize) -> BTreeMap<String, PropertyDef> {
        let mut table = BTreeMap::new();
        let mut stack: Vec<(String, &str, usize)> = vec![(String::new(), &self.root_id, 0)];
        while let Some((prefix, doc_id, depth)) = stack.pop() {
            if depth >= max_segments.min(self.depth_guard) {
                continue;
            }
            let Some(doc) = self.documents.get(doc_id) else {
                continue;
            };
            for (name, prop) in &doc.properties {
                let path = keypath::join(&prefix, name);
                if let Some(target) = prop.ref_target.as_deref() {
                    stack.push((path.clone(), target, depth + 1));
                }
                table.insert(path, prop.clone());
            }
        }
        table
    }
}

fn unresolved(from: &str, reference: &str) -> Error {
    Error::UnresolvedRef {
        from: from.to_string(),
        reference: reference.to_string(),
        at: None,
    }
}

/// Splits `id` into its file part and optional fragment.
fn split_id(id: &str) -> (&str, Option<&str>) {
    match id.split_once('#') {
        Some((file, frag)) => (file, Some(frag)),
        None => (id, None),
    }
}

/// Normalizes `ref_text` against the directory of `from_doc`. Returns `None`
/// for references that cannot name a local document (absolute URLs, paths
/// escaping the schema directory).
fn canonical_ref(from_doc: &str, ref_text: &str) -> Option<String> {
    if ref_text.contains("://") {
        return None;
    }
    let (from_file, _) = split_id(from_doc);
    let (path_part, fragment) = match ref_text.split_once('#') {
        Some((p, f)) => (p, f.trim_end_matches('/')),
        None => (ref_text, ""),
    };
    let file = if path_part.is_empty() {
        from_file.to_string()
    } else {
        let mut parts: Vec<&str> = from_file.split('/').collect();
        parts.pop();
        for seg in path_part.split('/') {
            match seg {
                "" | "." => {}
                ".." => {
                    parts.pop()?;
                }
                s => parts.push(s),
            }
        }
        parts.join("/")
    };
    if fragment.is_empty() {
        Some(file)
    } else {
        Some(format!("{file}#{fragment}"))
    }
}

fn child_id(parent: &str, suffix: &str) -> String {
    if parent.contains('#') {
        format!("{parent}{suffix}")
    } else {
        format!("{parent}#{suffix}")
    }
}

fn escape_pointer(token: &str) -> String {
    token.replace('~', "~0").replace('/', "~1")
}

fn date_token() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"(?i)\bdate\b").expect("static regex"))
}

/// Loads every `.json` document under `dir` and resolves references from `root_file`.
pub fn load_schema_dir(dir: impl AsRef<Path>, root_file: impl AsRef<Path>) -> Result<SchemaIndex> {
    let dir = dir.as_ref();
    let root_file = root_file.as_ref();
    let root_path = if root_file.is_absolute() {
        root_file.to_path_buf()
    } else {
        dir.join(root_file)
    };
    if !root_path.is_file() {
        return Err(Error::MissingRoot(root_path));
    }
    let root_id = relative_id(dir, &root_path).ok_or_else(|| Error::MissingRoot(root_path.clone()))?;

    let mut raw = BTreeMap::new();
    for entry in walkdir::WalkDir::new(dir).sort_by_file_name() {
        let entry = entry.map_err(|e| {
            let path = e.path().map(Path::to_path_buf).unwrap_or_else(|| dir.to_path_buf());
            Error::io(path, e.into())
        })?;
        if !entry.file_type().is_file()
            || entry.path().extension().and_then(|e| e.to_str()) != Some("json")
        {
            continue;
        }
        let Some(id) = relative_id(dir, entry.path()) else {
            continue;
        };
        let text = read_to_string(entry.path())?;
        raw.insert(id, parse_json(entry.path(), &text)?);
    }

    let mut builder = Builder {
        raw: &raw,
        docs: BTreeMap::new(),
        pending: VecDeque::new(),
    };
    for id in raw.keys() {
        builder.ensure(id.clone(), None)?;
    }
    builder.drain()?;
    let mut documents = builder.docs;
    merge_includes(&mut documents);
    mark_reachable(&mut documents, &root_id);

    Ok(SchemaIndex {
        root_id,
        documents,
        depth_guard: DEFAULT_DEPTH_GUARD,
    })
}

fn relative_id(dir: &Path, path: &Path) -> Option<String> {
    let rel: PathBuf = path.strip_prefix(dir).ok()?.to_path_buf();
    let parts: Vec<String> = rel
        .components()
        .map(|c| c.as_os_str().to_string_lossy().into_owned())
        .collect();
    Some(parts.join("/"))
}

struct Builder<'a> {
    raw: &'a BTreeMap<String, Value>,
    docs: BTreeMap<String, SchemaDocument>,
    pending: VecDeque<(String, Value)>,
}

impl Builder<'_> {
    /// Queues the document `id` for construction, locating its raw schema.
    /// `inline` carries the schema for synthetic documents created in place.
    fn ensure(&mut self, id: String, inline: Option<Value>) -> Result<()> {
        if self.docs.contains_key(&id) || self.pending.iter().any(|(p, _)| *p == id) {
            return Ok(());
        }
        let value = match inline {
            Some(v) => v,
            None => {
                let (file, fragment) = split_id(&id);
                let root = self.raw.get(file).ok_or_else(|| unresolved(&id, &id))?;
                match fragment {
                    None => root.clone(),
                    Some(f) => root.pointer(f).cloned().ok_or_else(|| unresolved(&id, &id))?,
                }
            }
        };
        self.pending.push_back((id, value));
        Ok(())
    }

    fn drain(&mut self) -> Result<()> {
        while let Some((id, value)) = self.pending.pop_front() {
            let doc = self.build(&id, &value)?;
            self.docs.insert(id, doc);
        }
        Ok(())
    }

    fn resolve(&mut self, from: &str, ref_text: &str, at: &str) -> Result<String> {
        let id = canonical_ref(from, ref_text).ok_or_else(|| Error::UnresolvedRef {
            from: split_id(from).0.to_string(),
            reference: ref_text.to_string(),
            at: Some(at.to_string()),
        })?;
        let (file, fragment) = split_id(&id);
        let exists = match self.raw.get(file) {
            Some(v) => fragment.is_none_or(|f| v.pointer(f).is_some()),
            None => false,
        };
        if !exists {
            return Err(Error::UnresolvedRef {
                from: split_id(from).0.to_string(),
                reference: ref_text.to_string(),
                at: Some(at.to_string()),
            });
        }
        self.ensure(id.clone(), None)?;
        Ok(id)
    }

    fn build(&mut self, id: &str, value: &Value) -> Result<SchemaDocument> {
        let obj = value.as_object().cloned().unwrap_or_default();
        let mut doc = SchemaDocument {
            id: id.to_string(),
            properties: IndexMap::new(),
            description: text_field(&obj, "description"),
            reachable: false,
            synthetic: id.contains('#'),
            includes: Vec::new(),
        };
        if let Some(Value::String(r)) = obj.get("$ref") {
            let target = self.resolve(id, r, id)?;
            doc.includes.push(("$ref".into(), target));
        }
        for kw in ["allOf", "anyOf", "oneOf"] {
            let Some(Value::Array(members)) = obj.get(kw) else {
                continue;
            };
            for (i, member) in members.iter().enumerate() {
                let label = format!("{kw}[{i}]");
                if let Some(Value::String(r)) = member.get("$ref") {
                    let target = self.resolve(id, r, &format!("{id}/{label}"))?;
                    doc.includes.push((label, target));
                } else if member.get("properties").is_some() || has_composite(member) {
                    let sub = child_id(id, &format!("/{kw}/{i}"));
                    self.ensure(sub.clone(), Some(member.clone()))?;
                    doc.includes.push((label, sub));
                }
            }
        }
        if let Some(Value::Object(props)) = obj.get("properties") {
            for (name, schema) in props {
                let pointer = format!("/properties/{}", escape_pointer(name));
                let def = self.property(id, &pointer, name, schema)?;
                doc.properties.insert(name.clone(), def);
            }
        }
        Ok(doc)
    }

    fn property(&mut self, doc_id: &str, pointer: &str, name: &str, schema: &Value) -> Result<PropertyDef> {
        let obj = schema.as_object().cloned().unwrap_or_default();
        let description = text_field(&obj, "description");
        let at = format!("{}{}", doc_id, if doc_id.contains('#') { pointer.to_string() } else { format!("#{pointer}") });
        let mut def = PropertyDef {
            name: name.to_string(),
            kind: PropertyKind::Scalar,
            ref_target: None,
            scalar_type: None,
            description: description.clone(),
            enum_values: None,
            origin: None,
        };

        if let Some(Value::String(r)) = obj.get("$ref") {
            def.kind = PropertyKind::ObjectRef;
            def.ref_target = Some(self.resolve(doc_id, r, &at)?);
            return Ok(def);
        }

        if has_composite(schema) {
            let members: Vec<&Value> = ["allOf", "anyOf", "oneOf"]
                .iter()
                .filter_map(|kw| obj.get(*kw).and_then(Value::as_array))
                .flatten()
                .collect();
            let structured = members
                .iter()
                .any(|m| m.get("$ref").is_some() || m.get("properties").is_some());
            if structured {
                if members.len() == 1 && obj.get("properties").is_none() {
                    if let Some(Value::String(r)) = members[0].get("$ref") {
                        def.kind = PropertyKind::ObjectRef;
                        def.ref_target = Some(self.resolve(doc_id, r, &at)?);
                        return Ok(def);
                    }
                }
                let sub = child_id(doc_id, pointer);
                self.ensure(sub.clone(), Some(schema.clone()))?;
                def.kind = PropertyKind::InlineObject;
                def.ref_target = Some(sub);
                return Ok(def);
            }
            // Scalar alternatives: the first member decides the type.
            if let Some(first) = members.first() {
                let mut merged = first.as_object().cloned().unwrap_or_default();
                if merged.get("description").is_none() {
                    if let Some(d) = &description {
                        merged.insert("description".into(), Value::String(d.clone()));
                    }
                }
                return self.property(doc_id, pointer, name, &Value::Object(merged));
            }
        }

        let ty = type_name(&obj);
        if ty.as_deref() == Some("array") || obj.contains_key("items") {
            let items = match obj.get("items") {
                Some(Value::Array(list)) => list.first().cloned().unwrap_or(Value::Null),
                Some(v) => v.clone(),
                None => Value::Null,
            };
            let item = self.property(doc_id, &format!("{pointer}/items"), name, &items)?;
            def.ref_target = item.ref_target;
            if item.kind.is_structured() {
                def.kind = PropertyKind::ArrayOfRef;
            } else {
                def.kind = PropertyKind::ArrayOfScalar;
                def.scalar_type = Some(item.scalar_type.unwrap_or(ScalarType::String));
                def.enum_values = item.enum_values;
            }
            return Ok(def);
        }

        if ty.as_deref() == Some("object") || obj.contains_key("properties") {
            let sub = child_id(doc_id, pointer);
            self.ensure(sub.clone(), Some(schema.clone()))?;
            def.kind = PropertyKind::InlineObject;
            def.ref_target = Some(sub);
            return Ok(def);
        }

        let (scalar, enum_values) = scalar_type(&obj, ty.as_deref(), description.as_deref());
        def.scalar_type = Some(scalar);
        def.enum_values = enum_values;
        Ok(def)
    }
}

fn has_composite(v: &Value) -> bool {
    ["allOf", "anyOf", "oneOf"].iter().any(|k| v.get(*k).is_some())
}

fn text_field(obj: &Map<String, Value>, key: &str) -> Option<String> {
    obj.get(key)
        .and_then(Value::as_str)
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(str::to_string)
}

fn type_name(obj: &Map<String, Value>) -> Option<String> {
    match obj.get("type") {
        Some(Value::String(s)) => Some(s.clone()),
        Some(Value::Array(list)) => list
            .iter()
            .filter_map(Value::as_str)
            .find(|s| *s != "null")
            .map(str::to_string),
        _ => None,
    }
}

fn scalar_type(
    obj: &Map<String, Value>,
    ty: Option<&str>,
    description: Option<&str>,
) -> (ScalarType, Option<Vec<String>>) {
    if let Some(Value::Array(values)) = obj.get("enum") {
        let values = values
            .iter()
            .map(|v| match v {
                Value::String(s) => s.clone(),
                other => other.to_string(),
            })
            .collect();
        return (ScalarType::Enum, Some(values));
    }
    let t = match ty {
        Some("integer") => ScalarType::Integer,
        Some("number") => ScalarType::Number,
        Some("boolean") => ScalarType::Boolean,
        _ => match obj.get("format").and_then(Value::as_str) {
            Some("date") => ScalarType::Date,
            Some(_) => ScalarType::String,
            None if description.is_some_and(|d| date_token().is_match(d)) => ScalarType::Date,
            None => ScalarType::String,
        },
    };
    (t, None)
}

/// Folds composite members' properties into each document. Own properties win
/// on name clashes; members are visited once per document.
fn merge_includes(documents: &mut BTreeMap<String, SchemaDocument>) {
    fn collect(
        documents: &BTreeMap<String, SchemaDocument>,
        id: &str,
        visited: &mut BTreeSet<String>,
        out: &mut IndexMap<String, PropertyDef>,
        label: Option<&str>,
    ) {
        if !visited.insert(id.to_string()) {
            return;
        }
        let Some(doc) = documents.get(id) else {
            return;
        };
        for (name, prop) in &doc.properties {
            if !out.contains_key(name) {
                let mut prop = prop.clone();
                if let Some(l) = label {
                    prop.origin.get_or_insert_with(|| l.to_string());
                }
                out.insert(name.clone(), prop);
            }
        }
        for (member_label, target) in &doc.includes {
            let l = label.unwrap_or(member_label);
            collect(documents, target, visited, out, Some(l));
        }
    }

    let ids: Vec<String> = documents
        .iter()
        .filter(|(_, d)| !d.includes.is_empty())
        .map(|(id, _)| id.clone())
        .collect();
    let merged: Vec<(String, IndexMap<String, PropertyDef>)> = ids
        .into_iter()
        .map(|id| {
            let mut out = IndexMap::new();
            collect(documents, &id, &mut BTreeSet::new(), &mut out, None);
            (id, out)
        })
        .collect();
    for (id, props) in merged {
        if let Some(doc) = documents.get_mut(&id) {
            doc.properties = props;
        }
    }
}

fn mark_reachable(documents: &mut BTreeMap<String, SchemaDocument>, root_id: &str) {
    let mut seen = BTreeSet::new();
    let mut queue = VecDeque::from([root_id.to_string()]);
    while let Some(id) = queue.pop_front() {
        if !seen.insert(id.clone()) {
            continue;
        }
        if let Some(doc) = documents.get(&id) {
            queue.extend(doc.properties.values().filter_map(|p| p.ref_target.clone()));
            queue.extend(doc.includes.iter().map(|(_, t)| t.clone()));
        }
    }
    for (id, doc) in documents.iter_mut() {
        doc.reachable = seen.contains(id);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    fn write(dir: &Path, name: &str, value: Value) {
        let path = dir.join(name);
        std::fs::create_dir_all(path.parent().unwrap()).unwrap();
        std::fs::write(path, serde_json::to_string_pretty(&value).unwrap()).unwrap();
    }

    #[test]
    fn canonical_ref_normalizes_relative_segments() {
        assert_eq!(
            canonical_ref("product/swap.schema", "../base/party.schema").as_deref(),
            Some("base/party.schema")
        );
        assert_eq!(canonical_ref("root.json", "party.schema").as_deref(), Some("party.schema"));
        assert_eq!(canonical_ref("a.json", "#/definitions/X").as_deref(), Some("a.json#/definitions/X"));
        assert_eq!(canonical_ref("a.json", "../../x.json"), None);
        assert_eq!(canonical_ref("a.json", "https://example.org/x.json"), None);
    }

    #[test]
    fn composite_members_are_unioned_with_origin() {
        let tmp = tempfile::tempdir().unwrap();
        write(
            tmp.path(),
            "root.json",
            json!({"properties": {"choice": {"oneOf": [
                {"$ref": "a.json"},
                {"type": "object", "properties": {"b": {"type": "string"}}}
            ]}}}),
        );
        write(tmp.path(), "a.json", json!({"properties": {"a": {"type": "number"}}}));
        let index = load_schema_dir(tmp.path(), "root.json").unwrap();
        let a = index.path_exists("choice.a").unwrap().unwrap();
        assert_eq!(a.origin.as_deref(), Some("oneOf[0]"));
        let b = index.path_exists("choice.b").unwrap().unwrap();
        assert_eq!(b.origin.as_deref(), Some("oneOf[1]"));
        assert!(index.path_exists("choice.c").unwrap().is_none());
    }

    #[test]
    fn scalar_classification() {
        let tmp = tempfile::tempdir().unwrap();
        write(
            tmp.path(),
            "root.json",
            json!({"properties": {
                "d1": {"type": "string", "format": "date"},
                "d2": {"type": "string", "description": "The trade date of the contract"},
                "d3": {"type": "string", "format": "date-time", "description": "A date"},
                "upd": {"type": "string", "description": "Update frequency"},
                "n": {"type": "number"},
                "i": {"type": ["integer", "null"]},
                "b": {"type": "boolean"},
                "e": {"type": "string", "enum": ["Call", "Put"]},
                "tags": {"type": "array", "items": {"type": "string"}}
            }}),
        );
        let index = load_schema_dir(tmp.path(), "root.json").unwrap();
        let ty = |p: &str| index.path_exists(p).unwrap().unwrap().scalar_type.unwrap();
        assert_eq!(ty("d1"), ScalarType::Date);
        assert_eq!(ty("d2"), ScalarType::Date);
        assert_eq!(ty("d3"), ScalarType::String);
        assert_eq!(ty("upd"), ScalarType::String);
        assert_eq!(ty("n"), ScalarType::Number);
        assert_eq!(ty("i"), ScalarType::Integer);
        assert_eq!(ty("b"), ScalarType::Boolean);
        assert_eq!(ty("e"), ScalarType::Enum);
        let tags = index.path_exists("tags").unwrap().unwrap();
        assert_eq!(tags.kind, PropertyKind::ArrayOfScalar);
        assert_eq!(tags.scalar_type, Some(ScalarType::String));
    }

    #[test]
    fn fragment_refs_and_self_reference() {
        let tmp = tempfile::tempdir().unwrap();
        write(
            tmp.path(),
            "root.json",
            json!({
                "definitions": {"Node": {"properties": {
                    "value": {"type": "string"},
                    "next": {"$ref": "#/definitions/Node"}
                }}},
                "properties": {"head": {"$ref": "#/definitions/Node"}}
            }),
        );
        let index = load_schema_dir(tmp.path(), "root.json").unwrap();
        assert!(index.path_exists("head.next.next.next.value").unwrap().is_some());
        let deep = std::iter::repeat_n("next", 70).collect::<Vec<_>>().join(".");
        let err = index.path_exists(&format!("head.{deep}.value")).unwrap_err();
        assert!(matches!(err, Error::CycleDetected(_)));
    }

    #[test]
    fn unreachable_documents_are_flagged_and_still_serve_paths() {
        let tmp = tempfile::tempdir().unwrap();
        write(tmp.path(), "root.json", json!({"properties": {"a": {"type": "string"}}}));
        write(tmp.path(), "orphan.json", json!({"properties": {"zzz": {"type": "string"}}}));
        let index = load_schema_dir(tmp.path(), "root.json").unwrap();
        assert_eq!(index.unreachable().collect::<Vec<_>>(), vec!["orphan.json"]);
        assert!(index.path_exists("zzz").unwrap().is_some());
    }

    #[test]
    fn malformed_document_names_file() {
        let tmp = tempfile::tempdir().unwrap();
        write(tmp.path(), "root.json", json!({"properties": {}}));
        std::fs::write(tmp.path().join("bad.json"), "{\"properties\": ").unwrap();
        match load_schema_dir(tmp.path(), "root.json").unwrap_err() {
            Error::MalformedDocument { file, offset, .. } => {
                assert!(file.ends_with("bad.json"));
                assert_eq!(offset, 14, "offset of the last byte consumed");
            }
            other => panic!("unexpected {other:?}"),
        }
    }
}
