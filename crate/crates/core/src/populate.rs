//! Depth-bounded population of a template.
//!
//! The template tree is annotated with subtree depths (leaf = 1, container =
//! 1 + deepest child, empty container = 1). Traversal from the root emits the
//! first node on each branch whose depth is within the threshold as one
//! population task. Each task is prompted, validated against the shape of its
//! template fragment, repaired on mismatch, and grafted back into a copy of
//! the template. [`clean`] then drops whatever stayed unfilled.

use std::sync::atomic::{AtomicBool, Ordering};

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::error::{Error, Result};
use crate::exec::parallel_map;
use crate::kb::{Chunk, KnowledgeBase};
use crate::keypath::{self, Location, Segment};
use crate::llm::{extract_structured, ChatProvider, EmbeddingProvider, FinishReason, PromptBundle};
use crate::prompts;
use crate::template::{annotation_key, data_entries, is_iso_date, strip_annotations, Template, DATE_PLACEHOLDER};

pub const DEFAULT_DEPTH_THRESHOLD: usize = 4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PopulationConfig {
    pub depth_threshold: usize,
    pub use_rag: bool,
    pub retry_limit: u32,
    pub k_chunks: usize,
    pub max_in_flight: usize,
    pub max_output_tokens: u32,
    pub temperature: f32,
}

impl Default for PopulationConfig {
    fn default() -> Self {
        PopulationConfig {
            depth_threshold: DEFAULT_DEPTH_THRESHOLD,
            use_rag: false,
            retry_limit: 2,
            k_chunks: crate::kb::DEFAULT_K,
            max_in_flight: 4,
            max_output_tokens: 2048,
            temperature: 0.0,
        }
    }
}

impl PopulationConfig {
    pub fn validate(&self) -> Result<()> {
        if self.depth_threshold < 1 {
            return Err(Error::Config("depth threshold must be at least 1".into()));
        }
        if self.k_chunks < 1 {
            return Err(Error::Config("k must be at least 1".into()));
        }
        if !(0.0..=2.0).contains(&self.temperature) {
            return Err(Error::Config("temperature must lie in [0, 2]".into()));
        }
        Ok(())
    }
}

/// Depth of a node, ignoring annotation keys.
pub fn node_depth(v: &Value) -> usize {
    match v {
        Value::Object(obj) => 1 + data_entries(obj).map(|(_, c)| node_depth(c)).max().unwrap_or(0),
        Value::Array(items) => 1 + items.iter().map(node_depth).max().unwrap_or(0),
        _ => 1,
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DepthNode {
    pub location: Location,
    pub depth: usize,
    pub children: Vec<DepthNode>,
}

impl DepthNode {
    pub fn is_leaf(&self) -> bool {
        self.children.is_empty()
    }
}

pub fn compute_depths(tree: &Value) -> DepthNode {
    fn walk(v: &Value, location: Location) -> DepthNode {
        let children: Vec<DepthNode> = match v {
            Value::Object(obj) => data_entries(obj).map(|(k, c)| walk(c, location.child_key(k))).collect(),
            Value::Array(items) => items.iter().enumerate().map(|(i, c)| walk(c, location.child_index(i))).collect(),
            _ => Vec::new(),
        };
        let depth = 1 + children.iter().map(|c| c.depth).max().unwrap_or(0);
        DepthNode { location, depth, children }
    }
    walk(tree, Location::root())
}

/// A node chosen as a population unit.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TaskSite {
    pub location: Location,
    pub depth: usize,
}

/// Emits every maximal subtree of depth at most `d`, top-down.
pub fn select_tasks(root: &DepthNode, d: usize) -> Vec<TaskSite> {
    fn walk(node: &DepthNode, d: usize, out: &mut Vec<TaskSite>) {
        if node.depth <= d {
            out.push(TaskSite {
                location: node.location.clone(),
                depth: node.depth,
            });
        } else {
            for c in &node.children {
                walk(c, d, out);
            }
        }
    }
    let mut out = Vec::new();
    walk(root, d.max(1), &mut out);
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct PopulationTask {
    pub location: Location,
    /// Normalized dot-path of the target node.
    pub target_path: String,
    /// Template fragment, annotations included.
    pub target_subtree: Value,
    pub object_definition: String,
    /// Ancestor names from the root down to the target's parent.
    pub traversal_context: Vec<String>,
    pub retrieved_chunks: Vec<Chunk>,
    pub depth: usize,
}

const NO_DEFINITION: &str = "No definition is available for this object.";

impl PopulationTask {
    fn from_site(tree: &Value, site: TaskSite) -> Self {
        let subtree = site.location.get(tree).cloned().unwrap_or(Value::Null);
        let names = site.location.names();
        let context_len = match site.location.0.last() {
            Some(Segment::Key(_)) | Some(Segment::Index(_)) => names.len().saturating_sub(1),
            None => 0,
        };
        PopulationTask {
            target_path: site.location.dot_path(),
            object_definition: definition_of(&subtree),
            traversal_context: names[..context_len].iter().map(|s| s.to_string()).collect(),
            target_subtree: subtree,
            retrieved_chunks: Vec::new(),
            depth: site.depth,
            location: site.location,
        }
    }

    /// The object the model is asked to fill: the fragment wrapped under its
    /// own key, annotations removed. Array elements are wrapped in a
    /// one-element list under the array's key.
    pub fn payload(&self) -> Value {
        self.wrap(strip_annotations(&self.target_subtree))
    }

    /// The payload with annotations kept: the form answers are validated
    /// against, since a stripped payload cannot tell a data field named
    /// `description` from an annotation.
    pub fn shape(&self) -> Value {
        self.wrap(self.target_subtree.clone())
    }

    fn wrap(&self, body: Value) -> Value {
        match self.location.0.last() {
            None => body,
            Some(Segment::Key(k)) => Value::Object(Map::from_iter([(k.clone(), body)])),
            Some(Segment::Index(_)) => {
                let key = self.location.last_key().unwrap_or("items").to_string();
                Value::Object(Map::from_iter([(key, Value::Array(vec![body]))]))
            }
        }
    }

    pub fn context_path(&self) -> String {
        self.traversal_context.join(".")
    }

    /// Retrieval query: field names, definition and traversal path.
    pub fn query(&self) -> String {
        let mut names = Vec::new();
        collect_keys(&self.target_subtree, &mut names);
        format!("{} {} {}", names.join(" "), self.object_definition, self.target_path)
    }
}

fn collect_keys(v: &Value, out: &mut Vec<String>) {
    match v {
        Value::Object(obj) => {
            for (k, c) in data_entries(obj) {
                out.push(k.clone());
                collect_keys(c, out);
            }
        }
        Value::Array(items) => items.iter().for_each(|c| collect_keys(c, out)),
        _ => {}
    }
}

fn own_annotation(v: &Value) -> Option<&str> {
    match v {
        Value::Object(obj) => annotation_key(obj).and_then(|k| obj[k].as_str()).filter(|s| !s.is_empty()),
        Value::Array(items) => items.first().and_then(own_annotation),
        _ => None,
    }
}

fn definition_of(subtree: &Value) -> String {
    fn nested(v: &Value, prefix: &str, out: &mut Vec<String>) {
        let children: Vec<(String, &Value)> = match v {
            Value::Object(obj) => data_entries(obj).map(|(k, c)| (keypath::join(prefix, k), c)).collect(),
            Value::Array(items) => items.first().map(|c| (prefix.to_string(), c)).into_iter().collect(),
            _ => Vec::new(),
        };
        for (path, c) in children {
            if c.is_object() {
                if let Some(text) = own_annotation(c) {
                    if path != prefix {
                        out.push(format!("- {path}: {text}"));
                    }
                }
            }
            nested(c, &path, out);
        }
    }
    let mut text = own_annotation(subtree).unwrap_or(NO_DEFINITION).to_string();
    let mut lines = Vec::new();
    nested(subtree, "", &mut lines);
    lines.dedup();
    if !lines.is_empty() {
        text.push_str("\n\nNested objects:\n");
        text.push_str(&lines.join("\n"));
    }
    text
}

/// Builds the population tasks for a template under threshold `d`.
pub fn plan_tasks(template: &Template, d: usize) -> Vec<PopulationTask> {
    let depths = compute_depths(&template.tree);
    select_tasks(&depths, d)
        .into_iter()
        .map(|site| PopulationTask::from_site(&template.tree, site))
        .collect()
}

/// Attaches the top-`k` chunks for each task's query.
pub fn attach_chunks(
    tasks: &mut [PopulationTask],
    kb: &KnowledgeBase,
    k: usize,
    embedder: Option<&dyn EmbeddingProvider>,
) -> Result<()> {
    for task in tasks {
        task.retrieved_chunks = kb
            .retrieve_with(&task.query(), k, embedder)?
            .into_iter()
            .map(|s| s.chunk.clone())
            .collect();
    }
    Ok(())
}

fn examples_section(chunks: &[Chunk]) -> String {
    if chunks.is_empty() {
        return String::new();
    }
    let mut s = prompts::POPULATION_EXAMPLES.trim_end().to_string();
    for (i, c) in chunks.iter().enumerate() {
        let source = if c.source_path.is_empty() { "whole document" } else { &c.source_path };
        s.push_str(&format!("\n\n### Example {} ({})\n{}", i + 1, source, c.body));
    }
    s
}

pub fn build_prompt(task: &PopulationTask, contract_text: &str, cfg: &PopulationConfig) -> PromptBundle {
    let structure = serde_json::to_string_pretty(&task.payload()).expect("payload serializes");
    let context = if task.traversal_context.is_empty() {
        "(root)".to_string()
    } else {
        task.context_path()
    };
    let target = if task.target_path.is_empty() { "(root)" } else { &task.target_path };
    let examples = if cfg.use_rag {
        examples_section(&task.retrieved_chunks)
    } else {
        String::new()
    };
    let user = prompts::render(
        prompts::POPULATION_USER,
        &[
            ("contract", contract_text.trim()),
            ("context", &context),
            ("target_path", target),
            ("definition", &task.object_definition),
            ("structure", &structure),
            ("examples", &examples),
        ],
    );
    PromptBundle {
        system_text: prompts::POPULATION_SYSTEM.trim_end().to_string(),
        user_text: user,
        max_output_tokens: cfg.max_output_tokens,
        temperature: cfg.temperature,
    }
}

/// Follow-up prompt embedding the problem with the previous answer.
pub fn repair_prompt(base: &PromptBundle, report: &str, previous: &str) -> PromptBundle {
    let mut p = base.clone();
    p.user_text.push('\n');
    p.user_text
        .push_str(&prompts::render(prompts::REPAIR, &[("report", report), ("previous", previous.trim())]));
    p
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TypeClash {
    pub path: String,
    pub expected: String,
    pub found: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ShapeMismatch {
    pub missing: Vec<String>,
    pub extra: Vec<String>,
    pub type_clashes: Vec<TypeClash>,
}

impl ShapeMismatch {
    pub fn is_empty(&self) -> bool {
        self.missing.is_empty() && self.extra.is_empty() && self.type_clashes.is_empty()
    }
}

impl std::fmt::Display for ShapeMismatch {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let mut lines = Vec::new();
        lines.extend(self.missing.iter().map(|p| format!("- missing key `{p}`")));
        lines.extend(self.extra.iter().map(|p| format!("- unexpected key `{p}`")));
        lines.extend(
            self.type_clashes
                .iter()
                .map(|c| format!("- `{}`: expected {}, found {}", c.path, c.expected, c.found)),
        );
        f.write_str(&lines.join("\n"))
    }
}

fn kind_name(v: &Value) -> String {
    match v {
        Value::Null => "null".into(),
        Value::Bool(_) => "boolean".into(),
        Value::Number(_) => "number".into(),
        Value::String(s) => format!("string {}", Value::String(s.clone())),
        Value::Array(a) if a.is_empty() => "empty list".into(),
        Value::Array(_) => "list".into(),
        Value::Object(_) => "object".into(),
    }
}

/// Checks that `output` has the shape of the template fragment `input`.
///
/// Object key sets must match exactly (annotation keys excluded), lists
/// need at least one element and every element must match the input's
/// first element, and leaves must carry the placeholder's kind. Date leaves
/// accept a valid `YYYY-MM-DD` date or the placeholder itself.
pub fn validate_shape(input: &Value, output: &Value) -> std::result::Result<(), ShapeMismatch> {
    let mut report = ShapeMismatch::default();
    check(input, output, &Location::root(), &mut report);
    if report.is_empty() {
        Ok(())
    } else {
        Err(report)
    }
}

fn check(input: &Value, output: &Value, at: &Location, report: &mut ShapeMismatch) {
    let clash = |expected: &str, report: &mut ShapeMismatch| {
        report.type_clashes.push(TypeClash {
            path: at.to_string(),
            expected: expected.to_string(),
            found: kind_name(output),
        })
    };
    match input {
        Value::Object(inp) => {
            let Value::Object(out) = output else {
                return clash("object", report);
            };
            for (k, child) in data_entries(inp) {
                match out.get(k) {
                    Some(o) => check(child, o, &at.child_key(k), report),
                    None => report.missing.push(at.child_key(k).to_string()),
                }
            }
            let expected: Vec<&String> = data_entries(inp).map(|(k, _)| k).collect();
            for k in out.keys() {
                if !expected.contains(&k) {
                    report.extra.push(at.child_key(k).to_string());
                }
            }
        }
        Value::Array(inp) => {
            let Value::Array(out) = output else {
                return clash("list", report);
            };
            let Some(proto) = inp.first() else {
                return;
            };
            if out.is_empty() {
                return clash("list with at least one element", report);
            }
            for (i, o) in out.iter().enumerate() {
                check(proto, o, &at.child_index(i), report);
            }
        }
        Value::String(s) if s == DATE_PLACEHOLDER => match output {
            Value::String(o) if o == DATE_PLACEHOLDER || is_iso_date(o) => {}
            _ => clash("date (YYYY-MM-DD)", report),
        },
        Value::String(_) => {
            if !output.is_string() {
                clash("string", report)
            }
        }
        Value::Number(_) => {
            if !output.is_number() {
                clash("number", report)
            }
        }
        Value::Bool(_) => {
            if !output.is_boolean() {
                clash("boolean", report)
            }
        }
        Value::Null => {}
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskStatus {
    Filled,
    Fallback,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskRecord {
    /// Exact location, with array indices.
    pub target: String,
    pub path: String,
    pub depth: usize,
    pub attempts: u32,
    pub prompt_hashes: Vec<String>,
    pub status: TaskStatus,
    #[serde(skip_serializing_if = "Vec::is_empty", default)]
    pub failures: Vec<String>,
    #[serde(skip_serializing_if = "Vec::is_empty", default)]
    pub chunk_ids: Vec<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub contract_type: String,
    pub depth_threshold: usize,
    pub use_rag: bool,
    pub tasks: Vec<TaskRecord>,
}

impl Provenance {
    pub fn task(&self, target: &str) -> Option<&TaskRecord> {
        self.tasks.iter().find(|t| t.target == target || t.path == target)
    }

    pub fn failed(&self) -> impl Iterator<Item = &TaskRecord> {
        self.tasks.iter().filter(|t| t.status == TaskStatus::Fallback)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PopulatedDocument {
    pub tree: Value,
    pub provenance: Provenance,
    pub contract_type: String,
}

#[derive(Debug, thiserror::Error)]
#[error("population aborted: {source}")]
pub struct PopulateError {
    #[source]
    pub source: Error,
    /// Records of the tasks that finished before the abort.
    pub provenance: Provenance,
}

pub struct Populator<'a> {
    provider: &'a dyn ChatProvider,
    cfg: &'a PopulationConfig,
    kb: Option<&'a KnowledgeBase>,
    embedder: Option<&'a dyn EmbeddingProvider>,
}

impl<'a> Populator<'a> {
    pub fn new(provider: &'a dyn ChatProvider, cfg: &'a PopulationConfig) -> Self {
        Populator {
            provider,
            cfg,
            kb: None,
            embedder: None,
        }
    }

    pub fn with_kb(mut self, kb: Option<&'a KnowledgeBase>) -> Self {
        self.kb = kb;
        self
    }

    pub fn with_embedder(mut self, embedder: Option<&'a dyn EmbeddingProvider>) -> Self {
        self.embedder = embedder;
        self
    }

    /// The tasks, with chunks attached when retrieval is on.
    pub fn tasks(&self, template: &Template) -> Result<Vec<PopulationTask>> {
        self.cfg.validate()?;
        let mut tasks = plan_tasks(template, self.cfg.depth_threshold);
        if self.cfg.use_rag {
            let kb = self
                .kb
                .ok_or_else(|| Error::Precondition("retrieval requested without a knowledge base".into()))?;
            attach_chunks(&mut tasks, kb, self.cfg.k_chunks, self.embedder)?;
        }
        Ok(tasks)
    }

    #[allow(clippy::result_large_err)]
    pub fn run(&self, template: &Template, contract_text: &str) -> std::result::Result<PopulatedDocument, PopulateError> {
        let mut provenance = Provenance {
            contract_type: template.contract_type.clone(),
            depth_threshold: self.cfg.depth_threshold,
            use_rag: self.cfg.use_rag,
            tasks: Vec::new(),
        };
        let tasks = match self.tasks(template) {
            Ok(t) => t,
            Err(source) => return Err(PopulateError { source, provenance }),
        };
        tracing::info!(contract_type = %template.contract_type, tasks = tasks.len(), d = self.cfg.depth_threshold, "population started");

        let abort = AtomicBool::new(false);
        let outcomes = parallel_map(&tasks, self.cfg.max_in_flight, |_, task| {
            if abort.load(Ordering::SeqCst) {
                return None;
            }
            let r = self.run_task(task, contract_text);
            if r.is_err() {
                abort.store(true, Ordering::SeqCst);
            }
            Some(r)
        });

        let mut fills = Vec::with_capacity(tasks.len());
        let mut first_error = None;
        for outcome in outcomes {
            match outcome {
                Some(Ok((fill, record))) => {
                    provenance.tasks.push(record);
                    fills.push(fill);
                }
                Some(Err(e)) => {
                    first_error.get_or_insert(e);
                    fills.push(None);
                }
                None => fills.push(None),
            }
        }
        if let Some(source) = first_error {
            return Err(PopulateError { source, provenance });
        }

        let mut tree = strip_annotations(&template.tree);
        for (task, fill) in tasks.iter().zip(fills).rev() {
            if let Some(fill) = fill {
                graft(&mut tree, &task.location, fill);
            }
        }
        Ok(PopulatedDocument {
            tree,
            provenance,
            contract_type: template.contract_type.clone(),
        })
    }

    fn run_task(&self, task: &PopulationTask, contract_text: &str) -> Result<(Option<Value>, TaskRecord)> {
        let base = build_prompt(task, contract_text, self.cfg);
        let expected = task.shape();
        let mut record = TaskRecord {
            target: task.location.to_string(),
            path: task.target_path.clone(),
            depth: task.depth,
            attempts: 0,
            prompt_hashes: Vec::new(),
            status: TaskStatus::Fallback,
            failures: Vec::new(),
            chunk_ids: task.retrieved_chunks.iter().map(|c| c.chunk_id.clone()).collect(),
        };
        let mut prompt = base.clone();
        for attempt in 1..=self.cfg.retry_limit + 1 {
            record.attempts = attempt;
            record.prompt_hashes.push(prompt.hash());
            let result = self.provider.complete(&prompt)?;
            let problem = if result.finish_reason == FinishReason::Length {
                "- the answer was truncated before the JSON object was complete".to_string()
            } else {
                match extract_structured(&result.text) {
                    Err(_) => "- the answer contains no JSON object".to_string(),
                    Ok(value) => match validate_shape(&expected, &value) {
                        Ok(()) => {
                            tracing::info!(task = %record.target, attempt, "task filled");
                            record.status = TaskStatus::Filled;
                            return Ok((Some(value), record));
                        }
                        Err(mismatch) => mismatch.to_string(),
                    },
                }
            };
            tracing::warn!(task = %record.target, attempt, problem = %problem.replace('\n', " "), "task output rejected");
            record.failures.push(problem.clone());
            prompt = repair_prompt(&base, &problem, &result.text);
        }
        tracing::warn!(task = %record.target, attempts = record.attempts, "keeping placeholders");
        Ok((None, record))
    }
}

/// Replaces the node at `location` with the matching part of a validated
/// payload. Array-element tasks splice every returned element in place of
/// the prototype.
fn graft(tree: &mut Value, location: &Location, payload: Value) {
    match location.0.split_last() {
        None => *tree = payload,
        Some((Segment::Key(k), _)) => {
            if let (Some(slot), Some(v)) = (location.get_mut(tree), payload.get(k.as_str())) {
                *slot = v.clone();
            }
        }
        Some((Segment::Index(i), parent)) => {
            let key = location.last_key().unwrap_or("items");
            let elements = payload.get(key).and_then(Value::as_array).cloned().unwrap_or_default();
            if let Some(Value::Array(items)) = Location(parent.to_vec()).get_mut(tree) {
                if *i < items.len() {
                    items.splice(*i..=*i, elements);
                }
            }
        }
    }
}

fn is_removable(v: &Value) -> bool {
    match v {
        Value::String(s) => s.is_empty() || s == DATE_PLACEHOLDER,
        Value::Array(a) => a.is_empty(),
        Value::Object(o) => o.is_empty(),
        _ => false,
    }
}

/// Drops empty-text and date-placeholder leaves, then empty lists and objects, to a fixpoint.
pub fn clean(tree: &Value) -> Value {
    match tree {
        Value::Object(obj) => Value::Object(
            obj.iter()
                .map(|(k, v)| (k.clone(), clean(v)))
                .filter(|(_, v)| !is_removable(v))
                .collect(),
        ),
        Value::Array(items) => Value::Array(items.iter().map(clean).filter(|v| !is_removable(v)).collect()),
        other => other.clone(),
    }
}

#[allow(clippy::result_large_err)]
pub fn populate(
    template: &Template,
    contract_text: &str,
    kb: Option<&KnowledgeBase>,
    provider: &dyn ChatProvider,
    cfg: &PopulationConfig,
) -> std::result::Result<PopulatedDocument, PopulateError> {
    Populator::new(provider, cfg).with_kb(kb).run(template, contract_text)
}

/// Prompt for direct, template-free generation.
pub fn baseline_prompt(
    contract_text: &str,
    kb: Option<&KnowledgeBase>,
    cfg: &PopulationConfig,
    embedder: Option<&dyn EmbeddingProvider>,
) -> Result<PromptBundle> {
    let examples = if cfg.use_rag {
        let kb = kb.ok_or_else(|| Error::Precondition("retrieval requested without a knowledge base".into()))?;
        let chunks: Vec<Chunk> = kb
            .retrieve_with(contract_text, cfg.k_chunks, embedder)?
            .into_iter()
            .map(|s| s.chunk.clone())
            .collect();
        examples_section(&chunks)
    } else {
        String::new()
    };
    Ok(PromptBundle {
        system_text: prompts::BASELINE_SYSTEM.trim_end().to_string(),
        user_text: prompts::render(
            prompts::BASELINE_USER,
            &[("contract", contract_text.trim()), ("examples", &examples)],
        ),
        max_output_tokens: cfg.max_output_tokens,
        temperature: cfg.temperature,
    })
}

/// Direct generation of a whole representation in a single call.
pub fn baseline_generate(
    contract_text: &str,
    kb: Option<&KnowledgeBase>,
    provider: &dyn ChatProvider,
    cfg: &PopulationConfig,
) -> Result<Value> {
    let prompt = baseline_prompt(contract_text, kb, cfg, None)?;
    let result = provider.complete(&prompt)?;
    if result.finish_reason == FinishReason::Length {
        return Err(Error::GenerationIncomplete);
    }
    extract_structured(&result.text)
}
