//! Structural and semantic scoring of generated representations.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::keypath::key_occurrences;
use crate::llm::{extract_structured, ChatProvider, PromptBundle};
use crate::prompts;
use crate::schema::{PropertyDef, PropertyKind, ScalarType, SchemaIndex};
use crate::template::is_iso_date;

pub const DEFAULT_MU: f64 = 0.3;
pub const DEFAULT_EPSILON: f64 = 0.1;

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CoverageLists {
    pub captured: Vec<String>,
    pub uncaptured: Vec<String>,
    pub extraneous: Vec<String>,
}

impl CoverageLists {
    pub fn counts(&self) -> (usize, usize, usize) {
        (self.captured.len(), self.uncaptured.len(), self.extraneous.len())
    }

    pub fn score(&self, w: &CoverageWeights) -> Result<f64> {
        let (c, u, e) = self.counts();
        coverage_score(c, u, e, w)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CoverageWeights {
    pub mu: f64,
    pub epsilon: f64,
}

impl Default for CoverageWeights {
    fn default() -> Self {
        CoverageWeights {
            mu: DEFAULT_MU,
            epsilon: DEFAULT_EPSILON,
        }
    }
}

impl CoverageWeights {
    pub fn new(mu: f64, epsilon: f64) -> Result<Self> {
        let w = CoverageWeights { mu, epsilon };
        w.validate()?;
        Ok(w)
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("mu", self.mu), ("epsilon", self.epsilon)] {
            if !v.is_finite() || !(0.0..=1.0).contains(&v) {
                return Err(Error::Config(format!("{name} must lie in [0, 1], got {v}")));
            }
        }
        Ok(())
    }
}

/// `C * 100 / (C + mu * U + epsilon * E)`.
pub fn coverage_score(captured: usize, uncaptured: usize, extraneous: usize, w: &CoverageWeights) -> Result<f64> {
    let c = captured as f64;
    let denominator = c + w.mu * uncaptured as f64 + w.epsilon * extraneous as f64;
    if denominator == 0.0 {
        return Err(Error::DegenerateDenominator);
    }
    Ok(c * 100.0 / denominator)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PathDetail {
    pub path: String,
    pub exists: bool,
    pub adheres: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StructuralScore {
    pub percentage: f64,
    pub detail: Vec<PathDetail>,
}

fn ensure_non_empty(doc: &Value) -> Result<()> {
    match doc {
        Value::Object(o) if !o.is_empty() => Ok(()),
        _ => Err(Error::EmptyDocument),
    }
}

/// Share of distinct (index-normalized) key paths that exist in the schema.
pub fn syntactical_correctness(doc: &Value, index: &SchemaIndex) -> Result<StructuralScore> {
    ensure_non_empty(doc)?;
    let mut paths: BTreeMap<String, bool> = BTreeMap::new();
    for (path, _) in key_occurrences(doc) {
        if let std::collections::btree_map::Entry::Vacant(slot) = paths.entry(path) {
            let exists = index.path_exists(slot.key())?.is_some();
            slot.insert(exists);
        }
    }
    let valid = paths.values().filter(|e| **e).count();
    Ok(StructuralScore {
        percentage: 100.0 * valid as f64 / paths.len() as f64,
        detail: paths
            .into_iter()
            .map(|(path, exists)| PathDetail { path, exists, adheres: false })
            .collect(),
    })
}

/// Share of key occurrences whose path exists and whose value has the kind
/// the schema declares. Every occurrence counts, including each array element's keys.
pub fn schema_adherence(doc: &Value, index: &SchemaIndex) -> Result<StructuralScore> {
    ensure_non_empty(doc)?;
    let occurrences = key_occurrences(doc);
    let mut by_path: BTreeMap<String, PathDetail> = BTreeMap::new();
    let mut adherent = 0usize;
    for (path, value) in &occurrences {
        let def = index.path_exists(path)?;
        let ok = def.is_some_and(|d| value_matches(d, value));
        if ok {
            adherent += 1;
        }
        let entry = by_path.entry(path.clone()).or_insert(PathDetail {
            path: path.clone(),
            exists: def.is_some(),
            adheres: true,
        });
        entry.adheres &= ok;
    }
    Ok(StructuralScore {
        percentage: 100.0 * adherent as f64 / occurrences.len() as f64,
        detail: by_path.into_values().collect(),
    })
}

fn scalar_matches(def: &PropertyDef, v: &Value) -> bool {
    match (def.scalar_type.unwrap_or(ScalarType::String), v) {
        (ScalarType::String, Value::String(_)) => true,
        (ScalarType::Date, Value::String(s)) => is_iso_date(s),
        (ScalarType::Number, Value::Number(_)) => true,
        (ScalarType::Integer, Value::Number(n)) => {
            n.is_i64() || n.is_u64() || n.as_f64().is_some_and(|f| f.fract() == 0.0)
        }
        (ScalarType::Boolean, Value::Bool(_)) => true,
        (ScalarType::Enum, Value::String(s)) => def.enum_values.as_ref().is_none_or(|vals| vals.contains(s)),
        _ => false,
    }
}

fn value_matches(def: &PropertyDef, v: &Value) -> bool {
    match def.kind {
        PropertyKind::ObjectRef | PropertyKind::InlineObject => v.is_object(),
        PropertyKind::ArrayOfRef => v.as_array().is_some_and(|a| a.iter().all(Value::is_object)),
        PropertyKind::ArrayOfScalar => v.as_array().is_some_and(|a| a.iter().all(|x| scalar_matches(def, x))),
        PropertyKind::Scalar => scalar_matches(def, v),
    }
}

pub fn coverage_prompt(contract_text: &str, doc: &Value) -> PromptBundle {
    let cdm = serde_json::to_string_pretty(doc).expect("document serializes");
    PromptBundle::new(
        prompts::COVERAGE_SYSTEM.trim_end(),
        prompts::render(prompts::COVERAGE_USER, &[("contract", contract_text.trim()), ("cdm", &cdm)]),
    )
}

fn parse_lists(reply: &str) -> Result<CoverageLists> {
    let value = extract_structured(reply)?;
    let list = |name: &str| -> Result<Vec<String>> {
        let items = value
            .get(name)
            .and_then(Value::as_array)
            .ok_or_else(|| Error::ListParseFailure(name.to_string()))?;
        Ok(items
            .iter()
            .map(|item| match item {
                Value::String(s) => s.trim().to_string(),
                other => other.to_string(),
            })
            .filter(|s| !s.is_empty())
            .collect())
    };
    Ok(CoverageLists {
        captured: list("captured")?,
        uncaptured: list("uncaptured")?,
        extraneous: list("extraneous")?,
    })
}

/// Has the model sort contract details into captured, uncaptured and
/// extraneous lists. A reply missing a list is re-asked once.
pub fn coverage_lists(contract_text: &str, doc: &Value, provider: &dyn ChatProvider) -> Result<CoverageLists> {
    if contract_text.trim().is_empty() {
        return Err(Error::Precondition("contract text must be non-empty".into()));
    }
    ensure_non_empty(doc)?;
    let prompt = coverage_prompt(contract_text, doc);
    let reply = provider.complete(&prompt)?;
    match parse_lists(&reply.text) {
        Err(Error::ListParseFailure(missing)) => {
            tracing::warn!(missing = %missing, "coverage reply incomplete, asking again");
            let mut again = prompt.clone();
            again.user_text.push('\n');
            again.user_text.push_str(&prompts::render(prompts::COVERAGE_REASK, &[]));
            parse_lists(&provider.complete(&again)?.text)
        }
        other => other,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub contract_id: String,
    pub contract_type: String,
    pub syntactical_correctness: f64,
    pub schema_adherence: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub coverage_score: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lists: Option<CoverageLists>,
    pub weights: CoverageWeights,
    pub per_path_detail: Vec<PathDetail>,
}

impl EvaluationReport {
    /// Recomputes the coverage score from the stored lists and weights.
    pub fn recomputed_coverage(&self) -> Option<Result<f64>> {
        self.lists.as_ref().map(|l| l.score(&self.weights))
    }
}

/// Structural metrics, plus coverage when a provider is given.
pub fn evaluate(
    contract_id: &str,
    contract_type: &str,
    contract_text: &str,
    doc: &Value,
    index: &SchemaIndex,
    weights: &CoverageWeights,
    provider: Option<&dyn ChatProvider>,
) -> Result<EvaluationReport> {
    weights.validate()?;
    let syn = syntactical_correctness(doc, index)?;
    let adh = schema_adherence(doc, index)?;
    let adheres: BTreeMap<&str, bool> = adh.detail.iter().map(|d| (d.path.as_str(), d.adheres)).collect();
    let per_path_detail = syn
        .detail
        .iter()
        .map(|d| PathDetail {
            path: d.path.clone(),
            exists: d.exists,
            adheres: adheres.get(d.path.as_str()).copied().unwrap_or(false),
        })
        .collect();
    let (coverage, lists) = match provider {
        Some(p) => {
            let lists = coverage_lists(contract_text, doc, p)?;
            (Some(lists.score(weights)?), Some(lists))
        }
        None => (None, None),
    };
    Ok(EvaluationReport {
        contract_id: contract_id.to_string(),
        contract_type: contract_type.to_string(),
        syntactical_correctness: syn.percentage,
        schema_adherence: adh.percentage,
        coverage_score: coverage,
        lists,
        weights: *weights,
        per_path_detail,
    })
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

/// Arithmetic mean and population standard deviation.
pub fn mean_std(values: &[f64]) -> Option<MeanStd> {
    if values.is_empty() {
        return None;
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    Some(MeanStd { mean, std: var.sqrt() })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupSummary {
    pub group: String,
    pub count: usize,
    pub syntactical_correctness: MeanStd,
    pub schema_adherence: MeanStd,
    /// Absent when no report in the group carries a coverage score.
    pub coverage_score: Option<MeanStd>,
}

pub const COMBINED_GROUP: &str = "ALL";

/// Per-group statistics (groups sorted by name) followed by the combined row.
pub fn aggregate(reports: &[EvaluationReport]) -> Result<Vec<GroupSummary>> {
    if reports.is_empty() {
        return Err(Error::EmptyGroup(COMBINED_GROUP.into()));
    }
    let mut groups: BTreeMap<&str, Vec<&EvaluationReport>> = BTreeMap::new();
    for r in reports {
        groups.entry(r.contract_type.as_str()).or_default().push(r);
    }
    let mut rows: Vec<GroupSummary> = groups
        .into_iter()
        .map(|(g, rs)| summarize(g, &rs))
        .collect::<Result<_>>()?;
    rows.push(summarize(COMBINED_GROUP, &reports.iter().collect::<Vec<_>>())?);
    Ok(rows)
}

/// Statistics for the reports of one contract type.
pub fn aggregate_group(reports: &[EvaluationReport], group: &str) -> Result<GroupSummary> {
    let members: Vec<&EvaluationReport> = reports.iter().filter(|r| r.contract_type == group).collect();
    summarize(group, &members)
}

fn summarize(group: &str, reports: &[&EvaluationReport]) -> Result<GroupSummary> {
    let col = |f: &dyn Fn(&EvaluationReport) -> Option<f64>| -> Vec<f64> { reports.iter().filter_map(|r| f(r)).collect() };
    let syn = mean_std(&col(&|r| Some(r.syntactical_correctness))).ok_or_else(|| Error::EmptyGroup(group.into()))?;
    let adh = mean_std(&col(&|r| Some(r.schema_adherence))).ok_or_else(|| Error::EmptyGroup(group.into()))?;
    Ok(GroupSummary {
        group: group.to_string(),
        count: reports.len(),
        syntactical_correctness: syn,
        schema_adherence: adh,
        coverage_score: mean_std(&col(&|r| r.coverage_score)),
    })
}

/// Table-shaped CSV: one row per group plus the combined row.
pub fn summary_csv(rows: &[GroupSummary]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let io_err = |e: csv::Error| Error::Config(format!("csv: {e}"));
    w.write_record([
        "contract_type",
        "n",
        "syntactical_correctness_mean",
        "syntactical_correctness_std",
        "schema_adherence_mean",
        "schema_adherence_std",
        "coverage_mean",
        "coverage_std",
    ])
    .map_err(io_err)?;
    for r in rows {
        let (cm, cs) = match r.coverage_score {
            Some(c) => (format!("{:.2}", c.mean), format!("{:.2}", c.std)),
            None => (String::new(), String::new()),
        };
        w.write_record([
            r.group.clone(),
            r.count.to_string(),
            format!("{:.2}", r.syntactical_correctness.mean),
            format!("{:.2}", r.syntactical_correctness.std),
            format!("{:.2}", r.schema_adherence.mean),
            format!("{:.2}", r.schema_adherence.std),
            cm,
            cs,
        ])
        .map_err(io_err)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Config(format!("csv: {e}")))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}
