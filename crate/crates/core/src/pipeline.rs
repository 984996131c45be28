//! Batch conversion: template derivation, population and evaluation for a
//! list of contracts, with a grouped summary at the end.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::config::{ContractEntry, DEFAULT_CHUNK_BUDGET};
use crate::error::{read_to_string, Error, Result};
use crate::eval::{self, CoverageWeights, EvaluationReport, GroupSummary};
use crate::io::{write_atomic, write_json};
use crate::kb::{self, KnowledgeBase};
use crate::llm::ChatProvider;
use crate::populate::{clean, PopulationConfig, Populator};
use crate::schema::{self, SchemaIndex};
use crate::template::{self, Template};

#[derive(Debug, Clone)]
pub struct PipelineSettings {
    pub schema_dir: PathBuf,
    pub root: PathBuf,
    pub examples_dir: Option<PathBuf>,
    pub kb_path: Option<PathBuf>,
    pub out_dir: PathBuf,
    pub population: PopulationConfig,
    pub weights: CoverageWeights,
    pub chunk_budget: usize,
    pub coverage: bool,
    pub contracts: Vec<ContractEntry>,
}

impl PipelineSettings {
    pub fn new(schema_dir: impl Into<PathBuf>, root: impl Into<PathBuf>, out_dir: impl Into<PathBuf>) -> Self {
        PipelineSettings {
            schema_dir: schema_dir.into(),
            root: root.into(),
            examples_dir: None,
            kb_path: None,
            out_dir: out_dir.into(),
            population: PopulationConfig::default(),
            weights: CoverageWeights::default(),
            chunk_budget: DEFAULT_CHUNK_BUDGET,
            coverage: true,
            contracts: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ContractStatus {
    Ok,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContractResult {
    pub contract_id: String,
    pub contract_type: String,
    pub status: ContractStatus,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub report: Option<EvaluationReport>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineSummary {
    pub results: Vec<ContractResult>,
    pub groups: Vec<GroupSummary>,
}

fn is_fatal(e: &Error) -> bool {
    matches!(e, Error::ProviderUnavailable(_) | Error::AuthFailure(_) | Error::Timeout(_))
}

fn examples_for(settings: &PipelineSettings, entry: &ContractEntry) -> Result<PathBuf> {
    entry
        .examples
        .clone()
        .or_else(|| settings.examples_dir.as_ref().map(|d| d.join(&entry.contract_type)))
        .ok_or_else(|| Error::Config(format!("no example directory for contract `{}`", entry.id)))
}

/// Runs every contract. Provider failures abort the batch; any other
/// per-contract failure becomes a failed row.
pub fn run_pipeline(settings: &PipelineSettings, provider: &dyn ChatProvider) -> Result<PipelineSummary> {
    if settings.contracts.is_empty() {
        return Err(Error::Config("the contract batch is empty".into()));
    }
    settings.population.validate()?;
    settings.weights.validate()?;
    let index = schema::load_schema_dir(&settings.schema_dir, &settings.root)?;
    let shared_kb = match &settings.kb_path {
        Some(p) if settings.population.use_rag => Some(KnowledgeBase::load(p)?),
        _ => None,
    };

    let mut templates: BTreeMap<PathBuf, Result<Template>> = BTreeMap::new();
    let mut kbs: BTreeMap<PathBuf, Result<KnowledgeBase>> = BTreeMap::new();
    let mut results = Vec::new();

    for entry in &settings.contracts {
        tracing::info!(contract = %entry.id, contract_type = %entry.contract_type, "contract started");
        let outcome = run_contract(settings, &index, shared_kb.as_ref(), &mut templates, &mut kbs, entry, provider);
        let result = match outcome {
            Ok(report) => ContractResult {
                contract_id: entry.id.clone(),
                contract_type: entry.contract_type.clone(),
                status: ContractStatus::Ok,
                error: None,
                report: Some(report),
            },
            Err(e) if is_fatal(&e) => return Err(e),
            Err(e) => {
                tracing::warn!(contract = %entry.id, error = %e, "contract failed");
                ContractResult {
                    contract_id: entry.id.clone(),
                    contract_type: entry.contract_type.clone(),
                    status: ContractStatus::Failed,
                    error: Some(format!("{}: {e}", e.kind())),
                    report: None,
                }
            }
        };
        results.push(result);
    }

    let reports: Vec<EvaluationReport> = results.iter().filter_map(|r| r.report.clone()).collect();
    let groups = if reports.is_empty() { Vec::new() } else { eval::aggregate(&reports)? };
    let summary = PipelineSummary { results, groups };
    write_summary(&settings.out_dir, &summary)?;
    Ok(summary)
}

fn run_contract(
    settings: &PipelineSettings,
    index: &SchemaIndex,
    shared_kb: Option<&KnowledgeBase>,
    templates: &mut BTreeMap<PathBuf, Result<Template>>,
    kbs: &mut BTreeMap<PathBuf, Result<KnowledgeBase>>,
    entry: &ContractEntry,
    provider: &dyn ChatProvider,
) -> Result<EvaluationReport> {
    let examples = examples_for(settings, entry)?;
    let template = templates
        .entry(examples.clone())
        .or_insert_with(|| {
            let keys = template::flatten_examples(&examples)?;
            template::build_template(index, &keys, &entry.contract_type)
        })
        .as_ref()
        .map_err(|e| Error::Precondition(format!("template for `{}`: {e}", entry.contract_type)))?
        .clone();
    let kb = if settings.population.use_rag && shared_kb.is_none() {
        let kb = kbs
            .entry(examples.clone())
            .or_insert_with(|| kb::ingest_examples(&examples, &entry.contract_type, settings.chunk_budget))
            .as_ref()
            .map_err(|e| Error::Precondition(format!("knowledge base for `{}`: {e}", entry.contract_type)))?;
        Some(kb.clone())
    } else {
        shared_kb.cloned()
    };

    let dir = settings.out_dir.join(&entry.id);
    write_atomic(&dir.join("template.json"), (template.to_pretty_json() + "\n").as_bytes())?;
    let contract_text = read_to_string(&entry.text)?;
    let populated = Populator::new(provider, &settings.population)
        .with_kb(kb.as_ref())
        .run(&template, &contract_text);
    let populated = match populated {
        Ok(p) => p,
        Err(e) => {
            write_json(&dir.join("provenance.json"), &e.provenance)?;
            return Err(e.source);
        }
    };
    write_json(&dir.join("provenance.json"), &populated.provenance)?;
    let cdm = clean(&populated.tree);
    write_json(&dir.join("cdm.json"), &cdm)?;

    let report = eval::evaluate(
        &entry.id,
        &entry.contract_type,
        &contract_text,
        &cdm,
        index,
        &settings.weights,
        settings.coverage.then_some(provider),
    )?;
    write_json(&dir.join("report.json"), &report)?;
    Ok(report)
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.2}")).unwrap_or_default()
}

pub fn results_csv(results: &[ContractResult]) -> Result<String> {
    let csv_err = |e: csv::Error| Error::Config(format!("csv: {e}"));
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record([
        "contract_id",
        "contract_type",
        "status",
        "syntactical_correctness",
        "schema_adherence",
        "coverage_score",
        "error",
    ])
    .map_err(csv_err)?;
    for r in results {
        let rep = r.report.as_ref();
        w.write_record([
            r.contract_id.clone(),
            r.contract_type.clone(),
            match r.status {
                ContractStatus::Ok => "ok".to_string(),
                ContractStatus::Failed => "failed".to_string(),
            },
            fmt_opt(rep.map(|x| x.syntactical_correctness)),
            fmt_opt(rep.map(|x| x.schema_adherence)),
            fmt_opt(rep.and_then(|x| x.coverage_score)),
            r.error.clone().unwrap_or_default(),
        ])
        .map_err(csv_err)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Config(format!("csv: {e}")))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

fn write_summary(out_dir: &Path, summary: &PipelineSummary) -> Result<()> {
    write_atomic(&out_dir.join("results.csv"), results_csv(&summary.results)?.as_bytes())?;
    write_atomic(&out_dir.join("summary.csv"), eval::summary_csv(&summary.groups)?.as_bytes())?;
    write_json(&out_dir.join("summary.json"), summary)
}

/// Reads every `*.json` evaluation report under `dir`.
pub fn load_reports(dir: &Path) -> Result<Vec<EvaluationReport>> {
    let mut reports = Vec::new();
    for file in template::json_files(dir).map_err(|_| Error::EmptyGroup(dir.display().to_string()))? {
        let value: Value = crate::error::parse_json(&file, &read_to_string(&file)?)?;
        if value.get("syntactical_correctness").is_none() {
            continue;
        }
        reports.push(serde_json::from_value(value).map_err(|e| Error::MalformedDocument {
            file: file.clone(),
            offset: 0,
            message: e.to_string(),
        })?);
    }
    Ok(reports)
}
