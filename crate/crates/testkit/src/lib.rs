//! Fixture locations and scripted mock providers shared by the test suites.

use std::path::{Path, PathBuf};

use cdmfill_core::config::RunConfig;
use cdmfill_core::eval::CoverageLists;
use cdmfill_core::keypath;
use cdmfill_core::llm::{MockResponse, MockRule, MockScript};
use cdmfill_core::populate::{build_prompt, plan_tasks, PopulationConfig};
use cdmfill_core::schema::{load_schema_dir, PropertyDef, ScalarType, SchemaIndex};
use cdmfill_core::template::{build_template, flatten_examples, Placeholder, Template};
use serde_json::{json, Map, Value};

/// Marker text unique to the coverage prompt.
pub const COVERAGE_MARKER: &str = "Read the contract description one sentence at a time";
/// Marker text unique to the baseline prompt.
pub const BASELINE_MARKER: &str = "into its CDM JSON representation";
/// Marker text unique to the synthesis prompt.
pub const SYNTHESIS_MARKER: &str = "in the style of the reference term sheets";

pub fn fixtures() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../core/fixtures")
}

pub fn cdm_dir() -> PathBuf {
    fixtures().join("cdm")
}

pub fn minimal_dir() -> PathBuf {
    fixtures().join("minimal")
}

pub fn cdm_index() -> SchemaIndex {
    load_schema_dir(cdm_dir().join("schema"), "trade-state.json").expect("fixture schema loads")
}

pub fn cdm_config() -> RunConfig {
    RunConfig::load(cdm_dir().join("pipeline.toml")).expect("fixture config loads")
}

pub fn cdm_template(index: &SchemaIndex, contract_type: &str) -> Template {
    let keys = flatten_examples(cdm_dir().join("examples").join(contract_type)).expect("examples flatten");
    build_template(index, &keys, contract_type).expect("template builds")
}

/// A value of the right kind for a leaf at `path`, taken from the schema
/// when the path is known there and from the placeholder otherwise.
pub fn typed_value(def: Option<&PropertyDef>, placeholder: &Value, path: &str) -> Value {
    let name = path.rsplit('.').next().unwrap_or(path);
    let scalar = def.and_then(|d| d.scalar_type);
    if let Some(values) = def.and_then(|d| d.enum_values.as_ref()).filter(|v| !v.is_empty()) {
        return Value::String(values[0].clone());
    }
    match (scalar, Placeholder::classify(placeholder)) {
        (Some(ScalarType::Date), _) | (None, Some(Placeholder::Date)) => json!("2024-01-15"),
        (Some(ScalarType::Integer), _) => json!(2),
        (Some(ScalarType::Number), _) | (None, Some(Placeholder::ZeroNumber)) => json!(1.5),
        (Some(ScalarType::Boolean), _) | (None, Some(Placeholder::FalseBoolean)) => json!(true),
        _ => Value::String(format!("{name}-value")),
    }
}

/// Replaces every placeholder leaf of `payload` with a schema-typed value.
/// `base` is the normalized path of the payload's parent.
pub fn typed_fill(index: &SchemaIndex, payload: &Value, base: &str) -> Value {
    fn walk(index: &SchemaIndex, v: &Value, path: &str) -> Value {
        match v {
            Value::Object(obj) => {
                let mut out = Map::new();
                for (k, c) in obj {
                    out.insert(k.clone(), walk(index, c, &keypath::join(path, k)));
                }
                Value::Object(out)
            }
            Value::Array(items) => Value::Array(items.iter().map(|c| walk(index, c, path)).collect()),
            leaf => {
                let def = index.path_exists(path).ok().flatten();
                typed_value(def, leaf, path)
            }
        }
    }
    walk(index, payload, base)
}

pub fn fenced(v: &Value) -> String {
    format!("```json\n{}\n```", serde_json::to_string_pretty(v).expect("value serializes"))
}

/// Adds one hash-keyed, schema-typed response per population task.
pub fn script_population(
    script: &mut MockScript,
    index: &SchemaIndex,
    template: &Template,
    contract_text: &str,
    cfg: &PopulationConfig,
) {
    for task in plan_tasks(template, cfg.depth_threshold) {
        let filled = typed_fill(index, &task.payload(), &task.context_path());
        let prompt = build_prompt(&task, contract_text, cfg);
        script.insert(&prompt, MockResponse::stop(fenced(&filled)));
    }
}

pub fn coverage_lists_fixture() -> CoverageLists {
    let s = |v: &[&str]| v.iter().map(|x| x.to_string()).collect::<Vec<_>>();
    CoverageLists {
        captured: s(&["parties", "trade date", "effective date", "termination date", "notional", "currency", "rate", "identifier"]),
        uncaptured: s(&["spread", "day count", "payment frequency", "business centre", "calculation agent"]),
        extraneous: s(&["version", "scheme", "position state"]),
    }
}

pub fn coverage_rule() -> MockRule {
    MockRule {
        contains: COVERAGE_MARKER.to_string(),
        response: MockResponse::stop(serde_json::to_string(&coverage_lists_fixture()).expect("lists serialize")),
    }
}

/// Baseline answer with one invented key and one type-clashing value.
pub fn flawed_baseline_document() -> Value {
    json!({
        "trade": {
            "tradeDate": "2024-03-10",
            "notionalAmount": 25000000,
            "tradableProduct": {
                "product": {
                    "economicTerms": {
                        "effectiveDate": "2024-03-14",
                        "terminationDate": "seven years"
                    }
                }
            }
        }
    })
}

/// Mock script answering every prompt of the fixture batch.
pub fn fixture_batch_script() -> MockScript {
    let cfg = cdm_config();
    let population = cfg.population();
    let index = cdm_index();
    let mut script = MockScript::default();
    for entry in &cfg.contracts {
        let template = cdm_template(&index, &entry.contract_type);
        let text = std::fs::read_to_string(&entry.text).expect("contract text readable");
        script_population(&mut script, &index, &template, &text, &population);
    }
    script.rules.push(coverage_rule());
    script.rules.push(MockRule {
        contains: BASELINE_MARKER.to_string(),
        response: MockResponse::stop(fenced(&flawed_baseline_document())),
    });
    script.rules.push(MockRule {
        contains: SYNTHESIS_MARKER.to_string(),
        response: MockResponse::stop(
            "Bank A and Corporate B agree an interest rate swap on EUR 25,000,000 with trade date 10 March 2024.",
        ),
    });
    script
}

/// Chunk bodies of the 20-chunk retrieval corpus, ids `c01`..`c20`.
pub const TWENTY_CHUNK_BODIES: [&str; 20] = [
    r#"{"party":{"name":"bank"}}"#,
    r#"{"party":{"name":"fund"}}"#,
    r#"{"payerReceiver":{"payer":"party1","receiver":"party2"}}"#,
    r#"{"rateSpecification":{"fixedRate":{"rateValue":"fixed"}}}"#,
    r#"{"rateSpecification":{"floatingRate":{"rateOption":"euribor"}}}"#,
    r#"{"optionType":"call"}"#,
    r#"{"optionType":"put"}"#,
    r#"{"exerciseTerms":{"style":"european"}}"#,
    r#"{"exerciseTerms":{"style":"american"}}"#,
    r#"{"strike":{"strikePrice":"high","currency":"usd"}}"#,
    r#"{"commodity":{"commodityName":"brent","exchange":"ice"}}"#,
    r#"{"creditEvents":{"bankruptcy":true,"failureToPay":true}}"#,
    r#"{"referenceEntity":{"entityName":"acme"}}"#,
    r#"{"settlementTerms":{"settlementType":"physical"}}"#,
    r#"{"foreignExchange":{"exchangeRate":"spot"}}"#,
    r#"{"returnTerms":{"returnType":"total"}}"#,
    r#"{"tradeIdentifier":{"issuer":"bank"}}"#,
    r#"{"assignedIdentifier":{"identifier":{"value":"bank"}}}"#,
    r#"{"paymentFrequency":{"period":"month"}}"#,
    r#"{"dayCountFraction":"act"}"#,
];

pub fn twenty_chunk_kb() -> cdmfill_core::kb::KnowledgeBase {
    let mut kb = cdmfill_core::kb::KnowledgeBase::default();
    for (i, body) in TWENTY_CHUNK_BODIES.iter().enumerate() {
        let value: Value = serde_json::from_str(body).expect("fixture body parses");
        let key = value.as_object().and_then(|o| o.keys().next().cloned()).unwrap_or_default();
        kb.push(cdmfill_core::kb::Chunk {
            chunk_id: format!("c{:02}", i + 1),
            contract_type: "fixture".into(),
            source_path: key,
            body: body.to_string(),
            token_estimate: cdmfill_core::kb::estimate_tokens(body),
            oversized: false,
            vector: None,
        })
        .expect("ids are unique");
    }
    kb
}

/// Hand-computed rankings (distinct-token overlap over distinct chunk tokens)
/// for three crafted queries at k = 4.
pub fn twenty_chunk_expectations() -> Vec<(&'static str, Vec<(&'static str, f64)>)> {
    vec![
        ("party name bank", vec![("c01", 1.0), ("c02", 2.0 / 3.0), ("c17", 1.0 / 3.0), ("c18", 0.25)]),
        (
            "optionType style european call",
            vec![("c06", 1.0), ("c08", 2.0 / 3.0), ("c07", 0.5), ("c09", 1.0 / 3.0)],
        ),
        ("exchange rate spot ice", vec![("c11", 0.4), ("c15", 1.0 / 3.0), ("c01", 0.0), ("c02", 0.0)]),
    ]
}
