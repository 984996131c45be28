use std::time::Instant;

use cdmfill_core::eval::COMBINED_GROUP;
use cdmfill_core::llm::{MockProvider, MockScript};
use cdmfill_core::pipeline::{run_pipeline, ContractStatus, PipelineSettings};
use cdmfill_core::Error;
use cdmfill_testkit::{cdm_config, fixture_batch_script};

fn settings(out: &std::path::Path) -> PipelineSettings {
    let cfg = cdm_config();
    let mut s = PipelineSettings::new(cfg.schema_dir.clone().unwrap(), cfg.root.clone().unwrap(), out);
    s.examples_dir = cfg.examples_dir.clone();
    s.population = cfg.population();
    s.contracts = cfg.contracts.clone();
    s
}

#[test]
fn fixture_batch_scores_full_marks() {
    let tmp = tempfile::tempdir().unwrap();
    let provider = MockProvider::new(fixture_batch_script());
    let start = Instant::now();
    let summary = run_pipeline(&settings(tmp.path()), &provider).unwrap();
    assert!(start.elapsed().as_secs_f64() < 10.0);
    assert_eq!(summary.results.len(), 6);
    for r in &summary.results {
        assert_eq!(r.status, ContractStatus::Ok, "{}: {:?}", r.contract_id, r.error);
        let rep = r.report.as_ref().unwrap();
        assert_eq!(rep.syntactical_correctness, 100.0, "{}", r.contract_id);
        assert_eq!(rep.schema_adherence, 100.0, "{}: {:?}", r.contract_id, rep.per_path_detail);
        assert!((rep.coverage_score.unwrap() - 81.63265306122449).abs() < 1e-9);
        for f in ["cdm.json", "provenance.json", "report.json", "template.json"] {
            assert!(tmp.path().join(&r.contract_id).join(f).is_file(), "{f}");
        }
    }
    assert_eq!(summary.groups.len(), 7);
    assert_eq!(summary.groups.last().unwrap().group, COMBINED_GROUP);
    for f in ["results.csv", "summary.csv", "summary.json"] {
        assert!(tmp.path().join(f).is_file());
    }
}

#[test]
fn failed_contract_becomes_a_row() {
    let tmp = tempfile::tempdir().unwrap();
    let empty = tempfile::tempdir().unwrap();
    let mut s = settings(tmp.path());
    s.contracts.truncate(2);
    s.contracts[1].examples = Some(empty.path().to_path_buf());
    let provider = MockProvider::new(fixture_batch_script());
    let summary = run_pipeline(&s, &provider).unwrap();
    assert_eq!(summary.results[0].status, ContractStatus::Ok);
    assert_eq!(summary.results[1].status, ContractStatus::Failed);
    assert!(summary.results[1].error.as_deref().unwrap().contains("example"));
    let csv = std::fs::read_to_string(tmp.path().join("results.csv")).unwrap();
    assert_eq!(csv.lines().count(), 3);
    assert!(csv.lines().nth(2).unwrap().starts_with("eqs-001,equity-swap,failed,,,,"));
    // Only the successful contract contributes to the summary groups.
    assert_eq!(summary.groups.len(), 2);
}

#[test]
fn provider_unavailable_aborts_the_batch() {
    let tmp = tempfile::tempdir().unwrap();
    let provider = MockProvider::new(MockScript::default());
    assert!(matches!(
        run_pipeline(&settings(tmp.path()), &provider),
        Err(Error::ProviderUnavailable(_))
    ));
}

#[test]
fn empty_batch_is_a_config_error() {
    let tmp = tempfile::tempdir().unwrap();
    let mut s = settings(tmp.path());
    s.contracts.clear();
    let provider = MockProvider::new(fixture_batch_script());
    assert!(matches!(run_pipeline(&s, &provider), Err(Error::Config(_))));
}
