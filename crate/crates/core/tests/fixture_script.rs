//! The checked-in mock script for the fixture batch must match what the
//! schema-typed filler generates. Set `CDMFILL_UPDATE_FIXTURES=1` to rewrite it.

#[test]
fn checked_in_mock_script_is_current() {
    let path = cdmfill_testkit::cdm_dir().join("mock_script.json");
    let generated = cdmfill_testkit::fixture_batch_script().to_pretty_json() + "\n";
    if std::env::var_os("CDMFILL_UPDATE_FIXTURES").is_some() {
        std::fs::write(&path, &generated).unwrap();
    }
    let on_disk = std::fs::read_to_string(&path).unwrap_or_default();
    assert!(on_disk == generated, "{} is stale; rerun with CDMFILL_UPDATE_FIXTURES=1", path.display());
}
