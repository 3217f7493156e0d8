use std::path::{Path, PathBuf};

use patchguide::config::{Backend, LoadedConfig, Overrides};
use patchguide::extraction::ActionInventory;
use patchguide::generator::PromptKind;
use patchguide::matcher::Origin;
use patchguide::pipeline::{read_jsonl, DiscardLine, GuidanceLine, Pipeline, PipelineError, RunManifest};
use patchguide::store::PatternStore;

fn fixtures() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures")
}

fn pipeline(config: &str, out: &Path, overrides: Overrides) -> Pipeline {
    let overrides = Overrides { out: Some(out.to_path_buf()), ..overrides };
    Pipeline::new(LoadedConfig::load(&fixtures().join(config), &overrides).unwrap())
}

/// Copies the fixture directory so a test can edit files in place.
fn scratch_fixtures() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    for entry in std::fs::read_dir(fixtures()).unwrap() {
        let entry = entry.unwrap();
        if entry.file_type().unwrap().is_file() {
            std::fs::copy(entry.path(), dir.path().join(entry.file_name())).unwrap();
        }
    }
    dir
}

#[test]
fn edge_corpus_counts_discards_and_inventory() {
    let out = tempfile::tempdir().unwrap();
    let p = pipeline("config_edge.toml", out.path(), Overrides::default());
    let ingest = p.ingest().unwrap();
    assert_eq!((ingest.pairs, ingest.invalid, ingest.train, ingest.test), (8, 1, 5, 3));

    let extract = p.extract().unwrap();
    assert_eq!((extract.pairs, extract.accepted, extract.discarded), (7, 6, 1));
    assert_eq!(extract.inventory_version, 2);

    let discards: Vec<DiscardLine> = read_jsonl(&p.artifact("discards.jsonl")).unwrap();
    assert_eq!(discards.len(), 1);
    assert_eq!(discards[0].pair_id, "t4");
    assert_eq!(discards[0].transcript.len(), 3);

    let actions = std::fs::read_to_string(p.artifact("actions.jsonl")).unwrap();
    let inventory = ActionInventory::from_jsonl(&actions, 2).unwrap();
    let novel = inventory.find("Insert Null Assignment").unwrap();
    assert!(!novel.seed);
    assert_eq!(inventory.actions.len(), 19);

    let store = PatternStore::load(&p.artifact("patterns.jsonl")).unwrap();
    assert!(store.get_by_pair("x1").is_none());
    assert_eq!(store.get_by_pair("s1").unwrap().action, "Insert Null Pointer Checker");
    assert_eq!(store.get_by_pair("t2").unwrap().key_element, "n >= BUF_MAX");
}

#[test]
fn include_invalid_routes_bad_cwe_to_discards() {
    let out = tempfile::tempdir().unwrap();
    let overrides = Overrides { out: Some(out.path().to_path_buf()), ..Default::default() };
    let mut cfg = LoadedConfig::load(&fixtures().join("config_edge.toml"), &overrides).unwrap();
    cfg.config.include_invalid = true;
    let scratch = scratch_fixtures();
    std::fs::write(
        scratch.path().join("mock_instruct.jsonl"),
        std::fs::read_to_string(fixtures().join("mock_instruct.jsonl")).unwrap()
            + "{\"capability\":\"instruct\",\"match\":{\"contains\":\"int f(void)\"},\"responses\":[\"Mutate Return Statement:return 2;\"]}\n",
    )
    .unwrap();
    cfg.base_dir = scratch.path().to_path_buf();
    let p = Pipeline::new(cfg);
    p.ingest().unwrap();
    let extract = p.extract().unwrap();
    assert_eq!(extract.pairs, 8);
    let discards: Vec<DiscardLine> = read_jsonl(&p.artifact("discards.jsonl")).unwrap();
    let x1 = discards.iter().find(|d| d.pair_id == "x1").unwrap();
    assert!(x1.reason.contains("invalid CWE id"), "{}", x1.reason);
}

#[test]
fn retrieval_never_uses_test_patterns() {
    let out = tempfile::tempdir().unwrap();
    let p = pipeline("config.toml", out.path(), Overrides::default());
    p.ingest().unwrap();
    p.extract().unwrap();
    let summary = p.match_guidance().unwrap();
    assert_eq!(summary.instances, 3);
    let lines: Vec<GuidanceLine> = read_jsonl(&p.artifact("guidance.jsonl")).unwrap();
    let s3 = lines.iter().find(|l| l.pair_id == "s3").unwrap();
    assert_eq!(s3.candidates[0].key_element, "n->data->refs--");
    assert!(lines.iter().flat_map(|l| &l.candidates).all(|c| c.origin == Origin::Retrieval));

    let full = summary.full.unwrap();
    assert_eq!(full.n, 3);
    assert!((full.recall_at_k - 2.0 / 3.0).abs() < 1e-12);
}

#[test]
fn retrieval_falls_back_to_whole_store_for_unseen_cwe() {
    let scratch = scratch_fixtures();
    let pairs = std::fs::read_to_string(scratch.path().join("pairs.jsonl")).unwrap();
    let extra = serde_json::json!({
        "pair_id": "s4", "language": "c", "split": "test",
        "cwe_id": "CWE-190", "cwe_name": "Integer Overflow or Wraparound",
        "vulnerable": "size_t total(size_t n)\n{\n    return n * 8;\n}",
        "fixed": "size_t total(size_t n)\n{\n    if (n > SIZE_MAX / 8)\n        return 0;\n    return n * 8;\n}",
        "cve_description": null
    });
    std::fs::write(scratch.path().join("pairs.jsonl"), format!("{pairs}{extra}\n")).unwrap();
    std::fs::write(
        scratch.path().join("mock_instruct.jsonl"),
        std::fs::read_to_string(fixtures().join("mock_instruct.jsonl")).unwrap()
            + "{\"capability\":\"instruct\",\"match\":{\"contains\":\"size_t total(\"},\"responses\":[\"Insert Range Checker:n > SIZE_MAX / 8\"]}\n",
    )
    .unwrap();

    let out = tempfile::tempdir().unwrap();
    let overrides = Overrides { out: Some(out.path().to_path_buf()), ..Default::default() };
    let p = Pipeline::new(LoadedConfig::load(&scratch.path().join("config.toml"), &overrides).unwrap());
    p.ingest().unwrap();
    p.extract().unwrap();
    p.match_guidance().unwrap();
    let lines: Vec<GuidanceLine> = read_jsonl(&p.artifact("guidance.jsonl")).unwrap();
    let s4 = lines.iter().find(|l| l.pair_id == "s4").unwrap();
    assert_eq!(s4.candidates.len(), 3);
    assert!(s4.candidates.iter().all(|c| c.origin == Origin::RetrievalFallback));
    assert!(s4.candidates.windows(2).all(|w| w[0].score >= w[1].score));
}

#[test]
fn remote_backend_reads_seq2seq_beams_in_score_order() {
    let out = tempfile::tempdir().unwrap();
    let p = pipeline("config.toml", out.path(), Overrides { backend: Some(Backend::Remote), ..Default::default() });
    p.ingest().unwrap();
    p.extract().unwrap();
    let summary = p.match_guidance().unwrap();
    let lines: Vec<GuidanceLine> = read_jsonl(&p.artifact("guidance.jsonl")).unwrap();
    let s2 = lines.iter().find(|l| l.pair_id == "s2").unwrap();
    assert_eq!(s2.candidates[0].key_element, "n >= BUF_MAX");
    assert_eq!(s2.candidates[1].action, "Insert Conditional Expression");
    assert!(s2.candidates.iter().all(|c| c.origin == Origin::Remote));
    assert_eq!(summary.full.unwrap().recall_at_k, 1.0);
}

#[test]
fn stages_require_earlier_artifacts() {
    let out = tempfile::tempdir().unwrap();
    let p = pipeline("config.toml", out.path(), Overrides::default());
    assert!(matches!(p.extract(), Err(PipelineError::MissingArtifact(_))));
    p.ingest().unwrap();
    assert!(matches!(p.match_guidance(), Err(PipelineError::MissingArtifact(_))));
    assert!(matches!(p.evaluate(), Err(PipelineError::MissingArtifact(_))));
}

#[test]
fn generation_failures_are_recorded_and_reported() {
    let scratch = scratch_fixtures();
    std::fs::write(
        scratch.path().join("mock_complete.jsonl"),
        "{\"capability\":\"complete\",\"match\":{\"contains\":\"set_at(\"},\"responses\":[{\"error\":\"model overloaded\"}]}\n\
         {\"capability\":\"complete\",\"responses\":[\"int unrelated(void)\\n{\\n    return 0;\\n}\"]}\n",
    )
    .unwrap();
    let out = tempfile::tempdir().unwrap();
    let overrides = Overrides { out: Some(out.path().to_path_buf()), mode: Some(PromptKind::Base), ..Default::default() };
    let p = Pipeline::new(LoadedConfig::load(&scratch.path().join("config.toml"), &overrides).unwrap());
    p.ingest().unwrap();
    let err = p.generate().unwrap_err();
    assert!(matches!(err, PipelineError::Partial { stage: "generate", failed: 10 }), "{err}");

    let manifest: RunManifest =
        serde_json::from_str(&std::fs::read_to_string(p.artifact("run_manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest.requested_samples, 3 * 10 * 2);
    assert_eq!(manifest.received_samples, 2 * 10 * 2);
    let s2 = manifest.pairs.iter().find(|s| s.pair_id == "s2").unwrap();
    assert_eq!(s2.failures.len(), 10);
    assert_eq!(s2.unique_candidates, 0);
    let report = p.evaluate().unwrap();
    assert_eq!((report.n, report.em_true), (3, 0));
}

#[test]
fn guided_generation_without_guidance_skips_the_pair() {
    let out = tempfile::tempdir().unwrap();
    let p = pipeline("config.toml", out.path(), Overrides::default());
    p.ingest().unwrap();
    std::fs::write(
        p.artifact("guidance.jsonl"),
        "{\"pair_id\":\"s1\",\"candidates\":[{\"action\":\"Insert Null Pointer Checker\",\"key_element\":\"b == NULL\",\"score\":1.0,\"origin\":\"oracle\"}]}\n",
    )
    .unwrap();
    let manifest = p.generate().unwrap();
    let skipped: Vec<_> = manifest.pairs.iter().filter(|s| s.skipped.is_some()).map(|s| s.pair_id.as_str()).collect();
    assert_eq!(skipped, ["s2", "s3"]);
    let report = p.evaluate().unwrap();
    assert_eq!((report.n, report.em_true), (3, 1));
}

#[test]
fn manifests_carry_config_hash_and_seed() {
    let out = tempfile::tempdir().unwrap();
    let p = pipeline("config.toml", out.path(), Overrides { seed: Some(99), ..Default::default() });
    p.ingest().unwrap();
    let manifest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(p.artifact("ingest.manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["seed"], 99);
    assert_eq!(manifest["config_hash"], p.config().config.hash());
    assert_eq!(manifest["artifacts"].as_object().unwrap().len(), 2);
}
