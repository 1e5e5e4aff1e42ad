use std::path::Path;

use weaverec::datagen::DomainId;
use weaverec::pipeline::{
    run_baselines, run_weaverec, Baseline, DataSource, ExperimentConfig, RunManifest, Stage, WEAVEREC,
};
use weaverec::{checkpoint, LoraAdapter, SyntheticConfig};

fn tiny(dir: &Path, sources: &[&str]) -> ExperimentConfig {
    let mut c = ExperimentConfig {
        data: DataSource::Synthetic(SyntheticConfig {
            users_per_domain: 40,
            items_per_domain: 30,
            generic_users: 200,
            min_len: 6,
            max_len: 9,
            ..SyntheticConfig::default()
        }),
        sources: sources.iter().map(|s| DomainId::new(*s)).collect(),
        output_dir: dir.to_path_buf(),
        seed: 3,
        negatives: 9,
        ..ExperimentConfig::default()
    };
    c.model.dim = 8;
    c.base_train.max_epochs = 2;
    c.train.max_epochs = 2;
    c
}

fn adapters(m: &RunManifest) -> Vec<&str> {
    m.artifacts
        .iter()
        .filter(|a| a.name != "base")
        .map(|a| a.name.as_str())
        .collect()
}

#[test]
fn identical_configs_give_identical_hashes() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let ma = run_weaverec(&tiny(a.path(), &["d1"])).unwrap();
    let mb = run_weaverec(&tiny(b.path(), &["d1"])).unwrap();
    assert_eq!(ma.hashes(), mb.hashes());
    assert_eq!(ma.config_hash, mb.config_hash);
    assert_eq!(ma.reports, mb.reports);
    ma.verify(a.path()).unwrap();
    let loaded = RunManifest::load(&a.path().join("manifest.json")).unwrap();
    assert_eq!(loaded, ma);
}

#[test]
fn one_source_references_three_adapters() {
    let dir = tempfile::tempdir().unwrap();
    let m = run_weaverec(&tiny(dir.path(), &["d1"])).unwrap();
    assert_eq!(adapters(&m), vec!["target", "hybrid/d1", "merged/weaverec"]);
    assert_eq!(m.lambdas, Some(vec![0.5, 0.5]));
    let single = m.artifact("target").unwrap().param_count;
    assert_eq!(m.artifact("merged/weaverec").unwrap().param_count, single);
    assert!(dir.path().join("data/instructions/d0-test.jsonl").is_file());
    assert!(dir.path().join("tables/weaverec.csv").is_file());
}

#[test]
fn adding_a_source_trains_only_the_new_hybrid() {
    let dir = tempfile::tempdir().unwrap();
    let first = run_weaverec(&tiny(dir.path(), &["d1"])).unwrap();
    assert_eq!(first.trained, vec!["base", "adapter-d0", "hybrid-d0-d1"]);
    let second = run_weaverec(&tiny(dir.path(), &["d1", "d2"])).unwrap();
    assert_eq!(second.trained, vec!["hybrid-d0-d2"]);
    for name in ["base", "target", "hybrid/d1"] {
        assert_eq!(
            first.artifact(name).unwrap().hash,
            second.artifact(name).unwrap().hash,
            "{name}"
        );
        assert!(second.artifact(name).unwrap().reused);
    }
    let l = second.lambdas.unwrap();
    assert_eq!(l.len(), 3);
    assert!((l.iter().sum::<f64>() - 1.0).abs() < 1e-12);
}

#[test]
fn no_sources_reduces_to_the_target_adapter() {
    let dir = tempfile::tempdir().unwrap();
    let m = run_weaverec(&tiny(dir.path(), &[])).unwrap();
    let load =
        |name: &str| -> LoraAdapter { checkpoint::load(&dir.path().join(&m.artifact(name).unwrap().path)).unwrap() };
    assert_eq!(load("merged/weaverec").layers, load("target").layers);
    assert_eq!(
        m.report(WEAVEREC).unwrap().aggregates,
        m.report(Baseline::TargetOnly.name()).unwrap().aggregates
    );
}

#[test]
fn baselines_share_candidates_and_keep_distinct_provenance() {
    let dir = tempfile::tempdir().unwrap();
    let config = tiny(dir.path(), &["d1"]);
    let w = run_weaverec(&config).unwrap();
    let b = run_baselines(&config, &Baseline::ALL).unwrap();
    assert_eq!(b.artifact("target").unwrap().hash, w.artifact("target").unwrap().hash);
    assert!(b.artifact("target").unwrap().reused);
    // Naive averaging merges single-domain adapters, not hybrid ones.
    assert_ne!(
        b.artifact("source/d1").unwrap().hash,
        w.artifact("hybrid/d1").unwrap().hash
    );
    assert_ne!(
        b.artifact("merged/naive-wa").unwrap().hash,
        w.artifact("merged/weaverec").unwrap().hash
    );
    assert_eq!(
        b.report("target-only").unwrap().aggregates,
        w.report("target-only").unwrap().aggregates
    );

    let table = std::fs::read_to_string(dir.path().join("tables/baselines.csv")).unwrap();
    let methods = b.reports.len();
    assert_eq!(methods, Baseline::ALL.len());
    assert_eq!(table.lines().count(), 1 + 4 * methods);
    b.verify(dir.path()).unwrap();
}

#[test]
fn tampered_checkpoints_fail_verification() {
    let dir = tempfile::tempdir().unwrap();
    let m = run_weaverec(&tiny(dir.path(), &["d1"])).unwrap();
    let path = dir.path().join(&m.artifact("hybrid/d1").unwrap().path);
    let mut bytes = std::fs::read(&path).unwrap();
    let last = bytes.len() - 1;
    bytes[last] ^= 0x01;
    std::fs::write(&path, bytes).unwrap();
    assert!(m.verify(dir.path()).is_err());
    // The cache refuses the corrupted file instead of silently retraining.
    let err = run_weaverec(&tiny(dir.path(), &["d1"])).unwrap_err();
    assert_eq!(err.stage, Stage::Train);
}

#[test]
fn invalid_configs_fail_in_the_config_stage() {
    let dir = tempfile::tempdir().unwrap();
    let err = run_weaverec(&tiny(dir.path(), &["d0"])).unwrap_err();
    assert_eq!(err.stage, Stage::Config);
    let err = run_weaverec(&tiny(dir.path(), &["d9"])).unwrap_err();
    assert_eq!(err.stage, Stage::Config);
}

#[test]
fn tuned_lambdas_lie_on_the_grid() {
    let dir = tempfile::tempdir().unwrap();
    let mut c = tiny(dir.path(), &["d1"]);
    c.tune_lambdas = true;
    c.lambda_grid = 0.25;
    let m = run_weaverec(&c).unwrap();
    let l = m.lambdas.unwrap();
    assert!(l.iter().all(|x| (x * 4.0 - (x * 4.0).round()).abs() < 1e-9), "{l:?}");
}

#[test]
fn shipped_default_config_matches_the_built_in_defaults() {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/default.conf");
    let loaded = ExperimentConfig::load(&path).unwrap();
    assert_eq!(loaded.hash(), ExperimentConfig::default().hash());
}
