use std::path::Path;
use std::process::{Command, Output};

use drdfl::harness::RunManifest;

fn drdfl(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_drdfl"))
        .args(args)
        .current_dir(dir)
        .env_remove("DRDFL_OUTPUT_ROOT")
        .output()
        .expect("spawn drdfl")
}

fn last_number(out: &Output) -> f64 {
    let text = String::from_utf8_lossy(&out.stdout);
    text.split_whitespace().last().unwrap().parse().unwrap()
}

fn ok(out: &Output) {
    assert_eq!(
        out.status.code(),
        Some(0),
        "stderr: {}",
        String::from_utf8_lossy(&out.stderr)
    );
}

const DFL_CONFIG: &str = r#"
method = "dfl"
seeds = [1]
output_dir = "run"

[train]
id = "train"
synth = { kind = "ar1", count = 20, seed = 4 }

[[test]]
id = "test"
synth = { kind = "ar1", count = 10, seed = 5 }

[[test]]
id = "shifted"
synth = { kind = "ar1", count = 10, seed = 5 }
shift = { kind = "mean_scale", factor = 1.5 }

[baseline_training]
epochs = 2
lr = 1e-3
"#;

#[test]
fn dfl_smoke_run_writes_manifest() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("dfl.toml"), DFL_CONFIG).unwrap();
    let out = drdfl(dir.path(), &["train", "--config", "dfl.toml"]);
    ok(&out);
    let manifest = RunManifest::load(&dir.path().join("run/manifest.json")).unwrap();
    assert_eq!(manifest.test_ids, vec!["test".to_string(), "shifted".to_string()]);
    assert!(!manifest.failed());
    for id in &manifest.test_ids {
        let r = manifest.mean_regret(id).unwrap();
        assert!(r.is_finite() && r >= 0.0, "{id}: {r}");
    }
    assert!(dir.path().join("run/seed-1/predictor.ckpt").is_file());

    // identical config reproduces the same regrets
    let again = drdfl(dir.path(), &["train", "--config", "dfl.toml", "--output-dir", "run2"]);
    ok(&again);
    let second = RunManifest::load(&dir.path().join("run2/manifest.json")).unwrap();
    assert_eq!(manifest.seed_regrets("shifted"), second.seed_regrets("shifted"));

    let report = drdfl(dir.path(), &["report", "run/manifest.json", "--output", "tables"]);
    ok(&report);
    assert!(std::fs::read_dir(dir.path().join("tables")).unwrap().count() > 0);
}

#[test]
fn config_errors_exit_with_code_two() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("bad.toml"), "method = \"dfl\"\nbogus = 1\n").unwrap();
    let out = drdfl(dir.path(), &["train", "--config", "bad.toml"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(!out.stderr.is_empty());

    std::fs::write(
        dir.path().join("missing.toml"),
        "method = \"dfl\"\n[train]\nid = \"t\"\npath = \"nope.csv\"\n",
    )
    .unwrap();
    let out = drdfl(dir.path(), &["train", "--config", "missing.toml"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn synth_corrupt_and_distance() {
    let dir = tempfile::tempdir().unwrap();
    ok(&drdfl(dir.path(), &["synth", "--count", "30", "--seed", "2", "--output", "a.csv"]));
    ok(&drdfl(
        dir.path(),
        &["synth", "--count", "30", "--seed", "2", "--mean-scale", "1.5", "--output", "b.csv"],
    ));
    let same = drdfl(dir.path(), &["distance", "a.csv", "a.csv"]);
    ok(&same);
    assert_eq!(last_number(&same), 0.0);
    let shifted = drdfl(dir.path(), &["distance", "a.csv", "b.csv"]);
    ok(&shifted);
    assert!(last_number(&shifted) > 0.0);

    ok(&drdfl(
        dir.path(),
        &["corrupt", "--data", "a.csv", "--kind", "gaussian", "--output", "c.csv"],
    ));
    assert!(dir.path().join("c.csv").is_file());
}
