//! End-to-end tests driving the built binary through the full workflow:
//! exit-code classes, artifact shapes, byte-level determinism, and
//! manifest stability across reruns.

use std::path::Path;
use std::process::{Command, Output};

use afford_core::manifest::{hash_dir, RunManifest};

/// Small-scale override set shared by every invocation.
const TINY: &[&str] = &[
    "--set",
    "run.out_dir=run",
    "--set",
    "run.seed=7",
    "--set",
    "data.n_scenes=2",
    "--set",
    "data.n_val_scenes=1",
    "--set",
    "data.n_points=24",
    "--set",
    "data.k_interactions=2",
    "--set",
    "data.eval_records=4",
    "--set",
    "model.feat_dim=8",
    "--set",
    "train.batch=4",
    "--set",
    "train.aff_points=2",
    "--set",
    "train.prior_epochs=2",
    "--set",
    "train.aap_epochs=2",
    "--set",
    "train.aip_epochs=2",
    "--set",
    "train.finetune_epochs=1",
    "--set",
    "train.rounds=1",
    "--set",
    "eval.n_scenes=2",
    "--set",
    "eval.trials=1",
    "--set",
    "eval.f_records=4",
];

fn afford(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_afford"))
        .current_dir(dir)
        .args(TINY)
        .args(args)
        .output()
        .expect("binary runs")
}

fn assert_ok(out: &Output) {
    assert!(
        out.status.success(),
        "command failed\nstdout: {}\nstderr: {}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

/// Failures exit with the documented class code and exactly one
/// `error[<class>]: ...` line on stderr.
fn assert_fails(out: &Output, code: i32, class: &str) {
    assert_eq!(out.status.code(), Some(code));
    let stderr = String::from_utf8_lossy(&out.stderr);
    let lines: Vec<&str> = stderr.lines().collect();
    assert_eq!(lines.len(), 1, "expected a single error line, got: {stderr}");
    assert!(
        lines[0].starts_with(&format!("error[{class}]:")),
        "wrong class line: {}",
        lines[0]
    );
}

#[test]
fn gen_data_is_byte_identical_under_a_seed() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    assert_ok(&afford(a.path(), &["gen-data", "--seed", "7"]));
    assert_ok(&afford(b.path(), &["gen-data", "--seed", "7"]));

    let ha = hash_dir(&a.path().join("run/dataset")).unwrap();
    let hb = hash_dir(&b.path().join("run/dataset")).unwrap();
    assert_eq!(ha, hb, "same seed must produce identical dataset bytes");

    let ma = RunManifest::load(&a.path().join("run/manifest.json")).unwrap();
    let mb = RunManifest::load(&b.path().join("run/manifest.json")).unwrap();
    assert_eq!(ma.content_hash(), mb.content_hash());

    assert_ok(&afford(a.path(), &["gen-data", "--seed", "8"]));
    let hc = hash_dir(&a.path().join("run/dataset")).unwrap();
    assert_ne!(ha, hc, "a different seed must change the dataset");
}

#[test]
fn config_problems_exit_with_code_two() {
    let dir = tempfile::tempdir().unwrap();
    assert_fails(&afford(dir.path(), &["--set", "nope.x=1", "gen-data"]), 2, "config");
    assert_fails(&afford(dir.path(), &["--set", "train.lr=fast", "gen-data"]), 2, "config");
    assert_fails(&afford(dir.path(), &["--set", "train.lr=0.0", "gen-data"]), 2, "config");
    assert_fails(&afford(dir.path(), &["eval", "--methods", "bogus"]), 2, "config");
}

#[test]
fn missing_inputs_exit_with_code_three() {
    let dir = tempfile::tempdir().unwrap();
    assert_fails(&afford(dir.path(), &["train-prior"]), 3, "data");
    assert_fails(&afford(dir.path(), &["adapt"]), 3, "data");
    assert_fails(&afford(dir.path(), &["eval"]), 3, "data");
}

#[test]
fn workflow_produces_expected_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().join("run");

    assert_ok(&afford(dir.path(), &["gen-data"]));
    assert_ok(&afford(dir.path(), &["train-prior"]));
    assert_ok(&afford(dir.path(), &["train"]));
    for name in ["prior", "aap", "aip"] {
        assert!(root.join(format!("ckpt/{name}.bin")).exists(), "missing {name} checkpoint");
    }

    // Budget zero: the posterior equals the unconditioned map and the
    // log is empty.
    assert_ok(&afford(dir.path(), &["adapt", "--budget", "0"]));
    let prior = std::fs::read(root.join("adapt/prior.csv")).unwrap();
    let posterior = std::fs::read(root.join("adapt/posterior.csv")).unwrap();
    assert_eq!(prior, posterior);
    let log: Vec<serde_json::Value> =
        serde_json::from_slice(&std::fs::read(root.join("adapt/interactions.json")).unwrap())
            .unwrap();
    assert!(log.is_empty());

    // A paid budget with the stop rule disabled spends every step, and
    // each log entry carries the full interaction tuple.
    assert_ok(&afford(
        dir.path(),
        &["--set", "adapt.stop_threshold=-1000000.0", "adapt", "--budget", "2", "--out", "run/adapt2"],
    ));
    let log: Vec<serde_json::Value> =
        serde_json::from_slice(&std::fs::read(root.join("adapt2/interactions.json")).unwrap())
            .unwrap();
    assert_eq!(log.len(), 2);
    for entry in &log {
        for key in ["step", "point", "orientation", "motion"] {
            assert!(entry.get(key).is_some(), "log entry lacks {key}");
        }
    }

    // The budget-independent prior collapses to one row; adaptive rows
    // appear once per budget.
    assert_ok(&afford(
        dir.path(),
        &["eval", "--methods", "where2act,ours-final", "--budgets", "1,2"],
    ));
    let report = std::fs::read_to_string(root.join("eval_report.csv")).unwrap();
    let lines: Vec<&str> = report.lines().collect();
    assert_eq!(lines[0], "method,budget,f_score,sample_succ,n_scenes,seed");
    assert_eq!(lines.len(), 4, "one collapsed prior row plus two adaptive rows:\n{report}");
    assert!(lines[1].starts_with("where2act,0,"));
    assert!(lines[2].starts_with("ours-final,1,"));
    assert!(lines[3].starts_with("ours-final,2,"));

    assert_ok(&afford(dir.path(), &["export-heatmap", "--image", "run/map.pgm", "--side", "16"]));
    let csv = std::fs::read_to_string(root.join("heatmap.csv")).unwrap();
    assert_eq!(csv.lines().count(), 25, "header plus one row per cloud point");
    let pgm = std::fs::read(root.join("map.pgm")).unwrap();
    assert!(pgm.starts_with(b"P5\n16 16\n255\n"));
    assert_eq!(pgm.len(), b"P5\n16 16\n255\n".len() + 16 * 16);

    // Every artifact class landed in the manifest.
    let manifest = RunManifest::load(&root.join("manifest.json")).unwrap();
    assert!(manifest.datasets.contains_key("dataset"));
    for name in ["prior", "aap", "aip"] {
        assert!(manifest.checkpoints.contains_key(name));
    }
    for name in ["adapt_prior", "adapt_posterior", "adapt_log", "eval_report", "heatmap_csv"] {
        assert!(manifest.artifacts.contains_key(name), "manifest lacks {name}");
    }
}

#[test]
fn consecutive_training_runs_reproduce_the_manifest_hash() {
    let dir = tempfile::tempdir().unwrap();
    let manifest_path = dir.path().join("run/manifest.json");

    assert_ok(&afford(dir.path(), &["train"]));
    let first = RunManifest::load(&manifest_path).unwrap().content_hash();
    let aap_first = std::fs::read(dir.path().join("run/ckpt/aap.bin")).unwrap();

    assert_ok(&afford(dir.path(), &["train"]));
    let second = RunManifest::load(&manifest_path).unwrap().content_hash();
    let aap_second = std::fs::read(dir.path().join("run/ckpt/aap.bin")).unwrap();

    assert_eq!(first, second, "retraining with fixed seeds must reproduce the manifest");
    assert_eq!(aap_first, aap_second, "checkpoint payloads must be byte-identical");
}
