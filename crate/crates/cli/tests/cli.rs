use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use source_cli::cohort::read_cohort;
use source_cli::format::read_tensors;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_source"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = run(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn write(dir: &Path, name: &str, text: &str) -> PathBuf {
    let p = dir.join(name);
    fs::write(&p, text).unwrap();
    p
}

const SMALL: &str = r#"{
  "schema_version": 1,
  "seed": 7,
  "simulation": {"dims": [8, 8, 8], "n_subjects": 12, "n_timepoints": 80,
                 "truth": {"n_sources": 2, "n_symptoms": 3}},
  "ica": {"n_components": 2},
  "rootmap": {"lambda1_grid": [0.1, 0.01], "lambda2_grid": [0.1, 0.01]},
  "bootstrap": {"n_resamples": 4}
}"#;

fn files_in(dir: &Path) -> Vec<PathBuf> {
    let mut out = Vec::new();
    for e in fs::read_dir(dir).unwrap() {
        let p = e.unwrap().path();
        if p.is_dir() {
            out.extend(files_in(&p));
        } else {
            out.push(p);
        }
    }
    out.sort();
    out
}

fn assert_same_tree(a: &Path, b: &Path) {
    let fa = files_in(a);
    let fb = files_in(b);
    assert_eq!(fa.len(), fb.len());
    for (x, y) in fa.iter().zip(&fb) {
        assert_eq!(x.strip_prefix(a).unwrap(), y.strip_prefix(b).unwrap());
        assert!(fs::read(x).unwrap() == fs::read(y).unwrap(), "{} differs", x.display());
    }
}

#[test]
fn minimal_simulation_writes_one_file_per_subject() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write(
        tmp.path(),
        "min.json",
        r#"{"simulation": {"dims": [4, 4, 4], "n_subjects": 4, "n_timepoints": 16,
             "truth": {"n_sources": 1}}}"#,
    );
    let out = tmp.path().join("cohort");
    ok(&["--config", cfg.to_str().unwrap(), "--seed", "3", "simulate", out.to_str().unwrap()]);
    let subjects = fs::read_dir(out.join("subjects")).unwrap().count();
    assert_eq!(subjects, 4);
    for name in ["grid.json", "truth.bin", "manifest.json"] {
        assert!(out.join(name).exists(), "{name}");
    }
    let manifest: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["seed"], 3);
    assert_eq!(manifest["version"], env!("CARGO_PKG_VERSION"));
    let c = read_cohort(&out).unwrap();
    assert_eq!(c.data.subjects[0].dim(), (16, 64));
    assert_eq!(c.truth.unwrap().gamma.nrows(), 1);
    assert_eq!(read_tensors(&out.join("subjects/000.bin")).unwrap().len(), 3);
}

#[test]
fn simulation_is_byte_identical_across_reruns() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write(tmp.path(), "c.json", SMALL);
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    for d in [&a, &b] {
        ok(&["--config", cfg.to_str().unwrap(), "--threads", "1", "simulate", d.to_str().unwrap()]);
    }
    assert_same_tree(&a, &b);
}

#[test]
fn too_many_sources_is_reported() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write(
        tmp.path(),
        "k50.json",
        r#"{"simulation": {"dims": [4, 4, 4], "n_subjects": 4, "n_timepoints": 16, "truth": {"n_sources": 50}}}"#,
    );
    let out = run(&["--config", cfg.to_str().unwrap(), "simulate", tmp.path().join("x").to_str().unwrap()]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("grid too small for K sources"));
}

#[test]
fn config_errors_name_the_line() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write(tmp.path(), "bad.json", "{\n  \"schema_version\": 1,\n  \"sede\": 3\n}\n");
    let out = run(&["--config", cfg.to_str().unwrap(), "simulate", tmp.path().join("x").to_str().unwrap()]);
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("unknown field") && err.contains("line 3"), "{err}");
}

#[test]
fn run_writes_artifacts_and_is_deterministic() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write(tmp.path(), "c.json", SMALL);
    let cfg = cfg.to_str().unwrap();
    let cohort = tmp.path().join("cohort");
    ok(&["--config", cfg, "simulate", cohort.to_str().unwrap()]);
    let (a, b) = (tmp.path().join("ra"), tmp.path().join("rb"));
    let mut lines = Vec::new();
    for d in [&a, &b] {
        lines.push(ok(&["--config", cfg, "--threads", "1", "run", cohort.to_str().unwrap(), d.to_str().unwrap()]));
    }
    assert_eq!(lines[0], lines[1]);
    assert_eq!(lines[0].lines().count(), 1);
    for key in ["correlation=", "cd=", "compactness=", "lambda1=", "lambda2=", "lambda3="] {
        assert!(lines[0].contains(key), "{key} missing from {}", lines[0]);
    }
    for name in [
        "config.json",
        "grid.json",
        "decomp.bin",
        "decomp.json",
        "rootmap.bin",
        "rootmap.json",
        "drivers.bin",
        "axes.json",
        "report.json",
    ] {
        assert!(a.join(name).exists(), "{name}");
    }
    assert!(!a.join("FAILED").exists());
    let report: serde_json::Value = serde_json::from_str(&fs::read_to_string(a.join("report.json")).unwrap()).unwrap();
    assert_eq!(report["ablation"], "none");
    assert_eq!(report["bootstrap"]["resamples"].as_array().unwrap().len(), 4);
    assert_same_tree(&a, &b);

    // The resolved config reproduces the run.
    let resolved: serde_json::Value = serde_json::from_str(&fs::read_to_string(a.join("config.json")).unwrap()).unwrap();
    assert_eq!(resolved["seed"], 7);
    assert_eq!(resolved["axis"]["cv_folds"], 5);

    let score = ok(&["score", a.to_str().unwrap(), cohort.to_str().unwrap()]);
    assert!(score.contains("auc_zeta="), "{score}");
    let metrics = ok(&["metrics", a.to_str().unwrap(), cohort.to_str().unwrap()]);
    let m: serde_json::Value = serde_json::from_str(metrics.trim()).unwrap();
    let saved = report["in_sample"]["correlation"].as_f64().unwrap();
    assert!((m["in_sample"]["correlation"].as_f64().unwrap() - saved).abs() < 1e-12);
    assert_eq!(m["correlation"]["count"], 4);

    let c = tmp.path().join("rc");
    ok(&["--config", cfg, "run", cohort.to_str().unwrap(), c.to_str().unwrap(), "--ablation", "no_rootmap"]);
    let report: serde_json::Value = serde_json::from_str(&fs::read_to_string(c.join("report.json")).unwrap()).unwrap();
    assert_eq!(report["ablation"], "no_rootmap");
    assert_eq!(report["label"], "ablation:no_rootmap");

    // Without ground truth, scoring is refused.
    fs::remove_file(cohort.join("truth.bin")).unwrap();
    let out = run(&["score", a.to_str().unwrap(), cohort.to_str().unwrap()]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("not a simulated cohort"));
}

#[test]
fn stage_failure_leaves_a_marker() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write(tmp.path(), "c.json", SMALL);
    let cohort = tmp.path().join("cohort");
    ok(&["--config", cfg.to_str().unwrap(), "simulate", cohort.to_str().unwrap()]);
    let bad = write(
        tmp.path(),
        "bad.json",
        &SMALL.replace("\"ica\": {\"n_components\": 2}", "\"ica\": {\"n_components\": 2}, \"preprocess\": {\"smoothing_fwhm_mm\": 0}"),
    );
    let out_dir = tmp.path().join("run");
    let out = run(&["--config", bad.to_str().unwrap(), "run", cohort.to_str().unwrap(), out_dir.to_str().unwrap()]);
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("rootmap stage failed"), "{err}");
    let marker = fs::read_to_string(out_dir.join("FAILED")).unwrap();
    assert!(marker.contains("rootmap stage failed"));
    // Stage-one outputs written before the failure are kept.
    assert!(out_dir.join("config.json").exists());
    assert!(out_dir.join("decomp.bin").exists());
}

#[test]
fn unknown_ablation_is_rejected() {
    let out = run(&["run", "a", "b", "--ablation", "none"]);
    assert!(!out.status.success());
}
