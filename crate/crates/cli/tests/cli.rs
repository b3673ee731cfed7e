use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::OnceLock;

use drift_ptq::report::validate;

const SMALL: &str = "\
# quick pipeline for tests
episodes = 48
episode_steps = 24
probe_steps = 4
horizon = 16
";

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_drift-ptq"));
    c.env_remove("DRIFT_PTQ_SEED").env("RUST_LOG", "off");
    c
}

fn run(dir: &Path, args: &[&str]) -> Output {
    let cfg = dir.join("small.cfg");
    if !cfg.exists() {
        std::fs::write(&cfg, SMALL).unwrap();
    }
    bin()
        .args(["--log-level", "error", "--config"])
        .arg(&cfg)
        .arg("--out-dir")
        .arg(dir)
        .args(args)
        .output()
        .unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

/// One completed small pipeline shared by the read-only tests.
fn finished() -> &'static PathBuf {
    static DIR: OnceLock<PathBuf> = OnceLock::new();
    DIR.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap().keep();
        let o = run(&dir, &["--seed", "3", "run-all"]);
        assert!(o.status.success(), "{}", stderr(&o));
        dir
    })
}

fn copy_dir(from: &Path) -> PathBuf {
    let to = tempfile::tempdir().unwrap().keep();
    for e in std::fs::read_dir(from).unwrap() {
        let e = e.unwrap();
        std::fs::copy(e.path(), to.join(e.file_name())).unwrap();
    }
    to
}

#[test]
fn profile_without_dataset_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(dir.path(), &["profile"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("generate-data"), "{}", stderr(&o));
}

#[test]
fn later_stages_refuse_to_run_before_profiling() {
    let dir = tempfile::tempdir().unwrap();
    assert!(run(dir.path(), &["generate-data"]).status.success());
    for step in ["compensate", "allocate", "quantize"] {
        let o = run(dir.path(), &[step]);
        assert_eq!(o.status.code(), Some(1), "{step}");
        assert!(stderr(&o).contains("profile"), "{step}: {}", stderr(&o));
    }
}

#[test]
fn bad_arguments_and_config_exit_with_one() {
    assert_eq!(bin().arg("frobnicate").output().unwrap().status.code(), Some(1));
    assert_eq!(bin().arg("--help").output().unwrap().status.code(), Some(0));
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.cfg");
    std::fs::write(&cfg, "retention_k = 140\n").unwrap();
    let o = bin().arg("--config").arg(&cfg).arg("--out-dir").arg(dir.path()).arg("generate-data").output().unwrap();
    assert_eq!(o.status.code(), Some(1));
    std::fs::write(&cfg, "no_such_key = 1\n").unwrap();
    let o = bin().arg("--config").arg(&cfg).arg("--out-dir").arg(dir.path()).arg("generate-data").output().unwrap();
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn corrupt_model_is_a_runtime_error() {
    let dir = copy_dir(finished());
    std::fs::write(dir.join("fp.dptq"), b"DPTQMDL\0garbage").unwrap();
    let o = run(&dir, &["--seed", "3", "evaluate"]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
}

#[test]
fn report_validates_and_echoes_overrides() {
    let dir = finished();
    let text = std::fs::read_to_string(dir.join("report.json")).unwrap();
    let v: serde_json::Value = serde_json::from_str(&text).unwrap();
    validate(&v).unwrap();
    assert_eq!(v["schema"], "drift-ptq-report/1");
    assert_eq!(v["provenance"]["seed"], 3);
    let overrides = v["provenance"]["overrides"].to_string();
    for key in ["episodes", "episode_steps", "probe_steps", "horizon"] {
        assert!(overrides.contains(key), "{overrides}");
    }
    assert_eq!(v["dataset"]["bin_histogram"], serde_json::json!([8, 8, 8, 8, 8, 8]));
    assert!(v["dataset"]["max_abs_action"].as_f64().unwrap() < 0.5);
    let mem: Vec<_> = v["memory"].as_array().unwrap().iter().map(|m| m["variant"].as_str().unwrap().to_string()).collect();
    assert_eq!(mem, ["fp", "w4", "w4csrc", "daptq"]);
    assert!(dir.join("timings.json").exists());
    assert!(!text.contains("seconds"));

    let mut broken = v.clone();
    broken.as_object_mut().unwrap().remove("evaluation");
    assert!(validate(&broken).is_err());
    let mut broken = v.clone();
    broken["stage3"]["allocation"]["retention_k"] = serde_json::json!(140.0);
    assert!(validate(&broken).is_err());
}

#[test]
fn evaluate_reports_each_requested_variant_and_seed() {
    let dir = copy_dir(finished());
    let o = run(&dir, &["--seed", "3", "evaluate", "--variants", "fp,w4,daptq", "--seeds", "20"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let v: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(dir.join("evaluation.json")).unwrap()).unwrap();
    let variants = v["variants"].as_array().unwrap();
    assert_eq!(variants.len(), 3);
    for var in variants {
        assert_eq!(var["seeds"].as_array().unwrap().len(), 20);
        assert!(var["e_t_norm"]["mean"].as_f64().unwrap().is_finite());
    }
    let csv = std::fs::read_to_string(dir.join("evaluation.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 3 * 20);
    let curves = std::fs::read_to_string(dir.join("drift_curves.csv")).unwrap();
    assert_eq!(curves.lines().count(), 1 + 3 * 20 * 16);

    let o = run(&dir, &["--seed", "3", "evaluate", "--variants", "fp,int3"]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn seed_environment_variable_is_honored() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("small.cfg");
    std::fs::write(&cfg, SMALL).unwrap();
    let o = bin()
        .env("DRIFT_PTQ_SEED", "11")
        .arg("--config")
        .arg(&cfg)
        .arg("--out-dir")
        .arg(dir.path())
        .arg("generate-data")
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", stderr(&o));
    let header = std::fs::read_to_string(dir.path().join("dataset.jsonl")).unwrap();
    let first: serde_json::Value = serde_json::from_str(header.lines().next().unwrap()).unwrap();
    assert_eq!(first["seed"], 11);
}
