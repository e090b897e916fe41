use std::path::Path;
use std::process::{Command, Output};

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_varadhan-lab"));
    c.env_remove("VARADHAN_LAB_OUT");
    c
}

fn run(args: &[&str], out: &Path) -> Output {
    bin().args(args).arg("--out").arg(out).output().unwrap()
}

fn manifest(dir: &Path) -> serde_json::Value {
    serde_json::from_str(&std::fs::read_to_string(dir.join("manifest.json")).unwrap()).unwrap()
}

const LINEAR: &str = r#"
[model]
sigma = "const"
sigma_params = [1.0]
drift = "const"
drift_params = [0.0]
init = "zero"
init_params = []

[grid]
half_width = 1.25
nx = 1024
nt = 32
nk = 512

[task]
y = 1.0
"#;

#[test]
fn linear_rate_row() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("linear.toml");
    std::fs::write(&cfg, LINEAR).unwrap();
    let out = tmp.path().join("rate");
    let o = run(&["rate", "--config", cfg.to_str().unwrap()], &out);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let mut rdr = csv::Reader::from_path(out.join("rate.csv")).unwrap();
    let rec = rdr.records().next().unwrap().unwrap();
    let i: f64 = rec[1].parse().unwrap();
    // y^2 / (2 t^2 / 4) at y = t = 1
    assert!((i - 2.0).abs() / 2.0 < 1e-3, "I = {i}");
    let m = manifest(&out);
    assert_eq!(m["status"], "complete");
    let names: Vec<&str> = m["artifacts"].as_array().unwrap().iter().map(|a| a["path"].as_str().unwrap()).collect();
    assert!(names.contains(&"rate.csv") && names.contains(&"h_star_0.bin") && names.contains(&"config.toml"));
}

#[test]
fn varadhan_without_rate_fails() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("v");
    let o = run(&["varadhan", "--set", "task.y=1.0"], &out);
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("rate profile required"));
    let m = manifest(&out);
    assert_eq!(m["status"], "failed");
}

#[test]
fn varadhan_after_rate_uses_tilt() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("v");
    assert!(run(&["rate", "--set", "task.y=0.9"], &out).status.success());
    let o = run(&["varadhan", "--set", "task.y=0.9", "--set", "task.replicas=2000"], &out);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let summary: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("varadhan.json")).unwrap()).unwrap();
    assert_eq!(summary["tilted"], true);
    assert!(summary["extrapolated"].as_f64().is_some());
}

#[test]
fn unknown_key_is_line_anchored() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("bad.toml");
    std::fs::write(&cfg, "[grid]\nnx = 32\nnxx = 3\n").unwrap();
    let o = run(&["simulate", "--config", cfg.to_str().unwrap()], &tmp.path().join("s"));
    assert_eq!(o.status.code(), Some(2));
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("line 3") && err.contains("nxx"), "{err}");
}

#[test]
fn physical_constraints_rechecked() {
    let tmp = tempfile::tempdir().unwrap();
    let o = run(&["simulate", "--set", "model.eps=1.5"], &tmp.path().join("s"));
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn dry_run_writes_nothing() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("d");
    let o = run(&["density", "--dry-run", "--set", "grid.nx=128"], &out);
    assert!(o.status.success());
    let text = String::from_utf8_lossy(&o.stdout);
    assert!(text.contains("nx = 128") && text.contains("estimated memory"));
    assert!(!out.exists());
}

#[test]
fn output_directory_from_environment() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("env");
    let o = bin().arg("simulate").env("VARADHAN_LAB_OUT", &out).output().unwrap();
    assert!(o.status.success());
    assert!(out.join("field_slice.csv").exists() && out.join("manifest.json").exists());
}

#[test]
fn seed_changes_the_path() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    assert!(run(&["simulate", "--seed", "1"], &a).status.success());
    assert!(run(&["simulate", "--seed", "2"], &b).status.success());
    assert_ne!(std::fs::read(a.join("path.bin")).unwrap(), std::fs::read(b.join("path.bin")).unwrap());
    assert_ne!(manifest(&a)["config_hash"], manifest(&b)["config_hash"]);
}

#[test]
fn validate_passes_on_defaults() {
    let tmp = tempfile::tempdir().unwrap();
    let o = run(&["validate"], &tmp.path().join("val"));
    let text = String::from_utf8_lossy(&o.stdout);
    assert!(o.status.success(), "{text}");
    assert!(!text.contains("FAIL"));
    assert!(text.contains("checks passed"));
}
