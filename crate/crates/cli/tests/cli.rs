//! End-to-end runs of the gmylab binary: exit codes and error reporting.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const BASE: &str = r#"
[system]
name = "doubling"
[hyperbolic]
b = 0.5
n_max = 30
samples = 10000
[geometry]
delta1 = 0.45
delta1_prime = 0.045
delta0_grid = [0.2]
resolution = 1e-6
setup_samples = 500
[partition]
n0 = 5
n_max = 10
[stats]
samples = 20000
n_corr = 10
epsilon = [0.1]
ld_n = [5, 10, 15, 20]
mean_orbit = 100000
[run]
seed = 7
"#;

fn gmylab(dir: &Path, config: &str, args: &[&str]) -> Output {
    let path = dir.join("run.toml");
    fs::write(&path, config).unwrap();
    Command::new(env!("CARGO_BIN_EXE_gmylab"))
        .args(args)
        .arg("--config")
        .arg(&path)
        .arg("--out")
        .arg(dir.join("out"))
        .output()
        .unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn zoo_lists_members_and_labels_contrast() {
    let o = Command::new(env!("CARGO_BIN_EXE_gmylab")).arg("zoo").output().unwrap();
    assert!(o.status.success());
    let s = String::from_utf8_lossy(&o.stdout);
    assert!(s.contains("pomeau_manneville") && s.contains("contrast"), "{s}");
    assert!(s.contains("construction failed"), "{s}");
}

#[test]
fn missing_b_is_config_error() {
    let t = tempfile::tempdir().unwrap();
    let cfg = BASE.replace("b = 0.5\n", "");
    let o = gmylab(t.path(), &cfg, &["tails"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("`hyperbolic.b`"), "{}", stderr(&o));
}

#[test]
fn unknown_observable_reports_line() {
    let t = tempfile::tempdir().unwrap();
    let cfg = BASE.replace("[stats]\n", "[stats]\nobservable = \"nope\"\n");
    let o = gmylab(t.path(), &cfg, &["stats"]);
    assert_eq!(o.status.code(), Some(2));
    let e = stderr(&o);
    let line = cfg.lines().position(|l| l.contains("nope")).unwrap() + 1;
    assert!(e.contains("stats.observable") && e.contains(&format!("line {line}")), "{e}");
}

#[test]
fn report_without_artifacts_fails() {
    let t = tempfile::tempdir().unwrap();
    let o = Command::new(env!("CARGO_BIN_EXE_gmylab")).args(["report", "--out"]).arg(t.path()).output().unwrap();
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("missing_artifacts"), "{}", stderr(&o));
}

#[test]
fn verify_without_partition_fails() {
    let t = tempfile::tempdir().unwrap();
    let o = gmylab(t.path(), BASE, &["verify"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn stall_exits_4_with_diagnostics() {
    let t = tempfile::tempdir().unwrap();
    let cfg = BASE.replace("n_max = 10\n", "n_max = 14\ncrossing_horizon = 1\n");
    let o = gmylab(t.path(), &cfg, &["build"]);
    assert_eq!(o.status.code(), Some(4), "{}", stderr(&o));
    assert!(t.path().join("out/build_diagnostics.json").exists());
}

#[test]
fn corrupted_element_fails_verification() {
    let t = tempfile::tempdir().unwrap();
    let cfg = BASE.replace("n_max = 10\n", "n_max = 10\ninject_corruption = true\n");
    let o = gmylab(t.path(), &cfg, &["build"]);
    assert_eq!(o.status.code(), Some(3));
    assert!(stderr(&o).contains("verification_failed"), "{}", stderr(&o));
    let v = gmylab(t.path(), &cfg, &["verify"]);
    assert_eq!(v.status.code(), Some(3));
}

#[test]
fn out_dir_of_other_config_is_refused() {
    let t = tempfile::tempdir().unwrap();
    assert!(gmylab(t.path(), BASE, &["tails"]).status.success());
    let o = gmylab(t.path(), &BASE.replace("seed = 7", "seed = 8"), &["tails"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("run.out"), "{}", stderr(&o));
}

#[test]
fn report_flags_gaps_and_is_idempotent() {
    let t = tempfile::tempdir().unwrap();
    assert!(gmylab(t.path(), BASE, &["tails"]).status.success());
    let a = gmylab(t.path(), BASE, &["report"]);
    assert!(a.status.success());
    let first = fs::read_to_string(t.path().join("out/report.md")).unwrap();
    assert!(first.contains("Gaps:"), "{first}");
    assert!(gmylab(t.path(), BASE, &["report"]).status.success());
    assert_eq!(fs::read_to_string(t.path().join("out/report.md")).unwrap(), first);
}

#[test]
fn artifacts_carry_manifest_hash() {
    let t = tempfile::tempdir().unwrap();
    assert!(gmylab(t.path(), BASE, &["tails"]).status.success());
    let m: serde_json::Value = serde_json::from_str(&fs::read_to_string(t.path().join("out/manifest.json")).unwrap()).unwrap();
    let h = m["manifest_hash"].as_str().unwrap();
    let csv = fs::read_to_string(t.path().join("out/tails.csv")).unwrap();
    assert_eq!(csv.lines().next().unwrap(), format!("# manifest_hash={h}"));
    let fit: serde_json::Value = serde_json::from_str(&fs::read_to_string(t.path().join("out/tails_fit.json")).unwrap()).unwrap();
    assert_eq!(fit["manifest_hash"], h);
}
