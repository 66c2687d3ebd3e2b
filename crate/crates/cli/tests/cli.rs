use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output, Stdio};
use std::thread::sleep;
use std::time::Duration;

use tangentproj::experiments::ExperimentSpec;
use tangentproj_cli::{parse_str, ConfigError};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_tangentproj"))
}

fn run_with(config: &str, dir: &Path, extra: &[&str]) -> Output {
    let path = dir.join("run.toml");
    fs::write(&path, config).unwrap();
    bin().arg("--config").arg(&path).arg("--out-dir").arg(dir.join("out")).args(extra).output().unwrap()
}

fn reports(dir: &Path) -> Vec<PathBuf> {
    let mut out: Vec<PathBuf> = fs::read_dir(dir.join("out"))
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.extension().is_some_and(|e| e == "json"))
        .collect();
    out.sort();
    out
}

fn json(path: &Path) -> serde_json::Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

const QUICK: &str = r#"
seed = 11
[manifold]
n = 3
c = 0.6
[[experiment]]
name = "manifold-info"
samples = 200
[[experiment]]
name = "config-bound"
delta_exponents = [5, 6, 7, 8]
"#;

#[test]
fn help_lists_every_subcommand() {
    let out = bin().arg("--help").output().unwrap();
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    for name in ExperimentSpec::NAMES {
        assert!(text.contains(name), "help is missing {name}");
    }
}

#[test]
fn minimal_config_fills_defaults() {
    let cfg = parse_str("[manifold]\nn = 3\nc = 0.6\n[[experiment]]\nname = \"pair-volume\"\n").unwrap();
    assert_eq!(cfg.seed, 0);
    assert_eq!(cfg.experiments.len(), 1);
    assert_eq!(cfg.experiments[0].spec, ExperimentSpec::default_for("pair-volume").unwrap());
}

#[test]
fn out_of_range_cap_height_names_the_key() {
    let err = parse_str("[manifold]\nn = 3\nc = 1.5\n").unwrap_err();
    let ConfigError::Invalid(issues) = &err else { panic!("expected a validation error, got {err}") };
    assert!(issues.iter().any(|i| i.key == "manifold.c" && i.message.contains("(-1, 0) ∪ (0, 1)")));

    let dir = tempfile::tempdir().unwrap();
    let out = run_with("[manifold]\nn = 3\nc = 1.5\n[[experiment]]\nname = \"manifold-info\"\n", dir.path(), &[]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("manifold.c"));
}

#[test]
fn every_problem_is_reported_with_its_path() {
    let text = "bogus = 1\n[manifold]\nn = 3\nc = 0.6\ncolour = 2\n[[experiment]]\nname = \"config-bound\"\ns = 3.0\nextra = 1\n";
    let ConfigError::Invalid(issues) = parse_str(text).unwrap_err() else { panic!("expected validation errors") };
    let keys: Vec<&str> = issues.iter().map(|i| i.key.as_str()).collect();
    for key in ["bogus", "manifold.colour", "experiment[0].s", "experiment[0].extra"] {
        assert!(keys.contains(&key), "missing {key} in {keys:?}");
    }
}

#[test]
fn parse_errors_carry_line_and_column() {
    let err = parse_str("seed = 1\n[manifold\n").unwrap_err();
    assert!(matches!(err, ConfigError::Parse(_)));
    assert!(err.to_string().contains("line 2"), "{err}");
}

#[test]
fn two_experiments_give_two_reports() {
    let dir = tempfile::tempdir().unwrap();
    let out = run_with(QUICK, dir.path(), &[]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let files = reports(dir.path());
    assert_eq!(files.len(), 2);
    assert!(dir.path().join("out/raw_manifold-info.csv").exists());
    let csv = fs::read_to_string(dir.path().join("out/raw_config-bound.csv")).unwrap();
    assert!(csv.starts_with("delta,quantity,value,stderr,samples\n"));
}

#[test]
fn reruns_are_byte_identical_and_flags_round_trip() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let flags = ["--seed", "99", "--threads", "1"];
    assert_eq!(run_with(QUICK, a.path(), &flags).status.code(), Some(0));
    assert_eq!(run_with(QUICK, b.path(), &flags).status.code(), Some(0));
    let ra = reports(a.path());
    let rb = reports(b.path());
    for (x, y) in ra.iter().zip(&rb) {
        let mut tx = fs::read_to_string(x).unwrap();
        let ty = fs::read_to_string(y).unwrap();
        // Only the output directory differs between the two runs.
        tx = tx.replace(&a.path().join("out").display().to_string(), &b.path().join("out").display().to_string());
        assert_eq!(tx, ty);
    }
    let report = json(&ra[0]);
    assert_eq!(report["seed"], 99);
    assert_eq!(report["snapshot"]["seed"], 99);
    assert_eq!(report["snapshot"]["threads"], 1);
    assert_eq!(report["snapshot"]["out_dir"], a.path().join("out").display().to_string());
}

#[test]
fn failing_tolerance_exits_one() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = "[[experiment]]\nname = \"cinematic-check\"\npairs = 100\nmax_spread = 1.5\n";
    let out = run_with(cfg, dir.path(), &[]);
    assert_eq!(out.status.code(), Some(1));
    let report = json(&reports(dir.path())[0]);
    assert_eq!(report["verdict"], "fail");
    assert_eq!(report["status"], "completed");
}

#[test]
fn subcommand_runs_defaults_and_conflicts_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let out = bin().arg("manifold-info").arg("--out-dir").arg(dir.path()).output().unwrap();
    assert_eq!(out.status.code(), Some(0));
    let out = bin().args(["manifold-info", "--experiment", "pair-volume"]).arg("--out-dir").arg(dir.path()).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn interrupted_run_leaves_an_aborted_report() {
    let dir = tempfile::tempdir().unwrap();
    let out_dir = dir.path().join("out");
    let mut child = bin()
        .arg("project-dim")
        .arg("--out-dir")
        .arg(&out_dir)
        .stdout(Stdio::null())
        .stderr(Stdio::null())
        .spawn()
        .unwrap();
    sleep(Duration::from_secs(3));
    let killed = Command::new("kill").arg("-INT").arg(child.id().to_string()).status().unwrap();
    assert!(killed.success());
    let status = child.wait().unwrap();
    assert_eq!(status.code(), Some(2));
    let report = json(&reports(dir.path())[0]);
    assert_eq!(report["status"], "aborted");
    assert_eq!(report["error"], "cancelled");
}
