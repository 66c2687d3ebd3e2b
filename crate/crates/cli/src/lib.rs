//! Command-line front end: configuration parsing, dispatch and report files.

pub mod config;

use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, Ordering};
use std::time::{SystemTime, UNIX_EPOCH};

use serde_json::Value;
use tangentproj::experiments::{run, ExperimentReport, ExperimentSpec, Status, Verdict};

pub use config::{parse_config, parse_str, Config, ConfigError, ExperimentEntry};

/// Every experiment passed.
pub const EXIT_PASS: i32 = 0;
/// Some experiment failed or could not decide.
pub const EXIT_FAIL: i32 = 1;
/// Bad configuration, runtime error or interruption.
pub const EXIT_ERROR: i32 = 2;

/// Command-line overrides of the configuration file.
#[derive(Clone, Debug, Default)]
pub struct Options {
    pub config: Option<PathBuf>,
    pub out_dir: Option<PathBuf>,
    pub seed: Option<u64>,
    pub threads: Option<usize>,
    /// Run only the experiments of this name.
    pub experiment: Option<String>,
}

/// Files written for one experiment.
#[derive(Clone, Debug)]
pub struct Written {
    pub report: ExperimentReport,
    pub json: PathBuf,
    pub csv: PathBuf,
}

/// Parses the configuration, runs the selected experiments in order and
/// writes their reports. Returns the process exit code.
pub fn execute(opts: &Options, cancel: &AtomicBool) -> i32 {
    match execute_inner(opts, cancel) {
        Ok(written) => exit_code(written.iter().map(|w| &w.report)),
        Err(msg) => {
            eprintln!("error: {msg}");
            EXIT_ERROR
        }
    }
}

/// Exit code of a finished batch of reports.
pub fn exit_code<'a>(reports: impl IntoIterator<Item = &'a ExperimentReport>) -> i32 {
    let mut code = EXIT_PASS;
    for r in reports {
        if r.status == Status::Aborted {
            return EXIT_ERROR;
        }
        if r.verdict != Verdict::Pass {
            code = EXIT_FAIL;
        }
    }
    code
}

fn execute_inner(opts: &Options, cancel: &AtomicBool) -> Result<Vec<Written>, String> {
    let config = match &opts.config {
        Some(path) => parse_config(path).map_err(|e| e.to_string())?,
        None => Config::default(),
    };
    let entries = match &opts.experiment {
        Some(name) => config
            .select(name)
            .ok_or_else(|| format!("unknown experiment `{name}`; expected one of {}", ExperimentSpec::NAMES.join(", ")))?,
        None => config.experiments.clone(),
    };
    if entries.is_empty() {
        return Err("nothing to run: give a config with [[experiment]] blocks or name an experiment".into());
    }
    let seed = opts.seed.unwrap_or(config.seed);
    let threads = opts.threads.or(config.threads);
    let out_dir = opts.out_dir.clone().or_else(|| config.out_dir.clone()).unwrap_or_else(|| PathBuf::from("."));
    std::fs::create_dir_all(&out_dir).map_err(|e| format!("cannot create {}: {e}", out_dir.display()))?;
    if let Some(t) = threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(t).build_global() {
            log::warn!("thread count not applied: {e}");
        }
    }

    let mut written = Vec::new();
    let mut used_names: Vec<String> = Vec::new();
    for entry in &entries {
        if cancel.load(Ordering::Relaxed) {
            break;
        }
        let setup = config.setup(entry, seed);
        log::info!("running {}", entry.spec.name());
        let mut report = run(&entry.spec, &setup, Some(cancel));
        if let Value::Object(snap) = &mut report.snapshot {
            snap.insert("threads".into(), threads.into());
            snap.insert("out_dir".into(), Value::String(out_dir.display().to_string()));
        }
        let name = unique_name(entry.spec.name(), &mut used_names);
        let w = write_report(report, &name, &out_dir).map_err(|e| format!("cannot write report: {e}"))?;
        println!(
            "{}: {} ({}) -> {}",
            name,
            verdict_word(w.report.verdict),
            status_word(w.report.status),
            w.json.display()
        );
        if let Some(err) = &w.report.error {
            eprintln!("error: {name}: {err}");
        }
        let aborted = w.report.status == Status::Aborted;
        written.push(w);
        if aborted && cancel.load(Ordering::Relaxed) {
            break;
        }
    }
    Ok(written)
}

fn unique_name(name: &str, used: &mut Vec<String>) -> String {
    let count = used.iter().filter(|u| u.as_str() == name).count();
    used.push(name.to_string());
    if count == 0 {
        name.to_string()
    } else {
        format!("{name}-{}", count + 1)
    }
}

fn verdict_word(v: Verdict) -> &'static str {
    match v {
        Verdict::Pass => "pass",
        Verdict::Fail => "fail",
        Verdict::Inconclusive => "inconclusive",
    }
}

fn status_word(s: Status) -> &'static str {
    match s {
        Status::Completed => "completed",
        Status::Aborted => "aborted",
    }
}

/// Writes `report_<name>_<unix millis>.json` and `raw_<name>.csv`.
pub fn write_report(report: ExperimentReport, name: &str, dir: &Path) -> std::io::Result<Written> {
    let millis = SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_millis()).unwrap_or(0);
    let mut json = dir.join(format!("report_{name}_{millis}.json"));
    let mut k = 1;
    while json.exists() {
        json = dir.join(format!("report_{name}_{millis}_{k}.json"));
        k += 1;
    }
    let csv = dir.join(format!("raw_{name}.csv"));
    report.write_json(&json).map_err(std::io::Error::other)?;
    report.write_csv(&csv).map_err(std::io::Error::other)?;
    Ok(Written { report, json, csv })
}
