//! TOML run configuration.
//!
//! ```toml
//! seed = 42            # default 0
//! threads = 4          # default: all cores
//! out_dir = "reports"  # default: current directory
//!
//! [manifold]           # default: kind = "cap", n = 3, c = 0.6
//! kind = "cap"         # or "perturbed-cap" with amplitude and frequency
//! n = 3
//! c = 0.6
//!
//! [fractal]            # needed by the projection and incidence experiments
//! m = 4
//! ratio = 0.1767766952966369
//! level = 10
//! placement = "planar" # axis | planar | diagonal | product (with factors)
//!
//! [[experiment]]
//! name = "pair-volume"
//! pairs = 20           # any parameter of the experiment; the rest keep defaults
//!
//! [experiment.manifold] # optional per-experiment override of a whole block
//! n = 4
//! c = 0.6
//! ```
//!
//! Every problem is collected, keyed by its path in the file, before any
//! experiment runs.

use std::fmt;
use std::path::{Path, PathBuf};

use serde_json::{Map, Value};
use tangentproj::experiments::{validate_chart, ExperimentSpec, FractalSpec, Issue, RunSetup};
use tangentproj::manifold::ChartSpec;

#[derive(Clone, Debug, PartialEq)]
pub struct Config {
    pub seed: u64,
    pub threads: Option<usize>,
    pub out_dir: Option<PathBuf>,
    pub manifold: ChartSpec,
    pub fractal: Option<FractalSpec>,
    pub experiments: Vec<ExperimentEntry>,
}

impl Default for Config {
    fn default() -> Self {
        Config {
            seed: 0,
            threads: None,
            out_dir: None,
            manifold: default_chart(),
            fractal: None,
            experiments: Vec::new(),
        }
    }
}

fn default_chart() -> ChartSpec {
    ChartSpec::Cap { n: 3, c: 0.6 }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentEntry {
    pub spec: ExperimentSpec,
    pub manifold: Option<ChartSpec>,
    pub fractal: Option<FractalSpec>,
}

impl Config {
    /// Inputs of one experiment: its own blocks where given, the global ones
    /// otherwise. Experiments that need a fractal fall back to the default
    /// fractal when the file has none.
    pub fn setup(&self, entry: &ExperimentEntry, seed: u64) -> RunSetup {
        let fractal = entry.fractal.clone().or_else(|| self.fractal.clone());
        let fractal = if entry.spec.needs_fractal() { Some(fractal.unwrap_or_default()) } else { fractal };
        RunSetup { chart: entry.manifold.clone().unwrap_or_else(|| self.manifold.clone()), fractal, seed }
    }

    /// The entries named `name`, or a default entry when there are none.
    pub fn select(&self, name: &str) -> Option<Vec<ExperimentEntry>> {
        let chosen: Vec<_> = self.experiments.iter().filter(|e| e.spec.name() == name).cloned().collect();
        if !chosen.is_empty() {
            return Some(chosen);
        }
        ExperimentSpec::default_for(name).map(|spec| vec![ExperimentEntry { spec, manifold: None, fractal: None }])
    }
}

#[derive(Debug)]
pub enum ConfigError {
    Io { path: PathBuf, source: std::io::Error },
    /// Malformed TOML; the message carries line and column.
    Parse(String),
    Invalid(Vec<Issue>),
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ConfigError::Io { path, source } => write!(f, "cannot read {}: {source}", path.display()),
            ConfigError::Parse(msg) => write!(f, "{msg}"),
            ConfigError::Invalid(issues) => {
                write!(f, "invalid configuration ({} problem{}):", issues.len(), if issues.len() == 1 { "" } else { "s" })?;
                for issue in issues {
                    write!(f, "\n  {issue}")?;
                }
                Ok(())
            }
        }
    }
}

impl std::error::Error for ConfigError {}

pub fn parse_config(path: &Path) -> Result<Config, ConfigError> {
    let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io { path: path.to_path_buf(), source })?;
    parse_str(&text)
}

pub fn parse_str(text: &str) -> Result<Config, ConfigError> {
    let table: toml::Table = toml::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))?;
    let root = serde_json::to_value(table).map_err(|e| ConfigError::Parse(e.to_string()))?;
    let Value::Object(root) = root else {
        return Err(ConfigError::Parse("top level must be a table".into()));
    };
    let mut issues = Vec::new();
    let mut config = Config::default();

    for key in root.keys() {
        if !["seed", "threads", "out_dir", "manifold", "fractal", "experiment"].contains(&key.as_str()) {
            issues.push(Issue::new(key.clone(), "unknown key"));
        }
    }
    if let Some(v) = root.get("seed") {
        match v.as_u64() {
            Some(s) => config.seed = s,
            None => issues.push(Issue::new("seed", format!("must be an unsigned 64-bit integer, got {v}"))),
        }
    }
    if let Some(v) = root.get("threads") {
        match v.as_u64().filter(|&t| t >= 1) {
            Some(t) => config.threads = Some(t as usize),
            None => issues.push(Issue::new("threads", format!("must be a positive integer, got {v}"))),
        }
    }
    if let Some(v) = root.get("out_dir") {
        match v.as_str() {
            Some(s) => config.out_dir = Some(PathBuf::from(s)),
            None => issues.push(Issue::new("out_dir", format!("must be a string, got {v}"))),
        }
    }
    if let Some(v) = root.get("manifold") {
        if let Some(chart) = parse_chart(v, "manifold", &mut issues) {
            config.manifold = chart;
        }
    }
    let n = config.manifold.n();
    if let Some(v) = root.get("fractal") {
        config.fractal = parse_fractal(v, "fractal", n, &mut issues);
    }

    let entries: Vec<&Value> = match root.get("experiment") {
        None => Vec::new(),
        Some(Value::Array(list)) => list.iter().collect(),
        Some(v @ Value::Object(_)) => vec![v],
        Some(v) => {
            issues.push(Issue::new("experiment", format!("must be a table or an array of tables, got {v}")));
            Vec::new()
        }
    };
    for (i, entry) in entries.into_iter().enumerate() {
        let prefix = format!("experiment[{i}]");
        if let Some(e) = parse_experiment(entry, &prefix, &config, &mut issues) {
            config.experiments.push(e);
        }
    }
    if issues.is_empty() {
        Ok(config)
    } else {
        Err(ConfigError::Invalid(issues))
    }
}

fn join(prefix: &str, path: &str) -> String {
    if path.is_empty() || path == "." {
        prefix.to_string()
    } else {
        format!("{prefix}.{path}")
    }
}

/// Moves issues produced under `from` to live under `to`.
fn rebase(issues: Vec<Issue>, from: &str, to: &str) -> Vec<Issue> {
    issues
        .into_iter()
        .map(|i| {
            let rest = i.key.strip_prefix(from).unwrap_or(&i.key).trim_start_matches('.');
            Issue::new(join(to, rest), i.message)
        })
        .collect()
}

/// Deserialises `value` into `T`, reporting type errors and keys that `T`
/// does not know.
fn typed<T>(value: &Value, prefix: &str, issues: &mut Vec<Issue>) -> Option<T>
where
    T: serde::de::DeserializeOwned + serde::Serialize,
{
    match serde_path_to_error::deserialize::<_, T>(value.clone()) {
        Ok(t) => {
            let back = serde_json::to_value(&t).unwrap_or(Value::Null);
            unknown_keys(value, &back, prefix, issues);
            Some(t)
        }
        Err(e) => {
            issues.push(Issue::new(join(prefix, &e.path().to_string()), e.inner().to_string()));
            None
        }
    }
}

fn unknown_keys(input: &Value, parsed: &Value, prefix: &str, issues: &mut Vec<Issue>) {
    if let (Value::Object(a), Value::Object(b)) = (input, parsed) {
        for (k, v) in a {
            match b.get(k) {
                Some(w) => unknown_keys(v, w, &join(prefix, k), issues),
                None => issues.push(Issue::new(join(prefix, k), "unknown key")),
            }
        }
    }
}

fn as_table<'a>(value: &'a Value, prefix: &str, issues: &mut Vec<Issue>) -> Option<&'a Map<String, Value>> {
    let t = value.as_object();
    if t.is_none() {
        issues.push(Issue::new(prefix, format!("must be a table, got {value}")));
    }
    t
}

fn parse_chart(value: &Value, prefix: &str, issues: &mut Vec<Issue>) -> Option<ChartSpec> {
    let mut table = as_table(value, prefix, issues)?.clone();
    table.entry("kind").or_insert_with(|| Value::String("cap".into()));
    let chart: ChartSpec = typed(&Value::Object(table), prefix, issues)?;
    issues.extend(rebase(validate_chart(&chart), "manifold", prefix));
    Some(chart)
}

fn parse_fractal(value: &Value, prefix: &str, n: usize, issues: &mut Vec<Issue>) -> Option<FractalSpec> {
    as_table(value, prefix, issues)?;
    let fractal: FractalSpec = typed(value, prefix, issues)?;
    issues.extend(rebase(fractal.validate(n), "fractal", prefix));
    Some(fractal)
}

fn typed_spec(name: &str, params: &Value, prefix: &str, issues: &mut Vec<Issue>) -> Option<ExperimentSpec> {
    Some(match name {
        "manifold-info" => ExperimentSpec::ManifoldInfo(typed(params, prefix, issues)?),
        "cinematic-check" => ExperimentSpec::CinematicCheck(typed(params, prefix, issues)?),
        "pair-volume" => ExperimentSpec::PairVolume(typed(params, prefix, issues)?),
        "cone-incidence" => ExperimentSpec::ConeIncidence(typed(params, prefix, issues)?),
        "config-bound" => ExperimentSpec::ConfigBound(typed(params, prefix, issues)?),
        "project-dim" => ExperimentSpec::ProjectDim(typed(params, prefix, issues)?),
        "exceptional-set" => ExperimentSpec::ExceptionalSet(typed(params, prefix, issues)?),
        "cone-membership" => ExperimentSpec::ConeMembership(typed(params, prefix, issues)?),
        "incidence-count" => ExperimentSpec::IncidenceCount(typed(params, prefix, issues)?),
        _ => return None,
    })
}

fn parse_experiment(value: &Value, prefix: &str, config: &Config, issues: &mut Vec<Issue>) -> Option<ExperimentEntry> {
    let mut table = as_table(value, prefix, issues)?.clone();
    let manifold = table.remove("manifold");
    let fractal = table.remove("fractal");
    match table.get("name").and_then(Value::as_str) {
        None => {
            issues.push(Issue::new(join(prefix, "name"), format!("missing; one of {}", ExperimentSpec::NAMES.join(", "))));
            return None;
        }
        Some(name) if !ExperimentSpec::NAMES.contains(&name) => {
            issues.push(Issue::new(
                join(prefix, "name"),
                format!("unknown experiment `{name}`; expected one of {}", ExperimentSpec::NAMES.join(", ")),
            ));
            return None;
        }
        Some(_) => {}
    }
    let manifold = match &manifold {
        Some(v) => Some(parse_chart(v, &join(prefix, "manifold"), issues)?),
        None => None,
    };
    let chart = manifold.clone().unwrap_or_else(|| config.manifold.clone());
    let fractal = match &fractal {
        Some(v) => Some(parse_fractal(v, &join(prefix, "fractal"), chart.n(), issues)?),
        None => None,
    };
    let name = table.remove("name").and_then(|v| v.as_str().map(str::to_string)).unwrap_or_default();
    let spec = typed_spec(&name, &Value::Object(table), prefix, issues)?;
    let effective = fractal.clone().or_else(|| config.fractal.clone());
    let effective = if spec.needs_fractal() { Some(effective.unwrap_or_default()) } else { effective };
    issues.extend(spec.validate(prefix, &chart, effective.as_ref()));
    Some(ExperimentEntry { spec, manifold, fractal })
}
