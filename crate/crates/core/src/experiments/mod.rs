//! End-to-end scaling experiments and their persisted reports.
//!
//! Each experiment takes a parameter block with documented defaults, runs
//! against a chart (and, where needed, a fractal test set), and fills a
//! [`Recorder`]. [`run`] turns the recorder into an [`ExperimentReport`]
//! whose verdict is derived from the recorded checks and fits. Reports carry
//! no timing or host data, so a rerun with the same inputs is byte-identical.

use std::collections::BTreeMap;
use std::fmt;
use std::io::Write;
use std::path::Path;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::manifold::{ChartSpec, ManifoldChart};
use crate::sets::{FractalSet, Placement};
use crate::stats::{linear_fit, LinearFit};

mod cinematic;
mod config_bound;
mod incidence;
mod line_cone;
mod manifold_info;
mod pair_volume;
mod projection;

pub use cinematic::CinematicParams;
pub use config_bound::{build_configuration, Configuration, ConfigBoundParams};
pub use incidence::{cone_incidences, min_difference, IncidenceParams, MembershipParams};
pub use line_cone::ConeIncidenceParams;
pub use manifold_info::ManifoldInfoParams;
pub use pair_volume::PairVolumeParams;
pub use projection::{dimension_window, projected_image, tangent_projection, ExceptionalParams, ProjectDimParams};

pub const SCHEMA_VERSION: u32 = 1;

/// Smallest `R²` a fit needs before it may support a pass verdict.
pub const DEFAULT_MIN_R2: f64 = 0.9;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Status {
    Completed,
    Aborted,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Verdict {
    Pass,
    Fail,
    Inconclusive,
}

/// One raw number, as written to the CSV file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Measurement {
    pub delta: Option<f64>,
    pub quantity: String,
    pub value: f64,
    pub stderr: Option<f64>,
    pub samples: u64,
}

/// A log-log regression and its acceptance band.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Fit {
    pub name: String,
    /// `None` when there were too few points to fit.
    pub slope: Option<f64>,
    pub intercept: Option<f64>,
    pub ci95: Option<f64>,
    pub r2: Option<f64>,
    pub points: usize,
    pub lo: Option<f64>,
    pub hi: Option<f64>,
    pub min_r2: f64,
    pub passed: Option<bool>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Check {
    pub name: String,
    pub value: f64,
    /// Human-readable acceptance condition, e.g. `<= 2`.
    pub bound: String,
    pub passed: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub schema_version: u32,
    pub experiment: String,
    pub status: Status,
    pub verdict: Verdict,
    pub seed: u64,
    /// Everything needed to rerun: chart, fractal, parameters and seed.
    pub snapshot: serde_json::Value,
    pub measurements: Vec<Measurement>,
    pub fits: Vec<Fit>,
    pub checks: Vec<Check>,
    pub summary: BTreeMap<String, serde_json::Value>,
    pub notes: Vec<String>,
    pub error: Option<String>,
    /// Only filled on request, since it breaks byte-identical reruns.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub wall_clock_ms: Option<u64>,
}

impl ExperimentReport {
    pub fn passed(&self) -> bool {
        self.status == Status::Completed && self.verdict == Verdict::Pass
    }

    pub fn check(&self, name: &str) -> Option<&Check> {
        self.checks.iter().find(|c| c.name == name)
    }

    pub fn fit(&self, name: &str) -> Option<&Fit> {
        self.fits.iter().find(|f| f.name == name)
    }

    pub fn summary_f64(&self, key: &str) -> Option<f64> {
        self.summary.get(key).and_then(serde_json::Value::as_f64)
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("reports serialise");
        s.push('\n');
        s
    }

    /// Raw measurements as CSV with header `delta,quantity,value,stderr,samples`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("delta,quantity,value,stderr,samples\n");
        let opt = |v: Option<f64>| v.map(|x| format!("{x:e}")).unwrap_or_default();
        for m in &self.measurements {
            out.push_str(&format!(
                "{},{},{:e},{},{}\n",
                opt(m.delta),
                m.quantity,
                m.value,
                opt(m.stderr),
                m.samples
            ));
        }
        out
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(self.to_json().as_bytes())?;
        Ok(())
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(self.to_csv().as_bytes())?;
        Ok(())
    }
}

/// Accumulates the results of one experiment.
#[derive(Clone, Debug, Default)]
pub struct Recorder {
    measurements: Vec<Measurement>,
    fits: Vec<Fit>,
    checks: Vec<Check>,
    summary: BTreeMap<String, serde_json::Value>,
    notes: Vec<String>,
    inconclusive: bool,
}

impl Recorder {
    pub fn measure(&mut self, quantity: impl Into<String>, delta: Option<f64>, value: f64, stderr: Option<f64>, samples: u64) {
        self.measurements.push(Measurement { delta, quantity: quantity.into(), value, stderr, samples });
    }

    pub fn scalar(&mut self, key: impl Into<String>, value: impl Serialize) {
        let v = serde_json::to_value(value).unwrap_or(serde_json::Value::Null);
        self.summary.insert(key.into(), v);
    }

    pub fn check(&mut self, name: impl Into<String>, value: f64, bound: impl Into<String>, passed: bool) {
        self.checks.push(Check { name: name.into(), value, bound: bound.into(), passed });
    }

    pub fn check_le(&mut self, name: impl Into<String>, value: f64, limit: f64) {
        self.check(name, value, format!("<= {limit}"), value <= limit);
    }

    pub fn check_ge(&mut self, name: impl Into<String>, value: f64, limit: f64) {
        self.check(name, value, format!(">= {limit}"), value >= limit);
    }

    pub fn note(&mut self, note: impl Into<String>) {
        self.notes.push(note.into());
    }

    /// Marks the run as unable to decide; a pass becomes inconclusive.
    pub fn inconclusive(&mut self, reason: impl Into<String>) {
        self.inconclusive = true;
        self.notes.push(reason.into());
    }

    /// Records a least-squares fit of `y` on `x` with acceptance band
    /// `[lo, hi]`. A fit with `R² < min_r2` never passes.
    pub fn fit(&mut self, name: &str, x: &[f64], y: &[f64], lo: Option<f64>, hi: Option<f64>, min_r2: f64) -> Option<LinearFit> {
        let fit = linear_fit(x, y);
        let record = match &fit {
            Some(f) => {
                let inside = lo.is_none_or(|l| f.slope >= l) && hi.is_none_or(|h| f.slope <= h);
                Fit {
                    name: name.to_string(),
                    slope: Some(f.slope),
                    intercept: Some(f.intercept),
                    ci95: f.slope_ci95.is_finite().then_some(f.slope_ci95),
                    r2: Some(f.r2),
                    points: f.points,
                    lo,
                    hi,
                    min_r2,
                    passed: Some(inside && f.r2 >= min_r2),
                }
            }
            None => {
                self.inconclusive(format!("{name}: insufficient data for a fit ({} points)", x.len()));
                Fit {
                    name: name.to_string(),
                    slope: None,
                    intercept: None,
                    ci95: None,
                    r2: None,
                    points: x.len(),
                    lo,
                    hi,
                    min_r2,
                    passed: None,
                }
            }
        };
        self.fits.push(record);
        fit
    }

    fn verdict(&self) -> Verdict {
        let failed = self.checks.iter().any(|c| !c.passed) || self.fits.iter().any(|f| f.passed == Some(false));
        if failed {
            Verdict::Fail
        } else if self.inconclusive || (self.checks.is_empty() && self.fits.is_empty()) {
            Verdict::Inconclusive
        } else {
            Verdict::Pass
        }
    }
}

/// Problems found while validating parameters, keyed by their config path.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Issue {
    pub key: String,
    pub message: String,
}

impl Issue {
    pub fn new(key: impl Into<String>, message: impl Into<String>) -> Issue {
        Issue { key: key.into(), message: message.into() }
    }
}

impl fmt::Display for Issue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.key, self.message)
    }
}

/// Validation helper collecting issues under a common key prefix.
pub(crate) struct Issues<'a> {
    prefix: &'a str,
    list: Vec<Issue>,
}

impl<'a> Issues<'a> {
    pub(crate) fn new(prefix: &'a str) -> Issues<'a> {
        Issues { prefix, list: Vec::new() }
    }

    pub(crate) fn push(&mut self, key: &str, message: impl Into<String>) {
        let key = if self.prefix.is_empty() { key.to_string() } else { format!("{}.{key}", self.prefix) };
        self.list.push(Issue::new(key, message));
    }

    pub(crate) fn require(&mut self, ok: bool, key: &str, message: impl Into<String>) {
        if !ok {
            self.push(key, message);
        }
    }

    pub(crate) fn positive(&mut self, key: &str, v: f64) {
        self.require(v > 0.0 && v.is_finite(), key, format!("must be a positive number, got {v}"));
    }

    pub(crate) fn unit(&mut self, key: &str, v: f64) {
        self.require((0.0..=1.0).contains(&v), key, format!("must lie in [0, 1], got {v}"));
    }

    pub(crate) fn exponents(&mut self, key: &str, ks: &[u32], min_len: usize) {
        self.require(ks.len() >= min_len, key, format!("needs at least {min_len} entries"));
        self.require(ks.iter().all(|&k| (1..=40).contains(&k)), key, "entries must lie in [1, 40]");
        let mut sorted = ks.to_vec();
        sorted.sort_unstable();
        sorted.dedup();
        self.require(sorted.len() == ks.len(), key, "entries must be distinct");
    }

    pub(crate) fn finish(self) -> Vec<Issue> {
        self.list
    }
}

/// Named placement presets of the fractal block.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PlacementName {
    Axis,
    Planar,
    Diagonal,
    Product,
}

/// The fractal block of a configuration. The ambient dimension is the
/// chart's.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FractalSpec {
    /// Number of branches of the similarity system.
    pub m: usize,
    pub ratio: f64,
    pub level: u32,
    pub placement: PlacementName,
    /// Branches per axis for the `product` placement.
    pub factors: Vec<usize>,
}

impl Default for FractalSpec {
    /// Four copies in a plane at ratio `2^{-5/2}`: dimension `0.8`.
    fn default() -> Self {
        FractalSpec { m: 4, ratio: (-2.5f64).exp2(), level: 10, placement: PlacementName::Planar, factors: Vec::new() }
    }
}

impl FractalSpec {
    pub fn placement(&self) -> Placement {
        match self.placement {
            PlacementName::Axis => Placement::Axis,
            PlacementName::Planar => Placement::Planar,
            PlacementName::Diagonal => Placement::Diagonal,
            PlacementName::Product => Placement::Product { factors: self.factors.clone() },
        }
    }

    pub fn similarity_dim(&self) -> f64 {
        if self.m <= 1 {
            0.0
        } else {
            (self.m as f64).ln() / (1.0 / self.ratio).ln()
        }
    }

    pub fn build(&self, n: usize) -> Result<FractalSet> {
        FractalSet::build(n, self.m, self.ratio, self.level, &self.placement())
    }

    pub fn validate(&self, n: usize) -> Vec<Issue> {
        let mut is = Issues::new("fractal");
        is.require(self.m >= 1, "m", "must be at least 1");
        is.require(self.ratio > 0.0 && self.ratio < 1.0, "ratio", format!("must lie in (0, 1), got {}", self.ratio));
        is.require(self.level >= 1, "level", "must be at least 1");
        let points = (self.m as f64).powi(self.level as i32);
        is.require(points <= 1e8, "level", format!("m^level = {points:.3e} exceeds 1e8 points"));
        match self.placement {
            PlacementName::Planar => {
                let k = (self.m as f64).sqrt().round() as usize;
                is.require(k * k == self.m, "m", "planar placement needs a square number of branches");
                is.require(n >= 2, "placement", "planar placement needs two axes");
            }
            PlacementName::Product => {
                is.require(!self.factors.is_empty(), "factors", "product placement needs factors");
                is.require(self.factors.len() == n, "factors", format!("needs one entry per axis ({n})"));
                is.require(
                    self.factors.iter().product::<usize>() == self.m,
                    "factors",
                    format!("product of factors must equal m = {}", self.m),
                );
            }
            _ => {}
        }
        if self.ratio > 0.0 && self.ratio < 1.0 && self.m > 1 {
            let per_axis = match self.placement {
                PlacementName::Axis | PlacementName::Diagonal => self.m,
                PlacementName::Planar => (self.m as f64).sqrt().round() as usize,
                PlacementName::Product => self.factors.iter().copied().max().unwrap_or(1),
            };
            is.require(
                per_axis as f64 * self.ratio <= 1.0 + 1e-12,
                "ratio",
                format!("{per_axis} copies of side {} do not fit in a unit cell", self.ratio),
            );
        }
        is.finish()
    }
}

/// Chart-block validation with config key paths.
pub fn validate_chart(chart: &ChartSpec) -> Vec<Issue> {
    let mut is = Issues::new("manifold");
    let n = chart.n();
    is.require((3..=crate::manifold::MAX_AMBIENT).contains(&n), "n", format!("must lie in [3, {}], got {n}", crate::manifold::MAX_AMBIENT));
    let c = match *chart {
        ChartSpec::Cap { c, .. } => c,
        ChartSpec::PerturbedCap { c, amplitude, frequency, .. } => {
            is.require(amplitude >= 0.0 && amplitude.is_finite(), "amplitude", format!("must be >= 0, got {amplitude}"));
            is.require(frequency > 0.0 && frequency.is_finite(), "frequency", format!("must be > 0, got {frequency}"));
            c
        }
    };
    is.require(c.is_finite() && c != 0.0 && c.abs() < 1.0, "c", format!("must lie in (-1, 0) ∪ (0, 1), got {c}"));
    is.finish()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "name", rename_all = "kebab-case")]
pub enum ExperimentSpec {
    ManifoldInfo(ManifoldInfoParams),
    CinematicCheck(CinematicParams),
    PairVolume(PairVolumeParams),
    ConeIncidence(ConeIncidenceParams),
    ConfigBound(ConfigBoundParams),
    ProjectDim(ProjectDimParams),
    ExceptionalSet(ExceptionalParams),
    ConeMembership(MembershipParams),
    IncidenceCount(IncidenceParams),
}

impl ExperimentSpec {
    pub const NAMES: [&'static str; 9] = [
        "manifold-info",
        "cinematic-check",
        "pair-volume",
        "cone-incidence",
        "config-bound",
        "project-dim",
        "exceptional-set",
        "cone-membership",
        "incidence-count",
    ];

    pub fn name(&self) -> &'static str {
        match self {
            ExperimentSpec::ManifoldInfo(_) => "manifold-info",
            ExperimentSpec::CinematicCheck(_) => "cinematic-check",
            ExperimentSpec::PairVolume(_) => "pair-volume",
            ExperimentSpec::ConeIncidence(_) => "cone-incidence",
            ExperimentSpec::ConfigBound(_) => "config-bound",
            ExperimentSpec::ProjectDim(_) => "project-dim",
            ExperimentSpec::ExceptionalSet(_) => "exceptional-set",
            ExperimentSpec::ConeMembership(_) => "cone-membership",
            ExperimentSpec::IncidenceCount(_) => "incidence-count",
        }
    }

    /// The experiment with all parameters at their defaults.
    pub fn default_for(name: &str) -> Option<ExperimentSpec> {
        Some(match name {
            "manifold-info" => ExperimentSpec::ManifoldInfo(Default::default()),
            "cinematic-check" => ExperimentSpec::CinematicCheck(Default::default()),
            "pair-volume" => ExperimentSpec::PairVolume(Default::default()),
            "cone-incidence" => ExperimentSpec::ConeIncidence(Default::default()),
            "config-bound" => ExperimentSpec::ConfigBound(Default::default()),
            "project-dim" => ExperimentSpec::ProjectDim(Default::default()),
            "exceptional-set" => ExperimentSpec::ExceptionalSet(Default::default()),
            "cone-membership" => ExperimentSpec::ConeMembership(Default::default()),
            "incidence-count" => ExperimentSpec::IncidenceCount(Default::default()),
            _ => return None,
        })
    }

    pub fn needs_fractal(&self) -> bool {
        matches!(
            self,
            ExperimentSpec::ProjectDim(_)
                | ExperimentSpec::ExceptionalSet(_)
                | ExperimentSpec::ConeMembership(_)
                | ExperimentSpec::IncidenceCount(_)
        )
    }

    /// Range checks of the parameters against the chart and fractal they
    /// will run with. `prefix` is the config path of the parameter block.
    pub fn validate(&self, prefix: &str, chart: &ChartSpec, fractal: Option<&FractalSpec>) -> Vec<Issue> {
        let n = chart.n();
        let mut is = Issues::new(prefix);
        match self {
            ExperimentSpec::ManifoldInfo(p) => p.validate(&mut is),
            ExperimentSpec::CinematicCheck(p) => p.validate(&mut is, n),
            ExperimentSpec::PairVolume(p) => p.validate(&mut is, n),
            ExperimentSpec::ConeIncidence(p) => p.validate(&mut is, n),
            ExperimentSpec::ConfigBound(p) => p.validate(&mut is, n),
            ExperimentSpec::ProjectDim(p) => p.validate(&mut is, n, fractal),
            ExperimentSpec::ExceptionalSet(p) => p.validate(&mut is, n, fractal),
            ExperimentSpec::ConeMembership(p) => p.validate(&mut is, n),
            ExperimentSpec::IncidenceCount(p) => p.validate(&mut is, n),
        }
        let mut out = is.finish();
        if self.needs_fractal() && fractal.is_none() {
            out.push(Issue::new("fractal", format!("experiment {} needs a fractal block", self.name())));
        }
        out
    }
}

/// Inputs shared by every experiment of a run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSetup {
    pub chart: ChartSpec,
    pub fractal: Option<FractalSpec>,
    pub seed: u64,
}

/// What an experiment sees while running.
pub(crate) struct Ctx<'a> {
    pub spec: &'a ChartSpec,
    pub chart: Arc<ManifoldChart>,
    pub fractal: Option<&'a FractalSpec>,
    pub seed: u64,
    cancel: Option<&'a AtomicBool>,
}

impl Ctx<'_> {
    pub fn n(&self) -> usize {
        self.chart.n()
    }

    pub fn cancelled(&self) -> Result<()> {
        if self.cancel.is_some_and(|c| c.load(Ordering::Relaxed)) {
            Err(Error::Cancelled)
        } else {
            Ok(())
        }
    }

    pub fn cancel_flag(&self) -> Option<&AtomicBool> {
        self.cancel
    }

    pub fn seed_for(&self, label: &str) -> u64 {
        crate::rng::child_seed(self.seed, label)
    }

    pub fn fractal(&self) -> Result<(&FractalSpec, FractalSet)> {
        let spec = self.fractal.ok_or_else(|| invalid("fractal", "this experiment needs a fractal block"))?;
        Ok((spec, spec.build(self.n())?))
    }
}

/// Runs one experiment. Errors, including cancellation, produce an aborted
/// report that keeps everything recorded up to that point.
pub fn run(spec: &ExperimentSpec, setup: &RunSetup, cancel: Option<&AtomicBool>) -> ExperimentReport {
    let snapshot = serde_json::json!({
        "manifold": setup.chart,
        "fractal": setup.fractal,
        "experiment": spec,
        "seed": setup.seed,
    });
    let mut rec = Recorder::default();
    let issues = {
        let mut all = validate_chart(&setup.chart);
        if let Some(f) = &setup.fractal {
            all.extend(f.validate(setup.chart.n()));
        }
        all.extend(spec.validate("experiment", &setup.chart, setup.fractal.as_ref()));
        all
    };
    let outcome = if !issues.is_empty() {
        Err(Error::InvalidParameter {
            name: "config",
            reason: issues.iter().map(ToString::to_string).collect::<Vec<_>>().join("; "),
        })
    } else {
        setup.chart.build().and_then(|chart| {
            let ctx = Ctx { spec: &setup.chart, chart: Arc::new(chart), fractal: setup.fractal.as_ref(), seed: setup.seed, cancel };
            dispatch(spec, &ctx, &mut rec)
        })
    };
    let (status, error) = match outcome {
        Ok(()) => (Status::Completed, None),
        Err(e) => {
            log::error!("{}: {e}", spec.name());
            (Status::Aborted, Some(e.to_string()))
        }
    };
    let verdict = if status == Status::Aborted { Verdict::Inconclusive } else { rec.verdict() };
    let mut measurements = rec.measurements;
    measurements.sort_by(|a, b| {
        a.quantity
            .cmp(&b.quantity)
            .then(a.delta.unwrap_or(f64::NEG_INFINITY).total_cmp(&b.delta.unwrap_or(f64::NEG_INFINITY)))
            .then(a.value.total_cmp(&b.value))
    });
    ExperimentReport {
        schema_version: SCHEMA_VERSION,
        experiment: spec.name().to_string(),
        status,
        verdict,
        seed: setup.seed,
        snapshot,
        measurements,
        fits: rec.fits,
        checks: rec.checks,
        summary: rec.summary,
        notes: rec.notes,
        error,
        wall_clock_ms: None,
    }
}

fn dispatch(spec: &ExperimentSpec, ctx: &Ctx, rec: &mut Recorder) -> Result<()> {
    match spec {
        ExperimentSpec::ManifoldInfo(p) => manifold_info::run(p, ctx, rec),
        ExperimentSpec::CinematicCheck(p) => cinematic::run(p, ctx, rec),
        ExperimentSpec::PairVolume(p) => pair_volume::run(p, ctx, rec),
        ExperimentSpec::ConeIncidence(p) => line_cone::run(p, ctx, rec),
        ExperimentSpec::ConfigBound(p) => config_bound::run(p, ctx, rec),
        ExperimentSpec::ProjectDim(p) => projection::run_project(p, ctx, rec),
        ExperimentSpec::ExceptionalSet(p) => projection::run_exceptional(p, ctx, rec),
        ExperimentSpec::ConeMembership(p) => incidence::run_membership(p, ctx, rec),
        ExperimentSpec::IncidenceCount(p) => incidence::run_count(p, ctx, rec),
    }
}

/// `δ = 2^{−k}`.
pub(crate) fn delta_of(k: u32) -> f64 {
    (-(k as f64)).exp2()
}

/// Pooled regression of `y` on `x` after centring each group, so that only
/// within-group variation determines the slope.
pub(crate) fn centred_by_group(groups: &[Vec<(f64, f64)>]) -> (Vec<f64>, Vec<f64>) {
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    for g in groups.iter().filter(|g| g.len() >= 2) {
        let k = g.len() as f64;
        let mx = g.iter().map(|p| p.0).sum::<f64>() / k;
        let my = g.iter().map(|p| p.1).sum::<f64>() / k;
        for &(x, y) in g {
            xs.push(x - mx);
            ys.push(y - my);
        }
    }
    (xs, ys)
}

pub(crate) fn quantile(sorted: &[f64], q: f64) -> f64 {
    if sorted.is_empty() {
        return f64::NAN;
    }
    let pos = (q * (sorted.len() - 1) as f64).round() as usize;
    sorted[pos.min(sorted.len() - 1)]
}
