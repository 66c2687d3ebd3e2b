//! Acceptance gate: one line per criterion, nonzero exit if any fails.
//!
//! Runs without the libtest harness so that the per-criterion lines are
//! always printed. All runs use seed 42.

use std::process::ExitCode;
use std::time::{Duration, Instant};

use rand::Rng;
use tangentproj::experiments::*;
use tangentproj::manifold::ChartSpec;
use tangentproj::rng;
use tangentproj::sets::{box_dimension, FractalSet, Placement};

mod common;
use common::{fd_shape, principal_sine, random_x};

const SEED: u64 = 42;

struct Outcome {
    passed: bool,
    detail: String,
}

impl Outcome {
    fn new(passed: bool, detail: impl Into<String>) -> Outcome {
        Outcome { passed, detail: detail.into() }
    }
}

fn cap3() -> ChartSpec {
    ChartSpec::Cap { n: 3, c: 0.6 }
}

fn setup(chart: ChartSpec, fractal: Option<FractalSpec>) -> RunSetup {
    RunSetup { chart, fractal, seed: SEED }
}

fn run_named(name: &str, chart: ChartSpec, fractal: Option<FractalSpec>) -> ExperimentReport {
    run(&ExperimentSpec::default_for(name).unwrap(), &setup(chart, fractal), None)
}

fn failed_items(r: &ExperimentReport) -> String {
    let mut bad: Vec<String> = r.checks.iter().filter(|c| !c.passed).map(|c| format!("{}={:.4}", c.name, c.value)).collect();
    bad.extend(r.fits.iter().filter(|f| f.passed != Some(true)).map(|f| format!("{} slope={:?} r2={:?}", f.name, f.slope, f.r2)));
    if let Some(e) = &r.error {
        bad.push(format!("error: {e}"));
    }
    bad.join(", ")
}

fn slope(r: &ExperimentReport, fit: &str) -> f64 {
    r.fit(fit).and_then(|f| f.slope).unwrap_or(f64::NAN)
}

fn criterion_1() -> Outcome {
    let mut worst = (0.0f64, 0.0f64, 0.0f64);
    let mut failures = Vec::new();
    for n in [3, 4, 5] {
        for c in [0.3, 0.6, 0.9] {
            let spec = ChartSpec::Cap { n, c };
            let report = run_named("manifold-info", spec.clone(), None);
            if !report.passed() {
                failures.push(format!("n={n} c={c}: {}", failed_items(&report)));
            }
            let chart = spec.build().unwrap();
            let dual = chart.dual();
            let height = (1.0 - c * c).sqrt();
            let mut r = rng::stream(SEED, (n * 10) as u64 + (c * 10.0) as u64);
            for _ in 0..1000 {
                let x = random_x(&chart, &mut r);
                let nu = chart.normal(&x);
                worst.0 = worst.0.max((nu[n - 1] - height).abs());
                let (ta, mut k) = fd_shape(&|x: &[f64]| chart.sigma(x), &|x: &[f64]| chart.normal(x), &x);
                let (tb, mut ks) = fd_shape(&|x: &[f64]| dual.sigma(x), &|x: &[f64]| dual.normal(x), &x);
                k.sort_by(f64::total_cmp);
                ks.sort_by(|a, b| b.total_cmp(a));
                for (a, b) in k.iter().zip(&ks) {
                    worst.1 = worst.1.max((a * b - 1.0).abs());
                }
                worst.2 = worst.2.max(principal_sine(&ta, &tb));
            }
        }
    }
    let passed = failures.is_empty() && worst.0 <= 1e-9 && worst.1 <= 1e-6 && worst.2 <= 1e-7;
    Outcome::new(
        passed,
        format!(
            "height dev {:.1e}, |κκ*-1| {:.1e}, principal sine {:.1e}{}",
            worst.0,
            worst.1,
            worst.2,
            if failures.is_empty() { String::new() } else { format!("; {}", failures.join("; ")) }
        ),
    )
}

fn criterion_2() -> Outcome {
    let r = run_named("cinematic-check", cap3(), None);
    let lo = r.summary_f64("bilipschitz_lo").unwrap_or(f64::NAN);
    let hi = r.summary_f64("bilipschitz_hi").unwrap_or(f64::NAN);
    let ratio = r.check("min_certified_ratio").map_or(f64::NAN, |c| c.value);
    let change = r.check("k_relative_change").map_or(f64::NAN, |c| c.value);
    let passed = r.passed() && ratio > 0.0 && hi / lo < 50.0 && change <= 0.2;
    Outcome::new(passed, format!("min certified ratio {ratio:.4}, hi/lo {:.2}, K change {:.1}% {}", hi / lo, 100.0 * change, failed_items(&r)))
}

fn criterion_3() -> Outcome {
    let r3 = run_named("pair-volume", cap3(), None);
    let r4 = run_named("pair-volume", ChartSpec::Cap { n: 4, c: 0.6 }, None);
    let (d3, dl3, d4) = (slope(&r3, "d_exponent"), slope(&r3, "delta_exponent"), slope(&r4, "d_exponent"));
    let r2_ok = |r: &ExperimentReport| r.fits.iter().all(|f| f.r2.is_some_and(|v| v >= 0.9));
    let passed = r3.passed()
        && r4.passed()
        && (d3 + 1.0).abs() <= 0.25
        && (dl3 - 3.0).abs() <= 0.25
        && (d4 + 2.0).abs() <= 0.35
        && r2_ok(&r3)
        && r2_ok(&r4);
    Outcome::new(passed, format!("n=3 d {d3:.3} δ {dl3:.3}; n=4 d {d4:.3} {}{}", failed_items(&r3), failed_items(&r4)))
}

fn criterion_4() -> Outcome {
    let r = run_named("cone-incidence", cap3(), None);
    let s = slope(&r, "delta_exponent");
    let hist = r.summary.get("points_histogram").cloned().unwrap_or_default();
    let tried = r.summary_f64("random_lines_hitting").unwrap_or(0.0);
    let passed = r.passed()
        && (s - 3.0).abs() <= 0.3
        && r.check("point_violations").is_some_and(|c| c.value == 0.0)
        && r.check("component_violations").is_some_and(|c| c.value == 0.0)
        && tried >= 1000.0;
    Outcome::new(passed, format!("tube slope {s:.3}, random lines {tried}, histogram {hist} {}", failed_items(&r)))
}

fn criterion_5() -> Outcome {
    let cases: [(&str, FractalSet, f64); 4] = [
        ("cantor", FractalSet::build(3, 2, 1.0 / 3.0, 12, &Placement::Axis).unwrap(), 2f64.ln() / 3f64.ln()),
        ("full grid", FractalSet::build(3, 4, 0.5, 9, &Placement::Planar).unwrap(), 2.0),
        (
            "cantor x cantor",
            FractalSet::build(3, 4, 1.0 / 3.0, 9, &Placement::Product { factors: vec![2, 2, 1] }).unwrap(),
            2.0 * 2f64.ln() / 3f64.ln(),
        ),
        (
            "fifths x fifths",
            FractalSet::build(3, 9, 0.2, 6, &Placement::Product { factors: vec![3, 3, 1] }).unwrap(),
            2.0 * 3f64.ln() / 5f64.ln(),
        ),
    ];
    let mut passed = true;
    let mut parts = Vec::new();
    for (name, set, expected) in cases {
        let (k0, k1) = set.default_window(6);
        let est = box_dimension(&set.points, k0, k1).unwrap().slope;
        passed &= (est - expected).abs() <= 0.05;
        parts.push(format!("{name} {est:.4} vs {expected:.4}"));
    }
    Outcome::new(passed, parts.join(", "))
}

fn criterion_6() -> Outcome {
    let mut passed = true;
    let mut parts = Vec::new();
    for (s, sp) in [(0.5, 0.5), (0.4, 0.7)] {
        let spec = ExperimentSpec::ConfigBound(ConfigBoundParams { s, s_prime: sp, ..Default::default() });
        let r = run(&spec, &setup(cap3(), None), None);
        let f = r.fit("union_exponent");
        let e = f.and_then(|f| f.slope).unwrap_or(f64::NAN);
        let r2 = f.and_then(|f| f.r2).unwrap_or(f64::NAN);
        passed &= r.passed() && e >= s + sp - 0.15 && r2 >= 0.9;
        parts.push(format!("(s,s')=({s},{sp}) exponent {e:.3} R² {r2:.4} {}", failed_items(&r)));
    }
    Outcome::new(passed, parts.join("; "))
}

fn criterion_7() -> Outcome {
    let planar = FractalSpec::default();
    let pd = run_named("project-dim", cap3(), Some(planar.clone()));
    let fraction = pd.check("fraction_within_tolerance").map_or(f64::NAN, |c| c.value);
    let ex = run_named("exceptional-set", cap3(), Some(planar.clone()));
    let marked: Vec<String> = [0.3, 0.5]
        .iter()
        .map(|s| {
            let key = format!("marked_slope_{s}");
            let v = ex.check(&key).map(|c| c.value).or_else(|| ex.fit(&key).and_then(|f| f.slope)).unwrap_or(f64::NAN);
            format!("s={s}: {v:.3}")
        })
        .collect();
    let passed = planar.level >= 10
        && (planar.similarity_dim() - 0.8).abs() < 1e-12
        && pd.passed()
        && fraction >= 0.95
        && ex.passed();
    Outcome::new(
        passed,
        format!(
            "{:.1}% of x in band (dims {:.3}..{:.3}); marked slopes {} {}{}",
            100.0 * fraction,
            pd.summary_f64("dim_min").unwrap_or(f64::NAN),
            pd.summary_f64("dim_max").unwrap_or(f64::NAN),
            marked.join(", "),
            failed_items(&pd),
            failed_items(&ex)
        ),
    )
}

/// Four copies per axis pair and one along `e₂`: dimension 1.3, collapsing
/// to the `e₁` Cantor factor under projection along `e₃`.
fn collapsing_product() -> FractalSpec {
    FractalSpec {
        m: 4,
        ratio: 4f64.powf(-1.0 / 1.3),
        level: 9,
        placement: PlacementName::Product,
        factors: vec![2, 1, 2],
    }
}

/// Box dimension of `π_x(Z)` computed directly from the closed-form cap frame
/// `e₁ = (−sin φ, cos φ, 0)`, `ν = (−c cos φ, −c sin φ, √(1 − c²))`, `φ = 2πx`.
fn explicit_projection_dim(set: &FractalSet, x: f64, c: f64, width: u32) -> f64 {
    let phi = 2.0 * std::f64::consts::PI * x;
    let e1 = [-phi.sin(), phi.cos(), 0.0];
    let nu = [-c * phi.cos(), -c * phi.sin(), (1.0 - c * c).sqrt()];
    let mut coords = Vec::with_capacity(2 * set.len());
    for p in set.points.iter() {
        coords.push(e1.iter().zip(p).map(|(a, b)| a * b).sum::<f64>());
        coords.push(nu.iter().zip(p).map(|(a, b)| a * b).sum::<f64>());
    }
    let cloud = tangentproj::sets::PointCloud::from_coords(2, coords);
    let (k0, k1) = dimension_window(cloud.len(), set.cell_side, set.similarity_dim.min(2.0), width);
    box_dimension(&cloud, k0, k1).unwrap().slope
}

fn criterion_8() -> Outcome {
    let product = collapsing_product();
    let dim_z = product.similarity_dim();
    let pd = run(
        &ExperimentSpec::ProjectDim(ProjectDimParams {
            tolerance: 0.15,
            quantile: 0.9,
            thresholds: vec![],
            collapsing_direction: Some(vec![0.0, 0.0, 1.0]),
            ..Default::default()
        }),
        &setup(cap3(), Some(product.clone())),
        None,
    );
    let collapsed = pd.check("collapsed_dim").map_or(f64::NAN, |c| c.value);
    let fraction = pd.check("fraction_within_tolerance").map_or(f64::NAN, |c| c.value);

    // Independent image oracle at one level finer, at 10 random x.
    let finer = FractalSpec { level: product.level + 1, ..product.clone() }.build(3).unwrap();
    let mut r = rng::stream(SEED, 8);
    let oracle: Vec<f64> = (0..10).map(|_| explicit_projection_dim(&finer, r.random(), 0.6, 6)).collect();
    let oracle_ok = oracle.iter().filter(|d| (*d - dim_z).abs() <= 0.15).count() >= 9;

    let mem = run_named("cone-membership", cap3(), Some(product.clone()));
    let pairs = mem.summary_f64("pairs_found").unwrap_or(0.0);
    let violations = mem.check("membership_violations").map_or(f64::NAN, |c| c.value);
    let cnt = run_named("incidence-count", cap3(), Some(product));
    let s = cnt.summary_f64("collapsed_dim").unwrap_or(f64::NAN);
    let ring = slope(&cnt, "ring_exponent");

    let passed = pd.passed()
        && collapsed <= 1.05
        && fraction >= 0.9
        && oracle_ok
        && mem.passed()
        && pairs >= 1000.0
        && violations == 0.0
        && cnt.passed()
        && ring <= s + 0.25;
    let (lo, hi) = oracle.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &d| (a.min(d), b.max(d)));
    Outcome::new(
        passed,
        format!(
            "dim Z {dim_z:.3}, collapsed {collapsed:.3}, {:.1}% within ±0.15, oracle dims {lo:.3}..{hi:.3}; \
             membership {violations} violations on {pairs} pairs; ring exponent {ring:.3} vs s+0.25 = {:.3} {}{}{}",
            100.0 * fraction,
            s + 0.25,
            failed_items(&pd),
            failed_items(&mem),
            failed_items(&cnt)
        ),
    )
}

/// Every experiment at reduced size, run twice.
fn criterion_9() -> Outcome {
    let small_fractal = FractalSpec { level: 6, ..FractalSpec::default() };
    let small_product = FractalSpec { level: 6, ..collapsing_product() };
    let specs: Vec<(ExperimentSpec, Option<FractalSpec>)> = vec![
        (ExperimentSpec::ManifoldInfo(ManifoldInfoParams { samples: 50, constants_random: 50, ..Default::default() }), None),
        (ExperimentSpec::CinematicCheck(CinematicParams { pairs: 50, x_grid: 32, ..Default::default() }), None),
        (
            ExperimentSpec::PairVolume(PairVolumeParams { pairs: 3, delta_exponents: vec![6, 7, 8], samples: 4000, ..Default::default() }),
            None,
        ),
        (
            ExperimentSpec::ConeIncidence(ConeIncidenceParams {
                lines: 5,
                delta_exponents: vec![6, 7, 8],
                samples: 2000,
                spread_angles: vec![],
                random_lines: 20,
                ..Default::default()
            }),
            None,
        ),
        (ExperimentSpec::ConfigBound(ConfigBoundParams { delta_exponents: vec![5, 6, 7], ..Default::default() }), None),
        (ExperimentSpec::ProjectDim(ProjectDimParams { x_samples: 4, window_width: 3, ..Default::default() }), Some(small_fractal.clone())),
        (ExperimentSpec::ExceptionalSet(ExceptionalParams { x_resolution: 8, window_width: 3, ..Default::default() }), Some(small_fractal)),
        (ExperimentSpec::ConeMembership(MembershipParams { pairs: 20, constructed_pairs: 5, ..Default::default() }), Some(small_product.clone())),
        (ExperimentSpec::IncidenceCount(IncidenceParams { centres: 20, ..Default::default() }), Some(small_product)),
    ];
    let mut differing = Vec::new();
    for (spec, fractal) in &specs {
        let s = setup(cap3(), fractal.clone());
        let a = run(spec, &s, None);
        let b = run(spec, &s, None);
        if a.to_json() != b.to_json() || a.to_csv() != b.to_csv() {
            differing.push(spec.name());
        }
    }
    Outcome::new(
        differing.is_empty(),
        if differing.is_empty() {
            format!("{} experiments produced byte-identical reruns", specs.len())
        } else {
            format!("reruns differ for {differing:?}")
        },
    )
}

type Criterion = (u32, &'static str, Duration, fn() -> Outcome);

fn main() -> ExitCode {
    let min = |m: u64| Duration::from_secs(60 * m);
    let criteria: [Criterion; 9] = [
        (1, "duality suite", Duration::from_secs(10), criterion_1),
        (2, "cinematic suite", min(2), criterion_2),
        (3, "pair-volume scaling", min(10), criterion_3),
        (4, "line-cone incidence", min(10), criterion_4),
        (5, "box-dimension oracle", min(1), criterion_5),
        (6, "configuration lower bound", min(15), criterion_6),
        (7, "dimension conservation", min(30), criterion_7),
        (8, "collapsing product protocol", min(45), criterion_8),
        (9, "determinism", min(30), criterion_9),
    ];
    let filter: Vec<u32> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let mut all = true;
    for (id, name, budget, f) in criteria {
        if !filter.is_empty() && !filter.contains(&id) {
            continue;
        }
        let start = Instant::now();
        let out = f();
        let elapsed = start.elapsed();
        let in_time = elapsed <= budget;
        let ok = out.passed && in_time;
        all &= ok;
        println!(
            "criterion {id} ({name}): {} in {:.1}s (limit {}s){}: {}",
            if ok { "PASS" } else { "FAIL" },
            elapsed.as_secs_f64(),
            budget.as_secs(),
            if in_time { "" } else { " over time" },
            out.detail
        );
    }
    if all {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
