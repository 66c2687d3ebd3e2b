//! Cone membership of near-intersecting graph pairs, and incidence counts of
//! a fractal set against thickened cones.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::projection::{dimension_window, tangent_projection};
use super::{delta_of, Ctx, Issues, Recorder, DEFAULT_MIN_R2};
use crate::cone::{cone_distance, Cone, ON_CONE_TOL};
use crate::error::{invalid, Result};
use crate::grid;
use crate::manifold::{dist, ManifoldChart};
use crate::projmap::{eval_direction, CinematicMap};
use crate::rng;
use crate::sets::{box_dimension, separated_subset, PointCloud};

const REFINE_STEPS: usize = 30;

/// Frames sampled on a parameter grid, for fast scans of `x ↦ |f_d(x)|`.
struct FrameGrid {
    xs: Vec<Vec<f64>>,
    /// Row-major `(n−1) × n` matrices `[e_1; …; e_m; ν]`.
    rows: Vec<f64>,
    n: usize,
}

impl FrameGrid {
    fn new(chart: &ManifoldChart, g: usize) -> FrameGrid {
        let n = chart.n();
        let m = chart.param_dim();
        let xs = grid::cell_centres(m, g);
        let rows = xs
            .par_iter()
            .flat_map_iter(|x| {
                let f = chart.frame(x);
                let mut r = Vec::with_capacity((m + 1) * n);
                for i in 0..m {
                    r.extend_from_slice(f.tangent(i));
                }
                r.extend_from_slice(f.normal());
                r
            })
            .collect();
        FrameGrid { xs, rows, n }
    }

    /// Grid point minimising `|f_d|`, with the minimum.
    fn scan(&self, d: &[f64]) -> (usize, f64) {
        let n = self.n;
        let block = (n - 1) * n;
        let mut best = (0, f64::INFINITY);
        for (i, rows) in self.rows.chunks_exact(block).enumerate() {
            let v: f64 = rows.chunks_exact(n).map(|r| r.iter().zip(d).map(|(a, b)| a * b).sum::<f64>().powi(2)).sum();
            if v < best.1 {
                best = (i, v);
            }
        }
        (best.0, best.1.sqrt())
    }
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|a| a * a).sum::<f64>().sqrt()
}

fn wrap(chart: &ManifoldChart, x: &mut [f64]) {
    let m = x.len();
    for (i, v) in x.iter_mut().enumerate() {
        if i + 1 == m && chart.is_periodic() {
            *v = v.rem_euclid(1.0);
        } else {
            *v = v.clamp(0.0, 1.0);
        }
    }
}

/// Damped Gauss–Newton descent of `|f_d(x)|²` from `x`.
fn refine(chart: &Arc<ManifoldChart>, d: &[f64], mut x: Vec<f64>) -> (Vec<f64>, f64) {
    let map = CinematicMap::new(chart.clone(), d.to_vec()).expect("dimension checked by caller");
    let mut value = norm(&map.eval(&x));
    for _ in 0..REFINE_STEPS {
        let f = DVector::from_vec(map.eval(&x));
        let j: DMatrix<f64> = map.gradient(&x);
        let jt = j.transpose();
        let Some(step) = (&jt * &j).lu().solve(&(-(&jt * f))) else {
            break;
        };
        let mut t = 1.0;
        let mut improved = false;
        while t > 1e-6 {
            let mut trial: Vec<f64> = x.iter().zip(step.iter()).map(|(a, s)| a + t * s).collect();
            wrap(chart, &mut trial);
            let v = norm(&map.eval(&trial));
            if v < value {
                x = trial;
                improved = v < value * (1.0 - 1e-12);
                value = v;
                break;
            }
            t *= 0.5;
        }
        if !improved {
            break;
        }
    }
    (x, value)
}

/// Parameter minimising `|f_d(x)|` over the chart, and the minimum: a grid
/// scan with `grid` points per axis followed by Gauss–Newton refinement.
pub fn min_difference(chart: &Arc<ManifoldChart>, d: &[f64], grid: usize) -> Result<(Vec<f64>, f64)> {
    if d.len() != chart.n() {
        return Err(crate::error::Error::DimensionMismatch { dim: chart.n() });
    }
    if grid == 0 {
        return Err(invalid("grid", "must be positive"));
    }
    let table = FrameGrid::new(chart, grid);
    let (i, _) = table.scan(d);
    Ok(refine(chart, d, table.xs[i].clone()))
}

/// Distances `|w − z|` of the points `w ≠ z` within `radius` of the cone with
/// apex `z`, in the order of `points`.
pub fn cone_incidences(cone: &Cone, points: &PointCloud, radius: f64) -> Vec<f64> {
    let apex = cone.apex();
    (0..points.len())
        .into_par_iter()
        .filter_map(|i| {
            let w = points.point(i);
            let r = dist(w, apex);
            (r > 0.0 && cone_distance(cone, w) < radius).then_some(r)
        })
        .collect()
}

/// Smallest singular value of `[e_1; …; e_m; ν]` at `x`: `|f_d(x)|` bounds
/// the distance from `d` to the line through `Σ(x)` by `|f_d(x)| / σ`.
fn frame_sigma_min(chart: &ManifoldChart, x: &[f64]) -> f64 {
    let n = chart.n();
    let m = chart.param_dim();
    let f = chart.frame(x);
    let a = DMatrix::from_fn(m + 1, n, |r, c| if r < m { f.tangent(r)[c] } else { f.normal()[c] });
    a.singular_values().min()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MembershipParams {
    /// `δ = 2^{−k}`.
    pub delta_exponent: u32,
    /// Near-intersecting pairs to test.
    pub pairs: usize,
    /// Pairs `z' = z + u Σ(x₀)` built to lie on the cone.
    pub constructed_pairs: usize,
    pub constructed_offset: f64,
    /// Random pairs drawn at most while searching for near-intersecting ones.
    pub max_trials: usize,
    /// Parameter grid of the minimum search.
    pub grid: usize,
    /// Numerical slack on the containment bound.
    pub tolerance: f64,
}

impl Default for MembershipParams {
    fn default() -> Self {
        MembershipParams {
            delta_exponent: 8,
            pairs: 1000,
            constructed_pairs: 100,
            constructed_offset: 0.3,
            max_trials: 2_000_000,
            grid: 256,
            tolerance: 1e-9,
        }
    }
}

impl MembershipParams {
    pub(super) fn validate(&self, is: &mut Issues, n: usize) {
        is.require((2..=20).contains(&self.delta_exponent), "delta_exponent", "must lie in [2, 20]");
        is.require(self.pairs >= 1, "pairs", "must be at least 1");
        is.require(self.constructed_offset.abs() <= 1.0, "constructed_offset", "must lie in [-1, 1]");
        is.require(self.max_trials >= self.pairs, "max_trials", "must be at least the number of pairs");
        let cells = (self.grid as f64).powi((n - 2) as i32);
        is.require(self.grid >= 4 && cells <= 1e6, "grid", format!("need grid >= 4 and grid^(n-2) <= 1e6, got {cells}"));
        is.require(self.tolerance >= 0.0, "tolerance", "must be nonnegative");
    }
}

pub(super) fn run_membership(p: &MembershipParams, ctx: &Ctx, rec: &mut Recorder) -> Result<()> {
    let chart = &ctx.chart;
    let n = ctx.n();
    let delta = delta_of(p.delta_exponent);
    let (_, set) = ctx.fractal()?;
    let ys = separated_subset(&set.points, delta)?;
    rec.scalar("separated_points", ys.len());
    if ys.len() < 2 {
        return Err(invalid("fractal", "fewer than two separated points at this scale"));
    }

    // Constructed pairs lie on the cone exactly.
    let mut rng = rng::stream(ctx.seed_for("constructed"), 0);
    let mut worst_constructed = 0.0f64;
    let mut worst_agreement = 0.0f64;
    for _ in 0..p.constructed_pairs {
        let z = ys.point(rng.random_range(0..ys.len())).to_vec();
        let x0 = rng::unit_cube(&mut rng, n - 2);
        let s = chart.sigma(&x0);
        let z2: Vec<f64> = z.iter().zip(&s).map(|(a, b)| a + p.constructed_offset * b).collect();
        let cone = Cone::new(chart.clone(), z.clone())?;
        worst_constructed = worst_constructed.max(cone_distance(&cone, &z2));
        let d: Vec<f64> = z.iter().zip(&z2).map(|(a, b)| a - b).collect();
        worst_agreement = worst_agreement.max(norm(&eval_direction(chart, &d, &x0)));
    }
    if p.constructed_pairs > 0 {
        rec.check_le("constructed_cone_distance", worst_constructed, ON_CONE_TOL);
        rec.check_le("constructed_value_gap", worst_agreement, 1e-12);
    }

    // Near-intersecting random pairs, searched in batches.
    let table = FrameGrid::new(chart, p.grid);
    let mut rng = rng::stream(ctx.seed_for("pairs"), 0);
    let mut found: Vec<(usize, usize, Vec<f64>, f64)> = Vec::new();
    let mut trials = 0usize;
    let mut far = 0usize;
    while found.len() < p.pairs && trials < p.max_trials {
        ctx.cancelled()?;
        let batch = 4096.min(p.max_trials - trials);
        let draws: Vec<(usize, usize)> = (0..batch)
            .map(|_| {
                let a = rng.random_range(0..ys.len());
                let mut b = rng.random_range(0..ys.len() - 1);
                if b >= a {
                    b += 1;
                }
                (a, b)
            })
            .collect();
        trials += batch;
        let results: Vec<Option<(Vec<f64>, f64)>> = draws
            .par_iter()
            .map(|&(a, b)| {
                let d: Vec<f64> = ys.point(a).iter().zip(ys.point(b)).map(|(u, v)| u - v).collect();
                let (i, coarse) = table.scan(&d);
                // The grid minimum overestimates by at most a grid step; only
                // promising pairs are refined.
                if coarse > 16.0 * delta {
                    return Some((Vec::new(), coarse));
                }
                Some(refine(chart, &d, table.xs[i].clone()))
            })
            .collect();
        for ((a, b), r) in draws.into_iter().zip(results) {
            let Some((x, value)) = r else { continue };
            if value > 10.0 * delta {
                far += 1;
            } else if value < 2.0 * delta && found.len() < p.pairs {
                found.push((a, b, x, value));
            }
        }
    }
    rec.scalar("trials", trials);
    rec.scalar("pairs_beyond_10_delta", far);
    rec.scalar("pairs_found", found.len());
    if found.len() < p.pairs {
        rec.inconclusive(format!("found {} of {} near-intersecting pairs in {trials} trials", found.len(), p.pairs));
    }
    // With an orthonormal frame the containment radius is 2δ; otherwise it
    // grows by 1/σ_min of the frame at the minimiser.
    let outcomes: Vec<(f64, f64)> = found
        .par_iter()
        .map(|(a, b, x, _)| {
            let cone = Cone::new(chart.clone(), ys.point(*a).to_vec()).expect("dimension matches");
            let distance = cone_distance(&cone, ys.point(*b));
            let limit = 2.0 * delta * (1.0 / frame_sigma_min(chart, x)).max(1.0);
            (distance, limit)
        })
        .collect();
    let mut violations = 0usize;
    let mut worst_ratio = 0.0f64;
    for (distance, limit) in &outcomes {
        rec.measure("cone_distance", Some(delta), *distance, None, 1);
        if *distance >= limit + p.tolerance {
            violations += 1;
        }
        worst_ratio = worst_ratio.max(distance / limit);
    }
    rec.scalar("max_distance_over_limit", worst_ratio);
    rec.check_le("membership_violations", violations as f64, 0.0);
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct IncidenceParams {
    pub delta_exponent: u32,
    /// Cone thickness in units of `δ`.
    pub thickness: f64,
    /// Apexes sampled from the separated set.
    pub centres: usize,
    /// Direction whose projection collapses the set; `e_n` by default.
    pub collapsing_direction: Option<Vec<f64>>,
    /// Abort when the measured dimension along `y` exceeds this; `n − 2 + 0.1`
    /// by default.
    pub collapse_limit: Option<f64>,
    /// Smallest admissible angle between `y` and the cone's tangent planes.
    pub a: f64,
    pub window_width: u32,
    pub exponent_tolerance: f64,
    pub min_r2: f64,
}

impl Default for IncidenceParams {
    fn default() -> Self {
        IncidenceParams {
            delta_exponent: 8,
            thickness: 2.0,
            centres: 200,
            collapsing_direction: None,
            collapse_limit: None,
            a: 0.3,
            window_width: 6,
            exponent_tolerance: 0.25,
            min_r2: DEFAULT_MIN_R2,
        }
    }
}

impl IncidenceParams {
    pub(super) fn validate(&self, is: &mut Issues, n: usize) {
        is.require((5..=20).contains(&self.delta_exponent), "delta_exponent", "must lie in [5, 20]");
        is.positive("thickness", self.thickness);
        is.require(self.centres >= 1, "centres", "must be at least 1");
        if let Some(y) = &self.collapsing_direction {
            is.require(y.len() == n, "collapsing_direction", format!("needs {n} coordinates"));
            is.require(y.iter().any(|v| *v != 0.0), "collapsing_direction", "must be nonzero");
        }
        is.require(self.a >= 0.0 && self.a < std::f64::consts::FRAC_PI_2, "a", "must lie in [0, π/2)");
        is.require(self.window_width >= 3, "window_width", "must be at least 3");
        is.positive("exponent_tolerance", self.exponent_tolerance);
        is.unit("min_r2", self.min_r2);
    }
}

pub(super) fn run_count(p: &IncidenceParams, ctx: &Ctx, rec: &mut Recorder) -> Result<()> {
    let chart = &ctx.chart;
    let n = ctx.n();
    let (spec, set) = ctx.fractal()?;
    let y = p.collapsing_direction.clone().unwrap_or_else(|| {
        let mut e = vec![0.0; n];
        e[n - 1] = 1.0;
        e
    });

    // Hypothesis: the projection along y has dimension at most n − 2.
    let image = tangent_projection(&set.points, &y)?;
    let (lo, hi) = dimension_window(image.len(), set.cell_side, spec.similarity_dim().min((n - 1) as f64), p.window_width);
    let along = box_dimension(&image, lo, hi)?;
    let s = along.slope;
    let limit = p.collapse_limit.unwrap_or((n - 2) as f64 + 0.1);
    rec.scalar("collapsed_dim", s);
    rec.scalar("collapsed_r2", along.r2);
    if s > limit {
        return Err(invalid(
            "collapsing_direction",
            format!("measured dimension {s:.3} of the projection along y exceeds {limit}"),
        ));
    }

    // Transversality of y to the tangent planes of the cones.
    let y_len = norm(&y);
    let angle = grid::cell_centres(n - 2, 64)
        .iter()
        .map(|x| {
            let nu = chart.normal(x);
            (nu.iter().zip(&y).map(|(a, b)| a * b).sum::<f64>().abs() / y_len).min(1.0).asin()
        })
        .fold(f64::INFINITY, f64::min);
    rec.check_ge("transversality_angle", angle, p.a);

    let k = p.delta_exponent;
    let delta = delta_of(k);
    let ys = separated_subset(&set.points, delta)?;
    rec.scalar("separated_points", ys.len());
    let mut rng = rng::stream(ctx.seed_for("centres"), 0);
    let centres: Vec<usize> = (0..p.centres).map(|_| rng.random_range(0..ys.len())).collect();
    // Radii r = 2^{−j}, from 1/2 down to 8δ.
    let radii: Vec<f64> = (1..=k.saturating_sub(3)).map(|j| (-(j as f64)).exp2()).collect();
    let mut totals = vec![0.0f64; radii.len()];
    for &c in &centres {
        ctx.cancelled()?;
        let cone = Cone::new(chart.clone(), ys.point(c).to_vec())?;
        let hits = cone_incidences(&cone, &ys, p.thickness * delta);
        for (t, r) in totals.iter_mut().zip(&radii) {
            *t += hits.iter().filter(|&&h| h < 2.0 * r).count() as f64;
        }
    }
    let mut xs = Vec::new();
    let mut lys = Vec::new();
    for (t, r) in totals.iter().zip(&radii) {
        let mean = t / centres.len() as f64;
        rec.measure("mean_incidences", Some(*r), mean, None, centres.len() as u64);
        if mean > 0.0 {
            xs.push(r.log2());
            lys.push(mean.log2());
        }
    }
    if xs.len() < radii.len() {
        rec.note(format!("{} radii without incidences were left out of the fit", radii.len() - xs.len()));
    }
    rec.fit("ring_exponent", &xs, &lys, None, Some(s + p.exponent_tolerance), p.min_r2);
    Ok(())
}
