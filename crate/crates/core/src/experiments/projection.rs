//! Box dimension of projected images across the parameter family.

use serde::{Deserialize, Serialize};

use super::{quantile, Ctx, FractalSpec, Issues, Recorder, DEFAULT_MIN_R2};
use crate::error::{invalid, Result};
use crate::manifold::ManifoldChart;
use crate::rng;
use crate::sets::{box_dimension, default_window, BoxDimension, FractalSet, PointCloud};

/// Image `{f_z(x) : z ∈ points}` in `R^{n−1}`: the projection onto
/// `T_{Σ(x)}S^{n−1}` in the coordinates of the frame at `x`.
pub fn projected_image(chart: &ManifoldChart, x: &[f64], points: &PointCloud) -> Result<PointCloud> {
    let n = chart.n();
    if points.dim() != n {
        return Err(crate::error::Error::DimensionMismatch { dim: points.dim() });
    }
    let frame = chart.frame(x);
    let m = chart.param_dim();
    let mut axes: Vec<&[f64]> = (0..m).map(|i| frame.tangent(i)).collect();
    axes.push(frame.normal());
    Ok(linear_image(points, &axes))
}

/// Orthogonal projection onto `y^⊥` in an orthonormal basis of `y^⊥`.
pub fn tangent_projection(points: &PointCloud, y: &[f64]) -> Result<PointCloud> {
    let n = points.dim();
    if y.len() != n {
        return Err(crate::error::Error::DimensionMismatch { dim: y.len() });
    }
    let norm = y.iter().map(|v| v * v).sum::<f64>().sqrt();
    if !(norm > 0.0) {
        return Err(invalid("collapsing_direction", "must be a nonzero vector"));
    }
    // Gram–Schmidt on y followed by the standard basis.
    let mut basis: Vec<Vec<f64>> = vec![y.iter().map(|v| v / norm).collect()];
    for a in 0..n {
        let mut e = vec![0.0; n];
        e[a] = 1.0;
        for b in &basis {
            let t: f64 = e.iter().zip(b).map(|(p, q)| p * q).sum();
            e.iter_mut().zip(b).for_each(|(p, q)| *p -= t * q);
        }
        let len = e.iter().map(|v| v * v).sum::<f64>().sqrt();
        if len > 1e-6 && basis.len() < n {
            basis.push(e.into_iter().map(|v| v / len).collect());
        }
    }
    let axes: Vec<&[f64]> = basis[1..].iter().map(Vec::as_slice).collect();
    Ok(linear_image(points, &axes))
}

fn linear_image(points: &PointCloud, axes: &[&[f64]]) -> PointCloud {
    let coords = points
        .iter()
        .flat_map(|p| axes.iter().map(move |a| a.iter().zip(p).map(|(u, v)| u * v).sum::<f64>()))
        .collect();
    PointCloud::from_coords(axes.len(), coords)
}

/// Box-counting window `[k_max − width, k_max]` for an image of `count`
/// points of expected dimension `dim`, with `k_max` kept one scale above the
/// cell side of the construction.
pub fn dimension_window(count: usize, cell_side: f64, dim: f64, width: u32) -> (u32, u32) {
    let (_, k) = default_window(count, dim, width);
    let resolved = resolution_limit(cell_side);
    let k_max = k.min(resolved).max(width);
    (k_max - width, k_max)
}

fn resolution_limit(cell_side: f64) -> u32 {
    ((1.0 / cell_side).log2().floor() - 1.0).max(0.0) as u32
}

fn window_for(set: &FractalSet, dim: f64, width: u32, explicit: Option<[u32; 2]>) -> Result<(u32, u32)> {
    match explicit {
        Some([lo, hi]) => {
            let limit = resolution_limit(set.cell_side);
            if hi > limit {
                return Err(invalid(
                    "k_window",
                    format!("scale 2^-{hi} is finer than the fractal resolves (level {} allows k <= {limit})", set.level),
                ));
            }
            Ok((lo, hi))
        }
        None => Ok(dimension_window(set.len(), set.cell_side, dim, width)),
    }
}

fn validate_window(is: &mut Issues, width: u32, window: Option<[u32; 2]>) {
    is.require(width >= 3, "window_width", "must be at least 3");
    if let Some([lo, hi]) = window {
        is.require(hi >= lo + 3 && hi <= 40, "k_window", format!("need k_min + 3 <= k_max <= 40, got [{lo}, {hi}]"));
    }
}

fn estimate(chart: &ManifoldChart, x: &[f64], set: &FractalSet, window: (u32, u32)) -> Result<BoxDimension> {
    box_dimension(&projected_image(chart, x, &set.points)?, window.0, window.1)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ProjectDimParams {
    pub x_samples: usize,
    pub window_width: u32,
    /// Explicit box-counting window; derived from the point count otherwise.
    pub k_window: Option<[u32; 2]>,
    /// Dimension every projection should have; `min(dim Z, n − 1)` by default.
    pub expected_dim: Option<f64>,
    pub tolerance: f64,
    /// Fraction of sampled parameters that must land within `tolerance`.
    pub quantile: f64,
    /// Thresholds `s` whose exceptional fractions `{x : dim < s}` are reported.
    pub thresholds: Vec<f64>,
    /// Direction `y` whose projection should collapse; enables the preflight.
    pub collapsing_direction: Option<Vec<f64>>,
    /// Largest admissible measured dimension along `y`; `n − 2 + 0.05` by default.
    pub collapse_limit: Option<f64>,
}

impl Default for ProjectDimParams {
    fn default() -> Self {
        ProjectDimParams {
            x_samples: 200,
            window_width: 6,
            k_window: None,
            expected_dim: None,
            tolerance: 0.1,
            quantile: 0.95,
            thresholds: vec![0.3, 0.5],
            collapsing_direction: None,
            collapse_limit: None,
        }
    }
}

impl ProjectDimParams {
    pub(super) fn validate(&self, is: &mut Issues, n: usize, fractal: Option<&FractalSpec>) {
        is.require(self.x_samples >= 1, "x_samples", "must be at least 1");
        validate_window(is, self.window_width, self.k_window);
        is.positive("tolerance", self.tolerance);
        is.unit("quantile", self.quantile);
        is.require(self.thresholds.iter().all(|s| *s > 0.0), "thresholds", "entries must be positive");
        if let Some(y) = &self.collapsing_direction {
            is.require(y.len() == n, "collapsing_direction", format!("needs {n} coordinates"));
            is.require(y.iter().any(|v| *v != 0.0), "collapsing_direction", "must be nonzero");
        }
        if let Some(f) = fractal {
            let dim = f.similarity_dim();
            let m = (n - 2) as f64;
            if self.collapsing_direction.is_none() {
                is.require(dim <= m + 1e-12, "fractal", format!("dimension {dim:.3} exceeds n - 2 = {m} without a collapsing direction"));
            } else {
                is.require(dim > m, "fractal", format!("the collapsing protocol needs dimension above n - 2 = {m}, got {dim:.3}"));
            }
        }
    }
}

fn sample_parameters(ctx: &Ctx, count: usize) -> Vec<Vec<f64>> {
    let mut rng = rng::stream(ctx.seed_for("parameters"), 0);
    (0..count).map(|_| rng::unit_cube(&mut rng, ctx.chart.param_dim())).collect()
}

pub(super) fn run_project(p: &ProjectDimParams, ctx: &Ctx, rec: &mut Recorder) -> Result<()> {
    let n = ctx.n();
    let (spec, set) = ctx.fractal()?;
    let dim_z = spec.similarity_dim();
    let expected = p.expected_dim.unwrap_or(dim_z.min((n - 1) as f64));
    rec.scalar("similarity_dim", dim_z);
    rec.scalar("expected_dim", expected);
    rec.scalar("points", set.len());

    if let Some(y) = &p.collapsing_direction {
        let image = tangent_projection(&set.points, y)?;
        let (lo, hi) = dimension_window(image.len(), set.cell_side, dim_z.min((n - 1) as f64), p.window_width);
        let along = box_dimension(&image, lo, hi)?;
        let limit = p.collapse_limit.unwrap_or((n - 2) as f64 + 0.05);
        rec.scalar("collapsed_r2", along.r2);
        rec.check_le("collapsed_dim", along.slope, limit);
    }

    let window = window_for(&set, expected, p.window_width, p.k_window)?;
    rec.scalar("k_window", [window.0, window.1]);
    let mut dims = Vec::with_capacity(p.x_samples);
    let mut low_r2 = 0usize;
    for x in sample_parameters(ctx, p.x_samples) {
        ctx.cancelled()?;
        let est = estimate(&ctx.chart, &x, &set, window)?;
        if est.r2 < DEFAULT_MIN_R2 {
            low_r2 += 1;
        }
        rec.measure("projected_dim", None, est.slope, Some(est.slope_ci95 / 1.96), set.len() as u64);
        dims.push(est.slope);
    }
    let inside = dims.iter().filter(|d| (*d - expected).abs() <= p.tolerance).count();
    let fraction = inside as f64 / dims.len() as f64;
    rec.check_ge("fraction_within_tolerance", fraction, p.quantile);
    rec.scalar("low_r2_estimates", low_r2);
    let mut sorted = dims.clone();
    sorted.sort_by(f64::total_cmp);
    rec.scalar("dim_min", sorted[0]);
    rec.scalar("dim_median", quantile(&sorted, 0.5));
    rec.scalar("dim_max", sorted[sorted.len() - 1]);
    for s in &p.thresholds {
        let below = dims.iter().filter(|d| **d < *s).count();
        rec.measure("exceptional_fraction", None, below as f64 / dims.len() as f64, None, dims.len() as u64);
        rec.scalar(format!("exceptional_fraction_{s}"), below as f64 / dims.len() as f64);
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExceptionalParams {
    pub thresholds: Vec<f64>,
    /// Parameter cells per axis; a power of two.
    pub x_resolution: usize,
    pub window_width: u32,
    pub k_window: Option<[u32; 2]>,
    /// Allowed excess of the marked-set slope over `s`.
    pub slack: f64,
    pub min_r2: f64,
}

impl Default for ExceptionalParams {
    fn default() -> Self {
        ExceptionalParams { thresholds: vec![0.3, 0.5], x_resolution: 128, window_width: 6, k_window: None, slack: 0.2, min_r2: DEFAULT_MIN_R2 }
    }
}

impl ExceptionalParams {
    pub(super) fn validate(&self, is: &mut Issues, n: usize, fractal: Option<&FractalSpec>) {
        is.require(!self.thresholds.is_empty(), "thresholds", "needs at least one entry");
        if let Some(f) = fractal {
            let dim = f.similarity_dim();
            is.require(
                self.thresholds.iter().all(|s| *s > 0.0 && *s < dim),
                "thresholds",
                format!("entries must lie in (0, {dim:.3})"),
            );
        }
        is.require(
            self.x_resolution >= 4 && self.x_resolution.is_power_of_two(),
            "x_resolution",
            "must be a power of two, at least 4",
        );
        let cells = (self.x_resolution as f64).powi((n - 2) as i32);
        is.require(cells <= 65536.0, "x_resolution", format!("{cells} parameter cells exceed 65536"));
        validate_window(is, self.window_width, self.k_window);
        is.positive("slack", self.slack);
        is.unit("min_r2", self.min_r2);
    }
}

/// Cell indices of a grid of `res^m` parameter cells, in row-major order.
fn cell_index(mut i: usize, res: usize, m: usize) -> Vec<usize> {
    (0..m)
        .map(|_| {
            let c = i % res;
            i /= res;
            c
        })
        .collect()
}

pub(super) fn run_exceptional(p: &ExceptionalParams, ctx: &Ctx, rec: &mut Recorder) -> Result<()> {
    let n = ctx.n();
    let m = n - 2;
    let (spec, set) = ctx.fractal()?;
    let dim_z = spec.similarity_dim();
    let expected = dim_z.min((n - 1) as f64);
    let window = window_for(&set, expected, p.window_width, p.k_window)?;
    rec.scalar("similarity_dim", dim_z);
    rec.scalar("k_window", [window.0, window.1]);
    let res = p.x_resolution;
    let total = res.pow(m as u32);
    let mut dims = Vec::with_capacity(total);
    for i in 0..total {
        ctx.cancelled()?;
        let x: Vec<f64> = cell_index(i, res, m).into_iter().map(|c| (c as f64 + 0.5) / res as f64).collect();
        let est = estimate(&ctx.chart, &x, &set, window)?;
        rec.measure("cell_dim", None, est.slope, Some(est.slope_ci95 / 1.96), set.len() as u64);
        dims.push(est.slope);
    }
    let levels = res.trailing_zeros();
    for &s in &p.thresholds {
        let marked: Vec<usize> = (0..total).filter(|&i| dims[i] < s).collect();
        let tag = format!("{s}");
        rec.scalar(format!("marked_cells_{tag}"), marked.len());
        let bound = s + p.slack;
        if marked.is_empty() {
            rec.check_le(format!("marked_slope_{tag}"), 0.0, bound);
            continue;
        }
        // Dyadic profile of the marked set over parameter scales 2^-1..2^-levels.
        let mut xs = Vec::new();
        let mut ys = Vec::new();
        for j in 1..=levels {
            let shift = levels - j;
            let mut cells: Vec<Vec<usize>> =
                marked.iter().map(|&i| cell_index(i, res, m).into_iter().map(|c| c >> shift).collect()).collect();
            cells.sort_unstable();
            cells.dedup();
            rec.measure(format!("marked_count_{tag}"), Some((-(j as f64)).exp2()), cells.len() as f64, None, marked.len() as u64);
            xs.push(j as f64);
            ys.push((cells.len() as f64).log2());
        }
        if ys.iter().all(|y| *y == ys[0]) {
            rec.check_le(format!("marked_slope_{tag}"), 0.0, bound);
            continue;
        }
        let slope = rec.fit(&format!("marked_slope_{tag}"), &xs, &ys, None, Some(bound), p.min_r2).map(|f| f.slope);
        if n == 3 {
            if let Some(slope) = slope {
                rec.check_le(format!("weaker_bound_{tag}"), slope, s + 1.0 - dim_z);
            }
        }
    }
    Ok(())
}
