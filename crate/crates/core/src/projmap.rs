//! The maps `f_z(x) = (e_1(x)·z, …, e_m(x)·z, ν(x)·z)` and their geometry.
//!
//! `f_z` is linear in `z`, so every difference `f_z − f_{z'}` is itself the
//! map of `z − z'`. A [`FrameTable`] caches the frame and its first two
//! derivatives on a grid once; norms of any `h = f_d` are then a matrix
//! product per grid point.

use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;

use nalgebra::DMatrix;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::manifold::{dist, ManifoldChart};
use crate::stats::unit_ball_volume;
use crate::{grid, rng};

#[derive(Clone, Debug)]
pub struct CinematicMap {
    chart: Arc<ManifoldChart>,
    z: Vec<f64>,
}

impl CinematicMap {
    pub fn new(chart: Arc<ManifoldChart>, z: Vec<f64>) -> Result<CinematicMap> {
        if z.len() != chart.n() {
            return Err(Error::DimensionMismatch { dim: chart.n() });
        }
        Ok(CinematicMap { chart, z })
    }

    pub fn chart(&self) -> &Arc<ManifoldChart> {
        &self.chart
    }

    pub fn z(&self) -> &[f64] {
        &self.z
    }

    /// `f_z(x) ∈ R^{n−1}`.
    pub fn eval(&self, x: &[f64]) -> Vec<f64> {
        eval_direction(&self.chart, &self.z, x)
    }

    /// `∇f_z(x)`, an `(n−1) × (n−2)` matrix.
    pub fn gradient(&self, x: &[f64]) -> DMatrix<f64> {
        let m = self.chart.param_dim();
        let jets = self.chart.frame_jets(x, 1);
        DMatrix::from_fn(m + 1, m, |c, j| {
            let comp = if c < m { &jets.tangents[c] } else { &jets.normal };
            comp.iter().zip(&self.z).map(|(e, z)| e.partial(&[j]) * z).sum()
        })
    }

    /// Hessians of the components of `f_z` at `x`, one `m × m` matrix each.
    pub fn hessian(&self, x: &[f64]) -> Vec<DMatrix<f64>> {
        let m = self.chart.param_dim();
        let jets = self.chart.frame_jets(x, 2);
        (0..=m)
            .map(|c| {
                let comp = if c < m { &jets.tangents[c] } else { &jets.normal };
                DMatrix::from_fn(m, m, |i, j| comp.iter().zip(&self.z).map(|(e, z)| e.partial(&[i, j]) * z).sum())
            })
            .collect()
    }

    /// `f − g`, which is the map of `z_f − z_g`.
    pub fn difference(&self, other: &CinematicMap) -> CinematicMap {
        let z = self.z.iter().zip(&other.z).map(|(a, b)| a - b).collect();
        CinematicMap { chart: self.chart.clone(), z }
    }
}

/// `f_d(x)` for a direction `d` without building a map.
pub fn eval_direction(chart: &ManifoldChart, d: &[f64], x: &[f64]) -> Vec<f64> {
    let frame = chart.frame(x);
    let m = chart.param_dim();
    let mut out = Vec::with_capacity(m + 1);
    for i in 0..m {
        out.push(dot(frame.tangent(i), d));
    }
    out.push(dot(frame.normal(), d));
    out
}

pub fn eval_map(map: &CinematicMap, x: &[f64]) -> Vec<f64> {
    map.eval(x)
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Frame values, gradients and Hessians on the cell centres of a `g^m` grid.
pub struct FrameTable {
    n: usize,
    m: usize,
    g: usize,
    /// Derivative multi-indices: `[]`, `[j]`, then `[i, j]` with `i <= j`.
    orders: Vec<Vec<usize>>,
    /// Per point, `(m + 1) · orders.len()` rows of `n` coefficients.
    data: Vec<f64>,
}

/// Pointwise derivative sizes of some `h = f_d`.
#[derive(Clone, Copy, Debug, Default)]
pub struct PointDerivs {
    pub value: f64,
    pub grad_norm: f64,
    /// Smallest singular value of `∇h`, i.e. `min_{|ξ|=1} |∇_ξ h|`.
    pub grad_min: f64,
    pub hess_norm: f64,
}

impl FrameTable {
    pub fn new(chart: &ManifoldChart, g: usize) -> FrameTable {
        let n = chart.n();
        let m = chart.param_dim();
        let mut orders = vec![vec![]];
        orders.extend((0..m).map(|j| vec![j]));
        for i in 0..m {
            for j in i..m {
                orders.push(vec![i, j]);
            }
        }
        let points = grid::cell_centres(m, g);
        let per_point: Vec<Vec<f64>> = points
            .par_iter()
            .map(|x| {
                let jets = chart.frame_jets(x, 2);
                let mut rows = Vec::with_capacity((m + 1) * orders.len() * n);
                for c in 0..=m {
                    let comp = if c < m { &jets.tangents[c] } else { &jets.normal };
                    for o in &orders {
                        rows.extend(comp.iter().map(|e| e.partial(o)));
                    }
                }
                rows
            })
            .collect();
        FrameTable { n, m, g, orders, data: per_point.concat() }
    }

    pub fn len(&self) -> usize {
        self.g.pow(self.m as u32)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn grid(&self) -> usize {
        self.g
    }

    pub fn point(&self, index: usize) -> Vec<f64> {
        let mut idx = index;
        let mut p = vec![0.0; self.m];
        for axis in (0..self.m).rev() {
            p[axis] = ((idx % self.g) as f64 + 0.5) / self.g as f64;
            idx /= self.g;
        }
        p
    }

    /// Distance from any parameter point to the nearest grid point.
    pub fn covering_radius(&self) -> f64 {
        (self.m as f64).sqrt() / (2.0 * self.g as f64)
    }

    fn rows_per_point(&self) -> usize {
        (self.m + 1) * self.orders.len()
    }

    /// All derivatives of `h = f_d` at grid point `p`, in table row order.
    fn apply(&self, p: usize, d: &[f64], out: &mut Vec<f64>) {
        let rows = self.rows_per_point();
        let base = p * rows * self.n;
        out.clear();
        out.extend((0..rows).map(|r| dot(&self.data[base + r * self.n..base + (r + 1) * self.n], d)));
    }

    pub fn derivs(&self, p: usize, d: &[f64]) -> PointDerivs {
        let mut v = Vec::new();
        self.apply(p, d, &mut v);
        self.summarise(&v)
    }

    fn summarise(&self, v: &[f64]) -> PointDerivs {
        let m = self.m;
        let no = self.orders.len();
        let at = |c: usize, o: usize| v[c * no + o];
        let value = (0..=m).map(|c| at(c, 0).powi(2)).sum::<f64>().sqrt();
        if m == 1 {
            let grad = (0..=m).map(|c| at(c, 1).powi(2)).sum::<f64>().sqrt();
            let hess = (0..=m).map(|c| at(c, 2).powi(2)).sum::<f64>().sqrt();
            return PointDerivs { value, grad_norm: grad, grad_min: grad, hess_norm: hess };
        }
        let grad = DMatrix::from_fn(m + 1, m, |c, j| at(c, 1 + j));
        let sv = grad.singular_values();
        let mut flat = DMatrix::zeros((m + 1) * m, m);
        let mut o = 1 + m;
        for i in 0..m {
            for j in i..m {
                for c in 0..=m {
                    flat[(c * m + i, j)] = at(c, o);
                    flat[(c * m + j, i)] = at(c, o);
                }
                o += 1;
            }
        }
        PointDerivs { value, grad_norm: sv.max(), grad_min: sv.min(), hess_norm: flat.singular_values().max() }
    }

    /// Sampled sup-norms of `h = f_d` and their slack.
    pub fn c2_norm(&self, d: &[f64]) -> C2Norm {
        let derivs: Vec<PointDerivs> = (0..self.len()).map(|p| self.derivs(p, d)).collect();
        self.c2_from(&derivs)
    }

    fn c2_from(&self, derivs: &[PointDerivs]) -> C2Norm {
        let mut c0 = 0.0f64;
        let mut c1 = 0.0f64;
        let mut c2 = 0.0f64;
        let mut jump = [0.0f64; 3];
        for (p, dp) in derivs.iter().enumerate() {
            c0 = c0.max(dp.value);
            c1 = c1.max(dp.grad_norm);
            c2 = c2.max(dp.hess_norm);
            for axis in 0..self.m {
                if let Some(q) = grid::forward_neighbour(p, axis, self.m, self.g) {
                    let dq = &derivs[q];
                    jump[0] = jump[0].max((dp.value - dq.value).abs());
                    jump[1] = jump[1].max((dp.grad_norm - dq.grad_norm).abs());
                    jump[2] = jump[2].max((dp.hess_norm - dq.hess_norm).abs());
                }
            }
        }
        // A grid step moves at most one spacing; the covering radius is
        // √m/2 spacings.
        let reach = (self.m as f64).sqrt() / 2.0;
        let slack = [jump[0] * reach, jump[1] * reach, jump[2] * reach];
        C2Norm { value: c0.max(c1).max(c2), c0, c1, c2, slack }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct C2Norm {
    /// `max(c0, c1, c2)`.
    pub value: f64,
    pub c0: f64,
    pub c1: f64,
    pub c2: f64,
    /// Lipschitz slack for each of the three sampled suprema.
    pub slack: [f64; 3],
}

impl C2Norm {
    pub fn c1_value(&self) -> f64 {
        self.c0.max(self.c1)
    }

    /// Upper bound of the true norm: samples plus slack.
    pub fn upper(&self) -> f64 {
        (self.c0 + self.slack[0]).max(self.c1 + self.slack[1]).max(self.c2 + self.slack[2])
    }
}

/// Sampled `‖f − g‖_{C²}` on a `grid^m` lattice of cell centres.
pub fn c2_distance(f: &CinematicMap, g: &CinematicMap, grid: usize) -> f64 {
    c2_norm(f, g, grid).value
}

pub fn c2_norm(f: &CinematicMap, g: &CinematicMap, grid: usize) -> C2Norm {
    let table = FrameTable::new(&f.chart, grid);
    table.c2_norm(&f.difference(g).z)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CinematicSample {
    /// Certified lower bound of `inf (|h| + |∇_ξ h|) / ‖h‖_{C²}`.
    pub ratio: f64,
    /// The same ratio from the samples alone.
    pub sampled_ratio: f64,
    pub sampled_min: f64,
    pub margin: f64,
    pub norm: C2Norm,
}

/// `inf_{x, |ξ|=1} (|h(x)| + |∇_ξ h(x)|) / ‖h‖_{C²}` for `h = f − g`.
///
/// The infimum over `ξ` is the smallest singular value of `∇h`, computed
/// exactly. The infimum over `x` is sampled on the table's grid and lowered by
/// `(sup|∇h| + sup‖∇²h‖) ·` covering radius, which bounds how much the
/// objective can drop between grid points.
pub fn cinematic_infimum(table: &FrameTable, d: &[f64]) -> Result<CinematicSample> {
    if norm(d) == 0.0 {
        return Err(invalid("z", "the two maps coincide"));
    }
    let derivs: Vec<PointDerivs> = (0..table.len()).map(|p| table.derivs(p, d)).collect();
    let c2 = table.c2_from(&derivs);
    let sampled_min = derivs.iter().map(|p| p.value + p.grad_min).fold(f64::INFINITY, f64::min);
    let lip = (c2.c1 + c2.slack[1]) + (c2.c2 + c2.slack[2]);
    let margin = lip * table.covering_radius();
    let upper = c2.upper();
    Ok(CinematicSample {
        ratio: (sampled_min - margin).max(0.0) / upper,
        sampled_ratio: sampled_min / c2.value,
        sampled_min,
        margin,
        norm: c2,
    })
}

/// Convenience wrapper building a fresh table of `x_grid^m` points.
pub fn cinematic_infimum_maps(f: &CinematicMap, g: &CinematicMap, x_grid: usize) -> Result<CinematicSample> {
    let table = FrameTable::new(&f.chart, x_grid);
    cinematic_infimum(&table, &f.difference(g).z)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CinematicReport {
    /// Reciprocal of the smallest certified cinematic ratio.
    pub k_est: f64,
    /// Largest sampled `‖f − g‖_{C²}`: a lower estimate of the diameter of
    /// the family in `C²`.
    pub k_ball: f64,
    pub d_est: f64,
    /// `‖f_y − f_z‖_{C¹} / |y − z|` range.
    pub bilipschitz_lo: f64,
    pub bilipschitz_hi: f64,
    /// `‖f_y − f_z‖_{C²} / |y − z|` range.
    pub c2_lo: f64,
    pub c2_hi: f64,
    pub min_ratio: f64,
    pub min_sampled_ratio: f64,
    pub samples: usize,
    pub x_grid: usize,
}

/// Cinematic and bilipschitz constants over the given `(z, z')` pairs.
pub fn cinematic_report(
    chart: &ManifoldChart,
    pairs: &[(Vec<f64>, Vec<f64>)],
    x_grid: usize,
    cancel: Option<&AtomicBool>,
) -> Result<CinematicReport> {
    let table = FrameTable::new(chart, x_grid);
    let samples: Result<Vec<(CinematicSample, f64)>> = pairs
        .par_iter()
        .map(|(a, b)| {
            if cancel.is_some_and(|c| c.load(Ordering::Relaxed)) {
                return Err(Error::Cancelled);
            }
            let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
            Ok((cinematic_infimum(&table, &d)?, norm(&d)))
        })
        .collect();
    let samples = samples?;
    let fold = |f: &dyn Fn(&(CinematicSample, f64)) -> f64| {
        samples.iter().map(f).fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)))
    };
    let (min_ratio, _) = fold(&|s| s.0.ratio);
    let (min_sampled_ratio, _) = fold(&|s| s.0.sampled_ratio);
    let (bl, bh) = fold(&|s| s.0.norm.c1_value() / s.1);
    let (cl, ch) = fold(&|s| s.0.norm.value / s.1);
    let (_, k_ball) = fold(&|s| s.0.norm.value);
    let points: Vec<Vec<f64>> = pairs.iter().take(100).flat_map(|(a, b)| [a.clone(), b.clone()]).collect();
    Ok(CinematicReport {
        k_est: 1.0 / min_ratio,
        k_ball,
        d_est: doubling_estimate(&table, &points),
        bilipschitz_lo: bl,
        bilipschitz_hi: bh,
        c2_lo: cl,
        c2_hi: ch,
        min_ratio,
        min_sampled_ratio,
        samples: samples.len(),
        x_grid,
    })
}

/// Largest number of `r`-separated maps inside a `2r`-ball of the family,
/// over the sample and radii `r ∈ {1/4, 1/2, 1} · median distance`, in the
/// `C¹` metric.
fn doubling_estimate(table: &FrameTable, points: &[Vec<f64>]) -> f64 {
    let k = points.len();
    if k < 2 {
        return 1.0;
    }
    let dists: Vec<Vec<f64>> = (0..k)
        .into_par_iter()
        .map(|i| {
            (0..k)
                .map(|j| {
                    if i == j {
                        0.0
                    } else {
                        let d: Vec<f64> = points[i].iter().zip(&points[j]).map(|(a, b)| a - b).collect();
                        table.c2_norm(&d).c1_value()
                    }
                })
                .collect()
        })
        .collect();
    let mut all: Vec<f64> = dists.iter().flat_map(|r| r.iter().copied()).filter(|v| *v > 0.0).collect();
    all.sort_by(f64::total_cmp);
    let median = all[all.len() / 2];
    let mut best = 1usize;
    for scale in [0.25, 0.5, 1.0] {
        let r = scale * median;
        for row in &dists {
            let inside: Vec<usize> = (0..k).filter(|&j| row[j] < 2.0 * r).collect();
            let mut chosen: Vec<usize> = Vec::new();
            for &j in &inside {
                if chosen.iter().all(|&c| dists[c][j] >= r) {
                    chosen.push(j);
                }
            }
            best = best.max(chosen.len());
        }
    }
    best as f64
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VolumeEstimate {
    pub value: f64,
    pub stderr: f64,
    pub hits: u64,
    pub samples: u64,
    /// Measure of the parameter region that was sampled.
    pub region: f64,
    pub warning: Option<String>,
}

const MIN_HITS: u64 = 100;
const CHUNK: u64 = 4096;

/// Monte Carlo volume of the vertical neighbourhood
/// `{(x, y) : x ∈ [0,1]^m, |y − f(x)| < δ}`, sampling `y` in the cube of side
/// `2δ` around `f(x)`.
pub fn vertical_neighborhood_volume(f: &CinematicMap, delta: f64, samples: u64, seed: u64) -> Result<VolumeEstimate> {
    check_delta(delta)?;
    let m = f.chart.param_dim();
    let k = m + 1;
    let chunks = samples.div_ceil(CHUNK);
    let hits: u64 = (0..chunks)
        .into_par_iter()
        .map(|c| {
            let mut rng = rng::stream(seed, c);
            let count = CHUNK.min(samples - c * CHUNK);
            let mut hits = 0;
            for _ in 0..count {
                let x = rng::unit_cube(&mut rng, m);
                let centre = f.eval(&x);
                let y: Vec<f64> = centre.iter().map(|v| v + delta * (2.0 * rng.random::<f64>() - 1.0)).collect();
                if dist(&y, &centre) < delta {
                    hits += 1;
                }
            }
            hits
        })
        .sum();
    let slab = (2.0 * delta).powi(k as i32);
    Ok(finish_estimate(slab, 1.0, hits, samples))
}

fn check_delta(delta: f64) -> Result<()> {
    if !(delta > 0.0 && delta <= 0.5) {
        return Err(invalid("delta", format!("must lie in (0, 1/2], got {delta}")));
    }
    Ok(())
}

fn finish_estimate(slab: f64, region: f64, hits: u64, samples: u64) -> VolumeEstimate {
    let p = hits as f64 / samples.max(1) as f64;
    let scale = slab * region;
    let warning = (hits < MIN_HITS).then(|| {
        let msg = format!("only {hits} hits in {samples} samples; estimate unreliable");
        log::warn!("{msg}");
        msg
    });
    VolumeEstimate {
        value: scale * p,
        stderr: scale * (p * (1.0 - p) / samples.max(1) as f64).sqrt(),
        hits,
        samples,
        region,
        warning,
    }
}

/// A dyadic cell `lo + [0, width]^m` of the parameter cube.
#[derive(Clone, Debug, PartialEq)]
pub struct Cell {
    pub lo: Vec<f64>,
    pub width: f64,
}

impl Cell {
    fn centre(&self) -> Vec<f64> {
        self.lo.iter().map(|v| v + 0.5 * self.width).collect()
    }

    fn children(&self) -> Vec<Cell> {
        let m = self.lo.len();
        let half = 0.5 * self.width;
        (0..1usize << m)
            .map(|mask| Cell {
                lo: self.lo.iter().enumerate().map(|(i, v)| v + if mask >> i & 1 == 1 { half } else { 0.0 }).collect(),
                width: half,
            })
            .collect()
    }
}

/// Dyadic cells covering `{x : |h(x)| < reach}` for `h = f_d`.
///
/// A cell is discarded when `|h(c)| − ‖∇h(c)‖ρ − ½Hρ² ≥ reach`, with `ρ` the
/// cell's half-diagonal and `H` an upper bound for `‖∇²h‖`; this never loses
/// part of the set. Cells are split until `h` varies by at most `resolution`
/// across them, or until they are no wider than `min_width`.
pub fn sublevel_cells(
    chart: &ManifoldChart,
    d: &[f64],
    hess_bound: f64,
    reach: f64,
    resolution: f64,
    min_width: f64,
) -> Vec<Cell> {
    let m = chart.param_dim();
    let map = CinematicMap { chart: Arc::new(chart.clone()), z: d.to_vec() };
    let mut frontier = vec![Cell { lo: vec![0.0; m], width: 1.0 }];
    let mut kept = Vec::new();
    while !frontier.is_empty() {
        let next: Vec<(Vec<Cell>, Option<Cell>)> = frontier
            .par_iter()
            .map(|cell| {
                let c = cell.centre();
                let rho = cell.width * (m as f64).sqrt() / 2.0;
                let value = norm(&map.eval(&c));
                let grad = map.gradient(&c);
                let gnorm = if m == 1 { grad.norm() } else { grad.singular_values().max() };
                if value - gnorm * rho - 0.5 * hess_bound * rho * rho >= reach {
                    return (vec![], None);
                }
                let resolved = rho * (gnorm + hess_bound * rho) <= resolution;
                if resolved || cell.width <= min_width {
                    (vec![], Some(cell.clone()))
                } else {
                    (cell.children(), None)
                }
            })
            .collect();
        frontier = Vec::new();
        for (children, keep) in next {
            frontier.extend(children);
            kept.extend(keep);
        }
    }
    kept.sort_by(|a, b| a.lo.partial_cmp(&b.lo).unwrap_or(std::cmp::Ordering::Equal));
    kept
}

/// Grid used to bound `‖∇²h‖` before region searches.
fn hessian_table(chart: &ManifoldChart) -> FrameTable {
    let g = match chart.param_dim() {
        1 => 512,
        2 => 48,
        3 => 12,
        _ => 6,
    };
    FrameTable::new(chart, g)
}

/// Safety factor applied to the sampled Hessian bound.
const HESS_SAFETY: f64 = 1.25;

/// Monte Carlo volume of `f^δ ∩ g^δ`.
///
/// `x` is drawn uniformly from the cells that can meet `{|f − g| < 2δ}`
/// (elsewhere the two fibre balls are disjoint), `y` uniformly from the
/// `δ`-ball around `f(x)`, and a sample hits when `|y − g(x)| < δ`.
pub fn pair_intersection_volume(
    f: &CinematicMap,
    g: &CinematicMap,
    delta: f64,
    samples: u64,
    seed: u64,
) -> Result<VolumeEstimate> {
    let table = hessian_table(&f.chart);
    pair_intersection_volume_with(&table, f, g, delta, samples, seed)
}

/// As [`pair_intersection_volume`], reusing a precomputed table for the
/// Hessian bound.
pub fn pair_intersection_volume_with(
    table: &FrameTable,
    f: &CinematicMap,
    g: &CinematicMap,
    delta: f64,
    samples: u64,
    seed: u64,
) -> Result<VolumeEstimate> {
    check_delta(delta)?;
    let chart = &f.chart;
    let m = chart.param_dim();
    let k = m + 1;
    let d = f.difference(g).z;
    let norm_h = table.c2_norm(&d);
    let hess_bound = HESS_SAFETY * (norm_h.c2 + norm_h.slack[2]);
    let cells = sublevel_cells(chart, &d, hess_bound, 2.0 * delta, delta, delta * 1e-3);
    let region: f64 = cells.iter().map(|c| c.width.powi(m as i32)).sum();
    if cells.is_empty() {
        return Ok(VolumeEstimate { value: 0.0, stderr: 0.0, hits: 0, samples: 0, region: 0.0, warning: None });
    }
    let mut cumulative = Vec::with_capacity(cells.len());
    let mut acc = 0.0;
    for c in &cells {
        acc += c.width.powi(m as i32);
        cumulative.push(acc);
    }
    let chunks = samples.div_ceil(CHUNK);
    let hits: u64 = (0..chunks)
        .into_par_iter()
        .map(|c| {
            let mut rng = rng::stream(seed, c);
            let count = CHUNK.min(samples - c * CHUNK);
            let mut hits = 0;
            for _ in 0..count {
                let t = rng.random::<f64>() * acc;
                let idx = cumulative.partition_point(|v| *v < t).min(cells.len() - 1);
                let cell = &cells[idx];
                let x: Vec<f64> = cell.lo.iter().map(|v| v + cell.width * rng.random::<f64>()).collect();
                let ball = rng::unit_ball(&mut rng, k);
                // y − g(x) = h(x) + δ·b with h = f − g.
                let h = eval_direction(chart, &d, &x);
                let offset: Vec<f64> = h.iter().zip(&ball).map(|(a, b)| a + delta * b).collect();
                if norm(&offset) < delta {
                    hits += 1;
                }
            }
            hits
        })
        .sum();
    let fibre = unit_ball_volume(k) * delta.powi(k as i32);
    Ok(finish_estimate(fibre, region, hits, samples))
}

/// Volume of the intersection of two balls of radius `r` in `R^k` whose
/// centres are `s` apart.
pub fn lens_volume(k: usize, r: f64, s: f64) -> f64 {
    if s >= 2.0 * r {
        return 0.0;
    }
    // Two caps of height r − s/2, each V_{k−1} ∫_{s/2}^{r} (r² − t²)^{(k−1)/2} dt.
    // Substituting t = r − (r − s/2) w² removes the endpoint singularity.
    let a = s / 2.0;
    let span = r - a;
    let integrand = |w: f64| {
        let t = r - span * w * w;
        (span * w * w * (r + t)).powf((k as f64 - 1.0) / 2.0) * 2.0 * span * w
    };
    let steps = 2000;
    let hstep = 1.0 / steps as f64;
    let mut sum = integrand(0.0) + integrand(1.0);
    for i in 1..steps {
        sum += integrand(i as f64 * hstep) * if i % 2 == 1 { 4.0 } else { 2.0 };
    }
    2.0 * unit_ball_volume(k - 1) * sum * hstep / 3.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PieceDiameter {
    pub lo: Vec<f64>,
    pub width: f64,
    pub diameter: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum IntersectionDiameter {
    Empty,
    Measured {
        pieces: Vec<PieceDiameter>,
        max_diameter: f64,
        /// `32 K² δ / d`.
        bound: f64,
        /// `d ≤ 4Kδ`: the bound says nothing and the whole piece may be hit.
        vacuous: bool,
        d: f64,
    },
}

/// Diameter of the base projection `{x : |f(x) − g(x)| < 2δ}` of
/// `f^δ ∩ g^δ` on each dyadic piece of diameter below `1/(4K²)`.
pub fn projected_intersection_diameter(
    f: &CinematicMap,
    g: &CinematicMap,
    delta: f64,
    k_const: f64,
) -> Result<IntersectionDiameter> {
    check_delta(delta)?;
    let chart = &f.chart;
    let m = chart.param_dim();
    let d = f.difference(g).z;
    let table = hessian_table(chart);
    let norm_h = table.c2_norm(&d);
    let hess_bound = HESS_SAFETY * (norm_h.c2 + norm_h.slack[2]);
    let target = 1.0 / (4.0 * k_const * k_const);
    let mut level = 0u32;
    while (m as f64).sqrt() * 0.5f64.powi(level as i32) >= target {
        level += 1;
    }
    let piece_width = 0.5f64.powi(level as i32);
    let cells = sublevel_cells(chart, &d, hess_bound, 2.0 * delta, delta / 8.0, delta * 1e-4);
    let mut members: std::collections::BTreeMap<Vec<i64>, Vec<Vec<f64>>> = Default::default();
    let mut finest = f64::INFINITY;
    for cell in cells {
        // Split oversized cells so none straddles a piece boundary.
        let mut queue = vec![cell];
        while let Some(c) = queue.pop() {
            if c.width > piece_width {
                queue.extend(c.children());
                continue;
            }
            let centre = c.centre();
            if norm(&eval_direction(chart, &d, &centre)) < 2.0 * delta {
                finest = finest.min(c.width);
                let key = centre.iter().map(|v| (v / piece_width).floor() as i64).collect();
                members.entry(key).or_default().push(centre);
            }
        }
    }
    if members.is_empty() {
        return Ok(IntersectionDiameter::Empty);
    }
    let pieces: Vec<PieceDiameter> = members
        .into_iter()
        .map(|(key, pts)| {
            let mut diam = 0.0f64;
            for (i, a) in pts.iter().enumerate() {
                for b in &pts[i + 1..] {
                    diam = diam.max(dist(a, b));
                }
            }
            PieceDiameter {
                lo: key.iter().map(|&k| k as f64 * piece_width).collect(),
                width: piece_width,
                diameter: diam + finest * (m as f64).sqrt(),
            }
        })
        .collect();
    let max_diameter = pieces.iter().map(|p| p.diameter).fold(0.0, f64::max);
    Ok(IntersectionDiameter::Measured {
        pieces,
        max_diameter,
        bound: 32.0 * k_const * k_const * delta / norm_h.value,
        vacuous: norm_h.value <= 4.0 * k_const * delta,
        d: norm_h.value,
    })
}
