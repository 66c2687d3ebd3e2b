//! Self-similar test sets, dyadic covering numbers and `(δ, s)`-set extraction.
//!
//! Dimensions here are box-counting dimensions: the slope of
//! `log₂ N(2^{−k})` against `k`, with `N` the number of occupied dyadic cells.
//! For the self-similar sets built below it agrees with the Hausdorff
//! dimension, which is what the geometric statements are about.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::manifold::dist;
use crate::rng;
use crate::stats::{linear_fit, LinearFit};

/// Largest supported point dimension.
pub const MAX_DIM: usize = 6;
/// Largest dyadic scale exponent; cell indices must fit comfortably in `i64`.
pub const MAX_SCALE: u32 = 52;

/// Points stored contiguously, `dim` coordinates each.
#[derive(Clone, Debug, PartialEq)]
pub struct PointCloud {
    dim: usize,
    coords: Vec<f64>,
}

impl PointCloud {
    pub fn new(dim: usize) -> PointCloud {
        assert!((1..=MAX_DIM).contains(&dim), "point dimension must lie in 1..={MAX_DIM}");
        PointCloud { dim, coords: Vec::new() }
    }

    pub fn from_coords(dim: usize, coords: Vec<f64>) -> PointCloud {
        assert!((1..=MAX_DIM).contains(&dim), "point dimension must lie in 1..={MAX_DIM}");
        assert_eq!(coords.len() % dim, 0, "coordinate count is not a multiple of the dimension");
        PointCloud { dim, coords }
    }

    pub fn from_points(dim: usize, points: &[Vec<f64>]) -> PointCloud {
        let mut cloud = PointCloud::new(dim);
        for p in points {
            cloud.push(p);
        }
        cloud
    }

    pub fn push(&mut self, p: &[f64]) {
        assert_eq!(p.len(), self.dim);
        self.coords.extend_from_slice(p);
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.coords.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    pub fn point(&self, i: usize) -> &[f64] {
        &self.coords[i * self.dim..(i + 1) * self.dim]
    }

    pub fn iter(&self) -> impl ExactSizeIterator<Item = &[f64]> + '_ {
        self.coords.chunks_exact(self.dim)
    }

    pub fn coords(&self) -> &[f64] {
        &self.coords
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "preset", rename_all = "kebab-case")]
pub enum Placement {
    /// `branches` copies spread along `e₁`.
    Axis,
    /// A `k × k` lattice of copies in the `e₁e₂` plane; `branches = k²`.
    Planar,
    /// Copies spread along `(1, …, 1)`.
    Diagonal,
    /// `factors[a]` copies along axis `a`; `branches = Π factors`.
    Product { factors: Vec<usize> },
}

/// Finite level of a self-similar set: the centres of the level-`k` cells of
/// the iterated function system `p ↦ r·p + t_i` on `[0, 1]^n`, translated and
/// scaled into `B(o, 1/2)`.
#[derive(Clone, Debug)]
pub struct FractalSet {
    pub n: usize,
    pub branches: usize,
    pub ratio: f64,
    pub level: u32,
    pub translations: Vec<Vec<f64>>,
    pub points: PointCloud,
    /// Uniform mass of each point under the natural measure, `branches^{−level}`.
    pub weight: f64,
    pub similarity_dim: f64,
    /// Side of a level-`k` cell after scaling.
    pub cell_side: f64,
    /// Factor applied to the unit-cube construction.
    pub scale: f64,
}

const MAX_POINTS: u64 = 100_000_000;

impl FractalSet {
    pub fn build(n: usize, branches: usize, ratio: f64, level: u32, placement: &Placement) -> Result<FractalSet> {
        if !(1..=MAX_DIM).contains(&n) {
            return Err(invalid("n", format!("must lie in 1..={MAX_DIM}")));
        }
        if branches == 0 {
            return Err(invalid("m", "need at least one branch"));
        }
        if !(ratio > 0.0 && ratio < 1.0) {
            return Err(invalid("ratio", format!("must lie in (0, 1), got {ratio}")));
        }
        if level == 0 {
            return Err(invalid("level", "must be at least 1"));
        }
        let total = (branches as u64).checked_pow(level).filter(|&t| t <= MAX_POINTS);
        let Some(total) = total else {
            return Err(invalid("level", format!("{branches}^{level} points exceeds {MAX_POINTS}")));
        };
        let translations = translations(n, branches, ratio, placement)?;
        check_disjoint(&translations, ratio)?;

        // Cell centres, built level by level: p_{k+1} = r·p_k + t_i keeps the
        // ordering of the address words.
        let mut coords = vec![0.5; n];
        for _ in 0..level {
            let prev = coords;
            coords = Vec::with_capacity(prev.len() * branches);
            for t in &translations {
                for p in prev.chunks_exact(n) {
                    coords.extend(p.iter().zip(t).map(|(v, ti)| ratio * v + ti));
                }
            }
        }
        debug_assert_eq!(coords.len() as u64, total * n as u64);

        // Centre the bounding box at the origin and fit it in B(o, 1/2).
        let mut lo = vec![f64::INFINITY; n];
        let mut hi = vec![f64::NEG_INFINITY; n];
        for p in coords.chunks_exact(n) {
            for a in 0..n {
                lo[a] = lo[a].min(p[a]);
                hi[a] = hi[a].max(p[a]);
            }
        }
        let centre: Vec<f64> = lo.iter().zip(&hi).map(|(a, b)| 0.5 * (a + b)).collect();
        let radius = coords
            .chunks_exact(n)
            .map(|p| dist(p, &centre))
            .fold(0.0, f64::max);
        // A power of two keeps dyadic constructions aligned with dyadic grids.
        let scale = if radius > 0.0 { (0.49 / radius).log2().floor().exp2() } else { 1.0 };
        for p in coords.chunks_exact_mut(n) {
            for a in 0..n {
                p[a] = (p[a] - centre[a]) * scale;
            }
        }
        Ok(FractalSet {
            n,
            branches,
            ratio,
            level,
            translations,
            points: PointCloud::from_coords(n, coords),
            weight: (branches as f64).powi(-(level as i32)),
            similarity_dim: (branches as f64).ln() / (1.0 / ratio).ln(),
            cell_side: ratio.powi(level as i32) * scale,
            scale,
        })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Scale window `[k_max − width, k_max]` for box counting, with `k_max`
    /// chosen so that `2^{dim·k_max}` stays below `|points| / 4`.
    pub fn default_window(&self, width: u32) -> (u32, u32) {
        default_window(self.len(), self.similarity_dim, width)
    }
}

/// Scale window for a set of `count` points of expected dimension `dim`.
///
/// Cells of side `1/2` are as large as the sets themselves, which live in
/// `B(o, 1/2)`, and their counts reflect placement rather than size; for
/// `dim > 0` the window therefore starts at `k >= 2`.
pub fn default_window(count: usize, dim: f64, width: u32) -> (u32, u32) {
    let budget = (count as f64).log2() - 2.0;
    let k_max = if dim > 0.0 { (budget / dim).floor().clamp(width as f64 + 2.0, 40.0) as u32 } else { width };
    (k_max - width, k_max)
}

fn spread(count: usize, ratio: f64) -> Vec<f64> {
    if count <= 1 {
        return vec![0.5 * (1.0 - ratio)];
    }
    (0..count).map(|i| i as f64 * (1.0 - ratio) / (count - 1) as f64).collect()
}

fn translations(n: usize, branches: usize, ratio: f64, placement: &Placement) -> Result<Vec<Vec<f64>>> {
    let centre = 0.5 * (1.0 - ratio);
    Ok(match placement {
        Placement::Axis => spread(branches, ratio)
            .into_iter()
            .map(|v| {
                let mut t = vec![centre; n];
                t[0] = v;
                t
            })
            .collect(),
        Placement::Diagonal => spread(branches, ratio).into_iter().map(|v| vec![v; n]).collect(),
        Placement::Planar => {
            if n < 2 {
                return Err(invalid("placement", "planar placement needs n >= 2"));
            }
            let k = (branches as f64).sqrt().round() as usize;
            if k * k != branches {
                return Err(invalid("m", format!("planar placement needs a square branch count, got {branches}")));
            }
            let axis = spread(k, ratio);
            let mut out = Vec::with_capacity(branches);
            for a in &axis {
                for b in &axis {
                    let mut t = vec![centre; n];
                    t[0] = *a;
                    t[1] = *b;
                    out.push(t);
                }
            }
            out
        }
        Placement::Product { factors } => {
            if factors.len() != n {
                return Err(invalid("factors", format!("need {n} per-axis counts, got {}", factors.len())));
            }
            if factors.iter().product::<usize>() != branches {
                return Err(invalid("m", format!("product of factors {factors:?} is not {branches}")));
            }
            let mut out = vec![vec![]];
            for &k in factors {
                let axis = spread(k, ratio);
                out = out
                    .into_iter()
                    .flat_map(|prefix: Vec<f64>| {
                        axis.iter().map(move |v| {
                            let mut t = prefix.clone();
                            t.push(*v);
                            t
                        })
                    })
                    .collect();
            }
            out
        }
    })
}

/// First-level cells `t_i + [0, r]^n` must not overlap (touching is allowed).
fn check_disjoint(translations: &[Vec<f64>], ratio: f64) -> Result<()> {
    for (i, a) in translations.iter().enumerate() {
        for b in &translations[i + 1..] {
            let gap = a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
            if gap < ratio * (1.0 - 1e-12) {
                return Err(Error::Overlap { ratio, branches: translations.len() });
            }
        }
    }
    Ok(())
}

type CellKey = [i64; MAX_DIM];

fn check_scale(k: u32) -> Result<()> {
    if k > MAX_SCALE {
        return Err(invalid("delta", format!("scale 2^-{k} exceeds the index width (k <= {MAX_SCALE})")));
    }
    Ok(())
}

/// Exponent `k` with `delta = 2^{−k}`.
pub fn scale_exponent(delta: f64) -> Result<u32> {
    if !(delta > 0.0 && delta <= 1.0) {
        return Err(invalid("delta", format!("must lie in (0, 1], got {delta}")));
    }
    let k = -delta.log2();
    if (k - k.round()).abs() > 1e-9 {
        return Err(invalid("delta", format!("{delta} is not a power of two")));
    }
    let k = k.round() as u32;
    check_scale(k)?;
    Ok(k)
}

fn key_of(p: &[f64], k: u32) -> CellKey {
    let s = (k as f64).exp2();
    let mut key = [0i64; MAX_DIM];
    for (slot, v) in key.iter_mut().zip(p) {
        *slot = (v * s).floor() as i64;
    }
    key
}

/// Occupied cells of side `2^{−k}`, anchored at the origin. Cell `c` is the
/// box `Π [c_a 2^{−k}, (c_a + 1) 2^{−k})`; indices are signed so that sets
/// around the origin need no shifting.
#[derive(Clone, Debug, PartialEq)]
pub struct DyadicGrid {
    d: usize,
    k: u32,
    cells: Vec<CellKey>,
}

impl DyadicGrid {
    pub fn from_points(points: &PointCloud, k: u32) -> Result<DyadicGrid> {
        check_scale(k)?;
        let mut cells: Vec<CellKey> = points.iter().map(|p| key_of(p, k)).collect();
        cells.par_sort_unstable();
        cells.dedup();
        Ok(DyadicGrid { d: points.dim(), k, cells })
    }

    pub fn from_cells(d: usize, k: u32, mut cells: Vec<Vec<i64>>) -> Result<DyadicGrid> {
        check_scale(k)?;
        let mut keys: Vec<CellKey> = cells
            .drain(..)
            .map(|c| {
                let mut key = [0i64; MAX_DIM];
                key[..d].copy_from_slice(&c[..d]);
                key
            })
            .collect();
        keys.par_sort_unstable();
        keys.dedup();
        Ok(DyadicGrid { d, k, cells: keys })
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    pub fn scale(&self) -> u32 {
        self.k
    }

    pub fn side(&self) -> f64 {
        (-(self.k as f64)).exp2()
    }

    pub fn count(&self) -> usize {
        self.cells.len()
    }

    pub fn contains_point(&self, p: &[f64]) -> bool {
        self.cells.binary_search(&key_of(p, self.k)).is_ok()
    }

    pub fn cells(&self) -> impl Iterator<Item = &[i64]> + '_ {
        self.cells.iter().map(move |c| &c[..self.d])
    }

    /// The grid one level coarser.
    pub fn coarsen(&self) -> DyadicGrid {
        let mut cells: Vec<CellKey> = self
            .cells
            .iter()
            .map(|c| {
                let mut k = *c;
                for v in k.iter_mut() {
                    *v >>= 1;
                }
                k
            })
            .collect();
        cells.dedup();
        cells.sort_unstable();
        cells.dedup();
        DyadicGrid { d: self.d, k: self.k.saturating_sub(1), cells }
    }
}

/// Number of occupied dyadic cells of side `delta = 2^{−k}`.
///
/// A set of diameter below `δ` meets at most `2^d` such cells and a cell is
/// covered by one ball of radius `√d δ / 2`, so this count and the ball
/// covering number agree up to a factor `(2√d)^d`.
pub fn covering_number(points: &PointCloud, delta: f64) -> Result<usize> {
    let k = scale_exponent(delta)?;
    Ok(DyadicGrid::from_points(points, k)?.count())
}

/// Covering numbers at every scale `k_min..=k_max`, sharing one sort.
pub fn covering_numbers(points: &PointCloud, k_min: u32, k_max: u32) -> Result<Vec<usize>> {
    check_scale(k_max)?;
    if k_min > k_max {
        return Err(invalid("k_min", format!("{k_min} exceeds k_max = {k_max}")));
    }
    if let Some(counts) = packed_covering_numbers(points, k_min, k_max) {
        return Ok(counts);
    }
    let mut grid = DyadicGrid::from_points(points, k_max)?;
    let mut out = vec![0; (k_max - k_min + 1) as usize];
    for k in (k_min..=k_max).rev() {
        out[(k - k_min) as usize] = grid.count();
        if k > k_min {
            grid = grid.coarsen();
        }
    }
    Ok(out)
}

/// Fast path of [`covering_numbers`]: cell indices biased by a multiple of
/// `2^{k_max}` and packed into one `u64`, so that coarsening is a shift and a
/// mask. `None` when the fields do not fit.
fn packed_covering_numbers(points: &PointCloud, k_min: u32, k_max: u32) -> Option<Vec<usize>> {
    let d = points.dim();
    let extent = points.coords().iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if !extent.is_finite() {
        return None;
    }
    // Indices lie in [−R 2^k, R 2^k) with R a power of two above the extent.
    let r_bits = (extent + 1.0).log2().ceil().max(0.0) as u32;
    let width = k_max + r_bits + 1;
    if width as usize * d > 64 {
        return None;
    }
    let bias = 1i64 << (k_max + r_bits);
    let scale = (k_max as f64).exp2();
    let mut keys: Vec<u64> = points
        .coords()
        .par_chunks_exact(d)
        .map(|p| {
            p.iter().fold(0u64, |key, v| (key << width) | ((v * scale).floor() as i64 + bias) as u64)
        })
        .collect();
    keys.par_sort_unstable();
    keys.dedup();
    let field = (1u64 << (width - 1)) - 1;
    let mask = (0..d).fold(0u64, |m, a| m | (field << (a as u32 * width)));
    let mut out = vec![0; (k_max - k_min + 1) as usize];
    for k in (k_min..=k_max).rev() {
        out[(k - k_min) as usize] = keys.len();
        if k > k_min {
            for key in keys.iter_mut() {
                *key = (*key >> 1) & mask;
            }
            keys.par_sort_unstable();
            keys.dedup();
        }
    }
    Some(out)
}

/// Grid offsets tried by [`box_dimension`], the first being the anchored grid.
pub const GRID_SHIFTS: u64 = 8;

/// Per-scale minimum of the occupied-cell count over [`GRID_SHIFTS`] grids
/// translated by fixed pseudo-random offsets in `[0, 2^{−k_min})^d`.
///
/// A single anchored grid overcounts sets that straddle cell boundaries; the
/// minimum over translates is closer to the optimal cover and damps the
/// oscillation of the log-log curve.
pub fn min_covering_numbers(points: &PointCloud, k_min: u32, k_max: u32) -> Result<Vec<usize>> {
    let d = points.dim();
    let coarse = (-(k_min as f64)).exp2();
    let mut best = covering_numbers(points, k_min, k_max)?;
    for s in 1..GRID_SHIFTS {
        let mut rng = rng::stream(0x5eed_0ff5e7, s);
        let offset: Vec<f64> = (0..d).map(|_| rng.random::<f64>() * coarse).collect();
        let shifted = PointCloud::from_coords(
            d,
            points.coords().chunks_exact(d).flat_map(|p| p.iter().zip(&offset).map(|(v, o)| v + o)).collect(),
        );
        for (b, c) in best.iter_mut().zip(covering_numbers(&shifted, k_min, k_max)?) {
            *b = (*b).min(c);
        }
    }
    Ok(best)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoxDimension {
    pub slope: f64,
    pub r2: f64,
    pub slope_ci95: f64,
    pub scales: Vec<u32>,
    pub counts: Vec<usize>,
    pub residuals: Vec<f64>,
    /// Scales dropped because the finite set saturates there.
    pub excluded: Vec<u32>,
}

/// Least-squares slope of `log₂ N(2^{−k})` against `k` over `[k_min, k_max]`,
/// with `N` from [`min_covering_numbers`].
///
/// A scale is saturated, and dropped, once `N` exceeds a quarter of the point
/// count: from there on the finite sample rather than the set decides the
/// count.
pub fn box_dimension(points: &PointCloud, k_min: u32, k_max: u32) -> Result<BoxDimension> {
    if k_max < k_min + 3 {
        return Err(invalid("k_max", format!("need k_max - k_min >= 3, got [{k_min}, {k_max}]")));
    }
    if points.is_empty() {
        return Err(invalid("points", "empty point set"));
    }
    let counts = min_covering_numbers(points, k_min, k_max)?;
    let limit = (points.len() as f64 / 4.0).max(1.0);
    let mut scales = Vec::new();
    let mut used = Vec::new();
    let mut excluded = Vec::new();
    for (i, &c) in counts.iter().enumerate() {
        let k = k_min + i as u32;
        if c as f64 > limit && points.len() > 1 {
            excluded.push(k);
        } else {
            scales.push(k);
            used.push(c);
        }
    }
    if !excluded.is_empty() {
        log::debug!("box dimension: scales {excluded:?} saturated and were excluded");
    }
    if used.iter().all(|&c| c == used[0]) {
        return Ok(BoxDimension {
            slope: 0.0,
            r2: 1.0,
            slope_ci95: 0.0,
            residuals: vec![0.0; used.len()],
            scales,
            counts: used,
            excluded,
        });
    }
    let x: Vec<f64> = scales.iter().map(|&k| k as f64).collect();
    let y: Vec<f64> = used.iter().map(|&c| (c as f64).log2()).collect();
    let fit = linear_fit(&x, &y).ok_or_else(|| invalid("k_max", "fewer than two unsaturated scales"))?;
    let residuals = x.iter().zip(&y).map(|(a, b)| b - fit.slope * a - fit.intercept).collect();
    Ok(BoxDimension { slope: fit.slope, r2: fit.r2, slope_ci95: fit.slope_ci95, scales, counts: used, residuals, excluded })
}

#[derive(Clone, Debug, PartialEq)]
pub struct DeltaSSet {
    pub points: PointCloud,
    pub delta: f64,
    pub s: f64,
    /// Witnessed constant: `|P ∩ B(x, r)| <= c · r^s · |P|` for every ball with `r >= δ`.
    pub c: f64,
}

/// Feasibility slack: the source must meet at least `δ^{−s} / FEASIBILITY` cells.
pub const FEASIBILITY: f64 = 16.0;

/// A `δ`-separated subset that is spread like an `s`-dimensional set.
///
/// The dyadic tree of occupied cells is walked from the root; at depth `j` at
/// most `⌈2^{js}⌉` cells survive, chosen round-robin across parents so that
/// the survivors stay balanced. One point per surviving leaf is kept and
/// points closer than `δ` are then thinned greedily.
pub fn extract_delta_s_set(points: &PointCloud, delta: f64, s: f64) -> Result<DeltaSSet> {
    let k = scale_exponent(delta)?;
    let d = points.dim();
    if !(s > 0.0 && s <= d as f64) {
        return Err(invalid("s", format!("must lie in (0, {d}], got {s}")));
    }
    // Representative (first) point per occupied leaf.
    let mut leaves: Vec<(CellKey, usize)> = points.iter().enumerate().map(|(i, p)| (key_of(p, k), i)).collect();
    leaves.par_sort_unstable();
    leaves.dedup_by_key(|e| e.0);
    let target = delta.powf(-s);
    if (leaves.len() as f64) < target / FEASIBILITY {
        return Err(Error::Infeasible { cells: leaves.len(), needed: target / FEASIBILITY });
    }

    // Root: the finest level at which everything shares one cell. Signed
    // cells on both sides of the origin never merge; the walk then starts
    // from every occupied cell of level 0.
    let mut shared = 0u32;
    while shared < k {
        let a = shift(&leaves[0].0, k - shared);
        if leaves.iter().all(|l| shift(&l.0, k - shared) == a) {
            shared += 1;
        } else {
            break;
        }
    }
    let root = shared.saturating_sub(1);
    let mut kept: Vec<CellKey> = leaves.iter().map(|l| shift(&l.0, k - root)).collect();
    kept.sort_unstable();
    kept.dedup();
    for level in root + 1..=k {
        let quota = ((level - root) as f64 * s).exp2().ceil() as usize;
        // Children of kept cells, grouped by parent. Lexicographic key order
        // is not hierarchical in d >= 2, so the pairs are grouped explicitly.
        let mut pairs: Vec<(CellKey, CellKey)> =
            leaves.iter().map(|l| (shift(&l.0, k - level + 1), shift(&l.0, k - level))).collect();
        pairs.par_sort_unstable();
        pairs.dedup();
        let mut groups: Vec<Vec<CellKey>> = Vec::with_capacity(kept.len());
        for parent in &kept {
            let lo = pairs.partition_point(|p| p.0 < *parent);
            let children: Vec<CellKey> = pairs[lo..].iter().take_while(|p| p.0 == *parent).map(|p| p.1).collect();
            groups.push(spread_order(children, d));
        }
        let mut next = Vec::new();
        let mut round = 0;
        while next.len() < quota {
            let mut any = false;
            for g in &groups {
                if let Some(c) = g.get(round) {
                    any = true;
                    if next.len() < quota {
                        next.push(*c);
                    }
                }
            }
            if !any {
                break;
            }
            round += 1;
        }
        next.sort_unstable();
        kept = next;
    }
    let mut chosen = PointCloud::new(d);
    for key in &kept {
        let idx = leaves.binary_search_by(|l| l.0.cmp(key)).expect("kept leaf exists");
        let p = points.point(leaves[idx].1);
        if chosen.iter().all(|q| dist(p, q) >= delta) {
            chosen.push(p);
        }
    }
    let c = witnessed_constant(&chosen, delta, s);
    Ok(DeltaSSet { points: chosen, delta, s, c })
}

fn shift(key: &CellKey, by: u32) -> CellKey {
    let mut out = *key;
    for v in out.iter_mut() {
        *v >>= by;
    }
    out
}

/// Farthest-first ordering of sibling cells, starting from the smallest key.
fn spread_order(mut cells: Vec<CellKey>, d: usize) -> Vec<CellKey> {
    if cells.len() <= 2 {
        return cells;
    }
    let sep = |a: &CellKey, b: &CellKey| -> i64 { (0..d).map(|i| (a[i] - b[i]).abs()).sum() };
    let mut out = vec![cells.remove(0)];
    while !cells.is_empty() {
        let (best, _) = cells
            .iter()
            .enumerate()
            .map(|(i, c)| (i, out.iter().map(|o| sep(o, c)).min().unwrap_or(0)))
            .max_by(|a, b| a.1.cmp(&b.1).then(b.0.cmp(&a.0)))
            .expect("non-empty");
        out.push(cells.remove(best));
    }
    out
}

const EXACT_WITNESS_LIMIT: usize = 4096;

/// Smallest `C` certified for `|P ∩ B(x, r)| <= C r^s |P|`, `r >= δ`.
///
/// Small sets: every ball `B(x, r)` meeting `P` lies in `B(p, 2r)` for some
/// `p ∈ P`, so `2^s` times the worst point-centred ratio suffices. Large
/// sets: a ball of radius `r <= 2^{−j}` meets at most `3^d` cells of side
/// `2^{−j}`.
pub fn witnessed_constant(points: &PointCloud, delta: f64, s: f64) -> f64 {
    let n = points.len();
    if n == 0 {
        return 0.0;
    }
    let total = n as f64;
    if n <= EXACT_WITNESS_LIMIT {
        let worst = (0..n)
            .into_par_iter()
            .map(|i| {
                let p = points.point(i);
                let mut d: Vec<f64> = points.iter().map(|q| dist(p, q)).collect();
                d.sort_by(f64::total_cmp);
                d.iter()
                    .enumerate()
                    .map(|(j, &r)| (j + 1) as f64 / (r.max(delta).powf(s) * total))
                    .fold(0.0, f64::max)
            })
            .reduce(|| 0.0, f64::max);
        return s.exp2() * worst;
    }
    let kmax = (1.0 / delta).log2().ceil() as u32;
    let d = points.dim();
    let mut worst = 0.0f64;
    let mut keys: Vec<CellKey> = points.iter().map(|p| key_of(p, kmax)).collect();
    keys.par_sort_unstable();
    for j in (0..=kmax).rev() {
        let shifted: Vec<CellKey> = keys.iter().map(|c| shift(c, kmax - j)).collect();
        let mut best = 0usize;
        let mut run = 0usize;
        for (i, c) in shifted.iter().enumerate() {
            run = if i > 0 && shifted[i - 1] == *c { run + 1 } else { 1 };
            best = best.max(run);
        }
        // Radii in (2^{−j−1}, 2^{−j}].
        let r = (-(j as f64) - 1.0).exp2().max(delta);
        worst = worst.max(3f64.powi(d as i32) * best as f64 / (r.powf(s) * total));
    }
    worst
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrostmanReport {
    pub exponent: f64,
    pub max_ratio: f64,
    pub p99_ratio: f64,
    /// `(radius, largest ratio)` per dyadic radius band, coarse to fine.
    pub per_scale: Vec<(f64, f64)>,
    /// Slope of `log₂(largest ratio)` against `log₂(1/r)`.
    pub slope: f64,
    pub bounded: bool,
    pub trials: usize,
}

/// Slope above which the ratio is declared unbounded as `r → 0`.
pub const FROSTMAN_SLOPE_TOL: f64 = 0.03;

/// Checks `μ(B(z, r)) <= C r^{exponent}` for the natural measure on random
/// balls centred on the set, with radii log-uniform between the set's
/// diameter and its construction cell size.
pub fn frostman_check(set: &FractalSet, exponent: f64, trials: usize, seed: u64) -> FrostmanReport {
    let pts = &set.points;
    let j_max = (1.0 / set.cell_side).log2().floor().max(1.0);
    let bands = j_max.ceil() as usize;
    let samples: Vec<(usize, f64)> = (0..trials as u64)
        .into_par_iter()
        .map(|t| {
            let mut rng = rng::stream(seed, t);
            let centre = pts.point(rng.random_range(0..pts.len()));
            let j = rng.random::<f64>() * j_max;
            let r = (-j).exp2();
            let inside = pts.iter().filter(|q| dist(centre, q) <= r).count();
            let mass = inside as f64 * set.weight;
            ((j.floor() as usize).min(bands - 1), mass / r.powf(exponent))
        })
        .collect();
    let mut ratios: Vec<f64> = samples.iter().map(|s| s.1).collect();
    ratios.sort_by(f64::total_cmp);
    let max_ratio = ratios.last().copied().unwrap_or(0.0);
    let p99_ratio = ratios.get(((ratios.len() as f64) * 0.99) as usize).copied().unwrap_or(max_ratio);
    let mut per_band = vec![0.0f64; bands];
    for (b, v) in &samples {
        per_band[*b] = per_band[*b].max(*v);
    }
    let per_scale: Vec<(f64, f64)> =
        per_band.iter().enumerate().filter(|(_, v)| **v > 0.0).map(|(j, v)| ((-(j as f64)).exp2(), *v)).collect();
    let x: Vec<f64> = per_scale.iter().map(|(r, _)| -r.log2()).collect();
    let y: Vec<f64> = per_scale.iter().map(|(_, v)| v.log2()).collect();
    let slope = linear_fit(&x, &y).map(|f: LinearFit| f.slope).unwrap_or(0.0);
    FrostmanReport {
        exponent,
        max_ratio,
        p99_ratio,
        per_scale,
        slope,
        bounded: slope <= FROSTMAN_SLOPE_TOL,
        trials,
    }
}

/// Greedy `δ`-separated subset: points are visited in order and kept unless
/// a kept point lies within `δ`.
pub fn separated_subset(points: &PointCloud, delta: f64) -> Result<PointCloud> {
    if !(delta > 0.0 && delta.is_finite()) {
        return Err(invalid("delta", format!("must be positive, got {delta}")));
    }
    let d = points.dim();
    let mut buckets: std::collections::HashMap<CellKey, Vec<usize>> = std::collections::HashMap::new();
    let mut kept = PointCloud::new(d);
    let key = |p: &[f64]| -> CellKey {
        let mut out = [0i64; MAX_DIM];
        for (slot, v) in out.iter_mut().zip(p) {
            *slot = (v / delta).floor() as i64;
        }
        out
    };
    for p in points.iter() {
        let home = key(p);
        let mut clear = true;
        'search: for code in 0..3usize.pow(d as u32) {
            let mut probe = home;
            let mut c = code;
            for slot in probe.iter_mut().take(d) {
                *slot += (c % 3) as i64 - 1;
                c /= 3;
            }
            if let Some(list) = buckets.get(&probe) {
                for &i in list {
                    if dist(kept.point(i), p) < delta {
                        clear = false;
                        break 'search;
                    }
                }
            }
        }
        if clear {
            buckets.entry(home).or_default().push(kept.len());
            kept.push(p);
        }
    }
    Ok(kept)
}

const PTS_MAGIC: &[u8; 4] = b"PTS1";

/// Writes `PTS1`, `u32` dimension, `u64` count, then little-endian `f64`s.
pub fn write_pts(path: &Path, points: &PointCloud) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(PTS_MAGIC)?;
    w.write_all(&(points.dim() as u32).to_le_bytes())?;
    w.write_all(&(points.len() as u64).to_le_bytes())?;
    for v in points.coords() {
        w.write_all(&v.to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_pts(path: &Path) -> Result<PointCloud> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != PTS_MAGIC {
        return Err(Error::Format(format!("bad magic {magic:?}")));
    }
    let mut b4 = [0u8; 4];
    r.read_exact(&mut b4)?;
    let dim = u32::from_le_bytes(b4) as usize;
    if !(1..=MAX_DIM).contains(&dim) {
        return Err(Error::Format(format!("unsupported dimension {dim}")));
    }
    let mut b8 = [0u8; 8];
    r.read_exact(&mut b8)?;
    let count = u64::from_le_bytes(b8) as usize;
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    if bytes.len() != count * dim * 8 {
        return Err(Error::Format(format!("expected {} coordinate bytes, found {}", count * dim * 8, bytes.len())));
    }
    let coords = bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
    Ok(PointCloud::from_coords(dim, coords))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn cantor_unit(level: u32) -> PointCloud {
        let mut pts = vec![0.5];
        for _ in 0..level {
            pts = pts.iter().flat_map(|p| [p / 3.0, p / 3.0 + 2.0 / 3.0]).collect();
        }
        PointCloud::from_coords(1, pts)
    }

    #[test]
    fn cantor_on_an_axis() {
        let set = FractalSet::build(3, 2, 1.0 / 3.0, 8, &Placement::Axis).unwrap();
        assert_eq!(set.len(), 256);
        assert_relative_eq!(set.similarity_dim, 2f64.ln() / 3f64.ln(), epsilon = 1e-15);
        assert!(set.points.iter().all(|p| p.iter().map(|v| v * v).sum::<f64>() < 0.25));
        assert!(set.points.iter().all(|p| p[1] == 0.0 && p[2] == 0.0));
    }

    #[test]
    fn single_branch_is_a_point() {
        let set = FractalSet::build(3, 1, 0.3, 5, &Placement::Axis).unwrap();
        assert_eq!(set.len(), 1);
        assert_eq!(set.similarity_dim, 0.0);
    }

    #[test]
    fn planar_unit_dimension() {
        let set = FractalSet::build(3, 4, 0.25, 6, &Placement::Planar).unwrap();
        assert_eq!(set.len(), 4096);
        assert_relative_eq!(set.similarity_dim, 1.0, epsilon = 1e-15);
    }

    #[test]
    fn overlapping_placement_is_rejected() {
        assert!(matches!(FractalSet::build(2, 3, 0.5, 2, &Placement::Axis), Err(Error::Overlap { .. })));
        assert!(matches!(FractalSet::build(3, 3, 0.3, 2, &Placement::Planar), Err(Error::InvalidParameter { .. })));
    }

    #[test]
    fn equispaced_points_fill_their_cells() {
        let pts = PointCloud::from_coords(1, (0..16).map(|i| (i as f64 + 0.5) / 16.0).collect());
        assert_eq!(covering_number(&pts, 1.0 / 16.0).unwrap(), 16);
        let one = PointCloud::from_coords(2, vec![0.3, -0.2]);
        for k in 0..10 {
            assert_eq!(covering_number(&one, (-(k as f64)).exp2()).unwrap(), 1);
        }
    }

    #[test]
    fn non_dyadic_scale_is_rejected() {
        let one = PointCloud::from_coords(1, vec![0.3]);
        assert!(covering_number(&one, 0.3).is_err());
        assert!(covering_number(&one, 2f64.powi(-60)).is_err());
    }

    #[test]
    fn cantor_covering_near_triadic_count() {
        // Dyadic cells of side 1/32 against the 8 triadic cells of side 1/27.
        let count = covering_number(&cantor_unit(3), 1.0 / 32.0).unwrap();
        assert!((2..=32).contains(&count), "{count}");
    }

    #[test]
    fn packed_and_generic_counts_agree() {
        let set = FractalSet::build(3, 4, 0.3, 7, &Placement::Product { factors: vec![2, 1, 2] }).unwrap();
        let packed = packed_covering_numbers(&set.points, 2, 14).unwrap();
        let mut grid = DyadicGrid::from_points(&set.points, 14).unwrap();
        for k in (2..=14).rev() {
            assert_eq!(packed[k - 2], grid.count(), "k = {k}");
            grid = grid.coarsen();
        }
        let wide = PointCloud::from_coords(6, vec![-0.4, 0.1, 0.2, 0.3, -0.1, 0.0]);
        assert!(packed_covering_numbers(&wide, 0, 30).is_none());
    }

    #[test]
    fn box_dimension_of_single_point_is_zero() {
        let one = PointCloud::from_coords(3, vec![0.1, 0.2, 0.3]);
        let b = box_dimension(&one, 2, 8).unwrap();
        assert_eq!(b.slope, 0.0);
    }

    #[test]
    fn delta_s_set_on_a_grid() {
        let g = 1usize << 6;
        let coords: Vec<f64> = (0..g * g).flat_map(|i| [(i / g) as f64 / g as f64, (i % g) as f64 / g as f64]).collect();
        let pts = PointCloud::from_coords(2, coords);
        let set = extract_delta_s_set(&pts, 1.0 / g as f64, 0.5).unwrap();
        // δ^{-s} = 8.
        assert!(set.points.len() >= 4 && set.points.len() <= 8, "{}", set.points.len());
        for (i, p) in set.points.iter().enumerate() {
            for q in set.points.iter().skip(i + 1) {
                assert!(dist(p, q) >= 1.0 / g as f64);
            }
        }
    }

    #[test]
    fn concentrated_source_is_infeasible() {
        let pts = PointCloud::from_coords(1, vec![0.1, 0.1 + 1e-6, 0.1 + 2e-6]);
        assert!(matches!(extract_delta_s_set(&pts, 1.0 / 1024.0, 0.5), Err(Error::Infeasible { .. })));
    }

    #[test]
    fn pts_round_trip() {
        let set = FractalSet::build(3, 4, 0.25, 3, &Placement::Planar).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("set.pts");
        write_pts(&path, &set.points).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        assert_eq!(&bytes[..4], b"PTS1");
        assert_eq!(bytes.len(), 4 + 4 + 8 + 64 * 3 * 8);
        assert_eq!(read_pts(&path).unwrap(), set.points);
    }

    #[test]
    fn zero_exponent_ratio_is_a_probability() {
        let set = FractalSet::build(1, 2, 1.0 / 3.0, 8, &Placement::Axis).unwrap();
        let r = frostman_check(&set, 0.0, 500, 2);
        assert!(r.max_ratio <= 1.0 + 1e-12);
    }
}
