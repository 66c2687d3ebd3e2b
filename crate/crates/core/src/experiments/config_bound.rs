//! Covering number of the union of graph pieces of a configuration.
//!
//! A configuration at scale `δ` consists of maps `f_z` indexed by a
//! separated `(κδ, s')`-set of points `z` on a segment, and for every map a
//! base set `X_f` that is a cyclic shift of one `(δ, s)`-set, so that all
//! base sets have the same covering number `M`. The union
//! `E = ∪_f {(x, f(x)) : x ∈ X_f}` lives in `R^{2n−3}`.

use std::sync::Arc;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{delta_of, Ctx, Issues, Recorder, DEFAULT_MIN_R2};
use crate::error::{invalid, Result};
use crate::manifold::{dist, ManifoldChart};
use crate::projmap::{cinematic_report, eval_direction, FrameTable};
use crate::rng;
use crate::sets::{covering_number, extract_delta_s_set, witnessed_constant, PointCloud};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ConfigBoundParams {
    /// Dimension of the base sets `X_f`.
    pub s: f64,
    /// Dimension of the index set of maps; `0` means a single map.
    pub s_prime: f64,
    pub delta_exponents: Vec<u32>,
    /// Declared constant of the `(δ, s, C)` conditions.
    pub c: f64,
    /// Endpoints of the segment carrying the map indices; a fixed generic
    /// segment by default.
    pub segment: Option<[Vec<f64>; 2]>,
    /// Pairs and grid used to measure the bilipschitz constant.
    pub bilipschitz_pairs: usize,
    pub x_grid: usize,
    /// Families up to this many maps also get an exact pairwise `C²`
    /// separation check.
    pub exact_check_limit: usize,
    pub exponent_tolerance: f64,
    pub min_r2: f64,
}

impl Default for ConfigBoundParams {
    fn default() -> Self {
        ConfigBoundParams {
            s: 0.5,
            s_prime: 0.5,
            delta_exponents: vec![6, 7, 8, 9, 10, 11],
            c: 64.0,
            segment: None,
            bilipschitz_pairs: 500,
            x_grid: 256,
            exact_check_limit: 400,
            exponent_tolerance: 0.15,
            min_r2: DEFAULT_MIN_R2,
        }
    }
}

impl ConfigBoundParams {
    pub(super) fn validate(&self, is: &mut Issues, n: usize) {
        let m = (n - 2) as f64;
        is.require(self.s > 0.0 && self.s <= m, "s", format!("must lie in (0, {m}], got {}", self.s));
        is.require(
            (0.0..=1.0).contains(&self.s_prime),
            "s_prime",
            format!("must lie in [0, 1] (the maps are indexed by a segment), got {}", self.s_prime),
        );
        is.exponents("delta_exponents", &self.delta_exponents, 1);
        let cells = self.delta_exponents.iter().map(|&k| (k as f64 * m).exp2()).fold(0.0, f64::max);
        is.require(cells <= 4_194_304.0, "delta_exponents", format!("the finest base grid has {cells:.3e} cells, above 2^22"));
        is.require(self.c >= 1.0, "c", "must be at least 1");
        if let Some([a, b]) = &self.segment {
            is.require(a.len() == n && b.len() == n, "segment", format!("endpoints need {n} coordinates"));
            let inside = |p: &Vec<f64>| p.iter().map(|v| v * v).sum::<f64>().sqrt() <= 0.5;
            is.require(inside(a) && inside(b), "segment", "endpoints must lie in B(o, 1/2)");
            is.require(dist(a, b) > 0.0, "segment", "endpoints must differ");
        }
        is.require(self.bilipschitz_pairs >= 10, "bilipschitz_pairs", "must be at least 10");
        is.require(self.x_grid >= 8, "x_grid", "must be at least 8");
        is.positive("exponent_tolerance", self.exponent_tolerance);
        is.unit("min_r2", self.min_r2);
    }

    fn segment_for(&self, n: usize) -> [Vec<f64>; 2] {
        self.segment.clone().unwrap_or_else(|| {
            let mut a = vec![0.0; n];
            let mut b = vec![0.0; n];
            a[..3].copy_from_slice(&[-0.3, -0.15, 0.1]);
            b[..3].copy_from_slice(&[0.3, 0.2, -0.1]);
            [a, b]
        })
    }
}

/// One configuration and the quantities its definition constrains.
#[derive(Clone, Debug)]
pub struct Configuration {
    pub delta: f64,
    /// Separation scale of the map indices.
    pub index_scale: f64,
    pub maps: PointCloud,
    pub bases: Vec<PointCloud>,
    /// Common covering number of the base sets.
    pub m: usize,
    pub witnessed_c_maps: f64,
    pub witnessed_c_bases: f64,
    /// Union of graph pieces in `R^{2n−3}`.
    pub union: PointCloud,
}

impl Configuration {
    /// Problems with the defining conditions for constant `c` and surrogate
    /// bilipschitz constant `lo`.
    pub fn violations(&self, s: f64, c: f64, lo: f64) -> Vec<String> {
        let mut out = Vec::new();
        for (i, b) in self.bases.iter().enumerate() {
            let count = covering_number(b, self.delta).unwrap_or(0);
            if count != self.m {
                out.push(format!("base set {i} has covering number {count}, expected {}", self.m));
            }
        }
        let floor = self.delta.powf(-s) / c;
        if (self.m as f64) < floor {
            out.push(format!("M = {} is below δ^(-s)/C = {floor:.2}", self.m));
        }
        if self.witnessed_c_maps > c {
            out.push(format!("map indices witness C = {:.3} > {c}", self.witnessed_c_maps));
        }
        if self.witnessed_c_bases > c {
            out.push(format!("base set witnesses C = {:.3} > {c}", self.witnessed_c_bases));
        }
        let sep = min_separation(&self.maps);
        if sep.is_finite() && sep * lo < self.delta {
            out.push(format!("maps are only {:.3e} apart in the surrogate metric", sep * lo));
        }
        out
    }
}

fn min_separation(points: &PointCloud) -> f64 {
    let mut best = f64::INFINITY;
    for i in 0..points.len() {
        for j in i + 1..points.len() {
            best = best.min(dist(points.point(i), points.point(j)));
        }
    }
    best
}

/// Builds the configuration at scale `δ` with map indices separated by
/// `index_scale` along `segment`.
pub fn build_configuration(
    chart: &Arc<ManifoldChart>,
    s: f64,
    s_prime: f64,
    delta: f64,
    index_scale: f64,
    segment: &[Vec<f64>; 2],
    seed: u64,
) -> Result<Configuration> {
    let k = crate::sets::scale_exponent(delta)?;
    let m = chart.param_dim();
    let n = chart.n();
    let [a, b] = segment;
    let maps = if s_prime == 0.0 {
        let mid: Vec<f64> = a.iter().zip(b).map(|(p, q)| 0.5 * (p + q)).collect();
        PointCloud::from_points(n, &[mid])
    } else {
        let len = dist(a, b);
        let count = (len / (index_scale / 8.0)).ceil() as usize + 1;
        let source: Vec<Vec<f64>> = (0..count)
            .map(|i| {
                let t = i as f64 / (count - 1) as f64;
                a.iter().zip(b).map(|(p, q)| p + t * (q - p)).collect()
            })
            .collect();
        extract_delta_s_set(&PointCloud::from_points(n, &source), index_scale, s_prime)?.points
    };
    let witnessed_c_maps = if s_prime == 0.0 { 1.0 } else { witnessed_constant(&maps, index_scale, s_prime) };

    let side = 1usize << k;
    let total = side.pow(m as u32);
    let centre = |mut idx: usize| -> Vec<f64> {
        (0..m)
            .map(|_| {
                let c = idx % side;
                idx /= side;
                (c as f64 + 0.5) * delta
            })
            .collect()
    };
    let source = PointCloud::from_points(m, &(0..total).map(centre).collect::<Vec<_>>());
    let base = extract_delta_s_set(&source, delta, s)?;
    let witnessed_c_bases = base.c;
    let base_cells: Vec<Vec<usize>> = base
        .points
        .iter()
        .map(|p| p.iter().map(|v| ((v / delta).floor() as usize).min(side - 1)).collect())
        .collect();
    let m_count = base_cells.len();

    let mut rng = rng::stream(seed, k as u64);
    let offsets: Vec<Vec<usize>> = (0..maps.len()).map(|_| (0..m).map(|_| rng.random_range(0..side)).collect()).collect();
    let bases: Vec<PointCloud> = offsets
        .iter()
        .map(|off| {
            let pts: Vec<Vec<f64>> = base_cells
                .iter()
                .map(|cell| cell.iter().zip(off).map(|(c, o)| (((c + o) % side) as f64 + 0.5) * delta).collect())
                .collect();
            PointCloud::from_points(m, &pts)
        })
        .collect();
    let pieces: Vec<Vec<f64>> = (0..maps.len())
        .into_par_iter()
        .flat_map_iter(|i| {
            let z = maps.point(i).to_vec();
            let xs = bases[i].clone();
            (0..xs.len())
                .map(|j| {
                    let x = xs.point(j);
                    let mut p = x.to_vec();
                    p.extend(eval_direction(chart, &z, x));
                    p
                })
                .collect::<Vec<_>>()
        })
        .collect();
    let union = PointCloud::from_points(2 * n - 3, &pieces);
    Ok(Configuration {
        delta,
        index_scale,
        maps,
        bases,
        m: m_count,
        witnessed_c_maps,
        witnessed_c_bases,
        union,
    })
}

pub(super) fn run(p: &ConfigBoundParams, ctx: &Ctx, rec: &mut Recorder) -> Result<()> {
    let n = ctx.n();
    let chart = &ctx.chart;
    let mut rng = rng::stream(ctx.seed_for("bilipschitz"), 0);
    let pairs: Vec<(Vec<f64>, Vec<f64>)> = (0..p.bilipschitz_pairs)
        .map(|_| {
            let a = rng::unit_ball(&mut rng, n).into_iter().map(|v| 0.5 * v).collect();
            let b = rng::unit_ball(&mut rng, n).into_iter().map(|v| 0.5 * v).collect();
            (a, b)
        })
        .collect();
    let report = cinematic_report(chart, &pairs, p.x_grid, ctx.cancel_flag())?;
    let lo = report.bilipschitz_lo;
    if !(lo > 0.0) {
        return Err(invalid("bilipschitz_lo", format!("measured {lo}, cannot build a separated family")));
    }
    let kappa = (1.0 / lo).log2().ceil().max(0.0).exp2();
    rec.scalar("bilipschitz_lo", lo);
    rec.scalar("index_factor", kappa);
    let segment = p.segment_for(n);
    let table = FrameTable::new(chart, p.x_grid);

    let mut ks = p.delta_exponents.clone();
    ks.sort_unstable();
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    let mut invalid_scales = 0usize;
    let mut worst_c2_ratio = f64::INFINITY;
    let mut exact_checked = false;
    for &k in &ks {
        ctx.cancelled()?;
        let delta = delta_of(k);
        let index_scale = (kappa * delta).min(1.0);
        let config = build_configuration(chart, p.s, p.s_prime, delta, index_scale, &segment, ctx.seed_for("shifts"))?;
        let problems = config.violations(p.s, p.c, lo);
        let maps = config.maps.len();
        if maps <= p.exact_check_limit && maps >= 2 {
            exact_checked = true;
            let ratio = (0..maps)
                .into_par_iter()
                .map(|i| {
                    (i + 1..maps)
                        .map(|j| {
                            let d: Vec<f64> =
                                config.maps.point(i).iter().zip(config.maps.point(j)).map(|(a, b)| a - b).collect();
                            table.c2_norm(&d).value / delta
                        })
                        .fold(f64::INFINITY, f64::min)
                })
                .reduce(|| f64::INFINITY, f64::min);
            worst_c2_ratio = worst_c2_ratio.min(ratio);
        }
        let e = covering_number(&config.union, delta)?;
        rec.measure("maps", Some(delta), maps as f64, None, maps as u64);
        rec.measure("base_covering", Some(delta), config.m as f64, None, config.m as u64);
        rec.measure("union_covering", Some(delta), e as f64, None, config.union.len() as u64);
        rec.measure("witnessed_c_maps", Some(delta), config.witnessed_c_maps, None, maps as u64);
        rec.measure("witnessed_c_bases", Some(delta), config.witnessed_c_bases, None, config.m as u64);
        if problems.is_empty() {
            xs.push(k as f64);
            ys.push((e as f64).log2());
        } else {
            invalid_scales += 1;
            for msg in problems {
                rec.note(format!("δ = 2^-{k}: {msg}"));
            }
        }
    }
    rec.check_le("invalid_configurations", invalid_scales as f64, 0.0);
    if exact_checked {
        rec.check_ge("min_c2_separation_over_delta", worst_c2_ratio, 1.0);
    }
    let target = p.s + p.s_prime;
    rec.fit("union_exponent", &xs, &ys, Some(target - p.exponent_tolerance), None, p.min_r2);
    rec.scalar("target_exponent", target);
    Ok(())
}
