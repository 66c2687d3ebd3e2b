//! Volume of `f_z^δ ∩ f_{z'}^δ` against `δ` and `d = ‖f_z − f_{z'}‖_{C²}`.

use serde::{Deserialize, Serialize};

use super::{centred_by_group, delta_of, Ctx, Issues, Recorder, DEFAULT_MIN_R2};
use crate::error::Result;
use crate::projmap::{pair_intersection_volume_with, CinematicMap, FrameTable};
use crate::rng;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PairVolumeParams {
    /// Number of intersecting pairs `z' = z + u Σ(x₀)`.
    pub pairs: usize,
    /// `δ = 2^{−k}` for each listed `k`.
    pub delta_exponents: Vec<u32>,
    /// Monte Carlo samples per pair and scale.
    pub samples: u64,
    /// Target `C²` distances are log-spaced over `[d_min, d_max]`.
    pub d_min: f64,
    pub d_max: f64,
    /// `z` is drawn from `B(o, z_radius)`.
    pub z_radius: f64,
    /// Frame-table grid per axis; by default 512, 64, 16, 8 for `n − 2 = 1..4`.
    pub frame_grid: Option<usize>,
    /// Only scales with `d >= min_separation · δ` enter the `δ` fit.
    pub min_separation: f64,
    /// Pairs with fewer hits at some scale are dropped.
    pub min_hits: u64,
    /// Half-width of the band around `−(n − 2)`; by default 0.25 for `n = 3`
    /// and 0.35 otherwise.
    pub d_tolerance: Option<f64>,
    /// Half-width of the band around `2n − 3`.
    pub delta_tolerance: f64,
    pub min_r2: f64,
}

impl Default for PairVolumeParams {
    fn default() -> Self {
        PairVolumeParams {
            pairs: 20,
            delta_exponents: vec![8, 9, 10, 11, 12],
            samples: 1_000_000,
            d_min: 0.125,
            d_max: 2.0,
            z_radius: 0.25,
            frame_grid: None,
            min_separation: 16.0,
            min_hits: 100,
            d_tolerance: None,
            delta_tolerance: 0.25,
            min_r2: DEFAULT_MIN_R2,
        }
    }
}

impl PairVolumeParams {
    pub(super) fn validate(&self, is: &mut Issues, _n: usize) {
        is.require(self.pairs >= 1, "pairs", "must be at least 1");
        is.exponents("delta_exponents", &self.delta_exponents, 1);
        is.require(self.samples >= 1000, "samples", "must be at least 1000");
        is.positive("d_min", self.d_min);
        is.require(self.d_max >= self.d_min, "d_max", "must be at least d_min");
        is.require(self.z_radius > 0.0 && self.z_radius < 0.5, "z_radius", "must lie in (0, 0.5)");
        if let Some(&k) = self.delta_exponents.iter().min() {
            is.require(
                self.d_min >= delta_of(k),
                "d_min",
                format!("every pair needs ‖f − g‖ >= the largest δ = {}", delta_of(k)),
            );
        }
        if let Some(g) = self.frame_grid {
            is.require(g >= 8, "frame_grid", "must be at least 8");
        }
        is.positive("min_separation", self.min_separation);
        if let Some(t) = self.d_tolerance {
            is.positive("d_tolerance", t);
        }
        is.positive("delta_tolerance", self.delta_tolerance);
        is.unit("min_r2", self.min_r2);
    }
}

struct Record {
    pair: usize,
    d: f64,
    delta: f64,
    value: f64,
}

pub(super) fn run(p: &PairVolumeParams, ctx: &Ctx, rec: &mut Recorder) -> Result<()> {
    let chart = &ctx.chart;
    let n = ctx.n();
    let m = chart.param_dim();
    let grid = p.frame_grid.unwrap_or(match m {
        1 => 512,
        2 => 64,
        3 => 16,
        _ => 8,
    });
    let table = FrameTable::new(chart, grid);
    let mut deltas: Vec<f64> = p.delta_exponents.iter().map(|&k| delta_of(k)).collect();
    deltas.sort_by(|a, b| b.total_cmp(a));
    let mut rng = rng::stream(ctx.seed_for("pairs"), 0);
    let base_seed = ctx.seed_for("volume");
    let mut records: Vec<Record> = Vec::new();
    for pair in 0..p.pairs {
        ctx.cancelled()?;
        let frac = if p.pairs == 1 { 0.5 } else { pair as f64 / (p.pairs - 1) as f64 };
        let target = p.d_min * (p.d_max / p.d_min).powf(frac);
        let x0: Vec<f64> = rng::unit_cube(&mut rng, m).into_iter().map(|v| 0.1 + 0.8 * v).collect();
        let dir = chart.sigma(&x0);
        let unit = table.c2_norm(&dir).value;
        let u = target / unit;
        let radius = p.z_radius.min(0.5 - u.abs()).max(0.0);
        let z: Vec<f64> = rng::unit_ball(&mut rng, n).into_iter().map(|v| v * radius).collect();
        let z2: Vec<f64> = z.iter().zip(&dir).map(|(a, b)| a + u * b).collect();
        let f = CinematicMap::new(chart.clone(), z)?;
        let g = CinematicMap::new(chart.clone(), z2)?;
        let d = table.c2_norm(&f.difference(&g).z().to_vec()).value;
        rec.measure(format!("d/pair{pair:03}"), None, d, None, table.len() as u64);
        let mut rows = Vec::new();
        let mut starved = false;
        for (j, &delta) in deltas.iter().enumerate() {
            let seed = base_seed.wrapping_add((pair * 64 + j) as u64);
            let v = pair_intersection_volume_with(&table, &f, &g, delta, p.samples, seed)?;
            rec.measure(format!("volume/pair{pair:03}"), Some(delta), v.value, Some(v.stderr), v.samples);
            if v.hits < p.min_hits {
                starved = true;
            }
            rows.push(Record { pair, d, delta, value: v.value });
        }
        if starved {
            rec.note(format!("pair {pair}: fewer than {} hits at some scale; pair dropped", p.min_hits));
        } else {
            records.extend(rows);
        }
    }

    let finest = deltas.last().copied().unwrap_or(f64::NAN);
    let (xd, yd): (Vec<f64>, Vec<f64>) =
        records.iter().filter(|r| r.delta == finest).map(|r| (r.d.ln(), r.value.ln())).unzip();
    let target_d = -((n - 2) as f64);
    let tol_d = p.d_tolerance.unwrap_or(if n == 3 { 0.25 } else { 0.35 });
    rec.fit("d_exponent", &xd, &yd, Some(target_d - tol_d), Some(target_d + tol_d), p.min_r2);

    let groups: Vec<Vec<(f64, f64)>> = (0..p.pairs)
        .map(|pair| {
            records
                .iter()
                .filter(|r| r.pair == pair && r.d >= p.min_separation * r.delta)
                .map(|r| (r.delta.ln(), r.value.ln()))
                .collect()
        })
        .collect();
    let (xs, ys) = centred_by_group(&groups);
    let target_delta = (2 * n - 3) as f64;
    rec.fit(
        "delta_exponent",
        &xs,
        &ys,
        Some(target_delta - p.delta_tolerance),
        Some(target_delta + p.delta_tolerance),
        p.min_r2,
    );
    rec.scalar("pairs_used", records.len() / deltas.len().max(1));
    rec.scalar("frame_grid", grid);
    Ok(())
}
