//! Cinematic and bilipschitz constants of the family `{f_z}`.

use serde::{Deserialize, Serialize};

use super::{Ctx, Issues, Recorder};
use crate::error::Result;
use crate::projmap::cinematic_report;
use crate::rng;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CinematicParams {
    /// Random pairs `(z, z')` drawn uniformly from `B(o, z_radius)`.
    pub pairs: usize,
    pub z_radius: f64,
    /// Grid points per parameter axis; the run is repeated at twice this.
    pub x_grid: usize,
    /// Largest accepted `bilipschitz_hi / bilipschitz_lo`.
    pub max_spread: f64,
    /// Largest accepted relative change of `K` under grid doubling.
    pub k_stability: f64,
}

impl Default for CinematicParams {
    fn default() -> Self {
        CinematicParams { pairs: 2000, z_radius: 0.5, x_grid: 256, max_spread: 50.0, k_stability: 0.2 }
    }
}

impl CinematicParams {
    pub(super) fn validate(&self, is: &mut Issues, n: usize) {
        is.require(self.pairs >= 1, "pairs", "must be at least 1");
        is.require(self.z_radius > 0.0 && self.z_radius <= 0.5, "z_radius", format!("must lie in (0, 0.5], got {}", self.z_radius));
        is.require(self.x_grid >= 8, "x_grid", "must be at least 8");
        let points = (2.0 * self.x_grid as f64).powi(n as i32 - 2);
        is.require(points <= 4e6, "x_grid", format!("the doubled grid has {points:.2e} points, above 4e6"));
        is.positive("max_spread", self.max_spread);
        is.positive("k_stability", self.k_stability);
    }
}

pub(super) fn run(p: &CinematicParams, ctx: &Ctx, rec: &mut Recorder) -> Result<()> {
    let n = ctx.n();
    let mut rng = rng::stream(ctx.seed_for("pairs"), 0);
    let pairs: Vec<(Vec<f64>, Vec<f64>)> = (0..p.pairs)
        .map(|_| {
            let a = rng::unit_ball(&mut rng, n).into_iter().map(|v| v * p.z_radius).collect();
            let b = rng::unit_ball(&mut rng, n).into_iter().map(|v| v * p.z_radius).collect();
            (a, b)
        })
        .collect();
    let coarse = cinematic_report(&ctx.chart, &pairs, p.x_grid, ctx.cancel_flag())?;
    ctx.cancelled()?;
    let fine = cinematic_report(&ctx.chart, &pairs, 2 * p.x_grid, ctx.cancel_flag())?;
    for (grid, r) in [(p.x_grid, &coarse), (2 * p.x_grid, &fine)] {
        let samples = r.samples as u64;
        let tag = format!("grid{grid}");
        rec.measure(format!("k_est/{tag}"), None, r.k_est, None, samples);
        rec.measure(format!("min_ratio/{tag}"), None, r.min_ratio, None, samples);
        rec.measure(format!("bilipschitz_lo/{tag}"), None, r.bilipschitz_lo, None, samples);
        rec.measure(format!("bilipschitz_hi/{tag}"), None, r.bilipschitz_hi, None, samples);
        rec.measure(format!("c2_lo/{tag}"), None, r.c2_lo, None, samples);
        rec.measure(format!("c2_hi/{tag}"), None, r.c2_hi, None, samples);
    }
    rec.scalar("k_est", fine.k_est);
    rec.scalar("k_est_coarse", coarse.k_est);
    rec.scalar("k_ball", fine.k_ball);
    rec.scalar("d_est", fine.d_est);
    rec.scalar("bilipschitz_lo", fine.bilipschitz_lo);
    rec.scalar("bilipschitz_hi", fine.bilipschitz_hi);
    rec.scalar("c2_lo", fine.c2_lo);
    rec.scalar("c2_hi", fine.c2_hi);
    rec.scalar("min_sampled_ratio", fine.min_sampled_ratio);

    let positive = coarse.min_ratio.min(fine.min_ratio);
    rec.check("min_certified_ratio", positive, "> 0", positive > 0.0);
    let spread = fine.bilipschitz_hi / fine.bilipschitz_lo;
    rec.check("bilipschitz_spread", spread, format!("< {}", p.max_spread), fine.bilipschitz_lo > 0.0 && spread < p.max_spread);
    let change = (fine.k_est / coarse.k_est - 1.0).abs();
    rec.check_le("k_relative_change", change, p.k_stability);
    Ok(())
}
