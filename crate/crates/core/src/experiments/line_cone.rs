//! Lines against the cone `C_z`: tube volumes, intersection points and
//! tube components.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{centred_by_group, delta_of, quantile, Ctx, Issues, Recorder, DEFAULT_MIN_R2};
use crate::cone::{line_cone_points, line_cone_tube_volume, tangent_plane_angle, tube_components, Cone, LineSegment};
use crate::error::{Error, Result};
use crate::manifold::dist;
use crate::rng::{self, StreamRng};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ConeIncidenceParams {
    /// Apex of the cone; the origin by default.
    pub apex: Option<Vec<f64>>,
    /// Transversal lines whose every crossing makes an angle `>= angle`.
    pub lines: usize,
    pub angle: f64,
    pub delta_exponents: Vec<u32>,
    /// Monte Carlo samples per line and scale.
    pub samples: u64,
    pub line_length: f64,
    /// Transversal lines pass through `z + r Σ(x)` with `|r|` in this range.
    pub radius_range: [f64; 2],
    /// Lines must stay this far from the apex.
    pub apex_clearance: f64,
    /// Angles `a` for which the largest `volume / δ^n` is reported; angles
    /// below `angle` get `spread_lines` extra lines each.
    pub spread_angles: Vec<f64>,
    pub spread_lines: usize,
    /// Largest accepted `max / min` of `volume / δ^n` along one line.
    pub line_spread_limit: f64,
    /// Random lines of length `random_length` centred in `B(o, 1/2)` that meet
    /// the cone; checked for crossing and component counts.
    pub random_lines: usize,
    pub random_length: f64,
    /// Scale of the component count on random lines.
    pub component_exponent: u32,
    pub max_points: usize,
    pub max_components: usize,
    pub exponent_tolerance: f64,
    pub min_r2: f64,
    /// Candidate lines tried per accepted line before giving up.
    pub max_attempts: usize,
}

impl Default for ConeIncidenceParams {
    fn default() -> Self {
        ConeIncidenceParams {
            apex: None,
            lines: 200,
            angle: 0.3,
            delta_exponents: vec![6, 7, 8, 9, 10],
            samples: 20_000,
            line_length: 0.5,
            radius_range: [0.3, 0.8],
            apex_clearance: 0.05,
            spread_angles: vec![0.1, 0.2, 0.3],
            spread_lines: 40,
            line_spread_limit: 4.0,
            random_lines: 1000,
            random_length: 2.0,
            component_exponent: 8,
            max_points: 2,
            max_components: 2,
            exponent_tolerance: 0.3,
            min_r2: DEFAULT_MIN_R2,
            max_attempts: 1000,
        }
    }
}

impl ConeIncidenceParams {
    pub(super) fn validate(&self, is: &mut Issues, n: usize) {
        if let Some(a) = &self.apex {
            is.require(a.len() == n, "apex", format!("needs {n} coordinates"));
        }
        is.require(self.lines >= 1, "lines", "must be at least 1");
        is.require(self.angle > 0.0 && self.angle < std::f64::consts::FRAC_PI_2, "angle", "must lie in (0, π/2)");
        is.exponents("delta_exponents", &self.delta_exponents, 1);
        is.require(self.samples >= 100, "samples", "must be at least 100");
        is.positive("line_length", self.line_length);
        let [lo, hi] = self.radius_range;
        is.require(lo > 0.0 && lo <= hi && hi <= 1.0, "radius_range", "needs 0 < lo <= hi <= 1");
        is.require(self.apex_clearance >= 0.0, "apex_clearance", "must be >= 0");
        is.require(
            self.spread_angles.iter().all(|a| *a > 0.0 && *a < std::f64::consts::FRAC_PI_2),
            "spread_angles",
            "angles must lie in (0, π/2)",
        );
        is.positive("line_spread_limit", self.line_spread_limit);
        is.positive("random_length", self.random_length);
        is.require((1..=30).contains(&self.component_exponent), "component_exponent", "must lie in [1, 30]");
        is.positive("exponent_tolerance", self.exponent_tolerance);
        is.unit("min_r2", self.min_r2);
        is.require(self.max_attempts >= 1, "max_attempts", "must be at least 1");
    }
}

/// A line through a random cone point whose crossings are all at least
/// `min_angle` from tangency, with crossings clear of the segment ends.
fn transversal_line(cone: &Cone, p: &ConeIncidenceParams, rng: &mut StreamRng, min_angle: f64, widest: f64) -> Result<Option<(LineSegment, f64)>> {
    let n = cone.n();
    let m = n - 2;
    let x = rng::unit_cube(rng, m);
    let sign = if rng.random::<bool>() { 1.0 } else { -1.0 };
    let r = sign * (p.radius_range[0] + (p.radius_range[1] - p.radius_range[0]) * rng.random::<f64>());
    let centre = cone.point(&x, r);
    let u = rng::unit_sphere(rng, n);
    let len = p.line_length;
    let base: Vec<f64> = centre.iter().zip(&u).map(|(c, v)| c - 0.5 * len * v).collect();
    let line = LineSegment::new(base, u, 0.0, len)?;
    if segment_distance(&line, cone.apex()) < p.apex_clearance {
        return Ok(None);
    }
    let points = match line_cone_points(cone, &line) {
        Ok(pts) => pts,
        Err(Error::Generatrix) => return Ok(None),
        Err(e) => return Err(e),
    };
    let mut worst = f64::INFINITY;
    for pt in &points {
        let angle = match tangent_plane_angle(cone, &pt.point, &line) {
            Ok(a) => a,
            Err(Error::Apex) => return Ok(None),
            Err(e) => return Err(e),
        };
        let margin = 2.0 * widest / angle.sin().max(1e-12) + widest;
        if pt.t < margin || pt.t > len - margin {
            return Ok(None);
        }
        worst = worst.min(angle);
    }
    if points.is_empty() || worst < min_angle {
        return Ok(None);
    }
    Ok(Some((line, worst)))
}

fn segment_distance(line: &LineSegment, p: &[f64]) -> f64 {
    let (t0, t1) = line.range();
    let rel: Vec<f64> = p.iter().zip(line.base()).map(|(a, b)| a - b).collect();
    let t = rel.iter().zip(line.dir()).map(|(a, b)| a * b).sum::<f64>().clamp(t0, t1);
    dist(&line.at(t), p)
}

struct LineResult {
    angle: f64,
    /// `(δ, volume)` per scale.
    volumes: Vec<(f64, f64, f64, u64)>,
    components: Vec<usize>,
    warnings: usize,
}

fn measure_line(cone: &Cone, line: &LineSegment, angle: f64, deltas: &[f64], p: &ConeIncidenceParams, seed: u64) -> Result<LineResult> {
    let mut volumes = Vec::new();
    let mut components = Vec::new();
    let mut warnings = 0;
    for (j, &delta) in deltas.iter().enumerate() {
        let tv = line_cone_tube_volume(cone, line, delta, p.samples, p.angle.min(angle), seed.wrapping_add(j as u64))?;
        volumes.push((delta, tv.volume, tv.stderr, tv.samples));
        components.push(tv.components);
        if tv.angle_warning {
            warnings += 1;
        }
    }
    Ok(LineResult { angle, volumes, components, warnings })
}

pub(super) fn run(p: &ConeIncidenceParams, ctx: &Ctx, rec: &mut Recorder) -> Result<()> {
    let n = ctx.n();
    let apex = p.apex.clone().unwrap_or_else(|| vec![0.0; n]);
    let cone = Cone::new(ctx.chart.clone(), apex)?;
    let mut deltas: Vec<f64> = p.delta_exponents.iter().map(|&k| delta_of(k)).collect();
    deltas.sort_by(|a, b| b.total_cmp(a));
    let widest = deltas[0];

    // Line groups: the main group at `angle`, then one per smaller spread angle.
    let mut groups: Vec<(f64, usize)> = vec![(p.angle, p.lines)];
    let mut extra: Vec<f64> = p.spread_angles.iter().copied().filter(|a| *a < p.angle).collect();
    extra.sort_by(f64::total_cmp);
    extra.dedup();
    groups.extend(extra.iter().map(|&a| (a, p.spread_lines)));

    let mut results: Vec<(usize, LineResult)> = Vec::new();
    for (g, &(min_angle, count)) in groups.iter().enumerate() {
        let mut rng = rng::stream(ctx.seed_for("transversal"), g as u64);
        let mut lines = Vec::with_capacity(count);
        let mut attempts = 0usize;
        while lines.len() < count {
            ctx.cancelled()?;
            if attempts >= p.max_attempts * count {
                rec.inconclusive(format!("only {} of {count} lines with angle >= {min_angle} found", lines.len()));
                break;
            }
            attempts += 1;
            if let Some(found) = transversal_line(&cone, p, &mut rng, min_angle, widest)? {
                lines.push(found);
            }
        }
        let seed = ctx.seed_for("tube").wrapping_add((g as u64) << 32);
        let measured: Result<Vec<LineResult>> = lines
            .par_iter()
            .enumerate()
            .map(|(i, (line, angle))| {
                ctx.cancelled()?;
                measure_line(&cone, line, *angle, &deltas, p, seed.wrapping_add((i as u64) << 8))
            })
            .collect();
        results.extend(measured?.into_iter().map(|r| (g, r)));
        rec.scalar(format!("attempts/group{g}"), attempts);
    }

    let nf = n as f64;
    let mut per_line_slopes = Vec::new();
    let mut fit_groups = Vec::new();
    let mut worst_spread = 1.0f64;
    let mut max_components = 0usize;
    let mut warnings = 0usize;
    let mut per_line_max: Vec<(f64, f64)> = Vec::new();
    let mut main_ratios: Vec<f64> = Vec::new();
    for (i, (g, r)) in results.iter().enumerate() {
        let tag = format!("volume/g{g}line{i:04}");
        for &(delta, v, se, s) in &r.volumes {
            rec.measure(tag.clone(), Some(delta), v, Some(se), s);
        }
        warnings += r.warnings;
        max_components = max_components.max(r.components.iter().copied().max().unwrap_or(0));
        if r.volumes.iter().any(|v| v.1 <= 0.0) {
            rec.note(format!("line {i}: empty tube intersection at some scale"));
            continue;
        }
        let ratios: Vec<f64> = r.volumes.iter().map(|&(d, v, _, _)| v / d.powf(nf)).collect();
        let hi = ratios.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lo = ratios.iter().copied().fold(f64::INFINITY, f64::min);
        per_line_max.push((r.angle, hi));
        if *g == 0 {
            worst_spread = worst_spread.max(hi / lo);
            main_ratios.extend(ratios);
            let pts: Vec<(f64, f64)> = r.volumes.iter().map(|&(d, v, _, _)| (d.ln(), v.ln())).collect();
            if pts.len() >= 2 {
                let (x, y): (Vec<f64>, Vec<f64>) = pts.iter().copied().unzip();
                if let Some(f) = crate::stats::linear_fit(&x, &y) {
                    per_line_slopes.push(f.slope);
                }
            }
            fit_groups.push(pts);
        }
    }
    let (xs, ys) = centred_by_group(&fit_groups);
    rec.fit(
        "delta_exponent",
        &xs,
        &ys,
        Some(nf - p.exponent_tolerance),
        Some(nf + p.exponent_tolerance),
        p.min_r2,
    );
    per_line_slopes.sort_by(f64::total_cmp);
    if !per_line_slopes.is_empty() {
        rec.scalar("line_slope_min", per_line_slopes[0]);
        rec.scalar("line_slope_median", quantile(&per_line_slopes, 0.5));
        rec.scalar("line_slope_max", per_line_slopes[per_line_slopes.len() - 1]);
    }
    main_ratios.sort_by(f64::total_cmp);
    if !main_ratios.is_empty() {
        rec.scalar("v_lo", main_ratios[0]);
        rec.scalar("v_hi", main_ratios[main_ratios.len() - 1]);
    }
    let mut spread_angles = p.spread_angles.clone();
    spread_angles.sort_by(f64::total_cmp);
    for a in spread_angles {
        let v = per_line_max.iter().filter(|(angle, _)| *angle >= a).map(|(_, v)| *v).fold(f64::NEG_INFINITY, f64::max);
        let lines = per_line_max.iter().filter(|(angle, _)| *angle >= a).count();
        if lines > 0 {
            rec.scalar(format!("v_hi/a={a}"), v);
            rec.measure(format!("v_hi/a={a}"), None, v, None, lines as u64);
        }
    }
    rec.check_le("line_volume_spread", worst_spread, p.line_spread_limit);
    rec.check_le("transversal_components", max_components as f64, p.max_components as f64);
    rec.scalar("angle_warnings", warnings);
    rec.scalar("transversal_lines", results.len());

    // Random lines meeting the cone.
    let delta_c = delta_of(p.component_exponent);
    let mut rng = rng::stream(ctx.seed_for("random-lines"), 0);
    let mut counts: Vec<(usize, usize)> = Vec::with_capacity(p.random_lines);
    let mut tried = 0usize;
    while counts.len() < p.random_lines && tried < p.max_attempts * p.random_lines.max(1) {
        ctx.cancelled()?;
        let batch = 2 * (p.random_lines - counts.len()) + 16;
        let mut lines = Vec::with_capacity(batch);
        for _ in 0..batch {
            let centre: Vec<f64> = rng::unit_ball(&mut rng, n).into_iter().map(|v| 0.5 * v).collect();
            let u = rng::unit_sphere(&mut rng, n);
            let half = 0.5 * p.random_length;
            let base: Vec<f64> = centre.iter().zip(&u).map(|(c, v)| c - half * v).collect();
            lines.push(LineSegment::new(base, u, 0.0, p.random_length)?);
        }
        tried += batch;
        let found: Result<Vec<Option<(usize, usize)>>> = lines
            .par_iter()
            .map(|line| {
                let points = match line_cone_points(&cone, line) {
                    Ok(pts) => pts,
                    Err(Error::Generatrix) => return Ok(None),
                    Err(e) => return Err(e),
                };
                if points.is_empty() {
                    return Ok(None);
                }
                Ok(Some((points.len(), tube_components(&cone, line, delta_c)?)))
            })
            .collect();
        for hit in found?.into_iter().flatten() {
            if counts.len() < p.random_lines {
                counts.push(hit);
            }
        }
    }
    let mut histogram = [0usize; 4];
    let mut point_violations = 0;
    let mut component_violations = 0;
    let mut worst_components = 0;
    for &(pts, comps) in &counts {
        histogram[pts.min(3)] += 1;
        if pts > p.max_points {
            point_violations += 1;
        }
        if comps > p.max_components {
            component_violations += 1;
        }
        worst_components = worst_components.max(comps);
    }
    rec.scalar("random_lines_hitting", counts.len());
    rec.scalar("random_lines_tried", tried);
    rec.scalar("points_histogram", histogram);
    rec.scalar("random_max_components", worst_components);
    rec.check_le("point_violations", point_violations as f64, 0.0);
    rec.check_le("component_violations", component_violations as f64, 0.0);
    if counts.len() < p.random_lines {
        rec.inconclusive(format!("only {} of {} random lines met the cone", counts.len(), p.random_lines));
    }
    Ok(())
}
