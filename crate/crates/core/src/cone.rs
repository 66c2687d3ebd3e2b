//! Cones `C_z = {z + r·Σ(x) : x ∈ [0, 1]^{n−2}, r ∈ [−1, 1]}` over the
//! hypersurface, and the lines that cross them.
//!
//! Points are matched to the cone by radial projection: `p − z` is normalised
//! and the parameter `x` maximising `±(p − z)·Σ(x)` is found by a seeded
//! Newton ascent on the chart. Along a line the signed angular defect
//! `σ q̂·ν(x*)` changes sign exactly where the line crosses the cone.

use std::f64::consts::FRAC_PI_2;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::manifold::{dist, ManifoldChart};
use crate::stats::{linear_fit, unit_ball_volume};
use crate::{grid, rng};

/// Line `t ↦ base + t·dir` for `t ∈ [t0, t1]`, with `|dir| = 1`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LineSegment {
    base: Vec<f64>,
    dir: Vec<f64>,
    t0: f64,
    t1: f64,
}

impl LineSegment {
    pub fn new(base: Vec<f64>, dir: Vec<f64>, t0: f64, t1: f64) -> Result<LineSegment> {
        if base.len() != dir.len() {
            return Err(Error::DimensionMismatch { dim: base.len() });
        }
        let norm = dir.iter().map(|v| v * v).sum::<f64>().sqrt();
        if !(norm > 0.0 && norm.is_finite()) {
            return Err(invalid("direction", "must be a non-zero finite vector"));
        }
        if !(t0 < t1) {
            return Err(invalid("range", format!("need t0 < t1, got [{t0}, {t1}]")));
        }
        let dir = dir.into_iter().map(|v| v / norm).collect();
        Ok(LineSegment { base, dir, t0, t1 })
    }

    /// The segment from `a` to `b`.
    pub fn through(a: &[f64], b: &[f64]) -> Result<LineSegment> {
        let d: Vec<f64> = b.iter().zip(a).map(|(x, y)| x - y).collect();
        let len = dist(a, b);
        LineSegment::new(a.to_vec(), d, 0.0, len)
    }

    pub fn at(&self, t: f64) -> Vec<f64> {
        self.base.iter().zip(&self.dir).map(|(b, u)| b + t * u).collect()
    }

    pub fn base(&self) -> &[f64] {
        &self.base
    }

    pub fn dir(&self) -> &[f64] {
        &self.dir
    }

    pub fn range(&self) -> (f64, f64) {
        (self.t0, self.t1)
    }

    pub fn length(&self) -> f64 {
        self.t1 - self.t0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Sides {
    /// `r ∈ [−1, 1]`.
    Two,
    /// `r ∈ [0, 1]`.
    One,
}

/// Nearest point of the cone to a query point.
#[derive(Clone, Debug, PartialEq)]
pub struct ConePoint {
    pub x: Vec<f64>,
    pub r: f64,
    pub foot: Vec<f64>,
    pub distance: f64,
}

#[derive(Clone, Debug)]
pub struct Cone {
    chart: Arc<ManifoldChart>,
    apex: Vec<f64>,
    sides: Sides,
    periodic: bool,
    seeds: Vec<(Vec<f64>, Vec<f64>)>,
}

const NEWTON_STEPS: usize = 60;
const MAX_STEP: f64 = 0.1;
/// Distance below which a bisected root is accepted as a cone point.
pub const ROOT_TOL: f64 = 1e-9;
/// Brackets laid along a line before bisection.
pub const ROOT_BRACKETS: usize = 10_000;

fn seed_grid(m: usize) -> usize {
    match m {
        1 | 2 => 64,
        3 => 16,
        _ => 8,
    }
}

impl Cone {
    /// Two-sided cone with apex `apex`.
    pub fn new(chart: Arc<ManifoldChart>, apex: Vec<f64>) -> Result<Cone> {
        Cone::with_sides(chart, apex, Sides::Two)
    }

    pub fn with_sides(chart: Arc<ManifoldChart>, apex: Vec<f64>, sides: Sides) -> Result<Cone> {
        if apex.len() != chart.n() {
            return Err(Error::DimensionMismatch { dim: chart.n() });
        }
        let m = chart.param_dim();
        let seeds = grid::cell_centres(m, seed_grid(m))
            .into_par_iter()
            .map(|x| {
                let s = chart.sigma(&x);
                (x, s)
            })
            .collect();
        let periodic = chart.is_periodic();
        Ok(Cone { chart, apex, sides, periodic, seeds })
    }

    pub fn chart(&self) -> &Arc<ManifoldChart> {
        &self.chart
    }

    pub fn apex(&self) -> &[f64] {
        &self.apex
    }

    pub fn sides(&self) -> Sides {
        self.sides
    }

    pub fn n(&self) -> usize {
        self.apex.len()
    }

    /// `z + r·Σ(x)`.
    pub fn point(&self, x: &[f64], r: f64) -> Vec<f64> {
        self.chart.sigma(x).iter().zip(&self.apex).map(|(s, z)| z + r * s).collect()
    }

    /// The generatrix `L_{z,x}` through the apex.
    pub fn generatrix(&self, x: &[f64]) -> LineSegment {
        let t0 = match self.sides {
            Sides::Two => -1.0,
            Sides::One => 0.0,
        };
        LineSegment::new(self.apex.clone(), self.chart.sigma(x), t0, 1.0).expect("unit direction")
    }

    fn r_range(&self) -> (f64, f64) {
        match self.sides {
            Sides::Two => (-1.0, 1.0),
            Sides::One => (0.0, 1.0),
        }
    }

    /// Best seed for the radial direction `w`, with the sheet sign `σ`.
    fn seed_for(&self, w: &[f64]) -> (usize, f64) {
        let (lo, hi) = self.r_range();
        let w2: f64 = w.iter().map(|v| v * v).sum();
        let mut best = (0, 1.0, f64::INFINITY);
        for (i, (_, s)) in self.seeds.iter().enumerate() {
            let proj: f64 = w.iter().zip(s).map(|(a, b)| a * b).sum();
            let r = proj.clamp(lo, hi);
            let d2 = w2 - 2.0 * r * proj + r * r;
            if d2 < best.2 {
                best = (i, if proj < 0.0 && self.sides == Sides::Two { -1.0 } else { 1.0 }, d2);
            }
        }
        (best.0, best.1)
    }

    fn objective(&self, v: &[f64], x: &[f64]) -> (f64, DVector<f64>, DMatrix<f64>) {
        let m = x.len();
        let jets = self.chart.jets(x, 2, None);
        let f = jets.sigma.iter().zip(v).map(|(j, c)| c * j.value()).sum();
        let g = DVector::from_fn(m, |i, _| jets.sigma.iter().zip(v).map(|(j, c)| c * j.partial(&[i])).sum());
        let h = DMatrix::from_fn(m, m, |i, k| jets.sigma.iter().zip(v).map(|(j, c)| c * j.partial(&[i, k])).sum());
        (f, g, h)
    }

    fn value(&self, v: &[f64], x: &[f64]) -> f64 {
        self.chart.sigma(x).iter().zip(v).map(|(s, c)| s * c).sum()
    }

    fn project(&self, x: &mut [f64]) {
        let m = x.len();
        for (i, v) in x.iter_mut().enumerate() {
            *v = if self.periodic && i + 1 == m { v.rem_euclid(1.0) } else { v.clamp(0.0, 1.0) };
        }
    }

    /// Maximises `v·Σ(x)` from `start` by projected Newton ascent.
    fn ascend(&self, v: &[f64], start: &[f64]) -> Vec<f64> {
        let m = start.len();
        let mut x = start.to_vec();
        let (mut f, mut g, mut h) = self.objective(v, &x);
        for _ in 0..NEWTON_STEPS {
            let free: Vec<usize> = (0..m)
                .filter(|&i| {
                    let wraps = self.periodic && i + 1 == m;
                    wraps || !((x[i] <= 0.0 && g[i] < 0.0) || (x[i] >= 1.0 && g[i] > 0.0))
                })
                .collect();
            if free.is_empty() {
                break;
            }
            let k = free.len();
            let neg_h = DMatrix::from_fn(k, k, |a, b| -h[(free[a], free[b])]);
            let gf = DVector::from_fn(k, |a, _| g[free[a]]);
            let step_free = match neg_h.clone().cholesky() {
                Some(ch) => ch.solve(&gf),
                None => &gf / (neg_h.norm() + 1.0),
            };
            let mut step = vec![0.0; m];
            for (a, &i) in free.iter().enumerate() {
                step[i] = step_free[a];
            }
            let longest = step.iter().fold(0.0f64, |a, b| a.max(b.abs()));
            if longest > MAX_STEP {
                step.iter_mut().for_each(|s| *s *= MAX_STEP / longest);
            }
            let mut alpha = 1.0;
            let mut next = None;
            for _ in 0..40 {
                let mut cand: Vec<f64> = x.iter().zip(&step).map(|(a, b)| a + alpha * b).collect();
                self.project(&mut cand);
                if self.value(v, &cand) >= f - 1e-15 * (1.0 + f.abs()) {
                    next = Some(cand);
                    break;
                }
                alpha *= 0.5;
            }
            let Some(cand) = next else { break };
            let moved = x.iter().zip(&cand).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            x = cand;
            (f, g, h) = self.objective(v, &x);
            if moved < 1e-15 {
                break;
            }
        }
        x
    }

    /// Nearest cone point to `p`.
    pub fn nearest(&self, p: &[f64]) -> ConePoint {
        let w: Vec<f64> = p.iter().zip(&self.apex).map(|(a, b)| a - b).collect();
        if w.iter().all(|v| *v == 0.0) {
            return ConePoint { x: self.seeds[0].0.clone(), r: 0.0, foot: self.apex.clone(), distance: 0.0 };
        }
        if let Some(sheets) = self.closed_form(&w) {
            return sheets
                .into_iter()
                .map(|(_, x)| self.foot_at(p, &w, x))
                .min_by(|a, b| a.distance.total_cmp(&b.distance))
                .expect("at least one sheet");
        }
        let (seed, sign) = self.seed_for(&w);
        let v: Vec<f64> = w.iter().map(|c| sign * c).collect();
        let x = self.ascend(&v, &self.seeds[seed].0);
        self.foot_at(p, &w, x)
    }

    /// Closed-form maximisers of `±w·Σ`, one per sheet, when the chart has them.
    fn closed_form(&self, w: &[f64]) -> Option<Vec<(f64, Vec<f64>)>> {
        let signs: &[f64] = match self.sides {
            Sides::Two => &[1.0, -1.0],
            Sides::One => &[1.0],
        };
        signs
            .iter()
            .map(|&s| {
                let v: Vec<f64> = w.iter().map(|c| s * c).collect();
                self.chart.argmax_linear(&v).map(|x| (s, x))
            })
            .collect()
    }

    fn foot_at(&self, p: &[f64], w: &[f64], x: Vec<f64>) -> ConePoint {
        let (lo, hi) = self.r_range();
        let sigma = self.chart.sigma(&x);
        let r = w.iter().zip(&sigma).map(|(a, b)| a * b).sum::<f64>().clamp(lo, hi);
        let foot: Vec<f64> = self.apex.iter().zip(&sigma).map(|(z, s)| z + r * s).collect();
        let distance = dist(p, &foot);
        ConePoint { x, r, foot, distance }
    }

    /// Basis of `T_p C_z` for `p` on the generatrix through `Σ(x)`: `Σ(x)`
    /// followed by the tangent frame of `Σ`.
    pub fn tangent_basis(&self, x: &[f64]) -> Vec<Vec<f64>> {
        let frame = self.chart.frame(x);
        let mut basis = vec![frame.sigma().to_vec()];
        for i in 0..self.chart.param_dim() {
            basis.push(frame.tangent(i).to_vec());
        }
        basis
    }
}

pub fn cone_distance(cone: &Cone, p: &[f64]) -> f64 {
    cone.nearest(p).distance
}

/// Tolerance on `cone_distance(p)` for a point to count as lying on the cone.
pub const ON_CONE_TOL: f64 = 1e-8;

/// Angle between the line and the tangent hyperplane `T_p C_z`, whose normal
/// is `ν(x)` for `p` on the generatrix through `Σ(x)`.
pub fn tangent_plane_angle(cone: &Cone, p: &[f64], line: &LineSegment) -> Result<f64> {
    if dist(p, cone.apex()) < 1e-12 {
        return Err(Error::Apex);
    }
    let near = cone.nearest(p);
    if near.distance > ON_CONE_TOL {
        return Err(invalid("p", format!("point is {:.3e} away from the cone", near.distance)));
    }
    let normal = cone.chart().normal(&near.x);
    let s: f64 = normal.iter().zip(line.dir()).map(|(a, b)| a * b).sum();
    Ok(s.abs().min(1.0).asin().clamp(0.0, FRAC_PI_2))
}

#[derive(Clone, Debug, PartialEq)]
pub struct LinePoint {
    pub t: f64,
    pub point: Vec<f64>,
    pub x: Vec<f64>,
}

/// Signed angular defect of `L(t)` from the cone, with the sheet sign and
/// the maximising parameter.
struct Defect {
    value: f64,
    sign: f64,
    x: Vec<f64>,
}

fn defect(cone: &Cone, q: &[f64], warm: Option<&Defect>) -> Option<Defect> {
    let norm = q.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm < 1e-14 {
        return None;
    }
    let unit: Vec<f64> = q.iter().map(|v| v / norm).collect();
    if let Some(sheets) = cone.closed_form(&unit) {
        let (sign, x) = sheets
            .into_iter()
            .max_by(|a, b| {
                let fa = a.0 * cone.value(&unit, &a.1);
                let fb = b.0 * cone.value(&unit, &b.1);
                fa.total_cmp(&fb)
            })
            .expect("at least one sheet");
        let normal = cone.chart().normal(&x);
        let value = unit.iter().zip(&normal).map(|(a, b)| sign * a * b).sum();
        return Some(Defect { value, sign, x });
    }
    let (seed, sign) = cone.seed_for(&unit);
    let v: Vec<f64> = unit.iter().map(|c| sign * c).collect();
    let seeded = &cone.seeds[seed];
    let seed_value: f64 = v.iter().zip(&seeded.1).map(|(a, b)| a * b).sum();
    let start = match warm {
        Some(d) if d.sign == sign && cone.value(&v, &d.x) >= seed_value => d.x.clone(),
        _ => seeded.0.clone(),
    };
    let x = cone.ascend(&v, &start);
    let normal = cone.chart().normal(&x);
    let value = v.iter().zip(&normal).map(|(a, b)| a * b).sum();
    Some(Defect { value, sign, x })
}

/// Every point where the line meets the cone.
///
/// Lines through the apex meet the cone only there unless they run along a
/// generatrix, which is reported as an error.
pub fn line_cone_points(cone: &Cone, line: &LineSegment) -> Result<Vec<LinePoint>> {
    let z = cone.apex();
    let u = line.dir();
    let q0: Vec<f64> = line.base().iter().zip(z).map(|(a, b)| a - b).collect();
    let along: f64 = q0.iter().zip(u).map(|(a, b)| a * b).sum();
    let perp = q0.iter().zip(u).map(|(a, b)| a - along * b).map(|v| v * v).sum::<f64>().sqrt();
    let (t0, t1) = line.range();
    if perp < 1e-8 {
        let probe: Vec<f64> = z.iter().zip(u).map(|(a, b)| a + 0.5 * b).collect();
        let back: Vec<f64> = z.iter().zip(u).map(|(a, b)| a - 0.5 * b).collect();
        if cone.nearest(&probe).distance < 1e-8 || cone.nearest(&back).distance < 1e-8 {
            return Err(Error::Generatrix);
        }
        let t_apex = -along;
        if (t0..=t1).contains(&t_apex) {
            let near = cone.nearest(z);
            return Ok(vec![LinePoint { t: t_apex, point: z.to_vec(), x: near.x }]);
        }
        return Ok(vec![]);
    }

    let q_at = |t: f64| -> Vec<f64> { q0.iter().zip(u).map(|(a, b)| a + t * b).collect() };
    let step = (t1 - t0) / ROOT_BRACKETS as f64;
    let mut candidates: Vec<f64> = Vec::new();
    let mut prev: Option<(f64, Defect)> = None;
    for i in 0..=ROOT_BRACKETS {
        let t = if i == ROOT_BRACKETS { t1 } else { t0 + i as f64 * step };
        let cur = defect(cone, &q_at(t), prev.as_ref().map(|p| &p.1));
        if let Some(d) = cur {
            if d.value == 0.0 {
                candidates.push(t);
            }
            if let Some((tp, dp)) = &prev {
                if dp.sign == d.sign {
                    if dp.value * d.value < 0.0 {
                        candidates.push(bisect(cone, &q_at, *tp, t, dp));
                    }
                } else {
                    candidates.extend(split_bracket(cone, &q_at, *tp, t));
                }
            }
            prev = Some((t, d));
        } else {
            prev = None;
        }
    }

    let mut out: Vec<LinePoint> = Vec::new();
    for t in candidates {
        let point = line.at(t);
        let near = cone.nearest(&point);
        if near.distance > ROOT_TOL * (1.0 + dist(&point, z)) {
            continue;
        }
        if out.iter().any(|p| (p.t - t).abs() < 1e-9) {
            continue;
        }
        out.push(LinePoint { t, point, x: near.x });
    }
    out.sort_by(|a, b| a.t.total_cmp(&b.t));
    Ok(out)
}

/// Roots inside a bracket whose ends sit on different sheets.
fn split_bracket(cone: &Cone, q_at: &dyn Fn(f64) -> Vec<f64>, a: f64, b: f64) -> Vec<f64> {
    const PIECES: usize = 64;
    let mut out = Vec::new();
    let mut prev: Option<(f64, Defect)> = None;
    for i in 0..=PIECES {
        let t = a + (b - a) * i as f64 / PIECES as f64;
        let cur = defect(cone, &q_at(t), None);
        if let (Some((tp, dp)), Some(d)) = (&prev, &cur) {
            if dp.sign == d.sign && dp.value * d.value < 0.0 {
                out.push(bisect(cone, q_at, *tp, t, dp));
            }
        }
        prev = cur.map(|d| (t, d));
    }
    out
}

fn bisect(cone: &Cone, q_at: &dyn Fn(f64) -> Vec<f64>, mut a: f64, mut b: f64, left: &Defect) -> f64 {
    let mut fa = left.value;
    let mut warm = Defect { value: left.value, sign: left.sign, x: left.x.clone() };
    while b - a > 1e-12 * (1.0 + a.abs().max(b.abs())) {
        let mid = 0.5 * (a + b);
        let Some(d) = defect(cone, &q_at(mid), Some(&warm)) else { break };
        if d.sign != warm.sign {
            break;
        }
        if (d.value < 0.0) == (fa < 0.0) {
            a = mid;
            fa = d.value;
        } else {
            b = mid;
        }
        warm = d;
    }
    0.5 * (a + b)
}

/// Monte Carlo estimate of `L^n(C_z^δ ∩ L^δ)` and the components of
/// `{t : L(t) ∈ C_z^{2δ}}`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TubeVolume {
    pub delta: f64,
    pub volume: f64,
    pub stderr: f64,
    pub hits: u64,
    pub samples: u64,
    /// Volume of the part of `L^δ` that was sampled.
    pub region: f64,
    pub components: usize,
    /// Smallest tangent-plane angle over the components, away from the apex.
    pub min_angle: Option<f64>,
    /// Set when `min_angle` falls below the declared angle `a`.
    pub angle_warning: bool,
}

/// Points closer than this multiple of `δ` to the apex are not used for
/// tangent-angle checks.
pub const APEX_FLOOR: f64 = 10.0;

const CHUNK: u64 = 4096;

/// Only the stretches of the tube whose axis passes within `2δ` of the cone
/// can meet `C_z^δ`; those are located on a `δ/4` grid along the axis, which
/// also yields the component count, and sampled uniformly.
pub fn line_cone_tube_volume(
    cone: &Cone,
    line: &LineSegment,
    delta: f64,
    samples: u64,
    angle: f64,
    seed: u64,
) -> Result<TubeVolume> {
    if !(delta > 0.0) {
        return Err(invalid("delta", format!("must be positive, got {delta}")));
    }
    if samples == 0 {
        return Err(invalid("samples", "must be positive"));
    }
    let n = cone.n();
    let (t0, t1) = line.range();
    let step = delta / 4.0;
    let steps = ((t1 - t0) / step).ceil() as usize;
    let ts: Vec<f64> = (0..=steps).map(|i| (t0 + i as f64 * step).min(t1)).collect();
    let near: Vec<ConePoint> = ts.par_iter().map(|&t| cone.nearest(&line.at(t))).collect();

    let runs = |threshold: f64| -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        let mut start = None;
        for (i, p) in near.iter().enumerate() {
            match (p.distance < threshold, start) {
                (true, None) => start = Some(i),
                (false, Some(s)) => {
                    out.push((s, i - 1));
                    start = None;
                }
                _ => {}
            }
        }
        if let Some(s) = start {
            out.push((s, near.len() - 1));
        }
        out
    };
    let components = runs(2.0 * delta);
    let mut min_angle: Option<f64> = None;
    for &(a, b) in &components {
        let best = (a..=b).min_by(|&i, &j| near[i].distance.total_cmp(&near[j].distance)).expect("non-empty run");
        let foot = &near[best].foot;
        if dist(foot, cone.apex()) < APEX_FLOOR * delta {
            continue;
        }
        let normal = cone.chart().normal(&near[best].x);
        let s: f64 = normal.iter().zip(line.dir()).map(|(p, q)| p * q).sum();
        let ang = s.abs().min(1.0).asin();
        min_angle = Some(min_angle.map_or(ang, |m| m.min(ang)));
    }

    let intervals: Vec<(f64, f64)> = runs(2.25 * delta)
        .into_iter()
        .map(|(a, b)| {
            let lo = if a == 0 { t0 - delta } else { ts[a] - step };
            let hi = if b == ts.len() - 1 { t1 + delta } else { ts[b] + step };
            (lo, hi)
        })
        .collect();
    let total: f64 = intervals.iter().map(|(a, b)| b - a).sum();
    let cross = unit_ball_volume(n - 1) * delta.powi(n as i32 - 1);
    let region = cross * total;
    let angle_warning = min_angle.is_some_and(|m| m < angle);
    if intervals.is_empty() {
        return Ok(TubeVolume {
            delta,
            volume: 0.0,
            stderr: 0.0,
            hits: 0,
            samples,
            region: 0.0,
            components: components.len(),
            min_angle,
            angle_warning,
        });
    }

    let basis = complement(line.dir());
    let chunks = samples.div_ceil(CHUNK);
    let hits: u64 = (0..chunks)
        .into_par_iter()
        .map(|c| {
            let mut rng = rng::stream(seed, c);
            let count = CHUNK.min(samples - c * CHUNK);
            let mut hits = 0;
            for _ in 0..count {
                let mut s = rand::Rng::random::<f64>(&mut rng) * total;
                let mut t = intervals[0].0;
                for &(a, b) in &intervals {
                    if s <= b - a {
                        t = a + s;
                        break;
                    }
                    s -= b - a;
                }
                let v = rng::unit_ball(&mut rng, n - 1);
                let mut y = line.at(t);
                for (coef, e) in v.iter().zip(&basis) {
                    for k in 0..n {
                        y[k] += delta * coef * e[k];
                    }
                }
                let end = if t < t0 {
                    Some(line.at(t0))
                } else if t > t1 {
                    Some(line.at(t1))
                } else {
                    None
                };
                if end.is_some_and(|e| dist(&e, &y) >= delta) {
                    continue;
                }
                if cone.nearest(&y).distance < delta {
                    hits += 1;
                }
            }
            hits
        })
        .sum();
    let p = hits as f64 / samples as f64;
    Ok(TubeVolume {
        delta,
        volume: region * p,
        stderr: region * (p * (1.0 - p) / samples as f64).sqrt(),
        hits,
        samples,
        region,
        components: components.len(),
        min_angle,
        angle_warning,
    })
}

/// Number of connected runs of `{t : L(t) ∈ C_z^{2δ}}` on a `δ/4` grid.
pub fn tube_components(cone: &Cone, line: &LineSegment, delta: f64) -> Result<usize> {
    if !(delta > 0.0) {
        return Err(invalid("delta", format!("must be positive, got {delta}")));
    }
    let (t0, t1) = line.range();
    let step = delta / 4.0;
    let steps = ((t1 - t0) / step).ceil() as usize;
    let inside: Vec<bool> = (0..=steps)
        .into_par_iter()
        .map(|i| cone.nearest(&line.at((t0 + i as f64 * step).min(t1))).distance < 2.0 * delta)
        .collect();
    Ok(inside.iter().zip(std::iter::once(&false).chain(inside.iter())).filter(|(cur, prev)| **cur && !**prev).count())
}

/// Orthonormal basis of the complement of the unit vector `u`.
pub fn complement(u: &[f64]) -> Vec<Vec<f64>> {
    let n = u.len();
    let mut basis: Vec<Vec<f64>> = vec![u.to_vec()];
    for k in 0..n {
        let mut v = vec![0.0; n];
        v[k] = 1.0;
        for b in &basis {
            let c: f64 = v.iter().zip(b).map(|(a, b)| a * b).sum();
            v.iter_mut().zip(b).for_each(|(a, b)| *a -= c * b);
        }
        let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        if norm > 1e-6 {
            basis.push(v.into_iter().map(|a| a / norm).collect());
        }
        if basis.len() == n {
            break;
        }
    }
    basis.remove(0);
    basis
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradientBound {
    pub max_gradient: f64,
    /// `a / 10`.
    pub target: f64,
    pub passed: bool,
    /// Further halvings of the piece expected to reach the target.
    pub extra_depth: u32,
}

/// Largest normal angle, in radians, for which the cone over a piece is
/// accepted as a graph.
pub const GRAPH_ANGLE_LIMIT: f64 = std::f64::consts::FRAC_PI_4;

/// Steepness of the cone over `piece` written as a graph `h` over the
/// tangent hyperplane of the generatrix through the piece's centre.
///
/// The graph has normal `ν(x)` at points of the generatrix through `Σ(x)`, so
/// `|∇h| = tan ∠(ν(x), ν(x₀))`, which vanishes on the chosen generatrix.
pub fn graph_gradient_bound(cone: &Cone, piece: &ManifoldChart, a: f64) -> Result<GradientBound> {
    if piece.n() != cone.n() {
        return Err(Error::DimensionMismatch { dim: cone.n() });
    }
    let m = piece.param_dim();
    let centre = vec![0.5; m];
    let nu0 = piece.normal(&centre);
    let mut max_gradient = 0.0f64;
    for x in grid::nodes(m, 16) {
        let nu = piece.normal(&x);
        let c: f64 = nu.iter().zip(&nu0).map(|(p, q)| p * q).sum();
        let angle = c.clamp(-1.0, 1.0).acos();
        if angle >= GRAPH_ANGLE_LIMIT {
            return Err(Error::NotAGraph { angle, limit: GRAPH_ANGLE_LIMIT, at: x });
        }
        max_gradient = max_gradient.max(angle.tan());
    }
    let target = a / 10.0;
    let passed = max_gradient <= target;
    let extra_depth = if passed { 0 } else { (max_gradient / target).log2().ceil() as u32 };
    Ok(GradientBound { max_gradient, target, passed, extra_depth })
}

/// Subdivides the chart until every piece passes [`graph_gradient_bound`];
/// returns the depth and the largest gradient over the pieces.
pub fn subdivide_until_graph(cone: &Cone, a: f64, max_depth: u32) -> Result<(u32, f64)> {
    let mut depth = 0;
    while depth <= max_depth {
        let pieces = cone.chart().subdivide(depth);
        let bounds: Result<Vec<GradientBound>> =
            pieces.par_iter().map(|p| graph_gradient_bound(cone, p, a)).collect();
        match bounds {
            Ok(b) if b.iter().all(|g| g.passed) => {
                return Ok((depth, b.iter().map(|g| g.max_gradient).fold(0.0, f64::max)));
            }
            Ok(b) => {
                let extra = b.iter().map(|g| g.extra_depth).max().unwrap_or(1).max(1);
                depth += extra;
            }
            Err(Error::NotAGraph { .. }) => depth += 1,
            Err(e) => return Err(e),
        }
    }
    Err(invalid("max_depth", format!("no subdivision up to depth {max_depth} meets the gradient target")))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum TangencyLocus {
    /// Isolated solutions of `ν(x)·y = 0` for `n = 3`.
    Points { points: Vec<Vec<f64>> },
    /// Cells of side `2^{−j}` meeting the solution set, `j = 0..=log₂ grid`.
    Profile { scales: Vec<u32>, counts: Vec<usize>, slope: f64 },
}

/// The set `Λ_y = {x : ν(x)·y = 0}` of parameters whose tangent hyperplane
/// contains `y`.
pub fn tangency_locus(cone: &Cone, y: &[f64], grid_size: usize) -> Result<TangencyLocus> {
    let chart = cone.chart();
    if y.len() != chart.n() {
        return Err(Error::DimensionMismatch { dim: chart.n() });
    }
    let norm = y.iter().map(|v| v * v).sum::<f64>().sqrt();
    if (norm - 1.0).abs() > 1e-9 {
        return Err(invalid("y", "must be a unit vector"));
    }
    if grid_size < 2 {
        return Err(invalid("grid", "need at least two cells per axis"));
    }
    let m = chart.param_dim();
    let f = |x: &[f64]| -> f64 { chart.normal(x).iter().zip(y).map(|(a, b)| a * b).sum() };
    if m == 1 {
        let values: Vec<f64> = (0..=grid_size).map(|i| f(&[i as f64 / grid_size as f64])).collect();
        let mut points = Vec::new();
        for i in 0..grid_size {
            let (a, b) = (i as f64 / grid_size as f64, (i + 1) as f64 / grid_size as f64);
            if values[i] == 0.0 {
                points.push(vec![a]);
            } else if values[i] * values[i + 1] < 0.0 {
                let (mut lo, mut hi, mut flo) = (a, b, values[i]);
                for _ in 0..60 {
                    let mid = 0.5 * (lo + hi);
                    let fm = f(&[mid]);
                    if (fm < 0.0) == (flo < 0.0) {
                        lo = mid;
                        flo = fm;
                    } else {
                        hi = mid;
                    }
                }
                points.push(vec![0.5 * (lo + hi)]);
            }
        }
        if values[grid_size] == 0.0 && !chart.is_periodic() {
            points.push(vec![1.0]);
        }
        return Ok(TangencyLocus::Points { points });
    }
    if !grid_size.is_power_of_two() {
        return Err(invalid("grid", "must be a power of two for n >= 4"));
    }
    let per = grid_size + 1;
    let values: Vec<f64> = grid::nodes(m, grid_size).par_iter().map(|x| f(x)).collect();
    let levels = grid_size.trailing_zeros();
    let mut marked: Vec<Vec<usize>> = Vec::new();
    for cell in 0..grid_size.pow(m as u32) {
        let mut idx = vec![0usize; m];
        let mut rest = cell;
        for axis in (0..m).rev() {
            idx[axis] = rest % grid_size;
            rest /= grid_size;
        }
        let (mut neg, mut pos) = (false, false);
        for corner in 0..1usize << m {
            let mut flat = 0;
            for axis in 0..m {
                flat = flat * per + idx[axis] + ((corner >> axis) & 1);
            }
            let v = values[flat];
            neg |= v <= 0.0;
            pos |= v >= 0.0;
        }
        if neg && pos {
            marked.push(idx);
        }
    }
    let mut scales = Vec::new();
    let mut counts = Vec::new();
    for j in 0..=levels {
        let mut coarse: Vec<Vec<usize>> =
            marked.iter().map(|c| c.iter().map(|v| v >> (levels - j)).collect()).collect();
        coarse.sort_unstable();
        coarse.dedup();
        scales.push(j);
        counts.push(coarse.len());
    }
    // Slope over the finer half of the scales, where the locus is resolved.
    let from = (levels / 2) as usize;
    let x: Vec<f64> = scales[from..].iter().map(|&j| j as f64).collect();
    let yv: Vec<f64> = counts[from..].iter().map(|&c| (c.max(1) as f64).log2()).collect();
    let slope = if counts.iter().all(|&c| c == 0) { 0.0 } else { linear_fit(&x, &yv).map_or(0.0, |f| f.slope) };
    Ok(TangencyLocus::Profile { scales, counts, slope })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn cap_cone(n: usize) -> Cone {
        Cone::new(Arc::new(ManifoldChart::cap(n, 0.6).unwrap()), vec![0.0; n]).unwrap()
    }

    #[test]
    fn generatrix_points_are_on_the_cone() {
        let cone = cap_cone(3);
        assert!(cone_distance(&cone, &[0.4, 0.0, 0.3]) < 1e-12);
        assert_eq!(cone_distance(&cone, &[0.0; 3]), 0.0);
        for &(x, r) in &[(0.1, 0.7), (0.999, -0.4), (0.5, 1.0), (0.0, -1.0)] {
            let p = cone.point(&[x], r);
            assert!(cone_distance(&cone, &p) < 1e-12, "{x} {r}");
        }
    }

    #[test]
    fn off_cone_distance_matches_the_generatrix_angle() {
        // The nearest generatrix is the θ = 0 one, direction (0.8, 0, 0.6).
        let cone = cap_cone(3);
        let p = [0.4, 0.0, 0.5];
        let norm = (0.41f64).sqrt();
        let cos = (0.4 * 0.8 + 0.5 * 0.6) / norm;
        let expected = norm * (1.0 - cos * cos).sqrt();
        assert_abs_diff_eq!(cone_distance(&cone, &p), expected, epsilon = 1e-12);
    }

    #[test]
    fn vertical_line_angle() {
        let cone = cap_cone(3);
        let line = LineSegment::new(vec![0.4, 0.0, 0.0], vec![0.0, 0.0, 1.0], -1.0, 1.0).unwrap();
        let a = tangent_plane_angle(&cone, &[0.4, 0.0, 0.3], &line).unwrap();
        assert_abs_diff_eq!(a, 0.8f64.asin(), epsilon = 1e-10);
        let along = cone.generatrix(&[0.0]);
        assert_abs_diff_eq!(tangent_plane_angle(&cone, &[0.4, 0.0, 0.3], &along).unwrap(), 0.0, epsilon = 1e-10);
        assert!(matches!(tangent_plane_angle(&cone, &[0.0; 3], &line), Err(Error::Apex)));
    }

    #[test]
    fn horizontal_line_meets_both_sides() {
        let cone = cap_cone(3);
        let line = LineSegment::new(vec![0.0, 0.0, 0.3], vec![1.0, 0.0, 0.0], -1.0, 1.0).unwrap();
        let pts = line_cone_points(&cone, &line).unwrap();
        assert_eq!(pts.len(), 2);
        assert_abs_diff_eq!(pts[0].t, -0.4, epsilon = 1e-10);
        assert_abs_diff_eq!(pts[1].t, 0.4, epsilon = 1e-10);
        let far = LineSegment::new(vec![0.0, 0.0, 0.3], vec![0.0, 1.0, 0.0], -0.1, 0.1).unwrap();
        assert!(line_cone_points(&cone, &far).unwrap().is_empty());
        assert!(matches!(line_cone_points(&cone, &cone.generatrix(&[0.3])), Err(Error::Generatrix)));
    }

    #[test]
    fn small_piece_is_nearly_flat() {
        let cone = cap_cone(3);
        // Angular radius 0.01 rad of the image, whose speed is 0.8·2π.
        let width = 0.02 / (0.8 * 2.0 * std::f64::consts::PI);
        let piece = cone.chart().restrict(&[0.3], width);
        let g = graph_gradient_bound(&cone, &piece, 0.3).unwrap();
        assert!(g.passed && g.max_gradient <= 0.03, "{g:?}");
        assert!(graph_gradient_bound(&cone, cone.chart(), 0.3).is_err());
        let (depth, max) = subdivide_until_graph(&cone, 0.3, 16).unwrap();
        assert!(depth > 0 && max <= 0.03);
    }

    #[test]
    fn tangency_locus_of_axis_is_empty() {
        let cone = cap_cone(3);
        match tangency_locus(&cone, &[0.0, 0.0, 1.0], 512).unwrap() {
            TangencyLocus::Points { points } => assert!(points.is_empty()),
            other => panic!("{other:?}"),
        }
        let y = [0.6, 0.0, 0.8];
        match tangency_locus(&cone, &y, 512).unwrap() {
            TangencyLocus::Points { points } => assert!(points.len() <= 2),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn complement_is_orthonormal() {
        let u = [0.6, 0.0, 0.8, 0.0];
        let b = complement(&u);
        assert_eq!(b.len(), 3);
        for (i, e) in b.iter().enumerate() {
            assert_abs_diff_eq!(e.iter().zip(&u).map(|(a, b)| a * b).sum::<f64>(), 0.0, epsilon = 1e-14);
            for (j, f) in b.iter().enumerate() {
                let d: f64 = e.iter().zip(f).map(|(a, b)| a * b).sum();
                assert_abs_diff_eq!(d, if i == j { 1.0 } else { 0.0 }, epsilon = 1e-14);
            }
        }
    }
}
