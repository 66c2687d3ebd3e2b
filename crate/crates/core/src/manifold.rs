//! Charts of strictly convex hypersurfaces of the unit sphere `S^{n-1} ⊂ R^n`.
//!
//! A chart maps the parameter cube `[0, 1]^{n-2}` into the sphere. Caps use a
//! hyperspherical parametrisation of the cap's boundary sphere; the polar
//! angles keep a margin of `π/6` from the poles and the last angle is periodic.
//! Every chart carries a unit normal `ν` tangent to the sphere, oriented so
//! that the second fundamental form `B_ij = ν · ∂_ij Σ` is positive definite.

use std::f64::consts::PI;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::taylor::{self, Jet};
use crate::{grid, rng};

/// Largest supported ambient dimension `n`.
pub const MAX_AMBIENT: usize = 6;
/// Largest supported parameter dimension `n − 2`.
pub const MAX_PARAM: usize = MAX_AMBIENT - 2;
/// Distance kept between polar angles and the poles.
pub const POLAR_MARGIN: f64 = PI / 6.0;

const DEGENERATE_TOL: f64 = 1e-10;
const PREFLIGHT_GRID: usize = 16;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum ChartSpec {
    Cap { n: usize, c: f64 },
    PerturbedCap { n: usize, c: f64, amplitude: f64, frequency: f64 },
}

impl ChartSpec {
    pub fn build(&self) -> Result<ManifoldChart> {
        match *self {
            ChartSpec::Cap { n, c } => ManifoldChart::cap(n, c),
            ChartSpec::PerturbedCap { n, c, amplitude, frequency } => {
                ManifoldChart::perturbed_cap(n, c, amplitude, frequency)
            }
        }
    }

    pub fn n(&self) -> usize {
        match *self {
            ChartSpec::Cap { n, .. } | ChartSpec::PerturbedCap { n, .. } => n,
        }
    }
}

#[derive(Clone, Debug)]
enum Shape {
    /// `Σ(u) = (radial · ω(u), height)`.
    Spherical { radial: f64, height: f64 },
    /// A cap pushed along its normal by `amplitude · sin(2π · frequency · u₁)`
    /// and renormalised onto the sphere.
    Perturbed { c: f64, amplitude: f64, frequency: f64, sign: f64 },
    /// Gauss map of the inner chart, parametrised by the inner chart's own
    /// local coordinates.
    Dual(Arc<ManifoldChart>),
}

#[derive(Clone, Debug)]
pub struct ManifoldChart {
    n: usize,
    shape: Shape,
    lo: Vec<f64>,
    width: f64,
    m_sigma: f64,
}

/// Position, normalised tangent frame and normal at one parameter point.
#[derive(Clone, Copy, Debug)]
pub struct Frame {
    n: usize,
    m_sigma: f64,
    sigma: [f64; MAX_AMBIENT],
    tangents: [[f64; MAX_AMBIENT]; MAX_PARAM],
    normal: [f64; MAX_AMBIENT],
}

impl Frame {
    pub fn n(&self) -> usize {
        self.n
    }

    pub fn sigma(&self) -> &[f64] {
        &self.sigma[..self.n]
    }

    /// `e_i = ∂_i Σ / M_Σ`.
    pub fn tangent(&self, i: usize) -> &[f64] {
        &self.tangents[i][..self.n]
    }

    pub fn normal(&self) -> &[f64] {
        &self.normal[..self.n]
    }

    /// Normal of the dual hypersurface, which is `Σ` itself.
    pub fn dual_normal(&self) -> &[f64] {
        self.sigma()
    }

    pub fn m_sigma(&self) -> f64 {
        self.m_sigma
    }

    /// `∂_i Σ`.
    pub fn partial(&self, i: usize) -> Vec<f64> {
        self.tangent(i).iter().map(|v| v * self.m_sigma).collect()
    }
}

/// Jets of `Σ` and (optionally) `ν` at a point, in the chart's local coordinates.
pub struct ChartJets {
    pub sigma: Vec<Jet>,
    pub normal: Option<Vec<Jet>>,
}

/// Jets of the tangent frame `e_i` and normal `ν`, all of one order.
pub struct FrameJets {
    pub tangents: Vec<Vec<Jet>>,
    pub normal: Vec<Jet>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurvatureData {
    /// Ascending.
    pub principal_curvatures: Vec<f64>,
    /// Unit ambient tangent vectors matching `principal_curvatures`.
    pub principal_directions: Vec<Vec<f64>>,
    pub dual_curvatures: Vec<f64>,
    /// Smallest sectional curvature of the induced metric; `NaN` when `n = 3`.
    pub min_sectional: f64,
    /// Largest `|S a − κ a| / |a|` over the principal directions.
    pub residual: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ConstantSampling {
    /// Grid points per axis; capped so the grid has at most `2^18` points.
    pub grid: usize,
    pub random: usize,
    pub seed: u64,
}

impl Default for ConstantSampling {
    fn default() -> Self {
        ConstantSampling { grid: 64, random: 10_000, seed: 0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GlobalConstants {
    pub m_sigma: f64,
    /// Smallest singular value of `[Σ, e_1, …, e_m, ν]` over the samples.
    pub c_sigma: f64,
    pub kappa_min: f64,
    pub kappa_max: f64,
    /// Largest Christoffel symbol of the induced metric.
    pub m1: f64,
    pub m2: f64,
    pub samples: usize,
}

impl ManifoldChart {
    /// The cap `{x ∈ S^{n−1} : x_n = c}` with normal pointing towards the pole.
    pub fn cap(n: usize, c: f64) -> Result<ManifoldChart> {
        check_dimension(n)?;
        if !c.is_finite() || c.abs() >= 1.0 {
            return Err(invalid("c", format!("cap height must lie in (-1, 1), got {c}")));
        }
        if c == 0.0 {
            return Err(Error::NonConvex { kappa: 0.0, at: vec![0.5; n - 2] });
        }
        let shape = Shape::Spherical { radial: (1.0 - c * c).sqrt(), height: c };
        Ok(ManifoldChart::assemble(n, shape, vec![0.0; n - 2], 1.0))
    }

    pub fn perturbed_cap(n: usize, c: f64, amplitude: f64, frequency: f64) -> Result<ManifoldChart> {
        let base = ManifoldChart::cap(n, c)?;
        if !amplitude.is_finite() {
            return Err(invalid("amplitude", "must be finite"));
        }
        if !frequency.is_finite() {
            return Err(invalid("frequency", "must be finite"));
        }
        if amplitude == 0.0 {
            return Ok(base);
        }
        let mut chart = ManifoldChart::assemble(
            n,
            Shape::Perturbed { c, amplitude, frequency, sign: 1.0 },
            vec![0.0; n - 2],
            1.0,
        );
        let centre = vec![0.5; n - 2];
        let kappa = chart.principal_curvatures(&centre)?;
        if kappa.iter().sum::<f64>() < 0.0 {
            if let Shape::Perturbed { sign, .. } = &mut chart.shape {
                *sign = -1.0;
            }
        }
        chart.preflight()?;
        Ok(chart)
    }

    fn assemble(n: usize, shape: Shape, lo: Vec<f64>, width: f64) -> ManifoldChart {
        let mut chart = ManifoldChart { n, shape, lo, width, m_sigma: 1.0 };
        chart.m_sigma = chart.compute_m_sigma();
        chart
    }

    /// Rejects degenerate, non-convex or self-intersecting perturbations.
    fn preflight(&self) -> Result<()> {
        let m = self.param_dim();
        let points = grid::nodes(m, PREFLIGHT_GRID);
        let bad = points.par_iter().find_map_first(|x| -> Option<Error> {
            let jets = self.jets(x, 2, Some(0));
            let jac = jacobian(&jets.sigma, m);
            let smin = jac.singular_values().min();
            if smin < DEGENERATE_TOL {
                return Some(Error::DegenerateChart { sigma_min: smin, at: x.clone() });
            }
            match curvatures_from_jets(&jets, m) {
                Ok(k) if k[0] > 0.0 => None,
                Ok(k) => Some(Error::NonConvex { kappa: k[0], at: x.clone() }),
                Err(e) => Some(e),
            }
        });
        if let Some(e) = bad {
            return Err(e);
        }
        self.check_injective(PREFLIGHT_GRID * 2)
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn param_dim(&self) -> usize {
        self.n - 2
    }

    /// Normalising constant `M_Σ = sup ‖DΣ‖`.
    pub fn m_sigma(&self) -> f64 {
        self.m_sigma
    }

    /// Lower corner and side length of this chart's box in its parent's parameters.
    pub fn domain(&self) -> (&[f64], f64) {
        (&self.lo, self.width)
    }

    /// The parameter maximising `v·Σ(x)` over the chart, when it has a closed
    /// form: spherical charts whose unconstrained maximiser lies in the box.
    pub fn argmax_linear(&self, v: &[f64]) -> Option<Vec<f64>> {
        let Shape::Spherical { radial, .. } = self.shape else { return None };
        let m = self.param_dim();
        let head = &v[..=m];
        let norm = head.iter().map(|a| a * a).sum::<f64>().sqrt();
        if norm < 1e-300 {
            return None;
        }
        // ω(u) = ±v'/|v'|, inverted angle by angle.
        let s = radial.signum();
        let omega: Vec<f64> = head.iter().map(|a| s * a / norm).collect();
        let span = PI - 2.0 * POLAR_MARGIN;
        let mut x = Vec::with_capacity(m);
        let mut rest = 1.0f64;
        for i in 0..m - 1 {
            let c = if rest > 0.0 { (omega[i] / rest).clamp(-1.0, 1.0) } else { 1.0 };
            let phi = c.acos();
            rest *= phi.sin();
            x.push((phi - POLAR_MARGIN) / span);
        }
        let theta = omega[m].atan2(omega[m - 1]).rem_euclid(2.0 * PI);
        x.push(theta / (2.0 * PI));
        let mut local = Vec::with_capacity(m);
        for (i, u) in x.into_iter().enumerate() {
            let mut t = (u - self.lo[i]) / self.width;
            if i + 1 == m && self.width == 1.0 {
                t = t.rem_euclid(1.0);
            }
            if !(0.0..=1.0).contains(&t) {
                return None;
            }
            local.push(t);
        }
        Some(local)
    }

    /// Whether the last parameter is an angle covering the full circle, so
    /// that `x_m = 0` and `x_m = 1` are the same point.
    pub fn is_periodic(&self) -> bool {
        if self.width != 1.0 {
            return false;
        }
        match &self.shape {
            Shape::Spherical { .. } => true,
            Shape::Perturbed { frequency, .. } => self.n > 3 || frequency.fract() == 0.0,
            Shape::Dual(inner) => inner.is_periodic(),
        }
    }

    pub fn is_dual(&self) -> bool {
        matches!(self.shape, Shape::Dual(_))
    }

    /// Chart of the dual hypersurface `{ν(x)}`. Dualising twice gives back
    /// the original chart.
    pub fn dual(&self) -> ManifoldChart {
        match &self.shape {
            Shape::Spherical { radial, height } => {
                let s = (radial * height).signum();
                let shape = Shape::Spherical { radial: -s * height, height: s * radial };
                ManifoldChart::assemble(self.n, shape, self.lo.clone(), self.width)
            }
            Shape::Dual(inner) => {
                // Σ** = Σ and ν** = ν, restricted to this chart's box.
                inner.restrict(&self.lo, self.width)
            }
            Shape::Perturbed { .. } => ManifoldChart::assemble(
                self.n,
                Shape::Dual(Arc::new(self.clone())),
                vec![0.0; self.param_dim()],
                1.0,
            ),
        }
    }

    /// The sub-chart on the box `lo + width · [0, 1]^m` of local coordinates.
    pub fn restrict(&self, lo: &[f64], width: f64) -> ManifoldChart {
        let new_lo = self.lo.iter().zip(lo).map(|(a, b)| a + self.width * b).collect();
        ManifoldChart::assemble(self.n, self.shape.clone(), new_lo, self.width * width)
    }

    /// Splits the parameter cube into `2^{k·m}` equal sub-cubes.
    pub fn subdivide(&self, k: u32) -> Vec<ManifoldChart> {
        let m = self.param_dim();
        let per = 1usize << k;
        let side = 1.0 / per as f64;
        grid::cell_centres(m, per)
            .par_iter()
            .map(|c| {
                let lo: Vec<f64> = c.iter().map(|v| v - 0.5 * side).collect();
                self.restrict(&lo, side)
            })
            .collect()
    }

    pub fn sigma(&self, x: &[f64]) -> Vec<f64> {
        self.frame(x).sigma().to_vec()
    }

    pub fn normal(&self, x: &[f64]) -> Vec<f64> {
        self.frame(x).normal().to_vec()
    }

    pub fn frame(&self, x: &[f64]) -> Frame {
        match self.shape {
            Shape::Spherical { radial, height } => self.spherical_frame(radial, height, x),
            _ => {
                let jets = self.jets(x, 1, Some(0));
                let mut frame = Frame {
                    n: self.n,
                    m_sigma: self.m_sigma,
                    sigma: [0.0; MAX_AMBIENT],
                    tangents: [[0.0; MAX_AMBIENT]; MAX_PARAM],
                    normal: [0.0; MAX_AMBIENT],
                };
                let normal = jets.normal.expect("normal requested");
                for k in 0..self.n {
                    frame.sigma[k] = jets.sigma[k].value();
                    frame.normal[k] = normal[k].value();
                    for i in 0..self.param_dim() {
                        frame.tangents[i][k] = jets.sigma[k].partial(&[i]) / self.m_sigma;
                    }
                }
                frame
            }
        }
    }

    fn spherical_frame(&self, radial: f64, height: f64, x: &[f64]) -> Frame {
        let n = self.n;
        let m = n - 2;
        let span = PI - 2.0 * POLAR_MARGIN;
        let mut sin = [0.0; MAX_PARAM];
        let mut cos = [0.0; MAX_PARAM];
        for i in 0..m {
            let u = self.lo[i] + self.width * x[i];
            let angle = if i + 1 < m { POLAR_MARGIN + span * u } else { 2.0 * PI * u };
            (sin[i], cos[i]) = angle.sin_cos();
        }
        // prefix[k] = Π_{j<k} sin φ_j
        let mut prefix = [1.0; MAX_PARAM + 1];
        for k in 0..m.saturating_sub(1) {
            prefix[k + 1] = prefix[k] * sin[k];
        }
        let mut omega = [0.0; MAX_AMBIENT];
        for k in 0..m - 1 {
            omega[k] = prefix[k] * cos[k];
        }
        omega[m - 1] = prefix[m - 1] * cos[m - 1];
        omega[m] = prefix[m - 1] * sin[m - 1];

        let mut frame = Frame {
            n,
            m_sigma: self.m_sigma,
            sigma: [0.0; MAX_AMBIENT],
            tangents: [[0.0; MAX_AMBIENT]; MAX_PARAM],
            normal: [0.0; MAX_AMBIENT],
        };
        let s = (radial * height).signum();
        for k in 0..=m {
            frame.sigma[k] = radial * omega[k];
            frame.normal[k] = -s * height * omega[k];
        }
        frame.sigma[m + 1] = height;
        frame.normal[m + 1] = s * radial;

        let scale = radial * self.width / self.m_sigma;
        for i in 0..m - 1 {
            let t = &mut frame.tangents[i];
            let cot = cos[i] / sin[i];
            t[i] = -prefix[i] * sin[i] * span * scale;
            for k in i + 1..=m {
                t[k] = omega[k] * cot * span * scale;
            }
        }
        let t = &mut frame.tangents[m - 1];
        t[m - 1] = -prefix[m - 1] * sin[m - 1] * 2.0 * PI * scale;
        t[m] = prefix[m - 1] * cos[m - 1] * 2.0 * PI * scale;
        frame
    }

    /// Jets of `Σ` to `sigma_order` and, if asked, of `ν` to `normal_order`.
    pub fn jets(&self, x: &[f64], sigma_order: usize, normal_order: Option<usize>) -> ChartJets {
        let m = self.param_dim();
        assert_eq!(x.len(), m, "parameter point has the wrong dimension");
        let seed_order = normal_order
            .map(|k| k + self.normal_extra())
            .unwrap_or(0)
            .max(sigma_order + self.sigma_extra());
        let vars: Vec<Jet> = (0..m).map(|i| Jet::variable(m, seed_order, i, x[i])).collect();
        let sigma = self.sigma_of(&vars).into_iter().map(|j| j.truncate(sigma_order)).collect();
        let normal = normal_order
            .map(|k| self.normal_of(&vars).into_iter().map(|j| j.truncate(k)).collect());
        ChartJets { sigma, normal }
    }

    /// Jets of `e_i` and `ν` to the given order.
    pub fn frame_jets(&self, x: &[f64], order: usize) -> FrameJets {
        let jets = self.jets(x, order + 1, Some(order));
        let inv = 1.0 / self.m_sigma;
        let tangents = (0..self.param_dim())
            .map(|i| jets.sigma.iter().map(|s| s.differentiate(i).scale(inv)).collect())
            .collect();
        FrameJets { tangents, normal: jets.normal.expect("normal requested") }
    }

    fn sigma_extra(&self) -> usize {
        match &self.shape {
            Shape::Spherical { .. } | Shape::Perturbed { .. } => 0,
            Shape::Dual(inner) => inner.normal_extra(),
        }
    }

    fn normal_extra(&self) -> usize {
        match &self.shape {
            Shape::Spherical { .. } => 0,
            Shape::Perturbed { .. } => 1,
            Shape::Dual(inner) => inner.sigma_extra(),
        }
    }

    /// Composition with this chart's box. Only diagonal affine maps with
    /// positive scale are ever composed, so differentiating with respect to
    /// outer variables preserves the orientation of tangent frames.
    fn to_base(&self, x: &[Jet]) -> Vec<Jet> {
        x.iter().zip(&self.lo).map(|(j, lo)| j.scale(self.width).offset(*lo)).collect()
    }

    fn sigma_of(&self, x: &[Jet]) -> Vec<Jet> {
        let u = self.to_base(x);
        match &self.shape {
            Shape::Spherical { radial, height } => spherical_sigma(&u, *radial, *height),
            Shape::Perturbed { c, amplitude, frequency, .. } => {
                perturbed_sigma(&u, *c, *amplitude, *frequency)
            }
            Shape::Dual(inner) => inner.normal_of(&u),
        }
    }

    fn normal_of(&self, x: &[Jet]) -> Vec<Jet> {
        let u = self.to_base(x);
        match &self.shape {
            Shape::Spherical { radial, height } => spherical_normal(&u, *radial, *height),
            Shape::Perturbed { c, amplitude, frequency, sign } => {
                let sigma = perturbed_sigma(&u, *c, *amplitude, *frequency);
                let mut columns = vec![sigma.clone()];
                for i in 0..u.len() {
                    columns.push(sigma.iter().map(|s| s.differentiate(i)).collect());
                }
                taylor::normalize(&taylor::generalized_cross(&columns))
                    .into_iter()
                    .map(|j| j.scale(*sign))
                    .collect()
            }
            Shape::Dual(inner) => inner.sigma_of(&u),
        }
    }

    /// Principal curvatures at `x`, ascending.
    pub fn principal_curvatures(&self, x: &[f64]) -> Result<Vec<f64>> {
        if let Shape::Spherical { radial, height } = self.shape {
            return Ok(vec![(height / radial).abs(); self.param_dim()]);
        }
        let jets = self.jets(x, 2, Some(0));
        curvatures_from_jets(&jets, self.param_dim())
    }

    /// Extreme principal curvatures over the cell centres of a `g^m` grid.
    pub fn curvature_range(&self, g: usize) -> Result<(f64, f64)> {
        let points = grid::cell_centres(self.param_dim(), g.max(1));
        let per_point: Result<Vec<(f64, f64)>> = points
            .par_iter()
            .map(|x| {
                let k = self.principal_curvatures(x)?;
                Ok((k[0], k[k.len() - 1]))
            })
            .collect();
        Ok(per_point?
            .into_iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), (a, b)| (lo.min(a), hi.max(b))))
    }

    /// Full curvature record at `x`: principal curvatures and directions, the
    /// reciprocal curvatures of the dual, and the smallest sectional curvature.
    pub fn curvature_at(&self, x: &[f64]) -> Result<CurvatureData> {
        let m = self.param_dim();
        let jets = self.jets(x, 2, Some(0));
        let jac = jacobian(&jets.sigma, m);
        let metric = jac.transpose() * &jac;
        let second = second_form(&jets, m);
        let degenerate = || Error::DegenerateChart { sigma_min: jac.singular_values().min(), at: x.to_vec() };
        let chol = metric.clone().cholesky().ok_or_else(degenerate)?;
        let l_inv = chol.l().try_inverse().ok_or_else(degenerate)?;
        let reduced = &l_inv * &second * l_inv.transpose();
        let eigen = ((&reduced + reduced.transpose()) * 0.5).symmetric_eigen();
        let mut order: Vec<usize> = (0..m).collect();
        order.sort_by(|&a, &b| eigen.eigenvalues[a].total_cmp(&eigen.eigenvalues[b]));
        let shape = metric.clone().try_inverse().ok_or_else(degenerate)? * &second;
        let mut principal_curvatures = Vec::with_capacity(m);
        let mut principal_directions = Vec::with_capacity(m);
        let mut residual = 0.0f64;
        for &i in &order {
            let kappa = eigen.eigenvalues[i];
            let param_dir = l_inv.transpose() * eigen.eigenvectors.column(i);
            residual = residual.max((&shape * &param_dir - &param_dir * kappa).norm() / param_dir.norm());
            let ambient = &jac * &param_dir;
            principal_directions.push((ambient.clone() / ambient.norm()).iter().copied().collect());
            principal_curvatures.push(kappa);
        }
        if principal_curvatures[0] <= 0.0 {
            return Err(Error::NonConvex { kappa: principal_curvatures[0], at: x.to_vec() });
        }
        // Gauss equation on the unit sphere: K(ξ_i, ξ_j) = 1 + κ_i κ_j.
        let min_sectional = if m >= 2 {
            1.0 + principal_curvatures[0] * principal_curvatures[1]
        } else {
            f64::NAN
        };
        Ok(CurvatureData {
            dual_curvatures: principal_curvatures.iter().map(|k| 1.0 / k).collect(),
            principal_curvatures,
            principal_directions,
            min_sectional,
            residual,
        })
    }

    /// Second fundamental form `ν · ∂_ζ∂_ζ Σ` along the parameter direction `ζ`.
    pub fn fundamental_form(&self, x: &[f64], zeta: &[f64]) -> f64 {
        let m = self.param_dim();
        let jets = self.jets(x, 2, Some(0));
        let second = second_form(&jets, m);
        let z = DVector::from_column_slice(zeta);
        (z.transpose() * second * &z)[(0, 0)]
    }

    /// Normalised second fundamental form `II(ζ, ζ) / |DΣ ζ|²` sampled at
    /// random points and directions: returns its maximum on this chart and
    /// its minimum on the dual chart.
    pub fn second_fundamental_bounds(&self, samples: usize, seed: u64) -> Result<(f64, f64)> {
        let dual = self.dual();
        let m = self.param_dim();
        let ratio = |chart: &ManifoldChart, task: u64| -> Vec<f64> {
            (0..samples as u64)
                .into_par_iter()
                .map(|i| {
                    let mut rng = rng::stream(seed, task * (1 << 40) + i);
                    let x = rng::unit_cube(&mut rng, m);
                    let zeta = rng::unit_sphere(&mut rng, m);
                    let jets = chart.jets(&x, 2, Some(0));
                    let jac = jacobian(&jets.sigma, m);
                    let z = DVector::from_column_slice(&zeta);
                    let ii = (z.transpose() * second_form(&jets, m) * &z)[(0, 0)];
                    ii / (&jac * &z).norm_squared()
                })
                .collect()
        };
        let upper = ratio(self, 0).into_iter().fold(f64::NEG_INFINITY, f64::max);
        let lower = ratio(&dual, 1).into_iter().fold(f64::INFINITY, f64::min);
        Ok((upper, lower))
    }

    /// Halves the parameter cube until every piece's image, sampled on a
    /// `5^m` node grid, has diameter below `max_diameter`.
    pub fn subdivide_to_diameter(&self, max_diameter: f64) -> Result<(u32, Vec<ManifoldChart>)> {
        if !(max_diameter > 0.0) {
            return Err(invalid("max_diameter", "must be positive"));
        }
        for k in 0..=20u32 {
            let pieces = self.subdivide(k);
            let widest = pieces.par_iter().map(ManifoldChart::image_diameter).reduce(|| 0.0, f64::max);
            if widest < max_diameter {
                return Ok((k, pieces));
            }
        }
        Err(invalid("max_diameter", format!("{max_diameter} not reached after 20 halvings")))
    }

    /// Largest distance between images of the `5^m` grid nodes.
    pub fn image_diameter(&self) -> f64 {
        let images: Vec<Vec<f64>> = grid::nodes(self.param_dim(), 4).iter().map(|x| self.sigma(x)).collect();
        let mut best = 0.0f64;
        for (i, a) in images.iter().enumerate() {
            for b in &images[i + 1..] {
                best = best.max(dist(a, b));
            }
        }
        best
    }

    fn compute_m_sigma(&self) -> f64 {
        let m = self.param_dim();
        if let Shape::Spherical { radial, .. } = self.shape {
            let span = PI - 2.0 * POLAR_MARGIN;
            let mut best = 0.0f64;
            let mut prefix = 1.0;
            for i in 0..m {
                let angular = if i + 1 < m { span } else { 2.0 * PI };
                best = best.max(prefix * angular);
                if i + 1 < m {
                    let a = POLAR_MARGIN + span * self.lo[i];
                    let b = a + span * self.width;
                    let max_sin = if a <= PI / 2.0 && PI / 2.0 <= b { 1.0 } else { a.sin().max(b.sin()) };
                    prefix *= max_sin;
                }
            }
            return radial.abs() * self.width * best;
        }
        let g = if m == 1 { 256 } else { 32usize.min(((1usize << 16) as f64).powf(1.0 / m as f64) as usize) };
        grid::nodes(m, g)
            .par_iter()
            .map(|x| jacobian(&self.jets(x, 1, None).sigma, m).singular_values().max())
            .reduce(|| 0.0, f64::max)
    }

    /// Samples `M_Σ`, `C_Σ`, curvature bounds and Christoffel bounds.
    pub fn global_constants(&self, sampling: &ConstantSampling) -> Result<GlobalConstants> {
        let m = self.param_dim();
        let max_g = ((1usize << 18) as f64).powf(1.0 / m as f64).floor() as usize;
        let g = sampling.grid.clamp(1, max_g.max(1));
        let mut points = grid::cell_centres(m, g);
        let mut rng = rng::stream(sampling.seed, 0);
        points.extend((0..sampling.random).map(|_| (0..m).map(|_| rng.random::<f64>()).collect()));

        struct Local {
            c_sigma: f64,
            kappa_min: f64,
            kappa_max: f64,
            m1: f64,
        }
        let per_point: Result<Vec<Local>> = points
            .par_iter()
            .map(|x| {
                let jets = self.jets(x, 2, Some(0));
                let jac = jacobian(&jets.sigma, m);
                let smin = jac.singular_values().min();
                if smin < DEGENERATE_TOL {
                    return Err(Error::DegenerateChart { sigma_min: smin, at: x.clone() });
                }
                let kappa = curvatures_from_jets(&jets, m)?;
                let normal: Vec<f64> = jets.normal.as_ref().unwrap().iter().map(Jet::value).collect();
                let mut full = DMatrix::zeros(self.n, self.n);
                for k in 0..self.n {
                    full[(k, 0)] = jets.sigma[k].value();
                    for i in 0..m {
                        full[(k, i + 1)] = jac[(k, i)] / self.m_sigma;
                    }
                    full[(k, self.n - 1)] = normal[k];
                }
                let c_sigma = full.singular_values().min();
                let metric = jac.transpose() * &jac;
                let inv = metric.try_inverse().ok_or(Error::DegenerateChart { sigma_min: smin, at: x.clone() })?;
                let mut m1 = 0.0f64;
                for i in 0..m {
                    for j in i..m {
                        let second: Vec<f64> = jets.sigma.iter().map(|s| s.partial(&[i, j])).collect();
                        let lowered: Vec<f64> = (0..m)
                            .map(|l| (0..self.n).map(|k| second[k] * jac[(k, l)]).sum())
                            .collect();
                        for l in 0..m {
                            let gamma: f64 = (0..m).map(|q| inv[(l, q)] * lowered[q]).sum();
                            m1 = m1.max(gamma.abs());
                        }
                    }
                }
                Ok(Local { c_sigma, kappa_min: kappa[0], kappa_max: kappa[m - 1], m1 })
            })
            .collect();
        let per_point = per_point?;
        let c_sigma = per_point.iter().map(|p| p.c_sigma).fold(f64::INFINITY, f64::min);
        let kappa_min = per_point.iter().map(|p| p.kappa_min).fold(f64::INFINITY, f64::min);
        let kappa_max = per_point.iter().map(|p| p.kappa_max).fold(f64::NEG_INFINITY, f64::max);
        let m1 = per_point.iter().map(|p| p.m1).fold(0.0, f64::max);
        let m2 = c_sigma / (16.0 * self.n as f64 * m1.max(1.0) * kappa_max.powi(2).max(1.0));
        Ok(GlobalConstants {
            m_sigma: self.m_sigma,
            c_sigma,
            kappa_min,
            kappa_max,
            m1,
            m2,
            samples: per_point.len(),
        })
    }

    /// Looks for distinct grid points whose images nearly coincide. The last
    /// base parameter is an angle, so distances along it wrap around.
    pub fn check_injective(&self, g: usize) -> Result<()> {
        let m = self.param_dim();
        let points = grid::cell_centres(m, g);
        let frames: Vec<(Vec<f64>, Vec<f64>, f64)> = points
            .par_iter()
            .map(|x| {
                let jets = self.jets(x, 1, None);
                let smin = jacobian(&jets.sigma, m).singular_values().min();
                let base: Vec<f64> = x.iter().zip(&self.lo).map(|(v, lo)| lo + self.width * v).collect();
                (base, jets.sigma.iter().map(Jet::value).collect(), smin)
            })
            .collect();
        let smin = frames.iter().map(|f| f.2).fold(f64::INFINITY, f64::min);
        let tol = 0.5 * smin / g as f64;
        let param_tol = 1.5 * self.width / g as f64;
        let mut buckets: std::collections::HashMap<Vec<i64>, Vec<usize>> = Default::default();
        let key = |p: &[f64]| -> Vec<i64> { p.iter().map(|v| (v / tol).floor() as i64).collect() };
        for (i, f) in frames.iter().enumerate() {
            buckets.entry(key(&f.1)).or_default().push(i);
        }
        for (i, f) in frames.iter().enumerate() {
            let k = key(&f.1);
            for offset in neighbour_offsets(self.n) {
                let probe: Vec<i64> = k.iter().zip(&offset).map(|(a, b)| a + b).collect();
                for &j in buckets.get(&probe).map(Vec::as_slice).unwrap_or(&[]) {
                    if j <= i {
                        continue;
                    }
                    let d = dist(&f.1, &frames[j].1);
                    if d < tol && periodic_distance(&f.0, &frames[j].0) > param_tol {
                        return Err(Error::NotInjective { a: points[i].clone(), b: points[j].clone(), distance: d });
                    }
                }
            }
        }
        Ok(())
    }
}

fn check_dimension(n: usize) -> Result<()> {
    if !(3..=MAX_AMBIENT).contains(&n) {
        return Err(invalid("n", format!("ambient dimension must lie in 3..={MAX_AMBIENT}, got {n}")));
    }
    Ok(())
}

fn neighbour_offsets(dim: usize) -> Vec<Vec<i64>> {
    let mut out = vec![vec![]];
    for _ in 0..dim {
        out = out
            .into_iter()
            .flat_map(|v: Vec<i64>| {
                (-1..=1).map(move |d| {
                    let mut w = v.clone();
                    w.push(d);
                    w
                })
            })
            .collect();
    }
    out
}

fn periodic_distance(a: &[f64], b: &[f64]) -> f64 {
    let last = a.len() - 1;
    a.iter()
        .zip(b)
        .enumerate()
        .map(|(i, (x, y))| {
            let d = (x - y).abs();
            if i == last {
                let w = d.rem_euclid(1.0);
                w.min(1.0 - w)
            } else {
                d
            }
        })
        .map(|d| d * d)
        .sum::<f64>()
        .sqrt()
}

pub(crate) fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

fn jacobian(sigma: &[Jet], m: usize) -> DMatrix<f64> {
    DMatrix::from_fn(sigma.len(), m, |k, i| sigma[k].partial(&[i]))
}

fn second_form(jets: &ChartJets, m: usize) -> DMatrix<f64> {
    let normal = jets.normal.as_ref().expect("second fundamental form needs the normal");
    DMatrix::from_fn(m, m, |i, j| {
        jets.sigma.iter().zip(normal).map(|(s, v)| s.partial(&[i, j]) * v.value()).sum::<f64>()
    })
}

fn curvatures_from_jets(jets: &ChartJets, m: usize) -> Result<Vec<f64>> {
    let jac = jacobian(&jets.sigma, m);
    let metric = jac.transpose() * &jac;
    let second = second_form(jets, m);
    generalized_symmetric_eigen(&metric, &second).ok_or_else(|| Error::DegenerateChart {
        sigma_min: jac.singular_values().min(),
        at: vec![],
    })
}

/// Eigenvalues of `G⁻¹B` for symmetric `B` and positive definite `G`, ascending.
pub fn generalized_symmetric_eigen(g: &DMatrix<f64>, b: &DMatrix<f64>) -> Option<Vec<f64>> {
    let chol = g.clone().cholesky()?;
    let l_inv = chol.l().try_inverse()?;
    let reduced = &l_inv * b * l_inv.transpose();
    let sym = (&reduced + reduced.transpose()) * 0.5;
    let mut values: Vec<f64> = sym.symmetric_eigenvalues().iter().copied().collect();
    values.sort_by(f64::total_cmp);
    Some(values)
}

fn omega(u: &[Jet]) -> Vec<Jet> {
    let m = u.len();
    let span = PI - 2.0 * POLAR_MARGIN;
    let mut out = Vec::with_capacity(m + 1);
    let mut prefix: Option<Jet> = None;
    for phi in u.iter().take(m - 1) {
        let angle = phi.scale(span).offset(POLAR_MARGIN);
        let (s, c) = (angle.sin(), angle.cos());
        out.push(match &prefix {
            None => c,
            Some(p) => p.mul(&c),
        });
        prefix = Some(match prefix {
            None => s,
            Some(p) => p.mul(&s),
        });
    }
    let theta = u[m - 1].scale(2.0 * PI);
    let (s, c) = (theta.sin(), theta.cos());
    match prefix {
        None => {
            out.push(c);
            out.push(s);
        }
        Some(p) => {
            out.push(p.mul(&c));
            out.push(p.mul(&s));
        }
    }
    out
}

fn spherical_sigma(u: &[Jet], radial: f64, height: f64) -> Vec<Jet> {
    let mut out: Vec<Jet> = omega(u).into_iter().map(|w| w.scale(radial)).collect();
    out.push(Jet::constant(u[0].vars(), u[0].order(), height));
    out
}

fn spherical_normal(u: &[Jet], radial: f64, height: f64) -> Vec<Jet> {
    let s = (radial * height).signum();
    let mut out: Vec<Jet> = omega(u).into_iter().map(|w| w.scale(-s * height)).collect();
    out.push(Jet::constant(u[0].vars(), u[0].order(), s * radial));
    out
}

fn perturbed_sigma(u: &[Jet], c: f64, amplitude: f64, frequency: f64) -> Vec<Jet> {
    let radial = (1.0 - c * c).sqrt();
    let sigma = spherical_sigma(u, radial, c);
    let normal = spherical_normal(u, radial, c);
    let bump = u[0].scale(2.0 * PI * frequency).sin().scale(amplitude);
    let pushed: Vec<Jet> = sigma.iter().zip(&normal).map(|(s, v)| s.add(&v.mul(&bump))).collect();
    taylor::normalize(&pushed)
}

/// Sine of the largest principal angle between the spans of two equally
/// sized families of independent vectors.
pub fn subspace_gap(a: &[Vec<f64>], b: &[Vec<f64>]) -> f64 {
    let basis = |vs: &[Vec<f64>]| -> DMatrix<f64> {
        let n = vs.first().map_or(0, Vec::len);
        let m = DMatrix::from_fn(n, vs.len(), |i, j| vs[j][i]);
        m.qr().q()
    };
    let qa = basis(a);
    let qb = basis(b);
    let residual = &qb - &qa * (qa.transpose() * &qb);
    residual.singular_values().max().min(1.0)
}

/// Converts a coordinate slice to a column vector.
pub fn to_vector(v: &[f64]) -> DVector<f64> {
    DVector::from_column_slice(v)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn dot(a: &[f64], b: &[f64]) -> f64 {
        a.iter().zip(b).map(|(x, y)| x * y).sum()
    }

    #[test]
    fn cap_normal_at_centre() {
        let cap = ManifoldChart::cap(3, 0.6).unwrap();
        let f = cap.frame(&[0.5]);
        assert_relative_eq!(f.normal()[2], 0.8, epsilon = 1e-12);
        assert_relative_eq!(dot(f.sigma(), f.normal()), 0.0, epsilon = 1e-12);
        assert_relative_eq!(dot(f.sigma(), f.sigma()), 1.0, epsilon = 1e-12);
    }

    #[test]
    fn fast_frame_matches_jets() {
        for n in 3..=6 {
            let cap = ManifoldChart::cap(n, 0.45).unwrap().restrict(&vec![0.1; n - 2], 0.7);
            let x: Vec<f64> = (0..n - 2).map(|i| 0.2 + 0.15 * i as f64).collect();
            let fast = cap.frame(&x);
            let jets = cap.jets(&x, 1, Some(0));
            let normal = jets.normal.unwrap();
            for k in 0..n {
                assert_relative_eq!(fast.sigma()[k], jets.sigma[k].value(), epsilon = 1e-13);
                assert_relative_eq!(fast.normal()[k], normal[k].value(), epsilon = 1e-13);
                for i in 0..n - 2 {
                    assert_relative_eq!(
                        fast.tangent(i)[k] * cap.m_sigma(),
                        jets.sigma[k].partial(&[i]),
                        epsilon = 1e-12
                    );
                }
            }
        }
    }

    #[test]
    fn cap_curvature_is_height_over_radius() {
        let cap = ManifoldChart::cap(4, 0.6).unwrap();
        // Compare the analytic shortcut with the generic eigen-solve.
        let jets = cap.jets(&[0.3, 0.7], 2, Some(0));
        let k = curvatures_from_jets(&jets, 2).unwrap();
        for v in k {
            assert_relative_eq!(v, 0.75, epsilon = 1e-12);
        }
    }

    #[test]
    fn dual_is_an_involution() {
        let cap = ManifoldChart::cap(3, 0.6).unwrap();
        let twice = cap.dual().dual();
        for x in [0.1, 0.4, 0.9] {
            let a = cap.frame(&[x]);
            let b = twice.frame(&[x]);
            for k in 0..3 {
                assert_relative_eq!(a.sigma()[k], b.sigma()[k], epsilon = 1e-14);
                assert_relative_eq!(a.normal()[k], b.normal()[k], epsilon = 1e-14);
            }
        }
        let d = cap.dual();
        let f = d.frame(&[0.3]);
        assert_relative_eq!(f.sigma()[2], 0.8, epsilon = 1e-14);
        assert_relative_eq!(d.principal_curvatures(&[0.3]).unwrap()[0], 4.0 / 3.0, epsilon = 1e-14);
    }

    #[test]
    fn perturbed_cap_is_convex_and_dualisable() {
        let p = ManifoldChart::perturbed_cap(3, 0.6, 0.02, 2.0).unwrap();
        let (lo, hi) = p.curvature_range(64).unwrap();
        assert!(lo > 0.0 && hi > lo);
        let d = p.dual();
        let twice = d.dual();
        let x = [0.37];
        let a = p.frame(&x);
        let b = d.frame(&x);
        let c = twice.frame(&x);
        for k in 0..3 {
            assert_relative_eq!(a.normal()[k], b.sigma()[k], epsilon = 1e-12);
            assert_relative_eq!(a.sigma()[k], b.normal()[k], epsilon = 1e-12);
            assert_relative_eq!(a.sigma()[k], c.sigma()[k], epsilon = 1e-12);
        }
        let kd = d.principal_curvatures(&x).unwrap()[0];
        assert!(kd > 0.0);
    }

    #[test]
    fn strong_perturbation_is_rejected() {
        let err = ManifoldChart::perturbed_cap(3, 0.6, 0.3, 3.0).unwrap_err();
        assert!(matches!(err, Error::NonConvex { .. }), "{err}");
    }

    #[test]
    fn equator_is_not_convex() {
        assert!(matches!(ManifoldChart::cap(3, 0.0), Err(Error::NonConvex { .. })));
        assert!(matches!(ManifoldChart::cap(3, 1.0), Err(Error::InvalidParameter { .. })));
        assert!(matches!(ManifoldChart::cap(2, 0.5), Err(Error::InvalidParameter { .. })));
    }

    #[test]
    fn subdivision_covers_the_chart() {
        let cap = ManifoldChart::cap(4, 0.5).unwrap();
        let pieces = cap.subdivide(2);
        assert_eq!(pieces.len(), 16);
        // The piece with box [0.25, 0.5] x [0.5, 0.75] at local centre maps to
        // the parent point (0.375, 0.625).
        let piece = pieces.iter().find(|p| (p.domain().0[0] - 0.25).abs() < 1e-12 && (p.domain().0[1] - 0.5).abs() < 1e-12).unwrap();
        let a = piece.sigma(&[0.5, 0.5]);
        let b = cap.sigma(&[0.375, 0.625]);
        for k in 0..4 {
            assert_relative_eq!(a[k], b[k], epsilon = 1e-14);
        }
    }

    #[test]
    fn m_sigma_for_the_circle() {
        let cap = ManifoldChart::cap(3, 0.6).unwrap();
        assert_relative_eq!(cap.m_sigma(), 2.0 * PI * 0.8, epsilon = 1e-12);
        let f = cap.frame(&[0.2]);
        assert_relative_eq!(dot(f.tangent(0), f.tangent(0)), 1.0, epsilon = 1e-12);
    }

    #[test]
    fn global_constants_for_cap() {
        let cap = ManifoldChart::cap(3, 0.6).unwrap();
        let g = cap.global_constants(&ConstantSampling { grid: 64, random: 200, seed: 1 }).unwrap();
        assert_relative_eq!(g.kappa_min, 0.75, epsilon = 1e-12);
        assert_relative_eq!(g.kappa_max, 0.75, epsilon = 1e-12);
        assert!(g.m1 < 1e-9);
        // [Σ, e, ν] is orthogonal for the circle.
        assert_relative_eq!(g.c_sigma, 1.0, epsilon = 1e-12);
        assert_relative_eq!(g.m2, 1.0 / 48.0, epsilon = 1e-12);
    }

    #[test]
    fn injectivity_check_accepts_cap() {
        ManifoldChart::cap(4, 0.5).unwrap().check_injective(24).unwrap();
    }

    #[test]
    fn curvature_record_for_cap() {
        let cap = ManifoldChart::cap(4, 0.6).unwrap();
        let data = cap.curvature_at(&[0.3, 0.8]).unwrap();
        for (k, d) in data.principal_curvatures.iter().zip(&data.dual_curvatures) {
            assert_relative_eq!(*k, 0.75, epsilon = 1e-12);
            assert_relative_eq!(*d, 4.0 / 3.0, epsilon = 1e-12);
        }
        assert_relative_eq!(data.min_sectional, 1.0 / (1.0 - 0.36), epsilon = 1e-12);
        assert!(data.residual < 1e-8);
        let f = cap.frame(&[0.3, 0.8]);
        for dir in &data.principal_directions {
            assert_relative_eq!(dot(dir, f.sigma()), 0.0, epsilon = 1e-12);
            assert_relative_eq!(dot(dir, f.normal()), 0.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn second_fundamental_bounds_for_cap() {
        let cap = ManifoldChart::cap(3, 0.6).unwrap();
        let (upper, lower) = cap.second_fundamental_bounds(200, 3).unwrap();
        assert_relative_eq!(upper, 0.75, epsilon = 1e-6);
        assert_relative_eq!(lower, 4.0 / 3.0, epsilon = 1e-6);
        let a = cap.fundamental_form(&[0.4], &[0.7]);
        let b = cap.fundamental_form(&[0.4], &[1.4]);
        assert_relative_eq!(b / a, 4.0, epsilon = 1e-14);
    }

    #[test]
    fn subdivision_reaches_target_diameter() {
        let cap = ManifoldChart::cap(3, 0.6).unwrap();
        let (k, pieces) = cap.subdivide_to_diameter(PI / 100.0).unwrap();
        assert_eq!(pieces.len(), 1 << k);
        assert!(pieces.iter().all(|p| p.image_diameter() < PI / 100.0));
        // 2π · 0.8 / 2^k < π/100 first holds at k = 8.
        assert_eq!(k, 8);
    }
}
