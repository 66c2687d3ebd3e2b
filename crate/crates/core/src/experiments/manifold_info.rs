//! Chart constants and the duality checks between `Σ` and its dual `Σ*`.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{Ctx, Issues, Recorder};
use crate::error::Result;
use crate::manifold::{dist, subspace_gap, ChartSpec, ConstantSampling};
use crate::rng;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ManifoldInfoParams {
    /// Random parameter points for the pointwise checks.
    pub samples: usize,
    /// Grid points per axis for the global constants.
    pub constants_grid: usize,
    /// Extra random points for the global constants.
    pub constants_random: usize,
    /// `| |Σ(x)| − 1 |` and `| |ν(x)| − 1 |`.
    pub sphere_tol: f64,
    /// Orthogonality of the frame vectors.
    pub frame_tol: f64,
    /// Height of the dual image for caps, `√(1 − c²)`.
    pub height_tol: f64,
    /// `|ν*(ν(x)) − Σ(x)|`.
    pub involution_tol: f64,
    /// `|κ_i κ*_i − 1|`.
    pub curvature_tol: f64,
    /// Sine of the largest principal angle between `T_xΣ` and `T_{ν(x)}Σ*`.
    pub angle_tol: f64,
    /// Slack on the second-fundamental-form bounds.
    pub form_tol: f64,
}

impl Default for ManifoldInfoParams {
    fn default() -> Self {
        ManifoldInfoParams {
            samples: 1000,
            constants_grid: 16,
            constants_random: 1000,
            sphere_tol: 1e-9,
            frame_tol: 1e-10,
            height_tol: 1e-9,
            involution_tol: 1e-8,
            curvature_tol: 1e-6,
            angle_tol: 1e-7,
            form_tol: 1e-6,
        }
    }
}

impl ManifoldInfoParams {
    pub(super) fn validate(&self, is: &mut Issues) {
        is.require(self.samples >= 1, "samples", "must be at least 1");
        is.require(self.constants_grid >= 1, "constants_grid", "must be at least 1");
        for (k, v) in [
            ("sphere_tol", self.sphere_tol),
            ("frame_tol", self.frame_tol),
            ("height_tol", self.height_tol),
            ("involution_tol", self.involution_tol),
            ("curvature_tol", self.curvature_tol),
            ("angle_tol", self.angle_tol),
            ("form_tol", self.form_tol),
        ] {
            is.positive(k, v);
        }
    }
}

#[derive(Default, Clone, Copy)]
struct Worst {
    sphere: f64,
    frame: f64,
    height: f64,
    involution: f64,
    curvature: f64,
    angle: f64,
    min_kappa: f64,
    min_dual_kappa: f64,
    min_sectional: f64,
    min_dual_sectional: f64,
    residual: f64,
}

impl Worst {
    fn merge(self, o: Worst) -> Worst {
        Worst {
            sphere: self.sphere.max(o.sphere),
            frame: self.frame.max(o.frame),
            height: self.height.max(o.height),
            involution: self.involution.max(o.involution),
            curvature: self.curvature.max(o.curvature),
            angle: self.angle.max(o.angle),
            min_kappa: self.min_kappa.min(o.min_kappa),
            min_dual_kappa: self.min_dual_kappa.min(o.min_dual_kappa),
            min_sectional: self.min_sectional.min(o.min_sectional),
            min_dual_sectional: self.min_dual_sectional.min(o.min_dual_sectional),
            residual: self.residual.max(o.residual),
        }
    }

    fn identity() -> Worst {
        Worst {
            min_kappa: f64::INFINITY,
            min_dual_kappa: f64::INFINITY,
            min_sectional: f64::INFINITY,
            min_dual_sectional: f64::INFINITY,
            ..Worst::default()
        }
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub(super) fn run(p: &ManifoldInfoParams, ctx: &Ctx, rec: &mut Recorder) -> Result<()> {
    let chart = &ctx.chart;
    let dual = chart.dual();
    let n = chart.n();
    let m = chart.param_dim();
    let sampling = ConstantSampling { grid: p.constants_grid, random: p.constants_random, seed: ctx.seed_for("constants") };
    let constants = chart.global_constants(&sampling)?;
    let dual_constants = dual.global_constants(&sampling)?;
    ctx.cancelled()?;
    rec.scalar("m_sigma", constants.m_sigma);
    rec.scalar("c_sigma", constants.c_sigma);
    rec.scalar("kappa_min", constants.kappa_min);
    rec.scalar("kappa_max", constants.kappa_max);
    rec.scalar("christoffel_bound", constants.m1);
    rec.scalar("m2", constants.m2);
    rec.scalar("dual_kappa_min", dual_constants.kappa_min);
    rec.scalar("dual_kappa_max", dual_constants.kappa_max);
    rec.scalar("dual_c_sigma", dual_constants.c_sigma);
    rec.scalar("constant_samples", constants.samples);

    let cap_height = match cap_heights(ctx) {
        Some(h) => Some(h),
        None => {
            rec.note("dual height check applies to caps only; skipped");
            None
        }
    };
    let seed = ctx.seed_for("duality");
    let worst: Result<Worst> = (0..p.samples as u64)
        .into_par_iter()
        .map(|i| -> Result<Worst> {
            let mut rng = rng::stream(seed, i);
            let x = rng::unit_cube(&mut rng, m);
            let frame = chart.frame(&x);
            let sigma = frame.sigma();
            let nu = frame.normal();
            let mut w = Worst::identity();
            w.sphere = (dot(sigma, sigma).sqrt() - 1.0).abs().max((dot(nu, nu).sqrt() - 1.0).abs());
            let mut ortho = dot(nu, sigma).abs();
            for a in 0..m {
                let e = frame.tangent(a);
                ortho = ortho.max(dot(e, sigma).abs()).max(dot(e, nu).abs());
            }
            w.frame = ortho;
            if let Some(h) = cap_height {
                w.height = (nu[n - 1] - h.0).abs().max((dual.normal(&x)[n - 1] - h.1).abs());
            }
            w.involution = dist(&dual.normal(&x), sigma);
            let curv = chart.curvature_at(&x)?;
            let dual_curv = dual.curvature_at(&x)?;
            for (k, ks) in curv.principal_curvatures.iter().zip(dual_curv.principal_curvatures.iter().rev()) {
                w.curvature = w.curvature.max((k * ks - 1.0).abs());
            }
            w.min_kappa = curv.principal_curvatures[0];
            w.min_dual_kappa = dual_curv.principal_curvatures[0];
            if m >= 2 {
                w.min_sectional = curv.min_sectional;
                w.min_dual_sectional = dual_curv.min_sectional;
            }
            w.residual = curv.residual.max(dual_curv.residual);
            let dual_frame = dual.frame(&x);
            let ta: Vec<Vec<f64>> = (0..m).map(|a| frame.tangent(a).to_vec()).collect();
            let tb: Vec<Vec<f64>> = (0..m).map(|a| dual_frame.tangent(a).to_vec()).collect();
            w.angle = subspace_gap(&ta, &tb);
            Ok(w)
        })
        .try_reduce(Worst::identity, |a, b| Ok(a.merge(b)));
    let w = worst?;
    ctx.cancelled()?;
    rec.check_le("sphere_deviation", w.sphere, p.sphere_tol);
    rec.check_le("frame_orthogonality", w.frame, p.frame_tol);
    if cap_height.is_some() {
        rec.check_le("dual_height_deviation", w.height, p.height_tol);
    }
    rec.check_le("involution_deviation", w.involution, p.involution_tol);
    rec.check_le("curvature_product_deviation", w.curvature, p.curvature_tol);
    rec.check_le("tangent_space_gap", w.angle, p.angle_tol);
    rec.scalar("shape_operator_residual", w.residual);
    if m == 1 {
        rec.check("min_curvature", w.min_kappa, "> 0", w.min_kappa > 0.0);
        rec.check("min_dual_curvature", w.min_dual_kappa, "> 0", w.min_dual_kappa > 0.0);
    } else {
        rec.check("min_sectional_curvature", w.min_sectional, "> 1", w.min_sectional > 1.0);
        rec.check("min_dual_sectional_curvature", w.min_dual_sectional, "> 1", w.min_dual_sectional > 1.0);
    }

    let (upper, lower) = chart.second_fundamental_bounds(p.samples, ctx.seed_for("form"))?;
    rec.scalar("form_upper", upper);
    rec.scalar("dual_form_lower", lower);
    let kmax = constants.kappa_max;
    rec.check_le("form_upper_excess", upper - kmax, p.form_tol);
    rec.check_le("dual_form_lower_deficit", 1.0 / kmax - lower, p.form_tol);
    rec.measure("kappa_max", None, kmax, None, constants.samples as u64);
    rec.measure("kappa_min", None, constants.kappa_min, None, constants.samples as u64);
    rec.measure("c_sigma", None, constants.c_sigma, None, constants.samples as u64);
    Ok(())
}

/// Expected heights of `ν` and of `ν*∘ν` for a cap: `(±√(1−c²), c)`, the
/// sign following the orientation towards the nearer pole.
fn cap_heights(ctx: &Ctx) -> Option<(f64, f64)> {
    match *ctx.spec {
        ChartSpec::Cap { c, .. } => Some((c.signum() * (1.0 - c * c).sqrt(), c)),
        ChartSpec::PerturbedCap { .. } => None,
    }
}
