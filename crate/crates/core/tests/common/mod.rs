//! Test-side oracles shared by the integration tests.
#![allow(dead_code)]

use nalgebra::DMatrix;
use rand::Rng;
use tangentproj::manifold::ManifoldChart;

pub fn random_x<R: Rng>(chart: &ManifoldChart, rng: &mut R) -> Vec<f64> {
    let (lo, width) = chart.domain();
    lo.iter().map(|l| l + width * rng.random::<f64>()).collect()
}

/// Sine of the largest principal angle between the spans of `a` and `b`.
pub fn principal_sine(a: &[Vec<f64>], b: &[Vec<f64>]) -> f64 {
    let n = a[0].len();
    let ma = DMatrix::from_fn(n, a.len(), |i, j| a[j][i]);
    let mb = DMatrix::from_fn(n, b.len(), |i, j| b[j][i]);
    let qa = ma.qr().q();
    let qb = mb.qr().q();
    let residual = &qb - &qa * (qa.transpose() * &qb);
    residual.singular_values().max()
}

pub type Field<'a> = &'a dyn Fn(&[f64]) -> Vec<f64>;

/// Fourth-order central difference of `f` along axis `i`.
pub fn fd1(f: Field, x: &[f64], i: usize, h: f64) -> Vec<f64> {
    let at = |t: f64| {
        let mut y = x.to_vec();
        y[i] += t;
        f(&y)
    };
    let (a, b, c, d) = (at(-2.0 * h), at(-h), at(h), at(2.0 * h));
    (0..a.len()).map(|k| (a[k] - 8.0 * b[k] + 8.0 * c[k] - d[k]) / (12.0 * h)).collect()
}

/// Tangent vectors and absolute principal curvatures of a parametrised
/// hypersurface of the sphere, from finite differences of the parametrisation
/// and the closed second fundamental form `B_ij = ν · ∂_ij σ`.
pub fn fd_shape(sigma: Field, normal: Field, x: &[f64]) -> (Vec<Vec<f64>>, Vec<f64>) {
    const H: f64 = 1e-3;
    let m = x.len();
    let tangents: Vec<Vec<f64>> = (0..m).map(|i| fd1(sigma, x, i, H)).collect();
    let nu = normal(x);
    let g: DMatrix<f64> = DMatrix::from_fn(m, m, |i, j| tangents[i].iter().zip(&tangents[j]).map(|(a, b)| a * b).sum());
    let b: DMatrix<f64> = DMatrix::from_fn(m, m, |i, j| {
        let di = |y: &[f64]| fd1(sigma, y, i, H);
        let dij = fd1(&di, x, j, H);
        nu.iter().zip(&dij).map(|(a, b)| a * b).sum()
    });
    let b = 0.5 * (&b + b.transpose());
    let l: DMatrix<f64> = g.cholesky().expect("regular chart").l();
    let li: DMatrix<f64> = l.try_inverse().unwrap();
    let s: DMatrix<f64> = &li * b * li.transpose();
    let curv = s.symmetric_eigen().eigenvalues.iter().map(|v| v.abs()).collect();
    (tangents, curv)
}
