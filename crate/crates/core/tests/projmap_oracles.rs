//! Cinematic maps, volumes and intersection diameters against independent
//! oracles.

use std::f64::consts::PI;
use std::sync::Arc;

use proptest::prelude::*;
use rand::Rng;
use tangentproj::manifold::ManifoldChart;
use tangentproj::projmap::*;
use tangentproj::rng;

fn cap3() -> Arc<ManifoldChart> {
    Arc::new(ManifoldChart::cap(3, 0.6).unwrap())
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

fn map(chart: &Arc<ManifoldChart>, z: &[f64]) -> CinematicMap {
    CinematicMap::new(chart.clone(), z.to_vec()).unwrap()
}

/// `z' = z + u Σ(x₀)`, so that `f_z − f_{z'}` vanishes at `x₀`.
fn crossing(chart: &Arc<ManifoldChart>, z: &[f64], u: f64, x0: f64) -> Vec<f64> {
    let s = chart.sigma(&[x0]);
    z.iter().zip(&s).map(|(a, b)| a + u * b).collect()
}

/// Frame of `Σ(x)^⊥` by Gram–Schmidt: the unit tangent from a difference
/// quotient, then `e₃` orthogonalised against `Σ` and the tangent.
fn gram_schmidt_frame(chart: &ManifoldChart, x: f64) -> (Vec<f64>, Vec<f64>) {
    let h = 1e-6;
    let s = chart.sigma(&[x]);
    let (a, b) = (chart.sigma(&[x - h]), chart.sigma(&[x + h]));
    let mut t: Vec<f64> = b.iter().zip(&a).map(|(p, q)| p - q).collect();
    let st = dot(&s, &t);
    t.iter_mut().zip(&s).for_each(|(v, w)| *v -= st * w);
    let tn = norm(&t);
    t.iter_mut().for_each(|v| *v /= tn);
    let mut nu = vec![0.0, 0.0, 1.0];
    for basis in [&s, &t] {
        let p = dot(&nu, basis);
        nu.iter_mut().zip(basis.iter()).for_each(|(v, w)| *v -= p * w);
    }
    let nn = norm(&nu);
    nu.iter_mut().for_each(|v| *v /= nn);
    (t, nu)
}

#[test]
fn cap_map_matches_gram_schmidt_oracle() {
    let chart = cap3();
    let z = [0.2, 0.0, 0.0];
    let f = map(&chart, &z);
    for i in 0..256 {
        let x = (i as f64 + 0.5) / 256.0;
        let (t, nu) = gram_schmidt_frame(&chart, x);
        // The tangent is only determined up to orientation by the oracle.
        let v = f.eval(&[x]);
        let e1 = dot(&t, &z);
        assert!((v[0].abs() - e1.abs()).abs() < 1e-9, "x={x}");
        assert!((v[1] - dot(&nu, &z)).abs() < 1e-9, "x={x}");
        // Closed-form frame of the cap, φ = 2πx.
        let phi = 2.0 * PI * x;
        let closed = [0.2 * -phi.sin(), 0.2 * -0.6 * phi.cos()];
        assert!((v[0].abs() - closed[0].abs()).abs() < 1e-10);
        assert!((v[1] - closed[1]).abs() < 1e-10);
    }
}

#[test]
fn origin_map_is_zero_and_radial_points_vanish_at_their_parameter() {
    let chart = cap3();
    let f = map(&chart, &[0.0; 3]);
    let z = crossing(&chart, &[0.0; 3], 0.3, 0.41);
    let g = map(&chart, &z);
    for v in f.eval(&[0.13]) {
        assert_eq!(v, 0.0);
    }
    assert!(norm(&g.eval(&[0.41])) < 1e-15);
}

/// Unit directions spread over the sphere by the Fibonacci lattice.
fn sphere_directions(count: usize) -> Vec<Vec<f64>> {
    let golden = PI * (3.0 - 5f64.sqrt());
    (0..count)
        .map(|i| {
            let z = 1.0 - 2.0 * (i as f64 + 0.5) / count as f64;
            let r = (1.0 - z * z).sqrt();
            let t = golden * i as f64;
            vec![r * t.cos(), r * t.sin(), z]
        })
        .collect()
}

#[test]
fn c2_distance_respects_the_bilipschitz_range() {
    // By linearity ‖f_z − f_w‖_{C²} / |z − w| = ‖f_u‖_{C²} for the unit
    // direction u of z − w, so the exact range is an extremum over the sphere.
    let chart = cap3();
    let table = FrameTable::new(&chart, 128);
    let (lo, hi) = sphere_directions(20_000)
        .iter()
        .map(|u| table.c2_norm(u).value)
        .fold((f64::INFINITY, 0.0f64), |(a, b), v| (a.min(v), b.max(v)));
    let mut r = rng::stream(11, 0);
    let mut draw = || -> (Vec<f64>, Vec<f64>) {
        let a = rng::unit_ball(&mut r, 3).iter().map(|v| 0.5 * v).collect();
        let b = rng::unit_ball(&mut r, 3).iter().map(|v| 0.5 * v).collect();
        (a, b)
    };
    let pairs: Vec<_> = (0..500).map(|_| draw()).collect();
    let report = cinematic_report(&chart, &pairs, 128, None).unwrap();
    assert!(report.c2_lo >= 0.999 * lo && report.c2_hi <= 1.001 * hi, "[{}, {}] vs [{lo}, {hi}]", report.c2_lo, report.c2_hi);
    for _ in 0..1000 {
        let (a, b) = draw();
        let d: Vec<f64> = a.iter().zip(&b).map(|(p, q)| p - q).collect();
        let ratio = c2_distance(&map(&chart, &a), &map(&chart, &b), 128) / norm(&d);
        assert!(ratio >= 0.999 * lo && ratio <= 1.001 * hi, "{ratio} outside [{lo}, {hi}]");
    }
}

#[test]
fn c2_distance_converges_under_grid_refinement() {
    let chart = cap3();
    let (f, g) = (map(&chart, &[0.1, 0.0, 0.0]), map(&chart, &[0.15, 0.0, 0.0]));
    let coarse = c2_distance(&f, &g, 256);
    let fine = c2_distance(&f, &g, 1024);
    assert!(((coarse - fine) / fine).abs() < 0.02, "{coarse} {fine}");
    // For d = 0.05 e₁ the tangent coordinate is ±0.05 sin 2πx, whose second
    // derivative peaks at 0.05 (2π)² and dominates the norm.
    let d = 0.05;
    let second = d * (2.0 * PI).powi(2);
    assert!(fine <= second * (1.0 + 1e-6) && fine >= 0.95 * second, "{fine} vs {second}");
}

#[test]
fn value_and_gradient_alternatives_of_the_cinematic_condition() {
    let chart = cap3();
    let x0 = 0.3;
    let frame = chart.frame(&[x0]);
    let z = [0.05, -0.1, 0.02];
    // Separation along the tangent: the values already differ.
    let e1 = frame.tangent(0).to_vec();
    let w: Vec<f64> = z.iter().zip(&e1).map(|(a, b)| a + 0.1 * b).collect();
    let h = map(&chart, &z).difference(&map(&chart, &w));
    assert!((norm(&h.eval(&[x0])) - 0.1).abs() < 1e-12);
    // Separation along Σ(x₀): the values agree and the gradient carries it.
    let s = frame.sigma().to_vec();
    let w: Vec<f64> = z.iter().zip(&s).map(|(a, b)| a + 0.1 * b).collect();
    let h = map(&chart, &z).difference(&map(&chart, &w));
    assert!(norm(&h.eval(&[x0])) < 1e-12);
    let grad = h.gradient(&[x0]);
    let kappa_max = 0.75;
    assert!(grad.norm() >= 0.1 / (4.0 * kappa_max), "{}", grad.norm());
}

#[test]
fn constant_map_neighbourhood_is_a_disc_bundle() {
    let chart = cap3();
    let f = map(&chart, &[0.0; 3]);
    let delta = 1.0 / 16.0;
    let v = vertical_neighborhood_volume(&f, delta, 400_000, 3).unwrap();
    let exact = PI * delta * delta;
    assert!(((v.value - exact) / exact).abs() < 0.02, "{} vs {exact}", v.value);
}

#[test]
fn halving_delta_divides_the_neighbourhood_by_four() {
    let chart = cap3();
    let f = map(&chart, &[0.2, 0.0, 0.0]);
    let a = vertical_neighborhood_volume(&f, 1.0 / 32.0, 200_000, 5).unwrap().value;
    let b = vertical_neighborhood_volume(&f, 1.0 / 64.0, 200_000, 6).unwrap().value;
    let ratio = a / b;
    assert!((4.0 / 1.3..=4.0 * 1.3).contains(&ratio), "{ratio}");
}

fn disc_lens(r: f64, s: f64) -> f64 {
    if s >= 2.0 * r {
        return 0.0;
    }
    2.0 * r * r * (s / (2.0 * r)).acos() - 0.5 * s * (4.0 * r * r - s * s).sqrt()
}

#[test]
fn lens_volume_matches_the_planar_formula() {
    for s in [0.0, 0.3, 1.0, 1.7, 2.5] {
        let a = lens_volume(2, 1.0, s);
        let b = disc_lens(1.0, s);
        assert!((a - b).abs() < 1e-6, "s={s}: {a} vs {b}");
    }
}

#[test]
fn pair_volume_matches_quadrature_oracle() {
    let chart = cap3();
    let delta = (-8f64).exp2();
    let z = [0.05, 0.02, -0.03];
    let w = crossing(&chart, &z, 0.5, 0.53);
    let (f, g) = (map(&chart, &z), map(&chart, &w));
    let mc = pair_intersection_volume(&f, &g, delta, 400_000, 9).unwrap();
    // Midpoint rule on a dyadic grid of x: the fibre overlap is the lens of
    // two discs whose centres are |h(x)| apart.
    let d: Vec<f64> = z.iter().zip(&w).map(|(a, b)| a - b).collect();
    let cells = 1usize << 18;
    let oracle: f64 = (0..cells)
        .map(|i| {
            let x = (i as f64 + 0.5) / cells as f64;
            let h = eval_direction(&chart, &d, &[x]);
            disc_lens(delta, norm(&h))
        })
        .sum::<f64>()
        / cells as f64;
    assert!(((mc.value - oracle) / oracle).abs() < 0.05, "{} vs {oracle}", mc.value);
}

#[test]
fn identical_maps_overlap_in_the_whole_neighbourhood() {
    let chart = cap3();
    let f = map(&chart, &[0.1, 0.2, 0.0]);
    let delta = (-6f64).exp2();
    let v = pair_intersection_volume(&f, &f, delta, 100_000, 1).unwrap();
    let exact = PI * delta * delta;
    assert!(((v.value - exact) / exact).abs() < 0.01, "{} vs {exact}", v.value);
}

/// Length of the run of `{x : |f_d(x)| < 2δ}` containing `x₀`, on a fine scan.
fn scanned_run(chart: &ManifoldChart, d: &[f64], x0: f64, delta: f64) -> f64 {
    let step = 1e-7;
    let inside = |x: f64| norm(&eval_direction(chart, d, &[x])) < 2.0 * delta;
    let mut lo = x0;
    while inside(lo - step) {
        lo -= step;
    }
    let mut hi = x0;
    while inside(hi + step) {
        hi += step;
    }
    hi - lo
}

#[test]
fn intersection_diameter_scales_like_delta_over_d() {
    let chart = cap3();
    let delta = (-12f64).exp2();
    // Centre of a dyadic piece of width 1/32, the piece size for K = 2.
    let x0 = 33.0 / 64.0;
    let z = [0.01, -0.02, 0.03];
    let mut normalised = Vec::new();
    for u in [0.5, 0.25, 0.125] {
        let w = crossing(&chart, &z, u, x0);
        let (f, g) = (map(&chart, &z), map(&chart, &w));
        let IntersectionDiameter::Measured { max_diameter, vacuous, d, .. } = projected_intersection_diameter(&f, &g, delta, 2.0).unwrap() else {
            panic!("the maps cross at x0");
        };
        assert!(!vacuous);
        let diff: Vec<f64> = z.iter().zip(&w).map(|(a, b)| a - b).collect();
        let oracle = scanned_run(&chart, &diff, x0, delta);
        assert!(max_diameter >= oracle && max_diameter <= 1.25 * oracle + 1e-6, "u={u}: {max_diameter} vs {oracle}");
        normalised.push(max_diameter * d / delta);
    }
    let (lo, hi) = normalised.iter().fold((f64::INFINITY, 0.0f64), |(a, b), &v| (a.min(v), b.max(v)));
    assert!(hi / lo <= 4.0, "{normalised:?}");
}

#[test]
fn close_pairs_are_flagged_vacuous() {
    let chart = cap3();
    let delta = (-8f64).exp2();
    let z = [0.01, -0.02, 0.03];
    let w = crossing(&chart, &z, 1e-4, 0.3);
    match projected_intersection_diameter(&map(&chart, &z), &map(&chart, &w), delta, 2.0).unwrap() {
        IntersectionDiameter::Measured { vacuous, .. } => assert!(vacuous),
        IntersectionDiameter::Empty => panic!("the maps cross"),
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn maps_are_linear_in_the_point(
        a in -2.0f64..2.0, b in -2.0f64..2.0, x in 0.0f64..1.0,
        z in prop::array::uniform3(-0.5f64..0.5), w in prop::array::uniform3(-0.5f64..0.5),
    ) {
        let chart = cap3();
        let combo: Vec<f64> = z.iter().zip(&w).map(|(p, q)| a * p + b * q).collect();
        let lhs = map(&chart, &combo).eval(&[x]);
        let (fz, fw) = (map(&chart, &z).eval(&[x]), map(&chart, &w).eval(&[x]));
        for i in 0..2 {
            prop_assert!((lhs[i] - (a * fz[i] + b * fw[i])).abs() < 1e-12);
        }
    }

    #[test]
    fn map_norm_is_the_distance_to_the_normal_line(x in 0.0f64..1.0, z in prop::array::uniform3(-0.5f64..0.5)) {
        // |f_z(x)|² + (Σ(x)·z)² = |z|², since the frame completes Σ(x).
        let chart = cap3();
        let v = map(&chart, &z).eval(&[x]);
        let s = dot(&chart.sigma(&[x]), &z);
        prop_assert!((dot(&v, &v) + s * s - dot(&z, &z)).abs() < 1e-12);
    }
}

#[test]
fn random_pairs_have_positive_certified_ratio() {
    let chart = cap3();
    let mut r = rng::stream(13, 0);
    let pairs: Vec<(Vec<f64>, Vec<f64>)> = (0..100)
        .map(|_| {
            let a: Vec<f64> = (0..3).map(|_| r.random_range(-0.28..0.28)).collect();
            let b: Vec<f64> = (0..3).map(|_| r.random_range(-0.28..0.28)).collect();
            (a, b)
        })
        .collect();
    let table = FrameTable::new(&chart, 256);
    for (a, b) in &pairs {
        let d: Vec<f64> = a.iter().zip(b).map(|(p, q)| p - q).collect();
        let s = cinematic_infimum(&table, &d).unwrap();
        assert!(s.ratio > 0.0 && s.ratio <= s.sampled_ratio + 1e-15);
    }
}
