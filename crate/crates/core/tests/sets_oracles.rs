//! Covering numbers, box dimension, extraction and Frostman checks against
//! direct counts.

use std::collections::HashSet;

use proptest::prelude::*;
use rand::Rng;
use tangentproj::error::Error;
use tangentproj::rng;
use tangentproj::sets::*;

fn cells(points: &PointCloud, delta: f64) -> usize {
    points
        .iter()
        .map(|p| p.iter().map(|v| (v / delta).floor() as i64).collect::<Vec<_>>())
        .collect::<HashSet<_>>()
        .len()
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}

fn cantor(level: u32) -> FractalSet {
    FractalSet::build(3, 2, 1.0 / 3.0, level, &Placement::Axis).unwrap()
}

#[test]
fn cantor_on_an_axis_has_two_to_the_level_points() {
    let set = cantor(8);
    assert_eq!(set.len(), 256);
    assert!((set.similarity_dim - 2f64.ln() / 3f64.ln()).abs() < 1e-12);
    for p in set.points.iter() {
        assert!(p[1] == 0.0 && p[2] == 0.0);
    }
}

#[test]
fn a_single_branch_is_a_point_of_dimension_zero() {
    let set = FractalSet::build(3, 1, 0.5, 4, &Placement::Axis).unwrap();
    assert_eq!(set.len(), 1);
    assert_eq!(box_dimension(&set.points, 0, 6).unwrap().slope, 0.0);
}

#[test]
fn planar_quarter_copies_fill_a_square() {
    let set = FractalSet::build(3, 16, 0.25, 4, &Placement::Planar).unwrap();
    assert_eq!(set.len(), 65536);
    let (k0, k1) = set.default_window(6);
    let est = box_dimension(&set.points, k0, k1).unwrap().slope;
    assert!((est - 2.0).abs() < 0.05, "{est}");
}

#[test]
fn equispaced_points_occupy_one_cell_each() {
    let pts = PointCloud::from_coords(1, (0..16).map(|i| (i as f64 + 0.5) / 16.0).collect());
    assert_eq!(covering_number(&pts, 1.0 / 16.0).unwrap(), 16);
}

#[test]
fn cantor_level_three_count_near_eight() {
    // Dyadic scales only: 2^{−5} is the nearest to 1/27.
    let mut r = PointCloud::new(1);
    for a in 0..8u32 {
        let x: f64 = (0..3).map(|j| if a >> j & 1 == 1 { 2.0 * 3f64.powi(-(j as i32) - 1) } else { 0.0 }).sum();
        r.push(&[x + 0.5 / 27.0]);
    }
    let n = covering_number(&r, 1.0 / 32.0).unwrap();
    assert!((2..=32).contains(&n), "{n}");
    assert!(matches!(covering_number(&r, 1.0 / 27.0), Err(Error::InvalidParameter { .. })));
}

#[test]
fn extraction_from_the_dyadic_grid_meets_its_target_size() {
    let pts = PointCloud::from_coords(1, (0..1024).map(|i| (i as f64 + 0.5) / 1024.0).collect());
    let set = extract_delta_s_set(&pts, 1.0 / 1024.0, 0.5).unwrap();
    assert!((16..=32).contains(&set.points.len()), "{}", set.points.len());
    let mut r = rng::stream(3, 0);
    let total = set.points.len() as f64;
    for _ in 0..1000 {
        let centre = [r.random::<f64>()];
        let radius = (r.random::<f64>() * -10.0).exp2();
        let inside = set.points.iter().filter(|p| dist(p, &centre) <= radius).count() as f64;
        assert!(inside <= set.c * radius.max(set.delta).powf(0.5) * total + 1e-9);
    }
}

#[test]
fn full_dimension_extraction_keeps_the_grid() {
    let mut pts = PointCloud::new(2);
    for i in 0..32 {
        for j in 0..32 {
            pts.push(&[(i as f64 + 0.5) / 32.0, (j as f64 + 0.5) / 32.0]);
        }
    }
    let set = extract_delta_s_set(&pts, 1.0 / 32.0, 2.0).unwrap();
    assert_eq!(set.points.len(), 1024);
}

#[test]
fn a_single_cell_cannot_hold_a_large_set() {
    let pts = PointCloud::from_points(2, &[vec![0.1, 0.1], vec![0.1001, 0.1]]);
    assert!(matches!(extract_delta_s_set(&pts, (-10f64).exp2(), 1.0), Err(Error::Infeasible { .. })));
}

#[test]
fn frostman_bounds_on_the_cantor_measure() {
    let set = cantor(10);
    let at_dim = frostman_check(&set, set.similarity_dim, 2000, 1);
    let doubled = frostman_check(&set, set.similarity_dim, 4000, 2);
    assert!(at_dim.bounded && doubled.bounded);
    assert!(doubled.max_ratio <= 2.0 * at_dim.max_ratio && at_dim.max_ratio <= 2.0 * doubled.max_ratio);
    let zero = frostman_check(&set, 0.0, 500, 3);
    assert!(zero.max_ratio <= 1.0 + 1e-12);
    let above = frostman_check(&set, 0.8, 2000, 4);
    assert!(!above.bounded, "slope {}", above.slope);
}

#[test]
fn separated_subset_is_separated_and_covers() {
    let mut r = rng::stream(5, 0);
    let pts = PointCloud::from_coords(2, (0..4000).map(|_| r.random::<f64>()).collect());
    let delta = 0.05;
    let sub = separated_subset(&pts, delta).unwrap();
    for (i, a) in sub.iter().enumerate() {
        for b in sub.iter().skip(i + 1) {
            assert!(dist(a, b) >= delta);
        }
    }
    for p in pts.iter() {
        assert!(sub.iter().any(|q| dist(p, q) < delta));
    }
}

fn cloud(dim: usize) -> impl Strategy<Value = PointCloud> {
    prop::collection::vec(-0.5f64..0.5, dim..dim * 400).prop_map(move |mut v| {
        v.truncate(v.len() / dim * dim);
        PointCloud::from_coords(dim, v)
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn covering_counts_match_a_direct_cell_count(pts in cloud(2), k in 0u32..12) {
        let delta = (-(k as f64)).exp2();
        prop_assert_eq!(covering_number(&pts, delta).unwrap(), cells(&pts, delta));
        let all = covering_numbers(&pts, 0, 12).unwrap();
        prop_assert_eq!(all[k as usize], cells(&pts, delta));
    }

    #[test]
    fn covering_counts_grow_under_refinement(pts in cloud(3), k in 0u32..14) {
        let coarse = covering_number(&pts, (-(k as f64)).exp2()).unwrap();
        let fine = covering_number(&pts, (-(k as f64) - 1.0).exp2()).unwrap();
        prop_assert!(coarse <= fine && fine <= 8 * coarse);
    }

    #[test]
    fn covering_counts_are_monotone_and_subadditive(a in cloud(2), b in cloud(2), k in 0u32..12) {
        let delta = (-(k as f64)).exp2();
        let mut union = a.clone();
        for p in b.iter() {
            union.push(p);
        }
        let (na, nb, nu) = (
            covering_number(&a, delta).unwrap(),
            covering_number(&b, delta).unwrap(),
            covering_number(&union, delta).unwrap(),
        );
        prop_assert!(na <= nu && nb <= nu && nu <= na + nb);
    }

    #[test]
    fn extraction_is_a_separated_subset_with_its_constant(pts in cloud(2), s in 0.2f64..2.0, k in 3u32..7) {
        let delta = (-(k as f64)).exp2();
        match extract_delta_s_set(&pts, delta, s) {
            Err(Error::Infeasible { .. }) => {}
            Err(e) => prop_assert!(false, "unexpected error {}", e),
            Ok(set) => {
                let source: HashSet<Vec<u64>> = pts.iter().map(|p| p.iter().map(|v| v.to_bits()).collect()).collect();
                let chosen: Vec<&[f64]> = set.points.iter().collect();
                prop_assert!(!chosen.is_empty());
                for (i, p) in chosen.iter().enumerate() {
                    prop_assert!(source.contains(&p.iter().map(|v| v.to_bits()).collect::<Vec<_>>()));
                    for q in &chosen[i + 1..] {
                        prop_assert!(dist(p, q) >= delta);
                    }
                }
                let total = chosen.len() as f64;
                for p in &chosen {
                    for r in [delta, 2.0 * delta, 0.1, 0.3, 1.0] {
                        let inside = chosen.iter().filter(|q| dist(p, q) <= r).count() as f64;
                        prop_assert!(inside <= set.c * r.powf(s) * total * (1.0 + 1e-12));
                    }
                }
            }
        }
    }
}
