use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use tangentproj::cone::{cone_distance, line_cone_points, Cone, LineSegment};
use tangentproj::experiments::projected_image;
use tangentproj::projmap::{pair_intersection_volume_with, CinematicMap, FrameTable};
use tangentproj::sets::{box_dimension, covering_numbers};
use tangentproj_bench::{cap, planar};

fn covering(c: &mut Criterion) {
    let set = planar(8);
    c.bench_function("covering_numbers 65k points, 12 scales", |b| {
        b.iter(|| covering_numbers(black_box(&set.points), 4, 15).unwrap())
    });
    c.bench_function("box_dimension 65k points", |b| b.iter(|| box_dimension(black_box(&set.points), 8, 15).unwrap()));
    let chart = cap(3);
    c.bench_function("projected_image 65k points", |b| {
        b.iter(|| projected_image(&chart, black_box(&[0.3]), &set.points).unwrap())
    });
}

fn cone(c: &mut Criterion) {
    let chart = cap(3);
    let cone = Cone::new(chart.clone(), vec![0.05, -0.02, 0.01]).unwrap();
    c.bench_function("cone_distance n=3", |b| b.iter(|| cone_distance(&cone, black_box(&[0.2, 0.1, 0.3]))));
    let line = LineSegment::through(&[-0.5, 0.3, 0.2], &[0.5, 0.25, 0.35]).unwrap();
    c.bench_function("line_cone_points n=3", |b| b.iter(|| line_cone_points(&cone, black_box(&line)).unwrap()));
    let chart4 = cap(4);
    let cone4 = Cone::new(chart4, vec![0.05, -0.02, 0.01, 0.0]).unwrap();
    c.bench_function("cone_distance n=4", |b| b.iter(|| cone_distance(&cone4, black_box(&[0.2, 0.1, 0.3, -0.1]))));
}

fn volumes(c: &mut Criterion) {
    let chart = cap(3);
    let table = FrameTable::new(&chart, 512);
    let f = CinematicMap::new(chart.clone(), vec![0.1, 0.0, 0.05]).unwrap();
    let g = CinematicMap::new(chart.clone(), vec![0.1, 0.05, 0.12]).unwrap();
    c.bench_function("c2_norm grid 512", |b| b.iter(|| table.c2_norm(black_box(&[0.0, 0.05, 0.07]))));
    c.bench_function("pair_intersection_volume 1e5 samples", |b| {
        b.iter(|| pair_intersection_volume_with(&table, &f, &g, 2f64.powi(-8), 100_000, 1).unwrap())
    });
}

criterion_group! {
    name = benches;
    config = Criterion::default().sample_size(10);
    targets = covering, cone, volumes
}
criterion_main!(benches);
