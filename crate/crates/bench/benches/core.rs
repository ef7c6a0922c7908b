use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use refsnake::branching::attach_motions;
use refsnake::tree_coding::{contour_to_forest, forest_to_contour, sample_forest_until};
use refsnake::{reflect_system, InitialMeasure, ObservationGrid, RngStream, TimeGrid};

fn setup(eps: f64) -> (Vec<f64>, ObservationGrid) {
    let x0 = InitialMeasure::Uniform { mass: 1.0, low: 0.0, high: 1.0 }
        .positions(eps)
        .unwrap();
    let grid = ObservationGrid::uniform(&TimeGrid::new(0.01, 0.5).unwrap());
    (x0, grid)
}

fn coding(c: &mut Criterion) {
    let mut rng = RngStream::new(1, 0);
    let forest = sample_forest_until(0.01, 20, 1.0, &mut rng).unwrap();
    let contour = forest_to_contour(&forest);
    c.bench_function("forest_to_contour", |b| b.iter(|| forest_to_contour(black_box(&forest))));
    c.bench_function("contour_to_forest", |b| b.iter(|| contour_to_forest(black_box(&contour)).unwrap()));
}

fn systems(c: &mut Criterion) {
    let eps = 0.01;
    let (x0, grid) = setup(eps);
    let mut rng = RngStream::new(2, 0);
    let forest = sample_forest_until(eps, x0.len(), grid.horizon(), &mut rng).unwrap();
    c.bench_function("attach_motions", |b| {
        b.iter(|| attach_motions(black_box(&forest), &x0, &grid, &mut rng).unwrap())
    });
    let system = attach_motions(&forest, &x0, &grid, &mut rng).unwrap();
    c.bench_function("reflect_system", |b| b.iter(|| reflect_system(black_box(&system)).unwrap()));
}

criterion_group! {
    name = benches;
    config = Criterion::default().sample_size(20);
    targets = coding, systems
}
criterion_main!(benches);
