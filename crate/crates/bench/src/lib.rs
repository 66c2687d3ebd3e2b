//! Shared inputs for the criterion benchmarks.

use std::sync::Arc;

use tangentproj::experiments::FractalSpec;
use tangentproj::sets::FractalSet;
use tangentproj::ManifoldChart;

/// The cap of height `0.6` in `R^n`.
pub fn cap(n: usize) -> Arc<ManifoldChart> {
    Arc::new(ManifoldChart::cap(n, 0.6).expect("valid cap"))
}

/// The default planar fractal of dimension `0.8` at `level`, in `R^3`.
pub fn planar(level: u32) -> FractalSet {
    FractalSpec { level, ..FractalSpec::default() }.build(3).expect("valid fractal")
}
