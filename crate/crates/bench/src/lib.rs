//! Criterion benchmarks for the spectral kernels and the local solver.
//!
//! Run with `cargo bench -p frb-bench`; the benchmarks themselves live in
//! `benches/kernels.rs`. This library only provides the shared inputs.

use frb_core::{Complex64, SpectralField, TorusGrid};

/// Deterministic real, mean-zero field with algebraically decaying modes.
pub fn test_field(n: usize, phase: f64) -> SpectralField {
    let grid = TorusGrid::new(n).expect("power-of-two grid");
    SpectralField::from_fn(grid, |k| {
        if k == 0 {
            return Complex64::new(0.0, 0.0);
        }
        let a = 1.0 / (1.0 + (k as f64).abs());
        let th = phase * k as f64;
        // Odd phase keeps the field real.
        Complex64::new(a * th.cos(), a * th.sin())
    })
}
