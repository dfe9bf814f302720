//! End-to-end properties through the public API: noise → solver → energy.

use frb_core::dynamics::{continue_global, energy_ledger, solve_local};
use frb_core::noise::build_x_path;
use frb_core::{Complex64, Equation, NoiseConfig, SolverConfig, SpectralField, TorusGrid};
use proptest::prelude::*;

fn sine(grid: TorusGrid, a: f64) -> SpectralField {
    SpectralField::single_mode(grid, 1, Complex64::new(0.0, -a / 2.0)).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn noise_paths_are_reproducible_and_distinct(seed in 0u64..1_000_000, path in 0u64..64) {
        let grid = TorusGrid::new(32).unwrap();
        let cfg = NoiseConfig::new(grid, 1.5, 1e-2, 10, seed).unwrap();
        let a = build_x_path(&cfg, path).unwrap().x;
        let b = build_x_path(&cfg, path).unwrap().x;
        let c = build_x_path(&cfg, path + 1).unwrap().x;
        prop_assert_eq!(a.last().coeffs(), b.last().coeffs());
        prop_assert!(a.last().coeffs() != c.last().coeffs());
        prop_assert!(a.last().hermitian_defect() < 1e-12);
    }

    #[test]
    fn windowed_continuation_matches_single_window(seed in 0u64..1000, amp in 0.0f64..0.8) {
        let grid = TorusGrid::new(32).unwrap();
        let (gamma, dt, steps) = (1.6, 2e-3, 60);
        let horizon = dt * steps as f64;
        let noise = NoiseConfig::new(grid, gamma, dt, steps, seed).unwrap();
        let x = build_x_path(&noise, 0).unwrap().x;
        let u0 = &sine(grid, amp) + x.field(0);
        let mut cfg = SolverConfig::new(grid, gamma, horizon, dt).unwrap();
        cfg.picard_tol = 1e-12;
        let whole = solve_local(&u0, &x, &cfg).unwrap();
        cfg.window = Some(horizon / 3.0);
        let pieces = continue_global(&u0, &x, &cfg).unwrap();
        prop_assert_eq!(pieces.v.len(), whole.v.len());
        let scale = whole.v.last().l2_norm().max(1e-3);
        for (p, w) in pieces.v.fields().iter().zip(whole.v.fields()) {
            prop_assert!((p - w).l2_norm() < 1e-8 * scale);
        }
    }

    #[test]
    fn energy_balance_closes_without_noise(amp in 0.1f64..1.0) {
        let grid = TorusGrid::new(64).unwrap();
        let (gamma, dt, steps) = (1.8, 1e-3, 200);
        let horizon = dt * steps as f64;
        let noise = NoiseConfig::new(grid, gamma, dt, steps, 0).unwrap();
        let x = build_x_path(&noise, 0).unwrap().x.map(|f| f.scale(0.0));
        let cfg = SolverConfig::new(grid, gamma, horizon, dt).unwrap();
        let v = solve_local(&sine(grid, amp), &x, &cfg).unwrap().v;
        let ledger = energy_ledger(&v, &x, gamma, Equation::Burgers).unwrap();
        // Deterministic dissipative flow: the L² norm never grows.
        let l2: Vec<f64> = v.fields().iter().map(SpectralField::l2_norm_sq).collect();
        prop_assert!(l2.windows(2).all(|w| w[1] <= w[0] * (1.0 + 1e-12)));
        let max_res = ledger.balance_residual.iter().fold(0.0f64, |m, r| m.max(r.abs()));
        prop_assert!(max_res < 1e-3 * l2[0], "residual {max_res}");
    }
}
