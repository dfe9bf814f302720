//! Pseudo-spectral toolkit for the fractional rough Burgers and
//! Degasperis–Procesi equations on the torus driven by space-time white noise.
//!
//! Layers, bottom up:
//! - [`spectral`]: grids, transforms, multipliers, dealiased products, time paths.
//! - [`besov`]: Littlewood–Paley blocks, Besov norms, regularity-exponent fits.
//! - [`noise`]: seeded white noise and exact Ornstein–Uhlenbeck convolutions.
//! - [`paraproduct`]: Bony paraproducts, the time-mollified paraproduct, commutators.
//! - [`dynamics`]: semigroup, Duhamel quadrature, Picard mild solver, energy ledger.
//! - [`paracontrolled`]: the coupled (u′, u♯) solver for low dissipation.
//! - [`experiments`]: configs, manifests and the Monte Carlo drivers behind the CLI.

// `!(x > 0.0)` is used on purpose so that NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod besov;
pub mod dynamics;
pub mod error;
pub mod experiments;
pub mod noise;
pub mod paracontrolled;
pub mod paraproduct;
pub mod spectral;

pub use besov::{BesovSpec, DyadicPartition, Integrability, RegularityFit};
pub use dynamics::{EnergyLedger, Equation, IterationReport, SolverConfig};
pub use error::{Error, Result};

pub use noise::{NoiseConfig, NoisePath, NoiseVariant, OUPath};
pub use experiments::{ExperimentConfig, ExperimentKind, RunManifest};
pub use paracontrolled::ParacontrolledState;
pub use paraproduct::TemporalMollifier;
pub use spectral::{SpectralField, TimePath, TorusGrid};

pub use num_complex::Complex64;
