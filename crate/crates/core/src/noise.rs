//! Seeded space-time white noise and the exact per-mode Ornstein–Uhlenbeck
//! convolution driving the equations.
//!
//! Mode k of white noise has `E[ξ_k(t) conj ξ_k(s)] = δ(t−s)/(2π)` under the
//! coefficient convention of [`crate::spectral`]. The stochastic convolution
//! `X_k` solves `dX_k = −|k|^γ X_k dt + w(k) dW_k/√(2π)`, whose stationary
//! variance is `w(k)²/(4π|k|^γ)`. Multiplying by |𝕋|² = 4π² converts this to
//! the unnormalized-transform constant |𝕋|/(2|k|^γ).

use std::f64::consts::PI;

use num_complex::Complex64;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::spectral::{SpectralField, TimePath, TorusGrid};

/// Identifier of the sub-stream scheme, recorded in manifests.
pub const SUBSEED_SCHEME: &str = "chacha8-stream4-v1";
pub const FOURIER_CONVENTION: &str = "c_k = (1/2pi) int u e^{-ikx} dx; E|xi_k|^2 = dt/(2pi)";
/// Factor taking σ²_stat under our convention to the unnormalized-transform covariance.
pub const UNNORMALIZED_FACTOR: f64 = 4.0 * PI * PI;

/// Purpose of a random sub-stream of one ensemble member.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stream {
    Innovations = 0,
    Initial = 1,
    Auxiliary = 2,
}

/// Generator for (master seed, path index, purpose): one ChaCha8 key per
/// master seed, stream id `4·path + purpose`.
pub fn stream_rng(seed: u64, path_index: u64, purpose: Stream) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(4 * path_index + purpose as u64);
    rng
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum NoiseVariant {
    White,
    /// Mode k scaled by φ(εk), φ a smooth bump with φ(0) = 1 supported in [−1, 1].
    Mollified { epsilon: f64 },
    /// Only n_band/2 ≤ |k| ≤ n_band, scaled by |k|^β.
    BandLimited {
        n_band: i64,
        #[serde(default)]
        beta: f64,
    },
    /// |D|^β ξ.
    Roughened { beta: f64 },
}

/// φ(x) = exp(1 − 1/(1 − x²)) on |x| < 1.
pub fn mollifier_profile(x: f64) -> f64 {
    let x2 = x * x;
    if x2 >= 1.0 {
        0.0
    } else {
        (1.0 - 1.0 / (1.0 - x2)).exp()
    }
}

impl NoiseVariant {
    pub fn mode_weight(&self, k: i64) -> f64 {
        if k == 0 {
            return 0.0;
        }
        let a = k.abs();
        match *self {
            NoiseVariant::White => 1.0,
            NoiseVariant::Mollified { epsilon } => mollifier_profile(epsilon * a as f64),
            NoiseVariant::BandLimited { n_band, beta } => {
                if 2 * a >= n_band && a <= n_band {
                    (a as f64).powf(beta)
                } else {
                    0.0
                }
            }
            NoiseVariant::Roughened { beta } => (a as f64).powf(beta),
        }
    }
}

fn default_variant() -> NoiseVariant {
    NoiseVariant::White
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseConfig {
    pub gamma: f64,
    pub seed: u64,
    pub dt: f64,
    pub n_steps: usize,
    pub grid: TorusGrid,
    #[serde(default = "default_variant")]
    pub variant: NoiseVariant,
}

impl NoiseConfig {
    pub fn new(grid: TorusGrid, gamma: f64, dt: f64, n_steps: usize, seed: u64) -> Result<Self> {
        let cfg = Self {
            gamma,
            seed,
            dt,
            n_steps,
            grid,
            variant: NoiseVariant::White,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn with_variant(mut self, variant: NoiseVariant) -> Result<Self> {
        self.variant = variant;
        self.validate()?;
        Ok(self)
    }

    pub fn horizon(&self) -> f64 {
        self.dt * self.n_steps as f64
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.gamma > 1.0 && self.gamma <= 2.0) {
            return Err(Error::Config(format!("gamma must lie in (1, 2], got {}", self.gamma)));
        }
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return Err(Error::Config(format!("dt must be positive, got {}", self.dt)));
        }
        if self.n_steps == 0 {
            return Err(Error::Config("n_steps must be positive".into()));
        }
        match self.variant {
            NoiseVariant::White => {}
            NoiseVariant::Mollified { epsilon } => {
                if !(epsilon > 0.0) {
                    return Err(Error::Config(format!("epsilon must be positive, got {epsilon}")));
                }
            }
            NoiseVariant::BandLimited { n_band, beta } => {
                if n_band < 2 || n_band > self.grid.max_wavenumber() {
                    return Err(Error::Config(format!(
                        "n_band must lie in 2..={}, got {n_band}",
                        self.grid.max_wavenumber()
                    )));
                }
                if !(beta >= 0.0) {
                    return Err(Error::Config(format!("beta must be >= 0, got {beta}")));
                }
            }
            NoiseVariant::Roughened { beta } => {
                if !(beta >= 0.0) {
                    return Err(Error::Config(format!("beta must be >= 0, got {beta}")));
                }
            }
        }
        Ok(())
    }

    pub fn mode_weight(&self, k: i64) -> f64 {
        if k.abs() > self.grid.max_wavenumber() {
            return 0.0;
        }
        self.variant.mode_weight(k)
    }

    /// Stationary variance E|Y_k|² of mode k.
    pub fn stationary_variance(&self, k: i64) -> f64 {
        if k == 0 {
            return 0.0;
        }
        let w = self.mode_weight(k);
        w * w * sigma2_stat(k, self.gamma)
    }
}

/// σ²_stat(k) = 1/(4π|k|^γ) for unit-weight white forcing.
pub fn sigma2_stat(k: i64, gamma: f64) -> f64 {
    1.0 / (4.0 * PI * (k.abs() as f64).powf(gamma))
}

/// E[X_k(t) conj X_k(t)] for X started at 0.
pub fn x_variance(k: i64, gamma: f64, t: f64) -> f64 {
    let lam = (k.abs() as f64).powf(gamma);
    sigma2_stat(k, gamma) * (-(-2.0 * lam * t).exp_m1())
}

/// E[Y_k(t) conj Y_k(t′)] for the stationary process.
pub fn y_covariance(k: i64, gamma: f64, lag: f64) -> f64 {
    let lam = (k.abs() as f64).powf(gamma);
    (-lam * lag.abs()).exp() * sigma2_stat(k, gamma)
}

/// Supplies unit complex Gaussians `(a + ib)/√2` per mode.
pub trait InnovationSource {
    fn next(&mut self) -> Complex64;

    /// Fills modes 1..N/2−1 in ascending order with the conjugate at −k;
    /// zero and Nyquist modes are set to 0.
    fn fill_hermitian(&mut self, out: &mut [Complex64]) {
        let n = out.len();
        out[0] = Complex64::new(0.0, 0.0);
        out[n / 2] = Complex64::new(0.0, 0.0);
        for k in 1..n / 2 {
            let z = self.next();
            out[k] = z;
            out[n - k] = z.conj();
        }
    }
}

pub struct RngInnovations<R> {
    rng: R,
}

impl<R: rand::Rng> RngInnovations<R> {
    pub fn new(rng: R) -> Self {
        Self { rng }
    }
}

impl<R: rand::Rng> InnovationSource for RngInnovations<R> {
    fn next(&mut self) -> Complex64 {
        let a: f64 = StandardNormal.sample(&mut self.rng);
        let b: f64 = StandardNormal.sample(&mut self.rng);
        Complex64::new(a, b) * std::f64::consts::FRAC_1_SQRT_2
    }
}

/// Degenerate source producing only zeros.
#[derive(Clone, Copy, Debug, Default)]
pub struct ZeroInnovations;

impl InnovationSource for ZeroInnovations {
    fn next(&mut self) -> Complex64 {
        Complex64::new(0.0, 0.0)
    }
}

/// One sampled noise realization: per-step increments `∫ ξ_k dt` over each step.
#[derive(Clone, Debug, PartialEq)]
pub struct NoisePath {
    config: NoiseConfig,
    increments: Vec<Vec<Complex64>>,
}

impl NoisePath {
    pub fn config(&self) -> &NoiseConfig {
        &self.config
    }

    pub fn n_steps(&self) -> usize {
        self.increments.len()
    }

    pub fn increment(&self, step: usize, k: i64) -> Complex64 {
        self.config
            .grid
            .index_of(k)
            .map_or(Complex64::new(0.0, 0.0), |i| self.increments[step][i])
    }

    pub fn step(&self, step: usize) -> &[Complex64] {
        &self.increments[step]
    }

    /// ∫_0^T ξ_k dt.
    pub fn time_integral(&self, k: i64) -> Complex64 {
        (0..self.n_steps()).map(|s| self.increment(s, k)).sum()
    }
}

pub fn sample_noise(config: &NoiseConfig) -> Result<NoisePath> {
    sample_noise_path(config, 0)
}

/// Noise for ensemble member `path_index`; the same innovations drive [`build_x_path`].
pub fn sample_noise_path(config: &NoiseConfig, path_index: u64) -> Result<NoisePath> {
    config.validate()?;
    let grid = config.grid;
    let n = grid.n();
    let scale: Vec<f64> = (0..n)
        .map(|i| (config.dt / (2.0 * PI)).sqrt() * config.mode_weight(grid.wavenumber(i)))
        .collect();
    let mut src = RngInnovations::new(stream_rng(config.seed, path_index, Stream::Innovations));
    let mut z = vec![Complex64::new(0.0, 0.0); n];
    let increments = (0..config.n_steps)
        .map(|_| {
            src.fill_hermitian(&mut z);
            z.iter().zip(&scale).map(|(z, s)| z * s).collect()
        })
        .collect();
    Ok(NoisePath {
        config: config.clone(),
        increments,
    })
}

/// Exact OU transition for one mode: returns `e^{−λdt}x + √((1−e^{−2λdt})σ²)·z`
/// with λ = |k|^γ, σ² = weight²/(4π|k|^γ) and `z` drawn from `source`.
pub fn ou_step(
    x: Complex64,
    k: i64,
    gamma: f64,
    dt: f64,
    weight: f64,
    source: &mut impl InnovationSource,
) -> Result<Complex64> {
    let c = OuCoefficients::new(k, gamma, dt, weight)?;
    Ok(c.step(x, source.next()))
}

/// Precomputed transition of one mode.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct OuCoefficients {
    pub decay: f64,
    pub noise_sd: f64,
    pub stationary_sd: f64,
}

impl OuCoefficients {
    pub fn new(k: i64, gamma: f64, dt: f64, weight: f64) -> Result<Self> {
        if k == 0 {
            return Err(Error::Domain("the zero mode carries no noise".into()));
        }
        if !(dt >= 0.0) {
            return Err(Error::Domain(format!("negative time step {dt}")));
        }
        let lam = (k.abs() as f64).powf(gamma);
        let var = weight * weight * sigma2_stat(k, gamma);
        Ok(Self {
            decay: (-lam * dt).exp(),
            noise_sd: (-(-2.0 * lam * dt).exp_m1() * var).sqrt(),
            stationary_sd: var.sqrt(),
        })
    }

    pub fn step(&self, x: Complex64, z: Complex64) -> Complex64 {
        x * self.decay + z * self.noise_sd
    }
}

/// Realized X (zero initial data) and optionally stationary Y.
#[derive(Clone, Debug, PartialEq)]
pub struct OUPath {
    pub x: TimePath,
    pub y: Option<TimePath>,
    /// Mode updates whose innovation exceeded 10 standard deviations.
    pub flagged_steps: usize,
}

struct ModeTable {
    coeffs: Vec<Option<OuCoefficients>>,
}

impl ModeTable {
    fn new(config: &NoiseConfig) -> Self {
        let g = config.grid;
        let coeffs = (0..g.n())
            .map(|i| {
                let k = g.wavenumber(i);
                let w = config.mode_weight(k);
                (k != 0 && i != g.n() / 2 && w != 0.0)
                    .then(|| OuCoefficients::new(k, config.gamma, config.dt, w).unwrap())
            })
            .collect();
        Self { coeffs }
    }

    fn advance(&self, state: &mut [Complex64], z: &[Complex64]) -> usize {
        let mut flagged = 0;
        for ((x, c), z) in state.iter_mut().zip(&self.coeffs).zip(z) {
            match c {
                Some(c) => {
                    if z.norm() > 10.0 {
                        flagged += 1;
                    }
                    *x = c.step(*x, *z);
                }
                None => *x = Complex64::new(0.0, 0.0),
            }
        }
        flagged
    }

    fn stationary_sample(&self, z: &[Complex64]) -> Vec<Complex64> {
        self.coeffs
            .iter()
            .zip(z)
            .map(|(c, z)| c.map_or(Complex64::new(0.0, 0.0), |c| z * c.stationary_sd))
            .collect()
    }
}

/// X for path 0 of `config`.
pub fn build_x(config: &NoiseConfig) -> Result<OUPath> {
    build_x_path(config, 0)
}

pub fn build_x_path(config: &NoiseConfig, path_index: u64) -> Result<OUPath> {
    config.validate()?;
    let mut src = RngInnovations::new(stream_rng(config.seed, path_index, Stream::Innovations));
    build_with_source(config, &mut src, None)
}

/// X and stationary Y for ensemble member `path_index`, driven by the same innovations.
pub fn build_xy(config: &NoiseConfig, path_index: u64) -> Result<OUPath> {
    config.validate()?;
    let mut src = RngInnovations::new(stream_rng(config.seed, path_index, Stream::Innovations));
    let mut init = RngInnovations::new(stream_rng(config.seed, path_index, Stream::Initial));
    build_with_source(config, &mut src, Some(&mut init))
}

/// Core OU integrator over an arbitrary innovation source. With `initial`,
/// also produces Y started from its stationary law.
pub fn build_with_source(
    config: &NoiseConfig,
    source: &mut dyn InnovationSource,
    initial: Option<&mut dyn InnovationSource>,
) -> Result<OUPath> {
    config.validate()?;
    let grid = config.grid;
    let n = grid.n();
    let table = ModeTable::new(config);
    let mut z = vec![Complex64::new(0.0, 0.0); n];

    let mut y_state = initial.map(|src| {
        src.fill_hermitian(&mut z);
        table.stationary_sample(&z)
    });
    let mut x_state = vec![Complex64::new(0.0, 0.0); n];

    let mut xs = Vec::with_capacity(config.n_steps + 1);
    let mut ys = Vec::with_capacity(if y_state.is_some() { config.n_steps + 1 } else { 0 });
    xs.push(SpectralField::zeros(grid));
    if let Some(y) = &y_state {
        ys.push(SpectralField::from_coeffs(grid, y.clone())?);
    }
    let mut flagged = 0;
    for _ in 0..config.n_steps {
        source.fill_hermitian(&mut z);
        flagged += table.advance(&mut x_state, &z);
        xs.push(SpectralField::from_coeffs(grid, x_state.clone())?);
        if let Some(y) = y_state.as_mut() {
            table.advance(y, &z);
            ys.push(SpectralField::from_coeffs(grid, y.clone())?);
        }
    }
    Ok(OUPath {
        x: TimePath::new(0.0, config.dt, xs)?,
        y: if ys.is_empty() {
            None
        } else {
            Some(TimePath::new(0.0, config.dt, ys)?)
        },
        flagged_steps: flagged,
    })
}

/// One exact sample of X(t) (zero start) without building the path; used for
/// spatial statistics at large N.
pub fn sample_x_at(config: &NoiseConfig, t: f64, path_index: u64) -> Result<SpectralField> {
    config.validate()?;
    let grid = config.grid;
    let mut src = RngInnovations::new(stream_rng(config.seed, path_index, Stream::Auxiliary));
    let mut z = vec![Complex64::new(0.0, 0.0); grid.n()];
    src.fill_hermitian(&mut z);
    let coeffs = (0..grid.n())
        .map(|i| {
            let k = grid.wavenumber(i);
            if k == 0 || i == grid.n() / 2 {
                return Complex64::new(0.0, 0.0);
            }
            let w = config.mode_weight(k);
            let lam = (k.abs() as f64).powf(config.gamma);
            z[i] * (w * w * sigma2_stat(k, config.gamma) * -(-2.0 * lam * t).exp_m1()).sqrt()
        })
        .collect();
    SpectralField::from_coeffs(grid, coeffs)
}
