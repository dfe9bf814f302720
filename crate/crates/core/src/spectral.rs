//! Torus discretization and the Fourier representation every other module
//! works in.
//!
//! A real field on 𝕋 = [0, 2π) is stored by its coefficients `c_k`, with
//! `u(x) = Σ_k c_k e^{ikx}` and `c_k = (1/2π) ∫ u e^{-ikx} dx`. Coefficients
//! live in FFT order: index `i < N/2` holds `k = i`, index `i ≥ N/2` holds
//! `k = i - N`.

use std::cell::RefCell;
use std::collections::HashMap;
use std::f64::consts::PI;
use std::ops::{Add, AddAssign, Mul, Neg, Sub, SubAssign};
use std::sync::Arc;

use num_complex::Complex64;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{dimension, Error, Result};

/// |𝕋|. Wavenumbers are integers because of this choice.
pub const TORUS_LENGTH: f64 = 2.0 * PI;

const ZERO: Complex64 = Complex64::new(0.0, 0.0);

thread_local! {
    static PLANS: RefCell<FftCache> = RefCell::new(FftCache::default());
}

struct FftCache {
    planner: FftPlanner<f64>,
    forward: HashMap<usize, Arc<dyn Fft<f64>>>,
    inverse: HashMap<usize, Arc<dyn Fft<f64>>>,
}

impl Default for FftCache {
    fn default() -> Self {
        Self {
            planner: FftPlanner::new(),
            forward: HashMap::new(),
            inverse: HashMap::new(),
        }
    }
}

/// Unnormalized forward transform, `X_k = Σ_j x_j e^{-2πi jk/n}`.
pub(crate) fn fft_forward(buf: &mut [Complex64]) {
    let plan = PLANS.with(|c| {
        let mut c = c.borrow_mut();
        let c = &mut *c;
        c.forward
            .entry(buf.len())
            .or_insert_with(|| c.planner.plan_fft_forward(buf.len()))
            .clone()
    });
    plan.process(buf);
}

/// Unnormalized inverse transform, `x_j = Σ_k X_k e^{2πi jk/n}`.
pub(crate) fn fft_inverse(buf: &mut [Complex64]) {
    let plan = PLANS.with(|c| {
        let mut c = c.borrow_mut();
        let c = &mut *c;
        c.inverse
            .entry(buf.len())
            .or_insert_with(|| c.planner.plan_fft_inverse(buf.len()))
            .clone()
    });
    plan.process(buf);
}

/// Uniform grid of `n` points on the 2π-torus.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "usize", into = "usize")]
pub struct TorusGrid {
    n: usize,
}

impl TorusGrid {
    pub fn new(n: usize) -> Result<Self> {
        if n < 8 || !n.is_power_of_two() {
            return Err(Error::Config(format!(
                "grid size must be a power of two >= 8, got {n}"
            )));
        }
        Ok(Self { n })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    /// Largest retained |k| after dealiased products (N/2 - 1).
    pub fn max_wavenumber(&self) -> i64 {
        self.n as i64 / 2 - 1
    }

    pub fn wavenumber(&self, index: usize) -> i64 {
        if index < self.n / 2 {
            index as i64
        } else {
            index as i64 - self.n as i64
        }
    }

    pub fn index_of(&self, k: i64) -> Option<usize> {
        let half = self.n as i64 / 2;
        if k >= -half && k < half {
            Some(k.rem_euclid(self.n as i64) as usize)
        } else {
            None
        }
    }

    pub fn wavenumbers(&self) -> impl Iterator<Item = i64> + '_ {
        (0..self.n).map(move |i| self.wavenumber(i))
    }

    pub fn points(&self) -> Vec<f64> {
        (0..self.n)
            .map(|j| TORUS_LENGTH * j as f64 / self.n as f64)
            .collect()
    }

    /// Size of the zero-padded grid used for alias-free quadratic products.
    pub fn padded_len(&self) -> usize {
        3 * self.n / 2
    }
}

impl TryFrom<usize> for TorusGrid {
    type Error = Error;
    fn try_from(n: usize) -> Result<Self> {
        TorusGrid::new(n)
    }
}

impl From<TorusGrid> for usize {
    fn from(g: TorusGrid) -> usize {
        g.n
    }
}

/// Fourier coefficients of a real field on the torus.
#[derive(Clone, Debug, PartialEq)]
pub struct SpectralField {
    grid: TorusGrid,
    coeffs: Vec<Complex64>,
}

impl SpectralField {
    pub fn zeros(grid: TorusGrid) -> Self {
        Self {
            grid,
            coeffs: vec![ZERO; grid.n()],
        }
    }

    pub fn from_coeffs(grid: TorusGrid, coeffs: Vec<Complex64>) -> Result<Self> {
        if coeffs.len() != grid.n() {
            return Err(dimension(format!(
                "expected {} coefficients, got {}",
                grid.n(),
                coeffs.len()
            )));
        }
        Ok(Self { grid, coeffs })
    }

    /// Builds a field from `k ↦ c_k`. The caller is responsible for Hermitian symmetry.
    pub fn from_fn(grid: TorusGrid, mut f: impl FnMut(i64) -> Complex64) -> Self {
        let coeffs = (0..grid.n()).map(|i| f(grid.wavenumber(i))).collect();
        Self { grid, coeffs }
    }

    /// `amp e^{ikx} + conj(amp) e^{-ikx}` (just `amp` when k = 0).
    pub fn single_mode(grid: TorusGrid, k: i64, amp: Complex64) -> Result<Self> {
        let i = grid
            .index_of(k)
            .filter(|_| k.abs() <= grid.max_wavenumber())
            .ok_or_else(|| Error::OutOfRange(format!("wavenumber {k} not on grid")))?;
        let mut f = Self::zeros(grid);
        if k == 0 {
            f.coeffs[0] = Complex64::new(amp.re, 0.0);
        } else {
            f.coeffs[i] = amp;
            f.coeffs[grid.index_of(-k).unwrap()] = amp.conj();
        }
        Ok(f)
    }

    pub fn to_spectral(grid: TorusGrid, samples: &[f64]) -> Result<Self> {
        if samples.len() != grid.n() {
            return Err(dimension(format!(
                "expected {} samples, got {}",
                grid.n(),
                samples.len()
            )));
        }
        let mut buf: Vec<Complex64> = samples.iter().map(|&x| Complex64::new(x, 0.0)).collect();
        fft_forward(&mut buf);
        let scale = 1.0 / grid.n() as f64;
        for c in &mut buf {
            *c *= scale;
        }
        Ok(Self { grid, coeffs: buf })
    }

    pub fn to_physical(&self) -> Vec<f64> {
        let mut buf = self.coeffs.clone();
        fft_inverse(&mut buf);
        buf.into_iter().map(|c| c.re).collect()
    }

    pub fn grid(&self) -> TorusGrid {
        self.grid
    }

    pub fn coeffs(&self) -> &[Complex64] {
        &self.coeffs
    }

    pub fn coeffs_mut(&mut self) -> &mut [Complex64] {
        &mut self.coeffs
    }

    pub fn into_coeffs(self) -> Vec<Complex64> {
        self.coeffs
    }

    /// c_k, or zero off the grid.
    pub fn coeff(&self, k: i64) -> Complex64 {
        self.grid.index_of(k).map_or(ZERO, |i| self.coeffs[i])
    }

    pub fn mean(&self) -> f64 {
        self.coeffs[0].re
    }

    pub fn is_zero(&self) -> bool {
        self.coeffs.iter().all(|c| *c == ZERO)
    }

    pub fn project_mean_zero(mut self) -> Self {
        self.coeffs[0] = ZERO;
        self
    }

    /// max_k |c_{-k} - conj(c_k)|, relative to the largest coefficient.
    pub fn hermitian_defect(&self) -> f64 {
        let scale = self
            .coeffs
            .iter()
            .map(|c| c.norm())
            .fold(0.0, f64::max)
            .max(f64::MIN_POSITIVE);
        let n = self.grid.n();
        let mut worst = self.coeffs[0].im.abs();
        for i in 1..n {
            let d = (self.coeffs[n - i] - self.coeffs[i].conj()).norm();
            worst = worst.max(d);
        }
        worst / scale
    }

    /// Multiplies c_k by `m(k)`. The Nyquist mode has no partner on the grid,
    /// so it is scaled by Re m(-N/2), which keeps real fields real.
    pub fn apply_multiplier(&self, m: impl Fn(i64) -> Complex64) -> Self {
        let n = self.grid.n();
        let mut out = self.clone();
        for (i, c) in out.coeffs.iter_mut().enumerate() {
            let k = self.grid.wavenumber(i);
            if i == n / 2 {
                *c *= m(k).re;
            } else {
                *c *= m(k);
            }
        }
        out
    }

    /// Real-symbol variant of [`apply_multiplier`](Self::apply_multiplier).
    pub fn apply_real_multiplier(&self, m: impl Fn(i64) -> f64) -> Self {
        let mut out = self.clone();
        for (i, c) in out.coeffs.iter_mut().enumerate() {
            *c *= m(self.grid.wavenumber(i));
        }
        out
    }

    pub fn derivative(&self) -> Self {
        self.apply_multiplier(|k| Complex64::new(0.0, k as f64))
    }

    pub fn scale(&self, a: f64) -> Self {
        let mut out = self.clone();
        for c in &mut out.coeffs {
            *c *= a;
        }
        out
    }

    /// `self += a * other`.
    pub fn axpy(&mut self, a: f64, other: &SpectralField) {
        debug_assert_eq!(self.grid, other.grid);
        for (c, o) in self.coeffs.iter_mut().zip(&other.coeffs) {
            *c += o * a;
        }
    }

    /// ‖f‖²_{L²(𝕋)} = 2π Σ |c_k|².
    pub fn l2_norm_sq(&self) -> f64 {
        TORUS_LENGTH * self.coeffs.iter().map(|c| c.norm_sqr()).sum::<f64>()
    }

    pub fn l2_norm(&self) -> f64 {
        self.l2_norm_sq().sqrt()
    }

    /// ⟨f, g⟩_{L²} = ∫ f g dx for real fields.
    pub fn inner(&self, other: &SpectralField) -> f64 {
        TORUS_LENGTH
            * self
                .coeffs
                .iter()
                .zip(&other.coeffs)
                .map(|(a, b)| (a * b.conj()).re)
                .sum::<f64>()
    }

    /// Sobolev norm with Fourier weight (1 + k²)^{s/2}.
    pub fn sobolev_norm(&self, s: f64) -> f64 {
        let sum: f64 = self
            .coeffs
            .iter()
            .enumerate()
            .map(|(i, c)| {
                let k = self.grid.wavenumber(i) as f64;
                (1.0 + k * k).powf(s) * c.norm_sqr()
            })
            .sum();
        (TORUS_LENGTH * sum).sqrt()
    }

    /// Sup norm evaluated on a grid oversampled by `factor`.
    pub fn sup_norm(&self, factor: usize) -> f64 {
        let m = self.grid.n() * factor.max(1);
        let mut buf = vec![ZERO; m];
        let kmax = self.grid.n() as i64 / 2;
        for (i, c) in self.coeffs.iter().enumerate() {
            let k = self.grid.wavenumber(i);
            if k.abs() < kmax {
                buf[k.rem_euclid(m as i64) as usize] = *c;
            }
        }
        // The Nyquist mode of a real field is the real cosine cos(N x / 2).
        let nyq = self.coeffs[self.grid.n() / 2];
        if nyq != ZERO {
            buf[kmax as usize] += nyq * 0.5;
            buf[m - kmax as usize] += nyq * 0.5;
        }
        fft_inverse(&mut buf);
        buf.iter().map(|c| c.re.abs()).fold(0.0, f64::max)
    }

    /// Same field on another grid: truncation or zero padding of |k| ≤ N/2 − 1.
    pub fn resample(&self, grid: TorusGrid) -> SpectralField {
        let kmax = self.grid.max_wavenumber().min(grid.max_wavenumber());
        let mut out = SpectralField::zeros(grid);
        for k in -kmax..=kmax {
            out.coeffs[grid.index_of(k).unwrap()] = self.coeff(k);
        }
        out
    }

    /// Exact product truncated to |k| ≤ N/2 - 1, via 3N/2 zero padding.
    pub fn dealiased_product(&self, other: &SpectralField) -> Result<SpectralField> {
        dealiased_product(self, other)
    }

    pub(crate) fn check_same_grid(&self, other: &SpectralField) -> Result<()> {
        if self.grid != other.grid {
            return Err(dimension(format!(
                "grid {} vs grid {}",
                self.grid.n(),
                other.grid.n()
            )));
        }
        Ok(())
    }

    /// Retained coefficients placed on the padded grid.
    fn padded_spectrum(&self) -> Vec<Complex64> {
        let m = self.grid.padded_len();
        let kmax = self.grid.max_wavenumber();
        let mut buf = vec![ZERO; m];
        for k in -kmax..=kmax {
            buf[k.rem_euclid(m as i64) as usize] = self.coeff(k);
        }
        buf
    }
}

/// Physical values of two fields on the padded grid from a single complex
/// transform (real part carries `f`, imaginary part carries `g`).
pub(crate) fn padded_pair(f: &SpectralField, g: &SpectralField) -> (Vec<f64>, Vec<f64>) {
    let a = f.padded_spectrum();
    let b = g.padded_spectrum();
    let i = Complex64::new(0.0, 1.0);
    let mut buf: Vec<Complex64> = a.iter().zip(&b).map(|(x, y)| x + i * y).collect();
    fft_inverse(&mut buf);
    buf.into_iter().map(|c| (c.re, c.im)).unzip()
}

pub(crate) fn padded_single(f: &SpectralField) -> Vec<f64> {
    let mut buf = f.padded_spectrum();
    fft_inverse(&mut buf);
    buf.into_iter().map(|c| c.re).collect()
}

/// Inverse of [`padded_pair`] for one real array: transform back and keep
/// |k| ≤ N/2 - 1.
pub(crate) fn from_padded(grid: TorusGrid, values: &[f64]) -> SpectralField {
    let m = grid.padded_len();
    debug_assert_eq!(values.len(), m);
    let mut buf: Vec<Complex64> = values.iter().map(|&x| Complex64::new(x, 0.0)).collect();
    fft_forward(&mut buf);
    let scale = 1.0 / m as f64;
    let kmax = grid.max_wavenumber();
    let mut out = SpectralField::zeros(grid);
    for k in -kmax..=kmax {
        out.coeffs[grid.index_of(k).unwrap()] = buf[k.rem_euclid(m as i64) as usize] * scale;
    }
    out
}

pub fn dealiased_product(f: &SpectralField, g: &SpectralField) -> Result<SpectralField> {
    f.check_same_grid(g)?;
    let (a, b) = padded_pair(f, g);
    let prod: Vec<f64> = a.iter().zip(&b).map(|(x, y)| x * y).collect();
    Ok(from_padded(f.grid, &prod))
}

pub fn to_spectral(grid: TorusGrid, samples: &[f64]) -> Result<SpectralField> {
    SpectralField::to_spectral(grid, samples)
}

pub fn apply_multiplier(f: &SpectralField, m: impl Fn(i64) -> Complex64) -> SpectralField {
    f.apply_multiplier(m)
}

impl Add for &SpectralField {
    type Output = SpectralField;
    fn add(self, rhs: &SpectralField) -> SpectralField {
        let mut out = self.clone();
        out += rhs;
        out
    }
}

impl Sub for &SpectralField {
    type Output = SpectralField;
    fn sub(self, rhs: &SpectralField) -> SpectralField {
        let mut out = self.clone();
        out -= rhs;
        out
    }
}

impl AddAssign<&SpectralField> for SpectralField {
    fn add_assign(&mut self, rhs: &SpectralField) {
        assert_eq!(self.grid, rhs.grid, "grid mismatch");
        for (a, b) in self.coeffs.iter_mut().zip(&rhs.coeffs) {
            *a += b;
        }
    }
}

impl SubAssign<&SpectralField> for SpectralField {
    fn sub_assign(&mut self, rhs: &SpectralField) {
        assert_eq!(self.grid, rhs.grid, "grid mismatch");
        for (a, b) in self.coeffs.iter_mut().zip(&rhs.coeffs) {
            *a -= b;
        }
    }
}

impl Mul<f64> for &SpectralField {
    type Output = SpectralField;
    fn mul(self, a: f64) -> SpectralField {
        self.scale(a)
    }
}

impl Neg for &SpectralField {
    type Output = SpectralField;
    fn neg(self) -> SpectralField {
        self.scale(-1.0)
    }
}

/// Fields sampled on a uniform time grid `t0 + n dt`.
#[derive(Clone, Debug, PartialEq)]
pub struct TimePath {
    t0: f64,
    dt: f64,
    fields: Vec<SpectralField>,
}

impl TimePath {
    pub fn new(t0: f64, dt: f64, fields: Vec<SpectralField>) -> Result<Self> {
        if fields.is_empty() {
            return Err(Error::InsufficientData("empty time path".into()));
        }
        if !(dt > 0.0) {
            return Err(Error::Domain(format!("time step must be positive, got {dt}")));
        }
        let grid = fields[0].grid();
        if fields.iter().any(|f| f.grid() != grid) {
            return Err(dimension("fields of a time path must share one grid"));
        }
        Ok(Self { t0, dt, fields })
    }

    pub fn zeros(grid: TorusGrid, t0: f64, dt: f64, len: usize) -> Self {
        Self {
            t0,
            dt,
            fields: vec![SpectralField::zeros(grid); len.max(1)],
        }
    }

    /// The same field at every node.
    pub fn constant(field: &SpectralField, t0: f64, dt: f64, len: usize) -> Self {
        Self {
            t0,
            dt,
            fields: vec![field.clone(); len.max(1)],
        }
    }

    pub fn from_fn(
        grid: TorusGrid,
        t0: f64,
        dt: f64,
        len: usize,
        mut f: impl FnMut(usize, f64) -> SpectralField,
    ) -> Result<Self> {
        let fields = (0..len).map(|n| f(n, t0 + n as f64 * dt)).collect();
        let p = Self::new(t0, dt, fields)?;
        if p.grid() != grid {
            return Err(dimension("generated fields do not match the grid"));
        }
        Ok(p)
    }

    pub fn len(&self) -> usize {
        self.fields.len()
    }

    pub fn is_empty(&self) -> bool {
        self.fields.is_empty()
    }

    pub fn t0(&self) -> f64 {
        self.t0
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn time(&self, n: usize) -> f64 {
        self.t0 + n as f64 * self.dt
    }

    pub fn final_time(&self) -> f64 {
        self.time(self.len() - 1)
    }

    pub fn grid(&self) -> TorusGrid {
        self.fields[0].grid()
    }

    pub fn fields(&self) -> &[SpectralField] {
        &self.fields
    }

    pub fn field(&self, n: usize) -> &SpectralField {
        &self.fields[n]
    }

    pub fn last(&self) -> &SpectralField {
        self.fields.last().unwrap()
    }

    pub fn into_fields(self) -> Vec<SpectralField> {
        self.fields
    }

    pub fn push(&mut self, f: SpectralField) {
        assert_eq!(f.grid(), self.grid(), "grid mismatch");
        self.fields.push(f);
    }

    /// Nodes `start..=end`, re-based so the new path starts at `time(start)`.
    pub fn slice(&self, start: usize, end: usize) -> Result<TimePath> {
        if start > end || end >= self.len() {
            return Err(Error::OutOfRange(format!(
                "slice {start}..={end} of a path with {} nodes",
                self.len()
            )));
        }
        Ok(TimePath {
            t0: self.time(start),
            dt: self.dt,
            fields: self.fields[start..=end].to_vec(),
        })
    }

    /// Every `stride`-th node.
    pub fn subsample(&self, stride: usize) -> TimePath {
        let stride = stride.max(1);
        TimePath {
            t0: self.t0,
            dt: self.dt * stride as f64,
            fields: self.fields.iter().step_by(stride).cloned().collect(),
        }
    }

    pub fn map(&self, f: impl Fn(&SpectralField) -> SpectralField) -> TimePath {
        TimePath {
            t0: self.t0,
            dt: self.dt,
            fields: self.fields.iter().map(f).collect(),
        }
    }

    pub fn try_zip_with(
        &self,
        other: &TimePath,
        f: impl Fn(&SpectralField, &SpectralField) -> Result<SpectralField>,
    ) -> Result<TimePath> {
        self.check_compatible(other)?;
        let fields = self
            .fields
            .iter()
            .zip(&other.fields)
            .map(|(a, b)| f(a, b))
            .collect::<Result<Vec<_>>>()?;
        Ok(TimePath {
            t0: self.t0,
            dt: self.dt,
            fields,
        })
    }

    pub fn add(&self, other: &TimePath) -> Result<TimePath> {
        self.try_zip_with(other, |a, b| Ok(a + b))
    }

    pub fn sub(&self, other: &TimePath) -> Result<TimePath> {
        self.try_zip_with(other, |a, b| Ok(a - b))
    }

    /// C_T L² norm, max over nodes.
    pub fn sup_l2(&self) -> f64 {
        self.fields.iter().map(|f| f.l2_norm()).fold(0.0, f64::max)
    }

    pub fn sup_sobolev(&self, s: f64) -> f64 {
        self.fields
            .iter()
            .map(|f| f.sobolev_norm(s))
            .fold(0.0, f64::max)
    }

    pub(crate) fn check_compatible(&self, other: &TimePath) -> Result<()> {
        if self.grid() != other.grid() {
            return Err(dimension("time paths live on different grids"));
        }
        if self.len() != other.len() {
            return Err(dimension(format!(
                "time paths have {} and {} nodes",
                self.len(),
                other.len()
            )));
        }
        if (self.dt - other.dt).abs() > 1e-12 * self.dt {
            return Err(dimension(format!(
                "time steps differ: {} vs {}",
                self.dt, other.dt
            )));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_field(grid: TorusGrid, seed: u64) -> SpectralField {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let samples: Vec<f64> = (0..grid.n()).map(|_| rng.random_range(-1.0..1.0)).collect();
        SpectralField::to_spectral(grid, &samples).unwrap()
    }

    /// Direct O(N²) convolution truncated to |k| ≤ N/2 - 1.
    fn brute_convolution(f: &SpectralField, g: &SpectralField) -> SpectralField {
        let grid = f.grid();
        let kmax = grid.max_wavenumber();
        SpectralField::from_fn(grid, |k| {
            if k.abs() > kmax {
                return ZERO;
            }
            let mut acc = ZERO;
            for p in -kmax..=kmax {
                let q = k - p;
                if q.abs() <= kmax {
                    acc += f.coeff(p) * g.coeff(q);
                }
            }
            acc
        })
    }

    #[test]
    fn grid_validation() {
        assert!(TorusGrid::new(6).is_err());
        assert!(TorusGrid::new(4).is_err());
        assert!(TorusGrid::new(24).is_err());
        let g = TorusGrid::new(16).unwrap();
        assert_eq!(g.wavenumber(7), 7);
        assert_eq!(g.wavenumber(8), -8);
        assert_eq!(g.index_of(-1), Some(15));
        assert_eq!(g.index_of(8), None);
    }

    #[test]
    fn constant_and_cosine() {
        let g = TorusGrid::new(16).unwrap();
        let f = SpectralField::to_spectral(g, &[1.0; 16]).unwrap();
        assert!((f.coeff(0) - Complex64::new(1.0, 0.0)).norm() < 1e-15);
        assert!(f.coeffs()[1..].iter().all(|c| c.norm() < 1e-15));

        let xs = g.points();
        let c: Vec<f64> = xs.iter().map(|x| x.cos()).collect();
        let f = SpectralField::to_spectral(g, &c).unwrap();
        for k in g.wavenumbers() {
            let want = if k.abs() == 1 { 0.5 } else { 0.0 };
            assert!((f.coeff(k) - Complex64::new(want, 0.0)).norm() < 1e-15, "k={k}");
        }
    }

    #[test]
    fn sample_count_mismatch() {
        let g = TorusGrid::new(8).unwrap();
        assert!(matches!(
            SpectralField::to_spectral(g, &[0.0; 7]),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn round_trip_all_sizes() {
        for p in 3..=12 {
            let g = TorusGrid::new(1 << p).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(p as u64);
            let s: Vec<f64> = (0..g.n()).map(|_| rng.random_range(-1.0..1.0)).collect();
            let f = SpectralField::to_spectral(g, &s).unwrap();
            assert!(f.hermitian_defect() < 1e-12);
            let back = f.to_physical();
            let scale = s.iter().map(|x| x.abs()).fold(0.0, f64::max);
            let err = s.iter().zip(&back).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            assert!(err <= 1e-12 * scale, "N={} err={err}", g.n());
        }
    }

    #[test]
    fn multiplier_examples() {
        let g = TorusGrid::new(16).unwrap();
        let e1 = SpectralField::single_mode(g, 1, Complex64::new(1.0, 0.0)).unwrap();
        let lap = e1.apply_multiplier(|k| Complex64::new(-(k.abs() as f64).powf(2.0), 0.0));
        assert!((lap.coeff(1) + 1.0).norm() < 1e-15);

        let e3 = SpectralField::single_mode(g, 3, Complex64::new(1.0, 0.0)).unwrap();
        assert!((e3.derivative().coeff(3) - Complex64::new(0.0, 3.0)).norm() < 1e-15);

        // ik / (1 + k²) at k = 2 is 2i/5.
        let e2 = SpectralField::single_mode(g, 2, Complex64::new(1.0, 0.0)).unwrap();
        let h = e2.apply_multiplier(|k| Complex64::new(0.0, k as f64 / (1.0 + (k * k) as f64)));
        assert!((h.coeff(2) - Complex64::new(0.0, 0.4)).norm() < 1e-15);
        assert!(h.hermitian_defect() < 1e-15);
    }

    #[test]
    fn derivative_keeps_real_fields_real() {
        let g = TorusGrid::new(32).unwrap();
        let f = random_field(g, 3);
        assert!(f.derivative().hermitian_defect() < 1e-14);
    }

    #[test]
    fn single_mode_square() {
        let g = TorusGrid::new(8).unwrap();
        let one = Complex64::new(1.0, 0.0);
        // (e^{ix} + e^{-ix})² = e^{2ix} + 2 + e^{-2ix}.
        let c = SpectralField::single_mode(g, 1, one).unwrap();
        let sq = c.dealiased_product(&c).unwrap();
        for k in g.wavenumbers() {
            let want = match k.abs() {
                2 => 1.0,
                0 => 2.0,
                _ => 0.0,
            };
            assert!((sq.coeff(k) - want).norm() < 1e-15, "k={k}");
        }
    }

    #[test]
    fn product_identity_element() {
        let g = TorusGrid::new(32).unwrap();
        let f = random_field(g, 9);
        let one = SpectralField::single_mode(g, 0, Complex64::new(1.0, 0.0)).unwrap();
        let p = f.dealiased_product(&one).unwrap();
        // The Nyquist mode is dropped by the truncation.
        let mut want = f.clone();
        want.coeffs_mut()[16] = ZERO;
        assert!((&p - &want).l2_norm() < 1e-13);
    }

    #[test]
    fn product_matches_brute_convolution() {
        let g = TorusGrid::new(16).unwrap();
        let f = SpectralField::from_fn(g, |k| {
            if k.abs() <= 5 {
                Complex64::new(1.0, 0.0)
            } else {
                ZERO
            }
        });
        let p = f.dealiased_product(&f).unwrap();
        let want = brute_convolution(&f, &f);
        for k in g.wavenumbers() {
            assert!((p.coeff(k) - want.coeff(k)).norm() < 1e-12, "k={k}");
        }
        // Spot value: the number of pairs (p, q) with |p|, |q| ≤ 5 and p + q = 3.
        assert!((p.coeff(3).re - 8.0).abs() < 1e-12);
    }

    #[test]
    fn grid_mismatch_rejected() {
        let a = SpectralField::zeros(TorusGrid::new(8).unwrap());
        let b = SpectralField::zeros(TorusGrid::new(16).unwrap());
        assert!(matches!(a.dealiased_product(&b), Err(Error::Dimension(_))));
    }

    #[test]
    fn sup_norm_of_cosine() {
        let g = TorusGrid::new(16).unwrap();
        let f = SpectralField::single_mode(g, 3, Complex64::new(0.0, 0.5)).unwrap();
        // i/2 e^{3ix} - i/2 e^{-3ix} = -sin 3x.
        assert!((f.sup_norm(4) - 1.0).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn skew_symmetry_of_dealiased_advection(seed in 0u64..500, p in 3u32..9) {
            let g = TorusGrid::new(1 << p).unwrap();
            let v = random_field(g, seed);
            let v2 = v.dealiased_product(&v).unwrap();
            let pairing = v.inner(&v2.derivative());
            prop_assert!(pairing.abs() <= 1e-10 * (1.0 + v.l2_norm().powi(3)));
        }

        #[test]
        fn product_commutative_and_real(seed in 0u64..500) {
            let g = TorusGrid::new(64).unwrap();
            let f = random_field(g, seed);
            let h = random_field(g, seed + 1000);
            let fh = f.dealiased_product(&h).unwrap();
            let hf = h.dealiased_product(&f).unwrap();
            prop_assert!((&fh - &hf).l2_norm() < 1e-13);
            prop_assert!(fh.hermitian_defect() < 1e-12);
        }

        #[test]
        fn multipliers_compose(seed in 0u64..200, a in 0.1f64..2.0, b in 0.1f64..2.0) {
            let g = TorusGrid::new(64).unwrap();
            let f = random_field(g, seed);
            let m1 = |k: i64| Complex64::new((-(a * (k * k) as f64)).exp(), 0.0);
            let m2 = |k: i64| Complex64::new(0.0, b * k as f64);
            let seq = f.apply_multiplier(m1).apply_multiplier(m2);
            let once = f.apply_multiplier(|k| m1(k) * m2(k));
            prop_assert!((&seq - &once).l2_norm() < 1e-13);
        }
    }
}
