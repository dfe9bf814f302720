//! Fractional heat semigroup, exponential Duhamel quadrature, the Picard
//! mild-solution solver for `v = u − X`, global continuation and the energy
//! ledger.
//!
//! The equations are written `∂_t u + |D|^γ u = N(u) + ξ` with
//! - Burgers: `N(u) = ½∂_x(u²)`
//! - DP:      `N(u) = ½∂_x(u²) + (3/2)(1 − ∂_x²)^{-1}∂_x(u²)`
//!
//! and `v` solves the mild equation `v(t) = P(t)v(0) + ∫_0^t P(t−s) N(v + X)(s) ds`.

use std::fmt;

use num_complex::Complex64;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::besov::{besov_norm, BesovSpec};
use crate::error::{Error, Result};
use crate::spectral::{from_padded, padded_single, SpectralField, TimePath, TorusGrid};

fn lambda(k: i64, gamma: f64) -> f64 {
    (k.abs() as f64).powf(gamma)
}

/// P(t)f, the multiplier e^{−t|k|^γ}.
pub fn semigroup(f: &SpectralField, t: f64, gamma: f64) -> Result<SpectralField> {
    if !(t >= 0.0) {
        return Err(Error::Domain(format!("semigroup time must be >= 0, got {t}")));
    }
    Ok(f.apply_real_multiplier(|k| (-t * lambda(k, gamma)).exp()))
}

/// e^{−t|k|^γ}/(1 + k²): the semigroup composed with the DP smoothing.
pub fn smoothed_semigroup(f: &SpectralField, t: f64, gamma: f64) -> Result<SpectralField> {
    if !(t >= 0.0) {
        return Err(Error::Domain(format!("semigroup time must be >= 0, got {t}")));
    }
    Ok(f.apply_real_multiplier(|k| (-t * lambda(k, gamma)).exp() / (1.0 + (k * k) as f64)))
}

/// (1 − ∂_x²)^{-1}∂_x, symbol ik/(1 + k²).
pub fn dp_multiplier(f: &SpectralField) -> SpectralField {
    f.apply_multiplier(|k| Complex64::new(0.0, k as f64 / (1.0 + (k * k) as f64)))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Equation {
    Burgers,
    Dp,
}

impl fmt::Display for Equation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Equation::Burgers => "burgers",
            Equation::Dp => "dp",
        })
    }
}

impl Equation {
    /// Symbol s(k) with N(u)_k = s(k)·(u²)_k.
    pub fn symbol(&self, k: i64) -> Complex64 {
        let kf = k as f64;
        let m = match self {
            Equation::Burgers => 0.5,
            Equation::Dp => 0.5 + 1.5 / (1.0 + kf * kf),
        };
        Complex64::new(0.0, kf * m)
    }

    /// Energy weight m(k) making ⟨m u, N(u)⟩ = 0: 1 for Burgers and
    /// (1 + k²)/(4 + k²) for DP, i.e. ⟨(1 − ∂²)u, (4 − ∂²)^{-1}u⟩.
    pub fn energy_weight(&self, k: i64) -> f64 {
        match self {
            Equation::Burgers => 1.0,
            Equation::Dp => {
                let k2 = (k * k) as f64;
                (1.0 + k2) / (4.0 + k2)
            }
        }
    }

    pub fn nonlinearity(&self, u: &SpectralField) -> SpectralField {
        let sq = square(u);
        sq.apply_multiplier(|k| self.symbol(k))
    }
}

/// Dealiased u².
pub fn square(u: &SpectralField) -> SpectralField {
    let mut p = padded_single(u);
    for x in &mut p {
        *x *= *x;
    }
    from_padded(u.grid(), &p)
}

/// Per-mode weights of the exponential trapezoid rule:
/// `D_{n+1} = e^{−λh} D_n + a h_n + b h_{n+1}` integrates
/// `∫ e^{−λ(t−s)} h(s) ds` exactly for piecewise-linear h.
#[derive(Clone, Debug)]
pub struct EtdCoefficients {
    pub decay: Vec<f64>,
    pub a: Vec<f64>,
    pub b: Vec<f64>,
}

fn phi2(x: f64) -> f64 {
    // (1 − e^{−x}(1 + x))/x².
    if x < 0.1 {
        let mut term = 1.0;
        let mut sum = 0.0;
        for n in 2..12 {
            // term = (−x)^{n−2}/n!
            if n > 2 {
                term *= -x / n as f64;
            } else {
                term = 0.5;
            }
            sum += (n - 1) as f64 * term;
        }
        sum
    } else {
        (1.0 - (-x).exp() * (1.0 + x)) / (x * x)
    }
}

impl EtdCoefficients {
    pub fn new(grid: TorusGrid, gamma: f64, h: f64) -> Self {
        let n = grid.n();
        let mut decay = Vec::with_capacity(n);
        let mut a = Vec::with_capacity(n);
        let mut b = Vec::with_capacity(n);
        for i in 0..n {
            let lam = lambda(grid.wavenumber(i), gamma);
            let x = lam * h;
            let e1 = if x == 0.0 { h } else { -(-x).exp_m1() / lam };
            let ai = h * phi2(x);
            decay.push((-x).exp());
            a.push(ai);
            b.push(e1 - ai);
        }
        Self { decay, a, b }
    }
}

/// Duhamel integral `D(t_n) = ∫_0^{t_n} P(t_n − s) h(s) ds` of a forcing path.
pub fn duhamel(h: &TimePath, gamma: f64) -> TimePath {
    let etd = EtdCoefficients::new(h.grid(), gamma, h.dt());
    duhamel_with(h, &etd)
}

fn duhamel_with(h: &TimePath, etd: &EtdCoefficients) -> TimePath {
    let grid = h.grid();
    let mut out = Vec::with_capacity(h.len());
    let mut d = SpectralField::zeros(grid);
    out.push(d.clone());
    for n in 0..h.len() - 1 {
        let h0 = h.field(n).coeffs();
        let h1 = h.field(n + 1).coeffs();
        for (i, c) in d.coeffs_mut().iter_mut().enumerate() {
            *c = *c * etd.decay[i] + h0[i] * etd.a[i] + h1[i] * etd.b[i];
        }
        out.push(d.clone());
    }
    TimePath::new(h.t0(), h.dt(), out).expect("non-empty path")
}

/// Forcing ½∂_x(f g) at every node.
fn bilinear_forcing(f: &TimePath, g: &TimePath) -> Result<TimePath> {
    f.try_zip_with(g, |a, b| {
        let p = a.dealiased_product(b)?;
        Ok(p.apply_multiplier(|k| Equation::Burgers.symbol(k)))
    })
}

/// B(f, g)(t_n) = ∫_0^{t_n} P(t_n − s) ½∂_x(f g)(s) ds.
pub fn duhamel_bilinear(f: &TimePath, g: &TimePath, t_index: usize, gamma: f64) -> Result<SpectralField> {
    if t_index >= f.len() {
        return Err(Error::OutOfRange(format!(
            "time index {t_index} beyond path of {} nodes",
            f.len()
        )));
    }
    let path = duhamel_bilinear_path(&f.slice(0, t_index)?, &g.slice(0, t_index)?, gamma)?;
    Ok(path.last().clone())
}

pub fn duhamel_bilinear_path(f: &TimePath, g: &TimePath, gamma: f64) -> Result<TimePath> {
    Ok(duhamel(&bilinear_forcing(f, g)?, gamma))
}

fn default_tol() -> f64 {
    1e-9
}
fn default_iters() -> usize {
    60
}
fn default_s_work() -> f64 {
    0.55
}
fn default_equation() -> Equation {
    Equation::Burgers
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SolverConfig {
    pub gamma: f64,
    /// Final time T.
    pub horizon: f64,
    pub dt: f64,
    pub grid: TorusGrid,
    #[serde(default = "default_equation")]
    pub equation: Equation,
    #[serde(default = "default_tol")]
    pub picard_tol: f64,
    #[serde(default = "default_iters")]
    pub picard_max_iters: usize,
    #[serde(default = "default_s_work")]
    pub s_work: f64,
    /// Initial local window length; defaults to the horizon.
    #[serde(default)]
    pub window: Option<f64>,
}

/// Fewest steps a local window may shrink to.
pub const MIN_WINDOW_STEPS: usize = 8;

impl SolverConfig {
    pub fn new(grid: TorusGrid, gamma: f64, horizon: f64, dt: f64) -> Result<Self> {
        let c = Self {
            gamma,
            horizon,
            dt,
            grid,
            equation: Equation::Burgers,
            picard_tol: default_tol(),
            picard_max_iters: default_iters(),
            s_work: default_s_work(),
            window: None,
        };
        c.validate()?;
        Ok(c)
    }

    pub fn with_equation(mut self, eq: Equation) -> Self {
        self.equation = eq;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.gamma > 1.0 && self.gamma <= 2.0) {
            return Err(Error::Config(format!("gamma must lie in (1, 2], got {}", self.gamma)));
        }
        if !(self.dt > 0.0 && self.dt < self.horizon) {
            return Err(Error::Config(format!(
                "need 0 < dt < T, got dt = {}, T = {}",
                self.dt, self.horizon
            )));
        }
        let n = self.horizon / self.dt;
        if (n - n.round()).abs() > 1e-6 * n {
            return Err(Error::Config(format!(
                "T = {} is not a whole number of steps dt = {}",
                self.horizon, self.dt
            )));
        }
        if !(self.picard_tol > 0.0) {
            return Err(Error::Config("picard_tol must be positive".into()));
        }
        if self.picard_max_iters == 0 {
            return Err(Error::Config("picard_max_iters must be positive".into()));
        }
        if !(self.s_work > 0.5) {
            return Err(Error::Config(format!("s_work must exceed 1/2, got {}", self.s_work)));
        }
        if let Some(w) = self.window {
            if !(w > 0.0) {
                return Err(Error::Config(format!("window must be positive, got {w}")));
            }
        }
        Ok(())
    }

    pub fn n_steps(&self) -> usize {
        (self.horizon / self.dt).round() as usize
    }

    pub fn window_steps(&self) -> usize {
        let w = self.window.unwrap_or(self.horizon);
        ((w / self.dt).round() as usize).clamp(1, self.n_steps())
    }
}

/// Picard history of one local solve.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct IterationReport {
    pub iterations: usize,
    /// C_T H^{s_work} norm of successive differences.
    pub increments: Vec<f64>,
    pub ratios: Vec<f64>,
    pub converged: bool,
    pub window: f64,
    pub start_time: f64,
}

impl IterationReport {
    /// Last recorded ratio between successive increments.
    pub fn final_ratio(&self) -> Option<f64> {
        self.ratios.last().copied()
    }

    /// Largest ratio after the first iteration, ignoring increments already at roundoff.
    pub fn max_ratio(&self, floor: f64) -> Option<f64> {
        self.increments
            .windows(2)
            .filter(|w| w[0] > floor)
            .map(|w| w[1] / w[0])
            .fold(None, |m, r| Some(m.map_or(r, |m: f64| m.max(r))))
    }
}

/// Mild solution on one window.
#[derive(Clone, Debug)]
pub struct LocalSolution {
    pub v: TimePath,
    pub report: IterationReport,
}

fn check_mean_zero(u0: &SpectralField) -> Result<()> {
    let scale = u0.l2_norm().max(1.0);
    if u0.mean().abs() > 1e-12 * scale || u0.coeffs()[0].im.abs() > 1e-12 * scale {
        return Err(Error::Domain(format!(
            "initial datum must be mean-zero, mean = {}",
            u0.mean()
        )));
    }
    Ok(())
}

fn check_driver(u0: &SpectralField, x: &TimePath, cfg: &SolverConfig) -> Result<()> {
    cfg.validate()?;
    if u0.grid() != cfg.grid || x.grid() != cfg.grid {
        return Err(Error::Dimension(format!(
            "solver grid N = {}, initial datum N = {}, driver N = {}",
            cfg.grid.n(),
            u0.grid().n(),
            x.grid().n()
        )));
    }
    if (x.dt() - cfg.dt).abs() > 1e-9 * cfg.dt {
        return Err(Error::Dimension(format!(
            "driver step {} differs from solver step {}",
            x.dt(),
            cfg.dt
        )));
    }
    if x.len() < 2 {
        return Err(Error::InsufficientData("driver path needs at least two nodes".into()));
    }
    check_mean_zero(u0)
}

/// Picard iteration for `v = P(t)(u0 − X(t0)) + D[N(v + X)]` on the whole span of `x`.
pub fn solve_local(u0: &SpectralField, x: &TimePath, cfg: &SolverConfig) -> Result<LocalSolution> {
    check_driver(u0, x, cfg)?;
    let v0 = u0 - x.field(0);
    solve_window(&v0, x, cfg, None)
}

/// Evolution P(t_n)v0 at every node.
pub(crate) fn free_evolution(v0: &SpectralField, gamma: f64, t0: f64, dt: f64, len: usize) -> TimePath {
    let grid = v0.grid();
    let mut fields = Vec::with_capacity(len);
    let mut cur = v0.clone();
    let step: Vec<f64> = grid.wavenumbers().map(|k| (-dt * lambda(k, gamma)).exp()).collect();
    for n in 0..len {
        if n > 0 {
            for (c, e) in cur.coeffs_mut().iter_mut().zip(&step) {
                *c *= e;
            }
        }
        fields.push(cur.clone());
    }
    TimePath::new(t0, dt, fields).expect("non-empty")
}

fn sup_sobolev_diff(a: &TimePath, b: &TimePath, s: f64) -> f64 {
    a.fields()
        .par_iter()
        .zip(b.fields())
        .map(|(x, y)| (x - y).sobolev_norm(s))
        .reduce(|| 0.0, f64::max)
}

/// Ratio test shared with the paracontrolled solver. Returns `Some(err)` when
/// iteration must stop without convergence.
pub(crate) fn contraction_verdict(
    report: &IterationReport,
    max_iters: usize,
    window: f64,
) -> Option<Error> {
    let r = &report.ratios;
    let last = report.increments.last().copied().unwrap_or(0.0);
    if !last.is_finite() {
        return Some(Error::Divergence {
            report: Box::new(report.clone()),
        });
    }
    if r.len() >= 3 && r[r.len() - 3..].iter().all(|&x| x >= 1.0) {
        return Some(Error::NonContraction {
            window,
            suggested_window: window / 2.0,
            report: Box::new(report.clone()),
        });
    }
    if report.iterations >= max_iters {
        return Some(Error::Divergence {
            report: Box::new(report.clone()),
        });
    }
    None
}

fn solve_window(
    v0: &SpectralField,
    x: &TimePath,
    cfg: &SolverConfig,
    guess: Option<TimePath>,
) -> Result<LocalSolution> {
    let etd = EtdCoefficients::new(cfg.grid, cfg.gamma, x.dt());
    let free = free_evolution(v0, cfg.gamma, x.t0(), x.dt(), x.len());
    let window = x.final_time() - x.t0();
    let mut v = guess.unwrap_or_else(|| free.clone());
    let mut report = IterationReport {
        window,
        start_time: x.t0(),
        ..Default::default()
    };
    loop {
        let forcing: Vec<SpectralField> = v
            .fields()
            .par_iter()
            .zip(x.fields())
            .map(|(a, b)| cfg.equation.nonlinearity(&(a + b)))
            .collect();
        let forcing = TimePath::new(x.t0(), x.dt(), forcing)?;
        let d = duhamel_with(&forcing, &etd);
        let next = free.add(&d)?;
        let inc = sup_sobolev_diff(&next, &v, cfg.s_work);
        report.iterations += 1;
        if let Some(&prev) = report.increments.last() {
            report.ratios.push(if prev > 0.0 { inc / prev } else { 0.0 });
        }
        report.increments.push(inc);
        v = next;
        if inc < cfg.picard_tol {
            report.converged = true;
            return Ok(LocalSolution { v, report });
        }
        if let Some(err) = contraction_verdict(&report, cfg.picard_max_iters, window) {
            return Err(err);
        }
    }
}

/// Summary of one accepted continuation window.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WindowSummary {
    pub start_time: f64,
    pub steps: usize,
    pub iterations: usize,
    pub final_ratio: Option<f64>,
    pub max_ratio: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct GlobalSolution {
    pub v: TimePath,
    pub windows: Vec<WindowSummary>,
    pub reports: Vec<IterationReport>,
    /// max ‖v(t_join⁻) − v(t_join⁺)‖_{L²} over joins.
    pub max_join_jump: f64,
    /// Largest C L² gap between consecutive windows on their common span.
    pub max_overlap_discrepancy: f64,
    /// True when γ ≤ 3/2, outside the range where global bounds are expected.
    pub below_recommended_gamma: bool,
}

/// Glues local solutions: each accepted window keeps its first half and the
/// next window restarts from its midpoint with the driver shifted accordingly.
pub fn continue_global(u0: &SpectralField, x: &TimePath, cfg: &SolverConfig) -> Result<GlobalSolution> {
    check_driver(u0, x, cfg)?;
    let total = x.len() - 1;
    let mut steps = cfg.window_steps().min(total);
    let mut start = 0usize;
    let mut v_start = u0 - x.field(0);
    let mut kept: Vec<SpectralField> = Vec::with_capacity(x.len());
    let mut windows = Vec::new();
    let mut reports = Vec::new();
    let mut max_jump: f64 = 0.0;
    let mut max_overlap: f64 = 0.0;
    let mut pending: Option<TimePath> = None;
    let partial = |kept: &Vec<SpectralField>, v_start: &SpectralField| {
        let mut f = kept.clone();
        f.push(v_start.clone());
        TimePath::new(x.t0(), x.dt(), f).expect("non-empty")
    };

    loop {
        let end = (start + steps).min(total);
        let xw = x.slice(start, end)?;
        let sol = match solve_window(&v_start, &xw, cfg, None) {
            Ok(s) => s,
            Err(Error::NonContraction { .. }) if steps / 2 >= MIN_WINDOW_STEPS => {
                steps /= 2;
                continue;
            }
            Err(e) => {
                return Err(Error::WindowFailed {
                    window_index: windows.len(),
                    start_time: x.time(start),
                    partial: Box::new(partial(&kept, &v_start)),
                    source: Box::new(e),
                })
            }
        };
        if let Some(prev) = pending.take() {
            // prev covers nodes [start, start + prev.len() − 1].
            max_jump = max_jump.max((prev.field(0) - sol.v.field(0)).l2_norm());
            let m = prev.len().min(sol.v.len());
            for n in 0..m {
                max_overlap = max_overlap.max((prev.field(n) - sol.v.field(n)).l2_norm());
            }
        }
        windows.push(WindowSummary {
            start_time: x.time(start),
            steps: end - start,
            iterations: sol.report.iterations,
            final_ratio: sol.report.final_ratio(),
            max_ratio: sol.report.max_ratio(cfg.picard_tol * 1e3),
        });
        reports.push(sol.report.clone());
        if end == total {
            kept.extend(sol.v.into_fields());
            break;
        }
        let half = ((end - start) / 2).max(1);
        let fields = sol.v.fields();
        kept.extend_from_slice(&fields[..half]);
        let next = fields[half].clone();
        pending = Some(sol.v.slice(half, end - start)?);
        v_start = next;
        start += half;
    }
    Ok(GlobalSolution {
        v: TimePath::new(x.t0(), x.dt(), kept)?,
        windows,
        reports,
        max_join_jump: max_jump,
        max_overlap_discrepancy: max_overlap,
        below_recommended_gamma: cfg.gamma <= 1.5,
    })
}

/// Diagnostic ν of the energy bounds.
pub const ENERGY_NU: f64 = 0.5;

/// Discrete L² balance of a solved path.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnergyLedger {
    pub times: Vec<f64>,
    /// ‖v‖²_{L²}.
    pub l2_sq: Vec<f64>,
    /// ⟨m v, v⟩ with the equation's energy weight (equals l2_sq for Burgers).
    pub energy: Vec<f64>,
    /// Cumulative trapezoid of ⟨m Λ^γ v, v⟩.
    pub dissipation: Vec<f64>,
    /// Cumulative trapezoid of ‖v‖²_{H^{γ/2}}.
    pub sobolev_integral: Vec<f64>,
    /// E_n − E_{n−1} − (dt/2)(G_{n−1} + G_n), G = −2⟨mΛ^γ v, v⟩ + 2⟨m v, N(v + X)⟩; 0 at n = 0.
    pub balance_residual: Vec<f64>,
    /// max_n |⟨v, ∂_x(v²)⟩|.
    pub skew_defect: f64,
}

impl EnergyLedger {
    pub fn max_abs_residual(&self) -> f64 {
        self.balance_residual.iter().map(|r| r.abs()).fold(0.0, f64::max)
    }

    pub fn mean_abs_residual(&self) -> f64 {
        let n = self.balance_residual.len().saturating_sub(1).max(1);
        self.balance_residual.iter().skip(1).map(|r| r.abs()).sum::<f64>() / n as f64
    }

    pub fn write_csv(&self, path: &std::path::Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["t", "l2_sq", "energy", "dissipation", "balance_residual"])?;
        for n in 0..self.times.len() {
            w.write_record([
                format!("{:e}", self.times[n]),
                format!("{:e}", self.l2_sq[n]),
                format!("{:e}", self.energy[n]),
                format!("{:e}", self.dissipation[n]),
                format!("{:e}", self.balance_residual[n]),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

fn weighted_inner(a: &SpectralField, b: &SpectralField, m: impl Fn(i64) -> f64) -> f64 {
    let grid = a.grid();
    crate::spectral::TORUS_LENGTH
        * a.coeffs()
            .iter()
            .zip(b.coeffs())
            .enumerate()
            .map(|(i, (x, y))| m(grid.wavenumber(i)) * (x * y.conj()).re)
            .sum::<f64>()
}

pub fn energy_ledger(v: &TimePath, x: &TimePath, gamma: f64, equation: Equation) -> Result<EnergyLedger> {
    v.check_compatible(x)?;
    let dt = v.dt();
    let per_node: Vec<(f64, f64, f64, f64, f64, f64)> = v
        .fields()
        .par_iter()
        .zip(x.fields())
        .map(|(vn, xn)| {
            let w = |k: i64| equation.energy_weight(k);
            let l2 = vn.l2_norm_sq();
            let e = weighted_inner(vn, vn, w);
            let diss = weighted_inner(vn, vn, |k| w(k) * lambda(k, gamma));
            let hs = weighted_inner(vn, vn, |k| (1.0 + (k * k) as f64).powf(gamma / 2.0));
            let nl = equation.nonlinearity(&(vn + xn));
            let pair = weighted_inner(vn, &nl, w);
            let skew = vn.inner(&square(vn).derivative());
            (l2, e, diss, hs, -2.0 * diss + 2.0 * pair, skew)
        })
        .collect();
    let len = v.len();
    let mut ledger = EnergyLedger {
        times: (0..len).map(|n| v.time(n)).collect(),
        l2_sq: per_node.iter().map(|p| p.0).collect(),
        energy: per_node.iter().map(|p| p.1).collect(),
        dissipation: vec![0.0; len],
        sobolev_integral: vec![0.0; len],
        balance_residual: vec![0.0; len],
        skew_defect: per_node.iter().map(|p| p.5.abs()).fold(0.0, f64::max),
    };
    for n in 1..len {
        let (p, q) = (&per_node[n - 1], &per_node[n]);
        ledger.dissipation[n] = ledger.dissipation[n - 1] + 0.5 * dt * (p.2 + q.2);
        ledger.sobolev_integral[n] = ledger.sobolev_integral[n - 1] + 0.5 * dt * (p.3 + q.3);
        ledger.balance_residual[n] = q.1 - p.1 - 0.5 * dt * (p.4 + q.4);
    }
    Ok(ledger)
}

/// Left side of the energy bounds: ‖v‖² + c_ν ∫‖v‖²_{H^{γ/2}}, with
/// c_ν = 1 − ν (Burgers) or 2 − 2ν (DP).
pub fn energy_lhs(ledger: &EnergyLedger, equation: Equation) -> Vec<f64> {
    let c = match equation {
        Equation::Burgers => 1.0 - ENERGY_NU,
        Equation::Dp => 2.0 - 2.0 * ENERGY_NU,
    };
    ledger
        .l2_sq
        .iter()
        .zip(&ledger.sobolev_integral)
        .map(|(a, b)| a + c * b)
        .collect()
}

/// ‖X(t)‖_{H^α} + ‖X(t)‖_{𝒞^α} per node.
pub fn driver_norms(x: &TimePath, alpha: f64) -> Vec<f64> {
    x.fields()
        .par_iter()
        .map(|f| besov_norm(f, BesovSpec::sobolev(alpha)) + besov_norm(f, BesovSpec::holder(alpha)))
        .collect()
}

/// Gronwall-shaped right side of the energy bounds with constant `c`.
///
/// Burgers: `‖u0‖² e^{c(1+S_t^p)t} + c∫_0^t e^{c(1+S_t^p)(t−s)} ‖X(s)‖⁴ ds`;
/// DP: `‖u0‖² e^{(1 + c S_t^p + S_t)t} + (1 + c) S_t⁴`, where `S_t` is the
/// running sup of the driver norm and p = γ/(γ − 1).
pub fn gronwall_envelope(
    equation: Equation,
    c: f64,
    u0_l2_sq: f64,
    driver: &[f64],
    dt: f64,
    gamma: f64,
) -> Vec<f64> {
    let p = gamma / (gamma - 1.0);
    let quartic: Vec<f64> = driver.iter().map(|x| x.powi(4)).collect();
    let mut out = Vec::with_capacity(driver.len());
    let mut sup: f64 = 0.0;
    // K_n = ∫_0^{t_n} e^{rate(t_n − s)} ‖X(s)‖⁴ ds by the trapezoid rule, carried
    // forward while the rate is unchanged and rebuilt when the running sup grows.
    let mut rate = f64::NAN;
    let mut k_int = 0.0;
    for (n, &xn) in driver.iter().enumerate() {
        let t = n as f64 * dt;
        let new_sup = sup.max(xn);
        let val = match equation {
            Equation::Burgers => {
                let r = c * (1.0 + new_sup.powf(p));
                if r != rate || n == 0 {
                    rate = r;
                    let e = (rate * dt).exp();
                    k_int = 0.0;
                    for m in 1..=n {
                        k_int = e * k_int + 0.5 * dt * (e * quartic[m - 1] + quartic[m]);
                    }
                } else {
                    let e = (rate * dt).exp();
                    k_int = e * k_int + 0.5 * dt * (e * quartic[n - 1] + quartic[n]);
                }
                u0_l2_sq * (rate * t).exp() + c * k_int
            }
            Equation::Dp => {
                u0_l2_sq * ((1.0 + c * new_sup.powf(p) + new_sup) * t).exp()
                    + (1.0 + c) * new_sup.powi(4)
            }
        };
        sup = new_sup;
        out.push(val);
    }
    out
}

/// One calibration run for [`fit_gronwall_constant`].
pub struct EnvelopeSample<'a> {
    pub lhs: &'a [f64],
    pub driver: &'a [f64],
    pub u0_l2_sq: f64,
}

/// Smallest c (by bisection on a log scale) whose envelope dominates every
/// calibration run at every node.
pub fn fit_gronwall_constant(
    equation: Equation,
    samples: &[EnvelopeSample<'_>],
    dt: f64,
    gamma: f64,
) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::InsufficientData("no calibration runs".into()));
    }
    let dominates = |c: f64| {
        samples.iter().all(|s| {
            gronwall_envelope(equation, c, s.u0_l2_sq, s.driver, dt, gamma)
                .iter()
                .zip(s.lhs)
                .all(|(e, l)| e >= l)
        })
    };
    let (mut lo, mut hi) = (1e-8f64, 1.0f64);
    while !dominates(hi) {
        hi *= 4.0;
        if hi > 1e8 {
            return Err(Error::Domain("no envelope constant dominates the runs".into()));
        }
    }
    if dominates(lo) {
        return Ok(lo);
    }
    for _ in 0..60 {
        let mid = (lo * hi).sqrt();
        if dominates(mid) {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    Ok(hi)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::noise::{build_x, NoiseConfig};
    use proptest::prelude::*;

    fn grid(n: usize) -> TorusGrid {
        TorusGrid::new(n).unwrap()
    }

    fn sin_field(g: TorusGrid, amp: f64) -> SpectralField {
        SpectralField::single_mode(g, 1, Complex64::new(0.0, -amp / 2.0)).unwrap()
    }

    #[test]
    fn semigroup_examples() {
        let g = grid(32);
        let e1 = SpectralField::single_mode(g, 1, Complex64::new(1.0, 0.0)).unwrap();
        let f = sin_field(g, 1.0);
        assert_eq!(semigroup(&f, 0.0, 1.5).unwrap(), f);
        let p = semigroup(&e1, 1.0, 2.0).unwrap();
        assert!((p.coeff(1).re - (-1.0f64).exp()).abs() < 1e-15);
        assert!(matches!(semigroup(&f, -0.1, 2.0), Err(Error::Domain(_))));
    }

    #[test]
    fn schauder_ratio_bounded() {
        let g = grid(512);
        let f = crate::noise::sample_x_at(&NoiseConfig::new(g, 2.0, 0.1, 1, 1).unwrap(), 100.0, 0)
            .unwrap()
            .apply_real_multiplier(|k| k.abs() as f64); // flat spectrum
        let (alpha, delta) = (-0.5, 0.8);
        let base = besov_norm(&f, BesovSpec::holder(alpha));
        let mut ratios = Vec::new();
        let mut smoothed = Vec::new();
        for e in 0..=6 {
            let t = 1e-3 * 10f64.powf(e as f64 / 2.0);
            let r = besov_norm(&semigroup(&f, t, 1.6).unwrap(), BesovSpec::holder(alpha + delta))
                * t.powf(delta / 1.6)
                / base;
            ratios.push(r);
            let d2 = 2.5;
            let s = besov_norm(&smoothed_semigroup(&f, t, 1.6).unwrap(), BesovSpec::holder(alpha + d2))
                * t.powf(d2 / 1.6)
                / (t.powf(2.0 / 1.6).min(1.0) * base);
            smoothed.push(s);
        }
        assert!(ratios.iter().all(|r| *r < 10.0), "{ratios:?}");
        assert!(smoothed.iter().all(|r| *r < 10.0), "{smoothed:?}");
    }

    #[test]
    fn dp_multiplier_examples() {
        let g = grid(16);
        let e1 = SpectralField::single_mode(g, 1, Complex64::new(1.0, 0.0)).unwrap();
        assert!((dp_multiplier(&e1).coeff(1) - Complex64::new(0.0, 0.5)).norm() < 1e-15);
        let c = SpectralField::single_mode(g, 0, Complex64::new(3.0, 0.0)).unwrap();
        assert!(dp_multiplier(&c).is_zero());
    }

    #[test]
    fn dp_energy_weight_cancels_nonlinearity() {
        let g = grid(64);
        let cfg = NoiseConfig::new(g, 1.6, 0.01, 1, 3).unwrap();
        let u = crate::noise::sample_x_at(&cfg, 1.0, 0).unwrap();
        let nl = Equation::Dp.nonlinearity(&u);
        let pair = weighted_inner(&u, &nl, |k| Equation::Dp.energy_weight(k));
        assert!(pair.abs() < 1e-14 * (1.0 + u.l2_norm().powi(3)));
    }

    #[test]
    fn etd_coefficients_small_and_large() {
        for &x in &[0.0_f64, 1e-8, 0.05, 0.0999, 0.1001, 1.0, 50.0] {
            let direct = if x > 1e-3 {
                (1.0 - (-x).exp() * (1.0 + x)) / (x * x)
            } else {
                0.5 - x / 3.0
            };
            assert!((phi2(x) - direct).abs() < 1e-9, "x={x}");
        }
        let e = EtdCoefficients::new(grid(8), 2.0, 0.1);
        assert!((e.a[0] - 0.05).abs() < 1e-15 && (e.b[0] - 0.05).abs() < 1e-15);
    }

    #[test]
    fn single_mode_bilinear_closed_form() {
        let g = grid(16);
        // (e^{ix} + e^{-ix})² carries e^{2ix} with unit weight.
        let pos = SpectralField::single_mode(g, 1, Complex64::new(1.0, 0.0)).unwrap();
        for gamma in [1.3, 1.5, 2.0] {
            let f = TimePath::constant(&pos, 0.0, 0.01, 101);
            for t_index in [1usize, 37, 100] {
                let b = duhamel_bilinear(&f, &f, t_index, gamma).unwrap();
                let t = t_index as f64 * 0.01;
                let l = 2f64.powf(gamma);
                let want = Complex64::new(0.0, (1.0 - (-l * t).exp()) / l);
                assert!((b.coeff(2) - want).norm() < 1e-12, "γ={gamma} t={t}");
            }
        }
    }

    #[test]
    fn bilinear_symmetric_and_zero() {
        let g = grid(32);
        let x = build_x(&NoiseConfig::new(g, 1.5, 0.01, 20, 1).unwrap()).unwrap().x;
        let y = build_x(&NoiseConfig::new(g, 1.5, 0.01, 20, 2).unwrap()).unwrap().x;
        let a = duhamel_bilinear_path(&x, &y, 1.5).unwrap();
        let b = duhamel_bilinear_path(&y, &x, 1.5).unwrap();
        assert!(a.sub(&b).unwrap().sup_l2() < 1e-12 * a.sup_l2());
        let z = TimePath::zeros(g, 0.0, 0.01, 21);
        assert!(duhamel_bilinear_path(&z, &x, 1.5).unwrap().sup_l2() < 1e-15);
        assert!(duhamel_bilinear(&x, &y, 21, 1.5).is_err());
    }

    #[test]
    fn zero_fixed_point_in_one_iteration() {
        let g = grid(32);
        let cfg = SolverConfig::new(g, 2.0, 0.1, 0.01).unwrap();
        let x = TimePath::zeros(g, 0.0, 0.01, 11);
        let sol = solve_local(&SpectralField::zeros(g), &x, &cfg).unwrap();
        assert_eq!(sol.report.iterations, 1);
        assert!(sol.v.fields().iter().all(|f| f.is_zero()));
    }

    #[test]
    fn rejects_nonzero_mean_and_bad_config() {
        let g = grid(32);
        let cfg = SolverConfig::new(g, 2.0, 0.1, 0.01).unwrap();
        let x = TimePath::zeros(g, 0.0, 0.01, 11);
        let c = SpectralField::single_mode(g, 0, Complex64::new(1.0, 0.0)).unwrap();
        assert!(matches!(solve_local(&c, &x, &cfg), Err(Error::Domain(_))));
        assert!(SolverConfig::new(g, 2.0, 0.1, 0.2).is_err());
        assert!(SolverConfig::new(g, 0.9, 0.1, 0.01).is_err());
        let mut bad = cfg.clone();
        bad.s_work = 0.4;
        assert!(bad.validate().is_err());
    }

    #[test]
    fn small_window_contracts_fast() {
        let g = grid(64);
        let cfg = SolverConfig::new(g, 1.6, 0.02, 1e-3).unwrap();
        let x = build_x(&NoiseConfig::new(g, 1.6, 1e-3, 20, 4).unwrap()).unwrap().x;
        let sol = solve_local(&sin_field(g, 0.5), &x, &cfg).unwrap();
        assert!(sol.report.converged);
        let r = sol.report.max_ratio(1e-6).unwrap();
        assert!(r < 0.75, "ratio {r}");
    }

    #[test]
    fn mean_stays_zero() {
        let g = grid(64);
        let cfg = SolverConfig::new(g, 1.6, 0.1, 1e-3).unwrap().with_equation(Equation::Dp);
        let x = build_x(&NoiseConfig::new(g, 1.6, 1e-3, 100, 8).unwrap()).unwrap().x;
        let sol = solve_local(&sin_field(g, 0.3), &x, &cfg).unwrap();
        assert!(sol.v.fields().iter().all(|f| f.coeffs()[0].norm() == 0.0));
    }

    #[test]
    fn linear_energy_closed_form() {
        // With the nonlinearity switched off, v(t) = P(t)u0 and the ledger's
        // l2_sq must equal Σ e^{−2tλ}|û0|² · 2π.
        let g = grid(32);
        let u0 = SpectralField::from_fn(g, |k| {
            if k == 0 || k.abs() > 10 {
                Complex64::new(0.0, 0.0)
            } else {
                Complex64::new(1.0 / (1 + k.abs()) as f64, 0.0)
            }
        });
        let v = free_evolution(&u0, 1.6, 0.0, 0.01, 50);
        let x = TimePath::zeros(g, 0.0, 0.01, 50);
        let l = energy_ledger(&v, &x, 1.6, Equation::Burgers).unwrap();
        for n in [0usize, 10, 49] {
            let t = n as f64 * 0.01;
            let want: f64 = 2.0
                * std::f64::consts::PI
                * g.wavenumbers()
                    .map(|k| (-2.0 * t * lambda(k, 1.6)).exp() * u0.coeff(k).norm_sqr())
                    .sum::<f64>();
            assert!((l.l2_sq[n] - want).abs() < 1e-13 * want);
        }
        let z = TimePath::zeros(g, 0.0, 0.01, 5);
        let l0 = energy_ledger(&z, &z, 1.6, Equation::Dp).unwrap();
        assert!(l0.l2_sq.iter().chain(&l0.dissipation).chain(&l0.balance_residual).all(|x| *x == 0.0));
    }

    #[test]
    fn dissipation_nondecreasing() {
        let g = grid(64);
        let cfg = SolverConfig::new(g, 1.6, 0.1, 1e-3).unwrap();
        let x = build_x(&NoiseConfig::new(g, 1.6, 1e-3, 100, 2).unwrap()).unwrap().x;
        let sol = solve_local(&sin_field(g, 0.5), &x, &cfg).unwrap();
        let l = energy_ledger(&sol.v, &x, 1.6, Equation::Burgers).unwrap();
        assert!(l.dissipation.windows(2).all(|w| w[1] >= w[0]));
        assert!(l.l2_sq.iter().all(|e| *e >= 0.0));
        assert!(l.skew_defect < 1e-12);
    }

    #[test]
    fn envelope_fit_dominates() {
        let lhs = vec![1.0, 1.2, 1.5, 1.4];
        let drv = vec![0.5, 0.8, 1.0, 1.1];
        let s = [EnvelopeSample {
            lhs: &lhs,
            driver: &drv,
            u0_l2_sq: 1.0,
        }];
        for eq in [Equation::Burgers, Equation::Dp] {
            let c = fit_gronwall_constant(eq, &s, 0.1, 1.6).unwrap();
            let env = gronwall_envelope(eq, c, 1.0, &drv, 0.1, 1.6);
            assert!(env.iter().zip(&lhs).all(|(e, l)| e >= l));
        }
    }

    #[test]
    fn burgers_envelope_matches_direct_quadrature() {
        let drv: Vec<f64> = (0..40).map(|n| 0.4 + 0.3 * (0.37 * n as f64).sin().abs()).collect();
        let (dt, gamma, c, e0) = (0.05, 1.6, 0.3, 0.7);
        let p = gamma / (gamma - 1.0);
        let env = gronwall_envelope(Equation::Burgers, c, e0, &drv, dt, gamma);
        let mut sup: f64 = 0.0;
        for n in 0..drv.len() {
            sup = sup.max(drv[n]);
            let rate = c * (1.0 + sup.powf(p));
            let t = n as f64 * dt;
            let f = |m: usize| (rate * (t - m as f64 * dt)).exp() * drv[m].powi(4);
            let integral: f64 = (0..n).map(|m| 0.5 * dt * (f(m) + f(m + 1))).sum();
            let want = e0 * (rate * t).exp() + c * integral;
            assert!((env[n] - want).abs() < 1e-12 * want, "n={n}");
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn semigroup_law(t in 0.0f64..2.0, s in 0.0f64..2.0, gamma in 1.01f64..2.0, seed in 0u64..100) {
            let g = grid(64);
            let f = crate::noise::sample_x_at(&NoiseConfig::new(g, 2.0, 0.1, 1, seed).unwrap(), 1.0, 0).unwrap();
            let a = semigroup(&semigroup(&f, s, gamma).unwrap(), t, gamma).unwrap();
            let b = semigroup(&f, t + s, gamma).unwrap();
            prop_assert!((&a - &b).l2_norm() <= 1e-12 * f.l2_norm());
        }

        #[test]
        fn dp_smoothing_bound(seed in 0u64..100, s in -1.0f64..2.0) {
            let g = grid(64);
            let f = crate::noise::sample_x_at(&NoiseConfig::new(g, 1.5, 0.1, 1, seed).unwrap(), 1.0, 0).unwrap();
            let inv = f.apply_real_multiplier(|k| 1.0 / (1.0 + (k * k) as f64));
            prop_assert!(inv.sobolev_norm(s) <= f.sobolev_norm(s - 2.0) * (1.0 + 1e-12));
        }

        #[test]
        fn duhamel_is_linear(a in -2.0f64..2.0, seed in 0u64..50) {
            let g = grid(32);
            let x = build_x(&NoiseConfig::new(g, 1.5, 0.01, 10, seed).unwrap()).unwrap().x;
            let y = build_x(&NoiseConfig::new(g, 1.5, 0.01, 10, seed + 100).unwrap()).unwrap().x;
            let lhs = duhamel(&x.map(|f| f.scale(a)).add(&y).unwrap(), 1.5);
            let rhs = duhamel(&x, 1.5).map(|f| f.scale(a)).add(&duhamel(&y, 1.5)).unwrap();
            prop_assert!(lhs.sub(&rhs).unwrap().sup_l2() <= 1e-13 * (1.0 + lhs.sup_l2()));
        }
    }
}
