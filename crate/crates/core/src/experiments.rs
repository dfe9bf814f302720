//! Experiment configuration, run manifests and the Monte Carlo drivers.
//!
//! A run is described by one [`ExperimentConfig`] (TOML on disk). [`run`]
//! writes `manifest.json` into the output directory before any result, then
//! the experiment's CSV files, then the completed manifest carrying SHA-256
//! digests of every output. [`replay`] re-executes a manifest and checks the
//! digests, which is the bit-identical reproducibility contract.
//!
//! Ensemble members are indexed by path number; every member draws from its
//! own random streams (see [`crate::noise::stream_rng`]), and all cross-path
//! statistics are computed after sorting by path index, so the output does
//! not depend on the worker count or the completion order.
//!
//! CSV schemas (column order is fixed; the schema id is recorded per file in
//! the manifest):
//!
//! | file | schema | columns |
//! |------|--------|---------|
//! | `covariance.csv` | `frb.covariance/1` | process,k,lag_steps,lag,theory_cov,empirical_cov,cov_stderr,cov_z,theory_corr,empirical_corr,corr_stderr,corr_z |
//! | `decay.csv` | `frb.decay/1` | k,fitted_rate,predicted_rate,relative_error |
//! | `spatial_blocks.csv` | `frb.blocks/1` | j,mean_block_norm,count |
//! | `temporal.csv` | `frb.temporal/1` | lag,mean_l2_increment |
//! | `exponents.csv` | `frb.exponents/1` | object,fitted,stderr,predicted |
//! | `trajectories.csv` | `frb.trajectories/1` | path,t,u_l2,v_l2,x_l2 |
//! | `windows.csv` | `frb.windows/1` | path,window,start_time,steps,iterations,final_ratio,max_ratio |
//! | `final_state.csv` | `frb.final_state/1` | x,u |
//! | `energy.csv` | `frb.energy/1` | path,t,l2_sq,energy,dissipation,sobolev_integral,balance_residual,lhs,envelope |
//! | `ladder.csv` | `frb.ladder/1` | path,epsilon,epsilon_next,sup_l2_difference |
//! | `paracontrolled.csv` | `frb.paracontrolled/1` | path,span_steps,iterations,final_ratio,assembly_defect,max_mild_residual,direct_gap,stencil_defect |
//! | `admissible_scan.csv` | `frb.admissible/1` | n_band,mean_l2,stderr |

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use crate::besov::{fit_regularity, ols_slope, Integrability, RegularityFit, CONVENTION_SUP};
use crate::dynamics::{
    continue_global, driver_norms, duhamel_bilinear_path, energy_ledger, energy_lhs,
    fit_gronwall_constant, gronwall_envelope, EnergyLedger, EnvelopeSample, Equation,
    GlobalSolution, SolverConfig,
};
use crate::error::{Error, Result};
use crate::noise::{
    build_x_path, build_xy, sample_x_at, y_covariance, x_variance, NoiseConfig, NoiseVariant,
    FOURIER_CONVENTION, SUBSEED_SCHEME,
};
use crate::paracontrolled::{
    mild_residual, regularity_report, relaxed_fit_range, solve_paracontrolled, ExponentRow, FinalSnapshot,
    MIN_REPORT_ENSEMBLE,
};
use crate::spectral::{SpectralField, TimePath, TorusGrid};
use crate::Complex64;

pub const MANIFEST_SCHEMA: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";
pub const CODE_VERSION: &str = concat!(env!("CARGO_PKG_NAME"), " ", env!("CARGO_PKG_VERSION"));
/// Covariance runs below this size are flagged in the manifest.
pub const MIN_COVARIANCE_ENSEMBLE: usize = 100;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExperimentKind {
    Covariance,
    Regularity,
    Simulate,
    Energy,
    Convergence,
    Paracontrolled,
    AdmissibleScan,
}

impl ExperimentKind {
    pub const ALL: [ExperimentKind; 7] = [
        Self::Covariance,
        Self::Regularity,
        Self::Simulate,
        Self::Energy,
        Self::Convergence,
        Self::Paracontrolled,
        Self::AdmissibleScan,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Self::Covariance => "covariance",
            Self::Regularity => "regularity",
            Self::Simulate => "simulate",
            Self::Energy => "energy",
            Self::Convergence => "convergence",
            Self::Paracontrolled => "paracontrolled",
            Self::AdmissibleScan => "admissible_scan",
        }
    }

    /// Whether the experiment integrates the equation and needs `[solver]`.
    pub fn needs_solver(self) -> bool {
        matches!(
            self,
            Self::Simulate | Self::Energy | Self::Convergence | Self::Paracontrolled
        )
    }
}

impl fmt::Display for ExperimentKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ExperimentKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let norm = s.replace('-', "_");
        Self::ALL
            .into_iter()
            .find(|k| k.name() == norm)
            .ok_or_else(|| Error::Config(format!("unknown experiment '{s}'")))
    }
}

/// Which stochastic convolution drives a solver experiment.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DriverKind {
    /// X with X(0) = 0.
    #[default]
    ZeroStart,
    /// Y started from its stationary law.
    Stationary,
    /// X ≡ 0: deterministic runs.
    Off,
}

fn default_modes() -> Vec<i64> {
    vec![1, 4, 16]
}
fn default_spatial_time() -> f64 {
    1.0
}
fn default_epsilons() -> Vec<f64> {
    vec![0.4, 0.2, 0.1, 0.05]
}
fn default_n_bands() -> Vec<i64> {
    vec![8, 16, 32, 64]
}
fn default_true() -> bool {
    true
}

/// Experiment-specific knobs; every key is optional.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentParams {
    /// covariance: wavenumbers examined.
    #[serde(default = "default_modes")]
    pub modes: Vec<i64>,
    /// covariance: lags in steps; empty picks {0, m/2, m, 2m} per mode with m ≈ 1/(|k|^γ dt).
    #[serde(default)]
    pub lag_steps: Vec<usize>,
    /// regularity: time of the spatial X samples.
    #[serde(default = "default_spatial_time")]
    pub spatial_time: f64,
    /// regularity: block range of the spatial fit.
    #[serde(default)]
    pub fit_range: Option<[i64; 2]>,
    #[serde(default)]
    pub driver: DriverKind,
    /// Initial perturbation: v(0) = a sin x, so u(0) = a sin x + X(0).
    #[serde(default)]
    pub initial_amplitude: f64,
    /// convergence: mollifier widths, coarsest first.
    #[serde(default = "default_epsilons")]
    pub epsilons: Vec<f64>,
    /// admissible_scan: band levels, increasing.
    #[serde(default = "default_n_bands")]
    pub n_bands: Vec<i64>,
    /// energy: α in the driver norm ‖X‖_{H^α} + ‖X‖_{𝒞^α}; defaults to (γ − 1)/4.
    #[serde(default)]
    pub driver_alpha: Option<f64>,
    /// energy: paths used to fit the envelope constant; defaults to ⌈M/2⌉.
    #[serde(default)]
    pub calibration_runs: Option<usize>,
    /// energy: also measure the balance residual of path 0 at dt/2.
    #[serde(default = "default_true")]
    pub refine_check: bool,
    /// paracontrolled: also run the direct mild solver and report the gap.
    #[serde(default = "default_true")]
    pub compare_direct: bool,
}

impl Default for ExperimentParams {
    fn default() -> Self {
        Self {
            modes: default_modes(),
            lag_steps: Vec::new(),
            spatial_time: default_spatial_time(),
            fit_range: None,
            driver: DriverKind::default(),
            initial_amplitude: 0.0,
            epsilons: default_epsilons(),
            n_bands: default_n_bands(),
            driver_alpha: None,
            calibration_runs: None,
            refine_check: true,
            compare_direct: true,
        }
    }
}

fn default_ensemble() -> usize {
    1
}
fn default_output_dir() -> PathBuf {
    PathBuf::from("out")
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub experiment: ExperimentKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub solver: Option<SolverConfig>,
    pub noise: NoiseConfig,
    #[serde(default = "default_ensemble")]
    pub ensemble_size: usize,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    #[serde(default)]
    pub params: ExperimentParams,
}

impl ExperimentConfig {
    pub fn from_toml_str(s: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(s)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_path(path: &Path) -> Result<Self> {
        Self::from_toml_str(&fs::read_to_string(path)?)
    }

    pub fn solver(&self) -> Result<&SolverConfig> {
        self.solver
            .as_ref()
            .ok_or_else(|| Error::Config(format!("experiment '{}' needs a [solver] table", self.experiment)))
    }

    pub fn validate(&self) -> Result<()> {
        if self.ensemble_size == 0 {
            return Err(Error::Config("ensemble_size must be at least 1".into()));
        }
        self.noise.validate()?;
        let grid = self.noise.grid;
        let p = &self.params;
        if self.experiment.needs_solver() {
            let s = self.solver()?;
            s.validate()?;
            if s.grid != grid {
                return Err(Error::Config(format!(
                    "solver grid N = {} differs from noise grid N = {}",
                    s.grid.n(),
                    grid.n()
                )));
            }
            if s.gamma != self.noise.gamma {
                return Err(Error::Config(format!(
                    "solver gamma {} differs from noise gamma {}",
                    s.gamma, self.noise.gamma
                )));
            }
            if (s.dt - self.noise.dt).abs() > 1e-12 * s.dt || s.n_steps() != self.noise.n_steps {
                return Err(Error::Config(format!(
                    "noise must cover the solver horizon on the same steps: solver dt = {}, {} steps; noise dt = {}, {} steps",
                    s.dt,
                    s.n_steps(),
                    self.noise.dt,
                    self.noise.n_steps
                )));
            }
        } else if let Some(s) = &self.solver {
            s.validate()?;
        }
        if !p.initial_amplitude.is_finite() {
            return Err(Error::Config("initial_amplitude must be finite".into()));
        }
        match self.experiment {
            ExperimentKind::Covariance => {
                if p.modes.is_empty() {
                    return Err(Error::Config("modes must not be empty".into()));
                }
                for &k in &p.modes {
                    if k == 0 || k.abs() > grid.max_wavenumber() {
                        return Err(Error::Config(format!(
                            "mode {k} outside 1..={}",
                            grid.max_wavenumber()
                        )));
                    }
                }
                if let Some(&m) = p.lag_steps.iter().find(|&&m| m > self.noise.n_steps) {
                    return Err(Error::Config(format!(
                        "lag of {m} steps exceeds the {} simulated steps",
                        self.noise.n_steps
                    )));
                }
            }
            ExperimentKind::Regularity => {
                if !(p.spatial_time > 0.0 && p.spatial_time.is_finite()) {
                    return Err(Error::Config("spatial_time must be positive".into()));
                }
                if let Some([lo, hi]) = p.fit_range {
                    if hi < lo + 2 {
                        return Err(Error::Config("fit_range needs at least three blocks".into()));
                    }
                }
            }
            ExperimentKind::Convergence => {
                if p.epsilons.len() < 2 {
                    return Err(Error::Config("the epsilon ladder needs at least two rungs".into()));
                }
                if p.epsilons.iter().any(|e| !(*e > 0.0)) {
                    return Err(Error::Config("epsilons must be positive".into()));
                }
                if p.epsilons.windows(2).any(|w| w[1] >= w[0]) {
                    return Err(Error::Config("epsilons must be strictly decreasing".into()));
                }
                if self.noise.variant != NoiseVariant::White {
                    return Err(Error::Config(
                        "the convergence ladder mollifies white noise; set noise.variant to white".into(),
                    ));
                }
            }
            ExperimentKind::Paracontrolled => {
                if self.solver()?.equation != Equation::Burgers {
                    return Err(Error::Config(
                        "the paracontrolled solver handles the Burgers equation only".into(),
                    ));
                }
            }
            ExperimentKind::AdmissibleScan => {
                if p.n_bands.len() < 3 {
                    return Err(Error::Config("n_bands needs at least three levels".into()));
                }
                if p.n_bands.windows(2).any(|w| w[1] <= w[0]) {
                    return Err(Error::Config("n_bands must be increasing".into()));
                }
                let hi = grid.max_wavenumber();
                if p.n_bands[0] < 2 || *p.n_bands.last().unwrap() > hi {
                    return Err(Error::Config(format!("n_bands must lie in 2..={hi}")));
                }
                scan_beta(&self.noise)?;
            }
            ExperimentKind::Simulate | ExperimentKind::Energy => {}
        }
        if let Some(c) = p.calibration_runs {
            if c == 0 || c > self.ensemble_size {
                return Err(Error::Config(format!(
                    "calibration_runs must lie in 1..={}",
                    self.ensemble_size
                )));
            }
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON form.
    pub fn digest(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(&bytes))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunStatus {
    Running,
    Completed,
    Failed,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Conventions {
    pub fourier: String,
    pub exponent: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OutputRecord {
    pub file: String,
    pub schema: String,
    pub sha256: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestError {
    pub exit_code: i32,
    pub message: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub schema: u32,
    pub status: RunStatus,
    pub experiment: ExperimentKind,
    pub seed: u64,
    pub subseed_scheme: String,
    pub conventions: Conventions,
    pub code_version: String,
    pub config_sha256: String,
    /// Worker count; results do not depend on it.
    pub threads: usize,
    pub started_unix: f64,
    pub wall_clock_seconds: Option<f64>,
    pub warnings: Vec<String>,
    pub error: Option<ManifestError>,
    pub outputs: Vec<OutputRecord>,
    pub summary: BTreeMap<String, Value>,
    pub config: ExperimentConfig,
}

impl RunManifest {
    fn begin(config: &ExperimentConfig, threads: usize) -> Self {
        let started = SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map(|d| d.as_secs_f64())
            .unwrap_or(0.0);
        Self {
            schema: MANIFEST_SCHEMA,
            status: RunStatus::Running,
            experiment: config.experiment,
            seed: config.noise.seed,
            subseed_scheme: SUBSEED_SCHEME.into(),
            conventions: Conventions {
                fourier: FOURIER_CONVENTION.into(),
                exponent: CONVENTION_SUP.into(),
            },
            code_version: CODE_VERSION.into(),
            config_sha256: config.digest(),
            threads,
            started_unix: started,
            wall_clock_seconds: None,
            warnings: Vec::new(),
            error: None,
            outputs: Vec::new(),
            summary: BTreeMap::new(),
            config: config.clone(),
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(serde_json::from_slice(&fs::read(path)?)?)
    }

    /// Writes via a temporary file and a rename so a reader never sees a
    /// half-written manifest.
    pub fn write(&self, dir: &Path) -> Result<()> {
        let tmp = dir.join(format!("{MANIFEST_FILE}.tmp"));
        fs::write(&tmp, serde_json::to_vec_pretty(self)?)?;
        fs::rename(&tmp, dir.join(MANIFEST_FILE))?;
        Ok(())
    }
}

/// What a driver hands back to [`run`].
#[derive(Debug, Default)]
struct Outcome {
    files: Vec<(String, &'static str)>,
    summary: BTreeMap<String, Value>,
    warnings: Vec<String>,
}

impl Outcome {
    fn file(&mut self, name: &str, schema: &'static str) {
        self.files.push((name.to_string(), schema));
    }

    fn put(&mut self, key: &str, v: impl Serialize) {
        self.summary
            .insert(key.to_string(), serde_json::to_value(v).unwrap_or(Value::Null));
    }
}

fn sha256_file(path: &Path) -> Result<String> {
    Ok(hex::encode(Sha256::digest(fs::read(path)?)))
}

/// Runs one experiment into `config.output_dir` on a pool of `threads`
/// workers (0 = rayon's default).
pub fn run(config: &ExperimentConfig, threads: usize) -> Result<RunManifest> {
    config.validate()?;
    let dir = config.output_dir.clone();
    fs::create_dir_all(&dir)?;
    let mut manifest = RunManifest::begin(config, threads);
    manifest.write(&dir)?;
    let clock = Instant::now();

    let result = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| Error::Config(format!("cannot build worker pool: {e}")))
        .and_then(|pool| pool.install(|| dispatch(config, &dir)));
    manifest.wall_clock_seconds = Some(clock.elapsed().as_secs_f64());
    match result {
        Ok(outcome) => {
            for (file, schema) in &outcome.files {
                manifest.outputs.push(OutputRecord {
                    file: file.clone(),
                    schema: schema.to_string(),
                    sha256: sha256_file(&dir.join(file))?,
                });
            }
            manifest.summary = outcome.summary;
            manifest.warnings = outcome.warnings;
            manifest.status = RunStatus::Completed;
            manifest.write(&dir)?;
            Ok(manifest)
        }
        Err(e) => {
            manifest.status = RunStatus::Failed;
            manifest.error = Some(ManifestError {
                exit_code: e.exit_code(),
                message: e.to_string(),
            });
            manifest.write(&dir)?;
            Err(e)
        }
    }
}

/// Result of [`replay`].
#[derive(Clone, Debug)]
pub struct ReplayReport {
    pub original: RunManifest,
    pub rerun: RunManifest,
    /// Files whose digest differs or that are missing from one side.
    pub mismatches: Vec<String>,
}

impl ReplayReport {
    pub fn identical(&self) -> bool {
        self.mismatches.is_empty()
    }
}

/// Re-executes the run recorded in `manifest_path` into `out_dir` and
/// compares output digests.
pub fn replay(manifest_path: &Path, out_dir: &Path, threads: usize) -> Result<ReplayReport> {
    let original = RunManifest::load(manifest_path)?;
    if original.config.digest() != original.config_sha256 {
        return Err(Error::Config(
            "manifest config does not match its recorded digest".into(),
        ));
    }
    if original.status != RunStatus::Completed {
        return Err(Error::Config(format!(
            "manifest records an unfinished run (status {:?})",
            original.status
        )));
    }
    let mut cfg = original.config.clone();
    cfg.output_dir = out_dir.to_path_buf();
    let rerun = run(&cfg, threads)?;
    let mut mismatches = Vec::new();
    for o in &original.outputs {
        match rerun.outputs.iter().find(|r| r.file == o.file) {
            Some(r) if r.sha256 == o.sha256 => {}
            _ => mismatches.push(o.file.clone()),
        }
    }
    for r in &rerun.outputs {
        if !original.outputs.iter().any(|o| o.file == r.file) {
            mismatches.push(r.file.clone());
        }
    }
    Ok(ReplayReport {
        original,
        rerun,
        mismatches,
    })
}

fn dispatch(cfg: &ExperimentConfig, dir: &Path) -> Result<Outcome> {
    match cfg.experiment {
        ExperimentKind::Covariance => run_covariance(cfg, dir),
        ExperimentKind::Regularity => run_regularity(cfg, dir),
        ExperimentKind::Simulate => run_simulate(cfg, dir),
        ExperimentKind::Energy => run_energy(cfg, dir),
        ExperimentKind::Convergence => run_convergence(cfg, dir),
        ExperimentKind::Paracontrolled => run_paracontrolled(cfg, dir),
        ExperimentKind::AdmissibleScan => run_admissible_scan(cfg, dir),
    }
}

// ---------------------------------------------------------------------------
// Shared plumbing

/// Shortest round-trip float formatting, so CSVs are bit-stable.
fn num(x: f64) -> String {
    format!("{x:e}")
}

fn opt_num(x: Option<f64>) -> String {
    x.map(num).unwrap_or_default()
}

fn write_rows(path: &Path, header: &[&str], rows: impl IntoIterator<Item = Vec<String>>) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(header)?;
    for r in rows {
        w.write_record(&r)?;
    }
    w.flush()?;
    Ok(())
}

/// Runs `f` over path indices `0..m` on the current pool and returns the
/// results ordered by index, whatever order they finished in.
pub fn map_ensemble<T, F>(m: usize, f: F) -> Result<Vec<T>>
where
    T: Send,
    F: Fn(u64) -> Result<T> + Sync + Send,
{
    let tagged: Vec<(u64, T)> = (0..m as u64)
        .into_par_iter()
        .map(|i| f(i).map(|t| (i, t)).map_err(|e| match e {
            Error::InPath { .. } => e,
            e => e.in_path(i),
        }))
        .collect::<Result<_>>()?;
    Ok(sort_by_path(tagged))
}

/// Orders per-path results by path index; all aggregation goes through here.
pub fn sort_by_path<T>(mut tagged: Vec<(u64, T)>) -> Vec<T> {
    tagged.sort_by_key(|(i, _)| *i);
    tagged.into_iter().map(|(_, t)| t).collect()
}

/// Sample mean and standard error of the mean.
pub fn mean_stderr(xs: &[f64]) -> (f64, f64) {
    let m = xs.len() as f64;
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let mean = xs.iter().sum::<f64>() / m;
    if xs.len() < 2 {
        return (mean, f64::NAN);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (m - 1.0);
    (mean, (var / m).sqrt())
}

/// a sin x on `grid`.
pub fn sine_datum(grid: TorusGrid, amplitude: f64) -> SpectralField {
    SpectralField::single_mode(grid, 1, Complex64::new(0.0, -amplitude / 2.0)).expect("mode 1 fits every grid")
}

/// Driver path of ensemble member `path` on the noise lattice.
pub fn driver_path(noise: &NoiseConfig, kind: DriverKind, path: u64) -> Result<TimePath> {
    match kind {
        DriverKind::ZeroStart => Ok(build_x_path(noise, path)?.x),
        DriverKind::Stationary => Ok(build_xy(noise, path)?
            .y
            .expect("build_xy always produces Y")),
        DriverKind::Off => Ok(TimePath::zeros(noise.grid, 0.0, noise.dt, noise.n_steps + 1)),
    }
}

/// u(0) = a sin x + X(0).
fn initial_datum(x: &TimePath, amplitude: f64) -> SpectralField {
    &sine_datum(x.grid(), amplitude) + x.field(0)
}

// ---------------------------------------------------------------------------
// covariance

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CovarianceRow {
    /// "Y" (stationary) or "X" (zero start, variance at the final time only).
    pub process: String,
    pub k: i64,
    pub lag_steps: usize,
    pub lag: f64,
    pub theory_cov: f64,
    pub empirical_cov: f64,
    pub cov_stderr: f64,
    pub cov_z: f64,
    pub theory_corr: f64,
    pub empirical_corr: f64,
    pub corr_stderr: f64,
    pub corr_z: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecayRow {
    pub k: i64,
    pub fitted_rate: f64,
    pub predicted_rate: f64,
    pub relative_error: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CovarianceStudy {
    pub rows: Vec<CovarianceRow>,
    pub decay: Vec<DecayRow>,
    pub max_abs_z: f64,
}

/// {0, m/2, m, 2m} with m ≈ 1/(|k|^γ dt), capped at the simulated steps.
pub fn default_lag_steps(noise: &NoiseConfig, k: i64) -> Vec<usize> {
    let lam = (k.abs() as f64).powf(noise.gamma);
    let m = ((1.0 / (lam * noise.dt)).round() as usize).max(1);
    let mut lags: Vec<usize> = [0, m / 2, m, 2 * m]
        .into_iter()
        .map(|l| l.min(noise.n_steps))
        .collect();
    lags.sort_unstable();
    lags.dedup();
    lags
}

fn z_score(emp: f64, theory: f64, se: f64) -> f64 {
    if se > 0.0 {
        (emp - theory) / se
    } else if (emp - theory).abs() <= 1e-12 * theory.abs().max(1e-300) {
        0.0
    } else {
        f64::INFINITY
    }
}

/// Monte Carlo E[Y_k(T) conj Y_k(T − lag)] and E|X_k(T)|², T = n_steps·dt,
/// over `ensemble` independent paths.
pub fn covariance_study(
    noise: &NoiseConfig,
    ensemble: usize,
    modes: &[i64],
    lag_steps: &[usize],
) -> Result<CovarianceStudy> {
    noise.validate()?;
    if ensemble < 2 {
        return Err(Error::InsufficientData("covariance needs at least two paths".into()));
    }
    let lattice: Vec<(i64, Vec<usize>)> = modes
        .iter()
        .map(|&k| {
            let lags = if lag_steps.is_empty() {
                default_lag_steps(noise, k)
            } else {
                lag_steps.to_vec()
            };
            (k, lags)
        })
        .collect();
    let n = noise.n_steps;
    // Per path: for each (k, lag) the pair (a, b), then |X_k(T)|² per mode.
    #[allow(clippy::type_complexity)]
    let samples: Vec<(Vec<(f64, f64)>, Vec<f64>)> = map_ensemble(ensemble, |p| {
        let path = build_xy(noise, p)?;
        let y = path.y.expect("stationary path requested");
        let mut pairs = Vec::new();
        let mut xs = Vec::new();
        for (k, lags) in &lattice {
            let yt = y.field(n).coeff(*k);
            for &m in lags {
                let ys = y.field(n - m).coeff(*k);
                pairs.push(((yt * ys.conj()).re, 0.5 * (yt.norm_sqr() + ys.norm_sqr())));
            }
            xs.push(path.x.field(n).coeff(*k).norm_sqr());
        }
        Ok((pairs, xs))
    })?;

    let t_final = noise.horizon();
    let mut rows = Vec::new();
    let mut decay = Vec::new();
    let mut col = 0;
    for (mi, (k, lags)) in lattice.iter().enumerate() {
        let w2 = noise.mode_weight(*k).powi(2);
        let var = w2 * y_covariance(*k, noise.gamma, 0.0);
        let mut fit_t = Vec::new();
        let mut fit_y = Vec::new();
        for &m in lags {
            let a: Vec<f64> = samples.iter().map(|s| s.0[col].0).collect();
            let b: Vec<f64> = samples.iter().map(|s| s.0[col].1).collect();
            col += 1;
            let lag = m as f64 * noise.dt;
            let theory = w2 * y_covariance(*k, noise.gamma, lag);
            let (ea, sa) = mean_stderr(&a);
            let (eb, _) = mean_stderr(&b);
            let r = ea / eb;
            let resid: Vec<f64> = a.iter().zip(&b).map(|(x, y)| x - r * y).collect();
            let (_, sr) = mean_stderr(&resid);
            let sr = sr / eb;
            let theory_corr = theory / var;
            if r > 0.0 && theory_corr >= (-3.0f64).exp() {
                fit_t.push(lag);
                fit_y.push(r.ln());
            }
            rows.push(CovarianceRow {
                process: "Y".into(),
                k: *k,
                lag_steps: m,
                lag,
                theory_cov: theory,
                empirical_cov: ea,
                cov_stderr: sa,
                cov_z: z_score(ea, theory, sa),
                theory_corr,
                empirical_corr: r,
                corr_stderr: sr,
                corr_z: z_score(r, theory_corr, sr),
            });
        }
        let xv: Vec<f64> = samples.iter().map(|s| s.1[mi]).collect();
        let (ex, sx) = mean_stderr(&xv);
        let theory = w2 * x_variance(*k, noise.gamma, t_final);
        rows.push(CovarianceRow {
            process: "X".into(),
            k: *k,
            lag_steps: 0,
            lag: 0.0,
            theory_cov: theory,
            empirical_cov: ex,
            cov_stderr: sx,
            cov_z: z_score(ex, theory, sx),
            theory_corr: 1.0,
            empirical_corr: 1.0,
            corr_stderr: 0.0,
            corr_z: 0.0,
        });
        if fit_t.len() >= 3 {
            let (slope, _) = ols_slope(&fit_t, &fit_y)?;
            let predicted = (k.abs() as f64).powf(noise.gamma);
            decay.push(DecayRow {
                k: *k,
                fitted_rate: -slope,
                predicted_rate: predicted,
                relative_error: (-slope - predicted).abs() / predicted,
            });
        }
    }
    let max_abs_z = rows
        .iter()
        .flat_map(|r| [r.cov_z.abs(), r.corr_z.abs()])
        .fold(0.0, f64::max);
    Ok(CovarianceStudy {
        rows,
        decay,
        max_abs_z,
    })
}

fn run_covariance(cfg: &ExperimentConfig, dir: &Path) -> Result<Outcome> {
    let mut out = Outcome::default();
    if cfg.ensemble_size < MIN_COVARIANCE_ENSEMBLE {
        out.warnings.push(format!(
            "ensemble of {} paths is below {MIN_COVARIANCE_ENSEMBLE}; standard errors are rough",
            cfg.ensemble_size
        ));
    }
    let study = covariance_study(&cfg.noise, cfg.ensemble_size, &cfg.params.modes, &cfg.params.lag_steps)?;
    write_rows(
        &dir.join("covariance.csv"),
        &[
            "process",
            "k",
            "lag_steps",
            "lag",
            "theory_cov",
            "empirical_cov",
            "cov_stderr",
            "cov_z",
            "theory_corr",
            "empirical_corr",
            "corr_stderr",
            "corr_z",
        ],
        study.rows.iter().map(|r| {
            vec![
                r.process.clone(),
                r.k.to_string(),
                r.lag_steps.to_string(),
                num(r.lag),
                num(r.theory_cov),
                num(r.empirical_cov),
                num(r.cov_stderr),
                num(r.cov_z),
                num(r.theory_corr),
                num(r.empirical_corr),
                num(r.corr_stderr),
                num(r.corr_z),
            ]
        }),
    )?;
    out.file("covariance.csv", "frb.covariance/1");
    write_rows(
        &dir.join("decay.csv"),
        &["k", "fitted_rate", "predicted_rate", "relative_error"],
        study.decay.iter().map(|d| {
            vec![
                d.k.to_string(),
                num(d.fitted_rate),
                num(d.predicted_rate),
                num(d.relative_error),
            ]
        }),
    )?;
    out.file("decay.csv", "frb.decay/1");
    out.put("max_abs_z", study.max_abs_z);
    out.put("within_3_se", study.max_abs_z <= 3.0);
    out.put(
        "max_decay_relative_error",
        study.decay.iter().map(|d| d.relative_error).fold(0.0, f64::max),
    );
    Ok(out)
}

// ---------------------------------------------------------------------------
// regularity

/// Spatial Hölder exponent expected for the stochastic convolution, when the
/// noise variant has one.
pub fn predicted_spatial_exponent(noise: &NoiseConfig) -> Option<f64> {
    let base = (noise.gamma - 1.0) / 2.0;
    match noise.variant {
        NoiseVariant::White => Some(base),
        NoiseVariant::Roughened { beta } => Some(base - beta),
        NoiseVariant::Mollified { .. } | NoiseVariant::BandLimited { .. } => None,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TemporalFit {
    pub exponent: f64,
    pub stderr: f64,
    pub predicted: Option<f64>,
    pub lags: Vec<f64>,
    /// Ensemble mean of ‖Y(t + h) − Y(t)‖_{L²}.
    pub mean_increments: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegularityStudy {
    pub spatial: RegularityFit,
    pub spatial_predicted: Option<f64>,
    pub temporal: TemporalFit,
}

/// Spatial exponent from exact X(`spatial_time`) samples (p = ∞ block fit)
/// and temporal exponent from L² increments of stationary Y at lags
/// dt·2^m ≤ n_steps·dt; the temporal prediction is α/γ.
pub fn regularity_study(
    noise: &NoiseConfig,
    ensemble: usize,
    spatial_time: f64,
    fit_range: Option<(i64, i64)>,
) -> Result<RegularityStudy> {
    noise.validate()?;
    let lag_steps: Vec<usize> = (0..)
        .map(|m| 1usize << m)
        .take_while(|&l| l <= noise.n_steps)
        .collect();
    if lag_steps.len() < 3 {
        return Err(Error::InsufficientData(format!(
            "temporal fit needs n_steps >= 4, got {}",
            noise.n_steps
        )));
    }
    let per_path: Vec<(SpectralField, Vec<f64>)> = map_ensemble(ensemble, |p| {
        let x = sample_x_at(noise, spatial_time, p)?;
        let y = build_xy(noise, p)?.y.expect("stationary path requested");
        let y0 = y.field(0);
        let incs = lag_steps.iter().map(|&l| (y.field(l) - y0).l2_norm()).collect();
        Ok((x, incs))
    })?;
    let (fields, incs): (Vec<SpectralField>, Vec<Vec<f64>>) = per_path.into_iter().unzip();
    let spatial = fit_regularity(&fields, Integrability::Infinity, fit_range)?;

    let lags: Vec<f64> = lag_steps.iter().map(|&l| l as f64 * noise.dt).collect();
    let mean_increments: Vec<f64> = (0..lags.len())
        .map(|i| incs.iter().map(|v| v[i]).sum::<f64>() / incs.len() as f64)
        .collect();
    let lx: Vec<f64> = lags.iter().map(|h| h.log2()).collect();
    let ly: Vec<f64> = mean_increments.iter().map(|v| v.log2()).collect();
    let (exponent, stderr) = ols_slope(&lx, &ly)?;
    let spatial_predicted = predicted_spatial_exponent(noise);
    Ok(RegularityStudy {
        spatial,
        spatial_predicted,
        temporal: TemporalFit {
            exponent,
            stderr,
            predicted: spatial_predicted.map(|a| a / noise.gamma),
            lags,
            mean_increments,
        },
    })
}

fn run_regularity(cfg: &ExperimentConfig, dir: &Path) -> Result<Outcome> {
    let mut out = Outcome::default();
    let range = cfg.params.fit_range.map(|[a, b]| (a, b));
    let st = regularity_study(&cfg.noise, cfg.ensemble_size, cfg.params.spatial_time, range)?;
    st.spatial.write_csv(&dir.join("spatial_blocks.csv"))?;
    out.file("spatial_blocks.csv", "frb.blocks/1");
    write_rows(
        &dir.join("temporal.csv"),
        &["lag", "mean_l2_increment"],
        st.temporal
            .lags
            .iter()
            .zip(&st.temporal.mean_increments)
            .map(|(l, v)| vec![num(*l), num(*v)]),
    )?;
    out.file("temporal.csv", "frb.temporal/1");
    write_rows(
        &dir.join("exponents.csv"),
        &["object", "fitted", "stderr", "predicted"],
        [
            vec![
                "spatial".into(),
                num(st.spatial.alpha),
                num(st.spatial.stderr),
                opt_num(st.spatial_predicted),
            ],
            vec![
                "temporal".into(),
                num(st.temporal.exponent),
                num(st.temporal.stderr),
                opt_num(st.temporal.predicted),
            ],
        ],
    )?;
    out.file("exponents.csv", "frb.exponents/1");
    out.put("spatial_exponent", st.spatial.alpha);
    out.put("spatial_predicted", st.spatial_predicted);
    out.put("fit_blocks", [st.spatial.j_lo, st.spatial.j_hi]);
    out.put("temporal_exponent", st.temporal.exponent);
    out.put("temporal_predicted", st.temporal.predicted);
    Ok(out)
}

// ---------------------------------------------------------------------------
// simulate

/// One continued solve: driver, solution, u = v + X.
#[derive(Clone, Debug)]
pub struct PathSolution {
    pub x: TimePath,
    pub global: GlobalSolution,
    pub u: TimePath,
}

/// Builds the driver of path `p` and continues the mild solution over the horizon.
pub fn solve_path(
    solver: &SolverConfig,
    noise: &NoiseConfig,
    driver: DriverKind,
    amplitude: f64,
    p: u64,
) -> Result<PathSolution> {
    let x = driver_path(noise, driver, p)?;
    let u0 = initial_datum(&x, amplitude);
    let global = continue_global(&u0, &x, solver)?;
    let u = global.v.add(&x)?;
    Ok(PathSolution { x, global, u })
}

fn run_simulate(cfg: &ExperimentConfig, dir: &Path) -> Result<Outcome> {
    let solver = cfg.solver()?;
    let p = &cfg.params;
    let mut out = Outcome::default();
    if solver.gamma <= 1.5 {
        out.warnings.push(format!(
            "gamma = {} is at or below 3/2, where global bounds are not expected",
            solver.gamma
        ));
    }
    let sols = map_ensemble(cfg.ensemble_size, |i| {
        solve_path(solver, &cfg.noise, p.driver, p.initial_amplitude, i)
    })?;
    write_rows(
        &dir.join("trajectories.csv"),
        &["path", "t", "u_l2", "v_l2", "x_l2"],
        sols.iter().enumerate().flat_map(|(i, s)| {
            (0..s.u.len()).map(move |n| {
                vec![
                    i.to_string(),
                    num(s.u.time(n)),
                    num(s.u.field(n).l2_norm()),
                    num(s.global.v.field(n).l2_norm()),
                    num(s.x.field(n).l2_norm()),
                ]
            })
        }),
    )?;
    out.file("trajectories.csv", "frb.trajectories/1");
    write_windows(&dir.join("windows.csv"), sols.iter().map(|s| &s.global))?;
    out.file("windows.csv", "frb.windows/1");
    let first = sols[0].u.last().to_physical();
    let pts = solver.grid.points();
    write_rows(
        &dir.join("final_state.csv"),
        &["x", "u"],
        pts.iter().zip(&first).map(|(x, u)| vec![num(*x), num(*u)]),
    )?;
    out.file("final_state.csv", "frb.final_state/1");
    summarize_globals(&mut out, sols.iter().map(|s| &s.global));
    Ok(out)
}

fn write_windows<'a>(path: &Path, globals: impl Iterator<Item = &'a GlobalSolution>) -> Result<()> {
    let rows: Vec<Vec<String>> = globals
        .enumerate()
        .flat_map(|(i, g)| {
            g.windows.iter().enumerate().map(move |(w, s)| {
                vec![
                    i.to_string(),
                    w.to_string(),
                    num(s.start_time),
                    s.steps.to_string(),
                    s.iterations.to_string(),
                    opt_num(s.final_ratio),
                    opt_num(s.max_ratio),
                ]
            })
        })
        .collect();
    write_rows(
        path,
        &["path", "window", "start_time", "steps", "iterations", "final_ratio", "max_ratio"],
        rows,
    )
}

fn summarize_globals<'a>(out: &mut Outcome, globals: impl Iterator<Item = &'a GlobalSolution>) {
    let gs: Vec<&GlobalSolution> = globals.collect();
    out.put("paths", gs.len());
    out.put("max_join_jump", gs.iter().map(|g| g.max_join_jump).fold(0.0, f64::max));
    out.put(
        "max_overlap_discrepancy",
        gs.iter().map(|g| g.max_overlap_discrepancy).fold(0.0, f64::max),
    );
    out.put("windows", gs.iter().map(|g| g.windows.len()).sum::<usize>());
    out.put(
        "max_picard_ratio",
        gs.iter()
            .flat_map(|g| g.windows.iter().filter_map(|w| w.max_ratio))
            .fold(0.0, f64::max),
    );
    out.put(
        "below_recommended_gamma",
        gs.first().map(|g| g.below_recommended_gamma).unwrap_or(false),
    );
}

// ---------------------------------------------------------------------------
// energy

/// Ledger, envelope inputs and left side of one energy run.
#[derive(Clone, Debug)]
pub struct EnergyRun {
    pub ledger: EnergyLedger,
    pub lhs: Vec<f64>,
    pub driver: Vec<f64>,
    pub u0_l2_sq: f64,
    pub global: GlobalSolution,
}

pub fn energy_run(
    solver: &SolverConfig,
    noise: &NoiseConfig,
    driver: DriverKind,
    amplitude: f64,
    alpha: f64,
    p: u64,
) -> Result<EnergyRun> {
    let sol = solve_path(solver, noise, driver, amplitude, p)?;
    let ledger = energy_ledger(&sol.global.v, &sol.x, solver.gamma, solver.equation)?;
    let lhs = energy_lhs(&ledger, solver.equation);
    Ok(EnergyRun {
        lhs,
        driver: driver_norms(&sol.x, alpha),
        u0_l2_sq: sol.u.field(0).l2_norm_sq(),
        ledger,
        global: sol.global,
    })
}

/// Envelope constant fitted on `calibration`, and the number of runs in
/// `runs` whose left side ever exceeds the envelope.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnvelopeCheck {
    pub constant: f64,
    pub calibration_runs: usize,
    pub crossings: usize,
    /// max over runs and nodes of lhs / envelope.
    pub max_ratio: f64,
}

pub fn check_envelope(
    equation: Equation,
    runs: &[EnergyRun],
    calibration: usize,
    dt: f64,
    gamma: f64,
) -> Result<(EnvelopeCheck, Vec<Vec<f64>>)> {
    let samples: Vec<EnvelopeSample<'_>> = runs[..calibration]
        .iter()
        .map(|r| EnvelopeSample {
            lhs: &r.lhs,
            driver: &r.driver,
            u0_l2_sq: r.u0_l2_sq,
        })
        .collect();
    let c = fit_gronwall_constant(equation, &samples, dt, gamma)?;
    let envelopes: Vec<Vec<f64>> = runs
        .iter()
        .map(|r| gronwall_envelope(equation, c, r.u0_l2_sq, &r.driver, dt, gamma))
        .collect();
    let mut crossings = 0;
    let mut max_ratio: f64 = 0.0;
    for (r, env) in runs.iter().zip(&envelopes) {
        if r.lhs.iter().zip(env).any(|(l, e)| l > e) {
            crossings += 1;
        }
        for (l, e) in r.lhs.iter().zip(env) {
            if *e > 0.0 {
                max_ratio = max_ratio.max(l / e);
            }
        }
    }
    Ok((
        EnvelopeCheck {
            constant: c,
            calibration_runs: calibration,
            crossings,
            max_ratio,
        },
        envelopes,
    ))
}

/// Mean |per-step balance residual| of one realization at dt and dt/2; the
/// coarse driver is the fine one sampled at every other node, so both runs
/// see the same noise.
pub fn residual_refinement(
    solver: &SolverConfig,
    noise: &NoiseConfig,
    driver: DriverKind,
    amplitude: f64,
    p: u64,
) -> Result<(f64, f64)> {
    let mut fine_noise = noise.clone();
    fine_noise.dt = noise.dt / 2.0;
    fine_noise.n_steps = noise.n_steps * 2;
    let mut fine_solver = solver.clone();
    fine_solver.dt = solver.dt / 2.0;
    let x_fine = driver_path(&fine_noise, driver, p)?;
    let x_coarse = x_fine.subsample(2);
    let mean_res = |x: &TimePath, s: &SolverConfig| -> Result<f64> {
        let u0 = initial_datum(x, amplitude);
        let g = continue_global(&u0, x, s)?;
        Ok(energy_ledger(&g.v, x, s.gamma, s.equation)?.mean_abs_residual())
    };
    Ok((mean_res(&x_coarse, solver)?, mean_res(&x_fine, &fine_solver)?))
}

fn run_energy(cfg: &ExperimentConfig, dir: &Path) -> Result<Outcome> {
    let solver = cfg.solver()?;
    let p = &cfg.params;
    let mut out = Outcome::default();
    let alpha = p.driver_alpha.unwrap_or((solver.gamma - 1.0) / 4.0);
    let runs = map_ensemble(cfg.ensemble_size, |i| {
        energy_run(solver, &cfg.noise, p.driver, p.initial_amplitude, alpha, i)
    })?;
    let calibration = p.calibration_runs.unwrap_or(cfg.ensemble_size.div_ceil(2));
    let (check, envelopes) = check_envelope(solver.equation, &runs, calibration, solver.dt, solver.gamma)?;
    let rows: Vec<Vec<String>> = runs
        .iter()
        .zip(&envelopes)
        .enumerate()
        .flat_map(|(i, (r, env))| {
            let l = &r.ledger;
            (0..l.times.len()).map(move |n| {
                vec![
                    i.to_string(),
                    num(l.times[n]),
                    num(l.l2_sq[n]),
                    num(l.energy[n]),
                    num(l.dissipation[n]),
                    num(l.sobolev_integral[n]),
                    num(l.balance_residual[n]),
                    num(r.lhs[n]),
                    num(env[n]),
                ]
            })
        })
        .collect();
    write_rows(
        &dir.join("energy.csv"),
        &[
            "path",
            "t",
            "l2_sq",
            "energy",
            "dissipation",
            "sobolev_integral",
            "balance_residual",
            "lhs",
            "envelope",
        ],
        rows,
    )?;
    out.file("energy.csv", "frb.energy/1");
    write_windows(&dir.join("windows.csv"), runs.iter().map(|r| &r.global))?;
    out.file("windows.csv", "frb.windows/1");
    summarize_globals(&mut out, runs.iter().map(|r| &r.global));
    out.put("equation", solver.equation);
    out.put("driver_alpha", alpha);
    out.put(
        "max_abs_balance_residual",
        runs.iter().map(|r| r.ledger.max_abs_residual()).fold(0.0, f64::max),
    );
    out.put(
        "max_skew_defect",
        runs.iter().map(|r| r.ledger.skew_defect).fold(0.0, f64::max),
    );
    out.put("envelope", &check);
    if check.crossings > 0 {
        out.warnings.push(format!(
            "{} of {} runs cross the fitted envelope",
            check.crossings,
            runs.len()
        ));
    }
    if p.refine_check {
        let (coarse, fine) = residual_refinement(solver, &cfg.noise, p.driver, p.initial_amplitude, 0)?;
        out.put(
            "residual_refinement",
            json!({ "dt": solver.dt, "mean_abs_residual_dt": coarse, "mean_abs_residual_half_dt": fine, "ratio": coarse / fine }),
        );
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// convergence

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LadderRow {
    pub epsilon: f64,
    pub epsilon_next: f64,
    /// sup_t ‖u^ε − u^{ε_next}‖_{L²}.
    pub difference: f64,
}

/// Solutions driven by ξ^ε for each ε of the ladder, all from the same
/// innovations of path `p`, and the sup-in-time L² gaps between rungs.
pub fn mollification_ladder(
    solver: &SolverConfig,
    noise: &NoiseConfig,
    epsilons: &[f64],
    driver: DriverKind,
    amplitude: f64,
    p: u64,
) -> Result<Vec<LadderRow>> {
    let us: Vec<TimePath> = epsilons
        .iter()
        .map(|&eps| {
            let n = noise.clone().with_variant(NoiseVariant::Mollified { epsilon: eps })?;
            Ok(solve_path(solver, &n, driver, amplitude, p)?.u)
        })
        .collect::<Result<_>>()?;
    us.windows(2)
        .zip(epsilons.windows(2))
        .map(|(u, e)| {
            Ok(LadderRow {
                epsilon: e[0],
                epsilon_next: e[1],
                difference: u[0].sub(&u[1])?.sup_l2(),
            })
        })
        .collect()
}

/// Differences strictly decrease rung to rung.
pub fn is_monotone_decreasing(rows: &[LadderRow]) -> bool {
    rows.windows(2).all(|w| w[1].difference < w[0].difference)
}

fn run_convergence(cfg: &ExperimentConfig, dir: &Path) -> Result<Outcome> {
    let solver = cfg.solver()?;
    let p = &cfg.params;
    let mut out = Outcome::default();
    let ladders = map_ensemble(cfg.ensemble_size, |i| {
        mollification_ladder(solver, &cfg.noise, &p.epsilons, p.driver, p.initial_amplitude, i)
    })?;
    write_rows(
        &dir.join("ladder.csv"),
        &["path", "epsilon", "epsilon_next", "sup_l2_difference"],
        ladders.iter().enumerate().flat_map(|(i, l)| {
            l.iter().map(move |r| {
                vec![i.to_string(), num(r.epsilon), num(r.epsilon_next), num(r.difference)]
            })
        }),
    )?;
    out.file("ladder.csv", "frb.ladder/1");
    let monotone = ladders.iter().filter(|l| is_monotone_decreasing(l)).count();
    out.put("monotone_paths", monotone);
    out.put("paths", ladders.len());
    out.put(
        "mean_rung_ratio",
        ladders
            .iter()
            .flat_map(|l| l.windows(2).map(|w| w[1].difference / w[0].difference))
            .collect::<Vec<_>>(),
    );
    Ok(out)
}

// ---------------------------------------------------------------------------
// paracontrolled

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParacontrolledRow {
    pub span_steps: usize,
    pub iterations: usize,
    pub final_ratio: Option<f64>,
    pub assembly_defect: f64,
    pub max_mild_residual: f64,
    /// C L² gap to v + X from the direct solver on the same span.
    pub direct_gap: Option<f64>,
    pub stencil_defect: f64,
}

/// Solves path `p` with the paracontrolled scheme (and optionally the direct
/// mild solver); returns the summary row and the final-time snapshot.
pub fn paracontrolled_path(
    solver: &SolverConfig,
    noise: &NoiseConfig,
    driver: DriverKind,
    amplitude: f64,
    compare_direct: bool,
    p: u64,
) -> Result<(ParacontrolledRow, FinalSnapshot)> {
    let x = driver_path(noise, driver, p)?;
    let u0 = initial_datum(&x, amplitude);
    let st = solve_paracontrolled(&u0, &x, solver)?;
    let span = st.x.len() - 1;
    let resid = mild_residual(&st.u_assembled, &st.x, solver.gamma)?;
    let direct_gap = if compare_direct {
        let d = continue_global(&u0, &st.x, solver)?;
        Some(d.v.add(&st.x)?.sub(&st.u_assembled)?.sup_l2())
    } else {
        None
    };
    let row = ParacontrolledRow {
        span_steps: span,
        iterations: st.report.iterations,
        final_ratio: st.report.final_ratio(),
        assembly_defect: st.assembly_defect(),
        max_mild_residual: resid.into_iter().fold(0.0, f64::max),
        direct_gap,
        stencil_defect: st.stencil_defect,
    };
    Ok((row, st.final_snapshot()))
}

fn run_paracontrolled(cfg: &ExperimentConfig, dir: &Path) -> Result<Outcome> {
    let solver = cfg.solver()?;
    let p = &cfg.params;
    let mut out = Outcome::default();
    if !(solver.gamma > 1.25 && solver.gamma <= 4.0 / 3.0) {
        out.warnings.push(format!(
            "gamma = {} lies outside (5/4, 4/3], the range the paracontrolled scheme targets",
            solver.gamma
        ));
    }
    let results = map_ensemble(cfg.ensemble_size, |i| {
        paracontrolled_path(solver, &cfg.noise, p.driver, p.initial_amplitude, p.compare_direct, i)
    })?;
    let (rows, snaps): (Vec<ParacontrolledRow>, Vec<FinalSnapshot>) = results.into_iter().unzip();
    let min_span = rows.iter().map(|r| r.span_steps).min().unwrap_or(0);
    write_rows(
        &dir.join("paracontrolled.csv"),
        &[
            "path",
            "span_steps",
            "iterations",
            "final_ratio",
            "assembly_defect",
            "max_mild_residual",
            "direct_gap",
            "stencil_defect",
        ],
        rows.iter().enumerate().map(|(i, r)| {
            vec![
                i.to_string(),
                r.span_steps.to_string(),
                r.iterations.to_string(),
                opt_num(r.final_ratio),
                num(r.assembly_defect),
                num(r.max_mild_residual),
                opt_num(r.direct_gap),
                num(r.stencil_defect),
            ]
        }),
    )?;
    out.file("paracontrolled.csv", "frb.paracontrolled/1");
    if snaps.len() >= MIN_REPORT_ENSEMBLE {
        let range = relaxed_fit_range(solver.grid, solver.gamma, min_span as f64 * solver.dt);
        let report: Vec<ExponentRow> = regularity_report(&snaps, solver.gamma, Some(range))?;
        out.put("exponent_fit_blocks", [range.0, range.1]);
        write_rows(
            &dir.join("exponents.csv"),
            &["object", "fitted", "stderr", "predicted"],
            report.iter().map(|r| {
                vec![r.object.clone(), num(r.fitted), num(r.stderr), num(r.predicted)]
            }),
        )?;
        out.file("exponents.csv", "frb.exponents/1");
        out.put("exponents", &report);
    } else {
        out.warnings.push(format!(
            "exponent report skipped: needs at least {MIN_REPORT_ENSEMBLE} paths"
        ));
    }
    out.put("paths", rows.len());
    out.put("min_span_steps", min_span);
    out.put(
        "max_direct_gap",
        rows.iter().filter_map(|r| r.direct_gap).fold(0.0, f64::max),
    );
    out.put(
        "max_mild_residual",
        rows.iter().map(|r| r.max_mild_residual).fold(0.0, f64::max),
    );
    Ok(out)
}

// ---------------------------------------------------------------------------
// admissible scan

fn scan_beta(noise: &NoiseConfig) -> Result<f64> {
    match noise.variant {
        NoiseVariant::White => Ok(0.0),
        NoiseVariant::BandLimited { beta, .. } => Ok(beta),
        _ => Err(Error::Config(
            "the admissible scan uses band-limited noise; set noise.variant to white or band_limited".into(),
        )),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScanRow {
    pub n_band: i64,
    pub mean_l2: f64,
    pub stderr: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdmissibleScan {
    pub beta: f64,
    pub gamma: f64,
    pub rows: Vec<ScanRow>,
    /// Slope of log‖u⁽¹⁾(T)‖ against log N_band; None when u⁽¹⁾ ≡ 0.
    pub exponent: Option<f64>,
    pub stderr: Option<f64>,
    /// Power-counting heuristic 1/2 + 2β − 3γ/2.
    pub heuristic: f64,
}

impl AdmissibleScan {
    /// Negative fitted exponent: the first iterate stays bounded as the band grows.
    pub fn admissible(&self) -> Option<bool> {
        self.exponent.map(|e| e < 0.0)
    }
}

/// ‖u⁽¹⁾(T)‖_{L²} with u⁽¹⁾ = D[½∂_x(X²)] for band-limited X at each level.
pub fn admissible_scan(
    noise: &NoiseConfig,
    n_bands: &[i64],
    ensemble: usize,
    beta: f64,
    driver: DriverKind,
) -> Result<AdmissibleScan> {
    let rows: Vec<ScanRow> = n_bands
        .iter()
        .map(|&nb| {
            let n = noise.clone().with_variant(NoiseVariant::BandLimited { n_band: nb, beta })?;
            let norms = map_ensemble(ensemble, |p| {
                let x = driver_path(&n, driver, p)?;
                let u1 = duhamel_bilinear_path(&x, &x, n.gamma)?;
                Ok(u1.last().l2_norm())
            })?;
            let (mean_l2, stderr) = mean_stderr(&norms);
            Ok(ScanRow {
                n_band: nb,
                mean_l2,
                stderr,
            })
        })
        .collect::<Result<_>>()?;
    let (exponent, stderr) = if rows.iter().all(|r| r.mean_l2 > 0.0) {
        let lx: Vec<f64> = rows.iter().map(|r| (r.n_band as f64).ln()).collect();
        let ly: Vec<f64> = rows.iter().map(|r| r.mean_l2.ln()).collect();
        let (s, e) = ols_slope(&lx, &ly)?;
        (Some(s), Some(e))
    } else {
        (None, None)
    };
    Ok(AdmissibleScan {
        beta,
        gamma: noise.gamma,
        rows,
        exponent,
        stderr,
        heuristic: 0.5 + 2.0 * beta - 1.5 * noise.gamma,
    })
}

fn run_admissible_scan(cfg: &ExperimentConfig, dir: &Path) -> Result<Outcome> {
    let mut out = Outcome::default();
    let beta = scan_beta(&cfg.noise)?;
    let scan = admissible_scan(&cfg.noise, &cfg.params.n_bands, cfg.ensemble_size, beta, cfg.params.driver)?;
    write_rows(
        &dir.join("admissible_scan.csv"),
        &["n_band", "mean_l2", "stderr"],
        scan.rows
            .iter()
            .map(|r| vec![r.n_band.to_string(), num(r.mean_l2), num(r.stderr)]),
    )?;
    out.file("admissible_scan.csv", "frb.admissible/1");
    out.put("beta", scan.beta);
    out.put("gamma", scan.gamma);
    out.put("exponent", scan.exponent);
    out.put("exponent_stderr", scan.stderr);
    out.put("heuristic_exponent", scan.heuristic);
    out.put("admissible", scan.admissible());
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::seq::SliceRandom;
    use rand::SeedableRng;

    const SIMULATE: &str = r#"
experiment = "simulate"
ensemble_size = 2

[solver]
gamma = 1.6
horizon = 0.05
dt = 0.005
grid = 32

[noise]
gamma = 1.6
seed = 3
dt = 0.005
n_steps = 10
grid = 32

[params]
initial_amplitude = 0.2
"#;

    fn with_dir(src: &str, dir: &Path) -> ExperimentConfig {
        let mut c = ExperimentConfig::from_toml_str(src).unwrap();
        c.output_dir = dir.to_path_buf();
        c
    }

    #[test]
    fn parses_and_defaults() {
        let c = ExperimentConfig::from_toml_str(SIMULATE).unwrap();
        assert_eq!(c.experiment, ExperimentKind::Simulate);
        assert_eq!(c.params.epsilons, default_epsilons());
        assert_eq!(c.noise.variant, NoiseVariant::White);
        assert_eq!(c.output_dir, PathBuf::from("out"));
    }

    #[test]
    fn unknown_keys_rejected() {
        let bad = SIMULATE.replace("ensemble_size = 2", "ensemble_size = 2\ngama = 1.5");
        assert!(matches!(ExperimentConfig::from_toml_str(&bad), Err(Error::Toml(_))));
        let bad = SIMULATE.replace("initial_amplitude = 0.2", "initial_amplitud = 0.2");
        assert!(matches!(ExperimentConfig::from_toml_str(&bad), Err(Error::Toml(_))));
    }

    #[test]
    fn invalid_configs_are_config_errors() {
        let dt_beyond = SIMULATE.replace("dt = 0.005\ngrid = 32\n\n[noise]", "dt = 0.5\ngrid = 32\n\n[noise]");
        let e = ExperimentConfig::from_toml_str(&dt_beyond).unwrap_err();
        assert!(matches!(e, Error::Config(_)));
        assert_eq!(e.exit_code(), 2);
        let mismatch = SIMULATE.replace("n_steps = 10", "n_steps = 12");
        assert!(matches!(ExperimentConfig::from_toml_str(&mismatch), Err(Error::Config(_))));
        let no_solver = SIMULATE.split("[solver]").next().unwrap().to_string()
            + "[noise]\ngamma = 1.6\nseed = 1\ndt = 0.01\nn_steps = 4\ngrid = 32\n";
        assert!(matches!(ExperimentConfig::from_toml_str(&no_solver), Err(Error::Config(_))));
    }

    #[test]
    fn experiment_names_round_trip() {
        for k in ExperimentKind::ALL {
            assert_eq!(k.name().parse::<ExperimentKind>().unwrap(), k);
        }
        assert_eq!("admissible-scan".parse::<ExperimentKind>().unwrap(), ExperimentKind::AdmissibleScan);
        assert!("nope".parse::<ExperimentKind>().is_err());
    }

    #[test]
    fn aggregation_ignores_completion_order() {
        let vals: Vec<(u64, f64)> = (0..200u64).map(|i| (i, 1.0 / (1.0 + i as f64).powf(1.7))).collect();
        let reference = sort_by_path(vals.clone());
        let (m0, s0) = mean_stderr(&reference);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(9);
        for _ in 0..20 {
            let mut shuffled = vals.clone();
            shuffled.shuffle(&mut rng);
            let sorted = sort_by_path(shuffled);
            let (m, s) = mean_stderr(&sorted);
            assert_eq!(m.to_bits(), m0.to_bits());
            assert_eq!(s.to_bits(), s0.to_bits());
        }
    }

    #[test]
    fn ensemble_results_independent_of_thread_count() {
        let g = TorusGrid::new(32).unwrap();
        let noise = NoiseConfig::new(g, 1.5, 0.01, 20, 4).unwrap();
        let go = |threads| {
            rayon::ThreadPoolBuilder::new()
                .num_threads(threads)
                .build()
                .unwrap()
                .install(|| covariance_study(&noise, 16, &[1, 3], &[]).unwrap())
        };
        let a = go(1);
        let b = go(3);
        assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
    }

    #[test]
    fn manifest_written_and_replayed() {
        let tmp = tempfile::tempdir().unwrap();
        let cfg = with_dir(SIMULATE, &tmp.path().join("a"));
        let m = run(&cfg, 2).unwrap();
        assert_eq!(m.status, RunStatus::Completed);
        assert_eq!(m.outputs.len(), 3);
        let loaded = RunManifest::load(&tmp.path().join("a").join(MANIFEST_FILE)).unwrap();
        assert_eq!(loaded, m);
        let rep = replay(&tmp.path().join("a").join(MANIFEST_FILE), &tmp.path().join("b"), 1).unwrap();
        assert!(rep.identical(), "{:?}", rep.mismatches);
    }

    #[test]
    fn failed_run_leaves_valid_manifest() {
        let tmp = tempfile::tempdir().unwrap();
        let mut cfg = with_dir(SIMULATE, tmp.path());
        // An initial datum far too large for any window to contract.
        cfg.params.initial_amplitude = 1e6;
        let err = run(&cfg, 1).unwrap_err();
        let m = RunManifest::load(&tmp.path().join(MANIFEST_FILE)).unwrap();
        assert_eq!(m.status, RunStatus::Failed);
        assert_eq!(m.error.unwrap().exit_code, err.exit_code());
        assert!(m.outputs.is_empty());
    }

    #[test]
    fn zero_driver_gives_zero_first_iterate() {
        let g = TorusGrid::new(64).unwrap();
        let noise = NoiseConfig::new(g, 2.0, 0.01, 10, 1).unwrap();
        let scan = admissible_scan(&noise, &[4, 8, 16], 3, 0.0, DriverKind::Off).unwrap();
        assert!(scan.rows.iter().all(|r| r.mean_l2 == 0.0));
        assert_eq!(scan.exponent, None);
        assert_eq!(scan.admissible(), None);
    }

    #[test]
    fn deterministic_ladder_has_no_epsilon_dependence() {
        let g = TorusGrid::new(32).unwrap();
        let solver = SolverConfig::new(g, 1.6, 0.05, 0.005).unwrap();
        let noise = NoiseConfig::new(g, 1.6, 0.005, 10, 2).unwrap();
        let rows = mollification_ladder(&solver, &noise, &[0.4, 0.2, 0.1], DriverKind::Off, 0.3, 0).unwrap();
        assert!(rows.iter().all(|r| r.difference < 1e-14));
    }

    #[test]
    fn default_lags_cover_one_correlation_time() {
        let g = TorusGrid::new(64).unwrap();
        let noise = NoiseConfig::new(g, 2.0, 1e-3, 100, 0).unwrap();
        assert_eq!(default_lag_steps(&noise, 16), vec![0, 2, 4, 8]);
        assert_eq!(default_lag_steps(&noise, 1), vec![0, 100]);
    }
}
