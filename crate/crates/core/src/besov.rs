//! Littlewood–Paley decomposition, Besov norms and empirical regularity fits.

use std::collections::HashMap;
use std::fmt;
use std::io::Write;
use std::path::Path;
use std::sync::{Arc, Mutex, OnceLock};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::spectral::{SpectralField, TorusGrid};

/// χ ≡ 1 on |ξ| ≤ CHI_INNER.
pub const CHI_INNER: f64 = 0.75;
/// χ ≡ 0 on |ξ| ≥ CHI_OUTER.
pub const CHI_OUTER: f64 = 4.0 / 3.0;
/// Oversampling factor for sup norms.
pub const SUP_OVERSAMPLE: usize = 4;

fn bump(x: f64) -> f64 {
    if x > 0.0 {
        (-1.0 / x).exp()
    } else {
        0.0
    }
}

/// Smooth radial cutoff: 1 on |ξ| ≤ 3/4, 0 on |ξ| ≥ 4/3.
pub fn chi(xi: f64) -> f64 {
    let a = xi.abs();
    if a <= CHI_INNER {
        return 1.0;
    }
    if a >= CHI_OUTER {
        return 0.0;
    }
    let s = (a - CHI_INNER) / (CHI_OUTER - CHI_INNER);
    let p = bump(1.0 - s);
    p / (p + bump(s))
}

/// Annulus profile ρ(ξ) = χ(ξ/2) − χ(ξ), supported in 3/4 ≤ |ξ| ≤ 8/3.
pub fn rho(xi: f64) -> f64 {
    chi(xi / 2.0) - chi(xi)
}

/// Block weights tabulated for one grid. Block `j = -1` is χ, block `j ≥ 0` is ρ(2^{-j}·).
#[derive(Debug)]
pub struct DyadicPartition {
    grid: TorusGrid,
    j_max: i64,
    // Sparse (FFT index, weight) lists, one per block starting at j = -1.
    blocks: Vec<Vec<(usize, f64)>>,
}

fn partition_cache() -> &'static Mutex<HashMap<usize, Arc<DyadicPartition>>> {
    static CACHE: OnceLock<Mutex<HashMap<usize, Arc<DyadicPartition>>>> = OnceLock::new();
    CACHE.get_or_init(Default::default)
}

impl DyadicPartition {
    /// Shared, lazily tabulated partition for `grid`.
    pub fn for_grid(grid: TorusGrid) -> Arc<DyadicPartition> {
        let mut cache = partition_cache().lock().unwrap_or_else(|e| e.into_inner());
        cache
            .entry(grid.n())
            .or_insert_with(|| Arc::new(Self::build(grid)))
            .clone()
    }

    fn build(grid: TorusGrid) -> Self {
        let j_max = Self::j_max_for(grid);
        let blocks = (-1..=j_max)
            .map(|j| {
                (0..grid.n())
                    .filter_map(|i| {
                        let w = weight(j, grid.wavenumber(i) as f64);
                        (w > 0.0).then_some((i, w))
                    })
                    .collect()
            })
            .collect();
        Self {
            grid,
            j_max,
            blocks,
        }
    }

    /// Largest j whose annulus starts inside the grid: (3/4)·2^j < N/2.
    pub fn j_max_for(grid: TorusGrid) -> i64 {
        let half = grid.n() as f64 / 2.0;
        let mut j = 0;
        while CHI_INNER * 2f64.powi(j as i32 + 1) < half {
            j += 1;
        }
        j
    }

    pub fn grid(&self) -> TorusGrid {
        self.grid
    }

    pub fn j_max(&self) -> i64 {
        self.j_max
    }

    /// Block indices -1..=j_max.
    pub fn block_indices(&self) -> std::ops::RangeInclusive<i64> {
        -1..=self.j_max
    }

    /// Weight of block `j` at wavenumber `k`.
    pub fn block_weight(&self, j: i64, k: i64) -> f64 {
        if j < -1 {
            0.0
        } else {
            weight(j, k as f64)
        }
    }

    /// Weight of S_j at wavenumber `k`: χ(2^{-j}k) for j ≥ 0, 0 for j < 0.
    pub fn low_weight(&self, j: i64, k: i64) -> f64 {
        if j < 0 {
            0.0
        } else {
            chi(k as f64 / 2f64.powi(j as i32))
        }
    }

    pub(crate) fn sparse_block(&self, j: i64) -> &[(usize, f64)] {
        &self.blocks[(j + 1) as usize]
    }

    fn check_block(&self, j: i64) -> Result<()> {
        if j < -1 || j > self.j_max {
            return Err(Error::OutOfRange(format!(
                "block {j} outside -1..={} for N = {}",
                self.j_max,
                self.grid.n()
            )));
        }
        Ok(())
    }

    /// Δ_j f.
    pub fn block(&self, f: &SpectralField, j: i64) -> Result<SpectralField> {
        self.check_block(j)?;
        if f.grid() != self.grid {
            return Err(Error::Dimension("field and partition grids differ".into()));
        }
        let mut out = SpectralField::zeros(self.grid);
        let src = f.coeffs();
        let dst = out.coeffs_mut();
        for &(i, w) in self.sparse_block(j) {
            dst[i] = src[i] * w;
        }
        Ok(out)
    }

    /// S_j f = Σ_{i ≤ j-1} Δ_i f. Saturates to f for large j and vanishes for j ≤ -1.
    pub fn low(&self, f: &SpectralField, j: i64) -> SpectralField {
        if j < 0 {
            return SpectralField::zeros(f.grid());
        }
        if j > self.j_max + 1 {
            return f.clone();
        }
        let scale = 2f64.powi(j as i32);
        f.apply_real_multiplier(|k| chi(k as f64 / scale))
    }

    /// Block norms ‖Δ_j f‖_{L^p} for j = -1..=j_max.
    pub fn block_norms(&self, f: &SpectralField, p: Integrability) -> Vec<f64> {
        self.block_indices()
            .map(|j| {
                let b = self.block(f, j).expect("block index in range");
                match p {
                    Integrability::Two => b.l2_norm(),
                    Integrability::Infinity => b.sup_norm(SUP_OVERSAMPLE),
                }
            })
            .collect()
    }
}

fn weight(j: i64, k: f64) -> f64 {
    if j == -1 {
        chi(k)
    } else {
        // χ(2^{-j-1}k) − χ(2^{-j}k) telescopes exactly in the partition sum.
        let s = 2f64.powi(j as i32);
        chi(k / (2.0 * s)) - chi(k / s)
    }
}

pub fn dyadic_block(f: &SpectralField, j: i64) -> Result<SpectralField> {
    DyadicPartition::for_grid(f.grid()).block(f, j)
}

pub fn low_cutoff(f: &SpectralField, j: i64) -> SpectralField {
    DyadicPartition::for_grid(f.grid()).low(f, j)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Integrability {
    #[serde(rename = "2")]
    Two,
    #[serde(rename = "inf")]
    Infinity,
}

impl fmt::Display for Integrability {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Integrability::Two => write!(f, "2"),
            Integrability::Infinity => write!(f, "inf"),
        }
    }
}

/// B^s_{p,r} with p = r ∈ {2, ∞}: H^s or 𝒞^s.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BesovSpec {
    pub s: f64,
    pub p: Integrability,
    pub r: Integrability,
}

impl BesovSpec {
    pub fn new(s: f64, p: Integrability, r: Integrability) -> Result<Self> {
        if p != r {
            return Err(Error::Domain(format!(
                "only p = r is supported, got p = {p}, r = {r}"
            )));
        }
        Ok(Self { s, p, r })
    }

    pub fn sobolev(s: f64) -> Self {
        Self {
            s,
            p: Integrability::Two,
            r: Integrability::Two,
        }
    }

    pub fn holder(s: f64) -> Self {
        Self {
            s,
            p: Integrability::Infinity,
            r: Integrability::Infinity,
        }
    }
}

pub fn besov_norm(f: &SpectralField, spec: BesovSpec) -> f64 {
    let part = DyadicPartition::for_grid(f.grid());
    let norms = part.block_norms(f, spec.p);
    let weighted = part
        .block_indices()
        .zip(norms)
        .map(|(j, n)| 2f64.powf(j as f64 * spec.s) * n);
    match spec.r {
        Integrability::Two => weighted.map(|x| x * x).sum::<f64>().sqrt(),
        Integrability::Infinity => weighted.fold(0.0, f64::max),
    }
}

/// Ordinary least squares slope and its standard error.
pub fn ols_slope(xs: &[f64], ys: &[f64]) -> Result<(f64, f64)> {
    if xs.len() != ys.len() {
        return Err(Error::Dimension("x and y lengths differ".into()));
    }
    let n = xs.len();
    if n < 3 {
        return Err(Error::InsufficientData(format!(
            "need at least 3 points for a slope, got {n}"
        )));
    }
    let nf = n as f64;
    let mx = xs.iter().sum::<f64>() / nf;
    let my = ys.iter().sum::<f64>() / nf;
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    if sxx == 0.0 {
        return Err(Error::InsufficientData("degenerate abscissae".into()));
    }
    let slope = sxy / sxx;
    let icept = my - slope * mx;
    let ssr: f64 = xs
        .iter()
        .zip(ys)
        .map(|(x, y)| (y - icept - slope * x).powi(2))
        .sum();
    Ok((slope, (ssr / (nf - 2.0) / sxx).sqrt()))
}

pub const CONVENTION_SUP: &str = "sup-block: E|D_j f|_inf ~ sqrt(j+2) 2^(-j alpha)";
pub const CONVENTION_L2: &str = "l2-block: E|D_j f|_2 ~ 2^(-j alpha)";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlockStat {
    pub j: i64,
    pub mean_norm: f64,
    pub count: usize,
}

/// Result of [`fit_regularity`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegularityFit {
    pub alpha: f64,
    pub stderr: f64,
    pub p: Integrability,
    pub j_lo: i64,
    pub j_hi: i64,
    pub convention: String,
    pub blocks: Vec<BlockStat>,
}

impl RegularityFit {
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["j", "mean_block_norm", "count"])?;
        for b in &self.blocks {
            w.write_record([b.j.to_string(), format!("{:e}", b.mean_norm), b.count.to_string()])?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        serde_json::to_writer_pretty(&mut f, self)?;
        f.write_all(b"\n")?;
        Ok(())
    }
}

/// Default fit window: blocks 2..=j_max-2.
pub fn default_fit_range(grid: TorusGrid) -> (i64, i64) {
    (2, DyadicPartition::j_max_for(grid) - 2)
}

/// Mean block norms over an ensemble, for j = -1..=j_max.
pub fn mean_block_norms(ensemble: &[SpectralField], p: Integrability) -> Result<Vec<f64>> {
    use rayon::prelude::*;
    let first = ensemble
        .first()
        .ok_or_else(|| Error::InsufficientData("empty ensemble".into()))?;
    let part = DyadicPartition::for_grid(first.grid());
    if ensemble.iter().any(|f| f.grid() != first.grid()) {
        return Err(Error::Dimension("ensemble members live on different grids".into()));
    }
    let per: Vec<Vec<f64>> = ensemble.par_iter().map(|f| part.block_norms(f, p)).collect();
    let m = ensemble.len() as f64;
    let nb = per[0].len();
    Ok((0..nb).map(|b| per.iter().map(|v| v[b]).sum::<f64>() / m).collect())
}

/// Fits α̂ from the decay of mean block norms.
///
/// For p = 2, α̂ = −slope of log₂ E‖Δ_j f‖_{L²}. For p = ∞ the slope is taken
/// after dividing by √(j+2), the growth of the maximum of ~2^j Gaussian
/// values, so that both conventions report the same α̂ for Gaussian fields.
pub fn fit_regularity(
    ensemble: &[SpectralField],
    p: Integrability,
    j_range: Option<(i64, i64)>,
) -> Result<RegularityFit> {
    let first = ensemble
        .first()
        .ok_or_else(|| Error::InsufficientData("empty ensemble".into()))?;
    let grid = first.grid();
    let j_max = DyadicPartition::j_max_for(grid);
    let (lo, hi) = j_range.unwrap_or_else(|| default_fit_range(grid));
    let lo = lo.max(-1);
    let hi = hi.min(j_max - 2);
    if hi - lo + 1 < 3 {
        return Err(Error::InsufficientData(format!(
            "fit window {lo}..={hi} has fewer than 3 blocks (N = {})",
            grid.n()
        )));
    }
    let means = mean_block_norms(ensemble, p)?;
    fit_from_means(&means, p, lo, hi, ensemble.len())
}

pub(crate) fn fit_from_means(
    means: &[f64],
    p: Integrability,
    lo: i64,
    hi: i64,
    count: usize,
) -> Result<RegularityFit> {
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    for j in lo..=hi {
        let m = means[(j + 1) as usize];
        if !(m > 0.0) {
            return Err(Error::InsufficientData(format!("block {j} has zero mean norm")));
        }
        let mut y = m.log2();
        if p == Integrability::Infinity {
            y -= 0.5 * ((j + 2) as f64).log2();
        }
        xs.push(j as f64);
        ys.push(y);
    }
    let (slope, stderr) = ols_slope(&xs, &ys)?;
    Ok(RegularityFit {
        alpha: -slope,
        stderr,
        p,
        j_lo: lo,
        j_hi: hi,
        convention: match p {
            Integrability::Two => CONVENTION_L2,
            Integrability::Infinity => CONVENTION_SUP,
        }
        .to_string(),
        blocks: means
            .iter()
            .enumerate()
            .map(|(b, &m)| BlockStat {
                j: b as i64 - 1,
                mean_norm: m,
                count,
            })
            .collect(),
    })
}
