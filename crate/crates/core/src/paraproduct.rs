//! Bony paraproducts, resonant products, the time-mollified paraproduct ≺≺
//! and the commutators built from them.
//!
//! All products are formed on the 3N/2 padded grid from physical-space block
//! values, so `f≺g + f≻g + f∘g` regroups the dealiased product exactly.

use num_complex::Complex64;
use rayon::prelude::*;

use crate::besov::DyadicPartition;
use crate::error::{Error, Result};
use crate::spectral::{fft_inverse, from_padded, SpectralField, TimePath};

/// Physical values of every block Δ_j f, j = -1..=j_max, on the padded grid.
struct PaddedBlocks {
    blocks: Vec<Vec<f64>>,
}

fn padded_block_pair(
    part: &DyadicPartition,
    f: &SpectralField,
    g: &SpectralField,
) -> (PaddedBlocks, PaddedBlocks) {
    let grid = part.grid();
    let m = grid.padded_len();
    let kmax = grid.max_wavenumber();
    let i = Complex64::new(0.0, 1.0);
    let fc = f.coeffs();
    let gc = g.coeffs();
    let (a, b): (Vec<_>, Vec<_>) = part
        .block_indices()
        .map(|j| {
            let mut buf = vec![Complex64::new(0.0, 0.0); m];
            for &(idx, w) in part.sparse_block(j) {
                let k = grid.wavenumber(idx);
                if k.abs() <= kmax {
                    buf[k.rem_euclid(m as i64) as usize] = (fc[idx] + i * gc[idx]) * w;
                }
            }
            fft_inverse(&mut buf);
            buf.into_iter().map(|c| (c.re, c.im)).unzip::<_, _, Vec<_>, Vec<_>>()
        })
        .unzip();
    (PaddedBlocks { blocks: a }, PaddedBlocks { blocks: b })
}

fn check_pair(f: &SpectralField, g: &SpectralField) -> Result<()> {
    f.check_same_grid(g)
}

/// Σ_j S_{j-1}a · Δ_j b from padded blocks (S_{j-1} = Σ_{i ≤ j-2} Δ_i).
fn less_from_blocks(a: &PaddedBlocks, b: &PaddedBlocks, m: usize) -> Vec<f64> {
    let mut acc = vec![0.0; m];
    let mut low = vec![0.0; m];
    // Block index b_idx = j + 1.
    for j_idx in 0..b.blocks.len() {
        if j_idx >= 2 {
            for (l, x) in low.iter_mut().zip(&a.blocks[j_idx - 2]) {
                *l += x;
            }
            for ((s, l), y) in acc.iter_mut().zip(&low).zip(&b.blocks[j_idx]) {
                *s += l * y;
            }
        }
    }
    acc
}

fn resonant_from_blocks(a: &PaddedBlocks, b: &PaddedBlocks, m: usize) -> Vec<f64> {
    let nb = a.blocks.len();
    let mut acc = vec![0.0; m];
    for i in 0..nb {
        for j in i.saturating_sub(1)..(i + 2).min(nb) {
            for ((s, x), y) in acc.iter_mut().zip(&a.blocks[i]).zip(&b.blocks[j]) {
                *s += x * y;
            }
        }
    }
    acc
}

/// f ≺ g = Σ_j S_{j-1}f · Δ_j g.
pub fn para_less(f: &SpectralField, g: &SpectralField) -> Result<SpectralField> {
    check_pair(f, g)?;
    let grid = f.grid();
    let part = DyadicPartition::for_grid(grid);
    let (a, b) = padded_block_pair(&part, f, g);
    Ok(from_padded(grid, &less_from_blocks(&a, &b, grid.padded_len())))
}

/// f ≻ g = g ≺ f.
pub fn para_greater(f: &SpectralField, g: &SpectralField) -> Result<SpectralField> {
    para_less(g, f)
}

/// f ∘ g = Σ_{|i-j| ≤ 1} Δ_i f · Δ_j g.
pub fn resonant(f: &SpectralField, g: &SpectralField) -> Result<SpectralField> {
    check_pair(f, g)?;
    let grid = f.grid();
    let part = DyadicPartition::for_grid(grid);
    let (a, b) = padded_block_pair(&part, f, g);
    Ok(from_padded(grid, &resonant_from_blocks(&a, &b, grid.padded_len())))
}

/// (f ≺ g, f ≻ g, f ∘ g) from a single block decomposition.
pub fn bony_split(
    f: &SpectralField,
    g: &SpectralField,
) -> Result<(SpectralField, SpectralField, SpectralField)> {
    check_pair(f, g)?;
    let grid = f.grid();
    let m = grid.padded_len();
    let part = DyadicPartition::for_grid(grid);
    let (a, b) = padded_block_pair(&part, f, g);
    Ok((
        from_padded(grid, &less_from_blocks(&a, &b, m)),
        from_padded(grid, &less_from_blocks(&b, &a, m)),
        from_padded(grid, &resonant_from_blocks(&a, &b, m)),
    ))
}

/// C(f, g, h) = (f ≺ g) ∘ h − f·(g ∘ h).
pub fn commutator_resonant(
    f: &SpectralField,
    g: &SpectralField,
    h: &SpectralField,
) -> Result<SpectralField> {
    check_pair(f, g)?;
    check_pair(f, h)?;
    let first = resonant(&para_less(f, g)?, h)?;
    let second = f.dealiased_product(&resonant(g, h)?)?;
    Ok(&first - &second)
}

/// Mass-one time profile used by ≺≺: φ(t) = c·((t − 1/4)(3/4 − t))² on (1/4, 3/4).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TemporalMollifier {
    gamma: f64,
    norm: f64,
}

const PHI_LO: f64 = 0.25;
const PHI_HI: f64 = 0.75;
/// Minimum number of nonzero lag nodes for a block to be mollified.
pub const MIN_LAG_NODES: usize = 4;

impl TemporalMollifier {
    pub fn new(gamma: f64) -> Result<Self> {
        if !(gamma > 0.0 && gamma.is_finite()) {
            return Err(Error::Domain(format!("mollifier scale exponent must be positive, got {gamma}")));
        }
        // Composite Simpson on the support; the integrand is a polynomial of
        // degree 4, which Simpson with 2000 panels integrates to roundoff.
        let n = 2000;
        let h = (PHI_HI - PHI_LO) / n as f64;
        let mut s = 0.0;
        for i in 0..=n {
            let t = PHI_LO + i as f64 * h;
            let w = if i == 0 || i == n {
                1.0
            } else if i % 2 == 1 {
                4.0
            } else {
                2.0
            };
            s += w * raw_phi(t);
        }
        let mass = s * h / 3.0;
        Ok(Self {
            gamma,
            norm: 1.0 / mass,
        })
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    /// Normalized profile.
    pub fn phi(&self, t: f64) -> f64 {
        self.norm * raw_phi(t)
    }

    /// Block-i kernel 2^{γi}φ(2^{γi}τ).
    pub fn kernel(&self, i: i64, tau: f64) -> f64 {
        let s = 2f64.powf(self.gamma * i as f64);
        s * self.phi(s * tau)
    }

    /// Normalized quadrature weights (m, w_m) at lags m·dt for block `i`, or
    /// `None` when fewer than [`MIN_LAG_NODES`] lags fall inside the support.
    pub fn lag_weights(&self, i: i64, dt: f64) -> Option<Vec<(usize, f64)>> {
        let s = 2f64.powf(-self.gamma * i as f64);
        let m_hi = (PHI_HI * s / dt).ceil() as usize;
        let mut w: Vec<(usize, f64)> = (0..=m_hi)
            .filter_map(|m| {
                let k = self.kernel(i, m as f64 * dt);
                (k > 0.0).then_some((m, k))
            })
            .collect();
        if w.len() < MIN_LAG_NODES {
            return None;
        }
        let total: f64 = w.iter().map(|(_, x)| x).sum();
        for (_, x) in &mut w {
            *x /= total;
        }
        Some(w)
    }
}

fn raw_phi(t: f64) -> f64 {
    if t <= PHI_LO || t >= PHI_HI {
        0.0
    } else {
        let p = (t - PHI_LO) * (PHI_HI - t);
        p * p
    }
}

fn check_paths(f: &TimePath, g: &TimePath) -> Result<()> {
    f.check_compatible(g)?;
    if (f.t0() - g.t0()).abs() > 1e-12 * f.dt().max(1.0) {
        return Err(Error::Dimension("time paths start at different times".into()));
    }
    Ok(())
}

/// f ≺≺ g: at each node, Σ_i (Q_i S_{i-1}f)(t) · Δ_i g(t), where Q_i convolves
/// in time against the block-i kernel with f clamped to its first node for
/// earlier times. Blocks whose kernel spans fewer than four steps use the
/// unmollified S_{i-1}f(t).
pub fn modified_para(f: &TimePath, g: &TimePath, moll: &TemporalMollifier) -> Result<TimePath> {
    check_paths(f, g)?;
    let grid = f.grid();
    let part = DyadicPartition::for_grid(grid);
    let m = grid.padded_len();
    let kmax = grid.max_wavenumber();
    let dt = f.dt();
    let lags: Vec<Option<Vec<(usize, f64)>>> =
        (1..=part.j_max()).map(|i| moll.lag_weights(i, dt)).collect();

    let fields: Vec<SpectralField> = (0..f.len())
        .into_par_iter()
        .map(|n| {
            let mut acc = vec![0.0; m];
            let gc = g.field(n).coeffs();
            for i in 1..=part.j_max() {
                let gb = part.sparse_block(i);
                if gb.iter().all(|&(idx, _)| gc[idx] == Complex64::new(0.0, 0.0)) {
                    continue;
                }
                let mut buf = vec![Complex64::new(0.0, 0.0); m];
                let cutoff = 2f64.powi(i as i32 - 1);
                let klim = ((crate::besov::CHI_OUTER * cutoff).ceil() as i64).min(kmax);
                let lag = &lags[(i - 1) as usize];
                for k in -klim..=klim {
                    let w = crate::besov::chi(k as f64 / cutoff);
                    if w == 0.0 {
                        continue;
                    }
                    let idx = grid.index_of(k).unwrap();
                    let val = match lag {
                        Some(lw) => lw
                            .iter()
                            .map(|&(mm, wt)| f.field(n.saturating_sub(mm)).coeffs()[idx] * wt)
                            .sum::<Complex64>(),
                        None => f.field(n).coeffs()[idx],
                    };
                    buf[k.rem_euclid(m as i64) as usize] = val * w;
                }
                let im = Complex64::new(0.0, 1.0);
                for &(idx, w) in gb {
                    let k = grid.wavenumber(idx);
                    if k.abs() <= kmax {
                        buf[k.rem_euclid(m as i64) as usize] += im * gc[idx] * w;
                    }
                }
                fft_inverse(&mut buf);
                for (s, c) in acc.iter_mut().zip(&buf) {
                    *s += c.re * c.im;
                }
            }
            from_padded(grid, &acc)
        })
        .collect();
    TimePath::new(f.t0(), dt, fields)
}

/// Pointwise-in-time f ≺ g.
pub fn para_less_path(f: &TimePath, g: &TimePath) -> Result<TimePath> {
    check_paths(f, g)?;
    let fields = f
        .fields()
        .par_iter()
        .zip(g.fields())
        .map(|(a, b)| para_less(a, b))
        .collect::<Result<Vec<_>>>()?;
    TimePath::new(f.t0(), f.dt(), fields)
}

/// Discrete ℒ = ∂_t − Λ^γ: `(F_{n+1} − F_n)/dt + |k|^γ F_n` at nodes 0..len−2.
pub fn heat_operator(f: &TimePath, gamma: f64) -> Result<TimePath> {
    if f.len() < 2 {
        return Err(Error::InsufficientResolution(
            "the discrete heat operator needs at least two time nodes".into(),
        ));
    }
    let dt = f.dt();
    let fields = (0..f.len() - 1)
        .map(|n| {
            let mut d = &(f.field(n + 1) - f.field(n)) * (1.0 / dt);
            d += &f.field(n).apply_real_multiplier(|k| (k.abs() as f64).powf(gamma));
            d
        })
        .collect();
    TimePath::new(f.t0(), dt, fields)
}

/// ℒ(f ≺≺ g) − f ≺≺ (ℒg) on nodes 0..len−2.
pub fn commutator_heat(
    f: &TimePath,
    g: &TimePath,
    moll: &TemporalMollifier,
    gamma: f64,
) -> Result<TimePath> {
    check_paths(f, g)?;
    if moll.lag_weights(1, f.dt()).is_none() {
        return Err(Error::InsufficientResolution(format!(
            "time step {} too coarse for any mollified block",
            f.dt()
        )));
    }
    let lhs = heat_operator(&modified_para(f, g, moll)?, gamma)?;
    let f_trim = f.slice(0, f.len() - 2)?;
    let rhs = modified_para(&f_trim, &heat_operator(g, gamma)?, moll)?;
    lhs.sub(&rhs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::spectral::TorusGrid;
    use crate::besov::{besov_norm, BesovSpec};
    use crate::noise::{build_xy, NoiseConfig};
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn band_limited(grid: TorusGrid, seed: u64, kcut: i64, decay: f64) -> SpectralField {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut f = SpectralField::zeros(grid);
        let n = grid.n();
        for k in 1..=kcut.min(grid.max_wavenumber()) {
            let a: f64 = StandardNormal.sample(&mut rng);
            let b: f64 = StandardNormal.sample(&mut rng);
            let c = Complex64::new(a, b) * (k as f64).powf(-decay);
            f.coeffs_mut()[k as usize] = c;
            f.coeffs_mut()[n - k as usize] = c.conj();
        }
        f
    }

    /// Σ_{i ≤ j-2} Σ_j Δ_i f Δ_j g computed with separate dealiased products.
    fn brute_para_less(f: &SpectralField, g: &SpectralField) -> SpectralField {
        let part = DyadicPartition::for_grid(f.grid());
        let mut acc = SpectralField::zeros(f.grid());
        for j in part.block_indices() {
            for i in part.block_indices() {
                if i <= j - 2 {
                    let p = part
                        .block(f, i)
                        .unwrap()
                        .dealiased_product(&part.block(g, j).unwrap())
                        .unwrap();
                    acc += &p;
                }
            }
        }
        acc
    }

    #[test]
    fn zero_arguments() {
        let grid = TorusGrid::new(64).unwrap();
        let f = band_limited(grid, 1, 31, 0.0);
        let z = SpectralField::zeros(grid);
        let tiny = 1e-14 * f.l2_norm();
        assert!(para_less(&f, &z).unwrap().l2_norm() < tiny);
        assert!(para_less(&z, &f).unwrap().l2_norm() < tiny);
        let tiny3 = 1e-14 * f.l2_norm().powi(3);
        assert!(commutator_resonant(&z, &f, &f).unwrap().l2_norm() < tiny3);
        assert!(commutator_resonant(&f, &f, &z).unwrap().l2_norm() < tiny3);
    }

    #[test]
    fn grid_mismatch() {
        let a = SpectralField::zeros(TorusGrid::new(32).unwrap());
        let b = SpectralField::zeros(TorusGrid::new(64).unwrap());
        assert!(matches!(para_less(&a, &b), Err(Error::Dimension(_))));
        assert!(matches!(resonant(&a, &b), Err(Error::Dimension(_))));
    }

    #[test]
    fn single_modes_against_double_sum() {
        let grid = TorusGrid::new(256).unwrap();
        let one = Complex64::new(1.0, 0.0);
        let f = SpectralField::single_mode(grid, 1, one).unwrap();
        let g = SpectralField::single_mode(grid, 32, one).unwrap();
        let got = para_less(&f, &g).unwrap();
        let want = brute_para_less(&f, &g);
        assert!((&got - &want).l2_norm() < 1e-12);
        // Low mode deep below the high block: the paraproduct is the full product.
        let full = f.dealiased_product(&g).unwrap();
        assert!((&got - &full).l2_norm() < 1e-12);
    }

    #[test]
    fn random_against_double_sum() {
        let grid = TorusGrid::new(128).unwrap();
        let f = band_limited(grid, 3, 63, 0.3);
        let g = band_limited(grid, 4, 63, 0.3);
        let got = para_less(&f, &g).unwrap();
        let want = brute_para_less(&f, &g);
        assert!((&got - &want).l2_norm() < 1e-12 * want.l2_norm());
    }

    #[test]
    fn resonant_same_block() {
        let grid = TorusGrid::new(256).unwrap();
        let one = Complex64::new(1.0, 0.0);
        // ρ ≡ 1 on [4/3, 3/2], so k = 44 and 46 lie entirely in block 5.
        let f = SpectralField::single_mode(grid, 44, one).unwrap();
        let g = SpectralField::single_mode(grid, 46, one).unwrap();
        let r = resonant(&f, &g).unwrap();
        let full = f.dealiased_product(&g).unwrap();
        assert!((&r - &full).l2_norm() < 1e-12);
    }

    #[test]
    fn commutator_with_constant() {
        let grid = TorusGrid::new(128).unwrap();
        let c = SpectralField::single_mode(grid, 0, Complex64::new(1.7, 0.0)).unwrap();
        let g = band_limited(grid, 5, 63, 0.2);
        let h = band_limited(grid, 6, 63, 0.4);
        let got = commutator_resonant(&c, &g, &h).unwrap();
        let part = DyadicPartition::for_grid(grid);
        let low = &part.block(&g, -1).unwrap() + &part.block(&g, 0).unwrap();
        let want = &resonant(&low, &h).unwrap() * -1.7;
        assert!((&got - &want).l2_norm() < 1e-12 * want.l2_norm().max(1.0));
    }

    #[test]
    fn commutator_ratio_bounded_across_resolutions() {
        let (a, b, c) = (0.4, -0.3, 0.1);
        let mut ratios = Vec::new();
        for n in [128usize, 256, 512] {
            let grid = TorusGrid::new(n).unwrap();
            let kc = grid.max_wavenumber();
            let f = band_limited(grid, 1, kc, a + 0.5);
            let g = band_limited(grid, 2, kc, b + 0.5);
            let h = band_limited(grid, 3, kc, c + 0.5);
            let com = commutator_resonant(&f, &g, &h).unwrap();
            let r = besov_norm(&com, BesovSpec::sobolev(a + b + c))
                / (besov_norm(&f, BesovSpec::holder(a))
                    * besov_norm(&g, BesovSpec::sobolev(b))
                    * besov_norm(&h, BesovSpec::holder(c)));
            ratios.push(r);
        }
        assert!(ratios.iter().all(|r| r.is_finite() && *r < 3.0 * ratios[0]), "{ratios:?}");
    }

    #[test]
    fn paraproduct_estimate_shapes() {
        let mut lows = Vec::new();
        let mut res = Vec::new();
        for n in [128usize, 256, 512, 1024] {
            let grid = TorusGrid::new(n).unwrap();
            let kc = grid.max_wavenumber();
            let f = band_limited(grid, 7, kc, 0.9);
            let g = band_limited(grid, 8, kc, 0.3);
            let s = BesovSpec::sobolev(-0.2);
            lows.push(
                besov_norm(&para_less(&f, &g).unwrap(), s) / (f.sup_norm(4) * besov_norm(&g, s)),
            );
            let (s1, s2) = (0.4, -0.2);
            res.push(
                besov_norm(&resonant(&f, &g).unwrap(), BesovSpec::holder(s1 + s2))
                    / (besov_norm(&f, BesovSpec::holder(s1)) * besov_norm(&g, BesovSpec::holder(s2))),
            );
        }
        assert!(lows.iter().all(|r| *r < 3.0 * lows[0]), "{lows:?}");
        assert!(res.iter().all(|r| *r < 3.0 * res[0]), "{res:?}");
    }

    #[test]
    fn mollifier_mass_and_support() {
        let m = TemporalMollifier::new(1.5).unwrap();
        assert!((m.norm - 960.0).abs() < 1e-8);
        assert_eq!(m.phi(0.0), 0.0);
        assert_eq!(m.phi(-1.0), 0.0);
        assert_eq!(m.phi(0.8), 0.0);
        // Independent midpoint rule.
        let n = 200_000;
        let mass: f64 = (0..n).map(|i| m.phi((i as f64 + 0.5) / n as f64)).sum::<f64>() / n as f64;
        assert!((mass - 1.0).abs() < 1e-10);
        let w = m.lag_weights(1, 1e-3).unwrap();
        assert!((w.iter().map(|x| x.1).sum::<f64>() - 1.0).abs() < 1e-14);
        assert!(m.lag_weights(10, 1e-3).is_none());
    }

    fn ou_paths(n: usize, gamma: f64, steps: usize, seed: u64) -> (TimePath, TimePath) {
        let cfg = NoiseConfig::new(TorusGrid::new(n).unwrap(), gamma, 1e-3, steps, seed).unwrap();
        let p = build_xy(&cfg, 0).unwrap();
        (p.x, p.y.unwrap())
    }

    #[test]
    fn constant_in_time_reduces_to_para_less() {
        let grid = TorusGrid::new(128).unwrap();
        let f0 = band_limited(grid, 9, 63, 0.5);
        let (_, g) = ou_paths(128, 1.5, 60, 2);
        let f = TimePath::constant(&f0, 0.0, g.dt(), g.len());
        let m = TemporalMollifier::new(1.5).unwrap();
        let got = modified_para(&f, &g, &m).unwrap();
        let want = para_less_path(&f, &g).unwrap();
        let err = got.sub(&want).unwrap().sup_l2();
        assert!(err < 1e-10 * want.sup_l2(), "err={err}");
    }

    #[test]
    fn modified_para_zero_g() {
        let (x, _) = ou_paths(64, 1.5, 20, 1);
        let z = TimePath::zeros(x.grid(), 0.0, x.dt(), x.len());
        let m = TemporalMollifier::new(1.5).unwrap();
        assert!(modified_para(&x, &z, &m).unwrap().sup_l2() < 1e-15);
    }

    #[test]
    fn modified_para_difference_is_resolution_stable() {
        let m = TemporalMollifier::new(1.5).unwrap();
        let mut ratios = Vec::new();
        for n in [128usize, 256] {
            let (x, y) = ou_paths(n, 1.5, 120, 3);
            let f = y.map(|v| v.apply_real_multiplier(|k| 1.0 / (1.0 + (k * k) as f64)));
            let d = modified_para(&f, &x, &m).unwrap().sub(&para_less_path(&f, &x).unwrap()).unwrap();
            let num = d.fields().iter().map(|v| v.sup_norm(4)).fold(0.0, f64::max);
            let den = f.fields().iter().map(|v| v.sup_norm(4)).fold(0.0, f64::max)
                * x.fields().iter().map(|v| v.sup_norm(4)).fold(0.0, f64::max);
            ratios.push(num / den);
        }
        assert!(ratios.iter().all(|r| r.is_finite()));
        assert!(ratios[1] < 3.0 * ratios[0], "{ratios:?}");
    }

    #[test]
    fn heat_operator_single_mode() {
        let grid = TorusGrid::new(16).unwrap();
        let k = 3i64;
        let gamma = 1.5;
        let lam = (k as f64).powf(gamma);
        let errs: Vec<f64> = [1e-3, 5e-4]
            .iter()
            .map(|&dt| {
                let path = TimePath::from_fn(grid, 0.0, dt, 50, |_, t| {
                    SpectralField::single_mode(grid, k, Complex64::new(t.sin(), 0.0)).unwrap()
                })
                .unwrap();
                let l = heat_operator(&path, gamma).unwrap();
                (0..l.len())
                    .map(|n| {
                        let t = n as f64 * dt;
                        (l.field(n).coeff(k).re - (t.cos() + lam * t.sin())).abs()
                    })
                    .fold(0.0, f64::max)
            })
            .collect();
        assert!(errs[0] < 1e-3, "{errs:?}");
        // First order in dt.
        assert!(errs[1] < 0.6 * errs[0], "{errs:?}");
    }

    #[test]
    fn heat_commutator_vanishes_for_constants() {
        let grid = TorusGrid::new(64).unwrap();
        let (_, g) = ou_paths(64, 1.5, 80, 5);
        let c = SpectralField::single_mode(grid, 0, Complex64::new(0.8, 0.0)).unwrap();
        let f = TimePath::constant(&c, 0.0, g.dt(), g.len());
        let m = TemporalMollifier::new(1.5).unwrap();
        let com = commutator_heat(&f, &g, &m, 1.5).unwrap();
        assert!(com.sup_l2() < 1e-9 * heat_operator(&g, 1.5).unwrap().sup_l2());
    }

    #[test]
    fn heat_commutator_rejects_coarse_grid() {
        let grid = TorusGrid::new(16).unwrap();
        let f = TimePath::zeros(grid, 0.0, 0.5, 4);
        let m = TemporalMollifier::new(1.5).unwrap();
        assert!(matches!(
            commutator_heat(&f, &f, &m, 1.5),
            Err(Error::InsufficientResolution(_))
        ));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]
        #[test]
        fn reconstruction(seed in 0u64..10_000, p in 4u32..9, kcut in 2i64..200) {
            let grid = TorusGrid::new(1 << p).unwrap();
            let f = band_limited(grid, seed, kcut, 0.0);
            let g = band_limited(grid, seed + 1, kcut, 0.5);
            let (lt, gt, rs) = bony_split(&f, &g).unwrap();
            let mut sum = &lt + &gt;
            sum += &rs;
            let prod = f.dealiased_product(&g).unwrap();
            prop_assert!((&sum - &prod).l2_norm() <= 1e-10 * prod.l2_norm().max(1e-300));
        }

        #[test]
        fn resonant_symmetric_and_bilinear(seed in 0u64..10_000, a in -2.0f64..2.0) {
            let grid = TorusGrid::new(64).unwrap();
            let f = band_limited(grid, seed, 31, 0.0);
            let g = band_limited(grid, seed + 1, 31, 0.0);
            let h = band_limited(grid, seed + 2, 31, 0.0);
            let fg = resonant(&f, &g).unwrap();
            prop_assert!((&fg - &resonant(&g, &f).unwrap()).l2_norm() < 1e-12 * fg.l2_norm());
            let mut lin = f.scale(a);
            lin += &h;
            let lhs = para_less(&lin, &g).unwrap();
            let mut rhs = para_less(&f, &g).unwrap().scale(a);
            rhs += &para_less(&h, &g).unwrap();
            prop_assert!((&lhs - &rhs).l2_norm() <= 1e-12 * (1.0 + lhs.l2_norm()));
        }
    }
}
