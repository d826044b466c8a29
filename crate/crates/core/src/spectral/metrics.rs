use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use super::{dft2, fft, Spectrum};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Shape of the low-frequency region used by [`kappa_high`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum LowRegion {
    /// `|u| <= k/2` and `|v| <= k/2`.
    #[default]
    Square,
    /// `u^2 + v^2 <= (k/2)^2`.
    Disk,
}

impl LowRegion {
    pub fn contains(self, u: i64, v: i64, k: f64) -> bool {
        let half = k / 2.0;
        match self {
            LowRegion::Square => (u.abs() as f64) <= half && (v.abs() as f64) <= half,
            LowRegion::Disk => ((u * u + v * v) as f64) <= half * half,
        }
    }
}

fn kappa_from_energy(low: f64, total: f64) -> f64 {
    if total <= 0.0 {
        0.0
    } else {
        (1.0 - low / total).clamp(0.0, 1.0)
    }
}

/// Fraction of spectral energy outside the centered interval `[-k/2, k/2]`
/// of a 1D signal.
pub fn kappa_high_1d(signal: &[f64], k: f64) -> Result<f64> {
    let n = signal.len();
    if !(k >= 0.0 && k < n as f64) {
        return Err(Error::InvalidArgument(format!("k={k} must lie in [0, {n})")));
    }
    let mut buf: Vec<Complex64> = signal.iter().map(|&v| Complex64::new(v, 0.0)).collect();
    fft::fft_inplace(&mut buf, false);
    let (mut low, mut total) = (0.0, 0.0);
    for (idx, c) in buf.iter().enumerate() {
        // signed frequency in [-n/2, n/2)
        let u = if idx < n.div_ceil(2) { idx as i64 } else { idx as i64 - n as i64 };
        let e = c.norm_sqr();
        total += e;
        if (u.abs() as f64) <= k / 2.0 {
            low += e;
        }
    }
    Ok(kappa_from_energy(low, total))
}

/// [`kappa_high_1d`] for a spectrum, with a square or disk low region.
pub fn kappa_high_spectrum(spec: &Spectrum, k: f64, region: LowRegion) -> Result<f64> {
    let n = spec.height().min(spec.width());
    if !(k >= 0.0 && k < n as f64) {
        return Err(Error::InvalidArgument(format!("k={k} must lie in [0, {n})")));
    }
    let (mut low, mut total) = (0.0, 0.0);
    for i in 0..spec.height() {
        for j in 0..spec.width() {
            let e = spec.bins()[i * spec.width() + j].norm_sqr();
            total += e;
            let (u, v) = spec.frequency(i, j);
            if region.contains(u, v, k) {
                low += e;
            }
        }
    }
    Ok(kappa_from_energy(low, total))
}

pub fn kappa_high(image: &[f64], h: usize, w: usize, k: f64, region: LowRegion) -> Result<f64> {
    kappa_high_spectrum(&dft2(image, h, w)?, k, region)
}

/// Energy marginal over integer radius (`round(sqrt(u^2+v^2))`) or over
/// 1-degree angle sectors (`floor(atan2(v, u))` in `[0, 360)`; the zero
/// frequency is assigned to sector 0).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnergyProfile {
    pub bins: Vec<f64>,
}

impl EnergyProfile {
    pub fn total(&self) -> f64 {
        self.bins.iter().sum()
    }

    /// `sum_b b * E(b) / sum_b E(b)`; 0 for an empty profile.
    pub fn centroid(&self) -> f64 {
        let t = self.total();
        if t <= 0.0 {
            return 0.0;
        }
        self.bins.iter().enumerate().map(|(b, e)| b as f64 * e).sum::<f64>() / t
    }
}

fn grid_hw(energy: &Tensor) -> Result<(usize, usize)> {
    match energy.shape() {
        [h, w] => Ok((*h, *w)),
        s => Err(Error::InvalidArgument(format!("expected a 2D grid, got {s:?}"))),
    }
}

fn centered_freq(i: usize, j: usize, h: usize, w: usize) -> (i64, i64) {
    (i as i64 - (h / 2) as i64, j as i64 - (w / 2) as i64)
}

/// Radial marginal of a centered energy grid.
pub fn radial_profile(energy: &Tensor) -> Result<EnergyProfile> {
    let (h, w) = grid_hw(energy)?;
    let rmax = (((h / 2).pow(2) + (w / 2).pow(2)) as f64).sqrt().round() as usize;
    let mut bins = vec![0.0; rmax + 1];
    for i in 0..h {
        for j in 0..w {
            let (u, v) = centered_freq(i, j, h, w);
            let r = (((u * u + v * v) as f64).sqrt()).round() as usize;
            bins[r] += energy.data()[i * w + j];
        }
    }
    Ok(EnergyProfile { bins })
}

/// Angular marginal of a centered energy grid, 360 one-degree sectors.
pub fn angular_profile(energy: &Tensor) -> Result<EnergyProfile> {
    let (h, w) = grid_hw(energy)?;
    let mut bins = vec![0.0; 360];
    for i in 0..h {
        for j in 0..w {
            let (u, v) = centered_freq(i, j, h, w);
            let sector = if u == 0 && v == 0 {
                0
            } else {
                let deg = (v as f64).atan2(u as f64).to_degrees().rem_euclid(360.0);
                (deg.floor() as usize).min(359)
            };
            bins[sector] += energy.data()[i * w + j];
        }
    }
    Ok(EnergyProfile { bins })
}

/// Energy-weighted mean radius `sum r |X|^2 / sum |X|^2` using the exact
/// radius of each bin.
pub fn radial_centroid(energy: &Tensor) -> Result<f64> {
    let (h, w) = grid_hw(energy)?;
    let (mut num, mut den) = (0.0, 0.0);
    for i in 0..h {
        for j in 0..w {
            let (u, v) = centered_freq(i, j, h, w);
            let e = energy.data()[i * w + j];
            num += ((u * u + v * v) as f64).sqrt() * e;
            den += e;
        }
    }
    Ok(if den > 0.0 { num / den } else { 0.0 })
}

/// `(sum |x_i|^p)^(1/p)`; a quasinorm for `p < 1`.
pub fn pq_norm(values: &[f64], p: f64) -> Result<f64> {
    if !(p > 0.0 && p.is_finite()) {
        return Err(Error::InvalidArgument(format!("p={p} must be positive")));
    }
    let s: f64 = values.iter().map(|v| v.abs().powf(p)).sum();
    Ok(s.powf(1.0 / p))
}

pub fn pq_norm_complex(values: &[Complex64], p: f64) -> Result<f64> {
    let m: Vec<f64> = values.iter().map(|c| c.norm()).collect();
    pq_norm(&m, p)
}

/// Average ranks (1-based), ties sharing the mean of their positions.
pub fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && values[idx[j + 1]] == values[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

/// Spearman rank correlation of two equally sized grids. `None` when either
/// grid is constant (the coefficient is undefined).
pub fn spearman(a: &[f64], b: &[f64]) -> Result<Option<f64>> {
    if a.len() != b.len() {
        return Err(Error::InvalidArgument(format!(
            "extent mismatch: {} vs {}",
            a.len(),
            b.len()
        )));
    }
    let (ra, rb) = (average_ranks(a), average_ranks(b));
    let n = a.len() as f64;
    let (ma, mb) = (ra.iter().sum::<f64>() / n, rb.iter().sum::<f64>() / n);
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in ra.iter().zip(&rb) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma).powi(2);
        sbb += (y - mb).powi(2);
    }
    if saa == 0.0 || sbb == 0.0 {
        return Ok(None);
    }
    Ok(Some((sab / (saa * sbb).sqrt()).clamp(-1.0, 1.0)))
}

/// Slack of `||(w_1 ⊙ ... ⊙ w_L)|_Ω||_2 <= prod_l ||w_l|_Ω||_2` for each
/// region `Ω` (a mask over the bins). Nonnegative slack means the bound holds.
pub fn hadamard_bound_check(spectra: &[Vec<Complex64>], omegas: &[Vec<bool>]) -> Result<Vec<f64>> {
    let n = spectra
        .first()
        .ok_or_else(|| Error::InvalidArgument("no filter spectra".into()))?
        .len();
    if spectra.iter().any(|s| s.len() != n) || omegas.iter().any(|o| o.len() != n) {
        return Err(Error::InvalidArgument("unequal extents".into()));
    }
    let product: Vec<Complex64> = (0..n)
        .map(|i| spectra.iter().fold(Complex64::new(1.0, 0.0), |acc, s| acc * s[i]))
        .collect();
    let restricted = |v: &[Complex64], m: &[bool]| -> f64 {
        v.iter().zip(m).filter(|(_, &keep)| keep).map(|(c, _)| c.norm_sqr()).sum::<f64>().sqrt()
    };
    Ok(omegas
        .iter()
        .map(|m| {
            let bound: f64 = spectra.iter().map(|s| restricted(s, m)).product();
            bound - restricted(&product, m)
        })
        .collect())
}

/// Masks of the centered 1D interval `|u| <= k/2` over an `n`-point DFT in
/// standard (uncentered) bin order, one per `k`.
pub fn interval_masks(n: usize, ks: &[f64]) -> Vec<Vec<bool>> {
    ks.iter()
        .map(|&k| {
            (0..n)
                .map(|idx| {
                    let u = if idx < n.div_ceil(2) { idx as i64 } else { idx as i64 - n as i64 };
                    (u.abs() as f64) <= k / 2.0
                })
                .collect()
        })
        .collect()
}
