use num_complex::Complex64;
use rand_distr::{Bernoulli, Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{hex, Dataset};
use crate::error::{Error, Result};
use crate::rng;
use crate::spectral::fft;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum SteganoMode {
    /// Bernoulli(`rho`) mask over the centered grid.
    Sparse { rho: f64 },
    /// Annulus `r_lo * r_max <= r < r_hi * r_max`, with `r_max = n/2`.
    Ring { r_lo: f64, r_hi: f64 },
}

/// Class-specific spectral shortcut: per class `c`, `eta_c = M_c ⊙ (epsilon * N_c)`
/// with `N_c` standard normal per bin, drawn from a stream derived from `seed`
/// and `c`, so train and test splits receive the same pattern.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SteganoSpec {
    #[serde(flatten)]
    pub mode: SteganoMode,
    pub epsilon: f64,
    pub seed: u64,
}

impl SteganoSpec {
    pub fn validate(&self) -> Result<()> {
        match self.mode {
            SteganoMode::Sparse { rho } if !(rho > 0.0 && rho <= 1.0) => {
                return Err(Error::InvalidArgument(format!("rho={rho} outside (0, 1]")))
            }
            SteganoMode::Ring { r_lo, r_hi } if !(0.0 <= r_lo && r_lo < r_hi && r_hi <= 1.0) => {
                return Err(Error::InvalidArgument(format!("ring radii {r_lo}..{r_hi}")))
            }
            _ => {}
        }
        if !(self.epsilon >= 0.0 && self.epsilon.is_finite()) {
            return Err(Error::InvalidArgument(format!("epsilon={}", self.epsilon)));
        }
        Ok(())
    }

    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("plain data");
        hex(&Sha256::digest(json.as_bytes()))[..16].to_string()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InjectionReport {
    /// Fraction of pixels that left `[0, 1]` before clamping.
    pub clamped_fraction: f64,
    /// Set when more than 1% of pixels were clamped.
    pub flagged: bool,
}

/// `G'(u, v) = (G(u, v) + conj(G(-u, -v))) / 2`, indices modulo the extents.
/// Works on centered or uncentered layouts alike for even extents.
pub fn hermitian_symmetrize(grid: &[Complex64], h: usize, w: usize) -> Vec<Complex64> {
    assert_eq!(grid.len(), h * w);
    let mut out = vec![Complex64::new(0.0, 0.0); h * w];
    for i in 0..h {
        for j in 0..w {
            let m = ((h - i) % h) * w + (w - j) % w;
            out[i * w + j] = (grid[i * w + j] + grid[m].conj()) * 0.5;
        }
    }
    out
}

/// Centered, Hermitian-symmetric `eta_c` for one class, one grid per channel.
pub fn shortcut_pattern(spec: &SteganoSpec, class: usize, channels: usize, h: usize, w: usize) -> Result<Vec<Vec<Complex64>>> {
    spec.validate()?;
    let mut r = rng::rng(rng::derive(spec.seed, class as u64));
    let r_max = (h.min(w) / 2) as f64;
    let mut grids = Vec::with_capacity(channels);
    for _ in 0..channels {
        let mut eta = vec![Complex64::new(0.0, 0.0); h * w];
        let noise: Vec<f64> = (0..h * w).map(|_| StandardNormal.sample(&mut r)).collect();
        let mask: Vec<bool> = match spec.mode {
            SteganoMode::Sparse { rho } => {
                let b = Bernoulli::new(rho).map_err(|e| Error::InvalidArgument(e.to_string()))?;
                (0..h * w).map(|_| b.sample(&mut r)).collect()
            }
            SteganoMode::Ring { r_lo, r_hi } => (0..h * w)
                .map(|idx| {
                    let (u, v) = ((idx / w) as f64 - (h / 2) as f64, (idx % w) as f64 - (w / 2) as f64);
                    let rad = (u * u + v * v).sqrt();
                    rad >= r_lo * r_max && rad < r_hi * r_max
                })
                .collect(),
        };
        for idx in 0..h * w {
            if mask[idx] {
                eta[idx] = Complex64::new(spec.epsilon * noise[idx], 0.0);
            }
        }
        grids.push(hermitian_symmetrize(&eta, h, w));
    }
    Ok(grids)
}

/// Adds each class's shortcut to the spectrum of every image of that class,
/// transforms back and clamps to `[0, 1]`.
pub fn inject_shortcut(d: &Dataset, spec: &SteganoSpec) -> Result<(Dataset, InjectionReport)> {
    spec.validate()?;
    let [c, h, w] = d.image_shape();
    let plane = h * w;
    // Spatial pattern per class: Re(IDFT(eta_c)), added linearly.
    let mut patterns = Vec::with_capacity(d.classes);
    for class in 0..d.classes {
        let mut pat = Vec::with_capacity(c * plane);
        for g in shortcut_pattern(spec, class, c, h, w)? {
            let mut buf = fft::ifftshift(&g, h, w);
            fft::fft2_inplace(&mut buf, h, w, true);
            pat.extend(buf.iter().map(|z| z.re));
        }
        patterns.push(pat);
    }
    let mut out = d.clone();
    let mut clamped = 0usize;
    let per = c * plane;
    for (i, &label) in d.labels.iter().enumerate() {
        let img = &mut out.images.data_mut()[i * per..(i + 1) * per];
        for (v, p) in img.iter_mut().zip(&patterns[label]) {
            let x = *v + p;
            if !(0.0..=1.0).contains(&x) {
                clamped += 1;
            }
            *v = x.clamp(0.0, 1.0);
        }
    }
    let frac = clamped as f64 / d.images.numel().max(1) as f64;
    out.provenance.injection = Some(spec.hash());
    Ok((
        out,
        InjectionReport {
            clamped_fraction: frac,
            flagged: frac > 0.01,
        },
    ))
}
