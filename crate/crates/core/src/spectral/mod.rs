//! Fourier-domain measurements: centered spectra, energy concentration,
//! radial and angular marginals, sparsity norms, rank correlation and the
//! restricted Hadamard-product inequality.

pub mod export;
pub mod fft;
mod metrics;
mod sweep;

use num_complex::Complex64;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub use metrics::*;
pub use sweep::{kappa_high_pooled, map_kappa, uncertainty_sweep, ConcentrationReport};

/// Centered 2D DFT of a real grid: bin `(i, j)` holds frequency
/// `(i - h/2, j - w/2)`, so the zero frequency sits at `(h/2, w/2)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Spectrum {
    h: usize,
    w: usize,
    bins: Vec<Complex64>,
}

impl Spectrum {
    pub fn from_centered(h: usize, w: usize, bins: Vec<Complex64>) -> Result<Self> {
        if bins.len() != h * w {
            return Err(Error::InvalidArgument(format!(
                "{} bins for a {h}x{w} grid",
                bins.len()
            )));
        }
        Ok(Self { h, w, bins })
    }

    pub fn height(&self) -> usize {
        self.h
    }

    pub fn width(&self) -> usize {
        self.w
    }

    pub fn bins(&self) -> &[Complex64] {
        &self.bins
    }

    /// Signed frequency of bin `(i, j)`.
    pub fn frequency(&self, i: usize, j: usize) -> (i64, i64) {
        (i as i64 - (self.h / 2) as i64, j as i64 - (self.w / 2) as i64)
    }

    pub fn magnitude(&self) -> Tensor {
        Tensor::new(vec![self.h, self.w], self.bins.iter().map(|c| c.norm()).collect())
            .expect("grid shape")
    }

    pub fn energy(&self) -> Tensor {
        Tensor::new(vec![self.h, self.w], self.bins.iter().map(|c| c.norm_sqr()).collect())
            .expect("grid shape")
    }

    pub fn total_energy(&self) -> f64 {
        self.bins.iter().map(|c| c.norm_sqr()).sum()
    }

    /// Uncentered bins (zero frequency at index 0).
    pub fn uncentered(&self) -> Vec<Complex64> {
        fft::ifftshift(&self.bins, self.h, self.w)
    }

    /// Inverse transform back to the spatial grid (complex, `1/N^2` scaled).
    pub fn inverse(&self) -> Vec<Complex64> {
        let mut buf = self.uncentered();
        fft::fft2_inplace(&mut buf, self.h, self.w, true);
        buf
    }
}

fn check_extents(h: usize, w: usize, len: usize) -> Result<()> {
    if h * w != len {
        return Err(Error::InvalidArgument(format!("{len} samples for a {h}x{w} grid")));
    }
    if h == 0 || w == 0 || h % 2 != 0 || w % 2 != 0 {
        return Err(Error::InvalidArgument(format!(
            "extents must be even and positive, got {h}x{w}"
        )));
    }
    Ok(())
}

/// Unnormalized forward DFT of a real `h x w` grid, centered.
pub fn dft2(image: &[f64], h: usize, w: usize) -> Result<Spectrum> {
    check_extents(h, w, image.len())?;
    let mut buf: Vec<Complex64> = image.iter().map(|&v| Complex64::new(v, 0.0)).collect();
    fft::fft2_inplace(&mut buf, h, w, false);
    Ok(Spectrum {
        h,
        w,
        bins: fft::fftshift(&buf, h, w),
    })
}

/// Reference O(N^4) version of [`dft2`].
pub fn dft2_naive(image: &[f64], h: usize, w: usize) -> Result<Spectrum> {
    check_extents(h, w, image.len())?;
    let buf: Vec<Complex64> = image.iter().map(|&v| Complex64::new(v, 0.0)).collect();
    let out = fft::dft2_naive_raw(&buf, h, w, false);
    Ok(Spectrum {
        h,
        w,
        bins: fft::fftshift(&out, h, w),
    })
}

/// Spectrum of a tensor whose last two axes are the spatial grid; any
/// leading axes (channels) are transformed separately and their energies
/// added by the callers that need a single grid.
pub fn dft2_tensor(t: &Tensor) -> Result<Vec<Spectrum>> {
    let r = t.rank();
    if r < 2 {
        return Err(Error::InvalidArgument(format!("need a grid, got shape {:?}", t.shape())));
    }
    let (h, w) = (t.shape()[r - 2], t.shape()[r - 1]);
    t.data().chunks(h * w).map(|c| dft2(c, h, w)).collect()
}

/// Mean over examples of the per-bin DFT magnitude. Multi-channel tensors
/// contribute the root of their channel-summed energy per bin.
pub fn mean_magnitude_spectrum(items: &[Tensor]) -> Result<Tensor> {
    let first = items
        .first()
        .ok_or_else(|| Error::InvalidArgument("empty tensor set".into()))?;
    let r = first.rank();
    if r < 2 {
        return Err(Error::InvalidArgument(format!("need a grid, got {:?}", first.shape())));
    }
    let (h, w) = (first.shape()[r - 2], first.shape()[r - 1]);
    let mut acc = Tensor::zeros(&[h, w]);
    for t in items {
        if t.shape() != first.shape() {
            return Err(Error::InvalidArgument(format!(
                "non-uniform extents {:?} vs {:?}",
                t.shape(),
                first.shape()
            )));
        }
        let mut energy = vec![0.0; h * w];
        for s in dft2_tensor(t)? {
            for (e, c) in energy.iter_mut().zip(s.bins()) {
                *e += c.norm_sqr();
            }
        }
        for (a, e) in acc.data_mut().iter_mut().zip(energy) {
            *a += e.sqrt();
        }
    }
    Ok(acc.scale(1.0 / items.len() as f64))
}

#[cfg(test)]
mod tests;
