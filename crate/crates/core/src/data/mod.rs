//! Datasets: CIFAR-style binary batches, synthetic textures with a
//! controllable spectral envelope, and class-specific Fourier shortcuts.

mod cifar;
mod stego;
mod synth;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub use cifar::{encode_batch, load_batch, load_cifar10, CifarLayout};
pub use stego::{hermitian_symmetrize, inject_shortcut, shortcut_pattern, InjectionReport, SteganoMode, SteganoSpec};
pub use synth::{synth_dataset, SynthConfig, TextureSpec};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub source: String,
    /// Hash of the shortcut injection applied, if any.
    pub injection: Option<String>,
}

/// Images `[N, C, H, W]` with pixels in `[0, 1]` and labels `< classes`.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub images: Tensor,
    pub labels: Vec<usize>,
    pub classes: usize,
    pub split: Split,
    pub provenance: Provenance,
}

impl Dataset {
    pub fn new(images: Tensor, labels: Vec<usize>, classes: usize, split: Split, source: &str) -> Result<Self> {
        if images.rank() != 4 || images.shape()[0] != labels.len() {
            return Err(Error::InvalidArgument(format!(
                "images {:?} vs {} labels",
                images.shape(),
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::InvalidArgument(format!("label {bad} >= {classes} classes")));
        }
        Ok(Self {
            images,
            labels,
            classes,
            split,
            provenance: Provenance {
                source: source.to_string(),
                injection: None,
            },
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// `[C, H, W]`
    pub fn image_shape(&self) -> [usize; 3] {
        let s = self.images.shape();
        [s[1], s[2], s[3]]
    }

    pub fn image(&self, i: usize) -> Tensor {
        self.images.slice_outer(i)
    }

    pub fn labels_tensor(&self, idx: &[usize]) -> Tensor {
        Tensor::from_vec(idx.iter().map(|&i| self.labels[i] as f64).collect())
    }

    pub fn subset(&self, idx: &[usize]) -> Dataset {
        Dataset {
            images: self.images.gather_outer(idx),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
            classes: self.classes,
            split: self.split,
            provenance: self.provenance.clone(),
        }
    }

    /// First `n` examples (or all of them).
    pub fn head(&self, n: usize) -> Dataset {
        let idx: Vec<usize> = (0..n.min(self.len())).collect();
        self.subset(&idx)
    }

    /// SHA-256 over the class count, labels and the exact pixel bits.
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        h.update((self.classes as u64).to_le_bytes());
        for &d in self.images.shape() {
            h.update((d as u64).to_le_bytes());
        }
        for &l in &self.labels {
            h.update((l as u64).to_le_bytes());
        }
        for v in self.images.data() {
            h.update(v.to_bits().to_le_bytes());
        }
        hex(&h.finalize())
    }

    /// Luminance `0.299 r + 0.587 g + 0.114 b`, written so that gray input
    /// pixels pass through exactly.
    pub fn to_grayscale(&self) -> Result<Dataset> {
        let [c, h, w] = self.image_shape();
        if c == 1 {
            return Ok(self.clone());
        }
        if c != 3 {
            return Err(Error::InvalidArgument(format!("grayscale needs 3 channels, got {c}")));
        }
        let n = self.len();
        let plane = h * w;
        let src = self.images.data();
        let mut out = vec![0.0; n * plane];
        for i in 0..n {
            let base = i * 3 * plane;
            for p in 0..plane {
                let (r, g, b) = (src[base + p], src[base + plane + p], src[base + 2 * plane + p]);
                out[i * plane + p] = r + 0.587 * (g - r) + 0.114 * (b - r);
            }
        }
        let mut d = self.clone();
        d.images = Tensor::new(vec![n, 1, h, w], out)?;
        Ok(d)
    }

    /// 2x2 average pooling.
    pub fn downsample_by_2(&self) -> Result<Dataset> {
        let [c, h, w] = self.image_shape();
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::InvalidArgument(format!("cannot halve {h}x{w}")));
        }
        let (h2, w2) = (h / 2, w / 2);
        let n = self.len();
        let src = self.images.data();
        let mut out = vec![0.0; n * c * h2 * w2];
        for p in 0..n * c {
            for i in 0..h2 {
                for j in 0..w2 {
                    let at = |a: usize, b: usize| src[p * h * w + (2 * i + a) * w + 2 * j + b];
                    out[p * h2 * w2 + i * w2 + j] = 0.25 * (at(0, 0) + at(0, 1) + at(1, 0) + at(1, 1));
                }
            }
        }
        let mut d = self.clone();
        d.images = Tensor::new(vec![n, c, h2, w2], out)?;
        Ok(d)
    }
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

#[cfg(test)]
mod tests;
