use num_complex::Complex64;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{hermitian_symmetrize, Dataset, Split};
use crate::error::{Error, Result};
use crate::rng::{self, Rng};
use crate::spectral::fft;
use crate::tensor::Tensor;

/// A random field with bin amplitudes following `r^-alpha` (radius `r` in
/// frequency bins, the zero bin weighted 1), optionally restricted to the
/// band `lo * r_max <= r < hi * r_max`, then scaled to an RMS of `amplitude`.
/// `alpha = inf` keeps only the zero frequency: a constant field whose value
/// is `amplitude` times a standard normal draw.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TextureSpec {
    pub alpha: f64,
    #[serde(default)]
    pub band: Option<(f64, f64)>,
    pub amplitude: f64,
}

impl TextureSpec {
    pub fn envelope(&self, r: f64, r_max: f64) -> f64 {
        if let Some((lo, hi)) = self.band {
            if r < lo * r_max || r >= hi * r_max {
                return 0.0;
            }
        }
        if self.alpha.is_infinite() {
            return if r == 0.0 { 1.0 } else { 0.0 };
        }
        if r == 0.0 {
            1.0
        } else {
            r.powf(-self.alpha)
        }
    }

    /// Draws one `h x w` field.
    pub fn sample(&self, h: usize, w: usize, r: &mut Rng) -> Vec<f64> {
        if self.amplitude == 0.0 {
            return vec![0.0; h * w];
        }
        if self.alpha.is_infinite() && self.band.is_none_or(|(lo, _)| lo == 0.0) {
            let z: f64 = StandardNormal.sample(r);
            return vec![self.amplitude * z; h * w];
        }
        let r_max = (h.min(w) / 2) as f64;
        let mut g = vec![Complex64::new(0.0, 0.0); h * w];
        for i in 0..h {
            for j in 0..w {
                let (u, v) = (i as f64 - (h / 2) as f64, j as f64 - (w / 2) as f64);
                let re: f64 = StandardNormal.sample(r);
                let im: f64 = StandardNormal.sample(r);
                g[i * w + j] = Complex64::new(re, im) * self.envelope((u * u + v * v).sqrt(), r_max);
            }
        }
        let mut buf = fft::ifftshift(&hermitian_symmetrize(&g, h, w), h, w);
        fft::fft2_inplace(&mut buf, h, w, true);
        let field: Vec<f64> = buf.iter().map(|z| z.re).collect();
        let rms = (field.iter().map(|v| v * v).sum::<f64>() / field.len() as f64).sqrt();
        if rms == 0.0 {
            return field;
        }
        field.iter().map(|v| v * self.amplitude / rms).collect()
    }
}

/// Desk-scale synthetic classification data. Image `i` of class `c` is
/// `mean + template_c + noise_i`, clamped to `[0, 1]`, where each class
/// template is drawn once from `textures[c]` (per channel) and the noise is
/// fresh per image.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub size: usize,
    #[serde(default = "one")]
    pub channels: usize,
    pub classes: usize,
    pub train_per_class: usize,
    pub test_per_class: usize,
    /// One per class; a single entry is reused for every class.
    pub textures: Vec<TextureSpec>,
    pub noise: TextureSpec,
    #[serde(default = "half")]
    pub mean: f64,
}

fn one() -> usize {
    1
}

fn half() -> f64 {
    0.5
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.size == 0 || self.size % 2 != 0 {
            return Err(Error::Config(format!("size must be even and positive, got {}", self.size)));
        }
        if self.classes < 2 || self.channels == 0 {
            return Err(Error::Config("need at least 2 classes and 1 channel".into()));
        }
        if self.textures.len() != 1 && self.textures.len() != self.classes {
            return Err(Error::Config(format!(
                "{} textures for {} classes",
                self.textures.len(),
                self.classes
            )));
        }
        Ok(())
    }

    fn texture(&self, class: usize) -> &TextureSpec {
        &self.textures[class.min(self.textures.len() - 1)]
    }
}

/// Class-balanced `(train, test)` splits. Labels cycle through the classes so
/// any prefix stays balanced.
pub fn synth_dataset(cfg: &SynthConfig, seed: u64) -> Result<(Dataset, Dataset)> {
    cfg.validate()?;
    let (n, c) = (cfg.size, cfg.channels);
    let plane = n * n;
    let templates: Vec<Vec<f64>> = (0..cfg.classes)
        .map(|k| {
            let mut r = rng::rng(rng::derive(rng::derive_str(seed, "template"), k as u64));
            (0..c).flat_map(|_| cfg.texture(k).sample(n, n, &mut r)).collect()
        })
        .collect();
    let make = |split: Split, per_class: usize| -> Result<Dataset> {
        let mut r = rng::rng(rng::derive_str(seed, if split == Split::Train { "noise/train" } else { "noise/test" }));
        let total = per_class * cfg.classes;
        let mut data = Vec::with_capacity(total * c * plane);
        let mut labels = Vec::with_capacity(total);
        for i in 0..total {
            let k = i % cfg.classes;
            labels.push(k);
            for ch in 0..c {
                let noise = cfg.noise.sample(n, n, &mut r);
                let t = &templates[k][ch * plane..(ch + 1) * plane];
                data.extend(t.iter().zip(&noise).map(|(a, b)| (cfg.mean + a + b).clamp(0.0, 1.0)));
            }
        }
        let images = Tensor::new(vec![total, c, n, n], data)?;
        Dataset::new(images, labels, cfg.classes, split, "synthetic")
    };
    Ok((make(Split::Train, cfg.train_per_class)?, make(Split::Test, cfg.test_per_class)?))
}
