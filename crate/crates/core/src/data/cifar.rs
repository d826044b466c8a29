use std::path::Path;

use super::{Dataset, Split};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Record layout of a CIFAR-style binary batch: `label_bytes` label bytes
/// (the last one is the class) followed by `channels * height * width`
/// pixel bytes, channel-major then row-major.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CifarLayout {
    pub label_bytes: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub classes: usize,
}

impl CifarLayout {
    pub const CIFAR10: CifarLayout = CifarLayout {
        label_bytes: 1,
        channels: 3,
        height: 32,
        width: 32,
        classes: 10,
    };

    pub fn record_len(&self) -> usize {
        self.label_bytes + self.channels * self.height * self.width
    }
}

/// Parses one batch. Pixels are scaled by `1/255`.
pub fn load_batch(bytes: &[u8], layout: CifarLayout, split: Split, source: &str) -> Result<Dataset> {
    let rec = layout.record_len();
    if bytes.len() % rec != 0 {
        return Err(Error::Malformed {
            offset: bytes.len() - bytes.len() % rec,
            detail: format!("trailing partial record ({} of {rec} bytes)", bytes.len() % rec),
        });
    }
    let n = bytes.len() / rec;
    let px = rec - layout.label_bytes;
    let mut labels = Vec::with_capacity(n);
    let mut data = Vec::with_capacity(n * px);
    for (i, r) in bytes.chunks(rec).enumerate() {
        let label = r[layout.label_bytes - 1] as usize;
        if label >= layout.classes {
            return Err(Error::Malformed {
                offset: i * rec + layout.label_bytes - 1,
                detail: format!("label {label} >= {} classes", layout.classes),
            });
        }
        labels.push(label);
        data.extend(r[layout.label_bytes..].iter().map(|&b| b as f64 / 255.0));
    }
    let images = Tensor::new(vec![n, layout.channels, layout.height, layout.width], data)?;
    Dataset::new(images, labels, layout.classes, split, source)
}

/// Loads CIFAR-10 from a single batch file, or from a directory holding the
/// standard `data_batch_{1..5}.bin` / `test_batch.bin` files (in that order).
pub fn load_cifar10(path: &Path, split: Split) -> Result<Dataset> {
    let files: Vec<std::path::PathBuf> = if path.is_dir() {
        match split {
            Split::Train => (1..=5).map(|i| path.join(format!("data_batch_{i}.bin"))).collect(),
            Split::Test => vec![path.join("test_batch.bin")],
        }
    } else {
        vec![path.to_path_buf()]
    };
    let mut bytes = Vec::new();
    for f in &files {
        bytes.extend(std::fs::read(f)?);
    }
    load_batch(&bytes, CifarLayout::CIFAR10, split, &path.display().to_string())
}

/// Re-encodes a dataset into the binary batch format (pixels rounded to the
/// nearest byte). Extra label bytes are written as zero.
pub fn encode_batch(d: &Dataset, layout: CifarLayout) -> Result<Vec<u8>> {
    let [c, h, w] = d.image_shape();
    if [c, h, w] != [layout.channels, layout.height, layout.width] {
        return Err(Error::InvalidArgument(format!(
            "dataset images {c}x{h}x{w} do not match layout {}x{}x{}",
            layout.channels, layout.height, layout.width
        )));
    }
    let px = c * h * w;
    let mut out = Vec::with_capacity(d.len() * layout.record_len());
    for (i, &label) in d.labels.iter().enumerate() {
        out.extend(std::iter::repeat_n(0u8, layout.label_bytes - 1));
        out.push(label as u8);
        let img = &d.images.data()[i * px..(i + 1) * px];
        out.extend(img.iter().map(|&v| (v * 255.0).round().clamp(0.0, 255.0) as u8));
    }
    Ok(out)
}
