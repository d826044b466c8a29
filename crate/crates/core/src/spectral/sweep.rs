//! Energy concentration of learned filters and partial products across a
//! kernel-size sweep.

use serde::{Deserialize, Serialize};

use super::{dft2_tensor, LowRegion};
use crate::error::{Error, Result};
use crate::linmap::{end_to_end_beta, layer_to_matrix, LinearMap};
use crate::models::{LayerKind, Model};

/// `kappa_high` of a `[.., H, W]` tensor with the energy of all leading
/// slices (channels) pooled per frequency bin.
pub fn kappa_high_pooled(t: &crate::tensor::Tensor, k: f64, region: LowRegion) -> Result<f64> {
    let spectra = dft2_tensor(t)?;
    let first = &spectra[0];
    let n = first.height().min(first.width());
    if !(k >= 0.0 && k < n as f64) {
        return Err(Error::InvalidArgument(format!("k={k} must lie in [0, {n})")));
    }
    let (mut low, mut total) = (0.0, 0.0);
    for s in &spectra {
        for i in 0..s.height() {
            for j in 0..s.width() {
                let e = s.bins()[i * s.width() + j].norm_sqr();
                total += e;
                let (u, v) = s.frequency(i, j);
                if region.contains(u, v, k) {
                    low += e;
                }
            }
        }
    }
    Ok(if total <= 0.0 { 0.0 } else { (1.0 - low / total).clamp(0.0, 1.0) })
}

/// Mean `kappa_high` over the rows of a map, each row viewed as an image.
pub fn map_kappa(map: &LinearMap, shape: [usize; 3], k: f64, region: LowRegion) -> Result<f64> {
    let rows = map.row_images(shape)?;
    let mut acc = 0.0;
    for r in &rows {
        acc += kappa_high_pooled(r, k, region)?;
    }
    Ok(acc / rows.len().max(1) as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConcentrationReport {
    pub model: String,
    /// Receptive field width of the hidden layers; `None` for dense stacks.
    pub kernel: Option<usize>,
    /// Number of hidden layers.
    pub depth: usize,
    /// 1-based layer index; the last one is the head.
    pub layer: usize,
    /// `kappa_high` of `beta_l`, the product of layers `1..=l`.
    pub kappa_beta: f64,
    /// `kappa_high` of layer `l` alone.
    pub kappa_w: f64,
}

fn kernel_width(model: &Model) -> Option<usize> {
    model.spec.layers.iter().find_map(|l| match l.kind {
        LayerKind::ConvBounded { k, .. } | LayerKind::LocallyConnected { k, .. } => Some(k),
        LayerKind::ConvFullWidth { .. } => Some(model.spec.input[2]),
        _ => None,
    })
}

/// `kappa_high` of every `w_l` and `beta_l` of each linear model. Rows of
/// a hidden layer matrix are its filters placed at each output position;
/// rows of the head and of `beta_L` are per-class templates.
pub fn uncertainty_sweep(models: &[&Model], k: f64, region: LowRegion) -> Result<Vec<ConcentrationReport>> {
    let mut out = Vec::new();
    for m in models {
        let shape = m.spec.input;
        let depth = m.layers().len();
        for l in 1..=depth {
            let beta = end_to_end_beta(m, l)?;
            let w = layer_to_matrix(m, l - 1)?;
            // The head acts on the last hidden representation, which keeps
            // the input shape for every family in the sweep.
            if w.shape()[1] != shape.iter().product::<usize>() {
                return Err(Error::InvalidArgument(format!(
                    "{}: layer {l} does not act on {shape:?} inputs",
                    m.spec.name
                )));
            }
            let w = LinearMap {
                matrix: w,
                first: l - 1,
                last: l - 1,
            };
            out.push(ConcentrationReport {
                model: m.spec.name.clone(),
                kernel: kernel_width(m),
                depth: depth - 1,
                layer: l,
                kappa_beta: map_kappa(&beta, shape, k, region)?,
                kappa_w: map_kappa(&w, shape, k, region)?,
            });
        }
    }
    Ok(out)
}
