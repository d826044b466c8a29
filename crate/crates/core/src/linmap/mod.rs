//! End-to-end linear predictors.
//!
//! For linear models every layer is an explicit matrix (dense weights
//! transposed, convolutions as block-circulant Toeplitz matrices, locally
//! connected layers as banded matrices) and `beta_l` is their product in
//! forward order. Biases are affine offsets and are not part of `beta`.
//! Nonlinear models fall back to saliency maps, the input gradient of the top
//! predicted logit (or of the loss).

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::autodiff::kernels::{self, gemm};
use crate::autodiff::{io, OpKind, Padding};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::models::{Activation, Flow, LayerInfo, LayerKind, Model};
use crate::rng;
use crate::tensor::Tensor;

/// A dense `out x in` matrix acting on flattened (`C, H, W` row-major) inputs.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearMap {
    pub matrix: Tensor,
    /// Layers `first..=last` (0-based) composed into this map.
    pub first: usize,
    pub last: usize,
}

impl LinearMap {
    pub fn rows(&self) -> usize {
        self.matrix.shape()[0]
    }

    pub fn cols(&self) -> usize {
        self.matrix.shape()[1]
    }

    pub fn row(&self, r: usize) -> &[f64] {
        let n = self.cols();
        &self.matrix.data()[r * n..(r + 1) * n]
    }

    /// `matrix . x` for one flattened input.
    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.rows()];
        gemm(self.rows(), self.cols(), 1, self.matrix.data(), false, x, false, &mut out, false);
        out
    }

    /// Each row reshaped to the input image shape `[C, H, W]`.
    pub fn row_images(&self, shape: [usize; 3]) -> Result<Vec<Tensor>> {
        if shape.iter().product::<usize>() != self.cols() {
            return Err(Error::InvalidArgument(format!("{shape:?} does not match {} columns", self.cols())));
        }
        (0..self.rows())
            .map(|r| Tensor::new(shape.to_vec(), self.row(r).to_vec()))
            .collect()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let range = Tensor::from_vec(vec![self.first as f64, self.last as f64]);
        io::encode_tensors(&[("beta", &self.matrix), ("layers", &range)])
    }
}

fn flow_hw(f: Flow) -> Option<(usize, usize, usize)> {
    match f {
        Flow::Image { c, h, w } => Some((c, h, w)),
        _ => None,
    }
}

fn source(i: usize, d: isize, n: usize, padding: Padding) -> Option<usize> {
    let s = i as isize - d;
    match padding {
        Padding::Circular => Some(s.rem_euclid(n as isize) as usize),
        Padding::Zero => (0..n as isize).contains(&s).then_some(s as usize),
    }
}

/// Toeplitz (block-circulant for circular padding) matrix of a stride-1
/// convolution with kernel `[Cout, Cin, kh, kw]` on `Cin x h x w` inputs.
pub fn conv_matrix(kernel: &Tensor, h: usize, w: usize, padding: Padding) -> Result<Tensor> {
    let s = kernel.shape();
    if s.len() != 4 || s[2] > h || s[3] > w {
        return Err(Error::InvalidArgument(format!("kernel {s:?} for a {h}x{w} input")));
    }
    let (co_n, ci_n, kh, kw) = (s[0], s[1], s[2], s[3]);
    let (n_out, n_in) = (co_n * h * w, ci_n * h * w);
    let mut m = vec![0.0; n_out * n_in];
    for co in 0..co_n {
        for ci in 0..ci_n {
            for a in 0..kh {
                for b in 0..kw {
                    let v = kernel.data()[((co * ci_n + ci) * kh + a) * kw + b];
                    for i in 0..h {
                        let Some(si) = source(i, a as isize - (kh / 2) as isize, h, padding) else { continue };
                        for j in 0..w {
                            let Some(sj) = source(j, b as isize - (kw / 2) as isize, w, padding) else { continue };
                            m[((co * h + i) * w + j) * n_in + (ci * h + si) * w + sj] += v;
                        }
                    }
                }
            }
        }
    }
    Tensor::new(vec![n_out, n_in], m)
}

/// Banded matrix of a locally connected layer with weights `[h, w, Cout, Cin, k, k]`.
pub fn locally_connected_matrix(weights: &Tensor, padding: Padding) -> Result<Tensor> {
    let s = weights.shape();
    if s.len() != 6 {
        return Err(Error::InvalidArgument(format!("locally connected weights {s:?}")));
    }
    let (h, w, co_n, ci_n, kh, kw) = (s[0], s[1], s[2], s[3], s[4], s[5]);
    let (n_out, n_in) = (co_n * h * w, ci_n * h * w);
    let mut m = vec![0.0; n_out * n_in];
    for i in 0..h {
        for j in 0..w {
            for co in 0..co_n {
                for ci in 0..ci_n {
                    for a in 0..kh {
                        let Some(si) = source(i, a as isize - (kh / 2) as isize, h, padding) else { continue };
                        for b in 0..kw {
                            let Some(sj) = source(j, b as isize - (kw / 2) as isize, w, padding) else { continue };
                            let v = weights.data()[((((i * w + j) * co_n + co) * ci_n + ci) * kh + a) * kw + b];
                            m[((co * h + i) * w + j) * n_in + (ci * h + si) * w + sj] += v;
                        }
                    }
                }
            }
        }
    }
    Tensor::new(vec![n_out, n_in], m)
}

fn transpose(t: &Tensor) -> Tensor {
    let (r, c) = (t.shape()[0], t.shape()[1]);
    Tensor::from_fn(&[c, r], |idx| t.data()[(idx % r) * c + idx / r])
}

fn ensure_linear(layer: &LayerInfo, index: usize) -> Result<()> {
    let linear_kind = matches!(
        layer.kind,
        LayerKind::Dense { .. } | LayerKind::ConvFullWidth { .. } | LayerKind::ConvBounded { .. } | LayerKind::LocallyConnected { .. }
    );
    if !linear_kind || layer.activation != Activation::None {
        let kind = if linear_kind {
            format!("{} with {:?} activation", layer.kind.tag(), layer.activation)
        } else {
            layer.kind.tag().to_string()
        };
        return Err(Error::NonlinearLayer { layer: index, kind });
    }
    Ok(())
}

/// Matrix of layer `index` of `model` (its linear part).
pub fn layer_to_matrix(model: &Model, index: usize) -> Result<Tensor> {
    let layer = model
        .layers()
        .get(index)
        .ok_or_else(|| Error::InvalidArgument(format!("model has no layer {index}")))?;
    ensure_linear(layer, index)?;
    let w = model.params.get(layer.weight.expect("linear layers have weights"));
    match layer.kind {
        LayerKind::Dense { .. } => Ok(transpose(w)),
        LayerKind::LocallyConnected { .. } => locally_connected_matrix(w, model.spec.padding),
        _ => {
            let (_, h, wd) = flow_hw(layer.input).expect("convolutions take images");
            conv_matrix(w, h, wd, model.spec.padding)
        }
    }
}

/// `beta_l`: product of the matrices of layers `0..upto` (exclusive), in
/// forward order. `upto = L` gives the end-to-end predictor `[classes, D]`.
pub fn end_to_end_beta(model: &Model, upto: usize) -> Result<LinearMap> {
    if upto == 0 || upto > model.layers().len() {
        return Err(Error::InvalidArgument(format!(
            "upto must be in 1..={}, got {upto}",
            model.layers().len()
        )));
    }
    for (i, l) in model.layers()[..upto].iter().enumerate() {
        ensure_linear(l, i)?;
    }
    let mut acc = layer_to_matrix(model, 0)?;
    for l in 1..upto {
        let m = layer_to_matrix(model, l)?;
        let (r, k, c) = (m.shape()[0], m.shape()[1], acc.shape()[1]);
        let mut out = Tensor::zeros(&[r, c]);
        gemm(r, k, c, m.data(), false, acc.data(), false, out.data_mut(), false);
        acc = out;
    }
    Ok(LinearMap {
        matrix: acc,
        first: 0,
        last: upto - 1,
    })
}

/// Every partial product `beta_1 .. beta_L`.
pub fn partial_betas(model: &Model) -> Result<Vec<LinearMap>> {
    (1..=model.layers().len()).map(|l| end_to_end_beta(model, l)).collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum SaliencyTarget {
    /// Gradient of the largest logit.
    #[default]
    TopLogit,
    /// Gradient of the cross-entropy at the true label.
    Loss,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SaliencySet {
    /// `[N, C, H, W]`, one gradient per example.
    pub gradients: Tensor,
    pub target: SaliencyTarget,
}

const CHUNK: usize = 128;

/// Per-example input gradients.
pub fn saliency_beta(model: &Model, data: &Dataset, target: SaliencyTarget) -> Result<SaliencySet> {
    let n = data.len();
    let k = model.spec.classes;
    let mut out = Vec::with_capacity(data.images.numel());
    for start in (0..n).step_by(CHUNK) {
        let idx: Vec<usize> = (start..(start + CHUNK).min(n)).collect();
        let x = data.images.gather_outer(&idx);
        let g = match target {
            SaliencyTarget::TopLogit => {
                let z = model.logits(&x)?;
                let mut seed = Tensor::zeros(&[idx.len(), k]);
                for (b, row) in z.data().chunks(k).enumerate() {
                    seed.data_mut()[b * k + Tensor::argmax(row)] = 1.0;
                }
                model.logit_vjp(&x, seed)?
            }
            SaliencyTarget::Loss => {
                // The loss is a batch mean; undo the 1/B so each example's
                // gradient is its own.
                let (_, g, _) = model.input_grad(&x, &data.labels_tensor(&idx))?;
                g.scale(idx.len() as f64)
            }
        };
        out.extend_from_slice(g.data());
    }
    Ok(SaliencySet {
        gradients: Tensor::new(data.images.shape().to_vec(), out)?,
        target,
    })
}

fn layer_forward(model: &Model, index: usize, x: &Tensor) -> Result<Tensor> {
    let layer = &model.layers()[index];
    let w = model.params.get(layer.weight.expect("linear layers have weights"));
    let padding = model.spec.padding;
    match layer.kind {
        LayerKind::Dense { .. } => kernels::forward(&OpKind::MatMul, &[x, w]),
        LayerKind::LocallyConnected { .. } => kernels::forward(&OpKind::LocallyConnected { padding }, &[x, w]),
        _ => kernels::forward(&OpKind::Conv { padding }, &[x, w]),
    }
}

/// Largest `|matrix . x - forward(x)|` over `probes` random inputs.
pub fn verify_equivalence(model: &Model, index: usize, probes: usize, seed: u64) -> Result<f64> {
    let m = layer_to_matrix(model, index)?;
    let layer = &model.layers()[index];
    let d_in = layer.input.numel();
    let mut r = rng::rng(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..probes {
        let v: Vec<f64> = (0..d_in).map(|_| r.random_range(-1.0..1.0)).collect();
        let x = match (layer.kind.clone(), layer.input) {
            (LayerKind::Dense { .. }, _) => Tensor::new(vec![1, d_in], v.clone())?,
            (_, Flow::Image { c, h, w }) => Tensor::new(vec![1, c, h, w], v.clone())?,
            (_, other) => return Err(Error::InvalidArgument(format!("unexpected layer input {other:?}"))),
        };
        let y = layer_forward(model, index, &x)?;
        let map = LinearMap {
            matrix: m.clone(),
            first: index,
            last: index,
        };
        for (a, b) in map.apply(&v).iter().zip(y.data()) {
            worst = worst.max((a - b).abs());
        }
    }
    Ok(worst)
}

/// Checks `beta_l` against composed forward passes on every standard basis
/// vector; returns the largest absolute discrepancy.
pub fn verify_on_basis(model: &Model, upto: usize) -> Result<f64> {
    let beta = end_to_end_beta(model, upto)?;
    let [c, h, w] = model.spec.input;
    let d = c * h * w;
    let x = Tensor::from_fn(&[d, c, h, w], |i| if i / d == i % d { 1.0 } else { 0.0 });
    let mut worst: f64 = 0.0;
    let mut cur = x;
    for l in 0..upto {
        cur = layer_forward(model, l, &flatten_for(&model.layers()[l], cur)?)?;
    }
    // cur[e, :] is the image of basis vector e, i.e. column e of beta.
    let rows = beta.rows();
    for e in 0..d {
        for r in 0..rows {
            worst = worst.max((cur.data()[e * rows + r] - beta.matrix.data()[r * d + e]).abs());
        }
    }
    Ok(worst)
}

fn flatten_for(layer: &LayerInfo, x: Tensor) -> Result<Tensor> {
    match layer.kind {
        LayerKind::Dense { .. } => {
            let n = x.shape()[0];
            let rest = x.numel() / n;
            x.reshape(&[n, rest])
        }
        _ => Ok(x),
    }
}

#[cfg(test)]
mod tests;
