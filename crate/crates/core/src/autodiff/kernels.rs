//! Forward and adjoint rules for every op the model zoo uses.

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Padding {
    /// Wrap-around indexing; the layer is exactly (block-)circulant.
    #[default]
    Circular,
    Zero,
}

#[derive(Clone, Debug, PartialEq)]
pub enum OpKind {
    /// `[.., k] x [k, n] -> [.., n]`
    MatMul,
    /// `[.., S] + [S]`, broadcast over leading axes.
    AddBias,
    /// Elementwise sum of equally shaped tensors.
    Add,
    /// `x [B, Cin, H, W]`, `w [Cout, Cin, kh, kw]` -> `[B, Cout, H, W]`, stride 1.
    Conv { padding: Padding },
    /// `x [B, Cin, H, W]`, `w [H, W, Cout, Cin, kh, kw]` -> `[B, Cout, H, W]`, stride 1.
    LocallyConnected { padding: Padding },
    /// `[B, C, H, W] -> [B, T, C*p*p]`, non-overlapping patches in raster order.
    Patchify { patch: usize },
    /// `x [B, T, n]`, `w [T, n, m]` -> `[B, T, m]`, one weight matrix per token.
    TokenMatMul,
    Relu,
    Gelu,
    /// Normalizes the last axis; args `x, gamma, beta`.
    LayerNorm { eps: f64 },
    Softmax,
    /// `[B, T, d] -> [B, d]`
    MeanPool,
    /// Keeps the leading (batch) axis and reshapes the rest.
    Reshape { tail: Vec<usize> },
    /// Multi-head scaled dot-product attention over `q, k, v [B, T, d]`.
    Attention { heads: usize },
    /// Sum of all entries, as a scalar.
    SumAll,
    /// Mean softmax cross-entropy; args `logits [B, K]`, `labels [B]` (class indices).
    CrossEntropy,
}

impl OpKind {
    pub fn name(&self) -> &'static str {
        match self {
            OpKind::MatMul => "matmul",
            OpKind::AddBias => "add_bias",
            OpKind::Add => "add",
            OpKind::Conv { .. } => "conv",
            OpKind::LocallyConnected { .. } => "locally_connected",
            OpKind::Patchify { .. } => "patchify",
            OpKind::TokenMatMul => "token_matmul",
            OpKind::Relu => "relu",
            OpKind::Gelu => "gelu",
            OpKind::LayerNorm { .. } => "layer_norm",
            OpKind::Softmax => "softmax",
            OpKind::MeanPool => "mean_pool",
            OpKind::Reshape { .. } => "reshape",
            OpKind::Attention { .. } => "attention",
            OpKind::CrossEntropy => "cross_entropy",
            OpKind::SumAll => "sum_all",
        }
    }

    pub fn arity(&self) -> usize {
        match self {
            OpKind::Relu
            | OpKind::Gelu
            | OpKind::Softmax
            | OpKind::MeanPool
            | OpKind::Reshape { .. }
            | OpKind::SumAll
            | OpKind::Patchify { .. } => 1,
            OpKind::LayerNorm { .. } | OpKind::Attention { .. } => 3,
            _ => 2,
        }
    }

    /// True when the op is linear in its first argument for fixed remaining arguments.
    pub fn is_linear(&self) -> bool {
        matches!(
            self,
            OpKind::MatMul
                | OpKind::Conv { .. }
                | OpKind::LocallyConnected { .. }
                | OpKind::Patchify { .. }
                | OpKind::TokenMatMul
                | OpKind::MeanPool
                | OpKind::Reshape { .. }
                | OpKind::SumAll
        )
    }
}

/// Dense `c (+)= op(a) * op(b)` with `a: m x k`, `b: k x n` after optional transposes.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_trans: bool,
    b: &[f64],
    b_trans: bool,
    c: &mut [f64],
    accumulate: bool,
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        if !accumulate {
            c[..m * n].iter_mut().for_each(|v| *v = 0.0);
        }
        return;
    }
    let (rsa, csa) = if a_trans { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_trans { (1, k as isize) } else { (n as isize, 1) };
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: the asserts above bound every index the strides can reach.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn check(cond: bool, op: &OpKind, detail: impl FnOnce() -> String) -> Result<()> {
    if cond {
        Ok(())
    } else {
        Err(shape_err(op.name(), detail()))
    }
}

/// `out[j] += alpha * src[j - shift]` along one row.
#[inline]
fn shifted_axpy(out: &mut [f64], src: &[f64], shift: isize, alpha: f64, padding: Padding) {
    let w = out.len() as isize;
    match padding {
        Padding::Circular => {
            let s = shift.rem_euclid(w) as usize;
            let w = w as usize;
            // j in [s, w): src[j - s]; j in [0, s): src[j + w - s]
            for (o, x) in out[s..].iter_mut().zip(&src[..w - s]) {
                *o += alpha * x;
            }
            for (o, x) in out[..s].iter_mut().zip(&src[w - s..]) {
                *o += alpha * x;
            }
        }
        Padding::Zero => {
            if shift >= 0 {
                let s = (shift.min(w)) as usize;
                for (o, x) in out[s..].iter_mut().zip(src.iter()) {
                    *o += alpha * x;
                }
            } else {
                let s = ((-shift).min(w)) as usize;
                for (o, x) in out.iter_mut().zip(&src[s..]) {
                    *o += alpha * x;
                }
            }
        }
    }
}

/// `sum_j g[j] * src[j - shift]`.
#[inline]
fn shifted_dot(g: &[f64], src: &[f64], shift: isize, padding: Padding) -> f64 {
    let w = g.len() as isize;
    match padding {
        Padding::Circular => {
            let s = shift.rem_euclid(w) as usize;
            let w = w as usize;
            let a: f64 = g[s..].iter().zip(&src[..w - s]).map(|(a, b)| a * b).sum();
            let b: f64 = g[..s].iter().zip(&src[w - s..]).map(|(a, b)| a * b).sum();
            a + b
        }
        Padding::Zero => {
            if shift >= 0 {
                let s = (shift.min(w)) as usize;
                g[s..].iter().zip(src.iter()).map(|(a, b)| a * b).sum()
            } else {
                let s = ((-shift).min(w)) as usize;
                g.iter().zip(&src[s..]).map(|(a, b)| a * b).sum()
            }
        }
    }
}

/// Source row for output row `i` and tap offset `d`, or `None` when it falls in zero padding.
#[inline]
fn source_index(i: usize, d: isize, h: usize, padding: Padding) -> Option<usize> {
    let s = i as isize - d;
    match padding {
        Padding::Circular => Some(s.rem_euclid(h as isize) as usize),
        Padding::Zero => (s >= 0 && s < h as isize).then_some(s as usize),
    }
}

fn gelu(x: f64) -> (f64, f64) {
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    let u = C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    let y = 0.5 * x * (1.0 + t);
    let du = C * (1.0 + 3.0 * 0.044715 * x * x);
    let dy = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du;
    (y, dy)
}

fn softmax_rows(data: &[f64], d: usize) -> Vec<f64> {
    let mut out = vec![0.0; data.len()];
    for (row, o) in data.chunks(d).zip(out.chunks_mut(d)) {
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut s = 0.0;
        for (oi, &x) in o.iter_mut().zip(row) {
            *oi = (x - m).exp();
            s += *oi;
        }
        o.iter_mut().for_each(|v| *v /= s);
    }
    out
}

pub fn forward(op: &OpKind, args: &[&Tensor]) -> Result<Tensor> {
    check(args.len() == op.arity(), op, || {
        format!("expected {} inputs, got {}", op.arity(), args.len())
    })?;
    match op {
        OpKind::MatMul => {
            let (x, w) = (args[0], args[1]);
            check(w.rank() == 2 && x.rank() >= 1, op, || {
                format!("lhs {:?}, rhs {:?}", x.shape(), w.shape())
            })?;
            let (k, n) = (w.shape()[0], w.shape()[1]);
            check(*x.shape().last().unwrap() == k, op, || {
                format!("inner extents differ: lhs {:?}, rhs {:?}", x.shape(), w.shape())
            })?;
            let m = x.numel() / k;
            let mut shape = x.shape().to_vec();
            *shape.last_mut().unwrap() = n;
            let mut out = Tensor::zeros(&shape);
            gemm(m, k, n, x.data(), false, w.data(), false, out.data_mut(), false);
            Ok(out)
        }
        OpKind::AddBias => {
            let (x, b) = (args[0], args[1]);
            let s = b.numel();
            check(
                x.rank() >= b.rank() && x.shape().ends_with(b.shape()),
                op,
                || format!("bias {:?} does not trail {:?}", b.shape(), x.shape()),
            )?;
            let mut out = x.clone();
            for row in out.data_mut().chunks_mut(s) {
                for (o, v) in row.iter_mut().zip(b.data()) {
                    *o += v;
                }
            }
            Ok(out)
        }
        OpKind::Add => {
            let (a, b) = (args[0], args[1]);
            check(a.shape() == b.shape(), op, || {
                format!("{:?} vs {:?}", a.shape(), b.shape())
            })?;
            let mut out = a.clone();
            out.add_assign(b);
            Ok(out)
        }
        OpKind::Conv { padding } => conv_forward(op, args[0], args[1], *padding),
        OpKind::LocallyConnected { padding } => lc_forward(op, args[0], args[1], *padding),
        OpKind::Patchify { patch } => patchify(op, args[0], *patch, false),
        OpKind::TokenMatMul => {
            let (x, w) = (args[0], args[1]);
            check(x.rank() == 3 && w.rank() == 3, op, || {
                format!("x {:?}, w {:?}", x.shape(), w.shape())
            })?;
            let (b, t, n) = (x.shape()[0], x.shape()[1], x.shape()[2]);
            check(w.shape()[0] == t && w.shape()[1] == n, op, || {
                format!("x {:?}, w {:?}", x.shape(), w.shape())
            })?;
            let m = w.shape()[2];
            let mut out = Tensor::zeros(&[b, t, m]);
            for bi in 0..b {
                for ti in 0..t {
                    let xr = &x.data()[(bi * t + ti) * n..(bi * t + ti + 1) * n];
                    let wt = &w.data()[ti * n * m..(ti + 1) * n * m];
                    let o = &mut out.data_mut()[(bi * t + ti) * m..(bi * t + ti + 1) * m];
                    gemm(1, n, m, xr, false, wt, false, o, false);
                }
            }
            Ok(out)
        }
        OpKind::Relu => Ok(args[0].map(|v| v.max(0.0))),
        OpKind::Gelu => Ok(args[0].map(|v| gelu(v).0)),
        OpKind::LayerNorm { eps } => {
            let (x, g, b) = (args[0], args[1], args[2]);
            let d = *x.shape().last().unwrap_or(&0);
            check(g.numel() == d && b.numel() == d && d > 0, op, || {
                format!("x {:?}, gamma {:?}, beta {:?}", x.shape(), g.shape(), b.shape())
            })?;
            let mut out = Tensor::zeros(x.shape());
            for (row, o) in x.data().chunks(d).zip(out.data_mut().chunks_mut(d)) {
                let mean = row.iter().sum::<f64>() / d as f64;
                let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d as f64;
                let inv = 1.0 / (var + eps).sqrt();
                for j in 0..d {
                    o[j] = (row[j] - mean) * inv * g.data()[j] + b.data()[j];
                }
            }
            Ok(out)
        }
        OpKind::Softmax => {
            let x = args[0];
            let d = *x.shape().last().unwrap_or(&1);
            Tensor::new(x.shape().to_vec(), softmax_rows(x.data(), d))
        }
        OpKind::MeanPool => {
            let x = args[0];
            check(x.rank() == 3, op, || format!("expected [B, T, d], got {:?}", x.shape()))?;
            let (b, t, d) = (x.shape()[0], x.shape()[1], x.shape()[2]);
            let mut out = Tensor::zeros(&[b, d]);
            for bi in 0..b {
                let o = &mut out.data_mut()[bi * d..(bi + 1) * d];
                for ti in 0..t {
                    let r = &x.data()[(bi * t + ti) * d..(bi * t + ti + 1) * d];
                    for (oi, v) in o.iter_mut().zip(r) {
                        *oi += v / t as f64;
                    }
                }
            }
            Ok(out)
        }
        OpKind::Reshape { tail } => {
            let x = args[0];
            let b = *x.shape().first().unwrap_or(&1);
            let mut shape = vec![b];
            shape.extend_from_slice(tail);
            x.clone().reshape(&shape)
        }
        OpKind::Attention { heads } => attention_forward(op, args, *heads).map(|(o, _)| o),
        OpKind::SumAll => Ok(Tensor::scalar(args[0].sum())),
        OpKind::CrossEntropy => {
            let (z, y) = (args[0], args[1]);
            check(z.rank() == 2 && y.numel() == z.shape()[0], op, || {
                format!("logits {:?}, labels {:?}", z.shape(), y.shape())
            })?;
            let (b, k) = (z.shape()[0], z.shape()[1]);
            let mut total = 0.0;
            for (row, &label) in z.data().chunks(k).zip(y.data()) {
                let c = label as usize;
                check(c < k && label >= 0.0, op, || format!("label {label} out of range"))?;
                let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
                total += lse - row[c];
            }
            Ok(Tensor::scalar(total / b as f64))
        }
    }
}

/// Gradients for each argument (`None` where an argument is not differentiable).
pub fn backward(
    op: &OpKind,
    args: &[&Tensor],
    out: &Tensor,
    gout: &Tensor,
) -> Result<Vec<Option<Tensor>>> {
    match op {
        OpKind::MatMul => {
            let (x, w) = (args[0], args[1]);
            let (k, n) = (w.shape()[0], w.shape()[1]);
            let m = x.numel() / k;
            let mut gx = Tensor::zeros(x.shape());
            gemm(m, n, k, gout.data(), false, w.data(), true, gx.data_mut(), false);
            let mut gw = Tensor::zeros(w.shape());
            gemm(k, m, n, x.data(), true, gout.data(), false, gw.data_mut(), false);
            Ok(vec![Some(gx), Some(gw)])
        }
        OpKind::AddBias => {
            let b = args[1];
            let s = b.numel();
            let mut gb = Tensor::zeros(b.shape());
            for row in gout.data().chunks(s) {
                for (g, v) in gb.data_mut().iter_mut().zip(row) {
                    *g += v;
                }
            }
            Ok(vec![Some(gout.clone()), Some(gb)])
        }
        OpKind::Add => Ok(vec![Some(gout.clone()), Some(gout.clone())]),
        OpKind::Conv { padding } => {
            let (gx, gw) = conv_backward(args[0], args[1], gout, *padding);
            Ok(vec![Some(gx), Some(gw)])
        }
        OpKind::LocallyConnected { padding } => {
            let (gx, gw) = lc_backward(args[0], args[1], gout, *padding);
            Ok(vec![Some(gx), Some(gw)])
        }
        OpKind::Patchify { patch } => {
            let gx = patchify(op, gout, *patch, true)?.reshape(args[0].shape())?;
            Ok(vec![Some(gx)])
        }
        OpKind::TokenMatMul => {
            let (x, w) = (args[0], args[1]);
            let (b, t, n) = (x.shape()[0], x.shape()[1], x.shape()[2]);
            let m = w.shape()[2];
            let mut gx = Tensor::zeros(x.shape());
            let mut gw = Tensor::zeros(w.shape());
            for ti in 0..t {
                let wt = &w.data()[ti * n * m..(ti + 1) * n * m];
                for bi in 0..b {
                    let row = bi * t + ti;
                    let g = &gout.data()[row * m..(row + 1) * m];
                    let xr = &x.data()[row * n..(row + 1) * n];
                    gemm(1, m, n, g, false, wt, true, &mut gx.data_mut()[row * n..(row + 1) * n], false);
                    gemm(n, 1, m, xr, false, g, false, &mut gw.data_mut()[ti * n * m..(ti + 1) * n * m], true);
                }
            }
            Ok(vec![Some(gx), Some(gw)])
        }
        OpKind::Relu => {
            let x = args[0];
            Ok(vec![Some(x.zip_map(gout, |v, g| if v > 0.0 { g } else { 0.0 })?)])
        }
        OpKind::Gelu => {
            let x = args[0];
            Ok(vec![Some(x.zip_map(gout, |v, g| g * gelu(v).1)?)])
        }
        OpKind::LayerNorm { eps } => {
            let (x, gamma) = (args[0], args[1]);
            let d = *x.shape().last().unwrap();
            let mut gx = Tensor::zeros(x.shape());
            let mut gg = Tensor::zeros(gamma.shape());
            let mut gb = Tensor::zeros(gamma.shape());
            let mut xhat = vec![0.0; d];
            let mut gh = vec![0.0; d];
            for ((row, g), o) in x
                .data()
                .chunks(d)
                .zip(gout.data().chunks(d))
                .zip(gx.data_mut().chunks_mut(d))
            {
                let mean = row.iter().sum::<f64>() / d as f64;
                let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d as f64;
                let inv = 1.0 / (var + eps).sqrt();
                for j in 0..d {
                    xhat[j] = (row[j] - mean) * inv;
                    gh[j] = g[j] * gamma.data()[j];
                    gg.data_mut()[j] += g[j] * xhat[j];
                    gb.data_mut()[j] += g[j];
                }
                let mg = gh.iter().sum::<f64>() / d as f64;
                let mgx = gh.iter().zip(&xhat).map(|(a, b)| a * b).sum::<f64>() / d as f64;
                for j in 0..d {
                    o[j] = inv * (gh[j] - mg - xhat[j] * mgx);
                }
            }
            Ok(vec![Some(gx), Some(gg), Some(gb)])
        }
        OpKind::Softmax => {
            let d = *out.shape().last().unwrap_or(&1);
            let mut gx = Tensor::zeros(out.shape());
            for ((p, g), o) in out
                .data()
                .chunks(d)
                .zip(gout.data().chunks(d))
                .zip(gx.data_mut().chunks_mut(d))
            {
                let dot: f64 = p.iter().zip(g).map(|(a, b)| a * b).sum();
                for j in 0..d {
                    o[j] = p[j] * (g[j] - dot);
                }
            }
            Ok(vec![Some(gx)])
        }
        OpKind::MeanPool => {
            let x = args[0];
            let (b, t, d) = (x.shape()[0], x.shape()[1], x.shape()[2]);
            let mut gx = Tensor::zeros(x.shape());
            for bi in 0..b {
                let g = &gout.data()[bi * d..(bi + 1) * d];
                for ti in 0..t {
                    let o = &mut gx.data_mut()[(bi * t + ti) * d..(bi * t + ti + 1) * d];
                    for (oi, v) in o.iter_mut().zip(g) {
                        *oi = v / t as f64;
                    }
                }
            }
            Ok(vec![Some(gx)])
        }
        OpKind::Reshape { .. } => Ok(vec![Some(gout.clone().reshape(args[0].shape())?)]),
        OpKind::SumAll => Ok(vec![Some(Tensor::full(args[0].shape(), gout.item()))]),
        OpKind::Attention { heads } => {
            let grads = attention_backward(args, *heads, gout)?;
            Ok(grads.into_iter().map(Some).collect())
        }
        OpKind::CrossEntropy => {
            let (z, y) = (args[0], args[1]);
            let (b, k) = (z.shape()[0], z.shape()[1]);
            let scale = gout.item() / b as f64;
            let mut p = softmax_rows(z.data(), k);
            for (row, &label) in p.chunks_mut(k).zip(y.data()) {
                row[label as usize] -= 1.0;
                row.iter_mut().for_each(|v| *v *= scale);
            }
            Ok(vec![Some(Tensor::new(z.shape().to_vec(), p)?), None])
        }
    }
}

fn conv_dims(op: &OpKind, x: &Tensor, w: &Tensor) -> Result<[usize; 7]> {
    check(x.rank() == 4 && w.rank() == 4, op, || {
        format!("x {:?}, w {:?}", x.shape(), w.shape())
    })?;
    let (b, cin, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (cout, wc, kh, kw) = (w.shape()[0], w.shape()[1], w.shape()[2], w.shape()[3]);
    check(wc == cin, op, || format!("kernel expects {wc} channels, input has {cin}"))?;
    check(kh <= h && kw <= wd, op, || {
        format!("kernel {kh}x{kw} larger than input {h}x{wd}")
    })?;
    Ok([b, cin, h, wd, cout, kh, kw])
}

fn conv_forward(op: &OpKind, x: &Tensor, w: &Tensor, padding: Padding) -> Result<Tensor> {
    let [b, cin, h, wd, cout, kh, kw] = conv_dims(op, x, w)?;
    let (ch, cw) = ((kh / 2) as isize, (kw / 2) as isize);
    let mut out = Tensor::zeros(&[b, cout, h, wd]);
    let (xd, wdat) = (x.data(), w.data());
    let od = out.data_mut();
    for bi in 0..b {
        for o in 0..cout {
            let obase = (bi * cout + o) * h * wd;
            for c in 0..cin {
                let xbase = (bi * cin + c) * h * wd;
                for a in 0..kh {
                    let di = a as isize - ch;
                    for bb in 0..kw {
                        let wv = wdat[((o * cin + c) * kh + a) * kw + bb];
                        if wv == 0.0 {
                            continue;
                        }
                        let dj = bb as isize - cw;
                        for i in 0..h {
                            let Some(si) = source_index(i, di, h, padding) else {
                                continue;
                            };
                            let orow = &mut od[obase + i * wd..obase + (i + 1) * wd];
                            let xrow = &xd[xbase + si * wd..xbase + (si + 1) * wd];
                            shifted_axpy(orow, xrow, dj, wv, padding);
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

fn conv_backward(x: &Tensor, w: &Tensor, g: &Tensor, padding: Padding) -> (Tensor, Tensor) {
    let (b, cin, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (cout, kh, kw) = (w.shape()[0], w.shape()[2], w.shape()[3]);
    let (ch, cw) = ((kh / 2) as isize, (kw / 2) as isize);
    let mut gx = Tensor::zeros(x.shape());
    let mut gw = Tensor::zeros(w.shape());
    let (xd, wdat, gd) = (x.data(), w.data(), g.data());
    for bi in 0..b {
        for o in 0..cout {
            let gbase = (bi * cout + o) * h * wd;
            for c in 0..cin {
                let xbase = (bi * cin + c) * h * wd;
                for a in 0..kh {
                    let di = a as isize - ch;
                    for bb in 0..kw {
                        let widx = ((o * cin + c) * kh + a) * kw + bb;
                        let wv = wdat[widx];
                        let dj = bb as isize - cw;
                        let mut acc = 0.0;
                        for i in 0..h {
                            let Some(si) = source_index(i, di, h, padding) else {
                                continue;
                            };
                            let grow = &gd[gbase + i * wd..gbase + (i + 1) * wd];
                            let xrow = &xd[xbase + si * wd..xbase + (si + 1) * wd];
                            acc += shifted_dot(grow, xrow, dj, padding);
                            if wv != 0.0 {
                                let gxrow =
                                    &mut gx.data_mut()[xbase + si * wd..xbase + (si + 1) * wd];
                                shifted_axpy(gxrow, grow, -dj, wv, padding);
                            }
                        }
                        gw.data_mut()[widx] += acc;
                    }
                }
            }
        }
    }
    (gx, gw)
}

fn lc_dims(op: &OpKind, x: &Tensor, w: &Tensor) -> Result<[usize; 7]> {
    check(x.rank() == 4 && w.rank() == 6, op, || {
        format!("x {:?}, w {:?}", x.shape(), w.shape())
    })?;
    let (b, cin, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let s = w.shape();
    check(s[0] == h && s[1] == wd && s[3] == cin, op, || {
        format!("x {:?}, w {:?}", x.shape(), w.shape())
    })?;
    check(s[4] <= h && s[5] <= wd, op, || {
        format!("kernel {}x{} larger than input {h}x{wd}", s[4], s[5])
    })?;
    Ok([b, cin, h, wd, s[2], s[4], s[5]])
}

fn lc_forward(op: &OpKind, x: &Tensor, w: &Tensor, padding: Padding) -> Result<Tensor> {
    let [b, cin, h, wd, cout, kh, kw] = lc_dims(op, x, w)?;
    let (ch, cw) = ((kh / 2) as isize, (kw / 2) as isize);
    let mut out = Tensor::zeros(&[b, cout, h, wd]);
    let (xd, wdat) = (x.data(), w.data());
    let od = out.data_mut();
    for i in 0..h {
        for j in 0..wd {
            for o in 0..cout {
                for c in 0..cin {
                    for a in 0..kh {
                        let Some(si) = source_index(i, a as isize - ch, h, padding) else {
                            continue;
                        };
                        for bb in 0..kw {
                            let Some(sj) = source_index(j, bb as isize - cw, wd, padding) else {
                                continue;
                            };
                            let wv = wdat[((((i * wd + j) * cout + o) * cin + c) * kh + a) * kw + bb];
                            for bi in 0..b {
                                od[((bi * cout + o) * h + i) * wd + j] +=
                                    wv * xd[((bi * cin + c) * h + si) * wd + sj];
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

fn lc_backward(x: &Tensor, w: &Tensor, g: &Tensor, padding: Padding) -> (Tensor, Tensor) {
    let (b, cin, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (cout, kh, kw) = (w.shape()[2], w.shape()[4], w.shape()[5]);
    let (ch, cw) = ((kh / 2) as isize, (kw / 2) as isize);
    let mut gx = Tensor::zeros(x.shape());
    let mut gw = Tensor::zeros(w.shape());
    let (xd, wdat, gd) = (x.data(), w.data(), g.data());
    for i in 0..h {
        for j in 0..wd {
            for o in 0..cout {
                for c in 0..cin {
                    for a in 0..kh {
                        let Some(si) = source_index(i, a as isize - ch, h, padding) else {
                            continue;
                        };
                        for bb in 0..kw {
                            let Some(sj) = source_index(j, bb as isize - cw, wd, padding) else {
                                continue;
                            };
                            let widx = ((((i * wd + j) * cout + o) * cin + c) * kh + a) * kw + bb;
                            let wv = wdat[widx];
                            let mut acc = 0.0;
                            for bi in 0..b {
                                let gv = gd[((bi * cout + o) * h + i) * wd + j];
                                let xi = ((bi * cin + c) * h + si) * wd + sj;
                                acc += gv * xd[xi];
                                gx.data_mut()[xi] += gv * wv;
                            }
                            gw.data_mut()[widx] += acc;
                        }
                    }
                }
            }
        }
    }
    (gx, gw)
}

/// Forward (`inverse == false`) maps `[B, C, H, W]` to `[B, T, C*p*p]`; inverse scatters back.
fn patchify(op: &OpKind, x: &Tensor, p: usize, inverse: bool) -> Result<Tensor> {
    let b = x.shape()[0];
    let (c, h, w, t, f);
    if inverse {
        check(x.rank() == 3, op, || format!("{:?}", x.shape()))?;
        t = x.shape()[1];
        f = x.shape()[2];
        c = f / (p * p);
        let side = (t as f64).sqrt().round() as usize;
        h = side * p;
        w = side * p;
    } else {
        check(x.rank() == 4, op, || format!("expected [B, C, H, W], got {:?}", x.shape()))?;
        c = x.shape()[1];
        h = x.shape()[2];
        w = x.shape()[3];
        check(p > 0 && h % p == 0 && w % p == 0, op, || {
            format!("patch {p} does not divide {h}x{w}")
        })?;
        t = (h / p) * (w / p);
        f = c * p * p;
    }
    let tw = w / p;
    let mut out = vec![0.0; b * c * h * w];
    let src = x.data();
    for bi in 0..b {
        for ci in 0..c {
            for i in 0..h {
                for j in 0..w {
                    let img = ((bi * c + ci) * h + i) * w + j;
                    let tok = (i / p) * tw + j / p;
                    let feat = ci * p * p + (i % p) * p + (j % p);
                    let pat = (bi * t + tok) * f + feat;
                    if inverse {
                        out[img] = src[pat];
                    } else {
                        out[pat] = src[img];
                    }
                }
            }
        }
    }
    if inverse {
        Tensor::new(vec![b, c, h, w], out)
    } else {
        Tensor::new(vec![b, t, f], out)
    }
}

struct AttnCache {
    probs: Vec<f64>, // [B, H, T, T]
}

fn attention_forward(op: &OpKind, args: &[&Tensor], heads: usize) -> Result<(Tensor, AttnCache)> {
    let (q, k, v) = (args[0], args[1], args[2]);
    check(
        q.rank() == 3 && q.shape() == k.shape() && q.shape() == v.shape(),
        op,
        || format!("q {:?}, k {:?}, v {:?}", q.shape(), k.shape(), v.shape()),
    )?;
    let (b, t, d) = (q.shape()[0], q.shape()[1], q.shape()[2]);
    check(heads > 0 && d % heads == 0, op, || format!("{heads} heads do not divide dim {d}"))?;
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut probs = vec![0.0; b * heads * t * t];
    let mut out = Tensor::zeros(q.shape());
    for bi in 0..b {
        for hi in 0..heads {
            let pbase = (bi * heads + hi) * t * t;
            for ti in 0..t {
                let row = &mut probs[pbase + ti * t..pbase + (ti + 1) * t];
                let qo = (bi * t + ti) * d + hi * dh;
                for (si, r) in row.iter_mut().enumerate() {
                    let ko = (bi * t + si) * d + hi * dh;
                    let s: f64 = (0..dh).map(|e| q.data()[qo + e] * k.data()[ko + e]).sum();
                    *r = s * scale;
                }
                let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let mut z = 0.0;
                for r in row.iter_mut() {
                    *r = (*r - m).exp();
                    z += *r;
                }
                row.iter_mut().for_each(|r| *r /= z);
                let o = &mut out.data_mut()[qo..qo + dh];
                for (si, &p) in row.iter().enumerate() {
                    let vo = (bi * t + si) * d + hi * dh;
                    for e in 0..dh {
                        o[e] += p * v.data()[vo + e];
                    }
                }
            }
        }
    }
    Ok((out, AttnCache { probs }))
}

fn attention_backward(args: &[&Tensor], heads: usize, g: &Tensor) -> Result<Vec<Tensor>> {
    let op = OpKind::Attention { heads };
    let (_, cache) = attention_forward(&op, args, heads)?;
    let (q, k, v) = (args[0], args[1], args[2]);
    let (b, t, d) = (q.shape()[0], q.shape()[1], q.shape()[2]);
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut gq = Tensor::zeros(q.shape());
    let mut gk = Tensor::zeros(q.shape());
    let mut gv = Tensor::zeros(q.shape());
    let mut dp = vec![0.0; t];
    for bi in 0..b {
        for hi in 0..heads {
            let pbase = (bi * heads + hi) * t * t;
            for ti in 0..t {
                let p = &cache.probs[pbase + ti * t..pbase + (ti + 1) * t];
                let go = (bi * t + ti) * d + hi * dh;
                let grow = &g.data()[go..go + dh];
                for si in 0..t {
                    let vo = (bi * t + si) * d + hi * dh;
                    dp[si] = (0..dh).map(|e| grow[e] * v.data()[vo + e]).sum();
                    for e in 0..dh {
                        gv.data_mut()[vo + e] += p[si] * grow[e];
                    }
                }
                let dot: f64 = p.iter().zip(&dp).map(|(a, b)| a * b).sum();
                for si in 0..t {
                    let ds = p[si] * (dp[si] - dot) * scale;
                    if ds == 0.0 {
                        continue;
                    }
                    let ko = (bi * t + si) * d + hi * dh;
                    for e in 0..dh {
                        gq.data_mut()[go + e] += ds * k.data()[ko + e];
                        gk.data_mut()[ko + e] += ds * q.data()[go + e];
                    }
                }
            }
        }
    }
    Ok(vec![gq, gk, gv])
}
