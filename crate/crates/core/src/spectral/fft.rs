//! Discrete Fourier transforms.
//!
//! Convention used throughout the crate: the forward transform is
//! unnormalized, `X[u] = sum_n x[n] e^{-2 pi i u n / N}`, and the inverse
//! carries the `1/N` factor (`1/N^2` for an `N x N` grid). Parseval therefore
//! reads `sum |X|^2 = N * sum |x|^2` (with `N` the total number of samples).

use std::f64::consts::PI;

use num_complex::Complex64;

/// In-place 1D transform. Power-of-two lengths use iterative radix-2
/// Cooley-Tukey; other lengths fall back to the direct sum.
pub fn fft_inplace(buf: &mut [Complex64], inverse: bool) {
    let n = buf.len();
    if n <= 1 {
        return;
    }
    if !n.is_power_of_two() {
        let out = dft_naive(buf, inverse);
        buf.copy_from_slice(&out);
        return;
    }
    let bits = n.trailing_zeros();
    for i in 0..n {
        let j = i.reverse_bits() >> (usize::BITS - bits);
        if i < j {
            buf.swap(i, j);
        }
    }
    let sign = if inverse { 1.0 } else { -1.0 };
    let mut len = 2;
    while len <= n {
        let ang = sign * 2.0 * PI / len as f64;
        let half = len / 2;
        // Twiddles computed directly per index; repeated multiplication drifts.
        let tw: Vec<Complex64> = (0..half)
            .map(|k| Complex64::from_polar(1.0, ang * k as f64))
            .collect();
        for start in (0..n).step_by(len) {
            for k in 0..half {
                let a = buf[start + k];
                let b = buf[start + k + half] * tw[k];
                buf[start + k] = a + b;
                buf[start + k + half] = a - b;
            }
        }
        len <<= 1;
    }
    if inverse {
        let s = 1.0 / n as f64;
        buf.iter_mut().for_each(|v| *v *= s);
    }
}

/// Direct O(N^2) transform with the same conventions as [`fft_inplace`].
pub fn dft_naive(x: &[Complex64], inverse: bool) -> Vec<Complex64> {
    let n = x.len();
    let sign = if inverse { 1.0 } else { -1.0 };
    let mut out = vec![Complex64::new(0.0, 0.0); n];
    for (u, o) in out.iter_mut().enumerate() {
        for (t, v) in x.iter().enumerate() {
            let ang = sign * 2.0 * PI * ((u * t) % n) as f64 / n as f64;
            *o += v * Complex64::from_polar(1.0, ang);
        }
        if inverse {
            *o /= n as f64;
        }
    }
    out
}

/// Row-then-column 2D transform of a row-major `h x w` grid.
pub fn fft2_inplace(buf: &mut [Complex64], h: usize, w: usize, inverse: bool) {
    assert_eq!(buf.len(), h * w);
    for row in buf.chunks_mut(w) {
        fft_inplace(row, inverse);
    }
    let mut col = vec![Complex64::new(0.0, 0.0); h];
    for j in 0..w {
        for i in 0..h {
            col[i] = buf[i * w + j];
        }
        fft_inplace(&mut col, inverse);
        for i in 0..h {
            buf[i * w + j] = col[i];
        }
    }
}

/// Direct O(N^4) 2D transform; the reference the fast path is tested against.
pub fn dft2_naive_raw(x: &[Complex64], h: usize, w: usize, inverse: bool) -> Vec<Complex64> {
    let sign = if inverse { 1.0 } else { -1.0 };
    let mut out = vec![Complex64::new(0.0, 0.0); h * w];
    for u in 0..h {
        for v in 0..w {
            let mut acc = Complex64::new(0.0, 0.0);
            for i in 0..h {
                for j in 0..w {
                    let ph = ((u * i) % h) as f64 / h as f64 + ((v * j) % w) as f64 / w as f64;
                    acc += x[i * w + j] * Complex64::from_polar(1.0, sign * 2.0 * PI * ph);
                }
            }
            if inverse {
                acc /= (h * w) as f64;
            }
            out[u * w + v] = acc;
        }
    }
    out
}

/// Moves the zero frequency from index 0 to index `n/2` along both axes.
pub fn fftshift(buf: &[Complex64], h: usize, w: usize) -> Vec<Complex64> {
    let mut out = vec![Complex64::new(0.0, 0.0); h * w];
    for i in 0..h {
        for j in 0..w {
            out[((i + h / 2) % h) * w + (j + w / 2) % w] = buf[i * w + j];
        }
    }
    out
}

/// Inverse of [`fftshift`].
pub fn ifftshift(buf: &[Complex64], h: usize, w: usize) -> Vec<Complex64> {
    let mut out = vec![Complex64::new(0.0, 0.0); h * w];
    for i in 0..h {
        for j in 0..w {
            out[i * w + j] = buf[((i + h / 2) % h) * w + (j + w / 2) % w];
        }
    }
    out
}
