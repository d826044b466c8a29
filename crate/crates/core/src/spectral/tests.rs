use num_complex::Complex64;
use proptest::prelude::*;
use rand::Rng;

use super::export::{grid_csv, parse_grid_csv, pgm, Scale};
use super::*;
use crate::autodiff::kernels::{forward, OpKind, Padding};

fn random_grid(n: usize, seed: u64) -> Vec<f64> {
    let mut r = crate::rng::rng(seed);
    (0..n).map(|_| r.random_range(-1.0..1.0)).collect()
}

fn max_err(a: &Spectrum, b: &Spectrum) -> f64 {
    a.bins().iter().zip(b.bins()).map(|(x, y)| (x - y).norm()).fold(0.0, f64::max)
}

#[test]
fn all_ones_has_only_dc() {
    let s = dft2(&[1.0; 16], 4, 4).unwrap();
    for i in 0..4 {
        for j in 0..4 {
            let m = s.bins()[i * 4 + j].norm();
            if s.frequency(i, j) == (0, 0) {
                assert!((m - 16.0).abs() < 1e-12);
            } else {
                assert!(m < 1e-12);
            }
        }
    }
}

#[test]
fn impulse_is_flat() {
    let mut x = vec![0.0; 64];
    x[0] = 1.0;
    let s = dft2(&x, 8, 8).unwrap();
    assert!(s.bins().iter().all(|c| (c.norm() - 1.0).abs() < 1e-12));
}

#[test]
fn fast_matches_naive_up_to_16() {
    for n in (2..=16).step_by(2) {
        let x = random_grid(n * n, n as u64);
        let err = max_err(&dft2(&x, n, n).unwrap(), &dft2_naive(&x, n, n).unwrap());
        assert!(err < 1e-10, "n={n} err={err}");
    }
}

#[test]
fn odd_extents_rejected() {
    assert!(dft2(&[0.0; 9], 3, 3).is_err());
}

#[test]
fn parseval_with_documented_constant() {
    for &n in &[8usize, 16, 32] {
        let x = random_grid(n * n, 99 + n as u64);
        let spatial: f64 = x.iter().map(|v| v * v).sum();
        let spectral = dft2(&x, n, n).unwrap().total_energy();
        let rel = (spectral - (n * n) as f64 * spatial).abs() / spectral;
        assert!(rel < 1e-9, "{rel}");
    }
}

#[test]
fn inverse_recovers_image() {
    let x = random_grid(64, 5);
    let back = dft2(&x, 8, 8).unwrap().inverse();
    for (a, b) in back.iter().zip(&x) {
        assert!((a.re - b).abs() < 1e-12 && a.im.abs() < 1e-12);
    }
}

#[test]
fn circular_conv_satisfies_convolution_theorem() {
    let n = 8;
    let x = Tensor::new(vec![1, 1, n, n], random_grid(n * n, 11)).unwrap();
    let k = 3;
    let w = Tensor::new(vec![1, 1, k, k], random_grid(k * k, 12)).unwrap();
    let y = forward(&OpKind::Conv { padding: Padding::Circular }, &[&x, &w]).unwrap();
    // The kernel tap (a, b) acts at offset (a - k/2, b - k/2).
    let mut embedded = vec![0.0; n * n];
    for a in 0..k {
        for b in 0..k {
            let i = (a as isize - (k / 2) as isize).rem_euclid(n as isize) as usize;
            let j = (b as isize - (k / 2) as isize).rem_euclid(n as isize) as usize;
            embedded[i * n + j] = w.data()[a * k + b];
        }
    }
    let sy = dft2(y.data(), n, n).unwrap();
    let sx = dft2(x.data(), n, n).unwrap();
    let sw = dft2(&embedded, n, n).unwrap();
    for i in 0..n * n {
        let prod = sx.bins()[i] * sw.bins()[i];
        assert!((prod - sy.bins()[i]).norm() < 1e-9);
    }
}

#[test]
fn mean_magnitude_examples() {
    let x = Tensor::new(vec![8, 8], random_grid(64, 21)).unwrap();
    let single = mean_magnitude_spectrum(std::slice::from_ref(&x)).unwrap();
    assert!(single.max_abs_diff(&dft2(x.data(), 8, 8).unwrap().magnitude()) < 1e-12);
    let pair = mean_magnitude_spectrum(&[x.clone(), x.scale(-1.0)]).unwrap();
    assert!(pair.max_abs_diff(&single) < 1e-12);
    assert!(mean_magnitude_spectrum(&[]).is_err());
}

#[test]
fn white_noise_mean_spectrum_is_flat() {
    let items: Vec<Tensor> = (0..100)
        .map(|s| Tensor::new(vec![16, 16], random_grid(256, 1000 + s)).unwrap())
        .collect();
    let m = mean_magnitude_spectrum(&items).unwrap();
    let hi = m.data().iter().cloned().fold(f64::MIN, f64::max);
    let lo = m.data().iter().cloned().fold(f64::MAX, f64::min);
    assert!(hi / lo < 2.0, "{}", hi / lo);
}

#[test]
fn kappa_examples() {
    for k in [0.0, 1.0, 5.0, 15.0] {
        assert_eq!(kappa_high_1d(&[0.7; 32], k).unwrap(), 0.0);
    }
    let nyquist: Vec<f64> = (0..32).map(|i| if i % 2 == 0 { 1.0 } else { -1.0 }).collect();
    assert!((kappa_high_1d(&nyquist, 15.0).unwrap() - 1.0).abs() < 1e-12);
    assert_eq!(kappa_high_1d(&[0.0; 32], 3.0).unwrap(), 0.0);
    assert!(kappa_high_1d(&[1.0; 8], 8.0).is_err());
    let img: Vec<f64> = (0..32 * 32)
        .map(|i| if (i / 32 + i % 32) % 2 == 0 { 1.0 } else { -1.0 })
        .collect();
    assert!((kappa_high(&img, 32, 32, 15.0, LowRegion::Square).unwrap() - 1.0).abs() < 1e-12);
}

#[test]
fn kappa_matches_direct_bin_summation() {
    let x = random_grid(32, 31);
    let k = 9.0;
    // Oracle: direct DFT, then sum bins by signed frequency.
    let mut low = 0.0;
    let mut total = 0.0;
    for u in 0..32 {
        let mut c = Complex64::new(0.0, 0.0);
        for (t, v) in x.iter().enumerate() {
            c += v * Complex64::from_polar(1.0, -2.0 * std::f64::consts::PI * (u * t) as f64 / 32.0);
        }
        let f = if u < 16 { u as f64 } else { u as f64 - 32.0 };
        total += c.norm_sqr();
        if f.abs() <= k / 2.0 {
            low += c.norm_sqr();
        }
    }
    let expected = 1.0 - low / total;
    assert!((kappa_high_1d(&x, k).unwrap() - expected).abs() < 1e-12);
}

#[test]
fn radial_and_angular_profiles_partition_energy() {
    let mut e = Tensor::zeros(&[16, 16]);
    e.data_mut()[8 * 16 + 8] = 3.0;
    let r = radial_profile(&e).unwrap();
    assert_eq!(r.bins[0], 3.0);
    assert_eq!(r.total(), 3.0);

    let x = random_grid(256, 41);
    let energy = dft2(&x, 16, 16).unwrap().energy();
    let total = energy.sum();
    for p in [radial_profile(&energy).unwrap(), angular_profile(&energy).unwrap()] {
        assert!((p.total() - total).abs() / total < 1e-9);
    }
    assert_eq!(angular_profile(&energy).unwrap().bins.len(), 360);
}

#[test]
fn annulus_energy_lands_in_its_radial_bins() {
    let n = 32;
    for r0 in [3.0f64, 7.0, 11.0] {
        let mut e = Tensor::zeros(&[n, n]);
        for i in 0..n {
            for j in 0..n {
                let (u, v) = (i as f64 - 16.0, j as f64 - 16.0);
                if ((u * u + v * v).sqrt() - r0).abs() <= 0.5 {
                    e.data_mut()[i * n + j] = 1.0;
                }
            }
        }
        let p = radial_profile(&e).unwrap();
        let r = r0 as usize;
        let near: f64 = p.bins[r - 1..=r + 1].iter().sum();
        assert!(near / p.total() >= 0.99);
    }
}

#[test]
fn pq_norm_examples() {
    for p in [1.0, 2.0, 2.0 / 3.0] {
        assert!((pq_norm(&[0.0, 1.0, 0.0], p).unwrap() - 1.0).abs() < 1e-12);
    }
    assert!((pq_norm(&[3.0, 4.0], 2.0).unwrap() - 5.0).abs() < 1e-12);
    assert!((pq_norm(&[1.0, 1.0, 1.0], 2.0 / 3.0).unwrap() - 3f64.powf(1.5)).abs() < 1e-12);
    assert!((pq_norm(&[1.0, 1.0, 1.0], 2.0 / 3.0).unwrap() - 5.19615).abs() < 1e-5);
    assert!(pq_norm(&[1.0], 0.0).is_err());
    let c = [Complex64::new(3.0, 4.0)];
    assert!((pq_norm_complex(&c, 1.0).unwrap() - 5.0).abs() < 1e-12);
}

#[test]
fn spearman_examples() {
    let a = random_grid(50, 51);
    assert!((spearman(&a, &a).unwrap().unwrap() - 1.0).abs() < 1e-12);
    let rev: Vec<f64> = a.iter().map(|v| -v).collect();
    assert!((spearman(&a, &rev).unwrap().unwrap() + 1.0).abs() < 1e-12);
    assert_eq!(spearman(&a, &[2.0; 50]).unwrap(), None);
    assert!(spearman(&a, &a[..10]).is_err());
    assert_eq!(average_ranks(&[1.0, 2.0, 2.0, 5.0]), vec![1.0, 2.5, 2.5, 4.0]);
}

#[test]
fn hadamard_bound_examples() {
    let n = 8;
    let one_hot = |k: usize| -> Vec<Complex64> {
        (0..n).map(|i| Complex64::new(if i == k { 2.0 } else { 0.0 }, 0.0)).collect()
    };
    let full = vec![vec![true; n]];
    let slack = hadamard_bound_check(&[one_hot(3), one_hot(3)], &full).unwrap();
    assert!(slack[0].abs() < 1e-12);

    let mut r = crate::rng::rng(61);
    for _ in 0..1000 {
        let depth = r.random_range(2..5);
        let spectra: Vec<Vec<Complex64>> = (0..depth)
            .map(|_| {
                let mut buf: Vec<Complex64> = (0..n).map(|_| Complex64::new(r.random_range(-1.0..1.0), 0.0)).collect();
                fft::fft_inplace(&mut buf, false);
                buf
            })
            .collect();
        let masks = interval_masks(n, &[0.0, 2.0, 4.0, 7.0]);
        for s in hadamard_bound_check(&spectra, &masks).unwrap() {
            assert!(s >= -1e-12);
        }
    }
}

#[test]
fn zero_heatmap_is_uniform() {
    let img = pgm(&Tensor::zeros(&[4, 4]), Scale::Linear).unwrap();
    let header = b"P5\n4 4\n255\n";
    assert_eq!(&img[..header.len()], header);
    let body = &img[header.len()..];
    assert_eq!(body.len(), 16);
    assert!(body.iter().all(|&b| b == body[0]));
    let log = pgm(&Tensor::zeros(&[4, 4]), Scale::Log).unwrap();
    assert_eq!(img, log);
}

#[test]
fn grid_csv_roundtrip() {
    let g = Tensor::new(vec![3, 4], random_grid(12, 71)).unwrap();
    assert_eq!(parse_grid_csv(&grid_csv(&g).unwrap()).unwrap(), g);
}

proptest! {
    #[test]
    fn kappa_nonincreasing_in_k(xs in proptest::collection::vec(-1.0f64..1.0, 16)) {
        let mut prev = f64::INFINITY;
        for k in 0..16 {
            let v = kappa_high_1d(&xs, k as f64).unwrap();
            prop_assert!((0.0..=1.0).contains(&v));
            prop_assert!(v <= prev + 1e-12);
            prev = v;
        }
    }

    #[test]
    fn spearman_invariant_under_monotone_maps(
        a in proptest::collection::vec(-5.0f64..5.0, 20),
        b in proptest::collection::vec(-5.0f64..5.0, 20),
    ) {
        let base = spearman(&a, &b).unwrap();
        let ta: Vec<f64> = a.iter().map(|v| v.exp()).collect();
        let tb: Vec<f64> = b.iter().map(|v| v * v * v + 2.0 * v).collect();
        let moved = spearman(&ta, &tb).unwrap();
        match (base, moved) {
            (Some(x), Some(y)) => prop_assert!((x - y).abs() < 1e-12),
            (x, y) => prop_assert_eq!(x, y),
        }
    }

    #[test]
    fn parseval_holds(xs in proptest::collection::vec(-1.0f64..1.0, 64)) {
        let spatial: f64 = xs.iter().map(|v| v * v).sum();
        let spectral = dft2(&xs, 8, 8).unwrap().total_energy();
        prop_assert!((spectral - 64.0 * spatial).abs() <= 1e-9 * spectral.max(1e-300));
    }
}

#[test]
fn delta_kernel_has_flat_spectrum_concentration() {
    use crate::models::{Activation, Family, Model, ModelSpec};
    let spec = ModelSpec::preset(Family::Bwc { k: 3 }, [1, 16, 16], 2, 1, Activation::None);
    let mut m = Model::build(&spec, 0).unwrap();
    let slot = m.layers()[0].weight.unwrap();
    let mut kernel = crate::tensor::Tensor::zeros(m.params.get(slot).shape());
    kernel.data_mut()[4] = 1.0;
    *m.params.get_mut(slot) = kernel;
    let reports = uncertainty_sweep(&[&m], 7.0, LowRegion::Square).unwrap();
    assert_eq!(reports.len(), 2);
    assert_eq!(reports[0].kernel, Some(3));
    assert_eq!(reports[0].depth, 1);
    assert!((reports[0].kappa_w - (1.0 - 49.0 / 256.0)).abs() < 1e-12);
    assert!((reports[0].kappa_beta - reports[0].kappa_w).abs() < 1e-12);
    // An identity first layer leaves the head's templates unchanged.
    assert!((reports[1].kappa_beta - reports[1].kappa_w).abs() < 1e-12);
}

#[test]
fn pooled_kappa_reduces_to_single_channel() {
    let g = random_grid(64, 3);
    let t = crate::tensor::Tensor::new(vec![1, 8, 8], g.clone()).unwrap();
    let a = kappa_high_pooled(&t, 3.0, LowRegion::Square).unwrap();
    let b = kappa_high(&g, 8, 8, 3.0, LowRegion::Square).unwrap();
    assert!((a - b).abs() < 1e-12);
}

#[test]
fn sweep_refuses_nonlinear_models() {
    use crate::models::{Activation, Family, Model, ModelSpec};
    let spec = ModelSpec::preset(Family::Fwc, [1, 8, 8], 2, 1, Activation::Relu);
    let m = Model::build(&spec, 0).unwrap();
    assert!(uncertainty_sweep(&[&m], 3.0, LowRegion::Square).is_err());
}
