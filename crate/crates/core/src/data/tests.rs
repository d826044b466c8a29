use num_complex::Complex64;
use rand::Rng as _;

use super::*;
use crate::rng;
use crate::spectral::{dft2, fft};

fn tiny_layout() -> CifarLayout {
    CifarLayout {
        label_bytes: 1,
        channels: 3,
        height: 4,
        width: 4,
        classes: 10,
    }
}

fn random_batch(n: usize, layout: CifarLayout, seed: u64) -> Vec<u8> {
    let mut r = rng::rng(seed);
    let mut out = Vec::new();
    for _ in 0..n {
        out.push(r.random_range(0..layout.classes as u8));
        out.extend((0..layout.record_len() - 1).map(|_| r.random::<u8>()));
    }
    out
}

fn cfg(textures: Vec<TextureSpec>, noise_amp: f64) -> SynthConfig {
    SynthConfig {
        size: 16,
        channels: 1,
        classes: textures.len(),
        train_per_class: 20,
        test_per_class: 20,
        textures,
        noise: TextureSpec {
            alpha: 1.0,
            band: None,
            amplitude: noise_amp,
        },
        mean: 0.5,
    }
}

#[test]
fn cifar_batch_shapes_and_scaling() {
    let bytes = random_batch(10, CifarLayout::CIFAR10, 1);
    let d = load_batch(&bytes, CifarLayout::CIFAR10, Split::Train, "mem").unwrap();
    assert_eq!(d.len(), 10);
    assert_eq!(d.image_shape(), [3, 32, 32]);
    assert_eq!(d.labels[0], bytes[0] as usize);
    assert_eq!(d.images.data()[0], bytes[1] as f64 / 255.0);
    assert!(d.images.data().iter().all(|v| (0.0..=1.0).contains(v)));
}

#[test]
fn cifar_round_trip_is_bitwise() {
    let layout = tiny_layout();
    let bytes = random_batch(25, layout, 2);
    let d = load_batch(&bytes, layout, Split::Test, "mem").unwrap();
    assert_eq!(encode_batch(&d, layout).unwrap(), bytes);
}

#[test]
fn cifar_directory_loader_orders_batches() {
    let dir = tempfile::tempdir().unwrap();
    let mut all = Vec::new();
    for i in 1..=5 {
        let b = random_batch(2, CifarLayout::CIFAR10, 10 + i);
        std::fs::write(dir.path().join(format!("data_batch_{i}.bin")), &b).unwrap();
        all.extend(b);
    }
    std::fs::write(dir.path().join("test_batch.bin"), random_batch(3, CifarLayout::CIFAR10, 99)).unwrap();
    let train = load_cifar10(dir.path(), Split::Train).unwrap();
    let test = load_cifar10(dir.path(), Split::Test).unwrap();
    assert_eq!((train.len(), test.len()), (10, 3));
    assert_eq!(encode_batch(&train, CifarLayout::CIFAR10).unwrap(), all);
}

#[test]
fn malformed_batch_reports_offset() {
    let layout = tiny_layout();
    let mut bytes = random_batch(3, layout, 3);
    bytes.truncate(bytes.len() - 5);
    match load_batch(&bytes, layout, Split::Train, "mem") {
        Err(Error::Malformed { offset, .. }) => assert_eq!(offset, 2 * layout.record_len()),
        other => panic!("{other:?}"),
    }
    let mut bytes = random_batch(3, layout, 3);
    bytes[layout.record_len()] = 200;
    match load_batch(&bytes, layout, Split::Train, "mem") {
        Err(Error::Malformed { offset, .. }) => assert_eq!(offset, layout.record_len()),
        other => panic!("{other:?}"),
    }
}

#[test]
fn grayscale_of_gray_image_is_unchanged() {
    let mut r = rng::rng(4);
    let n = 3;
    let plane = 16;
    let mut data = Vec::new();
    let mut grays = Vec::new();
    for _ in 0..n {
        let g: Vec<f64> = (0..plane).map(|_| r.random_range(0..=255u8) as f64 / 255.0).collect();
        for _ in 0..3 {
            data.extend(&g);
        }
        grays.extend(g);
    }
    let d = Dataset::new(Tensor::new(vec![n, 3, 4, 4], data).unwrap(), vec![0; n], 2, Split::Train, "m").unwrap();
    let g = d.to_grayscale().unwrap();
    assert_eq!(g.image_shape(), [1, 4, 4]);
    assert_eq!(g.images.data(), &grays[..]);
}

#[test]
fn downsample_averages_blocks() {
    let img = Tensor::from_fn(&[1, 1, 4, 4], |i| i as f64 / 16.0);
    let d = Dataset::new(img, vec![0], 2, Split::Train, "m").unwrap();
    let s = d.downsample_by_2().unwrap();
    assert_eq!(s.image_shape(), [1, 2, 2]);
    assert!((s.images.data()[0] - (0.0 + 1.0 + 4.0 + 5.0) / 64.0).abs() < 1e-15);
}

#[test]
fn dc_only_classes_differ_only_in_mean() {
    let dc = TextureSpec {
        alpha: f64::INFINITY,
        band: None,
        amplitude: 0.1,
    };
    let mut c = cfg(vec![dc, dc], 0.0);
    c.noise.alpha = f64::INFINITY;
    let (train, _) = synth_dataset(&c, 5).unwrap();
    let mut means = [Vec::new(), Vec::new()];
    for i in 0..train.len() {
        let img = train.image(i);
        let first = img.data()[0];
        assert!(img.data().iter().all(|&v| v == first), "image {i} is not constant");
        means[train.labels[i]].push(first);
    }
    // Without noise every image of a class is the same constant.
    assert!(means[0].iter().all(|&m| m == means[0][0]));
    assert!(means[1].iter().all(|&m| m == means[1][0]));
    assert_ne!(means[0][0], means[1][0]);
}

fn band_energy(img: &[f64], n: usize, lo: f64, hi: f64) -> f64 {
    let s = dft2(img, n, n).unwrap();
    let r_max = (n / 2) as f64;
    let mut e = 0.0;
    for i in 0..n {
        for j in 0..n {
            let (u, v) = s.frequency(i, j);
            let r = ((u * u + v * v) as f64).sqrt();
            if r >= lo * r_max && r < hi * r_max {
                e += s.bins()[i * n + j].norm_sqr();
            }
        }
    }
    e
}

#[test]
fn disjoint_bands_are_perfectly_separable() {
    let low = TextureSpec {
        alpha: 0.0,
        band: Some((0.1, 0.4)),
        amplitude: 0.15,
    };
    let high = TextureSpec {
        band: Some((0.6, 1.0)),
        ..low
    };
    let (_, test) = synth_dataset(&cfg(vec![low, high], 0.0), 6).unwrap();
    // Matched filter on band energies.
    let mut correct = 0;
    for i in 0..test.len() {
        let img = test.image(i);
        let el = band_energy(img.data(), 16, 0.1, 0.4);
        let eh = band_energy(img.data(), 16, 0.6, 1.0);
        let pred = usize::from(eh > el);
        correct += usize::from(pred == test.labels[i]);
    }
    assert_eq!(correct, test.len());
}

#[test]
fn synth_is_balanced_and_seeded() {
    let t = TextureSpec {
        alpha: 1.0,
        band: None,
        amplitude: 0.1,
    };
    let c = cfg(vec![t, t, t], 0.05);
    let (a, at) = synth_dataset(&c, 7).unwrap();
    let (b, _) = synth_dataset(&c, 7).unwrap();
    let (other, _) = synth_dataset(&c, 8).unwrap();
    assert_eq!(a.hash(), b.hash());
    assert_ne!(a.hash(), other.hash());
    assert_ne!(a.hash(), at.hash());
    for k in 0..3 {
        assert_eq!(a.labels.iter().filter(|&&l| l == k).count(), 20);
    }
    assert!(a.images.data().iter().all(|v| (0.0..=1.0).contains(v)));
}

#[test]
fn texture_rms_matches_amplitude() {
    let t = TextureSpec {
        alpha: 2.0,
        band: None,
        amplitude: 0.3,
    };
    let f = t.sample(16, 16, &mut rng::rng(9));
    let rms = (f.iter().map(|v| v * v).sum::<f64>() / 256.0).sqrt();
    assert!((rms - 0.3).abs() < 1e-12);
}

fn flat(n: usize, classes: usize) -> Dataset {
    let images = Tensor::full(&[2 * classes, 1, n, n], 0.5);
    let labels = (0..2 * classes).map(|i| i % classes).collect();
    Dataset::new(images, labels, classes, Split::Train, "flat").unwrap()
}

#[test]
fn zero_epsilon_injection_is_identity() {
    let t = TextureSpec {
        alpha: 1.0,
        band: None,
        amplitude: 0.2,
    };
    let (d, _) = synth_dataset(&cfg(vec![t, t], 0.05), 10).unwrap();
    for mode in [SteganoMode::Sparse { rho: 0.2 }, SteganoMode::Ring { r_lo: 0.1, r_hi: 0.2 }] {
        let spec = SteganoSpec {
            mode,
            epsilon: 0.0,
            seed: 3,
        };
        let (out, rep) = inject_shortcut(&d, &spec).unwrap();
        assert_eq!(out.images, d.images);
        assert_eq!(out.labels, d.labels);
        assert_eq!(rep.clamped_fraction, 0.0);
        assert!(out.provenance.injection.is_some());
    }
}

#[test]
fn ring_injection_is_supported_in_annulus() {
    let n = 16;
    let d = flat(n, 2);
    let spec = SteganoSpec {
        mode: SteganoMode::Ring { r_lo: 0.1, r_hi: 0.2 },
        epsilon: 0.5,
        seed: 11,
    };
    let (out, rep) = inject_shortcut(&d, &spec).unwrap();
    assert_eq!(rep.clamped_fraction, 0.0);
    let r_max = (n / 2) as f64;
    for i in 0..d.len() {
        let diff: Vec<f64> = out.image(i).data().iter().zip(d.image(i).data()).map(|(a, b)| a - b).collect();
        let s = dft2(&diff, n, n).unwrap();
        let mut inside = 0.0;
        for a in 0..n {
            for b in 0..n {
                let (u, v) = s.frequency(a, b);
                let r = ((u * u + v * v) as f64).sqrt();
                // Brute-force annulus mask; the symmetric partner of an
                // annulus bin has the same radius.
                let e = s.bins()[a * n + b].norm();
                if r >= 0.1 * r_max && r < 0.2 * r_max {
                    inside += e;
                } else {
                    assert!(e < 1e-12, "energy {e} outside the annulus at ({u},{v})");
                }
            }
        }
        assert!(inside > 0.0);
    }
}

#[test]
fn injection_is_label_consistent() {
    let d = flat(8, 3);
    let spec = SteganoSpec {
        mode: SteganoMode::Sparse { rho: 0.3 },
        epsilon: 0.3,
        seed: 12,
    };
    let (out, _) = inject_shortcut(&d, &spec).unwrap();
    for i in 0..3 {
        assert_eq!(out.image(i), out.image(i + 3));
    }
    assert_ne!(out.image(0), out.image(1));
    // A differently labelled split (the test set) receives the same pattern.
    let mut test = d.clone();
    test.split = Split::Test;
    let (out_t, _) = inject_shortcut(&test, &spec).unwrap();
    assert_eq!(out_t.images, out.images);
}

#[test]
fn strong_injection_is_matched_filter_separable() {
    let t = TextureSpec {
        alpha: 1.0,
        band: None,
        amplitude: 0.1,
    };
    let (d, _) = synth_dataset(&cfg(vec![t, t, t], 0.1), 13).unwrap();
    let spec = SteganoSpec {
        mode: SteganoMode::Sparse { rho: 0.2 },
        epsilon: 2.0,
        seed: 14,
    };
    let (out, _) = inject_shortcut(&d, &spec).unwrap();
    let pats: Vec<Vec<Complex64>> = (0..3)
        .map(|k| shortcut_pattern(&spec, k, 1, 16, 16).unwrap().remove(0))
        .collect();
    let mut correct = 0;
    for i in 0..out.len() {
        let s = dft2(out.image(i).data(), 16, 16).unwrap();
        let scores: Vec<f64> = pats
            .iter()
            .map(|p| s.bins().iter().zip(p).map(|(a, b)| (a * b.conj()).re).sum())
            .collect();
        correct += usize::from(Tensor::argmax(&scores) == out.labels[i]);
    }
    assert_eq!(correct, out.len());
}

#[test]
fn invalid_specs_are_rejected() {
    let bad = [
        SteganoMode::Sparse { rho: 0.0 },
        SteganoMode::Sparse { rho: 1.5 },
        SteganoMode::Ring { r_lo: 0.5, r_hi: 0.5 },
        SteganoMode::Ring { r_lo: 0.2, r_hi: 1.1 },
    ];
    for mode in bad {
        let spec = SteganoSpec { mode, epsilon: 0.1, seed: 0 };
        assert!(spec.validate().is_err());
    }
    let spec = SteganoSpec {
        mode: SteganoMode::Sparse { rho: 0.5 },
        epsilon: -1.0,
        seed: 0,
    };
    assert!(spec.validate().is_err());
}

#[test]
fn hermitian_symmetrize_fixes_real_spectra() {
    let mut r = rng::rng(15);
    let img: Vec<f64> = (0..64).map(|_| r.random::<f64>()).collect();
    let s = dft2(&img, 8, 8).unwrap();
    let g = hermitian_symmetrize(s.bins(), 8, 8);
    for (a, b) in g.iter().zip(s.bins()) {
        assert!((a - b).norm() < 1e-12);
    }
}

#[test]
fn hermitian_symmetrize_matches_formula_and_is_real() {
    let mut r = rng::rng(16);
    let n = 8;
    let g: Vec<Complex64> = (0..n * n)
        .map(|_| Complex64::new(r.random::<f64>() - 0.5, r.random::<f64>() - 0.5))
        .collect();
    let out = hermitian_symmetrize(&g, n, n);
    for u in 0..n {
        for v in 0..n {
            let flip = g[((n - u) % n) * n + (n - v) % n].conj();
            let want = (g[u * n + v] + flip) / 2.0;
            assert_eq!(out[u * n + v], want);
        }
    }
    let mut buf = out.clone();
    fft::fft2_inplace(&mut buf, n, n, true);
    assert!(buf.iter().all(|z| z.im.abs() < 1e-10));
    // Centered layout: symmetrizing then recentering agrees.
    let centered = fft::fftshift(&out, n, n);
    let again = hermitian_symmetrize(&centered, n, n);
    for (a, b) in again.iter().zip(&centered) {
        assert!((a - b).norm() < 1e-15);
    }
}
