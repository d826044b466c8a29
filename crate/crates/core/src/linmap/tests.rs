use rand::Rng as _;

use super::*;
use crate::data::Split;
use crate::models::{Family, ModelSpec};

fn rand_tensor(shape: &[usize], seed: u64) -> Tensor {
    let mut r = rng::rng(seed);
    Tensor::from_fn(shape, |_| r.random_range(-1.0..1.0))
}

/// Textbook circular convolution, `y[i, j] = sum_{a, b} k[a, b] x[i - a + c, j - b + c]`.
fn direct_conv(k: &[f64], ks: usize, x: &[f64], n: usize) -> Vec<f64> {
    let c = (ks / 2) as isize;
    let mut y = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            for a in 0..ks {
                for b in 0..ks {
                    let si = (i as isize - a as isize + c).rem_euclid(n as isize) as usize;
                    let sj = (j as isize - b as isize + c).rem_euclid(n as isize) as usize;
                    y[i * n + j] += k[a * ks + b] * x[si * n + sj];
                }
            }
        }
    }
    y
}

fn with_weights(spec: &ModelSpec, seed: u64) -> Model {
    let m = Model::build(spec, seed).unwrap();
    let mut p = m.params.clone();
    for (slot, t) in p.0.iter_mut().enumerate() {
        *t = rand_tensor(m.graph().param_shape(slot), seed * 31 + slot as u64);
    }
    m.with_params(p).unwrap()
}

#[test]
fn centered_delta_kernel_is_identity() {
    let mut k = Tensor::zeros(&[1, 1, 3, 3]);
    k.data_mut()[4] = 1.0;
    let m = conv_matrix(&k, 4, 4, Padding::Circular).unwrap();
    for r in 0..16 {
        for c in 0..16 {
            assert_eq!(m.data()[r * 16 + c], f64::from(r == c));
        }
    }
}

#[test]
fn shifted_delta_kernel_is_a_circular_permutation() {
    // Tap (a, b) = (2, 1) reads x[i - 1, j].
    let mut k = Tensor::zeros(&[1, 1, 3, 3]);
    k.data_mut()[2 * 3 + 1] = 1.0;
    let n = 4;
    let m = conv_matrix(&k, n, n, Padding::Circular).unwrap();
    for i in 0..n {
        for j in 0..n {
            let row = &m.data()[(i * n + j) * 16..(i * n + j + 1) * 16];
            let src = ((i + n - 1) % n) * n + j;
            assert!(row.iter().enumerate().all(|(c, &v)| v == f64::from(c == src)));
        }
    }
}

#[test]
fn conv_matrix_matches_direct_convolution() {
    let k = rand_tensor(&[1, 1, 3, 3], 1);
    let x = rand_tensor(&[64], 2);
    let m = conv_matrix(&k, 8, 8, Padding::Circular).unwrap();
    let map = LinearMap { matrix: m, first: 0, last: 0 };
    let want = direct_conv(k.data(), 3, x.data(), 8);
    let got = map.apply(x.data());
    let err = got.iter().zip(&want).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    assert!(err < 1e-10, "{err}");
}

#[test]
fn averaging_conv_rows_sum_to_one_and_channels_are_block_circulant() {
    let k = Tensor::full(&[1, 1, 3, 3], 1.0 / 9.0);
    let m = conv_matrix(&k, 6, 6, Padding::Circular).unwrap();
    for row in m.data().chunks(36) {
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
    let k = rand_tensor(&[2, 3, 3, 3], 3);
    let m = conv_matrix(&k, 4, 4, Padding::Circular).unwrap();
    assert_eq!(m.shape(), &[32, 48]);
    for co in 0..2 {
        for ci in 0..3 {
            let single = Tensor::from_fn(&[1, 1, 3, 3], |i| k.data()[(co * 3 + ci) * 9 + i]);
            let block = conv_matrix(&single, 4, 4, Padding::Circular).unwrap();
            for r in 0..16 {
                for c in 0..16 {
                    assert_eq!(m.data()[(co * 16 + r) * 48 + ci * 16 + c], block.data()[r * 16 + c]);
                }
            }
        }
    }
}

#[test]
fn single_dense_layer_is_its_weight_matrix() {
    let spec = ModelSpec::preset(Family::Fc, [1, 2, 2], 3, 0, Activation::None);
    let m = with_weights(&spec, 4);
    let beta = end_to_end_beta(&m, 1).unwrap();
    let w = m.params.get(0); // [4, 3]
    for r in 0..3 {
        for c in 0..4 {
            assert_eq!(beta.matrix.data()[r * 4 + c], w.data()[c * 3 + r]);
        }
    }
}

#[test]
fn two_convs_compose_to_the_convolved_kernel() {
    let spec = ModelSpec::preset(Family::Bwc { k: 3 }, [1, 8, 8], 2, 2, Activation::None);
    let m = with_weights(&spec, 5);
    let (k1, k2) = (m.params.get(0).data().to_vec(), m.params.get(1).data().to_vec());
    let mut k = Tensor::zeros(&[1, 1, 5, 5]);
    for a1 in 0..3 {
        for b1 in 0..3 {
            for a2 in 0..3 {
                for b2 in 0..3 {
                    k.data_mut()[(a1 + a2) * 5 + b1 + b2] += k1[a1 * 3 + b1] * k2[a2 * 3 + b2];
                }
            }
        }
    }
    let want = conv_matrix(&k, 8, 8, Padding::Circular).unwrap();
    let beta = end_to_end_beta(&m, 2).unwrap();
    assert!(beta.matrix.max_abs_diff(&want) < 1e-9);
}

#[test]
fn beta_matches_forward_on_basis_vectors() {
    for fam in [Family::Fc, Family::Lc { k: 3 }, Family::Fwc, Family::Bwc { k: 3 }] {
        for hidden in [1, 3] {
            let spec = ModelSpec::preset(fam, [1, 8, 8], 3, hidden, Activation::None);
            let m = Model::build(&spec, 6).unwrap();
            for upto in 1..=hidden + 1 {
                let err = verify_on_basis(&m, upto).unwrap();
                assert!(err < 1e-9, "{} upto {upto}: {err}", spec.name);
            }
            // And against the full model's logits (no biases in these presets).
            let beta = end_to_end_beta(&m, hidden + 1).unwrap();
            let x = rand_tensor(&[1, 1, 8, 8], 7);
            let z = m.logits(&x).unwrap();
            let want = beta.apply(x.data());
            assert!(z.data().iter().zip(&want).all(|(a, b)| (a - b).abs() < 1e-9));
        }
    }
}

#[test]
fn partial_products_are_associative() {
    let spec = ModelSpec::preset(Family::Lc { k: 3 }, [2, 4, 4], 2, 3, Activation::None);
    let m = Model::build(&spec, 8).unwrap();
    let betas = partial_betas(&m).unwrap();
    for l in 0..betas.len() - 1 {
        let step = layer_to_matrix(&m, l + 1).unwrap();
        let (r, k, c) = (step.shape()[0], step.shape()[1], betas[l].cols());
        let mut prod = Tensor::zeros(&[r, c]);
        gemm(r, k, c, step.data(), false, betas[l].matrix.data(), false, prod.data_mut(), false);
        assert!(prod.max_abs_diff(&betas[l + 1].matrix) < 1e-12);
    }
}

#[test]
fn layer_equivalence_probes() {
    let lc = with_weights(&ModelSpec::preset(Family::Lc { k: 3 }, [2, 6, 6], 2, 1, Activation::None), 9);
    assert!(verify_equivalence(&lc, 0, 5, 1).unwrap() < 1e-9);
    let bwc = with_weights(&ModelSpec::preset(Family::Bwc { k: 5 }, [3, 8, 8], 2, 1, Activation::None), 10);
    assert!(verify_equivalence(&bwc, 0, 5, 2).unwrap() < 1e-9);
    assert!(verify_equivalence(&bwc, 1, 5, 3).unwrap() < 1e-9);
    let mut zero_pad = ModelSpec::preset(Family::Bwc { k: 3 }, [1, 6, 6], 2, 1, Activation::None);
    zero_pad.padding = Padding::Zero;
    let zp = with_weights(&zero_pad, 11);
    assert!(verify_equivalence(&zp, 0, 5, 4).unwrap() < 1e-9);
    let fc = Model::build(&ModelSpec::preset(Family::Fc, [1, 2, 2], 2, 1, Activation::None), 0).unwrap();
    let mut p = fc.params.clone();
    *p.get_mut(0) = Tensor::from_fn(&[4, 4], |i| f64::from(i / 4 == i % 4));
    let fc = fc.with_params(p).unwrap();
    assert_eq!(verify_equivalence(&fc, 0, 3, 5).unwrap(), 0.0);
}

#[test]
fn nonlinear_models_are_refused() {
    let spec = ModelSpec::preset(Family::Bwc { k: 3 }, [1, 4, 4], 2, 1, Activation::Relu);
    let m = Model::build(&spec, 0).unwrap();
    assert!(matches!(end_to_end_beta(&m, 2), Err(Error::NonlinearLayer { layer: 0, .. })));
    let vit = Model::build(&ModelSpec::mini_vit([1, 4, 4], 2, 2, true), 0).unwrap();
    assert!(matches!(layer_to_matrix(&vit, 0), Err(Error::NonlinearLayer { .. })));
}

fn dataset(n: usize, shape: [usize; 3], classes: usize, seed: u64) -> Dataset {
    let mut r = rng::rng(seed);
    let x = Tensor::from_fn(&[n, shape[0], shape[1], shape[2]], |_| r.random::<f64>());
    Dataset::new(x, (0..n).map(|i| i % classes).collect(), classes, Split::Test, "t").unwrap()
}

#[test]
fn linear_saliency_is_the_predicted_beta_row() {
    let spec = ModelSpec::preset(Family::Bwc { k: 3 }, [1, 6, 6], 3, 3, Activation::None);
    let m = with_weights(&spec, 12);
    let d = dataset(5, [1, 6, 6], 3, 13);
    let beta = end_to_end_beta(&m, 4).unwrap();
    let s = saliency_beta(&m, &d, SaliencyTarget::TopLogit).unwrap();
    let pred = m.predict(&d.images).unwrap();
    for i in 0..5 {
        let g = &s.gradients.data()[i * 36..(i + 1) * 36];
        let row = beta.row(pred[i]);
        assert!(g.iter().zip(row).all(|(a, b)| (a - b).abs() < 1e-12));
    }
}

#[test]
fn relu_saliency_matches_finite_differences() {
    let spec = ModelSpec::preset(Family::Lc { k: 3 }, [1, 6, 6], 3, 1, Activation::Relu);
    let m = with_weights(&spec, 14);
    let d = dataset(1, [1, 6, 6], 3, 15);
    let s = saliency_beta(&m, &d, SaliencyTarget::TopLogit).unwrap();
    let top = m.predict(&d.images).unwrap()[0];
    let f = |x: &Tensor| m.logits(x).unwrap().data()[top];
    let mut r = rng::rng(16);
    for _ in 0..5 {
        let v = Tensor::from_fn(&[1, 1, 6, 6], |_| r.random_range(-1.0..1.0));
        let h = 1e-5;
        let plus = d.images.zip_map(&v, |a, b| a + h * b).unwrap();
        let minus = d.images.zip_map(&v, |a, b| a - h * b).unwrap();
        let fd = (f(&plus) - f(&minus)) / (2.0 * h);
        let an = s.gradients.dot(&v);
        assert!((fd - an).abs() / an.abs().max(1e-8) < 1e-4, "{fd} vs {an}");
    }
}

#[test]
fn zero_model_has_zero_saliency() {
    let mut spec = ModelSpec::preset(Family::Fc, [1, 4, 4], 2, 1, Activation::Relu);
    spec.init_scale = 0.0;
    let m = Model::build(&spec, 0).unwrap();
    let d = dataset(4, [1, 4, 4], 2, 17);
    for t in [SaliencyTarget::TopLogit, SaliencyTarget::Loss] {
        assert!(saliency_beta(&m, &d, t).unwrap().gradients.data().iter().all(|&v| v == 0.0));
    }
}

#[test]
fn loss_saliency_is_per_example() {
    let spec = ModelSpec::preset(Family::Fc, [1, 2, 2], 2, 0, Activation::None);
    let m = with_weights(&spec, 18);
    let d = dataset(6, [1, 2, 2], 2, 19);
    let all = saliency_beta(&m, &d, SaliencyTarget::Loss).unwrap();
    let one = saliency_beta(&m, &d.subset(&[3]), SaliencyTarget::Loss).unwrap();
    for j in 0..4 {
        assert!((all.gradients.data()[3 * 4 + j] - one.gradients.data()[j]).abs() < 1e-14);
    }
}

#[test]
fn linear_map_dumps_to_container() {
    let m = Model::build(&ModelSpec::preset(Family::Fwc, [1, 4, 4], 2, 1, Activation::None), 0).unwrap();
    let beta = end_to_end_beta(&m, 2).unwrap();
    let back = io::decode_tensors(&beta.to_bytes()).unwrap();
    assert_eq!(back[0].1, beta.matrix);
    assert_eq!(beta.row_images([1, 4, 4]).unwrap().len(), 2);
}
