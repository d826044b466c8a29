use rand::Rng as _;

use super::*;
use crate::autodiff::Params;
use crate::error::Error;
use crate::data::{synth_dataset, Dataset, Split, SynthConfig, TextureSpec};
use crate::rng;
use crate::tensor::Tensor;

fn rand_images(n: usize, shape: [usize; 3], seed: u64) -> Tensor {
    let mut r = rng::rng(seed);
    Tensor::from_fn(&[n, shape[0], shape[1], shape[2]], |_| r.random::<f64>())
}

fn linear(family: Family, input: [usize; 3], hidden: usize) -> ModelSpec {
    ModelSpec::preset(family, input, 2, hidden, Activation::None)
}

#[test]
fn fc_on_cifar_shape_has_square_hidden_matrix() {
    let m = Model::build(&linear(Family::Fc, [3, 32, 32], 1), 0).unwrap();
    let slot = m.layers()[0].weight.unwrap();
    assert_eq!(m.params.get(slot).shape(), &[3072, 3072]);
    assert_eq!(m.param_count(), 3072 * 3072 + 3072 * 2);
}

#[test]
fn full_width_bounded_conv_equals_full_width_conv() {
    for hidden in [1, 3] {
        let a = Model::build(&linear(Family::Bwc { k: 8 }, [1, 8, 8], hidden), 4).unwrap();
        let b = Model::build(&linear(Family::Fwc, [1, 8, 8], hidden), 4).unwrap();
        assert_eq!(a.param_count(), b.param_count());
        assert_eq!(a.params, b.params);
        let x = rand_images(3, [1, 8, 8], 1);
        assert_eq!(a.logits(&x).unwrap(), b.logits(&x).unwrap());
        let y = Tensor::from_vec(vec![0.0, 1.0, 1.0]);
        assert_eq!(a.loss_and_grad(&x, &y).unwrap().1, b.loss_and_grad(&x, &y).unwrap().1);
    }
}

#[test]
fn tied_locally_connected_equals_bounded_conv() {
    let lc = Model::build(&linear(Family::Lc { k: 3 }, [2, 6, 6], 1), 2).unwrap();
    let conv = Model::build(&linear(Family::Bwc { k: 3 }, [2, 6, 6], 1), 3).unwrap();
    let kernel = conv.params.get(conv.layers()[0].weight.unwrap()).clone(); // [2, 2, 3, 3]
    let mut tied = lc.params.clone();
    let w = tied.get_mut(lc.layers()[0].weight.unwrap());
    let per = kernel.numel();
    for pos in 0..36 {
        w.data_mut()[pos * per..(pos + 1) * per].copy_from_slice(kernel.data());
    }
    let head = conv.layers()[1].weight.unwrap();
    *tied.get_mut(lc.layers()[1].weight.unwrap()) = conv.params.get(head).clone();
    let lc = lc.with_params(tied).unwrap();
    let x = rand_images(2, [2, 6, 6], 5);
    assert!(lc.logits(&x).unwrap().max_abs_diff(&conv.logits(&x).unwrap()) < 1e-12);
}

#[test]
fn seeded_builds_are_identical() {
    let spec = linear(Family::Lc { k: 3 }, [1, 8, 8], 3);
    assert_eq!(Model::build(&spec, 9).unwrap().params, Model::build(&spec, 9).unwrap().params);
    assert_ne!(Model::build(&spec, 9).unwrap().params, Model::build(&spec, 10).unwrap().params);
}

#[test]
fn oversized_kernels_and_bad_heads_are_rejected() {
    for fam in [Family::Bwc { k: 9 }, Family::Lc { k: 9 }] {
        assert!(matches!(Model::build(&linear(fam, [1, 8, 8], 1), 0), Err(Error::InvalidSpec(_))));
    }
    let mut spec = linear(Family::Fc, [1, 4, 4], 1);
    spec.layers.pop();
    assert!(Model::build(&spec, 0).is_err());
    assert!(Model::build(&ModelSpec::mini_vit([1, 8, 8], 2, 3, true), 0).is_err());
}

#[test]
fn spec_json_round_trip() {
    for spec in [
        linear(Family::Bwc { k: 3 }, [1, 8, 8], 3),
        ModelSpec::preset(Family::Lc { k: 5 }, [3, 8, 8], 10, 1, Activation::Relu),
        ModelSpec::mini_vit([1, 8, 8], 4, 2, false),
    ] {
        let s = serde_json::to_string(&spec).unwrap();
        assert_eq!(serde_json::from_str::<ModelSpec>(&s).unwrap(), spec);
    }
}

#[test]
fn checkpoint_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let m = Model::build(&ModelSpec::mini_vit([1, 8, 8], 3, 4, false), 7).unwrap();
    let stem = dir.path().join("vit");
    m.save(&stem).unwrap();
    let back = Model::load(&stem).unwrap();
    assert_eq!(back.spec, m.spec);
    assert_eq!(back.params, m.params);
}

fn two_blobs(n: usize, seed: u64) -> (Dataset, Dataset) {
    // Linearly separable: class determines the sign of a fixed direction.
    let mut r = rng::rng(seed);
    let dir: Vec<f64> = (0..16).map(|_| r.random_range(-1.0..1.0)).collect();
    let mut make = |count: usize| {
        let mut data = Vec::new();
        let mut labels = Vec::new();
        for i in 0..count {
            let y = i % 2;
            let s = if y == 1 { 0.15 } else { -0.15 };
            for d in &dir {
                data.push((0.5 + s * d + r.random_range(-0.05..0.05)).clamp(0.0, 1.0));
            }
            labels.push(y);
        }
        Dataset::new(Tensor::new(vec![count, 1, 4, 4], data).unwrap(), labels, 2, Split::Train, "blobs").unwrap()
    };
    (make(n), make(n))
}

/// Plain logistic regression on the flattened pixels.
fn logistic_oracle(train: &Dataset, test: &Dataset) -> f64 {
    let d = 16;
    let mut w = vec![0.0; d + 1];
    for _ in 0..500 {
        let mut g = vec![0.0; d + 1];
        for i in 0..train.len() {
            let x = train.image(i);
            let z: f64 = w[d] + x.data().iter().zip(&w).map(|(a, b)| a * b).sum::<f64>();
            let p = 1.0 / (1.0 + (-z).exp());
            let e = p - train.labels[i] as f64;
            for j in 0..d {
                g[j] += e * x.data()[j];
            }
            g[d] += e;
        }
        for j in 0..=d {
            w[j] -= 1.0 * g[j] / train.len() as f64;
        }
    }
    let correct = (0..test.len())
        .filter(|&i| {
            let x = test.image(i);
            let z: f64 = w[d] + x.data().iter().zip(&w).map(|(a, b)| a * b).sum::<f64>();
            usize::from(z > 0.0) == test.labels[i]
        })
        .count();
    correct as f64 / test.len() as f64
}

#[test]
fn linear_fc_learns_separable_data() {
    let (train_d, test_d) = two_blobs(200, 11);
    assert!(logistic_oracle(&train_d, &test_d) >= 0.99);
    let m = Model::build(&linear(Family::Fc, [1, 4, 4], 1), 12).unwrap();
    let cfg = TrainConfig {
        lr: 0.5,
        batch_size: 20,
        epochs: 10,
        decay: 0.9,
        reset_period: 20,
        seed: 1,
        stop_at_accuracy: None,
        clip_norm: None,
    };
    let t = train(&m, &train_d, Some(&test_d), &cfg).unwrap();
    assert!(t.best().accuracy(&test_d).unwrap() >= 0.95, "{:?}", t.history.last());
    assert_eq!(t.checkpoints.len(), 11);
    assert_eq!(t.history.len(), 11);
}

#[test]
fn zero_epochs_keep_initialization() {
    let (d, _) = two_blobs(10, 13);
    let m = Model::build(&linear(Family::Bwc { k: 3 }, [1, 4, 4], 1), 14).unwrap();
    let cfg = TrainConfig {
        lr: 0.1,
        batch_size: 4,
        epochs: 0,
        decay: 0.3,
        reset_period: 20,
        seed: 0,
        stop_at_accuracy: None,
        clip_norm: None,
    };
    let t = train(&m, &d, None, &cfg).unwrap();
    assert_eq!(t.checkpoints.len(), 1);
    assert_eq!(t.model.params, m.params);
    assert_eq!(t.best_epoch, 0);
}

#[test]
fn training_is_seed_deterministic() {
    let (d, test) = two_blobs(40, 15);
    let m = Model::build(&ModelSpec::preset(Family::Lc { k: 3 }, [1, 4, 4], 2, 1, Activation::Relu), 16).unwrap();
    let cfg = TrainConfig {
        lr: 0.1,
        batch_size: 8,
        epochs: 3,
        decay: 0.3,
        reset_period: 20,
        seed: 4,
        stop_at_accuracy: None,
        clip_norm: None,
    };
    let a = train(&m, &d, Some(&test), &cfg).unwrap();
    let b = train(&m, &d, Some(&test), &cfg).unwrap();
    assert_eq!(a.history, b.history);
    assert_eq!(a.model.params, b.model.params);
}

#[test]
fn divergence_reports_epoch() {
    let (d, _) = two_blobs(20, 17);
    let m = Model::build(&linear(Family::Fc, [1, 4, 4], 3), 18).unwrap();
    let cfg = TrainConfig {
        lr: 1e6,
        batch_size: 4,
        epochs: 5,
        decay: 1.0,
        reset_period: 20,
        seed: 0,
        stop_at_accuracy: None,
        clip_norm: None,
    };
    match train(&m, &d, None, &cfg) {
        Err(Error::Diverged { epoch, .. }) => assert!((1..=5).contains(&epoch)),
        other => panic!("expected divergence, got {:?}", other.map(|t| t.history)),
    }
}

#[test]
fn schedule_decays_and_resets() {
    let cfg = TrainConfig {
        lr: 1.0,
        batch_size: 1,
        epochs: 0,
        decay: 0.3,
        reset_period: 20,
        seed: 0,
        stop_at_accuracy: None,
        clip_norm: None,
    };
    assert_eq!(cfg.lr_at(0), 1.0);
    assert!((cfg.lr_at(2) - 0.09).abs() < 1e-15);
    assert_eq!(cfg.lr_at(20), 1.0);
}

#[test]
fn zero_model_accuracy_is_tie_break_prior() {
    let mut spec = linear(Family::Fc, [1, 4, 4], 1);
    spec.init_scale = 0.0;
    let m = Model::build(&spec, 0).unwrap();
    let x = rand_images(6, [1, 4, 4], 19);
    for (label, want) in [(0, 1.0), (1, 0.0)] {
        let d = Dataset::new(x.clone(), vec![label; 6], 2, Split::Test, "one").unwrap();
        assert_eq!(m.accuracy(&d).unwrap(), want);
    }
}

#[test]
fn memorizer_reaches_full_train_accuracy() {
    let x = rand_images(8, [1, 4, 4], 20);
    let d = Dataset::new(x, (0..8).map(|i| i % 4).collect(), 4, Split::Train, "mem").unwrap();
    let m = Model::build(&ModelSpec::preset(Family::Fc, [1, 4, 4], 4, 1, Activation::None), 21).unwrap();
    let cfg = TrainConfig {
        lr: 0.5,
        batch_size: 8,
        epochs: 300,
        decay: 1.0,
        reset_period: 20,
        seed: 0,
        stop_at_accuracy: Some(1.0),
        clip_norm: None,
    };
    let t = train(&m, &d, None, &cfg).unwrap();
    assert_eq!(t.best().accuracy(&d).unwrap(), 1.0);
}

#[test]
fn random_models_are_at_chance() {
    let n = 1000;
    let x = rand_images(n, [1, 8, 8], 22);
    let d = Dataset::new(x, (0..n).map(|i| i % 10).collect(), 10, Split::Test, "noise").unwrap();
    let accs: Vec<f64> = (0..5)
        .map(|s| {
            let spec = ModelSpec::preset(Family::Bwc { k: 3 }, [1, 8, 8], 10, 1, Activation::Relu);
            Model::build(&spec, 100 + s).unwrap().accuracy(&d).unwrap()
        })
        .collect();
    let mean = accs.iter().sum::<f64>() / 5.0;
    assert!((mean - 0.1).abs() <= 0.03, "{accs:?}");
}

#[test]
fn single_patch_embedding_is_a_dense_layer() {
    let spec = ModelSpec::mini_vit([2, 4, 4], 3, 4, true);
    let m = Model::build(&spec, 23).unwrap();
    let mut p = m.params.clone();
    for slot in 0..p.len() {
        let name = m.graph().param_name(slot);
        if name == "l0.pos" || name == "l0.b" {
            *p.get_mut(slot) = Tensor::zeros(m.graph().param_shape(slot));
        }
    }
    let m = m.with_params(p).unwrap();
    let x = rand_images(3, [2, 4, 4], 24);
    let tokens = m.layer_output(&x, 0).unwrap();
    assert_eq!(tokens.shape(), &[3, 1, 64]);
    let w = m.params.get(m.layers()[0].weight.unwrap());
    for b in 0..3 {
        for j in 0..64 {
            let want: f64 = (0..32).map(|i| x.data()[b * 32 + i] * w.data()[i * 64 + j]).sum();
            assert!((tokens.data()[b * 64 + j] - want).abs() < 1e-12);
        }
    }
}

#[test]
fn untied_patch_embedding_with_tied_weights_matches_shared() {
    let shared = Model::build(&ModelSpec::mini_vit([1, 8, 8], 3, 4, true), 25).unwrap();
    let local = Model::build(&ModelSpec::mini_vit([1, 8, 8], 3, 4, false), 26).unwrap();
    let g = local.graph();
    let mut p = Params::zeros_like(g);
    for slot in 0..g.param_count() {
        let src = (0..shared.graph().param_count())
            .find(|&s| shared.graph().param_name(s) == g.param_name(slot))
            .unwrap();
        let v = shared.params.get(src);
        *p.get_mut(slot) = if v.shape() == g.param_shape(slot) {
            v.clone()
        } else {
            // Repeat the shared patch weights (or bias) for each of the 4 tokens.
            let rep: Vec<f64> = (0..4).flat_map(|_| v.data().iter().copied()).collect();
            Tensor::new(g.param_shape(slot).to_vec(), rep).unwrap()
        };
    }
    let local = local.with_params(p).unwrap();
    let x = rand_images(2, [1, 8, 8], 27);
    assert!(local.logits(&x).unwrap().max_abs_diff(&shared.logits(&x).unwrap()) < 1e-12);
}

#[test]
fn vit_patch_sizes_build_on_32x32() {
    let x = rand_images(2, [3, 32, 32], 28);
    for p in [2, 4, 8] {
        for shared in [true, false] {
            let m = Model::build(&ModelSpec::mini_vit([3, 32, 32], 10, p, shared), 29).unwrap();
            let z = m.logits(&x).unwrap();
            assert_eq!(z.shape(), &[2, 10]);
            assert!(z.all_finite());
        }
    }
}

#[test]
fn vit_trains_above_chance() {
    let tex = |lo: f64, hi: f64| TextureSpec {
        alpha: 0.0,
        band: Some((lo, hi)),
        amplitude: 0.15,
    };
    let cfg = SynthConfig {
        size: 8,
        channels: 1,
        classes: 2,
        train_per_class: 40,
        test_per_class: 40,
        textures: vec![tex(0.0, 0.5), tex(0.5, 1.0)],
        noise: TextureSpec {
            alpha: 1.0,
            band: None,
            amplitude: 0.05,
        },
        mean: 0.5,
    };
    let (train_d, test_d) = synth_dataset(&cfg, 30).unwrap();
    for shared in [true, false] {
        let m = Model::build(&ModelSpec::mini_vit([1, 8, 8], 2, 2, shared), 31).unwrap();
        let tc = TrainConfig {
            lr: 0.1,
            batch_size: 16,
            epochs: 25,
            decay: 0.95,
            reset_period: 20,
            seed: 2,
            stop_at_accuracy: Some(0.9),
            clip_norm: Some(1.0),
        };
        let t = train(&m, &train_d, Some(&test_d), &tc).unwrap();
        let acc = t.history[t.best_epoch].test_accuracy;
        assert!(acc > 0.7, "shared={shared}: {:?}", t.history);
    }
}
