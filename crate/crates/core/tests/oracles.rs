mod common;

use balfusion::datagen::{corrupt_missing, generate, SyntheticSpec};
use balfusion::fusion::{fusion_forward, ModalityMask};
use balfusion::modulation::{
    apply_opm_mask, estimate_grad_variance, modulated_update, per_sample_encoder_grads,
    NoiseInjector, TensorList,
};
use balfusion::nn::{Activation, MlpParams, Tensors};
use balfusion::optim::{sgd_momentum_step, OptimizerState};
use balfusion::fusion::{fusion_backward, FusionModel, ModelConfig, MultimodalBatch};
use balfusion::nn::softmax_cross_entropy;
use balfusion::Matrix;
use common::replay_mask;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn spec() -> SyntheticSpec {
    SyntheticSpec {
        classes: 3,
        dims: vec![4, 2, 3],
        separation: vec![2.0, 1.0, 0.0],
        noise_std: vec![1.0, 0.5, 1.0],
        n_train: 40,
        n_test: 10,
        seed: 9,
    }
}

#[test]
fn opm_mask_replays_the_documented_stream() {
    let q = [0.5, 0.5, 0.2];
    let mask = apply_opm_mask(&q, 50, &mut ChaCha8Rng::seed_from_u64(77));
    let expected = replay_mask(&q, 50, 77);
    for (i, row) in expected.iter().enumerate() {
        for (m, &d) in row.iter().enumerate() {
            assert_eq!(mask.is_dropped(i, m), d, "cell ({i}, {m})");
        }
    }
    assert!(mask.dropped_count(0) > 0 && mask.dropped_count(0) < 50);
}

#[test]
fn corruption_replays_the_documented_stream() {
    let ds = generate(&spec()).unwrap();
    let probs = [0.5, 0.5, 0.5];
    let out = corrupt_missing(&ds.train, &probs, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
    let expected = replay_mask(&probs, ds.train.len(), 3);
    for (i, row) in expected.iter().enumerate() {
        for (m, &dropped) in row.iter().enumerate() {
            let got = out.inputs[m].row(i);
            if dropped {
                assert!(got.iter().all(|&v| v == 0.0));
            } else {
                assert_eq!(got, ds.train.inputs[m].row(i));
            }
        }
    }
}

#[test]
fn mask_draw_count_is_fixed() {
    // zero probabilities still consume one draw per cell
    let mut a = ChaCha8Rng::seed_from_u64(1);
    let mut b = ChaCha8Rng::seed_from_u64(1);
    let _ = ModalityMask::bernoulli(&[0.0, 0.0], 7, &mut a);
    let _ = ModalityMask::bernoulli(&[1.0, 0.3], 7, &mut b);
    assert_eq!(a.random::<u64>(), b.random::<u64>());
}

#[test]
fn noise_moments_and_scale() {
    let mut inj = NoiseInjector::new(
        TensorList(vec![vec![1.0, 4.0]]),
        ChaCha8Rng::seed_from_u64(2024),
    )
    .unwrap();
    let n = 100_000;
    let (mut s, mut ss) = ([0.0; 2], [0.0; 2]);
    for _ in 0..n {
        let h = inj.sample();
        for j in 0..2 {
            s[j] += h.0[0][j];
            ss[j] += h.0[0][j] * h.0[0][j];
        }
    }
    let nf = n as f64;
    let var = |j: usize| (ss[j] - s[j] * s[j] / nf) / (nf - 1.0);
    assert!((s[0] / nf).abs() < 0.02);
    assert!((0.97..=1.03).contains(&var(0)));
    let ratio = (var(1) / var(0)).sqrt();
    assert!((ratio - 2.0).abs() < 0.04, "std ratio {ratio}");
}

#[test]
fn variance_scales_quadratically() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let grads: Vec<TensorList> = (0..6)
        .map(|_| TensorList(vec![(0..5).map(|_| rng.random_range(-1.0..1.0)).collect()]))
        .collect();
    let scaled: Vec<TensorList> = grads
        .iter()
        .map(|g| TensorList(vec![g.0[0].iter().map(|v| 3.0 * v).collect()]))
        .collect();
    let a = estimate_grad_variance(&grads).unwrap();
    let b = estimate_grad_variance(&scaled).unwrap();
    for (x, y) in a.0[0].iter().zip(&b.0[0]) {
        assert!((9.0 * x - y).abs() < 1e-12 * y.abs().max(1.0));
    }
}

#[test]
fn per_sample_gradients_average_to_the_batch_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let model = FusionModel::init(&[3, 2], 3, &ModelConfig::two_layer(2, 4), &mut rng).unwrap();
    let batch = MultimodalBatch::new(
        vec![
            Matrix::from_vec(5, 3, (0..15).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap(),
            Matrix::from_vec(5, 2, (0..10).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap(),
        ],
        vec![0, 1, 2, 1, 0],
    )
    .unwrap();
    let trace = fusion_forward(&model, &batch, None).unwrap();
    let (_, d) = softmax_cross_entropy(&trace.logits, &batch.labels).unwrap();
    let grads = fusion_backward(&model, &trace, &d).unwrap();
    for m in 0..2 {
        let per = per_sample_encoder_grads(&model, &trace, &grads, m).unwrap();
        let batch_g = grads.encoders[m].tensors();
        for (t, bt) in batch_g.iter().enumerate() {
            for (j, &bv) in bt.iter().enumerate() {
                let mean = per.iter().map(|g| g.tensors()[t][j]).sum::<f64>() / 5.0;
                assert!((mean - bv).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn identical_samples_give_exactly_zero_noise() {
    let row = vec![0.1, 0.7, -0.3];
    let x = Matrix::from_rows(&[row.clone(), row.clone(), row.clone()]).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let model = FusionModel::init(&[3], 2, &ModelConfig::two_layer(1, 3), &mut rng).unwrap();
    let batch = MultimodalBatch::new(vec![x], vec![1, 1, 1]).unwrap();
    let trace = fusion_forward(&model, &batch, None).unwrap();
    let (_, d) = softmax_cross_entropy(&trace.logits, &batch.labels).unwrap();
    let grads = fusion_backward(&model, &trace, &d).unwrap();
    let per = per_sample_encoder_grads(&model, &trace, &grads, 0).unwrap();
    let var = estimate_grad_variance(&per).unwrap();
    let mut inj = NoiseInjector::new(var, ChaCha8Rng::seed_from_u64(5)).unwrap();
    for _ in 0..10 {
        assert!(inj.sample().0.iter().flatten().all(|&h| h == 0.0));
    }
}

fn toy_encoder() -> MlpParams {
    MlpParams::init(&[2, 3], Activation::Identity, Activation::Identity, &mut ChaCha8Rng::seed_from_u64(0)).unwrap()
}

fn toy_grads(p: &MlpParams) -> TensorList {
    TensorList(p.tensor_lens().iter().map(|&n| (0..n).map(|i| 0.5 - i as f64 * 0.1).collect()).collect())
}

#[test]
fn half_coefficient_halves_the_step() {
    let start = toy_encoder();
    let g = balfusion::nn::MlpGrads::zeros_like(&start);
    let mut g = g;
    for (t, src) in g.tensors_mut().into_iter().zip(toy_grads(&start).0) {
        t.copy_from_slice(&src);
    }
    let mut full = start.clone();
    let mut half = start.clone();
    let mut o1 = OptimizerState::new(&full, 0.1, 0.0).unwrap();
    let mut o2 = OptimizerState::new(&half, 0.1, 0.0).unwrap();
    modulated_update(&mut full, &g, 1.0, None, &mut o1).unwrap();
    modulated_update(&mut half, &g, 0.5, None, &mut o2).unwrap();
    for ((s, f), h) in start.tensors().iter().zip(full.tensors()).zip(half.tensors()) {
        for ((s, f), h) in s.iter().zip(f).zip(h) {
            assert!(((s - h) - 0.5 * (s - f)).abs() < 1e-15);
        }
    }
}

#[test]
fn unit_coefficient_without_noise_is_the_plain_step() {
    let start = toy_encoder();
    let mut g = balfusion::nn::MlpGrads::zeros_like(&start);
    for (t, src) in g.tensors_mut().into_iter().zip(toy_grads(&start).0) {
        t.copy_from_slice(&src);
    }
    let (mut a, mut b) = (start.clone(), start.clone());
    let mut oa = OptimizerState::new(&a, 0.05, 0.9).unwrap();
    let mut ob = OptimizerState::new(&b, 0.05, 0.9).unwrap();
    for _ in 0..3 {
        modulated_update(&mut a, &g, 1.0, None, &mut oa).unwrap();
        sgd_momentum_step(&mut b, &g, &mut ob, 1.0).unwrap();
    }
    assert_eq!(a, b);
    assert_eq!(oa, ob);
}

#[test]
fn zero_coefficient_only_decays_momentum() {
    let start = toy_encoder();
    let mut g = balfusion::nn::MlpGrads::zeros_like(&start);
    for (t, src) in g.tensors_mut().into_iter().zip(toy_grads(&start).0) {
        t.copy_from_slice(&src);
    }
    let mut p = start.clone();
    let mut opt = OptimizerState::new(&p, 0.1, 0.9).unwrap();
    modulated_update(&mut p, &g, 1.0, None, &mut opt).unwrap();
    let v1 = opt.velocity.clone();
    let after_one = p.clone();
    modulated_update(&mut p, &g, 0.0, None, &mut opt).unwrap();
    for (v, v1) in opt.velocity.iter().zip(&v1) {
        for (a, b) in v.iter().zip(v1) {
            assert!((a - 0.9 * b).abs() < 1e-15);
        }
    }
    for ((p, q), v) in p.tensors().iter().zip(after_one.tensors()).zip(&opt.velocity) {
        for ((p, q), v) in p.iter().zip(q).zip(v) {
            assert!((p - (q - 0.1 * v)).abs() < 1e-15);
        }
    }
}
