//! Fixtures and independent reference implementations shared by the
//! integration tests.
#![allow(dead_code)]

use balfusion::fusion::{
    fusion_backward, fusion_forward, fusion_loss, Fusion, FusionModel, HeadKind, ModalityMask,
    ModelConfig, MultimodalBatch,
};
use balfusion::gradcheck::{finite_difference_grad, max_relative_error};
use balfusion::nn::{mlp_forward, softmax_cross_entropy, Activation, Tensors};
use balfusion::Matrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const FD_EPS: f64 = 1e-5;
pub const GRAD_TOL: f64 = 1e-4;
/// Fixtures whose relu pre-activations come closer than this to the kink are
/// redrawn: finite differences are meaningless across a kink.
pub const KINK_MARGIN: f64 = 1e-3;

pub struct GradFixture {
    pub model: FusionModel,
    pub batch: MultimodalBatch,
    pub mask: Option<ModalityMask>,
}

fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Matrix {
    let data = (0..rows * cols).map(|_| rng.random_range(-1.5..1.5)).collect();
    Matrix::from_vec(rows, cols, data).unwrap()
}

fn near_kink(model: &FusionModel, batch: &MultimodalBatch, mask: Option<&ModalityMask>) -> bool {
    let trace = fusion_forward(model, batch, mask).unwrap();
    let caches = trace.encoder_caches.iter().chain(std::iter::once(&trace.head_cache));
    let params = model.encoders.iter().chain(std::iter::once(&model.head));
    caches.zip(params).any(|(c, p)| {
        c.pre_activations.iter().zip(&p.layers).any(|(z, l)| {
            l.activation == Activation::Relu && z.as_slice().iter().any(|v| v.abs() < KINK_MARGIN)
        })
    })
}

/// A random model (M modalities, every width ≤ 8) with random biases, a
/// random batch and, when `masked`, a random dropout mask.
pub fn grad_fixture(seed: u64, modalities: usize, masked: bool) -> GradFixture {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    loop {
        let fusion = if modalities > 1 && rng.random_bool(0.3) {
            Fusion::Summation
        } else {
            Fusion::Concatenation
        };
        let feature = rng.random_range(1..=8);
        let encoder_layers: Vec<Vec<usize>> = (0..modalities)
            .map(|_| {
                let out = if fusion == Fusion::Summation { feature } else { rng.random_range(1..=8) };
                if rng.random_bool(0.5) {
                    vec![rng.random_range(1..=8), out]
                } else {
                    vec![out]
                }
            })
            .collect();
        let multi = rng.random_bool(0.4);
        let cfg = ModelConfig {
            encoder_layers,
            fusion,
            head: if multi { HeadKind::MultiLayer } else { HeadKind::SingleLinear },
            head_hidden: if multi { vec![rng.random_range(1..=8)] } else { Vec::new() },
            feature_activation: if rng.random_bool(0.5) { Activation::Relu } else { Activation::Identity },
        };
        let dims: Vec<usize> = (0..modalities).map(|_| rng.random_range(1..=8)).collect();
        let classes = rng.random_range(2..=5);
        let mut model = FusionModel::init(&dims, classes, &cfg, &mut rng).unwrap();
        for e in model.encoders.iter_mut().chain(std::iter::once(&mut model.head)) {
            for t in e.tensors_mut() {
                for v in t.iter_mut() {
                    *v += rng.random_range(-0.3..0.3);
                }
            }
        }
        let n = rng.random_range(1..=6);
        let batch = MultimodalBatch::new(
            dims.iter().map(|&d| random_matrix(&mut rng, n, d)).collect(),
            (0..n).map(|_| rng.random_range(0..classes)).collect(),
        )
        .unwrap();
        let mask = masked.then(|| {
            let mut mask = ModalityMask::bernoulli(&vec![0.4; modalities], n, &mut rng);
            // keep at least one live cell so the mask has an effect to check
            if (0..modalities).all(|m| mask.dropped_count(m) == n) {
                mask.set(0, 0, false);
            }
            mask
        });
        if !near_kink(&model, &batch, mask.as_ref()) {
            return GradFixture { model, batch, mask };
        }
    }
}

/// Largest relative error between analytic and central-difference gradients
/// over every encoder and the head.
pub fn fixture_grad_error(f: &GradFixture) -> f64 {
    let trace = fusion_forward(&f.model, &f.batch, f.mask.as_ref()).unwrap();
    let (_, dlogits) = softmax_cross_entropy(&trace.logits, &f.batch.labels).unwrap();
    let grads = fusion_backward(&f.model, &trace, &dlogits).unwrap();
    let mut worst: f64 = 0.0;
    for m in 0..f.model.modalities() {
        let fd = finite_difference_grad(
            |p| {
                let mut model = f.model.clone();
                model.encoders[m] = p.clone();
                fusion_loss(&model, &f.batch, f.mask.as_ref()).unwrap()
            },
            &f.model.encoders[m],
            FD_EPS,
        );
        worst = worst.max(max_relative_error(&grads.encoders[m].tensors(), &fd));
    }
    let fd = finite_difference_grad(
        |p| {
            let mut model = f.model.clone();
            model.head = p.clone();
            fusion_loss(&model, &f.batch, f.mask.as_ref()).unwrap()
        },
        &f.model.head,
        FD_EPS,
    );
    worst.max(max_relative_error(&grads.head.tensors(), &fd))
}

/// Straight-line evaluation of an MLP, one scalar at a time.
pub fn naive_mlp(params: &balfusion::nn::MlpParams, x: &[f64]) -> Vec<f64> {
    let mut h = x.to_vec();
    for l in &params.layers {
        let mut out = vec![0.0; l.out_dim()];
        for (o, v) in out.iter_mut().enumerate() {
            let mut acc = l.bias[o];
            for (j, xj) in h.iter().enumerate() {
                acc += l.weight[(o, j)] * xj;
            }
            *v = match l.activation {
                Activation::Identity => acc,
                Activation::Relu => acc.max(0.0),
            };
        }
        h = out;
    }
    h
}

/// Features of a batch through `mlp_forward`, for comparison with [`naive_mlp`].
pub fn forward_rows(params: &balfusion::nn::MlpParams, x: &Matrix) -> Matrix {
    mlp_forward(params, x).unwrap().0
}

/// AP by enumerating every distinct score as a threshold, evaluating
/// precision and recall of `{score ≥ t}` from scratch at each one.
pub fn brute_force_ap(scores: &[f64], positive: &[bool]) -> Option<f64> {
    let total = positive.iter().filter(|&&p| p).count();
    if total == 0 {
        return None;
    }
    let mut thresholds: Vec<f64> = scores.to_vec();
    thresholds.sort_by(|a, b| b.partial_cmp(a).unwrap());
    thresholds.dedup();
    let mut prev_recall = 0.0;
    let mut ap = 0.0;
    for t in thresholds {
        let selected: Vec<usize> = (0..scores.len()).filter(|&i| scores[i] >= t).collect();
        let tp = selected.iter().filter(|&&i| positive[i]).count() as f64;
        let recall = tp / total as f64;
        let precision = tp / selected.len() as f64;
        ap += (recall - prev_recall) * precision;
        prev_recall = recall;
    }
    Some(ap)
}

/// Accuracy, mAP over classes with positives, and (binary only) F1 of class 1,
/// each computed directly from counts.
pub fn brute_force_metrics(scores: &Matrix, labels: &[usize]) -> (f64, f64, Option<f64>) {
    let n = labels.len();
    let c = scores.cols();
    let preds: Vec<usize> = (0..n)
        .map(|i| {
            let row = scores.row(i);
            let mut best = 0;
            for j in 1..c {
                if row[j] > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect();
    let acc = (0..n).filter(|&i| preds[i] == labels[i]).count() as f64 / n as f64;
    let aps: Vec<f64> = (0..c)
        .filter_map(|k| {
            let col: Vec<f64> = (0..n).map(|i| scores[(i, k)]).collect();
            let pos: Vec<bool> = labels.iter().map(|&y| y == k).collect();
            brute_force_ap(&col, &pos)
        })
        .collect();
    let map = aps.iter().sum::<f64>() / aps.len() as f64;
    let f1 = (c == 2).then(|| {
        let tp = (0..n).filter(|&i| preds[i] == 1 && labels[i] == 1).count() as f64;
        let fp = (0..n).filter(|&i| preds[i] == 1 && labels[i] != 1).count() as f64;
        let fnn = (0..n).filter(|&i| preds[i] != 1 && labels[i] == 1).count() as f64;
        if tp == 0.0 {
            0.0
        } else {
            let p = tp / (tp + fp);
            let r = tp / (tp + fnn);
            2.0 * p * r / (p + r)
        }
    });
    (acc, map, f1)
}

/// A metric fixture: `n` samples, `c` classes, scores drawn from a small set of
/// values so that ties are common; with `drop_class` that class never occurs.
pub fn metric_fixture(seed: u64, n: usize, c: usize, drop_class: Option<usize>) -> (Matrix, Vec<usize>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let levels = [0.0, 0.1, 0.25, 0.5, 0.75, 0.9];
    let data = (0..n * c).map(|_| levels[rng.random_range(0..levels.len())]).collect();
    let labels = (0..n)
        .map(|_| loop {
            let y = rng.random_range(0..c);
            if Some(y) != drop_class {
                break y;
            }
        })
        .collect();
    (Matrix::from_vec(n, c, data).unwrap(), labels)
}

/// Replays the documented dropout stream: sample-major, modality inner, one
/// uniform `f64` per cell, dropped iff `u < p`.
pub fn replay_mask(probs: &[f64], samples: usize, seed: u64) -> Vec<Vec<bool>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..samples)
        .map(|_| probs.iter().map(|&p| rng.random::<f64>() < p).collect())
        .collect()
}
