//! Late-fusion multimodal classifier.
//!
//! Each modality `m` has its own encoder MLP producing features `φᵐ`. The
//! features are fused by concatenation or summation and fed to a head. With a
//! single linear head and concatenation the logits decompose exactly into
//! per-modality components:
//!
//! ```text
//! logits = W¹·φ¹ + W²·φ² + … + Wᴹ·φᴹ + b
//! ```
//!
//! where `Wᵐ` is the column block of `W` that multiplies `φᵐ`. Those components
//! are what the modulation strategies measure.
//!
//! Modality dropout acts on encoder *outputs*: a dropped `(sample, modality)`
//! cell contributes a zero feature row, and therefore receives no gradient.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::nn::{
    argmax, mlp_backward, mlp_forward, softmax_cross_entropy, Activation, MlpCache, MlpGrads,
    MlpParams, Tensors,
};
use crate::optim::{sgd_momentum_step, OptimizerState};
use crate::{Error, Matrix, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Fusion {
    Concatenation,
    Summation,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadKind {
    /// One identity layer `W·h + b`.
    SingleLinear,
    MultiLayer,
}

/// Shape of a fusion model, independent of the data dimensions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    /// Per modality: hidden widths followed by the feature width.
    pub encoder_layers: Vec<Vec<usize>>,
    #[serde(default = "default_fusion")]
    pub fusion: Fusion,
    #[serde(default = "default_head")]
    pub head: HeadKind,
    /// Hidden widths of a multi-layer head; ignored for a single linear head.
    #[serde(default)]
    pub head_hidden: Vec<usize>,
    #[serde(default = "default_feature_activation")]
    pub feature_activation: Activation,
}

fn default_fusion() -> Fusion {
    Fusion::Concatenation
}

fn default_head() -> HeadKind {
    HeadKind::SingleLinear
}

fn default_feature_activation() -> Activation {
    Activation::Relu
}

impl ModelConfig {
    /// Two-layer relu encoders (hidden 32) with `feature_dim` outputs for each
    /// of `modalities` encoders, concatenation, single linear head.
    pub fn two_layer(modalities: usize, feature_dim: usize) -> Self {
        Self {
            encoder_layers: vec![vec![32, feature_dim]; modalities],
            fusion: Fusion::Concatenation,
            head: HeadKind::SingleLinear,
            head_hidden: Vec::new(),
            feature_activation: Activation::Relu,
        }
    }
}

/// Per-modality inputs plus labels for one batch.
#[derive(Debug, Clone, PartialEq)]
pub struct MultimodalBatch {
    pub inputs: Vec<Matrix>,
    pub labels: Vec<usize>,
}

impl MultimodalBatch {
    pub fn new(inputs: Vec<Matrix>, labels: Vec<usize>) -> Result<Self> {
        if inputs.is_empty() {
            return Err(Error::config("a batch needs at least one modality"));
        }
        if let Some((m, x)) = inputs.iter().enumerate().find(|(_, x)| x.rows() != labels.len()) {
            return Err(Error::config(format!(
                "modality {m} has {} rows but there are {} labels",
                x.rows(),
                labels.len()
            )));
        }
        Ok(Self { inputs, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn modalities(&self) -> usize {
        self.inputs.len()
    }

    pub fn select(&self, idx: &[usize]) -> MultimodalBatch {
        MultimodalBatch {
            inputs: self.inputs.iter().map(|x| x.select_rows(idx)).collect(),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
        }
    }
}

/// Which `(sample, modality)` cells are dropped.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModalityMask {
    samples: usize,
    modalities: usize,
    dropped: Vec<bool>,
}

impl ModalityMask {
    pub fn none(samples: usize, modalities: usize) -> Self {
        Self {
            samples,
            modalities,
            dropped: vec![false; samples * modalities],
        }
    }

    /// Drops each `(sample, modality)` cell independently with probability
    /// `probs[m]`.
    ///
    /// RNG stream: samples in order, and within a sample modalities in order,
    /// one `f64` uniform in `[0, 1)` per cell; the cell is dropped iff
    /// `u < probs[m]`. Exactly `samples · M` draws are made whatever the
    /// probabilities are.
    pub fn bernoulli<R: rand::Rng + ?Sized>(probs: &[f64], samples: usize, rng: &mut R) -> Self {
        let mut mask = Self::none(samples, probs.len());
        for i in 0..samples {
            for (m, &p) in probs.iter().enumerate() {
                let u: f64 = rng.random();
                if u < p {
                    mask.set(i, m, true);
                }
            }
        }
        mask
    }

    /// Drops modality `m` for every sample.
    pub fn whole_modality(samples: usize, modalities: usize, m: usize) -> Self {
        let mut mask = Self::none(samples, modalities);
        for i in 0..samples {
            mask.set(i, m, true);
        }
        mask
    }

    #[inline]
    pub fn is_dropped(&self, sample: usize, modality: usize) -> bool {
        self.dropped[sample * self.modalities + modality]
    }

    #[inline]
    pub fn set(&mut self, sample: usize, modality: usize, dropped: bool) {
        self.dropped[sample * self.modalities + modality] = dropped;
    }

    pub fn samples(&self) -> usize {
        self.samples
    }

    pub fn modalities(&self) -> usize {
        self.modalities
    }

    pub fn dropped_count(&self, modality: usize) -> usize {
        (0..self.samples).filter(|&i| self.is_dropped(i, modality)).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.dropped.iter().any(|&d| d)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FusionModel {
    pub encoders: Vec<MlpParams>,
    pub fusion: Fusion,
    pub head_kind: HeadKind,
    pub head: MlpParams,
}

impl FusionModel {
    pub fn new(
        encoders: Vec<MlpParams>,
        fusion: Fusion,
        head_kind: HeadKind,
        head: MlpParams,
    ) -> Result<Self> {
        if encoders.is_empty() {
            return Err(Error::config("a fusion model needs at least one encoder"));
        }
        let dims: Vec<usize> = encoders.iter().map(|e| e.out_dim()).collect();
        let fused = match fusion {
            Fusion::Concatenation => dims.iter().sum(),
            Fusion::Summation => {
                if dims.iter().any(|&d| d != dims[0]) {
                    return Err(Error::config(format!(
                        "summation fusion needs equal feature widths, got {dims:?}"
                    )));
                }
                dims[0]
            }
        };
        if head.in_dim() != fused {
            return Err(Error::config(format!(
                "head expects {} inputs, fused features have {fused}",
                head.in_dim()
            )));
        }
        if head_kind == HeadKind::SingleLinear
            && (head.layers.len() != 1 || head.layers[0].activation != Activation::Identity)
        {
            return Err(Error::config("a single linear head must be one identity layer"));
        }
        Ok(Self {
            encoders,
            fusion,
            head_kind,
            head,
        })
    }

    /// Random initialisation; encoders first in modality order, then the head.
    pub fn init<R: rand::Rng + ?Sized>(
        input_dims: &[usize],
        classes: usize,
        cfg: &ModelConfig,
        rng: &mut R,
    ) -> Result<Self> {
        if cfg.encoder_layers.len() != input_dims.len() {
            return Err(Error::config(format!(
                "{} encoder specs for {} modalities",
                cfg.encoder_layers.len(),
                input_dims.len()
            )));
        }
        let mut encoders = Vec::with_capacity(input_dims.len());
        for (m, (&d_in, layers)) in input_dims.iter().zip(&cfg.encoder_layers).enumerate() {
            if layers.is_empty() {
                return Err(Error::config(format!("encoder {m} has no layers")));
            }
            let sizes: Vec<usize> = std::iter::once(d_in).chain(layers.iter().copied()).collect();
            encoders.push(MlpParams::init(
                &sizes,
                Activation::Relu,
                cfg.feature_activation,
                rng,
            )?);
        }
        let dims: Vec<usize> = encoders.iter().map(|e| e.out_dim()).collect();
        let fused = match cfg.fusion {
            Fusion::Concatenation => dims.iter().sum(),
            Fusion::Summation => dims[0],
        };
        let head_sizes: Vec<usize> = match cfg.head {
            HeadKind::SingleLinear => vec![fused, classes],
            HeadKind::MultiLayer => std::iter::once(fused)
                .chain(cfg.head_hidden.iter().copied())
                .chain(std::iter::once(classes))
                .collect(),
        };
        let head = MlpParams::init(&head_sizes, Activation::Relu, Activation::Identity, rng)?;
        Self::new(encoders, cfg.fusion, cfg.head, head)
    }

    pub fn modalities(&self) -> usize {
        self.encoders.len()
    }

    pub fn classes(&self) -> usize {
        self.head.out_dim()
    }

    pub fn feature_dims(&self) -> Vec<usize> {
        self.encoders.iter().map(|e| e.out_dim()).collect()
    }

    pub fn input_dims(&self) -> Vec<usize> {
        self.encoders.iter().map(|e| e.in_dim()).collect()
    }

    /// Column range of modality `m` in the head input.
    pub fn block(&self, m: usize) -> (usize, usize) {
        let dims = self.feature_dims();
        match self.fusion {
            Fusion::Concatenation => (dims[..m].iter().sum(), dims[m]),
            Fusion::Summation => (0, dims[m]),
        }
    }

    /// The block `Wᵐ` of a single linear head.
    pub fn head_block(&self, m: usize) -> Result<Matrix> {
        self.require_linear_head()?;
        let (start, width) = self.block(m);
        Ok(self.head.layers[0].weight.column_block(start, width))
    }

    fn require_linear_head(&self) -> Result<()> {
        match self.head_kind {
            HeadKind::SingleLinear => Ok(()),
            HeadKind::MultiLayer => Err(Error::config(
                "per-modality components need a single linear head; use zero_out_logits",
            )),
        }
    }

    fn check_batch(&self, batch: &MultimodalBatch) -> Result<()> {
        if batch.modalities() != self.modalities() {
            return Err(Error::config(format!(
                "batch has {} modalities, model has {}",
                batch.modalities(),
                self.modalities()
            )));
        }
        Ok(())
    }

    /// Fuses (already masked) features into the head input.
    fn fuse(&self, features: &[Matrix]) -> Matrix {
        match self.fusion {
            Fusion::Concatenation => Matrix::hstack(&features.iter().collect::<Vec<_>>()),
            Fusion::Summation => {
                let mut acc = features[0].clone();
                for f in &features[1..] {
                    acc.add_assign(f);
                }
                acc
            }
        }
    }

    /// Encoder outputs for every modality, no masking.
    pub fn encode(&self, batch: &MultimodalBatch) -> Result<Vec<Matrix>> {
        self.check_batch(batch)?;
        self.encoders
            .iter()
            .zip(&batch.inputs)
            .map(|(e, x)| mlp_forward(e, x).map(|(f, _)| f))
            .collect()
    }

    /// Class predictions (argmax, lowest index on ties) and logits.
    pub fn predict(&self, batch: &MultimodalBatch) -> Result<(Vec<usize>, Matrix)> {
        let trace = fusion_forward(self, batch, None)?;
        let preds = (0..trace.logits.rows())
            .map(|i| argmax(trace.logits.row(i)))
            .collect();
        Ok((preds, trace.logits))
    }
}

/// Everything [`fusion_backward`] needs plus the quantities the modulation
/// strategies inspect.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    /// Raw encoder outputs `φᵐ`, before masking.
    pub features: Vec<Matrix>,
    pub mask: Option<ModalityMask>,
    /// Head input after masking and fusion.
    pub fused: Matrix,
    pub logits: Matrix,
    pub encoder_caches: Vec<MlpCache>,
    pub head_cache: MlpCache,
}

impl ForwardTrace {
    pub fn batch_size(&self) -> usize {
        self.logits.rows()
    }

    /// Feature of modality `m` as it entered the fusion, i.e. after masking.
    pub fn masked_feature(&self, m: usize) -> Matrix {
        let mut f = self.features[m].clone();
        if let Some(mask) = &self.mask {
            zero_dropped_rows(&mut f, mask, m);
        }
        f
    }

    /// `Wᵐ·φᵐ` using the masked feature, bias excluded. For a single linear
    /// head these sum with `b` to the logits.
    pub fn component(&self, model: &FusionModel, m: usize) -> Result<Matrix> {
        let w = model.head_block(m)?;
        Ok(self.masked_feature(m).matmul_t(&w))
    }
}

fn zero_dropped_rows(f: &mut Matrix, mask: &ModalityMask, m: usize) {
    for i in 0..f.rows() {
        if mask.is_dropped(i, m) {
            f.row_mut(i).fill(0.0);
        }
    }
}

/// Forward pass with optional per-sample modality dropout on encoder outputs.
pub fn fusion_forward(
    model: &FusionModel,
    batch: &MultimodalBatch,
    mask: Option<&ModalityMask>,
) -> Result<ForwardTrace> {
    model.check_batch(batch)?;
    if let Some(mask) = mask {
        if mask.samples() != batch.len() || mask.modalities() != model.modalities() {
            return Err(Error::config(format!(
                "mask is {}x{}, batch is {}x{}",
                mask.samples(),
                mask.modalities(),
                batch.len(),
                model.modalities()
            )));
        }
    }
    let mut features = Vec::with_capacity(model.modalities());
    let mut encoder_caches = Vec::with_capacity(model.modalities());
    for (e, x) in model.encoders.iter().zip(&batch.inputs) {
        let (f, cache) = mlp_forward(e, x)?;
        features.push(f);
        encoder_caches.push(cache);
    }
    let mask = mask.filter(|m| !m.is_empty()).cloned();
    let fused = match &mask {
        None => model.fuse(&features),
        Some(mask) => {
            let masked: Vec<Matrix> = features
                .iter()
                .enumerate()
                .map(|(m, f)| {
                    let mut f = f.clone();
                    zero_dropped_rows(&mut f, mask, m);
                    f
                })
                .collect();
            model.fuse(&masked)
        }
    };
    let (logits, head_cache) = mlp_forward(&model.head, &fused)?;
    Ok(ForwardTrace {
        features,
        mask,
        fused,
        logits,
        encoder_caches,
        head_cache,
    })
}

/// Estimated uni-modal logits `Wᵐ·φᵐ + b/M` from the unmasked feature.
///
/// With summation fusion the shared `W` is applied to each modality's feature.
pub fn unimodal_component(model: &FusionModel, trace: &ForwardTrace, m: usize) -> Result<Matrix> {
    let w = model.head_block(m)?;
    let mut out = trace.features[m].matmul_t(&w);
    let share = 1.0 / model.modalities() as f64;
    let b: Vec<f64> = model.head.layers[0].bias.iter().map(|v| v * share).collect();
    out.add_row_vector(&b);
    Ok(out)
}

/// Head output when every modality except `m` has a zero feature.
pub fn zero_out_logits(model: &FusionModel, batch: &MultimodalBatch, m: usize) -> Result<Matrix> {
    let features = model.encode(batch)?;
    zero_out_logits_from_features(model, &features, m)
}

/// [`zero_out_logits`] for features that were already computed.
pub fn zero_out_logits_from_features(
    model: &FusionModel,
    features: &[Matrix],
    m: usize,
) -> Result<Matrix> {
    if m >= model.modalities() || features.len() != model.modalities() {
        return Err(Error::config(format!(
            "modality {m} / {} feature sets for a {}-modality model",
            features.len(),
            model.modalities()
        )));
    }
    let kept: Vec<Matrix> = features
        .iter()
        .enumerate()
        .map(|(j, f)| {
            if j == m {
                f.clone()
            } else {
                Matrix::zeros(f.rows(), f.cols())
            }
        })
        .collect();
    let (out, _) = mlp_forward(&model.head, &model.fuse(&kept))?;
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct FusionGrads {
    pub encoders: Vec<MlpGrads>,
    pub head: MlpGrads,
    /// Gradient w.r.t. each raw encoder output; zero on dropped cells.
    pub features: Vec<Matrix>,
}

/// Back-propagates `dlogits` through head and encoders.
pub fn fusion_backward(
    model: &FusionModel,
    trace: &ForwardTrace,
    dlogits: &Matrix,
) -> Result<FusionGrads> {
    if trace.encoder_caches.len() != model.modalities() {
        return Err(Error::contract(format!(
            "trace has {} encoder caches, model has {} encoders",
            trace.encoder_caches.len(),
            model.modalities()
        )));
    }
    let (head, dfused) = mlp_backward(&model.head, &trace.head_cache, dlogits)?;
    let mut encoders = Vec::with_capacity(model.modalities());
    let mut features = Vec::with_capacity(model.modalities());
    for m in 0..model.modalities() {
        let (start, width) = model.block(m);
        let mut df = dfused.column_block(start, width);
        if let Some(mask) = &trace.mask {
            zero_dropped_rows(&mut df, mask, m);
        }
        let (g, _) = mlp_backward(&model.encoders[m], &trace.encoder_caches[m], &df)?;
        encoders.push(g);
        features.push(df);
    }
    Ok(FusionGrads {
        encoders,
        head,
        features,
    })
}

/// Mean cross-entropy of the model on `batch` under an optional mask.
pub fn fusion_loss(
    model: &FusionModel,
    batch: &MultimodalBatch,
    mask: Option<&ModalityMask>,
) -> Result<f64> {
    let trace = fusion_forward(model, batch, mask)?;
    softmax_cross_entropy(&trace.logits, &batch.labels).map(|(l, _)| l)
}

/// Settings of the linear probe fitted on frozen features.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProbeConfig {
    pub epochs: usize,
    pub lr: f64,
    pub momentum: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            lr: 1e-3,
            momentum: 0.9,
            batch_size: 32,
            seed: 0,
        }
    }
}

/// Freezes encoder `m`, fits a fresh linear classifier on its features of
/// `train`, and returns that classifier's accuracy on `test`.
pub fn probe_encoder(
    model: &FusionModel,
    m: usize,
    train: &MultimodalBatch,
    test: &MultimodalBatch,
    cfg: &ProbeConfig,
) -> Result<f64> {
    if m >= model.modalities() {
        return Err(Error::config(format!("no modality {m}")));
    }
    let encoder = &model.encoders[m];
    let (train_f, _) = mlp_forward(encoder, &train.inputs[m])?;
    let (test_f, _) = mlp_forward(encoder, &test.inputs[m])?;
    linear_probe(
        &train_f,
        &train.labels,
        &test_f,
        &test.labels,
        model.classes(),
        cfg,
    )
}

/// Trains a softmax-regression classifier on fixed features with SGD and
/// returns its test accuracy.
pub fn linear_probe(
    train_x: &Matrix,
    train_y: &[usize],
    test_x: &Matrix,
    test_y: &[usize],
    classes: usize,
    cfg: &ProbeConfig,
) -> Result<f64> {
    if cfg.batch_size == 0 {
        return Err(Error::config("probe batch size must be > 0"));
    }
    if train_x.rows() != train_y.len() || test_x.rows() != test_y.len() {
        return Err(Error::config("probe features and labels disagree in length"));
    }
    if train_x.cols() != test_x.cols() {
        return Err(Error::config("probe train/test feature widths differ"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut clf = MlpParams::init(
        &[train_x.cols(), classes],
        Activation::Identity,
        Activation::Identity,
        &mut rng,
    )?;
    let mut opt = OptimizerState::new(&clf, cfg.lr, cfg.momentum)?;
    let mut order: Vec<usize> = (0..train_y.len()).collect();
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_size) {
            let x = train_x.select_rows(chunk);
            let y: Vec<usize> = chunk.iter().map(|&i| train_y[i]).collect();
            let (logits, cache) = mlp_forward(&clf, &x)?;
            let (_, d) = softmax_cross_entropy(&logits, &y)?;
            let (g, _) = mlp_backward(&clf, &cache, &d)?;
            sgd_momentum_step(&mut clf, &g, &mut opt, 1.0)?;
        }
    }
    if clf.tensors().iter().any(|t| t.iter().any(|v| !v.is_finite())) {
        return Err(Error::NonFinite("linear probe weights".into()));
    }
    if test_y.is_empty() {
        return Ok(0.0);
    }
    let (logits, _) = mlp_forward(&clf, test_x)?;
    let correct = test_y
        .iter()
        .enumerate()
        .filter(|&(i, &y)| argmax(logits.row(i)) == y)
        .count();
    Ok(correct as f64 / test_y.len() as f64)
}
