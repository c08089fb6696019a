//! On-the-fly balancing of modalities during joint training.
//!
//! Every iteration the uni-modal discriminative score of each modality is
//! estimated from its share of the fused logits,
//!
//! ```text
//! sᵢᵐ = softmax(Wᵐ·φᵢᵐ + b/M)[yᵢ]
//! ```
//!
//! and summed over the mini-batch. The discrepancy `ρᵐ` compares modality `m`
//! with every other modality (mean ratio, or mean difference). A modality with
//! `ρᵐ` above the dominance threshold is then slowed down in one of two ways:
//!
//! * prediction modulation (OPM): its feature is dropped with probability
//!   `q = q_base·(1 + λ·z(ρ))`, clamped to `[0, 1]`, where `q` for iteration
//!   `t + 1` comes from `ρ` at iteration `t`;
//! * gradient modulation (OGM): its encoder gradient is scaled by
//!   `k = 1 − α·z(ρ)`, clamped to `[0, 1]`, using the current `ρ`, and zero-mean
//!   Gaussian noise with the mini-batch gradient's (diagonal) covariance is
//!   added so the overall SGD noise is not weakened.
//!
//! OGM* leaves dominant modalities alone and boosts the others instead.

use log::warn;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::fusion::{
    unimodal_component, zero_out_logits_from_features, ForwardTrace, FusionGrads, FusionModel,
    ModalityMask,
};
use crate::nn::{mlp_backward, softmax_in_place, MlpGrads, MlpParams, Tensors};
use crate::optim::{sgd_momentum_step, OptimizerState};
use crate::{Error, Matrix, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    None,
    Opm,
    Ogm,
    OgmStar,
    OpmPlusOgm,
}

impl Strategy {
    pub fn uses_opm(self) -> bool {
        matches!(self, Strategy::Opm | Strategy::OpmPlusOgm)
    }

    /// Gradient coefficients (and noise) are applied.
    pub fn uses_ogm(self) -> bool {
        matches!(self, Strategy::Ogm | Strategy::OgmStar | Strategy::OpmPlusOgm)
    }

    pub fn name(self) -> &'static str {
        match self {
            Strategy::None => "none",
            Strategy::Opm => "opm",
            Strategy::Ogm => "ogm",
            Strategy::OgmStar => "ogm_star",
            Strategy::OpmPlusOgm => "opm_plus_ogm",
        }
    }
}

impl std::str::FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "none" => Strategy::None,
            "opm" => Strategy::Opm,
            "ogm" => Strategy::Ogm,
            "ogm_star" => Strategy::OgmStar,
            "opm_plus_ogm" => Strategy::OpmPlusOgm,
            other => return Err(Error::config(format!("unknown strategy {other:?}"))),
        })
    }
}

/// Monotone map from the discrepancy to modulation strength.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ZFn {
    /// `tanh(x − 1)`
    TanhShifted,
    /// `1 / (1 + e^−x)`
    Sigmoid,
}

impl ZFn {
    pub fn eval(self, x: f64) -> f64 {
        match self {
            ZFn::TanhShifted => (x - 1.0).tanh(),
            ZFn::Sigmoid => 1.0 / (1.0 + (-x).exp()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RhoMeasure {
    /// Mean of `sᵐ / sʲ`; dominant when `ρ > 1`.
    Ratio,
    /// Mean of `sᵐ − sʲ`; dominant when `ρ > 0`.
    Difference,
}

impl RhoMeasure {
    /// `ρ` of perfectly balanced modalities.
    pub fn neutral(self) -> f64 {
        match self {
            RhoMeasure::Ratio => 1.0,
            RhoMeasure::Difference => 0.0,
        }
    }

    pub fn is_dominant(self, rho: f64) -> bool {
        rho > self.neutral()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreMode {
    /// Split the single linear head into `Wᵐ·φᵐ + b/M`.
    ComponentSplit,
    /// Run the head with every other modality's feature set to zero.
    ZeroOut,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseScope {
    /// Every encoder receives noise while gradient modulation is active.
    AllEncoders,
    /// Only encoders whose coefficient differs from 1.
    ModulatedOnly,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModulationConfig {
    #[serde(default = "defaults::strategy")]
    pub strategy: Strategy,
    #[serde(default = "defaults::q_base")]
    pub q_base: f64,
    #[serde(default = "defaults::lambda")]
    pub lambda: f64,
    #[serde(default = "defaults::alpha")]
    pub alpha: f64,
    #[serde(default = "defaults::z_fn")]
    pub z_fn: ZFn,
    #[serde(default = "defaults::rho_measure")]
    pub rho_measure: RhoMeasure,
    #[serde(default = "defaults::noise_enabled")]
    pub noise_enabled: bool,
    #[serde(default = "defaults::score_mode")]
    pub score_mode: ScoreMode,
    #[serde(default = "defaults::noise_scope")]
    pub noise_scope: NoiseScope,
    /// Also scale the head block `Wᵐ` by `kᵐ`.
    #[serde(default)]
    pub modulate_head: bool,
}

mod defaults {
    use super::*;

    pub fn strategy() -> Strategy {
        Strategy::None
    }
    pub fn q_base() -> f64 {
        0.5
    }
    pub fn lambda() -> f64 {
        0.5
    }
    pub fn alpha() -> f64 {
        1.0
    }
    pub fn z_fn() -> ZFn {
        ZFn::TanhShifted
    }
    pub fn rho_measure() -> RhoMeasure {
        RhoMeasure::Ratio
    }
    pub fn noise_enabled() -> bool {
        true
    }
    pub fn score_mode() -> ScoreMode {
        ScoreMode::ComponentSplit
    }
    pub fn noise_scope() -> NoiseScope {
        NoiseScope::AllEncoders
    }
}

impl Default for ModulationConfig {
    fn default() -> Self {
        Self {
            strategy: defaults::strategy(),
            q_base: defaults::q_base(),
            lambda: defaults::lambda(),
            alpha: defaults::alpha(),
            z_fn: defaults::z_fn(),
            rho_measure: defaults::rho_measure(),
            noise_enabled: defaults::noise_enabled(),
            score_mode: defaults::score_mode(),
            noise_scope: defaults::noise_scope(),
            modulate_head: false,
        }
    }
}

impl ModulationConfig {
    pub fn with_strategy(strategy: Strategy) -> Self {
        Self {
            strategy,
            ..Self::default()
        }
    }

    /// `q_base ∈ (0, 1)`, `λ > 0`, `α > 0`. Zero `q_base` and zero `α` are
    /// accepted as the degenerate "no modulation" limits.
    pub fn validate(&self) -> Result<()> {
        if !(self.q_base >= 0.0 && self.q_base < 1.0) {
            return Err(Error::config(format!("q_base must be in [0, 1), got {}", self.q_base)));
        }
        if !(self.lambda > 0.0 && self.lambda.is_finite()) {
            return Err(Error::config(format!("lambda must be > 0, got {}", self.lambda)));
        }
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return Err(Error::config(format!("alpha must be >= 0, got {}", self.alpha)));
        }
        Ok(())
    }
}

/// Per-run modulation bookkeeping.
#[derive(Debug, Clone, PartialEq)]
pub struct ModulationState {
    /// `ρ` of the previous iteration; starts neutral so nothing is modulated
    /// on the first step.
    pub prev_rho: Vec<f64>,
    pub s_sums: Vec<f64>,
    pub rho: Vec<f64>,
    /// Drop probabilities applied in the current iteration.
    pub q: Vec<f64>,
    pub k: Vec<f64>,
}

impl ModulationState {
    pub fn new(modalities: usize, measure: RhoMeasure) -> Self {
        let neutral = measure.neutral();
        Self {
            prev_rho: vec![neutral; modalities],
            s_sums: vec![0.0; modalities],
            rho: vec![neutral; modalities],
            q: vec![0.0; modalities],
            k: vec![1.0; modalities],
        }
    }
}

/// `Σᵢ softmax(componentᵢ)[yᵢ]` for each modality's estimated logits.
pub fn score_sums(components: &[Matrix], labels: &[usize]) -> Result<Vec<f64>> {
    components
        .iter()
        .map(|c| {
            if c.rows() != labels.len() {
                return Err(Error::config(format!(
                    "{} component rows for {} labels",
                    c.rows(),
                    labels.len()
                )));
            }
            let mut row = vec![0.0; c.cols()];
            let mut sum = 0.0;
            for (i, &y) in labels.iter().enumerate() {
                if y >= c.cols() {
                    return Err(Error::config(format!("label {y} out of range")));
                }
                row.copy_from_slice(c.row(i));
                softmax_in_place(&mut row);
                sum += row[y];
            }
            Ok(sum)
        })
        .collect()
}

/// Estimated uni-modal logits for every modality, always from unmasked
/// features.
pub fn unimodal_logits(
    model: &FusionModel,
    trace: &ForwardTrace,
    mode: ScoreMode,
) -> Result<Vec<Matrix>> {
    (0..model.modalities())
        .map(|m| match mode {
            ScoreMode::ComponentSplit => unimodal_component(model, trace, m),
            ScoreMode::ZeroOut => zero_out_logits_from_features(model, &trace.features, m),
        })
        .collect()
}

/// Batch sums of the uni-modal scores `sᵐ`.
pub fn unimodal_scores(
    model: &FusionModel,
    trace: &ForwardTrace,
    labels: &[usize],
    mode: ScoreMode,
) -> Result<Vec<f64>> {
    score_sums(&unimodal_logits(model, trace, mode)?, labels)
}

/// Discrepancy of each modality against the others.
///
/// With a single modality there is nothing to compare and the neutral value
/// is returned.
pub fn discrepancy_ratio(s_sums: &[f64], measure: RhoMeasure) -> Vec<f64> {
    let m_count = s_sums.len();
    if m_count < 2 {
        return vec![measure.neutral(); m_count];
    }
    let norm = 1.0 / (m_count - 1) as f64;
    (0..m_count)
        .map(|m| {
            let total: f64 = (0..m_count)
                .filter(|&j| j != m)
                .map(|j| match measure {
                    RhoMeasure::Ratio => {
                        let mut denom = s_sums[j];
                        if denom <= 0.0 {
                            warn!("score sum of modality {j} is {denom}; clamping to 1e-12");
                            denom = 1e-12;
                        }
                        s_sums[m] / denom
                    }
                    RhoMeasure::Difference => s_sums[m] - s_sums[j],
                })
                .sum();
            total * norm
        })
        .collect()
}

/// Drop probability for the next iteration from this iteration's `ρ`.
pub fn opm_drop_prob(rho: &[f64], cfg: &ModulationConfig) -> Vec<f64> {
    rho.iter()
        .map(|&r| {
            if cfg.rho_measure.is_dominant(r) {
                (cfg.q_base * (1.0 + cfg.lambda * cfg.z_fn.eval(r))).clamp(0.0, 1.0)
            } else {
                0.0
            }
        })
        .collect()
}

/// Feature-dropout mask for one iteration; see [`ModalityMask::bernoulli`]
/// for the RNG stream.
pub fn apply_opm_mask<R: Rng + ?Sized>(q: &[f64], batch_size: usize, rng: &mut R) -> ModalityMask {
    ModalityMask::bernoulli(q, batch_size, rng)
}

/// Gradient coefficient from the current `ρ`.
pub fn ogm_coefficient(rho: &[f64], cfg: &ModulationConfig) -> Vec<f64> {
    rho.iter()
        .map(|&r| {
            if cfg.rho_measure.is_dominant(r) {
                (1.0 - cfg.alpha * cfg.z_fn.eval(r)).clamp(0.0, 1.0)
            } else {
                1.0
            }
        })
        .collect()
}

/// Boosting variant: dominant modalities keep `k = 1`, the others get
/// `k = 1 + α·z(ρ_dom)` where `ρ_dom` is the largest dominant discrepancy.
pub fn ogm_star_coefficient(rho: &[f64], cfg: &ModulationConfig) -> Vec<f64> {
    let dominant = rho
        .iter()
        .copied()
        .filter(|&r| cfg.rho_measure.is_dominant(r))
        .fold(None, |acc: Option<f64>, r| Some(acc.map_or(r, |a| a.max(r))));
    let Some(rho_dom) = dominant else {
        return vec![1.0; rho.len()];
    };
    let boost = (1.0 + cfg.alpha * cfg.z_fn.eval(rho_dom)).max(1.0);
    rho.iter()
        .map(|&r| {
            if cfg.rho_measure.is_dominant(r) {
                1.0
            } else {
                boost
            }
        })
        .collect()
}

/// Flat per-tensor buffers sharing the layout of some [`Tensors`] value.
#[derive(Debug, Clone, PartialEq)]
pub struct TensorList(pub Vec<Vec<f64>>);

impl TensorList {
    pub fn zeros_like<T: Tensors + ?Sized>(t: &T) -> Self {
        TensorList(t.tensor_lens().into_iter().map(|n| vec![0.0; n]).collect())
    }

    pub fn copy_of<T: Tensors + ?Sized>(t: &T) -> Self {
        TensorList(t.tensors().into_iter().map(|s| s.to_vec()).collect())
    }
}

impl Tensors for TensorList {
    fn tensors(&self) -> Vec<&[f64]> {
        self.0.iter().map(|v| v.as_slice()).collect()
    }

    fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        self.0.iter_mut().map(|v| v.as_mut_slice()).collect()
    }
}

/// Diagonal of `U/|B|`: unbiased per-coordinate variance of the per-sample
/// gradients, divided by the number of samples (the variance of their mean).
pub fn estimate_grad_variance<G: Tensors>(per_sample: &[G]) -> Result<TensorList> {
    let Some(first) = per_sample.first() else {
        return Err(Error::config("no per-sample gradients"));
    };
    let lens = first.tensor_lens();
    if per_sample.iter().any(|g| g.tensor_lens() != lens) {
        return Err(Error::contract("per-sample gradients differ in layout"));
    }
    let n = per_sample.len();
    if n < 2 {
        warn!("gradient variance needs at least 2 samples; using 0");
        return Ok(TensorList::zeros_like(first));
    }
    let nf = n as f64;
    // Deviations are taken from the first sample so that identical samples
    // give a variance of exactly zero.
    let base = TensorList::copy_of(first);
    let mut mean = TensorList::zeros_like(first);
    for g in per_sample {
        for ((acc, b), t) in mean.0.iter_mut().zip(&base.0).zip(g.tensors()) {
            for ((a, b), v) in acc.iter_mut().zip(b).zip(t) {
                *a += v - b;
            }
        }
    }
    for acc in &mut mean.0 {
        for a in acc.iter_mut() {
            *a /= nf;
        }
    }
    let mut var = TensorList::zeros_like(first);
    for g in per_sample {
        for (((acc, mu), b), t) in var.0.iter_mut().zip(&mean.0).zip(&base.0).zip(g.tensors()) {
            for (((a, m), b), v) in acc.iter_mut().zip(mu).zip(b).zip(t) {
                let d = (v - b) - m;
                *a += d * d;
            }
        }
    }
    let scale = 1.0 / ((nf - 1.0) * nf);
    for acc in &mut var.0 {
        for a in acc.iter_mut() {
            *a *= scale;
        }
    }
    Ok(var)
}

/// Per-sample gradients `∇θᵐ ℓ(xᵢ)` of encoder `m`, one backward pass per
/// sample, from a batched trace and its gradients (whose feature gradients
/// carry the `1/|B|` of the mean loss).
pub fn per_sample_encoder_grads(
    model: &FusionModel,
    trace: &ForwardTrace,
    grads: &FusionGrads,
    m: usize,
) -> Result<Vec<MlpGrads>> {
    let batch = trace.batch_size();
    let cache = &trace.encoder_caches[m];
    let dfeat = &grads.features[m];
    (0..batch)
        .map(|i| {
            let dout = dfeat.select_rows(&[i]).scaled(batch as f64);
            mlp_backward(&model.encoders[m], &cache.row(i), &dout).map(|(g, _)| g)
        })
        .collect()
}

/// Samples zero-mean Gaussian noise with a per-coordinate variance.
#[derive(Debug, Clone)]
pub struct NoiseInjector {
    pub variance: TensorList,
    rng: ChaCha8Rng,
}

impl NoiseInjector {
    pub fn new(variance: TensorList, rng: ChaCha8Rng) -> Result<Self> {
        let mut inj = Self {
            variance: TensorList(Vec::new()),
            rng,
        };
        inj.set_variance(variance)?;
        Ok(inj)
    }

    pub fn set_variance(&mut self, variance: TensorList) -> Result<()> {
        if variance.0.iter().flatten().any(|&v| !(v >= 0.0 && v.is_finite())) {
            return Err(Error::NonFinite("variance estimate must be finite and >= 0".into()));
        }
        self.variance = variance;
        Ok(())
    }

    /// One draw per coordinate, in tensor order; a zero variance gives an
    /// exact zero (the draw is still consumed).
    pub fn sample(&mut self) -> TensorList {
        TensorList(
            self.variance
                .0
                .iter()
                .map(|t| {
                    t.iter()
                        .map(|&v| {
                            let z: f64 = self.rng.sample(StandardNormal);
                            if v == 0.0 {
                                0.0
                            } else {
                                z * v.sqrt()
                            }
                        })
                        .collect()
                })
                .collect(),
        )
    }

    pub fn into_rng(self) -> ChaCha8Rng {
        self.rng
    }
}

/// `θ ← θ − η·(k·g + h)` through SGD with momentum. Without noise this is
/// exactly [`sgd_momentum_step`] with `scale = k`.
pub fn modulated_update(
    encoder: &mut MlpParams,
    grads: &MlpGrads,
    k: f64,
    noise: Option<&TensorList>,
    opt: &mut OptimizerState,
) -> Result<()> {
    match noise {
        None => sgd_momentum_step(encoder, grads, opt, k),
        Some(h) => {
            if h.tensor_lens() != grads.tensor_lens() {
                return Err(Error::contract("noise layout differs from gradient layout"));
            }
            let mut eff = TensorList::copy_of(grads);
            for (e, n) in eff.0.iter_mut().zip(&h.0) {
                for (ev, nv) in e.iter_mut().zip(n) {
                    *ev = k * *ev + nv;
                }
            }
            sgd_momentum_step(encoder, &eff, opt, 1.0)
        }
    }
}
