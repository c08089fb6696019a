//! The training loop with optional prediction or gradient modulation.
//!
//! Randomness. Every run derives independent ChaCha8 streams from its seed
//! (`ChaCha8Rng::seed_from_u64(seed)` with `set_stream(id)`): parameter
//! initialisation (0), mini-batch shuffling (1), modality-dropout masks (2)
//! and gradient noise (3). A strategy that does not drop or inject noise never
//! touches streams 2 and 3, so every strategy sees the same initial weights and
//! the same mini-batch sequence.

use log::{info, warn};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::datagen::{splitmix64, Dataset, SyntheticSpec};
use crate::fusion::{
    fusion_backward, fusion_forward, probe_encoder, Fusion, FusionModel, HeadKind,
    MultimodalBatch,
};
use crate::harness::config::{DataSource, RunConfig};
use crate::harness::runlog::{EpochRecord, IterRecord, RunLog};
use crate::metrics::{self, MetricsReport};
use crate::modulation::{
    apply_opm_mask, discrepancy_ratio, estimate_grad_variance, modulated_update,
    ogm_coefficient, ogm_star_coefficient, opm_drop_prob, per_sample_encoder_grads,
    unimodal_scores, ModulationState, NoiseInjector, NoiseScope, Strategy, TensorList,
};
use crate::nn::{softmax_cross_entropy, Tensors};
use crate::optim::{sgd_momentum_step, OptimizerState};
use crate::{Error, Result};

pub const STREAM_INIT: u64 = 0;
pub const STREAM_SHUFFLE: u64 = 1;
pub const STREAM_MASK: u64 = 2;
pub const STREAM_NOISE: u64 = 3;

pub fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

/// Seed of the linear probe fitted after `epoch`.
pub fn probe_seed(run_seed: u64, epoch: usize) -> u64 {
    splitmix64(splitmix64(run_seed) ^ epoch as u64)
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub log: RunLog,
    /// Parameters after the last completed update.
    pub model: FusionModel,
    pub test_metrics: MetricsReport,
    /// Reason training stopped early, if it did.
    pub diverged: Option<String>,
}

impl RunOutcome {
    pub fn train_accuracy(&self) -> f64 {
        self.log.final_epoch().map_or(f64::NAN, |e| e.train_accuracy)
    }
}

/// Generates (or imports) the data and trains on it.
pub fn train_run(cfg: &RunConfig) -> Result<RunOutcome> {
    cfg.validate()?;
    let ds = cfg.load_dataset()?;
    train_on(cfg, &ds)
}

/// Probe accuracy of every encoder of `model`.
pub fn probe_all(cfg: &RunConfig, model: &FusionModel, ds: &Dataset, epoch: usize) -> Result<Vec<f64>> {
    let pc = cfg.probe.with_seed(probe_seed(cfg.seed, epoch));
    (0..model.modalities())
        .map(|m| probe_encoder(model, m, &ds.train, &ds.test, &pc))
        .collect()
}

/// Fraction of `batch` classified correctly.
pub fn accuracy_on(model: &FusionModel, batch: &MultimodalBatch) -> Result<f64> {
    let (preds, _) = model.predict(batch)?;
    let correct = preds.iter().zip(&batch.labels).filter(|(p, y)| p == y).count();
    Ok(correct as f64 / batch.len().max(1) as f64)
}

fn all_finite<T: Tensors + ?Sized>(t: &T) -> bool {
    t.tensors().iter().all(|s| s.iter().all(|v| v.is_finite()))
}

/// Trains `cfg.model` on `ds` according to `cfg`.
///
/// Each iteration: draw the dropout mask from the drop probabilities computed
/// at the previous iteration, run the forward pass, score each modality on its
/// unmasked features and compute `ρ`, update the drop probabilities for the
/// next iteration, back-propagate, compute gradient coefficients and noise
/// from the current `ρ`, and update. A non-finite loss or gradient stops
/// training; the log then ends at the last completed iteration.
pub fn train_on(cfg: &RunConfig, ds: &Dataset) -> Result<RunOutcome> {
    cfg.validate()?;
    let mc = cfg.modulation;
    let opt = cfg.optimizer;
    let strategy = mc.strategy;
    if mc.modulate_head
        && (cfg.model.head != HeadKind::SingleLinear || cfg.model.fusion != Fusion::Concatenation)
    {
        return Err(Error::config(
            "modulate_head needs a single linear head over concatenated features",
        ));
    }

    let mut init_rng = stream(cfg.seed, STREAM_INIT);
    let mut model = FusionModel::init(
        &ds.train.inputs.iter().map(|x| x.cols()).collect::<Vec<_>>(),
        ds.spec.classes,
        &cfg.model,
        &mut init_rng,
    )?;
    let modalities = model.modalities();
    let mut enc_opts = model
        .encoders
        .iter()
        .map(|e| OptimizerState::new(e, opt.lr, opt.momentum))
        .collect::<Result<Vec<_>>>()?;
    let mut head_opt = OptimizerState::new(&model.head, opt.lr, opt.momentum)?;
    let mut shuffle_rng = stream(cfg.seed, STREAM_SHUFFLE);
    let mut mask_rng = stream(cfg.seed, STREAM_MASK);
    let mut injector = NoiseInjector::new(TensorList(Vec::new()), stream(cfg.seed, STREAM_NOISE))?;
    let mut state = ModulationState::new(modalities, mc.rho_measure);
    let mut log = RunLog::new(modalities);

    let epoch_row = |model: &FusionModel, epoch: usize, iter: usize| -> Result<EpochRecord> {
        let test = metrics::evaluate(model, &ds.test)?;
        let scheduled = cfg.probe_every > 0
            && (epoch.is_multiple_of(cfg.probe_every) || epoch == cfg.optimizer.epochs);
        Ok(EpochRecord {
            epoch,
            iter,
            train_accuracy: accuracy_on(model, &ds.train)?,
            test_accuracy: test.accuracy,
            test_map: test.map,
            probes: if scheduled {
                Some(probe_all(cfg, model, ds, epoch)?)
            } else {
                None
            },
        })
    };
    log.push_epoch(epoch_row(&model, 0, 0)?)?;

    let mut order: Vec<usize> = (0..ds.train.len()).collect();
    let mut iter = 0usize;
    let mut diverged = None;
    'epochs: for epoch in 1..=opt.epochs {
        order.shuffle(&mut shuffle_rng);
        for chunk in order.chunks(opt.batch_size) {
            iter += 1;
            let batch = ds.train.select(chunk);
            let q_applied = state.q.clone();
            let mask = strategy
                .uses_opm()
                .then(|| apply_opm_mask(&q_applied, batch.len(), &mut mask_rng));
            let trace = fusion_forward(&model, &batch, mask.as_ref())?;
            let s = unimodal_scores(&model, &trace, &batch.labels, mc.score_mode)?;
            let rho = discrepancy_ratio(&s, mc.rho_measure);
            let (loss, dlogits) = softmax_cross_entropy(&trace.logits, &batch.labels)?;
            if !loss.is_finite() {
                diverged = Some(format!("non-finite loss at iteration {iter}"));
                break 'epochs;
            }
            let mut grads = fusion_backward(&model, &trace, &dlogits)?;
            if !grads.encoders.iter().all(all_finite) || !all_finite(&grads.head) {
                diverged = Some(format!("non-finite gradient at iteration {iter}"));
                break 'epochs;
            }

            let k = match strategy {
                Strategy::Ogm | Strategy::OpmPlusOgm => ogm_coefficient(&rho, &mc),
                Strategy::OgmStar => ogm_star_coefficient(&rho, &mc),
                Strategy::None | Strategy::Opm => vec![1.0; modalities],
            };
            let mut noise = Vec::with_capacity(modalities);
            for (m, &km) in k.iter().enumerate() {
                let inject = strategy.uses_ogm()
                    && mc.noise_enabled
                    && (mc.noise_scope == NoiseScope::AllEncoders || km != 1.0);
                if !inject {
                    noise.push(None);
                    continue;
                }
                let per_sample = per_sample_encoder_grads(&model, &trace, &grads, m)?;
                match injector.set_variance(estimate_grad_variance(&per_sample)?) {
                    Ok(()) => noise.push(Some(injector.sample())),
                    Err(Error::NonFinite(reason)) => {
                        diverged = Some(format!("{reason} at iteration {iter}"));
                        break 'epochs;
                    }
                    Err(e) => return Err(e),
                }
            }
            for (m, h) in noise.iter().enumerate() {
                modulated_update(
                    &mut model.encoders[m],
                    &grads.encoders[m],
                    k[m],
                    h.as_ref(),
                    &mut enc_opts[m],
                )?;
            }
            if mc.modulate_head {
                let w = &mut grads.head.layers[0].weight;
                for (m, &km) in k.iter().enumerate() {
                    let (start, width) = model.block(m);
                    for r in 0..w.rows() {
                        for v in &mut w.row_mut(r)[start..start + width] {
                            *v *= km;
                        }
                    }
                }
            }
            sgd_momentum_step(&mut model.head, &grads.head, &mut head_opt, 1.0)?;

            if strategy.uses_opm() {
                state.q = opm_drop_prob(&rho, &mc);
            }
            state.prev_rho = rho.clone();
            state.s_sums = s.clone();
            state.rho = rho.clone();
            state.k = k.clone();
            log.push_iter(IterRecord {
                iter,
                epoch,
                loss,
                s_sums: s,
                rho,
                q: q_applied,
                k,
            })?;
        }
        let row = epoch_row(&model, epoch, iter)?;
        info!(
            "epoch {epoch}: train {:.4} test {:.4}",
            row.train_accuracy, row.test_accuracy
        );
        log.push_epoch(row)?;
    }
    if let Some(reason) = &diverged {
        warn!("training stopped: {reason}");
    }
    let test_metrics = metrics::evaluate(&model, &ds.test)?;
    Ok(RunOutcome {
        log,
        model,
        test_metrics,
        diverged,
    })
}

/// The dataset reduced to modality `m` alone.
pub fn single_modality(ds: &Dataset, m: usize) -> Result<Dataset> {
    if m >= ds.train.modalities() {
        return Err(Error::config(format!("no modality {m}")));
    }
    let pick = |b: &MultimodalBatch| MultimodalBatch::new(vec![b.inputs[m].clone()], b.labels.clone());
    let s = &ds.spec;
    Ok(Dataset {
        spec: SyntheticSpec {
            dims: vec![s.dims[m]],
            separation: vec![s.separation[m]],
            noise_std: vec![s.noise_std[m]],
            ..s.clone()
        },
        train: pick(&ds.train)?,
        test: pick(&ds.test)?,
    })
}

/// Trains modality `m`'s encoder alone (same architecture, linear head, no
/// modulation) and returns the run together with its encoder's probe accuracy.
pub fn train_solo(cfg: &RunConfig, ds: &Dataset, m: usize) -> Result<(RunOutcome, f64)> {
    let solo_ds = single_modality(ds, m)?;
    let mut solo = cfg.clone().with_strategy(Strategy::None);
    solo.model.encoder_layers = vec![cfg.model.encoder_layers[m].clone()];
    if let DataSource::Synthetic(spec) = &mut solo.data {
        *spec = solo_ds.spec.clone();
    }
    solo.probe_every = 0;
    let out = train_on(&solo, &solo_ds)?;
    let probe = probe_all(&solo, &out.model, &solo_ds, cfg.optimizer.epochs)?[0];
    Ok((out, probe))
}
