//! Missing-modality evaluation, batch-size/learning-rate sweeps and paired
//! strategy comparisons.

use std::fmt::Write as _;

use log::warn;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::datagen::{corrupt_missing, splitmix64, Dataset};
use crate::fusion::{FusionModel, MultimodalBatch};
use crate::harness::config::RunConfig;
use crate::harness::train::{accuracy_on, probe_all, stream, train_on, train_solo, RunOutcome};
use crate::modulation::Strategy;
use crate::{Error, Result};

/// Stream id of the missing-modality corruption generator.
pub const STREAM_CORRUPT: u64 = 4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MissingEvalRow {
    pub miss_probs: Vec<f64>,
    pub mean_accuracy: f64,
    /// One accuracy per corruption seed.
    pub accuracies: Vec<f64>,
}

/// Accuracy of `model` on `test` with inputs zeroed at random, for every
/// grid point. Corruption seed `r` uses
/// `stream(splitmix64(seed) ^ r, STREAM_CORRUPT)`; the same draws are reused
/// at every grid point.
pub fn missing_modality_eval(
    model: &FusionModel,
    test: &MultimodalBatch,
    grid: &[Vec<f64>],
    corruption_seeds: usize,
    seed: u64,
) -> Result<Vec<MissingEvalRow>> {
    if corruption_seeds == 0 {
        return Err(Error::config("at least one corruption seed is required"));
    }
    grid.iter()
        .map(|probs| {
            let accuracies = (0..corruption_seeds as u64)
                .map(|r| {
                    let mut rng = stream(splitmix64(seed) ^ r, STREAM_CORRUPT);
                    accuracy_on(model, &corrupt_missing(test, probs, &mut rng)?)
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(MissingEvalRow {
                miss_probs: probs.clone(),
                mean_accuracy: mean(&accuracies),
                accuracies,
            })
        })
        .collect()
}

pub fn missing_csv(rows: &[MissingEvalRow]) -> String {
    let m = rows.first().map_or(0, |r| r.miss_probs.len());
    let mut out = String::new();
    for i in 0..m {
        let _ = write!(out, "miss_{i},");
    }
    out.push_str("mean_accuracy,corruption_seeds\n");
    for r in rows {
        for p in &r.miss_probs {
            let _ = write!(out, "{p},");
        }
        let _ = writeln!(out, "{:.8e},{}", r.mean_accuracy, r.accuracies.len());
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
    /// `None` when the run diverged.
    pub train_accuracy: Option<f64>,
    pub test_accuracy: Option<f64>,
    pub test_map: Option<f64>,
    pub diverged: Option<String>,
}

/// One run per `(batch size, lr)` cell and seed; rows are ordered cell-major.
/// Cells run in parallel; diverged runs are reported, not fatal.
pub fn sweep_bs_lr(base: &RunConfig, grid: &[(usize, f64)], seeds: &[u64]) -> Result<Vec<SweepRow>> {
    if grid.iter().any(|&(b, lr)| b == 0 || !(lr > 0.0 && lr.is_finite())) {
        return Err(Error::config("sweep batch sizes and learning rates must be > 0"));
    }
    let jobs: Vec<(usize, f64, u64)> = grid
        .iter()
        .flat_map(|&(b, lr)| seeds.iter().map(move |&s| (b, lr, s)))
        .collect();
    jobs.par_iter()
        .map(|&(batch_size, lr, seed)| {
            let mut cfg = base.clone().with_seed(seed);
            cfg.optimizer.batch_size = batch_size;
            cfg.optimizer.lr = lr;
            cfg.validate()?;
            let ds = cfg.load_dataset()?;
            let out = train_on(&cfg, &ds)?;
            let ok = out.diverged.is_none();
            Ok(SweepRow {
                batch_size,
                lr,
                seed,
                train_accuracy: ok.then(|| out.train_accuracy()),
                test_accuracy: ok.then_some(out.test_metrics.accuracy),
                test_map: ok.then_some(out.test_metrics.map),
                diverged: out.diverged,
            })
        })
        .collect()
}

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut out = String::from("batch_size,lr,seed,status,train_acc,test_acc,test_map\n");
    let cell = |v: Option<f64>| v.map_or(String::new(), |x| format!("{x:.8e}"));
    for r in rows {
        let _ = writeln!(
            out,
            "{},{:e},{},{},{},{},{}",
            r.batch_size,
            r.lr,
            r.seed,
            if r.diverged.is_some() { "diverged" } else { "ok" },
            cell(r.train_accuracy),
            cell(r.test_accuracy),
            cell(r.test_map)
        );
    }
    out
}

/// Mean test accuracy per `(batch size, lr)` cell over its converged seeds.
pub fn sweep_cell_means(rows: &[SweepRow]) -> Vec<(usize, f64, f64)> {
    let mut cells: Vec<(usize, f64, f64)> = Vec::new();
    for r in rows {
        if cells.iter().any(|c| c.0 == r.batch_size && c.1 == r.lr) {
            continue;
        }
        let accs: Vec<f64> = rows
            .iter()
            .filter(|o| o.batch_size == r.batch_size && o.lr == r.lr)
            .filter_map(|o| o.test_accuracy)
            .collect();
        cells.push((r.batch_size, r.lr, mean(&accs)));
    }
    cells
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompareOptions {
    /// The baseline (`none`) is added when missing.
    pub strategies: Vec<Strategy>,
    pub seeds: Vec<u64>,
    /// Per-modality missing probability for the robustness column.
    pub miss_prob: Option<f64>,
    pub corruption_seeds: usize,
    /// Also train each modality alone and probe its encoder.
    pub solo: bool,
}

impl Default for CompareOptions {
    fn default() -> Self {
        Self {
            strategies: vec![Strategy::None, Strategy::Opm, Strategy::Ogm],
            seeds: (0..5).collect(),
            miss_prob: Some(0.2),
            corruption_seeds: 5,
            solo: false,
        }
    }
}

/// Result of one training run inside a comparison.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub strategy: Strategy,
    pub seed: u64,
    pub diverged: Option<String>,
    pub train_accuracy: f64,
    pub test_accuracy: f64,
    pub test_map: f64,
    /// Time-averaged `ρ` per modality.
    pub mean_rho: Vec<f64>,
    /// Final probe accuracy per modality.
    pub probes: Vec<f64>,
    /// Clean accuracy minus accuracy under random missing modalities.
    pub missing_drop: Option<f64>,
}

/// Seed means for one strategy, with differences to the baseline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StrategySummary {
    pub strategy: Strategy,
    pub test_accuracy: f64,
    pub mean_rho: Vec<f64>,
    pub probes: Vec<f64>,
    pub missing_drop: Option<f64>,
    /// Mean paired difference of test accuracy to the baseline.
    pub test_accuracy_gain: f64,
    /// Mean paired difference of probe accuracy to the baseline.
    pub probe_gain: Vec<f64>,
    /// `1 − mean ρ / baseline mean ρ` per modality.
    pub rho_reduction: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompareReport {
    pub options: CompareOptions,
    pub runs: Vec<RunSummary>,
    pub strategies: Vec<StrategySummary>,
    /// Mean probe accuracy of encoders trained alone, per modality.
    pub solo_probes: Option<Vec<f64>>,
}

fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        f64::NAN
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

fn column_means(rows: &[&Vec<f64>]) -> Vec<f64> {
    let width = rows.first().map_or(0, |r| r.len());
    (0..width)
        .map(|j| mean(&rows.iter().map(|r| r[j]).collect::<Vec<_>>()))
        .collect()
}

/// Summarises a finished run.
pub fn summarize(
    cfg: &RunConfig,
    ds: &Dataset,
    out: &RunOutcome,
    miss_prob: Option<f64>,
    corruption_seeds: usize,
) -> Result<RunSummary> {
    let m = out.model.modalities();
    let probes = match out.log.epochs.last().and_then(|e| e.probes.clone()) {
        Some(p) if out.diverged.is_none() => p,
        _ if out.diverged.is_none() => probe_all(cfg, &out.model, ds, cfg.optimizer.epochs)?,
        _ => vec![f64::NAN; m],
    };
    let missing_drop = match miss_prob {
        Some(p) if out.diverged.is_none() => {
            let rows = missing_modality_eval(&out.model, &ds.test, &[vec![p; m]], corruption_seeds, cfg.seed)?;
            Some(out.test_metrics.accuracy - rows[0].mean_accuracy)
        }
        _ => None,
    };
    Ok(RunSummary {
        strategy: cfg.modulation.strategy,
        seed: cfg.seed,
        diverged: out.diverged.clone(),
        train_accuracy: out.train_accuracy(),
        test_accuracy: out.test_metrics.accuracy,
        test_map: out.test_metrics.map,
        mean_rho: (0..m).map(|j| out.log.mean_rho(j)).collect(),
        probes,
        missing_drop,
    })
}

/// Trains every strategy on every seed (same data, initial weights and
/// mini-batch order for a given seed) and reports paired differences to the
/// baseline. Runs execute in parallel.
pub fn compare(base: &RunConfig, opts: &CompareOptions) -> Result<CompareReport> {
    if opts.seeds.is_empty() {
        return Err(Error::config("compare needs at least one seed"));
    }
    let mut strategies = opts.strategies.clone();
    if !strategies.contains(&Strategy::None) {
        strategies.insert(0, Strategy::None);
    }
    strategies.dedup();
    let datasets = opts
        .seeds
        .par_iter()
        .map(|&s| base.clone().with_seed(s).load_dataset())
        .collect::<Result<Vec<_>>>()?;
    let jobs: Vec<(usize, Strategy)> = (0..opts.seeds.len())
        .flat_map(|i| strategies.iter().map(move |&s| (i, s)))
        .collect();
    let runs = jobs
        .par_iter()
        .map(|&(i, strategy)| {
            let cfg = base.clone().with_seed(opts.seeds[i]).with_strategy(strategy);
            let out = train_on(&cfg, &datasets[i])?;
            if let Some(reason) = &out.diverged {
                warn!("{} seed {} diverged: {reason}", strategy.name(), opts.seeds[i]);
            }
            summarize(&cfg, &datasets[i], &out, opts.miss_prob, opts.corruption_seeds)
        })
        .collect::<Result<Vec<_>>>()?;

    let solo_probes = if opts.solo {
        let modalities = datasets[0].train.modalities();
        let per_seed = (0..opts.seeds.len())
            .into_par_iter()
            .map(|i| {
                let cfg = base.clone().with_seed(opts.seeds[i]);
                (0..modalities)
                    .map(|m| train_solo(&cfg, &datasets[i], m).map(|(_, p)| p))
                    .collect::<Result<Vec<_>>>()
            })
            .collect::<Result<Vec<_>>>()?;
        Some(column_means(&per_seed.iter().collect::<Vec<_>>()))
    } else {
        None
    };

    let of = |s: Strategy| -> Vec<&RunSummary> { runs.iter().filter(|r| r.strategy == s).collect() };
    let baseline = of(Strategy::None);
    let base_rho = column_means(&baseline.iter().map(|r| &r.mean_rho).collect::<Vec<_>>());
    let summaries = strategies
        .iter()
        .map(|&s| {
            let rs = of(s);
            let probes = column_means(&rs.iter().map(|r| &r.probes).collect::<Vec<_>>());
            let mean_rho = column_means(&rs.iter().map(|r| &r.mean_rho).collect::<Vec<_>>());
            let paired = |f: &dyn Fn(&RunSummary) -> f64| -> f64 {
                mean(&rs.iter().zip(&baseline).map(|(a, b)| f(a) - f(b)).collect::<Vec<_>>())
            };
            let drops: Vec<f64> = rs.iter().filter_map(|r| r.missing_drop).collect();
            StrategySummary {
                strategy: s,
                test_accuracy: mean(&rs.iter().map(|r| r.test_accuracy).collect::<Vec<_>>()),
                probe_gain: (0..probes.len()).map(|j| paired(&|r| r.probes[j])).collect(),
                rho_reduction: mean_rho.iter().zip(&base_rho).map(|(r, b)| 1.0 - r / b).collect(),
                mean_rho,
                probes,
                missing_drop: (!drops.is_empty()).then(|| mean(&drops)),
                test_accuracy_gain: paired(&|r| r.test_accuracy),
            }
        })
        .collect();
    Ok(CompareReport {
        options: CompareOptions {
            strategies,
            ..opts.clone()
        },
        runs,
        strategies: summaries,
        solo_probes,
    })
}

impl CompareReport {
    pub fn summary(&self, strategy: Strategy) -> Option<&StrategySummary> {
        self.strategies.iter().find(|s| s.strategy == strategy)
    }

    /// Plain-text table of the seed means.
    pub fn to_table(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(
            out,
            "{:<14}{:>10}{:>10}{:>22}{:>22}{:>10}",
            "strategy", "test_acc", "gain", "mean_rho", "probes", "miss_drop"
        );
        let list = |v: &[f64]| v.iter().map(|x| format!("{x:.3}")).collect::<Vec<_>>().join("/");
        for s in &self.strategies {
            let _ = writeln!(
                out,
                "{:<14}{:>10.4}{:>+10.4}{:>22}{:>22}{:>10}",
                s.strategy.name(),
                s.test_accuracy,
                s.test_accuracy_gain,
                list(&s.mean_rho),
                list(&s.probes),
                s.missing_drop.map_or("-".into(), |d| format!("{d:.4}"))
            );
        }
        if let Some(solo) = &self.solo_probes {
            let _ = writeln!(out, "solo probes: {}", list(solo));
        }
        out
    }
}
