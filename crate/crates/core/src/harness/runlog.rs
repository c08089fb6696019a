//! Per-iteration and per-epoch training records and their CSV form.
//!
//! `runlog.csv` has one row per iteration:
//! `iter,epoch,loss,s_sum_0..,rho_0..,q_0..,k_0..`.
//! `epochlog.csv` has one row per epoch, starting with epoch 0 (before any
//! update): `epoch,iter,train_acc,test_acc,test_map,probe_0..`; probe cells
//! are empty on epochs without a scheduled probe. Floats are written with 9
//! significant digits.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterRecord {
    pub iter: usize,
    pub epoch: usize,
    pub loss: f64,
    pub s_sums: Vec<f64>,
    pub rho: Vec<f64>,
    /// Drop probabilities applied at this iteration.
    pub q: Vec<f64>,
    /// Gradient coefficients applied at this iteration.
    pub k: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Iterations completed so far.
    pub iter: usize,
    pub train_accuracy: f64,
    pub test_accuracy: f64,
    pub test_map: f64,
    pub probes: Option<Vec<f64>>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunLog {
    pub modalities: usize,
    pub iters: Vec<IterRecord>,
    pub epochs: Vec<EpochRecord>,
}

fn fmt(v: f64) -> String {
    format!("{v:.8e}")
}

impl RunLog {
    pub fn new(modalities: usize) -> Self {
        Self {
            modalities,
            iters: Vec::new(),
            epochs: Vec::new(),
        }
    }

    pub fn push_iter(&mut self, rec: IterRecord) -> Result<()> {
        if let Some(last) = self.iters.last() {
            if rec.iter <= last.iter {
                return Err(Error::contract(format!(
                    "iteration {} logged after {}",
                    rec.iter, last.iter
                )));
            }
        }
        self.iters.push(rec);
        Ok(())
    }

    pub fn push_epoch(&mut self, rec: EpochRecord) -> Result<()> {
        if let Some(last) = self.epochs.last() {
            if rec.epoch <= last.epoch {
                return Err(Error::contract(format!(
                    "epoch {} logged after {}",
                    rec.epoch, last.epoch
                )));
            }
        }
        self.epochs.push(rec);
        Ok(())
    }

    /// Mean of modality `m`'s `ρ` over all logged iterations.
    pub fn mean_rho(&self, m: usize) -> f64 {
        if self.iters.is_empty() {
            return f64::NAN;
        }
        self.iters.iter().map(|r| r.rho[m]).sum::<f64>() / self.iters.len() as f64
    }

    /// `(epoch, probe accuracies)` for every probed epoch.
    pub fn probe_curves(&self) -> Vec<(usize, Vec<f64>)> {
        self.epochs
            .iter()
            .filter_map(|e| e.probes.clone().map(|p| (e.epoch, p)))
            .collect()
    }

    pub fn last_probes(&self) -> Option<&[f64]> {
        self.epochs.iter().rev().find_map(|e| e.probes.as_deref())
    }

    pub fn final_epoch(&self) -> Option<&EpochRecord> {
        self.epochs.last()
    }

    pub fn iter_csv(&self) -> String {
        let m = self.modalities;
        let mut out = String::from("iter,epoch,loss");
        for name in ["s_sum", "rho", "q", "k"] {
            for i in 0..m {
                let _ = write!(out, ",{name}_{i}");
            }
        }
        out.push('\n');
        for r in &self.iters {
            let _ = write!(out, "{},{},{}", r.iter, r.epoch, fmt(r.loss));
            for v in r.s_sums.iter().chain(&r.rho).chain(&r.q).chain(&r.k) {
                out.push(',');
                out.push_str(&fmt(*v));
            }
            out.push('\n');
        }
        out
    }

    pub fn epoch_csv(&self) -> String {
        let mut out = String::from("epoch,iter,train_acc,test_acc,test_map");
        for i in 0..self.modalities {
            let _ = write!(out, ",probe_{i}");
        }
        out.push('\n');
        for e in &self.epochs {
            let _ = write!(
                out,
                "{},{},{},{},{}",
                e.epoch,
                e.iter,
                fmt(e.train_accuracy),
                fmt(e.test_accuracy),
                fmt(e.test_map)
            );
            for i in 0..self.modalities {
                out.push(',');
                if let Some(p) = &e.probes {
                    out.push_str(&fmt(p[i]));
                }
            }
            out.push('\n');
        }
        out
    }

    /// Writes `runlog.csv` and `epochlog.csv` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let p = dir.join("runlog.csv");
        fs::write(&p, self.iter_csv()).map_err(|e| Error::io(&p, e))?;
        let p = dir.join("epochlog.csv");
        fs::write(&p, self.epoch_csv()).map_err(|e| Error::io(&p, e))
    }
}
