//! Synthetic multimodal classification data.
//!
//! Every `(class, modality)` pair gets a prototype: a uniformly random
//! direction scaled to norm `separation[m]`. A sample of class `c` draws each
//! modality independently as `prototype(c, m) + noise_std[m] · N(0, I)`, so
//! `separation[m] / noise_std[m]` controls how discriminative modality `m` is.
//!
//! Determinism. Prototypes come from `ChaCha8Rng::seed_from_u64(seed)`,
//! visited class-major then modality-major. Sample `i` of split `s`
//! (train = 0, test = 1) uses its own generator
//! `ChaCha8Rng::seed_from_u64(splitmix64(seed ^ splitmix64((s << 32) | i)))`
//! and draws its modalities in order, so samples can be generated in any order
//! or in parallel with bitwise-identical results. Labels cycle `i mod C`.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::fusion::{ModalityMask, MultimodalBatch};
use crate::{Error, Matrix, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    pub classes: usize,
    /// Input width of each modality; its length is the modality count.
    pub dims: Vec<usize>,
    /// Prototype norm per modality.
    pub separation: Vec<f64>,
    pub noise_std: Vec<f64>,
    pub n_train: usize,
    pub n_test: usize,
    pub seed: u64,
}

impl SyntheticSpec {
    pub fn modalities(&self) -> usize {
        self.dims.len()
    }

    /// Signal-to-noise ratio `separation / noise_std` per modality.
    pub fn snr(&self) -> Vec<f64> {
        self.separation
            .iter()
            .zip(&self.noise_std)
            .map(|(s, n)| s / n)
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        let m = self.modalities();
        if m == 0 {
            return Err(Error::config("at least one modality is required"));
        }
        if self.separation.len() != m || self.noise_std.len() != m {
            return Err(Error::config(format!(
                "dims, separation and noise_std must all have {m} entries"
            )));
        }
        if self.classes < 2 {
            return Err(Error::config("at least two classes are required"));
        }
        if self.dims.contains(&0) {
            return Err(Error::config("modality dimensions must be > 0"));
        }
        if self.separation.iter().any(|&s| !(s >= 0.0 && s.is_finite())) {
            return Err(Error::config("separation must be finite and >= 0"));
        }
        if self.noise_std.iter().any(|&s| !(s > 0.0 && s.is_finite())) {
            return Err(Error::config("noise_std must be finite and > 0"));
        }
        if self.n_train == 0 {
            return Err(Error::config("n_train must be > 0"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub spec: SyntheticSpec,
    pub train: MultimodalBatch,
    pub test: MultimodalBatch,
}

/// `prototypes[c][m]` for every class and modality.
pub fn prototypes(spec: &SyntheticSpec) -> Vec<Vec<Vec<f64>>> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    (0..spec.classes)
        .map(|_| {
            spec.dims
                .iter()
                .zip(&spec.separation)
                .map(|(&d, &sep)| {
                    let mut v: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
                    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
                    let scale = if norm > 0.0 { sep / norm } else { 0.0 };
                    v.iter_mut().for_each(|x| *x *= scale);
                    v
                })
                .collect()
        })
        .collect()
}

pub fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Generator for sample `index` of `split` (0 = train, 1 = test).
pub fn sample_rng(seed: u64, split: u64, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(splitmix64(seed ^ splitmix64((split << 32) | index)))
}

/// Label and per-modality input rows of one sample.
pub fn generate_sample(
    spec: &SyntheticSpec,
    protos: &[Vec<Vec<f64>>],
    split: u64,
    index: usize,
) -> (usize, Vec<Vec<f64>>) {
    let label = index % spec.classes;
    let mut rng = sample_rng(spec.seed, split, index as u64);
    let rows = protos[label]
        .iter()
        .zip(&spec.noise_std)
        .map(|(proto, &sd)| {
            proto
                .iter()
                .map(|&p| {
                    let z: f64 = rng.sample(StandardNormal);
                    p + sd * z
                })
                .collect()
        })
        .collect();
    (label, rows)
}

fn generate_split(
    spec: &SyntheticSpec,
    protos: &[Vec<Vec<f64>>],
    split: u64,
    n: usize,
) -> Result<MultimodalBatch> {
    let samples: Vec<(usize, Vec<Vec<f64>>)> = (0..n)
        .into_par_iter()
        .map(|i| generate_sample(spec, protos, split, i))
        .collect();
    let labels = samples.iter().map(|(y, _)| *y).collect();
    let inputs = (0..spec.modalities())
        .map(|m| {
            let mut data = Vec::with_capacity(n * spec.dims[m]);
            for (_, rows) in &samples {
                data.extend_from_slice(&rows[m]);
            }
            Matrix::from_vec(n, spec.dims[m], data)
        })
        .collect::<Result<Vec<_>>>()?;
    MultimodalBatch::new(inputs, labels)
}

pub fn generate(spec: &SyntheticSpec) -> Result<Dataset> {
    spec.validate()?;
    let protos = prototypes(spec);
    Ok(Dataset {
        spec: spec.clone(),
        train: generate_split(spec, &protos, 0, spec.n_train)?,
        test: generate_split(spec, &protos, 1, spec.n_test)?,
    })
}

/// Zeroes each `(sample, modality)` input independently with probability
/// `miss_probs[m]`, using the stream of [`ModalityMask::bernoulli`].
pub fn corrupt_missing<R: Rng + ?Sized>(
    batch: &MultimodalBatch,
    miss_probs: &[f64],
    rng: &mut R,
) -> Result<MultimodalBatch> {
    if miss_probs.len() != batch.modalities() {
        return Err(Error::config(format!(
            "{} missing probabilities for {} modalities",
            miss_probs.len(),
            batch.modalities()
        )));
    }
    if miss_probs.iter().any(|p| !(0.0..=1.0).contains(p)) {
        return Err(Error::config("missing probabilities must lie in [0, 1]"));
    }
    let mask = ModalityMask::bernoulli(miss_probs, batch.len(), rng);
    let mut out = batch.clone();
    for (m, x) in out.inputs.iter_mut().enumerate() {
        for i in 0..x.rows() {
            if mask.is_dropped(i, m) {
                x.row_mut(i).fill(0.0);
            }
        }
    }
    Ok(out)
}

/// Writes `spec.json`, `train.csv` and `test.csv` into `dir`.
///
/// CSV columns: `label`, then `m{m}_{j}` for every modality `m` and input
/// coordinate `j`. Values use the shortest decimal form that parses back to the
/// same `f64`.
pub fn export(dataset: &Dataset, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let spec_path = dir.join("spec.json");
    fs::write(&spec_path, serde_json::to_string_pretty(&dataset.spec)?)
        .map_err(|e| Error::io(&spec_path, e))?;
    write_split(&dataset.train, &dir.join("train.csv"))?;
    write_split(&dataset.test, &dir.join("test.csv"))
}

fn write_split(batch: &MultimodalBatch, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec!["label".to_string()];
    for (m, x) in batch.inputs.iter().enumerate() {
        header.extend((0..x.cols()).map(|j| format!("m{m}_{j}")));
    }
    w.write_record(&header)?;
    for i in 0..batch.len() {
        let mut rec = vec![batch.labels[i].to_string()];
        for x in &batch.inputs {
            rec.extend(x.row(i).iter().map(|v| v.to_string()));
        }
        w.write_record(&rec)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Reads a directory written by [`export`].
pub fn import(dir: &Path) -> Result<Dataset> {
    let spec_path = dir.join("spec.json");
    let text = fs::read_to_string(&spec_path).map_err(|e| Error::io(&spec_path, e))?;
    let spec: SyntheticSpec = serde_json::from_str(&text)?;
    spec.validate()?;
    Ok(Dataset {
        train: read_split(&spec, &dir.join("train.csv"))?,
        test: read_split(&spec, &dir.join("test.csv"))?,
        spec,
    })
}

fn read_split(spec: &SyntheticSpec, path: &Path) -> Result<MultimodalBatch> {
    let mut r = csv::Reader::from_path(path)?;
    let expected = 1 + spec.dims.iter().sum::<usize>();
    let width = r.headers()?.len();
    if width != expected {
        return Err(Error::Format(format!(
            "{}: {width} columns, spec implies {expected}",
            path.display()
        )));
    }
    let mut labels = Vec::new();
    let mut data: Vec<Vec<f64>> = vec![Vec::new(); spec.modalities()];
    for rec in r.records() {
        let rec = rec?;
        let parse_err = |v: &str| Error::Format(format!("{}: bad value {v:?}", path.display()));
        let label: usize = rec[0].parse().map_err(|_| parse_err(&rec[0]))?;
        if label >= spec.classes {
            return Err(Error::Format(format!("{}: label {label} out of range", path.display())));
        }
        labels.push(label);
        let mut col = 1;
        for (m, &d) in spec.dims.iter().enumerate() {
            for v in rec.iter().skip(col).take(d) {
                data[m].push(v.parse().map_err(|_| parse_err(v))?);
            }
            col += d;
        }
    }
    let n = labels.len();
    let inputs = data
        .into_iter()
        .zip(&spec.dims)
        .map(|(d, &w)| Matrix::from_vec(n, w, d))
        .collect::<Result<Vec<_>>>()?;
    MultimodalBatch::new(inputs, labels)
}
