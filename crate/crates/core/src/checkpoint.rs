//! Versioned JSON checkpoints.
//!
//! ```json
//! {
//!   "format": "balfusion-checkpoint",
//!   "version": 1,
//!   "fusion": "concatenation",          // or "summation"
//!   "head_kind": "single_linear",       // or "multi_layer"
//!   "classes": 4,
//!   "input_dims": [16, 16],
//!   "feature_dims": [8, 8],
//!   "encoders": [ { "layers": [LAYER, ...] }, ... ],
//!   "head": { "layers": [LAYER, ...] }
//! }
//! ```
//!
//! where each `LAYER` is
//! `{"rows": out, "cols": in, "activation": "relu"|"identity", "weight": [...], "bias": [...]}`
//! with `weight` in row-major order (`rows × cols` values). Numbers are written
//! in shortest round-trip form, so a save/load cycle is lossless.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::fusion::{Fusion, FusionModel, HeadKind};
use crate::nn::{Activation, DenseLayer, MlpParams};
use crate::{Error, Matrix, Result};

pub const FORMAT: &str = "balfusion-checkpoint";
pub const VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct LayerDoc {
    rows: usize,
    cols: usize,
    activation: Activation,
    weight: Vec<f64>,
    bias: Vec<f64>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct MlpDoc {
    layers: Vec<LayerDoc>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CheckpointDoc {
    format: String,
    version: u32,
    fusion: Fusion,
    head_kind: HeadKind,
    classes: usize,
    input_dims: Vec<usize>,
    feature_dims: Vec<usize>,
    encoders: Vec<MlpDoc>,
    head: MlpDoc,
}

fn mlp_doc(p: &MlpParams) -> MlpDoc {
    MlpDoc {
        layers: p
            .layers
            .iter()
            .map(|l| LayerDoc {
                rows: l.out_dim(),
                cols: l.in_dim(),
                activation: l.activation,
                weight: l.weight.as_slice().to_vec(),
                bias: l.bias.clone(),
            })
            .collect(),
    }
}

fn mlp_from_doc(doc: MlpDoc) -> Result<MlpParams> {
    let layers = doc
        .layers
        .into_iter()
        .map(|l| {
            if l.weight.iter().chain(&l.bias).any(|v| !v.is_finite()) {
                return Err(Error::Format("checkpoint holds non-finite values".into()));
            }
            DenseLayer::new(Matrix::from_vec(l.rows, l.cols, l.weight)?, l.bias, l.activation)
        })
        .collect::<Result<Vec<_>>>()?;
    MlpParams::new(layers)
}

pub fn to_json(model: &FusionModel) -> Result<String> {
    let doc = CheckpointDoc {
        format: FORMAT.to_string(),
        version: VERSION,
        fusion: model.fusion,
        head_kind: model.head_kind,
        classes: model.classes(),
        input_dims: model.input_dims(),
        feature_dims: model.feature_dims(),
        encoders: model.encoders.iter().map(mlp_doc).collect(),
        head: mlp_doc(&model.head),
    };
    Ok(serde_json::to_string_pretty(&doc)?)
}

pub fn from_json(text: &str) -> Result<FusionModel> {
    let doc: CheckpointDoc = serde_json::from_str(text)?;
    if doc.format != FORMAT {
        return Err(Error::Format(format!("not a checkpoint: format {:?}", doc.format)));
    }
    if doc.version != VERSION {
        return Err(Error::Format(format!("unsupported checkpoint version {}", doc.version)));
    }
    let encoders = doc
        .encoders
        .into_iter()
        .map(mlp_from_doc)
        .collect::<Result<Vec<_>>>()?;
    let model = FusionModel::new(encoders, doc.fusion, doc.head_kind, mlp_from_doc(doc.head)?)?;
    if model.classes() != doc.classes
        || model.input_dims() != doc.input_dims
        || model.feature_dims() != doc.feature_dims
    {
        return Err(Error::Format("checkpoint metadata disagrees with its layers".into()));
    }
    Ok(model)
}

pub fn save(model: &FusionModel, path: &Path) -> Result<()> {
    fs::write(path, to_json(model)?).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<FusionModel> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    from_json(&text)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fusion::ModelConfig;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn round_trip_is_lossless() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut cfg = ModelConfig::two_layer(3, 4);
        cfg.head = HeadKind::MultiLayer;
        cfg.head_hidden = vec![6];
        let model = FusionModel::init(&[2, 5, 3], 3, &cfg, &mut rng).unwrap();
        let back = from_json(&to_json(&model).unwrap()).unwrap();
        assert_eq!(back, model);
    }

    #[test]
    fn rejects_wrong_version_and_inconsistent_metadata() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let model = FusionModel::init(&[2, 2], 2, &ModelConfig::two_layer(2, 3), &mut rng).unwrap();
        let text = to_json(&model).unwrap();
        let bumped = text.replace("\"version\": 1", "\"version\": 2");
        assert!(matches!(from_json(&bumped), Err(Error::Format(_))));
        let lying = text.replace("\"classes\": 2", "\"classes\": 5");
        assert!(matches!(from_json(&lying), Err(Error::Format(_))));
    }
}
