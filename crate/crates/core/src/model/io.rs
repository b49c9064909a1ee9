use std::collections::BTreeSet;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{LayerWeights, ModelConfig, TransformerModel, Vocabulary};
use crate::container::{Container, Tensor, TensorData};
use crate::error::{format_err, Result};
use crate::tensor::Matrix;
use crate::TokenId;

pub const MODEL_FORMAT: &str = "glitchlab-model/1";

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ModelHeader {
    version: String,
    config: ModelConfig,
    vocab: Vocabulary,
    /// Sorted ascending; absent for models without ground truth.
    planted_glitch_set: Option<Vec<TokenId>>,
}

pub(crate) fn to_container(model: &TransformerModel) -> Container {
    let header = ModelHeader {
        version: MODEL_FORMAT.to_string(),
        config: model.config.clone(),
        vocab: model.vocab.clone(),
        planted_glitch_set: model.planted.as_ref().map(|s| s.iter().copied().collect()),
    };
    let tensors = model
        .named_tensors()
        .into_iter()
        .map(|(name, m)| Tensor {
            name,
            shape: vec![m.rows(), m.cols()],
            data: TensorData::F32(m.data().to_vec()),
        })
        .collect();
    Container {
        format: MODEL_FORMAT.to_string(),
        header: serde_json::to_value(header).expect("header serializes"),
        tensors,
    }
}

pub(crate) fn from_container(c: &Container) -> Result<TransformerModel> {
    let header: ModelHeader =
        serde_json::from_value(c.header.clone()).map_err(|e| format_err(0, format!("bad model header: {e}")))?;
    if header.version != MODEL_FORMAT {
        return Err(format_err(0, format!("unsupported model version '{}'", header.version)));
    }
    let matrix = |name: &str| -> Result<Matrix> {
        let t = c
            .tensor(name)
            .ok_or_else(|| format_err(0, format!("missing tensor '{name}'")))?;
        match (&t.data, t.shape.as_slice()) {
            (TensorData::F32(v), &[r, cc]) => Matrix::from_vec(r, cc, v.clone()),
            _ => Err(format_err(0, format!("tensor '{name}' must be a 2-D f32 blob"))),
        }
    };
    let mut layers = Vec::with_capacity(header.config.n_layers);
    for i in 0..header.config.n_layers {
        layers.push(LayerWeights {
            wq: matrix(&format!("layers.{i}.wq"))?,
            wk: matrix(&format!("layers.{i}.wk"))?,
            wv: matrix(&format!("layers.{i}.wv"))?,
            wo: matrix(&format!("layers.{i}.wo"))?,
            up: matrix(&format!("layers.{i}.up"))?,
            down: matrix(&format!("layers.{i}.down"))?,
        });
    }
    let model = TransformerModel::new(
        header.config,
        matrix("token_embedding")?,
        matrix("position_embedding")?,
        layers,
        matrix("unembedding")?,
        header.vocab,
    )?;
    match header.planted_glitch_set {
        Some(ids) => model.with_planted(ids.into_iter().collect::<BTreeSet<_>>()),
        None => Ok(model),
    }
}

pub fn save_model(model: &TransformerModel, path: &Path) -> Result<()> {
    to_container(model).write(path)
}

pub fn load_model(path: &Path) -> Result<TransformerModel> {
    from_container(&Container::read(path, MODEL_FORMAT)?)
}
