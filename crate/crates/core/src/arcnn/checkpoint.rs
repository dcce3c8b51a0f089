//! Versioned JSON checkpoints holding every named parameter tensor.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ArcnnModel, ModelConfig};
use crate::error::{Error, Result};
use crate::tensornet::Tensor;

pub const CHECKPOINT_FORMAT: &str = "arcnn-ckpt/1";

#[derive(Serialize, Deserialize)]
struct NamedTensor {
    name: String,
    shape: Vec<usize>,
    data: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct Document {
    format: String,
    config: ModelConfig,
    tensors: Vec<NamedTensor>,
}

impl ArcnnModel {
    /// Every parameter tensor with a stable name, in a fixed order.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for (prefix, bb) in [
            ("backbone_reference", &self.backbone_reference),
            ("backbone_sensed", &self.backbone_sensed),
        ] {
            for (i, l) in bb.layers().iter().enumerate() {
                out.push((format!("{prefix}.conv{}.weight", i + 1), &l.weights));
            }
        }
        for (name, l) in super::HEAD_LAYER_NAMES.iter().zip(self.heads.layers()) {
            out.push((format!("{name}.weight"), &l.weights));
            out.push((format!("{name}.bias"), &l.bias));
        }
        out
    }

    fn tensor_slot(&mut self, name: &str) -> Option<&mut Tensor> {
        for (prefix, bb) in [
            ("backbone_reference.", &mut self.backbone_reference),
            ("backbone_sensed.", &mut self.backbone_sensed),
        ] {
            if let Some(rest) = name.strip_prefix(prefix) {
                let idx = match rest {
                    "conv1.weight" => 0,
                    "conv2.weight" => 1,
                    "conv3.weight" => 2,
                    _ => return None,
                };
                let [a, b, c] = bb.layers_mut();
                return [a, b, c].into_iter().nth(idx).map(|l| &mut l.weights);
            }
        }
        self.heads.tensor_mut(name)
    }
}

pub fn checkpoint_to_string(model: &ArcnnModel) -> String {
    let doc = Document {
        format: CHECKPOINT_FORMAT.to_string(),
        config: model.config,
        tensors: model
            .named_tensors()
            .into_iter()
            .map(|(name, t)| NamedTensor {
                name,
                shape: t.shape().to_vec(),
                data: t.data().to_vec(),
            })
            .collect(),
    };
    let mut s = serde_json::to_string(&doc).expect("checkpoint serializes");
    s.push('\n');
    s
}

pub fn checkpoint_from_str(text: &str) -> Result<ArcnnModel> {
    let doc: Document = serde_json::from_str(text).map_err(|e| Error::parse("checkpoint", &e))?;
    if doc.format != CHECKPOINT_FORMAT {
        return Err(Error::Checkpoint(format!(
            "unsupported format '{}' (expected '{CHECKPOINT_FORMAT}')",
            doc.format
        )));
    }
    let mut model = ArcnnModel::new(doc.config, 0)?;
    let expected = model.named_tensors().len();
    let mut seen = std::collections::BTreeSet::new();
    for t in doc.tensors {
        if !seen.insert(t.name.clone()) {
            return Err(Error::Checkpoint(format!("tensor '{}' appears twice", t.name)));
        }
        let slot = model
            .tensor_slot(&t.name)
            .ok_or_else(|| Error::Checkpoint(format!("unknown tensor '{}'", t.name)))?;
        if slot.shape() != t.shape.as_slice() {
            return Err(Error::Checkpoint(format!(
                "tensor '{}' has shape {:?}, model expects {:?}",
                t.name,
                t.shape,
                slot.shape()
            )));
        }
        *slot = Tensor::new(t.shape, t.data)?;
    }
    if seen.len() != expected {
        return Err(Error::Checkpoint(format!(
            "checkpoint holds {} of {expected} tensors",
            seen.len()
        )));
    }
    Ok(model)
}

pub fn save_checkpoint(path: impl AsRef<Path>, model: &ArcnnModel) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, checkpoint_to_string(model)).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<ArcnnModel> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    checkpoint_from_str(&text)
}
