//! Checkpoints in the tensor container: hyperparameters and vocabulary in the
//! header, one named tensor per weight.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Model, ModelConfig, Params};
use crate::corpus::Vocab;
use crate::error::{Error, Result};
use crate::numerics::Matrix;
use crate::tensorfile::{NamedTensor, TensorFile};

#[derive(Serialize, Deserialize)]
struct CheckpointMeta {
    kind: String,
    config: ModelConfig,
    vocab: Vec<String>,
}

const KIND: &str = "checkpoint";

impl Model {
    pub fn to_tensor_file(&self) -> Result<TensorFile> {
        let meta = CheckpointMeta { kind: KIND.into(), config: self.config, vocab: self.vocab.tokens().to_vec() };
        let mut file = TensorFile::new(serde_json::to_value(meta)?);
        for (name, m) in self.params.tensors() {
            file.push(NamedTensor::new(name, vec![m.rows(), m.cols()], m.data().to_vec()));
        }
        Ok(file)
    }

    pub fn from_tensor_file(file: &TensorFile) -> Result<Self> {
        let meta: CheckpointMeta = serde_json::from_value(file.meta.clone())?;
        if meta.kind != KIND {
            return Err(Error::Format(format!("expected a checkpoint, found {:?}", meta.kind)));
        }
        meta.config.validate()?;
        let vocab = Vocab::new(meta.vocab)?;
        let mut params = Params::zeros(&meta.config, vocab.len());
        let names: Vec<String> = params.tensors().into_iter().map(|(n, _)| n).collect();
        for (slot, name) in params.tensors_mut().into_iter().zip(names) {
            let t = file.get(&name)?;
            if t.shape != [slot.rows(), slot.cols()] {
                return Err(Error::ShapeMismatch(format!("{name}: stored {:?}, expected {:?}", t.shape, slot.shape())));
            }
            *slot = Matrix::from_vec(slot.rows(), slot.cols(), t.data.clone())?;
        }
        Ok(Self { config: meta.config, vocab, params })
    }
}

/// Writes atomically; returns the file's SHA-256.
pub fn save_checkpoint(model: &Model, path: &Path) -> Result<String> {
    model.to_tensor_file()?.save(path)
}

pub fn load_checkpoint(path: &Path) -> Result<Model> {
    Model::from_tensor_file(&TensorFile::load(path)?)
}
