//! Binary checkpoint format.
//!
//! Layout: the 8-byte magic `CLIPSCKP`, a little-endian `u32` format version,
//! a little-endian `u64` header length, the JSON header, then every parameter
//! value as little-endian `f64` in header order.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{ClipsError, Result};
use crate::model::{ClipsModel, ModelConfig};
use crate::scalar::Scalar;
use crate::tensor::Matrix;
use crate::text::Vocab;
use crate::training::Stage;

pub const MAGIC: &[u8; 8] = b"CLIPSCKP";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub checkpoint_id: String,
    pub stage: Stage,
    pub scalar: String,
    pub model: ModelConfig,
    pub vocab: Vec<String>,
    pub params: Vec<ParamEntry>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub values: Vec<f64>,
}

fn content_id(model: &ModelConfig, values: &[f64]) -> String {
    let mut h = Sha256::new();
    h.update(serde_json::to_vec(model).expect("config serialises"));
    for v in values {
        h.update(v.to_le_bytes());
    }
    h.finalize().iter().take(8).map(|b| format!("{b:02x}")).collect()
}

impl Checkpoint {
    pub fn from_model<T: Scalar>(model: &ClipsModel<T>, vocab: &Vocab, stage: Stage) -> Self {
        let store = model.params();
        let mut params = Vec::with_capacity(store.len());
        let mut values = Vec::with_capacity(store.num_scalars());
        for id in store.ids() {
            let m = store.get(id);
            params.push(ParamEntry { name: store.name(id).to_owned(), rows: m.rows(), cols: m.cols() });
            values.extend(m.data().iter().map(|v| v.to_f64_lossy()));
        }
        let header = CheckpointHeader {
            checkpoint_id: content_id(model.config(), &values),
            stage,
            scalar: T::NAME.to_owned(),
            model: model.config().clone(),
            vocab: vocab.tokens().to_vec(),
            params,
        };
        Self { header, values }
    }

    pub fn id(&self) -> &str {
        &self.header.checkpoint_id
    }

    pub fn vocab(&self) -> Result<Vocab> {
        Vocab::from_tokens(self.header.vocab.clone())
    }

    /// Rebuilds the model, matching parameters by name and shape.
    pub fn to_model<T: Scalar>(&self) -> Result<ClipsModel<T>> {
        let mut model = ClipsModel::<T>::new(self.header.model.clone(), 0)
            .map_err(|e| ClipsError::Checkpoint(format!("stored model config rejected: {e}")))?;
        if model.params().len() != self.header.params.len() {
            return Err(ClipsError::Checkpoint(format!(
                "checkpoint has {} parameters, model expects {}",
                self.header.params.len(),
                model.params().len()
            )));
        }
        let mut offset = 0;
        for e in &self.header.params {
            let id = model
                .params()
                .id(&e.name)
                .ok_or_else(|| ClipsError::Checkpoint(format!("unknown parameter {}", e.name)))?;
            let slot = model.params_mut().get_mut(id);
            if slot.shape() != (e.rows, e.cols) {
                return Err(ClipsError::Checkpoint(format!(
                    "parameter {} is {}x{}, model expects {:?}",
                    e.name,
                    e.rows,
                    e.cols,
                    slot.shape()
                )));
            }
            let n = e.rows * e.cols;
            let data = self
                .values
                .get(offset..offset + n)
                .ok_or_else(|| ClipsError::Checkpoint("truncated parameter data".into()))?;
            *slot = Matrix::from_vec(e.rows, e.cols, data.iter().map(|&v| T::from_f64_lossy(v)).collect());
            offset += n;
        }
        if offset != self.values.len() {
            return Err(ClipsError::Checkpoint("trailing parameter data".into()));
        }
        Ok(model)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header = serde_json::to_vec(&self.header).expect("header serialises");
        let mut out = Vec::with_capacity(20 + header.len() + 8 * self.values.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for v in &self.values {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| ClipsError::Checkpoint(m.to_owned());
        if bytes.len() < 20 || &bytes[..8] != MAGIC {
            return Err(bad("not a checkpoint file"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != FORMAT_VERSION {
            return Err(ClipsError::Checkpoint(format!(
                "unsupported checkpoint version {version} (expected {FORMAT_VERSION})"
            )));
        }
        let hlen = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
        let body = bytes.get(20..20usize.saturating_add(hlen)).ok_or_else(|| bad("truncated header"))?;
        let header: CheckpointHeader =
            serde_json::from_slice(body).map_err(|e| ClipsError::Checkpoint(format!("bad header: {e}")))?;
        let data = &bytes[20 + hlen..];
        if data.len() % 8 != 0 {
            return Err(bad("parameter data is not a whole number of values"));
        }
        let values: Vec<f64> =
            data.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
        let expected: usize = header.params.iter().map(|p| p.rows * p.cols).sum();
        if values.len() != expected {
            return Err(ClipsError::Checkpoint(format!("{} values stored, header lists {expected}", values.len())));
        }
        Ok(Self { header, values })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir)?;
        }
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ModelConfig {
        ModelConfig {
            image_size: 16,
            embed_dim: 8,
            n_heads: 2,
            n_layers_vision: 1,
            n_layers_text: 1,
            n_layers_decoder: 1,
            input_token_len: 10,
            output_token_len: 4,
            n_learnable_tokens: 4,
            ..ModelConfig::default()
        }
    }

    #[test]
    fn round_trip() {
        let m = ClipsModel::<f32>::new(tiny(), 5).unwrap();
        let ck = Checkpoint::from_model(&m, &Vocab::toy(), Stage::Pretrain);
        let back = Checkpoint::from_bytes(&ck.to_bytes()).unwrap();
        assert_eq!(back, ck);
        let m2 = back.to_model::<f32>().unwrap();
        for id in m.params().ids() {
            assert_eq!(m.params().get(id), m2.params().get(id));
        }
        assert_eq!(Checkpoint::from_model(&m2, &Vocab::toy(), Stage::Pretrain).id(), ck.id());
    }

    #[test]
    fn rejects_corruption() {
        let m = ClipsModel::<f64>::new(tiny(), 5).unwrap();
        let mut bytes = Checkpoint::from_model(&m, &Vocab::toy(), Stage::Finetune).to_bytes();
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 3]).is_err());
        bytes[8] = 9;
        let e = Checkpoint::from_bytes(&bytes).unwrap_err();
        assert!(e.to_string().contains("version 9"));
        assert!(Checkpoint::from_bytes(b"garbage").is_err());
    }
}
