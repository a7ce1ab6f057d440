//! Versioned single-file model checkpoints.
//!
//! Layout: `CSEGCKPT`, a little-endian `u32` format version, a `u64` header
//! length, the JSON header, then every parameter tensor followed by every
//! batch-norm mean and variance as little-endian `f32`.

use std::fs;
use std::path::Path;

use compseg_tensor::Tensor;
use serde::{Deserialize, Serialize};

use crate::compnet::{Model, NetConfig};
use crate::dataset::write_atomic;
use crate::error::{Error, Result};
use crate::meta_codec::MetadataSchema;

const MAGIC: &[u8; 8] = b"CSEGCKPT";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorInfo {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub net: NetConfig,
    /// Schema the network's metadata layers were built for.
    pub model_schema: String,
    /// Fingerprint of the dataset schema used for training.
    pub dataset_fingerprint: String,
    pub epoch: usize,
    pub params: Vec<TensorInfo>,
    pub batch_norm: Vec<TensorInfo>,
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub model: Model<f32>,
}

impl Checkpoint {
    pub fn new(model: Model<f32>, dataset_schema: &MetadataSchema, epoch: usize) -> Self {
        let header = CheckpointHeader {
            net: model.config().clone(),
            model_schema: model.schema.to_toml_string(),
            dataset_fingerprint: dataset_schema.fingerprint(),
            epoch,
            params: model
                .params
                .entries()
                .iter()
                .map(|e| TensorInfo {
                    name: e.name.clone(),
                    shape: e.value.shape().to_vec(),
                })
                .collect(),
            batch_norm: model
                .bn
                .entries()
                .iter()
                .map(|e| TensorInfo {
                    name: e.name.clone(),
                    shape: vec![e.mean.len()],
                })
                .collect(),
        };
        Self { header, model }
    }

    /// Refuse evaluation on data whose schema differs from training.
    pub fn check_dataset(&self, schema: &MetadataSchema) -> Result<()> {
        let found = schema.fingerprint();
        if found != self.header.dataset_fingerprint {
            return Err(Error::FingerprintMismatch {
                expected: self.header.dataset_fingerprint.clone(),
                found,
            });
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = serde_json::to_vec(&self.header).map_err(|e| Error::Checkpoint(e.to_string()))?;
        let mut out = Vec::with_capacity(header.len() + 4 * self.model.num_params() + 32);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for e in self.model.params.entries() {
            e.value.data().iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes()));
        }
        for e in self.model.bn.entries() {
            e.mean.iter().chain(&e.var).for_each(|v| out.extend_from_slice(&v.to_le_bytes()));
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::Checkpoint(m.to_string());
        if bytes.len() < 20 || &bytes[..8] != MAGIC {
            return Err(bad("missing magic bytes"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported format version {version}")));
        }
        let len = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
        let body = bytes.get(20..).ok_or_else(|| bad("truncated"))?;
        let raw = body.get(..len).ok_or_else(|| bad("truncated header"))?;
        let header: CheckpointHeader = serde_json::from_slice(raw).map_err(|e| Error::Checkpoint(e.to_string()))?;
        let schema = MetadataSchema::from_toml_str(&header.model_schema)?;
        let mut model = Model::<f32>::new(&header.net, &schema, 0)?;

        let mut floats = body[len..].chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")));
        let expected: usize = header.params.iter().map(|t| t.shape.iter().product::<usize>()).sum::<usize>()
            + header.batch_norm.iter().map(|t| 2 * t.shape[0]).sum::<usize>();
        if body.len() - len != 4 * expected {
            return Err(Error::Checkpoint(format!(
                "payload holds {} bytes, header describes {}",
                body.len() - len,
                4 * expected
            )));
        }
        if header.params.len() != model.params.len() || header.batch_norm.len() != model.bn.entries().len() {
            return Err(bad("tensor inventory does not match the network configuration"));
        }
        for (i, info) in header.params.iter().enumerate() {
            let entry = &model.params.entries()[i];
            if entry.name != info.name || entry.value.shape() != info.shape.as_slice() {
                return Err(Error::Checkpoint(format!("parameter {} does not match the network", info.name)));
            }
            let n: usize = info.shape.iter().product();
            *model.params.by_index_mut(i) = Tensor::new(info.shape.clone(), floats.by_ref().take(n).collect())?;
        }
        for (entry, info) in model.bn.entries_mut().iter_mut().zip(&header.batch_norm) {
            if entry.name != info.name || entry.mean.len() != info.shape[0] {
                return Err(Error::Checkpoint(format!("batch norm {} does not match the network", info.name)));
            }
            entry.mean = floats.by_ref().take(info.shape[0]).collect();
            entry.var = floats.by_ref().take(info.shape[0]).collect();
        }
        Ok(Self { header, model })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path).map_err(|e| Error::io(path, e))?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn model() -> Model<f32> {
        let cfg = NetConfig {
            stage_channels: vec![2, 4, 6],
            input_hw: (8, 8),
            meta_head_dim: 4,
            ..NetConfig::default()
        };
        let mut m = Model::new(&cfg, &MetadataSchema::builtin("mms2").unwrap(), 3).unwrap();
        m.bn.entries_mut()[0].mean[0] = 0.25;
        m
    }

    #[test]
    fn round_trip_preserves_every_value() {
        let schema = MetadataSchema::builtin("mms2").unwrap();
        let ck = Checkpoint::new(model(), &schema, 7);
        let back = Checkpoint::from_bytes(&ck.to_bytes().unwrap()).unwrap();
        assert_eq!(back.header, ck.header);
        assert_eq!(back.model.params, ck.model.params);
        assert_eq!(back.model.bn, ck.model.bn);
    }

    #[test]
    fn corruption_is_detected() {
        let schema = MetadataSchema::builtin("mms2").unwrap();
        let bytes = Checkpoint::new(model(), &schema, 0).to_bytes().unwrap();
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 4]).is_err());
        let mut wrong = bytes.clone();
        wrong[0] = b'X';
        assert!(Checkpoint::from_bytes(&wrong).is_err());
        let mut version = bytes;
        version[8] = 9;
        assert!(matches!(Checkpoint::from_bytes(&version), Err(Error::Checkpoint(_))));
    }

    #[test]
    fn foreign_schema_is_refused() {
        let ck = Checkpoint::new(model(), &MetadataSchema::builtin("mms2").unwrap(), 0);
        let other = MetadataSchema::builtin("camus").unwrap();
        assert!(matches!(ck.check_dataset(&other), Err(Error::FingerprintMismatch { .. })));
    }
}
