use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::optim::OptimizerState;
use super::TrainConfig;
use crate::data::BatchCursor;
use crate::error::{Error, Result};
use crate::models::{ModelConfig, Params, TransformerModel};
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"LETCKPT1";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CheckpointKind {
    Model,
    Teacher,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TensorGroup {
    Param,
    AdamM,
    AdamV,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub name: String,
    pub group: TensorGroup,
    pub shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub kind: CheckpointKind,
    pub step: u64,
    pub model_config: ModelConfig,
    pub train_config: Option<TrainConfig>,
    pub cursor: BatchCursor,
    pub param_digest: String,
    pub manifest: Vec<ManifestEntry>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub params: Params,
    pub optimizer: Option<OptimizerState>,
}

impl Checkpoint {
    pub fn new(
        kind: CheckpointKind,
        model: &TransformerModel,
        train_config: Option<TrainConfig>,
        optimizer: Option<OptimizerState>,
        cursor: BatchCursor,
    ) -> Self {
        let params = model.params().clone();
        let mut manifest: Vec<ManifestEntry> = params
            .iter()
            .map(|(n, t)| ManifestEntry {
                name: n.to_string(),
                group: TensorGroup::Param,
                shape: t.shape().to_vec(),
            })
            .collect();
        if let Some(opt) = &optimizer {
            for (group, tensors) in [(TensorGroup::AdamM, &opt.m), (TensorGroup::AdamV, &opt.v)] {
                manifest.extend(params.names().iter().zip(tensors).map(|(n, t)| ManifestEntry {
                    name: n.clone(),
                    group,
                    shape: t.shape().to_vec(),
                }));
            }
        }
        Self {
            header: CheckpointHeader {
                kind,
                step: optimizer.as_ref().map_or(0, |o| o.step),
                model_config: model.config().clone(),
                train_config,
                cursor,
                param_digest: params.digest(),
                manifest,
            },
            params,
            optimizer,
        }
    }

    pub fn model(&self) -> Result<TransformerModel> {
        TransformerModel::from_params(self.header.model_config.clone(), self.params.clone())
    }

    fn tensors(&self) -> impl Iterator<Item = &Tensor> {
        let opt = self.optimizer.iter().flat_map(|o| o.m.iter().chain(o.v.iter()));
        self.params.tensors().iter().chain(opt)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = serde_json::to_vec(&self.header)?;
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for t in self.tensors() {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        // Write-then-rename so a crash never leaves a truncated checkpoint behind.
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|reason| Error::Format {
            path: path.to_path_buf(),
            reason,
        })
    }

    pub fn from_bytes(bytes: &[u8]) -> std::result::Result<Self, String> {
        if bytes.len() < 16 || &bytes[..8] != CHECKPOINT_MAGIC {
            return Err("missing LETCKPT1 header".into());
        }
        let hlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let body = bytes.get(16..16usize.saturating_add(hlen)).ok_or("truncated header")?;
        let header: CheckpointHeader = serde_json::from_slice(body).map_err(|e| format!("bad header: {e}"))?;
        let mut values = bytes[16 + hlen..].chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8")));
        let expected: usize = header.manifest.iter().map(|e| e.shape.iter().product::<usize>()).sum();
        if bytes.len() - 16 - hlen != expected * 8 {
            return Err(format!(
                "payload holds {} bytes, manifest needs {}",
                bytes.len() - 16 - hlen,
                expected * 8
            ));
        }
        let mut params = Params::new();
        let mut m = Vec::new();
        let mut v = Vec::new();
        for e in &header.manifest {
            let n = e.shape.iter().product();
            let t = Tensor::new(e.shape.clone(), values.by_ref().take(n).collect()).map_err(|e| e.to_string())?;
            match e.group {
                TensorGroup::Param => params.push(e.name.clone(), t),
                TensorGroup::AdamM => m.push(t),
                TensorGroup::AdamV => v.push(t),
            }
        }
        if params.digest() != header.param_digest {
            return Err("parameter digest does not match the header".into());
        }
        let optimizer = if m.is_empty() {
            None
        } else {
            if m.len() != params.len() || v.len() != params.len() {
                return Err("optimizer moments do not cover every parameter".into());
            }
            Some(OptimizerState { step: header.step, m, v })
        };
        Ok(Self {
            header,
            params,
            optimizer,
        })
    }
}
