//! Versioned checkpoints: one line of JSON manifest, then raw blobs.
//!
//! Every blob is the little-endian `f64` payload of one tensor, written in
//! manifest order: dense weights and biases layer by layer, then optimizer
//! velocity buffers in the same order.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::net::{Model, Sgd, SgdConfig, Topology};
use crate::tensor::{Seed, Tensor};

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlobEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

impl BlobEntry {
    fn len(&self) -> usize {
        self.shape.iter().product()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    pub topology: Topology,
    pub seed: Seed,
    /// Number of completed epochs.
    pub epoch: usize,
    pub sgd: Option<SgdConfig>,
    pub blobs: Vec<BlobEntry>,
}

/// Everything needed to continue a training run.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: Model,
    pub optimizer: Option<Sgd>,
    pub seed: Seed,
    pub epoch: usize,
}

fn param_names(model: &Model) -> Vec<String> {
    let mut names = Vec::new();
    for (i, layer) in model.network.layers.iter().enumerate() {
        if let crate::net::Layer::Dense(_) = layer {
            names.push(format!("layer{i}.weights"));
            names.push(format!("layer{i}.bias"));
        }
    }
    names
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let params = self.model.network.params();
        let mut tensors: Vec<(String, &Tensor)> = param_names(&self.model).into_iter().zip(params).collect();
        if let Some(opt) = &self.optimizer {
            if opt.velocity.len() != tensors.len() {
                return Err(Error::ModelMismatch(format!(
                    "{} velocity buffers for {} parameters",
                    opt.velocity.len(),
                    tensors.len()
                )));
            }
            let names: Vec<String> = tensors.iter().map(|(n, _)| format!("{n}.velocity")).collect();
            tensors.extend(names.into_iter().zip(&opt.velocity));
        }
        let manifest = Manifest {
            version: CHECKPOINT_VERSION,
            topology: self.model.topology.clone(),
            seed: self.seed,
            epoch: self.epoch,
            sgd: self.optimizer.as_ref().map(|o| o.config),
            blobs: tensors
                .iter()
                .map(|(name, t)| BlobEntry {
                    name: name.clone(),
                    shape: t.shape().to_vec(),
                })
                .collect(),
        };
        let mut out = serde_json::to_vec(&manifest).map_err(|e| Error::CorruptManifest(e.to_string()))?;
        out.push(b'\n');
        for (_, t) in &tensors {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let split = bytes
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| Error::CorruptManifest("no manifest terminator".into()))?;
        let header = &bytes[..split];
        let raw: serde_json::Value =
            serde_json::from_slice(header).map_err(|e| Error::CorruptManifest(e.to_string()))?;
        let version = raw
            .get("version")
            .and_then(|v| v.as_u64())
            .ok_or_else(|| Error::CorruptManifest("missing version".into()))?;
        if version != CHECKPOINT_VERSION as u64 {
            return Err(Error::VersionMismatch {
                found: version.min(u32::MAX as u64) as u32,
                expected: CHECKPOINT_VERSION,
            });
        }
        let manifest: Manifest = serde_json::from_value(raw).map_err(|e| Error::CorruptManifest(e.to_string()))?;

        let mut model = Model::new(manifest.topology.clone(), manifest.seed)?;
        let names = param_names(&model);
        let mut expected: Vec<(String, Vec<usize>)> = names
            .iter()
            .cloned()
            .zip(model.network.params().iter().map(|t| t.shape().to_vec()))
            .collect();
        if manifest.sgd.is_some() {
            let vel: Vec<_> = expected.iter().map(|(n, s)| (format!("{n}.velocity"), s.clone())).collect();
            expected.extend(vel);
        }
        let listed: Vec<(String, Vec<usize>)> =
            manifest.blobs.iter().map(|b| (b.name.clone(), b.shape.clone())).collect();
        if listed != expected {
            return Err(Error::CorruptManifest("blob list does not match the topology".into()));
        }

        let mut payload = &bytes[split + 1..];
        let mut tensors = Vec::with_capacity(manifest.blobs.len());
        for blob in &manifest.blobs {
            let want = blob.len() * 8;
            if payload.len() < want {
                return Err(Error::BlobLengthMismatch {
                    name: blob.name.clone(),
                    expected: want,
                    found: payload.len(),
                });
            }
            let data = payload[..want]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                .collect();
            tensors.push(Tensor::from_vec(blob.shape.clone(), data)?);
            payload = &payload[want..];
        }
        if !payload.is_empty() {
            return Err(Error::BlobLengthMismatch {
                name: "<end of file>".into(),
                expected: 0,
                found: payload.len(),
            });
        }

        let n_params = names.len();
        let mut tensors = tensors.into_iter();
        for slot in model.network.params_mut() {
            *slot = tensors.next().expect("blob count checked");
        }
        let optimizer = manifest.sgd.map(|config| Sgd {
            config,
            velocity: tensors.by_ref().take(n_params).collect(),
        });
        Ok(Self {
            model,
            optimizer,
            seed: manifest.seed,
            epoch: manifest.epoch,
        })
    }
}

pub fn save_checkpoint(path: &Path, checkpoint: &Checkpoint) -> Result<()> {
    fs::write(path, checkpoint.to_bytes()?)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    Checkpoint::from_bytes(&fs::read(path)?)
}
