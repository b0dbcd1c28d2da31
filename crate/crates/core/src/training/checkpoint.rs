//! Checkpoints: a JSON manifest next to a flat little-endian tensor blob.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::adam::AdamState;
use super::trainer::{BestSnapshot, Classifier, MetricsRow, TrainConfig, Trainer};
use crate::error::{Error, Result};
use crate::nn::{Precision, Tensor};

pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    /// Element offset into the blob.
    pub offset: usize,
    pub shape: Vec<usize>,
}

/// Every random draw is a function of the seed and these counters.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct RngState {
    pub seed: u64,
    pub epoch: usize,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct BestMeta {
    pub auc: f64,
    pub epoch: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format_version: u32,
    pub kind: String,
    pub dtype: Precision,
    pub model_seed: u64,
    pub model_config: serde_json::Value,
    pub train_config: TrainConfig,
    pub rng: RngState,
    pub adam_step: u64,
    pub stale: usize,
    pub best: Option<BestMeta>,
    pub history: Vec<MetricsRow>,
    pub tensors: Vec<TensorEntry>,
    /// Blob file name, relative to the manifest.
    pub blob: String,
}

fn blob_path(manifest: &Path) -> PathBuf {
    manifest.with_extension("bin")
}

fn ckpt_err(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

pub fn save_checkpoint<M: Classifier>(trainer: &Trainer<M>, path: &Path) -> Result<()> {
    let store = trainer.model.store();
    let dtype = trainer.config.precision;
    let mut groups: Vec<(&str, &[Tensor])> =
        vec![("param", store.values()), ("adam.m", &trainer.adam.m), ("adam.v", &trainer.adam.v)];
    if let Some(b) = &trainer.best {
        groups.push(("best", &b.params));
    }
    let mut tensors = Vec::new();
    let mut blob = Vec::new();
    let mut offset = 0;
    for (prefix, values) in groups {
        for (name, t) in store.names().iter().zip(values) {
            tensors.push(TensorEntry { name: format!("{prefix}/{name}"), offset, shape: t.shape().to_vec() });
            offset += t.len();
            for &x in t.data() {
                match dtype {
                    Precision::F32 => blob.extend_from_slice(&(x as f32).to_le_bytes()),
                    Precision::F64 => blob.extend_from_slice(&x.to_le_bytes()),
                }
            }
        }
    }
    let bin = blob_path(path);
    let manifest = Manifest {
        format_version: CHECKPOINT_FORMAT_VERSION,
        kind: M::KIND.to_string(),
        dtype,
        model_seed: store.seed(),
        model_config: trainer.model.config_value(),
        train_config: trainer.config,
        rng: RngState { seed: trainer.config.seed, epoch: trainer.epoch },
        adam_step: trainer.adam.t,
        stale: trainer.stale,
        best: trainer.best.as_ref().map(|b| BestMeta { auc: b.auc, epoch: b.epoch }),
        history: trainer.history.clone(),
        tensors,
        blob: bin.file_name().and_then(|n| n.to_str()).unwrap_or_default().to_string(),
    };
    std::fs::write(&bin, blob)?;
    std::fs::write(path, serde_json::to_string_pretty(&manifest)?)?;
    Ok(())
}

fn read_blob(bytes: &[u8], dtype: Precision) -> Vec<f64> {
    match dtype {
        Precision::F32 => bytes
            .chunks_exact(4)
            .map(|c| f64::from(f32::from_le_bytes(c.try_into().expect("4 bytes"))))
            .collect(),
        Precision::F64 => bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect(),
    }
}

pub fn read_manifest(path: &Path) -> Result<Manifest> {
    let text = std::fs::read_to_string(path)?;
    let m: Manifest = serde_json::from_str(&text).map_err(|e| ckpt_err(format!("manifest: {e}")))?;
    if m.format_version != CHECKPOINT_FORMAT_VERSION {
        return Err(ckpt_err(format!("unsupported format_version {}", m.format_version)));
    }
    Ok(m)
}

pub fn load_checkpoint<M: Classifier>(path: &Path) -> Result<Trainer<M>> {
    let m = read_manifest(path)?;
    if m.kind != M::KIND {
        return Err(ckpt_err(format!("checkpoint holds a `{}` model, expected `{}`", m.kind, M::KIND)));
    }
    let bin = path.parent().unwrap_or(Path::new(".")).join(&m.blob);
    let data = read_blob(&std::fs::read(&bin)?, m.dtype);

    let mut model = M::from_config_value(m.model_config.clone(), m.model_seed)?;
    let names: Vec<String> = model.store().names().to_vec();
    let fetch = |prefix: &str, name: &str, like: &Tensor| -> Result<Tensor> {
        let key = format!("{prefix}/{name}");
        let e = m.tensors.iter().find(|e| e.name == key).ok_or_else(|| ckpt_err(format!("missing tensor {key}")))?;
        if e.shape != like.shape() {
            return Err(ckpt_err(format!("tensor {key} has shape {:?}, model expects {:?}", e.shape, like.shape())));
        }
        let slice = data
            .get(e.offset..e.offset + like.len())
            .ok_or_else(|| ckpt_err(format!("tensor {key} runs past the end of the blob")))?;
        Tensor::from_vec(&e.shape, slice.to_vec())
    };

    let mut params = Vec::with_capacity(names.len());
    let (mut am, mut av, mut best) = (Vec::new(), Vec::new(), Vec::new());
    for (name, like) in names.iter().zip(model.store().values()) {
        params.push(fetch("param", name, like)?);
        am.push(fetch("adam.m", name, like)?);
        av.push(fetch("adam.v", name, like)?);
        if m.best.is_some() {
            best.push(fetch("best", name, like)?);
        }
    }
    for (dst, src) in model.store_mut().values_mut().iter_mut().zip(params) {
        *dst = src;
    }
    Ok(Trainer {
        config: m.train_config,
        model,
        adam: AdamState { m: am, v: av, t: m.adam_step },
        epoch: m.rng.epoch,
        history: m.history,
        best: m.best.map(|b| BestSnapshot { auc: b.auc, epoch: b.epoch, params: best }),
        stale: m.stale,
    })
}
