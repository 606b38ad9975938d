//! Safetensors checkpoints: trainable parameters (adapters, consolidation,
//! fusion, head), Adam moments, and a JSON metadata record with the config,
//! its hash, progress counters and the shuffle stream position.
//!
//! Frozen weights are not stored; they are rebuilt from their seeds.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use candle_core::{Device, Tensor};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::harness::config::ExperimentConfig;
use crate::harness::model::Model;
use crate::harness::optim::{Adam, STATE_M, STATE_V};

const META_KEY: &str = "flowtrace";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Position of a ChaCha8 stream.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: String,
    pub stream: u64,
    /// `u128` as decimal text (JSON numbers cannot hold it).
    pub word_pos: String,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        Self {
            seed: crate::raster::to_hex(&rng.get_seed()),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos().to_string(),
        }
    }

    pub fn restore(&self) -> Result<ChaCha8Rng> {
        use rand::SeedableRng;
        let bad = |msg: &str| Error::Format { id: "rng".into(), msg: msg.into() };
        if self.seed.len() != 64 {
            return Err(bad("seed must be 64 hex digits"));
        }
        let mut seed = [0u8; 32];
        for (i, b) in seed.iter_mut().enumerate() {
            *b = u8::from_str_radix(&self.seed[2 * i..2 * i + 2], 16).map_err(|_| bad("seed is not hex"))?;
        }
        let pos: u128 = self.word_pos.parse().map_err(|_| bad("word position is not an integer"))?;
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(pos);
        Ok(rng)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub version: u32,
    pub config_hash: String,
    pub config: ExperimentConfig,
    /// Last completed epoch (1-based).
    pub epoch: usize,
    /// Optimizer updates so far.
    pub step: usize,
    pub best_val_f1: Option<f64>,
    pub val_f1: Option<f64>,
    pub rng: RngState,
}

pub fn save_checkpoint(path: &Path, model: &Model, opt: &Adam, meta: &CheckpointMeta) -> Result<()> {
    let mut tensors: BTreeMap<String, Tensor> = BTreeMap::new();
    for (name, var) in model.store.trainable() {
        tensors.insert(name.clone(), var.as_detached_tensor().contiguous()?);
    }
    for (k, t) in opt.state_tensors() {
        tensors.insert(k, t.contiguous()?);
    }
    let info = HashMap::from([(META_KEY.to_string(), serde_json::to_string(meta)?)]);
    let bytes = safetensors::serialize(tensors.iter().map(|(k, v)| (k.as_str(), v)), Some(info))?;
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Metadata and every stored tensor.
pub fn read_checkpoint(path: &Path, device: &Device) -> Result<(CheckpointMeta, BTreeMap<String, Tensor>)> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let id = path.display().to_string();
    let (_, header) = safetensors::SafeTensors::read_metadata(&bytes)
        .map_err(|e| Error::Format { id: id.clone(), msg: e.to_string() })?;
    let json = header
        .metadata()
        .as_ref()
        .and_then(|m| m.get(META_KEY))
        .ok_or_else(|| Error::Format { id: id.clone(), msg: "missing checkpoint metadata".into() })?;
    let meta: CheckpointMeta =
        serde_json::from_str(json).map_err(|e| Error::Format { id: id.clone(), msg: e.to_string() })?;
    if meta.version != CHECKPOINT_VERSION {
        return Err(Error::Format { id, msg: format!("unsupported checkpoint version {}", meta.version) });
    }
    let tensors = candle_core::safetensors::load_buffer(&bytes, device)?.into_iter().collect();
    Ok((meta, tensors))
}

/// A model restored from a checkpoint plus its optimizer state.
pub struct Restored {
    pub model: Model,
    pub optimizer: Adam,
    pub meta: CheckpointMeta,
}

/// Rebuilds the model stored at `path`. When `expected` is given, its hash
/// must equal the one recorded in the checkpoint.
pub fn load_checkpoint(path: &Path, expected: Option<&ExperimentConfig>, device: &Device) -> Result<Restored> {
    let (meta, tensors) = read_checkpoint(path, device)?;
    let recorded = meta.config.hash()?;
    if recorded != meta.config_hash {
        return Err(Error::CheckpointMismatch { expected: meta.config_hash.clone(), found: recorded });
    }
    if let Some(cfg) = expected {
        let want = cfg.hash()?;
        if want != meta.config_hash {
            return Err(Error::CheckpointMismatch { expected: want, found: meta.config_hash.clone() });
        }
    }
    let model = Model::new(&meta.config, device)?;
    for (name, var) in model.store.trainable() {
        let t = tensors.get(name).ok_or_else(|| Error::Format {
            id: name.clone(),
            msg: "trainable parameter missing from checkpoint".into(),
        })?;
        if t.dims() != var.dims() {
            return Err(Error::Format { id: name.clone(), msg: format!("shape {:?} vs {:?}", t.dims(), var.dims()) });
        }
        var.set(&t.to_dtype(model.store.dtype())?)?;
    }
    if let Some(extra) = tensors
        .keys()
        .find(|k| !k.starts_with(STATE_M) && !k.starts_with(STATE_V) && model.store.get(k).is_none_or(|p| !p.trainable))
    {
        return Err(Error::Format { id: extra.clone(), msg: "tensor does not belong to this model".into() });
    }
    let mut optimizer = Adam::new(&meta.config.optim)?;
    optimizer.load_state(&model.store, &tensors, meta.step)?;
    Ok(Restored { model, optimizer, meta })
}
