//! Experiment configuration: one TOML file, every key overridable with
//! `section.key=value`.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::backbones::{DenoiserConfig, LatentEncoderConfig, SemanticEncoderConfig};
use crate::error::{Error, Result};
use crate::forgegen::DatasetSpec;
use crate::fusion::FusionConfig;
use crate::loc_head::HeadConfig;
use crate::losses::LossWeights;
use crate::noise_schedule::NoiseConfig;

/// Environment variable that, when set, prefixes relative output dirs.
pub const OUTPUT_ROOT_ENV: &str = "FLOWTRACE_OUTPUT_ROOT";

/// How a feature branch takes part in training.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BranchMode {
    /// LoRA adapters on Q/K/V train; base frozen.
    Tuned,
    /// No adapters; the branch is a fixed feature extractor.
    Frozen,
    /// Branch not evaluated; fusion receives zeros of the configured shape.
    Removed,
}

impl BranchMode {
    pub fn name(self) -> &'static str {
        match self {
            Self::Tuned => "tuned",
            Self::Frozen => "frozen",
            Self::Removed => "removed",
        }
    }

    /// Table symbol: ✓ tuned, – frozen, × removed.
    pub fn symbol(self) -> &'static str {
        match self {
            Self::Tuned => "✓",
            Self::Frozen => "–",
            Self::Removed => "×",
        }
    }
}

impl fmt::Display for BranchMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for BranchMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "tuned" => Ok(Self::Tuned),
            "frozen" => Ok(Self::Frozen),
            "removed" => Ok(Self::Removed),
            other => Err(Error::Config(format!("unknown branch mode '{other}' (tuned, frozen or removed)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BranchConfig {
    pub sd: BranchMode,
    pub sam: BranchMode,
}

impl Default for BranchConfig {
    fn default() -> Self {
        Self { sd: BranchMode::Tuned, sam: BranchMode::Tuned }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub latent_encoder: LatentEncoderConfig,
    pub denoiser: DenoiserConfig,
    pub semantic: SemanticEncoderConfig,
    pub fusion: FusionConfig,
    pub head: HeadConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LoraConfig {
    pub sd_rank: usize,
    pub sam_rank: usize,
    pub alpha: f64,
}

impl Default for LoraConfig {
    fn default() -> Self {
        Self { sd_rank: 4, sam_rank: 4, alpha: 4.0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Adam,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimConfig {
    pub kind: OptimizerKind,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Decoupled weight decay.
    pub weight_decay: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self { kind: OptimizerKind::Adam, lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.0 }
    }
}

impl OptimConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.lr > 0.0
            && self.lr.is_finite()
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.eps > 0.0
            && self.weight_decay >= 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid optimizer settings {self:?}")))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    /// Share of the generated training split held out for validation.
    pub val_fraction: f64,
    pub threshold: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { epochs: 20, batch_size: 16, val_fraction: 0.1, threshold: 0.5 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub output_dir: PathBuf,
    pub data: DatasetSpec,
    pub model: ModelConfig,
    pub noise: NoiseConfig,
    pub lora: LoraConfig,
    pub branches: BranchConfig,
    pub loss: LossWeights,
    pub optim: OptimConfig,
    pub train: TrainConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            output_dir: PathBuf::from("runs/default"),
            data: DatasetSpec::default(),
            model: ModelConfig::default(),
            noise: NoiseConfig::default(),
            lora: LoraConfig::default(),
            branches: BranchConfig::default(),
            loss: LossWeights::default(),
            optim: OptimConfig::default(),
            train: TrainConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        self.data.validate()?;
        let m = &self.model;
        m.latent_encoder.validate()?;
        m.denoiser.validate()?;
        m.semantic.validate()?;
        m.fusion.validate()?;
        if m.head.mid_channels == 0 {
            return Err(Error::Config("head mid_channels must be positive".into()));
        }
        self.noise.validate()?;
        self.loss.validate()?;
        self.optim.validate()?;
        if m.denoiser.latent_channels != m.latent_encoder.latent_channels {
            return Err(Error::Config(format!(
                "denoiser expects {} latent channels but the encoder produces {}",
                m.denoiser.latent_channels, m.latent_encoder.latent_channels
            )));
        }
        let size = self.data.image_size;
        let f = m.latent_encoder.downsample_factor;
        if size % f != 0 || size % m.semantic.patch_size != 0 {
            return Err(Error::Shape(format!(
                "image_size {size} must be divisible by downsample_factor {f} and patch_size {}",
                m.semantic.patch_size
            )));
        }
        let lo = &self.lora;
        if !(lo.alpha > 0.0 && lo.alpha.is_finite()) {
            return Err(Error::Config(format!("lora alpha must be positive, got {}", lo.alpha)));
        }
        for (name, rank, dim) in
            [("sd_rank", lo.sd_rank, m.denoiser.width), ("sam_rank", lo.sam_rank, m.semantic.embed_dim)]
        {
            if rank == 0 || rank > dim {
                return Err(Error::Config(format!("lora {name} {rank} must be in 1..={dim}")));
            }
        }
        let t = &self.train;
        if t.epochs == 0 || t.batch_size == 0 {
            return Err(Error::Config("epochs and batch_size must be positive".into()));
        }
        if !(0.0..1.0).contains(&t.val_fraction) {
            return Err(Error::Config(format!("val_fraction {} must be in [0, 1)", t.val_fraction)));
        }
        if !(0.0..1.0).contains(&t.threshold) {
            return Err(Error::Config(format!("threshold {} must be in [0, 1)", t.threshold)));
        }
        Ok(())
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// Applies `section.key=value` overrides. Values are parsed as TOML
    /// literals and fall back to plain strings.
    pub fn with_overrides(&self, overrides: &[String]) -> Result<Self> {
        if overrides.is_empty() {
            return Ok(self.clone());
        }
        let mut doc = toml::Value::try_from(self).map_err(|e| Error::Config(e.to_string()))?;
        for ov in overrides {
            let (key, raw) =
                ov.split_once('=').ok_or_else(|| Error::Config(format!("override '{ov}' is not key=value")))?;
            let value = parse_literal(raw.trim());
            set_path(&mut doc, key.trim(), value)?;
        }
        let cfg: Self = doc.try_into().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Hex SHA-256 of the canonical JSON form, ignoring `output_dir` and
    /// `train.epochs` so a run can be resumed with a longer schedule.
    pub fn hash(&self) -> Result<String> {
        let mut c = self.clone();
        c.output_dir = PathBuf::new();
        c.train.epochs = 0;
        let json = serde_json::to_vec(&c)?;
        Ok(crate::raster::to_hex(&Sha256::digest(&json)))
    }

    /// `output_dir`, placed under `$FLOWTRACE_OUTPUT_ROOT` when relative and
    /// the variable is set.
    pub fn resolved_output_dir(&self) -> PathBuf {
        match std::env::var_os(OUTPUT_ROOT_ENV) {
            Some(root) if self.output_dir.is_relative() => PathBuf::from(root).join(&self.output_dir),
            _ => self.output_dir.clone(),
        }
    }
}

fn parse_literal(raw: &str) -> toml::Value {
    toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

fn set_path(doc: &mut toml::Value, key: &str, value: toml::Value) -> Result<()> {
    let parts: Vec<&str> = key.split('.').collect();
    let mut cur = doc;
    for (i, part) in parts.iter().enumerate() {
        let table =
            cur.as_table_mut().ok_or_else(|| Error::Config(format!("'{}' is not a section", parts[..i].join("."))))?;
        if i + 1 == parts.len() {
            let old = table.get(*part).ok_or_else(|| Error::Config(format!("unknown config key '{key}'")))?;
            // integers given where floats live are widened
            let value = match (old, value) {
                (toml::Value::Float(_), toml::Value::Integer(n)) => toml::Value::Float(n as f64),
                (_, v) => v,
            };
            table.insert(part.to_string(), value);
            return Ok(());
        }
        cur = table.get_mut(*part).ok_or_else(|| Error::Config(format!("unknown config key '{key}'")))?;
    }
    Err(Error::Config("empty override key".into()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_toml() {
        let cfg = ExperimentConfig::default();
        cfg.validate().unwrap();
        let back = ExperimentConfig::from_toml_str(&cfg.to_toml().unwrap()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn overrides_reach_nested_keys() {
        let cfg = ExperimentConfig::default()
            .with_overrides(&[
                "train.epochs=3".into(),
                "optim.lr=0.01".into(),
                "noise.shift_s=1".into(),
                "branches.sd=removed".into(),
                "noise.mechanism=ddpm".into(),
                "noise.levels=[0.5]".into(),
            ])
            .unwrap();
        assert_eq!(cfg.train.epochs, 3);
        assert_eq!(cfg.optim.lr, 0.01);
        assert_eq!(cfg.noise.shift_s, 1.0);
        assert_eq!(cfg.branches.sd, BranchMode::Removed);
        assert_eq!(cfg.noise.levels, vec![0.5]);
    }

    #[test]
    fn bad_overrides_fail() {
        let cfg = ExperimentConfig::default();
        assert!(cfg.with_overrides(&["train.nope=1".into()]).is_err());
        assert!(cfg.with_overrides(&["train.epochs".into()]).is_err());
        assert!(cfg.with_overrides(&["train.epochs=0".into()]).is_err());
        assert!(cfg.with_overrides(&["branches.sd=gone".into()]).is_err());
    }

    #[test]
    fn hash_ignores_output_dir_and_epochs() {
        let a = ExperimentConfig::default();
        let mut b = a.clone();
        b.output_dir = "elsewhere".into();
        b.train.epochs = 40;
        assert_eq!(a.hash().unwrap(), b.hash().unwrap());
        b.train.batch_size = 8;
        assert_ne!(a.hash().unwrap(), b.hash().unwrap());
        b.train.batch_size = a.train.batch_size;
        b.seed = 1;
        assert_ne!(a.hash().unwrap(), b.hash().unwrap());
    }

    #[test]
    fn indivisible_image_size_is_a_shape_error() {
        let mut cfg = ExperimentConfig::default();
        cfg.data.image_size = 60;
        assert!(matches!(cfg.validate(), Err(Error::Shape(_))));
    }
}
