//! Model assembly and the full forward pass.

use candle_core::{DType, Device, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::backbones::{Denoiser, LatentEncoder, SemanticEncoder};
use crate::error::{Error, Result, StageExt};
use crate::forgegen::sample_seed;
use crate::fusion::Fusion;
use crate::harness::config::{BranchMode, ExperimentConfig};
use crate::loc_head::LocalizationHead;
use crate::lora::{attach_qkv_adapters, trainable_fraction, AdapterRegistry};
use crate::nn::{init_rng, ParamBuilder, ParamStore};
use crate::noise_schedule::{make_noised_set, NoisedLatentSet};
use crate::raster::{ImageTensor, MaskTensor};

/// Seed for a named sub-stream of `seed`.
pub fn sub_seed(seed: u64, tag: &str) -> u64 {
    sample_seed(seed, tag)
}

/// Noise seed for one sample: fixed per id at evaluation, fresh per epoch in
/// training.
pub fn noise_seed(base: u64, id: &str, epoch: Option<usize>) -> u64 {
    match epoch {
        Some(e) => sample_seed(base, &format!("{id}@{e}")),
        None => sample_seed(base, id),
    }
}

/// Intermediate tensors of one forward pass.
#[derive(Debug, Clone)]
pub struct ForwardOutput {
    pub f_s: Tensor,
    pub z0: Option<Tensor>,
    pub f_d: Tensor,
    pub fused: Tensor,
    pub probs: Tensor,
}

impl ForwardOutput {
    /// Named tensors in pipeline order.
    pub fn named(&self) -> Vec<(&'static str, &Tensor)> {
        let mut v = vec![("f_S", &self.f_s)];
        if let Some(z) = &self.z0 {
            v.push(("z0", z));
        }
        v.extend([("f_D", &self.f_d), ("f_fuse", &self.fused), ("M_pred", &self.probs)]);
        v
    }
}

pub struct Model {
    pub cfg: ExperimentConfig,
    pub store: ParamStore,
    encoder: Option<LatentEncoder>,
    denoiser: Option<Denoiser>,
    semantic: Option<SemanticEncoder>,
    pub sd_adapters: AdapterRegistry,
    pub sam_adapters: AdapterRegistry,
    fusion: Fusion,
    head: LocalizationHead,
}

impl Model {
    /// Builds every component on `device`. Each component draws from its own
    /// sub-stream of `cfg.seed`, so changing branch modes leaves the weights
    /// of the other components unchanged.
    pub fn new(cfg: &ExperimentConfig, device: &Device) -> Result<Self> {
        cfg.validate()?;
        let m = &cfg.model;
        let mut store = ParamStore::new(device.clone());
        let levels = cfg.noise.levels.len();
        let sd_mode = cfg.branches.sd;
        let sam_mode = cfg.branches.sam;

        let (encoder, denoiser, sd_adapters) = if sd_mode == BranchMode::Removed {
            (None, None, AdapterRegistry::default())
        } else {
            let enc = LatentEncoder::new(&m.latent_encoder, &mut store).stage("backbones")?;
            let mut rng = init_rng(sub_seed(cfg.seed, "sd.consolidate"));
            let tuned = sd_mode == BranchMode::Tuned;
            let mut den = Denoiser::new(&m.denoiser, levels, &mut store, &mut rng, tuned).stage("backbones")?;
            let reg = if tuned {
                let mut rng = init_rng(sub_seed(cfg.seed, "lora.sd"));
                let mut b = ParamBuilder::new(&mut store, &mut rng, "lora", true);
                attach_qkv_adapters(&mut den, &mut b, cfg.lora.sd_rank, cfg.lora.alpha).stage("lora")?
            } else {
                AdapterRegistry::default()
            };
            (Some(enc), Some(den), reg)
        };

        let (semantic, sam_adapters) = if sam_mode == BranchMode::Removed {
            (None, AdapterRegistry::default())
        } else {
            let mut sem = SemanticEncoder::new(&m.semantic, &mut store).stage("backbones")?;
            let reg = if sam_mode == BranchMode::Tuned {
                let mut rng = init_rng(sub_seed(cfg.seed, "lora.sam"));
                let mut b = ParamBuilder::new(&mut store, &mut rng, "lora", true);
                attach_qkv_adapters(&mut sem, &mut b, cfg.lora.sam_rank, cfg.lora.alpha).stage("lora")?
            } else {
                AdapterRegistry::default()
            };
            (Some(sem), reg)
        };

        let mut rng = init_rng(sub_seed(cfg.seed, "fusion"));
        let fusion = Fusion::new(
            &m.fusion,
            m.semantic.out_channels,
            m.denoiser.out_channels,
            &mut ParamBuilder::new(&mut store, &mut rng, "fusion", true),
        )
        .stage("fusion")?;
        let mut rng = init_rng(sub_seed(cfg.seed, "head"));
        let head = LocalizationHead::new(
            &m.head,
            m.fusion.fuse_channels,
            m.latent_encoder.downsample_factor,
            &mut ParamBuilder::new(&mut store, &mut rng, "head", true),
        )
        .stage("loc_head")?;

        Ok(Self { cfg: cfg.clone(), store, encoder, denoiser, semantic, sd_adapters, sam_adapters, fusion, head })
    }

    pub fn device(&self) -> &Device {
        self.store.device()
    }

    /// Adapter share of each adapted branch, `(sd, sam)`; zero when a branch
    /// carries no adapters.
    pub fn trainable_fractions(&self) -> (f64, f64) {
        let sd = self.denoiser.as_ref().map_or(0.0, |d| trainable_fraction(&self.sd_adapters, d));
        let sam = self.semantic.as_ref().map_or(0.0, |s| trainable_fraction(&self.sam_adapters, s));
        (sd, sam)
    }

    pub fn trainable_param_count(&self) -> usize {
        self.store.count_where(|_, p| p.trainable)
    }

    pub fn frozen_param_count(&self) -> usize {
        self.store.count_where(|_, p| !p.trainable)
    }

    /// Checksum of everything that must never change during training.
    pub fn frozen_checksum(&self) -> Result<String> {
        self.store.checksum(|_, p| !p.trainable)
    }

    pub fn trainable_checksum(&self) -> Result<String> {
        self.store.checksum(|_, p| p.trainable)
    }

    fn noised_latents(&self, z0: &Tensor, seeds: &[u64]) -> Result<NoisedLatentSet> {
        let sets = seeds
            .iter()
            .enumerate()
            .map(|(i, s)| {
                let mut rng = ChaCha8Rng::seed_from_u64(*s);
                make_noised_set(&z0.narrow(0, i, 1)?, &self.cfg.noise, &mut rng)
            })
            .collect::<Result<Vec<_>>>()?;
        NoisedLatentSet::concat(&sets)
    }

    /// Full pipeline on a batch `B×3×H×W`, one noise seed per image.
    pub fn forward_parts(&self, images: &Tensor, noise_seeds: &[u64]) -> Result<ForwardOutput> {
        let (b, c, h, w) = images.dims4().stage("harness")?;
        if c != 3 {
            return Err(Error::Dimension(format!("expected 3 image channels, got {c}")));
        }
        if noise_seeds.len() != b {
            return Err(Error::Dimension(format!("{} noise seeds for {b} images", noise_seeds.len())));
        }
        let m = &self.cfg.model;
        let dev = images.device();

        let f_s = match &self.semantic {
            Some(sem) => sem.features(images).stage("backbones")?,
            None => {
                let p = m.semantic.patch_size;
                if h % p != 0 || w % p != 0 {
                    return Err(Error::Shape(format!("{h}x{w} is not divisible by patch size {p}")));
                }
                Tensor::zeros((b, m.semantic.out_channels, h / p, w / p), DType::F32, dev)?
            }
        };

        let (z0, f_d) = match (&self.encoder, &self.denoiser) {
            (Some(enc), Some(den)) => {
                let z0 = enc.encode(images).stage("backbones")?;
                let set = self.noised_latents(&z0, noise_seeds).stage("noise_schedule")?;
                let f_d = den.features(&set).stage("backbones")?;
                (Some(z0), f_d)
            }
            _ => {
                let f = m.latent_encoder.downsample_factor;
                if h % f != 0 || w % f != 0 {
                    return Err(Error::Shape(format!("{h}x{w} is not divisible by downsample factor {f}")));
                }
                (None, Tensor::zeros((b, m.denoiser.out_channels, h / f, w / f), DType::F32, dev)?)
            }
        };

        let fused = self.fusion.fuse(&f_s, &f_d).stage("fusion")?;
        let probs = self.head.predict_mask(&fused).stage("loc_head")?;
        Ok(ForwardOutput { f_s, z0, f_d, fused, probs })
    }

    /// Probabilities `B×1×H×W`.
    pub fn forward(&self, images: &Tensor, noise_seeds: &[u64]) -> Result<Tensor> {
        Ok(self.forward_parts(images, noise_seeds)?.probs)
    }

    /// Single image in, probability mask of the same spatial size out.
    pub fn forward_pipeline(&self, image: &ImageTensor, noise_seed: u64) -> Result<MaskTensor> {
        let x = image.to_tensor(self.device())?.unsqueeze(0)?;
        MaskTensor::from_tensor(&self.forward(&x, &[noise_seed])?)
    }
}

/// Stacks images into `B×3×H×W` and masks into `B×1×H×W`.
pub fn batch_tensors<'a, I>(samples: I, device: &Device) -> Result<(Tensor, Tensor)>
where
    I: IntoIterator<Item = &'a crate::forgegen::ForgerySample>,
{
    let mut imgs = Vec::new();
    let mut masks = Vec::new();
    let mut shape = None;
    let mut n = 0;
    for s in samples {
        let sh = s.image.shape();
        if *shape.get_or_insert(sh) != sh {
            return Err(Error::Dimension(format!("sample {} has shape {sh:?}, batch has {:?}", s.id, shape.unwrap())));
        }
        imgs.extend_from_slice(s.image.data());
        masks.extend(s.mask.data().iter().map(|v| *v as f32));
        n += 1;
    }
    let (c, h, w) = shape.ok_or_else(|| Error::Config("empty batch".into()))?;
    Ok((Tensor::from_vec(imgs, (n, c, h, w), device)?, Tensor::from_vec(masks, (n, 1, h, w), device)?))
}
