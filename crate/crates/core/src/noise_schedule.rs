//! Latent perturbation mechanisms for the forensic branch.
//!
//! Three mechanisms are supported: rectified-flow interpolation toward
//! Gaussian noise (with a shifted timestep grid), the variance-preserving
//! DDPM perturbation, and no perturbation at all.

use candle_core::{DType, Tensor};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Number of discrete steps in the DDPM schedule.
pub const DDPM_STEPS: usize = 1000;
pub const DDPM_BETA_START: f64 = 1e-4;
pub const DDPM_BETA_END: f64 = 0.02;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NoiseMechanism {
    Rf,
    Ddpm,
    Zero,
}

impl NoiseMechanism {
    pub fn label(self) -> &'static str {
        match self {
            NoiseMechanism::Rf => "Rectified Flow Noise",
            NoiseMechanism::Ddpm => "DDPM Noise",
            NoiseMechanism::Zero => "Zero Noise",
        }
    }
}

impl std::str::FromStr for NoiseMechanism {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "rf" => Ok(Self::Rf),
            "ddpm" => Ok(Self::Ddpm),
            "zero" => Ok(Self::Zero),
            other => Err(Error::Config(format!("unknown noise mechanism `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NoiseConfig {
    pub mechanism: NoiseMechanism,
    /// Timestep shift; values above 1 push every level toward more noise.
    pub shift_s: f64,
    /// Base timesteps, strictly increasing inside `(0, 1)`.
    pub levels: Vec<f64>,
    pub seed: u64,
}

impl Default for NoiseConfig {
    fn default() -> Self {
        Self { mechanism: NoiseMechanism::Rf, shift_s: 3.0, levels: vec![0.25, 0.5, 0.75], seed: 0 }
    }
}

impl NoiseConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.shift_s > 0.0 && self.shift_s.is_finite()) {
            return Err(Error::Config(format!("shift_s must be positive, got {}", self.shift_s)));
        }
        if self.levels.is_empty() {
            return Err(Error::Config("at least one noise level is required".into()));
        }
        if let Some(t) = self.levels.iter().find(|t| !(**t > 0.0 && **t < 1.0)) {
            return Err(Error::Config(format!("noise level {t} is outside (0, 1)")));
        }
        if self.levels.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::Config("noise levels must be strictly increasing".into()));
        }
        Ok(())
    }

    /// Effective timesteps the denoiser sees for each configured level.
    pub fn effective_levels(&self) -> Result<Vec<f64>> {
        match self.mechanism {
            NoiseMechanism::Rf => self.levels.iter().map(|&t| shift_warp(t, self.shift_s)).collect(),
            NoiseMechanism::Ddpm | NoiseMechanism::Zero => Ok(self.levels.clone()),
        }
    }
}

/// Perturbed copies of one source latent, one per configured level.
#[derive(Debug, Clone)]
pub struct NoisedLatentSet {
    pub entries: Vec<NoisedLatent>,
    pub source: Tensor,
}

#[derive(Debug, Clone)]
pub struct NoisedLatent {
    pub t_effective: f64,
    pub latent: Tensor,
}

impl NoisedLatentSet {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Joins per-sample sets level by level along dim 0.
    pub fn concat(sets: &[NoisedLatentSet]) -> Result<NoisedLatentSet> {
        let first = sets.first().ok_or_else(|| Error::Config("no noised sets to join".into()))?;
        let levels = first.len();
        if sets.iter().any(|s| s.len() != levels) {
            return Err(Error::Dimension("noised sets have different level counts".into()));
        }
        let mut entries = Vec::with_capacity(levels);
        for k in 0..levels {
            let t = first.entries[k].t_effective;
            let parts: Vec<&Tensor> = sets.iter().map(|s| &s.entries[k].latent).collect();
            entries.push(NoisedLatent { t_effective: t, latent: Tensor::cat(&parts, 0)? });
        }
        let sources: Vec<&Tensor> = sets.iter().map(|s| &s.source).collect();
        Ok(NoisedLatentSet { entries, source: Tensor::cat(&sources, 0)? })
    }
}

fn check_t(t: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::Domain(format!("timestep {t} is outside [0, 1]")));
    }
    Ok(())
}

fn check_same_shape(a: &Tensor, b: &Tensor) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(Error::Dimension(format!("latent {:?} vs noise {:?}", a.dims(), b.dims())));
    }
    Ok(())
}

/// `(1 − t)·z0 + t·eps`.
pub fn rf_interpolate(z0: &Tensor, t: f64, eps: &Tensor) -> Result<Tensor> {
    check_same_shape(z0, eps)?;
    check_t(t)?;
    if t == 0.0 {
        return Ok(z0.clone());
    }
    if t == 1.0 {
        return Ok(eps.clone());
    }
    Ok(((z0 * (1.0 - t))? + (eps * t)?)?)
}

/// Timestep shift `s·t / (1 + (s − 1)·t)`.
///
/// A bijection of `[0, 1]` onto itself for every `s > 0`, the identity at
/// `s = 1`; `s > 1` moves interior timesteps toward 1.
pub fn shift_warp(t: f64, s: f64) -> Result<f64> {
    if !(s > 0.0 && s.is_finite()) {
        return Err(Error::Domain(format!("shift must be positive, got {s}")));
    }
    check_t(t)?;
    Ok((s * t / (1.0 + (s - 1.0) * t)).clamp(0.0, 1.0))
}

/// Cumulative signal fraction ᾱ at a discrete DDPM step.
pub fn ddpm_alpha_bar(step: usize) -> f64 {
    let last = DDPM_STEPS - 1;
    (0..=step.min(last))
        .map(|i| 1.0 - (DDPM_BETA_START + (DDPM_BETA_END - DDPM_BETA_START) * i as f64 / last as f64))
        .product()
}

/// Discrete step used for a continuous timestep.
pub fn ddpm_step(t: f64) -> usize {
    ((t * (DDPM_STEPS - 1) as f64).floor() as usize).min(DDPM_STEPS - 1)
}

/// `√ᾱ·z0 + √(1−ᾱ)·eps` on the linear-β schedule.
pub fn ddpm_perturb(z0: &Tensor, t: f64, eps: &Tensor) -> Result<Tensor> {
    check_same_shape(z0, eps)?;
    check_t(t)?;
    let ab = ddpm_alpha_bar(ddpm_step(t));
    Ok(((z0 * ab.sqrt())? + (eps * (1.0 - ab).sqrt())?)?)
}

/// Standard-normal tensor shaped like `like`, drawn from `rng`.
pub fn standard_normal_like<R: Rng + ?Sized>(like: &Tensor, rng: &mut R) -> Result<Tensor> {
    let n = like.elem_count();
    let v: Vec<f32> = (0..n).map(|_| rng.sample::<f32, _>(StandardNormal)).collect();
    let t = Tensor::from_vec(v, like.shape(), like.device())?;
    Ok(if like.dtype() == DType::F32 { t } else { t.to_dtype(like.dtype())? })
}

/// Builds the perturbed latents for every configured level, in level order.
///
/// Each level draws its own noise from `rng`.
pub fn make_noised_set<R: Rng + ?Sized>(z0: &Tensor, cfg: &NoiseConfig, rng: &mut R) -> Result<NoisedLatentSet> {
    cfg.validate()?;
    let mut entries = Vec::with_capacity(cfg.levels.len());
    for &t in &cfg.levels {
        let entry = match cfg.mechanism {
            NoiseMechanism::Rf => {
                let te = shift_warp(t, cfg.shift_s)?;
                let eps = standard_normal_like(z0, rng)?;
                NoisedLatent { t_effective: te, latent: rf_interpolate(z0, te, &eps)? }
            }
            NoiseMechanism::Ddpm => {
                let eps = standard_normal_like(z0, rng)?;
                NoisedLatent { t_effective: t, latent: ddpm_perturb(z0, t, &eps)? }
            }
            NoiseMechanism::Zero => NoisedLatent { t_effective: t, latent: z0.clone() },
        };
        entries.push(entry);
    }
    Ok(NoisedLatentSet { entries, source: z0.clone() })
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::Device;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn vec_of(t: &Tensor) -> Vec<f32> {
        t.flatten_all().unwrap().to_vec1().unwrap()
    }

    fn randn(shape: (usize, usize, usize), seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        standard_normal_like(&Tensor::zeros(shape, DType::F32, &Device::Cpu).unwrap(), &mut rng).unwrap()
    }

    #[test]
    fn rf_endpoints_and_midpoint() {
        let z0 = randn((4, 8, 8), 1);
        let eps = randn((4, 8, 8), 2);
        assert_eq!(vec_of(&rf_interpolate(&z0, 0.0, &eps).unwrap()), vec_of(&z0));
        assert_eq!(vec_of(&rf_interpolate(&z0, 1.0, &eps).unwrap()), vec_of(&eps));
        let zeros = Tensor::zeros((2, 2), DType::F32, &Device::Cpu).unwrap();
        let ones = Tensor::ones((2, 2), DType::F32, &Device::Cpu).unwrap();
        assert_eq!(vec_of(&rf_interpolate(&zeros, 0.5, &ones).unwrap()), vec![0.5; 4]);
    }

    #[test]
    fn rf_rejects_bad_inputs() {
        let z0 = randn((1, 2, 2), 1);
        let eps = randn((1, 2, 3), 2);
        assert!(matches!(rf_interpolate(&z0, 0.5, &eps), Err(Error::Dimension(_))));
        assert!(matches!(rf_interpolate(&z0, 1.5, &z0), Err(Error::Domain(_))));
    }

    #[test]
    fn shift_warp_values() {
        assert_eq!(shift_warp(0.0, 3.0).unwrap(), 0.0);
        assert_eq!(shift_warp(1.0, 3.0).unwrap(), 1.0);
        assert!((shift_warp(0.5, 3.0).unwrap() - 0.75).abs() < 1e-12);
        assert_eq!(shift_warp(0.37, 1.0).unwrap(), 0.37);
        assert!(matches!(shift_warp(0.5, 0.0), Err(Error::Domain(_))));
        assert!(matches!(shift_warp(0.5, -1.0), Err(Error::Domain(_))));
    }

    #[test]
    fn ddpm_at_zero_uses_first_beta() {
        let z0 = randn((1, 4, 4), 3);
        let eps = randn((1, 4, 4), 4);
        let got = vec_of(&ddpm_perturb(&z0, 0.0, &eps).unwrap());
        let (a, b) = ((1.0f64 - 1e-4).sqrt(), 1e-4f64.sqrt());
        for ((g, z), e) in got.iter().zip(vec_of(&z0)).zip(vec_of(&eps)) {
            assert!((*g as f64 - (a * z as f64 + b * e as f64)).abs() < 1e-6);
        }
        let zeros = Tensor::zeros((1, 4, 4), DType::F32, &Device::Cpu).unwrap();
        assert!(vec_of(&ddpm_perturb(&zeros, 0.7, &zeros).unwrap()).iter().all(|v| *v == 0.0));
    }

    #[test]
    fn ddpm_preserves_unit_variance() {
        // Monte-Carlo over 2^14 samples per timestep.
        for &t in &[0.0, 0.1, 0.5, 0.9, 1.0] {
            let z0 = randn((1, 128, 128), 10);
            let eps = randn((1, 128, 128), 11);
            let v = vec_of(&ddpm_perturb(&z0, t, &eps).unwrap());
            let n = v.len() as f64;
            let mean = v.iter().map(|x| *x as f64).sum::<f64>() / n;
            let var = v.iter().map(|x| (*x as f64 - mean).powi(2)).sum::<f64>() / n;
            assert!((var - 1.0).abs() < 0.05, "t={t} var={var}");
        }
    }

    #[test]
    fn noised_set_levels() {
        let z0 = randn((4, 8, 8), 5);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let cfg = NoiseConfig::default();
        let set = make_noised_set(&z0, &cfg, &mut rng).unwrap();
        let te: Vec<f64> = set.entries.iter().map(|e| e.t_effective).collect();
        for (a, b) in te.iter().zip([0.5, 0.75, 0.9]) {
            assert!((a - b).abs() < 1e-12);
        }
        assert!(set.entries.iter().all(|e| e.latent.dims() == z0.dims()));

        let single = NoiseConfig { shift_s: 1.0, levels: vec![0.5], ..cfg.clone() };
        let set = make_noised_set(&z0, &single, &mut rng).unwrap();
        assert_eq!(set.len(), 1);
        assert_eq!(set.entries[0].t_effective, 0.5);

        let zero = NoiseConfig { mechanism: NoiseMechanism::Zero, ..cfg };
        let set = make_noised_set(&z0, &zero, &mut rng).unwrap();
        for e in &set.entries {
            assert_eq!(vec_of(&e.latent), vec_of(&z0));
        }
    }

    #[test]
    fn noised_set_is_seed_deterministic() {
        let z0 = randn((4, 8, 8), 5);
        let cfg = NoiseConfig { mechanism: NoiseMechanism::Rf, ..Default::default() };
        let a = make_noised_set(&z0, &cfg, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let b = make_noised_set(&z0, &cfg, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        for (x, y) in a.entries.iter().zip(&b.entries) {
            assert_eq!(vec_of(&x.latent), vec_of(&y.latent));
        }
        // independent noise per level: the two noisiest views are not scaled copies
        assert_ne!(vec_of(&a.entries[1].latent), vec_of(&a.entries[2].latent));
    }

    #[test]
    fn config_validation() {
        let mut cfg = NoiseConfig::default();
        assert!(cfg.validate().is_ok());
        cfg.levels = vec![0.5, 0.25];
        assert!(cfg.validate().is_err());
        cfg.levels = vec![0.0, 0.5];
        assert!(cfg.validate().is_err());
        cfg.levels = vec![0.5];
        cfg.shift_s = 0.0;
        assert!(cfg.validate().is_err());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn warp_is_monotone_bijection(s in 0.05f64..20.0, a in 0.0f64..1.0, b in 0.0f64..1.0) {
                let (lo, hi) = if a < b { (a, b) } else { (b, a) };
                let (wl, wh) = (shift_warp(lo, s).unwrap(), shift_warp(hi, s).unwrap());
                prop_assert!(wl <= wh);
                prop_assert!((0.0..=1.0).contains(&wl));
                // closed-form inverse: t = t' / (s − (s − 1)·t')
                let inv = wl / (s - (s - 1.0) * wl);
                prop_assert!((inv - lo).abs() < 1e-9);
            }

            #[test]
            fn rf_is_linear(t in 0.0f64..1.0, seed in 0u64..1000) {
                let z0 = randn((2, 3, 3), seed);
                let eps = randn((2, 3, 3), seed + 1);
                let got = vec_of(&rf_interpolate(&z0, t, &eps).unwrap());
                for ((g, z), e) in got.iter().zip(vec_of(&z0)).zip(vec_of(&eps)) {
                    let want = z as f64 + t * (e as f64 - z as f64);
                    prop_assert!((*g as f64 - want).abs() < 1e-5);
                }
            }
        }
    }
}
