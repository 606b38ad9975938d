//! Low-rank adapters and the policy that attaches them only to attention
//! query/key/value projections.
//!
//! An adapted linear map computes `x·Wᵀ + b + (α/r)·x·Aᵀ·Bᵀ` with `A: r×d_in`
//! drawn from `N(0, 0.02²)` and `B: d_out×r` starting at zero, so the adapted
//! map equals the base map until the first optimizer step.

use std::collections::BTreeMap;

use candle_core::Tensor;

use crate::error::{Error, Result};
use crate::nn::{Init, Linear, ParamBuilder};

pub const LORA_INIT_STD: f64 = 0.02;

#[derive(Debug, Clone)]
pub struct LoraAdapter {
    /// `r×d_in`
    pub a: Tensor,
    /// `d_out×r`
    pub b: Tensor,
    pub rank: usize,
    pub alpha: f64,
    pub target: String,
}

impl LoraAdapter {
    /// Registers `lora.<target>.A` / `.B` through `builder` (expected to be
    /// rooted at the `lora` prefix).
    pub fn new(
        builder: &mut ParamBuilder,
        target: &str,
        d_in: usize,
        d_out: usize,
        rank: usize,
        alpha: f64,
    ) -> Result<Self> {
        if rank == 0 || rank > d_in.min(d_out) {
            return Err(Error::Config(format!(
                "LoRA rank {rank} is invalid for a {d_out}x{d_in} projection `{target}`"
            )));
        }
        if !(alpha > 0.0 && alpha.is_finite()) {
            return Err(Error::Config(format!("LoRA alpha must be positive, got {alpha}")));
        }
        let mut sub = builder.sub(target);
        let a = sub.param("A", &[rank, d_in], Init::Normal(LORA_INIT_STD))?;
        let b = sub.param("B", &[d_out, rank], Init::Zeros)?;
        Ok(Self { a, b, rank, alpha, target: target.to_string() })
    }

    pub fn d_in(&self) -> usize {
        self.a.dims()[1]
    }

    pub fn d_out(&self) -> usize {
        self.b.dims()[0]
    }

    pub fn scale(&self) -> f64 {
        self.alpha / self.rank as f64
    }

    /// `r·(d_in + d_out)`
    pub fn param_count(&self) -> usize {
        self.rank * (self.d_in() + self.d_out())
    }

    /// Low-rank update `(α/r)·x·Aᵀ·Bᵀ` over the last dimension of `x`.
    pub fn delta(&self, x: &Tensor) -> Result<Tensor> {
        let h = x.broadcast_matmul(&self.a.t()?)?;
        Ok((h.broadcast_matmul(&self.b.t()?)? * self.scale())?)
    }
}

/// Adapted linear map for an `n×d_in` input.
pub fn lora_forward(x: &Tensor, base_w: &Tensor, base_bias: &Tensor, ad: &LoraAdapter) -> Result<Tensor> {
    let (_, d_in) = x.dims2()?;
    let (d_out, w_in) = base_w.dims2()?;
    if d_in != w_in || ad.d_in() != d_in || ad.d_out() != d_out || base_bias.dims() != [d_out] {
        return Err(Error::Dimension(format!(
            "x {:?}, W {:?}, bias {:?}, adapter {}x{}",
            x.dims(),
            base_w.dims(),
            base_bias.dims(),
            ad.d_out(),
            ad.d_in()
        )));
    }
    let base = x.matmul(&base_w.t()?)?.broadcast_add(base_bias)?;
    Ok((base + ad.delta(x)?)?)
}

/// A base projection that may carry an adapter.
#[derive(Debug, Clone)]
pub struct LoraLinear {
    pub name: String,
    pub base: Linear,
    pub adapter: Option<LoraAdapter>,
}

impl LoraLinear {
    pub fn new(name: impl Into<String>, base: Linear) -> Self {
        Self { name: name.into(), base, adapter: None }
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = self.base.forward(x)?;
        match &self.adapter {
            Some(ad) => Ok((y + ad.delta(x)?)?),
            None => Ok(y),
        }
    }
}

/// Networks whose attention blocks expose named Q, K and V projections.
pub trait AttentionNetwork {
    fn attention_blocks(&self) -> usize;

    /// Every Q, K and V projection, in block order.
    fn qkv_projections(&mut self) -> Vec<&mut LoraLinear>;

    /// Parameters of the network itself, adapters excluded.
    fn base_param_count(&self) -> usize;
}

#[derive(Debug, Clone, Default)]
pub struct AdapterRegistry {
    pub adapters: BTreeMap<String, LoraAdapter>,
    pub frozen_base: bool,
}

impl AdapterRegistry {
    pub fn len(&self) -> usize {
        self.adapters.len()
    }

    pub fn is_empty(&self) -> bool {
        self.adapters.is_empty()
    }

    pub fn get(&self, target: &str) -> Option<&LoraAdapter> {
        self.adapters.get(target)
    }

    pub fn param_count(&self) -> usize {
        self.adapters.values().map(LoraAdapter::param_count).sum()
    }
}

/// Puts one adapter on every Q, K and V projection of `network` and nothing
/// else. `builder` must be rooted at the `lora` prefix; the network's own
/// parameters are expected to have been registered as frozen.
pub fn attach_qkv_adapters<N: AttentionNetwork>(
    network: &mut N,
    builder: &mut ParamBuilder,
    rank: usize,
    alpha: f64,
) -> Result<AdapterRegistry> {
    if network.attention_blocks() == 0 {
        return Err(Error::Config("network has no attention blocks to adapt".into()));
    }
    let mut registry = AdapterRegistry { adapters: BTreeMap::new(), frozen_base: true };
    for proj in network.qkv_projections() {
        let ad = LoraAdapter::new(builder, &proj.name, proj.base.d_in(), proj.base.d_out(), rank, alpha)?;
        proj.adapter = Some(ad.clone());
        if registry.adapters.insert(proj.name.clone(), ad).is_some() {
            return Err(Error::Config(format!("projection `{}` adapted twice", proj.name)));
        }
    }
    Ok(registry)
}

/// Adapter parameters over adapter-plus-base parameters.
pub fn trainable_fraction<N: AttentionNetwork>(registry: &AdapterRegistry, network: &N) -> f64 {
    let adapters = registry.param_count();
    if adapters == 0 {
        return 0.0;
    }
    adapters as f64 / (adapters + network.base_param_count()) as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{init_rng, ParamStore};
    use candle_core::{DType, Device};

    fn t2(v: &[f32], r: usize, c: usize) -> Tensor {
        Tensor::from_slice(v, (r, c), &Device::Cpu).unwrap()
    }

    fn adapter(store: &mut ParamStore, d_in: usize, d_out: usize, rank: usize, alpha: f64) -> LoraAdapter {
        let mut rng = init_rng(3);
        let mut b = ParamBuilder::new(store, &mut rng, "lora", true);
        LoraAdapter::new(&mut b, "t", d_in, d_out, rank, alpha).unwrap()
    }

    #[test]
    fn hand_example() {
        let mut store = ParamStore::new(Device::Cpu);
        let mut ad = adapter(&mut store, 2, 2, 1, 1.0);
        ad.a = t2(&[1.0, 0.0], 1, 2);
        ad.b = t2(&[0.0, 1.0], 2, 1);
        let w = t2(&[1.0, 0.0, 0.0, 1.0], 2, 2);
        let bias = Tensor::zeros(2, DType::F32, &Device::Cpu).unwrap();
        let y = lora_forward(&t2(&[1.0, 0.0], 1, 2), &w, &bias, &ad).unwrap();
        assert_eq!(y.to_vec2::<f32>().unwrap(), vec![vec![1.0, 1.0]]);
    }

    #[test]
    fn zero_b_is_identity_and_zero_x_gives_bias() {
        let mut store = ParamStore::new(Device::Cpu);
        let ad = adapter(&mut store, 5, 3, 2, 4.0);
        let w = Tensor::randn(0f32, 1.0, (3, 5), &Device::Cpu).unwrap();
        let bias = Tensor::new(&[0.5f32, -1.0, 2.0], &Device::Cpu).unwrap();
        let x = Tensor::randn(0f32, 1.0, (7, 5), &Device::Cpu).unwrap();
        let base = x.matmul(&w.t().unwrap()).unwrap().broadcast_add(&bias).unwrap();
        let got = lora_forward(&x, &w, &bias, &ad).unwrap();
        let diff = (got - base).unwrap().abs().unwrap().max_all().unwrap().to_scalar::<f32>().unwrap();
        assert_eq!(diff, 0.0);
        let zeros = Tensor::zeros((2, 5), DType::F32, &Device::Cpu).unwrap();
        let y = lora_forward(&zeros, &w, &bias, &ad).unwrap().to_vec2::<f32>().unwrap();
        assert_eq!(y, vec![vec![0.5, -1.0, 2.0]; 2]);
    }

    #[test]
    fn rank_bounds_and_param_count() {
        let mut store = ParamStore::new(Device::Cpu);
        let mut rng = init_rng(0);
        let mut b = ParamBuilder::new(&mut store, &mut rng, "lora", true);
        assert!(LoraAdapter::new(&mut b, "big", 4, 4, 5, 1.0).is_err());
        assert!(LoraAdapter::new(&mut b, "zero", 4, 4, 0, 1.0).is_err());
        let ad = LoraAdapter::new(&mut b, "ok", 64, 64, 4, 4.0).unwrap();
        assert_eq!(ad.param_count(), 512);
        assert_eq!(store.count_where(|n, _| n.starts_with("lora.ok.")), 512);
    }

    #[test]
    fn dimension_mismatch() {
        let mut store = ParamStore::new(Device::Cpu);
        let ad = adapter(&mut store, 3, 3, 1, 1.0);
        let w = Tensor::zeros((3, 4), DType::F32, &Device::Cpu).unwrap();
        let bias = Tensor::zeros(3, DType::F32, &Device::Cpu).unwrap();
        let x = Tensor::zeros((1, 4), DType::F32, &Device::Cpu).unwrap();
        assert!(matches!(lora_forward(&x, &w, &bias, &ad), Err(Error::Dimension(_))));
    }

    #[test]
    fn delta_is_linear_in_x() {
        let mut store = ParamStore::new(Device::Cpu);
        let mut ad = adapter(&mut store, 6, 4, 2, 4.0);
        ad.b = Tensor::randn(0f32, 1.0, (4, 2), &Device::Cpu).unwrap();
        for _ in 0..10 {
            let x1 = Tensor::randn(0f32, 1.0, (3, 6), &Device::Cpu).unwrap();
            let x2 = Tensor::randn(0f32, 1.0, (3, 6), &Device::Cpu).unwrap();
            let sum = ad.delta(&(&x1 + &x2).unwrap()).unwrap();
            let parts = (ad.delta(&x1).unwrap() + ad.delta(&x2).unwrap()).unwrap();
            let num = (&sum - &parts).unwrap().sqr().unwrap().sum_all().unwrap().to_scalar::<f32>().unwrap().sqrt();
            let den = sum.sqr().unwrap().sum_all().unwrap().to_scalar::<f32>().unwrap().sqrt();
            assert!(num <= 1e-5 * den.max(1e-12));
        }
    }
}
