//! Parameter storage and the handful of layers the networks are built from.
//!
//! Every parameter lives in a [`ParamStore`] as a `Var` under a dotted name
//! (`sam.blocks.0.attn.q.weight`, `lora.sam.blocks.0.attn.q.A`, ...). Layers
//! hold tensors that share storage with those vars, so optimizer updates and
//! checkpoint loads are visible to the layers without rebuilding them.
//! Frozen parameters are handed to layers detached from the graph.

use std::collections::BTreeMap;

use candle_core::{DType, Device, Tensor, Var, D};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    Zeros,
    Ones,
    Normal(f64),
    /// `U(−b, b)` with `b = 1/√fan_in`.
    FanInUniform(usize),
}

impl Init {
    fn sample(self, n: usize, rng: &mut ChaCha8Rng) -> Vec<f32> {
        match self {
            Init::Zeros => vec![0.0; n],
            Init::Ones => vec![1.0; n],
            Init::Normal(std) => {
                let d = Normal::new(0.0, std).expect("finite std");
                (0..n).map(|_| d.sample(rng) as f32).collect()
            }
            Init::FanInUniform(fan_in) => {
                let b = 1.0 / (fan_in.max(1) as f64).sqrt();
                let d = Uniform::new_inclusive(-b, b).expect("valid bound");
                (0..n).map(|_| d.sample(rng) as f32).collect()
            }
        }
    }
}

#[derive(Debug, Clone)]
pub struct Param {
    pub var: Var,
    pub trainable: bool,
}

#[derive(Debug, Clone)]
pub struct ParamStore {
    device: Device,
    dtype: DType,
    params: BTreeMap<String, Param>,
}

impl ParamStore {
    pub fn new(device: Device) -> Self {
        Self::with_dtype(device, DType::F32)
    }

    /// Store whose parameters are created in `dtype`. Initial values are
    /// drawn in f32 either way, so equal seeds give equal weights.
    pub fn with_dtype(device: Device, dtype: DType) -> Self {
        Self { device, dtype, params: BTreeMap::new() }
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, name: &str) -> Option<&Param> {
        self.params.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Param)> {
        self.params.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.params.keys()
    }

    /// Trainable parameters in name order.
    pub fn trainable(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.params.iter().filter(|(_, p)| p.trainable).map(|(n, p)| (n, &p.var))
    }

    pub fn count_where(&self, pred: impl Fn(&str, &Param) -> bool) -> usize {
        self.params.iter().filter(|(n, p)| pred(n, p)).map(|(_, p)| p.var.elem_count()).sum()
    }

    /// SHA-256 over names and raw little-endian values of the selected params.
    pub fn checksum(&self, pred: impl Fn(&str, &Param) -> bool) -> Result<String> {
        let mut h = Sha256::new();
        for (name, p) in self.params.iter().filter(|(n, p)| pred(n, p)) {
            h.update(name.as_bytes());
            let v = p.var.as_tensor().to_dtype(DType::F32)?.flatten_all()?.to_vec1::<f32>()?;
            for x in v {
                h.update(x.to_le_bytes());
            }
        }
        Ok(crate::raster::to_hex(&h.finalize()))
    }

    /// Snapshot of every parameter (detached copies).
    pub fn tensors(&self) -> Result<BTreeMap<String, Tensor>> {
        self.params.iter().map(|(n, p)| Ok((n.clone(), p.var.as_tensor().detach().copy()?))).collect()
    }

    /// Overwrites values in place; every stored name must be present.
    pub fn load(&self, tensors: &BTreeMap<String, Tensor>) -> Result<()> {
        for (name, p) in &self.params {
            let src = tensors
                .get(name)
                .ok_or_else(|| Error::Format { id: name.clone(), msg: "parameter missing from checkpoint".into() })?;
            if src.dims() != p.var.dims() {
                return Err(Error::Format {
                    id: name.clone(),
                    msg: format!("shape {:?} does not match {:?}", src.dims(), p.var.dims()),
                });
            }
            p.var.set(&src.to_dtype(self.dtype)?.to_device(&self.device)?)?;
        }
        Ok(())
    }

    /// Copy of the store converted to another dtype (used by gradient checks).
    pub fn to_dtype(&self, dtype: DType) -> Result<ParamStore> {
        let mut params = BTreeMap::new();
        for (n, p) in &self.params {
            let t = p.var.as_tensor().to_dtype(dtype)?;
            params.insert(n.clone(), Param { var: Var::from_tensor(&t)?, trainable: p.trainable });
        }
        Ok(ParamStore { device: self.device.clone(), dtype, params })
    }

    /// Tensor for a layer: tracked when trainable, detached otherwise.
    pub fn tensor(&self, name: &str) -> Result<Tensor> {
        let p = self.params.get(name).ok_or_else(|| Error::Config(format!("unknown parameter `{name}`")))?;
        Ok(if p.trainable { p.var.as_tensor().clone() } else { p.var.as_detached_tensor() })
    }

    pub fn set_trainable(&mut self, prefix: &str, trainable: bool) {
        for (n, p) in self.params.iter_mut() {
            if n.starts_with(prefix) {
                p.trainable = trainable;
            }
        }
    }

    fn insert(&mut self, name: String, t: Tensor, trainable: bool) -> Result<()> {
        if self.params.contains_key(&name) {
            return Err(Error::Config(format!("parameter `{name}` registered twice")));
        }
        self.params.insert(name, Param { var: Var::from_tensor(&t)?, trainable });
        Ok(())
    }
}

/// Registers parameters under a name prefix, drawing initial values from a
/// seeded stream so construction order fully determines the weights.
pub struct ParamBuilder<'a> {
    store: &'a mut ParamStore,
    rng: &'a mut ChaCha8Rng,
    prefix: String,
    trainable: bool,
}

impl<'a> ParamBuilder<'a> {
    pub fn new(store: &'a mut ParamStore, rng: &'a mut ChaCha8Rng, prefix: &str, trainable: bool) -> Self {
        Self { store, rng, prefix: prefix.to_string(), trainable }
    }

    pub fn prefix(&self) -> &str {
        &self.prefix
    }

    pub fn is_trainable(&self) -> bool {
        self.trainable
    }

    pub fn sub(&mut self, name: &str) -> ParamBuilder<'_> {
        ParamBuilder { store: self.store, rng: self.rng, prefix: join(&self.prefix, name), trainable: self.trainable }
    }

    /// Same prefix, different trainability.
    pub fn with_trainable(&mut self, trainable: bool) -> ParamBuilder<'_> {
        ParamBuilder { store: self.store, rng: self.rng, prefix: self.prefix.clone(), trainable }
    }

    pub fn rng(&mut self) -> &mut ChaCha8Rng {
        self.rng
    }

    pub fn param(&mut self, name: &str, shape: &[usize], init: Init) -> Result<Tensor> {
        let full = join(&self.prefix, name);
        let n = shape.iter().product();
        let data = init.sample(n, self.rng);
        let t = Tensor::from_vec(data, shape, &self.store.device)?.to_dtype(self.store.dtype)?;
        self.store.insert(full.clone(), t, self.trainable)?;
        self.store.tensor(&full)
    }
}

fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

/// Fresh seeded stream for parameter initialization.
pub fn init_rng(seed: u64) -> ChaCha8Rng {
    use rand::SeedableRng;
    ChaCha8Rng::seed_from_u64(seed)
}

#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: Tensor,
    pub bias: Option<Tensor>,
}

impl Linear {
    pub fn new(b: &mut ParamBuilder, d_in: usize, d_out: usize, init: Init) -> Result<Self> {
        let weight = b.param("weight", &[d_out, d_in], init)?;
        let bias = b.param("bias", &[d_out], Init::Zeros)?;
        Ok(Self { weight, bias: Some(bias) })
    }

    pub fn d_in(&self) -> usize {
        self.weight.dims()[1]
    }

    pub fn d_out(&self) -> usize {
        self.weight.dims()[0]
    }

    pub fn param_count(&self) -> usize {
        self.weight.elem_count() + self.bias.as_ref().map_or(0, |b| b.elem_count())
    }

    /// `x·Wᵀ + b` over the last dimension of `x`.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        if x.dim(D::Minus1)? != self.d_in() {
            return Err(Error::Dimension(format!("linear expects last dim {}, got {:?}", self.d_in(), x.dims())));
        }
        let y = x.broadcast_matmul(&self.weight.t()?)?;
        Ok(match &self.bias {
            Some(b) => y.broadcast_add(b)?,
            None => y,
        })
    }
}

#[derive(Debug, Clone)]
pub struct Conv2d {
    pub weight: Tensor,
    pub bias: Tensor,
    pub stride: usize,
    pub padding: usize,
}

impl Conv2d {
    pub fn new(
        b: &mut ParamBuilder,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        init: Init,
    ) -> Result<Self> {
        let fan_in = c_in * kernel * kernel;
        let weight = b.param("weight", &[c_out, c_in, kernel, kernel], init)?;
        let bias_init = match init {
            Init::FanInUniform(_) => Init::FanInUniform(fan_in),
            _ => Init::Zeros,
        };
        let bias = b.param("bias", &[c_out], bias_init)?;
        Ok(Self { weight, bias, stride, padding })
    }

    pub fn c_in(&self) -> usize {
        self.weight.dims()[1]
    }

    pub fn c_out(&self) -> usize {
        self.weight.dims()[0]
    }

    pub fn param_count(&self) -> usize {
        self.weight.elem_count() + self.bias.elem_count()
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (_, c, _, _) = x.dims4()?;
        if c != self.c_in() {
            return Err(Error::Dimension(format!("conv expects {} input channels, got {c}", self.c_in())));
        }
        let y = x.conv2d(&self.weight, self.padding, self.stride, 1, 1)?;
        Ok(y.broadcast_add(&self.bias.reshape((1, self.c_out(), 1, 1))?)?)
    }
}

#[derive(Debug, Clone)]
pub struct GroupNorm {
    pub groups: usize,
    pub gamma: Tensor,
    pub beta: Tensor,
    pub eps: f64,
}

impl GroupNorm {
    pub fn new(b: &mut ParamBuilder, groups: usize, channels: usize) -> Result<Self> {
        if groups == 0 || channels % groups != 0 {
            return Err(Error::Config(format!("{groups} groups do not divide {channels} channels")));
        }
        let gamma = b.param("gamma", &[channels], Init::Ones)?;
        let beta = b.param("beta", &[channels], Init::Zeros)?;
        Ok(Self { groups, gamma, beta, eps: 1e-5 })
    }

    pub fn param_count(&self) -> usize {
        self.gamma.elem_count() * 2
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (n, c, h, w) = x.dims4()?;
        if c != self.gamma.elem_count() {
            return Err(Error::Dimension(format!("group norm over {} channels, got {c}", self.gamma.elem_count())));
        }
        let g = x.reshape((n, self.groups, (c / self.groups) * h * w))?;
        let mean = g.mean_keepdim(D::Minus1)?;
        let centered = g.broadcast_sub(&mean)?;
        let var = centered.sqr()?.mean_keepdim(D::Minus1)?;
        let normed = centered.broadcast_div(&(var + self.eps)?.sqrt()?)?.reshape((n, c, h, w))?;
        Ok(normed
            .broadcast_mul(&self.gamma.reshape((1, c, 1, 1))?)?
            .broadcast_add(&self.beta.reshape((1, c, 1, 1))?)?)
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gamma: Tensor,
    pub beta: Tensor,
    pub eps: f64,
}

impl LayerNorm {
    pub fn new(b: &mut ParamBuilder, dim: usize) -> Result<Self> {
        let gamma = b.param("gamma", &[dim], Init::Ones)?;
        let beta = b.param("beta", &[dim], Init::Zeros)?;
        Ok(Self { gamma, beta, eps: 1e-5 })
    }

    pub fn param_count(&self) -> usize {
        self.gamma.elem_count() * 2
    }

    /// Normalizes over the last dimension.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mean = x.mean_keepdim(D::Minus1)?;
        let centered = x.broadcast_sub(&mean)?;
        let var = centered.sqr()?.mean_keepdim(D::Minus1)?;
        let normed = centered.broadcast_div(&(var + self.eps)?.sqrt()?)?;
        Ok(normed.broadcast_mul(&self.gamma)?.broadcast_add(&self.beta)?)
    }
}

/// Softmax over the last dimension, built from differentiable primitives.
pub fn softmax_last(x: &Tensor) -> Result<Tensor> {
    let max = x.max_keepdim(D::Minus1)?.detach();
    let e = x.broadcast_sub(&max)?.exp()?;
    Ok(e.broadcast_div(&e.sum_keepdim(D::Minus1)?)?)
}

/// Logistic function as `(1 + tanh(x/2)) / 2`, finite with finite
/// gradients for any finite input.
pub fn sigmoid(x: &Tensor) -> Result<Tensor> {
    Ok((x * 0.5)?.tanh()?.affine(0.5, 0.5)?)
}

/// `x·σ(x)`.
pub fn silu(x: &Tensor) -> Result<Tensor> {
    Ok((x * sigmoid(x)?)?)
}

/// Row-stochastic `out×in` matrix for 1-D bilinear resampling with
/// half-pixel centers (`align_corners = false`).
pub fn bilinear_weights(n_in: usize, n_out: usize) -> Vec<f32> {
    let mut m = vec![0f32; n_out * n_in];
    let scale = n_in as f64 / n_out as f64;
    for o in 0..n_out {
        let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
        let i0 = (src.floor() as usize).min(n_in - 1);
        let i1 = (i0 + 1).min(n_in - 1);
        let frac = (src - i0 as f64).clamp(0.0, 1.0);
        m[o * n_in + i0] += (1.0 - frac) as f32;
        m[o * n_in + i1] += frac as f32;
    }
    m
}

/// Bilinear resize of `N×C×H×W` to `N×C×out_h×out_w` as two matrix products,
/// so it is differentiable with respect to `x`.
pub fn resize_bilinear(x: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    let (_, _, h, w) = x.dims4()?;
    if h == 0 || w == 0 || out_h == 0 || out_w == 0 {
        return Err(Error::Dimension(format!("cannot resize {h}x{w} to {out_h}x{out_w}")));
    }
    if (h, w) == (out_h, out_w) {
        return Ok(x.clone());
    }
    let dev = x.device();
    let rh = Tensor::from_vec(bilinear_weights(h, out_h), (out_h, h), dev)?.to_dtype(x.dtype())?;
    let rw = Tensor::from_vec(bilinear_weights(w, out_w), (out_w, w), dev)?.to_dtype(x.dtype())?;
    let y = rh.broadcast_matmul(x)?;
    Ok(y.broadcast_matmul(&rw.t()?)?)
}

/// Sinusoidal embedding of scalar positions (one row per value).
pub fn sinusoidal_embedding(values: &[f64], dim: usize, device: &Device) -> Result<Tensor> {
    let half = dim / 2;
    let mut out = vec![0f32; values.len() * dim];
    for (r, &v) in values.iter().enumerate() {
        for i in 0..half {
            let freq = (-(10_000f64.ln()) * i as f64 / half as f64).exp();
            out[r * dim + i] = (v * freq).sin() as f32;
            out[r * dim + half + i] = (v * freq).cos() as f32;
        }
    }
    Ok(Tensor::from_vec(out, (values.len(), dim), device)?)
}

/// Fixed 2-D sine-cosine position table, `(h·w)×dim`.
pub fn sincos_2d(h: usize, w: usize, dim: usize, device: &Device) -> Result<Tensor> {
    if dim % 4 != 0 {
        return Err(Error::Config(format!("2-D position embedding needs dim divisible by 4, got {dim}")));
    }
    let quarter = dim / 4;
    let mut out = vec![0f32; h * w * dim];
    for y in 0..h {
        for x in 0..w {
            let row = &mut out[(y * w + x) * dim..(y * w + x + 1) * dim];
            for i in 0..quarter {
                let freq = 1.0 / 10_000f64.powf(i as f64 / quarter as f64);
                row[i] = (y as f64 * freq).sin() as f32;
                row[quarter + i] = (y as f64 * freq).cos() as f32;
                row[2 * quarter + i] = (x as f64 * freq).sin() as f32;
                row[3 * quarter + i] = (x as f64 * freq).cos() as f32;
            }
        }
    }
    Ok(Tensor::from_vec(out, (h * w, dim), device)?)
}
