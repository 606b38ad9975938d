use candle_core::Tensor;

use crate::error::{Error, Result};
use crate::lora::LoraLinear;
use crate::nn::{softmax_last, Init, LayerNorm, Linear, ParamBuilder};

/// Pre-norm transformer block: multi-head self-attention followed by a GELU MLP,
/// each wrapped in a residual connection.
#[derive(Debug, Clone)]
pub struct AttentionBlock {
    pub norm1: LayerNorm,
    pub q: LoraLinear,
    pub k: LoraLinear,
    pub v: LoraLinear,
    pub proj: Linear,
    pub norm2: LayerNorm,
    pub fc1: Linear,
    pub fc2: Linear,
    pub heads: usize,
}

impl AttentionBlock {
    pub fn new(b: &mut ParamBuilder, dim: usize, heads: usize, mlp_ratio: usize) -> Result<Self> {
        if heads == 0 || dim % heads != 0 {
            return Err(Error::Config(format!("{heads} heads do not divide width {dim}")));
        }
        let std = 1.0 / (dim as f64).sqrt();
        let hidden = dim * mlp_ratio;
        let name = |leaf: &str| format!("{}.attn.{leaf}", b.prefix());
        let (qn, kn, vn) = (name("q"), name("k"), name("v"));
        let norm1 = LayerNorm::new(&mut b.sub("norm1"), dim)?;
        let q = LoraLinear::new(qn, Linear::new(&mut b.sub("attn.q"), dim, dim, Init::Normal(std))?);
        let k = LoraLinear::new(kn, Linear::new(&mut b.sub("attn.k"), dim, dim, Init::Normal(std))?);
        let v = LoraLinear::new(vn, Linear::new(&mut b.sub("attn.v"), dim, dim, Init::Normal(std))?);
        let proj = Linear::new(&mut b.sub("attn.proj"), dim, dim, Init::Normal(std))?;
        let norm2 = LayerNorm::new(&mut b.sub("norm2"), dim)?;
        let fc1 = Linear::new(&mut b.sub("mlp.fc1"), dim, hidden, Init::Normal(std))?;
        let fc2 = Linear::new(&mut b.sub("mlp.fc2"), hidden, dim, Init::Normal(1.0 / (hidden as f64).sqrt()))?;
        Ok(Self { norm1, q, k, v, proj, norm2, fc1, fc2, heads })
    }

    pub fn base_param_count(&self) -> usize {
        self.norm1.param_count()
            + self.q.base.param_count()
            + self.k.base.param_count()
            + self.v.base.param_count()
            + self.proj.param_count()
            + self.norm2.param_count()
            + self.fc1.param_count()
            + self.fc2.param_count()
    }

    pub fn qkv_mut(&mut self) -> [&mut LoraLinear; 3] {
        [&mut self.q, &mut self.k, &mut self.v]
    }

    /// `x`: `B×N×D` tokens.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (b, n, d) = x.dims3()?;
        let hd = d / self.heads;
        let h = self.norm1.forward(x)?;
        let split =
            |t: Tensor| -> Result<Tensor> { Ok(t.reshape((b, n, self.heads, hd))?.transpose(1, 2)?.contiguous()?) };
        let q = split(self.q.forward(&h)?)?;
        let k = split(self.k.forward(&h)?)?;
        let v = split(self.v.forward(&h)?)?;
        let scores = (q.matmul(&k.t()?)? / (hd as f64).sqrt())?;
        let attn = softmax_last(&scores)?.matmul(&v)?;
        let attn = attn.transpose(1, 2)?.reshape((b, n, d))?;
        let x = (x + self.proj.forward(&attn)?)?;
        let h = self.fc1.forward(&self.norm2.forward(&x)?)?.gelu()?;
        Ok((&x + self.fc2.forward(&h)?)?)
    }
}

/// `B×C×H×W` → `B×(H·W)×C`.
pub fn to_tokens(x: &Tensor) -> Result<Tensor> {
    let (b, c, h, w) = x.dims4()?;
    Ok(x.reshape((b, c, h * w))?.transpose(1, 2)?.contiguous()?)
}

/// `B×(H·W)×C` → `B×C×H×W`.
pub fn from_tokens(x: &Tensor, h: usize, w: usize) -> Result<Tensor> {
    let (b, n, c) = x.dims3()?;
    if n != h * w {
        return Err(Error::Dimension(format!("{n} tokens cannot form a {h}x{w} grid")));
    }
    Ok(x.transpose(1, 2)?.contiguous()?.reshape((b, c, h, w))?)
}
