//! Adam with decoupled weight decay over the trainable entries of a
//! [`ParamStore`].

use std::collections::BTreeMap;

use candle_core::backprop::GradStore;
use candle_core::Tensor;

use crate::error::{Error, Result};
use crate::harness::config::OptimConfig;
use crate::nn::ParamStore;

pub const STATE_M: &str = "opt.m.";
pub const STATE_V: &str = "opt.v.";

#[derive(Debug, Clone)]
pub struct Adam {
    pub cfg: OptimConfig,
    /// Number of updates applied so far.
    pub step: usize,
    m: BTreeMap<String, Tensor>,
    v: BTreeMap<String, Tensor>,
}

impl Adam {
    pub fn new(cfg: &OptimConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self { cfg: cfg.clone(), step: 0, m: BTreeMap::new(), v: BTreeMap::new() })
    }

    /// One update of every trainable parameter that received a gradient.
    pub fn step(&mut self, store: &ParamStore, grads: &GradStore) -> Result<()> {
        self.step += 1;
        let c = &self.cfg;
        let t = self.step as i32;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        for (name, var) in store.trainable() {
            let Some(g) = grads.get(var.as_tensor()) else { continue };
            // gradients may still reference the forward graph
            let g = &g.detach();
            let theta = var.as_detached_tensor();
            let m = match self.m.get(name) {
                Some(m) => ((m * c.beta1)? + (g * (1.0 - c.beta1))?)?,
                None => (g * (1.0 - c.beta1))?,
            };
            let v = match self.v.get(name) {
                Some(v) => ((v * c.beta2)? + (g.sqr()? * (1.0 - c.beta2))?)?,
                None => (g.sqr()? * (1.0 - c.beta2))?,
            };
            let denom = ((&v / bc2)?.sqrt()? + c.eps)?;
            let mut update = ((&m / bc1)? / denom)?;
            if c.weight_decay > 0.0 {
                update = (update + (&theta * c.weight_decay)?)?;
            }
            var.set(&(theta - (update * c.lr)?)?)?;
            self.m.insert(name.clone(), m);
            self.v.insert(name.clone(), v);
        }
        Ok(())
    }

    /// Moment tensors keyed `opt.m.<param>` / `opt.v.<param>`.
    pub fn state_tensors(&self) -> BTreeMap<String, Tensor> {
        let m = self.m.iter().map(|(k, t)| (format!("{STATE_M}{k}"), t.clone()));
        let v = self.v.iter().map(|(k, t)| (format!("{STATE_V}{k}"), t.clone()));
        m.chain(v).collect()
    }

    /// Restores moments saved by [`Adam::state_tensors`]. Every moment must
    /// belong to a trainable parameter of matching shape.
    pub fn load_state(&mut self, store: &ParamStore, tensors: &BTreeMap<String, Tensor>, step: usize) -> Result<()> {
        let mut m = BTreeMap::new();
        let mut v = BTreeMap::new();
        for (key, t) in tensors {
            let (target, name) = if let Some(n) = key.strip_prefix(STATE_M) {
                (&mut m, n)
            } else if let Some(n) = key.strip_prefix(STATE_V) {
                (&mut v, n)
            } else {
                continue;
            };
            let p = store.get(name).filter(|p| p.trainable).ok_or_else(|| Error::Format {
                id: key.clone(),
                msg: "optimizer state for an unknown or frozen parameter".into(),
            })?;
            if p.var.dims() != t.dims() {
                return Err(Error::Format {
                    id: key.clone(),
                    msg: format!("shape {:?} vs {:?}", t.dims(), p.var.dims()),
                });
            }
            target.insert(name.to_string(), t.to_dtype(store.dtype())?.to_device(store.device())?);
        }
        self.m = m;
        self.v = v;
        self.step = step;
        Ok(())
    }
}
