//! AdamW with decoupled weight decay, per-parameter learning-rate scales,
//! global-norm clipping, and a cosine schedule with linear warmup.

use candle_core::{DType, Tensor, Var};
use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::net::Gradients;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub lr: f64,
    pub betas: (f64, f64),
    #[serde(default = "default_eps")]
    pub eps: f64,
    pub weight_decay: f64,
    /// Global gradient-norm bound; `None` disables clipping.
    #[serde(default)]
    pub clip_grad: Option<f64>,
}

fn default_eps() -> f64 {
    1e-8
}

impl AdamWConfig {
    /// Pretraining settings: betas (0.9, 0.95), weight decay 0.05.
    pub fn pretrain(lr: f64) -> Self {
        Self {
            lr,
            betas: (0.9, 0.95),
            eps: 1e-8,
            weight_decay: 0.05,
            clip_grad: None,
        }
    }

    /// Fine-tuning settings: betas (0.9, 0.999), weight decay 0.05.
    pub fn finetune(lr: f64) -> Self {
        Self {
            betas: (0.9, 0.999),
            ..Self::pretrain(lr)
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (b1, b2) = self.betas;
        if !(self.lr >= 0.0) || !(0.0..1.0).contains(&b1) || !(0.0..1.0).contains(&b2) {
            return Err(Error::Config(format!("invalid optimizer settings {self:?}")));
        }
        if !(self.eps > 0.0) || !(self.weight_decay >= 0.0) {
            return Err(Error::Config(format!("invalid optimizer settings {self:?}")));
        }
        if let Some(c) = self.clip_grad {
            if !(c > 0.0) {
                return Err(Error::Config(format!("clip norm must be positive, got {c}")));
            }
        }
        Ok(())
    }
}

/// One optimized tensor.
#[derive(Debug, Clone)]
pub struct ParamEntry {
    pub name: String,
    pub var: Var,
    pub lr_scale: f64,
    /// Decay applies to matrices only; biases, norms and embeddings are exempt.
    pub decay: bool,
}

impl ParamEntry {
    pub fn new(name: String, var: Var) -> Self {
        let decay = var.rank() >= 2;
        Self {
            name,
            var,
            lr_scale: 1.0,
            decay,
        }
    }
}

#[derive(Debug)]
pub struct AdamW {
    pub config: AdamWConfig,
    params: Vec<ParamEntry>,
    moments: IndexMap<String, (Tensor, Tensor)>,
    step: u64,
}

impl AdamW {
    pub fn new(config: AdamWConfig, params: Vec<ParamEntry>) -> Result<Self> {
        config.validate()?;
        let mut moments = IndexMap::new();
        for p in &params {
            let z = p.var.as_tensor().zeros_like()?;
            if moments.insert(p.name.clone(), (z.clone(), z)).is_some() {
                return Err(Error::Config(format!("parameter '{}' added to the optimizer twice", p.name)));
            }
        }
        Ok(Self {
            config,
            params,
            moments,
            step: 0,
        })
    }

    pub fn params(&self) -> &[ParamEntry] {
        &self.params
    }

    pub fn names(&self) -> Vec<String> {
        self.params.iter().map(|p| p.name.clone()).collect()
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Applies one update at learning rate `lr`. Returns the pre-clip global
    /// gradient norm. Gradients for parameters outside the optimizer are an
    /// error.
    pub fn step(&mut self, grads: &Gradients, lr: f64) -> Result<f64> {
        for name in grads.names() {
            if !self.moments.contains_key(name) {
                return Err(Error::Validation(format!("gradient for '{name}' which this optimizer does not own")));
            }
        }
        let norm = grads.global_norm()?;
        if !norm.is_finite() {
            return Err(Error::Numerical(format!("gradient norm is {norm}")));
        }
        let clip = match self.config.clip_grad {
            Some(c) if norm > c => c / (norm + 1e-6),
            _ => 1.0,
        };
        self.step += 1;
        let (b1, b2) = self.config.betas;
        let t = self.step as i32;
        let bc1 = 1.0 - b1.powi(t);
        let bc2 = 1.0 - b2.powi(t);
        for p in &self.params {
            let Some(g) = grads.values.get(&p.name) else {
                continue;
            };
            // detached so the moments never keep an autograd graph alive
            let g = (g.detach() * clip)?;
            let (m, v) = &self.moments[&p.name];
            let m = ((m * b1)? + (&g * (1.0 - b1))?)?;
            let v = ((v * b2)? + (g.sqr()? * (1.0 - b2))?)?;
            let lr_p = lr * p.lr_scale;
            let mut w = p.var.as_tensor().detach();
            if p.decay && self.config.weight_decay > 0.0 {
                w = (&w * (1.0 - lr_p * self.config.weight_decay))?;
            }
            let update = ((&m / bc1)? / ((&v / bc2)?.sqrt()? + self.config.eps)?)?;
            p.var.set(&(w - (update * lr_p)?)?)?;
            self.moments.insert(p.name.clone(), (m, v));
        }
        Ok(norm)
    }

    /// First and second moments in parameter order, named `<param>.m` and
    /// `<param>.v`.
    pub fn state_tensors(&self) -> Vec<(String, Tensor)> {
        self.moments
            .iter()
            .flat_map(|(k, (m, v))| [(format!("{k}.m"), m.clone()), (format!("{k}.v"), v.clone())])
            .collect()
    }

    pub fn load_state(&mut self, step: u64, tensors: &IndexMap<String, Tensor>) -> Result<()> {
        for (k, (m, v)) in self.moments.iter_mut() {
            let get = |suffix: &str, like: &Tensor| -> Result<Tensor> {
                let key = format!("{k}.{suffix}");
                let t = tensors
                    .get(&key)
                    .ok_or_else(|| Error::Incompatible(format!("optimizer state lacks '{key}'")))?;
                if t.dims() != like.dims() {
                    return Err(Error::Incompatible(format!(
                        "optimizer state '{key}' has shape {:?}, expected {:?}",
                        t.dims(),
                        like.dims()
                    )));
                }
                Ok(t.to_dtype(like.dtype())?)
            };
            let (nm, nv) = (get("m", m)?, get("v", v)?);
            *m = nm;
            *v = nv;
        }
        self.step = step;
        Ok(())
    }
}

/// Linear warmup from `warmup_lr` to `base_lr`, then cosine decay to `min_lr`
/// at `total_steps`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CosineSchedule {
    pub base_lr: f64,
    pub min_lr: f64,
    pub warmup_lr: f64,
    pub warmup_steps: usize,
    pub total_steps: usize,
}

impl CosineSchedule {
    pub fn lr(&self, step: usize) -> f64 {
        let w = self.warmup_steps;
        if step < w {
            return self.warmup_lr + (self.base_lr - self.warmup_lr) * step as f64 / w as f64;
        }
        let span = self.total_steps.saturating_sub(w).max(1);
        let progress = ((step - w) as f64 / span as f64).min(1.0);
        self.min_lr + (self.base_lr - self.min_lr) * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
    }
}

/// Layer-wise learning-rate scale: `decay^(num_layers + 1 - layer_id)`.
pub fn layer_decay_scale(decay: f64, layer_id: usize, num_layers: usize) -> f64 {
    decay.powi((num_layers + 1).saturating_sub(layer_id) as i32)
}

pub(crate) fn to_f64(t: &Tensor) -> Result<Vec<f64>> {
    Ok(t.flatten_all()?.to_dtype(DType::F64)?.to_vec1::<f64>()?)
}
