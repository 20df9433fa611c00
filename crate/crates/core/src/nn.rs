//! Parameter storage and the pre-norm transformer building blocks.

use candle_core::{DType, Device, Tensor, Var, D};
use indexmap::IndexMap;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::seed;

/// Ordered name → variable map. Insertion order is the manifest order.
#[derive(Debug, Clone)]
pub struct ParamStore {
    params: IndexMap<String, Var>,
    dtype: DType,
    device: Device,
}

impl ParamStore {
    pub fn new(dtype: DType) -> Self {
        Self {
            params: IndexMap::new(),
            dtype,
            device: Device::Cpu,
        }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) -> Result<Var> {
        let name = name.into();
        if self.params.contains_key(&name) {
            return Err(Error::Config(format!("parameter '{name}' registered twice")));
        }
        let var = Var::from_tensor(&value.to_dtype(self.dtype)?)?;
        self.params.insert(name, var.clone());
        Ok(var)
    }

    pub fn get(&self, name: &str) -> Option<&Var> {
        self.params.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.params.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.params.keys()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// `(name, shape)` for every parameter, in registration order.
    pub fn manifest(&self) -> Vec<(String, Vec<usize>)> {
        self.params
            .iter()
            .map(|(k, v)| (k.clone(), v.dims().to_vec()))
            .collect()
    }

    pub fn num_elements(&self) -> usize {
        self.params.values().map(|v| v.elem_count()).sum()
    }

    /// Parameters whose name starts with any of `prefixes`.
    pub fn select(&self, prefixes: &[&str]) -> Vec<(String, Var)> {
        self.params
            .iter()
            .filter(|(k, _)| prefixes.iter().any(|p| k.starts_with(p)))
            .map(|(k, v)| (k.clone(), v.clone()))
            .collect()
    }

    pub fn all(&self) -> Vec<(String, Var)> {
        self.params
            .iter()
            .map(|(k, v)| (k.clone(), v.clone()))
            .collect()
    }

    /// Copies every value into fresh storage.
    pub fn deep_clone(&self) -> Result<Self> {
        let mut out = Self::new(self.dtype);
        for (k, v) in &self.params {
            out.insert(k.clone(), v.as_tensor().copy()?)?;
        }
        Ok(out)
    }
}

/// Registers freshly initialized parameters under a name prefix.
pub struct Init<'a> {
    store: &'a mut ParamStore,
    rng: &'a mut ChaCha8Rng,
    prefix: String,
}

impl<'a> Init<'a> {
    pub fn new(store: &'a mut ParamStore, rng: &'a mut ChaCha8Rng) -> Self {
        Self {
            store,
            rng,
            prefix: String::new(),
        }
    }

    pub fn pp(&mut self, name: &str) -> Init<'_> {
        let prefix = if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{name}", self.prefix)
        };
        Init {
            store: self.store,
            rng: self.rng,
            prefix,
        }
    }

    fn full_name(&self, name: &str) -> String {
        if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{name}", self.prefix)
        }
    }

    fn register(&mut self, name: &str, values: Vec<f64>, shape: &[usize]) -> Result<Var> {
        let t = Tensor::from_vec(values, shape, &Device::Cpu)?;
        let full = self.full_name(name);
        self.store.insert(full, t)
    }

    /// Xavier-uniform matrix of shape `(fan_in, fan_out)`.
    pub fn xavier(&mut self, name: &str, fan_in: usize, fan_out: usize) -> Result<Var> {
        let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let values = (0..fan_in * fan_out)
            .map(|_| self.rng.random_range(-a..a))
            .collect();
        self.register(name, values, &[fan_in, fan_out])
    }

    pub fn normal(&mut self, name: &str, shape: &[usize], std: f64) -> Result<Var> {
        let dist = Normal::new(0.0, std).map_err(|e| Error::Config(e.to_string()))?;
        let n = shape.iter().product();
        let values = (0..n).map(|_| dist.sample(self.rng)).collect();
        self.register(name, values, shape)
    }

    pub fn constant(&mut self, name: &str, shape: &[usize], value: f64) -> Result<Var> {
        let n = shape.iter().product();
        self.register(name, vec![value; n], shape)
    }
}

/// Affine map over the last axis; weight is stored `(in, out)`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: Var,
    pub bias: Var,
}

impl Linear {
    pub fn new(init: &mut Init<'_>, fan_in: usize, fan_out: usize) -> Result<Self> {
        Ok(Self {
            weight: init.xavier("weight", fan_in, fan_out)?,
            bias: init.constant("bias", &[fan_out], 0.0)?,
        })
    }

    pub fn in_dim(&self) -> usize {
        self.weight.dims()[0]
    }

    pub fn out_dim(&self) -> usize {
        self.weight.dims()[1]
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let dims = x.dims();
        let last = *dims.last().ok_or_else(|| Error::Dimension("scalar input".into()))?;
        if last != self.in_dim() {
            return Err(Error::Dimension(format!(
                "linear layer expects width {}, got {last}",
                self.in_dim()
            )));
        }
        let rows = x.elem_count() / last;
        let y = x
            .reshape((rows, last))?
            .matmul(self.weight.as_tensor())?
            .broadcast_add(self.bias.as_tensor())?;
        let mut out_shape = dims.to_vec();
        *out_shape.last_mut().unwrap() = self.out_dim();
        Ok(y.reshape(out_shape)?)
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub weight: Var,
    pub bias: Var,
    eps: f64,
}

impl LayerNorm {
    pub const EPS: f64 = 1e-6;

    pub fn new(init: &mut Init<'_>, dim: usize) -> Result<Self> {
        Ok(Self {
            weight: init.constant("weight", &[dim], 1.0)?,
            bias: init.constant("bias", &[dim], 0.0)?,
            eps: Self::EPS,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mean = x.mean_keepdim(D::Minus1)?;
        let centered = x.broadcast_sub(&mean)?;
        let var = centered.sqr()?.mean_keepdim(D::Minus1)?;
        let normed = centered.broadcast_div(&(var + self.eps)?.sqrt()?)?;
        Ok(normed
            .broadcast_mul(self.weight.as_tensor())?
            .broadcast_add(self.bias.as_tensor())?)
    }
}

/// Exact GELU, `x·Φ(x)`, built from `erf` so its gradient is exact too.
/// (candle's fused `gelu_erf` backward rounds 1/√(2π) to six digits.)
pub fn gelu(x: &Tensor) -> Result<Tensor> {
    let phi = ((x / std::f64::consts::SQRT_2)?.erf()? + 1.0)?;
    Ok(((x * 0.5)? * phi)?)
}

/// Numerically stable softmax over the last axis.
pub fn softmax_last(x: &Tensor) -> Result<Tensor> {
    let max = x.max_keepdim(D::Minus1)?.detach();
    let e = x.broadcast_sub(&max)?.exp()?;
    Ok(e.broadcast_div(&e.sum_keepdim(D::Minus1)?)?)
}

/// Log-softmax over the last axis.
pub fn log_softmax_last(x: &Tensor) -> Result<Tensor> {
    let max = x.max_keepdim(D::Minus1)?.detach();
    let shifted = x.broadcast_sub(&max)?;
    let lse = shifted.exp()?.sum_keepdim(D::Minus1)?.log()?;
    Ok(shifted.broadcast_sub(&lse)?)
}

#[derive(Debug, Clone)]
pub struct Attention {
    pub qkv: Linear,
    pub proj: Linear,
    heads: usize,
}

impl Attention {
    pub fn new(init: &mut Init<'_>, dim: usize, heads: usize) -> Result<Self> {
        if heads == 0 || dim % heads != 0 {
            return Err(Error::Config(format!(
                "width {dim} is not divisible by {heads} heads"
            )));
        }
        Ok(Self {
            qkv: Linear::new(&mut init.pp("qkv"), dim, 3 * dim)?,
            proj: Linear::new(&mut init.pp("proj"), dim, dim)?,
            heads,
        })
    }

    /// Returns the output and the attention weights `(B, heads, n, n)`.
    pub fn forward_with_weights(&self, x: &Tensor) -> Result<(Tensor, Tensor)> {
        let (b, n, d) = x.dims3()?;
        let hd = d / self.heads;
        let qkv = self.qkv.forward(x)?.reshape((b, n, 3, self.heads, hd))?;
        let part = |i: usize| -> Result<Tensor> {
            Ok(qkv.narrow(2, i, 1)?.squeeze(2)?.transpose(1, 2)?.contiguous()?)
        };
        let (q, k, v) = (part(0)?, part(1)?, part(2)?);
        let scale = 1.0 / (hd as f64).sqrt();
        let scores = (q.matmul(&k.t()?.contiguous()?)? * scale)?;
        let weights = softmax_last(&scores)?;
        let out = weights
            .matmul(&v)?
            .transpose(1, 2)?
            .contiguous()?
            .reshape((b, n, d))?;
        Ok((self.proj.forward(&out)?, weights))
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(self.forward_with_weights(x)?.0)
    }
}

#[derive(Debug, Clone)]
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Mlp {
    pub fn new(init: &mut Init<'_>, dim: usize, hidden: usize) -> Result<Self> {
        Ok(Self {
            fc1: Linear::new(&mut init.pp("fc1"), dim, hidden)?,
            fc2: Linear::new(&mut init.pp("fc2"), hidden, dim)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.fc2.forward(&gelu(&self.fc1.forward(x)?)?)
    }
}

/// Per-sample residual-branch dropping. Block `i` of `n` uses rate
/// `rate * i / (n - 1)`.
#[derive(Debug, Clone, Copy)]
pub struct DropPath {
    pub rate: f64,
    pub seed: u64,
}

impl DropPath {
    fn mask(&self, block: usize, depth: usize, batch: usize, like: &Tensor) -> Result<Option<Tensor>> {
        let rate = if depth > 1 {
            self.rate * block as f64 / (depth - 1) as f64
        } else {
            self.rate
        };
        if rate <= 0.0 {
            return Ok(None);
        }
        let keep = 1.0 - rate;
        let mut rng = seed::rng(self.seed, &[seed::stream::DROP_PATH, block as u64]);
        let values: Vec<f64> = (0..batch)
            .map(|_| if rng.random::<f64>() < keep { 1.0 / keep } else { 0.0 })
            .collect();
        Ok(Some(
            Tensor::from_vec(values, (batch, 1, 1), like.device())?.to_dtype(like.dtype())?,
        ))
    }
}

/// Pre-norm transformer block.
#[derive(Debug, Clone)]
pub struct Block {
    pub norm1: LayerNorm,
    pub attn: Attention,
    pub norm2: LayerNorm,
    pub mlp: Mlp,
}

impl Block {
    pub fn new(init: &mut Init<'_>, dim: usize, heads: usize, mlp_ratio: f64) -> Result<Self> {
        let hidden = (dim as f64 * mlp_ratio).round() as usize;
        Ok(Self {
            norm1: LayerNorm::new(&mut init.pp("norm1"), dim)?,
            attn: Attention::new(&mut init.pp("attn"), dim, heads)?,
            norm2: LayerNorm::new(&mut init.pp("norm2"), dim)?,
            mlp: Mlp::new(&mut init.pp("mlp"), dim, hidden.max(1))?,
        })
    }

    fn forward(&self, x: &Tensor, drop: Option<&Tensor>) -> Result<Tensor> {
        let branch = |y: Tensor| -> Result<Tensor> {
            Ok(match drop {
                Some(m) => y.broadcast_mul(m)?,
                None => y,
            })
        };
        let x = (x + branch(self.attn.forward(&self.norm1.forward(x)?)?)?)?;
        let x = (&x + branch(self.mlp.forward(&self.norm2.forward(&x)?)?)?)?;
        Ok(x)
    }
}

/// A stack of blocks followed by a final norm.
#[derive(Debug, Clone)]
pub struct Transformer {
    pub blocks: Vec<Block>,
    pub norm: LayerNorm,
    width: usize,
}

impl Transformer {
    pub fn new(
        init: &mut Init<'_>,
        depth: usize,
        width: usize,
        heads: usize,
        mlp_ratio: f64,
    ) -> Result<Self> {
        let blocks = (0..depth)
            .map(|i| Block::new(&mut init.pp(&format!("blocks.{i}")), width, heads, mlp_ratio))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            blocks,
            norm: LayerNorm::new(&mut init.pp("norm"), width)?,
            width,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn depth(&self) -> usize {
        self.blocks.len()
    }

    pub fn forward(&self, x: &Tensor, drop_path: Option<DropPath>) -> Result<Tensor> {
        let (b, _, d) = x.dims3()?;
        if d != self.width {
            return Err(Error::Dimension(format!(
                "transformer expects width {}, got {d}",
                self.width
            )));
        }
        let mut h = x.clone();
        for (i, block) in self.blocks.iter().enumerate() {
            let mask = match drop_path {
                Some(dp) => dp.mask(i, self.blocks.len(), b, x)?,
                None => None,
            };
            h = block.forward(&h, mask.as_ref())?;
        }
        self.norm.forward(&h)
    }
}
