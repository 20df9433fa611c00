//! Patch and tubelet tokenization.
//!
//! Token `i` covers grid cell `(t, h, w)` with `i = (t * n_h + h) * n_w + w`.
//! Inside a token, values are laid out as `(dt, py, px, c)`, channel fastest.

use candle_core::{DType, Device, Tensor};
use ndarray::{Array2, Array3, Array4, ArrayView2, ArrayView3, ArrayView4, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Init, Linear};

pub const DEFAULT_PATCH_SIZE: usize = 16;
pub const DEFAULT_TUBELET: usize = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Rgb,
    Depth,
}

impl Modality {
    pub const ALL: [Modality; 2] = [Modality::Rgb, Modality::Depth];

    pub fn channels(self) -> usize {
        match self {
            Modality::Rgb => 3,
            Modality::Depth => 1,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Modality::Rgb => "rgb",
            Modality::Depth => "depth",
        }
    }
}

/// Token grid layout for one image or clip.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GridGeometry {
    pub n_t: usize,
    pub n_h: usize,
    pub n_w: usize,
    pub patch: usize,
    pub tubelet: usize,
}

impl GridGeometry {
    pub fn image(h: usize, w: usize, patch: usize) -> Result<Self> {
        Self::clip(1, h, w, patch, 1)
    }

    pub fn clip(t: usize, h: usize, w: usize, patch: usize, tubelet: usize) -> Result<Self> {
        if patch == 0 || tubelet == 0 {
            return Err(Error::Dimension("patch and tubelet sizes must be positive".into()));
        }
        if h == 0 || w == 0 || h % patch != 0 || w % patch != 0 {
            return Err(Error::Dimension(format!(
                "{h}x{w} is not divisible by patch size {patch}"
            )));
        }
        if t == 0 || t % tubelet != 0 {
            return Err(Error::Dimension(format!(
                "{t} frames are not divisible by tubelet size {tubelet}"
            )));
        }
        Ok(Self {
            n_t: t / tubelet,
            n_h: h / patch,
            n_w: w / patch,
            patch,
            tubelet,
        })
    }

    pub fn num_tokens(&self) -> usize {
        self.n_t * self.n_h * self.n_w
    }

    pub fn spatial_cells(&self) -> usize {
        self.n_h * self.n_w
    }

    /// Video geometries use the three-axis positional split.
    pub fn is_video(&self) -> bool {
        self.n_t > 1 || self.tubelet > 1
    }

    pub fn frames(&self) -> usize {
        self.n_t * self.tubelet
    }

    pub fn height(&self) -> usize {
        self.n_h * self.patch
    }

    pub fn width(&self) -> usize {
        self.n_w * self.patch
    }

    pub fn token_dim(&self, modality: Modality) -> usize {
        self.tubelet * self.patch * self.patch * modality.channels()
    }

    pub fn index(&self, t: usize, h: usize, w: usize) -> usize {
        (t * self.n_h + h) * self.n_w + w
    }

    pub fn coords(&self, i: usize) -> (usize, usize, usize) {
        let w = i % self.n_w;
        let h = (i / self.n_w) % self.n_h;
        (i / (self.n_w * self.n_h), h, w)
    }
}

/// Splits a `(T, C, H, W)` clip into `(N, tubelet * P * P * C)` rows.
pub fn tubify(clip: ArrayView4<f32>, patch: usize, tubelet: usize) -> Result<Array2<f32>> {
    let (t, c, h, w) = clip.dim();
    let g = GridGeometry::clip(t, h, w, patch, tubelet)?;
    let dim = tubelet * patch * patch * c;
    let mut out = Array2::zeros((g.num_tokens(), dim));
    for (i, mut row) in out.outer_iter_mut().enumerate() {
        let (gt, gh, gw) = g.coords(i);
        let mut k = 0;
        for dt in 0..tubelet {
            for py in 0..patch {
                for px in 0..patch {
                    for ch in 0..c {
                        row[k] = clip[[gt * tubelet + dt, ch, gh * patch + py, gw * patch + px]];
                        k += 1;
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Inverse of [`tubify`].
pub fn untubify(tokens: ArrayView2<f32>, geometry: &GridGeometry, channels: usize) -> Result<Array4<f32>> {
    let g = geometry;
    let dim = g.tubelet * g.patch * g.patch * channels;
    if tokens.dim() != (g.num_tokens(), dim) {
        return Err(Error::Dimension(format!(
            "expected token matrix {}x{dim}, got {:?}",
            g.num_tokens(),
            tokens.dim()
        )));
    }
    let mut out = Array4::zeros((g.frames(), channels, g.height(), g.width()));
    for (i, row) in tokens.outer_iter().enumerate() {
        let (gt, gh, gw) = g.coords(i);
        let mut k = 0;
        for dt in 0..g.tubelet {
            for py in 0..g.patch {
                for px in 0..g.patch {
                    for ch in 0..channels {
                        out[[gt * g.tubelet + dt, ch, gh * g.patch + py, gw * g.patch + px]] = row[k];
                        k += 1;
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Splits a `(C, H, W)` image into `(N, P * P * C)` rows.
pub fn patchify(image: ArrayView3<f32>, patch: usize) -> Result<Array2<f32>> {
    tubify(image.insert_axis(Axis(0)), patch, 1)
}

/// Inverse of [`patchify`].
pub fn unpatchify(tokens: ArrayView2<f32>, geometry: &GridGeometry, channels: usize) -> Result<Array3<f32>> {
    if geometry.frames() != 1 {
        return Err(Error::Dimension("unpatchify expects an image geometry".into()));
    }
    Ok(untubify(tokens, geometry, channels)?.index_axis_move(Axis(0), 0))
}

/// Stacks per-sample token matrices into a `(B, N, K)` tensor.
pub fn stack_tokens(rows: &[&Array2<f32>], dtype: DType) -> Result<Tensor> {
    let first = rows
        .first()
        .ok_or_else(|| Error::Validation("cannot stack an empty batch".into()))?;
    let (n, k) = first.dim();
    let mut data = Vec::with_capacity(rows.len() * n * k);
    for r in rows {
        if r.dim() != (n, k) {
            return Err(Error::Dimension(format!(
                "token matrices differ: {:?} vs {:?}",
                r.dim(),
                (n, k)
            )));
        }
        data.extend(r.iter().copied());
    }
    Ok(Tensor::from_vec(data, (rows.len(), n, k), &Device::Cpu)?.to_dtype(dtype)?)
}

/// Projected tokens for one modality.
#[derive(Debug, Clone)]
pub struct TokenBatch {
    /// `(B, N, D)`
    pub tokens: Tensor,
    pub geometry: GridGeometry,
    pub modality: Modality,
}

impl TokenBatch {
    pub fn batch_size(&self) -> usize {
        self.tokens.dims()[0]
    }

    pub fn width(&self) -> usize {
        self.tokens.dims()[2]
    }

    pub fn check_finite(&self) -> Result<()> {
        let s = self.tokens.abs()?.sum_all()?.to_dtype(DType::F64)?.to_scalar::<f64>()?;
        if !s.is_finite() {
            return Err(Error::Numerical(format!(
                "non-finite {} tokens",
                self.modality.name()
            )));
        }
        Ok(())
    }
}

/// Linear patch projection, equivalent to a stride-`P` convolution.
#[derive(Debug, Clone)]
pub struct PatchEmbed {
    pub proj: Linear,
}

impl PatchEmbed {
    pub fn new(init: &mut Init<'_>, in_dim: usize, width: usize) -> Result<Self> {
        Ok(Self {
            proj: Linear::new(&mut init.pp("proj"), in_dim, width)?,
        })
    }
}

/// Inputs in `[0, 1]` are shifted and scaled by these before projection so
/// tokens carry no large shared offset.
pub const INPUT_CENTER: f64 = 0.5;
pub const INPUT_SCALE: f64 = 0.25;

/// Maps raw `(B, N, K)` patches to `(B, N, D)` tokens.
pub fn project(
    raw: &Tensor,
    modality: Modality,
    embed: &PatchEmbed,
    geometry: &GridGeometry,
) -> Result<TokenBatch> {
    let (_, n, k) = raw.dims3()?;
    if n != geometry.num_tokens() || k != geometry.token_dim(modality) {
        return Err(Error::Dimension(format!(
            "raw {} patches are {n}x{k}, geometry expects {}x{}",
            modality.name(),
            geometry.num_tokens(),
            geometry.token_dim(modality)
        )));
    }
    let centered = ((raw - INPUT_CENTER)? / INPUT_SCALE)?;
    Ok(TokenBatch {
        tokens: embed.proj.forward(&centered)?,
        geometry: *geometry,
        modality,
    })
}

fn sincos_1d(dim: usize, pos: f64, out: &mut [f64]) {
    let half = dim / 2;
    for k in 0..half {
        let omega = 1.0 / 10000f64.powf(k as f64 / half as f64);
        out[k] = (pos * omega).sin();
        out[half + k] = (pos * omega).cos();
    }
}

fn floor_even(x: usize) -> usize {
    x & !1
}

/// Fixed sine-cosine table `(N, dim)`.
///
/// Images split `dim` in half between the row and column axes. Video splits
/// it `(dim/4, 3dim/8, 3dim/8)` across time, rows and columns, each part
/// rounded down to even; leftover columns are zero.
pub fn positional_embedding(geometry: &GridGeometry, dim: usize) -> Result<Array2<f32>> {
    let n = geometry.num_tokens();
    let mut table = Array2::<f64>::zeros((n, dim));
    if geometry.is_video() {
        let (dt, dh) = (floor_even(dim / 4), floor_even(3 * dim / 8));
        let dw = dh;
        if dt < 2 || dh < 2 {
            return Err(Error::Config(format!(
                "width {dim} is too small for a three-axis positional split"
            )));
        }
        for i in 0..n {
            let (t, h, w) = geometry.coords(i);
            let mut row = table.row_mut(i);
            let row = row.as_slice_mut().expect("standard layout");
            sincos_1d(dt, t as f64, &mut row[..dt]);
            sincos_1d(dh, h as f64, &mut row[dt..dt + dh]);
            sincos_1d(dw, w as f64, &mut row[dt + dh..dt + dh + dw]);
        }
    } else {
        if dim == 0 || dim % 4 != 0 {
            return Err(Error::Config(format!(
                "image positional embeddings need a width divisible by 4, got {dim}"
            )));
        }
        let half = dim / 2;
        for i in 0..n {
            let (_, h, w) = geometry.coords(i);
            let mut row = table.row_mut(i);
            let row = row.as_slice_mut().expect("standard layout");
            sincos_1d(half, h as f64, &mut row[..half]);
            sincos_1d(half, w as f64, &mut row[half..]);
        }
    }
    Ok(table.mapv(|v| v as f32))
}

pub fn positional_tensor(geometry: &GridGeometry, dim: usize, dtype: DType) -> Result<Tensor> {
    let table = positional_embedding(geometry, dim)?;
    let (n, d) = table.dim();
    Ok(Tensor::from_vec(table.into_raw_vec_and_offset().0, (n, d), &Device::Cpu)?.to_dtype(dtype)?)
}

/// Adds the fixed table to every token.
pub fn add_positions(batch: &TokenBatch) -> Result<TokenBatch> {
    let table = positional_tensor(&batch.geometry, batch.width(), batch.tokens.dtype())?;
    Ok(TokenBatch {
        tokens: batch.tokens.broadcast_add(&table)?,
        geometry: batch.geometry,
        modality: batch.modality,
    })
}
