//! Encoders, the shared cross-modal decoder, reconstruction heads and the
//! matching head, plus the differentiable pretraining forward pass.

use candle_core::{DType, Device, Tensor, Var};
use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::masking::{masked_flat_indices, scatter, select_visible, MaskPlan, VisibleTokens};
use crate::nn::{DropPath, Init, Linear, ParamStore, Transformer};
use crate::objectives::{
    loss_contrastive, loss_depth, loss_matching, loss_rgb, loss_total_video, DepthLossMode, LossReport,
    LossTerms, LossWeights, MatchingBatch,
};
use crate::seed;
use crate::tokenizer::{
    add_positions, positional_tensor, project, GridGeometry, Modality, PatchEmbed, TokenBatch,
    DEFAULT_PATCH_SIZE, DEFAULT_TUBELET,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EncoderMode {
    /// One transformer per modality.
    Specific,
    /// One transformer for both modalities, told apart by a learned embedding.
    Shared,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub depth: usize,
    pub width: usize,
    pub heads: usize,
    #[serde(default = "default_mlp_ratio")]
    pub mlp_ratio: f64,
    pub mode: EncoderMode,
    /// Maximum stochastic-depth rate, reached at the last block.
    #[serde(default)]
    pub drop_path: f64,
}

fn default_mlp_ratio() -> f64 {
    4.0
}

impl EncoderConfig {
    pub fn desk(mode: EncoderMode) -> Self {
        Self {
            depth: 4,
            width: 128,
            heads: 4,
            mlp_ratio: 4.0,
            mode,
            drop_path: 0.0,
        }
    }

    /// ViT-B.
    pub fn vit_b(mode: EncoderMode) -> Self {
        Self {
            depth: 12,
            width: 768,
            heads: 12,
            mlp_ratio: 4.0,
            mode,
            drop_path: 0.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DecoderConfig {
    pub depth: usize,
    pub width: usize,
    pub heads: usize,
    #[serde(default = "default_mlp_ratio")]
    pub mlp_ratio: f64,
}

impl DecoderConfig {
    /// Full-scale video decoder: 4 blocks, 6 heads, half the encoder width.
    pub fn video_preset(encoder_width: usize) -> Self {
        Self {
            depth: 4,
            width: encoder_width / 2,
            heads: 6,
            mlp_ratio: 4.0,
        }
    }

    /// Full-scale image decoder: 8 blocks, 16 heads, width 512.
    pub fn image_preset() -> Self {
        Self {
            depth: 8,
            width: 512,
            heads: 16,
            mlp_ratio: 4.0,
        }
    }

    /// Desk-scale decoder: half the encoder width, 4 heads.
    pub fn desk(encoder_width: usize, depth: usize) -> Self {
        Self {
            depth,
            width: encoder_width / 2,
            heads: 4,
            mlp_ratio: 4.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub patch_size: usize,
    /// Frames per token; 1 for images.
    pub tubelet: usize,
    pub encoder: EncoderConfig,
    pub decoder: DecoderConfig,
}

impl ModelConfig {
    pub fn desk_video() -> Self {
        Self {
            patch_size: DEFAULT_PATCH_SIZE,
            tubelet: DEFAULT_TUBELET,
            encoder: EncoderConfig::desk(EncoderMode::Shared),
            decoder: DecoderConfig::desk(128, 2),
        }
    }

    pub fn desk_image() -> Self {
        Self {
            patch_size: DEFAULT_PATCH_SIZE,
            tubelet: 1,
            encoder: EncoderConfig::desk(EncoderMode::Specific),
            decoder: DecoderConfig::desk(128, 2),
        }
    }

    pub fn full_video() -> Self {
        Self {
            patch_size: DEFAULT_PATCH_SIZE,
            tubelet: DEFAULT_TUBELET,
            encoder: EncoderConfig::vit_b(EncoderMode::Shared),
            decoder: DecoderConfig::video_preset(768),
        }
    }

    pub fn full_image() -> Self {
        Self {
            patch_size: DEFAULT_PATCH_SIZE,
            tubelet: 1,
            encoder: EncoderConfig::vit_b(EncoderMode::Specific),
            decoder: DecoderConfig::image_preset(),
        }
    }

    pub fn token_dim(&self, m: Modality) -> usize {
        self.tubelet * self.patch_size * self.patch_size * m.channels()
    }

    pub fn validate(&self) -> Result<()> {
        let e = &self.encoder;
        let d = &self.decoder;
        if self.patch_size == 0 || self.tubelet == 0 {
            return Err(Error::Config("patch size and tubelet must be positive".into()));
        }
        if e.depth == 0 || d.depth == 0 {
            return Err(Error::Config("encoder and decoder need at least one block".into()));
        }
        for (what, width, heads) in [("encoder", e.width, e.heads), ("decoder", d.width, d.heads)] {
            if heads == 0 || width % heads != 0 {
                return Err(Error::Config(format!(
                    "{what} width {width} is not divisible by {heads} heads"
                )));
            }
            if width % 4 != 0 {
                return Err(Error::Config(format!("{what} width {width} must be divisible by 4")));
            }
        }
        if !(0.0..1.0).contains(&e.drop_path) {
            return Err(Error::Config(format!("drop path {} outside [0, 1)", e.drop_path)));
        }
        if !(e.mlp_ratio > 0.0 && d.mlp_ratio > 0.0) {
            return Err(Error::Config("mlp ratio must be positive".into()));
        }
        Ok(())
    }

    /// Grid for an input of the given size under this tokenization.
    pub fn geometry(&self, frames: usize, height: usize, width: usize) -> Result<GridGeometry> {
        if self.tubelet == 1 && frames == 1 {
            GridGeometry::image(height, width, self.patch_size)
        } else {
            GridGeometry::clip(frames, height, width, self.patch_size, self.tubelet)
        }
    }
}

fn linear_count(i: usize, o: usize) -> usize {
    i * o + o
}

fn transformer_count(depth: usize, width: usize, mlp_ratio: f64) -> usize {
    let hidden = ((width as f64 * mlp_ratio).round() as usize).max(1);
    let block = 4 * width
        + linear_count(width, 3 * width)
        + linear_count(width, width)
        + linear_count(width, hidden)
        + linear_count(hidden, width);
    depth * block + 2 * width
}

/// Learnable scalar count:
///
/// ```text
/// embed(k_rgb) + embed(k_depth)                 patch projections, k -> D
/// + encoders                                    2·T(D) specific, T(D) + 2D shared
/// + (D·Dd + Dd)                                 latent -> decoder adapter
/// + 4·Dd                                        mask tokens and modality embeddings
/// + T(Dd)
/// + (Dd·k_rgb + k_rgb) + (Dd·k_depth + k_depth) heads
/// + (2D·2 + 2)                                  matching head
/// ```
///
/// where `T(w) = depth·(4w + 3w² + 3w + w² + w + 2·w·h + h + w) + 2w`
/// with `h = round(w · mlp_ratio)`.
pub fn expected_param_count(cfg: &ModelConfig) -> usize {
    let (e, d) = (&cfg.encoder, &cfg.decoder);
    let kr = cfg.token_dim(Modality::Rgb);
    let kd = cfg.token_dim(Modality::Depth);
    let enc = transformer_count(e.depth, e.width, e.mlp_ratio);
    let encoders = match e.mode {
        EncoderMode::Specific => 2 * enc,
        EncoderMode::Shared => enc + 2 * e.width,
    };
    linear_count(kr, e.width)
        + linear_count(kd, e.width)
        + encoders
        + linear_count(e.width, d.width)
        + 4 * d.width
        + transformer_count(d.depth, d.width, d.mlp_ratio)
        + linear_count(d.width, kr)
        + linear_count(d.width, kd)
        + linear_count(2 * e.width, 2)
}

#[derive(Debug, Clone)]
pub enum Encoders {
    Specific {
        rgb: Transformer,
        depth: Transformer,
    },
    Shared {
        trunk: Transformer,
        embed_rgb: Var,
        embed_depth: Var,
    },
}

/// All learnable state of the pretraining model. Every module holds handles
/// into `params`, so updating a variable there updates the module.
#[derive(Debug, Clone)]
pub struct ModelState {
    pub config: ModelConfig,
    pub params: ParamStore,
    pub patch_embed_rgb: PatchEmbed,
    pub patch_embed_depth: PatchEmbed,
    pub encoders: Encoders,
    pub decoder_embed: Linear,
    pub mask_token_rgb: Var,
    pub mask_token_depth: Var,
    pub modality_rgb: Var,
    pub modality_depth: Var,
    pub decoder: Transformer,
    pub head_rgb: Linear,
    pub head_depth: Linear,
    pub matching_head: Linear,
}

/// Name prefixes of the parameters trained in each stage.
pub const ENCODER_PREFIXES: [&str; 2] = ["patch_embed.", "encoder."];
pub const RECONSTRUCTION_PREFIXES: [&str; 3] = ["patch_embed.", "encoder.", "decoder."];

impl ModelState {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        Self::with_dtype(config, seed, DType::F32)
    }

    pub fn with_dtype(config: ModelConfig, seed: u64, dtype: DType) -> Result<Self> {
        config.validate()?;
        let (e, d) = (config.encoder, config.decoder);
        let mut params = ParamStore::new(dtype);
        let mut rng = seed::rng(seed, &[seed::stream::INIT]);
        let mut root = Init::new(&mut params, &mut rng);

        let patch_embed_rgb = PatchEmbed::new(&mut root.pp("patch_embed.rgb"), config.token_dim(Modality::Rgb), e.width)?;
        let patch_embed_depth =
            PatchEmbed::new(&mut root.pp("patch_embed.depth"), config.token_dim(Modality::Depth), e.width)?;
        let encoders = match e.mode {
            EncoderMode::Specific => Encoders::Specific {
                rgb: Transformer::new(&mut root.pp("encoder.rgb"), e.depth, e.width, e.heads, e.mlp_ratio)?,
                depth: Transformer::new(&mut root.pp("encoder.depth"), e.depth, e.width, e.heads, e.mlp_ratio)?,
            },
            EncoderMode::Shared => {
                let mut enc = root.pp("encoder");
                let trunk = Transformer::new(&mut enc, e.depth, e.width, e.heads, e.mlp_ratio)?;
                let mut me = enc.pp("modality_embed");
                Encoders::Shared {
                    trunk,
                    embed_rgb: me.normal("rgb", &[e.width], 0.02)?,
                    embed_depth: me.normal("depth", &[e.width], 0.02)?,
                }
            }
        };
        let mut dec = root.pp("decoder");
        let decoder_embed = Linear::new(&mut dec.pp("embed"), e.width, d.width)?;
        let (mask_token_rgb, mask_token_depth) = {
            let mut mt = dec.pp("mask_token");
            (mt.normal("rgb", &[d.width], 0.02)?, mt.normal("depth", &[d.width], 0.02)?)
        };
        let (modality_rgb, modality_depth) = {
            let mut me = dec.pp("modality_embed");
            (me.normal("rgb", &[d.width], 0.02)?, me.normal("depth", &[d.width], 0.02)?)
        };
        let decoder = Transformer::new(&mut dec, d.depth, d.width, d.heads, d.mlp_ratio)?;
        let head_rgb = Linear::new(&mut dec.pp("head.rgb"), d.width, config.token_dim(Modality::Rgb))?;
        let head_depth = Linear::new(&mut dec.pp("head.depth"), d.width, config.token_dim(Modality::Depth))?;
        let matching_head = Linear::new(&mut root.pp("matching_head"), 2 * e.width, 2)?;
        Ok(Self {
            config,
            params,
            patch_embed_rgb,
            patch_embed_depth,
            encoders,
            decoder_embed,
            mask_token_rgb,
            mask_token_depth,
            modality_rgb,
            modality_depth,
            decoder,
            head_rgb,
            head_depth,
            matching_head,
        })
    }

    pub fn dtype(&self) -> DType {
        self.params.dtype()
    }

    pub fn manifest(&self) -> Vec<(String, Vec<usize>)> {
        self.params.manifest()
    }

    pub fn patch_embed(&self, m: Modality) -> &PatchEmbed {
        match m {
            Modality::Rgb => &self.patch_embed_rgb,
            Modality::Depth => &self.patch_embed_depth,
        }
    }

    /// Encoder depth (number of blocks).
    pub fn encoder_depth(&self) -> usize {
        self.config.encoder.depth
    }

    /// Projects raw `(B, N, K)` patches and adds sine-cosine positions.
    pub fn embed(&self, raw: &Tensor, m: Modality, geometry: &GridGeometry) -> Result<TokenBatch> {
        let raw = raw.to_dtype(self.dtype())?;
        let batch = project(&raw, m, self.patch_embed(m), geometry)?;
        add_positions(&batch)
    }

    /// Runs the modality's encoder over `(B, n, D)` tokens.
    pub fn encode_tokens(&self, tokens: &Tensor, m: Modality, drop: Option<DropPath>) -> Result<Tensor> {
        let (_, _, d) = tokens.dims3()?;
        if d != self.config.encoder.width {
            return Err(Error::Dimension(format!(
                "encoder expects width {}, got {d}",
                self.config.encoder.width
            )));
        }
        let drop = drop.map(|dp| DropPath {
            rate: dp.rate,
            seed: seed::derive(dp.seed, &[m as u64]),
        });
        match &self.encoders {
            Encoders::Specific { rgb, depth } => match m {
                Modality::Rgb => rgb.forward(tokens, drop),
                Modality::Depth => depth.forward(tokens, drop),
            },
            Encoders::Shared {
                trunk,
                embed_rgb,
                embed_depth,
            } => {
                let e = match m {
                    Modality::Rgb => embed_rgb,
                    Modality::Depth => embed_depth,
                };
                trunk.forward(&tokens.broadcast_add(e.as_tensor())?, drop)
            }
        }
    }

    /// Encodes each modality's visible tokens; token counts are preserved.
    pub fn encode(
        &self,
        rgb: &VisibleTokens,
        depth: &VisibleTokens,
        drop: Option<DropPath>,
    ) -> Result<(VisibleTokens, VisibleTokens)> {
        for v in [rgb, depth] {
            let values = v.tokens.flatten_all()?.to_dtype(DType::F64)?.to_vec1::<f64>()?;
            if values.iter().any(|x| !x.is_finite()) {
                return Err(Error::Numerical(format!("{} tokens are not finite", v.modality.name())));
            }
        }
        let lat = |v: &VisibleTokens| -> Result<VisibleTokens> {
            Ok(VisibleTokens {
                tokens: self.encode_tokens(&v.tokens, v.modality, drop)?,
                ..v.clone()
            })
        };
        Ok((lat(rgb)?, lat(depth)?))
    }

    fn decoder_grid(&self, lat: &VisibleTokens, n: usize) -> Result<Tensor> {
        let (mask, modality) = match lat.modality {
            Modality::Rgb => (&self.mask_token_rgb, &self.modality_rgb),
            Modality::Depth => (&self.mask_token_depth, &self.modality_depth),
        };
        let x = self.decoder_embed.forward(&lat.tokens)?;
        let grid = scatter(&x, &lat.index_map, n, mask.as_tensor())?;
        let pos = positional_tensor(&lat.geometry, self.config.decoder.width, self.dtype())?;
        Ok(grid.broadcast_add(&pos)?.broadcast_add(modality.as_tensor())?)
    }

    /// Reconstructs full grids from visible latents: `(B, N, t·P²·3)` and
    /// `(B, N, t·P²)`. Both modalities share one decoder pass over `2N` tokens.
    pub fn decode(&self, rgb: &VisibleTokens, depth: &VisibleTokens) -> Result<(Tensor, Tensor)> {
        if rgb.modality != Modality::Rgb || depth.modality != Modality::Depth {
            return Err(Error::Dimension("decode expects (rgb, depth) latents".into()));
        }
        if rgb.geometry != depth.geometry || rgb.index_map.len() != depth.index_map.len() {
            return Err(Error::Dimension("rgb and depth latents come from different grids".into()));
        }
        let n = rgb.geometry.num_tokens();
        let seq = Tensor::cat(&[self.decoder_grid(rgb, n)?, self.decoder_grid(depth, n)?], 1)?;
        let out = self.decoder.forward(&seq, None)?;
        let pr = self.head_rgb.forward(&out.narrow(1, 0, n)?)?;
        let pd = self.head_depth.forward(&out.narrow(1, n, n)?)?;
        Ok((pr, pd))
    }

    /// Mean-pools each modality's latents, concatenates them and applies the
    /// matching head. Returns `(B, 2)` logits.
    pub fn matching_logits(&self, lat_rgb: &Tensor, lat_depth: &Tensor) -> Result<Tensor> {
        let (b, nr, _) = lat_rgb.dims3()?;
        let (bd, nd, _) = lat_depth.dims3()?;
        if nr == 0 || nd == 0 {
            return Err(Error::Validation("matching needs at least one visible token".into()));
        }
        if b != bd {
            return Err(Error::Dimension(format!("{b} rgb latents vs {bd} depth latents")));
        }
        let pooled = Tensor::cat(&[lat_rgb.mean(1)?, lat_depth.mean(1)?], 1)?;
        self.matching_head.forward(&pooled)
    }

    /// Evaluates the weighted pretraining objective. Terms with zero weight
    /// are not computed.
    pub fn forward_loss(
        &self,
        batch: &PretrainBatch,
        plans: &[MaskPlan],
        matching: Option<&MatchingBatch>,
        cfg: &LossConfig,
        drop: Option<DropPath>,
    ) -> Result<(Option<Tensor>, LossReport)> {
        let w = &cfg.weights;
        w.validate()?;
        let g = &batch.geometry;
        let vis_r = select_visible(&self.embed(&batch.rgb, Modality::Rgb, g)?, plans)?;
        let vis_d = select_visible(&self.embed(&batch.depth, Modality::Depth, g)?, plans)?;
        let (lat_r, lat_d) = self.encode(&vis_r, &vis_d, drop)?;

        let mut terms = LossTerms::default();
        let masked_r = masked_flat_indices(plans, Modality::Rgb);
        let masked_d = masked_flat_indices(plans, Modality::Depth);
        if w.alpha > 0.0 || w.beta > 0.0 {
            let (pr, pd) = self.decode(&lat_r, &lat_d)?;
            if w.alpha > 0.0 {
                terms.rgb = Some(loss_rgb(&pr, &batch.rgb.to_dtype(self.dtype())?, &masked_r)?);
            }
            if w.beta > 0.0 {
                terms.depth = Some(loss_depth(
                    &pd,
                    &batch.depth.to_dtype(self.dtype())?,
                    &masked_d,
                    cfg.depth_mode,
                )?);
            }
        }
        let mut pairs = 0;
        if w.gamma > 0.0 {
            let (term, k) = self.contrastive_term(&lat_r.tokens, &lat_d.tokens, plans, w)?;
            terms.contrastive = Some(term);
            pairs = k;
        }
        if w.eta > 0.0 {
            let m = matching.ok_or_else(|| Error::Config("matching weight is set but no matching batch was given".into()))?;
            if m.partner.len() != plans.len() {
                return Err(Error::Dimension(format!(
                    "{} matching pairs for a batch of {}",
                    m.partner.len(),
                    plans.len()
                )));
            }
            let partner: Vec<u32> = m.partner.iter().map(|&p| p as u32).collect();
            let idx = Tensor::new(partner.as_slice(), &Device::Cpu)?;
            let logits = self.matching_logits(&lat_r.tokens, &lat_d.tokens.index_select(&idx, 0)?)?;
            terms.matching = Some(loss_matching(&logits, &m.labels)?);
        }
        let (total, mut report) = loss_total_video(&terms, w)?;
        report.masked_rgb = masked_r.len();
        report.masked_depth = masked_d.len();
        report.contrastive_pairs = pairs;
        Ok((total, report))
    }

    /// InfoNCE over positions visible in both modalities, averaged over items
    /// with at least one such position. Returns the term and the pair count.
    fn contrastive_term(
        &self,
        lat_r: &Tensor,
        lat_d: &Tensor,
        plans: &[MaskPlan],
        w: &LossWeights,
    ) -> Result<(Tensor, usize)> {
        let mut per_item = Vec::new();
        let mut pairs = 0;
        for (b, plan) in plans.iter().enumerate() {
            let joint = plan.joint_visible();
            if joint.is_empty() {
                continue;
            }
            pairs += joint.len();
            let ri: Vec<u32> = joint.iter().map(|&(_, r, _)| r as u32).collect();
            let di: Vec<u32> = joint.iter().map(|&(_, _, d)| d as u32).collect();
            let fr = lat_r.get(b)?.index_select(&Tensor::new(ri.as_slice(), &Device::Cpu)?, 0)?;
            let fd = lat_d.get(b)?.index_select(&Tensor::new(di.as_slice(), &Device::Cpu)?, 0)?;
            per_item.push(loss_contrastive(&fr.unsqueeze(0)?, &fd.unsqueeze(0)?, w.tau, w.symmetric)?);
        }
        if per_item.is_empty() {
            return Ok((Tensor::zeros((), self.dtype(), &Device::Cpu)?, 0));
        }
        let n = per_item.len() as f64;
        Ok(((Tensor::stack(&per_item, 0)?.sum_all()? / n)?, pairs))
    }

    /// Objective value plus gradients for each of `params`. Parameters the
    /// active terms do not reach get zero gradients and are listed in
    /// [`Gradients::unreached`].
    pub fn forward_backward(
        &self,
        batch: &PretrainBatch,
        plans: &[MaskPlan],
        matching: Option<&MatchingBatch>,
        cfg: &LossConfig,
        params: &[(String, Var)],
        drop: Option<DropPath>,
    ) -> Result<(LossReport, Gradients)> {
        let (total, report) = self.forward_loss(batch, plans, matching, cfg, drop)?;
        let store = match &total {
            Some(t) if t.track_op() => Some(t.backward()?),
            _ => None,
        };
        let mut grads = Gradients::default();
        for (name, var) in params {
            match store.as_ref().and_then(|s| s.get(var.as_tensor())) {
                Some(g) => {
                    grads.values.insert(name.clone(), g.clone());
                }
                None => {
                    grads.values.insert(name.clone(), var.as_tensor().zeros_like()?);
                    grads.unreached.push(name.clone());
                }
            }
        }
        Ok((report, grads))
    }
}

/// Gradients keyed by parameter name, in the order requested.
#[derive(Debug, Clone, Default)]
pub struct Gradients {
    pub values: IndexMap<String, Tensor>,
    pub unreached: Vec<String>,
}

impl Gradients {
    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.values.keys()
    }

    pub fn global_norm(&self) -> Result<f64> {
        let mut sq = 0.0;
        for g in self.values.values() {
            sq += g.to_dtype(DType::F64)?.sqr()?.sum_all()?.to_scalar::<f64>()?;
        }
        Ok(sq.sqrt())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub weights: LossWeights,
    pub depth_mode: DepthLossMode,
}

/// Raw patch tensors of a batch, `(B, N, K_m)` per modality.
#[derive(Debug, Clone)]
pub struct PretrainBatch {
    pub rgb: Tensor,
    pub depth: Tensor,
    pub geometry: GridGeometry,
}

impl PretrainBatch {
    pub fn new(rgb: Tensor, depth: Tensor, geometry: GridGeometry) -> Result<Self> {
        let (b, n, kr) = rgb.dims3()?;
        let (bd, nd, kd) = depth.dims3()?;
        if b != bd
            || n != nd
            || n != geometry.num_tokens()
            || kr != geometry.token_dim(Modality::Rgb)
            || kd != geometry.token_dim(Modality::Depth)
        {
            return Err(Error::Dimension(format!(
                "rgb {:?} and depth {:?} patches do not fit grid {:?}",
                rgb.dims(),
                depth.dims(),
                geometry
            )));
        }
        Ok(Self { rgb, depth, geometry })
    }

    pub fn batch_size(&self) -> usize {
        self.rgb.dims()[0]
    }
}
