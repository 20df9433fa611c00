//! Per-modality visibility masks over a token grid.
//!
//! Masked counts are exact: `round_half_up(ratio * N)` for random masking,
//! `n_t * round_half_up(ratio * n_h * n_w)` for tube masking and
//! `round_half_up(ratio * n_t)` whole slices for frame masking.

use candle_core::{Device, Tensor};
use rand::seq::index;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed;
use crate::tokenizer::{GridGeometry, Modality, TokenBatch};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MaskStrategy {
    Random,
    Tube,
    Frame,
}

/// How the RGB and depth draws relate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MaskPairing {
    /// Separate seeds per modality.
    #[default]
    Independent,
    /// Depth reuses the RGB mask (requires identical strategy and ratio).
    Shared,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModalityMask {
    pub strategy: MaskStrategy,
    pub ratio: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MaskConfig {
    pub rgb: ModalityMask,
    pub depth: ModalityMask,
    #[serde(default)]
    pub pairing: MaskPairing,
}

impl MaskConfig {
    /// Random 0.8 / 0.8, the best setting of the masking-ratio ablation.
    pub fn image_default() -> Self {
        let m = ModalityMask {
            strategy: MaskStrategy::Random,
            ratio: 0.8,
        };
        Self {
            rgb: m,
            depth: m,
            pairing: MaskPairing::Independent,
        }
    }

    /// Tube 0.9 / 0.9.
    pub fn video_default() -> Self {
        let m = ModalityMask {
            strategy: MaskStrategy::Tube,
            ratio: 0.9,
        };
        Self {
            rgb: m,
            depth: m,
            pairing: MaskPairing::Independent,
        }
    }

    pub fn for_modality(&self, m: Modality) -> ModalityMask {
        match m {
            Modality::Rgb => self.rgb,
            Modality::Depth => self.depth,
        }
    }

    pub fn validate(&self, geometry: &GridGeometry) -> Result<()> {
        for (name, m) in [("rgb", self.rgb), ("depth", self.depth)] {
            check(geometry, m.strategy, m.ratio)?;
            // the encoder needs at least one token per modality
            if masked_count(geometry, m.strategy, m.ratio) >= geometry.num_tokens() {
                return Err(Error::Config(format!(
                    "{name} masking at ratio {} leaves no visible token on a grid of {}",
                    m.ratio,
                    geometry.num_tokens()
                )));
            }
        }
        if self.pairing == MaskPairing::Shared && self.rgb != self.depth {
            return Err(Error::Config(
                "shared mask pairing requires identical rgb and depth settings".into(),
            ));
        }
        Ok(())
    }
}

fn round_half_up(x: f64) -> usize {
    // the epsilon absorbs representation error in products like 0.7 * 5
    (x + 0.5 + 1e-9).floor() as usize
}

fn check(geometry: &GridGeometry, strategy: MaskStrategy, ratio: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&ratio) {
        return Err(Error::Validation(format!("mask ratio {ratio} outside [0, 1]")));
    }
    if matches!(strategy, MaskStrategy::Tube | MaskStrategy::Frame) && geometry.n_t <= 1 {
        return Err(Error::Strategy(format!(
            "{strategy:?} masking needs more than one temporal slice"
        )));
    }
    Ok(())
}

/// Number of tokens a strategy masks on `geometry`.
pub fn masked_count(geometry: &GridGeometry, strategy: MaskStrategy, ratio: f64) -> usize {
    match strategy {
        MaskStrategy::Random => round_half_up(ratio * geometry.num_tokens() as f64),
        MaskStrategy::Tube => {
            geometry.n_t * round_half_up(ratio * geometry.spatial_cells() as f64)
        }
        MaskStrategy::Frame => {
            round_half_up(ratio * geometry.n_t as f64) * geometry.spatial_cells()
        }
    }
}

/// Samples a visibility vector (`true` = visible) of length `N`.
pub fn sample_mask(
    geometry: &GridGeometry,
    strategy: MaskStrategy,
    ratio: f64,
    seed: u64,
) -> Result<Vec<bool>> {
    check(geometry, strategy, ratio)?;
    let mut rng = seed::rng(seed, &[seed::stream::MASK]);
    let n = geometry.num_tokens();
    let mut visible = vec![true; n];
    match strategy {
        MaskStrategy::Random => {
            let k = round_half_up(ratio * n as f64);
            for i in index::sample(&mut rng, n, k) {
                visible[i] = false;
            }
        }
        MaskStrategy::Tube => {
            let s = geometry.spatial_cells();
            let k = round_half_up(ratio * s as f64);
            for cell in index::sample(&mut rng, s, k) {
                for t in 0..geometry.n_t {
                    visible[t * s + cell] = false;
                }
            }
        }
        MaskStrategy::Frame => {
            let s = geometry.spatial_cells();
            let k = round_half_up(ratio * geometry.n_t as f64);
            for t in index::sample(&mut rng, geometry.n_t, k) {
                visible[t * s..(t + 1) * s].fill(false);
            }
        }
    }
    Ok(visible)
}

/// Visibility of both modalities for one sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskPlan {
    pub geometry: GridGeometry,
    pub visible_rgb: Vec<bool>,
    pub visible_depth: Vec<bool>,
    pub ratio_rgb: f64,
    pub ratio_depth: f64,
    pub seed: u64,
}

impl MaskPlan {
    /// Every token visible in both modalities.
    pub fn unmasked(geometry: GridGeometry) -> Self {
        let n = geometry.num_tokens();
        Self {
            geometry,
            visible_rgb: vec![true; n],
            visible_depth: vec![true; n],
            ratio_rgb: 0.0,
            ratio_depth: 0.0,
            seed: 0,
        }
    }

    pub fn visibility(&self, m: Modality) -> &[bool] {
        match m {
            Modality::Rgb => &self.visible_rgb,
            Modality::Depth => &self.visible_depth,
        }
    }

    pub fn visible_indices(&self, m: Modality) -> Vec<usize> {
        positions(self.visibility(m), true)
    }

    pub fn masked_indices(&self, m: Modality) -> Vec<usize> {
        positions(self.visibility(m), false)
    }

    /// Grid positions visible in both modalities, with each position's rank
    /// among the RGB-visible and depth-visible tokens.
    pub fn joint_visible(&self) -> Vec<(usize, usize, usize)> {
        let (mut r, mut d) = (0, 0);
        let mut out = Vec::new();
        for i in 0..self.visible_rgb.len() {
            let (vr, vd) = (self.visible_rgb[i], self.visible_depth[i]);
            if vr && vd {
                out.push((i, r, d));
            }
            r += vr as usize;
            d += vd as usize;
        }
        out
    }
}

fn positions(v: &[bool], want: bool) -> Vec<usize> {
    v.iter()
        .enumerate()
        .filter_map(|(i, &b)| (b == want).then_some(i))
        .collect()
}

/// Draws a plan; modalities use independent seeds derived from `seed` unless
/// the config shares one mask.
pub fn make_plan(geometry: &GridGeometry, cfg: &MaskConfig, seed: u64) -> Result<MaskPlan> {
    cfg.validate(geometry)?;
    let rgb_seed = seed::derive(seed, &[seed::stream::MASK_RGB]);
    let visible_rgb = sample_mask(geometry, cfg.rgb.strategy, cfg.rgb.ratio, rgb_seed)?;
    let visible_depth = match cfg.pairing {
        MaskPairing::Shared => visible_rgb.clone(),
        MaskPairing::Independent => {
            let depth_seed = seed::derive(seed, &[seed::stream::MASK_DEPTH]);
            sample_mask(geometry, cfg.depth.strategy, cfg.depth.ratio, depth_seed)?
        }
    };
    Ok(MaskPlan {
        geometry: *geometry,
        visible_rgb,
        visible_depth,
        ratio_rgb: cfg.rgb.ratio,
        ratio_depth: cfg.depth.ratio,
        seed,
    })
}

/// Visible tokens of a batch, plus where each one came from.
#[derive(Debug, Clone)]
pub struct VisibleTokens {
    /// `(B, N_vis, D)`
    pub tokens: Tensor,
    /// `index_map[b][j]` is the grid slot of visible token `j` of item `b`.
    pub index_map: Vec<Vec<usize>>,
    pub geometry: GridGeometry,
    pub modality: Modality,
}

impl VisibleTokens {
    pub fn num_visible(&self) -> usize {
        self.index_map.first().map_or(0, Vec::len)
    }
}

fn flat_index(rows: &[Vec<usize>], stride: usize) -> Result<Tensor> {
    let idx: Vec<u32> = rows
        .iter()
        .enumerate()
        .flat_map(|(b, r)| r.iter().map(move |&i| (b * stride + i) as u32))
        .collect();
    let n = idx.len();
    Ok(Tensor::from_vec(idx, n, &Device::Cpu)?)
}

/// Keeps each item's visible tokens, in grid order.
pub fn select_visible(batch: &TokenBatch, plans: &[MaskPlan]) -> Result<VisibleTokens> {
    let (b, n, d) = batch.tokens.dims3()?;
    if plans.len() != b {
        return Err(Error::Dimension(format!(
            "{} mask plans for a batch of {b}",
            plans.len()
        )));
    }
    let mut index_map = Vec::with_capacity(b);
    for plan in plans {
        if plan.geometry != batch.geometry || plan.visibility(batch.modality).len() != n {
            return Err(Error::Dimension(format!(
                "mask plan geometry {:?} does not match batch geometry {:?}",
                plan.geometry, batch.geometry
            )));
        }
        index_map.push(plan.visible_indices(batch.modality));
    }
    let k = index_map[0].len();
    if index_map.iter().any(|r| r.len() != k) {
        return Err(Error::Dimension(
            "batch items have different visible counts".into(),
        ));
    }
    let flat = batch.tokens.reshape((b * n, d))?;
    let tokens = flat
        .index_select(&flat_index(&index_map, n)?, 0)?
        .reshape((b, k, d))?;
    Ok(VisibleTokens {
        tokens,
        index_map,
        geometry: batch.geometry,
        modality: batch.modality,
    })
}

/// Places visible rows back into a `(B, N, D)` grid; empty slots take `fill`.
pub fn scatter(visible: &Tensor, index_map: &[Vec<usize>], n: usize, fill: &Tensor) -> Result<Tensor> {
    let (b, k, d) = visible.dims3()?;
    if index_map.len() != b || index_map.iter().any(|r| r.len() != k) {
        return Err(Error::Dimension(format!(
            "index map does not match visible tokens of shape ({b}, {k}, {d})"
        )));
    }
    if fill.dims() != [d] {
        return Err(Error::Dimension(format!(
            "fill vector {:?} does not match width {d}",
            fill.dims()
        )));
    }
    // rows 0..b*k are visible tokens, row b*k is the fill vector
    let pool = Tensor::cat(&[visible.reshape((b * k, d))?, fill.reshape((1, d))?], 0)?;
    let mut idx = vec![(b * k) as u32; b * n];
    for (bi, rows) in index_map.iter().enumerate() {
        for (j, &slot) in rows.iter().enumerate() {
            if slot >= n {
                return Err(Error::Dimension(format!("slot {slot} outside grid of {n}")));
            }
            idx[bi * n + slot] = (bi * k + j) as u32;
        }
    }
    let idx = Tensor::from_vec(idx, b * n, &Device::Cpu)?;
    Ok(pool.index_select(&idx, 0)?.reshape((b, n, d))?)
}

/// Flat `(b * N + i)` indices of each item's masked slots.
pub fn masked_flat_indices(plans: &[MaskPlan], m: Modality) -> Vec<u32> {
    plans
        .iter()
        .enumerate()
        .flat_map(|(b, p)| {
            let n = p.geometry.num_tokens();
            p.masked_indices(m).into_iter().map(move |i| (b * n + i) as u32)
        })
        .collect()
}
