//! Training objectives: masked RGB and depth reconstruction, patch-level
//! RGB→depth InfoNCE, RGB-depth matching, and their weighted combinations.

use candle_core::{DType, Device, Tensor, D};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::log_softmax_last;
use crate::seed;

/// Added to the per-patch variance before standardizing targets.
pub const NORM_EPS: f64 = 1e-6;
/// Lower bound on feature norms before L2 normalization.
pub const FEATURE_NORM_FLOOR: f64 = 1e-8;
pub const DEFAULT_TEMPERATURE: f64 = 0.07;

/// Weights `(α, β, γ, η)` on the RGB, depth, contrastive and matching terms.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub eta: f64,
    #[serde(default = "default_tau")]
    pub tau: f64,
    /// Average RGB→depth and depth→RGB InfoNCE instead of RGB→depth only.
    #[serde(default)]
    pub symmetric: bool,
}

fn default_tau() -> f64 {
    DEFAULT_TEMPERATURE
}

impl LossWeights {
    pub fn new(alpha: f64, beta: f64, gamma: f64, eta: f64) -> Self {
        Self {
            alpha,
            beta,
            gamma,
            eta,
            tau: DEFAULT_TEMPERATURE,
            symmetric: false,
        }
    }

    /// UCF-101 column of the video pretraining table.
    pub fn video_default() -> Self {
        Self::new(1.0, 0.1, 0.01, 0.01)
    }

    /// OR-AR column of the video pretraining table.
    pub fn or_ar() -> Self {
        Self::new(1.0, 0.5, 0.2, 0.1)
    }

    /// Stage-2 weights of the image pipeline.
    pub fn image_stage2() -> Self {
        Self::new(0.1, 1.0, 0.0, 0.0)
    }

    /// Contrastive-only weights of stage 1.
    pub fn stage1() -> Self {
        Self::new(0.0, 0.0, 1.0, 0.0)
    }

    pub fn validate(&self) -> Result<()> {
        for (name, w) in [
            ("alpha", self.alpha),
            ("beta", self.beta),
            ("gamma", self.gamma),
            ("eta", self.eta),
        ] {
            if !w.is_finite() || w < 0.0 {
                return Err(Error::Validation(format!(
                    "loss weight {name} must be finite and non-negative, got {w}"
                )));
            }
        }
        if !(self.tau > 0.0) || !self.tau.is_finite() {
            return Err(Error::Validation(format!(
                "temperature must be positive, got {}",
                self.tau
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DepthLossMode {
    /// Mean absolute error (image pretraining).
    ImageL1,
    /// Mean squared error (video pretraining).
    VideoMse,
}

/// Scalar summary of one objective evaluation. Absent terms were not computed.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub total: f64,
    pub rgb: Option<f64>,
    pub depth: Option<f64>,
    pub contrastive: Option<f64>,
    pub matching: Option<f64>,
    pub masked_rgb: usize,
    pub masked_depth: usize,
    pub contrastive_pairs: usize,
}

impl LossReport {
    /// `α·rgb + β·depth + γ·contrastive + η·matching`, absent terms as zero.
    pub fn weighted_sum(&self, w: &LossWeights) -> f64 {
        w.alpha * self.rgb.unwrap_or(0.0)
            + w.beta * self.depth.unwrap_or(0.0)
            + w.gamma * self.contrastive.unwrap_or(0.0)
            + w.eta * self.matching.unwrap_or(0.0)
    }
}

pub(crate) fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}

fn ensure_finite(name: &str, t: &Tensor) -> Result<f64> {
    let v = scalar(t)?;
    if !v.is_finite() {
        return Err(Error::Numerical(format!("{name} loss is not finite ({v})")));
    }
    Ok(v)
}

/// Standardizes every row of the last axis to zero mean and unit variance.
pub fn standardize_patches(target: &Tensor) -> Result<Tensor> {
    let mean = target.mean_keepdim(D::Minus1)?;
    let centered = target.broadcast_sub(&mean)?;
    let var = centered.sqr()?.mean_keepdim(D::Minus1)?;
    Ok(centered.broadcast_div(&(var + NORM_EPS)?.sqrt()?)?)
}

fn masked_rows(pred: &Tensor, target: &Tensor, masked: &[u32], what: &str) -> Result<(Tensor, Tensor)> {
    if pred.dims() != target.dims() || pred.rank() != 3 {
        return Err(Error::Dimension(format!(
            "{what} prediction {:?} and target {:?} must share a (B, N, K) shape",
            pred.dims(),
            target.dims()
        )));
    }
    if masked.is_empty() {
        return Err(Error::Validation(format!("{what} loss needs at least one masked token")));
    }
    let (b, n, k) = pred.dims3()?;
    if let Some(&bad) = masked.iter().find(|&&i| i as usize >= b * n) {
        return Err(Error::Dimension(format!("masked index {bad} outside {b}x{n} grid")));
    }
    let idx = Tensor::new(masked, &Device::Cpu)?;
    let target = standardize_patches(&target.detach())?;
    Ok((
        pred.reshape((b * n, k))?.index_select(&idx, 0)?,
        target.reshape((b * n, k))?.index_select(&idx, 0)?,
    ))
}

/// Mean over masked patches of the per-patch squared error against the
/// standardized target. `masked` holds flat `b * N + i` indices.
pub fn loss_rgb(pred: &Tensor, target: &Tensor, masked: &[u32]) -> Result<Tensor> {
    let (p, t) = masked_rows(pred, target, masked, "rgb")?;
    Ok((p - t)?.sqr()?.mean_all()?)
}

/// Masked depth reconstruction: L1 for images, MSE for video, against the
/// standardized target.
pub fn loss_depth(pred: &Tensor, target: &Tensor, masked: &[u32], mode: DepthLossMode) -> Result<Tensor> {
    let (p, t) = masked_rows(pred, target, masked, "depth")?;
    let r = (p - t)?;
    Ok(match mode {
        DepthLossMode::ImageL1 => r.abs()?.mean_all()?,
        DepthLossMode::VideoMse => r.sqr()?.mean_all()?,
    })
}

fn l2_normalize(x: &Tensor) -> Result<Tensor> {
    let norm = x.sqr()?.sum_keepdim(D::Minus1)?.sqrt()?;
    let floor = Tensor::full(FEATURE_NORM_FLOOR, norm.shape(), norm.device())?.to_dtype(norm.dtype())?;
    Ok(x.broadcast_div(&norm.maximum(&floor)?)?)
}

/// Mean over rows of `-log softmax(row / τ)[i]` for a `(B, K, K)` similarity
/// stack; the positive of row `i` is column `i`.
pub fn info_nce_from_similarity(sim: &Tensor, tau: f64) -> Result<Tensor> {
    let (_, k, k2) = sim.dims3()?;
    if k != k2 || k == 0 {
        return Err(Error::Dimension(format!("similarity must be square and non-empty, got {:?}", sim.dims())));
    }
    let logp = log_softmax_last(&(sim / tau)?)?;
    let eye = Tensor::eye(k, sim.dtype(), sim.device())?;
    let diag = logp.broadcast_mul(&eye)?.sum(D::Minus1)?;
    Ok(diag.mean_all()?.neg()?)
}

/// Patch-level InfoNCE between `(B, K, D)` RGB and depth features, where row
/// `i` of each is the same grid position. Negatives come only from the same
/// sample's other depth patches.
pub fn loss_contrastive(feat_rgb: &Tensor, feat_depth: &Tensor, tau: f64, symmetric: bool) -> Result<Tensor> {
    if feat_rgb.dims() != feat_depth.dims() || feat_rgb.rank() != 3 {
        return Err(Error::Dimension(format!(
            "contrastive features {:?} and {:?} must share a (B, K, D) shape",
            feat_rgb.dims(),
            feat_depth.dims()
        )));
    }
    if feat_rgb.dims()[1] == 0 {
        return Err(Error::Validation("contrastive loss needs at least one pair".into()));
    }
    if !(tau > 0.0) {
        return Err(Error::Validation(format!("temperature must be positive, got {tau}")));
    }
    let r = l2_normalize(feat_rgb)?;
    let d = l2_normalize(feat_depth)?;
    let sim = r.matmul(&d.t()?.contiguous()?)?;
    let forward = info_nce_from_similarity(&sim, tau)?;
    if symmetric {
        let backward = info_nce_from_similarity(&sim.t()?.contiguous()?, tau)?;
        Ok(((forward + backward)? * 0.5)?)
    } else {
        Ok(forward)
    }
}

/// Mean two-class cross-entropy; label 1 means matched.
pub fn loss_matching(logits: &Tensor, labels: &[u32]) -> Result<Tensor> {
    let (m, c) = logits.dims2()?;
    if c != 2 {
        return Err(Error::Dimension(format!("matching logits must have 2 columns, got {c}")));
    }
    if m == 0 || labels.len() != m {
        return Err(Error::Validation(format!("{} labels for {m} logit rows", labels.len())));
    }
    if let Some(bad) = labels.iter().find(|&&l| l > 1) {
        return Err(Error::Validation(format!("matching label {bad} is not 0 or 1")));
    }
    let onehot: Vec<f64> = labels
        .iter()
        .flat_map(|&l| if l == 1 { [0.0, 1.0] } else { [1.0, 0.0] })
        .collect();
    let onehot = Tensor::from_vec(onehot, (m, 2), logits.device())?.to_dtype(logits.dtype())?;
    let logp = log_softmax_last(logits)?;
    Ok(logp.mul(&onehot)?.sum(D::Minus1)?.mean_all()?.neg()?)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MatchingMode {
    /// Each item is negative with probability ½.
    Random,
    AllPositive,
    AllNegative,
}

/// Depth partner for each RGB item and the resulting labels (1 = matched).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MatchingBatch {
    pub partner: Vec<usize>,
    pub labels: Vec<u32>,
}

/// Builds positives and in-batch negatives; a negative takes the depth of a
/// uniformly chosen different item.
pub fn make_matching_batch(batch: usize, seed: u64, mode: MatchingMode) -> Result<MatchingBatch> {
    use rand::Rng;
    if batch == 0 {
        return Err(Error::Validation("matching batch is empty".into()));
    }
    if batch < 2 && mode != MatchingMode::AllPositive {
        return Err(Error::Validation(
            "negative pairs need a batch of at least 2".into(),
        ));
    }
    let mut rng = seed::rng(seed, &[seed::stream::MATCHING]);
    let mut partner = Vec::with_capacity(batch);
    let mut labels = Vec::with_capacity(batch);
    for i in 0..batch {
        let negative = match mode {
            MatchingMode::Random => rng.random_bool(0.5),
            MatchingMode::AllPositive => false,
            MatchingMode::AllNegative => true,
        };
        if negative {
            // uniform over the other batch - 1 items
            let j = rng.random_range(0..batch - 1);
            partner.push(if j >= i { j + 1 } else { j });
            labels.push(0);
        } else {
            partner.push(i);
            labels.push(1);
        }
    }
    Ok(MatchingBatch { partner, labels })
}

/// Per-term loss tensors; `None` marks a term that was not computed.
#[derive(Debug, Clone, Default)]
pub struct LossTerms {
    pub rgb: Option<Tensor>,
    pub depth: Option<Tensor>,
    pub contrastive: Option<Tensor>,
    pub matching: Option<Tensor>,
}

fn weighted(acc: Option<Tensor>, term: &Option<Tensor>, w: f64) -> Result<Option<Tensor>> {
    Ok(match (acc, term) {
        (acc, Some(t)) if w > 0.0 => {
            let wt = (t * w)?;
            Some(match acc {
                Some(a) => (a + wt)?,
                None => wt,
            })
        }
        (acc, _) => acc,
    })
}

/// Combines terms as `α·rgb + β·depth + γ·contrastive + η·matching`.
/// Returns `None` for the total when no term carries weight.
pub fn loss_total_video(terms: &LossTerms, weights: &LossWeights) -> Result<(Option<Tensor>, LossReport)> {
    weights.validate()?;
    let mut report = LossReport::default();
    for (name, term, slot) in [
        ("rgb", &terms.rgb, &mut report.rgb),
        ("depth", &terms.depth, &mut report.depth),
        ("contrastive", &terms.contrastive, &mut report.contrastive),
        ("matching", &terms.matching, &mut report.matching),
    ] {
        if let Some(t) = term {
            *slot = Some(ensure_finite(name, t)?);
        }
    }
    let mut total = None;
    total = weighted(total, &terms.rgb, weights.alpha)?;
    total = weighted(total, &terms.depth, weights.beta)?;
    total = weighted(total, &terms.contrastive, weights.gamma)?;
    total = weighted(total, &terms.matching, weights.eta)?;
    report.total = report.weighted_sum(weights);
    Ok((total, report))
}

/// Stage-1 objective: contrastive only.
pub fn loss_stage1(contrastive: &Tensor) -> Result<Tensor> {
    ensure_finite("contrastive", contrastive)?;
    Ok(contrastive.clone())
}

/// Stage-2 objective: `α·rgb + β·depth`.
pub fn loss_stage2(rgb: &Tensor, depth: &Tensor, alpha: f64, beta: f64) -> Result<Tensor> {
    LossWeights::new(alpha, beta, 0.0, 0.0).validate()?;
    ensure_finite("rgb", rgb)?;
    ensure_finite("depth", depth)?;
    Ok(((rgb * alpha)? + (depth * beta)?)?)
}
