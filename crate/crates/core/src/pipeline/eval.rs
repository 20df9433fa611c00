//! Held-fixed evaluations of a pretrained model: the pretraining objective
//! under frozen masks, and patch-level rgb → depth retrieval.

use candle_core::{DType, Tensor, D};

use crate::error::{Error, Result};
use crate::masking::{make_plan, MaskConfig, MaskPlan};
use crate::net::{LossConfig, ModelState};
use crate::objectives::{make_matching_batch, LossReport, MatchingMode, FEATURE_NORM_FLOOR};
use crate::pipeline::data::TokenizedSet;
use crate::seed;
use crate::tokenizer::Modality;

/// Mean of each loss term over `data`, in order, with masks and matching
/// pairs drawn once from `eval_seed`. Two calls with the same seed see the
/// same masks, so values at different weights are directly comparable.
pub fn evaluate_objective(
    state: &ModelState,
    data: &TokenizedSet,
    mask: &MaskConfig,
    loss: &LossConfig,
    batch_size: usize,
    eval_seed: u64,
) -> Result<LossReport> {
    if batch_size == 0 || data.is_empty() {
        return Err(Error::Validation("evaluation needs a non-empty dataset and batch".into()));
    }
    let mut sums = [0.0f64; 5];
    let mut seen = [false; 4];
    let mut batches = 0usize;
    let idx: Vec<usize> = (0..data.len()).collect();
    for (k, chunk) in idx.chunks(batch_size).enumerate() {
        let batch = data.batch(chunk, state.dtype())?;
        let plans: Vec<MaskPlan> = chunk
            .iter()
            .map(|&i| make_plan(&data.geometry, mask, seed::derive(eval_seed, &[seed::stream::MASK, i as u64])))
            .collect::<Result<_>>()?;
        // in-batch negatives need two items
        let matching = if loss.weights.eta > 0.0 && chunk.len() > 1 {
            Some(make_matching_batch(chunk.len(), seed::derive(eval_seed, &[seed::stream::MATCHING, k as u64]), MatchingMode::Random)?)
        } else {
            None
        };
        let mut cfg = *loss;
        if matching.is_none() {
            cfg.weights.eta = 0.0;
        }
        let (_, r) = state.forward_loss(&batch, &plans, matching.as_ref(), &cfg, None)?;
        sums[0] += r.total;
        for (j, v) in [r.rgb, r.depth, r.contrastive, r.matching].into_iter().enumerate() {
            if let Some(v) = v {
                sums[j + 1] += v;
                seen[j] = true;
            }
        }
        batches += 1;
    }
    let n = batches as f64;
    let term = |j: usize| seen[j].then(|| sums[j + 1] / n);
    Ok(LossReport {
        total: sums[0] / n,
        rgb: term(0),
        depth: term(1),
        contrastive: term(2),
        matching: term(3),
        ..LossReport::default()
    })
}

fn unit_rows(x: &Tensor) -> Result<Tensor> {
    let norm = x.sqr()?.sum_keepdim(D::Minus1)?.sqrt()?.clamp(FEATURE_NORM_FLOOR, f64::MAX)?;
    Ok(x.broadcast_div(&norm)?)
}

/// Patch-level rgb → depth retrieval over full grids: the percentage of
/// patches whose most similar (cosine) depth patch within the same item is
/// the one at their own grid position. Chance is `100 / N`.
pub fn retrieval_top1(state: &ModelState, data: &TokenizedSet, batch_size: usize) -> Result<f64> {
    if batch_size == 0 || data.is_empty() {
        return Err(Error::Validation("retrieval needs a non-empty dataset and batch".into()));
    }
    let idx: Vec<usize> = (0..data.len()).collect();
    let (mut hits, mut total) = (0usize, 0usize);
    for chunk in idx.chunks(batch_size) {
        let batch = data.batch(chunk, state.dtype())?;
        let encode = |raw: &Tensor, m: Modality| -> Result<Tensor> {
            let tokens = state.embed(raw, m, &data.geometry)?;
            unit_rows(&state.encode_tokens(&tokens.tokens, m, None)?.to_dtype(DType::F64)?)
        };
        let fr = encode(&batch.rgb, Modality::Rgb)?;
        let fd = encode(&batch.depth, Modality::Depth)?;
        let best: Vec<Vec<u32>> = fr.matmul(&fd.t()?.contiguous()?)?.argmax(D::Minus1)?.to_vec2()?;
        for row in best {
            hits += row.iter().enumerate().filter(|&(i, &j)| i == j as usize).count();
            total += row.len();
        }
    }
    Ok(100.0 * hits as f64 / total as f64)
}
