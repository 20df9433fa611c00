//! Evaluation metrics: mean IoU, δ₁ depth accuracy and top-1 accuracy.

use ndarray::Array2;

use crate::error::{Error, Result};

pub const IGNORE_INDEX: u32 = 255;
pub const DELTA1_THRESHOLD: f64 = 1.25;
/// Floor applied to predicted depth before forming ratios.
pub const DEPTH_FLOOR: f64 = 1e-6;

/// Rows are ground truth, columns are predictions.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionMatrix {
    counts: Array2<u64>,
    ignore_index: u32,
}

impl ConfusionMatrix {
    pub fn new(classes: usize) -> Self {
        Self {
            counts: Array2::zeros((classes, classes)),
            ignore_index: IGNORE_INDEX,
        }
    }

    pub fn from_counts(counts: Array2<u64>) -> Result<Self> {
        if counts.nrows() != counts.ncols() {
            return Err(Error::Dimension(format!("confusion matrix must be square, got {:?}", counts.dim())));
        }
        Ok(Self {
            counts,
            ignore_index: IGNORE_INDEX,
        })
    }

    pub fn classes(&self) -> usize {
        self.counts.nrows()
    }

    pub fn counts(&self) -> &Array2<u64> {
        &self.counts
    }

    pub fn total(&self) -> u64 {
        self.counts.sum()
    }

    /// Adds one pixel per pair; pairs whose ground truth is the ignore index
    /// are skipped.
    pub fn update(&mut self, gt: &[u32], pred: &[u32]) -> Result<()> {
        if gt.len() != pred.len() {
            return Err(Error::Validation(format!(
                "{} ground-truth labels vs {} predictions",
                gt.len(),
                pred.len()
            )));
        }
        let c = self.classes() as u32;
        for (&g, &p) in gt.iter().zip(pred) {
            if g == self.ignore_index {
                continue;
            }
            if g >= c || p >= c {
                return Err(Error::Validation(format!("label ({g}, {p}) outside {c} classes")));
            }
            self.counts[[g as usize, p as usize]] += 1;
        }
        Ok(())
    }

    /// `TP / (TP + FP + FN)` per class; `None` when the class is absent from
    /// both ground truth and prediction.
    pub fn class_iou(&self) -> Vec<Option<f64>> {
        (0..self.classes())
            .map(|k| {
                let tp = self.counts[[k, k]];
                let fn_ = self.counts.row(k).sum() - tp;
                let fp = self.counts.column(k).sum() - tp;
                let denom = tp + fp + fn_;
                (denom > 0).then(|| tp as f64 / denom as f64)
            })
            .collect()
    }
}

pub fn miou(confusion: &ConfusionMatrix) -> Result<f64> {
    if confusion.classes() < 2 {
        return Err(Error::Validation("mIoU needs at least two classes".into()));
    }
    if confusion.total() == 0 {
        return Err(Error::Validation("confusion matrix is empty".into()));
    }
    let present: Vec<f64> = confusion.class_iou().into_iter().flatten().collect();
    Ok(present.iter().sum::<f64>() / present.len() as f64)
}

/// Percentage of valid pixels with `max(pred/gt, gt/pred) < 1.25`.
pub fn delta1(pred: &[f64], gt: &[f64], valid: Option<&[bool]>) -> Result<f64> {
    if pred.len() != gt.len() || valid.is_some_and(|v| v.len() != gt.len()) {
        return Err(Error::Validation("depth prediction, ground truth and mask lengths differ".into()));
    }
    let mut scored = 0usize;
    let mut hits = 0usize;
    for (i, (&p, &g)) in pred.iter().zip(gt).enumerate() {
        if valid.is_some_and(|v| !v[i]) {
            continue;
        }
        if !(g > 0.0) {
            return Err(Error::Validation(format!("ground-truth depth {g} at pixel {i} is not positive")));
        }
        let p = p.max(DEPTH_FLOOR);
        scored += 1;
        if (p / g).max(g / p) < DELTA1_THRESHOLD {
            hits += 1;
        }
    }
    if scored == 0 {
        return Err(Error::Validation("no valid depth pixels".into()));
    }
    Ok(100.0 * hits as f64 / scored as f64)
}

pub fn top1(pred: &[u32], gt: &[u32]) -> Result<f64> {
    if pred.len() != gt.len() || gt.is_empty() {
        return Err(Error::Validation(format!(
            "top-1 needs equal non-empty inputs, got {} and {}",
            pred.len(),
            gt.len()
        )));
    }
    let hits = pred.iter().zip(gt).filter(|(p, g)| p == g).count();
    Ok(100.0 * hits as f64 / gt.len() as f64)
}
