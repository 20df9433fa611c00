//! In-memory datasets: sample loading, tokenization and batch assembly.

use candle_core::DType;
use ndarray::{Array2, Axis};
use rand::seq::SliceRandom;

use crate::datagen::{load_dataset, load_sample, normalize_depth, synth_clip, synth_scene, Sample};
use crate::error::{Error, Result};
use crate::net::{ModelConfig, PretrainBatch};
use crate::pipeline::config::DatasetSpec;
use crate::seed;
use crate::tokenizer::{patchify, stack_tokens, tubify, GridGeometry};

/// Materializes every sample of `spec`.
pub fn load_samples(spec: &DatasetSpec) -> Result<Vec<Sample>> {
    match spec {
        DatasetSpec::Manifest(path) => {
            let manifest = load_dataset(path)?;
            (0..manifest.len()).map(|i| load_sample(&manifest, i)).collect()
        }
        DatasetSpec::Synthetic(s) => (0..s.count)
            .map(|i| {
                let seed = seed::derive(s.seed, &[seed::stream::DATA, i as u64]);
                Ok(if s.frames == 1 {
                    Sample::Image(synth_scene(seed, s.height, s.width)?)
                } else {
                    Sample::Video(synth_clip(seed, s.frames, s.height, s.width)?)
                })
            })
            .collect(),
    }
}

/// Tokenized samples on one shared grid. Depth is min-max normalized per
/// sample before patching.
#[derive(Debug, Clone)]
pub struct TokenizedSet {
    pub geometry: GridGeometry,
    pub rgb: Vec<Array2<f32>>,
    pub depth: Vec<Array2<f32>>,
    /// Metric depth patches, for depth probes.
    pub depth_meters: Vec<Array2<f32>>,
    pub labels: Vec<Option<u32>>,
    /// Per-token class patches `(N, P²)`, for segmentation probes.
    pub segmentation: Vec<Option<Array2<f32>>>,
}

impl TokenizedSet {
    pub fn new(samples: &[Sample], model: &ModelConfig) -> Result<Self> {
        let first = samples
            .first()
            .ok_or_else(|| Error::Validation("dataset is empty".into()))?;
        let (frames, h, w) = match first {
            Sample::Image(s) => (1, s.height(), s.width()),
            Sample::Video(v) => (v.frames(), v.height(), v.width()),
        };
        let geometry = model.geometry(frames, h, w)?;
        let (p, t) = (model.patch_size, model.tubelet);
        let mut set = Self {
            geometry,
            rgb: Vec::with_capacity(samples.len()),
            depth: Vec::with_capacity(samples.len()),
            depth_meters: Vec::with_capacity(samples.len()),
            labels: Vec::with_capacity(samples.len()),
            segmentation: Vec::with_capacity(samples.len()),
        };
        for (i, sample) in samples.iter().enumerate() {
            let (rgb, depth, meters, label, seg) = match sample {
                Sample::Image(s) => {
                    if model.tubelet != 1 {
                        return Err(Error::Config("still images need tubelet 1".into()));
                    }
                    let (norm, _) = normalize_depth(&s.depth);
                    let seg = match &s.segmentation {
                        Some(m) => Some(patchify(m.mapv(f32::from).insert_axis(Axis(0)).view(), p)?),
                        None => None,
                    };
                    (
                        patchify(s.rgb.view(), p)?,
                        patchify(norm.view(), p)?,
                        patchify(s.depth.view(), p)?,
                        s.label,
                        seg,
                    )
                }
                Sample::Video(v) => {
                    let (norm, _) = normalize_depth(&v.depth);
                    (
                        tubify(v.rgb.view(), p, t)?,
                        tubify(norm.view(), p, t)?,
                        tubify(v.depth.view(), p, t)?,
                        v.label,
                        None,
                    )
                }
            };
            if rgb.nrows() != geometry.num_tokens() {
                return Err(Error::Dimension(format!(
                    "sample {i} tokenizes to {} tokens, the first sample to {}",
                    rgb.nrows(),
                    geometry.num_tokens()
                )));
            }
            set.rgb.push(rgb);
            set.depth.push(depth);
            set.depth_meters.push(meters);
            set.labels.push(label);
            set.segmentation.push(seg);
        }
        Ok(set)
    }

    pub fn len(&self) -> usize {
        self.rgb.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rgb.is_empty()
    }

    pub fn batch(&self, idx: &[usize], dtype: DType) -> Result<PretrainBatch> {
        let rgb: Vec<_> = idx.iter().map(|&i| &self.rgb[i]).collect();
        let depth: Vec<_> = idx.iter().map(|&i| &self.depth[i]).collect();
        PretrainBatch::new(stack_tokens(&rgb, dtype)?, stack_tokens(&depth, dtype)?, self.geometry)
    }

    /// A copy holding only the listed items.
    pub fn subset(&self, idx: &[usize]) -> Self {
        Self {
            geometry: self.geometry,
            rgb: idx.iter().map(|&i| self.rgb[i].clone()).collect(),
            depth: idx.iter().map(|&i| self.depth[i].clone()).collect(),
            depth_meters: idx.iter().map(|&i| self.depth_meters[i].clone()).collect(),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
            segmentation: idx.iter().map(|&i| self.segmentation[i].clone()).collect(),
        }
    }
}

/// Sample order for `epoch`, a pure function of `(seed, epoch)`.
pub fn epoch_order(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut seed::rng(seed, &[seed::stream::SHUFFLE, epoch as u64]));
    order
}

/// Full batches per epoch; a trailing partial batch is dropped.
pub fn steps_per_epoch(n: usize, batch: usize) -> Result<usize> {
    let s = n / batch.max(1);
    if s == 0 {
        return Err(Error::Config(format!("{n} samples cannot fill one batch of {batch}")));
    }
    Ok(s)
}
