//! Run configuration: pipeline presets, JSON overrides and validation.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::masking::MaskConfig;
use crate::net::ModelConfig;
use crate::objectives::{DepthLossMode, LossWeights};
use crate::optim::AdamWConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PipelineKind {
    Video,
    Image,
}

/// Where samples come from: a manifest on disk or the built-in generator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetSpec {
    Manifest(PathBuf),
    Synthetic(SyntheticSpec),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub count: usize,
    /// Clip length; 1 draws still scenes.
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScheduleConfig {
    pub warmup_epochs: usize,
    #[serde(default)]
    pub min_lr: f64,
    #[serde(default)]
    pub warmup_lr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PretrainConfig {
    pub pipeline: PipelineKind,
    pub model: ModelConfig,
    pub mask: MaskConfig,
    /// Video: all four weights. Image: `alpha` and `beta` of stage 2; `tau`
    /// and `symmetric` also govern stage 1.
    pub loss: LossWeights,
    pub depth_loss: DepthLossMode,
    pub optimizer: AdamWConfig,
    pub schedule: ScheduleConfig,
    /// Video pipeline only.
    pub epochs: usize,
    /// Image pipeline only.
    pub stage1_epochs: usize,
    pub stage2_epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub dataset: DatasetSpec,
    /// Save every this many steps; 0 keeps only the final checkpoint.
    #[serde(default)]
    pub checkpoint_every: usize,
    /// Stops after this many steps in total, across stages.
    #[serde(default)]
    pub max_steps: Option<usize>,
    /// Optional warm start; every model parameter must be present.
    #[serde(default)]
    pub init_checkpoint: Option<PathBuf>,
    /// Run directory; the CLI's `--out` takes precedence.
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
}

impl PretrainConfig {
    /// Desk-scale video preset: 8-frame 64×64 clips, tube masking 0.9 / 0.9.
    pub fn video_preset() -> Self {
        Self {
            pipeline: PipelineKind::Video,
            model: ModelConfig::desk_video(),
            mask: MaskConfig::video_default(),
            loss: LossWeights::video_default(),
            depth_loss: DepthLossMode::VideoMse,
            optimizer: AdamWConfig::pretrain(1e-3),
            schedule: ScheduleConfig {
                warmup_epochs: 5,
                min_lr: 0.0,
                warmup_lr: 0.0,
            },
            epochs: 50,
            stage1_epochs: 0,
            stage2_epochs: 0,
            batch_size: 8,
            seed: 0,
            dataset: DatasetSpec::Synthetic(SyntheticSpec {
                count: 32,
                frames: 8,
                height: 64,
                width: 64,
                seed: 0,
            }),
            checkpoint_every: 0,
            max_steps: None,
            init_checkpoint: None,
            output_dir: None,
        }
    }

    /// Desk-scale image preset: 64×64 scenes, random masking 0.8 / 0.8.
    pub fn image_preset() -> Self {
        Self {
            pipeline: PipelineKind::Image,
            model: ModelConfig::desk_image(),
            mask: MaskConfig::image_default(),
            loss: LossWeights::image_stage2(),
            depth_loss: DepthLossMode::ImageL1,
            optimizer: AdamWConfig::pretrain(1e-3),
            schedule: ScheduleConfig {
                warmup_epochs: 2,
                min_lr: 0.0,
                warmup_lr: 0.0,
            },
            epochs: 0,
            stage1_epochs: 10,
            stage2_epochs: 40,
            batch_size: 8,
            seed: 0,
            dataset: DatasetSpec::Synthetic(SyntheticSpec {
                count: 64,
                frames: 1,
                height: 64,
                width: 64,
                seed: 0,
            }),
            checkpoint_every: 0,
            max_steps: None,
            init_checkpoint: None,
            output_dir: None,
        }
    }

    pub fn preset(kind: PipelineKind) -> Self {
        match kind {
            PipelineKind::Video => Self::video_preset(),
            PipelineKind::Image => Self::image_preset(),
        }
    }

    /// Deep-merges `overrides` onto the preset for `kind`.
    pub fn from_overrides(kind: PipelineKind, overrides: &Value) -> Result<Self> {
        if let Some(p) = overrides.get("pipeline") {
            let declared: PipelineKind = serde_json::from_value(p.clone())
                .map_err(|e| Error::Config(format!("bad pipeline field: {e}")))?;
            if declared != kind {
                return Err(Error::Config(format!(
                    "config declares the {declared:?} pipeline but {kind:?} was requested"
                )));
            }
        }
        let mut base = serde_json::to_value(Self::preset(kind)).expect("preset serializes");
        merge(&mut base, overrides);
        let cfg: Self = serde_json::from_value(base).map_err(|e| Error::Config(format!("invalid config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(kind: PipelineKind, path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let value: Value = serde_json::from_str(&text).map_err(|e| Error::json(path, e))?;
        Self::from_overrides(kind, &value)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.loss.validate().map_err(to_config)?;
        self.optimizer.validate()?;
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be positive".into()));
        }
        match self.pipeline {
            PipelineKind::Video => {
                if self.model.tubelet < 2 {
                    return Err(Error::Config("the video pipeline needs a tubelet of at least 2".into()));
                }
                if self.loss.eta > 0.0 && self.batch_size < 2 {
                    return Err(Error::Config("the matching loss needs a batch of at least 2".into()));
                }
            }
            PipelineKind::Image => {
                if self.stage2_epochs == 0 {
                    return Err(Error::Config("stage2_epochs must be at least 1".into()));
                }
                if self.loss.gamma != 0.0 || self.loss.eta != 0.0 {
                    return Err(Error::Config(
                        "the image pipeline has no contrastive or matching term in stage 2; set gamma and eta to 0"
                            .into(),
                    ));
                }
                if self.model.tubelet != 1 {
                    return Err(Error::Config("the image pipeline needs tubelet 1".into()));
                }
            }
        }
        if let DatasetSpec::Synthetic(s) = &self.dataset {
            let want_frames = self.pipeline == PipelineKind::Image;
            if s.count == 0 || (s.frames == 1) != want_frames {
                return Err(Error::Config(format!(
                    "synthetic dataset {s:?} does not suit the {:?} pipeline",
                    self.pipeline
                )));
            }
        }
        Ok(())
    }
}

fn to_config(e: Error) -> Error {
    match e {
        Error::Validation(m) => Error::Config(m),
        other => other,
    }
}

/// Recursively overlays `patch` onto `base`; objects merge, everything else
/// replaces.
pub fn merge(base: &mut Value, patch: &Value) {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) => {
            for (k, v) in p {
                // a dataset source replaces rather than merges
                if k == "dataset" {
                    b.insert(k.clone(), v.clone());
                    continue;
                }
                merge(b.entry(k.clone()).or_insert(Value::Null), v);
            }
        }
        (b, p) => *b = p.clone(),
    }
}
