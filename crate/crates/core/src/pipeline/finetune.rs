//! RGB-only fine-tuning probes on top of a pretrained (or fresh) encoder:
//! clip classification, per-pixel segmentation and monocular depth.

use std::path::Path;

use candle_core::{Device, Tensor, D};
use log::info;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{load_params, load_params_matching, read_json, save_params, write_json};
use crate::error::{Error, Result};
use crate::metrics::{delta1, miou, top1, ConfusionMatrix, IGNORE_INDEX};
use crate::net::{ModelConfig, ModelState, ENCODER_PREFIXES};
use crate::nn::{log_softmax_last, DropPath, Init, Linear, ParamStore};
use crate::optim::{layer_decay_scale, to_f64, AdamW, AdamWConfig, CosineSchedule, ParamEntry};
use crate::pipeline::data::{epoch_order, steps_per_epoch, TokenizedSet};
use crate::seed;
use crate::tokenizer::{stack_tokens, Modality};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum ProbeTask {
    /// Linear layer over mean-pooled tokens.
    Classification { classes: usize },
    /// Per-token linear map to `P²·classes` logits.
    Segmentation { classes: usize },
    /// Per-token linear map to `P²` log-depth values.
    Depth,
}

impl ProbeTask {
    pub fn metric_name(&self) -> &'static str {
        match self {
            ProbeTask::Classification { .. } => "top1",
            ProbeTask::Segmentation { .. } => "miou",
            ProbeTask::Depth => "delta1",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProbeConfig {
    pub task: ProbeTask,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    #[serde(default = "default_wd")]
    pub weight_decay: f64,
    /// Per-layer learning-rate factor; 1 disables decay.
    pub layer_decay: f64,
    #[serde(default)]
    pub warmup_epochs: usize,
    #[serde(default)]
    pub drop_path: f64,
    /// Train only the head (linear probe).
    #[serde(default)]
    pub freeze_encoder: bool,
    /// Fraction of training samples whose labels are used.
    #[serde(default = "default_fraction")]
    pub label_fraction: f64,
    pub seed: u64,
}

fn default_wd() -> f64 {
    0.05
}

fn default_fraction() -> f64 {
    1.0
}

impl ProbeConfig {
    pub fn classification(classes: usize) -> Self {
        Self {
            task: ProbeTask::Classification { classes },
            epochs: 30,
            batch_size: 8,
            lr: 1e-3,
            weight_decay: 0.05,
            layer_decay: 0.7,
            warmup_epochs: 3,
            drop_path: 0.1,
            freeze_encoder: false,
            label_fraction: 1.0,
            seed: 0,
        }
    }

    pub fn segmentation(classes: usize) -> Self {
        Self {
            task: ProbeTask::Segmentation { classes },
            layer_decay: 0.75,
            ..Self::classification(classes)
        }
    }

    pub fn depth() -> Self {
        Self {
            task: ProbeTask::Depth,
            layer_decay: 0.75,
            ..Self::classification(1)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(Error::Config("probe needs positive epochs and batch size".into()));
        }
        if !(self.label_fraction > 0.0 && self.label_fraction <= 1.0) {
            return Err(Error::Config(format!("label fraction {} outside (0, 1]", self.label_fraction)));
        }
        if !(self.layer_decay > 0.0 && self.layer_decay <= 1.0) {
            return Err(Error::Config(format!("layer decay {} outside (0, 1]", self.layer_decay)));
        }
        if !(0.0..1.0).contains(&self.drop_path) {
            return Err(Error::Config(format!("drop path {} outside [0, 1)", self.drop_path)));
        }
        match self.task {
            ProbeTask::Classification { classes } | ProbeTask::Segmentation { classes } if classes < 2 => {
                Err(Error::Config("a probe needs at least two classes".into()))
            }
            _ => Ok(()),
        }
    }
}

/// Where the probe's encoder comes from.
#[derive(Debug, Clone)]
pub enum ProbeInit<'a> {
    Scratch { model: ModelConfig, seed: u64 },
    Checkpoint(&'a Path),
}

/// Backbone plus task head. Only the RGB path of the backbone is used.
#[derive(Debug)]
pub struct Probe {
    pub backbone: ModelState,
    pub head: Linear,
    pub head_params: ParamStore,
    pub task: ProbeTask,
}

fn layer_id(name: &str, depth: usize) -> Option<usize> {
    let rest = name
        .strip_prefix("encoder.rgb.")
        .or_else(|| name.strip_prefix("encoder."))?;
    if let Some(b) = rest.strip_prefix("blocks.") {
        let i: usize = b.split('.').next()?.parse().ok()?;
        return Some(i + 1);
    }
    if rest.starts_with("norm.") {
        return Some(depth + 1);
    }
    if rest == "modality_embed.rgb" {
        return Some(0);
    }
    None
}

impl Probe {
    pub fn new(init: ProbeInit<'_>, task: ProbeTask, seed_value: u64) -> Result<Self> {
        let backbone = match init {
            ProbeInit::Scratch { model, seed } => ModelState::new(model, seed)?,
            ProbeInit::Checkpoint(dir) => {
                let cfg: ModelConfig = read_json(&dir.join("model.json"))?;
                let state = ModelState::new(cfg, 0)?;
                // stage-1 checkpoints carry no decoder, which probes never use
                load_params_matching(&dir.join("model"), &state.params, &ENCODER_PREFIXES, false)?;
                state
            }
        };
        let cfg = backbone.config;
        let p2 = cfg.tubelet * cfg.patch_size * cfg.patch_size;
        let out = match task {
            ProbeTask::Classification { classes } => classes,
            ProbeTask::Segmentation { classes } => {
                if cfg.tubelet != 1 {
                    return Err(Error::Incompatible("segmentation probes need an image model".into()));
                }
                p2 * classes
            }
            ProbeTask::Depth => p2,
        };
        let mut head_params = ParamStore::new(backbone.dtype());
        let mut rng = seed::rng(seed_value, &[seed::stream::HEAD_INIT]);
        let head = Linear::new(&mut Init::new(&mut head_params, &mut rng).pp("head"), cfg.encoder.width, out)?;
        Ok(Self {
            backbone,
            head,
            head_params,
            task,
        })
    }

    /// Optimizer entries with layer-wise learning-rate scales: patch
    /// embedding at layer 0, block `i` at `i + 1`, final norm and head at
    /// `depth + 1`.
    pub fn param_groups(&self, layer_decay: f64, freeze_encoder: bool) -> Vec<ParamEntry> {
        let depth = self.backbone.encoder_depth();
        let mut out = Vec::new();
        if !freeze_encoder {
            for (name, var) in self.backbone.params.iter() {
                let id = if name.starts_with("patch_embed.rgb.") {
                    Some(0)
                } else {
                    layer_id(name, depth)
                };
                if let Some(id) = id {
                    let mut e = ParamEntry::new(name.clone(), var.clone());
                    e.lr_scale = layer_decay_scale(layer_decay, id, depth);
                    out.push(e);
                }
            }
        }
        for (name, var) in self.head_params.iter() {
            out.push(ParamEntry::new(name.clone(), var.clone()));
        }
        out
    }

    /// Encoder tokens `(B, N, D)` for raw RGB patches.
    pub fn features(&self, rgb: &Tensor, data: &TokenizedSet, drop: Option<DropPath>) -> Result<Tensor> {
        let tokens = self.backbone.embed(rgb, Modality::Rgb, &data.geometry)?;
        self.backbone.encode_tokens(&tokens.tokens, Modality::Rgb, drop)
    }

    fn forward(&self, idx: &[usize], data: &TokenizedSet, drop: Option<DropPath>) -> Result<Tensor> {
        let rows: Vec<_> = idx.iter().map(|&i| &data.rgb[i]).collect();
        let rgb = stack_tokens(&rows, self.backbone.dtype())?;
        let feats = self.features(&rgb, data, drop)?;
        match self.task {
            ProbeTask::Classification { .. } => self.head.forward(&feats.mean(1)?),
            _ => self.head.forward(&feats),
        }
    }

    fn loss(&self, idx: &[usize], data: &TokenizedSet, drop: Option<DropPath>) -> Result<Tensor> {
        let out = self.forward(idx, data, drop)?;
        let dev = Device::Cpu;
        match self.task {
            ProbeTask::Classification { classes } => {
                let labels = labels_of(idx, data)?;
                cross_entropy(&out, &labels, classes)
            }
            ProbeTask::Segmentation { classes } => {
                let labels = seg_labels(idx, data)?;
                let logits = out.reshape((labels.len(), classes))?;
                cross_entropy(&logits, &labels, classes)
            }
            ProbeTask::Depth => {
                let target: Vec<f32> = idx
                    .iter()
                    .flat_map(|&i| data.depth_meters[i].iter().map(|d| d.max(1e-3).ln()).collect::<Vec<_>>())
                    .collect();
                let target = Tensor::from_vec(target, out.shape(), &dev)?.to_dtype(out.dtype())?;
                Ok((out - target)?.abs()?.mean_all()?)
            }
        }
    }

    /// Task metric over `data` (percentage for top-1 and δ₁, ratio for mIoU).
    pub fn evaluate(&self, data: &TokenizedSet, batch_size: usize) -> Result<f64> {
        let n = data.len();
        if n == 0 {
            return Err(Error::Validation("evaluation set is empty".into()));
        }
        let all: Vec<usize> = (0..n).collect();
        let mut preds = Vec::new();
        let mut gts = Vec::new();
        let mut depth_pred = Vec::new();
        let mut depth_gt = Vec::new();
        let classes = match self.task {
            ProbeTask::Classification { classes } | ProbeTask::Segmentation { classes } => classes,
            ProbeTask::Depth => 0,
        };
        let mut confusion = ConfusionMatrix::new(classes.max(2));
        for chunk in all.chunks(batch_size.max(1)) {
            let out = self.forward(chunk, data, None)?;
            match self.task {
                ProbeTask::Classification { .. } => {
                    preds.extend(out.argmax(D::Minus1)?.to_vec1::<u32>()?);
                    gts.extend(labels_of(chunk, data)?);
                }
                ProbeTask::Segmentation { classes } => {
                    let labels = seg_labels(chunk, data)?;
                    let p = out.reshape((labels.len(), classes))?.argmax(D::Minus1)?.to_vec1::<u32>()?;
                    confusion.update(&labels, &p)?;
                }
                ProbeTask::Depth => {
                    depth_pred.extend(to_f64(&out)?.into_iter().map(f64::exp));
                    for &i in chunk {
                        depth_gt.extend(data.depth_meters[i].iter().map(|&d| d as f64));
                    }
                }
            }
        }
        match self.task {
            ProbeTask::Classification { .. } => top1(&preds, &gts),
            ProbeTask::Segmentation { .. } => miou(&confusion),
            ProbeTask::Depth => delta1(&depth_pred, &depth_gt, None),
        }
    }

    pub fn save(&self, dir: &Path, probe: &ProbeConfig) -> Result<()> {
        save_params(&dir.join("model"), &self.backbone.params)?;
        save_params(&dir.join("head"), &self.head_params)?;
        write_json(&dir.join("model.json"), &self.backbone.config)?;
        write_json(&dir.join("probe.json"), probe)
    }

    pub fn load(dir: &Path) -> Result<(Self, ProbeConfig)> {
        let probe: ProbeConfig = read_json(&dir.join("probe.json"))?;
        let p = Self::new(ProbeInit::Checkpoint(dir), probe.task, probe.seed)?;
        load_params(&dir.join("head"), &p.head_params, false)?;
        Ok((p, probe))
    }
}

fn labels_of(idx: &[usize], data: &TokenizedSet) -> Result<Vec<u32>> {
    idx.iter()
        .map(|&i| {
            data.labels[i].ok_or_else(|| Error::Validation(format!("sample {i} has no class label")))
        })
        .collect()
}

fn seg_labels(idx: &[usize], data: &TokenizedSet) -> Result<Vec<u32>> {
    let mut out = Vec::new();
    for &i in idx {
        let seg = data.segmentation[i]
            .as_ref()
            .ok_or_else(|| Error::Validation(format!("sample {i} has no segmentation map")))?;
        out.extend(seg.iter().map(|&v| v as u32));
    }
    Ok(out)
}

/// Mean cross-entropy over rows whose label is not the ignore index.
fn cross_entropy(logits: &Tensor, labels: &[u32], classes: usize) -> Result<Tensor> {
    let m = labels.len();
    let mut onehot = vec![0f32; m * classes];
    let mut scored = 0usize;
    for (r, &l) in labels.iter().enumerate() {
        if l == IGNORE_INDEX {
            continue;
        }
        if l as usize >= classes {
            return Err(Error::Validation(format!("label {l} outside {classes} classes")));
        }
        onehot[r * classes + l as usize] = 1.0;
        scored += 1;
    }
    if scored == 0 {
        return Err(Error::Validation("no labelled targets in batch".into()));
    }
    let onehot = Tensor::from_vec(onehot, (m, classes), &Device::Cpu)?.to_dtype(logits.dtype())?;
    let picked = log_softmax_last(logits)?.mul(&onehot)?.sum_all()?;
    Ok((picked.neg()? / scored as f64)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FinetuneReport {
    pub metric: String,
    pub value: f64,
    pub labeled: usize,
    pub train_losses: Vec<f64>,
}

/// The first `ceil(fraction · n)` items of a seeded permutation.
pub fn labeled_subset(n: usize, fraction: f64, seed_value: u64) -> Vec<usize> {
    let k = ((fraction * n as f64).ceil() as usize).clamp(1, n.max(1));
    let mut idx = epoch_order(n, seed::derive(seed_value, &[seed::stream::SPLIT]), 0);
    idx.truncate(k);
    idx
}

/// Fine-tunes on the labeled part of `train` and reports the task metric on
/// `eval`. The decoder and depth path are never used.
pub fn finetune(
    init: ProbeInit<'_>,
    probe_cfg: &ProbeConfig,
    train: &TokenizedSet,
    eval: &TokenizedSet,
) -> Result<(Probe, FinetuneReport)> {
    probe_cfg.validate()?;
    let probe = Probe::new(init, probe_cfg.task, probe_cfg.seed)?;
    if train.geometry != eval.geometry {
        return Err(Error::Dimension("train and eval sets use different grids".into()));
    }
    let labeled = labeled_subset(train.len(), probe_cfg.label_fraction, probe_cfg.seed);
    let data = train.subset(&labeled);
    let b = probe_cfg.batch_size.min(data.len());
    let spe = steps_per_epoch(data.len(), b)?;
    let total = probe_cfg.epochs * spe;
    let schedule = CosineSchedule {
        base_lr: probe_cfg.lr,
        min_lr: 0.0,
        warmup_lr: 0.0,
        warmup_steps: (probe_cfg.warmup_epochs * spe).min(total),
        total_steps: total,
    };
    let opt_cfg = AdamWConfig {
        weight_decay: probe_cfg.weight_decay,
        ..AdamWConfig::finetune(probe_cfg.lr)
    };
    let groups = probe.param_groups(probe_cfg.layer_decay, probe_cfg.freeze_encoder);
    let vars: Vec<_> = groups.iter().map(|e| (e.name.clone(), e.var.clone())).collect();
    let mut opt = AdamW::new(opt_cfg, groups)?;
    let mut losses = Vec::with_capacity(total);
    for step in 0..total {
        let order = epoch_order(data.len(), seed::derive(probe_cfg.seed, &[seed::stream::SHUFFLE]), step / spe);
        let pos = step % spe;
        let idx = &order[pos * b..(pos + 1) * b];
        let drop = (probe_cfg.drop_path > 0.0 && !probe_cfg.freeze_encoder).then(|| DropPath {
            rate: probe_cfg.drop_path,
            seed: seed::derive(probe_cfg.seed, &[seed::stream::DROP_PATH, step as u64]),
        });
        let loss = probe.loss(idx, &data, drop)?;
        let value = crate::objectives::scalar(&loss)?;
        if !value.is_finite() {
            return Err(Error::Numerical(format!("probe loss is {value} at step {step}")));
        }
        let grads = loss.backward()?;
        let mut g = crate::net::Gradients::default();
        for (name, var) in &vars {
            let t = match grads.get(var.as_tensor()) {
                Some(t) => t.clone(),
                None => var.as_tensor().zeros_like()?,
            };
            g.values.insert(name.clone(), t);
        }
        opt.step(&g, schedule.lr(step))?;
        losses.push(value);
        if step % 50 == 0 {
            info!("finetune step {step}: loss {value:.5}");
        }
    }
    let value = probe.evaluate(eval, probe_cfg.batch_size)?;
    let report = FinetuneReport {
        metric: probe_cfg.task.metric_name().into(),
        value,
        labeled: labeled.len(),
        train_losses: losses,
    };
    Ok((probe, report))
}
