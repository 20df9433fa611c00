//! Pretraining loops: single-stage video pretraining and two-stage image
//! pretraining, with per-step logging, checkpoints and resume.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use candle_core::{DType, Var};
use log::info;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{
    self, load_params, load_params_matching, load_tensors, read_json, save_params, save_selected, save_tensors, write_json,
};
use crate::error::{Error, Result};
use crate::masking::{make_plan, masked_count, MaskPlan};
use crate::net::{LossConfig, ModelConfig, ModelState, ENCODER_PREFIXES, RECONSTRUCTION_PREFIXES};
use crate::nn::DropPath;
use crate::objectives::{make_matching_batch, LossReport, LossWeights, MatchingMode};
use crate::optim::{AdamW, CosineSchedule, ParamEntry};
use crate::pipeline::config::{PipelineKind, PretrainConfig};
use crate::pipeline::data::{epoch_order, load_samples, steps_per_epoch, TokenizedSet};
use crate::seed;
use crate::tokenizer::Modality;

pub const METRICS_FILE: &str = "metrics.csv";
pub const RESOLVED_CONFIG_FILE: &str = "config_resolved.json";
pub const METRICS_HEADER: &str = "step,stage,total,rgb,depth,contrastive,matching,lr";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Video,
    Stage1,
    Stage2,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::Video => "video",
            Stage::Stage1 => "stage1",
            Stage::Stage2 => "stage2",
        }
    }

    fn tag(self) -> u64 {
        self as u64 + 1
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub step: usize,
    pub stage: Stage,
    pub report: LossReport,
    pub lr: f64,
}

impl MetricsRow {
    pub fn csv(&self) -> String {
        let opt = |v: Option<f64>| v.map(|x| format!("{x}")).unwrap_or_default();
        let r = &self.report;
        format!(
            "{},{},{},{},{},{},{},{}",
            self.step,
            self.stage.name(),
            r.total,
            opt(r.rgb),
            opt(r.depth),
            opt(r.contrastive),
            opt(r.matching),
            self.lr
        )
    }
}

/// Completed-step counter stored next to each checkpoint.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrainerState {
    /// Steps completed so far, across stages.
    pub step: usize,
    pub stage: Stage,
    pub optimizer_step: u64,
}

/// Encoder checksums on either side of the stage-1 → stage-2 handoff.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Handoff {
    pub stage1_final: String,
    pub stage2_initial: String,
    pub stage1_params: Vec<String>,
    pub stage2_params: Vec<String>,
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub final_checkpoint: PathBuf,
    pub rows: Vec<MetricsRow>,
    pub handoff: Option<Handoff>,
    /// Names that received gradients in each stage, in optimizer order.
    pub stage_params: Vec<(Stage, Vec<String>)>,
}

struct MetricsLog {
    out: BufWriter<File>,
    path: PathBuf,
}

impl MetricsLog {
    fn create(path: PathBuf) -> Result<Self> {
        let f = File::create(&path).map_err(|e| Error::io(&path, e))?;
        let mut out = BufWriter::new(f);
        writeln!(out, "{METRICS_HEADER}").map_err(|e| Error::io(&path, e))?;
        Ok(Self { out, path })
    }

    /// Reopens `path` for a run resuming at `step`, keeping earlier rows.
    fn resume(path: PathBuf, step: usize) -> Result<Self> {
        let kept: Vec<String> = match std::fs::read_to_string(&path) {
            Ok(text) => text
                .lines()
                .skip(1)
                .filter(|l| l.split(',').next().and_then(|s| s.parse::<usize>().ok()).is_some_and(|s| s < step))
                .map(str::to_string)
                .collect(),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Vec::new(),
            Err(e) => return Err(Error::io(&path, e)),
        };
        let mut log = Self::create(path)?;
        for line in kept {
            writeln!(log.out, "{line}").map_err(|e| Error::io(&log.path, e))?;
        }
        Ok(log)
    }

    fn open(path: PathBuf, resume: Option<TrainerState>) -> Result<Self> {
        match resume {
            Some(ts) => Self::resume(path, ts.step),
            None => Self::create(path),
        }
    }

    fn push(&mut self, row: &MetricsRow) -> Result<()> {
        writeln!(self.out, "{}", row.csv()).map_err(|e| Error::io(&self.path, e))
    }

    fn flush(&mut self) -> Result<()> {
        self.out.flush().map_err(|e| Error::io(&self.path, e))
    }
}

/// Saves parameters, optimizer moments and the step counter under `dir`.
pub fn save_checkpoint(
    dir: &Path,
    state: &ModelState,
    opt: Option<&AdamW>,
    trainer: &TrainerState,
    cfg: Option<&PretrainConfig>,
) -> Result<()> {
    save_params(&dir.join("model"), &state.params)?;
    if let Some(opt) = opt {
        save_tensors(&dir.join("optimizer"), &opt.state_tensors())?;
    }
    write_json(&dir.join("trainer_state.json"), trainer)?;
    write_json(&dir.join("model.json"), &state.config)?;
    if let Some(cfg) = cfg {
        write_json(&dir.join("config.json"), cfg)?;
    }
    Ok(())
}

/// The stage-1 handoff: only the parameters stage 1 trained, without
/// optimizer state, so the decoder never appears in its manifest.
fn save_stage1(dir: &Path, state: &ModelState, trained: &[(String, Var)], ts: &TrainerState, cfg: &PretrainConfig) -> Result<()> {
    save_selected(&dir.join("model"), trained)?;
    write_json(&dir.join("trainer_state.json"), ts)?;
    write_json(&dir.join("model.json"), &state.config)?;
    write_json(&dir.join("config.json"), cfg)
}

/// Rebuilds a model from a checkpoint directory.
pub fn load_model(dir: &Path, dtype: DType) -> Result<ModelState> {
    let cfg: ModelConfig = read_json(&dir.join("model.json"))?;
    let state = ModelState::with_dtype(cfg, 0, dtype)?;
    load_params(&dir.join("model"), &state.params, false)?;
    Ok(state)
}

struct Run<'a> {
    cfg: &'a PretrainConfig,
    out: &'a Path,
    log: MetricsLog,
    rows: Vec<MetricsRow>,
    last_checkpoint: Option<PathBuf>,
}

struct StagePlan {
    stage: Stage,
    weights: LossWeights,
    params: Vec<(String, Var)>,
    epochs: usize,
    /// Global index of the stage's first step.
    offset: usize,
    masked: bool,
}

impl StagePlan {
    fn steps(&self, spe: usize) -> usize {
        self.epochs * spe
    }
}

impl Run<'_> {
    fn run_stage(
        &mut self,
        state: &ModelState,
        data: &TokenizedSet,
        plan: &StagePlan,
        resume: Option<(&Path, TrainerState)>,
    ) -> Result<AdamW> {
        let cfg = self.cfg;
        let spe = steps_per_epoch(data.len(), cfg.batch_size)?;
        let total = plan.steps(spe);
        let entries = plan.params.iter().map(|(n, v)| ParamEntry::new(n.clone(), v.clone())).collect();
        let mut opt = AdamW::new(cfg.optimizer, entries)?;
        let mut local_start = 0;
        if let Some((dir, ts)) = resume {
            opt.load_state(ts.optimizer_step, &load_tensors(&dir.join("optimizer"))?)?;
            local_start = ts.step - plan.offset;
        }
        let schedule = CosineSchedule {
            base_lr: cfg.optimizer.lr,
            min_lr: cfg.schedule.min_lr,
            warmup_lr: cfg.schedule.warmup_lr,
            warmup_steps: (cfg.schedule.warmup_epochs * spe).min(total),
            total_steps: total,
        };
        let loss_cfg = LossConfig {
            weights: plan.weights,
            depth_mode: cfg.depth_loss,
        };
        let order_seed = seed::derive(cfg.seed, &[plan.stage.tag()]);
        let b = cfg.batch_size;
        let mut order = Vec::new();
        let mut order_epoch = usize::MAX;
        for local in local_start..total {
            let step = plan.offset + local;
            if cfg.max_steps.is_some_and(|m| step >= m) {
                break;
            }
            let epoch = local / spe;
            if epoch != order_epoch {
                order = epoch_order(data.len(), order_seed, epoch);
                order_epoch = epoch;
            }
            let pos = local % spe;
            let idx = &order[pos * b..(pos + 1) * b];
            let batch = data.batch(idx, state.dtype())?;
            let plans: Vec<MaskPlan> = if plan.masked {
                (0..b)
                    .map(|j| make_plan(&data.geometry, &cfg.mask, seed::derive(cfg.seed, &[seed::stream::MASK, step as u64, j as u64])))
                    .collect::<Result<_>>()?
            } else {
                vec![MaskPlan::unmasked(data.geometry); b]
            };
            let matching = if plan.weights.eta > 0.0 {
                Some(make_matching_batch(b, seed::derive(cfg.seed, &[step as u64]), MatchingMode::Random)?)
            } else {
                None
            };
            let drop = (cfg.model.encoder.drop_path > 0.0).then(|| DropPath {
                rate: cfg.model.encoder.drop_path,
                seed: seed::derive(cfg.seed, &[seed::stream::DROP_PATH, step as u64]),
            });
            let lr = schedule.lr(local);
            let (report, grads) = state
                .forward_backward(&batch, &plans, matching.as_ref(), &loss_cfg, &plan.params, drop)
                .map_err(|e| self.with_last_good(e))?;
            opt.step(&grads, lr).map_err(|e| self.with_last_good(e))?;
            let row = MetricsRow {
                step,
                stage: plan.stage,
                report,
                lr,
            };
            self.log.push(&row)?;
            if step % 20 == 0 {
                info!("{} step {step}: total {:.5} lr {lr:.3e}", plan.stage.name(), row.report.total);
            }
            self.rows.push(row);
            let done = step + 1;
            if cfg.checkpoint_every > 0 && done % cfg.checkpoint_every == 0 {
                let dir = checkpoint::step_dir(&self.out.join("checkpoints"), done);
                self.save(&dir, state, &opt, done, plan.stage)?;
            }
        }
        self.log.flush()?;
        Ok(opt)
    }

    fn save(&mut self, dir: &Path, state: &ModelState, opt: &AdamW, step: usize, stage: Stage) -> Result<()> {
        let ts = TrainerState {
            step,
            stage,
            optimizer_step: opt.step_count(),
        };
        save_checkpoint(dir, state, Some(opt), &ts, Some(self.cfg))?;
        self.last_checkpoint = Some(dir.to_path_buf());
        Ok(())
    }

    fn with_last_good(&self, e: Error) -> Error {
        match e {
            Error::Numerical(m) => Error::Numerical(match &self.last_checkpoint {
                Some(p) => format!("{m}; last good checkpoint: {}", p.display()),
                None => format!("{m}; no checkpoint was written yet"),
            }),
            other => other,
        }
    }
}

fn prepare(cfg: &PretrainConfig, kind: PipelineKind, out: &Path) -> Result<(ModelState, TokenizedSet)> {
    if cfg.pipeline != kind {
        return Err(Error::Config(format!("expected a {kind:?} config, got {:?}", cfg.pipeline)));
    }
    cfg.validate()?;
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    write_json(&out.join(RESOLVED_CONFIG_FILE), cfg)?;
    let samples = load_samples(&cfg.dataset)?;
    let data = TokenizedSet::new(&samples, &cfg.model)?;
    cfg.mask.validate(&data.geometry)?;
    for m in [Modality::Rgb, Modality::Depth] {
        let mm = cfg.mask.for_modality(m);
        if masked_count(&data.geometry, mm.strategy, mm.ratio) >= data.geometry.num_tokens() {
            return Err(Error::Config(format!(
                "{} mask ratio {} leaves no visible token on a {}-token grid",
                m.name(),
                mm.ratio,
                data.geometry.num_tokens()
            )));
        }
    }
    Ok((initial_model(cfg)?, data))
}

/// The model a fresh run of `cfg` starts from: seeded init, overlaid with
/// `init_checkpoint` when one is set.
pub fn initial_model(cfg: &PretrainConfig) -> Result<ModelState> {
    let state = ModelState::new(cfg.model, seed::derive(cfg.seed, &[seed::stream::INIT]))?;
    if let Some(init) = &cfg.init_checkpoint {
        load_params_matching(&init.join("model"), &state.params, &ENCODER_PREFIXES, true)?;
    }
    Ok(state)
}

fn resume_state(resume: Option<&Path>, state: &ModelState) -> Result<Option<TrainerState>> {
    match resume {
        None => Ok(None),
        Some(dir) => {
            let ts: TrainerState = read_json(&dir.join("trainer_state.json"))?;
            // stage 1 leaves the decoder at its seeded init, so a stage-1
            // checkpoint without one restores the full state exactly
            let required: &[&str] = if ts.stage == Stage::Stage1 { &ENCODER_PREFIXES } else { &[""] };
            load_params_matching(&dir.join("model"), &state.params, required, false)?;
            Ok(Some(ts))
        }
    }
}

/// Single-stage pretraining with all four loss terms.
pub fn pretrain_video(cfg: &PretrainConfig, out: &Path, resume: Option<&Path>) -> Result<RunOutput> {
    let (state, data) = prepare(cfg, PipelineKind::Video, out)?;
    let ts = resume_state(resume, &state)?;
    let mut run = Run {
        cfg,
        out,
        log: MetricsLog::open(out.join(METRICS_FILE), ts)?,
        rows: Vec::new(),
        last_checkpoint: resume.map(Path::to_path_buf),
    };
    let plan = StagePlan {
        stage: Stage::Video,
        weights: cfg.loss,
        params: state.params.all(),
        epochs: cfg.epochs,
        offset: 0,
        masked: true,
    };
    let opt = run.run_stage(&state, &data, &plan, resume.zip(ts))?;
    let done = run.rows.last().map_or(ts.map_or(0, |t| t.step), |r| r.step + 1);
    let final_dir = out.join("final");
    run.save(&final_dir, &state, &opt, done, Stage::Video)?;
    Ok(RunOutput {
        final_checkpoint: final_dir,
        rows: run.rows,
        handoff: None,
        stage_params: vec![(Stage::Video, plan.params.iter().map(|(n, _)| n.clone()).collect())],
    })
}

/// Stage 1 trains the encoders and patch projections on the contrastive
/// loss over full grids; stage 2 starts from those weights and trains
/// encoders plus decoder on masked reconstruction.
pub fn pretrain_image(cfg: &PretrainConfig, out: &Path, resume: Option<&Path>) -> Result<RunOutput> {
    let (state, data) = prepare(cfg, PipelineKind::Image, out)?;
    let ts = resume_state(resume, &state)?;
    let spe = steps_per_epoch(data.len(), cfg.batch_size)?;
    let mut run = Run {
        cfg,
        out,
        log: MetricsLog::open(out.join(METRICS_FILE), ts)?,
        rows: Vec::new(),
        last_checkpoint: resume.map(Path::to_path_buf),
    };
    let stage1 = StagePlan {
        stage: Stage::Stage1,
        weights: LossWeights {
            tau: cfg.loss.tau,
            symmetric: cfg.loss.symmetric,
            ..LossWeights::stage1()
        },
        params: state.params.select(&ENCODER_PREFIXES),
        epochs: cfg.stage1_epochs,
        offset: 0,
        masked: false,
    };
    let stage2 = StagePlan {
        stage: Stage::Stage2,
        weights: LossWeights {
            gamma: 0.0,
            eta: 0.0,
            ..cfg.loss
        },
        params: state.params.select(&RECONSTRUCTION_PREFIXES),
        epochs: cfg.stage2_epochs,
        offset: stage1.steps(spe),
        masked: true,
    };
    let in_stage2 = ts.is_some_and(|t| t.stage == Stage::Stage2 || t.step >= stage2.offset);
    let capped = |s: usize| cfg.max_steps.is_some_and(|m| s >= m);

    let mut stage1_final = None;
    if !in_stage2 && stage1.epochs > 0 {
        let opt = run.run_stage(&state, &data, &stage1, resume.zip(ts))?;
        let trained = state.params.select(&ENCODER_PREFIXES);
        stage1_final = Some(checkpoint::checksum(&trained)?);
        let done = run.rows.last().map_or(ts.map_or(0, |t| t.step), |r| r.step + 1);
        let ts1 = TrainerState {
            step: done,
            stage: Stage::Stage1,
            optimizer_step: opt.step_count(),
        };
        save_stage1(&out.join("stage1"), &state, &trained, &ts1, cfg)?;
    }
    let mut handoff = None;
    let mut last_opt = None;
    if !capped(stage2.offset) {
        let stage2_initial = checkpoint::checksum(&state.params.select(&ENCODER_PREFIXES))?;
        if !in_stage2 {
            handoff = Some(Handoff {
                stage1_final: stage1_final.unwrap_or_else(|| stage2_initial.clone()),
                stage2_initial,
                stage1_params: stage1.params.iter().map(|(n, _)| n.clone()).collect(),
                stage2_params: stage2.params.iter().map(|(n, _)| n.clone()).collect(),
            });
            write_json(&out.join("handoff.json"), handoff.as_ref().unwrap())?;
        }
        // a stage-1 checkpoint at the boundary starts stage 2 afresh
        let resume2 = if in_stage2 { resume.zip(ts.filter(|t| t.stage == Stage::Stage2)) } else { None };
        last_opt = Some(run.run_stage(&state, &data, &stage2, resume2)?);
    }
    let done = run.rows.last().map_or(ts.map_or(0, |t| t.step), |r| r.step + 1);
    let final_dir = out.join("final");
    let final_stage = if last_opt.is_some() { Stage::Stage2 } else { Stage::Stage1 };
    match &last_opt {
        Some(opt) => run.save(&final_dir, &state, opt, done, final_stage)?,
        None => {
            let ts = TrainerState {
                step: done,
                stage: final_stage,
                optimizer_step: 0,
            };
            save_checkpoint(&final_dir, &state, None, &ts, Some(cfg))?;
        }
    }
    Ok(RunOutput {
        final_checkpoint: final_dir,
        rows: run.rows,
        handoff,
        stage_params: vec![
            (Stage::Stage1, stage1.params.iter().map(|(n, _)| n.clone()).collect()),
            (Stage::Stage2, stage2.params.iter().map(|(n, _)| n.clone()).collect()),
        ],
    })
}

/// Runs the pipeline named in `cfg`.
pub fn pretrain(cfg: &PretrainConfig, out: &Path, resume: Option<&Path>) -> Result<RunOutput> {
    match cfg.pipeline {
        PipelineKind::Video => pretrain_video(cfg, out, resume),
        PipelineKind::Image => pretrain_image(cfg, out, resume),
    }
}
