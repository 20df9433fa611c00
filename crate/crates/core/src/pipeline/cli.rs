//! Command-line entry points.

use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use crate::checkpoint::{read_json, write_json};
use crate::datagen::{synth_clip, synth_scene, write_dataset, Sample};
use crate::error::{Error, Result};
use crate::masking::make_plan;
use crate::net::ModelConfig;
use crate::pipeline::config::{DatasetSpec, PipelineKind, PretrainConfig};
use crate::pipeline::data::{load_samples, TokenizedSet};
use crate::pipeline::finetune::{finetune, Probe, ProbeConfig, ProbeInit};
use crate::pipeline::train::{pretrain_image, pretrain_video, METRICS_FILE, RESOLVED_CONFIG_FILE};
use crate::seed;
use crate::tokenizer::Modality;

#[derive(Debug, Parser)]
#[command(name = "rgbd-mae", version, about = "Masked RGB-D autoencoder pretraining")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum Kind {
    Image,
    Video,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Single-stage video pretraining.
    PretrainVideo(TrainArgs),
    /// Two-stage image pretraining.
    PretrainImage(TrainArgs),
    /// Fine-tune an RGB probe from a checkpoint or from scratch.
    Finetune {
        #[arg(long)]
        config: PathBuf,
        /// Pretraining checkpoint directory; omit to train from scratch.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Evaluate a fine-tuned probe on the eval split of a fine-tune config.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write a synthetic dataset with its manifest.
    SynthData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        n: usize,
        #[arg(long, value_enum)]
        kind: Kind,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 8)]
        frames: usize,
        #[arg(long, default_value_t = 64)]
        height: usize,
        #[arg(long, default_value_t = 64)]
        width: usize,
    },
    /// Render mask overlays for the first samples of a pretraining config.
    VisualizeMasks {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_enum)]
        kind: Kind,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 4)]
        n: usize,
        #[arg(long)]
        seed: Option<u64>,
    },
}

#[derive(Debug, clap::Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Continue from a checkpoint directory written by an earlier run.
    #[arg(long)]
    pub resume: Option<PathBuf>,
}

/// Fine-tuning run description.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FinetuneConfig {
    pub probe: ProbeConfig,
    pub train: DatasetSpec,
    pub eval: DatasetSpec,
    /// Encoder for scratch runs; taken from the checkpoint otherwise.
    #[serde(default)]
    pub model: Option<ModelConfig>,
    #[serde(default)]
    pub checkpoint: Option<PathBuf>,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
}

impl FinetuneConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let cfg: Self = read_json(path)?;
        cfg.probe.validate()?;
        Ok(cfg)
    }
}

fn resolve_out(cli: Option<PathBuf>, cfg: Option<PathBuf>) -> Result<PathBuf> {
    cli.or(cfg)
        .ok_or_else(|| Error::Config("no output directory: pass --out or set output_dir".into()))
}

fn mkdir(p: &Path) -> Result<()> {
    std::fs::create_dir_all(p).map_err(|e| Error::io(p, e))
}

fn write_text(p: &Path, text: &str) -> Result<()> {
    std::fs::write(p, text).map_err(|e| Error::io(p, e))
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::PretrainVideo(a) => train(PipelineKind::Video, a),
        Command::PretrainImage(a) => train(PipelineKind::Image, a),
        Command::Finetune {
            config,
            checkpoint,
            seed,
            out,
        } => run_finetune(&config, checkpoint, seed, out),
        Command::Eval { checkpoint, config, out } => run_eval(&checkpoint, &config, &out),
        Command::SynthData {
            out,
            n,
            kind,
            seed,
            frames,
            height,
            width,
        } => synth_data(&out, n, kind, seed, frames, height, width),
        Command::VisualizeMasks {
            config,
            kind,
            out,
            n,
            seed,
        } => visualize_masks(&config, kind, &out, n, seed),
    }
}

fn train(kind: PipelineKind, a: TrainArgs) -> Result<()> {
    let mut cfg = PretrainConfig::load(kind, &a.config)?;
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    let out = resolve_out(a.out, cfg.output_dir.clone())?;
    cfg.output_dir = Some(out.clone());
    let result = match kind {
        PipelineKind::Video => pretrain_video(&cfg, &out, a.resume.as_deref())?,
        PipelineKind::Image => pretrain_image(&cfg, &out, a.resume.as_deref())?,
    };
    if let Some(last) = result.rows.last() {
        println!("step {} total {}", last.step, last.report.total);
    }
    println!("checkpoint: {}", result.final_checkpoint.display());
    Ok(())
}

fn tokenized(spec: &DatasetSpec, model: &ModelConfig) -> Result<TokenizedSet> {
    TokenizedSet::new(&load_samples(spec)?, model)
}

fn model_for(cfg: &FinetuneConfig, checkpoint: Option<&Path>) -> Result<ModelConfig> {
    if let Some(dir) = checkpoint {
        let m: ModelConfig = read_json(&dir.join("model.json"))?;
        if cfg.model.is_some_and(|own| own != m) {
            return Err(Error::Incompatible(format!(
                "{} holds a different encoder than the fine-tune config describes",
                dir.display()
            )));
        }
        return Ok(m);
    }
    Ok(match (cfg.model, &cfg.train) {
        (Some(m), _) => m,
        (None, DatasetSpec::Synthetic(s)) if s.frames == 1 => ModelConfig::desk_image(),
        (None, DatasetSpec::Synthetic(_)) => ModelConfig::desk_video(),
        (None, DatasetSpec::Manifest(_)) => {
            return Err(Error::Config("scratch fine-tuning on a manifest needs a model section".into()))
        }
    })
}

fn run_finetune(config: &Path, checkpoint: Option<PathBuf>, seed_override: Option<u64>, out: Option<PathBuf>) -> Result<()> {
    let mut cfg = FinetuneConfig::load(config)?;
    if let Some(s) = seed_override {
        cfg.probe.seed = s;
    }
    let checkpoint = checkpoint.or(cfg.checkpoint.clone());
    cfg.checkpoint = checkpoint.clone();
    let out = resolve_out(out, cfg.output_dir.clone())?;
    cfg.output_dir = Some(out.clone());
    let model = model_for(&cfg, checkpoint.as_deref())?;
    mkdir(&out)?;
    write_json(&out.join(RESOLVED_CONFIG_FILE), &cfg)?;
    let train = tokenized(&cfg.train, &model)?;
    let eval = tokenized(&cfg.eval, &model)?;
    let init = match &checkpoint {
        Some(dir) => ProbeInit::Checkpoint(dir),
        None => ProbeInit::Scratch {
            model,
            seed: seed::derive(cfg.probe.seed, &[seed::stream::INIT]),
        },
    };
    let (probe, report) = finetune(init, &cfg.probe, &train, &eval)?;
    let mut csv = String::from("step,loss\n");
    for (i, l) in report.train_losses.iter().enumerate() {
        csv.push_str(&format!("{i},{l}\n"));
    }
    write_text(&out.join(METRICS_FILE), &csv)?;
    write_json(&out.join("results.json"), &report)?;
    probe.save(&out.join("finetuned"), &cfg.probe)?;
    println!("{} = {}", report.metric, report.value);
    Ok(())
}

fn run_eval(checkpoint: &Path, config: &Path, out: &Path) -> Result<()> {
    let cfg = FinetuneConfig::load(config)?;
    let (probe, probe_cfg) = Probe::load(checkpoint)?;
    mkdir(out)?;
    write_json(&out.join(RESOLVED_CONFIG_FILE), &cfg)?;
    let eval = tokenized(&cfg.eval, &probe.backbone.config)?;
    let value = probe.evaluate(&eval, probe_cfg.batch_size)?;
    let metric = probe_cfg.task.metric_name();
    println!("{:<10} {:>10}", "metric", "value");
    println!("{metric:<10} {value:>10.4}");
    write_text(&out.join(METRICS_FILE), &format!("metric,value\n{metric},{value}\n"))?;
    write_json(
        &out.join("results.json"),
        &serde_json::json!({ "metric": metric, "value": value, "samples": eval.len() }),
    )
}

fn synth_data(out: &Path, n: usize, kind: Kind, seed_value: u64, frames: usize, h: usize, w: usize) -> Result<()> {
    if n == 0 {
        return Err(Error::Config("--n must be positive".into()));
    }
    let samples = (0..n)
        .map(|i| {
            let s = seed::derive(seed_value, &[seed::stream::DATA, i as u64]);
            Ok(match kind {
                Kind::Image => Sample::Image(synth_scene(s, h, w)?),
                Kind::Video => Sample::Video(synth_clip(s, frames, h, w)?),
            })
        })
        .collect::<Result<Vec<_>>>()
        .map_err(|e| match e {
            Error::Dimension(m) => Error::Config(m),
            other => other,
        })?;
    let manifest = write_dataset(out, &samples)?;
    write_json(
        &out.join(RESOLVED_CONFIG_FILE),
        &serde_json::json!({
            "n": n, "kind": format!("{kind:?}").to_lowercase(), "seed": seed_value,
            "frames": frames, "height": h, "width": w,
        }),
    )?;
    write_text(&out.join(METRICS_FILE), &format!("samples\n{}\n", manifest.len()))?;
    println!("wrote {} samples to {}", manifest.len(), out.display());
    Ok(())
}

/// Darkens masked patches: RGB is scaled by 0.25, depth is drawn as
/// grayscale with masked patches set to black.
fn visualize_masks(config: &Path, kind: Kind, out: &Path, n: usize, seed_override: Option<u64>) -> Result<()> {
    let pk = match kind {
        Kind::Image => PipelineKind::Image,
        Kind::Video => PipelineKind::Video,
    };
    let mut cfg = PretrainConfig::load(pk, config)?;
    if let Some(s) = seed_override {
        cfg.seed = s;
    }
    mkdir(out)?;
    write_json(&out.join(RESOLVED_CONFIG_FILE), &cfg)?;
    let samples = load_samples(&cfg.dataset)?;
    let mut csv = String::from("sample,visible_rgb,visible_depth\n");
    for (i, sample) in samples.iter().take(n).enumerate() {
        let (frames, h, w) = match sample {
            Sample::Image(s) => (1, s.height(), s.width()),
            Sample::Video(v) => (v.frames(), v.height(), v.width()),
        };
        let g = cfg.model.geometry(frames, h, w)?;
        let plan = make_plan(&g, &cfg.mask, seed::derive(cfg.seed, &[seed::stream::MASK, 0, i as u64]))?;
        let mut rgb_img = image::RgbImage::new((w * frames) as u32, h as u32);
        let mut depth_img = image::GrayImage::new((w * frames) as u32, h as u32);
        for f in 0..frames {
            let frame = match sample {
                Sample::Image(s) => s.clone(),
                Sample::Video(v) => v.frame(f),
            };
            let dmax = frame.depth.iter().cloned().fold(f32::MIN, f32::max).max(1e-6);
            for y in 0..h {
                for x in 0..w {
                    let slot = g.index(f / g.tubelet, y / g.patch, x / g.patch);
                    let vr = plan.visibility(Modality::Rgb)[slot];
                    let vd = plan.visibility(Modality::Depth)[slot];
                    let px = (f * w + x) as u32;
                    let scale = if vr { 1.0 } else { 0.25 };
                    let c = |k: usize| (frame.rgb[[k, y, x]] * scale * 255.0).round().clamp(0.0, 255.0) as u8;
                    rgb_img.put_pixel(px, y as u32, image::Rgb([c(0), c(1), c(2)]));
                    let d = if vd { (frame.depth[[0, y, x]] / dmax * 255.0).round() as u8 } else { 0 };
                    depth_img.put_pixel(px, y as u32, image::Luma([d]));
                }
            }
        }
        for (name, save) in [
            (format!("mask_{i:03}_rgb.png"), &rgb_img as &dyn SaveImage),
            (format!("mask_{i:03}_depth.png"), &depth_img as &dyn SaveImage),
        ] {
            save.save_to(&out.join(name))?;
        }
        csv.push_str(&format!(
            "{i},{},{}\n",
            plan.visible_indices(Modality::Rgb).len(),
            plan.visible_indices(Modality::Depth).len()
        ));
    }
    write_text(&out.join(METRICS_FILE), &csv)?;
    println!("wrote mask overlays to {}", out.display());
    Ok(())
}

trait SaveImage {
    fn save_to(&self, path: &Path) -> Result<()>;
}

impl SaveImage for image::RgbImage {
    fn save_to(&self, path: &Path) -> Result<()> {
        self.save(path).map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })
    }
}

impl SaveImage for image::GrayImage {
    fn save_to(&self, path: &Path) -> Result<()> {
        self.save(path).map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })
    }
}

/// Runs the CLI and maps the outcome to a process exit code: 0 on success,
/// 2 for configuration or usage errors, 1 otherwise.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_config_error() {
                2
            } else {
                1
            }
        }
    }
}
