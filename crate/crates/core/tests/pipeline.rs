//! End-to-end checks of the training pipelines: logged quantities, checkpoint
//! round trips, parameter isolation and the quality of stage-1 features.

use std::path::Path;

use candle_core::{DType, Device, Tensor};
use proptest::prelude::*;
use rgbd_mae::checkpoint::{checksum, save_params};
use rgbd_mae::datagen::NUM_SEG_CLASSES;
use rgbd_mae::masking::{make_plan, MaskConfig, MaskPlan};
use rgbd_mae::net::{LossConfig, ModelState, PretrainBatch, ENCODER_PREFIXES};
use rgbd_mae::objectives::{make_matching_batch, DepthLossMode, LossWeights, MatchingMode};
use rgbd_mae::optim::CosineSchedule;
use rgbd_mae::pipeline::{
    finetune, initial_model, load_model, load_samples, pretrain_image, pretrain_video, retrieval_top1, DatasetSpec,
    ProbeConfig, ProbeInit, PretrainConfig, SyntheticSpec, TokenizedSet,
};
use rgbd_mae::tokenizer::GridGeometry;

const SUM_TOL: f64 = 1e-6;

fn tiny(mut cfg: PretrainConfig, frames: usize) -> PretrainConfig {
    cfg.model.patch_size = 8;
    cfg.model.encoder.width = 32;
    cfg.model.encoder.depth = 2;
    cfg.model.decoder.width = 16;
    cfg.model.decoder.depth = 1;
    cfg.dataset = DatasetSpec::Synthetic(SyntheticSpec {
        count: 8,
        frames,
        height: 32,
        width: 32,
        seed: 5,
    });
    cfg.batch_size = 4;
    cfg.schedule.warmup_epochs = 1;
    cfg
}

fn tiny_video() -> PretrainConfig {
    let mut cfg = tiny(PretrainConfig::video_preset(), 4);
    cfg.epochs = 4;
    cfg
}

fn tiny_image() -> PretrainConfig {
    let mut cfg = tiny(PretrainConfig::image_preset(), 1);
    cfg.stage1_epochs = 2;
    cfg.stage2_epochs = 3;
    cfg
}

fn image_set(count: usize, seed: u64, cfg: &PretrainConfig) -> TokenizedSet {
    let spec = DatasetSpec::Synthetic(SyntheticSpec {
        count,
        frames: 1,
        height: 64,
        width: 64,
        seed,
    });
    TokenizedSet::new(&load_samples(&spec).unwrap(), &cfg.model).unwrap()
}

struct CsvRow {
    total: f64,
    terms: [Option<f64>; 4],
    lr: f64,
}

fn read_csv(path: &Path) -> Vec<CsvRow> {
    let text = std::fs::read_to_string(path).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("step,stage,total,rgb,depth,contrastive,matching,lr"));
    lines
        .map(|l| {
            let c: Vec<&str> = l.split(',').collect();
            let opt = |s: &str| (!s.is_empty()).then(|| s.parse::<f64>().unwrap());
            CsvRow {
                total: c[2].parse().unwrap(),
                terms: [opt(c[3]), opt(c[4]), opt(c[5]), opt(c[6])],
                lr: c[7].parse().unwrap(),
            }
        })
        .collect()
}

fn weighted(w: &LossWeights, terms: &[Option<f64>; 4]) -> f64 {
    [w.alpha, w.beta, w.gamma, w.eta]
        .iter()
        .zip(terms)
        .map(|(k, t)| k * t.unwrap_or(0.0))
        .sum()
}

fn small_batch(seed: u64) -> PretrainBatch {
    let g = GridGeometry::clip(4, 32, 32, 8, 2).unwrap();
    let n = g.num_tokens();
    let mut rng = rgbd_mae::seed::rng(seed, &[]);
    let mut draw = |k: usize| -> Vec<f32> { (0..k).map(|_| rand::Rng::random_range(&mut rng, 0.0..1.0)).collect() };
    let rgb = Tensor::from_vec(draw(3 * n * 3 * 128), (3, n, 3 * 128), &Device::Cpu).unwrap();
    let depth = Tensor::from_vec(draw(3 * n * 128), (3, n, 128), &Device::Cpu).unwrap();
    PretrainBatch::new(rgb, depth, g).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn total_is_the_weighted_sum_of_terms(
        alpha in 0.0f64..2.0,
        beta in 0.0f64..2.0,
        gamma in 0.0f64..1.0,
        eta in 0.0f64..1.0,
        seed in 0u64..1000,
    ) {
        prop_assume!(alpha + beta + gamma + eta > 0.0);
        let cfg = tiny_video();
        let state = ModelState::new(cfg.model, seed).unwrap();
        let batch = small_batch(seed);
        let plans: Vec<MaskPlan> = (0..3)
            .map(|i| make_plan(&batch.geometry, &MaskConfig::video_default(), seed * 7 + i).unwrap())
            .collect();
        let matching = make_matching_batch(3, seed, MatchingMode::Random).unwrap();
        let w = LossWeights::new(alpha, beta, gamma, eta);
        let loss = LossConfig { weights: w, depth_mode: DepthLossMode::VideoMse };
        let (tensor, r) = state.forward_loss(&batch, &plans, Some(&matching), &loss, None).unwrap();
        let from_terms = weighted(&w, &[r.rgb, r.depth, r.contrastive, r.matching]);
        prop_assert!((r.total - from_terms).abs() < SUM_TOL, "{} vs {}", r.total, from_terms);
        prop_assert!((tensor.unwrap().to_dtype(DType::F64).unwrap().to_scalar::<f64>().unwrap() - r.total).abs() < SUM_TOL);
    }

    #[test]
    fn cosine_schedule_shape(
        base in 1e-5f64..1e-2,
        warmup in 0usize..50,
        extra in 1usize..500,
    ) {
        let total = warmup + extra;
        let s = CosineSchedule { base_lr: base, min_lr: 0.0, warmup_lr: 0.0, warmup_steps: warmup, total_steps: total };
        if warmup > 0 {
            prop_assert!(s.lr(0).abs() < 1e-12);
        }
        prop_assert!((s.lr(warmup) - base).abs() < 1e-12 * base.max(1.0));
        for t in warmup..total {
            prop_assert!(s.lr(t + 1) <= s.lr(t));
        }
        prop_assert!(s.lr(total) >= 0.0 && s.lr(total) < 1e-12);
    }
}

#[test]
fn logged_totals_and_learning_rates_are_consistent() {
    let video = tiny_video();
    let dir = tempfile::tempdir().unwrap();
    let out = pretrain_video(&video, dir.path(), None).unwrap();
    let rows = read_csv(&dir.path().join("metrics.csv"));
    assert_eq!(rows.len(), out.rows.len());
    assert_eq!(rows.len(), 8);
    for r in &rows {
        assert!((r.total - weighted(&video.loss, &r.terms)).abs() < SUM_TOL);
    }
    // two steps per epoch, one warmup epoch
    let warm = 2;
    let base = video.optimizer.lr;
    assert!(rows[0].lr.abs() < 1e-12);
    assert!((rows[warm].lr - base).abs() < 1e-12);
    for pair in rows[warm..].windows(2) {
        assert!(pair[1].lr <= pair[0].lr);
    }
    assert!(rows.last().unwrap().lr >= 0.0);

    let image = tiny_image();
    let dir = tempfile::tempdir().unwrap();
    pretrain_image(&image, dir.path(), None).unwrap();
    let rows = read_csv(&dir.path().join("metrics.csv"));
    assert_eq!(rows.len(), 10);
    let stage1 = LossWeights {
        tau: image.loss.tau,
        symmetric: image.loss.symmetric,
        ..LossWeights::stage1()
    };
    for (i, r) in rows.iter().enumerate() {
        let w = if i < 4 { &stage1 } else { &image.loss };
        assert!((r.total - weighted(w, &r.terms)).abs() < SUM_TOL, "row {i}");
        assert!(r.lr >= 0.0);
    }
    // each stage restarts its own warmup
    assert!(rows[0].lr.abs() < 1e-12 && rows[4].lr.abs() < 1e-12);
}

/// Every file under `dir` with its path relative to `dir`, sorted.
fn files(dir: &Path) -> Vec<(String, Vec<u8>)> {
    fn walk(root: &Path, dir: &Path, out: &mut Vec<(String, Vec<u8>)>) {
        for e in std::fs::read_dir(dir).unwrap() {
            let path = e.unwrap().path();
            if path.is_dir() {
                walk(root, &path, out);
            } else {
                let rel = path.strip_prefix(root).unwrap().to_string_lossy().into_owned();
                out.push((rel, std::fs::read(&path).unwrap()));
            }
        }
    }
    let mut out = Vec::new();
    walk(dir, dir, &mut out);
    out.sort();
    out
}

#[test]
fn trained_checkpoint_round_trips_byte_for_byte() {
    let dir = tempfile::tempdir().unwrap();
    let out = pretrain_video(&tiny_video(), dir.path(), None).unwrap();
    let model = out.final_checkpoint.join("model");
    let state = load_model(&out.final_checkpoint, DType::F32).unwrap();
    let again = dir.path().join("again");
    save_params(&again, &state.params).unwrap();
    let (a, b) = (files(&model), files(&again));
    assert!(!a.is_empty());
    assert_eq!(a, b);
}

#[test]
fn image_run_never_touches_the_matching_head() {
    let cfg = tiny_image();
    let dir = tempfile::tempdir().unwrap();
    let out = pretrain_image(&cfg, dir.path(), None).unwrap();
    for (_, names) in &out.stage_params {
        assert!(names.iter().all(|n| !n.starts_with("matching_head.")));
    }
    let before = initial_model(&cfg).unwrap();
    let after = load_model(&out.final_checkpoint, DType::F32).unwrap();
    let head = ["matching_head."];
    assert_eq!(
        checksum(&before.params.select(&head)).unwrap(),
        checksum(&after.params.select(&head)).unwrap()
    );
    assert_ne!(
        checksum(&before.params.select(&["decoder."])).unwrap(),
        checksum(&after.params.select(&["decoder."])).unwrap()
    );
}

#[test]
fn frozen_linear_probe_leaves_the_encoder_alone() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_video();
    let out = pretrain_video(&cfg, dir.path(), None).unwrap();
    let data = TokenizedSet::new(&load_samples(&cfg.dataset).unwrap(), &cfg.model).unwrap();
    let probe_cfg = ProbeConfig {
        epochs: 2,
        batch_size: 4,
        freeze_encoder: true,
        ..ProbeConfig::classification(8)
    };
    let (probe, report) = finetune(ProbeInit::Checkpoint(&out.final_checkpoint), &probe_cfg, &data, &data).unwrap();
    assert_eq!(report.metric, "top1");
    assert!((0.0..=100.0).contains(&report.value));
    assert_eq!(report.train_losses.len(), 4);
    let pretrained = load_model(&out.final_checkpoint, DType::F32).unwrap();
    assert_eq!(
        checksum(&pretrained.params.select(&ENCODER_PREFIXES)).unwrap(),
        checksum(&probe.backbone.params.select(&ENCODER_PREFIXES)).unwrap()
    );
}

#[test]
fn depth_probe_reports_a_percentage() {
    let cfg = tiny_image();
    let data = TokenizedSet::new(&load_samples(&cfg.dataset).unwrap(), &cfg.model).unwrap();
    let probe_cfg = ProbeConfig {
        epochs: 2,
        batch_size: 4,
        ..ProbeConfig::depth()
    };
    let init = ProbeInit::Scratch { model: cfg.model, seed: 1 };
    let (_, report) = finetune(init, &probe_cfg, &data, &data).unwrap();
    assert_eq!(report.metric, "delta1");
    assert!((0.0..=100.0).contains(&report.value));
}

const RETRIEVAL_FACTOR: f64 = 3.0;
const SEG_MIOU: f64 = 0.5;

/// Desk image preset, stage 1 only: cross-modal patch retrieval on held-out
/// scenes and a segmentation probe on top of the stage-1 encoder.
#[test]
fn stage1_features_retrieve_depth_and_support_segmentation() {
    let mut cfg = PretrainConfig::image_preset();
    let spe = 64 / cfg.batch_size;
    cfg.max_steps = Some(cfg.stage1_epochs * spe);
    let dir = tempfile::tempdir().unwrap();
    let init = initial_model(&cfg).unwrap();
    let out = pretrain_image(&cfg, dir.path(), None).unwrap();
    let trained = load_model(&out.final_checkpoint, DType::F32).unwrap();

    let held = image_set(64, 1, &cfg);
    let chance = 100.0 / held.geometry.num_tokens() as f64;
    let before = retrieval_top1(&init, &held, 16).unwrap();
    let after = retrieval_top1(&trained, &held, 16).unwrap();
    println!("retrieval top-1 {before:.2}% -> {after:.2}% (chance {chance:.2}%)");
    assert!(before < RETRIEVAL_FACTOR * chance);
    assert!(after > RETRIEVAL_FACTOR * chance);

    let train = image_set(128, 2, &cfg);
    let eval = image_set(64, 3, &cfg);
    let probe_cfg = ProbeConfig {
        epochs: 20,
        ..ProbeConfig::segmentation(NUM_SEG_CLASSES)
    };
    let (_, report) = finetune(ProbeInit::Checkpoint(&dir.path().join("stage1")), &probe_cfg, &train, &eval).unwrap();
    println!("segmentation mIoU {:.3}", report.value);
    assert!(report.value > SEG_MIOU);
}
