//! Acceptance suite. Every test prints one `criterion N: PASS|FAIL` line
//! with the measured values, then asserts.

use std::path::Path;
use std::time::{Duration, Instant};

use candle_core::{DType, Device, Tensor};
use ndarray::Array2;
use rand::Rng;
use rgbd_mae::checkpoint::{checksum, load_params_matching, read_manifest};
use rgbd_mae::masking::{make_plan, masked_count, sample_mask, MaskConfig, MaskPairing, MaskPlan, MaskStrategy, ModalityMask};
use rgbd_mae::metrics::{delta1, miou, top1, ConfusionMatrix};
use rgbd_mae::net::{
    DecoderConfig, EncoderConfig, EncoderMode, LossConfig, ModelConfig, ModelState, PretrainBatch, ENCODER_PREFIXES,
};
use rgbd_mae::objectives::{
    info_nce_from_similarity, loss_contrastive, loss_depth, loss_matching, loss_rgb, make_matching_batch, DepthLossMode,
    LossWeights, MatchingMode,
};
use rgbd_mae::pipeline::{
    evaluate_objective, finetune, initial_model, load_model, load_samples, pretrain_image, pretrain_video, DatasetSpec,
    ProbeConfig, ProbeInit, PretrainConfig, Stage, SyntheticSpec, TokenizedSet,
};
use rgbd_mae::tokenizer::{GridGeometry, Modality};
use statrs::distribution::{ChiSquared, ContinuousCDF};

fn report(n: u32, pass: bool, detail: &str) {
    println!("criterion {n}: {} {detail}", if pass { "PASS" } else { "FAIL" });
}

// ---------------------------------------------------------------- 1

const FD_EPS: f64 = 1e-3;
const GRAD_REL_TOL: f64 = 1e-2;
/// Below this magnitude on both sides the comparison is absolute.
const GRAD_ABS_FLOOR: f64 = 1e-6;
const C1_BUDGET: Duration = Duration::from_secs(120);

fn tiny_model(mode: EncoderMode) -> ModelConfig {
    ModelConfig {
        patch_size: 2,
        tubelet: 2,
        encoder: EncoderConfig {
            depth: 1,
            width: 16,
            heads: 2,
            mlp_ratio: 2.0,
            mode,
            drop_path: 0.0,
        },
        decoder: DecoderConfig {
            depth: 1,
            width: 8,
            heads: 2,
            mlp_ratio: 2.0,
        },
    }
}

/// Two items on 4 frames of 4x4 with 2x2x2 tubelets: N = 8.
fn tiny_batch(seed: u64) -> PretrainBatch {
    let g = GridGeometry::clip(4, 4, 4, 2, 2).unwrap();
    assert_eq!(g.num_tokens(), 8);
    let mut rng = rgbd_mae::seed::rng(seed, &[]);
    let mut draw = |k: usize| -> Vec<f64> {
        (0..k).map(|_| rng.random_range(0.0..1.0)).collect()
    };
    let rgb = Tensor::from_vec(draw(2 * 8 * 24), (2, 8, 24), &Device::Cpu).unwrap();
    let depth = Tensor::from_vec(draw(2 * 8 * 8), (2, 8, 8), &Device::Cpu).unwrap();
    PretrainBatch::new(rgb, depth, g).unwrap()
}

struct GradCheck {
    checked: usize,
    failed: Vec<String>,
    worst: f64,
}

fn grad_check(mode: EncoderMode) -> GradCheck {
    let state = ModelState::with_dtype(tiny_model(mode), 7, DType::F64).unwrap();
    let batch = tiny_batch(11);
    // shared pairing guarantees jointly visible positions for the contrastive term
    let tube = ModalityMask {
        strategy: MaskStrategy::Tube,
        ratio: 0.5,
    };
    let mask = MaskConfig {
        rgb: tube,
        depth: tube,
        pairing: MaskPairing::Shared,
    };
    let plans: Vec<MaskPlan> = (0..2).map(|i| make_plan(&batch.geometry, &mask, 100 + i).unwrap()).collect();
    let matching = make_matching_batch(2, 5, MatchingMode::AllNegative).unwrap();
    let cfg = LossConfig {
        weights: LossWeights::or_ar(),
        depth_mode: DepthLossMode::VideoMse,
    };
    let params = state.params.all();
    let (report, grads) = state
        .forward_backward(&batch, &plans, Some(&matching), &cfg, &params, None)
        .unwrap();
    assert!(report.contrastive_pairs > 0 && report.matching.is_some());
    let loss = || state.forward_loss(&batch, &plans, Some(&matching), &cfg, None).unwrap().1.total;

    let mut out = GradCheck {
        checked: 0,
        failed: Vec::new(),
        worst: 0.0,
    };
    for (name, var) in &params {
        let shape = var.as_tensor().shape().clone();
        let base: Vec<f64> = var.as_tensor().flatten_all().unwrap().to_vec1().unwrap();
        let analytic: Vec<f64> = grads.values[name].flatten_all().unwrap().to_vec1().unwrap();
        for i in 0..base.len() {
            let mut probe = base.clone();
            probe[i] = base[i] + FD_EPS;
            var.set(&Tensor::from_vec(probe.clone(), &shape, &Device::Cpu).unwrap()).unwrap();
            let up = loss();
            probe[i] = base[i] - FD_EPS;
            var.set(&Tensor::from_vec(probe, &shape, &Device::Cpu).unwrap()).unwrap();
            let down = loss();
            let numeric = (up - down) / (2.0 * FD_EPS);
            let a = analytic[i];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(GRAD_ABS_FLOOR);
            out.worst = out.worst.max(rel);
            out.checked += 1;
            if rel >= GRAD_REL_TOL {
                out.failed.push(format!("{name}[{i}]: analytic {a:e} numeric {numeric:e}"));
            }
        }
        var.set(&Tensor::from_vec(base, &shape, &Device::Cpu).unwrap()).unwrap();
    }
    out
}

#[test]
fn criterion_1_gradient_check() {
    let start = Instant::now();
    let shared = grad_check(EncoderMode::Shared);
    let specific = grad_check(EncoderMode::Specific);
    let elapsed = start.elapsed();
    let checked = shared.checked + specific.checked;
    let failed = shared.failed.len() + specific.failed.len();
    let pass = failed == 0 && elapsed < C1_BUDGET;
    report(
        1,
        pass,
        &format!(
            "{checked} parameters, {failed} over tolerance, worst rel err {:.2e}, {:.1}s",
            shared.worst.max(specific.worst),
            elapsed.as_secs_f64()
        ),
    );
    for f in shared.failed.iter().chain(&specific.failed).take(10) {
        println!("  {f}");
    }
    assert!(pass);
}

// ---------------------------------------------------------------- 2

const C2_TRIALS: usize = 1000;
const C2_BUDGET: Duration = Duration::from_secs(60);

fn random_tensor(rng: &mut impl Rng, shape: (usize, usize, usize), scale: f32) -> (Vec<f32>, Tensor) {
    let v: Vec<f32> = (0..shape.0 * shape.1 * shape.2).map(|_| rng.random_range(-scale..scale)).collect();
    let t = Tensor::from_vec(v.clone(), shape, &Device::Cpu).unwrap();
    (v, t)
}

fn scalar_bits(t: &Tensor) -> u32 {
    t.to_scalar::<f32>().unwrap().to_bits()
}

#[test]
fn criterion_2_visible_targets_do_not_move_reconstruction_losses() {
    let start = Instant::now();
    let mut rng = rgbd_mae::seed::rng(2, &[]);
    let mut changed = Vec::new();
    for trial in 0..C2_TRIALS {
        let b = rng.random_range(1..=3);
        let n = rng.random_range(2..=16);
        let k_depth = [4, 8, 16][rng.random_range(0..3)];
        // every item keeps at least one visible and one masked slot
        let mut masked = Vec::new();
        let mut visible = Vec::new();
        for item in 0..b {
            let count = rng.random_range(1..n);
            let chosen = rand::seq::index::sample(&mut rng, n, count).into_vec();
            for i in 0..n {
                let flat = (item * n + i) as u32;
                if chosen.contains(&i) {
                    masked.push(flat);
                } else {
                    visible.push(flat as usize);
                }
            }
        }
        masked.sort_unstable();
        for (name, k) in [("rgb", 3 * k_depth), ("depth", k_depth)] {
            let (_, pred) = random_tensor(&mut rng, (b, n, k), 2.0);
            let (mut target, t0) = random_tensor(&mut rng, (b, n, k), 2.0);
            for &row in &visible {
                for x in &mut target[row * k..(row + 1) * k] {
                    *x = *x * rng.random_range(-50.0f32..50.0) + rng.random_range(-100.0f32..100.0);
                }
            }
            let t1 = Tensor::from_vec(target, (b, n, k), &Device::Cpu).unwrap();
            let pairs: Vec<(Tensor, Tensor)> = if name == "rgb" {
                vec![(loss_rgb(&pred, &t0, &masked).unwrap(), loss_rgb(&pred, &t1, &masked).unwrap())]
            } else {
                [DepthLossMode::ImageL1, DepthLossMode::VideoMse]
                    .into_iter()
                    .map(|m| (loss_depth(&pred, &t0, &masked, m).unwrap(), loss_depth(&pred, &t1, &masked, m).unwrap()))
                    .collect()
            };
            for (before, after) in pairs {
                if scalar_bits(&before) != scalar_bits(&after) {
                    changed.push(format!("trial {trial} {name}: {before} -> {after}"));
                }
            }
        }
    }
    let elapsed = start.elapsed();
    let pass = changed.is_empty() && elapsed < C2_BUDGET;
    report(
        2,
        pass,
        &format!(
            "{C2_TRIALS} trials, {} loss values changed, {:.1}s",
            changed.len(),
            elapsed.as_secs_f64()
        ),
    );
    for c in changed.iter().take(5) {
        println!("  {c}");
    }
    assert!(pass);
}

// ---------------------------------------------------------------- 3

const ANALYTIC_TOL: f64 = 1e-6;

fn f64_tensor(v: Vec<f64>, shape: &[usize]) -> Tensor {
    Tensor::from_vec(v, shape, &Device::Cpu).unwrap()
}

fn value(t: &Tensor) -> f64 {
    t.to_scalar::<f64>().unwrap()
}

#[test]
fn criterion_3_analytic_loss_values() {
    let mut lines = Vec::new();
    let mut pass = true;
    let mut check = |what: String, got: f64, want: f64, tol: f64| {
        let ok = (got - want).abs() <= tol;
        pass &= ok;
        lines.push(format!("{what}: {got:.9} vs {want:.9} {}", if ok { "ok" } else { "off" }));
    };

    let eye = f64_tensor(vec![1.0, 0.0, 0.0, 1.0], &[1, 2, 2]);
    let c = value(&loss_contrastive(&eye, &eye, 1.0, false).unwrap());
    check("orthonormal K=2 tau=1".into(), c, (1.0 + (-1.0f64).exp()).ln(), ANALYTIC_TOL);

    for k in [2usize, 4, 8] {
        let sim = Tensor::zeros((1, k, k), DType::F64, &Device::Cpu).unwrap();
        let from_sim = value(&info_nce_from_similarity(&sim, 1.0).unwrap());
        check(format!("uniform similarity K={k}"), from_sim, (k as f64).ln(), ANALYTIC_TOL);
        // identical features give a constant similarity matrix
        let same = f64_tensor((0..k * 3).map(|i| [0.3, -1.2, 2.0][i % 3]).collect(), &[1, k, 3]);
        let from_feat = value(&loss_contrastive(&same, &same, 0.07, false).unwrap());
        check(format!("identical features K={k}"), from_feat, (k as f64).ln(), ANALYTIC_TOL);
    }

    let logits = Tensor::zeros((6, 2), DType::F64, &Device::Cpu).unwrap();
    let m = value(&loss_matching(&logits, &[1, 0, 1, 1, 0, 0]).unwrap());
    check("uniform matching logits".into(), m, 2f64.ln(), ANALYTIC_TOL);

    let one = f64_tensor(vec![0.4, -0.7, 1.9], &[1, 1, 3]);
    let other = f64_tensor(vec![-2.0, 0.1, 0.5], &[1, 1, 3]);
    let k1 = value(&loss_contrastive(&one, &other, 0.07, true).unwrap());
    check("K=1 contrastive (exact)".into(), k1, 0.0, 0.0);

    report(3, pass, &format!("{} analytic values", lines.len()));
    for l in &lines {
        println!("  {l}");
    }
    assert!(pass);
}

// ---------------------------------------------------------------- 4

const CHI_DRAWS: u64 = 10_000;
const CHI_SIGNIFICANCE: f64 = 0.01;
const FREQ_TOL: f64 = 0.02;

#[test]
fn criterion_4_masking() {
    let mut problems = Vec::new();
    let image14 = GridGeometry::image(224, 224, 16).unwrap();
    let image4 = GridGeometry::image(4, 4, 1).unwrap();
    let video = GridGeometry::clip(16, 224, 224, 16, 2).unwrap();
    let tie = GridGeometry::clip(4, 3, 3, 1, 1).unwrap();
    assert_eq!((video.n_t, video.spatial_cells()), (8, 196));

    // (grid, strategy, ratio, masked tokens) with counts worked out by hand
    let cases: [(&str, GridGeometry, MaskStrategy, f64, usize); 17] = [
        ("14x14 random 0.8", image14, MaskStrategy::Random, 0.8, 157),
        ("14x14 random 0.75", image14, MaskStrategy::Random, 0.75, 147),
        ("14x14 random 0.85", image14, MaskStrategy::Random, 0.85, 167),
        ("14x14 random 0.9", image14, MaskStrategy::Random, 0.9, 176),
        ("14x14 random 0.5", image14, MaskStrategy::Random, 0.5, 98),
        ("14x14 random 0", image14, MaskStrategy::Random, 0.0, 0),
        ("4x4 random 0.5", image4, MaskStrategy::Random, 0.5, 8),
        ("4x4 random 0.8", image4, MaskStrategy::Random, 0.8, 13),
        ("4x4 random 0.3", image4, MaskStrategy::Random, 0.3, 5),
        ("4x4 random 1", image4, MaskStrategy::Random, 1.0, 16),
        ("8x14x14 tube 0.9", video, MaskStrategy::Tube, 0.9, 1408),
        ("8x14x14 tube 0.75", video, MaskStrategy::Tube, 0.75, 1176),
        ("8x14x14 random 0.9", video, MaskStrategy::Random, 0.9, 1411),
        ("8x14x14 frame 0.5", video, MaskStrategy::Frame, 0.5, 784),
        ("8x14x14 frame 0.9", video, MaskStrategy::Frame, 0.9, 1372),
        ("4x3x3 tube 0.5 (tie)", tie, MaskStrategy::Tube, 0.5, 20),
        ("4x3x3 frame 0.5", tie, MaskStrategy::Frame, 0.5, 18),
    ];
    for (name, g, strategy, ratio, want) in cases {
        let predicted = masked_count(&g, strategy, ratio);
        if predicted != want {
            problems.push(format!("{name}: masked_count {predicted}, expected {want}"));
        }
        for seed in 0..20 {
            let got = sample_mask(&g, strategy, ratio, seed).unwrap().iter().filter(|v| !**v).count();
            if got != want {
                problems.push(format!("{name} seed {seed}: {got} masked, expected {want}"));
                break;
            }
        }
    }

    // the default image plan masks 157 of 196 in each modality
    for seed in 0..50 {
        let plan = make_plan(&image14, &MaskConfig::image_default(), seed).unwrap();
        for m in [Modality::Rgb, Modality::Depth] {
            if plan.masked_indices(m).len() != 157 {
                problems.push(format!("image plan seed {seed} {}: {}", m.name(), plan.masked_indices(m).len()));
            }
        }
    }

    // tube: the same 176 cells in every slice; frame: whole slices
    let s = video.spatial_cells();
    for seed in 0..50 {
        let tube = sample_mask(&video, MaskStrategy::Tube, 0.9, seed).unwrap();
        let first = &tube[..s];
        for t in 0..video.n_t {
            let slice = &tube[t * s..(t + 1) * s];
            if slice != first || slice.iter().filter(|v| !**v).count() != 176 {
                problems.push(format!("tube seed {seed}: slice {t} differs or has the wrong count"));
            }
        }
        let frame = sample_mask(&video, MaskStrategy::Frame, 0.5, seed).unwrap();
        let mut full = 0;
        for t in 0..video.n_t {
            let slice = &frame[t * s..(t + 1) * s];
            let masked = slice.iter().filter(|v| !**v).count();
            if masked != 0 && masked != s {
                problems.push(format!("frame seed {seed}: slice {t} partly masked"));
            }
            full += (masked == s) as usize;
        }
        if full != 4 {
            problems.push(format!("frame seed {seed}: {full} masked slices, expected 4"));
        }
    }

    // uniformity over positions on N = 16 at ratio 0.5
    let n = image4.num_tokens();
    let p = 0.5;
    let mut hits = vec![0u64; n];
    for seed in 0..CHI_DRAWS {
        for (i, v) in sample_mask(&image4, MaskStrategy::Random, p, seed).unwrap().iter().enumerate() {
            hits[i] += !*v as u64;
        }
    }
    // With a fixed mask size the per-position counts have covariance
    // T·p(1-p)·N/(N-1)·(I - J/N), so the scaled statistic is chi-square
    // with N - 1 degrees of freedom.
    let t = CHI_DRAWS as f64;
    let raw: f64 = hits.iter().map(|&h| (h as f64 - t * p).powi(2) / (t * p * (1.0 - p))).sum();
    let stat = raw * (n as f64 - 1.0) / n as f64;
    let critical = ChiSquared::new(n as f64 - 1.0).unwrap().inverse_cdf(1.0 - CHI_SIGNIFICANCE);
    if stat >= critical {
        problems.push(format!("chi-square {stat:.2} >= critical {critical:.2}"));
    }
    let (lo, hi) = hits.iter().fold((f64::MAX, f64::MIN), |(lo, hi), &h| {
        let f = h as f64 / t;
        (lo.min(f), hi.max(f))
    });
    if lo < p - FREQ_TOL || hi > p + FREQ_TOL {
        problems.push(format!("mask frequency range [{lo:.4}, {hi:.4}] outside {p} +- {FREQ_TOL}"));
    }

    let pass = problems.is_empty();
    report(
        4,
        pass,
        &format!(
            "{} count cases, chi-square {stat:.2} (critical {critical:.2}, df 15), frequency [{lo:.4}, {hi:.4}]",
            cases.len()
        ),
    );
    for p in problems.iter().take(10) {
        println!("  {p}");
    }
    assert!(pass);
}

// ---------------------------------------------------------------- 5

fn small_image_config(count: usize) -> PretrainConfig {
    let mut cfg = PretrainConfig::image_preset();
    cfg.dataset = DatasetSpec::Synthetic(SyntheticSpec {
        count,
        frames: 1,
        height: 64,
        width: 64,
        seed: 0,
    });
    cfg
}

#[test]
fn criterion_5_stage_handoff() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small_image_config(16);
    cfg.stage1_epochs = 2;
    cfg.stage2_epochs = 2;
    cfg.batch_size = 8;
    let out = pretrain_image(&cfg, dir.path(), None).unwrap();
    let mut problems = Vec::new();

    let h = out.handoff.clone().expect("a two-stage run records its handoff");
    if h.stage1_final != h.stage2_initial {
        problems.push(format!("checksums differ: {} vs {}", h.stage1_final, h.stage2_initial));
    }
    // the saved stage-1 weights reproduce the stage-2 starting point
    let stage1 = dir.path().join("stage1");
    let reloaded = ModelState::new(cfg.model, 99).unwrap();
    load_params_matching(&stage1.join("model"), &reloaded.params, &ENCODER_PREFIXES, false).unwrap();
    let saved = checksum(&reloaded.params.select(&ENCODER_PREFIXES)).unwrap();
    if saved != h.stage2_initial {
        problems.push("stage-1 checkpoint checksum differs from the stage-2 initial checksum".into());
    }
    let manifest = read_manifest(&stage1.join("model")).unwrap();
    let foreign: Vec<_> = manifest
        .tensors
        .iter()
        .filter(|e| !ENCODER_PREFIXES.iter().any(|p| e.name.starts_with(p)))
        .map(|e| e.name.clone())
        .collect();
    if !foreign.is_empty() || manifest.tensors.is_empty() {
        problems.push(format!("stage-1 manifest holds non-encoder entries: {foreign:?}"));
    }
    if h.stage1_params.iter().any(|n| n.starts_with("decoder.") || n.starts_with("matching_head.")) {
        problems.push("stage 1 optimizes decoder or matching parameters".into());
    }

    let stage2: Vec<_> = out.rows.iter().filter(|r| r.stage == Stage::Stage2).collect();
    let stray = stage2
        .iter()
        .filter(|r| r.report.contrastive.is_some_and(|v| v != 0.0) || r.report.matching.is_some_and(|v| v != 0.0))
        .count();
    if stage2.is_empty() || stray > 0 {
        problems.push(format!("{stray} of {} stage-2 rows log contrastive or matching terms", stage2.len()));
    }
    let csv = std::fs::read_to_string(dir.path().join("metrics.csv")).unwrap();
    for line in csv.lines().filter(|l| l.contains(",stage2,")) {
        let cols: Vec<&str> = line.split(',').collect();
        if !(cols[5].is_empty() || cols[5] == "0") || !(cols[6].is_empty() || cols[6] == "0") {
            problems.push(format!("metrics.csv stage-2 row carries a contrastive or matching value: {line}"));
            break;
        }
    }

    // a stage-1-only run leaves the decoder at its seeded init
    let only1 = tempfile::tempdir().unwrap();
    let mut cfg1 = cfg.clone();
    cfg1.max_steps = Some(2 * 2);
    pretrain_image(&cfg1, only1.path(), None).unwrap();
    let after = load_model(&only1.path().join("final"), DType::F32).unwrap();
    let before = initial_model(&cfg1).unwrap();
    let rest = ["decoder.", "matching_head."];
    if checksum(&after.params.select(&rest)).unwrap() != checksum(&before.params.select(&rest)).unwrap() {
        problems.push("stage 1 changed decoder or matching parameters".into());
    }
    if checksum(&after.params.select(&ENCODER_PREFIXES)).unwrap() == checksum(&before.params.select(&ENCODER_PREFIXES)).unwrap() {
        problems.push("stage 1 left the encoder untouched".into());
    }

    let pass = problems.is_empty();
    report(
        5,
        pass,
        &format!(
            "handoff checksum {}, stage-1 manifest {} entries, {} stage-2 rows",
            &h.stage2_initial[..12],
            manifest.tensors.len(),
            stage2.len()
        ),
    );
    for p in &problems {
        println!("  {p}");
    }
    assert!(pass);
}

// ---------------------------------------------------------------- 6

const OVERFIT_FACTOR: f64 = 0.5;
const OVERFIT_BUDGET: Duration = Duration::from_secs(600);
const IMAGE_STAGE2_MAX_STEPS: usize = 300;
const EVAL_SEED: u64 = 20_24;
const EVAL_BATCH: usize = 8;

fn dataset(cfg: &PretrainConfig) -> TokenizedSet {
    TokenizedSet::new(&load_samples(&cfg.dataset).unwrap(), &cfg.model).unwrap()
}

/// First-epoch and last-epoch means of the logged per-step objective.
fn logged_epochs(rows: &[rgbd_mae::pipeline::MetricsRow], spe: usize, weights: &LossWeights) -> (f64, f64) {
    let vals: Vec<f64> = rows.iter().map(|r| r.report.weighted_sum(weights)).collect();
    let mean = |s: &[f64]| s.iter().sum::<f64>() / s.len() as f64;
    (mean(&vals[..spe]), mean(&vals[vals.len() - spe..]))
}

#[test]
fn criterion_6_overfit() {
    let mut lines = Vec::new();
    let mut pass = true;

    // video: 32 clips, 200 steps, all four terms
    let start = Instant::now();
    let dir = tempfile::tempdir().unwrap();
    let cfg = PretrainConfig::video_preset();
    let data = dataset(&cfg);
    let steps = cfg.epochs * data.len() / cfg.batch_size;
    let loss = LossConfig {
        weights: cfg.loss,
        depth_mode: cfg.depth_loss,
    };
    let before = evaluate_objective(&initial_model(&cfg).unwrap(), &data, &cfg.mask, &loss, EVAL_BATCH, EVAL_SEED).unwrap();
    let out = pretrain_video(&cfg, dir.path(), None).unwrap();
    let final_state = load_model(&out.final_checkpoint, DType::F32).unwrap();
    let after = evaluate_objective(&final_state, &data, &cfg.mask, &loss, EVAL_BATCH, EVAL_SEED).unwrap();
    let elapsed = start.elapsed();
    let ok = out.rows.len() == steps && after.total < OVERFIT_FACTOR * before.total && elapsed < OVERFIT_BUDGET;
    pass &= ok;
    let (first, last) = logged_epochs(&out.rows, data.len() / cfg.batch_size, &cfg.loss);
    lines.push(format!(
        "video {} steps: total {:.4} -> {:.4} (ratio {:.3}; rgb {:.4} -> {:.4}, depth {:.4} -> {:.4}); \
         logged epoch mean {first:.4} -> {last:.4}; {:.0}s {}",
        out.rows.len(),
        before.total,
        after.total,
        after.total / before.total,
        before.rgb.unwrap(),
        after.rgb.unwrap(),
        before.depth.unwrap(),
        after.depth.unwrap(),
        elapsed.as_secs_f64(),
        if ok { "ok" } else { "short" }
    ));

    // image stage 2 on 64 scenes, starting from the stage-1 weights
    let start = Instant::now();
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small_image_config(64);
    let data = dataset(&cfg);
    let spe = data.len() / cfg.batch_size;
    cfg.stage2_epochs = IMAGE_STAGE2_MAX_STEPS / spe;
    let out = pretrain_image(&cfg, dir.path(), None).unwrap();
    let stage2_steps = out.rows.iter().filter(|r| r.stage == Stage::Stage2).count();
    let start_state = initial_model(&cfg).unwrap();
    load_params_matching(&dir.path().join("stage1").join("model"), &start_state.params, &ENCODER_PREFIXES, false).unwrap();
    let loss = LossConfig {
        weights: cfg.loss,
        depth_mode: cfg.depth_loss,
    };
    let before = evaluate_objective(&start_state, &data, &cfg.mask, &loss, EVAL_BATCH, EVAL_SEED).unwrap();
    let final_state = load_model(&out.final_checkpoint, DType::F32).unwrap();
    let after = evaluate_objective(&final_state, &data, &cfg.mask, &loss, EVAL_BATCH, EVAL_SEED).unwrap();
    let elapsed = start.elapsed();
    let ok = stage2_steps <= IMAGE_STAGE2_MAX_STEPS && after.total < OVERFIT_FACTOR * before.total && elapsed < OVERFIT_BUDGET;
    pass &= ok;
    let stage2_rows: Vec<_> = out.rows.iter().filter(|r| r.stage == Stage::Stage2).cloned().collect();
    let (first, last) = logged_epochs(&stage2_rows, spe, &cfg.loss);
    lines.push(format!(
        "image stage 2, {stage2_steps} steps: a*rgb+b*depth {:.4} -> {:.4} (ratio {:.3}; rgb {:.4} -> {:.4}, depth {:.4} -> {:.4}); \
         logged epoch mean {first:.4} -> {last:.4}; {:.0}s {}",
        before.total,
        after.total,
        after.total / before.total,
        before.rgb.unwrap(),
        after.rgb.unwrap(),
        before.depth.unwrap(),
        after.depth.unwrap(),
        elapsed.as_secs_f64(),
        if ok { "ok" } else { "short" }
    ));

    report(6, pass, &format!("final objective below {OVERFIT_FACTOR} x initial on fixed evaluation masks"));
    for l in &lines {
        println!("  {l}");
    }
    assert!(pass);
}

// ---------------------------------------------------------------- 7

const C7_PRETRAIN_CLIPS: usize = 320;
const C7_PRETRAIN_EPOCHS: usize = 10;
const C7_EVAL_CLIPS: usize = 256;
const C7_LABEL_FRACTION: f64 = 0.1;
const C7_SEEDS: [u64; 3] = [0, 1, 2];
const C7_MIN_GAIN: f64 = 5.0;
const C7_BUDGET: Duration = Duration::from_secs(1200);

fn clips(count: usize, seed: u64) -> DatasetSpec {
    DatasetSpec::Synthetic(SyntheticSpec {
        count,
        frames: 8,
        height: 64,
        width: 64,
        seed,
    })
}

#[test]
fn criterion_7_pretraining_helps_low_label_finetuning() {
    let start = Instant::now();
    let mut cfg = PretrainConfig::video_preset();
    cfg.dataset = clips(C7_PRETRAIN_CLIPS, 0);
    cfg.epochs = C7_PRETRAIN_EPOCHS;
    let full_dir = tempfile::tempdir().unwrap();
    let full = pretrain_video(&cfg, full_dir.path(), None).unwrap();
    let mut ablated_cfg = cfg.clone();
    ablated_cfg.loss.gamma = 0.0;
    let ablated_dir = tempfile::tempdir().unwrap();
    let ablated = pretrain_video(&ablated_cfg, ablated_dir.path(), None).unwrap();

    let train = dataset(&cfg);
    let eval = TokenizedSet::new(&load_samples(&clips(C7_EVAL_CLIPS, 1)).unwrap(), &cfg.model).unwrap();
    let mut scores = [Vec::new(), Vec::new(), Vec::new()];
    for seed in C7_SEEDS {
        let probe = ProbeConfig {
            label_fraction: C7_LABEL_FRACTION,
            seed,
            ..ProbeConfig::classification(8)
        };
        let inits = [
            ProbeInit::Checkpoint(&full.final_checkpoint),
            ProbeInit::Scratch { model: cfg.model, seed },
            ProbeInit::Checkpoint(&ablated.final_checkpoint),
        ];
        for (slot, init) in scores.iter_mut().zip(inits) {
            slot.push(finetune(init, &probe, &train, &eval).unwrap().1.value);
        }
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let (pre, scratch, abl) = (mean(&scores[0]), mean(&scores[1]), mean(&scores[2]));
    let elapsed = start.elapsed();
    let pass = pre - scratch >= C7_MIN_GAIN && abl <= pre && elapsed < C7_BUDGET;
    report(
        7,
        pass,
        &format!(
            "top-1 pretrained {pre:.2}, scratch {scratch:.2} (gain {:.2}, need {C7_MIN_GAIN}), gamma=0 {abl:.2}; chance 12.5; {:.0}s",
            pre - scratch,
            elapsed.as_secs_f64()
        ),
    );
    println!("  per seed: pretrained {:?} scratch {:?} gamma=0 {:?}", scores[0], scores[1], scores[2]);
    assert!(pass);
}

// ---------------------------------------------------------------- 8

const METRIC_TOL: f64 = 1e-9;

#[test]
fn criterion_8_metric_oracles() {
    let mut lines = Vec::new();
    let mut pass = true;
    let mut check = |what: &str, got: f64, want: f64| {
        let ok = (got - want).abs() <= METRIC_TOL;
        pass &= ok;
        lines.push(format!("{what}: {got} vs {want}"));
    };
    let cm = ConfusionMatrix::from_counts(Array2::from_shape_vec((2, 2), vec![3, 1, 1, 3]).unwrap()).unwrap();
    check("mIoU [[3,1],[1,3]]", miou(&cm).unwrap(), 0.6);

    let gt: Vec<f64> = (1..=8).map(|i| 0.5 * i as f64).collect();
    check("delta1 exact", delta1(&gt, &gt, None).unwrap(), 100.0);
    let scaled: Vec<f64> = gt.iter().map(|g| 1.3 * g).collect();
    check("delta1 at 1.3x", delta1(&scaled, &gt, None).unwrap(), 0.0);
    let half: Vec<f64> = gt.iter().enumerate().map(|(i, g)| if i % 2 == 0 { 2.0 * g } else { *g }).collect();
    check("delta1 half at 2x", delta1(&half, &gt, None).unwrap(), 50.0);

    check("top-1 3 of 4", top1(&[0, 1, 2, 3], &[0, 1, 2, 0]).unwrap(), 75.0);

    report(8, pass, &format!("{} metric oracles", lines.len()));
    for l in &lines {
        println!("  {l}");
    }
    assert!(pass);
}

// ---------------------------------------------------------------- 9

fn tiny_video_config() -> PretrainConfig {
    let mut cfg = PretrainConfig::video_preset();
    cfg.model.patch_size = 8;
    cfg.model.encoder.width = 32;
    cfg.model.encoder.depth = 2;
    cfg.model.decoder.width = 16;
    cfg.model.decoder.depth = 1;
    cfg.dataset = DatasetSpec::Synthetic(SyntheticSpec {
        count: 8,
        frames: 4,
        height: 32,
        width: 32,
        seed: 3,
    });
    cfg.batch_size = 4;
    cfg.epochs = 3;
    cfg.schedule.warmup_epochs = 1;
    cfg.checkpoint_every = 2;
    cfg
}

fn tiny_image_config() -> PretrainConfig {
    let mut cfg = small_image_config(8);
    cfg.model.patch_size = 8;
    cfg.model.encoder.width = 32;
    cfg.model.encoder.depth = 2;
    cfg.model.decoder.width = 16;
    cfg.model.decoder.depth = 1;
    cfg.dataset = DatasetSpec::Synthetic(SyntheticSpec {
        count: 8,
        frames: 1,
        height: 32,
        width: 32,
        seed: 3,
    });
    cfg.batch_size = 4;
    cfg.stage1_epochs = 2;
    cfg.stage2_epochs = 2;
    cfg.schedule.warmup_epochs = 1;
    cfg.checkpoint_every = 3;
    cfg
}

fn read(path: &Path) -> Vec<u8> {
    std::fs::read(path).unwrap_or_else(|e| panic!("{}: {e}", path.display()))
}

fn copy_dir(from: &Path, to: &Path) {
    std::fs::create_dir_all(to).unwrap();
    for entry in std::fs::read_dir(from).unwrap() {
        let entry = entry.unwrap();
        let target = to.join(entry.file_name());
        if entry.file_type().unwrap().is_dir() {
            copy_dir(&entry.path(), &target);
        } else {
            std::fs::copy(entry.path(), &target).unwrap();
        }
    }
}

/// Runs `cfg` twice and resumes a copy of the first run from each saved
/// checkpoint (plus `extra`); returns problems found.
fn determinism(name: &str, cfg: &PretrainConfig, extra: &[&str], run: fn(&PretrainConfig, &Path, Option<&Path>) -> rgbd_mae::Result<rgbd_mae::pipeline::RunOutput>) -> (usize, Vec<String>) {
    let mut problems = Vec::new();
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let out_a = run(cfg, a.path(), None).unwrap();
    run(cfg, b.path(), None).unwrap();
    let csv_a = read(&a.path().join("metrics.csv"));
    if csv_a != read(&b.path().join("metrics.csv")) {
        problems.push(format!("{name}: metrics.csv differs between identical runs"));
    }
    // a checkpoint after the last step has no next step to reproduce
    let last = out_a.rows.len();
    let mut resumes: Vec<String> = std::fs::read_dir(a.path().join("checkpoints"))
        .unwrap()
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .filter(|n| n.trim_start_matches("step_").parse::<usize>().is_ok_and(|s| s < last))
        .map(|n| format!("checkpoints/{n}"))
        .collect();
    resumes.sort();
    resumes.extend(extra.iter().map(|s| s.to_string()));
    for ckpt in &resumes {
        let c = tempfile::tempdir().unwrap();
        copy_dir(a.path(), c.path());
        let resumed = run(cfg, c.path(), Some(&c.path().join(ckpt))).unwrap();
        let Some(first) = resumed.rows.first() else {
            problems.push(format!("{name}: resuming from {ckpt} ran no steps"));
            continue;
        };
        let original = out_a.rows.iter().find(|r| r.step == first.step).unwrap();
        if original.report.total.to_bits() != first.report.total.to_bits() {
            problems.push(format!(
                "{name}: step {} after resuming from {ckpt}: {} vs {}",
                first.step, first.report.total, original.report.total
            ));
        }
        if read(&c.path().join("metrics.csv")) != csv_a {
            problems.push(format!("{name}: metrics.csv after resuming from {ckpt} differs"));
        }
    }
    (resumes.len(), problems)
}

#[test]
fn criterion_9_determinism_and_resume() {
    let (nv, mut problems) = determinism("video", &tiny_video_config(), &[], pretrain_video);
    let (ni, more) = determinism("image", &tiny_image_config(), &["stage1"], pretrain_image);
    problems.extend(more);
    let pass = problems.is_empty();
    report(
        9,
        pass,
        &format!("bitwise metrics.csv across reruns; {} resume points reproduce the next-step loss", nv + ni),
    );
    for p in &problems {
        println!("  {p}");
    }
    assert!(pass);
}
