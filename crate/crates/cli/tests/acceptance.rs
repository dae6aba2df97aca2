//! Acceptance criteria 1–12, one PASS/FAIL line each.
//!
//! Runs as a plain binary (`harness = false`). Pass criterion numbers as
//! arguments to run a subset, e.g. `cargo test --test acceptance -- 4 5`.

mod common;

use std::collections::{BTreeMap, BTreeSet};
use std::panic::{self, AssertUnwindSafe};
use std::path::Path;
use std::process::Command;
use std::sync::Arc;
use std::time::{Duration, Instant};

use anyhow::{bail, ensure, Context, Result};
use axum::body::Body;
use axum::http::{Request, StatusCode};
use http_body_util::BodyExt;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde_json::Value;
use tower::ServiceExt;

use common::*;
use mcforge_cli::models::{pairs, train_catalog_classifier};
use mcforge_cli::step1::{load_hrs, run_step1, step1};
use mcforge_cli::step2::step2;
use mcforge_core::augment::{build_dataset, ClassExemplars, CollageConfig, Split};
use mcforge_core::catalog::{Catalog, McStatus};
use mcforge_core::edlclassify::{classifier_spec, edl_loss_grad, train_classifier, Classifier, LabeledPatch, TrainConfig};
use mcforge_core::imagecore::{extract_neighborhoods, LabelMask, UNLABELED};
use mcforge_core::neuralnet::{grad_check, LayerSpec, Network, NetworkSpec, Tensor};
use mcforge_core::scorefield::{compute_scores, fit_predictor, PredictorSpec};
use mcforge_core::segnet::{
    balanced_ce_loss_grad, build_segnet, evaluate_set, expand_classes, train_segnet, ClassWeights, SegEpochMetrics,
    SegNetConfig, SegTrainConfig, Segmenter,
};
use mcforge_core::synth::{bank_texture, render, two_phase_regions};
use mcforge_core::vbgmm::{fit_vbgmm, BgmHyper, BgmSettings, MixturePosterior};

fn within(start: Instant, limit: Duration) -> Result<f64> {
    let secs = start.elapsed().as_secs_f64();
    ensure!(start.elapsed() <= limit, "took {secs:.1}s, limit {}s", limit.as_secs());
    Ok(secs)
}

// ---- 1: score zero-mean ----

fn score_zero_mean() -> Result<String> {
    let images = [
        three_phase(["grain", "streak-h", "bands-8"], 128, 0),
        two_phase(["smooth", "mottle"], 128, 1),
        render(&bank_texture("checker")?, 128, 128, 2),
    ];
    let mut worst = 0.0f64;
    let mut slowest = 0.0f64;
    for m in &images {
        let start = Instant::now();
        let samples = extract_neighborhoods(m, 5)?;
        let p = fit_predictor(&samples, &PredictorSpec::Linear, 0)?;
        let f = compute_scores(m, &p)?;
        worst = f.mean().iter().fold(worst, |a, b| a.max(b.abs()));
        slowest = slowest.max(within(start, Duration::from_secs(10))?);
    }
    ensure!(worst <= 1e-8, "max |mean score| {worst:e}");
    Ok(format!("max |mean score| {worst:.1e} over 3 images, slowest {slowest:.2}s"))
}

// ---- 2: gradient checks ----

fn random_tensor(shape: Vec<usize>, seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

/// `Σ r·y + ½ Σ y²` for a fixed random `r`.
fn quadratic_loss(y: &Tensor<f64>) -> (f64, Tensor<f64>) {
    let r = random_tensor(y.shape.clone(), 99);
    let loss = y.data.iter().zip(&r.data).map(|(a, b)| a * b + 0.5 * a * a).sum();
    let grad = y.data.iter().zip(&r.data).map(|(a, b)| a + b).collect();
    (loss, Tensor::new(y.shape.clone(), grad).unwrap())
}

/// Central-difference step. At 1e-3 a probe occasionally straddles a ReLU
/// kink and reports a spurious disagreement.
const FD_STEP: f64 = 1e-5;
const FD_SEEDS: u64 = 4;

fn gradient_checks() -> Result<String> {
    let start = Instant::now();
    let single: Vec<(&str, Vec<usize>, LayerSpec)> = vec![
        ("dense", vec![6], LayerSpec::Dense { out: 4 }),
        ("prototype", vec![6], LayerSpec::Prototype { out: 3, offset: 0.5 }),
        ("conv", vec![2, 7, 6], LayerSpec::conv(3, 3, 1, 1)),
        ("conv strided", vec![2, 8, 8], LayerSpec::conv(3, 3, 2, 1)),
        ("conv dilated", vec![2, 9, 9], LayerSpec::conv(2, 3, 1, 2)),
        ("relu", vec![3, 4, 4], LayerSpec::Relu),
        ("maxpool", vec![2, 6, 6], LayerSpec::MaxPool2d { size: 2, stride: 2 }),
        ("avgpool", vec![2, 6, 6], LayerSpec::AvgPool2d { size: 3, stride: 2 }),
        ("global avgpool", vec![3, 4, 5], LayerSpec::GlobalAvgPool),
        ("upsample", vec![2, 3, 4], LayerSpec::Upsample { factor: 2 }),
        ("exp head", vec![5], LayerSpec::ExpHead { clamp: 10.0 }),
        ("softmax head", vec![3, 2, 2], LayerSpec::SoftmaxHead),
    ];
    let mut worst: (f64, String) = (0.0, String::new());
    let mut record = |name: &str, err: f64| {
        if err >= worst.0 {
            worst = (err, name.to_string());
        }
    };
    let mut checks = 0;
    for (name, shape, layer) in single {
        let mut spec = NetworkSpec::new(shape.clone());
        spec.push("l0", layer);
        let net = Network::<f64>::build(spec, 11)?;
        let mut batch = vec![2];
        batch.extend(shape);
        for seed in 0..FD_SEEDS {
            record(name, grad_check(&net, quadratic_loss, &random_tensor(batch.clone(), seed), FD_STEP, seed)?.max_rel_error);
            checks += 1;
        }
    }

    let mut spec = NetworkSpec::new(vec![2, 6, 6]);
    let a = spec.push_from("a", LayerSpec::conv(2, 3, 1, 1), vec![0]);
    let b = spec.push_from("b", LayerSpec::conv(3, 3, 1, 2), vec![0]);
    let cat = spec.push_from("cat", LayerSpec::Concat, vec![a, b, 0]);
    spec.push_from("head", LayerSpec::conv(2, 1, 1, 1), vec![cat]);
    let net = Network::<f64>::build(spec, 2)?;
    for seed in 0..FD_SEEDS {
        record("concat", grad_check(&net, quadratic_loss, &random_tensor(vec![1, 2, 6, 6], seed), FD_STEP, seed)?.max_rel_error);
        checks += 1;
    }

    // EDL loss through the classifier.
    let net = Network::<f64>::build(classifier_spec(12, 3, 2), 4)?;
    let targets = [0usize, 2];
    let edl = |out: &Tensor<f64>| {
        let (mut total, mut grad) = (0.0, Vec::new());
        for (i, &y) in targets.iter().enumerate() {
            let alpha: Vec<f64> = out.sample(i).iter().map(|e| e + 1.0).collect();
            let mut t = vec![0.0; 3];
            t[y] = 1.0;
            let (l, g) = edl_loss_grad(&alpha, &t, 0.7).unwrap();
            total += l;
            grad.extend(g);
        }
        (total, Tensor::new(out.shape.clone(), grad).unwrap())
    };
    for seed in 0..FD_SEEDS {
        record("edl loss", grad_check(&net, &edl, &random_tensor(vec![2, 1, 12, 12], seed), FD_STEP, seed)?.max_rel_error);
        checks += 1;
    }

    // Class-balanced cross-entropy through the segmenter.
    let cfg = SegNetConfig {
        input_size: 16,
        downsample: 8,
        base_channels: 2,
        classes: 3,
        ..Default::default()
    };
    let net = build_segnet(&cfg, 5)?.cast::<f64>();
    let labels: Vec<u32> = (0..256).map(|i| if i % 7 == 0 { UNLABELED } else { (i / 40 % 3) as u32 }).collect();
    let mask = LabelMask::new(16, 16, labels)?;
    let w = ClassWeights::from_masks([&mask], 3)?;
    let ce = |out: &Tensor<f64>| {
        let (l, g) = balanced_ce_loss_grad(&out.data, &mask, &w).unwrap();
        (l, Tensor::new(out.shape.clone(), g).unwrap())
    };
    for seed in 0..FD_SEEDS {
        record("balanced ce", grad_check(&net, &ce, &random_tensor(vec![1, 1, 16, 16], seed), FD_STEP, seed)?.max_rel_error);
        checks += 1;
    }

    ensure!(worst.0 <= 1e-4, "max relative error {:.2e} in {}", worst.0, worst.1);
    let secs = within(start, Duration::from_secs(120))?;
    Ok(format!(
        "11 layer kinds and 2 losses in {checks} checks, max relative error {:.1e} ({}), {secs:.1}s",
        worst.0, worst.1
    ))
}

// ---- 3: VB-GMM ----

fn blobs(centers: &[(f64, f64)], per: usize, spread: f64, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(2 * per * centers.len());
    for &(cx, cy) in centers {
        for _ in 0..per {
            let (a, b): (f64, f64) = (StandardNormal.sample(&mut rng), StandardNormal.sample(&mut rng));
            out.extend([cx + spread * a, cy + spread * b]);
        }
    }
    out
}

fn fit(data: &[f64], k: usize, seed: u64) -> Result<MixturePosterior> {
    let settings = BgmSettings {
        seed,
        ..Default::default()
    };
    Ok(fit_vbgmm(data, 2, &BgmHyper::from_data(data, 2, k, &settings)?)?)
}

/// Maximum-likelihood EM for a 2-D Gaussian mixture with full covariances.
fn em_reference(data: &[f64], init: &[[f64; 2]], iters: usize) -> (Vec<f64>, Vec<[f64; 2]>) {
    let (n, k) = (data.len() / 2, init.len());
    let mut means = init.to_vec();
    let mut covs = vec![[1.0, 0.0, 1.0]; k];
    let mut weights = vec![1.0 / k as f64; k];
    let mut resp = vec![0.0; n * k];
    for _ in 0..iters {
        for i in 0..n {
            let (x, y) = (data[2 * i], data[2 * i + 1]);
            let row = &mut resp[i * k..(i + 1) * k];
            for j in 0..k {
                let [a, b, c] = covs[j];
                let det = a * c - b * b;
                let (dx, dy) = (x - means[j][0], y - means[j][1]);
                let q = (c * dx * dx - 2.0 * b * dx * dy + a * dy * dy) / det;
                row[j] = weights[j] * (-0.5 * q).exp() / det.sqrt();
            }
            let total: f64 = row.iter().sum();
            row.iter_mut().for_each(|r| *r /= total);
        }
        for j in 0..k {
            let nk: f64 = (0..n).map(|i| resp[i * k + j]).sum();
            let m = [0, 1].map(|d| (0..n).map(|i| resp[i * k + j] * data[2 * i + d]).sum::<f64>() / nk);
            let mut cov = [0.0; 3];
            for i in 0..n {
                let (dx, dy, r) = (data[2 * i] - m[0], data[2 * i + 1] - m[1], resp[i * k + j]);
                cov[0] += r * dx * dx;
                cov[1] += r * dx * dy;
                cov[2] += r * dy * dy;
            }
            covs[j] = cov.map(|v| v / nk);
            means[j] = m;
            weights[j] = nk / n as f64;
        }
    }
    (weights, means)
}

fn vbgmm_properties() -> Result<String> {
    let start = Instant::now();
    let mut steps = 0;
    for seed in 0..10u64 {
        let data = blobs(&[(0.0, 0.0), (4.0, 1.0), (1.0, 5.0)], 150, 1.0 + seed as f64 * 0.1, 100 + seed);
        let post = fit(&data, 6, seed)?;
        for (i, w) in post.elbo_trace.windows(2).enumerate() {
            ensure!(w[1] >= w[0] - 1e-9 * w[0].abs(), "seed {seed}: ELBO fell at iteration {i}: {} -> {}", w[0], w[1]);
        }
        steps += post.elbo_trace.len();
    }

    let data = blobs(&[(0.0, 0.0), (10.0, 10.0)], 200, 1.0, 11);
    let post = fit(&data, 5, 0)?;
    let big: Vec<usize> = (0..5).filter(|&j| post.pi_hat[j] > 0.05).collect();
    ensure!(big.len() == 2, "weights {:?}", post.pi_hat);
    ensure!(big.iter().all(|&j| (post.pi_hat[j] - 0.5).abs() <= 0.05), "weights {:?}", post.pi_hat);
    ensure!(
        (0..5).filter(|j| !big.contains(j)).all(|j| post.pi_hat[j] < 1e-3),
        "weights {:?}",
        post.pi_hat
    );
    let (w_ref, m_ref) = em_reference(&data, &[[1.0, 1.0], [9.0, 9.0]], 200);
    let mut gap = 0.0f64;
    for (wr, mr) in w_ref.iter().zip(&m_ref) {
        let dist = |j: usize| ((post.means[j][0] - mr[0]).powi(2) + (post.means[j][1] - mr[1]).powi(2)).sqrt();
        let j = big.iter().copied().min_by(|&a, &b| dist(a).total_cmp(&dist(b))).unwrap();
        ensure!(dist(j) < 0.05 && (post.pi_hat[j] - wr).abs() < 0.01, "component {j} vs EM ({wr}, {mr:?})");
        gap = gap.max(dist(j));
    }
    let secs = within(start, Duration::from_secs(60))?;
    Ok(format!(
        "ELBO monotone over 10 seeds ({steps} steps); two blobs pi_hat {:.3}/{:.3}, EM mean gap {gap:.1e}, {secs:.1}s",
        post.pi_hat[big[0]], post.pi_hat[big[1]]
    ))
}

// ---- 4, 5: step 1 ----

fn step1_model_selection() -> Result<String> {
    let start = Instant::now();
    let mut cfg = fast_config().step1;
    cfg.l_s = 3;
    cfg.l_w = 8;
    cfg.fit_stride = Some(8);
    for seed in 0..3u64 {
        let m = three_phase(["grain", "streak-h", "bands-8"], 128, seed);
        let out = run_step1(&m, &cfg, 0)?;
        ensure!(out.summary.suggested_k == 3, "seed {seed}: suggested K {}", out.summary.suggested_k);
        let six = run_step1(&m, &mcforge_cli::config::Step1Config { k: Some(6), ..cfg.clone() }, 0)?;
        let heavy = six.summary.weights.iter().filter(|&&w| w > 0.02).count();
        ensure!(heavy == 3, "seed {seed}: weights at K=6 {:?}", six.summary.weights);
    }
    let secs = within(start, Duration::from_secs(300))?;
    Ok(format!("suggested K 3 and 3 weights > 0.02 at K=6 on seeds 0-2, {secs:.1}s"))
}

/// Fraction of interior pixels labeled correctly under the best one-to-one
/// matching of predicted labels to true labels.
fn matched_accuracy(pred: &LabelMask, truth: &LabelMask, border: usize) -> f64 {
    let (w, h) = (truth.width, truth.height);
    let mut confusion: BTreeMap<(u32, u32), usize> = BTreeMap::new();
    let mut total = 0;
    for r in border..h - border {
        for c in border..w - border {
            *confusion.entry((pred.labels[r * w + c], truth.labels[r * w + c])).or_default() += 1;
            total += 1;
        }
    }
    let preds: Vec<u32> = confusion.keys().map(|k| k.0).filter(|&l| l != UNLABELED).collect::<BTreeSet<_>>().into_iter().collect();
    let truths: Vec<u32> = confusion.keys().map(|k| k.1).collect::<BTreeSet<_>>().into_iter().collect();
    fn best(i: usize, preds: &[u32], truths: &[u32], used: &mut [bool], conf: &BTreeMap<(u32, u32), usize>) -> usize {
        if i == preds.len() {
            return 0;
        }
        let mut b = best(i + 1, preds, truths, used, conf);
        for j in 0..truths.len() {
            if !used[j] {
                used[j] = true;
                let hit = conf.get(&(preds[i], truths[j])).copied().unwrap_or(0);
                b = b.max(hit + best(i + 1, preds, truths, used, conf));
                used[j] = false;
            }
        }
        b
    }
    best(0, &preds, &truths, &mut vec![false; truths.len()], &confusion) as f64 / total as f64
}

fn step1_accuracy() -> Result<String> {
    let start = Instant::now();
    let cfg = fast_config().step1;
    ensure!(cfg.l_s + cfg.l_w == 25, "default l_s + l_w is {}", cfg.l_s + cfg.l_w);
    let m = two_phase(["smooth", "streak-h"], 256, 0);
    let out = run_step1(&m, &cfg, 0)?;
    let acc = matched_accuracy(&out.mask, &two_phase_regions(256, 0), 25);
    ensure!(acc >= 0.85, "interior accuracy {acc:.3}");
    let secs = within(start, Duration::from_secs(300))?;
    Ok(format!("interior accuracy {acc:.3} with K {}, {secs:.1}s", out.summary.fitted_k))
}

// ---- 6, 7: classifier ----

const CLS_PATCH: usize = 64;

fn labeled(names: &[&str], per: usize, seed: u64) -> Result<Vec<LabeledPatch>> {
    let mut out = Vec::new();
    for (i, name) in names.iter().enumerate() {
        let spec = bank_texture(name)?;
        for j in 0..per {
            out.push(LabeledPatch {
                pixels: render(&spec, CLS_PATCH, CLS_PATCH, seed * 1_000_000 + (i * per + j) as u64).pixels,
                label: i as u32,
            });
        }
    }
    Ok(out)
}

fn uncertainties(model: &Classifier, set: &[LabeledPatch]) -> Result<Vec<f64>> {
    set.iter().map(|p| Ok(model.dirichlet(&p.pixels)?.uncertainty)).collect()
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn edl_separation() -> Result<String> {
    let start = Instant::now();
    let (train, val) = (labeled(&KNOWN, 160, 1)?, labeled(&KNOWN, 40, 2)?);
    let (ck, _) = train_classifier(&train, &val, &[0, 1, 2, 3], CLS_PATCH, &TrainConfig::default(), None)?;
    let model = Classifier::from_checkpoint(&ck)?;
    let known = mean(&uncertainties(&model, &val)?);
    let held = uncertainties(&model, &labeled(&["anti-diag", "mottle"], 40, 3)?)?;
    let recall = held.iter().filter(|&&u| u > 0.5).count() as f64 / held.len() as f64;
    let gap = mean(&held) - known;
    ensure!(gap >= 0.2, "mean û held-out {:.3} vs known {known:.3}", mean(&held));
    ensure!(recall >= 0.8, "novel recall {recall:.3}");
    let secs = within(start, Duration::from_secs(900))?;
    Ok(format!(
        "mean û known {known:.3}, held-out {:.3} (gap {gap:.3}), recall {recall:.3}, {secs:.1}s",
        mean(&held)
    ))
}

fn classifier_accuracy() -> Result<String> {
    let start = Instant::now();
    let names = ["smooth", "streak-h", "streak-v", "grain", "diag", "anti-diag", "bands-8", "mottle"];
    let all = labeled(&names, 200, 4)?;
    let (mut train, mut val) = (Vec::new(), Vec::new());
    for (i, p) in all.into_iter().enumerate() {
        if i % 5 == 4 {
            val.push(p);
        } else {
            train.push(p);
        }
    }
    let classes: Vec<u32> = (0..8).collect();
    let (_, log) = train_classifier(&train, &val, &classes, CLS_PATCH, &TrainConfig::default(), None)?;
    let acc = log.last().context("no epochs")?.val_accuracy;
    ensure!(acc >= 0.95, "validation accuracy {acc:.3}");
    let secs = within(start, Duration::from_secs(900))?;
    Ok(format!("8 classes, 160 train / 40 val per class, validation accuracy {acc:.3}, {secs:.1}s"))
}

// ---- 8, 9, 10: segmenter ----

fn exemplars(names: &[&str], seed: u64) -> Result<Vec<ClassExemplars>> {
    names
        .iter()
        .enumerate()
        .map(|(i, name)| {
            let spec = bank_texture(name)?;
            Ok(ClassExemplars {
                class: i as u32,
                exemplars: (0..4).map(|j| render(&spec, 160, 160, seed * 1000 + (i * 10 + j) as u64)).collect(),
            })
        })
        .collect()
}

fn collages(size: usize) -> CollageConfig {
    CollageConfig {
        size,
        min_regions: 2,
        max_regions: 3,
        ..Default::default()
    }
}

/// Unscaled and scaled test metrics of the 3-class benchmark, shared by
/// criteria 8 and 9.
fn three_class_benchmark() -> Result<(f64, f64, Vec<f64>, f64)> {
    let start = Instant::now();
    let names = ["smooth", "streak-h", "bands-8"];
    let train_cfg = CollageConfig {
        scale_range: (1.0, 1.1),
        scale_prob: 0.5,
        ..collages(96)
    };
    let items = build_dataset(&exemplars(&names, 1)?, 240, &train_cfg, [200.0 / 240.0, 40.0 / 240.0, 0.0], 7)?;
    let net = SegNetConfig {
        base_channels: 8,
        ..Default::default()
    };
    let train = SegTrainConfig {
        epochs: 30,
        ..Default::default()
    };
    let (ck, _) = train_segnet(&pairs(&items, Split::Train), &pairs(&items, Split::Val), &[0, 1, 2], &net, &train, None)?;
    let seg = Segmenter::from_checkpoint(&ck)?;
    let test = exemplars(&names, 2)?;
    let plain = build_dataset(&test, 60, &collages(128), [0.0, 0.0, 1.0], 8)?;
    let scaled_cfg = CollageConfig {
        scale_range: (1.0, 1.1),
        ..collages(128)
    };
    let scaled = build_dataset(&test, 60, &scaled_cfg, [0.0, 0.0, 1.0], 8)?;
    let plain = evaluate_set(&seg, &pairs(&plain, Split::Test))?;
    let scaled = evaluate_set(&seg, &pairs(&scaled, Split::Test))?;
    let tpr = plain.tpr.iter().map(|t| t.unwrap_or(0.0)).collect();
    Ok((plain.pixel_accuracy, scaled.pixel_accuracy, tpr, start.elapsed().as_secs_f64()))
}

fn segmentation(bench: &Result<(f64, f64, Vec<f64>, f64), String>) -> Result<String> {
    let (acc, _, tpr, secs) = bench.clone().map_err(anyhow::Error::msg)?;
    ensure!(acc >= 0.90, "test pixel accuracy {acc:.3}");
    ensure!(tpr.iter().all(|&t| t >= 0.85), "per-class TPR {tpr:.3?}");
    ensure!(secs <= 1800.0, "took {secs:.1}s");
    Ok(format!("test pixel accuracy {acc:.3}, TPR {tpr:.3?}, {secs:.1}s"))
}

fn scale_robustness(bench: &Result<(f64, f64, Vec<f64>, f64), String>) -> Result<String> {
    let (plain, scaled, _, _) = bench.clone().map_err(anyhow::Error::msg)?;
    let drop = plain - scaled;
    ensure!(drop <= 0.02, "accuracy {plain:.3} unscaled vs {scaled:.3} scaled");
    Ok(format!("accuracy {plain:.3} unscaled, {scaled:.3} with scales in [1, 1.1] (drop {:.1} points)", 100.0 * drop))
}

fn transfer_expansion() -> Result<String> {
    let start = Instant::now();
    let names = ["smooth", "streak-h", "bands-8", "grain", "mottle"];
    let all = [0, 1, 2, 3, 4];
    let reached = |log: &[SegEpochMetrics]| log.last().and_then(|m| m.val.as_ref()).is_some_and(|v| v.pixel_accuracy >= 0.9);
    let mut runs = Vec::new();
    for rep in 0..3u64 {
        let classes = exemplars(&names, 10 + rep)?;
        let four = build_dataset(&classes[..4], 200, &collages(96), [1.0, 0.0, 0.0], 100 + rep)?;
        let cfg4 = SegNetConfig {
            base_channels: 8,
            classes: 4,
            ..Default::default()
        };
        let base_train = SegTrainConfig {
            epochs: 15,
            seed: rep,
            ..Default::default()
        };
        let (base, _) = train_segnet(&pairs(&four, Split::Train), &[], &[0, 1, 2, 3], &cfg4, &base_train, None)?;
        let expanded = expand_classes(&base, 4, rep, false)?;

        let side = cfg4.input_size;
        let probe: Vec<f32> = (0..side * side).map(|i| (i * 37 % 101) as f32 / 50.0 - 1.0).collect();
        let before = base.network()?.predict(&probe)?;
        let after = expanded.network()?.predict(&probe)?;
        ensure!(after.len() == before.len() / 4 * 5, "expanded output has {} values", after.len());
        ensure!(after[..before.len()] == before[..], "rep {rep}: old-channel outputs changed after expansion");

        let five = build_dataset(&classes, 120, &collages(96), [80.0 / 120.0, 40.0 / 120.0, 0.0], 200 + rep)?;
        let (train, val) = (pairs(&five, Split::Train), pairs(&five, Split::Val));
        let cfg5 = SegNetConfig { classes: 5, ..cfg4 };
        let tcfg = SegTrainConfig {
            epochs: 30,
            seed: rep,
            stop_at_accuracy: Some(0.9),
            ..Default::default()
        };
        let (_, scratch) = train_segnet(&train, &val, &all, &cfg5, &tcfg, None)?;
        let (_, fine) = train_segnet(&train, &val, &all, &cfg5, &tcfg, Some(&expanded))?;
        ensure!(reached(&scratch), "rep {rep}: scratch never reached 0.90");
        ensure!(reached(&fine), "rep {rep}: fine-tuning never reached 0.90");
        ensure!(2 * fine.len() <= scratch.len(), "rep {rep}: fine-tune {} epochs vs scratch {}", fine.len(), scratch.len());
        runs.push(format!("{}/{}", fine.len(), scratch.len()));
    }
    Ok(format!(
        "old channels bit-exact; epochs to 0.90 fine-tune/scratch {}, {:.1}s",
        runs.join(", "),
        start.elapsed().as_secs_f64()
    ))
}

// ---- 11: determinism ----

fn mcforge(cfg: &Path, args: &[&str]) -> Result<()> {
    let out = Command::new(env!("CARGO_BIN_EXE_mcforge"))
        .arg("--config")
        .arg(cfg)
        .args(args)
        .env("RUST_LOG", "warn")
        .output()?;
    if !out.status.success() {
        bail!("mcforge {args:?}: {}", String::from_utf8_lossy(&out.stderr));
    }
    Ok(())
}

fn determinism() -> Result<String> {
    let tmp = tempfile::tempdir()?;
    let dir = tmp.path();
    let p = |s: &str| dir.join(s).to_string_lossy().into_owned();
    let cfg = dir.join("cfg.json");
    let mut config = fast_config();
    config.segment.train.epochs = 2;
    config.save(&cfg)?;
    save(&two_phase(["streak-h", "mottle"], 192, 9), dir, "image.pgm");
    seeded_catalog(&KNOWN, 12).commit(dir.join("cat"))?;

    for run in ["s1a", "s1b"] {
        mcforge(&cfg, &["step1", &p("image.pgm"), "--out", &p(run)])?;
    }
    let (a, b) = (hash_dir(&dir.join("s1a")), hash_dir(&dir.join("s1b")));
    ensure!(a == b, "step1 outputs differ: {a} vs {b}");

    mcforge(&cfg, &["augment", "--catalog", &p("cat"), "--out", &p("aug"), "--count", "30"])?;
    for run in ["t1", "t2"] {
        mcforge(&cfg, &["train-segnet", "--data", &p("aug"), "--out", &p(&format!("{run}/model.ckpt"))])?;
    }
    let (c, d) = (hash_dir(&dir.join("t1")), hash_dir(&dir.join("t2")));
    ensure!(c == d, "train-segnet outputs differ: {c} vs {d}");
    Ok(format!("step1 {} and train-segnet {} identical across reruns", &a[..12], &c[..12]))
}

// ---- 12: service contract ----

async fn call(app: &axum::Router, method: &str, uri: &str, body: Option<&str>) -> Result<(StatusCode, u64, Value)> {
    let req = Request::builder()
        .method(method)
        .uri(uri)
        .header("content-type", "application/json")
        .body(body.map_or_else(Body::empty, |b| Body::from(b.to_string())))?;
    let res = app.clone().oneshot(req).await?;
    let status = res.status();
    let version = res.headers()[mcforge_service::VERSION_HEADER].to_str()?.parse()?;
    let bytes = res.into_body().collect().await?.to_bytes();
    let json = if bytes.is_empty() { Value::Null } else { serde_json::from_slice(&bytes)? };
    Ok((status, version, json))
}

fn service_contract() -> Result<String> {
    let tmp = tempfile::tempdir()?;
    let root = tmp.path().join("cat");
    let cfg = fast_config();
    let mut c = seeded_catalog(&KNOWN, 40);
    let model = Classifier::from_checkpoint(&train_catalog_classifier(&c, &cfg.classify)?.0)?;
    let image = save(&two_phase(["streak-h", "mottle"], 256, 3), tmp.path(), "mixed.pgm");
    step1(&image, &cfg, &tmp.path().join("s1"))?;
    let (source, hrs) = load_hrs(&tmp.path().join("s1"))?;
    let queued = step2(&mut c, &source, &hrs, &model, &cfg.classify)?.queued();
    ensure!(!queued.is_empty(), "step 2 queued nothing");
    c.commit(&root)?;

    let app = mcforge_service::router(Arc::new(mcforge_service::AppState::open(&root)?));
    tokio::runtime::Runtime::new()?.block_on(async {
        let (status, v0, queue) = call(&app, "GET", "/api/queue?sort=uncertainty", None).await?;
        ensure!(status == StatusCode::OK, "queue: {status}");
        let listed: Vec<u64> = queue.as_array().context("queue is not a list")?.iter().filter_map(|e| e["id"].as_u64()).collect();
        ensure!(listed.iter().collect::<BTreeSet<_>>() == queued.iter().collect(), "queue {listed:?} vs {queued:?}");
        let us: Vec<f64> = queue.as_array().unwrap().iter().filter_map(|e| e["uncertainty"].as_f64()).collect();
        ensure!(us.windows(2).all(|w| w[0] >= w[1]), "queue not sorted by uncertainty: {us:?}");

        let first = listed[0];
        let (status, _, item) = call(&app, "GET", &format!("/api/items/{first}"), None).await?;
        ensure!(status == StatusCode::OK && item["state"] == "pending", "item: {status} {item}");
        for uri in ["/api/items/9999", "/api/items/abc", "/api/patches/nope.png", "/api/nothing"] {
            let (status, _, _) = call(&app, "GET", uri, None).await?;
            ensure!(status == StatusCode::NOT_FOUND, "{uri}: {status}");
        }

        let create = r#"{"action":"create_new","name":"mottle","decided_by":"reviewer"}"#;
        let (status, v1, res) = call(&app, "POST", &format!("/api/items/{first}/decision"), Some(create)).await?;
        ensure!(status == StatusCode::OK, "decision: {status} {res}");
        ensure!(v1 > v0, "version {v0} -> {v1}");
        ensure!(res["created"]["name"] == "mottle", "{res}");
        let (status, v2, _) = call(&app, "POST", &format!("/api/items/{first}/decision"), Some(create)).await?;
        ensure!(status == StatusCode::CONFLICT && v2 == v1, "repeat decision: {status}, version {v2}");
        let assign = r#"{"action":"assign","class_id":0,"decided_by":"reviewer"}"#;
        let (status, _, _) = call(&app, "POST", "/api/items/9999/decision", Some(assign)).await?;
        ensure!(status == StatusCode::NOT_FOUND, "unknown item decision: {status}");
        if let Some(second) = listed.get(1) {
            let bad = r#"{"action":"assign","decided_by":"reviewer"}"#;
            let (status, _, _) = call(&app, "POST", &format!("/api/items/{second}/decision"), Some(bad)).await?;
            ensure!(status == StatusCode::BAD_REQUEST, "malformed decision: {status}");
        }
        let (_, v3, mcs) = call(&app, "GET", "/api/mcs", None).await?;
        ensure!(mcs.as_array().map(Vec::len) == Some(5), "mcs: {mcs}");
        ensure!(v3 == v1, "version moved without a decision");
        Ok(())
    })?;

    let stored = Catalog::load(&root)?;
    ensure!(stored.replayed()? == stored, "audit replay differs from the stored catalog");
    let mottle = stored.records().iter().find(|r| r.name == "mottle").context("mottle class missing")?;
    ensure!(mottle.status == McStatus::Verified, "new class is {:?}", mottle.status);
    Ok(format!(
        "{} queued item(s); 404/409/400 paths, versioning and replay equality hold at version {}",
        queued.len(),
        stored.version()
    ))
}

fn main() {
    let only: BTreeSet<u32> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let wanted = |n: u32| only.is_empty() || only.contains(&n);
    // Criteria 8 and 9 share one trained model.
    let bench = if wanted(8) || wanted(9) {
        run_caught(three_class_benchmark).map_err(|e| format!("{e:#}"))
    } else {
        Err("not run".into())
    };
    let criteria: Vec<(u32, &str, Box<dyn Fn() -> Result<String>>)> = vec![
        (1, "score zero-mean", Box::new(score_zero_mean)),
        (2, "gradient checks", Box::new(gradient_checks)),
        (3, "VB-GMM properties", Box::new(vbgmm_properties)),
        (4, "step 1 model selection", Box::new(step1_model_selection)),
        (5, "step 1 segmentation accuracy", Box::new(step1_accuracy)),
        (6, "EDL uncertainty separation", Box::new(edl_separation)),
        (7, "classifier accuracy", Box::new(classifier_accuracy)),
        (8, "step 3 segmentation", Box::new(|| segmentation(&bench))),
        (9, "scale robustness", Box::new(|| scale_robustness(&bench))),
        (10, "transfer expansion", Box::new(transfer_expansion)),
        (11, "determinism", Box::new(determinism)),
        (12, "service contract", Box::new(service_contract)),
    ];
    let mut failed = Vec::new();
    for (n, name, check) in criteria.iter().filter(|c| wanted(c.0)) {
        match run_caught(check) {
            Ok(detail) => println!("criterion {n:>2} PASS  {name}: {detail}"),
            Err(e) => {
                println!("criterion {n:>2} FAIL  {name}: {e:#}");
                failed.push(*n);
            }
        }
    }
    if !failed.is_empty() {
        println!("failed criteria: {failed:?}");
        std::process::exit(1);
    }
}

fn run_caught<T>(f: impl Fn() -> Result<T>) -> Result<T> {
    match panic::catch_unwind(AssertUnwindSafe(f)) {
        Ok(r) => r,
        Err(p) => {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            bail!("panicked: {msg}")
        }
    }
}
