//! Supervised per-pixel segmenter: a stride-2 encoder, parallel dilated
//! convolutions, and a bilinear decoder with one skip connection.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imagecore::{LabelMask, Micrograph, UNLABELED};
use crate::neuralnet::{AdamState, Checkpoint, LayerSpec, Network, NetworkSpec};

pub const MAX_PARAMS: usize = 200_000;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SegNetConfig {
    pub input_size: usize,
    /// Encoder output stride: 4, 8 or 16.
    pub downsample: usize,
    pub aspp_rates: Vec<usize>,
    pub base_channels: usize,
    pub classes: usize,
}

impl Default for SegNetConfig {
    fn default() -> Self {
        SegNetConfig {
            input_size: 64,
            downsample: 8,
            aspp_rates: vec![1, 2, 4],
            base_channels: 16,
            classes: 3,
        }
    }
}

impl SegNetConfig {
    pub fn validate(&self) -> Result<()> {
        if ![4, 8, 16].contains(&self.downsample) {
            return Err(Error::invalid("downsample factor must be 4, 8 or 16"));
        }
        if self.input_size == 0 || self.input_size % self.downsample != 0 {
            return Err(Error::invalid("input size must be a positive multiple of the downsample factor"));
        }
        let mut rates = self.aspp_rates.clone();
        rates.sort_unstable();
        rates.dedup();
        if rates.is_empty() || rates.len() != self.aspp_rates.len() || rates[0] == 0 {
            return Err(Error::invalid("dilation rates must be distinct and at least 1"));
        }
        if self.base_channels == 0 || self.classes == 0 {
            return Err(Error::invalid("channel and class counts must be positive"));
        }
        Ok(())
    }
}

/// Layer graph for `cfg`. Channels grow 1c → 2c at H/4, then 4c below.
pub fn segnet_spec(cfg: &SegNetConfig) -> Result<NetworkSpec> {
    cfg.validate()?;
    let c = cfg.base_channels;
    let mut spec = NetworkSpec::new(vec![1, cfg.input_size, cfg.input_size]);
    spec.push("enc1", LayerSpec::conv(c, 3, 2, 1));
    spec.push("enc1_relu", LayerSpec::Relu);
    spec.push("enc2", LayerSpec::conv(2 * c, 3, 2, 1));
    let skip = spec.push("enc2_relu", LayerSpec::Relu);
    let mut stride = 4;
    let mut width = 2 * c;
    while stride < cfg.downsample {
        stride *= 2;
        width = 4 * c;
        spec.push(format!("enc{}", stride.trailing_zeros()), LayerSpec::conv(width, 3, 2, 1));
        spec.push(format!("enc{}_relu", stride.trailing_zeros()), LayerSpec::Relu);
    }
    let encoded = spec.nodes.len();
    let branches: Vec<usize> = cfg
        .aspp_rates
        .iter()
        .map(|&r| {
            spec.push_from(format!("aspp_r{r}"), LayerSpec::conv(width, 3, 1, r), vec![encoded]);
            spec.push(format!("aspp_r{r}_relu"), LayerSpec::Relu)
        })
        .collect();
    spec.push_from("aspp_cat", LayerSpec::Concat, branches);
    spec.push("aspp_proj", LayerSpec::conv(width, 1, 1, 1));
    let mut top = spec.push("aspp_proj_relu", LayerSpec::Relu);
    if cfg.downsample > 4 {
        top = spec.push(
            "up1",
            LayerSpec::Upsample {
                factor: cfg.downsample / 4,
            },
        );
    }
    spec.push_from("skip_cat", LayerSpec::Concat, vec![top, skip]);
    spec.push("dec", LayerSpec::conv(2 * c, 3, 1, 1));
    spec.push("dec_relu", LayerSpec::Relu);
    spec.push("up2", LayerSpec::Upsample { factor: 4 });
    spec.push("scores", LayerSpec::conv(cfg.classes, 1, 1, 1));
    Ok(spec)
}

pub fn build_segnet(cfg: &SegNetConfig, seed: u64) -> Result<Network<f32>> {
    Network::build(segnet_spec(cfg)?, seed)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassWeights {
    pub weights: Vec<f64>,
}

impl ClassWeights {
    /// `w_j = m / (k·m_j)` from the labeled pixel counts of class indices
    /// `0..k`; UNLABELED pixels are ignored.
    pub fn from_masks<'a>(masks: impl IntoIterator<Item = &'a LabelMask>, k: usize) -> Result<Self> {
        let mut counts = vec![0usize; k];
        for mask in masks {
            for &l in &mask.labels {
                if l == UNLABELED {
                    continue;
                }
                *counts
                    .get_mut(l as usize)
                    .ok_or_else(|| Error::invalid(format!("mask label {l} is not below {k}")))? += 1;
            }
        }
        Self::from_counts(&counts)
    }

    pub fn from_counts(counts: &[usize]) -> Result<Self> {
        if let Some(j) = counts.iter().position(|&m| m == 0) {
            return Err(Error::invalid(format!("class {j} is absent from the training data")));
        }
        let total: usize = counts.iter().sum();
        let k = counts.len() as f64;
        Ok(ClassWeights {
            weights: counts.iter().map(|&m| total as f64 / (k * m as f64)).collect(),
        })
    }
}

/// Class-balanced cross-entropy and its gradient with respect to `scores`
/// (`k` channel planes of `mask`'s size). Labels are class indices; the loss
/// is averaged over labeled pixels.
pub fn balanced_ce_loss_grad(scores: &[f64], mask: &LabelMask, w: &ClassWeights) -> Result<(f64, Vec<f64>)> {
    let k = w.weights.len();
    let hw = mask.width * mask.height;
    if scores.len() != k * hw {
        return Err(Error::invalid(format!("expected {k}x{hw} scores, got {}", scores.len())));
    }
    let n = mask.labels.iter().filter(|&&l| l != UNLABELED).count();
    if n == 0 {
        return Err(Error::invalid("no labeled pixels"));
    }
    let root: Vec<f64> = w.weights.iter().map(|v| v.sqrt()).collect();
    let mut grad = vec![0.0; scores.len()];
    let mut loss = 0.0;
    let mut p = vec![0.0; k];
    for (i, &label) in mask.labels.iter().enumerate() {
        if label == UNLABELED {
            continue;
        }
        let y = label as usize;
        if y >= k {
            return Err(Error::invalid(format!("mask label {label} is not below {k}")));
        }
        let max = (0..k).map(|j| scores[j * hw + i]).fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for (j, pj) in p.iter_mut().enumerate() {
            *pj = (scores[j * hw + i] - max).exp();
            z += *pj;
        }
        loss -= root[y] * ((scores[y * hw + i] - max) - z.ln());
        let scale = root[y] / n as f64;
        for (j, pj) in p.iter().enumerate() {
            grad[j * hw + i] = scale * (pj / z - (j == y) as u8 as f64);
        }
    }
    Ok((loss / n as f64, grad))
}

pub fn balanced_ce_loss(scores: &[f64], mask: &LabelMask, w: &ClassWeights) -> Result<f64> {
    balanced_ce_loss_grad(scores, mask, w).map(|(l, _)| l)
}

/// Per-pixel softmax over `k` channel planes of `hw` pixels each.
pub fn pixel_softmax(scores: &[f32], k: usize, hw: usize) -> Vec<f32> {
    let mut out = vec![0.0f32; k * hw];
    for i in 0..hw {
        let max = (0..k).map(|j| scores[j * hw + i]).fold(f32::NEG_INFINITY, f32::max);
        let mut z = 0.0f64;
        for j in 0..k {
            let e = ((scores[j * hw + i] - max) as f64).exp();
            out[j * hw + i] = e as f32;
            z += e;
        }
        for j in 0..k {
            out[j * hw + i] = (out[j * hw + i] as f64 / z) as f32;
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SegTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
    /// Stop once validation pixel accuracy reaches this value.
    pub stop_at_accuracy: Option<f64>,
}

impl Default for SegTrainConfig {
    fn default() -> Self {
        SegTrainConfig {
            epochs: 20,
            batch_size: 8,
            lr: 3e-3,
            seed: 0,
            stop_at_accuracy: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SegMetrics {
    pub pixel_accuracy: f64,
    /// True-positive rate per class index; `None` when the class is absent
    /// from the ground truth.
    pub tpr: Vec<Option<f64>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SegEpochMetrics {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_pixel_accuracy: f64,
    pub val: Option<SegMetrics>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SegMeta {
    pub kind: String,
    pub config: SegNetConfig,
    pub input_mean: f64,
    pub input_scale: f64,
}

/// Correct and total labeled pixels per class index.
fn class_hits(pred: &LabelMask, truth: &LabelMask, classes: &[u32]) -> Result<(Vec<usize>, Vec<usize>)> {
    if (pred.width, pred.height) != (truth.width, truth.height) {
        return Err(Error::invalid("prediction and ground truth sizes differ"));
    }
    let mut hits = vec![0usize; classes.len()];
    let mut totals = vec![0usize; classes.len()];
    for (&p, &t) in pred.labels.iter().zip(&truth.labels) {
        if t == UNLABELED {
            continue;
        }
        let j = classes
            .iter()
            .position(|&c| c == t)
            .ok_or_else(|| Error::invalid(format!("ground-truth label {t} is not a known class")))?;
        totals[j] += 1;
        hits[j] += (p == t) as usize;
    }
    Ok((hits, totals))
}

fn metrics_from_hits(hits: &[usize], totals: &[usize]) -> Result<SegMetrics> {
    let n: usize = totals.iter().sum();
    if n == 0 {
        return Err(Error::invalid("no labeled pixels"));
    }
    Ok(SegMetrics {
        pixel_accuracy: hits.iter().sum::<usize>() as f64 / n as f64,
        tpr: hits
            .iter()
            .zip(totals)
            .map(|(&h, &t)| (t > 0).then(|| h as f64 / t as f64))
            .collect(),
    })
}

/// Pixel accuracy and per-class TPR of `pred` against `truth`, both holding
/// class ids from `classes`. UNLABELED truth pixels are skipped.
pub fn evaluate(pred: &LabelMask, truth: &LabelMask, classes: &[u32]) -> Result<SegMetrics> {
    let (hits, totals) = class_hits(pred, truth, classes)?;
    metrics_from_hits(&hits, &totals)
}

/// A trained segmenter ready for inference.
#[derive(Clone, Debug)]
pub struct Segmenter {
    pub net: Network<f32>,
    pub classes: Vec<u32>,
    pub meta: SegMeta,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Segmentation {
    pub mask: LabelMask,
    /// Averaged maximum class probability per pixel.
    pub confidence: Vec<f32>,
}

impl Segmentation {
    /// Fraction of pixels per class id, in the order of `classes`.
    pub fn class_fractions(&self, classes: &[u32]) -> Vec<f64> {
        let n = self.mask.labels.len() as f64;
        classes
            .iter()
            .map(|c| self.mask.labels.iter().filter(|&&l| l == *c).count() as f64 / n)
            .collect()
    }

    pub fn mean_confidence(&self) -> f64 {
        self.confidence.iter().map(|&v| v as f64).sum::<f64>() / self.confidence.len() as f64
    }
}

impl Segmenter {
    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let meta: SegMeta = serde_json::from_value(ckpt.meta.clone())
            .map_err(|e| Error::Malformed(format!("segmenter metadata: {e}")))?;
        if meta.kind != "segmenter" {
            return Err(Error::invalid(format!("checkpoint is a {}, not a segmenter", meta.kind)));
        }
        let net = ckpt.network()?;
        if net.output_shape()[0] != ckpt.classes.len() {
            return Err(Error::Malformed("segmenter output channels do not match its class list".into()));
        }
        Ok(Segmenter {
            net,
            classes: ckpt.classes.clone(),
            meta,
        })
    }

    fn prepare(&self, pixels: &[f64]) -> Vec<f32> {
        prepare(pixels, self.meta.input_mean, self.meta.input_scale)
    }

    /// Class probabilities (k planes) of one `input_size` window.
    pub fn window_probabilities(&self, pixels: &[f64]) -> Result<Vec<f32>> {
        let s = self.meta.config.input_size;
        let scores = self.net.predict(&self.prepare(pixels))?;
        Ok(pixel_softmax(&scores, self.classes.len(), s * s))
    }

    /// Segments a whole image with `input_size` windows at 50% overlap.
    /// Images smaller than a window are reflection-padded, then cropped.
    pub fn segment(&self, m: &Micrograph) -> Result<Segmentation> {
        let s = self.meta.config.input_size;
        let k = self.classes.len();
        let (w, h) = (m.width.max(s), m.height.max(s));
        let padded: Vec<f64> = (0..h)
            .flat_map(|r| (0..w).map(move |c| (r, c)))
            .map(|(r, c)| m.get(reflect(r, m.height), reflect(c, m.width)))
            .collect();
        let mut acc = vec![0.0f64; k * w * h];
        let mut hits = vec![0u32; w * h];
        let mut window = vec![0.0; s * s];
        for &top in &tile_starts(h, s) {
            for &left in &tile_starts(w, s) {
                for r in 0..s {
                    window[r * s..(r + 1) * s].copy_from_slice(&padded[(top + r) * w + left..(top + r) * w + left + s]);
                }
                let probs = self.window_probabilities(&window)?;
                for j in 0..k {
                    for r in 0..s {
                        for c in 0..s {
                            acc[j * w * h + (top + r) * w + left + c] += probs[j * s * s + r * s + c] as f64;
                        }
                    }
                }
                for r in 0..s {
                    for c in 0..s {
                        hits[(top + r) * w + left + c] += 1;
                    }
                }
            }
        }
        let mut mask = LabelMask::filled(m.width, m.height, 0);
        let mut confidence = Vec::with_capacity(m.width * m.height);
        for r in 0..m.height {
            for c in 0..m.width {
                let i = r * w + c;
                let n = hits[i] as f64;
                let (best, p) = (0..k).fold((0, f64::NEG_INFINITY), |(b, bp), j| {
                    let v = acc[j * w * h + i] / n;
                    if v > bp {
                        (j, v)
                    } else {
                        (b, bp)
                    }
                });
                mask.set(r, c, self.classes[best]);
                confidence.push(p as f32);
            }
        }
        Ok(Segmentation { mask, confidence })
    }
}

/// Mirror index without repeating the edge pixel.
fn reflect(i: usize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n - 1);
    let j = i % period;
    if j < n {
        j
    } else {
        period - j
    }
}

/// Window offsets at half-window stride, the last one flush with the end.
fn tile_starts(len: usize, size: usize) -> Vec<usize> {
    let stride = (size / 2).max(1);
    let mut starts: Vec<usize> = (0..=len - size).step_by(stride).collect();
    if *starts.last().unwrap() != len - size {
        starts.push(len - size);
    }
    starts
}

fn prepare(pixels: &[f64], mean: f64, scale: f64) -> Vec<f32> {
    pixels.iter().map(|&p| ((p - mean) * scale) as f32).collect()
}

fn class_index_mask(mask: &LabelMask, classes: &[u32]) -> Result<LabelMask> {
    let labels = mask
        .labels
        .iter()
        .map(|&l| {
            if l == UNLABELED {
                return Ok(UNLABELED);
            }
            classes
                .iter()
                .position(|&c| c == l)
                .map(|j| j as u32)
                .ok_or_else(|| Error::invalid(format!("mask label {l} is not in the class list")))
        })
        .collect::<Result<_>>()?;
    LabelMask::new(mask.width, mask.height, labels)
}

/// Trains (or, with `warm_start`, fine-tunes) a segmenter on image/mask pairs
/// whose masks hold class ids from `classes`. Images larger than the window
/// contribute one seeded random window per epoch.
pub fn train_segnet(
    train: &[(Micrograph, LabelMask)],
    val: &[(Micrograph, LabelMask)],
    classes: &[u32],
    cfg: &SegNetConfig,
    tcfg: &SegTrainConfig,
    warm_start: Option<&Checkpoint>,
) -> Result<(Checkpoint, Vec<SegEpochMetrics>)> {
    cfg.validate()?;
    if cfg.classes != classes.len() {
        return Err(Error::invalid("config class count does not match the class list"));
    }
    if train.is_empty() || tcfg.batch_size == 0 {
        return Err(Error::invalid("empty training set or zero batch size"));
    }
    let s = cfg.input_size;
    for (m, mask) in train.iter().chain(val) {
        if (m.width, m.height) != (mask.width, mask.height) || m.width < s || m.height < s {
            return Err(Error::invalid("image/mask sizes differ or are smaller than the network input"));
        }
    }
    let train_idx: Vec<LabelMask> = train.iter().map(|(_, m)| class_index_mask(m, classes)).collect::<Result<_>>()?;
    let weights = ClassWeights::from_masks(&train_idx, classes.len())?;

    let (mut net, input_mean, input_scale) = match warm_start {
        None => {
            let n: usize = train.iter().map(|(m, _)| m.pixels.len()).sum();
            let mean = train.iter().flat_map(|(m, _)| m.pixels.iter()).sum::<f64>() / n as f64;
            let var = train
                .iter()
                .flat_map(|(m, _)| m.pixels.iter())
                .map(|p| (p - mean).powi(2))
                .sum::<f64>()
                / n as f64;
            (build_segnet(cfg, tcfg.seed)?, mean, 1.0 / var.sqrt().max(1.0))
        }
        Some(ckpt) => {
            let seg = Segmenter::from_checkpoint(ckpt)?;
            if ckpt.classes != classes {
                return Err(Error::invalid("warm-start class list differs; expand the checkpoint first"));
            }
            if seg.meta.config.input_size != s {
                return Err(Error::invalid("warm-start network has a different input size"));
            }
            (seg.net, seg.meta.input_mean, seg.meta.input_scale)
        }
    };

    let mut adam = AdamState::new(&net, tcfg.lr);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut log = Vec::with_capacity(tcfg.epochs);
    let config = SegNetConfig {
        classes: classes.len(),
        ..cfg.clone()
    };
    for epoch in 0..tcfg.epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(tcfg.seed ^ (epoch as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15));
        order.shuffle(&mut rng);
        let (mut loss_sum, mut correct, mut labeled) = (0.0, 0usize, 0usize);
        for batch in order.chunks(tcfg.batch_size) {
            let mut grads = net.zero_grads();
            for &i in batch {
                let (m, mask) = (&train[i].0, &train_idx[i]);
                let (top, left) = (rng.random_range(0..=m.height - s), rng.random_range(0..=m.width - s));
                let window = m.crop(top, left, s, s)?;
                let wmask = crop_mask(mask, top, left, s);
                let cache = net.forward_sample(&prepare(&window.pixels, input_mean, input_scale))?;
                let scores: Vec<f64> = cache.output().iter().map(|&v| v as f64).collect();
                let (loss, g) = balanced_ce_loss_grad(&scores, &wmask, &weights)?;
                loss_sum += loss;
                for (px, &l) in wmask.labels.iter().enumerate() {
                    if l != UNLABELED {
                        labeled += 1;
                        correct += (argmax_at(&scores, classes.len(), s * s, px) == l as usize) as usize;
                    }
                }
                let upstream: Vec<f32> = g.iter().map(|v| (v / batch.len() as f64) as f32).collect();
                net.backward_sample(&cache, &upstream, &mut grads)?;
            }
            net.apply_adam(&grads, &mut adam)?;
        }
        let val_metrics = if val.is_empty() {
            None
        } else {
            let seg = Segmenter {
                net: net.clone(),
                classes: classes.to_vec(),
                meta: SegMeta {
                    kind: "segmenter".into(),
                    config: config.clone(),
                    input_mean,
                    input_scale,
                },
            };
            Some(evaluate_set(&seg, val)?)
        };
        let m = SegEpochMetrics {
            epoch,
            train_loss: loss_sum / train.len() as f64,
            train_pixel_accuracy: correct as f64 / labeled.max(1) as f64,
            val: val_metrics,
        };
        log::info!(
            "epoch {epoch}: loss {:.4} acc {:.3} val_acc {:?}",
            m.train_loss,
            m.train_pixel_accuracy,
            m.val.as_ref().map(|v| v.pixel_accuracy)
        );
        let stop = tcfg
            .stop_at_accuracy
            .is_some_and(|t| m.val.as_ref().is_some_and(|v| v.pixel_accuracy >= t));
        log.push(m);
        if stop {
            break;
        }
    }
    let meta = SegMeta {
        kind: "segmenter".into(),
        config,
        input_mean,
        input_scale,
    };
    Ok((
        Checkpoint::from_network(&net, tcfg.seed, classes.to_vec(), serde_json::to_value(meta)?),
        log,
    ))
}

fn argmax_at(scores: &[f64], k: usize, hw: usize, px: usize) -> usize {
    (0..k).fold(0, |b, j| if scores[j * hw + px] > scores[b * hw + px] { j } else { b })
}

fn crop_mask(mask: &LabelMask, top: usize, left: usize, s: usize) -> LabelMask {
    let mut out = LabelMask::filled(s, s, 0);
    for r in 0..s {
        for c in 0..s {
            out.set(r, c, mask.get(top + r, left + c));
        }
    }
    out
}

/// Pooled metrics of whole-image segmentation over a labeled set.
pub fn evaluate_set(seg: &Segmenter, set: &[(Micrograph, LabelMask)]) -> Result<SegMetrics> {
    let k = seg.classes.len();
    let (mut hits, mut totals) = (vec![0usize; k], vec![0usize; k]);
    for (m, truth) in set {
        let pred = seg.segment(m)?;
        let (h, t) = class_hits(&pred.mask, truth, &seg.classes)?;
        for j in 0..k {
            hits[j] += h[j];
            totals[j] += t[j];
        }
    }
    metrics_from_hits(&hits, &totals)
}

/// Appends an output channel for `new_class`, copying every existing
/// parameter. The new channel is He-initialized from `seed`, or zero when
/// `zero_init`.
pub fn expand_classes(ckpt: &Checkpoint, new_class: u32, seed: u64, zero_init: bool) -> Result<Checkpoint> {
    if ckpt.classes.contains(&new_class) {
        return Err(Error::Conflict(format!("class {new_class} is already in the segmenter")));
    }
    let seg = Segmenter::from_checkpoint(ckpt)?;
    let mut net = seg.net;
    net.append_output_channel(seed, zero_init)?;
    let mut meta = seg.meta;
    meta.config.classes += 1;
    let mut classes = ckpt.classes.clone();
    classes.push(new_class);
    Ok(Checkpoint::from_network(&net, ckpt.seed, classes, serde_json::to_value(meta)?))
}

#[cfg(test)]
mod tests;
