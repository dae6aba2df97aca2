//! Evidential patch classifier: the network emits non-negative evidence per
//! class, read as a Dirichlet over class probabilities. Low total evidence
//! means high uncertainty, which flags patches of classes the model has not
//! seen.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use statrs::function::gamma::{digamma, ln_gamma};

use crate::error::{Error, Result};
use crate::neuralnet::{AdamState, Checkpoint, LayerSpec, Network, NetworkSpec};

pub const LOGIT_CLAMP: f64 = 10.0;
pub const DEFAULT_TAU_U: f64 = 0.5;
pub const DEFAULT_K_PRIME: usize = 10;
/// Fixed intensity scale applied after mean subtraction.
pub const INPUT_SCALE: f64 = 1.0 / 255.0;
/// Prototype-head offset. A patch on exactly one class prototype, far from
/// the rest, gets uncertainty `1 / (1 + e^offset)`, about 0.25.
pub const PROTOTYPE_OFFSET: f64 = 1.1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DirichletOutput {
    pub evidence: Vec<f64>,
    pub alpha: Vec<f64>,
    pub strength: f64,
    pub p_hat: Vec<f64>,
    pub uncertainty: f64,
}

impl DirichletOutput {
    pub fn from_evidence(evidence: Vec<f64>) -> Self {
        let alpha: Vec<f64> = evidence.iter().map(|e| e + 1.0).collect();
        let strength: f64 = alpha.iter().sum();
        DirichletOutput {
            p_hat: alpha.iter().map(|a| a / strength).collect(),
            uncertainty: alpha.len() as f64 / strength,
            alpha,
            strength,
            evidence,
        }
    }
}

/// Exponential evidence head with logits clamped to ±[`LOGIT_CLAMP`].
pub fn evidence_head(logits: &[f64]) -> DirichletOutput {
    DirichletOutput::from_evidence(
        logits
            .iter()
            .map(|z| z.clamp(-LOGIT_CLAMP, LOGIT_CLAMP).exp())
            .collect(),
    )
}

/// Trigamma via upward recurrence and the asymptotic series.
pub fn trigamma(mut x: f64) -> f64 {
    let mut acc = 0.0;
    while x < 10.0 {
        acc += 1.0 / (x * x);
        x += 1.0;
    }
    let inv = 1.0 / x;
    let inv2 = inv * inv;
    let series = 1.0 / 6.0 - inv2 * (1.0 / 30.0 - inv2 * (1.0 / 42.0 - inv2 * (1.0 / 30.0 - inv2 * 5.0 / 66.0)));
    acc + inv + inv2 / 2.0 + inv * inv2 * series
}

fn check_one_hot(t: &[f64], k: usize) -> Result<()> {
    let ones = t.iter().filter(|&&v| v == 1.0).count();
    if t.len() != k || ones != 1 || t.iter().any(|&v| v != 0.0 && v != 1.0) {
        return Err(Error::invalid("target must be a one-hot vector"));
    }
    Ok(())
}

/// `KL(Dir(a) ‖ Dir(1, …, 1))`.
pub fn kl_to_uniform(a: &[f64]) -> f64 {
    let k = a.len() as f64;
    let s: f64 = a.iter().sum();
    let psi_s = digamma(s);
    let mut kl = ln_gamma(s) - ln_gamma(k);
    for &v in a {
        if v != 1.0 {
            kl += (v - 1.0) * (digamma(v) - psi_s) - ln_gamma(v);
        }
    }
    kl
}

/// Bayes risk of the squared error under `Dir(α)` plus `λ` times the KL of
/// the misleading-evidence Dirichlet to the uniform one.
pub fn edl_loss(alpha: &[f64], t: &[f64], lambda: f64) -> Result<f64> {
    Ok(edl_loss_grad(alpha, t, lambda)?.0)
}

/// Loss and its gradient with respect to `α`.
pub fn edl_loss_grad(alpha: &[f64], t: &[f64], lambda: f64) -> Result<(f64, Vec<f64>)> {
    let k = alpha.len();
    check_one_hot(t, k)?;
    let s: f64 = alpha.iter().sum();
    let p: Vec<f64> = alpha.iter().map(|a| a / s).collect();
    let mut loss = 0.0;
    let mut dp = vec![0.0; k];
    let mut ds = 0.0;
    for j in 0..k {
        let var = p[j] * (1.0 - p[j]) / (s + 1.0);
        loss += (t[j] - p[j]).powi(2) + var;
        dp[j] = -2.0 * (t[j] - p[j]) + (1.0 - 2.0 * p[j]) / (s + 1.0);
        ds -= var / (s + 1.0);
    }
    let weighted: f64 = dp.iter().zip(&p).map(|(d, q)| d * q).sum();
    let mut grad: Vec<f64> = dp.iter().map(|d| (d - weighted) / s + ds).collect();

    if lambda != 0.0 {
        let tilde: Vec<f64> = alpha.iter().zip(t).map(|(a, tj)| tj + (1.0 - tj) * a).collect();
        loss += lambda * kl_to_uniform(&tilde);
        let st: f64 = tilde.iter().sum();
        let tail = (st - k as f64) * trigamma(st);
        for j in 0..k {
            if t[j] == 0.0 {
                grad[j] += lambda * ((tilde[j] - 1.0) * trigamma(tilde[j]) - tail);
            }
        }
    }
    Ok((loss, grad))
}

/// Desk-scale classifier: three stride-2 3×3 convolutions, global average
/// pooling, a prototype-distance layer, exponential evidence head.
///
/// Distance logits rather than a dense layer keep evidence low for features
/// far from every class prototype; a linear read-out of the pooled features
/// extrapolates confidently onto textures it was never trained on.
pub fn classifier_spec(patch_size: usize, classes: usize, width: usize) -> NetworkSpec {
    let mut spec = NetworkSpec::new(vec![1, patch_size, patch_size]);
    spec.push("conv1", LayerSpec::conv(width, 3, 2, 1));
    spec.push("relu1", LayerSpec::Relu);
    spec.push("conv2", LayerSpec::conv(2 * width, 3, 2, 1));
    spec.push("relu2", LayerSpec::Relu);
    spec.push("conv3", LayerSpec::conv(4 * width, 3, 2, 1));
    spec.push("relu3", LayerSpec::Relu);
    spec.push("pool", LayerSpec::GlobalAvgPool);
    spec.push("logits", LayerSpec::Prototype { out: classes, offset: PROTOTYPE_OFFSET });
    spec.push("evidence", LayerSpec::ExpHead { clamp: LOGIT_CLAMP });
    spec
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabeledPatch {
    pub pixels: Vec<f64>,
    pub label: u32,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub anneal_epochs: usize,
    pub lr: f64,
    /// Base channel count of the classifier.
    pub width: usize,
    /// Stop once validation accuracy reaches this value.
    pub stop_at_accuracy: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 15,
            batch_size: 16,
            seed: 0,
            anneal_epochs: 10,
            lr: 3e-3,
            width: 8,
            stop_at_accuracy: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub lambda: f64,
    pub train_loss: f64,
    pub train_accuracy: f64,
    pub val_loss: f64,
    pub val_accuracy: f64,
    pub val_top5_accuracy: f64,
    pub val_mean_uncertainty: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ClassifierMeta {
    pub kind: String,
    pub patch_size: usize,
    pub input_mean: f64,
    pub input_scale: f64,
}

/// A loaded classifier ready for inference.
#[derive(Clone, Debug)]
pub struct Classifier {
    pub net: Network<f32>,
    pub classes: Vec<u32>,
    pub meta: ClassifierMeta,
}

impl Classifier {
    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let meta: ClassifierMeta = serde_json::from_value(ckpt.meta.clone())
            .map_err(|e| Error::Malformed(format!("classifier metadata: {e}")))?;
        if meta.kind != "classifier" {
            return Err(Error::invalid(format!("checkpoint is a {}, not a classifier", meta.kind)));
        }
        Ok(Classifier {
            net: ckpt.network()?,
            classes: ckpt.classes.clone(),
            meta,
        })
    }

    fn prepare(&self, pixels: &[f64]) -> Result<Vec<f32>> {
        let n = self.meta.patch_size * self.meta.patch_size;
        if pixels.len() != n {
            return Err(Error::invalid(format!(
                "patch has {} pixels, classifier expects {}x{}",
                pixels.len(),
                self.meta.patch_size,
                self.meta.patch_size
            )));
        }
        Ok(preprocess(pixels, self.meta.input_mean, self.meta.input_scale))
    }

    /// Dirichlet output over the full class list.
    pub fn dirichlet(&self, pixels: &[f64]) -> Result<DirichletOutput> {
        let x = self.prepare(pixels)?;
        let evidence = self.net.predict(&x)?;
        Ok(DirichletOutput::from_evidence(evidence.iter().map(|&e| e as f64).collect()))
    }
}

fn preprocess(pixels: &[f64], mean: f64, scale: f64) -> Vec<f32> {
    pixels.iter().map(|p| ((p - mean) * scale) as f32).collect()
}

fn evaluate(net: &Network<f32>, inputs: &[Vec<f32>], targets: &[usize], lambda: f64) -> Result<(f64, f64, f64, f64)> {
    if inputs.is_empty() {
        return Ok((0.0, 0.0, 0.0, 0.0));
    }
    let k = net.output_shape()[0];
    let (mut loss, mut correct, mut top5, mut unc) = (0.0, 0usize, 0usize, 0.0);
    for (x, &y) in inputs.iter().zip(targets) {
        let out = DirichletOutput::from_evidence(net.predict(x)?.iter().map(|&e| e as f64).collect());
        let mut t = vec![0.0; k];
        t[y] = 1.0;
        loss += edl_loss(&out.alpha, &t, lambda)?;
        let rank = out.p_hat.iter().enumerate().filter(|&(j, &p)| p > out.p_hat[y] || (p == out.p_hat[y] && j < y)).count();
        correct += (rank == 0) as usize;
        top5 += (rank < 5) as usize;
        unc += out.uncertainty;
    }
    let n = inputs.len() as f64;
    Ok((loss / n, correct as f64 / n, top5 as f64 / n, unc / n))
}

/// Trains an evidential classifier over `classes` (output channel `j`
/// scores `classes[j]`). A warm start must cover a prefix of `classes`;
/// missing trailing classes get freshly appended output channels.
pub fn train_classifier(
    train: &[LabeledPatch],
    val: &[LabeledPatch],
    classes: &[u32],
    patch_size: usize,
    cfg: &TrainConfig,
    warm_start: Option<&Checkpoint>,
) -> Result<(Checkpoint, Vec<EpochMetrics>)> {
    if classes.len() < 2 {
        return Err(Error::invalid("a classifier needs at least two classes"));
    }
    if cfg.anneal_epochs < 1 || cfg.batch_size < 1 {
        return Err(Error::invalid("anneal_epochs and batch_size must be at least 1"));
    }
    if train.is_empty() {
        return Err(Error::invalid("empty training set"));
    }
    let index_of = |label: u32| -> Result<usize> {
        classes
            .iter()
            .position(|&c| c == label)
            .ok_or_else(|| Error::invalid(format!("label {label} is not in the class list")))
    };
    let n_px = patch_size * patch_size;
    for p in train.iter().chain(val) {
        if p.pixels.len() != n_px {
            return Err(Error::invalid("patch size mismatch"));
        }
    }
    // a warm start keeps the normalization its weights were trained under
    let input_mean = match warm_start {
        Some(ckpt) => Classifier::from_checkpoint(ckpt)?.meta.input_mean,
        None => train.iter().flat_map(|p| p.pixels.iter()).sum::<f64>() / (train.len() * n_px) as f64,
    };
    let prep = |set: &[LabeledPatch]| -> Result<(Vec<Vec<f32>>, Vec<usize>)> {
        let xs = set.iter().map(|p| preprocess(&p.pixels, input_mean, INPUT_SCALE)).collect();
        let ys = set.iter().map(|p| index_of(p.label)).collect::<Result<_>>()?;
        Ok((xs, ys))
    };
    let (train_x, train_y) = prep(train)?;
    let (val_x, val_y) = prep(val)?;

    let mut net = match warm_start {
        None => Network::<f32>::build(classifier_spec(patch_size, classes.len(), cfg.width), cfg.seed)?,
        Some(ckpt) => {
            if ckpt.classes.len() > classes.len() || ckpt.classes[..] != classes[..ckpt.classes.len()] {
                return Err(Error::invalid("warm-start class list must be a prefix of the new class list"));
            }
            let mut net = ckpt.network()?;
            for extra in ckpt.classes.len()..classes.len() {
                net.append_output_channel(cfg.seed.wrapping_add(extra as u64), false)?;
            }
            seed_prototypes(&mut net, &train_x, &train_y, ckpt.classes.len())?;
            net
        }
    };
    if net.input_shape() != [1, patch_size, patch_size] {
        return Err(Error::invalid("warm-start network has a different input size"));
    }

    let k = classes.len();
    let mut adam = AdamState::new(&net, cfg.lr);
    let mut order: Vec<usize> = (0..train_x.len()).collect();
    let mut log = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let lambda = (epoch as f64 / cfg.anneal_epochs as f64).min(1.0);
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ (epoch as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15));
        order.shuffle(&mut rng);
        let (mut loss_sum, mut correct) = (0.0, 0usize);
        for batch in order.chunks(cfg.batch_size) {
            let mut grads = net.zero_grads();
            for &i in batch {
                let cache = net.forward_sample(&train_x[i])?;
                let out = DirichletOutput::from_evidence(cache.output().iter().map(|&e| e as f64).collect());
                let mut t = vec![0.0; k];
                t[train_y[i]] = 1.0;
                let (loss, g) = edl_loss_grad(&out.alpha, &t, lambda)?;
                loss_sum += loss;
                let best = (0..k).fold(0, |b, j| if out.p_hat[j] > out.p_hat[b] { j } else { b });
                correct += (best == train_y[i]) as usize;
                let upstream: Vec<f32> = g.iter().map(|v| (v / batch.len() as f64) as f32).collect();
                net.backward_sample(&cache, &upstream, &mut grads)?;
            }
            net.apply_adam(&grads, &mut adam)?;
        }
        let (val_loss, val_acc, val_top5, val_unc) = evaluate(&net, &val_x, &val_y, lambda)?;
        let m = EpochMetrics {
            epoch,
            lambda,
            train_loss: loss_sum / train_x.len() as f64,
            train_accuracy: correct as f64 / train_x.len() as f64,
            val_loss,
            val_accuracy: val_acc,
            val_top5_accuracy: val_top5,
            val_mean_uncertainty: val_unc,
        };
        log::info!(
            "epoch {epoch}: loss {:.4} acc {:.3} val_acc {:.3} val_u {:.3}",
            m.train_loss,
            m.train_accuracy,
            m.val_accuracy,
            m.val_mean_uncertainty
        );
        log.push(m);
        if cfg.stop_at_accuracy.is_some_and(|target| !val_x.is_empty() && val_acc >= target) {
            break;
        }
    }

    let meta = ClassifierMeta {
        kind: "classifier".into(),
        patch_size,
        input_mean,
        input_scale: INPUT_SCALE,
    };
    Ok((
        Checkpoint::from_network(&net, cfg.seed, classes.to_vec(), serde_json::to_value(meta)?),
        log,
    ))
}

/// Places the prototype of every class index `≥ first` at the mean pooled
/// feature of its training patches. A randomly placed prototype sits far from
/// all features, where the clamped exponential head passes no gradient.
fn seed_prototypes(net: &mut Network<f32>, xs: &[Vec<f32>], ys: &[usize], first: usize) -> Result<()> {
    let Some(node) = net.spec.nodes.iter().position(|n| matches!(n.layer, LayerSpec::Prototype { .. })) else {
        return Ok(());
    };
    let slot = net.spec.nodes[node].inputs[0];
    let wi = net
        .param_index(&format!("{}.weight", net.spec.nodes[node].name))
        .ok_or_else(|| Error::invalid("prototype layer has no weights"))?;
    let dim = net.params[wi].shape[1];
    let mut sums = vec![vec![0.0f64; dim]; net.params[wi].shape[0]];
    let mut counts = vec![0usize; sums.len()];
    for (x, &y) in xs.iter().zip(ys) {
        if y < first {
            continue;
        }
        let cache = net.forward_sample(x)?;
        for (s, &f) in sums[y].iter_mut().zip(cache.slot(slot)) {
            *s += f as f64;
        }
        counts[y] += 1;
    }
    let w = &mut net.params[wi].data;
    for (j, (sum, &n)) in sums.iter().zip(&counts).enumerate().skip(first) {
        if n > 0 {
            for (dst, s) in w[j * dim..(j + 1) * dim].iter_mut().zip(sum) {
                *dst = (s / n as f64) as f32;
            }
        }
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub class: u32,
    pub p: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankedPrediction {
    pub patch_id: String,
    pub candidates: Vec<Candidate>,
    pub uncertainty: f64,
    pub novel: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prior_subset: Option<Vec<u32>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassifyOptions {
    pub k_prime: usize,
    pub prior_subset: Option<Vec<u32>>,
    pub tau_u: f64,
}

impl Default for ClassifyOptions {
    fn default() -> Self {
        ClassifyOptions {
            k_prime: DEFAULT_K_PRIME,
            prior_subset: None,
            tau_u: DEFAULT_TAU_U,
        }
    }
}

/// Ranks classes for one patch. With a prior subset, probabilities are
/// renormalized over the subset; the uncertainty always comes from the
/// unrestricted output.
pub fn rank_output(out: &DirichletOutput, classes: &[u32], patch_id: &str, opts: &ClassifyOptions) -> Result<RankedPrediction> {
    let allowed: Vec<usize> = match &opts.prior_subset {
        None => (0..classes.len()).collect(),
        Some(subset) => {
            if subset.is_empty() {
                return Err(Error::invalid("prior subset is empty"));
            }
            let idx: Vec<usize> = (0..classes.len()).filter(|&j| subset.contains(&classes[j])).collect();
            if idx.is_empty() {
                return Err(Error::invalid("prior subset matches no known class"));
            }
            idx
        }
    };
    let mass: f64 = allowed.iter().map(|&j| out.p_hat[j]).sum();
    let mut candidates: Vec<Candidate> = allowed
        .iter()
        .map(|&j| Candidate {
            class: classes[j],
            p: out.p_hat[j] / mass,
        })
        .collect();
    candidates.sort_by(|a, b| b.p.total_cmp(&a.p).then(a.class.cmp(&b.class)));
    candidates.truncate(opts.k_prime.max(1));
    Ok(RankedPrediction {
        patch_id: patch_id.to_string(),
        candidates,
        uncertainty: out.uncertainty,
        novel: out.uncertainty > opts.tau_u,
        prior_subset: opts.prior_subset.clone(),
    })
}

pub fn classify_patch(model: &Classifier, patch_id: &str, pixels: &[f64], opts: &ClassifyOptions) -> Result<RankedPrediction> {
    let out = model.dirichlet(pixels)?;
    rank_output(&out, &model.classes, patch_id, opts)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "decision", content = "class", rename_all = "snake_case")]
pub enum Novelty {
    Existing(u32),
    Novel,
}

/// Novel iff the uncertainty strictly exceeds `tau_u`.
pub fn novelty_decision(pred: &RankedPrediction, tau_u: f64) -> Novelty {
    if pred.uncertainty > tau_u || pred.candidates.is_empty() {
        Novelty::Novel
    } else {
        Novelty::Existing(pred.candidates[0].class)
    }
}
