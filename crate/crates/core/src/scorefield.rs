//! Per-pixel Fisher score vectors of a fitted pixel predictor.
//!
//! Each interior pixel `y` with neighborhood `x` is modeled as
//! `y ~ N(g(x; θ), σ²)`. With σ² held at its estimate, the score is
//! `s = (y − g(x; θ̂)) / σ² · ∇_θ g(x; θ̂)`. At the least-squares fit of the
//! linear predictor these vectors average to zero over the fitted image, so
//! regions whose local texture differs from the global fit show up as
//! nonzero local means. A truncated Gaussian moving average brings those
//! local means out before clustering.

use std::fs;
use std::io::Write;
use std::path::Path;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::imagecore::{check_window, fill_neighbors, neighbor_count, Micrograph, NeighborhoodSample};
use crate::neuralnet::{AdamState, LayerSpec, Network, NetworkSpec, Param};

/// Floor applied to the estimated noise variance.
pub const NOISE_FLOOR: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PredictorSpec {
    Linear,
    Mlp {
        hidden: usize,
        /// Score all parameters instead of only the output layer.
        #[serde(default)]
        full_scores: bool,
        #[serde(default = "default_mlp_epochs")]
        epochs: usize,
    },
}

fn default_mlp_epochs() -> usize {
    30
}

impl PredictorSpec {
    pub fn mlp(hidden: usize) -> Self {
        PredictorSpec::Mlp {
            hidden,
            full_scores: false,
            epochs: default_mlp_epochs(),
        }
    }
}

/// Affine input/output normalization of the MLP predictor.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MlpScaling {
    pub input_center: f64,
    pub input_scale: f64,
    pub output_center: f64,
    pub output_scale: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PixelPredictor {
    pub spec: PredictorSpec,
    /// Linear: neighbor weights followed by the intercept. MLP: hidden
    /// weights, hidden biases, output weights, output bias.
    pub parameters: Vec<f64>,
    pub noise_variance: f64,
    pub half_width: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scaling: Option<MlpScaling>,
}

fn mlp_spec(inputs: usize, hidden: usize) -> NetworkSpec {
    let mut spec = NetworkSpec::new(vec![inputs]);
    spec.push("hidden", LayerSpec::Dense { out: hidden });
    spec.push("act", LayerSpec::Relu);
    spec.push("out", LayerSpec::Dense { out: 1 });
    spec
}

impl PixelPredictor {
    pub fn param_count(&self) -> usize {
        self.parameters.len()
    }

    /// Length of the score vectors this predictor produces.
    pub fn score_dim(&self) -> usize {
        match self.spec {
            PredictorSpec::Linear => self.parameters.len(),
            PredictorSpec::Mlp {
                hidden, full_scores, ..
            } => {
                if full_scores {
                    self.parameters.len()
                } else {
                    hidden + 1
                }
            }
        }
    }

    fn mlp_network(&self) -> Result<Network<f64>> {
        let PredictorSpec::Mlp { hidden, .. } = self.spec else {
            return Err(Error::invalid("not an mlp predictor"));
        };
        let n = neighbor_count(self.half_width);
        let sizes = [(vec![hidden, n], "hidden.weight"), (vec![hidden], "hidden.bias"), (vec![1, hidden], "out.weight"), (vec![1], "out.bias")];
        let mut params = Vec::with_capacity(4);
        let mut offset = 0;
        for (shape, name) in sizes {
            let len: usize = shape.iter().product();
            params.push(Param {
                name: name.to_string(),
                shape,
                data: self.parameters[offset..offset + len].to_vec(),
            });
            offset += len;
        }
        Network::from_parts(mlp_spec(n, hidden), params)
    }

    /// Prediction `g(x; θ̂)` in pixel units.
    pub fn predict(&self, neighbors: &[f64]) -> Result<f64> {
        Ok(self.evaluator()?.predict(neighbors))
    }

    fn evaluator(&self) -> Result<Evaluator<'_>> {
        Ok(match self.spec {
            PredictorSpec::Linear => Evaluator::Linear(&self.parameters),
            PredictorSpec::Mlp { full_scores, .. } => Evaluator::Mlp {
                net: self.mlp_network()?,
                scaling: self.scaling.clone().ok_or_else(|| Error::invalid("mlp predictor lacks scaling"))?,
                full: full_scores,
            },
        })
    }

    /// Content hash identifying this fitted predictor.
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        h.update(serde_json::to_vec(&self.spec).unwrap_or_default());
        h.update((self.half_width as u64).to_le_bytes());
        for v in &self.parameters {
            h.update(v.to_le_bytes());
        }
        h.update(self.noise_variance.to_le_bytes());
        hex::encode(h.finalize())
    }
}

enum Evaluator<'a> {
    Linear(&'a [f64]),
    Mlp {
        net: Network<f64>,
        scaling: MlpScaling,
        full: bool,
    },
}

impl Evaluator<'_> {
    fn normalized(scaling: &MlpScaling, x: &[f64]) -> Vec<f64> {
        x.iter()
            .map(|v| (v - scaling.input_center) / scaling.input_scale)
            .collect()
    }

    fn predict(&self, x: &[f64]) -> f64 {
        match self {
            Evaluator::Linear(p) => {
                let n = x.len();
                p[n] + p[..n].iter().zip(x).map(|(w, v)| w * v).sum::<f64>()
            }
            Evaluator::Mlp { net, scaling, .. } => {
                let out = net.predict(&Self::normalized(scaling, x)).unwrap()[0];
                out * scaling.output_scale + scaling.output_center
            }
        }
    }

    /// Prediction and `∇_θ g` restricted to the scored parameters.
    fn predict_with_gradient(&self, x: &[f64], grad: &mut Vec<f64>) -> f64 {
        grad.clear();
        match self {
            Evaluator::Linear(p) => {
                grad.extend_from_slice(x);
                grad.push(1.0);
                let n = x.len();
                p[n] + p[..n].iter().zip(x).map(|(w, v)| w * v).sum::<f64>()
            }
            Evaluator::Mlp { net, scaling, full } => {
                let cache = net.forward_sample(&Self::normalized(scaling, x)).unwrap();
                let out = cache.output()[0];
                let s = scaling.output_scale;
                if *full {
                    let mut grads = net.zero_grads();
                    net.backward_sample(&cache, &[1.0], &mut grads).unwrap();
                    grad.extend(grads.iter().flatten().map(|g| g * s));
                } else {
                    // d out / d w_out = hidden activation, d out / d b_out = 1
                    let mut grads = net.zero_grads();
                    net.backward_sample(&cache, &[1.0], &mut grads).unwrap();
                    grad.extend(grads[2].iter().map(|g| g * s));
                    grad.push(grads[3][0] * s);
                }
                out * s + scaling.output_center
            }
        }
    }
}

/// Fits the pixel predictor to neighborhood samples.
///
/// The linear predictor is solved in closed form on centered normal
/// equations with a minimum-norm pseudo-inverse; the MLP is trained with
/// Adam for a fixed epoch budget. `noise_variance` is the mean squared
/// residual, floored at [`NOISE_FLOOR`].
pub fn fit_predictor(samples: &[NeighborhoodSample], spec: &PredictorSpec, seed: u64) -> Result<PixelPredictor> {
    let first = samples.first().ok_or_else(|| Error::invalid("no samples to fit"))?;
    let n_feat = first.neighbors.len();
    let half_width = ((((n_feat + 1) as f64).sqrt() as usize).saturating_sub(1)) / 2;
    if neighbor_count(half_width) != n_feat || samples.iter().any(|s| s.neighbors.len() != n_feat) {
        return Err(Error::invalid("neighbor vectors must share one square window size"));
    }
    let mut predictor = match spec {
        PredictorSpec::Linear => fit_linear(samples, n_feat, half_width)?,
        PredictorSpec::Mlp { hidden, epochs, .. } => fit_mlp(samples, spec.clone(), *hidden, *epochs, half_width, seed)?,
    };
    let params = predictor.param_count();
    if samples.len() < 2 * params {
        log::warn!(
            "fitting {} parameters to only {} samples; estimates may be unstable",
            params,
            samples.len()
        );
    }
    let eval = predictor.evaluator()?;
    let mse = samples
        .iter()
        .map(|s| (s.target - eval.predict(&s.neighbors)).powi(2))
        .sum::<f64>()
        / samples.len() as f64;
    predictor.noise_variance = mse.max(NOISE_FLOOR);
    Ok(predictor)
}

fn fit_linear(samples: &[NeighborhoodSample], n_feat: usize, half_width: usize) -> Result<PixelPredictor> {
    let n = samples.len() as f64;
    let mut mean_x = vec![0.0; n_feat];
    let mut mean_y = 0.0;
    for s in samples {
        mean_y += s.target;
        for (m, v) in mean_x.iter_mut().zip(&s.neighbors) {
            *m += v;
        }
    }
    mean_y /= n;
    mean_x.iter_mut().for_each(|m| *m /= n);

    let mut gram = DMatrix::<f64>::zeros(n_feat, n_feat);
    let mut rhs = DVector::<f64>::zeros(n_feat);
    let mut centered = vec![0.0; n_feat];
    for s in samples {
        for (c, (v, m)) in centered.iter_mut().zip(s.neighbors.iter().zip(&mean_x)) {
            *c = v - m;
        }
        let dy = s.target - mean_y;
        for i in 0..n_feat {
            let ci = centered[i];
            rhs[i] += ci * dy;
            let col = gram.column_mut(i);
            // lower triangle only
            for (j, g) in col.into_iter().enumerate().skip(i) {
                *g += ci * centered[j];
            }
        }
    }
    gram.fill_upper_triangle_with_lower_triangle();

    let eig = SymmetricEigen::new(gram.clone());
    let max_eig = eig.eigenvalues.iter().fold(0.0f64, |a, &b| a.max(b.abs()));
    let cutoff = max_eig * 1e-12 * n_feat as f64;
    let pinv_apply = |v: &DVector<f64>| -> DVector<f64> {
        let mut out = DVector::zeros(n_feat);
        for (k, &lambda) in eig.eigenvalues.iter().enumerate() {
            if lambda > cutoff && lambda > 0.0 {
                let u = eig.eigenvectors.column(k);
                out += u * (u.dot(v) / lambda);
            }
        }
        out
    };
    let mut weights = pinv_apply(&rhs);
    // one round of iterative refinement against the normal equations
    let residual = &rhs - &gram * &weights;
    weights += pinv_apply(&residual);

    let intercept = mean_y - weights.iter().zip(&mean_x).map(|(w, m)| w * m).sum::<f64>();
    let mut parameters: Vec<f64> = weights.iter().copied().collect();
    parameters.push(intercept);
    Ok(PixelPredictor {
        spec: PredictorSpec::Linear,
        parameters,
        noise_variance: 1.0,
        half_width,
        scaling: None,
    })
}

fn fit_mlp(
    samples: &[NeighborhoodSample],
    spec: PredictorSpec,
    hidden: usize,
    epochs: usize,
    half_width: usize,
    seed: u64,
) -> Result<PixelPredictor> {
    if hidden == 0 {
        return Err(Error::invalid("mlp needs at least one hidden unit"));
    }
    let n_feat = samples[0].neighbors.len();
    let n = samples.len() as f64;
    let mean_y = samples.iter().map(|s| s.target).sum::<f64>() / n;
    let sd_y = (samples.iter().map(|s| (s.target - mean_y).powi(2)).sum::<f64>() / n)
        .sqrt()
        .max(1e-6);
    let mean_x = samples.iter().flat_map(|s| s.neighbors.iter()).sum::<f64>() / (n * n_feat as f64);
    let sd_x = (samples
        .iter()
        .flat_map(|s| s.neighbors.iter())
        .map(|v| (v - mean_x).powi(2))
        .sum::<f64>()
        / (n * n_feat as f64))
        .sqrt()
        .max(1e-6);
    let scaling = MlpScaling {
        input_center: mean_x,
        input_scale: sd_x,
        output_center: mean_y,
        output_scale: sd_y,
    };

    let inputs: Vec<Vec<f64>> = samples
        .iter()
        .map(|s| Evaluator::normalized(&scaling, &s.neighbors))
        .collect();
    let targets: Vec<f64> = samples.iter().map(|s| (s.target - mean_y) / sd_y).collect();

    let mut net = Network::<f64>::build(mlp_spec(n_feat, hidden), seed)?;
    // a modest output init keeps early predictions near the mean
    let out_w = net.param_index("out.weight").unwrap();
    net.params[out_w].data.iter_mut().for_each(|w| *w *= 0.1);
    let mut adam = AdamState::new(&net, 3e-3);
    let mut order: Vec<usize> = (0..inputs.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    const BATCH: usize = 32;
    for epoch in 0..epochs {
        if epoch == epochs * 2 / 3 {
            adam.lr *= 0.3;
        }
        order.shuffle(&mut rng);
        for chunk in order.chunks(BATCH) {
            let mut grads = net.zero_grads();
            for &i in chunk {
                let cache = net.forward_sample(&inputs[i])?;
                let err = (cache.output()[0] - targets[i]) / chunk.len() as f64;
                net.backward_sample(&cache, &[err], &mut grads)?;
            }
            net.apply_adam(&grads, &mut adam)?;
        }
    }
    Ok(PixelPredictor {
        spec,
        parameters: net.flat_params(),
        noise_variance: 1.0,
        half_width,
        scaling: Some(scaling),
    })
}

/// PCA projection applied to a score field.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Projection {
    pub mean: Vec<f64>,
    /// Row-major `n_components × input_dim`.
    pub components: Vec<f64>,
    pub input_dim: usize,
    pub explained_variance_ratio: Vec<f64>,
}

/// Score vectors on the valid interior of a micrograph.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreField {
    /// Dimensions of the source micrograph.
    pub width: usize,
    pub height: usize,
    /// Pixels closer than this to any edge carry no vector.
    pub border: usize,
    pub dim: usize,
    pub half_width: usize,
    pub smoothing_half_width: usize,
    pub smoothed: bool,
    pub kernel_sigma: f64,
    pub predictor_hash: String,
    pub projection: Option<Projection>,
    /// Row-major vectors over the valid interior, `dim` values each.
    #[serde(skip)]
    pub data: Vec<f64>,
}

impl ScoreField {
    pub fn valid_width(&self) -> usize {
        self.width - 2 * self.border
    }

    pub fn valid_height(&self) -> usize {
        self.height - 2 * self.border
    }

    pub fn len(&self) -> usize {
        self.valid_width() * self.valid_height()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Vector at image coordinates, if inside the valid interior.
    pub fn get(&self, row: usize, col: usize) -> Option<&[f64]> {
        let b = self.border;
        if row < b || col < b || row >= self.height - b || col >= self.width - b {
            return None;
        }
        let i = (row - b) * self.valid_width() + (col - b);
        Some(&self.data[i * self.dim..(i + 1) * self.dim])
    }

    /// Vectors in raster order of the valid interior.
    pub fn vectors(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks(self.dim)
    }

    /// Mean vector over the valid interior.
    pub fn mean(&self) -> Vec<f64> {
        let mut mean = vec![0.0; self.dim];
        for v in self.vectors() {
            for (m, x) in mean.iter_mut().zip(v) {
                *m += x;
            }
        }
        let n = self.len() as f64;
        mean.iter_mut().for_each(|m| *m /= n);
        mean
    }

    /// Vectors on every `stride`-th row and column of the valid interior.
    /// Smoothed neighbours are strongly correlated, so a grid about one
    /// window apart gives a sample whose size reflects the real evidence.
    pub fn subsample(&self, stride: usize) -> Vec<f64> {
        let stride = stride.max(1);
        let vw = self.valid_width();
        let mut out = Vec::new();
        for r in (0..self.valid_height()).step_by(stride) {
            for c in (0..vw).step_by(stride) {
                let i = (r * vw + c) * self.dim;
                out.extend_from_slice(&self.data[i..i + self.dim]);
            }
        }
        out
    }
}

/// Raw score field of `m` under predictor `p` (valid border `l_s`).
pub fn compute_scores(m: &Micrograph, p: &PixelPredictor) -> Result<ScoreField> {
    let l = p.half_width;
    check_window(m, l)?;
    let expected = match p.spec {
        PredictorSpec::Linear => neighbor_count(l) + 1,
        PredictorSpec::Mlp { hidden, .. } => hidden * (neighbor_count(l) + 2) + 1,
    };
    if p.parameters.len() != expected {
        return Err(Error::invalid(format!(
            "predictor has {} parameters, half-width {l} implies {expected}",
            p.parameters.len()
        )));
    }
    let eval = p.evaluator()?;
    let dim = p.score_dim();
    let inv_var = 1.0 / p.noise_variance;
    let (vw, vh) = (m.width - 2 * l, m.height - 2 * l);
    let mut data = Vec::with_capacity(vw * vh * dim);
    let mut neighbors = Vec::with_capacity(neighbor_count(l));
    let mut grad = Vec::with_capacity(dim);
    for row in l..m.height - l {
        for col in l..m.width - l {
            fill_neighbors(m, l, row, col, &mut neighbors);
            let pred = eval.predict_with_gradient(&neighbors, &mut grad);
            let scale = (m.get(row, col) - pred) * inv_var;
            data.extend(grad.iter().map(|g| g * scale));
        }
    }
    Ok(ScoreField {
        width: m.width,
        height: m.height,
        border: l,
        dim,
        half_width: l,
        smoothing_half_width: 0,
        smoothed: false,
        kernel_sigma: 0.0,
        predictor_hash: p.hash(),
        projection: None,
        data,
    })
}

/// One axis of the truncated Gaussian, normalized to sum to 1.
fn gaussian_taps(half_width: usize, sigma: f64) -> Vec<f64> {
    let l = half_width as isize;
    let taps: Vec<f64> = (-l..=l)
        .map(|d| (-(d * d) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f64 = taps.iter().sum();
    taps.into_iter().map(|t| t / total).collect()
}

/// The isotropic 2-D Gaussian truncated to the `(2·l_w+1)²` window and
/// renormalized, row-major.
pub fn gaussian_kernel(half_width: usize, sigma: f64) -> Vec<f64> {
    let taps = gaussian_taps(half_width, sigma);
    taps.iter().flat_map(|a| taps.iter().map(move |b| a * b)).collect()
}

/// Default smoothing bandwidth for a window half-width.
pub fn default_kernel_sigma(half_width: usize) -> f64 {
    (half_width as f64 / 2.0).max(0.5)
}

/// Gaussian weighted moving average of a raw field. The window is
/// separable, so it is applied along rows and then columns.
pub fn smooth_scores(f: &ScoreField, half_width: usize, kernel_sigma: f64) -> Result<ScoreField> {
    if f.smoothed {
        return Err(Error::invalid("field is already smoothed"));
    }
    if !(kernel_sigma.is_finite() && kernel_sigma > 0.0) {
        return Err(Error::invalid("kernel sigma must be positive"));
    }
    let (vw, vh, d) = (f.valid_width(), f.valid_height(), f.dim);
    if vw <= 2 * half_width || vh <= 2 * half_width {
        return Err(Error::invalid(format!(
            "smoothing window {} exceeds the {}x{} valid score area",
            2 * half_width + 1,
            vw,
            vh
        )));
    }
    let taps = gaussian_taps(half_width, kernel_sigma);
    let l = half_width;
    let (ow, oh) = (vw - 2 * l, vh - 2 * l);
    // horizontal pass: vh rows × ow cols
    let mut horiz = vec![0.0; vh * ow * d];
    for r in 0..vh {
        for c in 0..ow {
            let dst = &mut horiz[(r * ow + c) * d..(r * ow + c + 1) * d];
            for (t, &w) in taps.iter().enumerate() {
                let src = &f.data[(r * vw + c + t) * d..(r * vw + c + t + 1) * d];
                for (o, s) in dst.iter_mut().zip(src) {
                    *o += w * s;
                }
            }
        }
    }
    let mut data = vec![0.0; oh * ow * d];
    for r in 0..oh {
        for c in 0..ow {
            let dst = &mut data[(r * ow + c) * d..(r * ow + c + 1) * d];
            for (t, &w) in taps.iter().enumerate() {
                let src = &horiz[((r + t) * ow + c) * d..((r + t) * ow + c + 1) * d];
                for (o, s) in dst.iter_mut().zip(src) {
                    *o += w * s;
                }
            }
        }
    }
    Ok(ScoreField {
        border: f.border + l,
        smoothing_half_width: l,
        smoothed: true,
        kernel_sigma,
        data,
        ..f.clone()
    })
}

/// Projects the field onto its leading principal components.
pub fn reduce_scores(f: &ScoreField, n_components: usize) -> Result<ScoreField> {
    if n_components < 1 {
        return Err(Error::invalid("n_components must be at least 1"));
    }
    if n_components > f.dim {
        return Err(Error::invalid(format!(
            "n_components {n_components} exceeds score dimension {}",
            f.dim
        )));
    }
    let d = f.dim;
    let mean = f.mean();
    let mut cov = DMatrix::<f64>::zeros(d, d);
    let mut centered = vec![0.0; d];
    for v in f.vectors() {
        for (c, (x, m)) in centered.iter_mut().zip(v.iter().zip(&mean)) {
            *c = x - m;
        }
        for i in 0..d {
            let ci = centered[i];
            for j in i..d {
                cov[(j, i)] += ci * centered[j];
            }
        }
    }
    cov.fill_upper_triangle_with_lower_triangle();
    cov /= (f.len().max(2) - 1) as f64;
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));
    let total: f64 = eig.eigenvalues.iter().map(|v| v.max(0.0)).sum();
    let mut components = Vec::with_capacity(n_components * d);
    let mut explained = Vec::with_capacity(n_components);
    for &k in order.iter().take(n_components) {
        let col = eig.eigenvectors.column(k);
        // sign convention: largest-magnitude entry positive
        let pivot = col.iter().copied().fold(0.0f64, |a, b| if b.abs() > a.abs() { b } else { a });
        let sign = if pivot < 0.0 { -1.0 } else { 1.0 };
        components.extend(col.iter().map(|v| v * sign));
        explained.push(if total > 0.0 { eig.eigenvalues[k].max(0.0) / total } else { 0.0 });
    }
    let mut data = Vec::with_capacity(f.len() * n_components);
    for v in f.vectors() {
        for comp in components.chunks(d) {
            data.push(comp.iter().zip(v.iter().zip(&mean)).map(|(c, (x, m))| c * (x - m)).sum());
        }
    }
    Ok(ScoreField {
        dim: n_components,
        projection: Some(Projection {
            mean,
            components,
            input_dim: d,
            explained_variance_ratio: explained,
        }),
        data,
        ..f.clone()
    })
}

const FIELD_MAGIC: &[u8; 6] = b"MCSF1\n";

/// Writes the field: magic, `u32` LE header length, JSON header, then the
/// vectors as little-endian `f64`.
pub fn save_score_field(f: &ScoreField, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let header = serde_json::to_vec(f)?;
    let mut out = Vec::with_capacity(10 + header.len() + f.data.len() * 8);
    out.write_all(FIELD_MAGIC).unwrap();
    out.extend_from_slice(&(header.len() as u32).to_le_bytes());
    out.extend_from_slice(&header);
    for v in &f.data {
        out.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn load_score_field(path: impl AsRef<Path>) -> Result<ScoreField> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() < 10 || &bytes[..6] != FIELD_MAGIC {
        return Err(Error::Malformed("not a score field file".into()));
    }
    let hlen = u32::from_le_bytes([bytes[6], bytes[7], bytes[8], bytes[9]]) as usize;
    let body = bytes
        .get(10..10 + hlen)
        .ok_or_else(|| Error::Malformed("score field header truncated".into()))?;
    let mut f: ScoreField = serde_json::from_slice(body)?;
    let raw = &bytes[10 + hlen..];
    if raw.len() != f.len() * f.dim * 8 {
        return Err(Error::Malformed("score field data length mismatch".into()));
    }
    f.data = raw
        .chunks_exact(8)
        .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
        .collect();
    Ok(f)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::imagecore::extract_neighborhoods;
    use rand::Rng;

    fn noise_image(w: usize, h: usize, seed: u64) -> Micrograph {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let px = (0..w * h).map(|_| rng.random_range(0..=255u8) as f64).collect();
        Micrograph::new(w, h, px, "noise").unwrap()
    }

    #[test]
    fn constant_image_exact_fit() {
        let m = Micrograph::new(12, 12, vec![100.0; 144], "flat").unwrap();
        let samples = extract_neighborhoods(&m, 1).unwrap();
        let p = fit_predictor(&samples, &PredictorSpec::Linear, 0).unwrap();
        assert!(p.parameters[..8].iter().all(|w| w.abs() < 1e-12));
        assert!((p.parameters[8] - 100.0).abs() < 1e-9);
        assert_eq!(p.noise_variance, NOISE_FLOOR);
        let f = compute_scores(&m, &p).unwrap();
        assert!(f.data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn noiseless_linear_relation_recovered() {
        // y = 0.5·x₁ + 10 with the other neighbors independent noise
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let samples: Vec<NeighborhoodSample> = (0..400)
            .map(|i| {
                let neighbors: Vec<f64> = (0..8).map(|_| rng.random_range(0.0..255.0)).collect();
                NeighborhoodSample {
                    target: 0.5 * neighbors[0] + 10.0,
                    neighbors,
                    row: i,
                    col: 0,
                }
            })
            .collect();
        let p = fit_predictor(&samples, &PredictorSpec::Linear, 0).unwrap();
        assert!((p.parameters[0] - 0.5).abs() < 1e-8);
        assert!(p.parameters[1..8].iter().all(|w| w.abs() < 1e-8));
        assert!((p.parameters[8] - 10.0).abs() < 1e-8);
    }

    #[test]
    fn linear_scores_are_zero_mean_at_fit() {
        let m = noise_image(40, 36, 3);
        let samples = extract_neighborhoods(&m, 2).unwrap();
        let p = fit_predictor(&samples, &PredictorSpec::Linear, 0).unwrap();
        let f = compute_scores(&m, &p).unwrap();
        assert_eq!(f.dim, 25);
        assert_eq!(f.border, 2);
        let worst = f.mean().iter().fold(0.0f64, |a, b| a.max(b.abs()));
        assert!(worst <= 1e-8, "{worst}");
    }

    #[test]
    fn one_parameter_score_by_hand() {
        // g = θ·x with θ̂ = 1, σ² = 1, sample (y = 2, x = 1) → score 1
        let p = PixelPredictor {
            spec: PredictorSpec::Linear,
            parameters: vec![1.0, 0.0],
            noise_variance: 1.0,
            half_width: 0,
            scaling: None,
        };
        let eval = p.evaluator().unwrap();
        let mut grad = Vec::new();
        let pred = eval.predict_with_gradient(&[1.0], &mut grad);
        assert_eq!((2.0 - pred) / p.noise_variance * grad[0], 1.0);
    }

    #[test]
    fn mismatched_half_width_rejected() {
        let m = noise_image(20, 20, 1);
        let samples = extract_neighborhoods(&m, 1).unwrap();
        let mut p = fit_predictor(&samples, &PredictorSpec::Linear, 0).unwrap();
        p.half_width = 2;
        assert!(compute_scores(&m, &p).is_err());
    }

    #[test]
    fn smoothing_identity_and_constants() {
        let m = noise_image(30, 30, 5);
        let samples = extract_neighborhoods(&m, 1).unwrap();
        let p = fit_predictor(&samples, &PredictorSpec::Linear, 0).unwrap();
        let raw = compute_scores(&m, &p).unwrap();
        let same = smooth_scores(&raw, 0, 1.0).unwrap();
        assert_eq!(same.data, raw.data);
        assert_eq!(same.border, raw.border);

        let mut flat = raw.clone();
        let v: Vec<f64> = (0..flat.dim).map(|i| i as f64 * 0.25 - 1.0).collect();
        for chunk in flat.data.chunks_mut(v.len()) {
            chunk.copy_from_slice(&v);
        }
        let sm = smooth_scores(&flat, 4, 2.0).unwrap();
        assert_eq!(sm.border, 1 + 4);
        for got in sm.vectors() {
            for (a, b) in got.iter().zip(&v) {
                assert!((a - b).abs() < 1e-12);
            }
        }
        assert!(smooth_scores(&raw, 14, 7.0).is_err());
    }

    #[test]
    fn kernel_normalized() {
        let k = gaussian_kernel(20, 10.0);
        assert_eq!(k.len(), 41 * 41);
        assert!((k.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(k.iter().all(|&w| w > 0.0));
    }

    #[test]
    fn smoothing_matches_direct_window_sum() {
        let m = noise_image(24, 20, 9);
        let samples = extract_neighborhoods(&m, 1).unwrap();
        let p = fit_predictor(&samples, &PredictorSpec::Linear, 0).unwrap();
        let raw = compute_scores(&m, &p).unwrap();
        let (l, sigma) = (3, 1.5);
        let sm = smooth_scores(&raw, l, sigma).unwrap();
        let k = gaussian_kernel(l, sigma);
        let (r, c) = (9, 11);
        let mut direct = vec![0.0; raw.dim];
        for dr in 0..2 * l + 1 {
            for dc in 0..2 * l + 1 {
                let v = raw.get(r + dr - l, c + dc - l).unwrap();
                for (o, x) in direct.iter_mut().zip(v) {
                    *o += k[dr * (2 * l + 1) + dc] * x;
                }
            }
        }
        for (a, b) in sm.get(r, c).unwrap().iter().zip(&direct) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn full_rank_projection_preserves_distances() {
        let m = noise_image(20, 20, 4);
        let samples = extract_neighborhoods(&m, 1).unwrap();
        let p = fit_predictor(&samples, &PredictorSpec::Linear, 0).unwrap();
        let raw = compute_scores(&m, &p).unwrap();
        let red = reduce_scores(&raw, raw.dim).unwrap();
        let a: Vec<&[f64]> = raw.vectors().collect();
        let b: Vec<&[f64]> = red.vectors().collect();
        let dist = |x: &[f64], y: &[f64]| x.iter().zip(y).map(|(p, q)| (p - q).powi(2)).sum::<f64>().sqrt();
        for i in (0..a.len()).step_by(7) {
            for j in (0..a.len()).step_by(11) {
                assert!((dist(a[i], a[j]) - dist(b[i], b[j])).abs() < 1e-8);
            }
        }
        assert!(reduce_scores(&raw, 0).is_err());
        assert!(reduce_scores(&raw, raw.dim + 1).is_err());
    }

    #[test]
    fn rank_one_field_keeps_all_variance() {
        let dir = [0.6, -0.8, 0.0];
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let data: Vec<f64> = (0..100)
            .flat_map(|_| {
                let t: f64 = rng.random_range(-3.0..3.0);
                dir.iter().map(move |d| d * t).collect::<Vec<_>>()
            })
            .collect();
        let f = ScoreField {
            width: 10,
            height: 10,
            border: 0,
            dim: 3,
            half_width: 1,
            smoothing_half_width: 0,
            smoothed: false,
            kernel_sigma: 0.0,
            predictor_hash: String::new(),
            projection: None,
            data,
        };
        let red = reduce_scores(&f, 1).unwrap();
        assert!(red.projection.unwrap().explained_variance_ratio[0] >= 0.9999);
    }

    #[test]
    fn field_file_roundtrip_is_bit_exact() {
        let m = noise_image(16, 16, 8);
        let samples = extract_neighborhoods(&m, 1).unwrap();
        let p = fit_predictor(&samples, &PredictorSpec::Linear, 0).unwrap();
        let f = smooth_scores(&compute_scores(&m, &p).unwrap(), 2, 1.0).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("f.scores");
        save_score_field(&f, &path).unwrap();
        let back = load_score_field(&path).unwrap();
        assert_eq!(back, f);
        assert!(back.data.iter().zip(&f.data).all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    #[test]
    fn mlp_gradients_match_finite_differences() {
        let m = noise_image(14, 14, 6);
        let samples = extract_neighborhoods(&m, 1).unwrap();
        for full in [false, true] {
            let spec = PredictorSpec::Mlp {
                hidden: 4,
                full_scores: full,
                epochs: 2,
            };
            let p = fit_predictor(&samples, &spec, 3).unwrap();
            let eval = p.evaluator().unwrap();
            let x = &samples[17].neighbors;
            let mut grad = Vec::new();
            eval.predict_with_gradient(x, &mut grad);
            assert_eq!(grad.len(), p.score_dim());
            let offset = if full { 0 } else { 4 * 8 + 4 };
            for (k, &g) in grad.iter().enumerate() {
                let mut q = p.clone();
                let h = 1e-5;
                q.parameters[offset + k] += h;
                let up = q.predict(x).unwrap();
                q.parameters[offset + k] -= 2.0 * h;
                let down = q.predict(x).unwrap();
                let fd = (up - down) / (2.0 * h);
                let rel = (g - fd).abs() / (g.abs() + fd.abs()).max(1e-8);
                assert!(rel <= 1e-4, "param {k}: {g} vs {fd}");
            }
        }
    }
}
