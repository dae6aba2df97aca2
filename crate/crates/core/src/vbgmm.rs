//! Variational Bayesian Gaussian mixture (Dirichlet prior on weights,
//! Gaussian–Wishart prior on component means and precisions) fitted by
//! coordinate ascent on the evidence lower bound.

use std::f64::consts::{LN_2, PI};
use std::fs;
use std::path::Path;

use nalgebra::{Cholesky, DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use statrs::function::gamma::{digamma, ln_gamma};

use crate::error::{Error, Result};
use crate::imagecore::{LabelMask, UNLABELED};
use crate::scorefield::ScoreField;

/// Settings shared by every fit; data-dependent priors are derived from
/// these by [`BgmHyper::from_data`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BgmSettings {
    pub alpha0: f64,
    pub beta0: f64,
    pub tol: f64,
    pub max_iter: usize,
    pub seed: u64,
    /// Try removing components after convergence (kept only if the
    /// bound improves).
    pub delete_moves: bool,
}

impl Default for BgmSettings {
    fn default() -> Self {
        BgmSettings {
            alpha0: 1e-9,
            beta0: 1.0,
            tol: 1e-6,
            max_iter: 500,
            seed: 0,
            delete_moves: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BgmHyper {
    pub k: usize,
    pub alpha0: f64,
    pub beta0: f64,
    pub mu0: Vec<f64>,
    /// Row-major `d × d`.
    pub w0_inv: Vec<f64>,
    pub nu0: f64,
    pub tol: f64,
    pub max_iter: usize,
    pub seed: u64,
    pub delete_moves: bool,
}

impl BgmHyper {
    /// Empirical priors: `μ₀` the data mean, `W₀⁻¹` the sample covariance
    /// (plus a small ridge), `ν₀ = d`.
    pub fn from_data(data: &[f64], dim: usize, k: usize, settings: &BgmSettings) -> Result<Self> {
        let n = check_data(data, dim)?;
        let mut mean = vec![0.0; dim];
        for x in data.chunks(dim) {
            for (m, v) in mean.iter_mut().zip(x) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n as f64);
        let mut cov = vec![0.0; dim * dim];
        for x in data.chunks(dim) {
            for i in 0..dim {
                let di = x[i] - mean[i];
                for j in 0..=i {
                    cov[i * dim + j] += di * (x[j] - mean[j]);
                }
            }
        }
        let denom = (n.max(2) - 1) as f64;
        for i in 0..dim {
            for j in 0..=i {
                let v = cov[i * dim + j] / denom;
                cov[i * dim + j] = v;
                cov[j * dim + i] = v;
            }
        }
        let trace: f64 = (0..dim).map(|i| cov[i * dim + i]).sum();
        let ridge = (1e-8 * trace / dim as f64).max(1e-300);
        for i in 0..dim {
            cov[i * dim + i] += ridge;
        }
        Ok(BgmHyper {
            k,
            alpha0: settings.alpha0,
            beta0: settings.beta0,
            mu0: mean,
            w0_inv: cov,
            nu0: dim as f64,
            tol: settings.tol,
            max_iter: settings.max_iter,
            seed: settings.seed,
            delete_moves: settings.delete_moves,
        })
    }

    pub fn dim(&self) -> usize {
        self.mu0.len()
    }

    fn validate(&self) -> Result<()> {
        let d = self.dim();
        if self.k == 0 {
            return Err(Error::invalid("K must be at least 1"));
        }
        if !(self.alpha0 > 0.0 && self.beta0 > 0.0) {
            return Err(Error::invalid("alpha0 and beta0 must be positive"));
        }
        if !(self.nu0 >= d as f64) {
            return Err(Error::invalid("nu0 must be at least the dimension"));
        }
        if self.w0_inv.len() != d * d {
            return Err(Error::invalid("W0_inv must be d x d"));
        }
        let m = DMatrix::from_row_slice(d, d, &self.w0_inv);
        if (&m - m.transpose()).abs().max() > 1e-9 * m.abs().max().max(1e-300) || Cholesky::new(m).is_none() {
            return Err(Error::invalid("W0_inv must be symmetric positive definite"));
        }
        Ok(())
    }
}

fn check_data(data: &[f64], dim: usize) -> Result<usize> {
    if dim == 0 || data.is_empty() || data.len() % dim != 0 {
        return Err(Error::invalid("data length must be a positive multiple of the dimension"));
    }
    if data.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numerical("non-finite input vector".into()));
    }
    Ok(data.len() / dim)
}

#[derive(Clone, Debug, PartialEq)]
pub struct MixturePosterior {
    pub dim: usize,
    pub alpha: Vec<f64>,
    pub beta: Vec<f64>,
    /// `K` mean vectors.
    pub means: Vec<Vec<f64>>,
    /// `K` row-major `d × d` Wishart scale matrices.
    pub w: Vec<Vec<f64>>,
    pub nu: Vec<f64>,
    /// Row-major `n × K`.
    pub responsibilities: Vec<f64>,
    pub pi_hat: Vec<f64>,
    pub elbo_trace: Vec<f64>,
    pub converged: bool,
}

impl MixturePosterior {
    pub fn k(&self) -> usize {
        self.alpha.len()
    }

    pub fn n(&self) -> usize {
        self.responsibilities.len() / self.k()
    }

    pub fn responsibility_row(&self, i: usize) -> &[f64] {
        let k = self.k();
        &self.responsibilities[i * k..(i + 1) * k]
    }

    /// Posterior-predictive responsibilities for new vectors.
    pub fn assign(&self, data: &[f64]) -> Result<Vec<f64>> {
        check_data(data, self.dim)?;
        let comps = Components::from_posterior(self)?;
        Ok(comps.responsibilities(data, self.dim))
    }

    /// The same posterior with responsibilities recomputed for `data`, e.g.
    /// every pixel of a field after fitting on a subsample.
    pub fn reassigned(&self, data: &[f64]) -> Result<MixturePosterior> {
        let responsibilities = self.assign(data)?;
        Ok(MixturePosterior { responsibilities, ..self.clone() })
    }
}

/// Variational parameters of q(π, μ, Λ).
#[derive(Clone)]
struct Components {
    alpha: Vec<f64>,
    beta: Vec<f64>,
    m: Vec<DVector<f64>>,
    w: Vec<DMatrix<f64>>,
    nu: Vec<f64>,
}

struct Stats {
    nk: Vec<f64>,
    xbar: Vec<DVector<f64>>,
    /// Σ r (x − x̄)(x − x̄)ᵀ, not divided by N_k.
    scatter: Vec<DMatrix<f64>>,
}

fn ln_det_spd(m: &DMatrix<f64>) -> Result<f64> {
    let c = Cholesky::new(m.clone()).ok_or_else(|| Error::Numerical("matrix lost positive definiteness".into()))?;
    Ok(2.0 * c.l().diagonal().iter().map(|v| v.ln()).sum::<f64>())
}

fn spd_inverse(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let c = Cholesky::new(m.clone()).ok_or_else(|| Error::Numerical("matrix lost positive definiteness".into()))?;
    let inv = c.inverse();
    Ok((&inv + inv.transpose()) * 0.5)
}

/// `E[ln |Λ|]` under Wishart(W, ν).
fn expected_ln_det(ln_det_w: f64, nu: f64, d: usize) -> f64 {
    (1..=d).map(|i| digamma((nu + 1.0 - i as f64) / 2.0)).sum::<f64>() + d as f64 * LN_2 + ln_det_w
}

/// `ln B(W, ν)`, the Wishart normalizer.
fn ln_wishart_norm(ln_det_w: f64, nu: f64, d: usize) -> f64 {
    let df = d as f64;
    -0.5 * nu * ln_det_w
        - (0.5 * nu * df * LN_2
            + 0.25 * df * (df - 1.0) * PI.ln()
            + (1..=d).map(|i| ln_gamma((nu + 1.0 - i as f64) / 2.0)).sum::<f64>())
}

fn quad(w: &DMatrix<f64>, v: &DVector<f64>) -> f64 {
    (w * v).dot(v)
}

impl Components {
    fn from_posterior(p: &MixturePosterior) -> Result<Self> {
        let d = p.dim;
        Ok(Components {
            alpha: p.alpha.clone(),
            beta: p.beta.clone(),
            m: p.means.iter().map(|m| DVector::from_column_slice(m)).collect(),
            w: p.w.iter().map(|w| DMatrix::from_row_slice(d, d, w)).collect(),
            nu: p.nu.clone(),
        })
    }

    fn update(h: &Hyper, s: &Stats) -> Result<Self> {
        let k = s.nk.len();
        let mut c = Components {
            alpha: Vec::with_capacity(k),
            beta: Vec::with_capacity(k),
            m: Vec::with_capacity(k),
            w: Vec::with_capacity(k),
            nu: Vec::with_capacity(k),
        };
        for j in 0..k {
            let nk = s.nk[j];
            let beta = h.beta0 + nk;
            c.alpha.push(h.alpha0 + nk);
            c.beta.push(beta);
            c.m.push((&h.mu0 * h.beta0 + &s.xbar[j] * nk) / beta);
            let dx = &s.xbar[j] - &h.mu0;
            let w_inv = &h.w0_inv + &s.scatter[j] + (&dx * dx.transpose()) * (h.beta0 * nk / beta);
            c.w.push(spd_inverse(&w_inv)?);
            c.nu.push(h.nu0 + nk);
        }
        Ok(c)
    }

    /// Per-component terms of the log responsibilities that do not depend
    /// on the data point, plus Cholesky factors of W.
    fn prepare(&self, d: usize) -> Vec<(f64, DMatrix<f64>)> {
        let a_hat: f64 = self.alpha.iter().sum();
        let psi_hat = digamma(a_hat);
        (0..self.alpha.len())
            .map(|j| {
                let chol = Cholesky::new(self.w[j].clone()).expect("W stays positive definite");
                let ln_det_w = 2.0 * chol.l().diagonal().iter().map(|v| v.ln()).sum::<f64>();
                let constant = digamma(self.alpha[j]) - psi_hat + 0.5 * expected_ln_det(ln_det_w, self.nu[j], d)
                    - 0.5 * d as f64 * (2.0 * PI).ln()
                    - 0.5 * d as f64 / self.beta[j];
                // Lᵀ so that ‖Lᵀ v‖² = vᵀ W v
                (constant, chol.l().transpose())
            })
            .collect()
    }

    fn responsibilities(&self, data: &[f64], d: usize) -> Vec<f64> {
        let k = self.alpha.len();
        let prep = self.prepare(d);
        let mut out = Vec::with_capacity(data.len() / d * k);
        let mut log_rho = vec![0.0; k];
        let mut diff = vec![0.0; d];
        for x in data.chunks(d) {
            for j in 0..k {
                let (constant, lt) = &prep[j];
                for (t, (xv, mv)) in diff.iter_mut().zip(x.iter().zip(self.m[j].iter())) {
                    *t = xv - mv;
                }
                let mut q = 0.0;
                for r in 0..d {
                    let mut acc = 0.0;
                    for c in r..d {
                        acc += lt[(r, c)] * diff[c];
                    }
                    q += acc * acc;
                }
                log_rho[j] = constant - 0.5 * self.nu[j] * q;
            }
            let max = log_rho.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let start = out.len();
            let mut total = 0.0;
            for &lr in &log_rho {
                let e = (lr - max).exp();
                total += e;
                out.push(e);
            }
            for r in &mut out[start..] {
                *r /= total;
            }
        }
        out
    }
}

struct Hyper {
    alpha0: f64,
    beta0: f64,
    mu0: DVector<f64>,
    w0_inv: DMatrix<f64>,
    ln_det_w0: f64,
    nu0: f64,
}

fn sufficient_stats(data: &[f64], d: usize, resp: &[f64], k: usize, mu0: &DVector<f64>) -> Stats {
    let mut nk = vec![0.0; k];
    let mut sums = vec![vec![0.0; d]; k];
    for (x, r) in data.chunks(d).zip(resp.chunks(k)) {
        for j in 0..k {
            if r[j] == 0.0 {
                continue;
            }
            nk[j] += r[j];
            for (s, v) in sums[j].iter_mut().zip(x) {
                *s += r[j] * v;
            }
        }
    }
    let xbar: Vec<DVector<f64>> = (0..k)
        .map(|j| {
            if nk[j] > 0.0 {
                DVector::from_iterator(d, sums[j].iter().map(|s| s / nk[j]))
            } else {
                mu0.clone()
            }
        })
        .collect();
    let mut lower = vec![vec![0.0; d * d]; k];
    let mut diff = vec![0.0; d];
    for (x, r) in data.chunks(d).zip(resp.chunks(k)) {
        for j in 0..k {
            let rj = r[j];
            if rj == 0.0 {
                continue;
            }
            for (t, (xv, mv)) in diff.iter_mut().zip(x.iter().zip(xbar[j].iter())) {
                *t = xv - mv;
            }
            let acc = &mut lower[j];
            for a in 0..d {
                let ra = rj * diff[a];
                for b in 0..=a {
                    acc[a * d + b] += ra * diff[b];
                }
            }
        }
    }
    let scatter = lower
        .into_iter()
        .map(|l| DMatrix::from_fn(d, d, |a, b| if b <= a { l[a * d + b] } else { l[b * d + a] }))
        .collect();
    Stats { nk, xbar, scatter }
}

fn elbo(h: &Hyper, s: &Stats, c: &Components, resp: &[f64], d: usize) -> Result<f64> {
    let k = s.nk.len();
    let df = d as f64;
    let a_hat: f64 = c.alpha.iter().sum();
    let psi_hat = digamma(a_hat);
    let ln_b0 = ln_wishart_norm(h.ln_det_w0, h.nu0, d);

    let entropy_z: f64 = resp.iter().filter(|&&r| r > 0.0).map(|&r| -r * r.ln()).sum();

    // KL(q(π) ‖ p(π)) in a form where empty components contribute exactly 0
    let mut kl_pi = ln_gamma(a_hat) - ln_gamma(k as f64 * h.alpha0);
    for j in 0..k {
        kl_pi += ln_gamma(h.alpha0) - ln_gamma(c.alpha[j]);
        kl_pi += (c.alpha[j] - h.alpha0) * (digamma(c.alpha[j]) - psi_hat);
    }

    let mut total = entropy_z - kl_pi;
    for j in 0..k {
        let nk = s.nk[j];
        let ln_det_w = ln_det_spd(&c.w[j])?;
        let ln_lambda = expected_ln_det(ln_det_w, c.nu[j], d);
        let ln_pi = digamma(c.alpha[j]) - psi_hat;
        let w = &c.w[j];

        if nk > 0.0 {
            let dx = &s.xbar[j] - &c.m[j];
            let tr_sw = (&s.scatter[j] * w).trace();
            total += 0.5
                * (nk * ln_lambda - nk * df / c.beta[j] - c.nu[j] * tr_sw - nk * c.nu[j] * quad(w, &dx) - nk * df * (2.0 * PI).ln());
            total += nk * ln_pi;
        }

        let dm = &c.m[j] - &h.mu0;
        let ln_p = 0.5 * (df * (h.beta0 / (2.0 * PI)).ln() + ln_lambda - df * h.beta0 / c.beta[j] - h.beta0 * c.nu[j] * quad(w, &dm))
            + ln_b0
            + 0.5 * (h.nu0 - df - 1.0) * ln_lambda
            - 0.5 * c.nu[j] * (&h.w0_inv * w).trace();
        let entropy_w = -ln_wishart_norm(ln_det_w, c.nu[j], d) - 0.5 * (c.nu[j] - df - 1.0) * ln_lambda + 0.5 * c.nu[j] * df;
        let ln_q = 0.5 * ln_lambda + 0.5 * df * (c.beta[j] / (2.0 * PI)).ln() - 0.5 * df - entropy_w;
        total += ln_p - ln_q;
    }
    if !total.is_finite() {
        return Err(Error::Numerical("ELBO is not finite".into()));
    }
    Ok(total)
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum()
}

/// k-means++ seeding followed by 10 Lloyd iterations; returns hard
/// assignments.
fn kmeans_init(data: &[f64], d: usize, k: usize, seed: u64) -> Vec<usize> {
    let n = data.len() / d;
    let point = |i: usize| &data[i * d..(i + 1) * d];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centers: Vec<Vec<f64>> = vec![point(rng.random_range(0..n)).to_vec()];
    let mut nearest: Vec<f64> = (0..n).map(|i| sq_dist(point(i), &centers[0])).collect();
    while centers.len() < k {
        let total: f64 = nearest.iter().sum();
        let next = if total > 0.0 {
            let mut target = rng.random::<f64>() * total;
            let mut pick = n - 1;
            for (i, &w) in nearest.iter().enumerate() {
                if target < w {
                    pick = i;
                    break;
                }
                target -= w;
            }
            pick
        } else {
            rng.random_range(0..n)
        };
        centers.push(point(next).to_vec());
        let c = centers.last().unwrap();
        for (i, best) in nearest.iter_mut().enumerate() {
            *best = best.min(sq_dist(point(i), c));
        }
    }
    let mut assign = vec![0usize; n];
    for _ in 0..10 {
        for (i, a) in assign.iter_mut().enumerate() {
            let x = point(i);
            let mut best = (f64::INFINITY, 0);
            for (j, c) in centers.iter().enumerate() {
                let dist = sq_dist(x, c);
                if dist < best.0 {
                    best = (dist, j);
                }
            }
            *a = best.1;
        }
        let mut sums = vec![vec![0.0; d]; k];
        let mut counts = vec![0usize; k];
        for (i, &a) in assign.iter().enumerate() {
            counts[a] += 1;
            for (s, v) in sums[a].iter_mut().zip(point(i)) {
                *s += v;
            }
        }
        for j in 0..k {
            if counts[j] > 0 {
                centers[j] = sums[j].iter().map(|s| s / counts[j] as f64).collect();
            }
        }
    }
    assign
}

struct Ascent {
    comps: Components,
    resp: Vec<f64>,
    trace: Vec<f64>,
    converged: bool,
}

/// Alternates responsibility and parameter updates until the relative
/// change of the bound falls below `tol`.
fn ascend(data: &[f64], d: usize, h: &Hyper, mut comps: Components, mut resp: Vec<f64>, start: f64, hyper: &BgmHyper) -> Result<Ascent> {
    let k = comps.alpha.len();
    let mut trace = vec![start];
    let mut converged = false;
    for _ in 0..hyper.max_iter {
        resp = comps.responsibilities(data, d);
        let stats = sufficient_stats(data, d, &resp, k, &h.mu0);
        comps = Components::update(h, &stats)?;
        let value = elbo(h, &stats, &comps, &resp, d)?;
        let prev = *trace.last().unwrap();
        trace.push(value);
        if ((value - prev) / value.abs().max(1e-300)).abs() < hyper.tol {
            converged = true;
            break;
        }
    }
    Ok(Ascent {
        comps,
        resp,
        trace,
        converged,
    })
}

/// Fits the mixture. The input is first put into a canonical (sorted)
/// order so the result does not depend on the order of `data`.
pub fn fit_vbgmm(data: &[f64], dim: usize, hyper: &BgmHyper) -> Result<MixturePosterior> {
    let n = check_data(data, dim)?;
    if hyper.dim() != dim {
        return Err(Error::invalid("hyperparameter dimension does not match data"));
    }
    hyper.validate()?;
    let k = hyper.k;
    if n < k {
        return Err(Error::invalid(format!("{n} vectors cannot support {k} clusters")));
    }
    let d = dim;

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| {
        let (x, y) = (&data[a * d..(a + 1) * d], &data[b * d..(b + 1) * d]);
        x.iter()
            .zip(y)
            .map(|(p, q)| p.total_cmp(q))
            .find(|o| o.is_ne())
            .unwrap_or(std::cmp::Ordering::Equal)
    });
    // Work in coordinates centered on μ₀ and scaled by the prior's RMS
    // spread, so the relative stopping rule is invariant to data scale.
    let scale = ((0..d).map(|i| hyper.w0_inv[i * d + i]).sum::<f64>() / d as f64).sqrt();
    let sorted: Vec<f64> = order
        .iter()
        .flat_map(|&i| {
            data[i * d..(i + 1) * d]
                .iter()
                .zip(&hyper.mu0)
                .map(|(x, m)| (x - m) / scale)
        })
        .collect();

    let w0_inv = DMatrix::from_row_slice(d, d, &hyper.w0_inv) / (scale * scale);
    let h = Hyper {
        alpha0: hyper.alpha0,
        beta0: hyper.beta0,
        mu0: DVector::zeros(d),
        ln_det_w0: -ln_det_spd(&w0_inv)?,
        w0_inv,
        nu0: hyper.nu0,
    };

    let mut resp = vec![0.0; n * k];
    for (i, a) in kmeans_init(&sorted, d, k, hyper.seed).into_iter().enumerate() {
        resp[i * k + a] = 1.0;
    }
    let stats = sufficient_stats(&sorted, d, &resp, k, &h.mu0);
    let comps = Components::update(&h, &stats)?;
    let first = elbo(&h, &stats, &comps, &resp, d)?;
    let mut best = ascend(&sorted, d, &h, comps, resp, first, hyper)?;

    if hyper.delete_moves {
        // Deletion moves: reset one active component to its prior, rerun
        // the ascent, and keep the result if the bound improves. Coordinate
        // ascent alone often keeps redundant components alive.
        'outer: loop {
            let mut active: Vec<usize> = (0..k).filter(|&j| best.comps.alpha[j] - h.alpha0 > 0.5).collect();
            if active.len() < 2 {
                break;
            }
            active.sort_by(|&a, &b| best.comps.alpha[a].total_cmp(&best.comps.alpha[b]).then(a.cmp(&b)));
            for j in active {
                let mut comps = best.comps.clone();
                comps.alpha[j] = h.alpha0;
                comps.beta[j] = h.beta0;
                comps.m[j] = h.mu0.clone();
                comps.w[j] = spd_inverse(&h.w0_inv)?;
                comps.nu[j] = h.nu0;
                let resp = comps.responsibilities(&sorted, d);
                let stats = sufficient_stats(&sorted, d, &resp, k, &h.mu0);
                let comps = Components::update(&h, &stats)?;
                let start = elbo(&h, &stats, &comps, &resp, d)?;
                let candidate = ascend(&sorted, d, &h, comps, resp, start, hyper)?;
                let (old, new) = (*best.trace.last().unwrap(), *candidate.trace.last().unwrap());
                if new > old + hyper.tol * old.abs() {
                    best = candidate;
                    continue 'outer;
                }
            }
            break;
        }
    }
    if !best.converged {
        log::warn!("variational fit stopped at max_iter = {} before converging", hyper.max_iter);
    }
    let Ascent {
        comps,
        resp,
        trace,
        converged,
    } = best;

    let mut responsibilities = vec![0.0; n * k];
    for (s, &orig) in order.iter().enumerate() {
        responsibilities[orig * k..(orig + 1) * k].copy_from_slice(&resp[s * k..(s + 1) * k]);
    }
    let a_hat: f64 = comps.alpha.iter().sum();
    let jacobian = n as f64 * d as f64 * scale.ln();
    Ok(MixturePosterior {
        dim: d,
        pi_hat: comps.alpha.iter().map(|a| a / a_hat).collect(),
        alpha: comps.alpha,
        beta: comps.beta,
        means: comps
            .m
            .iter()
            .map(|m| m.iter().zip(&hyper.mu0).map(|(v, c)| v * scale + c).collect())
            .collect(),
        w: comps
            .w
            .iter()
            .map(|w| w.transpose().iter().map(|v| v / (scale * scale)).collect())
            .collect(),
        nu: comps.nu,
        responsibilities,
        elbo_trace: trace.into_iter().map(|v| v - jacobian).collect(),
        converged,
    })
}

/// Number of mixture weights above `weight_threshold`.
pub fn effective_clusters(p: &MixturePosterior, weight_threshold: f64) -> usize {
    p.pi_hat.iter().filter(|&&w| w > weight_threshold).count()
}

/// Cluster ids with weight above `weight_threshold`, ascending.
pub fn significant_clusters(p: &MixturePosterior, weight_threshold: f64) -> Vec<usize> {
    (0..p.k()).filter(|&j| p.pi_hat[j] > weight_threshold).collect()
}

/// Free parameter count of a `K`-component, `d`-dimensional full-covariance
/// mixture.
pub fn parameter_count(k: usize, d: usize) -> usize {
    (k - 1) + k * d + k * d * (d + 1) / 2
}

/// Log-likelihood at point estimates: `π̂ = α/Σα`, `μ̂ = m`, and `Λ̂` the
/// Wishart mode `(ν − d − 1)W` (the mean `νW` when the mode does not exist).
pub fn map_log_likelihood(p: &MixturePosterior, data: &[f64]) -> Result<f64> {
    let d = p.dim;
    check_data(data, d)?;
    let k = p.k();
    let mut comps = Vec::with_capacity(k);
    for j in 0..k {
        let scale = if p.nu[j] > d as f64 + 1.0 { p.nu[j] - d as f64 - 1.0 } else { p.nu[j] };
        let lambda = DMatrix::from_row_slice(d, d, &p.w[j]) * scale;
        let chol = Cholesky::new(lambda).ok_or_else(|| Error::Numerical("precision not positive definite".into()))?;
        let ln_det = 2.0 * chol.l().diagonal().iter().map(|v| v.ln()).sum::<f64>();
        let constant = p.pi_hat[j].ln() + 0.5 * ln_det - 0.5 * d as f64 * (2.0 * PI).ln();
        comps.push((constant, chol.l().transpose(), &p.means[j]));
    }
    let mut total = 0.0;
    let mut terms = vec![0.0; k];
    for x in data.chunks(d) {
        for (t, (constant, lt, m)) in terms.iter_mut().zip(&comps) {
            let diff = DVector::from_iterator(d, x.iter().zip(m.iter()).map(|(a, b)| a - b));
            *t = constant - 0.5 * (lt * diff).norm_squared();
        }
        let max = terms.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        total += max + terms.iter().map(|t| (t - max).exp()).sum::<f64>().ln();
    }
    Ok(total)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IcRow {
    pub k: usize,
    pub log_lik: f64,
    pub params: usize,
    pub aic: f64,
    pub bic: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IcCurve {
    pub rows: Vec<IcRow>,
    pub suggested_k: usize,
}

/// Elbow of a BIC curve: the interior point with the largest discrete
/// second difference. When no extra cluster lowers BIC below its first
/// value, the first `K` is returned instead.
pub fn bic_elbow(rows: &[IcRow]) -> usize {
    let first = &rows[0];
    if rows.len() < 3 || rows.iter().skip(1).all(|r| r.bic >= first.bic) {
        return rows.iter().min_by(|a, b| a.bic.total_cmp(&b.bic)).map_or(first.k, |r| r.k);
    }
    let mut best = (f64::NEG_INFINITY, rows[1].k);
    for w in rows.windows(3) {
        let second = w[0].bic - 2.0 * w[1].bic + w[2].bic;
        if second > best.0 {
            best = (second, w[1].k);
        }
    }
    best.1
}

/// Fits one mixture per `K` and reports AIC and BIC at the point estimates.
pub fn information_criteria(data: &[f64], dim: usize, k_range: &[usize], settings: &BgmSettings) -> Result<IcCurve> {
    let n = check_data(data, dim)?;
    if k_range.is_empty() {
        return Err(Error::invalid("empty K range"));
    }
    let mut rows = Vec::with_capacity(k_range.len());
    for &k in k_range {
        if k > n {
            return Err(Error::invalid(format!("K = {k} exceeds {n} vectors")));
        }
        let hyper = BgmHyper::from_data(data, dim, k, settings)?;
        let post = fit_vbgmm(data, dim, &hyper)?;
        let ll = map_log_likelihood(&post, data)?;
        let p = parameter_count(k, dim);
        rows.push(IcRow {
            k,
            log_lik: ll,
            params: p,
            aic: -2.0 * ll + 2.0 * p as f64,
            bic: -2.0 * ll + p as f64 * (n as f64).ln(),
        });
    }
    let suggested_k = bic_elbow(&rows);
    Ok(IcCurve { rows, suggested_k })
}

pub fn write_ic_csv(curve: &IcCurve, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut out = String::from("K,logLik,P,AIC,BIC\n");
    for r in &curve.rows {
        out.push_str(&format!("{},{},{},{},{}\n", r.k, r.log_lik, r.params, r.aic, r.bic));
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Labels each valid pixel of `f` by its most responsible cluster (lowest id
/// on ties). Significant clusters are renumbered densely in ascending id
/// order; everything else, including the border band, is [`UNLABELED`].
pub fn segment_labels(p: &MixturePosterior, f: &ScoreField, significant: &[usize]) -> Result<LabelMask> {
    if p.n() != f.len() {
        return Err(Error::invalid(format!(
            "posterior covers {} vectors, field has {}",
            p.n(),
            f.len()
        )));
    }
    let k = p.k();
    let mut remap = vec![UNLABELED; k];
    let mut ids: Vec<usize> = significant.to_vec();
    ids.sort_unstable();
    ids.dedup();
    for (dense, &c) in ids.iter().enumerate() {
        if c >= k {
            return Err(Error::invalid(format!("cluster {c} out of range")));
        }
        remap[c] = dense as u32;
    }
    let mut mask = LabelMask::filled(f.width, f.height, UNLABELED);
    let (b, vw) = (f.border, f.valid_width());
    for i in 0..f.len() {
        let row = p.responsibility_row(i);
        let mut best = 0;
        for j in 1..k {
            if row[j] > row[best] {
                best = j;
            }
        }
        mask.set(b + i / vw, b + i % vw, remap[best]);
    }
    Ok(mask)
}

const POSTERIOR_MAGIC: &[u8; 6] = b"MCBG1\n";

#[derive(Serialize, Deserialize)]
struct PosteriorHeader {
    dim: usize,
    k: usize,
    n: usize,
    iterations: usize,
    converged: bool,
}

/// Posterior checkpoint: magic, `u32` LE header length, JSON header, then
/// alpha, beta, nu, means, W, pi_hat, ELBO trace and responsibilities as
/// little-endian `f64`.
pub fn save_posterior(p: &MixturePosterior, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let header = serde_json::to_vec(&PosteriorHeader {
        dim: p.dim,
        k: p.k(),
        n: p.n(),
        iterations: p.elbo_trace.len(),
        converged: p.converged,
    })?;
    let mut out = Vec::new();
    out.extend_from_slice(POSTERIOR_MAGIC);
    out.extend_from_slice(&(header.len() as u32).to_le_bytes());
    out.extend_from_slice(&header);
    let arrays = [&p.alpha, &p.beta, &p.nu]
        .into_iter()
        .flatten()
        .chain(p.means.iter().flatten())
        .chain(p.w.iter().flatten())
        .chain(&p.pi_hat)
        .chain(&p.elbo_trace)
        .chain(&p.responsibilities);
    for v in arrays {
        out.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn load_posterior(path: impl AsRef<Path>) -> Result<MixturePosterior> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() < 10 || &bytes[..6] != POSTERIOR_MAGIC {
        return Err(Error::Malformed("not a posterior checkpoint".into()));
    }
    let hlen = u32::from_le_bytes(bytes[6..10].try_into().unwrap()) as usize;
    let head: PosteriorHeader = serde_json::from_slice(
        bytes
            .get(10..10 + hlen)
            .ok_or_else(|| Error::Malformed("posterior header truncated".into()))?,
    )?;
    let (d, k, n) = (head.dim, head.k, head.n);
    let values: Vec<f64> = bytes[10 + hlen..]
        .chunks_exact(8)
        .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
        .collect();
    let expected = 3 * k + k * d + k * d * d + k + head.iterations + n * k;
    if values.len() != expected || (bytes.len() - 10 - hlen) % 8 != 0 {
        return Err(Error::Malformed("posterior data length mismatch".into()));
    }
    let mut it = values.into_iter();
    let mut take = |len: usize| -> Vec<f64> { it.by_ref().take(len).collect() };
    Ok(MixturePosterior {
        dim: d,
        alpha: take(k),
        beta: take(k),
        nu: take(k),
        means: (0..k).map(|_| take(d)).collect(),
        w: (0..k).map(|_| take(d * d)).collect(),
        pi_hat: take(k),
        elbo_trace: take(head.iterations),
        responsibilities: take(n * k),
        converged: head.converged,
    })
}
