use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Network, Tensor};
use crate::error::Result;

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub checked: usize,
    /// Location of the worst disagreement, e.g. `conv1.weight[17]`.
    pub worst: String,
}

fn rel_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(1e-8)
}

/// Compares backpropagated gradients against central differences with step
/// `eps` on a seeded sample of parameters (at least 1%, at least 24 when
/// available) and of input elements.
///
/// `loss` maps the batched network output to a scalar and its gradient
/// with respect to that output.
pub fn grad_check<F>(net: &Network<f64>, loss: F, input: &Tensor<f64>, eps: f64, seed: u64) -> Result<GradCheckReport>
where
    F: Fn(&Tensor<f64>) -> (f64, Tensor<f64>),
{
    let (out, cache) = net.forward(input)?;
    let (_, upstream) = loss(&out);
    let analytic = net.backward(&cache, &upstream)?;

    let eval = |n: &Network<f64>, x: &Tensor<f64>| -> Result<f64> {
        let (o, _) = n.forward(x)?;
        Ok(loss(&o).0)
    };

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let total = net.param_count();
    let want = total.div_ceil(100).max(total.min(24));
    let mut flat_index = Vec::with_capacity(total);
    for (pi, p) in net.params.iter().enumerate() {
        for j in 0..p.data.len() {
            flat_index.push((pi, j));
        }
    }

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        checked: 0,
        worst: String::new(),
    };
    let mut probe = net.clone();
    for k in sample(&mut rng, total, want).into_iter() {
        let (pi, j) = flat_index[k];
        let orig = probe.params[pi].data[j];
        probe.params[pi].data[j] = orig + eps;
        let up = eval(&probe, input)?;
        probe.params[pi].data[j] = orig - eps;
        let down = eval(&probe, input)?;
        probe.params[pi].data[j] = orig;
        let numeric = (up - down) / (2.0 * eps);
        let err = rel_error(analytic.params[pi][j], numeric);
        report.checked += 1;
        if err > report.max_rel_error || report.worst.is_empty() {
            report.max_rel_error = report.max_rel_error.max(err);
            report.worst = format!("{}[{j}]", net.params[pi].name);
        }
    }

    let n_in = input.data.len();
    let mut x = input.clone();
    for j in sample(&mut rng, n_in, n_in.min(8)).into_iter() {
        let orig = x.data[j];
        x.data[j] = orig + eps;
        let up = eval(net, &x)?;
        x.data[j] = orig - eps;
        let down = eval(net, &x)?;
        x.data[j] = orig;
        let numeric = (up - down) / (2.0 * eps);
        let err = rel_error(analytic.input.data[j], numeric);
        report.checked += 1;
        if err > report.max_rel_error {
            report.max_rel_error = err;
            report.worst = format!("input[{j}]");
        }
    }
    Ok(report)
}
