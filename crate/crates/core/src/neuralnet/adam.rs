use super::{Grads, Network, Real};
use crate::error::{Error, Result};

/// Adam optimizer state with bias correction.
#[derive(Clone, Debug)]
pub struct AdamState<T> {
    pub first: Vec<Vec<T>>,
    pub second: Vec<Vec<T>>,
    pub step: u64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl<T: Real> AdamState<T> {
    /// Standard defaults (β₁ = 0.9, β₂ = 0.999, ε = 1e-8).
    pub fn new(net: &Network<T>, lr: f64) -> Self {
        Self::for_shapes(net.params.iter().map(|p| p.data.len()), lr)
    }

    pub fn for_shapes(lens: impl IntoIterator<Item = usize>, lr: f64) -> Self {
        let zeros: Vec<Vec<T>> = lens.into_iter().map(|n| vec![T::zero(); n]).collect();
        AdamState {
            first: zeros.clone(),
            second: zeros,
            step: 0,
            lr,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// One bias-corrected Adam update of `params` in place.
pub fn adam_step<T: Real>(params: &mut [&mut Vec<T>], grads: &Grads<T>, state: &mut AdamState<T>) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.first.len() {
        return Err(Error::invalid("parameter, gradient and optimizer layouts differ"));
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.len() != g.len() || p.len() != state.first[i].len() {
            return Err(Error::invalid(format!("parameter {i} length mismatch")));
        }
        if let Some(j) = g.iter().position(|v| !v.is_finite()) {
            return Err(Error::Numerical(format!(
                "non-finite gradient at parameter {i}, element {j}"
            )));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (T::from_real(state.beta1), T::from_real(state.beta2));
    let c1 = T::from_real(1.0 - state.beta1.powi(t));
    let c2 = T::from_real(1.0 - state.beta2.powi(t));
    let lr = T::from_real(state.lr);
    let eps = T::from_real(state.epsilon);
    for (i, p) in params.iter_mut().enumerate() {
        let m = &mut state.first[i];
        let v = &mut state.second[i];
        for (((w, &g), m), v) in p.iter_mut().zip(&grads[i]).zip(m.iter_mut()).zip(v.iter_mut()) {
            *m = b1 * *m + (T::one() - b1) * g;
            *v = b2 * *v + (T::one() - b2) * g * g;
            let m_hat = *m / c1;
            let v_hat = *v / c2;
            *w -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}

impl<T: Real> Network<T> {
    /// Applies an Adam step with the given gradients.
    pub fn apply_adam(&mut self, grads: &Grads<T>, state: &mut AdamState<T>) -> Result<()> {
        let mut refs: Vec<&mut Vec<T>> = self.params.iter_mut().map(|p| &mut p.data).collect();
        adam_step(&mut refs, grads, state)
    }
}
