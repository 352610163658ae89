//! Bias-corrected Adam.

use crate::error::{Error, Result};
use crate::tensor::{lit, Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

#[derive(Clone, Debug)]
pub struct AdamState<F> {
    pub config: AdamConfig,
    first: Vec<Vec<F>>,
    second: Vec<Vec<F>>,
    step: u64,
}

impl<F: Scalar> AdamState<F> {
    /// Zero accumulators matching `params`.
    pub fn new<'a>(config: AdamConfig, params: impl IntoIterator<Item = &'a Tensor<F>>) -> Self {
        let (first, second) = params
            .into_iter()
            .map(|p| (vec![F::zero(); p.len()], vec![F::zero(); p.len()]))
            .unzip();
        AdamState {
            config,
            first,
            second,
            step: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn first_moment(&self, i: usize) -> &[F] {
        &self.first[i]
    }

    pub fn second_moment(&self, i: usize) -> &[F] {
        &self.second[i]
    }
}

/// One Adam update of `params` in place.
///
/// `names` labels each parameter for error reporting. Nothing is modified if
/// any gradient is non-finite.
pub fn adam_step<F: Scalar>(
    params: &mut [&mut Tensor<F>],
    grads: &[&Tensor<F>],
    names: &[&str],
    state: &mut AdamState<F>,
    learning_rate: f64,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.first.len() {
        return Err(Error::Shape(format!(
            "adam_step got {} params, {} grads, {} state slots",
            params.len(),
            grads.len(),
            state.first.len()
        )));
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        let name = names.get(i).copied().unwrap_or("?");
        if p.shape() != g.shape() || p.len() != state.first[i].len() {
            return Err(Error::Shape(format!(
                "parameter `{name}` has shape {:?} but gradient {:?}",
                p.shape(),
                g.shape()
            )));
        }
        if !g.is_finite() {
            return Err(Error::NonFiniteGradient(name.to_string()));
        }
    }

    state.step += 1;
    let cfg = state.config;
    let t = state.step as i32;
    let (b1, b2): (F, F) = (lit(cfg.beta1), lit(cfg.beta2));
    let eps: F = lit(cfg.epsilon);
    let lr: F = lit(learning_rate);
    let bc1: F = lit(1.0 - cfg.beta1.powi(t));
    let bc2: F = lit(1.0 - cfg.beta2.powi(t));

    for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
        let m = &mut state.first[i];
        let v = &mut state.second[i];
        for (((w, &gi), mi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(m).zip(v) {
            *mi = b1 * *mi + (F::one() - b1) * gi;
            *vi = b2 * *vi + (F::one() - b2) * gi * gi;
            let m_hat = *mi / bc1;
            let v_hat = *vi / bc2;
            *w = *w - lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}
