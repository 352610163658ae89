//! Concrete (relaxed Bernoulli) dropout with a learnable drop probability,
//! and the variational regularizer that goes with it.
//!
//! A layer stores an unconstrained logit `theta` with `p = sigmoid(theta)`.
//! Given uniform noise `u`, the relaxed keep-mask is
//!
//! ```text
//! z = 1 - sigmoid((log p - log(1 - p) + log u - log(1 - u)) / t)
//! ```
//!
//! and retained activations are rescaled by `1 / (1 - p)`. Since
//! `log p - log(1 - p) = theta`, the mask is `sigmoid(-(theta + logit(u)) / t)`.

use rand::Rng;

use crate::error::{Error, Result};
use crate::tape::{log_sigmoid, sigmoid, Tape, Var};
use crate::tensor::{lit, to_f64, Scalar, Tensor};

/// Noise is drawn inside `[NOISE_EPS, 1 - NOISE_EPS]`.
pub const NOISE_EPS: f64 = 1e-7;
pub const DEFAULT_TEMPERATURE: f64 = 0.1;
pub const DEFAULT_INITIAL_P: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DropoutLayerState<F> {
    pub p_logit: F,
    pub temperature: F,
    /// Number of kernels in the gated layer.
    pub width: usize,
}

impl<F: Scalar> DropoutLayerState<F> {
    pub fn with_probability(p: f64, temperature: f64, width: usize) -> Result<Self> {
        if !(p > 0.0 && p < 1.0) {
            return Err(Error::Domain(format!("dropout probability {p} outside (0, 1)")));
        }
        if temperature <= 0.0 {
            return Err(Error::Domain(format!("temperature {temperature} must be positive")));
        }
        Ok(DropoutLayerState {
            p_logit: lit((p / (1.0 - p)).ln()),
            temperature: lit(temperature),
            width,
        })
    }

    pub fn probability(&self) -> f64 {
        sigmoid(to_f64(self.p_logit))
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RegularizerConfig {
    pub length_scale: f64,
    pub tau: f64,
    pub dataset_size: f64,
}

impl RegularizerConfig {
    pub fn new(length_scale: f64, tau: f64, dataset_size: f64) -> Result<Self> {
        for (name, v) in [
            ("length_scale", length_scale),
            ("tau", tau),
            ("dataset_size", dataset_size),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be positive, got {v}")));
            }
        }
        Ok(RegularizerConfig {
            length_scale,
            tau,
            dataset_size,
        })
    }

    fn weight_coefficient(&self) -> f64 {
        self.length_scale * self.length_scale / (2.0 * self.dataset_size * self.tau)
    }

    fn entropy_coefficient(&self) -> f64 {
        1.0 / (self.dataset_size * self.tau)
    }
}

/// Uniform draws clamped to `[NOISE_EPS, 1 - NOISE_EPS]`.
pub fn uniform_noise<R: Rng + ?Sized>(rng: &mut R, n: usize) -> Vec<f64> {
    (0..n)
        .map(|_| rng.gen::<f64>().clamp(NOISE_EPS, 1.0 - NOISE_EPS))
        .collect()
}

/// `log u - log(1 - u)` for each sample.
pub fn noise_logits<F: Scalar>(u: &[f64]) -> Result<Vec<F>> {
    u.iter()
        .map(|&x| {
            if x > 0.0 && x < 1.0 {
                Ok(lit((x / (1.0 - x)).ln()))
            } else {
                Err(Error::Domain(format!("dropout noise {x} not strictly inside (0, 1)")))
            }
        })
        .collect()
}

/// Relaxed keep-mask values for noise `u`.
pub fn concrete_mask<F: Scalar>(state: &DropoutLayerState<F>, u: &[f64]) -> Result<Vec<F>> {
    let logits = noise_logits::<F>(u)?;
    Ok(logits
        .into_iter()
        .map(|l| sigmoid(-(state.p_logit + l) / state.temperature))
        .collect())
}

/// Gates `x` (NCHW) with a concrete mask drawn from `rng`. One mask of shape
/// `[C, H, W]` is shared by every example of the batch. Without an RNG the
/// mask is replaced by its expectation, which after rescaling is the identity.
pub fn apply_concrete_dropout<F: Scalar, R: Rng + ?Sized>(
    tape: &mut Tape<F>,
    x: Var,
    logit: Var,
    temperature: F,
    rng: Option<&mut R>,
) -> Result<Var> {
    let Some(rng) = rng else {
        return Ok(x);
    };
    let per_example: usize = tape.value(x).shape().iter().skip(1).product();
    let noise = noise_logits(&uniform_noise(rng, per_example))?;
    tape.concrete_dropout(x, logit, noise, temperature)
}

/// Bernoulli entropy `-p log p - (1 - p) log(1 - p)`, zero at the endpoints.
pub fn entropy(p: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::Domain(format!("entropy of probability {p} outside [0, 1]")));
    }
    let term = |q: f64| if q == 0.0 { 0.0 } else { -q * q.ln() };
    Ok(term(p) + term(1.0 - p))
}

/// `sum_l l^2 (1 - p_l) / (2 N tau) * ||M_l||^2 - K_l H(p_l) / (N tau)` on the tape.
///
/// `weights[i]` is the kernel consuming the activations gated by `logits[i]`;
/// biases are not part of the penalty.
pub fn kl_regularizer<F: Scalar>(
    tape: &mut Tape<F>,
    weights: &[Var],
    logits: &[Var],
    widths: &[usize],
    config: &RegularizerConfig,
) -> Result<Var> {
    if weights.len() != logits.len() || weights.len() != widths.len() {
        return Err(Error::Contract(format!(
            "kl_regularizer got {} weights, {} dropout logits, {} widths",
            weights.len(),
            logits.len(),
            widths.len()
        )));
    }
    let mut total: Option<Var> = None;
    for ((&w, &theta), &k) in weights.iter().zip(logits).zip(widths) {
        let sq = tape.square(w)?;
        let norm = tape.sum(sq)?;
        let neg_theta = tape.neg(theta)?;
        let keep = tape.sigmoid(neg_theta)?;
        let weighted = tape.mul(keep, norm)?;
        let weight_term = tape.scale(weighted, lit(config.weight_coefficient()))?;

        // H(p) = -p log p - (1 - p) log(1 - p), with logs taken of the logit for stability.
        let p = tape.sigmoid(theta)?;
        let log_p = tape.log_sigmoid(theta)?;
        let log_keep = tape.log_sigmoid(neg_theta)?;
        let a = tape.mul(p, log_p)?;
        let b = tape.mul(keep, log_keep)?;
        let neg_h = tape.add(a, b)?;
        let entropy_term = tape.scale(neg_h, lit(k as f64 * config.entropy_coefficient()))?;

        let layer = tape.add(weight_term, entropy_term)?;
        total = Some(match total {
            None => layer,
            Some(t) => tape.add(t, layer)?,
        });
    }
    match total {
        Some(t) => Ok(t),
        None => tape.constant(Tensor::scalar(F::zero())),
    }
}

/// Value of [`kl_regularizer`] computed directly in `f64`.
pub fn kl_regularizer_value<F: Scalar>(
    weights: &[&Tensor<F>],
    states: &[DropoutLayerState<F>],
    config: &RegularizerConfig,
) -> Result<f64> {
    if weights.len() != states.len() {
        return Err(Error::Contract(format!(
            "kl_regularizer got {} weights and {} dropout states",
            weights.len(),
            states.len()
        )));
    }
    let mut total = 0.0;
    for (w, st) in weights.iter().zip(states) {
        let norm: f64 = w.data().iter().map(|&x| to_f64(x).powi(2)).sum();
        let theta = to_f64(st.p_logit);
        let p = sigmoid(theta);
        let h = -(p * log_sigmoid(theta) + (1.0 - p) * log_sigmoid(-theta));
        total += config.weight_coefficient() * (1.0 - p) * norm
            - st.width as f64 * config.entropy_coefficient() * h;
    }
    Ok(total)
}
