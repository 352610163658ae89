//! Likelihood heads: training losses, Monte Carlo predictive moments,
//! lognormal moment matching and predictive CDFs.
//!
//! Every head emits a location channel, an unconstrained log-variance `s`
//! (`sigma^2 = exp(s)`) and, for the discrete-continuous (hurdle) heads, a
//! rain logit `phi` with `p = sigmoid(phi)`. Pixels with `y > threshold` are
//! wet; the rest belong to the dry atom.

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use statrs::function::erf::erfc;

use crate::error::{Error, Result};
use crate::tape::{sigmoid, Tape, Var};
use crate::tensor::{lit, Scalar, Tensor};

pub const DEFAULT_RAIN_THRESHOLD: f64 = 0.5;
/// Below this mean rain probability a predictive distribution collapses to the dry atom.
pub const MIN_RAIN_PROB: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ModelTag {
    Gaussian,
    DcGaussian,
    DcLognormal,
}

impl ModelTag {
    pub const ALL: [ModelTag; 3] = [ModelTag::Gaussian, ModelTag::DcGaussian, ModelTag::DcLognormal];

    pub fn as_str(self) -> &'static str {
        match self {
            ModelTag::Gaussian => "gaussian",
            ModelTag::DcGaussian => "dc-gaussian",
            ModelTag::DcLognormal => "dc-lognormal",
        }
    }

    pub fn code(self) -> u8 {
        match self {
            ModelTag::Gaussian => 0,
            ModelTag::DcGaussian => 1,
            ModelTag::DcLognormal => 2,
        }
    }

    pub fn from_code(code: u8) -> Option<ModelTag> {
        ModelTag::ALL.into_iter().find(|t| t.code() == code)
    }

    pub fn output_channels(self) -> usize {
        if self.is_hurdle() {
            3
        } else {
            2
        }
    }

    pub fn is_hurdle(self) -> bool {
        !matches!(self, ModelTag::Gaussian)
    }
}

impl fmt::Display for ModelTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ModelTag {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.replace('_', "-").as_str() {
            "gaussian" => Ok(ModelTag::Gaussian),
            "dc-gaussian" => Ok(ModelTag::DcGaussian),
            "dc-lognormal" => Ok(ModelTag::DcLognormal),
            other => Err(Error::Config(format!("unknown model `{other}`"))),
        }
    }
}

/// Head channels on a tape, each shaped `[N, 1, H, W]`.
#[derive(Clone, Copy, Debug)]
pub struct HeadVars {
    pub tag: ModelTag,
    pub location: Var,
    pub log_var: Var,
    pub logit: Option<Var>,
}

fn check_head<F: Scalar>(tape: &Tape<F>, y: &Tensor<F>, head: &HeadVars, want: ModelTag) -> Result<()> {
    if head.tag != want {
        return Err(Error::Contract(format!(
            "{want} loss applied to a {} head",
            head.tag
        )));
    }
    if want.is_hurdle() && head.logit.is_none() {
        return Err(Error::Contract(format!("{want} head has no rain logit")));
    }
    for v in [Some(head.location), Some(head.log_var), head.logit].into_iter().flatten() {
        if tape.value(v).shape() != y.shape() {
            return Err(Error::Shape(format!(
                "target shape {:?} differs from head shape {:?}",
                y.shape(),
                tape.value(v).shape()
            )));
        }
    }
    y.check_finite("loss target")
}

/// `(1 / 2N) * sum ||F(X) - Y||^2`, `N` being the number of examples (leading dimension).
pub fn mse_loss<F: Scalar>(tape: &mut Tape<F>, prediction: Var, target: &Tensor<F>) -> Result<Var> {
    if tape.value(prediction).shape() != target.shape() {
        return Err(Error::Shape(format!(
            "prediction {:?} vs target {:?}",
            tape.value(prediction).shape(),
            target.shape()
        )));
    }
    let n = target.shape()[0];
    let y = tape.constant(target.clone())?;
    let d = tape.sub(prediction, y)?;
    let sq = tape.square(d)?;
    let s = tape.sum(sq)?;
    tape.scale(s, lit(0.5 / n as f64))
}

/// `(1 / 2D) * sum_i [exp(-s_i) (y_i - yhat_i)^2 + s_i]`.
pub fn gaussian_nll<F: Scalar>(tape: &mut Tape<F>, y: &Tensor<F>, head: &HeadVars) -> Result<Var> {
    check_head(tape, y, head, ModelTag::Gaussian)?;
    let d = y.len() as f64;
    let yv = tape.constant(y.clone())?;
    let resid = tape.sub(yv, head.location)?;
    let sq = tape.square(resid)?;
    let neg_s = tape.neg(head.log_var)?;
    let prec = tape.exp(neg_s)?;
    let fit = tape.mul(prec, sq)?;
    let total = tape.add(fit, head.log_var)?;
    let s = tape.sum(total)?;
    tape.scale(s, lit(0.5 / d))
}

/// Shared hurdle loss given the continuous-part residual on the wet pixels.
fn hurdle_nll<F: Scalar>(
    tape: &mut Tape<F>,
    head: &HeadVars,
    residual: Var,
    wet: &[bool],
) -> Result<Var> {
    let logit = head.logit.expect("checked by check_head");
    let d = wet.len() as f64;
    let wet_w: Vec<F> = wet.iter().map(|&w| if w { F::one() } else { F::zero() }).collect();
    let dry_w: Vec<F> = wet.iter().map(|&w| if w { F::zero() } else { F::one() }).collect();

    let log_p = tape.log_sigmoid(logit)?;
    let neg_phi = tape.neg(logit)?;
    let log_q = tape.log_sigmoid(neg_phi)?;
    let sq = tape.square(residual)?;
    let neg_s = tape.neg(head.log_var)?;
    let prec = tape.exp(neg_s)?;
    let fit = tape.mul(prec, sq)?;
    // 0.5 * exp(-s) r^2 + 0.5 * s - log p on wet pixels
    let cont = tape.add(fit, head.log_var)?;
    let cont = tape.scale(cont, lit(0.5))?;
    let wet_term = tape.sub(cont, log_p)?;
    let wet_sum = tape.weighted_sum(wet_term, wet_w)?;
    let dry_sum = tape.weighted_sum(log_q, dry_w)?;
    let total = tape.sub(wet_sum, dry_sum)?;
    tape.scale(total, lit(1.0 / d))
}

/// Discrete-continuous Gaussian loss:
/// `-(1/D) [ sum_wet (log p - exp(-s)(y - yhat)^2 / 2 - s / 2) + sum_dry log(1 - p) ]`.
pub fn dc_gaussian_nll<F: Scalar>(
    tape: &mut Tape<F>,
    y: &Tensor<F>,
    head: &HeadVars,
    rain_threshold: F,
) -> Result<Var> {
    check_head(tape, y, head, ModelTag::DcGaussian)?;
    let wet: Vec<bool> = y.data().iter().map(|&v| v > rain_threshold).collect();
    let yv = tape.constant(y.clone())?;
    let resid = tape.sub(yv, head.location)?;
    hurdle_nll(tape, head, resid, &wet)
}

/// Discrete-continuous lognormal loss with `log y` in place of `y` on wet
/// pixels. The `-log y` Jacobian term does not depend on the parameters and
/// is left out here; [`pixel_nll_mixture`] includes it.
pub fn dc_lognormal_nll<F: Scalar>(
    tape: &mut Tape<F>,
    y: &Tensor<F>,
    head: &HeadVars,
    rain_threshold: F,
) -> Result<Var> {
    check_head(tape, y, head, ModelTag::DcLognormal)?;
    let wet: Vec<bool> = y.data().iter().map(|&v| v > rain_threshold).collect();
    let mut log_y = Vec::with_capacity(y.len());
    for (i, (&v, &w)) in y.data().iter().zip(&wet).enumerate() {
        if w {
            if v <= F::zero() {
                return Err(Error::Domain(format!(
                    "wet pixel {i} has non-positive amount {v}"
                )));
            }
            log_y.push(v.ln());
        } else {
            log_y.push(F::zero());
        }
    }
    let ly = tape.constant(Tensor::new(y.shape().to_vec(), log_y)?)?;
    let resid = tape.sub(ly, head.location)?;
    hurdle_nll(tape, head, resid, &wet)
}

/// Training loss for `head.tag`.
pub fn head_nll<F: Scalar>(
    tape: &mut Tape<F>,
    y: &Tensor<F>,
    head: &HeadVars,
    rain_threshold: F,
) -> Result<Var> {
    match head.tag {
        ModelTag::Gaussian => gaussian_nll(tape, y, head),
        ModelTag::DcGaussian => dc_gaussian_nll(tape, y, head, rain_threshold),
        ModelTag::DcLognormal => dc_lognormal_nll(tape, y, head, rain_threshold),
    }
}

/// One Monte Carlo pass: head channels for every pixel, in physical units
/// (mm/day for the location of Gaussian heads, log mm/day for lognormal).
#[derive(Clone, Debug, PartialEq)]
pub struct PassOutput {
    pub location: Vec<f64>,
    pub log_var: Vec<f64>,
    pub logit: Option<Vec<f64>>,
}

/// One pass's head values at a single pixel.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PassSample {
    pub location: f64,
    pub variance: f64,
    pub rain_prob: f64,
}

impl PassSample {
    pub fn new(location: f64, variance: f64, rain_prob: f64) -> Self {
        PassSample {
            location,
            variance,
            rain_prob,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct McPassSet {
    pub tag: ModelTag,
    pub height: usize,
    pub width: usize,
    pub passes: Vec<PassOutput>,
}

impl McPassSet {
    pub fn new(tag: ModelTag, height: usize, width: usize, passes: Vec<PassOutput>) -> Result<Self> {
        if passes.is_empty() {
            return Err(Error::Contract("a pass set needs at least one pass".into()));
        }
        let n = height * width;
        for (t, p) in passes.iter().enumerate() {
            let logit_ok = match (&p.logit, tag.is_hurdle()) {
                (Some(l), true) => l.len() == n,
                (None, false) => true,
                _ => false,
            };
            if p.location.len() != n || p.log_var.len() != n || !logit_ok {
                return Err(Error::Shape(format!(
                    "pass {t} does not match a {height}x{width} {tag} head"
                )));
            }
        }
        Ok(McPassSet {
            tag,
            height,
            width,
            passes,
        })
    }

    pub fn len(&self) -> usize {
        self.passes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.passes.is_empty()
    }

    pub fn pixel_count(&self) -> usize {
        self.height * self.width
    }

    /// Per-pass values at `pixel`.
    pub fn samples(&self, pixel: usize) -> Vec<PassSample> {
        self.passes
            .iter()
            .map(|p| PassSample {
                location: p.location[pixel],
                variance: p.log_var[pixel].exp(),
                rain_prob: p.logit.as_ref().map_or(1.0, |l| sigmoid(l[pixel])),
            })
            .collect()
    }
}

/// First two predictive moments and mean rain probability at one pixel.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Moments {
    pub mean: f64,
    pub variance: f64,
    pub rain_prob: f64,
}

fn clamp_variance(e2: f64, mean: f64, pixel: usize) -> f64 {
    let var = e2 - mean * mean;
    if var < 0.0 {
        if -var > 1e-6 * e2.abs() {
            log::warn!("negative predictive variance {var} at pixel {pixel} clamped to 0");
        }
        0.0
    } else {
        var
    }
}

/// Gaussian head: mean of the pass means; variance is the mean of the pass
/// variances plus the variance of the pass means.
pub fn moments_gaussian(samples: &[PassSample]) -> Result<Moments> {
    if samples.is_empty() {
        return Err(Error::Contract("moments need T >= 1 passes".into()));
    }
    let t = samples.len() as f64;
    let mean = samples.iter().map(|s| s.location).sum::<f64>() / t;
    let aleatoric = samples.iter().map(|s| s.variance).sum::<f64>() / t;
    let second = samples.iter().map(|s| s.location * s.location).sum::<f64>() / t;
    let epistemic = (second - mean * mean).max(0.0);
    Ok(Moments {
        mean,
        variance: aleatoric + epistemic,
        rain_prob: 1.0,
    })
}

/// Hurdle Gaussian: `E = mean(p y)`, `E2 = mean(p (y^2 + sigma^2))`, `Var = E2 - E^2`.
pub fn moments_dc_gaussian(samples: &[PassSample], pixel: usize) -> Result<Moments> {
    if samples.is_empty() {
        return Err(Error::Contract("moments need T >= 1 passes".into()));
    }
    let t = samples.len() as f64;
    let mean = samples.iter().map(|s| s.rain_prob * s.location).sum::<f64>() / t;
    let e2 = samples
        .iter()
        .map(|s| s.rain_prob * (s.location * s.location + s.variance))
        .sum::<f64>()
        / t;
    let rain_prob = samples.iter().map(|s| s.rain_prob).sum::<f64>() / t;
    Ok(Moments {
        mean,
        variance: clamp_variance(e2, mean, pixel),
        rain_prob,
    })
}

/// Hurdle lognormal: `E = mean(p exp(mu + sigma^2 / 2))`,
/// `E2 = mean(p exp(2 mu + 2 sigma^2))`, `Var = E2 - E^2`.
pub fn moments_dc_lognormal(samples: &[PassSample], pixel: usize) -> Result<Moments> {
    if samples.is_empty() {
        return Err(Error::Contract("moments need T >= 1 passes".into()));
    }
    let t = samples.len() as f64;
    let mut mean = 0.0;
    let mut e2 = 0.0;
    for s in samples {
        let m1 = (s.location + 0.5 * s.variance).exp();
        let m2 = (2.0 * s.location + 2.0 * s.variance).exp();
        if !m1.is_finite() || !m2.is_finite() {
            return Err(Error::NonFinite(format!(
                "lognormal moments at pixel {pixel} (mu={}, sigma^2={})",
                s.location, s.variance
            )));
        }
        mean += s.rain_prob * m1;
        e2 += s.rain_prob * m2;
    }
    mean /= t;
    e2 /= t;
    let rain_prob = samples.iter().map(|s| s.rain_prob).sum::<f64>() / t;
    Ok(Moments {
        mean,
        variance: clamp_variance(e2, mean, pixel),
        rain_prob,
    })
}

pub fn pixel_moments(tag: ModelTag, samples: &[PassSample], pixel: usize) -> Result<Moments> {
    match tag {
        ModelTag::Gaussian => moments_gaussian(samples),
        ModelTag::DcGaussian => moments_dc_gaussian(samples, pixel),
        ModelTag::DcLognormal => moments_dc_lognormal(samples, pixel),
    }
}

fn grid_moments(passes: &McPassSet, want: ModelTag) -> Result<Vec<Moments>> {
    if passes.tag != want {
        return Err(Error::Contract(format!(
            "{want} moments requested for a {} pass set",
            passes.tag
        )));
    }
    (0..passes.pixel_count())
        .map(|i| pixel_moments(want, &passes.samples(i), i))
        .collect()
}

pub fn mc_moments_gaussian(passes: &McPassSet) -> Result<Vec<Moments>> {
    grid_moments(passes, ModelTag::Gaussian)
}

pub fn mc_moments_dc_gaussian(passes: &McPassSet) -> Result<Vec<Moments>> {
    grid_moments(passes, ModelTag::DcGaussian)
}

pub fn mc_moments_dc_lognormal(passes: &McPassSet) -> Result<Vec<Moments>> {
    grid_moments(passes, ModelTag::DcLognormal)
}

/// Lognormal `(mu, sigma)` with the given mean and variance:
/// `sigma^2 = log(1 + Var / E^2)`, `mu = log E - sigma^2 / 2`.
pub fn lognormal_moment_match(mean: f64, variance: f64) -> Result<(f64, f64)> {
    if !(mean > 0.0) || !mean.is_finite() {
        return Err(Error::Domain(format!(
            "lognormal moment matching needs a positive mean, got {mean}"
        )));
    }
    if variance < 0.0 || !variance.is_finite() {
        return Err(Error::Domain(format!(
            "lognormal moment matching needs a non-negative variance, got {variance}"
        )));
    }
    let s2 = (variance / (mean * mean)).ln_1p();
    Ok((mean.ln() - 0.5 * s2, s2.sqrt()))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CdfMode {
    /// A single distribution of the head's family matched to the MC moments.
    MomentMatched,
    /// The exact equally weighted mixture over passes.
    McMixture,
}

impl CdfMode {
    pub fn as_str(self) -> &'static str {
        match self {
            CdfMode::MomentMatched => "matched",
            CdfMode::McMixture => "mixture",
        }
    }
}

impl FromStr for CdfMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "matched" | "moment_matched" => Ok(CdfMode::MomentMatched),
            "mixture" | "mc_mixture" => Ok(CdfMode::McMixture),
            other => Err(Error::Config(format!("unknown cdf mode `{other}`"))),
        }
    }
}

/// Predictive distribution at one pixel.
///
/// `loc`/`scale` are the matched parameters: `(E, sqrt(Var))` for the
/// Gaussian head, the rain-conditional `(m, sqrt(v))` for the hurdle Gaussian
/// and the rain-conditional lognormal `(mu, sigma)` for the hurdle lognormal.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PixelPredictive {
    pub tag: ModelTag,
    pub mean: f64,
    pub variance: f64,
    pub rain_prob: f64,
    pub loc: f64,
    pub scale: f64,
}

impl PixelPredictive {
    pub fn from_moments(tag: ModelTag, m: Moments) -> Result<Self> {
        let (loc, scale) = match tag {
            ModelTag::Gaussian => (m.mean, m.variance.sqrt()),
            _ if m.rain_prob < MIN_RAIN_PROB => (0.0, 0.0),
            ModelTag::DcGaussian => {
                let (cm, cv) = conditional_moments(m);
                (cm, cv.sqrt())
            }
            ModelTag::DcLognormal => {
                let (cm, cv) = conditional_moments(m);
                lognormal_moment_match(cm, cv)?
            }
        };
        Ok(PixelPredictive {
            tag,
            mean: m.mean,
            variance: m.variance,
            rain_prob: m.rain_prob,
            loc,
            scale,
        })
    }

    /// True when the rain probability is too small to carry a continuous part.
    pub fn is_collapsed(&self) -> bool {
        self.tag.is_hurdle() && self.rain_prob < MIN_RAIN_PROB
    }
}

/// Rain-conditional mean and variance from `(E, Var, p)`: `E/p` and `E2/p - (E/p)^2`.
pub fn conditional_moments(m: Moments) -> (f64, f64) {
    let e2 = m.variance + m.mean * m.mean;
    let cm = m.mean / m.rain_prob;
    let cv = (e2 / m.rain_prob - cm * cm).max(0.0);
    (cm, cv)
}

pub fn normal_cdf(z: f64) -> f64 {
    0.5 * erfc(-z / std::f64::consts::SQRT_2)
}

fn normal_log_pdf(y: f64, mean: f64, variance: f64) -> f64 {
    -0.5 * ((2.0 * PI * variance).ln() + (y - mean).powi(2) / variance)
}

fn step_cdf(y: f64, loc: f64, scale: f64, lognormal: bool) -> Result<f64> {
    if lognormal && y <= 0.0 {
        return Ok(0.0);
    }
    let x = if lognormal { y.ln() } else { y };
    if scale > 0.0 {
        Ok(normal_cdf((x - loc) / scale))
    } else if x == loc {
        Ok(0.5)
    } else {
        Err(Error::Domain(format!(
            "moment-matched CDF with zero variance evaluated away from its mean ({y} vs {loc})"
        )))
    }
}

/// Continuous-part CDF of one pass (`component(y)` and its left limit coincide).
fn pass_component_cdf(tag: ModelTag, s: &PassSample, y: f64) -> f64 {
    let sd = s.variance.sqrt();
    match tag {
        ModelTag::DcLognormal => {
            if y <= 0.0 {
                0.0
            } else {
                normal_cdf((y.ln() - s.location) / sd)
            }
        }
        _ => normal_cdf((y - s.location) / sd),
    }
}

/// `(F(y-), F(y))` of the predictive distribution. The two differ only at the
/// dry atom `y = 0` of hurdle heads.
pub fn predictive_cdf_interval(
    dist: &PixelPredictive,
    passes: Option<&[PassSample]>,
    y: f64,
    mode: CdfMode,
) -> Result<(f64, f64)> {
    let atom = |p: f64| if y >= 0.0 { 1.0 - p } else { 0.0 };
    let atom_left = |p: f64| if y > 0.0 { 1.0 - p } else { 0.0 };
    match mode {
        CdfMode::MomentMatched => match dist.tag {
            ModelTag::Gaussian => {
                let c = step_cdf(y, dist.loc, dist.scale, false)?;
                Ok((c, c))
            }
            _ if dist.is_collapsed() => Ok((atom_left(0.0), atom(0.0))),
            tag => {
                let p = dist.rain_prob;
                let c = step_cdf(y, dist.loc, dist.scale, tag == ModelTag::DcLognormal)?;
                Ok((atom_left(p) + p * c, atom(p) + p * c))
            }
        },
        CdfMode::McMixture => {
            let samples = passes.ok_or_else(|| {
                Error::Contract("mixture CDF needs the Monte Carlo passes".into())
            })?;
            if samples.is_empty() {
                return Err(Error::Contract("mixture CDF over zero passes".into()));
            }
            let t = samples.len() as f64;
            let (mut lo, mut hi) = (0.0, 0.0);
            for s in samples {
                let c = pass_component_cdf(dist.tag, s, y);
                if dist.tag.is_hurdle() {
                    lo += atom_left(s.rain_prob) + s.rain_prob * c;
                    hi += atom(s.rain_prob) + s.rain_prob * c;
                } else {
                    lo += c;
                    hi += c;
                }
            }
            Ok((lo / t, hi / t))
        }
    }
}

/// Predictive CDF `P(Y <= y)`.
pub fn predictive_cdf(
    dist: &PixelPredictive,
    passes: Option<&[PassSample]>,
    y: f64,
    mode: CdfMode,
) -> Result<f64> {
    predictive_cdf_interval(dist, passes, y, mode).map(|(_, hi)| hi)
}

/// Log-likelihood of `y` under one component: the dry event `y <= threshold`
/// scores its probability, a wet amount its density (in units of `y`).
fn component_log_lik(tag: ModelTag, loc: f64, variance: f64, p: f64, y: f64, threshold: f64) -> f64 {
    const TINY: f64 = 1e-300;
    let dry = y <= threshold;
    match tag {
        ModelTag::Gaussian => {
            if dry {
                normal_cdf((threshold - loc) / variance.sqrt()).max(TINY).ln()
            } else {
                normal_log_pdf(y, loc, variance)
            }
        }
        ModelTag::DcGaussian => {
            if dry {
                (1.0 - p).max(TINY).ln()
            } else {
                p.max(TINY).ln() + normal_log_pdf(y, loc, variance)
            }
        }
        ModelTag::DcLognormal => {
            if dry {
                (1.0 - p).max(TINY).ln()
            } else {
                p.max(TINY).ln() + normal_log_pdf(y.ln(), loc, variance) - y.ln()
            }
        }
    }
}

/// Full negative log-likelihood of one observation under the MC mixture,
/// including every constant (the lognormal Jacobian among them).
pub fn pixel_nll_mixture(tag: ModelTag, samples: &[PassSample], y: f64, threshold: f64) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::Contract("NLL over zero passes".into()));
    }
    let logs: Vec<f64> = samples
        .iter()
        .map(|s| component_log_lik(tag, s.location, s.variance, s.rain_prob, y, threshold))
        .collect();
    let max = logs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + (logs.iter().map(|l| (l - max).exp()).sum::<f64>() / logs.len() as f64).ln();
    Ok(-lse)
}

/// Full negative log-likelihood of one observation under the matched distribution.
pub fn pixel_nll_matched(dist: &PixelPredictive, y: f64, threshold: f64) -> Result<f64> {
    if dist.is_collapsed() {
        return Ok(if y <= threshold { 0.0 } else { f64::INFINITY });
    }
    let variance = (dist.scale * dist.scale).max(1e-300);
    Ok(-component_log_lik(dist.tag, dist.loc, variance, dist.rain_prob, y, threshold))
}

/// Predictive distribution for a whole grid.
#[derive(Clone, Debug, PartialEq)]
pub struct PredictiveDistribution {
    pub tag: ModelTag,
    pub cdf_mode: CdfMode,
    pub height: usize,
    pub width: usize,
    pub pixels: Vec<PixelPredictive>,
}

impl PredictiveDistribution {
    pub fn from_passes(passes: &McPassSet, cdf_mode: CdfMode) -> Result<Self> {
        let pixels = grid_moments(passes, passes.tag)?
            .into_iter()
            .map(|m| PixelPredictive::from_moments(passes.tag, m))
            .collect::<Result<Vec<_>>>()?;
        Ok(PredictiveDistribution {
            tag: passes.tag,
            cdf_mode,
            height: passes.height,
            width: passes.width,
            pixels,
        })
    }

    pub fn field(&self, f: impl Fn(&PixelPredictive) -> f64) -> Vec<f64> {
        self.pixels.iter().map(f).collect()
    }
}
