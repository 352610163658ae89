//! Training loop (likelihood loss plus dropout regularizer, Adam) and
//! Monte Carlo dropout inference.

use std::fmt::Write as _;
use std::path::Path;
use std::time::Instant;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::adam::{adam_step, AdamConfig, AdamState};
use crate::data::{network_input, Dataset, Normalization, PatchSet};
use crate::dropout::{kl_regularizer, RegularizerConfig};
use crate::error::{Error, Result};
use crate::likelihood::{head_nll, CdfMode, McPassSet, PassOutput, PredictiveDistribution};
use crate::model::{forward, forward_on_tape, NetworkConfig, NetworkWeights, ParamVars};
use crate::tape::{Tape, Var};
use crate::tensor::{lit, to_f64, Scalar, Tensor};

pub const DEFAULT_PASSES: usize = 50;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainingConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub iterations: usize,
    pub tau: f64,
    pub length_scale: f64,
    pub seed: u64,
    /// `N` in the regularizer; defaults to patches x pixels per patch when absent.
    pub dataset_size: Option<f64>,
    /// Wet/dry threshold in label units.
    pub rain_threshold: f64,
    pub log_interval: usize,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        TrainingConfig {
            learning_rate: 1e-4,
            batch_size: 10,
            iterations: 10_000,
            tau: 1e-5,
            length_scale: 1.0,
            seed: 0,
            dataset_size: None,
            rain_threshold: 0.005,
            log_interval: 100,
        }
    }
}

impl TrainingConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) || !(self.tau > 0.0) || !(self.length_scale > 0.0) {
            return Err(Error::Config("learning rate, tau and length scale must be positive".into()));
        }
        if self.batch_size == 0 || self.log_interval == 0 {
            return Err(Error::Config("batch size and log interval must be positive".into()));
        }
        if let Some(n) = self.dataset_size {
            if !(n > 0.0) {
                return Err(Error::Config(format!("dataset size {n} must be positive")));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LogRecord {
    pub iteration: usize,
    pub nll: f64,
    pub kl: f64,
    pub dropout_p: Vec<f64>,
    pub seconds: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainingLog {
    pub records: Vec<LogRecord>,
}

impl TrainingLog {
    fn header(&self, with_time: bool) -> String {
        let layers = self.records.first().map_or(0, |r| r.dropout_p.len());
        let mut h = "iteration,nll,kl".to_string();
        for i in 1..=layers {
            write!(h, ",p_layer{i}").unwrap();
        }
        if with_time {
            h.push_str(",seconds");
        }
        h
    }

    fn render(&self, with_time: bool) -> String {
        let mut out = self.header(with_time);
        out.push('\n');
        for r in &self.records {
            write!(out, "{},{:e},{:e}", r.iteration, r.nll, r.kl).unwrap();
            for p in &r.dropout_p {
                write!(out, ",{p:e}").unwrap();
            }
            if with_time {
                write!(out, ",{:.3}", r.seconds).unwrap();
            }
            out.push('\n');
        }
        out
    }

    /// `iteration,nll,kl,p_layer1,...,seconds`.
    pub fn to_csv(&self) -> String {
        self.render(true)
    }

    /// The CSV without the wall-clock column, for reproducibility checks.
    pub fn to_csv_without_time(&self) -> String {
        self.render(false)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }
}

/// Stacks patches into `[M, C, P, P]` inputs and `[M, 1, P, P]` labels.
pub fn batch_tensors<F: Scalar>(patches: &PatchSet, indices: &[usize]) -> Result<(Tensor<F>, Tensor<F>)> {
    let (p, c, m) = (patches.size, patches.channels, indices.len());
    let mut x = Vec::with_capacity(m * c * p * p);
    let mut y = Vec::with_capacity(m * p * p);
    for &i in indices {
        let patch = &patches.patches[i];
        x.extend(patch.input.iter().map(|&v| lit::<F>(v as f64)));
        y.extend(patch.label.iter().map(|&v| lit::<F>(v as f64)));
    }
    Ok((Tensor::new(vec![m, c, p, p], x)?, Tensor::new(vec![m, 1, p, p], y)?))
}

/// One objective evaluation on a tape: `(nll, kl, total)` handles plus parameter handles.
pub struct Objective {
    pub params: ParamVars,
    pub nll: Var,
    pub kl: Var,
    pub total: Var,
}

pub fn record_objective<F: Scalar, R: Rng + ?Sized>(
    tape: &mut Tape<F>,
    weights: &NetworkWeights<F>,
    x: &Tensor<F>,
    y: &Tensor<F>,
    rain_threshold: f64,
    regularizer: &RegularizerConfig,
    rng: Option<&mut R>,
) -> Result<Objective> {
    let params = ParamVars::register(tape, weights)?;
    let xv = tape.constant(x.clone())?;
    let head = forward_on_tape(tape, &params, &weights.config, xv, rng)?;
    let nll = head_nll(tape, y, &head, lit(rain_threshold))?;
    let widths: Vec<usize> = weights.dropout.iter().map(|d| d.width).collect();
    let kl = kl_regularizer(tape, &params.kernels[1..], &params.logits, &widths, regularizer)?;
    let total = tape.add(nll, kl)?;
    Ok(Objective { params, nll, kl, total })
}

fn diverged<F: Scalar>(iteration: usize, reason: String, last_good: &NetworkWeights<F>) -> Error {
    Error::Diverged {
        iteration,
        reason,
        last_good: last_good.to_checkpoint(&Default::default()).to_bytes(),
    }
}

/// Trains weights initialized from `config.seed`.
pub fn train<F: Scalar>(
    net: &NetworkConfig,
    config: &TrainingConfig,
    patches: &PatchSet,
) -> Result<(NetworkWeights<F>, TrainingLog)> {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let weights = NetworkWeights::init(net, &mut rng)?;
    train_from(weights, config, patches, &mut rng)
}

/// Continues training `weights`, drawing batches and masks from `rng`.
pub fn train_from<F: Scalar>(
    mut weights: NetworkWeights<F>,
    config: &TrainingConfig,
    patches: &PatchSet,
    rng: &mut ChaCha8Rng,
) -> Result<(NetworkWeights<F>, TrainingLog)> {
    config.validate()?;
    weights.check()?;
    if patches.is_empty() {
        return Err(Error::Contract("training needs at least one patch".into()));
    }
    if patches.channels != weights.config.input_channels {
        return Err(Error::Contract(format!(
            "patches have {} channels, network expects {}",
            patches.channels, weights.config.input_channels
        )));
    }
    let n = config
        .dataset_size
        .unwrap_or((patches.len() * patches.size * patches.size) as f64);
    let regularizer = RegularizerConfig::new(config.length_scale, config.tau, n)?;
    let names = weights.param_names();
    let name_refs: Vec<&str> = names.iter().map(String::as_str).collect();
    let initial = weights.params();
    let mut adam = AdamState::new(AdamConfig::default(), initial.iter());
    let mut log = TrainingLog::default();
    let start = Instant::now();
    let mut indices = vec![0usize; config.batch_size];

    for it in 1..=config.iterations {
        for i in indices.iter_mut() {
            *i = rng.gen_range(0..patches.len());
        }
        let (x, y) = batch_tensors::<F>(patches, &indices)?;
        let mut tape = Tape::new();
        let obj = record_objective(&mut tape, &weights, &x, &y, config.rain_threshold, &regularizer, Some(&mut *rng))
            .map_err(|e| diverged(it, e.to_string(), &weights))?;
        let mut grads = tape.backward(obj.total).map_err(|e| diverged(it, e.to_string(), &weights))?;
        let mut params = weights.params();
        let grad_list: Vec<Tensor<F>> = obj
            .params
            .in_order()
            .into_iter()
            .zip(&params)
            .map(|(v, p)| grads.take(v).unwrap_or_else(|| Tensor::zeros(p.shape().to_vec())))
            .collect();
        {
            let mut refs: Vec<&mut Tensor<F>> = params.iter_mut().collect();
            let grefs: Vec<&Tensor<F>> = grad_list.iter().collect();
            adam_step(&mut refs, &grefs, &name_refs, &mut adam, config.learning_rate)
                .map_err(|e| diverged(it, e.to_string(), &weights))?;
        }
        if it % config.log_interval == 0 || it == config.iterations {
            log.records.push(LogRecord {
                iteration: it,
                nll: to_f64(tape.value(obj.nll).item()?),
                kl: to_f64(tape.value(obj.kl).item()?),
                dropout_p: weights.dropout_probabilities(),
                seconds: start.elapsed().as_secs_f64(),
            });
        }
        weights.set_params(params)?;
    }
    Ok((weights, log))
}

/// Independent per-index seed derived from `seed`.
pub fn derive_seed(seed: u64, index: u64) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng.next_u64()
}

/// Mask RNG of pass `t`.
pub fn pass_rng(seed: u64, t: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(t as u64);
    rng
}

/// `T` stochastic passes over one `[1, C, H, W]` input with fresh masks,
/// converted to physical units with `norm`.
pub fn mc_predict<F: Scalar>(
    weights: &NetworkWeights<F>,
    input: &Tensor<F>,
    passes: usize,
    seed: u64,
    norm: &Normalization,
) -> Result<McPassSet> {
    if passes == 0 {
        return Err(Error::Contract("mc_predict needs T >= 1".into()));
    }
    let shape = input.shape();
    if shape.len() != 4 || shape[0] != 1 {
        return Err(Error::Shape(format!("mc_predict expects one [1, C, H, W] input, got {shape:?}")));
    }
    let (h, w) = (shape[2], shape[3]);
    let inv = 1.0 / norm.precip_scale;
    let log_var_shift = 2.0 * inv.ln();
    let outputs = (0..passes)
        .into_par_iter()
        .map(|t| {
            let out = forward(input, weights, Some(&mut pass_rng(seed, t)))?;
            Ok(PassOutput {
                location: out.location.data().iter().map(|&v| to_f64(v) * inv).collect(),
                log_var: out.log_var.data().iter().map(|&v| to_f64(v) + log_var_shift).collect(),
                logit: out.logit.map(|l| l.to_f64_vec()),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    McPassSet::new(weights.config.model_tag, h, w, outputs)
}

pub fn predict_distribution(passes: &McPassSet, cdf_mode: CdfMode) -> Result<PredictiveDistribution> {
    PredictiveDistribution::from_passes(passes, cdf_mode)
}

/// Network input tensor `[1, 2, H, W]` for `day` of `ds`.
pub fn day_input<F: Scalar>(ds: &Dataset, day: usize, factor: usize, norm: &Normalization) -> Result<Tensor<F>> {
    let [lr, elev] = network_input(&ds.days[day], &ds.elevation, factor, norm)?;
    let data = lr.values.iter().chain(&elev.values).map(|&v| lit::<F>(v as f64)).collect();
    Tensor::new(vec![1, 2, ds.height(), ds.width()], data)
}

/// MC pass sets for every day of `ds`; day `d` uses seed `derive_seed(seed, d)`.
pub fn predict_dataset<F: Scalar>(
    weights: &NetworkWeights<F>,
    ds: &Dataset,
    factor: usize,
    norm: &Normalization,
    passes: usize,
    seed: u64,
) -> Result<Vec<McPassSet>> {
    (0..ds.days.len())
        .map(|d| {
            let x = day_input::<F>(ds, d, factor, norm)?;
            mc_predict(weights, &x, passes, derive_seed(seed, d as u64), norm)
        })
        .collect()
}
