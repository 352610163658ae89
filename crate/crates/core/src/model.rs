//! Residual super-resolution network with likelihood heads.
//!
//! `L = kernel_sizes.len()` same-padded convolutions, ReLU after every layer
//! but the last, concrete dropout on the input of every layer after the
//! first. The last layer emits the head channels; precipitation (input
//! channel 0) is added to the location channel.

use std::collections::BTreeMap;
use std::path::Path;

use rand::Rng;

use crate::checkpoint::Checkpoint;
use crate::dropout::{apply_concrete_dropout, DropoutLayerState, DEFAULT_INITIAL_P, DEFAULT_TEMPERATURE};
use crate::error::{Error, Result};
use crate::likelihood::{HeadVars, ModelTag};
use crate::tape::{Tape, Var};
use crate::tensor::{lit, to_f64, Scalar, Tensor};

pub const INPUT_CHANNELS: usize = 2;

#[derive(Clone, Debug, PartialEq)]
pub struct NetworkConfig {
    pub kernel_sizes: Vec<usize>,
    pub filters: Vec<usize>,
    pub model_tag: ModelTag,
    pub input_channels: usize,
    pub temperature: f64,
}

impl NetworkConfig {
    pub fn new(kernel_sizes: Vec<usize>, filters: Vec<usize>, model_tag: ModelTag) -> Result<Self> {
        let c = NetworkConfig {
            kernel_sizes,
            filters,
            model_tag,
            input_channels: INPUT_CHANNELS,
            temperature: DEFAULT_TEMPERATURE,
        };
        c.validate()?;
        Ok(c)
    }

    /// Kernels 9, 3, 5 with two hidden layers of 64 filters.
    pub fn desk_scale(model_tag: ModelTag) -> Self {
        NetworkConfig::new(vec![9, 3, 5], vec![64, 64], model_tag).expect("valid default")
    }

    pub fn validate(&self) -> Result<()> {
        if self.kernel_sizes.len() != self.filters.len() + 1 {
            return Err(Error::Config(format!(
                "{} kernel sizes need {} filter counts, got {}",
                self.kernel_sizes.len(),
                self.kernel_sizes.len().saturating_sub(1),
                self.filters.len()
            )));
        }
        if let Some(k) = self.kernel_sizes.iter().find(|&&k| k % 2 == 0) {
            return Err(Error::Config(format!("kernel size {k} is not odd")));
        }
        if self.filters.contains(&0) || self.input_channels == 0 {
            return Err(Error::Config("filter and channel counts must be positive".into()));
        }
        if !(self.temperature > 0.0) {
            return Err(Error::Config(format!("temperature {} must be positive", self.temperature)));
        }
        Ok(())
    }

    pub fn output_channels(&self) -> usize {
        self.model_tag.output_channels()
    }

    /// `(in, out)` channel counts of each layer.
    pub fn layer_channels(&self) -> Vec<(usize, usize)> {
        let mut widths = vec![self.input_channels];
        widths.extend(&self.filters);
        widths.push(self.output_channels());
        widths.windows(2).map(|w| (w[0], w[1])).collect()
    }

    pub fn to_header(&self) -> BTreeMap<String, String> {
        let join = |v: &[usize]| v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",");
        BTreeMap::from([
            ("network.model".to_string(), self.model_tag.to_string()),
            ("network.kernel_sizes".to_string(), join(&self.kernel_sizes)),
            ("network.filters".to_string(), join(&self.filters)),
            ("network.input_channels".to_string(), self.input_channels.to_string()),
            ("network.temperature".to_string(), format!("{:e}", self.temperature)),
        ])
    }

    pub fn from_header(h: &BTreeMap<String, String>) -> Result<Self> {
        let get = |k: &str| {
            h.get(k)
                .ok_or_else(|| Error::Config(format!("checkpoint header lacks `{k}`")))
        };
        let list = |k: &str| -> Result<Vec<usize>> {
            get(k)?
                .split(',')
                .map(|x| {
                    x.trim()
                        .parse()
                        .map_err(|_| Error::Config(format!("bad integer `{x}` in `{k}`")))
                })
                .collect()
        };
        let c = NetworkConfig {
            kernel_sizes: list("network.kernel_sizes")?,
            filters: list("network.filters")?,
            model_tag: get("network.model")?.parse()?,
            input_channels: get("network.input_channels")?
                .parse()
                .map_err(|_| Error::Config("bad network.input_channels".into()))?,
            temperature: get("network.temperature")?
                .parse()
                .map_err(|_| Error::Config("bad network.temperature".into()))?,
        };
        c.validate()?;
        Ok(c)
    }
}

#[derive(Clone, Debug)]
pub struct NetworkWeights<F> {
    pub config: NetworkConfig,
    /// `[out, in, k, k]` per layer.
    pub kernels: Vec<Tensor<F>>,
    /// `[out]` per layer.
    pub biases: Vec<Tensor<F>>,
    /// One per hidden layer, gating the input of layer `i + 1`.
    pub dropout: Vec<DropoutLayerState<F>>,
}

impl<F: Scalar> NetworkWeights<F> {
    /// Kernels uniform in `(-1/sqrt(fan_in), 1/sqrt(fan_in))`, zero biases,
    /// dropout probability 0.1.
    pub fn init<R: Rng + ?Sized>(config: &NetworkConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let mut kernels = Vec::new();
        let mut biases = Vec::new();
        for ((cin, cout), &k) in config.layer_channels().into_iter().zip(&config.kernel_sizes) {
            let fan_in = (cin * k * k) as f64;
            let bound = 1.0 / fan_in.sqrt();
            let data = (0..cout * cin * k * k)
                .map(|_| lit(rng.gen_range(-bound..bound)))
                .collect();
            kernels.push(Tensor::new(vec![cout, cin, k, k], data)?);
            biases.push(Tensor::zeros(vec![cout]));
        }
        let dropout = config
            .filters
            .iter()
            .map(|&f| DropoutLayerState::with_probability(DEFAULT_INITIAL_P, config.temperature, f))
            .collect::<Result<_>>()?;
        Ok(NetworkWeights {
            config: config.clone(),
            kernels,
            biases,
            dropout,
        })
    }

    /// Every kernel and bias zero.
    pub fn zeros(config: &NetworkConfig) -> Result<Self> {
        let mut w = NetworkWeights::init(config, &mut rand::rngs::mock::StepRng::new(0, 0))?;
        for t in w.kernels.iter_mut().chain(w.biases.iter_mut()) {
            t.data_mut().iter_mut().for_each(|x| *x = F::zero());
        }
        Ok(w)
    }

    pub fn check(&self) -> Result<()> {
        self.config.validate()?;
        let layers = self.config.layer_channels();
        if self.kernels.len() != layers.len()
            || self.biases.len() != layers.len()
            || self.dropout.len() != self.config.filters.len()
        {
            return Err(Error::Contract("weights do not match the network depth".into()));
        }
        for (i, ((cin, cout), &k)) in layers.into_iter().zip(&self.config.kernel_sizes).enumerate() {
            if self.kernels[i].shape() != [cout, cin, k, k] || self.biases[i].shape() != [cout] {
                return Err(Error::Contract(format!(
                    "layer {} has kernel {:?} and bias {:?}, config wants [{cout}, {cin}, {k}, {k}]",
                    i + 1,
                    self.kernels[i].shape(),
                    self.biases[i].shape()
                )));
            }
        }
        Ok(())
    }

    pub fn layer_count(&self) -> usize {
        self.kernels.len()
    }

    pub fn dropout_probabilities(&self) -> Vec<f64> {
        self.dropout.iter().map(|d| d.probability()).collect()
    }

    /// Parameter names in the order of [`NetworkWeights::params`].
    pub fn param_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        for i in 1..=self.layer_count() {
            names.push(format!("conv{i}.weight"));
            names.push(format!("conv{i}.bias"));
        }
        for i in 1..=self.dropout.len() {
            names.push(format!("dropout{i}.p_logit"));
        }
        names
    }

    /// Trainable tensors: kernel and bias per layer, then one scalar dropout logit per hidden layer.
    pub fn params(&self) -> Vec<Tensor<F>> {
        let mut out = Vec::new();
        for (k, b) in self.kernels.iter().zip(&self.biases) {
            out.push(k.clone());
            out.push(b.clone());
        }
        out.extend(self.dropout.iter().map(|d| Tensor::scalar(d.p_logit)));
        out
    }

    pub fn set_params(&mut self, params: Vec<Tensor<F>>) -> Result<()> {
        let want = 2 * self.layer_count() + self.dropout.len();
        if params.len() != want {
            return Err(Error::Contract(format!("expected {want} parameters, got {}", params.len())));
        }
        let mut it = params.into_iter();
        for i in 0..self.layer_count() {
            self.kernels[i] = it.next().unwrap();
            self.biases[i] = it.next().unwrap();
        }
        for d in &mut self.dropout {
            d.p_logit = it.next().unwrap().item()?;
        }
        self.check()
    }

    pub fn to_checkpoint(&self, extra: &BTreeMap<String, String>) -> Checkpoint<F> {
        let mut header = self.config.to_header();
        header.extend(extra.iter().map(|(k, v)| (k.clone(), v.clone())));
        let text = header.iter().map(|(k, v)| format!("{k}={v}\n")).collect();
        Checkpoint {
            header: text,
            entries: self.param_names().into_iter().zip(self.params()).collect(),
        }
    }

    /// Rebuilds weights and returns the full header map.
    pub fn from_checkpoint(ck: &Checkpoint<F>) -> Result<(Self, BTreeMap<String, String>)> {
        let header = parse_header(&ck.header)?;
        let config = NetworkConfig::from_header(&header)?;
        let mut w = NetworkWeights::zeros(&config)?;
        let names = w.param_names();
        if ck.entries.len() != names.len() {
            return Err(Error::Contract(format!(
                "checkpoint has {} tensors, network needs {}",
                ck.entries.len(),
                names.len()
            )));
        }
        for ((name, _), want) in ck.entries.iter().zip(&names) {
            if name != want {
                return Err(Error::Contract(format!("checkpoint tensor `{name}` where `{want}` was expected")));
            }
        }
        w.set_params(ck.entries.iter().map(|(_, t)| t.clone()).collect())?;
        Ok((w, header))
    }

    pub fn save(&self, path: &Path, extra: &BTreeMap<String, String>) -> Result<()> {
        self.to_checkpoint(extra).save(path)
    }

    pub fn load(path: &Path) -> Result<(Self, BTreeMap<String, String>)> {
        NetworkWeights::from_checkpoint(&Checkpoint::load(path)?)
    }

    pub fn bit_eq(&self, other: &Self) -> bool {
        self.config == other.config
            && self.params().iter().zip(other.params()).all(|(a, b)| a.bit_eq(&b))
    }
}

pub fn parse_header(text: &str) -> Result<BTreeMap<String, String>> {
    let mut map = BTreeMap::new();
    for line in text.lines().filter(|l| !l.trim().is_empty()) {
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("header line `{line}` is not key=value")))?;
        map.insert(k.trim().to_string(), v.trim().to_string());
    }
    Ok(map)
}

/// Tape handles of every trainable tensor.
#[derive(Clone, Debug)]
pub struct ParamVars {
    pub kernels: Vec<Var>,
    pub biases: Vec<Var>,
    pub logits: Vec<Var>,
}

impl ParamVars {
    /// Registers the weights as leaves.
    pub fn register<F: Scalar>(tape: &mut Tape<F>, w: &NetworkWeights<F>) -> Result<Self> {
        w.check()?;
        let kernels = w.kernels.iter().map(|k| tape.leaf(k.clone())).collect::<Result<_>>()?;
        let biases = w.biases.iter().map(|b| tape.leaf(b.clone())).collect::<Result<_>>()?;
        let logits = w
            .dropout
            .iter()
            .map(|d| tape.leaf(Tensor::scalar(d.p_logit)))
            .collect::<Result<_>>()?;
        Ok(ParamVars { kernels, biases, logits })
    }

    /// Handles in the order of [`NetworkWeights::params`].
    pub fn in_order(&self) -> Vec<Var> {
        let mut out = Vec::new();
        for (k, b) in self.kernels.iter().zip(&self.biases) {
            out.push(*k);
            out.push(*b);
        }
        out.extend(&self.logits);
        out
    }
}

/// Records a forward pass. With `rng` absent, masks are replaced by their expectation.
pub fn forward_on_tape<F: Scalar, R: Rng + ?Sized>(
    tape: &mut Tape<F>,
    params: &ParamVars,
    config: &NetworkConfig,
    input: Var,
    mut rng: Option<&mut R>,
) -> Result<HeadVars> {
    let shape = tape.value(input).shape().to_vec();
    if shape.len() != 4 || shape[1] != config.input_channels {
        return Err(Error::Shape(format!(
            "network input must be [N, {}, H, W], got {shape:?}",
            config.input_channels
        )));
    }
    let temperature: F = lit(config.temperature);
    let mut h = input;
    let last = params.kernels.len() - 1;
    for (i, (&k, &b)) in params.kernels.iter().zip(&params.biases).enumerate() {
        if i > 0 {
            h = apply_concrete_dropout(tape, h, params.logits[i - 1], temperature, rng.as_deref_mut())?;
        }
        h = tape.conv2d(h, k, b)?;
        if i < last {
            h = tape.relu(h)?;
        }
    }
    let raw_location = tape.channel(h, 0)?;
    let precip = tape.channel(input, 0)?;
    let location = residual(tape, raw_location, precip)?;
    let log_var = tape.channel(h, 1)?;
    let logit = if config.model_tag.is_hurdle() {
        Some(tape.channel(h, 2)?)
    } else {
        None
    };
    Ok(HeadVars {
        tag: config.model_tag,
        location,
        log_var,
        logit,
    })
}

/// Skip connection from the normalized precipitation channel (`log(1 + mm)` for
/// the lognormal head) to the location channel.
fn residual<F: Scalar>(tape: &mut Tape<F>, location: Var, precip: Var) -> Result<Var> {
    tape.add(location, precip)
}

/// Head values of one forward pass, each `[N, 1, H, W]`.
#[derive(Clone, Debug)]
pub struct HeadOutput<F> {
    pub location: Tensor<F>,
    pub log_var: Tensor<F>,
    pub logit: Option<Tensor<F>>,
}

impl<F: Scalar> HeadOutput<F> {
    pub fn bit_eq(&self, other: &Self) -> bool {
        self.location.bit_eq(&other.location)
            && self.log_var.bit_eq(&other.log_var)
            && match (&self.logit, &other.logit) {
                (Some(a), Some(b)) => a.bit_eq(b),
                (None, None) => true,
                _ => false,
            }
    }
}

pub fn forward<F: Scalar, R: Rng + ?Sized>(
    input: &Tensor<F>,
    weights: &NetworkWeights<F>,
    rng: Option<&mut R>,
) -> Result<HeadOutput<F>> {
    let mut tape = Tape::new();
    let params = ParamVars::register(&mut tape, weights)?;
    let x = tape.constant(input.clone())?;
    let head = forward_on_tape(&mut tape, &params, &weights.config, x, rng)?;
    Ok(HeadOutput {
        location: tape.value(head.location).clone(),
        log_var: tape.value(head.log_var).clone(),
        logit: head.logit.map(|l| tape.value(l).clone()),
    })
}

/// Convenience for deterministic evaluation.
pub fn forward_expected<F: Scalar>(input: &Tensor<F>, weights: &NetworkWeights<F>) -> Result<HeadOutput<F>> {
    forward::<F, rand_chacha::ChaCha8Rng>(input, weights, None)
}

#[doc(hidden)]
pub fn max_abs_diff<F: Scalar>(a: &Tensor<F>, b: &Tensor<F>) -> f64 {
    a.data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| (to_f64(x) - to_f64(y)).abs())
        .fold(0.0, f64::max)
}
