//! Flat `key=value` run configuration with dotted section names.

use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use crate::data::SyntheticConfig;
use crate::error::{Error, Result};
use crate::likelihood::{CdfMode, ModelTag};
use crate::metrics::EvalOptions;
use crate::model::NetworkConfig;
use crate::train::{TrainingConfig, DEFAULT_PASSES};

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub synthetic: SyntheticConfig,
    pub test_fraction: f64,
    pub model: ModelTag,
    pub kernel_sizes: Vec<usize>,
    pub filters: Vec<usize>,
    pub temperature: f64,
    pub training: TrainingConfig,
    pub upscale_factor: usize,
    pub patch_size: usize,
    pub patch_stride: usize,
    pub passes: usize,
    pub predict_seed: u64,
    pub cdf_mode: CdfMode,
    pub eval: EvalOptions,
}

impl Default for RunConfig {
    fn default() -> Self {
        let net = NetworkConfig::desk_scale(ModelTag::DcLognormal);
        RunConfig {
            synthetic: SyntheticConfig::default(),
            test_fraction: 0.2,
            model: net.model_tag,
            kernel_sizes: net.kernel_sizes,
            filters: net.filters,
            temperature: net.temperature,
            training: TrainingConfig::default(),
            upscale_factor: 4,
            patch_size: 64,
            patch_stride: 48,
            passes: DEFAULT_PASSES,
            predict_seed: 0,
            cdf_mode: CdfMode::MomentMatched,
            eval: EvalOptions::default(),
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("invalid value `{value}` for `{key}`")))
}

fn parse_list(key: &str, value: &str) -> Result<Vec<usize>> {
    if value.trim().is_empty() {
        return Ok(Vec::new());
    }
    value.split(',').map(|v| parse(key, v.trim())).collect()
}

fn join(v: &[usize]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

impl RunConfig {
    pub fn network(&self) -> Result<NetworkConfig> {
        let mut net = NetworkConfig::new(self.kernel_sizes.clone(), self.filters.clone(), self.model)?;
        net.temperature = self.temperature;
        net.validate()?;
        Ok(net)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        let s = &mut self.synthetic;
        let t = &mut self.training;
        match key {
            "synthetic.seed" => s.seed = parse(key, v)?,
            "synthetic.height" => s.height = parse(key, v)?,
            "synthetic.width" => s.width = parse(key, v)?,
            "synthetic.days" => s.days = parse(key, v)?,
            "synthetic.correlation_length" => s.correlation_length = parse(key, v)?,
            "synthetic.rain_fraction" => s.rain_fraction = parse(key, v)?,
            "synthetic.intensity_mu" => s.intensity_mu = parse(key, v)?,
            "synthetic.intensity_sigma" => s.intensity_sigma = parse(key, v)?,
            "synthetic.elevation_coeff" => s.elevation_coeff = parse(key, v)?,
            "synthetic.cell_size" => s.cell_size = parse(key, v)?,
            "synthetic.test_fraction" => self.test_fraction = parse(key, v)?,
            "network.model" => self.model = v.parse()?,
            "network.kernel_sizes" => self.kernel_sizes = parse_list(key, v)?,
            "network.filters" => self.filters = parse_list(key, v)?,
            "network.temperature" => self.temperature = parse(key, v)?,
            "training.learning_rate" => t.learning_rate = parse(key, v)?,
            "training.batch_size" => t.batch_size = parse(key, v)?,
            "training.iterations" => t.iterations = parse(key, v)?,
            "training.tau" => t.tau = parse(key, v)?,
            "training.length_scale" => t.length_scale = parse(key, v)?,
            "training.seed" => t.seed = parse(key, v)?,
            "training.log_interval" => t.log_interval = parse(key, v)?,
            "training.dataset_size" => {
                t.dataset_size = if v == "auto" { None } else { Some(parse(key, v)?) }
            }
            "data.upscale_factor" => self.upscale_factor = parse(key, v)?,
            "data.patch_size" => self.patch_size = parse(key, v)?,
            "data.patch_stride" => self.patch_stride = parse(key, v)?,
            "predict.passes" => self.passes = parse(key, v)?,
            "predict.seed" => self.predict_seed = parse(key, v)?,
            "predict.cdf_mode" => self.cdf_mode = v.parse()?,
            "eval.bins" => self.eval.bins = parse(key, v)?,
            "eval.wet_only" => self.eval.wet_only = parse(key, v)?,
            "eval.days_per_year" => self.eval.days_per_year = parse(key, v)?,
            "eval.seed" => self.eval.seed = parse(key, v)?,
            "eval.rain_threshold" => self.eval.rain_threshold = parse(key, v)?,
            other => return Err(Error::Config(format!("unknown config key `{other}`"))),
        }
        Ok(())
    }

    /// Applies `key=value` lines over the current values. `#` starts a comment line.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (n, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key=value, got `{line}`", n + 1)))?;
            self.set(k.trim(), v)?;
        }
        self.validate()
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut c = RunConfig::default();
        c.apply_text(text)?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        RunConfig::from_text(&text)
    }

    pub fn load_or_default(path: Option<&Path>) -> Result<Self> {
        path.map_or_else(|| Ok(RunConfig::default()), RunConfig::load)
    }

    pub fn validate(&self) -> Result<()> {
        self.synthetic.validate()?;
        self.network()?;
        self.training.validate()?;
        if !(self.test_fraction > 0.0 && self.test_fraction < 1.0) {
            return Err(Error::Config(format!("test fraction {} outside (0, 1)", self.test_fraction)));
        }
        if self.upscale_factor < 2 || self.patch_size == 0 || self.patch_stride == 0 {
            return Err(Error::Config("upscale factor must be >= 2 and patch geometry positive".into()));
        }
        if self.passes == 0 || self.eval.bins == 0 || self.eval.days_per_year == 0 {
            return Err(Error::Config("passes, bins and days per year must be positive".into()));
        }
        Ok(())
    }

    /// Every key with its resolved value, sorted.
    pub fn to_text(&self) -> String {
        let s = &self.synthetic;
        let t = &self.training;
        let mut pairs = vec![
            ("synthetic.seed", s.seed.to_string()),
            ("synthetic.height", s.height.to_string()),
            ("synthetic.width", s.width.to_string()),
            ("synthetic.days", s.days.to_string()),
            ("synthetic.correlation_length", s.correlation_length.to_string()),
            ("synthetic.rain_fraction", s.rain_fraction.to_string()),
            ("synthetic.intensity_mu", s.intensity_mu.to_string()),
            ("synthetic.intensity_sigma", s.intensity_sigma.to_string()),
            ("synthetic.elevation_coeff", s.elevation_coeff.to_string()),
            ("synthetic.cell_size", s.cell_size.to_string()),
            ("synthetic.test_fraction", self.test_fraction.to_string()),
            ("network.model", self.model.to_string()),
            ("network.kernel_sizes", join(&self.kernel_sizes)),
            ("network.filters", join(&self.filters)),
            ("network.temperature", self.temperature.to_string()),
            ("training.learning_rate", t.learning_rate.to_string()),
            ("training.batch_size", t.batch_size.to_string()),
            ("training.iterations", t.iterations.to_string()),
            ("training.tau", t.tau.to_string()),
            ("training.length_scale", t.length_scale.to_string()),
            ("training.seed", t.seed.to_string()),
            ("training.log_interval", t.log_interval.to_string()),
            ("training.dataset_size", t.dataset_size.map_or("auto".into(), |n| n.to_string())),
            ("data.upscale_factor", self.upscale_factor.to_string()),
            ("data.patch_size", self.patch_size.to_string()),
            ("data.patch_stride", self.patch_stride.to_string()),
            ("predict.passes", self.passes.to_string()),
            ("predict.seed", self.predict_seed.to_string()),
            ("predict.cdf_mode", self.cdf_mode.as_str().to_string()),
            ("eval.bins", self.eval.bins.to_string()),
            ("eval.wet_only", self.eval.wet_only.to_string()),
            ("eval.days_per_year", self.eval.days_per_year.to_string()),
            ("eval.seed", self.eval.seed.to_string()),
            ("eval.rain_threshold", self.eval.rain_threshold.to_string()),
        ];
        pairs.sort();
        let mut out = String::new();
        for (k, v) in pairs {
            writeln!(out, "{k}={v}").unwrap();
        }
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }
}
