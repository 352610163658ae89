//! Command-line surface: `generate`, `train`, `predict`, `evaluate`.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};

use crate::config::RunConfig;
use crate::data::{dataset_patches, generate_synthetic, read_manifest, write_manifest, Dataset, Grid, Normalization, MANIFEST};
use crate::error::{Error, Result};
use crate::likelihood::{CdfMode, McPassSet, ModelTag, PassOutput, PixelPredictive, PredictiveDistribution};
use crate::metrics::{evaluate, EvalDay};
use crate::model::NetworkWeights;
use crate::train::{day_input, derive_seed, mc_predict, predict_distribution, train};
use crate::Real;

pub const PASS_MAGIC: &[u8; 4] = b"DCP1";
const PREDICTION_META: &str = "prediction.txt";
const CONFIG_FILE: &str = "config.txt";
/// Per-day prediction fields, in file-suffix form.
pub const FIELDS: [&str; 5] = ["mean", "var", "rain_prob", "mu", "sigma"];

#[derive(Parser, Debug)]
#[command(name = "dcbdl", version, about = "Probabilistic precipitation downscaling with MC dropout")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Write a synthetic train/test dataset.
    Generate {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Train a model and write its checkpoint and training log.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data_dir: PathBuf,
        #[arg(long)]
        model: Option<ModelTag>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        iterations: Option<usize>,
    },
    /// Monte Carlo predictions for every day of a dataset.
    Predict {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data_dir: PathBuf,
        #[arg(long)]
        passes: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        cdf_mode: Option<CdfMode>,
        #[arg(long)]
        out_dir: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Metrics, calibration and per-pixel maps of a prediction directory.
    Evaluate {
        #[arg(long)]
        pred_dir: PathBuf,
        #[arg(long)]
        obs_dir: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
    },
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Generate { config, out_dir } => cmd_generate(config.as_deref(), &out_dir),
        Command::Train {
            config,
            data_dir,
            model,
            out,
            iterations,
        } => cmd_train(config.as_deref(), &data_dir, model, &out, iterations),
        Command::Predict {
            checkpoint,
            data_dir,
            passes,
            seed,
            cdf_mode,
            out_dir,
            config,
        } => cmd_predict(&checkpoint, &data_dir, passes, seed, cdf_mode, &out_dir, config.as_deref()),
        Command::Evaluate {
            pred_dir,
            obs_dir,
            out_dir,
            config,
        } => cmd_evaluate(&pred_dir, &obs_dir, &out_dir, config.as_deref()),
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// A dataset directory, or the `sub` split below a `generate` output directory.
fn dataset_dir(dir: &Path, sub: &str) -> PathBuf {
    if dir.join(MANIFEST).exists() {
        dir.to_path_buf()
    } else {
        dir.join(sub)
    }
}

fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

pub fn cmd_generate(config: Option<&Path>, out_dir: &Path) -> Result<()> {
    let cfg = RunConfig::load_or_default(config)?;
    let ds = generate_synthetic(&cfg.synthetic)?;
    let test_days = ((cfg.synthetic.days as f64) * cfg.test_fraction).round() as usize;
    let train_days = cfg.synthetic.days - test_days;
    if train_days == 0 || test_days == 0 {
        return Err(Error::Config(format!(
            "{} days cannot be split with test fraction {}",
            cfg.synthetic.days, cfg.test_fraction
        )));
    }
    create_dir(out_dir)?;
    let (train_part, test_part) = ds.days.split_at(train_days);
    for (name, days) in [("train", train_part), ("test", test_part)] {
        Dataset {
            elevation: ds.elevation.clone(),
            days: days.to_vec(),
        }
        .save(&out_dir.join(name))?;
    }
    cfg.save(&out_dir.join(CONFIG_FILE))
}

pub fn cmd_train(
    config: Option<&Path>,
    data_dir: &Path,
    model: Option<ModelTag>,
    out: &Path,
    iterations: Option<usize>,
) -> Result<()> {
    let mut cfg = RunConfig::load_or_default(config)?;
    if let Some(m) = model {
        cfg.model = m;
    }
    if let Some(i) = iterations {
        cfg.training.iterations = i;
    }
    let net = cfg.network()?;
    let ds = Dataset::load(&dataset_dir(data_dir, "train"))?;
    let norm = Normalization::fit(cfg.model, &ds.elevation)?;
    let patches = dataset_patches(&ds, cfg.upscale_factor, &norm, cfg.patch_size, cfg.patch_stride)?;
    let mut tc = cfg.training.clone();
    tc.rain_threshold = norm.rain_threshold();
    if tc.dataset_size.is_none() {
        tc.dataset_size = Some((ds.days.len() * ds.height() * ds.width()) as f64);
    }
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(parent)?;
    }
    let (weights, log) = match train::<Real>(&net, &tc, &patches) {
        Ok(r) => r,
        Err(Error::Diverged { iteration, reason, last_good }) => {
            let p = sibling(out, ".last_good");
            fs::write(&p, &last_good).map_err(|e| Error::io(&p, e))?;
            return Err(Error::Diverged {
                iteration,
                reason: format!("{reason}; last good weights in {}", p.display()),
                last_good,
            });
        }
        Err(e) => return Err(e),
    };
    let mut extra: BTreeMap<String, String> = norm.to_header().into_iter().collect();
    extra.insert("data.upscale_factor".into(), cfg.upscale_factor.to_string());
    weights.save(out, &extra)?;
    log.save(&sibling(out, ".log.csv"))?;
    cfg.save(&sibling(out, ".config.txt"))
}

pub fn passes_to_bytes(set: &McPassSet) -> Vec<u8> {
    let mut out = PASS_MAGIC.to_vec();
    out.push(set.tag.code());
    for d in [set.len(), set.height, set.width] {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for p in &set.passes {
        for field in [Some(&p.location), Some(&p.log_var), p.logit.as_ref()].into_iter().flatten() {
            for v in field {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
    out
}

pub fn passes_from_bytes(bytes: &[u8], origin: &Path) -> Result<McPassSet> {
    let fail = |r: &str| Error::format(origin, r.to_string());
    if bytes.len() < 17 || &bytes[..4] != PASS_MAGIC {
        return Err(fail("not a DCP1 pass file"));
    }
    let tag = ModelTag::from_code(bytes[4]).ok_or_else(|| fail("unknown model code"))?;
    let u32_at = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().unwrap()) as usize;
    let (t, h, w) = (u32_at(5), u32_at(9), u32_at(13));
    let n = h * w;
    let channels = tag.output_channels();
    if bytes.len() != 17 + t * channels * n * 8 {
        return Err(fail("pass file length does not match its header"));
    }
    let mut values = bytes[17..].chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap()));
    let mut take = || values.by_ref().take(n).collect::<Vec<f64>>();
    let passes = (0..t)
        .map(|_| PassOutput {
            location: take(),
            log_var: take(),
            logit: tag.is_hurdle().then(&mut take),
        })
        .collect();
    McPassSet::new(tag, h, w, passes)
}

fn field_values(p: &PixelPredictive, field: &str) -> f64 {
    match field {
        "mean" => p.mean,
        "var" => p.variance,
        "rain_prob" => p.rain_prob,
        "mu" => p.loc,
        _ => p.scale,
    }
}

fn day_stem(d: usize) -> String {
    format!("day_{d:05}")
}

#[allow(clippy::too_many_arguments)]
pub fn cmd_predict(
    checkpoint: &Path,
    data_dir: &Path,
    passes: Option<usize>,
    seed: Option<u64>,
    cdf_mode: Option<CdfMode>,
    out_dir: &Path,
    config: Option<&Path>,
) -> Result<()> {
    let mut cfg = RunConfig::load_or_default(config)?;
    if let Some(p) = passes {
        cfg.passes = p;
    }
    if let Some(s) = seed {
        cfg.predict_seed = s;
    }
    if let Some(m) = cdf_mode {
        cfg.cdf_mode = m;
    }
    cfg.validate()?;
    let (weights, header) = NetworkWeights::<Real>::load(checkpoint)?;
    let norm = Normalization::from_header(&header)?;
    let factor: usize = header
        .get("data.upscale_factor")
        .and_then(|v| v.parse().ok())
        .ok_or_else(|| Error::Config("checkpoint header lacks data.upscale_factor".into()))?;
    cfg.model = weights.config.model_tag;
    let ds = Dataset::load(&dataset_dir(data_dir, "test"))?;
    create_dir(out_dir)?;
    let cell = ds.elevation.cell_size;
    let mut stems = Vec::new();
    for d in 0..ds.days.len() {
        let x = day_input::<Real>(&ds, d, factor, &norm)?;
        let set = mc_predict(&weights, &x, cfg.passes, derive_seed(cfg.predict_seed, d as u64), &norm)?;
        let dist = predict_distribution(&set, cfg.cdf_mode)?;
        let stem = day_stem(d);
        for field in FIELDS {
            Grid::derived(dist.height, dist.width, cell, dist.field(|p| field_values(p, field)))?
                .save(&out_dir.join(format!("{stem}.{field}.dcg")))?;
        }
        if cfg.cdf_mode == CdfMode::McMixture {
            let p = out_dir.join(format!("{stem}.passes.dcp"));
            fs::write(&p, passes_to_bytes(&set)).map_err(|e| Error::io(&p, e))?;
        }
        stems.push(stem);
    }
    write_manifest(&out_dir.join(MANIFEST), &stems)?;
    let meta = format!(
        "model={}\ncdf_mode={}\npasses={}\nseed={}\ndays={}\nheight={}\nwidth={}\n",
        weights.config.model_tag,
        cfg.cdf_mode.as_str(),
        cfg.passes,
        cfg.predict_seed,
        ds.days.len(),
        ds.height(),
        ds.width()
    );
    write_text(&out_dir.join(PREDICTION_META), &meta)?;
    cfg.save(&out_dir.join(CONFIG_FILE))
}

fn load_day_distribution(dir: &Path, stem: &str, tag: ModelTag, mode: CdfMode) -> Result<PredictiveDistribution> {
    let grids = FIELDS
        .iter()
        .map(|f| Grid::load(&dir.join(format!("{stem}.{f}.dcg"))))
        .collect::<Result<Vec<_>>>()?;
    let (h, w) = (grids[0].height, grids[0].width);
    if grids.iter().any(|g| (g.height, g.width) != (h, w)) {
        return Err(Error::Shape(format!("prediction fields of {stem} differ in size")));
    }
    let at = |k: usize, i: usize| grids[k].values[i] as f64;
    let pixels = (0..h * w)
        .map(|i| PixelPredictive {
            tag,
            mean: at(0, i),
            variance: at(1, i),
            rain_prob: at(2, i),
            loc: at(3, i),
            scale: at(4, i),
        })
        .collect();
    Ok(PredictiveDistribution {
        tag,
        cdf_mode: mode,
        height: h,
        width: w,
        pixels,
    })
}

pub fn cmd_evaluate(pred_dir: &Path, obs_dir: &Path, out_dir: &Path, config: Option<&Path>) -> Result<()> {
    let cfg = RunConfig::load_or_default(config)?;
    let meta_path = pred_dir.join(PREDICTION_META);
    let meta_text = fs::read_to_string(&meta_path).map_err(|e| Error::io(&meta_path, e))?;
    let meta = crate::model::parse_header(&meta_text)?;
    let get = |k: &str| {
        meta.get(k)
            .ok_or_else(|| Error::format(&meta_path, format!("missing `{k}`")))
    };
    let tag: ModelTag = get("model")?.parse()?;
    let mode: CdfMode = get("cdf_mode")?.parse()?;
    let obs = Dataset::load(&dataset_dir(obs_dir, "test"))?;
    let stems: Vec<String> = read_manifest(&pred_dir.join(MANIFEST))?
        .iter()
        .map(|p| p.file_name().unwrap_or_default().to_string_lossy().into_owned())
        .collect();
    if stems.len() != obs.days.len() {
        return Err(Error::Contract(format!(
            "{} predicted days but {} observed days",
            stems.len(),
            obs.days.len()
        )));
    }
    let dists = stems
        .iter()
        .map(|s| load_day_distribution(pred_dir, s, tag, mode))
        .collect::<Result<Vec<_>>>()?;
    let passes = if mode == CdfMode::McMixture {
        Some(
            stems
                .iter()
                .map(|s| {
                    let p = pred_dir.join(format!("{s}.passes.dcp"));
                    let bytes = fs::read(&p).map_err(|e| Error::io(&p, e))?;
                    passes_from_bytes(&bytes, &p)
                })
                .collect::<Result<Vec<_>>>()?,
        )
    } else {
        None
    };
    let obs_values: Vec<Vec<f64>> = obs
        .days
        .iter()
        .map(|g| g.values.iter().map(|&v| v as f64).collect())
        .collect();
    let days: Vec<EvalDay<'_>> = dists
        .iter()
        .enumerate()
        .map(|(d, dist)| EvalDay {
            dist,
            passes: passes.as_ref().map(|p| &p[d]),
            obs: &obs_values[d],
        })
        .collect();
    let report = evaluate(&days, &cfg.eval)?;

    create_dir(out_dir)?;
    write_text(&out_dir.join("metrics.csv"), &report.metrics_csv())?;
    write_text(&out_dir.join("calibration.csv"), &report.calibration.to_csv())?;
    if let Some(pr) = report.pr_csv() {
        write_text(&out_dir.join("pr_curve.csv"), &pr)?;
    }
    let cell = obs.elevation.cell_size;
    let (h, w) = (report.height, report.width);
    let m = &report.metrics;
    for (name, map) in [
        ("bias", &m.bias),
        ("rmse", &m.rmse),
        ("r20_error", &m.r20_error),
        ("sdii_error", &m.sdii_error),
        ("rmse_cal", &report.rmse_cal_map),
    ] {
        Grid::derived(h, w, cell, map.clone())?.save(&out_dir.join(format!("{name}.dcg")))?;
    }
    cfg.save(&out_dir.join(CONFIG_FILE))
}

/// Caps the rayon pool at `DCBDL_THREADS` when set.
pub fn configure_threads() -> Result<()> {
    if let Ok(v) = std::env::var("DCBDL_THREADS") {
        let n: usize = v
            .parse()
            .ok()
            .filter(|&n| n > 0)
            .ok_or_else(|| Error::Config(format!("DCBDL_THREADS must be a positive integer, got `{v}`")))?;
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::Config(format!("cannot size the thread pool: {e}")))?;
    }
    Ok(())
}
