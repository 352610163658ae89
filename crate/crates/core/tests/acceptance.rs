//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! `DCBDL_ACCEPTANCE=1,3,7` runs a subset.

#![allow(clippy::needless_range_loop)]

use std::path::Path;
use std::process::Command;
use std::time::Instant;

use dcbdl::data::{dataset_patches, generate_synthetic, Dataset, Normalization, SyntheticConfig};
use dcbdl::dropout::{entropy, kl_regularizer, RegularizerConfig};
use dcbdl::likelihood::{
    head_nll, lognormal_moment_match, pixel_moments, CdfMode, McPassSet, ModelTag, PassOutput, PassSample,
    PixelPredictive,
};
use dcbdl::metrics::{
    calibration, climdex_r20, climdex_sdii, evaluate, precision_recall, EvalDay, EvalOptions, PrPoint,
};
use dcbdl::model::{forward_on_tape, NetworkConfig, NetworkWeights, ParamVars};
use dcbdl::tape::Tape;
use dcbdl::train::{derive_seed, mc_predict, predict_dataset, predict_distribution, train, day_input, TrainingConfig};
use dcbdl::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, LogNormal, Normal};
use rayon::prelude::*;

type Outcome = Result<String, String>;
type Criterion = (usize, &'static str, fn() -> Outcome);

fn main() {
    let only: Option<Vec<usize>> = std::env::var("DCBDL_ACCEPTANCE")
        .ok()
        .map(|v| v.split(',').filter_map(|x| x.trim().parse().ok()).collect());
    let criteria: [Criterion; 8] = [
        (1, "gradient correctness", criterion_gradients),
        (2, "moment estimators vs brute-force sampler", criterion_moments),
        (3, "lognormal parameter recovery", criterion_moment_match),
        (4, "calibration self-consistency", criterion_calibration),
        (5, "model ordering on synthetic skewed data", criterion_model_ordering),
        (6, "concrete dropout behaviour", criterion_dropout),
        (7, "climdex and classification exactness", criterion_climdex),
        (8, "determinism and persistence", criterion_determinism),
    ];
    let mut failed = 0;
    for (id, name, f) in criteria {
        if only.as_ref().is_some_and(|o| !o.contains(&id)) {
            continue;
        }
        let start = Instant::now();
        let outcome = f();
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("criterion {id} ({name}): PASS [{secs:.1}s] {detail}"),
            Err(detail) => {
                failed += 1;
                println!("criterion {id} ({name}): FAIL [{secs:.1}s] {detail}");
            }
        }
    }
    if failed > 0 {
        std::process::exit(1);
    }
}

fn check(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

// ---------------------------------------------------------------- criterion 1

#[derive(Clone, Copy)]
enum Target {
    Nll,
    Kl,
}

/// Loss of `w` on a fixed batch; the mask RNG is reseeded so every call sees the same noise.
fn trial_loss(w: &NetworkWeights<f64>, x: &Tensor<f64>, y: &Tensor<f64>, target: Target, noise_seed: u64) -> f64 {
    let mut tape = Tape::new();
    let (l, _) = record(&mut tape, w, x, y, target, noise_seed);
    tape.value(l).item().unwrap()
}

fn record(
    tape: &mut Tape<f64>,
    w: &NetworkWeights<f64>,
    x: &Tensor<f64>,
    y: &Tensor<f64>,
    target: Target,
    noise_seed: u64,
) -> (dcbdl::Var, ParamVars) {
    let params = ParamVars::register(tape, w).unwrap();
    let l = match target {
        Target::Nll => {
            let xv = tape.constant(x.clone()).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(noise_seed);
            let head = forward_on_tape(tape, &params, &w.config, xv, Some(&mut rng)).unwrap();
            head_nll(tape, y, &head, 0.5).unwrap()
        }
        Target::Kl => {
            let cfg = RegularizerConfig::new(1.3, 0.7, 50.0).unwrap();
            let widths: Vec<usize> = w.dropout.iter().map(|d| d.width).collect();
            kl_regularizer(tape, &params.kernels[1..], &params.logits, &widths, &cfg).unwrap()
        }
    };
    (l, params)
}

fn gradient_trial(tag: ModelTag, target: Target, seed: u64) -> Result<usize, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let net = NetworkConfig::new(vec![3, 3, 3], vec![3, 3], tag).unwrap();
    let mut w = NetworkWeights::<f64>::init(&net, &mut rng).unwrap();
    for b in &mut w.biases {
        b.data_mut().iter_mut().for_each(|v| *v = rng.gen_range(-0.2..0.2));
    }
    for d in &mut w.dropout {
        d.p_logit = rng.gen_range(-3.0..1.0);
    }
    let (n, h, wd) = (2, 6, 6);
    let x = Tensor::new(vec![n, 2, h, wd], (0..n * 2 * h * wd).map(|_| rng.gen_range(0.0..2.0)).collect()).unwrap();
    let y = Tensor::new(
        vec![n, 1, h, wd],
        (0..n * h * wd)
            .map(|_| if rng.gen_bool(0.4) { 0.0 } else { rng.gen_range(0.6..8.0) })
            .collect(),
    )
    .unwrap();
    let noise_seed = rng.gen();

    let mut tape = Tape::new();
    let (l, params) = record(&mut tape, &w, &x, &y, target, noise_seed);
    let grads = tape.backward(l).unwrap();
    let handles = params.in_order();
    let names = w.param_names();
    let mut checked = 0;
    for (k, var) in handles.iter().enumerate() {
        if matches!(target, Target::Kl) && names[k].starts_with("conv1") {
            continue; // the first layer's input is not gated
        }
        let analytic = grads.get(*var).map(|g| g.data().to_vec()).unwrap_or_else(|| vec![0.0; w.params()[k].len()]);
        for i in 0..analytic.len() {
            let eval = |delta: f64| {
                let mut p = w.params();
                p[k].data_mut()[i] += delta;
                let mut wp = w.clone();
                wp.set_params(p).unwrap();
                trial_loss(&wp, &x, &y, target, noise_seed)
            };
            let step = 1e-6;
            let fd = (eval(step) - eval(-step)) / (2.0 * step);
            let a = analytic[i];
            let scale = a.abs().max(fd.abs()).max(1e-3);
            if (a - fd).abs() > 1e-4 * scale {
                return Err(format!("{tag} {} {}[{i}] analytic {a} vs fd {fd}", if matches!(target, Target::Kl) { "kl" } else { "nll" }, names[k]));
            }
            checked += 1;
        }
    }
    Ok(checked)
}

fn criterion_gradients() -> Outcome {
    let mut jobs: Vec<(ModelTag, Target, &str)> =
        ModelTag::ALL.iter().map(|&t| (t, Target::Nll, t.as_str())).collect();
    jobs.push((ModelTag::DcGaussian, Target::Kl, "kl_regularizer"));
    let mut summary = Vec::new();
    for (tag, target, label) in jobs {
        let counts = (0..100u64)
            .into_par_iter()
            .map(|trial| gradient_trial(tag, target, 1000 * trial + tag.code() as u64))
            .collect::<Result<Vec<_>, _>>()?;
        summary.push(format!("{label}: {} coordinates", counts.iter().sum::<usize>()));
    }
    Ok(format!("100 trials each, all within 1e-4 relative ({})", summary.join(", ")))
}

// ---------------------------------------------------------------- criterion 2

fn random_samples(tag: ModelTag, rng: &mut ChaCha8Rng) -> Vec<PassSample> {
    let t = rng.gen_range(5..=20);
    (0..t)
        .map(|_| match tag {
            ModelTag::Gaussian => PassSample::new(rng.gen_range(1.0..3.0), (rng.gen_range(-3.0..-1.0f64)).exp(), 1.0),
            ModelTag::DcGaussian => PassSample::new(rng.gen_range(1.0..3.0), (rng.gen_range(-3.0..-1.0f64)).exp(), rng.gen_range(0.3..0.9)),
            ModelTag::DcLognormal => PassSample::new(rng.gen_range(0.0..1.5), (rng.gen_range(-3.0..-1.0f64)).exp(), rng.gen_range(0.3..0.9)),
        })
        .collect()
}

/// Draw from the pass mixture: uniform pass, then occurrence, then amount.
fn draw(tag: ModelTag, samples: &[PassSample], rng: &mut ChaCha8Rng) -> f64 {
    let s = samples[rng.gen_range(0..samples.len())];
    if tag.is_hurdle() && rng.gen::<f64>() >= s.rain_prob {
        return 0.0;
    }
    let sd = s.variance.sqrt();
    match tag {
        ModelTag::DcLognormal => LogNormal::new(s.location, sd).unwrap().sample(rng),
        _ => Normal::new(s.location, sd).unwrap().sample(rng),
    }
}

fn criterion_moments() -> Outcome {
    let mut worst: f64 = 0.0;
    for tag in ModelTag::ALL {
        let results = (0..50u64)
            .into_par_iter()
            .map(|trial| {
                let mut rng = ChaCha8Rng::seed_from_u64(77 + trial);
                rng.set_stream(tag.code() as u64);
                let samples = random_samples(tag, &mut rng);
                let set = McPassSet::new(
                    tag,
                    1,
                    1,
                    samples
                        .iter()
                        .map(|s| PassOutput {
                            location: vec![s.location],
                            log_var: vec![s.variance.ln()],
                            logit: tag.is_hurdle().then(|| vec![(s.rain_prob / (1.0 - s.rain_prob)).ln()]),
                        })
                        .collect(),
                )
                .unwrap();
                let m = pixel_moments(tag, &set.samples(0), 0).unwrap();
                let n = 1_000_000;
                let (mut s1, mut s2) = (0.0, 0.0);
                for _ in 0..n {
                    let v = draw(tag, &samples, &mut rng);
                    s1 += v;
                    s2 += v * v;
                }
                let em = s1 / n as f64;
                let ev = s2 / n as f64 - em * em;
                ((m.mean - em).abs() / em.abs(), (m.variance - ev).abs() / ev, trial)
            })
            .collect::<Vec<_>>();
        for (re_mean, re_var, trial) in results {
            worst = worst.max(re_mean).max(re_var);
            check(re_mean < 0.01 && re_var < 0.01, || {
                format!("{tag} trial {trial}: relative error mean {re_mean:.4}, variance {re_var:.4}")
            })?;
        }
    }
    Ok(format!("150 pass sets, worst relative error {worst:.4}"))
}

// ---------------------------------------------------------------- criterion 3

fn criterion_moment_match() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst: f64 = 0.0;
    for i in 0..1000 {
        let mu: f64 = rng.gen_range(-4.0..4.0);
        let sigma: f64 = rng.gen_range(0.05..2.0);
        let e = (mu + 0.5 * sigma * sigma).exp();
        let v = (sigma * sigma).exp_m1() * (2.0 * mu + sigma * sigma).exp();
        let (m, s) = lognormal_moment_match(e, v).map_err(|e| e.to_string())?;
        let err = ((m - mu).abs() / mu.abs()).max((s - sigma).abs() / sigma);
        worst = worst.max(err);
        check(err <= 1e-10, || format!("trial {i}: ({mu}, {sigma}) recovered as ({m}, {s})"))?;
    }
    Ok(format!("1000 trials, worst relative error {worst:.2e}"))
}

// ---------------------------------------------------------------- criterion 4

fn criterion_calibration() -> Outcome {
    let n = 100_000;
    let mut lines = Vec::new();
    for tag in ModelTag::ALL {
        let mut rng = ChaCha8Rng::seed_from_u64(44 + tag.code() as u64);
        let mut obs = Vec::with_capacity(n);
        let mut dists = Vec::with_capacity(n);
        let mut passes = Vec::with_capacity(n);
        for _ in 0..n {
            let samples = random_samples(tag, &mut rng);
            obs.push(draw(tag, &samples, &mut rng));
            let m = pixel_moments(tag, &samples, 0).map_err(|e| e.to_string())?;
            dists.push(PixelPredictive::from_moments(tag, m).map_err(|e| e.to_string())?);
            passes.push(samples);
        }
        let r = calibration(&obs, &dists, Some(&passes), CdfMode::McMixture, 100, false, 9)
            .map_err(|e| e.to_string())?;
        lines.push(format!("{tag} {:.4}", r.rmse_cal));
        check(r.rmse_cal < 0.01, || format!("{tag}: RMSE_cal {}", r.rmse_cal))?;
    }
    Ok(format!("N=1e5, K=100, RMSE_cal: {}", lines.join(", ")))
}

// ---------------------------------------------------------------- criterion 5

struct OrderingResult {
    rmse: f64,
    abs_bias: f64,
    nll: f64,
}

// Desk-scale settings: a narrow network and small patches keep 15 training
// runs inside the time budget. tau is raised from 1e-5 because with 8 filters
// the KL-dominant dropout rate near 0.5 makes single passes explode under the
// lognormal mean.
const C5_DAYS: usize = 1000;
const C5_TEST_DAYS: usize = 200;
const C5_ITERATIONS: usize = 20_000;
const C5_PASSES: usize = 20;
const C5_TAU: f64 = 1e-4;
const C5_LEARNING_RATE: f64 = 3e-4;

fn ordering_run(seed: u64) -> Result<Vec<OrderingResult>, String> {
    let ds = generate_synthetic(&SyntheticConfig { seed, days: C5_DAYS, ..SyntheticConfig::default() })
        .map_err(|e| e.to_string())?;
    let split = C5_DAYS - C5_TEST_DAYS;
    let train_ds = Dataset { elevation: ds.elevation.clone(), days: ds.days[..split].to_vec() };
    let test_ds = Dataset { elevation: ds.elevation.clone(), days: ds.days[split..].to_vec() };
    let obs: Vec<Vec<f64>> = test_ds.days.iter().map(|g| g.values.iter().map(|&v| v as f64).collect()).collect();
    let mut out = Vec::new();
    for tag in ModelTag::ALL {
        let norm = Normalization::fit(tag, &ds.elevation).map_err(|e| e.to_string())?;
        let patches = dataset_patches(&train_ds, 4, &norm, 16, 16).map_err(|e| e.to_string())?;
        let net = NetworkConfig::new(vec![5, 3, 3], vec![8, 8], tag).map_err(|e| e.to_string())?;
        let cfg = TrainingConfig {
            iterations: C5_ITERATIONS,
            learning_rate: C5_LEARNING_RATE,
            tau: C5_TAU,
            seed,
            rain_threshold: norm.rain_threshold(),
            dataset_size: Some((split * ds.height() * ds.width()) as f64),
            log_interval: 1000,
            ..TrainingConfig::default()
        };
        let (w, _) = train::<f32>(&net, &cfg, &patches).map_err(|e| format!("{tag} seed {seed}: {e}"))?;
        let sets = predict_dataset(&w, &test_ds, 4, &norm, C5_PASSES, seed).map_err(|e| e.to_string())?;
        let dists = sets
            .iter()
            .map(|s| predict_distribution(s, CdfMode::McMixture))
            .collect::<Result<Vec<_>, _>>()
            .map_err(|e| e.to_string())?;
        let days: Vec<EvalDay<'_>> = dists
            .iter()
            .zip(&sets)
            .zip(&obs)
            .map(|((d, s), o)| EvalDay { dist: d, passes: Some(s), obs: o })
            .collect();
        let r = evaluate(&days, &EvalOptions::default()).map_err(|e| e.to_string())?;
        let agg = r.metrics.aggregates();
        // |bias| of the pixel-aggregated bias, the quantity a bias table reports.
        out.push(OrderingResult { rmse: agg[1].1.mean, abs_bias: agg[0].1.mean.abs(), nll: r.nll.mean });
    }
    Ok(out)
}

fn criterion_model_ordering() -> Outcome {
    let mut wins = 0;
    let mut lines = Vec::new();
    for seed in 1..=5u64 {
        let r = ordering_run(seed)?;
        let [g, dg, dl] = [&r[0], &r[1], &r[2]];
        let ok = dl.rmse < g.rmse
            && dg.rmse < g.rmse
            && dl.abs_bias < g.abs_bias
            && dg.abs_bias < g.abs_bias
            && dl.nll < g.nll
            && dl.nll < dg.nll;
        wins += ok as usize;
        lines.push(format!(
            "seed {seed} {}: rmse {:.3}/{:.3}/{:.3} |bias| {:.3}/{:.3}/{:.3} nll {:.3}/{:.3}/{:.3}",
            if ok { "ok" } else { "miss" },
            g.rmse, dg.rmse, dl.rmse, g.abs_bias, dg.abs_bias, dl.abs_bias, g.nll, dg.nll, dl.nll
        ));
    }
    let detail = format!("{wins}/5 seeds ordered (gaussian/dc-gaussian/dc-lognormal) [{}]", lines.join("; "));
    if wins >= 4 {
        Ok(detail)
    } else {
        Err(detail)
    }
}

// ---------------------------------------------------------------- criterion 6

fn dropout_run(dataset_size: f64, iterations: usize, seed: u64) -> Result<Vec<f64>, String> {
    let ds = generate_synthetic(&SyntheticConfig { seed, height: 32, width: 32, days: 60, ..SyntheticConfig::default() })
        .map_err(|e| e.to_string())?;
    let tag = ModelTag::DcGaussian;
    let norm = Normalization::fit(tag, &ds.elevation).map_err(|e| e.to_string())?;
    let patches = dataset_patches(&ds, 4, &norm, 16, 16).map_err(|e| e.to_string())?;
    let net = NetworkConfig::new(vec![5, 3, 3], vec![8, 8], tag).map_err(|e| e.to_string())?;
    let mut w = NetworkWeights::<f64>::init(&net, &mut ChaCha8Rng::seed_from_u64(seed)).map_err(|e| e.to_string())?;
    let start_p: f64 = if dataset_size < 10.0 { 0.1 } else { 0.5 };
    for d in &mut w.dropout {
        d.p_logit = (start_p / (1.0 - start_p)).ln();
    }
    let cfg = TrainingConfig {
        iterations,
        learning_rate: 1e-2,
        seed,
        rain_threshold: norm.rain_threshold(),
        dataset_size: Some(dataset_size),
        ..TrainingConfig::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (w, _) = dcbdl::train::train_from(w, &cfg, &patches, &mut rng).map_err(|e| e.to_string())?;
    Ok(w.dropout_probabilities())
}

fn criterion_dropout() -> Outcome {
    let h = entropy(0.5).map_err(|e| e.to_string())?;
    check(h == std::f64::consts::LN_2, || format!("H(0.5) = {h:e}, not log 2"))?;
    let kl_dominant = dropout_run(1.0, 3000, 6)?;
    check(kl_dominant.iter().all(|p| (p - 0.5).abs() <= 0.02), || {
        format!("KL-dominant run ended at p = {kl_dominant:?}")
    })?;
    let data_dominant = dropout_run(1e12, 8000, 6)?;
    check(data_dominant.iter().all(|&p| p < 0.4), || {
        format!("data-dominant run ended at p = {data_dominant:?}")
    })?;
    Ok(format!("KL-dominant p = {kl_dominant:.4?} (from 0.1), data-dominant p = {data_dominant:.4?} (from 0.5), H(0.5) = ln 2"))
}

// ---------------------------------------------------------------- criterion 7

fn loop_r20(s: &[f64], dpy: usize) -> f64 {
    let (mut years, mut count) = (0usize, 0usize);
    let mut y0 = 0;
    while y0 < s.len() {
        for d in y0..(y0 + dpy).min(s.len()) {
            if s[d] >= 20.0 {
                count += 1;
            }
        }
        years += 1;
        y0 += dpy;
    }
    count as f64 / years as f64
}

fn loop_sdii(s: &[f64], dpy: usize) -> Option<f64> {
    let (mut acc, mut years) = (0.0, 0usize);
    let mut y0 = 0;
    while y0 < s.len() {
        let (mut tot, mut cnt) = (0.0, 0usize);
        for d in y0..(y0 + dpy).min(s.len()) {
            if s[d] >= 0.5 {
                tot += s[d];
                cnt += 1;
            }
        }
        if cnt > 0 {
            acc += tot / cnt as f64;
            years += 1;
        }
        y0 += dpy;
    }
    (years > 0).then(|| acc / years as f64)
}

fn loop_pr(scores: &[f64], labels: &[bool]) -> Vec<PrPoint> {
    let mut thresholds = scores.to_vec();
    thresholds.sort_by(|a, b| b.partial_cmp(a).unwrap());
    thresholds.dedup();
    let positives = labels.iter().filter(|&&l| l).count();
    let mut out = Vec::new();
    for t in thresholds {
        let (mut tp, mut fp) = (0usize, 0usize);
        for i in 0..scores.len() {
            if scores[i] >= t {
                if labels[i] {
                    tp += 1;
                } else {
                    fp += 1;
                }
            }
        }
        out.push(PrPoint { threshold: t, precision: tp as f64 / (tp + fp) as f64, recall: tp as f64 / positives as f64 });
        if tp == positives {
            break;
        }
    }
    out
}

fn criterion_climdex() -> Outcome {
    let mut ten = vec![0.0; 365];
    ten[..73].iter_mut().for_each(|v| *v = 10.0);
    check(climdex_sdii(&ten, 365).ok() == Some(10.0), || "SDII of constant 10 mm wet days is not 10".into())?;
    let mut heavy = vec![0.0; 365];
    heavy[..3].copy_from_slice(&[25.0, 19.9, 20.0]);
    check(climdex_r20(&heavy, 365).ok() == Some(2.0), || "R20 does not count the 20 mm day".into())?;
    let mut single = vec![0.0; 365];
    single[40] = 7.0;
    check(climdex_sdii(&single, 365).ok() == Some(7.0), || "SDII of a single 7 mm day is not 7".into())?;

    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for trial in 0..1000 {
        let len = rng.gen_range(1..1500);
        let dpy = rng.gen_range(30..400);
        let s: Vec<f64> = (0..len)
            .map(|_| match rng.gen_range(0..4) {
                0 => 0.0,
                1 => [0.5, 20.0, 19.999, 0.49][rng.gen_range(0..4)],
                _ => rng.gen_range(0.0..60.0),
            })
            .collect();
        let r20 = climdex_r20(&s, dpy).map_err(|e| e.to_string())?;
        check(r20 == loop_r20(&s, dpy), || format!("trial {trial}: R20 {r20} vs {}", loop_r20(&s, dpy)))?;
        match (climdex_sdii(&s, dpy).ok(), loop_sdii(&s, dpy)) {
            (a, b) if a == b => {}
            (a, b) => return Err(format!("trial {trial}: SDII {a:?} vs {b:?}")),
        }
        let scores: Vec<f64> = (0..len).map(|_| rng.gen_range(0..50) as f64 / 50.0).collect();
        let labels: Vec<bool> = s.iter().map(|&v| v > 0.5).collect();
        if labels.iter().any(|&l| l) {
            let pr = precision_recall(&scores, &labels).map_err(|e| e.to_string())?;
            check(pr == loop_pr(&scores, &labels), || format!("trial {trial}: precision-recall points differ"))?;
        }
    }
    Ok("hand examples plus 1000 random series match the loop oracles exactly".into())
}

// ---------------------------------------------------------------- criterion 8

fn run_cli(args: &[&str]) -> Result<(), String> {
    let out = Command::new(env!("CARGO_BIN_EXE_dcbdl"))
        .args(args)
        .output()
        .map_err(|e| e.to_string())?;
    if out.status.success() {
        Ok(())
    } else {
        Err(format!("`dcbdl {}` failed: {}", args.join(" "), String::from_utf8_lossy(&out.stderr).trim()))
    }
}

fn cli_pipeline(root: &Path, config: &Path) -> Result<Vec<(String, Vec<u8>)>, String> {
    let p = |s: &str| root.join(s).to_string_lossy().into_owned();
    let cfg = config.to_string_lossy().into_owned();
    run_cli(&["generate", "--config", &cfg, "--out-dir", &p("data")])?;
    let mut outputs = Vec::new();
    for model in ["gaussian", "dc-lognormal"] {
        let ckpt = p(&format!("{model}.ckpt"));
        run_cli(&["train", "--config", &cfg, "--data-dir", &p("data"), "--model", model, "--out", &ckpt])?;
        let pred = p(&format!("pred-{model}"));
        run_cli(&[
            "predict", "--checkpoint", &ckpt, "--data-dir", &p("data"), "--passes", "50", "--seed", "11",
            "--cdf-mode", "mixture", "--out-dir", &pred, "--config", &cfg,
        ])?;
        let eval = root.join(format!("eval-{model}"));
        run_cli(&["evaluate", "--pred-dir", &pred, "--obs-dir", &p("data"), "--out-dir", &eval.to_string_lossy(), "--config", &cfg])?;
        for f in ["metrics.csv", "calibration.csv", "pr_curve.csv"] {
            if let Ok(bytes) = std::fs::read(eval.join(f)) {
                outputs.push((format!("{model}/{f}"), bytes));
            }
        }
    }
    Ok(outputs)
}

fn criterion_determinism() -> Outcome {
    // Checkpoint save -> load -> 50-pass prediction.
    let ds = generate_synthetic(&SyntheticConfig { seed: 8, height: 32, width: 32, days: 12, ..SyntheticConfig::default() })
        .map_err(|e| e.to_string())?;
    let tag = ModelTag::DcLognormal;
    let norm = Normalization::fit(tag, &ds.elevation).map_err(|e| e.to_string())?;
    let patches = dataset_patches(&ds, 4, &norm, 16, 16).map_err(|e| e.to_string())?;
    let net = NetworkConfig::new(vec![5, 3, 3], vec![8, 8], tag).map_err(|e| e.to_string())?;
    let cfg = TrainingConfig { iterations: 50, learning_rate: 1e-3, rain_threshold: norm.rain_threshold(), ..TrainingConfig::default() };
    let (w, _) = train::<f32>(&net, &cfg, &patches).map_err(|e| e.to_string())?;
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let ckpt = dir.path().join("w.ckpt");
    w.save(&ckpt, &norm.to_header().into_iter().collect()).map_err(|e| e.to_string())?;
    let (loaded, header) = NetworkWeights::<f32>::load(&ckpt).map_err(|e| e.to_string())?;
    let loaded_norm = Normalization::from_header(&header).map_err(|e| e.to_string())?;
    let x = day_input::<f32>(&ds, 3, 4, &norm).map_err(|e| e.to_string())?;
    let a = mc_predict(&w, &x, 50, derive_seed(5, 3), &norm).map_err(|e| e.to_string())?;
    let b = mc_predict(&loaded, &x, 50, derive_seed(5, 3), &loaded_norm).map_err(|e| e.to_string())?;
    let da = predict_distribution(&a, CdfMode::McMixture).map_err(|e| e.to_string())?;
    let db = predict_distribution(&b, CdfMode::McMixture).map_err(|e| e.to_string())?;
    let same_bits = da.pixels.iter().zip(&db.pixels).all(|(p, q)| {
        [p.mean, p.variance, p.rain_prob, p.loc, p.scale]
            .iter()
            .zip([q.mean, q.variance, q.rain_prob, q.loc, q.scale])
            .all(|(u, v)| u.to_bits() == v.to_bits())
    });
    check(a == b && same_bits, || "reloaded checkpoint changed the predictive grids".into())?;

    // Full command-line pipeline, twice.
    let config = dir.path().join("run.cfg");
    std::fs::write(
        &config,
        "synthetic.height=32\nsynthetic.width=32\nsynthetic.days=200\nsynthetic.seed=4\nnetwork.kernel_sizes=5,3,3\n\
         network.filters=8,8\ntraining.iterations=200\ntraining.learning_rate=1e-3\ndata.patch_size=16\ndata.patch_stride=16\n",
    )
    .map_err(|e| e.to_string())?;
    let first = cli_pipeline(&dir.path().join("run1"), &config)?;
    let second = cli_pipeline(&dir.path().join("run2"), &config)?;
    check(first.len() == 5, || format!("expected 5 metric files, found {}", first.len()))?;
    check(first == second, || "metrics CSVs differ between identical runs".into())?;
    Ok(format!("checkpoint roundtrip bit-exact over 50 passes; {} CSVs identical across two CLI runs", first.len()))
}

