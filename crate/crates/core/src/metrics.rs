//! Accuracy metrics, Climdex indices, rain-classification precision-recall
//! and PIT calibration.

use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::likelihood::{
    pixel_nll_matched, pixel_nll_mixture, predictive_cdf_interval, CdfMode, McPassSet, ModelTag, PassSample,
    PixelPredictive,
    PredictiveDistribution, DEFAULT_RAIN_THRESHOLD,
};

pub const R20_THRESHOLD: f64 = 20.0;
pub const WET_DAY_THRESHOLD: f64 = 0.5;
pub const DEFAULT_BINS: usize = 100;
pub const DEFAULT_DAYS_PER_YEAR: usize = 365;

fn aligned(a: usize, b: usize, what: &str) -> Result<()> {
    if a != b {
        return Err(Error::Shape(format!("{what}: series lengths {a} and {b} differ")));
    }
    if a == 0 {
        return Err(Error::Contract(format!("{what}: empty series")));
    }
    Ok(())
}

/// `(mean(pred - obs), sqrt(mean((pred - obs)^2)))`.
pub fn bias_rmse(pred: &[f64], obs: &[f64]) -> Result<(f64, f64)> {
    aligned(pred.len(), obs.len(), "bias_rmse")?;
    let n = pred.len() as f64;
    let (mut s, mut s2) = (0.0, 0.0);
    for (p, o) in pred.iter().zip(obs) {
        s += p - o;
        s2 += (p - o) * (p - o);
    }
    Ok((s / n, (s2 / n).sqrt()))
}

/// Consecutive blocks of `days_per_year` days; the last block may be short.
fn years(series: &[f64], days_per_year: usize) -> Result<std::slice::Chunks<'_, f64>> {
    if days_per_year == 0 {
        return Err(Error::Config("days per year must be positive".into()));
    }
    if series.is_empty() {
        return Err(Error::Contract("climdex index of an empty year".into()));
    }
    Ok(series.chunks(days_per_year))
}

/// Mean annual count of days with at least 20 mm.
pub fn climdex_r20(series: &[f64], days_per_year: usize) -> Result<f64> {
    let counts: Vec<f64> = years(series, days_per_year)?
        .map(|y| y.iter().filter(|&&v| v >= R20_THRESHOLD).count() as f64)
        .collect();
    Ok(counts.iter().sum::<f64>() / counts.len() as f64)
}

/// Mean annual wet-day intensity: wet-day total over the wet-day count, wet being at least 0.5 mm.
/// Years without a wet day are skipped.
pub fn climdex_sdii(series: &[f64], days_per_year: usize) -> Result<f64> {
    let mut per_year = Vec::new();
    for (i, y) in years(series, days_per_year)?.enumerate() {
        let (total, count) = y
            .iter()
            .filter(|&&v| v >= WET_DAY_THRESHOLD)
            .fold((0.0, 0usize), |(t, c), &v| (t + v, c + 1));
        if count == 0 {
            log::debug!("sdii: year {i} has no wet day and is skipped");
        } else {
            per_year.push(total / count as f64);
        }
    }
    if per_year.is_empty() {
        return Err(Error::Undefined("SDII of a series without wet days".into()));
    }
    Ok(per_year.iter().sum::<f64>() / per_year.len() as f64)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PrPoint {
    pub threshold: f64,
    pub precision: f64,
    pub recall: f64,
}

/// Precision and recall of `score >= threshold` at every distinct score in
/// descending order, stopping at the first threshold with full recall.
pub fn precision_recall(scores: &[f64], labels: &[bool]) -> Result<Vec<PrPoint>> {
    aligned(scores.len(), labels.len(), "precision_recall")?;
    if let Some(s) = scores.iter().find(|s| !s.is_finite()) {
        return Err(Error::Domain(format!("non-finite score {s}")));
    }
    let positives = labels.iter().filter(|&&l| l).count();
    if positives == 0 {
        return Err(Error::Contract("precision-recall needs at least one positive label".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut points = Vec::new();
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut i = 0;
    while i < order.len() {
        let thr = scores[order[i]];
        while i < order.len() && scores[order[i]] == thr {
            if labels[order[i]] {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        points.push(PrPoint {
            threshold: thr,
            precision: tp as f64 / (tp + fp) as f64,
            recall: tp as f64 / positives as f64,
        });
        if tp == positives {
            break;
        }
    }
    Ok(points)
}

#[derive(Clone, Debug, PartialEq)]
pub struct CalibrationReport {
    pub bins: usize,
    /// `c(k / K)` for `k = 1..=K`.
    pub c_values: Vec<f64>,
    pub rmse_cal: f64,
    pub population: usize,
}

impl CalibrationReport {
    pub fn to_csv(&self) -> String {
        let mut out = "z,c_z\n".to_string();
        for (k, c) in self.c_values.iter().enumerate() {
            writeln!(out, "{},{}", (k + 1) as f64 / self.bins as f64, c).unwrap();
        }
        out
    }
}

/// `c(z) = #{i : 0.5 - z/2 < u_i < 0.5 + z/2} / N` at `z = k/K`, and the RMS
/// gap to the diagonal.
pub fn calibration_from_pit(pit: &[f64], bins: usize) -> Result<CalibrationReport> {
    if pit.is_empty() {
        return Err(Error::Contract("calibration population is empty".into()));
    }
    if bins == 0 {
        return Err(Error::Config("calibration needs at least one bin".into()));
    }
    let n = pit.len() as f64;
    let c_values: Vec<f64> = (1..=bins)
        .map(|k| {
            let z = k as f64 / bins as f64;
            let (lo, hi) = (0.5 - z / 2.0, 0.5 + z / 2.0);
            pit.iter().filter(|&&u| lo < u && u < hi).count() as f64 / n
        })
        .collect();
    let mse = c_values
        .iter()
        .enumerate()
        .map(|(k, c)| (c - (k + 1) as f64 / bins as f64).powi(2))
        .sum::<f64>()
        / bins as f64;
    Ok(CalibrationReport {
        bins,
        c_values,
        rmse_cal: mse.sqrt(),
        population: pit.len(),
    })
}

/// PIT of `y` at one pixel: `F(y)` where the CDF is continuous and a uniform
/// draw on `(F(y-), F(y))` at the dry atom.
pub fn pit_value<R: Rng + ?Sized>(
    dist: &PixelPredictive,
    passes: Option<&[PassSample]>,
    y: f64,
    mode: CdfMode,
    rng: &mut R,
) -> Result<f64> {
    let (lo, hi) = predictive_cdf_interval(dist, passes, y, mode)?;
    if hi > lo {
        Ok(lo + (hi - lo) * rng.gen::<f64>())
    } else {
        Ok(hi)
    }
}

/// Calibration over aligned observations and predictive distributions.
/// With `wet_only`, observations below 0.5 mm are left out.
pub fn calibration(
    obs: &[f64],
    dists: &[PixelPredictive],
    passes: Option<&[Vec<PassSample>]>,
    mode: CdfMode,
    bins: usize,
    wet_only: bool,
    seed: u64,
) -> Result<CalibrationReport> {
    aligned(obs.len(), dists.len(), "calibration")?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pit = Vec::with_capacity(obs.len());
    for (i, (&y, d)) in obs.iter().zip(dists).enumerate() {
        if wet_only && y < WET_DAY_THRESHOLD {
            continue;
        }
        let p = passes.map(|ps| ps[i].as_slice());
        pit.push(pit_value(d, p, y, mode, &mut rng)?);
    }
    calibration_from_pit(&pit, bins)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Aggregate {
    pub mean: f64,
    pub std: f64,
    pub count: usize,
}

/// Mean and population standard deviation of the finite entries.
pub fn aggregate(values: &[f64]) -> Aggregate {
    let finite: Vec<f64> = values.iter().copied().filter(|v| v.is_finite()).collect();
    let n = finite.len();
    if n == 0 {
        return Aggregate { mean: f64::NAN, std: f64::NAN, count: 0 };
    }
    let mean = finite.iter().sum::<f64>() / n as f64;
    let var = finite.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
    Aggregate { mean, std: var.sqrt(), count: n }
}

/// Per-pixel maps (row-major, NaN where undefined) and their aggregates.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricsTable {
    pub bias: Vec<f64>,
    pub rmse: Vec<f64>,
    pub r20_error: Vec<f64>,
    pub sdii_error: Vec<f64>,
}

impl MetricsTable {
    /// `pred[d][i]` and `obs[d][i]` index day `d`, pixel `i`.
    pub fn compute(pred: &[Vec<f64>], obs: &[Vec<f64>], days_per_year: usize) -> Result<Self> {
        aligned(pred.len(), obs.len(), "metrics")?;
        let pixels = obs[0].len();
        if pred.iter().chain(obs).any(|d| d.len() != pixels) {
            return Err(Error::Shape("days have different pixel counts".into()));
        }
        let rows = (0..pixels)
            .into_par_iter()
            .map(|i| {
                let p: Vec<f64> = pred.iter().map(|d| d[i]).collect();
                let o: Vec<f64> = obs.iter().map(|d| d[i]).collect();
                let (b, r) = bias_rmse(&p, &o)?;
                let r20 = climdex_r20(&p, days_per_year)? - climdex_r20(&o, days_per_year)?;
                let sdii = match (climdex_sdii(&p, days_per_year), climdex_sdii(&o, days_per_year)) {
                    (Ok(a), Ok(b)) => a - b,
                    (Err(Error::Undefined(_)), _) | (_, Err(Error::Undefined(_))) => f64::NAN,
                    (Err(e), _) | (_, Err(e)) => return Err(e),
                };
                Ok((b, r, r20, sdii))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(MetricsTable {
            bias: rows.iter().map(|r| r.0).collect(),
            rmse: rows.iter().map(|r| r.1).collect(),
            r20_error: rows.iter().map(|r| r.2).collect(),
            sdii_error: rows.iter().map(|r| r.3).collect(),
        })
    }

    pub fn aggregates(&self) -> [(&'static str, Aggregate); 4] {
        [
            ("bias", aggregate(&self.bias)),
            ("rmse", aggregate(&self.rmse)),
            ("r20_error", aggregate(&self.r20_error)),
            ("sdii_error", aggregate(&self.sdii_error)),
        ]
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EvalOptions {
    pub bins: usize,
    pub wet_only: bool,
    pub days_per_year: usize,
    pub seed: u64,
    pub rain_threshold: f64,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions {
            bins: DEFAULT_BINS,
            wet_only: true,
            days_per_year: DEFAULT_DAYS_PER_YEAR,
            seed: 0,
            rain_threshold: DEFAULT_RAIN_THRESHOLD,
        }
    }
}

/// Everything computed by [`evaluate`].
#[derive(Clone, Debug, PartialEq)]
pub struct EvaluationReport {
    pub tag: ModelTag,
    pub height: usize,
    pub width: usize,
    pub metrics: MetricsTable,
    pub calibration: CalibrationReport,
    /// Per-pixel calibration error, NaN where a pixel has no eligible observation.
    pub rmse_cal_map: Vec<f64>,
    pub nll: Aggregate,
    /// Rain-occurrence curve for hurdle models.
    pub pr_curve: Option<Vec<PrPoint>>,
}

impl EvaluationReport {
    pub fn metrics_csv(&self) -> String {
        let mut out = "metric,mean,std,count\n".to_string();
        for (name, a) in self.metrics.aggregates() {
            writeln!(out, "{name},{},{},{}", a.mean, a.std, a.count).unwrap();
        }
        writeln!(out, "nll,{},{},{}", self.nll.mean, self.nll.std, self.nll.count).unwrap();
        let cal = aggregate(&self.rmse_cal_map);
        writeln!(out, "rmse_cal,{},{},{}", self.calibration.rmse_cal, cal.std, self.calibration.population).unwrap();
        out
    }

    pub fn pr_csv(&self) -> Option<String> {
        self.pr_curve.as_ref().map(|pts| {
            let mut out = "threshold,precision,recall\n".to_string();
            for p in pts {
                writeln!(out, "{},{},{}", p.threshold, p.precision, p.recall).unwrap();
            }
            out
        })
    }
}

/// One evaluated day: the distribution, optionally its passes, and the observed grid (mm).
pub struct EvalDay<'a> {
    pub dist: &'a PredictiveDistribution,
    pub passes: Option<&'a McPassSet>,
    pub obs: &'a [f64],
}

/// Evaluates a day sequence. The full NLL uses the pass mixture when passes
/// are given and the matched distribution otherwise; the CDF mode of each
/// distribution drives the PIT.
pub fn evaluate(days: &[EvalDay<'_>], opts: &EvalOptions) -> Result<EvaluationReport> {
    let first = days.first().ok_or_else(|| Error::Contract("nothing to evaluate".into()))?;
    let (tag, h, w) = (first.dist.tag, first.dist.height, first.dist.width);
    let pixels = h * w;
    for (d, day) in days.iter().enumerate() {
        if day.dist.tag != tag || day.dist.pixels.len() != pixels || day.obs.len() != pixels {
            return Err(Error::Shape(format!("day {d} does not match the first day's grid or model")));
        }
        if day.dist.cdf_mode == CdfMode::McMixture && day.passes.is_none() {
            return Err(Error::Contract(format!("day {d} uses the mixture CDF but has no passes")));
        }
    }

    // PIT and NLL per (day, pixel), days in parallel with a seed per day.
    let per_day = days
        .par_iter()
        .enumerate()
        .map(|(d, day)| {
            let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
            rng.set_stream(d as u64);
            let mut pit = vec![f64::NAN; pixels];
            let mut nll = vec![0.0; pixels];
            for i in 0..pixels {
                let y = day.obs[i];
                let dist = &day.dist.pixels[i];
                let samples = day.passes.map(|p| p.samples(i));
                nll[i] = match &samples {
                    Some(s) => pixel_nll_mixture(tag, s, y, opts.rain_threshold)?,
                    None => pixel_nll_matched(dist, y, opts.rain_threshold)?,
                };
                if !opts.wet_only || y >= WET_DAY_THRESHOLD {
                    pit[i] = pit_value(dist, samples.as_deref(), y, day.dist.cdf_mode, &mut rng)?;
                }
            }
            Ok((pit, nll))
        })
        .collect::<Result<Vec<_>>>()?;

    let pit_all: Vec<f64> = per_day.iter().flat_map(|(p, _)| p.iter().copied().filter(|u| !u.is_nan())).collect();
    let calibration = calibration_from_pit(&pit_all, opts.bins)?;
    let rmse_cal_map = (0..pixels)
        .into_par_iter()
        .map(|i| {
            let series: Vec<f64> = per_day.iter().map(|(p, _)| p[i]).filter(|u| !u.is_nan()).collect();
            calibration_from_pit(&series, opts.bins).map_or(f64::NAN, |r| r.rmse_cal)
        })
        .collect();
    let nll_all: Vec<f64> = per_day.iter().flat_map(|(_, n)| n.iter().copied()).collect();

    let pred: Vec<Vec<f64>> = days.iter().map(|d| d.dist.field(|p| p.mean)).collect();
    let obs: Vec<Vec<f64>> = days.iter().map(|d| d.obs.to_vec()).collect();
    let metrics = MetricsTable::compute(&pred, &obs, opts.days_per_year)?;

    let pr_curve = if tag.is_hurdle() {
        let scores: Vec<f64> = days.iter().flat_map(|d| d.dist.pixels.iter().map(|p| p.rain_prob)).collect();
        let labels: Vec<bool> = days.iter().flat_map(|d| d.obs.iter().map(|&y| y > opts.rain_threshold)).collect();
        match precision_recall(&scores, &labels) {
            Ok(c) => Some(c),
            Err(Error::Contract(_)) => None,
            Err(e) => return Err(e),
        }
    } else {
        None
    };

    Ok(EvaluationReport {
        tag,
        height: h,
        width: w,
        metrics,
        calibration,
        rmse_cal_map,
        nll: aggregate(&nll_all),
        pr_curve,
    })
}
