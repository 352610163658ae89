//! Grids, the DCG1 file format, coarsening, patch extraction, normalization
//! and the synthetic discrete-continuous precipitation generator.
//!
//! DCG1 layout (little-endian): magic `DCG1`, u32 height, u32 width,
//! f32 cell size in km, u8 variable code (0 precipitation mm/day,
//! 1 elevation m, 2 derived quantity), then `height * width` f32 values in
//! row-major order. Derived grids use NaN where a value is undefined.

use std::fs;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::likelihood::{ModelTag, DEFAULT_RAIN_THRESHOLD};

pub const GRID_MAGIC: &[u8; 4] = b"DCG1";
pub const MANIFEST: &str = "manifest.txt";
pub const ELEVATION_FILE: &str = "elevation.dcg";
/// Precipitation scale used by the Gaussian-likelihood pathways.
pub const GAUSSIAN_PRECIP_SCALE: f64 = 0.01;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Variable {
    Precip,
    Elevation,
    Derived,
}

impl Variable {
    pub fn code(self) -> u8 {
        match self {
            Variable::Precip => 0,
            Variable::Elevation => 1,
            Variable::Derived => 2,
        }
    }

    pub fn from_code(c: u8) -> Option<Self> {
        match c {
            0 => Some(Variable::Precip),
            1 => Some(Variable::Elevation),
            2 => Some(Variable::Derived),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Grid {
    pub height: usize,
    pub width: usize,
    /// km
    pub cell_size: f32,
    pub variable: Variable,
    pub values: Vec<f32>,
}

impl Grid {
    pub fn new(height: usize, width: usize, cell_size: f32, variable: Variable, values: Vec<f32>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::Shape(format!("grid must be non-empty, got {height}x{width}")));
        }
        if values.len() != height * width {
            return Err(Error::Shape(format!(
                "{height}x{width} grid given {} values",
                values.len()
            )));
        }
        match variable {
            Variable::Precip => {
                if let Some((i, v)) = values.iter().enumerate().find(|(_, v)| !(v.is_finite() && **v >= 0.0)) {
                    return Err(Error::Domain(format!("precipitation cell {i} is {v}")));
                }
            }
            Variable::Elevation => {
                if let Some((i, v)) = values.iter().enumerate().find(|(_, v)| !v.is_finite()) {
                    return Err(Error::Domain(format!("elevation cell {i} is {v}")));
                }
            }
            Variable::Derived => {}
        }
        Ok(Grid {
            height,
            width,
            cell_size,
            variable,
            values,
        })
    }

    pub fn derived(height: usize, width: usize, cell_size: f32, values: Vec<f64>) -> Result<Self> {
        Grid::new(height, width, cell_size, Variable::Derived, values.into_iter().map(|v| v as f32).collect())
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn at(&self, row: usize, col: usize) -> f32 {
        self.values[row * self.width + col]
    }

    pub fn mean(&self) -> f64 {
        self.values.iter().map(|&v| v as f64).sum::<f64>() / self.len() as f64
    }

    fn with_values(&self, values: Vec<f32>) -> Grid {
        Grid {
            values,
            ..self.clone()
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(17 + 4 * self.len());
        out.extend_from_slice(GRID_MAGIC);
        out.extend_from_slice(&(self.height as u32).to_le_bytes());
        out.extend_from_slice(&(self.width as u32).to_le_bytes());
        out.extend_from_slice(&self.cell_size.to_le_bytes());
        out.push(self.variable.code());
        for v in &self.values {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], origin: &Path) -> Result<Self> {
        let fail = |r: &str| Error::format(origin, r.to_string());
        if bytes.len() < 17 || &bytes[..4] != GRID_MAGIC {
            return Err(fail("not a DCG1 grid"));
        }
        let u32_at = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().unwrap()) as usize;
        let (height, width) = (u32_at(4), u32_at(8));
        let cell_size = f32::from_le_bytes(bytes[12..16].try_into().unwrap());
        let variable = Variable::from_code(bytes[16]).ok_or_else(|| fail("unknown variable code"))?;
        let n = height
            .checked_mul(width)
            .ok_or_else(|| fail("grid dimensions overflow"))?;
        if bytes.len() != 17 + 4 * n {
            return Err(fail(&format!(
                "{height}x{width} grid needs {} bytes, file has {}",
                17 + 4 * n,
                bytes.len()
            )));
        }
        let values = bytes[17..]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Grid::new(height, width, cell_size, variable, values).map_err(|e| fail(&e.to_string()))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Grid::from_bytes(&bytes, path)
    }
}

/// Writes `names` (relative to the manifest's directory), one per line.
pub fn write_manifest(path: &Path, names: &[String]) -> Result<()> {
    let mut text = names.join("\n");
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Paths listed in a manifest, resolved against its directory.
pub fn read_manifest(path: &Path) -> Result<Vec<PathBuf>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let base = path.parent().unwrap_or(Path::new("."));
    Ok(text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .map(|l| base.join(l))
        .collect())
}

/// A day sequence of precipitation grids sharing one elevation grid.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub elevation: Grid,
    pub days: Vec<Grid>,
}

impl Dataset {
    pub fn height(&self) -> usize {
        self.elevation.height
    }

    pub fn width(&self) -> usize {
        self.elevation.width
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        self.elevation.save(&dir.join(ELEVATION_FILE))?;
        let names: Vec<String> = (0..self.days.len()).map(|d| format!("day_{d:05}.dcg")).collect();
        for (g, name) in self.days.iter().zip(&names) {
            g.save(&dir.join(name))?;
        }
        write_manifest(&dir.join(MANIFEST), &names)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let elevation = Grid::load(&dir.join(ELEVATION_FILE))?;
        let days = read_manifest(&dir.join(MANIFEST))?
            .iter()
            .map(|p| Grid::load(p))
            .collect::<Result<Vec<_>>>()?;
        let ds = Dataset { elevation, days };
        ds.check()?;
        Ok(ds)
    }

    pub fn check(&self) -> Result<()> {
        if self.elevation.variable != Variable::Elevation {
            return Err(Error::Contract("dataset elevation grid has the wrong variable".into()));
        }
        for (d, g) in self.days.iter().enumerate() {
            if g.variable != Variable::Precip || g.height != self.height() || g.width != self.width() {
                return Err(Error::Contract(format!(
                    "day {d} is not a {}x{} precipitation grid",
                    self.height(),
                    self.width()
                )));
            }
        }
        Ok(())
    }
}

/// Block-mean coarsening by an integer factor. The bilinear stage is [`refine_bilinear`].
pub fn upscale_bilinear(grid: &Grid, factor: usize) -> Result<Grid> {
    if factor < 2 {
        return Err(Error::Config(format!("upscale factor must be at least 2, got {factor}")));
    }
    if !grid.height.is_multiple_of(factor) || !grid.width.is_multiple_of(factor) {
        return Err(Error::Shape(format!(
            "{}x{} grid is not divisible by {factor}",
            grid.height, grid.width
        )));
    }
    let (h, w) = (grid.height / factor, grid.width / factor);
    let mut values = vec![0.0f32; h * w];
    for (i, v) in values.iter_mut().enumerate() {
        let (r, c) = (i / w, i % w);
        let mut acc = 0.0f64;
        for dr in 0..factor {
            for dc in 0..factor {
                acc += grid.at(r * factor + dr, c * factor + dc) as f64;
            }
        }
        *v = (acc / (factor * factor) as f64) as f32;
    }
    Grid::new(h, w, grid.cell_size * factor as f32, grid.variable, values)
}

/// Bilinear interpolation of a coarse grid onto the grid `factor` times finer.
/// Coarse values sit at cell centres; fine cells beyond the outermost centres
/// take the edge value.
pub fn refine_bilinear(coarse: &Grid, factor: usize) -> Result<Grid> {
    if factor < 1 {
        return Err(Error::Config("refine factor must be positive".into()));
    }
    let (h, w) = (coarse.height * factor, coarse.width * factor);
    let axis = |i: usize, n: usize| -> (usize, usize, f64) {
        let x = ((i as f64 + 0.5) / factor as f64 - 0.5).clamp(0.0, (n - 1) as f64);
        let i0 = x.floor() as usize;
        let i1 = (i0 + 1).min(n - 1);
        (i0, i1, x - i0 as f64)
    };
    let mut values = Vec::with_capacity(h * w);
    for r in 0..h {
        let (r0, r1, fr) = axis(r, coarse.height);
        for c in 0..w {
            let (c0, c1, fc) = axis(c, coarse.width);
            let top = (1.0 - fc) * coarse.at(r0, c0) as f64 + fc * coarse.at(r0, c1) as f64;
            let bottom = (1.0 - fc) * coarse.at(r1, c0) as f64 + fc * coarse.at(r1, c1) as f64;
            values.push(((1.0 - fr) * top + fr * bottom) as f32);
        }
    }
    Grid::new(h, w, coarse.cell_size / factor as f32, coarse.variable, values)
}

/// The low-resolution input on the high-resolution grid: block mean, then bilinear refinement.
pub fn coarsen(grid: &Grid, factor: usize) -> Result<Grid> {
    refine_bilinear(&upscale_bilinear(grid, factor)?, factor)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Patch {
    pub row: usize,
    pub col: usize,
    /// `[channels, size, size]`
    pub input: Vec<f32>,
    /// `[size, size]`
    pub label: Vec<f32>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PatchSet {
    pub size: usize,
    pub stride: usize,
    pub channels: usize,
    pub patches: Vec<Patch>,
}

impl PatchSet {
    pub fn new(size: usize, stride: usize, channels: usize) -> Self {
        PatchSet {
            size,
            stride,
            channels,
            patches: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.patches.len()
    }

    pub fn is_empty(&self) -> bool {
        self.patches.is_empty()
    }

    pub fn extend(&mut self, other: PatchSet) -> Result<()> {
        if (other.size, other.stride, other.channels) != (self.size, self.stride, self.channels) {
            return Err(Error::Contract("patch sets with different geometry".into()));
        }
        self.patches.extend(other.patches);
        Ok(())
    }
}

pub fn patch_count(height: usize, width: usize, size: usize, stride: usize) -> usize {
    if height < size || width < size {
        return 0;
    }
    ((height - size) / stride + 1) * ((width - size) / stride + 1)
}

/// Row-major enumeration of aligned `size x size` patches.
pub fn extract_patches(inputs: &[&Grid], label: &Grid, size: usize, stride: usize) -> Result<PatchSet> {
    if size == 0 || stride == 0 {
        return Err(Error::Config("patch size and stride must be positive".into()));
    }
    for g in inputs {
        if (g.height, g.width) != (label.height, label.width) {
            return Err(Error::Shape(format!(
                "input grid {}x{} is not aligned with label {}x{}",
                g.height, g.width, label.height, label.width
            )));
        }
    }
    if label.height < size || label.width < size {
        return Err(Error::Shape(format!(
            "{}x{} grid is smaller than a {size}x{size} patch",
            label.height, label.width
        )));
    }
    let mut set = PatchSet::new(size, stride, inputs.len());
    let slice = |g: &Grid, r0: usize, c0: usize, out: &mut Vec<f32>| {
        for r in r0..r0 + size {
            out.extend_from_slice(&g.values[r * g.width + c0..r * g.width + c0 + size]);
        }
    };
    for r0 in (0..=label.height - size).step_by(stride) {
        for c0 in (0..=label.width - size).step_by(stride) {
            let mut input = Vec::with_capacity(inputs.len() * size * size);
            for g in inputs {
                slice(g, r0, c0, &mut input);
            }
            let mut lab = Vec::with_capacity(size * size);
            slice(label, r0, c0, &mut lab);
            set.patches.push(Patch {
                row: r0,
                col: c0,
                input,
                label: lab,
            });
        }
    }
    Ok(set)
}

/// Precipitation scale and elevation statistics.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Normalization {
    /// Applied to labels, thresholds and (unless `log_input`) the precipitation input.
    pub precip_scale: f64,
    /// Feed the precipitation input channel as `log(1 + mm)`, matching a log-scale location.
    pub log_input: bool,
    pub elevation_mean: f64,
    pub elevation_std: f64,
}

impl Normalization {
    /// Gaussian pathways scale precipitation by 1/100; the lognormal pathway keeps mm.
    pub fn precip_scale_for(tag: ModelTag) -> f64 {
        match tag {
            ModelTag::DcLognormal => 1.0,
            _ => GAUSSIAN_PRECIP_SCALE,
        }
    }

    pub fn fit(tag: ModelTag, elevation: &Grid) -> Result<Self> {
        let n = elevation.len() as f64;
        let mean = elevation.mean();
        let var = elevation.values.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n;
        if !(var > 0.0) {
            return Err(Error::Domain("elevation has zero standard deviation".into()));
        }
        Ok(Normalization {
            precip_scale: Normalization::precip_scale_for(tag),
            log_input: tag == ModelTag::DcLognormal,
            elevation_mean: mean,
            elevation_std: var.sqrt(),
        })
    }

    /// The raw-mm rain threshold in normalized units.
    pub fn rain_threshold(&self) -> f64 {
        DEFAULT_RAIN_THRESHOLD * self.precip_scale
    }

    pub fn normalize(&self, grid: &Grid) -> Result<Grid> {
        match grid.variable {
            Variable::Precip => Ok(grid.with_values(
                grid.values.iter().map(|&v| (v as f64 * self.precip_scale) as f32).collect(),
            )),
            Variable::Elevation => Ok(grid.with_values(
                grid.values
                    .iter()
                    .map(|&v| ((v as f64 - self.elevation_mean) / self.elevation_std) as f32)
                    .collect(),
            )),
            Variable::Derived => Err(Error::Contract("derived grids have no normalization".into())),
        }
    }

    pub fn denormalize(&self, grid: &Grid) -> Result<Grid> {
        match grid.variable {
            Variable::Precip => Ok(grid.with_values(
                grid.values.iter().map(|&v| (v as f64 / self.precip_scale) as f32).collect(),
            )),
            Variable::Elevation => Ok(grid.with_values(
                grid.values
                    .iter()
                    .map(|&v| (v as f64 * self.elevation_std + self.elevation_mean) as f32)
                    .collect(),
            )),
            Variable::Derived => Err(Error::Contract("derived grids have no normalization".into())),
        }
    }

    /// Precipitation as the network sees it on its input channel.
    pub fn normalize_input(&self, grid: &Grid) -> Result<Grid> {
        if grid.variable != Variable::Precip || !self.log_input {
            return self.normalize(grid);
        }
        Ok(grid.with_values(grid.values.iter().map(|&v| (v as f64).ln_1p() as f32).collect()))
    }

    pub fn denormalize_input(&self, grid: &Grid) -> Result<Grid> {
        if grid.variable != Variable::Precip || !self.log_input {
            return self.denormalize(grid);
        }
        Ok(grid.with_values(grid.values.iter().map(|&v| (v as f64).exp_m1().max(0.0) as f32).collect()))
    }

    pub fn to_header(&self) -> Vec<(String, String)> {
        vec![
            ("norm.precip_scale".into(), format!("{:e}", self.precip_scale)),
            ("norm.log_input".into(), self.log_input.to_string()),
            ("norm.elevation_mean".into(), format!("{:e}", self.elevation_mean)),
            ("norm.elevation_std".into(), format!("{:e}", self.elevation_std)),
        ]
    }

    pub fn from_header(h: &std::collections::BTreeMap<String, String>) -> Result<Self> {
        let get = |k: &str| -> Result<f64> {
            h.get(k)
                .and_then(|v| v.parse().ok())
                .ok_or_else(|| Error::Config(format!("checkpoint header lacks a numeric `{k}`")))
        };
        let log_input = match h.get("norm.log_input").map(String::as_str) {
            Some("true") => true,
            Some("false") => false,
            _ => return Err(Error::Config("checkpoint header lacks a boolean `norm.log_input`".into())),
        };
        Ok(Normalization {
            precip_scale: get("norm.precip_scale")?,
            log_input,
            elevation_mean: get("norm.elevation_mean")?,
            elevation_std: get("norm.elevation_std")?,
        })
    }
}

/// Normalized network input for one day: `[coarsened precip, elevation]`, each `H x W`.
pub fn network_input(day: &Grid, elevation: &Grid, factor: usize, norm: &Normalization) -> Result<[Grid; 2]> {
    Ok([
        norm.normalize_input(&coarsen(day, factor)?)?,
        norm.normalize(elevation)?,
    ])
}

/// Patches of every day of `ds`, labels normalized.
pub fn dataset_patches(ds: &Dataset, factor: usize, norm: &Normalization, size: usize, stride: usize) -> Result<PatchSet> {
    let elevation = norm.normalize(&ds.elevation)?;
    let sets = ds
        .days
        .par_iter()
        .map(|day| {
            let lr = norm.normalize_input(&coarsen(day, factor)?)?;
            let label = norm.normalize(day)?;
            extract_patches(&[&lr, &elevation], &label, size, stride)
        })
        .collect::<Result<Vec<_>>>()?;
    let mut all = PatchSet::new(size, stride, 2);
    for s in sets {
        all.extend(s)?;
    }
    Ok(all)
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticConfig {
    pub seed: u64,
    pub height: usize,
    pub width: usize,
    pub days: usize,
    /// Gaussian smoothing scale, cells.
    pub correlation_length: f64,
    pub rain_fraction: f64,
    pub intensity_mu: f64,
    pub intensity_sigma: f64,
    pub elevation_coeff: f64,
    /// km
    pub cell_size: f32,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            seed: 0,
            height: 64,
            width: 64,
            days: 1000,
            correlation_length: 4.0,
            rain_fraction: 0.4,
            intensity_mu: 1.0,
            intensity_sigma: 1.0,
            elevation_coeff: 0.5,
            cell_size: 4.0,
        }
    }
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        if self.height == 0 || self.width == 0 {
            return Err(Error::Config("synthetic grid must be non-empty".into()));
        }
        if !(self.rain_fraction > 0.0 && self.rain_fraction < 1.0) {
            return Err(Error::Config(format!("rain fraction {} outside (0, 1)", self.rain_fraction)));
        }
        if !(self.intensity_sigma > 0.0) {
            return Err(Error::Config(format!("intensity sigma {} must be positive", self.intensity_sigma)));
        }
        if !(self.correlation_length > 0.0) {
            return Err(Error::Config("correlation length must be positive".into()));
        }
        if !(self.cell_size > 0.0) {
            return Err(Error::Config("cell size must be positive".into()));
        }
        Ok(())
    }
}

/// 1-D Gaussian taps with `sum w^2 = 1`, so smoothed white noise keeps unit variance.
fn smoothing_taps(length: f64) -> Vec<f64> {
    let r = (3.0 * length).ceil() as i64;
    let w: Vec<f64> = (-r..=r).map(|k| (-(k * k) as f64 / (2.0 * length * length)).exp()).collect();
    let norm = w.iter().map(|x| x * x).sum::<f64>().sqrt();
    w.into_iter().map(|x| x / norm).collect()
}

/// Unit-variance spatially correlated Gaussian field.
pub fn smooth_noise(rng: &mut ChaCha8Rng, height: usize, width: usize, length: f64) -> Vec<f64> {
    let taps = smoothing_taps(length);
    let r = taps.len() / 2;
    let (ph, pw) = (height + 2 * r, width + 2 * r);
    let noise: Vec<f64> = (0..ph * pw).map(|_| StandardNormal.sample(rng)).collect();
    let mut rows = vec![0.0; ph * width];
    for i in 0..ph {
        for j in 0..width {
            rows[i * width + j] = taps.iter().enumerate().map(|(k, t)| t * noise[i * pw + j + k]).sum();
        }
    }
    let mut out = vec![0.0; height * width];
    for i in 0..height {
        for j in 0..width {
            out[i * width + j] = taps.iter().enumerate().map(|(k, t)| t * rows[(i + k) * width + j]).sum();
        }
    }
    out
}

fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Elevation field in metres plus `days` precipitation grids.
///
/// Each day rains on the cells whose latent field exceeds that day's
/// `1 - rain_fraction` quantile; wet intensity is
/// `exp(mu + sigma * g' + coeff * elevation_normalized)` with `g'` an
/// independent smoothed field.
pub fn generate_synthetic(cfg: &SyntheticConfig) -> Result<Dataset> {
    cfg.validate()?;
    let (h, w) = (cfg.height, cfg.width);
    let n = h * w;
    let elev_field = smooth_noise(&mut stream_rng(cfg.seed, 0), h, w, 2.0 * cfg.correlation_length);
    let elevation = Grid::new(
        h,
        w,
        cfg.cell_size,
        Variable::Elevation,
        elev_field.iter().map(|z| (800.0 + 400.0 * z) as f32).collect(),
    )?;
    let mean = elevation.mean();
    let std = (elevation.values.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n as f64).sqrt();
    let elev_norm: Vec<f64> = elevation
        .values
        .iter()
        .map(|&v| if std > 0.0 { (v as f64 - mean) / std } else { 0.0 })
        .collect();
    let wet_count = (cfg.rain_fraction * n as f64).round() as usize;

    let days = (0..cfg.days)
        .into_par_iter()
        .map(|d| {
            let mut rng = stream_rng(cfg.seed, d as u64 + 1);
            let g = smooth_noise(&mut rng, h, w, cfg.correlation_length);
            let g2 = smooth_noise(&mut rng, h, w, cfg.correlation_length);
            let mut sorted = g.clone();
            sorted.sort_by(f64::total_cmp);
            let cut = if wet_count == 0 { f64::INFINITY } else { sorted[n - wet_count] };
            let values = (0..n)
                .map(|i| {
                    if g[i] >= cut {
                        (cfg.intensity_mu + cfg.intensity_sigma * g2[i] + cfg.elevation_coeff * elev_norm[i]).exp() as f32
                    } else {
                        0.0
                    }
                })
                .collect();
            Grid::new(h, w, cfg.cell_size, Variable::Precip, values)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset { elevation, days })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    fn precip(h: usize, w: usize, vals: Vec<f32>) -> Grid {
        Grid::new(h, w, 4.0, Variable::Precip, vals).unwrap()
    }

    fn random_grid(h: usize, w: usize, seed: u64) -> Grid {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        precip(h, w, (0..h * w).map(|_| rng.gen_range(0.0..50.0)).collect())
    }

    #[test]
    fn grid_invariants() {
        assert!(Grid::new(1, 1, 4.0, Variable::Precip, vec![-1.0]).is_err());
        assert!(Grid::new(1, 1, 4.0, Variable::Elevation, vec![f32::NAN]).is_err());
        assert!(Grid::new(1, 1, 4.0, Variable::Derived, vec![f32::NAN]).is_ok());
        assert!(Grid::new(2, 2, 4.0, Variable::Precip, vec![0.0; 3]).is_err());
    }

    #[test]
    fn dcg1_roundtrip_and_layout() {
        let g = random_grid(3, 5, 1);
        let b = g.to_bytes();
        assert_eq!(&b[..4], b"DCG1");
        assert_eq!(u32::from_le_bytes(b[4..8].try_into().unwrap()), 3);
        assert_eq!(u32::from_le_bytes(b[8..12].try_into().unwrap()), 5);
        assert_eq!(f32::from_le_bytes(b[12..16].try_into().unwrap()), 4.0);
        assert_eq!(b[16], 0);
        assert_eq!(b.len(), 17 + 60);
        assert_eq!(Grid::from_bytes(&b, Path::new("m")).unwrap(), g);
        assert!(Grid::from_bytes(&b[..b.len() - 2], Path::new("m")).is_err());
    }

    #[test]
    fn block_mean_examples() {
        let c = upscale_bilinear(&precip(4, 4, vec![3.0; 16]), 2).unwrap();
        assert_eq!(c.values, vec![3.0; 4]);
        let c = upscale_bilinear(&precip(2, 2, vec![0.0, 0.0, 4.0, 4.0]), 2).unwrap();
        assert_eq!(c.values, vec![2.0]);
        assert_eq!(c.cell_size, 8.0);
        assert!(upscale_bilinear(&precip(3, 4, vec![0.0; 12]), 2).is_err());
    }

    #[test]
    fn block_mean_conserves_mass() {
        let g = random_grid(64, 48, 2);
        let c = upscale_bilinear(&g, 4).unwrap();
        assert!((c.mean() - g.mean()).abs() <= 1e-6 * g.mean());
    }

    #[test]
    fn refinement_reproduces_linear_ramps_inside() {
        // A ramp along the columns is reproduced exactly between the outer centres.
        let coarse = Grid::new(2, 4, 16.0, Variable::Elevation, vec![0.0, 1.0, 2.0, 3.0, 0.0, 1.0, 2.0, 3.0]).unwrap();
        let fine = refine_bilinear(&coarse, 4).unwrap();
        assert_eq!((fine.height, fine.width), (8, 16));
        for c in 2..14 {
            let want = (c as f64 + 0.5) / 4.0 - 0.5;
            assert!((fine.at(3, c) as f64 - want).abs() < 1e-6);
        }
        assert_eq!(fine.at(0, 0), 0.0);
        assert_eq!(fine.at(0, 15), 3.0);
        let flat = refine_bilinear(&precip(2, 2, vec![5.0; 4]), 3).unwrap();
        assert!(flat.values.iter().all(|&v| (v - 5.0).abs() < 1e-6));
    }

    #[test]
    fn patch_counts_and_content() {
        let g = random_grid(64, 64, 3);
        assert_eq!(extract_patches(&[&g], &g, 64, 48).unwrap().len(), 1);
        let g = random_grid(112, 112, 4);
        let e = random_grid(112, 112, 5);
        let set = extract_patches(&[&g, &e], &g, 64, 48).unwrap();
        assert_eq!(set.len(), 4);
        assert_eq!(set.len(), patch_count(112, 112, 64, 48));
        for p in &set.patches {
            for r in 0..64 {
                for c in 0..64 {
                    assert_eq!(p.input[r * 64 + c], g.at(p.row + r, p.col + c));
                    assert_eq!(p.input[64 * 64 + r * 64 + c], e.at(p.row + r, p.col + c));
                    assert_eq!(p.label[r * 64 + c], g.at(p.row + r, p.col + c));
                }
            }
        }
        let offsets: Vec<_> = set.patches.iter().map(|p| (p.row, p.col)).collect();
        assert_eq!(offsets, vec![(0, 0), (0, 48), (48, 0), (48, 48)]);
        assert!(extract_patches(&[&g], &random_grid(32, 32, 6), 16, 16).is_err());
        assert!(extract_patches(&[&random_grid(8, 8, 1)], &random_grid(8, 8, 1), 16, 16).is_err());
    }

    proptest! {
        #[test]
        fn patch_count_formula(h in 16usize..80, w in 16usize..80, size in 1usize..16, stride in 1usize..20) {
            let g = random_grid(h, w, 0);
            let set = extract_patches(&[&g], &g, size, stride).unwrap();
            prop_assert_eq!(set.len(), ((h - size) / stride + 1) * ((w - size) / stride + 1));
        }

        #[test]
        fn normalization_roundtrip(seed in any::<u64>()) {
            let g = random_grid(8, 8, seed);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let e = Grid::new(8, 8, 4.0, Variable::Elevation, (0..64).map(|_| rng.gen_range(-100.0..3000.0)).collect()).unwrap();
            for tag in ModelTag::ALL {
                let n = Normalization::fit(tag, &e).unwrap();
                let back = n.denormalize_input(&n.normalize_input(&g).unwrap()).unwrap();
                for (a, b) in back.values.iter().zip(&g.values) {
                    prop_assert!((a - b).abs() <= 1e-6 * b.abs().max(1.0));
                }
                for grid in [&g, &e] {
                    let back = n.denormalize(&n.normalize(grid).unwrap()).unwrap();
                    let scale = grid.values.iter().fold(1.0f32, |m, v| m.max(v.abs()));
                    for (a, b) in back.values.iter().zip(&grid.values) {
                        prop_assert!((a - b).abs() <= 1e-6 * scale);
                    }
                }
            }
        }
    }

    #[test]
    fn normalization_examples() {
        let e = Grid::new(2, 2, 4.0, Variable::Elevation, vec![0.0, 10.0, 20.0, 30.0]).unwrap();
        let n = Normalization::fit(ModelTag::Gaussian, &e).unwrap();
        assert_eq!(n.normalize(&precip(1, 1, vec![100.0])).unwrap().values, vec![1.0]);
        // Direct recomputation with a two-pass loop.
        let mean = (0.0 + 10.0 + 20.0 + 30.0) / 4.0;
        let var = [0.0f64, 10.0, 20.0, 30.0].iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 4.0;
        assert_eq!(n.elevation_mean, mean);
        assert!((n.elevation_std - var.sqrt()).abs() < 1e-12);
        let ln = Normalization::fit(ModelTag::DcLognormal, &e).unwrap();
        assert_eq!(ln.normalize(&precip(1, 1, vec![100.0])).unwrap().values, vec![100.0]);
        assert_eq!(ln.normalize_input(&precip(1, 1, vec![0.0])).unwrap().values, vec![0.0]);
        assert!(!n.log_input && ln.log_input);
        assert!((n.rain_threshold() - 0.005).abs() < 1e-15);
        let flat = Grid::new(1, 2, 4.0, Variable::Elevation, vec![5.0, 5.0]).unwrap();
        assert!(Normalization::fit(ModelTag::Gaussian, &flat).is_err());
    }

    fn synthetic(days: usize, coeff: f64, seed: u64) -> Dataset {
        synthetic_with_length(days, coeff, seed, 4.0)
    }

    fn synthetic_with_length(days: usize, coeff: f64, seed: u64, length: f64) -> Dataset {
        generate_synthetic(&SyntheticConfig {
            seed,
            days,
            elevation_coeff: coeff,
            correlation_length: length,
            rain_fraction: 0.3,
            ..SyntheticConfig::default()
        })
        .unwrap()
    }

    #[test]
    fn synthetic_wet_fraction() {
        let ds = synthetic(25, 0.5, 1);
        let cells = ds.days.iter().flat_map(|d| &d.values).count();
        assert!(cells >= 100_000);
        let wet = ds.days.iter().flat_map(|d| &d.values).filter(|&&v| v > 0.0).count() as f64;
        assert!((wet / cells as f64 - 0.3).abs() < 0.01);
    }

    #[test]
    fn synthetic_is_deterministic() {
        assert_eq!(synthetic(3, 0.5, 7), synthetic(3, 0.5, 7));
        assert_ne!(synthetic(3, 0.5, 7), synthetic(3, 0.5, 8));
    }

    fn correlation(a: &[f64], b: &[f64]) -> f64 {
        let n = a.len() as f64;
        let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
        let cov: f64 = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum();
        let va: f64 = a.iter().map(|x| (x - ma).powi(2)).sum();
        let vb: f64 = b.iter().map(|y| (y - mb).powi(2)).sum();
        cov / (va * vb).sqrt()
    }

    fn wet_log_intensity_vs_elevation(ds: &Dataset) -> (Vec<f64>, Vec<f64>) {
        let (mut li, mut el) = (Vec::new(), Vec::new());
        for d in &ds.days {
            for (i, &v) in d.values.iter().enumerate() {
                if v > 0.0 {
                    li.push((v as f64).ln());
                    el.push(ds.elevation.values[i] as f64);
                }
            }
        }
        (li, el)
    }

    #[test]
    fn elevation_effect_can_be_disabled() {
        // A short correlation length keeps the effective sample size close to the cell count.
        let (li, el) = wet_log_intensity_vs_elevation(&synthetic_with_length(100, 0.0, 3, 0.5));
        assert!(li.len() >= 100_000);
        let r = correlation(&li, &el);
        assert!(r.abs() < 0.02, "{r}");
        let (li, el) = wet_log_intensity_vs_elevation(&synthetic(20, 0.5, 3));
        assert!(correlation(&li, &el) > 0.2);
    }

    #[test]
    fn wet_intensities_are_right_skewed() {
        let ds = generate_synthetic(&SyntheticConfig {
            days: 20,
            intensity_sigma: 0.8,
            ..SyntheticConfig::default()
        })
        .unwrap();
        let wet: Vec<f64> = ds.days.iter().flat_map(|d| &d.values).filter(|&&v| v > 0.0).map(|&v| v as f64).collect();
        let n = wet.len() as f64;
        let m = wet.iter().sum::<f64>() / n;
        let m2 = wet.iter().map(|x| (x - m).powi(2)).sum::<f64>() / n;
        let m3 = wet.iter().map(|x| (x - m).powi(3)).sum::<f64>() / n;
        assert!(m3 / m2.powf(1.5) > 1.0);
    }

    #[test]
    fn pipeline_never_produces_negative_precipitation() {
        let ds = synthetic(10, 0.5, 4);
        let norm = Normalization::fit(ModelTag::Gaussian, &ds.elevation).unwrap();
        let set = dataset_patches(&ds, 4, &norm, 16, 16).unwrap();
        assert_eq!(set.len(), 10 * 16);
        for p in &set.patches {
            assert!(p.input[..256].iter().all(|&v| v >= 0.0));
            assert!(p.label.iter().all(|&v| v >= 0.0));
        }
    }

    #[test]
    fn dataset_save_load() {
        let ds = synthetic(3, 0.5, 5);
        let dir = tempfile::tempdir().unwrap();
        ds.save(dir.path()).unwrap();
        assert_eq!(Dataset::load(dir.path()).unwrap(), ds);
        let listed = read_manifest(&dir.path().join(MANIFEST)).unwrap();
        assert_eq!(listed.len(), 3);
        assert!(listed[0].ends_with("day_00000.dcg"));
    }
}
