//! Procedural terrain, static covariates and paired coarse/fine wind fields.
//!
//! The truth wind at each hour is a roughness-damped, terrain-channelled
//! version of a smooth large-scale flow with a little small-scale detail.
//! Low-resolution surface winds are exact 8x8 block means of the truth.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{FieldGrid, SamplePair, VariableId, FACTOR};
use crate::preprocess::{box_mean, reduce_by_factor};
use crate::spectral::{derive_seed, power_law_surface};

pub const WATER_Z0: f64 = 0.0002;
pub const LAND_Z0_MIN: f64 = 0.01;
pub const LAND_Z0_MAX: f64 = 1.5;
pub const MAX_OROGRAPHY: f64 = 2500.0;
const MAX_WIND: f64 = 60.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub seed: u64,
    /// High-resolution `(H, W)`.
    pub domain_hw: (usize, usize),
    pub n_hours: usize,
    /// Log-log slope of the orography power spectrum.
    pub terrain_roughness: f64,
    /// Typical large-scale wind speed in m/s.
    pub background_wind_scale: f64,
    /// High-resolution grid spacing in km.
    pub spacing_km: f64,
    /// Approximate fraction of the domain covered by water.
    pub water_fraction: f64,
    /// Standard deviation of the unresolvable small-scale detail, m/s.
    pub detail_scale: f64,
    pub train_fraction: f64,
    pub val_fraction: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            seed: 7,
            domain_hw: (64, 64),
            n_hours: 80,
            terrain_roughness: -3.0,
            background_wind_scale: 8.0,
            spacing_km: 2.5,
            water_fraction: 0.3,
            detail_scale: 0.3,
            train_fraction: 0.75,
            val_fraction: 0.125,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let (h, w) = self.domain_hw;
        if h < 64 || w < 64 || h % FACTOR != 0 || w % FACTOR != 0 {
            return Err(Error::Config(format!("domain {h}x{w} must be at least 64x64 and a multiple of {FACTOR}")));
        }
        if self.n_hours == 0 {
            return Err(Error::Config("n_hours must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.water_fraction) {
            return Err(Error::Config("water_fraction must lie in [0, 1)".into()));
        }
        if !(self.train_fraction > 0.0 && self.val_fraction > 0.0 && self.train_fraction + self.val_fraction < 1.0) {
            return Err(Error::Config("split fractions must be positive and leave room for a test period".into()));
        }
        Ok(())
    }
}

fn rng_for(cfg: &SynthConfig, tags: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, tags))
}

const STREAM_TERRAIN: u64 = 1;
const STREAM_WATER: u64 = 2;
const STREAM_FLOW: u64 = 3;
const STREAM_HOUR: u64 = 4;

fn quantile(values: &[f64], q: f64) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    v[((v.len() - 1) as f64 * q).round() as usize]
}

/// Central-difference gradient in field units per km.
fn gradient(plane: &[f64], h: usize, w: usize, spacing_km: f64) -> (Vec<f64>, Vec<f64>) {
    let mut gx = vec![0.0; h * w];
    let mut gy = vec![0.0; h * w];
    for i in 0..h {
        for j in 0..w {
            let (jl, jr) = (j.saturating_sub(1), (j + 1).min(w - 1));
            let (iu, id) = (i.saturating_sub(1), (i + 1).min(h - 1));
            gx[i * w + j] = (plane[i * w + jr] - plane[i * w + jl]) / ((jr - jl) as f64 * spacing_km);
            gy[i * w + j] = (plane[id * w + j] - plane[iu * w + j]) / ((id - iu) as f64 * spacing_km);
        }
    }
    (gx, gy)
}

/// Orography `me`, water mask `mg` and roughness length `z0`; depends only on the seed.
pub fn make_covariates(cfg: &SynthConfig) -> Result<FieldGrid> {
    cfg.validate()?;
    let (h, w) = cfg.domain_hw;
    let raw = power_law_surface(h, w, cfg.terrain_roughness, &mut rng_for(cfg, &[STREAM_TERRAIN]));
    let (lo, hi) = raw.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    let me: Vec<f64> = raw.iter().map(|v| ((v - lo) / (hi - lo) * MAX_OROGRAPHY).clamp(0.0, MAX_OROGRAPHY)).collect();

    let lakes = power_law_surface(h, w, -4.0, &mut rng_for(cfg, &[STREAM_WATER]));
    let level = quantile(&lakes, cfg.water_fraction);
    let wet: Vec<f64> = lakes.iter().map(|&v| if v < level { 1.0 } else { 0.0 }).collect();
    let mg: Vec<f64> = box_mean(&wet, h, w, 5).into_iter().map(|v| v.clamp(0.0, 1.0)).collect();

    let (gx, gy) = gradient(&me, h, w, cfg.spacing_km);
    let slope: Vec<f64> = gx.iter().zip(&gy).map(|(a, b)| a.hypot(*b)).collect();
    let steep = quantile(&slope, 0.95).max(f64::MIN_POSITIVE);
    let z0: Vec<f64> = slope
        .iter()
        .zip(&mg)
        .map(|(&s, &m)| {
            if m > 0.5 {
                WATER_Z0
            } else {
                LAND_Z0_MIN + (LAND_Z0_MAX - LAND_Z0_MIN) * (s / steep).min(1.0)
            }
        })
        .collect();

    let mut data = me;
    data.extend(mg);
    data.extend(z0);
    FieldGrid::new(VariableId::COVARIATES.to_vec(), h, w, data, cfg.spacing_km)
}

/// Wind reduction factor of a logarithmic surface-layer profile at 10 m, equal to 1 over open water.
pub fn roughness_factor(z0: f64) -> f64 {
    (10.0 / z0).ln() / (10.0 / WATER_Z0).ln()
}

/// Slowly varying parameters of the large-scale flow, fixed per dataset.
struct FlowModes {
    heading: f64,
    turn_period: f64,
    wobble_phase: f64,
    gust_phase: f64,
    /// (ky, kx, phase, angular rate, amplitude u, amplitude v)
    modes: Vec<[f64; 6]>,
    temp_phase: f64,
}

impl FlowModes {
    fn new(cfg: &SynthConfig) -> Self {
        let mut rng = rng_for(cfg, &[STREAM_FLOW]);
        let tau = std::f64::consts::TAU;
        let modes = (0..4)
            .map(|_| {
                let angle = rng.random_range(0.0..tau);
                let k = rng.random_range(0.6..1.6);
                [
                    k * angle.sin(),
                    k * angle.cos(),
                    rng.random_range(0.0..tau),
                    rng.random_range(0.05..0.25),
                    rng.random_range(-0.35..0.35),
                    rng.random_range(-0.35..0.35),
                ]
            })
            .collect();
        FlowModes {
            heading: rng.random_range(0.0..tau),
            turn_period: rng.random_range(60.0..120.0),
            wobble_phase: rng.random_range(0.0..tau),
            gust_phase: rng.random_range(0.0..tau),
            modes,
            temp_phase: rng.random_range(0.0..tau),
        }
    }

    /// Background `(u, v)` at fractional domain position `(y, x)` in `[0, 1)` and time `t` hours.
    fn background(&self, scale: f64, y: f64, x: f64, t: f64) -> (f64, f64) {
        let tau = std::f64::consts::TAU;
        let theta = self.heading + tau * t / self.turn_period + 0.6 * (0.13 * t + self.wobble_phase).sin();
        let strength = 1.0 + 0.4 * (0.07 * t + self.gust_phase).sin();
        let (mut u, mut v) = (strength * theta.cos(), strength * theta.sin());
        for m in &self.modes {
            let phase = tau * (m[0] * y + m[1] * x) + m[2] + m[3] * t;
            u += m[4] * phase.sin();
            v += m[5] * phase.cos();
        }
        (scale * u, scale * v)
    }
}

fn check_covariates(cfg: &SynthConfig, cov: &FieldGrid) -> Result<()> {
    if cov.hw() != cfg.domain_hw || cov.channels() != VariableId::COVARIATES {
        return Err(Error::Shape(format!(
            "covariates {:?} with {} channels do not match the configured domain {:?}",
            cov.hw(),
            cov.n_channels(),
            cfg.domain_hw
        )));
    }
    Ok(())
}

/// High-resolution truth and low-resolution predictors for one hour.
pub fn make_hour(cfg: &SynthConfig, covariates: &FieldGrid, hour: usize) -> Result<SamplePair> {
    cfg.validate()?;
    check_covariates(cfg, covariates)?;
    let (h, w) = cfg.domain_hw;
    let n = h * w;
    let me = covariates.channel(0);
    let z0 = covariates.channel(2);
    let flow = FlowModes::new(cfg);
    let t = hour as f64;
    let mut rng = rng_for(cfg, &[STREAM_HOUR, hour as u64]);

    let (gx, gy) = gradient(me, h, w, cfg.spacing_km);
    let mut mags: Vec<f64> = gx.iter().zip(&gy).map(|(a, b)| a.hypot(*b)).collect();
    let g0 = quantile(&mags, 0.5).max(1e-9);
    let detail_u = power_law_surface(h, w, -2.0, &mut rng);
    let detail_v = power_law_surface(h, w, -2.0, &mut rng);

    let mut bg = vec![(0.0, 0.0); n];
    let mut truth = vec![0.0; 2 * n];
    for i in 0..h {
        for j in 0..w {
            let p = i * w + j;
            let (ub, vb) = flow.background(cfg.background_wind_scale, (i as f64 + 0.5) / h as f64, (j as f64 + 0.5) / w as f64, t);
            bg[p] = (ub, vb);
            // deflect the flow away from the terrain gradient where slopes are steep
            let g = mags[p];
            let (nx, ny) = if g > 0.0 { (gx[p] / g, gy[p] / g) } else { (0.0, 0.0) };
            let s = g * g / (g * g + g0 * g0);
            let along = ub * nx + vb * ny;
            let ridge = 1.0 + 0.3 * me[p] / MAX_OROGRAPHY;
            let uc = ridge * (ub - 0.7 * s * along * nx) + cfg.detail_scale * detail_u[p];
            let vc = ridge * (vb - 0.7 * s * along * ny) + cfg.detail_scale * detail_v[p];
            let r = roughness_factor(z0[p]);
            truth[p] = (r * uc).clamp(-MAX_WIND, MAX_WIND);
            truth[n + p] = (r * vc).clamp(-MAX_WIND, MAX_WIND);
        }
    }
    mags.clear();
    let tag = format!("hour-{hour:05}");
    let high = FieldGrid::new(VariableId::PREDICTANDS.to_vec(), h, w, truth, cfg.spacing_km)?.with_timestamp(&tag);
    let surf = reduce_by_factor(&high, FACTOR)?;

    let (lh, lw) = (h / FACTOR, w / FACTOR);
    let ln = lh * lw;
    let lr_spacing = cfg.spacing_km * FACTOR as f64;
    let bg_grid = {
        let mut d: Vec<f64> = bg.iter().map(|b| b.0).collect();
        d.extend(bg.iter().map(|b| b.1));
        FieldGrid::new_unchecked(VariableId::PREDICTANDS.to_vec(), h, w, d, cfg.spacing_km)
    };
    let bg_lr = reduce_by_factor(&bg_grid, FACTOR)?;
    let me_lr = reduce_by_factor(&covariates.select(&[VariableId::Me])?, FACTOR)?;
    let (mgx, mgy) = gradient(me_lr.channel(0), lh, lw, lr_spacing);
    let mut noise = || power_law_surface(lh, lw, -4.0, &mut rng);
    let diurnal = 8.0 * (std::f64::consts::TAU * t / 24.0 + flow.temp_phase).sin();
    let (n1, n2, n3, n4, n5) = (noise(), noise(), noise(), noise(), noise());

    let mut low = Vec::with_capacity(7 * ln);
    low.extend_from_slice(surf.channel(0));
    low.extend_from_slice(surf.channel(1));
    let t_surf: Vec<f64> = (0..ln).map(|p| 15.0 + diurnal - 0.0065 * me_lr.channel(0)[p] + 2.0 * n1[p]).collect();
    let t_546: Vec<f64> = t_surf.iter().zip(&n2).map(|(ts, e)| -25.0 + 0.3 * (ts - 15.0) + 1.5 * e).collect();
    low.extend(t_surf);
    low.extend(t_546);
    low.extend((0..ln).map(|p| 1.6 * bg_lr.channel(0)[p] + 1.0 * n3[p]));
    low.extend((0..ln).map(|p| 1.6 * bg_lr.channel(1)[p] + 1.0 * n4[p]));
    low.extend((0..ln).map(|p| -0.01 * (bg_lr.channel(0)[p] * mgx[p] + bg_lr.channel(1)[p] * mgy[p]) + 0.2 * n5[p]));
    let low = FieldGrid::new(VariableId::PREDICTORS.to_vec(), lh, lw, low, lr_spacing)?.with_timestamp(&tag);

    Ok(SamplePair { low, high, covariates: covariates.clone(), timestamp: tag })
}

/// Hour indices of each split. The test split is the final contiguous period;
/// training and validation hours are a seeded random partition of the rest.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HourSplit {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

impl HourSplit {
    /// Plain-text manifest, one `hour<TAB>split` line per hour in hour order.
    pub fn manifest(&self) -> String {
        let mut rows: Vec<(usize, &str)> = self
            .train
            .iter()
            .map(|&h| (h, "train"))
            .chain(self.val.iter().map(|&h| (h, "val")))
            .chain(self.test.iter().map(|&h| (h, "test")))
            .collect();
        rows.sort();
        rows.iter().map(|(h, s)| format!("{h}\t{s}\n")).collect()
    }

    pub fn parse_manifest(text: &str) -> Result<Self> {
        let mut split = HourSplit { train: vec![], val: vec![], test: vec![] };
        for (n, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
            let mut parts = line.split('\t');
            let hour = parts.next().and_then(|h| h.trim().parse::<usize>().ok());
            let which = parts.next().map(str::trim);
            match (hour, which) {
                (Some(h), Some("train")) => split.train.push(h),
                (Some(h), Some("val")) => split.val.push(h),
                (Some(h), Some("test")) => split.test.push(h),
                _ => return Err(Error::Config(format!("bad split manifest line {}: {line:?}", n + 1))),
            }
        }
        Ok(split)
    }
}

pub fn split_hours(cfg: &SynthConfig) -> Result<HourSplit> {
    cfg.validate()?;
    let n = cfg.n_hours;
    if n < 10 {
        return Err(Error::Config(format!("{n} hours cannot populate train, validation and test splits (need at least 10)")));
    }
    let n_test = ((1.0 - cfg.train_fraction - cfg.val_fraction) * n as f64).round() as usize;
    let n_val = (cfg.val_fraction * n as f64).round() as usize;
    if n_test == 0 || n_val == 0 || n_test + n_val >= n {
        return Err(Error::Config(format!("{n} hours are too few for the configured split fractions")));
    }
    let year = n - n_test;
    let mut hours: Vec<usize> = (0..year).collect();
    hours.shuffle(&mut rng_for(cfg, &[5]));
    let val = {
        let mut v = hours[..n_val].to_vec();
        v.sort();
        v
    };
    let mut train = hours[n_val..].to_vec();
    train.sort();
    Ok(HourSplit { train, val, test: (year..n).collect() })
}

/// A generated dataset with its split.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub covariates: FieldGrid,
    pub split: HourSplit,
    pub train: Vec<SamplePair>,
    pub val: Vec<SamplePair>,
    pub test: Vec<SamplePair>,
}

pub fn make_dataset(cfg: &SynthConfig) -> Result<Dataset> {
    let split = split_hours(cfg)?;
    let covariates = make_covariates(cfg)?;
    let gen = |hours: &[usize]| hours.iter().map(|&h| make_hour(cfg, &covariates, h)).collect::<Result<Vec<_>>>();
    Ok(Dataset {
        train: gen(&split.train)?,
        val: gen(&split.val)?,
        test: gen(&split.test)?,
        covariates,
        split,
    })
}
