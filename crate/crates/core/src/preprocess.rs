//! Grid alignment, factor-8 reduction, baseline upsamplers and per-channel standardization.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use windscale_autograd::linear::{BoxFilter, LinearOp};
use windscale_autograd::Tensor;

use crate::error::{Error, Result};
use crate::grid::{FieldGrid, SamplePair, VariableId};

fn map_planes(src: &FieldGrid, h: usize, w: usize, spacing_km: f64, f: impl Fn(&[f64], &mut [f64])) -> FieldGrid {
    let mut data = vec![0.0; src.n_channels() * h * w];
    for (c, out) in data.chunks_mut(h * w).enumerate() {
        f(src.channel(c), out);
    }
    let mut g = FieldGrid::new_unchecked(src.channels().to_vec(), h, w, data, spacing_km);
    g.timestamp = src.timestamp.clone();
    g
}

/// Nearest-neighbour regridding under a uniform index mapping:
/// destination cell `i` reads source cell `floor((i + 0.5) * src / dst)`.
pub fn regrid_nearest(src: &FieldGrid, dst_hw: (usize, usize)) -> Result<FieldGrid> {
    let (dh, dw) = dst_hw;
    if dh == 0 || dw == 0 {
        return Err(Error::Bounds(format!("destination grid {dh}x{dw} is empty")));
    }
    let (sh, sw) = src.hw();
    let index = |i: usize, s: usize, d: usize| (((i as f64 + 0.5) * s as f64 / d as f64).floor() as usize).min(s - 1);
    let rows: Vec<usize> = (0..dh).map(|i| index(i, sh, dh)).collect();
    let cols: Vec<usize> = (0..dw).map(|j| index(j, sw, dw)).collect();
    let spacing = src.spacing_km * sw as f64 / dw as f64;
    Ok(map_planes(src, dh, dw, spacing, |p, out| {
        for (i, &si) in rows.iter().enumerate() {
            for (j, &sj) in cols.iter().enumerate() {
                out[i * dw + j] = p[si * sw + sj];
            }
        }
    }))
}

fn check_divisible(src: &FieldGrid, k: usize) -> Result<()> {
    let (h, w) = src.hw();
    if k == 0 || h % k != 0 || w % k != 0 {
        return Err(Error::Alignment(format!("grid {h}x{w} is not divisible by {k}")));
    }
    Ok(())
}

/// Block-mean reduction: each output cell is the mean of its `k x k` source block.
pub fn reduce_by_factor(src: &FieldGrid, k: usize) -> Result<FieldGrid> {
    check_divisible(src, k)?;
    let (h, w) = src.hw();
    let (oh, ow) = (h / k, w / k);
    let inv = 1.0 / (k * k) as f64;
    Ok(map_planes(src, oh, ow, src.spacing_km * k as f64, |p, out| {
        for i in 0..oh {
            for j in 0..ow {
                let mut acc = 0.0;
                for di in 0..k {
                    let row = &p[(i * k + di) * w + j * k..(i * k + di) * w + j * k + k];
                    for &v in row {
                        acc += v;
                    }
                }
                out[i * ow + j] = acc * inv;
            }
        }
    }))
}

/// Strided subsampling: keeps the top-left cell of every `k x k` block.
pub fn reduce_strided(src: &FieldGrid, k: usize) -> Result<FieldGrid> {
    check_divisible(src, k)?;
    let (h, w) = src.hw();
    let (oh, ow) = (h / k, w / k);
    Ok(map_planes(src, oh, ow, src.spacing_km * k as f64, |p, out| {
        for i in 0..oh {
            for j in 0..ow {
                out[i * ow + j] = p[i * k * w + j * k];
            }
        }
    }))
}

/// Replicates every cell into a `k x k` block.
pub fn upsample_nearest(src: &FieldGrid, k: usize) -> FieldGrid {
    let (h, w) = src.hw();
    let (oh, ow) = (h * k, w * k);
    map_planes(src, oh, ow, src.spacing_km / k as f64, |p, out| {
        for i in 0..oh {
            for j in 0..ow {
                out[i * ow + j] = p[(i / k) * w + j / k];
            }
        }
    })
}

/// Interpolation weights for cell-centre aligned upsampling along one axis.
fn bilinear_axis(n: usize, k: usize) -> Vec<(usize, usize, f64)> {
    (0..n * k)
        .map(|i| {
            let x = ((i as f64 + 0.5) / k as f64 - 0.5).clamp(0.0, (n - 1) as f64);
            let lo = (x.floor() as usize).min(n - 1);
            let hi = (lo + 1).min(n - 1);
            (lo, hi, x - lo as f64)
        })
        .collect()
}

/// Bilinear upsampling with cell centres at `(i + 0.5) / N` on both grids and
/// constant extension beyond the outermost coarse centres.
pub fn upsample_bilinear(src: &FieldGrid, k: usize) -> FieldGrid {
    let (h, w) = src.hw();
    let (oh, ow) = (h * k, w * k);
    let ry = bilinear_axis(h, k);
    let rx = bilinear_axis(w, k);
    map_planes(src, oh, ow, src.spacing_km / k as f64, |p, out| {
        for (i, &(y0, y1, ty)) in ry.iter().enumerate() {
            for (j, &(x0, x1, tx)) in rx.iter().enumerate() {
                let top = p[y0 * w + x0] * (1.0 - tx) + p[y0 * w + x1] * tx;
                let bot = p[y1 * w + x0] * (1.0 - tx) + p[y1 * w + x1] * tx;
                out[i * ow + j] = top * (1.0 - ty) + bot * ty;
            }
        }
    })
}

/// `k x k` box mean with reflection padding applied to one `(H, W)` plane.
pub fn box_mean(plane: &[f64], h: usize, w: usize, k: usize) -> Vec<f64> {
    let t = Tensor::from_vec(&[h, w], plane.to_vec());
    BoxFilter { k }.apply(&t).into_vec()
}

/// Channels whose values are `log1p`-transformed before standardization.
pub fn uses_log1p(id: VariableId) -> bool {
    matches!(id, VariableId::Me | VariableId::Z0)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChannelStats {
    pub mean: f64,
    pub std: f64,
    #[serde(default)]
    pub log1p: bool,
}

/// Per-channel standardization statistics fitted on the training split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub channels: BTreeMap<VariableId, ChannelStats>,
}

fn channel_stats(id: VariableId, values: impl Iterator<Item = f64>) -> Result<ChannelStats> {
    let log1p = uses_log1p(id);
    let (mut n, mut mean, mut m2) = (0.0f64, 0.0f64, 0.0f64);
    for v in values {
        let v = if log1p { v.ln_1p() } else { v };
        n += 1.0;
        let d = v - mean;
        mean += d / n;
        m2 += d * (v - mean);
    }
    let std = (m2 / n.max(1.0)).sqrt();
    if !(std > 1e-12 * mean.abs().max(1.0)) || !std.is_finite() {
        return Err(Error::Config(format!("channel {id} has zero variance on the training split")));
    }
    Ok(ChannelStats { mean, std, log1p })
}

/// Fits statistics for every predictor, predictand and covariate channel.
pub fn fit_norm(train: &[SamplePair]) -> Result<NormStats> {
    if train.is_empty() {
        return Err(Error::Config("cannot fit normalization on an empty training split".into()));
    }
    let mut channels = BTreeMap::new();
    for (grids, ids) in [
        (train.iter().map(|p| &p.low).collect::<Vec<_>>(), &VariableId::PREDICTORS[..]),
        (train.iter().map(|p| &p.high).collect(), &VariableId::PREDICTANDS[..]),
        (vec![&train[0].covariates], &VariableId::COVARIATES[..]),
    ] {
        for &id in ids {
            let mut values = Vec::new();
            for g in &grids {
                let ch = g
                    .channel_by_id(id)
                    .ok_or_else(|| Error::Shape(format!("training pair lacks channel {id}")))?;
                values.extend_from_slice(ch);
            }
            channels.insert(id, channel_stats(id, values.into_iter())?);
        }
    }
    Ok(NormStats { channels })
}

impl NormStats {
    pub fn get(&self, id: VariableId) -> Result<ChannelStats> {
        self.channels
            .get(&id)
            .copied()
            .ok_or_else(|| Error::Config(format!("no normalization statistics for channel {id}")))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = toml::to_string_pretty(self).map_err(|e| Error::format(path, e.to_string()))?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        toml::from_str(&text).map_err(|e| Error::format(path, e.to_string()))
    }
}

/// Standardizes every channel; the result may leave physical ranges (e.g. the mask).
pub fn apply_norm(grid: &FieldGrid, stats: &NormStats) -> Result<FieldGrid> {
    let mut out = grid.clone();
    for (c, &id) in grid.channels().iter().enumerate() {
        let s = stats.get(id)?;
        for v in out.channel_mut(c) {
            let x = if s.log1p { v.ln_1p() } else { *v };
            *v = (x - s.mean) / s.std;
        }
    }
    Ok(out)
}

pub fn invert_norm(grid: &FieldGrid, stats: &NormStats) -> Result<FieldGrid> {
    let mut out = grid.clone();
    for (c, &id) in grid.channels().iter().enumerate() {
        let s = stats.get(id)?;
        for v in out.channel_mut(c) {
            let x = *v * s.std + s.mean;
            *v = if s.log1p { x.exp_m1() } else { x };
        }
    }
    Ok(out)
}

/// Normalizes all three grids of a pair.
pub fn normalize_pair(pair: &SamplePair, stats: &NormStats) -> Result<SamplePair> {
    Ok(SamplePair {
        low: apply_norm(&pair.low, stats)?,
        high: apply_norm(&pair.high, stats)?,
        covariates: apply_norm(&pair.covariates, stats)?,
        timestamp: pair.timestamp.clone(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid(id: VariableId, h: usize, w: usize, data: Vec<f64>) -> FieldGrid {
        FieldGrid::new(vec![id], h, w, data, 1.0).unwrap()
    }

    #[test]
    fn nearest_regrid_cases() {
        let g = grid(VariableId::U10, 2, 2, vec![1.0, 2.0, 3.0, 4.0]);
        assert_eq!(regrid_nearest(&g, (2, 2)).unwrap().data(), g.data());
        let up = regrid_nearest(&g, (4, 4)).unwrap();
        // brute force: nearest source centre for each destination centre
        for i in 0..4 {
            for j in 0..4 {
                let y = (i as f64 + 0.5) / 4.0;
                let x = (j as f64 + 0.5) / 4.0;
                let si = (0..2).min_by(|&a, &b| {
                    let da = ((a as f64 + 0.5) / 2.0 - y).abs();
                    let db = ((b as f64 + 0.5) / 2.0 - y).abs();
                    da.partial_cmp(&db).unwrap()
                });
                let sj = (0..2).min_by(|&a, &b| {
                    let da = ((a as f64 + 0.5) / 2.0 - x).abs();
                    let db = ((b as f64 + 0.5) / 2.0 - x).abs();
                    da.partial_cmp(&db).unwrap()
                });
                assert_eq!(up.get(0, i, j), g.get(0, si.unwrap(), sj.unwrap()));
            }
        }
        assert_eq!(
            up.data(),
            &[1.0, 1.0, 2.0, 2.0, 1.0, 1.0, 2.0, 2.0, 3.0, 3.0, 4.0, 4.0, 3.0, 3.0, 4.0, 4.0]
        );
        let c = grid(VariableId::U10, 3, 5, vec![2.5; 15]);
        assert!(regrid_nearest(&c, (7, 2)).unwrap().data().iter().all(|&v| v == 2.5));
        assert!(matches!(regrid_nearest(&g, (0, 3)), Err(Error::Bounds(_))));
    }

    #[test]
    fn reduction_cases() {
        let g = grid(VariableId::U10, 8, 8, (1..=64).map(f64::from).collect());
        assert_eq!(reduce_by_factor(&g, 8).unwrap().data(), &[32.5]);
        assert_eq!(reduce_by_factor(&g, 1).unwrap().data(), g.data());
        let c = grid(VariableId::U10, 16, 24, vec![-1.25; 16 * 24]);
        let r = reduce_by_factor(&c, 8).unwrap();
        assert_eq!(r.hw(), (2, 3));
        assert!(r.data().iter().all(|&v| v == -1.25));
        assert!(matches!(reduce_by_factor(&grid(VariableId::U10, 9, 8, vec![0.0; 72]), 8), Err(Error::Alignment(_))));
        assert_eq!(reduce_strided(&g, 4).unwrap().data(), &[1.0, 5.0, 33.0, 37.0]);
    }

    #[test]
    fn upsampler_cases() {
        let g = grid(VariableId::U10, 1, 2, vec![0.0, 8.0]);
        let n = upsample_nearest(&g, 8);
        assert_eq!(n.hw(), (8, 16));
        for i in 0..8 {
            for j in 0..16 {
                assert_eq!(n.get(0, i, j), if j < 8 { 0.0 } else { 8.0 });
            }
        }
        let b = upsample_bilinear(&g, 8);
        // closed form: x = (j + 0.5) / 8 - 0.5 clamped to [0, 1], value 8 x
        for j in 0..16 {
            let x = ((j as f64 + 0.5) / 8.0 - 0.5).clamp(0.0, 1.0);
            assert!((b.get(0, 3, j) - 8.0 * x).abs() < 1e-12);
        }
        let row: Vec<f64> = (0..16).map(|j| b.get(0, 0, j)).collect();
        assert!(row.windows(2).all(|p| p[0] <= p[1]));
        assert_eq!((row[0], row[15]), (0.0, 8.0));
        let c = grid(VariableId::U10, 3, 4, vec![7.0; 12]);
        assert!(upsample_bilinear(&c, 8).data().iter().all(|&v| (v - 7.0).abs() < 1e-12));
        assert!(upsample_nearest(&c, 8).data().iter().all(|&v| v == 7.0));
    }

    #[test]
    fn box_mean_impulse() {
        let mut x = vec![0.0; 25];
        x[12] = 1.0;
        let y = box_mean(&x, 5, 5, 3);
        for i in 0..5 {
            for j in 0..5 {
                let inside = (1..=3).contains(&i) && (1..=3).contains(&j);
                let expect = if inside { 1.0 / 9.0 } else { 0.0 };
                assert!((y[i * 5 + j] - expect).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn zero_variance_channel_is_named() {
        let err = channel_stats(VariableId::TSurf, [3.0, 3.0, 3.0].into_iter()).unwrap_err();
        assert!(err.to_string().contains("T_surf"), "{err}");
    }

    #[test]
    fn stats_toml_round_trip() {
        let mut channels = BTreeMap::new();
        channels.insert(VariableId::Z0, ChannelStats { mean: 0.1, std: 0.3, log1p: true });
        channels.insert(VariableId::U10, ChannelStats { mean: -1.0 / 3.0, std: 2.0, log1p: false });
        let s = NormStats { channels };
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("norm.toml");
        s.save(&p).unwrap();
        assert_eq!(NormStats::load(&p).unwrap(), s);
    }
}
