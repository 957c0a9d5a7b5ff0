//! Whole-domain downscaling, overlapping-tile inference and interpolation baselines.

use std::path::Path;

use serde::{Deserialize, Serialize};
use windscale_autograd::{Element, Tensor};

use crate::checkpoint;
use crate::error::{Error, Result};
use crate::grid::{FieldGrid, SamplePair, VariableId, FACTOR};
use crate::metrics::Method;
use crate::networks::Generator;
use crate::preprocess::{apply_norm, invert_norm, upsample_bilinear, upsample_nearest, NormStats};

/// Which rows and columns a trim removes.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TrimEdge {
    /// Drop trailing rows and columns.
    #[default]
    Trailing,
    /// Split the excess of each grid between both edges (extra cell at the
    /// trailing edge), treating the two grids as centred on the same domain.
    Symmetric,
}

/// Largest multiple of `k` not exceeding each dimension.
pub fn trim_to_multiple(hw: (usize, usize), k: usize) -> Result<(usize, usize)> {
    let (h, w) = hw;
    if k == 0 || h < k || w < k {
        return Err(Error::Bounds(format!("grid {h}x{w} is smaller than the trim multiple {k}")));
    }
    Ok((h / k * k, w / k * k))
}

/// Aligned windows of the low-resolution input and the high-resolution reference grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TrimPlan {
    pub low_origin: (usize, usize),
    pub low_hw: (usize, usize),
    pub high_origin: (usize, usize),
    pub high_hw: (usize, usize),
}

impl TrimPlan {
    /// Trims the reference to a multiple of `FACTOR` and the low-resolution input to
    /// one eighth of that, so the generator output matches the trimmed reference.
    pub fn new(low_hw: (usize, usize), reference_hw: (usize, usize), edge: TrimEdge) -> Result<Self> {
        let high_hw = trim_to_multiple(reference_hw, FACTOR)?;
        let low_target = (high_hw.0 / FACTOR, high_hw.1 / FACTOR);
        if low_hw.0 < low_target.0 || low_hw.1 < low_target.1 {
            return Err(Error::Shape(format!(
                "low-resolution grid {}x{} cannot cover the trimmed reference {}x{}",
                low_hw.0, low_hw.1, high_hw.0, high_hw.1
            )));
        }
        let (low_origin, high_origin) = match edge {
            TrimEdge::Trailing => ((0, 0), (0, 0)),
            TrimEdge::Symmetric => (
                ((low_hw.0 - low_target.0) / 2, (low_hw.1 - low_target.1) / 2),
                ((reference_hw.0 - high_hw.0) / 2, (reference_hw.1 - high_hw.1) / 2),
            ),
        };
        Ok(TrimPlan { low_origin, low_hw: low_target, high_origin, high_hw })
    }

    pub fn low(&self, g: &FieldGrid) -> Result<FieldGrid> {
        g.window(self.low_origin.0, self.low_origin.1, self.low_hw.0, self.low_hw.1)
    }

    pub fn high(&self, g: &FieldGrid) -> Result<FieldGrid> {
        g.window(self.high_origin.0, self.high_origin.1, self.high_hw.0, self.high_hw.1)
    }
}

/// A trained generator together with the statistics of its training data.
#[derive(Debug, Clone)]
pub struct Downscaler<E: Element> {
    pub generator: Generator<E>,
    pub norm: NormStats,
    pub edge: TrimEdge,
}

impl<E: Element> Downscaler<E> {
    pub fn new(generator: Generator<E>, norm: NormStats) -> Self {
        Downscaler { generator, norm, edge: TrimEdge::Trailing }
    }

    /// Loads the generator; statistics come from `norm` or else from the checkpoint itself.
    pub fn from_checkpoint(path: &Path, norm: Option<NormStats>) -> Result<Self> {
        let ckpt = checkpoint::read(path)?;
        let norm = match norm.or_else(|| ckpt.header.norm.clone()) {
            Some(n) => n,
            None => return Err(Error::format(path, "checkpoint carries no normalization statistics")),
        };
        Ok(Self::new(ckpt.generator()?, norm))
    }

    fn prepare(&self, low: &FieldGrid, cov: &FieldGrid) -> Result<(Tensor<E>, Option<Tensor<E>>)> {
        let low = apply_norm(&low.select(&VariableId::PREDICTORS)?, &self.norm)?;
        let cov = if self.generator.spec.conditional() {
            Some(apply_norm(&cov.select(&VariableId::COVARIATES)?, &self.norm)?.to_tensor())
        } else {
            None
        };
        Ok((low.to_tensor(), cov))
    }

    fn finish(&self, out: &Tensor<E>, spacing_km: f64) -> Result<FieldGrid> {
        let g = FieldGrid::from_tensor(out, 0, VariableId::PREDICTANDS.to_vec(), spacing_km)?;
        invert_norm(&g, &self.norm)
    }

    /// Single generator pass over already aligned grids: `low (7, h, w)`, `cov (3, 8h, 8w)`.
    fn run(&self, low: &FieldGrid, cov: &FieldGrid) -> Result<FieldGrid> {
        let (lt, ct) = self.prepare(low, cov)?;
        let out = self.generator.infer(&lt, ct.as_ref())?;
        self.finish(&out, cov.spacing_km)
    }

    /// Trims both grids by the alignment rule and runs one full-domain forward pass.
    pub fn downscale_domain(&self, low: &FieldGrid, cov: &FieldGrid) -> Result<FieldGrid> {
        let plan = TrimPlan::new(low.hw(), cov.hw(), self.edge)?;
        let mut out = self.run(&plan.low(low)?, &plan.high(cov)?)?;
        out.timestamp = low.timestamp.clone();
        Ok(out)
    }

    /// Stitches overlapping tiles of `tile_lr` low-resolution cells whose outer
    /// `margin_lr` cells are discarded wherever they border another tile.
    pub fn downscale_tiled(&self, low: &FieldGrid, cov: &FieldGrid, tile_lr: usize, margin_lr: usize) -> Result<FieldGrid> {
        if tile_lr <= 2 * margin_lr {
            return Err(Error::Config(format!("tile size {tile_lr} leaves no core inside margin {margin_lr}")));
        }
        let plan = TrimPlan::new(low.hw(), cov.hw(), self.edge)?;
        let (low, cov) = (plan.low(low)?, plan.high(cov)?);
        let (h, w) = low.hw();
        let core = tile_lr - 2 * margin_lr;
        let (oh, ow) = (h * FACTOR, w * FACTOR);
        let mut data = vec![0.0; 2 * oh * ow];
        for y0 in (0..h).step_by(core) {
            for x0 in (0..w).step_by(core) {
                let (y1, x1) = ((y0 + core).min(h), (x0 + core).min(w));
                let (ty0, tx0) = (y0.saturating_sub(margin_lr), x0.saturating_sub(margin_lr));
                let (ty1, tx1) = ((y1 + margin_lr).min(h), (x1 + margin_lr).min(w));
                let tile = self.run(
                    &low.window(ty0, tx0, ty1 - ty0, tx1 - tx0)?,
                    &cov.window(ty0 * FACTOR, tx0 * FACTOR, (ty1 - ty0) * FACTOR, (tx1 - tx0) * FACTOR)?,
                )?;
                let tw = tile.width();
                for c in 0..2 {
                    let src = tile.channel(c);
                    let dst = &mut data[c * oh * ow..(c + 1) * oh * ow];
                    for i in y0 * FACTOR..y1 * FACTOR {
                        let si = i - ty0 * FACTOR;
                        let s = &src[si * tw + (x0 - tx0) * FACTOR..si * tw + (x1 - tx0) * FACTOR];
                        dst[i * ow + x0 * FACTOR..i * ow + x1 * FACTOR].copy_from_slice(s);
                    }
                }
            }
        }
        FieldGrid::new(VariableId::PREDICTANDS.to_vec(), oh, ow, data, cov.spacing_km)
    }
}

/// Interpolation baselines acting on the surface wind predictors.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Baseline {
    Bilinear,
    Nearest,
}

impl Baseline {
    pub fn label(self) -> &'static str {
        match self {
            Baseline::Bilinear => "bilinear",
            Baseline::Nearest => "nearest",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "bilinear" => Some(Baseline::Bilinear),
            "nearest" => Some(Baseline::Nearest),
            _ => None,
        }
    }
}

/// Upsamples `U_surf, V_surf` by the grid factor and relabels them as `u10, v10`.
pub fn downscale_baseline(low: &FieldGrid, method: Baseline) -> Result<FieldGrid> {
    let winds = low.select(&[VariableId::USurf, VariableId::VSurf])?;
    let up = match method {
        Baseline::Bilinear => upsample_bilinear(&winds, FACTOR),
        Baseline::Nearest => upsample_nearest(&winds, FACTOR),
    };
    let (h, w) = up.hw();
    let mut out = FieldGrid::new(VariableId::PREDICTANDS.to_vec(), h, w, up.data().to_vec(), up.spacing_km)?;
    out.timestamp = low.timestamp.clone();
    Ok(out)
}

impl Method for Baseline {
    fn label(&self) -> &str {
        Baseline::label(*self)
    }
    fn downscale(&self, pair: &SamplePair) -> Result<FieldGrid> {
        let plan = TrimPlan::new(pair.low.hw(), pair.high.hw(), TrimEdge::Trailing)?;
        downscale_baseline(&plan.low(&pair.low)?, *self)
    }
}

/// A trained model under evaluation.
pub struct ModelMethod<E: Element> {
    pub label: String,
    pub downscaler: Downscaler<E>,
}

impl<E: Element> Method for ModelMethod<E>
where
    Downscaler<E>: Sync,
{
    fn label(&self) -> &str {
        &self.label
    }
    fn downscale(&self, pair: &SamplePair) -> Result<FieldGrid> {
        self.downscaler.downscale_domain(&pair.low, &pair.covariates)
    }
}
