//! Gridded multi-channel fields, the variable catalog, and paired samples.
//!
//! Arrays are channel-major `(C, H, W)` everywhere. A full-size high-resolution domain
//! of nominal size "(2540, 1280)" is therefore held as `H = 1280, W = 2540`.

use std::fmt;

use serde::{Deserialize, Serialize};
use windscale_autograd::{Element, Tensor};

use crate::error::{Error, Result};

/// Downscaling factor between predictor and predictand grids.
pub const FACTOR: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum VariableId {
    #[serde(rename = "U_surf")]
    USurf,
    #[serde(rename = "V_surf")]
    VSurf,
    #[serde(rename = "T_surf")]
    TSurf,
    #[serde(rename = "T_546")]
    T546,
    #[serde(rename = "U_546")]
    U546,
    #[serde(rename = "V_546")]
    V546,
    #[serde(rename = "W_546")]
    W546,
    #[serde(rename = "u10")]
    U10,
    #[serde(rename = "v10")]
    V10,
    #[serde(rename = "me")]
    Me,
    #[serde(rename = "mg")]
    Mg,
    #[serde(rename = "z0")]
    Z0,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Role {
    Predictor,
    Predictand,
    Covariate,
}

impl VariableId {
    pub const ALL: [VariableId; 12] = [
        VariableId::USurf,
        VariableId::VSurf,
        VariableId::TSurf,
        VariableId::T546,
        VariableId::U546,
        VariableId::V546,
        VariableId::W546,
        VariableId::U10,
        VariableId::V10,
        VariableId::Me,
        VariableId::Mg,
        VariableId::Z0,
    ];

    /// Low-resolution predictors, in generator input order.
    pub const PREDICTORS: [VariableId; 7] = [
        VariableId::USurf,
        VariableId::VSurf,
        VariableId::TSurf,
        VariableId::T546,
        VariableId::U546,
        VariableId::V546,
        VariableId::W546,
    ];

    pub const PREDICTANDS: [VariableId; 2] = [VariableId::U10, VariableId::V10];

    pub const COVARIATES: [VariableId; 3] = [VariableId::Me, VariableId::Mg, VariableId::Z0];

    pub fn name(self) -> &'static str {
        match self {
            VariableId::USurf => "U_surf",
            VariableId::VSurf => "V_surf",
            VariableId::TSurf => "T_surf",
            VariableId::T546 => "T_546",
            VariableId::U546 => "U_546",
            VariableId::V546 => "V_546",
            VariableId::W546 => "W_546",
            VariableId::U10 => "u10",
            VariableId::V10 => "v10",
            VariableId::Me => "me",
            VariableId::Mg => "mg",
            VariableId::Z0 => "z0",
        }
    }

    pub fn units(self) -> &'static str {
        match self {
            VariableId::USurf | VariableId::VSurf | VariableId::U546 | VariableId::V546 => "m/s",
            VariableId::U10 | VariableId::V10 => "m/s",
            VariableId::TSurf | VariableId::T546 => "°C",
            VariableId::W546 => "Pa/s",
            VariableId::Me => "m",
            VariableId::Mg => "fraction",
            VariableId::Z0 => "m",
        }
    }

    pub fn role(self) -> Role {
        match self {
            VariableId::U10 | VariableId::V10 => Role::Predictand,
            VariableId::Me | VariableId::Mg | VariableId::Z0 => Role::Covariate,
            _ => Role::Predictor,
        }
    }

    pub fn parse(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|v| v.name() == name)
    }
}

impl fmt::Display for VariableId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// A `(C, H, W)` field with per-channel variable identity.
#[derive(Debug, Clone, PartialEq)]
pub struct FieldGrid {
    channels: Vec<VariableId>,
    height: usize,
    width: usize,
    data: Vec<f64>,
    pub spacing_km: f64,
    pub timestamp: Option<String>,
}

impl FieldGrid {
    pub fn new(channels: Vec<VariableId>, height: usize, width: usize, data: Vec<f64>, spacing_km: f64) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::InvalidField(format!("empty grid {height}x{width}")));
        }
        if channels.is_empty() {
            return Err(Error::InvalidField("no channels".into()));
        }
        if data.len() != channels.len() * height * width {
            return Err(Error::InvalidField(format!(
                "{} values for {} channels of {height}x{width}",
                data.len(),
                channels.len()
            )));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            let c = channels[i / (height * width)];
            return Err(Error::InvalidField(format!("non-finite value in channel {c}")));
        }
        let grid = FieldGrid { channels, height, width, data, spacing_km, timestamp: None };
        if let Some(mg) = grid.channel_by_id(VariableId::Mg) {
            if mg.iter().any(|&v| !(0.0..=1.0).contains(&v)) {
                return Err(Error::InvalidField("mask out of [0,1]".into()));
            }
        }
        Ok(grid)
    }

    /// Construction without the mask-range check, for deliberately malformed test inputs
    /// and intermediate normalized data.
    pub fn new_unchecked(channels: Vec<VariableId>, height: usize, width: usize, data: Vec<f64>, spacing_km: f64) -> Self {
        assert_eq!(data.len(), channels.len() * height * width, "field data length");
        FieldGrid { channels, height, width, data, spacing_km, timestamp: None }
    }

    pub fn with_timestamp(mut self, ts: impl Into<String>) -> Self {
        self.timestamp = Some(ts.into());
        self
    }

    pub fn channels(&self) -> &[VariableId] {
        &self.channels
    }

    pub fn n_channels(&self) -> usize {
        self.channels.len()
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn hw(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn plane(&self) -> usize {
        self.height * self.width
    }

    pub fn channel(&self, c: usize) -> &[f64] {
        let p = self.plane();
        &self.data[c * p..(c + 1) * p]
    }

    pub fn channel_mut(&mut self, c: usize) -> &mut [f64] {
        let p = self.plane();
        &mut self.data[c * p..(c + 1) * p]
    }

    pub fn index_of(&self, id: VariableId) -> Option<usize> {
        self.channels.iter().position(|&c| c == id)
    }

    pub fn channel_by_id(&self, id: VariableId) -> Option<&[f64]> {
        self.index_of(id).map(|c| self.channel(c))
    }

    pub fn get(&self, c: usize, i: usize, j: usize) -> f64 {
        self.data[(c * self.height + i) * self.width + j]
    }

    /// Rectangular sub-window `[top, top+h) x [left, left+w)` of every channel.
    pub fn window(&self, top: usize, left: usize, h: usize, w: usize) -> Result<FieldGrid> {
        if h == 0 || w == 0 || top + h > self.height || left + w > self.width {
            return Err(Error::Bounds(format!(
                "window {h}x{w} at ({top}, {left}) outside {}x{}",
                self.height, self.width
            )));
        }
        let mut data = Vec::with_capacity(self.n_channels() * h * w);
        for c in 0..self.n_channels() {
            let plane = self.channel(c);
            for i in top..top + h {
                data.extend_from_slice(&plane[i * self.width + left..i * self.width + left + w]);
            }
        }
        Ok(FieldGrid {
            channels: self.channels.clone(),
            height: h,
            width: w,
            data,
            spacing_km: self.spacing_km,
            timestamp: self.timestamp.clone(),
        })
    }

    /// Sub-field holding only the requested channels, in the requested order.
    pub fn select(&self, ids: &[VariableId]) -> Result<FieldGrid> {
        let mut data = Vec::with_capacity(ids.len() * self.plane());
        for &id in ids {
            let c = self
                .index_of(id)
                .ok_or_else(|| Error::Shape(format!("channel {id} not present")))?;
            data.extend_from_slice(self.channel(c));
        }
        Ok(FieldGrid {
            channels: ids.to_vec(),
            height: self.height,
            width: self.width,
            data,
            spacing_km: self.spacing_km,
            timestamp: self.timestamp.clone(),
        })
    }

    /// Same grid with replaced channel values.
    pub fn with_data(&self, data: Vec<f64>) -> FieldGrid {
        assert_eq!(data.len(), self.data.len());
        FieldGrid { data, ..self.clone() }
    }

    /// `(1, C, H, W)` tensor view of the field.
    pub fn to_tensor<E: Element>(&self) -> Tensor<E> {
        Tensor::from_f64(&[1, self.n_channels(), self.height, self.width], &self.data)
    }

    /// Inverse of [`FieldGrid::to_tensor`] for one batch item.
    pub fn from_tensor<E: Element>(t: &Tensor<E>, item: usize, channels: Vec<VariableId>, spacing_km: f64) -> Result<FieldGrid> {
        let (b, c, h, w) = t.dims4();
        if item >= b || c != channels.len() {
            return Err(Error::Shape(format!("cannot take item {item} with {} channels from {:?}", channels.len(), t.shape())));
        }
        let per = c * h * w;
        let data = t.data()[item * per..(item + 1) * per].iter().map(|v| v.as_f64()).collect();
        FieldGrid::new(channels, h, w, data, spacing_km)
    }
}

/// Matched predictors, predictands and static covariates for one forecast hour.
#[derive(Debug, Clone, PartialEq)]
pub struct SamplePair {
    pub low: FieldGrid,
    pub high: FieldGrid,
    pub covariates: FieldGrid,
    pub timestamp: String,
}

/// Reports every broken `SamplePair` invariant; an empty list means the pair is well formed.
pub fn validate_pair(pair: &SamplePair) -> Vec<String> {
    let mut out = Vec::new();
    if pair.low.channels() != VariableId::PREDICTORS {
        out.push(format!("low channels {:?} are not the 7 predictors", names(pair.low.channels())));
    }
    if pair.high.channels() != VariableId::PREDICTANDS {
        out.push(format!("high channels {:?} are not the 2 predictands", names(pair.high.channels())));
    }
    if pair.covariates.channels() != VariableId::COVARIATES {
        out.push(format!("covariate channels {:?} are not me, mg, z0", names(pair.covariates.channels())));
    }
    if pair.high.height() != FACTOR * pair.low.height() {
        out.push("factor-8 relation violated on H".into());
    }
    if pair.high.width() != FACTOR * pair.low.width() {
        out.push("factor-8 relation violated on W".into());
    }
    if pair.covariates.hw() != pair.high.hw() {
        out.push(format!(
            "covariates {:?} do not share the high-resolution shape {:?}",
            pair.covariates.hw(),
            pair.high.hw()
        ));
    }
    for grid in [&pair.low, &pair.high, &pair.covariates] {
        for (c, id) in grid.channels().iter().enumerate() {
            if grid.channel(c).iter().any(|v| !v.is_finite()) {
                out.push(format!("non-finite values in channel {id}"));
            }
        }
    }
    if let Some(mg) = pair.covariates.channel_by_id(VariableId::Mg) {
        if mg.iter().any(|&v| !(0.0..=1.0).contains(&v)) {
            out.push("mask out of [0,1] in channel mg".into());
        }
    }
    if let Some(z0) = pair.covariates.channel_by_id(VariableId::Z0) {
        if z0.iter().any(|&v| v < 0.0) {
            out.push("negative roughness length in channel z0".into());
        }
    }
    out
}

fn names(ids: &[VariableId]) -> Vec<&'static str> {
    ids.iter().map(|v| v.name()).collect()
}

/// Aligned crop: high-resolution window of `size_hr` at `(top_hr, left_hr)` and the
/// matching low-resolution window at `(top_hr / 8, left_hr / 8)`.
pub fn crop(pair: &SamplePair, top_hr: usize, left_hr: usize, size_hr: usize) -> Result<SamplePair> {
    if top_hr % FACTOR != 0 || left_hr % FACTOR != 0 {
        return Err(Error::Alignment(format!(
            "crop offset ({top_hr}, {left_hr}) is not a multiple of {FACTOR}"
        )));
    }
    if size_hr % FACTOR != 0 || size_hr == 0 {
        return Err(Error::Alignment(format!("crop size {size_hr} is not a positive multiple of {FACTOR}")));
    }
    let (h, w) = pair.high.hw();
    if top_hr + size_hr > h || left_hr + size_hr > w {
        return Err(Error::Bounds(format!(
            "crop {size_hr}x{size_hr} at ({top_hr}, {left_hr}) exceeds domain {h}x{w}"
        )));
    }
    let s = size_hr / FACTOR;
    Ok(SamplePair {
        low: pair.low.window(top_hr / FACTOR, left_hr / FACTOR, s, s)?,
        high: pair.high.window(top_hr, left_hr, size_hr, size_hr)?,
        covariates: pair.covariates.window(top_hr, left_hr, size_hr, size_hr)?,
        timestamp: pair.timestamp.clone(),
    })
}

/// Stacked training tensors. Covariates are either shared `(1, 3, H, W)` or per item `(B, 3, H, W)`.
#[derive(Debug, Clone)]
pub struct Batch<E: Element> {
    pub low: Tensor<E>,
    pub high: Tensor<E>,
    pub covariates: Tensor<E>,
}

impl<E: Element> Batch<E> {
    /// Stack same-shaped pairs; each item keeps its own covariate window.
    pub fn from_pairs(pairs: &[SamplePair]) -> Result<Self> {
        let first = pairs.first().ok_or_else(|| Error::Shape("empty batch".into()))?;
        let stack = |get: fn(&SamplePair) -> &FieldGrid| -> Result<Tensor<E>> {
            let g0 = get(first);
            let mut data = Vec::with_capacity(pairs.len() * g0.data().len());
            for p in pairs {
                let g = get(p);
                if g.hw() != g0.hw() || g.n_channels() != g0.n_channels() {
                    return Err(Error::Shape("batch items differ in shape".into()));
                }
                data.extend(g.data().iter().map(|&v| E::of(v)));
            }
            Ok(Tensor::from_vec(&[pairs.len(), g0.n_channels(), g0.height(), g0.width()], data))
        };
        Ok(Batch { low: stack(|p| &p.low)?, high: stack(|p| &p.high)?, covariates: stack(|p| &p.covariates)? })
    }

    pub fn len(&self) -> usize {
        self.low.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}
