//! Run configuration documents and the ablation presets.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::inference::{Baseline, TrimEdge};
use crate::losses::{FsMode, LossConfig};
use crate::networks::{CriticSpec, GeneratorSpec};
use crate::synth::SynthConfig;
use crate::training::TrainConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Baselines scored next to the model.
    pub baselines: Vec<Baseline>,
    pub workers: usize,
    /// Optional explicit power floor for the log-spectral distance.
    pub lsd_floor: Option<f64>,
    pub trim: TrimEdge,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig { baselines: vec![Baseline::Bilinear, Baseline::Nearest], workers: 1, lsd_floor: None, trim: TrimEdge::Trailing }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PlotConfig {
    /// Step interval over which validation MSE is averaged.
    pub val_interval: u64,
    pub width: u32,
    pub height: u32,
}

impl Default for PlotConfig {
    fn default() -> Self {
        PlotConfig { val_interval: 10, width: 960, height: 640 }
    }
}

/// Everything one experiment needs, as a single TOML document.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub name: String,
    pub synth: SynthConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub plot: PlotConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            name: "cond-nfs".into(),
            synth: SynthConfig::default(),
            train: desk_train(),
            eval: EvalConfig::default(),
            plot: PlotConfig::default(),
        }
    }
}

/// Generator sized for CPU training on the default synthetic domain.
pub fn desk_generator() -> GeneratorSpec {
    GeneratorSpec { trunk_width: 16, n_rrdb: 2, dense_blocks: 2, growth: 8, cov_widths: [8, 8, 16], ..GeneratorSpec::default() }
}

pub fn desk_critic() -> CriticSpec {
    CriticSpec { base_width: 8, n_stages: 3, head_width: 32, ..CriticSpec::default() }
}

fn desk_train() -> TrainConfig {
    TrainConfig {
        crop_size_hr: 32,
        crops_per_pair: 192,
        val_crops_per_pair: 32,
        max_steps: 200,
        generator: desk_generator(),
        critic: desk_critic(),
        ..TrainConfig::default()
    }
}

pub const PRESETS: [&str; 8] =
    ["baseline-downgan", "cond-nfs", "cond-fs5", "cond-fs9", "cond-fs13", "cond-pfs5", "cond-pfs9", "cond-pfs13"];

/// Ablation configurations; only the conditioning switch and the loss differ between them.
pub fn preset(name: &str) -> Result<RunConfig> {
    let mut cfg = RunConfig { name: name.to_string(), ..RunConfig::default() };
    let loss = |mode, kernel| LossConfig { fs_mode: mode, fs_kernel: kernel, ..LossConfig::default() };
    match name {
        "baseline-downgan" => cfg.train.generator.cov_channels = 0,
        "cond-nfs" => {}
        _ => {
            let (mode, k) = name
                .strip_prefix("cond-fs")
                .map(|k| (FsMode::Fs, k))
                .or_else(|| name.strip_prefix("cond-pfs").map(|k| (FsMode::Pfs, k)))
                .ok_or_else(|| unknown(name))?;
            let k = match k {
                "5" => 5,
                "9" => 9,
                "13" => 13,
                _ => return Err(unknown(name)),
            };
            cfg.train.loss = loss(mode, k);
        }
    }
    Ok(cfg)
}

fn unknown(name: &str) -> Error {
    Error::Config(format!("unknown preset {name:?}; expected one of {}", PRESETS.join(", ")))
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.synth.validate()?;
        self.train.validate()?;
        let (h, w) = self.synth.domain_hw;
        if self.train.crop_size_hr > h.min(w) {
            return Err(Error::Config(format!("crop size {} exceeds the synthetic domain {h}x{w}", self.train.crop_size_hr)));
        }
        Ok(())
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| Error::format(path, e.to_string()))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_toml()?).map_err(|e| Error::io(path, e))
    }

    /// Paper-scale networks and crops; needs a domain of at least 128x128.
    pub fn full_scale(mut self) -> Self {
        self.train.generator = GeneratorSpec { cov_channels: self.train.generator.cov_channels, ..GeneratorSpec::default() };
        self.train.critic = CriticSpec::default();
        self.train.crop_size_hr = 128;
        self.synth.domain_hw = (self.synth.domain_hw.0.max(128), self.synth.domain_hw.1.max(128));
        self
    }
}
