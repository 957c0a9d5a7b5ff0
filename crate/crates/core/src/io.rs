//! Field container files and the on-disk dataset layout.
//!
//! A field file holds one [`FieldGrid`]: 8-byte magic, `u64` header length, a
//! JSON header with channel names, shape, spacing and timestamp, then the values
//! as little-endian `f64` in channel-major order.
//!
//! A dataset directory contains `covariates.wsf`, `low/<hour>.wsf`,
//! `high/<hour>.wsf` and the `split.tsv` manifest.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{validate_pair, FieldGrid, SamplePair, VariableId};
use crate::synth::{Dataset, HourSplit};

const MAGIC: &[u8; 8] = b"WSFIELD1";

#[derive(Debug, Serialize, Deserialize)]
struct FieldHeader {
    channels: Vec<VariableId>,
    height: usize,
    width: usize,
    spacing_km: f64,
    timestamp: Option<String>,
}

pub fn write_field(path: &Path, grid: &FieldGrid) -> Result<()> {
    let header = FieldHeader {
        channels: grid.channels().to_vec(),
        height: grid.height(),
        width: grid.width(),
        spacing_km: grid.spacing_km,
        timestamp: grid.timestamp.clone(),
    };
    let json = serde_json::to_vec(&header).map_err(|e| Error::format(path, e.to_string()))?;
    let mut bytes = Vec::with_capacity(16 + json.len() + 8 * grid.data().len());
    bytes.extend_from_slice(MAGIC);
    bytes.extend_from_slice(&(json.len() as u64).to_le_bytes());
    bytes.extend_from_slice(&json);
    for v in grid.data() {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_field(path: &Path) -> Result<FieldGrid> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(Error::format(path, "not a windscale field file"));
    }
    let hlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let body = bytes.get(16..16 + hlen).ok_or_else(|| Error::format(path, "truncated header"))?;
    let h: FieldHeader = serde_json::from_slice(body).map_err(|e| Error::format(path, e.to_string()))?;
    let values = &bytes[16 + hlen..];
    let expect = h.channels.len() * h.height * h.width;
    if values.len() != 8 * expect {
        return Err(Error::format(path, format!("expected {expect} values, found {} bytes", values.len())));
    }
    let data = values.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
    let mut g = FieldGrid::new(h.channels, h.height, h.width, data, h.spacing_km).map_err(|e| Error::format(path, e.to_string()))?;
    g.timestamp = h.timestamp;
    Ok(g)
}

fn hour_tag(hour: usize) -> String {
    format!("hour-{hour:05}")
}

/// Writes every hour of a dataset; returns the paths written.
pub fn write_dataset(dir: &Path, ds: &Dataset) -> Result<Vec<PathBuf>> {
    for sub in ["low", "high"] {
        let p = dir.join(sub);
        std::fs::create_dir_all(&p).map_err(|e| Error::io(&p, e))?;
    }
    let mut written = Vec::new();
    let cov = dir.join("covariates.wsf");
    write_field(&cov, &ds.covariates)?;
    written.push(cov);
    for pair in ds.train.iter().chain(&ds.val).chain(&ds.test) {
        for (sub, g) in [("low", &pair.low), ("high", &pair.high)] {
            let p = dir.join(sub).join(format!("{}.wsf", pair.timestamp));
            write_field(&p, g)?;
            written.push(p);
        }
    }
    let split = dir.join("split.tsv");
    std::fs::write(&split, ds.split.manifest()).map_err(|e| Error::io(&split, e))?;
    written.push(split);
    Ok(written)
}

pub fn read_pair(dir: &Path, covariates: &FieldGrid, hour: usize) -> Result<SamplePair> {
    let tag = hour_tag(hour);
    let low = read_field(&dir.join("low").join(format!("{tag}.wsf")))?;
    let high = read_field(&dir.join("high").join(format!("{tag}.wsf")))?;
    let pair = SamplePair { low, high, covariates: covariates.clone(), timestamp: tag.clone() };
    let problems = validate_pair(&pair);
    if !problems.is_empty() {
        return Err(Error::InvalidField(format!("{tag}: {}", problems.join("; "))));
    }
    Ok(pair)
}

pub fn read_split(dir: &Path) -> Result<HourSplit> {
    let path = dir.join("split.tsv");
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    HourSplit::parse_manifest(&text).map_err(|e| Error::format(&path, e.to_string()))
}

pub fn read_dataset(dir: &Path) -> Result<Dataset> {
    let split = read_split(dir)?;
    let covariates = read_field(&dir.join("covariates.wsf"))?;
    let load = |hours: &[usize]| hours.iter().map(|&h| read_pair(dir, &covariates, h)).collect::<Result<Vec<_>>>();
    Ok(Dataset { train: load(&split.train)?, val: load(&split.val)?, test: load(&split.test)?, covariates: covariates.clone(), split })
}
