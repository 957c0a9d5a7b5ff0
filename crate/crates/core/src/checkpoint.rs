//! Binary checkpoints: a JSON header followed by raw little-endian tensor data.
//!
//! Layout: 8-byte magic, `u64` header length, UTF-8 JSON header, then every
//! tensor listed in the header in order. Values are stored in the training
//! precision, so a save/load round trip is bit-identical.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use windscale_autograd::{Adam, AdamConfig, DType, Element, Tensor};

use crate::error::{Error, Result};
use crate::losses::LossConfig;
use crate::networks::{Critic, CriticSpec, Generator, GeneratorSpec, ParamStore};
use crate::preprocess::NormStats;
use crate::training::{BestRecord, TrainState};

const MAGIC: &[u8; 8] = b"WSCKPT01";

#[derive(Debug, Clone, Serialize, Deserialize)]
struct TensorEntry {
    section: String,
    name: String,
    shape: Vec<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub dtype: String,
    pub step: u64,
    pub seed: u64,
    pub critic_updates: u64,
    pub generator_updates: u64,
    pub generator: GeneratorSpec,
    pub critic: CriticSpec,
    pub loss: LossConfig,
    pub adam: [f64; 4],
    pub generator_adam_steps: u64,
    pub critic_adam_steps: u64,
    pub best: Option<BestRecord>,
    /// Path of the normalization statistics file the run was trained with.
    pub norm_ref: Option<String>,
    pub norm: Option<NormStats>,
    tensors: Vec<TensorEntry>,
}

fn sections<E: Element>(state: &TrainState<E>) -> Vec<(&'static str, &[String], &[Tensor<E>])> {
    let gn = state.generator.params.names();
    let cn = state.critic.params.names();
    vec![
        ("generator", gn, state.generator.params.tensors()),
        ("generator.adam_m", gn, &state.gen_opt.first),
        ("generator.adam_v", gn, &state.gen_opt.second),
        ("critic", cn, state.critic.params.tensors()),
        ("critic.adam_m", cn, &state.critic_opt.first),
        ("critic.adam_v", cn, &state.critic_opt.second),
    ]
}

pub fn save<E: Element>(path: &Path, state: &TrainState<E>, norm: Option<&NormStats>, norm_ref: Option<&str>) -> Result<()> {
    let mut entries = Vec::new();
    let mut data = Vec::new();
    for (section, names, tensors) in sections(state) {
        for (n, t) in names.iter().zip(tensors) {
            entries.push(TensorEntry { section: section.into(), name: n.clone(), shape: t.shape().to_vec() });
            for &v in t.data() {
                v.write_le(&mut data);
            }
        }
    }
    let a = state.gen_opt.config;
    let header = CheckpointHeader {
        dtype: E::DTYPE.name().into(),
        step: state.step,
        seed: state.seed,
        critic_updates: state.critic_updates,
        generator_updates: state.generator_updates,
        generator: state.generator.spec.clone(),
        critic: state.critic.spec,
        loss: state.loss,
        adam: [a.lr, a.beta1, a.beta2, a.eps],
        generator_adam_steps: state.gen_opt.steps,
        critic_adam_steps: state.critic_opt.steps,
        best: state.best,
        norm_ref: norm_ref.map(str::to_string),
        norm: norm.cloned(),
        tensors: entries,
    };
    let json = serde_json::to_vec(&header).map_err(|e| Error::format(path, e.to_string()))?;
    let tmp = path.with_extension("tmp");
    let mut f = std::fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    let mut write = |b: &[u8]| f.write_all(b).map_err(|e| Error::io(&tmp, e));
    write(MAGIC)?;
    write(&(json.len() as u64).to_le_bytes())?;
    write(&json)?;
    write(&data)?;
    drop(f);
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

/// Parsed checkpoint; tensors are kept as `f64` until materialized.
pub struct Checkpoint {
    pub header: CheckpointHeader,
    values: Vec<Vec<u8>>,
    dtype: DType,
}

pub fn read(path: &Path) -> Result<Checkpoint> {
    let mut f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut bytes = Vec::new();
    f.read_to_end(&mut bytes).map_err(|e| Error::io(path, e))?;
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(Error::format(path, "not a windscale checkpoint"));
    }
    let hlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let body = bytes.get(16..16 + hlen).ok_or_else(|| Error::format(path, "truncated header"))?;
    let header: CheckpointHeader = serde_json::from_slice(body).map_err(|e| Error::format(path, e.to_string()))?;
    let dtype = DType::parse(&header.dtype).ok_or_else(|| Error::format(path, format!("unknown dtype {}", header.dtype)))?;
    let size = dtype.size_of();
    let mut offset = 16 + hlen;
    let mut values = Vec::with_capacity(header.tensors.len());
    for t in &header.tensors {
        let n: usize = t.shape.iter().product::<usize>() * size;
        let chunk = bytes
            .get(offset..offset + n)
            .ok_or_else(|| Error::format(path, format!("truncated data for {}", t.name)))?;
        values.push(chunk.to_vec());
        offset += n;
    }
    if offset != bytes.len() {
        return Err(Error::format(path, "trailing bytes after tensor data"));
    }
    Ok(Checkpoint { header, values, dtype })
}

fn decode<E: Element>(bytes: &[u8], dtype: DType, shape: &[usize]) -> Tensor<E> {
    let data: Vec<E> = match dtype {
        DType::F32 => bytes.chunks_exact(4).map(|c| E::of(f32::read_le(c) as f64)).collect(),
        DType::F64 => bytes.chunks_exact(8).map(|c| E::of(f64::read_le(c))).collect(),
    };
    Tensor::from_vec(shape, data)
}

impl Checkpoint {
    fn section<E: Element>(&self, name: &str, expect: &ParamStore<E>) -> Result<Vec<Tensor<E>>> {
        let picked: Vec<(usize, &TensorEntry)> =
            self.header.tensors.iter().enumerate().filter(|(_, t)| t.section == name).collect();
        if picked.len() != expect.len() {
            return Err(Error::Config(format!(
                "checkpoint section {name} holds {} tensors, architecture expects {}",
                picked.len(),
                expect.len()
            )));
        }
        picked
            .iter()
            .zip(expect.names().iter().zip(expect.tensors()))
            .map(|((i, t), (n, e))| {
                if &t.name != n || t.shape != e.shape() {
                    return Err(Error::Config(format!(
                        "checkpoint tensor {} {:?} does not match architecture tensor {n} {:?}",
                        t.name,
                        t.shape,
                        e.shape()
                    )));
                }
                Ok(decode(&self.values[*i], self.dtype, &t.shape))
            })
            .collect()
    }

    /// Rebuilds the full training state. Values are converted when `E` differs from the stored precision.
    pub fn into_state<E: Element>(&self) -> Result<TrainState<E>> {
        let h = &self.header;
        let mut generator = Generator::<E>::new(h.generator.clone(), 0)?;
        let mut critic = Critic::<E>::new(h.critic, 0)?;
        let adam = AdamConfig { lr: h.adam[0], beta1: h.adam[1], beta2: h.adam[2], eps: h.adam[3] };
        let gen_opt = Adam {
            config: adam,
            steps: h.generator_adam_steps,
            first: self.section("generator.adam_m", &generator.params)?,
            second: self.section("generator.adam_v", &generator.params)?,
        };
        let critic_opt = Adam {
            config: adam,
            steps: h.critic_adam_steps,
            first: self.section("critic.adam_m", &critic.params)?,
            second: self.section("critic.adam_v", &critic.params)?,
        };
        generator.params.load_tensors(self.section("generator", &generator.params)?)?;
        critic.params.load_tensors(self.section("critic", &critic.params)?)?;
        Ok(TrainState {
            generator,
            critic,
            gen_opt,
            critic_opt,
            step: h.step,
            seed: h.seed,
            critic_updates: h.critic_updates,
            generator_updates: h.generator_updates,
            loss: h.loss,
            best: h.best,
        })
    }

    /// Generator alone, for inference.
    pub fn generator<E: Element>(&self) -> Result<Generator<E>> {
        let mut g = Generator::<E>::new(self.header.generator.clone(), 0)?;
        g.params.load_tensors(self.section("generator", &g.params)?)?;
        Ok(g)
    }
}

pub fn load<E: Element>(path: &Path) -> Result<TrainState<E>> {
    read(path)?.into_state()
}
