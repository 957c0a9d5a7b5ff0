//! Crop-based adversarial training with a cyclic critic/generator schedule.
//!
//! All randomness is derived from `(seed, step)` or `(seed, epoch)`, so a run
//! resumed from a checkpoint follows the uninterrupted trajectory exactly.

use std::fmt::Write as _;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use windscale_autograd::{backward, Adam, AdamConfig, Element, Tensor, Var};

use crate::checkpoint;
use crate::error::{Error, Result};
use crate::grid::{crop, Batch, SamplePair, FACTOR};
use crate::losses::{critic_loss, draw_eps, generator_loss, LossConfig, LossReport};
use crate::networks::{Bound, Critic, CriticSpec, Generator, GeneratorSpec};
use crate::preprocess::NormStats;
use crate::spectral::derive_seed;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub critic_iters: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub crops_per_pair: usize,
    pub crop_size_hr: usize,
    pub max_steps: u64,
    pub val_crops_per_pair: usize,
    /// Validation cadence in training steps.
    pub val_every: u64,
    /// Checkpoint cadence in training steps; zero disables periodic checkpoints.
    pub checkpoint_every: u64,
    pub seed: u64,
    pub loss: LossConfig,
    pub generator: GeneratorSpec,
    pub critic: CriticSpec,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            critic_iters: 5,
            batch_size: 32,
            lr: 2.5e-4,
            adam_beta1: 0.5,
            adam_beta2: 0.9,
            crops_per_pair: 192,
            crop_size_hr: 128,
            max_steps: 1000,
            val_crops_per_pair: 32,
            val_every: 10,
            checkpoint_every: 100,
            seed: 0,
            loss: LossConfig::default(),
            generator: GeneratorSpec::default(),
            critic: CriticSpec::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.critic_iters == 0 {
            return Err(Error::Config("critic_iters must be at least 1".into()));
        }
        if self.batch_size == 0 || self.crops_per_pair == 0 || self.crops_per_pair % self.batch_size != 0 {
            return Err(Error::Config(format!(
                "crops_per_pair {} must be a positive multiple of batch_size {}",
                self.crops_per_pair, self.batch_size
            )));
        }
        if self.crop_size_hr == 0 || self.crop_size_hr % FACTOR != 0 {
            return Err(Error::Config(format!("crop size {} must be a positive multiple of {FACTOR}", self.crop_size_hr)));
        }
        if self.crop_size_hr < self.critic.min_size() || self.crop_size_hr < 2 * FACTOR {
            return Err(Error::Config(format!("crop size {} is too small for the critic", self.crop_size_hr)));
        }
        if self.val_crops_per_pair == 0 || self.val_every == 0 {
            return Err(Error::Config("validation needs at least one crop and a positive cadence".into()));
        }
        if !(self.lr > 0.0) {
            return Err(Error::Config("learning rate must be positive".into()));
        }
        self.loss.validate()?;
        self.generator.validate()
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig { lr: self.lr, beta1: self.adam_beta1, beta2: self.adam_beta2, eps: 1e-8 }
    }

    pub fn batches_per_step(&self) -> usize {
        self.crops_per_pair / self.batch_size
    }

    /// Whether batch `i` of a step updates the generator (every `critic_iters + 1`-th batch).
    pub fn is_generator_batch(&self, i: usize) -> bool {
        i % (self.critic_iters + 1) == self.critic_iters
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BestRecord {
    pub step: u64,
    pub val_mse: f64,
}

/// Both networks, their optimizers and the step counter.
#[derive(Debug, Clone)]
pub struct TrainState<E: Element> {
    pub generator: Generator<E>,
    pub critic: Critic<E>,
    pub gen_opt: Adam<E>,
    pub critic_opt: Adam<E>,
    pub step: u64,
    pub seed: u64,
    pub critic_updates: u64,
    pub generator_updates: u64,
    pub loss: LossConfig,
    pub best: Option<BestRecord>,
}

fn grads_of<E: Element>(root: &Var<E>, params: &Bound<E>) -> Vec<Option<Tensor<E>>> {
    let g = backward(root, false);
    params.vars().iter().map(|v| g.tensor(v).cloned()).collect()
}

impl<E: Element> TrainState<E> {
    pub fn new(cfg: &TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let generator = Generator::new(cfg.generator.clone(), derive_seed(cfg.seed, &[11]))?;
        let critic = Critic::new(cfg.critic, derive_seed(cfg.seed, &[12]))?;
        let gen_opt = Adam::new(cfg.adam(), &generator.params.shapes());
        let critic_opt = Adam::new(cfg.adam(), &critic.params.shapes());
        Ok(TrainState {
            generator,
            critic,
            gen_opt,
            critic_opt,
            step: 0,
            seed: cfg.seed,
            critic_updates: 0,
            generator_updates: 0,
            loss: cfg.loss,
            best: None,
        })
    }

    fn covariates<'a>(&self, batch: &'a Batch<E>) -> Option<&'a Tensor<E>> {
        self.generator.spec.conditional().then_some(&batch.covariates)
    }

    /// One critic update on detached generator samples.
    pub fn critic_update(&mut self, batch: &Batch<E>, eps: &[f64]) -> Result<LossReport> {
        let fake = self.generator.infer(&batch.low, self.covariates(batch))?;
        let bound = Bound::new(&self.critic.params, true);
        let critic = |y: &Var<E>| self.critic.forward(&bound, y);
        let (total, report) = critic_loss(&critic, &batch.high, &fake, &self.loss, eps)?;
        let grads = grads_of(&total, &bound);
        drop(total);
        drop(bound);
        self.critic_opt.step(self.critic.params.tensors_mut(), &grads);
        self.critic_updates += 1;
        Ok(report)
    }

    /// One generator update against the current (frozen) critic.
    pub fn generator_update(&mut self, batch: &Batch<E>) -> Result<LossReport> {
        let gp = Bound::new(&self.generator.params, true);
        let cp = Bound::new(&self.critic.params, false);
        let cov = self.covariates(batch).map(|c| Var::constant(c.clone()));
        let out = self.generator.forward(&gp, &Var::constant(batch.low.clone()), cov.as_ref())?;
        let critic = |y: &Var<E>| self.critic.forward(&cp, y);
        let (total, report) = generator_loss(&critic, &out, &batch.high, &self.loss)?;
        let grads = grads_of(&total, &gp);
        drop((total, out, gp, cp));
        self.gen_opt.step(self.generator.params.tensors_mut(), &grads);
        self.generator_updates += 1;
        Ok(report)
    }
}

/// Uniform 8-aligned crop offsets.
pub fn draw_crops(rng: &mut impl Rng, domain: (usize, usize), size: usize, n: usize) -> Result<Vec<(usize, usize)>> {
    let (h, w) = domain;
    if size > h || size > w {
        return Err(Error::Config(format!("crop size {size} exceeds domain {h}x{w}")));
    }
    let (ny, nx) = ((h - size) / FACTOR + 1, (w - size) / FACTOR + 1);
    Ok((0..n).map(|_| (rng.random_range(0..ny) * FACTOR, rng.random_range(0..nx) * FACTOR)).collect())
}

fn crops_to_batches<E: Element>(pair: &SamplePair, offsets: &[(usize, usize)], size: usize, batch: usize) -> Result<Vec<Batch<E>>> {
    offsets
        .chunks(batch)
        .map(|chunk| {
            let crops = chunk.iter().map(|&(t, l)| crop(pair, t, l, size)).collect::<Result<Vec<_>>>()?;
            Batch::from_pairs(&crops)
        })
        .collect()
}

/// Update counts and mean losses of one training step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepSummary {
    pub step: u64,
    pub critic_updates: usize,
    pub generator_updates: usize,
    pub report: LossReport,
}

const STREAM_STEP: u64 = 21;
const STREAM_EPOCH: u64 = 22;
const STREAM_VAL: u64 = 23;

fn check_finite(r: &LossReport, step: u64) -> Result<()> {
    match r.first_non_finite() {
        Some(term) => Err(Error::Numeric(format!("non-finite {term} at training step {step}"))),
        None => Ok(()),
    }
}

/// Consumes `crops_per_pair` crops of one normalized pair under the critic/generator schedule.
pub fn training_step<E: Element>(state: &mut TrainState<E>, pair: &SamplePair, cfg: &TrainConfig) -> Result<StepSummary> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(state.seed, &[STREAM_STEP, state.step]));
    let offsets = draw_crops(&mut rng, pair.high.hw(), cfg.crop_size_hr, cfg.crops_per_pair)?;
    let batches = crops_to_batches::<E>(pair, &offsets, cfg.crop_size_hr, cfg.batch_size)?;
    let (mut c_sum, mut g_sum) = (LossReport::default(), LossReport::default());
    let (mut nc, mut ng) = (0usize, 0usize);
    for (i, b) in batches.iter().enumerate() {
        if cfg.is_generator_batch(i) {
            let r = state.generator_update(b)?;
            check_finite(&r, state.step)?;
            g_sum.generator_loss += r.generator_loss;
            g_sum.adv_term += r.adv_term;
            g_sum.content_term += r.content_term;
            ng += 1;
        } else {
            let eps = draw_eps(&mut rng, b.len());
            let r = state.critic_update(b, &eps)?;
            check_finite(&r, state.step)?;
            c_sum.critic_loss += r.critic_loss;
            c_sum.gp_term += r.gp_term;
            c_sum.wasserstein_estimate += r.wasserstein_estimate;
            nc += 1;
        }
    }
    let (cn, gn) = (nc.max(1) as f64, ng.max(1) as f64);
    let report = LossReport {
        critic_loss: c_sum.critic_loss / cn,
        gp_term: c_sum.gp_term / cn,
        wasserstein_estimate: c_sum.wasserstein_estimate / cn,
        generator_loss: g_sum.generator_loss / gn,
        adv_term: g_sum.adv_term / gn,
        content_term: g_sum.content_term / gn,
    };
    state.step += 1;
    Ok(StepSummary { step: state.step, critic_updates: nc, generator_updates: ng, report })
}

/// Mean squared error over seeded validation crops, with an arbitrary predictor.
pub fn validation_mse<E: Element>(
    val: &[SamplePair],
    cfg: &TrainConfig,
    predict: &dyn Fn(&Batch<E>) -> Result<Tensor<E>>,
) -> Result<f64> {
    if val.is_empty() {
        return Err(Error::Config("validation set is empty".into()));
    }
    let (mut sum, mut count) = (0.0, 0usize);
    for (i, pair) in val.iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &[STREAM_VAL, i as u64]));
        let offsets = draw_crops(&mut rng, pair.high.hw(), cfg.crop_size_hr, cfg.val_crops_per_pair)?;
        for b in crops_to_batches::<E>(pair, &offsets, cfg.crop_size_hr, cfg.batch_size)? {
            let out = predict(&b)?;
            if out.shape() != b.high.shape() {
                return Err(Error::Shape(format!("prediction {:?} vs target {:?}", out.shape(), b.high.shape())));
            }
            for (a, t) in out.data().iter().zip(b.high.data()) {
                let d = a.as_f64() - t.as_f64();
                sum += d * d;
            }
            count += out.numel();
        }
    }
    Ok(sum / count as f64)
}

pub fn validate<E: Element>(state: &TrainState<E>, val: &[SamplePair], cfg: &TrainConfig) -> Result<f64> {
    validation_mse(val, cfg, &|b: &Batch<E>| state.generator.infer(&b.low, state.covariates(b)))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RecordKind {
    Train,
    Val,
}

/// One line of the metrics log.
#[derive(Debug, Clone, PartialEq)]
pub struct LogRecord {
    pub step: u64,
    pub kind: RecordKind,
    pub mode: String,
    pub report: LossReport,
    pub val_mse: Option<f64>,
}

const LOG_HEADER: &str = "step\tkind\tmode\tcritic_loss\tgenerator_loss\tgp_term\tadv_term\tcontent_term\twasserstein\tval_mse";

impl LogRecord {
    fn line(&self) -> String {
        let r = &self.report;
        let kind = match self.kind {
            RecordKind::Train => "train",
            RecordKind::Val => "val",
        };
        let mut s = String::new();
        let _ = write!(
            s,
            "{}\t{kind}\t{}\t{:e}\t{:e}\t{:e}\t{:e}\t{:e}\t{:e}\t",
            self.step, self.mode, r.critic_loss, r.generator_loss, r.gp_term, r.adv_term, r.content_term, r.wasserstein_estimate
        );
        match self.val_mse {
            Some(v) => {
                let _ = write!(s, "{v:e}");
            }
            None => s.push('-'),
        }
        s
    }

    fn parse(line: &str) -> Option<Self> {
        let f: Vec<&str> = line.split('\t').collect();
        if f.len() != 10 {
            return None;
        }
        let num = |i: usize| f[i].parse::<f64>().ok();
        Some(LogRecord {
            step: f[0].parse().ok()?,
            kind: match f[1] {
                "train" => RecordKind::Train,
                "val" => RecordKind::Val,
                _ => return None,
            },
            mode: f[2].to_string(),
            report: LossReport {
                critic_loss: num(3)?,
                generator_loss: num(4)?,
                gp_term: num(5)?,
                adv_term: num(6)?,
                content_term: num(7)?,
                wasserstein_estimate: num(8)?,
            },
            val_mse: if f[9] == "-" { None } else { Some(num(9)?) },
        })
    }
}

/// In-memory metrics log, mirrored to a text file when a path is set.
#[derive(Debug, Clone, Default)]
pub struct MetricsLog {
    pub records: Vec<LogRecord>,
    path: Option<PathBuf>,
}

impl MetricsLog {
    pub fn to_file(path: &Path) -> Result<Self> {
        if !path.exists() {
            std::fs::write(path, format!("{LOG_HEADER}\n")).map_err(|e| Error::io(path, e))?;
        }
        Ok(MetricsLog { records: Vec::new(), path: Some(path.to_path_buf()) })
    }

    pub fn push(&mut self, rec: LogRecord) -> Result<()> {
        if let Some(p) = &self.path {
            let mut f = std::fs::OpenOptions::new().append(true).open(p).map_err(|e| Error::io(p, e))?;
            writeln!(f, "{}", rec.line()).map_err(|e| Error::io(p, e))?;
        }
        self.records.push(rec);
        Ok(())
    }

    pub fn parse(text: &str) -> Result<Vec<LogRecord>> {
        let mut lines = text.lines();
        if lines.next() != Some(LOG_HEADER) {
            return Err(Error::Config("metrics log lacks the expected header".into()));
        }
        lines
            .enumerate()
            .filter(|(_, l)| !l.is_empty())
            .map(|(i, l)| LogRecord::parse(l).ok_or_else(|| Error::Config(format!("malformed metrics log line {}", i + 2))))
            .collect()
    }

    pub fn load(path: &Path) -> Result<Vec<LogRecord>> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text).map_err(|e| Error::format(path, e.to_string()))
    }

    pub fn validation(&self) -> Vec<(u64, f64)> {
        validation_points(&self.records)
    }
}

pub fn validation_points(records: &[LogRecord]) -> Vec<(u64, f64)> {
    records.iter().filter_map(|r| r.val_mse.map(|v| (r.step, v))).collect()
}

/// Means of validation values over consecutive step intervals `((k-1)*n, k*n]`,
/// reported at the interval end.
pub fn interval_average(points: &[(u64, f64)], interval: u64) -> Vec<(u64, f64)> {
    let interval = interval.max(1);
    let mut out: Vec<(u64, f64, usize)> = Vec::new();
    for &(step, v) in points {
        let end = step.saturating_sub(1) / interval * interval + interval;
        match out.last_mut() {
            Some(last) if last.0 == end => {
                last.1 += v;
                last.2 += 1;
            }
            _ => out.push((end, v, 1)),
        }
    }
    out.into_iter().map(|(s, v, n)| (s, v / n as f64)).collect()
}

/// Where and how `fit` persists its progress.
#[derive(Debug, Clone, Default)]
pub struct RunOutput {
    pub dir: Option<PathBuf>,
    pub norm: Option<NormStats>,
    pub norm_ref: Option<String>,
}

impl RunOutput {
    fn save<E: Element>(&self, state: &TrainState<E>, name: &str) -> Result<Option<PathBuf>> {
        let Some(dir) = &self.dir else { return Ok(None) };
        let path = dir.join(name);
        checkpoint::save(&path, state, self.norm.as_ref(), self.norm_ref.as_deref())?;
        Ok(Some(path))
    }
}

/// Index of the training pair used at a given step: a fresh seeded permutation every epoch.
pub fn pair_for_step(seed: u64, step: u64, n_pairs: usize) -> usize {
    let epoch = step / n_pairs as u64;
    let mut order: Vec<usize> = (0..n_pairs).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(seed, &[STREAM_EPOCH, epoch])));
    order[(step % n_pairs as u64) as usize]
}

/// Trains from the given state up to `cfg.max_steps`. Pairs must already be normalized.
pub fn fit_from<E: Element>(
    mut state: TrainState<E>,
    train: &[SamplePair],
    val: &[SamplePair],
    cfg: &TrainConfig,
    out: &RunOutput,
    log: &mut MetricsLog,
) -> Result<TrainState<E>> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::Config("training set is empty".into()));
    }
    if val.is_empty() {
        return Err(Error::Config("validation set is empty".into()));
    }
    let ids = |v: &[SamplePair]| v.iter().map(|p| p.timestamp.clone()).collect::<Vec<_>>();
    let val_ids = ids(val);
    if ids(train).iter().any(|t| val_ids.contains(t)) {
        return Err(Error::Config("training and validation splits share an hour".into()));
    }
    while state.step < cfg.max_steps {
        let pair = &train[pair_for_step(state.seed, state.step, train.len())];
        let s = training_step(&mut state, pair, cfg)?;
        log.push(LogRecord { step: s.step, kind: RecordKind::Train, mode: state.loss.tag(), report: s.report, val_mse: None })?;
        if s.step % cfg.val_every == 0 || s.step == cfg.max_steps {
            let v = validate(&state, val, cfg)?;
            if !v.is_finite() {
                return Err(Error::Numeric(format!("non-finite validation MSE at step {}", s.step)));
            }
            log.push(LogRecord { step: s.step, kind: RecordKind::Val, mode: state.loss.tag(), report: LossReport::default(), val_mse: Some(v) })?;
            if state.best.is_none_or(|b| v < b.val_mse) {
                state.best = Some(BestRecord { step: s.step, val_mse: v });
                out.save(&state, "best.ckpt")?;
            }
        }
        if cfg.checkpoint_every > 0 && s.step % cfg.checkpoint_every == 0 {
            out.save(&state, &format!("step-{:06}.ckpt", s.step))?;
        }
    }
    out.save(&state, "last.ckpt")?;
    Ok(state)
}

pub fn fit<E: Element>(train: &[SamplePair], val: &[SamplePair], cfg: &TrainConfig, out: &RunOutput, log: &mut MetricsLog) -> Result<TrainState<E>> {
    fit_from(TrainState::new(cfg)?, train, val, cfg, out, log)
}

/// Resumes from a checkpoint with a (possibly different) loss configuration.
/// Parameters, optimizer moments and the step counter carry over.
pub fn fine_tune<E: Element>(
    from: &Path,
    new_loss: LossConfig,
    train: &[SamplePair],
    val: &[SamplePair],
    cfg: &TrainConfig,
    out: &RunOutput,
    log: &mut MetricsLog,
) -> Result<TrainState<E>> {
    let ckpt = checkpoint::read(from)?;
    if ckpt.header.generator != cfg.generator || ckpt.header.critic != cfg.critic {
        return Err(Error::Config(format!("checkpoint {} was trained with a different architecture", from.display())));
    }
    new_loss.validate()?;
    let mut state = ckpt.into_state::<E>()?;
    state.loss = new_loss;
    state.best = None;
    let cfg = TrainConfig { loss: new_loss, ..cfg.clone() };
    fit_from(state, train, val, &cfg, out, log)
}
