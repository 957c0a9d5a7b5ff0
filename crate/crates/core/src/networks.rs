//! Critic and covariate-conditioned generator.
//!
//! Parameters live in a [`ParamStore`] of plain tensors. Each forward pass
//! binds them to autograd variables through a [`Bound`] view, tracked when
//! gradients are wanted and constant otherwise.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use windscale_autograd::{no_grad, Element, Tensor, Var};

use crate::error::{Error, Result};
use crate::grid::FACTOR;

pub type ParamId = usize;

/// Named learnable tensors of one network.
#[derive(Debug, Clone)]
pub struct ParamStore<E: Element> {
    names: Vec<String>,
    tensors: Vec<Tensor<E>>,
}

impl<E: Element> Default for ParamStore<E> {
    fn default() -> Self {
        ParamStore { names: Vec::new(), tensors: Vec::new() }
    }
}

impl<E: Element> ParamStore<E> {
    pub fn add(&mut self, name: impl Into<String>, value: Tensor<E>) -> ParamId {
        self.names.push(name.into());
        self.tensors.push(value);
        self.tensors.len() - 1
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor<E>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<E>] {
        &mut self.tensors
    }

    pub fn get(&self, id: ParamId) -> &Tensor<E> {
        &self.tensors[id]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name)
    }

    /// Total number of scalar parameters.
    pub fn count(&self) -> usize {
        self.tensors.iter().map(|t| t.numel()).sum()
    }

    pub fn shapes(&self) -> Vec<&[usize]> {
        self.tensors.iter().map(|t| t.shape()).collect()
    }

    pub fn zero_all(&mut self) {
        for t in &mut self.tensors {
            *t = Tensor::zeros(t.shape());
        }
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.iter().all(|t| t.all_finite())
    }

    /// FNV-1a hash over names, shapes and value bits.
    pub fn fingerprint(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut eat = |bytes: &[u8]| {
            for &b in bytes {
                h ^= b as u64;
                h = h.wrapping_mul(0x0100_0000_01b3);
            }
        };
        let mut buf = Vec::new();
        for (n, t) in self.names.iter().zip(&self.tensors) {
            eat(n.as_bytes());
            for &d in t.shape() {
                eat(&(d as u64).to_le_bytes());
            }
            buf.clear();
            for &v in t.data() {
                v.write_le(&mut buf);
            }
            eat(&buf);
        }
        h
    }

    /// Replaces every tensor; names and shapes must match.
    pub fn load_tensors(&mut self, tensors: Vec<Tensor<E>>) -> Result<()> {
        if tensors.len() != self.tensors.len() {
            return Err(Error::Config(format!("expected {} parameter tensors, got {}", self.tensors.len(), tensors.len())));
        }
        for (i, t) in tensors.iter().enumerate() {
            if t.shape() != self.tensors[i].shape() {
                return Err(Error::Config(format!(
                    "parameter {} has shape {:?}, expected {:?}",
                    self.names[i],
                    t.shape(),
                    self.tensors[i].shape()
                )));
            }
        }
        self.tensors = tensors;
        Ok(())
    }

    pub fn cast<F: Element>(&self) -> ParamStore<F> {
        ParamStore { names: self.names.clone(), tensors: self.tensors.iter().map(|t| t.cast()).collect() }
    }
}

/// Parameters bound as autograd variables for one forward pass.
pub struct Bound<E: Element> {
    vars: Vec<Var<E>>,
}

impl<E: Element> Bound<E> {
    /// `track = true` makes every parameter a gradient leaf.
    pub fn new(store: &ParamStore<E>, track: bool) -> Self {
        let vars = store
            .tensors
            .iter()
            .map(|t| if track { Var::leaf(t.clone()) } else { Var::constant(t.clone()) })
            .collect();
        Bound { vars }
    }

    pub fn var(&self, id: ParamId) -> &Var<E> {
        &self.vars[id]
    }

    pub fn vars(&self) -> &[Var<E>] {
        &self.vars
    }
}

/// Fan-in scaled normal initializer for LeakyReLU stacks.
struct Init {
    rng: ChaCha8Rng,
    slope: f64,
}

impl Init {
    fn conv<E: Element>(&mut self, store: &mut ParamStore<E>, name: &str, cin: usize, cout: usize, k: usize, stride: usize, std: Option<f64>) -> Conv {
        let fan_in = (cin * k * k) as f64;
        let std = std.unwrap_or_else(|| (2.0 / (1.0 + self.slope * self.slope) / fan_in).sqrt());
        let normal = Normal::new(0.0, std).expect("positive std");
        let n = cout * cin * k * k;
        let values: Vec<f64> = (0..n).map(|_| normal.sample(&mut self.rng)).collect();
        let w = store.add(format!("{name}.weight"), Tensor::from_f64(&[cout, cin, k, k], &values));
        let b = store.add(format!("{name}.bias"), Tensor::zeros(&[cout]));
        Conv { w, b, k, stride, cin }
    }
}

/// Square convolution with bias and "same" zero padding.
#[derive(Debug, Clone, Copy)]
pub struct Conv {
    w: ParamId,
    b: ParamId,
    k: usize,
    stride: usize,
    cin: usize,
}

impl Conv {
    fn forward<E: Element>(&self, p: &Bound<E>, x: &Var<E>) -> Var<E> {
        debug_assert_eq!(x.shape()[1], self.cin);
        x.conv2d(p.var(self.w), self.stride, self.k / 2).bias_add(p.var(self.b))
    }

    fn back(&self, iv: (i64, i64)) -> (i64, i64) {
        let (s, pad) = (self.stride as i64, (self.k / 2) as i64);
        (iv.0 * s - pad, iv.1 * s - pad + self.k as i64 - 1)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CriticSpec {
    pub in_channels: usize,
    pub base_width: usize,
    pub n_stages: usize,
    pub head_width: usize,
    pub slope: f64,
}

impl Default for CriticSpec {
    fn default() -> Self {
        CriticSpec { in_channels: 2, base_width: 64, n_stages: 4, head_width: 1024, slope: 0.2 }
    }
}

impl CriticSpec {
    /// Feature widths of the body convolutions, two per stage.
    pub fn widths(&self) -> Vec<usize> {
        (0..self.n_stages).flat_map(|s| [self.base_width << s; 2]).collect()
    }

    /// Smallest accepted spatial size.
    pub fn min_size(&self) -> usize {
        1 << self.n_stages
    }
}

/// VGG-style critic: stride-1/stride-2 conv pairs, mean pooling and a two-layer scoring head.
#[derive(Debug, Clone)]
pub struct Critic<E: Element> {
    pub spec: CriticSpec,
    pub params: ParamStore<E>,
    body: Vec<Conv>,
    head: [Conv; 2],
}

impl<E: Element> Critic<E> {
    pub fn new(spec: CriticSpec, seed: u64) -> Result<Self> {
        if spec.in_channels == 0 || spec.base_width == 0 || spec.n_stages == 0 || spec.head_width == 0 {
            return Err(Error::Config(format!("degenerate critic spec {spec:?}")));
        }
        let mut init = Init { rng: ChaCha8Rng::seed_from_u64(seed), slope: spec.slope };
        let mut params = ParamStore::default();
        let mut body = Vec::new();
        let mut cin = spec.in_channels;
        for (i, &w) in spec.widths().iter().enumerate() {
            body.push(init.conv(&mut params, &format!("critic.body{i}"), cin, w, 3, 1 + i % 2, None));
            cin = w;
        }
        let head = [
            init.conv(&mut params, "critic.head0", cin, spec.head_width, 1, 1, None),
            init.conv(&mut params, "critic.head1", spec.head_width, 1, 1, 1, None),
        ];
        Ok(Critic { spec, params, body, head })
    }

    /// One unbounded score per batch item, shape `(B,)`.
    pub fn forward(&self, p: &Bound<E>, x: &Var<E>) -> Result<Var<E>> {
        let s = x.shape();
        if s.len() != 4 || s[1] != self.spec.in_channels {
            return Err(Error::Shape(format!("critic expects (B, {}, H, W), got {s:?}", self.spec.in_channels)));
        }
        let min = self.spec.min_size();
        if s[2] < min || s[3] < min {
            return Err(Error::Shape(format!("critic needs H, W >= {min}, got {}x{}", s[2], s[3])));
        }
        let slope = self.spec.slope;
        let mut h = x.clone();
        for c in &self.body {
            h = c.forward(p, &h).leaky_relu(slope);
        }
        let h = self.head[0].forward(p, &h.spatial_mean()).leaky_relu(slope);
        Ok(self.head[1].forward(p, &h).reshape(&[s[0]]))
    }

    /// Scores without gradient tracking.
    pub fn score(&self, x: &Tensor<E>) -> Result<Tensor<E>> {
        no_grad(|| {
            let p = Bound::new(&self.params, false);
            Ok(self.forward(&p, &Var::constant(x.clone()))?.value().clone())
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeneratorSpec {
    pub lr_channels: usize,
    /// Zero disables covariate conditioning entirely.
    pub cov_channels: usize,
    pub out_channels: usize,
    pub trunk_width: usize,
    pub n_rrdb: usize,
    pub dense_blocks: usize,
    pub growth: usize,
    pub cov_widths: [usize; 3],
    pub slope: f64,
    pub residual_scale: f64,
}

impl Default for GeneratorSpec {
    fn default() -> Self {
        GeneratorSpec {
            lr_channels: 7,
            cov_channels: 3,
            out_channels: 2,
            trunk_width: 64,
            n_rrdb: 16,
            dense_blocks: 3,
            growth: 32,
            cov_widths: [16, 32, 64],
            slope: 0.2,
            residual_scale: 0.2,
        }
    }
}

impl GeneratorSpec {
    pub fn validate(&self) -> Result<()> {
        if self.trunk_width == 0 || self.trunk_width % 4 != 0 {
            return Err(Error::Config(format!("trunk width {} must be a positive multiple of 4", self.trunk_width)));
        }
        if self.lr_channels == 0 || self.out_channels == 0 || self.growth == 0 || self.dense_blocks == 0 {
            return Err(Error::Config(format!("degenerate generator spec {self:?}")));
        }
        if self.cov_channels > 0 && self.cov_widths.contains(&0) {
            return Err(Error::Config("covariate encoder widths must be positive".into()));
        }
        Ok(())
    }

    pub fn conditional(&self) -> bool {
        self.cov_channels > 0
    }
}

/// Five-convolution densely connected block.
#[derive(Debug, Clone)]
struct DenseBlock {
    convs: [Conv; 5],
}

/// Residual-in-residual dense block.
#[derive(Debug, Clone)]
pub struct Rrdb {
    blocks: Vec<DenseBlock>,
    width: usize,
    slope: f64,
    beta: f64,
}

impl Rrdb {
    pub fn forward<E: Element>(&self, p: &Bound<E>, x: &Var<E>) -> Result<Var<E>> {
        if x.shape().len() != 4 || x.shape()[1] != self.width {
            return Err(Error::Shape(format!("RRDB expects {} channels, got {:?}", self.width, x.shape())));
        }
        let mut h = x.clone();
        for db in &self.blocks {
            let mut feats = vec![h.clone()];
            for (i, c) in db.convs.iter().enumerate() {
                let input = if feats.len() == 1 { feats[0].clone() } else { Var::cat_channels(&feats) };
                let y = c.forward(p, &input);
                if i < 4 {
                    feats.push(y.leaky_relu(self.slope));
                } else {
                    h = h.add(&y.scale(self.beta));
                }
            }
        }
        Ok(x.add(&h.sub(x).scale(self.beta)))
    }

    fn convs(&self) -> usize {
        self.blocks.len() * 5
    }
}

#[derive(Debug, Clone)]
struct UpStage {
    pre: Conv,
    post: Conv,
}

/// Covariate-conditioned UNET-style generator with an RRDB trunk and pixel-shuffle upsampling.
#[derive(Debug, Clone)]
pub struct Generator<E: Element> {
    pub spec: GeneratorSpec,
    pub params: ParamStore<E>,
    lr_head: Conv,
    encoder: Vec<[Conv; 2]>,
    fuse: Option<Conv>,
    rrdbs: Vec<Rrdb>,
    body: Conv,
    up: Vec<UpStage>,
    tail: [Conv; 2],
}

impl<E: Element> Generator<E> {
    pub fn new(spec: GeneratorSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut init = Init { rng: ChaCha8Rng::seed_from_u64(seed), slope: spec.slope };
        let mut params = ParamStore::default();
        let t = spec.trunk_width;
        let lr_head = init.conv(&mut params, "gen.lr_head", spec.lr_channels, t, 3, 1, None);
        let mut encoder = Vec::new();
        if spec.conditional() {
            let mut cin = spec.cov_channels;
            for (s, &w) in spec.cov_widths.iter().enumerate() {
                encoder.push([
                    init.conv(&mut params, &format!("gen.encoder{s}.keep"), cin, w, 3, 1, None),
                    init.conv(&mut params, &format!("gen.encoder{s}.down"), w, w, 3, 2, None),
                ]);
                cin = w;
            }
        }
        let fuse = spec
            .conditional()
            .then(|| init.conv(&mut params, "gen.fuse", t + spec.cov_widths[2], t, 1, 1, None));
        let rrdbs = (0..spec.n_rrdb)
            .map(|r| Rrdb {
                blocks: (0..spec.dense_blocks)
                    .map(|d| {
                        let g = spec.growth;
                        let name = |i: usize| format!("gen.rrdb{r}.dense{d}.conv{i}");
                        DenseBlock {
                            convs: [
                                init.conv(&mut params, &name(0), t, g, 3, 1, None),
                                init.conv(&mut params, &name(1), t + g, g, 3, 1, None),
                                init.conv(&mut params, &name(2), t + 2 * g, g, 3, 1, None),
                                init.conv(&mut params, &name(3), t + 3 * g, g, 3, 1, None),
                                init.conv(&mut params, &name(4), t + 4 * g, t, 3, 1, None),
                            ],
                        }
                    })
                    .collect(),
                width: t,
                slope: spec.slope,
                beta: spec.residual_scale,
            })
            .collect();
        let body = init.conv(&mut params, "gen.conv_body", t, t, 3, 1, None);
        let up = (0..3)
            .map(|s| {
                let skip = if spec.conditional() { spec.cov_widths[2 - s] } else { 0 };
                UpStage {
                    pre: init.conv(&mut params, &format!("gen.upsample{s}.pre"), t, t, 3, 1, None),
                    post: init.conv(&mut params, &format!("gen.upsample{s}.post"), t / 4 + skip, t, 3, 1, None),
                }
            })
            .collect();
        let tail = [
            init.conv(&mut params, "gen.final0", t, t, 3, 1, None),
            init.conv(&mut params, "gen.final1", t, spec.out_channels, 3, 1, Some(0.01)),
        ];
        Ok(Generator { spec, params, lr_head, encoder, fuse, rrdbs, body, up, tail })
    }

    fn check_shapes(&self, low: &[usize], cov: Option<&[usize]>) -> Result<()> {
        let spec = &self.spec;
        if low.len() != 4 || low[1] != spec.lr_channels {
            return Err(Error::Shape(format!("low-resolution input must be (B, {}, h, w), got {low:?}", spec.lr_channels)));
        }
        if low[2] < 2 || low[3] < 2 {
            return Err(Error::Shape(format!("low-resolution input {}x{} is smaller than 2x2", low[2], low[3])));
        }
        match (spec.conditional(), cov) {
            (false, None) => Ok(()),
            (false, Some(_)) => Err(Error::Shape("unconditional generator received covariates".into())),
            (true, None) => Err(Error::Shape("conditional generator requires covariates".into())),
            (true, Some(c)) => {
                if c.len() != 4 || c[1] != spec.cov_channels {
                    return Err(Error::Shape(format!("covariates must be (B, {}, H, W), got {c:?}", spec.cov_channels)));
                }
                if c[0] != 1 && c[0] != low[0] {
                    return Err(Error::Shape(format!("covariate batch {} is neither 1 nor {}", c[0], low[0])));
                }
                for (axis, name) in [(2, "height"), (3, "width")] {
                    if c[axis] != FACTOR * low[axis] {
                        return Err(Error::Shape(format!(
                            "covariate {name} {} is not {FACTOR} x low-resolution {name} {}",
                            c[axis], low[axis]
                        )));
                    }
                }
                Ok(())
            }
        }
    }

    /// `low (B, 7, h, w)` and covariates `(1 | B, 3, 8h, 8w)` to winds `(B, 2, 8h, 8w)`.
    pub fn forward(&self, p: &Bound<E>, low: &Var<E>, cov: Option<&Var<E>>) -> Result<Var<E>> {
        self.check_shapes(low.shape(), cov.map(|c| c.shape()))?;
        let slope = self.spec.slope;
        let batch = low.shape()[0];
        let mut skips = Vec::new();
        let mut feat = self.lr_head.forward(p, low);
        if let (Some(cov), Some(fuse)) = (cov, &self.fuse) {
            // shared covariates are encoded once and broadcast afterwards
            let spread = |v: Var<E>| if v.shape()[0] == batch { v } else { v.broadcast_batch(batch) };
            let mut e = cov.clone();
            for [keep, down] in &self.encoder {
                let k = keep.forward(p, &e).leaky_relu(slope);
                e = down.forward(p, &k).leaky_relu(slope);
                skips.push(spread(k));
            }
            feat = fuse.forward(p, &Var::cat_channels(&[feat, spread(e)]));
        }
        let mut h = feat.clone();
        for r in &self.rrdbs {
            h = r.forward(p, &h)?;
        }
        let mut h = self.body.forward(p, &h).add(&feat);
        for (s, st) in self.up.iter().enumerate() {
            let u = st.pre.forward(p, &h).pixel_shuffle(2).leaky_relu(slope);
            let u = match skips.get(2 - s) {
                Some(k) => Var::cat_channels(&[u, k.clone()]),
                None => u,
            };
            h = st.post.forward(p, &u).leaky_relu(slope);
        }
        let h = self.tail[0].forward(p, &h).leaky_relu(slope);
        Ok(self.tail[1].forward(p, &h))
    }

    /// Forward pass without gradient tracking.
    pub fn infer(&self, low: &Tensor<E>, cov: Option<&Tensor<E>>) -> Result<Tensor<E>> {
        no_grad(|| {
            let p = Bound::new(&self.params, false);
            let cov = cov.map(|c| Var::constant(c.clone()));
            Ok(self.forward(&p, &Var::constant(low.clone()), cov.as_ref())?.value().clone())
        })
    }

    pub fn rrdb(&self, i: usize) -> &Rrdb {
        &self.rrdbs[i]
    }

    /// Largest distance, in high-resolution cells along one axis, between an output
    /// cell and any input cell (low-resolution or covariate) it depends on.
    pub fn receptive_radius(&self) -> usize {
        let mut worst = 0i64;
        let base = 1_000_000i64;
        for residue in 0..FACTOR as i64 {
            let out = base + residue;
            let mut lr: Vec<(i64, i64)> = Vec::new();
            let mut hr: Vec<(i64, i64)> = Vec::new();
            let mut iv = self.tail[1].back(self.tail[0].back((out, out)));
            for s in (0..3).rev() {
                let st = &self.up[s];
                iv = st.post.back(iv);
                if let Some(stage) = self.encoder.get(2 - s) {
                    hr.push(self.encoder_back(stage[0].back(iv), 2 - s));
                }
                iv = st.pre.back((iv.0.div_euclid(2), iv.1.div_euclid(2)));
            }
            iv = self.body.back(iv);
            let convs: usize = self.rrdbs.iter().map(Rrdb::convs).sum();
            iv = (iv.0 - convs as i64, iv.1 + convs as i64);
            lr.push(self.lr_head.back(iv));
            if let (Some(fuse), Some(last)) = (&self.fuse, self.encoder.last()) {
                let e = fuse.back(iv);
                hr.push(self.encoder_back(last[0].back(last[1].back(e)), 2));
            }
            for (a, b) in lr {
                hr.push((a * FACTOR as i64, b * FACTOR as i64 + FACTOR as i64 - 1));
            }
            for (a, b) in hr {
                worst = worst.max(out - a).max(b - out);
            }
        }
        worst as usize
    }

    /// Maps an interval at the input of encoder stage `s` back to covariate cells.
    fn encoder_back(&self, mut iv: (i64, i64), s: usize) -> (i64, i64) {
        for stage in self.encoder[..s].iter().rev() {
            iv = stage[0].back(stage[1].back(iv));
        }
        iv
    }
}

/// Checked channel-to-space rearrangement.
pub fn pixel_shuffle<E: Element>(x: &Tensor<E>, r: usize) -> Result<Tensor<E>> {
    if x.rank() != 4 || r == 0 || x.shape()[1] % (r * r) != 0 {
        return Err(Error::Shape(format!("cannot pixel-shuffle {:?} by {r}", x.shape())));
    }
    Ok(windscale_autograd::pixel_shuffle(x, r))
}

/// Inverse of [`pixel_shuffle`].
pub fn pixel_unshuffle<E: Element>(y: &Tensor<E>, r: usize) -> Result<Tensor<E>> {
    if y.rank() != 4 || r == 0 || y.shape()[2] % r != 0 || y.shape()[3] % r != 0 {
        return Err(Error::Shape(format!("cannot pixel-unshuffle {:?} by {r}", y.shape())));
    }
    Ok(windscale_autograd::pixel_unshuffle(y, r))
}

/// Coarse parameter group of a parameter name, e.g. `gen.rrdb3.dense0.conv1.weight` -> `rrdb`.
pub fn param_group(name: &str) -> String {
    let part = name.split('.').nth(1).unwrap_or(name);
    part.trim_end_matches(|c: char| c.is_ascii_digit()).to_string()
}
