//! Reverse-mode autodiff over a dynamically built graph.
//!
//! Every backward rule is expressed with differentiable `Var` operations, so
//! running [`backward`] with `create_graph = true` yields gradients that can
//! themselves be differentiated (needed for gradient penalties).
//!
//! A result only records its parents when at least one parent requires a
//! gradient and recording is enabled (see [`no_grad`]); otherwise it is a
//! constant leaf and intermediate values are freed as soon as they drop.

use std::cell::Cell;
use std::collections::HashMap;
use std::rc::Rc;
use std::sync::atomic::{AtomicU64, Ordering};

use crate::conv::{self, ConvGeom};
use crate::element::Element;
use crate::linear::{self, LinearOp};
use crate::tensor::Tensor;

static NEXT_ID: AtomicU64 = AtomicU64::new(1);

thread_local! {
    static RECORDING: Cell<bool> = const { Cell::new(true) };
}

/// Run `f` with graph recording disabled on this thread.
pub fn no_grad<T>(f: impl FnOnce() -> T) -> T {
    let prev = RECORDING.with(|r| r.replace(false));
    struct Restore(bool);
    impl Drop for Restore {
        fn drop(&mut self) {
            RECORDING.with(|r| r.set(self.0));
        }
    }
    let _restore = Restore(prev);
    f()
}

pub fn is_recording() -> bool {
    RECORDING.with(|r| r.get())
}

enum Op<E: Element> {
    Add(Var<E>, Var<E>),
    Sub(Var<E>, Var<E>),
    Mul(Var<E>, Var<E>),
    Div(Var<E>, Var<E>),
    Scale(Var<E>, f64),
    Offset(Var<E>),
    Sqrt(Var<E>),
    LeakyRelu(Var<E>, f64),
    Conv { x: Var<E>, w: Var<E>, geom: ConvGeom },
    ConvInputGrad { gy: Var<E>, w: Var<E>, geom: ConvGeom },
    ConvWeightGrad { x: Var<E>, gy: Var<E>, geom: ConvGeom },
    BiasAdd(Var<E>, Var<E>),
    Concat(Vec<Var<E>>),
    Linear { x: Var<E>, op: Rc<dyn LinearOp<E>>, adjoint: bool },
}

struct Node<E: Element> {
    id: u64,
    value: Tensor<E>,
    requires_grad: bool,
    op: Option<Op<E>>,
}

/// A node in the computation graph; cheap to clone.
pub struct Var<E: Element>(Rc<Node<E>>);

impl<E: Element> Clone for Var<E> {
    fn clone(&self) -> Self {
        Var(Rc::clone(&self.0))
    }
}

impl<E: Element> std::fmt::Debug for Var<E> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{}({:?}, grad={})", self.0.id, self.0.value, self.0.requires_grad)
    }
}

impl<E: Element> Var<E> {
    fn make(value: Tensor<E>, requires_grad: bool, op: Option<Op<E>>) -> Self {
        Var(Rc::new(Node { id: NEXT_ID.fetch_add(1, Ordering::Relaxed), value, requires_grad, op }))
    }

    /// A leaf that never receives gradients.
    pub fn constant(value: Tensor<E>) -> Self {
        Self::make(value, false, None)
    }

    /// A leaf whose gradient is tracked.
    pub fn leaf(value: Tensor<E>) -> Self {
        Self::make(value, true, None)
    }

    fn from_op(value: Tensor<E>, parents: &[&Var<E>], op: impl FnOnce() -> Op<E>) -> Self {
        if is_recording() && parents.iter().any(|p| p.requires_grad()) {
            Self::make(value, true, Some(op()))
        } else {
            Self::constant(value)
        }
    }

    pub fn id(&self) -> u64 {
        self.0.id
    }

    pub fn value(&self) -> &Tensor<E> {
        &self.0.value
    }

    pub fn shape(&self) -> &[usize] {
        self.0.value.shape()
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    /// A constant copy of this value, cut from the graph.
    pub fn detach(&self) -> Self {
        Self::constant(self.0.value.clone())
    }

    pub fn add(&self, o: &Var<E>) -> Var<E> {
        let v = self.value().add(o.value());
        Self::from_op(v, &[self, o], || Op::Add(self.clone(), o.clone()))
    }

    pub fn sub(&self, o: &Var<E>) -> Var<E> {
        let v = self.value().sub(o.value());
        Self::from_op(v, &[self, o], || Op::Sub(self.clone(), o.clone()))
    }

    pub fn mul(&self, o: &Var<E>) -> Var<E> {
        let v = self.value().mul(o.value());
        Self::from_op(v, &[self, o], || Op::Mul(self.clone(), o.clone()))
    }

    pub fn div(&self, o: &Var<E>) -> Var<E> {
        let v = self.value().zip_map(o.value(), |a, b| a / b);
        Self::from_op(v, &[self, o], || Op::Div(self.clone(), o.clone()))
    }

    pub fn scale(&self, c: f64) -> Var<E> {
        let v = self.value().scale(c);
        Self::from_op(v, &[self], || Op::Scale(self.clone(), c))
    }

    pub fn neg(&self) -> Var<E> {
        self.scale(-1.0)
    }

    pub fn add_scalar(&self, c: f64) -> Var<E> {
        let c = E::of(c);
        let v = self.value().map(|a| a + c);
        Self::from_op(v, &[self], || Op::Offset(self.clone()))
    }

    pub fn square(&self) -> Var<E> {
        self.mul(self)
    }

    pub fn sqrt(&self) -> Var<E> {
        let v = self.value().map(|a| a.sqrt());
        Self::from_op(v, &[self], || Op::Sqrt(self.clone()))
    }

    pub fn leaky_relu(&self, slope: f64) -> Var<E> {
        let s = E::of(slope);
        let v = self.value().map(|a| if a > E::zero() { a } else { a * s });
        Self::from_op(v, &[self], || Op::LeakyRelu(self.clone(), slope))
    }

    /// Square-kernel cross-correlation with zero padding; weight `(Co, Ci, k, k)`.
    pub fn conv2d(&self, w: &Var<E>, stride: usize, pad: usize) -> Var<E> {
        let (_, _, h, wd) = self.value().dims4();
        let k = w.shape()[2];
        let geom = ConvGeom::new(h, wd, k, stride, pad)
            .unwrap_or_else(|| panic!("kernel {k} does not fit input {h}x{wd} with pad {pad}"));
        let v = conv::conv2d_forward(self.value(), w.value(), &geom);
        Self::from_op(v, &[self, w], || Op::Conv { x: self.clone(), w: w.clone(), geom })
    }

    fn conv_input_grad(gy: &Var<E>, w: &Var<E>, geom: ConvGeom) -> Var<E> {
        let v = conv::conv2d_input_grad(gy.value(), w.value(), &geom);
        Self::from_op(v, &[gy, w], || Op::ConvInputGrad { gy: gy.clone(), w: w.clone(), geom })
    }

    fn conv_weight_grad(x: &Var<E>, gy: &Var<E>, geom: ConvGeom) -> Var<E> {
        let v = conv::conv2d_weight_grad(x.value(), gy.value(), &geom);
        Self::from_op(v, &[x, gy], || Op::ConvWeightGrad { x: x.clone(), gy: gy.clone(), geom })
    }

    fn conv_with_geom(x: &Var<E>, w: &Var<E>, geom: ConvGeom) -> Var<E> {
        let v = conv::conv2d_forward(x.value(), w.value(), &geom);
        Self::from_op(v, &[x, w], || Op::Conv { x: x.clone(), w: w.clone(), geom })
    }

    /// Adds a per-channel bias `(C,)` to a `(B, C, H, W)` tensor.
    pub fn bias_add(&self, b: &Var<E>) -> Var<E> {
        let (_, c, h, w) = self.value().dims4();
        assert_eq!(b.shape(), &[c], "bias shape {:?} for {c} channels", b.shape());
        let plane = h * w;
        let mut out = self.value().clone();
        let bias = b.value().data();
        for (i, chunk) in out.data_mut().chunks_mut(plane).enumerate() {
            let bv = bias[i % c];
            for v in chunk {
                *v = *v + bv;
            }
        }
        Self::from_op(out, &[self, b], || Op::BiasAdd(self.clone(), b.clone()))
    }

    /// Concatenation along the channel axis of rank-4 tensors.
    pub fn cat_channels(parts: &[Var<E>]) -> Var<E> {
        let tensors: Vec<&Tensor<E>> = parts.iter().map(|p| p.value()).collect();
        let v = Tensor::cat_channels(&tensors);
        let refs: Vec<&Var<E>> = parts.iter().collect();
        Self::from_op(v, &refs, || Op::Concat(parts.to_vec()))
    }

    pub fn apply_linear(&self, op: Rc<dyn LinearOp<E>>) -> Var<E> {
        let v = op.apply(self.value());
        Self::from_op(v, &[self], || Op::Linear { x: self.clone(), op, adjoint: false })
    }

    fn apply_linear_adjoint(&self, op: Rc<dyn LinearOp<E>>) -> Var<E> {
        let v = op.adjoint(self.value());
        Self::from_op(v, &[self], || Op::Linear { x: self.clone(), op, adjoint: true })
    }

    pub fn reshape(&self, shape: &[usize]) -> Var<E> {
        self.apply_linear(Rc::new(linear::Reshape { from: self.shape().to_vec(), to: shape.to_vec() }))
    }

    pub fn pixel_shuffle(&self, r: usize) -> Var<E> {
        self.apply_linear(Rc::new(linear::PixelShuffle { r }))
    }

    pub fn narrow_channels(&self, start: usize, len: usize) -> Var<E> {
        let channels = self.shape()[1];
        self.apply_linear(Rc::new(linear::NarrowChannels { channels, start, len }))
    }

    pub fn box_filter(&self, k: usize) -> Var<E> {
        self.apply_linear(Rc::new(linear::BoxFilter { k }))
    }

    pub fn spatial_mean(&self) -> Var<E> {
        let (_, _, h, w) = self.value().dims4();
        self.apply_linear(Rc::new(linear::SpatialMean { h, w }))
    }

    pub fn sum(&self) -> Var<E> {
        self.apply_linear(Rc::new(linear::ScaledSum { shape: self.shape().to_vec(), scale: 1.0 }))
    }

    pub fn mean(&self) -> Var<E> {
        let n = self.value().numel() as f64;
        self.apply_linear(Rc::new(linear::ScaledSum { shape: self.shape().to_vec(), scale: 1.0 / n }))
    }

    /// Sum over every axis but the first: `(B, ...) -> (B,)`.
    pub fn item_sum(&self) -> Var<E> {
        self.apply_linear(Rc::new(linear::ItemSum { shape: self.shape().to_vec() }))
    }

    pub fn broadcast_batch(&self, batch: usize) -> Var<E> {
        if batch == 1 {
            return self.clone();
        }
        self.apply_linear(Rc::new(linear::BroadcastBatch { batch }))
    }

    fn channel_sum(&self) -> Var<E> {
        let (b, c, h, w) = self.value().dims4();
        self.apply_linear(Rc::new(linear::ChannelSum { shape: [b, c, h, w] }))
    }
}

/// Gradients of a root with respect to the tracked leaves it depends on.
pub struct Gradients<E: Element> {
    map: HashMap<u64, Var<E>>,
}

impl<E: Element> Gradients<E> {
    pub fn get(&self, v: &Var<E>) -> Option<&Var<E>> {
        self.map.get(&v.id())
    }

    pub fn tensor(&self, v: &Var<E>) -> Option<&Tensor<E>> {
        self.get(v).map(|g| g.value())
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }
}

fn topo_order<E: Element>(root: &Var<E>) -> Vec<Var<E>> {
    let mut order = Vec::new();
    let mut seen = std::collections::HashSet::new();
    // (node, expanded)
    let mut stack = vec![(root.clone(), false)];
    while let Some((v, expanded)) = stack.pop() {
        if expanded {
            order.push(v);
            continue;
        }
        if !v.requires_grad() || !seen.insert(v.id()) {
            continue;
        }
        stack.push((v.clone(), true));
        if let Some(op) = &v.0.op {
            for p in parents(op) {
                if p.requires_grad() && !seen.contains(&p.id()) {
                    stack.push((p.clone(), false));
                }
            }
        }
    }
    order
}

fn parents<E: Element>(op: &Op<E>) -> Vec<&Var<E>> {
    match op {
        Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::Div(a, b) | Op::BiasAdd(a, b) => vec![a, b],
        Op::Scale(a, _) | Op::Offset(a) | Op::Sqrt(a) | Op::LeakyRelu(a, _) => vec![a],
        Op::Conv { x, w, .. } => vec![x, w],
        Op::ConvInputGrad { gy, w, .. } => vec![gy, w],
        Op::ConvWeightGrad { x, gy, .. } => vec![x, gy],
        Op::Concat(parts) => parts.iter().collect(),
        Op::Linear { x, .. } => vec![x],
    }
}

fn local_grads<E: Element>(op: &Op<E>, g: &Var<E>) -> Vec<(Var<E>, Var<E>)> {
    let mut out = Vec::new();
    let mut push = |p: &Var<E>, grad: &dyn Fn() -> Var<E>| {
        if p.requires_grad() {
            out.push((p.clone(), grad()));
        }
    };
    match op {
        Op::Add(a, b) => {
            push(a, &|| g.clone());
            push(b, &|| g.clone());
        }
        Op::Sub(a, b) => {
            push(a, &|| g.clone());
            push(b, &|| g.neg());
        }
        Op::Mul(a, b) => {
            push(a, &|| g.mul(b));
            push(b, &|| g.mul(a));
        }
        Op::Div(a, b) => {
            push(a, &|| g.div(b));
            push(b, &|| g.mul(a).div(&b.mul(b)).neg());
        }
        Op::Scale(a, c) => push(a, &|| g.scale(*c)),
        Op::Offset(a) => push(a, &|| g.clone()),
        Op::Sqrt(a) => push(a, &|| g.scale(0.5).div(&a.sqrt())),
        Op::LeakyRelu(a, slope) => push(a, &|| {
            let s = E::of(*slope);
            let mask = a.value().map(|v| if v > E::zero() { E::one() } else { s });
            g.mul(&Var::constant(mask))
        }),
        Op::Conv { x, w, geom } => {
            push(x, &|| Var::conv_input_grad(g, w, *geom));
            push(w, &|| Var::conv_weight_grad(x, g, *geom));
        }
        Op::ConvInputGrad { gy, w, geom } => {
            push(gy, &|| Var::conv_with_geom(g, w, *geom));
            push(w, &|| Var::conv_weight_grad(g, gy, *geom));
        }
        Op::ConvWeightGrad { x, gy, geom } => {
            push(x, &|| Var::conv_input_grad(gy, g, *geom));
            push(gy, &|| Var::conv_with_geom(x, g, *geom));
        }
        Op::BiasAdd(x, b) => {
            push(x, &|| g.clone());
            push(b, &|| g.channel_sum());
        }
        Op::Concat(parts) => {
            let total: usize = parts.iter().map(|p| p.shape()[1]).sum();
            let mut start = 0;
            for p in parts {
                let len = p.shape()[1];
                let s = start;
                push(p, &|| {
                    g.apply_linear(Rc::new(linear::NarrowChannels { channels: total, start: s, len }))
                });
                start += len;
            }
        }
        Op::Linear { x, op, adjoint } => push(x, &|| {
            if *adjoint {
                g.apply_linear(Rc::clone(op))
            } else {
                g.apply_linear_adjoint(Rc::clone(op))
            }
        }),
    }
    out
}

/// Backpropagate from a scalar root (seed 1).
pub fn backward<E: Element>(root: &Var<E>, create_graph: bool) -> Gradients<E> {
    assert_eq!(root.value().numel(), 1, "backward needs a scalar root, got {:?}", root.shape());
    backward_with_seed(root, Tensor::ones(root.shape()), create_graph)
}

/// Backpropagate with an explicit output cotangent.
pub fn backward_with_seed<E: Element>(root: &Var<E>, seed: Tensor<E>, create_graph: bool) -> Gradients<E> {
    assert_eq!(seed.shape(), root.shape(), "seed shape mismatch");
    let run = || {
        let order = topo_order(root);
        let mut pending: HashMap<u64, Var<E>> = HashMap::new();
        let mut leaves = HashMap::new();
        if root.requires_grad() {
            pending.insert(root.id(), Var::constant(seed));
        }
        for v in order.iter().rev() {
            let Some(g) = pending.remove(&v.id()) else { continue };
            match &v.0.op {
                None => {
                    leaves.insert(v.id(), g);
                }
                Some(op) => {
                    for (p, pg) in local_grads(op, &g) {
                        let acc = match pending.remove(&p.id()) {
                            Some(prev) => prev.add(&pg),
                            None => pg,
                        };
                        pending.insert(p.id(), acc);
                    }
                }
            }
        }
        Gradients { map: leaves }
    };
    if create_graph {
        run()
    } else {
        no_grad(run)
    }
}
