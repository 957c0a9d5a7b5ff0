//! Fixed linear maps with explicit adjoints.
//!
//! A `LinearOp` records both directions so that its gradient (the adjoint)
//! is itself differentiable, which is what higher-order gradients need.

use crate::element::Element;
use crate::tensor::Tensor;

pub trait LinearOp<E: Element> {
    fn name(&self) -> &'static str;
    fn apply(&self, x: &Tensor<E>) -> Tensor<E>;
    fn adjoint(&self, y: &Tensor<E>) -> Tensor<E>;
}

pub struct Reshape {
    pub from: Vec<usize>,
    pub to: Vec<usize>,
}

impl<E: Element> LinearOp<E> for Reshape {
    fn name(&self) -> &'static str {
        "reshape"
    }
    fn apply(&self, x: &Tensor<E>) -> Tensor<E> {
        x.reshape(&self.to)
    }
    fn adjoint(&self, y: &Tensor<E>) -> Tensor<E> {
        y.reshape(&self.from)
    }
}

/// Channel-to-space rearrangement:
/// `out[b, c, r*i + di, r*j + dj] = in[b, c*r*r + di*r + dj, i, j]`.
pub struct PixelShuffle {
    pub r: usize,
}

pub fn pixel_shuffle<E: Element>(x: &Tensor<E>, r: usize) -> Tensor<E> {
    let (b, c4, h, w) = x.dims4();
    assert!(r > 0 && c4 % (r * r) == 0, "channels {c4} not divisible by {}", r * r);
    let c = c4 / (r * r);
    let (oh, ow) = (h * r, w * r);
    let src = x.data();
    let mut out = vec![E::zero(); src.len()];
    for bi in 0..b {
        for ci in 0..c {
            for di in 0..r {
                for dj in 0..r {
                    let sc = ci * r * r + di * r + dj;
                    let sbase = (bi * c4 + sc) * h * w;
                    for i in 0..h {
                        let orow = (bi * c + ci) * oh * ow + (r * i + di) * ow;
                        for j in 0..w {
                            out[orow + r * j + dj] = src[sbase + i * w + j];
                        }
                    }
                }
            }
        }
    }
    Tensor::from_vec(&[b, c, oh, ow], out)
}

/// Exact inverse of [`pixel_shuffle`].
pub fn pixel_unshuffle<E: Element>(y: &Tensor<E>, r: usize) -> Tensor<E> {
    let (b, c, oh, ow) = y.dims4();
    assert!(r > 0 && oh % r == 0 && ow % r == 0, "spatial dims {oh}x{ow} not divisible by {r}");
    let (h, w) = (oh / r, ow / r);
    let c4 = c * r * r;
    let src = y.data();
    let mut out = vec![E::zero(); src.len()];
    for bi in 0..b {
        for ci in 0..c {
            for di in 0..r {
                for dj in 0..r {
                    let dc = ci * r * r + di * r + dj;
                    let dbase = (bi * c4 + dc) * h * w;
                    for i in 0..h {
                        let srow = (bi * c + ci) * oh * ow + (r * i + di) * ow;
                        for j in 0..w {
                            out[dbase + i * w + j] = src[srow + r * j + dj];
                        }
                    }
                }
            }
        }
    }
    Tensor::from_vec(&[b, c4, h, w], out)
}

impl<E: Element> LinearOp<E> for PixelShuffle {
    fn name(&self) -> &'static str {
        "pixel_shuffle"
    }
    fn apply(&self, x: &Tensor<E>) -> Tensor<E> {
        pixel_shuffle(x, self.r)
    }
    fn adjoint(&self, y: &Tensor<E>) -> Tensor<E> {
        pixel_unshuffle(y, self.r)
    }
}

/// `x[:, start..start+len]` on a rank-4 tensor with `channels` channels.
pub struct NarrowChannels {
    pub channels: usize,
    pub start: usize,
    pub len: usize,
}

impl<E: Element> LinearOp<E> for NarrowChannels {
    fn name(&self) -> &'static str {
        "narrow"
    }
    fn apply(&self, x: &Tensor<E>) -> Tensor<E> {
        x.narrow_channels(self.start, self.len)
    }
    fn adjoint(&self, y: &Tensor<E>) -> Tensor<E> {
        let (b, len, h, w) = y.dims4();
        assert_eq!(len, self.len);
        let plane = h * w;
        let mut out = vec![E::zero(); b * self.channels * plane];
        for bi in 0..b {
            let dst = (bi * self.channels + self.start) * plane;
            out[dst..dst + len * plane].copy_from_slice(&y.data()[bi * len * plane..(bi + 1) * len * plane]);
        }
        Tensor::from_vec(&[b, self.channels, h, w], out)
    }
}

/// Reflection index for padding (`-1 -> 1`, `n -> n - 2`), valid for `|overhang| < n`.
#[inline]
pub fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    let mut j = i;
    if n == 1 {
        return 0;
    }
    while j < 0 || j >= n {
        if j < 0 {
            j = -j;
        }
        if j >= n {
            j = 2 * (n - 1) - j;
        }
    }
    j as usize
}

/// Separable k x k box mean over the last two axes with reflection padding.
pub struct BoxFilter {
    pub k: usize,
}

fn box_axis<E: Element>(src: &[E], dst: &mut [E], len: usize, stride: usize, k: usize, adjoint: bool) {
    let half = (k / 2) as isize;
    let inv = E::one() / E::of(k as f64);
    for i in 0..len {
        if adjoint {
            let v = src[i * stride] * inv;
            for d in -half..=half {
                let j = reflect(i as isize + d, len);
                dst[j * stride] = dst[j * stride] + v;
            }
        } else {
            let mut acc = E::zero();
            for d in -half..=half {
                acc = acc + src[reflect(i as isize + d, len) * stride];
            }
            dst[i * stride] = acc * inv;
        }
    }
}

fn box_filter<E: Element>(x: &Tensor<E>, k: usize, adjoint: bool) -> Tensor<E> {
    let shape = x.shape();
    assert!(shape.len() >= 2, "box filter needs at least two axes");
    let h = shape[shape.len() - 2];
    let w = shape[shape.len() - 1];
    assert!(k % 2 == 1, "box filter size must be odd, got {k}");
    assert!(k <= h && k <= w, "box filter size {k} exceeds field {h}x{w}");
    if k == 1 {
        return x.clone();
    }
    let planes = x.numel() / (h * w);
    let src = x.data();
    let mut tmp = vec![E::zero(); src.len()];
    let mut out = vec![E::zero(); src.len()];
    for p in 0..planes {
        let base = p * h * w;
        for r in 0..h {
            let off = base + r * w;
            box_axis(&src[off..off + w], &mut tmp[off..off + w], w, 1, k, adjoint);
        }
        for c in 0..w {
            let off = base + c;
            box_axis(&tmp[off..base + h * w], &mut out[off..base + h * w], h, w, k, adjoint);
        }
    }
    Tensor::from_vec(shape, out)
}

impl<E: Element> LinearOp<E> for BoxFilter {
    fn name(&self) -> &'static str {
        "box_filter"
    }
    fn apply(&self, x: &Tensor<E>) -> Tensor<E> {
        box_filter(x, self.k, false)
    }
    fn adjoint(&self, y: &Tensor<E>) -> Tensor<E> {
        box_filter(y, self.k, true)
    }
}

/// `(B, C, H, W) -> (B, C, 1, 1)` spatial mean.
pub struct SpatialMean {
    pub h: usize,
    pub w: usize,
}

impl<E: Element> LinearOp<E> for SpatialMean {
    fn name(&self) -> &'static str {
        "spatial_mean"
    }
    fn apply(&self, x: &Tensor<E>) -> Tensor<E> {
        let (b, c, h, w) = x.dims4();
        let inv = E::one() / E::of((h * w) as f64);
        let data = x.data().chunks(h * w).map(|p| p.iter().copied().sum::<E>() * inv).collect();
        Tensor::from_vec(&[b, c, 1, 1], data)
    }
    fn adjoint(&self, y: &Tensor<E>) -> Tensor<E> {
        let (b, c, _, _) = y.dims4();
        let plane = self.h * self.w;
        let inv = E::one() / E::of(plane as f64);
        let mut out = Vec::with_capacity(b * c * plane);
        for &v in y.data() {
            out.extend(std::iter::repeat_n(v * inv, plane));
        }
        Tensor::from_vec(&[b, c, self.h, self.w], out)
    }
}

/// Sum of every element into a `[1]` tensor (scaled by `scale`).
pub struct ScaledSum {
    pub shape: Vec<usize>,
    pub scale: f64,
}

impl<E: Element> LinearOp<E> for ScaledSum {
    fn name(&self) -> &'static str {
        "sum"
    }
    fn apply(&self, x: &Tensor<E>) -> Tensor<E> {
        Tensor::scalar(x.sum() * E::of(self.scale))
    }
    fn adjoint(&self, y: &Tensor<E>) -> Tensor<E> {
        Tensor::full(&self.shape, y.item() * E::of(self.scale))
    }
}

/// Per-leading-index sum: `(B, ...) -> (B,)`.
pub struct ItemSum {
    pub shape: Vec<usize>,
}

impl<E: Element> LinearOp<E> for ItemSum {
    fn name(&self) -> &'static str {
        "item_sum"
    }
    fn apply(&self, x: &Tensor<E>) -> Tensor<E> {
        let b = x.shape()[0];
        let per = x.numel() / b;
        Tensor::from_vec(&[b], x.data().chunks(per).map(|c| c.iter().copied().sum()).collect())
    }
    fn adjoint(&self, y: &Tensor<E>) -> Tensor<E> {
        let b = self.shape[0];
        let per: usize = self.shape[1..].iter().product();
        let mut out = Vec::with_capacity(b * per);
        for &v in y.data() {
            out.extend(std::iter::repeat_n(v, per));
        }
        Tensor::from_vec(&self.shape, out)
    }
}

/// Per-channel sum of a rank-4 tensor: `(B, C, H, W) -> (C,)`.
pub struct ChannelSum {
    pub shape: [usize; 4],
}

impl<E: Element> LinearOp<E> for ChannelSum {
    fn name(&self) -> &'static str {
        "channel_sum"
    }
    fn apply(&self, x: &Tensor<E>) -> Tensor<E> {
        let (b, c, h, w) = x.dims4();
        let mut out = vec![E::zero(); c];
        for bi in 0..b {
            for (ci, o) in out.iter_mut().enumerate() {
                let base = (bi * c + ci) * h * w;
                *o = *o + x.data()[base..base + h * w].iter().copied().sum::<E>();
            }
        }
        Tensor::from_vec(&[c], out)
    }
    fn adjoint(&self, y: &Tensor<E>) -> Tensor<E> {
        let [b, c, h, w] = self.shape;
        let mut out = Vec::with_capacity(b * c * h * w);
        for _ in 0..b {
            for &v in y.data() {
                out.extend(std::iter::repeat_n(v, h * w));
            }
        }
        Tensor::from_vec(&self.shape, out)
    }
}

/// `(1, C, H, W) -> (B, C, H, W)` replication along the batch axis.
pub struct BroadcastBatch {
    pub batch: usize,
}

impl<E: Element> LinearOp<E> for BroadcastBatch {
    fn name(&self) -> &'static str {
        "broadcast_batch"
    }
    fn apply(&self, x: &Tensor<E>) -> Tensor<E> {
        let (one, c, h, w) = x.dims4();
        assert_eq!(one, 1, "broadcast source must have batch 1");
        let mut out = Vec::with_capacity(self.batch * x.numel());
        for _ in 0..self.batch {
            out.extend_from_slice(x.data());
        }
        Tensor::from_vec(&[self.batch, c, h, w], out)
    }
    fn adjoint(&self, y: &Tensor<E>) -> Tensor<E> {
        let (b, c, h, w) = y.dims4();
        let per = c * h * w;
        let mut out = vec![E::zero(); per];
        for bi in 0..b {
            for (o, &v) in out.iter_mut().zip(&y.data()[bi * per..(bi + 1) * per]) {
                *o = *o + v;
            }
        }
        Tensor::from_vec(&[1, c, h, w], out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
        let n = shape.iter().product();
        Tensor::from_vec(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect())
    }

    fn dot(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
        a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum()
    }

    fn check_adjoint(op: &dyn LinearOp<f64>, in_shape: &[usize], rng: &mut ChaCha8Rng) {
        let x = random(in_shape, rng);
        let y0 = op.apply(&x);
        let y = random(y0.shape(), rng);
        let lhs = dot(&y0, &y);
        let rhs = dot(&x, &op.adjoint(&y));
        assert!((lhs - rhs).abs() < 1e-10 * lhs.abs().max(1.0), "{}: {lhs} vs {rhs}", op.name());
    }

    #[test]
    fn adjoints_are_transposes() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        check_adjoint(&PixelShuffle { r: 2 }, &[2, 8, 3, 4], &mut rng);
        check_adjoint(&NarrowChannels { channels: 5, start: 1, len: 3 }, &[2, 5, 3, 3], &mut rng);
        check_adjoint(&BoxFilter { k: 5 }, &[2, 3, 9, 7], &mut rng);
        check_adjoint(&BoxFilter { k: 3 }, &[1, 1, 3, 3], &mut rng);
        check_adjoint(&SpatialMean { h: 4, w: 5 }, &[2, 3, 4, 5], &mut rng);
        check_adjoint(&ScaledSum { shape: vec![3, 4], scale: 0.5 }, &[3, 4], &mut rng);
        check_adjoint(&ItemSum { shape: vec![3, 2, 2] }, &[3, 2, 2], &mut rng);
        check_adjoint(&ChannelSum { shape: [2, 3, 2, 2] }, &[2, 3, 2, 2], &mut rng);
        check_adjoint(&BroadcastBatch { batch: 3 }, &[1, 2, 2, 3], &mut rng);
    }

    #[test]
    fn shuffle_places_channels_in_raster_order() {
        let x = Tensor::<f64>::from_vec(&[1, 4, 1, 1], vec![1.0, 2.0, 3.0, 4.0]);
        let y = pixel_shuffle(&x, 2);
        assert_eq!(y.shape(), &[1, 1, 2, 2]);
        assert_eq!(y.data(), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn reflect_indices() {
        assert_eq!(reflect(-1, 5), 1);
        assert_eq!(reflect(-2, 5), 2);
        assert_eq!(reflect(5, 5), 3);
        assert_eq!(reflect(6, 5), 2);
        assert_eq!(reflect(3, 5), 3);
    }
}
