//! 2-D cross-correlation kernels (NCHW) and their two adjoints.
//!
//! All three kernels lower to im2col + GEMM over column chunks whose size is
//! capped by [`COLUMN_BUDGET`], so memory stays bounded on large domains.

use crate::element::{gemm, Element, MatMut, MatRef};
use crate::tensor::Tensor;

/// Upper bound on the number of im2col buffer elements per chunk.
pub const COLUMN_BUDGET: usize = 1 << 22;

/// Square-kernel convolution geometry with symmetric zero padding.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeom {
    pub fn new(in_h: usize, in_w: usize, k: usize, stride: usize, pad: usize) -> Option<Self> {
        if k == 0 || stride == 0 || in_h + 2 * pad < k || in_w + 2 * pad < k {
            return None;
        }
        Some(ConvGeom {
            k,
            stride,
            pad,
            in_h,
            in_w,
            out_h: (in_h + 2 * pad - k) / stride + 1,
            out_w: (in_w + 2 * pad - k) / stride + 1,
        })
    }

    fn is_pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.pad == 0
    }
}

/// A block of output columns: items `b0..b1` and output rows `oy0..oy1`.
/// Multi-item chunks always span whole items.
#[derive(Debug, Clone, Copy)]
struct Chunk {
    b0: usize,
    b1: usize,
    oy0: usize,
    oy1: usize,
}

impl Chunk {
    fn ncols(&self, g: &ConvGeom) -> usize {
        (self.b1 - self.b0) * (self.oy1 - self.oy0) * g.out_w
    }
}

fn plan_chunks(batch: usize, rows: usize, g: &ConvGeom) -> Vec<Chunk> {
    let per_item = rows * g.out_h * g.out_w;
    let mut chunks = Vec::new();
    if per_item <= COLUMN_BUDGET {
        let items = (COLUMN_BUDGET / per_item.max(1)).max(1);
        let mut b0 = 0;
        while b0 < batch {
            let b1 = (b0 + items).min(batch);
            chunks.push(Chunk { b0, b1, oy0: 0, oy1: g.out_h });
            b0 = b1;
        }
    } else {
        let step = (COLUMN_BUDGET / (rows * g.out_w).max(1)).max(1);
        for b in 0..batch {
            let mut oy0 = 0;
            while oy0 < g.out_h {
                let oy1 = (oy0 + step).min(g.out_h);
                chunks.push(Chunk { b0: b, b1: b + 1, oy0, oy1 });
                oy0 = oy1;
            }
        }
    }
    chunks
}

fn im2col<E: Element>(x: &[E], cin: usize, g: &ConvGeom, ch: Chunk, cols: &mut [E]) {
    let ncols = ch.ncols(g);
    let rows_out = ch.oy1 - ch.oy0;
    let plane = g.in_h * g.in_w;
    for b in ch.b0..ch.b1 {
        let item_col0 = (b - ch.b0) * rows_out * g.out_w;
        for ci in 0..cin {
            let src_plane = &x[(b * cin + ci) * plane..(b * cin + ci + 1) * plane];
            for ky in 0..g.k {
                for kx in 0..g.k {
                    let row = (ci * g.k + ky) * g.k + kx;
                    let dst_row = &mut cols[row * ncols..(row + 1) * ncols];
                    for oy in ch.oy0..ch.oy1 {
                        let c0 = item_col0 + (oy - ch.oy0) * g.out_w;
                        let dst = &mut dst_row[c0..c0 + g.out_w];
                        let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                        if iy < 0 || iy >= g.in_h as isize {
                            dst.fill(E::zero());
                            continue;
                        }
                        let src = &src_plane[iy as usize * g.in_w..(iy as usize + 1) * g.in_w];
                        fill_row(dst, src, g, kx);
                    }
                }
            }
        }
    }
}

#[inline]
fn valid_range(g: &ConvGeom, kx: usize) -> (usize, usize) {
    // ox valid iff 0 <= ox*s + kx - pad < in_w
    let s = g.stride;
    let lo = if kx >= g.pad { 0 } else { (g.pad - kx).div_ceil(s) };
    let limit = g.in_w + g.pad; // ox*s + kx < limit
    let hi = if limit > kx { ((limit - kx - 1) / s + 1).min(g.out_w) } else { 0 };
    (lo.min(hi), hi)
}

#[inline]
fn fill_row<E: Element>(dst: &mut [E], src: &[E], g: &ConvGeom, kx: usize) {
    let (lo, hi) = valid_range(g, kx);
    dst[..lo].fill(E::zero());
    dst[hi..].fill(E::zero());
    if g.stride == 1 {
        let start = lo + kx - g.pad;
        dst[lo..hi].copy_from_slice(&src[start..start + (hi - lo)]);
    } else {
        for (ox, d) in dst.iter_mut().enumerate().take(hi).skip(lo) {
            *d = src[ox * g.stride + kx - g.pad];
        }
    }
}

fn col2im<E: Element>(cols: &[E], cin: usize, g: &ConvGeom, ch: Chunk, dx: &mut [E]) {
    let ncols = ch.ncols(g);
    let rows_out = ch.oy1 - ch.oy0;
    let plane = g.in_h * g.in_w;
    for b in ch.b0..ch.b1 {
        let item_col0 = (b - ch.b0) * rows_out * g.out_w;
        for ci in 0..cin {
            let dst_plane = &mut dx[(b * cin + ci) * plane..(b * cin + ci + 1) * plane];
            for ky in 0..g.k {
                for kx in 0..g.k {
                    let row = (ci * g.k + ky) * g.k + kx;
                    let src_row = &cols[row * ncols..(row + 1) * ncols];
                    let (lo, hi) = valid_range(g, kx);
                    for oy in ch.oy0..ch.oy1 {
                        let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                        if iy < 0 || iy >= g.in_h as isize {
                            continue;
                        }
                        let c0 = item_col0 + (oy - ch.oy0) * g.out_w;
                        let src = &src_row[c0..c0 + g.out_w];
                        let dst = &mut dst_plane[iy as usize * g.in_w..(iy as usize + 1) * g.in_w];
                        for ox in lo..hi {
                            dst[ox * g.stride + kx - g.pad] = dst[ox * g.stride + kx - g.pad] + src[ox];
                        }
                    }
                }
            }
        }
    }
}

/// Copy `(B, C, P)` item rows of a chunk into a `(C, ncols)` matrix.
fn gather_chunk<E: Element>(src: &[E], c: usize, g: &ConvGeom, ch: Chunk, out: &mut [E]) {
    let ncols = ch.ncols(g);
    let p = g.out_h * g.out_w;
    let seg = (ch.oy1 - ch.oy0) * g.out_w;
    for b in ch.b0..ch.b1 {
        let col0 = (b - ch.b0) * seg;
        for ci in 0..c {
            let s = (b * c + ci) * p + ch.oy0 * g.out_w;
            out[ci * ncols + col0..ci * ncols + col0 + seg].copy_from_slice(&src[s..s + seg]);
        }
    }
}

fn scatter_chunk<E: Element>(tmp: &[E], c: usize, g: &ConvGeom, ch: Chunk, dst: &mut [E]) {
    let ncols = ch.ncols(g);
    let p = g.out_h * g.out_w;
    let seg = (ch.oy1 - ch.oy0) * g.out_w;
    for b in ch.b0..ch.b1 {
        let col0 = (b - ch.b0) * seg;
        for ci in 0..c {
            let d = (b * c + ci) * p + ch.oy0 * g.out_w;
            dst[d..d + seg].copy_from_slice(&tmp[ci * ncols + col0..ci * ncols + col0 + seg]);
        }
    }
}

fn check_weight(w: &Tensor<impl Element>, g: &ConvGeom) -> (usize, usize) {
    let (co, ci, kh, kw) = w.dims4();
    assert!(kh == g.k && kw == g.k, "kernel {kh}x{kw} does not match geometry k={}", g.k);
    (co, ci)
}

/// `y[b, o] = sum_i w[o, i] (*) x[b, i]` with stride and zero padding.
pub fn conv2d_forward<E: Element>(x: &Tensor<E>, w: &Tensor<E>, g: &ConvGeom) -> Tensor<E> {
    let (batch, cin, h, wd) = x.dims4();
    assert!(h == g.in_h && wd == g.in_w, "input {h}x{wd} does not match geometry");
    let (cout, wci) = check_weight(w, g);
    assert_eq!(cin, wci, "conv input has {cin} channels, weight expects {wci}");
    let kdim = cin * g.k * g.k;
    let p = g.out_h * g.out_w;
    let mut out = vec![E::zero(); batch * cout * p];
    let wm = MatRef::row_major(w.data(), cout, kdim);
    if g.is_pointwise() {
        for b in 0..batch {
            let xs = &x.data()[b * cin * p..(b + 1) * cin * p];
            let ys = &mut out[b * cout * p..(b + 1) * cout * p];
            gemm(E::one(), wm, MatRef::row_major(xs, cin, p), E::zero(), MatMut::row_major(ys, cout, p));
        }
        return Tensor::from_vec(&[batch, cout, g.out_h, g.out_w], out);
    }
    let chunks = plan_chunks(batch, kdim, g);
    let max_cols = chunks.iter().map(|c| c.ncols(g)).max().unwrap_or(0);
    let mut cols = vec![E::zero(); kdim * max_cols];
    let mut tmp = vec![E::zero(); cout * max_cols];
    for ch in chunks {
        let n = ch.ncols(g);
        im2col(x.data(), cin, g, ch, &mut cols[..kdim * n]);
        let cm = MatRef::row_major(&cols[..kdim * n], kdim, n);
        if ch.b1 - ch.b0 == 1 {
            let off = ch.b0 * cout * p + ch.oy0 * g.out_w;
            let view = MatMut { data: &mut out[off..], rows: cout, cols: n, rs: p, cs: 1 };
            gemm(E::one(), wm, cm, E::zero(), view);
        } else {
            gemm(E::one(), wm, cm, E::zero(), MatMut::row_major(&mut tmp[..cout * n], cout, n));
            scatter_chunk(&tmp[..cout * n], cout, g, ch, &mut out);
        }
    }
    Tensor::from_vec(&[batch, cout, g.out_h, g.out_w], out)
}

/// Adjoint of [`conv2d_forward`] with respect to its input.
pub fn conv2d_input_grad<E: Element>(gy: &Tensor<E>, w: &Tensor<E>, g: &ConvGeom) -> Tensor<E> {
    let (batch, cout, oh, ow) = gy.dims4();
    assert!(oh == g.out_h && ow == g.out_w, "output gradient {oh}x{ow} does not match geometry");
    let (wco, cin) = check_weight(w, g);
    assert_eq!(cout, wco, "gradient has {cout} channels, weight produces {wco}");
    let kdim = cin * g.k * g.k;
    let p = g.out_h * g.out_w;
    let plane = g.in_h * g.in_w;
    let mut dx = vec![E::zero(); batch * cin * plane];
    let wt = MatRef::row_major_t(w.data(), cout, kdim);
    if g.is_pointwise() {
        for b in 0..batch {
            let gs = &gy.data()[b * cout * p..(b + 1) * cout * p];
            let xs = &mut dx[b * cin * p..(b + 1) * cin * p];
            gemm(E::one(), wt, MatRef::row_major(gs, cout, p), E::zero(), MatMut::row_major(xs, cin, p));
        }
        return Tensor::from_vec(&[batch, cin, g.in_h, g.in_w], dx);
    }
    let chunks = plan_chunks(batch, kdim.max(cout), g);
    let max_cols = chunks.iter().map(|c| c.ncols(g)).max().unwrap_or(0);
    let mut cols = vec![E::zero(); kdim * max_cols];
    let mut gtmp = vec![E::zero(); cout * max_cols];
    for ch in chunks {
        let n = ch.ncols(g);
        let gm = if ch.b1 - ch.b0 == 1 {
            let off = ch.b0 * cout * p + ch.oy0 * g.out_w;
            MatRef { data: &gy.data()[off..], rows: cout, cols: n, rs: p, cs: 1 }
        } else {
            gather_chunk(gy.data(), cout, g, ch, &mut gtmp[..cout * n]);
            MatRef::row_major(&gtmp[..cout * n], cout, n)
        };
        gemm(E::one(), wt, gm, E::zero(), MatMut::row_major(&mut cols[..kdim * n], kdim, n));
        col2im(&cols[..kdim * n], cin, g, ch, &mut dx);
    }
    Tensor::from_vec(&[batch, cin, g.in_h, g.in_w], dx)
}

/// Adjoint of [`conv2d_forward`] with respect to its weight:
/// `dw = sum_b gy_b * im2col(x_b)^T`.
pub fn conv2d_weight_grad<E: Element>(x: &Tensor<E>, gy: &Tensor<E>, g: &ConvGeom) -> Tensor<E> {
    let (batch, cin, h, wd) = x.dims4();
    assert!(h == g.in_h && wd == g.in_w, "input {h}x{wd} does not match geometry");
    let (gb, cout, oh, ow) = gy.dims4();
    assert!(gb == batch && oh == g.out_h && ow == g.out_w, "gradient shape mismatch");
    let kdim = cin * g.k * g.k;
    let p = g.out_h * g.out_w;
    let mut dw = vec![E::zero(); cout * kdim];
    if g.is_pointwise() {
        for b in 0..batch {
            let gs = &gy.data()[b * cout * p..(b + 1) * cout * p];
            let xs = &x.data()[b * cin * p..(b + 1) * cin * p];
            gemm(
                E::one(),
                MatRef::row_major(gs, cout, p),
                MatRef::row_major_t(xs, cin, p),
                E::one(),
                MatMut::row_major(&mut dw, cout, kdim),
            );
        }
        return Tensor::from_vec(&[cout, cin, 1, 1], dw);
    }
    let chunks = plan_chunks(batch, kdim.max(cout), g);
    let max_cols = chunks.iter().map(|c| c.ncols(g)).max().unwrap_or(0);
    let mut cols = vec![E::zero(); kdim * max_cols];
    let mut gtmp = vec![E::zero(); cout * max_cols];
    for ch in chunks {
        let n = ch.ncols(g);
        im2col(x.data(), cin, g, ch, &mut cols[..kdim * n]);
        let gm = if ch.b1 - ch.b0 == 1 {
            let off = ch.b0 * cout * p + ch.oy0 * g.out_w;
            MatRef { data: &gy.data()[off..], rows: cout, cols: n, rs: p, cs: 1 }
        } else {
            gather_chunk(gy.data(), cout, g, ch, &mut gtmp[..cout * n]);
            MatRef::row_major(&gtmp[..cout * n], cout, n)
        };
        let ct = MatRef { data: &cols[..kdim * n], rows: n, cols: kdim, rs: 1, cs: n };
        gemm(E::one(), gm, ct, E::one(), MatMut::row_major(&mut dw, cout, kdim));
    }
    Tensor::from_vec(&[cout, cin, g.k, g.k], dw)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn naive(x: &Tensor<f64>, w: &Tensor<f64>, g: &ConvGeom) -> Tensor<f64> {
        let (b, ci, h, wd) = x.dims4();
        let (co, _, k, _) = w.dims4();
        let mut out = vec![0.0; b * co * g.out_h * g.out_w];
        for bi in 0..b {
            for o in 0..co {
                for oy in 0..g.out_h {
                    for ox in 0..g.out_w {
                        let mut s = 0.0;
                        for i in 0..ci {
                            for ky in 0..k {
                                for kx in 0..k {
                                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                                    let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                                    if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < wd {
                                        s += x.data()[((bi * ci + i) * h + iy as usize) * wd + ix as usize]
                                            * w.data()[((o * ci + i) * k + ky) * k + kx];
                                    }
                                }
                            }
                        }
                        out[((bi * co + o) * g.out_h + oy) * g.out_w + ox] = s;
                    }
                }
            }
        }
        Tensor::from_vec(&[b, co, g.out_h, g.out_w], out)
    }

    fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
        let n = shape.iter().product();
        Tensor::from_vec(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect())
    }

    fn dot(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
        a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum()
    }

    #[test]
    fn forward_matches_direct_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for &(h, w, k, s, p) in &[(7, 5, 3, 1, 1), (8, 9, 3, 2, 1), (5, 5, 1, 1, 0), (6, 4, 3, 1, 0), (9, 7, 5, 2, 2)] {
            let g = ConvGeom::new(h, w, k, s, p).unwrap();
            let x = random(&[3, 2, h, w], &mut rng);
            let wt = random(&[4, 2, k, k], &mut rng);
            let got = conv2d_forward(&x, &wt, &g);
            let want = naive(&x, &wt, &g);
            for (a, b) in got.data().iter().zip(want.data()) {
                assert!((a - b).abs() < 1e-12, "{a} vs {b}");
            }
        }
    }

    #[test]
    fn adjoint_identities_hold() {
        // <conv(x, w), gy> == <x, input_grad(gy, w)> == <w, weight_grad(x, gy)>
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for &(h, w, k, s, p) in &[(7, 6, 3, 1, 1), (8, 8, 3, 2, 1), (4, 4, 1, 1, 0), (9, 11, 3, 2, 1)] {
            let g = ConvGeom::new(h, w, k, s, p).unwrap();
            let x = random(&[2, 3, h, w], &mut rng);
            let wt = random(&[5, 3, k, k], &mut rng);
            let gy = random(&[2, 5, g.out_h, g.out_w], &mut rng);
            let lhs = dot(&conv2d_forward(&x, &wt, &g), &gy);
            let via_x = dot(&x, &conv2d_input_grad(&gy, &wt, &g));
            let via_w = dot(&wt, &conv2d_weight_grad(&x, &gy, &g));
            assert!((lhs - via_x).abs() < 1e-10 * lhs.abs().max(1.0));
            assert!((lhs - via_w).abs() < 1e-10 * lhs.abs().max(1.0));
        }
    }

    #[test]
    fn valid_range_covers_exactly_in_bounds_columns() {
        for &(w, k, s, p) in &[(7, 3, 1, 1), (8, 3, 2, 1), (9, 5, 2, 2), (5, 3, 1, 0)] {
            let g = ConvGeom::new(4, w, k, s, p).unwrap();
            for kx in 0..k {
                let (lo, hi) = valid_range(&g, kx);
                for ox in 0..g.out_w {
                    let ix = (ox * s + kx) as isize - p as isize;
                    let inside = ix >= 0 && (ix as usize) < w;
                    assert_eq!(inside, ox >= lo && ox < hi, "w={w} k={k} s={s} p={p} kx={kx} ox={ox}");
                }
            }
        }
    }
}
