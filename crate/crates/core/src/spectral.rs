//! Two-dimensional discrete Fourier transforms and power-law random surfaces.

use rand::Rng;
use rand_distr::StandardNormal;
use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;

/// Signed normalized frequency of DFT index `i` on an axis of length `n`.
pub fn frequency(i: usize, n: usize) -> f64 {
    if i <= n / 2 {
        i as f64 / n as f64
    } else {
        (i as f64 - n as f64) / n as f64
    }
}

fn transform(data: &mut [Complex64], h: usize, w: usize, inverse: bool) {
    let mut planner = FftPlanner::<f64>::new();
    let row = if inverse { planner.plan_fft_inverse(w) } else { planner.plan_fft_forward(w) };
    for r in data.chunks_mut(w) {
        row.process(r);
    }
    let col = if inverse { planner.plan_fft_inverse(h) } else { planner.plan_fft_forward(h) };
    let mut buf = vec![Complex64::new(0.0, 0.0); h];
    for c in 0..w {
        for (i, b) in buf.iter_mut().enumerate() {
            *b = data[i * w + c];
        }
        col.process(&mut buf);
        for (i, b) in buf.iter().enumerate() {
            data[i * w + c] = *b;
        }
    }
}

/// Unnormalized forward DFT of a real `(H, W)` plane.
pub fn fft2(plane: &[f64], h: usize, w: usize) -> Vec<Complex64> {
    assert_eq!(plane.len(), h * w);
    let mut data: Vec<Complex64> = plane.iter().map(|&v| Complex64::new(v, 0.0)).collect();
    transform(&mut data, h, w, false);
    data
}

/// Inverse DFT including the `1 / (H W)` factor.
pub fn ifft2(mut spectrum: Vec<Complex64>, h: usize, w: usize) -> Vec<Complex64> {
    transform(&mut spectrum, h, w, true);
    let s = 1.0 / (h * w) as f64;
    for v in &mut spectrum {
        *v *= s;
    }
    spectrum
}

/// Zero-mean random surface whose radially averaged power follows `rho^slope`,
/// with `rho` the ring wavenumber scaled by `min(H, W)`. Rescaled to unit standard deviation.
pub fn power_law_surface(h: usize, w: usize, slope: f64, rng: &mut impl Rng) -> Vec<f64> {
    let scale = h.min(w) as f64;
    let mut spec = Vec::with_capacity(h * w);
    for i in 0..h {
        let fy = frequency(i, h);
        for j in 0..w {
            let fx = frequency(j, w);
            let rho = (fy * fy + fx * fx).sqrt() * scale;
            let re: f64 = rng.sample(StandardNormal);
            let im: f64 = rng.sample(StandardNormal);
            let amp = if rho == 0.0 { 0.0 } else { rho.powf(slope / 2.0) };
            spec.push(Complex64::new(re * amp, im * amp));
        }
    }
    let mut out: Vec<f64> = ifft2(spec, h, w).into_iter().map(|c| c.re).collect();
    let n = out.len() as f64;
    let mean = out.iter().sum::<f64>() / n;
    let std = (out.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
    for v in &mut out {
        *v = (*v - mean) / std.max(f64::MIN_POSITIVE);
    }
    out
}

/// Stream-separated seed: one 64-bit seed per `(seed, tags...)` tuple.
pub fn derive_seed(seed: u64, tags: &[u64]) -> u64 {
    let mut s = splitmix(seed ^ 0x5157_4e44_5343_414c);
    for &t in tags {
        s = splitmix(s ^ splitmix(t.wrapping_add(0x9e37_79b9_7f4a_7c15)));
    }
    s
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}
