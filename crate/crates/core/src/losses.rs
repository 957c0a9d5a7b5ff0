//! Critic and generator objectives, gradient penalty and frequency separation.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};
use windscale_autograd::{backward, Element, Tensor, Var};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FsMode {
    /// Full fields for every term.
    None,
    /// Adversarial terms on high-pass fields, content loss on low-pass fields.
    Fs,
    /// Adversarial terms on full fields, content loss on low-pass fields.
    Pfs,
}

impl FsMode {
    pub fn name(self) -> &'static str {
        match self {
            FsMode::None => "none",
            FsMode::Fs => "fs",
            FsMode::Pfs => "pfs",
        }
    }
}

impl fmt::Display for FsMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub lambda_gp: f64,
    pub gamma_adv: f64,
    pub alpha_content: f64,
    pub fs_mode: FsMode,
    pub fs_kernel: usize,
    /// In PFS mode, train the critic on high-pass real and fake fields instead of full fields.
    pub pfs_filtered_critic: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            lambda_gp: 10.0,
            gamma_adv: 0.01,
            alpha_content: 5.0,
            fs_mode: FsMode::None,
            fs_kernel: 5,
            pfs_filtered_critic: false,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda_gp >= 0.0 && self.gamma_adv >= 0.0 && self.alpha_content >= 0.0) {
            return Err(Error::Config(format!(
                "loss weights must be non-negative (lambda {}, gamma {}, alpha {})",
                self.lambda_gp, self.gamma_adv, self.alpha_content
            )));
        }
        if self.fs_mode != FsMode::None {
            check_kernel(self.fs_kernel)?;
        }
        Ok(())
    }

    /// Replaces the frequency-separation settings, e.g. from `"fs:5"`.
    pub fn with_mode(mut self, spec: &ModeSpec) -> Self {
        self.fs_mode = spec.mode;
        if let Some(k) = spec.kernel {
            self.fs_kernel = k;
        }
        self
    }

    fn critic_sees_high(&self) -> bool {
        match self.fs_mode {
            FsMode::None => false,
            FsMode::Fs => true,
            FsMode::Pfs => self.pfs_filtered_critic,
        }
    }

    /// Short label such as `none`, `fs5` or `pfs13`.
    pub fn tag(&self) -> String {
        match self.fs_mode {
            FsMode::None => "none".into(),
            m => format!("{}{}", m.name(), self.fs_kernel),
        }
    }
}

/// `mode[:kernel]` as accepted on the command line.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModeSpec {
    pub mode: FsMode,
    pub kernel: Option<usize>,
}

impl FromStr for ModeSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let (m, k) = match s.split_once(':') {
            Some((m, k)) => (m, Some(k)),
            None => (s, None),
        };
        let mode = match m.to_ascii_lowercase().as_str() {
            "none" | "nfs" => FsMode::None,
            "fs" => FsMode::Fs,
            "pfs" => FsMode::Pfs,
            other => return Err(Error::Config(format!("unknown frequency-separation mode {other:?}"))),
        };
        let kernel = k
            .map(|k| k.parse::<usize>().map_err(|_| Error::Config(format!("bad kernel size {k:?}"))))
            .transpose()?;
        if let Some(k) = kernel {
            check_kernel(k)?;
        }
        Ok(ModeSpec { mode, kernel })
    }
}

fn check_kernel(k: usize) -> Result<()> {
    if k % 2 == 0 || k == 0 {
        return Err(Error::Config(format!("low-pass kernel size {k} must be odd")));
    }
    Ok(())
}

/// Scalar terms of one critic or generator evaluation.
///
/// `critic_loss = gp_term - wasserstein_estimate` and
/// `generator_loss = adv_term + content_term`.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossReport {
    pub critic_loss: f64,
    pub generator_loss: f64,
    /// Weighted penalty `lambda * GP`.
    pub gp_term: f64,
    /// Weighted generator adversarial term `-gamma * E[C(G)]`.
    pub adv_term: f64,
    /// Weighted content term `alpha * MSE`.
    pub content_term: f64,
    /// `E[C(real)] - E[C(fake)]`.
    pub wasserstein_estimate: f64,
}

impl LossReport {
    pub fn all_finite(&self) -> bool {
        self.first_non_finite().is_none()
    }

    /// Name of the first non-finite term.
    pub fn first_non_finite(&self) -> Option<&'static str> {
        [
            ("critic_loss", self.critic_loss),
            ("generator_loss", self.generator_loss),
            ("gp_term", self.gp_term),
            ("adv_term", self.adv_term),
            ("content_term", self.content_term),
            ("wasserstein_estimate", self.wasserstein_estimate),
        ]
        .into_iter()
        .find(|(_, v)| !v.is_finite())
        .map(|(n, _)| n)
    }
}

fn check_field_kernel(shape: &[usize], k: usize) -> Result<()> {
    check_kernel(k)?;
    let n = shape.len();
    if n < 2 || k > shape[n - 2] || k > shape[n - 1] {
        return Err(Error::Config(format!("kernel {k} does not fit field {shape:?}")));
    }
    Ok(())
}

/// `k x k` box mean with reflection padding over the last two axes.
pub fn lowpass<E: Element>(x: &Var<E>, k: usize) -> Result<Var<E>> {
    check_field_kernel(x.shape(), k)?;
    Ok(x.box_filter(k))
}

/// `(lowpass(x), x - lowpass(x))`.
pub fn split_frequencies<E: Element>(x: &Var<E>, k: usize) -> Result<(Var<E>, Var<E>)> {
    let low = lowpass(x, k)?;
    let high = x.sub(&low);
    Ok((low, high))
}

pub fn highpass<E: Element>(x: &Var<E>, k: usize) -> Result<Var<E>> {
    Ok(split_frequencies(x, k)?.1)
}

pub fn lowpass_tensor<E: Element>(x: &Tensor<E>, k: usize) -> Result<Tensor<E>> {
    Ok(lowpass(&Var::constant(x.clone()), k)?.value().clone())
}

pub fn split_tensor<E: Element>(x: &Tensor<E>, k: usize) -> Result<(Tensor<E>, Tensor<E>)> {
    let (l, h) = split_frequencies(&Var::constant(x.clone()), k)?;
    Ok((l.value().clone(), h.value().clone()))
}

pub fn mse<E: Element>(a: &Var<E>, b: &Var<E>) -> Result<Var<E>> {
    if a.shape() != b.shape() {
        return Err(Error::Shape(format!("content loss of {:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(a.sub(b).square().mean())
}

/// Critic evaluated on a batch, returning one score per item.
pub type CriticFn<'a, E> = dyn Fn(&Var<E>) -> Result<Var<E>> + 'a;

/// Stabilizer inside the per-item gradient norm.
const NORM_EPS: f64 = 1e-16;

/// One interpolation weight per batch item.
pub fn draw_eps(rng: &mut impl Rng, batch: usize) -> Vec<f64> {
    (0..batch).map(|_| rng.random::<f64>()).collect()
}

fn item_weights<E: Element>(shape: &[usize], eps: &[f64]) -> Tensor<E> {
    let per: usize = shape[1..].iter().product();
    let mut data = Vec::with_capacity(eps.len() * per);
    for &e in eps {
        data.extend(std::iter::repeat_n(E::of(e), per));
    }
    Tensor::from_vec(shape, data)
}

/// `E_b[(||grad C(y_hat_b)|| - 1)^2]` on `y_hat = eps * real + (1 - eps) * fake`.
/// The result stays differentiable with respect to the critic parameters.
pub fn gradient_penalty<E: Element>(critic: &CriticFn<'_, E>, real: &Tensor<E>, fake: &Tensor<E>, eps: &[f64]) -> Result<Var<E>> {
    if real.shape() != fake.shape() || real.rank() < 2 {
        return Err(Error::Shape(format!("gradient penalty on {:?} vs {:?}", real.shape(), fake.shape())));
    }
    let batch = real.shape()[0];
    if eps.len() != batch {
        return Err(Error::Shape(format!("{} interpolation weights for batch {batch}", eps.len())));
    }
    let w = item_weights::<E>(real.shape(), eps);
    let one_minus = w.map(|v| E::one() - v);
    let yhat = Var::leaf(real.mul(&w).add(&fake.mul(&one_minus)));
    let score = critic(&yhat)?;
    if !score.value().all_finite() {
        return Err(Error::Numeric("critic produced a non-finite score inside the gradient penalty".into()));
    }
    let grads = backward(&score.sum(), true);
    let sq = match grads.get(&yhat) {
        Some(g) => g.square().item_sum(),
        None => Var::constant(Tensor::zeros(&[batch])),
    };
    Ok(sq.add_scalar(NORM_EPS).sqrt().add_scalar(-1.0).square().mean())
}

fn scalar<E: Element>(v: &Var<E>) -> f64 {
    v.value().item().as_f64()
}

/// Differentiable critic objective and its report. `fake` must already be detached.
pub fn critic_loss<E: Element>(
    critic: &CriticFn<'_, E>,
    real: &Tensor<E>,
    fake: &Tensor<E>,
    cfg: &LossConfig,
    eps: &[f64],
) -> Result<(Var<E>, LossReport)> {
    if real.shape() != fake.shape() {
        return Err(Error::Shape(format!("critic loss on {:?} vs {:?}", real.shape(), fake.shape())));
    }
    let (r, f) = if cfg.critic_sees_high() {
        (split_tensor(real, cfg.fs_kernel)?.1, split_tensor(fake, cfg.fs_kernel)?.1)
    } else {
        (real.clone(), fake.clone())
    };
    let cr = critic(&Var::constant(r.clone()))?.mean();
    let cf = critic(&Var::constant(f.clone()))?.mean();
    let w = cr.sub(&cf);
    let mut total = w.neg();
    let mut gp_term = 0.0;
    if cfg.lambda_gp > 0.0 {
        let gp = gradient_penalty(critic, &r, &f, eps)?.scale(cfg.lambda_gp);
        gp_term = scalar(&gp);
        total = total.add(&gp);
    }
    let report = LossReport {
        critic_loss: scalar(&total),
        gp_term,
        wasserstein_estimate: scalar(&w),
        ..Default::default()
    };
    Ok((total, report))
}

/// Differentiable generator objective; `gen_out` stays attached to the generator.
pub fn generator_loss<E: Element>(
    critic: &CriticFn<'_, E>,
    gen_out: &Var<E>,
    target: &Tensor<E>,
    cfg: &LossConfig,
) -> Result<(Var<E>, LossReport)> {
    if gen_out.shape() != target.shape() {
        return Err(Error::Shape(format!("generator output {:?} vs target {:?}", gen_out.shape(), target.shape())));
    }
    let t = Var::constant(target.clone());
    let content = match cfg.fs_mode {
        FsMode::None => mse(gen_out, &t)?,
        FsMode::Fs | FsMode::Pfs => mse(&lowpass(gen_out, cfg.fs_kernel)?, &lowpass(&t, cfg.fs_kernel)?)?,
    }
    .scale(cfg.alpha_content);
    let mut total = content.clone();
    let mut adv_term = 0.0;
    if cfg.gamma_adv > 0.0 {
        let seen = match cfg.fs_mode {
            FsMode::Fs => highpass(gen_out, cfg.fs_kernel)?,
            _ => gen_out.clone(),
        };
        let adv = critic(&seen)?.mean().scale(-cfg.gamma_adv);
        adv_term = scalar(&adv);
        total = total.add(&adv);
    }
    let report = LossReport {
        generator_loss: scalar(&total),
        adv_term,
        content_term: scalar(&content),
        ..Default::default()
    };
    Ok((total, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn field(b: usize, h: usize, w: usize, seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_vec(&[b, 2, h, w], (0..b * 2 * h * w).map(|_| rng.random_range(-2.0..2.0)).collect())
    }

    fn linear_critic(scale: f64) -> impl Fn(&Var<f64>) -> Result<Var<f64>> {
        move |y: &Var<f64>| {
            let n = (y.shape()[1] * y.shape()[2] * y.shape()[3]) as f64;
            Ok(y.item_sum().scale(scale / n.sqrt()))
        }
    }

    fn zero_critic(y: &Var<f64>) -> Result<Var<f64>> {
        Ok(Var::constant(Tensor::zeros(&[y.shape()[0]])))
    }

    #[test]
    fn penalty_analytic_cases() {
        let (r, f) = (field(3, 8, 8, 1), field(3, 8, 8, 2));
        let eps = [0.1, 0.5, 0.9];
        let gp = |c: &CriticFn<'_, f64>| scalar(&gradient_penalty(c, &r, &f, &eps).unwrap());
        assert!(gp(&linear_critic(1.0)).abs() < 1e-6);
        assert!((gp(&zero_critic) - 1.0).abs() < 1e-6);
        assert!((gp(&linear_critic(2.0)) - 1.0).abs() < 1e-6);
    }

    #[test]
    fn critic_loss_cases() {
        let r = field(2, 8, 8, 3);
        let zero = LossConfig { lambda_gp: 0.0, ..Default::default() };
        let (_, rep) = critic_loss(&linear_critic(1.0), &r, &r, &zero, &[0.3, 0.6]).unwrap();
        assert_eq!(rep.critic_loss, 0.0);
        let (_, rep) = critic_loss(&zero_critic, &r, &field(2, 8, 8, 4), &LossConfig::default(), &[0.3, 0.6]).unwrap();
        assert!((rep.critic_loss - 10.0).abs() < 1e-5);
        assert!((rep.critic_loss - (rep.gp_term - rep.wasserstein_estimate)).abs() < 1e-12);
        let fs = LossConfig { fs_mode: FsMode::Fs, fs_kernel: 5, ..Default::default() };
        let c1 = Tensor::full(&[2, 2, 8, 8], 1.5);
        let c2 = Tensor::full(&[2, 2, 8, 8], -0.5);
        let sq = |y: &Var<f64>| Ok(y.square().item_sum());
        let (_, rep) = critic_loss(&sq, &c1, &c2, &fs, &[0.5, 0.5]).unwrap();
        assert!(rep.wasserstein_estimate.abs() < 1e-24);
    }

    #[test]
    fn generator_loss_cases() {
        let t = field(2, 10, 10, 5);
        let cfg = LossConfig { gamma_adv: 0.0, ..Default::default() };
        let (_, rep) = generator_loss(&zero_critic, &Var::constant(t.clone()), &t, &cfg).unwrap();
        assert_eq!(rep.generator_loss, 0.0);
        let off = Var::constant(t.map(|v| v + 1.0));
        let (_, rep) = generator_loss(&zero_critic, &off, &t, &cfg).unwrap();
        assert!((rep.generator_loss - 5.0).abs() < 1e-12);
        let full = LossConfig::default();
        let (_, rep) = generator_loss(&linear_critic(1.0), &off, &t, &full).unwrap();
        assert!((rep.generator_loss - rep.adv_term - rep.content_term).abs() < 1e-12);
        assert!(rep.adv_term != 0.0);
    }

    #[test]
    fn content_loss_values() {
        let y = Var::constant(field(1, 4, 4, 6));
        assert_eq!(scalar(&mse(&y, &y).unwrap()), 0.0);
        let c = 0.75;
        let shifted = y.add_scalar(c);
        assert!((scalar(&mse(&y, &shifted).unwrap()) - c * c).abs() < 1e-12);
    }

    #[test]
    fn lowpass_cases() {
        let c = Var::constant(Tensor::<f64>::full(&[1, 1, 7, 9], 3.25));
        assert!(lowpass(&c, 5).unwrap().value().data().iter().all(|&v| (v - 3.25).abs() < 1e-15));
        let x = Var::constant(field(1, 6, 6, 7));
        assert!(lowpass(&x, 1).unwrap().value().bit_eq(x.value()));
        assert!(matches!(lowpass(&x, 4), Err(Error::Config(_))));
        let mut imp = Tensor::<f64>::zeros(&[1, 1, 5, 5]);
        imp.data_mut()[12] = 1.0;
        let y = lowpass(&Var::constant(imp), 3).unwrap();
        for i in 0..5 {
            for j in 0..5 {
                let expect = if (1..=3).contains(&i) && (1..=3).contains(&j) { 1.0 / 9.0 } else { 0.0 };
                assert!((y.value().data()[i * 5 + j] - expect).abs() < 1e-15);
            }
        }
        let (_, high) = split_frequencies(&c, 3).unwrap();
        assert!(high.value().data().iter().all(|v| v.abs() < 1e-15));
    }

    #[test]
    fn mode_specs_parse() {
        assert_eq!("fs:5".parse::<ModeSpec>().unwrap(), ModeSpec { mode: FsMode::Fs, kernel: Some(5) });
        assert_eq!("PFS:13".parse::<ModeSpec>().unwrap().mode, FsMode::Pfs);
        assert_eq!("none".parse::<ModeSpec>().unwrap().kernel, None);
        assert!("fs:4".parse::<ModeSpec>().is_err());
        assert!("hf:5".parse::<ModeSpec>().is_err());
        let cfg = LossConfig::default().with_mode(&"fs:9".parse().unwrap());
        assert_eq!(cfg.tag(), "fs9");
    }

    #[test]
    fn config_validation() {
        assert!(LossConfig::default().validate().is_ok());
        assert!(LossConfig { gamma_adv: -1.0, ..Default::default() }.validate().is_err());
        assert!(LossConfig { fs_mode: FsMode::Fs, fs_kernel: 6, ..Default::default() }.validate().is_err());
    }
}
