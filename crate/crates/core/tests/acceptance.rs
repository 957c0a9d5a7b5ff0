//! Acceptance suite: one test per criterion, each printing a single
//! `criterion N: PASS|FAIL ...` line before asserting.
//!
//! Criteria 5 to 7 share one set of training runs on the 64x64 synthetic
//! dataset, built on first use. Tests hold a global lock so every wall-clock
//! figure measures one criterion alone.

use std::path::{Path, PathBuf};
use std::sync::{Mutex, MutexGuard, OnceLock};
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use windscale_autograd::{backward, Tensor, Var};
use windscale_core::config::{desk_critic, preset, RunConfig};
use windscale_core::grid::{SamplePair, VariableId};
use windscale_core::inference::{trim_to_multiple, Baseline, Downscaler, ModelMethod, TrimEdge, TrimPlan};
use windscale_core::losses::{critic_loss, generator_loss, gradient_penalty, split_tensor, LossConfig};
use windscale_core::metrics::{evaluate, lsd, mad, median, rapsd, EvalOptions, Method, MetricReport, Rapsd};
use windscale_core::networks::{pixel_shuffle, pixel_unshuffle, Bound, Critic, CriticSpec, Generator, GeneratorSpec, ParamStore};
use windscale_core::preprocess::{fit_norm, normalize_pair, NormStats};
use windscale_core::synth::{make_dataset, Dataset, SynthConfig};
use windscale_core::training::{
    fine_tune, fit, interval_average, validation_points, LogRecord, MetricsLog, RunOutput, TrainConfig,
};

static SERIAL: Mutex<()> = Mutex::new(());

fn serial() -> MutexGuard<'static, ()> {
    SERIAL.lock().unwrap_or_else(|e| e.into_inner())
}

fn report(n: u32, pass: bool, detail: &str) {
    // written to the raw handle so the line shows without --nocapture
    let line = format!("criterion {n}: {} {detail}\n", if pass { "PASS" } else { "FAIL" });
    let _ = std::io::Write::write_all(&mut std::io::stderr(), line.as_bytes());
}

fn minutes(d: Duration) -> f64 {
    d.as_secs_f64() / 60.0
}

fn noise(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect())
}

// ---------------------------------------------------------------- criterion 1

/// Ring-binned power from a direct double sum over every frequency.
fn direct_dft_rings(x: &[f64], h: usize, w: usize) -> (Vec<f64>, Vec<usize>) {
    let scale = h.min(w);
    let mut sums = vec![0.0; scale / 2];
    let mut counts = vec![0usize; scale / 2];
    for ky in 0..h {
        for kx in 0..w {
            if ky == 0 && kx == 0 {
                continue;
            }
            let (mut re, mut im) = (0.0, 0.0);
            for y in 0..h {
                for xx in 0..w {
                    let a = -std::f64::consts::TAU * ((ky * y) as f64 / h as f64 + (kx * xx) as f64 / w as f64);
                    re += x[y * w + xx] * a.cos();
                    im += x[y * w + xx] * a.sin();
                }
            }
            let signed = |k: usize, n: usize| if k <= n / 2 { k as f64 } else { k as f64 - n as f64 } / n as f64;
            let (fy, fx) = (signed(ky, h), signed(kx, w));
            let r = (((fy * fy + fx * fx).sqrt() * scale as f64).round() as usize).max(1);
            if r <= scale / 2 {
                sums[r - 1] += (re * re + im * im) / (h * w) as f64;
                counts[r - 1] += 1;
            }
        }
    }
    (sums.iter().zip(&counts).map(|(s, &c)| s / c as f64).collect(), counts)
}

/// `sum(y) * s / sqrt(n)`: every item has input gradient norm exactly `s`.
fn linear_critic(s: f64) -> impl Fn(&Var<f64>) -> windscale_core::Result<Var<f64>> {
    move |y: &Var<f64>| {
        let n = (y.shape()[1] * y.shape()[2] * y.shape()[3]) as f64;
        Ok(y.item_sum().scale(s / n.sqrt()))
    }
}

#[test]
fn criterion_1_exact_numerics() {
    let _g = serial();
    let t0 = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut fails = Vec::new();

    let x = noise(&[2, 2, 19, 23], &mut rng).map(|v| v * 7.0);
    for k in [1, 3, 5, 9, 13] {
        let (lo, hi) = split_tensor(&x, k).unwrap();
        let worst = x.data().iter().zip(lo.data()).zip(hi.data()).map(|((a, l), h)| (l + h - a).abs()).fold(0.0, f64::max);
        if worst > 8.0 * f64::EPSILON * 7.0 {
            fails.push(format!("split k={k} residual {worst:e}"));
        }
    }

    let p = noise(&[2, 12, 5, 3], &mut rng);
    let shuffled = pixel_shuffle(&p, 2).unwrap();
    if shuffled.shape() != [2, 3, 10, 6] || pixel_unshuffle(&shuffled, 2).unwrap().data() != p.data() {
        fails.push("pixel shuffle is not a bijection".into());
    }
    let q = noise(&[1, 3, 8, 6], &mut rng);
    if pixel_shuffle(&pixel_unshuffle(&q, 2).unwrap(), 2).unwrap().data() != q.data() {
        fails.push("pixel unshuffle is not the inverse".into());
    }

    let real = noise(&[3, 2, 8, 8], &mut rng);
    let fake = noise(&[3, 2, 8, 8], &mut rng);
    let eps = [0.15, 0.5, 0.85];
    let zero = |y: &Var<f64>| -> windscale_core::Result<Var<f64>> { Ok(Var::constant(Tensor::zeros(&[y.shape()[0]]))) };
    let gp = |c: &dyn Fn(&Var<f64>) -> windscale_core::Result<Var<f64>>| gradient_penalty(c, &real, &fake, &eps).unwrap().value().item();
    for (name, got, want) in [("unit", gp(&linear_critic(1.0)), 0.0), ("zero", gp(&zero), 1.0), ("doubled", gp(&linear_critic(2.0)), 1.0)] {
        if (got - want).abs() >= 1e-6 {
            fails.push(format!("gradient penalty, {name} critic: {got} instead of {want}"));
        }
    }

    let base: Vec<f64> = (0..256).map(|_| rng.random_range(-1.0..1.0)).collect();
    let a = rapsd(&base, 16, 16).unwrap();
    let tenfold = Rapsd { power: a.power.iter().map(|p| 10.0 * p).collect(), ..a.clone() };
    if lsd(&a, &a).unwrap() != 0.0 {
        fails.push("LSD of identical spectra is not 0".into());
    }
    let l10 = lsd(&a, &tenfold).unwrap();
    if (l10 - 10.0).abs() > 1e-12 || lsd(&tenfold, &a).unwrap() != l10 {
        fails.push(format!("LSD of a uniform x10 ratio is {l10}"));
    }

    for seed in 0..4 {
        let mut r = ChaCha8Rng::seed_from_u64(100 + seed);
        let f: Vec<f64> = (0..64).map(|_| r.random_range(-2.0..2.0)).collect();
        let fast = rapsd(&f, 8, 8).unwrap();
        let (power, counts) = direct_dft_rings(&f, 8, 8);
        let worst = fast.power.iter().zip(&power).map(|(a, b)| (a - b).abs() / b.abs().max(1.0)).fold(0.0, f64::max);
        if fast.counts != counts || worst > 1e-12 {
            fails.push(format!("RAPSD differs from the direct DFT by {worst:e}"));
        }
    }

    let cases: [(&[f64], f64, f64); 4] = [
        (&[3.0, 1.0, 2.0], 2.0, 1.0),
        (&[1.0, 4.0], 2.5, 1.5),
        (&[5.0, 5.0, 5.0, 5.0], 5.0, 0.0),
        (&[1.0, 2.0, 3.0, 4.0, 100.0], 3.0, 1.0),
    ];
    for (v, m, d) in cases {
        if median(v).unwrap() != m || mad(v).unwrap() != d {
            fails.push(format!("median/MAD of {v:?}"));
        }
    }
    if median(&[]).is_ok() {
        fails.push("median of an empty slice did not fail".into());
    }

    let took = t0.elapsed();
    let pass = fails.is_empty() && took < Duration::from_secs(120);
    report(1, pass, &format!("exact numerics in {:.1}s {}", took.as_secs_f64(), fails.join("; ")));
    assert!(pass, "{fails:?}");
}

// ---------------------------------------------------------------- criterion 2

#[test]
fn criterion_2_shape_contracts() {
    let _g = serial();
    let t0 = Instant::now();
    let mut fails = Vec::new();

    let gen = Generator::<f32>::new(GeneratorSpec::default(), 11).unwrap();
    let params = gen.params.count();
    for b in [1, 2] {
        let low = Tensor::<f32>::zeros(&[b, 7, 16, 16]);
        let cov = Tensor::<f32>::zeros(&[1, 3, 128, 128]);
        let out = gen.infer(&low, Some(&cov)).unwrap();
        if out.shape() != [b, 2, 128, 128] {
            fails.push(format!("crop output {:?}", out.shape()));
        }
    }

    if trim_to_multiple((1290, 2540), 8).unwrap() != (1288, 2536) {
        fails.push("reference trim".into());
    }
    let plan = TrimPlan::new((162, 318), (1290, 2540), TrimEdge::Trailing).unwrap();
    if (plan.low_hw, plan.high_hw) != ((161, 317), (1288, 2536)) {
        fails.push(format!("trim plan {:?} {:?}", plan.low_hw, plan.high_hw));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let low = Tensor::<f32>::from_vec(&[1, 7, 161, 317], (0..7 * 161 * 317).map(|_| rng.random_range(-1.0..1.0)).collect());
    let cov = Tensor::<f32>::from_vec(&[1, 3, 1288, 2536], (0..3 * 1288 * 2536).map(|_| rng.random_range(-1.0..1.0)).collect());
    let full = gen.infer(&low, Some(&cov)).unwrap();
    if full.shape() != [1, 2, 1288, 2536] || !full.all_finite() {
        fails.push(format!("full-domain output {:?}", full.shape()));
    }
    drop((full, cov, low));

    if Generator::<f32>::new(GeneratorSpec::default(), 11).unwrap().params.count() != params {
        fails.push("parameter count changed after full-domain inference".into());
    }
    let small = Generator::<f32>::new(GeneratorSpec { n_rrdb: 1, ..GeneratorSpec::default() }, 3).unwrap();
    let n_small = small.params.count();
    for (h, w) in [(2, 2), (2, 3), (5, 4)] {
        let out = small.infer(&Tensor::zeros(&[1, 7, h, w]), Some(&Tensor::zeros(&[1, 3, 8 * h, 8 * w]))).unwrap();
        if out.shape() != [1, 2, 8 * h, 8 * w] || small.params.count() != n_small {
            fails.push(format!("input {h}x{w}"));
        }
    }

    let took = t0.elapsed();
    let pass = fails.is_empty() && took < Duration::from_secs(120);
    report(2, pass, &format!("shape contracts in {:.1}s, {params} generator parameters {}", took.as_secs_f64(), fails.join("; ")));
    assert!(pass, "{fails:?}");
}

// ---------------------------------------------------------------- criterion 3

type LossFn<'a> = dyn Fn(&ParamStore<f64>, bool) -> (f64, Vec<Option<Tensor<f64>>>) + 'a;

/// Worst relative error between autodiff and central differences on `n` entries.
fn worst_fd_error(store: &mut ParamStore<f64>, loss: &LossFn<'_>, n: usize, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (_, grads) = loss(store, true);
    let h = 1e-5;
    let mut worst = 0.0f64;
    for i in 0..n {
        let t = i % store.len();
        let j = rng.random_range(0..store.tensors()[t].numel());
        let orig = store.tensors()[t].data()[j];
        store.tensors_mut()[t].data_mut()[j] = orig + h;
        let up = loss(store, false).0;
        store.tensors_mut()[t].data_mut()[j] = orig - h;
        let down = loss(store, false).0;
        store.tensors_mut()[t].data_mut()[j] = orig;
        let numeric = (up - down) / (2.0 * h);
        let analytic = grads[t].as_ref().map_or(0.0, |g| g.data()[j]);
        worst = worst.max((numeric - analytic).abs() / numeric.abs().max(analytic.abs()).max(1e-6));
    }
    worst
}

#[test]
fn criterion_3_gradients_match_finite_differences() {
    let _g = serial();
    let t0 = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let gspec = GeneratorSpec { trunk_width: 8, n_rrdb: 1, dense_blocks: 1, growth: 4, cov_widths: [4, 4, 8], ..GeneratorSpec::default() };
    let cspec = CriticSpec { base_width: 4, n_stages: 2, head_width: 8, ..CriticSpec::default() };
    let mut gen = Generator::<f64>::new(gspec, 9).unwrap();
    let mut critic = Critic::<f64>::new(cspec, 10).unwrap();

    let low = noise(&[2, 7, 2, 2], &mut rng);
    let cov = noise(&[1, 3, 16, 16], &mut rng);
    let target = noise(&[2, 2, 16, 16], &mut rng);
    let gcfg = LossConfig { gamma_adv: 0.5, ..LossConfig::default() };
    let (gt, ct) = (gen.clone(), critic.clone());
    let gloss = |store: &ParamStore<f64>, grad: bool| {
        let mut g = gt.clone();
        g.params = store.clone();
        let gp = Bound::new(&g.params, grad);
        let cp = Bound::new(&ct.params, false);
        let out = g.forward(&gp, &Var::constant(low.clone()), Some(&Var::constant(cov.clone()))).unwrap();
        let c = |y: &Var<f64>| ct.forward(&cp, y);
        let (total, _) = generator_loss(&c, &out, &target, &gcfg).unwrap();
        let grads = if grad { let gr = backward(&total, false); gp.vars().iter().map(|v| gr.tensor(v).cloned()).collect() } else { Vec::new() };
        (total.value().item(), grads)
    };
    let n_gen = gen.params.len().max(24);
    let g_err = worst_fd_error(&mut gen.params, &gloss, n_gen, 1);

    let real = noise(&[3, 2, 8, 8], &mut rng);
    let fake = noise(&[3, 2, 8, 8], &mut rng);
    let eps = [0.2, 0.5, 0.9];
    let ccfg = LossConfig::default();
    let closs = |store: &ParamStore<f64>, grad: bool| {
        let mut c = ct.clone();
        c.params = store.clone();
        let cp = Bound::new(&c.params, grad);
        let f = |y: &Var<f64>| c.forward(&cp, y);
        let (total, _) = critic_loss(&f, &real, &fake, &ccfg, &eps).unwrap();
        let grads = if grad { let gr = backward(&total, false); cp.vars().iter().map(|v| gr.tensor(v).cloned()).collect() } else { Vec::new() };
        (total.value().item(), grads)
    };
    let n_critic = critic.params.len().max(24);
    let c_err = worst_fd_error(&mut critic.params, &closs, n_critic, 2);

    let took = t0.elapsed();
    let pass = g_err < 1e-3 && c_err < 1e-3 && n_gen >= 20 && n_critic >= 20 && took < Duration::from_secs(300);
    report(3, pass, &format!("generator {n_gen} entries worst {g_err:.2e}, critic {n_critic} entries worst {c_err:.2e}, {:.1}s", took.as_secs_f64()));
    assert!(pass);
}

// ---------------------------------------------------------------- criterion 4

fn small_data(n_hours: usize) -> (Vec<SamplePair>, Vec<SamplePair>) {
    let ds = make_dataset(&SynthConfig { n_hours, ..SynthConfig::default() }).unwrap();
    let norm = fit_norm(&ds.train).unwrap();
    (normalized(&ds.train, &norm), normalized(&ds.val, &norm))
}

fn normalized(pairs: &[SamplePair], norm: &NormStats) -> Vec<SamplePair> {
    pairs.iter().map(|p| normalize_pair(p, norm).unwrap()).collect()
}

#[test]
fn criterion_4_training_mechanics() {
    use windscale_core::grid::{crop, Batch};
    use windscale_core::training::{pair_for_step, training_step, TrainState};

    let _g = serial();
    let t0 = Instant::now();
    let mut fails = Vec::new();
    let (train, val) = small_data(12);
    let mut g = windscale_core::config::desk_generator();
    g.n_rrdb = 1;
    let cfg = TrainConfig {
        crop_size_hr: 32,
        crops_per_pair: 24,
        batch_size: 4,
        val_crops_per_pair: 4,
        val_every: 2,
        checkpoint_every: 2,
        max_steps: 4,
        seed: 5,
        generator: g,
        critic: desk_critic(),
        ..TrainConfig::default()
    };

    let mut st = TrainState::<f32>::new(&cfg).unwrap();
    let s = training_step(&mut st, &train[0], &cfg).unwrap();
    if (s.critic_updates, s.generator_updates) != (5, 1) {
        fails.push(format!("schedule gave {}:{}", s.critic_updates, s.generator_updates));
    }

    let batch = Batch::<f32>::from_pairs(&[crop(&train[0], 0, 0, 32).unwrap(), crop(&train[1], 8, 16, 32).unwrap()]).unwrap();
    let (g0, c0) = (st.generator.params.fingerprint(), st.critic.params.fingerprint());
    st.critic_update(&batch, &[0.4, 0.6]).unwrap();
    let c1 = st.critic.params.fingerprint();
    if st.generator.params.fingerprint() != g0 || c1 == c0 {
        fails.push("critic update touched the generator".into());
    }
    st.generator_update(&batch).unwrap();
    if st.critic.params.fingerprint() != c1 || st.generator.params.fingerprint() == g0 {
        fails.push("generator update touched the critic".into());
    }

    let dir = tempfile::tempdir().unwrap();
    let out = RunOutput { dir: Some(dir.path().to_path_buf()), ..RunOutput::default() };
    let full = fit::<f64>(&train, &val, &cfg, &out, &mut MetricsLog::default()).unwrap();
    let resumed = fine_tune::<f64>(&dir.path().join("step-000002.ckpt"), cfg.loss, &train, &val, &cfg, &RunOutput::default(), &mut MetricsLog::default()).unwrap();
    if full.generator.params.fingerprint() != resumed.generator.params.fingerprint()
        || full.critic.params.fingerprint() != resumed.critic.params.fingerprint()
    {
        fails.push("resumed f64 run diverged from the uninterrupted run".into());
    }

    let sup = TrainConfig { loss: LossConfig { lambda_gp: 0.0, gamma_adv: 0.0, ..LossConfig::default() }, ..cfg.clone() };
    let mut st = TrainState::<f64>::new(&sup).unwrap();
    let fixed = Batch::<f64>::from_pairs(&[crop(&train[pair_for_step(5, 0, train.len())], 16, 8, 32).unwrap()]).unwrap();
    let losses: Vec<f64> = (0..51).map(|_| st.generator_update(&fixed).unwrap().content_term).collect();
    let rises = losses.windows(2).filter(|w| w[1] >= w[0]).count();
    if rises > 0 {
        fails.push(format!("content loss rose {rises} times in 50 supervised steps"));
    }

    let took = t0.elapsed();
    let pass = fails.is_empty() && took < Duration::from_secs(300);
    report(4, pass, &format!("training mechanics in {:.1}s, content {:.4} -> {:.4} {}", took.as_secs_f64(), losses[0], losses[50], fails.join("; ")));
    assert!(pass, "{fails:?}");
}

// ------------------------------------------------------- criteria 5, 6 and 7

/// Steps of the conditional and unconditional runs.
const STEPS: u64 = 6000;
/// Step of the checkpoint the frequency-separation fine-tune starts from.
const MID: u64 = STEPS / 2;
const VAL_EVERY: u64 = 100;
/// Width, in steps, of the validation averaging intervals.
const INTERVAL: u64 = 500;

/// Desk-scale training settings shared by every run: the preset's desk
/// architecture and loss, trained on whole-domain crops so that training
/// matches whole-domain inference. Every crop of an hour is then the same
/// field, so one item per batch and six batches per step keep the 5:1 schedule.
fn desk_train(preset_name: &str) -> TrainConfig {
    let RunConfig { train, .. } = preset(preset_name).unwrap();
    TrainConfig {
        lr: 1e-3,
        batch_size: 1,
        crops_per_pair: 6,
        crop_size_hr: 64,
        val_crops_per_pair: 1,
        val_every: VAL_EVERY,
        checkpoint_every: MID,
        max_steps: STEPS,
        ..train
    }
}

struct Run {
    dir: PathBuf,
    records: Vec<LogRecord>,
    took: Duration,
}

impl Run {
    fn best_interval_mse(&self, after: u64) -> (u64, f64) {
        let points: Vec<(u64, f64)> = validation_points(&self.records).into_iter().filter(|&(s, _)| s > after).collect();
        let shifted: Vec<(u64, f64)> = points.iter().map(|&(s, v)| (s - after, v)).collect();
        interval_average(&shifted, INTERVAL)
            .into_iter()
            .map(|(s, v)| (s + after, v))
            .min_by(|a, b| a.1.total_cmp(&b.1))
            .expect("validation points")
    }

    fn best(&self) -> PathBuf {
        self.dir.join("best.ckpt")
    }
}

struct Experiments {
    _root: tempfile::TempDir,
    data: Dataset,
    norm: NormStats,
    conditional: Run,
    unconditional: Run,
    fine_tuned: OnceLock<Run>,
}

fn train_run(root: &Path, name: &str, cfg: &TrainConfig, data: &Dataset, norm: &NormStats, from: Option<(&Path, LossConfig)>) -> Run {
    let dir = root.join(name);
    std::fs::create_dir_all(&dir).unwrap();
    let out = RunOutput { dir: Some(dir.clone()), norm: Some(norm.clone()), norm_ref: None };
    let (train, val) = (normalized(&data.train, norm), normalized(&data.val, norm));
    let mut log = MetricsLog::to_file(&dir.join("metrics.tsv")).unwrap();
    let t0 = Instant::now();
    match from {
        None => fit::<f32>(&train, &val, cfg, &out, &mut log).unwrap(),
        Some((ckpt, loss)) => fine_tune::<f32>(ckpt, loss, &train, &val, cfg, &out, &mut log).unwrap(),
    };
    Run { dir, records: log.records, took: t0.elapsed() }
}

fn experiments() -> &'static Experiments {
    static CELL: OnceLock<Experiments> = OnceLock::new();
    CELL.get_or_init(|| {
        let root = tempfile::tempdir().unwrap();
        let data = make_dataset(&SynthConfig::default()).unwrap();
        let norm = fit_norm(&data.train).unwrap();
        let conditional = train_run(root.path(), "cond-nfs", &desk_train("cond-nfs"), &data, &norm, None);
        let unconditional = train_run(root.path(), "baseline-downgan", &desk_train("baseline-downgan"), &data, &norm, None);
        Experiments { _root: root, data, norm, conditional, unconditional, fine_tuned: OnceLock::new() }
    })
}

impl Experiments {
    /// FS(5) fine-tune from the conditional run's mid-point checkpoint.
    fn fine_tuned(&self) -> &Run {
        self.fine_tuned.get_or_init(|| {
            let cfg = desk_train("cond-fs5");
            let from = self.conditional.dir.join(format!("step-{MID:06}.ckpt"));
            train_run(self._root.path(), "cond-fs5", &cfg, &self.data, &self.norm, Some((&from, cfg.loss)))
        })
    }

    fn model(&self, label: &str, ckpt: &Path) -> ModelMethod<f32> {
        ModelMethod { label: label.into(), downscaler: Downscaler::<f32>::from_checkpoint(ckpt, None).unwrap() }
    }

    fn test_report(&self, methods: &[&dyn Method]) -> MetricReport {
        evaluate(&self.data.test, methods, &EvalOptions::default()).unwrap()
    }
}

/// Median over test hours and both components.
fn median_of(report: &MetricReport, method: &str, pick: fn(&windscale_core::metrics::MetricRow) -> f64) -> f64 {
    let v: Vec<f64> = report.rows.iter().filter(|r| r.method == method && VariableId::PREDICTANDS.contains(&r.component)).map(pick).collect();
    median(&v).unwrap()
}

#[test]
fn criterion_5_conditioning_lowers_validation_error() {
    let _g = serial();
    let ex = experiments();
    let (cs, c) = ex.conditional.best_interval_mse(0);
    let (us, u) = ex.unconditional.best_interval_mse(0);
    let gain = 1.0 - c / u;
    let took = ex.conditional.took + ex.unconditional.took;
    let pass = gain >= 0.10 && took < Duration::from_secs(3600);
    report(
        5,
        pass,
        &format!("best interval-averaged validation MSE conditional {c:.4} (step {cs}) vs unconditional {u:.4} (step {us}), {:.1}% lower, {:.1} min", 100.0 * gain, minutes(took)),
    );
    assert!(pass);
}

#[test]
fn criterion_6_frequency_separation_helps() {
    let _g = serial();
    let ex = experiments();
    let t0 = Instant::now();
    let fs = ex.fine_tuned();
    // the continuation of the conditional run past MID is the plain (NFS) fine-tune:
    // resuming with an unchanged loss reproduces the uninterrupted run exactly
    let (fstep, f) = fs.best_interval_mse(MID);
    let (nstep, n) = ex.conditional.best_interval_mse(MID);
    let fs_model = ex.model("fs", &fs.best());
    let nfs_model = ex.model("nfs", &ex.conditional.best());
    let rep = ex.test_report(&[&fs_model, &nfs_model]);
    let (lf, ln) = (median_of(&rep, "fs", |r| r.lsd), median_of(&rep, "nfs", |r| r.lsd));
    let took = t0.elapsed();
    let pass = f <= n && lf < ln && took < Duration::from_secs(3600);
    report(
        6,
        pass,
        &format!(
            "validation MSE after step {MID}: FS(5) {f:.4} (step {fstep}) vs NFS {n:.4} (step {nstep}); median test LSD FS {lf:.3} dB vs NFS {ln:.3} dB; {:.1} min",
            minutes(took)
        ),
    );
    assert!(pass);
}

#[test]
fn criterion_7_model_beats_interpolation_baselines() {
    let _g = serial();
    let ex = experiments();
    let t0 = Instant::now();
    let model = ex.model("model", &ex.conditional.best());
    let rep = ex.test_report(&[&model, &Baseline::Nearest, &Baseline::Bilinear]);
    let rmse = |m| median_of(&rep, m, |r| r.rmse);
    let l = |m| median_of(&rep, m, |r| r.lsd);
    let took = t0.elapsed();
    let pass = rmse("model") < rmse("nearest")
        && rmse("model") < rmse("bilinear")
        && l("model") < l("nearest")
        && l("nearest") < l("bilinear")
        && took < Duration::from_secs(900);
    report(
        7,
        pass,
        &format!(
            "median RMSE model {:.3} nearest {:.3} bilinear {:.3}; median LSD model {:.3} nearest {:.3} bilinear {:.3} dB; {:.1} s",
            rmse("model"),
            rmse("nearest"),
            rmse("bilinear"),
            l("model"),
            l("nearest"),
            l("bilinear"),
            took.as_secs_f64()
        ),
    );
    assert!(pass);
}

// ---------------------------------------------------------------- criterion 8

#[test]
fn criterion_8_tiled_inference_matches_whole_domain() {
    let _g = serial();
    let t0 = Instant::now();
    let ds = make_dataset(&SynthConfig { n_hours: 10, domain_hw: (1024, 1024), ..SynthConfig::default() }).unwrap();
    let d = Downscaler::new(Generator::<f32>::new(windscale_core::config::desk_generator(), 4).unwrap(), fit_norm(&ds.train).unwrap());
    let margin = d.generator.receptive_radius().div_ceil(8);
    let pair = &ds.test[0];
    let whole = d.downscale_domain(&pair.low, &pair.covariates).unwrap();
    let tile = 2 * margin + 32;
    let n_tiles = pair.low.height().div_ceil(32) * pair.low.width().div_ceil(32);
    let tiled = d.downscale_tiled(&pair.low, &pair.covariates, tile, margin).unwrap();
    let (h, w) = whole.hw();
    let band = 32;
    let mut worst = 0.0f64;
    let mut scale = 0.0f64;
    for c in 0..whole.n_channels() {
        for i in band..h - band {
            for j in band..w - band {
                let (a, b) = (whole.get(c, i, j), tiled.get(c, i, j));
                worst = worst.max((a - b).abs());
                scale = scale.max(a.abs());
            }
        }
    }
    let rel = worst / scale;
    let pass = whole.hw() == tiled.hw() && n_tiles > 1 && rel <= 1e-4;
    report(8, pass, &format!("{n_tiles} tiles of {tile} low-res cells with margin {margin}: worst interior deviation {rel:.2e} relative, {:.1}s", t0.elapsed().as_secs_f64()));
    assert!(pass);
}
