//! `windscale`: synthetic data, training, inference, evaluation and plots.
//!
//! Precedence of settings: command-line flags, then the `--config` file, then
//! built-in defaults. Set `WINDSCALE_F64=1` to run networks in 64-bit precision,
//! which makes training and inference bit-reproducible.

mod plot;

use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use windscale_autograd::Element;
use windscale_core::checkpoint;
use windscale_core::config::{preset, RunConfig, PRESETS};
use windscale_core::grid::{SamplePair, VariableId};
use windscale_core::inference::{Baseline, Downscaler, ModelMethod, TrimEdge};
use windscale_core::io::{read_dataset, read_field, write_dataset, write_field};
use windscale_core::losses::ModeSpec;
use windscale_core::metrics::{aggregate, evaluate, format_table, rapsd, EvalOptions, Method, MetricReport, Rapsd};
use windscale_core::preprocess::{fit_norm, normalize_pair, NormStats};
use windscale_core::synth::make_dataset;
use windscale_core::training::{fine_tune, fit, fit_from, interval_average, MetricsLog, RunOutput, TrainState};

#[derive(Parser)]
#[command(name = "windscale", version, about = "Covariate-conditioned adversarial wind downscaling")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct ConfigArgs {
    /// TOML run configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Named experiment preset, used when no config file is given.
    #[arg(long, conflicts_with = "config")]
    preset: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic paired dataset.
    SynthData {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        hours: Option<usize>,
    },
    /// Train a generator/critic pair.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        max_steps: Option<u64>,
        /// Continue from a checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Switch the loss while resuming, e.g. `fs:5`, `pfs:9` or `none`.
        #[arg(long, requires = "resume")]
        fine_tune_loss: Option<String>,
    },
    /// Downscale one low-resolution field.
    Infer {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        covariates: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Normalization statistics; defaults to those stored in the checkpoint.
        #[arg(long)]
        norm: Option<PathBuf>,
        #[arg(long)]
        symmetric_trim: bool,
    },
    /// Score a checkpoint and the baselines on a dataset split.
    Evaluate {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        ckpt: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value_t = Split::Test)]
        split: Split,
        #[arg(long)]
        workers: Option<usize>,
        #[arg(long, default_value = "model")]
        label: String,
    },
    /// Render a figure.
    Plot {
        #[command(subcommand)]
        kind: PlotKind,
    },
    /// Print a named experiment configuration.
    Preset {
        name: String,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Split {
    Train,
    Val,
    Test,
}

#[derive(Subcommand)]
enum PlotKind {
    /// Interval-averaged validation MSE of one or more runs.
    ValidationCurves {
        #[arg(long = "log", required = true)]
        logs: Vec<PathBuf>,
        #[arg(long)]
        interval: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// RMSE distributions per method, component and month.
    Violin {
        #[arg(long)]
        report: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Mean spectra over the test split of the reference, the model and the baselines.
    Rapsd {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        ckpt: Option<PathBuf>,
        #[arg(long, default_value = "u10")]
        component: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Colour map of one channel of a field file.
    Fieldmap {
        #[arg(long)]
        field: PathBuf,
        #[arg(long)]
        channel: Option<String>,
        #[arg(long, default_value_t = 4)]
        scale: u32,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Serialize)]
struct Manifest<'a> {
    command: &'a str,
    precision: &'a str,
    args: Vec<String>,
    outputs: Vec<String>,
}

fn f64_mode() -> bool {
    std::env::var("WINDSCALE_F64").is_ok_and(|v| !v.is_empty() && v != "0")
}

fn write_manifest(path: &Path, command: &str, outputs: &[PathBuf]) -> Result<()> {
    let m = Manifest {
        command,
        precision: if f64_mode() { "f64" } else { "f32" },
        args: std::env::args().skip(1).collect(),
        outputs: outputs.iter().map(|p| p.display().to_string()).collect(),
    };
    std::fs::write(path, serde_json::to_string_pretty(&m)?).with_context(|| format!("writing {}", path.display()))
}

/// Manifest written next to a single-file output.
fn sidecar(out: &Path, command: &str, mut outputs: Vec<PathBuf>) -> Result<()> {
    let path = PathBuf::from(format!("{}.manifest.json", out.display()));
    outputs.push(path.clone());
    write_manifest(&path, command, &outputs)
}

fn load_config(args: &ConfigArgs) -> Result<RunConfig> {
    let mut cfg = match (&args.config, &args.preset) {
        (Some(p), _) => RunConfig::load(p)?,
        (None, Some(name)) => preset(name)?,
        (None, None) => RunConfig::default(),
    };
    if let Some(s) = args.seed {
        cfg.train.seed = s;
        cfg.synth.seed = s;
    }
    Ok(cfg)
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn synth_data(cfg: RunConfig, out: &Path, hours: Option<usize>) -> Result<()> {
    let mut cfg = cfg;
    if let Some(h) = hours {
        cfg.synth.n_hours = h;
    }
    cfg.synth.validate()?;
    create_dir(out)?;
    let ds = make_dataset(&cfg.synth)?;
    let mut outputs = write_dataset(out, &ds)?;
    let norm = out.join("norm.toml");
    fit_norm(&ds.train)?.save(&norm)?;
    let snap = out.join("config.toml");
    cfg.save(&snap)?;
    outputs.extend([norm, snap, out.join("manifest.json")]);
    write_manifest(&out.join("manifest.json"), "synth-data", &outputs)?;
    println!("wrote {} hours ({} train, {} val, {} test) to {}", cfg.synth.n_hours, ds.train.len(), ds.val.len(), ds.test.len(), out.display());
    Ok(())
}

fn normalize_all(pairs: &[SamplePair], norm: &NormStats) -> Result<Vec<SamplePair>> {
    Ok(pairs.iter().map(|p| normalize_pair(p, norm)).collect::<windscale_core::Result<_>>()?)
}

fn train<E: Element>(cfg: RunConfig, data: &Path, out: &Path, resume: Option<&Path>, fine: Option<&str>) -> Result<()> {
    cfg.validate()?;
    let ds = read_dataset(data)?;
    let norm = fit_norm(&ds.train)?;
    let (train, val) = (normalize_all(&ds.train, &norm)?, normalize_all(&ds.val, &norm)?);
    create_dir(out)?;
    let snap = out.join("config.toml");
    cfg.save(&snap)?;
    let norm_path = out.join("norm.toml");
    norm.save(&norm_path)?;
    let run = RunOutput { dir: Some(out.to_path_buf()), norm: Some(norm), norm_ref: Some(norm_path.display().to_string()) };
    let log_path = out.join("metrics.tsv");
    let mut log = MetricsLog::to_file(&log_path)?;
    let state = match (resume, fine) {
        (Some(ckpt), Some(mode)) => {
            let spec: ModeSpec = mode.parse()?;
            fine_tune::<E>(ckpt, cfg.train.loss.with_mode(&spec), &train, &val, &cfg.train, &run, &mut log)?
        }
        (Some(ckpt), None) => {
            let st = checkpoint::load::<E>(ckpt)?;
            if st.generator.spec != cfg.train.generator || st.critic.spec != cfg.train.critic {
                bail!("checkpoint {} does not match the configured architecture", ckpt.display());
            }
            fit_from(st, &train, &val, &cfg.train, &run, &mut log)?
        }
        _ => fit::<E>(&train, &val, &cfg.train, &run, &mut log)?,
    };
    report_run(&state);
    let mut outputs = vec![snap, norm_path, log_path];
    let mut ckpts: Vec<PathBuf> = std::fs::read_dir(out)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "ckpt"))
        .collect();
    ckpts.sort();
    outputs.extend(ckpts);
    outputs.push(out.join("manifest.json"));
    write_manifest(&out.join("manifest.json"), "train", &outputs)
}

fn report_run<E: Element>(st: &TrainState<E>) {
    print!("finished at step {} ({} critic, {} generator updates)", st.step, st.critic_updates, st.generator_updates);
    match st.best {
        Some(b) => println!("; best validation MSE {:.5} at step {}", b.val_mse, b.step),
        None => println!(),
    }
}

fn downscaler<E: Element>(ckpt: &Path, norm: Option<&Path>, edge: TrimEdge) -> Result<Downscaler<E>> {
    let norm = norm.map(NormStats::load).transpose()?;
    let mut d = Downscaler::<E>::from_checkpoint(ckpt, norm)?;
    d.edge = edge;
    Ok(d)
}

fn infer<E: Element>(ckpt: &Path, input: &Path, cov: &Path, out: &Path, norm: Option<&Path>, symmetric: bool) -> Result<()> {
    let edge = if symmetric { TrimEdge::Symmetric } else { TrimEdge::Trailing };
    let d = downscaler::<E>(ckpt, norm, edge)?;
    let field = d.downscale_domain(&read_field(input)?, &read_field(cov)?)?;
    write_field(out, &field)?;
    println!("wrote {}x{} winds to {}", field.height(), field.width(), out.display());
    sidecar(out, "infer", vec![out.to_path_buf()])
}

fn pick_split(ds: &windscale_core::synth::Dataset, split: Split) -> &[SamplePair] {
    match split {
        Split::Train => &ds.train,
        Split::Val => &ds.val,
        Split::Test => &ds.test,
    }
}

fn evaluate_cmd<E: Element>(cfg: RunConfig, ckpt: Option<&Path>, data: &Path, out: &Path, split: Split, workers: Option<usize>, label: &str) -> Result<()>
where
    Downscaler<E>: Sync,
{
    let ds = read_dataset(data)?;
    let pairs = pick_split(&ds, split);
    if pairs.is_empty() {
        bail!("the selected split of {} is empty", data.display());
    }
    let model = ckpt
        .map(|p| -> Result<ModelMethod<E>> { Ok(ModelMethod { label: label.to_string(), downscaler: downscaler::<E>(p, None, cfg.eval.trim)? }) })
        .transpose()?;
    let mut methods: Vec<&dyn Method> = Vec::new();
    if let Some(m) = &model {
        methods.push(m);
    }
    for b in &cfg.eval.baselines {
        methods.push(b);
    }
    let opts = EvalOptions { regions: Vec::new(), lsd_floor: cfg.eval.lsd_floor, workers: workers.unwrap_or(cfg.eval.workers) };
    let report = evaluate(pairs, &methods, &opts)?;
    report.save(out)?;
    let table = format_table(&aggregate(&report.rows)?);
    let table_path = out.with_extension("table.txt");
    std::fs::write(&table_path, &table)?;
    println!("{table}");
    sidecar(out, "evaluate", vec![out.to_path_buf(), table_path])
}

fn mean_spectrum(planes: impl Iterator<Item = Result<Rapsd>>) -> Result<Rapsd> {
    let mut acc: Option<Rapsd> = None;
    let mut n = 0.0;
    for r in planes {
        let r = r?;
        n += 1.0;
        match &mut acc {
            None => acc = Some(r),
            Some(a) => a.power.iter_mut().zip(&r.power).for_each(|(x, y)| *x += y),
        }
    }
    let mut a = acc.ok_or_else(|| anyhow!("no fields to average"))?;
    a.power.iter_mut().for_each(|p| *p /= n);
    Ok(a)
}

fn plot_rapsd<E: Element>(data: &Path, ckpt: Option<&Path>, component: &str, out: &Path, size: (u32, u32)) -> Result<()> {
    let id = VariableId::parse(component).filter(|id| VariableId::PREDICTANDS.contains(id)).ok_or_else(|| anyhow!("component must be u10 or v10"))?;
    let c = VariableId::PREDICTANDS.iter().position(|&v| v == id).expect("predictand");
    let ds = read_dataset(data)?;
    if ds.test.is_empty() {
        bail!("{} has no test hours", data.display());
    }
    let model = ckpt.map(|p| downscaler::<E>(p, None, TrimEdge::Trailing)).transpose()?;
    let mut methods: Vec<(String, Box<dyn Fn(&SamplePair) -> windscale_core::Result<windscale_core::grid::FieldGrid> + '_>)> =
        vec![("reference".into(), Box::new(|p: &SamplePair| Ok(p.high.clone())))];
    if let Some(m) = &model {
        methods.push(("model".into(), Box::new(move |p: &SamplePair| m.downscale_domain(&p.low, &p.covariates))));
    }
    for b in [Baseline::Bilinear, Baseline::Nearest] {
        methods.push((b.label().into(), Box::new(move |p: &SamplePair| b.downscale(p))));
    }
    let mut series = Vec::new();
    for (label, f) in &methods {
        let spec = mean_spectrum(ds.test.iter().map(|p| -> Result<Rapsd> {
            let g = f(p)?;
            Ok(rapsd(g.channel(c), g.height(), g.width())?)
        }))?;
        series.push((label.clone(), spec));
    }
    plot::rapsd_overlay(&series, ds.covariates.spacing_km, out, size)?;
    sidecar(out, "plot rapsd", vec![out.to_path_buf()])
}

fn plot_cmd(kind: PlotKind) -> Result<()> {
    let defaults = RunConfig::default().plot;
    let size = (defaults.width, defaults.height);
    match kind {
        PlotKind::ValidationCurves { logs, interval, out } => {
            let interval = interval.unwrap_or(defaults.val_interval);
            let mut series = Vec::new();
            for p in &logs {
                let records = MetricsLog::load(p)?;
                let pts = interval_average(&windscale_core::training::validation_points(&records), interval);
                if pts.is_empty() {
                    bail!("{} contains no validation records", p.display());
                }
                let label = p.parent().and_then(|d| d.file_name()).unwrap_or(p.as_os_str()).to_string_lossy().into_owned();
                series.push(plot::Series { label, points: pts.into_iter().map(|(s, v)| (s as f64, v)).collect() });
            }
            plot::validation_curves(&series, &out, size)?;
            sidecar(&out, "plot validation-curves", vec![out.clone()])
        }
        PlotKind::Violin { report, out } => {
            let r = MetricReport::load(&report)?;
            plot::violin(&r, &out, size)?;
            sidecar(&out, "plot violin", vec![out.clone()])
        }
        PlotKind::Rapsd { data, ckpt, component, out } => {
            if f64_mode() {
                plot_rapsd::<f64>(&data, ckpt.as_deref(), &component, &out, size)
            } else {
                plot_rapsd::<f32>(&data, ckpt.as_deref(), &component, &out, size)
            }
        }
        PlotKind::Fieldmap { field, channel, scale, out } => {
            let g = read_field(&field)?;
            let c = match channel {
                Some(name) => {
                    let id = VariableId::parse(&name).ok_or_else(|| anyhow!("unknown variable {name}"))?;
                    g.index_of(id).ok_or_else(|| anyhow!("{} has no channel {name}", field.display()))?
                }
                None => 0,
            };
            plot::fieldmap(&g, c, &out, scale.max(1))?;
            sidecar(&out, "plot fieldmap", vec![out.clone()])
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    let wide = f64_mode();
    match cli.command {
        Command::SynthData { cfg, out, hours } => synth_data(load_config(&cfg)?, &out, hours),
        Command::Train { cfg, data, out, max_steps, resume, fine_tune_loss } => {
            let mut c = load_config(&cfg)?;
            if let Some(m) = max_steps {
                c.train.max_steps = m;
            }
            if wide {
                train::<f64>(c, &data, &out, resume.as_deref(), fine_tune_loss.as_deref())
            } else {
                train::<f32>(c, &data, &out, resume.as_deref(), fine_tune_loss.as_deref())
            }
        }
        Command::Infer { ckpt, input, covariates, out, norm, symmetric_trim } => {
            if wide {
                infer::<f64>(&ckpt, &input, &covariates, &out, norm.as_deref(), symmetric_trim)
            } else {
                infer::<f32>(&ckpt, &input, &covariates, &out, norm.as_deref(), symmetric_trim)
            }
        }
        Command::Evaluate { cfg, ckpt, data, out, split, workers, label } => {
            let c = load_config(&cfg)?;
            if wide {
                evaluate_cmd::<f64>(c, ckpt.as_deref(), &data, &out, split, workers, &label)
            } else {
                evaluate_cmd::<f32>(c, ckpt.as_deref(), &data, &out, split, workers, &label)
            }
        }
        Command::Plot { kind } => plot_cmd(kind),
        Command::Preset { name, out } => {
            let cfg = preset(&name).with_context(|| format!("known presets: {}", PRESETS.join(", ")))?;
            let text = cfg.to_toml()?;
            match out {
                Some(p) => {
                    std::fs::write(&p, &text).with_context(|| format!("writing {}", p.display()))?;
                    sidecar(&p, "preset", vec![p.clone()])
                }
                None => {
                    print!("{text}");
                    Ok(())
                }
            }
        }
    }
}

fn main() -> std::process::ExitCode {
    match run(Cli::parse()) {
        Ok(()) => std::process::ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            std::process::ExitCode::FAILURE
        }
    }
}
