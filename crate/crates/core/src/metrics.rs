//! Pointwise and spectral verification scores, and their robust aggregation.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::grid::{FieldGrid, SamplePair, VariableId};
use crate::spectral::{fft2, frequency};

pub fn rmse(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() || a.is_empty() {
        return Err(Error::Shape(format!("rmse of {} vs {} values", a.len(), b.len())));
    }
    let s: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum();
    Ok((s / a.len() as f64).sqrt())
}

/// Radially averaged power spectral density of one plane.
#[derive(Debug, Clone, PartialEq)]
pub struct Rapsd {
    /// Ring centres in cycles per grid cell.
    pub wavenumbers: Vec<f64>,
    /// Mean power per ring.
    pub power: Vec<f64>,
    pub counts: Vec<usize>,
    /// `H * W` of the transformed plane.
    pub cells: usize,
}

impl Rapsd {
    pub fn len(&self) -> usize {
        self.power.len()
    }

    pub fn is_empty(&self) -> bool {
        self.power.is_empty()
    }

    /// Variance captured by the rings; equals the field variance up to the corner
    /// frequencies beyond the Nyquist ring.
    pub fn total_power(&self) -> f64 {
        self.power.iter().zip(&self.counts).map(|(p, &c)| p * c as f64).sum::<f64>() / self.cells as f64
    }
}

/// Ring index of a frequency, `None` for DC and for rings beyond Nyquist.
pub fn ring_of(fy: f64, fx: f64, scale: usize) -> Option<usize> {
    if fy == 0.0 && fx == 0.0 {
        return None;
    }
    let r = ((fy * fy + fx * fx).sqrt() * scale as f64).round() as usize;
    let r = r.max(1);
    (r <= scale / 2).then_some(r)
}

/// Power `|F|^2 / (H W)` averaged over integer rings of `|f| * min(H, W)`.
pub fn rapsd(plane: &[f64], h: usize, w: usize) -> Result<Rapsd> {
    if h < 8 || w < 8 || plane.len() != h * w {
        return Err(Error::Shape(format!("rapsd needs a plane of at least 8x8, got {h}x{w} with {} values", plane.len())));
    }
    let scale = h.min(w);
    let n_rings = scale / 2;
    let spec = fft2(plane, h, w);
    let norm = 1.0 / (h * w) as f64;
    let mut sums = vec![0.0; n_rings];
    let mut counts = vec![0usize; n_rings];
    for i in 0..h {
        let fy = frequency(i, h);
        for j in 0..w {
            if let Some(r) = ring_of(fy, frequency(j, w), scale) {
                sums[r - 1] += spec[i * w + j].norm_sqr() * norm;
                counts[r - 1] += 1;
            }
        }
    }
    let power = sums.iter().zip(&counts).map(|(s, &c)| if c > 0 { s / c as f64 } else { 0.0 }).collect();
    Ok(Rapsd {
        wavenumbers: (1..=n_rings).map(|r| r as f64 / scale as f64).collect(),
        power,
        counts,
        cells: h * w,
    })
}

/// Log-spectral distance in dB. Non-positive bins are an error unless a floor is given.
pub fn lsd_with_floor(reference: &Rapsd, pred: &Rapsd, floor: Option<f64>) -> Result<f64> {
    if reference.len() != pred.len() || reference.wavenumbers != pred.wavenumbers || reference.is_empty() {
        return Err(Error::Shape(format!("spectra with {} and {} bins are not comparable", reference.len(), pred.len())));
    }
    let fix = |p: f64| floor.map_or(p, |f| p.max(f));
    let bad: Vec<usize> = (0..reference.len())
        .filter(|&i| !(fix(reference.power[i]) > 0.0 && fix(pred.power[i]) > 0.0))
        .collect();
    if !bad.is_empty() {
        return Err(Error::Numeric(format!("non-positive spectral power in bins {bad:?}")));
    }
    let s: f64 = reference
        .power
        .iter()
        .zip(&pred.power)
        .map(|(&a, &b)| (10.0 * (fix(a).log10() - fix(b).log10())).powi(2))
        .sum();
    Ok((s / reference.len() as f64).sqrt())
}

pub fn lsd(reference: &Rapsd, pred: &Rapsd) -> Result<f64> {
    lsd_with_floor(reference, pred, None)
}

pub fn median(values: &[f64]) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::Config("median of an empty group".into()));
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Ok(if n % 2 == 1 { v[n / 2] } else { 0.5 * (v[n / 2 - 1] + v[n / 2]) })
}

/// Median absolute deviation from the median (unscaled).
pub fn mad(values: &[f64]) -> Result<f64> {
    let m = median(values)?;
    median(&values.iter().map(|v| (v - m).abs()).collect::<Vec<_>>())
}

/// Rectangular evaluation region in high-resolution cells.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Region {
    pub name: String,
    pub top: usize,
    pub left: usize,
    pub height: usize,
    pub width: usize,
}

/// One score row: one sample, method, wind component and region.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricRow {
    pub sample: String,
    pub month: u32,
    pub method: String,
    pub component: VariableId,
    pub region: Option<String>,
    pub rmse: f64,
    pub lsd: f64,
}

/// Per-sample scores for every method.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct MetricReport {
    pub rows: Vec<MetricRow>,
}

const REPORT_HEADER: &str = "sample\tmonth\tmethod\tcomponent\tregion\trmse\tlsd";

impl MetricReport {
    pub fn to_tsv(&self) -> String {
        let mut s = String::from(REPORT_HEADER);
        s.push('\n');
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{}\t{}\t{}\t{}\t{}\t{:e}\t{:e}",
                r.sample,
                r.month,
                r.method,
                r.component,
                r.region.as_deref().unwrap_or("domain"),
                r.rmse,
                r.lsd
            );
        }
        s
    }

    pub fn parse_tsv(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        if lines.next() != Some(REPORT_HEADER) {
            return Err(Error::Config("metric report lacks the expected header".into()));
        }
        let mut rows = Vec::new();
        for (n, line) in lines.enumerate().filter(|(_, l)| !l.is_empty()) {
            let f: Vec<&str> = line.split('\t').collect();
            let bad = || Error::Config(format!("malformed report row {}: {line:?}", n + 2));
            if f.len() != 7 {
                return Err(bad());
            }
            rows.push(MetricRow {
                sample: f[0].to_string(),
                month: f[1].parse().map_err(|_| bad())?,
                method: f[2].to_string(),
                component: VariableId::parse(f[3]).ok_or_else(bad)?,
                region: (f[4] != "domain").then(|| f[4].to_string()),
                rmse: f[5].parse().map_err(|_| bad())?,
                lsd: f[6].parse().map_err(|_| bad())?,
            });
        }
        Ok(MetricReport { rows })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_tsv()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse_tsv(&text).map_err(|e| Error::format(path, e.to_string()))
    }

    /// Method labels in first-appearance order.
    pub fn methods(&self) -> Vec<String> {
        let mut out: Vec<String> = Vec::new();
        for r in &self.rows {
            if !out.contains(&r.method) {
                out.push(r.method.clone());
            }
        }
        out
    }
}

/// Median and MAD of one group of rows.
#[derive(Debug, Clone, PartialEq)]
pub struct Summary {
    pub method: String,
    pub component: VariableId,
    pub month: u32,
    pub region: Option<String>,
    pub count: usize,
    pub rmse_median: f64,
    pub rmse_mad: f64,
    pub lsd_median: f64,
    pub lsd_mad: f64,
}

/// Groups rows by method, component, month and region.
pub fn aggregate(rows: &[MetricRow]) -> Result<Vec<Summary>> {
    if rows.is_empty() {
        return Err(Error::Config("nothing to aggregate".into()));
    }
    type Key = (String, VariableId, u32, Option<String>);
    let mut groups: BTreeMap<Key, (Vec<f64>, Vec<f64>)> = BTreeMap::new();
    for r in rows {
        let g = groups.entry((r.method.clone(), r.component, r.month, r.region.clone())).or_default();
        g.0.push(r.rmse);
        g.1.push(r.lsd);
    }
    groups
        .into_iter()
        .map(|((method, component, month, region), (rm, ls))| {
            Ok(Summary {
                method,
                component,
                month,
                region,
                count: rm.len(),
                rmse_median: median(&rm)?,
                rmse_mad: mad(&rm)?,
                lsd_median: median(&ls)?,
                lsd_mad: mad(&ls)?,
            })
        })
        .collect()
}

/// Text table of `median ± MAD` with one row per method and one column per
/// component and score; the lowest median of each column is starred.
pub fn format_table(summaries: &[Summary]) -> String {
    let mut methods: Vec<&str> = Vec::new();
    let mut columns: Vec<(VariableId, u32, Option<String>)> = Vec::new();
    for s in summaries {
        if !methods.contains(&s.method.as_str()) {
            methods.push(&s.method);
        }
        let key = (s.component, s.month, s.region.clone());
        if !columns.contains(&key) {
            columns.push(key);
        }
    }
    let find = |m: &str, c: &(VariableId, u32, Option<String>)| {
        summaries.iter().find(|s| s.method == m && s.component == c.0 && s.month == c.1 && s.region == c.2)
    };
    let mut header = vec!["method".to_string()];
    for c in &columns {
        let tag = match &c.2 {
            Some(r) => format!("{} m{} {r}", c.0, c.1),
            None => format!("{} m{}", c.0, c.1),
        };
        header.push(format!("{tag} RMSE"));
        header.push(format!("{tag} LSD"));
    }
    let mut body: Vec<Vec<String>> = methods.iter().map(|m| vec![m.to_string()]).collect();
    for c in &columns {
        for score in 0..2 {
            let vals: Vec<Option<(f64, f64)>> = methods
                .iter()
                .map(|m| {
                    find(m, c).map(|s| if score == 0 { (s.rmse_median, s.rmse_mad) } else { (s.lsd_median, s.lsd_mad) })
                })
                .collect();
            let best = vals.iter().flatten().map(|v| v.0).fold(f64::INFINITY, f64::min);
            for (row, v) in body.iter_mut().zip(&vals) {
                row.push(match v {
                    Some((med, dev)) => {
                        let star = if *med == best { "*" } else { "" };
                        format!("{star}{med:.3} ± {dev:.3}")
                    }
                    None => "-".into(),
                });
            }
        }
    }
    let widths: Vec<usize> = (0..header.len())
        .map(|i| body.iter().map(|r| r[i].chars().count()).chain([header[i].chars().count()]).max().unwrap_or(0))
        .collect();
    let line = |cells: &[String]| {
        let parts: Vec<String> = cells.iter().zip(&widths).map(|(c, &w)| format!("{c:>w$}")).collect();
        format!("| {} |\n", parts.join(" | "))
    };
    let mut out = line(&header);
    out.push_str(&format!("|{}|\n", widths.iter().map(|w| "-".repeat(w + 2)).collect::<Vec<_>>().join("|")));
    for r in &body {
        out.push_str(&line(r));
    }
    out
}

/// A downscaling method under evaluation.
pub trait Method: Sync {
    fn label(&self) -> &str;
    /// Returns `(u10, v10)` on a grid whose top-left corner coincides with the truth's.
    fn downscale(&self, pair: &SamplePair) -> Result<FieldGrid>;
}

/// Method that returns the truth; every score is zero.
pub struct Oracle;

impl Method for Oracle {
    fn label(&self) -> &str {
        "oracle"
    }
    fn downscale(&self, pair: &SamplePair) -> Result<FieldGrid> {
        Ok(pair.high.clone())
    }
}

/// Synthetic hours are grouped into 730-hour "months".
pub fn month_of(timestamp: &str) -> u32 {
    timestamp
        .rsplit('-')
        .next()
        .and_then(|h| h.parse::<u32>().ok())
        .map_or(0, |h| h / 730)
}

#[derive(Debug, Clone, Default)]
pub struct EvalOptions {
    pub regions: Vec<Region>,
    /// Explicit power floor for LSD; `None` reports empty bins as errors.
    pub lsd_floor: Option<f64>,
    pub workers: usize,
}

fn score_pair(pair: &SamplePair, method: &dyn Method, opts: &EvalOptions) -> Result<Vec<MetricRow>> {
    let pred = method.downscale(pair)?;
    let (h, w) = pred.hw();
    if h > pair.high.height() || w > pair.high.width() || pred.n_channels() != 2 {
        return Err(Error::Shape(format!("method {} produced {:?} for truth {:?}", method.label(), pred.hw(), pair.high.hw())));
    }
    let truth = pair.high.window(0, 0, h, w)?;
    let mut rows = Vec::new();
    let mut windows = vec![(None, 0, 0, h, w)];
    for r in &opts.regions {
        windows.push((Some(r.name.clone()), r.top, r.left, r.height, r.width));
    }
    for (region, top, left, rh, rw) in windows {
        let t = truth.window(top, left, rh, rw)?;
        let p = pred.window(top, left, rh, rw)?;
        for (c, &id) in VariableId::PREDICTANDS.iter().enumerate() {
            let spec_t = rapsd(t.channel(c), rh, rw)?;
            let spec_p = rapsd(p.channel(c), rh, rw)?;
            rows.push(MetricRow {
                sample: pair.timestamp.clone(),
                month: month_of(&pair.timestamp),
                method: method.label().to_string(),
                component: id,
                region: region.clone(),
                rmse: rmse(t.channel(c), p.channel(c))?,
                lsd: lsd_with_floor(&spec_t, &spec_p, opts.lsd_floor)?,
            });
        }
    }
    Ok(rows)
}

/// Scores every method on every pair, in pair-major order regardless of worker count.
pub fn evaluate(pairs: &[SamplePair], methods: &[&dyn Method], opts: &EvalOptions) -> Result<MetricReport> {
    let workers = opts.workers.max(1).min(pairs.len().max(1));
    let run = |chunk: &[SamplePair]| -> Result<Vec<MetricRow>> {
        let mut out = Vec::new();
        for p in chunk {
            for m in methods {
                out.extend(score_pair(p, *m, opts)?);
            }
        }
        Ok(out)
    };
    let per = pairs.len().div_ceil(workers).max(1);
    let parts: Vec<Result<Vec<MetricRow>>> = if workers == 1 {
        vec![run(pairs)]
    } else {
        std::thread::scope(|s| {
            let handles: Vec<_> = pairs.chunks(per).map(|c| s.spawn(move || run(c))).collect();
            handles.into_iter().map(|h| h.join().expect("evaluation worker panicked")).collect()
        })
    };
    let mut rows = Vec::new();
    for p in parts {
        rows.extend(p?);
    }
    Ok(MetricReport { rows })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn rmse_cases() {
        let a = [1.0, -2.0, 3.5];
        assert_eq!(rmse(&a, &a).unwrap(), 0.0);
        let b: Vec<f64> = a.iter().map(|v| v + 2.0).collect();
        assert!((rmse(&a, &b).unwrap() - 2.0).abs() < 1e-15);
        assert!((rmse(&[0.0, 0.0], &[3.0, 4.0]).unwrap() - 12.5f64.sqrt()).abs() < 1e-15);
        assert!(rmse(&[1.0], &[1.0, 2.0]).is_err());
    }

    /// Direct O(N^4) DFT accumulation into the same rings.
    fn oracle(x: &[f64], h: usize, w: usize) -> (Vec<f64>, Vec<usize>) {
        let scale = h.min(w);
        let mut sums = vec![0.0; scale / 2];
        let mut counts = vec![0; scale / 2];
        for ky in 0..h {
            for kx in 0..w {
                let (mut re, mut im) = (0.0, 0.0);
                for y in 0..h {
                    for xx in 0..w {
                        let a = -std::f64::consts::TAU * (ky as f64 * y as f64 / h as f64 + kx as f64 * xx as f64 / w as f64);
                        re += x[y * w + xx] * a.cos();
                        im += x[y * w + xx] * a.sin();
                    }
                }
                let fy = if ky <= h / 2 { ky as f64 } else { ky as f64 - h as f64 } / h as f64;
                let fx = if kx <= w / 2 { kx as f64 } else { kx as f64 - w as f64 } / w as f64;
                if ky == 0 && kx == 0 {
                    continue;
                }
                let r = (((fy * fy + fx * fx).sqrt() * scale as f64).round() as usize).max(1);
                if r <= scale / 2 {
                    sums[r - 1] += (re * re + im * im) / (h * w) as f64;
                    counts[r - 1] += 1;
                }
            }
        }
        (sums.iter().zip(&counts).map(|(s, &c)| s / c as f64).collect(), counts)
    }

    #[test]
    fn rapsd_matches_direct_dft() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x: Vec<f64> = (0..64).map(|_| rng.random_range(-1.0..1.0)).collect();
        let r = rapsd(&x, 8, 8).unwrap();
        let (p, c) = oracle(&x, 8, 8);
        assert_eq!(r.counts, c);
        for (a, b) in r.power.iter().zip(&p) {
            assert!((a - b).abs() <= 1e-12 * b.abs().max(1.0), "{a} vs {b}");
        }
    }

    #[test]
    fn rapsd_constant_and_cosine() {
        let c = rapsd(&[4.2; 256], 16, 16).unwrap();
        assert!(c.power.iter().all(|&p| p.abs() < 1e-20));
        let (h, w, q) = (32, 32, 5);
        let x: Vec<f64> = (0..h * w)
            .map(|k| (std::f64::consts::TAU * q as f64 * (k % w) as f64 / w as f64).cos())
            .collect();
        let r = rapsd(&x, h, w).unwrap();
        let binned: Vec<f64> = r.power.iter().zip(&r.counts).map(|(p, &n)| p * n as f64).collect();
        let total: f64 = binned.iter().sum();
        assert!(binned[q - 1] / total > 0.99);
        assert_eq!(r.wavenumbers[q - 1], q as f64 / 32.0);
    }

    #[test]
    fn lsd_cases() {
        let a = Rapsd { wavenumbers: vec![0.25, 0.5], power: vec![2.0, 3.0], counts: vec![4, 4], cells: 16 };
        let b = Rapsd { power: vec![0.2, 0.3], ..a.clone() };
        assert_eq!(lsd(&a, &a).unwrap(), 0.0);
        assert!((lsd(&a, &b).unwrap() - 10.0).abs() < 1e-12);
        assert_eq!(lsd(&a, &b).unwrap(), lsd(&b, &a).unwrap());
        let z = Rapsd { power: vec![0.0, 3.0], ..a.clone() };
        let err = lsd(&a, &z).unwrap_err();
        assert!(err.to_string().contains("[0]"), "{err}");
        assert!(lsd_with_floor(&a, &z, Some(1e-12)).is_ok());
    }

    #[test]
    fn median_mad_cases() {
        assert_eq!(median(&[3.0, 1.0, 2.0]).unwrap(), 2.0);
        assert_eq!(mad(&[1.0, 2.0, 3.0]).unwrap(), 1.0);
        assert_eq!(mad(&[5.0; 4]).unwrap(), 0.0);
        assert_eq!(median(&[1.0, 4.0]).unwrap(), 2.5);
        assert!(median(&[]).is_err());
    }

    fn row(method: &str, c: VariableId, rmse: f64, lsd: f64) -> MetricRow {
        MetricRow { sample: "hour-00001".into(), month: 0, method: method.into(), component: c, region: None, rmse, lsd }
    }

    #[test]
    fn table_stars_best_median() {
        let rows = vec![
            row("model", VariableId::U10, 1.0, 0.5),
            row("model", VariableId::V10, 1.2, 0.7),
            row("nearest", VariableId::U10, 2.0, 0.4),
            row("nearest", VariableId::V10, 2.5, 0.9),
        ];
        let t = format_table(&aggregate(&rows).unwrap());
        let lines: Vec<&str> = t.lines().collect();
        assert_eq!(lines.len(), 4);
        assert!(lines[0].contains("u10 m0 RMSE") && lines[0].contains("v10 m0 LSD"));
        let model = lines.iter().find(|l| l.contains("model")).unwrap();
        let nearest = lines.iter().find(|l| l.contains("nearest")).unwrap();
        assert!(model.contains("*1.000 ± 0.000") && model.contains("*0.700"));
        assert!(nearest.contains("*0.400") && nearest.contains(" 2.000"));
        assert_eq!(t.matches('*').count(), 4);
    }

    #[test]
    fn report_tsv_round_trip() {
        let mut rows = vec![row("bilinear", VariableId::V10, 0.1 + 0.2, 1.0 / 3.0)];
        rows.push(MetricRow { region: Some("lakes".into()), month: 2, ..row("model", VariableId::U10, 2.5, 0.0) });
        let rep = MetricReport { rows };
        assert_eq!(MetricReport::parse_tsv(&rep.to_tsv()).unwrap(), rep);
        assert_eq!(rep.methods(), vec!["bilinear".to_string(), "model".to_string()]);
    }

    #[test]
    fn months_from_timestamps() {
        assert_eq!(month_of("hour-00007"), 0);
        assert_eq!(month_of("hour-01460"), 2);
        assert_eq!(month_of("unlabelled"), 0);
    }
}
