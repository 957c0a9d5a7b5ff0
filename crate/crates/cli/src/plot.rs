//! Raster figures: validation curves, violin plots, RAPSD overlays and field maps.

use std::path::Path;
use std::sync::OnceLock;

use anyhow::{bail, Context, Result};
use plotters::prelude::*;
use plotters::style::{register_font, FontStyle};
use windscale_core::grid::{FieldGrid, FACTOR};
use windscale_core::metrics::{median, MetricReport, Rapsd};

const PALETTE: [RGBColor; 6] = [
    RGBColor(31, 119, 180),
    RGBColor(214, 39, 40),
    RGBColor(44, 160, 44),
    RGBColor(148, 103, 189),
    RGBColor(255, 127, 14),
    RGBColor(23, 190, 207),
];

const FONT_PATHS: [&str; 4] = [
    "/usr/share/fonts/truetype/dejavu/DejaVuSans.ttf",
    "/usr/share/fonts/TTF/DejaVuSans.ttf",
    "/usr/share/fonts/dejavu/DejaVuSans.ttf",
    "/Library/Fonts/Arial.ttf",
];

/// Registers a system font for labels; `false` means figures are drawn without text.
fn fonts() -> bool {
    static READY: OnceLock<bool> = OnceLock::new();
    *READY.get_or_init(|| {
        let custom = std::env::var("WINDSCALE_FONT").ok();
        for p in custom.iter().map(String::as_str).chain(FONT_PATHS) {
            if let Ok(bytes) = std::fs::read(p) {
                let bytes: &'static [u8] = Box::leak(bytes.into_boxed_slice());
                if register_font("sans-serif", FontStyle::Normal, bytes).is_ok() {
                    return true;
                }
            }
        }
        false
    })
}

fn color(i: usize) -> RGBColor {
    PALETTE[i % PALETTE.len()]
}

/// One labelled polyline.
pub struct Series {
    pub label: String,
    pub points: Vec<(f64, f64)>,
}

fn bounds(series: &[Series], log_y: bool) -> Result<((f64, f64), (f64, f64))> {
    let pts: Vec<(f64, f64)> = series.iter().flat_map(|s| s.points.iter().copied()).filter(|p| !log_y || p.1 > 0.0).collect();
    if pts.is_empty() {
        bail!("nothing to plot");
    }
    let (mut x0, mut x1, mut y0, mut y1) = (f64::MAX, f64::MIN, f64::MAX, f64::MIN);
    for (x, y) in pts {
        (x0, x1, y0, y1) = (x0.min(x), x1.max(x), y0.min(y), y1.max(y));
    }
    if x1 <= x0 {
        x1 = x0 + 1.0;
    }
    if y1 <= y0 {
        y1 = y0 + y0.abs().max(1.0) * 0.1;
    }
    Ok(((x0, x1), (y0, y1)))
}

/// Interval-averaged validation MSE against step, one line per run.
pub fn validation_curves(series: &[Series], out: &Path, size: (u32, u32)) -> Result<()> {
    let ((x0, x1), (y0, y1)) = bounds(series, false)?;
    let root = BitMapBackend::new(out, size).into_drawing_area();
    root.fill(&WHITE)?;
    let text = fonts();
    let mut b = ChartBuilder::on(&root);
    b.margin(20).x_label_area_size(40).y_label_area_size(60);
    if text {
        b.caption("Validation MSE (interval averages)", ("sans-serif", 22));
    }
    let pad = 0.05 * (y1 - y0);
    let mut chart = b.build_cartesian_2d(x0..x1, (y0 - pad)..(y1 + pad))?;
    let mut mesh = chart.configure_mesh();
    if text {
        mesh.x_desc("training step").y_desc("MSE (normalized)");
    } else {
        mesh.x_labels(0).y_labels(0);
    }
    mesh.draw()?;
    for (i, s) in series.iter().enumerate() {
        let c = color(i);
        chart.draw_series(s.points.iter().map(|&p| Circle::new(p, 3, c.filled())))?;
        let drawn = chart.draw_series(LineSeries::new(s.points.iter().copied(), c.stroke_width(2)))?;
        if text {
            drawn.label(s.label.clone()).legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 18, y)], c.stroke_width(2)));
        }
    }
    if text {
        chart.configure_series_labels().border_style(BLACK).background_style(WHITE.mix(0.8)).draw()?;
    }
    root.present().with_context(|| format!("writing {}", out.display()))?;
    Ok(())
}

/// Spectra of reference, model and baselines on log-log axes with the input
/// resolution cutoff drawn as a dashed vertical line.
pub fn rapsd_overlay(series: &[(String, Rapsd)], spacing_km: f64, out: &Path, size: (u32, u32)) -> Result<()> {
    let lines: Vec<Series> = series
        .iter()
        .map(|(l, r)| Series {
            label: l.clone(),
            points: r.wavenumbers.iter().zip(&r.power).map(|(k, p)| (k / spacing_km, *p)).filter(|p| p.1 > 0.0).collect(),
        })
        .collect();
    let ((x0, x1), (y0, y1)) = bounds(&lines, true)?;
    let cutoff = cutoff_wavenumber(spacing_km);
    let root = BitMapBackend::new(out, size).into_drawing_area();
    root.fill(&WHITE)?;
    let text = fonts();
    let mut b = ChartBuilder::on(&root);
    b.margin(20).x_label_area_size(40).y_label_area_size(70);
    if text {
        b.caption("Radially averaged power spectrum", ("sans-serif", 22));
    }
    let mut chart = b.build_cartesian_2d((x0.min(cutoff) * 0.9..x1 * 1.1).log_scale(), (y0 * 0.5..y1 * 2.0).log_scale())?;
    let mut mesh = chart.configure_mesh();
    if text {
        mesh.x_desc("wavenumber (cycles/km)").y_desc("power");
    } else {
        mesh.x_labels(0).y_labels(0);
    }
    mesh.draw()?;
    for (i, s) in lines.iter().enumerate() {
        let c = color(i);
        let drawn = chart.draw_series(LineSeries::new(s.points.iter().copied(), c.stroke_width(2)))?;
        if text {
            drawn.label(s.label.clone()).legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 18, y)], c.stroke_width(2)));
        }
    }
    let grey = RGBColor(128, 128, 128);
    let (lo, hi) = (y0 * 0.5, y1 * 2.0);
    let ratio = (hi / lo).powf(1.0 / 40.0);
    let dashes = (0..40).step_by(2).map(|i| {
        let a = lo * ratio.powi(i);
        PathElement::new(vec![(cutoff, a), (cutoff, a * ratio)], grey.stroke_width(2))
    });
    chart.draw_series(dashes)?;
    if text {
        chart.configure_series_labels().border_style(BLACK).background_style(WHITE.mix(0.8)).draw()?;
    }
    root.present().with_context(|| format!("writing {}", out.display()))?;
    Ok(())
}

/// Wavenumber, in cycles per km, of the coarsest wave the input grid cannot resolve.
pub fn cutoff_wavenumber(spacing_hr_km: f64) -> f64 {
    1.0 / (FACTOR as f64 * spacing_hr_km)
}

/// Gaussian kernel density outline of a sample, normalized to unit peak.
fn density(values: &[f64], lo: f64, hi: f64, n: usize) -> Vec<(f64, f64)> {
    let m = values.iter().sum::<f64>() / values.len() as f64;
    let sd = (values.iter().map(|v| (v - m).powi(2)).sum::<f64>() / values.len().max(2) as f64).sqrt();
    let bw = (1.06 * sd * (values.len() as f64).powf(-0.2)).max((hi - lo) * 1e-3).max(1e-12);
    let pts: Vec<(f64, f64)> = (0..n)
        .map(|i| {
            let y = lo + (hi - lo) * i as f64 / (n - 1) as f64;
            (y, values.iter().map(|v| (-0.5 * ((y - v) / bw).powi(2)).exp()).sum::<f64>())
        })
        .collect();
    let peak = pts.iter().fold(0.0f64, |a, p| a.max(p.1)).max(1e-300);
    pts.into_iter().map(|(y, d)| (y, d / peak)).collect()
}

/// Groups of the violin plot: one panel per component, one violin per
/// method and month inside each panel.
pub fn violin_groups(report: &MetricReport) -> Vec<(String, Vec<(String, Vec<f64>)>)> {
    let mut panels: Vec<(String, Vec<(String, Vec<f64>)>)> = Vec::new();
    for r in report.rows.iter().filter(|r| r.region.is_none()) {
        let comp = r.component.to_string();
        let idx = match panels.iter().position(|p| p.0 == comp) {
            Some(i) => i,
            None => {
                panels.push((comp, Vec::new()));
                panels.len() - 1
            }
        };
        let key = format!("{} m{}", r.method, r.month);
        let groups = &mut panels[idx].1;
        match groups.iter_mut().find(|g| g.0 == key) {
            Some(g) => g.1.push(r.rmse),
            None => groups.push((key, vec![r.rmse])),
        }
    }
    panels
}

pub fn violin(report: &MetricReport, out: &Path, size: (u32, u32)) -> Result<()> {
    let panels = violin_groups(report);
    if panels.is_empty() {
        bail!("report has no whole-domain rows to plot");
    }
    let all: Vec<f64> = panels.iter().flat_map(|p| p.1.iter().flat_map(|g| g.1.iter().copied())).collect();
    let lo = all.iter().copied().fold(f64::MAX, f64::min);
    let hi = all.iter().copied().fold(f64::MIN, f64::max);
    let pad = ((hi - lo) * 0.1).max(1e-6);
    let (lo, hi) = (lo - pad, hi + pad);
    let root = BitMapBackend::new(out, size).into_drawing_area();
    root.fill(&WHITE)?;
    let text = fonts();
    let areas = root.split_evenly((1, panels.len()));
    for (area, (comp, groups)) in areas.iter().zip(&panels) {
        let mut b = ChartBuilder::on(area);
        b.margin(15).x_label_area_size(40).y_label_area_size(55);
        if text {
            b.caption(format!("RMSE {comp}"), ("sans-serif", 20));
        }
        let n = groups.len() as f64;
        let mut chart = b.build_cartesian_2d(-0.5..n - 0.5, lo..hi)?;
        let mut mesh = chart.configure_mesh();
        let names: Vec<String> = groups.iter().map(|g| g.0.clone()).collect();
        let fmt = move |x: &f64| {
            let i = x.round();
            if (x - i).abs() < 1e-6 && i >= 0.0 && (i as usize) < names.len() {
                names[i as usize].clone()
            } else {
                String::new()
            }
        };
        if text {
            mesh.x_labels(groups.len() * 2 + 1).x_label_formatter(&fmt).y_desc("RMSE (m/s)").disable_x_mesh();
        } else {
            mesh.x_labels(0).y_labels(0);
        }
        mesh.draw()?;
        for (i, (_, vals)) in groups.iter().enumerate() {
            let c = color(i);
            let d = density(vals, lo, hi, 80);
            let x = i as f64;
            let mut outline: Vec<(f64, f64)> = d.iter().map(|(y, w)| (x + 0.4 * w, *y)).collect();
            outline.extend(d.iter().rev().map(|(y, w)| (x - 0.4 * w, *y)));
            chart.draw_series(std::iter::once(Polygon::new(outline, c.mix(0.5).filled())))?;
            let m = median(vals)?;
            chart.draw_series(std::iter::once(PathElement::new(vec![(x - 0.2, m), (x + 0.2, m)], BLACK.stroke_width(2))))?;
        }
    }
    root.present().with_context(|| format!("writing {}", out.display()))?;
    Ok(())
}

/// Blue-white-red map of one channel.
pub fn fieldmap(grid: &FieldGrid, channel: usize, out: &Path, scale: u32) -> Result<()> {
    let (h, w) = grid.hw();
    let plane = grid.channel(channel);
    let m = plane.iter().fold(0.0f64, |a, v| a.max(v.abs())).max(1e-12);
    let signed = plane.iter().any(|&v| v < 0.0);
    let (lo, hi) = if signed {
        (-m, m)
    } else {
        (plane.iter().copied().fold(f64::MAX, f64::min), plane.iter().copied().fold(f64::MIN, f64::max).max(f64::MIN_POSITIVE))
    };
    let root = BitMapBackend::new(out, (w as u32 * scale, h as u32 * scale)).into_drawing_area();
    root.fill(&WHITE)?;
    for i in 0..h {
        for j in 0..w {
            let t = if hi > lo { ((plane[i * w + j] - lo) / (hi - lo)).clamp(0.0, 1.0) } else { 0.5 };
            let c = diverging(t);
            let (x, y) = (j as i32 * scale as i32, i as i32 * scale as i32);
            root.draw(&Rectangle::new([(x, y), (x + scale as i32, y + scale as i32)], c.filled()))?;
        }
    }
    root.present().with_context(|| format!("writing {}", out.display()))?;
    Ok(())
}

fn diverging(t: f64) -> RGBColor {
    let lerp = |a: f64, b: f64, s: f64| (a + (b - a) * s).round() as u8;
    if t < 0.5 {
        let s = t / 0.5;
        RGBColor(lerp(33.0, 247.0, s), lerp(102.0, 247.0, s), lerp(172.0, 247.0, s))
    } else {
        let s = (t - 0.5) / 0.5;
        RGBColor(lerp(247.0, 178.0, s), lerp(247.0, 24.0, s), lerp(247.0, 43.0, s))
    }
}
