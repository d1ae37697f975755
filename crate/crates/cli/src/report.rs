//! Summary charts from localization and render report files.

use std::path::{Path, PathBuf};

use mace_core::localize::LocalizationReport;
use mace_core::render::RenderReport;
use mace_core::Error;
use plotters::prelude::*;

use crate::Failure;

const MB: f64 = 1024.0 * 1024.0;

const FONT_CANDIDATES: &[&str] = &[
    "/usr/share/fonts/truetype/dejavu/DejaVuSans.ttf",
    "/usr/share/fonts/TTF/DejaVuSans.ttf",
    "/usr/share/fonts/dejavu/DejaVuSans.ttf",
    "/usr/share/fonts/truetype/liberation/LiberationSans-Regular.ttf",
    "/Library/Fonts/Arial.ttf",
    "C:\\Windows\\Fonts\\arial.ttf",
];

/// Registers a system TrueType font for chart text (`MACE_FONT` overrides
/// the search). Without one, charts are drawn unlabeled.
fn register_system_font() -> bool {
    let env = std::env::var("MACE_FONT").ok();
    let candidates = env.iter().map(String::as_str).chain(FONT_CANDIDATES.iter().copied());
    for path in candidates {
        if let Ok(bytes) = std::fs::read(path) {
            let bytes: &'static [u8] = Box::leak(bytes.into_boxed_slice());
            if plotters::style::register_font("sans-serif", FontStyle::Normal, bytes).is_ok() {
                return true;
            }
        }
    }
    false
}

#[derive(Default)]
struct Series {
    /// (activated MB, median translation cm)
    localization: Vec<(f64, f64)>,
    /// (seconds per view, PSNR dB)
    rendering: Vec<(f64, f64)>,
}

fn parse(paths: &[PathBuf]) -> Result<Series, Failure> {
    let mut s = Series::default();
    for p in paths {
        if !p.exists() {
            return Err(Error::MissingFile(p.clone()).into());
        }
        let text = std::fs::read_to_string(p)?;
        let value: serde_json::Value = serde_json::from_str(&text).map_err(Error::from)?;
        if value.get("map_size").is_some() {
            let r: LocalizationReport = serde_json::from_value(value).map_err(Error::from)?;
            if let Some(t) = r.median_translation_cm {
                s.localization.push((r.map_size.activated_bytes as f64 / MB, t));
            }
        } else if value.get("mean_psnr").is_some() {
            let r: RenderReport = serde_json::from_value(value).map_err(Error::from)?;
            s.rendering.push((r.mean_seconds, r.mean_psnr));
        } else {
            return Err(Failure {
                code: 3,
                message: format!("{}: not a localization or render report", p.display()),
            });
        }
    }
    Ok(s)
}

fn range(points: &[(f64, f64)], axis: fn(&(f64, f64)) -> f64) -> std::ops::Range<f64> {
    let lo = points.iter().map(axis).fold(f64::INFINITY, f64::min);
    let hi = points.iter().map(axis).fold(f64::NEG_INFINITY, f64::max);
    if !lo.is_finite() {
        return 0.0..1.0;
    }
    let pad = ((hi - lo) * 0.1).max(hi.abs() * 0.05).max(1e-3);
    (lo - pad).max(0.0)..hi + pad
}

fn panel<DB: DrawingBackend>(
    area: &DrawingArea<DB, plotters::coord::Shift>,
    title: &str,
    x_label: &str,
    y_label: &str,
    points: &[(f64, f64)],
    labeled: bool,
) -> Result<(), String> {
    let mut builder = ChartBuilder::on(area);
    if labeled {
        builder.caption(title, ("sans-serif", 18));
    }
    let mut chart = builder
        .margin(12)
        .x_label_area_size(36)
        .y_label_area_size(48)
        .build_cartesian_2d(range(points, |p| p.0), range(points, |p| p.1))
        .map_err(|e| e.to_string())?;
    let mut mesh = chart.configure_mesh();
    if labeled {
        mesh.x_desc(x_label).y_desc(y_label);
    } else {
        mesh.x_labels(0).y_labels(0);
    }
    mesh.draw().map_err(|e| e.to_string())?;
    let mut sorted = points.to_vec();
    sorted.sort_by(|a, b| a.0.total_cmp(&b.0));
    chart
        .draw_series(LineSeries::new(sorted, BLUE.stroke_width(1)))
        .map_err(|e| e.to_string())?;
    chart
        .draw_series(points.iter().map(|&p| Circle::new(p, 4, BLUE.filled())))
        .map_err(|e| e.to_string())?;
    Ok(())
}

pub fn run(inputs: &[PathBuf], plot: &Path) -> Result<(), Failure> {
    let series = parse(inputs)?;
    if let Some(dir) = plot.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    let labeled = register_system_font();
    let draw = || -> Result<(), String> {
        let root = BitMapBackend::new(plot, (1000, 420)).into_drawing_area();
        root.fill(&WHITE).map_err(|e| e.to_string())?;
        let (left, right) = root.split_horizontally(500);
        panel(&left, "Map size vs. error", "activated map size (MB)", "median translation (cm)", &series.localization, labeled)?;
        panel(&right, "Render quality vs. time", "seconds per view", "PSNR (dB)", &series.rendering, labeled)?;
        root.present().map_err(|e| e.to_string())
    };
    draw().map_err(|message| Failure {
        code: 3,
        message: format!("plot: {message}"),
    })?;
    println!(
        "{} localization and {} render points -> {}",
        series.localization.len(),
        series.rendering.len(),
        plot.display()
    );
    Ok(())
}
