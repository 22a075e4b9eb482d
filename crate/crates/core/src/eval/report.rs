//! Report CSV and SVG plot emission.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use plotters::prelude::*;

use super::compare::{EvalReport, PredictionSet};
use super::metrics::trend_line;
use crate::error::{PrgpError, Result};
use crate::inference::{smooth_trace, TraceRow};

fn cell(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// Writes `model,dimension,n,rmse,mape,mask_count` (plus `rmse_sigma` when the
/// report carries it). Absent cells have empty `n`, `rmse` and `mape`.
pub fn write_report_csv<W: Write>(report: &EvalReport, writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let mut header = vec!["model", "dimension", "n", "rmse", "mape", "mask_count"];
    if report.sigma_normalized {
        header.push("rmse_sigma");
    }
    w.write_record(&header)?;
    for r in &report.rows {
        let n = if r.rmse.is_some() { r.n.to_string() } else { String::new() };
        let mut rec = vec![r.model.clone(), r.dimension.clone(), n, cell(r.rmse), cell(r.mape), r.mask_count.to_string()];
        if report.sigma_normalized {
            rec.push(cell(r.rmse_sigma));
        }
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

pub fn emit_report(report: &EvalReport, path: &Path) -> Result<()> {
    let f = BufWriter::new(File::create(path)?);
    write_report_csv(report, f)
}

/// Keeps file names portable.
pub fn file_stem(part: &str) -> String {
    part.chars()
        .map(|c| if c.is_ascii_alphanumeric() || matches!(c, '-' | '+' | '.') { c } else { '_' })
        .collect()
}

fn plot_err<E: std::fmt::Display>(e: E) -> PrgpError {
    PrgpError::Plot(e.to_string())
}

fn padded(lo: f64, hi: f64) -> (f64, f64) {
    if !(hi > lo) {
        let pad = lo.abs().max(1.0) * 0.05;
        return (lo - pad, hi + pad);
    }
    let pad = (hi - lo) * 0.05;
    (lo - pad, hi + pad)
}

fn min_max(v: impl Iterator<Item = f64>) -> (f64, f64) {
    v.filter(|x| x.is_finite())
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), x| (a.min(x), b.max(x)))
}

/// Predicted vs. ground truth with the least-squares trend line.
pub fn scatter_plot(set: &PredictionSet, path: &Path) -> Result<()> {
    let root = SVGBackend::new(path, (640, 560)).into_drawing_area();
    root.fill(&WHITE).map_err(plot_err)?;
    let (lo, hi) = min_max(set.truth.iter().chain(&set.predicted).copied());
    let (lo, hi) = padded(lo, hi);
    let mut chart = ChartBuilder::on(&root)
        .caption(format!("{} {}", set.model, set.dimension), ("sans-serif", 20))
        .margin(12)
        .x_label_area_size(40)
        .y_label_area_size(60)
        .build_cartesian_2d(lo..hi, lo..hi)
        .map_err(plot_err)?;
    chart
        .configure_mesh()
        .x_desc("ground truth")
        .y_desc("estimate")
        .draw()
        .map_err(plot_err)?;
    chart
        .draw_series(
            set.truth
                .iter()
                .zip(&set.predicted)
                .map(|(x, y)| Circle::new((*x, *y), 2, BLUE.mix(0.5).filled())),
        )
        .map_err(plot_err)?;
    if let Some((slope, intercept)) = trend_line(&set.truth, &set.predicted) {
        chart
            .draw_series(LineSeries::new([(lo, slope * lo + intercept), (hi, slope * hi + intercept)], RED.stroke_width(2)))
            .map_err(plot_err)?
            .label(format!("y = {slope:.4}x + {intercept:.4}"))
            .legend(|(x, y)| PathElement::new([(x, y), (x + 20, y)], RED));
        chart
            .configure_series_labels()
            .background_style(WHITE.mix(0.8))
            .border_style(BLACK)
            .position(SeriesLabelPosition::UpperLeft)
            .draw()
            .map_err(plot_err)?;
    }
    root.present().map_err(plot_err)?;
    Ok(())
}

/// Negative ELBO per iteration with its moving average.
pub fn elbo_plot(title: &str, trace: &[TraceRow], window: usize, path: &Path) -> Result<()> {
    if trace.is_empty() {
        return Err(PrgpError::EmptyData("empty training trace".into()));
    }
    let raw: Vec<f64> = trace.iter().map(|r| r.negative_elbo).collect();
    let smooth = smooth_trace(&raw, window);
    let (lo, hi) = min_max(raw.iter().copied());
    let (lo, hi) = padded(lo, hi);
    let n = trace.last().map(|r| r.iteration).unwrap_or(1) as f64;
    let root = SVGBackend::new(path, (800, 480)).into_drawing_area();
    root.fill(&WHITE).map_err(plot_err)?;
    let mut chart = ChartBuilder::on(&root)
        .caption(title, ("sans-serif", 20))
        .margin(12)
        .x_label_area_size(40)
        .y_label_area_size(80)
        .build_cartesian_2d(0.0..n.max(1.0), lo..hi)
        .map_err(plot_err)?;
    chart
        .configure_mesh()
        .x_desc("iteration")
        .y_desc("negative ELBO")
        .draw()
        .map_err(plot_err)?;
    chart
        .draw_series(LineSeries::new(
            trace.iter().zip(&raw).map(|(r, v)| (r.iteration as f64, *v)),
            BLUE.mix(0.35),
        ))
        .map_err(plot_err)?;
    chart
        .draw_series(LineSeries::new(
            trace.iter().zip(&smooth).map(|(r, v)| (r.iteration as f64, *v)),
            RED.stroke_width(2),
        ))
        .map_err(plot_err)?;
    root.present().map_err(plot_err)?;
    Ok(())
}

/// One bar per model for each dimension, for the chosen metric.
pub fn metric_bar_chart(report: &EvalReport, metric: &str, path: &Path) -> Result<()> {
    let value = |r: &super::compare::ReportRow| match metric {
        "rmse" => r.rmse,
        _ => r.mape,
    };
    let mut models: Vec<&str> = Vec::new();
    let mut dims: Vec<&str> = Vec::new();
    for r in &report.rows {
        if !models.contains(&r.model.as_str()) {
            models.push(&r.model);
        }
        if !dims.contains(&r.dimension.as_str()) {
            dims.push(&r.dimension);
        }
    }
    let top = report.rows.iter().filter_map(value).filter(|v| v.is_finite()).fold(0.0, f64::max);
    let top = if top > 0.0 { top * 1.1 } else { 1.0 };
    let root = SVGBackend::new(path, (160 + 120 * dims.len() as u32, 480)).into_drawing_area();
    root.fill(&WHITE).map_err(plot_err)?;
    let mut chart = ChartBuilder::on(&root)
        .caption(metric.to_uppercase(), ("sans-serif", 20))
        .margin(12)
        .x_label_area_size(40)
        .y_label_area_size(60)
        .build_cartesian_2d(0.0..dims.len().max(1) as f64, 0.0..top)
        .map_err(plot_err)?;
    let dim_names = dims.clone();
    chart
        .configure_mesh()
        .disable_x_mesh()
        .x_labels(dims.len().max(1) * 2 + 1)
        .x_label_formatter(&|x| {
            let i = x.floor() as usize;
            if (x - i as f64 - 0.5).abs() < 1e-6 {
                dim_names.get(i).map(|s| s.to_string()).unwrap_or_default()
            } else {
                String::new()
            }
        })
        .draw()
        .map_err(plot_err)?;
    let width = 0.8 / models.len().max(1) as f64;
    for (k, model) in models.iter().enumerate() {
        let color = Palette99::pick(k).to_rgba();
        let bars: Vec<Rectangle<(f64, f64)>> = report
            .rows
            .iter()
            .filter(|r| r.model == *model)
            .filter_map(|r| {
                let v = value(r).filter(|v| v.is_finite())?;
                let i = dims.iter().position(|d| *d == r.dimension)? as f64;
                let x0 = i + 0.1 + width * k as f64;
                Some(Rectangle::new([(x0, 0.0), (x0 + width, v)], color.filled()))
            })
            .collect();
        chart
            .draw_series(bars)
            .map_err(plot_err)?
            .label(model.to_string())
            .legend(move |(x, y)| Rectangle::new([(x, y - 5), (x + 10, y + 5)], color.filled()));
    }
    chart
        .configure_series_labels()
        .background_style(WHITE.mix(0.8))
        .border_style(BLACK)
        .draw()
        .map_err(plot_err)?;
    root.present().map_err(plot_err)?;
    Ok(())
}

/// Writes every plot for one case into `dir` and returns the file paths:
/// `<case>_<model>_<dimension>.svg` scatters, `<case>_<model>_elbo.svg`
/// convergence curves and `<case>_all_rmse.svg` / `<case>_all_mape.svg`.
pub fn emit_plots(
    case: &str,
    report: &EvalReport,
    traces: &[(String, Vec<TraceRow>)],
    predictions: &[PredictionSet],
    dir: &Path,
) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir)?;
    let case = file_stem(case);
    let mut out = Vec::new();
    for set in predictions {
        let p = dir.join(format!("{case}_{}_{}.svg", file_stem(&set.model), file_stem(&set.dimension)));
        scatter_plot(set, &p)?;
        out.push(p);
    }
    for (model, trace) in traces {
        if trace.is_empty() {
            continue;
        }
        let p = dir.join(format!("{case}_{}_elbo.svg", file_stem(model)));
        elbo_plot(&format!("{model} convergence"), trace, 200.min(trace.len()), &p)?;
        out.push(p);
    }
    if !report.rows.is_empty() {
        for metric in ["rmse", "mape"] {
            let p = dir.join(format!("{case}_all_{metric}.svg"));
            metric_bar_chart(report, metric, &p)?;
            out.push(p);
        }
    }
    Ok(out)
}
