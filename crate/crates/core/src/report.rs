//! Result files: per-seed regret CSVs, the run summary JSON and SVG plots.
//!
//! CSV columns are fixed: `k, regret_inc, cum_regret, psi_<h>_<l>... ,
//! calls, wall_ns`, with `(h, l)` 1-based in row-major order. Floats use 17
//! significant digits and rows end in a bare LF.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::env::ValidationReport;
use crate::error::{Error, Result};
use crate::harness::{derived_params, DerivedParams, RegretSeries, RunResult, ViolationSummary};

pub const SUMMARY_VERSION: u32 = 1;
const MONOTONE_SLACK: f64 = 1e-9;

pub fn format_float(x: f64) -> String {
    format!("{x:.16e}")
}

pub fn csv_header(psi_shape: (usize, usize)) -> Vec<String> {
    let mut cols = vec!["k".to_string(), "regret_inc".into(), "cum_regret".into()];
    for h in 1..=psi_shape.0 {
        for l in 1..=psi_shape.1 {
            cols.push(format!("psi_{h}_{l}"));
        }
    }
    cols.push("calls".into());
    cols.push("wall_ns".into());
    cols
}

pub fn series_csv_name(run_id: &str, seed: u64) -> String {
    format!("regret_{run_id}_seed{seed}.csv")
}

pub fn write_series_csv(path: &Path, series: &RegretSeries) -> Result<()> {
    let mut writer = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_path(path)?;
    writer.write_record(csv_header(series.psi_shape))?;
    for e in &series.episodes {
        let mut row = vec![e.k.to_string(), format_float(e.regret_inc), format_float(e.cum_regret)];
        row.extend(e.psi.iter().map(usize::to_string));
        row.push(e.calls.to_string());
        row.push(e.wall_ns.to_string());
        writer.write_record(&row)?;
    }
    writer.flush()?;
    Ok(())
}

/// `(k, cum_regret)` pairs of a regret CSV, checked for a nondecreasing
/// cumulative column.
#[derive(Debug, Clone, PartialEq)]
pub struct CurveData {
    pub label: String,
    pub points: Vec<(f64, f64)>,
}

pub fn read_curve(path: &Path) -> Result<CurveData> {
    let mut reader = csv::Reader::from_path(path)
        .map_err(|e| Error::config(format!("cannot read {}: {e}", path.display())))?;
    let headers = reader.headers().map_err(|e| Error::config(format!("{}: {e}", path.display())))?.clone();
    let col = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::config(format!("{}: missing column {name:?}", path.display())))
    };
    let (k_col, cum_col) = (col("k")?, col("cum_regret")?);
    let mut points = Vec::new();
    for (idx, record) in reader.records().enumerate() {
        let row = idx + 1;
        let record = record.map_err(|e| Error::config(format!("{}: row {row}: {e}", path.display())))?;
        let parse = |c: usize| -> Result<f64> {
            record
                .get(c)
                .and_then(|v| v.parse::<f64>().ok())
                .filter(|v| v.is_finite())
                .ok_or_else(|| Error::config(format!("{}: row {row}: unparseable value", path.display())))
        };
        let (k, cum) = (parse(k_col)?, parse(cum_col)?);
        if let Some(&(_, prev)) = points.last() {
            if cum < prev - MONOTONE_SLACK {
                return Err(Error::config(format!(
                    "{}: row {row}: cum_regret decreases from {prev} to {cum}",
                    path.display()
                )));
            }
        }
        points.push((k, cum));
    }
    if points.is_empty() {
        return Err(Error::config(format!("{}: no data rows", path.display())));
    }
    let label = path
        .file_stem()
        .map(|s| s.to_string_lossy().trim_start_matches("regret_").to_string())
        .unwrap_or_default();
    Ok(CurveData { label, points })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedSummary {
    pub seed: u64,
    pub csv: String,
    pub cum_regret: f64,
    pub regret_per_episode: f64,
    pub final_psi: Vec<usize>,
    pub max_calls: usize,
    pub level_histogram: Vec<usize>,
    pub violations: ViolationSummary,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub summary_version: u32,
    pub run_id: String,
    pub algorithm: String,
    pub episodes: usize,
    pub master_seed: u64,
    pub derived: DerivedParams,
    pub eps_mis_realized: f64,
    pub validation: ValidationReport,
    pub mean_cum_regret: f64,
    pub mean_regret_per_episode: f64,
    pub total_violations: usize,
    pub seeds: Vec<SeedSummary>,
    pub config: RunConfig,
}

pub fn summarize(result: &RunResult) -> Result<RunSummary> {
    let config = &result.config;
    let k = config.episodes;
    let seeds: Vec<SeedSummary> = result
        .runs
        .iter()
        .map(|r| {
            let last = r.series.episodes.last();
            let cum = last.map_or(0.0, |e| e.cum_regret);
            SeedSummary {
                seed: r.seed,
                csv: series_csv_name(&config.run_id, r.seed),
                cum_regret: cum,
                regret_per_episode: cum / k as f64,
                final_psi: last.map(|e| e.psi.clone()).unwrap_or_default(),
                max_calls: r.series.episodes.iter().map(|e| e.calls).max().unwrap_or(0),
                level_histogram: r.level_histogram.clone(),
                violations: r.violations.clone(),
            }
        })
        .collect();
    let mean = seeds.iter().map(|s| s.cum_regret).sum::<f64>() / seeds.len() as f64;
    Ok(RunSummary {
        summary_version: SUMMARY_VERSION,
        run_id: config.run_id.clone(),
        algorithm: config.algorithm.name().to_string(),
        episodes: k,
        master_seed: config.master_seed,
        derived: derived_params(config, &result.spec)?,
        eps_mis_realized: result.validation.eps_mis_realized,
        validation: result.validation.clone(),
        mean_cum_regret: mean,
        mean_regret_per_episode: mean / k as f64,
        total_violations: seeds.iter().map(|s| s.violations.total).sum(),
        seeds,
        config: config.clone(),
    })
}

/// Writes every per-seed CSV, `summary_<run_id>.json` and the realized
/// environment as `spec_<run_id>.json`. Returns the written paths.
pub fn write_run_outputs(dir: &Path, result: &RunResult) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir)?;
    let mut written = Vec::new();
    let run_id = &result.config.run_id;
    for r in &result.runs {
        let path = dir.join(series_csv_name(run_id, r.seed));
        write_series_csv(&path, &r.series)?;
        written.push(path);
    }
    let summary = summarize(result)?;
    let path = dir.join(format!("summary_{run_id}.json"));
    fs::write(&path, serde_json::to_string_pretty(&summary)? + "\n")?;
    written.push(path);
    let path = dir.join(format!("spec_{run_id}.json"));
    result.spec.save(&path)?;
    written.push(path);
    Ok(written)
}

const PALETTE: [&str; 8] = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#17becf"];
const PANEL_W: f64 = 520.0;
const PANEL_H: f64 = 300.0;
const MARGIN_L: f64 = 70.0;
const MARGIN_T: f64 = 40.0;
const GAP: f64 = 80.0;

fn escape(text: &str) -> String {
    text.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

/// Tick label with at most 4 significant digits.
fn tick_label(v: f64) -> String {
    if v == 0.0 {
        "0".into()
    } else if v.abs() >= 1e4 || v.abs() < 1e-2 {
        format!("{v:.2e}")
    } else {
        let s = format!("{v:.3}");
        s.trim_end_matches('0').trim_end_matches('.').to_string()
    }
}

fn panel(out: &mut String, curves: &[Vec<(f64, f64)>], labels: &[String], top: f64, title: &str, y_name: &str) {
    let x_max = curves.iter().flatten().map(|p| p.0).fold(1.0f64, f64::max);
    let y_max = curves.iter().flatten().map(|p| p.1).fold(0.0f64, f64::max);
    let y_max = if y_max > 0.0 { y_max * 1.05 } else { 1.0 };
    let (x0, y0) = (MARGIN_L, top);
    let sx = |x: f64| x0 + x / x_max * PANEL_W;
    let sy = |y: f64| y0 + PANEL_H - y / y_max * PANEL_H;
    let _ = writeln!(out, r#"<text x="{:.1}" y="{:.1}" font-size="14" text-anchor="middle">{}</text>"#, x0 + PANEL_W / 2.0, y0 - 12.0, escape(title));
    let _ = writeln!(out, r##"<rect x="{x0:.1}" y="{y0:.1}" width="{PANEL_W:.1}" height="{PANEL_H:.1}" fill="none" stroke="#444"/>"##);
    for i in 0..=4 {
        let f = i as f64 / 4.0;
        let (xv, yv) = (f * x_max, f * y_max);
        let _ = writeln!(out, r##"<line x1="{:.1}" y1="{:.1}" x2="{:.1}" y2="{:.1}" stroke="#ddd"/>"##, x0, sy(yv), x0 + PANEL_W, sy(yv));
        let _ = writeln!(out, r#"<text x="{:.1}" y="{:.1}" font-size="11" text-anchor="end">{}</text>"#, x0 - 6.0, sy(yv) + 4.0, tick_label(yv));
        let _ = writeln!(out, r#"<text x="{:.1}" y="{:.1}" font-size="11" text-anchor="middle">{}</text>"#, sx(xv), y0 + PANEL_H + 16.0, tick_label(xv));
    }
    let _ = writeln!(out, r#"<text x="{:.1}" y="{:.1}" font-size="12" text-anchor="middle">episode k</text>"#, x0 + PANEL_W / 2.0, y0 + PANEL_H + 34.0);
    let _ = writeln!(out, r#"<text x="{:.1}" y="{:.1}" font-size="12" text-anchor="middle" transform="rotate(-90 {:.1} {:.1})">{}</text>"#, x0 - 50.0, y0 + PANEL_H / 2.0, x0 - 50.0, y0 + PANEL_H / 2.0, escape(y_name));
    for (i, pts) in curves.iter().enumerate() {
        let mut d = String::new();
        for (j, &(x, y)) in pts.iter().enumerate() {
            let _ = write!(d, "{}{:.2},{:.2}", if j == 0 { "M" } else { " L" }, sx(x), sy(y));
        }
        let _ = writeln!(out, r#"<path d="{d}" fill="none" stroke="{}" stroke-width="1.5"/>"#, PALETTE[i % PALETTE.len()]);
    }
    for (i, label) in labels.iter().enumerate() {
        let ly = y0 + 14.0 + 16.0 * i as f64;
        let lx = x0 + PANEL_W + 12.0;
        let _ = writeln!(out, r#"<line x1="{lx:.1}" y1="{:.1}" x2="{:.1}" y2="{:.1}" stroke="{}" stroke-width="2"/>"#, ly - 4.0, lx + 18.0, ly - 4.0, PALETTE[i % PALETTE.len()]);
        let _ = writeln!(out, r#"<text x="{:.1}" y="{ly:.1}" font-size="11">{}</text>"#, lx + 24.0, escape(label));
    }
}

/// Thins a curve to at most `max_points` for compact output, keeping both ends.
fn thin(points: &[(f64, f64)], max_points: usize) -> Vec<(f64, f64)> {
    if points.len() <= max_points {
        return points.to_vec();
    }
    let stride = points.len().div_ceil(max_points);
    let mut out: Vec<(f64, f64)> = points.iter().step_by(stride).copied().collect();
    if out.last() != points.last() {
        out.push(*points.last().expect("nonempty"));
    }
    out
}

/// Two stacked panels: cumulative regret and average regret `R(k) / k`.
pub fn render_svg(curves: &[CurveData]) -> String {
    let width = MARGIN_L + PANEL_W + 240.0;
    let height = MARGIN_T + 2.0 * PANEL_H + GAP + 50.0;
    let labels: Vec<String> = curves.iter().map(|c| c.label.clone()).collect();
    let cum: Vec<Vec<(f64, f64)>> = curves.iter().map(|c| thin(&c.points, 1000)).collect();
    let avg: Vec<Vec<(f64, f64)>> = cum
        .iter()
        .map(|pts| pts.iter().map(|&(k, r)| (k, if k > 0.0 { r / k } else { 0.0 })).collect())
        .collect();
    let mut out = String::new();
    let _ = writeln!(out, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width:.0}" height="{height:.0}" font-family="sans-serif">"#);
    let _ = writeln!(out, r#"<rect width="100%" height="100%" fill="white"/>"#);
    panel(&mut out, &cum, &labels, MARGIN_T, "Cumulative regret", "R(k)");
    panel(&mut out, &avg, &labels, MARGIN_T + PANEL_H + GAP, "Average regret", "R(k) / k");
    out.push_str("</svg>\n");
    out
}
