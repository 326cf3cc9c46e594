//! Standalone SVG line charts of a metrics file.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use log::warn;

use crate::error::{Error, Result};

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 400.0;
const MARGIN: f64 = 56.0;
const COLORS: [&str; 4] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd"];

pub struct Series {
    pub name: String,
    pub points: Vec<(f64, f64)>,
}

fn bounds(series: &[Series]) -> (f64, f64, f64, f64) {
    let pts = series.iter().flat_map(|s| s.points.iter());
    let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for &(x, y) in pts {
        x0 = x0.min(x);
        x1 = x1.max(x);
        y0 = y0.min(y);
        y1 = y1.max(y);
    }
    if !x0.is_finite() {
        return (0.0, 1.0, 0.0, 1.0);
    }
    if x1 - x0 < 1e-12 {
        x1 = x0 + 1.0;
    }
    if y1 - y0 < 1e-12 {
        y0 -= 0.5;
        y1 += 0.5;
    }
    (x0, x1, y0, y1)
}

/// Renders the series on shared axes with the y axis pointing up.
pub fn render_svg(title: &str, x_label: &str, y_label: &str, series: &[Series]) -> String {
    let (x0, x1, y0, y1) = bounds(series);
    let sx = |x: f64| MARGIN + (x - x0) / (x1 - x0) * (WIDTH - 2.0 * MARGIN);
    let sy = |y: f64| HEIGHT - MARGIN - (y - y0) / (y1 - y0) * (HEIGHT - 2.0 * MARGIN);
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(s, r#"<text x="{}" y="20" text-anchor="middle" font-size="14">{title}</text>"#, WIDTH / 2.0);
    let (left, bottom, right, top) = (MARGIN, HEIGHT - MARGIN, WIDTH - MARGIN, MARGIN);
    let _ = writeln!(
        s,
        r#"<g class="axes" stroke="black"><line x1="{left}" y1="{bottom}" x2="{right}" y2="{bottom}"/><line x1="{left}" y1="{bottom}" x2="{left}" y2="{top}"/></g>"#
    );
    let _ = writeln!(s, r#"<text x="{left}" y="{}" text-anchor="start">{x0}</text>"#, bottom + 16.0);
    let _ = writeln!(s, r#"<text x="{right}" y="{}" text-anchor="end">{x1}</text>"#, bottom + 16.0);
    let _ = writeln!(s, r#"<text x="{}" y="{bottom}" text-anchor="end">{y0:.3}</text>"#, left - 4.0);
    let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="end">{y1:.3}</text>"#, left - 4.0, top + 4.0);
    let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle">{x_label}</text>"#, WIDTH / 2.0, HEIGHT - 12.0);
    let _ = writeln!(
        s,
        r#"<text x="14" y="{}" text-anchor="middle" transform="rotate(-90 14 {})">{y_label}</text>"#,
        HEIGHT / 2.0,
        HEIGHT / 2.0
    );
    for (i, ser) in series.iter().enumerate() {
        let color = COLORS[i % COLORS.len()];
        if !ser.points.is_empty() {
            let pts: Vec<String> = ser.points.iter().map(|&(x, y)| format!("{:.2},{:.2}", sx(x), sy(y))).collect();
            let _ = writeln!(
                s,
                r#"<polyline class="series" data-name="{}" fill="none" stroke="{color}" stroke-width="1.5" points="{}"/>"#,
                ser.name,
                pts.join(" ")
            );
        }
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{}" fill="{color}" text-anchor="end">{}</text>"#,
            right,
            top + 14.0 * i as f64,
            ser.name
        );
    }
    s.push_str("</svg>\n");
    s
}

/// Parsed x/y columns of the metrics file plus skip accounting.
#[derive(Debug, Default)]
pub struct PlotReport {
    pub files: Vec<PathBuf>,
    pub rows: usize,
    pub skipped: usize,
}

fn column(headers: &csv::StringRecord, name: &str) -> Result<usize> {
    headers
        .iter()
        .position(|h| h == name)
        .ok_or_else(|| Error::Input(format!("metrics file has no `{name}` column")))
}

/// Writes `return.svg` and `active_codes.svg` into `out_dir`. Malformed rows
/// are skipped with a warning; more than 1% skipped is an error.
pub fn emit_plots(metrics: &Path, out_dir: &Path) -> Result<PlotReport> {
    let mut rdr = csv::ReaderBuilder::new().flexible(true).from_path(metrics)?;
    let headers = rdr.headers()?.clone();
    let mut ret = Series { name: "episodic_return".into(), points: vec![] };
    let mut eval = Series { name: "eval_return_mean".into(), points: vec![] };
    let mut codes = Series { name: "active_code_fraction".into(), points: vec![] };
    let mut report = PlotReport::default();
    if !headers.is_empty() {
        let (ix, ir, ie, ic) = (
            column(&headers, "env_step")?,
            column(&headers, "episodic_return")?,
            column(&headers, "eval_return_mean")?,
            column(&headers, "active_code_fraction")?,
        );
        for (line, rec) in rdr.records().enumerate() {
            report.rows += 1;
            let parsed = rec.ok().filter(|r| r.len() == headers.len()).and_then(|r| {
                let num = |i: usize| r.get(i).and_then(|v| v.parse::<f64>().ok()).filter(|v| v.is_finite());
                let eval = match r.get(ie) {
                    Some("") => Some(None),
                    _ => num(ie).map(Some),
                };
                Some((num(ix)?, num(ir)?, eval?, num(ic)?))
            });
            match parsed {
                Some((x, r, e, c)) => {
                    ret.points.push((x, r));
                    if let Some(e) = e {
                        eval.points.push((x, e));
                    }
                    codes.points.push((x, c));
                }
                None => {
                    warn!("skipping malformed metrics row {}", line + 2);
                    report.skipped += 1;
                }
            }
        }
    }
    std::fs::create_dir_all(out_dir)?;
    let files = [
        (out_dir.join("return.svg"), render_svg("Return", "env_step", "return", &[ret, eval])),
        (
            out_dir.join("active_codes.svg"),
            render_svg("Active codebook fraction", "env_step", "fraction", &[codes]),
        ),
    ];
    for (path, svg) in files {
        std::fs::write(&path, svg)?;
        report.files.push(path);
    }
    if report.skipped * 100 > report.rows {
        return Err(Error::Input(format!(
            "{} of {} metrics rows were malformed",
            report.skipped, report.rows
        )));
    }
    Ok(report)
}
