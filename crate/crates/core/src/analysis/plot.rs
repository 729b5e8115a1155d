//! Metrics CSV parsing and SVG line plots.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};

pub const METRICS_HEADER: &str = "step,wall_clock_s,train_loss,val_mse,val_featdist,lr";

/// Columns of a metrics CSV, one vector per header field.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricsTable {
    pub columns: Vec<String>,
    pub rows: Vec<Vec<f64>>,
}

impl MetricsTable {
    pub fn parse(text: &str) -> Result<Self> {
        let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
        let (_, header) = lines.next().ok_or(Error::Config {
            line: 1,
            detail: "empty CSV".into(),
        })?;
        let columns: Vec<String> = header.split(',').map(|s| s.trim().to_string()).collect();
        let mut rows = Vec::new();
        for (i, line) in lines {
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() != columns.len() {
                return Err(Error::Config {
                    line: i + 1,
                    detail: format!("{} fields, header has {}", fields.len(), columns.len()),
                });
            }
            let row = fields
                .iter()
                .map(|f| {
                    let f = f.trim();
                    if f.is_empty() {
                        Ok(f64::NAN)
                    } else {
                        f.parse::<f64>().map_err(|_| Error::Config {
                            line: i + 1,
                            detail: format!("not a number: {f:?}"),
                        })
                    }
                })
                .collect::<Result<Vec<f64>>>()?;
            rows.push(row);
        }
        Ok(Self { columns, rows })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text).map_err(|e| match e {
            Error::Config { line, detail } => Error::Config {
                line,
                detail: format!("{}: {detail}", path.display()),
            },
            other => other,
        })
    }

    pub fn column(&self, name: &str) -> Result<Vec<f64>> {
        let i = self
            .columns
            .iter()
            .position(|c| c == name)
            .ok_or_else(|| Error::invalid(format!("missing column {name}")))?;
        Ok(self.rows.iter().map(|r| r[i]).collect())
    }

    /// `(x, y)` points with finite coordinates.
    pub fn series(&self, x: &str, y: &str) -> Result<Vec<(f64, f64)>> {
        let xs = self.column(x)?;
        let ys = self.column(y)?;
        Ok(xs.into_iter().zip(ys).filter(|(a, b)| a.is_finite() && b.is_finite()).collect())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Series {
    pub label: String,
    pub points: Vec<(f64, f64)>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PlotSpec {
    pub title: String,
    pub x_label: String,
    pub y_label: String,
    pub log_x: bool,
}

/// Axis range: data min/max padded by 5% of the span on both sides.
pub fn padded_bounds(values: impl IntoIterator<Item = f64>) -> Option<(f64, f64)> {
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for v in values {
        lo = lo.min(v);
        hi = hi.max(v);
    }
    if !lo.is_finite() {
        return None;
    }
    let span = hi - lo;
    let pad = if span > 0.0 { 0.05 * span } else { 0.05 * lo.abs().max(1.0) };
    Some((lo - pad, hi + pad))
}

const PALETTE: [&str; 8] = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#17becf"];
const W: f64 = 640.0;
const H: f64 = 400.0;
const MARGIN: (f64, f64, f64, f64) = (60.0, 20.0, 40.0, 50.0); // left, right, top, bottom

/// Renders series as an SVG line chart with axes and a legend.
pub fn render_svg(spec: &PlotSpec, series: &[Series]) -> Result<String> {
    let tx = |x: f64| if spec.log_x { x.max(f64::MIN_POSITIVE).log10() } else { x };
    let all: Vec<(f64, f64)> = series
        .iter()
        .flat_map(|s| s.points.iter().copied())
        .filter(|(x, _)| !spec.log_x || *x > 0.0)
        .collect();
    let (x0, x1) = padded_bounds(all.iter().map(|p| tx(p.0))).ok_or_else(|| Error::invalid("nothing to plot"))?;
    let (y0, y1) = padded_bounds(all.iter().map(|p| p.1)).expect("same points");
    let (l, r, t, b) = MARGIN;
    let px = |x: f64| l + (tx(x) - x0) / (x1 - x0) * (W - l - r);
    let py = |y: f64| H - b - (y - y0) / (y1 - y0) * (H - t - b);
    let mut s = String::new();
    let _ = writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}">"#);
    let _ = writeln!(s, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
    let _ = writeln!(s, r#"<text x="{}" y="20" text-anchor="middle" font-size="14">{}</text>"#, W / 2.0, escape(&spec.title));
    let _ = writeln!(
        s,
        r#"<path d="M{l} {t} L{l} {yb} L{xr} {yb}" stroke="black" fill="none"/>"#,
        yb = H - b,
        xr = W - r
    );
    for i in 0..=4 {
        let f = i as f64 / 4.0;
        let xv = x0 + f * (x1 - x0);
        let yv = y0 + f * (y1 - y0);
        let xs = l + f * (W - l - r);
        let ys = H - b - f * (H - t - b);
        let xl = if spec.log_x { 10f64.powf(xv) } else { xv };
        let _ = writeln!(s, r#"<text x="{xs:.1}" y="{:.1}" text-anchor="middle" font-size="10">{}</text>"#, H - b + 14.0, fmt_tick(xl));
        let _ = writeln!(s, r#"<text x="{:.1}" y="{ys:.1}" text-anchor="end" font-size="10">{}</text>"#, l - 4.0, fmt_tick(yv));
    }
    let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle" font-size="12">{}</text>"#, W / 2.0, H - 10.0, escape(&spec.x_label));
    let _ = writeln!(
        s,
        r#"<text x="14" y="{}" text-anchor="middle" font-size="12" transform="rotate(-90 14 {})">{}</text>"#,
        H / 2.0,
        H / 2.0,
        escape(&spec.y_label)
    );
    for (i, ser) in series.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let pts: Vec<(f64, f64)> = ser.points.iter().copied().filter(|(x, _)| !spec.log_x || *x > 0.0).collect();
        if pts.len() == 1 {
            let _ = writeln!(s, r#"<circle cx="{:.2}" cy="{:.2}" r="3" fill="{color}"/>"#, px(pts[0].0), py(pts[0].1));
        } else if !pts.is_empty() {
            let d: Vec<String> = pts
                .iter()
                .enumerate()
                .map(|(k, &(x, y))| format!("{}{:.2} {:.2}", if k == 0 { "M" } else { "L" }, px(x), py(y)))
                .collect();
            let _ = writeln!(s, r#"<path d="{}" stroke="{color}" fill="none" stroke-width="1.5"/>"#, d.join(" "));
        }
        let ly = t + 14.0 * i as f64 + 6.0;
        let _ = writeln!(s, r#"<rect x="{:.1}" y="{:.1}" width="10" height="3" fill="{color}"/>"#, W - r - 150.0, ly - 3.0);
        let _ = writeln!(s, r#"<text x="{:.1}" y="{ly:.1}" font-size="10">{}</text>"#, W - r - 135.0, escape(&ser.label));
    }
    s.push_str("</svg>\n");
    Ok(s)
}

fn fmt_tick(v: f64) -> String {
    if v != 0.0 && (v.abs() >= 1e4 || v.abs() < 1e-2) {
        format!("{v:.2e}")
    } else {
        format!("{v:.3}")
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Plots one metric column from several CSV files against another.
pub fn plot_curves(paths: &[&Path], labels: &[String], x: &str, y: &str, log_x: bool, out: &Path) -> Result<()> {
    if paths.len() != labels.len() {
        return Err(Error::invalid("one label per CSV is required"));
    }
    let series = paths
        .iter()
        .zip(labels)
        .map(|(p, label)| {
            Ok(Series {
                label: label.clone(),
                points: MetricsTable::load(p)?.series(x, y)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let spec = PlotSpec {
        title: format!("{y} vs {x}"),
        x_label: x.to_string(),
        y_label: y.to_string(),
        log_x,
    };
    let svg = render_svg(&spec, &series)?;
    std::fs::write(out, svg).map_err(|e| Error::io(out, e))
}
