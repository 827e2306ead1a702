//! Report rendering: percentage tables, CSV rows and small static SVG charts.

use std::fmt::Write as _;
use std::path::Path;

use serde::Serialize;

use crate::evaluation::MetricReport;
use crate::Result;

/// `mean ± std` in percent with two decimals.
pub fn percent(mean: f64, std: f64) -> String {
    format!("{:.2} ± {:.2}", 100.0 * mean, 100.0 * std)
}

/// Fixed-width text table with OA / AA / Kappa columns in percent.
pub fn metric_table(rows: &[(String, &MetricReport)]) -> String {
    let width = rows.iter().map(|(n, _)| n.len()).max().unwrap_or(0).max(8);
    let mut out = format!(
        "{:<width$}  {:>16}  {:>16}  {:>16}  {:>5}\n",
        "strategy", "OA (%)", "AA (%)", "Kappa (%)", "seeds"
    );
    for (name, r) in rows {
        let _ = writeln!(
            out,
            "{:<width$}  {:>16}  {:>16}  {:>16}  {:>5}",
            name,
            percent(r.oa, r.oa_std),
            percent(r.aa, r.aa_std),
            percent(r.kappa, r.kappa_std),
            r.seeds
        );
    }
    out
}

pub fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    std::fs::write(path, serde_json::to_vec_pretty(value)?)?;
    Ok(())
}

pub fn write_csv<R: Serialize>(path: &Path, rows: &[R]) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    for r in rows {
        w.serialize(r).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

fn csv_err(e: csv::Error) -> crate::Error {
    crate::Error::Format(format!("csv: {e}"))
}

/// One CSV row of aggregated metrics.
#[derive(Debug, Clone, PartialEq, Serialize, serde::Deserialize)]
pub struct MetricRow {
    pub name: String,
    pub seeds: usize,
    pub oa: f64,
    pub oa_std: f64,
    pub aa: f64,
    pub aa_std: f64,
    pub kappa: f64,
    pub kappa_std: f64,
}

impl MetricRow {
    pub fn new(name: impl Into<String>, r: &MetricReport) -> Self {
        Self {
            name: name.into(),
            seeds: r.seeds,
            oa: r.oa,
            oa_std: r.oa_std,
            aa: r.aa,
            aa_std: r.aa_std,
            kappa: r.kappa,
            kappa_std: r.kappa_std,
        }
    }
}

const W: f64 = 640.0;
const H: f64 = 400.0;
const LEFT: f64 = 70.0;
const RIGHT: f64 = 20.0;
const TOP: f64 = 40.0;
const BOTTOM: f64 = 60.0;
const COLORS: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b"];

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

fn frame(title: &str, x_label: &str, y_label: &str) -> String {
    let mut s = format!(
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}" font-family="sans-serif" font-size="12">
<rect width="{W}" height="{H}" fill="white"/>
<text x="{}" y="22" text-anchor="middle" font-size="15">{}</text>
<text x="{}" y="{}" text-anchor="middle">{}</text>
<text x="16" y="{}" text-anchor="middle" transform="rotate(-90 16 {})">{}</text>
"#,
        W / 2.0,
        escape(title),
        (LEFT + W - RIGHT) / 2.0,
        H - 14.0,
        escape(x_label),
        (TOP + H - BOTTOM) / 2.0,
        (TOP + H - BOTTOM) / 2.0,
        escape(y_label),
    );
    let _ = writeln!(
        s,
        r#"<line x1="{LEFT}" y1="{}" x2="{}" y2="{}" stroke="black"/><line x1="{LEFT}" y1="{TOP}" x2="{LEFT}" y2="{}" stroke="black"/>"#,
        H - BOTTOM,
        W - RIGHT,
        H - BOTTOM,
        H - BOTTOM
    );
    s
}

fn range(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let (lo, hi) = values
        .filter(|v| v.is_finite())
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)));
    if !lo.is_finite() {
        return (0.0, 1.0);
    }
    if hi - lo < 1e-12 {
        return (lo - 0.5, hi + 0.5);
    }
    let pad = 0.05 * (hi - lo);
    (lo - pad, hi + pad)
}

fn y_ticks(s: &mut String, lo: f64, hi: f64) {
    for i in 0..=4 {
        let v = lo + (hi - lo) * i as f64 / 4.0;
        let y = TOP + (H - TOP - BOTTOM) * (1.0 - i as f64 / 4.0);
        let _ = writeln!(
            s,
            r#"<line x1="{}" y1="{y:.1}" x2="{LEFT}" y2="{y:.1}" stroke="black"/><text x="{}" y="{:.1}" text-anchor="end">{}</text>"#,
            LEFT - 4.0,
            LEFT - 6.0,
            y + 4.0,
            format_tick(v)
        );
    }
}

fn format_tick(v: f64) -> String {
    if v.abs() >= 100.0 {
        format!("{v:.0}")
    } else if v.abs() >= 1.0 {
        format!("{v:.2}")
    } else {
        format!("{v:.3}")
    }
}

/// Vertical bars with optional ± error whiskers.
pub fn bar_chart(title: &str, y_label: &str, bars: &[(String, f64, f64)]) -> String {
    let (lo, hi) = range(bars.iter().flat_map(|b| [b.1 - b.2, b.1 + b.2, 0.0]));
    let mut s = frame(title, "", y_label);
    y_ticks(&mut s, lo, hi);
    let plot_w = W - LEFT - RIGHT;
    let slot = plot_w / bars.len().max(1) as f64;
    let to_y = |v: f64| TOP + (H - TOP - BOTTOM) * (1.0 - (v - lo) / (hi - lo));
    for (i, (name, mean, err)) in bars.iter().enumerate() {
        let x = LEFT + slot * i as f64 + slot * 0.2;
        let (y0, y1) = (to_y(0.0_f64.max(lo)), to_y(*mean));
        let _ = writeln!(
            s,
            r#"<rect x="{x:.1}" y="{:.1}" width="{:.1}" height="{:.1}" fill="{}"/>"#,
            y0.min(y1),
            slot * 0.6,
            (y0 - y1).abs(),
            COLORS[i % COLORS.len()]
        );
        let cx = x + slot * 0.3;
        if *err > 0.0 {
            let _ = writeln!(
                s,
                r#"<line x1="{cx:.1}" y1="{:.1}" x2="{cx:.1}" y2="{:.1}" stroke="black"/>"#,
                to_y(mean - err),
                to_y(mean + err)
            );
        }
        let _ = writeln!(
            s,
            r#"<text x="{cx:.1}" y="{:.1}" text-anchor="middle">{}</text>"#,
            H - BOTTOM + 16.0,
            escape(name)
        );
    }
    s.push_str("</svg>\n");
    s
}

/// Polylines, one per named series of `(x, y)` points.
pub fn line_chart(title: &str, x_label: &str, y_label: &str, series: &[(String, Vec<(f64, f64)>)]) -> String {
    let (xlo, xhi) = range(series.iter().flat_map(|s| s.1.iter().map(|p| p.0)));
    let (ylo, yhi) = range(series.iter().flat_map(|s| s.1.iter().map(|p| p.1)));
    let mut s = frame(title, x_label, y_label);
    y_ticks(&mut s, ylo, yhi);
    let to_x = |v: f64| LEFT + (W - LEFT - RIGHT) * (v - xlo) / (xhi - xlo);
    let to_y = |v: f64| TOP + (H - TOP - BOTTOM) * (1.0 - (v - ylo) / (yhi - ylo));
    for i in 0..=4 {
        let v = xlo + (xhi - xlo) * i as f64 / 4.0;
        let _ = writeln!(
            s,
            r#"<text x="{:.1}" y="{}" text-anchor="middle">{}</text>"#,
            to_x(v),
            H - BOTTOM + 16.0,
            format_tick(v)
        );
    }
    for (i, (name, pts)) in series.iter().enumerate() {
        let color = COLORS[i % COLORS.len()];
        let path: Vec<String> = pts
            .iter()
            .filter(|p| p.0.is_finite() && p.1.is_finite())
            .map(|&(x, y)| format!("{:.1},{:.1}", to_x(x), to_y(y)))
            .collect();
        let _ = writeln!(
            s,
            r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="1.5"/>"#,
            path.join(" ")
        );
        if pts.len() <= 20 {
            for &(x, y) in pts {
                let _ = writeln!(s, r#"<circle cx="{:.1}" cy="{:.1}" r="3" fill="{color}"/>"#, to_x(x), to_y(y));
            }
        }
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{}" fill="{color}">{}</text>"#,
            W - RIGHT - 120.0,
            TOP + 14.0 * (i as f64 + 1.0),
            escape(name)
        );
    }
    s.push_str("</svg>\n");
    s
}
