//! Report emission: `results.csv` with a fixed header, a markdown summary
//! table, and hand-rolled SVG line plots (per-day prediction vs ground
//! truth, and relative-RMSE-vs-fraction curves). Reals are written with 6
//! significant digits; files are UTF-8 with LF line endings.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{CoreError, Result};

pub const RESULTS_HEADER: &str = "strategy,source,target,fraction_pct,rmse,rmse_sunny,rmse_cloudy,te_mean,te_std";

/// 6-significant-digit formatting (printf %.6g style): trailing zeros
/// stripped, scientific notation outside [1e-4, 1e15).
pub fn format_g6(v: f64) -> String {
    if v == 0.0 {
        return "0".to_string();
    }
    if !v.is_finite() {
        return v.to_string();
    }
    let mag = v.abs();
    if (1e-4..1e15).contains(&mag) {
        // round to 6 significant digits, then print plainly
        let exp = mag.log10().floor() as i32;
        let scale = 10f64.powi(exp - 5);
        let rounded = (v / scale).round() * scale;
        let exp = rounded.abs().log10().floor() as i32;
        let decimals = (5 - exp).max(0) as usize;
        let s = format!("{rounded:.decimals$}");
        if s.contains('.') {
            s.trim_end_matches('0').trim_end_matches('.').to_string()
        } else {
            s
        }
    } else {
        let s = format!("{v:.5e}");
        // trim zero padding in the mantissa: 1.20000e-7 -> 1.2e-7
        match s.split_once('e') {
            Some((m, e)) => {
                let m = if m.contains('.') { m.trim_end_matches('0').trim_end_matches('.') } else { m };
                format!("{m}e{e}")
            }
            None => s,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ResultRow {
    pub strategy: String,
    pub source: String,
    pub target: String,
    /// 100 for non-fraction experiments.
    pub fraction_pct: u32,
    pub rmse: f64,
    pub rmse_sunny: f64,
    pub rmse_cloudy: f64,
    pub te_mean: f64,
    pub te_std: f64,
}

impl ResultRow {
    fn to_csv(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{}",
            self.strategy,
            self.source,
            self.target,
            self.fraction_pct,
            format_g6(self.rmse),
            format_g6(self.rmse_sunny),
            format_g6(self.rmse_cloudy),
            format_g6(self.te_mean),
            format_g6(self.te_std)
        )
    }
}

pub fn write_results_csv(rows: &[ResultRow], path: &Path) -> Result<()> {
    let mut out = String::from(RESULTS_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&r.to_csv());
        out.push('\n');
    }
    fs::write(path, out).map_err(|e| CoreError::io(path, e))
}

/// Appends rows, writing the header first if the file does not exist yet.
pub fn append_results_csv(rows: &[ResultRow], path: &Path) -> Result<()> {
    let mut out = if path.exists() {
        fs::read_to_string(path).map_err(|e| CoreError::io(path, e))?
    } else {
        format!("{RESULTS_HEADER}\n")
    };
    for r in rows {
        out.push_str(&r.to_csv());
        out.push('\n');
    }
    fs::write(path, out).map_err(|e| CoreError::io(path, e))
}

pub fn parse_results_csv(text: &str) -> Result<Vec<ResultRow>> {
    let mut lines = text.lines();
    match lines.next() {
        Some(h) if h == RESULTS_HEADER => {}
        other => return Err(CoreError::Data(format!("unexpected results.csv header: {other:?}"))),
    }
    let mut rows = Vec::new();
    for line in lines {
        if line.is_empty() {
            continue;
        }
        let cols: Vec<&str> = line.split(',').collect();
        if cols.len() != 9 {
            return Err(CoreError::Data(format!("results.csv row has {} columns", cols.len())));
        }
        let f = |s: &str| -> Result<f64> {
            s.parse().map_err(|e| CoreError::Data(format!("bad real '{s}': {e}")))
        };
        rows.push(ResultRow {
            strategy: cols[0].into(),
            source: cols[1].into(),
            target: cols[2].into(),
            fraction_pct: cols[3].parse().map_err(|e| CoreError::Data(format!("bad fraction: {e}")))?,
            rmse: f(cols[4])?,
            rmse_sunny: f(cols[5])?,
            rmse_cloudy: f(cols[6])?,
            te_mean: f(cols[7])?,
            te_std: f(cols[8])?,
        });
    }
    Ok(rows)
}

pub fn write_summary_md(rows: &[ResultRow], path: &Path) -> Result<()> {
    let mut out = String::from("# Results\n\n");
    out.push_str("| strategy | source | target | fraction % | RMSE | RMSE sunny | RMSE cloudy | TE mean | TE std |\n");
    out.push_str("|---|---|---|---:|---:|---:|---:|---:|---:|\n");
    for r in rows {
        writeln!(
            out,
            "| {} | {} | {} | {} | {} | {} | {} | {} | {} |",
            r.strategy,
            r.source,
            r.target,
            r.fraction_pct,
            format_g6(r.rmse),
            format_g6(r.rmse_sunny),
            format_g6(r.rmse_cloudy),
            format_g6(r.te_mean),
            format_g6(r.te_std)
        )
        .expect("string write");
    }
    fs::write(path, out).map_err(|e| CoreError::io(path, e))
}

// ---------------------------------------------------------------------------
// SVG line plots
// ---------------------------------------------------------------------------

const PLOT_W: f64 = 720.0;
const PLOT_H: f64 = 420.0;
const MARGIN_L: f64 = 64.0;
const MARGIN_R: f64 = 16.0;
const MARGIN_T: f64 = 36.0;
const MARGIN_B: f64 = 48.0;
const SERIES_COLORS: [&str; 6] = ["#1b7837", "#2166ac", "#b2182b", "#e08214", "#762a83", "#35978f"];

#[derive(Debug, Clone)]
pub struct Series {
    pub label: String,
    pub points: Vec<(f64, f64)>,
}

fn esc(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

fn nice_ticks(lo: f64, hi: f64) -> Vec<f64> {
    if !(hi > lo) {
        return vec![lo];
    }
    let span = hi - lo;
    let raw = span / 5.0;
    let mag = 10f64.powf(raw.log10().floor());
    let step = [1.0, 2.0, 2.5, 5.0, 10.0]
        .iter()
        .map(|m| m * mag)
        .find(|s| span / s <= 6.0)
        .unwrap_or(2.0 * mag);
    let first = (lo / step).ceil() * step;
    let mut ticks = Vec::new();
    let mut t = first;
    while t <= hi + 1e-12 * span {
        ticks.push(t);
        t += step;
    }
    ticks
}

/// Multi-series line chart. Axis ranges cover all points; a horizontal
/// dashed zero line is drawn when the y range crosses zero.
pub fn svg_line_chart(title: &str, x_label: &str, y_label: &str, series: &[Series]) -> String {
    let all: Vec<(f64, f64)> = series.iter().flat_map(|s| s.points.iter().copied()).collect();
    let (mut x0, mut x1) = (f64::INFINITY, f64::NEG_INFINITY);
    let (mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY);
    for &(x, y) in &all {
        x0 = x0.min(x);
        x1 = x1.max(x);
        y0 = y0.min(y);
        y1 = y1.max(y);
    }
    if all.is_empty() {
        (x0, x1, y0, y1) = (0.0, 1.0, 0.0, 1.0);
    }
    if x1 <= x0 {
        x1 = x0 + 1.0;
    }
    if y1 <= y0 {
        y1 = y0 + 1.0;
    }
    let pad = 0.05 * (y1 - y0);
    let (y0, y1) = (y0 - pad, y1 + pad);
    let sx = |x: f64| MARGIN_L + (x - x0) / (x1 - x0) * (PLOT_W - MARGIN_L - MARGIN_R);
    let sy = |y: f64| PLOT_H - MARGIN_B - (y - y0) / (y1 - y0) * (PLOT_H - MARGIN_T - MARGIN_B);

    let mut svg = String::new();
    svg.push_str("<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n");
    let _ = write!(
        svg,
        "<svg xmlns=\"http://www.w3.org/2000/svg\" version=\"1.1\" width=\"{PLOT_W}\" height=\"{PLOT_H}\" viewBox=\"0 0 {PLOT_W} {PLOT_H}\">\n"
    );
    let _ = write!(svg, "<rect width=\"{PLOT_W}\" height=\"{PLOT_H}\" fill=\"white\"/>\n");
    let _ = write!(
        svg,
        "<text x=\"{}\" y=\"20\" font-family=\"sans-serif\" font-size=\"14\" text-anchor=\"middle\">{}</text>\n",
        PLOT_W / 2.0,
        esc(title)
    );

    // axes
    let _ = write!(
        svg,
        "<line x1=\"{MARGIN_L}\" y1=\"{}\" x2=\"{}\" y2=\"{}\" stroke=\"black\"/>\n",
        PLOT_H - MARGIN_B,
        PLOT_W - MARGIN_R,
        PLOT_H - MARGIN_B
    );
    let _ = write!(
        svg,
        "<line x1=\"{MARGIN_L}\" y1=\"{MARGIN_T}\" x2=\"{MARGIN_L}\" y2=\"{}\" stroke=\"black\"/>\n",
        PLOT_H - MARGIN_B
    );
    for t in nice_ticks(x0, x1) {
        let x = sx(t);
        let _ = write!(
            svg,
            "<line x1=\"{x}\" y1=\"{}\" x2=\"{x}\" y2=\"{}\" stroke=\"black\"/><text x=\"{x}\" y=\"{}\" font-family=\"sans-serif\" font-size=\"11\" text-anchor=\"middle\">{}</text>\n",
            PLOT_H - MARGIN_B,
            PLOT_H - MARGIN_B + 5.0,
            PLOT_H - MARGIN_B + 18.0,
            format_g6(t)
        );
    }
    for t in nice_ticks(y0, y1) {
        let y = sy(t);
        let _ = write!(
            svg,
            "<line x1=\"{}\" y1=\"{y}\" x2=\"{MARGIN_L}\" y2=\"{y}\" stroke=\"black\"/><text x=\"{}\" y=\"{}\" font-family=\"sans-serif\" font-size=\"11\" text-anchor=\"end\">{}</text>\n",
            MARGIN_L - 5.0,
            MARGIN_L - 8.0,
            y + 4.0,
            format_g6(t)
        );
    }
    if y0 < 0.0 && y1 > 0.0 {
        let y = sy(0.0);
        let _ = write!(
            svg,
            "<line x1=\"{MARGIN_L}\" y1=\"{y}\" x2=\"{}\" y2=\"{y}\" stroke=\"#888888\" stroke-dasharray=\"4 3\"/>\n",
            PLOT_W - MARGIN_R
        );
    }
    let _ = write!(
        svg,
        "<text x=\"{}\" y=\"{}\" font-family=\"sans-serif\" font-size=\"12\" text-anchor=\"middle\">{}</text>\n",
        (MARGIN_L + PLOT_W - MARGIN_R) / 2.0,
        PLOT_H - 10.0,
        esc(x_label)
    );
    let _ = write!(
        svg,
        "<text x=\"14\" y=\"{}\" font-family=\"sans-serif\" font-size=\"12\" text-anchor=\"middle\" transform=\"rotate(-90 14 {})\">{}</text>\n",
        (MARGIN_T + PLOT_H - MARGIN_B) / 2.0,
        (MARGIN_T + PLOT_H - MARGIN_B) / 2.0,
        esc(y_label)
    );

    for (i, s) in series.iter().enumerate() {
        let color = SERIES_COLORS[i % SERIES_COLORS.len()];
        let mut path = String::new();
        for (j, &(x, y)) in s.points.iter().enumerate() {
            let _ = write!(path, "{}{:.2},{:.2}", if j == 0 { "M" } else { " L" }, sx(x), sy(y));
        }
        let _ = write!(svg, "<path d=\"{path}\" fill=\"none\" stroke=\"{color}\" stroke-width=\"1.6\"/>\n");
        let ly = MARGIN_T + 14.0 * i as f64;
        let _ = write!(
            svg,
            "<line x1=\"{}\" y1=\"{ly}\" x2=\"{}\" y2=\"{ly}\" stroke=\"{color}\" stroke-width=\"2\"/><text x=\"{}\" y=\"{}\" font-family=\"sans-serif\" font-size=\"11\">{}</text>\n",
            MARGIN_L + 8.0,
            MARGIN_L + 28.0,
            MARGIN_L + 34.0,
            ly + 4.0,
            esc(&s.label)
        );
    }
    svg.push_str("</svg>\n");
    svg
}

/// Fig-8-style per-day overlay: ground truth plus one curve per model.
pub struct DayPlot {
    pub title: String,
    /// Minutes of day for the x axis.
    pub minutes: Vec<f64>,
    pub truth: Vec<f64>,
    pub predictions: Vec<(String, Vec<f64>)>,
}

pub fn day_plot_svg(plot: &DayPlot, y_label: &str) -> String {
    let mut series = vec![Series {
        label: "ground truth".into(),
        points: plot.minutes.iter().copied().zip(plot.truth.iter().copied()).collect(),
    }];
    for (label, values) in &plot.predictions {
        series.push(Series {
            label: label.clone(),
            points: plot.minutes.iter().copied().zip(values.iter().copied()).collect(),
        });
    }
    svg_line_chart(&plot.title, "minute of day", y_label, &series)
}

/// Fig-10-style curves: relative RMSE (%) against the target data fraction.
pub fn fraction_curves_svg(title: &str, curves: &[Series]) -> String {
    svg_line_chart(title, "target data fraction (%)", "delta RMSE vs local baseline (%)", curves)
}
