//! Two-panel SVG line plots of aggregate CSVs.
//!
//! The left panel shows queue-length regret, the right one cumulative regret,
//! each as a mean line inside a ±1 std band. Both single-series aggregate CSVs
//! and combined CSVs with a leading `policy` column are accepted.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use cqb_core::metrics::AGGREGATE_CSV_HEADER;
use cqb_core::AggregateSeries;

use crate::CliError;

const WIDTH: f64 = 960.0;
const HEIGHT: f64 = 420.0;
const PANEL_WIDTH: f64 = 480.0;
const MARGIN_LEFT: f64 = 70.0;
const MARGIN_RIGHT: f64 = 20.0;
const MARGIN_TOP: f64 = 50.0;
const MARGIN_BOTTOM: f64 = 60.0;
const TICKS: usize = 5;
const PALETTE: [&str; 8] = [
    "#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f",
];

fn runtime(msg: impl Into<String>) -> CliError {
    CliError::Runtime(msg.into())
}

/// Reads an aggregate or combined CSV into named series, keeping file order.
/// A plain aggregate CSV yields one series named `mean`.
pub fn parse_series(text: &str) -> Result<Vec<(String, AggregateSeries)>, CliError> {
    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_reader(text.as_bytes());
    let headers = reader.headers().map_err(|e| runtime(format!("bad CSV header: {e}")))?.clone();
    let expected: Vec<&str> = AGGREGATE_CSV_HEADER.split(',').collect();
    let names: Vec<&str> = headers.iter().collect();
    let offset = if names == expected {
        0
    } else if names.first() == Some(&"policy") && names[1..] == expected[..] {
        1
    } else {
        return Err(runtime(format!("unexpected CSV header: {}", names.join(","))));
    };
    let mut out: Vec<(String, AggregateSeries)> = Vec::new();
    for (line, record) in reader.records().enumerate() {
        let record = record.map_err(|e| runtime(format!("bad CSV row {}: {e}", line + 2)))?;
        let name = if offset == 1 { record[0].to_string() } else { "mean".to_string() };
        let field = |i: usize| -> Result<f64, CliError> {
            record[offset + i].parse::<f64>().map_err(|e| {
                runtime(format!("row {}: cannot parse {:?}: {e}", line + 2, &record[offset + i]))
            })
        };
        let t = record[offset]
            .parse::<u64>()
            .map_err(|e| runtime(format!("row {}: bad round: {e}", line + 2)))?;
        let idx = match out.iter().position(|(n, _)| *n == name) {
            Some(i) => i,
            None => {
                out.push((
                    name,
                    AggregateSeries {
                        runs: 0,
                        t: Vec::new(),
                        mean_qregret: Vec::new(),
                        std_qregret: Vec::new(),
                        mean_cum_regret: Vec::new(),
                        std_cum_regret: Vec::new(),
                    },
                ));
                out.len() - 1
            }
        };
        let s = &mut out[idx].1;
        s.t.push(t);
        s.mean_qregret.push(field(1)?);
        s.std_qregret.push(field(2)?);
        s.mean_cum_regret.push(field(3)?);
        s.std_cum_regret.push(field(4)?);
    }
    if out.is_empty() {
        return Err(runtime("the CSV has no data rows"));
    }
    Ok(out)
}

/// Linear map from a data interval onto a pixel interval.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Scale {
    pub lo: f64,
    pub hi: f64,
    pub px_lo: f64,
    pub px_hi: f64,
}

impl Scale {
    fn fitted(lo: f64, hi: f64, px_lo: f64, px_hi: f64, pad: bool) -> Self {
        let (mut lo, mut hi) = (lo, hi);
        if hi - lo <= f64::EPSILON * lo.abs().max(1.0) {
            lo -= 0.5;
            hi += 0.5;
        } else if pad {
            let m = 0.05 * (hi - lo);
            lo -= m;
            hi += m;
        }
        Scale { lo, hi, px_lo, px_hi }
    }

    pub fn map(&self, v: f64) -> f64 {
        self.px_lo + (v - self.lo) / (self.hi - self.lo) * (self.px_hi - self.px_lo)
    }

    pub fn invert(&self, px: f64) -> f64 {
        self.lo + (px - self.px_lo) / (self.px_hi - self.px_lo) * (self.hi - self.lo)
    }
}

// Multiples of a 1-2-5 step inside [lo, hi], about TICKS of them.
fn nice_ticks(lo: f64, hi: f64) -> Vec<f64> {
    let raw = (hi - lo) / TICKS as f64;
    let mag = 10f64.powf(raw.log10().floor());
    let step = [1.0, 2.0, 5.0, 10.0]
        .iter()
        .map(|m| m * mag)
        .find(|s| *s >= raw)
        .unwrap_or(10.0 * mag);
    let first = (lo / step).ceil() as i64;
    let last = (hi / step).floor() as i64;
    (first..=last).map(|i| i as f64 * step).collect()
}

fn tick_label(v: f64) -> String {
    if v == 0.0 {
        return "0".into();
    }
    if v.abs() >= 1e5 || v.abs() < 1e-2 {
        return format!("{v:.2e}");
    }
    let s = format!("{v:.3}");
    s.trim_end_matches('0').trim_end_matches('.').to_string()
}

struct Metric<'a> {
    title: &'a str,
    mean: fn(&AggregateSeries) -> &[f64],
    std: fn(&AggregateSeries) -> &[f64],
}

const METRICS: [Metric<'static>; 2] = [
    Metric { title: "queue-length regret", mean: |s| &s.mean_qregret, std: |s| &s.std_qregret },
    Metric { title: "cumulative regret", mean: |s| &s.mean_cum_regret, std: |s| &s.std_cum_regret },
];

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

/// Renders the two-panel plot. Output depends only on `series`.
pub fn render_svg(series: &[(String, AggregateSeries)]) -> Result<String, CliError> {
    if series.is_empty() || series.iter().any(|(_, s)| s.is_empty()) {
        return Err(runtime("nothing to plot"));
    }
    let mut svg = String::new();
    let w = &mut svg;
    let _ = writeln!(
        w,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(w, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let t_lo = series.iter().map(|(_, s)| s.t[0]).min().unwrap_or(0) as f64;
    let t_hi = series.iter().map(|(_, s)| *s.t.last().unwrap_or(&0)).max().unwrap_or(0) as f64;
    for (panel, metric) in METRICS.iter().enumerate() {
        let left = panel as f64 * PANEL_WIDTH + MARGIN_LEFT;
        let right = (panel + 1) as f64 * PANEL_WIDTH - MARGIN_RIGHT;
        let top = MARGIN_TOP;
        let bottom = HEIGHT - MARGIN_BOTTOM;
        let (mut y_lo, mut y_hi) = (f64::INFINITY, f64::NEG_INFINITY);
        for (_, s) in series {
            for (m, sd) in (metric.mean)(s).iter().zip((metric.std)(s)) {
                y_lo = y_lo.min(m - sd);
                y_hi = y_hi.max(m + sd);
            }
        }
        if !(y_lo.is_finite() && y_hi.is_finite()) {
            return Err(runtime(format!("non-finite values in {}", metric.title)));
        }
        let xs = Scale::fitted(t_lo, t_hi, left, right, false);
        let ys = Scale::fitted(y_lo, y_hi, bottom, top, true);
        let _ = writeln!(
            w,
            r#"<g class="panel" data-metric="{}" data-x-lo="{}" data-x-hi="{}" data-px-left="{}" data-px-right="{}" data-y-lo="{}" data-y-hi="{}" data-px-bottom="{}" data-px-top="{}">"#,
            metric.title, xs.lo, xs.hi, xs.px_lo, xs.px_hi, ys.lo, ys.hi, ys.px_lo, ys.px_hi
        );
        let _ = writeln!(
            w,
            r#"<text x="{:.3}" y="{:.3}" text-anchor="middle" font-size="14">{}</text>"#,
            (left + right) / 2.0,
            top - 20.0,
            metric.title
        );
        let _ = writeln!(
            w,
            r##"<rect x="{left:.3}" y="{top:.3}" width="{:.3}" height="{:.3}" fill="none" stroke="#444"/>"##,
            right - left,
            bottom - top
        );
        for xv in nice_ticks(xs.lo, xs.hi) {
            let px = xs.map(xv);
            let _ = writeln!(
                w,
                r##"<line x1="{px:.3}" y1="{bottom:.3}" x2="{px:.3}" y2="{:.3}" stroke="#444"/><text x="{px:.3}" y="{:.3}" text-anchor="middle">{}</text>"##,
                bottom + 5.0,
                bottom + 18.0,
                tick_label(xv)
            );
        }
        for yv in nice_ticks(ys.lo, ys.hi) {
            let py = ys.map(yv);
            let _ = writeln!(
                w,
                r##"<line x1="{:.3}" y1="{py:.3}" x2="{left:.3}" y2="{py:.3}" stroke="#444"/><text x="{:.3}" y="{:.3}" text-anchor="end">{}</text>"##,
                left - 5.0,
                left - 8.0,
                py + 4.0,
                tick_label(yv)
            );
        }
        let _ = writeln!(
            w,
            r#"<text x="{:.3}" y="{:.3}" text-anchor="middle">t</text>"#,
            (left + right) / 2.0,
            bottom + 40.0
        );
        for (i, (name, s)) in series.iter().enumerate() {
            let color = PALETTE[i % PALETTE.len()];
            let mean = (metric.mean)(s);
            let sd = (metric.std)(s);
            let mut d = String::new();
            for (j, t) in s.t.iter().enumerate() {
                let cmd = if j == 0 { 'M' } else { 'L' };
                let _ = write!(d, "{cmd}{:.3},{:.3} ", xs.map(*t as f64), ys.map(mean[j] + sd[j]));
            }
            for j in (0..s.t.len()).rev() {
                let _ = write!(d, "L{:.3},{:.3} ", xs.map(s.t[j] as f64), ys.map(mean[j] - sd[j]));
            }
            d.push('Z');
            let name = escape(name);
            let _ = writeln!(
                w,
                r#"<path class="band" data-series="{name}" d="{d}" fill="{color}" fill-opacity="0.2" stroke="none"/>"#
            );
            let points: Vec<String> = s
                .t
                .iter()
                .zip(mean)
                .map(|(t, m)| format!("{:.3},{:.3}", xs.map(*t as f64), ys.map(*m)))
                .collect();
            let _ = writeln!(
                w,
                r#"<polyline class="mean" data-series="{name}" points="{}" fill="none" stroke="{color}" stroke-width="1.5"/>"#,
                points.join(" ")
            );
            if s.t.len() == 1 {
                let _ = writeln!(
                    w,
                    r#"<circle cx="{:.3}" cy="{:.3}" r="3" fill="{color}"/>"#,
                    xs.map(s.t[0] as f64),
                    ys.map(mean[0])
                );
            }
        }
        let _ = writeln!(w, "</g>");
    }
    for (i, (name, _)) in series.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let x = MARGIN_LEFT + 10.0 + 130.0 * i as f64;
        let y = HEIGHT - 12.0;
        let _ = writeln!(
            w,
            r#"<rect x="{x:.3}" y="{:.3}" width="14" height="4" fill="{color}"/><text x="{:.3}" y="{y:.3}">{}</text>"#,
            y - 6.0,
            x + 20.0,
            escape(name)
        );
    }
    let _ = writeln!(w, "</svg>");
    Ok(svg)
}

/// Reads the CSV at `input` and writes the SVG to `output`.
pub fn emit_plot(input: &Path, output: &Path) -> Result<(), CliError> {
    let text = fs::read_to_string(input)
        .map_err(|e| runtime(format!("cannot read {}: {e}", input.display())))?;
    let svg = render_svg(&parse_series(&text)?)?;
    if let Some(parent) = output.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    fs::write(output, svg).map_err(|e| runtime(format!("cannot write {}: {e}", output.display())))
}
