use std::fmt::Write as _;
use std::io::{BufRead, BufReader, Read, Write};

use super::{EvalError, MetricRow, MetricsTable};

pub const CSV_HEADER: &str = "mode,k,epsilon,recall";

/// One CSV row per grid point. Floats use the shortest round-trip form.
pub fn write_metrics_csv<W: Write>(table: &MetricsTable, mut w: W) -> std::io::Result<()> {
    writeln!(w, "{CSV_HEADER}")?;
    for r in &table.rows {
        writeln!(w, "{},{},{},{}", r.mode, r.k, r.epsilon, r.recall)?;
    }
    Ok(())
}

pub fn read_metrics_csv<R: Read>(r: R) -> Result<Vec<MetricRow>, EvalError> {
    let bad = |line: usize, msg: &str| EvalError::Config(format!("metrics csv line {line}: {msg}"));
    let mut rows = Vec::new();
    for (i, line) in BufReader::new(r).lines().enumerate() {
        let line = line?;
        if i == 0 {
            if line != CSV_HEADER {
                return Err(bad(1, "unexpected header"));
            }
            continue;
        }
        if line.is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 4 {
            return Err(bad(i + 1, "expected 4 fields"));
        }
        rows.push(MetricRow {
            mode: f[0].to_string(),
            k: f[1].parse().map_err(|_| bad(i + 1, "bad k"))?,
            epsilon: f[2].parse().map_err(|_| bad(i + 1, "bad epsilon"))?,
            recall: f[3].parse().map_err(|_| bad(i + 1, "bad recall"))?,
        });
    }
    Ok(rows)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Series {
    pub label: String,
    pub points: Vec<(f64, f64)>,
}

const COLORS: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b"];

/// Minimal line chart; the y axis spans `[0, 1]`.
pub fn line_plot_svg(title: &str, x_label: &str, y_label: &str, series: &[Series]) -> String {
    let (w, h) = (480.0, 320.0);
    let (left, right, top, bottom) = (56.0, 130.0, 30.0, 44.0);
    let pw = w - left - right;
    let ph = h - top - bottom;
    let xs: Vec<f64> = series.iter().flat_map(|s| s.points.iter().map(|p| p.0)).collect();
    let xmin = xs.iter().copied().fold(f64::INFINITY, f64::min);
    let xmax = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let (xmin, xmax) = if xs.is_empty() {
        (0.0, 1.0)
    } else if xmax > xmin {
        (xmin, xmax)
    } else {
        (xmin - 1.0, xmax + 1.0)
    };
    let sx = |x: f64| left + (x - xmin) / (xmax - xmin) * pw;
    let sy = |y: f64| top + (1.0 - y.clamp(0.0, 1.0)) * ph;

    let mut s = String::new();
    let _ = writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" font-family="sans-serif" font-size="11">"#);
    let _ = writeln!(s, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
    let _ = writeln!(s, r#"<text x="{}" y="18" text-anchor="middle" font-size="13">{}</text>"#, left + pw / 2.0, escape(title));
    let _ = writeln!(s, r##"<g stroke="#444" fill="none"><line x1="{left}" y1="{}" x2="{}" y2="{}"/><line x1="{left}" y1="{top}" x2="{left}" y2="{}"/></g>"##, top + ph, left + pw, top + ph, top + ph);
    for t in 0..=4 {
        let y = t as f64 / 4.0;
        let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="end">{y:.2}</text>"#, left - 6.0, sy(y) + 4.0);
    }
    let mut ticks: Vec<f64> = xs.clone();
    ticks.sort_by(f64::total_cmp);
    ticks.dedup();
    for x in ticks {
        let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle">{x}</text>"#, sx(x), top + ph + 16.0);
    }
    let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#, left + pw / 2.0, h - 6.0, escape(x_label));
    let _ = writeln!(s, r#"<text x="14" y="{}" text-anchor="middle" transform="rotate(-90 14 {})">{}</text>"#, top + ph / 2.0, top + ph / 2.0, escape(y_label));
    for (i, ser) in series.iter().enumerate() {
        let c = COLORS[i % COLORS.len()];
        let pts: Vec<String> = ser.points.iter().map(|&(x, y)| format!("{:.2},{:.2}", sx(x), sy(y))).collect();
        let _ = writeln!(s, r#"<polyline fill="none" stroke="{c}" stroke-width="2" points="{}"/>"#, pts.join(" "));
        for &(x, y) in &ser.points {
            let _ = writeln!(s, r#"<circle cx="{:.2}" cy="{:.2}" r="3" fill="{c}"/>"#, sx(x), sy(y));
        }
        let ly = top + 12.0 + 16.0 * i as f64;
        let _ = writeln!(s, r#"<line x1="{}" y1="{ly}" x2="{}" y2="{ly}" stroke="{c}" stroke-width="2"/>"#, left + pw + 10.0, left + pw + 28.0);
        let _ = writeln!(s, r#"<text x="{}" y="{}">{}</text>"#, left + pw + 32.0, ly + 4.0, escape(&ser.label));
    }
    s.push_str("</svg>\n");
    s
}

/// Recall against ε, one line per k, for `mode`.
pub fn recall_plot_svg(table: &MetricsTable, mode: &str) -> String {
    let mut ks: Vec<usize> = table.rows.iter().filter(|r| r.mode == mode).map(|r| r.k).collect();
    ks.sort();
    ks.dedup();
    let series: Vec<Series> = ks
        .iter()
        .map(|&k| {
            let mut points: Vec<(f64, f64)> = table
                .rows
                .iter()
                .filter(|r| r.mode == mode && r.k == k)
                .map(|r| (r.epsilon, r.recall))
                .collect();
            points.sort_by(|a, b| a.0.total_cmp(&b.0));
            Series {
                label: format!("k = {k}"),
                points,
            }
        })
        .collect();
    line_plot_svg(&format!("{mode}: recall vs threshold"), "epsilon (m)", "recall", &series)
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}
