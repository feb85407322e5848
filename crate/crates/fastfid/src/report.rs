//! Benchmark report files and small hand-rolled SVG plots (no plotting
//! dependency; the charts are simple enough to emit directly).

use std::fs;
use std::path::Path;

use serde::Serialize;

use crate::error::Result;
use crate::infer::BenchReport;

/// Write a run's reports as one pretty-printed JSON document.
pub fn write_reports(path: &Path, reports: &[BenchReport]) -> Result<()> {
    #[derive(Serialize)]
    struct Doc<'a> {
        reports: &'a [BenchReport],
    }
    let body = serde_json::to_string_pretty(&Doc { reports })?;
    fs::write(path, body + "\n")?;
    Ok(())
}

const W: f64 = 640.0;
const H: f64 = 400.0;
const MARGIN: f64 = 60.0;

fn scale(v: f64, lo: f64, hi: f64, out_lo: f64, out_hi: f64) -> f64 {
    if (hi - lo).abs() < 1e-12 {
        return (out_lo + out_hi) / 2.0;
    }
    out_lo + (v - lo) / (hi - lo) * (out_hi - out_lo)
}

fn axes(title: &str, xlabel: &str, ylabel: &str) -> String {
    format!(
        r#"<rect width="{W}" height="{H}" fill="white"/>
<line x1="{m}" y1="{b}" x2="{r}" y2="{b}" stroke="black"/>
<line x1="{m}" y1="{t}" x2="{m}" y2="{b}" stroke="black"/>
<text x="{cx}" y="24" text-anchor="middle" font-size="16">{title}</text>
<text x="{cx}" y="{lb}" text-anchor="middle" font-size="12">{xlabel}</text>
<text x="16" y="{cy}" text-anchor="middle" font-size="12" transform="rotate(-90 16 {cy})">{ylabel}</text>
"#,
        m = MARGIN,
        b = H - MARGIN,
        r = W - MARGIN / 2.0,
        t = MARGIN / 2.0,
        cx = W / 2.0,
        cy = H / 2.0,
        lb = H - 16.0,
    )
}

/// Line chart over one or more named series of (x, y) points.
pub fn svg_line_chart(title: &str, xlabel: &str, ylabel: &str, series: &[(String, Vec<(f64, f64)>)]) -> String {
    let points: Vec<(f64, f64)> = series.iter().flat_map(|(_, p)| p.iter().copied()).collect();
    let (x_lo, x_hi) = bounds(points.iter().map(|p| p.0));
    let (y_lo, y_hi) = bounds(points.iter().map(|p| p.1).chain([0.0]));
    let mut out = format!("<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{W}\" height=\"{H}\">\n");
    out.push_str(&axes(title, xlabel, ylabel));
    let colors = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e"];
    for (si, (name, pts)) in series.iter().enumerate() {
        let color = colors[si % colors.len()];
        let path: Vec<String> = pts
            .iter()
            .map(|&(x, y)| {
                format!(
                    "{:.1},{:.1}",
                    scale(x, x_lo, x_hi, MARGIN, W - MARGIN / 2.0),
                    scale(y, y_lo, y_hi, H - MARGIN, MARGIN / 2.0)
                )
            })
            .collect();
        out.push_str(&format!(
            "<polyline fill=\"none\" stroke=\"{color}\" stroke-width=\"2\" points=\"{}\"/>\n",
            path.join(" ")
        ));
        for &(x, y) in pts {
            out.push_str(&format!(
                "<circle cx=\"{:.1}\" cy=\"{:.1}\" r=\"3\" fill=\"{color}\"/>\n",
                scale(x, x_lo, x_hi, MARGIN, W - MARGIN / 2.0),
                scale(y, y_lo, y_hi, H - MARGIN, MARGIN / 2.0)
            ));
        }
        out.push_str(&format!(
            "<text x=\"{:.1}\" y=\"{:.1}\" font-size=\"12\" fill=\"{color}\">{name}</text>\n",
            W - MARGIN * 2.2,
            MARGIN / 2.0 + 16.0 * (si + 1) as f64
        ));
    }
    ticks(&mut out, x_lo, x_hi, y_lo, y_hi);
    out.push_str("</svg>\n");
    out
}

/// Vertical bar chart over labelled values.
pub fn svg_bar_chart(title: &str, ylabel: &str, bars: &[(String, f64)]) -> String {
    let (_, y_hi) = bounds(bars.iter().map(|b| b.1).chain([0.0]));
    let mut out = format!("<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{W}\" height=\"{H}\">\n");
    out.push_str(&axes(title, "", ylabel));
    let span = W - MARGIN * 1.5;
    let slot = span / bars.len().max(1) as f64;
    for (i, (label, v)) in bars.iter().enumerate() {
        let x = MARGIN + slot * i as f64 + slot * 0.15;
        let y = scale(*v, 0.0, y_hi, H - MARGIN, MARGIN / 2.0);
        out.push_str(&format!(
            "<rect x=\"{x:.1}\" y=\"{y:.1}\" width=\"{:.1}\" height=\"{:.1}\" fill=\"#1f77b4\"/>\n",
            slot * 0.7,
            (H - MARGIN) - y
        ));
        out.push_str(&format!(
            "<text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"middle\" font-size=\"12\">{label}</text>\n",
            x + slot * 0.35,
            H - MARGIN + 16.0
        ));
        out.push_str(&format!(
            "<text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"middle\" font-size=\"11\">{v:.2}</text>\n",
            x + slot * 0.35,
            y - 4.0
        ));
    }
    ticks(&mut out, 0.0, 1.0, 0.0, y_hi);
    out.push_str("</svg>\n");
    out
}

fn bounds(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for v in values {
        lo = lo.min(v);
        hi = hi.max(v);
    }
    if !lo.is_finite() || !hi.is_finite() {
        (0.0, 1.0)
    } else {
        (lo, hi)
    }
}

fn ticks(out: &mut String, _x_lo: f64, _x_hi: f64, y_lo: f64, y_hi: f64) {
    for i in 0..=4 {
        let v = y_lo + (y_hi - y_lo) * i as f64 / 4.0;
        let y = scale(v, y_lo, y_hi, H - MARGIN, MARGIN / 2.0);
        out.push_str(&format!(
            "<text x=\"{:.1}\" y=\"{y:.1}\" text-anchor=\"end\" font-size=\"10\">{v:.2}</text>\n",
            MARGIN - 6.0
        ));
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn line_chart_is_wellformed_svg() {
        let svg = svg_line_chart(
            "speedup vs passages",
            "passages",
            "speedup",
            &[("fastfid".into(), vec![(25.0, 2.4), (50.0, 3.2), (100.0, 3.5)])],
        );
        assert!(svg.starts_with("<svg"));
        assert!(svg.ends_with("</svg>\n"));
        assert!(svg.contains("polyline"));
    }

    #[test]
    fn bar_chart_renders_every_bar() {
        let svg = svg_bar_chart("tpq", "ms", &[("fid".into(), 12.0), ("fastfid".into(), 4.0)]);
        assert_eq!(svg.matches("<rect").count(), 3); // background + 2 bars
    }
}
