//! Minimal standalone SVG line charts: mean lines with ±1 std bands.

use std::fmt::Write;

const WIDTH: f64 = 800.0;
const HEIGHT: f64 = 500.0;
const MARGIN_LEFT: f64 = 70.0;
const MARGIN_RIGHT: f64 = 180.0;
const MARGIN_TOP: f64 = 40.0;
const MARGIN_BOTTOM: f64 = 50.0;
/// Points per series after thinning.
const MAX_POINTS: usize = 800;

const COLORS: [&str; 8] = [
    "#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#17becf",
];
const DASHES: [&str; 4] = ["", "6,3", "2,2", "8,3,2,3"];

pub struct Series<'a> {
    pub label: &'a str,
    pub mean: &'a [f64],
    pub std: &'a [f64],
}

pub struct ChartStyle<'a> {
    pub title: &'a str,
    pub x_label: &'a str,
    pub y_label: &'a str,
}

fn escape(text: &str) -> String {
    text.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
        .replace('"', "&quot;")
}

fn thin(len: usize) -> Vec<usize> {
    if len <= MAX_POINTS {
        return (0..len).collect();
    }
    let step = (len - 1) as f64 / (MAX_POINTS - 1) as f64;
    let mut idx: Vec<usize> = (0..MAX_POINTS).map(|i| (i as f64 * step).round() as usize).collect();
    idx.dedup();
    idx
}

/// Renders `series` on shared linear axes. Panics on an empty list.
pub fn emit_svg(series: &[Series<'_>], style: &ChartStyle<'_>) -> String {
    assert!(!series.is_empty(), "chart needs at least one series");
    let len = series.iter().map(|s| s.mean.len()).max().unwrap_or(0).max(2);
    let mut y_max = f64::NEG_INFINITY;
    let mut y_min = f64::INFINITY;
    for s in series {
        for (m, d) in s.mean.iter().zip(s.std) {
            if m.is_finite() && d.is_finite() {
                y_max = y_max.max(m + d);
                y_min = y_min.min(m - d);
            }
        }
    }
    if !y_max.is_finite() {
        y_max = 1.0;
        y_min = 0.0;
    }
    y_min = y_min.min(0.0);
    if y_max - y_min < 1e-12 {
        y_max = y_min + 1.0;
    }
    let plot_w = WIDTH - MARGIN_LEFT - MARGIN_RIGHT;
    let plot_h = HEIGHT - MARGIN_TOP - MARGIN_BOTTOM;
    let x_of = |t: usize| MARGIN_LEFT + plot_w * t as f64 / (len - 1) as f64;
    let y_of = |v: f64| MARGIN_TOP + plot_h * (1.0 - (v - y_min) / (y_max - y_min));

    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<?xml version="1.0" encoding="UTF-8"?>
<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="12">
<rect width="100%" height="100%" fill="white"/>
<text x="{}" y="22" text-anchor="middle" font-size="15">{}</text>"#,
        MARGIN_LEFT + plot_w / 2.0,
        escape(style.title)
    );

    // Axes and ticks.
    let _ = writeln!(
        svg,
        r#"<g stroke="black" fill="none"><line x1="{l}" y1="{b}" x2="{r}" y2="{b}"/><line x1="{l}" y1="{t}" x2="{l}" y2="{b}"/></g>"#,
        l = MARGIN_LEFT,
        r = MARGIN_LEFT + plot_w,
        t = MARGIN_TOP,
        b = MARGIN_TOP + plot_h
    );
    for i in 0..=5 {
        let v = y_min + (y_max - y_min) * i as f64 / 5.0;
        let y = y_of(v);
        let _ = writeln!(
            svg,
            r##"<line x1="{a}" y1="{y:.2}" x2="{l}" y2="{y:.2}" stroke="black"/><text x="{tx}" y="{ty:.2}" text-anchor="end">{v:.3}</text>"##,
            a = MARGIN_LEFT - 5.0,
            l = MARGIN_LEFT,
            tx = MARGIN_LEFT - 8.0,
            ty = y + 4.0
        );
        let t = ((len - 1) as f64 * i as f64 / 5.0).round() as usize;
        let x = x_of(t);
        let _ = writeln!(
            svg,
            r#"<line x1="{x:.2}" y1="{b}" x2="{x:.2}" y2="{b5}" stroke="black"/><text x="{x:.2}" y="{ty}" text-anchor="middle">{t}</text>"#,
            b = MARGIN_TOP + plot_h,
            b5 = MARGIN_TOP + plot_h + 5.0,
            ty = MARGIN_TOP + plot_h + 20.0
        );
    }
    let _ = writeln!(
        svg,
        r#"<text x="{}" y="{}" text-anchor="middle">{}</text>
<text x="18" y="{}" text-anchor="middle" transform="rotate(-90 18 {})">{}</text>"#,
        MARGIN_LEFT + plot_w / 2.0,
        HEIGHT - 10.0,
        escape(style.x_label),
        MARGIN_TOP + plot_h / 2.0,
        MARGIN_TOP + plot_h / 2.0,
        escape(style.y_label)
    );

    for (i, s) in series.iter().enumerate() {
        let color = COLORS[i % COLORS.len()];
        let dash = DASHES[(i / COLORS.len()) % DASHES.len()];
        let idx = thin(s.mean.len());
        let mut band = String::new();
        for &t in &idx {
            let _ = write!(band, "{:.2},{:.2} ", x_of(t), y_of(s.mean[t] + s.std[t]));
        }
        for &t in idx.iter().rev() {
            let _ = write!(band, "{:.2},{:.2} ", x_of(t), y_of(s.mean[t] - s.std[t]));
        }
        let line: String = idx
            .iter()
            .map(|&t| format!("{:.2},{:.2}", x_of(t), y_of(s.mean[t])))
            .collect::<Vec<_>>()
            .join(" ");
        let dash_attr = if dash.is_empty() {
            String::new()
        } else {
            format!(r#" stroke-dasharray="{dash}""#)
        };
        let _ = writeln!(
            svg,
            r#"<polygon points="{}" fill="{color}" fill-opacity="0.18" stroke="none"/>
<polyline points="{line}" fill="none" stroke="{color}" stroke-width="1.5"{dash_attr}/>"#,
            band.trim_end()
        );
        let ly = MARGIN_TOP + 10.0 + 20.0 * i as f64;
        let lx = WIDTH - MARGIN_RIGHT + 15.0;
        let _ = writeln!(
            svg,
            r#"<g class="legend"><line x1="{lx}" y1="{ly}" x2="{}" y2="{ly}" stroke="{color}" stroke-width="2"{dash_attr}/><text x="{}" y="{}">{}</text></g>"#,
            lx + 25.0,
            lx + 30.0,
            ly + 4.0,
            escape(s.label)
        );
    }
    svg.push_str("</svg>\n");
    svg
}
