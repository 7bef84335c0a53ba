//! Deterministic SVG line charts.

use std::fmt::Write as _;

pub const WIDTH: f64 = 800.0;
pub const HEIGHT: f64 = 500.0;
/// Inset of the plot frame from the canvas edge, as a fraction of the canvas.
pub const MARGIN: f64 = 0.05;

const PALETTE: [&str; 8] = [
    "#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#17becf",
];
const TICKS: usize = 5;

#[derive(Debug, Clone, PartialEq)]
pub struct Series {
    pub label: String,
    pub points: Vec<(f64, f64)>,
}

/// The plot frame in canvas units: `(left, top, right, bottom)`.
pub fn frame() -> (f64, f64, f64, f64) {
    (
        WIDTH * MARGIN,
        HEIGHT * MARGIN,
        WIDTH * (1.0 - MARGIN),
        HEIGHT * (1.0 - MARGIN),
    )
}

fn range(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let (lo, hi) = values
        .filter(|v| v.is_finite())
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| {
            (lo.min(v), hi.max(v))
        });
    if lo > hi {
        (0.0, 1.0)
    } else if lo == hi {
        (lo - 0.5, hi + 0.5)
    } else {
        (lo, hi)
    }
}

fn tick_label(v: f64) -> String {
    let a = v.abs();
    if a == 0.0 || (1e-3..1e4).contains(&a) {
        let s = format!("{v:.4}");
        let s = s.trim_end_matches('0').trim_end_matches('.');
        if s == "-0" {
            "0".into()
        } else {
            s.to_string()
        }
    } else {
        format!("{v:.2e}")
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
        .replace('"', "&quot;")
}

/// Renders every series on shared linear axes fitted to the finite data.
/// Non-finite points break the line. No series, or only empty ones, gives
/// axes alone.
pub fn render(series: &[Series], x_label: &str, y_label: &str) -> String {
    let (left, top, right, bottom) = frame();
    let all = || {
        series
            .iter()
            .flat_map(|s| s.points.iter())
            .filter(|(x, y)| x.is_finite() && y.is_finite())
    };
    let (x0, x1) = range(all().map(|p| p.0));
    let (y0, y1) = range(all().map(|p| p.1));
    let px = |x: f64| left + (x - x0) / (x1 - x0) * (right - left);
    let py = |y: f64| bottom - (y - y0) / (y1 - y0) * (bottom - top);

    let mut s = String::new();
    let _ = writeln!(s, r#"<?xml version="1.0" encoding="UTF-8"?>"#);
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" version="1.1" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}">"#
    );
    let _ = writeln!(
        s,
        r#"<rect x="0" y="0" width="{WIDTH}" height="{HEIGHT}" fill="white"/>"#
    );
    let _ = writeln!(
        s,
        r#"<rect x="{left:.3}" y="{top:.3}" width="{:.3}" height="{:.3}" fill="none" stroke="black" stroke-width="1"/>"#,
        right - left,
        bottom - top
    );
    let _ = writeln!(
        s,
        r#"<g font-family="monospace" font-size="8" fill="black">"#
    );
    for i in 0..TICKS {
        let f = i as f64 / (TICKS - 1) as f64;
        let (xv, yv) = (x0 + f * (x1 - x0), y0 + f * (y1 - y0));
        let (tx, ty) = (px(xv), py(yv));
        let _ = writeln!(
            s,
            r#"<line x1="{tx:.3}" y1="{bottom:.3}" x2="{tx:.3}" y2="{:.3}" stroke="black"/>"#,
            bottom + 3.0
        );
        let _ = writeln!(
            s,
            r#"<text x="{tx:.3}" y="{:.3}" text-anchor="middle">{}</text>"#,
            bottom + 11.0,
            tick_label(xv)
        );
        let _ = writeln!(
            s,
            r#"<line x1="{:.3}" y1="{ty:.3}" x2="{left:.3}" y2="{ty:.3}" stroke="black"/>"#,
            left - 3.0
        );
        let _ = writeln!(
            s,
            r#"<text x="{:.3}" y="{:.3}" text-anchor="end">{}</text>"#,
            left - 4.0,
            ty + 3.0,
            tick_label(yv)
        );
    }
    let _ = writeln!(
        s,
        r#"<text x="{:.3}" y="{:.3}" text-anchor="middle">{}</text>"#,
        (left + right) / 2.0,
        HEIGHT - 2.0,
        escape(x_label)
    );
    let _ = writeln!(
        s,
        r#"<text x="{left:.3}" y="{:.3}">{}</text>"#,
        top - 6.0,
        escape(y_label)
    );
    let _ = writeln!(s, "</g>");

    for (i, ser) in series.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let mut runs: Vec<Vec<(f64, f64)>> = vec![Vec::new()];
        for &(x, y) in &ser.points {
            if x.is_finite() && y.is_finite() {
                runs.last_mut().expect("non-empty").push((px(x), py(y)));
            } else if !runs.last().expect("non-empty").is_empty() {
                runs.push(Vec::new());
            }
        }
        for run in runs.iter().filter(|r| !r.is_empty()) {
            let pts: Vec<String> = run.iter().map(|(x, y)| format!("{x:.3},{y:.3}")).collect();
            let _ = writeln!(
                s,
                r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="1.2"/>"#,
                pts.join(" ")
            );
        }
        let ly = top + 12.0 + 12.0 * i as f64;
        let _ = writeln!(
            s,
            r#"<line x1="{:.3}" y1="{:.3}" x2="{:.3}" y2="{:.3}" stroke="{color}" stroke-width="2"/>"#,
            right - 150.0,
            ly - 3.0,
            right - 135.0,
            ly - 3.0
        );
        let _ = writeln!(
            s,
            r#"<text x="{:.3}" y="{ly:.3}" font-family="monospace" font-size="9">{}</text>"#,
            right - 130.0,
            escape(&ser.label)
        );
    }
    s.push_str("</svg>\n");
    s
}
