//! Minimal SVG line plots for the report command.

use std::fmt::Write;

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 420.0;
const MARGIN_LEFT: f64 = 70.0;
const MARGIN_RIGHT: f64 = 150.0;
const MARGIN_TOP: f64 = 40.0;
const MARGIN_BOTTOM: f64 = 55.0;
const COLORS: [&str; 8] = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f"];

pub struct Axis {
    pub label: String,
    pub log: bool,
    /// Fixed bounds; otherwise taken from the data.
    pub range: Option<(f64, f64)>,
}

pub struct Series {
    pub label: String,
    pub points: Vec<(f64, f64)>,
}

struct Scale {
    lo: f64,
    hi: f64,
    log: bool,
    px_lo: f64,
    px_hi: f64,
}

impl Scale {
    fn map(&self, v: f64) -> f64 {
        let t = |x: f64| if self.log { x.log2() } else { x };
        let (a, b) = (t(self.lo), t(self.hi));
        let frac = if b > a { (t(v) - a) / (b - a) } else { 0.5 };
        self.px_lo + frac * (self.px_hi - self.px_lo)
    }
}

fn bounds(axis: &Axis, values: impl Iterator<Item = f64>) -> (f64, f64) {
    if let Some(r) = axis.range {
        return r;
    }
    let (lo, hi) = values
        .filter(|v| v.is_finite() && (!axis.log || *v > 0.0))
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)));
    if lo > hi {
        (1.0, 2.0)
    } else {
        (lo, hi)
    }
}

/// Tick positions: powers of two for log axes, five even steps otherwise.
fn ticks(lo: f64, hi: f64, log: bool) -> Vec<f64> {
    if log {
        let mut t = 2f64.powi(lo.log2().floor() as i32);
        let mut out = Vec::new();
        while t <= hi * (1.0 + 1e-9) {
            if t >= lo * (1.0 - 1e-9) {
                out.push(t);
            }
            t *= 2.0;
        }
        out
    } else {
        (0..=5).map(|i| lo + (hi - lo) * i as f64 / 5.0).collect()
    }
}

fn fmt_tick(v: f64) -> String {
    if v.fract() == 0.0 && v.abs() < 1e9 {
        format!("{}", v as i64)
    } else {
        format!("{v:.2}")
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

pub fn line_plot(title: &str, x: &Axis, y: &Axis, series: &[Series]) -> String {
    let (x_lo, x_hi) = bounds(x, series.iter().flat_map(|s| s.points.iter().map(|p| p.0)));
    let (y_lo, y_hi) = bounds(y, series.iter().flat_map(|s| s.points.iter().map(|p| p.1)));
    let sx = Scale { lo: x_lo, hi: x_hi, log: x.log, px_lo: MARGIN_LEFT, px_hi: WIDTH - MARGIN_RIGHT };
    let sy = Scale { lo: y_lo, hi: y_hi, log: y.log, px_lo: HEIGHT - MARGIN_BOTTOM, px_hi: MARGIN_TOP };

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(s, r#"<rect width="{WIDTH}" height="{HEIGHT}" fill="white"/>"#);
    let _ = writeln!(s, r#"<text x="{}" y="22" text-anchor="middle" font-size="15">{}</text>"#, (MARGIN_LEFT + WIDTH - MARGIN_RIGHT) / 2.0, escape(title));

    let (left, right, top, bottom) = (MARGIN_LEFT, WIDTH - MARGIN_RIGHT, MARGIN_TOP, HEIGHT - MARGIN_BOTTOM);
    let _ = writeln!(s, r#"<rect x="{left}" y="{top}" width="{}" height="{}" fill="none" stroke="black"/>"#, right - left, bottom - top);
    for t in ticks(x_lo, x_hi, x.log) {
        let px = sx.map(t);
        let _ = writeln!(s, r##"<line x1="{px:.2}" y1="{top}" x2="{px:.2}" y2="{bottom}" stroke="#ddd"/>"##);
        let _ = writeln!(s, r#"<text x="{px:.2}" y="{}" text-anchor="middle">{}</text>"#, bottom + 16.0, fmt_tick(t));
    }
    for t in ticks(y_lo, y_hi, y.log) {
        let py = sy.map(t);
        let _ = writeln!(s, r##"<line x1="{left}" y1="{py:.2}" x2="{right}" y2="{py:.2}" stroke="#ddd"/>"##);
        let _ = writeln!(s, r#"<text x="{}" y="{:.2}" text-anchor="end">{}</text>"#, left - 6.0, py + 4.0, fmt_tick(t));
    }
    let _ = writeln!(
        s,
        r#"<text x="{}" y="{}" text-anchor="middle">{}{}</text>"#,
        (left + right) / 2.0,
        HEIGHT - 14.0,
        escape(&x.label),
        if x.log { " (log scale)" } else { "" }
    );
    let _ = writeln!(
        s,
        r#"<text transform="translate(18 {:.2}) rotate(-90)" text-anchor="middle">{}</text>"#,
        (top + bottom) / 2.0,
        escape(&y.label)
    );

    for (i, ser) in series.iter().enumerate() {
        let color = COLORS[i % COLORS.len()];
        let pts: Vec<String> = ser
            .points
            .iter()
            .filter(|(px, py)| px.is_finite() && py.is_finite() && (!x.log || *px > 0.0))
            .map(|&(px, py)| format!("{:.2},{:.2}", sx.map(px), sy.map(py)))
            .collect();
        let _ = writeln!(s, r#"<polyline fill="none" stroke="{color}" stroke-width="2" points="{}"/>"#, pts.join(" "));
        for p in &pts {
            let (cx, cy) = p.split_once(',').expect("formatted pair");
            let _ = writeln!(s, r#"<circle cx="{cx}" cy="{cy}" r="3" fill="{color}"/>"#);
        }
        let ly = top + 10.0 + 18.0 * i as f64;
        let _ = writeln!(s, r#"<line x1="{}" y1="{ly}" x2="{}" y2="{ly}" stroke="{color}" stroke-width="2"/>"#, right + 12.0, right + 32.0);
        let _ = writeln!(s, r#"<text x="{}" y="{}">{}</text>"#, right + 38.0, ly + 4.0, escape(&ser.label));
    }
    s.push_str("</svg>\n");
    s
}
