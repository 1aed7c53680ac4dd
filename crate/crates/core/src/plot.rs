//! Minimal deterministic SVG charts. Output depends only on the inputs, so
//! identical data always yields identical bytes.

use std::fmt::Write as _;

const WIDTH: f64 = 480.0;
const HEIGHT: f64 = 320.0;
const MARGIN: f64 = 48.0;
const PALETTE: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#17becf"];

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

fn header(out: &mut String, title: &str) {
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="11">"#
    );
    let _ = writeln!(out, r#"<rect width="{WIDTH}" height="{HEIGHT}" fill="white"/>"#);
    let _ = writeln!(out, r#"<text x="{}" y="20" text-anchor="middle" font-size="13">{}</text>"#, WIDTH / 2.0, escape(title));
}

fn axes(out: &mut String, y_max: f64) {
    let (x0, y0, x1, y1) = (MARGIN, HEIGHT - MARGIN, WIDTH - MARGIN / 2.0, MARGIN);
    let _ = writeln!(out, r#"<path d="M{x0} {y1} L{x0} {y0} L{x1} {y0}" stroke="black" fill="none"/>"#);
    for i in 0..=4 {
        let v = y_max * i as f64 / 4.0;
        let y = y0 - (y0 - y1) * i as f64 / 4.0;
        let _ = writeln!(out, r#"<text x="{}" y="{:.2}" text-anchor="end">{v:.2}</text>"#, x0 - 4.0, y + 4.0);
    }
}

/// Vertical bars with one label per bar; values are clamped at zero.
pub fn bar_chart(title: &str, labels: &[String], values: &[f64], y_max: f64) -> String {
    let mut out = String::new();
    header(&mut out, title);
    axes(&mut out, y_max);
    let n = values.len().max(1) as f64;
    let span = WIDTH - 1.5 * MARGIN;
    let slot = span / n;
    let plot_h = HEIGHT - 2.0 * MARGIN;
    for (i, (label, &v)) in labels.iter().zip(values).enumerate() {
        let h = (v.max(0.0) / y_max).min(1.0) * plot_h;
        let x = MARGIN + slot * i as f64 + slot * 0.15;
        let _ = writeln!(
            out,
            r#"<rect x="{x:.2}" y="{:.2}" width="{:.2}" height="{h:.2}" fill="{}"/>"#,
            HEIGHT - MARGIN - h,
            slot * 0.7,
            PALETTE[0]
        );
        let _ = writeln!(
            out,
            r#"<text x="{:.2}" y="{:.2}" text-anchor="middle">{}</text>"#,
            x + slot * 0.35,
            HEIGHT - MARGIN + 14.0,
            escape(label)
        );
    }
    out.push_str("</svg>\n");
    out
}

/// One polyline per series over a shared `[0, x_max] x [0, y_max]` frame.
pub fn line_chart(title: &str, series: &[(String, Vec<(f64, f64)>)], x_max: f64, y_max: f64) -> String {
    let mut out = String::new();
    header(&mut out, title);
    axes(&mut out, y_max);
    let (x0, y0) = (MARGIN, HEIGHT - MARGIN);
    let (w, h) = (WIDTH - 1.5 * MARGIN, HEIGHT - 2.0 * MARGIN);
    let _ = writeln!(out, r#"<text x="{:.2}" y="{:.2}" text-anchor="end">{x_max:.2}</text>"#, x0 + w, y0 + 14.0);
    for (i, (name, points)) in series.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let mut d = String::new();
        for (j, &(x, y)) in points.iter().enumerate() {
            let px = x0 + (x / x_max).clamp(0.0, 1.0) * w;
            let py = y0 - (y / y_max).clamp(0.0, 1.0) * h;
            let _ = write!(d, "{}{px:.2} {py:.2}", if j == 0 { "M" } else { " L" });
        }
        if !d.is_empty() {
            let _ = writeln!(out, r#"<path d="{d}" stroke="{color}" fill="none"/>"#);
        }
        let _ = writeln!(
            out,
            r#"<text x="{:.2}" y="{:.2}" fill="{color}">{}</text>"#,
            x0 + w - 90.0,
            MARGIN + 14.0 * (i + 1) as f64,
            escape(name)
        );
    }
    out.push_str("</svg>\n");
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn charts_are_deterministic_and_well_formed() {
        let labels = vec!["<32".to_string(), "64".to_string()];
        let a = bar_chart("uncovered", &labels, &[0.5, 2.0], 1.0);
        assert_eq!(a, bar_chart("uncovered", &labels, &[0.5, 2.0], 1.0));
        assert!(a.starts_with("<svg") && a.ends_with("</svg>\n"));
        assert!(a.contains("&lt;32"));
        let s = vec![("c1".to_string(), vec![(0.0, 1.0), (0.5, 0.5)]), ("c2".to_string(), vec![])];
        let b = line_chart("pr", &s, 1.0, 1.0);
        assert_eq!(b.matches("<path").count(), 2);
    }
}
