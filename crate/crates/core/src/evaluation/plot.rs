use std::fmt::Write as _;

use super::RateAccuracyCurve;

const COLORS: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b"];

/// Rate-accuracy chart (bpp on x, top-1 accuracy on y) as standalone SVG.
pub fn curves_svg(curves: &[RateAccuracyCurve], title: &str) -> String {
    let (w, h, m) = (640.0, 440.0, 60.0);
    let pts = curves.iter().flat_map(|c| c.points.iter());
    let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for p in pts {
        x0 = x0.min(p.bpp);
        x1 = x1.max(p.bpp);
        y0 = y0.min(p.accuracy);
        y1 = y1.max(p.accuracy);
    }
    if !x0.is_finite() {
        (x0, x1, y0, y1) = (0.0, 1.0, 0.0, 1.0);
    }
    let pad = |a: f64, b: f64| {
        let d = ((b - a) * 0.05).max(1e-3);
        (a - d, b + d)
    };
    let (x0, x1) = pad(x0, x1);
    let (y0, y1) = pad(y0, y1);
    let sx = |v: f64| m + (v - x0) / (x1 - x0) * (w - 2.0 * m);
    let sy = |v: f64| h - m - (v - y0) / (y1 - y0) * (h - 2.0 * m);

    let mut s = String::new();
    let _ = writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" font-family="sans-serif" font-size="12">"#);
    let _ = writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(s, r#"<text x="{}" y="24" text-anchor="middle" font-size="15">{}</text>"#, w / 2.0, escape(title));
    let _ = writeln!(s, r#"<path d="M{m} {m} V{} H{}" fill="none" stroke="black"/>"#, h - m, w - m);
    for i in 0..=4 {
        let fx = x0 + (x1 - x0) * i as f64 / 4.0;
        let fy = y0 + (y1 - y0) * i as f64 / 4.0;
        let _ = writeln!(s, r#"<text x="{:.1}" y="{}" text-anchor="middle">{fx:.3}</text>"#, sx(fx), h - m + 18.0);
        let _ = writeln!(s, r#"<text x="{}" y="{:.1}" text-anchor="end">{fy:.3}</text>"#, m - 6.0, sy(fy) + 4.0);
    }
    let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle">bpp</text>"#, w / 2.0, h - 16.0);
    let _ = writeln!(s, r#"<text x="16" y="{}" text-anchor="middle" transform="rotate(-90 16 {})">top-1 accuracy</text>"#, h / 2.0, h / 2.0);
    for (k, c) in curves.iter().enumerate() {
        let color = COLORS[k % COLORS.len()];
        let mut sorted = c.points.clone();
        sorted.sort_by(|a, b| a.bpp.total_cmp(&b.bpp));
        let path: Vec<String> = sorted.iter().map(|p| format!("{:.1},{:.1}", sx(p.bpp), sy(p.accuracy))).collect();
        let _ = writeln!(s, r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="2"/>"#, path.join(" "));
        for p in &sorted {
            let _ = writeln!(s, r#"<circle cx="{:.1}" cy="{:.1}" r="3.5" fill="{color}"/>"#, sx(p.bpp), sy(p.accuracy));
        }
        let ly = m + 16.0 * k as f64;
        let _ = writeln!(s, r#"<rect x="{}" y="{}" width="12" height="4" fill="{color}"/>"#, w - m - 150.0, ly + 4.0);
        let _ = writeln!(s, r#"<text x="{}" y="{}">{}</text>"#, w - m - 132.0, ly + 10.0, escape(&c.pipeline));
    }
    s.push_str("</svg>\n");
    s
}

fn escape(t: &str) -> String {
    t.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}
