//! Self-contained SVG bar chart of Overall 3D mAP per method.

use std::fmt::Write as _;

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

/// `bars` are `(label, value in percent)`; `None` draws an empty slot marked "-".
pub fn bar_chart(title: &str, bars: &[(String, Option<f64>)]) -> String {
    let (w, h) = (160 * bars.len().max(1) + 80, 360);
    let (left, bottom, top) = (60.0, 300.0, 40.0);
    let max = bars.iter().filter_map(|b| b.1).fold(0.0f64, f64::max);
    let ymax = if max > 0.0 { (max * 1.15 / 5.0).ceil() * 5.0 } else { 100.0 };
    let scale = (bottom - top) / ymax;
    let mut s = String::new();
    let _ = writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" font-family="sans-serif" font-size="12">"#);
    let _ = writeln!(s, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
    let _ = writeln!(s, r#"<text x="{}" y="22" text-anchor="middle" font-size="15">{}</text>"#, w / 2, escape(title));
    let _ = writeln!(s, r#"<line x1="{left}" y1="{bottom}" x2="{}" y2="{bottom}" stroke="black"/>"#, w - 20);
    let _ = writeln!(s, r#"<line x1="{left}" y1="{top}" x2="{left}" y2="{bottom}" stroke="black"/>"#);
    for k in 0..=5 {
        let v = ymax * k as f64 / 5.0;
        let y = bottom - v * scale;
        let _ = writeln!(s, r#"<text x="{}" y="{:.1}" text-anchor="end">{v:.1}</text>"#, left - 6.0, y + 4.0);
        let _ = writeln!(s, r##"<line x1="{left}" y1="{y:.1}" x2="{}" y2="{y:.1}" stroke="#ddd"/>"##, w - 20);
    }
    let colors = ["#8c8c8c", "#3b75af", "#e0803a", "#5a9e4b", "#b04a4a"];
    for (i, (label, value)) in bars.iter().enumerate() {
        let x = left + 30.0 + 160.0 * i as f64;
        let cx = x + 50.0;
        match value {
            Some(v) => {
                let bh = v * scale;
                let _ = writeln!(
                    s,
                    r#"<rect x="{x:.1}" y="{:.1}" width="100" height="{bh:.1}" fill="{}"/>"#,
                    bottom - bh,
                    colors[i % colors.len()]
                );
                let _ = writeln!(s, r#"<text x="{cx:.1}" y="{:.1}" text-anchor="middle">{v:.2}</text>"#, bottom - bh - 5.0);
            }
            None => {
                let _ = writeln!(s, r#"<text x="{cx:.1}" y="{:.1}" text-anchor="middle">-</text>"#, bottom - 5.0);
            }
        }
        let _ = writeln!(s, r#"<text x="{cx:.1}" y="{:.1}" text-anchor="middle">{}</text>"#, bottom + 18.0, escape(label));
    }
    let _ = writeln!(s, r#"<text x="16" y="{:.1}" transform="rotate(-90 16 {:.1})" text-anchor="middle">Overall 3D mAP (%)</text>"#, (top + bottom) / 2.0, (top + bottom) / 2.0);
    s.push_str("</svg>\n");
    s
}
