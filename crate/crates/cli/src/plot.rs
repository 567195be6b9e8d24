//! Minimal hand-written SVG charts for `dtq report`.

use std::fmt::Write;

const W: f64 = 560.0;
const H: f64 = 360.0;
const LEFT: f64 = 72.0;
const RIGHT: f64 = 150.0;
const TOP: f64 = 40.0;
const BOTTOM: f64 = 56.0;
const COLORS: [&str; 4] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd"];

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

fn header(out: &mut String, title: &str) {
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(out, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
    let _ = writeln!(
        out,
        r#"<text x="{}" y="22" text-anchor="middle" font-size="14">{}</text>"#,
        W / 2.0,
        escape(title)
    );
}

fn axes(out: &mut String, x_label: &str, y_label: &str) {
    let (x0, y0, x1, y1) = (LEFT, H - BOTTOM, W - RIGHT, TOP);
    let _ = writeln!(out, r#"<line x1="{x0}" y1="{y0}" x2="{x1}" y2="{y0}" stroke="black"/>"#);
    let _ = writeln!(out, r#"<line x1="{x0}" y1="{y0}" x2="{x0}" y2="{y1}" stroke="black"/>"#);
    let _ = writeln!(
        out,
        r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#,
        (x0 + x1) / 2.0,
        H - 14.0,
        escape(x_label)
    );
    let _ = writeln!(
        out,
        r#"<text x="16" y="{}" text-anchor="middle" transform="rotate(-90 16 {})">{}</text>"#,
        (y0 + y1) / 2.0,
        (y0 + y1) / 2.0,
        escape(y_label)
    );
}

pub struct Series {
    pub name: String,
    pub points: Vec<(f64, f64)>,
}

/// Line chart with a log10 y axis. Non-positive values are dropped.
pub fn log_line_chart(title: &str, x_label: &str, y_label: &str, series: &[Series]) -> String {
    let mut out = String::new();
    header(&mut out, title);
    axes(&mut out, x_label, y_label);
    let pts: Vec<(f64, f64)> = series
        .iter()
        .flat_map(|s| s.points.iter().copied())
        .filter(|p| p.1 > 0.0 && p.1.is_finite())
        .collect();
    if pts.is_empty() {
        out.push_str("</svg>\n");
        return out;
    }
    let (xmin, xmax) = pts.iter().fold((f64::MAX, f64::MIN), |a, p| (a.0.min(p.0), a.1.max(p.0)));
    let lo = pts.iter().map(|p| p.1.log10()).fold(f64::MAX, f64::min).floor();
    let mut hi = pts.iter().map(|p| p.1.log10()).fold(f64::MIN, f64::max).ceil();
    if hi <= lo {
        hi = lo + 1.0;
    }
    let xspan = if xmax > xmin { xmax - xmin } else { 1.0 };
    let px = |x: f64| LEFT + (x - xmin) / xspan * (W - LEFT - RIGHT);
    let py = |y: f64| H - BOTTOM - (y.log10() - lo) / (hi - lo) * (H - TOP - BOTTOM);

    let mut d = lo as i32;
    while d as f64 <= hi {
        let y = py(10f64.powi(d));
        let _ = writeln!(
            out,
            r##"<line x1="{LEFT}" y1="{y:.1}" x2="{:.1}" y2="{y:.1}" stroke="#ddd"/><text x="{:.1}" y="{:.1}" text-anchor="end">1e{d}</text>"##,
            W - RIGHT,
            LEFT - 6.0,
            y + 4.0
        );
        d += 1;
    }
    let mut xs: Vec<f64> = pts.iter().map(|p| p.0).collect();
    xs.sort_by(f64::total_cmp);
    xs.dedup();
    for x in xs {
        let _ = writeln!(
            out,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{x}</text>"#,
            px(x),
            H - BOTTOM + 16.0
        );
    }
    for (i, s) in series.iter().enumerate() {
        let color = COLORS[i % COLORS.len()];
        let path: Vec<String> = s
            .points
            .iter()
            .filter(|p| p.1 > 0.0 && p.1.is_finite())
            .map(|&(x, y)| format!("{:.1},{:.1}", px(x), py(y)))
            .collect();
        let _ = writeln!(
            out,
            r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="2"/>"#,
            path.join(" ")
        );
        for p in &path {
            let (x, y) = p.split_once(',').unwrap_or(("0", "0"));
            let _ = writeln!(out, r#"<circle cx="{x}" cy="{y}" r="3" fill="{color}"/>"#);
        }
        let ly = TOP + 10.0 + 18.0 * i as f64;
        let _ = writeln!(
            out,
            r#"<rect x="{:.1}" y="{:.1}" width="12" height="3" fill="{color}"/><text x="{:.1}" y="{:.1}">{}</text>"#,
            W - RIGHT + 12.0,
            ly - 4.0,
            W - RIGHT + 30.0,
            ly,
            escape(&s.name)
        );
    }
    out.push_str("</svg>\n");
    out
}

/// Vertical bars, one per label, on a linear axis starting at zero.
pub fn bar_chart(title: &str, y_label: &str, bars: &[(String, f64)]) -> String {
    let mut out = String::new();
    header(&mut out, title);
    axes(&mut out, "", y_label);
    let max = bars.iter().map(|b| b.1).fold(0.0, f64::max);
    let top = if max > 0.0 { max * 1.1 } else { 1.0 };
    let plot_h = H - TOP - BOTTOM;
    let slot = (W - LEFT - RIGHT) / bars.len().max(1) as f64;
    for k in 0..=4 {
        let v = top * k as f64 / 4.0;
        let y = H - BOTTOM - plot_h * k as f64 / 4.0;
        let _ = writeln!(
            out,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="end">{v:.3}</text>"#,
            LEFT - 6.0,
            y + 4.0
        );
    }
    for (i, (label, v)) in bars.iter().enumerate() {
        let h = plot_h * v.max(0.0) / top;
        let x = LEFT + slot * i as f64 + slot * 0.15;
        let _ = writeln!(
            out,
            r#"<rect x="{x:.1}" y="{:.1}" width="{:.1}" height="{h:.1}" fill="{}"/>"#,
            H - BOTTOM - h,
            slot * 0.7,
            COLORS[0]
        );
        let _ = writeln!(
            out,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{}</text>"#,
            x + slot * 0.35,
            H - BOTTOM + 16.0,
            escape(label)
        );
        let _ = writeln!(
            out,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{v:.3}</text>"#,
            x + slot * 0.35,
            H - BOTTOM - h - 4.0
        );
    }
    out.push_str("</svg>\n");
    out
}

/// Grid of cells shaded by value in [0, 1].
pub fn heatmap(title: &str, rows: &[String], cols: &[String], values: &[Vec<f64>]) -> String {
    let mut out = String::new();
    header(&mut out, title);
    let cell_w = (W - LEFT - 60.0 - 40.0) / cols.len().max(1) as f64;
    let cell_h = (H - TOP - 40.0 - 40.0) / rows.len().max(1) as f64;
    let x0 = LEFT + 40.0;
    let y0 = TOP + 30.0;
    for (j, c) in cols.iter().enumerate() {
        let _ = writeln!(
            out,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{}</text>"#,
            x0 + cell_w * (j as f64 + 0.5),
            y0 - 8.0,
            escape(c)
        );
    }
    for (i, r) in rows.iter().enumerate() {
        let y = y0 + cell_h * i as f64;
        let _ = writeln!(
            out,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="end">{}</text>"#,
            x0 - 8.0,
            y + cell_h / 2.0 + 4.0,
            escape(r)
        );
        for (j, &v) in values[i].iter().enumerate() {
            let t = v.clamp(0.0, 1.0);
            let shade = (255.0 - 200.0 * t).round() as u8;
            let x = x0 + cell_w * j as f64;
            let _ = writeln!(
                out,
                r##"<rect x="{x:.1}" y="{y:.1}" width="{cell_w:.1}" height="{cell_h:.1}" fill="rgb({shade},{shade},255)" stroke="white"/>"##
            );
            let ink = if t > 0.5 { "white" } else { "black" };
            let _ = writeln!(
                out,
                r#"<text x="{:.1}" y="{:.1}" text-anchor="middle" fill="{ink}">{v:.3}</text>"#,
                x + cell_w / 2.0,
                y + cell_h / 2.0 + 4.0
            );
        }
    }
    out.push_str("</svg>\n");
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn charts_are_well_formed() {
        let s = log_line_chart(
            "t",
            "bits",
            "mse",
            &[Series {
                name: "a<b".into(),
                points: vec![(2.0, 0.5), (4.0, 1e-2), (8.0, 0.0)],
            }],
        );
        assert!(s.starts_with("<svg") && s.ends_with("</svg>\n"));
        assert!(s.contains("a&lt;b"));
        assert_eq!(s.matches("<circle").count(), 2);
        let b = bar_chart("cv", "cv", &[("token".into(), 0.2), ("channel".into(), 0.9)]);
        assert_eq!(b.matches("<rect").count(), 3);
        let h = heatmap("h", &["q".into()], &["a".into(), "b".into()], &[vec![0.25, 0.75]]);
        assert!(h.contains("0.750"));
    }
}
