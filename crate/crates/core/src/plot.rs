//! Minimal SVG line plots.

use std::fmt::Write;

pub struct Series {
    pub label: Option<String>,
    pub points: Vec<(f64, f64)>,
    pub color: String,
    pub width: f64,
    pub opacity: f64,
}

impl Series {
    pub fn new(points: Vec<(f64, f64)>, color: &str) -> Self {
        Self {
            label: None,
            points,
            color: color.to_string(),
            width: 1.5,
            opacity: 1.0,
        }
    }

    pub fn labelled(mut self, label: &str) -> Self {
        self.label = Some(label.to_string());
        self
    }

    pub fn thin(mut self, width: f64, opacity: f64) -> Self {
        self.width = width;
        self.opacity = opacity;
        self
    }
}

pub struct Plot {
    pub title: String,
    pub x_label: String,
    pub y_label: String,
    pub series: Vec<Series>,
    /// Downward arrow pointing at this x value.
    pub arrow_at: Option<(f64, String)>,
}

const W: f64 = 640.0;
const H: f64 = 400.0;
const M: f64 = 56.0;

fn esc(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

impl Plot {
    pub fn new(title: &str, x_label: &str, y_label: &str) -> Self {
        Self {
            title: title.into(),
            x_label: x_label.into(),
            y_label: y_label.into(),
            series: Vec::new(),
            arrow_at: None,
        }
    }

    fn bounds(&self) -> (f64, f64, f64, f64) {
        let pts = self.series.iter().flat_map(|s| s.points.iter()).filter(|p| p.0.is_finite() && p.1.is_finite());
        let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
        for &(x, y) in pts {
            x0 = x0.min(x);
            x1 = x1.max(x);
            y0 = y0.min(y);
            y1 = y1.max(y);
        }
        if !x0.is_finite() {
            return (0.0, 1.0, 0.0, 1.0);
        }
        y0 = y0.min(0.0);
        if x1 <= x0 {
            x1 = x0 + 1.0;
        }
        if y1 <= y0 {
            y1 = y0 + 1.0;
        }
        (x0, x1, y0, y1 * 1.05)
    }

    pub fn to_svg(&self) -> String {
        let (x0, x1, y0, y1) = self.bounds();
        let sx = |x: f64| M + (x - x0) / (x1 - x0) * (W - 2.0 * M);
        let sy = |y: f64| H - M - (y - y0) / (y1 - y0) * (H - 2.0 * M);
        let mut s = String::new();
        let _ = writeln!(
            s,
            r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}" font-family="sans-serif" font-size="12">"#
        );
        let _ = writeln!(s, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
        let _ = writeln!(s, r#"<text x="{}" y="20" text-anchor="middle" font-size="14">{}</text>"#, W / 2.0, esc(&self.title));
        let _ = writeln!(
            s,
            r#"<line x1="{M}" y1="{b}" x2="{r}" y2="{b}" stroke="black"/><line x1="{M}" y1="{M}" x2="{M}" y2="{b}" stroke="black"/>"#,
            b = H - M,
            r = W - M
        );
        for i in 0..=4 {
            let fx = x0 + (x1 - x0) * i as f64 / 4.0;
            let fy = y0 + (y1 - y0) * i as f64 / 4.0;
            let _ = writeln!(s, r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{}</text>"#, sx(fx), H - M + 16.0, tick(fx));
            let _ = writeln!(s, r#"<text x="{:.1}" y="{:.1}" text-anchor="end">{}</text>"#, M - 6.0, sy(fy) + 4.0, tick(fy));
        }
        let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#, W / 2.0, H - 14.0, esc(&self.x_label));
        let _ = writeln!(
            s,
            r#"<text x="16" y="{}" text-anchor="middle" transform="rotate(-90 16 {})">{}</text>"#,
            H / 2.0,
            H / 2.0,
            esc(&self.y_label)
        );
        for ser in &self.series {
            let pts: Vec<String> = ser
                .points
                .iter()
                .filter(|p| p.0.is_finite() && p.1.is_finite())
                .map(|&(x, y)| format!("{:.2},{:.2}", sx(x), sy(y)))
                .collect();
            let _ = writeln!(
                s,
                r#"<polyline fill="none" stroke="{}" stroke-width="{}" stroke-opacity="{}" points="{}"/>"#,
                ser.color,
                ser.width,
                ser.opacity,
                pts.join(" ")
            );
        }
        let mut ly = M;
        for ser in self.series.iter().filter(|s| s.label.is_some()) {
            let _ = writeln!(
                s,
                r#"<line x1="{a}" y1="{ly}" x2="{b}" y2="{ly}" stroke="{c}" stroke-width="2"/><text x="{t}" y="{y}">{l}</text>"#,
                a = W - M - 150.0,
                b = W - M - 130.0,
                c = ser.color,
                t = W - M - 125.0,
                y = ly + 4.0,
                l = esc(ser.label.as_deref().unwrap_or_default())
            );
            ly += 16.0;
        }
        if let Some((x, label)) = &self.arrow_at {
            let ax = sx(*x);
            let _ = writeln!(
                s,
                r#"<line x1="{ax:.1}" y1="{}" x2="{ax:.1}" y2="{}" stroke="crimson" stroke-width="2"/><polygon points="{:.1},{} {:.1},{} {ax:.1},{}" fill="crimson"/><text x="{ax:.1}" y="{}" text-anchor="middle" fill="crimson">{}</text>"#,
                M + 4.0,
                H / 2.0 - 8.0,
                ax - 6.0,
                H / 2.0 - 10.0,
                ax + 6.0,
                H / 2.0 - 10.0,
                H / 2.0,
                M - 2.0,
                esc(label)
            );
        }
        s.push_str("</svg>\n");
        s
    }
}

fn tick(v: f64) -> String {
    if v.abs() >= 100.0 || v == v.round() {
        format!("{v:.0}")
    } else {
        format!("{v:.2}")
    }
}
