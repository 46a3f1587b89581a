//! Minimal SVG writer for latent scatter and trajectory plots.

use std::fmt::Write as _;

const SIZE: f64 = 640.0;
const MARGIN: f64 = 24.0;
const PALETTE: [&str; 8] = ["#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b", "#e377c2", "#17becf"];

#[derive(Clone, Debug, Default)]
pub struct Scene {
    /// Draw the unit circle and map the unit disk onto the canvas.
    pub disk: bool,
    pub trajectories: Vec<Vec<[f64; 2]>>,
    pub paths: Vec<(String, Vec<[f64; 2]>)>,
    pub labels: Vec<([f64; 2], String)>,
}

struct Frame {
    cx: f64,
    cy: f64,
    scale: f64,
}

impl Frame {
    fn of(scene: &Scene) -> Self {
        if scene.disk {
            return Self { cx: 0.0, cy: 0.0, scale: (SIZE - 2.0 * MARGIN) / 2.0 };
        }
        let pts = scene.trajectories.iter().flatten().chain(scene.paths.iter().flat_map(|p| &p.1));
        let (mut lo, mut hi) = ([f64::INFINITY; 2], [f64::NEG_INFINITY; 2]);
        for p in pts {
            for k in 0..2 {
                lo[k] = lo[k].min(p[k]);
                hi[k] = hi[k].max(p[k]);
            }
        }
        if !lo[0].is_finite() {
            return Self { cx: 0.0, cy: 0.0, scale: 1.0 };
        }
        let span = (hi[0] - lo[0]).max(hi[1] - lo[1]).max(1e-9) * 1.05;
        Self { cx: 0.5 * (lo[0] + hi[0]), cy: 0.5 * (lo[1] + hi[1]), scale: (SIZE - 2.0 * MARGIN) / span }
    }

    fn map(&self, p: [f64; 2]) -> (f64, f64) {
        (SIZE / 2.0 + (p[0] - self.cx) * self.scale, SIZE / 2.0 - (p[1] - self.cy) * self.scale)
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

fn polyline(out: &mut String, frame: &Frame, pts: &[[f64; 2]], color: &str, width: f64) {
    let coords: Vec<String> = pts.iter().map(|p| frame.map(*p)).map(|(x, y)| format!("{x:.2},{y:.2}")).collect();
    let _ = writeln!(out, r#"<polyline fill="none" stroke="{color}" stroke-width="{width}" points="{}"/>"#, coords.join(" "));
}

pub fn render(scene: &Scene, comment: &str) -> String {
    let frame = Frame::of(scene);
    let mut out = String::new();
    let _ = writeln!(out, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{SIZE}" height="{SIZE}" viewBox="0 0 {SIZE} {SIZE}">"#);
    let _ = writeln!(out, "<!-- {} -->", escape(comment));
    let _ = writeln!(out, r#"<rect width="100%" height="100%" fill="white"/>"#);
    if scene.disk {
        let (x, y) = frame.map([0.0, 0.0]);
        let _ = writeln!(out, r#"<circle cx="{x}" cy="{y}" r="{}" fill="none" stroke="black"/>"#, frame.scale);
    }
    for (i, t) in scene.trajectories.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        polyline(&mut out, &frame, t, color, 1.0);
        for p in t {
            let (x, y) = frame.map(*p);
            let _ = writeln!(out, r#"<circle cx="{x:.2}" cy="{y:.2}" r="2" fill="{color}"/>"#);
        }
    }
    for (name, p) in &scene.paths {
        let _ = writeln!(out, "<g><title>{}</title>", escape(name));
        polyline(&mut out, &frame, p, "black", 2.5);
        let _ = writeln!(out, "</g>");
    }
    for (p, text) in &scene.labels {
        let (x, y) = frame.map(*p);
        let _ = writeln!(out, r#"<text x="{:.2}" y="{:.2}" font-size="11" font-family="sans-serif">{}</text>"#, x + 4.0, y - 4.0, escape(text));
    }
    out.push_str("</svg>\n");
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn renders_disk_and_paths() {
        let scene = Scene {
            disk: true,
            trajectories: vec![vec![[0.0, 0.0], [0.5, 0.5]]],
            paths: vec![("a<b".into(), vec![[0.1, 0.1], [-0.2, 0.3]])],
            labels: vec![([0.5, 0.5], "leaf".into())],
        };
        let s = render(&scene, "v1");
        assert!(s.starts_with("<svg"));
        assert!(s.trim_end().ends_with("</svg>"));
        assert_eq!(s.matches("<polyline").count(), 2);
        assert!(s.contains("a&lt;b"));
        assert!(s.contains(r#"cx="320" cy="320" r="296""#));
    }

    #[test]
    fn euclidean_frame_fits_points() {
        let scene = Scene { trajectories: vec![vec![[10.0, 10.0], [12.0, 11.0]]], ..Default::default() };
        let f = Frame::of(&scene);
        for p in &scene.trajectories[0] {
            let (x, y) = f.map(*p);
            assert!((MARGIN..=SIZE - MARGIN).contains(&x) && (MARGIN..=SIZE - MARGIN).contains(&y));
        }
    }
}
