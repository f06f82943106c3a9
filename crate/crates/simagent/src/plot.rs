//! Static SVG figures and CSV tables.

use std::fmt::Write as _;
use std::path::Path;

use simagent_core::environment::RolloutBatch;
use simagent_core::geometry::Pose2;
use simagent_core::scenario::Scenario;

use crate::error::{Error, Result};

const W: f64 = 640.0;
const H: f64 = 480.0;
const PAD: f64 = 48.0;
const PALETTE: [&str; 8] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#e377c2", "#17becf"];

struct Frame {
    lo: (f64, f64),
    hi: (f64, f64),
}

impl Frame {
    fn fit(points: impl Iterator<Item = (f64, f64)>, equal: bool) -> Frame {
        let mut lo = (f64::INFINITY, f64::INFINITY);
        let mut hi = (f64::NEG_INFINITY, f64::NEG_INFINITY);
        for (x, y) in points.filter(|p| p.0.is_finite() && p.1.is_finite()) {
            lo = (lo.0.min(x), lo.1.min(y));
            hi = (hi.0.max(x), hi.1.max(y));
        }
        if !lo.0.is_finite() {
            return Frame { lo: (0.0, 0.0), hi: (1.0, 1.0) };
        }
        let grow = |a: f64, b: f64| if b - a < 1e-9 { (a - 0.5, b + 0.5) } else { (a, b) };
        let (x0, x1) = grow(lo.0, hi.0);
        let (y0, y1) = grow(lo.1, hi.1);
        let mut f = Frame { lo: (x0, y0), hi: (x1, y1) };
        if equal {
            let s = ((x1 - x0) / (W - 2.0 * PAD)).max((y1 - y0) / (H - 2.0 * PAD));
            let (cx, cy) = ((x0 + x1) / 2.0, (y0 + y1) / 2.0);
            f.lo = (cx - s * (W - 2.0 * PAD) / 2.0, cy - s * (H - 2.0 * PAD) / 2.0);
            f.hi = (cx + s * (W - 2.0 * PAD) / 2.0, cy + s * (H - 2.0 * PAD) / 2.0);
        }
        f
    }

    fn map(&self, x: f64, y: f64) -> (f64, f64) {
        let u = PAD + (x - self.lo.0) / (self.hi.0 - self.lo.0) * (W - 2.0 * PAD);
        let v = H - PAD - (y - self.lo.1) / (self.hi.1 - self.lo.1) * (H - 2.0 * PAD);
        (u, v)
    }
}

fn header(title: &str) -> String {
    let mut s = String::new();
    let _ = writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}" font-family="sans-serif" font-size="12">"#);
    let _ = writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(s, r#"<text x="{}" y="24" text-anchor="middle" font-size="14">{}</text>"#, W / 2.0, escape(title));
    s
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

fn polyline(s: &mut String, f: &Frame, pts: &[(f64, f64)], color: &str, width: f64, opacity: f64) {
    let d: Vec<String> = pts
        .iter()
        .map(|&(x, y)| {
            let (u, v) = f.map(x, y);
            format!("{u:.2},{v:.2}")
        })
        .collect();
    let _ = writeln!(s, r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="{width}" stroke-opacity="{opacity}"/>"#, d.join(" "));
}

/// Road edges, sampled trajectories and endpoints of one scenario. The
/// recorded future is drawn dashed in black when given.
pub fn rollout_svg(scenario: &Scenario, batch: &RolloutBatch, truth: Option<&[Vec<Pose2>]>, title: &str) -> String {
    let edges = scenario.road_edges();
    let pts = batch.rollouts.iter().flat_map(|r| r.poses.iter().flatten().map(|p| (p.x, p.y))).chain(batch.start_poses.iter().map(|p| (p.x, p.y)));
    let f = Frame::fit(pts, true);
    let mut s = header(title);
    for e in &edges {
        let p: Vec<(f64, f64)> = e.points().iter().map(|v| (v.x, v.y)).collect();
        polyline(&mut s, &f, &p, "#888", 1.5, 1.0);
    }
    for r in &batch.rollouts {
        for (a, traj) in r.poses.iter().enumerate() {
            let color = PALETTE[a % PALETTE.len()];
            let mut p = vec![(batch.start_poses[a].x, batch.start_poses[a].y)];
            p.extend(traj.iter().map(|q| (q.x, q.y)));
            polyline(&mut s, &f, &p, color, 1.0, 0.35);
            let (u, v) = f.map(traj.last().map_or(p[0].0, |q| q.x), traj.last().map_or(p[0].1, |q| q.y));
            let _ = writeln!(s, r#"<circle cx="{u:.2}" cy="{v:.2}" r="2" fill="{color}"/>"#);
        }
    }
    if let Some(gt) = truth {
        for (a, traj) in gt.iter().enumerate() {
            let mut p = vec![(batch.start_poses[a].x, batch.start_poses[a].y)];
            p.extend(traj.iter().map(|q| (q.x, q.y)));
            let d: Vec<String> = p
                .iter()
                .map(|&(x, y)| {
                    let (u, v) = f.map(x, y);
                    format!("{u:.2},{v:.2}")
                })
                .collect();
            let _ = writeln!(s, r#"<polyline points="{}" fill="none" stroke="black" stroke-width="1.5" stroke-dasharray="4 3"/>"#, d.join(" "));
        }
    }
    s.push_str("</svg>\n");
    s
}

/// Line chart of named series over a shared x axis.
pub fn line_svg(title: &str, x_label: &str, series: &[(String, Vec<(f64, f64)>)]) -> String {
    let f = Frame::fit(series.iter().flat_map(|(_, p)| p.iter().copied()), false);
    let mut s = header(title);
    let (x0, y0) = f.map(f.lo.0, f.lo.1);
    let (x1, y1) = f.map(f.hi.0, f.hi.1);
    let _ = writeln!(s, r#"<path d="M{x0:.1},{y1:.1} L{x0:.1},{y0:.1} L{x1:.1},{y0:.1}" fill="none" stroke="black"/>"#);
    let _ = writeln!(s, r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{}</text>"#, (x0 + x1) / 2.0, H - 12.0, escape(x_label));
    for (v, y) in [(f.lo.1, y0), (f.hi.1, y1)] {
        let _ = writeln!(s, r#"<text x="{:.1}" y="{:.1}" text-anchor="end">{v:.3}</text>"#, x0 - 4.0, y + 4.0);
    }
    for (i, (name, pts)) in series.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        polyline(&mut s, &f, pts, color, 1.5, 1.0);
        let _ = writeln!(s, r#"<text x="{:.1}" y="{:.1}" fill="{color}">{}</text>"#, x1 - 120.0, PAD + 16.0 * i as f64, escape(name));
    }
    s.push_str("</svg>\n");
    s
}

/// Horizontal bar chart, one bar per labelled value in [0, max].
pub fn bar_svg(title: &str, bars: &[(String, f64)]) -> String {
    let mut s = header(title);
    let max = bars.iter().map(|b| b.1).fold(0.0f64, f64::max).max(1e-12);
    let row = (H - 2.0 * PAD) / bars.len().max(1) as f64;
    for (i, (label, v)) in bars.iter().enumerate() {
        let y = PAD + row * i as f64;
        let w = (W - 2.0 * PAD - 160.0) * v / max;
        let _ = writeln!(s, r#"<text x="{:.1}" y="{:.1}" text-anchor="end">{}</text>"#, PAD + 150.0, y + row * 0.6, escape(label));
        let _ = writeln!(s, r##"<rect x="{:.1}" y="{:.1}" width="{w:.1}" height="{:.1}" fill="#1f77b4"/>"##, PAD + 160.0, y + row * 0.15, row * 0.7);
        let _ = writeln!(s, r#"<text x="{:.1}" y="{:.1}">{v:.4}</text>"#, PAD + 164.0 + w, y + row * 0.6);
    }
    s.push_str("</svg>\n");
    s
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn write_csv(path: &Path, header: &[&str], rows: &[Vec<String>]) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let err = |e: csv::Error| Error::format(path, e);
    w.write_record(header).map_err(err)?;
    for r in rows {
        w.write_record(r).map_err(err)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::format(path, e))?;
    write_text(path, &String::from_utf8(bytes).expect("csv is utf-8"))
}
