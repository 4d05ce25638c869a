//! Minimal deterministic SVG output: filled contour maps with marching-squares
//! iso-lines, trajectory overlays and loss-history line charts.
//!
//! Coordinates are printed with fixed precision so equal input gives equal
//! bytes.

use std::fmt::Write as _;

use pugd_core::landscape::{LandscapeGrid, Trajectory};
use pugd_core::StepRecord;

use crate::runlog::RunLog;

/// Fill for cells whose loss hit the clip ceiling.
pub const CLIPPED_COLOR: &str = "#ff00ff";
const CONTOUR_LEVELS: usize = 12;

const SERIES_COLORS: [&str; 8] = [
    "#e41a1c", "#377eb8", "#4daf4a", "#984ea3", "#ff7f00", "#a65628", "#f781bf", "#222222",
];

/// Viridis-like ramp sampled at five stops.
const RAMP: [(f64, f64, f64); 5] = [
    (68.0, 1.0, 84.0),
    (59.0, 82.0, 139.0),
    (33.0, 145.0, 140.0),
    (94.0, 201.0, 98.0),
    (253.0, 231.0, 37.0),
];

fn ramp(t: f64) -> String {
    let t = t.clamp(0.0, 1.0) * (RAMP.len() - 1) as f64;
    let i = (t.floor() as usize).min(RAMP.len() - 2);
    let f = t - i as f64;
    let (a, b) = (RAMP[i], RAMP[i + 1]);
    let mix = |x: f64, y: f64| (x + (y - x) * f).round() as u8;
    format!("#{:02x}{:02x}{:02x}", mix(a.0, b.0), mix(a.1, b.1), mix(a.2, b.2))
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Linear map from a data interval onto a pixel interval.
#[derive(Clone, Copy)]
struct Axis {
    lo: f64,
    hi: f64,
    p0: f64,
    p1: f64,
}

impl Axis {
    fn new(lo: f64, hi: f64, p0: f64, p1: f64) -> Self {
        // a degenerate range is widened so every value maps to the middle
        let (lo, hi) = if hi > lo { (lo, hi) } else { (lo - 0.5, hi + 0.5) };
        Self { lo, hi, p0, p1 }
    }

    fn map(&self, v: f64) -> f64 {
        self.p0 + (v - self.lo) / (self.hi - self.lo) * (self.p1 - self.p0)
    }
}

/// Iso-line segments of `z` (indexed `[i][j]` over `xs` by `ys`) at `level`.
///
/// Saddle cells are resolved with the cell-center average.
pub fn marching_squares(xs: &[f64], ys: &[f64], z: &dyn Fn(usize, usize) -> f64, level: f64) -> Vec<[(f64, f64); 2]> {
    let mut segments = Vec::new();
    for i in 0..xs.len().saturating_sub(1) {
        for j in 0..ys.len().saturating_sub(1) {
            // corners counter-clockwise from the lower-left
            let c = [
                (xs[i], ys[j], z(i, j)),
                (xs[i + 1], ys[j], z(i + 1, j)),
                (xs[i + 1], ys[j + 1], z(i + 1, j + 1)),
                (xs[i], ys[j + 1], z(i, j + 1)),
            ];
            let above: Vec<bool> = c.iter().map(|p| p.2 > level).collect();
            let edge = |e: usize| -> Option<(f64, f64)> {
                let (a, b) = (c[e], c[(e + 1) % 4]);
                if above[e] == above[(e + 1) % 4] {
                    return None;
                }
                let t = (level - a.2) / (b.2 - a.2);
                Some((a.0 + t * (b.0 - a.0), a.1 + t * (b.1 - a.1)))
            };
            let crossings: Vec<(usize, (f64, f64))> = (0..4).filter_map(|e| edge(e).map(|p| (e, p))).collect();
            match crossings.len() {
                2 => segments.push([crossings[0].1, crossings[1].1]),
                4 => {
                    let center = c.iter().map(|p| p.2).sum::<f64>() / 4.0 > level;
                    let p = |e: usize| crossings[e].1;
                    if above[0] == center {
                        segments.push([p(0), p(1)]);
                        segments.push([p(2), p(3)]);
                    } else {
                        segments.push([p(3), p(0)]);
                        segments.push([p(1), p(2)]);
                    }
                }
                _ => {}
            }
        }
    }
    segments
}

fn marker(out: &mut String, shape: usize, x: f64, y: f64, color: &str) {
    let r = 3.5;
    let _ = match shape % 4 {
        0 => writeln!(out, r#"<circle cx="{x:.2}" cy="{y:.2}" r="{r}" fill="{color}"/>"#),
        1 => writeln!(
            out,
            r#"<rect x="{:.2}" y="{:.2}" width="{}" height="{}" fill="{color}"/>"#,
            x - r,
            y - r,
            2.0 * r,
            2.0 * r
        ),
        2 => writeln!(
            out,
            r#"<polygon points="{:.2},{:.2} {:.2},{:.2} {:.2},{:.2}" fill="{color}"/>"#,
            x,
            y - r,
            x + r,
            y + r,
            x - r,
            y + r
        ),
        _ => writeln!(
            out,
            r#"<polygon points="{:.2},{:.2} {:.2},{:.2} {:.2},{:.2} {:.2},{:.2}" fill="{color}"/>"#,
            x,
            y - r,
            x + r,
            y,
            x,
            y + r,
            x - r,
            y
        ),
    };
}

/// Contour map of the train (or test) terrain with trajectory overlays.
pub fn landscape_svg(grid: &LandscapeGrid, test: bool, trajectories: &[Trajectory], title: &str) -> String {
    let (w, h) = (760.0, 600.0);
    let (left, top, size) = (60.0, 40.0, 520.0);
    let (na, nb) = grid.shape();
    let values = match (&grid.test_loss, test) {
        (Some(t), true) => t,
        _ => &grid.train_loss,
    };
    let log_z = |i: usize, j: usize| values[[i, j]].max(1e-300).log10();

    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for i in 0..na {
        for j in 0..nb {
            if !grid.clipped[[i, j]] {
                lo = lo.min(log_z(i, j));
                hi = hi.max(log_z(i, j));
            }
        }
    }
    let flat = !(hi - lo > 1e-12);

    let (a0, a1) = (grid.alphas[0], grid.alphas[na - 1]);
    let (b0, b1) = (grid.betas[0], grid.betas[nb - 1]);
    let half_a = if na > 1 { (a1 - a0) / (na - 1) as f64 / 2.0 } else { 0.5 };
    let half_b = if nb > 1 { (b1 - b0) / (nb - 1) as f64 / 2.0 } else { 0.5 };
    let xa = Axis::new(a0 - half_a, a1 + half_a, left, left + size);
    let yb = Axis::new(b0 - half_b, b1 + half_b, top + size, top);

    let mut out = String::new();
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(out, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
    let _ = writeln!(out, r#"<text x="{left}" y="24" font-size="15">{}</text>"#, escape(title));
    let _ = writeln!(
        out,
        r#"<defs><clipPath id="plot"><rect x="{left}" y="{top}" width="{size}" height="{size}"/></clipPath></defs>"#
    );

    let _ = writeln!(out, r#"<g shape-rendering="crispEdges">"#);
    for i in 0..na {
        for j in 0..nb {
            let color = if grid.clipped[[i, j]] {
                CLIPPED_COLOR.to_string()
            } else if flat {
                ramp(0.5)
            } else {
                ramp((log_z(i, j) - lo) / (hi - lo))
            };
            let (x0, x1) = (xa.map(grid.alphas[i] - half_a), xa.map(grid.alphas[i] + half_a));
            let (y0, y1) = (yb.map(grid.betas[j] + half_b), yb.map(grid.betas[j] - half_b));
            let _ = writeln!(
                out,
                r#"<rect x="{x0:.2}" y="{y0:.2}" width="{:.2}" height="{:.2}" fill="{color}"/>"#,
                x1 - x0,
                y1 - y0
            );
        }
    }
    let _ = writeln!(out, "</g>");

    if !flat {
        let _ = writeln!(out, r#"<g stroke="white" stroke-opacity="0.7" stroke-width="0.8" fill="none">"#);
        for k in 1..=CONTOUR_LEVELS {
            let level = lo + (hi - lo) * k as f64 / (CONTOUR_LEVELS + 1) as f64;
            let segs = marching_squares(&grid.alphas, &grid.betas, &log_z, level);
            if segs.is_empty() {
                continue;
            }
            let mut d = String::new();
            for [p, q] in segs {
                let _ = write!(
                    d,
                    "M{:.2} {:.2}L{:.2} {:.2}",
                    xa.map(p.0),
                    yb.map(p.1),
                    xa.map(q.0),
                    yb.map(q.1)
                );
            }
            let _ = writeln!(out, r#"<path d="{d}"/>"#);
        }
        let _ = writeln!(out, "</g>");
    }

    let _ = writeln!(out, r#"<g clip-path="url(#plot)">"#);
    for (k, t) in trajectories.iter().enumerate() {
        let color = SERIES_COLORS[k % SERIES_COLORS.len()];
        let pts: Vec<String> = t
            .points
            .iter()
            .map(|p| format!("{:.2},{:.2}", xa.map(p.alpha), yb.map(p.beta)))
            .collect();
        let _ = writeln!(
            out,
            r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="1.5" stroke-dasharray="4 2"/>"#,
            pts.join(" ")
        );
        for p in &t.points {
            marker(&mut out, k, xa.map(p.alpha), yb.map(p.beta), color);
        }
    }
    let _ = writeln!(out, "</g>");

    let _ = writeln!(
        out,
        r#"<rect x="{left}" y="{top}" width="{size}" height="{size}" fill="none" stroke="black"/>"#
    );
    let bottom = top + size;
    let _ = writeln!(out, r#"<text x="{left}" y="{:.2}">{a0}</text>"#, bottom + 16.0);
    let _ = writeln!(
        out,
        r#"<text x="{:.2}" y="{:.2}" text-anchor="end">{a1}</text>"#,
        left + size,
        bottom + 16.0
    );
    let _ = writeln!(
        out,
        r#"<text x="{:.2}" y="{:.2}" text-anchor="middle">alpha</text>"#,
        left + size / 2.0,
        bottom + 30.0
    );
    let _ = writeln!(out, r#"<text x="{:.2}" y="{bottom}" text-anchor="end">{b0}</text>"#, left - 6.0);
    let _ = writeln!(out, r#"<text x="{:.2}" y="{:.2}" text-anchor="end">{b1}</text>"#, left - 6.0, top + 10.0);
    let _ = writeln!(
        out,
        r#"<text x="16" y="{:.2}" transform="rotate(-90 16 {:.2})" text-anchor="middle">beta</text>"#,
        top + size / 2.0,
        top + size / 2.0
    );

    let lx = left + size + 20.0;
    if !flat {
        let _ = writeln!(out, r#"<text x="{lx}" y="{:.2}">log10 loss</text>"#, top + 10.0);
        let _ = writeln!(out, r#"<text x="{lx}" y="{:.2}">{hi:.3} .. {lo:.3}</text>"#, top + 26.0);
    }
    let _ = writeln!(
        out,
        r#"<rect x="{lx}" y="{:.2}" width="10" height="10" fill="{CLIPPED_COLOR}"/><text x="{:.2}" y="{:.2}">clipped</text>"#,
        top + 36.0,
        lx + 16.0,
        top + 45.0
    );
    for (k, t) in trajectories.iter().enumerate() {
        let y = top + 70.0 + 18.0 * k as f64;
        let color = SERIES_COLORS[k % SERIES_COLORS.len()];
        marker(&mut out, k, lx + 5.0, y - 4.0, color);
        let _ = writeln!(out, r#"<text x="{:.2}" y="{y:.2}">{}</text>"#, lx + 16.0, escape(&t.optimizer_name));
    }
    out.push_str("</svg>\n");
    out
}

type Series = (String, Vec<(f64, f64)>);

fn line_panel(out: &mut String, x: f64, y: f64, w: f64, h: f64, title: &str, series: &[Series], log_y: bool) {
    let tf = |v: f64| if log_y { v.max(1e-300).log10() } else { v };
    let pts = series.iter().flat_map(|(_, p)| p.iter()).filter(|p| p.1.is_finite());
    let (mut x_lo, mut x_hi, mut y_lo, mut y_hi) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for &(px, py) in pts {
        x_lo = x_lo.min(px);
        x_hi = x_hi.max(px);
        y_lo = y_lo.min(tf(py));
        y_hi = y_hi.max(tf(py));
    }
    let _ = writeln!(out, r#"<text x="{x}" y="{:.2}" font-size="14">{}</text>"#, y - 8.0, escape(title));
    let _ = writeln!(
        out,
        r#"<rect x="{x}" y="{y}" width="{w}" height="{h}" fill="none" stroke="black"/>"#
    );
    if !x_lo.is_finite() {
        return;
    }
    let xa = Axis::new(x_lo, x_hi, x, x + w);
    let ya = Axis::new(y_lo, y_hi, y + h, y);
    for (k, (_, points)) in series.iter().enumerate() {
        let color = SERIES_COLORS[k % SERIES_COLORS.len()];
        let p: Vec<String> = points
            .iter()
            .filter(|p| p.1.is_finite())
            .map(|&(px, py)| format!("{:.2},{:.2}", xa.map(px), ya.map(tf(py))))
            .collect();
        let _ = writeln!(
            out,
            r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="1.2"/>"#,
            p.join(" ")
        );
    }
    let label = |v: f64| if log_y { format!("1e{v:.2}") } else { format!("{v:.4}") };
    let _ = writeln!(out, r#"<text x="{:.2}" y="{:.2}" text-anchor="end">{}</text>"#, x - 4.0, y + 10.0, label(y_hi));
    let _ = writeln!(out, r#"<text x="{:.2}" y="{:.2}" text-anchor="end">{}</text>"#, x - 4.0, y + h, label(y_lo));
    let _ = writeln!(out, r#"<text x="{x}" y="{:.2}">{x_lo}</text>"#, y + h + 14.0);
    let _ = writeln!(out, r#"<text x="{:.2}" y="{:.2}" text-anchor="end">{x_hi}</text>"#, x + w, y + h + 14.0);
}

/// Test loss per epoch and gradient dual-norm per step, one line per run.
pub fn history_svg(logs: &[&RunLog]) -> String {
    let (w, h) = (820.0, 640.0);
    let mut out = String::new();
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(out, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
    let loss: Vec<Series> = logs
        .iter()
        .map(|l| {
            let pts = l.epochs.iter().map(|e| (e.epoch as f64, e.test_loss)).collect();
            (l.metadata.optimizer.clone(), pts)
        })
        .collect();
    let grads: Vec<Series> = logs
        .iter()
        .map(|l| (l.metadata.optimizer.clone(), grad_series(&l.steps)))
        .collect();
    line_panel(&mut out, 80.0, 40.0, 560.0, 240.0, "test loss per epoch", &loss, false);
    line_panel(&mut out, 80.0, 360.0, 560.0, 240.0, "gradient dual-norm per step (log scale)", &grads, true);
    for (k, (name, _)) in loss.iter().enumerate() {
        let y = 60.0 + 18.0 * k as f64;
        let color = SERIES_COLORS[k % SERIES_COLORS.len()];
        let _ = writeln!(
            out,
            r#"<rect x="660" y="{:.2}" width="12" height="3" fill="{color}"/><text x="678" y="{y:.2}">{}</text>"#,
            y - 5.0,
            escape(name)
        );
    }
    out.push_str("</svg>\n");
    out
}

fn grad_series(steps: &[StepRecord]) -> Vec<(f64, f64)> {
    steps.iter().map(|r| (r.step_index as f64, r.grad_dual_norm)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;
    use std::collections::BTreeMap;

    fn grid(f: impl Fn(f64, f64) -> f64) -> LandscapeGrid {
        let axis: Vec<f64> = (0..5).map(|i| i as f64 - 2.0).collect();
        let train = Array2::from_shape_fn((5, 5), |(i, j)| f(axis[i], axis[j]));
        LandscapeGrid {
            alphas: axis.clone(),
            betas: axis,
            clipped: train.map(|&v| v >= 1e6),
            train_loss: train,
            test_loss: None,
            clip_ceiling: 1e6,
            anchor_meta: BTreeMap::new(),
        }
    }

    #[test]
    fn constant_grid_has_single_fill_and_no_contours() {
        let svg = landscape_svg(&grid(|_, _| 3.0), false, &[], "flat");
        assert!(!svg.contains("<path"));
        let fills: std::collections::BTreeSet<&str> = svg
            .match_indices("fill=\"")
            .map(|(i, _)| &svg[i + 6..i + 13])
            .filter(|c| c.starts_with('#'))
            .collect();
        assert!(fills.contains(ramp(0.5).as_str()));
        assert!(!svg.contains("polyline"));
    }

    #[test]
    fn bowl_renders_contours_and_sentinel() {
        let svg = landscape_svg(&grid(|a, b| if a == 2.0 && b == 2.0 { 1e6 } else { a * a + b * b + 0.1 }), false, &[], "bowl");
        assert!(svg.contains("<path"));
        assert!(svg.contains(&format!(r#"fill="{CLIPPED_COLOR}""#)));
        assert_eq!(svg, landscape_svg(&grid(|a, b| if a == 2.0 && b == 2.0 { 1e6 } else { a * a + b * b + 0.1 }), false, &[], "bowl"));
    }

    #[test]
    fn marching_squares_circle_crossings() {
        let xs: Vec<f64> = (0..3).map(|i| i as f64).collect();
        let z = |i: usize, j: usize| (i as f64 - 1.0).powi(2) + (j as f64 - 1.0).powi(2);
        let segs = marching_squares(&xs, &xs, &z, 0.5);
        assert_eq!(segs.len(), 4);
        for s in segs {
            for p in s {
                // crossings sit halfway along edges touching the center node
                let d = ((p.0 - 1.0).powi(2) + (p.1 - 1.0).powi(2)).sqrt();
                assert!((d - 0.5).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn saddle_resolved_by_center() {
        let xs = [0.0, 1.0];
        let z = |i: usize, j: usize| if (i + j) % 2 == 0 { 1.0 } else { 0.0 };
        assert_eq!(marching_squares(&xs, &xs, &z, 0.5).len(), 2);
    }
}
