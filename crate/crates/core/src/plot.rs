//! Standalone SVG scatter plots with an optional density level-set overlay.
//!
//! The level set `{x : log p(x) >= t}` is traced with marching squares on a
//! regular grid. Saddle cells are resolved by the value at the cell centre.

use std::collections::HashMap;
use std::fmt::Write as _;

use thiserror::Error;

use crate::points::PointSet;
use crate::targets::{level_set_threshold, sample_target, TargetError, TargetSpec};

#[derive(Debug, Error)]
pub enum PlotError {
    #[error("invalid plot input: {0}")]
    Input(String),
    #[error(transparent)]
    Target(#[from] TargetError),
}

pub type Result<T> = std::result::Result<T, PlotError>;

#[derive(Debug, Clone, PartialEq)]
pub struct PlotOptions {
    pub width: u32,
    pub height: u32,
    /// Level-set mass `alpha`; `None` draws no contour.
    pub levelset: Option<f64>,
    pub grid: usize,
    /// Draws used to place the level-set threshold.
    pub level_samples: usize,
    /// Number of target draws shown behind the samples.
    pub target_samples: usize,
    pub seed: u64,
}

impl Default for PlotOptions {
    fn default() -> Self {
        PlotOptions {
            width: 600,
            height: 600,
            levelset: None,
            grid: 200,
            level_samples: 100_000,
            target_samples: 0,
            seed: 0,
        }
    }
}

/// Axis-aligned plotting window.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Bounds {
    pub x_min: f64,
    pub x_max: f64,
    pub y_min: f64,
    pub y_max: f64,
}

impl Bounds {
    fn empty() -> Self {
        Bounds {
            x_min: f64::INFINITY,
            x_max: f64::NEG_INFINITY,
            y_min: f64::INFINITY,
            y_max: f64::NEG_INFINITY,
        }
    }

    fn include(&mut self, x: f64, y: f64) {
        if x.is_finite() && y.is_finite() {
            self.x_min = self.x_min.min(x);
            self.x_max = self.x_max.max(x);
            self.y_min = self.y_min.min(y);
            self.y_max = self.y_max.max(y);
        }
    }

    /// Grows each side by `frac` of its extent; degenerate extents get width 2.
    fn padded(self, frac: f64) -> Self {
        if !self.x_min.is_finite() {
            return Bounds {
                x_min: -1.0,
                x_max: 1.0,
                y_min: -1.0,
                y_max: 1.0,
            };
        }
        let pad = |lo: f64, hi: f64| {
            let w = hi - lo;
            if w > 0.0 {
                (lo - frac * w, hi + frac * w)
            } else {
                (lo - 1.0, hi + 1.0)
            }
        };
        let (x_min, x_max) = pad(self.x_min, self.x_max);
        let (y_min, y_max) = pad(self.y_min, self.y_max);
        Bounds {
            x_min,
            x_max,
            y_min,
            y_max,
        }
    }
}

/// Window covering every finite sample and, for mixtures, each mean ± 5σ.
pub fn plot_bounds(spec: &TargetSpec, sets: &[&PointSet]) -> Bounds {
    let mut b = Bounds::empty();
    for set in sets {
        for p in set.iter() {
            b.include(p[0], p[1]);
        }
    }
    if let TargetSpec::Mixture(m) = spec {
        let r = 5.0 * m.sigma;
        for [mx, my] in m.means() {
            b.include(mx - r, my - r);
            b.include(mx + r, my + r);
        }
    }
    b.padded(0.05)
}

/// Values of `field` on an `n × n` lattice spanning `bounds`, indexed
/// `[j * n + i]` for the point `(x_i, y_j)`.
#[derive(Debug, Clone)]
pub struct Grid {
    pub n: usize,
    pub bounds: Bounds,
    pub values: Vec<f64>,
}

impl Grid {
    pub fn sample(bounds: Bounds, n: usize, field: impl Fn(f64, f64) -> f64) -> Self {
        let mut values = Vec::with_capacity(n * n);
        for j in 0..n {
            for i in 0..n {
                let (x, y) = Self::coords(&bounds, n, i, j);
                values.push(field(x, y));
            }
        }
        Grid { n, bounds, values }
    }

    fn coords(b: &Bounds, n: usize, i: usize, j: usize) -> (f64, f64) {
        let t = |k: usize| k as f64 / (n - 1) as f64;
        (
            b.x_min + (b.x_max - b.x_min) * t(i),
            b.y_min + (b.y_max - b.y_min) * t(j),
        )
    }

    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.values[j * self.n + i]
    }

    pub fn point(&self, i: usize, j: usize) -> (f64, f64) {
        Self::coords(&self.bounds, self.n, i, j)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Polyline {
    pub points: Vec<(f64, f64)>,
    pub closed: bool,
}

/// Traces the boundary of `{v >= level}` through `grid`.
pub fn contour_lines(grid: &Grid, level: f64) -> Vec<Polyline> {
    let n = grid.n;
    if n < 2 {
        return Vec::new();
    }
    let horizontal = (n - 1) * n;
    let h_edge = |i: usize, j: usize| j * (n - 1) + i;
    let v_edge = |i: usize, j: usize| horizontal + j * n + i;
    let inside = |i: usize, j: usize| grid.at(i, j) >= level;

    let mut crossing: HashMap<usize, (f64, f64)> = HashMap::new();
    let mut cross = |id: usize, a: (usize, usize), b: (usize, usize)| {
        crossing.entry(id).or_insert_with(|| {
            let (va, vb) = (grid.at(a.0, a.1), grid.at(b.0, b.1));
            let t = ((level - va) / (vb - va)).clamp(0.0, 1.0);
            let (pa, pb) = (grid.point(a.0, a.1), grid.point(b.0, b.1));
            (pa.0 + t * (pb.0 - pa.0), pa.1 + t * (pb.1 - pa.1))
        });
        id
    };

    let mut segments: Vec<(usize, usize)> = Vec::new();
    for j in 0..n - 1 {
        for i in 0..n - 1 {
            let corners = [(i, j), (i + 1, j), (i + 1, j + 1), (i, j + 1)];
            let ins = corners.map(|(a, b)| inside(a, b));
            // bottom, right, top, left
            let edges = [
                (h_edge(i, j), corners[0], corners[1]),
                (v_edge(i + 1, j), corners[1], corners[2]),
                (h_edge(i, j + 1), corners[3], corners[2]),
                (v_edge(i, j), corners[0], corners[3]),
            ];
            let cut = [ins[0] != ins[1], ins[1] != ins[2], ins[2] != ins[3], ins[3] != ins[0]];
            let cut_edges: Vec<usize> = (0..4).filter(|&e| cut[e]).collect();
            let pairs: Vec<(usize, usize)> = match cut_edges.len() {
                0 => continue,
                2 => vec![(cut_edges[0], cut_edges[1])],
                _ => {
                    let centre = corners.iter().map(|&(a, b)| grid.at(a, b)).sum::<f64>() / 4.0;
                    // Isolate corners 1 and 3 or corners 0 and 2.
                    if (centre >= level) == ins[0] {
                        vec![(0, 1), (3, 2)]
                    } else {
                        vec![(3, 0), (1, 2)]
                    }
                }
            };
            for (a, b) in pairs {
                let (ea, pa0, pa1) = edges[a];
                let (eb, pb0, pb1) = edges[b];
                segments.push((cross(ea, pa0, pa1), cross(eb, pb0, pb1)));
            }
        }
    }
    chain_segments(&segments, &crossing)
}

fn chain_segments(segments: &[(usize, usize)], at: &HashMap<usize, (f64, f64)>) -> Vec<Polyline> {
    let mut incident: HashMap<usize, Vec<usize>> = HashMap::new();
    for (s, &(a, b)) in segments.iter().enumerate() {
        incident.entry(a).or_default().push(s);
        incident.entry(b).or_default().push(s);
    }
    let mut used = vec![false; segments.len()];
    let mut lines = Vec::new();

    let walk = |start_seg: usize, start_edge: usize, used: &mut Vec<bool>| {
        let mut edges = vec![start_edge];
        let mut seg = start_seg;
        let mut edge = start_edge;
        loop {
            used[seg] = true;
            let (a, b) = segments[seg];
            edge = if a == edge { b } else { a };
            edges.push(edge);
            match incident[&edge].iter().find(|&&s| !used[s]) {
                Some(&next) => seg = next,
                None => break,
            }
        }
        let closed = edges.len() > 2 && edges.first() == edges.last();
        Polyline {
            points: edges.iter().map(|e| at[e]).collect(),
            closed,
        }
    };

    // Open chains start at degree-one edges, which only occur on the grid border.
    let mut ends: Vec<usize> = incident
        .iter()
        .filter(|(_, s)| s.len() == 1)
        .map(|(&e, _)| e)
        .collect();
    ends.sort_unstable();
    for e in ends {
        let s = incident[&e][0];
        if !used[s] {
            lines.push(walk(s, e, &mut used));
        }
    }
    for s in 0..segments.len() {
        if !used[s] {
            lines.push(walk(s, segments[s].0, &mut used));
        }
    }
    lines
}

fn fmt_px(v: f64) -> String {
    let s = format!("{v:.2}");
    let s = s.trim_end_matches('0').trim_end_matches('.');
    if s == "-0" { "0".into() } else { s.into() }
}

struct Canvas {
    bounds: Bounds,
    width: f64,
    height: f64,
    margin: f64,
}

impl Canvas {
    fn map(&self, x: f64, y: f64) -> (f64, f64) {
        let b = &self.bounds;
        let w = self.width - 2.0 * self.margin;
        let h = self.height - 2.0 * self.margin;
        (
            self.margin + (x - b.x_min) / (b.x_max - b.x_min) * w,
            self.margin + (b.y_max - y) / (b.y_max - b.y_min) * h,
        )
    }
}

fn scatter(out: &mut String, canvas: &Canvas, points: &PointSet, id: &str, colour: &str, radius: f64) {
    let _ = writeln!(out, r#"<g id="{id}" fill="{colour}" fill-opacity="0.6">"#);
    for p in points.iter() {
        if !(p[0].is_finite() && p[1].is_finite()) {
            continue;
        }
        let (cx, cy) = canvas.map(p[0], p[1]);
        let _ = writeln!(out, r#"<circle cx="{}" cy="{}" r="{radius}"/>"#, fmt_px(cx), fmt_px(cy));
    }
    out.push_str("</g>\n");
}

/// Renders `samples` (2D) as an SVG document.
///
/// With `opts.levelset` set and a density available, the region holding
/// that much target mass is outlined. Non-finite points are not drawn.
pub fn render_svg(spec: &TargetSpec, samples: &PointSet, opts: &PlotOptions) -> Result<String> {
    if samples.dim() != 2 {
        return Err(PlotError::Input(format!("expected 2 columns, found {}", samples.dim())));
    }
    if opts.width == 0 || opts.height == 0 || opts.grid < 2 {
        return Err(PlotError::Input("width, height must be positive and grid >= 2".into()));
    }
    let reference = if opts.target_samples > 0 {
        Some(sample_target(spec, opts.target_samples, opts.seed)?)
    } else {
        None
    };
    let mut sets = vec![samples];
    sets.extend(reference.as_ref());
    let canvas = Canvas {
        bounds: plot_bounds(spec, &sets),
        width: opts.width as f64,
        height: opts.height as f64,
        margin: 20.0,
    };

    let mut out = String::new();
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}">"#,
        w = opts.width,
        h = opts.height
    );
    out.push_str("<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n");
    if let Some(r) = &reference {
        scatter(&mut out, &canvas, r, "target-samples", "#d62728", 1.5);
    }
    scatter(&mut out, &canvas, samples, "samples", "#1f77b4", 1.5);

    if let (Some(alpha), true) = (opts.levelset, spec.has_density()) {
        let threshold = level_set_threshold(spec, alpha, opts.level_samples, opts.seed)?;
        let grid = Grid::sample(canvas.bounds, opts.grid, |x, y| {
            spec.log_density(&[x, y]).unwrap_or(f64::NEG_INFINITY)
        });
        let lines = contour_lines(&grid, threshold);
        let _ = writeln!(
            out,
            r#"<g id="levelset" data-alpha="{alpha}" fill="none" stroke="black" stroke-width="1">"#
        );
        for line in &lines {
            let pts: Vec<String> = line
                .points
                .iter()
                .map(|&(x, y)| {
                    let (px, py) = canvas.map(x, y);
                    format!("{},{}", fmt_px(px), fmt_px(py))
                })
                .collect();
            let class = if line.closed { "closed" } else { "open" };
            let _ = writeln!(out, r#"<polyline class="{class}" points="{}"/>"#, pts.join(" "));
        }
        out.push_str("</g>\n");
    }
    out.push_str("</svg>\n");
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::targets::GaussianMixtureTarget;

    /// Connected components of `{v >= level}` under 4-neighbour adjacency.
    fn superlevel_components(grid: &Grid, level: f64) -> usize {
        let n = grid.n;
        let mut seen = vec![false; n * n];
        let mut count = 0;
        for start in 0..n * n {
            if seen[start] || grid.values[start] < level {
                continue;
            }
            count += 1;
            let mut stack = vec![start];
            seen[start] = true;
            while let Some(c) = stack.pop() {
                let (i, j) = (c % n, c / n);
                let mut nb = Vec::new();
                if i > 0 {
                    nb.push(c - 1);
                }
                if i + 1 < n {
                    nb.push(c + 1);
                }
                if j > 0 {
                    nb.push(c - n);
                }
                if j + 1 < n {
                    nb.push(c + n);
                }
                for m in nb {
                    if !seen[m] && grid.values[m] >= level {
                        seen[m] = true;
                        stack.push(m);
                    }
                }
            }
        }
        count
    }

    fn unit_bounds() -> Bounds {
        Bounds {
            x_min: -1.0,
            x_max: 1.0,
            y_min: -1.0,
            y_max: 1.0,
        }
    }

    #[test]
    fn circle_contour_is_one_closed_loop_on_the_circle() {
        let grid = Grid::sample(unit_bounds(), 101, |x, y| -(x * x + y * y));
        let lines = contour_lines(&grid, -0.25);
        assert_eq!(lines.len(), 1);
        assert!(lines[0].closed);
        for &(x, y) in &lines[0].points {
            assert!(((x * x + y * y).sqrt() - 0.5).abs() < 2e-3);
        }
    }

    #[test]
    fn field_cut_by_the_border_gives_open_lines() {
        let grid = Grid::sample(unit_bounds(), 50, |x, _| x);
        let lines = contour_lines(&grid, 0.1);
        assert_eq!(lines.len(), 1);
        assert!(!lines[0].closed);
        assert!(lines[0].points.iter().all(|p| (p.0 - 0.1).abs() < 1e-12));
    }

    #[test]
    fn saddle_resolution_follows_the_centre() {
        // Corners 0 and 2 high, 1 and 3 low.
        let bounds = unit_bounds();
        let make = |centre_high: bool| Grid {
            n: 2,
            bounds,
            values: if centre_high { vec![3.0, 0.0, 0.0, 3.0] } else { vec![1.0, 0.0, 0.0, 1.0] },
        };
        // Mean 1.5 >= level 1: high corners joined, two cuts isolate the lows.
        let joined = contour_lines(&make(true), 1.0);
        assert_eq!(joined.len(), 2);
        let bottom_right = joined.iter().any(|l| l.points.iter().all(|p| p.0 > -1.0 && p.1 < 1.0));
        assert!(bottom_right);
        // Mean 0.5 < level 0.9: each high corner gets its own cut.
        let split = contour_lines(&make(false), 0.9);
        assert_eq!(split.len(), 2);
        assert!(split.iter().any(|l| l.points.iter().all(|p| p.0 < 0.0 && p.1 < 0.0)));
    }

    #[test]
    fn mixture_levelset_has_one_loop_per_mode() {
        for k in [1, 2, 3, 6, 9] {
            let spec = TargetSpec::mixture(k);
            let t = level_set_threshold(&spec, 0.975, 20_000, 1).unwrap();
            let empty = PointSet::new(2);
            let grid = Grid::sample(plot_bounds(&spec, &[&empty]), 200, |x, y| {
                spec.log_density(&[x, y]).unwrap()
            });
            let lines = contour_lines(&grid, t);
            assert_eq!(superlevel_components(&grid, t), k, "k={k}");
            assert_eq!(lines.len(), k, "k={k}");
            assert!(lines.iter().all(|l| l.closed));
        }
    }

    #[test]
    fn merged_modes_give_a_single_loop() {
        let spec = TargetSpec::Mixture(GaussianMixtureTarget {
            k: 2,
            radius: 0.3,
            sigma: 0.5,
        });
        let t = level_set_threshold(&spec, 0.9, 20_000, 1).unwrap();
        let grid = Grid::sample(plot_bounds(&spec, &[]), 200, |x, y| spec.log_density(&[x, y]).unwrap());
        assert_eq!(contour_lines(&grid, t).len(), 1);
        assert_eq!(superlevel_components(&grid, t), 1);
    }

    fn ring_points(n: usize) -> PointSet {
        let mut p = PointSet::new(2);
        for i in 0..n {
            let a = i as f64 * 0.1;
            p.push(&[4.0 * a.cos(), 4.0 * a.sin()]);
        }
        p
    }

    #[test]
    fn svg_has_one_circle_per_sample() {
        let spec = TargetSpec::mixture(2);
        let svg = render_svg(&spec, &ring_points(1000), &PlotOptions::default()).unwrap();
        assert!(svg.starts_with("<svg"));
        assert!(svg.trim_end().ends_with("</svg>"));
        assert_eq!(svg.matches("<circle").count(), 1000);
        assert!(!svg.contains("id=\"levelset\""));
    }

    #[test]
    fn svg_levelset_and_target_groups() {
        let spec = TargetSpec::mixture(3);
        let opts = PlotOptions {
            levelset: Some(0.975),
            level_samples: 20_000,
            target_samples: 50,
            seed: 3,
            ..Default::default()
        };
        let svg = render_svg(&spec, &ring_points(10), &opts).unwrap();
        assert_eq!(svg.matches("<circle").count(), 60);
        assert_eq!(svg.matches("<polyline class=\"closed\"").count(), 3);
        assert!(svg.contains("id=\"target-samples\""));
        assert_eq!(svg, render_svg(&spec, &ring_points(10), &opts).unwrap());
    }

    #[test]
    fn no_density_means_no_contour_group() {
        let spec: TargetSpec = "twomoons".parse().unwrap();
        let opts = PlotOptions {
            levelset: Some(0.975),
            ..Default::default()
        };
        let svg = render_svg(&spec, &ring_points(20), &opts).unwrap();
        assert_eq!(svg.matches("<circle").count(), 20);
        assert!(!svg.contains("levelset"));
        assert!(!svg.contains("polyline"));
    }

    #[test]
    fn rejects_bad_input() {
        let spec = TargetSpec::mixture(2);
        assert!(render_svg(&spec, &PointSet::new(3), &PlotOptions::default()).is_err());
        let opts = PlotOptions {
            grid: 1,
            ..Default::default()
        };
        assert!(render_svg(&spec, &ring_points(3), &opts).is_err());
    }

    #[test]
    fn non_finite_points_are_skipped() {
        let spec = TargetSpec::mixture(2);
        let p = PointSet::from_rows(2, [[0.0, 0.0], [f64::NAN, 1.0], [f64::INFINITY, 0.0]]);
        let svg = render_svg(&spec, &p, &PlotOptions::default()).unwrap();
        assert_eq!(svg.matches("<circle").count(), 1);
        assert!(!svg.contains("NaN") && !svg.contains("inf"));
    }
}
