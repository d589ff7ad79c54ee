//! Self-contained SVG output for logit heatmaps and tuple arrow plots.
//!
//! Heatmap colour scale: diverging and symmetric about zero. With
//! `L = max(|min|, |max|)` a value `v` maps to `t = v / L`; `t = -1` is blue
//! `#2166ac`, `t = 0` white and `t = 1` red `#b2182b`, linear in between. A
//! constant matrix is drawn in a single colour and flagged with
//! `data-constant="true"` on the root element. Output is a pure function of the
//! input: no timestamps, fixed number formatting.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::rope::{FakeLogitMap, LogitMap};
use crate::tuples::TupleStats;

const NEG: (f64, f64, f64) = (33.0, 102.0, 172.0);
const POS: (f64, f64, f64) = (178.0, 24.0, 43.0);

/// Grid of cells to draw; `None` cells (e.g. the masked upper triangle) are
/// left empty.
#[derive(Debug, Clone, PartialEq)]
pub struct Heatmap {
    pub title: String,
    pub rows: usize,
    pub cols: usize,
    pub cells: Vec<Option<f64>>,
}

impl Heatmap {
    pub fn from_logit_map(title: impl Into<String>, w: &LogitMap) -> Self {
        let n = w.n();
        let mut cells = vec![None; n * n];
        for (i, j, v) in w.iter() {
            cells[i * n + j] = Some(v);
        }
        Self {
            title: title.into(),
            rows: n,
            cols: n,
            cells,
        }
    }

    pub fn from_matrix(title: impl Into<String>, m: &Matrix) -> Self {
        Self {
            title: title.into(),
            rows: m.rows(),
            cols: m.cols(),
            cells: m.as_slice().iter().map(|&v| Some(v)).collect(),
        }
    }

    pub fn from_fake_map(title: impl Into<String>, w: &FakeLogitMap) -> Self {
        Self::from_matrix(title, &w.values)
    }

    fn range(&self) -> Option<(f64, f64)> {
        let mut it = self.cells.iter().flatten();
        let first = *it.next()?;
        Some(it.fold((first, first), |(lo, hi), &v| (lo.min(v), hi.max(v))))
    }
}

fn color(v: f64, limit: f64) -> String {
    let t = if limit > 0.0 { (v / limit).clamp(-1.0, 1.0) } else { 0.0 };
    let (target, t) = if t < 0.0 { (NEG, -t) } else { (POS, t) };
    let mix = |c: f64| (255.0 + (c - 255.0) * t).round() as u8;
    format!("#{:02x}{:02x}{:02x}", mix(target.0), mix(target.1), mix(target.2))
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

pub fn heatmap_svg(map: &Heatmap) -> Result<String> {
    if map.cells.len() != map.rows * map.cols {
        return Err(Error::DimensionMismatch {
            expected: map.rows * map.cols,
            found: map.cells.len(),
        });
    }
    if map.cells.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::param("heatmap", "values must be finite"));
    }
    let (lo, hi) = map.range().unwrap_or((0.0, 0.0));
    let constant = lo == hi;
    let limit = lo.abs().max(hi.abs());
    let cell = (640 / map.rows.max(map.cols).max(1)).clamp(1, 24);
    let (grid_w, grid_h) = (cell * map.cols, cell * map.rows);
    let (left, top) = (10, 30);
    let legend_x = left + grid_w + 20;
    let width = legend_x + 110;
    let height = (top + grid_h + 10).max(top + 150);

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" viewBox="0 0 {width} {height}" data-kind="heatmap" data-rows="{}" data-cols="{}" data-min="{lo}" data-max="{hi}" data-constant="{constant}">"#,
        map.rows, map.cols
    );
    let _ = writeln!(s, r#"<title>{}</title>"#, escape(&map.title));
    let _ = writeln!(s, r#"<text x="{left}" y="18" font-family="sans-serif" font-size="12">{}</text>"#, escape(&map.title));
    let _ = writeln!(s, r#"<g class="cells" shape-rendering="crispEdges">"#);
    for r in 0..map.rows {
        for c in 0..map.cols {
            if let Some(v) = map.cells[r * map.cols + c] {
                let _ = writeln!(
                    s,
                    r#"<rect class="cell" x="{}" y="{}" width="{cell}" height="{cell}" fill="{}" data-i="{r}" data-j="{c}" data-value="{v}"/>"#,
                    left + c * cell,
                    top + r * cell,
                    color(v, limit)
                );
            }
        }
    }
    let _ = writeln!(s, "</g>");
    let _ = writeln!(s, r#"<g class="legend" font-family="sans-serif" font-size="10">"#);
    if constant {
        let _ = writeln!(
            s,
            r##"<rect class="swatch" x="{legend_x}" y="{top}" width="16" height="100" fill="{}" stroke="#888"/>"##,
            color(lo, limit)
        );
        let _ = writeln!(s, r#"<text x="{}" y="{}">constant {lo}</text>"#, legend_x + 20, top + 50);
    } else {
        let steps = 20;
        for k in 0..steps {
            let v = hi - (hi - lo) * k as f64 / (steps - 1) as f64;
            let _ = writeln!(
                s,
                r#"<rect class="swatch" x="{legend_x}" y="{}" width="16" height="5" fill="{}"/>"#,
                top + k * 5,
                color(v, limit)
            );
        }
        let _ = writeln!(s, r#"<text x="{}" y="{}">max {hi}</text>"#, legend_x + 20, top + 8);
        let _ = writeln!(s, r#"<text x="{}" y="{}">min {lo}</text>"#, legend_x + 20, top + 100);
    }
    let _ = writeln!(s, "</g>");
    s.push_str("</svg>\n");
    Ok(s)
}

pub fn render_heatmap(map: &Heatmap, path: impl AsRef<Path>) -> Result<()> {
    let svg = heatmap_svg(map)?;
    std::fs::write(path.as_ref(), svg).map_err(|e| Error::io(path.as_ref(), e))
}

const PANEL: f64 = 120.0;
const PANELS_PER_ROW: usize = 8;

/// One panel per tuple: an arrow from the origin to the mean key tuple (scaled
/// so the longest arrow spans 40% of a panel), a circle of radius
/// `key_deviation` at its head on the same scale, and an arc sweeping
/// `theta_max` counter-clockwise from the arrow direction. Each panel group
/// carries `data-theta-max`.
pub fn tuple_plot_svg(stats: &[TupleStats]) -> Result<String> {
    if let Some(t) = stats
        .iter()
        .find(|t| !(t.mean_key.iter().all(|x| x.is_finite()) && t.key_deviation.is_finite() && t.theta_max.is_finite()))
    {
        return Err(Error::param("tuple_plot", format!("tuple {} has non-finite statistics", t.index)));
    }
    let longest = stats
        .iter()
        .map(|t| t.mean_key[0].hypot(t.mean_key[1]))
        .fold(0.0f64, f64::max);
    let scale = if longest > 0.0 { 0.4 * PANEL / longest } else { 0.0 };
    let rows = stats.len().div_ceil(PANELS_PER_ROW).max(1);
    let width = PANEL * PANELS_PER_ROW.min(stats.len().max(1)) as f64;
    let height = PANEL * rows as f64;

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" viewBox="0 0 {width} {height}" data-kind="tuple-plot" data-tuples="{}">"#,
        stats.len()
    );
    let _ = writeln!(
        s,
        "<defs><marker id=\"head\" viewBox=\"0 0 10 10\" refX=\"10\" refY=\"5\" markerWidth=\"6\" markerHeight=\"6\" orient=\"auto\"><path d=\"M0,0 L10,5 L0,10 z\" fill=\"#333\"/></marker></defs>"
    );
    for (p, t) in stats.iter().enumerate() {
        let cx = PANEL * (p % PANELS_PER_ROW) as f64 + PANEL / 2.0;
        let cy = PANEL * (p / PANELS_PER_ROW) as f64 + PANEL / 2.0;
        let (kx, ky) = (t.mean_key[0] * scale, t.mean_key[1] * scale);
        let _ = writeln!(
            s,
            r#"<g class="tuple" data-index="{}" data-theta="{}" data-theta-max="{}" data-norm-product="{}">"#,
            t.index, t.theta, t.theta_max, t.norm_product
        );
        let _ = writeln!(
            s,
            r##"<rect x="{:.3}" y="{:.3}" width="{PANEL}" height="{PANEL}" fill="none" stroke="#ddd"/>"##,
            cx - PANEL / 2.0,
            cy - PANEL / 2.0
        );
        let _ = writeln!(
            s,
            r#"<text x="{:.3}" y="{:.3}" font-family="sans-serif" font-size="10">r={}</text>"#,
            cx - PANEL / 2.0 + 4.0,
            cy - PANEL / 2.0 + 12.0,
            t.index
        );
        let _ = writeln!(
            s,
            r##"<line class="arrow" x1="{cx:.3}" y1="{cy:.3}" x2="{:.3}" y2="{:.3}" stroke="#333" stroke-width="1.5" marker-end="url(#head)"/>"##,
            cx + kx,
            cy - ky
        );
        let _ = writeln!(
            s,
            r##"<circle class="deviation" cx="{:.3}" cy="{:.3}" r="{:.3}" fill="none" stroke="#2166ac"/>"##,
            cx + kx,
            cy - ky,
            t.key_deviation * scale
        );
        let _ = writeln!(s, r##"<path class="arc" d="{}" fill="none" stroke="#b2182b"/>"##, arc_path(cx, cy, kx, ky, t.theta_max));
        let _ = writeln!(s, "</g>");
    }
    s.push_str("</svg>\n");
    Ok(s)
}

fn arc_path(cx: f64, cy: f64, kx: f64, ky: f64, sweep: f64) -> String {
    let radius = 0.45 * PANEL / 2.0;
    let start = if kx == 0.0 && ky == 0.0 { 0.0 } else { ky.atan2(kx) };
    let point = |a: f64| (cx + radius * a.cos(), cy - radius * a.sin());
    let sweep = sweep.clamp(0.0, std::f64::consts::TAU);
    let (x0, y0) = point(start);
    if sweep >= std::f64::consts::TAU {
        let (xm, ym) = point(start + std::f64::consts::PI);
        return format!(
            "M{x0:.3},{y0:.3} A{radius:.3},{radius:.3} 0 1 0 {xm:.3},{ym:.3} A{radius:.3},{radius:.3} 0 1 0 {x0:.3},{y0:.3}"
        );
    }
    let (x1, y1) = point(start + sweep);
    let large = u8::from(sweep > std::f64::consts::PI);
    format!("M{x0:.3},{y0:.3} A{radius:.3},{radius:.3} 0 {large} 0 {x1:.3},{y1:.3}")
}

pub fn render_tuple_plot(stats: &[TupleStats], path: impl AsRef<Path>) -> Result<()> {
    let svg = tuple_plot_svg(stats)?;
    std::fs::write(path.as_ref(), svg).map_err(|e| Error::io(path.as_ref(), e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rope::RopeConfig;
    use crate::tensor_io::{generate_synthetic, SyntheticSpec};
    use crate::tuples::tuple_stats;

    #[test]
    fn two_by_two_has_three_cells() {
        let w = LogitMap::from_lower_rows(&[vec![1.0], vec![-2.0, 0.5]]).unwrap();
        let svg = heatmap_svg(&Heatmap::from_logit_map("w", &w)).unwrap();
        assert_eq!(svg.matches(r#"class="cell""#).count(), 3);
        assert!(svg.contains(r#"data-min="-2""#) && svg.contains(r#"data-max="1""#));
        assert!(svg.contains(r#"data-constant="false""#));
        assert!(!svg.contains(r#"data-i="0" data-j="1""#));
    }

    #[test]
    fn constant_matrix_is_flagged() {
        let m = Matrix::from_rows(&[vec![0.0, 0.0], vec![0.0, 0.0]]);
        let svg = heatmap_svg(&Heatmap::from_matrix("zero", &m)).unwrap();
        assert!(svg.contains(r#"data-constant="true""#));
        assert_eq!(svg.matches(r#"class="swatch""#).count(), 1);
        assert_eq!(svg.matches("#ffffff").count(), 5);
    }

    #[test]
    fn colour_scale_endpoints() {
        assert_eq!(color(-3.0, 3.0), "#2166ac");
        assert_eq!(color(0.0, 3.0), "#ffffff");
        assert_eq!(color(3.0, 3.0), "#b2182b");
    }

    #[test]
    fn non_finite_rejected() {
        let m = Matrix::from_rows(&[vec![f64::NAN]]);
        assert!(heatmap_svg(&Heatmap::from_matrix("x", &m)).is_err());
    }

    #[test]
    fn theta_max_in_metadata() {
        let rec = generate_synthetic(&SyntheticSpec::new(16, 8, [3], 10.0, 0.1, 0)).unwrap();
        let cfg = RopeConfig::from_manifest(&rec.manifest).unwrap();
        let stats = tuple_stats(&rec, &cfg).unwrap();
        let svg = tuple_plot_svg(&stats).unwrap();
        assert_eq!(svg.matches(r#"class="tuple""#).count(), 4);
        for t in &stats {
            assert!(svg.contains(&format!(r#"data-index="{}" data-theta="{}" data-theta-max="{}""#, t.index, t.theta, t.theta_max)));
        }
        assert_eq!(svg, tuple_plot_svg(&stats).unwrap());
    }
}
