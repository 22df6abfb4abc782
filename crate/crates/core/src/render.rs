//! Component planes of a trained map and the distance-versus-threshold plot.
//!
//! Output is plain PGM and SVG text with no timestamps, so repeated runs are
//! byte-identical.

use std::collections::HashSet;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::detect::RowVerdict;
use crate::error::{Error, Result};
use crate::schema::RowKey;
use crate::som::SomModel;

/// Gray level of each value: minimum -> 255 (white), maximum -> 0 (black).
/// A constant plane is uniform mid-gray.
pub fn gray_levels(values: &[f64]) -> Vec<u8> {
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let range = hi - lo;
    if !(range > f64::EPSILON * hi.abs().max(lo.abs()).max(1.0)) {
        return vec![128; values.len()];
    }
    values
        .iter()
        .map(|v| (255.0 * (hi - v) / range).round() as u8)
        .collect()
}

/// Plane of prototype component `j`, row-major over the grid.
pub fn component_plane(model: &SomModel, j: usize) -> Vec<u8> {
    let values: Vec<f64> = model.prototypes.iter().map(|p| p[j]).collect();
    gray_levels(&values)
}

/// ASCII PGM (P2) with each unit drawn as a `cell_px` square.
pub fn plane_pgm(model: &SomModel, j: usize, cell_px: usize) -> String {
    let gray = component_plane(model, j);
    let (w, h) = (model.cols * cell_px, model.rows * cell_px);
    let mut out = format!("P2\n{w} {h}\n255\n");
    for y in 0..h {
        let line: Vec<String> = (0..w)
            .map(|x| gray[(y / cell_px) * model.cols + x / cell_px].to_string())
            .collect();
        out.push_str(&line.join(" "));
        out.push('\n');
    }
    out
}

/// Per-unit counts of healthy and anomalous samples for the dot overlay.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct UnitCounts {
    pub healthy: Vec<usize>,
    pub anomalous: Vec<usize>,
}

impl UnitCounts {
    pub fn from_assignments(units: usize, assignments: &[(usize, bool)]) -> Self {
        let mut c = Self {
            healthy: vec![0; units],
            anomalous: vec![0; units],
        };
        for &(bmu, healthy) in assignments {
            if healthy {
                c.healthy[bmu] += 1;
            } else {
                c.anomalous[bmu] += 1;
            }
        }
        c
    }
}

pub fn plane_svg(model: &SomModel, j: usize, title: &str, cell_px: usize, overlay: Option<&UnitCounts>) -> String {
    let gray = component_plane(model, j);
    let (w, h) = (model.cols * cell_px, model.rows * cell_px + 20);
    let mut out = String::new();
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}">"#
    );
    let _ = writeln!(out, r#"<text x="2" y="14" font-size="12" font-family="sans-serif">{title}</text>"#);
    for (u, g) in gray.iter().enumerate() {
        let (r, c) = model.coords(u);
        let _ = writeln!(
            out,
            r##"<rect x="{}" y="{}" width="{cell_px}" height="{cell_px}" fill="rgb({g},{g},{g})" stroke="#888" stroke-width="0.5"/>"##,
            c * cell_px,
            r * cell_px + 20
        );
    }
    if let Some(counts) = overlay {
        let max = counts
            .healthy
            .iter()
            .chain(&counts.anomalous)
            .copied()
            .max()
            .unwrap_or(0)
            .max(1) as f64;
        let radius_max = cell_px as f64 * 0.25;
        for u in 0..model.units() {
            let (r, c) = model.coords(u);
            let cy = (r * cell_px + 20) as f64 + cell_px as f64 / 2.0;
            for (n, dx, color) in [
                (counts.healthy[u], 0.28, "green"),
                (counts.anomalous[u], 0.72, "red"),
            ] {
                if n == 0 {
                    continue;
                }
                let cx = (c * cell_px) as f64 + cell_px as f64 * dx;
                let rad = radius_max * n as f64 / max;
                let _ = writeln!(out, r#"<circle cx="{cx:.2}" cy="{cy:.2}" r="{rad:.2}" fill="{color}"/>"#);
            }
        }
    }
    out.push_str("</svg>\n");
    out
}

/// Write `<var>.pgm` and `<var>.svg` for every prototype component.
pub fn export_component_planes(
    model: &SomModel,
    variables: &[String],
    overlay: Option<&UnitCounts>,
    dir: impl AsRef<Path>,
    cell_px: usize,
) -> Result<Vec<PathBuf>> {
    let dir = dir.as_ref();
    if variables.len() != model.dim() {
        return Err(Error::DimensionMismatch {
            expected: model.dim(),
            got: variables.len(),
        });
    }
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut written = Vec::new();
    for (j, name) in variables.iter().enumerate() {
        let pgm = dir.join(format!("{name}.pgm"));
        std::fs::write(&pgm, plane_pgm(model, j, cell_px.max(1))).map_err(|e| Error::io(&pgm, e))?;
        let svg = dir.join(format!("{name}.svg"));
        std::fs::write(&svg, plane_svg(model, j, name, cell_px.max(1), overlay)).map_err(|e| Error::io(&svg, e))?;
        written.push(pgm);
        written.push(svg);
    }
    Ok(written)
}

/// Distances of each verdict row with the healthy band `[0, threshold]`.
/// Flagged rows are green stars when `truth` marks them anomalous, red
/// crosses otherwise; without `truth` every flagged row is a red cross.
pub fn distance_plot_svg(verdicts: &[RowVerdict], global_upper: f64, truth: Option<&HashSet<RowKey>>) -> String {
    let (w, h, pad) = (900.0, 400.0, 40.0);
    let n = verdicts.len().max(1) as f64;
    let ymax = verdicts
        .iter()
        .map(|v| v.verdict.distance)
        .fold(global_upper, f64::max)
        .max(f64::MIN_POSITIVE)
        * 1.05;
    let sx = |i: usize| pad + (w - 2.0 * pad) * (i as f64 + 0.5) / n;
    let sy = |d: f64| h - pad - (h - 2.0 * pad) * d / ymax;
    let mut out = String::new();
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}">"#
    );
    let _ = writeln!(
        out,
        r##"<rect x="{pad}" y="{:.2}" width="{:.2}" height="{:.2}" fill="#add8e6" fill-opacity="0.6"/>"##,
        sy(global_upper),
        w - 2.0 * pad,
        sy(0.0) - sy(global_upper)
    );
    let _ = writeln!(
        out,
        r#"<line x1="{pad}" y1="{0:.2}" x2="{1}" y2="{0:.2}" stroke="black"/>"#,
        sy(0.0),
        w - pad
    );
    let _ = writeln!(
        out,
        r#"<line x1="{pad}" y1="{pad}" x2="{pad}" y2="{:.2}" stroke="black"/>"#,
        sy(0.0)
    );
    let _ = writeln!(
        out,
        r#"<text x="{pad}" y="20" font-size="12" font-family="sans-serif">distance to nearest prototype; band = [0, {global_upper:.4}]</text>"#
    );
    for (i, v) in verdicts.iter().enumerate() {
        let (x, y) = (sx(i), sy(v.verdict.distance));
        if v.verdict.healthy {
            let _ = writeln!(out, r#"<circle cx="{x:.2}" cy="{y:.2}" r="1.5" fill="black"/>"#);
            continue;
        }
        let correct = truth.is_some_and(|t| t.contains(&v.key));
        if correct {
            let _ = writeln!(
                out,
                r#"<text x="{x:.2}" y="{:.2}" font-size="10" fill="green" text-anchor="middle">*</text>"#,
                y + 4.0
            );
        } else {
            let _ = writeln!(
                out,
                r#"<path d="M{:.2},{:.2} L{:.2},{:.2} M{:.2},{:.2} L{:.2},{:.2}" stroke="red"/>"#,
                x - 3.0,
                y - 3.0,
                x + 3.0,
                y + 3.0,
                x - 3.0,
                y + 3.0,
                x + 3.0,
                y - 3.0
            );
        }
    }
    out.push_str("</svg>\n");
    out
}
