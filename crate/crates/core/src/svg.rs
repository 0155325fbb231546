//! Minimal SVG plots: BEV heatmaps and a line chart. Output is plain text
//! with fixed number formatting so identical inputs give identical files.

use std::fmt::Write as _;

use crate::flowhead::{CostVolume, FlowGrid};
use crate::io::EMPTY;
use crate::scenes::VoxelLabelGrid;

const CELL: usize = 12;

const PALETTE: [&str; 10] = [
    "#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f",
    "#bcbd22", "#17becf",
];

fn header(w: usize, h: usize) -> String {
    format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" viewBox=\"0 0 {w} {h}\">\n<rect width=\"{w}\" height=\"{h}\" fill=\"white\"/>\n"
    )
}

fn gray(v: f64) -> String {
    let g = (255.0 * (1.0 - v.clamp(0.0, 1.0))).round() as u8;
    format!("#{g:02x}{g:02x}{g:02x}")
}

/// Rows are `h`, columns are `w`; `value(h, w)` is a fill color or `None`.
fn grid_svg(rows: usize, cols: usize, mut value: impl FnMut(usize, usize) -> Option<String>) -> String {
    let mut s = header(cols * CELL, rows * CELL);
    for r in 0..rows {
        for c in 0..cols {
            if let Some(fill) = value(r, c) {
                let _ = writeln!(
                    s,
                    "<rect x=\"{}\" y=\"{}\" width=\"{CELL}\" height=\"{CELL}\" fill=\"{fill}\"/>",
                    c * CELL,
                    r * CELL
                );
            }
        }
    }
    s.push_str("</svg>\n");
    s
}

/// Top-down view: each column shows the class of its highest occupied voxel.
pub fn label_heatmap(grid: &VoxelLabelGrid) -> String {
    let [h, w, z] = grid.dims;
    grid_svg(h, w, |r, c| {
        (0..z)
            .rev()
            .map(|k| grid.labels[(r * w + c) * z + k])
            .find(|&l| l != EMPTY)
            .map(|l| PALETTE[l as usize % PALETTE.len()].to_string())
    })
}

/// Largest flow magnitude in each column, scaled to the grid maximum.
pub fn flow_heatmap(flow: &FlowGrid) -> String {
    let [h, w, z] = flow.dims;
    let mag = |v: [f64; 2]| (v[0] * v[0] + v[1] * v[1]).sqrt();
    let max = flow.data.iter().map(|&v| mag(v)).fold(0.0, f64::max);
    grid_svg(h, w, |r, c| {
        let m = (0..z).map(|k| mag(flow.data[(r * w + c) * z + k])).fold(0.0, f64::max);
        (m > 0.0).then(|| gray(m / max))
    })
}

/// Best cosine similarity over the window, mapped from `[-1, 1]` to gray.
pub fn cost_volume_heatmap(cv: &CostVolume, rows: usize, cols: usize) -> String {
    let k = cv.offsets.len();
    grid_svg(rows, cols, |r, c| {
        let row = &cv.values.data()[(r * cols + c) * k..(r * cols + c + 1) * k];
        let best = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        Some(gray((best + 1.0) / 2.0))
    })
}

/// Polyline of `values` against their index.
pub fn line_plot(values: &[f64], title: &str) -> String {
    let (w, h, pad) = (480.0, 240.0, 20.0);
    let mut s = header(w as usize, h as usize);
    let _ = writeln!(s, "<text x=\"{pad}\" y=\"14\" font-size=\"12\">{title}</text>");
    let finite: Vec<f64> = values.iter().copied().filter(|v| v.is_finite()).collect();
    if finite.len() >= 2 {
        let lo = finite.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = finite.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let span = if hi > lo { hi - lo } else { 1.0 };
        let n = values.len() - 1;
        let pts: Vec<String> = values
            .iter()
            .enumerate()
            .map(|(i, v)| {
                let x = pad + (w - 2.0 * pad) * i as f64 / n as f64;
                let y = h - pad - (h - 2.0 * pad) * (v - lo) / span;
                format!("{x:.2},{y:.2}")
            })
            .collect();
        let _ = writeln!(
            s,
            "<polyline fill=\"none\" stroke=\"#1f77b4\" stroke-width=\"1.5\" points=\"{}\"/>",
            pts.join(" ")
        );
    }
    s.push_str("</svg>\n");
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn heatmap_draws_occupied_columns_only() {
        let mut g = VoxelLabelGrid::empty([2, 2, 2]);
        g.labels[1] = 3;
        let s = label_heatmap(&g);
        assert_eq!(s.matches("<rect x=").count(), 1);
        assert!(s.contains(PALETTE[3]));
    }

    #[test]
    fn line_plot_is_deterministic() {
        let v = [3.0, 2.0, 1.5];
        assert_eq!(line_plot(&v, "loss"), line_plot(&v, "loss"));
        assert!(line_plot(&v, "loss").contains("<polyline"));
    }
}
