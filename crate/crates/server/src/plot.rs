//! Heatmaps of the optimizer table.

use fovnerf_core::image::encode_png_rgb8;
use fovnerf_core::optimizer::SearchResult;
use fovnerf_core::Result;

const CELL: usize = 24;

/// Five-stop approximation of the viridis colour map.
fn colormap(t: f64) -> [u8; 3] {
    const STOPS: [[f64; 3]; 5] = [
        [68.0, 1.0, 84.0],
        [59.0, 82.0, 139.0],
        [33.0, 145.0, 140.0],
        [94.0, 201.0, 98.0],
        [253.0, 231.0, 37.0],
    ];
    let x = t.clamp(0.0, 1.0) * 4.0;
    let i = (x.floor() as usize).min(3);
    let f = x - i as f64;
    let mut out = [0u8; 3];
    for k in 0..3 {
        out[k] = (STOPS[i][k] + f * (STOPS[i + 1][k] - STOPS[i][k])).round() as u8;
    }
    out
}

/// Rows are `(N_m, N_c)` pairs, columns sphere counts. Cells over budget are
/// crossed out; the chosen cell gets a white frame.
pub fn heatmap(
    result: &SearchResult,
    value: impl Fn(&fovnerf_core::optimizer::SearchRow) -> f64,
    log_scale: bool,
) -> Result<Vec<u8>> {
    let mut cols: Vec<usize> = result.table.iter().map(|r| r.config.n_spheres).collect();
    cols.sort();
    cols.dedup();
    let mut rows: Vec<(usize, usize)> = result
        .table
        .iter()
        .map(|r| (r.config.n_layers, r.config.n_channels))
        .collect();
    rows.sort_by_key(|&(m, c)| (m * c, m));
    rows.dedup();
    let tf = |v: f64| if log_scale { v.max(1e-12).ln() } else { v };
    let vals: Vec<f64> = result
        .table
        .iter()
        .map(|r| tf(value(r)))
        .filter(|v| v.is_finite())
        .collect();
    let lo = vals.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = vals.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = if hi > lo { hi - lo } else { 1.0 };
    let (w, h) = (cols.len() * CELL, rows.len() * CELL);
    let mut px = vec![0u8; w * h * 3];
    let chosen = result.chosen();
    for r in &result.table {
        let cx = cols.iter().position(|&n| n == r.config.n_spheres).expect("column");
        // larger networks at the top
        let cy = rows.len()
            - 1
            - rows
                .iter()
                .position(|&p| p == (r.config.n_layers, r.config.n_channels))
                .expect("row");
        let v = tf(value(r));
        let color = if v.is_finite() {
            colormap((v - lo) / span)
        } else {
            [40, 40, 40]
        };
        for y in 0..CELL {
            for x in 0..CELL {
                let edge = x == 0 || y == 0 || x == CELL - 1 || y == CELL - 1;
                let cross = !r.feasible && (x == y || x + y == CELL - 1);
                let c = if edge && chosen == Some(r.config) {
                    [255, 255, 255]
                } else if edge {
                    [20, 20, 20]
                } else if cross {
                    [200, 30, 30]
                } else {
                    color
                };
                let i = ((cy * CELL + y) * w + cx * CELL + x) * 3;
                px[i..i + 3].copy_from_slice(&c);
            }
        }
    }
    encode_png_rgb8(w, h, &px)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn colormap_endpoints() {
        assert_eq!(colormap(0.0), [68, 1, 84]);
        assert_eq!(colormap(1.0), [253, 231, 37]);
        assert_eq!(colormap(-3.0), colormap(0.0));
    }
}
