//! Binary PPM (P6) rendering of patch grids.
//!
//! Values map linearly from `[0, max]` onto blue `(0, 0, 255)` … red
//! `(255, 0, 0)`; each patch becomes a `scale × scale` block.

use crate::error::{Error, Result};
use crate::labels::ValueGrid;

pub fn color(value: f64, max: f64) -> [u8; 3] {
    let t = if max > 0.0 { (value / max).clamp(0.0, 1.0) } else { 0.0 };
    [(255.0 * t).round() as u8, 0, (255.0 * (1.0 - t)).round() as u8]
}

pub fn render_ppm(grid: &ValueGrid, scale: usize) -> Result<Vec<u8>> {
    if scale == 0 {
        return Err(Error::InvalidArgument("scale must be at least 1".into()));
    }
    if grid.values.iter().any(|v| !v.is_finite()) {
        return Err(Error::Format("grid contains non-finite values".into()));
    }
    let max = grid.values.iter().cloned().fold(0.0, f64::max);
    let (w, h) = (grid.cols * scale, grid.rows * scale);
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    out.reserve(w * h * 3);
    for row in grid.values.chunks(grid.cols) {
        let mut line = Vec::with_capacity(w * 3);
        for &v in row {
            let c = color(v, max);
            for _ in 0..scale {
                line.extend_from_slice(&c);
            }
        }
        for _ in 0..scale {
            out.extend_from_slice(&line);
        }
    }
    Ok(out)
}
