//! Feature-grid rendering: every weight column becomes a small tile so
//! the learned dictionary can be inspected; tiles are arranged in one
//! band per segment with a 1-pixel black separator row between bands.

use crate::error::{Result, XaeError};
use crate::model::XaeModel;

/// Smallest c with c·c ≥ n.
fn grid_side(n: usize) -> usize {
    (1..).find(|c| c * c >= n).expect("n bounded")
}

/// Render the weight columns as 8-bit grayscale. Each column becomes a
/// height×width tile per channel (channels side by side), min-max
/// normalized per channel plane to 0–255 (a constant plane renders
/// mid-gray 128). Tiles fill rows of a per-segment band; unused cells
/// stay black. Returns (pixel width, pixel height, row-major bytes).
pub fn render_feature_grid(
    model: &XaeModel,
    channels: usize,
    height: usize,
    width: usize,
) -> Result<(usize, usize, Vec<u8>)> {
    if channels * height * width != model.input_dim() {
        return Err(XaeError::DimMismatch {
            expected: model.input_dim(),
            got: channels * height * width,
        });
    }
    let spec = model.spec();
    let segments = spec.segments();
    let tile_w = channels * width;
    let grid_cols = grid_side(segments.iter().map(|s| s.width).max().expect("nonempty"));
    let px_w = grid_cols * tile_w;
    let band_rows: Vec<usize> = segments.iter().map(|s| s.width.div_ceil(grid_cols)).collect();
    let px_h = band_rows.iter().map(|r| r * height).sum::<usize>() + segments.len() - 1;
    let mut canvas = vec![0u8; px_w * px_h];

    let w = model.weights();
    let mut band_top = 0usize;
    for (j, seg) in segments.iter().enumerate() {
        let offset = spec.segment_offset(j);
        for t in 0..seg.width {
            let unit = offset + t;
            let tile_top = band_top + (t / grid_cols) * height;
            let tile_left = (t % grid_cols) * tile_w;
            for c in 0..channels {
                // Min-max over this unit's channel plane.
                let mut lo = f64::INFINITY;
                let mut hi = f64::NEG_INFINITY;
                for r in 0..height {
                    for col in 0..width {
                        let v = w[[c * height * width + r * width + col, unit]];
                        lo = lo.min(v);
                        hi = hi.max(v);
                    }
                }
                for r in 0..height {
                    for col in 0..width {
                        let v = w[[c * height * width + r * width + col, unit]];
                        let byte = if hi > lo {
                            (255.0 * (v - lo) / (hi - lo)).round() as u8
                        } else {
                            128
                        };
                        canvas[(tile_top + r) * px_w + tile_left + c * width + col] = byte;
                    }
                }
            }
        }
        band_top += band_rows[j] * height;
        if j + 1 < segments.len() {
            band_top += 1; // separator row stays black
        }
    }
    Ok((px_w, px_h, canvas))
}
