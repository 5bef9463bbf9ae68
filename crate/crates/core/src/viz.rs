//! Static false-color rendering of disparity and depth maps: cold colors
//! for small values, warm colors for large ones, black for invalid pixels.

use ndarray::Array3;

use crate::error::{CoreError, Result};
use crate::geometry::MaskedMap;

/// Palette anchors as (position, rgb) with components in [0, 1]. Linear
/// interpolation between anchors; chosen so that warmth (red minus blue)
/// increases strictly with the position.
pub const COLOR_ANCHORS: [(f64, [f64; 3]); 5] = [
    (0.00, [0.00, 0.05, 0.85]),
    (0.25, [0.00, 0.75, 0.75]),
    (0.50, [0.20, 0.95, 0.25]),
    (0.75, [0.95, 0.80, 0.05]),
    (1.00, [1.00, 0.05, 0.00]),
];

/// Color for a normalized value in [0, 1].
pub fn palette(t: f64) -> [f64; 3] {
    let t = t.clamp(0.0, 1.0);
    let mut lo = COLOR_ANCHORS[0];
    for hi in COLOR_ANCHORS.iter().skip(1) {
        if t <= hi.0 {
            let w = (t - lo.0) / (hi.0 - lo.0);
            let mut rgb = [0.0; 3];
            for c in 0..3 {
                rgb[c] = lo.1[c] + w * (hi.1[c] - lo.1[c]);
            }
            return rgb;
        }
        lo = *hi;
    }
    COLOR_ANCHORS[COLOR_ANCHORS.len() - 1].1
}

/// Renders a masked map to a (3, H, W) image in [0, 1]. Valid values are
/// normalized to the map's own valid range, optionally in log space so a
/// multiplicative value range spreads evenly over the palette; invalid
/// pixels come out black. A constant map renders at mid-palette.
pub fn colorize(map: &MaskedMap, log_scale: bool) -> Result<Array3<f64>> {
    let (h, w) = map.values.dim();
    let transform = |v: f64| {
        if log_scale {
            // Clamping keeps zero-valued disparities renderable.
            v.max(1e-12).ln()
        } else {
            v
        }
    };
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for (idx, &valid) in map.valid.indexed_iter() {
        if valid {
            let v = transform(map.values[idx]);
            if !v.is_finite() {
                return Err(CoreError::numeric(format!(
                    "cannot colorize non-finite value {} at {idx:?}",
                    map.values[idx]
                )));
            }
            lo = lo.min(v);
            hi = hi.max(v);
        }
    }
    let span = hi - lo;
    let mut out = Array3::zeros((3, h, w));
    for (idx, &valid) in map.valid.indexed_iter() {
        if !valid {
            continue;
        }
        let t = if span > 0.0 {
            (transform(map.values[idx]) - lo) / span
        } else {
            0.5
        };
        let rgb = palette(t);
        for c in 0..3 {
            out[[c, idx.0, idx.1]] = rgb[c];
        }
    }
    Ok(out)
}
