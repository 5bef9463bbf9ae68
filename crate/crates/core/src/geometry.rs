//! Spherical rig geometry for a vertically stacked pair of equirectangular
//! cameras: polar-angle maps, angular-disparity/depth conversions, vertical
//! warping, and horizontal circular padding.
//!
//! Conventions used throughout the crate:
//! - Rows index the polar angle, measured from the rig axis on the side of
//!   the top camera (row 0 looks along the axis "past" the top camera).
//! - Angular disparity is the positive polar offset, in degrees, between the
//!   positions of the same scene point in the two images. Content sits
//!   `disparity_px` rows lower in the top image, so warping top to bottom
//!   shifts content upward.

use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

use crate::error::{CoreError, Result};

pub const DEG_PER_RAD: f64 = 180.0 / PI;

// ==== RIG ====

/// Vertically stacked equirectangular camera pair. The bottom camera is the
/// reference: depths are Euclidean distances from its center.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CameraRig {
    /// Distance between the two camera centers, in meters.
    pub baseline_m: f64,
    /// Image height in pixels (rows index the polar angle).
    pub height_px: usize,
    /// Image width in pixels (columns index azimuth over the full circle).
    pub width_px: usize,
    /// Vertical field of view in radians, at most a full half circle.
    pub vertical_fov_rad: f64,
}

impl CameraRig {
    /// Full-FOV rig (vertical field of view = pi).
    pub fn new(baseline_m: f64, height_px: usize, width_px: usize) -> Result<Self> {
        Self::with_fov(baseline_m, height_px, width_px, PI)
    }

    pub fn with_fov(
        baseline_m: f64,
        height_px: usize,
        width_px: usize,
        vertical_fov_rad: f64,
    ) -> Result<Self> {
        if !(baseline_m.is_finite() && baseline_m > 0.0) {
            return Err(CoreError::config(format!(
                "baseline must be finite and positive, got {baseline_m}"
            )));
        }
        if height_px < 2 || width_px < 2 {
            return Err(CoreError::config(format!(
                "image dimensions must be at least 2x2, got {height_px}x{width_px}"
            )));
        }
        if !(vertical_fov_rad > 0.0 && vertical_fov_rad <= PI) {
            return Err(CoreError::config(format!(
                "vertical fov must lie in (0, pi], got {vertical_fov_rad}"
            )));
        }
        Ok(CameraRig {
            baseline_m,
            height_px,
            width_px,
            vertical_fov_rad,
        })
    }

    /// Per-row polar angles at pixel centers. For a partial field of view the
    /// band is centered, so theta(H-1-r) == pi - theta(r) always holds.
    pub fn polar_angle_map(&self) -> AngleMap {
        let h = self.height_px as f64;
        let fov = self.vertical_fov_rad;
        let offset = (PI - fov) / 2.0;
        let theta = (0..self.height_px)
            .map(|row| offset + fov * (row as f64 + 0.5) / h)
            .collect();
        AngleMap { theta }
    }

    /// Degrees of polar angle spanned by one pixel row.
    pub fn deg_per_px(&self) -> f64 {
        self.vertical_fov_rad * DEG_PER_RAD / self.height_px as f64
    }

    pub fn disparity_deg_to_px(&self, d_deg: f64) -> f64 {
        d_deg / self.deg_per_px()
    }

    pub fn disparity_px_to_deg(&self, d_px: f64) -> f64 {
        d_px * self.deg_per_px()
    }
}

/// Polar angle per row, strictly increasing, all values inside (0, pi).
#[derive(Debug, Clone, PartialEq)]
pub struct AngleMap {
    theta: Vec<f64>,
}

impl AngleMap {
    pub fn theta(&self, row: usize) -> f64 {
        self.theta[row]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.theta
    }

    pub fn len(&self) -> usize {
        self.theta.len()
    }

    pub fn is_empty(&self) -> bool {
        self.theta.is_empty()
    }
}

// ==== MAPS ====

/// Dense per-pixel map with a validity mask. Disparities are stored in
/// degrees, depths in meters; invalid pixels carry an unspecified value.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskedMap {
    pub values: Array2<f64>,
    pub valid: Array2<bool>,
}

impl MaskedMap {
    pub fn new(values: Array2<f64>, valid: Array2<bool>) -> Result<Self> {
        if values.dim() != valid.dim() {
            return Err(CoreError::config(format!(
                "value/mask shape mismatch: {:?} vs {:?}",
                values.dim(),
                valid.dim()
            )));
        }
        for ((r, c), &ok) in valid.indexed_iter() {
            if ok && !values[[r, c]].is_finite() {
                return Err(CoreError::numeric(format!(
                    "non-finite value {} marked valid at ({r}, {c})",
                    values[[r, c]]
                )));
            }
        }
        Ok(MaskedMap { values, valid })
    }

    /// All-valid map from dense values.
    pub fn dense(values: Array2<f64>) -> Result<Self> {
        let valid = Array2::from_elem(values.dim(), true);
        Self::new(values, valid)
    }

    pub fn height(&self) -> usize {
        self.values.nrows()
    }

    pub fn width(&self) -> usize {
        self.values.ncols()
    }

    pub fn valid_count(&self) -> usize {
        self.valid.iter().filter(|&&v| v).count()
    }
}

/// Angular disparity in degrees.
pub type DisparityMap = MaskedMap;
/// Euclidean depth from the bottom camera in meters.
pub type DepthMap = MaskedMap;

// ==== CONVERSIONS ====

/// Closed-form depth from angular disparity, per pixel:
/// `r = B * (sin(theta) / tan(d) + cos(theta))` with `d` in radians and
/// `theta` the row's polar angle. Non-positive disparities and conversions
/// landing at non-positive depth are degenerate and come back invalid.
pub fn disparity_to_depth(disp: &DisparityMap, rig: &CameraRig) -> Result<DepthMap> {
    check_rig_dims(disp, rig)?;
    let angles = rig.polar_angle_map();
    let b = rig.baseline_m;
    let mut values = Array2::zeros(disp.values.dim());
    let mut valid = Array2::from_elem(disp.values.dim(), false);
    for ((row, col), &d_deg) in disp.values.indexed_iter() {
        if !disp.valid[[row, col]] || !(d_deg > 0.0) {
            continue;
        }
        let d = d_deg / DEG_PER_RAD;
        let theta = angles.theta(row);
        let r = b * (theta.sin() / d.tan() + theta.cos());
        if r.is_finite() && r > 0.0 {
            values[[row, col]] = r;
            valid[[row, col]] = true;
        }
    }
    Ok(MaskedMap { values, valid })
}

/// Algebraic inverse of `disparity_to_depth`:
/// `d = atan2(B * sin(theta), r - B * cos(theta))`, reported in degrees.
/// Zero or negative depth is invalid.
pub fn depth_to_disparity(depth: &DepthMap, rig: &CameraRig) -> Result<DisparityMap> {
    check_rig_dims(depth, rig)?;
    let angles = rig.polar_angle_map();
    let b = rig.baseline_m;
    let mut values = Array2::zeros(depth.values.dim());
    let mut valid = Array2::from_elem(depth.values.dim(), false);
    for ((row, col), &r) in depth.values.indexed_iter() {
        if !depth.valid[[row, col]] || !(r > 0.0) {
            continue;
        }
        let theta = angles.theta(row);
        let d = (b * theta.sin()).atan2(r - b * theta.cos());
        if d.is_finite() && d > 0.0 {
            values[[row, col]] = d * DEG_PER_RAD;
            valid[[row, col]] = true;
        }
    }
    Ok(MaskedMap { values, valid })
}

fn check_rig_dims(map: &MaskedMap, rig: &CameraRig) -> Result<()> {
    if map.height() != rig.height_px || map.width() != rig.width_px {
        return Err(CoreError::config(format!(
            "map size {}x{} does not match rig {}x{}",
            map.height(),
            map.width(),
            rig.height_px,
            rig.width_px
        )));
    }
    Ok(())
}

// ==== WARPING ====

/// Warp the top image onto the bottom image's pixel grid using per-pixel
/// disparities in (fractional) rows. Positive disparity shifts content
/// upward: output row `r` samples input row `r + disp_px` with linear
/// interpolation along rows. Source rows outside [0, H-1] are invalid; there
/// is no vertical wraparound. Returns the warped planes and the validity
/// mask of pixels that landed in range.
pub fn vertical_warp(
    input: &Array3<f64>,
    disp_px: &Array2<f64>,
    disp_valid: &Array2<bool>,
) -> Result<(Array3<f64>, Array2<bool>)> {
    let (c, h, w) = input.dim();
    if disp_px.dim() != (h, w) || disp_valid.dim() != (h, w) {
        return Err(CoreError::config(format!(
            "disparity shape {:?} does not match image {h}x{w}",
            disp_px.dim()
        )));
    }
    let mut out = Array3::zeros((c, h, w));
    let mut valid = Array2::from_elem((h, w), false);
    for row in 0..h {
        for col in 0..w {
            if !disp_valid[[row, col]] {
                continue;
            }
            let src = row as f64 + disp_px[[row, col]];
            if !(src >= 0.0 && src <= (h - 1) as f64) {
                continue;
            }
            let r0 = src.floor() as usize;
            let r1 = (r0 + 1).min(h - 1);
            let frac = src - r0 as f64;
            for ch in 0..c {
                let lo = input[[ch, r0, col]];
                let hi = input[[ch, r1, col]];
                out[[ch, row, col]] = lo + (hi - lo) * frac;
            }
            valid[[row, col]] = true;
        }
    }
    Ok((out, valid))
}

/// Convenience wrapper converting a degree-valued disparity map to rows.
pub fn vertical_warp_deg(
    input: &Array3<f64>,
    disp: &DisparityMap,
    rig: &CameraRig,
) -> Result<(Array3<f64>, Array2<bool>)> {
    let disp_px = disp.values.mapv(|d| rig.disparity_deg_to_px(d));
    vertical_warp(input, &disp_px, &disp.valid)
}

// ==== CIRCULAR PADDING ====

/// Pad planes horizontally with wrapped columns: `pad_cols` columns from the
/// right edge are prepended and `pad_cols` from the left edge appended.
/// Requires `pad_cols < W`.
pub fn circular_pad(input: &Array3<f64>, pad_cols: usize) -> Result<Array3<f64>> {
    let (c, h, w) = input.dim();
    if pad_cols >= w {
        return Err(CoreError::config(format!(
            "circular pad of {pad_cols} columns requires width > pad, image width is {w}"
        )));
    }
    let mut out = Array3::zeros((c, h, w + 2 * pad_cols));
    for ch in 0..c {
        for row in 0..h {
            for col in 0..w {
                out[[ch, row, col + pad_cols]] = input[[ch, row, col]];
            }
            for p in 0..pad_cols {
                out[[ch, row, p]] = input[[ch, row, w - pad_cols + p]];
                out[[ch, row, w + pad_cols + p]] = input[[ch, row, p]];
            }
        }
    }
    Ok(out)
}

/// Exact inverse of `circular_pad`: drops `pad_cols` columns from each side.
pub fn circular_crop(input: &Array3<f64>, pad_cols: usize) -> Result<Array3<f64>> {
    let (_, _, wp) = input.dim();
    if wp <= 2 * pad_cols {
        return Err(CoreError::config(format!(
            "cannot crop {pad_cols} columns per side from width {wp}"
        )));
    }
    Ok(input
        .slice(ndarray::s![.., .., pad_cols..wp - pad_cols])
        .to_owned())
}

/// Roll planes horizontally by `k` columns (content moves right for k > 0).
pub fn roll_columns(input: &Array3<f64>, k: i64) -> Array3<f64> {
    let (c, h, w) = input.dim();
    let shift = k.rem_euclid(w as i64) as usize;
    let mut out = Array3::zeros((c, h, w));
    for ch in 0..c {
        for row in 0..h {
            for col in 0..w {
                out[[ch, row, (col + shift) % w]] = input[[ch, row, col]];
            }
        }
    }
    out
}

/// Roll a 2d map horizontally by `k` columns.
pub fn roll_columns_2d(input: &Array2<f64>, k: i64) -> Array2<f64> {
    let (h, w) = input.dim();
    let shift = k.rem_euclid(w as i64) as usize;
    let mut out = Array2::zeros((h, w));
    for row in 0..h {
        for col in 0..w {
            out[[row, (col + shift) % w]] = input[[row, col]];
        }
    }
    out
}
