//! Ray-casting simulator for top-bottom equirectangular stereo pairs of
//! parametric 3D scenes, with exact ground-truth depth, angular disparity,
//! and occlusion masks.
//!
//! Shading is ambient-only so photometric consistency between the warped top
//! image and the bottom image is exact up to interpolation. Scene files are
//! (de)serialized by the CLI layer from these serde-derived types.

use ndarray::{Array2, Array3};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::geometry::{depth_to_disparity, CameraRig, DepthMap, DisparityMap, MaskedMap, DEG_PER_RAD};

/// Minimum clearance between any primitive surface and either camera center.
const CAMERA_CLEARANCE_M: f64 = 0.35;
/// A top-view hit counts as the same point when within this depth fraction.
const OCCLUSION_EPS_FRACTION: f64 = 1e-6;
/// Rays ignore hits closer than this, guarding self-intersection.
const RAY_EPS: f64 = 1e-9;

type Vec3 = [f64; 3];

fn dot(a: Vec3, b: Vec3) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

fn sub(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

fn norm(a: Vec3) -> f64 {
    dot(a, a).sqrt()
}

/// Smooth ambient RGB albedo: per channel, base + amp * sin(freq * u . p +
/// phase) along a fixed channel direction, clamped to [0, 1].
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Pattern {
    pub base: [f64; 3],
    pub amp: [f64; 3],
    pub freq: [f64; 3],
    pub phase: [f64; 3],
}

/// Fixed per-channel texture directions; unit variety, not unit length.
const PATTERN_DIRS: [Vec3; 3] = [[1.0, 0.3, 0.7], [0.6, 1.0, 0.2], [0.3, 0.8, 1.0]];

impl Pattern {
    pub fn shade(&self, p: Vec3) -> [f64; 3] {
        let mut c = [0.0; 3];
        for i in 0..3 {
            let u = dot(PATTERN_DIRS[i], p);
            c[i] = (self.base[i] + self.amp[i] * (self.freq[i] * u + self.phase[i]).sin())
                .clamp(0.0, 1.0);
        }
        c
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub enum Primitive {
    Sphere {
        center: Vec3,
        radius: f64,
        pattern: Pattern,
    },
    /// Axis-aligned box given by its two corners.
    Box {
        min: Vec3,
        max: Vec3,
        pattern: Pattern,
    },
}

impl Primitive {
    /// Nearest ray intersection beyond RAY_EPS, as a distance along `dir`.
    fn intersect(&self, origin: Vec3, dir: Vec3) -> Option<f64> {
        match self {
            Primitive::Sphere { center, radius, .. } => {
                let oc = sub(origin, *center);
                let b = dot(oc, dir);
                let disc = b * b - (dot(oc, oc) - radius * radius);
                if disc < 0.0 {
                    return None;
                }
                let s = disc.sqrt();
                let t = -b - s;
                if t > RAY_EPS {
                    Some(t)
                } else {
                    let t = -b + s;
                    (t > RAY_EPS).then_some(t)
                }
            }
            Primitive::Box { min, max, .. } => {
                let mut t_near = f64::NEG_INFINITY;
                let mut t_far = f64::INFINITY;
                for a in 0..3 {
                    if dir[a] == 0.0 {
                        if origin[a] < min[a] || origin[a] > max[a] {
                            return None;
                        }
                        continue;
                    }
                    let inv = 1.0 / dir[a];
                    let (t0, t1) = ((min[a] - origin[a]) * inv, (max[a] - origin[a]) * inv);
                    let (t0, t1) = if t0 < t1 { (t0, t1) } else { (t1, t0) };
                    t_near = t_near.max(t0);
                    t_far = t_far.min(t1);
                    if t_near > t_far {
                        return None;
                    }
                }
                if t_near > RAY_EPS {
                    Some(t_near)
                } else {
                    (t_far > RAY_EPS).then_some(t_far)
                }
            }
        }
    }

    fn pattern(&self) -> &Pattern {
        match self {
            Primitive::Sphere { pattern, .. } => pattern,
            Primitive::Box { pattern, .. } => pattern,
        }
    }

    /// Conservative distance from a point to the primitive surface.
    fn clearance(&self, p: Vec3) -> f64 {
        match self {
            Primitive::Sphere { center, radius, .. } => norm(sub(p, *center)) - radius,
            Primitive::Box { min, max, .. } => {
                let mut d2 = 0.0;
                let mut inside = true;
                for a in 0..3 {
                    if p[a] < min[a] {
                        d2 += (min[a] - p[a]).powi(2);
                        inside = false;
                    } else if p[a] > max[a] {
                        d2 += (p[a] - max[a]).powi(2);
                        inside = false;
                    }
                }
                if inside {
                    -1.0
                } else {
                    d2.sqrt()
                }
            }
        }
    }

    fn max_extent_from_origin(&self) -> f64 {
        match self {
            Primitive::Sphere { center, radius, .. } => norm(*center) + radius,
            Primitive::Box { min, max, .. } => {
                let mut far = 0.0f64;
                for corner in 0..8 {
                    let p = [
                        if corner & 1 == 0 { min[0] } else { max[0] },
                        if corner & 2 == 0 { min[1] } else { max[1] },
                        if corner & 4 == 0 { min[2] } else { max[2] },
                    ];
                    far = far.max(norm(p));
                }
                far
            }
        }
    }
}

/// Parametric scene around the rig. The vertical axis is +y; the bottom
/// camera sits at the origin and the top camera at +baseline on +y.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Scene {
    pub primitives: Vec<Primitive>,
    /// Radius of the enclosing background sphere, centered at the origin.
    pub background_radius_m: f64,
    pub background: Pattern,
    /// Rigid azimuth rotation of the scene about the rig axis, in whole
    /// image columns. Whole columns keep rotation equivariance exact: the
    /// renderer remaps column indices instead of rotating float coordinates.
    pub azimuth_columns: i64,
}

impl Scene {
    pub fn validate(&self, rig: &CameraRig) -> Result<()> {
        let cams = [[0.0, 0.0, 0.0], [0.0, rig.baseline_m, 0.0]];
        if self.background_radius_m <= rig.baseline_m + CAMERA_CLEARANCE_M {
            return Err(CoreError::config(
                "background sphere must enclose both cameras with clearance",
            ));
        }
        for (i, prim) in self.primitives.iter().enumerate() {
            for cam in cams {
                if prim.clearance(cam) < rig.baseline_m * 0.05 {
                    return Err(CoreError::config(format!(
                        "primitive {i} intersects or crowds a camera center"
                    )));
                }
            }
            if prim.max_extent_from_origin() >= self.background_radius_m {
                return Err(CoreError::config(format!(
                    "primitive {i} extends beyond the background sphere"
                )));
            }
        }
        Ok(())
    }

    pub fn rotated_by_columns(&self, k: i64) -> Scene {
        let mut s = self.clone();
        s.azimuth_columns += k;
        s
    }
}

/// One rendered stereo pair with its exact ground truth. Images are (3, H, W)
/// RGB in [0, 1]; depth is the Euclidean hit distance from the bottom camera;
/// disparity is the polar-angle difference of the same 3D point seen from the
/// two cameras, in degrees; `occluded` marks pixels visible from the bottom
/// camera but hidden from the top one.
#[derive(Clone, Debug)]
pub struct RenderedPair {
    pub image_top: Array3<f64>,
    pub image_bottom: Array3<f64>,
    pub depth_bottom: DepthMap,
    pub disparity: DisparityMap,
    pub occluded: Array2<bool>,
}

impl RenderedPair {
    /// Definitional consistency of the ground-truth channels.
    pub fn validate(&self, rig: &CameraRig) -> Result<()> {
        let derived = depth_to_disparity(&self.depth_bottom, rig)?;
        for (idx, &v) in derived.valid.indexed_iter() {
            if !v {
                return Err(CoreError::numeric(format!(
                    "depth does not convert to a disparity at {idx:?}"
                )));
            }
            let err = (derived.values[idx] - self.disparity.values[idx]).abs();
            if err > 1e-9 {
                return Err(CoreError::numeric(format!(
                    "disparity disagrees with converted depth by {err} at {idx:?}"
                )));
            }
        }
        for img in [&self.image_top, &self.image_bottom] {
            if img.iter().any(|v| !(0.0..=1.0).contains(v)) {
                return Err(CoreError::numeric("image sample outside [0, 1]"));
            }
        }
        Ok(())
    }
}

fn nearest_hit(scene: &Scene, origin: Vec3, dir: Vec3) -> (f64, Option<usize>) {
    let mut best_t = background_hit(scene, origin, dir);
    let mut best = None;
    for (i, prim) in scene.primitives.iter().enumerate() {
        if let Some(t) = prim.intersect(origin, dir) {
            if t < best_t {
                best_t = t;
                best = Some(i);
            }
        }
    }
    (best_t, best)
}

/// Distance to the background sphere; the origin is always inside it.
fn background_hit(scene: &Scene, origin: Vec3, dir: Vec3) -> f64 {
    let r = scene.background_radius_m;
    let b = dot(origin, dir);
    let disc = b * b - (dot(origin, origin) - r * r);
    -b + disc.sqrt()
}

fn shade_hit(scene: &Scene, hit: Option<usize>, p: Vec3) -> [f64; 3] {
    match hit {
        Some(i) => scene.primitives[i].pattern().shade(p),
        None => scene.background.shade(p),
    }
}

/// Ray-cast the scene from both cameras.
///
/// Per pixel: the polar angle comes from the rig's row mapping and the
/// azimuth from the column index, rotated by whole columns in index space so
/// that rotated scenes reuse bit-identical per-column arithmetic.
pub fn render(scene: &Scene, rig: &CameraRig) -> Result<RenderedPair> {
    scene.validate(rig)?;
    let (h, w) = (rig.height_px, rig.width_px);
    let angles = rig.polar_angle_map();
    let top_cam: Vec3 = [0.0, rig.baseline_m, 0.0];

    let mut image_top = Array3::zeros((3, h, w));
    let mut image_bottom = Array3::zeros((3, h, w));
    let mut depth = Array2::zeros((h, w));
    let mut disparity = Array2::zeros((h, w));
    let mut occluded = Array2::from_elem((h, w), false);

    for row in 0..h {
        let theta = angles.theta(row);
        let (sin_t, cos_t) = theta.sin_cos();
        for col in 0..w {
            let col_scene =
                (col as i64 - scene.azimuth_columns).rem_euclid(w as i64) as usize;
            let phi = 2.0 * std::f64::consts::PI * (col_scene as f64 + 0.5) / w as f64;
            let (sin_p, cos_p) = phi.sin_cos();
            let dir: Vec3 = [sin_t * cos_p, cos_t, sin_t * sin_p];

            let (t_b, hit_b) = nearest_hit(scene, [0.0, 0.0, 0.0], dir);
            let p: Vec3 = [t_b * dir[0], t_b * dir[1], t_b * dir[2]];
            depth[[row, col]] = t_b;
            let cb = shade_hit(scene, hit_b, p);

            // Same 3D point from the top camera: polar angles measured from
            // +y give the angular disparity directly.
            let rel = sub(p, top_cam);
            let rho = (rel[0] * rel[0] + rel[2] * rel[2]).sqrt();
            let theta_top = rho.atan2(rel[1]);
            disparity[[row, col]] = (theta_top - theta) * DEG_PER_RAD;

            // Occlusion probe: does the top camera see this exact point?
            let dist_top = norm(rel);
            let to_p: Vec3 = [rel[0] / dist_top, rel[1] / dist_top, rel[2] / dist_top];
            let (t_probe, _) = nearest_hit(scene, top_cam, to_p);
            if dist_top - t_probe > OCCLUSION_EPS_FRACTION * t_b {
                occluded[[row, col]] = true;
            }

            let (t_t, hit_t) = nearest_hit(scene, top_cam, dir);
            let pt: Vec3 = [
                top_cam[0] + t_t * dir[0],
                top_cam[1] + t_t * dir[1],
                top_cam[2] + t_t * dir[2],
            ];
            let ct = shade_hit(scene, hit_t, pt);

            for ch in 0..3 {
                image_bottom[[ch, row, col]] = cb[ch];
                image_top[[ch, row, col]] = ct[ch];
            }
        }
    }

    Ok(RenderedPair {
        image_top,
        image_bottom,
        depth_bottom: MaskedMap::dense(depth)?,
        disparity: MaskedMap::dense(disparity)?,
        occluded,
    })
}

/// Scene families: primitive counts and depth ranges scale from large,
/// close, coarsely textured objects up to far outdoor ranges.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Difficulty {
    Easy,
    Indoor,
    Outdoor,
}

impl std::str::FromStr for Difficulty {
    type Err = CoreError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "easy" => Ok(Difficulty::Easy),
            "indoor" => Ok(Difficulty::Indoor),
            "outdoor" => Ok(Difficulty::Outdoor),
            other => Err(CoreError::config(format!(
                "unknown difficulty {other:?}; expected easy, indoor, or outdoor"
            ))),
        }
    }
}

impl std::fmt::Display for Difficulty {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            Difficulty::Easy => "easy",
            Difficulty::Indoor => "indoor",
            Difficulty::Outdoor => "outdoor",
        };
        f.write_str(s)
    }
}

/// Texture frequency for a surface at `dist`, targeting a fixed phase change
/// per pixel so warping interpolation error stays well under quantization.
fn pattern_for(rng: &mut ChaCha8Rng, dist: f64, rows: usize, fov: f64) -> Pattern {
    let footprint = dist * fov / rows as f64;
    let mut p = Pattern {
        base: [0.0; 3],
        amp: [0.0; 3],
        freq: [0.0; 3],
        phase: [0.0; 3],
    };
    for i in 0..3 {
        p.base[i] = rng.random_range(0.3..0.7);
        p.amp[i] = rng.random_range(0.12..0.22);
        p.freq[i] = rng.random_range(0.15..0.35) / footprint;
        p.phase[i] = rng.random_range(0.0..std::f64::consts::TAU);
    }
    p
}

/// Deterministic random scene for a unit rig family (baseline 0.2 m class).
pub fn make_random_scene(seed: u64, difficulty: Difficulty) -> Scene {
    make_random_scene_for(seed, difficulty, 128, std::f64::consts::PI)
}

/// Deterministic random scene with texture frequency tuned to the target
/// image height and vertical field of view.
pub fn make_random_scene_for(seed: u64, difficulty: Difficulty, rows: usize, fov: f64) -> Scene {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (n_spheres, n_boxes, dist_lo, dist_hi, bg_radius) = match difficulty {
        Difficulty::Easy => (rng.random_range(2..=3usize), 1usize, 0.5, 2.5, 12.0),
        Difficulty::Indoor => (rng.random_range(2..=4usize), rng.random_range(1..=2usize), 1.0, 9.0, 12.0),
        Difficulty::Outdoor => (rng.random_range(2..=3usize), rng.random_range(1..=2usize), 2.0, 60.0, 80.0),
    };

    let mut primitives = Vec::new();
    let place = |rng: &mut ChaCha8Rng, is_box: bool| {
        for _ in 0..100 {
            let dist = rng.random_range(dist_lo..dist_hi);
            let polar = rng.random_range(50f64.to_radians()..130f64.to_radians());
            let azim = rng.random_range(0.0..std::f64::consts::TAU);
            let center = [
                dist * polar.sin() * azim.cos(),
                dist * polar.cos(),
                dist * polar.sin() * azim.sin(),
            ];
            let ang = rng.random_range(5f64.to_radians()..16f64.to_radians());
            let pattern = pattern_for(rng, dist, rows, fov);
            let prim = if is_box {
                let he = [
                    dist * (ang * rng.random_range(0.5..1.5)).tan(),
                    dist * (ang * rng.random_range(0.5..1.5)).tan(),
                    dist * (ang * rng.random_range(0.5..1.5)).tan(),
                ];
                Primitive::Box {
                    min: [center[0] - he[0], center[1] - he[1], center[2] - he[2]],
                    max: [center[0] + he[0], center[1] + he[1], center[2] + he[2]],
                    pattern,
                }
            } else {
                Primitive::Sphere {
                    center,
                    radius: dist * ang.tan(),
                    pattern,
                }
            };
            let clear = prim.clearance([0.0, 0.0, 0.0]).min(prim.clearance([0.0, 0.25, 0.0]));
            if clear > CAMERA_CLEARANCE_M && prim.max_extent_from_origin() < 0.9 * bg_radius {
                return Some(prim);
            }
        }
        None
    };
    for _ in 0..n_spheres {
        if let Some(p) = place(&mut rng, false) {
            primitives.push(p);
        }
    }
    for _ in 0..n_boxes {
        if let Some(p) = place(&mut rng, true) {
            primitives.push(p);
        }
    }

    let background = pattern_for(&mut rng, bg_radius, rows, fov);
    Scene {
        primitives,
        background_radius_m: bg_radius,
        background,
        azimuth_columns: 0,
    }
}
