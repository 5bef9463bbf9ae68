//! Python bindings over the core library: synthetic rendering, disparity
//! and depth conversions, the training losses, metric reports, and false
//! color rendering. Arrays cross the boundary as flat row-major lists with
//! an explicit (height, width) shape; images are channel-first.

use ndarray::{Array2, ArrayD, IxDyn};
use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;

use omnistereo_core::autograd::Tensor;
use omnistereo_core::geometry::{self, CameraRig, MaskedMap};
use omnistereo_core::losses::{l1_loss, silog_loss};
use omnistereo_core::metrics::{evaluate, EvalSample};
use omnistereo_core::synthdata::{make_random_scene_for, render, Difficulty};
use omnistereo_core::{viz, CoreError};

fn err(e: CoreError) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn masked(values: Vec<f64>, valid: Vec<bool>, shape: (usize, usize)) -> PyResult<MaskedMap> {
    let (h, w) = shape;
    if values.len() != h * w || valid.len() != h * w {
        return Err(PyValueError::new_err(format!(
            "shape ({h}, {w}) needs {} entries; got {} values and {} flags",
            h * w,
            values.len(),
            valid.len()
        )));
    }
    let values = Array2::from_shape_vec((h, w), values).expect("length checked");
    let valid = Array2::from_shape_vec((h, w), valid).expect("length checked");
    MaskedMap::new(values, valid).map_err(err)
}

fn flatten2(map: MaskedMap) -> (Vec<f64>, Vec<bool>) {
    (
        map.values.iter().copied().collect(),
        map.valid.iter().copied().collect(),
    )
}

/// Renders one synthetic top-bottom pair over a full-circle rig. Returns
/// (top, bottom, disparity_deg, valid): the images flat (3, H, W), the
/// ground truth flat (H, W) with occlusions marked invalid.
#[pyfunction]
fn render_pair(
    seed: u64,
    difficulty: &str,
    baseline_m: f64,
    height: usize,
    width: usize,
) -> PyResult<(Vec<f64>, Vec<f64>, Vec<f64>, Vec<bool>)> {
    let difficulty: Difficulty = difficulty.parse().map_err(err)?;
    let rig = CameraRig::new(baseline_m, height, width).map_err(err)?;
    let scene = make_random_scene_for(seed, difficulty, height, rig.vertical_fov_rad);
    let pair = render(&scene, &rig).map_err(err)?;
    Ok((
        pair.image_top.iter().copied().collect(),
        pair.image_bottom.iter().copied().collect(),
        pair.disparity.values.iter().copied().collect(),
        pair.disparity.valid.iter().copied().collect(),
    ))
}

/// Closed-form metric depth from angular disparity; degenerate pixels come
/// back invalid.
#[pyfunction]
fn disparity_to_depth(
    values: Vec<f64>,
    valid: Vec<bool>,
    shape: (usize, usize),
    baseline_m: f64,
) -> PyResult<(Vec<f64>, Vec<bool>)> {
    let rig = CameraRig::new(baseline_m, shape.0, shape.1).map_err(err)?;
    let map = masked(values, valid, shape)?;
    Ok(flatten2(geometry::disparity_to_depth(&map, &rig).map_err(err)?))
}

/// Algebraic inverse of `disparity_to_depth`, in degrees.
#[pyfunction]
fn depth_to_disparity(
    values: Vec<f64>,
    valid: Vec<bool>,
    shape: (usize, usize),
    baseline_m: f64,
) -> PyResult<(Vec<f64>, Vec<bool>)> {
    let rig = CameraRig::new(baseline_m, shape.0, shape.1).map_err(err)?;
    let map = masked(values, valid, shape)?;
    Ok(flatten2(geometry::depth_to_disparity(&map, &rig).map_err(err)?))
}

fn dense(values: Vec<f64>, shape: (usize, usize)) -> PyResult<ArrayD<f64>> {
    let (h, w) = shape;
    if values.len() != h * w {
        return Err(PyValueError::new_err(format!(
            "shape ({h}, {w}) needs {} entries; got {}",
            h * w,
            values.len()
        )));
    }
    Ok(ArrayD::from_shape_vec(IxDyn(&[h, w]), values).expect("length checked"))
}

/// Mean absolute error over valid pixels.
#[pyfunction]
fn masked_l1(
    pred: Vec<f64>,
    gt: Vec<f64>,
    valid: Vec<bool>,
    shape: (usize, usize),
) -> PyResult<f64> {
    let gt_map = masked(gt, valid, shape)?;
    let pred = Tensor::constant(dense(pred, shape)?);
    Ok(l1_loss(&pred, &gt_map.values.into_dyn(), &gt_map.valid)
        .map_err(err)?
        .item())
}

/// Scale-invariant log error over valid pixels.
#[pyfunction]
#[pyo3(signature = (pred, gt, valid, shape, lambda_var = 0.15, eps_log = 1e-6))]
fn silog(
    pred: Vec<f64>,
    gt: Vec<f64>,
    valid: Vec<bool>,
    shape: (usize, usize),
    lambda_var: f64,
    eps_log: f64,
) -> PyResult<f64> {
    let gt_map = masked(gt, valid, shape)?;
    let pred = Tensor::constant(dense(pred, shape)?);
    Ok(
        silog_loss(&pred, &gt_map.values.into_dyn(), &gt_map.valid, lambda_var, eps_log)
            .map_err(err)?
            .item(),
    )
}

/// Full metric report of one prediction against dense ground truth, as a
/// JSON string: disparity and depth errors, border consistency, and the
/// per-depth-bucket breakdown.
#[pyfunction]
fn evaluate_pair(
    pred: Vec<f64>,
    gt: Vec<f64>,
    valid: Vec<bool>,
    shape: (usize, usize),
    baseline_m: f64,
    buckets_m: Vec<(f64, f64)>,
) -> PyResult<String> {
    let rig = CameraRig::new(baseline_m, shape.0, shape.1).map_err(err)?;
    let gt_map = masked(gt, valid, shape)?;
    let pred = dense(pred, shape)?
        .into_dimensionality()
        .expect("built as 2d");
    let sample = EvalSample {
        pred_disp_deg: pred,
        gt_disp_sparse: gt_map.clone(),
        gt_disp_complete: gt_map,
    };
    Ok(evaluate(&rig, &[sample], &buckets_m).map_err(err)?.to_json())
}

/// False-color rendering: flat (H, W, 3) bytes, cold to warm over the valid
/// value range, invalid pixels black.
#[pyfunction]
#[pyo3(signature = (values, valid, shape, log_scale = false))]
fn colorize(
    values: Vec<f64>,
    valid: Vec<bool>,
    shape: (usize, usize),
    log_scale: bool,
) -> PyResult<Vec<u8>> {
    let map = masked(values, valid, shape)?;
    let img = viz::colorize(&map, log_scale).map_err(err)?;
    let (_, h, w) = img.dim();
    let mut out = Vec::with_capacity(h * w * 3);
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                out.push((img[[c, y, x]] * 255.0).round().clamp(0.0, 255.0) as u8);
            }
        }
    }
    Ok(out)
}

#[pymodule]
fn omnistereo(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(render_pair, m)?)?;
    m.add_function(wrap_pyfunction!(disparity_to_depth, m)?)?;
    m.add_function(wrap_pyfunction!(depth_to_disparity, m)?)?;
    m.add_function(wrap_pyfunction!(masked_l1, m)?)?;
    m.add_function(wrap_pyfunction!(silog, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate_pair, m)?)?;
    m.add_function(wrap_pyfunction!(colorize, m)?)?;
    Ok(())
}
