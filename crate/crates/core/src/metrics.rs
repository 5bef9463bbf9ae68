//! Evaluation metrics over masked disparity and depth maps: MAE, RMSE,
//! MARE, the left-right border consistency error of equirectangular
//! predictions, and disparity MAE bucketed by ground-truth depth range.
//!
//! Pixel metrics pool over every valid pixel of a batch; the border
//! consistency error averages per image first, then across images.

use std::collections::BTreeMap;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::geometry::{disparity_to_depth, CameraRig, DisparityMap, MaskedMap};

/// Depth ranges (meters, half-open) used for range-bucketed disparity MAE.
pub const DEFAULT_DEPTH_BUCKETS_M: [(f64, f64); 3] = [(0.0, 4.0), (4.0, 9.0), (9.0, 230.0)];

fn valid_pairs(pred: &Array2<f64>, gt: &MaskedMap) -> Result<Vec<(f64, f64)>> {
    if pred.dim() != gt.values.dim() {
        return Err(CoreError::data(format!(
            "metric shape mismatch: pred {:?}, gt {:?}",
            pred.dim(),
            gt.values.dim()
        )));
    }
    let pairs: Vec<(f64, f64)> = gt
        .valid
        .indexed_iter()
        .filter(|(_, &v)| v)
        .map(|(idx, _)| (pred[idx], gt.values[idx]))
        .collect();
    if pairs.is_empty() {
        return Err(CoreError::data("metric over an empty validity mask"));
    }
    Ok(pairs)
}

/// Mean absolute error over valid pixels.
pub fn mae(pred: &Array2<f64>, gt: &MaskedMap) -> Result<f64> {
    let pairs = valid_pairs(pred, gt)?;
    Ok(pairs.iter().map(|(p, g)| (p - g).abs()).sum::<f64>() / pairs.len() as f64)
}

/// Root mean squared error over valid pixels.
pub fn rmse(pred: &Array2<f64>, gt: &MaskedMap) -> Result<f64> {
    let pairs = valid_pairs(pred, gt)?;
    Ok((pairs.iter().map(|(p, g)| (p - g).powi(2)).sum::<f64>() / pairs.len() as f64).sqrt())
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct MareResult {
    pub value: f64,
    /// Valid pixels with positive ground truth that entered the mean.
    pub n_used: usize,
    /// Valid pixels skipped because their ground truth was not positive.
    pub n_excluded: usize,
}

/// Mean absolute relative error |p - g| / g over valid pixels with g > 0;
/// non-positive ground-truth pixels are excluded and counted.
pub fn mare(pred: &Array2<f64>, gt: &MaskedMap) -> Result<MareResult> {
    let pairs = valid_pairs(pred, gt)?;
    let mut sum = 0.0;
    let mut used = 0usize;
    for (p, g) in &pairs {
        if *g > 0.0 {
            sum += (p - g).abs() / g;
            used += 1;
        }
    }
    if used == 0 {
        return Err(CoreError::data(
            "relative error undefined: no valid pixel has positive ground truth",
        ));
    }
    Ok(MareResult {
        value: sum / used as f64,
        n_used: used,
        n_excluded: pairs.len() - used,
    })
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct LrceResult {
    pub value: f64,
    /// Images that contributed at least one row valid at both borders.
    pub n_images_used: usize,
    /// Images excluded because no row is valid at both borders.
    pub n_images_excluded: usize,
}

/// Left-right border consistency error: per image, the mean over rows valid
/// at both column 0 and column W-1 of |(p_L - p_R) - (g_L - g_R)|, then the
/// mean across images. Images without any such row are excluded and counted.
pub fn lrce(preds: &[Array2<f64>], gts_complete: &[MaskedMap]) -> Result<LrceResult> {
    if preds.len() != gts_complete.len() || preds.is_empty() {
        return Err(CoreError::data("border consistency needs matched, nonempty batches"));
    }
    let mut sum = 0.0;
    let mut used = 0usize;
    for (pred, gt) in preds.iter().zip(gts_complete) {
        if pred.dim() != gt.values.dim() {
            return Err(CoreError::data("border consistency shape mismatch"));
        }
        let last = gt.width() - 1;
        let mut img_sum = 0.0;
        let mut rows = 0usize;
        for r in 0..gt.height() {
            if gt.valid[[r, 0]] && gt.valid[[r, last]] {
                let dp = pred[[r, 0]] - pred[[r, last]];
                let dg = gt.values[[r, 0]] - gt.values[[r, last]];
                img_sum += (dp - dg).abs();
                rows += 1;
            }
        }
        if rows > 0 {
            sum += img_sum / rows as f64;
            used += 1;
        }
    }
    if used == 0 {
        return Err(CoreError::data(
            "border consistency undefined: no image has a row valid at both borders",
        ));
    }
    Ok(LrceResult {
        value: sum / used as f64,
        n_images_used: used,
        n_images_excluded: preds.len() - used,
    })
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct BucketStat {
    pub lo_m: f64,
    pub hi_m: f64,
    pub mae: f64,
    pub n: usize,
}

/// Disparity MAE restricted to pixels whose ground-truth depth falls in each
/// half-open bucket [lo, hi). Empty buckets are omitted rather than zero.
pub fn bucketed_mae(
    pred_disp: &Array2<f64>,
    gt_disp: &DisparityMap,
    gt_depth: &MaskedMap,
    buckets_m: &[(f64, f64)],
) -> Result<Vec<BucketStat>> {
    if pred_disp.dim() != gt_disp.values.dim() || gt_depth.values.dim() != gt_disp.values.dim() {
        return Err(CoreError::data("bucketed error shape mismatch"));
    }
    let mut out = Vec::new();
    for &(lo, hi) in buckets_m {
        if !(hi > lo) {
            return Err(CoreError::config("bucket edges must satisfy lo < hi"));
        }
        let mut sum = 0.0;
        let mut n = 0usize;
        for (idx, &dv) in gt_disp.valid.indexed_iter() {
            if !dv || !gt_depth.valid[idx] {
                continue;
            }
            let z = gt_depth.values[idx];
            if z >= lo && z < hi {
                sum += (pred_disp[idx] - gt_disp.values[idx]).abs();
                n += 1;
            }
        }
        if n > 0 {
            out.push(BucketStat {
                lo_m: lo,
                hi_m: hi,
                mae: sum / n as f64,
                n,
            });
        }
    }
    Ok(out)
}

/// Metrics for one quantity (disparity in degrees or depth in meters).
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct QuantityMetrics {
    pub mae: f64,
    pub rmse: f64,
    pub mare: f64,
    pub lrce: f64,
    /// Pixels that entered the pooled pixel metrics.
    pub n_valid: usize,
    /// Pixels excluded from the relative error for non-positive ground truth.
    pub mare_excluded: usize,
    /// Images excluded from the border consistency mean.
    pub lrce_images_excluded: usize,
}

/// One prediction with its sparse and completed ground truth, both in
/// degrees of disparity.
pub struct EvalSample {
    pub pred_disp_deg: Array2<f64>,
    pub gt_disp_sparse: DisparityMap,
    pub gt_disp_complete: DisparityMap,
}

/// Full evaluation report. Flat keys: `disparity.{mae,rmse,mare,lrce}`,
/// `depth.{mae,rmse,mare,lrce}`, `disparity.n_valid`, `depth.n_valid`,
/// `bucket.<lo>-<hi>m.{mae,n}`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MetricReport {
    pub disparity: QuantityMetrics,
    pub depth: QuantityMetrics,
    pub buckets: Vec<BucketStat>,
    pub n_images: usize,
}

impl MetricReport {
    /// Flat `key = value` lines, one metric per line.
    pub fn flat_lines(&self) -> String {
        let mut s = String::new();
        for (name, q) in [("disparity", &self.disparity), ("depth", &self.depth)] {
            s.push_str(&format!("{name}.mae = {:.6}\n", q.mae));
            s.push_str(&format!("{name}.rmse = {:.6}\n", q.rmse));
            s.push_str(&format!("{name}.mare = {:.6}\n", q.mare));
            s.push_str(&format!("{name}.lrce = {:.6}\n", q.lrce));
            s.push_str(&format!("{name}.n_valid = {}\n", q.n_valid));
        }
        for b in &self.buckets {
            let key = format!("bucket.{}-{}m", b.lo_m, b.hi_m);
            s.push_str(&format!("{key}.mae = {:.6}\n", b.mae));
            s.push_str(&format!("{key}.n = {}\n", b.n));
        }
        s.push_str(&format!("n_images = {}\n", self.n_images));
        s
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

/// Pool pixel metrics over a batch and attach the per-image border
/// consistency error, for disparity (degrees) and derived depth (meters).
///
/// Pixel metrics use the sparse ground truth; border consistency uses the
/// completed ground truth. Depth values come from the disparity maps through
/// the rig geometry, keeping only pixels where the conversion is valid for
/// both prediction and ground truth.
pub fn evaluate(
    rig: &CameraRig,
    samples: &[EvalSample],
    buckets_m: &[(f64, f64)],
) -> Result<MetricReport> {
    if samples.is_empty() {
        return Err(CoreError::data("evaluation over an empty batch"));
    }

    struct Pool {
        abs: f64,
        sq: f64,
        rel: f64,
        n: usize,
        n_rel: usize,
        rel_excluded: usize,
    }
    impl Pool {
        fn new() -> Self {
            Pool { abs: 0.0, sq: 0.0, rel: 0.0, n: 0, n_rel: 0, rel_excluded: 0 }
        }
        fn push(&mut self, p: f64, g: f64) {
            self.abs += (p - g).abs();
            self.sq += (p - g).powi(2);
            self.n += 1;
            if g > 0.0 {
                self.rel += (p - g).abs() / g;
                self.n_rel += 1;
            } else {
                self.rel_excluded += 1;
            }
        }
        fn finish(&self, lrce: &LrceResult) -> Result<QuantityMetrics> {
            if self.n == 0 || self.n_rel == 0 {
                return Err(CoreError::data("evaluation found no valid pixels"));
            }
            Ok(QuantityMetrics {
                mae: self.abs / self.n as f64,
                rmse: (self.sq / self.n as f64).sqrt(),
                mare: self.rel / self.n_rel as f64,
                lrce: lrce.value,
                n_valid: self.n,
                mare_excluded: self.rel_excluded,
                lrce_images_excluded: lrce.n_images_excluded,
            })
        }
    }

    let mut disp_pool = Pool::new();
    let mut depth_pool = Pool::new();
    let mut bucket_sums: BTreeMap<usize, (f64, usize)> = BTreeMap::new();
    let mut disp_preds = Vec::new();
    let mut disp_gts = Vec::new();
    let mut depth_preds = Vec::new();
    let mut depth_gts = Vec::new();

    for s in samples {
        let gt_depth_sparse = disparity_to_depth(&s.gt_disp_sparse, rig)?;
        let pred_dense = DisparityMap::dense(s.pred_disp_deg.clone())?;
        let pred_depth = disparity_to_depth(&pred_dense, rig)?;

        for (idx, &v) in s.gt_disp_sparse.valid.indexed_iter() {
            if !v {
                continue;
            }
            disp_pool.push(s.pred_disp_deg[idx], s.gt_disp_sparse.values[idx]);
            if gt_depth_sparse.valid[idx] && pred_depth.valid[idx] {
                depth_pool.push(pred_depth.values[idx], gt_depth_sparse.values[idx]);
                let z = gt_depth_sparse.values[idx];
                for (bi, &(lo, hi)) in buckets_m.iter().enumerate() {
                    if z >= lo && z < hi {
                        let e = bucket_sums.entry(bi).or_insert((0.0, 0));
                        e.0 += (s.pred_disp_deg[idx] - s.gt_disp_sparse.values[idx]).abs();
                        e.1 += 1;
                    }
                }
            }
        }

        let gt_depth_complete = disparity_to_depth(&s.gt_disp_complete, rig)?;
        // Depth borders compare only where the predicted conversion held.
        let mut depth_gt_masked = gt_depth_complete.clone();
        for (idx, v) in depth_gt_masked.valid.indexed_iter_mut() {
            *v = *v && pred_depth.valid[idx];
        }
        disp_preds.push(s.pred_disp_deg.clone());
        disp_gts.push(s.gt_disp_complete.clone());
        depth_preds.push(pred_depth.values.clone());
        depth_gts.push(depth_gt_masked);
    }

    let disp_lrce = lrce(&disp_preds, &disp_gts)?;
    let depth_lrce = lrce(&depth_preds, &depth_gts)?;
    let buckets = bucket_sums
        .into_iter()
        .map(|(bi, (sum, n))| BucketStat {
            lo_m: buckets_m[bi].0,
            hi_m: buckets_m[bi].1,
            mae: sum / n as f64,
            n,
        })
        .collect();

    Ok(MetricReport {
        disparity: disp_pool.finish(&disp_lrce)?,
        depth: depth_pool.finish(&depth_lrce)?,
        buckets,
        n_images: samples.len(),
    })
}
