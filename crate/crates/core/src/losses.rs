//! Training losses over masked disparity maps: L1, smooth L1, the
//! scale-invariant log loss, and the two stage losses that weight a whole
//! prediction sequence with exponentially increasing emphasis on later
//! iterations.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::autograd::{Data, Tensor};
use crate::error::{CoreError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    /// Iteration-weight attenuation; iterate i of N carries gamma^(N-i).
    pub gamma: f64,
    /// Variance-correction weight of the scale-invariant log loss.
    pub lambda_silog: f64,
    /// Positive floor applied inside logarithms.
    pub eps_log: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            gamma: 0.9,
            lambda_silog: 0.15,
            eps_log: 1e-6,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return Err(CoreError::config("gamma must lie in (0, 1]"));
        }
        if !(0.0..=1.0).contains(&self.lambda_silog) {
            return Err(CoreError::config("lambda must lie in [0, 1]"));
        }
        if !(self.eps_log > 0.0) {
            return Err(CoreError::config("eps_log must be positive"));
        }
        Ok(())
    }
}

/// Validity mask as 0/1 weights plus the count, shared by every loss.
fn mask_weights(pred: &Tensor, gt: &Data, mask: &Array2<bool>) -> Result<(Data, f64)> {
    let dims: Vec<usize> = vec![mask.nrows(), mask.ncols()];
    if pred.shape() != dims.as_slice() || gt.shape() != dims.as_slice() {
        return Err(CoreError::data(format!(
            "loss shape mismatch: pred {:?}, gt {:?}, mask {:?}",
            pred.shape(),
            gt.shape(),
            (mask.nrows(), mask.ncols())
        )));
    }
    let n = mask.iter().filter(|&&v| v).count();
    if n == 0 {
        return Err(CoreError::data("loss over an empty validity mask"));
    }
    let w = mask.mapv(|v| if v { 1.0 } else { 0.0 }).into_dyn();
    Ok((w, n as f64))
}

/// Mean absolute error over valid pixels.
pub fn l1_loss(pred: &Tensor, gt: &Data, mask: &Array2<bool>) -> Result<Tensor> {
    let (w, n) = mask_weights(pred, gt, mask)?;
    let diff = pred.sub(&Tensor::constant(gt.clone()));
    Ok(diff.abs().mask(&w).sum_all().mul_scalar(1.0 / n))
}

/// Mean smooth-L1 error: quadratic inside |e| < 1, linear minus 1/2 outside.
/// The branch selector depends only on values, and both branches agree in
/// value and slope at |e| = 1, so treating it as constant is exact.
pub fn smooth_l1_loss(pred: &Tensor, gt: &Data, mask: &Array2<bool>) -> Result<Tensor> {
    let (w, n) = mask_weights(pred, gt, mask)?;
    let diff = pred.sub(&Tensor::constant(gt.clone()));
    let quad_sel = diff.data().mapv(|e| if e.abs() < 1.0 { 1.0 } else { 0.0 });
    let lin_sel = quad_sel.mapv(|v| 1.0 - v);
    let quad = diff.mul(&diff).mul_scalar(0.5).mask(&quad_sel);
    let lin = diff.abs().add_scalar(-0.5).mask(&lin_sel);
    Ok(quad.add(&lin).mask(&w).sum_all().mul_scalar(1.0 / n))
}

/// Scale-invariant log loss: (1/n) sum(delta^2) - (lambda/n^2) (sum delta)^2,
/// delta = ln(max(pred, eps)) - ln(max(gt, eps)).
pub fn silog_loss(
    pred: &Tensor,
    gt: &Data,
    mask: &Array2<bool>,
    lambda: f64,
    eps_log: f64,
) -> Result<Tensor> {
    let (w, n) = mask_weights(pred, gt, mask)?;
    let log_gt = gt.mapv(|v| v.max(eps_log).ln());
    let delta = pred.ln_floor(eps_log).sub(&Tensor::constant(log_gt)).mask(&w);
    let sq_term = delta.mul(&delta).sum_all().mul_scalar(1.0 / n);
    let sum = delta.sum_all();
    let var_term = sum.mul(&sum).mul_scalar(lambda / (n * n));
    Ok(sq_term.sub(&var_term))
}

fn check_sequence(seq: &[Tensor]) -> Result<usize> {
    if seq.len() < 2 {
        return Err(CoreError::config(
            "prediction sequence needs the initial estimate plus at least one update",
        ));
    }
    Ok(seq.len() - 1)
}

/// First-stage loss: smooth L1 on the initial estimate plus
/// gamma^(N-i)-weighted L1 on each update.
pub fn loss_stage_a(
    seq: &[Tensor],
    gt: &Data,
    mask: &Array2<bool>,
    cfg: &LossConfig,
) -> Result<Tensor> {
    cfg.validate()?;
    let n_updates = check_sequence(seq)?;
    let mut total = smooth_l1_loss(&seq[0], gt, mask)?;
    for (i, pred) in seq.iter().enumerate().skip(1) {
        let w = cfg.gamma.powi((n_updates - i) as i32);
        total = total.add(&l1_loss(pred, gt, mask)?.mul_scalar(w));
    }
    Ok(total)
}

/// Second-stage loss: the same weighting with the scale-invariant log loss
/// as every term.
pub fn loss_stage_b(
    seq: &[Tensor],
    gt: &Data,
    mask: &Array2<bool>,
    cfg: &LossConfig,
) -> Result<Tensor> {
    cfg.validate()?;
    let n_updates = check_sequence(seq)?;
    let mut total = silog_loss(&seq[0], gt, mask, cfg.lambda_silog, cfg.eps_log)?;
    for (i, pred) in seq.iter().enumerate().skip(1) {
        let w = cfg.gamma.powi((n_updates - i) as i32);
        let term = silog_loss(pred, gt, mask, cfg.lambda_silog, cfg.eps_log)?;
        total = total.add(&term.mul_scalar(w));
    }
    Ok(total)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::check::grad_check;
    use ndarray::{ArrayD, IxDyn};
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn rand_map(shape: (usize, usize), seed: u64, lo: f64, hi: f64) -> Data {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        ArrayD::from_shape_fn(IxDyn(&[shape.0, shape.1]), |_| rng.random_range(lo..hi))
    }

    fn rand_mask(shape: (usize, usize), seed: u64, keep: f64) -> Array2<bool> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut m = Array2::from_shape_fn(shape, |_| rng.random_bool(keep));
        m[[0, 0]] = true; // never empty
        m
    }

    fn full_mask(shape: (usize, usize)) -> Array2<bool> {
        Array2::from_elem(shape, true)
    }

    #[test]
    fn l1_known_values() {
        let gt = ArrayD::zeros(IxDyn(&[1, 2]));
        let mut pred = ArrayD::zeros(IxDyn(&[1, 2]));
        pred[[0, 0]] = 1.0;
        pred[[0, 1]] = -3.0;
        let loss = l1_loss(&Tensor::constant(pred), &gt, &full_mask((1, 2))).unwrap();
        assert_eq!(loss.item(), 2.0);
        let zero = l1_loss(&Tensor::constant(gt.clone()), &gt, &full_mask((1, 2))).unwrap();
        assert_eq!(zero.item(), 0.0);
    }

    #[test]
    fn smooth_l1_branches_and_continuity() {
        let gt = ArrayD::zeros(IxDyn(&[1, 1]));
        let m = full_mask((1, 1));
        for (e, want) in [(0.5, 0.125), (2.0, 1.5), (1.0, 0.5), (-1.0, 0.5)] {
            let pred = ArrayD::from_elem(IxDyn(&[1, 1]), e);
            let loss = smooth_l1_loss(&Tensor::constant(pred), &gt, &m).unwrap();
            assert!((loss.item() - want).abs() < 1e-15, "e={e}");
        }
    }

    #[test]
    fn losses_match_loop_oracles() {
        let shape = (9, 7);
        let pred = rand_map(shape, 1, 0.1, 30.0);
        let gt = rand_map(shape, 2, 0.1, 30.0);
        let mask = rand_mask(shape, 3, 0.7);
        let (lambda, eps) = (0.15, 1e-6);

        let (mut s_abs, mut s_sl1, mut s_d2, mut s_d, mut n) = (0.0, 0.0, 0.0, 0.0, 0usize);
        for ((r, c), &valid) in mask.indexed_iter() {
            if !valid {
                continue;
            }
            let e: f64 = pred[[r, c]] - gt[[r, c]];
            s_abs += e.abs();
            s_sl1 += if e.abs() < 1.0 { e * e / 2.0 } else { e.abs() - 0.5 };
            let d = pred[[r, c]].max(eps).ln() - gt[[r, c]].max(eps).ln();
            s_d2 += d * d;
            s_d += d;
            n += 1;
        }
        let nf = n as f64;
        let pt = Tensor::constant(pred.clone());
        let got_l1 = l1_loss(&pt, &gt, &mask).unwrap().item();
        let got_sl1 = smooth_l1_loss(&pt, &gt, &mask).unwrap().item();
        let got_si = silog_loss(&pt, &gt, &mask, lambda, eps).unwrap().item();
        assert!((got_l1 - s_abs / nf).abs() < 1e-12);
        assert!((got_sl1 - s_sl1 / nf).abs() < 1e-12);
        assert!((got_si - (s_d2 / nf - lambda * (s_d / nf).powi(2))).abs() < 1e-12);
    }

    #[test]
    fn silog_constant_ratio_and_scale_invariance() {
        let shape = (6, 5);
        let gt = rand_map(shape, 4, 0.5, 20.0);
        let m = full_mask(shape);
        // pred = e * gt makes every delta exactly 1.
        let pred = gt.mapv(|v| v * std::f64::consts::E);
        let loss = silog_loss(&Tensor::constant(pred), &gt, &m, 0.15, 1e-6).unwrap();
        assert!((loss.item() - 0.85).abs() < 1e-12);

        // lambda = 1: multiplying predictions by any c leaves the loss.
        let pred = rand_map(shape, 5, 0.5, 20.0);
        let a = silog_loss(&Tensor::constant(pred.clone()), &gt, &m, 1.0, 1e-6)
            .unwrap()
            .item();
        let scaled = pred.mapv(|v| v * 7.3);
        let b = silog_loss(&Tensor::constant(scaled), &gt, &m, 1.0, 1e-6)
            .unwrap()
            .item();
        assert!((a - b).abs() < 1e-9);
    }

    #[test]
    fn stage_a_weighting() {
        let shape = (4, 4);
        let gt = rand_map(shape, 6, 0.5, 10.0);
        let m = full_mask(shape);
        let cfg = LossConfig::default();
        // All iterates identical: u + v * (gamma^2 + gamma + 1) for N = 3.
        let p = rand_map(shape, 7, 0.5, 10.0);
        let seq: Vec<Tensor> = (0..4).map(|_| Tensor::constant(p.clone())).collect();
        let u = smooth_l1_loss(&seq[0], &gt, &m).unwrap().item();
        let v = l1_loss(&seq[0], &gt, &m).unwrap().item();
        let got = loss_stage_a(&seq, &gt, &m, &cfg).unwrap().item();
        let g = cfg.gamma;
        assert!((got - (u + v * (g * g + g + 1.0))).abs() < 1e-12);

        // Random sequence against the explicit sum.
        let seq: Vec<Tensor> = (0..4)
            .map(|i| Tensor::constant(rand_map(shape, 20 + i, 0.5, 10.0)))
            .collect();
        let mut want = smooth_l1_loss(&seq[0], &gt, &m).unwrap().item();
        for i in 1..=3usize {
            want += g.powi((3 - i) as i32) * l1_loss(&seq[i], &gt, &m).unwrap().item();
        }
        let got = loss_stage_a(&seq, &gt, &m, &cfg).unwrap().item();
        assert!((got - want).abs() < 1e-12);
    }

    #[test]
    fn stage_b_weighting() {
        let shape = (4, 4);
        let gt = rand_map(shape, 8, 0.5, 10.0);
        let m = full_mask(shape);
        let cfg = LossConfig::default();
        // Perfect sequence is exactly zero.
        let seq: Vec<Tensor> = (0..3).map(|_| Tensor::constant(gt.clone())).collect();
        assert_eq!(loss_stage_b(&seq, &gt, &m, &cfg).unwrap().item(), 0.0);

        // Every iterate e * gt with N = 2: 0.85 * (2 + gamma).
        let p = gt.mapv(|v| v * std::f64::consts::E);
        let seq: Vec<Tensor> = (0..3).map(|_| Tensor::constant(p.clone())).collect();
        let got = loss_stage_b(&seq, &gt, &m, &cfg).unwrap().item();
        assert!((got - 0.85 * (2.0 + cfg.gamma)).abs() < 1e-12);

        // Random sequence against the explicit sum.
        let seq: Vec<Tensor> = (0..3)
            .map(|i| Tensor::constant(rand_map(shape, 30 + i, 0.5, 10.0)))
            .collect();
        let mut want = silog_loss(&seq[0], &gt, &m, cfg.lambda_silog, cfg.eps_log)
            .unwrap()
            .item();
        for i in 1..=2usize {
            want += cfg.gamma.powi((2 - i) as i32)
                * silog_loss(&seq[i], &gt, &m, cfg.lambda_silog, cfg.eps_log)
                    .unwrap()
                    .item();
        }
        let got = loss_stage_b(&seq, &gt, &m, &cfg).unwrap().item();
        assert!((got - want).abs() < 1e-12);
    }

    #[test]
    fn invalid_pixels_cannot_influence_any_loss() {
        let shape = (5, 5);
        let gt = rand_map(shape, 9, 0.5, 10.0);
        let mut mask = full_mask(shape);
        mask[[2, 3]] = false;
        let base = rand_map(shape, 10, 0.5, 10.0);
        let mut tampered = base.clone();
        tampered[[2, 3]] = 9999.0;
        for (a, b) in [
            (
                l1_loss(&Tensor::constant(base.clone()), &gt, &mask).unwrap(),
                l1_loss(&Tensor::constant(tampered.clone()), &gt, &mask).unwrap(),
            ),
            (
                smooth_l1_loss(&Tensor::constant(base.clone()), &gt, &mask).unwrap(),
                smooth_l1_loss(&Tensor::constant(tampered.clone()), &gt, &mask).unwrap(),
            ),
            (
                silog_loss(&Tensor::constant(base.clone()), &gt, &mask, 0.15, 1e-6).unwrap(),
                silog_loss(&Tensor::constant(tampered.clone()), &gt, &mask, 0.15, 1e-6).unwrap(),
            ),
        ] {
            assert_eq!(a.item().to_bits(), b.item().to_bits());
        }
    }

    #[test]
    fn empty_mask_is_an_error() {
        let gt = ArrayD::zeros(IxDyn(&[2, 2]));
        let mask = Array2::from_elem((2, 2), false);
        assert!(l1_loss(&Tensor::constant(gt.clone()), &gt, &mask).is_err());
    }

    #[test]
    fn pixel_permutation_invariance() {
        let shape = (4, 6);
        let pred = rand_map(shape, 11, 0.5, 10.0);
        let gt = rand_map(shape, 12, 0.5, 10.0);
        let mask = rand_mask(shape, 13, 0.8);
        // Reverse both spatial axes: a fixed permutation of pixels.
        let flip = |d: &Data| -> Data {
            let mut out = d.clone();
            for ((r, c), v) in d
                .view()
                .into_dimensionality::<ndarray::Ix2>()
                .unwrap()
                .indexed_iter()
            {
                out[[shape.0 - 1 - r, shape.1 - 1 - c]] = *v;
            }
            out
        };
        let mut fmask = Array2::from_elem(shape, false);
        for ((r, c), &v) in mask.indexed_iter() {
            fmask[[shape.0 - 1 - r, shape.1 - 1 - c]] = v;
        }
        let a = silog_loss(&Tensor::constant(pred.clone()), &gt, &mask, 0.15, 1e-6)
            .unwrap()
            .item();
        let b = silog_loss(&Tensor::constant(flip(&pred)), &flip(&gt), &fmask, 0.15, 1e-6)
            .unwrap()
            .item();
        assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn analytic_gradients_match_finite_differences() {
        let shape = (8, 8);
        let gt = rand_map(shape, 14, 0.5, 10.0);
        let mask = rand_mask(shape, 15, 0.8);
        let pred = rand_map(shape, 16, 0.5, 10.0);
        let cfg = LossConfig::default();

        let cases: Vec<(&str, Box<dyn Fn(&[Tensor]) -> Tensor>)> = vec![
            ("l1", {
                let (gt, mask) = (gt.clone(), mask.clone());
                Box::new(move |xs: &[Tensor]| l1_loss(&xs[0], &gt, &mask).unwrap())
            }),
            ("smooth_l1", {
                let (gt, mask) = (gt.clone(), mask.clone());
                Box::new(move |xs: &[Tensor]| smooth_l1_loss(&xs[0], &gt, &mask).unwrap())
            }),
            ("silog", {
                let (gt, mask) = (gt.clone(), mask.clone());
                Box::new(move |xs: &[Tensor]| silog_loss(&xs[0], &gt, &mask, 0.15, 1e-6).unwrap())
            }),
            ("stage_a", {
                let (gt, mask, cfg) = (gt.clone(), mask.clone(), cfg);
                Box::new(move |xs: &[Tensor]| {
                    loss_stage_a(&[xs[0].clone(), xs[1].clone(), xs[2].clone()], &gt, &mask, &cfg)
                        .unwrap()
                })
            }),
            ("stage_b", {
                let (gt, mask, cfg) = (gt.clone(), mask.clone(), cfg);
                Box::new(move |xs: &[Tensor]| {
                    loss_stage_b(&[xs[0].clone(), xs[1].clone(), xs[2].clone()], &gt, &mask, &cfg)
                        .unwrap()
                })
            }),
        ];
        for (name, f) in cases {
            let inputs: Vec<Data> = if name.starts_with("stage") {
                (0..3).map(|i| rand_map(shape, 40 + i, 0.5, 10.0)).collect()
            } else {
                vec![pred.clone()]
            };
            let err = grad_check(f.as_ref(), &inputs, 1e-6);
            assert!(err < 1e-5, "{name} grad err {err}");
        }
    }
}
