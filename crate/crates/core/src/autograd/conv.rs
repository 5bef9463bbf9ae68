//! Convolutions (2d and 3d) via im2col + GEMM, plus average pooling.
//!
//! Backward passes recompute the column buffer instead of caching it, which
//! keeps per-node memory at one input clone while costing one extra im2col.

use ndarray::{Array2, Array3, ArrayD, ArrayView3, Axis, Ix3, Ix4, IxDyn};
use std::rc::Rc;

use super::{record_raw, Data, Tensor};

/// `dot` can return a column-major result when an operand has a unit
/// dimension; the reshapes and slice reads below require standard layout.
fn to_standard(a: Array2<f64>) -> Array2<f64> {
    if a.is_standard_layout() {
        a
    } else {
        a.as_standard_layout().into_owned()
    }
}

// ==== CONV2D ====

/// 2d convolution on (C_in, H, W) with weights (C_out, C_in, kh, kw), square
/// zero padding and uniform stride.
pub fn conv2d(x: &Tensor, w: &Tensor, b: Option<&Tensor>, stride: usize, pad: usize) -> Tensor {
    assert!(stride >= 1, "stride must be positive");
    let xs = x
        .data()
        .view()
        .into_dimensionality::<Ix3>()
        .expect("conv2d input must be (C, H, W)");
    let ws = w
        .data()
        .view()
        .into_dimensionality::<Ix4>()
        .expect("conv2d weight must be (Co, Ci, kh, kw)");
    let (ci, h, wid) = xs.dim();
    let (co, ci_w, kh, kw) = ws.dim();
    assert_eq!(ci, ci_w, "conv2d channel mismatch");
    assert!(
        h + 2 * pad >= kh && wid + 2 * pad >= kw,
        "conv2d kernel larger than padded input"
    );
    let ho = (h + 2 * pad - kh) / stride + 1;
    let wo = (wid + 2 * pad - kw) / stride + 1;

    let cols = im2col2d(&xs, kh, kw, stride, pad, ho, wo);
    let w2 = ws
        .into_shape_with_order((co, ci * kh * kw))
        .expect("contiguous weights");
    let mut out2 = to_standard(w2.dot(&cols));
    if let Some(bias) = b {
        let bv = bias.data();
        assert_eq!(bv.len(), co, "bias length must equal out channels");
        for (c, mut row) in out2.outer_iter_mut().enumerate() {
            row += bv[[c]];
        }
    }
    let out = out2
        .into_shape_with_order(IxDyn(&[co, ho, wo]))
        .expect("reshape conv output");

    let tape = Tensor::tape_of(&[x, w].into_iter().chain(b).collect::<Vec<_>>().as_slice());
    if tape.is_none() {
        return Tensor::constant(out);
    }
    let (xd, wd) = (Rc::clone(x.data_rc()), Rc::clone(w.data_rc()));
    let (xid, wid_id, bid) = (x.id(), w.id(), b.and_then(|t| t.id()));
    record_raw(
        tape,
        out,
        Box::new(move |g, grads| {
            let g2 = g
                .view()
                .into_dimensionality::<Ix3>()
                .unwrap()
                .into_shape_with_order((co, ho * wo))
                .unwrap();
            if let Some(id) = bid {
                grads.accumulate(id, g2.sum_axis(Axis(1)).into_dyn());
            }
            let xs = xd.view().into_dimensionality::<Ix3>().unwrap();
            let ws = wd
                .view()
                .into_dimensionality::<Ix4>()
                .unwrap()
                .into_shape_with_order((co, ci * kh * kw))
                .unwrap();
            if let Some(id) = wid_id {
                let cols = im2col2d(&xs, kh, kw, stride, pad, ho, wo);
                let dw = to_standard(g2.dot(&cols.t()));
                grads.accumulate(id, dw.into_shape_with_order(IxDyn(&[co, ci, kh, kw])).unwrap());
            }
            if let Some(id) = xid {
                let dcols = to_standard(ws.t().dot(&g2));
                let dx = col2im2d(&dcols, ci, h, wid, kh, kw, stride, pad, ho, wo);
                grads.accumulate(id, dx.into_dyn());
            }
        }),
    )
}

fn im2col2d(
    x: &ArrayView3<f64>,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
) -> Array2<f64> {
    let (ci, h, w) = x.dim();
    let mut cols = Array2::zeros((ci * kh * kw, ho * wo));
    let cs = cols.as_slice_mut().unwrap();
    for c in 0..ci {
        for dy in 0..kh {
            for dx in 0..kw {
                let row = (c * kh + dy) * kw + dx;
                let base = row * ho * wo;
                for oy in 0..ho {
                    let iy = (oy * stride + dy) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let out_base = base + oy * wo;
                    for ox in 0..wo {
                        let ix = (ox * stride + dx) as isize - pad as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        cs[out_base + ox] = unsafe { *x.uget([c, iy as usize, ix as usize]) };
                    }
                }
            }
        }
    }
    cols
}

fn col2im2d(
    dcols: &Array2<f64>,
    ci: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
) -> Array3<f64> {
    let mut dx = Array3::zeros((ci, h, w));
    let ds = dcols.as_slice().unwrap();
    for c in 0..ci {
        for dy in 0..kh {
            for dxk in 0..kw {
                let row = (c * kh + dy) * kw + dxk;
                let base = row * ho * wo;
                for oy in 0..ho {
                    let iy = (oy * stride + dy) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let out_base = base + oy * wo;
                    for ox in 0..wo {
                        let ix = (ox * stride + dxk) as isize - pad as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        unsafe {
                            *dx.uget_mut([c, iy as usize, ix as usize]) += ds[out_base + ox];
                        }
                    }
                }
            }
        }
    }
    dx
}

// ==== CONV3D ====

/// 3d convolution on (C_in, D, H, W) with weights (C_out, C_in, kd, kh, kw),
/// per-axis zero padding and stride.
pub fn conv3d(
    x: &Tensor,
    w: &Tensor,
    b: Option<&Tensor>,
    stride: [usize; 3],
    pad: [usize; 3],
) -> Tensor {
    assert!(stride.iter().all(|&s| s >= 1), "stride must be positive");
    let xshape: [usize; 4] = x.shape().try_into().expect("conv3d input must be (C, D, H, W)");
    let wshape: [usize; 5] = w
        .shape()
        .try_into()
        .expect("conv3d weight must be (Co, Ci, kd, kh, kw)");
    let [ci, d, h, wid] = xshape;
    let [co, ci_w, kd, kh, kw] = wshape;
    assert_eq!(ci, ci_w, "conv3d channel mismatch");
    let dims_in = [d, h, wid];
    let k = [kd, kh, kw];
    let mut dims_out = [0usize; 3];
    for a in 0..3 {
        assert!(
            dims_in[a] + 2 * pad[a] >= k[a],
            "conv3d kernel larger than padded input on axis {a}"
        );
        dims_out[a] = (dims_in[a] + 2 * pad[a] - k[a]) / stride[a] + 1;
    }
    let [do_, ho, wo] = dims_out;
    let n_out = do_ * ho * wo;
    let kvol = kd * kh * kw;

    let cols = im2col3d(x.data(), ci, dims_in, k, stride, pad, dims_out);
    let w2 = w
        .data()
        .view()
        .into_shape_with_order((co, ci * kvol))
        .expect("contiguous weights");
    let mut out2 = to_standard(w2.dot(&cols));
    if let Some(bias) = b {
        let bv = bias.data();
        assert_eq!(bv.len(), co, "bias length must equal out channels");
        for (c, mut row) in out2.outer_iter_mut().enumerate() {
            row += bv[[c]];
        }
    }
    let out = out2
        .into_shape_with_order(IxDyn(&[co, do_, ho, wo]))
        .expect("reshape conv3d output");

    let tape = Tensor::tape_of(&[x, w].into_iter().chain(b).collect::<Vec<_>>().as_slice());
    if tape.is_none() {
        return Tensor::constant(out);
    }
    let (xd, wd) = (Rc::clone(x.data_rc()), Rc::clone(w.data_rc()));
    let (xid, wid_id, bid) = (x.id(), w.id(), b.and_then(|t| t.id()));
    record_raw(
        tape,
        out,
        Box::new(move |g, grads| {
            let g2 = g.view().into_shape_with_order((co, n_out)).unwrap();
            if let Some(id) = bid {
                grads.accumulate(id, g2.sum_axis(Axis(1)).into_dyn());
            }
            let ws = wd.view().into_shape_with_order((co, ci * kvol)).unwrap();
            if let Some(id) = wid_id {
                let cols = im2col3d(&xd, ci, dims_in, k, stride, pad, dims_out);
                let dw = to_standard(g2.dot(&cols.t()));
                grads.accumulate(
                    id,
                    dw.into_shape_with_order(IxDyn(&[co, ci, kd, kh, kw])).unwrap(),
                );
            }
            if let Some(id) = xid {
                let dcols = to_standard(ws.t().dot(&g2));
                let dx = col2im3d(&dcols, ci, dims_in, k, stride, pad, dims_out);
                grads.accumulate(id, dx);
            }
        }),
    )
}

fn im2col3d(
    x: &Data,
    ci: usize,
    dims: [usize; 3],
    k: [usize; 3],
    stride: [usize; 3],
    pad: [usize; 3],
    out: [usize; 3],
) -> Array2<f64> {
    let [d, h, w] = dims;
    let [kd, kh, kw] = k;
    let [do_, ho, wo] = out;
    let n_out = do_ * ho * wo;
    let xs = x.as_slice().expect("contiguous conv3d input");
    let mut cols = Array2::zeros((ci * kd * kh * kw, n_out));
    let cs = cols.as_slice_mut().unwrap();
    for c in 0..ci {
        let cbase = c * d * h * w;
        for dz in 0..kd {
            for dy in 0..kh {
                for dx in 0..kw {
                    let row = ((c * kd + dz) * kh + dy) * kw + dx;
                    let rbase = row * n_out;
                    for oz in 0..do_ {
                        let iz = (oz * stride[0] + dz) as isize - pad[0] as isize;
                        if iz < 0 || iz >= d as isize {
                            continue;
                        }
                        for oy in 0..ho {
                            let iy = (oy * stride[1] + dy) as isize - pad[1] as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            let obase = rbase + (oz * ho + oy) * wo;
                            let ibase = cbase + (iz as usize * h + iy as usize) * w;
                            for ox in 0..wo {
                                let ix = (ox * stride[2] + dx) as isize - pad[2] as isize;
                                if ix < 0 || ix >= w as isize {
                                    continue;
                                }
                                cs[obase + ox] = xs[ibase + ix as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    cols
}

fn col2im3d(
    dcols: &Array2<f64>,
    ci: usize,
    dims: [usize; 3],
    k: [usize; 3],
    stride: [usize; 3],
    pad: [usize; 3],
    out: [usize; 3],
) -> Data {
    let [d, h, w] = dims;
    let [kd, kh, kw] = k;
    let [do_, ho, wo] = out;
    let n_out = do_ * ho * wo;
    let mut dx = ArrayD::zeros(IxDyn(&[ci, d, h, w]));
    let dxs = dx.as_slice_mut().unwrap();
    let ds = dcols.as_slice().unwrap();
    for c in 0..ci {
        let cbase = c * d * h * w;
        for dz in 0..kd {
            for dy in 0..kh {
                for dxk in 0..kw {
                    let row = ((c * kd + dz) * kh + dy) * kw + dxk;
                    let rbase = row * n_out;
                    for oz in 0..do_ {
                        let iz = (oz * stride[0] + dz) as isize - pad[0] as isize;
                        if iz < 0 || iz >= d as isize {
                            continue;
                        }
                        for oy in 0..ho {
                            let iy = (oy * stride[1] + dy) as isize - pad[1] as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            let obase = rbase + (oz * ho + oy) * wo;
                            let ibase = cbase + (iz as usize * h + iy as usize) * w;
                            for ox in 0..wo {
                                let ix = (ox * stride[2] + dxk) as isize - pad[2] as isize;
                                if ix < 0 || ix >= w as isize {
                                    continue;
                                }
                                dxs[ibase + ix as usize] += ds[obase + ox];
                            }
                        }
                    }
                }
            }
        }
    }
    dx
}

// ==== POOLING ====

/// Non-overlapping-friendly average pooling on (C, H, W); no padding.
pub fn avg_pool2d(x: &Tensor, k: usize, stride: usize) -> Tensor {
    assert!(k >= 1 && stride >= 1);
    let (c, h, w) = x
        .data()
        .view()
        .into_dimensionality::<Ix3>()
        .expect("avg_pool2d input must be (C, H, W)")
        .dim();
    assert!(h >= k && w >= k, "pool window larger than input");
    let ho = (h - k) / stride + 1;
    let wo = (w - k) / stride + 1;
    let inv = 1.0 / (k * k) as f64;
    let xv = x.data().view().into_dimensionality::<Ix3>().unwrap();
    let mut out = ArrayD::zeros(IxDyn(&[c, ho, wo]));
    for ch in 0..c {
        for oy in 0..ho {
            for ox in 0..wo {
                let mut acc = 0.0;
                for dy in 0..k {
                    for dx in 0..k {
                        acc += xv[[ch, oy * stride + dy, ox * stride + dx]];
                    }
                }
                out[[ch, oy, ox]] = acc * inv;
            }
        }
    }
    let shape = [c, h, w];
    super::unary(x, out, move |g| {
        let gv = g.view().into_dimensionality::<Ix3>().unwrap();
        let mut dx = ArrayD::zeros(IxDyn(&shape));
        for ch in 0..c {
            for oy in 0..ho {
                for ox in 0..wo {
                    let v = gv[[ch, oy, ox]] * inv;
                    for dy in 0..k {
                        for dx2 in 0..k {
                            dx[[ch, oy * stride + dy, ox * stride + dx2]] += v;
                        }
                    }
                }
            }
        }
        dx
    })
}

/// Average pooling along the leading (shift) axis of (D, H, W) with window
/// and stride 2: one pyramid level of halved shift resolution. An odd final
/// shift is dropped.
pub fn avg_pool_shifts(x: &Tensor) -> Tensor {
    let (d, h, w) = x
        .data()
        .view()
        .into_dimensionality::<Ix3>()
        .expect("avg_pool_shifts input must be (D, H, W)")
        .dim();
    assert!(d >= 2, "need at least two shifts to pool");
    let do_ = d / 2;
    let xv = x.data().view().into_dimensionality::<Ix3>().unwrap();
    let mut out = ArrayD::zeros(IxDyn(&[do_, h, w]));
    for s in 0..do_ {
        for y in 0..h {
            for xcol in 0..w {
                out[[s, y, xcol]] = 0.5 * (xv[[2 * s, y, xcol]] + xv[[2 * s + 1, y, xcol]]);
            }
        }
    }
    let shape = [d, h, w];
    super::unary(x, out, move |g| {
        let gv = g.view().into_dimensionality::<Ix3>().unwrap();
        let mut dx = ArrayD::zeros(IxDyn(&shape));
        for s in 0..do_ {
            for y in 0..h {
                for xcol in 0..w {
                    let v = 0.5 * gv[[s, y, xcol]];
                    dx[[2 * s, y, xcol]] += v;
                    dx[[2 * s + 1, y, xcol]] += v;
                }
            }
        }
        dx
    })
}

#[cfg(test)]
mod tests {
    use super::super::check::grad_check;
    use super::*;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn rand_data(shape: &[usize], seed: u64) -> Data {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        ArrayD::from_shape_fn(IxDyn(shape), |_| rng.random_range(-1.0..1.0))
    }

    /// Direct nested-loop convolution used as the oracle.
    fn conv2d_naive(x: &Data, w: &Data, b: &Data, stride: usize, pad: usize) -> Data {
        let (ci, h, wid) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        let (co, kh, kw) = (w.shape()[0], w.shape()[2], w.shape()[3]);
        let ho = (h + 2 * pad - kh) / stride + 1;
        let wo = (wid + 2 * pad - kw) / stride + 1;
        let mut out = ArrayD::zeros(IxDyn(&[co, ho, wo]));
        for o in 0..co {
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut acc = b[[o]];
                    for c in 0..ci {
                        for dy in 0..kh {
                            for dx in 0..kw {
                                let iy = (oy * stride + dy) as isize - pad as isize;
                                let ix = (ox * stride + dx) as isize - pad as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= wid as isize {
                                    continue;
                                }
                                acc += x[[c, iy as usize, ix as usize]]
                                    * w[[o, c, dy, dx]];
                            }
                        }
                    }
                    out[[o, oy, ox]] = acc;
                }
            }
        }
        out
    }

    #[test]
    fn conv2d_matches_naive_reference() {
        for (stride, pad) in [(1usize, 1usize), (2, 1), (1, 0), (2, 0)] {
            let x = rand_data(&[3, 7, 9], 10 + stride as u64);
            let w = rand_data(&[4, 3, 3, 3], 20 + pad as u64);
            let b = rand_data(&[4], 30);
            let got = conv2d(
                &Tensor::constant(x.clone()),
                &Tensor::constant(w.clone()),
                Some(&Tensor::constant(b.clone())),
                stride,
                pad,
            );
            let want = conv2d_naive(&x, &w, &b, stride, pad);
            assert_eq!(got.shape(), want.shape());
            for (a, b) in got.data().iter().zip(want.iter()) {
                assert!((a - b).abs() < 1e-12, "stride {stride} pad {pad}");
            }
        }
    }

    #[test]
    fn conv2d_gradients() {
        let x = rand_data(&[2, 5, 6], 1);
        let w = rand_data(&[3, 2, 3, 3], 2);
        let b = rand_data(&[3], 3);
        let f = |xs: &[Tensor]| {
            let y = conv2d(&xs[0], &xs[1], Some(&xs[2]), 2, 1);
            y.mul(&y).sum_all()
        };
        let err = grad_check(&f, &[x, w, b], 1e-6);
        assert!(err < 1e-7, "conv2d grad err {err}");
    }

    #[test]
    fn conv3d_gradients_and_shape() {
        let x = rand_data(&[2, 4, 5, 6], 4);
        let w = rand_data(&[3, 2, 3, 3, 3], 5);
        let b = rand_data(&[3], 6);
        let y = conv3d(
            &Tensor::constant(x.clone()),
            &Tensor::constant(w.clone()),
            Some(&Tensor::constant(b.clone())),
            [2, 2, 2],
            [1, 1, 1],
        );
        assert_eq!(y.shape(), &[3, 2, 3, 3]);
        let f = |xs: &[Tensor]| {
            let y = conv3d(&xs[0], &xs[1], Some(&xs[2]), [1, 2, 2], [1, 1, 1]);
            y.mul(&y).sum_all()
        };
        let err = grad_check(&f, &[x, w, b], 1e-6);
        assert!(err < 1e-5, "conv3d grad err {err}");
    }

    #[test]
    fn conv3d_matches_separable_2d_case() {
        // A 1-deep 3d conv with k_d = 1 must agree with conv2d.
        let x = rand_data(&[2, 1, 6, 7], 7);
        let w = rand_data(&[3, 2, 1, 3, 3], 8);
        let x2 = x
            .clone()
            .into_shape_with_order(IxDyn(&[2, 6, 7]))
            .unwrap();
        let w2 = w
            .clone()
            .into_shape_with_order(IxDyn(&[3, 2, 3, 3]))
            .unwrap();
        let y3 = conv3d(
            &Tensor::constant(x),
            &Tensor::constant(w),
            None,
            [1, 1, 1],
            [0, 1, 1],
        );
        let y2 = conv2d(&Tensor::constant(x2), &Tensor::constant(w2), None, 1, 1);
        for (a, b) in y3.data().iter().zip(y2.data().iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn pooling_gradients() {
        let x = rand_data(&[3, 6, 8], 9);
        let f = |xs: &[Tensor]| {
            let y = avg_pool2d(&xs[0], 2, 2);
            y.mul(&y).sum_all()
        };
        let err = grad_check(&f, &[x], 1e-6);
        assert!(err < 1e-5, "avg_pool2d grad err {err}");

        let x = rand_data(&[6, 3, 4], 10);
        let f = |xs: &[Tensor]| {
            let y = avg_pool_shifts(&xs[0]);
            y.mul(&y).sum_all()
        };
        let err = grad_check(&f, &[x], 1e-6);
        assert!(err < 1e-7, "avg_pool_shifts grad err {err}");
    }

    #[test]
    fn avg_pool_shifts_halves_axis() {
        let x = rand_data(&[7, 2, 2], 11);
        let y = avg_pool_shifts(&Tensor::constant(x.clone()));
        assert_eq!(y.shape(), &[3, 2, 2]);
        assert!((y.data()[[0, 0, 0]] - 0.5 * (x[[0, 0, 0]] + x[[1, 0, 0]])).abs() < 1e-15);
    }
}
