//! Sampling kernels: bilinear resize, the vertical correlation volume and
//! its pyramid lookup, neighborhood unfolding, pixel shuffle, and padding.
//!
//! Coordinates fed to the lookup are plain arrays, never tape tensors: the
//! update loop detaches the running disparity before each lookup, so no
//! gradient with respect to sample positions is needed.

use ndarray::{Array2, ArrayD, Ix3, IxDyn};
use std::rc::Rc;

use super::{record_raw, unary, Data, Tensor};

/// Per-axis resampling table: output index -> (lo, hi, weight of hi).
/// Half-pixel-center convention with edge clamping.
fn resize_table(n_in: usize, n_out: usize) -> Vec<(usize, usize, f64)> {
    assert!(n_in >= 1 && n_out >= 1);
    let scale = n_in as f64 / n_out as f64;
    (0..n_out)
        .map(|o| {
            let p = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, (n_in - 1) as f64);
            let lo = p.floor() as usize;
            let hi = (lo + 1).min(n_in - 1);
            (lo, hi, p - lo as f64)
        })
        .collect()
}

/// Bilinear resize of (C, H, W) to (C, out_h, out_w).
pub fn bilinear_resize(x: &Tensor, out_h: usize, out_w: usize) -> Tensor {
    let (c, h, w) = x
        .data()
        .view()
        .into_dimensionality::<Ix3>()
        .expect("bilinear_resize input must be (C, H, W)")
        .dim();
    let ty = resize_table(h, out_h);
    let tx = resize_table(w, out_w);
    let xv = x.data().view().into_dimensionality::<Ix3>().unwrap();
    let mut out = ArrayD::zeros(IxDyn(&[c, out_h, out_w]));
    for ch in 0..c {
        for (oy, &(y0, y1, wy)) in ty.iter().enumerate() {
            for (ox, &(x0, x1, wx)) in tx.iter().enumerate() {
                let top = xv[[ch, y0, x0]] * (1.0 - wx) + xv[[ch, y0, x1]] * wx;
                let bot = xv[[ch, y1, x0]] * (1.0 - wx) + xv[[ch, y1, x1]] * wx;
                out[[ch, oy, ox]] = top * (1.0 - wy) + bot * wy;
            }
        }
    }
    unary(x, out, move |g| {
        let mut dx = ArrayD::zeros(IxDyn(&[c, h, w]));
        for ch in 0..c {
            for (oy, &(y0, y1, wy)) in ty.iter().enumerate() {
                for (ox, &(x0, x1, wx)) in tx.iter().enumerate() {
                    let gv = g[[ch, oy, ox]];
                    dx[[ch, y0, x0]] += gv * (1.0 - wy) * (1.0 - wx);
                    dx[[ch, y0, x1]] += gv * (1.0 - wy) * wx;
                    dx[[ch, y1, x0]] += gv * wy * (1.0 - wx);
                    dx[[ch, y1, x1]] += gv * wy * wx;
                }
            }
        }
        dx
    })
}

/// Group-wise vertical correlation volume.
///
/// Both feature maps are (C, H, W); the result is (G, S, H, W) where entry
/// (g, s, y, x) is the mean over the g-th channel group of
/// `bottom[c, y, x] * top[c, y + s, x]`. Shifts that leave the image
/// contribute zero.
pub fn corr_volume(bottom: &Tensor, top: &Tensor, num_shifts: usize, groups: usize) -> Tensor {
    assert!(num_shifts >= 1 && groups >= 1);
    assert_eq!(bottom.shape(), top.shape(), "feature shape mismatch");
    let (c, h, w) = bottom
        .data()
        .view()
        .into_dimensionality::<Ix3>()
        .expect("corr_volume input must be (C, H, W)")
        .dim();
    assert_eq!(c % groups, 0, "channels must split evenly into groups");
    let cpg = c / groups;
    let scale = 1.0 / cpg as f64;

    let fill = |bs: &[f64], ts: &[f64]| -> Data {
        let mut out = ArrayD::zeros(IxDyn(&[groups, num_shifts, h, w]));
        let os = out.as_slice_mut().unwrap();
        for g in 0..groups {
            for cc in 0..cpg {
                let cbase = (g * cpg + cc) * h * w;
                for s in 0..num_shifts {
                    let obase = (g * num_shifts + s) * h * w;
                    for y in 0..h.saturating_sub(s) {
                        let rb = cbase + y * w;
                        let rt = cbase + (y + s) * w;
                        let ro = obase + y * w;
                        for x in 0..w {
                            os[ro + x] += scale * bs[rb + x] * ts[rt + x];
                        }
                    }
                }
            }
        }
        out
    };
    let out = fill(
        bottom.data().as_slice().expect("contiguous features"),
        top.data().as_slice().expect("contiguous features"),
    );

    let tape = Tensor::tape_of(&[bottom, top]);
    if tape.is_none() {
        return Tensor::constant(out);
    }
    let (bd, td) = (Rc::clone(bottom.data_rc()), Rc::clone(top.data_rc()));
    let (bid, tid) = (bottom.id(), top.id());
    record_raw(
        tape,
        out,
        Box::new(move |g, grads| {
            let gs = g.as_slice().expect("contiguous gradient");
            let bs = bd.as_slice().unwrap();
            let ts = td.as_slice().unwrap();
            let mut db = ArrayD::zeros(IxDyn(&[c, h, w]));
            let mut dt = ArrayD::zeros(IxDyn(&[c, h, w]));
            {
                let dbs = db.as_slice_mut().unwrap();
                let dts = dt.as_slice_mut().unwrap();
                for gi in 0..groups {
                    for cc in 0..cpg {
                        let cbase = (gi * cpg + cc) * h * w;
                        for s in 0..num_shifts {
                            let obase = (gi * num_shifts + s) * h * w;
                            for y in 0..h.saturating_sub(s) {
                                let rb = cbase + y * w;
                                let rt = cbase + (y + s) * w;
                                let ro = obase + y * w;
                                for x in 0..w {
                                    let gv = scale * gs[ro + x];
                                    dbs[rb + x] += gv * ts[rt + x];
                                    dts[rt + x] += gv * bs[rb + x];
                                }
                            }
                        }
                    }
                }
            }
            if let Some(id) = bid {
                grads.accumulate(id, db);
            }
            if let Some(id) = tid {
                grads.accumulate(id, dt);
            }
        }),
    )
}

/// Samples a (S, H, W) volume along the shift axis at fractional positions
/// `coords + k` for k in [-radius, radius], linearly interpolated, zero
/// outside [0, S - 1]. Output is (2 * radius + 1, H, W). `coords` is a
/// constant; gradients flow into the volume only.
pub fn lookup_shift(vol: &Tensor, coords: &Array2<f64>, radius: usize) -> Tensor {
    let (s_n, h, w) = vol
        .data()
        .view()
        .into_dimensionality::<Ix3>()
        .expect("lookup_shift volume must be (S, H, W)")
        .dim();
    assert_eq!(coords.dim(), (h, w), "coordinate grid must match volume");
    debug_assert!(coords.iter().all(|v| v.is_finite()));
    let taps = 2 * radius + 1;
    let vv = vol.data().view().into_dimensionality::<Ix3>().unwrap();
    let mut out = ArrayD::zeros(IxDyn(&[taps, h, w]));
    for o in 0..taps {
        let off = o as f64 - radius as f64;
        for y in 0..h {
            for x in 0..w {
                let p = coords[[y, x]] + off;
                let p0 = p.floor() as isize;
                let w1 = p - p0 as f64;
                let mut v = 0.0;
                if (0..s_n as isize).contains(&p0) {
                    v += vv[[p0 as usize, y, x]] * (1.0 - w1);
                }
                if (0..s_n as isize).contains(&(p0 + 1)) {
                    v += vv[[(p0 + 1) as usize, y, x]] * w1;
                }
                out[[o, y, x]] = v;
            }
        }
    }
    let cgrid = coords.clone();
    unary(vol, out, move |g| {
        let mut dv = ArrayD::zeros(IxDyn(&[s_n, h, w]));
        for o in 0..taps {
            let off = o as f64 - radius as f64;
            for y in 0..h {
                for x in 0..w {
                    let gv = g[[o, y, x]];
                    let p = cgrid[[y, x]] + off;
                    let p0 = p.floor() as isize;
                    let w1 = p - p0 as f64;
                    if (0..s_n as isize).contains(&p0) {
                        dv[[p0 as usize, y, x]] += gv * (1.0 - w1);
                    }
                    if (0..s_n as isize).contains(&(p0 + 1)) {
                        dv[[(p0 + 1) as usize, y, x]] += gv * w1;
                    }
                }
            }
        }
        dv
    })
}

/// Unfolds each pixel's 3x3 neighborhood (replicated at borders) into
/// channels: (C, H, W) -> (9 * C, H, W), neighbor index varying fastest.
pub fn unfold3x3_replicate(x: &Tensor) -> Tensor {
    let (c, h, w) = x
        .data()
        .view()
        .into_dimensionality::<Ix3>()
        .expect("unfold3x3 input must be (C, H, W)")
        .dim();
    let xv = x.data().view().into_dimensionality::<Ix3>().unwrap();
    let clamp = |v: isize, n: usize| v.clamp(0, n as isize - 1) as usize;
    let mut out = ArrayD::zeros(IxDyn(&[9 * c, h, w]));
    for ch in 0..c {
        for (k, (dy, dx)) in neighborhood3x3().enumerate() {
            for y in 0..h {
                let sy = clamp(y as isize + dy, h);
                for xc in 0..w {
                    let sx = clamp(xc as isize + dx, w);
                    out[[ch * 9 + k, y, xc]] = xv[[ch, sy, sx]];
                }
            }
        }
    }
    unary(x, out, move |g| {
        let clamp = |v: isize, n: usize| v.clamp(0, n as isize - 1) as usize;
        let mut dx = ArrayD::zeros(IxDyn(&[c, h, w]));
        for ch in 0..c {
            for (k, (dy, dxo)) in neighborhood3x3().enumerate() {
                for y in 0..h {
                    let sy = clamp(y as isize + dy, h);
                    for xc in 0..w {
                        let sx = clamp(xc as isize + dxo, w);
                        dx[[ch, sy, sx]] += g[[ch * 9 + k, y, xc]];
                    }
                }
            }
        }
        dx
    })
}

fn neighborhood3x3() -> impl Iterator<Item = (isize, isize)> {
    (-1..=1).flat_map(|dy| (-1..=1).map(move |dx| (dy, dx)))
}

/// Rearranges (C * r^2, H, W) into (C, r * H, r * W); the sub-pixel offset
/// (dy, dx) of output pixel (r*y + dy, r*x + dx) reads channel
/// `c * r^2 + dy * r + dx`.
pub fn pixel_shuffle(x: &Tensor, r: usize) -> Tensor {
    assert!(r >= 1);
    let (c_in, h, w) = x
        .data()
        .view()
        .into_dimensionality::<Ix3>()
        .expect("pixel_shuffle input must be (C, H, W)")
        .dim();
    assert_eq!(c_in % (r * r), 0, "channels must be divisible by r^2");
    let c = c_in / (r * r);
    let xv = x.data().view().into_dimensionality::<Ix3>().unwrap();
    let mut out = ArrayD::zeros(IxDyn(&[c, r * h, r * w]));
    for ch in 0..c {
        for dy in 0..r {
            for dx in 0..r {
                let src = (ch * r + dy) * r + dx;
                for y in 0..h {
                    for xc in 0..w {
                        out[[ch, y * r + dy, xc * r + dx]] = xv[[src, y, xc]];
                    }
                }
            }
        }
    }
    unary(x, out, move |g| {
        let mut dx_arr = ArrayD::zeros(IxDyn(&[c_in, h, w]));
        for ch in 0..c {
            for dy in 0..r {
                for dx in 0..r {
                    let src = (ch * r + dy) * r + dx;
                    for y in 0..h {
                        for xc in 0..w {
                            dx_arr[[src, y, xc]] = g[[ch, y * r + dy, xc * r + dx]];
                        }
                    }
                }
            }
        }
        dx_arr
    })
}

/// Replicate padding of (C, H, W) on the spatial axes.
pub fn pad2d_replicate(x: &Tensor, top: usize, bottom: usize, left: usize, right: usize) -> Tensor {
    let (c, h, w) = x
        .data()
        .view()
        .into_dimensionality::<Ix3>()
        .expect("pad2d input must be (C, H, W)")
        .dim();
    let (oh, ow) = (h + top + bottom, w + left + right);
    let xv = x.data().view().into_dimensionality::<Ix3>().unwrap();
    let clamp = |v: isize, n: usize| v.clamp(0, n as isize - 1) as usize;
    let mut out = ArrayD::zeros(IxDyn(&[c, oh, ow]));
    for ch in 0..c {
        for oy in 0..oh {
            let sy = clamp(oy as isize - top as isize, h);
            for ox in 0..ow {
                let sx = clamp(ox as isize - left as isize, w);
                out[[ch, oy, ox]] = xv[[ch, sy, sx]];
            }
        }
    }
    unary(x, out, move |g| {
        let clamp = |v: isize, n: usize| v.clamp(0, n as isize - 1) as usize;
        let mut dx = ArrayD::zeros(IxDyn(&[c, h, w]));
        for ch in 0..c {
            for oy in 0..oh {
                let sy = clamp(oy as isize - top as isize, h);
                for ox in 0..ow {
                    let sx = clamp(ox as isize - left as isize, w);
                    dx[[ch, sy, sx]] += g[[ch, oy, ox]];
                }
            }
        }
        dx
    })
}

/// Crops (C, H, W) to an (out_h, out_w) window starting at (top, left).
pub fn crop2d(x: &Tensor, top: usize, left: usize, out_h: usize, out_w: usize) -> Tensor {
    let (c, h, w) = x
        .data()
        .view()
        .into_dimensionality::<Ix3>()
        .expect("crop2d input must be (C, H, W)")
        .dim();
    assert!(top + out_h <= h && left + out_w <= w, "crop outside input");
    let xv = x.data().view().into_dimensionality::<Ix3>().unwrap();
    let out = xv
        .slice(ndarray::s![.., top..top + out_h, left..left + out_w])
        .to_owned()
        .into_dyn();
    unary(x, out, move |g| {
        let mut dx = ArrayD::zeros(IxDyn(&[c, h, w]));
        dx.slice_mut(ndarray::s![.., top..top + out_h, left..left + out_w])
            .assign(g);
        dx
    })
}

#[cfg(test)]
mod tests {
    use super::super::check::grad_check;
    use super::*;
    use ndarray::{arr2, Array2};
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn rand_data(shape: &[usize], seed: u64) -> Data {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        ArrayD::from_shape_fn(IxDyn(shape), |_| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn resize_identity_and_known_upsample() {
        let x = rand_data(&[2, 3, 5], 1);
        let same = bilinear_resize(&Tensor::constant(x.clone()), 3, 5);
        for (a, b) in same.data().iter().zip(x.iter()) {
            assert!((a - b).abs() < 1e-15);
        }
        // Width 2 ramp [0, 1] to width 4 with half-pixel centers and clamping.
        let ramp = ndarray::arr3(&[[[0.0, 1.0]]]).into_dyn();
        let up = bilinear_resize(&Tensor::constant(ramp), 1, 4);
        let want = [0.0, 0.25, 0.75, 1.0];
        for (a, b) in up.data().iter().zip(want.iter()) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn resize_gradients() {
        let x = rand_data(&[2, 4, 5], 2);
        for (oh, ow) in [(8, 10), (2, 3), (4, 5)] {
            let f = move |xs: &[Tensor]| {
                let y = bilinear_resize(&xs[0], oh, ow);
                y.mul(&y).sum_all()
            };
            let err = grad_check(&f, &[x.clone()], 1e-6);
            assert!(err < 1e-7, "resize {oh}x{ow} grad err {err}");
        }
    }

    /// Direct per-entry construction of the correlation volume.
    fn corr_naive(b: &Data, t: &Data, shifts: usize, groups: usize) -> Data {
        let (c, h, w) = (b.shape()[0], b.shape()[1], b.shape()[2]);
        let cpg = c / groups;
        let mut out = ArrayD::zeros(IxDyn(&[groups, shifts, h, w]));
        for g in 0..groups {
            for s in 0..shifts {
                for y in 0..h {
                    for x in 0..w {
                        if y + s >= h {
                            continue;
                        }
                        let mut acc = 0.0;
                        for cc in 0..cpg {
                            let ci = g * cpg + cc;
                            acc += b[[ci, y, x]] * t[[ci, y + s, x]];
                        }
                        out[[g, s, y, x]] = acc / cpg as f64;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn corr_volume_matches_naive_and_zero_fills() {
        let b = rand_data(&[6, 5, 4], 3);
        let t = rand_data(&[6, 5, 4], 4);
        let vol = corr_volume(&Tensor::constant(b.clone()), &Tensor::constant(t.clone()), 4, 3);
        let want = corr_naive(&b, &t, 4, 3);
        assert_eq!(vol.shape(), &[3, 4, 5, 4]);
        for (a, bv) in vol.data().iter().zip(want.iter()) {
            assert!((a - bv).abs() < 1e-12);
        }
        // Shift 3 leaves rows 2.. with no counterpart: exactly zero.
        for y in 3..5 {
            for x in 0..4 {
                assert_eq!(vol.data()[[0, 3, y, x]], 0.0);
            }
        }
    }

    #[test]
    fn corr_volume_gradients() {
        let b = rand_data(&[4, 4, 3], 5);
        let t = rand_data(&[4, 4, 3], 6);
        let f = |xs: &[Tensor]| {
            let v = corr_volume(&xs[0], &xs[1], 3, 2);
            v.mul(&v).sum_all()
        };
        let err = grad_check(&f, &[b, t], 1e-6);
        assert!(err < 1e-5, "corr grad err {err}");
    }

    #[test]
    fn lookup_interpolates_and_zero_pads() {
        // Volume with value = shift index at every pixel, so interpolation
        // at position p must return p while inside [0, 2].
        let mut vol = ArrayD::zeros(IxDyn(&[3, 2, 2]));
        for s in 0..3 {
            vol.slice_mut(ndarray::s![s, .., ..]).fill(s as f64);
        }
        let coords = Array2::from_elem((2, 2), 1.25);
        let out = lookup_shift(&Tensor::constant(vol), &coords, 1);
        // Taps at 0.25, 1.25, 2.25; the last blends 2.0 with the zero pad.
        assert!((out.data()[[0, 0, 0]] - 0.25).abs() < 1e-12);
        assert!((out.data()[[1, 0, 0]] - 1.25).abs() < 1e-12);
        assert!((out.data()[[2, 0, 0]] - 2.0 * 0.75).abs() < 1e-12);
    }

    #[test]
    fn lookup_gradients() {
        let vol = rand_data(&[5, 3, 4], 7);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let coords = Array2::from_shape_fn((3, 4), |_| rng.random_range(-1.0..5.5));
        let f = move |xs: &[Tensor]| {
            let y = lookup_shift(&xs[0], &coords, 2);
            y.mul(&y).sum_all()
        };
        let err = grad_check(&f, &[vol], 1e-6);
        assert!(err < 1e-7, "lookup grad err {err}");
    }

    #[test]
    fn unfold_replicates_borders() {
        let x = arr2(&[[1.0, 2.0], [3.0, 4.0]])
            .into_shape_with_order(IxDyn(&[1, 2, 2]))
            .unwrap();
        let y = unfold3x3_replicate(&Tensor::constant(x));
        assert_eq!(y.shape(), &[9, 2, 2]);
        // Neighbor (-1, -1) of the top-left pixel clamps to itself.
        assert_eq!(y.data()[[0, 0, 0]], 1.0);
        // Neighbor (+1, +1) of the top-left pixel is the center of the 2x2.
        assert_eq!(y.data()[[8, 0, 0]], 4.0);
        // Center tap is the identity.
        assert_eq!(y.data()[[4, 1, 1]], 4.0);
    }

    #[test]
    fn unfold_and_shuffle_gradients() {
        let x = rand_data(&[2, 3, 4], 9);
        let f = |xs: &[Tensor]| {
            let y = unfold3x3_replicate(&xs[0]);
            y.mul(&y).sum_all()
        };
        let err = grad_check(&f, &[x], 1e-6);
        assert!(err < 1e-7, "unfold grad err {err}");

        let x = rand_data(&[8, 2, 3], 10);
        let f = |xs: &[Tensor]| {
            let y = pixel_shuffle(&xs[0], 2);
            y.mul(&y).sum_all()
        };
        let err = grad_check(&f, &[x], 1e-6);
        assert!(err < 1e-7, "pixel_shuffle grad err {err}");
    }

    #[test]
    fn pixel_shuffle_known_layout() {
        // One output channel, r = 2: channels are the four sub-positions.
        let mut x = ArrayD::zeros(IxDyn(&[4, 1, 1]));
        for (i, v) in [10.0, 20.0, 30.0, 40.0].iter().enumerate() {
            x[[i, 0, 0]] = *v;
        }
        let y = pixel_shuffle(&Tensor::constant(x), 2);
        assert_eq!(y.shape(), &[1, 2, 2]);
        assert_eq!(y.data()[[0, 0, 0]], 10.0);
        assert_eq!(y.data()[[0, 0, 1]], 20.0);
        assert_eq!(y.data()[[0, 1, 0]], 30.0);
        assert_eq!(y.data()[[0, 1, 1]], 40.0);
    }

    #[test]
    fn pad_crop_roundtrip_and_gradients() {
        let x = rand_data(&[2, 3, 4], 11);
        let padded = pad2d_replicate(&Tensor::constant(x.clone()), 2, 1, 3, 2);
        assert_eq!(padded.shape(), &[2, 6, 9]);
        let back = crop2d(&padded, 2, 3, 3, 4);
        for (a, b) in back.data().iter().zip(x.iter()) {
            assert_eq!(*a, *b);
        }

        let f = |xs: &[Tensor]| {
            let y = pad2d_replicate(&xs[0], 1, 2, 2, 1);
            let y = crop2d(&y, 0, 0, 4, 5);
            y.mul(&y).sum_all()
        };
        let err = grad_check(&f, &[x], 1e-6);
        assert!(err < 1e-7, "pad/crop grad err {err}");
    }
}
