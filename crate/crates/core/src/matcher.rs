//! Iterative stereo matching head. Matching features from both images form
//! group-wise vertical correlation volumes at 1/4 scale; a gated 3d
//! hourglass regularizes the grouped volume into an initial disparity via
//! soft-argmax; multilevel convolutional GRUs then refine the estimate with
//! correlation lookups around the current disparity, and a learned convex
//! combination upsamples each iterate to full resolution.
//!
//! Disparity is carried in degrees everywhere outside volume indexing: a
//! vertical angle is resolution-independent, so upsampling applies no
//! magnitude rescale and clamp bounds mean the same thing at every scale.

use ndarray::{Array2, Axis, Ix3};
use serde::{Deserialize, Serialize};

use crate::autograd::{
    avg_pool_shifts, bilinear_resize, corr_volume, crop2d, lookup_shift, pixel_shuffle,
    unfold3x3_replicate, Tensor,
};
use crate::backbone::{AdapterConfig, MatcherFeatures};
use crate::error::{CoreError, Result};
use crate::geometry::CameraRig;
use crate::nn::{Conv2d, Conv3d, ConvGru, Init, ParamGroup, ParamStore};

/// Negative slope shared by every activation in the matching head.
const LEAK: f64 = 0.1;
/// Upsampling factor from the matching grid to full resolution.
const UP: usize = 4;
/// Channels of the fused motion features (current-disparity channel extra).
const MOTION_CHANNELS: usize = 16;
/// Width of the context encoder stem at 1/2 scale.
const CTX_STEM: usize = 16;

// ==== CONFIG ====

/// Matching-head hyperparameters. Search extent is given in full-resolution
/// pixels and quantized to the 1/4-scale grid; the clamp applies to every
/// emitted disparity, in degrees.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MatcherConfig {
    /// Vertical search extent in full-resolution pixels; the volume covers
    /// [0, max_disp_px) in steps of four pixels.
    pub max_disp_px: usize,
    /// Channel groups of the correlation volume.
    pub corr_groups: usize,
    /// Half-window of the shift-axis correlation lookup.
    pub lookup_radius: usize,
    /// Lookup pyramid depth, full shift resolution included.
    pub pyramid_levels: usize,
    /// Hidden width of each recurrent level.
    pub hidden_channels: usize,
    pub iters_train: usize,
    pub iters_eval: usize,
    /// Disparity clamp applied to the initial estimate and after every
    /// update, in degrees.
    pub disp_min_deg: f64,
    pub disp_max_deg: f64,
    /// Circular padding applied around inference, in full-resolution columns.
    pub pad_cols_eval: usize,
}

impl MatcherConfig {
    /// Defaults for a rig: 8 correlation groups, 3 pyramid levels, radius-3
    /// lookups, 24-wide GRUs, 8 train / 16 eval iterations, clamp covering
    /// the full search range. Callers narrow the clamp to dataset bounds.
    pub fn for_rig(rig: &CameraRig, max_disp_px: usize) -> Result<MatcherConfig> {
        let cfg = MatcherConfig {
            max_disp_px,
            corr_groups: 8,
            lookup_radius: 3,
            pyramid_levels: 3,
            hidden_channels: 24,
            iters_train: 8,
            iters_eval: 16,
            disp_min_deg: 0.0,
            disp_max_deg: rig.disparity_px_to_deg(max_disp_px as f64),
            pad_cols_eval: 64,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.max_disp_px == 0 || self.max_disp_px % UP != 0 {
            return Err(CoreError::config(format!(
                "max_disp_px must be a positive multiple of {UP}, got {}",
                self.max_disp_px
            )));
        }
        let d = self.num_shifts();
        if self.pyramid_levels == 0 || d % (1 << (self.pyramid_levels - 1)) != 0 {
            return Err(CoreError::config(format!(
                "{} shifts cannot form {} pyramid levels of exact halvings",
                d, self.pyramid_levels
            )));
        }
        if self.corr_groups == 0 {
            return Err(CoreError::config("corr_groups must be positive"));
        }
        if self.lookup_radius == 0 || self.hidden_channels < 4 {
            return Err(CoreError::config(
                "lookup_radius must be positive and hidden_channels at least 4",
            ));
        }
        if self.iters_train == 0 || self.iters_eval == 0 {
            return Err(CoreError::config("iteration counts must be positive"));
        }
        if !(self.disp_min_deg.is_finite()
            && self.disp_max_deg.is_finite()
            && self.disp_min_deg < self.disp_max_deg)
        {
            return Err(CoreError::config(format!(
                "clamp range [{}, {}] is not an ordered finite interval",
                self.disp_min_deg, self.disp_max_deg
            )));
        }
        Ok(())
    }

    /// Shift count of the correlation volume on the 1/4-scale grid.
    pub fn num_shifts(&self) -> usize {
        self.max_disp_px / UP
    }

    /// Channels a correlation lookup produces.
    pub fn lookup_channels(&self) -> usize {
        (2 * self.lookup_radius + 1) * self.pyramid_levels
    }
}

// ==== OUTPUT TYPES ====

/// Group-averaged correlations at successively halved shift resolution;
/// level 0 holds all `num_shifts` shifts.
pub struct CorrelationPyramid {
    pub levels: Vec<Tensor>,
}

/// Predicted disparities in degrees at full resolution: the initial
/// soft-argmax regression, then one entry per refinement iteration. Every
/// map lies within the configured clamp bounds.
pub struct DisparitySequence {
    pub steps: Vec<Tensor>,
}

impl DisparitySequence {
    /// The last, most-refined prediction.
    pub fn final_map(&self) -> &Tensor {
        self.steps.last().expect("sequence is never empty")
    }
}

// ==== HEAD ====

/// All learnable parts of the matching head; registered under the matcher
/// parameter group.
pub struct Matcher {
    cfg: MatcherConfig,
    // Volume aggregation: stem + three gated strided stages down, three
    // fused stages up, single-channel output.
    agg_stem: Conv3d,
    agg_down: Vec<Conv3d>,
    agg_gates: Vec<Conv2d>,
    agg_up: Vec<Conv3d>,
    agg_out: Conv3d,
    // Context encoder over the bottom image plus per-level heads for the
    // initial hidden state and the static context input.
    ctx_stem: Conv2d,
    ctx_downs: Vec<Conv2d>,
    ctx_hidden: Vec<Conv2d>,
    ctx_input: Vec<Conv2d>,
    // Motion encoder over correlation lookups and the current disparity.
    m_corr: Conv2d,
    m_disp: Conv2d,
    m_fuse: Conv2d,
    // Recurrent levels, coarsest first in update order.
    gru_fine: ConvGru,
    gru_mid: ConvGru,
    gru_coarse: ConvGru,
    // Additive update head; the final layer starts at zero so the first
    // update is the identity.
    delta_a: Conv2d,
    delta_b: Conv2d,
    // Guided convex upsampling mask from hidden state and depth encoding.
    up_a: Conv2d,
    up_b: Conv2d,
}

impl Matcher {
    pub fn new(ps: &mut ParamStore, cfg: MatcherConfig, adapter: &AdapterConfig) -> Result<Matcher> {
        cfg.validate()?;
        let match_ch = adapter.level_channels[0] + adapter.depth_channels;
        if match_ch % cfg.corr_groups != 0 {
            return Err(CoreError::config(format!(
                "{} matching channels do not split into {} correlation groups",
                match_ch, cfg.corr_groups
            )));
        }
        let grp = ParamGroup::Matcher;
        let g = cfg.corr_groups;
        let hc = cfg.hidden_channels;

        let agg_widths = [g, 16, 24, 32];
        let agg_stem = Conv3d::new(ps, "matcher.agg.stem", g, g, [3; 3], [1; 3], [1; 3], grp);
        let mut agg_down = Vec::new();
        let mut agg_gates = Vec::new();
        for i in 0..3 {
            agg_down.push(Conv3d::new(
                ps,
                &format!("matcher.agg.down{i}"),
                agg_widths[i],
                agg_widths[i + 1],
                [3; 3],
                [1, 2, 2],
                [1; 3],
                grp,
            ));
            agg_gates.push(Conv2d::new(
                ps,
                &format!("matcher.agg.gate{i}"),
                adapter.level_channels[i + 1],
                agg_widths[i + 1],
                1,
                1,
                0,
                grp,
            ));
        }
        let mut agg_up = Vec::new();
        for (i, (coarse, fine, out)) in [(32, 24, 24), (24, 16, 16), (16, g, 16)]
            .into_iter()
            .enumerate()
        {
            agg_up.push(Conv3d::new(
                ps,
                &format!("matcher.agg.up{i}"),
                coarse + fine,
                out,
                [1, 3, 3],
                [1; 3],
                [0, 1, 1],
                grp,
            ));
        }
        let agg_out = Conv3d::new(ps, "matcher.agg.out", 16, 1, [1, 3, 3], [1; 3], [0, 1, 1], grp);

        let ctx_stem = Conv2d::new(ps, "matcher.ctx.stem", 3, CTX_STEM, 3, 2, 1, grp);
        let ctx_widths = [CTX_STEM, hc, hc, hc];
        let mut ctx_downs = Vec::new();
        let mut ctx_hidden = Vec::new();
        let mut ctx_input = Vec::new();
        for l in 0..3 {
            ctx_downs.push(Conv2d::new(
                ps,
                &format!("matcher.ctx.down{l}"),
                ctx_widths[l],
                ctx_widths[l + 1],
                3,
                2,
                1,
                grp,
            ));
            ctx_hidden.push(Conv2d::new(
                ps,
                &format!("matcher.ctx.hidden{l}"),
                hc,
                hc,
                3,
                1,
                1,
                grp,
            ));
            ctx_input.push(Conv2d::new(
                ps,
                &format!("matcher.ctx.input{l}"),
                hc,
                hc,
                3,
                1,
                1,
                grp,
            ));
        }

        let m_corr = Conv2d::new(ps, "matcher.motion.corr", cfg.lookup_channels(), hc, 1, 1, 0, grp);
        let m_disp = Conv2d::new(ps, "matcher.motion.disp", 1, 8, 3, 1, 1, grp);
        let m_fuse = Conv2d::new(ps, "matcher.motion.fuse", hc + 8, MOTION_CHANNELS, 3, 1, 1, grp);

        let gru_fine = ConvGru::new(ps, "matcher.gru0", hc, hc + MOTION_CHANNELS + 1 + hc, grp);
        let gru_mid = ConvGru::new(ps, "matcher.gru1", hc, 3 * hc, grp);
        let gru_coarse = ConvGru::new(ps, "matcher.gru2", hc, 2 * hc, grp);

        let delta_a = Conv2d::new(ps, "matcher.delta.a", hc, hc, 3, 1, 1, grp);
        let delta_b = Conv2d::with_init(
            ps,
            "matcher.delta.b",
            hc,
            1,
            3,
            1,
            1,
            grp,
            Init::Zeros,
            true,
        );

        let up_a = Conv2d::new(
            ps,
            "matcher.up.a",
            hc + adapter.depth_channels,
            16,
            3,
            1,
            1,
            grp,
        );
        let up_b = Conv2d::new(ps, "matcher.up.b", 16, 9 * UP * UP, 1, 1, 0, grp);

        Ok(Matcher {
            cfg,
            agg_stem,
            agg_down,
            agg_gates,
            agg_up,
            agg_out,
            ctx_stem,
            ctx_downs,
            ctx_hidden,
            ctx_input,
            m_corr,
            m_disp,
            m_fuse,
            gru_fine,
            gru_mid,
            gru_coarse,
            delta_a,
            delta_b,
            up_a,
            up_b,
        })
    }

    pub fn config(&self) -> &MatcherConfig {
        &self.cfg
    }

    /// Group-wise vertical correlation of the two matching feature stacks:
    /// the grouped 4D volume (G, D, H/4, W/4) plus its group-averaged
    /// lookup pyramid.
    pub fn build_cost_volumes(
        &self,
        bottom: &MatcherFeatures,
        top: &MatcherFeatures,
    ) -> Result<(CorrelationPyramid, Tensor)> {
        let fb = matching_stack(bottom);
        let ft = matching_stack(top);
        if fb.shape() != ft.shape() {
            return Err(CoreError::data(format!(
                "matching features disagree: bottom {:?}, top {:?}",
                fb.shape(),
                ft.shape()
            )));
        }
        let raw = corr_volume(&fb, &ft, self.cfg.num_shifts(), self.cfg.corr_groups);
        let mut level = raw.mean_axis0();
        let mut levels = vec![level.clone()];
        for _ in 1..self.cfg.pyramid_levels {
            level = avg_pool_shifts(&level);
            levels.push(level.clone());
        }
        Ok((CorrelationPyramid { levels }, raw))
    }

    /// Collapse the grouped volume to one channel per shift with a gated 3d
    /// hourglass; each strided stage is modulated by a sigmoid gate computed
    /// from the bottom image's features at the matching scale.
    pub fn regularize_volume(&self, raw: &Tensor, bottom: &MatcherFeatures) -> Tensor {
        let mut skips = vec![self.agg_stem.forward(raw).leaky_relu(LEAK)];
        for i in 0..3 {
            let gate = self.agg_gates[i].forward(&bottom.levels[i + 1]).sigmoid();
            let v = self.agg_down[i]
                .forward(skips.last().unwrap())
                .leaky_relu(LEAK)
                .mul_bcast_axis1(&gate);
            skips.push(v);
        }
        let mut v = skips.pop().unwrap();
        for up in &self.agg_up {
            let skip = skips.pop().unwrap();
            let (h, w) = (skip.shape()[2], skip.shape()[3]);
            let merged = Tensor::concat_axis0(&[upsample_volume(&v, h, w), skip]);
            v = up.forward(&merged).leaky_relu(LEAK);
        }
        let out = self.agg_out.forward(&v);
        let s = out.shape().to_vec();
        out.reshape(&[s[1], s[2], s[3]])
    }

    /// Soft-argmax over the shift axis, emitted in degrees on the 1/4 grid
    /// and clamped to the configured range.
    pub fn initial_disparity(&self, regularized: &Tensor, rig: &CameraRig) -> Tensor {
        let (d, h, w) = (
            regularized.shape()[0],
            regularized.shape()[1],
            regularized.shape()[2],
        );
        debug_assert_eq!(d, self.cfg.num_shifts());
        let shift_degs: Vec<f64> = (0..d)
            .map(|s| rig.disparity_px_to_deg((s * UP) as f64))
            .collect();
        regularized
            .softmax_axis0()
            .weighted_sum_axis0(&shift_degs)
            .reshape(&[1, h, w])
            .clamp(self.cfg.disp_min_deg, self.cfg.disp_max_deg)
    }

    /// Static per-level context and initial hidden states from the bottom
    /// image, finest level first.
    pub fn context_features(&self, bottom_image: &Tensor) -> (Vec<Tensor>, Vec<Tensor>) {
        let mut f = self.ctx_stem.forward(bottom_image).leaky_relu(LEAK);
        let mut hidden = Vec::with_capacity(3);
        let mut context = Vec::with_capacity(3);
        for l in 0..3 {
            f = self.ctx_downs[l].forward(&f).leaky_relu(LEAK);
            hidden.push(self.ctx_hidden[l].forward(&f).tanh());
            context.push(self.ctx_input[l].forward(&f).relu());
        }
        (hidden, context)
    }

    /// Sample each pyramid level around the current disparity. Coordinates
    /// are plain values, so the lookup trains the volume, not the estimate.
    fn lookup(&self, pyramid: &CorrelationPyramid, disp_deg: &Tensor, rig: &CameraRig) -> Tensor {
        let px_per_deg = rig.disparity_deg_to_px(1.0);
        let base: Array2<f64> = disp_deg
            .data()
            .view()
            .into_dimensionality::<Ix3>()
            .expect("disparity is (1, H/4, W/4)")
            .index_axis(Axis(0), 0)
            .mapv(|v| v * px_per_deg / UP as f64);
        let parts: Vec<Tensor> = pyramid
            .levels
            .iter()
            .enumerate()
            .map(|(l, vol)| {
                let coords = base.mapv(|v| v / (1 << l) as f64);
                lookup_shift(vol, &coords, self.cfg.lookup_radius)
            })
            .collect();
        Tensor::concat_axis0(&parts)
    }

    /// One recurrent update, coarsest level first: correlation and the
    /// (detached) current disparity form motion features, each GRU level
    /// mixes its neighbors' hidden states, and the finest level emits an
    /// additive delta that is clamped into range. Gradients reach earlier
    /// iterations only through the hidden states.
    pub fn refine(
        &self,
        hidden: &mut [Tensor],
        pyramid: &CorrelationPyramid,
        context: &[Tensor],
        disp_deg: &Tensor,
        rig: &CameraRig,
    ) -> Result<Tensor> {
        let d_in = disp_deg.detach();
        // Non-finite disparity has no lookup position; report divergence
        // instead of feeding the sampling op an impossible coordinate.
        if !d_in.data().iter().all(|v| v.is_finite()) {
            return Err(CoreError::numeric(
                "non-finite disparity entering correlation lookup; inputs or parameters diverged",
            ));
        }
        let corr = self.lookup(pyramid, &d_in, rig);
        // The motion encoder sees disparity scaled into [0, 1] by the clamp
        // bound so its activations start well-conditioned.
        let scale = 1.0 / self.cfg.disp_max_deg.abs().max(self.cfg.disp_min_deg.abs()).max(1e-9);
        let d_norm = d_in.mul_scalar(scale);
        let mc = self.m_corr.forward(&corr).leaky_relu(LEAK);
        let md = self.m_disp.forward(&d_norm).leaky_relu(LEAK);
        let fused = self
            .m_fuse
            .forward(&Tensor::concat_axis0(&[mc, md]))
            .leaky_relu(LEAK);
        let motion = Tensor::concat_axis0(&[fused, d_norm]);

        let dims = |t: &Tensor| (t.shape()[1], t.shape()[2]);
        let (h2, w2) = dims(&hidden[2]);
        let x2 = Tensor::concat_axis0(&[context[2].clone(), bilinear_resize(&hidden[1], h2, w2)]);
        hidden[2] = self.gru_coarse.forward(&hidden[2], &x2);

        let (h1, w1) = dims(&hidden[1]);
        let x1 = Tensor::concat_axis0(&[
            context[1].clone(),
            bilinear_resize(&hidden[2], h1, w1),
            bilinear_resize(&hidden[0], h1, w1),
        ]);
        hidden[1] = self.gru_mid.forward(&hidden[1], &x1);

        let (h0, w0) = dims(&hidden[0]);
        let x0 = Tensor::concat_axis0(&[
            context[0].clone(),
            motion,
            bilinear_resize(&hidden[1], h0, w0),
        ]);
        hidden[0] = self.gru_fine.forward(&hidden[0], &x0);

        let delta = self
            .delta_b
            .forward(&self.delta_a.forward(&hidden[0]).leaky_relu(LEAK));
        Ok(d_in
            .add(&delta)
            .clamp(self.cfg.disp_min_deg, self.cfg.disp_max_deg))
    }

    /// Convex-combination upsampling from the 1/4 grid to (h, w): per output
    /// subpixel, learned softmax weights over the 3x3 coarse neighborhood.
    /// Degree-valued disparity upsamples without any magnitude rescale.
    pub fn upsample_guided(
        &self,
        disp_deg: &Tensor,
        hidden_fine: &Tensor,
        depth_encoding: &Tensor,
        h: usize,
        w: usize,
    ) -> Tensor {
        let (hq, wq) = (disp_deg.shape()[1], disp_deg.shape()[2]);
        let guide = Tensor::concat_axis0(&[hidden_fine.clone(), depth_encoding.clone()]);
        let mask = self
            .up_b
            .forward(&self.up_a.forward(&guide).leaky_relu(LEAK))
            .reshape(&[9, UP * UP, hq, wq])
            .softmax_axis0();

        let neighbors = unfold3x3_replicate(disp_deg);
        let mut tiles = Vec::with_capacity(9);
        for k in 0..9 {
            let n = neighbors.slice_axis0(k, k + 1);
            tiles.push(Tensor::concat_axis0(&vec![n; UP * UP]));
        }
        let tiled = Tensor::concat_axis0(&tiles).reshape(&[9, UP * UP, hq, wq]);

        let combined = mask.mul(&tiled).mean_axis0().mul_scalar(9.0);
        let up = pixel_shuffle(&combined, UP);
        if up.shape() == [1, h, w] {
            up
        } else {
            crop2d(&up, 0, 0, h, w)
        }
    }

    /// Full head: volumes, initial regression, then `iters` recurrent
    /// updates, each upsampled to full resolution. The sequence has
    /// `iters + 1` entries of shape (h, w) in degrees; the initial estimate
    /// upsamples bilinearly, refined ones through the guided mask.
    pub fn forward(
        &self,
        rig: &CameraRig,
        bottom_image: &Tensor,
        bottom: &MatcherFeatures,
        top: &MatcherFeatures,
        iters: usize,
    ) -> Result<DisparitySequence> {
        let shape = bottom_image.shape();
        if shape.len() != 3 || shape[0] != 3 {
            return Err(CoreError::data(format!(
                "bottom image must be (3, H, W), got {shape:?}"
            )));
        }
        let (h, w) = (shape[1], shape[2]);
        if h != rig.height_px {
            return Err(CoreError::data(format!(
                "image height {h} does not match rig height {}",
                rig.height_px
            )));
        }
        if iters == 0 {
            return Err(CoreError::config("refinement needs at least one iteration"));
        }

        let (pyramid, raw) = self.build_cost_volumes(bottom, top)?;
        let regularized = self.regularize_volume(&raw, bottom);
        let mut disp = self.initial_disparity(&regularized, rig);
        let (mut hidden, context) = self.context_features(bottom_image);

        let mut steps = Vec::with_capacity(iters + 1);
        steps.push(bilinear_resize(&disp, h, w).reshape(&[h, w]));
        for _ in 0..iters {
            disp = self.refine(&mut hidden, &pyramid, &context, &disp, rig)?;
            steps.push(
                self.upsample_guided(&disp, &hidden[0], &bottom.depth_encoding, h, w)
                    .reshape(&[h, w]),
            );
        }
        Ok(DisparitySequence { steps })
    }
}

/// Concatenate the finest projected level with the relative-depth encoding;
/// this is the stack the correlation volume matches.
fn matching_stack(f: &MatcherFeatures) -> Tensor {
    Tensor::concat_axis0(&[f.levels[0].clone(), f.depth_encoding.clone()])
}

/// Bilinear spatial upsampling of a (C, D, H, W) volume to (C, D, h, w).
fn upsample_volume(v: &Tensor, h: usize, w: usize) -> Tensor {
    let s = v.shape().to_vec();
    let flat = v.reshape(&[s[0] * s[1], s[2], s[3]]);
    bilinear_resize(&flat, h, w).reshape(&[s[0], s[1], h, w])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::{backward, Tape};
    use ndarray::{ArrayD, IxDyn};
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn rig(h: usize, w: usize) -> CameraRig {
        CameraRig::new(0.3, h, w).unwrap()
    }

    fn randu(shape: &[usize], seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::constant(ArrayD::from_shape_fn(IxDyn(shape), |_| {
            rng.random_range(-1.0..1.0)
        }))
    }

    /// Synthetic matching features on the grid of an (h, w) image.
    fn fake_features(adapter: &AdapterConfig, h: usize, w: usize, seed: u64) -> MatcherFeatures {
        let (mut lh, mut lw) = (h.div_ceil(4), w.div_ceil(4));
        let mut levels = Vec::new();
        for (i, &c) in adapter.level_channels.iter().enumerate() {
            levels.push(randu(&[c, lh, lw], seed * 31 + i as u64));
            (lh, lw) = (lh.div_ceil(2), lw.div_ceil(2));
        }
        let depth_encoding = randu(
            &[adapter.depth_channels, h.div_ceil(4), w.div_ceil(4)],
            seed * 31 + 7,
        );
        MatcherFeatures {
            levels,
            depth_encoding,
        }
    }

    fn build(h: usize, w: usize, max_disp_px: usize) -> (ParamStore, Matcher, CameraRig) {
        let r = rig(h, w);
        let cfg = MatcherConfig::for_rig(&r, max_disp_px).unwrap();
        let mut ps = ParamStore::new(11);
        let m = Matcher::new(&mut ps, cfg, &AdapterConfig::default()).unwrap();
        (ps, m, r)
    }

    #[test]
    fn config_validation_rejects_bad_shapes() {
        let r = rig(32, 64);
        assert!(MatcherConfig::for_rig(&r, 30).is_err());
        let mut cfg = MatcherConfig::for_rig(&r, 32).unwrap();
        cfg.pyramid_levels = 5; // 8 shifts cannot halve four times
        assert!(cfg.validate().is_err());
        cfg = MatcherConfig::for_rig(&r, 32).unwrap();
        cfg.disp_max_deg = cfg.disp_min_deg;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn correlation_matches_triple_loop_reference() {
        let (c, h, w, d, g) = (4usize, 4usize, 4usize, 2usize, 1usize);
        let fb = randu(&[c, h, w], 1);
        let ft = randu(&[c, h, w], 2);
        let vol = corr_volume(&fb, &ft, d, g);

        for s in 0..d {
            for y in 0..h {
                for x in 0..w {
                    let mut acc = 0.0;
                    if y + s < h {
                        for ch in 0..c {
                            acc += fb.data()[[ch, y, x]] * ft.data()[[ch, y + s, x]];
                        }
                    }
                    assert_eq!(vol.data()[[0, s, y, x]], acc / c as f64);
                }
            }
        }
    }

    #[test]
    fn self_correlation_at_zero_shift_is_mean_square() {
        let f = randu(&[8, 5, 6], 3);
        let vol = corr_volume(&f, &f, 2, 4);
        for grp in 0..4 {
            for y in 0..5 {
                for x in 0..6 {
                    let mut want = 0.0;
                    for ch in grp * 2..grp * 2 + 2 {
                        want += f.data()[[ch, y, x]].powi(2);
                    }
                    let got = vol.data()[[grp, 0, y, x]];
                    assert!((got - want / 2.0).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn cost_volumes_roll_with_columns() {
        let (ps, m, _r) = build(16, 24, 16);
        ps.begin_eval();
        let adapter = AdapterConfig::default();
        let fb = fake_features(&adapter, 16, 24, 5);
        let ft = fake_features(&adapter, 16, 24, 6);
        let (pyr, raw) = m.build_cost_volumes(&fb, &ft).unwrap();

        // Roll every feature level by k columns and rebuild; volumes must be
        // the same values at rolled positions, exactly.
        let k = 2usize;
        let rolled = |f: &MatcherFeatures| MatcherFeatures {
            levels: f.levels.iter().map(|t| roll_tensor(t, k)).collect(),
            depth_encoding: roll_tensor(&f.depth_encoding, k),
        };
        let (pyr_r, raw_r) = m.build_cost_volumes(&rolled(&fb), &rolled(&ft)).unwrap();

        let raw4 = raw.data();
        let raw4_r = raw_r.data();
        let w4 = raw4.shape()[3];
        for ((g0, s, y, x), &v) in raw4
            .view()
            .into_dimensionality::<ndarray::Ix4>()
            .unwrap()
            .indexed_iter()
        {
            assert_eq!(raw4_r[[g0, s, y, (x + k) % w4]], v);
        }
        for (a, b) in pyr.levels.iter().zip(pyr_r.levels.iter()) {
            let w4 = a.shape()[2];
            for ((s, y, x), &v) in a
                .data()
                .view()
                .into_dimensionality::<Ix3>()
                .unwrap()
                .indexed_iter()
            {
                assert_eq!(b.data()[[s, y, (x + k) % w4]], v);
            }
        }
        ps.end();
    }

    /// Column-roll on the trailing axis of a (C, H, W) tensor, content
    /// moving right by k.
    fn roll_tensor(t: &Tensor, k: usize) -> Tensor {
        let w = t.shape()[2];
        let mut out = t.data().clone();
        {
            let src = t.data();
            for ((c, y, x), v) in out
                .view_mut()
                .into_dimensionality::<Ix3>()
                .unwrap()
                .indexed_iter_mut()
            {
                *v = src[[c, y, (x + w - k % w) % w]];
            }
        }
        Tensor::constant(out)
    }

    #[test]
    fn soft_argmax_matches_expectation_oracle() {
        let (ps, m, r) = build(16, 16, 32);
        ps.begin_eval();
        let vol = randu(&[8, 4, 4], 9);
        let d0 = m.initial_disparity(&vol, &r);

        for y in 0..4 {
            for x in 0..4 {
                let mut mx = f64::NEG_INFINITY;
                for s in 0..8 {
                    mx = mx.max(vol.data()[[s, y, x]]);
                }
                let (mut num, mut den) = (0.0, 0.0);
                for s in 0..8 {
                    let e = (vol.data()[[s, y, x]] - mx).exp();
                    num += r.disparity_px_to_deg((s * UP) as f64) * e;
                    den += e;
                }
                assert!((d0.data()[[0, y, x]] - num / den).abs() < 1e-6);
            }
        }
        ps.end();
    }

    #[test]
    fn soft_argmax_uniform_and_peaked_volumes() {
        let (ps, m, r) = build(16, 16, 32);
        ps.begin_eval();
        let flat = Tensor::constant(ArrayD::zeros(IxDyn(&[8, 3, 3])));
        let d0 = m.initial_disparity(&flat, &r);
        let want = r.disparity_px_to_deg(3.5 * UP as f64);
        for &v in d0.data().iter() {
            assert!((v - want).abs() < 1e-12);
        }

        // A sharply peaked volume concentrates the softmax at its peak.
        let mut peaked = ArrayD::zeros(IxDyn(&[8, 3, 3]));
        for y in 0..3 {
            for x in 0..3 {
                peaked[[5, y, x]] = 60.0;
            }
        }
        let d0 = m.initial_disparity(&Tensor::constant(peaked), &r);
        let want = r.disparity_px_to_deg((5 * UP) as f64);
        for &v in d0.data().iter() {
            assert!((v - want).abs() < 1e-9);
        }
        ps.end();
    }

    #[test]
    fn regularizer_output_contract_and_gradients() {
        let (ps, m, r) = build(32, 48, 32);
        let adapter = AdapterConfig::default();
        let tape = Tape::new();
        ps.begin(&tape, &[ParamGroup::Matcher]);
        let fb = fake_features(&adapter, 32, 48, 21);
        let ft = fake_features(&adapter, 32, 48, 22);
        let (_pyr, raw) = m.build_cost_volumes(&fb, &ft).unwrap();
        let reg = m.regularize_volume(&raw, &fb);
        assert_eq!(reg.shape(), &[8, 8, 12]);
        assert!(reg.data().iter().all(|v| v.is_finite()));

        let loss = m.initial_disparity(&reg, &r).sum_all();
        let mut grads = backward(&loss);
        let got: std::collections::HashSet<String> = ps
            .take_grads(&mut grads)
            .into_iter()
            .map(|(idx, _)| ps.name_of(idx))
            .collect();
        ps.end();
        for idx in 0..ps.len() {
            let name = ps.name_of(idx);
            if name.starts_with("matcher.agg.") {
                assert!(got.contains(&name), "no gradient reached {name}");
            }
        }
    }

    #[test]
    fn context_levels_match_grid_and_are_deterministic() {
        let (ps, m, _r) = build(32, 48, 32);
        ps.begin_eval();
        let img = randu(&[3, 32, 48], 4);
        let (hidden, context) = m.context_features(&img);
        assert_eq!(hidden.len(), 3);
        let dims = [(8, 12), (4, 6), (2, 3)];
        for l in 0..3 {
            assert_eq!(hidden[l].shape(), &[24, dims[l].0, dims[l].1]);
            assert_eq!(context[l].shape(), &[24, dims[l].0, dims[l].1]);
            assert!(hidden[l].data().iter().all(|v| v.abs() <= 1.0));
            assert!(context[l].data().iter().all(|&v| v >= 0.0));
        }
        let (hidden2, context2) = m.context_features(&img);
        for l in 0..3 {
            assert_eq!(hidden[l].data(), hidden2[l].data());
            assert_eq!(context[l].data(), context2[l].data());
        }
        ps.end();
    }

    #[test]
    fn forward_sequence_contract() {
        let (ps, m, r) = build(32, 64, 32);
        let adapter = AdapterConfig::default();
        ps.begin_eval();
        let img = randu(&[3, 32, 64], 13);
        let fb = fake_features(&adapter, 32, 64, 14);
        let ft = fake_features(&adapter, 32, 64, 15);
        let seq = m.forward(&r, &img, &fb, &ft, 3).unwrap();
        assert_eq!(seq.steps.len(), 4);
        for step in &seq.steps {
            assert_eq!(step.shape(), &[32, 64]);
            for &v in step.data().iter() {
                assert!(v.is_finite());
                assert!(v >= m.config().disp_min_deg && v <= m.config().disp_max_deg);
            }
        }
        let seq2 = m.forward(&r, &img, &fb, &ft, 3).unwrap();
        for (a, b) in seq.steps.iter().zip(seq2.steps.iter()) {
            assert_eq!(a.data(), b.data());
        }
        ps.end();
    }

    #[test]
    fn adversarial_delta_stays_clamped() {
        let (ps, m, r) = build(32, 64, 32);
        let adapter = AdapterConfig::default();
        // Force an enormous positive update at every pixel.
        for idx in 0..ps.len() {
            if ps.name_of(idx) == "matcher.delta.b.b" {
                ps.update(idx, |d| d.fill(1e6));
            }
        }
        ps.begin_eval();
        let img = randu(&[3, 32, 64], 23);
        let fb = fake_features(&adapter, 32, 64, 24);
        let ft = fake_features(&adapter, 32, 64, 25);
        let seq = m.forward(&r, &img, &fb, &ft, 2).unwrap();
        for step in &seq.steps {
            for &v in step.data().iter() {
                assert!(v <= m.config().disp_max_deg + 1e-12);
            }
        }
        // The refined iterates actually sit at the bound.
        let last = seq.final_map();
        assert!(last
            .data()
            .iter()
            .all(|&v| (v - m.config().disp_max_deg).abs() < 1e-9));
        ps.end();
    }

    #[test]
    fn zero_initialized_update_head_starts_as_identity() {
        let (ps, m, r) = build(32, 64, 32);
        let adapter = AdapterConfig::default();
        ps.begin_eval();
        let img = randu(&[3, 32, 64], 33);
        let fb = fake_features(&adapter, 32, 64, 34);
        let ft = fake_features(&adapter, 32, 64, 35);

        let (pyramid, raw) = m.build_cost_volumes(&fb, &ft).unwrap();
        let reg = m.regularize_volume(&raw, &fb);
        let d0 = m.initial_disparity(&reg, &r);
        let (mut hidden, context) = m.context_features(&img);
        let d1 = m.refine(&mut hidden, &pyramid, &context, &d0, &r).unwrap();
        assert_eq!(d1.data(), d0.data());
        ps.end();
    }

    #[test]
    fn convex_upsampling_preserves_constants_and_range() {
        let (ps, m, _r) = build(32, 64, 32);
        ps.begin_eval();
        let hidden = randu(&[24, 8, 16], 41);
        let depth_enc = randu(&[16, 8, 16], 42);

        let constant = Tensor::constant(ArrayD::from_elem(IxDyn(&[1, 8, 16]), 2.75));
        let up = m.upsample_guided(&constant, &hidden, &depth_enc, 32, 64);
        assert_eq!(up.shape(), &[1, 32, 64]);
        for &v in up.data().iter() {
            assert!((v - 2.75).abs() < 1e-12);
        }

        let coarse = randu(&[1, 8, 16], 43);
        let up = m.upsample_guided(&coarse, &hidden, &depth_enc, 32, 64);
        let cd = coarse.data();
        for ((_z, y, x), &v) in up
            .data()
            .view()
            .into_dimensionality::<Ix3>()
            .unwrap()
            .indexed_iter()
        {
            let (cy, cx) = (y / UP, x / UP);
            let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
            for dy in -1i64..=1 {
                for dx in -1i64..=1 {
                    let ny = (cy as i64 + dy).clamp(0, 7) as usize;
                    let nx = (cx as i64 + dx).clamp(0, 15) as usize;
                    lo = lo.min(cd[[0, ny, nx]]);
                    hi = hi.max(cd[[0, ny, nx]]);
                }
            }
            assert!(v >= lo - 1e-9 && v <= hi + 1e-9, "{v} outside [{lo}, {hi}]");
        }
        ps.end();
    }

    #[test]
    fn lookup_channel_count_and_mismatch_rejection() {
        let (ps, m, _r) = build(32, 64, 32);
        let adapter = AdapterConfig::default();
        ps.begin_eval();
        assert_eq!(m.config().lookup_channels(), 21);
        let fb = fake_features(&adapter, 32, 64, 51);
        let ft = fake_features(&adapter, 32, 48, 52);
        assert!(m.build_cost_volumes(&fb, &ft).is_err());
        ps.end();
    }

    #[test]
    fn stage_a_groups_receive_gradients_through_head() {
        let (ps, m, r) = build(32, 64, 32);
        let adapter = AdapterConfig::default();
        let tape = Tape::new();
        ps.begin(&tape, &[ParamGroup::Matcher]);
        let img = randu(&[3, 32, 64], 61);
        let fb = fake_features(&adapter, 32, 64, 62);
        let ft = fake_features(&adapter, 32, 64, 63);
        let seq = m.forward(&r, &img, &fb, &ft, 2).unwrap();
        let loss = seq.final_map().sum_all();
        let mut grads = backward(&loss);
        let got: std::collections::HashSet<String> = ps
            .take_grads(&mut grads)
            .into_iter()
            .map(|(idx, _)| ps.name_of(idx))
            .collect();
        ps.end();
        // Context, motion, GRU, delta, and upsampling parameters all sit on
        // the path to the final refined map.
        for prefix in [
            "matcher.ctx.",
            "matcher.motion.",
            "matcher.gru",
            "matcher.delta.",
            "matcher.up.",
        ] {
            assert!(
                got.iter().any(|n| n.starts_with(prefix)),
                "no gradient reached any {prefix} parameter"
            );
        }
    }

    #[test]
    fn volume_upsample_keeps_channel_and_shift_axes() {
        let v = randu(&[3, 4, 5, 7], 71);
        let up = upsample_volume(&v, 10, 14);
        assert_eq!(up.shape(), &[3, 4, 10, 14]);
        // Corner alignment under half-pixel-center doubling: output corners
        // interpolate within the source range.
        let (lo, hi) = v
            .data()
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), &x| {
                (l.min(x), h.max(x))
            });
        for &x in up.data().iter() {
            assert!(x >= lo - 1e-12 && x <= hi + 1e-12);
        }
    }
}
