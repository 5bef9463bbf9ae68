//! Per-image feature extraction: a compact convolutional encoder-decoder
//! that emits a relative depth map plus four intermediate decoder feature
//! maps, with one parameter set shared between the top and bottom image.
//! Also hosts the adaptation module that resizes and reprojects those maps
//! to the matching head's scales, and the relative-depth encoder whose
//! output joins the matching features.
//!
//! The encoder and decoder register under separate parameter groups, so a
//! training stage can freeze or fine-tune them independently; frozen
//! parameters are bound as constants and provably receive no gradients.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::autograd::{bilinear_resize, crop2d, pad2d_replicate, Tensor};
use crate::error::{CoreError, Result};
use crate::nn::{Conv2d, Init, ParamGroup, ParamStore};

/// Negative slope shared by every activation in the extraction stack.
const LEAK: f64 = 0.1;
/// Channel width of the decoder feature maps before adaptation.
pub const DECODER_CHANNELS: usize = 56;
/// Scales of the four decoder taps, coarsest last.
pub const TAP_SCALES: [usize; 4] = [4, 8, 16, 32];
/// Encoder stage widths at scales 1/2, 1/4, 1/8, 1/16, 1/32.
const STAGE_CHANNELS: [usize; 5] = [24, 40, 72, 112, 192];

/// Where extraction weights come from. The standin never needs downloads;
/// the external kind imports a parameter checkpoint of this architecture
/// (for example a previously trained run) and fails with a clear message
/// when the file is absent.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackboneKind {
    Standin,
    External { checkpoint: PathBuf },
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct BackboneSpec {
    pub kind: BackboneKind,
    pub encoder_trainable: bool,
    pub decoder_trainable: bool,
}

impl Default for BackboneSpec {
    /// Frozen standin: the stage-A configuration.
    fn default() -> Self {
        BackboneSpec {
            kind: BackboneKind::Standin,
            encoder_trainable: false,
            decoder_trainable: false,
        }
    }
}

impl BackboneSpec {
    /// Backbone groups that should receive gradients under this spec.
    pub fn trainable_groups(&self) -> Vec<ParamGroup> {
        let mut g = Vec::new();
        if self.encoder_trainable {
            g.push(ParamGroup::BackboneEncoder);
        }
        if self.decoder_trainable {
            g.push(ParamGroup::BackboneDecoder);
        }
        g
    }

    /// Import external weights into an already-registered store. Call after
    /// the whole model is built; only matching parameter names are touched.
    pub fn apply_external(&self, ps: &ParamStore) -> Result<()> {
        match &self.kind {
            BackboneKind::Standin => Ok(()),
            BackboneKind::External { checkpoint } => {
                if !checkpoint.is_file() {
                    return Err(CoreError::config(format!(
                        "external backbone checkpoint not found at {}; train a run and point \
                         to its checkpoint file, or use the standin backbone",
                        checkpoint.display()
                    )));
                }
                let ck = crate::checkpoint::load(checkpoint)?;
                let backbone_only: Vec<_> = ck
                    .params
                    .into_iter()
                    .filter(|(_, g, _)| {
                        matches!(g, ParamGroup::BackboneEncoder | ParamGroup::BackboneDecoder)
                    })
                    .collect();
                ps.load_matching(&backbone_only)?;
                Ok(())
            }
        }
    }
}

/// One decoder tap: features at 1/scale of the input resolution.
pub struct DecoderTap {
    pub scale: usize,
    pub features: Tensor,
}

/// Extraction output for one image.
pub struct FeatureBundle {
    /// Full-resolution relative depth, strictly positive, scale/shift-free.
    pub relative_depth: Tensor,
    /// Exactly four decoder feature maps, finest first.
    pub taps: Vec<DecoderTap>,
}

impl FeatureBundle {
    /// Contract check used by tests: four taps at the declared scales with
    /// ceil-divided spatial dims, everything finite, depth positive.
    pub fn validate(&self, h: usize, w: usize) -> Result<()> {
        if self.taps.len() != 4 {
            return Err(CoreError::numeric(format!(
                "expected 4 decoder taps, found {}",
                self.taps.len()
            )));
        }
        for (tap, &scale) in self.taps.iter().zip(TAP_SCALES.iter()) {
            if tap.scale != scale {
                return Err(CoreError::numeric(format!(
                    "tap at scale {} where {scale} was expected",
                    tap.scale
                )));
            }
            let want = [DECODER_CHANNELS, h.div_ceil(scale), w.div_ceil(scale)];
            if tap.features.shape() != want {
                return Err(CoreError::numeric(format!(
                    "tap 1/{scale} has shape {:?}, expected {want:?}",
                    tap.features.shape()
                )));
            }
            if tap.features.data().iter().any(|v| !v.is_finite()) {
                return Err(CoreError::numeric(format!("non-finite tap at 1/{scale}")));
            }
        }
        let d = &self.relative_depth;
        if d.shape() != [1, h, w] {
            return Err(CoreError::numeric(format!(
                "relative depth has shape {:?}, expected (1, {h}, {w})",
                d.shape()
            )));
        }
        if d.data().iter().any(|v| !(v.is_finite() && *v > 0.0)) {
            return Err(CoreError::numeric("relative depth must be finite positive"));
        }
        Ok(())
    }
}

/// Compact encoder-decoder standin for a monocular relative-depth network.
/// Five strided encoder stages feed a lateral top-down decoder at a single
/// width; the relative-depth head reads the finest decoder level.
pub struct Backbone {
    stem_a: Conv2d,
    stem_b: Conv2d,
    downs: Vec<Conv2d>,
    refines: Vec<Conv2d>,
    refine_deep: Conv2d,
    laterals: Vec<Conv2d>,
    fuses: Vec<Conv2d>,
    head_a: Conv2d,
    head_b: Conv2d,
}

impl Backbone {
    pub fn new(ps: &mut ParamStore) -> Backbone {
        let enc = ParamGroup::BackboneEncoder;
        let dec = ParamGroup::BackboneDecoder;
        let stem_a = Conv2d::new(ps, "backbone.enc.stem_a", 3, STAGE_CHANNELS[0], 3, 2, 1, enc);
        let stem_b = Conv2d::new(
            ps,
            "backbone.enc.stem_b",
            STAGE_CHANNELS[0],
            STAGE_CHANNELS[0],
            3,
            1,
            1,
            enc,
        );
        let mut downs = Vec::new();
        let mut refines = Vec::new();
        for i in 0..4 {
            let (cin, cout) = (STAGE_CHANNELS[i], STAGE_CHANNELS[i + 1]);
            downs.push(Conv2d::new(
                ps,
                &format!("backbone.enc.down{i}"),
                cin,
                cout,
                3,
                2,
                1,
                enc,
            ));
            refines.push(Conv2d::new(
                ps,
                &format!("backbone.enc.refine{i}"),
                cout,
                cout,
                3,
                1,
                1,
                enc,
            ));
        }
        let deep = STAGE_CHANNELS[4];
        let refine_deep = Conv2d::new(ps, "backbone.enc.refine_deep", deep, deep, 3, 1, 1, enc);

        let mut laterals = Vec::new();
        for i in 0..4 {
            laterals.push(Conv2d::new(
                ps,
                &format!("backbone.dec.lateral{i}"),
                STAGE_CHANNELS[i + 1],
                DECODER_CHANNELS,
                1,
                1,
                0,
                dec,
            ));
        }
        let mut fuses = Vec::new();
        for i in 0..3 {
            fuses.push(Conv2d::new(
                ps,
                &format!("backbone.dec.fuse{i}"),
                DECODER_CHANNELS,
                DECODER_CHANNELS,
                3,
                1,
                1,
                dec,
            ));
        }
        let head_a = Conv2d::new(ps, "backbone.dec.head_a", DECODER_CHANNELS, 32, 3, 1, 1, dec);
        let head_b = Conv2d::new(ps, "backbone.dec.head_b", 32, 1, 3, 1, 1, dec);

        Backbone {
            stem_a,
            stem_b,
            downs,
            refines,
            refine_deep,
            laterals,
            fuses,
            head_a,
            head_b,
        }
    }

    /// Run extraction on a (3, H, W) image in [0, 1]. Dimensions that do not
    /// divide by 32 are replicate-padded internally and the taps cropped
    /// back to ceil(dim / scale).
    pub fn extract(&self, image: &Tensor) -> Result<FeatureBundle> {
        let shape = image.shape().to_vec();
        if shape.len() != 3 || shape[0] != 3 {
            return Err(CoreError::config(format!(
                "extract expects a (3, H, W) image, got {shape:?}"
            )));
        }
        let (h, w) = (shape[1], shape[2]);
        if h < 4 || w < 4 {
            return Err(CoreError::config(format!(
                "image {h}x{w} too small for a 1/32 pyramid"
            )));
        }
        let (ph, pw) = (h.next_multiple_of(32), w.next_multiple_of(32));
        let x = if (ph, pw) == (h, w) {
            image.clone()
        } else {
            pad2d_replicate(image, 0, ph - h, 0, pw - w)
        };

        let x = self.stem_a.forward(&x).leaky_relu(LEAK);
        let x = self.stem_b.forward(&x).leaky_relu(LEAK);
        let mut stages = Vec::with_capacity(4);
        let mut cur = x;
        for i in 0..4 {
            cur = self.downs[i].forward(&cur).leaky_relu(LEAK);
            cur = self.refines[i].forward(&cur).leaky_relu(LEAK);
            if i == 3 {
                cur = self.refine_deep.forward(&cur).leaky_relu(LEAK);
            }
            stages.push(cur.clone());
        }

        // Top-down decoder: lateral projections plus upsampled coarser level.
        let mut pyramid = vec![self.laterals[3].forward(&stages[3])];
        for i in (0..3).rev() {
            let lat = self.laterals[i].forward(&stages[i]);
            let up_dims = (lat.shape()[1], lat.shape()[2]);
            let up = bilinear_resize(pyramid.last().unwrap(), up_dims.0, up_dims.1);
            pyramid.push(self.fuses[i].forward(&lat.add(&up)).leaky_relu(LEAK));
        }
        pyramid.reverse(); // finest first

        let hid = self.head_a.forward(&pyramid[0]).leaky_relu(LEAK);
        let rel_q = self.head_b.forward(&hid).softplus();
        let rel = bilinear_resize(&rel_q, ph, pw);
        let rel = if (ph, pw) == (h, w) {
            rel
        } else {
            crop2d(&rel, 0, 0, h, w)
        };

        let taps = pyramid
            .into_iter()
            .zip(TAP_SCALES.iter())
            .map(|(t, &scale)| {
                let (th, tw) = (h.div_ceil(scale), w.div_ceil(scale));
                let features = if t.shape()[1] == th && t.shape()[2] == tw {
                    t
                } else {
                    crop2d(&t, 0, 0, th, tw)
                };
                DecoderTap { scale, features }
            })
            .collect();

        Ok(FeatureBundle {
            relative_depth: rel,
            taps,
        })
    }
}

/// Matching-head inputs for one image: four projected feature levels plus
/// the encoded relative depth at 1/4 scale.
pub struct MatcherFeatures {
    pub levels: Vec<Tensor>,
    pub depth_encoding: Tensor,
}

/// Channel counts the adapter emits per level, finest first.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct AdapterConfig {
    pub level_channels: [usize; 4],
    pub depth_channels: usize,
}

impl Default for AdapterConfig {
    fn default() -> Self {
        AdapterConfig {
            level_channels: [80, 64, 64, 64],
            depth_channels: 16,
        }
    }
}

/// Bilinear resize plus per-level learnable 1x1 projection, and the small
/// strided encoder that turns the relative depth map into matching features.
pub struct Adapter {
    cfg: AdapterConfig,
    projections: Vec<Conv2d>,
    depth_a: Conv2d,
    depth_b: Conv2d,
    depth_c: Conv2d,
}

impl Adapter {
    pub fn new(ps: &mut ParamStore, cfg: AdapterConfig) -> Adapter {
        Self::with_projection_init(ps, cfg, Init::FanIn)
    }

    /// Identity-initialized variant used to verify that projection at equal
    /// width starts as a pass-through.
    pub fn with_projection_init(ps: &mut ParamStore, cfg: AdapterConfig, init: Init) -> Adapter {
        let grp = ParamGroup::Adapters;
        let projections = (0..4)
            .map(|i| {
                Conv2d::with_init(
                    ps,
                    &format!("adapter.project{i}"),
                    DECODER_CHANNELS,
                    cfg.level_channels[i],
                    1,
                    1,
                    0,
                    grp,
                    init,
                    true,
                )
            })
            .collect();
        let mid = cfg.depth_channels.div_ceil(2).max(4);
        let depth_a = Conv2d::new(ps, "adapter.depth_a", 1, mid, 3, 2, 1, grp);
        let depth_b = Conv2d::new(ps, "adapter.depth_b", mid, cfg.depth_channels, 3, 2, 1, grp);
        let depth_c = Conv2d::new(
            ps,
            "adapter.depth_c",
            cfg.depth_channels,
            cfg.depth_channels,
            3,
            1,
            1,
            grp,
        );
        Adapter {
            cfg,
            projections,
            depth_a,
            depth_b,
            depth_c,
        }
    }

    pub fn config(&self) -> &AdapterConfig {
        &self.cfg
    }

    /// Project a bundle onto the matcher grid for an (h, w) input image:
    /// level l lives at 1/4 / 2^l with the configured channel count.
    pub fn adapt(&self, bundle: &FeatureBundle, h: usize, w: usize) -> Result<MatcherFeatures> {
        if bundle.taps.len() != 4 {
            return Err(CoreError::config(format!(
                "adapter expects 4 taps, got {}",
                bundle.taps.len()
            )));
        }
        let (mut lh, mut lw) = (h.div_ceil(4), w.div_ceil(4));
        let mut levels = Vec::with_capacity(4);
        for (i, tap) in bundle.taps.iter().enumerate() {
            let t = if tap.features.shape()[1] == lh && tap.features.shape()[2] == lw {
                tap.features.clone()
            } else {
                bilinear_resize(&tap.features, lh, lw)
            };
            levels.push(self.projections[i].forward(&t));
            (lh, lw) = (lh.div_ceil(2), lw.div_ceil(2));
        }
        let depth_encoding = self.encode_relative_depth(&bundle.relative_depth);
        Ok(MatcherFeatures {
            levels,
            depth_encoding,
        })
    }

    /// Strictly positive full-resolution relative depth to a 1/4-scale
    /// feature map. Deliberately not scale-invariant; invariance is the
    /// loss's job, not this encoder's.
    pub fn encode_relative_depth(&self, relative_depth: &Tensor) -> Tensor {
        let x = self.depth_a.forward(relative_depth).leaky_relu(LEAK);
        let x = self.depth_b.forward(&x).leaky_relu(LEAK);
        self.depth_c.forward(&x)
    }
}
