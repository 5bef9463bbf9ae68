//! End-to-end stereo model: one shared-weight feature extraction per image,
//! adaptation onto the matching grid, and the recurrent matching head.
//! Inference wraps the panoramas with circular padding so the horizontal
//! seam sees real neighboring content instead of zero-padded borders.

use ndarray::{s, Array2, Array3, Ix2};
use serde::{Deserialize, Serialize};

use crate::autograd::Tensor;
use crate::backbone::{Adapter, AdapterConfig, Backbone, BackboneSpec};
use crate::error::{CoreError, Result};
use crate::geometry::{circular_pad, CameraRig};
use crate::matcher::{DisparitySequence, Matcher, MatcherConfig};
use crate::nn::ParamStore;

/// Everything needed to rebuild a model: extraction source and
/// trainability, adapter widths, and matching-head hyperparameters.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ModelConfig {
    pub backbone: BackboneSpec,
    pub adapter: AdapterConfig,
    pub matcher: MatcherConfig,
}

impl ModelConfig {
    /// Frozen standin extraction with default adapter widths and the rig's
    /// matching-head defaults.
    pub fn for_rig(rig: &CameraRig, max_disp_px: usize) -> Result<ModelConfig> {
        Ok(ModelConfig {
            backbone: BackboneSpec::default(),
            adapter: AdapterConfig::default(),
            matcher: MatcherConfig::for_rig(rig, max_disp_px)?,
        })
    }
}

/// The assembled network. All parameters live in one store; callers bind
/// them with `store().begin` (training) or `store().begin_eval` before a
/// forward pass, or use `predict` which manages binding itself.
pub struct StereoModel {
    cfg: ModelConfig,
    store: ParamStore,
    backbone: Backbone,
    adapter: Adapter,
    matcher: Matcher,
}

impl StereoModel {
    /// Registers every parameter deterministically from the seed, then
    /// imports external extraction weights when the config names any.
    pub fn new(seed: u64, cfg: ModelConfig) -> Result<StereoModel> {
        cfg.matcher.validate()?;
        let mut store = ParamStore::new(seed);
        let backbone = Backbone::new(&mut store);
        let adapter = Adapter::new(&mut store, cfg.adapter);
        let matcher = Matcher::new(&mut store, cfg.matcher, &cfg.adapter)?;
        cfg.backbone.apply_external(&store)?;
        Ok(StereoModel {
            cfg,
            store,
            backbone,
            adapter,
            matcher,
        })
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    /// Full pipeline for one bound pass: extract both images, adapt, match.
    /// The sequence has `iters + 1` full-resolution maps in degrees.
    pub fn forward(
        &self,
        rig: &CameraRig,
        top: &Tensor,
        bottom: &Tensor,
        iters: usize,
    ) -> Result<DisparitySequence> {
        if top.shape() != bottom.shape() {
            return Err(CoreError::data(format!(
                "stereo pair shapes disagree: top {:?}, bottom {:?}",
                top.shape(),
                bottom.shape()
            )));
        }
        let shape = bottom.shape();
        if shape.len() != 3 || shape[0] != 3 {
            return Err(CoreError::data(format!(
                "images must be (3, H, W), got {shape:?}"
            )));
        }
        let (h, w) = (shape[1], shape[2]);
        let bundle_top = self.backbone.extract(top)?;
        let bundle_bottom = self.backbone.extract(bottom)?;
        let feats_bottom = self.adapter.adapt(&bundle_bottom, h, w)?;
        let feats_top = self.adapter.adapt(&bundle_top, h, w)?;
        self.matcher
            .forward(rig, bottom, &feats_bottom, &feats_top, iters)
    }

    /// Inference on plain arrays: circularly pads both panoramas by
    /// `pad_cols` columns (capped below the width), runs the eval iteration
    /// count, and crops the final map back. Returns degrees at (H, W).
    pub fn predict(
        &self,
        rig: &CameraRig,
        top: &Array3<f64>,
        bottom: &Array3<f64>,
        pad_cols: usize,
    ) -> Result<Array2<f64>> {
        if top.dim() != bottom.dim() {
            return Err(CoreError::data("stereo pair shapes disagree"));
        }
        let (_, _, w) = bottom.dim();
        let pad = pad_cols.min(w.saturating_sub(1));
        let top_p = Tensor::constant(circular_pad(top, pad)?.into_dyn());
        let bottom_p = Tensor::constant(circular_pad(bottom, pad)?.into_dyn());

        self.store.begin_eval();
        let result = self
            .forward(rig, &top_p, &bottom_p, self.cfg.matcher.iters_eval)
            .map(|seq| {
                let full = seq
                    .final_map()
                    .data()
                    .view()
                    .into_dimensionality::<Ix2>()
                    .expect("sequence maps are 2d");
                full.slice(s![.., pad..pad + w]).to_owned()
            });
        self.store.end();
        result
    }
}
