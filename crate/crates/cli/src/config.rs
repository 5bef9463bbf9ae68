//! Run configuration files. Every field is optional, so a partial TOML file
//! adjusts only what it names; `train` writes the fully resolved snapshot
//! into its run directory, and re-running from that snapshot reproduces the
//! run exactly.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use omnistereo_core::backbone::BackboneKind;
use omnistereo_core::geometry::CameraRig;
use omnistereo_core::losses::LossConfig;
use omnistereo_core::model::ModelConfig;
use omnistereo_core::trainer::{parse_groups, AugmentConfig, LossKind, Stage, StageConfig};
use omnistereo_core::{CoreError, Result};

/// Vertical search extent when the file does not set one, in pixels.
const DEFAULT_MAX_DISP_PX: usize = 128;

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub model: ModelSection,
    pub stage_a: StageSection,
    pub stage_b: StageSection,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<RunConfig> {
        let text = fs::read_to_string(path).map_err(|e| CoreError::io(path, e))?;
        toml::from_str(&text)
            .map_err(|e| CoreError::config(format!("cannot parse {}: {e}", path.display())))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = toml::to_string_pretty(self)
            .map_err(|e| CoreError::config(format!("cannot serialize run config: {e}")))?;
        fs::write(path, text).map_err(|e| CoreError::io(path, e))
    }

    /// The same configuration with every value pinned explicitly.
    pub fn resolved_snapshot(
        &self,
        model: &ModelConfig,
        stage_a: &StageConfig,
        stage_b: &StageConfig,
    ) -> RunConfig {
        RunConfig {
            seed: self.seed,
            model: ModelSection::pinned(model),
            stage_a: StageSection::pinned(stage_a),
            stage_b: StageSection::pinned(stage_b),
        }
    }
}

/// Network hyperparameters. The disparity clamp defaults to the training
/// set's ground-truth range and can be widened here.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub max_disp_px: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub corr_groups: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lookup_radius: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub pyramid_levels: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub hidden_channels: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub iters_train: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub iters_eval: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub pad_cols_eval: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub disp_min_deg: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub disp_max_deg: Option<f64>,
    /// Initialize the backbone from this checkpoint instead of random.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub backbone_checkpoint: Option<PathBuf>,
}

impl ModelSection {
    /// Defaults for the rig, then the dataset disparity range as the clamp,
    /// then whatever this section pins down.
    pub fn resolve(
        &self,
        rig: &CameraRig,
        dataset_range_deg: Option<(f64, f64)>,
    ) -> Result<ModelConfig> {
        let mut cfg = ModelConfig::for_rig(rig, self.max_disp_px.unwrap_or(DEFAULT_MAX_DISP_PX))?;
        if let Some((lo, hi)) = dataset_range_deg {
            cfg.matcher.disp_min_deg = lo;
            cfg.matcher.disp_max_deg = hi;
        }
        if let Some(path) = &self.backbone_checkpoint {
            cfg.backbone.kind = BackboneKind::External {
                checkpoint: path.clone(),
            };
        }
        let m = &mut cfg.matcher;
        set(&mut m.corr_groups, self.corr_groups);
        set(&mut m.lookup_radius, self.lookup_radius);
        set(&mut m.pyramid_levels, self.pyramid_levels);
        set(&mut m.hidden_channels, self.hidden_channels);
        set(&mut m.iters_train, self.iters_train);
        set(&mut m.iters_eval, self.iters_eval);
        set(&mut m.pad_cols_eval, self.pad_cols_eval);
        set(&mut m.disp_min_deg, self.disp_min_deg);
        set(&mut m.disp_max_deg, self.disp_max_deg);
        Ok(cfg)
    }

    fn pinned(cfg: &ModelConfig) -> ModelSection {
        let m = &cfg.matcher;
        ModelSection {
            max_disp_px: Some(m.max_disp_px),
            corr_groups: Some(m.corr_groups),
            lookup_radius: Some(m.lookup_radius),
            pyramid_levels: Some(m.pyramid_levels),
            hidden_channels: Some(m.hidden_channels),
            iters_train: Some(m.iters_train),
            iters_eval: Some(m.iters_eval),
            pad_cols_eval: Some(m.pad_cols_eval),
            disp_min_deg: Some(m.disp_min_deg),
            disp_max_deg: Some(m.disp_max_deg),
            backbone_checkpoint: match &cfg.backbone.kind {
                BackboneKind::Standin => None,
                BackboneKind::External { checkpoint } => Some(checkpoint.clone()),
            },
        }
    }
}

/// Overrides on one stage's training defaults.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StageSection {
    /// Trainable components: `head`, `decoder`, `encoder`, or group names.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub trainable: Option<Vec<String>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub loss: Option<LossKind>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lr_head: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub decoder_lr_divisor: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub batch_size: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub epochs: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub subset_ratio: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub augment: Option<AugmentConfig>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub weight_decay: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub clip_norm: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub loss_cfg: Option<LossConfig>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub max_steps: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub target_train_mae_deg: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub val_buckets_m: Option<Vec<(f64, f64)>>,
}

impl StageSection {
    pub fn resolve(&self, stage: Stage, seed: u64) -> Result<StageConfig> {
        let mut cfg = match stage {
            Stage::A => StageConfig::stage_a(seed),
            Stage::B => StageConfig::stage_b(seed),
        };
        if let Some(list) = &self.trainable {
            cfg.trainable = parse_groups(&list.join("+"))?;
        }
        set(&mut cfg.loss, self.loss);
        set(&mut cfg.lr_head, self.lr_head);
        set(&mut cfg.decoder_lr_divisor, self.decoder_lr_divisor);
        set(&mut cfg.batch_size, self.batch_size);
        set(&mut cfg.epochs, self.epochs);
        set(&mut cfg.subset_ratio, self.subset_ratio);
        if let Some(a) = self.augment {
            cfg.augment = a;
        }
        set(&mut cfg.weight_decay, self.weight_decay);
        if let Some(c) = self.clip_norm {
            cfg.clip_norm = Some(c);
        }
        if let Some(l) = self.loss_cfg {
            cfg.loss_cfg = l;
        }
        if let Some(n) = self.max_steps {
            cfg.max_steps = Some(n);
        }
        if let Some(t) = self.target_train_mae_deg {
            cfg.target_train_mae_deg = Some(t);
        }
        if let Some(b) = &self.val_buckets_m {
            cfg.val_buckets_m = b.clone();
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn pinned(cfg: &StageConfig) -> StageSection {
        StageSection {
            trainable: Some(cfg.trainable.iter().map(|g| g.name().to_string()).collect()),
            loss: Some(cfg.loss),
            lr_head: Some(cfg.lr_head),
            decoder_lr_divisor: Some(cfg.decoder_lr_divisor),
            batch_size: Some(cfg.batch_size),
            epochs: Some(cfg.epochs),
            subset_ratio: Some(cfg.subset_ratio),
            augment: Some(cfg.augment),
            weight_decay: Some(cfg.weight_decay),
            clip_norm: cfg.clip_norm,
            loss_cfg: Some(cfg.loss_cfg),
            max_steps: cfg.max_steps,
            target_train_mae_deg: cfg.target_train_mae_deg,
            val_buckets_m: Some(cfg.val_buckets_m.clone()),
        }
    }
}

fn set<T: Copy>(slot: &mut T, value: Option<T>) {
    if let Some(v) = value {
        *slot = v;
    }
}
