//! Two-stage training orchestration. Stage A fits the adapters and the
//! matching head with the backbone frozen, under the iteration-weighted L1
//! objective. Stage B continues from a stage-A state, additionally unfreezes
//! the backbone decoder at a divided learning rate, and switches to the
//! scale-invariant logarithmic objective.
//!
//! Trainability is enforced structurally: frozen groups are bound to the
//! tape as constants, so they cannot receive gradients, and the optimizer
//! never touches them. Every run writes a rolling checkpoint at each epoch
//! end plus a JSON manifest of losses and validation metrics.

use std::fs;
use std::path::Path;
use std::time::Instant;

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{backward, Tape, Tensor};
use crate::checkpoint;
use crate::dataio::{load_pair, DatasetManifest, LoadedPair, SceneTag, Split};
use crate::error::{CoreError, Result};
use crate::geometry::CameraRig;
use crate::losses::{l1_loss, loss_stage_a, loss_stage_b, LossConfig};
use crate::metrics::{evaluate, EvalSample, MetricReport};
use crate::model::{ModelConfig, StereoModel};
use crate::nn::ParamGroup;
use crate::optim::{AdamW, OneCycle, OptimConfig};
use crate::synthdata::RenderedPair;

/// Checkpoint written before the first step of a run.
pub const CHECKPOINT_INIT: &str = "checkpoint_init.osck";
/// Rolling checkpoint overwritten at every epoch end.
pub const CHECKPOINT_LAST: &str = "checkpoint_last.osck";
/// Run manifest file name inside the run directory.
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    A,
    B,
}

impl std::fmt::Display for Stage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Stage::A => "A",
            Stage::B => "B",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum LossKind {
    #[serde(rename = "l1")]
    L1Based,
    #[serde(rename = "silog")]
    Silog,
}

impl std::str::FromStr for LossKind {
    type Err = CoreError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "l1" => Ok(LossKind::L1Based),
            "silog" => Ok(LossKind::Silog),
            other => Err(CoreError::config(format!(
                "unknown loss '{other}'; expected l1 or silog"
            ))),
        }
    }
}

/// Photometric jitter strengths; all zero means identity.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AugmentConfig {
    /// Maximum absolute shift added after contrast.
    pub brightness: f64,
    /// Contrast factor drawn from [1 - c, 1 + c], applied around mid-gray.
    pub contrast: f64,
    /// Gamma exponent drawn log-symmetrically from [1/(1+g), 1+g].
    pub gamma: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            brightness: 0.1,
            contrast: 0.2,
            gamma: 0.2,
        }
    }
}

impl AugmentConfig {
    pub fn zero() -> Self {
        AugmentConfig {
            brightness: 0.0,
            contrast: 0.0,
            gamma: 0.0,
        }
    }

    pub fn is_zero(&self) -> bool {
        self.brightness == 0.0 && self.contrast == 0.0 && self.gamma == 0.0
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("brightness", self.brightness),
            ("contrast", self.contrast),
            ("gamma", self.gamma),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(CoreError::config(format!(
                    "augment {name} strength must be finite and non-negative, got {v}"
                )));
            }
        }
        if self.contrast >= 1.0 {
            return Err(CoreError::config(
                "augment contrast strength must stay below 1 to keep the factor positive",
            ));
        }
        Ok(())
    }
}

/// Photometric jitter, identical for the top and bottom image so geometric
/// correspondence is preserved; ground truth passes through untouched.
/// Deterministic per (seed, index).
pub fn augment(pair: &LoadedPair, cfg: &AugmentConfig, seed: u64, index: u64) -> LoadedPair {
    if cfg.is_zero() {
        return pair.clone();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x616f_7467_6d65_6e74);
    rng.set_stream(index);
    let shift = rng.random_range(-cfg.brightness..=cfg.brightness);
    let factor = rng.random_range(1.0 - cfg.contrast..=1.0 + cfg.contrast);
    let exponent = (1.0 + cfg.gamma).powf(rng.random_range(-1.0..=1.0));

    let apply = |v: f64| ((v.powf(exponent) - 0.5) * factor + 0.5 + shift).clamp(0.0, 1.0);
    let mut out = pair.clone();
    out.image_top.mapv_inplace(apply);
    out.image_bottom.mapv_inplace(apply);
    out
}

/// Deterministic uniform sample without replacement of ⌈ratio * n⌉ indices,
/// returned in ascending order.
pub fn subset_sample(n: usize, ratio: f64, seed: u64) -> Result<Vec<usize>> {
    if !(ratio > 0.0 && ratio <= 1.0) {
        return Err(CoreError::config(format!(
            "sampling ratio must lie in (0, 1], got {ratio}"
        )));
    }
    if n == 0 {
        return Err(CoreError::data("cannot sample from an empty dataset"));
    }
    let k = (ratio * n as f64).ceil() as usize;
    let mut idx: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for i in 0..k {
        let j = rng.random_range(i..n);
        idx.swap(i, j);
    }
    idx.truncate(k);
    idx.sort_unstable();
    Ok(idx)
}

/// Everything one stage needs: what trains, which objective, and the
/// optimization schedule.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageConfig {
    pub stage: Stage,
    pub trainable: Vec<ParamGroup>,
    pub loss: LossKind,
    pub lr_head: f64,
    /// The backbone decoder trains at lr_head / this factor.
    pub decoder_lr_divisor: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    /// Fraction of the training split actually used, sampled once per run.
    pub subset_ratio: f64,
    pub augment: AugmentConfig,
    pub weight_decay: f64,
    pub clip_norm: Option<f64>,
    pub loss_cfg: LossConfig,
    /// Hard stop after this many optimizer steps; the LR schedule still
    /// spans the full planned epochs.
    pub max_steps: Option<usize>,
    /// Stop once an epoch's mean final-iterate error drops below this.
    pub target_train_mae_deg: Option<f64>,
    /// Depth intervals for the per-epoch validation breakdown.
    pub val_buckets_m: Vec<(f64, f64)>,
}

impl StageConfig {
    /// Head-only training under the iteration-weighted L1 objective.
    pub fn stage_a(seed: u64) -> StageConfig {
        StageConfig {
            stage: Stage::A,
            trainable: vec![ParamGroup::Adapters, ParamGroup::Matcher],
            loss: LossKind::L1Based,
            lr_head: 2e-4,
            decoder_lr_divisor: 50.0,
            batch_size: 2,
            epochs: 20,
            seed,
            subset_ratio: 1.0,
            augment: AugmentConfig::default(),
            weight_decay: 1e-5,
            clip_norm: Some(1.0),
            loss_cfg: LossConfig::default(),
            max_steps: None,
            target_train_mae_deg: None,
            val_buckets_m: Vec::new(),
        }
    }

    /// Decoder fine-tuning under the scale-invariant logarithmic objective.
    pub fn stage_b(seed: u64) -> StageConfig {
        StageConfig {
            stage: Stage::B,
            trainable: vec![
                ParamGroup::BackboneDecoder,
                ParamGroup::Adapters,
                ParamGroup::Matcher,
            ],
            loss: LossKind::Silog,
            lr_head: 2e-5,
            batch_size: 1,
            epochs: 12,
            ..StageConfig::stage_a(seed)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.trainable.is_empty() {
            return Err(CoreError::config("no trainable parameter groups"));
        }
        if !(self.lr_head > 0.0 && self.lr_head.is_finite()) {
            return Err(CoreError::config("learning rate must be positive"));
        }
        if !(self.decoder_lr_divisor > 0.0 && self.decoder_lr_divisor.is_finite()) {
            return Err(CoreError::config("decoder LR divisor must be positive"));
        }
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(CoreError::config("batch size and epochs must be at least 1"));
        }
        if !(self.subset_ratio > 0.0 && self.subset_ratio <= 1.0) {
            return Err(CoreError::config("subset ratio must lie in (0, 1]"));
        }
        if self.max_steps == Some(0) {
            return Err(CoreError::config("max_steps must be at least 1 when set"));
        }
        if let Some(t) = self.target_train_mae_deg {
            if !(t > 0.0) {
                return Err(CoreError::config("target train error must be positive"));
            }
        }
        self.augment.validate()?;
        self.loss_cfg.validate()
    }
}

/// Parses a `+`-joined list of trainable components. Accepts the component
/// aliases `head` (adapters plus matcher), `decoder`, and `encoder`, as well
/// as plain parameter-group names, and deduplicates.
pub fn parse_groups(spec: &str) -> Result<Vec<ParamGroup>> {
    let mut out = Vec::new();
    for token in spec.split('+') {
        let single;
        let add: &[ParamGroup] = match token.trim() {
            "head" => &[ParamGroup::Adapters, ParamGroup::Matcher],
            "decoder" => &[ParamGroup::BackboneDecoder],
            "encoder" => &[ParamGroup::BackboneEncoder],
            other => {
                single = [ParamGroup::parse(other).map_err(|_| {
                    CoreError::config(format!(
                        "unknown component '{other}'; expected head, decoder, encoder, \
                         or a parameter-group name"
                    ))
                })?];
                &single
            }
        };
        for g in add {
            if !out.contains(g) {
                out.push(*g);
            }
        }
    }
    Ok(out)
}

/// Applies `key=value` overrides to the two stage defaults. Keys:
/// `stage_a` / `stage_b` set the trainable sets (`head`, `decoder+head`,
/// `encoder+decoder+head`); `stage_a_loss` / `stage_b_loss` swap objectives
/// (`l1`, `silog`); `stage_a_lr` / `stage_b_lr` override the head rate.
pub fn ablate<S: AsRef<str>>(seed: u64, deltas: &[S]) -> Result<(StageConfig, StageConfig)> {
    let mut a = StageConfig::stage_a(seed);
    let mut b = StageConfig::stage_b(seed);
    for delta in deltas {
        let delta = delta.as_ref();
        let (key, value) = delta.split_once('=').ok_or_else(|| {
            CoreError::config(format!("ablation delta '{delta}' is not key=value"))
        })?;
        let value = value.trim();
        match key.trim() {
            "stage_a" => a.trainable = parse_groups(value)?,
            "stage_b" => b.trainable = parse_groups(value)?,
            "stage_a_loss" => a.loss = value.parse()?,
            "stage_b_loss" => b.loss = value.parse()?,
            "stage_a_lr" => a.lr_head = parse_rate(value)?,
            "stage_b_lr" => b.lr_head = parse_rate(value)?,
            other => {
                return Err(CoreError::config(format!(
                    "unknown ablation key '{other}'"
                )))
            }
        }
    }
    a.validate()?;
    b.validate()?;
    Ok((a, b))
}

fn parse_rate(s: &str) -> Result<f64> {
    let v: f64 = s
        .parse()
        .map_err(|_| CoreError::config(format!("'{s}' is not a number")))?;
    if !(v > 0.0 && v.is_finite()) {
        return Err(CoreError::config("learning rate must be positive"));
    }
    Ok(v)
}

/// In-memory training corpus: decoded pairs plus a content fingerprint that
/// identifies the data in run manifests.
pub struct TrainData {
    pub rig: CameraRig,
    pub train: Vec<LoadedPair>,
    pub val: Vec<LoadedPair>,
    pub fingerprint: String,
}

impl TrainData {
    /// Loads the train split and, when present, the val split of a dataset
    /// directory.
    pub fn load(root: &Path) -> Result<TrainData> {
        let tm = DatasetManifest::load(root, Split::Train)?;
        let fingerprint = tm.fingerprint(root)?;
        let train = (0..tm.len())
            .map(|i| load_pair(root, &tm, i))
            .collect::<Result<Vec<_>>>()?;
        let val_manifest = DatasetManifest::split_dir(root, Split::Val).join("manifest.json");
        let val = if val_manifest.is_file() {
            let vm = DatasetManifest::load(root, Split::Val)?;
            if vm.rig != tm.rig {
                return Err(CoreError::data(
                    "train and val splits were rendered for different rigs",
                ));
            }
            (0..vm.len())
                .map(|i| load_pair(root, &vm, i))
                .collect::<Result<Vec<_>>>()?
        } else {
            Vec::new()
        };
        Ok(TrainData {
            rig: tm.rig,
            train,
            val,
            fingerprint,
        })
    }

    pub fn from_pairs(rig: CameraRig, train: Vec<LoadedPair>, val: Vec<LoadedPair>) -> TrainData {
        let fingerprint = content_fingerprint(&train, &val);
        TrainData {
            rig,
            train,
            val,
            fingerprint,
        }
    }
}

/// Training view of a rendered pair: the dense analytic disparity serves as
/// both the sparse and the completed channel.
pub fn rendered_to_pair(p: &RenderedPair) -> LoadedPair {
    LoadedPair {
        image_top: p.image_top.clone(),
        image_bottom: p.image_bottom.clone(),
        gt_sparse: p.disparity.clone(),
        gt_complete: p.disparity.clone(),
        tag: SceneTag::Synthetic,
    }
}

fn content_fingerprint(train: &[LoadedPair], val: &[LoadedPair]) -> String {
    use sha2::{Digest, Sha256};
    let mut hasher = Sha256::new();
    for (label, pairs) in [("train", train), ("val", val)] {
        hasher.update(label.as_bytes());
        hasher.update((pairs.len() as u64).to_le_bytes());
        for p in pairs {
            for img in [&p.image_top, &p.image_bottom] {
                for d in img.shape() {
                    hasher.update((*d as u64).to_le_bytes());
                }
                for v in img.iter() {
                    hasher.update(v.to_le_bytes());
                }
            }
            for gt in [&p.gt_sparse, &p.gt_complete] {
                for v in gt.values.iter() {
                    hasher.update(v.to_le_bytes());
                }
                for &m in gt.valid.iter() {
                    hasher.update([m as u8]);
                }
            }
        }
    }
    let digest = hasher.finalize();
    let mut hex = String::with_capacity(digest.len() * 2);
    for b in digest {
        hex.push_str(&format!("{b:02x}"));
    }
    hex
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EpochRecord {
    /// 1-based epoch number within the stage.
    pub epoch: usize,
    /// Mean batch loss over the epoch's steps.
    pub train_loss: f64,
    /// Mean final-iterate masked L1 over the epoch's samples, in degrees.
    pub train_mae_deg: f64,
    pub val: Option<MetricReport>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunManifest {
    pub config: StageConfig,
    pub dataset_fingerprint: String,
    /// Training-split indices actually used after subset sampling.
    pub train_indices: Vec<usize>,
    pub epochs: Vec<EpochRecord>,
    /// Optimizer steps at run end, cumulative across resumed runs.
    pub steps_taken: usize,
    /// True when the step cap or the train-error target ended the run early.
    pub stopped_early: bool,
    /// Reason the run aborted, if it did; the last written checkpoint is the
    /// last good state.
    pub aborted: Option<String>,
    pub checkpoint_init: String,
    pub checkpoint_last: Option<String>,
    pub wall_clock_sec: f64,
}

impl RunManifest {
    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_vec_pretty(self).expect("manifest serializes");
        fs::write(path, text).map_err(|e| CoreError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<RunManifest> {
        let text = fs::read(path).map_err(|e| CoreError::io(path, e))?;
        serde_json::from_slice(&text)
            .map_err(|e| CoreError::data(format!("malformed run manifest {}: {e}", path.display())))
    }
}

/// Optimizer for one stage: decoupled weight decay, gradient clipping, a
/// one-cycle schedule over the planned steps, and the decoder rate divided
/// down per config.
pub fn stage_optimizer(cfg: &StageConfig, n_params: usize, total_steps: usize) -> AdamW {
    let opt_cfg = OptimConfig {
        lr: cfg.lr_head,
        weight_decay: cfg.weight_decay,
        clip_norm: cfg.clip_norm,
        group_scale: vec![(ParamGroup::BackboneDecoder, 1.0 / cfg.decoder_lr_divisor)],
        ..OptimConfig::default()
    };
    AdamW::new(opt_cfg, OneCycle::new(total_steps), n_params)
}

/// Writes parameters, optimizer state, and metadata; the file appears
/// atomically via a rename.
pub fn save_checkpoint(
    path: &Path,
    model: &StereoModel,
    optim: Option<&AdamW>,
    meta: &serde_json::Value,
) -> Result<()> {
    let params = model.store().snapshot();
    let snap = optim.map(|o| o.snapshot());
    let tmp = path.with_extension("tmp");
    checkpoint::save(&tmp, &params, snap.as_ref(), meta)?;
    fs::rename(&tmp, path).map_err(|e| CoreError::io(path, e))
}

/// Restores every model parameter (all must match) and, when requested, the
/// optimizer moments and step counter. Returns the checkpoint metadata.
pub fn restore_checkpoint(
    path: &Path,
    model: &StereoModel,
    optim: Option<&mut AdamW>,
) -> Result<serde_json::Value> {
    let ck = checkpoint::load(path)?;
    let loaded = model.store().load_matching(&ck.params)?;
    if loaded != model.store().len() {
        return Err(CoreError::config(format!(
            "checkpoint {} covers {loaded} of {} model parameters; architecture mismatch",
            path.display(),
            model.store().len()
        )));
    }
    if let Some(opt) = optim {
        let (step, moments) = ck
            .optim
            .ok_or_else(|| CoreError::config("checkpoint has no optimizer state to resume from"))?;
        opt.restore(step, moments)?;
    }
    Ok(ck.meta)
}

/// Predicts every pair and pools the standard metric report: pixel metrics
/// against the sparse ground truth, border consistency against the completed
/// one.
pub fn validate_split(
    model: &StereoModel,
    rig: &CameraRig,
    pairs: &[LoadedPair],
    buckets_m: &[(f64, f64)],
) -> Result<MetricReport> {
    let pad = model.config().matcher.pad_cols_eval;
    let samples = pairs
        .iter()
        .map(|p| {
            let pred = model.predict(rig, &p.image_top, &p.image_bottom, pad)?;
            Ok(EvalSample {
                pred_disp_deg: pred,
                gt_disp_sparse: p.gt_sparse.clone(),
                gt_disp_complete: p.gt_complete.clone(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    evaluate(rig, &samples, buckets_m)
}

/// Checkpoint metadata carries the model configuration and rig so a file is
/// enough to rebuild and run the network it was saved from.
fn checkpoint_meta(
    model: &StereoModel,
    rig: &CameraRig,
    stage: Stage,
    epochs_done: usize,
    steps_done: usize,
) -> serde_json::Value {
    serde_json::json!({
        "stage": stage,
        "epochs_done": epochs_done,
        "steps_done": steps_done,
        "model": model.config(),
        "rig": rig,
    })
}

/// Rebuilds the model a checkpoint was saved from: architecture and rig from
/// the embedded metadata, every parameter from the stored tensors.
pub fn load_model_checkpoint(path: &Path) -> Result<(StereoModel, CameraRig, serde_json::Value)> {
    let ck = checkpoint::load(path)?;
    let model_cfg: ModelConfig = serde_json::from_value(ck.meta["model"].clone())
        .map_err(|e| CoreError::data(format!("checkpoint lacks a model description: {e}")))?;
    let rig: CameraRig = serde_json::from_value(ck.meta["rig"].clone())
        .map_err(|e| CoreError::data(format!("checkpoint lacks a rig description: {e}")))?;
    let model = StereoModel::new(0, model_cfg)?;
    let loaded = model.store().load_matching(&ck.params)?;
    if loaded != model.store().len() {
        return Err(CoreError::config(format!(
            "checkpoint {} covers {loaded} of {} model parameters; architecture mismatch",
            path.display(),
            model.store().len()
        )));
    }
    Ok((model, rig, ck.meta))
}

/// Runs one stage. Only parameters in `cfg.trainable` can change; everything
/// else is bit-identical afterwards. `resume` continues an interrupted run
/// of the same stage, restoring parameters, optimizer state, and the epoch
/// counter. A non-finite loss aborts the run with an error after writing the
/// manifest; the run directory keeps the last good checkpoint.
pub fn train_stage(
    model: &StereoModel,
    data: &TrainData,
    cfg: &StageConfig,
    run_dir: &Path,
    resume: Option<&Path>,
) -> Result<RunManifest> {
    cfg.validate()?;
    fs::create_dir_all(run_dir).map_err(|e| CoreError::io(run_dir, e))?;
    let manifest_path = run_dir.join(MANIFEST_FILE);
    let start = Instant::now();

    let indices = subset_sample(data.train.len(), cfg.subset_ratio, cfg.seed)?;
    let steps_per_epoch = indices.len().div_ceil(cfg.batch_size);
    let planned_steps = cfg.epochs * steps_per_epoch;
    let mut opt = stage_optimizer(cfg, model.store().len(), planned_steps);

    let start_epoch = match resume {
        None => 0,
        Some(path) => {
            let meta = restore_checkpoint(path, model, Some(&mut opt))?;
            let stage = meta.get("stage").cloned().unwrap_or(serde_json::Value::Null);
            if stage != serde_json::to_value(cfg.stage).expect("stage serializes") {
                return Err(CoreError::config(format!(
                    "checkpoint {} was written by stage {stage}, not stage {}; to warm-start \
                     a new stage restore parameters only",
                    path.display(),
                    cfg.stage
                )));
            }
            let done = meta
                .get("epochs_done")
                .and_then(|v| v.as_u64())
                .ok_or_else(|| CoreError::config("resume checkpoint lacks an epoch counter"))?
                as usize;
            if done >= cfg.epochs {
                return Err(CoreError::config(format!(
                    "checkpoint already trained {done} epochs, config plans {}",
                    cfg.epochs
                )));
            }
            done
        }
    };

    save_checkpoint(
        &run_dir.join(CHECKPOINT_INIT),
        model,
        Some(&opt),
        &checkpoint_meta(model, &data.rig, cfg.stage, start_epoch, opt.step_count()),
    )?;

    let mut manifest = RunManifest {
        config: cfg.clone(),
        dataset_fingerprint: data.fingerprint.clone(),
        train_indices: indices.clone(),
        epochs: Vec::new(),
        steps_taken: opt.step_count(),
        stopped_early: false,
        aborted: None,
        checkpoint_init: CHECKPOINT_INIT.to_string(),
        checkpoint_last: None,
        wall_clock_sec: 0.0,
    };

    let iters = model.config().matcher.iters_train;
    'epochs: for epoch in start_epoch..cfg.epochs {
        let mut order = indices.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(1 + epoch as u64);
        order.shuffle(&mut rng);

        let mut loss_sum = 0.0;
        let mut mae_sum = 0.0;
        let mut n_steps = 0usize;
        let mut n_samples = 0usize;

        for batch in order.chunks(cfg.batch_size) {
            if let Some(cap) = cfg.max_steps {
                if opt.step_count() >= cap {
                    manifest.stopped_early = true;
                    if n_steps == 0 {
                        break 'epochs;
                    }
                    break;
                }
            }
            let tape = Tape::new();
            model.store().begin(&tape, &cfg.trainable);
            let built = (|| {
                let mut acc: Option<Tensor> = None;
                let mut mae = 0.0;
                for &i in batch {
                    let sample_index = (epoch * data.train.len() + i) as u64;
                    let pair = augment(&data.train[i], &cfg.augment, cfg.seed, sample_index);
                    let top = Tensor::constant(pair.image_top.into_dyn());
                    let bottom = Tensor::constant(pair.image_bottom.into_dyn());
                    let seq = model.forward(&data.rig, &top, &bottom, iters)?;
                    let gt = pair.gt_complete.values.into_dyn();
                    let mask = pair.gt_complete.valid;
                    mae += l1_loss(seq.final_map(), &gt, &mask)?.item();
                    let sample_loss = match cfg.loss {
                        LossKind::L1Based => loss_stage_a(&seq.steps, &gt, &mask, &cfg.loss_cfg)?,
                        LossKind::Silog => loss_stage_b(&seq.steps, &gt, &mask, &cfg.loss_cfg)?,
                    };
                    acc = Some(match acc {
                        None => sample_loss,
                        Some(t) => t.add(&sample_loss),
                    });
                }
                Ok((acc.expect("batches are non-empty"), mae))
            })();
            let abort = |manifest: &mut RunManifest, reason: String| -> CoreError {
                model.store().end();
                manifest.aborted = Some(reason.clone());
                manifest.steps_taken = opt.step_count();
                manifest.wall_clock_sec = start.elapsed().as_secs_f64();
                if let Err(e) = manifest.save(&manifest_path) {
                    return e;
                }
                CoreError::numeric(format!(
                    "training diverged: {reason}; last good state is in {}",
                    run_dir.display()
                ))
            };
            let (loss_total, mae_batch) = match built {
                Ok(v) => v,
                // Divergence surfacing inside the forward pass gets the same
                // abort-and-retain treatment as a non-finite loss.
                Err(CoreError::Numeric(msg)) => {
                    let reason = format!("{msg} at step {}", opt.step_count() + 1);
                    return Err(abort(&mut manifest, reason));
                }
                Err(e) => {
                    model.store().end();
                    return Err(e);
                }
            };
            let loss = loss_total.mul_scalar(1.0 / batch.len() as f64);
            let loss_value = loss.item();
            if !loss_value.is_finite() {
                let reason = format!("non-finite training loss at step {}", opt.step_count() + 1);
                return Err(abort(&mut manifest, reason));
            }
            let mut grads = backward(&loss);
            opt.step(model.store(), &mut grads);
            model.store().end();

            loss_sum += loss_value;
            mae_sum += mae_batch;
            n_steps += 1;
            n_samples += batch.len();
        }

        let train_mae = mae_sum / n_samples as f64;
        save_checkpoint(
            &run_dir.join(CHECKPOINT_LAST),
            model,
            Some(&opt),
            &checkpoint_meta(model, &data.rig, cfg.stage, epoch + 1, opt.step_count()),
        )?;
        manifest.checkpoint_last = Some(CHECKPOINT_LAST.to_string());
        let val = if data.val.is_empty() {
            None
        } else {
            Some(validate_split(model, &data.rig, &data.val, &cfg.val_buckets_m)?)
        };
        manifest.epochs.push(EpochRecord {
            epoch: epoch + 1,
            train_loss: loss_sum / n_steps as f64,
            train_mae_deg: train_mae,
            val,
        });
        manifest.steps_taken = opt.step_count();
        manifest.wall_clock_sec = start.elapsed().as_secs_f64();
        manifest.save(&manifest_path)?;

        if let Some(target) = cfg.target_train_mae_deg {
            if train_mae < target {
                manifest.stopped_early = true;
                break;
            }
        }
        if manifest.stopped_early {
            break;
        }
    }

    manifest.wall_clock_sec = start.elapsed().as_secs_f64();
    manifest.save(&manifest_path)?;
    Ok(manifest)
}

/// Convenience for warm-starting stage B: restores parameters from a stage-A
/// checkpoint without touching optimizer state.
pub fn warm_start(model: &StereoModel, checkpoint_path: &Path) -> Result<()> {
    restore_checkpoint(checkpoint_path, model, None).map(|_| ())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ModelConfig, StereoModel};
    use crate::synthdata::{make_random_scene_for, render, Difficulty};
    use std::f64::consts::PI;

    fn rig() -> CameraRig {
        CameraRig::new(0.3, 32, 64).unwrap()
    }

    fn pairs(r: &CameraRig, seeds: std::ops::Range<u64>) -> Vec<LoadedPair> {
        seeds
            .map(|s| {
                let scene = make_random_scene_for(s, Difficulty::Easy, r.height_px, PI);
                rendered_to_pair(&render(&scene, r).unwrap())
            })
            .collect()
    }

    fn small_model(r: &CameraRig) -> StereoModel {
        let mut cfg = ModelConfig::for_rig(r, 32).unwrap();
        cfg.matcher.iters_train = 1;
        cfg.matcher.iters_eval = 2;
        cfg.matcher.pad_cols_eval = 8;
        StereoModel::new(11, cfg).unwrap()
    }

    fn tiny_cfg(stage: Stage, epochs: usize, batch: usize) -> StageConfig {
        let mut cfg = match stage {
            Stage::A => StageConfig::stage_a(3),
            Stage::B => StageConfig::stage_b(3),
        };
        cfg.epochs = epochs;
        cfg.batch_size = batch;
        cfg
    }

    fn changed_groups(
        before: &[(String, ParamGroup, crate::autograd::Data)],
        after: &[(String, ParamGroup, crate::autograd::Data)],
    ) -> Vec<ParamGroup> {
        let mut out = Vec::new();
        for ((_, g, a), (_, _, b)) in before.iter().zip(after) {
            if a != b && !out.contains(g) {
                out.push(*g);
            }
        }
        out
    }

    #[test]
    fn stage_defaults_match_training_contract() {
        let a = StageConfig::stage_a(0);
        assert_eq!(a.trainable, vec![ParamGroup::Adapters, ParamGroup::Matcher]);
        assert_eq!(a.loss, LossKind::L1Based);
        assert_eq!(a.lr_head, 2e-4);
        assert_eq!((a.batch_size, a.epochs), (2, 20));
        a.validate().unwrap();

        let b = StageConfig::stage_b(0);
        assert_eq!(
            b.trainable,
            vec![
                ParamGroup::BackboneDecoder,
                ParamGroup::Adapters,
                ParamGroup::Matcher
            ]
        );
        assert_eq!(b.loss, LossKind::Silog);
        assert_eq!(b.lr_head, 2e-5);
        assert_eq!((b.batch_size, b.epochs), (1, 12));
        assert_eq!(b.decoder_lr_divisor, 50.0);
        b.validate().unwrap();

        let mut bad = StageConfig::stage_a(0);
        bad.decoder_lr_divisor = 0.0;
        assert!(bad.validate().is_err());
    }

    #[test]
    fn augmentation_is_deterministic_photometric_and_aligned() {
        let r = rig();
        let mut pair = pairs(&r, 0..1).remove(0);
        pair.image_bottom = pair.image_top.clone();
        let cfg = AugmentConfig::default();

        let a = augment(&pair, &cfg, 9, 4);
        let b = augment(&pair, &cfg, 9, 4);
        assert_eq!(a.image_top, b.image_top);
        assert_eq!(a.image_bottom, b.image_bottom);
        // Same transform on both views.
        assert_eq!(a.image_top, a.image_bottom);
        // Ground truth untouched, bit for bit.
        assert_eq!(a.gt_complete.values, pair.gt_complete.values);
        assert_eq!(a.gt_complete.valid, pair.gt_complete.valid);
        assert_eq!(a.gt_sparse.values, pair.gt_sparse.values);
        // Another index gives another jitter.
        let c = augment(&pair, &cfg, 9, 5);
        assert_ne!(a.image_top, c.image_top);
        // Zero strength is the identity.
        let id = augment(&pair, &AugmentConfig::zero(), 9, 4);
        assert_eq!(id.image_top, pair.image_top);
        assert_eq!(id.image_bottom, pair.image_bottom);

        let mut bad = AugmentConfig::default();
        bad.contrast = 1.0;
        assert!(bad.validate().is_err());
    }

    #[test]
    fn subset_sampling_is_deterministic_and_correctly_sized() {
        assert_eq!(subset_sample(7, 1.0, 0).unwrap(), (0..7).collect::<Vec<_>>());
        let s = subset_sample(100, 0.05, 42).unwrap();
        assert_eq!(s.len(), 5);
        assert!(s.windows(2).all(|w| w[0] < w[1]));
        assert!(s.iter().all(|&i| i < 100));
        assert_eq!(s, subset_sample(100, 0.05, 42).unwrap());
        assert_ne!(s, subset_sample(100, 0.05, 43).unwrap());
        // Ceiling size.
        assert_eq!(subset_sample(10, 0.33, 0).unwrap().len(), 4);
        assert!(subset_sample(10, 0.0, 0).is_err());
        assert!(subset_sample(10, 1.5, 0).is_err());
        assert!(subset_sample(0, 1.0, 0).is_err());
    }

    #[test]
    fn ablation_deltas_produce_the_documented_variants() {
        let (a, b) = ablate::<&str>(0, &[]).unwrap();
        assert_eq!(a.trainable, StageConfig::stage_a(0).trainable);
        assert_eq!(b.loss, LossKind::Silog);

        let (a, _) = ablate(0, &["stage_a=decoder+head"]).unwrap();
        assert!(a.trainable.contains(&ParamGroup::BackboneDecoder));
        assert!(a.trainable.contains(&ParamGroup::Matcher));

        let (_, b) = ablate(0, &["stage_b=encoder+decoder+head"]).unwrap();
        assert!(b.trainable.contains(&ParamGroup::BackboneEncoder));

        let (a, b) = ablate(0, &["stage_a_loss=silog", "stage_b_loss=l1"]).unwrap();
        assert_eq!(a.loss, LossKind::Silog);
        assert_eq!(b.loss, LossKind::L1Based);

        let (a, _) = ablate(0, &["stage_a=decoder+head", "stage_a_lr=1e-5"]).unwrap();
        assert_eq!(a.lr_head, 1e-5);

        assert!(ablate(0, &["stage_a=lidar"]).is_err());
        assert!(ablate(0, &["stage_c=head"]).is_err());
        assert!(ablate(0, &["stage_a_lr=-3"]).is_err());
        assert!(ablate(0, &["nonsense"]).is_err());
    }

    #[test]
    fn decoder_rate_is_head_rate_over_divisor() {
        let cfg = StageConfig::stage_b(0);
        let opt = stage_optimizer(&cfg, 4, 100);
        let head = opt.effective_lr(ParamGroup::Matcher);
        let decoder = opt.effective_lr(ParamGroup::BackboneDecoder);
        assert!(head > 0.0);
        assert!(
            (decoder - head / cfg.decoder_lr_divisor).abs() <= 1e-15 * head,
            "decoder {decoder} vs head {head}"
        );
    }

    #[test]
    fn stage_a_trains_head_only_and_records_epochs() {
        let r = rig();
        let model = small_model(&r);
        let data = TrainData::from_pairs(r.clone(), pairs(&r, 0..4), Vec::new());
        let mut cfg = tiny_cfg(Stage::A, 2, 2);
        cfg.augment = AugmentConfig::zero();
        let tmp = tempfile::tempdir().unwrap();

        let before = model.store().snapshot();
        let manifest = train_stage(&model, &data, &cfg, tmp.path(), None).unwrap();
        let after = model.store().snapshot();

        let changed = changed_groups(&before, &after);
        assert!(!changed.contains(&ParamGroup::BackboneEncoder));
        assert!(!changed.contains(&ParamGroup::BackboneDecoder));
        assert!(changed.contains(&ParamGroup::Adapters));
        assert!(changed.contains(&ParamGroup::Matcher));

        assert_eq!(manifest.epochs.len(), 2);
        assert_eq!(manifest.steps_taken, 4);
        assert_eq!(manifest.train_indices, vec![0, 1, 2, 3]);
        assert!(manifest.epochs.iter().all(|e| e.train_loss.is_finite()));
        assert!(tmp.path().join(CHECKPOINT_INIT).is_file());
        assert!(tmp.path().join(CHECKPOINT_LAST).is_file());
        assert!(tmp.path().join(MANIFEST_FILE).is_file());
        let reloaded = RunManifest::load(&tmp.path().join(MANIFEST_FILE)).unwrap();
        assert_eq!(reloaded.steps_taken, 4);
        assert_eq!(reloaded.dataset_fingerprint, data.fingerprint);
    }

    #[test]
    fn stage_b_unfreezes_decoder_but_not_encoder_and_validates() {
        let r = rig();
        let model = small_model(&r);
        let data = TrainData::from_pairs(r.clone(), pairs(&r, 0..2), pairs(&r, 10..11));
        let mut stage_a = tiny_cfg(Stage::A, 1, 2);
        stage_a.augment = AugmentConfig::zero();
        let tmp_a = tempfile::tempdir().unwrap();
        train_stage(&model, &data, &stage_a, tmp_a.path(), None).unwrap();

        let before = model.store().snapshot();
        let mut stage_b = tiny_cfg(Stage::B, 1, 1);
        stage_b.augment = AugmentConfig::zero();
        let tmp_b = tempfile::tempdir().unwrap();
        let manifest = train_stage(&model, &data, &stage_b, tmp_b.path(), None).unwrap();
        let after = model.store().snapshot();

        let changed = changed_groups(&before, &after);
        assert!(!changed.contains(&ParamGroup::BackboneEncoder));
        assert!(changed.contains(&ParamGroup::BackboneDecoder));
        assert!(changed.contains(&ParamGroup::Matcher));

        let report = manifest.epochs[0].val.as_ref().unwrap();
        assert_eq!(report.n_images, 1);
        assert!(report.disparity.mae.is_finite());
    }

    #[test]
    fn identical_runs_reproduce_the_loss_curve_bitwise() {
        let r = rig();
        let data = TrainData::from_pairs(r.clone(), pairs(&r, 0..3), Vec::new());
        let cfg = tiny_cfg(Stage::A, 2, 2);
        let run = || {
            let model = small_model(&r);
            let tmp = tempfile::tempdir().unwrap();
            train_stage(&model, &data, &cfg, tmp.path(), None).unwrap()
        };
        let m1 = run();
        let m2 = run();
        for (a, b) in m1.epochs.iter().zip(&m2.epochs) {
            assert_eq!(a.train_loss.to_bits(), b.train_loss.to_bits());
            assert_eq!(a.train_mae_deg.to_bits(), b.train_mae_deg.to_bits());
        }
    }

    #[test]
    fn non_finite_loss_aborts_and_keeps_the_initial_checkpoint() {
        let r = rig();
        let model = small_model(&r);
        let mut poisoned = pairs(&r, 0..1);
        poisoned[0].image_top[[0, 5, 5]] = f64::NAN;
        let data = TrainData::from_pairs(r.clone(), poisoned, Vec::new());
        let cfg = tiny_cfg(Stage::A, 1, 1);
        let tmp = tempfile::tempdir().unwrap();

        let before = model.store().snapshot();
        let err = train_stage(&model, &data, &cfg, tmp.path(), None).unwrap_err();
        assert!(format!("{err}").contains("non-finite"));

        let manifest = RunManifest::load(&tmp.path().join(MANIFEST_FILE)).unwrap();
        assert!(manifest.aborted.is_some());
        assert_eq!(manifest.steps_taken, 0);

        // The retained checkpoint restores the pre-run state exactly.
        restore_checkpoint(&tmp.path().join(CHECKPOINT_INIT), &model, None).unwrap();
        let restored = model.store().snapshot();
        assert!(changed_groups(&before, &restored).is_empty());
    }

    #[test]
    fn checkpoint_roundtrip_restores_run_state_and_rejects_other_shapes() {
        let r = rig();
        let model = small_model(&r);
        let data = TrainData::from_pairs(r.clone(), pairs(&r, 0..2), Vec::new());
        let cfg = tiny_cfg(Stage::A, 1, 2);
        let tmp = tempfile::tempdir().unwrap();
        train_stage(&model, &data, &cfg, tmp.path(), None).unwrap();
        let path = tmp.path().join(CHECKPOINT_LAST);

        let twin = small_model(&r);
        let mut twin_opt = stage_optimizer(&cfg, twin.store().len(), 10);
        let meta = restore_checkpoint(&path, &twin, Some(&mut twin_opt)).unwrap();
        assert_eq!(meta["epochs_done"], serde_json::json!(1));
        assert_eq!(twin_opt.step_count(), 1);
        let a = model.store().snapshot();
        let b = twin.store().snapshot();
        assert!(changed_groups(&a, &b).is_empty());

        // A model with different layer shapes cannot absorb this checkpoint.
        let mut other_cfg = ModelConfig::for_rig(&r, 32).unwrap();
        other_cfg.matcher.hidden_channels = 16;
        let other = StereoModel::new(11, other_cfg).unwrap();
        assert!(restore_checkpoint(&path, &other, None).is_err());

        // The file alone describes the architecture and rig.
        let (rebuilt, loaded_rig, _) = load_model_checkpoint(&path).unwrap();
        assert_eq!(loaded_rig, r);
        assert!(changed_groups(&a, &rebuilt.store().snapshot()).is_empty());
    }

    #[test]
    fn resuming_matches_an_uninterrupted_run_bitwise() {
        let r = rig();
        let data = TrainData::from_pairs(r.clone(), pairs(&r, 0..2), Vec::new());

        let mut full_cfg = tiny_cfg(Stage::A, 3, 2);
        full_cfg.augment = AugmentConfig::zero();
        let full_model = small_model(&r);
        let tmp_full = tempfile::tempdir().unwrap();
        let full = train_stage(&full_model, &data, &full_cfg, tmp_full.path(), None).unwrap();
        assert_eq!(full.epochs.len(), 3);

        // Same plan, stopped after the first epoch's single step.
        let mut part_cfg = full_cfg.clone();
        part_cfg.max_steps = Some(1);
        let model = small_model(&r);
        let tmp1 = tempfile::tempdir().unwrap();
        let part1 = train_stage(&model, &data, &part_cfg, tmp1.path(), None).unwrap();
        assert_eq!(part1.epochs.len(), 1);
        assert!(part1.stopped_early);

        let tmp2 = tempfile::tempdir().unwrap();
        let part2 = train_stage(
            &model,
            &data,
            &full_cfg,
            tmp2.path(),
            Some(&tmp1.path().join(CHECKPOINT_LAST)),
        )
        .unwrap();
        assert_eq!(part2.epochs.len(), 2);
        assert_eq!(part2.epochs[0].epoch, 2);
        assert_eq!(part2.steps_taken, 3);

        let curve: Vec<f64> = part1
            .epochs
            .iter()
            .chain(&part2.epochs)
            .map(|e| e.train_loss)
            .collect();
        for (a, b) in full.epochs.iter().zip(curve) {
            assert_eq!(a.train_loss.to_bits(), b.to_bits());
        }

        // Stage mismatch on resume is refused.
        let mut wrong = tiny_cfg(Stage::B, 3, 2);
        wrong.augment = AugmentConfig::zero();
        let err = train_stage(
            &model,
            &data,
            &wrong,
            tmp2.path(),
            Some(&tmp1.path().join(CHECKPOINT_LAST)),
        );
        assert!(err.is_err());
    }
}
