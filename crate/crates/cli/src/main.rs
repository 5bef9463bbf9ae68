//! Command-line front end: synthesize datasets, train the two-stage stereo
//! system, evaluate checkpoints, predict disparity for an image pair, and
//! render disparity files as false color.

mod config;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use omnistereo_core::dataio::{
    load_disparity, load_pair, load_rgb, save_disparity, save_rgb, DatasetManifest,
    DisparityEncoding, Split,
};
use omnistereo_core::geometry::{disparity_to_depth, MaskedMap};
use omnistereo_core::metrics::{evaluate, EvalSample};
use omnistereo_core::model::StereoModel;
use omnistereo_core::synthdata::{make_random_scene_for, render, Difficulty};
use omnistereo_core::trainer::{
    load_model_checkpoint, train_stage, warm_start, RunManifest, Stage, TrainData,
};
use omnistereo_core::viz::colorize;
use omnistereo_core::{CoreError, Result};

use config::RunConfig;

#[derive(Parser)]
#[command(name = "omnistereo", version, about = "Top-bottom omnidirectional stereo tools")]
struct Cli {
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render a synthetic dataset split of top-bottom panorama pairs.
    ///
    /// Scene seeds run upward from --seed, one per pair; give different
    /// splits disjoint seed ranges so their scenes differ.
    Synth {
        /// Dataset directory; the split is written underneath it.
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 20)]
        pairs: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Scene family: easy, indoor, or outdoor.
        #[arg(long, default_value = "easy")]
        difficulty: String,
        /// Split to write: train, val, or test.
        #[arg(long, default_value = "train")]
        split: String,
        #[arg(long, default_value_t = 64)]
        height: usize,
        #[arg(long, default_value_t = 128)]
        width: usize,
        /// Vertical distance between the two cameras, in meters.
        #[arg(long, default_value_t = 0.3)]
        baseline_m: f64,
    },
    /// Train stage A (head only), stage B (fine-tune), or both in sequence.
    Train {
        /// Dataset directory with a train split and, optionally, a val split.
        #[arg(long)]
        data: PathBuf,
        /// Run directory for checkpoints, manifests, and the config snapshot.
        #[arg(long)]
        out: PathBuf,
        /// a, b, or ab; ab continues stage B from the stage A result.
        #[arg(long, default_value = "ab")]
        stage: String,
        /// TOML run configuration; fields left out keep their defaults.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Fraction of the training split to use, in (0, 1].
        #[arg(long)]
        ratio: Option<f64>,
        /// Overrides the config seed for weights, sampling, and augmentation.
        #[arg(long)]
        seed: Option<u64>,
        /// Continue an interrupted run of a single stage from its checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Load initial weights from a checkpoint, e.g. a stage A result
        /// when running stage B on its own.
        #[arg(long)]
        init_from: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on a dataset split and report all metrics.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Split to evaluate: train, val, or test.
        #[arg(long, default_value = "val")]
        split: String,
        /// Circular padding around inference, in columns.
        #[arg(long, default_value_t = 64)]
        pad: usize,
        /// Depth bucket edges in meters for the near-range breakdown;
        /// empty disables the breakdown.
        #[arg(long, default_value = "0.5,1,2,3,5")]
        buckets: String,
        /// Directory for report.txt and report.json; the report always goes
        /// to stdout as well.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Predict disparity for one top-bottom pair, without ground truth.
    Predict {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        top: PathBuf,
        #[arg(long)]
        bottom: PathBuf,
        /// Output directory for disparity.png and predict.json.
        #[arg(long)]
        out: PathBuf,
        /// Circular padding around inference, in columns.
        #[arg(long, default_value_t = 64)]
        pad: usize,
        /// Fixed-point scale of the disparity file: raw = degrees * scale.
        #[arg(long, default_value_t = 512.0)]
        scale: f64,
        /// Also write depth.png, converted through the checkpoint's baseline.
        #[arg(long)]
        depth: bool,
        /// Fixed-point scale of the depth file: raw = meters * depth_scale.
        #[arg(long, default_value_t = 256.0)]
        depth_scale: f64,
    },
    /// Render a 16-bit disparity or depth file as a false-color image.
    Viz {
        /// Fixed-point 16-bit input; raw 0 marks invalid pixels.
        #[arg(long)]
        input: PathBuf,
        /// Output color image.
        #[arg(long)]
        out: PathBuf,
        /// Fixed-point scale of the input file.
        #[arg(long, default_value_t = 512.0)]
        scale: f64,
        /// Spread a multiplicative value range evenly over the palette.
        #[arg(long)]
        log_scale: bool,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.cmd) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

/// 2 for configuration problems, 3 for unusable inputs, 4 for numeric
/// divergence. Argument parsing exits with 2 through the parser itself.
fn exit_code(err: &CoreError) -> u8 {
    match err {
        CoreError::Config(_) => 2,
        CoreError::Data(_) | CoreError::Io { .. } => 3,
        CoreError::Numeric(_) => 4,
    }
}

fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::Synth {
            out,
            pairs,
            seed,
            difficulty,
            split,
            height,
            width,
            baseline_m,
        } => cmd_synth(&out, pairs, seed, &difficulty, &split, height, width, baseline_m),
        Command::Train {
            data,
            out,
            stage,
            config,
            ratio,
            seed,
            resume,
            init_from,
        } => cmd_train(
            &data,
            &out,
            &stage,
            config.as_deref(),
            ratio,
            seed,
            resume.as_deref(),
            init_from.as_deref(),
        ),
        Command::Eval {
            checkpoint,
            data,
            split,
            pad,
            buckets,
            out,
        } => cmd_eval(&checkpoint, &data, &split, pad, &buckets, out.as_deref()),
        Command::Predict {
            checkpoint,
            top,
            bottom,
            out,
            pad,
            scale,
            depth,
            depth_scale,
        } => cmd_predict(&checkpoint, &top, &bottom, &out, pad, scale, depth, depth_scale),
        Command::Viz {
            input,
            out,
            scale,
            log_scale,
        } => cmd_viz(&input, &out, scale, log_scale),
    }
}

#[allow(clippy::too_many_arguments)]
fn cmd_synth(
    out: &Path,
    pairs: usize,
    seed: u64,
    difficulty: &str,
    split: &str,
    height: usize,
    width: usize,
    baseline_m: f64,
) -> Result<()> {
    let difficulty: Difficulty = difficulty.parse()?;
    let split: Split = split.parse()?;
    let rig = omnistereo_core::geometry::CameraRig::new(baseline_m, height, width)?;
    let rendered = (0..pairs)
        .map(|i| {
            let scene = make_random_scene_for(
                seed.wrapping_add(i as u64),
                difficulty,
                rig.height_px,
                rig.vertical_fov_rad,
            );
            render(&scene, &rig)
        })
        .collect::<Result<Vec<_>>>()?;
    let manifest = write_dataset_checked(out, split, &rig, &rendered)?;
    let stats = manifest.stats.expect("freshly written datasets carry stats");
    println!(
        "wrote {} {split} pairs at {height}x{width} to {}; disparity range [{:.3}, {:.3}] deg",
        manifest.len(),
        out.display(),
        stats.d_deg_min,
        stats.d_deg_max,
    );
    Ok(())
}

fn write_dataset_checked(
    out: &Path,
    split: Split,
    rig: &omnistereo_core::geometry::CameraRig,
    rendered: &[omnistereo_core::synthdata::RenderedPair],
) -> Result<DatasetManifest> {
    if rendered.is_empty() {
        return Err(CoreError::config("refusing to write an empty dataset"));
    }
    omnistereo_core::dataio::write_dataset(out, split, rig, rendered, DisparityEncoding::default())
}

#[allow(clippy::too_many_arguments)]
fn cmd_train(
    data: &Path,
    out: &Path,
    stage: &str,
    config: Option<&Path>,
    ratio: Option<f64>,
    seed: Option<u64>,
    resume: Option<&Path>,
    init_from: Option<&Path>,
) -> Result<()> {
    let mut cfg = match config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = seed {
        cfg.seed = s;
    }
    let plan: &[Stage] = match stage {
        "a" | "A" => &[Stage::A],
        "b" | "B" => &[Stage::B],
        "ab" | "AB" => &[Stage::A, Stage::B],
        other => {
            return Err(CoreError::config(format!(
                "unknown stage '{other}'; expected a, b, or ab"
            )))
        }
    };
    if resume.is_some() && plan.len() != 1 {
        return Err(CoreError::config("--resume applies to a single stage, not ab"));
    }

    let train_manifest = DatasetManifest::load(data, Split::Train)?;
    let range = train_manifest.stats.map(|s| (s.d_deg_min, s.d_deg_max));
    let tdata = TrainData::load(data)?;
    let model_cfg = cfg.model.resolve(&tdata.rig, range)?;
    let mut stage_cfgs = [
        cfg.stage_a.resolve(Stage::A, cfg.seed)?,
        cfg.stage_b.resolve(Stage::B, cfg.seed)?,
    ];
    if let Some(r) = ratio {
        for sc in &mut stage_cfgs {
            sc.subset_ratio = r;
            sc.validate()?;
        }
    }

    fs::create_dir_all(out).map_err(|e| CoreError::io(out, e))?;
    cfg.resolved_snapshot(&model_cfg, &stage_cfgs[0], &stage_cfgs[1])
        .save(&out.join("config.toml"))?;

    let model = StereoModel::new(cfg.seed, model_cfg)?;
    if let Some(p) = init_from {
        warm_start(&model, p)?;
        println!("initialized weights from {}", p.display());
    }
    for st in plan {
        let (scfg, dir) = match st {
            Stage::A => (&stage_cfgs[0], out.join("stage_a")),
            Stage::B => (&stage_cfgs[1], out.join("stage_b")),
        };
        let manifest = train_stage(&model, &tdata, scfg, &dir, resume)?;
        print_stage_summary(*st, &dir, &manifest);
    }
    Ok(())
}

fn print_stage_summary(stage: Stage, dir: &Path, m: &RunManifest) {
    let Some(last) = m.epochs.last() else {
        println!("stage {stage}: no epochs ran");
        return;
    };
    println!(
        "stage {stage}: {} epochs, {} steps{}, train loss {:.4}, train MAE {:.3} deg -> {}",
        m.epochs.len(),
        m.steps_taken,
        if m.stopped_early { " (stopped early)" } else { "" },
        last.train_loss,
        last.train_mae_deg,
        dir.display(),
    );
    if let Some(val) = &last.val {
        println!(
            "stage {stage} val: disparity MAE {:.3} deg, RMSE {:.3} deg, depth MAE {:.3} m",
            val.disparity.mae, val.disparity.rmse, val.depth.mae,
        );
    }
}

fn cmd_eval(
    checkpoint: &Path,
    data: &Path,
    split: &str,
    pad: usize,
    buckets: &str,
    out: Option<&Path>,
) -> Result<()> {
    let (model, rig, _) = load_model_checkpoint(checkpoint)?;
    let split: Split = split.parse()?;
    let manifest = DatasetManifest::load(data, split)?;
    if manifest.rig != rig {
        return Err(CoreError::data(format!(
            "dataset rig {}x{} (baseline {} m) differs from the checkpoint rig {}x{} (baseline {} m)",
            manifest.rig.height_px,
            manifest.rig.width_px,
            manifest.rig.baseline_m,
            rig.height_px,
            rig.width_px,
            rig.baseline_m,
        )));
    }
    let buckets = parse_bucket_edges(buckets)?;
    let samples = (0..manifest.len())
        .map(|i| {
            let p = load_pair(data, &manifest, i)?;
            let pred = model.predict(&rig, &p.image_top, &p.image_bottom, pad)?;
            Ok(EvalSample {
                pred_disp_deg: pred,
                gt_disp_sparse: p.gt_sparse,
                gt_disp_complete: p.gt_complete,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let report = evaluate(&rig, &samples, &buckets)?;
    print!("{}", report.flat_lines());
    if let Some(dir) = out {
        fs::create_dir_all(dir).map_err(|e| CoreError::io(dir, e))?;
        let txt = dir.join("report.txt");
        fs::write(&txt, report.flat_lines()).map_err(|e| CoreError::io(&txt, e))?;
        let json = dir.join("report.json");
        fs::write(&json, report.to_json()).map_err(|e| CoreError::io(&json, e))?;
        println!("wrote {} and {}", txt.display(), json.display());
    }
    Ok(())
}

/// Turns comma-separated ascending edges into adjacent intervals;
/// an empty string means no buckets.
fn parse_bucket_edges(spec: &str) -> Result<Vec<(f64, f64)>> {
    if spec.trim().is_empty() {
        return Ok(Vec::new());
    }
    let edges = spec
        .split(',')
        .map(|t| {
            t.trim()
                .parse::<f64>()
                .map_err(|_| CoreError::config(format!("bad bucket edge '{t}'")))
        })
        .collect::<Result<Vec<_>>>()?;
    if edges.len() < 2 {
        return Err(CoreError::config("buckets need at least two edges"));
    }
    if !edges.windows(2).all(|w| w[0] > 0.0 && w[0] < w[1]) {
        return Err(CoreError::config("bucket edges must be positive and ascending"));
    }
    Ok(edges.windows(2).map(|w| (w[0], w[1])).collect())
}

#[allow(clippy::too_many_arguments)]
fn cmd_predict(
    checkpoint: &Path,
    top: &Path,
    bottom: &Path,
    out: &Path,
    pad: usize,
    scale: f64,
    depth: bool,
    depth_scale: f64,
) -> Result<()> {
    let (model, rig, _) = load_model_checkpoint(checkpoint)?;
    let top_img = load_rgb(top)?;
    let bottom_img = load_rgb(bottom)?;
    for (name, img) in [("top", &top_img), ("bottom", &bottom_img)] {
        let (_, h, w) = img.dim();
        if (h, w) != (rig.height_px, rig.width_px) {
            return Err(CoreError::data(format!(
                "{name} image is {h}x{w}, but the checkpoint was trained for {}x{}",
                rig.height_px, rig.width_px,
            )));
        }
    }
    let disp = MaskedMap::dense(model.predict(&rig, &top_img, &bottom_img, pad)?)?;
    fs::create_dir_all(out).map_err(|e| CoreError::io(out, e))?;
    let encoding = DisparityEncoding { scale, bit_depth: 16 };
    let disp_path = out.join("disparity.png");
    save_disparity(&disp_path, &disp, &encoding)?;
    let mut info = serde_json::json!({
        "checkpoint": checkpoint.display().to_string(),
        "pad_cols": pad,
        "rig": rig,
        "disparity": {"file": "disparity.png", "scale": scale},
    });
    println!("wrote {}", disp_path.display());

    if depth {
        let mut depth_map = disparity_to_depth(&disp, &rig)?;
        // The fixed-point file cannot express ranges beyond u16 / scale;
        // such pixels become invalid rather than wrapping.
        let max_m = u16::MAX as f64 / depth_scale;
        for (idx, v) in depth_map.valid.indexed_iter_mut() {
            if *v && depth_map.values[idx] > max_m {
                *v = false;
            }
        }
        let depth_enc = DisparityEncoding {
            scale: depth_scale,
            bit_depth: 16,
        };
        let depth_path = out.join("depth.png");
        save_disparity(&depth_path, &depth_map, &depth_enc)?;
        info["depth"] = serde_json::json!({"file": "depth.png", "scale": depth_scale});
        println!("wrote {}", depth_path.display());
    }

    let info_path = out.join("predict.json");
    fs::write(&info_path, serde_json::to_string_pretty(&info).expect("plain json"))
        .map_err(|e| CoreError::io(&info_path, e))?;
    Ok(())
}

fn cmd_viz(input: &Path, out: &Path, scale: f64, log_scale: bool) -> Result<()> {
    let encoding = DisparityEncoding { scale, bit_depth: 16 };
    let map = load_disparity(input, &encoding)?;
    let img = colorize(&map, log_scale)?;
    save_rgb(out, &img)?;
    println!("wrote {}", out.display());
    Ok(())
}
