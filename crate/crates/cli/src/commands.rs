use std::fmt::Write as _;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{anyhow, Context};
use posereg::analysis::{
    feature_distances, path_distances, saliency, spearman, trajectory_plot, FeaturePoint,
    Trajectory,
};
use posereg::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
use posereg::data::{
    load_manifest, load_seven_scenes_style, preprocess, write_dataset, CropMode, DatasetSample,
    PreprocessConfig, Split,
};
use posereg::metrics::{evaluate, predict, MetricsReport};
use posereg::model::{Backbone, EncoderConfig, ModelConfig, PoseNet};
use posereg::pose_io::{write_pose_file, StampedPose};
use posereg::synthetic::{SceneConfig, SyntheticScene};
use posereg::train::{TrainConfig, TrainError, Trainer};
use serde::Serialize;

use crate::config::{DataFormat, DataSection, Overrides, RunConfig};
use crate::AnalyzeMode;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Kind {
    Runtime,
    Config,
    Checkpoint,
}

impl Kind {
    pub fn code(self) -> u8 {
        match self {
            Kind::Runtime => 1,
            Kind::Config => 2,
            Kind::Checkpoint => 3,
        }
    }
}

pub struct CmdError {
    pub kind: Kind,
    pub error: anyhow::Error,
}

pub type CmdResult<T = ()> = Result<T, CmdError>;

trait Classify<T> {
    fn or_kind(self, kind: Kind) -> CmdResult<T>;
}

impl<T, E: Into<anyhow::Error>> Classify<T> for Result<T, E> {
    fn or_kind(self, kind: Kind) -> CmdResult<T> {
        self.map_err(|e| CmdError {
            kind,
            error: e.into(),
        })
    }
}

fn resolve(config: Option<&Path>, o: &Overrides, verb: &str) -> CmdResult<RunConfig> {
    let mut cfg = RunConfig::load(config).or_kind(Kind::Config)?;
    cfg.apply(o, verb);
    Ok(cfg)
}

fn load_data(format: DataFormat, path: &Path, split: Split) -> CmdResult<Vec<DatasetSample>> {
    let samples = match format {
        DataFormat::Manifest => load_manifest(path),
        DataFormat::SevenScenes => load_seven_scenes_style(path, split),
    };
    samples
        .with_context(|| format!("loading {}", path.display()))
        .or_kind(Kind::Runtime)
}

fn load_test_data(cfg: &RunConfig) -> CmdResult<Vec<DatasetSample>> {
    let path = cfg.test_path().or_kind(Kind::Config)?;
    load_data(cfg.data.format, path, Split::Test)
}

fn load_ckpt(path: &Path) -> CmdResult<Checkpoint> {
    load_checkpoint(path).or_kind(Kind::Checkpoint)
}

fn create_out(dir: &Path) -> CmdResult {
    fs::create_dir_all(dir)
        .with_context(|| format!("creating {}", dir.display()))
        .or_kind(Kind::Runtime)
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> CmdResult {
    fs::write(path, contents)
        .with_context(|| format!("writing {}", path.display()))
        .or_kind(Kind::Runtime)
}

fn train_error(e: TrainError) -> CmdError {
    let kind = match e {
        TrainError::Config(_) | TrainError::NoTuples { .. } => Kind::Config,
        _ => Kind::Runtime,
    };
    CmdError {
        kind,
        error: e.into(),
    }
}

/// Builds the initial network, importing encoder weights when configured.
fn initial_model(cfg: &RunConfig) -> CmdResult<PoseNet> {
    let mut model = PoseNet::new(cfg.model.clone(), cfg.train.seed).or_kind(Kind::Config)?;
    if cfg.model.encoder.pretrained {
        let path = cfg.pretrained_weights.as_deref().expect("validated");
        let src = load_ckpt(path)?;
        model
            .load_encoder_from(&src.model)
            .with_context(|| format!("encoder weights from {}", path.display()))
            .or_kind(Kind::Checkpoint)?;
    }
    Ok(model)
}

/// Trains into `dir`, writing `train.log` and `checkpoint.ckpt` (after every epoch).
fn run_training(
    model: PoseNet,
    train: TrainConfig,
    preprocess: PreprocessConfig,
    samples: &[DatasetSample],
    dir: &Path,
) -> CmdResult<Checkpoint> {
    let mut trainer = Trainer::new(model, train, preprocess).map_err(train_error)?;
    let log_path = dir.join("train.log");
    let ckpt_path = dir.join("checkpoint.ckpt");
    let mut log = BufWriter::new(
        fs::File::create(&log_path)
            .with_context(|| format!("creating {}", log_path.display()))
            .or_kind(Kind::Runtime)?,
    );
    let mut io_error = None;
    while trainer.epochs_done < trainer.config.epochs {
        let mean = trainer
            .run_epoch(samples, &mut |r| {
                if let Err(e) = writeln!(log, "{r}") {
                    io_error.get_or_insert(e);
                }
            })
            .map_err(train_error)?;
        if let Some(e) = io_error.take() {
            return Err(e)
                .context("writing training log")
                .or_kind(Kind::Runtime);
        }
        log.flush()
            .context("writing training log")
            .or_kind(Kind::Runtime)?;
        log::info!(
            "epoch {}/{}: mean loss {mean:.5}, beta {:.4}, gamma {:.4}",
            trainer.epochs_done,
            trainer.config.epochs,
            trainer.loss_state.beta,
            trainer.loss_state.gamma
        );
        save_checkpoint(&trainer.checkpoint(), &ckpt_path).or_kind(Kind::Runtime)?;
    }
    Ok(trainer.checkpoint())
}

pub fn train(config: Option<&Path>, o: &Overrides) -> CmdResult {
    let cfg = resolve(config, o, "train")?;
    cfg.validate_for_training().or_kind(Kind::Config)?;
    let model = initial_model(&cfg)?;
    let samples = load_data(
        cfg.data.format,
        cfg.train_path().or_kind(Kind::Config)?,
        Split::Train,
    )?;
    let out = cfg.out_dir();
    create_out(out)?;
    write(&out.join("config.toml"), cfg.to_toml())?;
    log::info!(
        "training on {} frames into {}",
        samples.len(),
        out.display()
    );
    run_training(
        model,
        cfg.train.clone(),
        cfg.preprocess.clone(),
        &samples,
        out,
    )?;
    println!("{}", out.join("checkpoint.ckpt").display());
    Ok(())
}

fn write_report(dir: &Path, report: &MetricsReport) -> CmdResult {
    write(&dir.join("report.json"), report.to_json())?;
    write(
        &dir.join("summary.txt"),
        format!("{}\n", report.summary_line()),
    )
}

pub fn eval(config: Option<&Path>, o: &Overrides, checkpoint: &Path) -> CmdResult {
    let cfg = resolve(config, o, "eval")?;
    let ckpt = load_ckpt(checkpoint)?;
    let samples = load_test_data(&cfg)?;
    let report = evaluate(&ckpt.model, &samples, &ckpt.preprocess).or_kind(Kind::Runtime)?;
    let out = cfg.out_dir();
    create_out(out)?;
    write(&out.join("config.toml"), cfg.to_toml())?;
    write_report(out, &report)?;
    println!("{}", report.summary_line());
    Ok(())
}

pub struct AnalyzeArgs {
    pub mode: AnalyzeMode,
    pub frame: usize,
    pub anchor: usize,
    pub pre_attention: bool,
}

#[derive(Serialize)]
struct DistanceReport {
    anchor_index: usize,
    extraction: FeaturePoint,
    distances: Vec<f64>,
    path_distances: Vec<f64>,
    spearman: Option<f64>,
}

pub fn analyze(
    config: Option<&Path>,
    o: &Overrides,
    checkpoint: &Path,
    args: AnalyzeArgs,
) -> CmdResult {
    let cfg = resolve(config, o, "analyze")?;
    let ckpt = load_ckpt(checkpoint)?;
    let samples = load_test_data(&cfg)?;
    let prep = ckpt.preprocess.for_eval();
    let model = &ckpt.model;
    let out = cfg.out_dir();
    let check_index = |i: usize, what: &str| {
        if i >= samples.len() {
            Err(anyhow!(
                "{what} {i} out of range for {} frames",
                samples.len()
            ))
            .or_kind(Kind::Config)
        } else {
            Ok(())
        }
    };
    match args.mode {
        AnalyzeMode::Saliency => {
            check_index(args.frame, "frame")?;
            let x = preprocess(&samples[args.frame].image, &prep, 0).or_kind(Kind::Runtime)?;
            let map = saliency(model, &x).or_kind(Kind::Runtime)?;
            create_out(out)?;
            let stem = format!("saliency_{:06}", args.frame);
            write(&out.join(format!("{stem}.txt")), map.to_text_grid())?;
            map.write_png(&out.join(format!("{stem}.png")))
                .or_kind(Kind::Runtime)?;
            println!("{}", out.join(format!("{stem}.png")).display());
        }
        AnalyzeMode::Distances => {
            check_index(args.anchor, "anchor")?;
            let frames = samples
                .iter()
                .map(|s| preprocess(&s.image, &prep, 0))
                .collect::<Result<Vec<_>, _>>()
                .or_kind(Kind::Runtime)?;
            let point = if args.pre_attention {
                FeaturePoint::PreAttention
            } else {
                FeaturePoint::PostAttention
            };
            let profile =
                feature_distances(model, &frames, args.anchor, point).or_kind(Kind::Runtime)?;
            let positions: Vec<_> = samples.iter().map(|s| s.pose.p).collect();
            let path = path_distances(&positions, args.anchor);
            let report = DistanceReport {
                anchor_index: args.anchor,
                extraction: point,
                spearman: spearman(&profile.distances, &path),
                distances: profile.distances,
                path_distances: path,
            };
            create_out(out)?;
            let mut text = String::new();
            for d in &report.distances {
                let _ = writeln!(text, "{d:?}");
            }
            write(&out.join(format!("distances_{:06}.txt", args.anchor)), text)?;
            write(
                &out.join(format!("distances_{:06}.json", args.anchor)),
                serde_json::to_string_pretty(&report).expect("serializes"),
            )?;
            match report.spearman {
                Some(r) => println!("spearman {r:.4}"),
                None => println!("spearman undefined"),
            }
        }
        AnalyzeMode::Trajectory => {
            let predicted = predict(model, &samples, &ckpt.preprocess).or_kind(Kind::Runtime)?;
            let stamp = |poses: &mut dyn Iterator<Item = posereg::geometry::Pose>| {
                Trajectory(
                    poses
                        .zip(&samples)
                        .map(|(pose, s)| StampedPose {
                            timestamp: s.frame_index as f64,
                            pose,
                        })
                        .collect(),
                )
            };
            let pred = stamp(&mut predicted.iter().copied());
            let gt = stamp(&mut samples.iter().map(|s| s.pose));
            create_out(out)?;
            let svg = out.join("trajectory.svg");
            trajectory_plot(&pred, &gt, &svg).or_kind(Kind::Runtime)?;
            write_pose_file(&out.join("predicted_poses.txt"), &pred.0).or_kind(Kind::Runtime)?;
            println!("{}", svg.display());
        }
    }
    Ok(())
}

#[derive(Serialize)]
struct AblationRow {
    variant: String,
    position_median: f64,
    rotation_median: f64,
    position_mean: f64,
    rotation_mean: f64,
}

fn improvement(base: f64, new: f64) -> String {
    if base > 0.0 {
        format!("{:+.1}%", 100.0 * (base - new) / base)
    } else {
        "n/a".into()
    }
}

fn ablation_table(rows: &[AblationRow]) -> String {
    let mut s = String::new();
    s.push_str("| Variant | Median position (m) | Median rotation (°) | Mean position (m) | Mean rotation (°) |\n");
    s.push_str("|---|---|---|---|---|\n");
    for r in rows {
        let _ = writeln!(
            s,
            "| {} | {:.4} | {:.3} | {:.4} | {:.3} |",
            r.variant, r.position_median, r.rotation_median, r.position_mean, r.rotation_mean
        );
    }
    if let (Some(b), Some(a)) = (rows.first(), rows.get(1)) {
        let _ = writeln!(
            s,
            "\nMedian error reduction of {} over {}: position {}, rotation {}",
            a.variant,
            b.variant,
            improvement(b.position_median, a.position_median),
            improvement(b.rotation_median, a.rotation_median)
        );
    }
    s
}

pub fn ablate(config: Option<&Path>, o: &Overrides) -> CmdResult {
    let cfg = resolve(config, o, "ablate")?;
    cfg.validate_for_training().or_kind(Kind::Config)?;
    let train_samples = load_data(
        cfg.data.format,
        cfg.train_path().or_kind(Kind::Config)?,
        Split::Train,
    )?;
    let test_samples = load_test_data(&cfg)?;
    let temporal = cfg.train.temporal.clone().unwrap_or_default();
    let variants = [
        ("basic", false, None),
        ("attention", true, None),
        ("temporal", true, Some(temporal)),
    ];
    let out = cfg.out_dir();
    create_out(out)?;
    write(&out.join("config.toml"), cfg.to_toml())?;
    let mut rows = Vec::new();
    for (name, attention, temporal) in variants {
        let mut run = cfg.clone();
        run.model.attention = attention;
        run.train.temporal = temporal;
        let dir = out.join(name);
        create_out(&dir)?;
        write(&dir.join("config.toml"), run.to_toml())?;
        log::info!("ablation variant {name}");
        let model = initial_model(&run)?;
        let ckpt = run_training(
            model,
            run.train.clone(),
            run.preprocess.clone(),
            &train_samples,
            &dir,
        )?;
        let report =
            evaluate(&ckpt.model, &test_samples, &ckpt.preprocess).or_kind(Kind::Runtime)?;
        write_report(&dir, &report)?;
        rows.push(AblationRow {
            variant: name.to_string(),
            position_median: report.position.median,
            rotation_median: report.rotation.median,
            position_mean: report.position.mean,
            rotation_mean: report.rotation.mean,
        });
    }
    let table = ablation_table(&rows);
    write(&out.join("ablation.md"), &table)?;
    write(
        &out.join("ablation.json"),
        serde_json::to_string_pretty(&rows).expect("serializes"),
    )?;
    print!("{table}");
    Ok(())
}

pub fn synth_data(o: &Overrides, seed: u64, frames: usize, size: u32) -> CmdResult {
    if frames == 0 || size < 16 {
        return Err(anyhow!("need at least 1 frame and 16-pixel images")).or_kind(Kind::Config);
    }
    let mut cfg = RunConfig::default();
    cfg.apply(o, "synth-data");
    let out = cfg.out_dir().to_path_buf();
    let scene = SyntheticScene::new(
        SceneConfig {
            width: size,
            height: size,
            ..SceneConfig::default()
        },
        seed,
    );
    let train = scene.frames(frames, "synth");
    let test = scene.midpoint_frames(frames.max(2), "synth");
    create_out(&out)?;
    write_dataset(&out.join("train"), &train).or_kind(Kind::Runtime)?;
    write_dataset(&out.join("test"), &test).or_kind(Kind::Runtime)?;

    let run = RunConfig {
        out: None,
        deterministic: true,
        pretrained_weights: None,
        data: DataSection {
            format: DataFormat::Manifest,
            train: Some(PathBuf::from("train/manifest.txt")),
            test: Some(PathBuf::from("test/manifest.txt")),
        },
        model: ModelConfig {
            encoder: EncoderConfig {
                backbone: Backbone::TinyResidual,
                feature_dim: 64,
                pretrained: false,
                dropout_rate: 0.0,
            },
            input_size: size as usize,
            ..ModelConfig::default()
        },
        preprocess: PreprocessConfig {
            rescale_short_side: size,
            crop: size,
            crop_mode: CropMode::Center,
            jitter: None,
        },
        train: TrainConfig {
            learning_rate: 3e-3,
            batch_size: 16,
            dropout_rate: 0.0,
            epochs: 80,
            seed,
            ..TrainConfig::default()
        },
    };
    write(&out.join("config.toml"), run.to_toml())?;
    println!("{}", out.join("config.toml").display());
    Ok(())
}
