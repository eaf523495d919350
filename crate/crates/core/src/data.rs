//! Dataset ingestion, preprocessing and tuple sampling.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use image::{imageops, Rgb32FImage};
use ndarray::Array3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::Pose;
use crate::loss::TemporalConfig;
use crate::model::ImageTensor;
use crate::pose_io::{read_pose_any, write_pose_file, PoseIoError, StampedPose};

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{path}: cannot decode image: {source}")]
    Image {
        path: PathBuf,
        source: image::ImageError,
    },
    #[error("missing pose file for frame {frame} ({path})")]
    MissingPose { frame: String, path: PathBuf },
    #[error(transparent)]
    Pose(#[from] PoseIoError),
    #[error("{path}:{line}: {msg}")]
    Manifest {
        path: PathBuf,
        line: usize,
        msg: String,
    },
    #[error("image {width}x{height} too small: needs at least {needed} pixels on each side after rescaling")]
    TooSmall {
        width: u32,
        height: u32,
        needed: u32,
    },
    #[error("invalid preprocessing configuration: {0}")]
    Config(String),
    #[error("no samples found under {0}")]
    Empty(PathBuf),
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetSample {
    /// RGB, intensities in `[0, 1]`.
    pub image: Rgb32FImage,
    pub pose: Pose,
    pub sequence_id: String,
    pub frame_index: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

impl std::str::FromStr for Split {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "train" => Ok(Self::Train),
            "test" => Ok(Self::Test),
            other => Err(format!("unknown split {other:?}")),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CropMode {
    Random,
    Center,
}

/// Color-jitter strengths; factors are drawn from `[max(0, 1-s), 1+s]`, hue
/// shifts from `[-hue, hue]` (in turns).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Jitter {
    pub brightness: f64,
    pub contrast: f64,
    pub saturation: f64,
    pub hue: f64,
}

impl Default for Jitter {
    fn default() -> Self {
        Self {
            brightness: 0.7,
            contrast: 0.7,
            saturation: 0.7,
            hue: 0.5,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PreprocessConfig {
    pub rescale_short_side: u32,
    pub crop: u32,
    pub crop_mode: CropMode,
    pub jitter: Option<Jitter>,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        Self {
            rescale_short_side: 256,
            crop: 256,
            crop_mode: CropMode::Random,
            jitter: None,
        }
    }
}

impl PreprocessConfig {
    /// The evaluation variant: centered crop, no jitter.
    pub fn for_eval(&self) -> Self {
        Self {
            crop_mode: CropMode::Center,
            jitter: None,
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<(), DataError> {
        if self.crop == 0 || self.crop > self.rescale_short_side {
            return Err(DataError::Config(format!(
                "crop {} must be in 1..={}",
                self.crop, self.rescale_short_side
            )));
        }
        if let Some(j) = &self.jitter {
            let ok = [j.brightness, j.contrast, j.saturation]
                .iter()
                .all(|v| *v >= 0.0)
                && (0.0..=0.5).contains(&j.hue);
            if !ok {
                return Err(DataError::Config(format!("invalid jitter {j:?}")));
            }
        }
        Ok(())
    }
}

/// Size after scaling the short side to `short`; the long side rounds down.
pub fn rescaled_dims(width: u32, height: u32, short: u32) -> (u32, u32) {
    if width <= height {
        let h = (height as u64 * short as u64 / width as u64) as u32;
        (short, h)
    } else {
        let w = (width as u64 * short as u64 / height as u64) as u32;
        (w, short)
    }
}

fn luma(r: f32, g: f32, b: f32) -> f32 {
    0.299 * r + 0.587 * g + 0.114 * b
}

fn rgb_to_hsv(r: f32, g: f32, b: f32) -> (f32, f32, f32) {
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let d = max - min;
    let h = if d == 0.0 {
        0.0
    } else if max == r {
        ((g - b) / d).rem_euclid(6.0) / 6.0
    } else if max == g {
        ((b - r) / d + 2.0) / 6.0
    } else {
        ((r - g) / d + 4.0) / 6.0
    };
    let s = if max == 0.0 { 0.0 } else { d / max };
    (h, s, max)
}

fn hsv_to_rgb(h: f32, s: f32, v: f32) -> (f32, f32, f32) {
    let h6 = h.rem_euclid(1.0) * 6.0;
    let i = h6.floor();
    let f = h6 - i;
    let p = v * (1.0 - s);
    let q = v * (1.0 - s * f);
    let t = v * (1.0 - s * (1.0 - f));
    match i as i32 % 6 {
        0 => (v, t, p),
        1 => (q, v, p),
        2 => (p, v, t),
        3 => (p, q, v),
        4 => (t, p, v),
        _ => (v, p, q),
    }
}

fn jitter_factor(strength: f64, rng: &mut impl Rng) -> f32 {
    let lo = (1.0 - strength).max(0.0);
    let hi = 1.0 + strength;
    if hi > lo {
        rng.random_range(lo..hi) as f32
    } else {
        1.0
    }
}

/// Brightness, contrast, saturation and hue jitter, in that order.
pub fn color_jitter(img: &mut Rgb32FImage, j: &Jitter, rng: &mut impl Rng) {
    let b = jitter_factor(j.brightness, rng);
    let c = jitter_factor(j.contrast, rng);
    let s = jitter_factor(j.saturation, rng);
    let h = if j.hue > 0.0 {
        rng.random_range(-j.hue..j.hue) as f32
    } else {
        0.0
    };
    for px in img.pixels_mut() {
        for v in px.0.iter_mut() {
            *v = (*v * b).clamp(0.0, 1.0);
        }
    }
    let n = (img.width() * img.height()).max(1) as f32;
    let mean = img.pixels().map(|p| luma(p[0], p[1], p[2])).sum::<f32>() / n;
    for px in img.pixels_mut() {
        for v in px.0.iter_mut() {
            *v = (c * *v + (1.0 - c) * mean).clamp(0.0, 1.0);
        }
        let g = luma(px[0], px[1], px[2]);
        for v in px.0.iter_mut() {
            *v = (s * *v + (1.0 - s) * g).clamp(0.0, 1.0);
        }
        if h != 0.0 {
            let (hh, ss, vv) = rgb_to_hsv(px[0], px[1], px[2]);
            let (r, g, b) = hsv_to_rgb(hh + h, ss, vv);
            px.0 = [r, g, b];
        }
    }
}

/// Rescale, optionally jitter, crop, and map intensities to `[-1, 1]`.
///
/// All randomness (jitter factors, then crop offset) comes from `seed`.
pub fn preprocess(
    image: &Rgb32FImage,
    cfg: &PreprocessConfig,
    seed: u64,
) -> Result<ImageTensor, DataError> {
    cfg.validate()?;
    let (w, h) = (image.width(), image.height());
    if w == 0 || h == 0 {
        return Err(DataError::TooSmall {
            width: w,
            height: h,
            needed: cfg.crop,
        });
    }
    let (rw, rh) = rescaled_dims(w, h, cfg.rescale_short_side);
    if rw < cfg.crop || rh < cfg.crop {
        return Err(DataError::TooSmall {
            width: w,
            height: h,
            needed: cfg.crop,
        });
    }
    let mut img = if (rw, rh) == (w, h) {
        image.clone()
    } else {
        imageops::resize(image, rw, rh, imageops::FilterType::Triangle)
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    if let Some(j) = &cfg.jitter {
        color_jitter(&mut img, j, &mut rng);
    }
    let (x0, y0) = match cfg.crop_mode {
        CropMode::Center => ((rw - cfg.crop) / 2, (rh - cfg.crop) / 2),
        CropMode::Random => (
            rng.random_range(0..=rw - cfg.crop),
            rng.random_range(0..=rh - cfg.crop),
        ),
    };
    let c = cfg.crop as usize;
    Ok(Array3::from_shape_fn((3, c, c), |(ch, y, x)| {
        let v = img.get_pixel(x0 + x as u32, y0 + y as u32)[ch] as f64;
        (v * 2.0 - 1.0).clamp(-1.0, 1.0)
    }))
}

/// Index tuples `(i, i+s[, i+2s])` over one ordered sequence.
pub fn sample_tuples(len: usize, cfg: &TemporalConfig) -> Vec<Vec<usize>> {
    let span = cfg.frame_spacing * (cfg.tuple_len() - 1);
    if len <= span {
        log::warn!(
            "sequence of {len} frames is too short for tuples spanning {} frames",
            span + 1
        );
        return Vec::new();
    }
    (0..len - span)
        .map(|i| {
            (0..cfg.tuple_len())
                .map(|k| i + k * cfg.frame_spacing)
                .collect()
        })
        .collect()
}

/// Consecutive triplets `(i, i+s, i+2s)` within one ordered sequence.
pub fn sample_triplets(sequence: &[DatasetSample], cfg: &TemporalConfig) -> Vec<[usize; 3]> {
    let cfg = TemporalConfig {
        triplet: true,
        ..cfg.clone()
    };
    sample_tuples(sequence.len(), &cfg)
        .into_iter()
        .map(|t| [t[0], t[1], t[2]])
        .collect()
}

/// Tuples over a whole dataset, never crossing a sequence boundary. Indices
/// refer to positions in `samples`.
pub fn dataset_tuples(samples: &[DatasetSample], cfg: &TemporalConfig) -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    for range in sequence_ranges(samples) {
        for t in sample_tuples(range.len(), cfg) {
            out.push(t.into_iter().map(|i| i + range.start).collect());
        }
    }
    out
}

/// Contiguous index ranges sharing a `sequence_id`.
pub fn sequence_ranges(samples: &[DatasetSample]) -> Vec<std::ops::Range<usize>> {
    let mut out = Vec::new();
    let mut start = 0;
    for i in 1..=samples.len() {
        if i == samples.len() || samples[i].sequence_id != samples[start].sequence_id {
            if i > start {
                out.push(start..i);
            }
            start = i;
        }
    }
    out
}

pub fn load_image(path: &Path) -> Result<Rgb32FImage, DataError> {
    let img = image::open(path).map_err(|source| DataError::Image {
        path: path.to_owned(),
        source,
    })?;
    Ok(img.to_rgb32f())
}

fn read_dir_sorted(dir: &Path) -> Result<Vec<PathBuf>, DataError> {
    let io = |source| DataError::Io {
        path: dir.to_owned(),
        source,
    };
    let mut entries: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(io)?
        .map(|e| e.map(|e| e.path()))
        .collect::<Result<_, _>>()
        .map_err(io)?;
    entries.sort();
    Ok(entries)
}

/// Sequence directories named by a split file (`sequence1` → `seq-01`), or
/// every `seq-*` directory when no split file exists.
fn split_sequences(root: &Path, split: Split) -> Result<Vec<String>, DataError> {
    let file = root.join(match split {
        Split::Train => "TrainSplit.txt",
        Split::Test => "TestSplit.txt",
    });
    if file.exists() {
        let text = fs::read_to_string(&file).map_err(|source| DataError::Io {
            path: file.clone(),
            source,
        })?;
        let mut seqs = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let num: usize =
                line.trim_start_matches("sequence")
                    .parse()
                    .map_err(|_| DataError::Manifest {
                        path: file.clone(),
                        line: i + 1,
                        msg: format!("expected `sequenceN`, found {line:?}"),
                    })?;
            seqs.push(format!("seq-{num:02}"));
        }
        return Ok(seqs);
    }
    Ok(read_dir_sorted(root)?
        .into_iter()
        .filter(|p| p.is_dir())
        .filter_map(|p| p.file_name().and_then(|n| n.to_str()).map(str::to_owned))
        .filter(|n| n.starts_with("seq-"))
        .collect())
}

/// Loads a 7-Scenes-style tree: `root/seq-XX/frame-NNNNNN.color.png` with a
/// matching `frame-NNNNNN.pose.txt` holding a 4×4 camera-to-world matrix.
pub fn load_seven_scenes_style(root: &Path, split: Split) -> Result<Vec<DatasetSample>, DataError> {
    let mut out = Vec::new();
    for seq in split_sequences(root, split)? {
        let dir = root.join(&seq);
        let mut frames: BTreeMap<usize, PathBuf> = BTreeMap::new();
        for path in read_dir_sorted(&dir)? {
            let name = match path.file_name().and_then(|n| n.to_str()) {
                Some(n) => n,
                None => continue,
            };
            if let Some(stem) = name.strip_suffix(".color.png") {
                if let Some(idx) = stem.strip_prefix("frame-").and_then(|s| s.parse().ok()) {
                    frames.insert(idx, path.clone());
                }
            }
        }
        for (idx, img_path) in frames {
            let pose_path = dir.join(format!("frame-{idx:06}.pose.txt"));
            if !pose_path.exists() {
                return Err(DataError::MissingPose {
                    frame: format!("{seq}/frame-{idx:06}"),
                    path: pose_path,
                });
            }
            out.push(DatasetSample {
                image: load_image(&img_path)?,
                pose: read_pose_any(&pose_path)?,
                sequence_id: seq.clone(),
                frame_index: idx,
            });
        }
    }
    if out.is_empty() {
        return Err(DataError::Empty(root.to_owned()));
    }
    Ok(out)
}

/// Loads a manifest: one `sequence_id frame_index image_relpath pose_relpath`
/// line per sample, paths relative to the manifest's directory. Samples are
/// returned ordered by `(sequence_id, frame_index)`.
pub fn load_manifest(path: &Path) -> Result<Vec<DatasetSample>, DataError> {
    let text = fs::read_to_string(path).map_err(|source| DataError::Io {
        path: path.to_owned(),
        source,
    })?;
    let base = path.parent().unwrap_or_else(|| Path::new("."));
    let mut rows = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let bad = |msg: String| DataError::Manifest {
            path: path.to_owned(),
            line: i + 1,
            msg,
        };
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 4 {
            return Err(bad(format!("expected 4 fields, found {}", fields.len())));
        }
        let frame: usize = fields[1]
            .parse()
            .map_err(|_| bad(format!("bad frame index {:?}", fields[1])))?;
        rows.push((
            fields[0].to_string(),
            frame,
            base.join(fields[2]),
            base.join(fields[3]),
        ));
    }
    rows.sort_by(|a, b| (&a.0, a.1).cmp(&(&b.0, b.1)));
    if rows
        .windows(2)
        .any(|w| w[0].0 == w[1].0 && w[0].1 == w[1].1)
    {
        return Err(DataError::Manifest {
            path: path.to_owned(),
            line: 0,
            msg: "duplicate (sequence_id, frame_index)".into(),
        });
    }
    let mut out = Vec::with_capacity(rows.len());
    for (seq, frame, img, pose) in rows {
        if !pose.exists() {
            return Err(DataError::MissingPose {
                frame: format!("{seq}/{frame}"),
                path: pose,
            });
        }
        out.push(DatasetSample {
            image: load_image(&img)?,
            pose: read_pose_any(&pose)?,
            sequence_id: seq,
            frame_index: frame,
        });
    }
    if out.is_empty() {
        return Err(DataError::Empty(path.to_owned()));
    }
    Ok(out)
}

/// Writes samples as 8-bit PNGs plus single-line pose files and a manifest.
/// Returns the manifest path.
pub fn write_dataset(dir: &Path, samples: &[DatasetSample]) -> Result<PathBuf, DataError> {
    let io = |path: &Path| {
        let path = path.to_owned();
        move |source| DataError::Io { path, source }
    };
    fs::create_dir_all(dir).map_err(io(dir))?;
    let mut manifest = String::new();
    for s in samples {
        let stem = format!("{}-{:06}", s.sequence_id, s.frame_index);
        let img_rel = format!("{stem}.png");
        let pose_rel = format!("{stem}.pose.txt");
        let rgb8 = image::DynamicImage::ImageRgb32F(s.image.clone()).to_rgb8();
        rgb8.save(dir.join(&img_rel))
            .map_err(|source| DataError::Image {
                path: dir.join(&img_rel),
                source,
            })?;
        write_pose_file(
            &dir.join(&pose_rel),
            &[StampedPose {
                timestamp: s.frame_index as f64,
                pose: s.pose,
            }],
        )?;
        manifest.push_str(&format!(
            "{} {} {} {}\n",
            s.sequence_id, s.frame_index, img_rel, pose_rel
        ));
    }
    let path = dir.join("manifest.txt");
    fs::write(&path, manifest).map_err(io(&path))?;
    Ok(path)
}
