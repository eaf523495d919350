//! Saliency maps, feature-distance profiles and trajectory overlays.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::Vec3;
use crate::model::{ImageTensor, Mode, ModelError, PoseNet};
use crate::nn::zeros_like;
use crate::pose_io::StampedPose;

#[derive(Debug, Error)]
pub enum AnalysisError {
    #[error("anchor index {anchor} out of range for {len} frames")]
    AnchorOutOfRange { anchor: usize, len: usize },
    #[error("trajectory lengths differ: {predicted} predicted vs {ground_truth} ground truth")]
    LengthMismatch {
        predicted: usize,
        ground_truth: usize,
    },
    #[error("empty trajectory")]
    Empty,
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Image {
        path: PathBuf,
        source: image::ImageError,
    },
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Per-pixel input sensitivity, `[H, W]`, values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct SaliencyMap {
    pub values: Array2<f64>,
}

impl SaliencyMap {
    pub fn total(&self) -> f64 {
        self.values.sum()
    }

    /// Share of the total mass inside the inclusive box `(x0, y0, x1, y1)`.
    pub fn mass_fraction(&self, bbox: (usize, usize, usize, usize)) -> f64 {
        let total = self.total();
        if total == 0.0 {
            return 0.0;
        }
        let (x0, y0, x1, y1) = bbox;
        let inside: f64 = self
            .values
            .indexed_iter()
            .filter(|((y, x), _)| (y0..=y1).contains(y) && (x0..=x1).contains(x))
            .map(|(_, v)| v)
            .sum();
        inside / total
    }

    /// One row per line, space-separated.
    pub fn to_text_grid(&self) -> String {
        let mut s = String::new();
        for row in self.values.rows() {
            let line: Vec<String> = row.iter().map(|v| format!("{v:.6}")).collect();
            s.push_str(&line.join(" "));
            s.push('\n');
        }
        s
    }

    pub fn write_png(&self, path: &Path) -> Result<(), AnalysisError> {
        let (h, w) = self.values.dim();
        let img = image::GrayImage::from_fn(w as u32, h as u32, |x, y| {
            image::Luma([(self.values[[y as usize, x as usize]] * 255.0).round() as u8])
        });
        img.save(path).map_err(|source| AnalysisError::Image {
            path: path.to_owned(),
            source,
        })
    }
}

/// Gradient of `sum |p| + sum |logq|` with respect to the input pixels,
/// reduced over channels by maximum absolute value and scaled so the peak is 1.
pub fn saliency(model: &PoseNet, image: &ImageTensor) -> Result<SaliencyMap, AnalysisError> {
    let (out, cache) = model.forward_cached(&image.view(), Mode::Eval)?;
    let sign = |v: &Vec3| {
        v.map(|x| {
            if x > 0.0 {
                1.0
            } else if x < 0.0 {
                -1.0
            } else {
                0.0
            }
        })
    };
    let mut scratch = zeros_like(model);
    let g = model.backward(&cache, &sign(&out.p), &sign(&out.logq), &mut scratch);
    let (_, h, w) = g.dim();
    let mut values = Array2::from_shape_fn((h, w), |(y, x)| {
        (0..3).map(|c| g[[c, y, x]].abs()).fold(0.0, f64::max)
    });
    let peak = values.iter().copied().fold(0.0, f64::max);
    if peak > 0.0 {
        values.mapv_inplace(|v| v / peak);
    }
    Ok(SaliencyMap { values })
}

/// Where features are taken from.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FeaturePoint {
    /// Output of the attention block (the encoder output if there is none).
    #[default]
    PostAttention,
    PreAttention,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureDistanceProfile {
    pub anchor_index: usize,
    pub distances: Vec<f64>,
}

pub fn extract_features(
    model: &PoseNet,
    frame: &ImageTensor,
    point: FeaturePoint,
) -> Result<Vec<f64>, AnalysisError> {
    let x = model.encode(&frame.view())?;
    let f = match point {
        FeaturePoint::PreAttention => x,
        FeaturePoint::PostAttention => model.attend(&x.view())?.0,
    };
    Ok(f.to_vec())
}

/// L2 distance of every frame's features to those of `frames[anchor]`.
pub fn feature_distances(
    model: &PoseNet,
    frames: &[ImageTensor],
    anchor: usize,
    point: FeaturePoint,
) -> Result<FeatureDistanceProfile, AnalysisError> {
    if anchor >= frames.len() {
        return Err(AnalysisError::AnchorOutOfRange {
            anchor,
            len: frames.len(),
        });
    }
    let feats = frames
        .iter()
        .map(|f| extract_features(model, f, point))
        .collect::<Result<Vec<_>, _>>()?;
    let a = &feats[anchor];
    let distances = feats
        .iter()
        .map(|f| {
            f.iter()
                .zip(a)
                .map(|(x, y)| (x - y) * (x - y))
                .sum::<f64>()
                .sqrt()
        })
        .collect();
    Ok(FeatureDistanceProfile {
        anchor_index: anchor,
        distances,
    })
}

/// Ranks starting at 1; ties share their average rank.
pub fn ranks(values: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut out = vec![0.0; values.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && values[idx[j + 1]] == values[idx[i]] {
            j += 1;
        }
        let rank = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            out[k] = rank;
        }
        i = j + 1;
    }
    out
}

/// Spearman rank correlation; `None` for fewer than two points or constant input.
pub fn spearman(a: &[f64], b: &[f64]) -> Option<f64> {
    if a.len() != b.len() || a.len() < 2 {
        return None;
    }
    let (ra, rb) = (ranks(a), ranks(b));
    let n = a.len() as f64;
    let (ma, mb) = (ra.iter().sum::<f64>() / n, rb.iter().sum::<f64>() / n);
    let mut cov = 0.0;
    let (mut va, mut vb) = (0.0, 0.0);
    for (x, y) in ra.iter().zip(&rb) {
        cov += (x - ma) * (y - mb);
        va += (x - ma) * (x - ma);
        vb += (y - mb) * (y - mb);
    }
    if va == 0.0 || vb == 0.0 {
        return None;
    }
    Some(cov / (va * vb).sqrt())
}

/// Arc length along `positions` from `anchor` to every other index.
pub fn path_distances(positions: &[Vec3], anchor: usize) -> Vec<f64> {
    let mut cum = vec![0.0; positions.len()];
    for i in 1..positions.len() {
        cum[i] = cum[i - 1] + (positions[i] - positions[i - 1]).norm();
    }
    cum.iter().map(|c| (c - cum[anchor]).abs()).collect()
}

/// An ordered, timestamped pose sequence.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Trajectory(pub Vec<StampedPose>);

impl Trajectory {
    /// Top-down `(x, y)` vertices in world units.
    pub fn top_down(&self) -> Vec<[f64; 2]> {
        self.0.iter().map(|s| [s.pose.p.x, s.pose.p.y]).collect()
    }
}

/// Vertices of a written overlay, in world units.
#[derive(Clone, Debug, PartialEq)]
pub struct TrajectoryPlot {
    pub ground_truth: Vec<[f64; 2]>,
    pub predicted: Vec<[f64; 2]>,
}

const PLOT_SIZE: f64 = 600.0;
const PLOT_MARGIN: f64 = 30.0;

/// Writes a top-down SVG overlay: ground truth in black, prediction in red,
/// and a marker at the ground-truth start.
pub fn trajectory_plot(
    predicted: &Trajectory,
    ground_truth: &Trajectory,
    out_path: &Path,
) -> Result<TrajectoryPlot, AnalysisError> {
    if predicted.0.len() != ground_truth.0.len() {
        return Err(AnalysisError::LengthMismatch {
            predicted: predicted.0.len(),
            ground_truth: ground_truth.0.len(),
        });
    }
    if ground_truth.0.is_empty() {
        return Err(AnalysisError::Empty);
    }
    let plot = TrajectoryPlot {
        ground_truth: ground_truth.top_down(),
        predicted: predicted.top_down(),
    };
    fs::write(out_path, render_svg(&plot)).map_err(|source| AnalysisError::Io {
        path: out_path.to_owned(),
        source,
    })?;
    Ok(plot)
}

fn render_svg(plot: &TrajectoryPlot) -> String {
    let all = plot.ground_truth.iter().chain(&plot.predicted);
    let (mut lo, mut hi) = ([f64::INFINITY; 2], [f64::NEG_INFINITY; 2]);
    for v in all {
        for k in 0..2 {
            lo[k] = lo[k].min(v[k]);
            hi[k] = hi[k].max(v[k]);
        }
    }
    let span = (hi[0] - lo[0]).max(hi[1] - lo[1]).max(1e-9);
    let scale = (PLOT_SIZE - 2.0 * PLOT_MARGIN) / span;
    // y grows downwards in SVG
    let map = |v: &[f64; 2]| {
        (
            PLOT_MARGIN + (v[0] - lo[0]) * scale,
            PLOT_SIZE - PLOT_MARGIN - (v[1] - lo[1]) * scale,
        )
    };
    let points = |vs: &[[f64; 2]]| {
        vs.iter()
            .map(|v| {
                let (x, y) = map(v);
                format!("{x:.3},{y:.3}")
            })
            .collect::<Vec<_>>()
            .join(" ")
    };
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{PLOT_SIZE}" height="{PLOT_SIZE}" viewBox="0 0 {PLOT_SIZE} {PLOT_SIZE}">"#
    );
    let _ = writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<polyline id="ground-truth" fill="none" stroke="black" stroke-width="2" points="{}"/>"#,
        points(&plot.ground_truth)
    );
    let _ = writeln!(
        s,
        r#"<polyline id="prediction" fill="none" stroke="red" stroke-width="1.5" points="{}"/>"#,
        points(&plot.predicted)
    );
    let (sx, sy) = map(&plot.ground_truth[0]);
    let _ = writeln!(
        s,
        r#"<circle id="start" cx="{sx:.3}" cy="{sy:.3}" r="6" fill="none" stroke="blue" stroke-width="2"/>"#
    );
    s.push_str("</svg>\n");
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{Pose, UnitQuaternion};
    use crate::model::{Backbone, EncoderConfig, ModelConfig};
    use crate::nn::Params;
    use ndarray::Array3;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn model(attention: bool) -> PoseNet {
        PoseNet::new(
            ModelConfig {
                encoder: EncoderConfig {
                    backbone: Backbone::TinyResidual,
                    feature_dim: 16,
                    pretrained: false,
                    dropout_rate: 0.5,
                },
                attention,
                attention_ratio: 8,
                input_size: 24,
            },
            5,
        )
        .unwrap()
    }

    fn image(seed: u64) -> ImageTensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array3::from_shape_fn((3, 24, 24), |_| rng.random_range(-1.0..1.0))
    }

    fn checksum(m: &PoseNet) -> Vec<u64> {
        m.named_params()
            .iter()
            .flat_map(|(_, s)| s.iter().map(|v| v.to_bits()))
            .collect()
    }

    #[test]
    fn saliency_shape_range_and_read_only() {
        let m = model(true);
        let before = checksum(&m);
        let s = saliency(&m, &image(1)).unwrap();
        assert_eq!(s.values.dim(), (24, 24));
        assert!(s.values.iter().all(|v| (0.0..=1.0).contains(v)));
        assert_eq!(s.values.iter().copied().fold(0.0, f64::max), 1.0);
        assert_eq!(checksum(&m), before);
        let grid = s.to_text_grid();
        assert_eq!(grid.lines().count(), 24);
        assert_eq!(grid.lines().next().unwrap().split(' ').count(), 24);
    }

    #[test]
    fn constant_output_model_has_zero_saliency() {
        let mut m = model(true);
        m.regressor.zero_heads();
        let s = saliency(&m, &image(2)).unwrap();
        assert!(s.values.iter().all(|&v| v == 0.0));
        assert_eq!(s.mass_fraction((0, 0, 5, 5)), 0.0);
    }

    #[test]
    fn feature_distance_examples() {
        let m = model(true);
        let frames = vec![image(1), image(2), image(3)];
        let p = feature_distances(&m, &frames, 1, FeaturePoint::PostAttention).unwrap();
        assert_eq!(p.distances[1], 0.0);
        assert!(p.distances.iter().all(|&d| d >= 0.0));
        let dup = vec![image(4); 4];
        let p = feature_distances(&m, &dup, 0, FeaturePoint::PreAttention).unwrap();
        assert!(p.distances.iter().all(|&d| d == 0.0));
        assert!(matches!(
            feature_distances(&m, &frames, 3, FeaturePoint::PostAttention),
            Err(AnalysisError::AnchorOutOfRange { anchor: 3, len: 3 })
        ));
    }

    #[test]
    fn feature_distance_symmetry_and_extraction_point() {
        let m = model(true);
        let frames: Vec<_> = (0..4).map(image).collect();
        let from = |a| feature_distances(&m, &frames, a, FeaturePoint::PostAttention).unwrap();
        for i in 0..4 {
            for j in 0..4 {
                assert_eq!(from(j).distances[i], from(i).distances[j]);
            }
        }
        let pre = feature_distances(&m, &frames, 0, FeaturePoint::PreAttention).unwrap();
        assert_ne!(pre.distances, from(0).distances);
        let plain = model(false);
        let a = feature_distances(&plain, &frames, 0, FeaturePoint::PreAttention).unwrap();
        let b = feature_distances(&plain, &frames, 0, FeaturePoint::PostAttention).unwrap();
        assert_eq!(a, b);
    }

    /// Brute-force Spearman: rank by counting, then Pearson.
    fn spearman_oracle(a: &[f64], b: &[f64]) -> f64 {
        let rank = |v: &[f64]| -> Vec<f64> {
            v.iter()
                .map(|x| {
                    let less = v.iter().filter(|y| *y < x).count() as f64;
                    let eq = v.iter().filter(|y| *y == x).count() as f64;
                    less + (eq + 1.0) / 2.0
                })
                .collect()
        };
        let (ra, rb) = (rank(a), rank(b));
        let n = a.len() as f64;
        let ma = ra.iter().sum::<f64>() / n;
        let mb = rb.iter().sum::<f64>() / n;
        let cov: f64 = ra.iter().zip(&rb).map(|(x, y)| (x - ma) * (y - mb)).sum();
        let sa: f64 = ra.iter().map(|x| (x - ma).powi(2)).sum::<f64>().sqrt();
        let sb: f64 = rb.iter().map(|y| (y - mb).powi(2)).sum::<f64>().sqrt();
        cov / (sa * sb)
    }

    #[test]
    fn spearman_examples() {
        assert_eq!(spearman(&[1.0, 2.0, 3.0], &[10.0, 20.0, 30.0]), Some(1.0));
        assert_eq!(spearman(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]), Some(-1.0));
        assert_eq!(spearman(&[1.0, 1.0], &[1.0, 2.0]), None);
        assert_eq!(ranks(&[5.0, 1.0, 5.0, 2.0]), vec![3.5, 1.0, 3.5, 2.0]);
    }

    proptest! {
        #[test]
        fn spearman_matches_oracle(
            pairs in prop::collection::vec((0u8..6, -5.0f64..5.0), 3..40)
        ) {
            let a: Vec<f64> = pairs.iter().map(|p| p.0 as f64).collect();
            let b: Vec<f64> = pairs.iter().map(|p| p.1).collect();
            if let Some(r) = spearman(&a, &b) {
                prop_assert!((r - spearman_oracle(&a, &b)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn path_distance_is_arc_length() {
        let pts: Vec<Vec3> = [0.0, 1.0, 3.0, 6.0]
            .iter()
            .map(|x| Vec3::new(*x, 0.0, 0.0))
            .collect();
        assert_eq!(path_distances(&pts, 1), vec![1.0, 0.0, 2.0, 5.0]);
    }

    fn line(offset: [f64; 2]) -> Trajectory {
        Trajectory(
            (0..5)
                .map(|i| StampedPose {
                    timestamp: i as f64,
                    pose: Pose::new(
                        Vec3::new(i as f64 + offset[0], offset[1], 0.0),
                        UnitQuaternion::identity(),
                    )
                    .unwrap(),
                })
                .collect(),
        )
    }

    #[test]
    fn trajectory_overlays() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.svg");
        let gt = line([0.0, 0.0]);
        let same = trajectory_plot(&gt, &gt, &path).unwrap();
        assert_eq!(same.predicted, same.ground_truth);
        let svg = fs::read_to_string(&path).unwrap();
        assert!(svg.contains(r#"stroke="black""#) && svg.contains(r#"stroke="red""#));
        assert!(svg.contains(r#"id="start""#));

        let shifted = trajectory_plot(&line([0.0, 0.5]), &gt, &path).unwrap();
        for (p, g) in shifted.predicted.iter().zip(&shifted.ground_truth) {
            assert_eq!(p[0], g[0]);
            assert_eq!(p[1] - g[1], 0.5);
        }
        let short = Trajectory(gt.0[..3].to_vec());
        assert!(matches!(
            trajectory_plot(&short, &gt, &path),
            Err(AnalysisError::LengthMismatch { .. })
        ));
    }
}
