//! Evaluation against ground truth and error aggregation.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{preprocess, DataError, DatasetSample, PreprocessConfig};
use crate::geometry::{position_error, rotation_error, Pose, Vec3};
use crate::model::{ModelError, PoseNet};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("cannot evaluate an empty dataset")]
    Empty,
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Median with the midpoint convention for even lengths.
pub fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    })
}

pub fn mean(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        None
    } else {
        Some(values.iter().sum::<f64>() / values.len() as f64)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ErrorSummary {
    pub median: f64,
    pub mean: f64,
}

impl ErrorSummary {
    /// Summary of a non-empty list.
    pub fn of(values: &[f64]) -> Option<Self> {
        Some(Self {
            median: median(values)?,
            mean: mean(values)?,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrameResult {
    pub sequence_id: String,
    pub frame_index: usize,
    pub predicted_p: Vec3,
    /// Scalar-first canonical quaternion.
    pub predicted_q: [f64; 4],
    pub position_error: f64,
    pub rotation_error: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SequenceMetrics {
    pub frames: usize,
    pub position: ErrorSummary,
    pub rotation: ErrorSummary,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub frames: Vec<FrameResult>,
    /// Metres.
    pub position: ErrorSummary,
    /// Degrees.
    pub rotation: ErrorSummary,
    pub sequences: BTreeMap<String, SequenceMetrics>,
}

impl MetricsReport {
    /// Aggregates per-frame results; `None` when there are none.
    pub fn from_frames(frames: Vec<FrameResult>) -> Option<Self> {
        let pos: Vec<f64> = frames.iter().map(|f| f.position_error).collect();
        let rot: Vec<f64> = frames.iter().map(|f| f.rotation_error).collect();
        let position = ErrorSummary::of(&pos)?;
        let rotation = ErrorSummary::of(&rot)?;
        let mut by_seq: BTreeMap<&str, (Vec<f64>, Vec<f64>)> = BTreeMap::new();
        for f in &frames {
            let e = by_seq.entry(&f.sequence_id).or_default();
            e.0.push(f.position_error);
            e.1.push(f.rotation_error);
        }
        let sequences = by_seq
            .into_iter()
            .map(|(k, (p, r))| {
                let m = SequenceMetrics {
                    frames: p.len(),
                    position: ErrorSummary::of(&p).expect("non-empty"),
                    rotation: ErrorSummary::of(&r).expect("non-empty"),
                };
                (k.to_string(), m)
            })
            .collect();
        Some(Self {
            frames,
            position,
            rotation,
            sequences,
        })
    }

    pub fn position_errors(&self) -> Vec<f64> {
        self.frames.iter().map(|f| f.position_error).collect()
    }

    pub fn rotation_errors(&self) -> Vec<f64> {
        self.frames.iter().map(|f| f.rotation_error).collect()
    }

    /// Median errors as a table cell, e.g. `0.20m, 7.56°`.
    pub fn summary_line(&self) -> String {
        format!("{:.2}m, {:.2}°", self.position.median, self.rotation.median)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn from_json(s: &str) -> serde_json::Result<Self> {
        serde_json::from_str(s)
    }
}

/// Scores predictions against ground truth frame by frame.
pub fn score(predicted: &[Pose], samples: &[DatasetSample]) -> Result<MetricsReport, EvalError> {
    let frames = predicted
        .iter()
        .zip(samples)
        .map(|(pred, s)| FrameResult {
            sequence_id: s.sequence_id.clone(),
            frame_index: s.frame_index,
            predicted_p: pred.p,
            predicted_q: pred.q().to_array(),
            position_error: position_error(&pred.p, &s.pose.p),
            rotation_error: rotation_error(pred.q(), s.pose.q()),
        })
        .collect();
    MetricsReport::from_frames(frames).ok_or(EvalError::Empty)
}

/// Eval-mode predictions (center crop, no jitter, no dropout).
pub fn predict(
    model: &PoseNet,
    samples: &[DatasetSample],
    preprocess_cfg: &PreprocessConfig,
) -> Result<Vec<Pose>, EvalError> {
    let cfg = preprocess_cfg.for_eval();
    samples
        .iter()
        .map(|s| {
            let x = preprocess(&s.image, &cfg, 0)?;
            let (out, _) = model.forward(&x.view())?;
            Ok(Pose::new(out.p, out.q).map_err(ModelError::from)?)
        })
        .collect()
}

pub fn evaluate(
    model: &PoseNet,
    samples: &[DatasetSample],
    preprocess_cfg: &PreprocessConfig,
) -> Result<MetricsReport, EvalError> {
    if samples.is_empty() {
        return Err(EvalError::Empty);
    }
    score(&predict(model, samples, preprocess_cfg)?, samples)
}
