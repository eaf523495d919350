//! Text formats for poses.
//!
//! Two layouts are understood:
//!
//! * pose lines, `timestamp tx ty tz qu qvx qvy qvz`, whitespace separated,
//!   quaternion scalar first;
//! * homogeneous 4×4 camera-to-world matrices, 16 floats in row-major order,
//!   one matrix per file.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use nalgebra::Matrix3;
use thiserror::Error;

use crate::geometry::{GeometryError, Pose, UnitQuaternion, Vec3};

/// Maximum deviation from orthonormality accepted for a rotation block.
pub const ROTATION_TOLERANCE: f64 = 1e-4;

#[derive(Debug, Error)]
pub enum PoseIoError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{path}:{line}: {msg}")]
    Parse {
        path: PathBuf,
        line: usize,
        msg: String,
    },
    #[error("{path}: rotation block is not orthonormal")]
    NotOrthonormal { path: PathBuf },
    #[error("{path}: {source}")]
    Geometry {
        path: PathBuf,
        source: GeometryError,
    },
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StampedPose {
    pub timestamp: f64,
    pub pose: Pose,
}

fn parse_floats(s: &str) -> Result<Vec<f64>, String> {
    s.split_whitespace()
        .map(|t| {
            t.parse::<f64>()
                .map_err(|e| format!("bad number {t:?}: {e}"))
        })
        .collect()
}

/// Parses one `timestamp tx ty tz qu qvx qvy qvz` line.
pub fn parse_pose_line(line: &str) -> Result<StampedPose, String> {
    let vals = parse_floats(line)?;
    if vals.len() != 8 {
        return Err(format!("expected 8 values, found {}", vals.len()));
    }
    let q = UnitQuaternion::new(vals[4], vals[5], vals[6], vals[7]).map_err(|e| e.to_string())?;
    let pose = Pose::new(Vec3::new(vals[1], vals[2], vals[3]), q).map_err(|e| e.to_string())?;
    Ok(StampedPose {
        timestamp: vals[0],
        pose,
    })
}

/// Formats a pose line; values use the shortest round-trip decimal form.
pub fn format_pose_line(sp: &StampedPose) -> String {
    let p = sp.pose.p;
    let q = sp.pose.q();
    format!(
        "{} {} {} {} {} {} {} {}",
        sp.timestamp, p.x, p.y, p.z, q.u, q.v.x, q.v.y, q.v.z
    )
}

/// Reads a pose-line file. Blank lines and lines starting with `#` are skipped.
pub fn read_pose_file(path: &Path) -> Result<Vec<StampedPose>, PoseIoError> {
    let text = fs::read_to_string(path).map_err(|source| PoseIoError::Io {
        path: path.to_owned(),
        source,
    })?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let sp = parse_pose_line(line).map_err(|msg| PoseIoError::Parse {
            path: path.to_owned(),
            line: i + 1,
            msg,
        })?;
        out.push(sp);
    }
    Ok(out)
}

pub fn write_pose_file(path: &Path, poses: &[StampedPose]) -> Result<(), PoseIoError> {
    let io_err = |source| PoseIoError::Io {
        path: path.to_owned(),
        source,
    };
    let mut f = std::io::BufWriter::new(fs::File::create(path).map_err(io_err)?);
    for sp in poses {
        writeln!(f, "{}", format_pose_line(sp)).map_err(io_err)?;
    }
    f.flush().map_err(io_err)
}

/// Converts a row-major homogeneous matrix into a canonical pose.
///
/// Returns `None` if the rotation block is not orthonormal within
/// [`ROTATION_TOLERANCE`].
pub fn pose_from_matrix(m: &[f64; 16]) -> Option<Pose> {
    let rot = Matrix3::new(m[0], m[1], m[2], m[4], m[5], m[6], m[8], m[9], m[10]);
    let q = UnitQuaternion::from_rotation_matrix(&rot, ROTATION_TOLERANCE)?;
    Pose::new(Vec3::new(m[3], m[7], m[11]), q).ok()
}

pub fn pose_to_matrix(pose: &Pose) -> [f64; 16] {
    let r = pose.q().to_rotation_matrix();
    let p = pose.p;
    [
        r[(0, 0)],
        r[(0, 1)],
        r[(0, 2)],
        p.x,
        r[(1, 0)],
        r[(1, 1)],
        r[(1, 2)],
        p.y,
        r[(2, 0)],
        r[(2, 1)],
        r[(2, 2)],
        p.z,
        0.0,
        0.0,
        0.0,
        1.0,
    ]
}

/// Reads a single-pose file: either a 4×4 matrix or one pose line.
pub fn read_pose_any(path: &Path) -> Result<Pose, PoseIoError> {
    let text = fs::read_to_string(path).map_err(|source| PoseIoError::Io {
        path: path.to_owned(),
        source,
    })?;
    let vals = parse_floats(&text).map_err(|msg| PoseIoError::Parse {
        path: path.to_owned(),
        line: 0,
        msg,
    })?;
    match vals.len() {
        16 => {
            let mut m = [0.0; 16];
            m.copy_from_slice(&vals);
            pose_from_matrix(&m).ok_or_else(|| PoseIoError::NotOrthonormal {
                path: path.to_owned(),
            })
        }
        8 => parse_pose_line(text.trim())
            .map(|sp| sp.pose)
            .map_err(|msg| PoseIoError::Parse {
                path: path.to_owned(),
                line: 1,
                msg,
            }),
        n => Err(PoseIoError::Parse {
            path: path.to_owned(),
            line: 0,
            msg: format!("expected 16 matrix entries or an 8-value pose line, found {n} values"),
        }),
    }
}

pub fn write_matrix_file(path: &Path, pose: &Pose) -> Result<(), PoseIoError> {
    let m = pose_to_matrix(pose);
    let text: String = m
        .chunks(4)
        .map(|r| format!("{} {} {} {}\n", r[0], r[1], r[2], r[3]))
        .collect();
    fs::write(path, text).map_err(|source| PoseIoError::Io {
        path: path.to_owned(),
        source,
    })
}
