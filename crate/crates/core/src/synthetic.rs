//! Procedural scene for desk-scale experiments: a camera moving through a
//! textured box, ray-cast at low resolution with exact ground-truth poses.

use image::{Rgb, Rgb32FImage};
use nalgebra::Matrix3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

use crate::data::DatasetSample;
use crate::geometry::{Pose, UnitQuaternion, Vec3};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Face {
    XNeg,
    XPos,
    YNeg,
    YPos,
    ZNeg,
    ZPos,
}

impl Face {
    pub const ALL: [Face; 6] = [
        Face::XNeg,
        Face::XPos,
        Face::YNeg,
        Face::YPos,
        Face::ZNeg,
        Face::ZPos,
    ];

    fn index(self) -> usize {
        self as usize
    }

    /// Axis normal to the face and the two in-plane axes used as texture coordinates.
    fn axes(self) -> (usize, usize, usize) {
        match self {
            Face::XNeg | Face::XPos => (0, 1, 2),
            Face::YNeg | Face::YPos => (1, 0, 2),
            Face::ZNeg | Face::ZPos => (2, 0, 1),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TextureMask {
    All,
    /// Only this face is textured; the others are a flat mid-gray.
    Only(Face),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneConfig {
    pub width: u32,
    pub height: u32,
    pub fov_deg: f64,
    /// The box spans `[-h, h]` on each axis; z is up.
    pub half_extent: [f64; 3],
    /// Rays per pixel side.
    pub supersample: u32,
    pub textured: TextureMask,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            width: 64,
            height: 64,
            fov_deg: 70.0,
            half_extent: [4.0, 2.0, 1.5],
            supersample: 2,
            textured: TextureMask::All,
        }
    }
}

const WAVES: usize = 6;

#[derive(Clone, Debug, PartialEq)]
struct Wave {
    freq: [f64; 2],
    phase: [f64; 3],
    amp: f64,
}

#[derive(Clone, Debug, PartialEq)]
enum FaceTexture {
    Flat(f32),
    Waves { base: [f64; 3], waves: Vec<Wave> },
}

impl FaceTexture {
    fn random(rng: &mut impl Rng) -> Self {
        let base = [0.0; 3].map(|_: f64| rng.random_range(0.35..0.65));
        let waves = (0..WAVES)
            .map(|_| {
                let angle = rng.random_range(0.0..PI);
                // cycles per metre
                let f = rng.random_range(0.3..1.5) * 2.0 * PI;
                Wave {
                    freq: [f * angle.cos(), f * angle.sin()],
                    phase: [0.0; 3].map(|_: f64| rng.random_range(0.0..2.0 * PI)),
                    amp: rng.random_range(0.02..0.3 / WAVES as f64 * 2.0),
                }
            })
            .collect();
        FaceTexture::Waves { base, waves }
    }

    fn color(&self, s: f64, t: f64) -> [f64; 3] {
        match self {
            FaceTexture::Flat(v) => [*v as f64; 3],
            FaceTexture::Waves { base, waves } => {
                let mut c = *base;
                for w in waves {
                    let arg = w.freq[0] * s + w.freq[1] * t;
                    for (ch, cv) in c.iter_mut().enumerate() {
                        *cv += w.amp * (arg + w.phase[ch]).sin();
                    }
                }
                c.map(|v| v.clamp(0.0, 1.0))
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticScene {
    config: SceneConfig,
    textures: Vec<FaceTexture>,
}

impl SyntheticScene {
    pub fn new(config: SceneConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let textures = Face::ALL
            .iter()
            .map(|&f| {
                let tex = FaceTexture::random(&mut rng);
                match config.textured {
                    TextureMask::Only(only) if only != f => FaceTexture::Flat(0.5),
                    _ => tex,
                }
            })
            .collect();
        Self { config, textures }
    }

    pub fn config(&self) -> &SceneConfig {
        &self.config
    }

    /// Camera pose at path parameter `t ∈ [0, 1]`: a forward sweep along x
    /// with lateral and vertical sway and a yaw/pitch wobble.
    pub fn path_pose(&self, t: f64) -> Pose {
        let [hx, hy, hz] = self.config.half_extent;
        let p = Vec3::new(
            hx * (-0.6 + 1.2 * t),
            0.3 * hy * (1.5 * PI * t).sin(),
            0.2 * hz * (2.6 * PI * t).sin(),
        );
        let yaw = 0.35 * (1.2 * PI * t + 0.3).sin();
        let pitch = 0.1 * (2.0 * PI * t).sin();
        let forward = Vec3::new(
            yaw.cos() * pitch.cos(),
            yaw.sin() * pitch.cos(),
            pitch.sin(),
        );
        let right = forward.cross(&Vec3::z()).normalize();
        let down = forward.cross(&right);
        // camera frame: x right, y down, z forward
        let r = Matrix3::from_columns(&[right, down, forward]);
        let q =
            UnitQuaternion::from_rotation_matrix(&r, 1e-9).expect("camera basis is orthonormal");
        Pose::new(p, q).expect("finite pose")
    }

    fn focal(&self) -> f64 {
        0.5 * self.config.width as f64 / (0.5 * self.config.fov_deg.to_radians()).tan()
    }

    /// First face hit by a ray from inside the box, with the hit point.
    fn cast(&self, origin: &Vec3, dir: &Vec3) -> (Face, Vec3) {
        let mut best = (f64::INFINITY, Face::XPos);
        for axis in 0..3 {
            let h = self.config.half_extent[axis];
            let (t, face) = if dir[axis] > 0.0 {
                (
                    (h - origin[axis]) / dir[axis],
                    [Face::XPos, Face::YPos, Face::ZPos][axis],
                )
            } else if dir[axis] < 0.0 {
                (
                    (-h - origin[axis]) / dir[axis],
                    [Face::XNeg, Face::YNeg, Face::ZNeg][axis],
                )
            } else {
                continue;
            };
            if t < best.0 {
                best = (t, face);
            }
        }
        (best.1, origin + dir * best.0)
    }

    fn camera_ray(&self, rot: &Matrix3<f64>, px: f64, py: f64) -> Vec3 {
        let f = self.focal();
        let cx = 0.5 * self.config.width as f64;
        let cy = 0.5 * self.config.height as f64;
        rot * Vec3::new((px - cx) / f, (py - cy) / f, 1.0)
    }

    /// Renders the view from `pose`, which must lie inside the box.
    pub fn render(&self, pose: &Pose) -> Rgb32FImage {
        let rot = pose.q().to_rotation_matrix();
        let ss = self.config.supersample.max(1);
        let inv = 1.0 / (ss * ss) as f64;
        Rgb32FImage::from_fn(self.config.width, self.config.height, |x, y| {
            let mut acc = [0.0f64; 3];
            for sy in 0..ss {
                for sx in 0..ss {
                    let px = x as f64 + (sx as f64 + 0.5) / ss as f64;
                    let py = y as f64 + (sy as f64 + 0.5) / ss as f64;
                    let (face, hit) = self.cast(&pose.p, &self.camera_ray(&rot, px, py));
                    let (_, a, b) = face.axes();
                    let c = self.textures[face.index()].color(hit[a], hit[b]);
                    for ch in 0..3 {
                        acc[ch] += c[ch] * inv;
                    }
                }
            }
            Rgb(acc.map(|v| v as f32))
        })
    }

    /// Pixel-center face labels, row-major.
    pub fn face_map(&self, pose: &Pose) -> Vec<Face> {
        let rot = pose.q().to_rotation_matrix();
        let (w, h) = (self.config.width, self.config.height);
        (0..h)
            .flat_map(|y| (0..w).map(move |x| (x, y)))
            .map(|(x, y)| {
                self.cast(
                    &pose.p,
                    &self.camera_ray(&rot, x as f64 + 0.5, y as f64 + 0.5),
                )
                .0
            })
            .collect()
    }

    /// Inclusive pixel bounding box `(x0, y0, x1, y1)` of `face` in the view.
    pub fn face_bbox(&self, pose: &Pose, face: Face) -> Option<(u32, u32, u32, u32)> {
        let w = self.config.width;
        let mut bbox: Option<(u32, u32, u32, u32)> = None;
        for (i, f) in self.face_map(pose).into_iter().enumerate() {
            if f != face {
                continue;
            }
            let (x, y) = (i as u32 % w, i as u32 / w);
            bbox = Some(match bbox {
                None => (x, y, x, y),
                Some((x0, y0, x1, y1)) => (x0.min(x), y0.min(y), x1.max(x), y1.max(y)),
            });
        }
        bbox
    }

    /// Samples at the given path parameters, as one sequence.
    pub fn samples_at(&self, ts: &[f64], sequence_id: &str) -> Vec<DatasetSample> {
        ts.iter()
            .enumerate()
            .map(|(i, &t)| {
                let pose = self.path_pose(t);
                DatasetSample {
                    image: self.render(&pose),
                    pose,
                    sequence_id: sequence_id.to_string(),
                    frame_index: i,
                }
            })
            .collect()
    }

    /// `n` frames evenly spaced over the whole path, starting at `t = 0`.
    pub fn frames(&self, n: usize, sequence_id: &str) -> Vec<DatasetSample> {
        self.samples_at(&path_params(n, 0.0), sequence_id)
    }

    /// `n - 1` frames halfway between the frames of [`Self::frames`].
    pub fn midpoint_frames(&self, n: usize, sequence_id: &str) -> Vec<DatasetSample> {
        let mut ts = path_params(n, 0.5);
        ts.truncate(n.saturating_sub(1));
        self.samples_at(&ts, sequence_id)
    }
}

/// `t_i = (i + offset) / (n - 1)`; a single frame sits at `t = offset`.
pub fn path_params(n: usize, offset: f64) -> Vec<f64> {
    let denom = n.saturating_sub(1).max(1) as f64;
    (0..n).map(|i| (i as f64 + offset) / denom).collect()
}

/// The default scene sampled at `n_frames` evenly spaced path positions.
pub fn generate_synthetic_scene(n_frames: usize, seed: u64) -> Vec<DatasetSample> {
    SyntheticScene::new(SceneConfig::default(), seed).frames(n_frames, "synth")
}

/// Diagonal of the bounding box of the given positions.
pub fn path_extent(poses: &[Pose]) -> f64 {
    if poses.is_empty() {
        return 0.0;
    }
    let mut lo = poses[0].p;
    let mut hi = poses[0].p;
    for p in poses {
        lo = lo.inf(&p.p);
        hi = hi.sup(&p.p);
    }
    (hi - lo).norm()
}
