//! Quaternion and pose mathematics.
//!
//! Quaternions are stored scalar-first as `(u, v)` with `u` the real part and
//! `v` the imaginary 3-vector. Every [`Pose`] holds its orientation in the
//! canonical hemisphere (`u >= 0`, ties broken on the first nonzero component
//! of `v`), which makes the log map single-valued.

use nalgebra::{Matrix3, Vector3, Vector4};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub type Vec3 = Vector3<f64>;

/// Tolerance on `|q| - 1` accepted before a quaternion is rejected.
pub const UNIT_TOLERANCE: f64 = 1e-6;

/// Below this imaginary-part norm the log map returns the zero vector.
pub const LOG_EPSILON: f64 = 1e-8;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("quaternion is not unit length (norm {norm})")]
    InvalidQuaternion { norm: f64 },
    #[error("non-finite value in {what}")]
    NonFinite { what: &'static str },
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct UnitQuaternion {
    pub u: f64,
    pub v: Vec3,
}

impl UnitQuaternion {
    /// Builds a quaternion from scalar-first components, renormalizing.
    ///
    /// The components must already be unit length within [`UNIT_TOLERANCE`].
    /// The result is not canonicalized.
    pub fn new(u: f64, vx: f64, vy: f64, vz: f64) -> Result<Self, GeometryError> {
        let norm = (u * u + vx * vx + vy * vy + vz * vz).sqrt();
        if !norm.is_finite() {
            return Err(GeometryError::NonFinite { what: "quaternion" });
        }
        if (norm - 1.0).abs() > UNIT_TOLERANCE {
            return Err(GeometryError::InvalidQuaternion { norm });
        }
        // leave unit input bit-identical so that canonicalization is idempotent
        let norm = if (norm - 1.0).abs() <= 4.0 * f64::EPSILON {
            1.0
        } else {
            norm
        };
        Ok(Self {
            u: u / norm,
            v: Vec3::new(vx, vy, vz) / norm,
        })
    }

    /// Normalizes an arbitrary nonzero 4-vector.
    pub fn from_unnormalized(u: f64, vx: f64, vy: f64, vz: f64) -> Result<Self, GeometryError> {
        let norm = (u * u + vx * vx + vy * vy + vz * vz).sqrt();
        if !norm.is_finite() || norm == 0.0 {
            return Err(GeometryError::InvalidQuaternion { norm });
        }
        Ok(Self {
            u: u / norm,
            v: Vec3::new(vx, vy, vz) / norm,
        })
    }

    pub fn identity() -> Self {
        Self {
            u: 1.0,
            v: Vec3::zeros(),
        }
    }

    /// Rotation of `angle` radians about `axis` (which need not be normalized).
    pub fn from_axis_angle(axis: &Vec3, angle: f64) -> Self {
        let axis = axis.normalize();
        let half = 0.5 * angle;
        Self {
            u: half.cos(),
            v: axis * half.sin(),
        }
    }

    pub fn norm(&self) -> f64 {
        (self.u * self.u + self.v.norm_squared()).sqrt()
    }

    pub fn dot(&self, other: &Self) -> f64 {
        self.u * other.u + self.v.dot(&other.v)
    }

    /// Hamilton product `self * other`.
    pub fn compose(&self, other: &Self) -> Self {
        Self {
            u: self.u * other.u - self.v.dot(&other.v),
            v: other.v * self.u + self.v * other.u + self.v.cross(&other.v),
        }
    }

    pub fn as_vector4(&self) -> Vector4<f64> {
        Vector4::new(self.u, self.v.x, self.v.y, self.v.z)
    }

    pub fn to_array(&self) -> [f64; 4] {
        [self.u, self.v.x, self.v.y, self.v.z]
    }

    /// The rotation matrix this quaternion applies to column vectors.
    pub fn to_rotation_matrix(&self) -> Matrix3<f64> {
        let (w, x, y, z) = (self.u, self.v.x, self.v.y, self.v.z);
        Matrix3::new(
            1.0 - 2.0 * (y * y + z * z),
            2.0 * (x * y - w * z),
            2.0 * (x * z + w * y),
            2.0 * (x * y + w * z),
            1.0 - 2.0 * (x * x + z * z),
            2.0 * (y * z - w * x),
            2.0 * (x * z - w * y),
            2.0 * (y * z + w * x),
            1.0 - 2.0 * (x * x + y * y),
        )
    }

    /// Converts an orthonormal, right-handed rotation matrix.
    ///
    /// Returns `None` when `m` deviates from a rotation by more than
    /// `tolerance` (max-abs entry of `mᵀm - I`, or a non-positive determinant).
    pub fn from_rotation_matrix(m: &Matrix3<f64>, tolerance: f64) -> Option<Self> {
        if m.iter().any(|x| !x.is_finite()) {
            return None;
        }
        let gram = m.transpose() * m - Matrix3::identity();
        if gram.amax() > tolerance || m.determinant() <= 0.0 {
            return None;
        }
        let rot = nalgebra::Rotation3::from_matrix_unchecked(*m);
        let q = nalgebra::UnitQuaternion::from_rotation_matrix(&rot);
        Self::from_unnormalized(q.w, q.i, q.j, q.k).ok()
    }
}

impl std::ops::Neg for UnitQuaternion {
    type Output = Self;

    fn neg(self) -> Self {
        Self {
            u: -self.u,
            v: -self.v,
        }
    }
}

/// Tangent-space (log-map) image of a unit quaternion.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogQuaternion(pub Vec3);

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Pose {
    pub p: Vec3,
    q: UnitQuaternion,
}

impl Pose {
    /// Creates a pose, storing the orientation in canonical form.
    pub fn new(p: Vec3, q: UnitQuaternion) -> Result<Self, GeometryError> {
        if p.iter().any(|x| !x.is_finite()) {
            return Err(GeometryError::NonFinite { what: "position" });
        }
        Ok(Self {
            p,
            q: canonicalize(&q)?,
        })
    }

    pub fn identity() -> Self {
        Self {
            p: Vec3::zeros(),
            q: UnitQuaternion::identity(),
        }
    }

    pub fn q(&self) -> &UnitQuaternion {
        &self.q
    }

    pub fn log_q(&self) -> LogQuaternion {
        quat_log(&self.q)
    }
}

/// Difference between two poses as consumed by the temporal loss.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RelativePose {
    pub dp: Vec3,
    /// Componentwise difference of the canonical quaternions, scalar first.
    pub dq: Vector4<f64>,
}

impl std::ops::Neg for RelativePose {
    type Output = Self;

    fn neg(self) -> Self {
        Self {
            dp: -self.dp,
            dq: -self.dq,
        }
    }
}

/// Maps `q` to the canonical hemisphere and renormalizes it.
pub fn canonicalize(q: &UnitQuaternion) -> Result<UnitQuaternion, GeometryError> {
    let q = UnitQuaternion::new(q.u, q.v.x, q.v.y, q.v.z)?;
    let flip = if q.u > 0.0 {
        false
    } else if q.u < 0.0 {
        true
    } else {
        q.v.iter().find(|c| **c != 0.0).is_some_and(|c| *c < 0.0)
    };
    let mut out = if flip { -q } else { q };
    // keep +0.0 so that the canonical representative is bit-unique
    if out.u == 0.0 {
        out.u = 0.0;
    }
    Ok(out)
}

/// Log map `v/|v| * acos(u)`, or zero when `|v| <= LOG_EPSILON`.
pub fn quat_log(q: &UnitQuaternion) -> LogQuaternion {
    let vn = q.v.norm();
    if vn <= LOG_EPSILON {
        return LogQuaternion(Vec3::zeros());
    }
    // atan2 equals acos(u) on the unit sphere and stays accurate near u = 1.
    let angle = vn.atan2(q.u);
    LogQuaternion(q.v * (angle / vn))
}

/// Inverse of [`quat_log`].
pub fn quat_exp(w: &LogQuaternion) -> Result<UnitQuaternion, GeometryError> {
    let w = w.0;
    if w.iter().any(|x| !x.is_finite()) {
        return Err(GeometryError::NonFinite {
            what: "log quaternion",
        });
    }
    let theta = w.norm();
    if theta > LOG_EPSILON {
        Ok(UnitQuaternion {
            u: theta.cos(),
            v: w * (theta.sin() / theta),
        })
    } else {
        UnitQuaternion::from_unnormalized(1.0, w.x, w.y, w.z)
    }
}

/// Euclidean distance in meters.
pub fn position_error(p: &Vec3, p_hat: &Vec3) -> f64 {
    (p - p_hat).norm()
}

/// Geodesic angle between two orientations, in degrees, within `[0, 180]`.
///
/// Equal to `2 acos(|<q, q_hat>|)`. It is evaluated as `2 atan2(|v|, |u|)` of
/// the difference rotation `conj(q) * q_hat`, which stays exact for `q_hat = ±q`
/// where the `acos` form loses about 1e-6 degrees to rounding.
pub fn rotation_error(q: &UnitQuaternion, q_hat: &UnitQuaternion) -> f64 {
    let conj = UnitQuaternion { u: q.u, v: -q.v };
    let diff = conj.compose(q_hat);
    2.0 * diff.v.norm().atan2(diff.u.abs()).to_degrees()
}

pub fn relative_pose(a: &Pose, b: &Pose) -> RelativePose {
    RelativePose {
        dp: a.p - b.p,
        dq: a.q.as_vector4() - b.q.as_vector4(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use std::f64::consts::{FRAC_1_SQRT_2, FRAC_PI_4, PI};

    fn q(u: f64, x: f64, y: f64, z: f64) -> UnitQuaternion {
        UnitQuaternion::new(u, x, y, z).unwrap()
    }

    /// Independent axis-angle oracle: a rotation of `angle` about a unit axis
    /// has log-quaternion `axis * angle / 2`.
    fn axis_angle_log(axis: Vec3, angle: f64) -> Vec3 {
        axis.normalize() * (angle / 2.0)
    }

    #[test]
    fn canonicalize_examples() {
        let c = canonicalize(&q(1.0, 0.0, 0.0, 0.0)).unwrap();
        assert_eq!(c.to_array(), [1.0, 0.0, 0.0, 0.0]);

        let c = canonicalize(&q(-FRAC_1_SQRT_2, -FRAC_1_SQRT_2, 0.0, 0.0)).unwrap();
        assert_abs_diff_eq!(c.u, FRAC_1_SQRT_2, epsilon = 1e-15);
        assert_abs_diff_eq!(c.v.x, FRAC_1_SQRT_2, epsilon = 1e-15);

        let c = canonicalize(&q(0.0, 0.0, -1.0, 0.0)).unwrap();
        assert_eq!(c.to_array(), [0.0, 0.0, 1.0, 0.0]);
        assert!(c.u.is_sign_positive());
    }

    #[test]
    fn canonicalize_rejects_non_unit() {
        let bad = UnitQuaternion {
            u: 2.0,
            v: Vec3::zeros(),
        };
        assert!(matches!(
            canonicalize(&bad),
            Err(GeometryError::InvalidQuaternion { .. })
        ));
    }

    #[test]
    fn quat_log_examples() {
        assert_eq!(quat_log(&UnitQuaternion::identity()).0, Vec3::zeros());
        let l = quat_log(&q(FRAC_1_SQRT_2, FRAC_1_SQRT_2, 0.0, 0.0));
        assert_abs_diff_eq!(l.0, Vec3::new(FRAC_PI_4, 0.0, 0.0), epsilon = 1e-15);

        let l = quat_log(&q(0.3f64.cos(), 0.3f64.sin(), 0.0, 0.0));
        let oracle = axis_angle_log(Vec3::x(), 0.6);
        assert_abs_diff_eq!(l.0, oracle, epsilon = 1e-15);
        assert_abs_diff_eq!(l.0.x, 0.3, epsilon = 1e-15);
    }

    #[test]
    fn quat_log_tiny_imaginary_is_zero() {
        let tiny = UnitQuaternion {
            u: 1.0,
            v: Vec3::new(1e-9, 0.0, 0.0),
        };
        assert_eq!(quat_log(&tiny).0, Vec3::zeros());
    }

    #[test]
    fn quat_exp_examples() {
        let e = quat_exp(&LogQuaternion(Vec3::zeros())).unwrap();
        assert_eq!(e.to_array(), [1.0, 0.0, 0.0, 0.0]);
        let e = quat_exp(&LogQuaternion(Vec3::new(FRAC_PI_4, 0.0, 0.0))).unwrap();
        assert_abs_diff_eq!(e.u, FRAC_1_SQRT_2, epsilon = 1e-15);
        assert_abs_diff_eq!(e.v.x, FRAC_1_SQRT_2, epsilon = 1e-15);

        let w = Vec3::new(0.1, 0.2, 0.3);
        let back = quat_log(&quat_exp(&LogQuaternion(w)).unwrap());
        assert_abs_diff_eq!(back.0, w, epsilon = 1e-9);

        let nan = LogQuaternion(Vec3::new(f64::NAN, 0.0, 0.0));
        assert!(quat_exp(&nan).is_err());
    }

    #[test]
    fn position_error_examples() {
        let o = Vec3::zeros();
        assert_eq!(position_error(&o, &o), 0.0);
        assert_eq!(position_error(&Vec3::new(1.0, 0.0, 0.0), &o), 1.0);
        assert_abs_diff_eq!(
            position_error(&Vec3::new(1.0, 2.0, 2.0), &o),
            (1.0f64 + 4.0 + 4.0).sqrt(),
            epsilon = 1e-15
        );
    }

    #[test]
    fn rotation_error_examples() {
        let id = UnitQuaternion::identity();
        assert_eq!(rotation_error(&id, &id), 0.0);
        let z90 = q(FRAC_1_SQRT_2, 0.0, 0.0, FRAC_1_SQRT_2);
        assert_abs_diff_eq!(rotation_error(&id, &z90), 90.0, epsilon = 1e-9);
        let x = q(0.15f64.cos(), 0.15f64.sin(), 0.0, 0.0);
        // axis-angle oracle: the quaternion encodes a 0.3 rad rotation
        assert_abs_diff_eq!(rotation_error(&id, &x), 0.3f64.to_degrees(), epsilon = 1e-9);
        assert_abs_diff_eq!(rotation_error(&id, &x), 17.1887, epsilon = 1e-4);
    }

    #[test]
    fn relative_pose_examples() {
        let a = Pose::new(Vec3::new(1.0, 1.0, 1.0), UnitQuaternion::identity()).unwrap();
        let b = Pose::new(Vec3::new(0.0, 1.0, 1.0), UnitQuaternion::identity()).unwrap();
        let r = relative_pose(&a, &a);
        assert_eq!(r.dp, Vec3::zeros());
        assert_eq!(r.dq, Vector4::zeros());
        let r = relative_pose(&a, &b);
        assert_eq!(r.dp, Vec3::new(1.0, 0.0, 0.0));
        assert_eq!(r.dq, Vector4::zeros());
    }

    #[test]
    fn rotation_matrix_round_trip() {
        let z90 = Matrix3::new(0.0, -1.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0);
        let qz = UnitQuaternion::from_rotation_matrix(&z90, 1e-4).unwrap();
        let c = canonicalize(&qz).unwrap();
        assert_abs_diff_eq!(c.u, FRAC_1_SQRT_2, epsilon = 1e-12);
        assert_abs_diff_eq!(c.v.z, FRAC_1_SQRT_2, epsilon = 1e-12);
        assert_abs_diff_eq!(c.to_rotation_matrix(), z90, epsilon = 1e-12);

        let skew = Matrix3::new(1.0, 0.1, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0);
        assert!(UnitQuaternion::from_rotation_matrix(&skew, 1e-4).is_none());
    }

    fn unit_quat() -> impl Strategy<Value = UnitQuaternion> {
        prop::array::uniform4(-1.0f64..1.0)
            .prop_filter("nonzero", |a| a.iter().map(|x| x * x).sum::<f64>() > 1e-3)
            .prop_map(|a| UnitQuaternion::from_unnormalized(a[0], a[1], a[2], a[3]).unwrap())
    }

    fn vec3() -> impl Strategy<Value = Vec3> {
        prop::array::uniform3(-10.0f64..10.0).prop_map(|a| Vec3::new(a[0], a[1], a[2]))
    }

    proptest! {
        #[test]
        fn canonical_form_invariants(q in unit_quat()) {
            let c = canonicalize(&q).unwrap();
            prop_assert!((c.norm() - 1.0).abs() < 1e-9);
            prop_assert!(c.u >= 0.0);
            prop_assert!(rotation_error(&q, &c) < 1e-6);
            prop_assert!(quat_log(&c).0.norm() <= PI / 2.0 + 1e-12);
            prop_assert_eq!(canonicalize(&c).unwrap(), c);
            prop_assert_eq!(canonicalize(&-c).unwrap(), c);
        }

        #[test]
        fn hemisphere_equivalence(q in unit_quat()) {
            let a = quat_log(&canonicalize(&q).unwrap());
            let b = quat_log(&canonicalize(&-q).unwrap());
            prop_assert_eq!(a, b);
            prop_assert_eq!(rotation_error(&q, &-q), 0.0);
        }

        #[test]
        fn same_axis_angles_add(a in 0.0f64..90.0, b in 0.0f64..90.0, axis in vec3()) {
            prop_assume!(axis.norm() > 1e-3);
            let qa = UnitQuaternion::from_axis_angle(&axis, a.to_radians());
            let qb = UnitQuaternion::from_axis_angle(&axis, b.to_radians());
            let err = rotation_error(&UnitQuaternion::identity(), &qa.compose(&qb));
            prop_assert!((err - (a + b)).abs() < 1e-6);
        }

        #[test]
        fn position_error_triangle(a in vec3(), b in vec3(), c in vec3()) {
            prop_assert!(position_error(&a, &c) <= position_error(&a, &b) + position_error(&b, &c) + 1e-12);
            prop_assert_eq!(position_error(&a, &b), position_error(&b, &a));
        }

        #[test]
        fn relative_pose_antisymmetric(pa in vec3(), pb in vec3(), qa in unit_quat(), qb in unit_quat()) {
            let a = Pose::new(pa, qa).unwrap();
            let b = Pose::new(pb, qb).unwrap();
            prop_assert_eq!(relative_pose(&a, &b), -relative_pose(&b, &a));
        }
    }
}
