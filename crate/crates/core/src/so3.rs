//! Rotations in 3D: unit quaternions, rotation matrices, axis-angle vectors,
//! and the pinhole camera model built on them.
//!
//! Quaternions follow the Hamilton convention `(w, x, y, z)` with active
//! rotation `v' = q v q*`. Every constructed [`UnitQuaternion`] is normalized
//! and placed on the canonical hemisphere (`w >= 0`; when `w == 0` the first
//! nonzero of `x, y, z` is positive). The distance [`d_q`] is sign-invariant,
//! so the hemisphere is a convention for regression targets and diffs only.
//!
//! Camera poses are world-to-camera: `X_cam = R X_world + t`.

use nalgebra::{Matrix3, Vector3};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use std::fmt;
use std::ops::Mul;

use crate::error::{Error, Result};

/// Largest `||RᵀR - I||` accepted when converting a matrix to a quaternion.
pub const ORTHO_TOL: f64 = 1e-6;
/// Unit-norm tolerance guaranteed by every quaternion constructor.
pub const UNIT_TOL: f64 = 1e-9;
/// Below this rotation angle the exp/log maps switch to Taylor expansions.
pub const SMALL_ANGLE: f64 = 1e-6;

#[derive(Clone, Copy, PartialEq)]
pub struct UnitQuaternion {
    w: f64,
    x: f64,
    y: f64,
    z: f64,
}

impl fmt::Debug for UnitQuaternion {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Q[{}, {}, {}, {}]", self.w, self.x, self.y, self.z)
    }
}

impl Default for UnitQuaternion {
    fn default() -> Self {
        Self::identity()
    }
}

impl UnitQuaternion {
    pub const fn identity() -> Self {
        Self { w: 1.0, x: 0.0, y: 0.0, z: 0.0 }
    }

    /// Normalizes and canonicalizes `(w, x, y, z)`.
    pub fn new(w: f64, x: f64, y: f64, z: f64) -> Result<Self> {
        let n = (w * w + x * x + y * y + z * z).sqrt();
        if !n.is_finite() || n < 1e-300 {
            return Err(Error::InvalidParameter(format!(
                "cannot normalize quaternion [{w}, {x}, {y}, {z}]"
            )));
        }
        Ok(Self::from_product(w, x, y, z))
    }

    pub fn from_array(q: [f64; 4]) -> Result<Self> {
        Self::new(q[0], q[1], q[2], q[3])
    }

    fn canonical(w: f64, x: f64, y: f64, z: f64) -> Self {
        let flip = if w != 0.0 {
            w < 0.0
        } else if x != 0.0 {
            x < 0.0
        } else if y != 0.0 {
            y < 0.0
        } else {
            z < 0.0
        };
        if flip {
            Self { w: -w, x: -x, y: -y, z: -z }
        } else {
            Self { w, x, y, z }
        }
    }

    /// Renormalized (unless already unit to rounding) and canonicalized.
    fn from_product(w: f64, x: f64, y: f64, z: f64) -> Self {
        let n2 = w * w + x * x + y * y + z * z;
        if (n2 - 1.0).abs() <= 4.0 * f64::EPSILON {
            return Self::canonical(w, x, y, z);
        }
        let n = n2.sqrt();
        Self::canonical(w / n, x / n, y / n, z / n)
    }

    pub fn w(&self) -> f64 {
        self.w
    }
    pub fn x(&self) -> f64 {
        self.x
    }
    pub fn y(&self) -> f64 {
        self.y
    }
    pub fn z(&self) -> f64 {
        self.z
    }

    pub fn to_array(&self) -> [f64; 4] {
        [self.w, self.x, self.y, self.z]
    }

    pub fn vector_part(&self) -> Vector3<f64> {
        Vector3::new(self.x, self.y, self.z)
    }

    pub fn norm(&self) -> f64 {
        (self.w * self.w + self.x * self.x + self.y * self.y + self.z * self.z).sqrt()
    }

    /// The inverse rotation. Canonical form of the conjugate.
    pub fn inverse(&self) -> Self {
        Self::canonical(self.w, -self.x, -self.y, -self.z)
    }

    /// Hamilton product `self * rhs` (apply `rhs` first).
    pub fn compose(&self, rhs: &Self) -> Self {
        let (a, b) = (self, rhs);
        Self::from_product(
            a.w * b.w - a.x * b.x - a.y * b.y - a.z * b.z,
            a.w * b.x + a.x * b.w + a.y * b.z - a.z * b.y,
            a.w * b.y - a.x * b.z + a.y * b.w + a.z * b.x,
            a.w * b.z + a.x * b.y - a.y * b.x + a.z * b.w,
        )
    }

    pub fn rotate(&self, v: &Vector3<f64>) -> Vector3<f64> {
        let u = self.vector_part();
        let t = 2.0 * u.cross(v);
        v + self.w * t + u.cross(&t)
    }

    pub fn to_matrix(&self) -> RotationMatrix {
        let (w, x, y, z) = (self.w, self.x, self.y, self.z);
        RotationMatrix(Matrix3::new(
            1.0 - 2.0 * (y * y + z * z),
            2.0 * (x * y - w * z),
            2.0 * (x * z + w * y),
            2.0 * (x * y + w * z),
            1.0 - 2.0 * (x * x + z * z),
            2.0 * (y * z - w * x),
            2.0 * (x * z - w * y),
            2.0 * (y * z + w * x),
            1.0 - 2.0 * (x * x + y * y),
        ))
    }

    /// Shepperd's method: branch on the largest of the trace and the diagonal.
    pub fn from_matrix(r: &Matrix3<f64>) -> Result<Self> {
        let residual = orthonormality_residual(r);
        if !(residual <= ORTHO_TOL) || r.determinant() <= 0.0 {
            return Err(Error::NotOrthonormal { residual });
        }
        let trace = r[(0, 0)] + r[(1, 1)] + r[(2, 2)];
        let (w, x, y, z);
        if trace >= r[(0, 0)] && trace >= r[(1, 1)] && trace >= r[(2, 2)] {
            let s = (1.0 + trace).sqrt() * 2.0;
            w = 0.25 * s;
            x = (r[(2, 1)] - r[(1, 2)]) / s;
            y = (r[(0, 2)] - r[(2, 0)]) / s;
            z = (r[(1, 0)] - r[(0, 1)]) / s;
        } else if r[(0, 0)] >= r[(1, 1)] && r[(0, 0)] >= r[(2, 2)] {
            let s = (1.0 + r[(0, 0)] - r[(1, 1)] - r[(2, 2)]).sqrt() * 2.0;
            w = (r[(2, 1)] - r[(1, 2)]) / s;
            x = 0.25 * s;
            y = (r[(0, 1)] + r[(1, 0)]) / s;
            z = (r[(0, 2)] + r[(2, 0)]) / s;
        } else if r[(1, 1)] >= r[(2, 2)] {
            let s = (1.0 + r[(1, 1)] - r[(0, 0)] - r[(2, 2)]).sqrt() * 2.0;
            w = (r[(0, 2)] - r[(2, 0)]) / s;
            x = (r[(0, 1)] + r[(1, 0)]) / s;
            y = 0.25 * s;
            z = (r[(1, 2)] + r[(2, 1)]) / s;
        } else {
            let s = (1.0 + r[(2, 2)] - r[(0, 0)] - r[(1, 1)]).sqrt() * 2.0;
            w = (r[(1, 0)] - r[(0, 1)]) / s;
            x = (r[(0, 2)] + r[(2, 0)]) / s;
            y = (r[(1, 2)] + r[(2, 1)]) / s;
            z = 0.25 * s;
        }
        Self::new(w, x, y, z)
    }

    /// Exponential map from an axis-angle vector.
    pub fn exp(v: &AxisAngle) -> Self {
        let theta = v.angle();
        if theta < SMALL_ANGLE {
            Self::exp_taylor(&v.0)
        } else {
            Self::exp_closed(&v.0)
        }
    }

    fn exp_closed(v: &Vector3<f64>) -> Self {
        let theta = v.norm();
        let half = 0.5 * theta;
        let k = half.sin() / theta;
        Self::from_product(half.cos(), k * v.x, k * v.y, k * v.z)
    }

    fn exp_taylor(v: &Vector3<f64>) -> Self {
        let t2 = v.norm_squared();
        let w = 1.0 - t2 / 8.0;
        let k = 0.5 - t2 / 48.0;
        Self::from_product(w, k * v.x, k * v.y, k * v.z)
    }

    /// Logarithm map. The result has angle in `[0, pi]`.
    ///
    /// At exactly `pi` both `v` and `-v` are valid; the canonical hemisphere
    /// picks the one whose first nonzero component is positive. The map is
    /// discontinuous there.
    pub fn log(&self) -> AxisAngle {
        let u = self.vector_part();
        let n = u.norm();
        if n < SMALL_ANGLE {
            // atan2(n, w) / n ~ (1 - n²/(3w²)) / w
            let k = 2.0 / self.w * (1.0 - n * n / (3.0 * self.w * self.w));
            AxisAngle(u * k)
        } else {
            let angle = 2.0 * n.atan2(self.w);
            AxisAngle(u * (angle / n))
        }
    }

    /// Geodesic angle between the two rotations, in `[0, pi]`.
    pub fn angle_to(&self, other: &Self) -> f64 {
        let rel = self.inverse().compose(other);
        2.0 * rel.vector_part().norm().atan2(rel.w)
    }

    /// A rotation drawn from the Haar (uniform) measure on SO(3).
    pub fn random<R: Rng + ?Sized>(rng: &mut R) -> Self {
        loop {
            let w: f64 = rng.sample(StandardNormal);
            let x: f64 = rng.sample(StandardNormal);
            let y: f64 = rng.sample(StandardNormal);
            let z: f64 = rng.sample(StandardNormal);
            if let Ok(q) = Self::new(w, x, y, z) {
                return q;
            }
        }
    }
}

impl Mul for UnitQuaternion {
    type Output = UnitQuaternion;
    fn mul(self, rhs: Self) -> Self {
        self.compose(&rhs)
    }
}

impl Mul for &UnitQuaternion {
    type Output = UnitQuaternion;
    fn mul(self, rhs: Self) -> UnitQuaternion {
        self.compose(rhs)
    }
}

pub fn quat_mul(p: &UnitQuaternion, q: &UnitQuaternion) -> UnitQuaternion {
    p.compose(q)
}

/// Quaternion distance `min(||p - q||, ||p + q||)`, in `[0, sqrt(2)]`.
pub fn d_q(p: &UnitQuaternion, q: &UnitQuaternion) -> f64 {
    let a = p.to_array();
    let b = q.to_array();
    let mut minus = 0.0;
    let mut plus = 0.0;
    for k in 0..4 {
        minus += (a[k] - b[k]) * (a[k] - b[k]);
        plus += (a[k] + b[k]) * (a[k] + b[k]);
    }
    minus.min(plus).sqrt()
}

/// `d_q` on raw 4-vectors, for values that are not canonicalized.
pub fn d_q_raw(p: &[f64; 4], q: &[f64; 4]) -> f64 {
    let mut minus = 0.0;
    let mut plus = 0.0;
    for k in 0..4 {
        minus += (p[k] - q[k]) * (p[k] - q[k]);
        plus += (p[k] + q[k]) * (p[k] + q[k]);
    }
    minus.min(plus).sqrt()
}

fn orthonormality_residual(r: &Matrix3<f64>) -> f64 {
    (r.transpose() * r - Matrix3::identity()).norm()
}

#[derive(Clone, Copy, PartialEq)]
pub struct RotationMatrix(Matrix3<f64>);

impl fmt::Debug for RotationMatrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "R{:?}", self.0.as_slice())
    }
}

impl Default for RotationMatrix {
    fn default() -> Self {
        Self::identity()
    }
}

impl RotationMatrix {
    pub fn identity() -> Self {
        Self(Matrix3::identity())
    }

    /// Accepts `m` only if it is orthonormal with positive determinant.
    pub fn new(m: Matrix3<f64>) -> Result<Self> {
        let residual = orthonormality_residual(&m);
        if !(residual <= ORTHO_TOL) || (m.determinant() - 1.0).abs() > ORTHO_TOL {
            return Err(Error::NotOrthonormal { residual });
        }
        Ok(Self(m))
    }

    /// Row-major construction.
    pub fn from_rows(rows: [[f64; 3]; 3]) -> Result<Self> {
        Self::new(Matrix3::from_fn(|r, c| rows[r][c]))
    }

    pub fn matrix(&self) -> &Matrix3<f64> {
        &self.0
    }

    pub fn transpose(&self) -> Self {
        Self(self.0.transpose())
    }

    pub fn compose(&self, rhs: &Self) -> Self {
        Self(self.0 * rhs.0)
    }

    pub fn rotate(&self, v: &Vector3<f64>) -> Vector3<f64> {
        self.0 * v
    }

    pub fn to_quaternion(&self) -> UnitQuaternion {
        // A RotationMatrix is validated at construction.
        UnitQuaternion::from_matrix(&self.0).expect("validated rotation")
    }

    pub fn angle_to(&self, other: &Self) -> f64 {
        self.to_quaternion().angle_to(&other.to_quaternion())
    }

    /// Closest rotation (Frobenius) to an arbitrary 3x3 matrix.
    pub fn project(m: &Matrix3<f64>) -> Self {
        let svd = m.svd(true, true);
        let (u, v_t) = (svd.u.expect("u requested"), svd.v_t.expect("v requested"));
        let mut d = Matrix3::identity();
        if (u * v_t).determinant() < 0.0 {
            d[(2, 2)] = -1.0;
        }
        Self(u * d * v_t)
    }

    /// Chordal L2 mean.
    pub fn chordal_mean(rotations: &[RotationMatrix]) -> Self {
        let sum = rotations.iter().fold(Matrix3::zeros(), |acc, r| acc + r.0);
        Self::project(&sum)
    }
}

impl From<UnitQuaternion> for RotationMatrix {
    fn from(q: UnitQuaternion) -> Self {
        q.to_matrix()
    }
}

impl From<RotationMatrix> for UnitQuaternion {
    fn from(r: RotationMatrix) -> Self {
        r.to_quaternion()
    }
}

/// `R_j R_iᵀ`: the rotation taking camera `i`'s frame to camera `j`'s.
pub fn relative_rotation(r_i: &RotationMatrix, r_j: &RotationMatrix) -> RotationMatrix {
    RotationMatrix(r_j.0 * r_i.0.transpose())
}

/// Rotation vector: unit axis scaled by the angle in radians.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AxisAngle(pub Vector3<f64>);

impl AxisAngle {
    pub fn new(x: f64, y: f64, z: f64) -> Self {
        Self(Vector3::new(x, y, z))
    }

    pub fn angle(&self) -> f64 {
        self.0.norm()
    }

    pub fn vector(&self) -> &Vector3<f64> {
        &self.0
    }
}

pub fn exp_map(v: &AxisAngle) -> UnitQuaternion {
    UnitQuaternion::exp(v)
}

pub fn log_map(q: &UnitQuaternion) -> AxisAngle {
    q.log()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Intrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
}

impl Intrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64, width: usize, height: usize) -> Result<Self> {
        let k = Self { fx, fy, cx, cy, width, height };
        k.validate()?;
        Ok(k)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.fx > 0.0 && self.fy > 0.0 && self.fx.is_finite() && self.fy.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "focal lengths must be positive, got fx={} fy={}",
                self.fx, self.fy
            )));
        }
        let (w, h) = (self.width as f64, self.height as f64);
        if !(0.0..=w).contains(&self.cx) || !(0.0..=h).contains(&self.cy) {
            return Err(Error::InvalidParameter(format!(
                "principal point ({}, {}) outside {}x{} image",
                self.cx, self.cy, self.width, self.height
            )));
        }
        Ok(())
    }

    /// Intrinsics of the image downsampled by `factor`.
    pub fn downsampled(&self, factor: usize) -> Self {
        let s = factor as f64;
        Self {
            fx: self.fx / s,
            fy: self.fy / s,
            cx: self.cx / s,
            cy: self.cy / s,
            width: self.width / factor,
            height: self.height / factor,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CameraPose {
    pub rotation: RotationMatrix,
    pub translation: Vector3<f64>,
    pub intrinsics: Intrinsics,
}

impl CameraPose {
    pub fn new(rotation: RotationMatrix, translation: Vector3<f64>, intrinsics: Intrinsics) -> Self {
        Self { rotation, translation, intrinsics }
    }

    /// Camera centre in world coordinates, `-Rᵀ t`.
    pub fn center(&self) -> Vector3<f64> {
        -(self.rotation.matrix().transpose() * self.translation)
    }

    pub fn to_camera(&self, x: &Vector3<f64>) -> Vector3<f64> {
        self.rotation.matrix() * x + self.translation
    }

    /// Pixel coordinates of world point `x`.
    pub fn project(&self, x: &Vector3<f64>) -> Result<(f64, f64)> {
        let c = self.to_camera(x);
        if !(c.z > 0.0) {
            return Err(Error::BehindCamera { depth: c.z });
        }
        let k = &self.intrinsics;
        Ok((k.fx * c.x / c.z + k.cx, k.fy * c.y / c.z + k.cy))
    }

    pub fn with_intrinsics(&self, intrinsics: Intrinsics) -> Self {
        Self { intrinsics, ..*self }
    }
}

pub fn project(pose: &CameraPose, x: &Vector3<f64>) -> Result<(f64, f64)> {
    pose.project(x)
}

/// On-disk form of a pose: rotation as `[w, x, y, z]`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PoseRecord {
    pub rotation: [f64; 4],
    pub translation: [f64; 3],
    pub intrinsics: Intrinsics,
}

impl From<&CameraPose> for PoseRecord {
    fn from(p: &CameraPose) -> Self {
        Self {
            rotation: p.rotation.to_quaternion().to_array(),
            translation: [p.translation.x, p.translation.y, p.translation.z],
            intrinsics: p.intrinsics,
        }
    }
}

impl TryFrom<&PoseRecord> for CameraPose {
    type Error = Error;
    fn try_from(r: &PoseRecord) -> Result<Self> {
        r.intrinsics.validate()?;
        Ok(CameraPose {
            rotation: UnitQuaternion::from_array(r.rotation)?.to_matrix(),
            translation: Vector3::from(r.translation),
            intrinsics: r.intrinsics,
        })
    }
}
