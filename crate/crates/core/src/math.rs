//! Quaternions, dual quaternions, real spherical harmonics and 3D covariances.
//!
//! Everything here is a pure function of its inputs. Quaternions are stored
//! scalar-first (`w, x, y, z`) and follow the Hamilton product convention.

use std::ops::{Add, Mul, Neg, Sub};

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Vec3 = Vector3<f64>;
pub type Mat3 = Matrix3<f64>;

/// Smallest scale a splat axis may take; keeps covariances invertible.
pub const MIN_SCALE: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Quaternion {
    pub w: f64,
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl Default for Quaternion {
    fn default() -> Self {
        Self::IDENTITY
    }
}

impl Quaternion {
    pub const IDENTITY: Quaternion = Quaternion::new(1.0, 0.0, 0.0, 0.0);
    pub const ZERO: Quaternion = Quaternion::new(0.0, 0.0, 0.0, 0.0);

    pub const fn new(w: f64, x: f64, y: f64, z: f64) -> Self {
        Self { w, x, y, z }
    }

    pub fn from_array(a: [f64; 4]) -> Self {
        Self::new(a[0], a[1], a[2], a[3])
    }

    pub fn to_array(self) -> [f64; 4] {
        [self.w, self.x, self.y, self.z]
    }

    /// Pure quaternion `(0, v)`.
    pub fn pure(v: &Vec3) -> Self {
        Self::new(0.0, v.x, v.y, v.z)
    }

    pub fn vector(&self) -> Vec3 {
        Vec3::new(self.x, self.y, self.z)
    }

    /// Rotation of `angle` radians about `axis` (need not be unit length).
    pub fn from_axis_angle(axis: &Vec3, angle: f64) -> Self {
        let n = axis.norm();
        if n == 0.0 {
            return Self::IDENTITY;
        }
        let (s, c) = (0.5 * angle).sin_cos();
        let a = axis / n;
        Self::new(c, s * a.x, s * a.y, s * a.z)
    }

    pub fn dot(&self, o: &Quaternion) -> f64 {
        self.w * o.w + self.x * o.x + self.y * o.y + self.z * o.z
    }

    pub fn norm(&self) -> f64 {
        self.dot(self).sqrt()
    }

    pub fn conjugate(&self) -> Self {
        Self::new(self.w, -self.x, -self.y, -self.z)
    }

    pub fn scale(&self, s: f64) -> Self {
        Self::new(self.w * s, self.x * s, self.y * s, self.z * s)
    }

    pub fn is_finite(&self) -> bool {
        self.w.is_finite() && self.x.is_finite() && self.y.is_finite() && self.z.is_finite()
    }

    pub fn normalize(&self) -> Result<Self> {
        let n = self.norm();
        if !(n > 1e-12) || !n.is_finite() {
            return Err(Error::invalid(format!(
                "quaternion {:?} has norm {n}, cannot normalize",
                self.to_array()
            )));
        }
        Ok(self.scale(1.0 / n))
    }

    /// Rotation matrix of the normalized quaternion.
    pub fn to_rotation_matrix(&self) -> Result<Mat3> {
        Ok(unit_quat_to_rotmat(&self.normalize()?))
    }

    /// Rotates `v` by this quaternion, assumed unit.
    pub fn rotate(&self, v: &Vec3) -> Vec3 {
        let u = self.vector();
        let t = 2.0 * u.cross(v);
        v + self.w * t + u.cross(&t)
    }

    /// Spherical linear interpolation between two unit quaternions.
    pub fn slerp(&self, other: &Quaternion, t: f64) -> Quaternion {
        let mut b = *other;
        let mut d = self.dot(&b);
        if d < 0.0 {
            b = -b;
            d = -d;
        }
        if d > 1.0 - 1e-12 {
            return (self.scale(1.0 - t) + b.scale(t))
                .normalize()
                .unwrap_or(*self);
        }
        let theta = d.clamp(-1.0, 1.0).acos();
        let s = theta.sin();
        self.scale(((1.0 - t) * theta).sin() / s) + b.scale((t * theta).sin() / s)
    }
}

impl Add for Quaternion {
    type Output = Quaternion;
    fn add(self, o: Quaternion) -> Quaternion {
        Quaternion::new(self.w + o.w, self.x + o.x, self.y + o.y, self.z + o.z)
    }
}

impl Sub for Quaternion {
    type Output = Quaternion;
    fn sub(self, o: Quaternion) -> Quaternion {
        Quaternion::new(self.w - o.w, self.x - o.x, self.y - o.y, self.z - o.z)
    }
}

impl Neg for Quaternion {
    type Output = Quaternion;
    fn neg(self) -> Quaternion {
        self.scale(-1.0)
    }
}

/// Hamilton product.
impl Mul for Quaternion {
    type Output = Quaternion;
    fn mul(self, o: Quaternion) -> Quaternion {
        Quaternion::new(
            self.w * o.w - self.x * o.x - self.y * o.y - self.z * o.z,
            self.w * o.x + self.x * o.w + self.y * o.z - self.z * o.y,
            self.w * o.y - self.x * o.z + self.y * o.w + self.z * o.x,
            self.w * o.z + self.x * o.y - self.y * o.x + self.z * o.w,
        )
    }
}

/// Rotation matrix of `q / |q|`. Fails on (near) zero-norm input.
pub fn quat_to_rotmat(q: &Quaternion) -> Result<Mat3> {
    q.to_rotation_matrix()
}

pub(crate) fn unit_quat_to_rotmat(q: &Quaternion) -> Mat3 {
    let Quaternion { w, x, y, z } = *q;
    Mat3::new(
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

/// Pulls a gradient on `quat_to_rotmat(q)` back to the (unnormalized) `q`.
pub fn quat_to_rotmat_backward(q: &Quaternion, grad_r: &Mat3) -> Quaternion {
    let n = q.norm();
    let u = q.scale(1.0 / n);
    let Quaternion { w, x, y, z } = u;
    let g = |m: [f64; 9]| -> f64 {
        let mut acc = 0.0;
        for (k, mk) in m.iter().enumerate() {
            acc += grad_r[(k / 3, k % 3)] * mk;
        }
        acc
    };
    let dw = g([0.0, -2.0 * z, 2.0 * y, 2.0 * z, 0.0, -2.0 * x, -2.0 * y, 2.0 * x, 0.0]);
    let dx = g([
        0.0,
        2.0 * y,
        2.0 * z,
        2.0 * y,
        -4.0 * x,
        -2.0 * w,
        2.0 * z,
        2.0 * w,
        -4.0 * x,
    ]);
    let dy = g([
        -4.0 * y,
        2.0 * x,
        2.0 * w,
        2.0 * x,
        0.0,
        2.0 * z,
        -2.0 * w,
        2.0 * z,
        -4.0 * y,
    ]);
    let dz = g([
        -4.0 * z,
        -2.0 * w,
        2.0 * x,
        2.0 * w,
        -4.0 * z,
        2.0 * y,
        2.0 * x,
        2.0 * y,
        0.0,
    ]);
    normalize_backward(q, &Quaternion::new(dw, dx, dy, dz))
}

/// Gradient of `q / |q|` pulled back to `q`.
pub fn normalize_backward(q: &Quaternion, grad_unit: &Quaternion) -> Quaternion {
    let n = q.norm();
    let u = q.scale(1.0 / n);
    let proj = u.dot(grad_unit);
    (*grad_unit - u.scale(proj)).scale(1.0 / n)
}

/// Intrinsic X-then-Y-then-Z Euler angles (radians) to a rotation matrix,
/// `R = Rx(a) * Ry(b) * Rz(c)`.
pub fn euler_xyz_to_rotmat(angles: &Vec3) -> Mat3 {
    let (sa, ca) = angles.x.sin_cos();
    let (sb, cb) = angles.y.sin_cos();
    let (sc, cc) = angles.z.sin_cos();
    let rx = Mat3::new(1.0, 0.0, 0.0, 0.0, ca, -sa, 0.0, sa, ca);
    let ry = Mat3::new(cb, 0.0, sb, 0.0, 1.0, 0.0, -sb, 0.0, cb);
    let rz = Mat3::new(cc, -sc, 0.0, sc, cc, 0.0, 0.0, 0.0, 1.0);
    rx * ry * rz
}

/// Inverse of [`euler_xyz_to_rotmat`] for the principal branch
/// (`b` in `[-pi/2, pi/2]`).
pub fn rotmat_to_euler_xyz(r: &Mat3) -> Vec3 {
    let sb = r[(0, 2)].clamp(-1.0, 1.0);
    let b = sb.asin();
    if sb.abs() < 1.0 - 1e-12 {
        let a = (-r[(1, 2)]).atan2(r[(2, 2)]);
        let c = (-r[(0, 1)]).atan2(r[(0, 0)]);
        Vec3::new(a, b, c)
    } else {
        // Gimbal lock: only a +/- c is determined.
        let a = r[(1, 0)].atan2(r[(1, 1)]);
        Vec3::new(a, b, 0.0)
    }
}

/// Rigid transform `p -> R p + t` as a unit dual quaternion.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DualQuaternion {
    pub real: Quaternion,
    pub dual: Quaternion,
}

impl Default for DualQuaternion {
    fn default() -> Self {
        Self::IDENTITY
    }
}

impl DualQuaternion {
    pub const IDENTITY: DualQuaternion = DualQuaternion {
        real: Quaternion::IDENTITY,
        dual: Quaternion::ZERO,
    };

    /// `rotation` must be unit.
    pub fn from_rotation_translation(rotation: &Quaternion, translation: &Vec3) -> Self {
        let dual = (Quaternion::pure(translation) * *rotation).scale(0.5);
        Self {
            real: *rotation,
            dual,
        }
    }

    pub fn from_translation(t: &Vec3) -> Self {
        Self::from_rotation_translation(&Quaternion::IDENTITY, t)
    }

    pub fn from_rotation(q: &Quaternion) -> Self {
        Self::from_rotation_translation(q, &Vec3::zeros())
    }

    pub fn rotation(&self) -> Quaternion {
        self.real
    }

    pub fn translation(&self) -> Vec3 {
        (self.dual * self.real.conjugate()).scale(2.0).vector()
    }

    pub fn rotation_matrix(&self) -> Mat3 {
        unit_quat_to_rotmat(&self.real)
    }

    pub fn transform_point(&self, p: &Vec3) -> Vec3 {
        self.real.rotate(p) + self.translation()
    }

    pub fn transform_vector(&self, v: &Vec3) -> Vec3 {
        self.real.rotate(v)
    }

    /// `self ∘ other`: apply `other` first.
    pub fn compose(&self, other: &DualQuaternion) -> DualQuaternion {
        DualQuaternion {
            real: self.real * other.real,
            dual: self.real * other.dual + self.dual * other.real,
        }
    }

    pub fn inverse(&self) -> DualQuaternion {
        let r = self.real.conjugate();
        let t = self.translation();
        DualQuaternion::from_rotation_translation(&r, &(-r.rotate(&t)))
    }

    /// Unit real part and a dual part orthogonal to it.
    pub fn normalize(&self) -> Result<DualQuaternion> {
        let n = self.real.norm();
        if !(n > 1e-12) || !n.is_finite() {
            return Err(Error::invalid("dual quaternion has a zero real part"));
        }
        let real = self.real.scale(1.0 / n);
        let dual = self.dual.scale(1.0 / n);
        let dual = dual - real.scale(real.dot(&dual));
        Ok(DualQuaternion { real, dual })
    }

    pub fn is_finite(&self) -> bool {
        self.real.is_finite() && self.dual.is_finite()
    }
}

/// Dual-quaternion linear blending: sign-align every real part to the first,
/// take the weighted sum and renormalize.
pub fn dq_blend(weights: &[f64], dqs: &[DualQuaternion]) -> Result<DualQuaternion> {
    if weights.len() != dqs.len() {
        return Err(Error::Mismatch {
            what: "dq_blend weight count",
            expected: dqs.len(),
            found: weights.len(),
        });
    }
    if let Some(w) = weights.iter().find(|w| !(**w >= 0.0) || !w.is_finite()) {
        return Err(Error::invalid(format!("blend weight {w} is not a nonnegative number")));
    }
    let total: f64 = weights.iter().sum();
    if !(total > 1e-8) {
        return Err(Error::invalid("blend weights sum to zero"));
    }
    let pivot = dqs[0].real;
    let mut real = Quaternion::ZERO;
    let mut dual = Quaternion::ZERO;
    for (w, dq) in weights.iter().zip(dqs) {
        let w = if pivot.dot(&dq.real) < 0.0 { -*w } else { *w };
        real = real + dq.real.scale(w);
        dual = dual + dq.dual.scale(w);
    }
    DualQuaternion { real, dual }.normalize()
}

/// Real SH constants in the ordering used by Gaussian splatting renderers.
const SH_C0: f64 = 0.282_094_791_773_878_14;
const SH_C1: f64 = 0.488_602_511_902_919_9;
const SH_C2: [f64; 5] = [
    1.092_548_430_592_079_2,
    -1.092_548_430_592_079_2,
    0.315_391_565_252_520_05,
    -1.092_548_430_592_079_2,
    0.546_274_215_296_039_6,
];
const SH_C3: [f64; 7] = [
    -0.590_043_589_926_643_5,
    2.890_611_442_640_554,
    -0.457_045_799_464_465_8,
    0.373_176_332_590_115_4,
    -0.457_045_799_464_465_8,
    1.445_305_721_320_277,
    -0.590_043_589_926_643_5,
];

pub const SH_BASES: usize = 16;
pub const SH_LEN: usize = SH_BASES * 3;

/// Y00 of the real SH basis.
pub const SH_Y00: f64 = SH_C0;

/// Degree 0..3 SH coefficients, 16 bases x RGB, stored basis-major
/// (`coeffs[3 * basis + channel]`).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ShCoeffs(pub [f64; SH_LEN]);

impl Default for ShCoeffs {
    fn default() -> Self {
        ShCoeffs([0.0; SH_LEN])
    }
}

impl ShCoeffs {
    pub fn get(&self, basis: usize, channel: usize) -> f64 {
        self.0[3 * basis + channel]
    }

    pub fn set(&mut self, basis: usize, channel: usize, v: f64) {
        self.0[3 * basis + channel] = v;
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }
}

/// The 16 real SH basis functions at `d`, evaluated as polynomials (the
/// caller normalizes).
pub fn sh_basis(d: &Vec3) -> [f64; SH_BASES] {
    let (x, y, z) = (d.x, d.y, d.z);
    let (xx, yy, zz) = (x * x, y * y, z * z);
    [
        SH_C0,
        -SH_C1 * y,
        SH_C1 * z,
        -SH_C1 * x,
        SH_C2[0] * x * y,
        SH_C2[1] * y * z,
        SH_C2[2] * (2.0 * zz - xx - yy),
        SH_C2[3] * x * z,
        SH_C2[4] * (xx - yy),
        SH_C3[0] * y * (3.0 * xx - yy),
        SH_C3[1] * x * y * z,
        SH_C3[2] * y * (4.0 * zz - xx - yy),
        SH_C3[3] * z * (2.0 * zz - 3.0 * xx - 3.0 * yy),
        SH_C3[4] * x * (4.0 * zz - xx - yy),
        SH_C3[5] * z * (xx - yy),
        SH_C3[6] * x * (xx - 3.0 * yy),
    ]
}

/// Partial derivatives of [`sh_basis`] with respect to `(x, y, z)`.
pub fn sh_basis_grad(d: &Vec3) -> [[f64; 3]; SH_BASES] {
    let (x, y, z) = (d.x, d.y, d.z);
    let (xx, yy, zz) = (x * x, y * y, z * z);
    [
        [0.0, 0.0, 0.0],
        [0.0, -SH_C1, 0.0],
        [0.0, 0.0, SH_C1],
        [-SH_C1, 0.0, 0.0],
        [SH_C2[0] * y, SH_C2[0] * x, 0.0],
        [0.0, SH_C2[1] * z, SH_C2[1] * y],
        [
            -2.0 * SH_C2[2] * x,
            -2.0 * SH_C2[2] * y,
            4.0 * SH_C2[2] * z,
        ],
        [SH_C2[3] * z, 0.0, SH_C2[3] * x],
        [2.0 * SH_C2[4] * x, -2.0 * SH_C2[4] * y, 0.0],
        [
            6.0 * SH_C3[0] * x * y,
            SH_C3[0] * (3.0 * xx - 3.0 * yy),
            0.0,
        ],
        [SH_C3[1] * y * z, SH_C3[1] * x * z, SH_C3[1] * x * y],
        [
            -2.0 * SH_C3[2] * x * y,
            SH_C3[2] * (4.0 * zz - xx - 3.0 * yy),
            8.0 * SH_C3[2] * y * z,
        ],
        [
            -6.0 * SH_C3[3] * x * z,
            -6.0 * SH_C3[3] * y * z,
            SH_C3[3] * (6.0 * zz - 3.0 * xx - 3.0 * yy),
        ],
        [
            SH_C3[4] * (4.0 * zz - 3.0 * xx - yy),
            -2.0 * SH_C3[4] * x * y,
            8.0 * SH_C3[4] * x * z,
        ],
        [
            2.0 * SH_C3[5] * x * z,
            -2.0 * SH_C3[5] * y * z,
            SH_C3[5] * (xx - yy),
        ],
        [
            SH_C3[6] * (3.0 * xx - 3.0 * yy),
            -6.0 * SH_C3[6] * x * y,
            0.0,
        ],
    ]
}

/// SH radiance before the +0.5 offset and the clamp.
pub fn sh_eval_linear(coeffs: &ShCoeffs, dir: &Vec3) -> [f64; 3] {
    let basis = sh_basis(dir);
    let mut rgb = [0.0; 3];
    for (k, b) in basis.iter().enumerate() {
        for (c, out) in rgb.iter_mut().enumerate() {
            *out += b * coeffs.0[3 * k + c];
        }
    }
    rgb
}

/// View-dependent color: `max(sum_k c_k Y_k(dir) + 0.5, 0)` per channel.
pub fn sh_eval(coeffs: &ShCoeffs, dir: &Vec3) -> [f64; 3] {
    sh_eval_linear(coeffs, dir).map(|v| (v + 0.5).max(0.0))
}

/// Symmetric positive semidefinite 3x3 covariance.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Covariance3(pub Mat3);

impl Covariance3 {
    pub fn matrix(&self) -> &Mat3 {
        &self.0
    }
}

/// `Σ = R S Sᵀ Rᵀ` with `R` from `q` and `S = diag(s)`; scales are floored at
/// [`MIN_SCALE`].
pub fn covariance_from_qs(q: &Quaternion, s: &Vec3) -> Result<Covariance3> {
    if !q.is_finite() || !s.iter().all(|v| v.is_finite()) {
        return Err(Error::invalid("non-finite rotation or scale"));
    }
    let r = quat_to_rotmat(q)?;
    let s2 = s.map(|v| {
        let v = v.max(MIN_SCALE);
        v * v
    });
    let m = r * Mat3::from_diagonal(&s2) * r.transpose();
    // Exact symmetry regardless of rounding in the triple product.
    Ok(Covariance3((m + m.transpose()) * 0.5))
}
