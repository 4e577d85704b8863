//! Rigid transforms and the SE(3) exponential map.
//!
//! Twists are laid out as `(t_x, t_y, t_z, r_x, r_y, r_z)`: the first three
//! entries are the translational part `rho`, the last three the rotation
//! vector `omega`. The map is the full group exponential, so
//! `exp(-xi) == exp(xi)^-1` holds exactly.

use std::ops::{Add, Div, Mul, Neg, Sub};

use nalgebra::{Matrix3, Rotation3, Vector3};

use crate::error::{Error, Result};

pub type Twist = [f64; 6];

/// A rigid transform `x -> R x + t`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl Default for Pose {
    fn default() -> Self {
        Self::identity()
    }
}

impl Pose {
    pub fn identity() -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    /// Builds a pose, checking orthonormality and handedness to 1e-9.
    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Result<Self> {
        let pose = Self { rotation, translation };
        if !pose.is_valid(1e-9) {
            return Err(Error::domain("rotation is not a proper orthonormal matrix"));
        }
        Ok(pose)
    }

    pub fn from_translation(t: [f64; 3]) -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: Vector3::new(t[0], t[1], t[2]),
        }
    }

    pub fn is_valid(&self, tol: f64) -> bool {
        let rtr = self.rotation.transpose() * self.rotation;
        (rtr - Matrix3::identity()).abs().max() <= tol
            && (self.rotation.determinant() - 1.0).abs() <= tol
            && self.translation.iter().all(|v| v.is_finite())
    }

    pub fn from_twist(xi: &Twist) -> Result<Self> {
        if xi.iter().any(|v| !v.is_finite()) {
            return Err(Error::domain("twist has non-finite components"));
        }
        let (r, t) = exp_generic::<f64>(&[xi[0], xi[1], xi[2]], &[xi[3], xi[4], xi[5]]);
        Ok(Self {
            rotation: Matrix3::from_fn(|i, j| r[i][j]),
            translation: Vector3::new(t[0], t[1], t[2]),
        })
    }

    /// Group logarithm, the inverse of [`Pose::from_twist`] for rotation
    /// angles below pi.
    pub fn log(&self) -> Twist {
        let omega = Rotation3::from_matrix_unchecked(self.rotation).scaled_axis();
        let w = [omega.x, omega.y, omega.z];
        let v = left_jacobian_so3(&w);
        let rho = v
            .try_inverse()
            .map(|vi| vi * self.translation)
            .unwrap_or(self.translation);
        [rho.x, rho.y, rho.z, w[0], w[1], w[2]]
    }

    pub fn inverse(&self) -> Self {
        let rt = self.rotation.transpose();
        Self {
            rotation: rt,
            translation: -(rt * self.translation),
        }
    }

    /// `self * other`: apply `other` first, then `self`.
    pub fn compose(&self, other: &Pose) -> Self {
        Self {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }

    #[inline]
    pub fn transform(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    /// Row-major 3x4 `[R | t]`, the layout of KITTI odometry pose files.
    pub fn to_row(&self) -> [f64; 12] {
        let r = &self.rotation;
        let t = &self.translation;
        [
            r[(0, 0)],
            r[(0, 1)],
            r[(0, 2)],
            t.x,
            r[(1, 0)],
            r[(1, 1)],
            r[(1, 2)],
            t.y,
            r[(2, 0)],
            r[(2, 1)],
            r[(2, 2)],
            t.z,
        ]
    }

    /// Inverse of [`Pose::to_row`]; the rotation is validated to 1e-6 since
    /// text files carry limited precision.
    pub fn from_row(row: &[f64; 12]) -> Result<Self> {
        let rotation = Matrix3::new(row[0], row[1], row[2], row[4], row[5], row[6], row[8], row[9], row[10]);
        let pose = Self {
            rotation,
            translation: Vector3::new(row[3], row[7], row[11]),
        };
        if !pose.is_valid(1e-6) {
            return Err(Error::domain("pose row does not hold a rotation matrix"));
        }
        Ok(pose)
    }

    /// Rotation angle in radians.
    pub fn angle(&self) -> f64 {
        ((self.rotation.trace() - 1.0) / 2.0).clamp(-1.0, 1.0).acos()
    }
}

/// Derivatives of a pose with respect to the six twist coordinates.
#[derive(Debug, Clone)]
pub struct PoseJacobian {
    pub pose: Pose,
    /// `d_rotation[i][j][k] = dR_ij / dxi_k`
    pub d_rotation: [[[f64; 6]; 3]; 3],
    /// `d_translation[i][k] = dt_i / dxi_k`
    pub d_translation: [[f64; 6]; 3],
}

impl PoseJacobian {
    pub fn at(xi: &Twist) -> Result<Self> {
        let pose = Pose::from_twist(xi)?;
        let jet = |k: usize| Jet::variable(xi[k], k);
        let (r, t) = exp_generic::<Jet>(&[jet(0), jet(1), jet(2)], &[jet(3), jet(4), jet(5)]);
        let mut d_rotation = [[[0.0; 6]; 3]; 3];
        let mut d_translation = [[0.0; 6]; 3];
        for i in 0..3 {
            for j in 0..3 {
                d_rotation[i][j] = r[i][j].d;
            }
            d_translation[i] = t[i].d;
        }
        Ok(Self {
            pose,
            d_rotation,
            d_translation,
        })
    }

    /// Chains gradients with respect to `R` and `t` onto the twist.
    pub fn chain(&self, g_rotation: &Matrix3<f64>, g_translation: &Vector3<f64>) -> Twist {
        let mut out = [0.0; 6];
        for (k, o) in out.iter_mut().enumerate() {
            let mut s = 0.0;
            for i in 0..3 {
                for j in 0..3 {
                    s += g_rotation[(i, j)] * self.d_rotation[i][j][k];
                }
                s += g_translation[i] * self.d_translation[i][k];
            }
            *o = s;
        }
        out
    }
}

fn left_jacobian_so3(w: &[f64; 3]) -> Matrix3<f64> {
    let (_, b, c) = so3_coefficients::<f64>(w[0] * w[0] + w[1] * w[1] + w[2] * w[2]);
    let wx = Matrix3::new(0.0, -w[2], w[1], w[2], 0.0, -w[0], -w[1], w[0], 0.0);
    Matrix3::identity() + wx * b + wx * wx * c
}

/// Minimal arithmetic needed to evaluate the exponential map generically.
pub(crate) trait Real:
    Copy + Add<Output = Self> + Sub<Output = Self> + Mul<Output = Self> + Div<Output = Self> + Neg<Output = Self>
{
    fn cst(v: f64) -> Self;
    fn val(&self) -> f64;
    fn sqrt(self) -> Self;
    fn sin(self) -> Self;
    fn cos(self) -> Self;
}

impl Real for f64 {
    fn cst(v: f64) -> Self {
        v
    }
    fn val(&self) -> f64 {
        *self
    }
    fn sqrt(self) -> Self {
        f64::sqrt(self)
    }
    fn sin(self) -> Self {
        f64::sin(self)
    }
    fn cos(self) -> Self {
        f64::cos(self)
    }
}

/// Forward-mode dual number carrying derivatives along six directions.
#[derive(Debug, Clone, Copy)]
pub(crate) struct Jet {
    pub v: f64,
    pub d: [f64; 6],
}

impl Jet {
    fn variable(v: f64, k: usize) -> Self {
        let mut d = [0.0; 6];
        d[k] = 1.0;
        Self { v, d }
    }

    fn chain(self, v: f64, dv: f64) -> Self {
        Self {
            v,
            d: self.d.map(|x| x * dv),
        }
    }
}

impl Add for Jet {
    type Output = Jet;
    fn add(self, o: Jet) -> Jet {
        let mut d = self.d;
        for (a, b) in d.iter_mut().zip(o.d) {
            *a += b;
        }
        Jet { v: self.v + o.v, d }
    }
}

impl Sub for Jet {
    type Output = Jet;
    fn sub(self, o: Jet) -> Jet {
        self + (-o)
    }
}

impl Neg for Jet {
    type Output = Jet;
    fn neg(self) -> Jet {
        Jet {
            v: -self.v,
            d: self.d.map(|x| -x),
        }
    }
}

impl Mul for Jet {
    type Output = Jet;
    fn mul(self, o: Jet) -> Jet {
        let mut d = [0.0; 6];
        for k in 0..6 {
            d[k] = self.d[k] * o.v + self.v * o.d[k];
        }
        Jet { v: self.v * o.v, d }
    }
}

impl Div for Jet {
    type Output = Jet;
    fn div(self, o: Jet) -> Jet {
        let mut d = [0.0; 6];
        let inv = 1.0 / o.v;
        for k in 0..6 {
            d[k] = (self.d[k] - self.v * inv * o.d[k]) * inv;
        }
        Jet { v: self.v * inv, d }
    }
}

impl Real for Jet {
    fn cst(v: f64) -> Self {
        Jet { v, d: [0.0; 6] }
    }
    fn val(&self) -> f64 {
        self.v
    }
    fn sqrt(self) -> Self {
        let s = self.v.sqrt();
        self.chain(s, 0.5 / s)
    }
    fn sin(self) -> Self {
        self.chain(self.v.sin(), self.v.cos())
    }
    fn cos(self) -> Self {
        self.chain(self.v.cos(), -self.v.sin())
    }
}

/// `(sin t / t, (1 - cos t) / t^2, (t - sin t) / t^3)` as functions of `t^2`,
/// switching to Taylor series near zero.
fn so3_coefficients<T: Real>(theta_sq: T) -> (T, T, T) {
    if theta_sq.val() < 1e-6 {
        let t2 = theta_sq;
        let t4 = t2 * t2;
        (
            T::cst(1.0) - t2 / T::cst(6.0) + t4 / T::cst(120.0),
            T::cst(0.5) - t2 / T::cst(24.0) + t4 / T::cst(720.0),
            T::cst(1.0 / 6.0) - t2 / T::cst(120.0) + t4 / T::cst(5040.0),
        )
    } else {
        let theta = theta_sq.sqrt();
        let (s, c) = (theta.sin(), theta.cos());
        (
            s / theta,
            (T::cst(1.0) - c) / theta_sq,
            (theta - s) / (theta_sq * theta),
        )
    }
}

type Mat3<T> = [[T; 3]; 3];

pub(crate) fn exp_generic<T: Real>(rho: &[T; 3], omega: &[T; 3]) -> (Mat3<T>, [T; 3]) {
    let theta_sq = omega[0] * omega[0] + omega[1] * omega[1] + omega[2] * omega[2];
    let (a, b, c) = so3_coefficients(theta_sq);
    let z = T::cst(0.0);
    let wx: Mat3<T> = [
        [z, -omega[2], omega[1]],
        [omega[2], z, -omega[0]],
        [-omega[1], omega[0], z],
    ];
    let mut wx2 = [[z; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            let mut s = z;
            for k in 0..3 {
                s = s + wx[i][k] * wx[k][j];
            }
            wx2[i][j] = s;
        }
    }
    let mut r = [[z; 3]; 3];
    let mut v = [[z; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            let id = if i == j { T::cst(1.0) } else { z };
            r[i][j] = id + a * wx[i][j] + b * wx2[i][j];
            v[i][j] = id + b * wx[i][j] + c * wx2[i][j];
        }
    }
    let mut t = [z; 3];
    for i in 0..3 {
        t[i] = v[i][0] * rho[0] + v[i][1] * rho[1] + v[i][2] * rho[2];
    }
    (r, t)
}
