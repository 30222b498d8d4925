//! Planar vectors, the per-agent local frame and the measurement transforms
//! between global and local coordinates.
//!
//! The local frame of agent `i` is attached to the agent with its x-axis
//! pointing away from the target. In that frame the target always sits on
//! the negative x-axis at `(-rho_i, 0)`.

use std::f64::consts::{PI, TAU};
use std::fmt;
use std::ops::{Add, AddAssign, Mul, Neg, Sub};

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Agents closer than this to the target have no usable local frame.
pub const DEGENERATE_RADIUS: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum GeometryError {
    #[error("agent coincides with the target (distance {distance:e}); local frame undefined")]
    DegenerateFrame { distance: f64 },
    #[error("neighbor coincides with the target (distance {distance:e}); angular distance undefined")]
    UndefinedAngle { distance: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Vec2 {
    pub x: f64,
    pub y: f64,
}

impl Vec2 {
    pub const ZERO: Vec2 = Vec2 { x: 0.0, y: 0.0 };

    pub const fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    pub fn from_angle(angle: f64) -> Self {
        let (s, c) = angle.sin_cos();
        Self::new(c, s)
    }

    pub fn dot(self, other: Vec2) -> f64 {
        self.x * other.x + self.y * other.y
    }

    /// Scalar z-component of the 3D cross product.
    pub fn cross(self, other: Vec2) -> f64 {
        self.x * other.y - self.y * other.x
    }

    /// Plain square root of the squared norm; coordinates are assumed far
    /// from overflow.
    pub fn norm(self) -> f64 {
        self.norm_squared().sqrt()
    }

    pub fn norm_squared(self) -> f64 {
        self.dot(self)
    }

    /// Angle of the vector measured counterclockwise from the global x-axis.
    pub fn angle(self) -> f64 {
        self.y.atan2(self.x)
    }

    /// Counterclockwise quarter turn.
    pub fn perp(self) -> Vec2 {
        Vec2::new(-self.y, self.x)
    }

    pub fn is_finite(self) -> bool {
        self.x.is_finite() && self.y.is_finite()
    }

    pub fn distance(self, other: Vec2) -> f64 {
        (self - other).norm()
    }
}

impl fmt::Display for Vec2 {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {})", self.x, self.y)
    }
}

impl Add for Vec2 {
    type Output = Vec2;
    fn add(self, rhs: Vec2) -> Vec2 {
        Vec2::new(self.x + rhs.x, self.y + rhs.y)
    }
}

impl AddAssign for Vec2 {
    fn add_assign(&mut self, rhs: Vec2) {
        self.x += rhs.x;
        self.y += rhs.y;
    }
}

impl Sub for Vec2 {
    type Output = Vec2;
    fn sub(self, rhs: Vec2) -> Vec2 {
        Vec2::new(self.x - rhs.x, self.y - rhs.y)
    }
}

impl Neg for Vec2 {
    type Output = Vec2;
    fn neg(self) -> Vec2 {
        Vec2::new(-self.x, -self.y)
    }
}

impl Mul<f64> for Vec2 {
    type Output = Vec2;
    fn mul(self, k: f64) -> Vec2 {
        Vec2::new(self.x * k, self.y * k)
    }
}

impl Mul<Vec2> for f64 {
    type Output = Vec2;
    fn mul(self, v: Vec2) -> Vec2 {
        v * self
    }
}

/// Row-major 2x2 matrix.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Mat2(pub [[f64; 2]; 2]);

impl Mat2 {
    pub const IDENTITY: Mat2 = Mat2([[1.0, 0.0], [0.0, 1.0]]);

    pub fn apply(&self, v: Vec2) -> Vec2 {
        let m = &self.0;
        Vec2::new(m[0][0] * v.x + m[0][1] * v.y, m[1][0] * v.x + m[1][1] * v.y)
    }

    pub fn mul(&self, other: &Mat2) -> Mat2 {
        let (a, b) = (&self.0, &other.0);
        let mut out = [[0.0; 2]; 2];
        for (r, row) in out.iter_mut().enumerate() {
            for (c, cell) in row.iter_mut().enumerate() {
                *cell = a[r][0] * b[0][c] + a[r][1] * b[1][c];
            }
        }
        Mat2(out)
    }

    pub fn transpose(&self) -> Mat2 {
        let m = &self.0;
        Mat2([[m[0][0], m[1][0]], [m[0][1], m[1][1]]])
    }

    pub fn determinant(&self) -> f64 {
        let m = &self.0;
        m[0][0] * m[1][1] - m[0][1] * m[1][0]
    }
}

/// Global-to-local rotation for a frame whose x-axis has global angle `alpha`.
///
/// `[cos a, sin a; -sin a, cos a]`; its transpose maps local vectors back.
pub fn rotation(alpha: f64) -> Mat2 {
    let (s, c) = alpha.sin_cos();
    Mat2([[c, s], [-s, c]])
}

/// Global angle of the ray from the target to the agent, which is also the
/// angle of the agent's local x-axis.
pub fn frame_angle(agent: Vec2, target: Vec2) -> Result<f64, GeometryError> {
    let ray = agent - target;
    let distance = ray.norm();
    if !(distance > DEGENERATE_RADIUS) {
        return Err(GeometryError::DegenerateFrame { distance });
    }
    Ok(ray.angle())
}

/// `rotation(frame_angle(agent, target))`, built from the unit ray without
/// evaluating trigonometric functions.
pub fn frame_rotation(agent: Vec2, target: Vec2) -> Result<Mat2, GeometryError> {
    let ray = agent - target;
    let distance = ray.norm();
    if !(distance > DEGENERATE_RADIUS) {
        return Err(GeometryError::DegenerateFrame { distance });
    }
    let (c, s) = (ray.x / distance, ray.y / distance);
    Ok(Mat2([[c, s], [-s, c]]))
}

/// Expresses the global point `q` in the local frame of the agent at `agent`.
pub fn to_local_frame(agent: Vec2, target: Vec2, q: Vec2) -> Result<Vec2, GeometryError> {
    let alpha = frame_angle(agent, target)?;
    Ok(rotation(alpha).apply(q - agent))
}

/// Rotates a global free vector (a velocity) into the agent's local frame.
pub fn rotate_velocity_to_local(
    agent: Vec2,
    target: Vec2,
    v: Vec2,
) -> Result<Vec2, GeometryError> {
    let alpha = frame_angle(agent, target)?;
    Ok(rotation(alpha).apply(v))
}

/// Maps a local-frame free vector back to the global frame.
pub fn rotate_to_global(alpha: f64, v_local: Vec2) -> Vec2 {
    rotation(alpha).transpose().apply(v_local)
}

/// Counterclockwise angle about the target from the ray target->i to the
/// ray target->j, computed from agent i's own local measurements.
///
/// The unsigned angle between `-p0` and `pj - p0` is taken when their cross
/// product is non-negative, otherwise `2pi` minus it. Output lies in `[0, 2pi)`.
pub fn angular_distance(target_local: Vec2, neighbor_local: Vec2) -> Result<f64, GeometryError> {
    let to_self = -target_local;
    let to_neighbor = neighbor_local - target_local;
    const MIN_SQ: f64 = DEGENERATE_RADIUS * DEGENERATE_RADIUS;
    if !(to_self.norm_squared() > MIN_SQ) {
        return Err(GeometryError::DegenerateFrame { distance: to_self.norm() });
    }
    if !(to_neighbor.norm_squared() > MIN_SQ) {
        return Err(GeometryError::UndefinedAngle { distance: to_neighbor.norm() });
    }
    let cross = to_self.cross(to_neighbor);
    // atan2 form of the inner-product angle; acos loses precision near 0 and pi.
    let between = cross.abs().atan2(to_self.dot(to_neighbor));
    let angle = if cross >= 0.0 { between } else { TAU - between };
    Ok(if angle >= TAU { 0.0 } else { angle })
}

/// Wraps an angle into `(-pi, pi]`.
pub fn wrap_to_pi(angle: f64) -> f64 {
    if angle > -PI && angle <= PI {
        return angle;
    }
    let wrapped = (angle + PI).rem_euclid(TAU) - PI;
    if wrapped <= -PI {
        wrapped + TAU
    } else {
        wrapped
    }
}

/// Wraps an angle into `[0, 2pi)`.
pub fn wrap_to_tau(angle: f64) -> f64 {
    let wrapped = angle.rem_euclid(TAU);
    if wrapped >= TAU {
        0.0
    } else {
        wrapped
    }
}

/// Picks the representative of `raw` modulo `2pi` closest to `previous`.
pub fn nearest_branch(previous: f64, raw: f64) -> f64 {
    previous + wrap_to_pi(raw - previous)
}

/// Target-relative polar coordinates of an agent.
///
/// `p_i0 = p_0 - p_i = -rho (cos alpha, sin alpha)`; `alpha` is kept unwrapped
/// when it comes out of a time series.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PolarState {
    pub rho: f64,
    pub alpha: f64,
}

impl PolarState {
    pub fn from_relative(p_i0: Vec2) -> Self {
        Self { rho: p_i0.norm(), alpha: (-p_i0).angle() }
    }

    pub fn to_relative(self) -> Vec2 {
        Vec2::from_angle(self.alpha) * -self.rho
    }
}
