//! Quaternion helpers shared by the model, the deformation warp and the codec.
//!
//! Quaternions are `nalgebra::Quaternion<f64>` with scalar part `w`. Warp
//! quaternions are not forced to unit length, so the "sandwich" matrix below
//! is the homogeneous map `v -> q v q*`, which scales by `|q|^2`.

use nalgebra::{Matrix3, Quaternion, Vector3};

pub type Quat = Quaternion<f64>;

pub fn quat(w: f64, x: f64, y: f64, z: f64) -> Quat {
    Quaternion::new(w, x, y, z)
}

pub fn identity() -> Quat {
    Quaternion::new(1.0, 0.0, 0.0, 0.0)
}

/// Components in (w, x, y, z) order.
pub fn to_array(q: &Quat) -> [f64; 4] {
    [q.w, q.i, q.j, q.k]
}

pub fn from_array(a: [f64; 4]) -> Quat {
    Quaternion::new(a[0], a[1], a[2], a[3])
}

pub fn dot(a: &Quat, b: &Quat) -> f64 {
    a.w * b.w + a.i * b.i + a.j * b.j + a.k * b.k
}

pub fn norm(q: &Quat) -> f64 {
    dot(q, q).sqrt()
}

/// Hamilton product `a ⊗ b`.
pub fn mul(a: &Quat, b: &Quat) -> Quat {
    Quaternion::new(
        a.w * b.w - a.i * b.i - a.j * b.j - a.k * b.k,
        a.w * b.i + a.i * b.w + a.j * b.k - a.k * b.j,
        a.w * b.j - a.i * b.k + a.j * b.w + a.k * b.i,
        a.w * b.k + a.i * b.j - a.j * b.i + a.k * b.w,
    )
}

pub fn conjugate(q: &Quat) -> Quat {
    Quaternion::new(q.w, -q.i, -q.j, -q.k)
}

/// Matrix of `v -> q v q*` without normalizing `q`.
pub fn sandwich_matrix(q: &Quat) -> Matrix3<f64> {
    let (w, x, y, z) = (q.w, q.i, q.j, q.k);
    Matrix3::new(
        w * w + x * x - y * y - z * z,
        2.0 * (x * y - w * z),
        2.0 * (x * z + w * y),
        2.0 * (x * y + w * z),
        w * w - x * x + y * y - z * z,
        2.0 * (y * z - w * x),
        2.0 * (x * z - w * y),
        2.0 * (y * z + w * x),
        w * w - x * x - y * y + z * z,
    )
}

/// Partial derivatives of [`sandwich_matrix`] w.r.t. (w, x, y, z).
pub fn sandwich_matrix_derivs(q: &Quat) -> [Matrix3<f64>; 4] {
    let (w, x, y, z) = (2.0 * q.w, 2.0 * q.i, 2.0 * q.j, 2.0 * q.k);
    [
        Matrix3::new(w, -z, y, z, w, -x, -y, x, w),
        Matrix3::new(x, y, z, y, -x, -w, z, w, -x),
        Matrix3::new(-y, x, w, x, y, z, -w, z, -y),
        Matrix3::new(-z, -w, x, w, -z, y, x, y, z),
    ]
}

/// Jacobian (3x4) of `q v q*` w.r.t. the components of `q`.
pub fn rotate_jacobian(q: &Quat, v: &Vector3<f64>) -> [Vector3<f64>; 4] {
    let d = sandwich_matrix_derivs(q);
    [d[0] * v, d[1] * v, d[2] * v, d[3] * v]
}

/// Rotation matrix of `q / |q|`.
pub fn rotation_matrix(q: &Quat) -> Matrix3<f64> {
    let n2 = dot(q, q);
    sandwich_matrix(q) / n2
}

/// Unit quaternion with non-negative scalar part; `None` for near-zero input.
pub fn normalized_canonical(q: &Quat) -> Option<Quat> {
    let n = norm(q);
    if !(n > 1e-12) || !n.is_finite() {
        return None;
    }
    let s = if q.w < 0.0 { -1.0 / n } else { 1.0 / n };
    Some(Quaternion::new(q.w * s, q.i * s, q.j * s, q.k * s))
}

/// Axis-angle vector (axis times angle in radians) of a unit quaternion.
///
/// The quaternion is folded onto the `w >= 0` hemisphere first, so the
/// returned angle lies in `[0, pi]`. `libm` keeps the transcendental calls
/// identical across platforms, which the codec relies on.
pub fn to_axis_angle(q: &Quat) -> Vector3<f64> {
    let (w, x, y, z) = if q.w < 0.0 {
        (-q.w, -q.i, -q.j, -q.k)
    } else {
        (q.w, q.i, q.j, q.k)
    };
    let s2 = x * x + y * y + z * z;
    let s = libm::sqrt(s2);
    if s < 1e-8 {
        // angle/sin(angle/2) = 2/w * (1 + s^2/(3 w^2) + ...)
        let k = 2.0 / w * (1.0 + s2 / (3.0 * w * w));
        return Vector3::new(x * k, y * k, z * k);
    }
    let angle = 2.0 * libm::atan2(s, w);
    let k = angle / s;
    Vector3::new(x * k, y * k, z * k)
}

/// Inverse of [`to_axis_angle`].
pub fn from_axis_angle(v: &Vector3<f64>) -> Quat {
    let angle2 = v.x * v.x + v.y * v.y + v.z * v.z;
    let angle = libm::sqrt(angle2);
    let (w, k) = if angle < 1e-8 {
        (1.0 - angle2 / 8.0, 0.5 - angle2 / 48.0)
    } else {
        let half = 0.5 * angle;
        (libm::cos(half), libm::sin(half) / angle)
    };
    let q = Quaternion::new(w, v.x * k, v.y * k, v.z * k);
    normalized_canonical(&q).unwrap_or_else(identity)
}

/// Quaternion for a rotation of `angle` radians about `axis`.
pub fn from_axis_angle_parts(axis: &Vector3<f64>, angle: f64) -> Quat {
    let a = axis.normalize();
    let half = 0.5 * angle;
    let s = half.sin();
    Quaternion::new(half.cos(), a.x * s, a.y * s, a.z * s)
}

/// Rotation matrix to quaternion (w >= 0).
pub fn from_rotation_matrix(m: &Matrix3<f64>) -> Quat {
    let tr = m[(0, 0)] + m[(1, 1)] + m[(2, 2)];
    let q = if tr > 0.0 {
        let s = (tr + 1.0).sqrt() * 2.0;
        Quaternion::new(
            0.25 * s,
            (m[(2, 1)] - m[(1, 2)]) / s,
            (m[(0, 2)] - m[(2, 0)]) / s,
            (m[(1, 0)] - m[(0, 1)]) / s,
        )
    } else if m[(0, 0)] > m[(1, 1)] && m[(0, 0)] > m[(2, 2)] {
        let s = (1.0 + m[(0, 0)] - m[(1, 1)] - m[(2, 2)]).sqrt() * 2.0;
        Quaternion::new(
            (m[(2, 1)] - m[(1, 2)]) / s,
            0.25 * s,
            (m[(0, 1)] + m[(1, 0)]) / s,
            (m[(0, 2)] + m[(2, 0)]) / s,
        )
    } else if m[(1, 1)] > m[(2, 2)] {
        let s = (1.0 + m[(1, 1)] - m[(0, 0)] - m[(2, 2)]).sqrt() * 2.0;
        Quaternion::new(
            (m[(0, 2)] - m[(2, 0)]) / s,
            (m[(0, 1)] + m[(1, 0)]) / s,
            0.25 * s,
            (m[(1, 2)] + m[(2, 1)]) / s,
        )
    } else {
        let s = (1.0 + m[(2, 2)] - m[(0, 0)] - m[(1, 1)]).sqrt() * 2.0;
        Quaternion::new(
            (m[(1, 0)] - m[(0, 1)]) / s,
            (m[(0, 2)] + m[(2, 0)]) / s,
            (m[(1, 2)] + m[(2, 1)]) / s,
            0.25 * s,
        )
    };
    normalized_canonical(&q).unwrap_or_else(identity)
}
