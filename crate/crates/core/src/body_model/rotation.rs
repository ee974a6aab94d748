//! Axis-angle rotations.

use nalgebra::{Matrix3, Vector3};
use std::f64::consts::PI;

const SERIES_CUTOFF: f64 = 1e-3;

fn skew(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

/// Coefficients `(a, b)` of `R = I + a [v]x + b [v]x^2` with `a = sin t / t`,
/// `b = (1 - cos t) / t^2`, and their scaled derivatives `(a'/t, b'/t)`.
fn coefficients(angle: f64) -> (f64, f64, f64, f64) {
    let t2 = angle * angle;
    if angle < SERIES_CUTOFF {
        let a = 1.0 - t2 / 6.0 + t2 * t2 / 120.0;
        let b = 0.5 - t2 / 24.0 + t2 * t2 / 720.0;
        let da = -1.0 / 3.0 + t2 / 30.0;
        let db = -1.0 / 12.0 + t2 / 180.0;
        (a, b, da, db)
    } else {
        let (s, c) = angle.sin_cos();
        let a = s / angle;
        let b = (1.0 - c) / t2;
        let da = (c - a) / t2;
        let db = (a - 2.0 * b) / t2;
        (a, b, da, db)
    }
}

/// Rotation matrix of an axis-angle vector.
pub fn rodrigues(axis_angle: &Vector3<f64>) -> Matrix3<f64> {
    let (a, b, _, _) = coefficients(axis_angle.norm());
    let k = skew(axis_angle);
    Matrix3::identity() + k * a + k * k * b
}

/// Rotation and its partial derivatives with respect to each component of
/// the axis-angle vector.
pub fn rodrigues_with_jacobian(axis_angle: &Vector3<f64>) -> (Matrix3<f64>, [Matrix3<f64>; 3]) {
    let (a, b, da, db) = coefficients(axis_angle.norm());
    let k = skew(axis_angle);
    let k2 = k * k;
    let rot = Matrix3::identity() + k * a + k2 * b;
    let mut jac = [Matrix3::zeros(); 3];
    for (i, d) in jac.iter_mut().enumerate() {
        let e = skew(&Vector3::ith(i, 1.0));
        let vi = axis_angle[i];
        *d = e * a + (e * k + k * e) * b + k * (da * vi) + k2 * (db * vi);
    }
    (rot, jac)
}

/// Wraps an axis-angle vector so its norm lies in `[0, 2*pi)` without
/// changing the rotation it encodes.
pub fn canonicalize(axis_angle: &Vector3<f64>) -> Vector3<f64> {
    let angle = axis_angle.norm();
    let full = 2.0 * PI;
    if angle < full {
        return *axis_angle;
    }
    let wrapped = angle.rem_euclid(full);
    axis_angle * (wrapped / angle)
}

/// Axis-angle vector of a rotation matrix, angle in `[0, pi]`.
pub fn log_map(rot: &Matrix3<f64>) -> Vector3<f64> {
    let r = nalgebra::Rotation3::from_matrix_unchecked(*rot);
    r.scaled_axis()
}

/// Geodesic distance between two rotations in radians.
pub fn geodesic_angle(a: &Matrix3<f64>, b: &Matrix3<f64>) -> f64 {
    let rel = a.transpose() * b;
    let c = ((rel.trace() - 1.0) * 0.5).clamp(-1.0, 1.0);
    c.acos()
}
