//! Half-angle / difference-angle coordinates for isotropic BRDFs.
//!
//! Directions live in the local shading basis (z up). The half vector's
//! zenith angle, the difference vector's zenith angle, and the difference
//! vector's azimuth are invariant under rotating the direction pair about
//! the normal, so an isotropic material needs only these three angles.

use std::f64::consts::TAU;

use thiserror::Error;

use crate::frame::Vec3;

#[derive(Debug, Error, PartialEq, Eq)]
#[error("half vector is undefined for opposite directions")]
pub struct DegenerateHalfVector;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RusinkiewiczCoord {
    /// Azimuth of the difference vector, [0, 2π).
    pub phi_d: f64,
    /// Zenith of the difference vector, [0, π/2].
    pub theta_d: f64,
    /// Zenith of the half vector, [0, π/2].
    pub theta_h: f64,
}

fn rotate_about_y(v: &Vec3, angle: f64) -> Vec3 {
    let (s, c) = angle.sin_cos();
    Vec3::new(c * v.x + s * v.z, v.y, -s * v.x + c * v.z)
}

fn rotate_about_z(v: &Vec3, angle: f64) -> Vec3 {
    let (s, c) = angle.sin_cos();
    Vec3::new(c * v.x - s * v.y, s * v.x + c * v.y, v.z)
}

/// Angles of a direction pair in the local basis. Both directions point away
/// from the surface; they need not be above the horizon (grazing capture
/// geometry can dip a recovered direction slightly below).
pub fn to_rusinkiewicz(
    omega_i: &Vec3,
    omega_o: &Vec3,
) -> Result<RusinkiewiczCoord, DegenerateHalfVector> {
    let sum = omega_i + omega_o;
    let norm = sum.norm();
    if norm < 1e-9 {
        return Err(DegenerateHalfVector);
    }
    let half = sum / norm;
    let theta_h = half.z.clamp(-1.0, 1.0).acos();
    let phi_h = if half.x == 0.0 && half.y == 0.0 { 0.0 } else { half.y.atan2(half.x) };
    let diff = rotate_about_y(&rotate_about_z(omega_i, -phi_h), -theta_h);
    let theta_d = diff.z.clamp(-1.0, 1.0).acos();
    let phi_d = if diff.x == 0.0 && diff.y == 0.0 {
        0.0
    } else {
        diff.y.atan2(diff.x).rem_euclid(TAU)
    };
    Ok(RusinkiewiczCoord { phi_d, theta_d, theta_h })
}

/// The canonical direction pair for a coordinate triple, choosing the
/// representative whose half vector lies in the x-z plane.
pub fn from_rusinkiewicz(coord: &RusinkiewiczCoord) -> (Vec3, Vec3) {
    let diff = Vec3::new(
        coord.theta_d.sin() * coord.phi_d.cos(),
        coord.theta_d.sin() * coord.phi_d.sin(),
        coord.theta_d.cos(),
    );
    let omega_i = rotate_about_y(&diff, coord.theta_h);
    let half = Vec3::new(coord.theta_h.sin(), 0.0, coord.theta_h.cos());
    let omega_o = 2.0 * half.dot(&omega_i) * half - omega_i;
    (omega_i, omega_o)
}
