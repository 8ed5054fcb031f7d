//! Transverse reference frames for Stokes vectors.
//!
//! A frame is a right-handed orthonormal triad (x, y, p) where p is the
//! propagation direction. Stokes components are only meaningful relative to
//! such a frame, so every matrix that moves light between optical elements
//! carries a frame transfer.

use nalgebra::Vector3;

use crate::mueller::{frame_rotation, MuellerError, MuellerMatrix};

pub type Vec3 = Vector3<f64>;

pub const FRAME_ORTHO_TOL: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PolarizationFrame {
    pub x_axis: Vec3,
    pub y_axis: Vec3,
    pub propagation: Vec3,
}

impl PolarizationFrame {
    /// Builds a frame from explicit axes, checking unit length, orthogonality
    /// and right-handedness (x cross y = p) within `FRAME_ORTHO_TOL`.
    pub fn new(x_axis: Vec3, y_axis: Vec3, propagation: Vec3) -> Result<Self, MuellerError> {
        let frame = Self { x_axis, y_axis, propagation };
        let worst = frame.orthonormality_defect();
        if worst > FRAME_ORTHO_TOL {
            return Err(MuellerError::DegenerateFrame(worst));
        }
        Ok(frame)
    }

    /// Largest deviation from a right-handed orthonormal triad.
    pub fn orthonormality_defect(&self) -> f64 {
        let unit = [
            (self.x_axis.norm() - 1.0).abs(),
            (self.y_axis.norm() - 1.0).abs(),
            (self.propagation.norm() - 1.0).abs(),
        ];
        let handed = (self.x_axis.cross(&self.y_axis) - self.propagation).norm();
        unit.into_iter()
            .fold(handed, f64::max)
    }

    /// Frame for light travelling along `propagation`, oriented by a reference
    /// vector: y is perpendicular to the plane spanned by propagation and the
    /// reference, x completes the right-handed triad and lies in that plane.
    ///
    /// With the surface normal as reference this is the s/p frame of the plane
    /// of incidence (x along p-polarization, y along s-polarization). When the
    /// reference is parallel to the propagation the orientation is arbitrary;
    /// a fixed world axis is substituted so the result stays deterministic.
    pub fn from_reference(propagation: Vec3, reference: Vec3) -> Self {
        let p = propagation.normalize();
        let mut cross = p.cross(&reference);
        if cross.norm() < 1e-9 {
            let fallback = if p.x.abs() < 0.9 { Vec3::x() } else { Vec3::y() };
            cross = p.cross(&fallback);
        }
        let y_axis = cross.normalize();
        let x_axis = y_axis.cross(&p);
        Self { x_axis, y_axis, propagation: p }
    }

    /// Frame whose x axis is perpendicular to the plane spanned by
    /// `propagation` and `in_plane`: the s direction of that plane of
    /// incidence, with y completing the triad inside the plane. Falls back to
    /// a fixed world axis when the two vectors are parallel, like
    /// [`Self::from_reference`].
    pub fn from_plane(propagation: Vec3, in_plane: Vec3) -> Self {
        let p = propagation.normalize();
        let mut cross = p.cross(&in_plane);
        if cross.norm() < 1e-9 {
            let fallback = if p.x.abs() < 0.9 { Vec3::x() } else { Vec3::y() };
            cross = p.cross(&fallback);
        }
        let x_axis = cross.normalize();
        let y_axis = p.cross(&x_axis);
        Self { x_axis, y_axis, propagation: p }
    }

    /// Signed angle from this frame's x axis to `other`'s, about the shared
    /// propagation direction.
    pub fn angle_to(&self, other: &Self) -> f64 {
        let sin = self.x_axis.cross(&other.x_axis).dot(&self.propagation);
        let cos = self.x_axis.dot(&other.x_axis);
        sin.atan2(cos)
    }

    /// Rotates the frame by `angle` about the propagation direction.
    pub fn rotated(&self, angle: f64) -> Self {
        let (s, c) = angle.sin_cos();
        Self {
            x_axis: self.x_axis * c + self.y_axis * s,
            y_axis: -self.x_axis * s + self.y_axis * c,
            propagation: self.propagation,
        }
    }
}

/// Mueller matrix that re-expresses a Stokes vector in `to`-frame components.
///
/// Both frames must share a propagation direction within 1e-6; the result is
/// the frame rotation by the signed angle from `from.x_axis` to `to.x_axis`.
pub fn frame_transfer(
    from: &PolarizationFrame,
    to: &PolarizationFrame,
) -> Result<MuellerMatrix, MuellerError> {
    let gap = (from.propagation - to.propagation).norm();
    if gap > FRAME_ORTHO_TOL {
        return Err(MuellerError::MismatchedPropagation(gap));
    }
    Ok(frame_rotation(from.angle_to(to)))
}
