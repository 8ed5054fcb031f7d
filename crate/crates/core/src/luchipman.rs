//! Polar decomposition of Mueller matrices into depolarizing, retarding,
//! and diattenuating factors, plus the scalar summaries derived from them.
//!
//! The factor order is M = M_delta * M_R * M_D. The diattenuator is built
//! from the first row, divided out, and the remainder split by a polar
//! decomposition of its 3x3 block: a signed symmetric part (depolarization)
//! times a proper rotation (retardance). Singular cases are completed on the
//! unreachable subspace and flagged, never silently patched.

use nalgebra::{Matrix3, Vector3};
use rayon::prelude::*;
use thiserror::Error;

use crate::mueller::MuellerMatrix;
use crate::reconstruct::{MuellerImageStack, FLAG_VALID};

#[derive(Debug, Error)]
pub enum AnalysisError {
    #[error("matrix has nonpositive intensity gain m00 = {0}")]
    NonPositiveGain(f64),
}

/// Diattenuation magnitudes this close to 1 take the pseudo-inverse branch.
pub const SINGULAR_DIATTENUATION_EPS: f64 = 1e-9;
/// Relative singular-value floor below which the depolarizer block counts as
/// rank deficient.
pub const DEGENERATE_DEPOLARIZER_EPS: f64 = 1e-9;

#[derive(Debug, Clone)]
pub struct LuChipmanFactors {
    pub m_delta: MuellerMatrix,
    pub m_r: MuellerMatrix,
    pub m_d: MuellerMatrix,
    pub diattenuation: f64,
    pub polarizance: f64,
    /// Rotation angle of the retarder on the Poincare sphere, [0, pi].
    pub retardance: f64,
    /// 1 keeps polarization fully, 0 is the ideal depolarizer.
    pub preservation: f64,
    pub singular_diattenuator: bool,
    pub degenerate_depolarizer: bool,
}

/// Polarization-dependent transmittance for incident states, from the first
/// row. In [0, 1] for physical matrices; clamped.
pub fn diattenuation(m: &MuellerMatrix) -> f64 {
    let g = m.m00();
    if g <= 0.0 {
        return 0.0;
    }
    (m.0[(0, 1)].hypot(m.0[(0, 2)]).hypot(m.0[(0, 3)]) / g).clamp(0.0, 1.0)
}

/// Degree of polarization produced from unpolarized input, from the first
/// column. In [0, 1] for physical matrices; clamped.
pub fn polarizance(m: &MuellerMatrix) -> f64 {
    let g = m.m00();
    if g <= 0.0 {
        return 0.0;
    }
    (m.0[(1, 0)].hypot(m.0[(2, 0)]).hypot(m.0[(3, 0)]) / g).clamp(0.0, 1.0)
}

/// Rotation angle of a retarder factor: arccos(tr(M_R)/2 - 1).
pub fn retardance_scalar(m_r: &MuellerMatrix) -> f64 {
    (0.5 * m_r.0.trace() - 1.0).clamp(-1.0, 1.0).acos()
}

/// |trace of the 3x3 depolarizer block| / 3.
pub fn preservation(m_delta: &MuellerMatrix) -> f64 {
    (m_delta.0[(1, 1)] + m_delta.0[(2, 2)] + m_delta.0[(3, 3)]).abs() / 3.0
}

fn block3(m: &MuellerMatrix) -> Matrix3<f64> {
    Matrix3::from_fn(|r, c| m.0[(r + 1, c + 1)])
}

fn assemble(first_column: &Vector3<f64>, block: &Matrix3<f64>) -> MuellerMatrix {
    let mut out = MuellerMatrix::identity();
    for r in 0..3 {
        out.0[(r + 1, 0)] = first_column[r];
        for c in 0..3 {
            out.0[(r + 1, c + 1)] = block[(r, c)];
        }
    }
    out
}

fn pinv4(m: &MuellerMatrix) -> MuellerMatrix {
    let svd = m.0.svd(true, true);
    let cutoff = 1e-12 * svd.singular_values.max();
    MuellerMatrix(svd.pseudo_inverse(cutoff.max(f64::MIN_POSITIVE)).unwrap())
}

/// Factors a Mueller matrix as depolarizer times retarder times
/// diattenuator. The overall intensity gain rides on the diattenuator, so a
/// pure polarizer comes back unchanged as M_D with identity companions.
pub fn lu_chipman(m: &MuellerMatrix) -> Result<LuChipmanFactors, AnalysisError> {
    let gain = m.m00();
    if !(gain > 0.0) {
        return Err(AnalysisError::NonPositiveGain(gain));
    }
    let mhat = m.scaled(1.0 / gain);
    let dvec = Vector3::new(mhat.0[(0, 1)], mhat.0[(0, 2)], mhat.0[(0, 3)]);
    let d = dvec.norm();
    let singular_diattenuator = d >= 1.0 - SINGULAR_DIATTENUATION_EPS;

    let m_d_block = if d > 1e-300 {
        let a = (1.0 - (d * d).min(1.0)).sqrt();
        let dhat = dvec / d;
        Matrix3::identity() * a + (dhat * dhat.transpose()) * (1.0 - a)
    } else {
        Matrix3::identity()
    };
    let mut m_d = assemble(&dvec, &m_d_block);
    for c in 0..3 {
        m_d.0[(0, c + 1)] = dvec[c];
    }
    let m_d = m_d.scaled(gain);

    let m_prime = if singular_diattenuator {
        // The diattenuator kills a subspace; complete the quotient with the
        // identity there so the remaining factors stay well defined.
        let pinv = pinv4(&m_d);
        let projector = MuellerMatrix(m_d.0 * pinv.0);
        MuellerMatrix(m.0 * pinv.0 + (MuellerMatrix::identity().0 - projector.0))
    } else {
        let inv = m_d
            .0
            .try_inverse()
            .unwrap_or_else(|| pinv4(&m_d).0);
        MuellerMatrix(m.0 * inv)
    };

    let p_delta = Vector3::new(m_prime.0[(1, 0)], m_prime.0[(2, 0)], m_prime.0[(3, 0)]);
    let m_prime_block = block3(&m_prime);
    let svd = m_prime_block.svd(true, true);
    let u = svd.u.unwrap();
    let v_t = svd.v_t.unwrap();
    let s = svd.singular_values;
    let handedness = (u * v_t).determinant().signum();
    let degenerate_depolarizer = s[2] <= DEGENERATE_DEPOLARIZER_EPS * s[0].max(1e-300);

    let (delta_block, r_block) = if degenerate_depolarizer {
        // Closest proper rotation, with the depolarizer absorbing the sign
        // so the product still reproduces the block exactly.
        let fixup = Matrix3::from_diagonal(&Vector3::new(1.0, 1.0, handedness));
        let r = u * fixup * v_t;
        let delta = u * Matrix3::from_diagonal(&Vector3::new(s[0], s[1], s[2] * handedness))
            * u.transpose();
        (delta, r)
    } else {
        let delta = u * Matrix3::from_diagonal(&s) * u.transpose() * handedness;
        let r = u * v_t * handedness;
        (delta, r)
    };

    let m_delta = assemble(&p_delta, &delta_block);
    let m_r = assemble(&Vector3::zeros(), &r_block);
    Ok(LuChipmanFactors {
        diattenuation: d.clamp(0.0, 1.0),
        polarizance: polarizance(m),
        retardance: retardance_scalar(&m_r),
        preservation: preservation(&m_delta),
        m_delta,
        m_r,
        m_d,
        singular_diattenuator,
        degenerate_depolarizer,
    })
}

pub const SCALAR_FLAG_SINGULAR_D: u8 = 1;
pub const SCALAR_FLAG_DEGENERATE: u8 = 2;
pub const SCALAR_FLAG_OUT_OF_RANGE: u8 = 4;

/// Per-pixel scalar planes for a reconstructed stack, one value per
/// (arm, band, pixel) in stack order. Unsolved pixels hold NaN.
pub struct ScalarMaps {
    pub arms: usize,
    pub bands: usize,
    pub width: u32,
    pub height: u32,
    pub diattenuation: Vec<f32>,
    pub polarizance: Vec<f32>,
    pub retardance: Vec<f32>,
    pub preservation: Vec<f32>,
    pub flags: Vec<u8>,
}

pub fn scalar_maps(stack: &MuellerImageStack) -> ScalarMaps {
    let pixels = stack.pixels();
    let planes = stack.arms * stack.bands;
    let mut out = ScalarMaps {
        arms: stack.arms,
        bands: stack.bands,
        width: stack.width,
        height: stack.height,
        diattenuation: vec![f32::NAN; planes * pixels],
        polarizance: vec![f32::NAN; planes * pixels],
        retardance: vec![f32::NAN; planes * pixels],
        preservation: vec![f32::NAN; planes * pixels],
        flags: vec![0; planes * pixels],
    };
    out.diattenuation
        .par_chunks_mut(pixels)
        .zip(out.polarizance.par_chunks_mut(pixels))
        .zip(out.retardance.par_chunks_mut(pixels))
        .zip(out.preservation.par_chunks_mut(pixels))
        .zip(out.flags.par_chunks_mut(pixels))
        .enumerate()
        .for_each(|(plane, ((((dia, pol), ret), pre), flags))| {
            let (arm, band) = (plane / stack.bands, plane % stack.bands);
            for y in 0..stack.height {
                for x in 0..stack.width {
                    let p = (y * stack.width + x) as usize;
                    if stack.flags_at(arm, band, y, x) & FLAG_VALID == 0 {
                        continue;
                    }
                    let m = stack.matrix_at(arm, band, y, x);
                    if m.m00() <= 0.0 {
                        continue;
                    }
                    let raw_d = m.0[(0, 1)].hypot(m.0[(0, 2)]).hypot(m.0[(0, 3)]) / m.m00();
                    let raw_p = m.0[(1, 0)].hypot(m.0[(2, 0)]).hypot(m.0[(3, 0)]) / m.m00();
                    let mut flag = 0u8;
                    if raw_d > 1.0 + 1e-6 || raw_p > 1.0 + 1e-6 {
                        flag |= SCALAR_FLAG_OUT_OF_RANGE;
                    }
                    match lu_chipman(&m) {
                        Ok(f) => {
                            if f.singular_diattenuator {
                                flag |= SCALAR_FLAG_SINGULAR_D;
                            }
                            if f.degenerate_depolarizer {
                                flag |= SCALAR_FLAG_DEGENERATE;
                            }
                            dia[p] = f.diattenuation as f32;
                            pol[p] = f.polarizance as f32;
                            ret[p] = f.retardance as f32;
                            pre[p] = f.preservation.clamp(0.0, 1.0 + 1e-6) as f32;
                        }
                        Err(_) => continue,
                    }
                    flags[p] = flag;
                }
            }
        });
    out
}
