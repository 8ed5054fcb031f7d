//! Stokes vectors, Mueller matrices, and the physical-validity test.
//!
//! Angle convention: element angles are measured from the frame x axis toward
//! the y axis, and enter Mueller matrices through their doubled angle. The
//! retarder at fast axis 0 maps s2 -> cos(d) s2 + sin(d) s3, which fixes the
//! retardance sign convention used throughout.

use std::ops::{Add, Mul};

use nalgebra::{Complex, Matrix4, Vector4};
use thiserror::Error;

use crate::frame::PolarizationFrame;

/// Relative slack accepted when testing Stokes admissibility.
pub const DEFAULT_ADMISSIBILITY_TOL: f64 = 1e-9;

#[derive(Debug, Error)]
pub enum MuellerError {
    #[error("propagation directions differ by {0:.3e}, more than 1e-6")]
    MismatchedPropagation(f64),
    #[error("frame axes deviate from an orthonormal right-handed triad by {0:.3e}")]
    DegenerateFrame(f64),
    #[error("degree of polarization undefined for intensity s0 = {0}")]
    ZeroIntensity(f64),
    #[error("eigenvalue iteration did not converge")]
    NumericalFailure,
}

/// Stokes vector (s0, s1, s2, s3) relative to some transverse frame.
#[derive(Clone, Copy, Debug, PartialEq, Default)]
pub struct StokesVector(pub Vector4<f64>);

impl StokesVector {
    pub fn new(s0: f64, s1: f64, s2: f64, s3: f64) -> Self {
        Self(Vector4::new(s0, s1, s2, s3))
    }

    /// Unpolarized beam of the given intensity.
    pub fn unpolarized(intensity: f64) -> Self {
        Self::new(intensity, 0.0, 0.0, 0.0)
    }

    /// Fully linearly polarized beam at `angle` from the frame x axis.
    pub fn linear(intensity: f64, angle: f64) -> Self {
        let (s, c) = (2.0 * angle).sin_cos();
        Self::new(intensity, intensity * c, intensity * s, 0.0)
    }

    pub fn s0(&self) -> f64 {
        self.0[0]
    }
    pub fn s1(&self) -> f64 {
        self.0[1]
    }
    pub fn s2(&self) -> f64 {
        self.0[2]
    }
    pub fn s3(&self) -> f64 {
        self.0[3]
    }

    /// Intensity of the polarized part.
    pub fn polarized_intensity(&self) -> f64 {
        (self.s1() * self.s1() + self.s2() * self.s2() + self.s3() * self.s3()).sqrt()
    }
}

/// True when s0 >= 0 and s0^2 >= s1^2 + s2^2 + s3^2, within a relative slack
/// of `tol` times the squared vector norm.
pub fn is_admissible(s: &StokesVector, tol: f64) -> bool {
    let scale = s.0.norm_squared();
    let margin = s.s0() * s.s0() - s.polarized_intensity().powi(2);
    s.s0() >= -tol * scale.sqrt() && margin >= -tol * scale
}

/// Degree of polarization. Fails on non-positive intensity.
pub fn dop(s: &StokesVector) -> Result<f64, MuellerError> {
    if s.s0() <= 0.0 {
        return Err(MuellerError::ZeroIntensity(s.s0()));
    }
    Ok(s.polarized_intensity() / s.s0())
}

/// Angle of linear polarization in [0, pi).
pub fn aolp(s: &StokesVector) -> f64 {
    let half = 0.5 * s.s2().atan2(s.s1());
    if half < 0.0 {
        half + std::f64::consts::PI
    } else {
        half
    }
}

/// 4x4 Mueller matrix, row-major indexing `m[(row, col)]`.
#[derive(Clone, Copy, Debug, PartialEq, Default)]
pub struct MuellerMatrix(pub Matrix4<f64>);

impl MuellerMatrix {
    pub fn identity() -> Self {
        Self(Matrix4::identity())
    }

    pub fn zeros() -> Self {
        Self(Matrix4::zeros())
    }

    pub fn from_rows(rows: [[f64; 4]; 4]) -> Self {
        Self(Matrix4::from_fn(|r, c| rows[r][c]))
    }

    pub fn m00(&self) -> f64 {
        self.0[(0, 0)]
    }

    pub fn frobenius(&self) -> f64 {
        self.0.norm()
    }

    pub fn transpose(&self) -> Self {
        Self(self.0.transpose())
    }

    pub fn scaled(&self, k: f64) -> Self {
        Self(self.0 * k)
    }
}

impl Mul for MuellerMatrix {
    type Output = MuellerMatrix;
    fn mul(self, rhs: Self) -> Self {
        Self(self.0 * rhs.0)
    }
}

impl Mul<StokesVector> for MuellerMatrix {
    type Output = StokesVector;
    fn mul(self, rhs: StokesVector) -> StokesVector {
        StokesVector(self.0 * rhs.0)
    }
}

impl Add for MuellerMatrix {
    type Output = MuellerMatrix;
    fn add(self, rhs: Self) -> Self {
        Self(self.0 + rhs.0)
    }
}

impl Mul<MuellerMatrix> for f64 {
    type Output = MuellerMatrix;
    fn mul(self, rhs: MuellerMatrix) -> MuellerMatrix {
        rhs.scaled(self)
    }
}

/// Ideal linear polarizer with transmission axis at `angle`.
pub fn lp_mueller(angle: f64) -> MuellerMatrix {
    let (s, c) = (2.0 * angle).sin_cos();
    MuellerMatrix(
        Matrix4::new(
            1.0,
            c,
            s,
            0.0,
            c,
            c * c,
            c * s,
            0.0,
            s,
            c * s,
            s * s,
            0.0,
            0.0,
            0.0,
            0.0,
            0.0,
        ) * 0.5,
    )
}

/// Frame rotation by `angle`: re-expresses a Stokes vector in a frame whose
/// x axis is rotated by `angle` toward y. Leaves s0 and s3 unchanged.
pub fn frame_rotation(angle: f64) -> MuellerMatrix {
    let (s, c) = (2.0 * angle).sin_cos();
    MuellerMatrix(Matrix4::new(
        1.0, 0.0, 0.0, 0.0, //
        0.0, c, s, 0.0, //
        0.0, -s, c, 0.0, //
        0.0, 0.0, 0.0, 1.0,
    ))
}

/// Linear retarder with the given fast axis and retardance.
///
/// At fast axis 0 the matrix is diag-block [[1,0],[0,1]] over (s0, s1) and
/// [[cos d, sin d], [-sin d, cos d]] over (s2, s3); a general fast axis is
/// obtained by conjugating with frame rotations.
pub fn retarder_mueller(fast_axis: f64, retardance: f64) -> MuellerMatrix {
    let (s, c) = retardance.sin_cos();
    let at_zero = MuellerMatrix(Matrix4::new(
        1.0, 0.0, 0.0, 0.0, //
        0.0, 1.0, 0.0, 0.0, //
        0.0, 0.0, c, s, //
        0.0, 0.0, -s, c,
    ));
    frame_rotation(-fast_axis) * at_zero * frame_rotation(fast_axis)
}

/// Options for the Givens-Kostinski physical-validity test.
#[derive(Clone, Copy, Debug)]
pub struct GkOptions {
    /// Imaginary parts below this fraction of the Frobenius norm of
    /// G M^T G M count as real.
    pub eigen_imag_rel_tol: f64,
    /// Relative slack forwarded to the Stokes admissibility checks.
    pub admissibility_tol: f64,
}

impl Default for GkOptions {
    fn default() -> Self {
        Self { eigen_imag_rel_tol: 1e-7, admissibility_tol: DEFAULT_ADMISSIBILITY_TOL }
    }
}

impl GkOptions {
    /// Looser tolerances for matrices that came out of the capture path,
    /// where intensities were quantized to f32 and the per-pixel solve
    /// amplifies that quantization by the conditioning of the angle set.
    pub fn reconstruction() -> Self {
        Self { eigen_imag_rel_tol: 1e-6, admissibility_tol: 1e-6 }
    }
}

/// Outcome of the validity test, kept for reporting.
#[derive(Clone, Debug)]
pub struct GkDiagnostics {
    pub physical: bool,
    pub eigenvalues: [Complex<f64>; 4],
    /// Candidate Stokes vector from the dominant eigenspace, sign-fixed to
    /// non-negative s0.
    pub test_vector: StokesVector,
    pub eigenvalues_real: bool,
    pub eigenvector_admissible: bool,
    pub orientation_admissible: bool,
}

const MINKOWSKI_SIGNS: [f64; 4] = [1.0, -1.0, -1.0, -1.0];

/// Givens-Kostinski test: M is physically realizable iff G M^T G M has real
/// eigenvalues, the eigenspace of the algebraically largest eigenvalue
/// contains an admissible Stokes vector, and M keeps canonical admissible
/// inputs admissible (this last check pins the light-cone orientation, which
/// the quadratic form cannot see).
pub fn is_physical_gk(m: &MuellerMatrix, opts: &GkOptions) -> Result<GkDiagnostics, MuellerError> {
    if !m.0.iter().all(|v| v.is_finite()) {
        return Err(MuellerError::NumericalFailure);
    }
    let g = Matrix4::from_diagonal(&Vector4::from_row_slice(&MINKOWSKI_SIGNS));
    let n = g * m.0.transpose() * g * m.0;

    // N is quadratic in M, so its floating-point noise floor scales with
    // |M|^2; without that floor an exactly-nilpotent N (ideal polarizer
    // products) would be tested against a tolerance made of roundoff.
    let m2 = m.0.norm_squared();
    let scale = n.norm().max(1e-7 * m2);

    let eigenvalues = crate::eigen4::eigenvalues4(&n);
    let imag_tol = opts.eigen_imag_rel_tol * scale;
    let eigenvalues_real = eigenvalues.iter().all(|l| l.im.abs() <= imag_tol);

    let lambda_max = eigenvalues
        .iter()
        .map(|l| l.re)
        .fold(f64::NEG_INFINITY, f64::max);

    // Basis of the dominant eigenspace from the near-null directions of
    // N - lambda_max I; degenerate eigenvalues widen the basis, which is what
    // makes rank-deficient but physical matrices (ideal polarizers) pass.
    let shifted = n - Matrix4::identity() * lambda_max;
    let pivot_tol = 1e-6 * scale.max(lambda_max.abs()) + 1e-300;
    let basis = crate::eigen4::null_space4(&shifted, pivot_tol);

    // Maximize v^T G v over unit vectors of the eigenspace; the maximizer is
    // the best Stokes candidate and its value the admissibility margin.
    let k = basis.len();
    let mut gram = nalgebra::DMatrix::<f64>::zeros(k, k);
    for i in 0..k {
        for j in 0..k {
            gram[(i, j)] = basis[i].dot(&(g * basis[j]));
        }
    }
    let sym = nalgebra::linalg::SymmetricEigen::new(gram);
    let (best_idx, best_val) = sym
        .eigenvalues
        .iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |acc, (i, v)| {
            if *v > acc.1 {
                (i, *v)
            } else {
                acc
            }
        });
    let weights = sym.eigenvectors.column(best_idx);
    let mut candidate = Vector4::zeros();
    for (i, b) in basis.iter().enumerate() {
        candidate += b * weights[i];
    }
    if candidate[0] < 0.0 {
        candidate = -candidate;
    }
    let test_vector = StokesVector(candidate);
    let eigenvector_admissible = best_val >= -opts.admissibility_tol;

    let m_norm = m.frobenius().max(f64::MIN_POSITIVE);
    let orientation_admissible = CANONICAL_INPUTS.iter().all(|s| {
        let out = *m * StokesVector(Vector4::from_row_slice(s));
        is_admissible(
            &StokesVector(out.0 / m_norm),
            opts.admissibility_tol.max(1e-12),
        )
    });

    let physical = eigenvalues_real && eigenvector_admissible && orientation_admissible;
    Ok(GkDiagnostics {
        physical,
        eigenvalues,
        test_vector,
        eigenvalues_real,
        eigenvector_admissible,
        orientation_admissible,
    })
}

const CANONICAL_INPUTS: [[f64; 4]; 7] = [
    [1.0, 0.0, 0.0, 0.0],
    [1.0, 1.0, 0.0, 0.0],
    [1.0, -1.0, 0.0, 0.0],
    [1.0, 0.0, 1.0, 0.0],
    [1.0, 0.0, -1.0, 0.0],
    [1.0, 0.0, 0.0, 1.0],
    [1.0, 0.0, 0.0, -1.0],
];

/// Brute-force cone check: maps `n` random admissible Stokes vectors through
/// the matrix and verifies every image is admissible. Half the samples sit on
/// the fully polarized boundary where violations are largest.
pub fn maps_admissible_cone(
    m: &MuellerMatrix,
    n: usize,
    rng: &mut impl rand::Rng,
    tol: f64,
) -> bool {
    let m_norm = m.frobenius().max(f64::MIN_POSITIVE);
    for i in 0..n {
        let dir = random_unit3(rng);
        let p = if i % 2 == 0 { 1.0 } else { rng.gen::<f64>() };
        let s = StokesVector::new(1.0, p * dir[0], p * dir[1], p * dir[2]);
        let out = *m * s;
        if !is_admissible(&StokesVector(out.0 / m_norm), tol) {
            return false;
        }
    }
    true
}

fn random_unit3(rng: &mut impl rand::Rng) -> [f64; 3] {
    loop {
        let v = [
            rng.gen::<f64>() * 2.0 - 1.0,
            rng.gen::<f64>() * 2.0 - 1.0,
            rng.gen::<f64>() * 2.0 - 1.0,
        ];
        let n2: f64 = v.iter().map(|x| x * x).sum();
        if n2 > 1e-12 && n2 <= 1.0 {
            let n = n2.sqrt();
            return [v[0] / n, v[1] / n, v[2] / n];
        }
    }
}

/// Mueller matrix of `element` rotated so its reference axis sits at `angle`.
pub fn rotated_element(element: &MuellerMatrix, angle: f64) -> MuellerMatrix {
    frame_rotation(-angle) * *element * frame_rotation(angle)
}

impl MuellerMatrix {
    /// Transfers the matrix between frame pairs: output frame changes through
    /// `out_transfer`, input frame through the inverse of `in_transfer`.
    pub fn in_frames(
        &self,
        in_transfer: &MuellerMatrix,
        out_transfer: &MuellerMatrix,
    ) -> MuellerMatrix {
        *out_transfer * *self * in_transfer.transpose()
    }
}

/// Convenience: transfer matrix between frames, inverse direction.
pub fn frame_transfer_inverse(
    from: &PolarizationFrame,
    to: &PolarizationFrame,
) -> Result<MuellerMatrix, MuellerError> {
    crate::frame::frame_transfer(to, from)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn assert_mat_eq(a: &MuellerMatrix, b: &MuellerMatrix, eps: f64) {
        assert_relative_eq!(a.0, b.0, epsilon = eps);
    }

    #[test]
    fn polarizer_halves_unpolarized_light() {
        let out = lp_mueller(0.0) * StokesVector::unpolarized(1.0);
        assert_relative_eq!(out.s0(), 0.5, epsilon = 1e-15);
        assert_relative_eq!(out.s1(), 0.5, epsilon = 1e-15);
        assert_relative_eq!(dop(&out).unwrap(), 1.0, epsilon = 1e-12);
    }

    #[test]
    fn crossed_polarizers_extinguish() {
        let m = lp_mueller(std::f64::consts::FRAC_PI_2) * lp_mueller(0.0);
        let out = m * StokesVector::unpolarized(1.0);
        assert!(out.s0().abs() < 1e-15);
    }

    #[test]
    fn malus_law_through_analyzer() {
        for k in 0..32 {
            let a = k as f64 * 0.1;
            let beam = lp_mueller(0.0) * StokesVector::unpolarized(2.0);
            let out = lp_mueller(a) * beam;
            assert_relative_eq!(out.s0(), a.cos().powi(2), epsilon = 1e-12);
        }
    }

    #[test]
    fn quarter_wave_at_45_degrees_makes_circular() {
        let qwp = retarder_mueller(std::f64::consts::FRAC_PI_4, std::f64::consts::FRAC_PI_2);
        let out = qwp * StokesVector::new(1.0, 1.0, 0.0, 0.0);
        assert_relative_eq!(out.s3().abs(), 1.0, epsilon = 1e-12);
        assert!(out.s1().abs() < 1e-12 && out.s2().abs() < 1e-12);
    }

    #[test]
    fn retarder_at_zero_axis_fixes_sign_convention() {
        let m = retarder_mueller(0.0, 0.3);
        assert_relative_eq!(m.0[(2, 2)], 0.3f64.cos(), epsilon = 1e-15);
        assert_relative_eq!(m.0[(2, 3)], 0.3f64.sin(), epsilon = 1e-15);
        assert_relative_eq!(m.0[(3, 2)], -(0.3f64.sin()), epsilon = 1e-15);
    }

    #[test]
    fn rotated_polarizer_matches_closed_form() {
        for k in 0..12 {
            let a = k as f64 * 0.31;
            assert_mat_eq(&lp_mueller(a), &rotated_element(&lp_mueller(0.0), a), 1e-12);
        }
    }

    #[test]
    fn frame_rotation_half_turn_flips_linear_components() {
        let r = frame_rotation(std::f64::consts::FRAC_PI_2);
        let out = r * StokesVector::new(1.0, 0.3, -0.2, 0.7);
        assert_relative_eq!(out.s1(), -0.3, epsilon = 1e-15);
        assert_relative_eq!(out.s2(), 0.2, epsilon = 1e-15);
        assert_relative_eq!(out.s3(), 0.7, epsilon = 1e-15);
    }

    #[test]
    fn full_turn_frame_rotation_is_identity() {
        assert_mat_eq(
            &frame_rotation(std::f64::consts::PI),
            &MuellerMatrix::identity(),
            1e-12,
        );
    }

    #[test]
    fn admissibility_accepts_cone_and_rejects_outside() {
        assert!(is_admissible(&StokesVector::new(1.0, 1.0, 0.0, 0.0), 1e-9));
        assert!(is_admissible(&StokesVector::new(1.0, 0.3, 0.3, 0.3), 1e-9));
        assert!(!is_admissible(&StokesVector::new(1.0, 1.01, 0.0, 0.0), 1e-9));
        assert!(!is_admissible(&StokesVector::new(-1.0, 0.0, 0.0, 0.0), 1e-9));
        assert!(is_admissible(&StokesVector::new(0.0, 0.0, 0.0, 0.0), 1e-9));
    }

    #[test]
    fn dop_rejects_zero_intensity() {
        assert!(matches!(
            dop(&StokesVector::default()),
            Err(MuellerError::ZeroIntensity(_))
        ));
    }

    #[test]
    fn gk_accepts_element_products() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let opts = GkOptions::default();
        for _ in 0..200 {
            let mut m = MuellerMatrix::identity();
            for _ in 0..rng.gen_range(1..5) {
                let a = rng.gen::<f64>() * 6.0 - 3.0;
                m = match rng.gen_range(0..3) {
                    0 => lp_mueller(a),
                    1 => retarder_mueller(a, rng.gen::<f64>() * 6.0),
                    _ => frame_rotation(a),
                } * m;
            }
            m = m.scaled(rng.gen::<f64>() * 2.0);
            let diag = is_physical_gk(&m, &opts).unwrap();
            assert!(diag.physical, "rejected product {:?}", m);
        }
    }

    #[test]
    fn gk_accepts_ideal_depolarizer_and_identity() {
        let opts = GkOptions::default();
        let depol = MuellerMatrix(Matrix4::from_diagonal(&Vector4::new(1.0, 0.0, 0.0, 0.0)));
        assert!(is_physical_gk(&depol, &opts).unwrap().physical);
        assert!(is_physical_gk(&MuellerMatrix::identity(), &opts).unwrap().physical);
        assert!(is_physical_gk(&MuellerMatrix::zeros(), &opts).unwrap().physical);
    }

    #[test]
    fn gk_rejects_overpolarizing_matrix() {
        let mut m = MuellerMatrix::identity();
        m.0[(0, 1)] = 1.5;
        let diag = is_physical_gk(&m, &GkOptions::default()).unwrap();
        assert!(!diag.physical);
        assert!(!diag.eigenvalues_real);
    }

    #[test]
    fn gk_rejects_cone_flip() {
        let m = MuellerMatrix::identity().scaled(-1.0);
        let diag = is_physical_gk(&m, &GkOptions::default()).unwrap();
        assert!(!diag.physical);
        assert!(!diag.orientation_admissible);
    }

    #[test]
    fn gk_matches_brute_force_on_random_matrices() {
        let mut rng = ChaCha8Rng::seed_from_u64(4242);
        let opts = GkOptions::default();
        let mut disagreements = 0;
        for _ in 0..200 {
            let m = MuellerMatrix(Matrix4::from_fn(|_, _| rng.gen::<f64>() * 2.0 - 1.0));
            let gk = is_physical_gk(&m, &opts).unwrap().physical;
            let brute = maps_admissible_cone(&m, 10_000, &mut rng, opts.admissibility_tol);
            if gk != brute {
                disagreements += 1;
            }
        }
        assert_eq!(disagreements, 0);
    }
}
