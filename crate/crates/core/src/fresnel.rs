//! Complex-index Fresnel reflection.
//!
//! Amplitudes use the complex refractive index n = eta - i*kappa and the
//! principal square root for the transmitted cosine. Under this convention an
//! external dielectric reflection below Brewster has an s-p phase difference
//! of exactly pi, metals land strictly between 0 and pi (mod 2pi), and total
//! internal reflection produces the opposite retardance sign from a metal at
//! the same incidence angle.

use nalgebra::Complex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::mueller::MuellerMatrix;
use crate::spectrum::{Spectrum, SpectrumError, WavelengthGrid};

#[derive(Debug, Error)]
pub enum MaterialError {
    #[error("refractive index must be positive (band {band}: eta = {value})")]
    NonPositiveEta { band: usize, value: f64 },
    #[error("extinction coefficient must be nonnegative (band {band}: kappa = {value})")]
    NegativeKappa { band: usize, value: f64 },
    #[error("eta is sampled on {eta} bands but kappa on {kappa}")]
    BandMismatch { eta: usize, kappa: usize },
    #[error("albedo must lie in [0, 1] (band {band}: {value})")]
    AlbedoOutOfRange { band: usize, value: f64 },
    #[error("specular scale must be nonnegative, got {0}")]
    NegativeSpecularScale(f64),
    #[error("lobe width must be positive, got {0}")]
    NonPositiveLobeWidth(f64),
    #[error(transparent)]
    Spectrum(#[from] SpectrumError),
}

/// Complex refractive index sampled per wavelength band.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpectralIor {
    eta: Vec<f64>,
    kappa: Vec<f64>,
}

impl SpectralIor {
    pub fn new(eta: Vec<f64>, kappa: Vec<f64>) -> Result<Self, MaterialError> {
        if eta.len() != kappa.len() {
            return Err(MaterialError::BandMismatch {
                eta: eta.len(),
                kappa: kappa.len(),
            });
        }
        for (band, &value) in eta.iter().enumerate() {
            if !(value > 0.0) || !value.is_finite() {
                return Err(MaterialError::NonPositiveEta { band, value });
            }
        }
        for (band, &value) in kappa.iter().enumerate() {
            if !(value >= 0.0) || !value.is_finite() {
                return Err(MaterialError::NegativeKappa { band, value });
            }
        }
        Ok(Self { eta, kappa })
    }

    /// Dispersion-free index replicated over `bands` wavelength bands.
    pub fn constant(eta: f64, kappa: f64, bands: usize) -> Result<Self, MaterialError> {
        Self::new(vec![eta; bands], vec![kappa; bands])
    }

    pub fn from_spectra(
        eta: &Spectrum,
        kappa: &Spectrum,
        grid: &WavelengthGrid,
    ) -> Result<Self, MaterialError> {
        Self::new(eta.sample(grid)?, kappa.sample(grid)?)
    }

    pub fn bands(&self) -> usize {
        self.eta.len()
    }

    /// (eta, kappa) for one band. Panics if `band` is out of range.
    pub fn at(&self, band: usize) -> (f64, f64) {
        (self.eta[band], self.kappa[band])
    }
}

/// Power reflectances (Rs, Rp) and the s-p phase difference delta, all at a
/// single wavelength. `theta_i` is the incidence angle in [0, pi/2).
pub fn fresnel_coefficients(eta: f64, kappa: f64, theta_i: f64) -> (f64, f64, f64) {
    debug_assert!((0.0..std::f64::consts::FRAC_PI_2).contains(&theta_i));
    let n = Complex::new(eta, -kappa);
    let cos_i = Complex::new(theta_i.cos(), 0.0);
    let sin_t = Complex::new(theta_i.sin(), 0.0) / n;
    let cos_t = (Complex::new(1.0, 0.0) - sin_t * sin_t).sqrt();
    let r_s = (cos_i - n * cos_t) / (cos_i + n * cos_t);
    let r_p = (n * cos_i - cos_t) / (n * cos_i + cos_t);
    (r_s.norm_sqr(), r_p.norm_sqr(), (r_s * r_p.conj()).arg())
}

/// Mueller matrix of specular reflection, expressed in frames whose x axis is
/// perpendicular to the plane of incidence (the s direction) for both the
/// incoming and outgoing beam.
pub fn fresnel_reflection_mueller(eta: f64, kappa: f64, theta_i: f64) -> MuellerMatrix {
    let (r_s, r_p, delta) = fresnel_coefficients(eta, kappa, theta_i);
    let sum = 0.5 * (r_s + r_p);
    let diff = 0.5 * (r_s - r_p);
    let cross = (r_s * r_p).sqrt();
    let (sin_d, cos_d) = delta.sin_cos();
    MuellerMatrix::from_rows([
        [sum, diff, 0.0, 0.0],
        [diff, sum, 0.0, 0.0],
        [0.0, 0.0, cross * cos_d, cross * sin_d],
        [0.0, 0.0, -cross * sin_d, cross * cos_d],
    ])
}
