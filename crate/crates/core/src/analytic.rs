//! Closed-form ground-truth polarimetric BRDF.
//!
//! The model is a fully depolarizing Lambertian term plus a specular lobe: a
//! Fresnel reflection Mueller matrix weighted by a Gaussian in the half-vector
//! polar angle. It is the oracle every simulated capture and every
//! reconstruction is checked against, so it favors exactness over realism;
//! shadowing, masking and transmission are deliberately absent.

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::frame::{frame_transfer, PolarizationFrame, Vec3};
use crate::fresnel::{fresnel_reflection_mueller, MaterialError, SpectralIor};
use crate::mueller::{MuellerError, MuellerMatrix};
use crate::spectrum::{Spectrum, WavelengthGrid};

#[derive(Debug, Error)]
pub enum PbrdfError {
    #[error("direction below the surface horizon")]
    BelowHorizon,
    #[error(transparent)]
    Material(#[from] MaterialError),
    #[error(transparent)]
    Frame(#[from] MuellerError),
    #[error("material file: {0}")]
    MaterialFile(#[from] toml::de::Error),
}

/// Ground-truth reflectance model evaluated in local shading coordinates with
/// the surface normal along +z.
#[derive(Debug, Clone)]
pub struct AnalyticPbrdf {
    ior: SpectralIor,
    albedo: Vec<f64>,
    specular_scale: f64,
    lobe_width: f64,
}

impl AnalyticPbrdf {
    pub fn new(
        ior: SpectralIor,
        albedo: Vec<f64>,
        specular_scale: f64,
        lobe_width: f64,
    ) -> Result<Self, MaterialError> {
        if albedo.len() != ior.bands() {
            return Err(MaterialError::BandMismatch {
                eta: ior.bands(),
                kappa: albedo.len(),
            });
        }
        for (band, &value) in albedo.iter().enumerate() {
            if !(0.0..=1.0).contains(&value) || !value.is_finite() {
                return Err(MaterialError::AlbedoOutOfRange { band, value });
            }
        }
        if !(specular_scale >= 0.0) || !specular_scale.is_finite() {
            return Err(MaterialError::NegativeSpecularScale(specular_scale));
        }
        if !(lobe_width > 0.0) || !lobe_width.is_finite() {
            return Err(MaterialError::NonPositiveLobeWidth(lobe_width));
        }
        Ok(Self { ior, albedo, specular_scale, lobe_width })
    }

    pub fn bands(&self) -> usize {
        self.ior.bands()
    }

    pub fn ior(&self) -> &SpectralIor {
        &self.ior
    }

    pub fn albedo(&self) -> &[f64] {
        &self.albedo
    }

    pub fn specular_scale(&self) -> f64 {
        self.specular_scale
    }

    pub fn lobe_width(&self) -> f64 {
        self.lobe_width
    }

    /// Lobe profile over the half-vector polar angle, normalized so the lobe
    /// integrates to about one over the outgoing hemisphere for narrow widths
    /// (the half-angle mapping dilutes solid angle fourfold, hence 8 pi w^2).
    pub fn lobe(&self, theta_h: f64) -> f64 {
        let w2 = self.lobe_width * self.lobe_width;
        (-theta_h * theta_h / (2.0 * w2)).exp() / (8.0 * std::f64::consts::PI * w2)
    }

    /// Mueller matrix coupling light arriving from `omega_i` to light leaving
    /// along `omega_o`, for one wavelength band.
    ///
    /// Both arguments are unit vectors pointing away from the surface. The
    /// matrix maps Stokes components in the incident frame
    /// `PolarizationFrame::from_reference(-omega_i, z)` to components in the
    /// outgoing frame `from_reference(omega_o, z)`.
    pub fn eval(
        &self,
        omega_i: &Vec3,
        omega_o: &Vec3,
        band: usize,
    ) -> Result<MuellerMatrix, PbrdfError> {
        if omega_i.z <= 0.0 || omega_o.z <= 0.0 {
            return Err(PbrdfError::BelowHorizon);
        }
        let normal = Vector3::z();
        let mut out = MuellerMatrix::zeros();
        out.0[(0, 0)] = self.albedo[band] / std::f64::consts::PI;

        if self.specular_scale > 0.0 {
            let half = (omega_i + omega_o).normalize();
            let theta_h = half.z.clamp(-1.0, 1.0).acos();
            let theta_d = omega_i.dot(&half).clamp(-1.0, 1.0).acos();
            let weight = self.specular_scale * self.lobe(theta_h);
            if weight > 0.0 {
                let (eta, kappa) = self.ior.at(band);
                let fresnel = fresnel_reflection_mueller(eta, kappa, theta_d.min(1.5707));
                let d_in = -omega_i;
                let sp_in = PolarizationFrame::from_plane(d_in, half);
                let sp_out = PolarizationFrame::from_plane(*omega_o, half);
                let canon_in = PolarizationFrame::from_reference(d_in, normal);
                let canon_out = PolarizationFrame::from_reference(*omega_o, normal);
                let into_sp = frame_transfer(&canon_in, &sp_in)?;
                let back = frame_transfer(&sp_out, &canon_out)?;
                out = out + (back * fresnel * into_sp).scaled(weight);
            }
        }
        Ok(out)
    }
}

fn default_specular_scale() -> f64 {
    1.0
}

fn default_lobe_width() -> f64 {
    0.05
}

fn zero_spectrum() -> Spectrum {
    Spectrum::Constant(0.0)
}

/// Material description as it appears on disk: index of refraction, albedo
/// and lobe shape, each either constant or tabulated per band.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MaterialSpec {
    pub eta: Spectrum,
    #[serde(default = "zero_spectrum")]
    pub kappa: Spectrum,
    pub albedo: Spectrum,
    #[serde(default = "default_specular_scale")]
    pub specular_scale: f64,
    #[serde(default = "default_lobe_width")]
    pub lobe_width: f64,
}

impl MaterialSpec {
    pub fn from_toml_str(text: &str) -> Result<Self, PbrdfError> {
        Ok(toml::from_str(text)?)
    }

    pub fn build(&self, grid: &WavelengthGrid) -> Result<AnalyticPbrdf, PbrdfError> {
        let ior = SpectralIor::from_spectra(&self.eta, &self.kappa, grid)?;
        let albedo = self.albedo.sample(grid).map_err(MaterialError::from)?;
        Ok(AnalyticPbrdf::new(ior, albedo, self.specular_scale, self.lobe_width)?)
    }
}
