//! Wavelength grids and per-band spectral quantities.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SpectrumError {
    #[error("wavelength {0} nm lies outside the grid")]
    OutOfRange(f64),
    #[error("expected {expected} spectral samples, got {got}")]
    LengthMismatch { expected: usize, got: usize },
}

/// Uniform spectral sampling: `count` bands starting at `start_nm` with pitch
/// `step_nm`. The default covers 414-950 nm in 68 bands of 8 nm.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WavelengthGrid {
    pub start_nm: f64,
    pub step_nm: f64,
    pub count: usize,
}

impl Default for WavelengthGrid {
    fn default() -> Self {
        Self { start_nm: 414.0, step_nm: 8.0, count: 68 }
    }
}

impl WavelengthGrid {
    pub fn value_nm(&self, band: usize) -> f64 {
        self.start_nm + self.step_nm * band as f64
    }

    pub fn end_nm(&self) -> f64 {
        self.value_nm(self.count.saturating_sub(1))
    }

    pub fn values(&self) -> impl Iterator<Item = f64> + '_ {
        (0..self.count).map(|i| self.value_nm(i))
    }

    /// Band whose center is closest to `lambda_nm`.
    pub fn nearest_band(&self, lambda_nm: f64) -> Result<usize, SpectrumError> {
        let half = 0.5 * self.step_nm;
        if lambda_nm < self.start_nm - half || lambda_nm > self.end_nm() + half {
            return Err(SpectrumError::OutOfRange(lambda_nm));
        }
        let idx = ((lambda_nm - self.start_nm) / self.step_nm).round() as isize;
        Ok(idx.clamp(0, self.count as isize - 1) as usize)
    }

    /// Fractional band coordinate used by interpolating lookups.
    pub fn band_coord(&self, lambda_nm: f64) -> f64 {
        (lambda_nm - self.start_nm) / self.step_nm
    }
}

/// Spectral quantity given either as one constant for every band or as one
/// value per band.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Spectrum {
    Constant(f64),
    PerBand(Vec<f64>),
}

impl Spectrum {
    /// Resolves to one value per band of `grid`.
    pub fn sample(&self, grid: &WavelengthGrid) -> Result<Vec<f64>, SpectrumError> {
        match self {
            Spectrum::Constant(v) => Ok(vec![*v; grid.count]),
            Spectrum::PerBand(vs) => {
                if vs.len() != grid.count {
                    return Err(SpectrumError::LengthMismatch {
                        expected: grid.count,
                        got: vs.len(),
                    });
                }
                Ok(vs.clone())
            }
        }
    }
}

impl Default for Spectrum {
    fn default() -> Self {
        Spectrum::Constant(1.0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_grid_spans_414_to_950() {
        let g = WavelengthGrid::default();
        assert_eq!(g.count, 68);
        assert_eq!(g.value_nm(0), 414.0);
        assert_eq!(g.end_nm(), 950.0);
    }

    #[test]
    fn nearest_band_rounds_and_bounds() {
        let g = WavelengthGrid::default();
        assert_eq!(g.nearest_band(414.0).unwrap(), 0);
        assert_eq!(g.nearest_band(421.0).unwrap(), 1);
        assert_eq!(g.nearest_band(950.0).unwrap(), 67);
        assert!(g.nearest_band(300.0).is_err());
        assert!(g.nearest_band(1000.0).is_err());
    }

    #[test]
    fn spectrum_sampling_checks_length() {
        let g = WavelengthGrid { start_nm: 400.0, step_nm: 10.0, count: 3 };
        assert_eq!(Spectrum::Constant(2.0).sample(&g).unwrap(), vec![2.0; 3]);
        assert!(Spectrum::PerBand(vec![1.0; 2]).sample(&g).is_err());
    }
}
