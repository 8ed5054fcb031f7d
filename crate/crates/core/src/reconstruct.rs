//! Per-pixel Mueller-matrix recovery from retarder-pair intensity sets.
//!
//! Each measured intensity is linear in the 16 unknown matrix entries, so one
//! pixel at one wavelength is a small least-squares problem. The design
//! matrix for the retarder angle sets is shared by every pixel once the
//! per-pixel frame rotations are factored out: the solve happens in the
//! module-frame system and the result is rotated back afterwards, which is
//! exactly equivalent because the frame maps are orthogonal in Frobenius
//! norm.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use nalgebra::{DMatrix, DVector, Vector3};
use rayon::prelude::*;
use thiserror::Error;

use crate::ellipsometer::{AcquisitionConfig, Capture, CaptureError};
use crate::frame::{frame_transfer, PolarizationFrame};
use crate::mueller::{
    is_physical_gk, lp_mueller, retarder_mueller, GkOptions, MuellerMatrix, StokesVector,
};
use crate::scene::SphereScene;
use crate::spectrum::WavelengthGrid;

/// Relative singular-value cutoff of the pseudo-inverse. The nominal system
/// is comfortably full-rank; the cutoff only guards degenerate angle sets.
pub const SV_RELATIVE_CUTOFF: f64 = 1e-10;

pub const FLAG_VALID: u8 = 1;
pub const FLAG_PHYSICAL: u8 = 2;

#[derive(Debug, Error)]
pub enum ReconstructError {
    #[error("need at least 16 measurements per pixel, got {0}")]
    InsufficientMeasurements(usize),
    #[error("design matrix is rank deficient (effective rank {0})")]
    RankDeficient(usize),
    #[error("non-finite value in the input")]
    NonFinite,
    #[error("expected {expected} measurements, got {got}")]
    MeasurementCount { expected: usize, got: usize },
    #[error("capture does not match the scene or acquisition config: {0}")]
    Inconsistent(String),
    #[error("singular value decomposition failed")]
    SvdFailed,
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("not a Mueller image stack (bad magic)")]
    BadMagic,
    #[error("unsupported Mueller image version {0}")]
    UnsupportedVersion(u32),
    #[error(transparent)]
    Capture(#[from] CaptureError),
}

/// Linear model of one acquisition: row k maps vec(M) (row-major) to the
/// intensity of retarder pair k.
pub struct DesignMatrix {
    rows: DMatrix<f64>,
    pinv: DMatrix<f64>,
    singular_values: Vec<f64>,
    effective_rank: usize,
}

impl DesignMatrix {
    pub fn new(rows: DMatrix<f64>) -> Result<Self, ReconstructError> {
        if rows.nrows() < 16 {
            return Err(ReconstructError::InsufficientMeasurements(rows.nrows()));
        }
        if rows.iter().any(|v| !v.is_finite()) {
            return Err(ReconstructError::NonFinite);
        }
        let svd = rows.clone().svd(true, true);
        let mut singular_values: Vec<f64> = svd.singular_values.iter().copied().collect();
        singular_values.sort_by(|a, b| b.partial_cmp(a).unwrap());
        let cutoff = SV_RELATIVE_CUTOFF * singular_values.first().copied().unwrap_or(0.0);
        let effective_rank = singular_values.iter().filter(|&&s| s > cutoff).count();
        let pinv = svd
            .pseudo_inverse(cutoff.max(f64::MIN_POSITIVE))
            .map_err(|_| ReconstructError::SvdFailed)?;
        Ok(Self { rows, pinv, singular_values, effective_rank })
    }

    pub fn rows(&self) -> &DMatrix<f64> {
        &self.rows
    }

    pub fn effective_rank(&self) -> usize {
        self.effective_rank
    }

    pub fn singular_values(&self) -> &[f64] {
        &self.singular_values
    }

    /// Smallest over largest singular value.
    pub fn conditioning(&self) -> f64 {
        match (self.singular_values.first(), self.singular_values.last()) {
            (Some(&max), Some(&min)) if max > 0.0 => min / max,
            _ => 0.0,
        }
    }
}

fn design_rows(
    illum_angles: &[f64],
    analyzer_angles: &[f64],
    illum_ret: f64,
    analyzer_ret: f64,
    light: f64,
    c_ei: &MuellerMatrix,
    c_rc: &MuellerMatrix,
) -> DMatrix<f64> {
    let polarized = lp_mueller(0.0) * StokesVector::unpolarized(light);
    let sources: Vec<StokesVector> = illum_angles
        .iter()
        .map(|&t| *c_ei * (retarder_mueller(t, illum_ret) * polarized))
        .collect();
    let analyzers: Vec<[f64; 4]> = analyzer_angles
        .iter()
        .map(|&t| {
            let chain = lp_mueller(0.0) * retarder_mueller(t, analyzer_ret) * *c_rc;
            [chain.0[(0, 0)], chain.0[(0, 1)], chain.0[(0, 2)], chain.0[(0, 3)]]
        })
        .collect();
    let n = sources.len() * analyzers.len();
    DMatrix::from_fn(n, 16, |k, col| {
        let (i, j) = (k / analyzers.len(), k % analyzers.len());
        let (r, c) = (col / 4, col % 4);
        analyzers[j][r] * sources[i].0[c]
    })
}

/// Design matrix for one wavelength band and one pixel's frame transfers.
/// `c_ei` moves Stokes components from the illumination module frame to the
/// matrix's input frame, `c_rc` from its output frame to the camera module.
pub fn build_design_matrix(
    config: &AcquisitionConfig,
    band: usize,
    c_ei: &MuellerMatrix,
    c_rc: &MuellerMatrix,
) -> Result<DesignMatrix, ReconstructError> {
    if config.states() < 16 {
        return Err(ReconstructError::InsufficientMeasurements(config.states()));
    }
    let resolved = config.resolve()?;
    DesignMatrix::new(design_rows(
        &config.illum_qwp_angles,
        &config.analyzer_qwp_angles,
        resolved.illum_retardance[band],
        resolved.analyzer_retardance[band],
        resolved.light[band],
        c_ei,
        c_rc,
    ))
}

/// Least-squares Mueller estimate plus the RMS fit residual.
pub fn solve_mueller(
    measurements: &[f64],
    design: &DesignMatrix,
) -> Result<(MuellerMatrix, f64), ReconstructError> {
    if measurements.len() != design.rows.nrows() {
        return Err(ReconstructError::MeasurementCount {
            expected: design.rows.nrows(),
            got: measurements.len(),
        });
    }
    if measurements.iter().any(|v| !v.is_finite()) {
        return Err(ReconstructError::NonFinite);
    }
    if design.effective_rank < 16 {
        return Err(ReconstructError::RankDeficient(design.effective_rank));
    }
    let f = DVector::from_column_slice(measurements);
    let vec_m = &design.pinv * &f;
    let mut m = MuellerMatrix::zeros();
    for r in 0..4 {
        for c in 0..4 {
            m.0[(r, c)] = vec_m[r * 4 + c];
        }
    }
    let residual = (&design.rows * &vec_m - &f).norm() / (measurements.len() as f64).sqrt();
    Ok((m, residual))
}

/// Reconstructed Mueller matrices for every (arm, band, pixel), with per
/// pixel flags (bit 0: solved, bit 1: passes the physical-validity test) and
/// fit residuals.
pub struct MuellerImageStack {
    pub arms: usize,
    pub bands: usize,
    pub width: u32,
    pub height: u32,
    pub grid: WavelengthGrid,
    pub arm_angles: Vec<f64>,
    /// Row-major 16 entries per pixel, `[arm][band][y][x][16]`.
    pub data: Vec<f64>,
    /// `[arm][band][y][x]`.
    pub flags: Vec<u8>,
    /// RMS fit residual per pixel, same layout as `flags`.
    pub residual: Vec<f64>,
}

/// Shape information from a stack file's header.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StackHeader {
    pub arms: usize,
    pub bands: usize,
    pub width: u32,
    pub height: u32,
    pub grid: WavelengthGrid,
}

impl MuellerImageStack {
    pub fn pixels(&self) -> usize {
        self.width as usize * self.height as usize
    }

    pub fn plane_index(&self, arm: usize, band: usize, y: u32, x: u32) -> usize {
        ((arm * self.bands + band) * self.height as usize + y as usize) * self.width as usize
            + x as usize
    }

    pub fn matrix_at(&self, arm: usize, band: usize, y: u32, x: u32) -> MuellerMatrix {
        let base = self.plane_index(arm, band, y, x) * 16;
        let mut m = MuellerMatrix::zeros();
        for r in 0..4 {
            for c in 0..4 {
                m.0[(r, c)] = self.data[base + r * 4 + c];
            }
        }
        m
    }

    pub fn flags_at(&self, arm: usize, band: usize, y: u32, x: u32) -> u8 {
        self.flags[self.plane_index(arm, band, y, x)]
    }

    /// (solved pixels, physically valid among them).
    pub fn validity_counts(&self) -> (usize, usize) {
        let valid = self.flags.iter().filter(|&&f| f & FLAG_VALID != 0).count();
        let physical = self
            .flags
            .iter()
            .filter(|&&f| f & FLAG_VALID != 0 && f & FLAG_PHYSICAL != 0)
            .count();
        (valid, physical)
    }
}

/// Recovers Mueller images from a capture by re-deriving the per-pixel
/// geometry from the scene. Intensities are divided by the configured
/// illumination geometry factors so the result is in reflectance units.
pub fn reconstruct_capture(
    capture: &Capture,
    scene: &SphereScene,
    config: &AcquisitionConfig,
    gk: &GkOptions,
) -> Result<MuellerImageStack, ReconstructError> {
    let dims = capture.dims;
    if dims.width != scene.width || dims.height != scene.height {
        return Err(ReconstructError::Inconsistent(format!(
            "capture is {}x{}, scene renders {}x{}",
            dims.width, dims.height, scene.width, scene.height
        )));
    }
    if dims.states() < 16 {
        return Err(ReconstructError::InsufficientMeasurements(dims.states()));
    }
    let resolved = config
        .resolve()
        .map_err(ReconstructError::Capture)?;
    if capture.grid.count != config.wavelength_grid.count {
        return Err(ReconstructError::Inconsistent(format!(
            "capture has {} bands, config {}",
            capture.grid.count, config.wavelength_grid.count
        )));
    }

    let identity = MuellerMatrix::identity();
    let designs: Vec<DesignMatrix> = (0..dims.bands)
        .map(|band| {
            DesignMatrix::new(design_rows(
                &capture.illum_angles,
                &capture.analyzer_angles,
                resolved.illum_retardance[band],
                resolved.analyzer_retardance[band],
                resolved.light[band],
                &identity,
                &identity,
            ))
        })
        .collect::<Result<_, _>>()?;
    if let Some(d) = designs.iter().find(|d| d.effective_rank() < 16) {
        return Err(ReconstructError::RankDeficient(d.effective_rank()));
    }

    let pixels = dims.pixels();
    let mut data = vec![0.0f64; dims.arms * dims.bands * pixels * 16];
    let mut flags = vec![0u8; dims.arms * dims.bands * pixels];
    let mut residual = vec![0.0f64; dims.arms * dims.bands * pixels];
    let jobs: Vec<(usize, usize)> = (0..dims.arms)
        .flat_map(|arm| (0..dims.bands).map(move |band| (arm, band)))
        .collect();

    data.par_chunks_mut(pixels * 16)
        .zip(flags.par_chunks_mut(pixels))
        .zip(residual.par_chunks_mut(pixels))
        .zip(jobs.par_iter())
        .for_each(|(((data_chunk, flag_chunk), res_chunk), &(arm, band))| {
            let light = scene.light_position(capture.arm_angles[arm]);
            let design = &designs[band];
            for y in 0..dims.height {
                for x in 0..dims.width {
                    let p = (y * dims.width + x) as usize;
                    if capture.validity[p] == 0 {
                        continue;
                    }
                    let geom = match scene.pixel_geometry(x, y, &light, band) {
                        Some(g) => g,
                        None => continue,
                    };
                    let f = capture.pixel_measurements(arm, band, y, x);
                    let (tilde, rms) = match solve_mueller(f, design) {
                        Ok(v) => v,
                        Err(_) => continue,
                    };

                    let wi = geom.to_local(&geom.omega_i);
                    let wo = geom.to_local(&geom.omega_o);
                    let d_in = -wi;
                    let reference = geom.to_local(&config.frame_reference);
                    let module_in = PolarizationFrame::from_reference(d_in, reference);
                    let surface_in = PolarizationFrame::from_reference(d_in, Vector3::z());
                    let surface_out = PolarizationFrame::from_reference(wo, Vector3::z());
                    let module_out = PolarizationFrame::from_reference(wo, reference);
                    // Inverse transfers: module frame back to surface frames.
                    let undo_in = match frame_transfer(&surface_in, &module_in) {
                        Ok(t) => t,
                        Err(_) => continue,
                    };
                    let undo_out = match frame_transfer(&module_out, &surface_out) {
                        Ok(t) => t,
                        Err(_) => continue,
                    };

                    let mut gain = 1.0;
                    if config.apply_falloff {
                        gain /= geom.light_distance * geom.light_distance;
                    }
                    if config.apply_foreshortening {
                        gain *= wi.z;
                    }
                    if gain <= 1e-12 {
                        continue;
                    }

                    let m = (undo_out * tilde * undo_in).scaled(1.0 / gain);
                    let mut flag = FLAG_VALID;
                    if let Ok(diag) = is_physical_gk(&m, gk) {
                        if diag.physical {
                            flag |= FLAG_PHYSICAL;
                        }
                    }
                    let base = p * 16;
                    for r in 0..4 {
                        for c in 0..4 {
                            data_chunk[base + r * 4 + c] = m.0[(r, c)];
                        }
                    }
                    flag_chunk[p] = flag;
                    res_chunk[p] = rms;
                }
            }
        });

    Ok(MuellerImageStack {
        arms: dims.arms,
        bands: dims.bands,
        width: dims.width,
        height: dims.height,
        grid: capture.grid,
        arm_angles: capture.arm_angles.clone(),
        data,
        flags,
        residual,
    })
}

const STACK_MAGIC: &[u8; 4] = b"HPMI";
const STACK_VERSION: u32 = 1;

impl MuellerImageStack {
    /// File layout: magic, version, dims, wavelength grid, arm angles, the
    /// flag planes, then matrix entries as little-endian f32 in memory order.
    pub fn write(&self, path: &Path) -> Result<(), ReconstructError> {
        let mut w = BufWriter::new(File::create(path)?);
        w.write_all(STACK_MAGIC)?;
        w.write_all(&STACK_VERSION.to_le_bytes())?;
        for v in [self.arms as u32, self.bands as u32, self.height, self.width] {
            w.write_all(&v.to_le_bytes())?;
        }
        w.write_all(&self.grid.start_nm.to_le_bytes())?;
        w.write_all(&self.grid.step_nm.to_le_bytes())?;
        for &a in &self.arm_angles {
            w.write_all(&a.to_le_bytes())?;
        }
        w.write_all(&self.flags)?;
        for &v in &self.data {
            w.write_all(&(v as f32).to_le_bytes())?;
        }
        w.flush()?;
        Ok(())
    }

    /// Header of a stack file without its payload.
    pub fn read_header(path: &Path) -> Result<StackHeader, ReconstructError> {
        let mut r = BufReader::new(File::open(path)?);
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != STACK_MAGIC {
            return Err(ReconstructError::BadMagic);
        }
        let mut b4 = [0u8; 4];
        let mut read_u32 = |r: &mut BufReader<File>| -> Result<u32, ReconstructError> {
            r.read_exact(&mut b4)?;
            Ok(u32::from_le_bytes(b4))
        };
        let version = read_u32(&mut r)?;
        if version != STACK_VERSION {
            return Err(ReconstructError::UnsupportedVersion(version));
        }
        let arms = read_u32(&mut r)? as usize;
        let bands = read_u32(&mut r)? as usize;
        let height = read_u32(&mut r)?;
        let width = read_u32(&mut r)?;
        let mut b8 = [0u8; 8];
        let mut read_f64 = |r: &mut BufReader<File>| -> Result<f64, ReconstructError> {
            r.read_exact(&mut b8)?;
            Ok(f64::from_le_bytes(b8))
        };
        let start_nm = read_f64(&mut r)?;
        let step_nm = read_f64(&mut r)?;
        Ok(StackHeader {
            arms,
            bands,
            width,
            height,
            grid: WavelengthGrid { start_nm, step_nm, count: bands },
        })
    }

    pub fn read(path: &Path) -> Result<Self, ReconstructError> {
        let mut r = BufReader::new(File::open(path)?);
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != STACK_MAGIC {
            return Err(ReconstructError::BadMagic);
        }
        let mut u32_buf = [0u8; 4];
        let mut read_u32 = |r: &mut BufReader<File>| -> Result<u32, ReconstructError> {
            r.read_exact(&mut u32_buf)?;
            Ok(u32::from_le_bytes(u32_buf))
        };
        let version = read_u32(&mut r)?;
        if version != STACK_VERSION {
            return Err(ReconstructError::UnsupportedVersion(version));
        }
        let arms = read_u32(&mut r)? as usize;
        let bands = read_u32(&mut r)? as usize;
        let height = read_u32(&mut r)?;
        let width = read_u32(&mut r)?;
        let mut f64_buf = [0u8; 8];
        let mut read_f64 = |r: &mut BufReader<File>| -> Result<f64, ReconstructError> {
            r.read_exact(&mut f64_buf)?;
            Ok(f64::from_le_bytes(f64_buf))
        };
        let start_nm = read_f64(&mut r)?;
        let step_nm = read_f64(&mut r)?;
        let grid = WavelengthGrid { start_nm, step_nm, count: bands };
        let arm_angles: Vec<f64> =
            (0..arms).map(|_| read_f64(&mut r)).collect::<Result<_, _>>()?;
        let pixels = width as usize * height as usize;
        let planes = arms * bands * pixels;
        let mut flags = vec![0u8; planes];
        r.read_exact(&mut flags)?;
        let mut data = vec![0.0f64; planes * 16];
        let mut buf = [0u8; 4];
        for slot in data.iter_mut() {
            r.read_exact(&mut buf)?;
            *slot = f32::from_le_bytes(buf) as f64;
        }
        Ok(Self {
            arms,
            bands,
            width,
            height,
            grid,
            arm_angles,
            data,
            flags,
            residual: vec![0.0; planes],
        })
    }
}
