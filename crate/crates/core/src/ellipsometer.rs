//! Virtual dual-rotating-retarder ellipsometer.
//!
//! The instrument chain is polarizer, quarter-wave plate at angle theta on
//! the illumination side, the sample, then quarter-wave plate at angle
//! theta-prime and polarizer on the camera side. Every recorded intensity is
//! the first Stokes component of that matrix chain, with frame transfers
//! moving light between the module frames and the per-pixel surface frames.
//!
//! Simulated captures are deterministic for a given seed: noise is generated
//! by a counter-based hash of the measurement index, never by a shared
//! stream, so thread scheduling cannot change the output.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use nalgebra::Vector3;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::analytic::{AnalyticPbrdf, PbrdfError};
use crate::frame::{frame_transfer, PolarizationFrame, Vec3};
use crate::mueller::{lp_mueller, retarder_mueller, MuellerError, MuellerMatrix, StokesVector};
use crate::scene::SphereScene;
use crate::spectrum::{Spectrum, SpectrumError, WavelengthGrid};

#[derive(Debug, Error)]
pub enum CaptureError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("not a measurement archive (bad magic)")]
    BadMagic,
    #[error("unsupported measurement archive version {0}")]
    UnsupportedVersion(u32),
    #[error("archive truncated: expected {expected} bytes of payload, got {got}")]
    Truncated { expected: u64, got: u64 },
    #[error("archive dimensions are implausible")]
    BadHeader,
    #[error("acquisition needs at least one {0} angle")]
    EmptyAngles(&'static str),
    #[error("material has {material} bands but the grid has {grid}")]
    BandCount { material: usize, grid: usize },
    #[error(transparent)]
    Spectrum(#[from] SpectrumError),
    #[error(transparent)]
    Pbrdf(#[from] PbrdfError),
    #[error(transparent)]
    Frame(#[from] MuellerError),
}

/// Axis-aligned half-open pixel rectangle, used to describe occluded regions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RectRegion {
    pub x0: u32,
    pub y0: u32,
    pub x1: u32,
    pub y1: u32,
}

impl RectRegion {
    pub fn contains(&self, x: u32, y: u32) -> bool {
        x >= self.x0 && x < self.x1 && y >= self.y0 && y < self.y1
    }
}

/// The rotating illumination plate blocks part of the view; capturing with
/// the plate parked in two positions covers the sphere as long as the two
/// occluded regions do not overlap. A pixel inside both regions never gets
/// measured and is dropped from reconstruction.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OcclusionMasks {
    pub position_a: Vec<RectRegion>,
    pub position_b: Vec<RectRegion>,
}

impl OcclusionMasks {
    pub fn visible(&self, x: u32, y: u32) -> bool {
        let occ_a = self.position_a.iter().any(|r| r.contains(x, y));
        let occ_b = self.position_b.iter().any(|r| r.contains(x, y));
        !(occ_a && occ_b)
    }
}

/// Everything that defines one acquisition run. Angles are radians.
#[derive(Debug, Clone, PartialEq)]
pub struct AcquisitionConfig {
    pub illum_qwp_angles: Vec<f64>,
    pub analyzer_qwp_angles: Vec<f64>,
    pub light_arm_angles: Vec<f64>,
    pub wavelength_grid: WavelengthGrid,
    pub illum_retardance: Spectrum,
    pub analyzer_retardance: Spectrum,
    pub light_spectrum: Spectrum,
    pub noise_rel: f64,
    pub apply_falloff: bool,
    pub apply_foreshortening: bool,
    /// World-space reference vector orienting the x axis of the illumination
    /// and camera module frames (the exact hardware convention is not pinned
    /// down anywhere public, so it stays configurable).
    pub frame_reference: Vec3,
    pub occlusion: Option<OcclusionMasks>,
}

impl Default for AcquisitionConfig {
    fn default() -> Self {
        Self {
            illum_qwp_angles: [30.0f64, -45.0, 60.0, -90.0]
                .iter()
                .map(|d| d.to_radians())
                .collect(),
            analyzer_qwp_angles: (0..6).map(|i| (30.0 * i as f64).to_radians()).collect(),
            light_arm_angles: (0..25).map(|i| (40.0 + 5.0 * i as f64).to_radians()).collect(),
            wavelength_grid: WavelengthGrid::default(),
            illum_retardance: Spectrum::Constant(std::f64::consts::FRAC_PI_2),
            analyzer_retardance: Spectrum::Constant(std::f64::consts::FRAC_PI_2),
            light_spectrum: Spectrum::Constant(1.0),
            noise_rel: 0.0,
            apply_falloff: true,
            apply_foreshortening: true,
            frame_reference: Vector3::y(),
            occlusion: None,
        }
    }
}

/// Spectra resolved onto the wavelength grid.
pub struct ResolvedAcquisition {
    pub illum_retardance: Vec<f64>,
    pub analyzer_retardance: Vec<f64>,
    pub light: Vec<f64>,
}

impl AcquisitionConfig {
    pub fn states(&self) -> usize {
        self.illum_qwp_angles.len() * self.analyzer_qwp_angles.len()
    }

    pub fn resolve(&self) -> Result<ResolvedAcquisition, CaptureError> {
        if self.illum_qwp_angles.is_empty() {
            return Err(CaptureError::EmptyAngles("illumination retarder"));
        }
        if self.analyzer_qwp_angles.is_empty() {
            return Err(CaptureError::EmptyAngles("analyzer retarder"));
        }
        if self.light_arm_angles.is_empty() {
            return Err(CaptureError::EmptyAngles("light arm"));
        }
        Ok(ResolvedAcquisition {
            illum_retardance: self.illum_retardance.sample(&self.wavelength_grid)?,
            analyzer_retardance: self.analyzer_retardance.sample(&self.wavelength_grid)?,
            light: self.light_spectrum.sample(&self.wavelength_grid)?,
        })
    }
}

/// Stokes vector leaving the illumination module (polarizer then retarder at
/// `theta`), expressed in the module frame.
pub fn emitted_stokes(
    config: &AcquisitionConfig,
    theta: f64,
    band: usize,
) -> Result<StokesVector, CaptureError> {
    let resolved = config.resolve()?;
    let source = StokesVector::unpolarized(resolved.light[band]);
    Ok(retarder_mueller(theta, resolved.illum_retardance[band]) * (lp_mueller(0.0) * source))
}

/// One intensity of the full instrument chain. `c_ei` carries Stokes
/// components from the illumination module frame to the surface incident
/// frame, `c_rc` from the surface outgoing frame to the camera module frame;
/// `radiance` is the source radiance already multiplied by whatever geometry
/// factors the caller applies.
#[allow(clippy::too_many_arguments)]
pub fn simulate_pixel(
    m: &MuellerMatrix,
    c_ei: &MuellerMatrix,
    c_rc: &MuellerMatrix,
    illum_retardance: f64,
    analyzer_retardance: f64,
    theta: f64,
    theta_prime: f64,
    radiance: f64,
) -> f64 {
    let source = StokesVector::unpolarized(radiance);
    let emitted = retarder_mueller(theta, illum_retardance) * (lp_mueller(0.0) * source);
    let at_camera = *c_rc * (*m * (*c_ei * emitted));
    let analyzed = lp_mueller(0.0) * (retarder_mueller(theta_prime, analyzer_retardance) * at_camera);
    analyzed.s0()
}

/// Illumination-side Stokes vectors, one per retarder angle, for unit source
/// radiance in the module frame.
pub fn illumination_states(angles: &[f64], retardance: f64) -> Vec<StokesVector> {
    let polarized = lp_mueller(0.0) * StokesVector::unpolarized(1.0);
    angles
        .iter()
        .map(|&theta| retarder_mueller(theta, retardance) * polarized)
        .collect()
}

/// Analyzer-side row vectors: intensity = row . stokes_at_camera.
pub fn analyzer_states(angles: &[f64], retardance: f64) -> Vec<[f64; 4]> {
    angles
        .iter()
        .map(|&theta| {
            let chain = lp_mueller(0.0) * retarder_mueller(theta, retardance);
            [chain.0[(0, 0)], chain.0[(0, 1)], chain.0[(0, 2)], chain.0[(0, 3)]]
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CaptureDims {
    pub arms: usize,
    pub bands: usize,
    pub height: u32,
    pub width: u32,
    pub illum_states: usize,
    pub analyzer_states: usize,
}

impl CaptureDims {
    pub fn states(&self) -> usize {
        self.illum_states * self.analyzer_states
    }

    pub fn pixels(&self) -> usize {
        self.height as usize * self.width as usize
    }

    pub fn intensity_len(&self) -> usize {
        self.arms * self.bands * self.pixels() * self.states()
    }

    /// Flat index of one measurement; the archive stores intensities in
    /// exactly this order (arm outermost, then band, row, column, and the
    /// retarder-pair index k = illum_index * analyzer_count + analyzer_index).
    pub fn offset(&self, arm: usize, band: usize, y: u32, x: u32, k: usize) -> usize {
        (((arm * self.bands + band) * self.height as usize + y as usize) * self.width as usize
            + x as usize)
            * self.states()
            + k
    }
}

/// A complete simulated capture held in memory at full precision. The archive
/// on disk stores intensities as 32-bit floats, so a write-read round trip
/// quantizes.
pub struct Capture {
    pub dims: CaptureDims,
    pub arm_angles: Vec<f64>,
    pub illum_angles: Vec<f64>,
    pub analyzer_angles: Vec<f64>,
    pub grid: WavelengthGrid,
    /// Per-pixel flag: on the sphere and visible in at least one occlusion
    /// position.
    pub validity: Vec<u8>,
    pub intensities: Vec<f64>,
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn unit_open(bits: u64) -> f64 {
    ((bits >> 11) as f64 + 1.0) / 9_007_199_254_740_993.0
}

/// Standard normal sample fully determined by (seed, counter).
pub fn counter_gaussian(seed: u64, counter: u64) -> f64 {
    let a = splitmix64(seed ^ counter.wrapping_mul(0xA076_1D64_78BD_642F));
    let b = splitmix64(a ^ 0x9E37_79B9_7F4A_7C15);
    let r = (-2.0 * unit_open(a).ln()).sqrt();
    r * (std::f64::consts::TAU * unit_open(b)).cos()
}

struct PixelOptics {
    modulated: MuellerMatrix,
    gain: f64,
}

fn pixel_optics(
    pbrdf: &AnalyticPbrdf,
    scene: &SphereScene,
    config: &AcquisitionConfig,
    light: &Vec3,
    x: u32,
    y: u32,
    band: usize,
) -> Result<Option<PixelOptics>, CaptureError> {
    let geom = match scene.pixel_geometry(x, y, light, band) {
        Some(g) => g,
        None => return Ok(None),
    };
    let wi = geom.to_local(&geom.omega_i);
    let wo = geom.to_local(&geom.omega_o);
    let m = pbrdf.eval(&wi, &wo, band)?;

    let d_in = -wi;
    let reference = geom.to_local(&config.frame_reference);
    let module_in = PolarizationFrame::from_reference(d_in, reference);
    let surface_in = PolarizationFrame::from_reference(d_in, Vector3::z());
    let surface_out = PolarizationFrame::from_reference(wo, Vector3::z());
    let module_out = PolarizationFrame::from_reference(wo, reference);
    let c_ei = frame_transfer(&module_in, &surface_in)?;
    let c_rc = frame_transfer(&surface_out, &module_out)?;

    let mut gain = 1.0;
    if config.apply_falloff {
        gain /= geom.light_distance * geom.light_distance;
    }
    if config.apply_foreshortening {
        gain *= wi.z;
    }
    Ok(Some(PixelOptics { modulated: c_rc * m * c_ei, gain }))
}

/// Runs the virtual instrument over the whole sphere image for every light
/// arm position, retarder pair and wavelength band.
pub fn simulate_sphere_capture(
    pbrdf: &AnalyticPbrdf,
    scene: &SphereScene,
    config: &AcquisitionConfig,
    seed: u64,
) -> Result<Capture, CaptureError> {
    let grid = config.wavelength_grid;
    if pbrdf.bands() != grid.count {
        return Err(CaptureError::BandCount { material: pbrdf.bands(), grid: grid.count });
    }
    let resolved = config.resolve()?;
    let dims = CaptureDims {
        arms: config.light_arm_angles.len(),
        bands: grid.count,
        height: scene.height,
        width: scene.width,
        illum_states: config.illum_qwp_angles.len(),
        analyzer_states: config.analyzer_qwp_angles.len(),
    };

    let mut validity = vec![0u8; dims.pixels()];
    for y in 0..dims.height {
        for x in 0..dims.width {
            let on_sphere = scene.hit_sphere(x, y, 0).is_some();
            let visible = config.occlusion.as_ref().map_or(true, |o| o.visible(x, y));
            validity[(y * dims.width + x) as usize] = (on_sphere && visible) as u8;
        }
    }

    let block = dims.pixels() * dims.states();
    let mut intensities = vec![0.0f64; dims.intensity_len()];
    let jobs: Vec<(usize, usize)> = (0..dims.arms)
        .flat_map(|arm| (0..dims.bands).map(move |band| (arm, band)))
        .collect();

    let results: Result<(), CaptureError> = intensities
        .par_chunks_mut(block)
        .zip(jobs.par_iter())
        .try_for_each(|(chunk, &(arm, band))| {
            let light = scene.light_position(config.light_arm_angles[arm]);
            let sources = illumination_states(&config.illum_qwp_angles, resolved.illum_retardance[band]);
            let analyzers =
                analyzer_states(&config.analyzer_qwp_angles, resolved.analyzer_retardance[band]);
            let radiance = resolved.light[band];
            for y in 0..dims.height {
                for x in 0..dims.width {
                    let optics = match pixel_optics(pbrdf, scene, config, &light, x, y, band)? {
                        Some(o) => o,
                        None => continue,
                    };
                    let base = ((y * dims.width + x) as usize) * dims.states();
                    for (i, source) in sources.iter().enumerate() {
                        let at_camera = optics.modulated * StokesVector(source.0 * (radiance * optics.gain));
                        for (j, row) in analyzers.iter().enumerate() {
                            let k = i * dims.analyzer_states + j;
                            let mut f = row[0] * at_camera.0[0]
                                + row[1] * at_camera.0[1]
                                + row[2] * at_camera.0[2]
                                + row[3] * at_camera.0[3];
                            if config.noise_rel > 0.0 {
                                let counter = dims.offset(arm, band, y, x, k) as u64;
                                f *= 1.0 + config.noise_rel * counter_gaussian(seed, counter);
                            }
                            chunk[base + k] = f;
                        }
                    }
                }
            }
            Ok(())
        });
    results?;

    Ok(Capture {
        dims,
        arm_angles: config.light_arm_angles.clone(),
        illum_angles: config.illum_qwp_angles.clone(),
        analyzer_angles: config.analyzer_qwp_angles.clone(),
        grid,
        validity,
        intensities,
    })
}

const ARCHIVE_MAGIC: &[u8; 4] = b"HPMA";
const ARCHIVE_VERSION: u32 = 1;

fn write_u32<W: Write>(w: &mut W, v: u32) -> std::io::Result<()> {
    w.write_all(&v.to_le_bytes())
}

fn write_f64<W: Write>(w: &mut W, v: f64) -> std::io::Result<()> {
    w.write_all(&v.to_le_bytes())
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32, CaptureError> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_f64<R: Read>(r: &mut R) -> Result<f64, CaptureError> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(f64::from_le_bytes(b))
}

impl Capture {
    /// Writes the measurement archive: magic, version, dimensions, angle
    /// lists (radians), wavelength grid, per-pixel validity bytes, then
    /// intensities as little-endian f32 in `CaptureDims::offset` order.
    pub fn write_archive(&self, path: &Path) -> Result<(), CaptureError> {
        let mut w = BufWriter::new(File::create(path)?);
        w.write_all(ARCHIVE_MAGIC)?;
        write_u32(&mut w, ARCHIVE_VERSION)?;
        for v in [
            self.dims.arms as u32,
            self.dims.bands as u32,
            self.dims.height,
            self.dims.width,
            self.dims.illum_states as u32,
            self.dims.analyzer_states as u32,
        ] {
            write_u32(&mut w, v)?;
        }
        write_f64(&mut w, self.grid.start_nm)?;
        write_f64(&mut w, self.grid.step_nm)?;
        for list in [&self.arm_angles, &self.illum_angles, &self.analyzer_angles] {
            for &a in list.iter() {
                write_f64(&mut w, a)?;
            }
        }
        w.write_all(&self.validity)?;
        for &v in &self.intensities {
            w.write_all(&(v as f32).to_le_bytes())?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_archive(path: &Path) -> Result<Self, CaptureError> {
        let mut r = BufReader::new(File::open(path)?);
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != ARCHIVE_MAGIC {
            return Err(CaptureError::BadMagic);
        }
        let version = read_u32(&mut r)?;
        if version != ARCHIVE_VERSION {
            return Err(CaptureError::UnsupportedVersion(version));
        }
        let arms = read_u32(&mut r)? as usize;
        let bands = read_u32(&mut r)? as usize;
        let height = read_u32(&mut r)?;
        let width = read_u32(&mut r)?;
        let illum_states = read_u32(&mut r)? as usize;
        let analyzer_states = read_u32(&mut r)? as usize;
        let dims = CaptureDims { arms, bands, height, width, illum_states, analyzer_states };
        if dims.pixels() == 0 || dims.states() == 0 || arms == 0 || bands == 0 {
            return Err(CaptureError::BadHeader);
        }
        if dims.intensity_len() > (1usize << 40) {
            return Err(CaptureError::BadHeader);
        }
        let start_nm = read_f64(&mut r)?;
        let step_nm = read_f64(&mut r)?;
        let grid = WavelengthGrid { start_nm, step_nm, count: bands };
        let mut read_list = |n: usize| -> Result<Vec<f64>, CaptureError> {
            (0..n).map(|_| read_f64(&mut r)).collect()
        };
        let arm_angles = read_list(arms)?;
        let illum_angles = read_list(illum_states)?;
        let analyzer_angles = read_list(analyzer_states)?;
        let mut validity = vec![0u8; dims.pixels()];
        r.read_exact(&mut validity)?;
        let n = dims.intensity_len();
        let mut intensities = vec![0.0f64; n];
        let mut buf = vec![0u8; 4 * 65_536];
        let mut filled = 0usize;
        while filled < n {
            let take = (4 * (n - filled)).min(buf.len());
            if let Err(e) = r.read_exact(&mut buf[..take]) {
                if e.kind() == std::io::ErrorKind::UnexpectedEof {
                    return Err(CaptureError::Truncated {
                        expected: 4 * n as u64,
                        got: 4 * filled as u64,
                    });
                }
                return Err(e.into());
            }
            for (slot, bytes) in intensities[filled..filled + take / 4]
                .iter_mut()
                .zip(buf[..take].chunks_exact(4))
            {
                *slot = f32::from_le_bytes([bytes[0], bytes[1], bytes[2], bytes[3]]) as f64;
            }
            filled += take / 4;
        }
        Ok(Self {
            dims,
            arm_angles,
            illum_angles,
            analyzer_angles,
            grid,
            validity,
            intensities,
        })
    }

    /// The 24 (or however many) intensities of one pixel at one arm and band.
    pub fn pixel_measurements(&self, arm: usize, band: usize, y: u32, x: u32) -> &[f64] {
        let start = self.dims.offset(arm, band, y, x, 0);
        &self.intensities[start..start + self.dims.states()]
    }
}

/// Header of an archive without its intensity payload.
pub fn read_archive_header(path: &Path) -> Result<(CaptureDims, WavelengthGrid), CaptureError> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != ARCHIVE_MAGIC {
        return Err(CaptureError::BadMagic);
    }
    let version = read_u32(&mut r)?;
    if version != ARCHIVE_VERSION {
        return Err(CaptureError::UnsupportedVersion(version));
    }
    let arms = read_u32(&mut r)? as usize;
    let bands = read_u32(&mut r)? as usize;
    let height = read_u32(&mut r)?;
    let width = read_u32(&mut r)?;
    let illum_states = read_u32(&mut r)? as usize;
    let analyzer_states = read_u32(&mut r)? as usize;
    let dims = CaptureDims { arms, bands, height, width, illum_states, analyzer_states };
    if dims.pixels() == 0 || dims.states() == 0 || arms == 0 || bands == 0 {
        return Err(CaptureError::BadHeader);
    }
    let start_nm = read_f64(&mut r)?;
    let step_nm = read_f64(&mut r)?;
    Ok((dims, WavelengthGrid { start_nm, step_nm, count: bands }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::analytic::AnalyticPbrdf;
    use crate::fresnel::SpectralIor;
    use crate::mueller::frame_rotation;
    use crate::scene::{CameraConfig, SphereScene, SphereSceneConfig};
    use approx::assert_relative_eq;

    fn tiny_grid(bands: usize) -> WavelengthGrid {
        WavelengthGrid { start_nm: 500.0, step_nm: 20.0, count: bands }
    }

    fn tiny_config(bands: usize) -> AcquisitionConfig {
        AcquisitionConfig {
            light_arm_angles: vec![60f64.to_radians(), 110f64.to_radians()],
            wavelength_grid: tiny_grid(bands),
            ..AcquisitionConfig::default()
        }
    }

    fn tiny_scene(width: u32) -> SphereScene {
        let config = SphereSceneConfig {
            camera: CameraConfig { width, height: width, ..CameraConfig::default() },
            ..SphereSceneConfig::default()
        };
        SphereScene::new(&config, 1).unwrap()
    }

    fn plastic(bands: usize) -> AnalyticPbrdf {
        AnalyticPbrdf::new(
            SpectralIor::constant(1.5, 0.0, bands).unwrap(),
            vec![0.7; bands],
            1.0,
            0.05,
        )
        .unwrap()
    }

    #[test]
    fn defaults_match_the_acquisition_protocol() {
        let c = AcquisitionConfig::default();
        assert_eq!(c.illum_qwp_angles.len(), 4);
        assert_eq!(c.analyzer_qwp_angles.len(), 6);
        assert_eq!(c.light_arm_angles.len(), 25);
        assert_eq!(c.states(), 24);
        assert_relative_eq!(c.light_arm_angles[0].to_degrees(), 40.0, epsilon = 1e-12);
        assert_relative_eq!(c.light_arm_angles[24].to_degrees(), 160.0, epsilon = 1e-12);
    }

    #[test]
    fn emitted_state_after_aligned_retarder_is_horizontal() {
        let config = tiny_config(2);
        let s = emitted_stokes(&config, 0.0, 0).unwrap();
        assert_relative_eq!(s.0[0], 0.5, epsilon = 1e-12);
        assert_relative_eq!(s.0[1], 0.5, epsilon = 1e-12);
        assert!(s.0[2].abs() < 1e-12 && s.0[3].abs() < 1e-12);
    }

    #[test]
    fn emitted_state_at_45_degrees_is_circular() {
        let config = tiny_config(2);
        let s = emitted_stokes(&config, std::f64::consts::FRAC_PI_4, 0).unwrap();
        assert_relative_eq!(s.0[3].abs(), 0.5, epsilon = 1e-12);
        assert!(s.0[1].abs() < 1e-12 && s.0[2].abs() < 1e-12);
    }

    #[test]
    fn zero_radiance_emits_nothing() {
        let mut config = tiny_config(2);
        config.light_spectrum = Spectrum::Constant(0.0);
        let s = emitted_stokes(&config, 0.7, 1).unwrap();
        assert_eq!(s.0.norm(), 0.0);
    }

    #[test]
    fn aligned_identity_sample_passes_half_the_light() {
        let id = MuellerMatrix::identity();
        let eye = MuellerMatrix::identity();
        let half_pi = std::f64::consts::FRAC_PI_2;
        let f = simulate_pixel(&id, &eye, &eye, half_pi, half_pi, 0.0, 0.0, 1.0);
        assert_relative_eq!(f, 0.5, epsilon = 1e-12);
    }

    #[test]
    fn depolarizer_sample_ignores_the_illumination_retarder() {
        let mut depol = MuellerMatrix::zeros();
        depol.0[(0, 0)] = 1.0;
        let eye = MuellerMatrix::identity();
        let half_pi = std::f64::consts::FRAC_PI_2;
        let reference = simulate_pixel(&depol, &eye, &eye, half_pi, half_pi, 0.0, 0.3, 1.0);
        for theta in [0.1, 0.7, -1.2, 2.4] {
            let f = simulate_pixel(&depol, &eye, &eye, half_pi, half_pi, theta, 0.3, 1.0);
            assert_relative_eq!(f, reference, epsilon = 1e-12);
        }
    }

    #[test]
    fn zero_sample_yields_zero_intensity() {
        let zero = MuellerMatrix::zeros();
        let eye = MuellerMatrix::identity();
        let f = simulate_pixel(&zero, &eye, &eye, 1.0, 1.0, 0.4, 1.1, 3.0);
        assert_eq!(f, 0.0);
    }

    #[test]
    fn crossed_polarizers_without_retarders_extinguish() {
        let id = MuellerMatrix::identity();
        let eye = MuellerMatrix::identity();
        let crossed = frame_rotation(std::f64::consts::FRAC_PI_2);
        for theta in [0.0, 0.5, -0.9] {
            let f = simulate_pixel(&id, &eye, &crossed, 0.0, 0.0, theta, theta + 0.3, 1.0);
            assert!(f.abs() < 1e-12, "leakage {f}");
        }
    }

    #[test]
    fn state_precomputation_matches_the_explicit_chain() {
        let config = tiny_config(1);
        let sources = illumination_states(&config.illum_qwp_angles, 1.3);
        let analyzers = analyzer_states(&config.analyzer_qwp_angles, 0.9);
        let m = MuellerMatrix::from_rows([
            [1.0, 0.1, -0.2, 0.05],
            [0.1, 0.8, 0.0, 0.1],
            [-0.15, 0.0, -0.6, 0.2],
            [0.0, -0.1, -0.2, 0.7],
        ]);
        let c_ei = frame_rotation(0.4);
        let c_rc = frame_rotation(-0.8);
        for (i, &theta) in config.illum_qwp_angles.iter().enumerate() {
            for (j, &theta_p) in config.analyzer_qwp_angles.iter().enumerate() {
                let direct = simulate_pixel(&m, &c_ei, &c_rc, 1.3, 0.9, theta, theta_p, 2.0);
                let at_camera = c_rc * m * c_ei * StokesVector(sources[i].0 * 2.0);
                let row = analyzers[j];
                let fast = row[0] * at_camera.0[0]
                    + row[1] * at_camera.0[1]
                    + row[2] * at_camera.0[2]
                    + row[3] * at_camera.0[3];
                assert_relative_eq!(direct, fast, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn capture_highlights_the_mirror_configuration() {
        let bands = 2;
        let scene = tiny_scene(41);
        let config = tiny_config(bands);
        let capture = simulate_sphere_capture(&plastic(bands), &scene, &config, 1).unwrap();
        assert_eq!(capture.dims.states(), 24);

        // Total intensity image for arm 0, band 0.
        let mut peak = 0.0f64;
        let mut total = 0.0f64;
        let mut lit = 0usize;
        for y in 0..scene.height {
            for x in 0..scene.width {
                let s: f64 = capture.pixel_measurements(0, 0, y, x).iter().sum();
                if s > 0.0 {
                    lit += 1;
                    total += s;
                }
                peak = peak.max(s);
            }
        }
        let mean = total / lit as f64;
        assert!(peak > 5.0 * mean, "highlight peak {peak} vs mean {mean}");
    }

    #[test]
    fn black_material_records_nothing_and_noiseless_is_nonnegative() {
        let bands = 1;
        let scene = tiny_scene(17);
        let config = tiny_config(bands);
        let black = AnalyticPbrdf::new(
            SpectralIor::constant(1.5, 0.0, bands).unwrap(),
            vec![0.0; bands],
            0.0,
            0.05,
        )
        .unwrap();
        let capture = simulate_sphere_capture(&black, &scene, &config, 1).unwrap();
        assert!(capture.intensities.iter().all(|&v| v == 0.0));

        let lit = simulate_sphere_capture(&plastic(bands), &scene, &config, 1).unwrap();
        assert!(lit.intensities.iter().all(|&v| v >= -1e-12));
    }

    #[test]
    fn radiance_scales_linearly() {
        let bands = 1;
        let scene = tiny_scene(17);
        let mut config = tiny_config(bands);
        let base = simulate_sphere_capture(&plastic(bands), &scene, &config, 1).unwrap();
        config.light_spectrum = Spectrum::Constant(2.0);
        let doubled = simulate_sphere_capture(&plastic(bands), &scene, &config, 1).unwrap();
        for (a, b) in base.intensities.iter().zip(doubled.intensities.iter()) {
            assert_relative_eq!(*b, 2.0 * *a, epsilon = 1e-12, max_relative = 1e-12);
        }
    }

    #[test]
    fn noise_is_deterministic_per_seed() {
        let bands = 1;
        let scene = tiny_scene(17);
        let mut config = tiny_config(bands);
        config.noise_rel = 0.01;
        let a = simulate_sphere_capture(&plastic(bands), &scene, &config, 7).unwrap();
        let b = simulate_sphere_capture(&plastic(bands), &scene, &config, 7).unwrap();
        assert_eq!(a.intensities, b.intensities);
        let c = simulate_sphere_capture(&plastic(bands), &scene, &config, 8).unwrap();
        assert!(a.intensities != c.intensities);
    }

    #[test]
    fn occlusion_union_controls_validity() {
        let bands = 1;
        let scene = tiny_scene(21);
        let mut config = tiny_config(bands);
        config.occlusion = Some(OcclusionMasks {
            position_a: vec![RectRegion { x0: 0, y0: 0, x1: 21, y1: 11 }],
            position_b: vec![RectRegion { x0: 0, y0: 9, x1: 21, y1: 21 }],
        });
        let capture = simulate_sphere_capture(&plastic(bands), &scene, &config, 1).unwrap();
        // Rows 9 and 10 are occluded at both positions: invalid everywhere.
        for x in 0..21 {
            assert_eq!(capture.validity[(9 * 21 + x) as usize], 0);
            assert_eq!(capture.validity[(10 * 21 + x) as usize], 0);
        }
        // The sphere center row above the overlap stays valid.
        assert_eq!(capture.validity[(5 * 21 + 10) as usize], 1);
    }

    #[test]
    fn archive_round_trip_preserves_header_and_quantized_data() {
        let bands = 2;
        let scene = tiny_scene(13);
        let config = tiny_config(bands);
        let capture = simulate_sphere_capture(&plastic(bands), &scene, &config, 1).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("capture.hpma");
        capture.write_archive(&path).unwrap();
        let loaded = Capture::read_archive(&path).unwrap();
        assert_eq!(loaded.dims, capture.dims);
        assert_eq!(loaded.arm_angles, capture.arm_angles);
        assert_eq!(loaded.validity, capture.validity);
        for (a, b) in capture.intensities.iter().zip(loaded.intensities.iter()) {
            assert_eq!(*a as f32, *b as f32);
        }
        // A second round trip is bit-exact because values are already f32.
        let path2 = dir.path().join("capture2.hpma");
        loaded.write_archive(&path2).unwrap();
        let again = Capture::read_archive(&path2).unwrap();
        assert_eq!(again.intensities, loaded.intensities);
    }

    #[test]
    fn archive_rejects_bad_magic_and_truncation() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("junk.hpma");
        std::fs::write(&path, b"NOPE00000000").unwrap();
        assert!(matches!(Capture::read_archive(&path), Err(CaptureError::BadMagic)));

        let bands = 1;
        let scene = tiny_scene(9);
        let config = tiny_config(bands);
        let capture = simulate_sphere_capture(&plastic(bands), &scene, &config, 1).unwrap();
        let full = dir.path().join("full.hpma");
        capture.write_archive(&full).unwrap();
        let bytes = std::fs::read(&full).unwrap();
        let cut = dir.path().join("cut.hpma");
        std::fs::write(&cut, &bytes[..bytes.len() - 10]).unwrap();
        assert!(matches!(Capture::read_archive(&cut), Err(CaptureError::Truncated { .. })));
    }

    #[test]
    fn counter_noise_is_schedule_free_and_standard_normal() {
        let mut sum = 0.0;
        let mut sum2 = 0.0;
        let n = 200_000;
        for i in 0..n {
            let g = counter_gaussian(42, i);
            sum += g;
            sum2 += g * g;
        }
        let mean = sum / n as f64;
        let var = sum2 / n as f64 - mean * mean;
        assert!(mean.abs() < 0.01, "mean {mean}");
        assert!((var - 1.0).abs() < 0.02, "variance {var}");
        assert_eq!(counter_gaussian(42, 5), counter_gaussian(42, 5));
        assert!(counter_gaussian(42, 5) != counter_gaussian(43, 5));
    }
}
