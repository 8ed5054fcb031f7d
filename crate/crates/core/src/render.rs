//! Direct-illumination polarimetric renderer for sphere scenes.
//!
//! Each pixel carries one Stokes vector per wavelength band, expressed in the
//! camera frame. Light leaves the source in its own emission frame, gets
//! transferred into the material's incident frame, multiplied by the material
//! Mueller matrix, transferred into the camera frame, and scaled by the
//! incidence cosine and inverse-square falloff. Misses stay zero.

use image::{GrayImage, Rgb, RgbImage};
use nalgebra::Vector3;
use rayon::prelude::*;
use thiserror::Error;

use crate::analytic::AnalyticPbrdf;
use crate::frame::{frame_transfer, PolarizationFrame};
use crate::mueller::StokesVector;
use crate::reconstruct::{MuellerImageStack, FLAG_VALID};
use crate::scene::SphereScene;
use crate::spectrum::WavelengthGrid;
use crate::table::{HpbrdfTable, LookupMode};

/// Bands above this wavelength stay out of sRGB previews and are exposed as
/// separate grayscale channels instead.
pub const VISIBLE_CUTOFF_NM: f64 = 714.0;

#[derive(Debug, Error)]
pub enum RenderError {
    #[error("light carries {got} radiance values, the wavelength grid has {expected} bands")]
    BandMismatch { expected: usize, got: usize },
    #[error("negative or non-finite radiance in band {0}")]
    BadRadiance(usize),
    #[error("material covers {got} bands, the render grid has {expected}")]
    MaterialBands { expected: usize, got: usize },
    #[error("table wavelength grid differs from the render grid")]
    GridMismatch,
    #[error("no band at or below {VISIBLE_CUTOFF_NM} nm to integrate color from")]
    NoVisibleBands,
    #[error("band {got} out of range, image has {bands}")]
    BandOutOfRange { got: usize, bands: usize },
}

pub enum RenderMaterial<'a> {
    Analytic(&'a AnalyticPbrdf),
    Table(&'a HpbrdfTable, LookupMode),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LightPolarization {
    Unpolarized,
    /// Fully linearly polarized; the angle is measured in the emission frame,
    /// whose x axis derives from world up projected off the travel direction.
    Linear { angle: f64 },
}

#[derive(Debug, Clone)]
pub struct RenderLight {
    /// Position on the scene's light arm.
    pub arm_angle: f64,
    /// Emitted radiance per wavelength band.
    pub radiance: Vec<f64>,
    pub polarization: LightPolarization,
}

/// Camera-frame Stokes vectors, `[band][y][x][4]`.
pub struct SpectralStokesImage {
    pub width: u32,
    pub height: u32,
    pub grid: WavelengthGrid,
    pub data: Vec<f64>,
}

impl SpectralStokesImage {
    pub fn zeros(width: u32, height: u32, grid: WavelengthGrid) -> Self {
        let len = grid.count * (width as usize) * (height as usize) * 4;
        Self { width, height, grid, data: vec![0.0; len] }
    }

    pub fn pixel_index(&self, band: usize, x: u32, y: u32) -> usize {
        ((band * self.height as usize + y as usize) * self.width as usize + x as usize) * 4
    }

    pub fn stokes_at(&self, band: usize, x: u32, y: u32) -> StokesVector {
        let i = self.pixel_index(band, x, y);
        StokesVector::new(self.data[i], self.data[i + 1], self.data[i + 2], self.data[i + 3])
    }

    /// Same image with every Stokes component multiplied by `factor`.
    pub fn scaled(&self, factor: f64) -> Self {
        Self {
            width: self.width,
            height: self.height,
            grid: self.grid,
            data: self.data.iter().map(|v| v * factor).collect(),
        }
    }
}

fn emission_stokes(light: &RenderLight, band: usize) -> StokesVector {
    let r = light.radiance[band];
    match light.polarization {
        LightPolarization::Unpolarized => StokesVector::unpolarized(r),
        LightPolarization::Linear { angle } => StokesVector::linear(r, angle),
    }
}

fn validate_light(light: &RenderLight, grid: &WavelengthGrid) -> Result<(), RenderError> {
    if light.radiance.len() != grid.count {
        return Err(RenderError::BandMismatch { expected: grid.count, got: light.radiance.len() });
    }
    for (band, &r) in light.radiance.iter().enumerate() {
        if !(r >= 0.0) || !r.is_finite() {
            return Err(RenderError::BadRadiance(band));
        }
    }
    Ok(())
}

fn validate_material(material: &RenderMaterial, grid: &WavelengthGrid) -> Result<(), RenderError> {
    match material {
        RenderMaterial::Analytic(pbrdf) => {
            if pbrdf.bands() != grid.count {
                return Err(RenderError::MaterialBands {
                    expected: grid.count,
                    got: pbrdf.bands(),
                });
            }
        }
        RenderMaterial::Table(table, _) => {
            if table.grid != *grid {
                return Err(RenderError::GridMismatch);
            }
        }
    }
    Ok(())
}

/// Renders one sphere scene under one light into a per-band Stokes image.
pub fn render_direct(
    scene: &SphereScene,
    light: &RenderLight,
    material: &RenderMaterial,
    grid: WavelengthGrid,
) -> Result<SpectralStokesImage, RenderError> {
    validate_light(light, &grid)?;
    validate_material(material, &grid)?;
    let light_pos = scene.light_position(light.arm_angle);
    let (_, cam_up, _) = scene.camera_basis();
    let world_up = Vector3::y();

    let mut image = SpectralStokesImage::zeros(scene.width, scene.height, grid);
    let plane = (scene.width as usize) * (scene.height as usize) * 4;
    image
        .data
        .par_chunks_mut(plane)
        .enumerate()
        .for_each(|(band, out)| {
            let lambda = grid.start_nm + band as f64 * grid.step_nm;
            let emit = emission_stokes(light, band);
            for y in 0..scene.height {
                for x in 0..scene.width {
                    let Some(geom) = scene.pixel_geometry(x, y, &light_pos, band) else {
                        continue;
                    };
                    let wi = geom.to_local(&geom.omega_i);
                    let wo = geom.to_local(&geom.omega_o);
                    let m = match material {
                        RenderMaterial::Analytic(pbrdf) => {
                            match pbrdf.eval(&wi, &wo, band) {
                                Ok(m) => m,
                                Err(_) => continue,
                            }
                        }
                        RenderMaterial::Table(table, mode) => {
                            match table.lookup(lambda, &wi, &wo, *mode) {
                                Ok(m) => m,
                                Err(_) => continue,
                            }
                        }
                    };
                    let toward_surface = -wi;
                    let emission = PolarizationFrame::from_reference(
                        toward_surface,
                        geom.to_local(&world_up),
                    );
                    let canon_in =
                        PolarizationFrame::from_reference(toward_surface, Vector3::z());
                    let canon_out = PolarizationFrame::from_reference(wo, Vector3::z());
                    let camera =
                        PolarizationFrame::from_reference(wo, geom.to_local(&cam_up));
                    let (Ok(into_material), Ok(into_camera)) = (
                        frame_transfer(&emission, &canon_in),
                        frame_transfer(&canon_out, &camera),
                    ) else {
                        continue;
                    };
                    let gain = wi.z / (geom.light_distance * geom.light_distance);
                    let s = (into_camera * (m * (into_material * emit))).0 * gain;
                    let i = (y as usize * scene.width as usize + x as usize) * 4;
                    out[i..i + 4].copy_from_slice(&[s[0], s[1], s[2], s[3]]);
                }
            }
        });
    Ok(image)
}

/// Per-pixel material Mueller matrices for one arm position, in each pixel's
/// canonical local frames. The image shape matches the reconstruction stack.
pub fn mueller_image(
    scene: &SphereScene,
    material: &RenderMaterial,
    arm_angle: f64,
    grid: WavelengthGrid,
) -> Result<MuellerImageStack, RenderError> {
    validate_material(material, &grid)?;
    let light_pos = scene.light_position(arm_angle);
    let pixels = (scene.width as usize) * (scene.height as usize);
    let mut stack = MuellerImageStack {
        arms: 1,
        bands: grid.count,
        width: scene.width,
        height: scene.height,
        grid,
        arm_angles: vec![arm_angle],
        data: vec![0.0; grid.count * pixels * 16],
        flags: vec![0; grid.count * pixels],
        residual: vec![0.0; grid.count * pixels],
    };
    let flags = &mut stack.flags;
    stack
        .data
        .par_chunks_mut(pixels * 16)
        .zip(flags.par_chunks_mut(pixels))
        .enumerate()
        .for_each(|(band, (data, flags))| {
            let lambda = grid.start_nm + band as f64 * grid.step_nm;
            for y in 0..scene.height {
                for x in 0..scene.width {
                    let Some(geom) = scene.pixel_geometry(x, y, &light_pos, band) else {
                        continue;
                    };
                    let wi = geom.to_local(&geom.omega_i);
                    let wo = geom.to_local(&geom.omega_o);
                    let m = match material {
                        RenderMaterial::Analytic(pbrdf) => pbrdf.eval(&wi, &wo, band).ok(),
                        RenderMaterial::Table(table, mode) => {
                            table.lookup(lambda, &wi, &wo, *mode).ok()
                        }
                    };
                    let Some(m) = m else { continue };
                    let p = y as usize * scene.width as usize + x as usize;
                    for r in 0..4 {
                        for c in 0..4 {
                            data[p * 16 + r * 4 + c] = m.0[(r, c)];
                        }
                    }
                    flags[p] = FLAG_VALID;
                }
            }
        });
    Ok(stack)
}

/// Intensity seen through an ideal linear polarizer at `angle`, `[band][y][x]`.
pub fn apply_polarizer(image: &SpectralStokesImage, angle: f64) -> Vec<f64> {
    let (s2a, c2a) = (2.0 * angle).sin_cos();
    let mut out = Vec::with_capacity(image.data.len() / 4);
    for s in image.data.chunks_exact(4) {
        out.push(0.5 * (s[0] + c2a * s[1] + s2a * s[2]));
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BandSelect {
    Band(usize),
    /// Sum the Stokes vectors over all bands first, then derive the scalar.
    Average,
}

fn selected_stokes(image: &SpectralStokesImage, select: BandSelect, x: u32, y: u32) -> [f64; 4] {
    match select {
        BandSelect::Band(b) => {
            let i = image.pixel_index(b, x, y);
            [image.data[i], image.data[i + 1], image.data[i + 2], image.data[i + 3]]
        }
        BandSelect::Average => {
            let mut acc = [0.0; 4];
            for b in 0..image.grid.count {
                let i = image.pixel_index(b, x, y);
                for k in 0..4 {
                    acc[k] += image.data[i + k];
                }
            }
            acc
        }
    }
}

fn check_band(image: &SpectralStokesImage, select: BandSelect) -> Result<(), RenderError> {
    if let BandSelect::Band(b) = select {
        if b >= image.grid.count {
            return Err(RenderError::BandOutOfRange { got: b, bands: image.grid.count });
        }
    }
    Ok(())
}

/// Degree of polarization per pixel; NaN where no light arrived.
pub fn dop_map(image: &SpectralStokesImage, select: BandSelect) -> Result<Vec<f64>, RenderError> {
    check_band(image, select)?;
    let mut out = Vec::with_capacity((image.width * image.height) as usize);
    for y in 0..image.height {
        for x in 0..image.width {
            let s = selected_stokes(image, select, x, y);
            if s[0] <= 0.0 {
                out.push(f64::NAN);
            } else {
                out.push((s[1] * s[1] + s[2] * s[2] + s[3] * s[3]).sqrt() / s[0]);
            }
        }
    }
    Ok(out)
}

/// Angle of linear polarization from the camera frame x axis, in [0, pi).
/// NaN where no light arrived; 0 for unpolarized pixels.
pub fn aolp_map(image: &SpectralStokesImage, select: BandSelect) -> Result<Vec<f64>, RenderError> {
    check_band(image, select)?;
    let mut out = Vec::with_capacity((image.width * image.height) as usize);
    for y in 0..image.height {
        for x in 0..image.width {
            let s = selected_stokes(image, select, x, y);
            if s[0] <= 0.0 {
                out.push(f64::NAN);
            } else {
                let a = 0.5 * s[2].atan2(s[1]);
                out.push(if a < 0.0 { a + std::f64::consts::PI } else { a });
            }
        }
    }
    Ok(out)
}

fn half_gauss(lambda: f64, mean: f64, sigma_left: f64, sigma_right: f64) -> f64 {
    let sigma = if lambda < mean { sigma_left } else { sigma_right };
    let t = (lambda - mean) / sigma;
    (-0.5 * t * t).exp()
}

/// CIE 1931 2-degree color matching functions via piecewise-Gaussian fits.
pub fn cie_xyz_cmf(lambda_nm: f64) -> [f64; 3] {
    let x = 1.056 * half_gauss(lambda_nm, 599.8, 37.9, 31.0)
        + 0.362 * half_gauss(lambda_nm, 442.0, 16.0, 26.7)
        - 0.065 * half_gauss(lambda_nm, 501.1, 20.4, 26.2);
    let y = 0.821 * half_gauss(lambda_nm, 568.8, 46.9, 40.5)
        + 0.286 * half_gauss(lambda_nm, 530.9, 16.3, 31.1);
    let z = 1.217 * half_gauss(lambda_nm, 437.0, 11.8, 36.0)
        + 0.681 * half_gauss(lambda_nm, 459.0, 26.0, 13.8);
    [x, y, z]
}

const XYZ_TO_SRGB: [[f64; 3]; 3] = [
    [3.2406, -1.5372, -0.4986],
    [-0.9689, 1.8758, 0.0415],
    [0.0557, -0.2040, 1.0570],
];
const D65_WHITE: [f64; 3] = [0.95047, 1.0, 1.08883];

/// Color preview of the visible bands. Integrates s0 against the color
/// matching functions at band centers; the sampled grid's equal-energy white
/// is balanced onto the display white point, then the standard matrix and a
/// power-law gamma apply. Values clamp to [0, 1] before encoding.
pub fn to_srgb(image: &SpectralStokesImage, gamma: f64) -> Result<RgbImage, RenderError> {
    let mut visible: Vec<(usize, [f64; 3])> = Vec::new();
    for band in 0..image.grid.count {
        let lambda = image.grid.start_nm + band as f64 * image.grid.step_nm;
        if lambda <= VISIBLE_CUTOFF_NM {
            visible.push((band, cie_xyz_cmf(lambda)));
        }
    }
    if visible.is_empty() {
        return Err(RenderError::NoVisibleBands);
    }
    let mut white = [0.0f64; 3];
    for (_, cmf) in &visible {
        for k in 0..3 {
            white[k] += cmf[k];
        }
    }

    let mut out = RgbImage::new(image.width, image.height);
    for y in 0..image.height {
        for x in 0..image.width {
            let mut xyz = [0.0f64; 3];
            for (band, cmf) in &visible {
                let s0 = image.data[image.pixel_index(*band, x, y)];
                for k in 0..3 {
                    xyz[k] += s0 * cmf[k];
                }
            }
            let adapted: Vec<f64> =
                (0..3).map(|k| xyz[k] / white[k] * D65_WHITE[k]).collect();
            let mut rgb = [0u8; 3];
            for (k, row) in XYZ_TO_SRGB.iter().enumerate() {
                let linear: f64 = (0..3).map(|j| row[j] * adapted[j]).sum();
                let encoded = linear.clamp(0.0, 1.0).powf(1.0 / gamma);
                rgb[k] = (encoded * 255.0).round() as u8;
            }
            out.put_pixel(x, y, Rgb(rgb));
        }
    }
    Ok(out)
}

/// Band indices above the visible cutoff, for grayscale NIR channels.
pub fn nir_bands(grid: &WavelengthGrid) -> Vec<usize> {
    (0..grid.count)
        .filter(|b| grid.start_nm + *b as f64 * grid.step_nm > VISIBLE_CUTOFF_NM)
        .collect()
}

/// Gamma-encoded s0 of one band as an 8-bit grayscale image.
pub fn band_grayscale(
    image: &SpectralStokesImage,
    band: usize,
    gamma: f64,
) -> Result<GrayImage, RenderError> {
    if band >= image.grid.count {
        return Err(RenderError::BandOutOfRange { got: band, bands: image.grid.count });
    }
    let mut out = GrayImage::new(image.width, image.height);
    for y in 0..image.height {
        for x in 0..image.width {
            let s0 = image.data[image.pixel_index(band, x, y)];
            let encoded = s0.clamp(0.0, 1.0).powf(1.0 / gamma);
            out.put_pixel(x, y, image::Luma([(encoded * 255.0).round() as u8]));
        }
    }
    Ok(out)
}

/// Writes one float plane as a grayscale PFM (little-endian, bottom-up rows).
pub fn write_pfm<W: std::io::Write>(
    mut out: W,
    width: u32,
    height: u32,
    plane: &[f64],
) -> std::io::Result<()> {
    assert_eq!(plane.len(), (width * height) as usize, "plane size mismatch");
    write!(out, "Pf\n{} {}\n-1.0\n", width, height)?;
    for y in (0..height).rev() {
        for x in 0..width {
            let v = plane[(y * width + x) as usize] as f32;
            out.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

/// Reads a grayscale little-endian PFM back into a top-down float plane.
pub fn read_pfm<R: std::io::Read>(mut inp: R) -> std::io::Result<(u32, u32, Vec<f64>)> {
    let mut raw = Vec::new();
    inp.read_to_end(&mut raw)?;
    let bad = |msg: &str| std::io::Error::new(std::io::ErrorKind::InvalidData, msg.to_string());
    let mut cursor = 0usize;
    let mut token = |raw: &[u8]| -> std::io::Result<String> {
        while cursor < raw.len() && raw[cursor].is_ascii_whitespace() {
            cursor += 1;
        }
        let start = cursor;
        while cursor < raw.len() && !raw[cursor].is_ascii_whitespace() {
            cursor += 1;
        }
        if start == cursor {
            return Err(bad("truncated header"));
        }
        // Exactly one whitespace byte separates the header from the samples.
        let text = String::from_utf8_lossy(&raw[start..cursor]).into_owned();
        cursor += 1;
        Ok(text)
    };
    if token(&raw)? != "Pf" {
        return Err(bad("not a grayscale PFM"));
    }
    let width: u32 = token(&raw)?.parse().map_err(|_| bad("bad width"))?;
    let height: u32 = token(&raw)?.parse().map_err(|_| bad("bad height"))?;
    let scale: f64 = token(&raw)?.parse().map_err(|_| bad("bad scale"))?;
    if scale >= 0.0 {
        return Err(bad("big-endian PFM not supported"));
    }
    let pixels = (width as usize) * (height as usize);
    if raw.len() < cursor + pixels * 4 {
        return Err(bad("truncated samples"));
    }
    let mut plane = vec![0.0f64; pixels];
    for y in 0..height as usize {
        for x in 0..width as usize {
            let src = cursor + ((height as usize - 1 - y) * width as usize + x) * 4;
            let bytes = [raw[src], raw[src + 1], raw[src + 2], raw[src + 3]];
            plane[y * width as usize + x] = f32::from_le_bytes(bytes) as f64;
        }
    }
    Ok((width, height, plane))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::analytic::AnalyticPbrdf;
    use crate::fresnel::SpectralIor;
    use crate::mueller::is_admissible;
    use crate::scene::{CameraConfig, SphereSceneConfig};
    use crate::table::TableDims;
    use approx::assert_relative_eq;

    fn grid(bands: usize) -> WavelengthGrid {
        WavelengthGrid { start_nm: 500.0, step_nm: 50.0, count: bands }
    }

    fn scene(size: u32, bands: usize) -> SphereScene {
        let config = SphereSceneConfig {
            camera: CameraConfig { width: size, height: size, ..CameraConfig::default() },
            ..SphereSceneConfig::default()
        };
        SphereScene::new(&config, bands).unwrap()
    }

    fn unpolarized_light(bands: usize, arm_angle: f64) -> RenderLight {
        RenderLight {
            arm_angle,
            radiance: vec![1.0; bands],
            polarization: LightPolarization::Unpolarized,
        }
    }

    fn diffuse_material(bands: usize) -> AnalyticPbrdf {
        AnalyticPbrdf::new(
            SpectralIor::constant(1.5, 0.0, bands).unwrap(),
            vec![0.7; bands],
            0.0,
            0.1,
        )
        .unwrap()
    }

    fn dielectric_material(bands: usize, albedo: f64) -> AnalyticPbrdf {
        AnalyticPbrdf::new(
            SpectralIor::constant(1.5, 0.0, bands).unwrap(),
            vec![albedo; bands],
            1.0,
            0.1,
        )
        .unwrap()
    }

    #[test]
    fn diffuse_material_renders_unpolarized() {
        let bands = 2;
        let scene = scene(48, bands);
        let material = diffuse_material(bands);
        let image = render_direct(
            &scene,
            &unpolarized_light(bands, 1.2),
            &RenderMaterial::Analytic(&material),
            grid(bands),
        )
        .unwrap();
        let mut lit = 0usize;
        for band in 0..bands {
            for y in 0..scene.height {
                for x in 0..scene.width {
                    let s = image.stokes_at(band, x, y);
                    assert_eq!(s.s1(), 0.0);
                    assert_eq!(s.s2(), 0.0);
                    assert_eq!(s.s3(), 0.0);
                    assert!(s.s0() >= 0.0);
                    if s.s0() > 0.0 {
                        lit += 1;
                    }
                }
            }
        }
        assert!(lit > 200, "expected a lit sphere, got {lit} pixels");
    }

    #[test]
    fn polarized_light_on_a_diffuse_sphere_changes_nothing() {
        let bands = 1;
        let scene = scene(32, bands);
        let material = diffuse_material(bands);
        let unpol = render_direct(
            &scene,
            &unpolarized_light(bands, 1.2),
            &RenderMaterial::Analytic(&material),
            grid(bands),
        )
        .unwrap();
        let pol = render_direct(
            &scene,
            &RenderLight {
                arm_angle: 1.2,
                radiance: vec![1.0],
                polarization: LightPolarization::Linear { angle: 0.7 },
            },
            &RenderMaterial::Analytic(&material),
            grid(bands),
        )
        .unwrap();
        assert_eq!(unpol.data, pol.data);
    }

    #[test]
    fn rendering_is_linear_in_radiance() {
        let bands = 2;
        let scene = scene(32, bands);
        let material = dielectric_material(bands, 0.3);
        let one = render_direct(
            &scene,
            &unpolarized_light(bands, 1.9),
            &RenderMaterial::Analytic(&material),
            grid(bands),
        )
        .unwrap();
        let two = render_direct(
            &scene,
            &RenderLight {
                arm_angle: 1.9,
                radiance: vec![2.0; bands],
                polarization: LightPolarization::Unpolarized,
            },
            &RenderMaterial::Analytic(&material),
            grid(bands),
        )
        .unwrap();
        assert_eq!(one.scaled(2.0).data, two.data);
    }

    #[test]
    fn every_rendered_pixel_is_admissible() {
        let bands = 2;
        let scene = scene(48, bands);
        let material = dielectric_material(bands, 0.2);
        let image = render_direct(
            &scene,
            &unpolarized_light(bands, 1.9),
            &RenderMaterial::Analytic(&material),
            grid(bands),
        )
        .unwrap();
        for s in image.data.chunks_exact(4) {
            let stokes = StokesVector::new(s[0], s[1], s[2], s[3]);
            assert!(is_admissible(&stokes, 1e-9), "inadmissible pixel {s:?}");
        }
    }

    #[test]
    fn brewster_ring_is_almost_fully_polarized() {
        let bands = 1;
        let size = 96u32;
        // Far light and camera keep the incidence half-angle nearly uniform
        // over the highlight, so the whole lobe sits at Brewster incidence.
        let config = SphereSceneConfig {
            camera: CameraConfig {
                position: [0.0, 0.0, 5.0],
                fov_y_deg: 1.4,
                width: size,
                height: size,
                ..CameraConfig::default()
            },
            light_arm_radius: 50.0,
            ..SphereSceneConfig::default()
        };
        let scene = SphereScene::new(&config, bands).unwrap();
        let material = dielectric_material(bands, 0.0);
        let brewster = 1.5f64.atan();
        let arm = 2.0 * brewster;
        let image = render_direct(
            &scene,
            &unpolarized_light(bands, arm),
            &RenderMaterial::Analytic(&material),
            grid(bands),
        )
        .unwrap();
        let max_s0 = image
            .data
            .chunks_exact(4)
            .map(|s| s[0])
            .fold(0.0f64, f64::max);
        assert!(max_s0 > 0.0);

        let light_pos = scene.light_position(arm);
        let mut ring = 0usize;
        for y in 0..size {
            for x in 0..size {
                let s = image.stokes_at(0, x, y);
                if s.s0() < 1e-3 * max_s0 {
                    continue;
                }
                let geom = scene.pixel_geometry(x, y, &light_pos, 0).unwrap();
                let wi = geom.to_local(&geom.omega_i);
                let wo = geom.to_local(&geom.omega_o);
                let h = (wi + wo).normalize();
                let theta_d = wi.dot(&h).clamp(-1.0, 1.0).acos();
                if (theta_d - brewster).abs() > 1.5f64.to_radians() {
                    continue;
                }
                ring += 1;
                let dop = s.polarized_intensity() / s.s0();
                assert!(dop >= 0.99, "DoP {dop} at ({x},{y}), theta_d {theta_d}");
            }
        }
        assert!(ring > 10, "expected Brewster-ring pixels, got {ring}");
    }

    #[test]
    fn polarizer_sweep_obeys_malus_law() {
        let mut image = SpectralStokesImage::zeros(1, 1, grid(1));
        let beta = 0.4f64;
        image.data.copy_from_slice(&[1.0, (2.0 * beta).cos(), (2.0 * beta).sin(), 0.0]);
        let n = 64;
        let mut worst = 0.0f64;
        for k in 0..n {
            let alpha = k as f64 * std::f64::consts::PI / n as f64;
            let measured = apply_polarizer(&image, alpha)[0];
            let malus = (alpha - beta).cos().powi(2);
            worst = worst.max((measured - malus).abs());
        }
        assert!(worst < 1e-10, "Malus residual {worst}");
    }

    #[test]
    fn polarizer_basics() {
        let mut image = SpectralStokesImage::zeros(2, 1, grid(1));
        image.data[0..4].copy_from_slice(&[1.0, 0.0, 0.0, 0.0]);
        image.data[4..8].copy_from_slice(&[1.0, 1.0, 0.0, 0.0]);
        for angle in [0.0, 0.3, 1.0] {
            assert_relative_eq!(apply_polarizer(&image, angle)[0], 0.5, epsilon = 1e-12);
        }
        assert_relative_eq!(apply_polarizer(&image, 0.0)[1], 1.0, epsilon = 1e-12);
        let crossed = std::f64::consts::FRAC_PI_2;
        assert_relative_eq!(apply_polarizer(&image, crossed)[1], 0.0, epsilon = 1e-12);
    }

    #[test]
    fn table_render_tracks_the_analytic_render() {
        let bands = 2;
        let g = grid(bands);
        let scene = scene(64, bands);
        let material = AnalyticPbrdf::new(
            SpectralIor::constant(1.5, 0.0, bands).unwrap(),
            vec![0.3; bands],
            1.0,
            0.15,
        )
        .unwrap();
        let dims = TableDims { bands, phi_d: 60, theta_d: 33, theta_h: 33 };
        let table = HpbrdfTable::from_analytic(&material, dims, g).unwrap();
        let light = unpolarized_light(bands, 1.8);
        let reference =
            render_direct(&scene, &light, &RenderMaterial::Analytic(&material), g).unwrap();
        let mut medians = Vec::new();
        for mode in [LookupMode::Trilinear, LookupMode::Nearest] {
            let tabled =
                render_direct(&scene, &light, &RenderMaterial::Table(&table, mode), g)
                    .unwrap();
            let mut errors: Vec<f64> = Vec::new();
            for (s_ref, s_tab) in reference
                .data
                .chunks_exact(4)
                .zip(tabled.data.chunks_exact(4))
            {
                if s_ref[0] > 1e-12 {
                    errors.push((s_tab[0] - s_ref[0]).abs() / s_ref[0]);
                }
            }
            assert!(errors.len() > 500);
            errors.sort_by(f64::total_cmp);
            medians.push(errors[errors.len() / 2]);
        }
        assert!(medians[0] < 0.05, "trilinear median s0 error {}", medians[0]);
        assert!(
            medians[0] <= medians[1],
            "trilinear {} should not be rougher than nearest {}",
            medians[0],
            medians[1]
        );
    }

    #[test]
    fn light_validation_catches_bad_input() {
        let bands = 2;
        let scene = scene(8, bands);
        let material = diffuse_material(bands);
        let short = RenderLight {
            arm_angle: 1.0,
            radiance: vec![1.0],
            polarization: LightPolarization::Unpolarized,
        };
        assert!(matches!(
            render_direct(&scene, &short, &RenderMaterial::Analytic(&material), grid(bands)),
            Err(RenderError::BandMismatch { expected: 2, got: 1 })
        ));
        let negative = RenderLight {
            arm_angle: 1.0,
            radiance: vec![1.0, -0.5],
            polarization: LightPolarization::Unpolarized,
        };
        assert!(matches!(
            render_direct(&scene, &negative, &RenderMaterial::Analytic(&material), grid(bands)),
            Err(RenderError::BadRadiance(1))
        ));
        let wrong_bands = diffuse_material(3);
        assert!(matches!(
            render_direct(
                &scene,
                &unpolarized_light(bands, 1.0),
                &RenderMaterial::Analytic(&wrong_bands),
                grid(bands)
            ),
            Err(RenderError::MaterialBands { expected: 2, got: 3 })
        ));
    }

    #[test]
    fn dop_and_aolp_read_back_known_states() {
        let mut image = SpectralStokesImage::zeros(3, 2, grid(1));
        let pi = std::f64::consts::PI;
        image.data[0..4].copy_from_slice(&[1.0, 1.0, 0.0, 0.0]);
        image.data[4..8].copy_from_slice(&[1.0, 0.0, 1.0, 0.0]);
        image.data[8..12].copy_from_slice(&[1.0, -1.0, 0.0, 0.0]);
        image.data[12..16].copy_from_slice(&[1.0, 0.0, -1.0, 0.0]);
        image.data[16..20].copy_from_slice(&[2.0, 0.0, 0.0, 0.0]);
        // last pixel stays dark
        let dop = dop_map(&image, BandSelect::Band(0)).unwrap();
        let aolp = aolp_map(&image, BandSelect::Band(0)).unwrap();
        assert_relative_eq!(dop[0], 1.0);
        assert_relative_eq!(aolp[0], 0.0);
        assert_relative_eq!(aolp[1], pi / 4.0);
        assert_relative_eq!(aolp[2], pi / 2.0);
        assert_relative_eq!(aolp[3], 3.0 * pi / 4.0);
        assert_relative_eq!(dop[4], 0.0);
        assert!(dop[5].is_nan() && aolp[5].is_nan());
        for v in &aolp[..5] {
            assert!((0.0..pi).contains(v));
        }
        assert!(matches!(
            dop_map(&image, BandSelect::Band(7)),
            Err(RenderError::BandOutOfRange { .. })
        ));
    }

    #[test]
    fn band_average_sums_stokes_before_the_ratio() {
        let mut image = SpectralStokesImage::zeros(1, 1, grid(2));
        image.data[0..4].copy_from_slice(&[1.0, 1.0, 0.0, 0.0]);
        image.data[4..8].copy_from_slice(&[1.0, -1.0, 0.0, 0.0]);
        let dop = dop_map(&image, BandSelect::Average).unwrap();
        assert_relative_eq!(dop[0], 0.0);
    }

    #[test]
    fn color_matching_fit_hits_frozen_checkpoints() {
        let [x, y, z] = cie_xyz_cmf(550.0);
        assert_relative_eq!(x, 0.4341, epsilon = 1e-3);
        assert_relative_eq!(y, 0.9944, epsilon = 1e-3);
        assert_relative_eq!(z, 0.0088, epsilon = 1e-3);
        // published CIE 1931 values at 550 nm
        assert!((x - 0.4334).abs() < 0.01);
        assert!((y - 0.9950).abs() < 0.01);
        assert!((z - 0.0087).abs() < 0.01);
    }

    #[test]
    fn flat_spectrum_renders_neutral_gray() {
        let g = WavelengthGrid { start_nm: 418.0, step_nm: 16.0, count: 19 };
        let mut image = SpectralStokesImage::zeros(2, 2, g);
        for s in image.data.chunks_exact_mut(4) {
            s[0] = 0.5;
        }
        let rgb = to_srgb(&image, 2.2).unwrap();
        let p = rgb.get_pixel(0, 0).0;
        let max = p.iter().copied().max().unwrap() as f64;
        let min = p.iter().copied().min().unwrap() as f64;
        assert!(max > 100.0, "half energy should be mid gray, got {p:?}");
        assert!((max - min) / max < 0.02, "not neutral: {p:?}");
    }

    #[test]
    fn monochromatic_green_band_dominates() {
        let g = WavelengthGrid { start_nm: 414.0, step_nm: 8.0, count: 37 };
        let mut image = SpectralStokesImage::zeros(1, 1, g);
        let band = ((550.0 - g.start_nm) / g.step_nm).round() as usize;
        let i = image.pixel_index(band, 0, 0);
        image.data[i] = 1.0;
        let rgb = to_srgb(&image, 2.2).unwrap();
        let p = rgb.get_pixel(0, 0).0;
        assert!(p[1] > p[0] && p[1] > p[2], "not green dominant: {p:?}");
    }

    #[test]
    fn dark_image_encodes_black_and_nir_grids_are_rejected() {
        let image = SpectralStokesImage::zeros(2, 2, grid(2));
        let rgb = to_srgb(&image, 2.2).unwrap();
        assert!(rgb.pixels().all(|p| p.0 == [0, 0, 0]));

        let nir_only = SpectralStokesImage::zeros(
            2,
            2,
            WavelengthGrid { start_nm: 750.0, step_nm: 8.0, count: 4 },
        );
        assert!(matches!(to_srgb(&nir_only, 2.2), Err(RenderError::NoVisibleBands)));
    }

    #[test]
    fn nir_bands_split_off_and_encode_grayscale() {
        let g = WavelengthGrid { start_nm: 702.0, step_nm: 8.0, count: 4 };
        assert_eq!(nir_bands(&g), vec![2, 3]);
        let mut image = SpectralStokesImage::zeros(2, 1, g);
        let (a, b) = (image.pixel_index(2, 0, 0), image.pixel_index(2, 1, 0));
        image.data[a] = 1.0;
        image.data[b] = 0.25;
        let gray = band_grayscale(&image, 2, 2.2).unwrap();
        assert_eq!(gray.get_pixel(0, 0).0, [255]);
        assert_eq!(gray.get_pixel(1, 0).0, [(0.25f64.powf(1.0 / 2.2) * 255.0).round() as u8]);
    }

    #[test]
    fn pfm_round_trips_bit_exactly() {
        let plane: Vec<f64> = (0..12).map(|i| (i as f64 - 5.5) * 0.25).collect();
        let mut raw = Vec::new();
        write_pfm(&mut raw, 4, 3, &plane).unwrap();
        assert!(raw.starts_with(b"Pf\n4 3\n-1.0\n"));
        let (w, h, back) = read_pfm(raw.as_slice()).unwrap();
        assert_eq!((w, h), (4, 3));
        let expect: Vec<f64> = plane.iter().map(|v| *v as f32 as f64).collect();
        assert_eq!(back, expect);
        assert!(read_pfm(b"PF\n1 1\n-1.0\n".as_slice()).is_err());
    }

    #[test]
    fn mueller_image_matches_direct_evaluation() {
        let bands = 2;
        let g = grid(bands);
        let scene = scene(24, bands);
        let material = dielectric_material(bands, 0.3);
        let stack =
            mueller_image(&scene, &RenderMaterial::Analytic(&material), 1.8, g).unwrap();
        let light_pos = scene.light_position(1.8);
        let mut valid = 0usize;
        for y in 0..scene.height {
            for x in 0..scene.width {
                match scene.pixel_geometry(x, y, &light_pos, 0) {
                    Some(geom) => {
                        valid += 1;
                        let wi = geom.to_local(&geom.omega_i);
                        let wo = geom.to_local(&geom.omega_o);
                        let expect = material.eval(&wi, &wo, 0).unwrap();
                        let got = stack.matrix_at(0, 0, y, x);
                        assert!((got.0 - expect.0).norm() < 1e-12);
                        assert_eq!(stack.flags_at(0, 0, y, x), FLAG_VALID);
                    }
                    None => assert_eq!(stack.flags_at(0, 0, y, x), 0),
                }
            }
        }
        assert!(valid > 50);
    }
}
