//! The tabulated BRDF: a 4D grid over wavelength and half/difference angles
//! holding one Mueller matrix per bin.
//!
//! Bin centers sit on the axis endpoints: an axis with n bins spans its range
//! with pitch range/(n-1), so the azimuth axis stores both 0 and 2π (the same
//! physical angle) and interpolation never wraps. Matrices are stored in the
//! canonical per-pair polarization frames (x axis from the propagation
//! direction and the surface normal), which are invariant under rotating the
//! direction pair about the normal, so one bin serves every azimuth of an
//! isotropic material.

use std::f64::consts::{FRAC_PI_2, TAU};
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::analytic::AnalyticPbrdf;
use crate::frame::Vec3;
use crate::mueller::MuellerMatrix;
use crate::reconstruct::{MuellerImageStack, FLAG_VALID};
use crate::rusinkiewicz::{from_rusinkiewicz, to_rusinkiewicz, DegenerateHalfVector, RusinkiewiczCoord};
use crate::scene::SphereScene;
use crate::spectrum::{SpectrumError, WavelengthGrid};

#[derive(Debug, Error)]
pub enum TableError {
    #[error(transparent)]
    Degenerate(#[from] DegenerateHalfVector),
    #[error(transparent)]
    Spectrum(#[from] SpectrumError),
    #[error("dimension mismatch: {0}")]
    DimMismatch(String),
    #[error("bin (band {band}, phi_d {phi_d}, theta_d {theta_d}, theta_h {theta_h}) is unfilled")]
    UnfilledBin { band: usize, phi_d: usize, theta_d: usize, theta_h: usize },
    #[error("table has no occupied bins")]
    EmptyTable,
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("not a BRDF table file (bad magic)")]
    BadMagic,
    #[error("unsupported table version {0}")]
    UnsupportedVersion(u32),
    #[error("file ends before the declared payload")]
    TruncatedFile,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TableDims {
    pub bands: usize,
    pub phi_d: usize,
    pub theta_d: usize,
    pub theta_h: usize,
}

impl TableDims {
    /// Production resolution: 1 degree pitch on every angular axis.
    pub fn full() -> Self {
        Self { bands: 68, phi_d: 361, theta_d: 91, theta_h: 91 }
    }

    /// Small dims that exercise the same code paths at desk scale.
    pub fn desk() -> Self {
        Self { bands: 16, phi_d: 90, theta_d: 23, theta_h: 23 }
    }

    pub fn bins(&self) -> usize {
        self.bands * self.phi_d * self.theta_d * self.theta_h
    }

    pub fn bins_per_band(&self) -> usize {
        self.phi_d * self.theta_d * self.theta_h
    }

    /// Size of the matrix payload on disk: 16 f32 entries per bin.
    pub fn payload_bytes(&self) -> u64 {
        self.bands as u64
            * self.phi_d as u64
            * self.theta_d as u64
            * self.theta_h as u64
            * 16
            * 4
    }

    pub fn bin_index(&self, band: usize, p: usize, d: usize, h: usize) -> usize {
        ((band * self.phi_d + p) * self.theta_d + d) * self.theta_h + h
    }

    fn valid(&self) -> bool {
        self.bands >= 1 && self.phi_d >= 2 && self.theta_d >= 2 && self.theta_h >= 2
    }

    pub fn phi_d_of(&self, p: usize) -> f64 {
        p as f64 / (self.phi_d - 1) as f64 * TAU
    }

    pub fn theta_d_of(&self, d: usize) -> f64 {
        d as f64 / (self.theta_d - 1) as f64 * FRAC_PI_2
    }

    pub fn theta_h_of(&self, h: usize) -> f64 {
        h as f64 / (self.theta_h - 1) as f64 * FRAC_PI_2
    }

    /// Continuous bin coordinates of an angle triple.
    pub fn coords_of(&self, c: &RusinkiewiczCoord) -> (f64, f64, f64) {
        let u_p = c.phi_d.rem_euclid(TAU) / TAU * (self.phi_d - 1) as f64;
        let u_d = (c.theta_d / FRAC_PI_2).clamp(0.0, 1.0) * (self.theta_d - 1) as f64;
        let u_h = (c.theta_h / FRAC_PI_2).clamp(0.0, 1.0) * (self.theta_h - 1) as f64;
        (u_p, u_d, u_h)
    }
}

impl Default for TableDims {
    fn default() -> Self {
        Self::full()
    }
}

/// Tent kernel of half-width 1.5 bins: the containing bin and both axis
/// neighbors get positive weight, tapering linearly with distance.
fn tent_footprint(u: f64, n: usize) -> ([(usize, f64); 3], usize) {
    let center = u.round() as i64;
    let mut out = [(0usize, 0.0f64); 3];
    let mut count = 0;
    for b in (center - 1)..=(center + 1) {
        if b < 0 || b >= n as i64 {
            continue;
        }
        let w = 1.0 - (u - b as f64).abs() / 1.5;
        if w > 0.0 {
            out[count] = (b as usize, w);
            count += 1;
        }
    }
    (out, count)
}

fn linear_pair(u: f64, n: usize) -> [(usize, f64); 2] {
    let uc = u.clamp(0.0, (n - 1) as f64);
    let i0 = (uc.floor() as usize).min(n - 1);
    let i1 = (i0 + 1).min(n - 1);
    let t = uc - i0 as f64;
    [(i0, 1.0 - t), (i1, t)]
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct SplatReport {
    pub accepted: u64,
    pub skipped: u64,
}

/// Accumulates splatted matrices at f64 before the final division.
pub struct TableBuilder {
    dims: TableDims,
    grid: WavelengthGrid,
    data: Vec<f64>,
    weight: Vec<f64>,
}

impl TableBuilder {
    pub fn new(dims: TableDims, grid: WavelengthGrid) -> Result<Self, TableError> {
        if !dims.valid() {
            return Err(TableError::DimMismatch(format!("degenerate table dims {dims:?}")));
        }
        if dims.bands != grid.count {
            return Err(TableError::DimMismatch(format!(
                "{} table bands vs {} grid bands",
                dims.bands, grid.count
            )));
        }
        Ok(Self {
            dims,
            grid,
            data: vec![0.0; dims.bins() * 16],
            weight: vec![0.0; dims.bins()],
        })
    }

    pub fn dims(&self) -> TableDims {
        self.dims
    }

    /// Adds one matrix at the bin footprint of its angle triple. Directions
    /// are in the local shading basis. Returns false when the pair is
    /// degenerate or the band is out of range; nothing is accumulated then.
    pub fn splat(&mut self, band: usize, omega_i: &Vec3, omega_o: &Vec3, m: &MuellerMatrix) -> bool {
        if band >= self.dims.bands {
            return false;
        }
        let coord = match to_rusinkiewicz(omega_i, omega_o) {
            Ok(c) => c,
            Err(_) => return false,
        };
        self.splat_coord(band, &coord, m);
        true
    }

    fn splat_coord(&mut self, band: usize, coord: &RusinkiewiczCoord, m: &MuellerMatrix) {
        let per_band = self.dims.bins_per_band();
        let mut slice = BandSlice {
            dims: self.dims,
            data: &mut self.data[band * per_band * 16..(band + 1) * per_band * 16],
            weight: &mut self.weight[band * per_band..(band + 1) * per_band],
        };
        slice.splat_coord(coord, m);
    }

    /// Splats every solved pixel of a reconstructed stack, re-deriving the
    /// per-pixel directions from the scene. Bands map one-to-one onto table
    /// wavelength bins, so the stack and table grids must agree.
    pub fn splat_stack(
        &mut self,
        stack: &MuellerImageStack,
        scene: &SphereScene,
    ) -> Result<SplatReport, TableError> {
        if stack.bands != self.dims.bands {
            return Err(TableError::DimMismatch(format!(
                "{} stack bands vs {} table bands",
                stack.bands, self.dims.bands
            )));
        }
        if stack.grid != self.grid {
            return Err(TableError::DimMismatch("stack and table wavelength grids differ".into()));
        }
        if stack.width != scene.width || stack.height != scene.height {
            return Err(TableError::DimMismatch(format!(
                "stack is {}x{}, scene renders {}x{}",
                stack.width, stack.height, scene.width, scene.height
            )));
        }
        let per_band = self.dims.bins_per_band();
        let dims = self.dims;
        let reports: Vec<SplatReport> = self
            .data
            .par_chunks_mut(per_band * 16)
            .zip(self.weight.par_chunks_mut(per_band))
            .enumerate()
            .map(|(band, (data, weight))| {
                let mut slice = BandSlice { dims, data, weight };
                let mut report = SplatReport::default();
                for arm in 0..stack.arms {
                    let light = scene.light_position(stack.arm_angles[arm]);
                    for y in 0..stack.height {
                        for x in 0..stack.width {
                            if stack.flags_at(arm, band, y, x) & FLAG_VALID == 0 {
                                continue;
                            }
                            let geom = match scene.pixel_geometry(x, y, &light, band) {
                                Some(g) => g,
                                None => {
                                    report.skipped += 1;
                                    continue;
                                }
                            };
                            let wi = geom.to_local(&geom.omega_i);
                            let wo = geom.to_local(&geom.omega_o);
                            let coord = match to_rusinkiewicz(&wi, &wo) {
                                Ok(c) => c,
                                Err(_) => {
                                    report.skipped += 1;
                                    continue;
                                }
                            };
                            let m = stack.matrix_at(arm, band, y, x);
                            slice.splat_coord(&coord, &m);
                            report.accepted += 1;
                        }
                    }
                }
                report
            })
            .collect();
        Ok(reports.iter().fold(SplatReport::default(), |a, b| SplatReport {
            accepted: a.accepted + b.accepted,
            skipped: a.skipped + b.skipped,
        }))
    }

    /// Total accumulated splat weight; equals the number of accepted splats.
    pub fn total_weight(&self) -> f64 {
        self.weight.iter().sum()
    }

    /// Divides each occupied bin by its weight and freezes the result.
    pub fn finalize(self) -> HpbrdfTable {
        let bins = self.dims.bins();
        let mut data = vec![0.0f32; bins * 16];
        let mut weight = vec![0.0f32; bins];
        let mut mask = vec![0u8; bins];
        for bin in 0..bins {
            let w = self.weight[bin];
            weight[bin] = w as f32;
            if w > 0.0 {
                mask[bin] = 1;
                for e in 0..16 {
                    data[bin * 16 + e] = (self.data[bin * 16 + e] / w) as f32;
                }
            }
        }
        HpbrdfTable { dims: self.dims, grid: self.grid, data, weight, mask }
    }
}

/// One band's slice of the accumulators, so splatting can run band-parallel
/// without contention.
struct BandSlice<'a> {
    dims: TableDims,
    data: &'a mut [f64],
    weight: &'a mut [f64],
}

impl BandSlice<'_> {
    fn splat_coord(&mut self, coord: &RusinkiewiczCoord, m: &MuellerMatrix) {
        let (u_p, u_d, u_h) = self.dims.coords_of(coord);
        let (fp, np) = tent_footprint(u_p, self.dims.phi_d);
        let (fd, nd) = tent_footprint(u_d, self.dims.theta_d);
        let (fh, nh) = tent_footprint(u_h, self.dims.theta_h);
        let mut total = 0.0;
        for &(_, wp) in &fp[..np] {
            for &(_, wd) in &fd[..nd] {
                for &(_, wh) in &fh[..nh] {
                    total += wp * wd * wh;
                }
            }
        }
        if total <= 0.0 {
            return;
        }
        for &(p, wp) in &fp[..np] {
            for &(d, wd) in &fd[..nd] {
                for &(h, wh) in &fh[..nh] {
                    let w = wp * wd * wh / total;
                    let bin = (p * self.dims.theta_d + d) * self.dims.theta_h + h;
                    self.weight[bin] += w;
                    let base = bin * 16;
                    for r in 0..4 {
                        for c in 0..4 {
                            self.data[base + r * 4 + c] += w * m.0[(r, c)];
                        }
                    }
                }
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LookupMode {
    Nearest,
    Trilinear,
}

pub struct HpbrdfTable {
    pub dims: TableDims,
    pub grid: WavelengthGrid,
    /// 16 f32 entries per bin, band outermost, then phi_d, theta_d, theta_h.
    pub data: Vec<f32>,
    pub weight: Vec<f32>,
    pub mask: Vec<u8>,
}

impl HpbrdfTable {
    pub fn bin_matrix(&self, band: usize, p: usize, d: usize, h: usize) -> MuellerMatrix {
        let base = self.dims.bin_index(band, p, d, h) * 16;
        let mut m = MuellerMatrix::zeros();
        for r in 0..4 {
            for c in 0..4 {
                m.0[(r, c)] = self.data[base + r * 4 + c] as f64;
            }
        }
        m
    }

    pub fn occupied_bins(&self) -> usize {
        self.mask.iter().filter(|&&v| v != 0).count()
    }

    /// Matrix for a direction pair in the local shading basis, expressed in
    /// the canonical polarization frames of that pair.
    pub fn lookup(
        &self,
        lambda_nm: f64,
        omega_i: &Vec3,
        omega_o: &Vec3,
        mode: LookupMode,
    ) -> Result<MuellerMatrix, TableError> {
        let coord = to_rusinkiewicz(omega_i, omega_o)?;
        self.lookup_coord(lambda_nm, &coord, mode)
    }

    pub fn lookup_coord(
        &self,
        lambda_nm: f64,
        coord: &RusinkiewiczCoord,
        mode: LookupMode,
    ) -> Result<MuellerMatrix, TableError> {
        let nearest_band = self.grid.nearest_band(lambda_nm)?;
        let (u_p, u_d, u_h) = self.dims.coords_of(coord);
        match mode {
            LookupMode::Nearest => {
                let p = u_p.round() as usize;
                let d = u_d.round() as usize;
                let h = u_h.round() as usize;
                let bin = self.dims.bin_index(nearest_band, p, d, h);
                if self.mask[bin] == 0 {
                    return Err(TableError::UnfilledBin {
                        band: nearest_band,
                        phi_d: p,
                        theta_d: d,
                        theta_h: h,
                    });
                }
                Ok(self.bin_matrix(nearest_band, p, d, h))
            }
            LookupMode::Trilinear => {
                let lp = linear_pair(self.grid.band_coord(lambda_nm), self.dims.bands);
                let pp = linear_pair(u_p, self.dims.phi_d);
                let dp = linear_pair(u_d, self.dims.theta_d);
                let hp = linear_pair(u_h, self.dims.theta_h);
                let mut acc = MuellerMatrix::zeros();
                let mut total = 0.0;
                for &(b, wb) in &lp {
                    for &(p, wp) in &pp {
                        for &(d, wd) in &dp {
                            for &(h, wh) in &hp {
                                let w = wb * wp * wd * wh;
                                if w == 0.0 {
                                    continue;
                                }
                                let bin = self.dims.bin_index(b, p, d, h);
                                if self.mask[bin] == 0 {
                                    continue;
                                }
                                total += w;
                                let base = bin * 16;
                                for r in 0..4 {
                                    for c in 0..4 {
                                        acc.0[(r, c)] += w * self.data[base + r * 4 + c] as f64;
                                    }
                                }
                            }
                        }
                    }
                }
                if total <= 1e-12 {
                    return Err(TableError::UnfilledBin {
                        band: nearest_band,
                        phi_d: u_p.round() as usize,
                        theta_d: u_d.round() as usize,
                        theta_h: u_h.round() as usize,
                    });
                }
                Ok(acc.scaled(1.0 / total))
            }
        }
    }

    /// Fills a table by evaluating a closed-form material at every bin
    /// center. Bins whose canonical directions fall below the horizon stay
    /// empty.
    pub fn from_analytic(
        pbrdf: &AnalyticPbrdf,
        dims: TableDims,
        grid: WavelengthGrid,
    ) -> Result<Self, TableError> {
        if !dims.valid() {
            return Err(TableError::DimMismatch(format!("degenerate table dims {dims:?}")));
        }
        if dims.bands != grid.count || pbrdf.bands() != grid.count {
            return Err(TableError::DimMismatch(format!(
                "{} table bands, {} material bands, {} grid bands",
                dims.bands,
                pbrdf.bands(),
                grid.count
            )));
        }
        let per_band = dims.bins_per_band();
        let mut data = vec![0.0f32; dims.bins() * 16];
        let mut weight = vec![0.0f32; dims.bins()];
        let mut mask = vec![0u8; dims.bins()];
        data.par_chunks_mut(per_band * 16)
            .zip(weight.par_chunks_mut(per_band))
            .zip(mask.par_chunks_mut(per_band))
            .enumerate()
            .for_each(|(band, ((data, weight), mask))| {
                for p in 0..dims.phi_d {
                    for d in 0..dims.theta_d {
                        for h in 0..dims.theta_h {
                            let coord = RusinkiewiczCoord {
                                phi_d: dims.phi_d_of(p),
                                theta_d: dims.theta_d_of(d),
                                theta_h: dims.theta_h_of(h),
                            };
                            let (wi, wo) = from_rusinkiewicz(&coord);
                            if wi.z <= 1e-9 || wo.z <= 1e-9 {
                                continue;
                            }
                            let m = match pbrdf.eval(&wi, &wo, band) {
                                Ok(m) => m,
                                Err(_) => continue,
                            };
                            let bin = (p * dims.theta_d + d) * dims.theta_h + h;
                            weight[bin] = 1.0;
                            mask[bin] = 1;
                            for r in 0..4 {
                                for c in 0..4 {
                                    data[bin * 16 + r * 4 + c] = m.0[(r, c)] as f32;
                                }
                            }
                        }
                    }
                }
            });
        Ok(Self { dims, grid, data, weight, mask })
    }
}

const TABLE_MAGIC: &[u8; 4] = b"HPBT";
const TABLE_VERSION: u32 = 1;

fn read_exact_or_truncated(r: &mut impl Read, buf: &mut [u8]) -> Result<(), TableError> {
    r.read_exact(buf).map_err(|e| {
        if e.kind() == std::io::ErrorKind::UnexpectedEof {
            TableError::TruncatedFile
        } else {
            TableError::Io(e)
        }
    })
}

fn read_header_from(r: &mut impl Read) -> Result<(TableDims, WavelengthGrid), TableError> {
    let mut magic = [0u8; 4];
    read_exact_or_truncated(r, &mut magic)?;
    if &magic != TABLE_MAGIC {
        return Err(TableError::BadMagic);
    }
    let mut b4 = [0u8; 4];
    read_exact_or_truncated(r, &mut b4)?;
    let version = u32::from_le_bytes(b4);
    if version != TABLE_VERSION {
        return Err(TableError::UnsupportedVersion(version));
    }
    let mut dims_raw = [0usize; 4];
    for slot in dims_raw.iter_mut() {
        read_exact_or_truncated(r, &mut b4)?;
        *slot = u32::from_le_bytes(b4) as usize;
    }
    let dims = TableDims {
        bands: dims_raw[0],
        phi_d: dims_raw[1],
        theta_d: dims_raw[2],
        theta_h: dims_raw[3],
    };
    if !dims.valid() {
        return Err(TableError::DimMismatch(format!("degenerate table dims {dims:?}")));
    }
    let mut b8 = [0u8; 8];
    read_exact_or_truncated(r, &mut b8)?;
    let start_nm = f64::from_le_bytes(b8);
    read_exact_or_truncated(r, &mut b8)?;
    let step_nm = f64::from_le_bytes(b8);
    let grid = WavelengthGrid { start_nm, step_nm, count: dims.bands };
    Ok((dims, grid))
}

/// Header of a table file without its payload; cheap on files of any size.
pub fn read_table_header(path: &Path) -> Result<(TableDims, WavelengthGrid), TableError> {
    let mut r = BufReader::new(File::open(path)?);
    read_header_from(&mut r)
}

impl HpbrdfTable {
    /// Layout: magic, version, the four dims, wavelength start and step,
    /// matrix entries as little-endian f32 (band outermost, then phi_d,
    /// theta_d, theta_h, row-major 4x4), the weight plane as f32, then the
    /// occupancy mask packed eight bins per byte, low bit first.
    pub fn write(&self, path: &Path) -> Result<(), TableError> {
        let mut w = BufWriter::new(File::create(path)?);
        w.write_all(TABLE_MAGIC)?;
        w.write_all(&TABLE_VERSION.to_le_bytes())?;
        for dim in [self.dims.bands, self.dims.phi_d, self.dims.theta_d, self.dims.theta_h] {
            w.write_all(&(dim as u32).to_le_bytes())?;
        }
        w.write_all(&self.grid.start_nm.to_le_bytes())?;
        w.write_all(&self.grid.step_nm.to_le_bytes())?;
        let mut buf = Vec::with_capacity(1 << 16);
        for &v in &self.data {
            buf.extend_from_slice(&v.to_le_bytes());
            if buf.len() >= (1 << 16) {
                w.write_all(&buf)?;
                buf.clear();
            }
        }
        w.write_all(&buf)?;
        buf.clear();
        for &v in &self.weight {
            buf.extend_from_slice(&v.to_le_bytes());
            if buf.len() >= (1 << 16) {
                w.write_all(&buf)?;
                buf.clear();
            }
        }
        w.write_all(&buf)?;
        let mut packed = vec![0u8; self.mask.len().div_ceil(8)];
        for (i, &m) in self.mask.iter().enumerate() {
            if m != 0 {
                packed[i / 8] |= 1 << (i % 8);
            }
        }
        w.write_all(&packed)?;
        w.flush()?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self, TableError> {
        let mut r = BufReader::new(File::open(path)?);
        let (dims, grid) = read_header_from(&mut r)?;
        let bins = dims
            .bands
            .checked_mul(dims.phi_d)
            .and_then(|v| v.checked_mul(dims.theta_d))
            .and_then(|v| v.checked_mul(dims.theta_h))
            .ok_or_else(|| TableError::DimMismatch("table dimensions overflow".into()))?;

        let mut data = vec![0.0f32; bins * 16];
        let mut raw = vec![0u8; 1 << 16];
        let mut filled = 0;
        while filled < data.len() {
            let take = ((data.len() - filled) * 4).min(raw.len());
            read_exact_or_truncated(&mut r, &mut raw[..take])?;
            for chunk in raw[..take].chunks_exact(4) {
                data[filled] = f32::from_le_bytes(chunk.try_into().unwrap());
                filled += 1;
            }
        }
        let mut weight = vec![0.0f32; bins];
        filled = 0;
        while filled < weight.len() {
            let take = ((weight.len() - filled) * 4).min(raw.len());
            read_exact_or_truncated(&mut r, &mut raw[..take])?;
            for chunk in raw[..take].chunks_exact(4) {
                weight[filled] = f32::from_le_bytes(chunk.try_into().unwrap());
                filled += 1;
            }
        }
        let mut packed = vec![0u8; bins.div_ceil(8)];
        read_exact_or_truncated(&mut r, &mut packed)?;
        let mask = (0..bins).map(|i| (packed[i / 8] >> (i % 8)) & 1).collect();
        Ok(Self { dims, grid, data, weight, mask })
    }
}
