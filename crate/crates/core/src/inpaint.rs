//! Mask-aware hole filling for tabulated BRDFs.
//!
//! Empty bins get the Gaussian-weighted mean of the occupied bins around
//! them: both the data and the occupancy mask are blurred with the same
//! separable kernel and the ratio is taken, so holes never average in the
//! zeros that pad them. Bins that hold measured data are copied through
//! untouched. If a pass leaves bins unfilled because the kernel support
//! never reached an occupied bin, the support doubles and the pass repeats.

use rayon::prelude::*;

use crate::table::{HpbrdfTable, TableError};

pub const DEFAULT_INPAINT_SIGMA: [f64; 3] = [2.0, 2.0, 2.0];

/// One wavelength band's (phi_d, theta_d, theta_h) volume with 17 channels:
/// the 16 masked matrix entries plus the mask itself.
struct BandVolume {
    np: usize,
    nd: usize,
    nh: usize,
    channels: Vec<f64>,
}

const CHANNELS: usize = 17;

impl BandVolume {
    fn bin(&self, p: usize, d: usize, h: usize) -> usize {
        (p * self.nd + d) * self.nh + h
    }

    /// Separable truncated-Gaussian blur along all three axes.
    fn blur(&mut self, sigma: [f64; 3]) {
        let kernels: Vec<Vec<f64>> = sigma
            .iter()
            .map(|&s| {
                let radius = (3.0 * s).ceil().max(1.0) as i64;
                (-radius..=radius)
                    .map(|d| (-0.5 * (d as f64 / s).powi(2)).exp())
                    .collect()
            })
            .collect();
        let (np, nd, nh) = (self.np, self.nd, self.nh);
        self.blur_axis(&kernels[0], np, |vol, i, other| {
            let (d, h) = (other / nh, other % nh);
            vol.bin(i, d, h)
        });
        self.blur_axis(&kernels[1], nd, |vol, i, other| {
            let (p, h) = (other / nh, other % nh);
            vol.bin(p, i, h)
        });
        self.blur_axis(&kernels[2], nh, |vol, i, other| {
            let (p, d) = (other / nd, other % nd);
            vol.bin(p, d, i)
        });
    }

    fn blur_axis(
        &mut self,
        kernel: &[f64],
        len: usize,
        index: impl Fn(&Self, usize, usize) -> usize,
    ) {
        let radius = (kernel.len() / 2) as i64;
        let other_count = self.np * self.nd * self.nh / len;
        let mut line = vec![0.0f64; len * CHANNELS];
        for other in 0..other_count {
            for i in 0..len {
                let bin = index(self, i, other);
                line[i * CHANNELS..(i + 1) * CHANNELS]
                    .copy_from_slice(&self.channels[bin * CHANNELS..(bin + 1) * CHANNELS]);
            }
            for i in 0..len {
                let mut acc = [0.0f64; CHANNELS];
                for (k, &w) in kernel.iter().enumerate() {
                    let j = i as i64 + k as i64 - radius;
                    if j < 0 || j >= len as i64 {
                        continue;
                    }
                    let src = &line[j as usize * CHANNELS..(j as usize + 1) * CHANNELS];
                    for (a, &v) in acc.iter_mut().zip(src) {
                        *a += w * v;
                    }
                }
                let bin = index(self, i, other);
                self.channels[bin * CHANNELS..(bin + 1) * CHANNELS].copy_from_slice(&acc);
            }
        }
    }
}

/// Fills every empty bin from its occupied neighborhood. Occupied bins pass
/// through bit-identically; filled bins keep zero weight so provenance stays
/// readable from the weight plane. Errors with EmptyTable when some band has
/// nothing to extrapolate from.
pub fn inpaint(table: &HpbrdfTable, sigma: [f64; 3]) -> Result<HpbrdfTable, TableError> {
    for (axis, &s) in sigma.iter().enumerate() {
        if !(s > 0.0 && s.is_finite()) {
            return Err(TableError::DimMismatch(format!(
                "inpaint sigma for axis {axis} must be positive, got {s}"
            )));
        }
    }
    let dims = table.dims;
    let per_band = dims.bins_per_band();
    for band in 0..dims.bands {
        let occupied =
            table.mask[band * per_band..(band + 1) * per_band].iter().any(|&m| m != 0);
        if !occupied {
            return Err(TableError::EmptyTable);
        }
    }

    let mut out = HpbrdfTable {
        dims,
        grid: table.grid,
        data: table.data.clone(),
        weight: table.weight.clone(),
        mask: table.mask.clone(),
    };

    out.data
        .par_chunks_mut(per_band * 16)
        .zip(out.mask.par_chunks_mut(per_band))
        .for_each(|(data, mask)| {
            let measured: Vec<u8> = mask.to_vec();
            let mut scale = 1.0;
            // Each round convolves the measured bins only, so filled values
            // never cascade; unreached bins wait for a wider kernel. The
            // round cap is unreachable with the occupancy check above.
            for _ in 0..48 {
                if mask.iter().all(|&m| m != 0) {
                    break;
                }
                let mut vol = BandVolume {
                    np: dims.phi_d,
                    nd: dims.theta_d,
                    nh: dims.theta_h,
                    channels: vec![0.0; per_band * CHANNELS],
                };
                for bin in 0..per_band {
                    if measured[bin] != 0 {
                        for e in 0..16 {
                            vol.channels[bin * CHANNELS + e] = data[bin * 16 + e] as f64;
                        }
                        vol.channels[bin * CHANNELS + 16] = 1.0;
                    }
                }
                vol.blur([sigma[0] * scale, sigma[1] * scale, sigma[2] * scale]);
                for bin in 0..per_band {
                    if mask[bin] != 0 {
                        continue;
                    }
                    let den = vol.channels[bin * CHANNELS + 16];
                    if den > 1e-12 {
                        for e in 0..16 {
                            data[bin * 16 + e] = (vol.channels[bin * CHANNELS + e] / den) as f32;
                        }
                        mask[bin] = 1;
                    }
                }
                scale *= 2.0;
            }
        });
    Ok(out)
}
