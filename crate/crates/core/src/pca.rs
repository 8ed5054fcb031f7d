//! Principal-component analysis over 2D slices of the reflectance table.
//!
//! A slice spec picks two table axes as the feature grid; every combination
//! of the remaining two axes and the 17 value channels (16 Mueller entries
//! divided by m00, plus m00 itself) becomes one sample. The eigendecomposition
//! runs on whichever of the covariance or Gram matrix is smaller.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use thiserror::Error;

use crate::table::HpbrdfTable;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TableAxis {
    Lambda,
    PhiD,
    ThetaD,
    ThetaH,
}

/// Which two axes span each feature image: `rows` is the slower index.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SliceSpec {
    pub rows: TableAxis,
    pub cols: TableAxis,
}

#[derive(Debug, Error)]
pub enum PcaError {
    #[error("need at least {needed} samples for the requested components, got {samples}")]
    InsufficientSamples { samples: usize, needed: usize },
    #[error("slice axes must be two distinct table axes")]
    AxesNotDistinct,
    #[error("requested zero components")]
    NoComponentsRequested,
}

pub struct PcaResult {
    /// Shape of one feature image; (feature length, 1) for raw sample input.
    pub feature_rows: usize,
    pub feature_cols: usize,
    pub mean: DVector<f64>,
    /// One orthonormal column per component, most variance first.
    pub components: DMatrix<f64>,
    /// Sample variance along each component, non-increasing.
    pub explained_variance: Vec<f64>,
    /// Trace of the sample covariance; the curve's normalizer.
    pub total_variance: f64,
}

impl PcaResult {
    pub fn n_components(&self) -> usize {
        self.components.ncols()
    }

    /// Coefficients of a feature vector in the component basis.
    pub fn project(&self, sample: &DVector<f64>) -> DVector<f64> {
        self.components.transpose() * (sample - &self.mean)
    }

    pub fn reconstruct(&self, coefficients: &DVector<f64>) -> DVector<f64> {
        &self.mean + &self.components * coefficients
    }

    /// Fraction of total variance captured by the first `k` components.
    pub fn cumulative_fraction(&self, k: usize) -> f64 {
        if self.total_variance <= 0.0 {
            return 1.0;
        }
        let sum: f64 = self.explained_variance.iter().take(k).sum();
        (sum / self.total_variance).min(1.0)
    }
}

/// Writes `component,explained_variance,cumulative_fraction` rows.
pub fn write_variance_csv<W: std::io::Write>(
    result: &PcaResult,
    mut out: W,
) -> std::io::Result<()> {
    writeln!(out, "component,explained_variance,cumulative_fraction")?;
    for i in 0..result.explained_variance.len() {
        writeln!(
            out,
            "{},{},{}",
            i + 1,
            result.explained_variance[i],
            result.cumulative_fraction(i + 1)
        )?;
    }
    Ok(())
}

fn sorted_eigen(matrix: DMatrix<f64>) -> (Vec<f64>, DMatrix<f64>) {
    let eig = SymmetricEigen::new(matrix);
    let mut order: Vec<usize> = (0..eig.eigenvalues.len()).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let values = order.iter().map(|&i| eig.eigenvalues[i].max(0.0)).collect();
    let vectors = DMatrix::from_fn(eig.eigenvectors.nrows(), order.len(), |r, c| {
        eig.eigenvectors[(r, order[c])]
    });
    (values, vectors)
}

/// Deterministic orthonormal completion for components past the data rank.
fn orthonormal_fill(components: &mut DMatrix<f64>, col: usize) {
    let p = components.nrows();
    for basis in 0..p {
        let mut v = DVector::zeros(p);
        v[basis] = 1.0;
        for prior in 0..col {
            let prev = components.column(prior);
            let dot = prev.dot(&v);
            v -= prev * dot;
        }
        let norm = v.norm();
        if norm > 1e-6 {
            components.set_column(col, &(v / norm));
            return;
        }
    }
}

/// PCA of a sample matrix with one row per sample.
pub fn pca_samples(samples: &DMatrix<f64>, n_components: usize) -> Result<PcaResult, PcaError> {
    if n_components == 0 {
        return Err(PcaError::NoComponentsRequested);
    }
    let n = samples.nrows();
    let p = samples.ncols();
    let needed = (n_components + 1).max(2);
    if n < needed || p < n_components {
        return Err(PcaError::InsufficientSamples { samples: n, needed });
    }

    let mean = DVector::from_fn(p, |j, _| samples.column(j).sum() / n as f64);
    let mut centered = samples.clone_owned();
    for mut row in centered.row_iter_mut() {
        row -= mean.transpose();
    }
    let denom = (n - 1) as f64;
    let total_variance = centered.iter().map(|v| v * v).sum::<f64>() / denom;

    let mut components = DMatrix::zeros(p, n_components);
    let mut explained = vec![0.0; n_components];
    if p <= n {
        let (values, vectors) = sorted_eigen(centered.transpose() * &centered);
        for k in 0..n_components {
            explained[k] = values[k] / denom;
            components.set_column(k, &vectors.column(k));
        }
    } else {
        // Gram route: same nonzero spectrum, much smaller eigenproblem.
        let (values, vectors) = sorted_eigen(&centered * centered.transpose());
        let scale = values.first().copied().unwrap_or(0.0);
        for k in 0..n_components {
            explained[k] = values[k] / denom;
            let v = centered.transpose() * vectors.column(k);
            let norm = v.norm();
            if norm > 1e-12 * scale.sqrt().max(1.0) {
                components.set_column(k, &(v / norm));
            } else {
                orthonormal_fill(&mut components, k);
            }
        }
    }

    Ok(PcaResult {
        feature_rows: p,
        feature_cols: 1,
        mean,
        components,
        explained_variance: explained,
        total_variance,
    })
}

fn axis_len(table: &HpbrdfTable, axis: TableAxis) -> usize {
    match axis {
        TableAxis::Lambda => table.dims.bands,
        TableAxis::PhiD => table.dims.phi_d,
        TableAxis::ThetaD => table.dims.theta_d,
        TableAxis::ThetaH => table.dims.theta_h,
    }
}

fn axis_slot(axis: TableAxis) -> usize {
    match axis {
        TableAxis::Lambda => 0,
        TableAxis::PhiD => 1,
        TableAxis::ThetaD => 2,
        TableAxis::ThetaH => 3,
    }
}

/// PCA over one 2D slicing of the table. Each sample fixes the two
/// non-selected axes and one of the 17 channels; empty bins contribute 0.
pub fn pca_table(
    table: &HpbrdfTable,
    slice: SliceSpec,
    n_components: usize,
) -> Result<PcaResult, PcaError> {
    if slice.rows == slice.cols {
        return Err(PcaError::AxesNotDistinct);
    }
    let all = [
        TableAxis::Lambda,
        TableAxis::PhiD,
        TableAxis::ThetaD,
        TableAxis::ThetaH,
    ];
    let rest: Vec<TableAxis> = all
        .into_iter()
        .filter(|a| *a != slice.rows && *a != slice.cols)
        .collect();
    let (nr, nc) = (axis_len(table, slice.rows), axis_len(table, slice.cols));
    let (na, nb) = (axis_len(table, rest[0]), axis_len(table, rest[1]));
    let channels = 17usize;

    let mut samples = DMatrix::zeros(na * nb * channels, nr * nc);
    let mut idx = [0usize; 4];
    for a in 0..na {
        idx[axis_slot(rest[0])] = a;
        for b in 0..nb {
            idx[axis_slot(rest[1])] = b;
            for ch in 0..channels {
                let row = (a * nb + b) * channels + ch;
                for i in 0..nr {
                    idx[axis_slot(slice.rows)] = i;
                    for j in 0..nc {
                        idx[axis_slot(slice.cols)] = j;
                        let bin = table.dims.bin_index(idx[0], idx[1], idx[2], idx[3]);
                        let m00 = table.data[bin * 16] as f64;
                        let value = if ch == 16 {
                            m00
                        } else if m00.abs() > 1e-12 {
                            table.data[bin * 16 + ch] as f64 / m00
                        } else {
                            0.0
                        };
                        samples[(row, i * nc + j)] = value;
                    }
                }
            }
        }
    }

    let mut result = pca_samples(&samples, n_components)?;
    result.feature_rows = nr;
    result.feature_cols = nc;
    Ok(result)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::analytic::AnalyticPbrdf;
    use crate::fresnel::SpectralIor;
    use crate::spectrum::WavelengthGrid;
    use crate::table::{HpbrdfTable, TableDims};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_orthonormal_pair(p: usize, rng: &mut ChaCha8Rng) -> (DVector<f64>, DVector<f64>) {
        let a = DVector::<f64>::from_fn(p, |_, _| rng.gen_range(-1.0..1.0));
        let a = a.clone() / a.norm();
        let mut b = DVector::<f64>::from_fn(p, |_, _| rng.gen_range(-1.0..1.0));
        let dot = a.dot(&b);
        b -= &a * dot;
        let b = b.clone() / b.norm();
        (a, b)
    }

    fn rank2_samples(
        n: usize,
        p: usize,
        rng: &mut ChaCha8Rng,
    ) -> (DMatrix<f64>, DVector<f64>, DVector<f64>) {
        let (u1, u2) = random_orthonormal_pair(p, rng);
        let mut x = DMatrix::zeros(n, p);
        for i in 0..n {
            let (c1, c2) = (rng.gen_range(-3.0..3.0), rng.gen_range(-1.0..1.0));
            for j in 0..p {
                x[(i, j)] = 0.5 + c1 * u1[j] + c2 * u2[j];
            }
        }
        (x, u1, u2)
    }

    #[test]
    fn rank_two_data_is_fully_explained_by_two_components() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (x, _, _) = rank2_samples(60, 20, &mut rng);
        let r = pca_samples(&x, 2).unwrap();
        let captured: f64 = r.explained_variance.iter().sum();
        assert!(
            (captured - r.total_variance).abs() <= 1e-9 * r.total_variance,
            "rank-2 data left variance behind: {} of {}",
            captured,
            r.total_variance
        );
        for i in 0..x.nrows() {
            let s = x.row(i).transpose();
            let back = r.reconstruct(&r.project(&s));
            assert!((back - &s).norm() < 1e-9);
        }
    }

    #[test]
    fn variance_curve_is_non_increasing_and_components_orthonormal() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for (n, p, k) in [(40, 15, 10), (12, 60, 8)] {
            let x = DMatrix::from_fn(n, p, |_, _| rng.gen_range(-1.0..1.0));
            let r = pca_samples(&x, k).unwrap();
            for w in r.explained_variance.windows(2) {
                assert!(w[1] <= w[0] + 1e-12);
            }
            let gram = r.components.transpose() * &r.components;
            assert!((gram - DMatrix::identity(k, k)).norm() < 1e-8);
        }
    }

    #[test]
    fn reconstruction_error_shrinks_with_more_components() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x = DMatrix::from_fn(30, 12, |_, _| rng.gen_range(-1.0..1.0));
        let mut last = f64::INFINITY;
        for k in 1..=6 {
            let r = pca_samples(&x, k).unwrap();
            let mut err = 0.0;
            for i in 0..x.nrows() {
                let s = x.row(i).transpose();
                err += (r.reconstruct(&r.project(&s)) - s).norm_squared();
            }
            assert!(err <= last + 1e-9, "k={k} error {err} grew past {last}");
            last = err;
        }
    }

    #[test]
    fn noisy_rank_two_subspace_is_recovered_within_five_degrees() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let (mut x, u1, u2) = rank2_samples(200, 24, &mut rng);
        let signal_rms = (x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64).sqrt();
        let noise = signal_rms / 100.0;
        for v in x.iter_mut() {
            *v += rng.gen_range(-noise..noise);
        }
        let r = pca_samples(&x, 2).unwrap();
        let mut basis = DMatrix::zeros(24, 2);
        basis.set_column(0, &u1);
        basis.set_column(1, &u2);
        let overlap = r.components.transpose() * basis;
        let sigma_min = overlap
            .svd(false, false)
            .singular_values
            .iter()
            .fold(f64::INFINITY, |a, &b| a.min(b));
        let angle = sigma_min.clamp(-1.0, 1.0).acos();
        assert!(angle < 5f64.to_radians(), "subspace angle {angle}");
    }

    #[test]
    fn sample_shortage_and_bad_specs_are_rejected() {
        let x = DMatrix::from_element(2, 5, 1.0);
        assert!(matches!(
            pca_samples(&x, 4),
            Err(PcaError::InsufficientSamples { .. })
        ));
        assert!(matches!(
            pca_samples(&x, 0),
            Err(PcaError::NoComponentsRequested)
        ));
        let table = tiny_table();
        assert!(matches!(
            pca_table(
                &table,
                SliceSpec { rows: TableAxis::ThetaH, cols: TableAxis::ThetaH },
                2
            ),
            Err(PcaError::AxesNotDistinct)
        ));
    }

    fn tiny_table() -> HpbrdfTable {
        let dims = TableDims { bands: 2, phi_d: 3, theta_d: 3, theta_h: 3 };
        let grid = WavelengthGrid { start_nm: 500.0, step_nm: 10.0, count: 2 };
        let bins = dims.bins();
        HpbrdfTable {
            dims,
            grid,
            data: vec![1.0; bins * 16],
            weight: vec![1.0; bins],
            mask: vec![1; bins],
        }
    }

    fn desk_oracle_table() -> HpbrdfTable {
        let bands = 8;
        let grid = WavelengthGrid { start_nm: 450.0, step_nm: 60.0, count: bands };
        let eta: Vec<f64> = (0..bands).map(|b| 1.45 + 0.02 * b as f64).collect();
        let albedo: Vec<f64> = (0..bands).map(|b| 0.2 + 0.07 * b as f64).collect();
        let material = AnalyticPbrdf::new(
            SpectralIor::new(eta, vec![0.0; bands]).unwrap(),
            albedo,
            0.25,
            0.25,
        )
        .unwrap();
        let dims = TableDims { bands, phi_d: 45, theta_d: 17, theta_h: 17 };
        HpbrdfTable::from_analytic(&material, dims, grid).unwrap()
    }

    #[test]
    fn angular_slices_compress_better_than_spectral_slices() {
        let table = desk_oracle_table();
        let angular = pca_table(
            &table,
            SliceSpec { rows: TableAxis::ThetaD, cols: TableAxis::ThetaH },
            2,
        )
        .unwrap();
        let spectral = pca_table(
            &table,
            SliceSpec { rows: TableAxis::ThetaH, cols: TableAxis::Lambda },
            2,
        )
        .unwrap();
        assert_eq!(angular.feature_rows, 17);
        assert_eq!(angular.feature_cols, 17);
        let a2 = angular.cumulative_fraction(2);
        let s2 = spectral.cumulative_fraction(2);
        eprintln!("cumulative fraction at 2 components: angular {a2:.4}, spectral {s2:.4}");
        assert!(
            a2 > s2,
            "angular slices should compress better: {a2} vs {s2}"
        );
    }

    #[test]
    fn variance_csv_lists_every_component() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = DMatrix::from_fn(20, 6, |_, _| rng.gen_range(-1.0..1.0));
        let r = pca_samples(&x, 3).unwrap();
        let mut buf = Vec::new();
        write_variance_csv(&r, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 4);
        assert!(lines[0].starts_with("component,"));
        assert!(lines[3].starts_with("3,"));
    }
}
