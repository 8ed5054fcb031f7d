//! Eigenvalues and null spaces for 4x4 real matrices.
//!
//! The validity test needs eigenvalues of matrices that are routinely
//! defective, exactly nilpotent, or scalar multiples of the identity; the
//! general-purpose iterative solvers available to us stall or bail out on
//! those, so this module carries a small shifted complex QR iteration
//! (Hessenberg reduction, Wilkinson shifts, Givens rotations) with a
//! characteristic-polynomial fallback, plus a complete-pivoting null-space
//! routine. Everything is deterministic and bounded.

use nalgebra::{Complex, Matrix4, Vector4};

type C = Complex<f64>;
type CMat = [[C; 4]; 4];

const ZERO: C = Complex { re: 0.0, im: 0.0 };

/// Eigenvalues of a real 4x4 matrix, unordered.
pub fn eigenvalues4(m: &Matrix4<f64>) -> [C; 4] {
    let scale = m.iter().fold(0.0f64, |a, v| a.max(v.abs()));
    if scale == 0.0 || !scale.is_finite() {
        return [ZERO; 4];
    }
    let mut h: CMat = [[ZERO; 4]; 4];
    for r in 0..4 {
        for c in 0..4 {
            h[r][c] = Complex::new(m[(r, c)] / scale, 0.0);
        }
    }
    hessenberg(&mut h);
    match qr_eigenvalues(&mut h) {
        Some(mut eig) => {
            for e in eig.iter_mut() {
                *e *= scale;
            }
            eig
        }
        None => char_poly_eigenvalues(&(m / scale)).map(|e| e * scale),
    }
}

fn givens(a: C, b: C) -> Option<(C, C, f64)> {
    let r = (a.norm_sqr() + b.norm_sqr()).sqrt();
    if r < 1e-300 {
        return None;
    }
    Some((a, b, r))
}

/// Similarity transform by the unitary rotation that maps (a, b) -> (r, 0)
/// in rows/columns i and j.
fn apply_rotation(h: &mut CMat, i: usize, j: usize, a: C, b: C, r: f64) {
    let (ac, bc) = (a.conj(), b.conj());
    for c in 0..4 {
        let (x, y) = (h[i][c], h[j][c]);
        h[i][c] = (ac * x + bc * y) / r;
        h[j][c] = (-b * x + a * y) / r;
    }
    for row in 0..4 {
        let (x, y) = (h[row][i], h[row][j]);
        h[row][i] = (x * a + y * b) / r;
        h[row][j] = (-x * bc + y * ac) / r;
    }
}

fn hessenberg(h: &mut CMat) {
    for col in 0..2 {
        for row in col + 2..4 {
            if h[row][col].norm_sqr() == 0.0 {
                continue;
            }
            if let Some((a, b, r)) = givens(h[col + 1][col], h[row][col]) {
                apply_rotation(h, col + 1, row, a, b, r);
                h[row][col] = ZERO;
            }
        }
    }
}

/// Eigenvalues of the trailing [[a, b], [c, d]] block; the first returned
/// value is the one closest to d (the Wilkinson shift).
fn two_by_two(a: C, b: C, c: C, d: C) -> (C, C) {
    let tr = a + d;
    let det = a * d - b * c;
    let disc = (tr * tr - det * 4.0).sqrt();
    let l1 = (tr + disc) * 0.5;
    let l2 = (tr - disc) * 0.5;
    if (l1 - d).norm() <= (l2 - d).norm() {
        (l1, l2)
    } else {
        (l2, l1)
    }
}

fn subdiag_negligible(h: &CMat, k: usize) -> bool {
    h[k][k - 1].norm() <= f64::EPSILON * (h[k - 1][k - 1].norm() + h[k][k].norm()) + 1e-300
}

fn qr_eigenvalues(h: &mut CMat) -> Option<[C; 4]> {
    let mut eig = [ZERO; 4];
    let mut hi = 3usize;
    let mut since_deflation = 0usize;
    let mut total = 0usize;

    loop {
        // Deflate every negligible subdiagonal in the active window.
        let mut lo = hi;
        while lo > 0 {
            if subdiag_negligible(h, lo) {
                h[lo][lo - 1] = ZERO;
                break;
            }
            lo -= 1;
        }

        let size = hi - lo + 1;
        if size == 1 {
            eig[hi] = h[hi][hi];
            if hi == 0 {
                return Some(eig);
            }
            hi -= 1;
            since_deflation = 0;
            continue;
        }
        if size == 2 {
            let (l1, l2) = two_by_two(h[lo][lo], h[lo][hi], h[hi][lo], h[hi][hi]);
            eig[hi] = l1;
            eig[lo] = l2;
            if lo == 0 {
                return Some(eig);
            }
            hi = lo - 1;
            since_deflation = 0;
            continue;
        }

        total += 1;
        since_deflation += 1;
        if total > 400 {
            return None;
        }
        let shift = if since_deflation % 16 == 0 {
            // Exceptional shift to break rare cycling.
            h[hi][hi] + Complex::new(0.75 * h[hi][hi - 1].norm(), 0.0)
        } else {
            two_by_two(
                h[hi - 1][hi - 1],
                h[hi - 1][hi],
                h[hi][hi - 1],
                h[hi][hi],
            )
            .0
        };

        // Implicit single-shift QR sweep over [lo, hi].
        let mut x = h[lo][lo] - shift;
        let mut z = h[lo + 1][lo];
        for k in lo..hi {
            if let Some((a, b, r)) = givens(x, z) {
                apply_rotation(h, k, k + 1, a, b, r);
            }
            if k + 2 <= hi {
                x = h[k + 1][k];
                z = h[k + 2][k];
            }
        }
        // Restore exact Hessenberg zeros below the subdiagonal.
        for r in 2..4 {
            for c in 0..r - 1 {
                h[r][c] = ZERO;
            }
        }
    }
}

/// Fallback: roots of the characteristic quartic via trace power sums and the
/// resolvent cubic. Accurate for well-separated roots only; the QR path above
/// is primary.
fn char_poly_eigenvalues(n: &Matrix4<f64>) -> [C; 4] {
    let n2 = n * n;
    let n3 = n2 * n;
    let n4 = n3 * n;
    let p1 = n.trace();
    let p2 = n2.trace();
    let p3 = n3.trace();
    let p4 = n4.trace();
    let e1 = p1;
    let e2 = (e1 * p1 - p2) / 2.0;
    let e3 = (e2 * p1 - e1 * p2 + p3) / 3.0;
    let e4 = (e3 * p1 - e2 * p2 + e1 * p3 - p4) / 4.0;
    let (a, b, c, d) = (-e1, e2, -e3, e4);
    let mut roots = solve_quartic(a, b, c, d);
    for r in roots.iter_mut() {
        *r = polish_root(*r, a, b, c, d);
    }
    roots
}

fn polish_root(mut x: C, a: f64, b: f64, c: f64, d: f64) -> C {
    for _ in 0..3 {
        let f = ((x + a) * x + b) * x * x + c * x + d;
        let df = ((x * 4.0 + 3.0 * a) * x + 2.0 * b) * x + c;
        if df.norm() < 1e-300 {
            break;
        }
        let step = f / df;
        if !step.re.is_finite() || !step.im.is_finite() {
            break;
        }
        x -= step;
    }
    x
}

fn solve_quartic(a: f64, b: f64, c: f64, d: f64) -> [C; 4] {
    let a2 = a * a;
    let p = b - 3.0 * a2 / 8.0;
    let q = c - a * b / 2.0 + a2 * a / 8.0;
    let r = d - a * c / 4.0 + a2 * b / 16.0 - 3.0 * a2 * a2 / 256.0;
    let shift = Complex::new(-a / 4.0, 0.0);
    let ys = if q.abs() < 1e-14 * (1.0 + p.abs() + r.abs()) {
        solve_biquadratic(p, r)
    } else {
        solve_depressed_quartic(p, q, r)
    };
    ys.map(|y| y + shift)
}

fn solve_biquadratic(p: f64, r: f64) -> [C; 4] {
    let disc = Complex::new(p * p - 4.0 * r, 0.0).sqrt();
    let u1 = (Complex::new(-p, 0.0) + disc) * 0.5;
    let u2 = (Complex::new(-p, 0.0) - disc) * 0.5;
    let s1 = u1.sqrt();
    let s2 = u2.sqrt();
    [s1, -s1, s2, -s2]
}

fn solve_depressed_quartic(p: f64, q: f64, r: f64) -> [C; 4] {
    let t = largest_real_cubic_root(8.0, -4.0 * p, -8.0 * r, 4.0 * p * r - q * q);
    let beta2 = (2.0 * t - p).max(0.0);
    let beta = beta2.sqrt();
    if beta < 1e-150 {
        return solve_biquadratic(p, r);
    }
    let gamma = q / (2.0 * beta);
    let (x1, x2) = solve_quadratic(1.0, -beta, t + gamma);
    let (x3, x4) = solve_quadratic(1.0, beta, t - gamma);
    [x1, x2, x3, x4]
}

fn solve_quadratic(a: f64, b: f64, c: f64) -> (C, C) {
    let disc = Complex::new(b * b - 4.0 * a * c, 0.0).sqrt();
    let sb = if b >= 0.0 { disc } else { -disc };
    let qq = (Complex::new(b, 0.0) + sb) * -0.5;
    let x1 = qq / a;
    let x2 = if qq.norm() > 1e-300 {
        Complex::new(c, 0.0) / qq
    } else {
        ZERO
    };
    (x1, x2)
}

fn largest_real_cubic_root(a: f64, b: f64, c: f64, d: f64) -> f64 {
    let b = b / a;
    let c = c / a;
    let d = d / a;
    let p = c - b * b / 3.0;
    let q = 2.0 * b * b * b / 27.0 - b * c / 3.0 + d;
    let shift = -b / 3.0;
    let disc = q * q / 4.0 + p * p * p / 27.0;
    let root = if disc > 0.0 {
        let s = disc.sqrt();
        signed_cbrt(-q / 2.0 + s) + signed_cbrt(-q / 2.0 - s)
    } else if p.abs() < 1e-300 {
        0.0
    } else {
        let m = 2.0 * (-p / 3.0).sqrt();
        let arg = (3.0 * q / (p * m)).clamp(-1.0, 1.0);
        let theta = arg.acos() / 3.0;
        (0..3)
            .map(|k| m * (theta - 2.0 * std::f64::consts::PI * k as f64 / 3.0).cos())
            .fold(f64::NEG_INFINITY, f64::max)
    };
    let mut t = root + shift;
    for _ in 0..2 {
        let f = ((t + b) * t + c) * t + d;
        let df = (3.0 * t + 2.0 * b) * t + c;
        if df.abs() > 1e-300 {
            t -= f / df;
        }
    }
    t
}

fn signed_cbrt(x: f64) -> f64 {
    x.signum() * x.abs().cbrt()
}

/// Orthonormal basis of the near-null space of `m`: directions whose
/// elimination pivots fall at or below `tol`. Always returns at least one
/// vector (the direction of the smallest pivot).
pub fn null_space4(m: &Matrix4<f64>, tol: f64) -> Vec<Vector4<f64>> {
    let mut a = *m;
    let mut col_perm = [0usize, 1, 2, 3];
    let mut rank = 0usize;

    for step in 0..4 {
        let (mut pr, mut pc, mut pv) = (step, step, -1.0);
        for r in step..4 {
            for c in step..4 {
                if a[(r, c)].abs() > pv {
                    pv = a[(r, c)].abs();
                    pr = r;
                    pc = c;
                }
            }
        }
        if pv <= tol {
            break;
        }
        a.swap_rows(step, pr);
        a.swap_columns(step, pc);
        col_perm.swap(step, pc);
        for r in step + 1..4 {
            let f = a[(r, step)] / a[(step, step)];
            for c in step..4 {
                a[(r, c)] -= f * a[(step, c)];
            }
        }
        rank += 1;
    }

    let n_null = (4 - rank).max(1);
    let rank = 4 - n_null;
    let mut basis = Vec::with_capacity(n_null);
    for free in rank..4 {
        let mut x = [0.0f64; 4];
        x[free] = 1.0;
        for row in (0..rank).rev() {
            let mut s = 0.0;
            for c in row + 1..4 {
                s += a[(row, c)] * x[c];
            }
            x[row] = -s / a[(row, row)];
        }
        let mut v = Vector4::zeros();
        for (permuted, value) in x.iter().enumerate() {
            v[col_perm[permuted]] = *value;
        }
        basis.push(v);
    }
    let mut ortho: Vec<Vector4<f64>> = Vec::with_capacity(basis.len());
    for mut v in basis {
        for u in &ortho {
            v -= u * u.dot(&v);
        }
        let n = v.norm();
        if n > 1e-300 {
            ortho.push(v / n);
        }
    }
    if ortho.is_empty() {
        ortho.push(Vector4::w());
    }
    ortho
}
