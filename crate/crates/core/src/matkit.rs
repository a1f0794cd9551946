//! Small dense linear-algebra kernel used by every recursion in the crate.
//!
//! Matrices are plain `nalgebra` dynamic matrices. The helpers here add the
//! pieces the filters need on top: SPD solves with a jitter ladder, a power
//! iteration spectral norm, PSD verification and symmetrization.

use alloc::format;
use alloc::vec::Vec;

use nalgebra::{Cholesky, DMatrix, DVector, Dyn, SymmetricEigen, SVD};

use crate::error::{Error, Result};
use crate::math;

/// Dense real matrix.
pub type Mat = DMatrix<f64>;
/// Dense real column vector.
pub type Vector = DVector<f64>;

/// Symmetry tolerance accepted by [`solve_spd`], relative to `1 + max|a_ij|`.
pub const SPD_SYMMETRY_TOL: f64 = 1e-9;

/// Jitter multipliers tried (times `trace / n`) when a plain factorization fails.
pub const JITTER_LADDER: [f64; 3] = [1e-12, 1e-10, 1e-8];

const POWER_MAX_ITER: usize = 500;
const POWER_TOL: f64 = 1e-7;

/// Build a matrix from row-major data, rejecting non-finite entries.
pub fn mat_from_rows(rows: usize, cols: usize, data: &[f64]) -> Result<Mat> {
    if rows * cols != data.len() {
        return Err(Error::DimMismatch {
            context: "mat_from_rows",
            expected: format!("{}", rows * cols),
            got: format!("{}", data.len()),
        });
    }
    if data.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("matrix construction"));
    }
    Ok(Mat::from_row_slice(rows, cols, data))
}

/// Build a vector, rejecting non-finite entries.
pub fn vector_from(data: &[f64]) -> Result<Vector> {
    if data.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("vector construction"));
    }
    Ok(Vector::from_column_slice(data))
}

pub fn all_finite(a: &Mat) -> bool {
    a.iter().all(|v| v.is_finite())
}

/// Largest absolute entry (0 for empty matrices).
pub fn max_abs(a: &Mat) -> f64 {
    a.iter().fold(0.0_f64, |m, v| m.max(v.abs()))
}

fn require_square(a: &Mat, context: &'static str) -> Result<()> {
    if a.nrows() != a.ncols() {
        return Err(Error::DimMismatch {
            context,
            expected: "square matrix".into(),
            got: format!("{}x{}", a.nrows(), a.ncols()),
        });
    }
    Ok(())
}

/// Returns `(A + Aᵀ) / 2`.
pub fn symmetrize(a: &Mat) -> Result<Mat> {
    require_square(a, "symmetrize")?;
    Ok((a + a.transpose()) * 0.5)
}

/// Cholesky factor of a symmetric positive definite matrix.
///
/// A failed plain factorization is retried with `λ·trace/n·I` added for
/// each `λ` in [`JITTER_LADDER`] before giving up with [`Error::NotSpd`].
pub fn cholesky_jittered(a: &Mat, context: &'static str) -> Result<Cholesky<f64, Dyn>> {
    require_square(a, context)?;
    if !all_finite(a) {
        return Err(Error::NonFinite(context));
    }
    let n = a.nrows();
    let scale = 1.0 + max_abs(a);
    let asym = (a - a.transpose()).iter().fold(0.0_f64, |m, v| m.max(v.abs()));
    if asym > SPD_SYMMETRY_TOL * scale {
        return Err(Error::NotSpd { context });
    }
    let sym = (a + a.transpose()) * 0.5;
    if let Some(c) = Cholesky::new(sym.clone()) {
        return Ok(c);
    }
    let trace = sym.trace();
    let unit = if trace > 0.0 && n > 0 { trace / n as f64 } else { 1.0 };
    for lambda in JITTER_LADDER {
        let mut jittered = sym.clone();
        for i in 0..n {
            jittered[(i, i)] += lambda * unit;
        }
        if let Some(c) = Cholesky::new(jittered) {
            return Ok(c);
        }
    }
    Err(Error::NotSpd { context })
}

/// Solve `A·X = B` for symmetric positive definite `A`.
pub fn solve_spd(a: &Mat, b: &Mat) -> Result<Mat> {
    if a.nrows() != b.nrows() {
        return Err(Error::DimMismatch {
            context: "solve_spd",
            expected: format!("{} rows", a.nrows()),
            got: format!("{} rows", b.nrows()),
        });
    }
    let chol = cholesky_jittered(a, "solve_spd")?;
    Ok(chol.solve(b))
}

/// Inverse of a symmetric positive definite matrix (jittered if needed).
pub fn inv_spd(a: &Mat, context: &'static str) -> Result<Mat> {
    let chol = cholesky_jittered(a, context)?;
    let inv = chol.inverse();
    Ok((&inv + inv.transpose()) * 0.5)
}

/// `B·A⁻¹` for SPD `A`, computed as `(A⁻¹·Bᵀ)ᵀ`.
pub fn right_solve_spd(b: &Mat, a: &Mat, context: &'static str) -> Result<Mat> {
    let chol = cholesky_jittered(a, context)?;
    Ok(chol.solve(&b.transpose()).transpose())
}

/// Largest singular value by power iteration on `AᵀA`.
///
/// Starts from the all-ones vector; if that vector lies in the null space
/// of `AᵀA` the heaviest column of `AᵀA` is used instead.
pub fn spectral_norm(a: &Mat) -> f64 {
    if a.is_empty() {
        return 0.0;
    }
    let ata = a.transpose() * a;
    let n = ata.nrows();
    let mut v = Vector::from_element(n, 1.0 / math::sqrt(n as f64));
    let mut w = &ata * &v;
    if w.norm() <= f64::MIN_POSITIVE {
        let best = (0..n)
            .max_by(|&i, &j| ata.column(i).norm().total_cmp(&ata.column(j).norm()))
            .unwrap_or(0);
        let col = ata.column(best).into_owned();
        let norm = col.norm();
        if norm <= f64::MIN_POSITIVE {
            return 0.0;
        }
        v = col / norm;
        w = &ata * &v;
    }
    let mut lambda = v.dot(&w);
    for _ in 0..POWER_MAX_ITER {
        let norm = w.norm();
        if norm <= f64::MIN_POSITIVE {
            break;
        }
        v = w / norm;
        w = &ata * &v;
        let next = v.dot(&w);
        // iterate well past the target accuracy; the loop is cheap for small matrices
        let done = (next - lambda).abs() <= POWER_TOL * POWER_TOL * next.abs();
        lambda = next;
        if done {
            break;
        }
    }
    math::sqrt(lambda.max(0.0))
}

/// Eigenvalues of the symmetric part of `a`, ascending.
pub fn sym_eigenvalues(a: &Mat) -> Result<Vec<f64>> {
    require_square(a, "sym_eigenvalues")?;
    if a.is_empty() {
        return Ok(Vec::new());
    }
    let sym = symmetrize(a)?;
    let mut vals: Vec<f64> = SymmetricEigen::new(sym).eigenvalues.iter().copied().collect();
    vals.sort_by(f64::total_cmp);
    Ok(vals)
}

pub fn min_eigenvalue(a: &Mat) -> Result<f64> {
    Ok(sym_eigenvalues(a)?.first().copied().unwrap_or(0.0))
}

pub fn max_eigenvalue(a: &Mat) -> Result<f64> {
    Ok(sym_eigenvalues(a)?.last().copied().unwrap_or(0.0))
}

/// True iff `a` is symmetric within `tol` and its smallest eigenvalue is at least `-tol`.
pub fn psd_check(a: &Mat, tol: f64) -> Result<bool> {
    require_square(a, "psd_check")?;
    if !all_finite(a) {
        return Ok(false);
    }
    let asym = (a - a.transpose()).iter().fold(0.0_f64, |m, v| m.max(v.abs()));
    if asym > tol {
        return Ok(false);
    }
    Ok(min_eigenvalue(a)? >= -tol)
}

/// Factor `C` with `CᵀC = A` for a symmetric PSD `A`.
///
/// Uses the eigen-decomposition `A = VΛVᵀ` and returns `C = Λ^{1/2}Vᵀ`
/// with negative eigenvalues clipped at zero.
pub fn psd_factor(a: &Mat) -> Result<Mat> {
    require_square(a, "psd_factor")?;
    let n = a.nrows();
    if n == 0 {
        return Ok(Mat::zeros(0, 0));
    }
    let eig = SymmetricEigen::new(symmetrize(a)?);
    let mut c = eig.eigenvectors.transpose();
    for i in 0..n {
        let s = math::sqrt(eig.eigenvalues[i].max(0.0));
        c.row_mut(i).scale_mut(s);
    }
    Ok(c)
}

/// Singular values, descending.
pub fn singular_values(a: &Mat) -> Vec<f64> {
    if a.is_empty() {
        return Vec::new();
    }
    let mut s: Vec<f64> = SVD::new(a.clone(), false, false)
        .singular_values
        .iter()
        .copied()
        .collect();
    s.sort_by(|x, y| y.total_cmp(x));
    s
}

/// Numerical rank: number of singular values above `rel_tol · σ_max`.
pub fn numerical_rank(a: &Mat, rel_tol: f64) -> usize {
    let s = singular_values(a);
    let smax = s.first().copied().unwrap_or(0.0);
    if smax <= 0.0 {
        return 0;
    }
    s.iter().filter(|&&v| v > rel_tol * smax).count()
}

/// Largest eigenvalue modulus of a general square matrix.
pub fn spectral_radius(a: &Mat) -> Result<f64> {
    require_square(a, "spectral_radius")?;
    if a.is_empty() {
        return Ok(0.0);
    }
    if !all_finite(a) {
        return Err(Error::NonFinite("spectral_radius"));
    }
    let eig = a.clone().complex_eigenvalues();
    Ok(eig.iter().fold(0.0_f64, |m, z| m.max(math::sqrt(z.re * z.re + z.im * z.im))))
}

/// Block-diagonal matrix `diag(a, b)`.
pub fn block_diag(a: &Mat, b: &Mat) -> Mat {
    let (ra, ca) = a.shape();
    let (rb, cb) = b.shape();
    let mut out = Mat::zeros(ra + rb, ca + cb);
    out.view_mut((0, 0), (ra, ca)).copy_from(a);
    out.view_mut((ra, ca), (rb, cb)).copy_from(b);
    out
}

/// Stack two vectors vertically.
pub fn concat(a: &Vector, b: &Vector) -> Vector {
    let mut out = Vector::zeros(a.len() + b.len());
    out.rows_mut(0, a.len()).copy_from(a);
    out.rows_mut(a.len(), b.len()).copy_from(b);
    out
}

/// `A + δ·I` (returns `A` unchanged when `δ == 0`).
pub fn add_identity(a: &Mat, delta: f64) -> Mat {
    let mut out = a.clone();
    if delta != 0.0 {
        for i in 0..out.nrows().min(out.ncols()) {
            out[(i, i)] += delta;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gauss_jordan_inverse(a: &Mat) -> Mat {
        let n = a.nrows();
        let mut aug = Mat::zeros(n, 2 * n);
        aug.view_mut((0, 0), (n, n)).copy_from(a);
        for i in 0..n {
            aug[(i, n + i)] = 1.0;
        }
        for col in 0..n {
            let pivot = (col..n)
                .max_by(|&i, &j| aug[(i, col)].abs().total_cmp(&aug[(j, col)].abs()))
                .unwrap();
            aug.swap_rows(col, pivot);
            let p = aug[(col, col)];
            for j in 0..2 * n {
                aug[(col, j)] /= p;
            }
            for i in 0..n {
                if i != col {
                    let f = aug[(i, col)];
                    for j in 0..2 * n {
                        aug[(i, j)] -= f * aug[(col, j)];
                    }
                }
            }
        }
        aug.view((0, n), (n, n)).into_owned()
    }

    #[test]
    fn solve_spd_identity_and_scaled() {
        let b = mat_from_rows(2, 1, &[1.0, 2.0]).unwrap();
        let x = solve_spd(&Mat::identity(2, 2), &b).unwrap();
        assert_eq!(x, b);
        let b2 = mat_from_rows(2, 1, &[2.0, 4.0]).unwrap();
        let x2 = solve_spd(&(Mat::identity(2, 2) * 2.0), &b2).unwrap();
        assert!((x2 - b).abs().max() < 1e-15);
    }

    #[test]
    fn solve_spd_matches_gauss_jordan() {
        let c = mat_from_rows(
            4,
            4,
            &[
                1.0, 0.3, -0.2, 0.5, 0.1, 2.0, 0.4, -0.3, 0.7, -0.6, 1.5, 0.2, -0.1, 0.9, 0.3, 1.1,
            ],
        )
        .unwrap();
        let a = &c * c.transpose() + Mat::identity(4, 4) * 0.5;
        let x = solve_spd(&a, &Mat::identity(4, 4)).unwrap();
        let oracle = gauss_jordan_inverse(&a);
        assert!((&x - &oracle).abs().max() < 1e-10);
        assert!((&a * &x - Mat::identity(4, 4)).abs().max() < 1e-8);
    }

    #[test]
    fn solve_spd_rejects_indefinite_and_mismatch() {
        let a = mat_from_rows(2, 2, &[1.0, 2.0, 2.0, 1.0]).unwrap();
        let b = Mat::identity(2, 2);
        assert!(matches!(solve_spd(&a, &b), Err(Error::NotSpd { .. })));
        assert!(matches!(
            solve_spd(&Mat::identity(2, 2), &Mat::identity(3, 3)),
            Err(Error::DimMismatch { .. })
        ));
    }

    #[test]
    fn jitter_rescues_semidefinite() {
        // rank-one PSD matrix: plain Cholesky fails, the jitter ladder succeeds
        let v = Vector::from_column_slice(&[1.0, 2.0]);
        let a = &v * v.transpose();
        assert!(cholesky_jittered(&a, "test").is_ok());
    }

    #[test]
    fn spectral_norm_examples() {
        assert!((spectral_norm(&Mat::identity(3, 3)) - 1.0).abs() < 1e-12);
        let d = mat_from_rows(2, 2, &[3.0, 0.0, 0.0, -1.0]).unwrap();
        assert!((spectral_norm(&d) - 3.0).abs() < 3e-7);
        // AᵀA = diag(0, 1) so σ_max = 1
        let nil = mat_from_rows(2, 2, &[0.0, 1.0, 0.0, 0.0]).unwrap();
        let ata = nil.transpose() * &nil;
        let oracle = SymmetricEigen::new(ata).eigenvalues.max().sqrt();
        assert!((spectral_norm(&nil) - oracle).abs() < 1e-7);
        assert!((spectral_norm(&nil) - 1.0).abs() < 1e-7);
    }

    #[test]
    fn spectral_norm_start_vector_in_null_space() {
        let a = mat_from_rows(1, 2, &[1.0, -1.0]).unwrap();
        assert!((spectral_norm(&a) - 2f64.sqrt()).abs() < 1e-9);
    }

    #[test]
    fn psd_check_examples() {
        assert!(psd_check(&Mat::identity(2, 2), 1e-9).unwrap());
        // eigenvalues of [[1,2],[2,1]] are (tr ± sqrt(tr² - 4 det)) / 2 = {3, -1}
        let a = mat_from_rows(2, 2, &[1.0, 2.0, 2.0, 1.0]).unwrap();
        let (tr, det) = (2.0_f64, 1.0 - 4.0);
        let lo = (tr - (tr * tr - 4.0 * det).sqrt()) / 2.0;
        assert_eq!(lo, -1.0);
        assert!(!psd_check(&a, 1e-9).unwrap());
        // det 2 > 0 and trace 5 > 0
        let b = mat_from_rows(2, 2, &[2.0, -2.0, -2.0, 3.0]).unwrap();
        assert!(psd_check(&b, 1e-9).unwrap());
        assert!(psd_check(&Mat::zeros(2, 3), 1e-9).is_err());
    }

    #[test]
    fn symmetrize_examples() {
        assert_eq!(symmetrize(&Mat::identity(2, 2)).unwrap(), Mat::identity(2, 2));
        let a = mat_from_rows(2, 2, &[1.0, 2.0, 0.0, 1.0]).unwrap();
        assert_eq!(symmetrize(&a).unwrap(), Mat::from_element(2, 2, 1.0));
        assert!(symmetrize(&Mat::zeros(1, 2)).is_err());
    }

    #[test]
    fn constructor_invariants() {
        assert!(mat_from_rows(2, 2, &[1.0, 2.0, 3.0]).is_err());
        assert!(mat_from_rows(1, 2, &[1.0, f64::NAN]).is_err());
        assert!(vector_from(&[f64::INFINITY]).is_err());
    }

    #[test]
    fn rank_and_radius() {
        let a = mat_from_rows(2, 2, &[1.0, 2.0, 2.0, 4.0]).unwrap();
        assert_eq!(numerical_rank(&a, 1e-10), 1);
        let r = mat_from_rows(2, 2, &[0.0, -1.1, 1.1, 0.0]).unwrap();
        assert!((spectral_radius(&r).unwrap() - 1.1).abs() < 1e-12);
    }

    #[test]
    fn psd_factor_reconstructs() {
        let v = Vector::from_column_slice(&[1.0, -100.0]);
        let q = &v * v.transpose() * 0.01;
        let c = psd_factor(&q).unwrap();
        assert!((c.transpose() * &c - &q).abs().max() < 1e-9);
    }
}
