//! Small dense linear-algebra helpers on top of nalgebra.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{Error, Result};

/// Smallest and largest relative jitter tried on a failed factorization.
pub const JITTER_START: f64 = 1e-10;
pub const JITTER_MAX: f64 = 1e-4;

/// Lower Cholesky factor of `a`, retrying with diagonal jitter.
///
/// Jitter starts at `1e-10 * mean(diag)` and grows by 10x up to
/// `1e-4 * mean(diag)`. Returns the factor and the absolute jitter used.
pub fn cholesky_jittered(a: &DMatrix<f64>) -> Result<(DMatrix<f64>, f64)> {
    cholesky_jittered_floor(a, f64::MIN_POSITIVE)
}

/// As [`cholesky_jittered`], with the jitter scale bounded below by `floor`.
/// Used for conditional covariances whose diagonal may be vanishingly small.
pub fn cholesky_jittered_floor(a: &DMatrix<f64>, floor: f64) -> Result<(DMatrix<f64>, f64)> {
    let n = a.nrows();
    if n != a.ncols() {
        return Err(Error::invalid("cholesky of a non-square matrix"));
    }
    if n == 0 {
        return Ok((DMatrix::zeros(0, 0), 0.0));
    }
    if let Some(c) = a.clone().cholesky() {
        return Ok((c.unpack(), 0.0));
    }
    let scale = (a.diagonal().iter().map(|v| v.abs()).sum::<f64>() / n as f64).max(floor);
    let mut rel = JITTER_START;
    while rel <= JITTER_MAX * (1.0 + 1e-9) {
        let jitter = rel * scale;
        let mut b = a.clone();
        for i in 0..n {
            b[(i, i)] += jitter;
        }
        if let Some(c) = b.cholesky() {
            return Ok((c.unpack(), jitter));
        }
        rel *= 10.0;
    }
    Err(Error::IllConditioned(format!(
        "cholesky failed on a {n}x{n} matrix after jitter up to {JITTER_MAX:e} * mean(diag)"
    )))
}

/// Solves `L x = b` in place for lower-triangular `L`.
pub fn solve_lower_mut(l: &DMatrix<f64>, b: &mut DMatrix<f64>) {
    let ok = l.solve_lower_triangular_mut(b);
    debug_assert!(ok, "singular triangular factor");
}

/// Solves `L^T x = b` in place for lower-triangular `L`.
pub fn solve_lower_transpose_mut(l: &DMatrix<f64>, b: &mut DVector<f64>) {
    let ok = l.tr_solve_lower_triangular_mut(b);
    debug_assert!(ok, "singular triangular factor");
}

/// `A^{-1/2}` for a symmetric PSD matrix, pseudo-inverting the null space.
///
/// Eigenvalues below `rtol * max_eig` are treated as zero.
pub fn psd_inverse_sqrt(a: &DMatrix<f64>, rtol: f64) -> DMatrix<f64> {
    let eig = SymmetricEigen::new(symmetrize(a));
    let max = eig.eigenvalues.iter().cloned().fold(0.0_f64, f64::max);
    let cutoff = rtol * max;
    let mut scaled = eig.eigenvectors.clone();
    for (j, &lambda) in eig.eigenvalues.iter().enumerate() {
        let s = if lambda > cutoff && lambda > 0.0 {
            1.0 / lambda.sqrt()
        } else {
            0.0
        };
        scaled.column_mut(j).scale_mut(s);
    }
    scaled * eig.eigenvectors.transpose()
}

pub fn symmetrize(a: &DMatrix<f64>) -> DMatrix<f64> {
    (a + a.transpose()) * 0.5
}

/// `||a - b||_F / ||b||_F` (absolute error when `b` is zero).
pub fn rel_frobenius(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    let num = (a - b).norm();
    let den = b.norm();
    if den > 0.0 {
        num / den
    } else {
        num
    }
}

/// Maximum absolute deviation from symmetry, relative to the largest entry.
pub fn asymmetry(a: &DMatrix<f64>) -> f64 {
    let scale = a.amax().max(f64::MIN_POSITIVE);
    (a - a.transpose()).amax() / scale
}

/// Builds a row-major `n x d` matrix from row vectors.
pub fn rows_to_matrix(rows: &[Vec<f64>], d: usize) -> DMatrix<f64> {
    DMatrix::from_fn(rows.len(), d, |i, j| rows[i][j])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn jitter_rescues_singular_psd() {
        let v = DVector::from_vec(vec![1.0, 2.0, 3.0]);
        let a = &v * v.transpose();
        let (l, jitter) = cholesky_jittered(&a).unwrap();
        assert!(jitter > 0.0);
        assert!(rel_frobenius(&(&l * l.transpose()), &a) < 1e-4);
    }

    #[test]
    fn indefinite_matrix_errors() {
        let a = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, -1.0]);
        assert!(matches!(cholesky_jittered(&a), Err(Error::IllConditioned(_))));
    }

    #[test]
    fn inverse_sqrt_of_diagonal() {
        let a = DMatrix::from_diagonal(&DVector::from_vec(vec![4.0, 9.0, 0.0]));
        let s = psd_inverse_sqrt(&a, 1e-12);
        assert!((s[(0, 0)] - 0.5).abs() < 1e-12);
        assert!((s[(1, 1)] - 1.0 / 3.0).abs() < 1e-12);
        assert_eq!(s[(2, 2)], 0.0);
    }
}
