//! Small dense helpers on top of nalgebra shared by the other modules.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

pub type Mat = DMatrix<f64>;
pub type Vector = DVector<f64>;

pub fn symmetrize(m: &Mat) -> Mat {
    (m + m.transpose()) * 0.5
}

pub fn min_eigenvalue(m: &Mat) -> f64 {
    if m.nrows() == 0 {
        return 0.0;
    }
    symmetrize(m)
        .symmetric_eigenvalues()
        .iter()
        .cloned()
        .fold(f64::INFINITY, f64::min)
}

/// Principal square root of a symmetric PSD matrix (negative eigenvalues clipped to zero).
pub fn sqrtm_psd(m: &Mat) -> Mat {
    let eig = symmetrize(m).symmetric_eigen();
    let d = eig.eigenvalues.map(|l| l.max(0.0).sqrt());
    &eig.eigenvectors * Mat::from_diagonal(&d) * eig.eigenvectors.transpose()
}

/// Inverse of a symmetric matrix with eigenvalues floored at `floor`.
///
/// Returns the inverse together with the smallest raw eigenvalue.
pub fn inverse_sym_floored(m: &Mat, floor: f64) -> (Mat, f64) {
    let eig = symmetrize(m).symmetric_eigen();
    let min = eig.eigenvalues.iter().cloned().fold(f64::INFINITY, f64::min);
    let d = eig.eigenvalues.map(|l| 1.0 / l.max(floor));
    (
        &eig.eigenvectors * Mat::from_diagonal(&d) * eig.eigenvectors.transpose(),
        min,
    )
}

/// Lower Cholesky factor of a symmetric positive definite matrix.
pub fn cholesky_lower(m: &Mat, what: &str) -> Result<Mat> {
    nalgebra::Cholesky::new(symmetrize(m))
        .map(|c| c.l())
        .ok_or_else(|| Error::Numerical(format!("{what} is not positive definite")))
}

/// Matrix square-root factor `L` with `L Lᵀ = m`, valid for PSD (possibly singular) input.
pub fn psd_factor(m: &Mat) -> Mat {
    match nalgebra::Cholesky::new(symmetrize(m)) {
        Some(c) => c.l(),
        None => sqrtm_psd(m),
    }
}

pub fn solve_spd(m: &Mat, rhs: &Mat, what: &str) -> Result<Mat> {
    let chol = nalgebra::Cholesky::new(symmetrize(m))
        .ok_or_else(|| Error::Numerical(format!("{what} is not positive definite")))?;
    Ok(chol.solve(rhs))
}

/// Packs the lower triangle row by row: (0,0), (1,0), (1,1), (2,0), ...
pub fn lower_triangle(m: &Mat) -> Vec<f64> {
    let n = m.nrows();
    let mut out = Vec::with_capacity(n * (n + 1) / 2);
    for i in 0..n {
        for j in 0..=i {
            out.push(m[(i, j)]);
        }
    }
    out
}

pub fn from_lower_triangle(n: usize, values: &[f64]) -> Result<Mat> {
    if values.len() != n * (n + 1) / 2 {
        return Err(Error::dim("lower triangle", n * (n + 1) / 2, values.len()));
    }
    let mut m = Mat::zeros(n, n);
    let mut idx = 0;
    for i in 0..n {
        for j in 0..=i {
            m[(i, j)] = values[idx];
            m[(j, i)] = values[idx];
            idx += 1;
        }
    }
    Ok(m)
}

pub fn frobenius(m: &Mat) -> f64 {
    m.iter().map(|v| v * v).sum::<f64>().sqrt()
}

pub fn all_finite(m: &Mat) -> bool {
    m.iter().all(|v| v.is_finite())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lower_triangle_round_trip() {
        let m = Mat::from_row_slice(3, 3, &[4.0, 1.0, 2.0, 1.0, 5.0, 3.0, 2.0, 3.0, 6.0]);
        let packed = lower_triangle(&m);
        assert_eq!(packed, vec![4.0, 1.0, 5.0, 2.0, 3.0, 6.0]);
        assert_eq!(from_lower_triangle(3, &packed).unwrap(), m);
        assert!(from_lower_triangle(2, &packed).is_err());
    }

    #[test]
    fn sqrtm_squares_back() {
        let m = Mat::from_row_slice(2, 2, &[2.0, 0.5, 0.5, 1.0]);
        let r = sqrtm_psd(&m);
        assert!(frobenius(&(&r * &r - &m)) < 1e-12);
    }

    #[test]
    fn floored_inverse_reports_min_eigenvalue() {
        let m = Mat::from_diagonal(&Vector::from_vec(vec![2.0, 1e-12]));
        let (inv, min) = inverse_sym_floored(&m, 1e-9);
        assert!((min - 1e-12).abs() < 1e-15);
        assert!((inv[(1, 1)] - 1e9).abs() < 1.0);
        assert!((inv[(0, 0)] - 0.5).abs() < 1e-15);
    }
}
