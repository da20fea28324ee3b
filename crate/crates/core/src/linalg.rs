//! Small dense helpers shared by the spectral and solver code.

use nalgebra::Complex;
use nalgebra::{DMatrix, SymmetricEigen};

pub type Complex64 = Complex<f64>;

pub type Mat = DMatrix<f64>;
pub type CMat = DMatrix<Complex64>;

/// Eigenvalues of a Hermitian matrix in ascending order.
pub fn hermitian_eigenvalues(m: &CMat) -> Vec<f64> {
    let mut ev: Vec<f64> = if m.nrows() == 1 {
        vec![m[(0, 0)].re]
    } else {
        SymmetricEigen::new(m.clone()).eigenvalues.iter().copied().collect()
    };
    ev.sort_by(|a, b| a.total_cmp(b));
    ev
}

/// Singular values of a Hermitian matrix, largest first.
pub fn hermitian_singular_values(m: &CMat) -> Vec<f64> {
    let mut sv: Vec<f64> = hermitian_eigenvalues(m).into_iter().map(f64::abs).collect();
    sv.sort_by(|a, b| b.total_cmp(a));
    sv
}

pub fn spectral_norm_hermitian(m: &CMat) -> f64 {
    hermitian_singular_values(m).first().copied().unwrap_or(0.0)
}

pub fn symmetrize(m: &Mat) -> Mat {
    (m + m.transpose()) * 0.5
}

/// Minimum eigenvalue of a real symmetric matrix (symmetrized first).
pub fn min_eigenvalue(m: &Mat) -> f64 {
    if m.nrows() == 0 {
        return 0.0;
    }
    SymmetricEigen::new(symmetrize(m))
        .eigenvalues
        .iter()
        .copied()
        .fold(f64::INFINITY, f64::min)
}

/// Frobenius-nearest positive semidefinite matrix: clip negative eigenvalues.
pub fn project_psd(m: &Mat) -> Mat {
    let eig = SymmetricEigen::new(symmetrize(m));
    let mut v = eig.eigenvectors;
    let vt = v.transpose();
    for (j, &lambda) in eig.eigenvalues.iter().enumerate() {
        let s = lambda.max(0.0);
        v.column_mut(j).scale_mut(s);
    }
    symmetrize(&(v * vt))
}

/// Symmetric square root of a symmetric positive semidefinite matrix.
pub fn sym_sqrt(m: &Mat) -> Mat {
    let eig = SymmetricEigen::new(symmetrize(m));
    let mut v = eig.eigenvectors;
    let vt = v.transpose();
    for (j, &lambda) in eig.eigenvalues.iter().enumerate() {
        v.column_mut(j).scale_mut(lambda.max(0.0).sqrt());
    }
    symmetrize(&(v * vt))
}

pub fn to_complex(m: &Mat) -> CMat {
    m.map(|x| Complex64::new(x, 0.0))
}

pub fn max_abs(m: &CMat) -> f64 {
    m.iter().map(|z| z.norm()).fold(0.0, f64::max)
}

pub fn from_row_major(rows: usize, cols: usize, data: &[f64]) -> Mat {
    Mat::from_row_slice(rows, cols, data)
}

pub fn to_row_major(m: &Mat) -> Vec<f64> {
    let mut out = Vec::with_capacity(m.len());
    for i in 0..m.nrows() {
        for j in 0..m.ncols() {
            out.push(m[(i, j)]);
        }
    }
    out
}
