//! Block-Gram parametrization of matrix trigonometric polynomials.
//!
//! A symmetric `n(m+1) × n(m+1)` matrix `M`, split into `(m+1)²` blocks of
//! size `n×n`, defines the polynomial `Δ(θ) M Δ(θ)*` with
//! `Δ(θ) = [I, e^{iθ} I, …, e^{imθ} I]`. Its lag-k coefficient is
//! `D_k(M) = Σ_j M_{j,j+k}`.
//!
//! Adjoints are taken with respect to the Frobenius inner product on
//! symmetric matrices (domain) and on `n×n` matrices (coefficients). With
//! that choice `D_k D_k*` is a scalar multiple of the identity:
//! `m+1` for `k = 0` and `(m+1-k)/2` otherwise.

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::linalg::{self, CMat, Complex64, Mat};
use crate::pseudopoly::PseudoPolyMatrix;

/// Absolute tolerance on the asymmetry of a Gram matrix.
const SYMMETRY_TOL: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct BlockGram {
    n: usize,
    m: usize,
    mat: Mat,
}

impl BlockGram {
    pub fn new(n: usize, m: usize, mat: Mat) -> Result<Self> {
        let size = n * (m + 1);
        if n == 0 {
            return Err(Error::InvalidDimensions("n must be positive".into()));
        }
        if mat.shape() != (size, size) {
            return Err(Error::DimensionMismatch(format!(
                "Gram matrix is {}x{}, expected {size}x{size}",
                mat.nrows(),
                mat.ncols()
            )));
        }
        let asym = (&mat - mat.transpose()).amax();
        if asym > SYMMETRY_TOL * (1.0 + mat.amax()) {
            return Err(Error::InvalidDimensions(format!(
                "Gram matrix is not symmetric ({asym:e})"
            )));
        }
        Ok(Self {
            n,
            m,
            mat: linalg::symmetrize(&mat),
        })
    }

    pub fn zeros(n: usize, m: usize) -> Self {
        let size = n * (m + 1);
        Self {
            n,
            m,
            mat: Mat::zeros(size, size),
        }
    }

    /// Wraps a matrix that is symmetric by construction.
    pub(crate) fn from_symmetric(n: usize, m: usize, mat: Mat) -> Self {
        debug_assert_eq!(mat.nrows(), n * (m + 1));
        Self { n, m, mat }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn matrix(&self) -> &Mat {
        &self.mat
    }

    pub fn into_matrix(self) -> Mat {
        self.mat
    }

    pub fn trace(&self) -> f64 {
        self.mat.trace()
    }

    pub fn block(&self, j: usize, l: usize) -> Mat {
        self.mat.view((j * self.n, l * self.n), (self.n, self.n)).into_owned()
    }

    /// `D_k(M)`: the sum of the blocks on the k-th block super-diagonal.
    pub fn lag(&self, k: usize) -> Mat {
        lag_of(&self.mat, self.n, self.m, k)
    }

    pub fn represent(&self) -> PseudoPolyMatrix {
        let coeffs = (0..=self.m).map(|k| self.lag(k)).collect();
        PseudoPolyMatrix::new(coeffs).expect("diagonal block sums of a symmetric matrix are symmetric")
    }

    /// `Δ(θ) M Δ(θ)*` computed directly from the full matrix.
    pub fn sandwich(&self, theta: f64) -> CMat {
        let n = self.n;
        let delta = DMatrix::from_fn(n, n * (self.m + 1), |i, c| {
            let (blk, col) = (c / n, c % n);
            if col == i {
                Complex64::from_polar(1.0, blk as f64 * theta)
            } else {
                Complex64::new(0.0, 0.0)
            }
        });
        &delta * linalg::to_complex(&self.mat) * delta.adjoint()
    }

    pub fn scale(&self, alpha: f64) -> Self {
        Self {
            n: self.n,
            m: self.m,
            mat: &self.mat * alpha,
        }
    }

    pub fn combine(&self, alpha: f64, other: &Self, beta: f64) -> Result<Self> {
        if (self.n, self.m) != (other.n, other.m) {
            return Err(Error::DimensionMismatch("Gram shapes differ".into()));
        }
        Ok(Self {
            n: self.n,
            m: self.m,
            mat: &self.mat * alpha + &other.mat * beta,
        })
    }

    pub fn min_eigenvalue(&self) -> f64 {
        linalg::min_eigenvalue(&self.mat)
    }

    /// Frobenius inner product `⟨self, other⟩ = tr(selfᵀ other)`.
    pub fn dot(&self, other: &Self) -> f64 {
        self.mat.dot(&other.mat)
    }
}

pub(crate) fn lag_of(mat: &Mat, n: usize, m: usize, k: usize) -> Mat {
    let mut acc = Mat::zeros(n, n);
    for j in 0..=m - k {
        acc += mat.view((j * n, (j + k) * n), (n, n));
    }
    acc
}

/// `D_k D_k*` as a scalar.
pub fn lag_gram_scale(m: usize, k: usize) -> f64 {
    if k == 0 {
        (m + 1) as f64
    } else {
        (m + 1 - k) as f64 / 2.0
    }
}

/// Adds `D_k*(x)` into `out`: `x/2` on every block `(j, j+k)` and `xᵀ/2` on
/// its mirror for `k ≥ 1`; the symmetric part of `x` on every diagonal block
/// for `k = 0`.
pub(crate) fn add_adjoint_lag(out: &mut Mat, n: usize, m: usize, k: usize, x: &Mat) {
    if k == 0 {
        let sym = linalg::symmetrize(x);
        for j in 0..=m {
            let mut blk = out.view_mut((j * n, j * n), (n, n));
            blk += &sym;
        }
    } else {
        let half = x * 0.5;
        let half_t = half.transpose();
        for j in 0..=m - k {
            {
                let mut upper = out.view_mut((j * n, (j + k) * n), (n, n));
                upper += &half;
            }
            let mut lower = out.view_mut(((j + k) * n, j * n), (n, n));
            lower += &half_t;
        }
    }
}

/// Sum of adjoints `Σ_k D_k*(M_k)` under the Frobenius inner product.
pub fn adjoint_embed(coeffs: &[Mat]) -> Result<BlockGram> {
    let (n, m) = check_coeff_list(coeffs)?;
    let mut out = Mat::zeros(n * (m + 1), n * (m + 1));
    for (k, x) in coeffs.iter().enumerate() {
        add_adjoint_lag(&mut out, n, m, k, x);
    }
    Ok(BlockGram::from_symmetric(n, m, out))
}

/// Minimum-Frobenius-norm Gram matrix whose representation has the given
/// coefficients: `D*(D D*)^{-1}`, i.e. each lag spread evenly over its
/// block diagonal.
pub fn min_norm_lift(coeffs: &[Mat]) -> Result<BlockGram> {
    let (_, m) = check_coeff_list(coeffs)?;
    let scaled: Vec<Mat> = coeffs
        .iter()
        .enumerate()
        .map(|(k, c)| c / lag_gram_scale(m, k))
        .collect();
    adjoint_embed(&scaled)
}

fn check_coeff_list(coeffs: &[Mat]) -> Result<(usize, usize)> {
    let first = coeffs
        .first()
        .ok_or_else(|| Error::InvalidDimensions("empty coefficient list".into()))?;
    let n = first.nrows();
    if n == 0 || coeffs.iter().any(|c| c.shape() != (n, n)) {
        return Err(Error::DimensionMismatch(format!("all coefficients must be {n}x{n}")));
    }
    if (first - first.transpose()).amax() > SYMMETRY_TOL * (1.0 + first.amax()) {
        return Err(Error::InvalidDimensions("lag-0 coefficient must be symmetric".into()));
    }
    Ok((n, coeffs.len() - 1))
}

/// Gram matrix of the stacked filter coefficients. Blocks are stacked in
/// reverse lag order, `[C_m; …; C_0]`, so that the representation equals
/// the spectrum of `Γ(θ) = Σ_k e^{-ikθ} C_k`.
pub fn factor_lift(c: &[Mat]) -> Result<BlockGram> {
    let first = c
        .first()
        .ok_or_else(|| Error::InvalidDimensions("empty coefficient list".into()))?;
    let (n, l) = first.shape();
    if n == 0 || c.iter().any(|ck| ck.shape() != (n, l)) {
        return Err(Error::DimensionMismatch(format!(
            "all filter coefficients must be {n}x{l}"
        )));
    }
    let m = c.len() - 1;
    let mut stacked = Mat::zeros(n * (m + 1), l);
    for (j, ck) in c.iter().rev().enumerate() {
        stacked.view_mut((j * n, 0), (n, l)).copy_from(ck);
    }
    let gram = &stacked * stacked.transpose();
    Ok(BlockGram::from_symmetric(n, m, linalg::symmetrize(&gram)))
}
