//! MA spectral estimation from samples.
//!
//! The production path is Durbin's two-stage method: a long VAR fit yields
//! innovation estimates, and the observations are then regressed on the
//! current and lagged innovations. The resulting spectrum `Γ Γ*` is PSD by
//! construction. [`truncated_correlogram`] is kept as a diagnostic only.

use nalgebra::{Cholesky, SymmetricEigen, SVD};

use crate::error::{Error, Result};
use crate::linalg::{self, Mat};
use crate::model::{ma_spectrum, SampleMatrix};
use crate::pseudopoly::PseudoPolyMatrix;

/// Condition number of the normal equations above which least squares
/// falls back to an SVD solve.
const NORMAL_EQ_MAX_COND: f64 = 1e12;

/// `x(t) ≈ Σ_{j=1}^{p} Φ_j x(t-j) + e(t)`
#[derive(Debug, Clone, PartialEq)]
pub struct VARModel {
    phi: Vec<Mat>,
}

impl VARModel {
    pub fn order(&self) -> usize {
        self.phi.len()
    }

    pub fn dim(&self) -> usize {
        self.phi[0].nrows()
    }

    pub fn coefficients(&self) -> &[Mat] {
        &self.phi
    }

    /// One-step prediction errors `x(t) - Σ_j Φ_j x(t-j)` for `t = p..N-1`
    /// (zero-based), one row per time step.
    pub fn residuals(&self, samples: &SampleMatrix) -> Mat {
        let x = samples.values();
        let p = self.order();
        let len = x.nrows() - p;
        let mut out = Mat::zeros(len, x.ncols());
        for t in p..x.nrows() {
            let mut e = x.row(t).transpose();
            for (j, phi) in self.phi.iter().enumerate() {
                e -= phi * x.row(t - j - 1).transpose();
            }
            out.row_mut(t - p).copy_from(&e.transpose());
        }
        out
    }
}

/// `x(t) = Σ_{k=0}^{m} C_k e(t-k)` with identity-covariance `e`.
#[derive(Debug, Clone, PartialEq)]
pub struct VMAModel {
    c: Vec<Mat>,
}

impl VMAModel {
    pub fn new(c: Vec<Mat>) -> Result<Self> {
        let first = c
            .first()
            .ok_or_else(|| Error::InvalidDimensions("VMA needs at least C_0".into()))?;
        let n = first.nrows();
        if n == 0 || c.iter().any(|ck| ck.shape() != (n, n)) {
            return Err(Error::DimensionMismatch(format!("every C_k must be {n}x{n}")));
        }
        Ok(Self { c })
    }

    pub fn order(&self) -> usize {
        self.c.len() - 1
    }

    pub fn dim(&self) -> usize {
        self.c[0].nrows()
    }

    pub fn coefficients(&self) -> &[Mat] {
        &self.c
    }

    pub fn spectrum(&self) -> PseudoPolyMatrix {
        spectrum_from_vma(self)
    }
}

/// Biased sample autocovariances up to lag `m`. Not guaranteed PSD.
pub fn truncated_correlogram(samples: &SampleMatrix, m: usize) -> Result<PseudoPolyMatrix> {
    if samples.len() <= m {
        return Err(Error::InsufficientData(format!(
            "need N > m, got N={} and m={m}",
            samples.len()
        )));
    }
    PseudoPolyMatrix::new((0..=m).map(|k| samples.lag_covariance(k)).collect())
}

/// Ordinary least-squares VAR(p) fit without intercept.
pub fn fit_var(samples: &SampleMatrix, p: usize) -> Result<VARModel> {
    let (len, n) = (samples.len(), samples.dim());
    if p == 0 {
        return Err(Error::InvalidDimensions("AR order must be at least 1".into()));
    }
    if len <= 2 * p + n {
        return Err(Error::InsufficientData(format!(
            "need N > 2p + n = {}, got N={len}",
            2 * p + n
        )));
    }
    let x = samples.values();
    let rows = len - p;
    let mut regressors = Mat::zeros(rows, n * p);
    let mut targets = Mat::zeros(rows, n);
    for t in p..len {
        let r = t - p;
        targets.row_mut(r).copy_from(&x.row(t));
        for j in 0..p {
            regressors.view_mut((r, j * n), (1, n)).copy_from(&x.row(t - j - 1));
        }
    }
    let beta = least_squares(&regressors, &targets)?;
    let phi = (0..p).map(|j| beta.view((j * n, 0), (n, n)).transpose()).collect();
    Ok(VARModel { phi })
}

/// Durbin's method with AR order `p` (default `2m`, at least 1).
pub fn durbin_vma(samples: &SampleMatrix, m: usize, p: Option<usize>) -> Result<VMAModel> {
    let p = p.unwrap_or_else(|| default_ar_order(m));
    if p == 0 {
        return Err(Error::InvalidDimensions(
            "AR order must be at least 1 to form residuals".into(),
        ));
    }
    let (len, n) = (samples.len(), samples.dim());
    if len <= p + m + n {
        return Err(Error::InsufficientData(format!(
            "need N > p + m + n = {}, got N={len}",
            p + m + n
        )));
    }
    let var = fit_var(samples, p)?;
    let resid = var.residuals(samples);
    let x = samples.values();

    // Regress x(t) on [ê(t), ê(t-1), …, ê(t-m)]; row i of `resid` is ê(p+i).
    let rows = resid.nrows() - m;
    let mut regressors = Mat::zeros(rows, n * (m + 1));
    let mut targets = Mat::zeros(rows, n);
    for r in 0..rows {
        let i = r + m;
        targets.row_mut(r).copy_from(&x.row(p + i));
        for k in 0..=m {
            regressors.view_mut((r, k * n), (1, n)).copy_from(&resid.row(i - k));
        }
    }
    let beta = least_squares(&regressors, &targets)?;

    let cov = resid.transpose() * &resid / resid.nrows() as f64;
    let eig = SymmetricEigen::new(linalg::symmetrize(&cov));
    let top = eig.eigenvalues.amax();
    if top == 0.0 || eig.eigenvalues.min() <= top * f64::EPSILON * n as f64 {
        return Err(Error::SingularCovariance);
    }
    let root = linalg::sym_sqrt(&cov);
    let c = (0..=m)
        .map(|k| beta.view((k * n, 0), (n, n)).transpose() * &root)
        .collect();
    VMAModel::new(c)
}

pub fn default_ar_order(m: usize) -> usize {
    (2 * m).max(1)
}

pub fn spectrum_from_vma(vma: &VMAModel) -> PseudoPolyMatrix {
    ma_spectrum(&vma.c)
}

/// Solves `min ‖A B - Y‖_F` for `B`. Normal equations with Cholesky when the
/// Gram matrix is well conditioned, SVD otherwise.
fn least_squares(a: &Mat, y: &Mat) -> Result<Mat> {
    let cols = a.ncols();
    let gram = linalg::symmetrize(&(a.transpose() * a));
    let eig = SymmetricEigen::new(gram.clone()).eigenvalues;
    let (lo, hi) = (eig.min(), eig.max());
    if lo > 0.0 && hi / lo <= NORMAL_EQ_MAX_COND {
        if let Some(chol) = Cholesky::new(gram) {
            return Ok(chol.solve(&(a.transpose() * y)));
        }
    }
    let svd = SVD::new(a.clone(), true, true);
    let smax = svd.singular_values.max();
    let eps = smax * f64::EPSILON * a.nrows().max(cols) as f64;
    let rank = svd.rank(eps);
    if rank < cols || smax == 0.0 {
        return Err(Error::RankDeficient { rank, cols });
    }
    svd.solve(y, eps).map_err(|e| Error::Parse(e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::MAFactorModel;
    use crate::pseudopoly::{FrequencyGrid, DEFAULT_PSD_TOL};
    use nalgebra::DVector;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};
    use std::f64::consts::PI;

    fn scalar_series(values: Vec<f64>) -> SampleMatrix {
        SampleMatrix::new(Mat::from_vec(values.len(), 1, values)).unwrap()
    }

    fn white_noise(len: usize, n: usize, seed: u64) -> SampleMatrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        SampleMatrix::new(Mat::from_fn(len, n, |_, _| StandardNormal.sample(&mut rng))).unwrap()
    }

    fn scalar_ma1(c: f64, len: usize, seed: u64) -> SampleMatrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let e: Vec<f64> = (0..=len).map(|_| StandardNormal.sample(&mut rng)).collect();
        scalar_series((1..=len).map(|t| e[t] + c * e[t - 1]).collect())
    }

    #[test]
    fn correlogram_trivial_cases() {
        let zeros = SampleMatrix::new(Mat::zeros(10, 2)).unwrap();
        let p = truncated_correlogram(&zeros, 3).unwrap();
        assert_eq!(p.max_coeff_diff(&PseudoPolyMatrix::zeros(2, 3)), 0.0);

        let v = Mat::from_row_slice(1, 3, &[1.0, -2.0, 0.5]);
        let one = SampleMatrix::new(v.clone()).unwrap();
        let p = truncated_correlogram(&one, 0).unwrap();
        assert!((p.coeff(0) - v.transpose() * &v).amax() <= 1e-15);
        assert!(matches!(
            truncated_correlogram(&one, 1),
            Err(Error::InsufficientData(_))
        ));
    }

    #[test]
    fn correlogram_can_lose_positivity() {
        // Alternating-sign MA(5) filter with a deep spectral notch.
        let c = [1.0, -1.8, 1.9, -1.9, 1.8, -1.0];
        let model = MAFactorModel::new(
            c.iter().map(|&v| Mat::from_element(1, 1, v)).collect(),
            vec![DVector::zeros(1); 6],
        )
        .unwrap();
        let grid = FrequencyGrid::default();
        let failures = (0..20)
            .filter(|&seed| {
                let x = model.simulate(30, seed).unwrap();
                !truncated_correlogram(&x, 5)
                    .unwrap()
                    .is_psd_on_grid(&grid, DEFAULT_PSD_TOL)
                    .psd
            })
            .count();
        assert!(failures >= 1);
    }

    #[test]
    fn var_on_white_noise_is_near_zero() {
        let x = white_noise(50_000, 3, 1);
        let var = fit_var(&x, 2).unwrap();
        for phi in var.coefficients() {
            assert!(phi.amax() <= 0.05);
        }
    }

    #[test]
    fn var_recovers_scalar_ar1() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut x = vec![0.0_f64; 100_000];
        for t in 1..x.len() {
            let e: f64 = StandardNormal.sample(&mut rng);
            x[t] = 0.5 * x[t - 1] + e;
        }
        let var = fit_var(&scalar_series(x), 1).unwrap();
        let phi = var.coefficients()[0][(0, 0)];
        assert!((0.45..=0.55).contains(&phi), "phi = {phi}");
    }

    #[test]
    fn var_input_errors() {
        let x = white_noise(3, 1, 3);
        assert!(matches!(fit_var(&x, 3), Err(Error::InsufficientData(_))));
        assert!(fit_var(&x, 0).is_err());
        let constant = SampleMatrix::new(Mat::from_element(100, 2, 1.0)).unwrap();
        assert!(matches!(fit_var(&constant, 1), Err(Error::RankDeficient { .. })));
    }

    #[test]
    fn durbin_scalar_ma1() {
        let x = scalar_ma1(0.5, 100_000, 4);
        let vma = durbin_vma(&x, 1, None).unwrap();
        let c0 = vma.coefficients()[0][(0, 0)];
        let c1 = vma.coefficients()[1][(0, 0)];
        let (c0, c1) = if c0 < 0.0 { (-c0, -c1) } else { (c0, c1) };
        assert!((0.95..=1.05).contains(&c0), "c0 = {c0}");
        assert!((0.45..=0.55).contains(&(c1 / c0)), "c1/c0 = {}", c1 / c0);
    }

    #[test]
    fn durbin_white_noise_order_zero() {
        let x = white_noise(20_000, 3, 5);
        let vma = durbin_vma(&x, 0, None).unwrap();
        let root = linalg::sym_sqrt(&x.lag_covariance(0));
        let c0 = &vma.coefficients()[0];
        // Γ Γ* reproduces the sample covariance, up to the small VAR fit.
        assert!((c0 * c0.transpose() - &root * &root).amax() <= 0.02);
        assert!((c0 - root).amax() <= 0.05);
    }

    #[test]
    fn durbin_rejects_zero_order() {
        let x = white_noise(100, 1, 6);
        assert!(durbin_vma(&x, 0, Some(0)).is_err());
        assert!(matches!(
            durbin_vma(&white_noise(5, 2, 1), 1, None),
            Err(Error::InsufficientData(_))
        ));
    }

    #[test]
    fn vma_spectrum_examples() {
        let id = VMAModel::new(vec![Mat::identity(2, 2), Mat::zeros(2, 2)]).unwrap();
        let s = spectrum_from_vma(&id);
        assert_eq!(s.coeff(0), &Mat::identity(2, 2));
        assert_eq!(s.coeff(1).amax(), 0.0);

        let c = 0.7;
        let v = VMAModel::new(vec![Mat::from_element(1, 1, 1.0), Mat::from_element(1, 1, c)]).unwrap();
        let s = spectrum_from_vma(&v);
        assert!((s.coeff(0)[(0, 0)] - (1.0 + c * c)).abs() < 1e-15);
        assert!((s.coeff(1)[(0, 0)] - c).abs() < 1e-15);
    }

    #[test]
    fn vma_spectrum_matches_direct_product() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let c: Vec<Mat> = (0..3)
            .map(|_| Mat::from_fn(3, 3, |_, _| rng.random_range(-1.0..1.0)))
            .collect();
        let s = spectrum_from_vma(&VMAModel::new(c.clone()).unwrap());
        for _ in 0..16 {
            let t: f64 = rng.random_range(-PI..PI);
            let mut g = linalg::CMat::zeros(3, 3);
            for (k, ck) in c.iter().enumerate() {
                g += linalg::to_complex(ck) * linalg::Complex64::from_polar(1.0, -(k as f64) * t);
            }
            assert!(linalg::max_abs(&(&g * g.adjoint() - s.evaluate(t))) <= 1e-10);
        }
    }

    #[test]
    fn vma_spectrum_ignores_right_rotation() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let c: Vec<Mat> = (0..3)
            .map(|_| Mat::from_fn(3, 3, |_, _| rng.random_range(-1.0..1.0)))
            .collect();
        let q = Mat::from_fn(3, 3, |_, _| rng.random_range(-1.0..1.0)).qr().q();
        let rotated: Vec<Mat> = c.iter().map(|ck| ck * &q).collect();
        let a = spectrum_from_vma(&VMAModel::new(c).unwrap());
        let b = spectrum_from_vma(&VMAModel::new(rotated).unwrap());
        assert!(a.max_coeff_diff(&b) <= 1e-12);
    }

    #[test]
    fn durbin_output_is_psd() {
        let grid = FrequencyGrid::default();
        for seed in 0..4 {
            let model = MAFactorModel::random(4, 2, 2, seed).unwrap();
            let x = model.simulate(3000, seed + 100).unwrap();
            let s = durbin_vma(&x, 2, None).unwrap().spectrum();
            assert!(s.is_psd_on_grid(&grid, DEFAULT_PSD_TOL).psd);
        }
    }
}
