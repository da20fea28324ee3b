//! Hermitian matrix trigonometric polynomials on the unit circle.
//!
//! A [`PseudoPolyMatrix`] of dimension `n` and degree `m` stores real
//! coefficients `R_0..R_m` and represents
//!
//! ```text
//! Ψ(e^{iθ}) = R_0 + Σ_{k=1}^{m} ( e^{-ikθ} R_k + e^{ikθ} R_kᵀ )
//! ```
//!
//! Negative lags are never stored; `R_{-k} = R_kᵀ` holds by construction.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{self, CMat, Complex64, Mat};

pub const DEFAULT_GRID_SIZE: usize = 512;
pub const DEFAULT_RANK_THRESHOLD: f64 = 1e-8;
pub const DEFAULT_PSD_TOL: f64 = 1e-9;

/// Absolute tolerance on the asymmetry of `R_0`.
const SYMMETRY_TOL: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct PseudoPolyMatrix {
    n: usize,
    coeffs: Vec<Mat>,
}

impl PseudoPolyMatrix {
    pub fn new(coeffs: Vec<Mat>) -> Result<Self> {
        let Some(first) = coeffs.first() else {
            return Err(Error::InvalidDimensions("at least one coefficient is required".into()));
        };
        let n = first.nrows();
        if n == 0 {
            return Err(Error::InvalidDimensions("n must be positive".into()));
        }
        for (k, c) in coeffs.iter().enumerate() {
            if c.nrows() != n || c.ncols() != n {
                return Err(Error::DimensionMismatch(format!(
                    "coefficient {k} is {}x{}, expected {n}x{n}",
                    c.nrows(),
                    c.ncols()
                )));
            }
        }
        let asym = (first - first.transpose()).amax();
        if asym > SYMMETRY_TOL * (1.0 + first.amax()) {
            return Err(Error::InvalidDimensions(format!(
                "lag-0 coefficient is not symmetric (max asymmetry {asym:e})"
            )));
        }
        let mut coeffs = coeffs;
        coeffs[0] = linalg::symmetrize(&coeffs[0]);
        Ok(Self { n, coeffs })
    }

    pub fn zeros(n: usize, m: usize) -> Self {
        Self {
            n,
            coeffs: vec![Mat::zeros(n, n); m + 1],
        }
    }

    /// Constant function `Ψ(θ) = R_0`.
    pub fn constant(r0: Mat) -> Result<Self> {
        Self::new(vec![r0])
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn degree(&self) -> usize {
        self.coeffs.len() - 1
    }

    pub fn coeffs(&self) -> &[Mat] {
        &self.coeffs
    }

    pub fn coeff(&self, k: usize) -> &Mat {
        &self.coeffs[k]
    }

    /// Coefficient at lag `k`, zero past the degree.
    pub fn coeff_or_zero(&self, k: usize) -> Mat {
        self.coeffs
            .get(k)
            .cloned()
            .unwrap_or_else(|| Mat::zeros(self.n, self.n))
    }

    pub fn scale(&self, alpha: f64) -> Self {
        Self {
            n: self.n,
            coeffs: self.coeffs.iter().map(|c| c * alpha).collect(),
        }
    }

    /// Same function viewed with degree `m` (padding with zero lags). Fails
    /// when this would drop a nonzero lag.
    pub fn with_degree(&self, m: usize) -> Result<Self> {
        let mut coeffs = self.coeffs.clone();
        if m + 1 < coeffs.len() {
            if coeffs[m + 1..].iter().any(|c| c.amax() != 0.0) {
                return Err(Error::InvalidDimensions(format!(
                    "cannot truncate degree {} to {m}: nonzero lags",
                    self.degree()
                )));
            }
            coeffs.truncate(m + 1);
        } else {
            coeffs.resize(m + 1, Mat::zeros(self.n, self.n));
        }
        Ok(Self { n: self.n, coeffs })
    }

    pub fn evaluate(&self, theta: f64) -> CMat {
        let mut out = linalg::to_complex(&self.coeffs[0]);
        for (k, c) in self.coeffs.iter().enumerate().skip(1) {
            let phase = Complex64::from_polar(1.0, -(k as f64) * theta);
            for i in 0..self.n {
                for j in 0..self.n {
                    out[(i, j)] += phase * c[(i, j)] + phase.conj() * c[(j, i)];
                }
            }
        }
        out
    }

    /// Evaluations at every grid angle, in grid order.
    pub fn evaluate_grid(&self, grid: &FrequencyGrid) -> Vec<CMat> {
        grid.angles().iter().map(|&t| self.evaluate(t)).collect()
    }

    pub fn is_psd_on_grid(&self, grid: &FrequencyGrid, tol: f64) -> PsdReport {
        let mut min_eigenvalue = f64::INFINITY;
        let mut witness_angle = grid.angles()[0];
        for &theta in grid.angles() {
            let lo = linalg::hermitian_eigenvalues(&self.evaluate(theta))[0];
            if lo < min_eigenvalue {
                min_eigenvalue = lo;
                witness_angle = theta;
            }
        }
        PsdReport {
            psd: min_eigenvalue >= -tol,
            min_eigenvalue,
            witness_angle,
        }
    }

    /// Grid-evaluated `max_θ σ_max(Ψ(θ))`.
    pub fn sup_norm(&self, grid: &FrequencyGrid) -> f64 {
        grid.angles()
            .iter()
            .map(|&t| linalg::spectral_norm_hermitian(&self.evaluate(t)))
            .fold(0.0, f64::max)
    }

    /// Numerical normal rank: the largest per-angle count of singular values
    /// above `rel_threshold` times the global largest singular value.
    pub fn normal_rank(&self, grid: &FrequencyGrid, rel_threshold: f64) -> usize {
        let svs: Vec<Vec<f64>> = grid
            .angles()
            .iter()
            .map(|&t| linalg::hermitian_singular_values(&self.evaluate(t)))
            .collect();
        let top = svs.iter().map(|s| s[0]).fold(0.0, f64::max);
        if top == 0.0 {
            return 0;
        }
        let cut = rel_threshold * top;
        svs.iter()
            .map(|s| s.iter().filter(|&&x| x >= cut).count())
            .max()
            .unwrap_or(0)
    }

    /// Coefficient-wise difference; the shorter operand is zero-padded.
    pub fn subtract(&self, other: &Self) -> Result<Self> {
        if self.n != other.n {
            return Err(Error::DimensionMismatch(format!(
                "cannot subtract n={} from n={}",
                other.n, self.n
            )));
        }
        let m = self.degree().max(other.degree());
        let coeffs = (0..=m)
            .map(|k| self.coeff_or_zero(k) - other.coeff_or_zero(k))
            .collect();
        Ok(Self { n: self.n, coeffs })
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.subtract(&other.scale(-1.0))
    }

    pub fn is_diagonal(&self, tol: f64) -> bool {
        self.max_off_diagonal() <= tol
    }

    pub fn max_off_diagonal(&self) -> f64 {
        let mut worst = 0.0_f64;
        for c in &self.coeffs {
            for i in 0..self.n {
                for j in 0..self.n {
                    if i != j {
                        worst = worst.max(c[(i, j)].abs());
                    }
                }
            }
        }
        worst
    }

    /// Largest coefficient-wise absolute difference (zero-padded).
    pub fn max_coeff_diff(&self, other: &Self) -> f64 {
        let m = self.degree().max(other.degree());
        (0..=m)
            .map(|k| (self.coeff_or_zero(k) - other.coeff_or_zero(k)).amax())
            .fold(0.0, f64::max)
    }

    /// Quadrature estimate of `(1/2π) ∫ Ψ(θ) dθ`; equals `R_0` for
    /// `degree < grid.count()`.
    pub fn average_over(&self, grid: &FrequencyGrid) -> CMat {
        let mut acc = CMat::zeros(self.n, self.n);
        for &t in grid.angles() {
            acc += self.evaluate(t);
        }
        acc / Complex64::new(grid.count() as f64, 0.0)
    }

    pub fn to_json(&self) -> SpectrumJson {
        SpectrumJson {
            n: self.n,
            m: self.degree(),
            coeffs: self.coeffs.iter().map(linalg::to_row_major).collect(),
        }
    }

    pub fn from_json(json: &SpectrumJson) -> Result<Self> {
        if json.coeffs.len() != json.m + 1 {
            return Err(Error::Parse(format!(
                "spectrum has m={} but {} coefficient blocks",
                json.m,
                json.coeffs.len()
            )));
        }
        let nn = json.n * json.n;
        let coeffs = json
            .coeffs
            .iter()
            .enumerate()
            .map(|(k, c)| {
                if c.len() != nn {
                    Err(Error::Parse(format!(
                        "coefficient {k} has {} entries, expected {nn}",
                        c.len()
                    )))
                } else {
                    Ok(linalg::from_row_major(json.n, json.n, c))
                }
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(coeffs)
    }
}

/// On-disk layout: coefficient `k` is a row-major `n×n` array, `k = 0..m`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SpectrumJson {
    pub n: usize,
    pub m: usize,
    pub coeffs: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PsdReport {
    pub psd: bool,
    pub min_eigenvalue: f64,
    pub witness_angle: f64,
}

/// Uniform grid `θ_j = -π + 2πj/count` on `[-π, π)`.
#[derive(Debug, Clone, PartialEq)]
pub struct FrequencyGrid {
    angles: Vec<f64>,
}

impl FrequencyGrid {
    pub fn new(count: usize) -> Result<Self> {
        if count == 0 {
            return Err(Error::InvalidDimensions("grid size must be positive".into()));
        }
        let step = 2.0 * PI / count as f64;
        Ok(Self {
            angles: (0..count).map(|j| -PI + step * j as f64).collect(),
        })
    }

    pub fn count(&self) -> usize {
        self.angles.len()
    }

    pub fn angles(&self) -> &[f64] {
        &self.angles
    }

    pub fn spacing(&self) -> f64 {
        2.0 * PI / self.count() as f64
    }
}

impl Default for FrequencyGrid {
    fn default() -> Self {
        Self::new(DEFAULT_GRID_SIZE).expect("default grid size is positive")
    }
}
