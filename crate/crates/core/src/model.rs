//! The dynamic MA factor model
//!
//! ```text
//! x(t) = Σ_{k=0}^{m} A_k w_y(t-k) + Σ_{k=0}^{m} B_k w_z(t-k)
//! ```
//!
//! with `A_k` of shape `n×r`, `B_k` diagonal, and `w_y`, `w_z` independent
//! unit-variance Gaussian white noises.

use std::fmt::Write as _;
use std::path::Path;

use nalgebra::DVector;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{self, Mat};
use crate::pseudopoly::PseudoPolyMatrix;

#[derive(Debug, Clone, PartialEq)]
pub struct MAFactorModel {
    n: usize,
    r: usize,
    a: Vec<Mat>,
    b_diag: Vec<DVector<f64>>,
}

/// The three spectra of a model; `x = y + z` holds exactly coefficient-wise.
#[derive(Debug, Clone)]
pub struct TrueSpectra {
    pub psi_x: PseudoPolyMatrix,
    pub psi_y: PseudoPolyMatrix,
    pub psi_z: PseudoPolyMatrix,
}

impl MAFactorModel {
    pub fn new(a: Vec<Mat>, b_diag: Vec<DVector<f64>>) -> Result<Self> {
        let Some(a0) = a.first() else {
            return Err(Error::InvalidDimensions("model needs at least one lag".into()));
        };
        let (n, r) = a0.shape();
        if n == 0 {
            return Err(Error::InvalidDimensions("n must be positive".into()));
        }
        if r > n {
            return Err(Error::InvalidDimensions(format!("r={r} exceeds n={n}")));
        }
        if b_diag.len() != a.len() {
            return Err(Error::DimensionMismatch(format!(
                "{} A blocks but {} B diagonals",
                a.len(),
                b_diag.len()
            )));
        }
        if a.iter().any(|ak| ak.shape() != (n, r)) {
            return Err(Error::DimensionMismatch(format!("every A_k must be {n}x{r}")));
        }
        if b_diag.iter().any(|bk| bk.len() != n) {
            return Err(Error::DimensionMismatch(format!(
                "every B_k diagonal must have length {n}"
            )));
        }
        Ok(Self { n, r, a, b_diag })
    }

    /// Coefficients drawn i.i.d. standard normal from a ChaCha8 stream.
    pub fn random(n: usize, r: usize, m: usize, seed: u64) -> Result<Self> {
        if n == 0 || r == 0 || r > n {
            return Err(Error::InvalidDimensions(format!("need 1 <= r <= n, got n={n}, r={r}")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = (0..=m)
            .map(|_| Mat::from_fn(n, r, |_, _| StandardNormal.sample(&mut rng)))
            .collect();
        let b_diag = (0..=m)
            .map(|_| DVector::from_fn(n, |_, _| StandardNormal.sample(&mut rng)))
            .collect();
        Self::new(a, b_diag)
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn r(&self) -> usize {
        self.r
    }

    pub fn m(&self) -> usize {
        self.a.len() - 1
    }

    pub fn a(&self) -> &[Mat] {
        &self.a
    }

    pub fn b_diag(&self) -> &[DVector<f64>] {
        &self.b_diag
    }

    pub fn true_spectra(&self) -> TrueSpectra {
        let b: Vec<Mat> = self.b_diag.iter().map(Mat::from_diagonal).collect();
        let psi_y = ma_spectrum(&self.a);
        let psi_z = ma_spectrum(&b);
        let psi_x = psi_y.add(&psi_z).expect("matching dimensions");
        TrueSpectra { psi_x, psi_y, psi_z }
    }

    /// Draws `N` consecutive stationary samples. `m` noise pre-samples are
    /// generated so that the first row already has the stationary law.
    pub fn simulate(&self, samples: usize, seed: u64) -> Result<SampleMatrix> {
        if samples == 0 {
            return Err(Error::InsufficientData("N must be at least 1".into()));
        }
        let (n, r, m) = (self.n, self.r, self.m());
        let len = samples + m;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let wy = Mat::from_fn(len, r, |_, _| StandardNormal.sample(&mut rng));
        let wz = Mat::from_fn(len, n, |_, _| StandardNormal.sample(&mut rng));
        let mut values = Mat::zeros(samples, n);
        for t in 0..samples {
            let now = t + m;
            for k in 0..=m {
                let src = now - k;
                let ak = &self.a[k];
                let bk = &self.b_diag[k];
                for i in 0..n {
                    let mut acc = bk[i] * wz[(src, i)];
                    for j in 0..r {
                        acc += ak[(i, j)] * wy[(src, j)];
                    }
                    values[(t, i)] += acc;
                }
            }
        }
        SampleMatrix::new(values)
    }

    pub fn to_json(&self) -> ModelJson {
        ModelJson {
            n: self.n,
            r: self.r,
            m: self.m(),
            a: self.a.iter().map(linalg::to_row_major).collect(),
            b_diag: self.b_diag.iter().map(|b| b.iter().copied().collect()).collect(),
        }
    }

    pub fn from_json(json: &ModelJson) -> Result<Self> {
        if json.a.len() != json.m + 1 || json.b_diag.len() != json.m + 1 {
            return Err(Error::Parse(format!(
                "model with m={} needs {} A and B_diag blocks",
                json.m,
                json.m + 1
            )));
        }
        let a = json
            .a
            .iter()
            .map(|blk| {
                if blk.len() != json.n * json.r {
                    Err(Error::Parse(format!(
                        "A block has {} entries, expected {}",
                        blk.len(),
                        json.n * json.r
                    )))
                } else {
                    Ok(linalg::from_row_major(json.n, json.r, blk))
                }
            })
            .collect::<Result<Vec<_>>>()?;
        let b = json.b_diag.iter().map(|d| DVector::from_vec(d.clone())).collect();
        Self::new(a, b)
    }
}

/// Spectrum `Γ Γ*` of the filter `Γ(θ) = Σ_k e^{-ikθ} C_k`: the lag-k
/// coefficient is `Σ_l C_{l+k} C_lᵀ`.
pub fn ma_spectrum(c: &[Mat]) -> PseudoPolyMatrix {
    let m = c.len() - 1;
    let n = c[0].nrows();
    let coeffs = (0..=m)
        .map(|k| (0..=m - k).fold(Mat::zeros(n, n), |acc, l| acc + &c[l + k] * c[l].transpose()))
        .collect();
    PseudoPolyMatrix::new(coeffs).expect("convolution of filter coefficients is well formed")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelJson {
    pub n: usize,
    pub r: usize,
    pub m: usize,
    #[serde(rename = "A")]
    pub a: Vec<Vec<f64>>,
    #[serde(rename = "B_diag")]
    pub b_diag: Vec<Vec<f64>>,
}

/// Observation record; row `t` is `x(t)ᵀ`.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleMatrix {
    values: Mat,
}

impl SampleMatrix {
    pub fn new(values: Mat) -> Result<Self> {
        if values.nrows() == 0 || values.ncols() == 0 {
            return Err(Error::InsufficientData("sample matrix must be non-empty".into()));
        }
        Ok(Self { values })
    }

    pub fn len(&self) -> usize {
        self.values.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.values.nrows() == 0
    }

    pub fn dim(&self) -> usize {
        self.values.ncols()
    }

    pub fn values(&self) -> &Mat {
        &self.values
    }

    /// Biased lag-k sample covariance `(1/N) Σ_t x(t+k) x(t)ᵀ`, matching the
    /// lag-k spectral coefficient convention.
    pub fn lag_covariance(&self, k: usize) -> Mat {
        let (len, n) = self.values.shape();
        let mut acc = Mat::zeros(n, n);
        for t in 0..len.saturating_sub(k) {
            let ahead = self.values.row(t + k);
            let now = self.values.row(t);
            acc += ahead.transpose() * now;
        }
        acc / len as f64
    }

    pub fn to_csv(&self, header: bool) -> String {
        let (len, n) = self.values.shape();
        let mut out = String::with_capacity(len * n * 25);
        if header {
            let names: Vec<String> = (1..=n).map(|i| format!("x{i}")).collect();
            out.push_str(&names.join(","));
            out.push('\n');
        }
        for t in 0..len {
            for i in 0..n {
                if i > 0 {
                    out.push(',');
                }
                write!(out, "{:.16e}", self.values[(t, i)]).expect("writing to String");
            }
            out.push('\n');
        }
        out
    }

    /// Parses comma-separated rows; a non-numeric first line is taken as a header.
    pub fn from_csv(text: &str) -> Result<Self> {
        let mut rows: Vec<Vec<f64>> = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let parsed: std::result::Result<Vec<f64>, _> = line.split(',').map(|f| f.trim().parse::<f64>()).collect();
            match parsed {
                Ok(row) => rows.push(row),
                Err(_) if rows.is_empty() && lineno == 0 => continue,
                Err(e) => return Err(Error::Parse(format!("line {}: {e}", lineno + 1))),
            }
        }
        let n = rows
            .first()
            .map(Vec::len)
            .ok_or_else(|| Error::InsufficientData("no sample rows".into()))?;
        if let Some(pos) = rows.iter().position(|r| r.len() != n) {
            return Err(Error::Parse(format!(
                "sample row {} has {} columns, expected {n}",
                pos + 1,
                rows[pos].len()
            )));
        }
        let flat: Vec<f64> = rows.into_iter().flatten().collect();
        Self::new(Mat::from_row_slice(flat.len() / n, n, &flat))
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        Self::from_csv(&std::fs::read_to_string(path)?)
    }
}
