//! Recovery metrics and factor-count estimation.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::linalg;
use crate::pseudopoly::{FrequencyGrid, PseudoPolyMatrix};

pub const DEFAULT_FACTOR_THRESHOLD: f64 = 0.01;
pub const DEFAULT_GAP_RATIO: f64 = 3.0;
/// Below this [`common_share`] the common part is treated as absent.
pub const DEFAULT_MIN_COMMON_SHARE: f64 = 0.05;

/// Per-angle relative error `‖Ψ(θ) - Ψ̂(θ)‖₂ / ‖Ψ(θ)‖₂`.
#[derive(Debug, Clone, PartialEq)]
pub struct ErrorCurve {
    pub angles: Vec<f64>,
    pub values: Vec<f64>,
}

impl ErrorCurve {
    pub fn mean(&self) -> f64 {
        self.values.iter().sum::<f64>() / self.values.len() as f64
    }

    pub fn median(&self) -> f64 {
        let mut v = self.values.clone();
        v.sort_by(|a, b| a.total_cmp(b));
        let mid = v.len() / 2;
        if v.len().is_multiple_of(2) {
            0.5 * (v[mid - 1] + v[mid])
        } else {
            v[mid]
        }
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("angle,value\n");
        for (a, v) in self.angles.iter().zip(&self.values) {
            writeln!(out, "{a:.16e},{v:.16e}").expect("writing to String");
        }
        out
    }
}

/// `s_j = max_θ σ_j(Ψ̂(θ)) / σ_1(Ψ̂(θ))`, non-increasing with `s_1 = 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct SingularProfile {
    pub s: Vec<f64>,
}

impl SingularProfile {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("j,s_j\n");
        for (j, s) in self.s.iter().enumerate() {
            writeln!(out, "{},{s:.16e}", j + 1).expect("writing to String");
        }
        out
    }
}

pub fn pointwise_relative_error(
    truth: &PseudoPolyMatrix,
    estimate: &PseudoPolyMatrix,
    grid: &FrequencyGrid,
) -> Result<ErrorCurve> {
    let diff = truth.subtract(estimate)?;
    let mut values = Vec::with_capacity(grid.count());
    for &theta in grid.angles() {
        let denom = linalg::spectral_norm_hermitian(&truth.evaluate(theta));
        if denom == 0.0 {
            return Err(Error::ZeroDenominator { angle: theta });
        }
        values.push(linalg::spectral_norm_hermitian(&diff.evaluate(theta)) / denom);
    }
    Ok(ErrorCurve {
        angles: grid.angles().to_vec(),
        values,
    })
}

/// Grid average of [`pointwise_relative_error`].
pub fn avg_relative_error(truth: &PseudoPolyMatrix, estimate: &PseudoPolyMatrix, grid: &FrequencyGrid) -> Result<f64> {
    Ok(pointwise_relative_error(truth, estimate, grid)?.mean())
}

pub fn normalized_singular_values(estimate: &PseudoPolyMatrix, grid: &FrequencyGrid) -> Result<SingularProfile> {
    let n = estimate.n();
    let mut s = vec![0.0_f64; n];
    let mut any = false;
    for &theta in grid.angles() {
        let sv = linalg::hermitian_singular_values(&estimate.evaluate(theta));
        if sv[0] == 0.0 {
            continue;
        }
        any = true;
        for (acc, v) in s.iter_mut().zip(&sv) {
            *acc = acc.max(v / sv[0]);
        }
    }
    if !any {
        return Err(Error::ZeroSpectrum);
    }
    Ok(SingularProfile { s })
}

/// Number of common factors read off a singular profile.
///
/// The threshold rule counts the `s_j ≥ threshold`. A gap overrides it: if
/// the largest consecutive ratio `s_j / s_{j+1}`, taken over the `j` with
/// `s_j ≥ threshold`, exceeds `gap_ratio`, the answer is that `j`.
pub fn estimate_num_factors(profile: &SingularProfile, threshold: f64, gap_ratio: f64) -> usize {
    let s = &profile.s;
    let by_threshold = s.iter().rposition(|&v| v >= threshold).map_or(0, |j| j + 1);
    let mut best: Option<(usize, f64)> = None;
    for j in 0..s.len().saturating_sub(1) {
        if s[j] < threshold {
            break;
        }
        let ratio = if s[j + 1] > 0.0 { s[j] / s[j + 1] } else { f64::INFINITY };
        if best.is_none_or(|(_, r)| ratio > r) {
            best = Some((j + 1, ratio));
        }
    }
    match best {
        Some((j, ratio)) if ratio > gap_ratio => j,
        _ => by_threshold,
    }
}

/// `max_θ σ_1(Ψ_y(θ)) / max_θ σ_1(Ψ_x(θ))`.
pub fn common_share(psi_y: &PseudoPolyMatrix, psi_x: &PseudoPolyMatrix, grid: &FrequencyGrid) -> Result<f64> {
    let denom = psi_x.sup_norm(grid);
    if denom == 0.0 {
        return Err(Error::ZeroSpectrum);
    }
    Ok(psi_y.sup_norm(grid) / denom)
}

/// [`estimate_num_factors`], returning 0 when the common part carries less
/// than `min_share` of the spectrum.
pub fn estimate_num_factors_in(
    psi_y: &PseudoPolyMatrix,
    psi_x: &PseudoPolyMatrix,
    grid: &FrequencyGrid,
    threshold: f64,
    gap_ratio: f64,
    min_share: f64,
) -> Result<usize> {
    if common_share(psi_y, psi_x, grid)? < min_share {
        return Ok(0);
    }
    let profile = normalized_singular_values(psi_y, grid)?;
    Ok(estimate_num_factors(&profile, threshold, gap_ratio))
}
