//! Trace minimization over block-Gram matrices.
//!
//! Solves
//!
//! ```text
//! min tr(Y)  s.t.  Y, Z ⪰ 0,
//!                  D_k(Y + Z) = R_k,     k = 0..m_x
//!                  D_k(Y + Z) = 0,       k = m_x+1..m_z
//!                  D_k(Y)     = 0,       k = m_y+1..m_z
//!                  D_k(Z) diagonal,      k = 0..m_z
//! ```
//!
//! with Douglas-Rachford splitting (ADMM form) between the affine set and
//! the product PSD cone. Distinct lags touch disjoint blocks and
//! `D_k D_k* = c_k I`, so the affine projection reduces to an entrywise
//! projection in coefficient space followed by a scaled adjoint lift.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gram::{self, BlockGram};
use crate::linalg::{self, Mat};
use crate::pseudopoly::{FrequencyGrid, PseudoPolyMatrix, DEFAULT_PSD_TOL};

/// MA orders `(m_x, m_y, m_z)` with `m_x ≤ m_y ≤ m_z`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Orders {
    pub mx: usize,
    pub my: usize,
    pub mz: usize,
}

impl Orders {
    pub fn uniform(m: usize) -> Self {
        Self { mx: m, my: m, mz: m }
    }
}

/// What the coefficient pair `(P_k, Q_k) = (D_k Y, D_k Z)` must satisfy.
#[derive(Debug, Clone, PartialEq)]
enum LagConstraint {
    /// `P + Q = target`, `Q` diagonal.
    Match(Mat),
    /// `P = 0`, `Q = 0`.
    Vanish,
}

#[derive(Debug, Clone)]
pub struct TraceMinProblem {
    target: PseudoPolyMatrix,
    orders: Orders,
    lags: Vec<LagConstraint>,
}

impl TraceMinProblem {
    pub fn n(&self) -> usize {
        self.target.n()
    }

    /// Degree of the Gram parametrization (`m_z`).
    pub fn m(&self) -> usize {
        self.orders.mz
    }

    pub fn orders(&self) -> Orders {
        self.orders
    }

    /// The target padded to degree `m_z`.
    pub fn target(&self) -> &PseudoPolyMatrix {
        &self.target
    }

    /// Lags where `D_k(Y+Z)` is pinned to zero (`m_x+1..=m_z`).
    pub fn sum_zero_lags(&self) -> Vec<usize> {
        (self.orders.mx + 1..=self.orders.mz).collect()
    }

    /// Lags where `D_k(Y)` is pinned to zero (`m_y+1..=m_z`).
    pub fn y_zero_lags(&self) -> Vec<usize> {
        (self.orders.my + 1..=self.orders.mz).collect()
    }
}

/// Validates the target and records the lag constraints.
pub fn build_problem(psi_x: &PseudoPolyMatrix, orders: Option<Orders>) -> Result<TraceMinProblem> {
    build_problem_on_grid(psi_x, orders, &FrequencyGrid::default(), DEFAULT_PSD_TOL)
}

pub fn build_problem_on_grid(
    psi_x: &PseudoPolyMatrix,
    orders: Option<Orders>,
    grid: &FrequencyGrid,
    psd_tol: f64,
) -> Result<TraceMinProblem> {
    let orders = orders.unwrap_or_else(|| Orders::uniform(psi_x.degree()));
    let Orders { mx, my, mz } = orders;
    if !(mx <= my && my <= mz) {
        return Err(Error::InconsistentOrders(format!(
            "need m_x <= m_y <= m_z, got ({mx}, {my}, {mz})"
        )));
    }
    if psi_x.degree() > mz {
        return Err(Error::InconsistentOrders(format!(
            "target degree {} exceeds m_z = {mz}",
            psi_x.degree()
        )));
    }
    if (mx + 1..=psi_x.degree()).any(|k| psi_x.coeff(k).amax() != 0.0) {
        return Err(Error::InconsistentOrders(format!(
            "target has nonzero lags beyond m_x = {mx}"
        )));
    }
    let report = psi_x.is_psd_on_grid(grid, psd_tol * (1.0 + psi_x.coeff(0).amax()));
    if !report.psd {
        return Err(Error::NotPsd {
            min_eigenvalue: report.min_eigenvalue,
            angle: report.witness_angle,
        });
    }
    let target = psi_x.with_degree(mz)?;
    let lags = (0..=mz)
        .map(|k| {
            if k <= my {
                LagConstraint::Match(target.coeff(k).clone())
            } else {
                LagConstraint::Vanish
            }
        })
        .collect();
    Ok(TraceMinProblem { target, orders, lags })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SolverSettings {
    pub tol_primal: f64,
    pub tol_cone: f64,
    pub tol_gap: f64,
    pub max_iter: usize,
    pub over_relaxation: f64,
}

impl Default for SolverSettings {
    fn default() -> Self {
        Self {
            tol_primal: 1e-8,
            tol_cone: 1e-8,
            tol_gap: 1e-10,
            max_iter: 200_000,
            over_relaxation: 1.8,
        }
    }
}

impl SolverSettings {
    pub fn validate(&self) -> Result<()> {
        let tols = [self.tol_primal, self.tol_cone, self.tol_gap];
        if tols.iter().any(|t| !(t.is_finite() && *t > 0.0)) {
            return Err(Error::InvalidDimensions("solver tolerances must be positive".into()));
        }
        if self.max_iter == 0 {
            return Err(Error::InvalidDimensions("max_iter must be at least 1".into()));
        }
        if !(self.over_relaxation > 1.0 && self.over_relaxation < 2.0) {
            return Err(Error::InvalidDimensions("over_relaxation must lie in (1, 2)".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SolveStatus {
    Optimal,
    MaxIter,
    Infeasible,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Residuals {
    /// Largest `‖D_k(Y+Z) - R_k‖_F / (1 + ‖R_k‖_F)`, pinned `D_k(Y)` included.
    pub affine: f64,
    /// Largest negative eigenvalue magnitude of `Y` or `Z`.
    pub cone: f64,
    /// Largest off-diagonal magnitude of any `D_k(Z)`.
    pub diag: f64,
}

impl Residuals {
    pub fn max(&self) -> f64 {
        self.affine.max(self.cone).max(self.diag)
    }
}

#[derive(Debug, Clone)]
pub struct DecompositionSolution {
    pub y: BlockGram,
    pub z: BlockGram,
    pub psi_y: PseudoPolyMatrix,
    pub psi_z: PseudoPolyMatrix,
    pub objective: f64,
    pub status: SolveStatus,
    pub residuals: Residuals,
    pub iterations: usize,
    /// `(iteration, max residual)` recorded every [`HISTORY_STRIDE`] iterations.
    pub history: Vec<(usize, f64)>,
}

pub const HISTORY_STRIDE: usize = 10;

const CHECK_EVERY: usize = 10;
const RHO_UPDATE_EVERY: usize = 50;
const RHO_BALANCE: f64 = 2.0;
const GAP_WINDOW: usize = 100;
const INFEASIBLE_WINDOW: usize = 5000;

pub fn solve(problem: &TraceMinProblem, settings: &SolverSettings) -> Result<DecompositionSolution> {
    solve_with_observer(problem, settings, None, |_, _, _| {})
}

/// Like [`solve`], calling `observer(iteration, Y, Z)` every `every`
/// iterations with the current (unscaled) PSD iterates.
pub fn solve_with_observer<F>(
    problem: &TraceMinProblem,
    settings: &SolverSettings,
    every: Option<usize>,
    mut observer: F,
) -> Result<DecompositionSolution>
where
    F: FnMut(usize, &Mat, &Mat),
{
    settings.validate()?;
    let n = problem.n();
    let m = problem.m();
    let size = n * (m + 1);

    // Work on Ψ_x / c with c = ‖Ψ_x‖; the minimizer scales linearly.
    let scale = problem.target.sup_norm(&FrequencyGrid::default());
    if scale == 0.0 {
        let zero = BlockGram::zeros(n, m);
        return Ok(finish(problem, zero.clone(), zero, SolveStatus::Optimal, 0, Vec::new()));
    }
    let lags: Vec<LagConstraint> = problem
        .lags
        .iter()
        .map(|l| match l {
            LagConstraint::Match(t) => LagConstraint::Match(t / scale),
            LagConstraint::Vanish => LagConstraint::Vanish,
        })
        .collect();
    let proj = AffineProjector { n, m, lags };
    let target_norms: Vec<f64> = (0..=m)
        .map(|k| match &proj.lags[k] {
            LagConstraint::Match(t) => t.norm(),
            LagConstraint::Vanish => 0.0,
        })
        .collect();

    let alpha = settings.over_relaxation;
    let cost = Mat::identity(size, size);
    let mut rho = 1.0_f64;

    let (mut vy, mut vz) = (Mat::zeros(size, size), Mat::zeros(size, size));
    let (mut uy, mut uz) = (Mat::zeros(size, size), Mat::zeros(size, size));
    let mut history = Vec::new();
    let mut objectives: Vec<f64> = Vec::new();
    let mut infeasible_mark: Option<(f64, f64)> = None;
    let mut status = SolveStatus::MaxIter;
    let mut iterations = settings.max_iter;
    let mut prim_res = f64::INFINITY;
    let mut dual_res = f64::INFINITY;

    for iter in 1..=settings.max_iter {
        // x-update: affine projection of the shifted point.
        let mut xy = &vy - &uy - &cost / rho;
        let mut xz = &vz - &uz;
        proj.project(&mut xy, &mut xz, false);

        // Over-relaxed PSD projection.
        let hy = &xy * alpha + &vy * (1.0 - alpha);
        let hz = &xz * alpha + &vz * (1.0 - alpha);
        let wy = &hy + &uy;
        let wz = &hz + &uz;
        let ny = linalg::project_psd(&wy);
        let nz = linalg::project_psd(&wz);
        uy = wy - &ny;
        uz = wz - &nz;

        let check = iter % CHECK_EVERY == 0 || iter == settings.max_iter;
        let rho_step = iter % RHO_UPDATE_EVERY == 0;
        if check || rho_step {
            prim_res = ((&xy - &ny).norm_squared() + (&xz - &nz).norm_squared()).sqrt();
            dual_res = rho * ((&ny - &vy).norm_squared() + (&nz - &vz).norm_squared()).sqrt();
        }
        vy = ny;
        vz = nz;

        if let Some(k) = every {
            if k > 0 && iter % k == 0 {
                observer(iter, &(&vy * scale), &(&vz * scale));
            }
        }

        if check {
            let res = scaled_residuals(&proj, &vy, &vz, &target_norms, scale);
            if iter % HISTORY_STRIDE == 0 {
                history.push((iter, res.max()));
            }
            objectives.push(vy.trace());

            // Dual feasibility: C + ρu must lie in the range of the constraint adjoint.
            let mut dy = &cost / rho + &uy;
            let mut dz = uz.clone();
            proj.project(&mut dy, &mut dz, true);
            let dual_infeas = rho * (dy.norm_squared() + dz.norm_squared()).sqrt() / (1.0 + cost.norm());

            let lookback = GAP_WINDOW / CHECK_EVERY;
            let gap_ok = objectives.len() > lookback && {
                let now = objectives[objectives.len() - 1];
                let then = objectives[objectives.len() - 1 - lookback];
                (now - then).abs() <= settings.tol_gap * (1.0 + now.abs())
            };
            if res.affine <= settings.tol_primal
                && res.diag <= settings.tol_primal
                && res.cone <= settings.tol_cone
                && dual_infeas <= settings.tol_primal
                && gap_ok
            {
                status = SolveStatus::Optimal;
                iterations = iter;
                break;
            }

            if iter % INFEASIBLE_WINDOW == 0 {
                let norm = (vy.norm_squared() + vz.norm_squared()).sqrt();
                if let Some((res_then, norm_then)) = infeasible_mark {
                    if res.affine > (1.0 - 1e-3) * res_then && norm > 10.0 * norm_then.max(1e-300) {
                        status = SolveStatus::Infeasible;
                        iterations = iter;
                        break;
                    }
                }
                infeasible_mark = Some((res.affine, norm));
            }
        }

        // Residual balancing; the scaled dual variable follows ρ.
        if rho_step && prim_res.is_finite() && dual_res.is_finite() {
            let ratio = if dual_res > 0.0 {
                prim_res / dual_res
            } else {
                f64::INFINITY
            };
            let factor = if ratio > RHO_BALANCE {
                2.0
            } else if ratio < 1.0 / RHO_BALANCE {
                0.5
            } else {
                1.0
            };
            if factor != 1.0 {
                rho *= factor;
                uy /= factor;
                uz /= factor;
            }
        }
    }

    let y = BlockGram::from_symmetric(n, m, linalg::symmetrize(&(vy * scale)));
    let z = BlockGram::from_symmetric(n, m, linalg::symmetrize(&(vz * scale)));
    Ok(finish(problem, y, z, status, iterations, history))
}

fn finish(
    problem: &TraceMinProblem,
    y: BlockGram,
    z: BlockGram,
    status: SolveStatus,
    iterations: usize,
    history: Vec<(usize, f64)>,
) -> DecompositionSolution {
    let audit = verify_solution_parts(problem, &y, &z);
    DecompositionSolution {
        psi_y: y.represent(),
        psi_z: z.represent(),
        objective: y.trace(),
        y,
        z,
        status,
        residuals: Residuals {
            affine: audit.affine_residual,
            cone: audit.cone_violation,
            diag: audit.diag_violation,
        },
        iterations,
        history,
    }
}

/// Residuals of the scaled iterate, reported in original units.
fn scaled_residuals(proj: &AffineProjector, y: &Mat, z: &Mat, target_norms: &[f64], scale: f64) -> Residuals {
    let (n, m) = (proj.n, proj.m);
    let mut affine = 0.0_f64;
    let mut diag = 0.0_f64;
    for (k, (lag, target_norm)) in proj.lags.iter().zip(target_norms).enumerate() {
        let p = gram::lag_of(y, n, m, k);
        let q = gram::lag_of(z, n, m, k);
        let err = match lag {
            LagConstraint::Match(t) => (&p + &q - t).norm(),
            LagConstraint::Vanish => (&p + &q).norm().max(p.norm()),
        };
        affine = affine.max(err * scale / (1.0 + target_norm * scale));
        diag = diag.max(off_diagonal_max(&q) * scale);
    }
    // The iterates come out of an eigenvalue clip, so the cone residual is
    // only rounding.
    Residuals {
        affine,
        cone: 0.0,
        diag,
    }
}

fn off_diagonal_max(q: &Mat) -> f64 {
    let mut worst = 0.0_f64;
    for i in 0..q.nrows() {
        for j in 0..q.ncols() {
            if i != j {
                worst = worst.max(q[(i, j)].abs());
            }
        }
    }
    worst
}

struct AffineProjector {
    n: usize,
    m: usize,
    lags: Vec<LagConstraint>,
}

impl AffineProjector {
    /// Orthogonal projection of `(Y, Z)` onto the constraint set, or onto its
    /// homogeneous (zero right-hand side) version.
    fn project(&self, y: &mut Mat, z: &mut Mat, homogeneous: bool) {
        let (n, m) = (self.n, self.m);
        for (k, lag) in self.lags.iter().enumerate() {
            let p = gram::lag_of(y, n, m, k);
            let q = gram::lag_of(z, n, m, k);
            let (p_new, q_new) = match lag {
                LagConstraint::Match(t) => {
                    let mut p_new = Mat::zeros(n, n);
                    let mut q_new = Mat::zeros(n, n);
                    for i in 0..n {
                        for j in 0..n {
                            let target = if homogeneous { 0.0 } else { t[(i, j)] };
                            if i == j {
                                let shift = (p[(i, j)] + q[(i, j)] - target) / 2.0;
                                p_new[(i, j)] = p[(i, j)] - shift;
                                q_new[(i, j)] = q[(i, j)] - shift;
                            } else {
                                p_new[(i, j)] = target;
                            }
                        }
                    }
                    (p_new, q_new)
                }
                LagConstraint::Vanish => (Mat::zeros(n, n), Mat::zeros(n, n)),
            };
            let c = gram::lag_gram_scale(m, k);
            gram::add_adjoint_lag(y, n, m, k, &((p_new - p) / c));
            gram::add_adjoint_lag(z, n, m, k, &((q_new - q) / c));
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VerificationReport {
    pub feasible: bool,
    pub cone_violation: f64,
    pub affine_residual: f64,
    pub diag_violation: f64,
    pub objective: f64,
}

/// Recomputes every constraint from the returned Gram matrices.
pub fn verify_solution(problem: &TraceMinProblem, solution: &DecompositionSolution, tol: f64) -> VerificationReport {
    let mut report = verify_solution_parts(problem, &solution.y, &solution.z);
    report.feasible = report.cone_violation <= tol && report.affine_residual <= tol && report.diag_violation <= tol;
    report
}

fn verify_solution_parts(problem: &TraceMinProblem, y: &BlockGram, z: &BlockGram) -> VerificationReport {
    let cone_violation = (-y.min_eigenvalue()).max(-z.min_eigenvalue()).max(0.0);
    let mut affine_residual = 0.0_f64;
    let mut diag_violation = 0.0_f64;
    for (k, lag) in problem.lags.iter().enumerate() {
        let p = y.lag(k);
        let q = z.lag(k);
        let err = match lag {
            LagConstraint::Match(t) => (&p + &q - t).norm() / (1.0 + t.norm()),
            LagConstraint::Vanish => (&p + &q).norm().max(p.norm()),
        };
        affine_residual = affine_residual.max(err);
        diag_violation = diag_violation.max(off_diagonal_max(&q));
    }
    VerificationReport {
        feasible: false,
        cone_violation,
        affine_residual,
        diag_violation,
        objective: y.trace(),
    }
}
