#![allow(dead_code)]

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub type Mat = DMatrix<f64>;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn gaussian(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Mat {
    Mat::from_fn(rows, cols, |_, _| rng.sample(StandardNormal))
}

/// `L Lᵀ + diag(d)` with `L` of `r` columns and `d` uniform in `[0.2, 1.2]`.
pub fn random_static_target(rng: &mut ChaCha8Rng, n: usize, r: usize) -> Mat {
    let l = gaussian(rng, n, r);
    let d = DVector::from_fn(n, |_, _| 0.2 + rng.random::<f64>());
    &l * l.transpose() + Mat::from_diagonal(&d)
}

/// Dense static minimum-trace factor analysis:
///
/// max Σ dᵢ  s.t.  S - diag(d) ⪰ 0,  d ≥ 0
///
/// by a primal log-barrier method with damped Newton steps. Returns the
/// low-rank part `S - diag(d*)`. Needs `S ≻ 0`.
pub fn static_min_trace(s: &Mat) -> Mat {
    let n = s.nrows();
    let lam_min = s.clone().symmetric_eigen().eigenvalues.min();
    assert!(lam_min > 0.0, "oracle needs a positive definite target");
    let mut d = DVector::from_element(n, 0.5 * lam_min);
    let scale = s.diagonal().max();

    // f_t(d) = t Σ d + logdet(S - D) + Σ log d
    let objective = |d: &DVector<f64>, t: f64| -> Option<f64> {
        if d.iter().any(|&v| v <= 0.0) {
            return None;
        }
        let chol = (s - Mat::from_diagonal(d)).cholesky()?;
        let logdet: f64 = 2.0 * chol.l().diagonal().iter().map(|v| v.ln()).sum::<f64>();
        Some(t * d.sum() + logdet + d.iter().map(|v| v.ln()).sum::<f64>())
    };

    let mut t = 1.0 / scale;
    while 2.0 * n as f64 / t > 1e-13 * scale {
        for _ in 0..200 {
            let inv = (s - Mat::from_diagonal(&d))
                .cholesky()
                .expect("iterate stays interior")
                .inverse();
            let grad = DVector::from_fn(n, |i, _| t - inv[(i, i)] + 1.0 / d[i]);
            // Negative Hessian of f_t: (W ∘ W) + diag(1/d²), positive definite.
            let h = Mat::from_fn(n, n, |i, j| {
                inv[(i, j)] * inv[(i, j)] + if i == j { 1.0 / (d[i] * d[i]) } else { 0.0 }
            });
            let step = h.cholesky().expect("barrier Hessian is positive definite").solve(&grad);
            let decrement = grad.dot(&step);
            if decrement < 1e-20 {
                break;
            }
            let f0 = objective(&d, t).expect("interior");
            let mut a = 1.0;
            loop {
                let cand = &d + &step * a;
                if let Some(f) = objective(&cand, t) {
                    if f >= f0 + 0.25 * a * decrement {
                        d = cand;
                        break;
                    }
                }
                a *= 0.5;
                if a < 1e-20 {
                    break;
                }
            }
            if a < 1e-20 || decrement < 1e-18 {
                break;
            }
        }
        t *= 8.0;
    }
    s - Mat::from_diagonal(&d)
}

/// Random symmetric `n(m+1)` square matrix.
pub fn random_symmetric(rng: &mut ChaCha8Rng, size: usize) -> Mat {
    let a = gaussian(rng, size, size);
    (&a + a.transpose()) * 0.5
}

pub fn max_abs(m: &Mat) -> f64 {
    m.amax()
}
