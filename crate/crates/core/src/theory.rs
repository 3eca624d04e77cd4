//! Quadratic-proximal certificates.
//!
//! On a centered quadratic risk `½ (v − v*)ᵀ Σ (v − v*)` with proximal term
//! `(λ/2) (v − v_prev)ᵀ H (v − v_prev)`, the minimizer solves
//! `(Σ + λH) v = Σ v* + λ H v_prev`. Along every generalized eigenpair
//! `Σ q = ρ H q` (normalized `qᵀ H q = 1`) it blends the two anchors:
//!
//! ```text
//! ⟨v, q⟩_H = ρ/(ρ+λ) ⟨v*, q⟩_H + λ/(ρ+λ) ⟨v_prev, q⟩_H
//! ```
//!
//! The functions here compute both sides so they can be checked numerically.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{dot, gen_eig, norm2, norm_inf, spd_solve, sym_eig, Matrix};
use crate::proximal::ProximalMetric;

const COMPLEMENTARITY_REL: f64 = 1e-8;
const DESCENT_GRAD_TOL: f64 = 1e-10;
const DESCENT_MAX_ITERS: usize = 100_000;

#[derive(Debug, Clone)]
pub struct QuadraticRisk {
    pub sigma: Matrix,
    pub v_star: Vec<f64>,
}

impl QuadraticRisk {
    pub fn new(sigma: Matrix, v_star: Vec<f64>) -> Result<Self> {
        if !sigma.is_square() || sigma.rows() != v_star.len() {
            return Err(Error::pre("risk curvature and optimum disagree on dimension"));
        }
        if !sigma.is_symmetric(1e-12) {
            return Err(Error::pre("risk curvature must be symmetric"));
        }
        Ok(QuadraticRisk { sigma, v_star })
    }

    /// Curvature and optimum of the affine form `bᵀv + ½ vᵀΣv` (needs Σ ≻ 0).
    pub fn from_affine(sigma: Matrix, b: &[f64]) -> Result<Self> {
        let neg_b: Vec<f64> = b.iter().map(|x| -x).collect();
        let v_star = spd_solve(&sigma, &neg_b)?;
        QuadraticRisk::new(sigma, v_star)
    }

    pub fn dim(&self) -> usize {
        self.v_star.len()
    }

    pub fn value(&self, v: &[f64]) -> f64 {
        let d: Vec<f64> = v.iter().zip(&self.v_star).map(|(a, b)| a - b).collect();
        0.5 * self.sigma.quad_form(&d, &d)
    }
}

/// `ker(Σ) ∩ ker(H) = {0}`, tested as `λ_min(Σ + H) > 1e-8 · λ_max(Σ + H)`.
pub fn check_complementarity(sigma: &Matrix, h: &Matrix) -> Result<bool> {
    if sigma.shape() != h.shape() {
        return Err(Error::pre("complementarity check needs equal shapes"));
    }
    let eig = sym_eig(&sigma.add(h))?;
    let max = eig.values.first().copied().unwrap_or(0.0);
    let min = eig.values.last().copied().unwrap_or(0.0);
    Ok(max > 0.0 && min > COMPLEMENTARITY_REL * max)
}

fn proximal_system(risk: &QuadraticRisk, metric: &ProximalMetric, v_prev: &[f64]) -> Result<(Matrix, Matrix, Vec<f64>)> {
    let m = risk.dim();
    if metric.dim() != m || v_prev.len() != m {
        return Err(Error::pre(format!(
            "dimension mismatch: risk {m}, metric {}, v_prev {}",
            metric.dim(),
            v_prev.len()
        )));
    }
    let h = metric.dense();
    let lhs = risk.sigma.add(&h.scale(metric.lambda));
    let sv = risk.sigma.matvec(&risk.v_star);
    let hv = h.matvec(v_prev);
    let rhs = sv.iter().zip(&hv).map(|(a, b)| a + metric.lambda * b).collect();
    Ok((h, lhs, rhs))
}

/// Unique minimizer `(Σ + λH)⁻¹ (Σ v* + λ H v_prev)`.
pub fn closed_form_min(risk: &QuadraticRisk, metric: &ProximalMetric, v_prev: &[f64]) -> Result<Vec<f64>> {
    closed_form_min_impl(risk, metric, v_prev, false)
}

pub(crate) fn closed_form_min_impl(
    risk: &QuadraticRisk,
    metric: &ProximalMetric,
    v_prev: &[f64],
    flip_anchor_sign: bool,
) -> Result<Vec<f64>> {
    let (h, lhs, mut rhs) = proximal_system(risk, metric, v_prev)?;
    if !check_complementarity(&risk.sigma, &h)? {
        return Err(Error::Singularity(
            "Σ and H share a flat direction (complementarity fails)".into(),
        ));
    }
    if flip_anchor_sign {
        let hv = h.matvec(v_prev);
        for (r, x) in rhs.iter_mut().zip(hv) {
            *r -= 2.0 * metric.lambda * x;
        }
    }
    spd_solve(&lhs, &rhs).map_err(|e| match e {
        Error::Factorization { pivot } => {
            Error::Singularity(format!("Σ + λH is not positive definite (pivot {pivot})"))
        }
        other => other,
    })
}

/// Gradient `Σ(v − v*) + λH(v − v_prev)` of the proximal objective.
pub fn proximal_gradient(risk: &QuadraticRisk, metric: &ProximalMetric, v_prev: &[f64], v: &[f64]) -> Vec<f64> {
    let h = metric.dense();
    let d_star: Vec<f64> = v.iter().zip(&risk.v_star).map(|(a, b)| a - b).collect();
    let d_prev: Vec<f64> = v.iter().zip(v_prev).map(|(a, b)| a - b).collect();
    let g1 = risk.sigma.matvec(&d_star);
    let g2 = h.matvec(&d_prev);
    g1.iter().zip(&g2).map(|(a, b)| a + metric.lambda * b).collect()
}

/// `‖∇‖∞ / (1 + ‖v*‖∞ + ‖v_prev‖∞)` at `v`.
pub fn stationarity_residual(risk: &QuadraticRisk, metric: &ProximalMetric, v_prev: &[f64], v: &[f64]) -> f64 {
    let g = proximal_gradient(risk, metric, v_prev, v);
    norm_inf(&g) / (1.0 + norm_inf(&risk.v_star) + norm_inf(v_prev))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct InterpolationPair {
    pub rho: f64,
    pub coeff_new: f64,
    pub coeff_old: f64,
    pub lhs: f64,
    pub rhs: f64,
    pub abs_err: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct InterpolationReport {
    pub lambda: f64,
    pub pairs: Vec<InterpolationPair>,
    pub max_abs_err: f64,
    pub passed: bool,
}

/// Blending coefficients `(ρ/(ρ+λ), λ/(ρ+λ))`.
pub fn blend_coefficients(rho: f64, lambda: f64) -> (f64, f64) {
    let denom = rho + lambda;
    if denom == 0.0 {
        return (0.0, 1.0);
    }
    (rho / denom, lambda / denom)
}

/// Evaluates both sides of the generalized-eigen interpolation for `v_min`.
pub fn verify_interpolation(
    risk: &QuadraticRisk,
    metric: &ProximalMetric,
    v_prev: &[f64],
    v_min: &[f64],
) -> Result<InterpolationReport> {
    let h = metric.dense();
    let pairs = gen_eig(&risk.sigma, &h)?;
    let lambda = metric.lambda;
    let mut out = Vec::with_capacity(pairs.len());
    let mut max_abs_err = 0.0_f64;
    let mut passed = true;
    for k in 0..pairs.len() {
        let q = pairs.vector(k);
        let rho = pairs.values[k];
        let (coeff_new, coeff_old) = blend_coefficients(rho, lambda);
        // ⟨u, q⟩_H = uᵀ H q
        let ip = |u: &[f64]| h.quad_form(u, &q);
        let lhs = ip(v_min);
        let rhs = coeff_new * ip(&risk.v_star) + coeff_old * ip(v_prev);
        let abs_err = (lhs - rhs).abs();
        max_abs_err = max_abs_err.max(abs_err);
        passed &= abs_err <= 1e-8 * (1.0 + lhs.abs());
        out.push(InterpolationPair {
            rho,
            coeff_new,
            coeff_old,
            lhs,
            rhs,
            abs_err,
        });
    }
    Ok(InterpolationReport {
        lambda,
        pairs: out,
        max_abs_err,
        passed,
    })
}

#[derive(Debug, Clone)]
pub struct DescentOutcome {
    pub solution: Vec<f64>,
    pub iterations: usize,
    /// `‖descent − closed form‖∞`
    pub deviation: f64,
}

/// Minimizes the proximal objective iteratively from `v_prev` and compares
/// against [`closed_form_min`].
///
/// The iteration is conjugate-gradient descent with exact line search on the
/// quadratic, restarted along the steepest direction every `m` steps.
pub fn descent_vs_closed_form(
    risk: &QuadraticRisk,
    metric: &ProximalMetric,
    v_prev: &[f64],
) -> Result<DescentOutcome> {
    let closed = closed_form_min(risk, metric, v_prev)?;
    let (_, a, b) = proximal_system(risk, metric, v_prev)?;
    let m = risk.dim();
    let mut v = v_prev.to_vec();
    let grad_of = |v: &[f64]| -> Vec<f64> { a.matvec(v).iter().zip(&b).map(|(x, y)| x - y).collect() };
    let mut g = grad_of(&v);
    let mut d: Vec<f64> = g.iter().map(|x| -x).collect();
    let mut iterations = 0;
    while norm2(&g) > DESCENT_GRAD_TOL {
        if iterations == DESCENT_MAX_ITERS {
            return Err(Error::Convergence {
                iterations,
                residual: norm2(&g),
            });
        }
        let ad = a.matvec(&d);
        let curv = dot(&d, &ad);
        if !(curv > 0.0) {
            return Err(Error::Numeric("non-positive curvature along descent direction".into()));
        }
        let step = -dot(&g, &d) / curv;
        for (vi, di) in v.iter_mut().zip(&d) {
            *vi += step * di;
        }
        iterations += 1;
        let g_new = if iterations % m.max(1) == 0 {
            grad_of(&v)
        } else {
            g.iter().zip(&ad).map(|(gi, adi)| gi + step * adi).collect()
        };
        let beta = if iterations % m.max(1) == 0 {
            0.0
        } else {
            (dot(&g_new, &g_new) / dot(&g, &g)).max(0.0)
        };
        for (di, gi) in d.iter_mut().zip(&g_new) {
            *di = -gi + beta * *di;
        }
        g = g_new;
        if iterations % m.max(1) == 0 {
            // fresh gradient at restart
            g = grad_of(&v);
            d = g.iter().map(|x| -x).collect();
        }
    }
    let deviation = v
        .iter()
        .zip(&closed)
        .fold(0.0_f64, |acc, (x, y)| acc.max((x - y).abs()));
    Ok(DescentOutcome {
        solution: v,
        iterations,
        deviation,
    })
}

/// Empirical second moment `(1/n) Σ Φ Φᵀ` of tangent features.
pub fn tangent_sigma(features: &[Vec<f64>]) -> Result<Matrix> {
    let first = features
        .first()
        .ok_or_else(|| Error::pre("tangent_sigma needs at least one feature vector"))?;
    let m = first.len();
    let mut sigma = Matrix::zeros(m, m);
    for phi in features {
        if phi.len() != m {
            return Err(Error::pre("tangent features have unequal dimensions"));
        }
        for i in 0..m {
            for j in 0..m {
                sigma[(i, j)] += phi[i] * phi[j];
            }
        }
    }
    Ok(sigma.scale(1.0 / features.len() as f64))
}
