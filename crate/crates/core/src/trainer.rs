//! Ridge-regularized minimizers of the preference loss.
//!
//! The objective is `F(θ) = L(θ; S) + (γ/2)‖θ‖²` for one pool, or the average
//! of per-pool losses plus the same ridge for a batch. `F` is strongly convex,
//! so damped Newton with an Armijo backtracking line search converges to the
//! unique minimizer.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::error::{invalid, Result};
use crate::linalg::Cholesky;
use crate::objective::{evaluate, Curvature, FitMeta, PolicyParams};
use crate::pool::PreparedPool;

const ARMIJO: f64 = 1e-4;
const MIN_STEP: f64 = 1e-20;

#[derive(Clone, Debug)]
pub struct TrainConfig {
    pub beta: f64,
    pub gamma: f64,
    /// Stop once `‖∇F‖₂ ≤ tol`.
    pub tol: f64,
    pub max_iter: usize,
    pub theta_init: Option<DVector<f64>>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            beta: 0.1,
            gamma: 0.1,
            tol: 1e-10,
            max_iter: 200,
            theta_init: None,
        }
    }
}

impl TrainConfig {
    fn validate(&self) -> Result<()> {
        if !(self.beta > 0.0) || !(self.gamma > 0.0) {
            return Err(invalid("beta and gamma must be positive"));
        }
        if !(self.tol > 0.0) || self.max_iter == 0 {
            return Err(invalid("tol must be positive and max_iter at least 1"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct FitReport {
    pub theta: PolicyParams,
    pub residual: f64,
    pub iterations: usize,
    pub converged: bool,
    pub objective: f64,
}

/// Objective value, gradient, and Hessian of `F` at one point.
#[derive(Clone, Debug)]
pub struct Regularized {
    pub value: f64,
    pub gradient: DVector<f64>,
    pub hessian: DMatrix<f64>,
}

/// `F(θ) = (1/k) Σ L(θ; Sᵢ) + (γ/2)‖θ‖²` over `(pool, subset)` pairs.
///
/// Per-pool terms may be evaluated in parallel; they are summed in input
/// order so the result does not depend on scheduling.
pub fn regularized_objective(
    terms: &[(&PreparedPool, &[usize])],
    theta: &DVector<f64>,
    beta: f64,
    gamma: f64,
    with_hessian: bool,
) -> Result<Regularized> {
    let d = theta.len();
    let curv = Curvature {
        hessian: with_hessian,
        lower_bound: false,
    };
    let evals: Vec<_> = if terms.len() > 1 {
        terms
            .par_iter()
            .map(|(p, s)| evaluate(p, theta, s, beta, curv))
            .collect::<Result<_>>()?
    } else {
        terms
            .iter()
            .map(|(p, s)| evaluate(p, theta, s, beta, curv))
            .collect::<Result<_>>()?
    };
    let inv_k = 1.0 / terms.len() as f64;
    let mut value = 0.0;
    let mut gradient = DVector::zeros(d);
    let mut hessian = DMatrix::zeros(d, d);
    for e in &evals {
        value += e.loss;
        gradient += &e.gradient;
        if let Some(h) = &e.hessian {
            hessian += h;
        }
    }
    value = value * inv_k + 0.5 * gamma * theta.norm_squared();
    gradient = gradient * inv_k + theta * gamma;
    if with_hessian {
        hessian *= inv_k;
        for i in 0..d {
            hessian[(i, i)] += gamma;
        }
    }
    Ok(Regularized {
        value,
        gradient,
        hessian,
    })
}

fn minimize(terms: &[(&PreparedPool, &[usize])], config: &TrainConfig) -> Result<FitReport> {
    config.validate()?;
    let d = terms[0].0.dim();
    let mut theta = match &config.theta_init {
        Some(t) if t.len() != d => {
            return Err(invalid(format!(
                "theta_init has length {}, expected {d}",
                t.len()
            )))
        }
        Some(t) => t.clone(),
        None => DVector::zeros(d),
    };
    let (beta, gamma) = (config.beta, config.gamma);
    let mut cur = regularized_objective(terms, &theta, beta, gamma, true)?;
    let mut iterations = 0;

    while iterations < config.max_iter && cur.gradient.norm() > config.tol {
        iterations += 1;
        let newton = Cholesky::factor(&cur.hessian)
            .ok()
            .map(|c| c.solve(&-&cur.gradient));
        let mut accepted = None;
        for dir in newton.into_iter().chain(std::iter::once(-&cur.gradient)) {
            let slope = cur.gradient.dot(&dir);
            if !(slope < 0.0) {
                continue;
            }
            let mut t = 1.0;
            while t >= MIN_STEP {
                let cand = &theta + &dir * t;
                let next = regularized_objective(terms, &cand, beta, gamma, true)?;
                let armijo = next.value <= cur.value + ARMIJO * t * slope;
                // Close to the optimum the decrease drops below the resolution
                // of F; accept a full step that still shrinks the gradient.
                let rounding = t == 1.0
                    && next.value <= cur.value + 4.0 * f64::EPSILON * cur.value.abs()
                    && next.gradient.norm() < cur.gradient.norm();
                if armijo || rounding {
                    accepted = Some((cand, next));
                    break;
                }
                t *= 0.5;
            }
            if accepted.is_some() {
                break;
            }
        }
        match accepted {
            Some((cand, next)) => {
                theta = cand;
                cur = next;
            }
            None => break,
        }
    }

    let residual = cur.gradient.norm();
    let converged = residual <= config.tol;
    Ok(FitReport {
        theta: PolicyParams {
            theta,
            meta: Some(FitMeta {
                residual,
                iterations,
                converged,
            }),
        },
        residual,
        iterations,
        converged,
        objective: cur.value,
    })
}

/// Minimizes `L(θ; subset) + (γ/2)‖θ‖²`.
pub fn fit(pool: &PreparedPool, subset: &[usize], config: &TrainConfig) -> Result<FitReport> {
    if subset.is_empty() {
        return Err(invalid("cannot fit on an empty subset"));
    }
    minimize(&[(pool, subset)], config)
}

/// Minimizes the full-pool objective.
pub fn fit_full(pool: &PreparedPool, config: &TrainConfig) -> Result<FitReport> {
    fit(pool, &pool.all_indices(), config)
}

/// Minimizes the batch objective `(1/k) Σ L_i(θ; S_i) + (γ/2)‖θ‖²`.
pub fn fit_batch(
    pools: &[PreparedPool],
    subsets: &[Vec<usize>],
    config: &TrainConfig,
) -> Result<FitReport> {
    if pools.is_empty() {
        return Err(invalid("batch must contain at least one pool"));
    }
    if pools.len() != subsets.len() {
        return Err(invalid(format!(
            "{} pools but {} subsets",
            pools.len(),
            subsets.len()
        )));
    }
    let d = pools[0].dim();
    if let Some(p) = pools.iter().find(|p| p.dim() != d) {
        return Err(invalid(format!(
            "pool {} has dimension {}, batch dimension is {d}",
            p.pool_id,
            p.dim()
        )));
    }
    if subsets.iter().any(|s| s.is_empty()) {
        return Err(invalid("every pool in a batch needs a nonempty subset"));
    }
    let terms: Vec<(&PreparedPool, &[usize])> = pools
        .iter()
        .zip(subsets)
        .map(|(p, s)| (p, s.as_slice()))
        .collect();
    minimize(&terms, config)
}
