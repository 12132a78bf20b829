//! The multi-negative Plackett–Luce preference loss under a log-linear policy.
//!
//! For a subset `S` of candidate negatives the loss is
//!
//! ```text
//! L(θ; S) = −log σ(Z),    Z = −log Σ_{j∈S} exp(β(φⱼᵀθ + bⱼ))
//! ```
//!
//! With subset softmax weights `qⱼ` and their mean feature `φ̄ = Σ qⱼ φⱼ`:
//!
//! ```text
//! ∇L  = β (1 − σ(Z)) φ̄
//! ∇²L = β² (1 − σ(Z)) [ σ(Z) φ̄φ̄ᵀ + Σ qⱼ (φⱼ − φ̄)(φⱼ − φ̄)ᵀ ]
//!     ⪰ β² (1 − σ(Z)) Σ qⱼ (φⱼ − φ̄)(φⱼ − φ̄)ᵀ
//! ```
//!
//! `Z` is computed with a max-shifted log-sum-exp and `−log σ(Z)` as
//! `softplus(−Z)`, so every quantity stays finite for scores of magnitude
//! up to several hundred.

use nalgebra::{DMatrix, DVector};

use crate::error::{invalid, Result};
use crate::numeric::{log_sum_exp, sigmoid, softplus};
use crate::pool::{all_finite, PreparedPool};

/// Summary of a fit that produced a parameter vector.
#[derive(Clone, Debug, PartialEq)]
pub struct FitMeta {
    pub residual: f64,
    pub iterations: usize,
    pub converged: bool,
}

/// Parameters `θ` of the log-linear policy.
#[derive(Clone, Debug, PartialEq)]
pub struct PolicyParams {
    pub theta: DVector<f64>,
    pub meta: Option<FitMeta>,
}

impl PolicyParams {
    pub fn new(theta: DVector<f64>) -> Result<Self> {
        if !all_finite(&theta) {
            return Err(invalid("theta has non-finite entries"));
        }
        Ok(Self { theta, meta: None })
    }

    pub fn zeros(dim: usize) -> Self {
        Self {
            theta: DVector::zeros(dim),
            meta: None,
        }
    }

    pub fn dim(&self) -> usize {
        self.theta.len()
    }
}

impl From<DVector<f64>> for PolicyParams {
    fn from(theta: DVector<f64>) -> Self {
        Self { theta, meta: None }
    }
}

/// Loss and derivatives of one pool at one parameter value.
#[derive(Clone, Debug)]
pub struct LossEvaluation {
    pub loss: f64,
    pub z: f64,
    /// Subset softmax weights, in subset order.
    pub weights: Vec<f64>,
    pub mean_feature: DVector<f64>,
    pub gradient: DVector<f64>,
    pub hessian: Option<DMatrix<f64>>,
    pub hessian_lower_bound: Option<DMatrix<f64>>,
}

fn check_subset(pool: &PreparedPool, subset: &[usize], allow_empty: bool) -> Result<()> {
    let n = pool.n_candidates();
    if subset.is_empty() && !allow_empty {
        return Err(invalid("subset must be nonempty"));
    }
    let mut seen = vec![false; n];
    for &j in subset {
        if j >= n {
            return Err(invalid(format!(
                "index {j} out of range for pool of {n} candidates"
            )));
        }
        if std::mem::replace(&mut seen[j], true) {
            return Err(invalid(format!("duplicate index {j} in subset")));
        }
    }
    Ok(())
}

fn check_args(pool: &PreparedPool, theta: &DVector<f64>, beta: f64) -> Result<()> {
    if theta.len() != pool.dim() {
        return Err(invalid(format!(
            "theta has length {}, pool has dimension {}",
            theta.len(),
            pool.dim()
        )));
    }
    if !(beta > 0.0) || !beta.is_finite() {
        return Err(invalid(format!("beta must be positive, got {beta}")));
    }
    Ok(())
}

/// `β(φⱼᵀθ + bⱼ)` for each `j` in `subset`, in subset order.
pub fn subset_scores(
    pool: &PreparedPool,
    theta: &DVector<f64>,
    subset: &[usize],
    beta: f64,
) -> Result<Vec<f64>> {
    check_args(pool, theta, beta)?;
    check_subset(pool, subset, true)?;
    Ok(subset
        .iter()
        .map(|&j| beta * (pool.phi[j].dot(theta) + pool.b[j]))
        .collect())
}

/// Which second-order terms [`evaluate`] should fill in.
#[derive(Clone, Copy, Debug, Default)]
pub struct Curvature {
    pub hessian: bool,
    pub lower_bound: bool,
}

/// Evaluates the loss, gradient, and optionally second-order terms.
pub fn evaluate(
    pool: &PreparedPool,
    theta: &DVector<f64>,
    subset: &[usize],
    beta: f64,
    curvature: Curvature,
) -> Result<LossEvaluation> {
    check_args(pool, theta, beta)?;
    check_subset(pool, subset, false)?;
    let scores = subset_scores(pool, theta, subset, beta)?;
    let lse = log_sum_exp(&scores);
    let z = -lse;
    let weights: Vec<f64> = scores.iter().map(|&s| (s - lse).exp()).collect();
    let loss = softplus(lse);
    // 1 − σ(Z) = σ(−Z), which keeps precision when Z is large and positive.
    let miss = sigmoid(lse);

    let d = pool.dim();
    let mut mean_feature = DVector::zeros(d);
    for (&j, &w) in subset.iter().zip(&weights) {
        mean_feature.axpy(w, &pool.phi[j], 1.0);
    }
    let gradient = &mean_feature * (beta * miss);

    let (hessian, hessian_lower_bound) = if curvature.hessian || curvature.lower_bound {
        let scale = beta * beta * miss;
        let mut dispersion = DMatrix::zeros(d, d);
        for (&j, &w) in subset.iter().zip(&weights) {
            let c = &pool.phi[j] - &mean_feature;
            dispersion.ger(w, &c, &c, 1.0);
        }
        dispersion *= scale;
        let hess = curvature.hessian.then(|| {
            let mut h = dispersion.clone();
            h.ger(scale * sigmoid(z), &mean_feature, &mean_feature, 1.0);
            h
        });
        (hess, curvature.lower_bound.then_some(dispersion))
    } else {
        (None, None)
    };

    Ok(LossEvaluation {
        loss,
        z,
        weights,
        mean_feature,
        gradient,
        hessian,
        hessian_lower_bound,
    })
}

/// Loss value with `z`, weights, mean feature and gradient filled.
pub fn loss(
    pool: &PreparedPool,
    theta: &DVector<f64>,
    subset: &[usize],
    beta: f64,
) -> Result<LossEvaluation> {
    evaluate(pool, theta, subset, beta, Curvature::default())
}

pub fn gradient(
    pool: &PreparedPool,
    theta: &DVector<f64>,
    subset: &[usize],
    beta: f64,
) -> Result<DVector<f64>> {
    Ok(loss(pool, theta, subset, beta)?.gradient)
}

pub fn hessian(
    pool: &PreparedPool,
    theta: &DVector<f64>,
    subset: &[usize],
    beta: f64,
) -> Result<DMatrix<f64>> {
    let curv = Curvature {
        hessian: true,
        lower_bound: false,
    };
    Ok(evaluate(pool, theta, subset, beta, curv)?
        .hessian
        .expect("requested"))
}

/// The dispersion-only Loewner lower bound of the Hessian.
pub fn hessian_lower_bound(
    pool: &PreparedPool,
    theta: &DVector<f64>,
    subset: &[usize],
    beta: f64,
) -> Result<DMatrix<f64>> {
    let curv = Curvature {
        hessian: false,
        lower_bound: true,
    };
    Ok(evaluate(pool, theta, subset, beta, curv)?
        .hessian_lower_bound
        .expect("requested"))
}

/// `β²(1 − σ(Z_C(θ)))` over the whole pool: the curvature scale whose range
/// over a parameter region bounds the Hessian.
pub fn curvature_scale(pool: &PreparedPool, theta: &DVector<f64>, beta: f64) -> Result<f64> {
    let scores = subset_scores(pool, theta, &pool.all_indices(), beta)?;
    Ok(beta * beta * sigmoid(log_sum_exp(&scores)))
}
