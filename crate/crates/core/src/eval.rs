//! Theory checks and benchmark metrics.
//!
//! These functions measure how far a subset-trained estimator `θ̂` drifts from
//! the full-pool optimum `θ*`, verify the perturbation inequality that bounds
//! that drift, and instrument the constants (`κ`, `ρ`, `q_min⁰`, `L_v⁰`, ...)
//! that appear in the leverage-decay bound.

use std::collections::BTreeSet;

use nalgebra::{DMatrix, DVector};

use crate::error::{invalid, Result};
use crate::linalg::{min_eigenvalue, Cholesky};
use crate::objective::{curvature_scale, gradient, hessian};
use crate::pool::PreparedPool;
use crate::select::{SelectionResult, Strategy};

fn check_theta(theta: &DVector<f64>, pool: &PreparedPool, name: &str) -> Result<()> {
    if theta.len() != pool.dim() {
        return Err(invalid(format!(
            "{name} has length {}, pool {} has dimension {}",
            theta.len(),
            pool.pool_id,
            pool.dim()
        )));
    }
    Ok(())
}

/// `max_{i,j} |(φᵢ − φⱼ)ᵀ(θ̂ − θ*)|`, computed as the range of the projections
/// `φᵢᵀ(θ̂ − θ*)`.
pub fn relative_logit_error(
    theta_hat: &DVector<f64>,
    theta_star: &DVector<f64>,
    pool: &PreparedPool,
) -> Result<f64> {
    check_theta(theta_hat, pool, "theta_hat")?;
    check_theta(theta_star, pool, "theta_star")?;
    let delta = theta_hat - theta_star;
    let (lo, hi) = pool
        .phi
        .iter()
        .map(|p| p.dot(&delta))
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), x| {
            (lo.min(x), hi.max(x))
        });
    Ok((hi - lo).max(0.0))
}

/// Both sides of the subset-estimator stability inequality with `Σ₀ = γI`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StabilityCheck {
    /// `√γ ‖θ̂ − θ*‖₂`
    pub lhs: f64,
    /// `‖∇L(θ*; S) − ∇L(θ*; C)‖₂ / √γ`
    pub rhs: f64,
    pub holds: bool,
}

pub const STABILITY_SLACK: f64 = 1e-9;

pub fn stability_check(
    theta_hat: &DVector<f64>,
    theta_star: &DVector<f64>,
    pool: &PreparedPool,
    subset: &[usize],
    gamma: f64,
    beta: f64,
) -> Result<StabilityCheck> {
    check_theta(theta_hat, pool, "theta_hat")?;
    if !(gamma > 0.0) {
        return Err(invalid("gamma must be positive"));
    }
    let g_sub = gradient(pool, theta_star, subset, beta)?;
    let g_full = gradient(pool, theta_star, &pool.all_indices(), beta)?;
    let lhs = gamma.sqrt() * (theta_hat - theta_star).norm();
    let rhs = (g_sub - g_full).norm() / gamma.sqrt();
    Ok(StabilityCheck {
        lhs,
        rhs,
        holds: lhs <= rhs + STABILITY_SLACK,
    })
}

/// Error of one subset estimate against the full-pool optimum.
#[derive(Clone, Debug, PartialEq)]
pub struct ErrorReport {
    pub pool_id: String,
    pub n: usize,
    pub strategy: Strategy,
    pub rel_logit_error: f64,
    pub theta_norm_gap: f64,
    pub stability_lhs: f64,
    pub stability_rhs: f64,
    pub stability_holds: bool,
}

pub fn error_report(
    theta_hat: &DVector<f64>,
    theta_star: &DVector<f64>,
    pool: &PreparedPool,
    selection: &SelectionResult,
    gamma: f64,
    beta: f64,
) -> Result<ErrorReport> {
    let subset = training_subset(&selection.selected);
    let st = stability_check(theta_hat, theta_star, pool, &subset, gamma, beta)?;
    Ok(ErrorReport {
        pool_id: pool.pool_id.clone(),
        n: selection.n,
        strategy: selection.strategy,
        rel_logit_error: relative_logit_error(theta_hat, theta_star, pool)?,
        theta_norm_gap: (theta_hat - theta_star).norm(),
        stability_lhs: st.lhs,
        stability_rhs: st.rhs,
        stability_holds: st.holds,
    })
}

/// The training subset of a selection: each selected index once, ascending.
/// Reselection runs may repeat an index. The loss does not depend on order,
/// and a canonical order makes `S = C` fits bit-identical to full-pool fits.
pub fn training_subset(indices: &[usize]) -> Vec<usize> {
    indices
        .iter()
        .copied()
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect()
}

/// Leverage quantities of a finished selection, recomputed from fresh
/// Cholesky factorizations of every intermediate design matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct LeverageDiagnostics {
    /// `(vᵢ⁰)ᵀ(H_n⁰)⁻¹vᵢ⁰` for every candidate.
    pub leverages: Vec<f64>,
    pub max_leverage: f64,
    /// `max ‖vᵢ⁰‖²`
    pub l_v0: f64,
    /// `L_v⁰ / γ`
    pub quad_cap: f64,
    pub quad_cap_holds: bool,
    /// `|log det H_n − log det H_0 − Σ log(1 + α₀ x_k)|`
    pub telescoping_residual: f64,
    /// `d log(1 + α₀ n L_v⁰ / (γ d))`
    pub logdet_cap: f64,
    /// `logdet_cap − (log det H_n − log det H_0)`; nonnegative when the cap holds.
    pub logdet_cap_slack: f64,
    /// Largest ratio of any candidate's quad to the best eligible quad, over
    /// all steps. At least 1.
    pub kappa_empirical: f64,
    pub x_series: Vec<f64>,
}

fn design_matrix(pool: &PreparedPool, indices: &[usize], gamma: f64) -> DMatrix<f64> {
    let d = pool.dim();
    let mut h = DMatrix::identity(d, d) * gamma;
    for &i in indices {
        h.ger(pool.alpha0, &pool.v0[i], &pool.v0[i], 1.0);
    }
    h
}

fn quad_with(chol: &Cholesky, v: &DVector<f64>) -> f64 {
    let mut y = v.clone();
    chol.solve_lower_in_place(&mut y);
    y.norm_squared()
}

pub fn leverage_diagnostics(
    pool: &PreparedPool,
    selection: &SelectionResult,
    gamma: f64,
) -> Result<LeverageDiagnostics> {
    if selection.pool_id != pool.pool_id {
        return Err(invalid(format!(
            "selection for pool {} applied to pool {}",
            selection.pool_id, pool.pool_id
        )));
    }
    let total = pool.n_candidates();
    if let Some(&i) = selection.selected.iter().find(|&&i| i >= total) {
        return Err(invalid(format!(
            "selected index {i} out of range for {total} candidates"
        )));
    }
    if selection.quads.len() != selection.selected.len() {
        return Err(invalid("selection quads and indices differ in length"));
    }
    if !(gamma > 0.0) {
        return Err(invalid("gamma must be positive"));
    }
    let reselect = selection.strategy == Strategy::MassReselect;
    let d = pool.dim();
    let l_v0 = pool.v0.iter().map(|v| v.norm_squared()).fold(0.0, f64::max);
    let quad_cap = l_v0 / gamma;

    let mut kappa: f64 = 1.0;
    let mut taken = vec![false; total];
    for k in 0..selection.selected.len() {
        let chol = Cholesky::factor(&design_matrix(pool, &selection.selected[..k], gamma))?;
        let quads: Vec<f64> = pool.v0.iter().map(|v| quad_with(&chol, v)).collect();
        let best_eligible = quads
            .iter()
            .zip(&taken)
            .filter(|(_, &t)| reselect || !t)
            .map(|(q, _)| *q)
            .fold(0.0, f64::max);
        let best_any = quads.iter().copied().fold(0.0, f64::max);
        if best_any > 0.0 {
            kappa = kappa.max(if best_eligible > 0.0 {
                best_any / best_eligible
            } else {
                f64::INFINITY
            });
        }
        taken[selection.selected[k]] = true;
    }

    let final_chol = Cholesky::factor(&design_matrix(pool, &selection.selected, gamma))?;
    let leverages: Vec<f64> = pool.v0.iter().map(|v| quad_with(&final_chol, v)).collect();
    let max_leverage = leverages.iter().copied().fold(0.0, f64::max);
    let logdet_gain = final_chol.logdet() - d as f64 * gamma.ln();
    let gain_sum: f64 = selection
        .quads
        .iter()
        .map(|&x| (pool.alpha0 * x).ln_1p())
        .sum();
    let n = selection.selected.len();
    let logdet_cap = d as f64 * (pool.alpha0 * n as f64 * l_v0 / (gamma * d as f64)).ln_1p();
    let quad_cap_holds = selection
        .quads
        .iter()
        .all(|&x| x <= quad_cap * (1.0 + 1e-12) + 1e-300);

    Ok(LeverageDiagnostics {
        leverages,
        max_leverage,
        l_v0,
        quad_cap,
        quad_cap_holds,
        telescoping_residual: (logdet_gain - gain_sum).abs(),
        logdet_cap,
        logdet_cap_slack: logdet_cap - logdet_gain,
        kappa_empirical: kappa,
        x_series: selection.quads.clone(),
    })
}

/// The leverage-decay bound
/// `B_n = κ/(ρ q_min⁰) · (1 + α₀L_v⁰/γ)/α₀ · (d/n) · log(1 + α₀ n L_v⁰/(γ d))`.
#[allow(clippy::too_many_arguments)]
pub fn bound_bn(
    d: usize,
    n: usize,
    alpha0: f64,
    gamma: f64,
    l_v0: f64,
    kappa: f64,
    rho: f64,
    q_min0: f64,
) -> Result<f64> {
    if d == 0 || n == 0 {
        return Err(invalid("d and n must be positive"));
    }
    for (name, x) in [
        ("alpha0", alpha0),
        ("gamma", gamma),
        ("L_v0", l_v0),
        ("kappa", kappa),
    ] {
        if !(x > 0.0) {
            return Err(invalid(format!("{name} must be positive, got {x}")));
        }
    }
    if !(rho > 0.0 && rho <= 1.0) {
        return Err(invalid(format!("rho must lie in (0, 1], got {rho}")));
    }
    if !(q_min0 > 0.0 && q_min0 <= 1.0) {
        return Err(invalid(format!("q_min0 must lie in (0, 1], got {q_min0}")));
    }
    let (d, n) = (d as f64, n as f64);
    let lead = kappa / (rho * q_min0);
    let curvature = (1.0 + alpha0 * l_v0 / gamma) / alpha0;
    let volume = (d / n) * (alpha0 * n * l_v0 / (gamma * d)).ln_1p();
    Ok(lead * curvature * volume)
}

/// The batch estimation bound
/// `√((d/4) log((1/δ + k c_min/γ) / ((1 − c_min k/γ)^{1/d} δ))) + 2√γ`.
///
/// Returns `Ok(None)` when `1 − c_min k/γ ≤ 0`, where the expression has no
/// real value.
pub fn batch_bound(d: usize, delta: f64, k: usize, c_min: f64, gamma: f64) -> Result<Option<f64>> {
    if !(delta > 0.0 && delta < 1.0) {
        return Err(invalid(format!("delta must lie in (0, 1), got {delta}")));
    }
    if d == 0 || k == 0 || !(c_min > 0.0) || !(gamma > 0.0) {
        return Err(invalid("d, k, c_min and gamma must be positive"));
    }
    let (df, kf) = (d as f64, k as f64);
    let base = 1.0 - c_min * kf / gamma;
    if base <= 0.0 {
        return Ok(None);
    }
    let numer = 1.0 / delta + kf * c_min / gamma;
    let denom = base.powf(1.0 / df) * delta;
    let inner = (df / 4.0) * (numer / denom).ln();
    Ok(Some(inner.sqrt() + 2.0 * gamma.sqrt()))
}

/// Smallest `μ` with `Σ ⪰ μ H`, i.e. the smallest eigenvalue of
/// `L⁻¹ Σ L⁻ᵀ` where `H = L Lᵀ`.
pub fn generalized_min_eigenvalue(sigma: &DMatrix<f64>, h: &DMatrix<f64>) -> Result<f64> {
    let chol = Cholesky::factor(h)?;
    let d = h.nrows();
    // M = L⁻¹ Σ L⁻ᵀ, built column by column.
    let mut tmp = DMatrix::zeros(d, d);
    for j in 0..d {
        let mut c = sigma.column(j).into_owned();
        chol.solve_lower_in_place(&mut c);
        tmp.set_column(j, &c);
    }
    let tmp_t = tmp.transpose();
    let mut m = DMatrix::zeros(d, d);
    for j in 0..d {
        let mut c = tmp_t.column(j).into_owned();
        chol.solve_lower_in_place(&mut c);
        m.set_column(j, &c);
    }
    Ok(min_eigenvalue(&m))
}

/// Full assumption and bound instrumentation for one pool and selection.
#[derive(Clone, Debug, PartialEq)]
pub struct DiagnosticsReport {
    pub q_min0: f64,
    pub l_v0: f64,
    pub l_phi: f64,
    pub l_b: f64,
    pub r_theta: f64,
    pub kappa_empirical: f64,
    /// Smallest `μ` with `Σ_n ⪰ μ H_n⁰`, before clamping to 1.
    pub rho_empirical: f64,
    pub c_min: f64,
    pub c_max: f64,
    pub x_series: Vec<f64>,
    pub telescoping_residual: f64,
    /// `B_n` with measured constants; `None` when `L_v⁰ = 0`.
    pub bound_bn_value: Option<f64>,
    /// `max_i (φᵢ − φ̄₀)ᵀ Σ_n⁻¹ (φᵢ − φ̄₀)` with `Σ_n = γI + ∇²L(θ*; S_n)`.
    pub max_centered_leverage: f64,
    pub leverage: LeverageDiagnostics,
}

/// Points at which the curvature scale range `[c_min, c_max]` is probed.
const SEGMENT_PROBES: usize = 11;

pub fn diagnostics(
    pool: &PreparedPool,
    selection: &SelectionResult,
    theta0: &DVector<f64>,
    theta_star: &DVector<f64>,
    theta_hat: &DVector<f64>,
    gamma: f64,
    beta: f64,
) -> Result<DiagnosticsReport> {
    check_theta(theta0, pool, "theta0")?;
    check_theta(theta_star, pool, "theta_star")?;
    check_theta(theta_hat, pool, "theta_hat")?;
    let leverage = leverage_diagnostics(pool, selection, gamma)?;
    let d = pool.dim();
    let subset = training_subset(&selection.selected);

    let q_min0 = pool.q0.iter().copied().fold(f64::INFINITY, f64::min);
    let l_phi = pool.phi.iter().map(|p| p.norm()).fold(0.0, f64::max);
    let l_b = pool.b.iter().map(|b| b.abs()).fold(0.0, f64::max);
    let r_theta = theta_star.norm().max(theta_hat.norm());

    let mut sigma_n = hessian(pool, theta_star, &subset, beta)?;
    for i in 0..d {
        sigma_n[(i, i)] += gamma;
    }
    let sigma_chol = Cholesky::factor(&sigma_n)?;
    let max_centered_leverage = pool
        .phi
        .iter()
        .map(|p| quad_with(&sigma_chol, &(p - &pool.phi_bar0)))
        .fold(0.0, f64::max);
    let h_n = design_matrix(pool, &selection.selected, gamma);
    let rho_empirical = generalized_min_eigenvalue(&sigma_n, &h_n)?;

    let mut c_min = curvature_scale(pool, theta0, beta)?;
    let mut c_max = c_min;
    for t in 0..SEGMENT_PROBES {
        let w = t as f64 / (SEGMENT_PROBES - 1) as f64;
        let probe = theta_star + (theta_hat - theta_star) * w;
        let c = curvature_scale(pool, &probe, beta)?;
        c_min = c_min.min(c);
        c_max = c_max.max(c);
    }

    let bound_bn_value = if leverage.l_v0 > 0.0 && !subset.is_empty() {
        Some(bound_bn(
            d,
            selection.selected.len(),
            pool.alpha0,
            gamma,
            leverage.l_v0,
            leverage.kappa_empirical,
            rho_empirical.min(1.0),
            q_min0,
        )?)
    } else {
        None
    };

    Ok(DiagnosticsReport {
        q_min0,
        l_v0: leverage.l_v0,
        l_phi,
        l_b,
        r_theta,
        kappa_empirical: leverage.kappa_empirical,
        rho_empirical,
        c_min,
        c_max,
        x_series: leverage.x_series.clone(),
        telescoping_residual: leverage.telescoping_residual,
        bound_bn_value,
        max_centered_leverage,
        leverage,
    })
}

/// Ranking metrics of the preferred item among all `N + 1` items.
#[derive(Clone, Debug, PartialEq)]
pub struct RankingMetrics {
    /// 1-based rank of the preferred item; ties count against it.
    pub rank: usize,
    pub recall: Vec<(usize, f64)>,
    pub ndcg: Vec<(usize, f64)>,
    pub mrr: f64,
}

/// Scores every item by `β φ(x, y)ᵀθ`. Candidates are compared through their
/// feature differences, so the preferred item scores 0.
pub fn ranking_metrics(
    theta: &DVector<f64>,
    pool: &PreparedPool,
    ks: &[usize],
    beta: f64,
) -> Result<RankingMetrics> {
    check_theta(theta, pool, "theta")?;
    let items = pool.n_candidates() + 1;
    if ks.is_empty() {
        return Err(invalid("at least one cutoff k is required"));
    }
    if let Some(&k) = ks.iter().find(|&&k| k == 0 || k > items) {
        return Err(invalid(format!("cutoff {k} outside 1..={items}")));
    }
    if !(beta > 0.0) {
        return Err(invalid("beta must be positive"));
    }
    let rank = 1 + pool
        .phi
        .iter()
        .filter(|p| beta * p.dot(theta) >= 0.0)
        .count();
    let recall = ks
        .iter()
        .map(|&k| (k, if rank <= k { 1.0 } else { 0.0 }))
        .collect();
    let ndcg = ks
        .iter()
        .map(|&k| {
            (
                k,
                if rank <= k {
                    1.0 / ((rank + 1) as f64).log2()
                } else {
                    0.0
                },
            )
        })
        .collect();
    Ok(RankingMetrics {
        rank,
        recall,
        ndcg,
        mrr: 1.0 / rank as f64,
    })
}

/// `|a ∩ b| / |a ∪ b|`, with two empty sets scoring 1.
pub fn jaccard(a: &[usize], b: &[usize]) -> f64 {
    let a: BTreeSet<_> = a.iter().collect();
    let b: BTreeSet<_> = b.iter().collect();
    let union = a.union(&b).count();
    if union == 0 {
        return 1.0;
    }
    a.intersection(&b).count() as f64 / union as f64
}
