//! Negative selection strategies.
//!
//! [`greedy_select`] builds the subset one candidate at a time, each step
//! taking the candidate with the largest `vᵢᵀ H⁻¹ vᵢ` (equivalently, the
//! largest marginal gain in `log det H`) and folding it into `H` with a
//! rank-one update. [`brute_force_select`] solves the same objective exactly
//! for small pools, and [`baseline_select`] provides the uniform, softmax, and
//! hard-negative comparisons.

use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::linalg::{Cholesky, InformationState};
use crate::pool::PreparedPool;
use crate::rng::Xoshiro256StarStar;

/// Largest number of subsets [`brute_force_select`] will enumerate.
pub const BRUTE_FORCE_LIMIT: u64 = 2_000_000;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Strategy {
    Mass,
    MassReselect,
    Random,
    Softmax,
    #[serde(rename = "topk")]
    TopK,
    Brute,
}

impl Strategy {
    pub const ALL: [Strategy; 6] = [
        Strategy::Mass,
        Strategy::MassReselect,
        Strategy::Random,
        Strategy::Softmax,
        Strategy::TopK,
        Strategy::Brute,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Strategy::Mass => "mass",
            Strategy::MassReselect => "mass-reselect",
            Strategy::Random => "random",
            Strategy::Softmax => "softmax",
            Strategy::TopK => "topk",
            Strategy::Brute => "brute",
        }
    }

    pub fn is_stochastic(self) -> bool {
        matches!(self, Strategy::Random | Strategy::Softmax)
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Strategy::ALL
            .into_iter()
            .find(|st| st.as_str() == s)
            .ok_or_else(|| invalid(format!("unknown strategy `{s}`")))
    }
}

/// Output of one selection run.
#[derive(Clone, Debug, PartialEq)]
pub struct SelectionResult {
    pub pool_id: String,
    pub strategy: Strategy,
    /// Requested budget, before any truncation.
    pub n: usize,
    pub selected: Vec<usize>,
    /// `log(1 + α₀ x_k)` per step.
    pub gains: Vec<f64>,
    /// `x_k = v_{i_k}ᵀ H_{k−1}⁻¹ v_{i_k}` per step.
    pub quads: Vec<f64>,
    /// `log det H_k` after each step.
    pub logdet_trajectory: Vec<f64>,
    /// `log det H_0 = d log γ`.
    pub logdet_initial: f64,
    pub seed: Option<u64>,
    /// Set when `n` exceeded the pool size and every candidate was taken.
    pub truncated: bool,
}

impl SelectionResult {
    pub fn logdet_final(&self) -> f64 {
        self.logdet_trajectory
            .last()
            .copied()
            .unwrap_or(self.logdet_initial)
    }

    /// `log det H_n − log det H_0`.
    pub fn logdet_gain(&self) -> f64 {
        self.logdet_final() - self.logdet_initial
    }
}

fn check_budget(n: usize, gamma: f64) -> Result<()> {
    if n == 0 {
        return Err(invalid("selection budget n must be at least 1"));
    }
    if !(gamma > 0.0) || !gamma.is_finite() {
        return Err(invalid(format!(
            "ridge gamma must be positive, got {gamma}"
        )));
    }
    Ok(())
}

/// Folds `order` into `γI` step by step, recording quads, gains, and the
/// log-det trajectory.
fn record(
    pool: &PreparedPool,
    strategy: Strategy,
    n: usize,
    order: Vec<usize>,
    gamma: f64,
    seed: Option<u64>,
    truncated: bool,
) -> Result<SelectionResult> {
    let mut state = InformationState::new(gamma, pool.alpha0, pool.dim())?;
    let logdet_initial = state.logdet();
    let mut gains = Vec::with_capacity(order.len());
    let mut quads = Vec::with_capacity(order.len());
    let mut trajectory = Vec::with_capacity(order.len());
    for &i in &order {
        let v = &pool.v0[i];
        let q = state.quad_form(v)?;
        quads.push(q);
        gains.push((pool.alpha0 * q).ln_1p());
        state.apply_update(v)?;
        trajectory.push(state.logdet());
    }
    Ok(SelectionResult {
        pool_id: pool.pool_id.clone(),
        strategy,
        n,
        selected: order,
        gains,
        quads,
        logdet_trajectory: trajectory,
        logdet_initial,
        seed,
        truncated,
    })
}

/// Greedy D-optimal selection.
///
/// Without reselection at most `N` distinct candidates are taken; a larger
/// `n` is truncated and flagged. With reselection every step scores all `N`
/// candidates, so indices may repeat and exactly `n` steps are taken. Ties go
/// to the lowest index.
pub fn greedy_select(
    pool: &PreparedPool,
    n: usize,
    gamma: f64,
    reselection: bool,
) -> Result<SelectionResult> {
    check_budget(n, gamma)?;
    let total = pool.n_candidates();
    let (steps, truncated) = if reselection || n <= total {
        (n, false)
    } else {
        (total, true)
    };
    let strategy = if reselection {
        Strategy::MassReselect
    } else {
        Strategy::Mass
    };

    let mut state = InformationState::new(gamma, pool.alpha0, pool.dim())?;
    let logdet_initial = state.logdet();
    let mut taken = vec![false; total];
    let mut selected = Vec::with_capacity(steps);
    let mut gains = Vec::with_capacity(steps);
    let mut quads = Vec::with_capacity(steps);
    let mut trajectory = Vec::with_capacity(steps);

    for _ in 0..steps {
        let mut best: Option<(usize, f64)> = None;
        for (i, v) in pool.v0.iter().enumerate() {
            if taken[i] {
                continue;
            }
            let q = state.quad_form(v)?;
            if best.is_none_or(|(_, bq)| q > bq) {
                best = Some((i, q));
            }
        }
        let (i, q) = best.expect("at least one eligible candidate");
        if !reselection {
            taken[i] = true;
        }
        selected.push(i);
        quads.push(q);
        gains.push((pool.alpha0 * q).ln_1p());
        state.apply_update(&pool.v0[i])?;
        trajectory.push(state.logdet());
    }

    Ok(SelectionResult {
        pool_id: pool.pool_id.clone(),
        strategy,
        n,
        selected,
        gains,
        quads,
        logdet_trajectory: trajectory,
        logdet_initial,
        seed: None,
        truncated,
    })
}

/// `log det(γI + α Σ_{i∈subset} vᵢvᵢᵀ)` from a fresh Cholesky factorization.
pub fn design_logdet(pool: &PreparedPool, subset: &[usize], gamma: f64) -> Result<f64> {
    let d = pool.dim();
    let mut h = DMatrix::identity(d, d) * gamma;
    for &i in subset {
        let v: &DVector<f64> = &pool.v0[i];
        h.ger(pool.alpha0, v, v, 1.0);
    }
    Ok(Cholesky::factor(&h)?.logdet())
}

fn binomial(n: usize, k: usize) -> u64 {
    let k = k.min(n - k);
    let mut acc: u128 = 1;
    for i in 0..k {
        acc = acc * (n - i) as u128 / (i + 1) as u128;
        if acc > u64::MAX as u128 {
            return u64::MAX;
        }
    }
    acc as u64
}

/// Advances `idx` to the next size-`k` combination of `0..n` in
/// lexicographic order; returns false after the last one.
fn next_combination(idx: &mut [usize], n: usize) -> bool {
    let k = idx.len();
    let mut i = k;
    while i > 0 {
        i -= 1;
        if idx[i] < n - k + i {
            idx[i] += 1;
            for j in (i + 1)..k {
                idx[j] = idx[j - 1] + 1;
            }
            return true;
        }
    }
    false
}

/// Exact maximizer of `log det H(S)` over all size-`n` subsets.
///
/// Ties (within a relative `1e-12`) go to the lexicographically smallest
/// index set. Refuses when the number of subsets exceeds
/// [`BRUTE_FORCE_LIMIT`].
pub fn brute_force_select(pool: &PreparedPool, n: usize, gamma: f64) -> Result<SelectionResult> {
    check_budget(n, gamma)?;
    let total = pool.n_candidates();
    let (k, truncated) = if n <= total {
        (n, false)
    } else {
        (total, true)
    };
    let count = binomial(total, k);
    if count > BRUTE_FORCE_LIMIT {
        return Err(Error::CapacityExceeded(format!(
            "C({total}, {k}) = {count} subsets exceeds the brute-force limit of {BRUTE_FORCE_LIMIT}"
        )));
    }
    let mut idx: Vec<usize> = (0..k).collect();
    let mut best = idx.clone();
    let mut best_val = design_logdet(pool, &idx, gamma)?;
    while next_combination(&mut idx, total) {
        let val = design_logdet(pool, &idx, gamma)?;
        if val > best_val + 1e-12 * best_val.abs().max(1.0) {
            best_val = val;
            best.copy_from_slice(&idx);
        }
    }
    record(pool, Strategy::Brute, n, best, gamma, None, truncated)
}

/// Random, softmax, or top-k selection without replacement.
pub fn baseline_select(
    pool: &PreparedPool,
    n: usize,
    strategy: Strategy,
    gamma: f64,
    seed: u64,
) -> Result<SelectionResult> {
    check_budget(n, gamma)?;
    let total = pool.n_candidates();
    if n > total {
        return Err(invalid(format!("budget {n} exceeds pool size {total}")));
    }
    let (order, seed) = match strategy {
        Strategy::Random => {
            let mut rng = Xoshiro256StarStar::seed_from_u64(seed);
            let mut idx: Vec<usize> = (0..total).collect();
            for k in 0..n {
                let j = k + rng.next_index(total - k);
                idx.swap(k, j);
            }
            idx.truncate(n);
            (idx, Some(seed))
        }
        Strategy::Softmax => {
            let mut rng = Xoshiro256StarStar::seed_from_u64(seed);
            let mut weights = pool.q0.clone();
            let mut order = Vec::with_capacity(n);
            for _ in 0..n {
                let i = rng.next_categorical(&weights);
                weights[i] = 0.0;
                order.push(i);
            }
            (order, Some(seed))
        }
        Strategy::TopK => {
            let mut idx: Vec<usize> = (0..total).collect();
            idx.sort_by(|&a, &b| pool.s[b].total_cmp(&pool.s[a]).then(a.cmp(&b)));
            idx.truncate(n);
            (idx, None)
        }
        other => return Err(invalid(format!("`{other}` is not a baseline strategy"))),
    };
    record(pool, strategy, n, order, gamma, seed, false)
}

/// Dispatches on `strategy`. Budgets above the pool size are truncated for
/// every strategy except `mass-reselect`.
pub fn select(
    pool: &PreparedPool,
    n: usize,
    strategy: Strategy,
    gamma: f64,
    seed: u64,
) -> Result<SelectionResult> {
    match strategy {
        Strategy::Mass => greedy_select(pool, n, gamma, false),
        Strategy::MassReselect => greedy_select(pool, n, gamma, true),
        Strategy::Brute => brute_force_select(pool, n, gamma),
        _ => {
            let total = pool.n_candidates();
            let mut r = baseline_select(pool, n.min(total), strategy, gamma, seed)?;
            r.n = n;
            r.truncated = n > total;
            Ok(r)
        }
    }
}
