//! Candidate pools: the raw per-prompt inputs and their preprocessed form.

use nalgebra::DVector;

use crate::error::{invalid, Result};
use crate::numeric::{log_sum_exp, sigmoid, softmax};

/// Weights below this value are floored before taking square roots.
pub const Q_FLOOR: f64 = 1e-300;

/// One prompt: the preferred response and its candidate negatives, as raw
/// feature vectors with reference-policy log-probabilities.
#[derive(Clone, Debug, PartialEq)]
pub struct RawPool {
    pub pool_id: String,
    pub preferred: DVector<f64>,
    pub candidates: Vec<DVector<f64>>,
    pub logp_ref_preferred: f64,
    pub logp_ref_candidates: Vec<f64>,
    /// Ground-truth parameters, when the pool is synthetic.
    pub theta_true: Option<DVector<f64>>,
}

impl RawPool {
    pub fn dim(&self) -> usize {
        self.preferred.len()
    }

    pub fn n_candidates(&self) -> usize {
        self.candidates.len()
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.dim();
        if d == 0 {
            return Err(invalid(format!(
                "pool {}: zero-dimensional features",
                self.pool_id
            )));
        }
        if self.candidates.is_empty() {
            return Err(invalid(format!("pool {}: no candidates", self.pool_id)));
        }
        if self.logp_ref_candidates.len() != self.candidates.len() {
            return Err(invalid(format!(
                "pool {}: {} candidates but {} reference log-probabilities",
                self.pool_id,
                self.candidates.len(),
                self.logp_ref_candidates.len()
            )));
        }
        if !all_finite(&self.preferred) || !self.logp_ref_preferred.is_finite() {
            return Err(invalid(format!(
                "pool {}: non-finite preferred entry",
                self.pool_id
            )));
        }
        for (i, c) in self.candidates.iter().enumerate() {
            if c.len() != d {
                return Err(invalid(format!(
                    "pool {}: candidate {i} has length {}, expected {d}",
                    self.pool_id,
                    c.len()
                )));
            }
            if !all_finite(c) || !self.logp_ref_candidates[i].is_finite() {
                return Err(invalid(format!(
                    "pool {}: candidate {i} is non-finite",
                    self.pool_id
                )));
            }
        }
        if let Some(t) = &self.theta_true {
            if t.len() != d || !all_finite(t) {
                return Err(invalid(format!("pool {}: bad theta_true", self.pool_id)));
            }
        }
        Ok(())
    }
}

pub(crate) fn all_finite(v: &DVector<f64>) -> bool {
    v.iter().all(|x| x.is_finite())
}

/// A pool after preprocessing at a fixed parameter `θ₀` and scale `β`.
///
/// `phi[i]` is the feature difference of candidate `i` against the preferred
/// response, `b[i]` its reference offset, `s[i] = β(φᵢᵀθ₀ + bᵢ)` its score,
/// `q0` the full-pool softmax of the scores, and `v0[i] = √q0ᵢ (φᵢ − φ̄₀)` its
/// centered Fisher contribution. `alpha0 = β²(1 − σ(z_c0))` scales every
/// rank-one term of the information matrix.
#[derive(Clone, Debug)]
pub struct PreparedPool {
    pub pool_id: String,
    pub beta: f64,
    pub phi: Vec<DVector<f64>>,
    pub b: Vec<f64>,
    pub s: Vec<f64>,
    pub q0: Vec<f64>,
    pub phi_bar0: DVector<f64>,
    pub v0: Vec<DVector<f64>>,
    pub z_c0: f64,
    pub alpha0: f64,
}

impl PreparedPool {
    pub fn dim(&self) -> usize {
        self.phi_bar0.len()
    }

    pub fn n_candidates(&self) -> usize {
        self.phi.len()
    }

    pub fn all_indices(&self) -> Vec<usize> {
        (0..self.n_candidates()).collect()
    }
}

/// Computes every preprocessed quantity of `raw` at `theta0`.
pub fn prepare_pool(raw: &RawPool, theta0: &DVector<f64>, beta: f64) -> Result<PreparedPool> {
    raw.validate()?;
    if !(beta > 0.0) || !beta.is_finite() {
        return Err(invalid(format!("beta must be positive, got {beta}")));
    }
    let d = raw.dim();
    if theta0.len() != d {
        return Err(invalid(format!(
            "theta0 has length {}, pool {} has dimension {d}",
            theta0.len(),
            raw.pool_id
        )));
    }
    if !all_finite(theta0) {
        return Err(invalid("theta0 has non-finite entries"));
    }

    let phi: Vec<DVector<f64>> = raw.candidates.iter().map(|c| c - &raw.preferred).collect();
    let b: Vec<f64> = raw
        .logp_ref_candidates
        .iter()
        .map(|lc| raw.logp_ref_preferred - lc)
        .collect();
    let s: Vec<f64> = phi
        .iter()
        .zip(&b)
        .map(|(p, bi)| beta * (p.dot(theta0) + bi))
        .collect();
    let q0: Vec<f64> = softmax(&s).into_iter().map(|q| q.max(Q_FLOOR)).collect();

    let mut phi_bar0 = DVector::zeros(d);
    for (p, &q) in phi.iter().zip(&q0) {
        phi_bar0.axpy(q, p, 1.0);
    }
    let v0 = phi
        .iter()
        .zip(&q0)
        .map(|(p, &q)| (p - &phi_bar0) * q.sqrt())
        .collect();

    let z_c0 = -log_sum_exp(&s);
    let alpha0 = beta * beta * sigmoid(-z_c0);

    Ok(PreparedPool {
        pool_id: raw.pool_id.clone(),
        beta,
        phi,
        b,
        s,
        q0,
        phi_bar0,
        v0,
        z_c0,
        alpha0,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn raw(cands: Vec<Vec<f64>>, pref: Vec<f64>, lp_pref: f64, lp: Vec<f64>) -> RawPool {
        RawPool {
            pool_id: "p".into(),
            preferred: DVector::from_vec(pref),
            candidates: cands.into_iter().map(DVector::from_vec).collect(),
            logp_ref_preferred: lp_pref,
            logp_ref_candidates: lp,
            theta_true: None,
        }
    }

    #[test]
    fn identical_candidate_has_zero_difference() {
        let r = raw(
            vec![vec![1.0, 2.0], vec![0.0, 0.0]],
            vec![1.0, 2.0],
            -1.0,
            vec![-1.0, -2.0],
        );
        let p = prepare_pool(&r, &DVector::zeros(2), 0.1).unwrap();
        assert_eq!(p.phi[0], DVector::zeros(2));
        assert_eq!(p.b[0], 0.0);
        assert_eq!(p.b[1], 1.0);
    }

    #[test]
    fn uniform_pool_of_twenty() {
        let cands = (0..20).map(|i| vec![i as f64, 1.0]).collect();
        let r = raw(cands, vec![0.0, 0.0], -3.0, vec![-3.0; 20]);
        let p = prepare_pool(&r, &DVector::zeros(2), 0.1).unwrap();
        assert!(p.s.iter().all(|&s| s == 0.0));
        for &q in &p.q0 {
            assert_abs_diff_eq!(q, 0.05, epsilon = 1e-15);
        }
        assert_abs_diff_eq!(p.z_c0, -(20f64.ln()), epsilon = 1e-12);
        assert_abs_diff_eq!(p.alpha0, 0.01 * 20.0 / 21.0, epsilon = 1e-15);
        assert_abs_diff_eq!(p.alpha0, 0.0095238, epsilon = 1e-7);
    }

    #[test]
    fn centering_identity() {
        let cands = vec![
            vec![1.0, -2.0, 0.5],
            vec![3.0, 0.0, 1.0],
            vec![-1.0, 1.0, 2.0],
        ];
        let r = raw(cands, vec![0.2, 0.1, -0.3], -1.0, vec![-0.5, -2.0, -1.5]);
        let theta0 = DVector::from_vec(vec![0.5, -1.0, 2.0]);
        let p = prepare_pool(&r, &theta0, 1.0).unwrap();
        assert_abs_diff_eq!(p.q0.iter().sum::<f64>(), 1.0, epsilon = 1e-12);
        let mut c = DVector::zeros(3);
        for (ph, &q) in p.phi.iter().zip(&p.q0) {
            c += (ph - &p.phi_bar0) * q;
        }
        assert!(c.norm() < 1e-10);
        assert!(p.alpha0 > 0.0 && p.alpha0 < 1.0);
    }

    #[test]
    fn rejects_bad_inputs() {
        let r = raw(vec![vec![1.0, 2.0]], vec![1.0, 2.0], 0.0, vec![0.0]);
        assert!(prepare_pool(&r, &DVector::zeros(3), 0.1).is_err());
        assert!(prepare_pool(&r, &DVector::zeros(2), 0.0).is_err());
        let bad = raw(vec![vec![f64::NAN, 2.0]], vec![1.0, 2.0], 0.0, vec![0.0]);
        assert!(prepare_pool(&bad, &DVector::zeros(2), 0.1).is_err());
        let mismatched = raw(vec![vec![1.0, 2.0]], vec![1.0, 2.0], 0.0, vec![0.0, 1.0]);
        assert!(prepare_pool(&mismatched, &DVector::zeros(2), 0.1).is_err());
    }

    #[test]
    fn extreme_scores_floor_weights() {
        let cands = vec![vec![1000.0], vec![-1000.0]];
        let r = raw(cands, vec![0.0], 0.0, vec![0.0, 0.0]);
        let p = prepare_pool(&r, &DVector::from_vec(vec![1.0]), 1.0).unwrap();
        assert!(p.q0.iter().all(|&q| q > 0.0));
        assert!(p.v0.iter().all(all_finite));
    }
}
