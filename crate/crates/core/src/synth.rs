//! Synthetic candidate pools with tunable redundancy.
//!
//! Each pool draws `clusters` Gaussian centers and assigns its items to them
//! round-robin with Gaussian jitter, so a small `clusters` with little
//! `cluster_noise` yields many near-duplicate negatives. A ground-truth
//! log-linear policy picks the preferred item; the rest become candidates.

use nalgebra::DVector;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::numeric::{log_sum_exp, softmax};
use crate::pool::RawPool;
use crate::rng::{derive_seed, Xoshiro256StarStar};

/// How the preferred item is chosen from a pool's items.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PreferredRule {
    /// Categorical draw with probabilities `∝ exp(rᵢ)`.
    PlSample,
    /// Highest reward, lowest index on ties.
    Argmax,
}

impl std::str::FromStr for PreferredRule {
    type Err = crate::Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pl-sample" => Ok(Self::PlSample),
            "argmax" => Ok(Self::Argmax),
            other => Err(invalid(format!("unknown preferred rule `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub dim: usize,
    pub pools: usize,
    /// Items per pool, the preferred one included; `N − 1` become candidates.
    pub candidates_per_pool: usize,
    pub clusters: usize,
    pub cluster_noise: f64,
    pub feature_scale: f64,
    pub theta_true: Option<Vec<f64>>,
    pub theta_ref: Option<Vec<f64>>,
    pub preferred_rule: PreferredRule,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            dim: 16,
            pools: 1,
            candidates_per_pool: 200,
            clusters: 20,
            cluster_noise: 0.1,
            feature_scale: 1.0,
            theta_true: None,
            theta_ref: None,
            preferred_rule: PreferredRule::PlSample,
            seed: 0,
        }
    }
}

/// Stream index reserved for the shared ground-truth parameters.
const THETA_STREAM: u64 = u64::MAX;

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 {
            return Err(invalid("dim must be at least 1"));
        }
        if self.candidates_per_pool < 2 {
            return Err(invalid("candidates_per_pool must be at least 2"));
        }
        if self.clusters == 0 || self.clusters > self.candidates_per_pool {
            return Err(invalid(format!(
                "clusters must lie in 1..={}, got {}",
                self.candidates_per_pool, self.clusters
            )));
        }
        if !(self.cluster_noise >= 0.0) || !self.cluster_noise.is_finite() {
            return Err(invalid("cluster_noise must be finite and nonnegative"));
        }
        if !(self.feature_scale > 0.0) || !self.feature_scale.is_finite() {
            return Err(invalid("feature_scale must be positive"));
        }
        for (name, v) in [
            ("theta_true", &self.theta_true),
            ("theta_ref", &self.theta_ref),
        ] {
            if let Some(v) = v {
                if v.len() != self.dim || v.iter().any(|x| !x.is_finite()) {
                    return Err(invalid(format!(
                        "{name} must have {} finite entries",
                        self.dim
                    )));
                }
            }
        }
        Ok(())
    }

    /// The ground-truth parameters: configured, or a unit-norm Gaussian draw.
    pub fn theta_true(&self) -> DVector<f64> {
        if let Some(t) = &self.theta_true {
            return DVector::from_vec(t.clone());
        }
        let mut rng = Xoshiro256StarStar::seed_from_u64(derive_seed(self.seed, THETA_STREAM));
        let t = DVector::from_fn(self.dim, |_, _| rng.next_gaussian());
        let norm = t.norm();
        if norm > 0.0 {
            t / norm
        } else {
            t
        }
    }

    fn theta_ref(&self) -> DVector<f64> {
        self.theta_ref
            .as_ref()
            .map(|t| DVector::from_vec(t.clone()))
            .unwrap_or_else(|| DVector::zeros(self.dim))
    }
}

/// Draws the preferred item index for rewards `r`.
pub fn pick_preferred(rule: PreferredRule, rewards: &[f64], rng: &mut Xoshiro256StarStar) -> usize {
    match rule {
        PreferredRule::PlSample => rng.next_categorical(&softmax(rewards)),
        PreferredRule::Argmax => {
            let mut best = 0;
            for (i, &r) in rewards.iter().enumerate() {
                if r > rewards[best] {
                    best = i;
                }
            }
            best
        }
    }
}

fn gen_pool_with(cfg: &SynthConfig, theta_true: &DVector<f64>, pool_index: usize) -> RawPool {
    let d = cfg.dim;
    let mut rng = Xoshiro256StarStar::seed_from_u64(derive_seed(cfg.seed, pool_index as u64));
    let centers: Vec<DVector<f64>> = (0..cfg.clusters)
        .map(|_| DVector::from_fn(d, |_, _| cfg.feature_scale * rng.next_gaussian()))
        .collect();
    let cap = 10.0 * cfg.feature_scale;
    let items: Vec<DVector<f64>> = (0..cfg.candidates_per_pool)
        .map(|i| {
            let c = &centers[i % cfg.clusters];
            DVector::from_fn(d, |k, _| {
                (c[k] + cfg.cluster_noise * rng.next_gaussian()).clamp(-cap, cap)
            })
        })
        .collect();

    let rewards: Vec<f64> = items.iter().map(|x| x.dot(theta_true)).collect();
    let preferred = pick_preferred(cfg.preferred_rule, &rewards, &mut rng);

    let theta_ref = cfg.theta_ref();
    let ref_scores: Vec<f64> = items.iter().map(|x| x.dot(&theta_ref)).collect();
    let lse = log_sum_exp(&ref_scores);
    let logp: Vec<f64> = ref_scores.iter().map(|s| s - lse).collect();

    let mut candidates = Vec::with_capacity(items.len() - 1);
    let mut logp_ref_candidates = Vec::with_capacity(items.len() - 1);
    for (i, x) in items.iter().enumerate() {
        if i != preferred {
            candidates.push(x.clone());
            logp_ref_candidates.push(logp[i]);
        }
    }
    RawPool {
        pool_id: format!("{pool_index:03}"),
        preferred: items[preferred].clone(),
        candidates,
        logp_ref_preferred: logp[preferred],
        logp_ref_candidates,
        theta_true: Some(theta_true.clone()),
    }
}

/// Generates pool `pool_index` from its own derived stream.
pub fn gen_pool(cfg: &SynthConfig, pool_index: usize) -> Result<RawPool> {
    cfg.validate()?;
    Ok(gen_pool_with(cfg, &cfg.theta_true(), pool_index))
}

/// Generates pools `0..cfg.pools`. Pools are built in parallel; the output
/// is identical to serial generation.
pub fn gen_dataset(cfg: &SynthConfig) -> Result<Vec<RawPool>> {
    cfg.validate()?;
    let theta = cfg.theta_true();
    Ok((0..cfg.pools)
        .into_par_iter()
        .map(|i| gen_pool_with(cfg, &theta, i))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pool::prepare_pool;

    fn small() -> SynthConfig {
        SynthConfig {
            dim: 4,
            pools: 3,
            candidates_per_pool: 12,
            clusters: 3,
            ..Default::default()
        }
    }

    #[test]
    fn degenerate_cluster_gives_zero_contributions() {
        let cfg = SynthConfig {
            clusters: 1,
            cluster_noise: 0.0,
            ..small()
        };
        let raw = gen_pool(&cfg, 0).unwrap();
        let first = &raw.candidates[0];
        assert!(raw.candidates.iter().all(|c| c == first));
        let p = prepare_pool(&raw, &DVector::zeros(4), 0.1).unwrap();
        assert!(p.phi.iter().all(|v| v == &p.phi[0]));
        assert!(p.v0.iter().all(|v| v.norm() == 0.0));
    }

    #[test]
    fn zero_reference_is_uniform() {
        let raw = gen_pool(&small(), 1).unwrap();
        let expect = -(12f64.ln());
        assert!((raw.logp_ref_preferred - expect).abs() < 1e-12);
        assert!(raw
            .logp_ref_candidates
            .iter()
            .all(|l| (l - expect).abs() < 1e-12));
        let p = prepare_pool(&raw, &DVector::zeros(4), 0.1).unwrap();
        assert!(p.b.iter().all(|b| b.abs() < 1e-12));
    }

    #[test]
    fn dataset_shape_and_ids() {
        let pools = gen_dataset(&small()).unwrap();
        let ids: Vec<_> = pools.iter().map(|p| p.pool_id.as_str()).collect();
        assert_eq!(ids, ["000", "001", "002"]);
        assert!(pools.iter().all(|p| p.n_candidates() == 11));
        assert!(gen_dataset(&SynthConfig {
            pools: 0,
            ..small()
        })
        .unwrap()
        .is_empty());
        assert_ne!(pools[0], pools[1]);
    }

    #[test]
    fn parallel_matches_serial() {
        let cfg = SynthConfig {
            pools: 16,
            ..small()
        };
        let par = gen_dataset(&cfg).unwrap();
        let ser: Vec<_> = (0..16).map(|i| gen_pool(&cfg, i).unwrap()).collect();
        assert_eq!(par, ser);
    }

    #[test]
    fn features_are_clipped() {
        let cfg = SynthConfig {
            cluster_noise: 100.0,
            ..small()
        };
        let raw = gen_pool(&cfg, 0).unwrap();
        let cap = 10.0 * cfg.feature_scale;
        assert!(raw
            .candidates
            .iter()
            .flat_map(|c| c.iter())
            .all(|x| x.abs() <= cap));
    }

    #[test]
    fn theta_true_is_unit_norm() {
        assert!((small().theta_true().norm() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn argmax_rule_picks_best() {
        let mut rng = Xoshiro256StarStar::seed_from_u64(0);
        assert_eq!(
            pick_preferred(PreferredRule::Argmax, &[0.1, 0.7, 0.7], &mut rng),
            1
        );
    }

    #[test]
    fn config_validation() {
        assert!(SynthConfig {
            clusters: 0,
            ..small()
        }
        .validate()
        .is_err());
        assert!(SynthConfig {
            clusters: 13,
            ..small()
        }
        .validate()
        .is_err());
        assert!(SynthConfig {
            candidates_per_pool: 1,
            clusters: 1,
            ..small()
        }
        .validate()
        .is_err());
        assert!(SynthConfig {
            theta_true: Some(vec![1.0]),
            ..small()
        }
        .validate()
        .is_err());
    }
}
