//! Error-decay sweeps: relative logit error of subset-trained estimators as
//! the selection budget grows, per strategy.

use nalgebra::DVector;
use rayon::prelude::*;

use crate::error::{invalid, Result};
use crate::eval::{relative_logit_error, training_subset};
use crate::pool::{prepare_pool, RawPool};
use crate::rng::derive_seed;
use crate::select::{select, Strategy};
use crate::trainer::{fit, fit_full, TrainConfig};

#[derive(Clone, Debug)]
pub struct DecayConfig {
    pub strategies: Vec<Strategy>,
    pub n_grid: Vec<usize>,
    pub beta: f64,
    pub gamma: f64,
    pub tol: f64,
    pub max_iter: usize,
    /// Run instances in parallel. Output is identical either way.
    pub parallel: bool,
}

impl Default for DecayConfig {
    fn default() -> Self {
        Self {
            strategies: vec![Strategy::Mass, Strategy::Random],
            n_grid: vec![4, 8, 16, 32, 64],
            beta: 0.1,
            gamma: 0.1,
            tol: 1e-10,
            max_iter: 200,
            parallel: true,
        }
    }
}

/// One pool under one experiment seed.
#[derive(Clone, Debug)]
pub struct DecayInstance {
    pub seed: u64,
    /// Position of the pool within its seed's dataset.
    pub pool_index: usize,
    pub pool: RawPool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DecayRow {
    pub seed: u64,
    pub pool_id: String,
    pub strategy: Strategy,
    pub n: usize,
    pub n_selected: usize,
    pub rel_logit_error: Option<f64>,
    pub converged: bool,
    pub error: Option<String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MedianRow {
    pub strategy: Strategy,
    pub n: usize,
    pub median: f64,
    pub count: usize,
}

/// Per-seed comparison of `strategy` against `baseline` at one budget.
#[derive(Clone, Debug, PartialEq)]
pub struct PairedRow {
    pub strategy: Strategy,
    pub baseline: Strategy,
    pub n: usize,
    /// Instances where `strategy`'s error is at most `baseline`'s.
    pub wins: usize,
    pub total: usize,
}

impl PairedRow {
    pub fn fraction(&self) -> f64 {
        if self.total == 0 {
            0.0
        } else {
            self.wins as f64 / self.total as f64
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DecaySummary {
    pub medians: Vec<MedianRow>,
    /// Least-squares slope of log median error against log n.
    pub slopes: Vec<(Strategy, Option<f64>)>,
    pub paired: Vec<PairedRow>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DecayReport {
    pub rows: Vec<DecayRow>,
    pub summary: DecaySummary,
}

fn run_instance(inst: &DecayInstance, cfg: &DecayConfig) -> Vec<DecayRow> {
    let mut rows = Vec::with_capacity(cfg.strategies.len() * cfg.n_grid.len());
    let row =
        |strategy, n, n_selected, err: Option<f64>, converged, error: Option<String>| DecayRow {
            seed: inst.seed,
            pool_id: inst.pool.pool_id.clone(),
            strategy,
            n,
            n_selected,
            rel_logit_error: err,
            converged,
            error,
        };
    let train = TrainConfig {
        beta: cfg.beta,
        gamma: cfg.gamma,
        tol: cfg.tol,
        max_iter: cfg.max_iter,
        theta_init: None,
    };
    let prepared = prepare_pool(&inst.pool, &DVector::zeros(inst.pool.dim()), cfg.beta)
        .and_then(|p| fit_full(&p, &train).map(|f| (p, f)));
    let (pool, full) = match prepared {
        Ok(x) => x,
        Err(e) => {
            for &st in &cfg.strategies {
                for &n in &cfg.n_grid {
                    rows.push(row(st, n, 0, None, false, Some(e.to_string())));
                }
            }
            return rows;
        }
    };
    let sel_seed = derive_seed(inst.seed, inst.pool_index as u64);
    for &st in &cfg.strategies {
        for &n in &cfg.n_grid {
            let outcome = select(&pool, n, st, cfg.gamma, sel_seed).and_then(|sel| {
                let subset = training_subset(&sel.selected);
                let hat = fit(&pool, &subset, &train)?;
                let err = relative_logit_error(&hat.theta.theta, &full.theta.theta, &pool)?;
                Ok((subset.len(), err, hat.converged && full.converged))
            });
            rows.push(match outcome {
                Ok((k, err, conv)) => row(st, n, k, Some(err), conv, None),
                Err(e) => row(st, n, 0, None, false, Some(e.to_string())),
            });
        }
    }
    rows
}

pub fn median(xs: &mut [f64]) -> Option<f64> {
    if xs.is_empty() {
        return None;
    }
    xs.sort_by(f64::total_cmp);
    let m = xs.len() / 2;
    Some(if xs.len() % 2 == 1 {
        xs[m]
    } else {
        0.5 * (xs[m - 1] + xs[m])
    })
}

/// Ordinary least-squares slope of `y` on `x`.
pub fn ls_slope(points: &[(f64, f64)]) -> Option<f64> {
    if points.len() < 2 {
        return None;
    }
    let n = points.len() as f64;
    let mx = points.iter().map(|p| p.0).sum::<f64>() / n;
    let my = points.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = points.iter().map(|p| (p.0 - mx).powi(2)).sum();
    let sxy: f64 = points.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    (sxx > 0.0).then(|| sxy / sxx)
}

pub fn summarize(rows: &[DecayRow], cfg: &DecayConfig) -> DecaySummary {
    let mut medians = Vec::new();
    let mut slopes = Vec::new();
    for &st in &cfg.strategies {
        let mut pts = Vec::new();
        for &n in &cfg.n_grid {
            let mut errs: Vec<f64> = rows
                .iter()
                .filter(|r| r.strategy == st && r.n == n)
                .filter_map(|r| r.rel_logit_error)
                .collect();
            let count = errs.len();
            if let Some(m) = median(&mut errs) {
                medians.push(MedianRow {
                    strategy: st,
                    n,
                    median: m,
                    count,
                });
                if m > 0.0 {
                    pts.push(((n as f64).ln(), m.ln()));
                }
            }
        }
        slopes.push((st, ls_slope(&pts)));
    }

    let mut paired = Vec::new();
    if cfg.strategies.contains(&Strategy::Random) {
        for &st in cfg.strategies.iter().filter(|s| **s != Strategy::Random) {
            for &n in &cfg.n_grid {
                let mut wins = 0;
                let mut total = 0;
                for r in rows.iter().filter(|r| r.strategy == st && r.n == n) {
                    let other = rows.iter().find(|o| {
                        o.strategy == Strategy::Random
                            && o.n == n
                            && o.seed == r.seed
                            && o.pool_id == r.pool_id
                    });
                    if let (Some(a), Some(b)) =
                        (r.rel_logit_error, other.and_then(|o| o.rel_logit_error))
                    {
                        total += 1;
                        if a <= b {
                            wins += 1;
                        }
                    }
                }
                paired.push(PairedRow {
                    strategy: st,
                    baseline: Strategy::Random,
                    n,
                    wins,
                    total,
                });
            }
        }
    }
    DecaySummary {
        medians,
        slopes,
        paired,
    }
}

/// Runs every `(instance, strategy, n)` cell. `θ*` is fit once per instance;
/// rows come back in instance, strategy, budget order.
pub fn decay_experiment(instances: &[DecayInstance], cfg: &DecayConfig) -> Result<DecayReport> {
    if cfg.n_grid.is_empty() || cfg.n_grid.windows(2).any(|w| w[0] >= w[1]) {
        return Err(invalid("n_grid must be nonempty and strictly increasing"));
    }
    if cfg.n_grid[0] == 0 {
        return Err(invalid("n_grid entries must be positive"));
    }
    if cfg.strategies.is_empty() {
        return Err(invalid("at least one strategy is required"));
    }
    let per: Vec<Vec<DecayRow>> = if cfg.parallel {
        instances.par_iter().map(|i| run_instance(i, cfg)).collect()
    } else {
        instances.iter().map(|i| run_instance(i, cfg)).collect()
    };
    let rows: Vec<DecayRow> = per.into_iter().flatten().collect();
    let summary = summarize(&rows, cfg);
    Ok(DecayReport { rows, summary })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{gen_dataset, SynthConfig};

    #[test]
    fn median_and_slope_helpers() {
        assert_eq!(median(&mut [3.0, 1.0, 2.0]), Some(2.0));
        assert_eq!(median(&mut [4.0, 1.0, 2.0, 3.0]), Some(2.5));
        assert_eq!(median(&mut []), None);
        let pts: Vec<_> = (1..5).map(|i| (i as f64, 3.0 - 0.5 * i as f64)).collect();
        assert!((ls_slope(&pts).unwrap() + 0.5).abs() < 1e-12);
        assert_eq!(ls_slope(&pts[..1]), None);
    }

    #[test]
    fn full_budget_rows_have_no_error() {
        let synth = SynthConfig {
            dim: 4,
            pools: 2,
            candidates_per_pool: 9,
            clusters: 3,
            ..Default::default()
        };
        let instances: Vec<_> = gen_dataset(&synth)
            .unwrap()
            .into_iter()
            .enumerate()
            .map(|(i, pool)| DecayInstance {
                seed: 0,
                pool_index: i,
                pool,
            })
            .collect();
        let cfg = DecayConfig {
            n_grid: vec![8],
            ..Default::default()
        };
        let report = decay_experiment(&instances, &cfg).unwrap();
        assert_eq!(report.rows.len(), 4);
        for r in &report.rows {
            assert!(r.rel_logit_error.unwrap() <= 1e-6, "{r:?}");
        }
    }

    #[test]
    fn rejects_unsorted_grid() {
        let cfg = DecayConfig {
            n_grid: vec![4, 2],
            ..Default::default()
        };
        assert!(decay_experiment(&[], &cfg).is_err());
    }
}
