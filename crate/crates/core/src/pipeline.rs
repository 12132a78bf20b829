//! The select, train, eval, and bench steps as library calls. The command
//! line binary parses flags and delegates here.
//!
//! Per-pool work runs on the rayon pool; results are collected in input order.

use std::collections::HashMap;

use nalgebra::DVector;
use rayon::prelude::*;
use serde::Deserialize;

use crate::error::{invalid, Error, Result};
use crate::eval::{
    diagnostics, leverage_diagnostics, ranking_metrics, relative_logit_error, stability_check,
    training_subset,
};
use crate::experiment::{decay_experiment, DecayConfig, DecayInstance, DecayReport};
use crate::io::{fmt_f64, FitRecord, SelectionRecord};
use crate::pool::{prepare_pool, PreparedPool, RawPool};
use crate::rng::derive_seed;
use crate::select::{select, Strategy};
use crate::synth::{gen_dataset, SynthConfig};
use crate::trainer::{fit, fit_batch, TrainConfig};

fn index_pools(pools: &[RawPool]) -> Result<HashMap<&str, usize>> {
    let mut map = HashMap::with_capacity(pools.len());
    for (i, p) in pools.iter().enumerate() {
        if map.insert(p.pool_id.as_str(), i).is_some() {
            return Err(invalid(format!("duplicate pool_id {}", p.pool_id)));
        }
    }
    Ok(map)
}

fn missing_ids_error<'a>(ids: impl Iterator<Item = &'a str>) -> Error {
    let ids: Vec<_> = ids.collect();
    invalid(format!("unknown pool_id(s): {}", ids.join(", ")))
}

fn prepare(raw: &RawPool, theta0: Option<&DVector<f64>>, beta: f64) -> Result<PreparedPool> {
    let zero;
    let theta0 = match theta0 {
        Some(t) => t,
        None => {
            zero = DVector::zeros(raw.dim());
            &zero
        }
    };
    if theta0.len() != raw.dim() {
        return Err(invalid(format!(
            "theta0 has {} entries, pool {} has dimension {}",
            theta0.len(),
            raw.pool_id,
            raw.dim()
        )));
    }
    prepare_pool(raw, theta0, beta)
}

#[derive(Clone, Debug)]
pub struct SelectOptions {
    pub n: usize,
    pub beta: f64,
    pub gamma: f64,
    pub strategy: Strategy,
    /// Reference point for curvature weights; zero when absent.
    pub theta0: Option<DVector<f64>>,
    pub seed: u64,
}

#[derive(Clone, Debug)]
pub struct Output<T> {
    pub records: Vec<T>,
    /// Non-fatal conditions to report on standard error.
    pub warnings: Vec<String>,
}

/// One selection per pool. Stochastic strategies use the seed
/// `splitmix64(seed ^ i)` for the pool on line `i` (0-based).
pub fn run_select(pools: &[RawPool], opts: &SelectOptions) -> Result<Output<SelectionRecord>> {
    let results: Vec<Result<SelectionRecord>> = pools
        .par_iter()
        .enumerate()
        .map(|(i, raw)| {
            let pool = prepare(raw, opts.theta0.as_ref(), opts.beta)?;
            let seed = derive_seed(opts.seed, i as u64);
            let sel = select(&pool, opts.n, opts.strategy, opts.gamma, seed)?;
            Ok(SelectionRecord::from_result(&sel, opts.beta, opts.gamma))
        })
        .collect();
    let mut records = Vec::with_capacity(pools.len());
    let mut warnings = Vec::new();
    for (raw, r) in pools.iter().zip(results) {
        let r = r?;
        if opts.strategy != Strategy::MassReselect && r.selected.len() < r.n {
            warnings.push(format!(
                "pool {}: n = {} exceeds {} candidates, selected all of them",
                raw.pool_id,
                r.n,
                raw.n_candidates()
            ));
        }
        records.push(r);
    }
    Ok(Output { records, warnings })
}

#[derive(Clone, Debug)]
pub struct TrainOptions {
    pub config: TrainConfig,
    /// One shared fit over every selected pool instead of one per pool.
    pub batch: bool,
}

/// Fits per pool (or one batch fit) on the selected subsets, or on every
/// candidate when `selections` is `None`.
pub fn run_train(
    pools: &[RawPool],
    selections: Option<&[SelectionRecord]>,
    opts: &TrainOptions,
) -> Result<Output<FitRecord>> {
    let by_id = index_pools(pools)?;
    let cfg = &opts.config;
    let jobs: Vec<(&RawPool, Option<Vec<usize>>)> = match selections {
        None => pools.iter().map(|p| (p, None)).collect(),
        Some(sels) => {
            let missing: Vec<&str> = sels
                .iter()
                .map(|s| s.pool_id.as_str())
                .filter(|id| !by_id.contains_key(id))
                .collect();
            if !missing.is_empty() {
                return Err(missing_ids_error(missing.into_iter()));
            }
            sels.iter()
                .map(|s| {
                    (
                        &pools[by_id[s.pool_id.as_str()]],
                        Some(training_subset(&s.selected)),
                    )
                })
                .collect()
        }
    };
    let prepared: Vec<(PreparedPool, Vec<usize>)> = jobs
        .par_iter()
        .map(|(raw, subset)| {
            let p = prepare(raw, None, cfg.beta)?;
            let s = subset.clone().unwrap_or_else(|| p.all_indices());
            Ok((p, s))
        })
        .collect::<Result<_>>()?;

    let records = if opts.batch {
        let (ps, ss): (Vec<_>, Vec<_>) = prepared.into_iter().unzip();
        let report = fit_batch(&ps, &ss, cfg)?;
        let ids = ps.iter().map(|p| p.pool_id.clone()).collect();
        vec![FitRecord::from_report("batch", Some(ids), &report)]
    } else {
        prepared
            .par_iter()
            .map(|(p, s)| fit(p, s, cfg).map(|r| FitRecord::from_report(&p.pool_id, None, &r)))
            .collect::<Result<_>>()?
    };
    let unconverged = records.iter().filter(|r| !r.converged).count();
    let warnings = if unconverged > 0 {
        vec![format!(
            "{unconverged} of {} fits did not converge",
            records.len()
        )]
    } else {
        Vec::new()
    };
    Ok(Output { records, warnings })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Metric {
    Rel,
    Stability,
    Leverage,
    Rank,
    Diag,
}

impl Metric {
    pub const ALL: [Metric; 5] = [
        Metric::Rel,
        Metric::Stability,
        Metric::Leverage,
        Metric::Rank,
        Metric::Diag,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Metric::Rel => "rel",
            Metric::Stability => "stability",
            Metric::Leverage => "leverage",
            Metric::Rank => "rank",
            Metric::Diag => "diag",
        }
    }

    fn needs_selection(self) -> bool {
        matches!(self, Metric::Stability | Metric::Leverage | Metric::Diag)
    }
}

impl std::str::FromStr for Metric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Metric::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| invalid(format!("unknown metric `{s}`")))
    }
}

#[derive(Clone, Debug)]
pub struct EvalOptions {
    pub metrics: Vec<Metric>,
    pub ks: Vec<usize>,
    /// Used when no selection record supplies `beta`/`gamma` for a pool.
    pub beta: f64,
    pub gamma: f64,
    pub theta0: Option<DVector<f64>>,
    /// Settings for fitting `θ*` when no reference fit is supplied.
    pub tol: f64,
    pub max_iter: usize,
}

/// A CSV table with its header.
#[derive(Clone, Debug, PartialEq)]
pub struct Table {
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

const EVAL_FIXED: [&str; 4] = ["pool_id", "metric", "strategy", "n"];
const EVAL_REL: [&str; 2] = ["rel_logit_error", "theta_norm_gap"];
const EVAL_STABILITY: [&str; 3] = ["stability_lhs", "stability_rhs", "stability_holds"];
const EVAL_LEVERAGE: [&str; 9] = [
    "max_leverage",
    "l_v0",
    "quad_cap",
    "quad_cap_holds",
    "telescoping_residual",
    "logdet_cap",
    "logdet_cap_slack",
    "kappa_empirical",
    "x_series",
];
const EVAL_DIAG: [&str; 10] = [
    "q_min0",
    "l_phi",
    "l_b",
    "r_theta",
    "rho_empirical",
    "c_min",
    "c_max",
    "bound_bn",
    "max_centered_leverage",
    "bound_bn_holds",
];

/// Eval CSV columns for cutoffs `ks`.
pub fn eval_header(ks: &[usize]) -> Vec<String> {
    let mut h: Vec<String> = EVAL_FIXED.iter().map(|s| s.to_string()).collect();
    h.extend(EVAL_REL.iter().map(|s| s.to_string()));
    h.extend(EVAL_STABILITY.iter().map(|s| s.to_string()));
    h.extend(EVAL_LEVERAGE.iter().map(|s| s.to_string()));
    h.push("rank".into());
    h.push("mrr".into());
    h.extend(ks.iter().map(|k| format!("recall@{k}")));
    h.extend(ks.iter().map(|k| format!("ndcg@{k}")));
    h.extend(EVAL_DIAG.iter().map(|s| s.to_string()));
    h
}

fn fmt_series(xs: &[f64]) -> String {
    xs.iter().map(|x| fmt_f64(*x)).collect::<Vec<_>>().join(";")
}

fn fmt_bool(b: bool) -> String {
    b.to_string()
}

struct RowBuilder<'a> {
    header: &'a [String],
    cells: Vec<String>,
}

impl<'a> RowBuilder<'a> {
    fn new(
        header: &'a [String],
        pool_id: &str,
        metric: Metric,
        sel: Option<&SelectionRecord>,
    ) -> Self {
        let mut b = Self {
            header,
            cells: vec![String::new(); header.len()],
        };
        b.set("pool_id", pool_id.to_string());
        b.set("metric", metric.as_str().to_string());
        if let Some(s) = sel {
            b.set("strategy", s.strategy.as_str().to_string());
            b.set("n", s.n.to_string());
        }
        b
    }

    fn set(&mut self, col: &str, value: String) {
        let i = self
            .header
            .iter()
            .position(|h| h == col)
            .expect("known column");
        self.cells[i] = value;
    }
}

fn lookup_fit<'a>(fits: &'a [FitRecord], pool_id: &str) -> Option<&'a FitRecord> {
    fits.iter().find(|f| f.pool_id == pool_id).or_else(|| {
        fits.iter().find(|f| {
            f.pool_ids
                .as_ref()
                .is_some_and(|ids| ids.iter().any(|i| i == pool_id))
        })
    })
}

fn eval_pool(
    raw: &RawPool,
    sel: Option<&SelectionRecord>,
    theta_hat: &DVector<f64>,
    theta_ref: Option<DVector<f64>>,
    opts: &EvalOptions,
    header: &[String],
) -> Result<Vec<Vec<String>>> {
    let beta = sel.map_or(opts.beta, |s| s.beta);
    let gamma = sel.map_or(opts.gamma, |s| s.gamma);
    let pool = prepare(raw, opts.theta0.as_ref(), beta)?;
    if theta_hat.len() != pool.dim() {
        return Err(invalid(format!(
            "theta for pool {} has wrong dimension",
            raw.pool_id
        )));
    }
    let needs_star = opts
        .metrics
        .iter()
        .any(|m| matches!(m, Metric::Rel | Metric::Stability | Metric::Diag));
    let theta_star = match theta_ref {
        Some(t) => Some(t),
        None if needs_star => {
            let cfg = TrainConfig {
                beta,
                gamma,
                tol: opts.tol,
                max_iter: opts.max_iter,
                theta_init: None,
            };
            Some(fit(&pool, &pool.all_indices(), &cfg)?.theta.theta)
        }
        None => None,
    };
    let selection = sel.map(|s| s.to_result(pool.dim()));
    let subset = sel.map(|s| training_subset(&s.selected));
    let theta0 = opts
        .theta0
        .clone()
        .unwrap_or_else(|| DVector::zeros(pool.dim()));

    let mut rows = Vec::new();
    for &m in &opts.metrics {
        let mut row = RowBuilder::new(header, &raw.pool_id, m, sel);
        match m {
            Metric::Rel => {
                let star = theta_star.as_ref().unwrap();
                row.set(
                    "rel_logit_error",
                    fmt_f64(relative_logit_error(theta_hat, star, &pool)?),
                );
                row.set("theta_norm_gap", fmt_f64((theta_hat - star).norm()));
            }
            Metric::Stability => {
                let st = stability_check(
                    theta_hat,
                    theta_star.as_ref().unwrap(),
                    &pool,
                    subset.as_ref().unwrap(),
                    gamma,
                    beta,
                )?;
                row.set("stability_lhs", fmt_f64(st.lhs));
                row.set("stability_rhs", fmt_f64(st.rhs));
                row.set("stability_holds", fmt_bool(st.holds));
            }
            Metric::Leverage => {
                let lev = leverage_diagnostics(&pool, selection.as_ref().unwrap(), gamma)?;
                row.set("max_leverage", fmt_f64(lev.max_leverage));
                row.set("l_v0", fmt_f64(lev.l_v0));
                row.set("quad_cap", fmt_f64(lev.quad_cap));
                row.set("quad_cap_holds", fmt_bool(lev.quad_cap_holds));
                row.set("telescoping_residual", fmt_f64(lev.telescoping_residual));
                row.set("logdet_cap", fmt_f64(lev.logdet_cap));
                row.set("logdet_cap_slack", fmt_f64(lev.logdet_cap_slack));
                row.set("kappa_empirical", fmt_f64(lev.kappa_empirical));
                row.set("x_series", fmt_series(&lev.x_series));
            }
            Metric::Rank => {
                let r = ranking_metrics(theta_hat, &pool, &opts.ks, beta)?;
                row.set("rank", r.rank.to_string());
                row.set("mrr", fmt_f64(r.mrr));
                for (k, v) in &r.recall {
                    row.set(&format!("recall@{k}"), fmt_f64(*v));
                }
                for (k, v) in &r.ndcg {
                    row.set(&format!("ndcg@{k}"), fmt_f64(*v));
                }
            }
            Metric::Diag => {
                let dg = diagnostics(
                    &pool,
                    selection.as_ref().unwrap(),
                    &theta0,
                    theta_star.as_ref().unwrap(),
                    theta_hat,
                    gamma,
                    beta,
                )?;
                row.set("q_min0", fmt_f64(dg.q_min0));
                row.set("l_v0", fmt_f64(dg.l_v0));
                row.set("l_phi", fmt_f64(dg.l_phi));
                row.set("l_b", fmt_f64(dg.l_b));
                row.set("r_theta", fmt_f64(dg.r_theta));
                row.set("kappa_empirical", fmt_f64(dg.kappa_empirical));
                row.set("rho_empirical", fmt_f64(dg.rho_empirical));
                row.set("c_min", fmt_f64(dg.c_min));
                row.set("c_max", fmt_f64(dg.c_max));
                row.set("telescoping_residual", fmt_f64(dg.telescoping_residual));
                row.set("x_series", fmt_series(&dg.x_series));
                row.set("max_centered_leverage", fmt_f64(dg.max_centered_leverage));
                if let Some(b) = dg.bound_bn_value {
                    row.set("bound_bn", fmt_f64(b));
                    row.set("bound_bn_holds", fmt_bool(dg.max_centered_leverage <= b));
                }
            }
        }
        rows.push(row.cells);
    }
    Ok(rows)
}

/// Evaluates every pool covered by `theta_hat`, in fit-file order (a batch
/// fit covers its `pool_ids` in order). Rows are grouped per pool in the
/// order of `opts.metrics`.
pub fn run_eval(
    pools: &[RawPool],
    selections: Option<&[SelectionRecord]>,
    theta_hat: &[FitRecord],
    theta_ref: Option<&[FitRecord]>,
    opts: &EvalOptions,
) -> Result<Table> {
    if opts.metrics.is_empty() {
        return Err(invalid("at least one metric is required"));
    }
    if selections.is_none() {
        if let Some(m) = opts.metrics.iter().find(|m| m.needs_selection()) {
            return Err(invalid(format!(
                "metric {} requires a selection file",
                m.as_str()
            )));
        }
    }
    let by_id = index_pools(pools)?;
    let ids: Vec<&str> = theta_hat
        .iter()
        .flat_map(|f| match &f.pool_ids {
            Some(ids) => ids.iter().map(String::as_str).collect::<Vec<_>>(),
            None => vec![f.pool_id.as_str()],
        })
        .collect();
    let missing: Vec<&str> = ids
        .iter()
        .copied()
        .filter(|id| !by_id.contains_key(id))
        .collect();
    if !missing.is_empty() {
        return Err(missing_ids_error(missing.into_iter()));
    }

    let mut jobs = Vec::with_capacity(ids.len());
    for id in &ids {
        let sel = match selections {
            Some(sels) => Some(
                sels.iter()
                    .find(|s| s.pool_id == *id)
                    .ok_or_else(|| invalid(format!("no selection for pool_id {id}")))?,
            ),
            None => None,
        };
        let hat = lookup_fit(theta_hat, id)
            .expect("id came from theta_hat")
            .theta();
        let star = match theta_ref {
            Some(refs) => Some(
                lookup_fit(refs, id)
                    .ok_or_else(|| invalid(format!("no reference fit for pool_id {id}")))?
                    .theta(),
            ),
            None => None,
        };
        jobs.push((&pools[by_id[id]], sel, hat, star));
    }

    let header = eval_header(&opts.ks);
    let per: Vec<Vec<Vec<String>>> = jobs
        .into_par_iter()
        .map(|(raw, sel, hat, star)| eval_pool(raw, sel, &hat, star, opts, &header))
        .collect::<Result<_>>()?;
    Ok(Table {
        header,
        rows: per.into_iter().flatten().collect(),
    })
}

fn default_beta() -> f64 {
    0.1
}
fn default_gamma() -> f64 {
    0.1
}
fn default_tol() -> f64 {
    1e-10
}
fn default_max_iter() -> usize {
    200
}

/// The bench configuration file.
#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchConfig {
    #[serde(default)]
    pub synth: SynthConfig,
    pub strategies: Vec<Strategy>,
    pub n_grid: Vec<usize>,
    pub seeds: Vec<u64>,
    #[serde(default = "default_beta")]
    pub beta: f64,
    #[serde(default = "default_gamma")]
    pub gamma: f64,
    #[serde(default = "default_tol")]
    pub tol: f64,
    #[serde(default = "default_max_iter")]
    pub max_iter: usize,
}

impl BenchConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        crate::io::from_json_str(text)
    }

    pub fn decay_config(&self, parallel: bool) -> DecayConfig {
        DecayConfig {
            strategies: self.strategies.clone(),
            n_grid: self.n_grid.clone(),
            beta: self.beta,
            gamma: self.gamma,
            tol: self.tol,
            max_iter: self.max_iter,
            parallel,
        }
    }

    /// Every pool of every seed's dataset. `synth.seed` is replaced by each
    /// entry of `seeds`.
    pub fn instances(&self) -> Result<Vec<DecayInstance>> {
        let mut out = Vec::new();
        for &seed in &self.seeds {
            let cfg = SynthConfig {
                seed,
                ..self.synth.clone()
            };
            for (pool_index, pool) in gen_dataset(&cfg)?.into_iter().enumerate() {
                out.push(DecayInstance {
                    seed,
                    pool_index,
                    pool,
                });
            }
        }
        Ok(out)
    }
}

pub fn run_bench(cfg: &BenchConfig, parallel: bool) -> Result<DecayReport> {
    decay_experiment(&cfg.instances()?, &cfg.decay_config(parallel))
}

fn strings(xs: &[&str]) -> Vec<String> {
    xs.iter().map(|s| s.to_string()).collect()
}

fn opt_f64(x: Option<f64>) -> String {
    x.map(fmt_f64).unwrap_or_default()
}

pub fn decay_table(report: &DecayReport) -> Table {
    let header = strings(&[
        "seed",
        "pool_id",
        "strategy",
        "n",
        "n_selected",
        "rel_logit_error",
        "converged",
        "error",
    ]);
    let rows = report
        .rows
        .iter()
        .map(|r| {
            vec![
                r.seed.to_string(),
                r.pool_id.clone(),
                r.strategy.as_str().to_string(),
                r.n.to_string(),
                r.n_selected.to_string(),
                opt_f64(r.rel_logit_error),
                r.converged.to_string(),
                r.error.clone().unwrap_or_default(),
            ]
        })
        .collect();
    Table { header, rows }
}

/// Median, slope, and paired rows in one table, distinguished by `kind`.
pub fn summary_table(report: &DecayReport) -> Table {
    let header = strings(&[
        "kind", "strategy", "baseline", "n", "value", "wins", "count",
    ]);
    let s = &report.summary;
    let mut rows = Vec::new();
    for m in &s.medians {
        rows.push(vec![
            "median".into(),
            m.strategy.as_str().into(),
            String::new(),
            m.n.to_string(),
            fmt_f64(m.median),
            String::new(),
            m.count.to_string(),
        ]);
    }
    for (st, slope) in &s.slopes {
        rows.push(vec![
            "slope".into(),
            st.as_str().into(),
            String::new(),
            String::new(),
            opt_f64(*slope),
            String::new(),
            String::new(),
        ]);
    }
    for p in &s.paired {
        rows.push(vec![
            "paired".into(),
            p.strategy.as_str().into(),
            p.baseline.as_str().into(),
            p.n.to_string(),
            fmt_f64(p.fraction()),
            p.wins.to_string(),
            p.total.to_string(),
        ]);
    }
    Table { header, rows }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pools(n: usize) -> Vec<RawPool> {
        let cfg = SynthConfig {
            dim: 3,
            pools: n,
            candidates_per_pool: 8,
            clusters: 3,
            ..Default::default()
        };
        gen_dataset(&cfg).unwrap()
    }

    fn select_opts(strategy: Strategy, n: usize) -> SelectOptions {
        SelectOptions {
            n,
            beta: 0.1,
            gamma: 0.1,
            strategy,
            theta0: None,
            seed: 5,
        }
    }

    #[test]
    fn select_preserves_order_and_warns_on_truncation() {
        let ps = pools(4);
        let out = run_select(&ps, &select_opts(Strategy::Random, 20)).unwrap();
        let ids: Vec<_> = out.records.iter().map(|r| r.pool_id.as_str()).collect();
        assert_eq!(ids, ["000", "001", "002", "003"]);
        assert_eq!(out.warnings.len(), 4);
        assert!(out.records.iter().all(|r| r.selected.len() == 7));
        assert_eq!(out.records[2].seed, Some(derive_seed(5, 2)));
    }

    #[test]
    fn train_rejects_unknown_ids() {
        let ps = pools(2);
        let mut sel = run_select(&ps, &select_opts(Strategy::Mass, 2))
            .unwrap()
            .records;
        sel[1].pool_id = "nope".into();
        let opts = TrainOptions {
            config: TrainConfig::default(),
            batch: false,
        };
        let err = run_train(&ps, Some(&sel), &opts).unwrap_err();
        assert!(err.to_string().contains("nope"));
    }

    #[test]
    fn eval_needs_selection_for_stability() {
        let ps = pools(1);
        let fits = run_train(
            &ps,
            None,
            &TrainOptions {
                config: TrainConfig::default(),
                batch: false,
            },
        )
        .unwrap()
        .records;
        let opts = EvalOptions {
            metrics: vec![Metric::Stability],
            ks: vec![1],
            beta: 0.1,
            gamma: 0.1,
            theta0: None,
            tol: 1e-10,
            max_iter: 200,
        };
        assert!(run_eval(&ps, None, &fits, None, &opts).is_err());
    }

    #[test]
    fn bench_config_reports_key_path() {
        let err = BenchConfig::from_json(
            r#"{"strategies":["mass"],"n_grid":[4],"seeds":[0],"synth":{"dim":"x"}}"#,
        )
        .unwrap_err();
        match err {
            Error::Schema { path, .. } => assert_eq!(path, "synth.dim"),
            other => panic!("{other:?}"),
        }
        let err = BenchConfig::from_json(r#"{"strategies":["best"],"n_grid":[4],"seeds":[0]}"#)
            .unwrap_err();
        assert!(matches!(err, Error::Schema { ref path, .. } if path == "strategies[0]"));
    }
}
