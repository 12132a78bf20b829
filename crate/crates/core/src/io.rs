//! File formats: JSONL pool and selection files, JSONL fit files, CSV reports.
//!
//! Floats are written with 17 significant digits (`{:.16e}`), which
//! round-trips every finite `f64` exactly. Non-finite values are written as
//! `null` in JSON and as `inf`/`-inf`/`NaN` in CSV.

use std::io::{BufRead, Write};

use nalgebra::DVector;
use serde::Deserialize;

use crate::error::{invalid, Error, Result};
use crate::pool::RawPool;
use crate::select::{SelectionResult, Strategy};
use crate::trainer::FitReport;

/// Formats `x` with 17 significant digits.
pub fn fmt_f64(x: f64) -> String {
    if x.is_finite() {
        format!("{x:.16e}")
    } else if x.is_nan() {
        "NaN".into()
    } else if x > 0.0 {
        "inf".into()
    } else {
        "-inf".into()
    }
}

fn json_f64(x: f64) -> String {
    if x.is_finite() {
        fmt_f64(x)
    } else {
        "null".into()
    }
}

fn json_array<T>(xs: impl IntoIterator<Item = T>, f: impl Fn(T) -> String) -> String {
    let parts: Vec<String> = xs.into_iter().map(f).collect();
    format!("[{}]", parts.join(","))
}

fn json_vec(xs: &[f64]) -> String {
    json_array(xs.iter().copied(), json_f64)
}

fn json_str(s: &str) -> String {
    serde_json::to_string(s).expect("string serialization cannot fail")
}

/// Parses a JSON value, reporting the key path of any schema violation.
pub fn from_json_str<T: serde::de::DeserializeOwned>(s: &str) -> Result<T> {
    let de = &mut serde_json::Deserializer::from_str(s);
    serde_path_to_error::deserialize(de).map_err(|e| Error::Schema {
        path: e.path().to_string(),
        message: e.inner().to_string(),
    })
}

/// Non-blank lines with their 1-based line numbers.
fn lines(reader: impl BufRead) -> impl Iterator<Item = Result<(usize, String)>> {
    reader
        .lines()
        .enumerate()
        .map(|(i, l)| l.map(|l| (i + 1, l)).map_err(Error::from))
        .filter(|r| !matches!(r, Ok((_, l)) if l.trim().is_empty()))
}

fn parse_line<T: serde::de::DeserializeOwned>(line: usize, text: &str) -> Result<T> {
    from_json_str(text).map_err(|e| Error::Parse {
        line,
        message: e.to_string(),
    })
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct PoolLine {
    pool_id: String,
    dim: usize,
    preferred: Vec<f64>,
    candidates: Vec<Vec<f64>>,
    logp_ref_preferred: f64,
    logp_ref_candidates: Vec<f64>,
    #[serde(default)]
    theta_true: Option<Vec<f64>>,
}

pub fn write_pool<W: Write>(w: &mut W, pool: &RawPool) -> Result<()> {
    let cands = json_array(pool.candidates.iter(), |c| json_vec(c.as_slice()));
    write!(
        w,
        "{{\"pool_id\":{},\"dim\":{},\"preferred\":{},\"candidates\":{},\"logp_ref_preferred\":{},\"logp_ref_candidates\":{}",
        json_str(&pool.pool_id),
        pool.dim(),
        json_vec(pool.preferred.as_slice()),
        cands,
        json_f64(pool.logp_ref_preferred),
        json_vec(&pool.logp_ref_candidates),
    )?;
    if let Some(t) = &pool.theta_true {
        write!(w, ",\"theta_true\":{}", json_vec(t.as_slice()))?;
    }
    writeln!(w, "}}")?;
    Ok(())
}

pub fn write_pools<W: Write>(w: &mut W, pools: &[RawPool]) -> Result<()> {
    for p in pools {
        write_pool(w, p)?;
    }
    Ok(())
}

/// Reads a pool file. Every line must share one dimension.
pub fn read_pools(reader: impl BufRead) -> Result<Vec<RawPool>> {
    let mut pools = Vec::new();
    let mut dim = None;
    for item in lines(reader) {
        let (line, text) = item?;
        let pl: PoolLine = parse_line(line, &text)?;
        let err = |message: String| Error::Parse { line, message };
        if *dim.get_or_insert(pl.dim) != pl.dim {
            return Err(err(format!(
                "dim {} differs from earlier lines ({})",
                pl.dim,
                dim.unwrap()
            )));
        }
        if pl.preferred.len() != pl.dim {
            return Err(err(format!(
                "preferred has {} entries, dim is {}",
                pl.preferred.len(),
                pl.dim
            )));
        }
        if let Some((i, c)) = pl
            .candidates
            .iter()
            .enumerate()
            .find(|(_, c)| c.len() != pl.dim)
        {
            return Err(err(format!(
                "candidates[{i}] has {} entries, dim is {}",
                c.len(),
                pl.dim
            )));
        }
        let pool = RawPool {
            pool_id: pl.pool_id,
            preferred: DVector::from_vec(pl.preferred),
            candidates: pl.candidates.into_iter().map(DVector::from_vec).collect(),
            logp_ref_preferred: pl.logp_ref_preferred,
            logp_ref_candidates: pl.logp_ref_candidates,
            theta_true: pl.theta_true.map(DVector::from_vec),
        };
        pool.validate().map_err(|e| err(e.to_string()))?;
        pools.push(pool);
    }
    Ok(pools)
}

/// One line of a selection file.
#[derive(Clone, Debug, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SelectionRecord {
    pub pool_id: String,
    pub strategy: Strategy,
    pub n: usize,
    pub beta: f64,
    pub gamma: f64,
    pub selected: Vec<usize>,
    pub gains: Vec<f64>,
    pub quads: Vec<f64>,
    pub logdet_final: f64,
    #[serde(default)]
    pub seed: Option<u64>,
}

impl SelectionRecord {
    pub fn from_result(r: &SelectionResult, beta: f64, gamma: f64) -> Self {
        Self {
            pool_id: r.pool_id.clone(),
            strategy: r.strategy,
            n: r.n,
            beta,
            gamma,
            selected: r.selected.clone(),
            gains: r.gains.clone(),
            quads: r.quads.clone(),
            logdet_final: r.logdet_final(),
            seed: r.seed,
        }
    }

    /// Rebuilds a [`SelectionResult`] for a pool of dimension `dim`. The
    /// log-det trajectory is reconstructed from the recorded gains.
    pub fn to_result(&self, dim: usize) -> SelectionResult {
        let logdet_initial = dim as f64 * self.gamma.ln();
        let mut acc = logdet_initial;
        let logdet_trajectory = self
            .gains
            .iter()
            .map(|g| {
                acc += g;
                acc
            })
            .collect();
        SelectionResult {
            pool_id: self.pool_id.clone(),
            strategy: self.strategy,
            n: self.n,
            selected: self.selected.clone(),
            gains: self.gains.clone(),
            quads: self.quads.clone(),
            logdet_trajectory,
            logdet_initial,
            seed: self.seed,
            truncated: self.strategy != Strategy::MassReselect && self.selected.len() < self.n,
        }
    }
}

pub fn write_selection<W: Write>(w: &mut W, r: &SelectionRecord) -> Result<()> {
    write!(
        w,
        "{{\"pool_id\":{},\"strategy\":{},\"n\":{},\"beta\":{},\"gamma\":{},\"selected\":{},\"gains\":{},\"quads\":{},\"logdet_final\":{}",
        json_str(&r.pool_id),
        json_str(r.strategy.as_str()),
        r.n,
        json_f64(r.beta),
        json_f64(r.gamma),
        json_array(r.selected.iter(), |i| i.to_string()),
        json_vec(&r.gains),
        json_vec(&r.quads),
        json_f64(r.logdet_final),
    )?;
    if let Some(seed) = r.seed {
        write!(w, ",\"seed\":{seed}")?;
    }
    writeln!(w, "}}")?;
    Ok(())
}

pub fn read_selections(reader: impl BufRead) -> Result<Vec<SelectionRecord>> {
    let mut out = Vec::new();
    for item in lines(reader) {
        let (line, text) = item?;
        let rec: SelectionRecord = parse_line(line, &text)?;
        if rec.gains.len() != rec.selected.len() || rec.quads.len() != rec.selected.len() {
            return Err(Error::Parse {
                line,
                message: "selected, gains and quads must have equal lengths".into(),
            });
        }
        out.push(rec);
    }
    Ok(out)
}

/// One line of a fit file: per-pool, or a single batch fit over `pool_ids`.
#[derive(Clone, Debug, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FitRecord {
    pub pool_id: String,
    #[serde(default)]
    pub pool_ids: Option<Vec<String>>,
    pub theta: Vec<f64>,
    pub residual: f64,
    pub iterations: usize,
    pub converged: bool,
    pub objective: f64,
}

impl FitRecord {
    pub fn from_report(pool_id: &str, pool_ids: Option<Vec<String>>, r: &FitReport) -> Self {
        Self {
            pool_id: pool_id.to_string(),
            pool_ids,
            theta: r.theta.theta.as_slice().to_vec(),
            residual: r.residual,
            iterations: r.iterations,
            converged: r.converged,
            objective: r.objective,
        }
    }

    pub fn theta(&self) -> DVector<f64> {
        DVector::from_vec(self.theta.clone())
    }
}

pub fn write_fit<W: Write>(w: &mut W, r: &FitRecord) -> Result<()> {
    write!(w, "{{\"pool_id\":{}", json_str(&r.pool_id))?;
    if let Some(ids) = &r.pool_ids {
        write!(
            w,
            ",\"pool_ids\":{}",
            json_array(ids.iter(), |s| json_str(s))
        )?;
    }
    writeln!(
        w,
        ",\"theta\":{},\"residual\":{},\"iterations\":{},\"converged\":{},\"objective\":{}}}",
        json_vec(&r.theta),
        json_f64(r.residual),
        r.iterations,
        r.converged,
        json_f64(r.objective),
    )?;
    Ok(())
}

pub fn read_fits(reader: impl BufRead) -> Result<Vec<FitRecord>> {
    lines(reader)
        .map(|item| {
            let (line, text) = item?;
            parse_line(line, &text)
        })
        .collect()
}

/// Reads a θ₀ vector: a JSON array of floats.
pub fn read_theta_vector(text: &str, dim: usize) -> Result<DVector<f64>> {
    let v: Vec<f64> = from_json_str(text)?;
    if v.len() != dim {
        return Err(invalid(format!(
            "theta0 has {} entries, pools have dimension {dim}",
            v.len()
        )));
    }
    Ok(DVector::from_vec(v))
}

/// Writes a header and rows as CSV.
pub fn write_csv<W: Write>(w: W, header: &[String], rows: &[Vec<String>]) -> Result<()> {
    let mut wr = csv::Writer::from_writer(w);
    wr.write_record(header)?;
    for r in rows {
        wr.write_record(r)?;
    }
    wr.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn sample_pool() -> RawPool {
        RawPool {
            pool_id: "007".into(),
            preferred: DVector::from_vec(vec![0.1, -2.5e-300]),
            candidates: vec![
                DVector::from_vec(vec![1.0 / 3.0, 1e300]),
                DVector::from_vec(vec![-0.0, 7.0]),
            ],
            logp_ref_preferred: -0.6931471805599417,
            logp_ref_candidates: vec![-1.0, -2.0],
            theta_true: Some(DVector::from_vec(vec![0.6, 0.8])),
        }
    }

    #[test]
    fn seventeen_digits() {
        assert_eq!(fmt_f64(0.1), "1.0000000000000001e-1");
        assert_eq!(fmt_f64(1.0), "1.0000000000000000e0");
        assert_eq!(fmt_f64(f64::INFINITY), "inf");
    }

    #[test]
    fn pool_round_trip() {
        let mut buf = Vec::new();
        write_pool(&mut buf, &sample_pool()).unwrap();
        let back = read_pools(buf.as_slice()).unwrap();
        assert_eq!(back, vec![sample_pool()]);
    }

    #[test]
    fn malformed_line_reports_number() {
        let mut buf = Vec::new();
        write_pool(&mut buf, &sample_pool()).unwrap();
        buf.extend_from_slice(b"\n{\"pool_id\": 3}\n");
        match read_pools(buf.as_slice()) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn inconsistent_dims_rejected() {
        let mut buf = Vec::new();
        write_pool(&mut buf, &sample_pool()).unwrap();
        let mut p = sample_pool();
        p.preferred = DVector::from_vec(vec![1.0, 2.0, 3.0]);
        p.candidates = vec![DVector::from_vec(vec![1.0, 2.0, 3.0])];
        p.logp_ref_candidates = vec![0.0];
        p.theta_true = None;
        write_pool(&mut buf, &p).unwrap();
        assert!(matches!(
            read_pools(buf.as_slice()),
            Err(Error::Parse { line: 2, .. })
        ));
    }

    #[test]
    fn selection_round_trip() {
        let rec = SelectionRecord {
            pool_id: "001".into(),
            strategy: crate::select::Strategy::Softmax,
            n: 3,
            beta: 0.1,
            gamma: 0.1,
            selected: vec![4, 0, 2],
            gains: vec![0.5, 0.25, 1.0 / 7.0],
            quads: vec![10.0, 3.0, 2.0],
            logdet_final: -5.0,
            seed: Some(u64::MAX - 3),
        };
        let mut buf = Vec::new();
        write_selection(&mut buf, &rec).unwrap();
        assert_eq!(read_selections(buf.as_slice()).unwrap(), vec![rec]);
    }

    #[test]
    fn fit_round_trip() {
        let rec = FitRecord {
            pool_id: "batch".into(),
            pool_ids: Some(vec!["000".into(), "001".into()]),
            theta: vec![0.1, -0.2],
            residual: 1e-12,
            iterations: 5,
            converged: true,
            objective: 0.5831,
        };
        let mut buf = Vec::new();
        write_fit(&mut buf, &rec).unwrap();
        assert_eq!(read_fits(buf.as_slice()).unwrap(), vec![rec]);
    }

    #[test]
    fn schema_errors_name_the_path() {
        #[derive(Deserialize, Debug)]
        #[allow(dead_code)]
        struct Outer {
            inner: Inner,
        }
        #[derive(Deserialize, Debug)]
        #[allow(dead_code)]
        struct Inner {
            n_grid: Vec<usize>,
        }
        match from_json_str::<Outer>(r#"{"inner": {"n_grid": [1, "x"]}}"#) {
            Err(Error::Schema { path, .. }) => assert_eq!(path, "inner.n_grid[1]"),
            other => panic!("{other:?}"),
        }
    }

    proptest! {
        #[test]
        fn floats_round_trip(xs in proptest::collection::vec(proptest::num::f64::NORMAL | proptest::num::f64::SUBNORMAL | proptest::num::f64::ZERO, 1..8)) {
            let pool = RawPool {
                pool_id: "x".into(),
                preferred: DVector::from_vec(xs.clone()),
                candidates: vec![DVector::from_vec(xs.iter().rev().copied().collect())],
                logp_ref_preferred: xs[0],
                logp_ref_candidates: vec![xs[xs.len() - 1]],
                theta_true: None,
            };
            let mut buf = Vec::new();
            write_pool(&mut buf, &pool).unwrap();
            let back = read_pools(buf.as_slice()).unwrap();
            for (a, b) in back[0].preferred.iter().zip(pool.preferred.iter()) {
                prop_assert_eq!(a.to_bits() & !(1 << 63), b.to_bits() & !(1 << 63));
            }
            prop_assert_eq!(&back[0].candidates, &pool.candidates);
        }
    }
}
