use std::fs::File;
use std::io::{self, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::str::FromStr;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use massdpo::io::{
    read_fits, read_pools, read_selections, read_theta_vector, write_csv, write_fit, write_pools,
    write_selection, FitRecord, SelectionRecord,
};
use massdpo::nalgebra::DVector;
use massdpo::pipeline::{
    decay_table, run_bench, run_eval, run_select, run_train, summary_table, BenchConfig,
    EvalOptions, Metric, SelectOptions, Table, TrainOptions,
};
use massdpo::synth::{gen_dataset, PreferredRule, SynthConfig};
use massdpo::{RawPool, Strategy, TrainConfig};

#[derive(Parser)]
#[command(
    name = "massdpo",
    version,
    about = "Active negative selection for multi-negative preference training"
)]
struct Cli {
    /// Worker threads for per-pool work (0 uses every core).
    #[arg(long, global = true, default_value_t = 0)]
    threads: usize,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate synthetic pools as JSONL.
    Synth(SynthArgs),
    /// Select negatives for every pool.
    Select(SelectArgs),
    /// Fit the regularized loss on selected subsets or full pools.
    Train(TrainArgs),
    /// Write evaluation metrics as CSV.
    Eval(EvalArgs),
    /// Run an error-decay sweep from a JSON config.
    Bench(BenchArgs),
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long, default_value_t = 16)]
    d: usize,
    #[arg(long, default_value_t = 1)]
    pools: usize,
    /// Items per pool, preferred included.
    #[arg(long, default_value_t = 200)]
    candidates: usize,
    #[arg(long, default_value_t = 20)]
    clusters: usize,
    #[arg(long, default_value_t = 0.1)]
    cluster_noise: f64,
    #[arg(long, default_value_t = 1.0)]
    feature_scale: f64,
    /// pl-sample or argmax.
    #[arg(long, default_value = "pl-sample", value_parser = PreferredRule::from_str)]
    preferred_rule: PreferredRule,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output path, or `-` for standard output.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SelectArgs {
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    n: usize,
    #[arg(long, default_value_t = 0.1)]
    beta: f64,
    #[arg(long, default_value_t = 0.1)]
    gamma: f64,
    /// mass, mass-reselect, random, softmax, topk, or brute.
    #[arg(long, default_value = "mass", value_parser = Strategy::from_str)]
    strategy: Strategy,
    /// JSON array file, or `zero`.
    #[arg(long, default_value = "zero")]
    theta0: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    pools: PathBuf,
    #[arg(
        long,
        conflicts_with = "full_pool",
        required_unless_present = "full_pool"
    )]
    selection: Option<PathBuf>,
    /// Train on every candidate of each pool.
    #[arg(long)]
    full_pool: bool,
    /// Fit one shared parameter vector across all pools.
    #[arg(long)]
    batch: bool,
    #[arg(long, default_value_t = 0.1)]
    beta: f64,
    #[arg(long, default_value_t = 0.1)]
    gamma: f64,
    #[arg(long, default_value_t = 1e-10)]
    tol: f64,
    #[arg(long, default_value_t = 200)]
    max_iter: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    pools: PathBuf,
    #[arg(long)]
    selection: Option<PathBuf>,
    /// Fit file with the estimates to evaluate.
    #[arg(long)]
    theta: PathBuf,
    /// Fit file with full-pool optima; fitted on the fly when absent.
    #[arg(long)]
    theta_ref: Option<PathBuf>,
    #[arg(long, value_delimiter = ',', default_value = "rel,stability,leverage,rank,diag", value_parser = Metric::from_str)]
    metrics: Vec<Metric>,
    #[arg(long, value_delimiter = ',', default_value = "1,3")]
    ks: Vec<usize>,
    /// Used only for pools without a selection record.
    #[arg(long, default_value_t = 0.1)]
    beta: f64,
    /// Used only for pools without a selection record.
    #[arg(long, default_value_t = 0.1)]
    gamma: f64,
    #[arg(long, default_value = "zero")]
    theta0: String,
    #[arg(long, default_value_t = 1e-10)]
    tol: f64,
    #[arg(long, default_value_t = 200)]
    max_iter: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct BenchArgs {
    #[arg(long)]
    config: PathBuf,
    /// Per-row decay table.
    #[arg(long)]
    out: PathBuf,
    /// Medians, slopes, and paired comparisons.
    #[arg(long)]
    summary_out: PathBuf,
}

fn open(path: &Path) -> Result<BufReader<File>> {
    let f = File::open(path).with_context(|| format!("cannot open {}", path.display()))?;
    Ok(BufReader::new(f))
}

fn create(path: &Path) -> Result<Box<dyn Write>> {
    if path == Path::new("-") {
        return Ok(Box::new(BufWriter::new(io::stdout().lock())));
    }
    let f = File::create(path).with_context(|| format!("cannot create {}", path.display()))?;
    Ok(Box::new(BufWriter::new(f)))
}

fn load_pools(path: &Path) -> Result<Vec<RawPool>> {
    read_pools(open(path)?).with_context(|| format!("reading {}", path.display()))
}

fn load_selections(path: &Path) -> Result<Vec<SelectionRecord>> {
    read_selections(open(path)?).with_context(|| format!("reading {}", path.display()))
}

fn load_fits(path: &Path) -> Result<Vec<FitRecord>> {
    read_fits(open(path)?).with_context(|| format!("reading {}", path.display()))
}

fn load_theta0(arg: &str, pools: &[RawPool]) -> Result<Option<DVector<f64>>> {
    if arg == "zero" {
        return Ok(None);
    }
    let Some(first) = pools.first() else {
        return Ok(None);
    };
    let text = std::fs::read_to_string(arg).with_context(|| format!("cannot read {arg}"))?;
    Ok(Some(read_theta_vector(&text, first.dim())?))
}

fn warn(warnings: &[String]) {
    for w in warnings {
        eprintln!("warning: {w}");
    }
}

fn write_table(path: &Path, t: &Table) -> Result<()> {
    let mut w = create(path)?;
    write_csv(&mut w, &t.header, &t.rows)?;
    w.flush()?;
    Ok(())
}

fn synth(a: SynthArgs) -> Result<()> {
    let cfg = SynthConfig {
        dim: a.d,
        pools: a.pools,
        candidates_per_pool: a.candidates,
        clusters: a.clusters,
        cluster_noise: a.cluster_noise,
        feature_scale: a.feature_scale,
        preferred_rule: a.preferred_rule,
        seed: a.seed,
        ..SynthConfig::default()
    };
    let pools = gen_dataset(&cfg)?;
    let mut w = create(&a.out)?;
    write_pools(&mut w, &pools)?;
    w.flush()?;
    Ok(())
}

fn select(a: SelectArgs) -> Result<()> {
    let pools = load_pools(&a.input)?;
    let opts = SelectOptions {
        n: a.n,
        beta: a.beta,
        gamma: a.gamma,
        strategy: a.strategy,
        theta0: load_theta0(&a.theta0, &pools)?,
        seed: a.seed,
    };
    let out = run_select(&pools, &opts)?;
    warn(&out.warnings);
    let mut w = create(&a.out)?;
    for r in &out.records {
        write_selection(&mut w, r)?;
    }
    w.flush()?;
    Ok(())
}

fn train(a: TrainArgs) -> Result<()> {
    let pools = load_pools(&a.pools)?;
    let selections = a.selection.as_deref().map(load_selections).transpose()?;
    let opts = TrainOptions {
        config: TrainConfig {
            beta: a.beta,
            gamma: a.gamma,
            tol: a.tol,
            max_iter: a.max_iter,
            theta_init: None,
        },
        batch: a.batch,
    };
    let out = run_train(&pools, selections.as_deref(), &opts)?;
    warn(&out.warnings);
    let mut w = create(&a.out)?;
    for r in &out.records {
        write_fit(&mut w, r)?;
    }
    w.flush()?;
    Ok(())
}

fn eval(a: EvalArgs) -> Result<()> {
    let pools = load_pools(&a.pools)?;
    let selections = a.selection.as_deref().map(load_selections).transpose()?;
    let theta = load_fits(&a.theta)?;
    let theta_ref = a.theta_ref.as_deref().map(load_fits).transpose()?;
    let opts = EvalOptions {
        metrics: a.metrics,
        ks: a.ks,
        beta: a.beta,
        gamma: a.gamma,
        theta0: load_theta0(&a.theta0, &pools)?,
        tol: a.tol,
        max_iter: a.max_iter,
    };
    let table = run_eval(
        &pools,
        selections.as_deref(),
        &theta,
        theta_ref.as_deref(),
        &opts,
    )?;
    write_table(&a.out, &table)
}

fn bench(a: BenchArgs, parallel: bool) -> Result<()> {
    let text = std::fs::read_to_string(&a.config)
        .with_context(|| format!("cannot read {}", a.config.display()))?;
    let cfg =
        BenchConfig::from_json(&text).with_context(|| format!("in {}", a.config.display()))?;
    let report = run_bench(&cfg, parallel)?;
    let failed = report.rows.iter().filter(|r| r.error.is_some()).count();
    if failed > 0 {
        eprintln!("warning: {failed} rows recorded an error");
    }
    write_table(&a.out, &decay_table(&report))?;
    write_table(&a.summary_out, &summary_table(&report))
}

fn run(cli: Cli) -> Result<()> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(cli.threads)
        .build_global()
        .context("cannot start worker pool")?;
    let parallel = rayon::current_num_threads() > 1;
    match cli.command {
        Command::Synth(a) => synth(a),
        Command::Select(a) => {
            if a.n == 0 {
                bail!("--n must be at least 1");
            }
            select(a)
        }
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::Bench(a) => bench(a, parallel),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
