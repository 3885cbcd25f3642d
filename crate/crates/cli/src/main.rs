use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::info;
use mhla_core::attention::{softmax_attention, AttentionConfig};
use mhla_core::bench::{
    measured, run_benchmark, scaling_summary, slope_passes, write_bench_csv_atomic, MRule,
    Precision, RunConfig,
};
use mhla_core::diagnostics::{
    collapse_report_with, write_reports_csv, LayoutChoice, Mechanism, ReportOptions, TolPolicy,
};
use mhla_core::fixture::{load_fixture, save_fixture, Fixture, FixtureError};
use mhla_core::grad::{distill_coefficients, write_loss_csv, TrainRecord};
use mhla_core::mixing::{locality_init_with_floor, CoefficientMatrix};
use mhla_core::partition::BlockPartition;
use mhla_core::tensor::{DenseMatrix, FeatureMap};
use mhla_core::verify::run_verify;
use mhla_core::MhlaError;
use rand_chacha::rand_core::SeedableRng;

const EXIT_CHECK_FAILED: u8 = 1;
const EXIT_USAGE: u8 = 2;
const EXIT_IO: u8 = 3;

/// Multi-head linear attention: verification, diagnostics, benchmarks and
/// coefficient distillation.
#[derive(Debug, Parser)]
#[command(name = "mhla", version, about)]
struct Cli {
    /// TOML file with run settings; flags override it.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,

    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Write results here instead of stdout.
    #[arg(long, global = true, value_name = "PATH")]
    out: Option<PathBuf>,

    /// Added to every locality weight before row normalization.
    #[arg(long, global = true, value_name = "EPS")]
    init_floor: Option<f64>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run the oracle-equivalence checks; fails if any check fails.
    Verify {
        /// Spread the checks over all cores.
        #[arg(long)]
        parallel: bool,
    },
    /// Rank and entropy of the materialized attention maps, one row per
    /// mechanism and seed.
    Diagnose(DiagnoseArgs),
    /// Time the mechanisms over a sweep of sequence lengths.
    Bench(BenchArgs),
    /// Fit the mixing coefficients to a softmax-attention target.
    Distill(DistillArgs),
}

#[derive(Debug, Args)]
struct DiagnoseArgs {
    #[arg(long, default_value_t = 256)]
    n: usize,
    #[arg(long)]
    d: Option<usize>,
    #[arg(long, default_value_t = 16)]
    m: usize,
    /// Number of consecutive seeds starting at --seed.
    #[arg(long, default_value_t = 1)]
    seeds: u64,
    /// auto, linear or grid.
    #[arg(long, default_value = "auto")]
    layout: LayoutChoice,
    #[arg(long)]
    feature_map: Option<FeatureMap>,
    /// Explicit singular-value threshold instead of max-dim * eps * sigma_max.
    #[arg(long)]
    tol: Option<f64>,
    /// Zero-pad N up to a multiple of M instead of failing.
    #[arg(long)]
    pad: bool,
}

#[derive(Debug, Args)]
struct BenchArgs {
    /// Comma-separated subset of softmax, linear, mhla.
    #[arg(long, value_delimiter = ',')]
    mechanisms: Option<Vec<Mechanism>>,
    #[arg(long, value_delimiter = ',')]
    n: Option<Vec<usize>>,
    #[arg(long)]
    d: Option<usize>,
    /// floor-sqrt-n or a fixed block count.
    #[arg(long)]
    m_rule: Option<MRule>,
    #[arg(long)]
    reps: Option<usize>,
    /// double or single.
    #[arg(long)]
    precision: Option<Precision>,
    #[arg(long)]
    feature_map: Option<FeatureMap>,
    /// Softmax is skipped when its N x N scores exceed this many bytes.
    #[arg(long)]
    mem_budget: Option<u64>,
    /// Exit 1 when a fitted slope misses its threshold.
    #[arg(long)]
    check: bool,
}

#[derive(Debug, Args)]
struct DistillArgs {
    #[arg(long, default_value_t = 64)]
    n: usize,
    #[arg(long, default_value_t = 8)]
    d: usize,
    #[arg(long, default_value_t = 8)]
    m: usize,
    #[arg(long, default_value_t = 0.1)]
    lr: f64,
    #[arg(long, default_value_t = 500)]
    steps: usize,
    #[arg(long)]
    feature_map: Option<FeatureMap>,
    /// Drop the normalizer (the output is the raw mixed numerator).
    #[arg(long)]
    no_normalize: bool,
    /// Continue from a fixture written by --save.
    #[arg(long, value_name = "PATH")]
    resume: Option<PathBuf>,
    /// Save inputs, target and learned coefficients as a fixture.
    #[arg(long, value_name = "PATH")]
    save: Option<PathBuf>,
    /// Exit 1 unless the final loss is at most half the initial loss.
    #[arg(long)]
    check: bool,
}

#[derive(Debug)]
enum Failure {
    Check(String),
    Usage(String),
    Io(String),
}

impl From<MhlaError> for Failure {
    fn from(e: MhlaError) -> Self {
        match e {
            MhlaError::Io(_) | MhlaError::Csv(_) | MhlaError::Fixture(_) => {
                Failure::Io(e.to_string())
            }
            MhlaError::InvalidConfig(_)
            | MhlaError::NotDivisible { .. }
            | MhlaError::TooLarge { .. } => Failure::Usage(e.to_string()),
            other => Failure::Check(other.to_string()),
        }
    }
}

impl From<io::Error> for Failure {
    fn from(e: io::Error) -> Self {
        Failure::Io(e.to_string())
    }
}

impl From<FixtureError> for Failure {
    fn from(e: FixtureError) -> Self {
        Failure::Io(e.to_string())
    }
}

fn load_config(path: Option<&Path>) -> Result<RunConfig, Failure> {
    let Some(path) = path else {
        return Ok(RunConfig::default());
    };
    let text =
        fs::read_to_string(path).map_err(|e| Failure::Io(format!("{}: {e}", path.display())))?;
    toml::from_str(&text).map_err(|e| Failure::Usage(format!("{}: {e}", path.display())))
}

/// Writes to `--out` through a temporary file, or to stdout.
fn emit(out: Option<&Path>, bytes: &[u8]) -> Result<(), Failure> {
    match out {
        Some(path) => {
            let tmp = path.with_extension("tmp-out");
            fs::write(&tmp, bytes).and_then(|_| fs::rename(&tmp, path))?;
        }
        None => {
            let mut stdout = io::stdout().lock();
            stdout.write_all(bytes)?;
            stdout.flush()?;
        }
    }
    Ok(())
}

fn verify(seed: u64, parallel: bool, out: Option<&Path>) -> Result<(), Failure> {
    let results = run_verify(seed, parallel)?;
    let mut text = String::new();
    for r in &results {
        text.push_str(&r.line());
        text.push('\n');
    }
    let failed = results.iter().filter(|r| !r.passed).count();
    text.push_str(&format!(
        "{} of {} checks passed\n",
        results.len() - failed,
        results.len()
    ));
    emit(out, text.as_bytes())?;
    if failed > 0 {
        return Err(Failure::Check(format!(
            "{failed} verification checks failed"
        )));
    }
    Ok(())
}

fn diagnose(
    cfg: &RunConfig,
    seed: u64,
    init_floor: f64,
    args: &DiagnoseArgs,
    out: Option<&Path>,
) -> Result<(), Failure> {
    let d = args.d.unwrap_or(16);
    let opts = ReportOptions {
        layout: args.layout,
        feature_map: args.feature_map.unwrap_or(cfg.feature_map),
        init_floor,
        tol: args.tol.map_or(TolPolicy::Auto, TolPolicy::Explicit),
        pad: args.pad,
    };
    let mut reports = Vec::with_capacity(3 * args.seeds as usize);
    for s in seed..seed + args.seeds {
        reports.extend(collapse_report_with(s, args.n, d, args.m, &opts)?);
    }
    let layout = match args.layout {
        LayoutChoice::Auto => "auto (square grid when N and M are squares, else 1d)",
        LayoutChoice::Linear => "linear-1d",
        LayoutChoice::Grid => "grid-2d",
    };
    let protocol = vec![
        format!(
            "inputs: standard normal q,k per seed; feature map {}; locality init, floor {init_floor}; layout {layout}",
            opts.feature_map
        ),
        match opts.tol {
            TolPolicy::Auto => "rank: singular values above max(N,N) * eps * sigma_max".to_string(),
            TolPolicy::Explicit(t) => format!("rank: singular values above {t}"),
        },
        "entropy: mean over rows of -sum a log a in nats; normalized by ln N".to_string(),
    ];
    let mut buf = Vec::new();
    write_reports_csv(&mut buf, &reports, &protocol)?;
    emit(out, &buf)
}

fn bench(
    mut cfg: RunConfig,
    seed: u64,
    args: &BenchArgs,
    out: Option<&Path>,
) -> Result<(), Failure> {
    cfg.seed = seed;
    if let Some(m) = &args.mechanisms {
        cfg.mechanisms = m.clone();
    }
    if let Some(n) = &args.n {
        cfg.n_values = n.clone();
    }
    if let Some(d) = args.d {
        cfg.d = d;
    }
    if let Some(r) = args.m_rule {
        cfg.m_rule = r;
    }
    if let Some(r) = args.reps {
        cfg.reps = r;
    }
    if let Some(p) = args.precision {
        cfg.precision = p;
    }
    if let Some(fm) = args.feature_map {
        cfg.feature_map = fm;
        cfg.normalize = fm.is_nonnegative();
    }
    if args.mem_budget.is_some() {
        cfg.mem_budget_bytes = args.mem_budget;
    }
    cfg.validate()?;

    let entries = run_benchmark(&cfg)?;
    let slopes = scaling_summary(&entries, &cfg.mechanisms);
    for r in measured(&entries) {
        info!("{} n={} median {:.6}s", r.mechanism, r.n, r.median_seconds);
    }
    let protocol = cfg.protocol_lines();
    match out {
        Some(path) => write_bench_csv_atomic(path, &entries, &slopes, &protocol)?,
        None => emit(
            None,
            &mhla_core::bench::render_bench_csv(&entries, &slopes, &protocol, true)?,
        )?,
    }
    if args.check {
        let misses: Vec<String> = slopes
            .iter()
            .filter_map(|(mech, s)| match s {
                Ok(s) if !slope_passes(*mech, *s, &cfg.thresholds) => {
                    Some(format!("{mech} slope {s:.3}"))
                }
                Ok(_) => None,
                Err(e) => Some(e.to_string()),
            })
            .collect();
        if !misses.is_empty() {
            return Err(Failure::Check(format!(
                "scaling check failed: {}",
                misses.join("; ")
            )));
        }
    }
    Ok(())
}

struct DistillState {
    q: DenseMatrix,
    k: DenseMatrix,
    v: DenseMatrix,
    target: DenseMatrix,
    coefficients: CoefficientMatrix,
    steps_done: usize,
}

fn take(fx: &mut Fixture, name: &str) -> Result<DenseMatrix, Failure> {
    fx.shift_remove(name)
        .ok_or_else(|| Failure::Io(FixtureError::MissingEntry(name.to_string()).to_string()))
}

fn distill(
    cfg: &RunConfig,
    seed: u64,
    init_floor: f64,
    args: &DistillArgs,
    out: Option<&Path>,
) -> Result<(), Failure> {
    let fm = args.feature_map.unwrap_or(cfg.feature_map);
    let normalize = cfg.normalize && !args.no_normalize && fm.is_nonnegative();
    let state = match &args.resume {
        Some(path) => {
            let mut fx = load_fixture(path)?;
            let meta = take(&mut fx, "distill.meta")?;
            DistillState {
                q: take(&mut fx, "distill.q")?,
                k: take(&mut fx, "distill.k")?,
                v: take(&mut fx, "distill.v")?,
                target: take(&mut fx, "distill.target")?,
                coefficients: CoefficientMatrix::new(
                    take(&mut fx, "distill.coefficients")?,
                    false,
                )?,
                steps_done: meta.data().first().copied().unwrap_or(0.0) as usize,
            }
        }
        None => {
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let q = DenseMatrix::gaussian(&mut rng, args.n, args.d);
            let k = DenseMatrix::gaussian(&mut rng, args.n, args.d);
            let v = DenseMatrix::gaussian(&mut rng, args.n, args.d);
            let target = softmax_attention(&q, &k, &v)?;
            let partition = BlockPartition::linear(args.n, args.m)?;
            let coefficients = locality_init_with_floor(&partition, init_floor);
            DistillState {
                q,
                k,
                v,
                target,
                coefficients,
                steps_done: 0,
            }
        }
    };
    let n = state.q.rows();
    let partition = BlockPartition::linear(n, state.coefficients.num_blocks())?;
    let attn = AttentionConfig::mhla(fm, normalize, partition, state.coefficients.clone())?;
    let (learned, mut trace) = distill_coefficients(
        &state.q,
        &state.k,
        &state.v,
        &state.target,
        &attn,
        args.steps,
        args.lr,
    )?;
    for r in &mut trace {
        r.step += state.steps_done;
    }
    let final_loss = mhla_core::grad::mean_squared_error(
        &mhla_core::grad::mhla_apply(
            &state.q,
            &state.k,
            &state.v,
            &attn.with_coefficients(learned.clone())?,
        )?,
        &state.target,
    )?;
    trace.push(TrainRecord {
        step: state.steps_done + args.steps,
        loss: final_loss,
        coefficient_snapshot_norm: learned.values().frobenius_norm(),
    });

    let mut buf = Vec::new();
    write_loss_csv(&mut buf, &trace)?;
    emit(out, &buf)?;

    if let Some(path) = &args.save {
        let mut fx = Fixture::new();
        fx.insert("distill.q".into(), state.q);
        fx.insert("distill.k".into(), state.k);
        fx.insert("distill.v".into(), state.v);
        fx.insert("distill.target".into(), state.target);
        fx.insert("distill.coefficients".into(), learned.into_values());
        fx.insert(
            "distill.meta".into(),
            DenseMatrix::from_vec(1, 2, vec![(state.steps_done + args.steps) as f64, args.lr])?,
        );
        save_fixture(path, &fx)?;
    }

    let initial = trace.first().map_or(final_loss, |r| r.loss);
    info!("distill loss {initial:.6e} -> {final_loss:.6e}");
    if args.check && !(final_loss <= 0.5 * initial) {
        return Err(Failure::Check(format!(
            "final loss {final_loss:.6e} is above half the initial {initial:.6e}"
        )));
    }
    Ok(())
}

fn run(cli: Cli) -> Result<(), Failure> {
    let cfg = load_config(cli.config.as_deref())?;
    let seed = cli.seed.unwrap_or(cfg.seed);
    let out = cli.out.clone().or_else(|| cfg.out.clone());
    let out = out.as_deref();
    let init_floor = cli.init_floor.unwrap_or(0.0);
    if !(init_floor >= 0.0 && init_floor.is_finite()) {
        return Err(Failure::Usage(format!(
            "--init-floor must be a nonnegative number, got {init_floor}"
        )));
    }
    match &cli.command {
        Command::Verify { parallel } => verify(seed, *parallel, out),
        Command::Diagnose(args) => diagnose(&cfg, seed, init_floor, args, out),
        Command::Bench(args) => bench(cfg.clone(), seed, args, out),
        Command::Distill(args) => distill(&cfg, seed, init_floor, args, out),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Check(msg)) => {
            eprintln!("mhla: {msg}");
            ExitCode::from(EXIT_CHECK_FAILED)
        }
        Err(Failure::Usage(msg)) => {
            eprintln!("mhla: {msg}");
            ExitCode::from(EXIT_USAGE)
        }
        Err(Failure::Io(msg)) => {
            eprintln!("mhla: {msg}");
            ExitCode::from(EXIT_IO)
        }
    }
}
