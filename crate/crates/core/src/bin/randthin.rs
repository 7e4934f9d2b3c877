//! Command-line driver: tail-curve generation, calibration, deltas,
//! simulation and covariance marking, with deterministic text reports.
//!
//! Exit codes: 0 ok, 1 validation/input error, 2 numerical failure.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};

use randthin::calibrate::{calibrate_all, CalibrationReport, CalibrationSettings, PriorSpec};
use randthin::dynamics::{FilterPathsConfig, IdentitySampling, InfoProcessParams, SimulationConfig};
use randthin::error::{Error, Result};
use randthin::io;
use randthin::marking;
use randthin::portfolio::{DiscountSpec, TrancheSpec};
use randthin::sensitivity::{single_name_deltas, DeltaMethod};
use randthin::tail::TailCurve;
use randthin::top::{consistency_gaps, enforce_consistency, BirthProcessTop};
use randthin::{MaturityGrid, PortfolioSnapshot, TdMatrixSet};

#[derive(Parser)]
#[command(
    name = "randthin",
    version,
    about = "Single-name calibration, sensitivities and simulation on top of portfolio-level credit models"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a tail-curve file from the synthetic birth-process top model.
    GenTop(GenTopArgs),
    /// Calibrate TD-matrices to a snapshot and a tail curve.
    Calibrate(CalibrateArgs),
    /// Single-name and index tranche deltas from calibrated matrices.
    Deltas(DeltasArgs),
    /// Simulate defaulter identities (optionally with information updating).
    Simulate(SimulateArgs),
    /// Mark the information-process covariance to a spread covariance target.
    Mark(MarkArgs),
}

#[derive(Args)]
struct GenTopArgs {
    /// Number of names in the portfolio.
    #[arg(long)]
    names: usize,
    /// Comma-separated maturities in years (the leading zero is implicit).
    #[arg(long)]
    grid: String,
    /// Base portfolio intensity (per year).
    #[arg(long)]
    a: f64,
    /// Contagion slope: intensity a + b*n after n defaults.
    #[arg(long, default_value_t = 0.0)]
    b: f64,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Copy, Clone, PartialEq, Eq, ValueEnum)]
enum PriorKind {
    Linear,
    Bc,
    Custom,
}

#[derive(Copy, Clone, PartialEq, Eq, ValueEnum)]
enum MethodKind {
    Plain,
    Refined,
}

#[derive(Args)]
struct CalibrateArgs {
    /// Snapshot file (names, cumulative default probabilities, spreads).
    #[arg(long)]
    snapshot: PathBuf,
    /// Tail-curve file; omit to synthesize from --top-a/--top-b.
    #[arg(long)]
    tails: Option<PathBuf>,
    /// Base intensity of a synthesized top model.
    #[arg(long)]
    top_a: Option<f64>,
    /// Contagion slope of a synthesized top model.
    #[arg(long, default_value_t = 0.0)]
    top_b: f64,
    /// Rescale single-name forward probabilities to match the top model's
    /// expected default count per interval.
    #[arg(long)]
    adjust: bool,
    #[arg(long, value_enum, default_value_t = PriorKind::Linear)]
    prior: PriorKind,
    /// Uniformization bound of the linear prior (default: N/2 rounded up).
    #[arg(long)]
    nbar: Option<usize>,
    /// Custom prior matrix file (--prior custom).
    #[arg(long)]
    custom_prior: Option<PathBuf>,
    /// Target delta matrix file, N rows x Ntr columns (--prior bc).
    #[arg(long)]
    target_deltas: Option<PathBuf>,
    /// Comma-separated upper strikes, e.g. "0.03,0.07,0.1,0.15,0.3,1.0".
    #[arg(long)]
    tranches: Option<String>,
    /// Comma-separated running tranche spreads (one per tranche).
    #[arg(long)]
    tranche_spreads: Option<String>,
    /// Riskless short rate.
    #[arg(long, default_value_t = 0.0)]
    rate: f64,
    #[arg(long, default_value_t = 200)]
    max_sweeps: usize,
    /// Max relative error on the single-name constraints.
    #[arg(long, default_value_t = 1e-8)]
    tolerance: f64,
    /// Report the relative entropy of each calibrated matrix w.r.t. the prior.
    #[arg(long)]
    kl: bool,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct DeltasArgs {
    /// Calibrated TD-matrix file from `calibrate`.
    #[arg(long)]
    matrices: PathBuf,
    #[arg(long)]
    snapshot: PathBuf,
    #[arg(long)]
    tranches: String,
    #[arg(long)]
    tranche_spreads: String,
    #[arg(long, default_value_t = 0.0)]
    rate: f64,
    #[arg(long, value_enum, default_value_t = MethodKind::Plain)]
    method: MethodKind,
    /// Maturity interval the deltas refer to (1-based).
    #[arg(long, default_value_t = 1)]
    interval: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SimulateArgs {
    /// Calibrated TD-matrix file from `calibrate`.
    #[arg(long)]
    matrices: PathBuf,
    /// Base intensity of the top model driving default times.
    #[arg(long)]
    top_a: f64,
    /// Contagion slope of the top model.
    #[arg(long, default_value_t = 0.0)]
    top_b: f64,
    /// Simulation horizon in years (default: final maturity).
    #[arg(long)]
    horizon: Option<f64>,
    #[arg(long)]
    paths: usize,
    /// RNG seed; path p uses stream (seed, p).
    #[arg(long)]
    seed: u64,
    /// Information-updating time step in years.
    #[arg(long, default_value_t = 1.0 / 52.0)]
    dt: f64,
    /// Disable information updating (matrices only change at defaults).
    #[arg(long)]
    no_info: bool,
    /// Common observation volatility per name (with --corr builds the
    /// covariance); alternative to --cov.
    #[arg(long)]
    vol: Option<f64>,
    /// Pairwise observation correlation used with --vol.
    #[arg(long, default_value_t = 0.0)]
    corr: f64,
    /// Dense covariance matrix file for the information process.
    #[arg(long)]
    cov: Option<PathBuf>,
    /// Eigenvalues kept in the covariance and its likelihood inverse.
    #[arg(long)]
    trunc_rank: Option<usize>,
    /// Sample identities from the time-zero columns instead of the updated
    /// matrices (A/B comparison).
    #[arg(long)]
    static_identities: bool,
    /// Number of leading paths written to the event log.
    #[arg(long, default_value_t = 10)]
    log_paths: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct MarkArgs {
    /// Empirical covariance of spread log-returns (dense matrix file).
    #[arg(long)]
    cov: PathBuf,
    /// Next-to-default probability vector file.
    #[arg(long)]
    pi: PathBuf,
    /// Portfolio-intensity volatility subtracted from the covariance.
    #[arg(long, default_value_t = 0.0)]
    sigma_y: f64,
    #[arg(long, default_value_t = 20)]
    max_iter: usize,
    #[arg(long, default_value_t = 1e-8)]
    tol: f64,
    /// Eigenvalues kept when the marked covariance feeds the filter.
    #[arg(long)]
    trunc_rank: Option<usize>,
    /// Simulate the filter under the marked parameters and report realized
    /// posterior statistics (requires --seed and --paths).
    #[arg(long)]
    verify: bool,
    #[arg(long)]
    paths: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, default_value_t = 2.0)]
    horizon: f64,
    #[arg(long, default_value_t = 1.0 / 52.0)]
    dt: f64,
    #[arg(long)]
    out: PathBuf,
}

fn main() {
    let cli = Cli::parse();
    let started = Instant::now();
    let result = match cli.command {
        Command::GenTop(args) => cmd_gen_top(args, started),
        Command::Calibrate(args) => cmd_calibrate(args, started),
        Command::Deltas(args) => cmd_deltas(args, started),
        Command::Simulate(args) => cmd_simulate(args, started),
        Command::Mark(args) => cmd_mark(args, started),
    };
    if let Err(e) = result {
        eprintln!("error: {e}");
        std::process::exit(e.exit_code());
    }
}

fn parse_list(s: &str, what: &str) -> Result<Vec<f64>> {
    s.split(',')
        .map(|t| {
            t.trim()
                .parse::<f64>()
                .map_err(|_| Error::invalid(format!("bad {what} entry '{t}'")))
        })
        .collect()
}

fn ensure_out_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path)?;
    Ok(())
}

/// Timestamped metadata kept out of the main reports so those stay
/// byte-stable across reruns.
fn write_run_metadata(out: &Path, command: &str, started: Instant) -> Result<()> {
    let elapsed = started.elapsed();
    let now = std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0);
    let text = format!(
        "command: {command}\nunix_time: {now}\nelapsed_seconds: {:.3}\n",
        elapsed.as_secs_f64()
    );
    fs::write(out.join("run_metadata.txt"), text)?;
    Ok(())
}

fn cmd_gen_top(args: GenTopArgs, started: Instant) -> Result<()> {
    ensure_out_dir(&args.out)?;
    let maturities = parse_list(&args.grid, "grid")?;
    let grid = MaturityGrid::from_maturities(&maturities)?;
    let top = BirthProcessTop::new(args.a, args.b, args.names)?;
    let tails = top.tail_curve(&grid)?;
    io::write_tail_curve(&args.out.join("tails.txt"), &tails)?;
    let mut report = String::from("# randthin top-model tails\n");
    let _ = writeln!(report, "model: birth process, a={} b={}", args.a, args.b);
    let _ = writeln!(report, "names: {}", args.names);
    for m in 1..=grid.interval_count() {
        let _ = writeln!(
            report,
            "expected defaults by T{m} ({}y): {:.6}",
            grid.boundary(m),
            tails.expected_defaults(m)
        );
    }
    fs::write(args.out.join("gen_top_report.txt"), report)?;
    write_run_metadata(&args.out, "gen-top", started)?;
    Ok(())
}

fn build_prior_spec(args: &CalibrateArgs) -> Result<PriorSpec> {
    match args.prior {
        PriorKind::Linear => Ok(PriorSpec::Linear {
            nbar: args.nbar,
            first_column: None,
        }),
        PriorKind::Custom => {
            let path = args
                .custom_prior
                .as_ref()
                .ok_or_else(|| Error::invalid("--prior custom requires --custom-prior FILE"))?;
            Ok(PriorSpec::Custom(io::read_matrix(path)?))
        }
        PriorKind::Bc => {
            let deltas_path = args
                .target_deltas
                .as_ref()
                .ok_or_else(|| Error::invalid("--prior bc requires --target-deltas FILE"))?;
            let strikes = args
                .tranches
                .as_ref()
                .ok_or_else(|| Error::invalid("--prior bc requires --tranches"))?;
            let spreads = args
                .tranche_spreads
                .as_ref()
                .ok_or_else(|| Error::invalid("--prior bc requires --tranche-spreads"))?;
            let tranches = tranche_spec(strikes, spreads)?;
            let target_deltas = io::read_matrix(deltas_path)?;
            Ok(PriorSpec::BaseCorrelation {
                tranches,
                target_deltas,
                discount: DiscountSpec::new(args.rate)?,
            })
        }
    }
}

fn tranche_spec(strikes: &str, spreads: &str) -> Result<TrancheSpec> {
    let mut ks = vec![0.0];
    ks.extend(parse_list(strikes, "tranche strike")?);
    let sp = parse_list(spreads, "tranche spread")?;
    TrancheSpec::new(ks, sp)
}

fn cmd_calibrate(args: CalibrateArgs, started: Instant) -> Result<()> {
    ensure_out_dir(&args.out)?;
    let snapshot = io::read_snapshot(&args.snapshot)?;
    let snapshot_digest = io::file_digest(&args.snapshot)?;

    let (tails, tails_provenance): (TailCurve, String) = match (&args.tails, args.top_a) {
        (Some(path), None) => {
            let t = io::read_tail_curve(path)?;
            let digest = io::file_digest(path)?;
            (t, format!("tails sha256: {digest}"))
        }
        (None, Some(a)) => {
            let top = BirthProcessTop::new(a, args.top_b, snapshot.n_names())?;
            let t = top.tail_curve(snapshot.grid())?;
            (
                t,
                format!("tails: synthesized birth process a={a} b={}", args.top_b),
            )
        }
        (Some(_), Some(_)) => {
            return Err(Error::invalid("--tails and --top-a are mutually exclusive"))
        }
        (None, None) => return Err(Error::invalid("need --tails FILE or --top-a A")),
    };

    if tails.n_names() != snapshot.n_names() {
        return Err(Error::invalid(format!(
            "tail curve is for {} names, snapshot has {}",
            tails.n_names(),
            snapshot.n_names()
        )));
    }

    let gaps = consistency_gaps(&snapshot, &tails);
    let mut adjust_note = String::new();
    let snapshot = if args.adjust {
        let (adjusted, factors) = enforce_consistency(&snapshot, &tails)?;
        for (m, f) in factors.iter().enumerate() {
            let _ = writeln!(adjust_note, "  interval {}: scale factor {:.12}", m + 1, f);
        }
        adjusted
    } else {
        let worst = gaps.iter().cloned().fold(0.0f64, f64::max);
        if worst > 1e-10 {
            let detail: Vec<String> = gaps
                .iter()
                .enumerate()
                .map(|(m, g)| format!("interval {}: gap {:.3e}", m + 1, g))
                .collect();
            return Err(Error::infeasible(format!(
                "expected default counts disagree between tails and single names ({}); rerun with --adjust",
                detail.join(", ")
            )));
        }
        snapshot
    };

    let prior_spec = build_prior_spec(&args)?;
    let settings = CalibrationSettings {
        max_sweeps: args.max_sweeps,
        row_tolerance: args.tolerance,
        report_kl: args.kl,
    };
    let (set, report) = calibrate_all(&snapshot, &tails, &prior_spec, &settings)?;
    io::write_tdmatrix_set(&args.out.join("td_matrices.txt"), &set)?;

    let text = render_calibration_report(
        &snapshot_digest,
        &tails_provenance,
        &args,
        &gaps,
        &adjust_note,
        &report,
        &set,
        &snapshot,
    );
    fs::write(args.out.join("calibration_report.txt"), text)?;
    write_run_metadata(&args.out, "calibrate", started)?;
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn render_calibration_report(
    snapshot_digest: &str,
    tails_provenance: &str,
    args: &CalibrateArgs,
    gaps: &[f64],
    adjust_note: &str,
    report: &CalibrationReport,
    set: &TdMatrixSet,
    snapshot: &PortfolioSnapshot,
) -> String {
    let mut out = String::from("# randthin calibration report\n");
    let _ = writeln!(out, "snapshot sha256: {snapshot_digest}");
    let _ = writeln!(out, "{tails_provenance}");
    let prior = match args.prior {
        PriorKind::Linear => "linear",
        PriorKind::Bc => "bc",
        PriorKind::Custom => "custom",
    };
    let _ = writeln!(
        out,
        "settings: prior={prior} max_sweeps={} tolerance={:.1e}",
        args.max_sweeps, args.tolerance
    );
    out.push_str("consistency gaps before adjustment:\n");
    for (m, g) in gaps.iter().enumerate() {
        let _ = writeln!(out, "  interval {}: {:.6e}", m + 1, g);
    }
    if !adjust_note.is_empty() {
        out.push_str("adjustment applied:\n");
        out.push_str(adjust_note);
    }
    out.push_str("iterative scaling:\n");
    for r in &report.intervals {
        let _ = write!(
            out,
            "  interval {}: sweeps={} row_residual={:.6e}",
            r.interval, r.sweeps, r.row_residual
        );
        if let Some(kl) = r.kl_from_prior {
            let _ = write!(out, " kl_from_prior={kl:.6e}");
        }
        out.push('\n');
    }
    let _ = writeln!(out, "max tail residual: {:.6e}", set.max_tail_residual());
    let mut worst_q: f64 = 0.0;
    for i in 0..snapshot.n_names() {
        for m in 1..=set.n_intervals() {
            let diff = (set.implied_cum_q(i, m) - snapshot.cum_default_prob(i, m)).abs();
            worst_q = worst_q.max(diff);
        }
    }
    let _ = writeln!(out, "max single-name cumulative residual: {worst_q:.6e}");
    if !report.warnings.is_empty() {
        out.push_str("warnings:\n");
        for w in &report.warnings {
            let _ = writeln!(out, "  {w}");
        }
    }
    out
}

fn cmd_deltas(args: DeltasArgs, started: Instant) -> Result<()> {
    ensure_out_dir(&args.out)?;
    let set = io::read_tdmatrix_set(&args.matrices)?;
    let snapshot = io::read_snapshot(&args.snapshot)?;
    let tranches = tranche_spec(&args.tranches, &args.tranche_spreads)?;
    let discount = DiscountSpec::new(args.rate)?;
    let method = match args.method {
        MethodKind::Plain => DeltaMethod::Plain,
        MethodKind::Refined => DeltaMethod::Refined,
    };
    let report = single_name_deltas(&set, &snapshot, &tranches, &discount, method, args.interval)?;

    let mut out = String::from("# randthin delta report\n");
    let _ = writeln!(out, "matrices sha256: {}", io::file_digest(&args.matrices)?);
    let _ = writeln!(out, "snapshot sha256: {}", io::file_digest(&args.snapshot)?);
    let _ = writeln!(
        out,
        "method: {} interval: {}",
        match method {
            DeltaMethod::Plain => "plain",
            DeltaMethod::Refined => "refined",
        },
        args.interval
    );
    out.push_str("tranche:");
    for k in 1..=tranches.n_tranches() {
        let _ = write!(
            out,
            " {:.4}-{:.4}",
            tranches.strikes()[k - 1],
            tranches.strikes()[k]
        );
    }
    out.push('\n');
    for (i, name) in set.names().iter().enumerate() {
        let _ = write!(out, "{name}");
        for k in 0..tranches.n_tranches() {
            match report.single_name[i][k] {
                Some(d) => {
                    let _ = write!(out, " {d:.10e}");
                }
                None => out.push_str(" NA"),
            }
        }
        out.push('\n');
    }
    out.push_str("index:");
    for d in &report.index {
        let _ = write!(out, " {d:.10e}");
    }
    out.push('\n');
    out.push_str("index_bottom_up:");
    for d in &report.index_bottom_up {
        let _ = write!(out, " {d:.10e}");
    }
    out.push('\n');

    // Sum-rule checks (exact identities for the plain method).
    let n = set.n_names();
    let mut worst_name: f64 = 0.0;
    let mut checked = 0usize;
    for i in 0..n {
        if report.single_name[i].iter().all(Option::is_some) {
            let s: f64 = (1..=tranches.n_tranches())
                .map(|k| tranches.width(k) * report.single_name[i][k - 1].unwrap())
                .sum();
            worst_name = worst_name.max((s - 1.0 / n as f64).abs());
            checked += 1;
        }
    }
    let idx_sum: f64 = (1..=tranches.n_tranches())
        .map(|k| tranches.width(k) * report.index[k - 1])
        .sum();
    let _ = writeln!(
        out,
        "check single-name sum rule: {checked}/{n} names, max |width-weighted sum - 1/N| = {worst_name:.3e}"
    );
    let _ = writeln!(
        out,
        "check index sum rule: |width-weighted sum - 1| = {:.3e}",
        (idx_sum - 1.0).abs()
    );
    fs::write(args.out.join("deltas_report.txt"), &out)?;
    write_run_metadata(&args.out, "deltas", started)?;

    if method == DeltaMethod::Plain && (worst_name > 1e-8 || (idx_sum - 1.0).abs() > 1e-8) {
        return Err(Error::numerical(format!(
            "delta sum rules violated: names {worst_name:.3e}, index {:.3e}",
            (idx_sum - 1.0).abs()
        )));
    }
    Ok(())
}

fn cmd_simulate(args: SimulateArgs, started: Instant) -> Result<()> {
    ensure_out_dir(&args.out)?;
    let set = io::read_tdmatrix_set(&args.matrices)?;
    let n = set.n_names();
    let top = BirthProcessTop::new(args.top_a, args.top_b, n)?;
    let horizon = args.horizon.unwrap_or_else(|| set.grid().horizon());

    let info = if args.no_info {
        None
    } else {
        let sigma = match (&args.cov, args.vol) {
            (Some(path), None) => io::read_matrix(path)?,
            (None, Some(v)) => {
                let params = InfoProcessParams::from_vols_and_correlation(
                    &vec![v; n],
                    args.corr,
                    args.dt,
                    args.trunc_rank,
                )?;
                return run_simulation_with(&args, &set, &top, horizon, Some(params), started);
            }
            (Some(_), Some(_)) => {
                return Err(Error::invalid("--cov and --vol are mutually exclusive"))
            }
            (None, None) => {
                return Err(Error::invalid(
                    "information updating needs --vol or --cov (or pass --no-info)",
                ))
            }
        };
        Some(InfoProcessParams::new(sigma, args.dt, args.trunc_rank)?)
    };
    run_simulation_with(&args, &set, &top, horizon, info, started)
}

fn run_simulation_with(
    args: &SimulateArgs,
    set: &TdMatrixSet,
    top: &BirthProcessTop,
    horizon: f64,
    info: Option<InfoProcessParams>,
    started: Instant,
) -> Result<()> {
    let with_info = info.is_some();
    let cfg = SimulationConfig {
        horizon,
        n_paths: args.paths,
        seed: args.seed,
        info,
        identity_sampling: if args.static_identities {
            IdentitySampling::Static
        } else {
            IdentitySampling::Filtered
        },
        record_paths: args.log_paths.min(args.paths),
    };
    let out = randthin::dynamics::run_simulation(set, top, &cfg)?;

    let mut report = String::from("# randthin simulation report\n");
    let _ = writeln!(
        report,
        "matrices sha256: {}",
        io::file_digest(&args.matrices)?
    );
    let _ = writeln!(
        report,
        "top model: a={} b={}; horizon={horizon} paths={} seed={} dt={} info={with_info}",
        args.top_a, args.top_b, args.paths, args.seed, args.dt
    );
    report.push_str("default count distribution at horizon:\n");
    for (k, c) in out.stats.default_count_distribution.iter().enumerate() {
        if *c > 0 {
            let _ = writeln!(report, "  {k}: {c}");
        }
    }
    report.push_str("per-name empirical cumulative default probabilities:\n");
    report.push_str("name");
    for m in 1..=set.n_intervals() {
        let _ = write!(report, " T{m}");
    }
    report.push('\n');
    for (i, name) in set.names().iter().enumerate() {
        let _ = write!(report, "{name}");
        for m in 1..=set.n_intervals() {
            let _ = write!(report, " {:.6e}", out.stats.empirical_q(i, m));
        }
        report.push('\n');
    }
    fs::write(args.out.join("simulation_report.txt"), report)?;

    let mut log = String::new();
    for rec in &out.records {
        for ev in &rec.events {
            let entry = serde_json::json!({
                "path": ev.path,
                "order": ev.order,
                "time": ev.time,
                "name": set.names()[ev.name_index],
                "interval": ev.interval,
            });
            let _ = writeln!(log, "{entry}");
        }
    }
    fs::write(args.out.join("events.jsonl"), log)?;
    write_run_metadata(&args.out, "simulate", started)?;
    Ok(())
}

fn cmd_mark(args: MarkArgs, started: Instant) -> Result<()> {
    ensure_out_dir(&args.out)?;
    let cov = io::read_matrix(&args.cov)?;
    let pi = io::read_vector(&args.pi)?;
    let n = pi.len();
    if cov.nrows() != n || cov.ncols() != n {
        return Err(Error::invalid(format!(
            "covariance is {}x{}, pi has {n} entries",
            cov.nrows(),
            cov.ncols()
        )));
    }
    let problem = marking::MarkingProblem::new(cov.clone(), args.sigma_y, pi.clone())?;
    let target = marking::build_target(&problem);
    let result = marking::alternating_projections(&target, &pi, args.max_iter, args.tol)?;
    io::write_matrix(&args.out.join("marked_matrix.txt"), &result.r_matrix)?;

    let mut report = String::from("# randthin marking report\n");
    let _ = writeln!(report, "covariance sha256: {}", io::file_digest(&args.cov)?);
    let _ = writeln!(report, "pi sha256: {}", io::file_digest(&args.pi)?);
    let _ = writeln!(
        report,
        "sigma_y: {} max_iter: {} tol: {:.1e}",
        args.sigma_y, args.max_iter, args.tol
    );
    let _ = writeln!(report, "iterations: {}", result.iterations);
    let _ = writeln!(report, "converged: {}", result.converged);
    let _ = writeln!(
        report,
        "orthogonality residual |R pi|: {:.6e}",
        result.orth_residual
    );
    let _ = writeln!(report, "min eigenvalue: {:.6e}", result.min_eigenvalue);
    let _ = writeln!(report, "frobenius gap |R - C|: {:.6e}", result.frobenius_gap);
    if let Some(gap) = result.candidate_gap {
        let _ = writeln!(
            report,
            "frobenius gap of single-shot candidate: {gap:.6e} (comparison only)"
        );
    }
    match marking::implied_parameters(&result.r_matrix) {
        Ok((vols, corr)) => {
            let mean_vol: f64 = vols.iter().sum::<f64>() / n as f64;
            let _ = writeln!(report, "implied mean brownian vol: {mean_vol:.6}");
            let _ = writeln!(
                report,
                "implied mean correlation: {:.6}",
                marking::mean_offdiagonal_correlation(&corr)
            );
        }
        Err(e) => {
            let _ = writeln!(report, "implied parameters unavailable: {e}");
        }
    }

    if args.verify {
        let paths = args
            .paths
            .ok_or_else(|| Error::invalid("--verify requires --paths"))?;
        let seed = args
            .seed
            .ok_or_else(|| Error::invalid("--verify requires --seed"))?;
        let cfg = FilterPathsConfig {
            horizon: args.horizon,
            n_paths: paths,
            seed,
            collapse_threshold: 0.99,
            collapse_horizon: args.horizon,
        };
        let rank = args
            .trunc_rank
            .unwrap_or(marking::DEFAULT_TRUNC_RANK.min(n));
        let verification =
            marking::verify_marking(&result.r_matrix, &pi, args.dt, Some(rank), &cfg)?;
        report.push_str("verification (pure filtering, no defaults):\n");
        let _ = writeln!(
            report,
            "  input mean vol {:.4} -> output {:.4} +/- {:.4}",
            verification.input_mean_vol,
            verification.stats.mean_vol,
            verification.stats.se_mean_vol
        );
        let _ = writeln!(
            report,
            "  input mean corr {:.4} -> output {:.4} +/- {:.4}",
            verification.input_mean_corr,
            verification.stats.mean_corr,
            verification.stats.se_mean_corr
        );
        let _ = writeln!(
            report,
            "  paths used {}/{}; collapse fraction {:.4}",
            verification.stats.paths_used,
            verification.stats.n_paths,
            verification.stats.collapse_fraction
        );
    }
    fs::write(args.out.join("marking_report.txt"), report)?;
    write_run_metadata(&args.out, "mark", started)?;
    Ok(())
}
