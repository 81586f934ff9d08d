//! Command-line front end: `solve`, `tau-sweep`, `verify` and `reference`.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::analysis::{
    eigenvector_error, extract_eigenvalues, fit_exponential_rate, reference_subspace_iteration, EigenReport,
    RateFit, DEFAULT_WINDOW_FRACTION,
};
use crate::blockvec::BlockState;
use crate::config::{ReferenceChoice, RunConfig, DEFAULT_REFERENCE_MAX_ITER, DEFAULT_REFERENCE_TOL};
use crate::discretize::{assemble, Discretization};
use crate::error::{Error, Result};
use crate::greens::InverseOperator;
use crate::scheme::{init_state, run, run_observed, InitMode, RunHistory, StepBounds, StepDiagnostics, Termination};
use crate::state_io;
use crate::verify;

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_MAX_STEPS: i32 = 2;
pub const EXIT_DIVERGED: i32 = 3;
pub const EXIT_VERIFY_FAILED: i32 = 4;
pub const EXIT_REFERENCE_FAILED: i32 = 5;

pub const CSV_HEADER: &str = "step,energy,orth_error,grad_norm_l2,grad_norm_a,err_u,lambda_min_gram,green_solves";
const LAMBDA1_TOL: f64 = 1e-10;
/// Allowed spread of err_i across time steps in a sweep.
pub const SWEEP_SPREAD: f64 = 10.0;

#[derive(Parser, Debug)]
#[command(name = "qseig", version, about = "Orthogonalization-free block eigensolver")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Run the scheme and write history, report and final state.
    Solve(CommonArgs),
    /// Run the scheme for several time steps from the same initial block.
    TauSweep(CommonArgs),
    /// Check the scheme and operator invariants on the configured problem.
    Verify(CommonArgs),
    /// Compute reference eigenpairs by inverse subspace iteration.
    Reference(CommonArgs),
}

#[derive(Args, Debug)]
struct CommonArgs {
    #[arg(long)]
    config: PathBuf,
    /// Comma-separated time steps.
    #[arg(long, value_delimiter = ',')]
    tau: Option<Vec<f64>>,
    /// Overrides the initial-state seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Single worker thread.
    #[arg(long)]
    serial: bool,
}

/// Parses `args` (program name first) and runs the command.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    let (name, a) = match &cli.command {
        Command::Solve(a) => ("solve", a),
        Command::TauSweep(a) => ("tau-sweep", a),
        Command::Verify(a) => ("verify", a),
        Command::Reference(a) => ("reference", a),
    };
    configure_threads(a.serial);
    let cfg = match load_config(a) {
        Ok(c) => c,
        Err(e) => return fail(name, &e),
    };
    match &cli.command {
        Command::Solve(a) => cmd_solve(&cfg, a.tau.as_deref()),
        Command::TauSweep(a) => cmd_tau_sweep(&cfg, a.tau.as_deref().unwrap_or(&[])),
        Command::Verify(_) => cmd_verify(&cfg),
        Command::Reference(_) => cmd_reference(&cfg),
    }
}

fn configure_threads(serial: bool) {
    let threads = if serial {
        Some(1)
    } else {
        std::env::var("QSEIG_THREADS").ok().and_then(|v| v.trim().parse::<usize>().ok()).filter(|&n| n > 0)
    };
    if let Some(n) = threads {
        if rayon::ThreadPoolBuilder::new().num_threads(n).build_global().is_err() {
            log::debug!("thread pool already initialized");
        }
    }
}

fn load_config(a: &CommonArgs) -> Result<RunConfig> {
    let mut cfg = RunConfig::load(&a.config)?;
    if let Some(seed) = a.seed {
        if matches!(cfg.scheme.init_mode, InitMode::FromState(_)) {
            return Err(Error::Config("--seed cannot override scheme.init = file".into()));
        }
        cfg.scheme.init_mode = cfg.scheme.init_mode.with_seed(seed);
    }
    Ok(cfg)
}

fn fail(command: &str, e: &Error) -> i32 {
    eprintln!("qseig {command}: {e}");
    EXIT_USAGE
}

fn termination_code(t: Termination) -> i32 {
    match t {
        Termination::ToleranceMet => EXIT_OK,
        Termination::MaxSteps => EXIT_MAX_STEPS,
        Termination::Diverged => EXIT_DIVERGED,
    }
}

/// Assembled operator with a prepared inverse and a lambda_1 estimate.
pub fn prepare(cfg: &RunConfig) -> Result<(Discretization, InverseOperator)> {
    let p = &cfg.problem;
    let mut d = assemble(&p.domain()?, &p.grid(), &p.potential_spec()?, p.c_lap, p.sigma)?;
    let g = InverseOperator::prepare(&d, cfg.solver.resolve(&d))?;
    d.estimate_lambda1(&g, LAMBDA1_TOL)?;
    Ok((d, g))
}

/// Reference eigenvalues as configured, `None` for `reference.kind = none`.
pub fn reference_values(cfg: &RunConfig, d: &Discretization, g: &InverseOperator) -> Result<Option<Vec<f64>>> {
    match &cfg.reference {
        ReferenceChoice::None => Ok(None),
        ReferenceChoice::Oracle { tol, max_iter } => {
            let r = reference_subspace_iteration(d, g, cfg.n_eig, *tol, *max_iter)?;
            Ok(Some(r.report.eigenvalues))
        }
        ReferenceChoice::File { path } => {
            let u = state_io::read_state(path)?;
            if u.rows() != d.ng() || u.cols() < cfg.n_eig {
                return Err(Error::StateFile(format!(
                    "reference block {} is {} x {}, need {} x {}",
                    path.display(),
                    u.rows(),
                    u.cols(),
                    d.ng(),
                    cfg.n_eig
                )));
            }
            let u = u.columns_range(0, cfg.n_eig)?;
            Ok(Some(extract_eigenvalues(d, g, &u)?.0.eigenvalues))
        }
    }
}

#[derive(Debug, Clone)]
pub struct SolveOutcome {
    pub tau: f64,
    pub history: RunHistory,
    pub report: EigenReport,
    /// `||U_n - U_end|| / ||U_end||` per recorded step.
    pub err_u: Option<Vec<f64>>,
    pub rates: Vec<(String, Option<RateFit>)>,
}

/// Runs the scheme from `u0`. With `want_err_u` the run is replayed to
/// measure the distance of every iterate to the final one.
pub fn solve_once(
    cfg: &RunConfig,
    d: &Discretization,
    g: &InverseOperator,
    u0: &BlockState,
    reference: Option<&[f64]>,
    want_err_u: bool,
) -> Result<SolveOutcome> {
    let history = run(d, g, &cfg.scheme, u0.clone())?;
    let err_u = if want_err_u {
        let mut errs = Vec::with_capacity(history.records.len());
        let mut failure = None;
        let end = &history.final_state;
        let replay = run_observed(d, g, &cfg.scheme, u0.clone(), |_, u| match eigenvector_error(u, end, d) {
            Ok(e) => errs.push(e),
            Err(e) => failure = Some(e),
        })?;
        if let Some(e) = failure {
            return Err(e);
        }
        if replay.final_state.as_slice() != end.as_slice() || errs.len() != history.records.len() {
            log::warn!("replay did not reproduce the run; err_u left empty");
            None
        } else {
            Some(errs)
        }
    } else {
        None
    };
    let (mut report, _) = extract_eigenvalues(d, g, &history.final_state)?;
    if let Some(r) = reference {
        report = report.with_reference(r)?;
    }
    let series = |f: fn(&StepDiagnostics) -> f64| -> Vec<f64> {
        std::iter::once(&history.initial).chain(&history.records).map(f).collect()
    };
    let rates = [
        ("grad_norm_a", series(|s| s.grad_norm_a)),
        ("orth_error", series(|s| s.orth_error)),
    ]
    .into_iter()
    .map(|(name, s)| (name.to_string(), fit_exponential_rate(name, &s, DEFAULT_WINDOW_FRACTION).ok()))
    .collect();
    Ok(SolveOutcome {
        tau: cfg.scheme.tau,
        history,
        report,
        err_u,
        rates,
    })
}

fn num(v: f64) -> String {
    format!("{v:.16e}")
}

pub fn render_history_csv(outcome: &SolveOutcome) -> String {
    let mut s = String::from(CSV_HEADER);
    s.push('\n');
    let base = outcome.history.initial.green_solves;
    for (k, r) in outcome.history.records.iter().enumerate() {
        let err = outcome.err_u.as_ref().map(|e| num(e[k])).unwrap_or_else(|| "nan".into());
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{},{}",
            r.step_index,
            num(r.energy),
            num(r.orth_error),
            num(r.grad_norm),
            num(r.grad_norm_a),
            err,
            num(r.lambda_min_gram),
            r.green_solves - base
        );
    }
    s
}

fn render_bounds(s: &mut String, b: &StepBounds, tau: f64) {
    for (name, v) in [
        ("tau_nonexpansion", b.tau_nonexpansion),
        ("tau_quasi_stiefel", b.tau_quasi_stiefel),
        ("tau_contraction", b.tau_contraction),
        ("tau_energy", b.tau_energy),
    ] {
        let mark = if tau >= v { "  # exceeded by tau" } else { "" };
        let _ = writeln!(s, "bounds.{name} = {}{mark}", num(v));
    }
    let _ = writeln!(s, "bounds.c_e = {}", num(b.c_e));
    let _ = writeln!(s, "bounds.lambda1 = {}", num(b.lambda1));
    let _ = writeln!(s, "bounds.energy0 = {}", num(b.energy0));
    let _ = writeln!(s, "bounds.lambda_max0 = {}", num(b.lambda_max0));
}

pub fn render_report(outcome: &SolveOutcome) -> String {
    let h = &outcome.history;
    let last = h.records.last().unwrap_or(&h.initial);
    let mut s = String::new();
    let _ = writeln!(s, "terminated_by = {}", h.terminated_by.as_str());
    let _ = writeln!(s, "steps = {}", h.records.len());
    let _ = writeln!(s, "tau = {:?}", outcome.tau);
    let _ = writeln!(s, "green_solves = {}", last.green_solves - h.initial.green_solves);
    let _ = writeln!(s, "final.energy = {}", num(outcome.report.energy));
    let _ = writeln!(s, "final.grad_norm_l2 = {}", num(last.grad_norm));
    let _ = writeln!(s, "final.grad_norm_a = {}", num(last.grad_norm_a));
    let _ = writeln!(s, "final.orth_error = {}", num(last.orth_error));
    let _ = writeln!(s, "final.lambda_min_gram = {}", num(last.lambda_min_gram));
    if let Some(b) = &h.bounds {
        render_bounds(&mut s, b, outcome.tau);
    }
    for (name, fit) in &outcome.rates {
        match fit {
            Some(f) => {
                let _ = writeln!(s, "rate.{name}.slope_per_step = {}", num(f.slope_per_step));
                let _ = writeln!(s, "rate.{name}.r_squared = {}", num(f.r_squared));
                let _ = writeln!(s, "rate.{name}.window = {}..{}", f.window.0, f.window.1);
            }
            None => {
                let _ = writeln!(s, "rate.{name} = insufficient data");
            }
        }
    }
    s.push('\n');
    s.push_str(&render_eigen_table(&outcome.report));
    s
}

fn render_eigen_table(r: &EigenReport) -> String {
    let mut s = String::from("index,eigenvalue,relative_error,residual\n");
    for (i, v) in r.eigenvalues.iter().enumerate() {
        let err = r.relative_errors.as_ref().map(|e| num(e[i])).unwrap_or_else(|| "nan".into());
        let _ = writeln!(s, "{},{},{},{}", i + 1, num(*v), err, num(r.residual_norms[i]));
    }
    s
}

/// Output path and contents.
pub type OutputFiles = Vec<(PathBuf, Vec<u8>)>;

/// Writes every file or none: all contents go to temporaries first.
pub fn write_outputs(files: &[(PathBuf, Vec<u8>)]) -> Result<()> {
    let mut staged: Vec<(PathBuf, &Path)> = Vec::new();
    let cleanup = |staged: &[(PathBuf, &Path)]| {
        for (tmp, _) in staged {
            let _ = fs::remove_file(tmp);
        }
    };
    for (path, bytes) in files {
        let name = path
            .file_name()
            .ok_or_else(|| Error::Config(format!("not a file path: {}", path.display())))?;
        let mut tmp_name = OsString::from(".");
        tmp_name.push(name);
        tmp_name.push(format!(".tmp{}", std::process::id()));
        let tmp = path.with_file_name(tmp_name);
        if let Err(e) = fs::write(&tmp, bytes) {
            cleanup(&staged);
            let _ = fs::remove_file(&tmp);
            return Err(e.into());
        }
        staged.push((tmp, path));
    }
    for (k, (tmp, path)) in staged.iter().enumerate() {
        if let Err(e) = fs::rename(tmp, path) {
            cleanup(&staged[k..]);
            return Err(e.into());
        }
    }
    Ok(())
}

fn solve_inner(cfg: &RunConfig) -> Result<(SolveOutcome, OutputFiles)> {
    let (d, g) = prepare(cfg)?;
    let reference = reference_values(cfg, &d, &g)?;
    let u0 = init_state(&d, cfg.n_eig, &cfg.scheme.init_mode)?;
    let outcome = solve_once(cfg, &d, &g, &u0, reference.as_deref(), cfg.outputs.history_csv.is_some())?;
    let mut files = Vec::new();
    if let Some(p) = &cfg.outputs.history_csv {
        files.push((p.clone(), render_history_csv(&outcome).into_bytes()));
    }
    if let Some(p) = &cfg.outputs.report {
        files.push((p.clone(), render_report(&outcome).into_bytes()));
    }
    if let Some(p) = &cfg.outputs.state {
        files.push((p.clone(), state_io::encode(&outcome.history.final_state)));
    }
    Ok((outcome, files))
}

pub fn cmd_solve(cfg: &RunConfig, tau: Option<&[f64]>) -> i32 {
    let mut cfg = cfg.clone();
    match tau {
        None => {}
        Some([t]) => cfg.scheme.tau = *t,
        Some(_) => {
            eprintln!("qseig solve: --tau takes a single value (use tau-sweep for several)");
            return EXIT_USAGE;
        }
    }
    if let Err(e) = cfg.scheme.validate() {
        return fail("solve", &e);
    }
    let (outcome, files) = match solve_inner(&cfg) {
        Ok(r) => r,
        Err(e) => return fail("solve", &e),
    };
    if let Err(e) = write_outputs(&files) {
        return fail("solve", &e);
    }
    if cfg.outputs.emit_summary {
        print!("{}", render_report(&outcome));
    }
    termination_code(outcome.history.terminated_by)
}

fn tau_suffixed(path: &Path, tau: f64, k: usize) -> PathBuf {
    let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    let ext = path.extension().map(|e| format!(".{}", e.to_string_lossy())).unwrap_or_default();
    path.with_file_name(format!("{stem}_{k}_tau{tau:?}{ext}"))
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepSummary {
    /// Per index: passes when `max_tau err_i <= SWEEP_SPREAD * min_tau err_i`.
    pub spread_ok: Vec<bool>,
    /// Step counts strictly decrease over the distinct time steps.
    pub steps_decrease: bool,
}

pub fn summarize_sweep(outcomes: &[SolveOutcome]) -> SweepSummary {
    let n = outcomes.first().map_or(0, |o| o.report.eigenvalues.len());
    let spread_ok = (0..n)
        .map(|i| {
            let errs: Vec<f64> = outcomes
                .iter()
                .map(|o| o.report.relative_errors.as_ref().map_or(f64::NAN, |e| e[i]))
                .collect();
            let max = errs.iter().cloned().fold(f64::MIN, f64::max);
            let min = errs.iter().cloned().fold(f64::MAX, f64::min);
            max <= SWEEP_SPREAD * min
        })
        .collect();
    let mut by_tau: Vec<(f64, usize)> = outcomes.iter().map(|o| (o.tau, o.history.records.len())).collect();
    by_tau.sort_by(|a, b| a.0.total_cmp(&b.0));
    by_tau.dedup_by(|a, b| a.0 == b.0);
    let steps_decrease = by_tau.windows(2).all(|w| w[1].1 < w[0].1);
    SweepSummary {
        spread_ok,
        steps_decrease,
    }
}

pub fn render_sweep_csv(outcomes: &[SolveOutcome]) -> String {
    let mut s = String::from("index");
    for o in outcomes {
        let _ = write!(s, ",tau={:?}", o.tau);
    }
    s.push('\n');
    let n = outcomes.first().map_or(0, |o| o.report.eigenvalues.len());
    for i in 0..n {
        let _ = write!(s, "{}", i + 1);
        for o in outcomes {
            let e = o.report.relative_errors.as_ref().map_or(f64::NAN, |e| e[i]);
            let _ = write!(s, ",{}", num(e));
        }
        s.push('\n');
    }
    s.push_str("steps");
    for o in outcomes {
        let _ = write!(s, ",{}", o.history.records.len());
    }
    s.push_str("\nterminated_by");
    for o in outcomes {
        let _ = write!(s, ",{}", o.history.terminated_by.as_str());
    }
    s.push('\n');
    s
}

pub fn cmd_tau_sweep(cfg: &RunConfig, taus: &[f64]) -> i32 {
    if taus.len() < 2 {
        eprintln!("qseig tau-sweep: --tau needs at least two comma-separated values");
        return EXIT_USAGE;
    }
    if matches!(cfg.reference, ReferenceChoice::None) {
        eprintln!("qseig tau-sweep: needs reference.kind = oracle or file to compare errors");
        return EXIT_USAGE;
    }
    let mut sub = cfg.clone();
    for &t in taus {
        sub.scheme.tau = t;
        if let Err(e) = sub.scheme.validate() {
            return fail("tau-sweep", &e);
        }
    }
    let result = (|| -> Result<(Vec<SolveOutcome>, OutputFiles)> {
        let (d, g) = prepare(cfg)?;
        let reference = reference_values(cfg, &d, &g)?;
        let u0 = init_state(&d, cfg.n_eig, &cfg.scheme.init_mode)?;
        let mut outcomes = Vec::new();
        let mut files = Vec::new();
        for (k, &t) in taus.iter().enumerate() {
            sub.scheme.tau = t;
            let o = solve_once(&sub, &d, &g, &u0, reference.as_deref(), cfg.outputs.history_csv.is_some())?;
            log::info!("tau = {t}: {} after {} steps", o.history.terminated_by.as_str(), o.history.records.len());
            if let Some(p) = &cfg.outputs.history_csv {
                files.push((tau_suffixed(p, t, k + 1), render_history_csv(&o).into_bytes()));
            }
            outcomes.push(o);
        }
        if let Some(p) = &cfg.outputs.sweep_csv {
            files.push((p.clone(), render_sweep_csv(&outcomes).into_bytes()));
        }
        Ok((outcomes, files))
    })();
    let (outcomes, files) = match result {
        Ok(r) => r,
        Err(e) => return fail("tau-sweep", &e),
    };
    if let Err(e) = write_outputs(&files) {
        return fail("tau-sweep", &e);
    }
    let summary = summarize_sweep(&outcomes);
    if cfg.outputs.emit_summary {
        print!("{}", render_sweep_csv(&outcomes));
        for (i, ok) in summary.spread_ok.iter().enumerate() {
            println!("index {}: spread within {SWEEP_SPREAD}x: {}", i + 1, if *ok { "pass" } else { "FAIL" });
        }
        println!(
            "step counts strictly decrease with tau: {}",
            if summary.steps_decrease { "pass" } else { "FAIL" }
        );
    }
    if let Some(code) = outcomes
        .iter()
        .map(|o| termination_code(o.history.terminated_by))
        .find(|&c| c != EXIT_OK)
    {
        return code;
    }
    if summary.spread_ok.iter().all(|&b| b) && summary.steps_decrease {
        EXIT_OK
    } else {
        EXIT_VERIFY_FAILED
    }
}

fn init_seed(cfg: &RunConfig) -> u64 {
    match cfg.scheme.init_mode {
        InitMode::RawRandom { seed } | InitMode::QuasiStiefelScaled { seed } | InitMode::Orthonormal { seed } => seed,
        InitMode::FromState(_) => 42,
    }
}

pub fn cmd_verify(cfg: &RunConfig) -> i32 {
    let checks = match prepare(cfg)
        .and_then(|(d, g)| verify::run_checks(&cfg.problem, &d, &g, cfg.n_eig, init_seed(cfg)))
    {
        Ok(c) => c,
        Err(e) => return fail("verify", &e),
    };
    println!("{:<6} {:<38} {:>12} {:>12} {:>12}  detail", "result", "check", "measured", "limit", "slack");
    for c in &checks {
        println!(
            "{:<6} {:<38} {:>12.4e} {:>12.4e} {:>12.4e}  {}",
            if c.passed() { "pass" } else { "FAIL" },
            c.name,
            c.measured,
            c.limit,
            c.slack(),
            c.note
        );
    }
    let failed: Vec<&verify::Check> = checks.iter().filter(|c| !c.passed()).collect();
    if failed.is_empty() {
        EXIT_OK
    } else {
        for c in failed {
            eprintln!("qseig verify: {} failed, measured {:e} exceeds {:e}", c.name, c.measured, c.limit);
        }
        EXIT_VERIFY_FAILED
    }
}

pub fn render_reference(values: &[f64], residuals: &[f64]) -> String {
    let mut s = String::from("index,eigenvalue,residual\n");
    for (i, (v, r)) in values.iter().zip(residuals).enumerate() {
        let _ = writeln!(s, "{},{},{}", i + 1, num(*v), num(*r));
    }
    s
}

pub fn cmd_reference(cfg: &RunConfig) -> i32 {
    let (tol, max_iter) = match cfg.reference {
        ReferenceChoice::Oracle { tol, max_iter } => (tol, max_iter),
        _ => (DEFAULT_REFERENCE_TOL, DEFAULT_REFERENCE_MAX_ITER),
    };
    let solution = match prepare(cfg).and_then(|(d, g)| reference_subspace_iteration(&d, &g, cfg.n_eig, tol, max_iter)) {
        Ok(s) => s,
        Err(e @ Error::NoConvergence { .. }) => {
            eprintln!("qseig reference: {e}");
            return EXIT_REFERENCE_FAILED;
        }
        Err(e) => return fail("reference", &e),
    };
    let listing = render_reference(&solution.report.eigenvalues, &solution.report.residual_norms);
    let mut files = Vec::new();
    if let Some(p) = &cfg.outputs.report {
        files.push((p.clone(), listing.clone().into_bytes()));
    }
    if let Some(p) = &cfg.outputs.state {
        files.push((p.clone(), state_io::encode(&solution.vectors)));
    }
    if let Err(e) = write_outputs(&files) {
        return fail("reference", &e);
    }
    if cfg.outputs.emit_summary {
        print!("{listing}");
        println!("sweeps = {}", solution.sweeps);
    }
    EXIT_OK
}
