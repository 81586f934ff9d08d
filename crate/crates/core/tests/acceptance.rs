//! Acceptance criteria, one test each. Every test prints a single
//! `[PASS]`/`[FAIL]` line (or `[INFO]` for the informational run) with the
//! measured values, then asserts the criterion at its stated tolerance.

use std::io::Write;
use std::path::Path;
use std::sync::{Once, OnceLock};
use std::time::{Duration, Instant};

use qseig::analysis::{
    closed_form_solution, energy, fit_exponential_rate, reference_subspace_iteration, rk4_integrate, DenseSpectrum,
    DEFAULT_WINDOW_FRACTION,
};
use qseig::blockvec::{gram_l2, subspace_distance_a, GramMatrix};
use qseig::cli::{prepare, solve_once, SolveOutcome};
use qseig::config::RunConfig;
use qseig::discretize::{assemble, Discretization, DomainSpec, GridSpec, PotentialSpec};
use qseig::greens::{InverseOperator, Method};
use qseig::scheme::{compute_step_bounds, init_state, run, InitMode, RunHistory, Termination};

/// Step budget per scheme run; a converging desk run needs far fewer
/// than this many steps to stay inside the one-minute target.
const STEP_BUDGET: usize = 3000;
const SWEEP_TAUS: [f64; 4] = [0.01, 0.1, 0.5, 1.0];
const DESK_PATTERN: [f64; 8] = [1.0, 2.0, 2.0, 3.0, 3.0, 3.0, 4.0, 4.0];

fn single_thread() {
    static INIT: Once = Once::new();
    INIT.call_once(|| {
        let _ = rayon::ThreadPoolBuilder::new().num_threads(1).build_global();
    });
}

fn report(passed: bool, name: &str, detail: String) {
    let tag = if passed { "PASS" } else { "FAIL" };
    let mut out = std::io::stdout().lock();
    let _ = writeln!(out, "[{tag}] {name}: {detail}");
}

fn desk_config(points: usize, tau: f64) -> RunConfig {
    let text = format!(
        "problem.potential = harmonic\nproblem.lower = -5.5\nproblem.upper = 5.5\nproblem.points = {points}\n\
         problem.c_lap = 0.5\nproblem.sigma = 0\nn_eig = 8\nscheme.tau = {tau:?}\nscheme.eps = 1e-5\n\
         scheme.max_steps = {STEP_BUDGET}\nscheme.init = quasi_stiefel\nscheme.seed = 42\nsolver.method = direct\n\
         reference.kind = oracle\nreference.tol = 1e-10\n"
    );
    RunConfig::parse(&text, Path::new("")).unwrap()
}

struct Problem {
    cfg: RunConfig,
    d: Discretization,
    g: InverseOperator,
    reference: Vec<f64>,
    prepare_time: Duration,
}

fn build_problem(points: usize) -> Problem {
    single_thread();
    let cfg = desk_config(points, 0.1);
    let start = Instant::now();
    let (d, g) = prepare(&cfg).unwrap();
    let prepare_time = start.elapsed();
    let reference = reference_subspace_iteration(&d, &g, 8, 1e-10, 20_000).unwrap().report.eigenvalues;
    Problem {
        cfg,
        d,
        g,
        reference,
        prepare_time,
    }
}

fn desk() -> &'static Problem {
    static P: OnceLock<Problem> = OnceLock::new();
    P.get_or_init(|| build_problem(79))
}

fn coarse() -> &'static Problem {
    static P: OnceLock<Problem> = OnceLock::new();
    P.get_or_init(|| build_problem(40))
}

fn solve(p: &Problem, tau: f64) -> (SolveOutcome, Duration) {
    let mut cfg = p.cfg.clone();
    cfg.scheme.tau = tau;
    let start = Instant::now();
    let u0 = init_state(&p.d, cfg.n_eig, &cfg.scheme.init_mode).unwrap();
    let o = solve_once(&cfg, &p.d, &p.g, &u0, Some(&p.reference), false).unwrap();
    (o, start.elapsed() + p.prepare_time)
}

/// The desk run: 79 x 79, N = 8, tau = 0.1, seed 42.
fn desk_run() -> &'static (SolveOutcome, Duration) {
    static R: OnceLock<(SolveOutcome, Duration)> = OnceLock::new();
    R.get_or_init(|| solve(desk(), 0.1))
}

fn sweep(p: &'static Problem, reuse_desk: bool) -> Vec<SolveOutcome> {
    SWEEP_TAUS
        .iter()
        .map(|&t| {
            if reuse_desk && t == 0.1 {
                desk_run().0.clone()
            } else {
                solve(p, t).0
            }
        })
        .collect()
}

fn desk_sweep() -> &'static Vec<SolveOutcome> {
    static R: OnceLock<Vec<SolveOutcome>> = OnceLock::new();
    R.get_or_init(|| sweep(desk(), true))
}

fn coarse_sweep() -> &'static Vec<SolveOutcome> {
    static R: OnceLock<Vec<SolveOutcome>> = OnceLock::new();
    R.get_or_init(|| sweep(coarse(), false))
}

const ENERGY_STEPS: usize = 200;

/// Desk start with tau at half the energy-decay bound.
fn energy_run() -> &'static (RunHistory, f64) {
    static R: OnceLock<(RunHistory, f64)> = OnceLock::new();
    R.get_or_init(|| {
        let p = desk();
        let u0 = init_state(&p.d, 8, &InitMode::QuasiStiefelScaled { seed: 42 }).unwrap();
        let tau = 0.5 * compute_step_bounds(&p.d, &u0).unwrap().tau_energy;
        let mut cfg = p.cfg.scheme.clone();
        cfg.tau = tau;
        cfg.max_steps = ENERGY_STEPS;
        cfg.eps = 1e-300;
        (run(&p.d, &p.g, &cfg, u0).unwrap(), tau)
    })
}

fn fmt_list(xs: &[f64]) -> String {
    xs.iter().map(|x| format!("{x:.3e}")).collect::<Vec<_>>().join(", ")
}

#[test]
fn desk_harmonic_reproduction() {
    let (o, elapsed) = desk_run();
    let errs = o.report.relative_errors.clone().unwrap();
    let converged = o.history.terminated_by == Termination::ToleranceMet;
    let errs_ok = errs.iter().all(|&e| e <= 1e-8);
    let pattern_gap = o
        .report
        .eigenvalues
        .iter()
        .zip(DESK_PATTERN)
        .map(|(v, w)| (v - w).abs())
        .fold(0.0, f64::max);
    let fast = elapsed.as_secs_f64() < 60.0;
    let passed = converged && errs_ok && pattern_gap <= 0.05 && fast;
    let last = o.history.records.last().unwrap();
    report(
        passed,
        "desk harmonic reproduction",
        format!(
            "{} after {} steps (final grad norm {:.3e}, eps 1e-5); max err_i {:.3e} (limit 1e-8) [{}]; \
             max |lambda_i - pattern| {:.3e} (limit 0.05); {:.1} s (limit 60 s)",
            o.history.terminated_by.as_str(),
            o.history.records.len(),
            last.grad_norm,
            errs.iter().cloned().fold(0.0, f64::max),
            fmt_list(&errs),
            pattern_gap,
            elapsed.as_secs_f64()
        ),
    );
    assert!(passed);
}

fn check_sweep(name: &str, runs: &[SolveOutcome]) -> (bool, String) {
    let all_converged = runs.iter().all(|o| o.history.terminated_by == Termination::ToleranceMet);
    let n = runs[0].report.eigenvalues.len();
    let mut worst_ratio: f64 = 0.0;
    for i in 0..n {
        let e: Vec<f64> = runs.iter().map(|o| o.report.relative_errors.as_ref().unwrap()[i]).collect();
        let max = e.iter().cloned().fold(f64::MIN, f64::max);
        let min = e.iter().cloned().fold(f64::MAX, f64::min);
        worst_ratio = worst_ratio.max(if min > 0.0 { max / min } else { f64::INFINITY });
    }
    let steps: Vec<usize> = runs.iter().map(|o| o.history.records.len()).collect();
    let decreasing = steps.windows(2).all(|w| w[1] < w[0]);
    let outcomes: Vec<String> = runs
        .iter()
        .map(|o| format!("tau {}: {} in {}", o.tau, o.history.terminated_by.as_str(), o.history.records.len()))
        .collect();
    let ok = all_converged && worst_ratio <= 10.0 && decreasing;
    (
        ok,
        format!(
            "{name}: [{}]; worst max/min err_i ratio {:.3e} (limit 10); steps strictly decreasing: {}",
            outcomes.join("; "),
            worst_ratio,
            decreasing
        ),
    )
}

#[test]
fn time_step_independent_of_mesh() {
    let (ok_coarse, coarse_text) = check_sweep("40x40", coarse_sweep());
    let (ok_desk, desk_text) = check_sweep("79x79", desk_sweep());
    let passed = ok_coarse && ok_desk;
    report(
        passed,
        "mesh-independent time step",
        format!("{coarse_text} | {desk_text} (step budget {STEP_BUDGET})"),
    );
    assert!(passed);
}

#[test]
fn monotone_energy_inside_energy_bound() {
    let (h, tau) = energy_run();
    let mut prev = h.initial.energy;
    let mut worst = f64::MIN;
    for r in &h.records {
        worst = worst.max((r.energy - prev) / prev.abs());
        prev = r.energy;
    }
    let passed = worst <= 1e-10 && h.records.len() == ENERGY_STEPS;
    report(
        passed,
        "monotone energy",
        format!(
            "tau = {tau:.4e} (half the energy bound), {} steps, worst relative rise {worst:.3e} (limit 1e-10)",
            h.records.len()
        ),
    );
    assert!(passed);
}

#[test]
fn quasi_stiefel_set_preserved() {
    let (o, _) = desk_run();
    let h = &o.history;
    let b = h.bounds.unwrap();
    let start = h.initial.lambda_min_gram;
    let worst = h.records.iter().map(|r| r.lambda_min_gram).fold(start, f64::min);
    let at = h.records.iter().position(|r| r.lambda_min_gram == worst).map_or(0, |k| k + 1);
    let inside = o.tau < b.tau_quasi_stiefel && (start - 1.0).abs() <= 1e-12;
    let passed = inside && worst >= 1.0 - 1e-8;
    report(
        passed,
        "quasi-Stiefel preservation",
        format!(
            "tau = {} < bound {:.4e}, lambda_min(<U_0,U_0>) = {start:.16}; min lambda_min(<U_n,U_n>) = {worst:.10} \
             at step {at} (limit 1 - 1e-8)",
            o.tau, b.tau_quasi_stiefel
        ),
    );
    assert!(passed);
}

#[test]
fn orthogonality_contracts() {
    let (o, _) = desk_run();
    let h = &o.history;
    let b = h.bounds.unwrap();
    let omega = 1.0 - o.tau / h.initial.energy;
    let mut prev = h.initial.orth_error;
    let mut worst = f64::MIN;
    for r in &h.records {
        worst = worst.max(r.orth_error.powi(2) - omega * prev.powi(2));
        prev = r.orth_error;
    }
    let last = h.records.last().unwrap().orth_error;
    let passed = o.tau < b.tau_contraction && worst <= 1e-10 && last <= 1e-9;
    report(
        passed,
        "orthogonality contraction",
        format!(
            "tau = {} < bound {:.4e}; worst ||O_(n+1)||^2 - omega ||O_n||^2 = {worst:.3e} (limit 1e-10); \
             final ||O||_F = {last:.3e} (limit 1e-9)",
            o.tau, b.tau_contraction
        ),
    );
    assert!(passed);
}

#[test]
fn predictor_preserves_gram() {
    let mut worst: f64 = 0.0;
    let mut steps = 0;
    let mut histories: Vec<&RunHistory> = vec![&desk_run().0.history, &energy_run().0];
    histories.extend(desk_sweep().iter().map(|o| &o.history));
    histories.extend(coarse_sweep().iter().map(|o| &o.history));
    for h in histories {
        for r in &h.records {
            worst = worst.max(r.relative_drift());
            steps += 1;
        }
    }
    let passed = worst <= 1e-9;
    report(
        passed,
        "predictor Gram preservation",
        format!("worst relative drift {worst:.3e} over {steps} steps (limit 1e-9)"),
    );
    assert!(passed);
}

#[test]
fn exponential_convergence_rates() {
    let (o, _) = desk_run();
    let h = &o.history;
    let series = |f: fn(&qseig::scheme::StepDiagnostics) -> f64| -> Vec<f64> {
        std::iter::once(&h.initial).chain(&h.records).map(f).collect()
    };
    let grad = fit_exponential_rate("grad_norm_a", &series(|s| s.grad_norm_a), DEFAULT_WINDOW_FRACTION).unwrap();
    let orth = fit_exponential_rate("orth_error", &series(|s| s.orth_error), DEFAULT_WINDOW_FRACTION).unwrap();
    let orth_limit = (1.0 - o.tau / h.initial.energy).ln() / 2.0 + 0.05;
    let grad_ok = grad.r_squared >= 0.98 && grad.slope_per_step < 0.0;
    let orth_ok = orth.r_squared >= 0.98 && orth.slope_per_step < 0.0 && orth.slope_per_step <= orth_limit;
    let passed = grad_ok && orth_ok;
    report(
        passed,
        "exponential convergence",
        format!(
            "grad_norm_a slope {:.3e}/step, R^2 {:.4} over steps {}..{}; orth_error slope {:.3e}/step \
             (limit {orth_limit:.3e}), R^2 {:.4} over steps {}..{} (R^2 limit 0.98)",
            grad.slope_per_step,
            grad.r_squared,
            grad.window.0,
            grad.window.1,
            orth.slope_per_step,
            orth.r_squared,
            orth.window.0,
            orth.window.1
        ),
    );
    assert!(passed);
}

#[test]
fn continuous_model_cross_check() {
    single_thread();
    let start = Instant::now();
    let mut d = assemble(
        &DomainSpec::cube(1, 0.0, 1.0).unwrap(),
        &GridSpec::uniform(1, 20),
        &PotentialSpec::Zero,
        0.5,
        0.0,
    )
    .unwrap();
    let g = InverseOperator::prepare(&d, Method::DirectFactorization).unwrap();
    d.estimate_lambda1(&g, 1e-12).unwrap();
    let spectrum = DenseSpectrum::compute(&d).unwrap();
    let u0 = init_state(&d, 2, &InitMode::QuasiStiefelScaled { seed: 42 }).unwrap();
    let e0 = energy(&d, &u0).unwrap();
    let o0 = gram_l2(&d, &u0, &u0).unwrap().minus_identity().frobenius();

    let exact1 = closed_form_solution(&spectrum, &d, &u0, 1.0).unwrap();
    let rk1 = rk4_integrate(&d, &g, &u0, 1.0, 1e-4).unwrap();
    let distance = subspace_distance_a(&d, &exact1, &rk1).unwrap();

    let mut worst_orth = f64::MIN;
    for t in [0.5, 1.0, 2.0] {
        let u = closed_form_solution(&spectrum, &d, &u0, t).unwrap();
        let o = gram_l2(&d, &u, &u).unwrap().minus_identity().frobenius();
        worst_orth = worst_orth.max(o - o0 * (-t / e0).exp());
    }
    let elapsed = start.elapsed().as_secs_f64();
    let passed = distance <= 1e-6 && worst_orth <= 1e-6 && elapsed < 10.0;
    report(
        passed,
        "continuous-model cross-check",
        format!(
            "a-distance closed form vs RK4 at t = 1: {distance:.3e} (limit 1e-6); worst orthogonality bound \
             excess at t = 0.5, 1, 2: {worst_orth:.3e} (limit 1e-6); {elapsed:.2} s (limit 10 s)"
        ),
    );
    assert!(passed);
}

#[test]
fn ugu_spectral_bounds() {
    let p = desk();
    let lambda1 = p.d.lambda1_est().unwrap();
    let (mut low, mut high) = (f64::MIN, f64::MIN);
    for seed in 0..200u64 {
        let u = init_state(&p.d, 8, &InitMode::QuasiStiefelScaled { seed: 10_000 + seed }).unwrap();
        let gu = p.g.apply(&u).unwrap();
        let pgu = GramMatrix::symmetric(gram_l2(&p.d, &u, &gu).unwrap().into_matrix());
        let s = gram_l2(&p.d, &u, &u).unwrap();
        low = low.max(1.0 / (2.0 * energy(&p.d, &u).unwrap()) - pgu.lambda_min().unwrap());
        high = high.max(pgu.lambda_max().unwrap() - s.lambda_max().unwrap() / lambda1);
    }
    let passed = low <= 1e-9 && high <= 1e-9;
    report(
        passed,
        "spectral bounds of <U,GU>",
        format!(
            "200 random quasi-Stiefel states: max 1/(2E(U)) - lambda_min = {low:.3e}, \
             max lambda_max - lambda_max(<U,U>)/lambda_1 = {high:.3e} (limits 1e-9)"
        ),
    );
    assert!(passed);
}

/// Informational only: printed, never asserted.
#[test]
fn coarse_coulomb_run() {
    single_thread();
    let text = "problem.dim = 3\nproblem.lower = -20\nproblem.upper = 20\nproblem.points = 21\n\
                problem.potential = soft_coulomb\nproblem.sigma = 1\nn_eig = 5\nscheme.tau = 0.2\n\
                scheme.max_steps = 2000\nreference.kind = none\n";
    let cfg = RunConfig::parse(text, Path::new("")).unwrap();
    let start = Instant::now();
    let line = match prepare(&cfg).and_then(|(d, g)| {
        let u0 = init_state(&d, 5, &cfg.scheme.init_mode)?;
        solve_once(&cfg, &d, &g, &u0, None, false)
    }) {
        Ok(o) => {
            let ground = o.report.eigenvalues[0];
            let ok = o.history.terminated_by == Termination::ToleranceMet && ground > -0.55 && ground < -0.40;
            format!(
                "{} after {} steps, ground eigenvalue {ground:.6} (window (-0.55, -0.40)): {}; {:.1} s",
                o.history.terminated_by.as_str(),
                o.history.records.len(),
                if ok { "within" } else { "outside" },
                start.elapsed().as_secs_f64()
            )
        }
        Err(e) => format!("run failed: {e}"),
    };
    let mut out = std::io::stdout().lock();
    let _ = writeln!(out, "[INFO] coarse 3D soft-Coulomb run (21^3, sigma = 1, N = 5): {line}");
}
