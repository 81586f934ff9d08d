//! The quasi-orthogonal iteration: skew operator, Cayley predictor, corrector,
//! step-size bounds, and the outer driver.

use std::path::PathBuf;

use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::analysis::{energy, grad_norms_with};
use crate::blockvec::{combine, gram_l2, inv_sqrt, sym_eig, BlockState, GramMatrix};
use crate::discretize::Discretization;
use crate::error::{Error, Result};
use crate::greens::InverseOperator;
use crate::state_io;

pub const DEFAULT_EPS: f64 = 1e-5;
pub const DEFAULT_MAX_STEPS: usize = 100_000;
const INIT_RETRIES: usize = 3;
/// Relative energy rise counted towards divergence.
const ENERGY_RISE: f64 = 1e-8;
const DIVERGENCE_STREAK: usize = 3;

#[derive(Debug, Clone, PartialEq)]
pub enum InitMode {
    RawRandom { seed: u64 },
    QuasiStiefelScaled { seed: u64 },
    Orthonormal { seed: u64 },
    FromState(PathBuf),
}

impl InitMode {
    pub fn with_seed(&self, seed: u64) -> InitMode {
        match self {
            InitMode::RawRandom { .. } => InitMode::RawRandom { seed },
            InitMode::QuasiStiefelScaled { .. } => InitMode::QuasiStiefelScaled { seed },
            InitMode::Orthonormal { .. } => InitMode::Orthonormal { seed },
            InitMode::FromState(p) => InitMode::FromState(p.clone()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BoundsPolicy {
    Warn,
    Reject,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SchemeConfig {
    pub tau: f64,
    pub eps: f64,
    pub max_steps: usize,
    pub init_mode: InitMode,
    pub enforce_bounds: BoundsPolicy,
}

impl SchemeConfig {
    pub fn new(tau: f64) -> Self {
        SchemeConfig {
            tau,
            eps: DEFAULT_EPS,
            max_steps: DEFAULT_MAX_STEPS,
            init_mode: InitMode::QuasiStiefelScaled { seed: 0 },
            enforce_bounds: BoundsPolicy::Warn,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(Error::InvalidArgument(format!("tau must be positive, got {}", self.tau)));
        }
        if !(self.eps > 0.0 && self.eps.is_finite()) {
            return Err(Error::InvalidArgument(format!("eps must be positive, got {}", self.eps)));
        }
        if self.max_steps == 0 {
            return Err(Error::InvalidArgument("max_steps must be at least 1".into()));
        }
        Ok(())
    }
}

fn gram_extremes(s: &GramMatrix) -> Result<(f64, f64)> {
    if !s.frobenius().is_finite() {
        return Err(Error::NonFinite("Gram matrix"));
    }
    let e = sym_eig(s)?;
    Ok((e.values[0], e.values[e.values.len() - 1]))
}

/// Initial block. Random modes draw iid standard normal entries column by
/// column from `ChaCha8Rng::seed_from_u64(seed)`, redrawing from the same
/// stream when the draw is numerically rank deficient.
pub fn init_state(d: &Discretization, n: usize, mode: &InitMode) -> Result<BlockState> {
    if n == 0 || n > d.ng() {
        return Err(Error::InvalidArgument(format!("N = {n} must lie in 1..={}", d.ng())));
    }
    let seed = match mode {
        InitMode::FromState(path) => {
            let u = state_io::read_state(path)?;
            if u.rows() != d.ng() || u.cols() != n {
                return Err(Error::shape(
                    format!("{} x {n}", d.ng()),
                    format!("{} x {}", u.rows(), u.cols()),
                ));
            }
            return Ok(u);
        }
        InitMode::RawRandom { seed }
        | InitMode::QuasiStiefelScaled { seed }
        | InitMode::Orthonormal { seed } => *seed,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut last = (0.0, 0.0);
    for _ in 0..=INIT_RETRIES {
        let raw = BlockState::new(DMatrix::from_fn(d.ng(), n, |_, _| StandardNormal.sample(&mut rng)))?;
        let s = gram_l2(d, &raw, &raw)?;
        let (lmin, lmax) = gram_extremes(&s)?;
        last = (lmin, lmax);
        if lmin < 1e-12 * lmax {
            continue;
        }
        return match mode {
            InitMode::RawRandom { .. } => Ok(raw),
            InitMode::QuasiStiefelScaled { .. } => raw.scaled(1.0 / lmin.sqrt()),
            _ => combine(&raw, inv_sqrt(&s)?.matrix()),
        };
    }
    Err(Error::RankDeficient {
        lambda_min: last.0,
        lambda_max: last.1,
    })
}

/// `A_U V = GU <U,V> - U <GU,V>` with `GU` supplied.
pub fn skew_apply(d: &Discretization, u: &BlockState, gu: &BlockState, v: &BlockState) -> Result<BlockState> {
    let uv = gram_l2(d, u, v)?;
    let guv = gram_l2(d, gu, v)?;
    combine(gu, uv.matrix())?.sub(&combine(u, guv.matrix())?)
}

/// Coefficients `[X; Y]` with `U_hat = U X + GU Y`, from the three Grams
/// `S = <U,U>`, `P = <U,GU>`, `Q = <GU,GU>`.
fn cayley_coefficients(s: &DMatrix<f64>, p: &DMatrix<f64>, q: &DMatrix<f64>, tau: f64) -> Result<DMatrix<f64>> {
    let n = s.nrows();
    let h = 0.5 * tau;
    let pt = p.transpose();
    // B = U c1 + GU c2
    let c1 = DMatrix::identity(n, n) - &pt * h;
    let c2 = s * h;
    // <Z,B> with Z = [U, GU]
    let mut zb = DMatrix::zeros(2 * n, n);
    zb.rows_mut(0, n).copy_from(&(s * &c1 + p * &c2));
    zb.rows_mut(n, n).copy_from(&(&pt * &c1 + q * &c2));
    // K = I - h <Z,W> with W = [GU, -U]
    let mut k = DMatrix::identity(2 * n, 2 * n);
    for (r, c, block, sign) in [(0, 0, p, -h), (0, n, s, h), (n, 0, q, -h), (n, n, &pt, h)] {
        let mut view = k.view_mut((r, c), (n, n));
        view += block * sign;
    }
    let y = k
        .lu()
        .solve(&zb)
        .filter(|y| y.iter().all(|v| v.is_finite()))
        .ok_or(Error::SmallSolveSingular { tau })?;
    let mut coeff = DMatrix::zeros(2 * n, n);
    coeff.rows_mut(0, n).copy_from(&(c1 - y.rows(n, n) * h));
    coeff.rows_mut(n, n).copy_from(&(c2 + y.rows(0, n) * h));
    Ok(coeff)
}

fn cayley_from_grams(u: &BlockState, gu: &BlockState, s: &GramMatrix, p: &GramMatrix, q: &GramMatrix, tau: f64) -> Result<BlockState> {
    let coeff = cayley_coefficients(s.matrix(), p.matrix(), q.matrix(), tau)?;
    combine(&u.hstack(gu)?, &coeff).map_err(|e| match e {
        Error::NonFinite(_) => Error::NonFinite("predictor"),
        other => other,
    })
}

/// Implicit-midpoint predictor `U_hat = (I - tau/2 A_U)^{-1} (I + tau/2 A_U) U`,
/// solved exactly through the rank-2N structure of `A_U`.
pub fn cayley_step(d: &Discretization, u: &BlockState, gu: &BlockState, tau: f64) -> Result<BlockState> {
    if !(tau > 0.0) {
        return Err(Error::InvalidArgument(format!("tau must be positive, got {tau}")));
    }
    let s = gram_l2(d, u, u)?;
    let p = gram_l2(d, u, gu)?;
    let q = gram_l2(d, gu, gu)?;
    cayley_from_grams(u, gu, &s, &p, &q, tau)
}

fn corrector_from(u_hat: &BlockState, g_hat: &BlockState, gram_hat: &GramMatrix, tau: f64) -> Result<BlockState> {
    let o = gram_hat.minus_identity();
    u_hat
        .add_scaled(-tau, &combine(g_hat, o.matrix())?)
        .map_err(|_| Error::NonFinite("corrector"))
}

/// `U_hat - tau G U_hat (<U_hat,U_hat> - I)`
pub fn corrector_step(d: &Discretization, g: &InverseOperator, u_hat: &BlockState, tau: f64) -> Result<BlockState> {
    let g_hat = g.apply(u_hat)?;
    corrector_from(u_hat, &g_hat, &gram_l2(d, u_hat, u_hat)?, tau)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepDiagnostics {
    pub step_index: usize,
    /// Shifted energy.
    pub energy: f64,
    pub energy_unshifted: f64,
    pub orth_error: f64,
    /// L2 norm of `GU - U<GU,U>`; the stopping metric.
    pub grad_norm: f64,
    pub grad_norm_a: f64,
    pub lambda_min_gram: f64,
    pub lambda_max_gram: f64,
    /// `||<U_hat,U_hat> - <U_n,U_n>||_F`
    pub predictor_gram_drift: f64,
    /// `||<U_n,U_n>||_F`, the scale for `predictor_gram_drift`.
    pub predictor_gram_scale: f64,
    /// Cumulative scalar solves of the bound operator.
    pub green_solves: u64,
}

impl StepDiagnostics {
    pub fn is_finite(&self) -> bool {
        [
            self.energy,
            self.energy_unshifted,
            self.orth_error,
            self.grad_norm,
            self.grad_norm_a,
            self.lambda_min_gram,
            self.lambda_max_gram,
            self.predictor_gram_drift,
            self.predictor_gram_scale,
        ]
        .iter()
        .all(|v| v.is_finite())
    }

    pub fn relative_drift(&self) -> f64 {
        self.predictor_gram_drift / self.predictor_gram_scale
    }
}

/// A state together with `G` applied to it.
#[derive(Debug, Clone)]
pub struct Iterate {
    pub index: usize,
    pub state: BlockState,
    pub green: BlockState,
}

impl Iterate {
    pub fn new(g: &InverseOperator, u: BlockState) -> Result<Self> {
        let green = g.apply(&u)?;
        Ok(Iterate {
            index: 0,
            state: u,
            green,
        })
    }
}

fn describe(
    d: &Discretization,
    g: &InverseOperator,
    it: &Iterate,
    gram: &GramMatrix,
    drift: f64,
    scale: f64,
) -> Result<StepDiagnostics> {
    let (lmin, lmax) = gram_extremes(gram)?;
    let e = energy(d, &it.state)?;
    let (grad_norm, grad_norm_a) = grad_norms_with(d, &it.state, &it.green)?;
    Ok(StepDiagnostics {
        step_index: it.index,
        energy: e,
        energy_unshifted: e - 0.5 * d.sigma() * gram.trace(),
        orth_error: gram.minus_identity().frobenius(),
        grad_norm,
        grad_norm_a,
        lambda_min_gram: lmin,
        lambda_max_gram: lmax,
        predictor_gram_drift: drift,
        predictor_gram_scale: scale,
        green_solves: g.solve_count(),
    })
}

/// Diagnostics of an iterate without taking a step (drift reported as 0).
pub fn diagnostics(d: &Discretization, g: &InverseOperator, it: &Iterate) -> Result<StepDiagnostics> {
    let gram = gram_l2(d, &it.state, &it.state)?;
    let scale = gram.frobenius();
    describe(d, g, it, &gram, 0.0, scale)
}

/// One predictor-corrector step. Uses `N` solves for `G U_hat` and `N` for
/// `G U_{n+1}`, which the next step reuses.
pub fn step(d: &Discretization, g: &InverseOperator, it: &Iterate, tau: f64) -> Result<(Iterate, StepDiagnostics)> {
    let (u, gu) = (&it.state, &it.green);
    let s = gram_l2(d, u, u)?;
    let p = gram_l2(d, u, gu)?;
    let q = gram_l2(d, gu, gu)?;
    let u_hat = cayley_from_grams(u, gu, &s, &p, &q, tau)?;
    let gram_hat = gram_l2(d, &u_hat, &u_hat)?;
    let drift = (gram_hat.matrix() - s.matrix()).norm();
    let g_hat = g.apply(&u_hat)?;
    let next_state = corrector_from(&u_hat, &g_hat, &gram_hat, tau)?;
    let next = Iterate {
        index: it.index + 1,
        green: g.apply(&next_state)?,
        state: next_state,
    };
    let gram = gram_l2(d, &next.state, &next.state)?;
    let diag = describe(d, g, &next, &gram, drift, s.frobenius())?;
    Ok((next, diag))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepBounds {
    pub tau_nonexpansion: f64,
    pub tau_quasi_stiefel: f64,
    pub tau_contraction: f64,
    /// Uses `c_Omega^2 = 1/lambda_1`, so this is an estimate.
    pub tau_energy: f64,
    pub c_e: f64,
    pub lambda1: f64,
    pub energy0: f64,
    pub lambda_max0: f64,
}

/// `c_e = 2 (sqrt(2) E / l1 + c_Omega^2 sqrt(E lmax)) sqrt(N E lmax) + 1/2`, `c_Omega^2 = 1/l1`.
pub fn energy_constant(e0: f64, n: usize, lambda1: f64, lambda_max: f64) -> f64 {
    let c_omega_sq = 1.0 / lambda1;
    2.0 * (2f64.sqrt() * e0 / lambda1 + c_omega_sq * (e0 * lambda_max).sqrt()) * (n as f64 * e0 * lambda_max).sqrt()
        + 0.5
}

pub fn step_bounds_from(lambda1: f64, e0: f64, lambda_max: f64, n: usize) -> StepBounds {
    let c_e = energy_constant(e0, n, lambda1, lambda_max);
    StepBounds {
        tau_nonexpansion: 2.0 * lambda1 / lambda_max,
        tau_quasi_stiefel: lambda1 / (2.0 * lambda_max),
        tau_contraction: (lambda1 / (3.0 * lambda_max)).min(e0),
        tau_energy: (lambda1 / (2.0 * c_e * lambda_max)).min(lambda1 / (2.0 * (2.0 * e0 * lambda_max).sqrt())),
        c_e,
        lambda1,
        energy0: e0,
        lambda_max0: lambda_max,
    }
}

/// Step-size bounds for `U_0`, all in the shifted operator.
pub fn compute_step_bounds(d: &Discretization, u0: &BlockState) -> Result<StepBounds> {
    let lambda1 = d.lambda1_est().ok_or(Error::MissingLambda1)?;
    let (_, lmax) = gram_extremes(&gram_l2(d, u0, u0)?)?;
    Ok(step_bounds_from(lambda1, energy(d, u0)?, lmax, u0.cols()))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Termination {
    ToleranceMet,
    MaxSteps,
    Diverged,
}

impl Termination {
    pub fn as_str(&self) -> &'static str {
        match self {
            Termination::ToleranceMet => "ToleranceMet",
            Termination::MaxSteps => "MaxSteps",
            Termination::Diverged => "Diverged",
        }
    }
}

#[derive(Debug, Clone)]
pub struct RunHistory {
    /// Diagnostics of `U_0` (step 0).
    pub initial: StepDiagnostics,
    /// One record per step taken, `step_index` 1, 2, ...
    pub records: Vec<StepDiagnostics>,
    pub terminated_by: Termination,
    pub final_state: BlockState,
    pub bounds: Option<StepBounds>,
}

pub fn run(d: &Discretization, g: &InverseOperator, config: &SchemeConfig, u0: BlockState) -> Result<RunHistory> {
    run_observed(d, g, config, u0, |_, _| {})
}

fn check_bounds(d: &Discretization, config: &SchemeConfig, u0: &BlockState) -> Result<Option<StepBounds>> {
    let bounds = match compute_step_bounds(d, u0) {
        Ok(b) => b,
        Err(Error::MissingLambda1) if config.enforce_bounds == BoundsPolicy::Warn => {
            log::warn!("no lambda_1 estimate; step-size bounds not checked");
            return Ok(None);
        }
        Err(e) => return Err(e),
    };
    if config.tau >= bounds.tau_quasi_stiefel {
        match config.enforce_bounds {
            BoundsPolicy::Reject => {
                return Err(Error::StepTooLarge {
                    tau: config.tau,
                    bound: bounds.tau_quasi_stiefel,
                })
            }
            BoundsPolicy::Warn => log::warn!(
                "tau = {} exceeds the quasi-Stiefel bound {:.6e}",
                config.tau,
                bounds.tau_quasi_stiefel
            ),
        }
    }
    Ok(Some(bounds))
}

/// Runs the scheme from `u0`, calling `observer` with each step's diagnostics
/// and new state. Always takes at least one step.
pub fn run_observed<F>(
    d: &Discretization,
    g: &InverseOperator,
    config: &SchemeConfig,
    u0: BlockState,
    mut observer: F,
) -> Result<RunHistory>
where
    F: FnMut(&StepDiagnostics, &BlockState),
{
    config.validate()?;
    if u0.rows() != d.ng() {
        return Err(Error::shape(d.ng(), u0.rows()));
    }
    let bounds = check_bounds(d, config, &u0)?;
    let mut it = Iterate::new(g, u0)?;
    let initial = diagnostics(d, g, &it)?;
    let mut records: Vec<StepDiagnostics> = Vec::new();
    let mut rises = 0;
    let mut prev_energy = initial.energy;
    let terminated_by = loop {
        let (next, diag) = match step(d, g, &it, config.tau) {
            Ok(r) => r,
            Err(Error::NonFinite(what)) if !records.is_empty() => {
                log::warn!("non-finite values in {what} at step {}", it.index + 1);
                break Termination::Diverged;
            }
            Err(Error::SmallSolveSingular { .. }) if !records.is_empty() => {
                log::warn!("singular predictor system at step {}", it.index + 1);
                break Termination::Diverged;
            }
            Err(e) => return Err(e),
        };
        if !diag.is_finite() {
            if records.is_empty() {
                return Err(Error::NonFinite("step diagnostics"));
            }
            break Termination::Diverged;
        }
        if diag.energy > prev_energy + ENERGY_RISE * prev_energy.abs() {
            rises += 1;
        } else {
            rises = 0;
        }
        prev_energy = diag.energy;
        observer(&diag, &next.state);
        records.push(diag);
        it = next;
        if rises >= DIVERGENCE_STREAK {
            break Termination::Diverged;
        }
        if diag.grad_norm < config.eps {
            break Termination::ToleranceMet;
        }
        if records.len() >= config.max_steps {
            break Termination::MaxSteps;
        }
    };
    log::info!(
        "scheme finished after {} steps: {}",
        records.len(),
        terminated_by.as_str()
    );
    Ok(RunHistory {
        initial,
        records,
        terminated_by,
        final_state: it.state,
        bounds,
    })
}
