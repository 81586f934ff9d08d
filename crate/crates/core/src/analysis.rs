//! Diagnostics, Rayleigh-Ritz extraction, the reference subspace iteration,
//! the continuous-model solution and its RK4 integrator, and rate fitting.

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::blockvec::{combine, gram_a, gram_l2, inv_sqrt, sym_eig, BlockState, GramMatrix};
use crate::discretize::Discretization;
use crate::error::{Error, Result};
use crate::greens::InverseOperator;

/// Values below this are treated as roundoff when fitting rates.
pub const RATE_FLOOR: f64 = 1e-13;
/// Default fraction of a history used for rate fits (the first 30% is transient).
pub const DEFAULT_WINDOW_FRACTION: f64 = 0.7;
const REFERENCE_SEED: u64 = 0x05EE_D0F0_AC1E;

/// `E(U) = 1/2 tr <U,U>_a` in the shifted operator.
pub fn energy(d: &Discretization, u: &BlockState) -> Result<f64> {
    Ok(0.5 * gram_a(d, u, u)?.trace())
}

/// Energy with the spectral shift removed.
pub fn energy_unshifted(d: &Discretization, u: &BlockState) -> Result<f64> {
    let shifted = energy(d, u)?;
    Ok(shifted - 0.5 * d.sigma() * gram_l2(d, u, u)?.trace())
}

/// `||<U,U> - I||_F`
pub fn orthogonality_error(d: &Discretization, u: &BlockState) -> Result<f64> {
    Ok(gram_l2(d, u, u)?.minus_identity().frobenius())
}

/// `R = GU - U <GU,U>`.
pub fn gradient(d: &Discretization, u: &BlockState, gu: &BlockState) -> Result<BlockState> {
    let c = gram_l2(d, gu, u)?;
    gu.sub(&combine(u, c.matrix())?)
}

/// `(||R||, ||R||_a)` for the gradient `R` of `U`, given `GU`.
pub fn grad_norms_with(d: &Discretization, u: &BlockState, gu: &BlockState) -> Result<(f64, f64)> {
    let r = gradient(d, u, gu)?;
    let l2 = gram_l2(d, &r, &r)?.trace().max(0.0).sqrt();
    let a = gram_a(d, &r, &r)?.trace().max(0.0).sqrt();
    Ok((l2, a))
}

pub fn grad_norms(d: &Discretization, g: &InverseOperator, u: &BlockState) -> Result<(f64, f64)> {
    let gu = g.apply(u)?;
    grad_norms_with(d, u, &gu)
}

#[derive(Debug, Clone, PartialEq)]
pub struct EigenReport {
    /// Ascending, unshifted.
    pub eigenvalues: Vec<f64>,
    pub relative_errors: Option<Vec<f64>>,
    /// Unshifted energy of the block the report was extracted from.
    pub energy: f64,
    pub residual_norms: Vec<f64>,
}

impl EigenReport {
    /// Fills `relative_errors` as `|lambda_i - ref_i| / |ref_i|`.
    pub fn with_reference(mut self, reference: &[f64]) -> Result<Self> {
        if reference.len() < self.eigenvalues.len() {
            return Err(Error::shape(self.eigenvalues.len(), reference.len()));
        }
        self.relative_errors = Some(
            self.eigenvalues
                .iter()
                .zip(reference)
                .map(|(l, r)| (l - r).abs() / r.abs())
                .collect(),
        );
        Ok(self)
    }
}

/// `||A v_i - mu_i M v_i|| / ||M v_i||` per column, `mu_i` in the shifted pencil.
fn residual_norms(d: &Discretization, v: &BlockState, mu: &[f64]) -> Result<Vec<f64>> {
    let av = d.apply_stiffness(v)?;
    let mv = d.apply_mass(v)?;
    Ok((0..v.cols())
        .map(|j| {
            let (a, m) = (av.column(j), mv.column(j));
            let num: f64 = a.iter().zip(m).map(|(a, m)| (a - mu[j] * m).powi(2)).sum();
            let den: f64 = m.iter().map(|m| m * m).sum();
            (num / den).sqrt()
        })
        .collect())
}

fn check_rank(s: &GramMatrix) -> Result<()> {
    let e = sym_eig(s)?;
    let (lmin, lmax) = (e.values[0], e.values[e.values.len() - 1]);
    if !(lmin > 1e-12 * lmax) {
        return Err(Error::RankDeficient {
            lambda_min: lmin,
            lambda_max: lmax,
        });
    }
    Ok(())
}

/// Rayleigh-Ritz extraction from the pencil `(<U,GU>, <U,U>)` given `GU`.
pub fn extract_eigenvalues_with(
    d: &Discretization,
    u: &BlockState,
    gu: &BlockState,
) -> Result<(EigenReport, BlockState)> {
    let s = gram_l2(d, u, u)?;
    check_rank(&s)?;
    let w = inv_sqrt(&s)?;
    let p = gram_l2(d, u, gu)?.into_matrix();
    let p = GramMatrix::symmetric(p);
    let t = GramMatrix::symmetric(w.matrix() * p.matrix() * w.matrix());
    let e = sym_eig(&t)?;
    let n = u.cols();
    if !(e.values[0] > 0.0) {
        return Err(Error::NotPositiveDefinite(format!(
            "Ritz pencil has value {:e}",
            e.values[0]
        )));
    }
    // largest theta first gives ascending operator eigenvalues
    let order: Vec<usize> = (0..n).rev().collect();
    let y = DMatrix::from_fn(n, n, |i, j| e.vectors[(i, order[j])]);
    let coeff = w.matrix() * y;
    let v = combine(u, &coeff)?;
    let norms = gram_l2(d, &v, &v)?;
    let scale = DMatrix::from_fn(n, n, |i, j| if i == j { 1.0 / norms.matrix()[(j, j)].sqrt() } else { 0.0 });
    let v = combine(&v, &scale)?;
    let mu: Vec<f64> = order.iter().map(|&k| 1.0 / e.values[k]).collect();
    let report = EigenReport {
        eigenvalues: mu.iter().map(|m| m - d.sigma()).collect(),
        relative_errors: None,
        energy: energy_unshifted(d, u)?,
        residual_norms: residual_norms(d, &v, &mu)?,
    };
    Ok((report, v))
}

pub fn extract_eigenvalues(
    d: &Discretization,
    g: &InverseOperator,
    u: &BlockState,
) -> Result<(EigenReport, BlockState)> {
    let gu = g.apply(u)?;
    extract_eigenvalues_with(d, u, &gu)
}

#[derive(Debug, Clone)]
pub struct ReferenceSolution {
    pub report: EigenReport,
    /// M-orthonormal eigenvector block, `N` columns.
    pub vectors: BlockState,
    pub sweeps: usize,
}

/// Inverse subspace iteration from a seeded random start with two guard columns.
pub fn reference_subspace_iteration(
    d: &Discretization,
    g: &InverseOperator,
    n: usize,
    tol: f64,
    max_iter: usize,
) -> Result<ReferenceSolution> {
    if n == 0 || n > d.ng() {
        return Err(Error::InvalidArgument(format!("N = {n} must lie in 1..={}", d.ng())));
    }
    let width = (n + 2).min(d.ng());
    let mut rng = ChaCha8Rng::seed_from_u64(REFERENCE_SEED);
    let x0 = DMatrix::from_fn(d.ng(), width, |_, _| StandardNormal.sample(&mut rng));
    reference_subspace_iteration_from(d, g, BlockState::new(x0)?, n, tol, max_iter)
}

/// Subspace iteration started from `x0`. Columns beyond `n` act as guards;
/// when `x0` has exactly `n` columns, two seeded random guard columns are appended.
pub fn reference_subspace_iteration_from(
    d: &Discretization,
    g: &InverseOperator,
    x0: BlockState,
    n: usize,
    tol: f64,
    max_iter: usize,
) -> Result<ReferenceSolution> {
    let mut x = x0;
    if x.cols() < n {
        return Err(Error::shape(n, x.cols()));
    }
    if x.cols() == n && n + 2 <= d.ng() {
        let mut rng = ChaCha8Rng::seed_from_u64(REFERENCE_SEED);
        let guard = DMatrix::from_fn(d.ng(), 2, |_, _| StandardNormal.sample(&mut rng));
        x = x.hstack(&BlockState::new(guard)?)?;
    }
    let width = x.cols();
    for sweep in 1..=max_iter {
        let y = g.apply(&x)?;
        let s = gram_l2(d, &y, &y)?;
        let y = combine(&y, inv_sqrt(&s)?.matrix())?;
        let h = gram_a(d, &y, &y)?;
        let e = sym_eig(&h)?;
        x = combine(&y, &e.vectors)?;
        let mu: Vec<f64> = e.values.iter().copied().collect();
        let head = x.columns_range(0, n)?;
        let res = residual_norms(d, &head, &mu[..n])?;
        log::trace!("reference sweep {sweep}: max residual {:e}", res.iter().fold(0.0f64, |a, &b| a.max(b)));
        if res.iter().all(|&r| r < tol) {
            if width > n {
                let ratio = mu[n - 1] / mu[n];
                if ratio >= 1.0 - 1e-12 {
                    return Err(Error::GapTooSmall { ratio });
                }
            }
            let report = EigenReport {
                eigenvalues: mu[..n].iter().map(|m| m - d.sigma()).collect(),
                relative_errors: None,
                energy: energy_unshifted(d, &head)?,
                residual_norms: res,
            };
            return Ok(ReferenceSolution {
                report,
                vectors: head,
                sweeps: sweep,
            });
        }
    }
    Err(Error::NoConvergence {
        what: "reference subspace iteration",
        iterations: max_iter,
    })
}

/// `||U_n - U_end|| / ||U_end||` in the M-weighted block norm.
pub fn eigenvector_error(u_n: &BlockState, u_end: &BlockState, d: &Discretization) -> Result<f64> {
    let reference = gram_l2(d, u_end, u_end)?.trace().max(0.0).sqrt();
    if reference < 1e-14 {
        return Err(Error::ZeroReference);
    }
    let diff = u_n.sub(u_end)?;
    Ok(gram_l2(d, &diff, &diff)?.trace().max(0.0).sqrt() / reference)
}

/// Largest grid for the dense continuous-model path.
pub const DENSE_MAX_NG: usize = 200;

/// Full generalized eigendecomposition `A phi = mu M phi` of a small pencil.
#[derive(Debug, Clone)]
pub struct DenseSpectrum {
    /// Ascending, shifted.
    pub mu: DVector<f64>,
    /// M-orthonormal eigenvectors as columns.
    pub phi: DMatrix<f64>,
}

impl DenseSpectrum {
    pub fn compute(d: &Discretization) -> Result<Self> {
        let ng = d.ng();
        if ng > DENSE_MAX_NG {
            return Err(Error::InvalidArgument(format!(
                "dense path needs Ng <= {DENSE_MAX_NG}, got {ng}"
            )));
        }
        let s: Vec<f64> = d.mass().iter().map(|m| 1.0 / m.sqrt()).collect();
        let a = d.stiffness().to_dense();
        let b = DMatrix::from_fn(ng, ng, |i, j| s[i] * a[(i, j)] * s[j]);
        let e = crate::blockvec::sym_eig_dense(&GramMatrix::symmetric(b).into_matrix())?;
        if !(e.values[0] > 0.0) {
            return Err(Error::NotPositiveDefinite(format!(
                "dense pencil eigenvalue {:e}",
                e.values[0]
            )));
        }
        let phi = DMatrix::from_fn(ng, ng, |i, j| s[i] * e.vectors[(i, j)]);
        Ok(DenseSpectrum { mu: e.values, phi })
    }

    /// Coefficients of `U` in the eigenbasis, `Phi^T M U`.
    fn coefficients(&self, d: &Discretization, u: &BlockState) -> DMatrix<f64> {
        let mu_u = DMatrix::from_fn(u.rows(), u.cols(), |i, j| d.mass()[i] * u.data()[(i, j)]);
        self.phi.transpose() * mu_u
    }
}

/// `exp(Gt) U0 [I - <U0,U0> + <U0, exp(2Gt) U0>]^{-1/2}`, the solution of the
/// continuous flow up to a right orthogonal factor.
pub fn closed_form_solution(
    spectrum: &DenseSpectrum,
    d: &Discretization,
    u0: &BlockState,
    t: f64,
) -> Result<BlockState> {
    if u0.rows() != spectrum.phi.nrows() {
        return Err(Error::shape(spectrum.phi.nrows(), u0.rows()));
    }
    let c = spectrum.coefficients(d, u0);
    let growth = spectrum.mu.map(|m| (t / m).exp());
    let ec = DMatrix::from_fn(c.nrows(), c.ncols(), |i, j| growth[i] * c[(i, j)]);
    let s0 = gram_l2(d, u0, u0)?;
    let n = u0.cols();
    let bracket = DMatrix::identity(n, n) - s0.matrix() + ec.transpose() * &ec;
    let w = inv_sqrt(&GramMatrix::symmetric(bracket)).map_err(|_| Error::BracketNotSpd { t })?;
    BlockState::new(&spectrum.phi * ec * w.matrix())
}

/// Classical RK4 on `dU/dt = GU - U <GU,U>` with a fixed step near `dt`.
pub fn rk4_integrate(
    d: &Discretization,
    g: &InverseOperator,
    u0: &BlockState,
    t_end: f64,
    dt: f64,
) -> Result<BlockState> {
    if !(dt > 0.0) || !(t_end >= dt) {
        return Err(Error::InvalidArgument(format!(
            "need dt > 0 and t_end >= dt, got dt = {dt}, t_end = {t_end}"
        )));
    }
    let steps = (t_end / dt).round().max(1.0) as usize;
    let h = t_end / steps as f64;
    let rhs = |u: &BlockState| -> Result<BlockState> {
        let gu = g.apply(u)?;
        gradient(d, u, &gu)
    };
    let mut u = u0.clone();
    for _ in 0..steps {
        let k1 = rhs(&u)?;
        let k2 = rhs(&u.add_scaled(0.5 * h, &k1)?)?;
        let k3 = rhs(&u.add_scaled(0.5 * h, &k2)?)?;
        let k4 = rhs(&u.add_scaled(h, &k3)?)?;
        let incr = DMatrix::from_fn(u.rows(), u.cols(), |i, j| {
            (k1.data()[(i, j)] + 2.0 * k2.data()[(i, j)] + 2.0 * k3.data()[(i, j)] + k4.data()[(i, j)])
                * (h / 6.0)
        });
        u = BlockState::new(u.data() + incr).map_err(|_| Error::NonFinite("rk4 integration"))?;
    }
    Ok(u)
}

#[derive(Debug, Clone, PartialEq)]
pub struct RateFit {
    pub series_name: String,
    /// Slope of `ln(series)` per step.
    pub slope_per_step: f64,
    pub intercept: f64,
    pub r_squared: f64,
    /// Inclusive index range of the fitted points.
    pub window: (usize, usize),
}

/// Least-squares fit of `ln(series[i])` against `i` over the last
/// `window_fraction` of the series, truncated at the first value below the
/// roundoff floor.
pub fn fit_exponential_rate(name: &str, series: &[f64], window_fraction: f64) -> Result<RateFit> {
    if !(window_fraction > 0.0 && window_fraction <= 1.0) {
        return Err(Error::InvalidArgument(format!(
            "window fraction must lie in (0, 1], got {window_fraction}"
        )));
    }
    let usable = series
        .iter()
        .position(|&v| !(v >= RATE_FLOOR) || !v.is_finite())
        .unwrap_or(series.len());
    let len = ((usable as f64) * window_fraction).ceil() as usize;
    let start = usable - len.min(usable);
    if len < 5 {
        return Err(Error::InsufficientData { points: len });
    }
    let xs: Vec<f64> = (start..usable).map(|i| i as f64).collect();
    let ys: Vec<f64> = series[start..usable].iter().map(|v| v.ln()).collect();
    let k = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / k;
    let my = ys.iter().sum::<f64>() / k;
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let sst: f64 = ys.iter().map(|y| (y - my).powi(2)).sum();
    let sse: f64 = xs
        .iter()
        .zip(&ys)
        .map(|(x, y)| (y - intercept - slope * x).powi(2))
        .sum();
    let r_squared = if sst <= 1e-300 { 1.0 } else { (1.0 - sse / sst).clamp(0.0, 1.0) };
    Ok(RateFit {
        series_name: name.to_string(),
        slope_per_step: slope,
        intercept,
        r_squared,
        window: (start, usable - 1),
    })
}
