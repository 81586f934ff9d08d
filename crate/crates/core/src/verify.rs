//! Invariant checks run by `qseig verify` on a configured problem.
//!
//! Each check reports the worst measured value of a quantity that must not
//! exceed `limit`. Time steps are pinned at half of the relevant bound.

use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::analysis::{closed_form_solution, energy, rk4_integrate, DenseSpectrum};
use crate::blockvec::{combine, gram_a, gram_l2, subspace_distance_a, BlockState, GramMatrix};
use crate::config::ProblemConfig;
use crate::discretize::{assemble, Discretization};
use crate::error::Result;
use crate::greens::{InverseOperator, Method};
use crate::scheme::{cayley_step, compute_step_bounds, init_state, skew_apply, InitMode, Iterate};

pub const VERIFY_STEPS: usize = 100;
pub const UGU_SAMPLES: usize = 20;
/// Grid size up to which the dense continuous-model check uses the problem as is.
pub const DENSE_CHECK_MAX_NG: usize = 50;
pub const RK4_DT: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq)]
pub struct Check {
    pub name: String,
    /// Worst observed value of the checked quantity.
    pub measured: f64,
    pub limit: f64,
    pub note: String,
}

impl Check {
    fn new(name: &str, measured: f64, limit: f64, note: impl Into<String>) -> Self {
        Check {
            name: name.to_string(),
            measured,
            limit,
            note: note.into(),
        }
    }

    pub fn passed(&self) -> bool {
        self.measured <= self.limit
    }

    pub fn slack(&self) -> f64 {
        self.limit - self.measured
    }
}

fn random_block(seed: u64, rows: usize, cols: usize) -> Result<BlockState> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    BlockState::new(DMatrix::from_fn(rows, cols, |_, _| StandardNormal.sample(&mut rng)))
}

fn lambda_max_of(m: DMatrix<f64>) -> Result<f64> {
    GramMatrix::symmetric(m).lambda_max()
}

fn operator_checks(d: &Discretization, g: &InverseOperator, n: usize, seed: u64) -> Result<Vec<Check>> {
    let a = d.stiffness();
    let mut out = vec![Check::new(
        "stiffness symmetry",
        a.asymmetry(),
        1e-12 * a.norm_inf(),
        "max |A_ij - A_ji|",
    )];

    let u = random_block(seed ^ 0x11, d.ng(), n)?;
    let v = random_block(seed ^ 0x22, d.ng(), n)?;
    let (gu, gv) = (g.apply(&u)?, g.apply(&v)?);
    let lhs = gram_l2(d, &u, &gv)?.into_matrix();
    let rhs = gram_l2(d, &gu, &v)?.into_matrix();
    out.push(Check::new(
        "green self-adjointness",
        (&lhs - &rhs).norm() / lhs.norm().max(1e-300),
        1e-9,
        "relative ||<U,GV> - <GU,V>||_F",
    ));
    let duality = gram_a(d, &gu, &v)?.into_matrix();
    let plain = gram_l2(d, &u, &v)?.into_matrix();
    out.push(Check::new(
        "green duality",
        (&duality - &plain).norm() / plain.norm().max(1e-300),
        1e-9,
        "relative ||a(GU,V) - <U,V>||_F",
    ));

    let w = random_block(seed ^ 0x33, d.ng(), n)?;
    let (av, aw) = (skew_apply(d, &u, &gu, &v)?, skew_apply(d, &u, &gu, &w)?);
    let sum = gram_l2(d, &v, &aw)?.into_matrix() + gram_l2(d, &av, &w)?.into_matrix();
    let scale = gram_l2(d, &v, &aw)?.frobenius().max(1e-300);
    out.push(Check::new(
        "skew operator antisymmetry",
        sum.norm() / scale,
        1e-9,
        "relative ||<V,A_U W> + <A_U V,W>||_F",
    ));

    let lambda1 = d.lambda1_est().ok_or(crate::Error::MissingLambda1)?;
    let (mut low, mut high) = (f64::MIN, f64::MIN);
    for k in 0..UGU_SAMPLES as u64 {
        let u = init_state(d, n, &InitMode::QuasiStiefelScaled { seed: seed.wrapping_add(1000 + k) })?;
        let gu = g.apply(&u)?;
        let p = GramMatrix::symmetric(gram_l2(d, &u, &gu)?.into_matrix());
        let s = gram_l2(d, &u, &u)?;
        low = low.max(1.0 / (2.0 * energy(d, &u)?) - p.lambda_min()?);
        high = high.max(p.lambda_max()? - s.lambda_max()? / lambda1);
    }
    out.push(Check::new(
        "UGU lower bound",
        low,
        1e-9,
        format!("max 1/(2E(U)) - lambda_min(<U,GU>) over {UGU_SAMPLES} states"),
    ));
    out.push(Check::new(
        "UGU upper bound",
        high,
        1e-9,
        format!("max lambda_max(<U,GU>) - lambda_max(<U,U>)/lambda_1 over {UGU_SAMPLES} states"),
    ));
    Ok(out)
}

/// One scheme step spelled out so the intermediate predictor state is visible.
struct Walk {
    drift: f64,
    qs_floor: f64,
    nonexpansion: f64,
    contraction: f64,
    corrector: f64,
    energy_rise: f64,
    orth_final: f64,
}

fn walk(d: &Discretization, g: &InverseOperator, u0: BlockState, tau: f64, steps: usize) -> Result<Walk> {
    let e0 = energy(d, &u0)?;
    let omega = 1.0 - tau / e0;
    let mut it = Iterate::new(g, u0)?;
    let mut s = gram_l2(d, &it.state, &it.state)?;
    let mut e = e0;
    let mut w = Walk {
        drift: 0.0,
        qs_floor: f64::MIN,
        nonexpansion: f64::MIN,
        contraction: f64::MIN,
        corrector: f64::MIN,
        energy_rise: f64::MIN,
        orth_final: s.minus_identity().frobenius(),
    };
    for _ in 0..steps {
        let u_hat = cayley_step(d, &it.state, &it.green, tau)?;
        let g_hat = g.apply(&u_hat)?;
        let s_hat = gram_l2(d, &u_hat, &u_hat)?;
        let push = combine(&g_hat, &(s_hat.minus_identity().matrix() * tau))?;
        let next = Iterate::new(g, u_hat.sub(&push)?)?;
        let s_next = gram_l2(d, &next.state, &next.state)?;
        let e_next = energy(d, &next.state)?;

        w.drift = w.drift.max((s_hat.matrix() - s.matrix()).norm() / s.frobenius());
        w.qs_floor = w.qs_floor.max(1.0 - s_next.lambda_min()?);
        w.nonexpansion = w.nonexpansion.max(s_next.lambda_max()? - s.lambda_max()?);
        let (o2, o2_next) = (s.minus_identity().frobenius().powi(2), s_next.minus_identity().frobenius().powi(2));
        w.contraction = w.contraction.max(o2_next - omega * o2);
        let p_hat = gram_l2(d, &u_hat, &g_hat)?.into_matrix();
        let p_next = gram_l2(d, &next.state, &next.green)?.into_matrix();
        w.corrector = w.corrector.max(lambda_max_of(p_next - p_hat)?);
        w.energy_rise = w.energy_rise.max((e_next - e) / e.abs());
        w.orth_final = s_next.minus_identity().frobenius();

        it = next;
        s = s_next;
        e = e_next;
    }
    Ok(w)
}

fn scheme_checks(d: &Discretization, g: &InverseOperator, n: usize, seed: u64) -> Result<Vec<Check>> {
    let u0 = init_state(d, n, &InitMode::QuasiStiefelScaled { seed })?;
    let b = compute_step_bounds(d, &u0)?;
    let tau = 0.5 * b.tau_contraction;
    let w = walk(d, g, u0.clone(), tau, VERIFY_STEPS)?;
    let at = |what: &str| format!("{what}, tau = {tau:.4e}, {VERIFY_STEPS} steps");
    let mut out = vec![
        Check::new("predictor Gram preservation", w.drift, 1e-9, at("relative ||<U^,U^> - <U,U>||_F")),
        Check::new("quasi-Stiefel preservation", w.qs_floor, 1e-8, at("max 1 - lambda_min(<U_n,U_n>)")),
        Check::new("Gram non-expansion", w.nonexpansion, 1e-10, at("max increase of lambda_max(<U_n,U_n>)")),
        Check::new(
            "orthogonality contraction",
            w.contraction,
            1e-10,
            at("max ||O_(n+1)||^2 - (1 - tau/E(U_0)) ||O_n||^2"),
        ),
        Check::new("corrector monotonicity", w.corrector, 1e-9, at("max lambda_max(<U,GU>_(n+1) - <U^,GU^>)")),
    ];

    let q0 = init_state(d, n, &InitMode::Orthonormal { seed })?;
    let tq = 0.5 * b.tau_quasi_stiefel;
    let wq = walk(d, g, q0, tq, VERIFY_STEPS)?;
    out.push(Check::new(
        "orthonormal start stays orthonormal",
        wq.orth_final.max(wq.qs_floor),
        1e-10,
        format!("||<U_n,U_n> - I||_F, tau = {tq:.4e}, {VERIFY_STEPS} steps"),
    ));

    let te = 0.5 * b.tau_energy;
    let we = walk(d, g, u0, te, VERIFY_STEPS)?;
    out.push(Check::new(
        "monotone energy",
        we.energy_rise,
        1e-10,
        format!("max relative rise of E(U_n), tau = {te:.4e}, {VERIFY_STEPS} steps"),
    ));
    Ok(out)
}

/// The configured problem itself when small enough, otherwise the same box
/// and potential on the finest grid with at most `DENSE_CHECK_MAX_NG` nodes.
pub fn dense_problem(problem: &ProblemConfig) -> Result<Discretization> {
    let mut small = problem.clone();
    let dim = problem.points.len();
    if problem.points.iter().product::<usize>() > DENSE_CHECK_MAX_NG {
        let per_axis = (DENSE_CHECK_MAX_NG as f64).powf(1.0 / dim as f64).floor() as usize;
        small.points = vec![per_axis.max(2); dim];
    }
    assemble(&small.domain()?, &small.grid(), &small.potential_spec()?, small.c_lap, small.sigma)
}

fn continuous_checks(problem: &ProblemConfig, n: usize, seed: u64) -> Result<Vec<Check>> {
    let mut d = dense_problem(problem)?;
    let n = n.min(d.ng() / 2).max(1);
    let g = InverseOperator::prepare(&d, Method::DirectFactorization)?;
    d.estimate_lambda1(&g, 1e-12)?;
    let spectrum = DenseSpectrum::compute(&d)?;
    let u0 = init_state(&d, n, &InitMode::QuasiStiefelScaled { seed })?;
    let e0 = energy(&d, &u0)?;
    let o0 = gram_l2(&d, &u0, &u0)?.minus_identity().frobenius();
    let mut gap = f64::MIN;
    let mut orth = f64::MIN;
    let mut u = u0.clone();
    let mut t_prev = 0.0;
    for t in [0.5, 1.0, 2.0] {
        u = rk4_integrate(&d, &g, &u, t - t_prev, RK4_DT)?;
        t_prev = t;
        let exact = closed_form_solution(&spectrum, &d, &u0, t)?;
        gap = gap.max(subspace_distance_a(&d, &exact, &u)?);
        let o = gram_l2(&d, &exact, &exact)?.minus_identity().frobenius();
        orth = orth.max(o - o0 * (-t / e0).exp());
    }
    let grid = d.grid().points_per_dim().iter().map(|p| p.to_string()).collect::<Vec<_>>().join("x");
    Ok(vec![
        Check::new(
            "closed form matches RK4",
            gap,
            1e-6,
            format!("a-subspace distance at t = 0.5, 1, 2 on a {grid} grid, N = {n}, dt = {RK4_DT}"),
        ),
        Check::new(
            "continuous orthogonality decay",
            orth,
            1e-6,
            format!("max ||O(t)||_F - ||O_0||_F exp(-t/E(U_0)) on a {grid} grid"),
        ),
    ])
}

/// Runs every check. `d` must carry a lambda_1 estimate.
pub fn run_checks(
    problem: &ProblemConfig,
    d: &Discretization,
    g: &InverseOperator,
    n: usize,
    seed: u64,
) -> Result<Vec<Check>> {
    let mut out = operator_checks(d, g, n, seed)?;
    out.extend(scheme_checks(d, g, n, seed)?);
    out.extend(continuous_checks(problem, n, seed)?);
    Ok(out)
}
