//! Finite-difference assembly of `-c_lap * Laplacian + V + sigma` on a box
//! with homogeneous Dirichlet conditions.
//!
//! Nodes are the interior points of a uniform tensor grid, numbered with the
//! first axis varying fastest. The operator is stored weighted by the cell
//! volume so that `C^T A C` approximates `a(u,u) + sigma (u,u)` and
//! `C^T diag(M) C` approximates `(u,u)`.

use crate::blockvec::BlockState;
use crate::error::{Error, Result};
use crate::greens::InverseOperator;
use crate::sparse::CsrMatrix;

const LAMBDA1_MAX_ITER: usize = 5000;

#[derive(Debug, Clone, PartialEq)]
pub struct DomainSpec {
    lower: Vec<f64>,
    upper: Vec<f64>,
}

impl DomainSpec {
    pub fn new(lower: Vec<f64>, upper: Vec<f64>) -> Result<Self> {
        if lower.len() != upper.len() || !(1..=3).contains(&lower.len()) {
            return Err(Error::InvalidDomain(format!(
                "need 1-3 matching corner coordinates, got {} and {}",
                lower.len(),
                upper.len()
            )));
        }
        for (k, (lo, hi)) in lower.iter().zip(&upper).enumerate() {
            if !(lo.is_finite() && hi.is_finite() && lo < hi) {
                return Err(Error::InvalidDomain(format!("axis {k}: [{lo}, {hi}]")));
            }
        }
        Ok(DomainSpec { lower, upper })
    }

    /// Cube `(lo, hi)^dim`.
    pub fn cube(dim: usize, lo: f64, hi: f64) -> Result<Self> {
        Self::new(vec![lo; dim], vec![hi; dim])
    }

    pub fn dim(&self) -> usize {
        self.lower.len()
    }

    pub fn lower(&self) -> &[f64] {
        &self.lower
    }

    pub fn upper(&self) -> &[f64] {
        &self.upper
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GridSpec {
    points_per_dim: Vec<usize>,
}

impl GridSpec {
    pub fn new(points_per_dim: Vec<usize>) -> Self {
        GridSpec { points_per_dim }
    }

    pub fn uniform(dim: usize, points: usize) -> Self {
        GridSpec {
            points_per_dim: vec![points; dim],
        }
    }

    pub fn points_per_dim(&self) -> &[usize] {
        &self.points_per_dim
    }

    pub fn total(&self) -> usize {
        self.points_per_dim.iter().product()
    }

    pub fn spacing(&self, domain: &DomainSpec) -> Vec<f64> {
        self.points_per_dim
            .iter()
            .enumerate()
            .map(|(k, &n)| (domain.upper[k] - domain.lower[k]) / (n as f64 + 1.0))
            .collect()
    }

    fn validate(&self, domain: &DomainSpec) -> Result<()> {
        if self.points_per_dim.len() != domain.dim() {
            return Err(Error::shape(domain.dim(), self.points_per_dim.len()));
        }
        let total = self.total();
        if total < 4 || self.points_per_dim.iter().any(|&n| n < 2) {
            return Err(Error::GridTooSmall { points: total });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum PotentialSpec {
    Zero,
    /// `V(x) = coeff * |x|^2`
    Harmonic { coeff: f64 },
    /// `V(x) = -charge / sqrt(|x|^2 + softening^2)`
    SoftCoulomb { charge: f64, softening: f64 },
}

impl PotentialSpec {
    pub fn eval(&self, x: &[f64]) -> f64 {
        let r2: f64 = x.iter().map(|v| v * v).sum();
        match *self {
            PotentialSpec::Zero => 0.0,
            PotentialSpec::Harmonic { coeff } => coeff * r2,
            PotentialSpec::SoftCoulomb { charge, softening } => {
                -charge / (r2 + softening * softening).sqrt()
            }
        }
    }

    fn validate(&self) -> Result<()> {
        match *self {
            PotentialSpec::Zero => Ok(()),
            PotentialSpec::Harmonic { coeff } if coeff > 0.0 && coeff.is_finite() => Ok(()),
            PotentialSpec::Harmonic { coeff } => Err(Error::InvalidArgument(format!(
                "harmonic coefficient must be positive, got {coeff}"
            ))),
            PotentialSpec::SoftCoulomb { charge, softening }
                if charge.is_finite() && softening >= 0.0 && softening.is_finite() =>
            {
                Ok(())
            }
            PotentialSpec::SoftCoulomb { softening, .. } => Err(Error::InvalidArgument(format!(
                "soft-Coulomb softening must be >= 0, got {softening}"
            ))),
        }
    }
}

/// Assembled operator pair plus the metadata it was built from.
///
/// Immutable after assembly apart from the cached `lambda1_est`.
#[derive(Debug, Clone)]
pub struct Discretization {
    stiffness: CsrMatrix,
    mass: Vec<f64>,
    sigma: f64,
    c_lap: f64,
    grid: GridSpec,
    domain: DomainSpec,
    potential: PotentialSpec,
    lambda1_est: Option<f64>,
}

impl Discretization {
    pub fn ng(&self) -> usize {
        self.mass.len()
    }

    pub fn stiffness(&self) -> &CsrMatrix {
        &self.stiffness
    }

    pub fn mass(&self) -> &[f64] {
        &self.mass
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }

    pub fn c_lap(&self) -> f64 {
        self.c_lap
    }

    pub fn grid(&self) -> &GridSpec {
        &self.grid
    }

    pub fn domain(&self) -> &DomainSpec {
        &self.domain
    }

    pub fn potential(&self) -> &PotentialSpec {
        &self.potential
    }

    /// Smallest eigenvalue of the shifted pencil `(A, M)`, once estimated.
    pub fn lambda1_est(&self) -> Option<f64> {
        self.lambda1_est
    }

    pub fn set_lambda1_est(&mut self, value: f64) {
        self.lambda1_est = Some(value);
    }

    /// Coordinates of node `idx`.
    pub fn node(&self, idx: usize) -> Vec<f64> {
        let h = self.grid.spacing(&self.domain);
        let mut rem = idx;
        self.grid
            .points_per_dim
            .iter()
            .enumerate()
            .map(|(k, &n)| {
                let i = rem % n;
                rem /= n;
                self.domain.lower[k] + (i as f64 + 1.0) * h[k]
            })
            .collect()
    }

    fn check(&self, u: &BlockState) -> Result<()> {
        if u.rows() != self.ng() {
            return Err(Error::shape(self.ng(), u.rows()));
        }
        Ok(())
    }

    /// `A * C_U`, column by column.
    pub fn apply_stiffness(&self, u: &BlockState) -> Result<BlockState> {
        self.check(u)?;
        let ng = self.ng();
        let mut out = vec![0.0; ng * u.cols()];
        for (j, dst) in out.chunks_mut(ng).enumerate() {
            self.stiffness.mul_vec_into(u.column(j), dst);
        }
        BlockState::from_column_slice(ng, u.cols(), &out)
    }

    /// `diag(M) * C_U`.
    pub fn apply_mass(&self, u: &BlockState) -> Result<BlockState> {
        self.check(u)?;
        let ng = self.ng();
        let out: Vec<f64> = u
            .as_slice()
            .iter()
            .enumerate()
            .map(|(k, v)| v * self.mass[k % ng])
            .collect();
        BlockState::from_column_slice(ng, u.cols(), &out)
    }

    /// Smallest eigenvalue of the shifted pencil by inverse power iteration
    /// with `M`-normalization; caches the value in `lambda1_est`.
    ///
    /// Stops once successive Rayleigh quotients differ by less than
    /// `tol * |value|`.
    pub fn estimate_lambda1(&mut self, green: &InverseOperator, tol: f64) -> Result<f64> {
        if !(tol > 0.0) {
            return Err(Error::InvalidArgument(format!("tol must be positive, got {tol}")));
        }
        let ng = self.ng();
        let mut x = BlockState::new(nalgebra::DMatrix::from_element(ng, 1, 1.0))?;
        let mut previous: Option<f64> = None;
        for _ in 0..LAMBDA1_MAX_ITER {
            x = green.apply(&x)?;
            let mx2: f64 = x
                .column(0)
                .iter()
                .zip(&self.mass)
                .map(|(v, m)| m * v * v)
                .sum();
            x = x.scaled(1.0 / mx2.sqrt())?;
            let ax = self.stiffness.mul_vec(x.column(0));
            let rho: f64 = ax.iter().zip(x.column(0)).map(|(a, b)| a * b).sum();
            if let Some(prev) = previous {
                if (rho - prev).abs() < tol * rho.abs() {
                    self.lambda1_est = Some(rho);
                    return Ok(rho);
                }
            }
            previous = Some(rho);
        }
        Err(Error::NoConvergence {
            what: "lambda_1 inverse power iteration",
            iterations: LAMBDA1_MAX_ITER,
        })
    }
}

/// Builds `A = c_lap * L_h + diag(V * M) + sigma * diag(M)` and the diagonal
/// mass `M_j = prod_k h_k`.
pub fn assemble(
    domain: &DomainSpec,
    grid: &GridSpec,
    potential: &PotentialSpec,
    c_lap: f64,
    sigma: f64,
) -> Result<Discretization> {
    grid.validate(domain)?;
    potential.validate()?;
    if !(c_lap > 0.0 && c_lap.is_finite()) {
        return Err(Error::InvalidArgument(format!("c_lap must be positive, got {c_lap}")));
    }
    if !(sigma >= 0.0 && sigma.is_finite()) {
        return Err(Error::InvalidArgument(format!("sigma must be >= 0, got {sigma}")));
    }

    let dims = grid.points_per_dim().to_vec();
    let h = grid.spacing(domain);
    let cell: f64 = h.iter().product();
    let ng = grid.total();
    let mut strides = vec![1usize; dims.len()];
    for k in 1..dims.len() {
        strides[k] = strides[k - 1] * dims[k - 1];
    }

    let mut partial = Discretization {
        stiffness: CsrMatrix::from_rows(Vec::new()),
        mass: vec![cell; ng],
        sigma,
        c_lap,
        grid: grid.clone(),
        domain: domain.clone(),
        potential: *potential,
        lambda1_est: None,
    };

    let mut rows = Vec::with_capacity(ng);
    for idx in 0..ng {
        let x = partial.node(idx);
        if let PotentialSpec::SoftCoulomb { softening, .. } = potential {
            if *softening == 0.0 && x.iter().map(|v| v * v).sum::<f64>().sqrt() < 1e-12 {
                return Err(Error::SingularPotential { node: idx });
            }
        }
        let mut row = Vec::with_capacity(2 * dims.len() + 1);
        let mut diag = potential.eval(&x) * cell + sigma * cell;
        let mut rem = idx;
        for k in 0..dims.len() {
            let i = rem % dims[k];
            rem /= dims[k];
            let coupling = c_lap * cell / (h[k] * h[k]);
            diag += 2.0 * coupling;
            if i > 0 {
                row.push((idx - strides[k], -coupling));
            }
            if i + 1 < dims[k] {
                row.push((idx + strides[k], -coupling));
            }
        }
        row.push((idx, diag));
        rows.push(row);
    }
    partial.stiffness = CsrMatrix::from_rows(rows);
    Ok(partial)
}

impl Discretization {
    /// Same operator with a different spectral shift.
    pub fn with_sigma(&self, sigma: f64) -> Result<Discretization> {
        if !(sigma >= 0.0 && sigma.is_finite()) {
            return Err(Error::InvalidArgument(format!("sigma must be >= 0, got {sigma}")));
        }
        let mut out = self.clone();
        let delta: Vec<f64> = self.mass.iter().map(|m| (sigma - self.sigma) * m).collect();
        out.stiffness.add_to_diagonal(&delta);
        out.sigma = sigma;
        out.lambda1_est = None;
        Ok(out)
    }
}
