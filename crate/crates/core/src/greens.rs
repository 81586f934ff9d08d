//! The inverse operator `G = A^{-1} diag(M)`, applied column by column.

use std::sync::atomic::{AtomicU64, Ordering};

use rayon::prelude::*;

use crate::blockvec::BlockState;
use crate::discretize::Discretization;
use crate::error::{Error, Result};
use crate::sparse::CsrMatrix;

/// Largest grid handled by the direct factorization under [`Method::auto`].
pub const DIRECT_MAX_NG: usize = 200_000;
/// Envelope storage cap (entries) for the direct factorization under [`Method::auto`].
pub const DIRECT_MAX_ENVELOPE: usize = 25_000_000;
pub const DEFAULT_CG_TOL: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Preconditioner {
    None,
    Jacobi,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Method {
    DirectFactorization,
    ConjugateGradient {
        tol: f64,
        max_iter: usize,
        preconditioner: Preconditioner,
    },
}

impl Method {
    pub fn cg_default(ng: usize) -> Method {
        Method::ConjugateGradient {
            tol: DEFAULT_CG_TOL,
            max_iter: (10 * ng).max(1000),
            preconditioner: Preconditioner::Jacobi,
        }
    }

    /// Direct factorization for small grids, Jacobi-preconditioned CG otherwise.
    pub fn auto(d: &Discretization) -> Method {
        let envelope = EnvelopeCholesky::envelope_size(d.stiffness());
        if d.ng() <= DIRECT_MAX_NG && envelope <= DIRECT_MAX_ENVELOPE {
            Method::DirectFactorization
        } else {
            Method::cg_default(d.ng())
        }
    }
}

/// Profile (envelope) Cholesky factor `A = L L^T` in natural node order.
///
/// Row `i` of `L` is stored densely from its first structural nonzero to the
/// diagonal; fill stays inside that envelope.
#[derive(Debug, Clone)]
struct EnvelopeCholesky {
    first: Vec<usize>,
    offset: Vec<usize>,
    values: Vec<f64>,
}

impl EnvelopeCholesky {
    fn first_columns(a: &CsrMatrix) -> Vec<usize> {
        (0..a.dim())
            .map(|i| a.row(i).map(|(j, _)| j).filter(|&j| j <= i).min().unwrap_or(i))
            .collect()
    }

    fn envelope_size(a: &CsrMatrix) -> usize {
        Self::first_columns(a)
            .iter()
            .enumerate()
            .map(|(i, f)| i - f + 1)
            .sum()
    }

    fn factor(a: &CsrMatrix) -> Result<Self> {
        let n = a.dim();
        let first = Self::first_columns(a);
        let mut offset = Vec::with_capacity(n + 1);
        offset.push(0);
        for i in 0..n {
            offset.push(offset[i] + (i - first[i] + 1));
        }
        let mut values = vec![0.0; offset[n]];
        for i in 0..n {
            for (j, v) in a.row(i) {
                if j <= i {
                    values[offset[i] + j - first[i]] = v;
                }
            }
        }

        for i in 0..n {
            let fi = first[i];
            for j in fi..=i {
                let fj = first[j];
                let k0 = fi.max(fj);
                let (head, tail) = values.split_at_mut(offset[i]);
                let row_i = &mut tail[..i - fi + 1];
                let dot: f64 = if j == i {
                    row_i[k0 - fi..j - fi].iter().map(|x| x * x).sum()
                } else {
                    let row_j = &head[offset[j]..offset[j + 1]];
                    row_i[k0 - fi..j - fi]
                        .iter()
                        .zip(&row_j[k0 - fj..j - fj])
                        .map(|(x, y)| x * y)
                        .sum()
                };
                let s = row_i[j - fi] - dot;
                if j < i {
                    let ljj = head[offset[j + 1] - 1];
                    row_i[j - fi] = s / ljj;
                } else {
                    if !(s > 0.0) {
                        return Err(Error::NotPositiveDefinite(format!(
                            "Cholesky pivot {s:e} at row {i}"
                        )));
                    }
                    row_i[i - fi] = s.sqrt();
                }
            }
        }
        Ok(EnvelopeCholesky {
            first,
            offset,
            values,
        })
    }

    fn row(&self, i: usize) -> &[f64] {
        &self.values[self.offset[i]..self.offset[i + 1]]
    }

    /// Solves `L L^T X = B` for `w` right-hand sides stored row-interleaved
    /// (`x[i * w + j]` is row `i` of column `j`).
    fn solve_block_in_place(&self, x: &mut [f64], w: usize) {
        let n = self.first.len();
        debug_assert_eq!(x.len(), n * w);
        let mut acc = vec![0.0; w];
        for i in 0..n {
            let fi = self.first[i];
            let row = self.row(i);
            acc.copy_from_slice(&x[i * w..(i + 1) * w]);
            for (k, l) in (fi..i).zip(row) {
                for (a, y) in acc.iter_mut().zip(&x[k * w..(k + 1) * w]) {
                    *a -= l * y;
                }
            }
            let diag = row[i - fi];
            for (xi, a) in x[i * w..(i + 1) * w].iter_mut().zip(&acc) {
                *xi = a / diag;
            }
        }
        for i in (0..n).rev() {
            let fi = self.first[i];
            let row = self.row(i);
            let diag = row[i - fi];
            for (xi, a) in x[i * w..(i + 1) * w].iter_mut().zip(acc.iter_mut()) {
                *xi /= diag;
                *a = *xi;
            }
            for (k, l) in (fi..i).zip(row) {
                for (y, a) in x[k * w..(k + 1) * w].iter_mut().zip(&acc) {
                    *y -= l * a;
                }
            }
        }
    }
}

#[derive(Debug, Clone)]
enum Backend {
    Direct(EnvelopeCholesky),
    Iterative {
        matrix: CsrMatrix,
        inv_diag: Option<Vec<f64>>,
        tol: f64,
        max_iter: usize,
    },
}

/// Prepared solver for `G` bound to one discretization.
#[derive(Debug)]
pub struct InverseOperator {
    method: Method,
    backend: Backend,
    mass: Vec<f64>,
    solve_count: AtomicU64,
}

impl InverseOperator {
    /// Fails with `NotPositiveDefinite` when the shifted operator is not SPD
    /// (Cholesky breakdown, or non-positive curvature met by a trial CG solve).
    pub fn prepare(d: &Discretization, method: Method) -> Result<Self> {
        let backend = match method {
            Method::DirectFactorization => Backend::Direct(EnvelopeCholesky::factor(d.stiffness())?),
            Method::ConjugateGradient {
                tol,
                max_iter,
                preconditioner,
            } => {
                if !(tol > 0.0 && tol <= 1e-4) {
                    return Err(Error::InvalidArgument(format!(
                        "CG tolerance must lie in (0, 1e-4], got {tol}"
                    )));
                }
                let diag = d.stiffness().diagonal();
                if let Some(i) = diag.iter().position(|&v| !(v > 0.0)) {
                    return Err(Error::NotPositiveDefinite(format!(
                        "non-positive diagonal entry at row {i}"
                    )));
                }
                let backend = Backend::Iterative {
                    matrix: d.stiffness().clone(),
                    inv_diag: match preconditioner {
                        Preconditioner::Jacobi => Some(diag.iter().map(|v| 1.0 / v).collect()),
                        Preconditioner::None => None,
                    },
                    tol,
                    max_iter,
                };
                let mut trial = d.mass().to_vec();
                solve_column(&backend, &mut trial)?;
                backend
            }
        };
        Ok(InverseOperator {
            method,
            backend,
            mass: d.mass().to_vec(),
            solve_count: AtomicU64::new(0),
        })
    }

    pub fn method(&self) -> Method {
        self.method
    }

    /// Cumulative number of scalar (single-column) solves.
    pub fn solve_count(&self) -> u64 {
        self.solve_count.load(Ordering::Relaxed)
    }

    /// `X` with `A x_j = M o u_j` for every column.
    pub fn apply(&self, u: &BlockState) -> Result<BlockState> {
        let ng = self.mass.len();
        if u.rows() != ng {
            return Err(Error::shape(ng, u.rows()));
        }
        let n = u.cols();
        let columns: Vec<Vec<f64>> = match &self.backend {
            Backend::Direct(chol) => {
                // column groups, one per worker; each column sees the same
                // operation sequence for any grouping
                let group = n.div_ceil(rayon::current_num_threads().max(1));
                let starts: Vec<usize> = (0..n).step_by(group).collect();
                let blocks: Vec<Vec<Vec<f64>>> = starts
                    .into_par_iter()
                    .map(|start| {
                        let w = group.min(n - start);
                        let mut x = vec![0.0; ng * w];
                        for j in 0..w {
                            for (i, (v, m)) in u.column(start + j).iter().zip(&self.mass).enumerate() {
                                x[i * w + j] = v * m;
                            }
                        }
                        chol.solve_block_in_place(&mut x, w);
                        (0..w).map(|j| (0..ng).map(|i| x[i * w + j]).collect()).collect()
                    })
                    .collect();
                blocks.into_iter().flatten().collect()
            }
            Backend::Iterative { .. } => (0..n)
                .into_par_iter()
                .map(|j| {
                    let mut x: Vec<f64> = u.column(j).iter().zip(&self.mass).map(|(v, m)| v * m).collect();
                    solve_column(&self.backend, &mut x)?;
                    Ok(x)
                })
                .collect::<Result<_>>()?,
        };
        self.solve_count.fetch_add(n as u64, Ordering::Relaxed);
        BlockState::from_columns(&columns)
    }
}

/// Alias of [`InverseOperator::apply`].
pub fn apply_green(g: &InverseOperator, u: &BlockState) -> Result<BlockState> {
    g.apply(u)
}

fn solve_column(backend: &Backend, rhs: &mut [f64]) -> Result<()> {
    match backend {
        Backend::Direct(chol) => {
            chol.solve_block_in_place(rhs, 1);
            Ok(())
        }
        Backend::Iterative {
            matrix,
            inv_diag,
            tol,
            max_iter,
        } => {
            let x = conjugate_gradient(matrix, rhs, inv_diag.as_deref(), *tol, *max_iter)?;
            rhs.copy_from_slice(&x);
            Ok(())
        }
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn conjugate_gradient(
    a: &CsrMatrix,
    b: &[f64],
    inv_diag: Option<&[f64]>,
    tol: f64,
    max_iter: usize,
) -> Result<Vec<f64>> {
    let n = b.len();
    let mut x = vec![0.0; n];
    let b_norm = dot(b, b).sqrt();
    if b_norm == 0.0 {
        return Ok(x);
    }
    let precondition = |r: &[f64]| -> Vec<f64> {
        match inv_diag {
            Some(d) => r.iter().zip(d).map(|(r, d)| r * d).collect(),
            None => r.to_vec(),
        }
    };
    let mut r = b.to_vec();
    let mut z = precondition(&r);
    let mut p = z.clone();
    let mut rz = dot(&r, &z);
    let mut ap = vec![0.0; n];
    for _ in 0..max_iter {
        a.mul_vec_into(&p, &mut ap);
        let curvature = dot(&p, &ap);
        if !(curvature > 0.0) {
            return Err(Error::NotPositiveDefinite(format!(
                "CG met curvature {curvature:e}"
            )));
        }
        let alpha = rz / curvature;
        for i in 0..n {
            x[i] += alpha * p[i];
            r[i] -= alpha * ap[i];
        }
        if dot(&r, &r).sqrt() <= tol * b_norm {
            return Ok(x);
        }
        z = precondition(&r);
        let rz_next = dot(&r, &z);
        let beta = rz_next / rz;
        rz = rz_next;
        for i in 0..n {
            p[i] = z[i] + beta * p[i];
        }
    }
    Err(Error::NoConvergence {
        what: "conjugate gradient",
        iterations: max_iter,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::blockvec::{gram_a, gram_l2};
    use crate::discretize::{assemble, DomainSpec, GridSpec, PotentialSpec};
    use nalgebra::{DMatrix, DVector};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn harmonic_2d(points: usize) -> Discretization {
        assemble(
            &DomainSpec::cube(2, -5.5, 5.5).unwrap(),
            &GridSpec::uniform(2, points),
            &PotentialSpec::Harmonic { coeff: 0.5 },
            0.5,
            0.0,
        )
        .unwrap()
    }

    fn random_block(seed: u64, rows: usize, cols: usize) -> BlockState {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        BlockState::new(DMatrix::from_fn(rows, cols, |_, _| StandardNormal.sample(&mut rng))).unwrap()
    }

    fn cg() -> Method {
        Method::ConjugateGradient {
            tol: 1e-12,
            max_iter: 10_000,
            preconditioner: Preconditioner::Jacobi,
        }
    }

    fn relative_residual(d: &Discretization, u: &BlockState, x: &BlockState) -> f64 {
        let ax = d.apply_stiffness(x).unwrap();
        let mu = d.apply_mass(u).unwrap();
        (0..u.cols())
            .map(|j| {
                let r: f64 = ax.column(j).iter().zip(mu.column(j)).map(|(a, b)| (a - b).powi(2)).sum();
                let n: f64 = mu.column(j).iter().map(|b| b * b).sum();
                (r / n).sqrt()
            })
            .fold(0.0, f64::max)
    }

    #[test]
    fn direct_and_cg_meet_residual_tolerance() {
        let d = harmonic_2d(15);
        let u = random_block(1, d.ng(), 3);
        for method in [Method::DirectFactorization, cg()] {
            let g = InverseOperator::prepare(&d, method).unwrap();
            let x = g.apply(&u).unwrap();
            assert!(relative_residual(&d, &u, &x) <= 1e-11, "{method:?}");
            assert_eq!(g.solve_count(), 3);
        }
    }

    #[test]
    fn envelope_factor_matches_dense_cholesky() {
        let d = harmonic_2d(6);
        let chol = EnvelopeCholesky::factor(d.stiffness()).unwrap();
        let dense = d.stiffness().to_dense().cholesky().unwrap().l();
        for i in 0..d.ng() {
            for j in 0..=i {
                let stored = if j >= chol.first[i] { chol.row(i)[j - chol.first[i]] } else { 0.0 };
                assert!((stored - dense[(i, j)]).abs() < 1e-12 * dense[(i, i)]);
            }
        }
    }

    #[test]
    fn eigenvector_is_scaled_by_inverse_eigenvalue() {
        let d = harmonic_2d(9);
        let s = DVector::from_iterator(d.ng(), d.mass().iter().map(|m| 1.0 / m.sqrt()));
        let sa = DMatrix::from_diagonal(&s) * d.stiffness().to_dense() * DMatrix::from_diagonal(&s);
        let eig = sa.symmetric_eigen();
        let k = eig.eigenvalues.imin();
        let mu = eig.eigenvalues[k];
        let v: Vec<f64> = eig.eigenvectors.column(k).iter().zip(s.iter()).map(|(x, s)| x * s).collect();
        let u = BlockState::from_columns(&[v]).unwrap();
        for method in [Method::DirectFactorization, cg()] {
            let g = InverseOperator::prepare(&d, method).unwrap();
            let gu = g.apply(&u).unwrap();
            let scale = u.as_slice().iter().map(|x| x.abs()).fold(0.0, f64::max);
            for (a, b) in gu.as_slice().iter().zip(u.as_slice()) {
                assert!((a - b / mu).abs() <= 1e-10 * scale / mu);
            }
        }
    }

    #[test]
    fn zero_maps_to_zero() {
        let d = harmonic_2d(5);
        let z = BlockState::zeros(d.ng(), 2);
        for method in [Method::DirectFactorization, cg()] {
            let g = InverseOperator::prepare(&d, method).unwrap();
            assert_eq!(g.apply(&z).unwrap(), z);
        }
    }

    #[test]
    fn self_adjoint_and_dual_to_energy_pairing() {
        let d = harmonic_2d(12);
        let g = InverseOperator::prepare(&d, Method::DirectFactorization).unwrap();
        let u = random_block(2, d.ng(), 4);
        let v = random_block(3, d.ng(), 4);
        let gu = g.apply(&u).unwrap();
        let gv = g.apply(&v).unwrap();
        let lhs = gram_l2(&d, &gu, &v).unwrap();
        let rhs = gram_l2(&d, &u, &gv).unwrap();
        assert!((lhs.matrix() - rhs.matrix()).norm() <= 1e-9 * lhs.frobenius());
        let dual = gram_a(&d, &gu, &v).unwrap();
        let plain = gram_l2(&d, &u, &v).unwrap();
        assert!((dual.matrix() - plain.matrix()).norm() <= 1e-9 * plain.frobenius());
    }

    #[test]
    fn indefinite_coulomb_requires_shift() {
        let cube = DomainSpec::cube(3, -10.0, 10.0).unwrap();
        let coulomb = PotentialSpec::SoftCoulomb {
            charge: 1.0,
            softening: 0.5,
        };
        let d0 = assemble(&cube, &GridSpec::uniform(3, 9), &coulomb, 0.5, 0.0).unwrap();
        // dense oracle: the unshifted pencil has a negative eigenvalue
        let s = DVector::from_iterator(d0.ng(), d0.mass().iter().map(|m| 1.0 / m.sqrt()));
        let sa = DMatrix::from_diagonal(&s) * d0.stiffness().to_dense() * DMatrix::from_diagonal(&s);
        let lowest = sa.symmetric_eigen().eigenvalues.min();
        assert!(lowest < -0.3 && lowest > -1.5, "{lowest}");
        for method in [Method::DirectFactorization, cg()] {
            assert!(matches!(
                InverseOperator::prepare(&d0, method),
                Err(Error::NotPositiveDefinite(_))
            ));
        }
        let d1 = d0.with_sigma(2.0).unwrap();
        assert!(lowest + 2.0 > 0.0);
        for method in [Method::DirectFactorization, cg()] {
            InverseOperator::prepare(&d1, method).unwrap();
        }
    }

    #[test]
    fn cg_tolerance_range_is_enforced() {
        let d = harmonic_2d(5);
        let bad = Method::ConjugateGradient {
            tol: 1e-3,
            max_iter: 100,
            preconditioner: Preconditioner::None,
        };
        assert!(matches!(InverseOperator::prepare(&d, bad), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn block_solve_is_independent_of_grouping() {
        let d = harmonic_2d(11);
        let u = random_block(4, d.ng(), 5);
        let g = InverseOperator::prepare(&d, Method::DirectFactorization).unwrap();
        let together = g.apply(&u).unwrap();
        for j in 0..5 {
            let single = g.apply(&u.columns_range(j, 1).unwrap()).unwrap();
            assert_eq!(single.column(0), together.column(j));
        }
    }

    #[test]
    fn auto_prefers_direct_on_small_grids() {
        assert_eq!(Method::auto(&harmonic_2d(20)), Method::DirectFactorization);
    }
}
