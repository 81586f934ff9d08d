//! Block states (N-tuples of grid functions), their Gram matrices under the
//! L² and energy pairings, and the small dense symmetric linear algebra used
//! on those Gram matrices.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::discretize::Discretization;
use crate::error::{Error, Result};

const JACOBI_MAX_SWEEPS: usize = 64;

/// Dense `Ng x N` coefficient matrix; column `j` holds the nodal values of `u_j`.
///
/// Every constructor rejects NaN/Inf entries.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockState {
    data: DMatrix<f64>,
}

impl BlockState {
    pub fn new(data: DMatrix<f64>) -> Result<Self> {
        if data.nrows() == 0 || data.ncols() == 0 {
            return Err(Error::InvalidArgument("block state must be non-empty".into()));
        }
        if !data.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite("block state"));
        }
        Ok(BlockState { data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        BlockState {
            data: DMatrix::zeros(rows, cols),
        }
    }

    /// Column-major constructor.
    pub fn from_column_slice(rows: usize, cols: usize, values: &[f64]) -> Result<Self> {
        if values.len() != rows * cols {
            return Err(Error::shape(rows * cols, values.len()));
        }
        Self::new(DMatrix::from_column_slice(rows, cols, values))
    }

    pub fn from_columns(columns: &[Vec<f64>]) -> Result<Self> {
        let cols = columns.len();
        let rows = columns.first().map_or(0, Vec::len);
        if columns.iter().any(|c| c.len() != rows) {
            return Err(Error::InvalidArgument("ragged columns".into()));
        }
        let flat: Vec<f64> = columns.iter().flatten().copied().collect();
        Self::from_column_slice(rows, cols, &flat)
    }

    /// Number of grid values per column (`Ng`).
    pub fn rows(&self) -> usize {
        self.data.nrows()
    }

    /// Number of grid functions (`N`).
    pub fn cols(&self) -> usize {
        self.data.ncols()
    }

    pub fn data(&self) -> &DMatrix<f64> {
        &self.data
    }

    pub fn into_matrix(self) -> DMatrix<f64> {
        self.data
    }

    pub fn column(&self, j: usize) -> &[f64] {
        let ng = self.rows();
        &self.data.as_slice()[j * ng..(j + 1) * ng]
    }

    pub fn as_slice(&self) -> &[f64] {
        self.data.as_slice()
    }

    pub fn scaled(&self, c: f64) -> Result<Self> {
        Self::new(&self.data * c)
    }

    /// `self + c * other`
    pub fn add_scaled(&self, c: f64, other: &BlockState) -> Result<Self> {
        same_shape(self, other)?;
        Self::new(&self.data + &other.data * c)
    }

    pub fn sub(&self, other: &BlockState) -> Result<Self> {
        self.add_scaled(-1.0, other)
    }

    /// Horizontal concatenation `[self, other]`.
    pub fn hstack(&self, other: &BlockState) -> Result<Self> {
        if self.rows() != other.rows() {
            return Err(Error::shape(self.rows(), other.rows()));
        }
        let mut m = DMatrix::zeros(self.rows(), self.cols() + other.cols());
        m.columns_mut(0, self.cols()).copy_from(&self.data);
        m.columns_mut(self.cols(), other.cols()).copy_from(&other.data);
        Ok(BlockState { data: m })
    }

    pub fn columns_range(&self, start: usize, count: usize) -> Result<Self> {
        if start + count > self.cols() || count == 0 {
            return Err(Error::shape(self.cols(), start + count));
        }
        Ok(BlockState {
            data: self.data.columns(start, count).into_owned(),
        })
    }
}

fn same_shape(u: &BlockState, v: &BlockState) -> Result<()> {
    if u.data.shape() != v.data.shape() {
        return Err(Error::shape(
            format!("{:?}", u.data.shape()),
            format!("{:?}", v.data.shape()),
        ));
    }
    Ok(())
}

/// Small dense inner-product matrix such as `<U,V>`, `<U,V>_a` or `<U,GU>`.
///
/// Self-pairings are symmetrized on construction; cross pairings keep their
/// raw entries.
#[derive(Debug, Clone, PartialEq)]
pub struct GramMatrix {
    data: DMatrix<f64>,
}

impl GramMatrix {
    pub fn symmetric(m: DMatrix<f64>) -> Self {
        let t = m.transpose();
        GramMatrix {
            data: (m + t) * 0.5,
        }
    }

    pub fn general(m: DMatrix<f64>) -> Self {
        GramMatrix { data: m }
    }

    pub fn identity(n: usize) -> Self {
        GramMatrix {
            data: DMatrix::identity(n, n),
        }
    }

    pub fn dim(&self) -> usize {
        self.data.nrows()
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.data
    }

    pub fn into_matrix(self) -> DMatrix<f64> {
        self.data
    }

    pub fn trace(&self) -> f64 {
        self.data.trace()
    }

    pub fn frobenius(&self) -> f64 {
        self.data.norm()
    }

    pub fn transpose(&self) -> Self {
        GramMatrix {
            data: self.data.transpose(),
        }
    }

    /// `self - I`
    pub fn minus_identity(&self) -> Self {
        let n = self.dim();
        GramMatrix {
            data: &self.data - DMatrix::<f64>::identity(n, n),
        }
    }

    pub fn lambda_min(&self) -> Result<f64> {
        Ok(sym_eig(self)?.values[0])
    }

    pub fn lambda_max(&self) -> Result<f64> {
        let e = sym_eig(self)?;
        Ok(e.values[e.values.len() - 1])
    }
}

fn check_rows(d: &Discretization, u: &BlockState) -> Result<()> {
    if u.rows() != d.ng() {
        return Err(Error::shape(d.ng(), u.rows()));
    }
    Ok(())
}

/// Weighted column inner products `sum_k w_k x_ki y_kj`, each entry reduced
/// in index order so the result does not depend on the thread count.
fn weighted_cross(x: &BlockState, y: &BlockState, weights: Option<&[f64]>) -> DMatrix<f64> {
    let (p, q) = (x.cols(), y.cols());
    let entries: Vec<f64> = (0..p * q)
        .into_par_iter()
        .map(|idx| {
            let (i, j) = (idx % p, idx / p);
            let (xi, yj) = (x.column(i), y.column(j));
            match weights {
                Some(w) => xi
                    .iter()
                    .zip(yj)
                    .zip(w)
                    .fold(0.0, |acc, ((a, b), m)| acc + m * (a * b)),
                None => xi.iter().zip(yj).fold(0.0, |acc, (a, b)| acc + a * b),
            }
        })
        .collect();
    DMatrix::from_vec(p, q, entries)
}

/// `<U,V> = C_U^T diag(M) C_V`. Symmetrized when `u` and `v` are the same object.
pub fn gram_l2(d: &Discretization, u: &BlockState, v: &BlockState) -> Result<GramMatrix> {
    check_rows(d, u)?;
    check_rows(d, v)?;
    let m = weighted_cross(u, v, Some(d.mass()));
    Ok(if std::ptr::eq(u, v) {
        GramMatrix::symmetric(m)
    } else {
        GramMatrix::general(m)
    })
}

/// `<U,V>_a = C_U^T A C_V`.
pub fn gram_a(d: &Discretization, u: &BlockState, v: &BlockState) -> Result<GramMatrix> {
    check_rows(d, u)?;
    check_rows(d, v)?;
    let av = d.apply_stiffness(v)?;
    let m = weighted_cross(u, &av, None);
    Ok(if std::ptr::eq(u, v) {
        GramMatrix::symmetric(m)
    } else {
        GramMatrix::general(m)
    })
}

/// `C_U * coeff`.
pub fn combine(u: &BlockState, coeff: &DMatrix<f64>) -> Result<BlockState> {
    if u.cols() != coeff.nrows() {
        return Err(Error::shape(u.cols(), coeff.nrows()));
    }
    BlockState::new(u.data() * coeff)
}

/// Eigendecomposition of a small symmetric matrix.
#[derive(Debug, Clone)]
pub struct SymEig {
    /// Ascending.
    pub values: DVector<f64>,
    /// Orthogonal; column `k` pairs with `values[k]`, largest-magnitude entry positive.
    pub vectors: DMatrix<f64>,
}

impl SymEig {
    pub fn reconstruct(&self) -> DMatrix<f64> {
        &self.vectors * DMatrix::from_diagonal(&self.values) * self.vectors.transpose()
    }
}

/// Cyclic Jacobi eigensolver for the small symmetric matrices of the scheme.
pub fn sym_eig(s: &GramMatrix) -> Result<SymEig> {
    sym_eig_dense(s.matrix())
}

pub(crate) fn sym_eig_dense(s: &DMatrix<f64>) -> Result<SymEig> {
    let n = s.nrows();
    if n != s.ncols() || n == 0 {
        return Err(Error::shape("square non-empty", format!("{:?}", s.shape())));
    }
    if !s.iter().all(|v| v.is_finite()) {
        return Err(Error::NonFinite("sym_eig input"));
    }
    let mut a = (s + s.transpose()) * 0.5;
    let mut v = DMatrix::<f64>::identity(n, n);
    let scale = a.norm();

    let mut converged = false;
    for _ in 0..JACOBI_MAX_SWEEPS {
        let mut off = 0.0;
        for q in 0..n {
            for p in 0..q {
                off += a[(p, q)] * a[(p, q)];
            }
        }
        if off == 0.0 || off.sqrt() <= 1e-3 * f64::EPSILON * scale {
            converged = true;
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = a[(p, q)];
                if apq == 0.0 {
                    continue;
                }
                let theta = (a[(q, q)] - a[(p, p)]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let sn = t * c;
                for k in 0..n {
                    let akp = a[(k, p)];
                    let akq = a[(k, q)];
                    a[(k, p)] = c * akp - sn * akq;
                    a[(k, q)] = sn * akp + c * akq;
                }
                for k in 0..n {
                    let apk = a[(p, k)];
                    let aqk = a[(q, k)];
                    a[(p, k)] = c * apk - sn * aqk;
                    a[(q, k)] = sn * apk + c * aqk;
                }
                for k in 0..n {
                    let vkp = v[(k, p)];
                    let vkq = v[(k, q)];
                    v[(k, p)] = c * vkp - sn * vkq;
                    v[(k, q)] = sn * vkp + c * vkq;
                }
                a[(p, q)] = 0.0;
                a[(q, p)] = 0.0;
            }
        }
    }
    if !converged {
        return Err(Error::NoConvergence {
            what: "Jacobi eigensolver",
            iterations: JACOBI_MAX_SWEEPS,
        });
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| a[(i, i)].total_cmp(&a[(j, j)]).then(i.cmp(&j)));
    let values = DVector::from_iterator(n, order.iter().map(|&i| a[(i, i)]));
    let mut vectors = DMatrix::zeros(n, n);
    for (dst, &src) in order.iter().enumerate() {
        let mut col = v.column(src).into_owned();
        let pivot = col
            .iter()
            .copied()
            .fold(0.0f64, |best, x| if x.abs() > best.abs() { x } else { best });
        if pivot < 0.0 {
            col *= -1.0;
        }
        vectors.set_column(dst, &col);
    }
    Ok(SymEig { values, vectors })
}

/// `S^{-1/2}` for symmetric positive definite `S`.
pub fn inv_sqrt(s: &GramMatrix) -> Result<GramMatrix> {
    let e = sym_eig(s)?;
    let lmin = e.values[0];
    let lmax = e.values[e.values.len() - 1];
    if !(lmin > 0.0) || lmin <= 1e-14 * lmax {
        return Err(Error::NotPositiveDefinite(format!(
            "inverse square root: lambda_min = {lmin:e}, lambda_max = {lmax:e}"
        )));
    }
    let d = e.values.map(|x| 1.0 / x.sqrt());
    let m = &e.vectors * DMatrix::from_diagonal(&d) * e.vectors.transpose();
    Ok(GramMatrix::symmetric(m))
}

/// `min_{Q orthogonal} ||U - V Q||_a`.
///
/// The minimizer is the polar factor of `<V,U>_a`; the distance is evaluated
/// directly at that rotation rather than through the nuclear-norm identity,
/// which loses half the digits to cancellation near zero.
pub fn subspace_distance_a(d: &Discretization, u: &BlockState, v: &BlockState) -> Result<f64> {
    same_shape(u, v)?;
    let q = procrustes_rotation(gram_a(d, v, u)?.matrix());
    let diff = u.sub(&combine(v, &q)?)?;
    Ok(gram_a(d, &diff, &diff)?.trace().max(0.0).sqrt())
}

/// Orthogonal `Q` maximizing `tr(Q^T c)`.
pub(crate) fn procrustes_rotation(c: &DMatrix<f64>) -> DMatrix<f64> {
    let svd = c.clone().svd(true, true);
    let (p, rt) = (svd.u.expect("u requested"), svd.v_t.expect("v_t requested"));
    p * rt
}

/// Sum of singular values.
pub fn nuclear_norm(c: &DMatrix<f64>) -> f64 {
    c.clone().svd(false, false).singular_values.sum()
}
