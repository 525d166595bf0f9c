//! Exact linear-part machinery for the Ornstein–Uhlenbeck semigroup.
//!
//! Everything here is a function of the symmetric operator `A` alone (the
//! noise covariance is fixed to `sigma^2 * I`, which commutes with `A`), so
//! every matrix is assembled in the eigenbasis of `A` from scalar functions
//! of its eigenvalues: `exp(t a)`, `sigma^2 (1 - exp(2 t a)) / (-2 a)` and
//! so on. Diagonal operators skip the basis change entirely.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{Error, Result};
use crate::grid::TimeGrid;

const SYMMETRY_TOL: f64 = 1e-12;
const EIGEN_EPS: f64 = 1e-14;
const EIGEN_MAX_ITER: usize = 10_000;

#[derive(Debug, Clone, PartialEq)]
enum Repr {
    Diagonal(Vec<f64>),
    Dense {
        matrix: DMatrix<f64>,
        eigenvalues: Vec<f64>,
        eigenvectors: DMatrix<f64>,
    },
}

/// A symmetric, strictly negative definite `d x d` operator.
///
/// Dense operators are eigendecomposed once at construction and the basis is
/// reused for every matrix function evaluated afterwards.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearOperator {
    repr: Repr,
}

impl LinearOperator {
    pub fn diagonal(entries: Vec<f64>) -> Result<Self> {
        if entries.is_empty() {
            return Err(Error::invalid("operator dimension must be positive"));
        }
        if let Some(a) = entries.iter().find(|a| !(a.is_finite() && **a < 0.0)) {
            return Err(Error::IllFormedOperator(format!(
                "strictly negative definite (diagonal entry {a})"
            )));
        }
        Ok(Self {
            repr: Repr::Diagonal(entries),
        })
    }

    /// Dense symmetric operator. The matrix is kept dense even if it happens
    /// to be diagonal; use [`LinearOperator::from_matrix`] to detect that.
    pub fn dense(matrix: DMatrix<f64>) -> Result<Self> {
        let d = matrix.nrows();
        if d == 0 || matrix.ncols() != d {
            return Err(Error::IllFormedOperator(format!(
                "square ({}x{})",
                matrix.nrows(),
                matrix.ncols()
            )));
        }
        if matrix.iter().any(|v| !v.is_finite()) {
            return Err(Error::IllFormedOperator("finite".into()));
        }
        let scale = matrix.amax().max(f64::MIN_POSITIVE);
        for i in 0..d {
            for j in (i + 1)..d {
                if (matrix[(i, j)] - matrix[(j, i)]).abs() > SYMMETRY_TOL * scale {
                    return Err(Error::IllFormedOperator(format!(
                        "symmetric (entries ({i},{j}) and ({j},{i}) differ)"
                    )));
                }
            }
        }
        let eig = SymmetricEigen::try_new(matrix.clone(), EIGEN_EPS, EIGEN_MAX_ITER)
            .ok_or(Error::Eigendecomposition(d))?;
        let eigenvalues: Vec<f64> = eig.eigenvalues.iter().copied().collect();
        if let Some(a) = eigenvalues.iter().find(|a| !(**a < 0.0)) {
            return Err(Error::IllFormedOperator(format!(
                "strictly negative definite (eigenvalue {a})"
            )));
        }
        Ok(Self {
            repr: Repr::Dense {
                matrix,
                eigenvalues,
                eigenvectors: eig.eigenvectors,
            },
        })
    }

    /// Builds the diagonal representation when every off-diagonal entry is
    /// exactly zero, the dense one otherwise.
    pub fn from_matrix(matrix: DMatrix<f64>) -> Result<Self> {
        let d = matrix.nrows();
        let off_diagonal_zero = matrix.ncols() == d
            && (0..d).all(|i| (0..d).all(|j| i == j || matrix[(i, j)] == 0.0));
        if off_diagonal_zero && d > 0 {
            Self::diagonal(matrix.diagonal().iter().copied().collect())
        } else {
            Self::dense(matrix)
        }
    }

    pub fn dim(&self) -> usize {
        self.eigenvalues().len()
    }

    pub fn is_diagonal(&self) -> bool {
        matches!(self.repr, Repr::Diagonal(_))
    }

    /// Eigenvalues in the order of [`LinearOperator::basis`] columns; for a
    /// diagonal operator these are the diagonal entries in order.
    pub fn eigenvalues(&self) -> &[f64] {
        match &self.repr {
            Repr::Diagonal(a) => a,
            Repr::Dense { eigenvalues, .. } => eigenvalues,
        }
    }

    /// Orthonormal eigenvectors as columns, `None` for the identity basis.
    pub fn basis(&self) -> Option<&DMatrix<f64>> {
        match &self.repr {
            Repr::Diagonal(_) => None,
            Repr::Dense { eigenvectors, .. } => Some(eigenvectors),
        }
    }

    pub fn max_abs_eigenvalue(&self) -> f64 {
        self.eigenvalues().iter().fold(0.0, |m, a| m.max(a.abs()))
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        match &self.repr {
            Repr::Diagonal(a) => DMatrix::from_diagonal(&DVector::from_column_slice(a)),
            Repr::Dense { matrix, .. } => matrix.clone(),
        }
    }

    /// `V diag(g(a_k)) V^T`.
    pub fn spectral_function(&self, g: impl Fn(f64) -> f64) -> DMatrix<f64> {
        let values = DVector::from_iterator(self.dim(), self.eigenvalues().iter().map(|&a| g(a)));
        assemble(self.basis(), &values)
    }

    /// `out = A x`.
    pub fn apply(&self, x: &[f64], out: &mut [f64]) {
        match &self.repr {
            Repr::Diagonal(a) => {
                for ((o, &ak), &xk) in out.iter_mut().zip(a).zip(x) {
                    *o = ak * xk;
                }
            }
            Repr::Dense { matrix, .. } => mat_vec(matrix, x, out),
        }
    }

    /// Coordinates of `x` in the eigenbasis: `out = V^T x`.
    pub fn to_eigen(&self, x: &[f64], out: &mut [f64]) {
        match self.basis() {
            None => out.copy_from_slice(x),
            Some(v) => mat_t_vec(v, x, out),
        }
    }

    /// Inverse of [`LinearOperator::to_eigen`]: `out = V y`.
    pub fn from_eigen(&self, y: &[f64], out: &mut [f64]) {
        match self.basis() {
            None => out.copy_from_slice(y),
            Some(v) => mat_vec(v, y, out),
        }
    }

    /// `out = exp(t A) x` without forming the matrix.
    pub fn exp_apply(&self, t: f64, x: &[f64], out: &mut [f64]) {
        let d = self.dim();
        let mut y = vec![0.0; d];
        self.to_eigen(x, &mut y);
        for (yk, &a) in y.iter_mut().zip(self.eigenvalues()) {
            *yk *= (t * a).exp();
        }
        self.from_eigen(&y, out);
    }
}

fn assemble(basis: Option<&DMatrix<f64>>, values: &DVector<f64>) -> DMatrix<f64> {
    match basis {
        None => DMatrix::from_diagonal(values),
        Some(v) => {
            let mut scaled = v.clone();
            for (k, mut col) in scaled.column_iter_mut().enumerate() {
                col *= values[k];
            }
            scaled * v.transpose()
        }
    }
}

fn mat_vec(m: &DMatrix<f64>, x: &[f64], out: &mut [f64]) {
    let d = m.nrows();
    for (i, o) in out.iter_mut().enumerate().take(d) {
        let mut acc = 0.0;
        for (j, &xj) in x.iter().enumerate() {
            acc += m[(i, j)] * xj;
        }
        *o = acc;
    }
}

fn mat_t_vec(m: &DMatrix<f64>, x: &[f64], out: &mut [f64]) {
    for (j, o) in out.iter_mut().enumerate() {
        let col = m.column(j);
        let mut acc = 0.0;
        for (i, &xi) in x.iter().enumerate() {
            acc += col[i] * xi;
        }
        *o = acc;
    }
}

/// Additive noise amplitude; the noise covariance is `sigma^2 * I`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NoiseSpec {
    sigma: f64,
}

impl NoiseSpec {
    pub fn new(sigma: f64) -> Result<Self> {
        if !(sigma.is_finite() && sigma >= 0.0) {
            return Err(Error::invalid(format!("sigma must be finite and >= 0, got {sigma}")));
        }
        Ok(Self { sigma })
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }
}

/// Eigenvalue of `Q_t` for the eigenvalue `a < 0` of `A`.
pub fn covariance_eigenvalue(a: f64, sigma: f64, t: f64) -> f64 {
    sigma * sigma * (-(2.0 * a * t).exp_m1()) / (-2.0 * a)
}

fn check_time(t: f64) -> Result<()> {
    if !t.is_finite() {
        return Err(Error::invalid(format!("time must be finite, got {t}")));
    }
    Ok(())
}

fn check_positive_time(t: f64, noise: &NoiseSpec) -> Result<()> {
    check_time(t)?;
    if t <= 0.0 {
        return Err(Error::invalid(format!("Q_t is singular at t = {t}; need t > 0")));
    }
    if noise.sigma() == 0.0 {
        return Err(Error::invalid("Q_t is singular for sigma = 0"));
    }
    Ok(())
}

/// `exp(t A)`.
pub fn expm(op: &LinearOperator, t: f64) -> Result<DMatrix<f64>> {
    check_time(t)?;
    if t < 0.0 {
        return Err(Error::invalid(format!("expm requires t >= 0, got {t}")));
    }
    Ok(op.spectral_function(|a| (t * a).exp()))
}

/// `Q_t = \int_0^t exp(sA) Q exp(sA) ds` with `Q = sigma^2 I`.
pub fn covariance(op: &LinearOperator, noise: &NoiseSpec, t: f64) -> Result<DMatrix<f64>> {
    check_positive_time(t, noise)?;
    let sigma = noise.sigma();
    Ok(op.spectral_function(|a| covariance_eigenvalue(a, sigma, t)))
}

/// `Lambda(t) = Q_t^{-1/2} exp(t A)`.
pub fn lambda_op(op: &LinearOperator, noise: &NoiseSpec, t: f64) -> Result<DMatrix<f64>> {
    check_positive_time(t, noise)?;
    let sigma = noise.sigma();
    Ok(op.spectral_function(|a| (t * a).exp() / covariance_eigenvalue(a, sigma, t).sqrt()))
}

/// Precomputed spectral tables on the coarse grid, indexed by `j = 1..=J`.
///
/// Index 0 is never stored: `Q_0` is singular and so is `Lambda(0)`.
/// Requesting it panics.
#[derive(Debug, Clone)]
pub struct KernelTables {
    dt_coarse: f64,
    steps: usize,
    dim: usize,
    basis: Option<DMatrix<f64>>,
    exp: Vec<f64>,
    cov: Vec<f64>,
    inv_sqrt: Vec<f64>,
    lambda: Vec<f64>,
    gain: Vec<f64>,
}

pub fn build_kernel_tables(op: &LinearOperator, noise: &NoiseSpec, grid: &TimeGrid) -> Result<KernelTables> {
    check_positive_time(grid.dt_coarse(), noise)?;
    let d = op.dim();
    let steps = grid.coarse_steps();
    let sigma = noise.sigma();
    let mut exp = Vec::with_capacity(steps * d);
    let mut cov = Vec::with_capacity(steps * d);
    let mut inv_sqrt = Vec::with_capacity(steps * d);
    let mut lambda = Vec::with_capacity(steps * d);
    let mut gain = Vec::with_capacity(steps * d);
    for j in 1..=steps {
        let t = grid.coarse_time(j);
        for &a in op.eigenvalues() {
            let e = (t * a).exp();
            let q = covariance_eigenvalue(a, sigma, t);
            let is = 1.0 / q.sqrt();
            exp.push(e);
            cov.push(q);
            inv_sqrt.push(is);
            lambda.push(is * e);
            gain.push(is * e * is);
        }
    }
    Ok(KernelTables {
        dt_coarse: grid.dt_coarse(),
        steps,
        dim: d,
        basis: op.basis().cloned(),
        exp,
        cov,
        inv_sqrt,
        lambda,
        gain,
    })
}

impl KernelTables {
    pub fn dt_coarse(&self) -> f64 {
        self.dt_coarse
    }

    /// Number of stored entries `J`.
    pub fn len(&self) -> usize {
        self.steps
    }

    pub fn is_empty(&self) -> bool {
        self.steps == 0
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    fn range(&self, j: usize) -> std::ops::Range<usize> {
        assert!(
            j >= 1 && j <= self.steps,
            "kernel table index {j} out of range 1..={} (index 0 is singular)",
            self.steps
        );
        (j - 1) * self.dim..j * self.dim
    }

    /// Eigenvalues of `exp(j dt A)`.
    pub fn exp_eigs(&self, j: usize) -> &[f64] {
        &self.exp[self.range(j)]
    }

    /// Eigenvalues of `Q_{j dt}`.
    pub fn cov_eigs(&self, j: usize) -> &[f64] {
        &self.cov[self.range(j)]
    }

    pub fn inv_sqrt_eigs(&self, j: usize) -> &[f64] {
        &self.inv_sqrt[self.range(j)]
    }

    pub fn lambda_eigs(&self, j: usize) -> &[f64] {
        &self.lambda[self.range(j)]
    }

    /// Eigenvalues of `Lambda_j^T Q_j^{-1/2} = exp(j dt A) Q_j^{-1}`, the
    /// bilinear form `<Lambda_j b, Q_j^{-1/2} w>` in the eigenbasis.
    pub fn gain_eigs(&self, j: usize) -> &[f64] {
        &self.gain[self.range(j)]
    }

    fn matrix(&self, values: &[f64]) -> DMatrix<f64> {
        assemble(self.basis.as_ref(), &DVector::from_column_slice(values))
    }

    pub fn exp_a(&self, j: usize) -> DMatrix<f64> {
        self.matrix(self.exp_eigs(j))
    }

    pub fn qt(&self, j: usize) -> DMatrix<f64> {
        self.matrix(self.cov_eigs(j))
    }

    pub fn qt_inv_sqrt(&self, j: usize) -> DMatrix<f64> {
        self.matrix(self.inv_sqrt_eigs(j))
    }

    pub fn lambda(&self, j: usize) -> DMatrix<f64> {
        self.matrix(self.lambda_eigs(j))
    }
}
