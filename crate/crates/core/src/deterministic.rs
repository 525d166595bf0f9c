//! Deterministic counterpart of the SDE and the shift built from it.
//!
//! The ODE `y' = A y + B0(t, y)` is integrated with explicit Euler on the fine
//! grid; the shift is `f_j = B0(t_j, y_j)` on that grid and is subsampled onto
//! the coarse grid. The convolution table `F_{j,k}` is the rectangle-rule
//! discretization of `\int_{t_j}^{t_k} exp((t_k - r) A) f(r) dr`:
//!
//! ```text
//! F_{j,k} = dt * sum_{l=j}^{k-1} exp(dt (k - l) A) f_l    for k > j, else 0
//! ```

use std::borrow::Cow;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::TimeGrid;
use crate::linear::LinearOperator;
use crate::models::ModelSpec;

/// Explicit-Euler ODE solution, `(T/dt_fine + 1) x d`, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct DeterministicPath {
    dim: usize,
    grid: TimeGrid,
    states: Vec<f64>,
}

impl DeterministicPath {
    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn len(&self) -> usize {
        self.states.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    /// State at fine index `j`.
    pub fn state(&self, j: usize) -> &[f64] {
        &self.states[j * self.dim..(j + 1) * self.dim]
    }

    /// State at coarse index `j`.
    pub fn coarse_state(&self, j: usize) -> &[f64] {
        self.state(j * self.grid.fine_per_coarse())
    }

    pub fn final_state(&self) -> &[f64] {
        self.state(self.len() - 1)
    }
}

pub fn euler_ode(model: &ModelSpec, grid: &TimeGrid, x0: &[f64]) -> Result<DeterministicPath> {
    let d = model.dim();
    if x0.len() != d {
        return Err(Error::DimensionMismatch {
            expected: d,
            got: x0.len(),
            context: "initial condition",
        });
    }
    let dt = grid.dt_fine();
    model.check_step(dt)?;
    let steps = grid.fine_steps();
    let mut states = Vec::with_capacity((steps + 1) * d);
    states.extend_from_slice(x0);
    let mut ax = vec![0.0; d];
    let mut b = vec![0.0; d];
    for j in 1..=steps {
        let prev = &states[(j - 1) * d..j * d];
        model.operator().apply(prev, &mut ax);
        model.drift().eval(grid.fine_time(j - 1), prev, &mut b);
        let next: Vec<f64> = (0..d).map(|k| prev[k] + dt * (ax[k] + b[k])).collect();
        if let Some(component) = next.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFiniteState {
                sample: None,
                step: j,
                component,
            });
        }
        states.extend_from_slice(&next);
    }
    Ok(DeterministicPath {
        dim: d,
        grid: *grid,
        states,
    })
}

/// The shift `f` on both grids, together with the path it was built from.
#[derive(Debug, Clone, PartialEq)]
pub struct ShiftProfile {
    dim: usize,
    grid: TimeGrid,
    path: Option<DeterministicPath>,
    fine: Vec<f64>,
    coarse: Vec<f64>,
}

impl ShiftProfile {
    /// `f = 0`: the unshifted Gaussian process.
    pub fn zero(grid: &TimeGrid, dim: usize) -> Self {
        Self {
            dim,
            grid: *grid,
            path: None,
            fine: vec![0.0; (grid.fine_steps() + 1) * dim],
            coarse: vec![0.0; (grid.coarse_steps() + 1) * dim],
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    /// The ODE path, absent for [`ShiftProfile::zero`].
    pub fn path(&self) -> Option<&DeterministicPath> {
        self.path.as_ref()
    }

    pub fn fine(&self, j: usize) -> &[f64] {
        &self.fine[j * self.dim..(j + 1) * self.dim]
    }

    pub fn coarse(&self, j: usize) -> &[f64] {
        &self.coarse[j * self.dim..(j + 1) * self.dim]
    }

    pub fn is_zero(&self) -> bool {
        self.coarse.iter().all(|&v| v == 0.0)
    }
}

pub fn shift_tables(model: &ModelSpec, grid: &TimeGrid, path: &DeterministicPath) -> Result<ShiftProfile> {
    grid.ensure_same(path.grid(), "deterministic path")?;
    let d = model.dim();
    if path.dim() != d || path.len() != grid.fine_steps() + 1 {
        return Err(Error::GridMismatch(format!(
            "path has {} states of dimension {}, grid needs {} of dimension {d}",
            path.len(),
            path.dim(),
            grid.fine_steps() + 1
        )));
    }
    let mut fine = vec![0.0; path.len() * d];
    for (j, out) in fine.chunks_exact_mut(d).enumerate() {
        model.drift().eval(grid.fine_time(j), path.state(j), out);
    }
    let r = grid.fine_per_coarse();
    let coarse: Vec<f64> = (0..=grid.coarse_steps())
        .flat_map(|j| fine[j * r * d..(j * r + 1) * d].to_vec())
        .collect();
    Ok(ShiftProfile {
        dim: d,
        grid: *grid,
        path: Some(path.clone()),
        fine,
        coarse,
    })
}

/// How [`ConvolutionTable`] keeps its entries.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum TableStorage {
    /// All `(J+1)^2 d` entries, `O(1)` column access.
    #[default]
    Dense,
    /// Only the shift; each column is rebuilt in `O(J d)` on access.
    OnDemand,
}

/// How `F_{j,k}` integrates the shift over one coarse step `[l dt, (l+1) dt]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConvolutionRule {
    /// `dt exp(dt (k-l) A) f_l`.
    Rectangle,
    /// `exp(dt (k-l-1) A) A^{-1}(exp(dt A) - I) f_l`, exact for a shift held
    /// constant on each step. Stays accurate when `dt |a|` is not small.
    #[default]
    Exponential,
}

/// `F_{j,k}` for `0 <= j, k <= J`, held in the eigenbasis of `A`.
#[derive(Debug, Clone)]
pub struct ConvolutionTable {
    op: LinearOperator,
    dim: usize,
    steps: usize,
    /// Weight of `f_l` in `F_{l,k}` at lag `m = k - l`, for `m = 0..=J`.
    lags: Vec<f64>,
    /// Shift in eigen coordinates, `(J+1) x d`.
    shift: Vec<f64>,
    /// Column-major `[(k * (J+1) + j) * d]` when dense.
    dense: Option<Vec<f64>>,
}

pub fn convolution_table(
    shift: &ShiftProfile,
    op: &LinearOperator,
    grid: &TimeGrid,
    storage: TableStorage,
    rule: ConvolutionRule,
) -> Result<ConvolutionTable> {
    grid.ensure_same(shift.grid(), "shift profile")?;
    let d = op.dim();
    if shift.dim() != d {
        return Err(Error::DimensionMismatch {
            expected: d,
            got: shift.dim(),
            context: "shift profile",
        });
    }
    let steps = grid.coarse_steps();
    let dt = grid.dt_coarse();
    let mut lags = Vec::with_capacity((steps + 1) * d);
    for m in 0..=steps {
        let t = grid.coarse_time(m);
        lags.extend(op.eigenvalues().iter().map(|&a| match rule {
            ConvolutionRule::Rectangle => dt * (t * a).exp(),
            ConvolutionRule::Exponential if m == 0 => 0.0,
            ConvolutionRule::Exponential => ((t - dt) * a).exp() * (dt * a).exp_m1() / a,
        }));
    }
    let mut eig = vec![0.0; (steps + 1) * d];
    for (l, out) in eig.chunks_exact_mut(d).enumerate() {
        op.to_eigen(shift.coarse(l), out);
    }
    let mut table = ConvolutionTable {
        op: op.clone(),
        dim: d,
        steps,
        lags,
        shift: eig,
        dense: None,
    };
    if storage == TableStorage::Dense {
        let n = steps + 1;
        let mut dense = vec![0.0; n * n * d];
        for (k, col) in dense.chunks_exact_mut(n * d).enumerate() {
            table.fill_column(k, col);
        }
        table.dense = Some(dense);
    }
    Ok(table)
}

impl ConvolutionTable {
    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// `F_{l,k}` for `l = k-1, ..., 0` accumulated as
    /// `F_{l,k} = F_{l+1,k} + w_{k-l} f_l`.
    fn fill_column(&self, k: usize, col: &mut [f64]) {
        let d = self.dim;
        col.fill(0.0);
        for l in (0..k).rev() {
            let (head, tail) = col.split_at_mut((l + 1) * d);
            let dst = &mut head[l * d..];
            let src = &tail[..d];
            let w = &self.lags[(k - l) * d..(k - l + 1) * d];
            let f = &self.shift[l * d..(l + 1) * d];
            for c in 0..d {
                dst[c] = src[c] + w[c] * f[c];
            }
        }
    }

    /// Column `k` in eigen coordinates: entry `l` at `[l * d..(l + 1) * d]`.
    pub fn eigen_column(&self, k: usize) -> Cow<'_, [f64]> {
        assert!(k <= self.steps, "column {k} out of range 0..={}", self.steps);
        let n = (self.steps + 1) * self.dim;
        match &self.dense {
            Some(dense) => Cow::Borrowed(&dense[k * n..(k + 1) * n]),
            None => {
                let mut col = vec![0.0; n];
                self.fill_column(k, &mut col);
                Cow::Owned(col)
            }
        }
    }

    /// `F_{j,k}` in the eigenbasis of `A`.
    pub fn eigen_entry(&self, j: usize, k: usize) -> Vec<f64> {
        self.eigen_column(k)[j * self.dim..(j + 1) * self.dim].to_vec()
    }

    /// `F_{j,k}` in physical coordinates.
    pub fn entry(&self, j: usize, k: usize) -> Vec<f64> {
        let y = self.eigen_entry(j, k);
        let mut out = vec![0.0; self.dim];
        self.op.from_eigen(&y, &mut out);
        out
    }
}
