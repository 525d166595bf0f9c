//! The iterated weight recursion, the correction series `v^n`, the partial
//! sums `u^n` and the consecutive-iterations stopping rule.
//!
//! For each sample the weights obey
//!
//! ```text
//! I^{n+1}_j = dt * sum_{l=1..j} < Lambda_m B(l dt, Z_l), Q_m^{-1/2} (Z_j - e^{m dt A} Z_l - F_{l,j}) > I^n_l,   m = j - l + 1
//! ```
//!
//! with `B = B0 - f`. Both operators commute with `A`, so the inner product is
//! evaluated in the eigenbasis of `A` as `sum_k b_k * gain_{m,k} * w_k`.

use std::io::Write;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bank::{assemble_shifted, generate, PathBank, ShiftedSamples};
use crate::deterministic::{
    convolution_table, euler_ode, shift_tables, ConvolutionRule, ConvolutionTable, ShiftProfile, TableStorage,
};
use crate::error::{Error, Result};
use crate::grid::TimeGrid;
use crate::linear::{build_kernel_tables, KernelTables, LinearOperator};
use crate::models::{Drift, ModelSpec, ObservableSpec};
use crate::reference::Estimate;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EngineOptions {
    pub tol: f64,
    pub max_iter: usize,
    /// Track the deterministic path (`f = B0(y)`); `false` gives `f = 0`.
    pub shift: bool,
    /// Clamp every weight to `[-M, M]`. Off by default.
    pub clip_weights: Option<f64>,
    /// Abort once `err(n)` exceeds this value.
    pub divergence_threshold: Option<f64>,
    #[serde(skip)]
    pub storage: TableStorage,
    pub quadrature: Quadrature,
    pub convolution: ConvolutionRule,
}

/// Where the rectangle rule samples the integrand on `[(l-1) dt, l dt]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Quadrature {
    /// State, drift, weight and `F` at index `l`, kernels at `j - l + 1`.
    /// The kernel and the innovation then span different intervals, which
    /// biases the weights by `O(1)` on stiff modes. Kept for comparison.
    Literal,
    /// Everything at the left end `r = l - 1`, kernels at `j - r`, so the
    /// innovation `Z_j - e^{(j-r) dt A} Z_r - F_{r,j}` is exactly centered.
    #[default]
    LeftPoint,
}

pub const DEFAULT_TOL: f64 = 1e-2;
pub const DEFAULT_MAX_ITER: usize = 10;
pub const DEFAULT_DIVERGENCE_THRESHOLD: f64 = 1e8;

impl Default for EngineOptions {
    fn default() -> Self {
        Self {
            tol: DEFAULT_TOL,
            max_iter: DEFAULT_MAX_ITER,
            shift: true,
            clip_weights: None,
            divergence_threshold: Some(DEFAULT_DIVERGENCE_THRESHOLD),
            storage: TableStorage::Dense,
            quadrature: Quadrature::LeftPoint,
            convolution: ConvolutionRule::Exponential,
        }
    }
}

impl EngineOptions {
    fn validate(&self) -> Result<()> {
        if !(self.tol.is_finite() && self.tol > 0.0) {
            return Err(Error::invalid(format!("tol must be positive, got {}", self.tol)));
        }
        if let Some(m) = self.clip_weights {
            if !(m.is_finite() && m > 0.0) {
                return Err(Error::invalid(format!("clip_weights must be positive, got {m}")));
            }
        }
        if let Some(t) = self.divergence_threshold {
            if !(t > 0.0) {
                return Err(Error::invalid(format!("divergence_threshold must be positive, got {t}")));
            }
        }
        Ok(())
    }
}

/// Weights, correction series and error history after `n` iterations.
#[derive(Debug, Clone)]
pub struct IterationState {
    n: usize,
    samples: usize,
    width: usize,
    weights: Vec<f64>,
    cumulative: Vec<f64>,
    v: Vec<Vec<f64>>,
    u: Vec<Vec<f64>>,
    err: Vec<f64>,
    converged: bool,
}

impl IterationState {
    fn start(phi: &[f64], samples: usize, width: usize) -> Self {
        let weights = vec![1.0; samples * width];
        let v0 = v_series(phi, &weights, samples, width);
        Self {
            n: 0,
            samples,
            width,
            cumulative: weights.clone(),
            weights,
            u: vec![v0.clone()],
            v: vec![v0],
            err: Vec::new(),
            converged: false,
        }
    }

    pub fn iteration(&self) -> usize {
        self.n
    }

    /// `I^n`, `N_s x (J+1)` row-major.
    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    /// `sum_{k<=n} I^k`, same layout as [`IterationState::weights`].
    pub fn cumulative_weights(&self) -> &[f64] {
        &self.cumulative
    }

    /// Total weight of every sample at coarse index `j`.
    pub fn total_weights_at(&self, j: usize) -> Vec<f64> {
        (0..self.samples).map(|i| self.cumulative[i * self.width + j]).collect()
    }

    pub fn v(&self) -> &[Vec<f64>] {
        &self.v
    }

    pub fn u(&self) -> &[Vec<f64>] {
        &self.u
    }

    pub fn err_history(&self) -> &[f64] {
        &self.err
    }

    pub fn converged(&self) -> bool {
        self.converged
    }
}

/// Inputs of one weight update, all on the same grid.
#[derive(Clone, Copy)]
pub struct WeightTerms<'a> {
    pub samples: &'a ShiftedSamples<'a>,
    pub operator: &'a LinearOperator,
    pub drift: &'a Drift,
    pub shift: &'a ShiftProfile,
    pub kernel: &'a KernelTables,
    pub table: &'a ConvolutionTable,
    pub quadrature: Quadrature,
}

struct Scratch {
    path: Vec<f64>,
    z: Vec<f64>,
    b: Vec<f64>,
    tmp: Vec<f64>,
}

impl Scratch {
    fn new(width: usize, d: usize) -> Self {
        Self {
            path: vec![0.0; width * d],
            z: vec![0.0; width * d],
            b: vec![0.0; width * d],
            tmp: vec![0.0; d],
        }
    }
}

impl WeightTerms<'_> {
    fn check(&self, len: usize) -> Result<()> {
        let steps = self.samples.steps();
        let d = self.samples.dim();
        let width = steps + 1;
        let grid = self.samples.grid();
        grid.ensure_same(self.shift.grid(), "shift profile")?;
        if self.kernel.len() < steps || self.table.steps() != steps {
            return Err(Error::GridMismatch(format!(
                "kernel has {} entries and convolution table {} steps, samples have {steps}",
                self.kernel.len(),
                self.table.steps()
            )));
        }
        if self.kernel.dt_coarse() != grid.dt_coarse() {
            return Err(Error::GridMismatch("kernel tables built on a different coarse step".into()));
        }
        for (got, context) in [
            (self.operator.dim(), "operator"),
            (self.drift.dim(), "drift"),
            (self.shift.dim(), "shift profile"),
            (self.kernel.dim(), "kernel tables"),
            (self.table.dim(), "convolution table"),
        ] {
            if got != d {
                return Err(Error::DimensionMismatch { expected: d, got, context });
            }
        }
        if len != self.samples.samples() * width {
            return Err(Error::DimensionMismatch {
                expected: self.samples.samples() * width,
                got: len,
                context: "weight buffer",
            });
        }
        Ok(())
    }

    /// Updates one sample; returns the first coarse index with a non-finite weight.
    fn sample(&self, i: usize, cur: &[f64], out: &mut [f64], s: &mut Scratch, clip: Option<f64>) -> Option<usize> {
        let d = self.samples.dim();
        let steps = self.samples.steps();
        let grid = self.samples.grid();
        let dt = grid.dt_coarse();
        self.samples.path(i, &mut s.path);
        for l in 0..=steps {
            self.operator.to_eigen(&s.path[l * d..(l + 1) * d], &mut s.z[l * d..(l + 1) * d]);
        }
        for l in 0..=steps {
            self.drift.eval(grid.coarse_time(l), &s.path[l * d..(l + 1) * d], &mut s.tmp);
            for (t, f) in s.tmp.iter_mut().zip(self.shift.coarse(l)) {
                *t -= f;
            }
            self.operator.to_eigen(&s.tmp, &mut s.b[l * d..(l + 1) * d]);
        }
        out[0] = 0.0;
        let mut bad = None;
        for j in 1..=steps {
            let col = self.table.eigen_column(j);
            let zj = &s.z[j * d..(j + 1) * d];
            let mut acc = 0.0;
            for l in 1..=j {
                let m = j - l + 1;
                let r = match self.quadrature {
                    Quadrature::Literal => l,
                    Quadrature::LeftPoint => l - 1,
                };
                let gain = self.kernel.gain_eigs(m);
                let e = self.kernel.exp_eigs(m);
                let zl = &s.z[r * d..(r + 1) * d];
                let bl = &s.b[r * d..(r + 1) * d];
                let f = &col[r * d..(r + 1) * d];
                let mut dot = 0.0;
                for k in 0..d {
                    dot += bl[k] * gain[k] * (zj[k] - e[k] * zl[k] - f[k]);
                }
                acc += dot * cur[r];
            }
            let mut w = dt * acc;
            if let Some(m) = clip {
                w = w.clamp(-m, m);
            }
            if !w.is_finite() && bad.is_none() {
                bad = Some(j);
            }
            out[j] = w;
        }
        bad
    }
}

/// One application of the weight recursion: `next = I^{n+1}` from `current = I^n`.
///
/// `iteration` is `n + 1` and only labels the error. Every sample is
/// independent, so the result does not depend on the number of threads.
pub fn weights_next(
    terms: &WeightTerms<'_>,
    current: &[f64],
    next: &mut [f64],
    iteration: usize,
    clip: Option<f64>,
) -> Result<()> {
    terms.check(current.len())?;
    if next.len() != current.len() {
        return Err(Error::DimensionMismatch {
            expected: current.len(),
            got: next.len(),
            context: "output weight buffer",
        });
    }
    let width = terms.samples.steps() + 1;
    let d = terms.samples.dim();
    let bad: Vec<Option<usize>> = next
        .par_chunks_mut(width)
        .zip(current.par_chunks(width))
        .enumerate()
        .map_init(
            || Scratch::new(width, d),
            |s, (i, (out, cur))| terms.sample(i, cur, out, s, clip),
        )
        .collect();
    match bad.iter().enumerate().find_map(|(i, b)| b.map(|j| (i, j))) {
        Some((sample, index)) => Err(Error::WeightsDiverged {
            iteration,
            sample,
            index,
            reason: "non-finite weight",
        }),
        None => Ok(()),
    }
}

/// `v_j = (1/N_s) sum_i phi[i][j] * weights[i][j]`, summed in ascending `i`.
pub fn v_series(phi: &[f64], weights: &[f64], samples: usize, width: usize) -> Vec<f64> {
    assert_eq!(phi.len(), samples * width, "observable table has the wrong size");
    assert_eq!(weights.len(), samples * width, "weight table has the wrong size");
    let mut sums = vec![0.0; width];
    for (p, w) in phi.chunks_exact(width).zip(weights.chunks_exact(width)) {
        for j in 0..width {
            sums[j] += p[j] * w[j];
        }
    }
    let n = samples as f64;
    sums.iter().map(|s| s / n).collect()
}

/// `sup |v_j|` over the given entries (pass `&v[1..]` to skip `j = 0`).
pub fn iterative_error(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |m, x| if x.abs() > m || x.is_nan() { x.abs() } else { m })
}

/// How a run ended.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum Outcome {
    Converged,
    MaxIterations,
    Diverged { iteration: usize, message: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub grid: TimeGrid,
    pub samples: usize,
    pub seed: u64,
    pub tol: f64,
    /// `u^0 .. u^N`, one series of length `J + 1` per iteration.
    pub u: Vec<Vec<f64>>,
    pub err_history: Vec<f64>,
    pub iteration_seconds: Vec<f64>,
    pub outcome: Outcome,
}

impl RunReport {
    pub fn iterations(&self) -> usize {
        self.err_history.len()
    }

    pub fn final_series(&self) -> &[f64] {
        self.u.last().expect("a report always holds u^0")
    }

    pub fn final_value(&self) -> f64 {
        *self.final_series().last().unwrap()
    }

    pub fn diverged(&self) -> bool {
        matches!(self.outcome, Outcome::Diverged { .. })
    }

    /// Series CSV: `j,t,u0..uN[,ref,ref_stderr]`.
    pub fn write_series_csv(&self, reference: Option<&[Estimate]>, mut w: impl Write) -> std::io::Result<()> {
        if let Some(r) = reference {
            if r.len() != self.grid.coarse_steps() + 1 {
                return Err(std::io::Error::new(
                    std::io::ErrorKind::InvalidInput,
                    "reference series is on a different grid",
                ));
            }
        }
        write!(w, "j,t")?;
        for n in 0..self.u.len() {
            write!(w, ",u{n}")?;
        }
        if reference.is_some() {
            write!(w, ",ref,ref_stderr")?;
        }
        writeln!(w)?;
        for j in 0..=self.grid.coarse_steps() {
            write!(w, "{j},{}", self.grid.coarse_time(j))?;
            for u in &self.u {
                write!(w, ",{}", u[j])?;
            }
            if let Some(r) = reference {
                write!(w, ",{},{}", r[j].value, r[j].stderr)?;
            }
            writeln!(w)?;
        }
        Ok(())
    }

    /// `j,t,u0..uN` with each iterate replaced by its centered moving mean.
    pub fn write_smoothed_csv(&self, window: usize, mut w: impl Write) -> std::io::Result<()> {
        let smoothed: Vec<Vec<f64>> = self.u.iter().map(|u| moving_mean(u, window)).collect();
        write!(w, "j,t")?;
        for n in 0..smoothed.len() {
            write!(w, ",u{n}")?;
        }
        writeln!(w)?;
        for j in 0..=self.grid.coarse_steps() {
            write!(w, "{j},{}", self.grid.coarse_time(j))?;
            for u in &smoothed {
                write!(w, ",{}", u[j])?;
            }
            writeln!(w)?;
        }
        Ok(())
    }

    /// Error-history CSV: `n,err`.
    pub fn write_err_csv(&self, mut w: impl Write) -> std::io::Result<()> {
        writeln!(w, "n,err")?;
        for (n, e) in self.err_history.iter().enumerate() {
            writeln!(w, "{},{e}", n + 1)?;
        }
        Ok(())
    }
}

/// Centered moving mean over `window` points, shrinking at both ends.
///
/// An even window takes one more point behind than ahead.
pub fn moving_mean(values: &[f64], window: usize) -> Vec<f64> {
    assert!(window > 0, "window must be positive");
    let behind = window / 2;
    let ahead = (window - 1) / 2;
    (0..values.len())
        .map(|j| {
            let lo = j.saturating_sub(behind);
            let hi = (j + ahead).min(values.len() - 1);
            values[lo..=hi].iter().sum::<f64>() / (hi - lo + 1) as f64
        })
        .collect()
}

/// A configured iteration over one bank.
pub struct Engine<'a> {
    model: &'a ModelSpec,
    options: EngineOptions,
    shift: ShiftProfile,
    table: ConvolutionTable,
    kernel: KernelTables,
    samples: ShiftedSamples<'a>,
    phi: Vec<f64>,
    state: IterationState,
    next: Vec<f64>,
    seconds: Vec<f64>,
    outcome: Option<Outcome>,
}

impl<'a> Engine<'a> {
    pub fn new(
        model: &'a ModelSpec,
        bank: &'a PathBank,
        x0: &[f64],
        observable: &ObservableSpec,
        options: EngineOptions,
    ) -> Result<Self> {
        options.validate()?;
        let d = model.dim();
        if bank.dim() != d {
            return Err(Error::DimensionMismatch { expected: d, got: bank.dim(), context: "path bank" });
        }
        if x0.len() != d {
            return Err(Error::DimensionMismatch { expected: d, got: x0.len(), context: "initial condition" });
        }
        observable.validate(d)?;
        let sigma = model.noise().sigma();
        if sigma <= 0.0 {
            return Err(Error::invalid("the iteration needs sigma > 0 (Q_t is singular otherwise)"));
        }
        let grid = *bank.grid();
        let shift = if options.shift {
            let path = euler_ode(model, &grid, x0)?;
            shift_tables(model, &grid, &path)?
        } else {
            ShiftProfile::zero(&grid, d)
        };
        let table = convolution_table(&shift, model.operator(), &grid, options.storage, options.convolution)?;
        let kernel = build_kernel_tables(model.operator(), model.noise(), &grid)?;
        let samples = assemble_shifted(bank, model.operator(), x0, &table, sigma)?;
        let width = grid.coarse_steps() + 1;
        let mut phi = vec![0.0; bank.samples() * width];
        phi.par_chunks_mut(width).enumerate().for_each_init(
            || vec![0.0; width * d],
            |path, (i, row)| {
                samples.path(i, path);
                for (j, p) in row.iter_mut().enumerate() {
                    *p = observable.eval(&path[j * d..(j + 1) * d]);
                }
            },
        );
        let state = IterationState::start(&phi, bank.samples(), width);
        Ok(Self {
            model,
            options,
            shift,
            table,
            kernel,
            next: vec![0.0; phi.len()],
            samples,
            phi,
            state,
            seconds: Vec::new(),
            outcome: None,
        })
    }

    pub fn state(&self) -> &IterationState {
        &self.state
    }

    pub fn samples(&self) -> &ShiftedSamples<'a> {
        &self.samples
    }

    pub fn shift(&self) -> &ShiftProfile {
        &self.shift
    }

    pub fn kernel(&self) -> &KernelTables {
        &self.kernel
    }

    pub fn table(&self) -> &ConvolutionTable {
        &self.table
    }

    pub fn options(&self) -> &EngineOptions {
        &self.options
    }

    /// `phi(Z[i][j])`, `N_s x (J+1)`.
    pub fn observable_values(&self) -> &[f64] {
        &self.phi
    }

    /// Performs iteration `n + 1` and returns `err(n + 1)`.
    pub fn step(&mut self) -> Result<f64> {
        let n = self.state.n + 1;
        let started = Instant::now();
        let terms = WeightTerms {
            samples: &self.samples,
            operator: self.model.operator(),
            drift: self.model.drift(),
            shift: &self.shift,
            kernel: &self.kernel,
            table: &self.table,
            quadrature: self.options.quadrature,
        };
        weights_next(&terms, &self.state.weights, &mut self.next, n, self.options.clip_weights)?;
        let st = &mut self.state;
        let v = v_series(&self.phi, &self.next, st.samples, st.width);
        let err = iterative_error(&v[1..]);
        let u: Vec<f64> = st.u[st.n].iter().zip(&v).map(|(a, b)| a + b).collect();
        for (c, w) in st.cumulative.iter_mut().zip(&self.next) {
            *c += w;
        }
        std::mem::swap(&mut st.weights, &mut self.next);
        st.v.push(v);
        st.u.push(u);
        st.err.push(err);
        st.n = n;
        self.seconds.push(started.elapsed().as_secs_f64());
        let threshold = self.options.divergence_threshold.unwrap_or(f64::INFINITY);
        if !(err <= threshold) || err.is_nan() {
            return Err(Error::IterationDiverged { iteration: n, err, threshold });
        }
        Ok(err)
    }

    /// Iterates until `err(n) < tol`, `max_iter` or divergence.
    ///
    /// Divergence is a result, not an error: the report keeps every
    /// completed iteration and names the cause in [`Outcome::Diverged`].
    pub fn run(&mut self, seed: u64) -> Result<RunReport> {
        while self.outcome.is_none() {
            if self.state.n >= self.options.max_iter {
                self.outcome = Some(Outcome::MaxIterations);
                break;
            }
            match self.step() {
                Ok(err) if err < self.options.tol => {
                    self.state.converged = true;
                    self.outcome = Some(Outcome::Converged);
                }
                Ok(_) => {}
                Err(e @ (Error::WeightsDiverged { .. } | Error::IterationDiverged { .. })) => {
                    self.outcome = Some(Outcome::Diverged {
                        iteration: match e {
                            Error::WeightsDiverged { iteration, .. } | Error::IterationDiverged { iteration, .. } => iteration,
                            _ => unreachable!(),
                        },
                        message: e.to_string(),
                    });
                }
                Err(e) => return Err(e),
            }
        }
        Ok(self.report(seed))
    }

    pub fn report(&self, seed: u64) -> RunReport {
        RunReport {
            grid: *self.samples.grid(),
            samples: self.samples.samples(),
            seed,
            tol: self.options.tol,
            u: self.state.u.clone(),
            err_history: self.state.err.clone(),
            iteration_seconds: self.seconds.clone(),
            outcome: self.outcome.clone().unwrap_or(Outcome::MaxIterations),
        }
    }

    /// Monte Carlo estimate of `<h, D E[phi(X_t^x)]>` for the Gaussian
    /// process at coarse index `j`, from `phi(Z_j) <Lambda_j h, Q_j^{-1/2} (Z_j - mean_j)>`.
    pub fn derivative_estimate(&self, observable: &ObservableSpec, h: &[f64], j: usize) -> Result<Estimate> {
        derivative_estimate(&self.samples, self.model.operator(), &self.kernel, observable, h, j)
    }
}

/// See [`Engine::derivative_estimate`].
pub fn derivative_estimate(
    samples: &ShiftedSamples<'_>,
    operator: &LinearOperator,
    kernel: &KernelTables,
    observable: &ObservableSpec,
    h: &[f64],
    j: usize,
) -> Result<Estimate> {
    let d = samples.dim();
    if h.len() != d {
        return Err(Error::DimensionMismatch { expected: d, got: h.len(), context: "direction" });
    }
    if j == 0 || j > samples.steps() || j > kernel.len() {
        return Err(Error::invalid(format!("coarse index {j} out of range 1..={}", samples.steps())));
    }
    observable.validate(d)?;
    let mut ht = vec![0.0; d];
    operator.to_eigen(h, &mut ht);
    let gain = kernel.gain_eigs(j);
    let mean = samples.mean(j);
    let values: Vec<f64> = (0..samples.samples())
        .into_par_iter()
        .map_init(
            || (vec![0.0; d], vec![0.0; d]),
            |(z, w), i| {
                samples.point(i, j, z);
                for k in 0..d {
                    w[k] = z[k] - mean[k];
                }
                let mut wt = vec![0.0; d];
                operator.to_eigen(w, &mut wt);
                let dot: f64 = (0..d).map(|k| ht[k] * gain[k] * wt[k]).sum();
                observable.eval(z) * dot
            },
        )
        .collect();
    Ok(Estimate::from_values(&values))
}

/// Generates a bank and runs the iteration on it.
#[allow(clippy::too_many_arguments)]
pub fn run(
    model: &ModelSpec,
    grid: &TimeGrid,
    x0: &[f64],
    observable: &ObservableSpec,
    samples: usize,
    seed: u64,
    options: EngineOptions,
) -> Result<RunReport> {
    let bank = generate(model.operator(), grid, samples, seed)?;
    let mut engine = Engine::new(model, &bank, x0, observable, options)?;
    engine.run(seed)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bank::generate;
    use crate::linear::{LinearOperator, NoiseSpec};
    use crate::models::DriftSpec;
    use approx::assert_relative_eq;

    fn model_1d(drift: DriftSpec) -> ModelSpec {
        ModelSpec::new(
            LinearOperator::diagonal(vec![-1.0]).unwrap(),
            NoiseSpec::new(1.0).unwrap(),
            &drift,
        )
        .unwrap()
    }

    #[test]
    fn iterative_error_cases() {
        assert_eq!(iterative_error(&[0.0, 0.0]), 0.0);
        assert_eq!(iterative_error(&[0.0, -3.0, 2.0]), 3.0);
        assert_eq!(iterative_error(&[-0.25]), 0.25);
        assert!(iterative_error(&[1.0, f64::NAN]).is_nan());
    }

    #[test]
    fn moving_mean_cases() {
        let x = [1.0, 2.0, 3.0, 4.0, 5.0];
        assert_eq!(moving_mean(&x, 1), x.to_vec());
        assert_eq!(moving_mean(&x, 3), vec![1.5, 2.0, 3.0, 4.0, 4.5]);
        assert_eq!(moving_mean(&x, 2), vec![1.0, 1.5, 2.5, 3.5, 4.5]);
        assert_eq!(moving_mean(&x, 9), vec![3.0; 5]);
    }

    #[test]
    fn v_series_plain_average() {
        let phi = [1.0, 2.0, 3.0, 4.0];
        let w = [1.0; 4];
        assert_eq!(v_series(&phi, &w, 2, 2), vec![2.0, 3.0]);
        assert_eq!(v_series(&[1.0; 6], &[1.0; 6], 3, 2), vec![1.0, 1.0]);
    }

    #[test]
    fn zero_drift_single_correction() {
        let model = model_1d(DriftSpec::Zero);
        let grid = TimeGrid::new(1.0, 1e-2, 1e-1).unwrap();
        let bank = generate(model.operator(), &grid, 200, 5).unwrap();
        let mut engine = Engine::new(&model, &bank, &[1.0], &ObservableSpec::Coordinate { index: 0 }, EngineOptions::default()).unwrap();
        let report = engine.run(5).unwrap();
        assert_eq!(report.outcome, Outcome::Converged);
        assert_eq!(report.err_history, vec![0.0]);
        assert_eq!(report.u[0], report.u[1]);
        assert!(engine.state().weights().iter().all(|&w| w == 0.0));
    }

    #[test]
    fn single_sample_hand_value() {
        // d = 1, J = 1, dt = 0.5, Z_1 = 0.3, B(Z_1) = 1, F = 0
        let model = model_1d(DriftSpec::LinearScale { epsilon: 1.0 / 0.3 });
        let grid = TimeGrid::new(0.5, 0.5, 0.5).unwrap();
        let bank = PathBank::from_parts(grid, 1, 1, vec![0.0, 0.3]);
        let opts = EngineOptions { shift: false, quadrature: Quadrature::Literal, ..EngineOptions::default() };
        let mut engine = Engine::new(&model, &bank, &[0.0], &ObservableSpec::CoordinateMean, opts).unwrap();
        engine.step().unwrap();
        let w = engine.state().weights();
        assert_eq!(w[0], 0.0);
        assert_relative_eq!(w[1], 0.113_262_2, max_relative = 1e-6);
    }

    #[test]
    fn single_sample_hand_value_left_point() {
        // x0 = Z_0 = 0.3, B(Z_0) = 1, innovation Z_1 - e^{-0.5} Z_0 = 0.3
        let model = model_1d(DriftSpec::LinearScale { epsilon: 1.0 / 0.3 });
        let grid = TimeGrid::new(0.5, 0.5, 0.5).unwrap();
        let bank = PathBank::from_parts(grid, 1, 1, vec![0.0, 0.3]);
        let opts = EngineOptions { shift: false, ..EngineOptions::default() };
        let mut engine = Engine::new(&model, &bank, &[0.3], &ObservableSpec::CoordinateMean, opts).unwrap();
        engine.step().unwrap();
        assert_relative_eq!(engine.state().weights()[1], 0.287_855_21, max_relative = 1e-7);
    }

    #[test]
    fn weights_match_direct_sum() {
        for quadrature in [Quadrature::Literal, Quadrature::LeftPoint] {
            direct_sum_case(quadrature);
        }
    }

    fn direct_sum_case(quadrature: Quadrature) {
        let model = model_1d(DriftSpec::CubicBounded { b0: 1.5, ybar: vec![2.0] });
        let grid = TimeGrid::new(0.5, 1e-2, 5e-2).unwrap();
        let bank = generate(model.operator(), &grid, 16, 9).unwrap();
        let opts = EngineOptions { quadrature, ..EngineOptions::default() };
        let mut engine = Engine::new(&model, &bank, &[0.5], &ObservableSpec::Coordinate { index: 0 }, opts).unwrap();
        let before = engine.state().weights().to_vec();
        engine.step().unwrap();
        let after = engine.state().weights();
        let steps = grid.coarse_steps();
        let dt = grid.dt_coarse();
        let a = -1.0f64;
        let mut z = vec![0.0; steps + 1];
        let mut b = [0.0];
        for i in 0..16 {
            engine.samples().path(i, &mut z);
            for j in 1..=steps {
                let mut acc = 0.0;
                for l in 1..=j {
                    let r = if quadrature == Quadrature::Literal { l } else { l - 1 };
                    let m = (j - l + 1) as f64 * dt;
                    let q = crate::linear::covariance_eigenvalue(a, 1.0, m);
                    let lam = (m * a).exp() / q.sqrt();
                    model.drift().eval(0.0, &[z[r]], &mut b);
                    let bl = b[0] - engine.shift().coarse(r)[0];
                    let f = engine.table().entry(r, j)[0];
                    let inner = lam * bl * (z[j] - (m * a).exp() * z[r] - f) / q.sqrt();
                    acc += inner * before[i * (steps + 1) + r];
                }
                assert_relative_eq!(after[i * (steps + 1) + j], dt * acc, max_relative = 1e-10, epsilon = 1e-14);
            }
            assert_eq!(after[i * (steps + 1)], 0.0);
        }
    }

    #[test]
    fn partial_sums_and_reweighting() {
        let model = model_1d(DriftSpec::CubicBounded { b0: 1.0, ybar: vec![2.0] });
        let grid = TimeGrid::new(0.5, 1e-2, 5e-2).unwrap();
        let bank = generate(model.operator(), &grid, 500, 2).unwrap();
        let mut engine = Engine::new(&model, &bank, &[1.0], &ObservableSpec::Coordinate { index: 0 }, EngineOptions::default()).unwrap();
        for _ in 0..3 {
            engine.step().unwrap();
        }
        let st = engine.state();
        let width = grid.coarse_steps() + 1;
        let rw = v_series(engine.observable_values(), st.cumulative_weights(), 500, width);
        let last = st.u().last().unwrap();
        for j in 0..width {
            let partial: f64 = st.v().iter().map(|v| v[j]).sum();
            assert!((last[j] - partial).abs() <= 1e-12 * last[j].abs().max(1.0));
            assert!((last[j] - rw[j]).abs() <= 1e-12 * last[j].abs().max(1.0));
        }
    }

    #[test]
    fn clipping_bounds_weights() {
        let model = model_1d(DriftSpec::QuadraticSimple { b0: 3.0, ybar: vec![0.0] });
        let grid = TimeGrid::new(0.5, 1e-2, 5e-2).unwrap();
        let bank = generate(model.operator(), &grid, 50, 3).unwrap();
        let opts = EngineOptions { clip_weights: Some(0.5), shift: false, ..EngineOptions::default() };
        let mut engine = Engine::new(&model, &bank, &[1.0], &ObservableSpec::CoordinateMean, opts).unwrap();
        engine.step().unwrap();
        assert!(engine.state().weights().iter().all(|w| w.abs() <= 0.5));
    }

    #[test]
    fn threshold_marks_divergence() {
        let model = model_1d(DriftSpec::CubicBounded { b0: 1.0, ybar: vec![2.0] });
        let grid = TimeGrid::new(0.5, 1e-2, 5e-2).unwrap();
        let bank = generate(model.operator(), &grid, 50, 3).unwrap();
        let opts = EngineOptions { divergence_threshold: Some(1e-300), tol: 1e-300, ..EngineOptions::default() };
        let mut engine = Engine::new(&model, &bank, &[1.0], &ObservableSpec::CoordinateMean, opts).unwrap();
        let report = engine.run(3).unwrap();
        assert!(report.diverged());
        assert_eq!(report.iterations(), 1);
    }

    #[test]
    fn rejects_mismatched_inputs() {
        let model = model_1d(DriftSpec::Zero);
        let grid = TimeGrid::new(0.5, 1e-2, 5e-2).unwrap();
        let bank = generate(&LinearOperator::diagonal(vec![-1.0, -2.0]).unwrap(), &grid, 4, 0).unwrap();
        assert!(Engine::new(&model, &bank, &[1.0], &ObservableSpec::CoordinateMean, EngineOptions::default()).is_err());
        let silent = model.with_noise(NoiseSpec::new(0.0).unwrap());
        let bank = generate(model.operator(), &grid, 4, 0).unwrap();
        assert!(Engine::new(&silent, &bank, &[1.0], &ObservableSpec::CoordinateMean, EngineOptions::default()).is_err());
        let bad = EngineOptions { tol: 0.0, ..EngineOptions::default() };
        assert!(Engine::new(&model, &bank, &[1.0], &ObservableSpec::CoordinateMean, bad).is_err());
    }

    #[test]
    fn series_csv_layout() {
        let model = model_1d(DriftSpec::Zero);
        let grid = TimeGrid::new(0.2, 1e-1, 1e-1).unwrap();
        let report = run(&model, &grid, &[1.0], &ObservableSpec::Coordinate { index: 0 }, 10, 1, EngineOptions::default()).unwrap();
        let mut out = Vec::new();
        report.write_series_csv(None, &mut out).unwrap();
        let text = String::from_utf8(out).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "j,t,u0,u1");
        assert_eq!(lines.len(), 4);
        assert!(lines[1].starts_with("0,0,1,1"));
        let mut err = Vec::new();
        report.write_err_csv(&mut err).unwrap();
        assert_eq!(String::from_utf8(err).unwrap(), "n,err\n1,0\n");
    }
}
