//! Classical Euler–Maruyama Monte Carlo reference for `E[phi(X_t)]`.

use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::TimeGrid;
use crate::models::{ModelSpec, ObservableSpec};
use crate::seeds::{derive_seed, sample_stream, SeedDomain};

/// Samples per reduction block. Blocks are reduced in index order, so the
/// result does not depend on the number of worker threads.
const BLOCK: usize = 256;

/// Sample mean with its standard error.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Estimate {
    pub value: f64,
    pub stderr: f64,
    pub samples: usize,
}

impl Estimate {
    /// Mean and `sd / sqrt(n)` with the unbiased variance, summed in index order.
    pub fn from_values(values: &[f64]) -> Self {
        let mut acc = Moments::default();
        for &v in values {
            acc.push(v);
        }
        acc.estimate()
    }
}

/// Streaming mean and variance (Welford), mergeable in a fixed order.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct Moments {
    n: usize,
    mean: f64,
    m2: f64,
}

impl Moments {
    pub fn push(&mut self, x: f64) {
        self.n += 1;
        let delta = x - self.mean;
        self.mean += delta / self.n as f64;
        self.m2 += delta * (x - self.mean);
    }

    pub fn merge(&mut self, other: &Moments) {
        if other.n == 0 {
            return;
        }
        if self.n == 0 {
            *self = *other;
            return;
        }
        let n = self.n + other.n;
        let delta = other.mean - self.mean;
        self.mean += delta * other.n as f64 / n as f64;
        self.m2 += other.m2 + delta * delta * (self.n as f64 * other.n as f64 / n as f64);
        self.n = n;
    }

    pub fn estimate(&self) -> Estimate {
        let var = if self.n > 1 { self.m2 / (self.n - 1) as f64 } else { 0.0 };
        Estimate {
            value: self.mean,
            stderr: (var.max(0.0) / self.n.max(1) as f64).sqrt(),
            samples: self.n,
        }
    }
}

/// Runs sample `i` of the reference scheme, calling `visit(j, state)` at
/// every coarse index `j = 0..=J`.
fn simulate_sample(
    model: &ModelSpec,
    grid: &TimeGrid,
    x0: &[f64],
    stream_seed: u64,
    i: usize,
    mut visit: impl FnMut(usize, &[f64]),
) -> Result<()> {
    let d = model.dim();
    let dt = grid.dt_fine();
    let noise = model.noise().sigma() * dt.sqrt();
    let mut rng = sample_stream(stream_seed, i);
    let mut x = x0.to_vec();
    let mut ax = vec![0.0; d];
    let mut b = vec![0.0; d];
    visit(0, &x);
    let r = grid.fine_per_coarse();
    for j in 1..=grid.coarse_steps() {
        for s in 0..r {
            let step = (j - 1) * r + s;
            model.operator().apply(&x, &mut ax);
            model.drift().eval(grid.fine_time(step), &x, &mut b);
            for k in 0..d {
                let xi: f64 = rng.sample(StandardNormal);
                x[k] += dt * (ax[k] + b[k]) + noise * xi;
            }
            if let Some(component) = x.iter().position(|v| !v.is_finite()) {
                return Err(Error::NonFiniteState {
                    sample: Some(i),
                    step: step + 1,
                    component,
                });
            }
        }
        visit(j, &x);
    }
    Ok(())
}

fn check_inputs(model: &ModelSpec, grid: &TimeGrid, x0: &[f64], samples: usize) -> Result<()> {
    if x0.len() != model.dim() {
        return Err(Error::DimensionMismatch {
            expected: model.dim(),
            got: x0.len(),
            context: "initial condition",
        });
    }
    if samples == 0 {
        return Err(Error::invalid("reference needs at least one sample"));
    }
    model.check_step(grid.dt_fine())
}

/// Estimates of `E[phi(X_{t_j})]` at every coarse index.
///
/// `seed` is the user seed; streams come from its reference namespace, so
/// they never coincide with a path bank built from the same seed.
pub fn euler_maruyama_run(
    model: &ModelSpec,
    grid: &TimeGrid,
    x0: &[f64],
    samples: usize,
    seed: u64,
    phi: &ObservableSpec,
) -> Result<Vec<Estimate>> {
    check_inputs(model, grid, x0, samples)?;
    phi.validate(model.dim())?;
    let steps = grid.coarse_steps();
    let stream_seed = derive_seed(seed, SeedDomain::Reference);
    let blocks: Vec<Result<Vec<Moments>>> = (0..samples.div_ceil(BLOCK))
        .into_par_iter()
        .map(|b| {
            let mut acc = vec![Moments::default(); steps + 1];
            for i in b * BLOCK..((b + 1) * BLOCK).min(samples) {
                simulate_sample(model, grid, x0, stream_seed, i, |j, x| acc[j].push(phi.eval(x)))?;
            }
            Ok(acc)
        })
        .collect();
    let mut total = vec![Moments::default(); steps + 1];
    for block in blocks {
        for (t, m) in total.iter_mut().zip(block?) {
            t.merge(&m);
        }
    }
    Ok(total.iter().map(Moments::estimate).collect())
}

/// Reference states at coarse index `j`, `samples x d`, from the same
/// streams as [`euler_maruyama_run`].
pub fn euler_maruyama_states(
    model: &ModelSpec,
    grid: &TimeGrid,
    x0: &[f64],
    samples: usize,
    seed: u64,
    j: usize,
) -> Result<Vec<f64>> {
    check_inputs(model, grid, x0, samples)?;
    if j > grid.coarse_steps() {
        return Err(Error::invalid(format!("coarse index {j} out of range")));
    }
    let d = model.dim();
    let stream_seed = derive_seed(seed, SeedDomain::Reference);
    let mut out = vec![0.0; samples * d];
    out.par_chunks_mut(d)
        .enumerate()
        .map(|(i, row)| {
            simulate_sample(model, grid, x0, stream_seed, i, |k, x| {
                if k == j {
                    row.copy_from_slice(x)
                }
            })
        })
        .collect::<Result<()>>()?;
    Ok(out)
}

/// Distance of one iterate from the reference.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AbsoluteError {
    pub iteration: usize,
    /// `sup_j |u^n_j - ref_j|`.
    pub sup: f64,
    /// `|u^n_J - ref_J|`.
    pub at_horizon: f64,
}

impl AbsoluteError {
    pub fn log10_sup(&self) -> f64 {
        self.sup.log10()
    }

    pub fn log10_at_horizon(&self) -> f64 {
        self.at_horizon.log10()
    }
}

/// Absolute error of every iterate `u^0..u^N` against a reference series.
pub fn compare(iterates: &[Vec<f64>], reference: &[f64]) -> Result<Vec<AbsoluteError>> {
    iterates
        .iter()
        .enumerate()
        .map(|(n, u)| {
            if u.len() != reference.len() || u.is_empty() {
                return Err(Error::GridMismatch(format!(
                    "iterate has {} coarse points, reference has {}",
                    u.len(),
                    reference.len()
                )));
            }
            let diffs: Vec<f64> = u.iter().zip(reference).map(|(a, b)| (a - b).abs()).collect();
            Ok(AbsoluteError {
                iteration: n,
                sup: diffs.iter().copied().fold(0.0, f64::max),
                at_horizon: *diffs.last().unwrap(),
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::deterministic::euler_ode;
    use crate::linear::{LinearOperator, NoiseSpec};
    use crate::models::DriftSpec;
    use approx::assert_relative_eq;

    fn ou(sigma: f64, drift: DriftSpec) -> ModelSpec {
        ModelSpec::new(
            LinearOperator::diagonal(vec![-1.0]).unwrap(),
            NoiseSpec::new(sigma).unwrap(),
            &drift,
        )
        .unwrap()
    }

    #[test]
    fn ou_mean() {
        let grid = TimeGrid::new(1.0, 1e-3, 1e-2).unwrap();
        let est = euler_maruyama_run(&ou(1.0, DriftSpec::Zero), &grid, &[1.0], 20_000, 1, &ObservableSpec::Coordinate { index: 0 }).unwrap();
        let last = est[100];
        // Euler mean is 0.999^1000 x0; the analytic e^{-1} differs by 2e-4
        assert!((last.value - (-1.0f64).exp()).abs() <= 3.0 * last.stderr, "{last:?}");
        assert_eq!(est[0].value, 1.0);
        assert_eq!(est[0].stderr, 0.0);
    }

    #[test]
    fn ou_indicator() {
        let grid = TimeGrid::new(1.0, 1e-3, 1e-2).unwrap();
        let phi = ObservableSpec::IndicatorNormBall { radius: 1.0, complement: false };
        let est = euler_maruyama_run(&ou(1.0, DriftSpec::Zero), &grid, &[0.0], 20_000, 2, &phi).unwrap();
        let last = est[100];
        assert!((last.value - 0.128_293_311).abs() <= 3.0 * last.stderr, "{last:?}");
        assert!((0.0..=1.0).contains(&last.value));
    }

    #[test]
    fn deterministic_limit() {
        let grid = TimeGrid::new(1.0, 1e-3, 1e-2).unwrap();
        let drift = DriftSpec::CubicBounded { b0: 2.0, ybar: vec![2.0] };
        let model = ou(0.0, drift);
        let phi = ObservableSpec::Coordinate { index: 0 };
        let est = euler_maruyama_run(&model, &grid, &[1.0], 50, 3, &phi).unwrap();
        let y = euler_ode(&model, &grid, &[1.0]).unwrap();
        for j in 0..=100 {
            assert_eq!(est[j].stderr, 0.0);
            assert_relative_eq!(est[j].value, y.coarse_state(j)[0], max_relative = 1e-14);
        }
    }

    #[test]
    fn disjoint_seeds_agree_statistically() {
        let grid = TimeGrid::new(1.0, 1e-3, 1e-2).unwrap();
        let model = ou(1.0, DriftSpec::CubicBounded { b0: 2.0, ybar: vec![2.0] });
        let phi = ObservableSpec::Coordinate { index: 0 };
        let a = euler_maruyama_run(&model, &grid, &[1.0], 10_000, 10, &phi).unwrap()[100];
        let b = euler_maruyama_run(&model, &grid, &[1.0], 10_000, 11, &phi).unwrap()[100];
        assert!((a.value - b.value).abs() <= 3.0 * (a.stderr.powi(2) + b.stderr.powi(2)).sqrt());
    }

    #[test]
    fn weak_order_one() {
        // common streams across step sizes are not needed: the drift-free OU
        // mean is deterministic, so E[X] is checked against (1 - dt)^n exactly
        let model = ou(1.0, DriftSpec::Zero);
        let phi = ObservableSpec::Coordinate { index: 0 };
        let mut gaps = Vec::new();
        for dt in [4e-3, 2e-3, 1e-3] {
            let grid = TimeGrid::new(1.0, dt, 2e-2).unwrap();
            let zero_noise = model.with_noise(NoiseSpec::new(0.0).unwrap());
            let est = euler_maruyama_run(&zero_noise, &grid, &[1.0], 1, 0, &phi).unwrap();
            gaps.push((est[50].value - (-1.0f64).exp()).abs());
        }
        assert!((gaps[0] / gaps[1] - 2.0).abs() < 0.05, "{gaps:?}");
        assert!((gaps[1] / gaps[2] - 2.0).abs() < 0.05, "{gaps:?}");
    }

    #[test]
    fn states_match_run() {
        let grid = TimeGrid::new(0.5, 1e-2, 5e-2).unwrap();
        let model = ou(1.0, DriftSpec::Zero);
        let phi = ObservableSpec::Coordinate { index: 0 };
        let run = euler_maruyama_run(&model, &grid, &[1.0], 300, 4, &phi).unwrap();
        let states = euler_maruyama_states(&model, &grid, &[1.0], 300, 4, 10).unwrap();
        assert_relative_eq!(Estimate::from_values(&states).value, run[10].value, max_relative = 1e-12);
    }

    #[test]
    fn blow_up_is_reported() {
        let model = ou(1.0, DriftSpec::QuadraticSimple { b0: -1.0, ybar: vec![0.0] });
        let grid = TimeGrid::new(5.0, 1e-2, 1e-2).unwrap();
        let err = euler_maruyama_run(&model, &grid, &[3.0], 4, 0, &ObservableSpec::CoordinateMean).unwrap_err();
        assert!(matches!(err, Error::NonFiniteState { sample: Some(_), .. }));
    }

    #[test]
    fn compare_tables() {
        let u = vec![vec![0.5, 0.5], vec![0.52, 0.5]];
        let r = vec![0.52, 0.52];
        let e = compare(&u, &r).unwrap();
        assert_relative_eq!(e[0].sup, 0.02, epsilon = 1e-15);
        assert_relative_eq!(e[0].at_horizon, 0.02, epsilon = 1e-15);
        assert_relative_eq!(e[1].sup, 0.02, epsilon = 1e-15);
        assert_eq!(compare(&[r.clone()], &r).unwrap()[0].sup, 0.0);
        assert!(compare(&[vec![1.0]], &r).is_err());
    }

    #[test]
    fn moments_merge_matches_single_pass() {
        let xs: Vec<f64> = (0..1000).map(|i| ((i * 37) % 101) as f64 / 7.0).collect();
        let whole = Estimate::from_values(&xs);
        let mut merged = Moments::default();
        for chunk in xs.chunks(64) {
            let mut m = Moments::default();
            chunk.iter().for_each(|&x| m.push(x));
            merged.merge(&m);
        }
        let merged = merged.estimate();
        assert_relative_eq!(merged.value, whole.value, max_relative = 1e-12);
        assert_relative_eq!(merged.stderr, whole.stderr, max_relative = 1e-10);
    }
}
