//! Drift models `B0`, diagonal spectra for `A`, and observables `phi`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linear::{LinearOperator, NoiseSpec};

/// Nonlinear drift `B0(t, x)`. Every model here is time independent; the
/// time argument is kept in [`Drift::eval`] for interface generality.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DriftSpec {
    Zero,
    /// `B0(x) = epsilon * x`; the SDE stays Gaussian, which gives an exact oracle.
    LinearScale { epsilon: f64 },
    /// Cubic restoring force towards `ybar` with a cut-off for large `|ybar - x|`.
    CubicBounded { b0: f64, ybar: Vec<f64> },
    /// `b0 (ybar_i - x_i) |ybar_i - x_i|`, unbounded and of quadratic growth.
    QuadraticSimple { b0: f64, ybar: Vec<f64> },
    /// Dyadic shell model with `k_i = lambda^(2i)` and forcing on the first mode.
    Dyadic { lambda: f64, forcing: f64 },
}

impl DriftSpec {
    pub fn name(&self) -> &'static str {
        match self {
            DriftSpec::Zero => "zero",
            DriftSpec::LinearScale { .. } => "linear_scale",
            DriftSpec::CubicBounded { .. } => "cubic_bounded",
            DriftSpec::QuadraticSimple { .. } => "quadratic_simple",
            DriftSpec::Dyadic { .. } => "dyadic",
        }
    }

    /// Validates the parameters for dimension `d` and precomputes constants.
    pub fn bind(&self, d: usize) -> Result<Drift> {
        if d == 0 {
            return Err(Error::invalid("drift dimension must be positive"));
        }
        let check_ybar = |ybar: &[f64]| -> Result<()> {
            if ybar.len() != d {
                return Err(Error::DimensionMismatch {
                    expected: d,
                    got: ybar.len(),
                    context: "drift ybar",
                });
            }
            if ybar.iter().any(|v| !v.is_finite()) {
                return Err(Error::invalid("ybar must be finite"));
            }
            Ok(())
        };
        let kind = match self {
            DriftSpec::Zero => Kind::Zero,
            DriftSpec::LinearScale { epsilon } => {
                if !epsilon.is_finite() {
                    return Err(Error::invalid("epsilon must be finite"));
                }
                Kind::Linear(*epsilon)
            }
            DriftSpec::CubicBounded { b0, ybar } => {
                check_ybar(ybar)?;
                let norm = inf_norm(ybar);
                if !(*b0 > 0.0 && b0.is_finite()) || norm == 0.0 {
                    return Err(Error::invalid("cubic_bounded requires b0 > 0 and ybar != 0"));
                }
                Kind::Cubic {
                    scale: b0 * norm,
                    ybar: ybar.clone(),
                }
            }
            DriftSpec::QuadraticSimple { b0, ybar } => {
                check_ybar(ybar)?;
                if !b0.is_finite() {
                    return Err(Error::invalid("b0 must be finite"));
                }
                Kind::Quadratic {
                    b0: *b0,
                    ybar: ybar.clone(),
                }
            }
            DriftSpec::Dyadic { lambda, forcing } => {
                if !(*lambda > 1.0 && lambda.is_finite()) {
                    return Err(Error::invalid(format!("dyadic lambda must be > 1, got {lambda}")));
                }
                if !forcing.is_finite() {
                    return Err(Error::invalid("dyadic forcing must be finite"));
                }
                Kind::Dyadic {
                    k: dyadic_wavenumbers(*lambda, d),
                    forcing: *forcing,
                }
            }
        };
        Ok(Drift {
            spec: self.clone(),
            dim: d,
            kind,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Kind {
    Zero,
    Linear(f64),
    Cubic { scale: f64, ybar: Vec<f64> },
    Quadratic { b0: f64, ybar: Vec<f64> },
    Dyadic { k: Vec<f64>, forcing: f64 },
}

/// A drift bound to a dimension.
#[derive(Debug, Clone, PartialEq)]
pub struct Drift {
    spec: DriftSpec,
    dim: usize,
    kind: Kind,
}

impl Drift {
    pub fn spec(&self) -> &DriftSpec {
        &self.spec
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn is_zero(&self) -> bool {
        matches!(self.kind, Kind::Zero) || matches!(self.kind, Kind::Linear(e) if e == 0.0)
    }

    /// `out = B0(t, x)`.
    pub fn eval(&self, _t: f64, x: &[f64], out: &mut [f64]) {
        debug_assert_eq!(x.len(), self.dim);
        match &self.kind {
            Kind::Zero => out.fill(0.0),
            Kind::Linear(eps) => {
                for (o, &xi) in out.iter_mut().zip(x) {
                    *o = eps * xi;
                }
            }
            Kind::Cubic { scale, ybar } => {
                let mut dist: f64 = 0.0;
                for (&y, &xi) in ybar.iter().zip(x) {
                    dist = dist.max((y - xi).abs());
                }
                let denom = scale + dist * dist * dist;
                for ((o, &y), &xi) in out.iter_mut().zip(ybar).zip(x) {
                    let u = y - xi;
                    *o = scale * u * u * u.abs() / denom;
                }
            }
            Kind::Quadratic { b0, ybar } => {
                for ((o, &y), &xi) in out.iter_mut().zip(ybar).zip(x) {
                    let u = y - xi;
                    *o = b0 * u * u.abs();
                }
            }
            Kind::Dyadic { k, forcing } => {
                let d = x.len();
                if d == 1 {
                    out[0] = *forcing;
                    return;
                }
                out[0] = forcing - k[0] * x[0] * x[1];
                for i in 1..d - 1 {
                    out[i] = k[i - 1] * x[i - 1] * x[i - 1] - k[i] * x[i] * x[i + 1];
                }
                out[d - 1] = k[d - 2] * x[d - 2] * x[d - 2];
            }
        }
    }

    /// Checked evaluation rejecting non-finite input.
    pub fn eval_checked(&self, t: f64, x: &[f64], out: &mut [f64]) -> Result<()> {
        if x.len() != self.dim || out.len() != self.dim {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                got: x.len(),
                context: "drift argument",
            });
        }
        if let Some(component) = x.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFiniteState {
                sample: None,
                step: 0,
                component,
            });
        }
        self.eval(t, x, out);
        Ok(())
    }
}

fn inf_norm(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |m, x| m.max(x.abs()))
}

/// `k_i = lambda^(2i)` for `i = 1..=d`.
pub fn dyadic_wavenumbers(lambda: f64, d: usize) -> Vec<f64> {
    (1..=d).map(|i| lambda.powi(2 * i as i32)).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SpectrumKind {
    /// `a_k = -k^2`, the spectral Laplacian on the one-dimensional torus.
    Laplacian1D,
    /// `a_i = -lambda^(2i)`, matching the dyadic wavenumbers.
    Dyadic { lambda: f64 },
}

pub fn build_spectrum(kind: SpectrumKind, d: usize) -> Result<LinearOperator> {
    if d == 0 {
        return Err(Error::invalid("spectrum dimension must be positive"));
    }
    let entries = match kind {
        SpectrumKind::Laplacian1D => (1..=d).map(|k| -((k * k) as f64)).collect(),
        SpectrumKind::Dyadic { lambda } => {
            if !(lambda > 1.0 && lambda.is_finite()) {
                return Err(Error::invalid(format!("dyadic lambda must be > 1, got {lambda}")));
            }
            dyadic_wavenumbers(lambda, d).into_iter().map(|k| -k).collect()
        }
    };
    LinearOperator::diagonal(entries)
}

/// Axis-aligned rectangle in a two-dimensional coordinate projection.
/// Membership is half open: `[x_lo, x_hi) x [y_lo, y_hi)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Rect {
    pub x_lo: f64,
    pub x_hi: f64,
    pub y_lo: f64,
    pub y_hi: f64,
}

impl Rect {
    pub fn contains(&self, x: f64, y: f64) -> bool {
        x >= self.x_lo && x < self.x_hi && y >= self.y_lo && y < self.y_hi
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ObservableSpec {
    /// `1{|x|_2 >= radius}`, or `1{|x|_2 < radius}` when `complement` is set.
    IndicatorNormBall { radius: f64, complement: bool },
    CoordinateMean,
    Coordinate { index: usize },
    /// `sin(x_index)`.
    Sin { index: usize },
    IndicatorCell { axes: (usize, usize), rect: Rect },
}

impl ObservableSpec {
    pub fn name(&self) -> &'static str {
        match self {
            ObservableSpec::IndicatorNormBall { .. } => "indicator_norm_ball",
            ObservableSpec::CoordinateMean => "coordinate_mean",
            ObservableSpec::Coordinate { .. } => "coordinate",
            ObservableSpec::Sin { .. } => "sin",
            ObservableSpec::IndicatorCell { .. } => "indicator_cell",
        }
    }

    pub fn validate(&self, d: usize) -> Result<()> {
        match self {
            ObservableSpec::IndicatorNormBall { radius, .. } => {
                if !(*radius > 0.0 && radius.is_finite()) {
                    return Err(Error::invalid(format!("indicator radius must be > 0, got {radius}")));
                }
            }
            ObservableSpec::CoordinateMean => {}
            ObservableSpec::Coordinate { index } | ObservableSpec::Sin { index } => {
                if *index >= d {
                    return Err(Error::invalid(format!("coordinate index {index} out of range for d = {d}")));
                }
            }
            ObservableSpec::IndicatorCell { axes: (p, q), rect } => {
                if *p >= d || *q >= d {
                    return Err(Error::invalid(format!("cell axes ({p}, {q}) out of range for d = {d}")));
                }
                if !(rect.x_lo < rect.x_hi && rect.y_lo < rect.y_hi) {
                    return Err(Error::invalid("cell rectangle is empty"));
                }
            }
        }
        Ok(())
    }

    pub fn eval(&self, x: &[f64]) -> f64 {
        match self {
            ObservableSpec::IndicatorNormBall { radius, complement } => {
                let norm = x.iter().map(|v| v * v).sum::<f64>().sqrt();
                let outside = norm >= *radius;
                if outside != *complement {
                    1.0
                } else {
                    0.0
                }
            }
            ObservableSpec::CoordinateMean => x.iter().sum::<f64>() / x.len() as f64,
            ObservableSpec::Coordinate { index } => x[*index],
            ObservableSpec::Sin { index } => x[*index].sin(),
            ObservableSpec::IndicatorCell { axes: (p, q), rect } => {
                if rect.contains(x[*p], x[*q]) {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }

    pub fn eval_checked(&self, x: &[f64]) -> Result<f64> {
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("observable argument is not finite"));
        }
        Ok(self.eval(x))
    }
}

/// The SDE `dX = (A X + B0(t, X)) dt + sigma dW`.
#[derive(Debug, Clone)]
pub struct ModelSpec {
    operator: LinearOperator,
    noise: NoiseSpec,
    drift: Drift,
}

impl ModelSpec {
    pub fn new(operator: LinearOperator, noise: NoiseSpec, drift: &DriftSpec) -> Result<Self> {
        let drift = drift.bind(operator.dim())?;
        Ok(Self {
            operator,
            noise,
            drift,
        })
    }

    pub fn dim(&self) -> usize {
        self.operator.dim()
    }

    pub fn operator(&self) -> &LinearOperator {
        &self.operator
    }

    pub fn noise(&self) -> &NoiseSpec {
        &self.noise
    }

    pub fn drift(&self) -> &Drift {
        &self.drift
    }

    pub fn with_noise(&self, noise: NoiseSpec) -> Self {
        Self {
            noise,
            ..self.clone()
        }
    }

    /// Explicit Euler stability guard `dt * max|a_k| < 2`.
    pub fn check_step(&self, dt: f64) -> Result<()> {
        let product = dt * self.operator.max_abs_eigenvalue();
        if product < 2.0 {
            Ok(())
        } else {
            Err(Error::UnstableStep { product })
        }
    }
}
