//! Experiment configuration in a line-oriented `section.key = value` format.
//!
//! ```text
//! # cubic cut-off drift, indicator observable
//! model.kind = cubic_bounded
//! model.d = 10
//! grid.T = 1
//! run.x0 = e
//! observable.kind = indicator_norm_ball
//! ```
//!
//! `#` starts a comment. Every key is optional except `model.kind` and
//! `model.d`; unknown keys are rejected. Vectors (`model.ybar`, `run.x0`)
//! accept `e` (all ones), `e1` (first basis vector), `zero`, a scaled ones
//! vector such as `2e`, or an explicit comma-separated list. Parsing reports
//! every problem at once.
//!
//! | key | default |
//! |-----|---------|
//! | `model.spectrum` | `laplacian` (`dyadic` when `model.kind = dyadic`) |
//! | `model.sigma` | 1 |
//! | `model.epsilon` | 0.5 (`linear_scale`) |
//! | `model.b0` | 2 (`cubic_bounded`), 1 (`quadratic_simple`) |
//! | `model.ybar` | `2e` |
//! | `model.lambda`, `model.forcing` | 1.1, 2 (`dyadic`) |
//! | `grid.T`, `grid.dt_fine`, `grid.dt_coarse` | 1, 1e-3, 1e-2 |
//! | `run.samples`, `run.seed` | 10000, 0 |
//! | `run.tol`, `run.max_iter` | 1e-2, 10 |
//! | `run.x0`, `run.shift` | `e`, `true` |
//! | `run.clip_weights` | `none` |
//! | `run.divergence_threshold` | 1e8 (`none` disables) |
//! | `run.storage` | `dense` (`on_demand`) |
//! | `run.quadrature` | `left_point` (`literal`) |
//! | `run.convolution` | `exponential` (`rectangle`) |
//! | `observable.kind` | `indicator_norm_ball` |
//! | `observable.radius`, `observable.complement` | 1, `false` |
//! | `observable.index` | 0 |
//! | `observable.axes`, `observable.bounds` | `0,1`, `-1,1,-1,1` (`indicator_cell`) |
//! | `reference.samples`, `reference.dt_fine` | 20000, 1e-3 |
//! | `reference.seed` | `run.seed` |
//! | `output.dir` | `out` |

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::PathBuf;

use sha2::{Digest, Sha256};

use crate::deterministic::{ConvolutionRule, TableStorage};
use crate::engine::{EngineOptions, Quadrature, DEFAULT_DIVERGENCE_THRESHOLD, DEFAULT_MAX_ITER, DEFAULT_TOL};
use crate::error::{Error, Result};
use crate::grid::TimeGrid;
use crate::models::{build_spectrum, DriftSpec, ModelSpec, ObservableSpec, Rect, SpectrumKind};
use crate::linear::NoiseSpec;

const KEYS: &[&str] = &[
    "model.kind",
    "model.d",
    "model.spectrum",
    "model.sigma",
    "model.epsilon",
    "model.b0",
    "model.ybar",
    "model.lambda",
    "model.forcing",
    "grid.T",
    "grid.dt_fine",
    "grid.dt_coarse",
    "run.samples",
    "run.seed",
    "run.tol",
    "run.max_iter",
    "run.x0",
    "run.shift",
    "run.clip_weights",
    "run.divergence_threshold",
    "run.storage",
    "run.quadrature",
    "run.convolution",
    "observable.kind",
    "observable.radius",
    "observable.complement",
    "observable.index",
    "observable.axes",
    "observable.bounds",
    "reference.samples",
    "reference.dt_fine",
    "reference.seed",
    "output.dir",
];

/// A length-`d` vector given symbolically.
#[derive(Debug, Clone, PartialEq)]
pub enum VectorSpec {
    Ones,
    First,
    Zero,
    ScaledOnes(f64),
    List(Vec<f64>),
}

impl VectorSpec {
    pub fn parse(text: &str) -> std::result::Result<Self, String> {
        let t = text.trim();
        match t {
            "e" => return Ok(VectorSpec::Ones),
            "e1" => return Ok(VectorSpec::First),
            "zero" | "0" => return Ok(VectorSpec::Zero),
            _ => {}
        }
        if let Some(c) = t.strip_suffix('e') {
            if let Ok(c) = c.trim().parse::<f64>() {
                return Ok(VectorSpec::ScaledOnes(c));
            }
        }
        let list: std::result::Result<Vec<f64>, _> = t.split(',').map(|v| v.trim().parse::<f64>()).collect();
        match list {
            Ok(v) if !v.is_empty() => Ok(VectorSpec::List(v)),
            _ => Err(format!("expected e, e1, zero, <c>e or a comma-separated list, got `{t}`")),
        }
    }

    pub fn resolve(&self, d: usize) -> std::result::Result<Vec<f64>, String> {
        Ok(match self {
            VectorSpec::Ones => vec![1.0; d],
            VectorSpec::First => (0..d).map(|k| if k == 0 { 1.0 } else { 0.0 }).collect(),
            VectorSpec::Zero => vec![0.0; d],
            VectorSpec::ScaledOnes(c) => vec![*c; d],
            VectorSpec::List(v) if v.len() == d => v.clone(),
            VectorSpec::List(v) => return Err(format!("has {} entries, model.d = {d}", v.len())),
        })
    }

    fn render(&self) -> String {
        match self {
            VectorSpec::Ones => "e".into(),
            VectorSpec::First => "e1".into(),
            VectorSpec::Zero => "zero".into(),
            VectorSpec::ScaledOnes(c) => format!("{c}e"),
            VectorSpec::List(v) => join(v),
        }
    }
}

fn join(v: &[f64]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub d: usize,
    pub spectrum: SpectrumKind,
    pub sigma: f64,
    pub drift: DriftSpec,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub samples: usize,
    pub seed: u64,
    pub x0: VectorSpec,
    pub options: EngineOptions,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReferenceConfig {
    pub samples: usize,
    pub dt_fine: f64,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub model: ModelConfig,
    pub grid: TimeGrid,
    pub run: RunConfig,
    pub observable: ObservableSpec,
    pub reference: ReferenceConfig,
    pub output_dir: PathBuf,
}

impl ExperimentConfig {
    pub fn build_model(&self) -> Result<ModelSpec> {
        let op = build_spectrum(self.model.spectrum, self.model.d)?;
        ModelSpec::new(op, NoiseSpec::new(self.model.sigma)?, &self.model.drift)
    }

    pub fn x0(&self) -> Vec<f64> {
        self.run.x0.resolve(self.model.d).expect("validated at parse time")
    }

    /// The reference simulator's grid: same horizon and coarse step.
    pub fn reference_grid(&self) -> Result<TimeGrid> {
        TimeGrid::new(self.grid.horizon(), self.reference.dt_fine, self.grid.dt_coarse())
    }

    /// Every key with its resolved value, one per line in key order.
    pub fn canonical_text(&self) -> String {
        let mut m: BTreeMap<&str, String> = BTreeMap::new();
        let c = self;
        m.insert("model.d", c.model.d.to_string());
        m.insert("model.sigma", c.model.sigma.to_string());
        match c.model.spectrum {
            SpectrumKind::Laplacian1D => m.insert("model.spectrum", "laplacian".into()),
            SpectrumKind::Dyadic { lambda } => {
                m.insert("model.lambda", lambda.to_string());
                m.insert("model.spectrum", "dyadic".into())
            }
        };
        m.insert("model.kind", c.model.drift.name().into());
        match &c.model.drift {
            DriftSpec::Zero => {}
            DriftSpec::LinearScale { epsilon } => {
                m.insert("model.epsilon", epsilon.to_string());
            }
            DriftSpec::CubicBounded { b0, ybar } | DriftSpec::QuadraticSimple { b0, ybar } => {
                m.insert("model.b0", b0.to_string());
                m.insert("model.ybar", join(ybar));
            }
            DriftSpec::Dyadic { lambda, forcing } => {
                m.insert("model.lambda", lambda.to_string());
                m.insert("model.forcing", forcing.to_string());
            }
        }
        m.insert("grid.T", c.grid.horizon().to_string());
        m.insert("grid.dt_fine", c.grid.dt_fine().to_string());
        m.insert("grid.dt_coarse", c.grid.dt_coarse().to_string());
        let o = &c.run.options;
        m.insert("run.samples", c.run.samples.to_string());
        m.insert("run.seed", c.run.seed.to_string());
        m.insert("run.tol", o.tol.to_string());
        m.insert("run.max_iter", o.max_iter.to_string());
        m.insert("run.x0", c.run.x0.render());
        m.insert("run.shift", o.shift.to_string());
        m.insert("run.clip_weights", o.clip_weights.map_or("none".into(), |v| v.to_string()));
        m.insert("run.divergence_threshold", o.divergence_threshold.map_or("none".into(), |v| v.to_string()));
        m.insert("run.quadrature", match o.quadrature {
            Quadrature::Literal => "literal".into(),
            Quadrature::LeftPoint => "left_point".into(),
        });
        m.insert("run.convolution", match o.convolution {
            ConvolutionRule::Rectangle => "rectangle".into(),
            ConvolutionRule::Exponential => "exponential".into(),
        });
        m.insert("run.storage", match o.storage {
            TableStorage::Dense => "dense".into(),
            TableStorage::OnDemand => "on_demand".into(),
        });
        match &c.observable {
            ObservableSpec::IndicatorNormBall { radius, complement } => {
                m.insert("observable.kind", "indicator_norm_ball".into());
                m.insert("observable.radius", radius.to_string());
                m.insert("observable.complement", complement.to_string());
            }
            ObservableSpec::CoordinateMean => {
                m.insert("observable.kind", "coordinate_mean".into());
            }
            ObservableSpec::Coordinate { index } => {
                m.insert("observable.kind", "coordinate".into());
                m.insert("observable.index", index.to_string());
            }
            ObservableSpec::Sin { index } => {
                m.insert("observable.kind", "sin".into());
                m.insert("observable.index", index.to_string());
            }
            ObservableSpec::IndicatorCell { axes, rect } => {
                m.insert("observable.kind", "indicator_cell".into());
                m.insert("observable.axes", format!("{},{}", axes.0, axes.1));
                m.insert("observable.bounds", join(&[rect.x_lo, rect.x_hi, rect.y_lo, rect.y_hi]));
            }
        }
        m.insert("reference.samples", c.reference.samples.to_string());
        m.insert("reference.dt_fine", c.reference.dt_fine.to_string());
        m.insert("reference.seed", c.reference.seed.to_string());
        m.insert("output.dir", c.output_dir.display().to_string());
        let mut out = String::new();
        for (k, v) in m {
            let _ = writeln!(out, "{k} = {v}");
        }
        out
    }

    /// Hex SHA-256 of [`ExperimentConfig::canonical_text`].
    pub fn hash(&self) -> String {
        Sha256::digest(self.canonical_text().as_bytes()).iter().map(|b| format!("{b:02x}")).collect()
    }
}

struct Entries {
    values: BTreeMap<String, (usize, String)>,
    errors: Vec<String>,
}

impl Entries {
    fn raw(&self, key: &str) -> Option<&str> {
        self.values.get(key).map(|(_, v)| v.as_str())
    }

    fn get<T>(&mut self, key: &str, default: T, parse: impl Fn(&str) -> std::result::Result<T, String>) -> T {
        match self.values.get(key) {
            None => default,
            Some((line, v)) => match parse(v) {
                Ok(x) => x,
                Err(e) => {
                    self.errors.push(format!("line {line}: {key}: {e}"));
                    default
                }
            },
        }
    }

    fn float(&mut self, key: &str, default: f64) -> f64 {
        self.get(key, default, parse_f64)
    }

    fn count(&mut self, key: &str, default: usize) -> usize {
        self.get(key, default, parse_count)
    }

    fn optional(&mut self, key: &str, default: Option<f64>) -> Option<f64> {
        self.get(key, default, |v| if v == "none" { Ok(None) } else { parse_f64(v).map(Some) })
    }

    fn flag(&mut self, key: &str, default: bool) -> bool {
        self.get(key, default, |v| match v {
            "true" | "yes" | "on" | "1" => Ok(true),
            "false" | "no" | "off" | "0" => Ok(false),
            _ => Err(format!("expected true or false, got `{v}`")),
        })
    }

    fn unused(&mut self, key: &str, why: &str) {
        if let Some((line, _)) = self.values.get(key) {
            self.errors.push(format!("line {line}: {key} does not apply {why}"));
        }
    }
}

fn parse_f64(v: &str) -> std::result::Result<f64, String> {
    v.parse::<f64>()
        .ok()
        .filter(|x| x.is_finite())
        .ok_or_else(|| format!("expected a finite number, got `{v}`"))
}

/// Non-negative integer, also written as `1e4`.
fn parse_count(v: &str) -> std::result::Result<usize, String> {
    if let Ok(n) = v.parse::<usize>() {
        return Ok(n);
    }
    match v.parse::<f64>() {
        Ok(x) if x >= 0.0 && x.fract() == 0.0 && x < 2f64.powi(53) => Ok(x as usize),
        _ => Err(format!("expected a non-negative integer, got `{v}`")),
    }
}

fn parse_pair(v: &str) -> std::result::Result<(usize, usize), String> {
    let parts: Vec<&str> = v.split(',').map(str::trim).collect();
    match parts.as_slice() {
        [a, b] => Ok((parse_count(a)?, parse_count(b)?)),
        _ => Err(format!("expected two comma-separated indices, got `{v}`")),
    }
}

fn parse_rect(v: &str) -> std::result::Result<Rect, String> {
    let parts: std::result::Result<Vec<f64>, String> = v.split(',').map(|p| parse_f64(p.trim())).collect();
    match parts?.as_slice() {
        &[x_lo, x_hi, y_lo, y_hi] => Ok(Rect { x_lo, x_hi, y_lo, y_hi }),
        _ => Err(format!("expected x_lo,x_hi,y_lo,y_hi, got `{v}`")),
    }
}

fn tokenize(text: &str) -> Entries {
    let mut values = BTreeMap::new();
    let mut errors = Vec::new();
    for (n, raw) in text.lines().enumerate() {
        let line = n + 1;
        let body = raw.split('#').next().unwrap().trim();
        if body.is_empty() {
            continue;
        }
        let Some((k, v)) = body.split_once('=') else {
            errors.push(format!("line {line}: expected `key = value`, got `{body}`"));
            continue;
        };
        let (k, v) = (k.trim(), v.trim());
        if !KEYS.contains(&k) {
            errors.push(format!("line {line}: unknown key `{k}`"));
        } else if v.is_empty() {
            errors.push(format!("line {line}: {k} has no value"));
        } else if let Some((first, _)) = values.insert(k.to_string(), (line, v.to_string())) {
            errors.push(format!("line {line}: {k} repeats line {first}"));
        }
    }
    Entries { values, errors }
}

pub fn parse_config(text: &str) -> Result<ExperimentConfig> {
    let mut e = tokenize(text);

    let kind = e.raw("model.kind").map(str::to_string);
    if kind.is_none() {
        e.errors.push("model.kind is required".into());
    }
    let d = match e.raw("model.d") {
        None => {
            e.errors.push("model.d is required".into());
            1
        }
        Some(_) => {
            let d = e.count("model.d", 1);
            if d == 0 {
                e.errors.push("model.d must be positive".into());
            }
            d.max(1)
        }
    };
    let sigma = e.float("model.sigma", 1.0);
    if sigma < 0.0 {
        e.errors.push(format!("model.sigma must be >= 0, got {sigma}"));
    }
    let lambda = e.float("model.lambda", 1.1);
    let ybar_spec = e.get("model.ybar", VectorSpec::ScaledOnes(2.0), VectorSpec::parse);
    let vector = |e: &mut Entries, key: &str, spec: &VectorSpec| match spec.resolve(d) {
        Ok(v) => v,
        Err(msg) => {
            e.errors.push(format!("{key} {msg}"));
            vec![0.0; d]
        }
    };
    let kind_name = kind.as_deref().unwrap_or("zero");
    let drift = match kind_name {
        "zero" => DriftSpec::Zero,
        "linear_scale" => DriftSpec::LinearScale { epsilon: e.float("model.epsilon", 0.5) },
        "cubic_bounded" => DriftSpec::CubicBounded {
            b0: e.float("model.b0", 2.0),
            ybar: vector(&mut e, "model.ybar", &ybar_spec),
        },
        "quadratic_simple" => DriftSpec::QuadraticSimple {
            b0: e.float("model.b0", 1.0),
            ybar: vector(&mut e, "model.ybar", &ybar_spec),
        },
        "dyadic" => DriftSpec::Dyadic { lambda, forcing: e.float("model.forcing", 2.0) },
        other => {
            e.errors.push(format!(
                "model.kind: unknown drift `{other}` (zero, linear_scale, cubic_bounded, quadratic_simple, dyadic)"
            ));
            DriftSpec::Zero
        }
    };
    if !matches!(drift, DriftSpec::LinearScale { .. }) {
        e.unused("model.epsilon", "unless model.kind = linear_scale");
    }
    if !matches!(drift, DriftSpec::CubicBounded { .. } | DriftSpec::QuadraticSimple { .. }) {
        e.unused("model.b0", "to this model.kind");
        e.unused("model.ybar", "to this model.kind");
    }
    if !matches!(drift, DriftSpec::Dyadic { .. }) {
        e.unused("model.forcing", "unless model.kind = dyadic");
    }
    let default_spectrum = if kind_name == "dyadic" { "dyadic" } else { "laplacian" };
    let spectrum = match e.raw("model.spectrum").unwrap_or(default_spectrum) {
        "laplacian" => SpectrumKind::Laplacian1D,
        "dyadic" => SpectrumKind::Dyadic { lambda },
        other => {
            e.errors.push(format!("model.spectrum: unknown spectrum `{other}` (laplacian, dyadic)"));
            SpectrumKind::Laplacian1D
        }
    };
    if kind_name != "dyadic" && spectrum == SpectrumKind::Laplacian1D {
        e.unused("model.lambda", "without a dyadic drift or spectrum");
    }
    if let Err(err) = drift.bind(d) {
        e.errors.push(format!("model: {}", strip(err)));
    }
    if let Err(err) = build_spectrum(spectrum, d) {
        e.errors.push(format!("model.spectrum: {}", strip(err)));
    }

    let horizon = e.float("grid.T", 1.0);
    let dt_fine = e.float("grid.dt_fine", 1e-3);
    let dt_coarse = e.float("grid.dt_coarse", 1e-2);
    let grid = grid_or_errors(&mut e, horizon, dt_fine, dt_coarse, "grid.dt_fine");

    let samples = e.count("run.samples", 10_000);
    if samples == 0 {
        e.errors.push("run.samples must be positive".into());
    }
    let seed = e.get("run.seed", 0u64, |v| v.parse::<u64>().map_err(|_| format!("expected an unsigned integer, got `{v}`")));
    let x0 = e.get("run.x0", VectorSpec::Ones, VectorSpec::parse);
    if let Err(msg) = x0.resolve(d) {
        e.errors.push(format!("run.x0 {msg}"));
    }
    let storage = match e.raw("run.storage").unwrap_or("dense") {
        "dense" => TableStorage::Dense,
        "on_demand" => TableStorage::OnDemand,
        other => {
            e.errors.push(format!("run.storage: expected dense or on_demand, got `{other}`"));
            TableStorage::Dense
        }
    };
    let options = EngineOptions {
        tol: e.float("run.tol", DEFAULT_TOL),
        max_iter: e.count("run.max_iter", DEFAULT_MAX_ITER),
        shift: e.flag("run.shift", true),
        clip_weights: e.optional("run.clip_weights", None),
        divergence_threshold: e.optional("run.divergence_threshold", Some(DEFAULT_DIVERGENCE_THRESHOLD)),
        storage,
        quadrature: match e.raw("run.quadrature").unwrap_or("left_point") {
            "literal" => Quadrature::Literal,
            "left_point" => Quadrature::LeftPoint,
            other => {
                e.errors.push(format!("run.quadrature: expected literal or left_point, got `{other}`"));
                Quadrature::LeftPoint
            }
        },
        convolution: match e.raw("run.convolution").unwrap_or("exponential") {
            "rectangle" => ConvolutionRule::Rectangle,
            "exponential" => ConvolutionRule::Exponential,
            other => {
                e.errors.push(format!("run.convolution: expected rectangle or exponential, got `{other}`"));
                ConvolutionRule::Exponential
            }
        },
    };
    if options.tol <= 0.0 {
        e.errors.push(format!("run.tol must be positive, got {}", options.tol));
    }
    if options.clip_weights.is_some_and(|m| m <= 0.0) {
        e.errors.push("run.clip_weights must be positive".into());
    }
    if options.divergence_threshold.is_some_and(|m| m <= 0.0) {
        e.errors.push("run.divergence_threshold must be positive".into());
    }

    let observable = match e.raw("observable.kind").unwrap_or("indicator_norm_ball").to_string().as_str() {
        "indicator_norm_ball" => ObservableSpec::IndicatorNormBall {
            radius: e.float("observable.radius", 1.0),
            complement: e.flag("observable.complement", false),
        },
        "coordinate_mean" => ObservableSpec::CoordinateMean,
        "coordinate" => ObservableSpec::Coordinate { index: e.count("observable.index", 0) },
        "sin" => ObservableSpec::Sin { index: e.count("observable.index", 0) },
        "indicator_cell" => ObservableSpec::IndicatorCell {
            axes: e.get("observable.axes", (0, 1), parse_pair),
            rect: e.get("observable.bounds", Rect { x_lo: -1.0, x_hi: 1.0, y_lo: -1.0, y_hi: 1.0 }, parse_rect),
        },
        other => {
            e.errors.push(format!(
                "observable.kind: unknown observable `{other}` (indicator_norm_ball, coordinate_mean, coordinate, sin, indicator_cell)"
            ));
            ObservableSpec::CoordinateMean
        }
    };
    if let Err(err) = observable.validate(d) {
        e.errors.push(format!("observable: {}", strip(err)));
    }

    let reference = ReferenceConfig {
        samples: e.count("reference.samples", 20_000),
        dt_fine: e.float("reference.dt_fine", 1e-3),
        seed: e.get("reference.seed", seed, |v| v.parse::<u64>().map_err(|_| format!("expected an unsigned integer, got `{v}`"))),
    };
    if reference.samples == 0 {
        e.errors.push("reference.samples must be positive".into());
    }
    grid_or_errors(&mut e, horizon, reference.dt_fine, dt_coarse, "reference.dt_fine");
    let output_dir = PathBuf::from(e.raw("output.dir").unwrap_or("out"));

    if !e.errors.is_empty() {
        return Err(Error::Config(e.errors));
    }
    Ok(ExperimentConfig {
        model: ModelConfig { d, spectrum, sigma, drift },
        grid: grid.expect("no grid errors"),
        run: RunConfig { samples, seed, x0, options },
        observable,
        reference,
        output_dir,
    })
}

fn strip(err: Error) -> String {
    match err {
        Error::InvalidArgument(m) | Error::InvalidGrid(m) => m,
        other => other.to_string(),
    }
}

fn grid_or_errors(e: &mut Entries, horizon: f64, dt_fine: f64, dt_coarse: f64, fine_key: &str) -> Option<TimeGrid> {
    if dt_fine > 0.0 && dt_coarse > 0.0 {
        let ratio = dt_coarse / dt_fine;
        if (ratio - ratio.round()).abs() > 1e-9 * ratio.max(1.0) || ratio.round() < 1.0 {
            e.errors.push(format!(
                "grid.dt_coarse = {dt_coarse} is not an integer multiple of {fine_key} = {dt_fine}"
            ));
            return None;
        }
    }
    match TimeGrid::new(horizon, dt_fine, dt_coarse) {
        Ok(g) => Some(g),
        Err(err) => {
            e.errors.push(format!("grid.T / grid.dt_coarse / {fine_key}: {}", strip(err)));
            None
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn messages(text: &str) -> Vec<String> {
        match parse_config(text) {
            Err(Error::Config(m)) => m,
            other => panic!("expected config errors, got {other:?}"),
        }
    }

    #[test]
    fn minimal_config_fills_defaults() {
        let c = parse_config("model.kind = cubic_bounded\nmodel.d = 10\ngrid.T = 1\n").unwrap();
        assert_eq!(c.model.drift, DriftSpec::CubicBounded { b0: 2.0, ybar: vec![2.0; 10] });
        assert_eq!(c.model.spectrum, SpectrumKind::Laplacian1D);
        assert_eq!(c.model.sigma, 1.0);
        assert_eq!(c.grid, TimeGrid::new(1.0, 1e-3, 1e-2).unwrap());
        assert_eq!(c.run.samples, 10_000);
        assert_eq!(c.run.options.tol, 1e-2);
        assert_eq!(c.run.options.max_iter, 10);
        assert!(c.run.options.shift);
        assert_eq!(c.run.options.clip_weights, None);
        assert_eq!(c.x0(), vec![1.0; 10]);
        assert_eq!(c.observable, ObservableSpec::IndicatorNormBall { radius: 1.0, complement: false });
        assert_eq!(c.reference, ReferenceConfig { samples: 20_000, dt_fine: 1e-3, seed: 0 });
        assert_eq!(c.output_dir, PathBuf::from("out"));
    }

    #[test]
    fn non_multiple_steps_name_both_keys() {
        let m = messages("model.kind = zero\nmodel.d = 1\ngrid.dt_fine = 0.003\ngrid.dt_coarse = 0.01\n");
        assert!(m.iter().any(|s| s.contains("grid.dt_coarse") && s.contains("grid.dt_fine")), "{m:?}");
    }

    #[test]
    fn paper_figure_setup_accepted() {
        let text = "model.kind = cubic_bounded\nmodel.d = 100\nrun.samples = 1e4\ngrid.dt_coarse = 1e-2\n\
                    observable.kind = indicator_norm_ball\nobservable.radius = 1\nrun.x0 = e\n";
        let c = parse_config(text).unwrap();
        assert_eq!(c.run.samples, 10_000);
        assert_eq!(c.model.d, 100);
    }

    #[test]
    fn collects_every_error() {
        let m = messages("model.kind = cubic\nmodel.dd = 3\nrun.tol = -1\nrun.x0 = 1,2\nobservable.kind = coordinate\nobservable.index = 9\nnonsense\n");
        assert!(m.len() >= 6, "{m:?}");
        assert!(m.iter().any(|s| s.contains("unknown key `model.dd`")));
        assert!(m.iter().any(|s| s.contains("model.d is required")));
        assert!(m.iter().any(|s| s.contains("unknown drift")));
        assert!(m.iter().any(|s| s.contains("run.tol")));
        assert!(m.iter().any(|s| s.contains("expected `key = value`")));
    }

    #[test]
    fn vector_specs() {
        assert_eq!(VectorSpec::parse("e1").unwrap().resolve(3).unwrap(), vec![1.0, 0.0, 0.0]);
        assert_eq!(VectorSpec::parse("2e").unwrap().resolve(2).unwrap(), vec![2.0, 2.0]);
        assert_eq!(VectorSpec::parse("0.5, -1").unwrap().resolve(2).unwrap(), vec![0.5, -1.0]);
        assert_eq!(VectorSpec::parse("zero").unwrap().resolve(2).unwrap(), vec![0.0, 0.0]);
        assert!(VectorSpec::parse("0.5,-1").unwrap().resolve(3).is_err());
        assert!(VectorSpec::parse("x").is_err());
    }

    #[test]
    fn comments_duplicates_and_misplaced_keys() {
        let c = parse_config("# header\nmodel.kind = dyadic # trailing\nmodel.d = 4\n\n").unwrap();
        assert_eq!(c.model.spectrum, SpectrumKind::Dyadic { lambda: 1.1 });
        assert_eq!(c.model.drift, DriftSpec::Dyadic { lambda: 1.1, forcing: 2.0 });
        let m = messages("model.kind = zero\nmodel.d = 1\nmodel.d = 2\nmodel.b0 = 3\n");
        assert!(m.iter().any(|s| s.contains("repeats line 2")));
        assert!(m.iter().any(|s| s.contains("model.b0 does not apply")));
    }

    #[test]
    fn canonical_text_round_trips() {
        let text = "model.kind = quadratic_simple\nmodel.d = 3\nrun.seed = 7\nrun.clip_weights = 100\nobservable.kind = indicator_cell\nobservable.bounds = -2,2,-1,1\n";
        let c = parse_config(text).unwrap();
        let again = parse_config(&c.canonical_text()).unwrap();
        assert_eq!(c, again);
        assert_eq!(c.hash(), again.hash());
        assert_eq!(c.hash().len(), 64);
        let other = parse_config("model.kind = quadratic_simple\nmodel.d = 3\nrun.seed = 8\n").unwrap();
        assert_ne!(c.hash(), other.hash());
    }

    #[test]
    fn builds_models() {
        let c = parse_config("model.kind = linear_scale\nmodel.d = 5\nmodel.epsilon = 0.5\n").unwrap();
        let m = c.build_model().unwrap();
        assert_eq!(m.operator().eigenvalues(), &[-1.0, -4.0, -9.0, -16.0, -25.0]);
        assert_eq!(c.reference_grid().unwrap().dt_fine(), 1e-3);
    }
}
