//! Command-line runner: `bank`, `solve`, `reference`, `compare`, `probmap`,
//! `histogram` and `pca`.
//!
//! Every command that reads a config writes its CSV outputs plus a JSON
//! sidecar holding the config hash, the seed and the canonical config text;
//! the sidecar is itself accepted by `--config`. Exit codes: 0 ok, 2 config
//! or argument error, 3 numerical divergence, 4 I/O error.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde_json::{json, Value};

use crate::bank::{generate, PathBank};
use crate::config::{parse_config, ExperimentConfig};
use crate::distribution::{
    cell_probability_map, pca_fit, weighted_histogram, write_histograms_csv, Bins, CellGrid,
};
use crate::engine::{Engine, Outcome, RunReport};
use crate::error::{Error, Result};
use crate::grid::TimeGrid;
use crate::models::{ModelSpec, Rect};
use crate::reference::{compare, euler_maruyama_run, euler_maruyama_states, Estimate};

#[derive(Parser, Debug)]
#[command(name = "kolmo", version, about = "Shifted-Gaussian iterated Kolmogorov solver")]
pub struct Cli {
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Create or describe a path bank file.
    #[command(subcommand)]
    Bank(BankCommand),
    /// Run the iteration; writes series.csv, err.csv and run.json.
    Solve {
        #[command(flatten)]
        solve: SolveArgs,
        /// Also write smoothed.csv, a centered moving mean of every iterate
        /// over this many coarse points.
        #[arg(long)]
        smooth: Option<usize>,
    },
    /// Euler-Maruyama reference; writes reference.csv and reference.json.
    Reference(ConfigArgs),
    /// Absolute error of every iterate in a series CSV against a reference CSV.
    Compare {
        #[arg(long)]
        run: PathBuf,
        #[arg(long = "ref")]
        reference: PathBuf,
        /// Output CSV (default: stdout).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Reweighted cell probability map of a planar projection.
    Probmap {
        #[command(flatten)]
        solve: SolveArgs,
        /// Cells per axis, `nx,ny`.
        #[arg(long, default_value = "40,25")]
        grid: String,
        #[arg(long, default_value = "0,1")]
        axes: String,
        /// `x_lo,x_hi,y_lo,y_hi`; default: reference range padded by 10%.
        #[arg(long)]
        bounds: Option<String>,
        /// Time of the snapshot (default: T).
        #[arg(long)]
        at_time: Option<f64>,
    },
    /// Reference, Gaussian and reweighted Gaussian histograms of one coordinate.
    Histogram {
        #[command(flatten)]
        solve: SolveArgs,
        #[arg(long)]
        component: usize,
        #[arg(long)]
        at_time: Option<f64>,
        #[arg(long, default_value_t = 40)]
        bins: usize,
    },
    /// Projection of reference and Gaussian samples on the reference's principal axes.
    Pca {
        #[command(flatten)]
        solve: SolveArgs,
        #[arg(long)]
        at_time: Option<f64>,
    },
}

#[derive(Subcommand, Debug)]
pub enum BankCommand {
    Generate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    Inspect { file: PathBuf },
}

#[derive(Args, Debug, Clone)]
pub struct ConfigArgs {
    #[arg(long)]
    pub config: PathBuf,
    /// Output directory (default: output.dir from the config).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug, Clone)]
pub struct SolveArgs {
    #[command(flatten)]
    pub common: ConfigArgs,
    /// Reuse a saved path bank instead of generating one.
    #[arg(long)]
    pub bank: Option<PathBuf>,
    /// Use f = 0 instead of the deterministic-path shift.
    #[arg(long)]
    pub no_shift: bool,
    /// Clamp weights to [-M, M].
    #[arg(long)]
    pub clip_weights: Option<f64>,
    /// Reference CSV to add as ref, ref_stderr columns.
    #[arg(long = "ref")]
    pub reference: Option<PathBuf>,
}

/// Reads a config file or a sidecar written by a previous run.
pub fn load_config(path: &Path) -> Result<ExperimentConfig> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    if text.trim_start().starts_with('{') {
        let v: Value = serde_json::from_str(&text)
            .map_err(|e| Error::Config(vec![format!("{}: not a valid sidecar: {e}", path.display())]))?;
        let inner = v.get("config").and_then(Value::as_str).ok_or_else(|| {
            Error::Config(vec![format!("{}: sidecar has no `config` field", path.display())])
        })?;
        return parse_config(inner);
    }
    parse_config(&text)
}

fn write_with(path: &Path, f: impl FnOnce(&mut BufWriter<fs::File>) -> std::io::Result<()>) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    f(&mut w).and_then(|_| w.flush()).map_err(|e| Error::io(path, e))
}

fn write_json(path: &Path, value: &Value) -> Result<()> {
    write_with(path, |w| {
        serde_json::to_writer_pretty(&mut *w, value).map_err(std::io::Error::other)?;
        writeln!(w)
    })
}

fn sidecar(config: &ExperimentConfig, command: &str, seed: u64) -> serde_json::Map<String, Value> {
    let mut m = serde_json::Map::new();
    m.insert("command".into(), json!(command));
    m.insert("config_hash".into(), json!(config.hash()));
    m.insert("seed".into(), json!(seed));
    m.insert("config".into(), json!(config.canonical_text()));
    m
}

fn out_dir(config: &ExperimentConfig, args: &ConfigArgs) -> PathBuf {
    args.out.clone().unwrap_or_else(|| config.output_dir.clone())
}

fn load_bank(path: &Path, config: &ExperimentConfig) -> Result<PathBank> {
    let bank = PathBank::load(path)?;
    let mismatch = |what: String| Error::Config(vec![format!("bank {}: {what}", path.display())]);
    if bank.dim() != config.model.d {
        return Err(mismatch(format!("dimension {} but model.d = {}", bank.dim(), config.model.d)));
    }
    if !bank.grid().same_as(&config.grid) {
        return Err(mismatch(format!("grid {:?} differs from the config grid {:?}", bank.grid(), config.grid)));
    }
    if bank.samples() != config.run.samples {
        return Err(mismatch(format!("{} samples but run.samples = {}", bank.samples(), config.run.samples)));
    }
    Ok(bank)
}

/// A completed (or diverged) solve with everything needed downstream.
struct Solved {
    config: ExperimentConfig,
    model: ModelSpec,
    bank: PathBank,
}

fn prepare(args: &SolveArgs) -> Result<Solved> {
    let mut config = load_config(&args.common.config)?;
    if args.no_shift {
        config.run.options.shift = false;
    }
    if let Some(m) = args.clip_weights {
        config.run.options.clip_weights = Some(m);
    }
    let model = config.build_model()?;
    let bank = match &args.bank {
        Some(path) => load_bank(path, &config)?,
        None => generate(model.operator(), &config.grid, config.run.samples, config.run.seed)?,
    };
    Ok(Solved { config, model, bank })
}

fn read_columns(path: &Path) -> Result<(Vec<String>, Vec<Vec<f64>>)> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let bad = |msg: String| Error::Config(vec![format!("{}: {msg}", path.display())]);
    let mut lines = text.lines();
    let header: Vec<String> = lines.next().ok_or_else(|| bad("empty CSV".into()))?.split(',').map(str::to_string).collect();
    let mut cols = vec![Vec::new(); header.len()];
    for (n, line) in lines.enumerate() {
        let cells: Vec<&str> = line.split(',').collect();
        if cells.len() != header.len() {
            return Err(bad(format!("row {} has {} fields, header has {}", n + 2, cells.len(), header.len())));
        }
        for (c, v) in cols.iter_mut().zip(cells) {
            c.push(v.parse::<f64>().map_err(|_| bad(format!("row {}: `{v}` is not a number", n + 2)))?);
        }
    }
    Ok((header, cols))
}

fn column<'a>(header: &[String], cols: &'a [Vec<f64>], name: &str, path: &Path) -> Result<&'a [f64]> {
    header
        .iter()
        .position(|h| h == name)
        .map(|k| cols[k].as_slice())
        .ok_or_else(|| Error::Config(vec![format!("{}: no `{name}` column", path.display())]))
}

fn read_reference(path: &Path, grid: &TimeGrid) -> Result<Vec<Estimate>> {
    let (header, cols) = read_columns(path)?;
    let value = column(&header, &cols, "ref", path)?;
    let stderr = column(&header, &cols, "ref_stderr", path)?;
    if value.len() != grid.coarse_steps() + 1 {
        return Err(Error::GridMismatch(format!(
            "{} has {} rows, the grid has {} coarse points",
            path.display(),
            value.len(),
            grid.coarse_steps() + 1
        )));
    }
    Ok(value.iter().zip(stderr).map(|(&v, &s)| Estimate { value: v, stderr: s, samples: 0 }).collect())
}

fn write_reference_csv(grid: &TimeGrid, est: &[Estimate], w: &mut impl Write) -> std::io::Result<()> {
    writeln!(w, "j,t,ref,ref_stderr")?;
    for (j, e) in est.iter().enumerate() {
        writeln!(w, "{j},{},{},{}", grid.coarse_time(j), e.value, e.stderr)?;
    }
    Ok(())
}

fn run_engine<'a>(s: &'a Solved) -> Result<(Engine<'a>, RunReport)> {
    let c = &s.config;
    let mut engine = Engine::new(&s.model, &s.bank, &c.x0(), &c.observable, c.run.options)?;
    let report = engine.run(c.run.seed)?;
    Ok((engine, report))
}

/// Reports a diverged run on stderr and returns its exit code.
fn diverged_exit(report: &RunReport) -> Option<i32> {
    match &report.outcome {
        Outcome::Diverged { message, .. } => {
            eprintln!(
                "error: weights diverged after {} completed iteration(s): {message}",
                report.iterations()
            );
            Some(3)
        }
        _ => None,
    }
}

fn solve(args: &SolveArgs, smooth: Option<usize>) -> Result<i32> {
    if smooth == Some(0) {
        return Err(Error::Config(vec!["--smooth must be positive".into()]));
    }
    let s = prepare(args)?;
    let (_, report) = run_engine(&s)?;
    let dir = out_dir(&s.config, &args.common);
    let reference = args.reference.as_ref().map(|p| read_reference(p, &s.config.grid)).transpose()?;
    write_with(&dir.join("series.csv"), |w| report.write_series_csv(reference.as_deref(), w))?;
    write_with(&dir.join("err.csv"), |w| report.write_err_csv(w))?;
    if let Some(window) = smooth {
        write_with(&dir.join("smoothed.csv"), |w| report.write_smoothed_csv(window, w))?;
    }
    let mut meta = sidecar(&s.config, "solve", s.config.run.seed);
    meta.insert("bank_checksum".into(), json!(hex(&s.bank.checksum())));
    meta.insert("report".into(), serde_json::to_value(&report).map_err(|e| Error::invalid(e.to_string()))?);
    if let Some(r) = &reference {
        let values: Vec<f64> = r.iter().map(|e| e.value).collect();
        let table = compare(&report.u, &values)?;
        meta.insert("absolute_error".into(), serde_json::to_value(table).map_err(|e| Error::invalid(e.to_string()))?);
    }
    write_json(&dir.join("run.json"), &Value::Object(meta))?;
    summarize(&report);
    Ok(diverged_exit(&report).unwrap_or(0))
}

fn summarize(report: &RunReport) {
    eprintln!(
        "{} iteration(s), outcome {:?}, u(T) = {}",
        report.iterations(),
        report.outcome,
        report.final_value()
    );
    for (n, e) in report.err_history.iter().enumerate() {
        eprintln!("  err({}) = {e:e}", n + 1);
    }
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn reference(args: &ConfigArgs) -> Result<i32> {
    let config = load_config(&args.config)?;
    let model = config.build_model()?;
    let grid = config.reference_grid()?;
    let est = euler_maruyama_run(&model, &grid, &config.x0(), config.reference.samples, config.reference.seed, &config.observable)?;
    let dir = out_dir(&config, args);
    write_with(&dir.join("reference.csv"), |w| write_reference_csv(&grid, &est, w))?;
    let mut meta = sidecar(&config, "reference", config.reference.seed);
    meta.insert("samples".into(), json!(config.reference.samples));
    meta.insert("dt_fine".into(), json!(config.reference.dt_fine));
    write_json(&dir.join("reference.json"), &Value::Object(meta))?;
    Ok(0)
}

fn compare_cmd(run: &Path, reference: &Path, out: Option<&Path>) -> Result<i32> {
    let (header, cols) = read_columns(run)?;
    let iterates: Vec<Vec<f64>> = header
        .iter()
        .zip(&cols)
        .filter(|(h, _)| h.starts_with('u') && h[1..].parse::<usize>().is_ok())
        .map(|(_, c)| c.clone())
        .collect();
    if iterates.is_empty() {
        return Err(Error::Config(vec![format!("{}: no u<n> columns", run.display())]));
    }
    let (rh, rc) = read_columns(reference)?;
    let r = column(&rh, &rc, "ref", reference)?;
    let table = compare(&iterates, r)?;
    let render = |w: &mut dyn Write| -> std::io::Result<()> {
        writeln!(w, "n,sup_abs_err,abs_err_T,log10_sup_abs_err,log10_abs_err_T")?;
        for e in &table {
            writeln!(w, "{},{},{},{},{}", e.iteration, e.sup, e.at_horizon, e.log10_sup(), e.log10_at_horizon())?;
        }
        Ok(())
    };
    match out {
        Some(p) => write_with(p, |w| render(w))?,
        None => render(&mut std::io::stdout().lock()).map_err(|e| Error::io("<stdout>", e))?,
    }
    Ok(0)
}

fn snapshot_index(grid: &TimeGrid, at_time: Option<f64>) -> Result<usize> {
    match at_time {
        None => Ok(grid.coarse_steps()),
        Some(t) => grid.coarse_index_at(t),
    }
}

fn parse_list(text: &str, what: &str, len: usize) -> Result<Vec<f64>> {
    let v: std::result::Result<Vec<f64>, _> = text.split(',').map(|p| p.trim().parse::<f64>()).collect();
    match v {
        Ok(v) if v.len() == len => Ok(v),
        _ => Err(Error::Config(vec![format!("--{what}: expected {len} comma-separated numbers, got `{text}`")])),
    }
}

fn index_pair(text: &str, what: &str) -> Result<(usize, usize)> {
    let v = parse_list(text, what, 2)?;
    if v.iter().any(|x| *x < 0.0 || x.fract() != 0.0) {
        return Err(Error::Config(vec![format!("--{what}: expected two non-negative integers, got `{text}`")]));
    }
    Ok((v[0] as usize, v[1] as usize))
}

fn reference_states(c: &ExperimentConfig, model: &ModelSpec, j: usize) -> Result<Vec<f64>> {
    let grid = c.reference_grid()?;
    euler_maruyama_states(model, &grid, &c.x0(), c.reference.samples, c.reference.seed, j)
}

fn probmap(args: &SolveArgs, cells: &str, axes: &str, bounds: Option<&str>, at_time: Option<f64>) -> Result<i32> {
    let (nx, ny) = index_pair(cells, "grid")?;
    let axes = index_pair(axes, "axes")?;
    let s = prepare(args)?;
    let (engine, report) = run_engine(&s)?;
    if let Some(code) = diverged_exit(&report) {
        return Ok(code);
    }
    let j = snapshot_index(&s.config.grid, at_time)?;
    let d = s.config.model.d;
    let grid = match bounds {
        Some(b) => {
            let v = parse_list(b, "bounds", 4)?;
            CellGrid::new(axes, Rect { x_lo: v[0], x_hi: v[1], y_lo: v[2], y_hi: v[3] }, nx, ny)?
        }
        None => CellGrid::fit(&reference_states(&s.config, &s.model, j)?, d, axes, nx, ny, 0.1)?,
    };
    let points = engine.samples().snapshot(j);
    let weights = engine.state().total_weights_at(j);
    let map = cell_probability_map(&points, d, Some(&weights), &grid)?;
    let dir = out_dir(&s.config, &args.common);
    write_with(&dir.join("probmap.csv"), |w| map.write_csv(w))?;
    let mut meta = sidecar(&s.config, "probmap", s.config.run.seed);
    meta.insert("coarse_index".into(), json!(j));
    meta.insert("iterations".into(), json!(report.iterations()));
    meta.insert("total_mass".into(), json!(map.total()));
    write_json(&dir.join("probmap.json"), &Value::Object(meta))?;
    Ok(0)
}

fn histogram(args: &SolveArgs, component: usize, at_time: Option<f64>, bins: usize) -> Result<i32> {
    let s = prepare(args)?;
    let d = s.config.model.d;
    if component >= d {
        return Err(Error::Config(vec![format!("--component {component} out of range for d = {d}")]));
    }
    let (engine, report) = run_engine(&s)?;
    if let Some(code) = diverged_exit(&report) {
        return Ok(code);
    }
    let j = snapshot_index(&s.config.grid, at_time)?;
    let pick = |pts: &[f64]| pts.chunks_exact(d).map(|p| p[component]).collect::<Vec<f64>>();
    let reference = pick(&reference_states(&s.config, &s.model, j)?);
    let gaussian = pick(&engine.samples().snapshot(j));
    let weights = engine.state().total_weights_at(j);
    let bins = Bins::fit(&[&reference, &gaussian], bins, 0.05)?;
    let h_ref = weighted_histogram(&reference, None, &bins)?;
    let h_gauss = weighted_histogram(&gaussian, None, &bins)?;
    let h_weighted = weighted_histogram(&gaussian, Some(&weights), &bins)?;
    let dir = out_dir(&s.config, &args.common);
    write_with(&dir.join("histogram.csv"), |w| {
        write_histograms_csv(&[("reference", &h_ref), ("gaussian", &h_gauss), ("weighted", &h_weighted)], w)
    })?;
    let mut meta = sidecar(&s.config, "histogram", s.config.run.seed);
    meta.insert("component".into(), json!(component));
    meta.insert("coarse_index".into(), json!(j));
    meta.insert("iterations".into(), json!(report.iterations()));
    meta.insert("l1_weighted_vs_reference".into(), json!(h_weighted.l1_distance(&h_ref)?));
    meta.insert("l1_gaussian_vs_reference".into(), json!(h_gauss.l1_distance(&h_ref)?));
    write_json(&dir.join("histogram.json"), &Value::Object(meta))?;
    Ok(0)
}

fn pca(args: &SolveArgs, at_time: Option<f64>) -> Result<i32> {
    let s = prepare(args)?;
    let d = s.config.model.d;
    let (engine, report) = run_engine(&s)?;
    if let Some(code) = diverged_exit(&report) {
        return Ok(code);
    }
    let j = snapshot_index(&s.config.grid, at_time)?;
    let reference = reference_states(&s.config, &s.model, j)?;
    let fit = pca_fit(&reference, d)?;
    let ref_coords = fit.project(&reference)?;
    let gauss_coords = fit.project(&engine.samples().snapshot(j))?;
    let weights = engine.state().total_weights_at(j);
    let dir = out_dir(&s.config, &args.common);
    write_with(&dir.join("pca.csv"), |w| {
        writeln!(w, "pc1,pc2,source,weight")?;
        for p in ref_coords.chunks_exact(2) {
            writeln!(w, "{},{},reference,1", p[0], p[1])?;
        }
        for (p, wt) in gauss_coords.chunks_exact(2).zip(&weights) {
            writeln!(w, "{},{},gaussian,{wt}", p[0], p[1])?;
        }
        Ok(())
    })?;
    let mut meta = sidecar(&s.config, "pca", s.config.run.seed);
    meta.insert("coarse_index".into(), json!(j));
    meta.insert("axes".into(), json!(fit.axes));
    meta.insert("variances".into(), json!(fit.variances));
    meta.insert("explained_ratio".into(), json!(fit.explained_ratio()));
    write_json(&dir.join("pca.json"), &Value::Object(meta))?;
    Ok(0)
}

fn bank(cmd: &BankCommand) -> Result<i32> {
    match cmd {
        BankCommand::Generate { config, out } => {
            let c = load_config(config)?;
            let model = c.build_model()?;
            let bank = generate(model.operator(), &c.grid, c.run.samples, c.run.seed)?;
            bank.save(out)?;
            eprintln!("wrote {} ({} samples, d = {}, {} coarse steps)", out.display(), bank.samples(), bank.dim(), bank.steps());
            Ok(0)
        }
        BankCommand::Inspect { file } => {
            let bank = PathBank::load(file)?;
            let g = bank.grid();
            println!("file: {}", file.display());
            println!("dimension: {}", bank.dim());
            println!("samples: {}", bank.samples());
            println!("coarse steps: {}", bank.steps());
            println!("T: {}", g.horizon());
            println!("dt_fine: {}", g.dt_fine());
            println!("dt_coarse: {}", g.dt_coarse());
            println!("seed: {}", bank.seed());
            println!("sha256: {}", hex(&bank.checksum()));
            Ok(0)
        }
    }
}

pub fn execute(cli: &Cli) -> Result<i32> {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(Error::Config(vec!["--threads must be positive".into()]));
        }
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .map_err(|e| Error::invalid(e.to_string()))?;
        return pool.install(|| dispatch(&cli.command));
    }
    dispatch(&cli.command)
}

fn dispatch(command: &Command) -> Result<i32> {
    match command {
        Command::Bank(cmd) => bank(cmd),
        Command::Solve { solve: args, smooth } => solve(args, *smooth),
        Command::Reference(args) => reference(args),
        Command::Compare { run, reference, out } => compare_cmd(run, reference, out.as_deref()),
        Command::Probmap { solve, grid, axes, bounds, at_time } => probmap(solve, grid, axes, bounds.as_deref(), *at_time),
        Command::Histogram { solve, component, at_time, bins } => histogram(solve, *component, *at_time, *bins),
        Command::Pca { solve, at_time } => pca(solve, *at_time),
    }
}

/// Parses `std::env::args`, runs the command and returns the exit code.
pub fn main() -> i32 {
    let cli = Cli::parse();
    match execute(&cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
