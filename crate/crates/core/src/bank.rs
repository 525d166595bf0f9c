//! Base Gaussian trajectories and the shifted samples assembled from them.
//!
//! A [`PathBank`] holds `N_s` Euler–Maruyama paths of `dZ = A Z dt + dW`,
//! `Z_0 = 0`, kept only at coarse indices. It depends on `A`, the grid and
//! the seed, but not on the drift, the initial condition or the noise
//! amplitude, so one bank serves every run that shares the linear part.
//!
//! # File format
//!
//! A fixed 64-byte little-endian header followed by the coarse samples as
//! `f64` in sample-major, then time, then coordinate order:
//!
//! | offset | type  | field              |
//! |--------|-------|--------------------|
//! | 0      | [u8;4]| magic `KIPB`       |
//! | 4      | u32   | version (1)        |
//! | 8      | u64   | dimension `d`      |
//! | 16     | u64   | samples `N_s`      |
//! | 24     | u64   | coarse steps `J`   |
//! | 32     | f64   | `dt_fine`          |
//! | 40     | f64   | `dt_coarse`        |
//! | 48     | f64   | horizon `T`        |
//! | 56     | u64   | seed               |

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use sha2::{Digest, Sha256};

use crate::deterministic::ConvolutionTable;
use crate::error::{Error, Result};
use crate::grid::TimeGrid;
use crate::linear::LinearOperator;
use crate::seeds::{derive_seed, sample_stream, SeedDomain};

pub const BANK_MAGIC: [u8; 4] = *b"KIPB";
pub const BANK_VERSION: u32 = 1;
pub const HEADER_LEN: usize = 64;
/// Default cap on the in-memory size of a bank.
pub const DEFAULT_MEMORY_CAP: u128 = 4 << 30;

#[derive(Debug, Clone, PartialEq)]
pub struct PathBank {
    seed: u64,
    grid: TimeGrid,
    dim: usize,
    samples: usize,
    coarse: Vec<f64>,
}

#[cfg(test)]
impl PathBank {
    pub(crate) fn from_parts(grid: TimeGrid, dim: usize, samples: usize, coarse: Vec<f64>) -> Self {
        assert_eq!(coarse.len(), samples * (grid.coarse_steps() + 1) * dim);
        Self { seed: 0, grid, dim, samples, coarse }
    }
}

fn bank_bytes(samples: usize, steps: usize, dim: usize) -> u128 {
    samples as u128 * (steps as u128 + 1) * dim as u128 * 8
}

/// Generates `samples` base paths with the default memory cap.
pub fn generate(op: &LinearOperator, grid: &TimeGrid, samples: usize, seed: u64) -> Result<PathBank> {
    generate_with_cap(op, grid, samples, seed, DEFAULT_MEMORY_CAP)
}

pub fn generate_with_cap(
    op: &LinearOperator,
    grid: &TimeGrid,
    samples: usize,
    seed: u64,
    memory_cap: u128,
) -> Result<PathBank> {
    if samples == 0 {
        return Err(Error::invalid("path bank needs at least one sample"));
    }
    let d = op.dim();
    let steps = grid.coarse_steps();
    let requested = bank_bytes(samples, steps, d);
    if requested > memory_cap {
        return Err(Error::MemoryCap {
            requested,
            cap: memory_cap,
        });
    }
    let dt = grid.dt_fine();
    let product = dt * op.max_abs_eigenvalue();
    if product >= 2.0 {
        return Err(Error::UnstableStep { product });
    }
    let stride = (steps + 1) * d;
    let mut coarse = vec![0.0; samples * stride];
    let stream_seed = derive_seed(seed, SeedDomain::Bank);
    let r = grid.fine_per_coarse();
    let sqrt_dt = dt.sqrt();
    coarse.par_chunks_mut(stride).enumerate().for_each(|(i, path)| {
        let mut rng = sample_stream(stream_seed, i);
        let mut z = vec![0.0; d];
        let mut az = vec![0.0; d];
        for j in 1..=steps {
            for _ in 0..r {
                op.apply(&z, &mut az);
                for k in 0..d {
                    let xi: f64 = rng.sample(StandardNormal);
                    z[k] += dt * az[k] + sqrt_dt * xi;
                }
            }
            path[j * d..(j + 1) * d].copy_from_slice(&z);
        }
    });
    Ok(PathBank {
        seed,
        grid: *grid,
        dim: d,
        samples,
        coarse,
    })
}

impl PathBank {
    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn samples(&self) -> usize {
        self.samples
    }

    pub fn steps(&self) -> usize {
        self.grid.coarse_steps()
    }

    /// Coarse path of sample `i`, `(J+1) x d`.
    pub fn path(&self, i: usize) -> &[f64] {
        let stride = (self.steps() + 1) * self.dim;
        &self.coarse[i * stride..(i + 1) * stride]
    }

    pub fn point(&self, i: usize, j: usize) -> &[f64] {
        let d = self.dim;
        &self.path(i)[j * d..(j + 1) * d]
    }

    pub fn values(&self) -> &[f64] {
        &self.coarse
    }

    /// SHA-256 of the sample values.
    pub fn checksum(&self) -> [u8; 32] {
        let mut h = Sha256::new();
        for v in &self.coarse {
            h.update(v.to_le_bytes());
        }
        h.finalize().into()
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        let mut header = [0u8; HEADER_LEN];
        header[0..4].copy_from_slice(&BANK_MAGIC);
        header[4..8].copy_from_slice(&BANK_VERSION.to_le_bytes());
        header[8..16].copy_from_slice(&(self.dim as u64).to_le_bytes());
        header[16..24].copy_from_slice(&(self.samples as u64).to_le_bytes());
        header[24..32].copy_from_slice(&(self.steps() as u64).to_le_bytes());
        header[32..40].copy_from_slice(&self.grid.dt_fine().to_le_bytes());
        header[40..48].copy_from_slice(&self.grid.dt_coarse().to_le_bytes());
        header[48..56].copy_from_slice(&self.grid.horizon().to_le_bytes());
        header[56..64].copy_from_slice(&self.seed.to_le_bytes());
        w.write_all(&header).map_err(|e| Error::io(path, e))?;
        for v in &self.coarse {
            w.write_all(&v.to_le_bytes()).map_err(|e| Error::io(path, e))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::load_with_cap(path, DEFAULT_MEMORY_CAP)
    }

    pub fn load_with_cap(path: impl AsRef<Path>, memory_cap: u128) -> Result<Self> {
        let path = path.as_ref();
        let bad = |message: String| Error::BankFormat {
            path: path.to_path_buf(),
            message,
        };
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let file_len = file.metadata().map_err(|e| Error::io(path, e))?.len() as u128;
        let mut r = BufReader::new(file);
        let mut header = [0u8; HEADER_LEN];
        r.read_exact(&mut header)
            .map_err(|_| bad(format!("truncated header ({file_len} bytes)")))?;
        if header[0..4] != BANK_MAGIC {
            return Err(bad("not a path bank (bad magic)".into()));
        }
        let le_u64 = |o: usize| u64::from_le_bytes(header[o..o + 8].try_into().unwrap());
        let le_f64 = |o: usize| f64::from_le_bytes(header[o..o + 8].try_into().unwrap());
        let version = u32::from_le_bytes(header[4..8].try_into().unwrap());
        if version != BANK_VERSION {
            return Err(bad(format!(
                "unsupported version {version} (this build reads version {BANK_VERSION})"
            )));
        }
        let (dim, samples, steps) = (le_u64(8), le_u64(16), le_u64(24));
        let grid = TimeGrid::new(le_f64(48), le_f64(32), le_f64(40)).map_err(|e| bad(e.to_string()))?;
        if grid.coarse_steps() as u64 != steps {
            return Err(bad(format!(
                "header step count {steps} disagrees with T/dt_coarse = {}",
                grid.coarse_steps()
            )));
        }
        if dim == 0 || samples == 0 {
            return Err(bad("empty bank".into()));
        }
        let count = (samples as u128)
            .checked_mul(steps as u128 + 1)
            .and_then(|n| n.checked_mul(dim as u128))
            .filter(|n| n.checked_mul(8).is_some_and(|b| b <= memory_cap))
            .ok_or_else(|| bad(format!("dimensions {samples} x {} x {dim} overflow the memory cap", steps + 1)))?;
        let expected = HEADER_LEN as u128 + count * 8;
        if file_len != expected {
            return Err(bad(format!(
                "truncated or oversized file: {file_len} bytes, expected {expected}"
            )));
        }
        let count = count as usize;
        let mut bytes = vec![0u8; count * 8];
        r.read_exact(&mut bytes).map_err(|e| Error::io(path, e))?;
        let coarse = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Ok(Self {
            seed: le_u64(56),
            grid,
            dim: dim as usize,
            samples: samples as usize,
            coarse,
        })
    }
}

/// Lazy view `Z_{i,j} = exp(j dt A) x0 + F_{0,j} + sigma * bank_{i,j}`.
#[derive(Debug, Clone)]
pub struct ShiftedSamples<'a> {
    bank: &'a PathBank,
    sigma: f64,
    x0: Vec<f64>,
    mean: Vec<f64>,
}

pub fn assemble_shifted<'a>(
    bank: &'a PathBank,
    op: &LinearOperator,
    x0: &[f64],
    table: &ConvolutionTable,
    sigma: f64,
) -> Result<ShiftedSamples<'a>> {
    let d = bank.dim();
    if op.dim() != d || table.dim() != d {
        return Err(Error::DimensionMismatch {
            expected: d,
            got: op.dim().max(table.dim()),
            context: "operator / convolution table vs bank",
        });
    }
    if x0.len() != d {
        return Err(Error::DimensionMismatch {
            expected: d,
            got: x0.len(),
            context: "initial condition",
        });
    }
    if table.steps() != bank.steps() {
        return Err(Error::GridMismatch(format!(
            "convolution table has {} coarse steps, bank has {}",
            table.steps(),
            bank.steps()
        )));
    }
    if !(sigma.is_finite() && sigma >= 0.0) {
        return Err(Error::invalid(format!("sigma must be finite and >= 0, got {sigma}")));
    }
    let grid = bank.grid();
    let mut mean = Vec::with_capacity((bank.steps() + 1) * d);
    let mut carried = vec![0.0; d];
    for j in 0..=bank.steps() {
        op.exp_apply(grid.coarse_time(j), x0, &mut carried);
        let f = table.entry(0, j);
        mean.extend(carried.iter().zip(&f).map(|(a, b)| a + b));
    }
    // exp(0 A) x0 goes through the eigenbasis; pin the start exactly.
    mean[..d].copy_from_slice(x0);
    Ok(ShiftedSamples {
        bank,
        sigma,
        x0: x0.to_vec(),
        mean,
    })
}

impl<'a> ShiftedSamples<'a> {
    pub fn bank(&self) -> &'a PathBank {
        self.bank
    }

    pub fn samples(&self) -> usize {
        self.bank.samples()
    }

    pub fn dim(&self) -> usize {
        self.bank.dim()
    }

    pub fn steps(&self) -> usize {
        self.bank.steps()
    }

    pub fn grid(&self) -> &TimeGrid {
        self.bank.grid()
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }

    pub fn x0(&self) -> &[f64] {
        &self.x0
    }

    /// Deterministic part `exp(j dt A) x0 + F_{0,j}`.
    pub fn mean(&self, j: usize) -> &[f64] {
        let d = self.dim();
        &self.mean[j * d..(j + 1) * d]
    }

    pub fn point(&self, i: usize, j: usize, out: &mut [f64]) {
        let base = self.bank.point(i, j);
        for ((o, &m), &b) in out.iter_mut().zip(self.mean(j)).zip(base) {
            *o = m + self.sigma * b;
        }
        if j == 0 {
            out.copy_from_slice(&self.x0);
        }
    }

    /// Whole coarse path of sample `i` into `out`, `(J+1) x d`.
    pub fn path(&self, i: usize, out: &mut [f64]) {
        let base = self.bank.path(i);
        for ((o, &m), &b) in out.iter_mut().zip(&self.mean).zip(base) {
            *o = m + self.sigma * b;
        }
        out[..self.dim()].copy_from_slice(&self.x0);
    }

    /// All samples at coarse index `j`, `N_s x d`.
    pub fn snapshot(&self, j: usize) -> Vec<f64> {
        let d = self.dim();
        let mut out = vec![0.0; self.samples() * d];
        for (i, row) in out.chunks_exact_mut(d).enumerate() {
            self.point(i, j, row);
        }
        out
    }
}
