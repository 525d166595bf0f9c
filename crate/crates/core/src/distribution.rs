//! Reweighted distributions: cell probability maps over a planar projection,
//! weighted histograms, and PCA projections.

use std::io::Write;

use nalgebra::{DMatrix, SymmetricEigen};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::Rect;

/// Samples per binning block; blocks are merged in index order.
const BLOCK: usize = 4096;

/// `nx x ny` cells over `bounds` in the plane of coordinates `axes`.
///
/// Cells are right-open except the last one along each axis, which is
/// closed, so the cells partition the closed rectangle.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellGrid {
    axes: (usize, usize),
    bounds: Rect,
    nx: usize,
    ny: usize,
}

fn bin_of(v: f64, lo: f64, hi: f64, n: usize) -> Option<usize> {
    if !(v >= lo && v <= hi) {
        return None;
    }
    let k = ((v - lo) / (hi - lo) * n as f64).floor() as usize;
    Some(k.min(n - 1))
}

fn check_interval(lo: f64, hi: f64, what: &str) -> Result<()> {
    if !(lo.is_finite() && hi.is_finite() && lo < hi) {
        return Err(Error::invalid(format!("{what} bounds must satisfy lo < hi, got [{lo}, {hi}]")));
    }
    Ok(())
}

impl CellGrid {
    pub fn new(axes: (usize, usize), bounds: Rect, nx: usize, ny: usize) -> Result<Self> {
        if nx == 0 || ny == 0 {
            return Err(Error::invalid("cell grid needs at least one cell per axis"));
        }
        check_interval(bounds.x_lo, bounds.x_hi, "x")?;
        check_interval(bounds.y_lo, bounds.y_hi, "y")?;
        Ok(Self { axes, bounds, nx, ny })
    }

    /// Bounds from the data range on both axes, widened by `pad` of the span.
    pub fn fit(points: &[f64], d: usize, axes: (usize, usize), nx: usize, ny: usize, pad: f64) -> Result<Self> {
        if axes.0 >= d || axes.1 >= d {
            return Err(Error::invalid(format!("projection axes {axes:?} out of range for d = {d}")));
        }
        let range = |axis: usize| {
            let (lo, hi) = points
                .chunks_exact(d)
                .map(|p| p[axis])
                .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
            let span = if hi > lo { hi - lo } else { 1.0 };
            (lo - pad * span, hi + pad * span)
        };
        let (x_lo, x_hi) = range(axes.0);
        let (y_lo, y_hi) = range(axes.1);
        Self::new(axes, Rect { x_lo, x_hi, y_lo, y_hi }, nx, ny)
    }

    pub fn axes(&self) -> (usize, usize) {
        self.axes
    }

    pub fn bounds(&self) -> &Rect {
        &self.bounds
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.nx, self.ny)
    }

    pub fn len(&self) -> usize {
        self.nx * self.ny
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Cell `ix + nx * iy` holding `(x, y)`, or `None` outside the rectangle.
    pub fn cell_of(&self, x: f64, y: f64) -> Option<usize> {
        let b = &self.bounds;
        let ix = bin_of(x, b.x_lo, b.x_hi, self.nx)?;
        let iy = bin_of(y, b.y_lo, b.y_hi, self.ny)?;
        Some(ix + self.nx * iy)
    }

    /// Bounds of cell `c`.
    pub fn cell_rect(&self, c: usize) -> Rect {
        let (ix, iy) = (c % self.nx, c / self.nx);
        let b = &self.bounds;
        let wx = (b.x_hi - b.x_lo) / self.nx as f64;
        let wy = (b.y_hi - b.y_lo) / self.ny as f64;
        let edge = |lo: f64, hi: f64, w: f64, k: usize, n: usize| if k == n { hi } else { lo + w * k as f64 };
        Rect {
            x_lo: edge(b.x_lo, b.x_hi, wx, ix, self.nx),
            x_hi: edge(b.x_lo, b.x_hi, wx, ix + 1, self.nx),
            y_lo: edge(b.y_lo, b.y_hi, wy, iy, self.ny),
            y_hi: edge(b.y_lo, b.y_hi, wy, iy + 1, self.ny),
        }
    }
}

/// Cell masses plus the mass that fell outside the grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellMap {
    pub grid: CellGrid,
    pub masses: Vec<f64>,
    pub overflow: f64,
    pub samples: usize,
}

impl CellMap {
    /// Cell masses and overflow summed in cell order.
    pub fn total(&self) -> f64 {
        self.masses.iter().sum::<f64>() + self.overflow
    }

    /// `cell,x_lo,x_hi,y_lo,y_hi,mass`, with a final `overflow` row.
    pub fn write_csv(&self, mut w: impl Write) -> std::io::Result<()> {
        writeln!(w, "cell,x_lo,x_hi,y_lo,y_hi,mass")?;
        for (c, m) in self.masses.iter().enumerate() {
            let r = self.grid.cell_rect(c);
            writeln!(w, "{c},{},{},{},{},{m}", r.x_lo, r.x_hi, r.y_lo, r.y_hi)?;
        }
        writeln!(w, "overflow,,,,,{}", self.overflow)
    }
}

fn check_weights(n: usize, weights: Option<&[f64]>) -> Result<()> {
    if let Some(w) = weights {
        if w.len() != n {
            return Err(Error::DimensionMismatch { expected: n, got: w.len(), context: "sample weights" });
        }
        if let Some(i) = w.iter().position(|v| !v.is_finite()) {
            return Err(Error::invalid(format!("weight of sample {i} is not finite")));
        }
    }
    if n == 0 {
        return Err(Error::invalid("no samples"));
    }
    Ok(())
}

/// Blockwise weighted bucket sums divided by `n`, summed in sample order
/// within each block and merged in block order.
fn bin_weighted(n: usize, buckets: usize, weights: Option<&[f64]>, bucket: impl Fn(usize) -> usize + Sync) -> Vec<f64> {
    let partials: Vec<Vec<f64>> = (0..n.div_ceil(BLOCK))
        .into_par_iter()
        .map(|b| {
            let mut acc = vec![0.0; buckets];
            for i in b * BLOCK..((b + 1) * BLOCK).min(n) {
                acc[bucket(i)] += weights.map_or(1.0, |w| w[i]);
            }
            acc
        })
        .collect();
    let mut sums = vec![0.0; buckets];
    for p in partials {
        for (s, v) in sums.iter_mut().zip(p) {
            *s += v;
        }
    }
    sums.iter().map(|s| s / n as f64).collect()
}

/// `masses[c] = (1/N_s) sum_i 1[(x_p, x_q)_i in c] w_i` over `points` (`N_s x d`).
///
/// `weights = None` means unit weights.
pub fn cell_probability_map(points: &[f64], d: usize, weights: Option<&[f64]>, grid: &CellGrid) -> Result<CellMap> {
    if d == 0 || points.len() % d != 0 {
        return Err(Error::invalid("sample array is not a whole number of rows"));
    }
    let (p, q) = grid.axes();
    if p >= d || q >= d {
        return Err(Error::invalid(format!("projection axes ({p}, {q}) out of range for d = {d}")));
    }
    let n = points.len() / d;
    check_weights(n, weights)?;
    let cells = grid.len();
    let mut masses = bin_weighted(n, cells + 1, weights, |i| {
        let row = &points[i * d..(i + 1) * d];
        grid.cell_of(row[p], row[q]).unwrap_or(cells)
    });
    let overflow = masses.pop().unwrap();
    Ok(CellMap { grid: grid.clone(), masses, overflow, samples: n })
}

/// Uniform bins on `[lo, hi]`, last bin closed.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Bins {
    pub lo: f64,
    pub hi: f64,
    pub count: usize,
}

impl Bins {
    pub fn new(lo: f64, hi: f64, count: usize) -> Result<Self> {
        if count == 0 {
            return Err(Error::invalid("histogram needs at least one bin"));
        }
        check_interval(lo, hi, "histogram")?;
        Ok(Self { lo, hi, count })
    }

    /// Range of all given value sets, widened by `pad` of the span.
    pub fn fit(sets: &[&[f64]], count: usize, pad: f64) -> Result<Self> {
        let (lo, hi) = sets
            .iter()
            .flat_map(|s| s.iter())
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
        if !lo.is_finite() || !hi.is_finite() {
            return Err(Error::invalid("cannot fit histogram bins to empty or non-finite data"));
        }
        let span = if hi > lo { hi - lo } else { 1.0 };
        Self::new(lo - pad * span, hi + pad * span, count)
    }

    pub fn edge(&self, k: usize) -> f64 {
        if k == self.count {
            self.hi
        } else {
            self.lo + (self.hi - self.lo) * k as f64 / self.count as f64
        }
    }

    fn bin_of(&self, v: f64) -> Option<usize> {
        bin_of(v, self.lo, self.hi, self.count)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    pub bins: Bins,
    pub masses: Vec<f64>,
    pub underflow: f64,
    pub overflow: f64,
}

impl Histogram {
    pub fn total(&self) -> f64 {
        self.masses.iter().sum::<f64>() + self.underflow + self.overflow
    }

    /// `sum_k |p_k - q_k|` after normalising both in-range masses to one.
    pub fn l1_distance(&self, other: &Histogram) -> Result<f64> {
        if self.bins != other.bins {
            return Err(Error::invalid("histograms use different bins"));
        }
        let sa: f64 = self.masses.iter().sum();
        let sb: f64 = other.masses.iter().sum();
        Ok(self.masses.iter().zip(&other.masses).map(|(a, b)| (a / sa - b / sb).abs()).sum())
    }
}

/// Histogram of `values` with optional weights, each mass divided by `N_s`.
pub fn weighted_histogram(values: &[f64], weights: Option<&[f64]>, bins: &Bins) -> Result<Histogram> {
    check_weights(values.len(), weights)?;
    let (under, over) = (bins.count, bins.count + 1);
    let mut masses = bin_weighted(values.len(), bins.count + 2, weights, |i| {
        let v = values[i];
        bins.bin_of(v).unwrap_or(if v < bins.lo { under } else { over })
    });
    let overflow = masses.pop().unwrap();
    let underflow = masses.pop().unwrap();
    Ok(Histogram { bins: *bins, masses, underflow, overflow })
}

/// Writes histograms on common bins: `lo,hi,<label>...`, then `underflow`
/// and `overflow` rows.
pub fn write_histograms_csv(variants: &[(&str, &Histogram)], mut w: impl Write) -> std::io::Result<()> {
    let Some((_, first)) = variants.first() else {
        return Ok(());
    };
    let bins = first.bins;
    if variants.iter().any(|(_, h)| h.bins != bins) {
        return Err(std::io::Error::new(std::io::ErrorKind::InvalidInput, "histograms use different bins"));
    }
    write!(w, "lo,hi")?;
    for (label, _) in variants {
        write!(w, ",{label}")?;
    }
    writeln!(w)?;
    for k in 0..bins.count {
        write!(w, "{},{}", bins.edge(k), bins.edge(k + 1))?;
        for (_, h) in variants {
            write!(w, ",{}", h.masses[k])?;
        }
        writeln!(w)?;
    }
    write!(w, "-inf,{}", bins.lo)?;
    for (_, h) in variants {
        write!(w, ",{}", h.underflow)?;
    }
    writeln!(w)?;
    write!(w, "{},inf", bins.hi)?;
    for (_, h) in variants {
        write!(w, ",{}", h.overflow)?;
    }
    writeln!(w)
}

/// Two leading principal axes of a sample cloud.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Pca {
    pub dim: usize,
    pub mean: Vec<f64>,
    /// Unit eigenvectors, largest-magnitude entry positive.
    pub axes: [Vec<f64>; 2],
    /// Variances along the two axes, descending.
    pub variances: [f64; 2],
    pub total_variance: f64,
}

impl Pca {
    /// Fraction of the total variance along each axis.
    pub fn explained_ratio(&self) -> [f64; 2] {
        [self.variances[0] / self.total_variance, self.variances[1] / self.total_variance]
    }

    /// Coordinates of `points` (`n x d`) on the two axes, `n x 2`.
    pub fn project(&self, points: &[f64]) -> Result<Vec<f64>> {
        if points.len() % self.dim != 0 {
            return Err(Error::DimensionMismatch { expected: self.dim, got: points.len() % self.dim, context: "projected samples" });
        }
        Ok(points
            .chunks_exact(self.dim)
            .flat_map(|p| {
                self.axes.iter().map(move |a| a.iter().zip(p).zip(&self.mean).map(|((a, x), m)| a * (x - m)).sum::<f64>())
            })
            .collect())
    }
}

/// Centers `points` (`n x d`), forms the sample covariance and keeps its two
/// leading eigenvectors.
pub fn pca_fit(points: &[f64], d: usize) -> Result<Pca> {
    if d < 2 {
        return Err(Error::invalid("PCA projection needs d >= 2"));
    }
    if points.len() % d != 0 || points.len() / d < 2 {
        return Err(Error::invalid("PCA needs at least two samples"));
    }
    let n = points.len() / d;
    let mut mean = vec![0.0; d];
    for p in points.chunks_exact(d) {
        for (m, x) in mean.iter_mut().zip(p) {
            *m += x;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let mut cov = DMatrix::<f64>::zeros(d, d);
    let mut c = vec![0.0; d];
    for p in points.chunks_exact(d) {
        for k in 0..d {
            c[k] = p[k] - mean[k];
        }
        for a in 0..d {
            for b in a..d {
                cov[(a, b)] += c[a] * c[b];
            }
        }
    }
    for a in 0..d {
        for b in a..d {
            cov[(a, b)] /= (n - 1) as f64;
            cov[(b, a)] = cov[(a, b)];
        }
    }
    let total_variance = cov.trace();
    if !(total_variance > 0.0) {
        return Err(Error::invalid("sample covariance has rank 0"));
    }
    let eig = SymmetricEigen::try_new(cov, 1e-14, 10_000).ok_or(Error::Eigendecomposition(d))?;
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let axis = |k: usize| {
        let mut v: Vec<f64> = eig.eigenvectors.column(order[k]).iter().copied().collect();
        let lead = v.iter().copied().fold(0.0f64, |m, x| if x.abs() > m.abs() { x } else { m });
        if lead < 0.0 {
            v.iter_mut().for_each(|x| *x = -*x);
        }
        v
    };
    Ok(Pca {
        dim: d,
        mean,
        axes: [axis(0), axis(1)],
        variances: [eig.eigenvalues[order[0]].max(0.0), eig.eigenvalues[order[1]].max(0.0)],
        total_variance,
    })
}

/// Fits the axes on `points` and returns them with the `n x 2` projection.
pub fn pca_project(points: &[f64], d: usize) -> Result<(Pca, Vec<f64>)> {
    let pca = pca_fit(points, d)?;
    let coords = pca.project(points)?;
    Ok((pca, coords))
}

/// `pc1,pc2,source` for each labelled projection (`n x 2` each).
pub fn write_pca_csv(sets: &[(&str, &[f64])], mut w: impl Write) -> std::io::Result<()> {
    writeln!(w, "pc1,pc2,source")?;
    for (label, coords) in sets {
        for p in coords.chunks_exact(2) {
            writeln!(w, "{},{},{label}", p[0], p[1])?;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn gaussian_cloud(n: usize, d: usize, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n * d).map(|_| rng.sample(StandardNormal)).collect()
    }

    fn unit_rect() -> Rect {
        Rect { x_lo: -1.0, x_hi: 1.0, y_lo: -1.0, y_hi: 1.0 }
    }

    #[test]
    fn cells_partition_the_rectangle() {
        let g = CellGrid::new((0, 1), unit_rect(), 4, 2).unwrap();
        assert_eq!(g.cell_of(-1.0, -1.0), Some(0));
        assert_eq!(g.cell_of(1.0, 1.0), Some(7));
        assert_eq!(g.cell_of(-0.5, -1.0), Some(1));
        assert_eq!(g.cell_of(0.0, 0.0), Some(6));
        assert_eq!(g.cell_of(1.0 + 1e-12, 0.0), None);
        assert_eq!(g.cell_of(f64::NAN, 0.0), None);
        assert_eq!(g.cell_rect(7), Rect { x_lo: 0.5, x_hi: 1.0, y_lo: 0.0, y_hi: 1.0 });
        assert!(CellGrid::new((0, 1), unit_rect(), 0, 2).is_err());
        assert!(CellGrid::new((0, 1), Rect { x_lo: 1.0, ..unit_rect() }, 1, 1).is_err());
    }

    #[test]
    fn single_cell_full_mass() {
        let pts = gaussian_cloud(1000, 2, 1);
        let g = CellGrid::fit(&pts, 2, (0, 1), 1, 1, 0.1).unwrap();
        let map = cell_probability_map(&pts, 2, None, &g).unwrap();
        assert_eq!(map.masses, vec![1.0]);
        assert_eq!(map.overflow, 0.0);
    }

    #[test]
    fn half_planes_of_a_symmetric_cloud() {
        let n = 10_000;
        let pts = gaussian_cloud(n, 2, 2);
        let g = CellGrid::new((0, 1), Rect { x_lo: -50.0, x_hi: 50.0, y_lo: -50.0, y_hi: 50.0 }, 2, 1).unwrap();
        let map = cell_probability_map(&pts, 2, None, &g).unwrap();
        let tol = 3.0 / (2.0 * (n as f64).sqrt());
        for m in &map.masses {
            assert!((m - 0.5).abs() <= tol, "{m}");
        }
    }

    #[test]
    fn overflow_and_weights() {
        let pts = [0.0, 0.0, 5.0, 0.0, 0.5, 0.5];
        let g = CellGrid::new((0, 1), unit_rect(), 2, 2).unwrap();
        let map = cell_probability_map(&pts, 2, Some(&[2.0, 3.0, -1.0]), &g).unwrap();
        assert_eq!(map.overflow, 1.0);
        assert_relative_eq!(map.masses[3], 1.0 / 3.0, max_relative = 1e-15);
        assert_relative_eq!(map.total(), 4.0 / 3.0, max_relative = 1e-15);
        assert!(cell_probability_map(&pts, 2, Some(&[1.0]), &g).is_err());
        assert!(cell_probability_map(&pts, 2, Some(&[1.0, f64::NAN, 1.0]), &g).is_err());
        assert!(cell_probability_map(&pts, 2, None, &CellGrid::new((0, 2), unit_rect(), 1, 1).unwrap()).is_err());
    }

    #[test]
    fn histogram_basics() {
        let bins = Bins::new(0.0, 1.0, 4).unwrap();
        let h = weighted_histogram(&[0.3; 10], None, &bins).unwrap();
        assert_eq!(h.masses.iter().filter(|&&m| m != 0.0).count(), 1);
        assert_eq!(h.masses[1], 1.0);
        let vals = [-1.0, 0.0, 0.25, 0.99, 1.0, 2.0, 0.5, 0.6];
        let h = weighted_histogram(&vals, None, &bins).unwrap();
        assert_eq!(h.underflow, 1.0 / 8.0);
        assert_eq!(h.overflow, 1.0 / 8.0);
        assert_relative_eq!(h.total(), 1.0, max_relative = 1e-15);
        assert_eq!(h.masses, vec![1.0 / 8.0, 1.0 / 8.0, 2.0 / 8.0, 2.0 / 8.0]);
        let w = [1.0, 2.0, 1.0, 1.0, 1.0, 3.0, -1.0, 0.0];
        let h = weighted_histogram(&vals, Some(&w), &bins).unwrap();
        let mean_w: f64 = w.iter().sum::<f64>() / 8.0;
        assert_relative_eq!(h.total(), mean_w, max_relative = 1e-14);
        assert!(Bins::new(0.0, 1.0, 0).is_err());
    }

    #[test]
    fn histogram_l1() {
        let bins = Bins::new(-4.0, 4.0, 20).unwrap();
        let a = weighted_histogram(&gaussian_cloud(20_000, 1, 3), None, &bins).unwrap();
        let b = weighted_histogram(&gaussian_cloud(20_000, 1, 4), None, &bins).unwrap();
        assert!(a.l1_distance(&b).unwrap() < 0.05);
        assert_eq!(a.l1_distance(&a).unwrap(), 0.0);
    }

    #[test]
    fn pca_rank_one_line() {
        let u = [0.6, -0.8, 0.0];
        let pts: Vec<f64> = (0..200).flat_map(|i| u.map(|c| c * (i as f64 - 100.0) * 0.1)).collect();
        let pca = pca_fit(&pts, 3).unwrap();
        assert!(pca.explained_ratio()[0] >= 1.0 - 1e-10);
        // sign convention: largest-magnitude entry is positive
        assert_relative_eq!(pca.axes[0][1], 0.8, max_relative = 1e-10);
        assert_relative_eq!(pca.axes[0][0], -0.6, max_relative = 1e-10);
    }

    #[test]
    fn pca_isotropic_cloud() {
        let pts = gaussian_cloud(10_000, 4, 5);
        let pca = pca_fit(&pts, 4).unwrap();
        let [a, b] = pca.variances;
        assert!((a - b).abs() / a < 0.1, "{a} {b}");
    }

    #[test]
    fn pca_rotation_invariance() {
        let mut pts = gaussian_cloud(2000, 2, 6);
        pts.chunks_exact_mut(2).for_each(|p| p[1] *= 0.3);
        let (c, s) = (0.7f64.cos(), 0.7f64.sin());
        let rotated: Vec<f64> = pts.chunks_exact(2).flat_map(|p| [c * p[0] - s * p[1], s * p[0] + c * p[1]]).collect();
        let a = pca_fit(&pts, 2).unwrap();
        let b = pca_fit(&rotated, 2).unwrap();
        for k in 0..2 {
            assert_relative_eq!(a.variances[k], b.variances[k], max_relative = 1e-10);
        }
        let (_, coords) = pca_project(&pts, 2).unwrap();
        assert_eq!(coords.len(), 4000);
    }

    #[test]
    fn pca_errors() {
        assert!(pca_fit(&[1.0, 2.0, 1.0, 2.0], 2).is_err());
        assert!(pca_fit(&[1.0, 2.0], 2).is_err());
        assert!(pca_fit(&[1.0, 2.0], 1).is_err());
    }

    #[test]
    fn csv_layouts() {
        let g = CellGrid::new((0, 1), unit_rect(), 1, 1).unwrap();
        let map = cell_probability_map(&[0.0, 0.0], 2, None, &g).unwrap();
        let mut out = Vec::new();
        map.write_csv(&mut out).unwrap();
        assert_eq!(String::from_utf8(out).unwrap(), "cell,x_lo,x_hi,y_lo,y_hi,mass\n0,-1,1,-1,1,1\noverflow,,,,,0\n");
        let bins = Bins::new(0.0, 1.0, 1).unwrap();
        let h = weighted_histogram(&[0.5], None, &bins).unwrap();
        let mut out = Vec::new();
        write_histograms_csv(&[("a", &h), ("b", &h)], &mut out).unwrap();
        assert_eq!(String::from_utf8(out).unwrap(), "lo,hi,a,b\n0,1,1,1\n-inf,0,0,0\n1,inf,0,0\n");
        let mut out = Vec::new();
        write_pca_csv(&[("ref", &[1.0, 2.0])], &mut out).unwrap();
        assert_eq!(String::from_utf8(out).unwrap(), "pc1,pc2,source\n1,2,ref\n");
    }
}
