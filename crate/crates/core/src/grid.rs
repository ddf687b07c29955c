//! Time grids, sampled vector paths, random path generation and empirical
//! norm estimators.
//!
//! Grids are always uniform partitions of `[0, T]`; path values live on the
//! `N + 1` nodes `t_i = i T / N`. Generators take explicit seeds and return
//! bit-identical output for identical input.

use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};

/// Exact-Cholesky fractional Brownian motion is only offered at desk scale;
/// larger grids fail loudly instead of silently switching method.
pub const FBM_MAX_STEPS: usize = 4096;

/// Uniform partition of `[0, T]` into `N` steps.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TimeGrid {
    horizon: f64,
    steps: usize,
}

impl TimeGrid {
    pub fn new(horizon: f64, steps: usize) -> Result<Self> {
        if !horizon.is_finite() || horizon <= 0.0 {
            return Err(Error::invalid("horizon must be finite and > 0"));
        }
        if steps == 0 {
            return Err(Error::invalid("steps must be >= 1"));
        }
        Ok(TimeGrid { horizon, steps })
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    /// Step size `h = T / N`.
    pub fn dt(&self) -> f64 {
        self.horizon / self.steps as f64
    }

    /// Node `t_i = i T / N`.
    pub fn node(&self, i: usize) -> f64 {
        debug_assert!(i <= self.steps);
        i as f64 * self.horizon / self.steps as f64
    }

    pub fn nodes(&self) -> impl Iterator<Item = f64> + '_ {
        (0..=self.steps).map(move |i| self.node(i))
    }
}

/// Vector-valued path sampled on the nodes of a [`TimeGrid`].
#[derive(Debug, Clone, PartialEq)]
pub struct SampledPath {
    grid: TimeGrid,
    dim: usize,
    values: Vec<DVector<f64>>,
}

impl SampledPath {
    pub fn new(grid: TimeGrid, values: Vec<DVector<f64>>) -> Result<Self> {
        if values.len() != grid.steps() + 1 {
            return Err(Error::invalid(format!(
                "path must have N+1 = {} values, got {}",
                grid.steps() + 1,
                values.len()
            )));
        }
        let dim = values[0].len();
        if dim == 0 {
            return Err(Error::invalid("path dimension must be >= 1"));
        }
        for (i, v) in values.iter().enumerate() {
            if v.len() != dim {
                return Err(Error::invalid(format!(
                    "value at node {i} has dimension {}, expected {dim}",
                    v.len()
                )));
            }
            if v.iter().any(|x| !x.is_finite()) {
                return Err(Error::invalid(format!("non-finite value at node {i}")));
            }
        }
        Ok(SampledPath { grid, dim, values })
    }

    /// Path built by evaluating a closure of `t` on every node.
    pub fn from_fn(grid: TimeGrid, dim: usize, f: impl Fn(f64) -> DVector<f64>) -> Result<Self> {
        let values: Vec<DVector<f64>> = grid.nodes().map(f).collect();
        if values.iter().any(|v| v.len() != dim) {
            return Err(Error::invalid("closure returned a value of the wrong dimension"));
        }
        SampledPath::new(grid, values)
    }

    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn value(&self, i: usize) -> &DVector<f64> {
        &self.values[i]
    }

    pub fn values(&self) -> &[DVector<f64>] {
        &self.values
    }

    /// Increment `X_{t_j} - X_{t_i}`.
    pub fn increment(&self, i: usize, j: usize) -> DVector<f64> {
        &self.values[j] - &self.values[i]
    }

    /// Subsample every `factor`-th node onto the coarser grid. Used for
    /// coupled refinement studies; `factor` must divide the step count.
    pub fn coarsen(&self, factor: usize) -> Result<SampledPath> {
        if factor == 0 || !self.grid.steps().is_multiple_of(factor) {
            return Err(Error::invalid("coarsening factor must divide N"));
        }
        let grid = TimeGrid::new(self.grid.horizon(), self.grid.steps() / factor)?;
        let values = (0..=grid.steps()).map(|i| self.values[i * factor].clone()).collect();
        SampledPath::new(grid, values)
    }

    /// Piecewise-linear interpolation of the values at every `block`-th node,
    /// resampled on the original grid. `block` must divide the step count.
    /// Level-`k` dyadic approximations of a fixed sample are obtained with
    /// `block = N >> k`.
    pub fn piecewise_linear_coarse_approximation(&self, block: usize) -> Result<SampledPath> {
        let n = self.grid.steps();
        if block == 0 || !n.is_multiple_of(block) {
            return Err(Error::invalid("block size must divide N"));
        }
        let mut values = Vec::with_capacity(n + 1);
        for i in 0..=n {
            let lo = (i / block) * block;
            if lo == i {
                values.push(self.values[i].clone());
            } else {
                let hi = lo + block;
                let w = (i - lo) as f64 / block as f64;
                values.push(&self.values[lo] * (1.0 - w) + &self.values[hi] * w);
            }
        }
        SampledPath::new(self.grid, values)
    }

    /// Linear-interpolation refinement onto a grid with `factor` times more
    /// steps. The refined path traces the same piecewise-linear curve.
    pub fn refine_linear(&self, factor: usize) -> Result<SampledPath> {
        if factor == 0 {
            return Err(Error::invalid("refinement factor must be >= 1"));
        }
        let n = self.grid.steps();
        let grid = TimeGrid::new(
            self.grid.horizon(),
            n.checked_mul(factor).ok_or_else(|| Error::invalid("grid too large"))?,
        )?;
        let mut values = Vec::with_capacity(grid.steps() + 1);
        for i in 0..=grid.steps() {
            let lo = i / factor;
            let rem = i % factor;
            if rem == 0 {
                values.push(self.values[lo].clone());
            } else {
                let w = rem as f64 / factor as f64;
                values.push(&self.values[lo] * (1.0 - w) + &self.values[lo + 1] * w);
            }
        }
        SampledPath::new(grid, values)
    }

    /// Writes `t,x1,...,xk` rows at full precision.
    pub fn to_csv(&self, out: &mut impl Write) -> Result<()> {
        write!(out, "t")?;
        for k in 1..=self.dim {
            write!(out, ",x{k}")?;
        }
        writeln!(out)?;
        for (i, v) in self.values.iter().enumerate() {
            write!(out, "{}", self.grid.node(i))?;
            for x in v.iter() {
                write!(out, ",{x}")?;
            }
            writeln!(out)?;
        }
        Ok(())
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut file = std::fs::File::create(path)?;
        self.to_csv(&mut file)
    }

    pub fn read_csv(path: impl AsRef<Path>) -> Result<SampledPath> {
        let file = std::fs::File::open(path)?;
        let reader = BufReader::new(file);
        let mut lines = reader.lines();
        let header = lines
            .next()
            .ok_or_else(|| Error::invalid("empty csv file"))??;
        let dim = header.split(',').count().saturating_sub(1);
        if dim == 0 {
            return Err(Error::invalid("csv header must be t,x1,...,xk"));
        }
        let mut times = Vec::new();
        let mut values = Vec::new();
        for line in lines {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let cells: Vec<&str> = line.split(',').collect();
            if cells.len() != dim + 1 {
                return Err(Error::invalid(format!(
                    "csv row has {} cells, expected {}",
                    cells.len(),
                    dim + 1
                )));
            }
            let parse = |s: &str| -> Result<f64> {
                s.trim()
                    .parse::<f64>()
                    .map_err(|e| Error::invalid(format!("bad float {s:?}: {e}")))
            };
            times.push(parse(cells[0])?);
            let row: Result<Vec<f64>> = cells[1..].iter().map(|s| parse(s)).collect();
            values.push(DVector::from_vec(row?));
        }
        if values.len() < 2 {
            return Err(Error::invalid("csv must contain at least two nodes"));
        }
        let grid = TimeGrid::new(*times.last().unwrap(), values.len() - 1)?;
        SampledPath::new(grid, values)
    }
}

/// Closed-form deterministic drivers used as smooth `Z` candidates.
#[derive(Debug, Clone, PartialEq)]
pub enum SmoothFormula {
    /// `Z_t = t * slope` componentwise.
    Linear { slope: DVector<f64> },
    /// `Z_t^j = amplitude_j * sin(frequency_j * t + phase_j)`.
    Sine {
        amplitude: DVector<f64>,
        frequency: DVector<f64>,
        phase: DVector<f64>,
    },
}

impl SmoothFormula {
    pub fn dim(&self) -> usize {
        match self {
            SmoothFormula::Linear { slope } => slope.len(),
            SmoothFormula::Sine { amplitude, .. } => amplitude.len(),
        }
    }

    pub fn value(&self, t: f64) -> DVector<f64> {
        match self {
            SmoothFormula::Linear { slope } => slope * t,
            SmoothFormula::Sine { amplitude, frequency, phase } => DVector::from_fn(
                amplitude.len(),
                |j, _| amplitude[j] * (frequency[j] * t + phase[j]).sin(),
            ),
        }
    }

    pub fn sample(&self, grid: TimeGrid) -> Result<SampledPath> {
        SampledPath::from_fn(grid, self.dim(), |t| self.value(t))
    }
}

/// What to sample as the deterministic driver `Z`.
#[derive(Debug, Clone, PartialEq)]
pub enum NoiseSpec {
    Brownian { dim: usize, seed: u64 },
    Fbm { dim: usize, hurst: f64, seed: u64 },
    Smooth(SmoothFormula),
}

impl NoiseSpec {
    pub fn dim(&self) -> usize {
        match self {
            NoiseSpec::Brownian { dim, .. } | NoiseSpec::Fbm { dim, .. } => *dim,
            NoiseSpec::Smooth(f) => f.dim(),
        }
    }

    pub fn sample(&self, grid: TimeGrid) -> Result<SampledPath> {
        match self {
            NoiseSpec::Brownian { dim, seed } => generate_brownian(grid, *dim, *seed),
            NoiseSpec::Fbm { dim, hurst, seed } => generate_fbm(grid, *dim, *hurst, *seed),
            NoiseSpec::Smooth(f) => f.sample(grid),
        }
    }
}

/// Standard Brownian path on the grid: `B_0 = 0`, i.i.d. centered Gaussian
/// increments of variance `h` per coordinate.
pub fn generate_brownian(grid: TimeGrid, dim: usize, seed: u64) -> Result<SampledPath> {
    if dim == 0 {
        return Err(Error::invalid("brownian dimension must be >= 1"));
    }
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let sqrt_h = grid.dt().sqrt();
    let mut values = Vec::with_capacity(grid.steps() + 1);
    values.push(DVector::zeros(dim));
    for i in 0..grid.steps() {
        let incr = DVector::from_fn(dim, |_, _| {
            let z: f64 = StandardNormal.sample(&mut rng);
            sqrt_h * z
        });
        values.push(&values[i] + incr);
    }
    SampledPath::new(grid, values)
}

/// Covariance of one-dimensional fractional Brownian motion,
/// `E[Z_s Z_t] = (s^{2H} + t^{2H} - |t-s|^{2H}) / 2`.
pub fn fbm_covariance(s: f64, t: f64, hurst: f64) -> f64 {
    let h2 = 2.0 * hurst;
    0.5 * (s.powf(h2) + t.powf(h2) - (t - s).abs().powf(h2))
}

/// Exact-covariance fractional Brownian motion via Cholesky factorization.
/// Coordinates are independent; `hurst` must lie in (1/3, 1/2].
pub fn generate_fbm(grid: TimeGrid, dim: usize, hurst: f64, seed: u64) -> Result<SampledPath> {
    if dim == 0 {
        return Err(Error::invalid("fbm dimension must be >= 1"));
    }
    if !(hurst > 1.0 / 3.0 && hurst <= 0.5) {
        return Err(Error::invalid(format!(
            "hurst must lie in (1/3, 1/2], got {hurst}"
        )));
    }
    let n = grid.steps();
    if n > FBM_MAX_STEPS {
        return Err(Error::invalid(format!(
            "exact fbm synthesis is capped at N <= {FBM_MAX_STEPS}, got {n}"
        )));
    }

    // Covariance over the nodes t_1..t_N; t_0 = 0 is pinned to the origin.
    let mut cov = DMatrix::zeros(n, n);
    for i in 0..n {
        for j in 0..=i {
            let c = fbm_covariance(grid.node(i + 1), grid.node(j + 1), hurst);
            cov[(i, j)] = c;
            cov[(j, i)] = c;
        }
    }

    let mut lower = None;
    let mut jitter = 0.0_f64;
    for attempt in 0..6 {
        let mut m = cov.clone();
        if attempt > 0 {
            jitter = if attempt == 1 { 1e-12 } else { jitter * 100.0 };
            for i in 0..n {
                m[(i, i)] += jitter;
            }
        }
        if let Some(chol) = m.cholesky() {
            lower = Some(chol.l());
            break;
        }
    }
    let lower = lower.ok_or_else(|| {
        Error::numeric("fbm covariance matrix is not positive definite after jitter")
    })?;

    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let mut values = vec![DVector::zeros(dim); n + 1];
    #[allow(clippy::needless_range_loop)] // k addresses one coordinate across all nodes
    for k in 0..dim {
        let normals = DVector::from_fn(n, |_, _| StandardNormal.sample(&mut rng));
        let coord = &lower * normals;
        for i in 0..n {
            values[i + 1][k] = coord[i];
        }
    }
    SampledPath::new(grid, values)
}

/// Discrete Hölder seminorm: `max_{i<j} |X_j - X_i| / (t_j - t_i)^alpha`
/// over all grid pairs.
pub fn estimate_holder_norm(path: &SampledPath, alpha: f64) -> Result<f64> {
    if !(alpha > 0.0 && alpha <= 1.0) {
        return Err(Error::invalid("alpha must lie in (0, 1]"));
    }
    let n = path.grid().steps();
    let h = path.grid().dt();
    let mut best = 0.0_f64;
    for i in 0..n {
        for j in (i + 1)..=n {
            let gap = ((j - i) as f64 * h).powf(alpha);
            let incr = path.increment(i, j).norm();
            best = best.max(incr / gap);
        }
    }
    Ok(best)
}

/// Empirical `L^p` norm over an ensemble at one node:
/// `(mean_i |X^i_t|^p)^{1/p}`.
pub fn empirical_lp_norm(ensemble: &[SampledPath], p: f64, t_index: usize) -> Result<f64> {
    if ensemble.is_empty() {
        return Err(Error::invalid("ensemble must be non-empty"));
    }
    if p < 1.0 {
        return Err(Error::invalid("p must be >= 1"));
    }
    let n = ensemble[0].grid().steps();
    if t_index > n {
        return Err(Error::invalid(format!("t index {t_index} out of range 0..={n}")));
    }
    let mean: f64 = ensemble
        .iter()
        .map(|path| path.value(t_index).norm().powf(p))
        .sum::<f64>()
        / ensemble.len() as f64;
    Ok(mean.powf(1.0 / p))
}

/// Ensemble maximum `max_i |X^i_t|` at one node. A finite ensemble cannot
/// estimate an essential supremum over the underlying law; this value is a
/// lower bound for it and is reported as such.
pub fn empirical_sup_norm(ensemble: &[SampledPath], t_index: usize) -> Result<f64> {
    if ensemble.is_empty() {
        return Err(Error::invalid("ensemble must be non-empty"));
    }
    let n = ensemble[0].grid().steps();
    if t_index > n {
        return Err(Error::invalid(format!("t index {t_index} out of range 0..={n}")));
    }
    Ok(ensemble
        .iter()
        .map(|path| path.value(t_index).norm())
        .fold(0.0, f64::max))
}

/// Weighted process norm `sup_t ||X_t||_p / e^{t/lambda}`, with the `L^p`
/// norm taken empirically over the ensemble.
pub fn weighted_process_norm(ensemble: &[SampledPath], p: f64, lambda: f64) -> Result<f64> {
    if lambda <= 0.0 {
        return Err(Error::invalid("lambda must be > 0"));
    }
    if ensemble.is_empty() {
        return Err(Error::invalid("ensemble must be non-empty"));
    }
    let grid = *ensemble[0].grid();
    let mut best = 0.0_f64;
    for i in 0..=grid.steps() {
        let lp = empirical_lp_norm(ensemble, p, i)?;
        best = best.max(lp / (grid.node(i) / lambda).exp());
    }
    Ok(best)
}

/// Weighted two-parameter increment norm
/// `sup_{0<t-s<=lambda} ||dX_{s,t}||_p / (e^{t/lambda} (t-s)^alpha)`,
/// evaluated by direct grid maximization. Right-hand side of the comparison
/// inequality checked in the tests.
pub fn weighted_increment_norm(
    ensemble: &[SampledPath],
    p: f64,
    alpha: f64,
    lambda: f64,
) -> Result<f64> {
    if lambda <= 0.0 {
        return Err(Error::invalid("lambda must be > 0"));
    }
    if !(alpha > 0.0 && alpha <= 1.0) {
        return Err(Error::invalid("alpha must lie in (0, 1]"));
    }
    if ensemble.is_empty() {
        return Err(Error::invalid("ensemble must be non-empty"));
    }
    let grid = *ensemble[0].grid();
    let n = grid.steps();
    let h = grid.dt();
    let trials = ensemble.len() as f64;
    let mut best = 0.0_f64;
    for i in 0..n {
        for j in (i + 1)..=n {
            let gap = (j - i) as f64 * h;
            if gap > lambda {
                break;
            }
            let lp = (ensemble
                .iter()
                .map(|path| path.increment(i, j).norm().powf(p))
                .sum::<f64>()
                / trials)
                .powf(1.0 / p);
            best = best.max(lp / ((grid.node(j) / lambda).exp() * gap.powf(alpha)));
        }
    }
    Ok(best)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn grid(t: f64, n: usize) -> TimeGrid {
        TimeGrid::new(t, n).unwrap()
    }

    #[test]
    fn grid_nodes_are_uniform_and_bracketed() {
        let g = grid(2.0, 8);
        assert_eq!(g.node(0), 0.0);
        assert_eq!(g.node(8), 2.0);
        assert!((g.node(3) - 0.75).abs() < 1e-15);
        assert!((g.dt() - 0.25).abs() < 1e-15);
    }

    #[test]
    fn grid_rejects_degenerate_input() {
        assert!(TimeGrid::new(0.0, 4).is_err());
        assert!(TimeGrid::new(1.0, 0).is_err());
        assert!(TimeGrid::new(f64::NAN, 4).is_err());
    }

    #[test]
    fn brownian_single_step_is_one_gaussian_increment() {
        let g = grid(0.5, 1);
        let b = generate_brownian(g, 1, 3).unwrap();
        assert_eq!(b.value(0)[0], 0.0);
        assert!(b.value(1)[0].abs() < 10.0 * g.dt().sqrt());
    }

    #[test]
    fn brownian_is_deterministic_in_seed() {
        let g = grid(1.0, 64);
        let a = generate_brownian(g, 3, 99).unwrap();
        let b = generate_brownian(g, 3, 99).unwrap();
        assert_eq!(a, b);
        let c = generate_brownian(g, 3, 100).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn brownian_rejects_zero_dim() {
        assert!(generate_brownian(grid(1.0, 4), 0, 1).is_err());
    }

    // Chi-square bound: the normalized sample variance of 10^4 increments has
    // std sqrt(2/10^4) ~ 0.0141, so [0.95, 1.05] holds at far beyond the
    // 99.9% level.
    #[test]
    fn brownian_increment_variance_near_h() {
        let g = grid(1.0, 10_000);
        let b = generate_brownian(g, 1, 2024).unwrap();
        let h = g.dt();
        let var: f64 = (0..g.steps())
            .map(|i| {
                let d = b.increment(i, i + 1)[0];
                d * d
            })
            .sum::<f64>()
            / g.steps() as f64;
        let ratio = var / h;
        assert!((0.95..=1.05).contains(&ratio), "ratio = {ratio}");
    }

    // Increments over k steps have variance ~ k h (CLT tolerance on >=10^4
    // samples).
    #[test]
    fn brownian_scaling_over_k_steps() {
        let g = grid(1.0, 20_000);
        let b = generate_brownian(g, 1, 7).unwrap();
        let h = g.dt();
        for k in [2usize, 5] {
            let m = g.steps() / k;
            let var: f64 = (0..m)
                .map(|i| {
                    let d = b.increment(i * k, (i + 1) * k)[0];
                    d * d
                })
                .sum::<f64>()
                / m as f64;
            let ratio = var / (k as f64 * h);
            assert!((ratio - 1.0).abs() < 0.1, "k = {k}, ratio = {ratio}");
        }
    }

    #[test]
    fn fbm_covariance_reduces_to_brownian_at_half() {
        for (s, t) in [(0.25, 0.75), (0.5, 0.5), (0.1, 1.0)] {
            assert!((fbm_covariance(s, t, 0.5) - s.min(t)).abs() < 1e-14);
        }
    }

    #[test]
    fn fbm_starts_at_origin_and_validates_hurst() {
        let g = grid(1.0, 64);
        let z = generate_fbm(g, 2, 0.4, 5).unwrap();
        assert_eq!(z.value(0), &DVector::zeros(2));
        assert!(generate_fbm(g, 1, 0.3, 5).is_err());
        assert!(generate_fbm(g, 1, 0.6, 5).is_err());
        let big = grid(1.0, FBM_MAX_STEPS + 1);
        assert!(generate_fbm(big, 1, 0.45, 5).is_err());
    }

    // Monte-Carlo oracle with CLT error bars: Var(Z_t) = t^{2H} exactly for
    // fbm, so the averaged ratio over 10^3 seeds stays within [0.8, 1.2].
    #[test]
    fn fbm_variance_scaling_matches_hurst() {
        let g = grid(1.0, 256);
        let hurst = 0.4;
        let t_index = 128;
        let t = g.node(t_index);
        let mut ratio_sum = 0.0;
        let seeds = 1000;
        for seed in 0..seeds {
            let z = generate_fbm(g, 1, hurst, seed).unwrap();
            let v = z.value(t_index)[0];
            ratio_sum += v * v / t.powf(2.0 * hurst);
        }
        let ratio = ratio_sum / seeds as f64;
        assert!((0.8..=1.2).contains(&ratio), "ratio = {ratio}");
    }

    #[test]
    fn holder_norm_examples() {
        let g = grid(1.0, 16);
        let constant = SampledPath::from_fn(g, 1, |_| DVector::from_element(1, 2.5)).unwrap();
        assert_eq!(estimate_holder_norm(&constant, 0.5).unwrap(), 0.0);

        let linear = SampledPath::from_fn(g, 1, |t| DVector::from_element(1, t)).unwrap();
        assert!((estimate_holder_norm(&linear, 1.0).unwrap() - 1.0).abs() < 1e-12);
        // For Z_t = t and alpha = 1/2 the ratio (t-s)^{1/2} is maximal on the
        // full interval, giving exactly 1 when T = 1.
        assert!((estimate_holder_norm(&linear, 0.5).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn lp_norm_examples() {
        let g = grid(1.0, 4);
        let c = SampledPath::from_fn(g, 1, |_| DVector::from_element(1, -3.0)).unwrap();
        let ens = vec![c.clone(), c.clone()];
        assert!((empirical_lp_norm(&ens, 2.0, 2).unwrap() - 3.0).abs() < 1e-12);

        let plus = SampledPath::from_fn(g, 1, |_| DVector::from_element(1, 1.0)).unwrap();
        let minus = SampledPath::from_fn(g, 1, |_| DVector::from_element(1, -1.0)).unwrap();
        let ens = vec![plus, minus];
        assert!((empirical_lp_norm(&ens, 2.0, 0).unwrap() - 1.0).abs() < 1e-12);

        assert!(empirical_lp_norm(&[], 2.0, 0).is_err());
    }

    #[test]
    fn sup_norm_bounds_every_lp_norm_from_above() {
        let g = grid(1.0, 8);
        let ens: Vec<SampledPath> =
            (0..64).map(|s| generate_brownian(g, 2, s).unwrap()).collect();
        for t in [1usize, 4, 8] {
            let sup = empirical_sup_norm(&ens, t).unwrap();
            for p in [1.0, 2.0, 6.0] {
                assert!(empirical_lp_norm(&ens, p, t).unwrap() <= sup + 1e-12);
            }
        }
    }

    // CLT tolerance: the L^2 norm of 10^4 standard normal terminal values is
    // 1 +- 0.05.
    #[test]
    fn lp_norm_of_standard_normal_ensemble() {
        let g = grid(1.0, 1);
        let mut ens = Vec::new();
        for seed in 0..10_000u64 {
            ens.push(generate_brownian(g, 1, seed).unwrap());
        }
        let l2 = empirical_lp_norm(&ens, 2.0, 1).unwrap();
        assert!((l2 - 1.0).abs() < 0.05, "l2 = {l2}");
    }

    #[test]
    fn weighted_norm_constant_ensemble_peaks_at_zero() {
        let g = grid(2.0, 8);
        let one = SampledPath::from_fn(g, 1, |_| DVector::from_element(1, 1.0)).unwrap();
        let ens = vec![one];
        let w = weighted_process_norm(&ens, 2.0, 2.0).unwrap();
        assert!((w - 1.0).abs() < 1e-12);
    }

    // Comparison inequality: for Y_0 = 0,
    // (|Y|)_{p;lambda} <= e^2 lambda^alpha (|dY|)_{alpha;p;lambda}.
    #[test]
    fn weighted_comparison_inequality_on_brownian_ensemble() {
        let g = grid(1.0, 64);
        let ens: Vec<SampledPath> =
            (0..32).map(|s| generate_brownian(g, 1, s).unwrap()).collect();
        let p = 2.0;
        let alpha = 0.4;
        let e2 = std::f64::consts::E.powi(2);
        for lambda in [0.125, 0.25, 1.0] {
            let lhs = weighted_process_norm(&ens, p, lambda).unwrap();
            let rhs = weighted_increment_norm(&ens, p, alpha, lambda).unwrap();
            let bound = e2 * lambda.powf(alpha) * rhs;
            assert!(lhs <= bound + 1e-12, "lambda = {lambda}: lhs = {lhs}, bound = {bound}");
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]

        // Monotonicity in lambda of the weighted process norm.
        #[test]
        fn weighted_norm_monotone_in_lambda(seed in 0u64..1000, l1 in 0.05f64..1.0, scale in 1.01f64..8.0) {
            let g = grid(1.0, 32);
            let ens = vec![generate_brownian(g, 1, seed).unwrap()];
            let l2 = l1 * scale;
            let a = weighted_process_norm(&ens, 2.0, l1).unwrap();
            let b = weighted_process_norm(&ens, 2.0, l2).unwrap();
            prop_assert!(a <= b + 1e-12);
        }

        #[test]
        fn csv_roundtrip(seed in 0u64..500, dim in 1usize..4) {
            let g = grid(1.0, 16);
            let path = generate_brownian(g, dim, seed).unwrap();
            let dir = std::env::temp_dir().join(format!("roughsde-grid-{seed}-{dim}.csv"));
            path.write_csv(&dir).unwrap();
            let back = SampledPath::read_csv(&dir).unwrap();
            std::fs::remove_file(&dir).ok();
            prop_assert_eq!(path, back);
        }
    }
}
