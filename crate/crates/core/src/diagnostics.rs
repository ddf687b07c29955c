//! Monte-Carlo ensembles over a shared rough driver, kernel density
//! estimates, eigenvalue-tail statistics, a pathwise surrogate of the
//! Norris-type inequality, and the Gubinelli-derivative uniqueness
//! diagnostic.

use std::io::Write;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::fields::VectorFieldSet;
use crate::malliavin::{reduced_malliavin_matrix, solve_flows, symmetric_eigenvalues_ascending};
use crate::num::{loglog_slope, trial_seed};
use crate::rough::RoughPath;
use crate::rsde::{solve_rsde, SolutionPath};

/// Outcome of one trial.
#[derive(Debug, Clone)]
pub struct TrialOutcome {
    pub seed: u64,
    /// State at the requested node; `None` when the solver diverged.
    pub state: Option<DVector<f64>>,
    /// Smallest eigenvalue of the reduced Malliavin matrix at the node.
    pub min_eigenvalue: Option<f64>,
}

/// Ensemble of independent-Brownian trials against a shared rough driver.
#[derive(Debug, Clone)]
pub struct EnsembleResult {
    pub trials: usize,
    pub t_index: usize,
    pub base_seed: u64,
    pub outcomes: Vec<TrialOutcome>,
    pub failures: usize,
}

impl EnsembleResult {
    pub fn successes(&self) -> usize {
        self.trials - self.failures
    }

    pub fn states(&self) -> impl Iterator<Item = &DVector<f64>> {
        self.outcomes.iter().filter_map(|o| o.state.as_ref())
    }

    pub fn min_eigenvalues(&self) -> impl Iterator<Item = f64> + '_ {
        self.outcomes.iter().filter_map(|o| o.min_eigenvalue)
    }

    /// Writes `trial,x1..xd,min_eig` rows for the successful trials.
    pub fn to_csv(&self, out: &mut impl Write) -> Result<()> {
        let dim = self
            .outcomes
            .iter()
            .find_map(|o| o.state.as_ref().map(|s| s.len()))
            .unwrap_or(0);
        write!(out, "trial")?;
        for k in 1..=dim {
            write!(out, ",x{k}")?;
        }
        writeln!(out, ",min_eig")?;
        for (idx, outcome) in self.outcomes.iter().enumerate() {
            if let (Some(state), Some(eig)) = (&outcome.state, outcome.min_eigenvalue) {
                write!(out, "{idx}")?;
                for x in state.iter() {
                    write!(out, ",{x}")?;
                }
                writeln!(out, ",{eig}")?;
            }
        }
        Ok(())
    }
}

/// Runs `trials` independent solves: trial `i` uses the Brownian seed
/// `splitmix(base_seed, i)` and the shared rough driver. Collects the state
/// and the smallest eigenvalue of the reduced Malliavin matrix at `t_index`
/// (the horizon when `None`). Individual divergences are recorded, not
/// fatal.
pub fn run_ensemble(
    vf: &VectorFieldSet,
    x0: &DVector<f64>,
    rough: &RoughPath,
    trials: usize,
    base_seed: u64,
    t_index: Option<usize>,
) -> Result<EnsembleResult> {
    if trials == 0 {
        return Err(Error::invalid("trials must be >= 1"));
    }
    let grid = *rough.grid();
    let t_index = t_index.unwrap_or(grid.steps());
    if t_index > grid.steps() {
        return Err(Error::invalid("t index out of range"));
    }

    let outcomes: Vec<TrialOutcome> = (0..trials)
        .into_par_iter()
        .map(|idx| {
            let seed = trial_seed(base_seed, idx as u64);
            let run = || -> Result<(DVector<f64>, f64)> {
                let brownian =
                    crate::grid::generate_brownian(grid, vf.dim_brownian(), seed)?;
                let sol = solve_rsde(vf, x0, &brownian, rough)?;
                let flows = solve_flows(vf, &sol, &brownian, rough)?;
                let c = reduced_malliavin_matrix(&flows, vf, &sol, t_index)?;
                let min_eig = symmetric_eigenvalues_ascending(&c)[0];
                Ok((sol.value(t_index).clone(), min_eig))
            };
            match run() {
                Ok((state, eig)) => TrialOutcome {
                    seed,
                    state: Some(state),
                    min_eigenvalue: Some(eig),
                },
                Err(_) => TrialOutcome { seed, state: None, min_eigenvalue: None },
            }
        })
        .collect();

    let failures = outcomes.iter().filter(|o| o.state.is_none()).count();
    Ok(EnsembleResult { trials, t_index, base_seed, outcomes, failures })
}

/// Gaussian-kernel density estimate on a regular grid.
#[derive(Debug, Clone, Serialize)]
pub struct DensityEstimate {
    /// Grid coordinates per axis (`d <= 2`).
    pub axes: Vec<Vec<f64>>,
    /// Values in row-major order over the axes.
    pub values: Vec<f64>,
    /// Per-axis bandwidth actually used.
    pub bandwidth: Vec<f64>,
    pub bandwidth_overridden: bool,
    pub trials_used: usize,
}

impl DensityEstimate {
    pub fn dim(&self) -> usize {
        self.axes.len()
    }

    /// Cell-sum approximation of the integral over the grid box.
    pub fn box_integral(&self) -> f64 {
        let cell: f64 = self
            .axes
            .iter()
            .map(|axis| if axis.len() > 1 { axis[1] - axis[0] } else { 1.0 })
            .product();
        self.values.iter().sum::<f64>() * cell
    }

    /// Location of the largest estimated value.
    pub fn mode(&self) -> Vec<f64> {
        let (best, _) = self
            .values
            .iter()
            .enumerate()
            .fold((0usize, f64::MIN), |acc, (i, v)| if *v > acc.1 { (i, *v) } else { acc });
        match self.axes.len() {
            1 => vec![self.axes[0][best]],
            2 => {
                let ny = self.axes[1].len();
                vec![self.axes[0][best / ny], self.axes[1][best % ny]]
            }
            _ => Vec::new(),
        }
    }

    /// Writes `x1[,x2],value` rows.
    pub fn to_csv(&self, out: &mut impl Write) -> Result<()> {
        match self.axes.len() {
            1 => {
                writeln!(out, "x1,value")?;
                for (x, v) in self.axes[0].iter().zip(&self.values) {
                    writeln!(out, "{x},{v}")?;
                }
            }
            2 => {
                writeln!(out, "x1,x2,value")?;
                let ny = self.axes[1].len();
                for (idx, v) in self.values.iter().enumerate() {
                    let x = self.axes[0][idx / ny];
                    let y = self.axes[1][idx % ny];
                    writeln!(out, "{x},{y},{v}")?;
                }
            }
            _ => return Err(Error::invalid("density export supports d <= 2")),
        }
        Ok(())
    }
}

const KDE_GRID_POINTS: usize = 128;

/// Kernel density estimate of the ensemble's states. The default bandwidth
/// is Silverman's rule per axis; an explicit override is echoed in the
/// metadata. The grid spans `mean +- 4 max(std, bandwidth)` per axis so the
/// box keeps essentially all kernel mass even for degenerate samples.
pub fn kde_density(result: &EnsembleResult, bandwidth: Option<f64>) -> Result<DensityEstimate> {
    let samples: Vec<&DVector<f64>> = result.states().collect();
    if samples.is_empty() {
        return Err(Error::invalid("no successful trials to estimate from"));
    }
    let d = samples[0].len();
    if d > 2 {
        return Err(Error::invalid(
            "density estimation supports d <= 2; export raw samples instead",
        ));
    }
    let n = samples.len() as f64;
    let mut mean = vec![0.0_f64; d];
    for s in &samples {
        for k in 0..d {
            mean[k] += s[k];
        }
    }
    mean.iter_mut().for_each(|m| *m /= n);
    let mut std = vec![0.0_f64; d];
    for s in &samples {
        for k in 0..d {
            std[k] += (s[k] - mean[k]).powi(2);
        }
    }
    std.iter_mut().for_each(|v| *v = (*v / n).sqrt());

    let silverman_factor = (4.0 / ((d as f64 + 2.0) * n)).powf(1.0 / (d as f64 + 4.0));
    let bandwidths: Vec<f64> = (0..d)
        .map(|k| match bandwidth {
            Some(h) => h,
            None => {
                let h = std[k] * silverman_factor;
                if h > 0.0 {
                    h
                } else {
                    1e-6 * (1.0 + mean[k].abs())
                }
            }
        })
        .collect();
    if bandwidths.iter().any(|h| !(h.is_finite() && *h > 0.0)) {
        return Err(Error::invalid("bandwidth must be finite and > 0"));
    }

    let axes: Vec<Vec<f64>> = (0..d)
        .map(|k| {
            let extent = 4.0 * std[k].max(bandwidths[k]);
            let lo = mean[k] - extent;
            let hi = mean[k] + extent;
            (0..KDE_GRID_POINTS)
                .map(|i| lo + (hi - lo) * i as f64 / (KDE_GRID_POINTS - 1) as f64)
                .collect()
        })
        .collect();

    let norm: f64 =
        bandwidths.iter().map(|h| h * (2.0 * std::f64::consts::PI).sqrt()).product::<f64>() * n;
    let kernel_at = |point: &[f64]| -> f64 {
        let mut acc = 0.0;
        for s in &samples {
            let mut q = 0.0;
            for k in 0..d {
                let u = (point[k] - s[k]) / bandwidths[k];
                q += u * u;
            }
            acc += (-0.5 * q).exp();
        }
        acc / norm
    };

    let values: Vec<f64> = match d {
        1 => axes[0].par_iter().map(|x| kernel_at(&[*x])).collect(),
        _ => {
            let ny = axes[1].len();
            (0..axes[0].len() * ny)
                .into_par_iter()
                .map(|idx| kernel_at(&[axes[0][idx / ny], axes[1][idx % ny]]))
                .collect()
        }
    };

    Ok(DensityEstimate {
        axes,
        values,
        bandwidth: bandwidths,
        bandwidth_overridden: bandwidth.is_some(),
        trials_used: samples.len(),
    })
}

/// Fraction of successful trials whose state lies within `radius` of
/// `center` (Euclidean).
pub fn sample_mass_within(result: &EnsembleResult, center: &DVector<f64>, radius: f64) -> f64 {
    let mut total = 0usize;
    let mut inside = 0usize;
    for s in result.states() {
        total += 1;
        if (s - center).norm() <= radius {
            inside += 1;
        }
    }
    if total == 0 {
        0.0
    } else {
        inside as f64 / total as f64
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct EigenTailRow {
    pub epsilon: f64,
    /// Fraction of trials with min-eigenvalue <= epsilon.
    pub fraction: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct EigenTailReport {
    pub rows: Vec<EigenTailRow>,
    /// Log-log slope of the positive fractions against epsilon.
    pub slope: Option<f64>,
}

impl EigenTailReport {
    pub fn to_csv(&self, out: &mut impl Write) -> Result<()> {
        writeln!(out, "eps,fraction")?;
        for row in &self.rows {
            writeln!(out, "{},{}", row.epsilon, row.fraction)?;
        }
        Ok(())
    }
}

/// Tail of the smallest reduced-matrix eigenvalue over the ensemble. Rows
/// are sorted by epsilon ascending, making the fractions nondecreasing.
pub fn eigen_tail(result: &EnsembleResult, eps_list: &[f64]) -> Result<EigenTailReport> {
    if eps_list.is_empty() {
        return Err(Error::invalid("epsilon list must be non-empty"));
    }
    let eigs: Vec<f64> = result.min_eigenvalues().collect();
    if eigs.is_empty() {
        return Err(Error::invalid("no successful trials"));
    }
    let mut eps_sorted = eps_list.to_vec();
    eps_sorted.sort_by(|a, b| a.total_cmp(b));
    let rows: Vec<EigenTailRow> = eps_sorted
        .iter()
        .map(|&epsilon| {
            let count = eigs.iter().filter(|e| **e <= epsilon).count();
            EigenTailRow { epsilon, fraction: count as f64 / eigs.len() as f64 }
        })
        .collect();
    let xs: Vec<f64> = rows.iter().map(|r| r.epsilon).collect();
    let ys: Vec<f64> = rows.iter().map(|r| r.fraction).collect();
    let slope = loglog_slope(&xs, &ys);
    Ok(EigenTailReport { rows, slope })
}

#[derive(Debug, Clone, Serialize)]
pub struct NorrisRow {
    pub epsilon: f64,
    /// `L eps^theta sup_t |X'_t|`.
    pub lhs: f64,
    /// `max_{|t-s|<=eps} (|dX_{s,t}| + |dX_{s,t} - X'_s dZ_{s,t}|)`.
    pub rhs: f64,
    pub violated: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct NorrisReport {
    pub theta: f64,
    pub modulus: f64,
    pub rows: Vec<NorrisRow>,
    pub violations: usize,
    /// Conditional means of the inequality are replaced by single-path
    /// increments; the check is a sanity diagnostic, not the inequality
    /// itself.
    pub disclaimer: String,
}

impl NorrisReport {
    pub fn to_csv(&self, out: &mut impl Write) -> Result<()> {
        writeln!(out, "eps,lhs,rhs,violated")?;
        for row in &self.rows {
            writeln!(out, "{},{},{},{}", row.epsilon, row.lhs, row.rhs, row.violated)?;
        }
        Ok(())
    }
}

/// Pathwise surrogate of the small-path inequality: for each scale, the
/// scaled Gubinelli-derivative size must be covered by the observed
/// increment plus remainder oscillation. `modulus` should come from a
/// roughness scan of the same driver.
pub fn norris_inequality_check(
    sol: &SolutionPath,
    rough: &RoughPath,
    theta: f64,
    eps_list: &[f64],
    modulus: f64,
    tolerance: f64,
) -> Result<NorrisReport> {
    if !(theta > 0.0 && theta < 1.0) {
        return Err(Error::invalid("theta must lie in (0, 1)"));
    }
    if eps_list.is_empty() {
        return Err(Error::invalid("epsilon list must be non-empty"));
    }
    if sol.grid() != rough.grid() {
        return Err(Error::invalid("solution and driver must share the grid"));
    }
    let grid = sol.grid();
    let n = grid.steps();
    let h = grid.dt();

    // Spectral norm of the Gubinelli derivative, maximized over nodes.
    let sup_derivative = (0..=n)
        .map(|i| {
            let svd = sol.gubinelli(i).clone().svd(false, false);
            svd.singular_values.iter().cloned().fold(0.0_f64, f64::max)
        })
        .fold(0.0_f64, f64::max);

    let mut rows = Vec::with_capacity(eps_list.len());
    let mut violations = 0usize;
    for &eps in eps_list {
        if !(eps > 0.0 && eps <= grid.horizon()) {
            return Err(Error::invalid(format!("epsilon {eps} outside (0, T]")));
        }
        let window = ((eps / h).floor() as usize).max(1);
        let mut rhs = 0.0_f64;
        for i in 0..n {
            let hi = (i + window).min(n);
            for j in (i + 1)..=hi {
                let dx = sol.value(j) - sol.value(i);
                let dz = rough.base().increment(i, j);
                let remainder = &dx - sol.gubinelli(i) * dz;
                rhs = rhs.max(dx.norm() + remainder.norm());
            }
        }
        let lhs = modulus * eps.powf(theta) * sup_derivative;
        let violated = lhs > rhs * (1.0 + tolerance);
        if violated {
            violations += 1;
        }
        rows.push(NorrisRow { epsilon: eps, lhs, rhs, violated });
    }
    Ok(NorrisReport {
        theta,
        modulus,
        rows,
        violations,
        disclaimer: "pathwise surrogate: conditional means replaced by single-path increments; sanity diagnostic only".to_string(),
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct GubinelliCandidateFit {
    /// Root-mean-square remainder per stride, paired with the interval
    /// length.
    pub remainders: Vec<(f64, f64)>,
    /// Fitted Hoelder exponent of the remainder.
    pub exponent: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub enum GubinelliVerdict {
    /// Only the given candidate (0 or 1) keeps the remainder exponent above
    /// the threshold.
    UniqueCandidate(usize),
    /// Both candidates stay above the threshold; expected on smooth drivers
    /// where the decomposition is not unique.
    IndistinguishableOnThisDriver,
    NeitherControlled,
}

#[derive(Debug, Clone, Serialize)]
pub struct GubinelliGapReport {
    pub alpha: f64,
    /// Candidates must keep the remainder exponent at or above this to count
    /// as admissible Gubinelli derivatives (0.9 * 2 alpha, absorbing
    /// regression noise).
    pub exponent_threshold: f64,
    pub fits: [GubinelliCandidateFit; 2],
    pub verdict: GubinelliVerdict,
}

/// Remainder-exponent regression for two Gubinelli-derivative candidates:
/// per stride, the root-mean-square over pairs of `|dX - X' dZ|`, fitted
/// against the interval length (an extremal statistic would depress the
/// fitted exponent by log factors). On a truly rough driver at most one
/// candidate keeps the exponent near `2 alpha`.
pub fn gubinelli_uniqueness_gap(
    sol: &SolutionPath,
    candidates: (&[DMatrix<f64>], &[DMatrix<f64>]),
    rough: &RoughPath,
    alpha: f64,
    strides: &[usize],
) -> Result<GubinelliGapReport> {
    if !(alpha > 0.0 && alpha <= 0.5) {
        return Err(Error::invalid("alpha must lie in (0, 1/2]"));
    }
    if strides.is_empty() {
        return Err(Error::invalid("stride set must be non-empty"));
    }
    let grid = sol.grid();
    let n = grid.steps();
    let h = grid.dt();
    for c in [candidates.0, candidates.1] {
        if c.len() != n + 1 {
            return Err(Error::invalid("candidate arrays must have one entry per node"));
        }
    }

    let fit = |candidate: &[DMatrix<f64>]| -> GubinelliCandidateFit {
        let mut remainders = Vec::with_capacity(strides.len());
        for &stride in strides {
            if stride == 0 || stride > n {
                continue;
            }
            let mut acc = 0.0_f64;
            let mut count = 0usize;
            let mut i = 0;
            while i + stride <= n {
                let dx = sol.value(i + stride) - sol.value(i);
                let dz = rough.base().increment(i, i + stride);
                let r = (&dx - &candidate[i] * dz).norm();
                acc += r * r;
                count += 1;
                i += stride;
            }
            remainders.push((stride as f64 * h, (acc / count as f64).sqrt()));
        }
        let xs: Vec<f64> = remainders.iter().map(|(dt, _)| *dt).collect();
        let ys: Vec<f64> = remainders.iter().map(|(_, r)| *r).collect();
        let exponent = loglog_slope(&xs, &ys);
        GubinelliCandidateFit { remainders, exponent }
    };

    let fits = [fit(candidates.0), fit(candidates.1)];
    let threshold = 0.9 * 2.0 * alpha;
    let keeps: Vec<bool> = fits
        .iter()
        .map(|f| f.exponent.map(|e| e >= threshold).unwrap_or(false))
        .collect();
    let verdict = match (keeps[0], keeps[1]) {
        (true, true) => GubinelliVerdict::IndistinguishableOnThisDriver,
        (true, false) => GubinelliVerdict::UniqueCandidate(0),
        (false, true) => GubinelliVerdict::UniqueCandidate(1),
        (false, false) => GubinelliVerdict::NeitherControlled,
    };
    Ok(GubinelliGapReport { alpha, exponent_threshold: threshold, fits, verdict })
}
