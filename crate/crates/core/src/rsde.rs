//! Forward solvers for the equation
//! `dX = b(X) dt + sigma(X) dB + beta(X) dZ`.
//!
//! The one-step scheme keeps the rough driver to second order and the
//! Brownian/time parts to first order:
//!
//! ```text
//! X_{i+1} = X_i + b(X_i) h + sigma(X_i) dB_i + beta(X_i) dZ_i
//!           + sum_{j,k} ZZ_i^{jk} Dbeta^k(X_i) beta^j(X_i),
//! ```
//!
//! the discrete shadow of the local expansion whose remainder defines a
//! solution. A plain Euler-Maruyama reference with the rough part absorbed
//! into the drift (`b + beta Zdot`) is provided as a consistency oracle for
//! smooth drivers.

use std::io::Write;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::fields::VectorFieldSet;
use crate::grid::{SampledPath, TimeGrid};
use crate::num::{hash_f64_slice, loglog_slope};
use crate::rough::{chen_compose, RoughPath};

const DIVERGENCE_GUARD: f64 = 1e12;

/// Bit-level hashes of the drivers a trajectory was computed from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct DriverFingerprint {
    pub brownian: u64,
    pub rough: u64,
}

/// A solved trajectory with its Gubinelli derivative `beta(X_t)`.
#[derive(Debug, Clone)]
pub struct SolutionPath {
    grid: TimeGrid,
    x: Vec<DVector<f64>>,
    gubinelli: Vec<DMatrix<f64>>,
    fingerprint: DriverFingerprint,
}

impl SolutionPath {
    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn dim(&self) -> usize {
        self.x[0].len()
    }

    pub fn value(&self, i: usize) -> &DVector<f64> {
        &self.x[i]
    }

    pub fn values(&self) -> &[DVector<f64>] {
        &self.x
    }

    pub fn terminal(&self) -> &DVector<f64> {
        self.x.last().expect("non-empty trajectory")
    }

    /// `beta(X_{t_i})`, the Gubinelli derivative at node `i`.
    pub fn gubinelli(&self, i: usize) -> &DMatrix<f64> {
        &self.gubinelli[i]
    }

    pub fn gubinelli_path(&self) -> &[DMatrix<f64>] {
        &self.gubinelli
    }

    pub fn fingerprint(&self) -> DriverFingerprint {
        self.fingerprint
    }

    /// Writes `t,x1..xd` rows at full precision.
    pub fn to_csv(&self, out: &mut impl Write) -> Result<()> {
        write!(out, "t")?;
        for k in 1..=self.dim() {
            write!(out, ",x{k}")?;
        }
        writeln!(out)?;
        for (i, v) in self.x.iter().enumerate() {
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
}

fn fingerprint(brownian: &SampledPath, rough_hash: u64) -> DriverFingerprint {
    DriverFingerprint {
        brownian: hash_f64_slice(brownian.values().iter().flat_map(|v| v.iter().copied())),
        rough: rough_hash,
    }
}

fn check_dims(vf: &VectorFieldSet, x0: &DVector<f64>, brownian: &SampledPath, rough_dim: usize) -> Result<()> {
    if x0.len() != vf.dim_state() {
        return Err(Error::invalid("initial condition dimension mismatch"));
    }
    if vf.dim_brownian() == 0 || vf.dim_rough() == 0 {
        return Err(Error::invalid(
            "the solver expects at least one sigma and one beta column (use zero fields to disable them)",
        ));
    }
    if brownian.dim() != vf.dim_brownian() {
        return Err(Error::invalid(format!(
            "brownian path has dimension {}, fields expect m = {}",
            brownian.dim(),
            vf.dim_brownian()
        )));
    }
    if rough_dim != vf.dim_rough() {
        return Err(Error::invalid(format!(
            "rough driver has dimension {rough_dim}, fields expect n = {}",
            vf.dim_rough()
        )));
    }
    Ok(())
}

/// `sum_{j,k} ZZ^{jk} Dbeta^k(x) beta^j(x)`, the second-level term of the
/// scheme.
pub(crate) fn beta_area_apply(vf: &VectorFieldSet, x: &DVector<f64>, zz: &DMatrix<f64>) -> DVector<f64> {
    let n = vf.dim_rough();
    let d = vf.dim_state();
    let beta_values: Vec<DVector<f64>> = vf.beta().iter().map(|f| f.value(x)).collect();
    let beta_jacobians: Vec<DMatrix<f64>> = vf.beta().iter().map(|f| f.jacobian(x)).collect();
    let mut out = DVector::zeros(d);
    for j in 0..n {
        for k in 0..n {
            let w = zz[(j, k)];
            if w != 0.0 {
                out += (&beta_jacobians[k] * &beta_values[j]) * w;
            }
        }
    }
    out
}

/// Davie one-step solve of the equation along the given drivers.
pub fn solve_rsde(
    vf: &VectorFieldSet,
    x0: &DVector<f64>,
    brownian: &SampledPath,
    rough: &RoughPath,
) -> Result<SolutionPath> {
    check_dims(vf, x0, brownian, rough.dim())?;
    if brownian.grid() != rough.grid() {
        return Err(Error::invalid("drivers must share the grid"));
    }
    let grid = *brownian.grid();
    let h = grid.dt();
    let mut x = Vec::with_capacity(grid.steps() + 1);
    let mut gubinelli = Vec::with_capacity(grid.steps() + 1);
    x.push(x0.clone());
    gubinelli.push(vf.beta_matrix(x0));
    for i in 0..grid.steps() {
        let xi = &x[i];
        let db = brownian.increment(i, i + 1);
        let dz = rough.step_increment(i);
        let mut next = xi + vf.b().value(xi) * h;
        next += vf.sigma_matrix(xi) * db;
        next += &gubinelli[i] * dz;
        next += beta_area_apply(vf, xi, rough.step_area(i));
        let norm = next.norm();
        if !norm.is_finite() || norm > DIVERGENCE_GUARD {
            return Err(Error::SolverDiverged { step: i + 1, norm });
        }
        gubinelli.push(vf.beta_matrix(&next));
        x.push(next);
    }
    Ok(SolutionPath {
        grid,
        x,
        gubinelli,
        fingerprint: fingerprint(brownian, rough.fingerprint()),
    })
}

/// Euler-Maruyama on the same grid with the rough part absorbed into the
/// drift: the integral of `beta(X) Zdot` over a step is taken as
/// `beta(X_i) dZ_i`. Consistency oracle for smooth drivers only.
pub fn solve_sde_reference(
    vf: &VectorFieldSet,
    x0: &DVector<f64>,
    brownian: &SampledPath,
    z_smooth: &SampledPath,
) -> Result<SolutionPath> {
    check_dims(vf, x0, brownian, z_smooth.dim())?;
    if brownian.grid() != z_smooth.grid() {
        return Err(Error::invalid("drivers must share the grid"));
    }
    let grid = *brownian.grid();
    let h = grid.dt();
    let mut x = Vec::with_capacity(grid.steps() + 1);
    let mut gubinelli = Vec::with_capacity(grid.steps() + 1);
    x.push(x0.clone());
    gubinelli.push(vf.beta_matrix(x0));
    for i in 0..grid.steps() {
        let xi = &x[i];
        let db = brownian.increment(i, i + 1);
        let dz = z_smooth.increment(i, i + 1);
        let mut next = xi + vf.b().value(xi) * h;
        next += vf.sigma_matrix(xi) * db;
        next += &gubinelli[i] * dz;
        let norm = next.norm();
        if !norm.is_finite() || norm > DIVERGENCE_GUARD {
            return Err(Error::SolverDiverged { step: i + 1, norm });
        }
        gubinelli.push(vf.beta_matrix(&next));
        x.push(next);
    }
    Ok(SolutionPath {
        grid,
        x,
        gubinelli,
        fingerprint: fingerprint(
            brownian,
            hash_f64_slice(z_smooth.values().iter().flat_map(|v| v.iter().copied())),
        ),
    })
}

/// One row of the expansion-residual table.
#[derive(Debug, Clone, Serialize)]
pub struct ResidualRow {
    pub stride: usize,
    pub dt: f64,
    pub lp_residual: f64,
}

/// Expansion residuals over interval pairs at several strides, with the
/// least-squares slope of `log` residual against `log` interval length.
#[derive(Debug, Clone, Serialize)]
pub struct ResidualScan {
    pub p: f64,
    pub rows: Vec<ResidualRow>,
    pub slope: Option<f64>,
}

impl ResidualScan {
    pub fn to_csv(&self, out: &mut impl Write) -> Result<()> {
        writeln!(out, "stride,dt,lp_residual")?;
        for row in &self.rows {
            writeln!(out, "{},{},{}", row.stride, row.dt, row.lp_residual)?;
        }
        Ok(())
    }
}

/// Reconstructs the local expansion remainder with every coefficient frozen
/// at the left endpoint,
///
/// ```text
/// X(t) - X(s) - b(X_s)(t-s) - sigma(X_s) dB_{s,t} - beta(X_s) dZ_{s,t}
///             - Dbeta beta(X_s) ZZ_{s,t},
/// ```
///
/// over non-overlapping pairs at each stride, and reports its empirical
/// `L^p` size per stride over the pairs.
pub fn davie_residual_scan(
    sol: &SolutionPath,
    vf: &VectorFieldSet,
    brownian: &SampledPath,
    rough: &RoughPath,
    strides: &[usize],
    p: f64,
) -> Result<ResidualScan> {
    if p < 1.0 {
        return Err(Error::invalid("p must be >= 1"));
    }
    if strides.is_empty() {
        return Err(Error::invalid("stride set must be non-empty"));
    }
    let grid = sol.grid();
    let n = grid.steps();
    let h = grid.dt();
    let mut rows = Vec::with_capacity(strides.len());
    for &stride in strides {
        if stride < 2 || stride > n {
            return Err(Error::invalid(format!("stride {stride} out of range 2..={n}")));
        }
        let mut acc = 0.0_f64;
        let mut count = 0usize;
        let mut start = 0usize;
        while start + stride <= n {
            let end = start + stride;
            let xs = sol.value(start);
            let (dz, zz) = chen_compose(rough, start, end)?;
            let mut expansion = vf.b().value(xs) * (stride as f64 * h);
            expansion += vf.sigma_matrix(xs) * brownian.increment(start, end);
            expansion += sol.gubinelli(start) * dz;
            expansion += beta_area_apply(vf, xs, &zz);
            let remainder = sol.value(end) - xs - expansion;
            acc += remainder.norm().powf(p);
            count += 1;
            start += stride;
        }
        let lp = (acc / count as f64).powf(1.0 / p);
        rows.push(ResidualRow { stride, dt: stride as f64 * h, lp_residual: lp });
    }
    let xs: Vec<f64> = rows.iter().map(|r| r.dt).collect();
    let ys: Vec<f64> = rows.iter().map(|r| r.lp_residual).collect();
    let slope = loglog_slope(&xs, &ys);
    Ok(ResidualScan { p, rows, slope })
}
