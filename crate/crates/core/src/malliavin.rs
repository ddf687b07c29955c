//! Variational flows and first-order Malliavin calculus along a solved
//! trajectory.
//!
//! `J` solves the linearization of the equation along the solution with
//! `J_0 = Id`; `I` solves its own linear equation (with the Ito drift
//! correction) and is the continuum inverse of `J`. Discretely `I J - Id`
//! carries an `O(sqrt(h))` defect, reported as `inverse_defect` and used as
//! a convergence diagnostic.
//!
//! The derivative of the terminal state with respect to a Brownian impulse
//! at node `theta` is the product `J_t J_theta^{-1} sigma(X_theta)`; the
//! per-node exact inverse keeps the product route identical to a direct
//! linear solve started at `theta`, while the equation-solved `I` feeds the
//! looser continuum diagnostics (reduced matrix monotonicity, bracket
//! dynamics).

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::fields::VectorFieldSet;
use crate::grid::{SampledPath, TimeGrid};
use crate::linear::{solve_linear_rsde, LinearCoefficientPaths};
use crate::rough::RoughPath;
use crate::rsde::{DriverFingerprint, SolutionPath};

/// Forward flow `J`, equation-solved co-flow `I`, and exact per-node flow
/// inverses.
#[derive(Debug, Clone)]
pub struct FlowPair {
    grid: TimeGrid,
    j: Vec<DMatrix<f64>>,
    i_equation: Vec<DMatrix<f64>>,
    j_inverse: Vec<DMatrix<f64>>,
    /// `max_k |I_k J_k - Id|` (Frobenius) for the equation-solved `I`.
    pub inverse_defect: f64,
}

impl FlowPair {
    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn j(&self, i: usize) -> &DMatrix<f64> {
        &self.j[i]
    }

    /// `I` solved from its own equation (not a per-node matrix inversion).
    pub fn i_equation(&self, i: usize) -> &DMatrix<f64> {
        &self.i_equation[i]
    }

    /// Exact inverse of the discrete flow at node `i`.
    pub fn j_inverse(&self, i: usize) -> &DMatrix<f64> {
        &self.j_inverse[i]
    }
}

const DIVERGENCE_GUARD: f64 = 1e12;

fn check_sol_drivers(
    vf: &VectorFieldSet,
    sol: &SolutionPath,
    brownian: &SampledPath,
    rough: &RoughPath,
) -> Result<()> {
    if sol.grid() != brownian.grid() || sol.grid() != rough.grid() {
        return Err(Error::invalid("solution and drivers must share the grid"));
    }
    if brownian.dim() != vf.dim_brownian() || rough.dim() != vf.dim_rough() {
        return Err(Error::invalid("driver dimensions do not match the fields"));
    }
    if sol.dim() != vf.dim_state() {
        return Err(Error::invalid("solution dimension does not match the fields"));
    }
    let expected = DriverFingerprint {
        brownian: crate::num::hash_f64_slice(
            brownian.values().iter().flat_map(|v| v.iter().copied()),
        ),
        rough: rough.fingerprint(),
    };
    if sol.fingerprint() != expected {
        return Err(Error::invalid(
            "solution fingerprint does not match the supplied drivers",
        ));
    }
    Ok(())
}

/// One-step transition of the linearized equation at state `x`:
/// `Id + Db h + Dsigma^k dB^k + Dbeta^j dZ^j
///  + ZZ^{jk} (D2beta^k[beta^j] + Dbeta^k Dbeta^j)`.
pub(crate) fn forward_transition(
    vf: &VectorFieldSet,
    x: &DVector<f64>,
    h: f64,
    db: &DVector<f64>,
    dz: &DVector<f64>,
    zz: &DMatrix<f64>,
) -> DMatrix<f64> {
    let d = vf.dim_state();
    let mut m = DMatrix::identity(d, d);
    m += vf.b().jacobian(x) * h;
    for (k, sk) in vf.sigma().iter().enumerate() {
        m += sk.jacobian(x) * db[k];
    }
    let beta_values: Vec<DVector<f64>> = vf.beta().iter().map(|f| f.value(x)).collect();
    let beta_jacobians: Vec<DMatrix<f64>> = vf.beta().iter().map(|f| f.jacobian(x)).collect();
    for (j, bj) in beta_jacobians.iter().enumerate() {
        m += bj * dz[j];
    }
    let n = vf.dim_rough();
    for j in 0..n {
        for k in 0..n {
            let w = zz[(j, k)];
            if w != 0.0 {
                let second = vf.beta()[k].d2_apply(x, &beta_values[j]);
                m += (second + &beta_jacobians[k] * &beta_jacobians[j]) * w;
            }
        }
    }
    m
}

/// One-step right-multiplier of the co-flow equation at state `x`:
/// `I_{i+1} = I_i (Id + Q)` with
/// `Q = -(Db - Dsigma^2) h - Dsigma^k dB^k - Dbeta^j dZ^j
///      + ZZ^{jk} (Dbeta^j Dbeta^k - D2beta^k[beta^j])`.
fn co_flow_multiplier(
    vf: &VectorFieldSet,
    x: &DVector<f64>,
    h: f64,
    db: &DVector<f64>,
    dz: &DVector<f64>,
    zz: &DMatrix<f64>,
) -> DMatrix<f64> {
    let d = vf.dim_state();
    let mut dsigma_sq = DMatrix::zeros(d, d);
    let mut q = DMatrix::identity(d, d);
    for (k, sk) in vf.sigma().iter().enumerate() {
        let jac = sk.jacobian(x);
        dsigma_sq += &jac * &jac;
        q -= jac * db[k];
    }
    q -= (vf.b().jacobian(x) - dsigma_sq) * h;
    let beta_values: Vec<DVector<f64>> = vf.beta().iter().map(|f| f.value(x)).collect();
    let beta_jacobians: Vec<DMatrix<f64>> = vf.beta().iter().map(|f| f.jacobian(x)).collect();
    for (j, bj) in beta_jacobians.iter().enumerate() {
        q -= bj * dz[j];
    }
    let n = vf.dim_rough();
    for j in 0..n {
        for k in 0..n {
            let w = zz[(j, k)];
            if w != 0.0 {
                let second = vf.beta()[k].d2_apply(x, &beta_values[j]);
                q += (&beta_jacobians[j] * &beta_jacobians[k] - second) * w;
            }
        }
    }
    q
}

/// Advances `J` and `I` along the solved trajectory with the one-step
/// scheme of the linear equations.
pub fn solve_flows(
    vf: &VectorFieldSet,
    sol: &SolutionPath,
    brownian: &SampledPath,
    rough: &RoughPath,
) -> Result<FlowPair> {
    check_sol_drivers(vf, sol, brownian, rough)?;
    let grid = *sol.grid();
    let h = grid.dt();
    let d = vf.dim_state();
    let mut j = Vec::with_capacity(grid.steps() + 1);
    let mut i_eq = Vec::with_capacity(grid.steps() + 1);
    j.push(DMatrix::identity(d, d));
    i_eq.push(DMatrix::identity(d, d));
    for i in 0..grid.steps() {
        let x = sol.value(i);
        let db = brownian.increment(i, i + 1);
        let dz = rough.step_increment(i);
        let zz = rough.step_area(i);
        let m = forward_transition(vf, x, h, &db, &dz, zz);
        let q = co_flow_multiplier(vf, x, h, &db, &dz, zz);
        let j_next = &m * &j[i];
        let i_next: DMatrix<f64> = &i_eq[i] * &q;
        let norm = j_next.norm().max(i_next.norm());
        if !norm.is_finite() || norm > DIVERGENCE_GUARD {
            return Err(Error::SolverDiverged { step: i + 1, norm });
        }
        j.push(j_next);
        i_eq.push(i_next);
    }

    let mut j_inverse = Vec::with_capacity(j.len());
    for (idx, jk) in j.iter().enumerate() {
        let inv = jk.clone().try_inverse().ok_or_else(|| {
            Error::numeric(format!("flow matrix is singular at node {idx}"))
        })?;
        j_inverse.push(inv);
    }

    let identity = DMatrix::identity(d, d);
    let inverse_defect = j
        .iter()
        .zip(&i_eq)
        .map(|(jk, ik)| (ik * jk - &identity).norm())
        .fold(0.0_f64, f64::max);

    Ok(FlowPair { grid, j, i_equation: i_eq, j_inverse, inverse_defect })
}

/// Derivative of `X_t` with respect to a Brownian impulse at node `theta`:
/// the product `J_t J_theta^{-1} sigma(X_theta)`. The derivative vanishes
/// for `theta > t` by adaptedness; asking for it is an error.
pub fn malliavin_derivative(
    flows: &FlowPair,
    vf: &VectorFieldSet,
    sol: &SolutionPath,
    theta_index: usize,
    t_index: usize,
) -> Result<DMatrix<f64>> {
    if t_index > sol.grid().steps() {
        return Err(Error::invalid("t index out of range"));
    }
    if theta_index > t_index {
        return Err(Error::invalid(
            "theta > t: the derivative vanishes there by adaptedness",
        ));
    }
    let sigma_theta = vf.sigma_matrix(sol.value(theta_index));
    Ok(flows.j(t_index) * flows.j_inverse(theta_index) * sigma_theta)
}

fn flatten(m: &DMatrix<f64>) -> DVector<f64> {
    DVector::from_column_slice(m.as_slice())
}

fn unflatten(v: &DVector<f64>, rows: usize, cols: usize) -> DMatrix<f64> {
    DMatrix::from_column_slice(rows, cols, v.as_slice())
}

/// Cross-check route: solves the linear equation for the derivative from
/// `theta` with initial condition `sigma(X_theta)` through the generic
/// linear engine (state flattened column-major, left-multiplications lifted
/// by Kronecker products).
pub fn malliavin_derivative_direct(
    vf: &VectorFieldSet,
    sol: &SolutionPath,
    brownian: &SampledPath,
    rough: &RoughPath,
    theta_index: usize,
    t_index: usize,
) -> Result<DMatrix<f64>> {
    check_sol_drivers(vf, sol, brownian, rough)?;
    let n_steps = sol.grid().steps();
    if t_index > n_steps || theta_index > t_index {
        return Err(Error::invalid("need theta <= t <= N"));
    }
    let d = vf.dim_state();
    let m_cols = vf.dim_brownian();
    let sigma_theta = vf.sigma_matrix(sol.value(theta_index));
    if theta_index == t_index {
        return Ok(sigma_theta);
    }

    let h = sol.grid().dt();
    let span = t_index - theta_index;
    let sub_grid = TimeGrid::new(span as f64 * h, span)?;
    let sub_b = SampledPath::new(
        sub_grid,
        (0..=span).map(|k| brownian.value(theta_index + k).clone()).collect(),
    )?;
    let sub_z_base = SampledPath::new(
        sub_grid,
        (0..=span).map(|k| rough.base().value(theta_index + k).clone()).collect(),
    )?;
    let sub_areas: Vec<DMatrix<f64>> =
        (0..span).map(|k| rough.step_area(theta_index + k).clone()).collect();
    let sub_z = RoughPath::from_parts(sub_z_base, sub_areas, rough.alpha_label())?;

    let w = d * m_cols;
    let n = vf.dim_rough();
    let mut coeffs = LinearCoefficientPaths::zero(sub_grid, w, vf.dim_brownian(), n)?;
    let eye_cols = DMatrix::<f64>::identity(m_cols, m_cols);
    for k in 0..=span {
        let x = sol.value(theta_index + k);
        coeffs.g[k] = eye_cols.kronecker(&vf.b().jacobian(x));
        let beta_values: Vec<DVector<f64>> = vf.beta().iter().map(|f| f.value(x)).collect();
        for (l, sl) in vf.sigma().iter().enumerate() {
            coeffs.s[k][l] = eye_cols.kronecker(&sl.jacobian(x));
        }
        for (j, bj) in vf.beta().iter().enumerate() {
            coeffs.f[k][j] = eye_cols.kronecker(&bj.jacobian(x));
        }
        for (j, bv) in beta_values.iter().enumerate() {
            for l in 0..n {
                let second = vf.beta()[l].d2_apply(x, bv);
                coeffs.f_prime[k][j * n + l] = eye_cols.kronecker(&second);
            }
        }
    }
    let xi = flatten(&sigma_theta);
    let out = solve_linear_rsde(&coeffs, &xi, &sub_b, &sub_z)?;
    Ok(unflatten(out.terminal(), d, m_cols))
}

/// Reduced Malliavin matrix by left-endpoint quadrature,
/// `C_t = sum_{s < t} J_s^{-1} sigma sigma^T (X_s) J_s^{-T} h`, symmetrized.
pub fn reduced_malliavin_matrix(
    flows: &FlowPair,
    vf: &VectorFieldSet,
    sol: &SolutionPath,
    t_index: usize,
) -> Result<DMatrix<f64>> {
    if t_index > sol.grid().steps() {
        return Err(Error::invalid("t index out of range"));
    }
    let d = vf.dim_state();
    let h = sol.grid().dt();
    let mut c = DMatrix::zeros(d, d);
    for s in 0..t_index {
        let inv = flows.j_inverse(s);
        let sigma = vf.sigma_matrix(sol.value(s));
        let half = inv * sigma;
        c += &half * half.transpose() * h;
    }
    Ok((&c + c.transpose()) * 0.5)
}

/// Full Malliavin matrix via the flow identity `gamma = J C J^T`.
pub fn malliavin_matrix(
    flows: &FlowPair,
    vf: &VectorFieldSet,
    sol: &SolutionPath,
    t_index: usize,
) -> Result<DMatrix<f64>> {
    let c = reduced_malliavin_matrix(flows, vf, sol, t_index)?;
    let j = flows.j(t_index);
    let gamma = j * c * j.transpose();
    Ok((&gamma + gamma.transpose()) * 0.5)
}

/// Full Malliavin matrix from its definition: left-endpoint quadrature of
/// `D_theta X_t (D_theta X_t)^T` over `theta`.
pub fn malliavin_matrix_from_definition(
    flows: &FlowPair,
    vf: &VectorFieldSet,
    sol: &SolutionPath,
    t_index: usize,
) -> Result<DMatrix<f64>> {
    if t_index > sol.grid().steps() {
        return Err(Error::invalid("t index out of range"));
    }
    let d = vf.dim_state();
    let h = sol.grid().dt();
    let mut gamma = DMatrix::zeros(d, d);
    for theta in 0..t_index {
        let dx = malliavin_derivative(flows, vf, sol, theta, t_index)?;
        gamma += &dx * dx.transpose() * h;
    }
    Ok((&gamma + gamma.transpose()) * 0.5)
}

/// Ascending eigenvalues of a symmetric matrix.
pub fn symmetric_eigenvalues_ascending(m: &DMatrix<f64>) -> Vec<f64> {
    let symmetrized = (m + m.transpose()) * 0.5;
    let mut eig: Vec<f64> = symmetrized.symmetric_eigen().eigenvalues.iter().copied().collect();
    eig.sort_by(|a, b| a.total_cmp(b));
    eig
}

/// Row-major matrix payload for JSON reports.
#[derive(Debug, Clone, Serialize)]
pub struct MatrixJson {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl MatrixJson {
    pub fn from_matrix(m: &DMatrix<f64>) -> Self {
        let mut data = Vec::with_capacity(m.nrows() * m.ncols());
        for r in 0..m.nrows() {
            for c in 0..m.ncols() {
                data.push(m[(r, c)]);
            }
        }
        MatrixJson { rows: m.nrows(), cols: m.ncols(), data }
    }
}

/// First-order Malliavin summary at one node.
#[derive(Debug, Clone, Serialize)]
pub struct MalliavinReport {
    pub t_index: usize,
    pub t: f64,
    /// `D_theta X_t` for every grid node `theta <= t` (left-limit convention
    /// at nodes: evaluated with the flow inverse and `sigma(X)` at the node).
    pub d_theta_x: Vec<MatrixJson>,
    pub reduced_matrix: MatrixJson,
    pub full_matrix: MatrixJson,
    /// Eigenvalues of the reduced matrix, ascending.
    pub eigenvalues: Vec<f64>,
    pub min_eigenvalue: f64,
    pub inverse_defect: f64,
    pub driver: DriverFingerprint,
}

/// Assembles the report at `t_index` (defaults to the horizon when `None`).
pub fn malliavin_report(
    flows: &FlowPair,
    vf: &VectorFieldSet,
    sol: &SolutionPath,
    t_index: Option<usize>,
) -> Result<MalliavinReport> {
    let t_index = t_index.unwrap_or(sol.grid().steps());
    let c = reduced_malliavin_matrix(flows, vf, sol, t_index)?;
    let gamma = malliavin_matrix(flows, vf, sol, t_index)?;
    let eigenvalues = symmetric_eigenvalues_ascending(&c);
    let mut d_theta_x = Vec::with_capacity(t_index + 1);
    for theta in 0..=t_index {
        d_theta_x.push(MatrixJson::from_matrix(&malliavin_derivative(
            flows, vf, sol, theta, t_index,
        )?));
    }
    Ok(MalliavinReport {
        t_index,
        t: sol.grid().node(t_index),
        d_theta_x,
        reduced_matrix: MatrixJson::from_matrix(&c),
        full_matrix: MatrixJson::from_matrix(&gamma),
        min_eigenvalue: eigenvalues.first().copied().unwrap_or(0.0),
        eigenvalues,
        inverse_defect: flows.inverse_defect,
        driver: sol.fingerprint(),
    })
}

/// One scale of the directional-derivative check.
#[derive(Debug, Clone, Serialize)]
pub struct CameronMartinRow {
    pub epsilon: f64,
    pub finite_difference: f64,
    pub pairing: f64,
    pub error: f64,
}

/// Finite-difference vs quadrature pairing of the derivative against a
/// Cameron-Martin direction.
#[derive(Debug, Clone, Serialize)]
pub struct CameronMartinReport {
    pub rows: Vec<CameronMartinRow>,
    /// Log-log slope of the error against epsilon (`None` when the errors
    /// sit at roundoff).
    pub slope: Option<f64>,
}

/// Compares `(X_T(B + eps int h) - X_T(B)) / eps` (projected on the
/// direction of largest response) against the quadrature pairing
/// `sum_theta D_theta X_T h_theta dt`.
pub fn cameron_martin_check(
    vf: &VectorFieldSet,
    x0: &DVector<f64>,
    brownian: &SampledPath,
    rough: &RoughPath,
    h_direction: &SampledPath,
    eps_list: &[f64],
) -> Result<CameronMartinReport> {
    if eps_list.is_empty() {
        return Err(Error::invalid("epsilon list must be non-empty"));
    }
    if h_direction.grid() != brownian.grid() || h_direction.dim() != brownian.dim() {
        return Err(Error::invalid("direction must live on the Brownian grid"));
    }
    let base = crate::rsde::solve_rsde(vf, x0, brownian, rough)?;
    let flows = solve_flows(vf, &base, brownian, rough)?;
    let grid = *base.grid();
    let n = grid.steps();
    let dt = grid.dt();

    // Quadrature pairing: sum_theta D_theta X_T h(theta) dt.
    let mut pairing = DVector::zeros(vf.dim_state());
    for theta in 0..n {
        let dx = malliavin_derivative(&flows, vf, &base, theta, n)?;
        pairing += dx * h_direction.value(theta) * dt;
    }

    // Cumulative integral of h, left endpoint.
    let mut cumulative = Vec::with_capacity(n + 1);
    cumulative.push(DVector::zeros(h_direction.dim()));
    for i in 0..n {
        cumulative.push(&cumulative[i] + h_direction.value(i) * dt);
    }

    let mut rows = Vec::with_capacity(eps_list.len());
    for &eps in eps_list {
        if eps <= 0.0 {
            return Err(Error::invalid("epsilon must be > 0"));
        }
        let shifted = SampledPath::new(
            grid,
            (0..=n).map(|i| brownian.value(i) + &cumulative[i] * eps).collect(),
        )?;
        let perturbed = crate::rsde::solve_rsde(vf, x0, &shifted, rough)?;
        let fd = (perturbed.terminal() - base.terminal()) / eps;
        let error = (&fd - &pairing).norm();
        rows.push(CameronMartinRow {
            epsilon: eps,
            finite_difference: fd.norm(),
            pairing: pairing.norm(),
            error,
        });
    }

    let xs: Vec<f64> = rows.iter().map(|r| r.epsilon).collect();
    let ys: Vec<f64> = rows.iter().map(|r| r.error).collect();
    let slope = if ys.iter().all(|e| *e < 1e-13) { None } else { crate::num::loglog_slope(&xs, &ys) };
    Ok(CameronMartinReport { rows, slope })
}
