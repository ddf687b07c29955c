//! Coefficient vector fields `(b, sigma, beta)` with derivatives up to order
//! three, and a Lie-bracket expression algebra on top of them.
//!
//! The built-in library is closed-form: constant, affine, and componentwise
//! trigonometric/sigmoid mixes (bounded with bounded derivatives). Brackets
//! past the available analytic depth fall back to nested central differences
//! with a per-level widened step, and the fallback is recorded on the
//! expression, not hidden.

use std::collections::HashMap;
use std::fmt;
use std::rc::Rc;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::num::hash_f64_slice;

/// Base step for first-order central differences; scaled by `(1 + |x|)` at
/// the evaluation point. Nested differences at level `k` use the widened
/// step `eta^{1/k}`.
pub fn fd_base_step() -> f64 {
    f64::EPSILON.powf(1.0 / 3.0)
}

fn fd_step(level: usize, x_norm: f64) -> f64 {
    let level = level.clamp(1, 3);
    fd_base_step().powf(1.0 / level as f64) * (1.0 + x_norm)
}

/// Closed-form shapes available in the field library.
#[derive(Debug, Clone, PartialEq)]
pub enum FieldForm {
    /// `F(x) = c`.
    Constant(DVector<f64>),
    /// `F(x) = A x + c`.
    Affine { linear: DMatrix<f64>, offset: DVector<f64> },
    /// `F(x) = a .* sin(W x + p)`; bounded with bounded derivatives.
    SineMix {
        amplitude: DVector<f64>,
        weights: DMatrix<f64>,
        phase: DVector<f64>,
    },
    /// `F(x) = a .* tanh(W x + p)`; bounded with bounded derivatives.
    SigmoidMix {
        amplitude: DVector<f64>,
        weights: DMatrix<f64>,
        phase: DVector<f64>,
    },
}

impl FieldForm {
    fn dim(&self) -> usize {
        match self {
            FieldForm::Constant(c) => c.len(),
            FieldForm::Affine { linear, .. } => linear.nrows(),
            FieldForm::SineMix { amplitude, .. } | FieldForm::SigmoidMix { amplitude, .. } => {
                amplitude.len()
            }
        }
    }

    fn check_shapes(&self) -> Result<()> {
        let d = self.dim();
        if d == 0 {
            return Err(Error::invalid("field dimension must be >= 1"));
        }
        match self {
            FieldForm::Constant(_) => Ok(()),
            FieldForm::Affine { linear, offset } => {
                if linear.nrows() != d || linear.ncols() != d || offset.len() != d {
                    return Err(Error::invalid("affine field shapes must be d x d and d"));
                }
                Ok(())
            }
            FieldForm::SineMix { amplitude, weights, phase }
            | FieldForm::SigmoidMix { amplitude, weights, phase } => {
                if weights.nrows() != d || weights.ncols() != d || phase.len() != amplitude.len() {
                    return Err(Error::invalid("mix field shapes must be d x d and d"));
                }
                Ok(())
            }
        }
    }
}

/// How derivatives are produced.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum DerivativeProvider {
    Analytic,
    /// First derivatives by central differences of the value with the given
    /// base step (defaults to `fd_base_step()` when non-positive).
    FiniteDifference { eta: f64 },
}

/// A vector field on `R^d` with derivatives up to order three.
#[derive(Debug, Clone, PartialEq)]
pub struct VectorField {
    form: FieldForm,
    provider: DerivativeProvider,
}

impl VectorField {
    pub fn new(form: FieldForm, provider: DerivativeProvider) -> Result<Self> {
        form.check_shapes()?;
        Ok(VectorField { form, provider })
    }

    pub fn analytic(form: FieldForm) -> Result<Self> {
        VectorField::new(form, DerivativeProvider::Analytic)
    }

    pub fn zero(dim: usize) -> Self {
        VectorField {
            form: FieldForm::Constant(DVector::zeros(dim)),
            provider: DerivativeProvider::Analytic,
        }
    }

    pub fn constant(c: DVector<f64>) -> Self {
        VectorField { form: FieldForm::Constant(c), provider: DerivativeProvider::Analytic }
    }

    pub fn affine(linear: DMatrix<f64>, offset: DVector<f64>) -> Result<Self> {
        VectorField::analytic(FieldForm::Affine { linear, offset })
    }

    pub fn linear(linear: DMatrix<f64>) -> Result<Self> {
        let d = linear.nrows();
        VectorField::affine(linear, DVector::zeros(d))
    }

    pub fn form(&self) -> &FieldForm {
        &self.form
    }

    pub fn provider(&self) -> DerivativeProvider {
        self.provider
    }

    pub fn dim(&self) -> usize {
        self.form.dim()
    }

    /// Number of derivative levels available in closed form.
    pub fn analytic_order(&self) -> usize {
        match self.provider {
            DerivativeProvider::FiniteDifference { .. } => 0,
            DerivativeProvider::Analytic => match self.form {
                FieldForm::Constant(_) | FieldForm::Affine { .. } => usize::MAX / 2,
                FieldForm::SineMix { .. } | FieldForm::SigmoidMix { .. } => 3,
            },
        }
    }

    pub fn value(&self, x: &DVector<f64>) -> DVector<f64> {
        match &self.form {
            FieldForm::Constant(c) => c.clone(),
            FieldForm::Affine { linear, offset } => linear * x + offset,
            FieldForm::SineMix { amplitude, weights, phase } => {
                let u = weights * x + phase;
                DVector::from_fn(amplitude.len(), |i, _| amplitude[i] * u[i].sin())
            }
            FieldForm::SigmoidMix { amplitude, weights, phase } => {
                let u = weights * x + phase;
                DVector::from_fn(amplitude.len(), |i, _| amplitude[i] * u[i].tanh())
            }
        }
    }

    fn fd_eta(&self, x_norm: f64) -> f64 {
        match self.provider {
            DerivativeProvider::FiniteDifference { eta } if eta > 0.0 => eta * (1.0 + x_norm),
            _ => fd_step(1, x_norm),
        }
    }

    pub fn jacobian(&self, x: &DVector<f64>) -> DMatrix<f64> {
        if matches!(self.provider, DerivativeProvider::FiniteDifference { .. }) {
            return self.jacobian_fd(x);
        }
        match &self.form {
            FieldForm::Constant(c) => DMatrix::zeros(c.len(), c.len()),
            FieldForm::Affine { linear, .. } => linear.clone(),
            FieldForm::SineMix { amplitude, weights, phase } => {
                let u = weights * x + phase;
                let d = weights.ncols();
                DMatrix::from_fn(amplitude.len(), d, |i, j| {
                    amplitude[i] * u[i].cos() * weights[(i, j)]
                })
            }
            FieldForm::SigmoidMix { amplitude, weights, phase } => {
                let u = weights * x + phase;
                let d = weights.ncols();
                DMatrix::from_fn(amplitude.len(), d, |i, j| {
                    let t = u[i].tanh();
                    amplitude[i] * (1.0 - t * t) * weights[(i, j)]
                })
            }
        }
    }

    fn jacobian_fd(&self, x: &DVector<f64>) -> DMatrix<f64> {
        let d = self.dim();
        let eta = self.fd_eta(x.norm());
        let mut jac = DMatrix::zeros(d, d);
        for j in 0..d {
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp[j] += eta;
            xm[j] -= eta;
            let col = (self.value(&xp) - self.value(&xm)) / (2.0 * eta);
            jac.set_column(j, &col);
        }
        jac
    }

    /// Directional derivative of the Jacobian: `d/de DF(x + e v)` at `e = 0`.
    pub fn d2_apply(&self, x: &DVector<f64>, v: &DVector<f64>) -> DMatrix<f64> {
        if self.analytic_order() >= 2 {
            match &self.form {
                FieldForm::Constant(c) => return DMatrix::zeros(c.len(), c.len()),
                FieldForm::Affine { linear, .. } => {
                    return DMatrix::zeros(linear.nrows(), linear.ncols())
                }
                FieldForm::SineMix { amplitude, weights, phase } => {
                    let u = weights * x + phase;
                    let wv = weights * v;
                    let d = weights.ncols();
                    return DMatrix::from_fn(amplitude.len(), d, |i, j| {
                        -amplitude[i] * u[i].sin() * wv[i] * weights[(i, j)]
                    });
                }
                FieldForm::SigmoidMix { amplitude, weights, phase } => {
                    let u = weights * x + phase;
                    let wv = weights * v;
                    let d = weights.ncols();
                    return DMatrix::from_fn(amplitude.len(), d, |i, j| {
                        let t = u[i].tanh();
                        let t2 = -2.0 * t * (1.0 - t * t);
                        amplitude[i] * t2 * wv[i] * weights[(i, j)]
                    });
                }
            }
        }
        let norm = v.norm();
        if norm == 0.0 {
            return DMatrix::zeros(self.dim(), self.dim());
        }
        let u = v / norm;
        let eta = fd_step(2, x.norm());
        let jp = self.jacobian(&(x + &u * eta));
        let jm = self.jacobian(&(x - &u * eta));
        (jp - jm) * (norm / (2.0 * eta))
    }

    /// `d/de D2F(x + e w)[v]` at `e = 0`.
    pub fn d3_apply(&self, x: &DVector<f64>, v: &DVector<f64>, w: &DVector<f64>) -> DMatrix<f64> {
        if self.analytic_order() >= 3 {
            match &self.form {
                FieldForm::Constant(c) => return DMatrix::zeros(c.len(), c.len()),
                FieldForm::Affine { linear, .. } => {
                    return DMatrix::zeros(linear.nrows(), linear.ncols())
                }
                FieldForm::SineMix { amplitude, weights, phase } => {
                    let u = weights * x + phase;
                    let wv = weights * v;
                    let ww = weights * w;
                    let d = weights.ncols();
                    return DMatrix::from_fn(amplitude.len(), d, |i, j| {
                        -amplitude[i] * u[i].cos() * wv[i] * ww[i] * weights[(i, j)]
                    });
                }
                FieldForm::SigmoidMix { amplitude, weights, phase } => {
                    let u = weights * x + phase;
                    let wv = weights * v;
                    let ww = weights * w;
                    let d = weights.ncols();
                    return DMatrix::from_fn(amplitude.len(), d, |i, j| {
                        let t = u[i].tanh();
                        let sech2 = 1.0 - t * t;
                        let t3 = -2.0 * sech2 * (1.0 - 3.0 * t * t);
                        amplitude[i] * t3 * wv[i] * ww[i] * weights[(i, j)]
                    });
                }
            }
        }
        let norm = w.norm();
        if norm == 0.0 {
            return DMatrix::zeros(self.dim(), self.dim());
        }
        let u = w / norm;
        let eta = fd_step(3, x.norm());
        let dp = self.d2_apply(&(x + &u * eta), v);
        let dm = self.d2_apply(&(x - &u * eta), v);
        (dp - dm) * (norm / (2.0 * eta))
    }
}

/// The coefficient triple of the equation: drift `b`, diffusion columns
/// `sigma^1..sigma^m` and rough columns `beta^1..beta^n`, all vector fields
/// on the same `R^d`.
#[derive(Debug, Clone)]
pub struct VectorFieldSet {
    d: usize,
    b: VectorField,
    sigma: Vec<VectorField>,
    beta: Vec<VectorField>,
}

impl VectorFieldSet {
    pub fn new(b: VectorField, sigma: Vec<VectorField>, beta: Vec<VectorField>) -> Result<Self> {
        let d = b.dim();
        for (k, f) in sigma.iter().enumerate() {
            if f.dim() != d {
                return Err(Error::invalid(format!(
                    "sigma column {} has dimension {}, expected {d}",
                    k + 1,
                    f.dim()
                )));
            }
        }
        for (j, f) in beta.iter().enumerate() {
            if f.dim() != d {
                return Err(Error::invalid(format!(
                    "beta column {} has dimension {}, expected {d}",
                    j + 1,
                    f.dim()
                )));
            }
        }
        let set = VectorFieldSet { d, b, sigma, beta };
        set.validate_on_probes()?;
        Ok(set)
    }

    fn probe_points(d: usize) -> Vec<DVector<f64>> {
        let mut probes = vec![DVector::zeros(d)];
        for i in 0..d {
            let mut p = DVector::zeros(d);
            p[i] = 0.3;
            probes.push(p.clone());
            p[i] = -0.7;
            probes.push(p);
        }
        probes.push(DVector::from_fn(d, |i, _| 0.1 * (i as f64 + 1.0)));
        probes
    }

    /// Construction-time sanity: values finite and analytic first derivatives
    /// consistent with central differences on a small probe set.
    fn validate_on_probes(&self) -> Result<()> {
        let probes = Self::probe_points(self.d);
        let report = validate_derivatives(self, &probes, 0.0)?;
        if let Some((order, probe, name, err)) = report.flagged.first() {
            return Err(Error::invalid(format!(
                "derivative check failed for {name} at probe {probe} (order {order}): relative deviation {err:.3e}"
            )));
        }
        Ok(())
    }

    pub fn dim_state(&self) -> usize {
        self.d
    }

    pub fn dim_brownian(&self) -> usize {
        self.sigma.len()
    }

    pub fn dim_rough(&self) -> usize {
        self.beta.len()
    }

    pub fn b(&self) -> &VectorField {
        &self.b
    }

    pub fn sigma(&self) -> &[VectorField] {
        &self.sigma
    }

    pub fn beta(&self) -> &[VectorField] {
        &self.beta
    }

    /// `sigma(x)` as a `d x m` matrix of column values.
    pub fn sigma_matrix(&self, x: &DVector<f64>) -> DMatrix<f64> {
        let mut out = DMatrix::zeros(self.d, self.sigma.len());
        for (k, f) in self.sigma.iter().enumerate() {
            out.set_column(k, &f.value(x));
        }
        out
    }

    /// `beta(x)` as a `d x n` matrix of column values.
    pub fn beta_matrix(&self, x: &DVector<f64>) -> DMatrix<f64> {
        let mut out = DMatrix::zeros(self.d, self.beta.len());
        for (j, f) in self.beta.iter().enumerate() {
            out.set_column(j, &f.value(x));
        }
        out
    }

    /// Bracket atoms named `b`, `sigma1..sigmam`, `beta1..betan`.
    pub fn bracket_atoms(&self) -> (BracketField, Vec<BracketField>, Vec<BracketField>) {
        let b = BracketField::atom("b", self.b.clone());
        let sigma = self
            .sigma
            .iter()
            .enumerate()
            .map(|(k, f)| BracketField::atom(format!("sigma{}", k + 1), f.clone()))
            .collect();
        let beta = self
            .beta
            .iter()
            .enumerate()
            .map(|(j, f)| BracketField::atom(format!("beta{}", j + 1), f.clone()))
            .collect();
        (b, sigma, beta)
    }
}

/// Per-field, per-order deviation between analytic derivatives and central
/// differences.
#[derive(Debug, Clone)]
pub struct DerivativeReport {
    /// Max relative deviation for orders 1, 2, 3.
    pub max_relative: [f64; 3],
    /// `(order, probe index, field name, relative deviation)` for every pair
    /// exceeding [`DerivativeReport::TOLERANCE`].
    pub flagged: Vec<(usize, usize, String, f64)>,
}

impl DerivativeReport {
    pub const TOLERANCE: f64 = 1e-4;
}

/// Compares analytic derivatives of every field in the set against central
/// differences with step `eta * (1 + |x|)` (the default base step when
/// `eta <= 0`). Fields with a finite-difference provider trivially agree.
pub fn validate_derivatives(
    vf: &VectorFieldSet,
    probes: &[DVector<f64>],
    eta: f64,
) -> Result<DerivativeReport> {
    if probes.is_empty() {
        return Err(Error::invalid("probe set must be non-empty"));
    }
    let mut report = DerivativeReport { max_relative: [0.0; 3], flagged: Vec::new() };
    let named: Vec<(String, &VectorField)> = std::iter::once(("b".to_string(), &vf.b))
        .chain(vf.sigma.iter().enumerate().map(|(k, f)| (format!("sigma{}", k + 1), f)))
        .chain(vf.beta.iter().enumerate().map(|(j, f)| (format!("beta{}", j + 1), f)))
        .collect();
    let d = vf.d;

    for (pi, x) in probes.iter().enumerate() {
        if x.len() != d {
            return Err(Error::invalid(format!("probe {pi} has wrong dimension")));
        }
        let step = if eta > 0.0 { eta * (1.0 + x.norm()) } else { fd_step(1, x.norm()) };
        for (name, f) in &named {
            let value = f.value(x);
            if value.iter().any(|v| !v.is_finite()) {
                return Err(Error::numeric(format!("{name} non-finite at probe {pi}")));
            }

            // Order 1: analytic Jacobian vs central differences of the value.
            let jac = f.jacobian(x);
            let mut jac_fd = DMatrix::zeros(d, d);
            for j in 0..d {
                let mut xp = x.clone();
                let mut xm = x.clone();
                xp[j] += step;
                xm[j] -= step;
                jac_fd.set_column(j, &((f.value(&xp) - f.value(&xm)) / (2.0 * step)));
            }
            let rel1 = (&jac - &jac_fd).norm() / (1.0 + jac.norm());
            report.max_relative[0] = report.max_relative[0].max(rel1);
            if rel1 > DerivativeReport::TOLERANCE {
                report.flagged.push((1, pi, name.clone(), rel1));
            }

            // Orders 2 and 3 along coordinate directions, against central
            // differences of the previous-order quantity with the same step
            // (the differenced quantities are the field's own derivatives,
            // so no nesting-widened step is needed here).
            for j in 0..d {
                let mut ej = DVector::zeros(d);
                ej[j] = 1.0;
                let d2 = f.d2_apply(x, &ej);
                let jp = f.jacobian(&(x + &ej * step));
                let jm = f.jacobian(&(x - &ej * step));
                let d2_fd = (jp - jm) / (2.0 * step);
                let rel2 = (&d2 - &d2_fd).norm() / (1.0 + d2.norm());
                report.max_relative[1] = report.max_relative[1].max(rel2);
                if rel2 > DerivativeReport::TOLERANCE {
                    report.flagged.push((2, pi, name.clone(), rel2));
                }

                let d3 = f.d3_apply(x, &ej, &ej);
                let dp = f.d2_apply(&(x + &ej * step), &ej);
                let dm = f.d2_apply(&(x - &ej * step), &ej);
                let d3_fd = (dp - dm) / (2.0 * step);
                let rel3 = (&d3 - &d3_fd).norm() / (1.0 + d3.norm());
                report.max_relative[2] = report.max_relative[2].max(rel3);
                if rel3 > DerivativeReport::TOLERANCE {
                    report.flagged.push((3, pi, name.clone(), rel3));
                }
            }
        }
    }
    Ok(report)
}

#[derive(Debug)]
enum BracketExpr {
    Atom { name: String, field: VectorField },
    Bracket { left: Rc<BracketExpr>, right: Rc<BracketExpr> },
    Sum { terms: Vec<(f64, Rc<BracketExpr>)> },
}

impl BracketExpr {
    fn dim(&self) -> usize {
        match self {
            BracketExpr::Atom { field, .. } => field.dim(),
            BracketExpr::Bracket { left, .. } => left.dim(),
            BracketExpr::Sum { terms } => terms[0].1.dim(),
        }
    }

    fn analytic_order(&self) -> usize {
        match self {
            BracketExpr::Atom { field, .. } => field.analytic_order(),
            BracketExpr::Bracket { left, right } => {
                left.analytic_order().min(right.analytic_order()).saturating_sub(1)
            }
            BracketExpr::Sum { terms } => {
                terms.iter().map(|(_, t)| t.analytic_order()).min().unwrap_or(0)
            }
        }
    }

    fn bracket_depth(&self) -> usize {
        match self {
            BracketExpr::Atom { .. } => 0,
            BracketExpr::Bracket { left, right } => {
                1 + left.bracket_depth().max(right.bracket_depth())
            }
            BracketExpr::Sum { terms } => {
                terms.iter().map(|(_, t)| t.bracket_depth()).max().unwrap_or(0)
            }
        }
    }

    fn structural_hash(&self) -> u64 {
        match self {
            BracketExpr::Atom { name, .. } => {
                hash_f64_slice(name.bytes().map(|b| b as f64).chain([1.0]))
            }
            BracketExpr::Bracket { left, right } => {
                let l = left.structural_hash();
                let r = right.structural_hash();
                hash_f64_slice([2.0, f64::from_bits(l), f64::from_bits(r)])
            }
            BracketExpr::Sum { terms } => {
                let mut acc = vec![3.0];
                for (c, t) in terms {
                    acc.push(*c);
                    acc.push(f64::from_bits(t.structural_hash()));
                }
                hash_f64_slice(acc)
            }
        }
    }

    fn write_expression(&self, out: &mut String) {
        match self {
            BracketExpr::Atom { name, .. } => out.push_str(name),
            BracketExpr::Bracket { left, right } => {
                out.push('[');
                left.write_expression(out);
                out.push(',');
                right.write_expression(out);
                out.push(']');
            }
            BracketExpr::Sum { terms } => {
                for (i, (c, t)) in terms.iter().enumerate() {
                    if i > 0 {
                        out.push_str(" + ");
                    }
                    if (*c - 1.0).abs() > 1e-15 {
                        out.push_str(&format!("{c}*"));
                    }
                    t.write_expression(out);
                }
            }
        }
    }
}

/// Cache of `(value, Jacobian)` per expression node per point. The bracket
/// hierarchies re-evaluate shared subtrees heavily; sharing is by `Rc`
/// pointer, so structurally equal but separately built trees do not alias.
type CachedEval = Rc<(DVector<f64>, DMatrix<f64>)>;

#[derive(Default)]
pub struct BracketContext {
    cache: HashMap<(usize, u64), CachedEval>,
}

impl BracketContext {
    pub fn new() -> Self {
        Self::default()
    }
}

/// A vector field given by an expression tree over named atoms with Lie
/// bracket and linear-combination nodes. `[F,G](x) = DG(x)F(x) - DF(x)G(x)`.
#[derive(Clone)]
pub struct BracketField {
    expr: Rc<BracketExpr>,
}

impl fmt::Debug for BracketField {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "BracketField({})", self.expression())
    }
}

impl BracketField {
    pub fn atom(name: impl Into<String>, field: VectorField) -> Self {
        BracketField { expr: Rc::new(BracketExpr::Atom { name: name.into(), field }) }
    }

    /// `sum_i c_i F_i`; all terms must live on the same `R^d`.
    pub fn combination(terms: Vec<(f64, BracketField)>) -> Result<Self> {
        if terms.is_empty() {
            return Err(Error::invalid("combination needs at least one term"));
        }
        let d = terms[0].1.dim();
        if terms.iter().any(|(_, t)| t.dim() != d) {
            return Err(Error::invalid("combination terms must share a dimension"));
        }
        let terms = terms.into_iter().map(|(c, t)| (c, t.expr)).collect();
        Ok(BracketField { expr: Rc::new(BracketExpr::Sum { terms }) })
    }

    pub fn dim(&self) -> usize {
        self.expr.dim()
    }

    /// Analytic derivative levels left after consuming one per bracket.
    pub fn analytic_order(&self) -> usize {
        self.expr.analytic_order()
    }

    /// True when evaluating the value or Jacobian resorts to finite
    /// differences somewhere in the tree.
    pub fn uses_finite_differences(&self) -> bool {
        self.expr.analytic_order() < 1
    }

    pub fn bracket_depth(&self) -> usize {
        self.expr.bracket_depth()
    }

    /// Structural hash used for deduplication in hierarchies.
    pub fn structural_hash(&self) -> u64 {
        self.expr.structural_hash()
    }

    /// Human-readable expression, e.g. `[beta1,[sigma1,b]]`.
    pub fn expression(&self) -> String {
        let mut s = String::new();
        self.expr.write_expression(&mut s);
        s
    }

    pub fn value(&self, x: &DVector<f64>) -> DVector<f64> {
        let mut ctx = BracketContext::new();
        self.value_jacobian_in(&mut ctx, x).0.clone()
    }

    pub fn jacobian(&self, x: &DVector<f64>) -> DMatrix<f64> {
        let mut ctx = BracketContext::new();
        self.value_jacobian_in(&mut ctx, x).1.clone()
    }

    pub fn value_and_jacobian(&self, x: &DVector<f64>) -> (DVector<f64>, DMatrix<f64>) {
        let mut ctx = BracketContext::new();
        let rc = self.value_jacobian_in(&mut ctx, x);
        (rc.0.clone(), rc.1.clone())
    }

    /// Memoized value and Jacobian at `x`.
    pub fn value_jacobian_in(
        &self,
        ctx: &mut BracketContext,
        x: &DVector<f64>,
    ) -> CachedEval {
        eval_value_jacobian(&self.expr, ctx, x)
    }

    /// Directional derivative of the Jacobian along `v`. Analytic through
    /// the recursion while budget lasts, then nested central differences
    /// with a step widened by the bracket depth.
    pub fn d2_apply(
        &self,
        ctx: &mut BracketContext,
        x: &DVector<f64>,
        v: &DVector<f64>,
    ) -> DMatrix<f64> {
        eval_d2_apply(&self.expr, ctx, x, v)
    }
}

/// Lie bracket `[F,G]`. Both fields must live on the same `R^d`.
pub fn lie_bracket(f: &BracketField, g: &BracketField) -> Result<BracketField> {
    if f.dim() != g.dim() {
        return Err(Error::invalid("bracket operands must share a dimension"));
    }
    Ok(BracketField {
        expr: Rc::new(BracketExpr::Bracket { left: f.expr.clone(), right: g.expr.clone() }),
    })
}

fn point_key(x: &DVector<f64>) -> u64 {
    hash_f64_slice(x.iter().copied())
}

fn eval_value_jacobian(
    expr: &Rc<BracketExpr>,
    ctx: &mut BracketContext,
    x: &DVector<f64>,
) -> CachedEval {
    let key = (Rc::as_ptr(expr) as usize, point_key(x));
    if let Some(hit) = ctx.cache.get(&key) {
        return hit.clone();
    }
    let computed = match expr.as_ref() {
        BracketExpr::Atom { field, .. } => (field.value(x), field.jacobian(x)),
        BracketExpr::Sum { terms } => {
            let d = expr.dim();
            let mut value = DVector::zeros(d);
            let mut jac = DMatrix::zeros(d, d);
            for (c, t) in terms {
                let vt = eval_value_jacobian(t, ctx, x);
                value += &vt.0 * *c;
                jac += &vt.1 * *c;
            }
            (value, jac)
        }
        BracketExpr::Bracket { left, right } => {
            let lf = eval_value_jacobian(left, ctx, x);
            let rg = eval_value_jacobian(right, ctx, x);
            let (vf, jf) = (&lf.0, &lf.1);
            let (vg, jg) = (&rg.0, &rg.1);
            let value = jg * vf - jf * vg;
            // D[F,G] = D2G[F] + DG DF - D2F[G] - DF DG.
            let hg_f = eval_d2_apply(right, ctx, x, vf);
            let hf_g = eval_d2_apply(left, ctx, x, vg);
            let jac = hg_f + jg * jf - hf_g - jf * jg;
            (value, jac)
        }
    };
    let rc = Rc::new(computed);
    ctx.cache.insert(key, rc.clone());
    rc
}

fn eval_d2_apply(
    expr: &Rc<BracketExpr>,
    ctx: &mut BracketContext,
    x: &DVector<f64>,
    v: &DVector<f64>,
) -> DMatrix<f64> {
    match expr.as_ref() {
        BracketExpr::Atom { field, .. } => field.d2_apply(x, v),
        BracketExpr::Sum { terms } => {
            let d = expr.dim();
            let mut out = DMatrix::zeros(d, d);
            for (c, t) in terms {
                out += eval_d2_apply(t, ctx, x, v) * *c;
            }
            out
        }
        BracketExpr::Bracket { .. } => {
            // Second derivative of a bracket: central difference of the
            // bracket Jacobian, step widened with the nesting depth.
            let norm = v.norm();
            let d = expr.dim();
            if norm == 0.0 {
                return DMatrix::zeros(d, d);
            }
            let level = (expr.bracket_depth() + 1).min(3);
            let eta = fd_step(level, x.norm());
            let u = v / norm;
            let jp = eval_value_jacobian(expr, ctx, &(x + &u * eta)).1.clone();
            let jm = eval_value_jacobian(expr, ctx, &(x - &u * eta)).1.clone();
            (jp - jm) * (norm / (2.0 * eta))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn demo_sigma1() -> VectorField {
        VectorField::constant(DVector::from_vec(vec![1.0, 0.0]))
    }

    /// `beta1(x) = (0, x_1)`, the Hoermander demo rough column.
    fn demo_beta1() -> VectorField {
        VectorField::linear(DMatrix::from_row_slice(2, 2, &[0.0, 0.0, 1.0, 0.0])).unwrap()
    }

    fn sine_field() -> VectorField {
        VectorField::analytic(FieldForm::SineMix {
            amplitude: DVector::from_vec(vec![0.8, -0.5]),
            weights: DMatrix::from_row_slice(2, 2, &[1.0, 0.3, -0.2, 0.7]),
            phase: DVector::from_vec(vec![0.1, 1.2]),
        })
        .unwrap()
    }

    #[test]
    fn affine_jacobian_is_exact() {
        let a = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, -3.0, 0.5]);
        let f = VectorField::affine(a.clone(), DVector::zeros(2)).unwrap();
        let x = DVector::from_vec(vec![0.4, -1.1]);
        assert!((f.jacobian(&x) - &a).norm() < 1e-14);
        assert_eq!(f.d2_apply(&x, &DVector::from_element(2, 1.0)).norm(), 0.0);
    }

    #[test]
    fn analytic_derivatives_match_finite_differences() {
        let f = sine_field();
        let x = DVector::from_vec(vec![0.3, -0.2]);
        let eta = 1e-5;
        for j in 0..2 {
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp[j] += eta;
            xm[j] -= eta;
            let fd = (f.value(&xp) - f.value(&xm)) / (2.0 * eta);
            let col = f.jacobian(&x).column(j).into_owned();
            assert!((fd - col).norm() < 1e-8);

            let mut ej = DVector::zeros(2);
            ej[j] = 1.0;
            let fd2 = (f.jacobian(&xp) - f.jacobian(&xm)) / (2.0 * eta);
            assert!((f.d2_apply(&x, &ej) - fd2).norm() < 1e-7);

            let fd3 = (f.d2_apply(&xp, &ej) - f.d2_apply(&xm, &ej)) / (2.0 * eta);
            assert!((f.d3_apply(&x, &ej, &ej) - fd3).norm() < 1e-6);
        }
    }

    #[test]
    fn validate_derivatives_linear_field_is_exact() {
        let vf = VectorFieldSet::new(
            VectorField::linear(DMatrix::from_row_slice(2, 2, &[0.1, -0.4, 0.7, 0.2])).unwrap(),
            vec![demo_sigma1()],
            vec![demo_beta1()],
        )
        .unwrap();
        let probes = vec![DVector::zeros(2), DVector::from_vec(vec![1.0, -2.0])];
        let report = validate_derivatives(&vf, &probes, 0.0).unwrap();
        assert!(report.max_relative[0] <= 1e-10, "{:?}", report.max_relative);
        assert!(report.flagged.is_empty());
    }

    // Central differences of smooth fields deviate at second order in the
    // step; halving the step divides the deviation by about four.
    #[test]
    fn finite_difference_error_is_second_order() {
        let vf = VectorFieldSet::new(sine_field(), vec![], vec![]).unwrap();
        let probes: Vec<DVector<f64>> = (0..10)
            .map(|i| DVector::from_fn(2, |j, _| 0.15 * (i as f64) - 0.3 * j as f64))
            .collect();
        let coarse = validate_derivatives(&vf, &probes, 2e-2).unwrap().max_relative[0];
        let fine = validate_derivatives(&vf, &probes, 1e-2).unwrap().max_relative[0];
        let ratio = coarse / fine;
        assert!((2.5..=5.5).contains(&ratio), "ratio = {ratio}");
    }

    #[test]
    fn fd_provider_validates_against_itself() {
        let fd_field = VectorField::new(
            sine_field().form().clone(),
            DerivativeProvider::FiniteDifference { eta: 0.0 },
        )
        .unwrap();
        let vf = VectorFieldSet::new(fd_field, vec![], vec![]).unwrap();
        let probes = vec![DVector::from_vec(vec![0.2, 0.4])];
        let report = validate_derivatives(&vf, &probes, 0.0).unwrap();
        assert_eq!(report.max_relative[0], 0.0);
    }

    // Hand symbolic oracle: with sigma1 = (1,0) and beta1 = (0,x_1),
    // [sigma1, beta1](x) = Dbeta1 sigma1 - Dsigma1 beta1 = (0,1).
    #[test]
    fn hand_bracket_of_demo_fields() {
        let s = BracketField::atom("sigma1", demo_sigma1());
        let b = BracketField::atom("beta1", demo_beta1());
        let br = lie_bracket(&s, &b).unwrap();
        for x in [DVector::zeros(2), DVector::from_vec(vec![2.0, -1.0])] {
            let v = br.value(&x);
            assert!((v - DVector::from_vec(vec![0.0, 1.0])).norm() < 1e-12);
        }
        assert_eq!(br.expression(), "[sigma1,beta1]");
    }

    #[test]
    fn bracket_of_field_with_itself_vanishes() {
        let f = BracketField::atom("f", sine_field());
        let br = lie_bracket(&f, &f).unwrap();
        let x = DVector::from_vec(vec![0.5, 0.1]);
        assert!(br.value(&x).norm() < 1e-12);
    }

    #[test]
    fn bracket_of_constants_vanishes() {
        let a = BracketField::atom("a", VectorField::constant(DVector::from_vec(vec![1.0, 2.0])));
        let c = BracketField::atom("c", VectorField::constant(DVector::from_vec(vec![-3.0, 0.5])));
        let br = lie_bracket(&a, &c).unwrap();
        assert_eq!(br.value(&DVector::zeros(2)).norm(), 0.0);
    }

    #[test]
    fn bracket_jacobian_matches_finite_differences() {
        let f = BracketField::atom("f", sine_field());
        let g = BracketField::atom("g", demo_beta1());
        let br = lie_bracket(&f, &g).unwrap();
        let x = DVector::from_vec(vec![0.3, -0.6]);
        let jac = br.jacobian(&x);
        let eta = 1e-5;
        for j in 0..2 {
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp[j] += eta;
            xm[j] -= eta;
            let fd = (br.value(&xp) - br.value(&xm)) / (2.0 * eta);
            assert!((jac.column(j).into_owned() - fd).norm() < 1e-6);
        }
    }

    // Jacobi identity at probe points for analytic fields.
    #[test]
    fn jacobi_identity_residual_small() {
        let f = BracketField::atom("f", sine_field());
        let g = BracketField::atom("g", demo_beta1());
        let h = BracketField::atom("h", demo_sigma1());
        let nested = |a: &BracketField, b: &BracketField, c: &BracketField, x: &DVector<f64>| {
            lie_bracket(a, &lie_bracket(b, c).unwrap()).unwrap().value(x)
        };
        for x in [DVector::zeros(2), DVector::from_vec(vec![0.4, 0.9])] {
            let total = nested(&f, &g, &h, &x) + nested(&g, &h, &f, &x) + nested(&h, &f, &g, &x);
            assert!(total.norm() <= 1e-6, "jacobi residual {}", total.norm());
        }
    }

    #[test]
    fn analytic_budget_and_fd_flag() {
        let f = BracketField::atom("f", sine_field()); // order 3
        let g = BracketField::atom("g", demo_beta1()); // affine, effectively unlimited
        let b1 = lie_bracket(&f, &g).unwrap(); // order 2
        let b2 = lie_bracket(&b1, &g).unwrap(); // order 1
        let b3 = lie_bracket(&b2, &g).unwrap(); // order 0: value needs FD
        assert_eq!(b1.analytic_order(), 2);
        assert_eq!(b2.analytic_order(), 1);
        assert_eq!(b3.analytic_order(), 0);
        assert!(!b2.uses_finite_differences());
        assert!(b3.uses_finite_differences());
        // Deep bracket values still evaluate.
        let v = b3.value(&DVector::from_vec(vec![0.1, 0.2]));
        assert!(v.iter().all(|x| x.is_finite()));
    }

    #[test]
    fn combination_evaluates_linearly() {
        let a = BracketField::atom("a", demo_sigma1());
        let c = BracketField::atom("c", VectorField::constant(DVector::from_vec(vec![0.0, 2.0])));
        let sum = BracketField::combination(vec![(2.0, a), (0.5, c)]).unwrap();
        let v = sum.value(&DVector::zeros(2));
        assert!((v - DVector::from_vec(vec![2.0, 1.0])).norm() < 1e-14);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]

        // Antisymmetry and bilinearity of the bracket at random probes.
        #[test]
        fn bracket_antisymmetry_and_bilinearity(x0 in -1.0f64..1.0, x1 in -1.0f64..1.0, c in -2.0f64..2.0) {
            let x = DVector::from_vec(vec![x0, x1]);
            let f = BracketField::atom("f", sine_field());
            let g = BracketField::atom("g", demo_beta1());
            let h = BracketField::atom("h", demo_sigma1());

            let fg = lie_bracket(&f, &g).unwrap().value(&x);
            let gf = lie_bracket(&g, &f).unwrap().value(&x);
            prop_assert!((&fg + &gf).norm() < 1e-8);

            // [f + c h, g] = [f,g] + c [h,g]
            let fch = BracketField::combination(vec![(1.0, f.clone()), (c, h.clone())]).unwrap();
            let lhs = lie_bracket(&fch, &g).unwrap().value(&x);
            let hg = lie_bracket(&h, &g).unwrap().value(&x);
            prop_assert!((lhs - (&fg + hg * c)).norm() < 1e-8);
        }
    }
}
