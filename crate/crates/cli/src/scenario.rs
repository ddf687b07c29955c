//! Scenario files: TOML schema, full-file validation (all errors collected,
//! not fail-fast) and construction of the simulation objects.

use nalgebra::{DMatrix, DVector};
use serde::Deserialize;

use roughsde::fields::{DerivativeProvider, FieldForm, VectorField, VectorFieldSet};
use roughsde::grid::{SampledPath, SmoothFormula, TimeGrid};
use roughsde::hormander::HierarchyVariant;
use roughsde::rough::{canonical_lift, RoughPath};

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioFile {
    pub schema: Option<u32>,
    pub dimensions: Dimensions,
    pub grid: GridSpec,
    pub initial: Initial,
    pub fields: Fields,
    pub driver: DriverSpec,
    pub brownian: BrownianSpec,
    #[serde(default)]
    pub tasks: Tasks,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Dimensions {
    pub d: usize,
    pub m: usize,
    pub n: usize,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSpec {
    pub horizon: f64,
    pub steps: usize,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Initial {
    pub x0: Vec<f64>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Fields {
    pub b: FieldSpec,
    pub sigma: Vec<FieldSpec>,
    pub beta: Vec<FieldSpec>,
}

/// A library field by name plus a parameter block; matrices are row-major
/// `d x d` lists.
#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FieldSpec {
    pub name: String,
    pub value: Option<Vec<f64>>,
    pub matrix: Option<Vec<f64>>,
    pub offset: Option<Vec<f64>>,
    pub amplitude: Option<Vec<f64>>,
    pub weights: Option<Vec<f64>>,
    pub phase: Option<Vec<f64>>,
    pub derivatives: Option<String>,
    pub eta: Option<f64>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DriverSpec {
    /// `brownian`, `fbm`, `linear` or `sine`.
    pub kind: String,
    pub seed: Option<u64>,
    pub hurst: Option<f64>,
    pub slope: Option<Vec<f64>>,
    pub amplitude: Option<Vec<f64>>,
    pub frequency: Option<Vec<f64>>,
    pub phase: Option<Vec<f64>>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BrownianSpec {
    pub seed: u64,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Tasks {
    pub malliavin: Option<MalliavinTask>,
    pub hormander: Option<HormanderTask>,
    pub roughness: Option<RoughnessTask>,
    pub density: Option<DensityTask>,
    pub norris: Option<NorrisTask>,
    pub residuals: Option<ResidualsTask>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MalliavinTask {
    pub t_index: Option<usize>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HormanderTask {
    pub max_level: Option<usize>,
    /// `standard` or `drift-adjusted`.
    pub variant: Option<String>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RoughnessTask {
    pub theta: Option<f64>,
    pub epsilons: Option<Vec<f64>>,
    pub directions: Option<usize>,
    pub direction_seed: Option<u64>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DensityTask {
    pub trials: usize,
    pub bandwidth: Option<f64>,
    pub t_index: Option<usize>,
    pub eigen_epsilons: Option<Vec<f64>>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NorrisTask {
    pub theta: Option<f64>,
    pub epsilons: Option<Vec<f64>>,
    pub directions: Option<usize>,
    pub tolerance: Option<f64>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ResidualsTask {
    pub strides: Option<Vec<usize>>,
    pub p: Option<f64>,
}

/// A validated scenario with everything needed to run the subcommands.
#[derive(Debug)]
pub struct Scenario {
    pub file: ScenarioFile,
    pub grid: TimeGrid,
    pub vf: VectorFieldSet,
    pub x0: DVector<f64>,
    pub brownian_seed: u64,
}

fn want_vector(
    opt: &Option<Vec<f64>>,
    len: usize,
    what: &str,
    field_name: &str,
    context: &str,
    errors: &mut Vec<String>,
) -> Option<DVector<f64>> {
    match opt {
        Some(v) if v.len() == len => Some(DVector::from_vec(v.clone())),
        Some(v) => {
            errors.push(format!(
                "{context}: {what} has {} entries, the state dimension requires {len}",
                v.len()
            ));
            None
        }
        None => {
            errors.push(format!("{context}: field '{field_name}' requires '{what}'"));
            None
        }
    }
}

fn want_matrix(
    opt: &Option<Vec<f64>>,
    d: usize,
    what: &str,
    field_name: &str,
    context: &str,
    errors: &mut Vec<String>,
) -> Option<DMatrix<f64>> {
    match opt {
        Some(v) if v.len() == d * d => Some(DMatrix::from_row_slice(d, d, v)),
        Some(v) => {
            errors.push(format!(
                "{context}: {what} has {} entries, expected row-major d x d = {}",
                v.len(),
                d * d
            ));
            None
        }
        None => {
            errors.push(format!("{context}: field '{field_name}' requires '{what}'"));
            None
        }
    }
}

fn build_field(
    spec: &FieldSpec,
    d: usize,
    context: &str,
    errors: &mut Vec<String>,
) -> Option<VectorField> {
    let name = spec.name.as_str();
    let form = match name {
        "zero" => Some(FieldForm::Constant(DVector::zeros(d))),
        "constant" => {
            want_vector(&spec.value, d, "value", name, context, errors).map(FieldForm::Constant)
        }
        "linear" => want_matrix(&spec.matrix, d, "matrix", name, context, errors)
            .map(|linear| FieldForm::Affine { linear, offset: DVector::zeros(d) }),
        "affine" => {
            let linear = want_matrix(&spec.matrix, d, "matrix", name, context, errors);
            let offset = want_vector(&spec.offset, d, "offset", name, context, errors);
            match (linear, offset) {
                (Some(linear), Some(offset)) => Some(FieldForm::Affine { linear, offset }),
                _ => None,
            }
        }
        "sine" | "sigmoid" => {
            let amplitude = want_vector(&spec.amplitude, d, "amplitude", name, context, errors);
            let weights = want_matrix(&spec.weights, d, "weights", name, context, errors);
            let phase = match &spec.phase {
                Some(_) => want_vector(&spec.phase, d, "phase", name, context, errors),
                None => Some(DVector::zeros(d)),
            };
            match (amplitude, weights, phase) {
                (Some(amplitude), Some(weights), Some(phase)) => Some(if name == "sine" {
                    FieldForm::SineMix { amplitude, weights, phase }
                } else {
                    FieldForm::SigmoidMix { amplitude, weights, phase }
                }),
                _ => None,
            }
        }
        other => {
            errors.push(format!("{context}: unknown field name '{other}' (known: zero, constant, linear, affine, sine, sigmoid)"));
            None
        }
    }?;

    let provider = match spec.derivatives.as_deref() {
        None | Some("analytic") => DerivativeProvider::Analytic,
        Some("finite-difference") => {
            DerivativeProvider::FiniteDifference { eta: spec.eta.unwrap_or(0.0) }
        }
        Some(other) => {
            errors.push(format!(
                "{context}: unknown derivative provider '{other}' (known: analytic, finite-difference)"
            ));
            return None;
        }
    };
    match VectorField::new(form, provider) {
        Ok(f) => Some(f),
        Err(e) => {
            errors.push(format!("{context}: {e}"));
            None
        }
    }
}

/// Parses and validates a scenario. Syntax problems (unknown or duplicate
/// keys, type mismatches) surface as a single parse error; semantic problems
/// are collected exhaustively.
pub fn parse_scenario(text: &str, seed_override: Option<u64>) -> Result<Scenario, Vec<String>> {
    let file: ScenarioFile =
        toml::from_str(text).map_err(|e| vec![format!("scenario parse error: {e}")])?;

    let mut errors = Vec::new();
    if let Some(schema) = file.schema {
        if schema != 1 {
            errors.push(format!("unsupported schema version {schema}, expected 1"));
        }
    }
    let d = file.dimensions.d;
    let m = file.dimensions.m;
    let n = file.dimensions.n;
    if d == 0 || m == 0 || n == 0 {
        errors.push("dimensions: d, m and n must all be >= 1".to_string());
    }

    let grid = match TimeGrid::new(file.grid.horizon, file.grid.steps) {
        Ok(g) => Some(g),
        Err(e) => {
            errors.push(format!("grid: {e}"));
            None
        }
    };

    if file.initial.x0.len() != d {
        errors.push(format!(
            "initial/state dimension: x0 has {} entries but d = {d}",
            file.initial.x0.len()
        ));
    }
    if file.fields.sigma.len() != m {
        errors.push(format!(
            "sigma/brownian dimension: {} sigma columns declared but m = {m}",
            file.fields.sigma.len()
        ));
    }
    if file.fields.beta.len() != n {
        errors.push(format!(
            "beta/driver dimension: {} beta columns declared but the driver dimension n = {n}",
            file.fields.beta.len()
        ));
    }

    let b = build_field(&file.fields.b, d, "fields.b", &mut errors);
    let sigma: Vec<Option<VectorField>> = file
        .fields
        .sigma
        .iter()
        .enumerate()
        .map(|(k, s)| build_field(s, d, &format!("fields.sigma[{k}]"), &mut errors))
        .collect();
    let beta: Vec<Option<VectorField>> = file
        .fields
        .beta
        .iter()
        .enumerate()
        .map(|(j, s)| build_field(s, d, &format!("fields.beta[{j}]"), &mut errors))
        .collect();

    match file.driver.kind.as_str() {
        "brownian" => {}
        "fbm" => match file.driver.hurst {
            Some(h) if h > 1.0 / 3.0 && h <= 0.5 => {}
            Some(h) => errors.push(format!("driver: hurst must lie in (1/3, 1/2], got {h}")),
            None => errors.push("driver: fbm requires 'hurst'".to_string()),
        },
        "linear" => {
            if file.driver.slope.as_ref().map(|s| s.len()) != Some(n) {
                errors.push(format!("driver: linear requires 'slope' with n = {n} entries"));
            }
        }
        "sine" => {
            for (name, field) in [
                ("amplitude", &file.driver.amplitude),
                ("frequency", &file.driver.frequency),
            ] {
                if field.as_ref().map(|v| v.len()) != Some(n) {
                    errors.push(format!("driver: sine requires '{name}' with n = {n} entries"));
                }
            }
            if let Some(p) = &file.driver.phase {
                if p.len() != n {
                    errors.push(format!("driver: phase must have n = {n} entries"));
                }
            }
        }
        other => errors.push(format!(
            "driver: unknown kind '{other}' (known: brownian, fbm, linear, sine)"
        )),
    }
    if matches!(file.driver.kind.as_str(), "brownian" | "fbm") && file.driver.seed.is_none() {
        errors.push("driver: random drivers require 'seed'".to_string());
    }

    let vf = match (b, sigma.into_iter().collect::<Option<Vec<_>>>(), beta.into_iter().collect::<Option<Vec<_>>>()) {
        (Some(b), Some(sigma), Some(beta)) if errors.is_empty() => {
            match VectorFieldSet::new(b, sigma, beta) {
                Ok(vf) => Some(vf),
                Err(e) => {
                    errors.push(format!("fields: {e}"));
                    None
                }
            }
        }
        _ => None,
    };

    if !errors.is_empty() {
        return Err(errors);
    }
    let grid = grid.expect("validated above");
    let vf = vf.expect("validated above");
    let x0 = DVector::from_vec(file.initial.x0.clone());
    let brownian_seed = seed_override.unwrap_or(file.brownian.seed);
    Ok(Scenario { file, grid, vf, x0, brownian_seed })
}

impl Scenario {
    /// Samples the rough driver and lifts it canonically.
    pub fn rough_driver(&self) -> anyhow::Result<RoughPath> {
        let n = self.file.dimensions.n;
        let driver = &self.file.driver;
        let (path, label): (SampledPath, f64) = match driver.kind.as_str() {
            "brownian" => (
                roughsde::grid::generate_brownian(self.grid, n, driver.seed.unwrap_or(0))?,
                0.5,
            ),
            "fbm" => {
                let hurst = driver.hurst.expect("validated");
                (
                    roughsde::grid::generate_fbm(self.grid, n, hurst, driver.seed.unwrap_or(0))?,
                    hurst,
                )
            }
            "linear" => {
                let slope = DVector::from_vec(driver.slope.clone().expect("validated"));
                (SmoothFormula::Linear { slope }.sample(self.grid)?, 1.0)
            }
            "sine" => {
                let amplitude = DVector::from_vec(driver.amplitude.clone().expect("validated"));
                let frequency = DVector::from_vec(driver.frequency.clone().expect("validated"));
                let phase = match &driver.phase {
                    Some(p) => DVector::from_vec(p.clone()),
                    None => DVector::zeros(n),
                };
                (SmoothFormula::Sine { amplitude, frequency, phase }.sample(self.grid)?, 1.0)
            }
            _ => unreachable!("validated"),
        };
        Ok(canonical_lift(&path, label))
    }

    pub fn brownian_path(&self) -> anyhow::Result<SampledPath> {
        Ok(roughsde::grid::generate_brownian(
            self.grid,
            self.file.dimensions.m,
            self.brownian_seed,
        )?)
    }

    pub fn hierarchy_variant(&self) -> Result<HierarchyVariant, String> {
        match self
            .file
            .tasks
            .hormander
            .as_ref()
            .and_then(|t| t.variant.as_deref())
            .unwrap_or("standard")
        {
            "standard" => Ok(HierarchyVariant::Standard),
            "drift-adjusted" => Ok(HierarchyVariant::DriftAdjusted),
            other => Err(format!(
                "tasks.hormander.variant: unknown variant '{other}' (known: standard, drift-adjusted)"
            )),
        }
    }

    /// Default epsilon ladder for scan-type tasks: dyadic scales from T/4
    /// down to T/32, clipped below at 2h.
    pub fn default_epsilons(&self) -> Vec<f64> {
        let t = self.grid.horizon();
        let floor = 2.0 * self.grid.dt();
        (2..6)
            .map(|k| t / f64::powi(2.0, k))
            .filter(|eps| *eps >= floor)
            .collect()
    }
}
