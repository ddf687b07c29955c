//! The subcommand runners. Each writes its artifacts plus a manifest into
//! the output directory and is byte-reproducible for fixed scenario and
//! seeds (manifest runtime excluded).

use std::fs::File;
use std::path::Path;

use serde_json::json;

use roughsde::diagnostics::{
    eigen_tail, kde_density, norris_inequality_check, run_ensemble,
};
use roughsde::hormander::build_hierarchy;
use roughsde::malliavin::{malliavin_report, solve_flows};
use roughsde::rough::scan_roughness;
use roughsde::rsde::{davie_residual_scan, solve_rsde};

use crate::scenario::Scenario;
use crate::CliError;

fn write_json(dir: &Path, name: &str, value: &impl serde::Serialize) -> anyhow::Result<()> {
    let json = serde_json::to_string_pretty(value)?;
    std::fs::write(dir.join(name), json)?;
    Ok(())
}

pub fn simulate(scenario: &Scenario, out: &Path) -> Result<(), CliError> {
    let brownian = scenario.brownian_path()?;
    let rough = scenario.rough_driver()?;
    let sol = solve_rsde(&scenario.vf, &scenario.x0, &brownian, &rough)?;
    sol.write_csv(out.join("solution.csv"))?;
    Ok(())
}

pub fn malliavin(scenario: &Scenario, out: &Path) -> Result<(), CliError> {
    let brownian = scenario.brownian_path()?;
    let rough = scenario.rough_driver()?;
    let sol = solve_rsde(&scenario.vf, &scenario.x0, &brownian, &rough)?;
    let flows = solve_flows(&scenario.vf, &sol, &brownian, &rough)?;
    let t_index = scenario.file.tasks.malliavin.as_ref().and_then(|t| t.t_index);
    let report = malliavin_report(&flows, &scenario.vf, &sol, t_index)?;
    write_json(out, "malliavin.json", &report)?;
    sol.write_csv(out.join("solution.csv"))?;
    Ok(())
}

pub fn hormander(scenario: &Scenario, out: &Path) -> Result<(), CliError> {
    let variant = scenario.hierarchy_variant().map_err(|e| CliError::Validation(vec![e]))?;
    let max_level = scenario
        .file
        .tasks
        .hormander
        .as_ref()
        .and_then(|t| t.max_level)
        .unwrap_or(5);
    let report = build_hierarchy(&scenario.vf, &scenario.x0, max_level, variant)?;
    write_json(out, "hormander.json", &report)?;
    Ok(())
}

pub fn roughness(scenario: &Scenario, out: &Path) -> Result<(), CliError> {
    let rough = scenario.rough_driver()?;
    let task = scenario.file.tasks.roughness.as_ref();
    let theta = task.and_then(|t| t.theta).unwrap_or(0.6);
    let eps = task
        .and_then(|t| t.epsilons.clone())
        .unwrap_or_else(|| scenario.default_epsilons());
    let directions = task.and_then(|t| t.directions).unwrap_or(8);
    let seed = task.and_then(|t| t.direction_seed).unwrap_or(0);
    let report = scan_roughness(&rough, theta, &eps, directions, seed)?;
    write_json(out, "roughness.json", &report)?;
    let mut csv = File::create(out.join("roughness.csv"))?;
    {
        use std::io::Write;
        writeln!(csv, "eps,modulus").map_err(roughsde::Error::from)?;
        for row in &report.table {
            writeln!(csv, "{},{}", row.epsilon, row.modulus).map_err(roughsde::Error::from)?;
        }
    }
    rough.write_csv(out.join("rough_path.csv"))?;
    Ok(())
}

pub fn density(scenario: &Scenario, out: &Path) -> Result<(), CliError> {
    let task = scenario
        .file
        .tasks
        .density
        .as_ref()
        .ok_or_else(|| CliError::Validation(vec!["tasks.density block is required".into()]))?;
    if task.trials == 0 {
        return Err(CliError::Validation(vec![
            "tasks.density.trials must be >= 1".to_string(),
        ]));
    }
    let rough = scenario.rough_driver()?;
    let result = run_ensemble(
        &scenario.vf,
        &scenario.x0,
        &rough,
        task.trials,
        scenario.brownian_seed,
        task.t_index,
    )?;
    let mut samples = File::create(out.join("samples.csv"))?;
    result.to_csv(&mut samples)?;

    let mut summary = json!({
        "trials": result.trials,
        "failures": result.failures,
        "t_index": result.t_index,
    });
    if scenario.vf.dim_state() <= 2 {
        let estimate = kde_density(&result, task.bandwidth)?;
        let mut density_csv = File::create(out.join("density.csv"))?;
        estimate.to_csv(&mut density_csv)?;
        write_json(out, "density.json", &estimate)?;
        summary["box_integral"] = json!(estimate.box_integral());
    } else {
        summary["note"] =
            json!("state dimension > 2: raw samples exported, no density estimate");
    }
    if let Some(eps) = &task.eigen_epsilons {
        let tail = eigen_tail(&result, eps)?;
        let mut tail_csv = File::create(out.join("eigen_tail.csv"))?;
        tail.to_csv(&mut tail_csv)?;
        summary["eigen_tail_slope"] = json!(tail.slope);
    }
    write_json(out, "ensemble.json", &summary)?;
    Ok(())
}

pub fn norris(scenario: &Scenario, out: &Path) -> Result<(), CliError> {
    let rough = scenario.rough_driver()?;
    let brownian = scenario.brownian_path()?;
    let sol = solve_rsde(&scenario.vf, &scenario.x0, &brownian, &rough)?;
    let task = scenario.file.tasks.norris.as_ref();
    let theta = task.and_then(|t| t.theta).unwrap_or(0.6);
    let eps = task
        .and_then(|t| t.epsilons.clone())
        .unwrap_or_else(|| scenario.default_epsilons());
    let directions = task.and_then(|t| t.directions).unwrap_or(8);
    let tolerance = task.and_then(|t| t.tolerance).unwrap_or(1e-6);
    let scan = scan_roughness(&rough, theta, &eps, directions, 0)?;
    let report = norris_inequality_check(&sol, &rough, theta, &eps, scan.modulus, tolerance)?;
    let mut csv = File::create(out.join("norris.csv"))?;
    report.to_csv(&mut csv)?;
    write_json(out, "norris.json", &json!({"scan": scan, "check": report}))?;
    Ok(())
}

pub fn residuals(scenario: &Scenario, out: &Path) -> Result<(), CliError> {
    let rough = scenario.rough_driver()?;
    let brownian = scenario.brownian_path()?;
    let sol = solve_rsde(&scenario.vf, &scenario.x0, &brownian, &rough)?;
    let task = scenario.file.tasks.residuals.as_ref();
    let strides = task
        .and_then(|t| t.strides.clone())
        .unwrap_or_else(|| vec![2, 4, 8, 16, 32, 64]);
    let p = task.and_then(|t| t.p).unwrap_or(2.0);
    let scan = davie_residual_scan(&sol, &scenario.vf, &brownian, &rough, &strides, p)?;
    let mut csv = File::create(out.join("residuals.csv"))?;
    scan.to_csv(&mut csv)?;
    write_json(out, "residuals.json", &scan)?;
    Ok(())
}
