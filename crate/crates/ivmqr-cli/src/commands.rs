//! Subcommand implementations over the library pipelines.

use ivmqr::densities::{estimate_density, exact_density, DensityField};
use ivmqr::domain::{default_probe_family, QuadratureGrid, ReferenceMeasure};
use ivmqr::identification::{check_condition_12, FieldQuadruple};
use ivmqr::linearization::{
    perturbed_profile, phi, phi_prime, piola_residual, sample_tangent, SignedGridMeasure,
    TangentStyle, DEFAULT_DERIVATIVE_BOUND,
};
use ivmqr::linearization::full_rank_probe;
use ivmqr::model::{
    pushforward_gaps, rank_violation_demo, ObservedSample, StructuralModel, DEFAULT_EIGEN_BOX,
};
use ivmqr::solver::{
    fit, local_uniqueness_probe, recovery_experiment, FitOptions, FitProblem, RecoveryOptions,
};
use nalgebra::DVector;
use serde_json::json;
use std::fs::File;
use std::io::BufReader;
use std::path::{Path, PathBuf};

use crate::config::{self, Expectation, ExperimentConfig};
use crate::report::{self, Report, Status};
use crate::RunArgs;

/// Errors that terminate a run with exit code 1.
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("config {0}")]
    Config(String),
    #[error(transparent)]
    Lib(#[from] ivmqr::Error),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("report: {0}")]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Clone, Copy)]
pub enum Kind {
    Simulate,
    VerifyImplication,
    CheckIdentification,
    Linearize,
    ProbeRank,
    Fit,
    Recover,
    DemoRankViolation,
}

impl Kind {
    fn name(self) -> &'static str {
        match self {
            Kind::Simulate => "simulate",
            Kind::VerifyImplication => "verify-implication",
            Kind::CheckIdentification => "check-identification",
            Kind::Linearize => "linearize",
            Kind::ProbeRank => "probe-rank",
            Kind::Fit => "fit",
            Kind::Recover => "recover",
            Kind::DemoRankViolation => "demo-rank-violation",
        }
    }
}

/// Verdict, compact result JSON, artifact names, and a one-line summary.
type CommandOutput = (Status, serde_json::Value, Vec<String>, String);

pub fn run(kind: Kind, args: &RunArgs) -> Result<u8, CliError> {
    let mut config = config::load(&args.config)?;
    if let Some(seed) = args.seed {
        config.seed = seed;
    }
    if let Some(threads) = args.threads {
        config.threads = Some(threads);
    }
    if let Some(threads) = config.threads {
        rayon::ThreadPoolBuilder::new().num_threads(threads).build_global().ok();
    }
    let out = resolve_out(args, &config);
    std::fs::create_dir_all(&out)?;
    config.out = Some(out.display().to_string());

    let (status, result, artifacts, summary) = match kind {
        Kind::Simulate => simulate(&mut config, &out)?,
        Kind::VerifyImplication => verify_implication(&mut config, &out)?,
        Kind::CheckIdentification => check_identification(&mut config, &out)?,
        Kind::Linearize => linearize(&mut config, &out)?,
        Kind::ProbeRank => probe_rank(&mut config, &out)?,
        Kind::Fit => fit_command(&mut config, &out)?,
        Kind::Recover => recover(&mut config, &out)?,
        Kind::DemoRankViolation => demo_rank_violation(&mut config, &out)?,
    };
    let report = Report {
        schema: report::SCHEMA,
        subcommand: kind.name(),
        status,
        seed: config.seed,
        config: &config,
        result,
        artifacts,
    };
    let path = report::write_report(&out, &report)?;
    println!("{}: {} ({summary}) -> {}", kind.name(), status.label(), path.display());
    Ok(status.exit_code())
}

/// IVMQR_OUT beats `--out` beats the config entry beats `ivmqr-out`.
fn resolve_out(args: &RunArgs, config: &ExperimentConfig) -> PathBuf {
    if let Ok(dir) = std::env::var("IVMQR_OUT") {
        if !dir.is_empty() {
            return PathBuf::from(dir);
        }
    }
    if let Some(dir) = &args.out {
        return dir.clone();
    }
    if let Some(dir) = &config.out {
        return PathBuf::from(dir);
    }
    PathBuf::from("ivmqr-out")
}

fn require_model(config: &ExperimentConfig) -> Result<StructuralModel, CliError> {
    match &config.model {
        Some(spec) => spec.build(),
        None => Err(CliError::Config("this subcommand needs a `model` entry".into())),
    }
}

/// Exact conditional densities indexed `[z][d]`.
fn exact_fields(model: &StructuralModel) -> Result<Vec<Vec<DensityField>>, CliError> {
    (0..model.instrument_law().len())
        .map(|z| {
            (0..model.treatments())
                .map(|d| Ok(exact_density(model, d, z)?))
                .collect::<Result<Vec<_>, CliError>>()
        })
        .collect()
}

fn simulate(config: &mut ExperimentConfig, out: &Path) -> Result<CommandOutput, CliError> {
    let model = require_model(config)?;
    let sample = model.simulate(config.n, config.seed, config.simulate.keep_latent)?;
    let mut buffer = Vec::new();
    sample.write_csv(&mut buffer)?;
    std::fs::write(out.join("sample.csv"), &buffer)?;
    let z_count = model.instrument_law().len();
    let shares: Vec<Vec<f64>> = (0..model.treatments())
        .map(|d| (0..z_count).map(|z| sample.empirical_share(d, z)).collect())
        .collect();
    let result = json!({
        "rows": sample.len(),
        "dim": sample.dim(),
        "cell-shares": shares,
    });
    let summary = format!("{} rows", sample.len());
    Ok((Status::Pass, result, vec!["sample.csv".into()], summary))
}

fn verify_implication(config: &mut ExperimentConfig, out: &Path) -> Result<CommandOutput, CliError> {
    let model = require_model(config)?;
    let sets = match &config.verify_implication.sets {
        Some(sets) => sets.clone(),
        None => default_probe_family(model.measure().domain().dim())?,
    };
    config.verify_implication.sets = Some(sets.clone());
    let sample = model.simulate(config.n, config.seed, false)?;
    let check = pushforward_gaps(&model, &sample, &sets, config.verify_implication.sigmas)?;
    let artifact = report::write_csv(
        out,
        "gaps.csv",
        "set,z,mass,empirical,gap,threshold,rows",
        check.gaps.iter().map(|g| {
            format!(
                "{},{},{},{},{},{},{}",
                g.set, g.z, g.mass, g.empirical, g.gap, g.threshold, g.rows
            )
        }),
    )?;
    let status = if check.pass { Status::Pass } else { Status::ConditionFailed };
    let summary = format!("max gap ratio {:.3}", check.max_ratio);
    Ok((status, serde_json::to_value(&check)?, vec![artifact], summary))
}

fn check_identification(
    config: &mut ExperimentConfig,
    out: &Path,
) -> Result<CommandOutput, CliError> {
    let model = require_model(config)?;
    let quad = FieldQuadruple::from_model(&model)?;
    let (box_lo, box_hi) = model.eigen_box();
    let lo = config.check_identification.lambda_lo.unwrap_or(box_lo);
    let hi = config.check_identification.lambda_hi.unwrap_or(box_hi);
    config.check_identification.lambda_lo = Some(lo);
    config.check_identification.lambda_hi = Some(hi);
    if !(0.0 < lo && lo < hi) {
        return Err(CliError::Config("eigenvalue band requires 0 < lambda-lo < lambda-hi".into()));
    }
    let resolution = config.check_identification.resolution;
    let report = check_condition_12(&quad, lo, hi, resolution)?;
    let mut rows = Vec::with_capacity(resolution);
    for k in 1..=resolution {
        let upper = lo + (hi - lo) * k as f64 / resolution as f64;
        let partial = check_condition_12(&quad, lo, upper, resolution)?;
        rows.push(format!("{upper},{}", partial.margin));
    }
    let artifact = report::write_csv(out, "margin_curve.csv", "lambda_hi,margin", rows)?;
    let status = if report.pass { Status::Pass } else { Status::ConditionFailed };
    let summary = format!("margin {:.4}", report.margin);
    Ok((status, serde_json::to_value(&report)?, vec![artifact], summary))
}

fn linearize(config: &mut ExperimentConfig, out: &Path) -> Result<CommandOutput, CliError> {
    let model = require_model(config)?;
    let section = config.linearize.clone();
    if section.radii.iter().chain(&section.piola_steps).any(|r| !(*r > 0.0)) {
        return Err(CliError::Config("radii and piola-steps must be positive".into()));
    }
    let grid = QuadratureGrid::build(*model.measure().domain(), section.grid_resolution)?;
    let fields = exact_fields(&model)?;
    let z_count = model.instrument_law().len();
    let batch = sample_tangent(
        model.maps(),
        model.eigen_box(),
        TangentStyle::SupportPreserving,
        DEFAULT_DERIVATIVE_BOUND,
        &grid,
        section.tangent_seed,
        section.directions,
    )?;
    let bases: Vec<SignedGridMeasure> =
        (0..z_count).map(|z| phi(model.maps(), &fields[z], &grid)).collect::<Result<_, _>>()?;
    let mut rows = Vec::new();
    let mut max_gap_by_radius = vec![0.0f64; section.radii.len()];
    for (i, direction) in batch.directions.iter().enumerate() {
        let derivatives: Vec<SignedGridMeasure> = (0..z_count)
            .map(|z| phi_prime(model.maps(), direction, &fields[z], &grid).map(|(m, _)| m))
            .collect::<Result<_, _>>()?;
        for (j, &radius) in section.radii.iter().enumerate() {
            let profile = perturbed_profile(model.maps(), direction, radius)?;
            let mut total = 0.0;
            for z in 0..z_count {
                let image = phi(&profile, &fields[z], &grid)?;
                let secant = image.sub(&bases[z])?;
                let scaled: Vec<f64> = secant
                    .densities()
                    .iter()
                    .zip(derivatives[z].densities())
                    .map(|(s, d)| s / radius - d)
                    .collect();
                total += SignedGridMeasure::new(grid.clone(), scaled)?.tv_norm();
            }
            rows.push(format!("{i},{radius},{total}"));
            max_gap_by_radius[j] = max_gap_by_radius[j].max(total);
        }
    }
    let gap_artifact = report::write_csv(out, "slope_gap.csv", "direction,radius,gap", rows)?;

    let mut piola_rows = Vec::new();
    let mut piola_values = Vec::new();
    for (d, map) in model.maps().iter().enumerate() {
        for &step in &section.piola_steps {
            let residual = piola_residual(map, &grid, step)?;
            piola_rows.push(format!("{d},{step},{residual}"));
            piola_values.push(json!({ "map": d, "step": step, "residual": residual }));
        }
    }
    let piola_artifact = report::write_csv(out, "piola.csv", "map,step,residual", piola_rows)?;

    let result = json!({
        "directions": batch.directions.len(),
        "attempts": batch.attempts,
        "max-gap-by-radius": max_gap_by_radius,
        "piola": piola_values,
    });
    let summary =
        format!("{} directions x {} radii", batch.directions.len(), section.radii.len());
    Ok((Status::Pass, result, vec![gap_artifact, piola_artifact], summary))
}

fn probe_rank(config: &mut ExperimentConfig, out: &Path) -> Result<CommandOutput, CliError> {
    let model = require_model(config)?;
    let section = config.probe_rank.clone();
    let (band_lo, band_hi) = section.doubling_band;
    if !(0.0 < band_lo && band_lo < band_hi) {
        return Err(CliError::Config("doubling-band must be an increasing positive pair".into()));
    }
    let grid = QuadratureGrid::build(*model.measure().domain(), section.grid_resolution)?;
    let fields = exact_fields(&model)?;
    let general = sample_tangent(
        model.maps(),
        model.eigen_box(),
        TangentStyle::General,
        DEFAULT_DERIVATIVE_BOUND,
        &grid,
        section.tangent_seed,
        section.directions,
    )?;
    let probe = full_rank_probe(model.maps(), &fields, &grid, &general.directions)?;
    let support = sample_tangent(
        model.maps(),
        model.eigen_box(),
        TangentStyle::SupportPreserving,
        DEFAULT_DERIVATIVE_BOUND,
        &grid,
        section.uniqueness_seed,
        section.uniqueness_directions,
    )?;
    let uniqueness = local_uniqueness_probe(
        model.maps(),
        &fields,
        model.measure(),
        &grid,
        model.eigen_box(),
        &section.radii,
        &support.directions,
    )?;

    let values_artifact = report::write_csv(
        out,
        "probe_values.csv",
        "direction,value",
        probe.values.iter().enumerate().map(|(i, v)| format!("{i},{v}")),
    )?;
    let residual_artifact = report::write_csv(
        out,
        "residuals.csv",
        "direction,radius,residual",
        uniqueness.cells.iter().map(|cell| {
            let residual =
                cell.residual.map_or_else(String::new, |r| format!("{r}"));
            format!("{},{},{residual}", cell.direction, cell.radius)
        }),
    )?;

    let pass = probe.min_value > section.min_mass
        && uniqueness.skipped == 0
        && uniqueness.min_ratio >= band_lo
        && uniqueness.max_ratio <= band_hi;
    let status = if pass { Status::Pass } else { Status::ConditionFailed };
    let result = json!({
        "min-value": probe.min_value,
        "argmin": probe.argmin,
        "doubling-ratios": [uniqueness.min_ratio, uniqueness.max_ratio],
        "envelope-slope": uniqueness.envelope_slope,
        "skipped": uniqueness.skipped,
    });
    let summary = format!("min derivative mass {:.3e}", probe.min_value);
    Ok((status, result, vec![values_artifact, residual_artifact], summary))
}

fn fit_command(config: &mut ExperimentConfig, out: &Path) -> Result<CommandOutput, CliError> {
    let section = config.fit.clone();
    let model = config.model.as_ref().map(|spec| spec.build()).transpose()?;
    let (fields_by_z, measure, eigen_box) = match (&model, &config.dataset) {
        (Some(model), _) => {
            (exact_fields(model)?, model.measure().clone(), model.eigen_box())
        }
        (None, Some(path)) => {
            let mut reader = BufReader::new(File::open(path)?);
            let sample = ObservedSample::read_csv(&mut reader)?;
            let treatments = sample.treatments.iter().copied().max().map_or(1, |m| m + 1);
            let z_count = sample.instruments.iter().copied().max().map_or(1, |m| m + 1);
            let fields = (0..z_count)
                .map(|z| {
                    (0..treatments)
                        .map(|d| Ok(estimate_density(&sample, d, z)?))
                        .collect::<Result<Vec<_>, CliError>>()
                })
                .collect::<Result<Vec<_>, CliError>>()?;
            (fields, ReferenceMeasure::uniform_on_cube(sample.dim())?, DEFAULT_EIGEN_BOX)
        }
        (None, None) => {
            return Err(CliError::Config("fit needs a `model` or a `dataset` entry".into()))
        }
    };
    let treatments = fields_by_z.first().map_or(0, Vec::len);
    let dim = measure.domain().dim();
    let family = section.family.to_family(treatments, dim);
    let initial = match (&section.initial, &model) {
        (Some(values), _) => {
            if values.len() != family.param_count() {
                return Err(CliError::Config(format!(
                    "initial has {} entries but the family takes {}",
                    values.len(),
                    family.param_count()
                )));
            }
            DVector::from_column_slice(values)
        }
        (None, Some(model)) => family.pack(model.maps())?,
        (None, None) => {
            return Err(CliError::Config(
                "fit from a dataset needs explicit `initial` parameters".into(),
            ))
        }
    };
    let truth = model.as_ref().map(|m| m.maps().to_vec());
    let grid = QuadratureGrid::build(*measure.domain(), section.grid_resolution)?;
    let problem = FitProblem {
        fields_by_z: &fields_by_z,
        measure,
        grid,
        family,
        eigen_box,
        initial,
        truth: truth.as_deref(),
    };
    let options = FitOptions {
        residual_tol: section.residual_tol,
        max_iters: section.max_iters,
        ..FitOptions::default()
    };
    let outcome = fit(&problem, &options)?;
    let mut buffer = Vec::new();
    outcome.write_iteration_csv(&mut buffer)?;
    std::fs::write(out.join("iterations.csv"), &buffer)?;

    let status = if outcome.converged { Status::Pass } else { Status::ConditionFailed };
    let result = json!({
        "params": outcome.params,
        "residuals": outcome.residuals,
        "objective": outcome.objective,
        "map-distance": outcome.map_distance,
        "converged": outcome.converged,
        "iterations": outcome.iterations.len(),
    });
    let summary = format!("objective {:.3e}", outcome.objective);
    Ok((status, result, vec!["iterations.csv".into()], summary))
}

fn recover(config: &mut ExperimentConfig, out: &Path) -> Result<CommandOutput, CliError> {
    let model = require_model(config)?;
    let section = config.recover.clone();
    let family =
        section.family.to_family(model.treatments(), model.measure().domain().dim());
    let options = RecoveryOptions {
        exact: section.exact,
        sample_size: config.n,
        seed: config.seed,
        perturbation: section.perturbation,
        grid_resolution: section.grid_resolution,
        negative_control: section.negative_control,
        fit: FitOptions::default(),
    };
    let outcome = recovery_experiment(&model, family, &options)?;
    let artifact = report::write_csv(
        out,
        "residuals.csv",
        "z,residual",
        outcome.residuals.iter().enumerate().map(|(z, r)| format!("{z},{r}")),
    )?;
    let status = if section.negative_control {
        if outcome.expected_failure {
            Status::ExpectedFailure
        } else {
            Status::ConditionFailed
        }
    } else if outcome.converged && outcome.map_distance <= section.tolerance {
        Status::Pass
    } else {
        Status::ConditionFailed
    };
    let summary = format!("map distance {:.2e}", outcome.map_distance);
    Ok((status, serde_json::to_value(&outcome)?, vec![artifact], summary))
}

fn demo_rank_violation(
    config: &mut ExperimentConfig,
    out: &Path,
) -> Result<CommandOutput, CliError> {
    let model = require_model(config)?;
    let section = config.demo_rank_violation.clone();
    let outcome = rank_violation_demo(&model, section.component, config.n, config.seed)?;
    let artifact = report::write_csv(
        out,
        "ks.csv",
        "cell,ks,critical",
        outcome
            .cell_ks
            .iter()
            .zip(&outcome.cell_ks_critical)
            .enumerate()
            .map(|(cell, (ks, critical))| format!("{cell},{ks},{critical}")),
    )?;
    let status = match section.expect {
        None => Status::Pass,
        Some(Expectation::Violated) if outcome.violated => Status::Pass,
        Some(Expectation::Clean) if !outcome.violated => Status::Pass,
        Some(_) => Status::ConditionFailed,
    };
    let summary = format!("max KS ratio {:.2}", outcome.max_ks_ratio);
    Ok((status, serde_json::to_value(&outcome)?, vec![artifact], summary))
}
