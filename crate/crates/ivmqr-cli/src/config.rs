//! Versioned JSON experiment configs with strict key checking.
//!
//! Unknown keys are rejected so a typo in a band bound or a seed cannot
//! silently fall back to a default; parse failures surface the serde position
//! (line and column) of the offending entry.

use ivmqr::domain::ProbeSet;
use ivmqr::model::{example1_model, example2_model, rank_violation_pair, StructuralModel};
use ivmqr::solver::ParamFamily;
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use std::path::Path;

use crate::commands::CliError;

/// Schema tag every config file must carry.
pub const SCHEMA: &str = "ivmqr-config/1";

/// One experiment: a data source, global knobs, and per-subcommand sections.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, rename_all = "kebab-case")]
pub struct ExperimentConfig {
    /// Must equal [`SCHEMA`].
    pub schema: String,
    /// Synthetic model; most subcommands require it.
    #[serde(default)]
    pub model: Option<ModelConfig>,
    /// Observed-sample CSV path, the alternative input for `fit`.
    #[serde(default)]
    pub dataset: Option<String>,
    /// Sample size for simulation-backed subcommands.
    #[serde(default = "defaults::sample_size")]
    pub n: usize,
    #[serde(default = "defaults::seed")]
    pub seed: u64,
    /// Output directory; `--out` and IVMQR_OUT override it.
    #[serde(default)]
    pub out: Option<String>,
    /// Worker-thread cap; unset delegates to the runtime default.
    #[serde(default)]
    pub threads: Option<usize>,
    #[serde(default)]
    pub simulate: SimulateSection,
    #[serde(default)]
    pub verify_implication: VerifySection,
    #[serde(default)]
    pub check_identification: IdentificationSection,
    #[serde(default)]
    pub linearize: LinearizeSection,
    #[serde(default)]
    pub probe_rank: ProbeSection,
    #[serde(default)]
    pub fit: FitSection,
    #[serde(default)]
    pub recover: RecoverSection,
    #[serde(default)]
    pub demo_rank_violation: RankDemoSection,
}

/// Named structural designs; matrix entries are row lists.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, rename_all = "kebab-case")]
pub enum ModelConfig {
    /// Affine demand design with an instrument-shifted treatment intercept.
    Example1 {
        #[serde(default = "defaults::identity2")]
        a0: Vec<Vec<f64>>,
        #[serde(default = "defaults::stretch2")]
        a1: Vec<Vec<f64>>,
        #[serde(default = "defaults::zeros2")]
        b0: Vec<f64>,
        #[serde(default = "defaults::zeros2")]
        b1: Vec<f64>,
        #[serde(default = "defaults::compliance")]
        compliance: f64,
    },
    /// Discrete-choice share design driven by two mean-utility vectors.
    Example2 {
        #[serde(default = "defaults::theta0")]
        theta0: Vec<f64>,
        #[serde(default = "defaults::theta1")]
        theta1: Vec<f64>,
        #[serde(default = "defaults::smoothed")]
        smoothed: bool,
        #[serde(default = "defaults::compliance")]
        compliance: f64,
    },
    /// Stock scalar design whose second component mixes ranks across cells.
    RankViolating,
    /// Its rank-similar companion with identical marginal maps.
    RankCompliant,
}

impl ModelConfig {
    pub fn build(&self) -> Result<StructuralModel, CliError> {
        match self {
            ModelConfig::Example1 { a0, a1, b0, b1, compliance } => Ok(example1_model(
                &matrix(a0)?,
                &matrix(a1)?,
                &vector(b0),
                &vector(b1),
                *compliance,
            )?),
            ModelConfig::Example2 { theta0, theta1, smoothed, compliance } => {
                Ok(example2_model(&vector(theta0), &vector(theta1), *smoothed, *compliance)?)
            }
            ModelConfig::RankViolating => Ok(rank_violation_pair()?.0),
            ModelConfig::RankCompliant => Ok(rank_violation_pair()?.1),
        }
    }
}

fn matrix(rows: &[Vec<f64>]) -> Result<DMatrix<f64>, CliError> {
    let r = rows.len();
    let c = rows.first().map_or(0, Vec::len);
    if r == 0 || c == 0 || rows.iter().any(|row| row.len() != c) {
        return Err(CliError::Config(
            "matrix entries must be non-empty rectangular row lists".into(),
        ));
    }
    Ok(DMatrix::from_fn(r, c, |i, j| rows[i][j]))
}

fn vector(values: &[f64]) -> DVector<f64> {
    DVector::from_column_slice(values)
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, rename_all = "kebab-case")]
pub struct SimulateSection {
    /// Also write the latent draws alongside the observables.
    #[serde(default)]
    pub keep_latent: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, rename_all = "kebab-case")]
pub struct VerifySection {
    /// Width of the binomial acceptance band, in standard deviations.
    #[serde(default = "defaults::sigmas")]
    pub sigmas: f64,
    /// Probe family; `null` resolves to the stock 8 boxes + 4 half-space cuts.
    #[serde(default)]
    pub sets: Option<Vec<ProbeSet>>,
}

impl Default for VerifySection {
    fn default() -> Self {
        Self { sigmas: defaults::sigmas(), sets: None }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, rename_all = "kebab-case")]
pub struct IdentificationSection {
    /// Eigenvalue band; `null` bounds resolve to the model's certified box.
    #[serde(default)]
    pub lambda_lo: Option<f64>,
    #[serde(default)]
    pub lambda_hi: Option<f64>,
    /// Grid resolution of the minimization and of the emitted margin curve.
    #[serde(default = "defaults::lambda_resolution")]
    pub resolution: usize,
}

impl Default for IdentificationSection {
    fn default() -> Self {
        Self { lambda_lo: None, lambda_hi: None, resolution: defaults::lambda_resolution() }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, rename_all = "kebab-case")]
pub struct LinearizeSection {
    #[serde(default = "defaults::grid_twelve")]
    pub grid_resolution: usize,
    #[serde(default = "defaults::directions_twenty")]
    pub directions: usize,
    #[serde(default = "defaults::tangent_seed")]
    pub tangent_seed: u64,
    /// Perturbation radii for the secant-vs-derivative gap series.
    #[serde(default = "defaults::gap_radii")]
    pub radii: Vec<f64>,
    /// Finite-difference steps for the divergence-residual series.
    #[serde(default = "defaults::piola_steps")]
    pub piola_steps: Vec<f64>,
}

impl Default for LinearizeSection {
    fn default() -> Self {
        Self {
            grid_resolution: defaults::grid_twelve(),
            directions: defaults::directions_twenty(),
            tangent_seed: defaults::tangent_seed(),
            radii: defaults::gap_radii(),
            piola_steps: defaults::piola_steps(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, rename_all = "kebab-case")]
pub struct ProbeSection {
    #[serde(default = "defaults::grid_twelve")]
    pub grid_resolution: usize,
    /// Panel size for the derivative-mass probe.
    #[serde(default = "defaults::directions_two_hundred")]
    pub directions: usize,
    #[serde(default = "defaults::probe_seed")]
    pub tangent_seed: u64,
    /// Support-preserving directions for the residual-growth probe.
    #[serde(default = "defaults::uniqueness_directions")]
    pub uniqueness_directions: usize,
    #[serde(default = "defaults::uniqueness_seed")]
    pub uniqueness_seed: u64,
    /// Doubling radii for the residual-growth probe.
    #[serde(default = "defaults::probe_radii")]
    pub radii: Vec<f64>,
    /// Derivative mass below this level counts as rank failure.
    #[serde(default = "defaults::min_mass")]
    pub min_mass: f64,
    /// Admissible band for residual doubling ratios.
    #[serde(default = "defaults::doubling_band")]
    pub doubling_band: (f64, f64),
}

impl Default for ProbeSection {
    fn default() -> Self {
        Self {
            grid_resolution: defaults::grid_twelve(),
            directions: defaults::directions_two_hundred(),
            tangent_seed: defaults::probe_seed(),
            uniqueness_directions: defaults::uniqueness_directions(),
            uniqueness_seed: defaults::uniqueness_seed(),
            radii: defaults::probe_radii(),
            min_mass: defaults::min_mass(),
            doubling_band: defaults::doubling_band(),
        }
    }
}

/// Parameter families the discretized solver can search over.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, rename_all = "kebab-case")]
pub enum FamilyConfig {
    Affine,
    MeanUtility,
    /// Affine maps with one softplus ridge along the given axis.
    AffineRidge { axis: usize },
}

impl Default for FamilyConfig {
    fn default() -> Self {
        FamilyConfig::Affine
    }
}

impl FamilyConfig {
    pub fn to_family(&self, treatments: usize, dim: usize) -> ParamFamily {
        match self {
            FamilyConfig::Affine => ParamFamily::Affine { treatments, dim },
            FamilyConfig::MeanUtility => ParamFamily::MeanUtility { treatments, dim },
            FamilyConfig::AffineRidge { axis } => {
                ParamFamily::AffineRidge { treatments, dim, axis: *axis }
            }
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, rename_all = "kebab-case")]
pub struct FitSection {
    #[serde(default)]
    pub family: FamilyConfig,
    /// Start parameters; `null` packs the configured model's own maps.
    #[serde(default)]
    pub initial: Option<Vec<f64>>,
    #[serde(default = "defaults::grid_twenty")]
    pub grid_resolution: usize,
    #[serde(default = "defaults::residual_tol")]
    pub residual_tol: f64,
    #[serde(default = "defaults::max_iters")]
    pub max_iters: usize,
}

impl Default for FitSection {
    fn default() -> Self {
        Self {
            family: FamilyConfig::default(),
            initial: None,
            grid_resolution: defaults::grid_twenty(),
            residual_tol: defaults::residual_tol(),
            max_iters: defaults::max_iters(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, rename_all = "kebab-case")]
pub struct RecoverSection {
    #[serde(default)]
    pub family: FamilyConfig,
    /// Use exact model densities instead of kernel estimates.
    #[serde(default = "defaults::yes")]
    pub exact: bool,
    #[serde(default = "defaults::grid_forty_eight")]
    pub grid_resolution: usize,
    /// Scale of the random start perturbation.
    #[serde(default = "defaults::perturbation")]
    pub perturbation: f64,
    /// Perturb along a ridge of a non-identified design and expect the fit to
    /// converge without recovering the truth.
    #[serde(default)]
    pub negative_control: bool,
    /// Map-recovery tolerance for the positive experiment.
    #[serde(default = "defaults::recovery_tol")]
    pub tolerance: f64,
}

impl Default for RecoverSection {
    fn default() -> Self {
        Self {
            family: FamilyConfig::default(),
            exact: defaults::yes(),
            grid_resolution: defaults::grid_forty_eight(),
            perturbation: defaults::perturbation(),
            negative_control: false,
            tolerance: defaults::recovery_tol(),
        }
    }
}

/// Expected verdict of the rank-similarity demo, if any.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Expectation {
    Violated,
    Clean,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, rename_all = "kebab-case")]
pub struct RankDemoSection {
    /// Outcome component whose ranks are compared.
    #[serde(default)]
    pub component: usize,
    /// When set, a mismatching verdict fails the run with exit 2.
    #[serde(default)]
    pub expect: Option<Expectation>,
}

mod defaults {
    pub fn sample_size() -> usize {
        100_000
    }
    pub fn seed() -> u64 {
        0
    }
    pub fn sigmas() -> f64 {
        3.0
    }
    pub fn lambda_resolution() -> usize {
        50
    }
    pub fn grid_twelve() -> usize {
        12
    }
    pub fn grid_twenty() -> usize {
        20
    }
    pub fn grid_forty_eight() -> usize {
        48
    }
    pub fn directions_twenty() -> usize {
        20
    }
    pub fn directions_two_hundred() -> usize {
        200
    }
    pub fn tangent_seed() -> u64 {
        7
    }
    pub fn probe_seed() -> u64 {
        13
    }
    pub fn uniqueness_directions() -> usize {
        5
    }
    pub fn uniqueness_seed() -> u64 {
        17
    }
    pub fn gap_radii() -> Vec<f64> {
        vec![1e-2, 5e-3, 2e-3, 1e-3]
    }
    pub fn piola_steps() -> Vec<f64> {
        vec![1e-2, 5e-3]
    }
    pub fn probe_radii() -> Vec<f64> {
        vec![1e-3, 2e-3, 4e-3]
    }
    pub fn min_mass() -> f64 {
        1e-8
    }
    pub fn doubling_band() -> (f64, f64) {
        (1.8, 2.2)
    }
    pub fn residual_tol() -> f64 {
        1e-7
    }
    pub fn max_iters() -> usize {
        400
    }
    pub fn perturbation() -> f64 {
        0.05
    }
    pub fn recovery_tol() -> f64 {
        1e-3
    }
    pub fn yes() -> bool {
        true
    }
    pub fn compliance() -> f64 {
        0.9
    }
    pub fn smoothed() -> bool {
        true
    }
    pub fn identity2() -> Vec<Vec<f64>> {
        vec![vec![1.0, 0.0], vec![0.0, 1.0]]
    }
    pub fn stretch2() -> Vec<Vec<f64>> {
        vec![vec![1.0, 0.0], vec![0.0, 2.0]]
    }
    pub fn zeros2() -> Vec<f64> {
        vec![0.0, 0.0]
    }
    pub fn theta0() -> Vec<f64> {
        vec![0.4, -0.2]
    }
    pub fn theta1() -> Vec<f64> {
        vec![0.1, 0.3]
    }
}

/// Parses and validates a config file, reporting the serde position (line and
/// column) of any malformed or unknown entry.
pub fn load(path: &Path) -> Result<ExperimentConfig, CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|err| CliError::Config(format!("{}: {err}", path.display())))?;
    let config: ExperimentConfig = serde_json::from_str(&text)
        .map_err(|err| CliError::Config(format!("{}: {err}", path.display())))?;
    if config.schema != SCHEMA {
        return Err(CliError::Config(format!(
            "{}: schema {:?} is not supported (expected {SCHEMA:?})",
            path.display(),
            config.schema
        )));
    }
    if config.n == 0 {
        return Err(CliError::Config(format!("{}: n must be positive", path.display())));
    }
    Ok(config)
}
