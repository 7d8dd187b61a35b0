//! Fitting map profiles to observed densities and probing local uniqueness.
//!
//! The fit minimizes the squared total-variation mismatch between the
//! pushforward of a parameterized profile and the reference measure, summed
//! over instrument values, with a logarithmic barrier keeping every Jacobian
//! spectrum inside the admissible eigenvalue box.  Gradients come from
//! central finite differences in parameter space, so any family that can
//! build maps from a parameter vector plugs in.

use crate::densities::DensityField;
use crate::domain::{QuadratureGrid, ReferenceDomain, ReferenceMeasure};
use crate::error::{Error, Result};
use crate::linearization::{
    perturbed_profile, phi, reference_on_grid, ridge_cap_combination, GradientCombination,
    SignedGridMeasure, TangentDirection,
};
use crate::model::StructuralModel;
use crate::potential::ConvexPotential;
use crate::transport::{check_class_membership, MapLike, QuantileMap};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::io::Write;

/// Sigmoid temperature of the ridge cap used by the sieve family.
pub const RIDGE_TEMPERATURE: f64 = 0.05;

/// Smallest central finite-difference step for parameter gradients; the
/// solver widens the step to the current poll mesh while that is coarser.
pub const PARAM_FD_STEP: f64 = 1e-5;

/// Weight of the logarithmic eigenvalue barrier.
pub const BARRIER_WEIGHT: f64 = 1e-10;

/// Parameter families for candidate map profiles.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum ParamFamily {
    /// Affine maps: a symmetric matrix (packed lower triangle) plus an
    /// intercept per treatment.
    Affine { treatments: usize, dim: usize },
    /// Smoothed-argmax share maps indexed by mean utilities per treatment.
    MeanUtility { treatments: usize, dim: usize },
    /// Affine maps plus a signed single-axis ridge cap per treatment.
    ///
    /// The cap enriches the affine family along a direction that a
    /// degenerate instrument cannot distinguish, which makes the family the
    /// reference sieve for non-identification experiments.
    AffineRidge { treatments: usize, dim: usize, axis: usize },
}

impl ParamFamily {
    pub fn treatments(&self) -> usize {
        match self {
            Self::Affine { treatments, .. }
            | Self::MeanUtility { treatments, .. }
            | Self::AffineRidge { treatments, .. } => *treatments,
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            Self::Affine { dim, .. }
            | Self::MeanUtility { dim, .. }
            | Self::AffineRidge { dim, .. } => *dim,
        }
    }

    /// Number of free parameters.
    pub fn param_count(&self) -> usize {
        let m = self.treatments();
        let p = self.dim();
        let affine = m * (p * (p + 1) / 2 + p);
        match self {
            Self::Affine { .. } => affine,
            Self::MeanUtility { .. } => m * p,
            Self::AffineRidge { .. } => affine + m,
        }
    }

    /// Contiguous parameter ranges that move one treatment's map at a time.
    pub fn blocks(&self) -> Vec<std::ops::Range<usize>> {
        let m = self.treatments();
        let p = self.dim();
        let per_map = match self {
            Self::Affine { .. } | Self::AffineRidge { .. } => p * (p + 1) / 2 + p,
            Self::MeanUtility { .. } => p,
        };
        let mut blocks: Vec<_> = (0..m).map(|d| d * per_map..(d + 1) * per_map).collect();
        if matches!(self, Self::AffineRidge { .. }) {
            blocks.push(m * per_map..m * per_map + m);
        }
        blocks
    }

    /// Builds the map profile encoded by `params`.
    pub fn build(&self, params: &DVector<f64>, domain: ReferenceDomain) -> Result<Vec<ProfileMap>> {
        if params.len() != self.param_count() {
            return Err(Error::DimensionMismatch {
                expected: self.param_count(),
                got: params.len(),
            });
        }
        if domain.dim() != self.dim() {
            return Err(Error::DimensionMismatch { expected: self.dim(), got: domain.dim() });
        }
        let m = self.treatments();
        let p = self.dim();
        let tri = p * (p + 1) / 2;
        let affine_map = |chunk: &[f64]| -> Result<QuantileMap> {
            let mut matrix = DMatrix::zeros(p, p);
            let mut k = 0;
            for i in 0..p {
                for j in 0..=i {
                    matrix[(i, j)] = chunk[k];
                    matrix[(j, i)] = chunk[k];
                    k += 1;
                }
            }
            let shift = DVector::from_column_slice(&chunk[tri..tri + p]);
            QuantileMap::new(ConvexPotential::quadratic(matrix, shift)?, domain)
        };
        match self {
            Self::Affine { .. } => (0..m)
                .map(|d| {
                    let chunk = &params.as_slice()[d * (tri + p)..(d + 1) * (tri + p)];
                    Ok(ProfileMap::plain(affine_map(chunk)?))
                })
                .collect(),
            Self::MeanUtility { .. } => (0..m)
                .map(|d| {
                    let utils = &params.as_slice()[d * p..(d + 1) * p];
                    let mut slopes = vec![DVector::zeros(p)];
                    let mut offsets = vec![0.0];
                    for (i, util) in utils.iter().enumerate() {
                        let mut e = DVector::zeros(p);
                        e[i] = 1.0;
                        slopes.push(e);
                        offsets.push(*util);
                    }
                    let potential = ConvexPotential::smooth_max(slopes, offsets, 1.0, 0.0)?;
                    Ok(ProfileMap::plain(QuantileMap::new(potential, domain)?))
                })
                .collect(),
            Self::AffineRidge { axis, .. } => (0..m)
                .map(|d| {
                    let chunk = &params.as_slice()[d * (tri + p)..(d + 1) * (tri + p)];
                    let coefficient = params[m * (tri + p) + d];
                    let offset = ridge_cap_combination(p, *axis, RIDGE_TEMPERATURE, coefficient)?;
                    Ok(ProfileMap::ridged(affine_map(chunk)?, offset))
                })
                .collect(),
        }
    }

    /// Extracts the parameter vector that reproduces the given maps.
    ///
    /// Affine packing reads the Jacobian and value at the origin, so it works
    /// for any affine profile; mean-utility packing requires the canonical
    /// smoothed-argmax potential layout.
    pub fn pack(&self, maps: &[QuantileMap]) -> Result<DVector<f64>> {
        if maps.len() != self.treatments() {
            return Err(Error::DimensionMismatch {
                expected: self.treatments(),
                got: maps.len(),
            });
        }
        let p = self.dim();
        let tri = p * (p + 1) / 2;
        let origin = DVector::zeros(p);
        let mut params = Vec::with_capacity(self.param_count());
        match self {
            Self::Affine { .. } | Self::AffineRidge { .. } => {
                for map in maps {
                    let matrix = map.jacobian_unchecked(&origin);
                    let shift = map.eval_unchecked(&origin);
                    let mut tri_vals = Vec::with_capacity(tri);
                    for i in 0..p {
                        for j in 0..=i {
                            tri_vals.push(matrix[(i, j)]);
                        }
                    }
                    params.extend(tri_vals);
                    params.extend(shift.iter());
                }
                if matches!(self, Self::AffineRidge { .. }) {
                    params.extend(std::iter::repeat(0.0).take(maps.len()));
                }
            }
            Self::MeanUtility { .. } => {
                for map in maps {
                    let potential = map.potential();
                    let ConvexPotential::SmoothMax(s) = potential else {
                        return Err(Error::InvalidParameter(
                            "mean-utility packing expects a smoothed-argmax potential".into(),
                        ));
                    };
                    if s.pieces() != p + 1 || s.slopes()[0].norm() != 0.0 {
                        return Err(Error::InvalidParameter(
                            "potential does not have the canonical outside-option layout".into(),
                        ));
                    }
                    params.extend(s.offsets()[1..].iter());
                }
            }
        }
        Ok(DVector::from_vec(params))
    }
}

/// A family member: a base quantile map plus an optional gradient offset.
#[derive(Debug, Clone)]
pub struct ProfileMap {
    base: QuantileMap,
    offset: Option<GradientCombination>,
}

impl ProfileMap {
    pub fn plain(base: QuantileMap) -> Self {
        Self { base, offset: None }
    }

    pub fn ridged(base: QuantileMap, offset: GradientCombination) -> Self {
        Self { base, offset: Some(offset) }
    }

    pub fn base(&self) -> &QuantileMap {
        &self.base
    }
}

impl MapLike for ProfileMap {
    fn dim(&self) -> usize {
        self.base.domain().dim()
    }

    fn eval_unchecked(&self, u: &DVector<f64>) -> DVector<f64> {
        let mut y = self.base.eval_unchecked(u);
        if let Some(offset) = &self.offset {
            y += offset.eval(u);
        }
        y
    }

    fn jacobian_unchecked(&self, u: &DVector<f64>) -> DMatrix<f64> {
        let mut jac = self.base.jacobian_unchecked(u);
        if let Some(offset) = &self.offset {
            jac += offset.jacobian(u);
        }
        jac
    }
}

/// Sup distance between two map profiles over the grid nodes.
pub fn map_distance<A: MapLike, B: MapLike>(
    a: &[A],
    b: &[B],
    grid: &QuadratureGrid,
) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::DimensionMismatch { expected: a.len(), got: b.len() });
    }
    let mut worst = 0.0_f64;
    for (ma, mb) in a.iter().zip(b) {
        for u in grid.nodes() {
            worst = worst.max((ma.eval_unchecked(u) - mb.eval_unchecked(u)).norm());
        }
    }
    Ok(worst)
}

/// A density-matching problem over one parameter family.
pub struct FitProblem<'a> {
    /// Conditional densities indexed `[z][d]`.
    pub fields_by_z: &'a [Vec<DensityField>],
    pub measure: ReferenceMeasure,
    pub grid: QuadratureGrid,
    pub family: ParamFamily,
    pub eigen_box: (f64, f64),
    pub initial: DVector<f64>,
    /// True maps, when known, for distance reporting.
    pub truth: Option<&'a [QuantileMap]>,
}

/// Tuning knobs for the descent loop.
#[derive(Debug, Clone)]
pub struct FitOptions {
    pub max_iters: usize,
    /// Stop once the summed per-z residual falls below this.
    pub residual_tol: f64,
    pub max_backtracks: usize,
    /// Starting step of the coordinate poll used when gradients stall.
    pub initial_mesh: f64,
    /// Poll step below which the search stops refining.
    pub min_mesh: f64,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self {
            max_iters: 400,
            residual_tol: 1e-7,
            max_backtracks: 45,
            initial_mesh: 0.02,
            min_mesh: 1e-7,
        }
    }
}

/// One line of the optimizer trace.
#[derive(Debug, Clone, Serialize)]
pub struct IterationRecord {
    pub iteration: usize,
    pub objective: f64,
    pub residuals: Vec<f64>,
    /// FNV-1a hash of the parameter bytes at this iterate.
    pub param_hash: u64,
}

/// Outcome of a fit.
#[derive(Debug, Clone, Serialize)]
pub struct FitResult {
    pub params: Vec<f64>,
    /// Per-instrument total-variation residuals at the final iterate.
    pub residuals: Vec<f64>,
    pub objective: f64,
    /// Sup distance to the true profile, when the problem carried one.
    pub map_distance: Option<f64>,
    pub iterations: Vec<IterationRecord>,
    pub converged: bool,
}

impl FitResult {
    /// Writes the iteration log as CSV.
    pub fn write_iteration_csv(&self, out: &mut impl Write) -> Result<()> {
        let z_count = self.residuals.len();
        let header: Vec<String> = (1..=z_count).map(|z| format!("residual_z{z}")).collect();
        writeln!(out, "iteration,objective,{},param_hash", header.join(","))?;
        for record in &self.iterations {
            let residuals: Vec<String> =
                record.residuals.iter().map(|r| format!("{r}")).collect();
            writeln!(
                out,
                "{},{},{},{:016x}",
                record.iteration,
                record.objective,
                residuals.join(","),
                record.param_hash
            )?;
        }
        Ok(())
    }
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut hash = 0xcbf29ce484222325_u64;
    for &b in bytes {
        hash ^= b as u64;
        hash = hash.wrapping_mul(0x100000001b3);
    }
    hash
}

fn param_hash(params: &DVector<f64>) -> u64 {
    let mut bytes = Vec::with_capacity(params.len() * 8);
    for x in params.iter() {
        bytes.extend_from_slice(&x.to_le_bytes());
    }
    fnv1a(&bytes)
}

/// Smallest and largest eigenvalue of a symmetric Jacobian.
fn eigen_bounds(jac: &DMatrix<f64>) -> (f64, f64) {
    match jac.nrows() {
        1 => (jac[(0, 0)], jac[(0, 0)]),
        2 => {
            let mid = 0.5 * (jac[(0, 0)] + jac[(1, 1)]);
            let half = 0.5 * (jac[(0, 0)] - jac[(1, 1)]);
            let disc = (half * half + jac[(0, 1)] * jac[(0, 1)]).sqrt();
            (mid - disc, mid + disc)
        }
        _ => {
            let eigen = jac.clone().symmetric_eigen().eigenvalues;
            let mut min = f64::INFINITY;
            let mut max = f64::NEG_INFINITY;
            for e in eigen.iter() {
                min = min.min(*e);
                max = max.max(*e);
            }
            (min, max)
        }
    }
}

/// Objective pieces at one parameter vector, or `None` when the profile is
/// unbuildable or its spectrum leaves the barrier domain.
fn evaluate(
    problem: &FitProblem,
    reference: &SignedGridMeasure,
    params: &DVector<f64>,
) -> Option<(f64, Vec<f64>)> {
    let maps = problem.family.build(params, *problem.grid.domain()).ok()?;
    let (lo, hi) = problem.eigen_box;
    let mut barrier = 0.0;
    // Affine profiles have a constant Jacobian, so one spectrum check covers
    // every node.
    let constant_jacobian = matches!(problem.family, ParamFamily::Affine { .. });
    for map in &maps {
        let nodes: &[DVector<f64>] = if constant_jacobian {
            std::slice::from_ref(&problem.grid.nodes()[0])
        } else {
            problem.grid.nodes()
        };
        let multiplicity =
            if constant_jacobian { problem.grid.len() as f64 } else { 1.0 };
        for u in nodes {
            let (min, max) = eigen_bounds(&map.jacobian_unchecked(u));
            if min <= lo || max >= hi {
                return None;
            }
            barrier -= multiplicity * BARRIER_WEIGHT * ((min - lo).ln() + (hi - max).ln());
        }
    }
    let mut objective = barrier;
    let mut residuals = Vec::with_capacity(problem.fields_by_z.len());
    for fields in problem.fields_by_z {
        let image = phi(&maps, fields, &problem.grid).ok()?;
        let residual = image.sub(reference).ok()?.tv_norm();
        objective += residual * residual;
        residuals.push(residual);
    }
    Some((objective, residuals))
}

/// Minimizes the squared total-variation mismatch by derivative-informed
/// descent with a coordinate-poll fallback.
///
/// The smooth part of the objective (determinant mismatch, barrier) yields to
/// backtracking steps along central finite-difference gradients.  The
/// support-mismatch part is piecewise constant at the grid scale, so once
/// gradients stall the solver polls `params ± mesh * e_k` and shrinks the
/// mesh on failed polls, which walks down the staircase that finite
/// differences cannot see.
pub fn fit(problem: &FitProblem, options: &FitOptions) -> Result<FitResult> {
    if problem.fields_by_z.is_empty() {
        return Err(Error::EmptyInput("fit needs at least one instrument value".into()));
    }
    let (lo, hi) = problem.eigen_box;
    if !(lo > 0.0 && hi > lo) {
        return Err(Error::InvalidParameter("eigenvalue box must satisfy 0 < lo < hi".into()));
    }
    let initial_maps = problem.family.build(&problem.initial, *problem.grid.domain())?;
    for map in &initial_maps {
        let report = check_class_membership(map, &problem.grid, lo, hi)?;
        if !report.pass {
            return Err(Error::InvalidParameter(format!(
                "initial maps are outside the admissible class (spectrum [{:.4}, {:.4}] vs box ({lo}, {hi}))",
                report.min_eigen, report.max_eigen
            )));
        }
    }
    let reference = reference_on_grid(&problem.measure, &problem.grid);
    let mut params = problem.initial.clone();
    let (mut objective, mut residuals) = evaluate(problem, &reference, &params)
        .ok_or_else(|| Error::NoConvergence("initial objective is not finite".into()))?;
    let mut iterations = vec![IterationRecord {
        iteration: 0,
        objective,
        residuals: residuals.clone(),
        param_hash: param_hash(&params),
    }];
    let mut converged = residuals.iter().sum::<f64>() < options.residual_tol;
    let mut step = 1.0_f64;
    let mut mesh = options.initial_mesh;
    // After a gradient stall, gradients are retried with a short backtrack
    // budget so a reopened smooth valley is noticed without paying the full
    // line search on every staircase step.
    let mut gradient_stalled = false;
    let n = params.len();
    let blocks = problem.family.blocks();
    for iteration in 1..=options.max_iters {
        if converged {
            break;
        }
        let mut advanced = false;
        // Differencing at the poll scale (implicit filtering) averages over
        // the support-mismatch staircase, so the gradient keeps pointing
        // down valleys that are flat at the nominal step.
        let fd_step = PARAM_FD_STEP.max(0.5 * mesh);
        let gradient_entries: Vec<f64> = (0..n)
            .into_par_iter()
            .map(|k| {
                let mut up = params.clone();
                up[k] += fd_step;
                let mut down = params.clone();
                down[k] -= fd_step;
                match (evaluate(problem, &reference, &up), evaluate(problem, &reference, &down)) {
                    (Some((fu, _)), Some((fd, _))) => (fu - fd) / (2.0 * fd_step),
                    // One-sided fallback keeps descent alive at the barrier edge.
                    (Some((fu, _)), None) => (fu - objective) / fd_step,
                    (None, Some((fd, _))) => (objective - fd) / fd_step,
                    (None, None) => 0.0,
                }
            })
            .collect();
        let gradient = DVector::from_vec(gradient_entries);
        let gnorm = gradient.norm();
        if gnorm >= 1e-14 {
            let budget = if gradient_stalled { 12 } else { options.max_backtracks };
            // After a stall the remembered step is tied to the shrunken mesh;
            // restart the search well above the current feature scale.
            let mut trial = (step * 2.0).max(mesh * 16.0);
            for _ in 0..budget {
                let candidate = &params - &gradient * trial;
                if let Some((obj_new, res_new)) = evaluate(problem, &reference, &candidate) {
                    if obj_new < objective - 1e-15 {
                        params = candidate;
                        objective = obj_new;
                        residuals = res_new;
                        step = trial;
                        advanced = true;
                        gradient_stalled = false;
                        break;
                    }
                }
                trial *= 0.5;
            }
        }
        if !advanced {
            gradient_stalled = true;
            step = mesh;
            // Axis polls alone stagnate on correlated valleys, so each wave
            // also polls deterministic random directions that move every
            // coordinate at once.
            let mut rng = ChaCha8Rng::seed_from_u64(
                0x706f_6c6c ^ (iteration as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15),
            );
            // Random directions confined to one parameter block reach the
            // correlated moves (det-compensating shears plus shifts) inside a
            // single map without perturbing maps that already converged;
            // whole-profile directions cover the rest.
            let mut random_dirs: Vec<DVector<f64>> = Vec::new();
            // Per-block negative gradients give the poll the correlated
            // within-map move that axis steps cannot express.
            for block in &blocks {
                let mut v = DVector::zeros(n);
                for i in block.clone() {
                    v[i] = -gradient[i];
                }
                let max = v.amax();
                if max > 1e-12 {
                    v /= max;
                    random_dirs.push(v);
                }
            }
            for block in &blocks {
                for _ in 0..2 {
                    let mut v = DVector::zeros(n);
                    for i in block.clone() {
                        v[i] = StandardNormal.sample(&mut rng);
                    }
                    let max = v.amax();
                    if max > 1e-12 {
                        v /= max;
                    }
                    random_dirs.push(v);
                }
                if block.len() >= 2 {
                    for _ in 0..2 {
                        let mut v = DVector::zeros(n);
                        let ia = rng.gen_range(0..block.len());
                        let mut ib = rng.gen_range(0..block.len() - 1);
                        if ib >= ia {
                            ib += 1;
                        }
                        v[block.start + ia] = if rng.gen::<bool>() { 1.0 } else { -1.0 };
                        v[block.start + ib] = if rng.gen::<bool>() { 1.0 } else { -1.0 };
                        random_dirs.push(v);
                    }
                }
            }
            for _ in 0..2 {
                let mut v = DVector::from_fn(n, |_, _| {
                    let x: f64 = StandardNormal.sample(&mut rng);
                    x
                });
                let max = v.amax();
                if max > 1e-12 {
                    v /= max;
                }
                random_dirs.push(v);
            }
            let candidate_for = |j: usize| -> DVector<f64> {
                if j < 2 * n {
                    let sign = if j % 2 == 0 { 1.0 } else { -1.0 };
                    let mut candidate = params.clone();
                    candidate[j / 2] += sign * mesh;
                    candidate
                } else {
                    // Each extra direction is tried at +/- mesh and at two
                    // longer extensions, so a correlated move lands even when
                    // its right magnitude is a small multiple of the mesh.
                    let r = j - 2 * n;
                    let scale = match r % 4 {
                        0 => 1.0,
                        1 => -1.0,
                        2 => 2.0,
                        _ => 4.0,
                    };
                    &params + &random_dirs[r / 4] * (scale * mesh)
                }
            };
            let wave: Vec<Option<(f64, Vec<f64>)>> = (0..2 * n + 4 * random_dirs.len())
                .into_par_iter()
                .map(|j| evaluate(problem, &reference, &candidate_for(j)))
                .collect();
            let mut best: Option<(usize, f64)> = None;
            for (j, cell) in wave.iter().enumerate() {
                if let Some((obj_new, _)) = cell {
                    if *obj_new < objective - 1e-15
                        && best.map_or(true, |(_, b)| *obj_new < b)
                    {
                        best = Some((j, *obj_new));
                    }
                }
            }
            match best {
                Some((j, obj_new)) => {
                    let winner = candidate_for(j);
                    params = winner;
                    residuals = wave[j].as_ref().expect("winning poll was evaluated").1.clone();
                    objective = obj_new;
                    mesh = (mesh * 2.0).min(options.initial_mesh * 4.0);
                    advanced = true;
                }
                None => {
                    mesh *= 0.5;
                    if mesh < options.min_mesh {
                        break;
                    }
                }
            }
        }
        if advanced {
            iterations.push(IterationRecord {
                iteration,
                objective,
                residuals: residuals.clone(),
                param_hash: param_hash(&params),
            });
            if residuals.iter().sum::<f64>() < options.residual_tol {
                converged = true;
            }
        }
    }
    let final_maps = problem.family.build(&params, *problem.grid.domain())?;
    let map_distance = match problem.truth {
        Some(truth) => Some(map_distance(&final_maps, truth, &problem.grid)?),
        None => None,
    };
    Ok(FitResult {
        params: params.iter().copied().collect(),
        residuals,
        objective,
        map_distance,
        iterations,
        converged,
    })
}

/// One probed radius-direction pair; `None` marks an inadmissible profile.
#[derive(Debug, Clone, Serialize)]
pub struct ProbeCell {
    pub radius: f64,
    pub direction: usize,
    pub residual: Option<f64>,
}

/// Residual growth around a profile along a panel of tangent directions.
#[derive(Debug, Clone, Serialize)]
pub struct UniquenessReport {
    pub cells: Vec<ProbeCell>,
    /// Residual ratios between consecutive radius doublings.
    pub doubling_ratios: Vec<f64>,
    pub min_ratio: f64,
    pub max_ratio: f64,
    /// Least-squares slope of residual against radius, through the origin.
    pub envelope_slope: f64,
    pub skipped: usize,
}

/// Tabulates `sum_z tv(phi_z(q + r h) - mu)` over radii and directions.
///
/// Inadmissible pairs (perturbed spectrum outside the eigenvalue box) are
/// skipped and counted.  Ratios are only formed between admissible residuals
/// at radius pairs `(r, 2r)` that are both numerically nonzero.
pub fn local_uniqueness_probe(
    maps: &[QuantileMap],
    fields_by_z: &[Vec<DensityField>],
    measure: &ReferenceMeasure,
    grid: &QuadratureGrid,
    eigen_box: (f64, f64),
    radii: &[f64],
    directions: &[TangentDirection],
) -> Result<UniquenessReport> {
    if directions.is_empty() || radii.is_empty() {
        return Err(Error::EmptyInput("probe needs radii and directions".into()));
    }
    let reference = reference_on_grid(measure, grid);
    let (lo, hi) = eigen_box;
    let mut cells = Vec::new();
    let mut skipped = 0;
    for (idx, direction) in directions.iter().enumerate() {
        for &radius in radii {
            let profile = perturbed_profile(maps, direction, radius)?;
            let admissible = profile.iter().all(|map| {
                check_class_membership(map, grid, lo, hi).map(|r| r.pass).unwrap_or(false)
            });
            if !admissible {
                skipped += 1;
                cells.push(ProbeCell { radius, direction: idx, residual: None });
                continue;
            }
            let mut residual = 0.0;
            for fields in fields_by_z {
                let image = phi(&profile, fields, grid)?;
                residual += image.sub(&reference)?.tv_norm();
            }
            cells.push(ProbeCell { radius, direction: idx, residual: Some(residual) });
        }
    }
    let mut doubling_ratios = Vec::new();
    for idx in 0..directions.len() {
        let of = |r: f64| -> Option<f64> {
            cells
                .iter()
                .find(|c| c.direction == idx && c.radius == r)
                .and_then(|c| c.residual)
        };
        for &radius in radii {
            if let (Some(small), Some(big)) = (of(radius), of(2.0 * radius)) {
                if small > 1e-12 && big > 1e-12 {
                    doubling_ratios.push(big / small);
                }
            }
        }
    }
    let (mut min_ratio, mut max_ratio) = (f64::INFINITY, f64::NEG_INFINITY);
    for r in &doubling_ratios {
        min_ratio = min_ratio.min(*r);
        max_ratio = max_ratio.max(*r);
    }
    let (mut sxy, mut sxx) = (0.0, 0.0);
    for cell in &cells {
        if let Some(res) = cell.residual {
            if cell.radius > 0.0 {
                sxy += cell.radius * res;
                sxx += cell.radius * cell.radius;
            }
        }
    }
    let envelope_slope = if sxx > 0.0 { sxy / sxx } else { 0.0 };
    Ok(UniquenessReport { cells, doubling_ratios, min_ratio, max_ratio, envelope_slope, skipped })
}

/// Controls for a full recovery experiment.
#[derive(Debug, Clone)]
pub struct RecoveryOptions {
    /// Use exact model densities instead of kernel estimates.
    pub exact: bool,
    /// Sample size for the estimated-density path.
    pub sample_size: usize,
    pub seed: u64,
    /// Scale of the random parameter perturbation applied to the truth.
    pub perturbation: f64,
    pub grid_resolution: usize,
    /// Perturb along the ridge-swap direction of a non-identified design and
    /// expect the fit to converge without recovering the truth.
    pub negative_control: bool,
    pub fit: FitOptions,
}

impl Default for RecoveryOptions {
    fn default() -> Self {
        Self {
            exact: true,
            sample_size: 50_000,
            seed: 1,
            perturbation: 0.05,
            grid_resolution: 48,
            negative_control: false,
            fit: FitOptions::default(),
        }
    }
}

/// Map error above which a converged control fit counts as failed recovery.
pub const CONTROL_FAILURE_FLOOR: f64 = 5e-3;

/// End-to-end recovery summary.
#[derive(Debug, Clone, Serialize)]
pub struct RecoveryReport {
    pub exact_fields: bool,
    pub sample_size: Option<usize>,
    pub perturbation: f64,
    /// Sup distance between the perturbed start and the truth.
    pub start_distance: f64,
    /// Sup distance between the fitted profile and the truth.
    pub map_distance: f64,
    pub residuals: Vec<f64>,
    pub converged: bool,
    pub negative_control: bool,
    /// Set when a negative control converged to a flat residual while the
    /// map error stayed at the non-recovery floor under both the requested
    /// and a hundredfold tighter tolerance.
    pub expected_failure: bool,
    /// Control map error under the tighter tolerance.
    pub control_map_distance_tight: Option<f64>,
    /// Support area (p = 2) or length (p = 1) per `(z, d)` field.
    pub support_sizes: Vec<Vec<f64>>,
    /// Pointwise quadratic-condition margin at the model's eigenvalue box,
    /// for binary designs.
    pub condition_margin: Option<f64>,
    pub probe_min_ratio: f64,
    pub probe_max_ratio: f64,
    pub probe_slope: f64,
}

/// Simulates or evaluates densities, refits from a perturbed start, and
/// reports recovery error plus identification diagnostics.
pub fn recovery_experiment(
    model: &StructuralModel,
    family: ParamFamily,
    options: &RecoveryOptions,
) -> Result<RecoveryReport> {
    let m = model.treatments();
    let z_count = model.instrument_law().len();
    // On the cube, jittering the quadrature nodes staggers support-boundary
    // crossings across parameters, which shrinks the resolution floor of the
    // fit from one cell width to a small fraction of it.  The fit then runs
    // on a short ladder of independently jittered grids: a handful of nodes
    // can pin one grid's search at a spurious staircase corner, and redrawing
    // the jitter releases them.
    let domain = *model.measure().domain();
    let grid_for = |stage: u64| -> Result<QuadratureGrid> {
        match domain.kind() {
            crate::domain::DomainKind::UnitCube => QuadratureGrid::build_jittered(
                domain,
                options.grid_resolution,
                options.seed.wrapping_add(101 + 97 * stage),
            ),
            _ => QuadratureGrid::build(domain, options.grid_resolution),
        }
    };
    let grid = grid_for(0)?;
    let sample = if options.exact {
        None
    } else {
        Some(model.simulate(options.sample_size, options.seed, false)?)
    };
    let mut fields_by_z = Vec::with_capacity(z_count);
    let mut support_sizes = Vec::with_capacity(z_count);
    for z in 0..z_count {
        let mut fields = Vec::with_capacity(m);
        let mut sizes = Vec::with_capacity(m);
        for d in 0..m {
            let field = match &sample {
                None => crate::densities::exact_density(model, d, z)?,
                Some(s) => crate::densities::estimate_density(s, d, z)?,
            };
            let size = match crate::densities::identify_support(&field, 60)? {
                crate::densities::SupportEstimate::Interval { lo, hi } => hi - lo,
                crate::densities::SupportEstimate::Hull { area, .. } => area,
            };
            fields.push(field);
            sizes.push(size);
        }
        fields_by_z.push(fields);
        support_sizes.push(sizes);
    }

    let truth = family.pack(model.maps())?;
    let initial = if options.negative_control {
        // Displace the ridge coefficients in opposite directions: the swap
        // moves mass between treatments, which a degenerate instrument
        // cannot see.
        let ParamFamily::AffineRidge { .. } = &family else {
            return Err(Error::InvalidParameter(
                "negative controls need the ridge-augmented affine family".into(),
            ));
        };
        let coeff_block = family.blocks().pop().expect("ridge family has a coefficient block");
        let mut initial = truth.clone();
        for (which, i) in coeff_block.enumerate() {
            initial[i] = if which % 2 == 0 { options.perturbation } else { -options.perturbation };
        }
        initial
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(options.seed.wrapping_add(0x9e3779b9));
        let mut offset = DVector::from_fn(truth.len(), |_, _| {
            let x: f64 = StandardNormal.sample(&mut rng);
            x
        });
        let norm = offset.norm();
        if norm > 0.0 {
            offset /= norm;
        }
        &truth + offset * options.perturbation
    };
    let start_maps = family.build(&initial, *model.measure().domain())?;
    let start_distance = map_distance(&start_maps, model.maps(), &grid)?;

    let stages = if matches!(domain.kind(), crate::domain::DomainKind::UnitCube) { 3 } else { 1 };
    let mut current = initial;
    let mut result = None;
    for stage in 0..stages {
        let stage_fit = if stage == 0 {
            options.fit.clone()
        } else {
            // Later stages only polish from a near-converged start.
            FitOptions {
                initial_mesh: options.fit.initial_mesh.min(4e-3),
                max_iters: options.fit.max_iters.min(150),
                ..options.fit.clone()
            }
        };
        let problem = FitProblem {
            fields_by_z: &fields_by_z,
            measure: *model.measure(),
            grid: grid_for(stage)?,
            family: family.clone(),
            eigen_box: model.eigen_box(),
            initial: current,
            truth: Some(model.maps()),
        };
        let stage_result = fit(&problem, &stage_fit)?;
        current = DVector::from_vec(stage_result.params.clone());
        result = Some(stage_result);
    }
    let result = result.expect("at least one fit stage runs");

    // A control fails recovery exactly when tightening the tolerance does not
    // move the converged fit any closer to the truth.
    let (expected_failure, control_map_distance_tight) = if options.negative_control {
        let tight_problem = FitProblem {
            fields_by_z: &fields_by_z,
            measure: *model.measure(),
            grid: grid_for(0)?,
            family: family.clone(),
            eigen_box: model.eigen_box(),
            initial: DVector::from_vec(result.params.clone()),
            truth: Some(model.maps()),
        };
        let tight_fit =
            FitOptions { residual_tol: options.fit.residual_tol * 1e-2, ..options.fit.clone() };
        let tight = fit(&tight_problem, &tight_fit)?;
        let tight_distance = tight.map_distance.unwrap_or(f64::NAN);
        let failed = result.converged
            && result.map_distance.unwrap_or(f64::NAN) > CONTROL_FAILURE_FLOOR
            && tight_distance > CONTROL_FAILURE_FLOOR;
        (failed, Some(tight_distance))
    } else {
        (false, None)
    };

    let condition_margin = if m == 2 && z_count == 2 {
        let quad = crate::identification::FieldQuadruple::from_model(model)?;
        let (lo, hi) = model.eigen_box();
        Some(crate::identification::check_condition_12(&quad, lo, hi, 40)?.margin)
    } else {
        None
    };

    let batch = crate::linearization::sample_tangent(
        model.maps(),
        model.eigen_box(),
        crate::linearization::TangentStyle::SupportPreserving,
        crate::linearization::DEFAULT_DERIVATIVE_BOUND,
        &grid,
        options.seed.wrapping_add(17),
        4,
    )?;
    let probe = local_uniqueness_probe(
        model.maps(),
        &fields_by_z,
        model.measure(),
        &grid,
        model.eigen_box(),
        &[1e-3, 2e-3, 4e-3],
        &batch.directions,
    )?;

    Ok(RecoveryReport {
        exact_fields: options.exact,
        sample_size: sample.as_ref().map(|s| s.len()),
        perturbation: options.perturbation,
        start_distance,
        map_distance: result.map_distance.unwrap_or(f64::NAN),
        residuals: result.residuals,
        converged: result.converged,
        negative_control: options.negative_control,
        expected_failure,
        control_map_distance_tight,
        support_sizes,
        condition_margin,
        probe_min_ratio: probe.min_ratio,
        probe_max_ratio: probe.max_ratio,
        probe_slope: probe.envelope_slope,
    })
}
