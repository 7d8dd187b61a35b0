//! First-order analysis of the pushforward operator.
//!
//! Pushing a candidate map profile through the observed outcome densities
//! yields a measure on the reference domain; at the true profile that measure
//! coincides with the reference measure.  This module represents such
//! measures on a fixed quadrature grid, computes the directional derivative
//! of the pushforward along admissible tangent fields, and probes how far the
//! derivative is from having a kernel.  Total-variation norms of these grid
//! measures drive both the rank probe here and the fitting objective in the
//! solver.
//!
//! Tangent fields are gradients of signed combinations of convex potentials,
//! so their Jacobians are symmetric by construction and the perturbed profile
//! stays inside the gradient-map class for small radii.

use crate::densities::{DensityField, GradientMode};
use crate::domain::{DomainKind, QuadratureGrid, ReferenceMeasure};
use crate::error::{Error, Result};
use crate::potential::ConvexPotential;
use crate::transport::{check_class_membership, MapLike, QuantileMap};
use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use std::io::Write;

/// Default bound on the spectral norm of tangent-field Jacobians.
pub const DEFAULT_DERIVATIVE_BOUND: f64 = 10.0;

/// Largest perturbation radius tried when vetting a tangent direction.
pub const ALPHA_MAX: f64 = 0.1;

/// Signed measure represented by one density value per quadrature node.
#[derive(Debug, Clone, PartialEq)]
pub struct SignedGridMeasure {
    grid: QuadratureGrid,
    densities: Vec<f64>,
}

impl SignedGridMeasure {
    pub fn new(grid: QuadratureGrid, densities: Vec<f64>) -> Result<Self> {
        if densities.len() != grid.len() {
            return Err(Error::DimensionMismatch { expected: grid.len(), got: densities.len() });
        }
        Ok(Self { grid, densities })
    }

    pub fn grid(&self) -> &QuadratureGrid {
        &self.grid
    }

    pub fn densities(&self) -> &[f64] {
        &self.densities
    }

    /// Total-variation norm: the quadrature sum of absolute node densities.
    pub fn tv_norm(&self) -> f64 {
        self.grid.weights().iter().zip(&self.densities).map(|(w, d)| w * d.abs()).sum()
    }

    /// Signed mass, i.e. the quadrature sum of the node densities.
    pub fn total_mass(&self) -> f64 {
        self.grid.weights().iter().zip(&self.densities).map(|(w, d)| w * d).sum()
    }

    pub fn max_abs_density(&self) -> f64 {
        self.densities.iter().fold(0.0_f64, |acc, d| acc.max(d.abs()))
    }

    /// Node-wise difference of two measures living on the same grid.
    pub fn sub(&self, other: &Self) -> Result<Self> {
        if self.grid != other.grid {
            return Err(Error::InvalidParameter(
                "grid measures live on different quadrature grids".into(),
            ));
        }
        let densities =
            self.densities.iter().zip(&other.densities).map(|(a, b)| a - b).collect();
        Self::new(self.grid.clone(), densities)
    }

    /// Writes one row per node: coordinates, quadrature weight, density.
    pub fn write_csv(&self, out: &mut impl Write) -> Result<()> {
        let p = self.grid.domain().dim();
        let header: Vec<String> = (1..=p).map(|j| format!("u{j}")).collect();
        writeln!(out, "{},weight,density", header.join(","))?;
        for ((u, w), d) in self.grid.iter().zip(&self.densities) {
            let coords: Vec<String> = u.iter().map(|x| format!("{x}")).collect();
            writeln!(out, "{},{w},{d}", coords.join(","))?;
        }
        Ok(())
    }
}

/// The reference measure itself, tabulated as a grid measure.
pub fn reference_on_grid(measure: &ReferenceMeasure, grid: &QuadratureGrid) -> SignedGridMeasure {
    let densities = grid.nodes().iter().map(|u| measure.density(u)).collect();
    SignedGridMeasure { grid: grid.clone(), densities }
}

/// Pushforward image of a map profile through per-treatment outcome densities.
///
/// The node density is `sum_d f_d(q_d(u)) det Dq_d(u)`; at the true profile
/// with the fields of one instrument value this reproduces the reference
/// density.
pub fn phi<M: MapLike>(
    maps: &[M],
    fields: &[DensityField],
    grid: &QuadratureGrid,
) -> Result<SignedGridMeasure> {
    if maps.is_empty() {
        return Err(Error::EmptyInput("pushforward needs at least one map".into()));
    }
    if maps.len() != fields.len() {
        return Err(Error::DimensionMismatch { expected: maps.len(), got: fields.len() });
    }
    let p = grid.domain().dim();
    for map in maps {
        if map.dim() != p {
            return Err(Error::DimensionMismatch { expected: p, got: map.dim() });
        }
    }
    let mut densities = Vec::with_capacity(grid.len());
    for u in grid.nodes() {
        let mut total = 0.0;
        for (map, field) in maps.iter().zip(fields) {
            let y = map.eval_unchecked(u);
            let det = map.jacobian_unchecked(u).determinant();
            total += field.eval(&y)? * det;
        }
        densities.push(total);
    }
    SignedGridMeasure::new(grid.clone(), densities)
}

/// Cofactor (transposed adjugate) of a square matrix.
///
/// For invertible input this is `det(M) * M^{-T}`; the 1x1 and 2x2 cases are
/// closed-form and remain valid at singular arguments.
pub fn cofactor_matrix(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let p = m.nrows();
    if p == 0 || m.ncols() != p {
        return Err(Error::EmptyInput("cofactor needs a nonempty square matrix".into()));
    }
    match p {
        1 => Ok(DMatrix::from_element(1, 1, 1.0)),
        2 => Ok(DMatrix::from_row_slice(2, 2, &[m[(1, 1)], -m[(1, 0)], -m[(0, 1)], m[(0, 0)]])),
        _ => {
            let det = m.determinant();
            if det.abs() < 1e-12 {
                return Err(Error::SingularMatrix);
            }
            let inv = m.clone().try_inverse().ok_or(Error::SingularMatrix)?;
            Ok(inv.transpose() * det)
        }
    }
}

/// Largest interior-node violation of the cofactor divergence identity.
///
/// For a twice-differentiable map the columns of the Jacobian cofactor are
/// divergence-free; the residual reports `max_j |sum_i d_i cof(Dq)_{ij}|`
/// over nodes at least `step` inside the domain, with central differences of
/// spacing `step`.  Affine and univariate maps give exactly zero.
pub fn piola_residual<M: MapLike>(map: &M, grid: &QuadratureGrid, step: f64) -> Result<f64> {
    if !(step > 0.0) {
        return Err(Error::InvalidParameter("finite-difference step must be positive".into()));
    }
    let p = grid.domain().dim();
    if map.dim() != p {
        return Err(Error::DimensionMismatch { expected: p, got: map.dim() });
    }
    let mut worst = 0.0_f64;
    for u in grid.nodes() {
        if !grid.domain().is_interior(u, step * (1.0 + 1e-12)) {
            continue;
        }
        let mut divergence = DVector::zeros(p);
        for i in 0..p {
            let mut up = u.clone();
            up[i] += step;
            let mut down = u.clone();
            down[i] -= step;
            let cof_up = cofactor_matrix(&map.jacobian_unchecked(&up))?;
            let cof_down = cofactor_matrix(&map.jacobian_unchecked(&down))?;
            for j in 0..p {
                divergence[j] += (cof_up[(i, j)] - cof_down[(i, j)]) / (2.0 * step);
            }
        }
        worst = worst.max(divergence.abs().max());
    }
    Ok(worst)
}

/// Signed combination of convex potentials; its gradient is a smooth vector
/// field with symmetric Jacobian.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GradientCombination {
    terms: Vec<(f64, ConvexPotential)>,
}

impl GradientCombination {
    pub fn new(terms: Vec<(f64, ConvexPotential)>) -> Result<Self> {
        if terms.is_empty() {
            return Err(Error::EmptyInput("a gradient combination needs at least one term".into()));
        }
        let p = terms[0].1.dim();
        for (c, pot) in &terms {
            if !c.is_finite() {
                return Err(Error::InvalidParameter("non-finite combination coefficient".into()));
            }
            if pot.dim() != p {
                return Err(Error::DimensionMismatch { expected: p, got: pot.dim() });
            }
        }
        Ok(Self { terms })
    }

    /// The zero field in dimension `p`.
    pub fn zero(p: usize) -> Result<Self> {
        let quad = ConvexPotential::quadratic(DMatrix::zeros(p, p), DVector::zeros(p))?;
        Self::new(vec![(0.0, quad)])
    }

    pub fn dim(&self) -> usize {
        self.terms[0].1.dim()
    }

    pub fn terms(&self) -> &[(f64, ConvexPotential)] {
        &self.terms
    }

    pub fn eval(&self, u: &DVector<f64>) -> DVector<f64> {
        let mut out = DVector::zeros(self.dim());
        for (c, pot) in &self.terms {
            out += pot.gradient(u) * *c;
        }
        out
    }

    pub fn jacobian(&self, u: &DVector<f64>) -> DMatrix<f64> {
        let p = self.dim();
        let mut out = DMatrix::zeros(p, p);
        for (c, pot) in &self.terms {
            out += pot.hessian(u) * *c;
        }
        out
    }

    pub fn scaled(&self, factor: f64) -> Self {
        let terms = self.terms.iter().map(|(c, pot)| (c * factor, pot.clone())).collect();
        Self { terms }
    }
}

/// Per-treatment tangent fields along which a map profile is perturbed.
///
/// Each component is the gradient of a signed potential combination, so the
/// field Jacobians are symmetric and `q_d + alpha h_d` remains a gradient
/// map.  The convention for a unit direction is `max_d sup_u |h_d(u)| = 1`,
/// realized on a quadrature grid by [`TangentDirection::normalized`].
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TangentDirection {
    components: Vec<GradientCombination>,
}

impl TangentDirection {
    pub fn new(components: Vec<GradientCombination>) -> Result<Self> {
        if components.is_empty() {
            return Err(Error::EmptyInput("a tangent direction needs one field per treatment".into()));
        }
        let p = components[0].dim();
        for c in &components {
            if c.dim() != p {
                return Err(Error::DimensionMismatch { expected: p, got: c.dim() });
            }
        }
        Ok(Self { components })
    }

    pub fn treatments(&self) -> usize {
        self.components.len()
    }

    pub fn dim(&self) -> usize {
        self.components[0].dim()
    }

    pub fn component(&self, d: usize) -> &GradientCombination {
        &self.components[d]
    }

    pub fn eval(&self, d: usize, u: &DVector<f64>) -> DVector<f64> {
        self.components[d].eval(u)
    }

    pub fn jacobian(&self, d: usize, u: &DVector<f64>) -> DMatrix<f64> {
        self.components[d].jacobian(u)
    }

    /// Sup over grid nodes of the Euclidean field norm, max over treatments.
    pub fn sup_norm(&self, grid: &QuadratureGrid) -> f64 {
        let mut worst = 0.0_f64;
        for c in &self.components {
            for u in grid.nodes() {
                worst = worst.max(c.eval(u).norm());
            }
        }
        worst
    }

    /// Largest Jacobian spectral norm over grid nodes and treatments.
    pub fn derivative_bound(&self, grid: &QuadratureGrid) -> f64 {
        let mut worst = 0.0_f64;
        for c in &self.components {
            for u in grid.nodes() {
                let sym = c.jacobian(u);
                let eigen = sym.symmetric_eigen().eigenvalues;
                worst = worst.max(eigen.iter().fold(0.0_f64, |a, e| a.max(e.abs())));
            }
        }
        worst
    }

    pub fn scaled(&self, factor: f64) -> Self {
        Self { components: self.components.iter().map(|c| c.scaled(factor)).collect() }
    }

    /// Rescales to `sup_norm == 1` on the grid; rejects the zero direction.
    pub fn normalized(&self, grid: &QuadratureGrid) -> Result<Self> {
        let norm = self.sup_norm(grid);
        if norm < 1e-12 {
            return Err(Error::InvalidParameter("cannot normalize a vanishing tangent".into()));
        }
        Ok(self.scaled(1.0 / norm))
    }
}

/// A base map displaced by a gradient field: `u -> q(u) + h(u)`.
#[derive(Debug, Clone)]
pub struct DeformedMap<'a> {
    base: &'a QuantileMap,
    offset: GradientCombination,
}

impl<'a> DeformedMap<'a> {
    pub fn new(base: &'a QuantileMap, offset: GradientCombination) -> Result<Self> {
        if base.domain().dim() != offset.dim() {
            return Err(Error::DimensionMismatch {
                expected: base.domain().dim(),
                got: offset.dim(),
            });
        }
        Ok(Self { base, offset })
    }
}

impl MapLike for DeformedMap<'_> {
    fn dim(&self) -> usize {
        self.base.domain().dim()
    }

    fn eval_unchecked(&self, u: &DVector<f64>) -> DVector<f64> {
        self.base.eval_unchecked(u) + self.offset.eval(u)
    }

    fn jacobian_unchecked(&self, u: &DVector<f64>) -> DMatrix<f64> {
        self.base.jacobian_unchecked(u) + self.offset.jacobian(u)
    }
}

/// The profile `q_d + radius * h_d` for every treatment.
pub fn perturbed_profile<'a>(
    maps: &'a [QuantileMap],
    direction: &TangentDirection,
    radius: f64,
) -> Result<Vec<DeformedMap<'a>>> {
    if maps.len() != direction.treatments() {
        return Err(Error::DimensionMismatch {
            expected: maps.len(),
            got: direction.treatments(),
        });
    }
    maps.iter()
        .zip(0..direction.treatments())
        .map(|(map, d)| DeformedMap::new(map, direction.component(d).scaled(radius)))
        .collect()
}

/// Directional derivative of the pushforward at a map profile.
///
/// The node density is the expanded divergence form
/// `sum_d [ det Dq_d * (grad f_d)(q_d(u)) . h_d(u) + f_d(q_d(u)) * <cof Dq_d, Dh_d(u)> ]`
/// with the Frobenius pairing in the second term.  The returned mode reports
/// whether any field fell back to finite-difference gradients.
pub fn phi_prime<M: MapLike>(
    maps: &[M],
    direction: &TangentDirection,
    fields: &[DensityField],
    grid: &QuadratureGrid,
) -> Result<(SignedGridMeasure, GradientMode)> {
    if maps.is_empty() {
        return Err(Error::EmptyInput("derivative needs at least one map".into()));
    }
    if maps.len() != fields.len() || maps.len() != direction.treatments() {
        return Err(Error::DimensionMismatch { expected: maps.len(), got: fields.len() });
    }
    let p = grid.domain().dim();
    for map in maps {
        if map.dim() != p {
            return Err(Error::DimensionMismatch { expected: p, got: map.dim() });
        }
    }
    let mode = if fields.iter().any(|f| f.gradient_mode() == GradientMode::FiniteDifference) {
        GradientMode::FiniteDifference
    } else {
        GradientMode::Analytic
    };
    let mut densities = Vec::with_capacity(grid.len());
    for u in grid.nodes() {
        let mut total = 0.0;
        for (d, (map, field)) in maps.iter().zip(fields).enumerate() {
            let y = map.eval_unchecked(u);
            let jac = map.jacobian_unchecked(u);
            let det = jac.determinant();
            let cof = cofactor_matrix(&jac)?;
            let value = field.eval(&y)?;
            let grad = field.gradient(&y)?;
            let h = direction.eval(d, u);
            let dh = direction.jacobian(d, u);
            total += det * grad.dot(&h) + value * cof.dot(&dh);
        }
        densities.push(total);
    }
    Ok((SignedGridMeasure::new(grid.clone(), densities)?, mode))
}

/// Families of random tangent candidates drawn by [`sample_tangent`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TangentStyle {
    /// Quadratic plus smoothed-max potential perturbations over the whole
    /// domain.
    General,
    /// Separable sigmoid caps vanishing at the cube faces, so small
    /// perturbations keep each image inside its support box.
    SupportPreserving,
}

/// Accepted directions together with the sampler's rejection tally.
#[derive(Debug, Clone)]
pub struct TangentBatch {
    pub directions: Vec<TangentDirection>,
    pub attempts: usize,
    pub rejected_derivative: usize,
    pub rejected_admissibility: usize,
}

/// Lower sigmoid-knee position of the support-preserving caps.
const CAP_LO: f64 = 0.35;
/// Upper sigmoid-knee position of the support-preserving caps.
const CAP_HI: f64 = 0.65;
/// Sigmoid temperature of the support-preserving caps.
const CAP_TEMP: f64 = 0.04;

/// Draws random unit tangent directions admissible at the given profile.
///
/// Candidates are gradients of random potential differences, rescaled to
/// `sup_norm == 1` on the grid.  A candidate is rejected when its Jacobian
/// bound exceeds `derivative_bound` or no radius `alpha <= ALPHA_MAX` keeps
/// the perturbed profile inside the eigenvalue box.  Fewer directions than
/// requested (down to none) are returned when rejections exhaust the attempt
/// budget; the tally says why.
pub fn sample_tangent(
    maps: &[QuantileMap],
    eigen_box: (f64, f64),
    style: TangentStyle,
    derivative_bound: f64,
    grid: &QuadratureGrid,
    seed: u64,
    count: usize,
) -> Result<TangentBatch> {
    if maps.is_empty() {
        return Err(Error::EmptyInput("tangent sampling needs a map profile".into()));
    }
    if count == 0 {
        return Err(Error::InvalidParameter("requested zero tangent directions".into()));
    }
    if !(derivative_bound > 0.0) {
        return Err(Error::InvalidParameter("derivative bound must be positive".into()));
    }
    let (lo, hi) = eigen_box;
    if !(lo > 0.0 && hi > lo) {
        return Err(Error::InvalidParameter("eigenvalue box must satisfy 0 < lo < hi".into()));
    }
    let p = grid.domain().dim();
    if style == TangentStyle::SupportPreserving && grid.domain().kind() != DomainKind::UnitCube {
        return Err(Error::UnsupportedDomain(
            "support-preserving caps are defined on the unit cube".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut batch = TangentBatch {
        directions: Vec::new(),
        attempts: 0,
        rejected_derivative: 0,
        rejected_admissibility: 0,
    };
    let budget = count * 40;
    while batch.directions.len() < count && batch.attempts < budget {
        batch.attempts += 1;
        let candidate = match style {
            TangentStyle::General => general_candidate(&mut rng, p, maps.len())?,
            TangentStyle::SupportPreserving => cap_candidate(&mut rng, p, maps.len())?,
        };
        let unit = match candidate.normalized(grid) {
            Ok(unit) => unit,
            Err(_) => continue,
        };
        if unit.derivative_bound(grid) > derivative_bound {
            batch.rejected_derivative += 1;
            continue;
        }
        if admissible_radius(maps, &unit, eigen_box, grid).is_none() {
            batch.rejected_admissibility += 1;
            continue;
        }
        batch.directions.push(unit);
    }
    Ok(batch)
}

/// Largest radius in `{ALPHA_MAX * 2^-k}` keeping the perturbed profile in
/// the eigenvalue box on the grid, if any.
pub fn admissible_radius(
    maps: &[QuantileMap],
    direction: &TangentDirection,
    eigen_box: (f64, f64),
    grid: &QuadratureGrid,
) -> Option<f64> {
    let (lo, hi) = eigen_box;
    let mut alpha = ALPHA_MAX;
    for _ in 0..20 {
        let admissible = perturbed_profile(maps, direction, alpha).map_or(false, |profile| {
            profile.iter().all(|map| {
                check_class_membership(map, grid, lo, hi).map(|r| r.pass).unwrap_or(false)
            })
        });
        if admissible {
            return Some(alpha);
        }
        alpha *= 0.5;
    }
    None
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

fn general_candidate(rng: &mut ChaCha8Rng, p: usize, treatments: usize) -> Result<TangentDirection> {
    let mut components = Vec::with_capacity(treatments);
    for _ in 0..treatments {
        let root = DMatrix::from_fn(p, p, |_, _| 0.6 * normal(rng));
        let matrix = root.transpose() * &root * 0.5;
        let shift = DVector::from_fn(p, |_, _| 0.5 * normal(rng));
        let quad = ConvexPotential::quadratic(matrix, shift)?;
        let pieces = 3;
        let slopes = (0..pieces)
            .map(|_| DVector::from_fn(p, |_, _| 0.7 * normal(rng)))
            .collect();
        let offsets = (0..pieces).map(|_| 0.4 * normal(rng)).collect();
        let temperature = 0.6 + 0.5 * normal(rng).abs();
        let smooth = ConvexPotential::smooth_max(slopes, offsets, temperature, 0.0)?;
        components.push(GradientCombination::new(vec![
            (normal(rng), quad),
            (0.6 * normal(rng), smooth),
        ])?);
    }
    TangentDirection::new(components)
}

/// A one-coordinate sigmoid ramp `u -> t log(1 + exp((u_axis - knee)/t))`.
fn ramp_potential(p: usize, axis: usize, knee: f64) -> Result<ConvexPotential> {
    let mut slope = DVector::zeros(p);
    slope[axis] = 1.0;
    ConvexPotential::smooth_max(vec![DVector::zeros(p), slope], vec![0.0, -knee], CAP_TEMP, 0.0)
}

fn cap_candidate(rng: &mut ChaCha8Rng, p: usize, treatments: usize) -> Result<TangentDirection> {
    let mut components = Vec::with_capacity(treatments);
    for _ in 0..treatments {
        let mut terms = Vec::with_capacity(2 * p);
        for axis in 0..p {
            let c = normal(rng);
            terms.push((c, ramp_potential(p, axis, CAP_LO)?));
            terms.push((-c, ramp_potential(p, axis, CAP_HI)?));
        }
        components.push(GradientCombination::new(terms)?);
    }
    TangentDirection::new(components)
}

/// Gradient field `u -> c * cap(u_axis) e_axis` for the ridge cap
/// `cap(x) = x - sigmoid((x - 1/2)/t)`, which vanishes at both cube faces.
pub fn ridge_cap_combination(
    p: usize,
    axis: usize,
    temperature: f64,
    coefficient: f64,
) -> Result<GradientCombination> {
    if axis >= p {
        return Err(Error::InvalidParameter(format!("ridge axis {axis} out of range for p={p}")));
    }
    if !(temperature > 0.0) {
        return Err(Error::InvalidParameter("ridge temperature must be positive".into()));
    }
    let mut matrix = DMatrix::zeros(p, p);
    matrix[(axis, axis)] = 1.0;
    let quad = ConvexPotential::quadratic(matrix, DVector::zeros(p))?;
    let mut slope = DVector::zeros(p);
    slope[axis] = 1.0;
    let sigmoid = ConvexPotential::smooth_max(
        vec![DVector::zeros(p), slope],
        vec![0.0, -0.5],
        temperature,
        0.0,
    )?;
    GradientCombination::new(vec![(coefficient, quad), (-coefficient, sigmoid)])
}

/// Two-treatment direction `h_1 = -h_0` along a single-axis ridge cap.
///
/// The cap vanishes at both faces of the cube, so the direction preserves
/// supports; when the two treatments enter the pushforward with equal
/// weights the derivative along it cancels exactly.
pub fn ridge_swap_direction(p: usize, axis: usize, temperature: f64) -> Result<TangentDirection> {
    let forward = ridge_cap_combination(p, axis, temperature, 1.0)?;
    let backward = ridge_cap_combination(p, axis, temperature, -1.0)?;
    TangentDirection::new(vec![forward, backward])
}

/// Outcome of probing the pushforward derivative over a direction panel.
#[derive(Debug, Clone, Serialize)]
pub struct FullRankReport {
    /// Smallest summed derivative mass over the panel.
    pub min_value: f64,
    /// Index of the minimizing direction.
    pub argmin: usize,
    /// Per-direction values `sum_z tv_norm(phi'_z)`.
    pub values: Vec<f64>,
    /// Whether any density gradient fell back to finite differences.
    pub finite_difference_gradients: bool,
}

/// Minimum over unit directions of the total derivative mass across
/// instrument values.
///
/// Directions are re-normalized internally, so the probe value is invariant
/// to rescaling any input direction.
pub fn full_rank_probe(
    maps: &[QuantileMap],
    fields_by_z: &[Vec<DensityField>],
    grid: &QuadratureGrid,
    directions: &[TangentDirection],
) -> Result<FullRankReport> {
    if directions.is_empty() {
        return Err(Error::EmptyInput("rank probe needs at least one direction".into()));
    }
    if fields_by_z.is_empty() {
        return Err(Error::EmptyInput("rank probe needs at least one instrument value".into()));
    }
    let mut values = Vec::with_capacity(directions.len());
    let mut finite_difference = false;
    for direction in directions {
        let unit = direction.normalized(grid)?;
        let mut total = 0.0;
        for fields in fields_by_z {
            let (measure, mode) = phi_prime(maps, &unit, fields, grid)?;
            total += measure.tv_norm();
            finite_difference |= mode == GradientMode::FiniteDifference;
        }
        values.push(total);
    }
    let (argmin, min_value) = values
        .iter()
        .enumerate()
        .fold((0, f64::INFINITY), |(ai, av), (i, &v)| if v < av { (i, v) } else { (ai, av) });
    Ok(FullRankReport { min_value, argmin, values, finite_difference_gradients: finite_difference })
}

/// Minimum alignment of the transported outward conormal with the outward
/// ray from the image barycenter, over sampled boundary points.
///
/// For a strictly monotone map with convex image the vector `(Dq)^{-T} nu`
/// at a boundary point must point out of the image, so its inner product
/// with `q(u) - barycenter` is positive.
pub fn conormal_min_alignment(map: &QuantileMap, res: usize) -> Result<f64> {
    if res < 2 {
        return Err(Error::InvalidParameter("boundary resolution must be >= 2".into()));
    }
    let domain = *map.domain();
    let p = domain.dim();
    let grid = QuadratureGrid::build(domain, res)?;
    let volume = domain.volume();
    let mut barycenter = DVector::zeros(p);
    for (u, w) in grid.iter() {
        barycenter += map.eval_unchecked(u) * (w / volume);
    }
    let boundary: Vec<(DVector<f64>, DVector<f64>)> = match domain.kind() {
        DomainKind::UnitCube => cube_boundary(p, res),
        DomainKind::UnitBall => match p {
            1 => vec![
                (DVector::from_element(1, -1.0), DVector::from_element(1, -1.0)),
                (DVector::from_element(1, 1.0), DVector::from_element(1, 1.0)),
            ],
            2 => (0..res)
                .map(|k| {
                    let theta = 2.0 * std::f64::consts::PI * k as f64 / res as f64;
                    let u = DVector::from_vec(vec![theta.cos(), theta.sin()]);
                    (u.clone(), u)
                })
                .collect(),
            _ => {
                return Err(Error::UnsupportedDomain(
                    "boundary sampling on the ball is limited to p <= 2".into(),
                ))
            }
        },
    };
    let mut worst = f64::INFINITY;
    for (u, nu) in &boundary {
        let jac = map.jacobian_unchecked(u);
        let conormal = jac
            .transpose()
            .lu()
            .solve(nu)
            .ok_or(Error::SingularMatrix)?;
        let outward = map.eval_unchecked(u) - &barycenter;
        worst = worst.min(conormal.dot(&outward));
    }
    Ok(worst)
}

/// Boundary lattice of the unit cube: face midpoint grids with outward
/// normals.
fn cube_boundary(p: usize, res: usize) -> Vec<(DVector<f64>, DVector<f64>)> {
    let mut points = Vec::new();
    if p == 1 {
        points.push((DVector::from_element(1, 0.0), DVector::from_element(1, -1.0)));
        points.push((DVector::from_element(1, 1.0), DVector::from_element(1, 1.0)));
        return points;
    }
    let face_nodes = res.pow((p - 1) as u32);
    for axis in 0..p {
        for side in 0..2 {
            let mut nu = DVector::zeros(p);
            nu[axis] = if side == 0 { -1.0 } else { 1.0 };
            let mut index = vec![0usize; p - 1];
            for _ in 0..face_nodes {
                let mut u = DVector::zeros(p);
                u[axis] = side as f64;
                let mut k = 0;
                for j in 0..p {
                    if j != axis {
                        u[j] = (index[k] as f64 + 0.5) / res as f64;
                        k += 1;
                    }
                }
                points.push((u, nu.clone()));
                for slot in (0..p - 1).rev() {
                    index[slot] += 1;
                    if index[slot] < res {
                        break;
                    }
                    index[slot] = 0;
                }
            }
        }
    }
    points
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::densities::exact_density;
    use crate::domain::ReferenceDomain;
    use crate::model::example1_model;
    use crate::transport::QuantileMap;
    use approx::{assert_abs_diff_eq, assert_relative_eq};

    fn unit_grid(res: usize) -> QuadratureGrid {
        QuadratureGrid::build(ReferenceDomain::unit_cube(2).unwrap(), res).unwrap()
    }

    fn identity_model(compliance: f64) -> crate::model::StructuralModel {
        let eye = DMatrix::identity(2, 2);
        let zero = DVector::zeros(2);
        example1_model(&eye, &eye, &zero, &zero, compliance).unwrap()
    }

    fn curved_model() -> crate::model::StructuralModel {
        let a0 = DMatrix::identity(2, 2);
        let a1 = DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, 2.0]));
        let b0 = DVector::zeros(2);
        let b1 = DVector::zeros(2);
        example1_model(&a0, &a1, &b0, &b1, 0.9).unwrap()
    }

    fn fields_for(model: &crate::model::StructuralModel, z: usize) -> Vec<DensityField> {
        (0..model.treatments()).map(|d| exact_density(model, d, z).unwrap()).collect()
    }

    #[test]
    fn cofactor_of_a_scalar_is_one() {
        let m = DMatrix::from_element(1, 1, -3.5);
        let cof = cofactor_matrix(&m).unwrap();
        assert_abs_diff_eq!(cof[(0, 0)], 1.0);
    }

    #[test]
    fn cofactor_satisfies_the_adjugate_identity() {
        for m in [
            DMatrix::from_row_slice(2, 2, &[2.0, 0.7, -0.3, 1.5]),
            DMatrix::from_row_slice(3, 3, &[2.0, 0.4, 0.1, 0.3, 1.8, -0.2, 0.0, 0.5, 1.1]),
        ] {
            let cof = cofactor_matrix(&m).unwrap();
            let det = m.determinant();
            let product = &m * cof.transpose();
            let identity = DMatrix::identity(m.nrows(), m.nrows());
            assert_relative_eq!(product, identity * det, epsilon = 1e-10);
        }
    }

    #[test]
    fn singular_three_by_three_cofactor_is_rejected() {
        let m = DMatrix::from_row_slice(3, 3, &[1.0, 2.0, 3.0, 2.0, 4.0, 6.0, 0.0, 1.0, 1.0]);
        assert!(matches!(cofactor_matrix(&m), Err(Error::SingularMatrix)));
    }

    #[test]
    fn singular_two_by_two_cofactor_is_closed_form() {
        let m = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 4.0]);
        let cof = cofactor_matrix(&m).unwrap();
        assert_abs_diff_eq!(cof[(0, 0)], 4.0);
        assert_abs_diff_eq!(cof[(0, 1)], -2.0);
        assert_abs_diff_eq!(cof[(1, 0)], -2.0);
        assert_abs_diff_eq!(cof[(1, 1)], 1.0);
    }

    #[test]
    fn tv_norm_weights_absolute_densities() {
        let grid = unit_grid(10);
        let densities: Vec<f64> =
            grid.nodes().iter().map(|u| if u[0] < 0.5 { 1.0 } else { -1.0 }).collect();
        let measure = SignedGridMeasure::new(grid, densities).unwrap();
        assert_abs_diff_eq!(measure.tv_norm(), 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(measure.total_mass(), 0.0, epsilon = 1e-12);

        let mut csv = Vec::new();
        measure.write_csv(&mut csv).unwrap();
        let text = String::from_utf8(csv).unwrap();
        assert!(text.starts_with("u1,u2,weight,density"));
        assert_eq!(text.lines().count(), 101);
    }

    #[test]
    fn mismatched_density_count_is_rejected() {
        let grid = unit_grid(4);
        assert!(matches!(
            SignedGridMeasure::new(grid, vec![0.0; 3]),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn pushforward_of_identity_maps_reproduces_the_reference_density() {
        let model = identity_model(0.9);
        let grid = unit_grid(12);
        for z in 0..2 {
            let fields = fields_for(&model, z);
            let image = phi(model.maps(), &fields, &grid).unwrap();
            for d in image.densities() {
                assert_abs_diff_eq!(*d, 1.0, epsilon = 1e-12);
            }
            let reference = reference_on_grid(model.measure(), &grid);
            assert!(image.sub(&reference).unwrap().tv_norm() < 1e-12);
        }
    }

    #[test]
    fn pushforward_matches_the_reference_at_a_curved_truth() {
        let model = curved_model();
        let grid = unit_grid(16);
        for z in 0..2 {
            let fields = fields_for(&model, z);
            let image = phi(model.maps(), &fields, &grid).unwrap();
            let reference = reference_on_grid(model.measure(), &grid);
            let gap = image.sub(&reference).unwrap();
            assert!(gap.max_abs_density() < 1e-6, "node error {}", gap.max_abs_density());
        }
    }

    #[test]
    fn perturbing_the_profile_moves_the_pushforward() {
        let model = identity_model(0.9);
        let grid = unit_grid(12);
        let direction = ridge_swap_direction(2, 0, 0.05).unwrap().normalized(&grid).unwrap();
        let profile = perturbed_profile(model.maps(), &direction, 0.05).unwrap();
        let fields = fields_for(&model, 0);
        let image = phi(&profile, &fields, &grid).unwrap();
        let reference = reference_on_grid(model.measure(), &grid);
        let gap = image.sub(&reference).unwrap().tv_norm();
        assert!(gap > 1e-4, "tv gap {gap}");
    }

    #[test]
    fn derivative_vanishes_along_the_zero_direction() {
        let model = identity_model(0.9);
        let grid = unit_grid(8);
        let zero = TangentDirection::new(vec![
            GradientCombination::zero(2).unwrap(),
            GradientCombination::zero(2).unwrap(),
        ])
        .unwrap();
        let fields = fields_for(&model, 0);
        let (measure, _) = phi_prime(model.maps(), &zero, &fields, &grid).unwrap();
        assert_eq!(measure.max_abs_density(), 0.0);
    }

    #[test]
    fn derivative_of_linear_tangents_is_the_share_weighted_trace() {
        use crate::densities::ConstDensity;
        let model = identity_model(0.9);
        let grid = unit_grid(10);
        let lo = DVector::zeros(2);
        let hi = DVector::from_element(2, 1.0);
        let c = [1.0, -0.5];
        let fields: Vec<DensityField> = (0..2)
            .map(|d| {
                let value = model.share(d, 0).unwrap();
                DensityField::Const(ConstDensity { value, lo: lo.clone(), hi: hi.clone() })
            })
            .collect();
        let components: Vec<GradientCombination> = c
            .iter()
            .map(|&cd| {
                let quad =
                    ConvexPotential::quadratic(DMatrix::identity(2, 2), DVector::zeros(2)).unwrap();
                GradientCombination::new(vec![(cd, quad)]).unwrap()
            })
            .collect();
        let direction = TangentDirection::new(components).unwrap();
        let (measure, mode) = phi_prime(model.maps(), &direction, &fields, &grid).unwrap();
        let expected = 2.0 * (0.9 * c[0] + 0.1 * c[1]);
        assert_eq!(mode, GradientMode::Analytic);
        for d in measure.densities() {
            assert_abs_diff_eq!(*d, expected, epsilon = 1e-12);
        }
    }

    #[test]
    fn piola_residual_is_exactly_zero_for_affine_and_univariate_maps() {
        let model = curved_model();
        let grid = unit_grid(10);
        assert_eq!(piola_residual(&model.maps()[1], &grid, 1e-2).unwrap(), 0.0);

        let line = ReferenceDomain::unit_cube(1).unwrap();
        let line_grid = QuadratureGrid::build(line, 16).unwrap();
        let potential = ConvexPotential::smooth_max(
            vec![DVector::from_element(1, 0.4), DVector::from_element(1, 1.3)],
            vec![0.0, -0.5],
            0.3,
            0.1,
        )
        .unwrap();
        let map = QuantileMap::new(potential, line).unwrap();
        assert_eq!(piola_residual(&map, &line_grid, 1e-2).unwrap(), 0.0);
    }

    #[test]
    fn piola_residual_shrinks_at_second_order() {
        let model = crate::model::example2_model(
            &DVector::from_vec(vec![0.4, -0.2]),
            &DVector::from_vec(vec![0.1, 0.3]),
            true,
            0.9,
        )
        .unwrap();
        let grid = unit_grid(9);
        let map = &model.maps()[1];
        let coarse = piola_residual(map, &grid, 1e-2).unwrap();
        let fine = piola_residual(map, &grid, 5e-3).unwrap();
        assert!(coarse > 1e-10, "residual too small to resolve: {coarse}");
        let ratio = coarse / fine;
        assert!((2.8..=5.2).contains(&ratio), "ratio {ratio}");
    }

    #[test]
    fn expanded_derivative_matches_the_divergence_form() {
        use crate::densities::ConstDensity;
        let model = crate::model::example2_model(
            &DVector::from_vec(vec![0.4, -0.2]),
            &DVector::from_vec(vec![0.1, 0.3]),
            true,
            0.9,
        )
        .unwrap();
        let map = model.maps()[1].clone();
        let lo = DVector::from_element(2, -10.0);
        let hi = DVector::from_element(2, 10.0);
        let field = DensityField::Const(ConstDensity { value: 0.7, lo, hi });
        let root = DMatrix::from_row_slice(2, 2, &[0.9, 0.2, 0.2, 0.6]);
        let quad = ConvexPotential::quadratic(root.transpose() * &root, DVector::from_vec(vec![0.1, -0.2]))
            .unwrap();
        let direction =
            TangentDirection::new(vec![GradientCombination::new(vec![(0.8, quad)]).unwrap()])
                .unwrap();
        let grid = unit_grid(5);
        let (expanded, _) =
            phi_prime(std::slice::from_ref(&map), &direction, std::slice::from_ref(&field), &grid)
                .unwrap();

        // The same derivative written as div(f det (Dq)^{-1} h), evaluated by
        // central differences.
        let flux = |u: &DVector<f64>| -> DVector<f64> {
            let jac = map.jacobian_unchecked(u);
            let det = jac.determinant();
            let h = direction.eval(0, u);
            jac.lu().solve(&h).unwrap() * (det * 0.7)
        };
        let step = 1e-3;
        for (idx, u) in grid.nodes().iter().enumerate() {
            let mut div = 0.0;
            for i in 0..2 {
                let mut up = u.clone();
                up[i] += step;
                let mut down = u.clone();
                down[i] -= step;
                div += (flux(&up)[i] - flux(&down)[i]) / (2.0 * step);
            }
            assert_abs_diff_eq!(div, expanded.densities()[idx], epsilon = 1e-5);
        }
    }

    #[test]
    fn sampled_tangents_are_normalized_symmetric_and_admissible() {
        let model = curved_model();
        let grid = unit_grid(12);
        let batch = sample_tangent(
            model.maps(),
            model.eigen_box(),
            TangentStyle::General,
            DEFAULT_DERIVATIVE_BOUND,
            &grid,
            42,
            6,
        )
        .unwrap();
        assert_eq!(batch.directions.len(), 6);
        assert!(batch.attempts >= 6);
        let probe = DVector::from_vec(vec![0.3, 0.7]);
        for direction in &batch.directions {
            assert_abs_diff_eq!(direction.sup_norm(&grid), 1.0, epsilon = 1e-9);
            for d in 0..2 {
                let dh = direction.jacobian(d, &probe);
                let defect = (&dh - dh.transpose()).abs().max();
                assert!(defect <= 1e-9, "asymmetric tangent jacobian: {defect}");
            }
            let alpha = admissible_radius(model.maps(), direction, model.eigen_box(), &grid);
            assert!(alpha.is_some());
        }
    }

    #[test]
    fn an_unreachable_derivative_bound_rejects_every_candidate() {
        let model = curved_model();
        let grid = unit_grid(8);
        let batch = sample_tangent(
            model.maps(),
            model.eigen_box(),
            TangentStyle::General,
            1e-4,
            &grid,
            7,
            3,
        )
        .unwrap();
        assert!(batch.directions.is_empty());
        assert_eq!(batch.attempts, 120);
        assert_eq!(batch.rejected_derivative, 120);
    }

    #[test]
    fn support_preserving_caps_vanish_at_the_faces() {
        let model = curved_model();
        let grid = unit_grid(12);
        let batch = sample_tangent(
            model.maps(),
            model.eigen_box(),
            TangentStyle::SupportPreserving,
            DEFAULT_DERIVATIVE_BOUND,
            &grid,
            11,
            3,
        )
        .unwrap();
        assert_eq!(batch.directions.len(), 3);
        for direction in &batch.directions {
            for d in 0..2 {
                for t in [0.0, 0.25, 0.5, 0.75, 1.0] {
                    let mut face = DVector::from_vec(vec![0.0, t]);
                    assert!(direction.eval(d, &face)[0].abs() < 5e-4);
                    face[0] = 1.0;
                    assert!(direction.eval(d, &face)[0].abs() < 5e-4);
                    let mut other = DVector::from_vec(vec![t, 0.0]);
                    assert!(direction.eval(d, &other)[1].abs() < 5e-4);
                    other[1] = 1.0;
                    assert!(direction.eval(d, &other)[1].abs() < 5e-4);
                }
            }
        }
    }

    #[test]
    fn first_order_expansion_error_decays_with_the_radius() {
        let model = curved_model();
        let grid = unit_grid(12);
        let fields: Vec<Vec<DensityField>> = (0..2).map(|z| fields_for(&model, z)).collect();
        let batch = sample_tangent(
            model.maps(),
            model.eigen_box(),
            TangentStyle::SupportPreserving,
            DEFAULT_DERIVATIVE_BOUND,
            &grid,
            7,
            3,
        )
        .unwrap();
        assert_eq!(batch.directions.len(), 3);
        for direction in &batch.directions {
            let gap = |eps: f64| -> f64 {
                let mut total = 0.0;
                for z in 0..2 {
                    let profile = perturbed_profile(model.maps(), direction, eps).unwrap();
                    let image = phi(&profile, &fields[z], &grid).unwrap();
                    let base = phi(model.maps(), &fields[z], &grid).unwrap();
                    let (derivative, _) =
                        phi_prime(model.maps(), direction, &fields[z], &grid).unwrap();
                    let secant = image.sub(&base).unwrap();
                    let scaled: Vec<f64> = secant
                        .densities()
                        .iter()
                        .zip(derivative.densities())
                        .map(|(s, d)| s / eps - d)
                        .collect();
                    total +=
                        SignedGridMeasure::new(grid.clone(), scaled).unwrap().tv_norm();
                }
                total
            };
            let coarse = gap(1e-2);
            let fine = gap(1e-3);
            assert!(
                coarse / fine >= 5.0,
                "slope gap shrank only by {} (coarse {coarse}, fine {fine})",
                coarse / fine
            );
        }
    }

    #[test]
    fn probe_value_is_invariant_to_direction_rescaling() {
        let model = curved_model();
        let grid = unit_grid(10);
        let fields: Vec<Vec<DensityField>> = (0..2).map(|z| fields_for(&model, z)).collect();
        let direction = ridge_swap_direction(2, 0, 0.05).unwrap();
        let plain =
            full_rank_probe(model.maps(), &fields, &grid, &[direction.clone()]).unwrap();
        let rescaled =
            full_rank_probe(model.maps(), &fields, &grid, &[direction.scaled(3.7)]).unwrap();
        assert_relative_eq!(plain.min_value, rescaled.min_value, epsilon = 1e-12);
        assert!(plain.min_value > 1e-3);
    }

    #[test]
    fn degenerate_instrument_kills_the_swap_direction() {
        let degenerate = identity_model(0.5);
        let grid = unit_grid(12);
        let direction = ridge_swap_direction(2, 0, 0.05).unwrap().normalized(&grid).unwrap();
        let fields: Vec<Vec<DensityField>> =
            (0..2).map(|z| fields_for(&degenerate, z)).collect();
        let report = full_rank_probe(degenerate.maps(), &fields, &grid, &[direction.clone()])
            .unwrap();
        assert!(report.min_value < 1e-8, "flat direction leaked mass {}", report.min_value);

        let informative = identity_model(0.9);
        let fields: Vec<Vec<DensityField>> =
            (0..2).map(|z| fields_for(&informative, z)).collect();
        let report =
            full_rank_probe(informative.maps(), &fields, &grid, &[direction]).unwrap();
        assert!(report.min_value > 1e-3);
    }

    #[test]
    fn finite_difference_gradients_are_disclosed() {
        let model = crate::model::example2_model(
            &DVector::from_vec(vec![0.4, -0.2]),
            &DVector::from_vec(vec![0.1, 0.3]),
            true,
            0.9,
        )
        .unwrap();
        let grid = unit_grid(6);
        let direction = ridge_swap_direction(2, 0, 0.05).unwrap();
        let fields = fields_for(&model, 0);
        let (_, mode) = phi_prime(model.maps(), &direction, &fields, &grid).unwrap();
        assert_eq!(mode, GradientMode::FiniteDifference);
    }

    #[test]
    fn conormals_point_out_of_the_image() {
        let identity = identity_model(0.9);
        let min = conormal_min_alignment(&identity.maps()[0], 8).unwrap();
        assert!(min > 0.3, "identity alignment {min}");

        let curved = crate::model::example2_model(
            &DVector::from_vec(vec![0.4, -0.2]),
            &DVector::from_vec(vec![0.1, 0.3]),
            true,
            0.9,
        )
        .unwrap();
        for map in curved.maps() {
            let min = conormal_min_alignment(map, 12).unwrap();
            assert!(min > 0.0, "curved alignment {min}");
        }
    }
}
