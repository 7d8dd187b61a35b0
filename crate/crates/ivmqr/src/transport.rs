//! Vector quantile maps as gradients of convex potentials.
//!
//! A map `q = grad(phi)` with convex `phi` is cyclically monotone, and on
//! the interior of the reference domain it is a bijection onto its image
//! whenever its Jacobian (the Hessian of `phi`) stays positive definite.
//! Inversion goes through the Legendre transform: `q^{-1}(y)` maximizes
//! `u'y - phi(u)` over the domain, solved here by projected ascent with
//! Newton directions and backtracking.

use crate::assignment::{min_cost_assignment, sinkhorn_plan};
use crate::domain::{DomainKind, QuadratureGrid, ReferenceDomain};
use crate::error::{Error, Result};
use crate::potential::ConvexPotential;
use nalgebra::{DMatrix, DVector};
use std::io::Write;

/// Anything that behaves like a differentiable map on the reference domain.
///
/// Implemented by [`QuantileMap`] and by perturbed maps built from tangent
/// directions; callers are responsible for passing points inside the domain.
pub trait MapLike {
    fn dim(&self) -> usize;
    fn eval_unchecked(&self, u: &DVector<f64>) -> DVector<f64>;
    fn jacobian_unchecked(&self, u: &DVector<f64>) -> DMatrix<f64>;
}

/// Options for Legendre inversion.
#[derive(Debug, Clone, Copy)]
pub struct InvertOptions {
    /// Convergence threshold on the gradient norm of the dual objective.
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for InvertOptions {
    fn default() -> Self {
        Self { tol: 1e-10, max_iter: 500 }
    }
}

/// Residual norm accepted by inversion postconditions.
const INVERT_ACCEPT: f64 = 1e-8;

/// Gradient-of-convex-potential map on a reference domain.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantileMap {
    potential: ConvexPotential,
    domain: ReferenceDomain,
    image_lo: DVector<f64>,
    image_hi: DVector<f64>,
    image_exact: bool,
}

impl QuantileMap {
    pub fn new(potential: ConvexPotential, domain: ReferenceDomain) -> Result<Self> {
        if potential.dim() != domain.dim() {
            return Err(Error::DimensionMismatch {
                expected: domain.dim(),
                got: potential.dim(),
            });
        }
        let (image_lo, image_hi, image_exact) = image_bounds(&potential, &domain);
        Ok(Self { potential, domain, image_lo, image_hi, image_exact })
    }

    pub fn potential(&self) -> &ConvexPotential {
        &self.potential
    }

    pub fn domain(&self) -> &ReferenceDomain {
        &self.domain
    }

    /// Axis-aligned bounding box of the image (exact for affine maps,
    /// padded sweep estimate otherwise).
    pub fn image_box(&self) -> (&DVector<f64>, &DVector<f64>) {
        (&self.image_lo, &self.image_hi)
    }

    /// True when the map is affine, i.e. backed by a quadratic potential.
    pub fn is_affine(&self) -> bool {
        matches!(self.potential, ConvexPotential::Quadratic(_))
    }

    /// Evaluates the map; errors outside the domain.
    pub fn eval(&self, u: &DVector<f64>) -> Result<DVector<f64>> {
        if !self.domain.contains(u) {
            return Err(Error::DomainViolation);
        }
        Ok(self.potential.gradient(u))
    }

    /// Jacobian of the map; errors outside the domain.
    pub fn jacobian(&self, u: &DVector<f64>) -> Result<DMatrix<f64>> {
        if !self.domain.contains(u) {
            return Err(Error::DomainViolation);
        }
        Ok(self.potential.hessian(u))
    }

    /// Jacobian together with a flag warning that `u` sits on the boundary,
    /// where the derivative is only one-sided.
    pub fn jacobian_checked(&self, u: &DVector<f64>) -> Result<(DMatrix<f64>, bool)> {
        let jac = self.jacobian(u)?;
        let on_boundary = !self.domain.is_interior(u, 1e-12);
        Ok((jac, on_boundary))
    }

    /// Inverts the map at `y` by maximizing `u'y - phi(u)` over the domain.
    pub fn legendre_invert(&self, y: &DVector<f64>, opts: InvertOptions) -> Result<DVector<f64>> {
        if y.len() != self.domain.dim() {
            return Err(Error::DimensionMismatch { expected: self.domain.dim(), got: y.len() });
        }
        // Quick reject against the image bounding box.
        let pad = if self.image_exact { 1e-9 } else { 0.0 };
        for j in 0..y.len() {
            if y[j] < self.image_lo[j] - pad || y[j] > self.image_hi[j] + pad {
                return Err(Error::NoPreimage);
            }
        }
        // Closed-form path for invertible affine maps.
        if let ConvexPotential::Quadratic(q) = &self.potential {
            if let Some(chol) = q.matrix().clone().cholesky() {
                let u = chol.solve(&(y - q.shift()));
                if self.domain.contains(&self.domain.project(&u)) && {
                    let proj = self.domain.project(&u);
                    (&u - &proj).norm() < 1e-12
                } {
                    return Ok(self.domain.project(&u));
                }
                // Fall through: the unconstrained solution leaves the domain.
            }
        }
        let mut u = domain_center(&self.domain);
        let mut residual = y - self.potential.gradient(&u);
        let mut dead_iters = 0usize;
        for _ in 0..opts.max_iter {
            if residual.norm() <= opts.tol {
                return Ok(u);
            }
            let hess = self.potential.hessian(&u);
            let newton = hess
                .clone()
                .cholesky()
                .map(|ch| ch.solve(&residual))
                .unwrap_or_else(|| residual.clone());
            let before = residual.norm();
            let mut advanced = false;
            for dir in [newton, residual.clone()] {
                let mut step = 1.0;
                while step > 1e-9 {
                    let cand = self.domain.project(&(&u + &dir * step));
                    let cand_res = y - self.potential.gradient(&cand);
                    if cand_res.norm() < residual.norm() * (1.0 - 1e-4 * step) {
                        u = cand;
                        residual = cand_res;
                        advanced = true;
                        break;
                    }
                    step *= 0.5;
                }
                if advanced {
                    break;
                }
            }
            // Count iterations with only numerically dead progress; two in a
            // row means the iterate is pinned against the boundary.
            if advanced && (before - residual.norm()) / before.max(1e-300) < 1e-10 {
                dead_iters += 1;
            } else if advanced {
                dead_iters = 0;
            }
            if !advanced || dead_iters >= 2 {
                // Stalled at a constrained maximum: y has no preimage in U.
                return if residual.norm() <= INVERT_ACCEPT {
                    Ok(u)
                } else {
                    Err(Error::NoPreimage)
                };
            }
        }
        if residual.norm() <= INVERT_ACCEPT {
            Ok(u)
        } else {
            Err(Error::NoConvergence(format!(
                "legendre inversion residual {:.3e} after {} iterations",
                residual.norm(),
                opts.max_iter
            )))
        }
    }

    /// Class membership of this map for the given eigenvalue box.
    pub fn class_membership(
        &self,
        grid: &QuadratureGrid,
        lambda_lo: f64,
        lambda_hi: f64,
    ) -> Result<ClassReport> {
        check_class_membership(self, grid, lambda_lo, lambda_hi)
    }

    /// Round-trip and injectivity diagnostics on a grid.
    pub fn bijectivity_probe(&self, grid: &QuadratureGrid) -> Result<BijectivityReport> {
        if grid.domain() != &self.domain {
            return Err(Error::InvalidParameter("grid domain differs from map domain".into()));
        }
        let opts = InvertOptions::default();
        let mut max_round_trip = 0.0f64;
        let mut images = Vec::with_capacity(grid.len());
        for node in grid.nodes() {
            let y = self.potential.gradient(node);
            match self.legendre_invert(&y, opts) {
                Ok(back) => {
                    max_round_trip = max_round_trip.max((node - &back).abs().max());
                }
                Err(_) => {
                    max_round_trip = f64::INFINITY;
                }
            }
            images.push(y);
        }
        let mut min_separation = f64::INFINITY;
        let mut colliding = None;
        let collision_tol = 1e-9 * self.domain.diameter().max(1.0);
        for i in 0..images.len() {
            for j in (i + 1)..images.len() {
                let sep = (&images[i] - &images[j]).norm();
                if sep < min_separation {
                    min_separation = sep;
                    if sep < collision_tol {
                        colliding = Some((i, j));
                    }
                }
            }
        }
        let injective = colliding.is_none();
        Ok(BijectivityReport {
            max_round_trip,
            min_image_separation: min_separation,
            injective,
            colliding,
            pass: injective && max_round_trip < 1e-6,
        })
    }
}

impl MapLike for QuantileMap {
    fn dim(&self) -> usize {
        self.domain.dim()
    }

    fn eval_unchecked(&self, u: &DVector<f64>) -> DVector<f64> {
        self.potential.gradient(u)
    }

    fn jacobian_unchecked(&self, u: &DVector<f64>) -> DMatrix<f64> {
        self.potential.hessian(u)
    }
}

fn domain_center(domain: &ReferenceDomain) -> DVector<f64> {
    match domain.kind() {
        DomainKind::UnitCube => DVector::from_element(domain.dim(), 0.5),
        DomainKind::UnitBall => DVector::zeros(domain.dim()),
    }
}

/// Bounding box of the image; exact via corner evaluation for affine maps,
/// otherwise a padded lattice sweep.
fn image_bounds(
    potential: &ConvexPotential,
    domain: &ReferenceDomain,
) -> (DVector<f64>, DVector<f64>, bool) {
    let p = domain.dim();
    let mut lo = DVector::from_element(p, f64::INFINITY);
    let mut hi = DVector::from_element(p, f64::NEG_INFINITY);
    let mut absorb = |y: DVector<f64>| {
        for j in 0..p {
            lo[j] = lo[j].min(y[j]);
            hi[j] = hi[j].max(y[j]);
        }
    };
    let affine = matches!(potential, ConvexPotential::Quadratic(_));
    match (domain.kind(), affine) {
        (DomainKind::UnitCube, true) => {
            // Each image coordinate is affine in u, so extremes sit at corners.
            for mask in 0..(1usize << p) {
                let corner = DVector::from_fn(p, |j, _| ((mask >> j) & 1) as f64);
                absorb(potential.gradient(&corner));
            }
            (lo, hi, true)
        }
        (DomainKind::UnitCube, false) => {
            let res: usize = if p <= 2 { 17 } else { 9 };
            let n = res.pow(p as u32);
            for flat in 0..n {
                let mut rem = flat;
                let u = DVector::from_fn(p, |_, _| {
                    let i = rem % res;
                    rem /= res;
                    i as f64 / (res - 1) as f64
                });
                absorb(potential.gradient(&u));
            }
            pad_box(&mut lo, &mut hi);
            (lo, hi, false)
        }
        (DomainKind::UnitBall, _) => {
            for ir in 0..=12 {
                let r = ir as f64 / 12.0;
                for ia in 0..48 {
                    let theta = 2.0 * std::f64::consts::PI * ia as f64 / 48.0;
                    let u = if p == 1 {
                        DVector::from_element(1, r * if ia % 2 == 0 { 1.0 } else { -1.0 })
                    } else {
                        let mut u = DVector::zeros(p);
                        u[0] = r * theta.cos();
                        u[1] = r * theta.sin();
                        u
                    };
                    absorb(potential.gradient(&u));
                }
            }
            pad_box(&mut lo, &mut hi);
            (lo, hi, false)
        }
    }
}

fn pad_box(lo: &mut DVector<f64>, hi: &mut DVector<f64>) {
    for j in 0..lo.len() {
        let pad = 0.1 * (hi[j] - lo[j]).abs() + 1e-6;
        lo[j] -= pad;
        hi[j] += pad;
    }
}

/// Result of a grid eigenvalue sweep against an admissibility box.
#[derive(Debug, Clone, serde::Serialize)]
pub struct ClassReport {
    pub lambda_lo: f64,
    pub lambda_hi: f64,
    pub min_eigen: f64,
    pub max_eigen: f64,
    pub argmin_node: usize,
    pub argmax_node: usize,
    pub pass: bool,
}

/// Checks that the map Jacobian stays strictly inside the eigenvalue box
/// at every grid node.
pub fn check_class_membership(
    map: &dyn MapLike,
    grid: &QuadratureGrid,
    lambda_lo: f64,
    lambda_hi: f64,
) -> Result<ClassReport> {
    if !(0.0 < lambda_lo && lambda_lo < lambda_hi) {
        return Err(Error::InvalidParameter(
            "eigenvalue box requires 0 < lambda_lo < lambda_hi".into(),
        ));
    }
    if grid.is_empty() {
        return Err(Error::EmptyInput("empty quadrature grid".into()));
    }
    let mut min_eigen = f64::INFINITY;
    let mut max_eigen = f64::NEG_INFINITY;
    let (mut argmin, mut argmax) = (0usize, 0usize);
    for (idx, node) in grid.nodes().iter().enumerate() {
        let jac = map.jacobian_unchecked(node);
        let sym = (&jac + jac.transpose()) * 0.5;
        let eigen = sym.symmetric_eigen().eigenvalues;
        let lo = eigen.min();
        let hi = eigen.max();
        if lo < min_eigen {
            min_eigen = lo;
            argmin = idx;
        }
        if hi > max_eigen {
            max_eigen = hi;
            argmax = idx;
        }
    }
    Ok(ClassReport {
        lambda_lo,
        lambda_hi,
        min_eigen,
        max_eigen,
        argmin_node: argmin,
        argmax_node: argmax,
        pass: min_eigen > lambda_lo && max_eigen < lambda_hi,
    })
}

/// Summary of cyclical-monotonicity sums over supplied cycles.
#[derive(Debug, Clone, serde::Serialize)]
pub struct CycleReport {
    pub cycles: usize,
    pub trivial_cycles: usize,
    pub min_sum: f64,
    /// All non-trivial cycles produced a strictly positive sum.
    pub strict: bool,
}

/// Evaluates `sum_i u^{i+1} . (q(u^{i+1}) - q(u^i))` over closed cycles.
///
/// Each cycle must list its points with the first repeated at the end.
pub fn cyclical_monotonicity_check(
    map: &dyn MapLike,
    domain: &ReferenceDomain,
    cycles: &[Vec<DVector<f64>>],
) -> Result<CycleReport> {
    if cycles.is_empty() {
        return Err(Error::EmptyInput("no cycles supplied".into()));
    }
    let mut min_sum = f64::INFINITY;
    let mut trivial = 0usize;
    let mut strict = true;
    for cycle in cycles {
        if cycle.len() < 3 {
            return Err(Error::InvalidCycle("a cycle needs at least two distinct slots".into()));
        }
        let first = &cycle[0];
        let last = &cycle[cycle.len() - 1];
        if (first - last).norm() > 1e-12 {
            return Err(Error::InvalidCycle("cycle is not closed".into()));
        }
        for u in cycle {
            if !domain.contains(u) {
                return Err(Error::InvalidCycle("cycle point outside the domain".into()));
            }
        }
        let is_trivial = cycle.iter().all(|u| (u - first).norm() <= 1e-15);
        let images: Vec<DVector<f64>> = cycle.iter().map(|u| map.eval_unchecked(u)).collect();
        let mut total = 0.0;
        for i in 0..cycle.len() - 1 {
            total += cycle[i + 1].dot(&(&images[i + 1] - &images[i]));
        }
        min_sum = min_sum.min(total);
        if is_trivial {
            trivial += 1;
        } else if total <= 1e-12 {
            strict = false;
        }
    }
    Ok(CycleReport { cycles: cycles.len(), trivial_cycles: trivial, min_sum, strict })
}

/// Bijectivity diagnostics from a grid probe.
#[derive(Debug, Clone, serde::Serialize)]
pub struct BijectivityReport {
    pub max_round_trip: f64,
    pub min_image_separation: f64,
    pub injective: bool,
    pub colliding: Option<(usize, usize)>,
    pub pass: bool,
}

/// How a discrete plan couples the two clouds.
#[derive(Debug, Clone, PartialEq)]
pub enum PlanKind {
    /// Exact permutation: source `i` goes to `target[assignment[i]]`.
    Assignment(Vec<usize>),
    /// Entropic coupling matrix with uniform marginals.
    Coupling(DMatrix<f64>),
}

/// Discrete optimal transport plan between equal-size samples.
#[derive(Debug, Clone)]
pub struct DiscreteTransportPlan {
    pub source: Vec<DVector<f64>>,
    pub target: Vec<DVector<f64>>,
    pub kind: PlanKind,
    /// Mass-weighted squared-distance transport cost.
    pub cost: f64,
}

impl DiscreteTransportPlan {
    /// Writes rows of (source index, target index, weight, cost share).
    pub fn write_csv(&self, out: &mut impl Write) -> Result<()> {
        writeln!(out, "source,target,weight,cost")?;
        let n = self.source.len();
        match &self.kind {
            PlanKind::Assignment(assignment) => {
                let w = 1.0 / n as f64;
                for (i, &j) in assignment.iter().enumerate() {
                    let c = (&self.source[i] - &self.target[j]).norm_squared() * w;
                    writeln!(out, "{i},{j},{w},{c}")?;
                }
            }
            PlanKind::Coupling(plan) => {
                for i in 0..n {
                    for j in 0..n {
                        let w = plan[(i, j)];
                        if w > 1e-12 {
                            let c = (&self.source[i] - &self.target[j]).norm_squared() * w;
                            writeln!(out, "{i},{j},{w},{c}")?;
                        }
                    }
                }
            }
        }
        Ok(())
    }
}

/// Above this size the sample-based map construction switches from the
/// exact assignment solver to entropic regularization.
pub const EXACT_ASSIGNMENT_LIMIT: usize = 2000;

/// Discrete Monge coupling between samples under squared-distance cost.
pub fn brenier_from_samples(
    source: &[DVector<f64>],
    target: &[DVector<f64>],
) -> Result<DiscreteTransportPlan> {
    brenier_with_limit(source, target, EXACT_ASSIGNMENT_LIMIT)
}

/// Same as [`brenier_from_samples`] with an explicit exact-solver cutoff.
pub fn brenier_with_limit(
    source: &[DVector<f64>],
    target: &[DVector<f64>],
    exact_limit: usize,
) -> Result<DiscreteTransportPlan> {
    let n = source.len();
    if n == 0 {
        return Err(Error::EmptyInput("empty sample".into()));
    }
    if target.len() != n {
        return Err(Error::DimensionMismatch { expected: n, got: target.len() });
    }
    let p = source[0].len();
    if source.iter().chain(target.iter()).any(|x| x.len() != p) {
        return Err(Error::DimensionMismatch { expected: p, got: 0 });
    }
    let cost = DMatrix::from_fn(n, n, |i, j| (&source[i] - &target[j]).norm_squared());
    if n <= exact_limit {
        let (assignment, total) = min_cost_assignment(&cost)?;
        Ok(DiscreteTransportPlan {
            source: source.to_vec(),
            target: target.to_vec(),
            kind: PlanKind::Assignment(assignment),
            cost: total / n as f64,
        })
    } else {
        let mean_cost = cost.iter().sum::<f64>() / (n * n) as f64;
        let epsilon = 0.01 * mean_cost.max(1e-12);
        let outcome = sinkhorn_plan(&cost, epsilon, 10_000, 1e-7)?;
        Ok(DiscreteTransportPlan {
            source: source.to_vec(),
            target: target.to_vec(),
            kind: PlanKind::Coupling(outcome.coupling),
            cost: outcome.cost,
        })
    }
}
