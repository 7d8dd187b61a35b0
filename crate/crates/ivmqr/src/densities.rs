//! Conditional outcome densities `f_{d,z}`: exact change-of-variables
//! evaluation under the structural model, and product-kernel estimation
//! with boundary reflection for the data-driven path.
//!
//! The exact density at `y` inverts the treatment map, reads off the
//! reference density and the cell-conditional treatment probability at the
//! preimage rank, and divides by the Jacobian determinant. It is only
//! available under rank invariance, where the realized rank pins down the
//! full latent vector.

use crate::domain::ReferenceMeasure;
use crate::error::{Error, Result};
use crate::model::{CellPartition, ObservedSample, RankCoupling, StructuralModel};
use crate::transport::{InvertOptions, MapLike, QuantileMap};
use nalgebra::DVector;

/// Chi-square critical value with 15 degrees of freedom at the 99.9% level.
pub const CHI2_CRIT_15_DOF_999: f64 = 37.697;

/// Relative cutoff used when recovering the support from density values.
pub const SUPPORT_THRESHOLD_FRAC: f64 = 1e-3;

/// How a density gradient is produced.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GradientMode {
    Analytic,
    FiniteDifference,
}

/// Exact conditional density of `Y | D = d, Z = z` under a structural model.
#[derive(Debug, Clone)]
pub struct ExactDensity {
    map: QuantileMap,
    measure: ReferenceMeasure,
    partition: CellPartition,
    /// `P(D = d | Z = z, cell)` for each cell of the partition.
    cell_probs: Vec<f64>,
}

impl ExactDensity {
    pub fn eval(&self, y: &DVector<f64>) -> Result<f64> {
        match self.map.legendre_invert(y, InvertOptions::default()) {
            Ok(u) => {
                let det = self.map.jacobian_unchecked(&u).determinant();
                if det <= 1e-14 {
                    return Err(Error::SingularMatrix);
                }
                let pi = self.cell_probs[self.partition.cell_index(&u)];
                Ok(self.measure.density(&u) * pi / det)
            }
            Err(Error::NoPreimage) => Ok(0.0),
            Err(e) => Err(e),
        }
    }

    /// Total mass, i.e. the model-implied share `P(D = d | Z = z)`.
    pub fn total_mass(&self) -> Result<f64> {
        let masses = self.partition.cell_masses(&self.measure)?;
        Ok(masses.iter().zip(&self.cell_probs).map(|(m, p)| m * p).sum())
    }

    /// The density is flat wherever the map is affine, the reference measure
    /// is uniform, and the treatment table does not vary across cells.
    fn is_flat(&self) -> bool {
        self.map.is_affine()
            && self.measure.kind() == crate::domain::MeasureKind::Uniform
            && self.cell_probs.windows(2).all(|w| (w[0] - w[1]).abs() < 1e-15)
    }
}

/// Product-Epanechnikov kernel estimate with reflection at the sample box.
///
/// Points are kept sorted along the first axis so evaluation only visits
/// the kernels whose axis-0 window (direct or reflected) covers the query.
#[derive(Debug, Clone)]
pub struct KernelDensity {
    points: Vec<DVector<f64>>,
    bandwidths: DVector<f64>,
    lo: DVector<f64>,
    hi: DVector<f64>,
    /// Empirical share `P(D = d | Z = z)` scaling the estimate.
    share: f64,
}

fn epan(t: f64) -> f64 {
    if t.abs() < 1.0 {
        0.75 * (1.0 - t * t)
    } else {
        0.0
    }
}

fn epan_deriv(t: f64) -> f64 {
    if t.abs() < 1.0 {
        -1.5 * t
    } else {
        0.0
    }
}

impl KernelDensity {
    /// Per-axis kernel factor with reflection about both box faces.
    fn axis_factor(&self, j: usize, y: f64, x: f64) -> f64 {
        let h = self.bandwidths[j];
        let direct = epan((y - x) / h);
        let low = epan((y - (2.0 * self.lo[j] - x)) / h);
        let high = epan((y - (2.0 * self.hi[j] - x)) / h);
        (direct + low + high) / h
    }

    fn axis_factor_deriv(&self, j: usize, y: f64, x: f64) -> f64 {
        let h = self.bandwidths[j];
        let direct = epan_deriv((y - x) / h);
        let low = epan_deriv((y - (2.0 * self.lo[j] - x)) / h);
        let high = epan_deriv((y - (2.0 * self.hi[j] - x)) / h);
        (direct + low + high) / (h * h)
    }

    /// Index ranges of points whose axis-0 kernel (direct or reflected)
    /// can be nonzero at `y0`. Points are sorted along axis 0.
    fn candidate_ranges(&self, y0: f64) -> Vec<(usize, usize)> {
        let h = self.bandwidths[0];
        let centers = [y0, 2.0 * self.lo[0] - y0, 2.0 * self.hi[0] - y0];
        let locate = |x: f64| -> usize {
            self.points
                .partition_point(|pt| pt[0] < x)
        };
        let mut ranges: Vec<(usize, usize)> = centers
            .iter()
            .map(|&c| (locate(c - h), locate(c + h)))
            .filter(|&(a, b)| a < b)
            .collect();
        ranges.sort_unstable();
        let mut merged: Vec<(usize, usize)> = Vec::new();
        for (a, b) in ranges {
            match merged.last_mut() {
                Some(last) if a <= last.1 => last.1 = last.1.max(b),
                _ => merged.push((a, b)),
            }
        }
        merged
    }

    pub fn eval(&self, y: &DVector<f64>) -> f64 {
        let p = y.len();
        if (0..p).any(|j| y[j] < self.lo[j] || y[j] > self.hi[j]) {
            return 0.0;
        }
        let mut acc = 0.0;
        for (a, b) in self.candidate_ranges(y[0]) {
            for x in &self.points[a..b] {
                let mut term = 1.0;
                for j in 0..p {
                    term *= self.axis_factor(j, y[j], x[j]);
                    if term == 0.0 {
                        break;
                    }
                }
                acc += term;
            }
        }
        self.share * acc / self.points.len() as f64
    }

    pub fn gradient(&self, y: &DVector<f64>) -> DVector<f64> {
        let p = y.len();
        if (0..p).any(|j| y[j] < self.lo[j] || y[j] > self.hi[j]) {
            return DVector::zeros(p);
        }
        let mut grad = DVector::zeros(p);
        for (a, b) in self.candidate_ranges(y[0]) {
            for x in &self.points[a..b] {
                let factors: Vec<f64> =
                    (0..p).map(|j| self.axis_factor(j, y[j], x[j])).collect();
                for j in 0..p {
                    let mut term = self.axis_factor_deriv(j, y[j], x[j]);
                    for (l, f) in factors.iter().enumerate() {
                        if l != j {
                            term *= f;
                        }
                    }
                    grad[j] += term;
                }
            }
        }
        grad / self.points.len() as f64 * self.share
    }

    /// Reflection folds every kernel's mass back into the box, so the total
    /// mass equals the share exactly.
    pub fn total_mass(&self) -> f64 {
        self.share
    }

    pub fn bandwidths(&self) -> &DVector<f64> {
        &self.bandwidths
    }
}

/// Constant density on a box (zero outside).
#[derive(Debug, Clone)]
pub struct ConstDensity {
    pub value: f64,
    pub lo: DVector<f64>,
    pub hi: DVector<f64>,
}

/// A conditional density `f_{d,z}` that can be evaluated and differentiated.
#[derive(Debug, Clone)]
pub enum DensityField {
    Exact(ExactDensity),
    Kernel(KernelDensity),
    Const(ConstDensity),
}

impl DensityField {
    pub fn eval(&self, y: &DVector<f64>) -> Result<f64> {
        match self {
            Self::Exact(f) => f.eval(y),
            Self::Kernel(f) => Ok(f.eval(y)),
            Self::Const(f) => {
                let inside = (0..y.len()).all(|j| f.lo[j] <= y[j] && y[j] <= f.hi[j]);
                Ok(if inside { f.value } else { 0.0 })
            }
        }
    }

    /// Spatial gradient of the density at `y`.
    ///
    /// Kernel and flat exact densities are differentiated in closed form;
    /// curved exact densities fall back to central differences on `eval`,
    /// which [`DensityField::gradient_mode`] discloses.
    pub fn gradient(&self, y: &DVector<f64>) -> Result<DVector<f64>> {
        match self {
            Self::Kernel(f) => Ok(f.gradient(y)),
            Self::Const(_) => Ok(DVector::zeros(y.len())),
            Self::Exact(f) => {
                if f.is_flat() {
                    return Ok(DVector::zeros(y.len()));
                }
                let step = 1e-5;
                let mut grad = DVector::zeros(y.len());
                for j in 0..y.len() {
                    let mut hi = y.clone();
                    hi[j] += step;
                    let mut lo = y.clone();
                    lo[j] -= step;
                    grad[j] = (f.eval(&hi)? - f.eval(&lo)?) / (2.0 * step);
                }
                Ok(grad)
            }
        }
    }

    pub fn gradient_mode(&self) -> GradientMode {
        match self {
            Self::Kernel(_) | Self::Const(_) => GradientMode::Analytic,
            Self::Exact(f) => {
                if f.is_flat() {
                    GradientMode::Analytic
                } else {
                    GradientMode::FiniteDifference
                }
            }
        }
    }

    pub fn total_mass(&self) -> Result<f64> {
        match self {
            Self::Exact(f) => f.total_mass(),
            Self::Kernel(f) => Ok(f.total_mass()),
            Self::Const(f) => {
                let vol: f64 = (0..f.lo.len()).map(|j| f.hi[j] - f.lo[j]).product();
                Ok(f.value * vol)
            }
        }
    }

    /// Axis-aligned box outside which the density vanishes.
    pub fn support_box(&self) -> (DVector<f64>, DVector<f64>) {
        match self {
            Self::Exact(f) => {
                let (lo, hi) = f.map.image_box();
                (lo.clone(), hi.clone())
            }
            Self::Kernel(f) => (f.lo.clone(), f.hi.clone()),
            Self::Const(f) => (f.lo.clone(), f.hi.clone()),
        }
    }
}

/// Exact conditional density of `Y | D = d, Z = z` under rank invariance.
pub fn exact_density(model: &StructuralModel, d: usize, z: usize) -> Result<DensityField> {
    if model.coupling() != RankCoupling::Invariance {
        return Err(Error::UnsupportedCoupling);
    }
    if d >= model.treatments() || z >= model.instrument_law().len() {
        return Err(Error::InvalidParameter(format!("no conditional (d={d}, z={z})")));
    }
    Ok(DensityField::Exact(ExactDensity {
        map: model.map(d).clone(),
        measure: *model.measure(),
        partition: model.assignment().partition.clone(),
        cell_probs: model.cell_shares(d, z),
    }))
}

/// Kernel estimate of `f_{d,z}` from the `(D = d, Z = z)` subsample.
///
/// Bandwidths follow the per-axis rule `sd_j * n^(-1/(p+4))`; kernels are
/// reflected about the subsample min/max box so no mass leaks outside it.
pub fn estimate_density(sample: &ObservedSample, d: usize, z: usize) -> Result<DensityField> {
    let p = sample.dim();
    let rows = sample.subsample_indices(d, z);
    let n_z = sample.instruments.iter().filter(|&&zi| zi == z).count();
    if rows.len() < 8 {
        return Err(Error::EmptyInput(format!(
            "only {} rows with d={d}, z={z}; need at least 8",
            rows.len()
        )));
    }
    let mut points: Vec<DVector<f64>> =
        rows.iter().map(|&i| sample.outcomes[i].clone()).collect();
    points.sort_by(|a, b| a[0].partial_cmp(&b[0]).unwrap());
    let n = points.len() as f64;
    let share = n / n_z as f64;
    let mut lo = DVector::from_element(p, f64::INFINITY);
    let mut hi = DVector::from_element(p, f64::NEG_INFINITY);
    let mut mean = DVector::zeros(p);
    for x in &points {
        for j in 0..p {
            lo[j] = lo[j].min(x[j]);
            hi[j] = hi[j].max(x[j]);
        }
        mean += x;
    }
    mean /= n;
    let mut sd: DVector<f64> = DVector::zeros(p);
    for x in &points {
        for j in 0..p {
            sd[j] += (x[j] - mean[j]).powi(2);
        }
    }
    let rate = n.powf(-1.0 / (p as f64 + 4.0));
    let bandwidths = DVector::from_fn(p, |j, _| (sd[j] / (n - 1.0)).sqrt() * rate);
    for j in 0..p {
        if bandwidths[j] <= 0.0 {
            return Err(Error::EmptySupport);
        }
        if bandwidths[j] > hi[j] - lo[j] {
            return Err(Error::InvalidParameter(
                "bandwidth exceeds the sample range; reflection would double-fold".into(),
            ));
        }
    }
    Ok(DensityField::Kernel(KernelDensity { points, bandwidths, lo, hi, share }))
}

/// Midpoint grid over an axis-aligned box: `res^p` nodes, each carrying the
/// same weight `vol / res^p`.
pub fn box_midpoint_grid(
    lo: &DVector<f64>,
    hi: &DVector<f64>,
    res: usize,
) -> Result<(Vec<DVector<f64>>, f64)> {
    let p = lo.len();
    if res == 0 {
        return Err(Error::InvalidParameter("grid resolution must be positive".into()));
    }
    let vol: f64 = (0..p).map(|j| hi[j] - lo[j]).product();
    if vol <= 0.0 {
        return Err(Error::EmptySupport);
    }
    let count = res.pow(p as u32);
    let mut nodes = Vec::with_capacity(count);
    let mut index = vec![0usize; p];
    loop {
        let node = DVector::from_fn(p, |j, _| {
            lo[j] + (hi[j] - lo[j]) * (index[j] as f64 + 0.5) / res as f64
        });
        nodes.push(node);
        // Mixed-radix increment, last axis fastest.
        let mut axis = p;
        loop {
            if axis == 0 {
                return Ok((nodes, vol / count as f64));
            }
            axis -= 1;
            index[axis] += 1;
            if index[axis] < res {
                break;
            }
            index[axis] = 0;
        }
    }
}

/// Recovered support of a density field.
#[derive(Debug, Clone, serde::Serialize)]
pub enum SupportEstimate {
    Interval { lo: f64, hi: f64 },
    Hull { vertices: Vec<Vec<f64>>, area: f64 },
}

/// Thresholds the field at a fraction of its maximum on a grid and returns
/// the interval (p = 1) or convex hull (p = 2) of the retained nodes.
pub fn identify_support(field: &DensityField, res: usize) -> Result<SupportEstimate> {
    let (lo, hi) = field.support_box();
    let p = lo.len();
    if p > 2 {
        return Err(Error::UnsupportedDomain(
            "support recovery is implemented for p <= 2".into(),
        ));
    }
    let (nodes, _) = box_midpoint_grid(&lo, &hi, res)?;
    let values: Vec<f64> = nodes.iter().map(|y| field.eval(y)).collect::<Result<_>>()?;
    let max_v = values.iter().cloned().fold(0.0f64, f64::max);
    if max_v <= 0.0 {
        return Err(Error::EmptySupport);
    }
    let cutoff = SUPPORT_THRESHOLD_FRAC * max_v;
    let kept: Vec<&DVector<f64>> = nodes
        .iter()
        .zip(&values)
        .filter(|(_, &v)| v >= cutoff)
        .map(|(n, _)| n)
        .collect();
    if kept.is_empty() {
        return Err(Error::EmptySupport);
    }
    if p == 1 {
        let xs: Vec<f64> = kept.iter().map(|n| n[0]).collect();
        Ok(SupportEstimate::Interval {
            lo: xs.iter().cloned().fold(f64::INFINITY, f64::min),
            hi: xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max),
        })
    } else {
        let pts: Vec<(f64, f64)> = kept.iter().map(|n| (n[0], n[1])).collect();
        let hull = convex_hull(&pts);
        let area = polygon_area(&hull);
        Ok(SupportEstimate::Hull {
            vertices: hull.into_iter().map(|(x, y)| vec![x, y]).collect(),
            area,
        })
    }
}

/// Monotone-chain convex hull, counter-clockwise without the closing point.
fn convex_hull(points: &[(f64, f64)]) -> Vec<(f64, f64)> {
    let mut pts = points.to_vec();
    pts.sort_by(|a, b| a.partial_cmp(b).unwrap());
    pts.dedup();
    if pts.len() < 3 {
        return pts;
    }
    let cross = |o: (f64, f64), a: (f64, f64), b: (f64, f64)| {
        (a.0 - o.0) * (b.1 - o.1) - (a.1 - o.1) * (b.0 - o.0)
    };
    let mut lower: Vec<(f64, f64)> = Vec::new();
    for &pt in &pts {
        while lower.len() >= 2 && cross(lower[lower.len() - 2], lower[lower.len() - 1], pt) <= 0.0
        {
            lower.pop();
        }
        lower.push(pt);
    }
    let mut upper: Vec<(f64, f64)> = Vec::new();
    for &pt in pts.iter().rev() {
        while upper.len() >= 2 && cross(upper[upper.len() - 2], upper[upper.len() - 1], pt) <= 0.0
        {
            upper.pop();
        }
        upper.push(pt);
    }
    lower.pop();
    upper.pop();
    lower.extend(upper);
    lower
}

fn polygon_area(hull: &[(f64, f64)]) -> f64 {
    if hull.len() < 3 {
        return 0.0;
    }
    let mut twice = 0.0;
    for i in 0..hull.len() {
        let (x1, y1) = hull[i];
        let (x2, y2) = hull[(i + 1) % hull.len()];
        twice += x1 * y2 - x2 * y1;
    }
    twice.abs() / 2.0
}

/// Goodness-of-fit summary for the pushforward check.
#[derive(Debug, Clone, serde::Serialize)]
pub struct ChiSquareReport {
    pub statistic: f64,
    pub dof: usize,
    pub critical: f64,
    pub pass: bool,
    pub observed: Vec<usize>,
    pub expected: Vec<f64>,
}

/// Compares the empirical `(D = d, Z = z)` subsample against cell masses of
/// a density field via a chi-square statistic over an axis-aligned grid of
/// `cells_per_axis^p` cells covering the field's support box.
pub fn pushforward_chi_square(
    sample: &ObservedSample,
    field: &DensityField,
    d: usize,
    z: usize,
    cells_per_axis: usize,
    integration_res: usize,
    critical: f64,
) -> Result<ChiSquareReport> {
    let p = sample.dim();
    let (lo, hi) = field.support_box();
    let n_cells = cells_per_axis.pow(p as u32);
    let cell_of = |y: &DVector<f64>| -> usize {
        let mut idx = 0usize;
        for j in 0..p {
            let rel = ((y[j] - lo[j]) / (hi[j] - lo[j])).clamp(0.0, 1.0);
            let k = ((rel * cells_per_axis as f64) as usize).min(cells_per_axis - 1);
            idx = idx * cells_per_axis + k;
        }
        idx
    };
    // Expected cell masses by integrating the field over the box.
    let (nodes, weight) = box_midpoint_grid(&lo, &hi, integration_res)?;
    let mut expected = vec![0.0f64; n_cells];
    for node in &nodes {
        expected[cell_of(node)] += weight * field.eval(node)?;
    }
    let total: f64 = expected.iter().sum();
    if total <= 0.0 {
        return Err(Error::EmptySupport);
    }
    for e in &mut expected {
        *e /= total;
    }
    // Observed counts from the subsample.
    let rows = sample.subsample_indices(d, z);
    if rows.is_empty() {
        return Err(Error::EmptyInput(format!("no rows with d={d}, z={z}")));
    }
    let mut observed = vec![0usize; n_cells];
    for &i in &rows {
        observed[cell_of(&sample.outcomes[i])] += 1;
    }
    let n = rows.len() as f64;
    let mut statistic = 0.0;
    for k in 0..n_cells {
        let e = n * expected[k].max(1e-12);
        let diff = observed[k] as f64 - e;
        statistic += diff * diff / e;
    }
    Ok(ChiSquareReport {
        statistic,
        dof: n_cells - 1,
        critical,
        pass: statistic < critical,
        observed,
        expected,
    })
}
