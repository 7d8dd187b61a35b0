//! Reference domains, reference measures, and quadrature grids.
//!
//! The latent rank vector lives on a compact convex set: the unit cube
//! `[0,1]^p` or the closed unit ball. Integrals against the reference
//! measure are approximated by fixed product quadrature grids so that
//! every downstream check is deterministic and reproducible.

use crate::error::{Error, Result};
use nalgebra::DVector;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use std::f64::consts::PI;
use std::io::Write;

/// Shape of the reference domain.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum DomainKind {
    UnitCube,
    UnitBall,
}

/// Compact convex support for the latent rank vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct ReferenceDomain {
    kind: DomainKind,
    dim: usize,
}

impl ReferenceDomain {
    /// The unit cube `[0,1]^p`.
    pub fn unit_cube(dim: usize) -> Result<Self> {
        if dim == 0 {
            return Err(Error::InvalidParameter("domain dimension must be >= 1".into()));
        }
        Ok(Self { kind: DomainKind::UnitCube, dim })
    }

    /// The closed unit ball centred at the origin.
    pub fn unit_ball(dim: usize) -> Result<Self> {
        if dim == 0 {
            return Err(Error::InvalidParameter("domain dimension must be >= 1".into()));
        }
        Ok(Self { kind: DomainKind::UnitBall, dim })
    }

    pub fn kind(&self) -> DomainKind {
        self.kind
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Membership test (closed set).
    pub fn contains(&self, u: &DVector<f64>) -> bool {
        if u.len() != self.dim {
            return false;
        }
        match self.kind {
            DomainKind::UnitCube => u.iter().all(|&x| (0.0..=1.0).contains(&x)),
            DomainKind::UnitBall => u.norm() <= 1.0 + 1e-12,
        }
    }

    /// True when `u` is at distance at least `margin` from the boundary.
    pub fn is_interior(&self, u: &DVector<f64>, margin: f64) -> bool {
        if u.len() != self.dim {
            return false;
        }
        match self.kind {
            DomainKind::UnitCube => u.iter().all(|&x| x > margin && x < 1.0 - margin),
            DomainKind::UnitBall => u.norm() < 1.0 - margin,
        }
    }

    /// Euclidean projection onto the domain.
    pub fn project(&self, u: &DVector<f64>) -> DVector<f64> {
        match self.kind {
            DomainKind::UnitCube => u.map(|x| x.clamp(0.0, 1.0)),
            DomainKind::UnitBall => {
                let n = u.norm();
                if n <= 1.0 {
                    u.clone()
                } else {
                    u / n
                }
            }
        }
    }

    /// Lebesgue volume of the domain.
    pub fn volume(&self) -> f64 {
        match self.kind {
            DomainKind::UnitCube => 1.0,
            // Volume of the p-ball: pi^{p/2} / Gamma(p/2 + 1), specialised to p <= 2
            // for grid-backed domains and computed recursively otherwise.
            DomainKind::UnitBall => ball_volume(self.dim),
        }
    }

    pub fn diameter(&self) -> f64 {
        match self.kind {
            DomainKind::UnitCube => (self.dim as f64).sqrt(),
            DomainKind::UnitBall => 2.0,
        }
    }
}

fn ball_volume(dim: usize) -> f64 {
    // V_p = V_{p-2} * 2 pi / p, with V_1 = 2 and V_2 = pi.
    match dim {
        1 => 2.0,
        2 => PI,
        p => ball_volume(p - 2) * 2.0 * PI / p as f64,
    }
}

/// Law of the latent rank vector on its reference domain.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ReferenceMeasure {
    domain: ReferenceDomain,
    kind: MeasureKind,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum MeasureKind {
    /// Lebesgue-uniform on the unit cube.
    Uniform,
    /// Radius uniform on [0,1], direction uniform on the sphere.
    SphericalUniform,
}

impl ReferenceMeasure {
    pub fn uniform_on_cube(dim: usize) -> Result<Self> {
        Ok(Self { domain: ReferenceDomain::unit_cube(dim)?, kind: MeasureKind::Uniform })
    }

    pub fn spherical_on_ball(dim: usize) -> Result<Self> {
        Ok(Self { domain: ReferenceDomain::unit_ball(dim)?, kind: MeasureKind::SphericalUniform })
    }

    pub fn domain(&self) -> &ReferenceDomain {
        &self.domain
    }

    pub fn kind(&self) -> MeasureKind {
        self.kind
    }

    pub fn dim(&self) -> usize {
        self.domain.dim()
    }

    /// Lebesgue density of the measure at `u` (zero outside the domain).
    pub fn density(&self, u: &DVector<f64>) -> f64 {
        if !self.domain.contains(u) {
            return 0.0;
        }
        match self.kind {
            MeasureKind::Uniform => 1.0,
            MeasureKind::SphericalUniform => {
                // Radius ~ U[0,1] pushes mass toward the centre: the density at
                // radius r is 1 / (surface area of the r-sphere).
                let p = self.domain.dim();
                let r = u.norm();
                match p {
                    1 => 0.5,
                    2 => 1.0 / (2.0 * PI * r.max(1e-300)),
                    _ => {
                        let sphere_area = ball_volume(p) * p as f64; // |S^{p-1}_1| = p V_p
                        1.0 / (sphere_area * r.max(1e-300).powi(p as i32 - 1))
                    }
                }
            }
        }
    }

    /// Draws `n` points; deterministic for a fixed seed.
    pub fn sample(&self, n: usize, seed: u64) -> Vec<DVector<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| self.sample_one(&mut rng)).collect()
    }

    /// Draws a single point from the measure using the supplied generator.
    pub fn sample_one(&self, rng: &mut impl Rng) -> DVector<f64> {
        let p = self.domain.dim();
        match self.kind {
            MeasureKind::Uniform => DVector::from_fn(p, |_, _| rng.gen::<f64>()),
            MeasureKind::SphericalUniform => {
                let r: f64 = rng.gen();
                match p {
                    1 => {
                        let s: f64 = rng.gen();
                        DVector::from_element(1, if s < 0.5 { -r } else { r })
                    }
                    2 => {
                        let theta = 2.0 * PI * rng.gen::<f64>();
                        DVector::from_vec(vec![r * theta.cos(), r * theta.sin()])
                    }
                    _ => {
                        let mut dir = DVector::from_fn(p, |_, _| {
                            StandardNormal.sample(rng)
                        });
                        let norm = dir.norm();
                        if norm > 0.0 {
                            dir /= norm;
                        } else {
                            dir[0] = 1.0;
                        }
                        dir * r
                    }
                }
            }
        }
    }
}

/// Fixed quadrature grid with positive weights summing to the domain volume.
#[derive(Debug, Clone, PartialEq)]
pub struct QuadratureGrid {
    domain: ReferenceDomain,
    resolution: usize,
    nodes: Vec<DVector<f64>>,
    weights: Vec<f64>,
}

impl QuadratureGrid {
    /// Builds a midpoint product grid (cube) or exact-area polar grid (ball).
    ///
    /// Ball grids are supported for p <= 2 only; higher-dimensional ball
    /// quadrature is rejected rather than approximated poorly.
    pub fn build(domain: ReferenceDomain, resolution: usize) -> Result<Self> {
        if resolution == 0 {
            return Err(Error::InvalidParameter("grid resolution must be >= 1".into()));
        }
        let p = domain.dim();
        let (nodes, weights) = match domain.kind() {
            DomainKind::UnitCube => cube_grid(p, resolution),
            DomainKind::UnitBall => match p {
                1 => segment_grid(resolution),
                2 => polar_grid(resolution),
                _ => {
                    return Err(Error::UnsupportedDomain(
                        "ball quadrature grids are only available for p <= 2".into(),
                    ))
                }
            },
        };
        Ok(Self { domain, resolution, nodes, weights })
    }

    /// Builds a stratified cube grid with one deterministically jittered node per cell.
    ///
    /// Regular midpoint grids align whole rows of nodes with axis-parallel
    /// features, so piecewise objectives sampled on them move in coarse steps;
    /// jittering each node inside its cell staggers those crossings while
    /// keeping the weights exact.
    pub fn build_jittered(domain: ReferenceDomain, resolution: usize, seed: u64) -> Result<Self> {
        if resolution == 0 {
            return Err(Error::InvalidParameter("grid resolution must be >= 1".into()));
        }
        if domain.kind() != DomainKind::UnitCube {
            return Err(Error::UnsupportedDomain(
                "jittered quadrature grids are only available on the cube".into(),
            ));
        }
        let p = domain.dim();
        let (mut nodes, weights) = cube_grid(p, resolution);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cell = 1.0 / resolution as f64;
        let res = resolution as f64;
        for (idx, node) in nodes.iter_mut().enumerate() {
            for j in 0..p {
                // Offsets sweep almost the whole cell so some node lies close
                // to any axis-parallel feature.  In the strata touching the
                // domain faces, every second node is pulled toward its face:
                // support boundaries of image measures sit exactly on the
                // faces, and the nearest node controls how finely a fit can
                // resolve them.  The remaining nodes keep the full spread so
                // the strata flip gradually rather than all at once.
                let stratum = (node[j] * res - 0.5).round();
                let near_face = (idx + j) % 2 == 0;
                let range = if stratum <= 0.0 && near_face {
                    0.001..0.35
                } else if stratum >= res - 1.0 && near_face {
                    0.65..0.999
                } else {
                    0.005..0.995
                };
                node[j] = (stratum + rng.gen_range(range)) * cell;
            }
        }
        Ok(Self { domain, resolution, nodes, weights })
    }

    pub fn domain(&self) -> &ReferenceDomain {
        &self.domain
    }

    pub fn resolution(&self) -> usize {
        self.resolution
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn nodes(&self) -> &[DVector<f64>] {
        &self.nodes
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn iter(&self) -> impl Iterator<Item = (&DVector<f64>, f64)> {
        self.nodes.iter().zip(self.weights.iter().copied())
    }

    /// Integrates `f` against Lebesgue measure restricted to the domain.
    pub fn integrate(&self, mut f: impl FnMut(&DVector<f64>) -> f64) -> f64 {
        self.iter().map(|(u, w)| w * f(u)).sum()
    }

    /// Writes the grid as CSV with one row per node: coordinates then weight.
    pub fn write_csv(&self, out: &mut impl Write) -> Result<()> {
        let p = self.domain.dim();
        let header: Vec<String> = (1..=p).map(|j| format!("u{j}")).collect();
        writeln!(out, "{},weight", header.join(","))?;
        for (u, w) in self.iter() {
            let coords: Vec<String> = u.iter().map(|x| format!("{x}")).collect();
            writeln!(out, "{},{w}", coords.join(","))?;
        }
        Ok(())
    }
}

fn cube_grid(p: usize, res: usize) -> (Vec<DVector<f64>>, Vec<f64>) {
    let n = res.pow(p as u32);
    let w = (res as f64).powi(-(p as i32));
    let mut nodes = Vec::with_capacity(n);
    let mut index = vec![0usize; p];
    for _ in 0..n {
        let node = DVector::from_fn(p, |j, _| (index[j] as f64 + 0.5) / res as f64);
        nodes.push(node);
        // Row-major order: the last axis varies fastest.
        for j in (0..p).rev() {
            index[j] += 1;
            if index[j] < res {
                break;
            }
            index[j] = 0;
        }
    }
    (nodes, vec![w; n])
}

fn segment_grid(res: usize) -> (Vec<DVector<f64>>, Vec<f64>) {
    let w = 2.0 / res as f64;
    let nodes = (0..res)
        .map(|i| DVector::from_element(1, -1.0 + (i as f64 + 0.5) * w))
        .collect();
    (nodes, vec![w; res])
}

fn polar_grid(res: usize) -> (Vec<DVector<f64>>, Vec<f64>) {
    // Product cells in (r, theta); each cell weight is its exact area
    // (r_mid * dr * dtheta), so the weights sum to pi exactly.
    let dr = 1.0 / res as f64;
    let dtheta = 2.0 * PI / res as f64;
    let mut nodes = Vec::with_capacity(res * res);
    let mut weights = Vec::with_capacity(res * res);
    for i in 0..res {
        let r_mid = (i as f64 + 0.5) * dr;
        for j in 0..res {
            let theta = (j as f64 + 0.5) * dtheta;
            nodes.push(DVector::from_vec(vec![r_mid * theta.cos(), r_mid * theta.sin()]));
            weights.push(r_mid * dr * dtheta);
        }
    }
    (nodes, weights)
}

/// Quadrature approximation of the measure of `{u : indicator(u)}`.
pub fn measure_of_set(
    measure: &ReferenceMeasure,
    grid: &QuadratureGrid,
    mut indicator: impl FnMut(&DVector<f64>) -> bool,
) -> Result<f64> {
    if grid.domain() != measure.domain() {
        return Err(Error::InvalidParameter(
            "grid and measure are defined on different domains".into(),
        ));
    }
    Ok(grid
        .iter()
        .filter(|(u, _)| indicator(u))
        .map(|(u, w)| w * measure.density(u))
        .sum())
}

/// Axis box or half-space test set for pushforward checks.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ProbeSet {
    /// Product of coordinate intervals `[lo_j, hi_j]`.
    Box { lo: Vec<f64>, hi: Vec<f64> },
    /// Closed half-space `{u : normal . u <= offset}`.
    HalfSpace { normal: Vec<f64>, offset: f64 },
}

impl ProbeSet {
    pub fn dim(&self) -> usize {
        match self {
            ProbeSet::Box { lo, .. } => lo.len(),
            ProbeSet::HalfSpace { normal, .. } => normal.len(),
        }
    }

    /// Membership test (closed set).
    pub fn contains(&self, u: &DVector<f64>) -> bool {
        match self {
            ProbeSet::Box { lo, hi } => {
                u.len() == lo.len()
                    && u.iter().zip(lo.iter().zip(hi)).all(|(&x, (&a, &b))| a <= x && x <= b)
            }
            ProbeSet::HalfSpace { normal, offset } => {
                u.len() == normal.len()
                    && u.iter().zip(normal).map(|(&x, &a)| a * x).sum::<f64>() <= *offset
            }
        }
    }

    /// Short display label such as `box[0,0.5]x[0.5,1]` or `cut[1,1]<=0.5`.
    pub fn label(&self) -> String {
        let fmt = |x: f64| {
            if x == x.trunc() { format!("{}", x as i64) } else { format!("{x}") }
        };
        match self {
            ProbeSet::Box { lo, hi } => {
                let sides: Vec<String> = lo
                    .iter()
                    .zip(hi)
                    .map(|(&a, &b)| format!("[{},{}]", fmt(a), fmt(b)))
                    .collect();
                format!("box{}", sides.join("x"))
            }
            ProbeSet::HalfSpace { normal, offset } => {
                let coeffs: Vec<String> = normal.iter().map(|&a| fmt(a)).collect();
                format!("cut[{}]<={}", coeffs.join(","), fmt(*offset))
            }
        }
    }

    /// Reference mass of the set.
    ///
    /// Uniform-cube masses are closed form: products of clipped interval
    /// lengths for boxes, clipped polygon areas for half-spaces with at most
    /// two active coordinates. Other measures fall back to quadrature.
    pub fn mass(&self, measure: &ReferenceMeasure) -> Result<f64> {
        if self.dim() != measure.dim() {
            return Err(Error::DimensionMismatch { expected: measure.dim(), got: self.dim() });
        }
        if measure.kind() == MeasureKind::Uniform {
            match self {
                ProbeSet::Box { lo, hi } => {
                    return Ok(lo
                        .iter()
                        .zip(hi)
                        .map(|(&a, &b)| (b.min(1.0) - a.max(0.0)).max(0.0))
                        .product());
                }
                ProbeSet::HalfSpace { normal, offset } => {
                    let active: Vec<f64> =
                        normal.iter().copied().filter(|&a| a != 0.0).collect();
                    match active.len() {
                        0 => return Ok(if *offset >= 0.0 { 1.0 } else { 0.0 }),
                        1 => {
                            let t = (offset / active[0]).clamp(0.0, 1.0);
                            return Ok(if active[0] > 0.0 { t } else { 1.0 - t });
                        }
                        2 => return Ok(clipped_square_area(active[0], active[1], *offset)),
                        _ => {
                            return Err(Error::UnsupportedDomain(
                                "half-space masses are closed form for at most two active \
                                 coordinates"
                                    .into(),
                            ))
                        }
                    }
                }
            }
        }
        let grid = QuadratureGrid::build(*measure.domain(), 200)?;
        measure_of_set(measure, &grid, |u| self.contains(u))
    }
}

/// Area of the unit square clipped by `{a x + b y <= c}` (Sutherland-Hodgman
/// plus shoelace).
fn clipped_square_area(a: f64, b: f64, c: f64) -> f64 {
    let square = [(0.0, 0.0), (1.0, 0.0), (1.0, 1.0), (0.0, 1.0)];
    let side = |p: (f64, f64)| a * p.0 + b * p.1 - c;
    let mut clipped: Vec<(f64, f64)> = Vec::with_capacity(6);
    for i in 0..4 {
        let p = square[i];
        let q = square[(i + 1) % 4];
        let (sp, sq) = (side(p), side(q));
        if sp <= 0.0 {
            clipped.push(p);
        }
        if (sp < 0.0) != (sq < 0.0) && sp != 0.0 && sq != 0.0 {
            let t = sp / (sp - sq);
            clipped.push((p.0 + t * (q.0 - p.0), p.1 + t * (q.1 - p.1)));
        }
    }
    if clipped.len() < 3 {
        return 0.0;
    }
    let mut twice = 0.0;
    for i in 0..clipped.len() {
        let (x1, y1) = clipped[i];
        let (x2, y2) = clipped[(i + 1) % clipped.len()];
        twice += x1 * y2 - x2 * y1;
    }
    twice.abs() / 2.0
}

/// Default probe family: eight boxes and four half-space cuts whose uniform
/// masses are exact closed forms. Boxes beyond the first two coordinates span
/// the full interval, and cuts act on the first coordinates only, so the
/// family stays valid in any dimension.
pub fn default_probe_family(p: usize) -> Result<Vec<ProbeSet>> {
    if p == 0 {
        return Err(Error::InvalidParameter("probe family dimension must be >= 1".into()));
    }
    let boxed = |pairs: &[(f64, f64)]| -> ProbeSet {
        let mut lo = vec![0.0; p];
        let mut hi = vec![1.0; p];
        for (j, &(a, b)) in pairs.iter().enumerate().take(p) {
            lo[j] = a;
            hi[j] = b;
        }
        ProbeSet::Box { lo, hi }
    };
    let cut = |coeffs: &[f64], offset: f64| -> ProbeSet {
        let mut normal = vec![0.0; p];
        for (j, &a) in coeffs.iter().enumerate().take(p) {
            normal[j] = a;
        }
        ProbeSet::HalfSpace { normal, offset }
    };
    Ok(vec![
        boxed(&[(0.0, 0.5), (0.0, 0.5)]),
        boxed(&[(0.5, 1.0), (0.5, 1.0)]),
        boxed(&[(0.0, 0.5), (0.5, 1.0)]),
        boxed(&[(0.25, 0.75), (0.25, 0.75)]),
        boxed(&[(0.0, 0.25)]),
        boxed(&[(0.0, 1.0), (0.75, 1.0)]),
        boxed(&[(0.1, 0.9), (0.1, 0.6)]),
        boxed(&[(0.05, 0.95), (0.05, 0.95)]),
        cut(&[1.0, 1.0], 1.0),
        cut(&[1.0, 1.0], 0.5),
        cut(&[1.0, -1.0], 0.25),
        cut(&[2.0, 1.0], 1.5),
    ])
}
