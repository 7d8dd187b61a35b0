//! Structural models: potential outcomes `Y_d = q_d(U_d)` with a discrete
//! instrument, endogenous treatment choice, and latent ranks drawn from the
//! reference measure.
//!
//! Treatment is assigned by inverting a per-instrument probability table
//! against a scalar noise draw; the table may vary across finitely many
//! cells of the latent rank, which is how selection on unobservables enters
//! while keeping every conditional law available in closed form. Ranks are
//! either shared across treatments (rank invariance) or redrawn through a
//! measure-preserving perturbation kernel (rank similarity).

use crate::domain::{DomainKind, MeasureKind, ProbeSet, QuadratureGrid, ReferenceMeasure};
use crate::error::{Error, Result};
use crate::potential::ConvexPotential;
use crate::transport::{check_class_membership, InvertOptions, MapLike, QuantileMap};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use std::io::{BufRead, Write};

/// Default admissibility box for map Jacobian eigenvalues.
pub const DEFAULT_EIGEN_BOX: (f64, f64) = (0.25, 4.0);

/// Finite partition of the reference domain used by the noise copula.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub enum CellPartition {
    /// Single cell: treatment noise independent of the latent rank.
    Whole,
    /// Cells split along one axis at the given thresholds.
    AxisThreshold { axis: usize, thresholds: Vec<f64> },
}

impl CellPartition {
    pub fn cell_count(&self) -> usize {
        match self {
            Self::Whole => 1,
            Self::AxisThreshold { thresholds, .. } => thresholds.len() + 1,
        }
    }

    pub fn cell_index(&self, u: &DVector<f64>) -> usize {
        match self {
            Self::Whole => 0,
            Self::AxisThreshold { axis, thresholds } => {
                thresholds.iter().filter(|&&t| u[*axis] >= t).count()
            }
        }
    }

    /// Reference-measure mass of each cell (quadrature-backed).
    pub fn cell_masses(&self, measure: &ReferenceMeasure) -> Result<Vec<f64>> {
        match self {
            Self::Whole => Ok(vec![1.0]),
            Self::AxisThreshold { .. } => {
                let grid = QuadratureGrid::build(*measure.domain(), 400)?;
                let mut masses = vec![0.0; self.cell_count()];
                for (u, w) in grid.iter() {
                    masses[self.cell_index(u)] += w * measure.density(u);
                }
                Ok(masses)
            }
        }
    }
}

/// Treatment assignment rule `D = delta(Z, nu)` with cell-varying tables.
///
/// `tables[cell]` is an m-by-m column-stochastic matrix whose entry `(d, z)`
/// is `P(D = d | Z = z)` within that cell of the latent rank.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct TreatmentAssignment {
    pub partition: CellPartition,
    pub tables: Vec<DMatrix<f64>>,
}

impl TreatmentAssignment {
    /// Uniform compliance: `P(D = z | Z = z) = compliance` in every cell.
    pub fn compliance(m: usize, compliance: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&compliance) {
            return Err(Error::InvalidShares("compliance must lie in [0, 1]".into()));
        }
        let off = (1.0 - compliance) / (m as f64 - 1.0);
        let table =
            DMatrix::from_fn(m, m, |d, z| if d == z { compliance } else { off });
        Ok(Self { partition: CellPartition::Whole, tables: vec![table] })
    }

    pub fn treatments(&self) -> usize {
        self.tables[0].nrows()
    }

    fn validate(&self, m: usize) -> Result<()> {
        if self.tables.len() != self.partition.cell_count() {
            return Err(Error::InvalidShares(format!(
                "{} tables for {} cells",
                self.tables.len(),
                self.partition.cell_count()
            )));
        }
        for table in &self.tables {
            if table.nrows() != m || table.ncols() != m {
                return Err(Error::DimensionMismatch { expected: m, got: table.nrows() });
            }
            for z in 0..m {
                let col = table.column(z);
                if col.iter().any(|&p| p < 0.0) {
                    return Err(Error::InvalidShares("negative treatment probability".into()));
                }
                let total: f64 = col.iter().sum();
                if (total - 1.0).abs() > 1e-9 {
                    return Err(Error::InvalidShares(format!(
                        "treatment probabilities for z={z} sum to {total}"
                    )));
                }
            }
        }
        Ok(())
    }

    /// Inverse-CDF draw of the treatment for instrument `z` in `cell`.
    fn draw(&self, z: usize, nu: f64, cell: usize) -> usize {
        let table = &self.tables[cell];
        let m = table.nrows();
        let mut acc = 0.0;
        for d in 0..m {
            acc += table[(d, z)];
            if nu < acc {
                return d;
            }
        }
        m - 1
    }
}

/// How latent ranks are coupled across potential outcomes.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub enum RankCoupling {
    /// One shared rank: `U_d = W` for every treatment.
    Invariance,
    /// Ranks are i.i.d. measure-preserving perturbations of a shared draw:
    /// with probability `refresh_prob`, one coordinate is redrawn (cube) or
    /// the point is rotated by a fresh angle (disc).
    Similarity { refresh_prob: f64 },
}

/// Data-generating structural model.
#[derive(Debug, Clone)]
pub struct StructuralModel {
    measure: ReferenceMeasure,
    maps: Vec<QuantileMap>,
    instrument_law: Vec<f64>,
    assignment: TreatmentAssignment,
    coupling: RankCoupling,
    eigen_box: (f64, f64),
}

/// Latent annex carried alongside simulated observables.
#[derive(Debug, Clone)]
pub struct LatentAnnex {
    /// Realized rank of the observed outcome, `U_D`.
    pub ranks: Vec<DVector<f64>>,
    /// Treatment assignment noise.
    pub noise: Vec<f64>,
    /// All potential ranks: `potential_ranks[d][i]` is `U_d` for row `i`.
    pub potential_ranks: Vec<Vec<DVector<f64>>>,
}

/// Simulated observables (plus optional latent annex).
#[derive(Debug, Clone)]
pub struct ObservedSample {
    pub outcomes: Vec<DVector<f64>>,
    pub treatments: Vec<usize>,
    pub instruments: Vec<usize>,
    pub latent: Option<LatentAnnex>,
}

impl ObservedSample {
    pub fn len(&self) -> usize {
        self.outcomes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.outcomes.is_empty()
    }

    pub fn dim(&self) -> usize {
        if self.outcomes.is_empty() { 0 } else { self.outcomes[0].len() }
    }

    /// Empirical share of `D = d` among rows with `Z = z`.
    pub fn empirical_share(&self, d: usize, z: usize) -> f64 {
        let denom = self.instruments.iter().filter(|&&zi| zi == z).count();
        if denom == 0 {
            return 0.0;
        }
        let num = self
            .treatments
            .iter()
            .zip(&self.instruments)
            .filter(|&(&di, &zi)| di == d && zi == z)
            .count();
        num as f64 / denom as f64
    }

    /// Rows whose treatment and instrument match `(d, z)`.
    pub fn subsample_indices(&self, d: usize, z: usize) -> Vec<usize> {
        (0..self.len())
            .filter(|&i| self.treatments[i] == d && self.instruments[i] == z)
            .collect()
    }

    /// Writes `y1..yp,d,z` rows, appending `u1..up,nu` when latent data is kept.
    pub fn write_csv(&self, out: &mut impl Write) -> Result<()> {
        let p = self.dim();
        let mut header: Vec<String> = (1..=p).map(|j| format!("y{j}")).collect();
        header.push("d".into());
        header.push("z".into());
        if self.latent.is_some() {
            header.extend((1..=p).map(|j| format!("u{j}")));
            header.push("nu".into());
        }
        writeln!(out, "{}", header.join(","))?;
        for i in 0..self.len() {
            let mut row: Vec<String> = self.outcomes[i].iter().map(|x| format!("{x}")).collect();
            row.push(self.treatments[i].to_string());
            row.push(self.instruments[i].to_string());
            if let Some(annex) = &self.latent {
                row.extend(annex.ranks[i].iter().map(|x| format!("{x}")));
                row.push(format!("{}", annex.noise[i]));
            }
            writeln!(out, "{}", row.join(","))?;
        }
        Ok(())
    }

    /// Reads a sample written by [`ObservedSample::write_csv`] (observables only).
    pub fn read_csv(input: &mut impl BufRead) -> Result<Self> {
        let mut lines = input.lines();
        let header = lines
            .next()
            .ok_or_else(|| Error::EmptyInput("empty csv".into()))??;
        let cols: Vec<&str> = header.split(',').collect();
        let p = cols.iter().take_while(|c| c.starts_with('y')).count();
        let d_col = p;
        let z_col = p + 1;
        if p == 0 || cols.len() < z_col + 1 {
            return Err(Error::InvalidParameter("csv header lacks y/d/z columns".into()));
        }
        let mut outcomes = Vec::new();
        let mut treatments = Vec::new();
        let mut instruments = Vec::new();
        for line in lines {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() < z_col + 1 {
                return Err(Error::InvalidParameter(format!("short csv row: {line}")));
            }
            let y = DVector::from_fn(p, |j, _| fields[j].parse::<f64>().unwrap_or(f64::NAN));
            if y.iter().any(|v| v.is_nan()) {
                return Err(Error::InvalidParameter(format!("non-numeric outcome in: {line}")));
            }
            outcomes.push(y);
            treatments.push(
                fields[d_col]
                    .parse()
                    .map_err(|_| Error::InvalidParameter("bad treatment column".into()))?,
            );
            instruments.push(
                fields[z_col]
                    .parse()
                    .map_err(|_| Error::InvalidParameter("bad instrument column".into()))?,
            );
        }
        Ok(Self { outcomes, treatments, instruments, latent: None })
    }
}

impl StructuralModel {
    pub fn new(
        measure: ReferenceMeasure,
        maps: Vec<QuantileMap>,
        instrument_law: Vec<f64>,
        assignment: TreatmentAssignment,
        coupling: RankCoupling,
    ) -> Result<Self> {
        let m = instrument_law.len();
        if m < 2 || m > 3 {
            return Err(Error::InvalidParameter("instrument support must have 2 or 3 points".into()));
        }
        if maps.len() != m {
            return Err(Error::DimensionMismatch { expected: m, got: maps.len() });
        }
        if instrument_law.iter().any(|&p| p < 0.0)
            || (instrument_law.iter().sum::<f64>() - 1.0).abs() > 1e-9
        {
            return Err(Error::InvalidShares("instrument law must be a probability vector".into()));
        }
        for map in &maps {
            if map.domain() != measure.domain() {
                return Err(Error::InvalidParameter(
                    "map domain differs from the reference domain".into(),
                ));
            }
        }
        assignment.validate(m)?;
        if let RankCoupling::Similarity { refresh_prob } = coupling {
            if !(0.0..=1.0).contains(&refresh_prob) {
                return Err(Error::InvalidParameter("refresh probability must lie in [0,1]".into()));
            }
            if measure.domain().kind() == DomainKind::UnitBall && measure.dim() > 2 {
                return Err(Error::UnsupportedDomain(
                    "similarity kernel on the ball is available for p <= 2 only".into(),
                ));
            }
        }
        // Certify strict monotonicity and fix the eigenvalue box: the default
        // box is kept when it brackets the observed spectrum, otherwise it is
        // widened around the swept range with a multiplicative margin.
        let sweep = QuadratureGrid::build(*measure.domain(), 16.min(400 / measure.dim().max(1)))?;
        let mut spectrum_lo = f64::INFINITY;
        let mut spectrum_hi = f64::NEG_INFINITY;
        for map in &maps {
            let report = check_class_membership(map, &sweep, 1e-12, 1e12)?;
            spectrum_lo = spectrum_lo.min(report.min_eigen);
            spectrum_hi = spectrum_hi.max(report.max_eigen);
        }
        if spectrum_lo <= 0.0 {
            return Err(Error::NotConvex(format!(
                "map Jacobian has nonpositive eigenvalue {spectrum_lo:.3e} on the sweep grid"
            )));
        }
        let eigen_box = if DEFAULT_EIGEN_BOX.0 < spectrum_lo && spectrum_hi < DEFAULT_EIGEN_BOX.1 {
            DEFAULT_EIGEN_BOX
        } else {
            (0.8 * spectrum_lo, 1.25 * spectrum_hi)
        };
        Ok(Self { measure, maps, instrument_law, assignment, coupling, eigen_box })
    }

    pub fn measure(&self) -> &ReferenceMeasure {
        &self.measure
    }

    pub fn maps(&self) -> &[QuantileMap] {
        &self.maps
    }

    pub fn map(&self, d: usize) -> &QuantileMap {
        &self.maps[d]
    }

    pub fn treatments(&self) -> usize {
        self.maps.len()
    }

    pub fn dim(&self) -> usize {
        self.measure.dim()
    }

    pub fn instrument_law(&self) -> &[f64] {
        &self.instrument_law
    }

    pub fn assignment(&self) -> &TreatmentAssignment {
        &self.assignment
    }

    pub fn coupling(&self) -> RankCoupling {
        self.coupling
    }

    /// Eigenvalue box certified to strictly contain every map's spectrum.
    pub fn eigen_box(&self) -> (f64, f64) {
        self.eigen_box
    }

    /// Model-implied share `P(D = d | Z = z)`.
    pub fn share(&self, d: usize, z: usize) -> Result<f64> {
        let masses = self.assignment.partition.cell_masses(&self.measure)?;
        Ok(masses
            .iter()
            .zip(&self.assignment.tables)
            .map(|(mass, table)| mass * table[(d, z)])
            .sum())
    }

    /// Per-cell conditional shares `P(D = d | Z = z, cell)`.
    pub fn cell_shares(&self, d: usize, z: usize) -> Vec<f64> {
        self.assignment.tables.iter().map(|t| t[(d, z)]).collect()
    }

    /// Simulates `n` rows; deterministic in `seed` and independent of the
    /// worker count because rows are generated in fixed seed-derived chunks.
    pub fn simulate(&self, n: usize, seed: u64, keep_latent: bool) -> Result<ObservedSample> {
        if n == 0 {
            return Err(Error::EmptyInput("cannot simulate zero rows".into()));
        }
        const CHUNK: usize = 8192;
        let m = self.treatments();
        let chunk_ranges: Vec<(usize, usize)> = (0..n)
            .step_by(CHUNK)
            .map(|start| (start / CHUNK, (n - start).min(CHUNK)))
            .collect();
        struct Row {
            y: DVector<f64>,
            d: usize,
            z: usize,
            u: DVector<f64>,
            nu: f64,
            potential: Vec<DVector<f64>>,
        }
        let chunks: Vec<Vec<Row>> = chunk_ranges
            .par_iter()
            .map(|&(chunk_idx, len)| {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                rng.set_stream(chunk_idx as u64 + 1);
                (0..len)
                    .map(|_| {
                        let z = draw_categorical(&mut rng, &self.instrument_law);
                        let w = self.measure.sample_one(&mut rng);
                        let ranks: Vec<DVector<f64>> = (0..m)
                            .map(|_| self.perturb_rank(&w, &mut rng))
                            .collect();
                        let nu: f64 = rng.gen();
                        let cell = self.assignment.partition.cell_index(&w);
                        let d = self.assignment.draw(z, nu, cell);
                        let u = ranks[d].clone();
                        let y = self.maps[d].eval_unchecked(&u);
                        Row { y, d, z, u, nu, potential: ranks }
                    })
                    .collect()
            })
            .collect();
        let mut outcomes = Vec::with_capacity(n);
        let mut treatments = Vec::with_capacity(n);
        let mut instruments = Vec::with_capacity(n);
        let mut ranks = Vec::new();
        let mut noise = Vec::new();
        let mut potential_ranks = vec![Vec::new(); m];
        for chunk in chunks {
            for row in chunk {
                outcomes.push(row.y);
                treatments.push(row.d);
                instruments.push(row.z);
                if keep_latent {
                    ranks.push(row.u);
                    noise.push(row.nu);
                    for (d, u) in row.potential.into_iter().enumerate() {
                        potential_ranks[d].push(u);
                    }
                }
            }
        }
        let latent = keep_latent.then(|| LatentAnnex { ranks, noise, potential_ranks });
        Ok(ObservedSample { outcomes, treatments, instruments, latent })
    }

    /// Applies the rank coupling kernel to a shared draw.
    fn perturb_rank(&self, w: &DVector<f64>, rng: &mut impl Rng) -> DVector<f64> {
        match self.coupling {
            RankCoupling::Invariance => w.clone(),
            RankCoupling::Similarity { refresh_prob } => {
                let trigger: f64 = rng.gen();
                if trigger >= refresh_prob {
                    return w.clone();
                }
                match self.measure.kind() {
                    MeasureKind::Uniform => {
                        let p = w.len();
                        let axis = rng.gen_range(0..p);
                        let mut u = w.clone();
                        u[axis] = rng.gen();
                        u
                    }
                    MeasureKind::SphericalUniform => {
                        if w.len() == 1 {
                            let s: f64 = rng.gen();
                            if s < 0.5 { -w.clone() } else { w.clone() }
                        } else {
                            let theta = 2.0 * std::f64::consts::PI * rng.gen::<f64>();
                            let (c, s) = (theta.cos(), theta.sin());
                            DVector::from_vec(vec![c * w[0] - s * w[1], s * w[0] + c * w[1]])
                        }
                    }
                }
            }
        }
    }
}

fn draw_categorical(rng: &mut impl Rng, law: &[f64]) -> usize {
    let x: f64 = rng.gen();
    let mut acc = 0.0;
    for (k, &p) in law.iter().enumerate() {
        acc += p;
        if x < acc {
            return k;
        }
    }
    law.len() - 1
}

/// Quasi-linear demand model: `q_d(u) = A_d^{-1}(u - b_d)` with SPD `A_d`.
pub fn example1_model(
    a0: &DMatrix<f64>,
    a1: &DMatrix<f64>,
    b0: &DVector<f64>,
    b1: &DVector<f64>,
    compliance: f64,
) -> Result<StructuralModel> {
    let p = b0.len();
    let measure = ReferenceMeasure::uniform_on_cube(p)?;
    let make_map = |a: &DMatrix<f64>, b: &DVector<f64>| -> Result<QuantileMap> {
        let a_inv = a.clone().try_inverse().ok_or(Error::SingularMatrix)?;
        let sym = (&a_inv + a_inv.transpose()) * 0.5;
        let shift = -(&sym * b);
        QuantileMap::new(ConvexPotential::quadratic(sym, shift)?, *measure.domain())
    };
    StructuralModel::new(
        measure,
        vec![make_map(a0, b0)?, make_map(a1, b1)?],
        vec![0.5, 0.5],
        TreatmentAssignment::compliance(2, compliance)?,
        RankCoupling::Invariance,
    )
}

/// Discrete-choice share model: `q_d = grad W_d` for the log-sum-exp surplus
/// `W_d(u) = log(1 + sum_i exp(u_i + m_d_i))`, mapping ranks to inside-good
/// market shares. The outside option keeps the share Jacobian `diag(s) - ss'`
/// positive definite.
pub fn example2_model(
    mean_utils0: &DVector<f64>,
    mean_utils1: &DVector<f64>,
    outside_option: bool,
    compliance: f64,
) -> Result<StructuralModel> {
    if !outside_option {
        return Err(Error::NotConvex(
            "without an outside option the share map is singular (shares sum to one)".into(),
        ));
    }
    let p = mean_utils0.len();
    if mean_utils1.len() != p {
        return Err(Error::DimensionMismatch { expected: p, got: mean_utils1.len() });
    }
    let measure = ReferenceMeasure::uniform_on_cube(p)?;
    let make_map = |m: &DVector<f64>| -> Result<QuantileMap> {
        let mut slopes = vec![DVector::zeros(p)];
        let mut offsets = vec![0.0];
        for i in 0..p {
            let mut e = DVector::zeros(p);
            e[i] = 1.0;
            slopes.push(e);
            offsets.push(m[i]);
        }
        QuantileMap::new(
            ConvexPotential::smooth_max(slopes, offsets, 1.0, 0.0)?,
            *measure.domain(),
        )
    };
    StructuralModel::new(
        measure,
        vec![make_map(mean_utils0)?, make_map(mean_utils1)?],
        vec![0.5, 0.5],
        TreatmentAssignment::compliance(2, compliance)?,
        RankCoupling::Invariance,
    )
}

/// One row of the pushforward-identity audit for a probe set and instrument
/// value.
#[derive(Debug, Clone, serde::Serialize)]
pub struct PushforwardGap {
    pub set: String,
    pub z: usize,
    /// Reference mass of the set.
    pub mass: f64,
    /// Empirical share of rows with `Z = z` whose pulled-back outcome lies in
    /// the set.
    pub empirical: f64,
    pub gap: f64,
    /// Binomial bound `sigmas * sqrt(mass (1 - mass) / n)` at the full sample
    /// size.
    pub threshold: f64,
    /// Rows with `Z = z`.
    pub rows: usize,
}

/// Result of checking `P(Y in q_D(B) | Z = z) = mu(B)` over a set family.
#[derive(Debug, Clone, serde::Serialize)]
pub struct PushforwardCheck {
    pub gaps: Vec<PushforwardGap>,
    /// Largest `|gap| / threshold` over all rows of the table.
    pub max_ratio: f64,
    /// Outcomes the observed treatment's map could not pull back; they count
    /// as lying outside every set.
    pub inversion_failures: usize,
    pub pass: bool,
}

/// Audits the pushforward identity on a simulated sample: each outcome is
/// pulled back through its own treatment's map, and per instrument value the
/// share landing in each probe set is compared against the set's reference
/// mass with a `sigmas`-sigma binomial tolerance.
pub fn pushforward_gaps(
    model: &StructuralModel,
    sample: &ObservedSample,
    sets: &[ProbeSet],
    sigmas: f64,
) -> Result<PushforwardCheck> {
    if sets.is_empty() {
        return Err(Error::EmptyInput("pushforward audit needs probe sets".into()));
    }
    if sample.is_empty() {
        return Err(Error::EmptyInput("pushforward audit needs sample rows".into()));
    }
    let p = model.dim();
    if sample.dim() != p || sets.iter().any(|s| s.dim() != p) {
        return Err(Error::DimensionMismatch { expected: p, got: sample.dim() });
    }
    let masses: Vec<f64> =
        sets.iter().map(|s| s.mass(model.measure())).collect::<Result<_>>()?;
    // Pull every outcome back once; membership sweeps are then pure
    // arithmetic.
    let pulled: Vec<Option<DVector<f64>>> = (0..sample.len())
        .into_par_iter()
        .map(|i| {
            model.maps()[sample.treatments[i]]
                .legendre_invert(&sample.outcomes[i], InvertOptions::default())
                .ok()
        })
        .collect();
    let inversion_failures = pulled.iter().filter(|u| u.is_none()).count();
    let n = sample.len() as f64;
    let z_count = model.instrument_law().len();
    let mut gaps = Vec::with_capacity(sets.len() * z_count);
    let mut max_ratio = 0.0f64;
    let mut pass = true;
    for (set, &mass) in sets.iter().zip(&masses) {
        let threshold = sigmas * (mass * (1.0 - mass) / n).sqrt();
        for z in 0..z_count {
            let mut rows = 0usize;
            let mut inside = 0usize;
            for i in 0..sample.len() {
                if sample.instruments[i] != z {
                    continue;
                }
                rows += 1;
                if pulled[i].as_ref().is_some_and(|u| set.contains(u)) {
                    inside += 1;
                }
            }
            let empirical = if rows == 0 { 0.0 } else { inside as f64 / rows as f64 };
            let gap = empirical - mass;
            let ratio = if threshold > 0.0 {
                gap.abs() / threshold
            } else if gap == 0.0 {
                0.0
            } else {
                f64::INFINITY
            };
            max_ratio = max_ratio.max(ratio);
            pass &= gap.abs() <= threshold;
            gaps.push(PushforwardGap {
                set: set.label(),
                z,
                mass,
                empirical,
                gap,
                threshold,
                rows,
            });
        }
    }
    Ok(PushforwardCheck { gaps, max_ratio, inversion_failures, pass })
}

/// Two-sample Kolmogorov-Smirnov statistic.
pub fn ks_statistic(xs: &[f64], ys: &[f64]) -> f64 {
    let mut a = xs.to_vec();
    let mut b = ys.to_vec();
    a.sort_by(|x, y| x.partial_cmp(y).unwrap());
    b.sort_by(|x, y| x.partial_cmp(y).unwrap());
    let (n, m) = (a.len(), b.len());
    let (mut i, mut j) = (0usize, 0usize);
    let mut d = 0.0f64;
    while i < n && j < m {
        if a[i] <= b[j] {
            i += 1;
        } else {
            j += 1;
        }
        d = d.max((i as f64 / n as f64 - j as f64 / m as f64).abs());
    }
    d
}

/// Two-sample KS critical value at the 1% level.
pub fn ks_critical_1pct(n1: usize, n2: usize) -> f64 {
    // c(alpha) = sqrt(-ln(alpha/2) / 2) with alpha = 0.01.
    const C: f64 = 1.6276236115189502;
    C * ((n1 + n2) as f64 / (n1 as f64 * n2 as f64)).sqrt()
}

/// Outcome of the scalar-rank similarity diagnostic.
#[derive(Debug, Clone, serde::Serialize)]
pub struct RankViolationReport {
    pub component: usize,
    /// KS distance between the two scalar rank samples, per latent cell.
    pub cell_ks: Vec<f64>,
    pub cell_ks_critical: Vec<f64>,
    pub max_ks_ratio: f64,
    /// True when some cell rejects equality at the 1% level.
    pub violated: bool,
    /// Correlation between the composite scalar rank and the instrument.
    pub corr_rank_instrument: f64,
}

/// Tests whether a scalar model in outcome component `component` could
/// satisfy rank similarity: computes the ranks of both potential outcomes
/// through their marginal distributions and compares them within latent
/// cells, reporting KS distances and the instrument correlation of the
/// composite rank.
pub fn rank_violation_demo(
    model: &StructuralModel,
    component: usize,
    n: usize,
    seed: u64,
) -> Result<RankViolationReport> {
    if component >= model.dim() {
        return Err(Error::InvalidParameter(format!(
            "component {component} out of range for p = {}",
            model.dim()
        )));
    }
    if model.treatments() != 2 {
        return Err(Error::InvalidParameter("scalar rank demo requires binary treatment".into()));
    }
    let sample = model.simulate(n, seed, true)?;
    let annex = sample.latent.as_ref().expect("latent annex requested");
    // Scalar potential outcomes through the chosen component.
    let mut scalar: Vec<Vec<f64>> = Vec::with_capacity(2);
    for d in 0..2 {
        scalar.push(
            annex.potential_ranks[d]
                .iter()
                .map(|u| model.maps()[d].eval_unchecked(u)[component])
                .collect(),
        );
    }
    // Empirical quantile ranks of each potential outcome.
    let rank_through = |values: &[f64]| -> Vec<f64> {
        let mut order: Vec<usize> = (0..values.len()).collect();
        order.sort_by(|&i, &j| values[i].partial_cmp(&values[j]).unwrap());
        let mut ranks = vec![0.0; values.len()];
        for (pos, &idx) in order.iter().enumerate() {
            ranks[idx] = (pos as f64 + 0.5) / values.len() as f64;
        }
        ranks
    };
    let tilde: Vec<Vec<f64>> = scalar.iter().map(|v| rank_through(v)).collect();
    // Quadrant cells of the shared latent rank (first two axes, or halves
    // for p = 1) proxy the conditioning variable of the scalar model.
    let cell_of = |u: &DVector<f64>| -> usize {
        if u.len() == 1 {
            usize::from(u[0] >= 0.5)
        } else {
            2 * usize::from(u[0] >= 0.5) + usize::from(u[1] >= 0.5)
        }
    };
    let n_cells = if model.dim() == 1 { 2 } else { 4 };
    let mut cell_ks = Vec::with_capacity(n_cells);
    let mut cell_crit = Vec::with_capacity(n_cells);
    let mut max_ratio = 0.0f64;
    for cell in 0..n_cells {
        let idx: Vec<usize> = (0..sample.len())
            .filter(|&i| cell_of(&annex.potential_ranks[0][i]) == cell)
            .collect();
        let xs: Vec<f64> = idx.iter().map(|&i| tilde[0][i]).collect();
        let ys: Vec<f64> = idx.iter().map(|&i| tilde[1][i]).collect();
        let stat = ks_statistic(&xs, &ys);
        let crit = ks_critical_1pct(xs.len().max(1), ys.len().max(1));
        max_ratio = max_ratio.max(stat / crit);
        cell_ks.push(stat);
        cell_crit.push(crit);
    }
    // Composite rank actually realized in the data.
    let composite: Vec<f64> =
        (0..sample.len()).map(|i| tilde[sample.treatments[i]][i]).collect();
    let zs: Vec<f64> = sample.instruments.iter().map(|&z| z as f64).collect();
    let corr = pearson_corr(&composite, &zs);
    Ok(RankViolationReport {
        component,
        cell_ks,
        cell_ks_critical: cell_crit,
        max_ks_ratio: max_ratio,
        violated: max_ratio > 1.0,
        corr_rank_instrument: corr,
    })
}

fn pearson_corr(xs: &[f64], ys: &[f64]) -> f64 {
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let (mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0);
    for (x, y) in xs.iter().zip(ys) {
        sxx += (x - mx) * (x - mx);
        syy += (y - my) * (y - my);
        sxy += (x - mx) * (y - my);
    }
    sxy / (sxx.sqrt() * syy.sqrt()).max(1e-300)
}

/// Violating/compliant model pair for the scalar-rank demonstration: both
/// share a selection-on-rank assignment rule; the first uses distinct
/// non-separable maps, the second uses identical maps.
pub fn rank_violation_pair() -> Result<(StructuralModel, StructuralModel)> {
    let measure = ReferenceMeasure::uniform_on_cube(2)?;
    let identity = QuantileMap::new(
        ConvexPotential::quadratic(DMatrix::identity(2, 2), DVector::zeros(2))?,
        *measure.domain(),
    )?;
    // Regularized averaging map 0.1 u + 0.9 ((u1+u2)/2)(1,1)'.
    let mixed = QuantileMap::new(
        ConvexPotential::quadratic(
            DMatrix::from_row_slice(2, 2, &[0.55, 0.45, 0.45, 0.55]),
            DVector::zeros(2),
        )?,
        *measure.domain(),
    )?;
    // Compliance varies with the latent cell, so treatment selects on U.
    let assignment = TreatmentAssignment {
        partition: CellPartition::AxisThreshold { axis: 0, thresholds: vec![0.5] },
        tables: vec![
            DMatrix::from_row_slice(2, 2, &[0.95, 0.05, 0.05, 0.95]),
            DMatrix::from_row_slice(2, 2, &[0.6, 0.4, 0.4, 0.6]),
        ],
    };
    let violating = StructuralModel::new(
        measure,
        vec![identity.clone(), mixed],
        vec![0.5, 0.5],
        assignment.clone(),
        RankCoupling::Invariance,
    )?;
    let compliant = StructuralModel::new(
        measure,
        vec![identity.clone(), identity],
        vec![0.5, 0.5],
        assignment,
        RankCoupling::Invariance,
    )?;
    Ok((violating, compliant))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn v(xs: &[f64]) -> DVector<f64> {
        DVector::from_column_slice(xs)
    }

    fn canonical_example1(compliance: f64) -> StructuralModel {
        example1_model(
            &DMatrix::identity(2, 2),
            &DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 2.0]),
            &DVector::zeros(2),
            &DVector::zeros(2),
            compliance,
        )
        .unwrap()
    }

    #[test]
    fn perfect_compliance_means_treatment_equals_instrument() {
        let model = canonical_example1(1.0);
        let sample = model.simulate(10_000, 3, false).unwrap();
        assert!(sample
            .treatments
            .iter()
            .zip(&sample.instruments)
            .all(|(d, z)| d == z));
    }

    #[test]
    fn imperfect_compliance_share_matches() {
        let model = canonical_example1(0.9);
        let sample = model.simulate(100_000, 4, false).unwrap();
        let agree = sample
            .treatments
            .iter()
            .zip(&sample.instruments)
            .filter(|(d, z)| d == z)
            .count() as f64
            / sample.len() as f64;
        assert!((agree - 0.9).abs() < 0.003, "empirical P(D=Z) = {agree}");
    }

    #[test]
    fn latent_annex_reproduces_outcomes_exactly() {
        let model = canonical_example1(0.8);
        let sample = model.simulate(500, 9, true).unwrap();
        let annex = sample.latent.as_ref().unwrap();
        for i in 0..sample.len() {
            let rebuilt = model.maps()[sample.treatments[i]].eval_unchecked(&annex.ranks[i]);
            assert_eq!(rebuilt, sample.outcomes[i], "row {i} should match bitwise");
        }
    }

    #[test]
    fn example1_identity_map_is_identity() {
        let model = canonical_example1(0.9);
        let u = v(&[0.3, 0.3]);
        assert_relative_eq!(model.maps()[0].eval(&u).unwrap(), u, epsilon = 1e-14);
    }

    #[test]
    fn example1_second_map_halves_second_axis() {
        let model = canonical_example1(0.9);
        let (lo, hi) = model.maps()[1].image_box();
        assert_relative_eq!(lo, &v(&[0.0, 0.0]), epsilon = 1e-12);
        assert_relative_eq!(hi, &v(&[1.0, 0.5]), epsilon = 1e-12);
    }

    #[test]
    fn example2_shares_and_jacobian_at_origin() {
        let model =
            example2_model(&DVector::zeros(2), &v(&[0.2, -0.1]), true, 0.9).unwrap();
        let origin = DVector::zeros(2);
        let shares = model.maps()[0].eval(&origin).unwrap();
        assert_relative_eq!(shares, v(&[1.0 / 3.0, 1.0 / 3.0]), epsilon = 1e-12);
        let jac = model.maps()[0].jacobian(&origin).unwrap();
        let expected = DMatrix::from_row_slice(
            2,
            2,
            &[2.0 / 9.0, -1.0 / 9.0, -1.0 / 9.0, 2.0 / 9.0],
        );
        assert_relative_eq!(jac, expected, epsilon = 1e-12);
        let eig = jac.symmetric_eigen().eigenvalues;
        let mut eig: Vec<f64> = eig.iter().copied().collect();
        eig.sort_by(|a, b| a.partial_cmp(b).unwrap());
        assert_relative_eq!(eig[0], 1.0 / 9.0, epsilon = 1e-12);
        assert_relative_eq!(eig[1], 1.0 / 3.0, epsilon = 1e-12);
    }

    #[test]
    fn example2_share_sums_stay_below_one() {
        let model =
            example2_model(&v(&[0.1, 0.3]), &v(&[-0.2, 0.0]), true, 0.9).unwrap();
        let grid = QuadratureGrid::build(*model.measure().domain(), 20).unwrap();
        for map in model.maps() {
            for node in grid.nodes() {
                let s = map.eval_unchecked(node);
                assert!(s.iter().sum::<f64>() < 1.0);
                assert!(s.iter().all(|&x| x > 0.0));
            }
        }
    }

    #[test]
    fn example2_requires_outside_option() {
        let err = example2_model(&DVector::zeros(2), &DVector::zeros(2), false, 0.9);
        assert!(matches!(err, Err(Error::NotConvex(_))));
    }

    #[test]
    fn example2_widens_the_default_eigen_box() {
        let model =
            example2_model(&DVector::zeros(2), &DVector::zeros(2), true, 0.9).unwrap();
        let (lo, hi) = model.eigen_box();
        assert!(lo < 1.0 / 9.0, "box floor {lo} must sit below the corner eigenvalue");
        assert!(hi > 1.0 / 3.0);
        let grid = QuadratureGrid::build(*model.measure().domain(), 12).unwrap();
        for map in model.maps() {
            assert!(map.class_membership(&grid, lo, hi).unwrap().pass);
        }
    }

    #[test]
    fn simulation_is_deterministic_and_thread_invariant() {
        let model = canonical_example1(0.85);
        let a = model.simulate(20_000, 11, true).unwrap();
        let b = model.simulate(20_000, 11, true).unwrap();
        assert_eq!(a.outcomes, b.outcomes);
        assert_eq!(a.treatments, b.treatments);
        let single = rayon::ThreadPoolBuilder::new()
            .num_threads(1)
            .build()
            .unwrap()
            .install(|| model.simulate(20_000, 11, true).unwrap());
        assert_eq!(a.outcomes, single.outcomes);
        assert_eq!(a.instruments, single.instruments);
        assert_eq!(
            a.latent.as_ref().unwrap().noise,
            single.latent.as_ref().unwrap().noise
        );
    }

    #[test]
    fn instrument_is_exogenous_for_latent_ranks() {
        let model = canonical_example1(0.7);
        let sample = model.simulate(40_000, 21, true).unwrap();
        let annex = sample.latent.as_ref().unwrap();
        for axis in 0..2 {
            let xs: Vec<f64> = (0..sample.len())
                .filter(|&i| sample.instruments[i] == 0)
                .map(|i| annex.potential_ranks[0][i][axis])
                .collect();
            let ys: Vec<f64> = (0..sample.len())
                .filter(|&i| sample.instruments[i] == 1)
                .map(|i| annex.potential_ranks[0][i][axis])
                .collect();
            let stat = ks_statistic(&xs, &ys);
            let crit = ks_critical_1pct(xs.len(), ys.len());
            assert!(stat < crit, "axis {axis}: KS {stat} vs critical {crit}");
        }
    }

    #[test]
    fn similarity_coupling_preserves_rank_distributions() {
        let model = StructuralModel::new(
            ReferenceMeasure::uniform_on_cube(2).unwrap(),
            canonical_example1(0.9).maps().to_vec(),
            vec![0.5, 0.5],
            TreatmentAssignment::compliance(2, 0.9).unwrap(),
            RankCoupling::Similarity { refresh_prob: 0.5 },
        )
        .unwrap();
        let sample = model.simulate(60_000, 33, true).unwrap();
        let annex = sample.latent.as_ref().unwrap();
        // Conditional on (Z, nu-bin) cells, the two potential ranks must be
        // identically distributed.
        for z in 0..2 {
            for nu_bin in 0..4 {
                for axis in 0..2 {
                    let select = |d: usize| -> Vec<f64> {
                        (0..sample.len())
                            .filter(|&i| {
                                sample.instruments[i] == z
                                    && (annex.noise[i] * 4.0) as usize == nu_bin
                            })
                            .map(|i| annex.potential_ranks[d][i][axis])
                            .collect()
                    };
                    let xs = select(0);
                    let ys = select(1);
                    let stat = ks_statistic(&xs, &ys);
                    let crit = ks_critical_1pct(xs.len(), ys.len());
                    assert!(
                        stat < crit,
                        "z={z} bin={nu_bin} axis={axis}: KS {stat} vs {crit}"
                    );
                }
            }
        }
        // Marginals stay uniform under the perturbation kernel.
        for d in 0..2 {
            for axis in 0..2 {
                let coords: Vec<f64> =
                    annex.potential_ranks[d].iter().map(|u| u[axis]).collect();
                let uniform: Vec<f64> = (0..coords.len())
                    .map(|i| (i as f64 + 0.5) / coords.len() as f64)
                    .collect();
                let stat = ks_statistic(&coords, &uniform);
                assert!(stat < ks_critical_1pct(coords.len(), uniform.len()));
            }
        }
    }

    #[test]
    fn scalar_rank_demo_flags_only_the_violating_model() {
        let (violating, compliant) = rank_violation_pair().unwrap();
        // The violating pair induces corr(rank, Z) near 0.036; sampling noise
        // has standard error 1/sqrt(n) ~ 0.0045, so 0.02 splits the two cases
        // with better than three-sigma margins on each side.
        let bad = rank_violation_demo(&violating, 0, 50_000, 5).unwrap();
        assert!(bad.violated, "max KS ratio {}", bad.max_ks_ratio);
        assert!(
            bad.corr_rank_instrument.abs() > 0.02,
            "instrument correlation {}",
            bad.corr_rank_instrument
        );
        let good = rank_violation_demo(&compliant, 0, 50_000, 5).unwrap();
        assert!(!good.violated, "max KS ratio {}", good.max_ks_ratio);
        assert!(
            good.corr_rank_instrument.abs() < 0.02,
            "instrument correlation {}",
            good.corr_rank_instrument
        );
    }

    #[test]
    fn pushforward_gaps_accept_the_true_model() {
        let model = canonical_example1(0.9);
        let sample = model.simulate(20_000, 19, false).unwrap();
        let sets = crate::domain::default_probe_family(2).unwrap();
        let check = pushforward_gaps(&model, &sample, &sets, 3.0).unwrap();
        assert_eq!(check.gaps.len(), 24);
        assert_eq!(check.inversion_failures, 0);
        assert!(check.pass, "max gap ratio {}", check.max_ratio);
        let quadrant = &check.gaps[0];
        assert_eq!(quadrant.set, "box[0,0.5]x[0,0.5]");
        assert_relative_eq!(quadrant.mass, 0.25, epsilon = 1e-15);
        assert!(quadrant.rows > 9_000);
    }

    #[test]
    fn pushforward_gaps_expose_a_wrong_map() {
        let model = canonical_example1(0.9);
        let sample = model.simulate(20_000, 19, false).unwrap();
        // Pulling back through a map with the wrong second-axis scale drags
        // quadrant shares far outside any binomial band.
        let wrong = example1_model(
            &DMatrix::identity(2, 2),
            &DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 1.25]),
            &DVector::zeros(2),
            &DVector::zeros(2),
            0.9,
        )
        .unwrap();
        let sets = crate::domain::default_probe_family(2).unwrap();
        let check = pushforward_gaps(&wrong, &sample, &sets, 3.0).unwrap();
        assert!(!check.pass);
        assert!(check.max_ratio > 10.0, "max gap ratio {}", check.max_ratio);
    }

    #[test]
    fn invalid_tables_are_rejected() {
        let table = DMatrix::from_row_slice(2, 2, &[0.9, 0.1, 0.2, 0.9]);
        let assignment =
            TreatmentAssignment { partition: CellPartition::Whole, tables: vec![table] };
        let model = StructuralModel::new(
            ReferenceMeasure::uniform_on_cube(2).unwrap(),
            canonical_example1(0.9).maps().to_vec(),
            vec![0.5, 0.5],
            assignment,
            RankCoupling::Invariance,
        );
        assert!(matches!(model, Err(Error::InvalidShares(_))));
    }

    #[test]
    fn csv_round_trip_preserves_observables() {
        let model = canonical_example1(0.9);
        let sample = model.simulate(64, 2, true).unwrap();
        let mut buf = Vec::new();
        sample.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("y1,y2,d,z,u1,u2,nu\n"));
        let back = ObservedSample::read_csv(&mut std::io::BufReader::new(&buf[..])).unwrap();
        assert_eq!(back.len(), sample.len());
        assert_eq!(back.treatments, sample.treatments);
        assert_eq!(back.instruments, sample.instruments);
        for i in 0..back.len() {
            assert_relative_eq!(back.outcomes[i], sample.outcomes[i], epsilon = 1e-12);
        }
    }

    #[test]
    fn model_implied_shares_integrate_cells() {
        let (violating, _) = rank_violation_pair().unwrap();
        // Cells have mass 1/2 each: P(D=0|Z=0) = (0.95 + 0.6) / 2.
        let share = violating.share(0, 0).unwrap();
        assert_relative_eq!(share, 0.775, epsilon = 1e-9);
    }
}
