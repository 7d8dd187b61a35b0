//! Identification condition checkers: the quantitative correlation
//! condition on density quadruples, the monotone-likelihood-ratio
//! comparison it implies, the scalar matrix condition, the pointwise
//! quadratic-form positivity at the heart of the local argument, and its
//! multi-instrument block generalization.
//!
//! Almost-everywhere conditions are audited on tensor grids over the
//! identified supports; each checker reports a signed worst-case margin so
//! failures carry magnitudes and minimizers instead of bare booleans.

use crate::densities::{box_midpoint_grid, exact_density, DensityField};
use crate::domain::QuadratureGrid;
use crate::error::{Error, Result};
use crate::linearization::cofactor_matrix;
use crate::model::StructuralModel;
use crate::transport::{MapLike, QuantileMap};
use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

/// The four conditional densities `f_{d,z}` of a binary design.
#[derive(Debug, Clone)]
pub struct FieldQuadruple {
    pub f00: DensityField,
    pub f01: DensityField,
    pub f10: DensityField,
    pub f11: DensityField,
}

impl FieldQuadruple {
    /// Exact conditional densities of a binary-instrument structural model.
    pub fn from_model(model: &StructuralModel) -> Result<Self> {
        if model.treatments() != 2 {
            return Err(Error::InvalidParameter(
                "field quadruple requires a binary design".into(),
            ));
        }
        Ok(Self {
            f00: exact_density(model, 0, 0)?,
            f01: exact_density(model, 0, 1)?,
            f10: exact_density(model, 1, 0)?,
            f11: exact_density(model, 1, 1)?,
        })
    }

    pub fn field(&self, d: usize, z: usize) -> &DensityField {
        match (d, z) {
            (0, 0) => &self.f00,
            (0, 1) => &self.f01,
            (1, 0) => &self.f10,
            (1, 1) => &self.f11,
            _ => panic!("binary indices expected"),
        }
    }

    pub fn provenance(&self) -> String {
        let tag = |f: &DensityField| match f {
            DensityField::Exact(_) => "exact",
            DensityField::Kernel(_) => "kernel",
            DensityField::Const(_) => "const",
        };
        let tags = [tag(&self.f00), tag(&self.f01), tag(&self.f10), tag(&self.f11)];
        if tags.iter().all(|t| *t == tags[0]) {
            tags[0].to_string()
        } else {
            "mixed".to_string()
        }
    }

    pub fn dim(&self) -> usize {
        self.f00.support_box().0.len()
    }
}

/// Tensor evaluation grid over the two outcome supports with per-node
/// density values precomputed, so pair sweeps are pure arithmetic.
#[derive(Debug, Clone)]
pub struct PairGrid {
    pub nodes0: Vec<DVector<f64>>,
    pub f00: Vec<f64>,
    pub f01: Vec<f64>,
    pub nodes1: Vec<DVector<f64>>,
    pub f10: Vec<f64>,
    pub f11: Vec<f64>,
    pub resolution: usize,
    /// Grid nodes discarded because both densities vanish there.
    pub dropped0: usize,
    pub dropped1: usize,
}

fn union_box(
    a: (DVector<f64>, DVector<f64>),
    b: (DVector<f64>, DVector<f64>),
) -> (DVector<f64>, DVector<f64>) {
    let p = a.0.len();
    (
        DVector::from_fn(p, |j, _| a.0[j].min(b.0[j])),
        DVector::from_fn(p, |j, _| a.1[j].max(b.1[j])),
    )
}

/// Builds the support-restricted pair grid for a field quadruple.
pub fn build_pair_grid(quad: &FieldQuadruple, resolution: usize) -> Result<PairGrid> {
    let side = |fa: &DensityField,
                fb: &DensityField|
     -> Result<(Vec<DVector<f64>>, Vec<f64>, Vec<f64>, usize)> {
        let (lo, hi) = union_box(fa.support_box(), fb.support_box());
        let (nodes, _) = box_midpoint_grid(&lo, &hi, resolution)?;
        let mut kept = Vec::new();
        let mut va = Vec::new();
        let mut vb = Vec::new();
        let mut dropped = 0usize;
        for node in nodes {
            let a = fa.eval(&node)?;
            let b = fb.eval(&node)?;
            if a == 0.0 && b == 0.0 {
                dropped += 1;
                continue;
            }
            kept.push(node);
            va.push(a);
            vb.push(b);
        }
        if kept.is_empty() {
            return Err(Error::EmptySupport);
        }
        Ok((kept, va, vb, dropped))
    };
    let (nodes0, f00, f01, dropped0) = side(&quad.f00, &quad.f01)?;
    let (nodes1, f10, f11, dropped1) = side(&quad.f10, &quad.f11)?;
    Ok(PairGrid { nodes0, f00, f01, nodes1, f10, f11, resolution, dropped0, dropped1 })
}

/// Signed audit result of one identification condition.
#[derive(Debug, Clone, serde::Serialize)]
pub struct ConditionReport {
    pub condition: String,
    /// Worst case of LHS - RHS over the audited grid; positive means pass.
    pub margin: f64,
    /// Minimizing pair (or node) in outcome coordinates.
    pub minimizer: Option<(Vec<f64>, Vec<f64>)>,
    pub pass: bool,
    pub resolution: usize,
    pub provenance: String,
    pub pairs_checked: usize,
    pub pairs_skipped: usize,
    pub notes: String,
}

/// Checks the quantitative correlation condition
/// `4 f00(y0) f11(y1) > (lambda_hi/lambda_lo)^(p+1) (f01(y0) + f10(y1))^2`
/// over the support pair grid.
pub fn check_condition_12(
    quad: &FieldQuadruple,
    lambda_lo: f64,
    lambda_hi: f64,
    resolution: usize,
) -> Result<ConditionReport> {
    if !(0.0 < lambda_lo && lambda_lo < lambda_hi) {
        return Err(Error::InvalidParameter(
            "eigenvalue bounds require 0 < lambda_lo < lambda_hi".into(),
        ));
    }
    let p = quad.dim();
    let factor = (lambda_hi / lambda_lo).powi(p as i32 + 1);
    let grid = build_pair_grid(quad, resolution)?;
    let mut margin = f64::INFINITY;
    let mut minimizer = None;
    let mut checked = 0usize;
    let mut skipped = 0usize;
    for (i, (&a00, &a01)) in grid.f00.iter().zip(&grid.f01).enumerate() {
        for (j, (&b10, &b11)) in grid.f10.iter().zip(&grid.f11).enumerate() {
            if a00 == 0.0 && a01 == 0.0 && b10 == 0.0 && b11 == 0.0 {
                skipped += 1;
                continue;
            }
            checked += 1;
            let value = 4.0 * a00 * b11 - factor * (a01 + b10) * (a01 + b10);
            if value < margin {
                margin = value;
                minimizer = Some((
                    grid.nodes0[i].iter().copied().collect(),
                    grid.nodes1[j].iter().copied().collect(),
                ));
            }
        }
    }
    Ok(ConditionReport {
        condition: "condition-12".into(),
        margin,
        minimizer,
        pass: margin > 0.0,
        resolution,
        provenance: quad.provenance(),
        pairs_checked: checked,
        pairs_skipped: skipped + grid.dropped0 + grid.dropped1,
        notes: format!("ratio factor (lambda_hi/lambda_lo)^(p+1) = {factor:.6}"),
    })
}

/// Checks the strict monotone likelihood ratio comparison
/// `f11(y1) f00(y0) > f10(y1) f01(y0)` in product form, skipping pairs
/// where a ratio denominator vanishes.
pub fn check_mlr(quad: &FieldQuadruple, resolution: usize) -> Result<ConditionReport> {
    let grid = build_pair_grid(quad, resolution)?;
    let mut margin = f64::INFINITY;
    let mut minimizer = None;
    let mut checked = 0usize;
    let mut skipped = 0usize;
    for (i, (&a00, &a01)) in grid.f00.iter().zip(&grid.f01).enumerate() {
        for (j, (&b10, &b11)) in grid.f10.iter().zip(&grid.f11).enumerate() {
            // The ratio form divides by f01(y0) and f00(y0).
            if a00 == 0.0 || a01 == 0.0 {
                skipped += 1;
                continue;
            }
            checked += 1;
            let value = b11 * a00 - b10 * a01;
            if value < margin {
                margin = value;
                minimizer = Some((
                    grid.nodes0[i].iter().copied().collect(),
                    grid.nodes1[j].iter().copied().collect(),
                ));
            }
        }
    }
    if checked == 0 {
        return Err(Error::EmptySupport);
    }
    Ok(ConditionReport {
        condition: "monotone-likelihood-ratio".into(),
        margin,
        minimizer,
        pass: margin > 0.0,
        resolution,
        provenance: quad.provenance(),
        pairs_checked: checked,
        pairs_skipped: skipped + grid.dropped0 + grid.dropped1,
        notes: String::new(),
    })
}

/// Scalar-outcome matrix condition: the symmetrized pair matrix
/// `F = [[f00(y0), f01(y0)], [f10(y1), f11(y1)]]` must be positive definite
/// for almost all pairs. With `allow_relabel`, a global instrument column
/// swap is tried when the plain labeling fails.
pub fn check_pd_matrix_p1(
    quad: &FieldQuadruple,
    resolution: usize,
    allow_relabel: bool,
) -> Result<ConditionReport> {
    if quad.dim() != 1 {
        return Err(Error::DimensionMismatch { expected: 1, got: quad.dim() });
    }
    let grid = build_pair_grid(quad, resolution)?;
    let sweep = |swap: bool| -> (f64, Option<(Vec<f64>, Vec<f64>)>) {
        let mut margin = f64::INFINITY;
        let mut minimizer = None;
        for (i, (&a00, &a01)) in grid.f00.iter().zip(&grid.f01).enumerate() {
            for (j, (&b10, &b11)) in grid.f10.iter().zip(&grid.f11).enumerate() {
                let (top, bottom) = if swap { ((a01, a00), (b11, b10)) } else { ((a00, a01), (b10, b11)) };
                // Smallest eigenvalue of the symmetrized 2x2 matrix.
                let off = 0.5 * (top.1 + bottom.0);
                let tr = top.0 + bottom.1;
                let det = top.0 * bottom.1 - off * off;
                let disc = (tr * tr / 4.0 - det).max(0.0).sqrt();
                let eig_min = tr / 2.0 - disc;
                if eig_min < margin {
                    margin = eig_min;
                    minimizer = Some((
                        grid.nodes0[i].iter().copied().collect(),
                        grid.nodes1[j].iter().copied().collect(),
                    ));
                }
            }
        }
        (margin, minimizer)
    };
    let (plain, plain_min) = sweep(false);
    let pairs = grid.f00.len() * grid.f10.len();
    let base = ConditionReport {
        condition: "p1-matrix".into(),
        margin: plain,
        minimizer: plain_min,
        pass: plain > 0.0,
        resolution,
        provenance: quad.provenance(),
        pairs_checked: pairs,
        pairs_skipped: grid.dropped0 + grid.dropped1,
        notes: String::new(),
    };
    if base.pass || !allow_relabel {
        return Ok(base);
    }
    let (swapped, swapped_min) = sweep(true);
    if swapped > 0.0 {
        Ok(ConditionReport {
            margin: swapped,
            minimizer: swapped_min,
            pass: true,
            notes: "passes after instrument relabeling (column swap)".into(),
            ..base
        })
    } else {
        Ok(ConditionReport {
            notes: format!("fails under both labelings (swapped margin {swapped:.6})"),
            ..base
        })
    }
}

/// Pointwise quadratic-form audit at a single interior rank `u`.
#[derive(Debug, Clone, serde::Serialize)]
pub struct QuadraticFormReport {
    /// Minimum of the form over sampled unit directions.
    pub sampled_min: f64,
    /// Smallest eigenvalue of the assembled symmetric block form.
    pub exact_min: f64,
    pub worst_direction: Vec<f64>,
    pub samples: usize,
}

/// Assembles the symmetric `2p x 2p` block form with `(z, d)` block
/// `f_{d,z}(q_d(u)) cof(Dq_d(u))` and minimizes `xi' M xi` both exactly
/// (eigenvalue) and over sampled unit directions.
pub fn quadratic_form_min(
    maps: &[QuantileMap],
    quad: &FieldQuadruple,
    u: &DVector<f64>,
    sphere_samples: usize,
    seed: u64,
) -> Result<QuadraticFormReport> {
    if maps.len() != 2 {
        return Err(Error::InvalidParameter("binary design expected".into()));
    }
    let p = u.len();
    let mut m = DMatrix::zeros(2 * p, 2 * p);
    for d in 0..2 {
        let y = maps[d].eval(u)?;
        let cof = cofactor_matrix(&maps[d].jacobian(u)?)?;
        for z in 0..2 {
            let f = quad.field(d, z).eval(&y)?;
            // xi_z' cof_d xi_d term: block row z, block column d.
            for r in 0..p {
                for c in 0..p {
                    m[(z * p + r, d * p + c)] += f * cof[(r, c)];
                }
            }
        }
    }
    let sym = (&m + m.transpose()) * 0.5;
    let exact_min = sym.clone().symmetric_eigen().eigenvalues.min();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut sampled_min = f64::INFINITY;
    let mut worst = DVector::zeros(2 * p);
    for _ in 0..sphere_samples {
        let mut xi = DVector::from_fn(2 * p, |_, _| {
            let g: f64 = StandardNormal.sample(&mut rng);
            g
        });
        let norm = xi.norm();
        if norm == 0.0 {
            continue;
        }
        xi /= norm;
        let value = (xi.transpose() * &sym * &xi)[(0, 0)];
        if value < sampled_min {
            sampled_min = value;
            worst = xi;
        }
    }
    Ok(QuadraticFormReport {
        sampled_min,
        exact_min,
        worst_direction: worst.iter().copied().collect(),
        samples: sphere_samples,
    })
}

/// Block generalization for m instruments/treatments: at each grid node `u`
/// the `mp x mp` matrix with `(d', d)` block
/// `(sum_z b_{d',z} f_{d,z}(q_d(u))) cof(Dq_d(u))` must be positive
/// definite in the quadratic-form sense.
pub fn check_general_condition(
    b: &DMatrix<f64>,
    fields: &[Vec<DensityField>],
    maps: &[QuantileMap],
    grid: &QuadratureGrid,
) -> Result<ConditionReport> {
    let m = maps.len();
    if !(2..=3).contains(&m) {
        return Err(Error::InvalidParameter("m must be 2 or 3".into()));
    }
    if b.nrows() != m || b.ncols() != m {
        return Err(Error::InvalidParameter(format!(
            "b matrix must be {m}x{m}, got {}x{}",
            b.nrows(),
            b.ncols()
        )));
    }
    if fields.len() != m || fields.iter().any(|row| row.len() != m) {
        return Err(Error::DimensionMismatch { expected: m, got: fields.len() });
    }
    let p = maps[0].dim();
    let mut margin = f64::INFINITY;
    let mut minimizer = None;
    for node in grid.nodes() {
        let mut block = DMatrix::zeros(m * p, m * p);
        for d in 0..m {
            let y = maps[d].eval(node)?;
            let cof = cofactor_matrix(&maps[d].jacobian(node)?)?;
            for d_prime in 0..m {
                let mut scalar = 0.0;
                for z in 0..m {
                    scalar += b[(d_prime, z)] * fields[d][z].eval(&y)?;
                }
                for r in 0..p {
                    for c in 0..p {
                        block[(d_prime * p + r, d * p + c)] += scalar * cof[(r, c)];
                    }
                }
            }
        }
        let sym = (&block + block.transpose()) * 0.5;
        let eig_min = sym.symmetric_eigen().eigenvalues.min();
        if eig_min < margin {
            margin = eig_min;
            minimizer = Some((node.iter().copied().collect(), node.iter().copied().collect()));
        }
    }
    Ok(ConditionReport {
        condition: "general-block-condition".into(),
        margin,
        minimizer,
        pass: margin > 0.0,
        resolution: grid.len(),
        provenance: "model".into(),
        pairs_checked: grid.len(),
        pairs_skipped: 0,
        notes: format!("m = {m}, block size {}", m * p),
    })
}

/// Heuristic candidate b-matrices for the block condition: the identity,
/// the inverse of the share matrix when it exists, and the row-normalized
/// share matrix.
pub fn candidate_b_matrices(shares: &DMatrix<f64>) -> Vec<(String, DMatrix<f64>)> {
    let m = shares.nrows();
    let mut out = vec![("identity".to_string(), DMatrix::identity(m, m))];
    if let Some(inv) = shares.clone().try_inverse() {
        if inv.iter().all(|v| v.is_finite()) {
            out.push(("share-inverse".to_string(), inv));
        }
    }
    let mut normalized = shares.clone();
    let mut ok = true;
    for d in 0..m {
        let row_sum: f64 = shares.row(d).iter().sum();
        if row_sum <= 0.0 {
            ok = false;
            break;
        }
        for z in 0..shares.ncols() {
            normalized[(d, z)] /= row_sum;
        }
    }
    if ok {
        out.push(("row-normalized".to_string(), normalized));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::densities::ConstDensity;
    use crate::domain::ReferenceMeasure;
    use crate::model::example1_model;
    use crate::potential::ConvexPotential;
    use approx::assert_relative_eq;
    use rand::Rng;

    fn identity_model(compliance: f64) -> StructuralModel {
        example1_model(
            &DMatrix::identity(2, 2),
            &DMatrix::identity(2, 2),
            &DVector::zeros(2),
            &DVector::zeros(2),
            compliance,
        )
        .unwrap()
    }

    fn const_field(value: f64, p: usize) -> DensityField {
        DensityField::Const(ConstDensity {
            value,
            lo: DVector::zeros(p),
            hi: DVector::from_element(p, 1.0),
        })
    }

    fn const_quadruple(f00: f64, f01: f64, f10: f64, f11: f64, p: usize) -> FieldQuadruple {
        FieldQuadruple {
            f00: const_field(f00, p),
            f01: const_field(f01, p),
            f10: const_field(f10, p),
            f11: const_field(f11, p),
        }
    }

    fn identity_map(p: usize) -> QuantileMap {
        let measure = ReferenceMeasure::uniform_on_cube(p).unwrap();
        QuantileMap::new(
            ConvexPotential::quadratic(DMatrix::identity(p, p), DVector::zeros(p)).unwrap(),
            *measure.domain(),
        )
        .unwrap()
    }

    #[test]
    fn margin_arithmetic_at_nine_tenths_compliance() {
        let quad = FieldQuadruple::from_model(&identity_model(0.9)).unwrap();
        let report = check_condition_12(&quad, 0.8, 1.6, 50).unwrap();
        // 4 * 0.81 - 2^3 * (0.2)^2 = 3.24 - 0.32.
        assert_relative_eq!(report.margin, 2.92, epsilon = 1e-9);
        assert!(report.pass);
        assert_eq!(report.provenance, "exact");
    }

    #[test]
    fn margin_arithmetic_fails_at_seven_tenths_with_wide_box() {
        let quad = FieldQuadruple::from_model(&identity_model(0.7)).unwrap();
        let report = check_condition_12(&quad, 0.5, 2.0, 50).unwrap();
        // 4 * 0.49 - 4^3 * (0.6)^2 = 1.96 - 23.04.
        assert_relative_eq!(report.margin, -21.08, epsilon = 1e-9);
        assert!(!report.pass);
    }

    #[test]
    fn perfect_compliance_drops_the_cross_terms() {
        let quad = FieldQuadruple::from_model(&identity_model(1.0)).unwrap();
        let report = check_condition_12(&quad, 0.25, 4.0, 40).unwrap();
        assert_relative_eq!(report.margin, 4.0, epsilon = 1e-9);
        assert!(report.pass);
    }

    #[test]
    fn invalid_eigen_bounds_are_rejected() {
        let quad = const_quadruple(0.9, 0.1, 0.1, 0.9, 1);
        assert!(check_condition_12(&quad, 1.5, 1.0, 10).is_err());
        assert!(check_condition_12(&quad, 0.0, 1.0, 10).is_err());
    }

    #[test]
    fn mlr_margins_match_the_share_arithmetic() {
        let strong = check_mlr(&FieldQuadruple::from_model(&identity_model(0.9)).unwrap(), 40)
            .unwrap();
        assert_relative_eq!(strong.margin, 0.8, epsilon = 1e-9);
        assert!(strong.pass);
        let boundary = check_mlr(&FieldQuadruple::from_model(&identity_model(0.5)).unwrap(), 40)
            .unwrap();
        assert_relative_eq!(boundary.margin, 0.0, epsilon = 1e-12);
        assert!(!boundary.pass, "equality must not count as a pass");
    }

    #[test]
    fn condition_12_implies_strict_mlr_on_random_quadruples() {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let mut passes = 0usize;
        for _ in 0..1000 {
            let f00 = rng.gen_range(0.05..1.2);
            let f11 = rng.gen_range(0.05..1.2);
            let f01 = rng.gen_range(0.0..0.6);
            let f10 = rng.gen_range(0.0..0.6);
            let lo = rng.gen_range(0.2..1.0);
            let hi = lo * rng.gen_range(1.01..4.0);
            let quad = const_quadruple(f00, f01, f10, f11, 1);
            let cond = check_condition_12(&quad, lo, hi, 3).unwrap();
            if cond.pass {
                passes += 1;
                let mlr = check_mlr(&quad, 3).unwrap();
                assert!(
                    mlr.pass,
                    "condition-12 margin {} but MLR margin {}",
                    cond.margin, mlr.margin
                );
            }
        }
        assert!(passes > 50, "only {passes} passing draws; sweep is vacuous");
    }

    #[test]
    fn p1_matrix_margins_and_relabeling() {
        let ok = check_pd_matrix_p1(&const_quadruple(0.9, 0.1, 0.1, 0.9, 1), 20, false).unwrap();
        assert_relative_eq!(ok.margin, 0.8, epsilon = 1e-12);
        assert!(ok.pass);
        let singular =
            check_pd_matrix_p1(&const_quadruple(0.5, 0.5, 0.5, 0.5, 1), 20, false).unwrap();
        assert_relative_eq!(singular.margin, 0.0, epsilon = 1e-12);
        assert!(!singular.pass);
        // Mostly-defier labeling fails outright but passes after a column swap.
        let defier = const_quadruple(0.1, 0.9, 0.9, 0.1, 1);
        let plain = check_pd_matrix_p1(&defier, 20, false).unwrap();
        assert_relative_eq!(plain.margin, -0.8, epsilon = 1e-12);
        assert!(!plain.pass);
        let relabeled = check_pd_matrix_p1(&defier, 20, true).unwrap();
        assert!(relabeled.pass);
        assert_relative_eq!(relabeled.margin, 0.8, epsilon = 1e-12);
        assert!(relabeled.notes.contains("relabeling"));
    }

    #[test]
    fn p1_checker_rejects_multivariate_fields() {
        let quad = const_quadruple(0.9, 0.1, 0.1, 0.9, 2);
        assert!(matches!(
            check_pd_matrix_p1(&quad, 10, false),
            Err(Error::DimensionMismatch { expected: 1, .. })
        ));
    }

    #[test]
    fn quadratic_form_identity_model_eigenvalues() {
        let maps = vec![identity_map(2), identity_map(2)];
        let quad = const_quadruple(0.9, 0.1, 0.1, 0.9, 2);
        let u = DVector::from_column_slice(&[0.3, 0.7]);
        let report = quadratic_form_min(&maps, &quad, &u, 100, 7).unwrap();
        // Block matrix [[0.9 I, 0.1 I], [0.1 I, 0.9 I]]: eigenvalues 0.8, 1.0.
        assert_relative_eq!(report.exact_min, 0.8, epsilon = 1e-12);
        assert!(report.sampled_min >= report.exact_min - 1e-12);
    }

    #[test]
    fn sampled_minimum_tightens_with_more_draws() {
        let maps = vec![identity_map(2), identity_map(2)];
        let quad = const_quadruple(0.9, 0.1, 0.1, 0.9, 2);
        let u = DVector::from_column_slice(&[0.5, 0.5]);
        let coarse = quadratic_form_min(&maps, &quad, &u, 100, 11).unwrap();
        let fine = quadratic_form_min(&maps, &quad, &u, 100_000, 11).unwrap();
        // Same stream prefix: the fine run extends the coarse draw set.
        assert!(fine.sampled_min <= coarse.sampled_min);
        assert!(fine.sampled_min - fine.exact_min < 5e-3);
        assert!(fine.exact_min <= fine.sampled_min);
    }

    #[test]
    fn violating_quadruple_exposes_a_negative_direction() {
        let maps = vec![identity_map(2), identity_map(2)];
        let quad = const_quadruple(0.1, 0.9, 0.9, 0.1, 2);
        let u = DVector::from_column_slice(&[0.4, 0.6]);
        let report = quadratic_form_min(&maps, &quad, &u, 10_000, 3).unwrap();
        assert_relative_eq!(report.exact_min, -0.8, epsilon = 1e-12);
        assert!(report.sampled_min < 0.0, "sampled min {}", report.sampled_min);
    }

    #[test]
    fn general_condition_with_identity_b_matches_the_quadratic_form() {
        let maps = vec![identity_map(2), identity_map(2)];
        let quad = const_quadruple(0.9, 0.1, 0.1, 0.9, 2);
        let fields = vec![
            vec![quad.f00.clone(), quad.f01.clone()],
            vec![quad.f10.clone(), quad.f11.clone()],
        ];
        let grid = QuadratureGrid::build(*ReferenceMeasure::uniform_on_cube(2).unwrap().domain(), 5)
            .unwrap();
        let report =
            check_general_condition(&DMatrix::identity(2, 2), &fields, &maps, &grid).unwrap();
        assert_relative_eq!(report.margin, 0.8, epsilon = 1e-12);
        assert!(report.pass);
        // Sign agreement with the pointwise form at an arbitrary node.
        let qf = quadratic_form_min(&maps, &quad, &grid.nodes()[7], 10, 1).unwrap();
        assert_relative_eq!(report.margin, qf.exact_min, epsilon = 1e-12);
    }

    #[test]
    fn zero_b_matrix_fails_with_zero_margin() {
        let maps = vec![identity_map(2), identity_map(2)];
        let quad = const_quadruple(0.9, 0.1, 0.1, 0.9, 2);
        let fields = vec![
            vec![quad.f00.clone(), quad.f01.clone()],
            vec![quad.f10.clone(), quad.f11.clone()],
        ];
        let grid = QuadratureGrid::build(*ReferenceMeasure::uniform_on_cube(2).unwrap().domain(), 4)
            .unwrap();
        let report =
            check_general_condition(&DMatrix::zeros(2, 2), &fields, &maps, &grid).unwrap();
        assert_relative_eq!(report.margin, 0.0, epsilon = 1e-15);
        assert!(!report.pass);
    }

    #[test]
    fn three_instrument_diagonal_dominant_design_passes() {
        let maps = vec![identity_map(2), identity_map(2), identity_map(2)];
        let mut fields = Vec::new();
        for d in 0..3 {
            let mut row = Vec::new();
            for z in 0..3 {
                row.push(const_field(if d == z { 0.8 } else { 0.1 }, 2));
            }
            fields.push(row);
        }
        let grid = QuadratureGrid::build(*ReferenceMeasure::uniform_on_cube(2).unwrap().domain(), 4)
            .unwrap();
        let report =
            check_general_condition(&DMatrix::identity(3, 3), &fields, &maps, &grid).unwrap();
        // Share matrix eigenvalues {0.7, 0.7, 0.9}.
        assert_relative_eq!(report.margin, 0.7, epsilon = 1e-9);
        assert!(report.pass);
    }

    #[test]
    fn rectangular_b_matrix_is_rejected() {
        let maps = vec![identity_map(2), identity_map(2)];
        let quad = const_quadruple(0.9, 0.1, 0.1, 0.9, 2);
        let fields = vec![
            vec![quad.f00.clone(), quad.f01.clone()],
            vec![quad.f10.clone(), quad.f11.clone()],
        ];
        let grid = QuadratureGrid::build(*ReferenceMeasure::uniform_on_cube(2).unwrap().domain(), 3)
            .unwrap();
        let bad = DMatrix::zeros(2, 3);
        assert!(check_general_condition(&bad, &fields, &maps, &grid).is_err());
    }

    #[test]
    fn candidate_b_matrices_cover_the_heuristics() {
        let shares = DMatrix::from_row_slice(2, 2, &[0.9, 0.1, 0.1, 0.9]);
        let candidates = candidate_b_matrices(&shares);
        let names: Vec<&str> = candidates.iter().map(|(n, _)| n.as_str()).collect();
        assert_eq!(names, vec!["identity", "share-inverse", "row-normalized"]);
        let singular = DMatrix::from_row_slice(2, 2, &[0.5, 0.5, 0.5, 0.5]);
        let names: Vec<String> =
            candidate_b_matrices(&singular).into_iter().map(|(n, _)| n).collect();
        assert!(!names.contains(&"share-inverse".to_string()));
    }

    #[test]
    fn pair_grid_drops_nodes_outside_both_supports() {
        // f00 lives on [0, 0.3], f01 on [0.6, 0.9]: the union box [0, 0.9]
        // contains a dead zone in between whose nodes must be dropped.
        let quad = FieldQuadruple {
            f00: DensityField::Const(ConstDensity {
                value: 1.0,
                lo: DVector::from_element(1, 0.0),
                hi: DVector::from_element(1, 0.3),
            }),
            f01: DensityField::Const(ConstDensity {
                value: 1.0,
                lo: DVector::from_element(1, 0.6),
                hi: DVector::from_element(1, 0.9),
            }),
            f10: const_field(0.5, 1),
            f11: const_field(0.5, 1),
        };
        let grid = build_pair_grid(&quad, 30).unwrap();
        assert!(grid.dropped0 > 5, "dropped {} nodes", grid.dropped0);
        assert_eq!(grid.dropped1, 0);
        assert_eq!(grid.nodes0.len() + grid.dropped0, 30);
    }

    #[test]
    fn reports_serialize_to_json() {
        let quad = FieldQuadruple::from_model(&identity_model(0.9)).unwrap();
        let report = check_condition_12(&quad, 0.8, 1.6, 10).unwrap();
        let text = serde_json::to_string(&report).unwrap();
        assert!(text.contains("\"condition\":\"condition-12\""));
        assert!(text.contains("\"pass\":true"));
    }
}
