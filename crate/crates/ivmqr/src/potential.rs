//! Convex potentials whose gradients serve as vector quantile maps.
//!
//! Three parameterizations are supported: quadratics `u'Au/2 + b'u + c`
//! with symmetric positive semidefinite `A`, smoothed maxima of affine
//! pieces (a log-sum-exp with temperature `t` plus an optional ridge
//! `kappa * |u|^2`), and sums of the two. Convexity is certified at
//! construction; strict monotonicity of the gradient is a separate,
//! grid-checked property of the induced map.

use crate::error::{Error, Result};
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

/// Default temperature multiplier for smoothed-max potentials, relative to
/// the domain diameter.
pub const DEFAULT_TEMPERATURE_FACTOR: f64 = 0.1;
/// Default ridge coefficient making smoothed maxima strictly convex.
pub const DEFAULT_RIDGE: f64 = 1e-3;

/// Quadratic potential `u'Au/2 + b'u + c` with symmetric PSD `A`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuadraticPotential {
    matrix: DMatrix<f64>,
    shift: DVector<f64>,
    constant: f64,
}

impl QuadraticPotential {
    pub fn new(matrix: DMatrix<f64>, shift: DVector<f64>, constant: f64) -> Result<Self> {
        let p = shift.len();
        if matrix.nrows() != p || matrix.ncols() != p {
            return Err(Error::DimensionMismatch { expected: p, got: matrix.nrows() });
        }
        let sym_defect = (&matrix - matrix.transpose()).abs().max();
        if sym_defect > 1e-9 {
            return Err(Error::NotConvex(format!(
                "quadratic part is not symmetric (defect {sym_defect:.3e})"
            )));
        }
        let min_eig = matrix
            .clone()
            .symmetric_eigen()
            .eigenvalues
            .iter()
            .fold(f64::INFINITY, |a, &b| a.min(b));
        if min_eig < -1e-9 {
            return Err(Error::NotConvex(format!(
                "quadratic part has negative eigenvalue {min_eig:.3e}"
            )));
        }
        Ok(Self { matrix, shift, constant })
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.matrix
    }

    pub fn shift(&self) -> &DVector<f64> {
        &self.shift
    }

    pub fn dim(&self) -> usize {
        self.shift.len()
    }

    pub fn value(&self, u: &DVector<f64>) -> f64 {
        0.5 * (u.transpose() * &self.matrix * u)[(0, 0)] + self.shift.dot(u) + self.constant
    }

    pub fn gradient(&self, u: &DVector<f64>) -> DVector<f64> {
        &self.matrix * u + &self.shift
    }

    pub fn hessian(&self, _u: &DVector<f64>) -> DMatrix<f64> {
        self.matrix.clone()
    }
}

/// Smoothed maximum of affine pieces plus an optional quadratic ridge.
///
/// `value(u) = t * log(sum_i exp((g_i'u + c_i) / t)) + kappa * |u|^2`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SmoothMaxPotential {
    slopes: Vec<DVector<f64>>,
    offsets: Vec<f64>,
    temperature: f64,
    ridge: f64,
}

impl SmoothMaxPotential {
    pub fn new(
        slopes: Vec<DVector<f64>>,
        offsets: Vec<f64>,
        temperature: f64,
        ridge: f64,
    ) -> Result<Self> {
        if slopes.is_empty() {
            return Err(Error::EmptyInput("smoothed max needs at least one piece".into()));
        }
        if slopes.len() != offsets.len() {
            return Err(Error::DimensionMismatch { expected: slopes.len(), got: offsets.len() });
        }
        let p = slopes[0].len();
        if slopes.iter().any(|g| g.len() != p) {
            return Err(Error::DimensionMismatch { expected: p, got: 0 });
        }
        if !(temperature > 0.0) {
            return Err(Error::InvalidParameter("temperature must be positive".into()));
        }
        if ridge < 0.0 {
            return Err(Error::InvalidParameter("ridge coefficient must be nonnegative".into()));
        }
        Ok(Self { slopes, offsets, temperature, ridge })
    }

    pub fn dim(&self) -> usize {
        self.slopes[0].len()
    }

    pub fn pieces(&self) -> usize {
        self.slopes.len()
    }

    pub fn slopes(&self) -> &[DVector<f64>] {
        &self.slopes
    }

    pub fn offsets(&self) -> &[f64] {
        &self.offsets
    }

    pub fn temperature(&self) -> f64 {
        self.temperature
    }

    pub fn ridge(&self) -> f64 {
        self.ridge
    }

    /// Softmax weights of the affine pieces at `u` (numerically stable).
    fn weights(&self, u: &DVector<f64>) -> Vec<f64> {
        let scaled: Vec<f64> = self
            .slopes
            .iter()
            .zip(&self.offsets)
            .map(|(g, c)| (g.dot(u) + c) / self.temperature)
            .collect();
        let m = scaled.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        let exps: Vec<f64> = scaled.iter().map(|&a| (a - m).exp()).collect();
        let total: f64 = exps.iter().sum();
        exps.into_iter().map(|e| e / total).collect()
    }

    pub fn value(&self, u: &DVector<f64>) -> f64 {
        let scaled: Vec<f64> = self
            .slopes
            .iter()
            .zip(&self.offsets)
            .map(|(g, c)| (g.dot(u) + c) / self.temperature)
            .collect();
        let m = scaled.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        let log_sum: f64 = scaled.iter().map(|&a| (a - m).exp()).sum::<f64>().ln() + m;
        self.temperature * log_sum + self.ridge * u.norm_squared()
    }

    pub fn gradient(&self, u: &DVector<f64>) -> DVector<f64> {
        let w = self.weights(u);
        let mut g = DVector::zeros(self.dim());
        for (wi, gi) in w.iter().zip(&self.slopes) {
            g += gi * *wi;
        }
        g + u * (2.0 * self.ridge)
    }

    pub fn hessian(&self, u: &DVector<f64>) -> DMatrix<f64> {
        // (1/t) * softmax covariance of the slopes, plus the ridge.
        let w = self.weights(u);
        let p = self.dim();
        let mut mean = DVector::zeros(p);
        for (wi, gi) in w.iter().zip(&self.slopes) {
            mean += gi * *wi;
        }
        let mut h = DMatrix::zeros(p, p);
        for (wi, gi) in w.iter().zip(&self.slopes) {
            h += (gi * gi.transpose()) * *wi;
        }
        h -= &mean * mean.transpose();
        h /= self.temperature;
        h + DMatrix::identity(p, p) * (2.0 * self.ridge)
    }
}

/// A certified-convex potential in one of the supported parameterizations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "parameterization")]
pub enum ConvexPotential {
    Quadratic(QuadraticPotential),
    SmoothMax(SmoothMaxPotential),
    Sum { quadratic: QuadraticPotential, smooth_max: SmoothMaxPotential },
}

impl ConvexPotential {
    pub fn quadratic(matrix: DMatrix<f64>, shift: DVector<f64>) -> Result<Self> {
        Ok(Self::Quadratic(QuadraticPotential::new(matrix, shift, 0.0)?))
    }

    pub fn smooth_max(
        slopes: Vec<DVector<f64>>,
        offsets: Vec<f64>,
        temperature: f64,
        ridge: f64,
    ) -> Result<Self> {
        Ok(Self::SmoothMax(SmoothMaxPotential::new(slopes, offsets, temperature, ridge)?))
    }

    pub fn sum(quadratic: QuadraticPotential, smooth_max: SmoothMaxPotential) -> Result<Self> {
        if quadratic.dim() != smooth_max.dim() {
            return Err(Error::DimensionMismatch {
                expected: quadratic.dim(),
                got: smooth_max.dim(),
            });
        }
        Ok(Self::Sum { quadratic, smooth_max })
    }

    pub fn dim(&self) -> usize {
        match self {
            Self::Quadratic(q) => q.dim(),
            Self::SmoothMax(s) => s.dim(),
            Self::Sum { quadratic, .. } => quadratic.dim(),
        }
    }

    pub fn value(&self, u: &DVector<f64>) -> f64 {
        match self {
            Self::Quadratic(q) => q.value(u),
            Self::SmoothMax(s) => s.value(u),
            Self::Sum { quadratic, smooth_max } => quadratic.value(u) + smooth_max.value(u),
        }
    }

    pub fn gradient(&self, u: &DVector<f64>) -> DVector<f64> {
        match self {
            Self::Quadratic(q) => q.gradient(u),
            Self::SmoothMax(s) => s.gradient(u),
            Self::Sum { quadratic, smooth_max } => {
                quadratic.gradient(u) + smooth_max.gradient(u)
            }
        }
    }

    pub fn hessian(&self, u: &DVector<f64>) -> DMatrix<f64> {
        match self {
            Self::Quadratic(q) => q.hessian(u),
            Self::SmoothMax(s) => s.hessian(u),
            Self::Sum { quadratic, smooth_max } => {
                quadratic.hessian(u) + smooth_max.hessian(u)
            }
        }
    }

    /// Serializes to the tagged JSON layout used by reports and the CLI.
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn v(xs: &[f64]) -> DVector<f64> {
        DVector::from_column_slice(xs)
    }

    /// Central-difference gradient oracle.
    fn fd_gradient(f: &dyn Fn(&DVector<f64>) -> f64, u: &DVector<f64>, h: f64) -> DVector<f64> {
        DVector::from_fn(u.len(), |i, _| {
            let mut up = u.clone();
            let mut dn = u.clone();
            up[i] += h;
            dn[i] -= h;
            (f(&up) - f(&dn)) / (2.0 * h)
        })
    }

    /// Central-difference Hessian oracle applied to an analytic gradient.
    fn fd_hessian(
        g: &dyn Fn(&DVector<f64>) -> DVector<f64>,
        u: &DVector<f64>,
        h: f64,
    ) -> DMatrix<f64> {
        let p = u.len();
        DMatrix::from_fn(p, p, |i, j| {
            let mut up = u.clone();
            let mut dn = u.clone();
            up[j] += h;
            dn[j] -= h;
            (g(&up)[i] - g(&dn)[i]) / (2.0 * h)
        })
    }

    #[test]
    fn quadratic_gradient_and_hessian_are_exact() {
        let a = DMatrix::from_row_slice(2, 2, &[2.0, 1.0, 1.0, 2.0]);
        let pot = ConvexPotential::quadratic(a.clone(), v(&[0.5, -0.25])).unwrap();
        let u = v(&[0.3, 0.7]);
        assert_relative_eq!(
            pot.gradient(&u),
            &a * &u + v(&[0.5, -0.25]),
            epsilon = 1e-14
        );
        assert_relative_eq!(pot.hessian(&u), a, epsilon = 1e-14);
    }

    #[test]
    fn rejects_non_symmetric_quadratic() {
        let a = DMatrix::from_row_slice(2, 2, &[1.0, 0.3, 0.0, 1.0]);
        assert!(matches!(
            ConvexPotential::quadratic(a, v(&[0.0, 0.0])),
            Err(Error::NotConvex(_))
        ));
    }

    #[test]
    fn rejects_negative_definite_quadratic() {
        let a = DMatrix::from_row_slice(2, 2, &[-1.0, 0.0, 0.0, -1.0]);
        assert!(matches!(
            ConvexPotential::quadratic(a, v(&[0.0, 0.0])),
            Err(Error::NotConvex(_))
        ));
    }

    #[test]
    fn accepts_singular_psd_quadratic() {
        // Rank-deficient but convex: admissible as a potential even though
        // the induced map cannot pass strict monotonicity checks.
        let a = DMatrix::from_row_slice(2, 2, &[0.5, 0.5, 0.5, 0.5]);
        assert!(ConvexPotential::quadratic(a, v(&[0.0, 0.0])).is_ok());
    }

    #[test]
    fn smooth_max_gradient_matches_finite_differences() {
        let pot = ConvexPotential::smooth_max(
            vec![v(&[0.0, 0.0]), v(&[1.0, 0.0]), v(&[0.0, 1.0])],
            vec![0.0, 0.1, -0.2],
            0.25,
            1e-3,
        )
        .unwrap();
        let u = v(&[0.4, 0.6]);
        let grad = pot.gradient(&u);
        let oracle = fd_gradient(&|x| pot.value(x), &u, 1e-6);
        assert!((grad - oracle).abs().max() < 1e-6);
    }

    #[test]
    fn smooth_max_hessian_matches_finite_differences() {
        let pot = ConvexPotential::smooth_max(
            vec![v(&[0.0, 0.0]), v(&[1.0, 0.2]), v(&[-0.3, 1.0])],
            vec![0.0, 0.05, 0.15],
            0.3,
            DEFAULT_RIDGE,
        )
        .unwrap();
        let u = v(&[0.25, 0.5]);
        let hess = pot.hessian(&u);
        let oracle = fd_hessian(&|x| pot.gradient(x), &u, 1e-5);
        assert!((hess.clone() - oracle).abs().max() < 1e-5);
        // The Hessian is symmetric positive definite thanks to the ridge.
        assert!((hess.clone() - hess.transpose()).abs().max() < 1e-12);
        let min_eig = hess.symmetric_eigen().eigenvalues.min();
        assert!(min_eig >= 2.0 * DEFAULT_RIDGE - 1e-12);
    }

    #[test]
    fn sum_potential_adds_parts() {
        let quad = QuadraticPotential::new(
            DMatrix::identity(2, 2),
            v(&[0.0, 0.0]),
            0.0,
        )
        .unwrap();
        let smax = SmoothMaxPotential::new(
            vec![v(&[0.0, 0.0]), v(&[1.0, 0.0])],
            vec![0.0, -0.5],
            0.2,
            0.0,
        )
        .unwrap();
        let sum = ConvexPotential::sum(quad.clone(), smax.clone()).unwrap();
        let u = v(&[0.6, 0.1]);
        assert_relative_eq!(sum.value(&u), quad.value(&u) + smax.value(&u), epsilon = 1e-14);
        assert_relative_eq!(
            sum.gradient(&u),
            quad.gradient(&u) + smax.gradient(&u),
            epsilon = 1e-14
        );
    }

    #[test]
    fn json_round_trip_preserves_evaluations() {
        let pot = ConvexPotential::smooth_max(
            vec![v(&[0.0, 0.0]), v(&[1.0, 0.0]), v(&[0.0, 1.0])],
            vec![0.0, 0.25, -0.25],
            0.15,
            1e-3,
        )
        .unwrap();
        let text = pot.to_json().unwrap();
        assert!(text.contains("parameterization"));
        let back = ConvexPotential::from_json(&text).unwrap();
        let u = v(&[0.3, 0.9]);
        assert_relative_eq!(pot.value(&u), back.value(&u), epsilon = 1e-15);
        assert_relative_eq!(pot.gradient(&u), back.gradient(&u), epsilon = 1e-15);
    }
}
