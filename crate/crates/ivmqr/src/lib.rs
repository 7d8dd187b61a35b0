//! Numerical laboratory for instrumental-variable multivariate quantile
//! models built on vector quantile maps (gradients of convex potentials).
//!
//! The crate covers the full experimental loop: reference domains and
//! quadrature ([`domain`]), certified-convex potentials and quantile maps
//! ([`potential`], [`transport`]), structural data generation ([`model`]),
//! exact and kernel conditional densities ([`densities`]), identification
//! diagnostics ([`identification`]), the linearized measure-valued system
//! ([`linearization`]), and discretized estimation ([`solver`]).

pub mod assignment;
pub mod densities;
pub mod domain;
pub mod error;
pub mod identification;
pub mod linearization;
pub mod model;
pub mod potential;
pub mod solver;
pub mod transport;

pub use error::{Error, Result};
