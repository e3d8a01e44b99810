//! Regularization of differential expressions with distribution
//! coefficients into first-order systems, enumeration of the associated
//! matrices sharing one coefficient set, and the spectral data (Weyl
//! matrix, eigenvalues, weight matrices) that stay invariant across that
//! family.
//!
//! Module map:
//! - [`piecewise`]: exact piecewise-polynomial calculus on [0, 1], the
//!   carrier for every integrable coefficient.
//! - [`regularization`]: singularity orders, the anti-diagonal basis
//!   matrices, Q/F matrix classes, the bijection between them, coefficient
//!   reconstruction and the constructive family of associated matrices.
//! - [`spectral`]: fundamental matrices of the first-order system, Weyl
//!   matrices, characteristic functions, eigenvalue localization by the
//!   argument principle, and Laurent weight matrices.
//! - [`invariance`]: numerical certification that spectral data agrees
//!   across associated matrices of one coefficient set.
//! - [`sl2`]: the second-order showcase with closed-form cross-checks.
//! - Support: [`cmatrix`], [`gauss`], [`ratmat`], [`sampling`].

pub mod cmatrix;
pub mod error;
pub mod gauss;
pub mod piecewise;
pub mod ratmat;
pub mod regularization;
pub mod sampling;
pub mod sl2;
pub mod spectral;

pub use cmatrix::CMat;
pub use error::{Error, Result};
pub use num_complex::Complex64;
pub use piecewise::{NormKind, PiecewisePoly};
