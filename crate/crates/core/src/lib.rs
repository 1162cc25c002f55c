//! Nonparametric tests and simultaneous confidence bands for a causal dose-response curve.
//!
//! The pipeline runs on an [`ObservationSet`] of covariates `W`, a continuous exposure `A`
//! and an outcome `Y`:
//!
//! 1. fit the outcome regression and the conditional exposure density ([`nuisance`]);
//! 2. estimate inner products of the centered curve with a truncated Sobolev eigenbasis
//!    ([`basis`], [`eif`], [`tml`]);
//! 3. maximize over a roughness-bounded unit-variance class in closed form ([`qcqp`]);
//! 4. calibrate with a Gaussian multiplier bootstrap ([`sup_test`]);
//! 5. invert the test into a simultaneous band ([`bands`]).
//!
//! [`sim`] reproduces the synthetic study used to check size, power and coverage.
//!
//! ```
//! use drinfer::basis::SobolevBasis;
//!
//! let basis = SobolevBasis::new(2);
//! let eta = basis.eval(0.25);
//! assert!(eta[0].abs() < 1e-15);
//! assert!((eta[1] - 2f64.sqrt()).abs() < 1e-15);
//! ```

// `!(x > 0.0)` is used on purpose so that NaN fails the check.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod bands;
pub mod basis;
pub mod data;
pub mod eif;
pub mod error;
pub mod nuisance;
pub mod numerics;
pub mod qcqp;
pub mod sim;
pub mod tml;

pub use basis::{BasisFunction, FunctionClassSpec, SobolevBasis};
pub use data::{NullCurve, ObservationSet};
pub use error::{Error, Result};

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/data.md")]
    mod data {}
    #[doc = include_str!("../../../book/src/basis.md")]
    mod basis {}
    #[doc = include_str!("../../../book/src/nuisance.md")]
    mod nuisance {}
    #[doc = include_str!("../../../book/src/estimators.md")]
    mod estimators {}
    #[doc = include_str!("../../../book/src/testing.md")]
    mod testing {}
    #[doc = include_str!("../../../book/src/bands.md")]
    mod bands {}
    #[doc = include_str!("../../../book/src/simulation.md")]
    mod simulation {}
}
