//! Bayesian inference for the discrete-choice multinomial probit model with
//! an independent zero-mean Gaussian prior on the class coefficients.
//!
//! The crate provides the exact unified skew-normal (SUN) posterior with an
//! i.i.d. sampler, the partially-factorized blocked mean-field (PFM-B)
//! variational approximation fitted by coordinate ascent, and the
//! multivariate normal machinery both rely on.

pub mod error;
pub mod mvn;

pub use error::{MnpError, Result};
pub mod model;
pub mod sun;
pub mod pfm;
pub mod io;
