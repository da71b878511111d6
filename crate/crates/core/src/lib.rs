//! Numerical laboratory for information-theoretic causation measures in
//! stochastic dynamics.
//!
//! The library computes how strongly a perturbation of one coordinate of a
//! stationary stochastic process informs the future of another coordinate,
//! expressed as a ratio of KL divergences (the information response), and
//! relates it to transfer entropy and classical linear response. Two routes
//! are provided and cross-validated against each other:
//!
//! * closed forms for stable linear (Ornstein-Uhlenbeck) systems, built on
//!   Gaussian conditioning ([`gauss`], [`analytic`]);
//! * Monte-Carlo estimation for arbitrary Langevin systems, built on an
//!   Euler-Maruyama engine and nonparametric estimators ([`sde`],
//!   [`estimators`], [`empirical`]).
//!
//! [`experiments`] packages the canned figure reproductions and the
//! self-validation suite used by the command-line tool.

pub mod analytic;
pub mod empirical;
pub mod error;
pub mod estimators;
pub mod experiments;
pub mod gauss;
pub mod sde;

pub use error::{Error, Result};
