//! Mean-field variational inference over polyhedral subsets of Wasserstein
//! space.
//!
//! Product measures are parameterized as pushforwards of the standard
//! Gaussian under coordinatewise maps `α·id + Σ λ_{ij} T_j(x_i) e_i + v`
//! built from a compatible one-dimensional dictionary. On that cone the
//! Wasserstein metric is the Gram-matrix norm of the coefficients, so KL
//! minimization becomes finite-dimensional convex optimization.

pub mod approx;
pub mod error;
pub mod experiments;
pub mod gram;
pub mod integrate;
pub mod maps1d;
pub mod mixtures;
pub mod objective;
pub mod optim;
pub mod targets;

pub use error::{Error, Result};
pub use gram::GramData;
pub use integrate::RngStream;
pub use maps1d::{ConeParams, FamilyKind, MapFamily1D};
pub use targets::Target;
