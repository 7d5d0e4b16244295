//! Mean-field Schrödinger bridges between Gaussian-mixture distributions.
//!
//! The crate steers a linear McKean–Vlasov system
//!
//! ```text
//! dx = A x dt + Ā x̄ dt + B u dt + D dw
//! ```
//!
//! from an initial Gaussian mixture to a terminal Gaussian mixture. Every pair of
//! initial/terminal components is connected by a covariance-steering policy solved as a
//! semidefinite program, the pairs are weighted by a component-level transport plan, and
//! the resulting mixture feedback policy is validated by simulating a large swarm.
//!
//! Module map:
//!
//! - [`dynamics`]: time grid, LTV systems, transition matrices and Grammians.
//! - [`gaussmix`]: Gaussian / mixture densities, sampling, product and quotient identities.
//! - [`conic`]: conic program modelling layer and solver backend.
//! - [`ocs`]: single Gaussian-to-Gaussian covariance steering.
//! - [`transport`]: component-level transport plans (network simplex).
//! - [`mixture`]: mixture policy, probability flow, cost bound and gap.
//! - [`chance`]: probabilistic half-space constraints.
//! - [`meanfield`]: unconstrained decomposition and constrained alternation.
//! - [`sim`]: Euler–Maruyama swarm simulation and metrics.
//! - [`scenario_io`]: scenario files and result bundles.
//! - [`cli`]: command-line entry point.

// Linked for its LAPACK/BLAS symbols used by the conic backend.
extern crate openblas_src;

pub mod chance;
pub mod cli;
pub mod conic;
pub mod dynamics;
pub mod error;
pub mod fixtures;
pub mod gaussmix;
pub mod linalg;
pub mod meanfield;
pub mod mixture;
pub mod ocs;
pub mod scenario_io;
pub mod sim;
pub mod transport;

pub use error::{Error, Result};
