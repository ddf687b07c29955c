//! Numerics for rough stochastic differential equations.
//!
//! The crate simulates equations of the form
//!
//! ```text
//! dX_t = b(X_t) dt + sigma(X_t) dB_t + beta(X_t) dZ_t,
//! ```
//!
//! driven jointly by a Brownian motion `B` and a deterministic second-order
//! rough path `Z = (Z, ZZ)`. On top of the forward solver it provides:
//!
//! * linear equations with forcing, solved by the same one-step scheme, plus
//!   a Picard-iteration cross check ([`linear`]);
//! * the variational flows `J`, `I`, first-order Malliavin derivatives and
//!   the (reduced) Malliavin matrices ([`malliavin`]);
//! * Lie-bracket hierarchies and rank verdicts for Hörmander-type span
//!   conditions ([`hormander`]);
//! * Monte-Carlo ensembles, kernel density estimates, eigenvalue tails and
//!   path-roughness diagnostics ([`diagnostics`], [`rough`]).
//!
//! All randomness is seeded explicitly; identical inputs produce bit-identical
//! outputs.

pub mod diagnostics;
pub mod error;
pub mod fields;
pub mod grid;
pub mod hormander;
pub mod linear;
pub mod malliavin;
pub mod num;
pub mod rough;
pub mod rsde;

pub use error::{Error, Result};
pub use fields::{BracketField, DerivativeProvider, FieldForm, VectorField, VectorFieldSet};
pub use grid::{NoiseSpec, SampledPath, SmoothFormula, TimeGrid};
pub use linear::{LinearCoefficientPaths, LinearSolutionPath};
pub use malliavin::{FlowPair, MalliavinReport};
pub use rough::{RoughPath, RoughnessReport};
pub use rsde::SolutionPath;
