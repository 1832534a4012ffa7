//! Certified a-posteriori verification of neural-network PDE surrogates.
//!
//! Exact derivatives of ReLU/RePU multilayer perceptrons, locally uniform
//! derivative bounds over boxes, certified midpoint quadrature of `L^p` norms
//! and an end-to-end verifier for the heat equation.

pub mod bounds;
pub mod error;
pub mod exact_derivs;
pub mod heat;
pub mod model;
pub mod quadrature;

pub use bounds::{BoxEnvelopes, BoxSpec, DerivativeEnvelope};
pub use error::{Error, Result};
pub use exact_derivs::MultiIndex;
pub use model::{Activation, AffineLayer, EvalTrace, Network};
pub use heat::{HeatProblem, InitialCondition, ProblemConfig, VerificationOutcome, Verdict};
pub use quadrature::{NormCertificate, UniformGrid};
