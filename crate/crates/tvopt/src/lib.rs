//! Simulation and certification toolkit for time-varying equality-constrained
//! optimization.
//!
//! The library integrates the inertial projected-gradient flow
//!
//! ```text
//! xdot = -(1/alpha) P(x, t) grad_f(x, t) - Q(x, t) gprime(x, t)
//! ```
//!
//! over problems `min f(x, t) s.t. g(x, t) = 0`, traces curves of local
//! minimizers, and computes sampled numerical certificates for when the flow
//! jumps between minimizer branches, tracks one, or escapes a spurious one.
//!
//! Modules:
//! - [`problem`]: problem declarations, builtin benchmarks, derivative checks.
//! - [`geometry`]: tangent projectors, multipliers, flow right-hand sides.
//! - [`flow`]: integrators, discrete trackers, minimum tracing.
//! - [`certify`]: convexity / dominance / jump / tracking / escape certificates.
//! - [`scenario`]: declarative experiment runner behind the CLI.

pub mod certify;
pub mod error;
pub mod flow;
pub mod geometry;
pub mod problem;
pub mod scenario;

pub use error::{Result, TvError};
