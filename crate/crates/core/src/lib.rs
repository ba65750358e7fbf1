//! Numerical laboratory for backward stochastic parabolic equations on the
//! unit interval: P1 finite elements, Brownian path batches, exact discrete
//! semigroups, forward and backward stochastic solvers, and stochastic
//! linear-quadratic control with neural policies.

pub mod backward;
pub mod error;
pub mod fem;
pub mod field;
pub mod forward;
pub mod linalg;
pub mod lq;
pub mod mlp;
pub mod quadrature;
pub mod rand_paths;
pub mod regression;
pub mod semigroup;
pub mod stats;

pub use error::{Error, Result};
