//! Monte Carlo backward scheme for path-dependent stochastic control.
//!
//! The value of a control problem is approximated on a uniform time grid by
//! `Y_k = E_k[Y_{k+1}] + h G(t_k, Γ_k, Z_k)`, where the conditional
//! expectations are taken along an uncontrolled reference process and the
//! derivative-like quantities `Z_k`, `Γ_k` come from Gaussian weights.

pub mod degenerate;
pub mod error;
pub mod kernel;
pub mod linalg;
pub mod model;
pub mod par;
pub mod problems;
pub mod quad;
pub mod regression;
pub mod run;
pub mod scheme;
pub mod semimart;

pub use error::{Error, Result};
