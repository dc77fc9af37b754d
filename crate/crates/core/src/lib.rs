//! QLBS option pricing and hedging: Monte Carlo market simulation, the
//! Black-Scholes benchmark, B-spline features, and model-based (DP) and
//! model-free (fitted Q iteration) solvers.

pub mod analytic_bsm;
pub mod basis;
pub mod error;
pub mod experiments;
pub mod market_sim;
pub mod numerics;
pub mod qlbs_dp;
pub mod qlbs_fqi;

pub use error::{QlbsError, Result};
