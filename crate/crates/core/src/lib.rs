//! Structured state-space laboratory: HiPPO operators, discretized S4
//! layers trained from scratch on memorization tasks, and the positional
//! accuracy analysis used to study which inputs such models retain.

pub mod cplx;
pub mod discretize;
pub mod error;
pub mod eval;
pub mod expm;
pub mod hippo;
pub mod lstm;
pub mod models;
pub mod params;
pub mod real;
pub mod ssm_core;
pub mod svg;
pub mod tasks;
pub mod train;

pub use error::{Error, Result};
pub use hippo::{Basis, HippoOperator};
pub use real::Real;
