//! Online energy-aware workload offloading among cooperating small base
//! stations.

pub mod benchmarks;
pub mod central;
pub mod error;
pub mod game;
pub mod harness;
pub mod lyapunov;
pub mod model;
pub mod oracle;
pub mod policy;
pub mod scenario;

pub use error::{Error, FeasibilityViolation, Result};
