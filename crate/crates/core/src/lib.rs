//! Deterministic simulator for federated optimization with server and local
//! momentum, plus numerical checks of the auxiliary-sequence identities and
//! convergence bounds of the double-momentum method.

pub mod error;
pub mod fedopt;
pub mod harness;
pub mod objectives;
pub mod partition;
pub mod rng;
pub mod theory;
pub mod trace;
pub mod vector;

pub use error::{Error, Result};
pub use vector::ParamVec;
