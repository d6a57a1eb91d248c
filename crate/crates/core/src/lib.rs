//! Continual-learning laboratory for on-policy replay on tiny autoregressive
//! policies over synthetic verifiable tasks.

pub mod diagnostics;
pub mod error;
pub mod harness;
pub mod math;
pub mod policy;
pub mod metrics;
pub mod replay;
pub mod tasks;
pub mod training;

pub use error::{Error, Result};

#[cfg(test)]
pub(crate) mod testutil;
