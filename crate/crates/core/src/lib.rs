//! Contrastive learning under class imbalance on the unit hypersphere:
//! losses with analytic gradients, representation metrics, the near-collapse
//! gradient bound, linear probes and an experiment harness.

// `!(x > 0.0)` comparisons are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod data;
pub mod encoder;
pub mod error;
pub mod harness;
pub mod losses;
pub mod metrics;
mod par;
pub mod probe;
pub mod sphere;
pub mod theory;

pub use error::{Error, Result};
