//! Learning control Lyapunov functions from demonstrations by constrained
//! kernel regression, with the induced closed-form policy and post-hoc
//! stability audits.

// `!(x < y)` is used on purpose so that NaN counts as a violation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod error;
pub mod kernel;
pub mod learner;
pub mod lqr;
pub mod policy;
pub mod rng;
pub mod serde_rows;
pub mod systems;
pub mod verifier;

pub use error::{Error, Result};
