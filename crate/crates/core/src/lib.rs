pub mod env;
pub mod error;
pub mod harness;
pub mod lcs;
pub mod learner;
pub mod linalg;
pub mod metrics;
pub mod mpc;
pub mod reduction;
pub mod rollout;
pub mod solvers;

pub use error::{Error, Result};
