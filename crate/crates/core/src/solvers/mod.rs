//! Numerical kernels shared by simulation, learning and control.

pub mod active_set;
pub mod lcp;
pub mod nlp;
pub mod qp;

pub use active_set::{solve_ineq_qp, IneqQp, IneqQpSolution};
pub use lcp::{solve_lcp, solve_lcp_enum, solve_lcp_from, LcpProblem, LcpResidual};
pub use nlp::{solve_nlp, solve_nlp_with, JacobianEntry, NlpFunctions, NlpProblem, NlpSettings, NlpSolution};
pub use qp::{solve_qp_nonneg, solve_qp_nonneg_warm, QpNonneg, QpSolution};
