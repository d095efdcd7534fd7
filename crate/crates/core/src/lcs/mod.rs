//! Linear complementarity systems: parameters, simulation and mode bookkeeping.

pub mod io;
pub mod modes;
pub mod params;
pub mod sim;

pub use modes::{count_distinct, mode_signature, ModeSignature, DEFAULT_MODE_THRESHOLD};
pub use params::{make_f, Block, LcsDims, LcsParams, LcsParts};
pub use sim::{count_distinct_modes, lcs_rollout, lcs_rollout_within, lcs_step, lcs_step_warm, step_lcp, Trajectory, EXPLOSION_BOUND};
