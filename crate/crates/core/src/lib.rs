//! Parametric MDP workbench for staged certification of autonomous systems.
//!
//! The crate builds UAV / delivery-robot gridworlds as parametric MDPs,
//! synthesizes policies maximizing `!crash U goal`, sweeps the uncertain
//! link parameters, and records certification evidence for use/context
//! pairs in an append-only ledger.

pub mod certify;
pub mod checker;
pub mod cli;
pub mod expr;
pub mod model;
pub mod scenario;
pub mod sweep;
