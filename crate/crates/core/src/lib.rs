//! Gated speaker-embedding training with fairness evaluation.
//!
//! The crate contains a small reverse-mode differentiation engine, the gated
//! two-branch model and its training objective, verification metrics with
//! subgroup fairness measures, a synthetic corpus generator, a trainer and the
//! command-line front end.

pub mod autodiff;
pub mod branches;
pub mod cli;
pub mod gate;
pub mod group;
pub mod model;
pub mod metrics;
pub mod objectives;
pub mod synthdata;
pub mod trainer;

pub use group::Group;
