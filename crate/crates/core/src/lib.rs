//! Particle solver for mean-field backward-forward SDEs by measure freezing,
//! with an open-loop Nash layer for linear-quadratic mean-field games.

pub mod backward;
pub mod cli;
pub mod config;
pub mod error;
pub mod fixpoint;
pub mod lqgame;
pub mod forward;
pub mod measure;
pub mod paths;
pub mod problem;
pub mod regression;
pub mod timepath;

pub use error::{Error, Result};
