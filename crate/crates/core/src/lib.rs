//! Exact entropic-transport statistics on finite spaces: Schrödinger bridge
//! solves, Markov-operator algebra, chaos expansions of `T_N`, and seeded
//! Monte Carlo checks of their limit laws.

pub mod chaos;
pub mod config;
pub mod error;
pub mod estimator;
pub mod fixtures;
pub mod harness;
pub mod measures;
pub mod operators;
pub mod sinkhorn;
pub mod stats;
pub mod verify;

pub use error::{Error, Result};
