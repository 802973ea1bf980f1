//! Residual deep reinforcement learning for inverter-based Volt-Var control.
//!
//! The crate bundles a radial distribution feeder simulator (backward-forward
//! sweep power flow), a single-period Volt-Var environment, a model-based
//! dispatch optimizer, a small neural network stack, a two-critic soft
//! actor-critic, and the residual / boosting policy chain built on top of them.

pub mod error;
pub mod grid;
pub mod harness;
pub mod env;
pub mod mbo;
pub mod neural;
pub mod powerflow;
pub mod residual;
pub mod sac;

pub use error::{Error, Result};
