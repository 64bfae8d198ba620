//! Integral-type event-triggered model predictive control for
//! continuous-time nonlinear systems with bounded additive disturbance.
//!
//! The crate covers the whole design loop: terminal-ingredient synthesis
//! ([`synthesis`]), the robust finite-horizon optimal control problem
//! ([`ocp`]), the integral and pointwise triggering rules ([`trigger`]),
//! closed-form feasibility/stability certificates ([`certify`]) and seeded
//! closed-loop simulation ([`sim`]). The `etmpc` binary drives all of it from
//! a TOML run configuration ([`config`], [`cli`]).

#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod certify;
pub mod cli;
pub mod config;
pub mod error;
pub mod linalg;
pub mod model;
pub mod nlp;
pub mod ocp;
pub mod sim;
pub mod synthesis;
pub mod trigger;

pub use error::{Error, Result};
