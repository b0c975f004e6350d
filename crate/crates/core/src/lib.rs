//! Dynamically quantized distributed SGD.
//!
//! Workers compress their stochastic gradients with an element-wise uniform
//! stochastic quantizer whose bit width is chosen per round to minimize
//! total communication under a target optimality gap. The crate contains the
//! quantizer and its wire codec, test objectives, the bit schedules, a
//! parameter-server simulator and the closed-form bounds used to check it.

pub mod config;
pub mod error;
pub mod experiment;
pub mod numeric;
pub mod objective;
pub mod quant;
pub mod rng;
pub mod schedule;
pub mod sim;
pub mod theory;
pub mod verify;

pub use error::{Error, Result};
