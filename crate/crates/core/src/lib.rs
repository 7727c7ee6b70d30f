//! Two-phase imitation learning from a handful of demonstrations: a
//! non-parametric base policy refined online by a bounded residual actor
//! trained on optimal-transport rewards.

pub mod base_policy;
pub mod config;
pub mod demos;
pub mod encoder;
pub mod env;
pub mod harness;
pub mod nn;
pub mod ot;
pub mod residual;
