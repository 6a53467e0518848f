//! End-to-end drivers built from the core pieces.

pub mod base;
pub mod devcycle;
pub mod study;
pub mod validate;

pub use base::{fit_and_solve, run_base, run_base_pooled, run_base_with, BaseConfig, BaseOutcome};
