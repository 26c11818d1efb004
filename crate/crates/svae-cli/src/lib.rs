//! Command-line driver for the svae laboratory: configuration resolution,
//! artifact plumbing, sweeps over objective variants, and self-checks against
//! closed-form models.

pub mod commands;
pub mod config;
pub mod verify;
