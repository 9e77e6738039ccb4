//! Closed-loop pick-and-place of moving objects for a simulated serial arm.

pub mod arm;
pub mod config;
pub mod filter;
pub mod geom;
pub mod perception;
pub mod runtime;
pub mod servo;
pub mod trajopt;

/// The configuration file shipped in `configs/default.toml`.
pub const BUNDLED_CONFIG: &str = include_str!("../../../configs/default.toml");
