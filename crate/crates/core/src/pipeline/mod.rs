//! Configured systems: presets, overlays and the per-family train/score
//! stages shared by the command-line tool.

mod config;
mod systems;

pub use config::*;
pub use systems::*;
