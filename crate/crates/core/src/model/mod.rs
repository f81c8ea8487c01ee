//! The multi-stage segmentation network.

mod config;
mod forward;
mod params;

pub use config::*;
pub use forward::*;
pub use params::*;
