pub mod error;
pub mod fixtures;
pub mod geometry;
pub mod optimize;
pub mod photometric;
pub mod synth;
pub mod warp;

pub use error::{Error, Result};
