pub mod error;
pub mod metrics;
pub mod nn;
pub mod optim;
pub mod scene_io;
pub mod shoreline;
pub mod sweep;
pub mod synthgen;
pub mod trainer;
pub mod unet;
pub mod vit;

pub use error::{Error, Result};
