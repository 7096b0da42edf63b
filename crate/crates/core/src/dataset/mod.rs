//! Data preparation: annotations, alignment, face selection, splitting,
//! statistics, the packed container and MNIST loading.

pub mod annotations;
pub mod container;
pub mod faces;
pub mod manifest;
pub mod mnist;
mod samples;
pub mod split;
pub mod stats;

pub use samples::{Cycler, PixelRange, Samples};
