//! Intrinsic image decomposition built around ordinal shading.
//!
//! An image `I` is split into albedo `A` and single-channel shading `S`
//! with `I = A * S`. Shading is handled through the bounded inverse
//! `D = 1 / (S + 1)`. An ordinal network predicts `D` up to a monotone map at
//! two resolutions, and a second network turns the image and both ordinal
//! maps into a metric `D`.

pub mod error;
pub mod fitting;
pub mod image;
pub mod losses;
pub mod metrics;
pub mod model_io;
pub mod networks;
pub mod pipeline;
pub mod shading;
pub mod synth;
pub mod training;
pub mod pseudo_gt;
pub mod edits;

pub use error::{Error, ErrorClass, Result};
