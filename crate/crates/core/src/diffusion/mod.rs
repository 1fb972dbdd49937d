//! Diffusion backbone: the forward noise process, the toy text-conditioned
//! UNet, and feature-pyramid extraction from its decoder taps.

pub mod pyramid;
pub mod schedule;
pub mod unet;

pub use pyramid::{
    extract_features, sample_noise, FeaturePyramid, PyramidConfig, PyramidProjector,
};
pub use schedule::{add_noise, invert_noise, NoiseSchedule, TimeStepSpec};
pub use unet::{stack_context, UNet, UNetConfig, UNetTaps};
