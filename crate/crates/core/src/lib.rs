//! Toy open-vocabulary panoptic segmentation built on diffusion-UNet features.
//!
//! The crate wires together a frozen, deterministically seeded backbone (toy
//! text/image encoders plus a text-conditioned denoising UNet), a trainable
//! implicit captioner, a query-based mask generator, text-embedding mask
//! classification with label or caption supervision, fused open-vocabulary
//! inference, and the full evaluation stack (PQ/SQ/RQ, mIoU, AR@k, mask mAP).
//!
//! Everything runs on the CPU in `f64` and is reproducible from a single seed.

pub mod captioner;
pub mod classifier;
pub mod data;
pub mod diffusion;
pub mod encoders;
pub mod error;
pub mod inference;
pub mod maskgen;
pub mod metrics;
pub mod nn;
pub mod tensor;
pub mod testkit;

pub use error::{Error, Result};
