//! Wavelet-domain mixture-of-experts network for lighting-related image
//! restoration: shadow removal and ambient lighting normalization in a single
//! model, at desk scale.
//!
//! The crate is self-contained: a minimal reverse-mode autodiff tensor engine,
//! an orthonormal Haar wavelet pair, low/high-band expert banks with a gated
//! router, a prior-conditioned U-Net backbone, losses and metrics, a synthetic
//! paired-data generator, a two-stage trainer, and sliding-window tiled
//! inference for arbitrary resolutions.

pub mod backbone;
pub mod checkpoint;
pub mod config;
pub mod error;
pub mod experts;
pub mod imageio;
pub mod objectives;
pub mod params;
pub mod synthlight;
pub mod tensor;
pub mod tile;
pub mod trainer;
pub mod wavelet;
pub mod wdmoe;

pub use error::{Error, Result};
pub use tensor::{Tape, Tensor};
