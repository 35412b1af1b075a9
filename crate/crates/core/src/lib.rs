//! Wavelet-guided dual-branch state-space pansharpening at desk scale.
//!
//! The crate bundles a small reverse-mode tensor engine, exact Haar
//! transforms, a selective-scan fusion block, the two-branch network with its
//! dynamic gate, quality metrics, and synthetic data generation.

pub mod autograd;
pub mod branches;
pub mod dataset;
pub mod error;
pub mod fmamba;
pub mod metrics;
pub mod msdg;
pub mod network;
pub mod nn;
pub mod params;
pub mod tensor;
pub mod train;
pub mod wavelet;

pub use error::{Error, Result};
pub use tensor::{ImagePlanar, Tensor};
