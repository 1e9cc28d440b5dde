//! Scale-aware monocular depth estimation from calibrated camera rays.
//!
//! Pixels are lifted to unit viewing rays through pinhole intrinsics,
//! Fourier-encoded, and concatenated with multi-scale image features to
//! condition a latent attention network. Decoder queries carry only ray
//! embeddings, so depth can be requested at any resolution or camera.

pub mod augment;
pub mod embeddings;
mod error;
pub mod evalmetrics;
pub mod experiment;
pub mod formats;
pub mod geometry;
pub mod image;
pub mod losses;
pub mod network;
pub mod synthdata;
pub mod trainer;

pub use error::{Error, Result};
