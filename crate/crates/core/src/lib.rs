//! Watermark-removal laboratory: two watermark codecs, a small pixel-space
//! diffusion model, the attacks that regenerate or steer images through it,
//! and the measurement code that scores the damage.

pub mod attacks;
pub mod checkpoint;
pub mod corpus;
pub mod dct;
pub mod diffusion;
pub mod error;
pub mod harness;
pub mod image;
pub mod metrics;
pub mod nn;
pub mod par;
pub mod rng;
pub mod theory;
pub mod watermark;

pub use error::{LabError, Result};
pub use image::{ImageGrid, PixelField};
