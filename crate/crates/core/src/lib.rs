//! Image containers, classical filters, the retouching pipeline, quality
//! metrics and dataset construction for low-light / non-uniform illumination
//! enhancement.

pub mod bilateral;
pub mod dataset;
pub mod dct;
pub mod error;
pub mod filters;
pub mod image;
pub mod io;
pub mod metrics;
pub mod ops;
pub mod pyramid;
pub mod retouch;
pub mod ssim;
pub mod synth;

pub use error::{Error, Result};
pub use image::{Image, ImageF, Scalar};
pub use retouch::RetouchCoefficients;
