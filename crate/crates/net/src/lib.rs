//! Network engine, losses, enhancement pipeline and training for
//! low-light and non-uniform illumination enhancement.

pub mod enhance;
pub mod error;
pub mod losses;
pub mod nn;
pub mod train;

pub use enhance::{enhance, fuse_exposures, interactive_enhance, EnhanceModel, EnhanceParams, EnhanceTrace};
pub use error::{Error, Result};
