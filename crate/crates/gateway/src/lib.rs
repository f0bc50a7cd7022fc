//! Command line and HTTP front end: enhancement, retouching, dataset
//! building, training and evaluation, plus the endpoints behind the
//! coefficient-tuning and interactive-enhancement views.

pub mod cli;
pub mod error;
pub mod jobs;
pub mod server;
pub mod workdir;

use std::path::Path;

use lwe_net::EnhanceModel;

pub use error::{Error, Result};

/// Weights compiled into the binary, produced by the `default_weights`
/// example.
pub const DEFAULT_WEIGHTS: &[u8] = include_bytes!("../assets/default.lwe");

/// Loads `path`, or the compiled-in weights when none is given.
pub fn load_model(path: Option<&Path>) -> Result<EnhanceModel> {
    match path {
        Some(p) => EnhanceModel::load(p).map_err(|e| Error::Other(format!("cannot load weights {}: {e}", p.display()))),
        None => Ok(EnhanceModel::from_bytes(DEFAULT_WEIGHTS)?),
    }
}
