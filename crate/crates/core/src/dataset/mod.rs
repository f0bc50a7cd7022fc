//! Paired training-set construction: histogram clustering, per-cluster
//! retouching, and sensor/compression degradation.

pub mod cluster;
pub mod degrade;
pub mod manifest;

use std::fs;
use std::path::Path;

use rayon::prelude::*;

pub use cluster::{cluster, histogram, ClusterModel, LumaHistogram};
pub use degrade::{add_realistic_noise, encode_jpeg, jpeg_degrade, DegradeParams, DegradeRanges};
pub use manifest::{build_pairs, write_atomic, BuildConfig, DatasetManifest, ManifestEntry, MANIFEST_FILE};

use crate::error::{Error, Result};
use crate::image::ImageF;
use crate::io;

const IMAGE_EXTENSIONS: &[&str] = &["png", "jpg", "jpeg"];

/// Loads every PNG/JPEG directly inside `dir`, keyed and sorted by file name.
pub fn load_image_dir(dir: impl AsRef<Path>) -> Result<Vec<(String, ImageF)>> {
    let dir = dir.as_ref();
    let mut names: Vec<String> = fs::read_dir(dir)?
        .filter_map(|e| e.ok())
        .filter(|e| e.path().is_file())
        .filter_map(|e| e.file_name().into_string().ok())
        .filter(|n| {
            Path::new(n)
                .extension()
                .and_then(|x| x.to_str())
                .is_some_and(|x| IMAGE_EXTENSIONS.contains(&x.to_ascii_lowercase().as_str()))
        })
        .collect();
    names.sort();
    if names.is_empty() {
        return Err(Error::Config(format!("no PNG/JPEG images in {}", dir.display())));
    }
    names
        .into_par_iter()
        .map(|n| Ok((n.clone(), io::load_image(dir.join(&n))?)))
        .collect()
}

/// Histograms of a set of named images, in input order.
pub fn histograms(images: &[(String, ImageF)]) -> Result<Vec<(String, LumaHistogram)>> {
    images
        .par_iter()
        .map(|(id, img)| Ok((id.clone(), histogram(img)?)))
        .collect()
}
