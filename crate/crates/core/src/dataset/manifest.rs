//! Pair rendering and the on-disk manifest.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::cluster::{histogram, ClusterModel};
use super::degrade::{add_realistic_noise, encode_jpeg, DegradeParams, DegradeRanges};
use crate::error::{Error, Result};
use crate::image::ImageF;
use crate::io;
use crate::retouch::{retouch, RetouchCoefficients};

pub const MANIFEST_VERSION: &str = "lwe-dataset/1";
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    /// Source image id.
    pub source: String,
    /// Relative to the manifest directory.
    pub input_path: String,
    pub target_path: String,
    pub cluster_id: usize,
    pub coefficients_ref: String,
    pub degrade: DegradeParams,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub version: String,
    pub entries: Vec<ManifestEntry>,
}

impl DatasetManifest {
    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        Ok(s)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let m: Self = serde_json::from_str(s)?;
        if m.version != MANIFEST_VERSION {
            return Err(Error::Config(format!(
                "unsupported manifest version {:?} (expected {MANIFEST_VERSION:?})",
                m.version
            )));
        }
        Ok(m)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&fs::read_to_string(path)?)
    }

    /// Writes via a temporary sibling and a rename so readers never observe a
    /// partial file.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        write_atomic(path.as_ref(), self.to_json()?.as_bytes())
    }

    /// Loads every `(input, target)` pair, resolving paths against `dir`.
    pub fn load_pairs(&self, dir: impl AsRef<Path>) -> Result<Vec<(ImageF, ImageF)>> {
        let dir = dir.as_ref();
        self.entries
            .par_iter()
            .map(|e| {
                let input = io::load_image(dir.join(&e.input_path))?;
                let target = io::load_image(dir.join(&e.target_path))?;
                input.ensure_same_shape(&target, &e.source)?;
                Ok((input, target))
            })
            .collect()
    }

    /// Checks that every referenced file exists and decodes.
    pub fn verify(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        for e in &self.entries {
            for rel in [&e.input_path, &e.target_path] {
                if Path::new(rel).is_absolute() {
                    return Err(Error::Config(format!("manifest path {rel} is not relative")));
                }
            }
            if !dir.join(&e.coefficients_ref).is_file() {
                return Err(Error::Config(format!("missing coefficients file {}", e.coefficients_ref)));
            }
        }
        self.load_pairs(dir).map(|_| ())
    }
}

pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    fs::create_dir_all(dir)?;
    let name = path
        .file_name()
        .ok_or_else(|| Error::invalid(format!("not a file path: {}", path.display())))?;
    let tmp: PathBuf = dir.join(format!(".{}.tmp{}", name.to_string_lossy(), std::process::id()));
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path).map_err(|e| {
        let _ = fs::remove_file(&tmp);
        e.into()
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct BuildConfig {
    pub degrade: DegradeRanges,
    /// Pairs rendered from each source image; each draws its own crop and
    /// degradation.
    pub variants_per_image: usize,
    /// Random `(height, width)` crop taken before retouching.
    pub crop: Option<(usize, usize)>,
}

impl Default for BuildConfig {
    fn default() -> Self {
        Self {
            degrade: DegradeRanges::default(),
            variants_per_image: 1,
            crop: None,
        }
    }
}

fn coeffs_ref(cluster: usize) -> String {
    format!("coeffs/{cluster}.json")
}

/// Renders retouched targets and degraded inputs for every image, writing
/// `inputs/`, `targets/`, `coeffs/` and finally `manifest.json` under
/// `out_dir`. Images whose id is missing from the model are assigned to
/// their nearest centroid.
pub fn build_pairs(
    images: &[(String, ImageF)],
    model: &ClusterModel,
    coeffs: &BTreeMap<usize, RetouchCoefficients>,
    cfg: &BuildConfig,
    out_dir: impl AsRef<Path>,
) -> Result<DatasetManifest> {
    let out_dir = out_dir.as_ref();
    cfg.degrade.validate()?;
    if cfg.variants_per_image == 0 {
        return Err(Error::invalid("variants_per_image must be at least 1"));
    }
    let clusters: Vec<usize> = images
        .iter()
        .map(|(id, img)| match model.assignments.get(id) {
            Some(&c) => Ok(c),
            None => Ok(model.assign(&histogram(img)?)),
        })
        .collect::<Result<_>>()?;
    let missing: BTreeSet<usize> = clusters.iter().copied().filter(|c| !coeffs.contains_key(c)).collect();
    if !missing.is_empty() {
        let list: Vec<String> = missing.iter().map(|c| c.to_string()).collect();
        return Err(Error::Config(format!(
            "no retouch coefficients for populated cluster(s): {}",
            list.join(", ")
        )));
    }
    for c in coeffs.values() {
        c.validate()?;
    }

    for sub in ["inputs", "targets", "coeffs"] {
        fs::create_dir_all(out_dir.join(sub))?;
    }
    let used: BTreeSet<usize> = clusters.iter().copied().collect();
    for c in &used {
        let json = serde_json::to_string_pretty(&coeffs[c])?;
        write_atomic(&out_dir.join(coeffs_ref(*c)), json.as_bytes())?;
    }

    let v = cfg.variants_per_image;
    let jobs: Vec<(usize, usize)> = (0..images.len()).flat_map(|i| (0..v).map(move |k| (i, k))).collect();
    let entries: Vec<ManifestEntry> = jobs
        .par_iter()
        .map(|&(i, k)| {
            let pair = i * v + k;
            let (id, img) = &images[i];
            let params = cfg.degrade.sample(pair as u64);
            let src = match cfg.crop {
                None => img.clone(),
                Some((ch, cw)) => {
                    if ch > img.height() || cw > img.width() {
                        return Err(Error::invalid(format!(
                            "crop {ch}x{cw} larger than image {id} ({}x{})",
                            img.height(),
                            img.width()
                        )));
                    }
                    let mut rng = ChaCha8Rng::seed_from_u64(params.seed.rotate_left(32));
                    let y0 = rng.gen_range(0..=img.height() - ch);
                    let x0 = rng.gen_range(0..=img.width() - cw);
                    img.crop(y0, x0, ch, cw)?
                }
            };
            let cluster = clusters[i];
            let target = retouch(&src, &coeffs[&cluster])?;
            let noisy = add_realistic_noise(&src, &params)?;
            let jpeg = encode_jpeg(&noisy, params.jpeg_quality)?;
            let stem = format!("{pair:05}");
            let input_path = format!("inputs/{stem}.jpg");
            let target_path = format!("targets/{stem}.png");
            fs::write(out_dir.join(&input_path), jpeg)?;
            fs::write(out_dir.join(&target_path), io::encode_png(&target)?)?;
            Ok(ManifestEntry {
                source: id.clone(),
                input_path,
                target_path,
                cluster_id: cluster,
                coefficients_ref: coeffs_ref(cluster),
                degrade: params,
            })
        })
        .collect::<Result<_>>()?;

    let manifest = DatasetManifest {
        version: MANIFEST_VERSION.to_string(),
        entries,
    };
    manifest.save(out_dir.join(MANIFEST_FILE))?;
    Ok(manifest)
}
