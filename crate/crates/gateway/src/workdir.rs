//! Files shared by the CLI and the service.
//!
//! ```text
//! <workdir>/clusters.json      cluster model (`lwe dataset cluster --out`)
//! <workdir>/images/            source images, unless the model names a directory
//! <workdir>/coeffs/<id>.json   retouch coefficients, one file per cluster
//! <workdir>/datasets/<job>/    pairs rendered by build jobs
//! <workdir>/weights/<job>.lwe  weights written by train jobs
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use lwe_core::dataset::{histogram, write_atomic, ClusterModel};
use lwe_core::{io, ImageF, RetouchCoefficients};

use crate::error::{Error, Result};

pub const CLUSTERS_FILE: &str = "clusters.json";

#[derive(Clone, Debug)]
pub struct Workdir {
    root: PathBuf,
}

impl Workdir {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn clusters_path(&self) -> PathBuf {
        self.root.join(CLUSTERS_FILE)
    }

    pub fn coeffs_dir(&self) -> PathBuf {
        self.root.join("coeffs")
    }

    pub fn datasets_dir(&self) -> PathBuf {
        self.root.join("datasets")
    }

    pub fn weights_dir(&self) -> PathBuf {
        self.root.join("weights")
    }

    /// Where the images named by `model` live; relative directories resolve
    /// against the workdir.
    pub fn images_dir(&self, model: &ClusterModel) -> PathBuf {
        match &model.source_dir {
            Some(d) => self.root.join(d),
            None => self.root.join("images"),
        }
    }

    /// Stored coefficients of `cluster`, or the defaults if none were saved.
    pub fn coefficients(&self, cluster: usize) -> Result<RetouchCoefficients> {
        read_coefficients_or_default(&self.coeffs_dir().join(format!("{cluster}.json")))
    }

    /// Validates, then writes through a temporary file and a rename.
    pub fn save_coefficients(&self, cluster: usize, c: &RetouchCoefficients) -> Result<()> {
        c.validate()?;
        let path = self.coeffs_dir().join(format!("{cluster}.json"));
        write_atomic(&path, coefficients_json(c)?.as_bytes())?;
        Ok(())
    }
}

pub fn coefficients_json(c: &RetouchCoefficients) -> Result<String> {
    let mut s = serde_json::to_string_pretty(c)?;
    s.push('\n');
    Ok(s)
}

fn read_coefficients_or_default(path: &Path) -> Result<RetouchCoefficients> {
    if !path.exists() {
        return Ok(RetouchCoefficients::default());
    }
    let text = fs::read_to_string(path)?;
    let c: RetouchCoefficients =
        serde_json::from_str(&text).map_err(|e| Error::other(format!("{}: {e}", path.display())))?;
    c.validate()?;
    Ok(c)
}

/// Coefficients for clusters `0..k` from either a directory of `<id>.json`
/// files (missing ones fall back to the defaults), a JSON object keyed by
/// cluster id, or a single coefficient object applied to every cluster.
pub fn load_coefficient_source(path: &Path, k: usize) -> Result<BTreeMap<usize, RetouchCoefficients>> {
    if path.is_dir() {
        return (0..k)
            .map(|c| Ok((c, read_coefficients_or_default(&path.join(format!("{c}.json")))?)))
            .collect();
    }
    let text = fs::read_to_string(path).map_err(|e| Error::other(format!("{}: {e}", path.display())))?;
    let parsed: BTreeMap<usize, RetouchCoefficients> = match serde_json::from_str::<RetouchCoefficients>(&text) {
        Ok(c) => (0..k).map(|id| (id, c.clone())).collect(),
        Err(single) => {
            let map: BTreeMap<String, RetouchCoefficients> = serde_json::from_str(&text)
                .map_err(|_| Error::other(format!("{}: not a coefficient object or map: {single}", path.display())))?;
            map.into_iter()
                .map(|(id, c)| {
                    let id = id
                        .parse::<usize>()
                        .map_err(|_| Error::other(format!("{}: bad cluster id {id:?}", path.display())))?;
                    Ok((id, c))
                })
                .collect::<Result<_>>()?
        }
    };
    for c in parsed.values() {
        c.validate()?;
    }
    Ok(parsed)
}

/// A cluster model together with the images it was built from.
#[derive(Clone, Debug)]
pub struct ClusterState {
    pub model: ClusterModel,
    pub images_dir: PathBuf,
    /// Member closest to each centroid; `None` for empty clusters.
    pub representatives: Vec<Option<String>>,
}

impl ClusterState {
    /// Reads `clusters.json` and the member images; `Ok(None)` when the
    /// workdir has no cluster model yet.
    pub fn load(workdir: &Workdir) -> Result<Option<Self>> {
        let path = workdir.clusters_path();
        if !path.exists() {
            return Ok(None);
        }
        let model: ClusterModel = serde_json::from_str(&fs::read_to_string(&path)?)
            .map_err(|e| Error::other(format!("{}: {e}", path.display())))?;
        let images_dir = workdir.images_dir(&model);
        let mut hists = BTreeMap::new();
        for id in model.assignments.keys() {
            hists.insert(id.clone(), histogram(&load_member(&images_dir, id)?)?);
        }
        let representatives = (0..model.k)
            .map(|c| model.representative(c, &hists).map(str::to_string))
            .collect();
        Ok(Some(Self {
            model,
            images_dir,
            representatives,
        }))
    }

    pub fn contains(&self, cluster: usize) -> bool {
        cluster < self.model.k
    }

    pub fn representative_image(&self, cluster: usize) -> Result<Option<ImageF>> {
        match self.representatives.get(cluster) {
            Some(Some(id)) => Ok(Some(load_member(&self.images_dir, id)?)),
            _ => Ok(None),
        }
    }
}

fn load_member(dir: &Path, id: &str) -> Result<ImageF> {
    let path = dir.join(id);
    io::load_image(&path).map_err(|e| Error::other(format!("cluster member {}: {e}", path.display())))
}
