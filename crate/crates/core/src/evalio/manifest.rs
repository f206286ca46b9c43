use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::netpbm::Normalization;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    /// Projection images; prototypes come from here.
    Train,
    Test,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    /// PPM path, relative to the manifest's directory.
    pub image: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub segmentation: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<usize>,
    pub split: Split,
}

/// Images of one dataset plus how to normalize them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub normalization: Normalization,
    /// Per-channel dataset mean in normalized space, the default fill.
    pub fill: Vec<f32>,
    pub entries: Vec<ManifestEntry>,
    #[serde(skip)]
    pub root: PathBuf,
}

impl DatasetManifest {
    pub fn validate(&self) -> Result<()> {
        self.normalization.validate()?;
        if self.fill.len() != 3 || self.fill.iter().any(|v| !v.is_finite()) {
            return Err(Error::config("manifest needs 3 finite fill values"));
        }
        let mut seen = HashSet::new();
        for e in &self.entries {
            if !seen.insert(e.id.as_str()) {
                return Err(Error::config(format!("duplicate image id '{}'", e.id)));
            }
        }
        Ok(())
    }

    pub fn resolve(&self, relative: &Path) -> PathBuf {
        self.root.join(relative)
    }

    pub fn entry(&self, id: &str) -> Option<&ManifestEntry> {
        self.entries.iter().find(|e| e.id == id)
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &ManifestEntry> {
        self.entries.iter().filter(move |e| e.split == split)
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| Error::internal(e.to_string()))
    }
}

pub fn load_manifest(path: &Path) -> Result<DatasetManifest> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut m: DatasetManifest =
        serde_json::from_str(&text).map_err(|e| Error::format(path, e.to_string()))?;
    m.root = path.parent().map(Path::to_path_buf).unwrap_or_default();
    m.validate().map_err(|e| match e {
        Error::Config(msg) => Error::format(path, msg),
        other => other,
    })?;
    for e in &m.entries {
        for p in std::iter::once(&e.image).chain(e.segmentation.as_ref()) {
            let full = m.resolve(p);
            if !full.is_file() {
                return Err(Error::format(
                    path,
                    format!("entry '{}': {} does not exist", e.id, full.display()),
                ));
            }
        }
    }
    Ok(m)
}

pub fn save_manifest(manifest: &DatasetManifest, path: &Path) -> Result<()> {
    manifest.validate()?;
    let mut text = manifest.to_json()?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}
