//! JSON dataset index.
//!
//! ```json
//! {"root": "data", "entries": [{"id": "a0", "class_name": "bottle", "split": "test",
//!   "label": 1, "image_path": "img/a0.ppm", "mask_path": "mask/a0.pgm"}]}
//! ```
//!
//! `root` is resolved against the manifest's directory, entry paths against `root`.

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::path::{Path, PathBuf};

use log::warn;
use serde::{Deserialize, Serialize};

use super::formats::write_file;
use super::pnm::read_mask;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub class_name: String,
    pub split: Split,
    pub label: u8,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image_path: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub feature_path: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mask_path: Option<PathBuf>,
}

impl ManifestEntry {
    pub fn is_anomaly(&self) -> bool {
        self.label == 1
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub root: PathBuf,
    pub entries: Vec<ManifestEntry>,
}

#[derive(Debug, Clone, Copy, Default)]
pub struct ManifestOptions {
    /// Anomalous test entries must carry a mask.
    pub pixel_eval: bool,
    /// Open every mask and check it against the label.
    pub check_masks: bool,
    /// Label/mask disagreements become errors instead of warnings.
    pub strict: bool,
}

impl DatasetManifest {
    pub fn split(&self, split: Split) -> impl Iterator<Item = &ManifestEntry> {
        self.entries.iter().filter(move |e| e.split == split)
    }

    pub fn classes(&self) -> Vec<String> {
        let mut c: Vec<String> = self.entries.iter().map(|e| e.class_name.clone()).collect();
        c.sort();
        c.dedup();
        c
    }

    /// Entries of one split grouped by class, in manifest order.
    pub fn by_class(&self, split: Split) -> BTreeMap<String, Vec<&ManifestEntry>> {
        let mut out: BTreeMap<String, Vec<&ManifestEntry>> = BTreeMap::new();
        for e in self.split(split) {
            out.entry(e.class_name.clone()).or_default().push(e);
        }
        out
    }

    pub fn validate(&self, opts: ManifestOptions) -> Result<()> {
        let mut problems = Vec::new();
        let mut seen = HashSet::new();
        for e in &self.entries {
            if !seen.insert(e.id.as_str()) {
                problems.push(format!("{}: duplicate id", e.id));
            }
            if e.label > 1 {
                problems.push(format!("{}: label must be 0 or 1, got {}", e.id, e.label));
            }
            if e.image_path.is_none() && e.feature_path.is_none() {
                problems.push(format!("{}: needs image_path or feature_path", e.id));
            }
            if opts.pixel_eval && e.split == Split::Test && e.is_anomaly() && e.mask_path.is_none() {
                problems.push(format!("{}: anomalous test entry without mask_path", e.id));
            }
        }
        if !problems.is_empty() {
            return Err(Error::Validation(problems.join("; ")));
        }
        if opts.check_masks {
            self.check_masks(opts.strict)?;
        }
        Ok(())
    }

    fn check_masks(&self, strict: bool) -> Result<()> {
        let mut problems = Vec::new();
        for e in &self.entries {
            let Some(path) = &e.mask_path else { continue };
            let mask = read_mask(path)?;
            if mask.any() != e.is_anomaly() {
                let msg = format!(
                    "{}: label {} but mask has {} anomalous pixels",
                    e.id,
                    e.label,
                    mask.count()
                );
                warn!("{msg}");
                problems.push(msg);
            }
        }
        if strict && !problems.is_empty() {
            return Err(Error::Validation(problems.join("; ")));
        }
        Ok(())
    }

    fn resolve(&mut self, base: &Path) {
        if self.root.is_relative() {
            self.root = base.join(&self.root);
        }
        let root = self.root.clone();
        for e in &mut self.entries {
            for p in [&mut e.image_path, &mut e.feature_path, &mut e.mask_path]
                .into_iter()
                .flatten()
            {
                if p.is_relative() {
                    *p = root.join(&*p);
                }
            }
        }
    }
}

/// Parses, resolves and validates a manifest.
pub fn parse_manifest(text: &str, base: &Path, opts: ManifestOptions) -> Result<DatasetManifest> {
    let mut m: DatasetManifest =
        serde_json::from_str(text).map_err(|e| Error::Validation(format!("manifest: {e}")))?;
    m.resolve(base);
    m.validate(opts)?;
    Ok(m)
}

pub fn load_manifest(path: &Path, opts: ManifestOptions) -> Result<DatasetManifest> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let base = path.parent().unwrap_or(Path::new("."));
    parse_manifest(&text, base, opts)
}

/// Writes a manifest whose entry paths are relative to `root`.
pub fn write_manifest(manifest: &DatasetManifest, path: &Path) -> Result<()> {
    let mut text = serde_json::to_string_pretty(manifest)?;
    text.push('\n');
    write_file(path, text.as_bytes())
}
