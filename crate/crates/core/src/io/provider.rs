use std::collections::HashMap;
use std::path::PathBuf;
use std::str::FromStr;
use std::sync::RwLock;

use super::formats::read_feature_file;
use super::manifest::ManifestEntry;
use super::pnm::read_image;
use super::synthetic::{SyntheticConfig, SyntheticProvider};
use crate::error::{Error, Result};
use crate::model::FeatureStack;
use crate::raster::Raster;

/// Source of frozen features. Implementations are deterministic: equal
/// inputs give equal stacks, and the layer layout never changes between
/// calls.
pub trait FeatureProvider: Send + Sync {
    /// Short description recorded in training provenance.
    fn describe(&self) -> String;

    /// Whether [`FeatureProvider::extract`] works, which training needs for
    /// raster-level augmentation.
    fn supports_rasters(&self) -> bool;

    fn extract(&self, raster: &Raster, source_id: &str) -> Result<FeatureStack>;

    /// Features for a manifest entry. The default reads the entry's image
    /// and runs [`FeatureProvider::extract`].
    fn features_for(&self, entry: &ManifestEntry) -> Result<FeatureStack> {
        let path = entry.image_path.as_ref().ok_or_else(|| {
            Error::Config(format!(
                "{}: entry has no image_path for {}",
                entry.id,
                self.describe()
            ))
        })?;
        self.extract(&read_image(path)?, &entry.id)
    }
}

/// Reads precomputed `UFST` files, optionally keeping only some blocks.
pub struct FileProvider {
    features_dir: Option<PathBuf>,
    blocks: Option<Vec<u16>>,
    cache: RwLock<HashMap<PathBuf, FeatureStack>>,
}

impl FileProvider {
    pub fn new(features_dir: Option<PathBuf>, blocks: Option<Vec<u16>>) -> Self {
        Self {
            features_dir,
            blocks,
            cache: RwLock::new(HashMap::new()),
        }
    }

    fn path_for(&self, entry: &ManifestEntry) -> Result<PathBuf> {
        if let Some(p) = &entry.feature_path {
            return Ok(p.clone());
        }
        match &self.features_dir {
            Some(dir) => Ok(dir.join(format!("{}.ufst", entry.id))),
            None => Err(Error::Config(format!(
                "{}: no feature_path and no features directory given",
                entry.id
            ))),
        }
    }
}

impl FeatureProvider for FileProvider {
    fn describe(&self) -> String {
        "files".into()
    }

    fn supports_rasters(&self) -> bool {
        false
    }

    fn extract(&self, _raster: &Raster, source_id: &str) -> Result<FeatureStack> {
        Err(Error::Config(format!(
            "{source_id}: file-backed features cannot be extracted from rasters"
        )))
    }

    fn features_for(&self, entry: &ManifestEntry) -> Result<FeatureStack> {
        let path = self.path_for(entry)?;
        if let Some(s) = self.cache.read().expect("cache lock").get(&path) {
            return Ok(s.clone());
        }
        let mut stack = read_feature_file(&path)?;
        stack.source_id = entry.id.clone();
        if let Some(blocks) = &self.blocks {
            stack = stack.select_blocks(blocks)?;
        }
        self.cache
            .write()
            .expect("cache lock")
            .insert(path, stack.clone());
        Ok(stack)
    }
}

/// Provider selection as written on the command line.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ProviderKind {
    Files,
    Synthetic,
    /// Synthetic features whose global-token anomaly direction opposes the
    /// patch-token one.
    SyntheticConflict,
}

impl FromStr for ProviderKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "files" => Ok(Self::Files),
            "synthetic" => Ok(Self::Synthetic),
            "synthetic-conflict" => Ok(Self::SyntheticConflict),
            other => Err(Error::Usage(format!(
                "unknown provider {other:?} (expected files, synthetic or synthetic-conflict)"
            ))),
        }
    }
}

impl std::fmt::Display for ProviderKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Files => "files",
            Self::Synthetic => "synthetic",
            Self::SyntheticConflict => "synthetic-conflict",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProviderSpec {
    pub kind: ProviderKind,
    pub blocks: Option<Vec<u16>>,
    pub features_dir: Option<PathBuf>,
    pub geometry_seed: u64,
}

impl ProviderSpec {
    pub fn build(&self) -> Result<Box<dyn FeatureProvider>> {
        Ok(match self.kind {
            ProviderKind::Files => {
                Box::new(FileProvider::new(self.features_dir.clone(), self.blocks.clone()))
            }
            ProviderKind::Synthetic | ProviderKind::SyntheticConflict => {
                let mut cfg = SyntheticConfig::default_layers(self.geometry_seed);
                cfg.conflict = self.kind == ProviderKind::SyntheticConflict;
                if let Some(blocks) = &self.blocks {
                    cfg = cfg.with_blocks(blocks)?;
                }
                Box::new(SyntheticProvider::new(cfg)?)
            }
        })
    }
}
