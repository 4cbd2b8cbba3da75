//! `manifest.json`: the on-disk index shared by rendered and real datasets.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{CompositeOp, RangeTag};
use crate::synth::ShapeSpec;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const MANIFEST_VERSION: u32 = 1;

/// Domain names in layer order: the blended input, then each layer.
pub const DOMAIN_NAMES: [&str; 4] = ["x", "y", "z", "w"];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneEntry {
    pub id: String,
    pub split: Split,
    /// Scenes sharing a group never straddle the input/layer subsets.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scene_group: Option<String>,
    /// Optional explicit subset (1 = inputs, 2 = layers and test).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub subset: Option<u8>,
    /// Domain name to path relative to the manifest's directory.
    pub files: BTreeMap<String, String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub shapes: Vec<ShapeSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    pub n_layers: usize,
    /// How stored PNGs relate to the blend: `log-additive` datasets are
    /// converted to log domain on load.
    pub composite: CompositeOp,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image_size: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    pub scenes: Vec<SceneEntry>,
}

impl Manifest {
    pub fn domains(&self) -> &'static [&'static str] {
        &DOMAIN_NAMES[..=self.n_layers]
    }

    /// Range tag images take once loaded for training.
    pub fn working_range(&self) -> RangeTag {
        match self.composite {
            CompositeOp::LogAdditive => RangeTag::Log,
            _ => RangeTag::Unit,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.version != MANIFEST_VERSION {
            return Err(Error::InvalidInput(format!(
                "manifest version {} (expected {MANIFEST_VERSION})",
                self.version
            )));
        }
        if !(2..=3).contains(&self.n_layers) {
            return Err(Error::InvalidInput(format!(
                "manifest declares {} layers; 2 or 3 supported",
                self.n_layers
            )));
        }
        let mut seen = std::collections::BTreeSet::new();
        for s in &self.scenes {
            if s.id.is_empty() {
                return Err(Error::InvalidInput("scene with empty id".into()));
            }
            if !seen.insert(&s.id) {
                return Err(Error::InvalidInput(format!("duplicate scene id {}", s.id)));
            }
            if let Some(d) = s.files.keys().find(|d| !self.domains().contains(&d.as_str())) {
                return Err(Error::InvalidInput(format!(
                    "scene {} lists unknown domain {d}",
                    s.id
                )));
            }
        }
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Manifest> {
        let path = dir.join(MANIFEST_FILE);
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let m: Manifest = serde_json::from_str(&text).map_err(|e| Error::json(&path, e))?;
        m.validate()?;
        Ok(m)
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join(MANIFEST_FILE);
        let text = serde_json::to_string_pretty(self).map_err(|e| Error::json(&path, e))?;
        std::fs::write(&path, text).map_err(|e| Error::io(&path, e))
    }
}
