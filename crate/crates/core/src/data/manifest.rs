use std::collections::HashSet;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::tile::{read_tile, Tile, TileMeta};
use super::DataError;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const MANIFEST_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        })
    }
}

impl FromStr for Split {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(format!("unknown split `{other}` (train|val|test)")),
        }
    }
}

/// Dataset index stored as `manifest.json` in the dataset root.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub format_version: u32,
    /// ΔH normalization constant in meters.
    pub h_scale: f64,
    pub gsd_image: f32,
    pub gsd_dsm: f32,
    pub epoch_1: String,
    pub epoch_2: String,
    /// Opaque georeferencing label, carried but never interpreted.
    pub crs: String,
    pub train: Vec<String>,
    pub val: Vec<String>,
    pub test: Vec<String>,
    #[serde(skip)]
    pub root: PathBuf,
}

impl DatasetManifest {
    pub fn ids(&self, split: Split) -> &[String] {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }

    /// Structural checks that need no tile data.
    pub fn validate(&self) -> Result<(), DataError> {
        if self.format_version != MANIFEST_VERSION {
            return Err(DataError::Manifest(format!(
                "format_version {} unsupported (expected {MANIFEST_VERSION})",
                self.format_version
            )));
        }
        if !self.h_scale.is_finite() || self.h_scale <= 0.0 {
            return Err(DataError::BadScale(self.h_scale));
        }
        let mut seen = HashSet::new();
        for split in Split::ALL {
            for id in self.ids(split) {
                if !seen.insert(id.as_str()) {
                    return Err(DataError::Manifest(format!(
                        "tile `{id}` listed twice across splits"
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn meta_template(&self) -> TileMeta {
        TileMeta {
            tile_id: String::new(),
            gsd_image: self.gsd_image,
            gsd_dsm: self.gsd_dsm,
            bands: 0,
            epoch_1: self.epoch_1.clone(),
            epoch_2: self.epoch_2.clone(),
        }
    }

    pub fn load_tile(&self, id: &str) -> Result<Tile, DataError> {
        read_tile(&self.root, id, &self.meta_template())
    }

    pub fn load_split(&self, split: Split) -> Result<Vec<Tile>, DataError> {
        self.ids(split).iter().map(|id| self.load_tile(id)).collect()
    }

    /// Verifies `h_scale >= max |ΔH|` over the train split.
    pub fn check_h_scale(&self) -> Result<(), DataError> {
        for id in &self.train {
            let t = self.load_tile(id)?;
            if let Some(v) = t
                .delta3d
                .values
                .iter()
                .map(|v| v.abs() as f64)
                .find(|&v| v > self.h_scale)
            {
                return Err(DataError::OutOfRange {
                    value: v,
                    h_scale: self.h_scale,
                });
            }
        }
        Ok(())
    }

    pub fn save(&self) -> Result<(), DataError> {
        let path = self.root.join(MANIFEST_FILE);
        let mut text = serde_json::to_string_pretty(self)
            .map_err(|e| DataError::Manifest(e.to_string()))?;
        text.push('\n');
        fs::write(&path, text).map_err(|e| DataError::io(&path, e))
    }

    pub fn load(root: &Path) -> Result<Self, DataError> {
        let path = root.join(MANIFEST_FILE);
        let text = fs::read_to_string(&path).map_err(|e| DataError::io(&path, e))?;
        let mut m: DatasetManifest =
            serde_json::from_str(&text).map_err(|e| DataError::Manifest(e.to_string()))?;
        m.root = root.to_path_buf();
        m.validate()?;
        Ok(m)
    }
}
