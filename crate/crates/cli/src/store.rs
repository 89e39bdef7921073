//! Files on disk: JSON documents, the feature directory and schemas.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

use geomatch::benchgen::AnnotationCorpus;
use geomatch::geoware::SubgroupSchema;
use geomatch::{npy, FeatureMap, InstanceMask, ViewTransform};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{json_pointer, CliError, Result};

/// Provenance embedded in every output document.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Stamp {
    pub tool: String,
    pub config_hash: String,
    pub seed: u64,
}

impl Stamp {
    pub fn new(config_hash: String, seed: u64) -> Self {
        Self {
            tool: format!("geomatch {}", env!("CARGO_PKG_VERSION")),
            config_hash,
            seed,
        }
    }
}

/// An output document: the stamp followed by the payload's own fields.
#[derive(Serialize)]
pub struct Stamped<'a, T: Serialize> {
    pub stamp: &'a Stamp,
    #[serde(flatten)]
    pub body: &'a T,
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let bytes = fs::read(path).map_err(|e| CliError::io(path, e))?;
    let mut de = serde_json::Deserializer::from_slice(&bytes);
    serde_path_to_error::deserialize(&mut de).map_err(|e| CliError::Schema {
        path: path.to_path_buf(),
        pointer: json_pointer(e.path()),
        message: e.inner().to_string(),
    })
}

/// Pretty JSON with a trailing newline.
pub fn to_json_bytes<T: Serialize>(value: &T) -> Vec<u8> {
    let mut v = serde_json::to_vec_pretty(value).expect("serializable output");
    v.push(b'\n');
    v
}

pub fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    }
    fs::write(path, bytes).map_err(|e| CliError::io(path, e))
}

pub fn write_stamped<T: Serialize>(path: &Path, stamp: &Stamp, body: &T) -> Result<()> {
    write_bytes(path, &to_json_bytes(&Stamped { stamp, body }))
}

pub fn load_corpus(path: &Path) -> Result<AnnotationCorpus> {
    let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    AnnotationCorpus::from_coco(&text).map_err(|e| CliError::Input(format!("{}: {e}", path.display())))
}

pub const FEATURE_MANIFEST: &str = "manifest.json";

/// `manifest.json` of a feature directory, as written by the exporter.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FeatureManifest {
    /// Fallback subgroup schema for categories without their own.
    #[serde(default)]
    pub schema: Option<String>,
    #[serde(default)]
    pub extractor: String,
    pub grid_height: usize,
    pub grid_width: usize,
    pub channels: usize,
    pub variants: Vec<ViewTransform>,
    pub images: Vec<u64>,
    /// Whether `<id>__mask.npy` files are present.
    #[serde(default)]
    pub masks: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stamp: Option<Stamp>,
}

pub fn feature_file(dir: &Path, id: u64, variant: ViewTransform) -> PathBuf {
    dir.join(format!("{id}__{}.npy", variant.name()))
}

pub fn mask_file(dir: &Path, id: u64) -> PathBuf {
    dir.join(format!("{id}__mask.npy"))
}

/// Read access to a feature directory. Every map is checked against the
/// manifest shape and L2-normalized per cell on load.
#[derive(Clone, Debug)]
pub struct FeatureStore {
    pub dir: PathBuf,
    pub manifest: FeatureManifest,
}

impl FeatureStore {
    pub fn open(dir: &Path) -> Result<Self> {
        let manifest: FeatureManifest = read_json(&dir.join(FEATURE_MANIFEST))?;
        if manifest.grid_height == 0 || manifest.grid_width == 0 || manifest.channels == 0 {
            return Err(CliError::Input(format!("{}: empty feature shape", dir.display())));
        }
        Ok(Self {
            dir: dir.to_path_buf(),
            manifest,
        })
    }

    pub fn has(&self, id: u64, variant: ViewTransform) -> bool {
        feature_file(&self.dir, id, variant).is_file()
    }

    pub fn features(&self, id: u64, variant: ViewTransform) -> Result<FeatureMap> {
        let path = feature_file(&self.dir, id, variant);
        if !path.is_file() {
            return Err(CliError::Input(format!("missing feature file {}", path.display())));
        }
        let f = npy::read_feature_map(&path).map_err(|e| CliError::Input(format!("{}: {e}", path.display())))?;
        let m = &self.manifest;
        let (w, h) = variant.output_dims(m.grid_width, m.grid_height);
        if (f.height(), f.width(), f.channels()) != (h, w, m.channels) {
            return Err(CliError::Input(format!(
                "{}: shape ({}, {}, {}) does not match manifest ({h}, {w}, {})",
                path.display(),
                f.height(),
                f.width(),
                f.channels(),
                m.channels
            )));
        }
        if f.data().iter().any(|v| !v.is_finite()) {
            return Err(CliError::Input(format!("{}: non-finite values", path.display())));
        }
        Ok(f.l2_normalize()?)
    }

    /// The identity-view instance mask, or a full mask when none was exported.
    pub fn mask(&self, id: u64) -> Result<InstanceMask> {
        let path = mask_file(&self.dir, id);
        if !path.is_file() {
            return Ok(InstanceMask::full(self.manifest.grid_height, self.manifest.grid_width));
        }
        let m = npy::read_mask(&path).map_err(|e| CliError::Input(format!("{}: {e}", path.display())))?;
        if (m.height(), m.width()) != (self.manifest.grid_height, self.manifest.grid_width) {
            return Err(CliError::Input(format!("{}: mask shape does not match manifest", path.display())));
        }
        Ok(m)
    }

    pub fn has_mask(&self, id: u64) -> bool {
        mask_file(&self.dir, id).is_file()
    }
}

/// Subgroup schemas by category: `<dir>/<category>.json` when present,
/// otherwise the fallback schema named by the feature manifest.
#[derive(Clone, Debug, Default)]
pub struct SchemaBook {
    dir: Option<PathBuf>,
    fallback: Option<SubgroupSchema>,
}

impl SchemaBook {
    pub fn new(dir: Option<&Path>, fallback_name: Option<&str>) -> Result<Self> {
        let fallback = match (dir, fallback_name) {
            (Some(d), Some(name)) => {
                let p = d.join(format!("{name}.json"));
                if p.is_file() {
                    Some(Self::read(&p)?)
                } else {
                    None
                }
            }
            _ => None,
        };
        Ok(Self {
            dir: dir.map(Path::to_path_buf),
            fallback,
        })
    }

    fn read(path: &Path) -> Result<SubgroupSchema> {
        let s: SubgroupSchema = read_json(path)?;
        s.validate().map_err(|e| CliError::Input(format!("{}: {e}", path.display())))?;
        Ok(s)
    }

    /// The schema that applies to `category`, if any.
    pub fn resolve(&self, category: &str) -> Result<Option<SubgroupSchema>> {
        if let Some(d) = &self.dir {
            let p = d.join(format!("{category}.json"));
            if p.is_file() {
                return Self::read(&p).map(Some);
            }
        }
        Ok(self.fallback.clone())
    }

    /// Schemas for every category; `None` if any category has none.
    pub fn resolve_all<'a>(
        &self,
        categories: impl IntoIterator<Item = &'a str>,
    ) -> Result<Option<HashMap<String, SubgroupSchema>>> {
        let mut out = HashMap::new();
        for c in categories {
            if out.contains_key(c) {
                continue;
            }
            match self.resolve(c)? {
                Some(s) => {
                    out.insert(c.to_string(), s);
                }
                None => return Ok(None),
            }
        }
        Ok(Some(out))
    }
}
