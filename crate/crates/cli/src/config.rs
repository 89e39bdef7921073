//! Run configuration: one TOML file, overridden by command-line flags.

use std::path::{Path, PathBuf};

use geomatch::benchgen::BenchConfig;
use geomatch::matcher::InferenceConfig;
use geomatch::metrics::EvalConfig;
use geomatch::pose::AlignMetric;
use geomatch::synth::CorpusConfig;
use geomatch::trainer::TrainConfig;
use geomatch::ViewTransform;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{json_pointer, CliError, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AlignConfig {
    /// Align the source pose before matching.
    pub enabled: bool,
    /// Candidate source variants; identity must come first.
    pub variants: Vec<ViewTransform>,
    pub metric: AlignMetric,
}

impl Default for AlignConfig {
    fn default() -> Self {
        Self {
            enabled: false,
            variants: vec![ViewTransform::Identity, ViewTransform::Hflip],
            metric: AlignMetric::default(),
        }
    }
}

/// Everything a run depends on. `seed` is authoritative: it is copied into
/// the benchmark, training and synthesis sections before use.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    /// COCO-style keypoint annotations.
    pub dataset: Option<PathBuf>,
    /// Directory holding `manifest.json` and `<id>__<variant>.npy` files.
    pub features: Option<PathBuf>,
    /// Directory of subgroup schemas, one `<category>.json` each.
    pub schemas: Option<PathBuf>,
    /// Post-processor checkpoint applied to features before matching.
    pub model: Option<PathBuf>,
    pub inference: InferenceConfig,
    pub alignment: AlignConfig,
    pub benchmark: BenchConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub synth: CorpusConfig,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        Self::from_toml(&text, path)
    }

    pub fn from_toml(text: &str, origin: &Path) -> Result<Self> {
        let de = toml::Deserializer::new(text);
        serde_path_to_error::deserialize(de).map_err(|e| CliError::Schema {
            path: origin.to_path_buf(),
            pointer: json_pointer(e.path()),
            message: e.inner().message().to_string(),
        })
    }

    /// Propagates the seed, checks the sections and that referenced inputs exist.
    pub fn finalize(mut self) -> Result<Self> {
        self.benchmark.seed = self.seed;
        self.train.seed = self.seed;
        self.synth.seed = self.seed;
        self.inference.validate()?;
        self.benchmark.validate()?;
        self.train.validate()?;
        if self.alignment.variants.first() != Some(&ViewTransform::Identity) {
            return Err(CliError::Input("alignment variants must start with identity".into()));
        }
        for (name, p) in [
            ("dataset", &self.dataset),
            ("features", &self.features),
            ("schemas", &self.schemas),
            ("model", &self.model),
        ] {
            if let Some(p) = p {
                if !p.exists() {
                    return Err(CliError::Input(format!("{name} path {} does not exist", p.display())));
                }
            }
        }
        Ok(self)
    }

    pub fn dataset(&self) -> Result<&Path> {
        self.dataset
            .as_deref()
            .ok_or_else(|| CliError::Input("no dataset given (--dataset or `dataset` in the config)".into()))
    }

    pub fn features(&self) -> Result<&Path> {
        self.features
            .as_deref()
            .ok_or_else(|| CliError::Input("no feature directory given (--features or `features` in the config)".into()))
    }

    /// SHA-256 of the canonical JSON form, hex encoded.
    pub fn hash(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(&bytes))
    }
}
