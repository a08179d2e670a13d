use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::llm_client::{EndpointConfig, MockModelConfig};
use crate::perturb::PerturbConfig;
use crate::prompting::DEFAULT_PROMPT_IDS;
use crate::scoring::ParseMode;
use crate::twostep::Transform;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetRef {
    pub name: String,
    /// Canonical JSONL file, relative to the manifest's directory.
    pub path: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelBackendSpec {
    Endpoint(EndpointConfig),
    Mock(MockModelConfig),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub id: String,
    #[serde(flatten)]
    pub backend: ModelBackendSpec,
    /// Manifest prompt id to the config id this model uses in its place.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub prompt_overrides: BTreeMap<String, String>,
}

impl ModelSpec {
    pub fn prompt_for<'a>(&'a self, prompt_id: &'a str) -> &'a str {
        self.prompt_overrides
            .get(prompt_id)
            .map(String::as_str)
            .unwrap_or(prompt_id)
    }
}

fn default_run_count() -> u32 {
    3
}

fn default_prompts() -> Vec<String> {
    DEFAULT_PROMPT_IDS.iter().map(|s| s.to_string()).collect()
}

fn default_transforms() -> Vec<Transform> {
    Transform::all()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunManifest {
    pub global_seed: u64,
    #[serde(default = "default_run_count")]
    pub run_count: u32,
    pub baseline: String,
    pub datasets: Vec<DatasetRef>,
    #[serde(default = "default_transforms")]
    pub transforms: Vec<Transform>,
    pub models: Vec<ModelSpec>,
    #[serde(default = "default_prompts")]
    pub prompts: Vec<String>,
    /// Extra prompt configuration files, relative to the manifest.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub prompt_files: Vec<PathBuf>,
    /// NOTO strings per language and AddNoto placement.
    #[serde(default)]
    pub perturb: PerturbConfig,
    #[serde(default)]
    pub parse_mode: ParseMode,
    /// Informational; excluded from the digest.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub created_at: Option<String>,
}

#[derive(Debug, Error)]
pub enum ManifestError {
    #[error("cannot read manifest {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("invalid manifest {origin}: {message}")]
    Parse { origin: String, message: String },
    #[error("invalid manifest: {0}")]
    Invalid(String),
}

/// Command-line overrides applied on top of a manifest file.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub runs: Option<u32>,
    pub prompts: Option<Vec<String>>,
    pub baseline: Option<String>,
}

impl RunManifest {
    pub fn from_toml_str(text: &str, origin: &str) -> Result<Self, ManifestError> {
        let m: RunManifest = toml::from_str(text).map_err(|e| ManifestError::Parse {
            origin: origin.to_string(),
            message: e.to_string(),
        })?;
        m.validate()?;
        Ok(m)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, ManifestError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|source| ManifestError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_toml_str(&text, &path.display().to_string())
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("manifest serializes to TOML")
    }

    pub fn validate(&self) -> Result<(), ManifestError> {
        if self.run_count == 0 {
            return Err(ManifestError::Invalid("run_count must be at least 1".into()));
        }
        if !self.models.iter().any(|m| m.id == self.baseline) {
            return Err(ManifestError::Invalid(format!(
                "baseline model {:?} is not among the models",
                self.baseline
            )));
        }
        for m in &self.models {
            if let ModelBackendSpec::Endpoint(cfg) = &m.backend {
                cfg.validate().map_err(|e| ManifestError::Invalid(e.to_string()))?;
            }
        }
        Ok(())
    }

    pub fn apply(&mut self, overrides: &Overrides) -> Result<(), ManifestError> {
        if let Some(seed) = overrides.seed {
            self.global_seed = seed;
        }
        if let Some(runs) = overrides.runs {
            self.run_count = runs;
        }
        if let Some(prompts) = &overrides.prompts {
            self.prompts = prompts.clone();
        }
        if let Some(baseline) = &overrides.baseline {
            self.baseline = baseline.clone();
        }
        self.validate()
    }

    /// Canonical JSON of everything that determines results.
    pub fn canonical_json(&self) -> String {
        let mut m = self.clone();
        m.created_at = None;
        // serde_json maps are ordered, so a Value round trip sorts keys.
        let value = serde_json::to_value(&m).expect("manifest serializes");
        serde_json::to_string(&value).expect("value serializes")
    }

    pub fn digest(&self) -> String {
        hex::encode(Sha256::digest(self.canonical_json().as_bytes()))
    }

    pub fn model(&self, id: &str) -> Option<&ModelSpec> {
        self.models.iter().find(|m| m.id == id)
    }

    pub fn has_endpoints(&self) -> bool {
        self.models
            .iter()
            .any(|m| matches!(m.backend, ModelBackendSpec::Endpoint(_)))
    }
}
