//! Run configuration file (TOML): input paths, per-role endpoints, seeds,
//! and stage settings. Command-line flags override the file.

use crate::cohorts::Attribute;
use crate::factory::OocMode;
use crate::gateway::EndpointConfig;
use crate::probe::ScenarioSelection;
use serde::Deserialize;
use std::path::{Path, PathBuf};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("config file {0} not found")]
    Missing(String),
    #[error("cannot read {path}: {message}")]
    Io { path: String, message: String },
    #[error("invalid config {path}: {message}")]
    Invalid { path: String, message: String },
    #[error("config is missing endpoint '{0}'")]
    MissingEndpoint(&'static str),
    #[error("config is missing path '{0}'")]
    MissingPath(&'static str),
    #[error("referenced path does not exist: {0}")]
    PathNotFound(String),
    #[error("unknown attribute '{0}'")]
    UnknownAttribute(String),
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Paths {
    pub survey: Option<PathBuf>,
    pub profiles: Option<PathBuf>,
    pub dialogues: Option<PathBuf>,
    pub responses: Option<PathBuf>,
    pub country_map: Option<PathBuf>,
    pub job_rules: Option<PathBuf>,
    pub position_rules: Option<PathBuf>,
    pub templates: Option<PathBuf>,
    pub human_ratings: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Endpoints {
    pub simulator: Option<EndpointConfig>,
    pub detector: Option<EndpointConfig>,
    pub qa: Option<EndpointConfig>,
    pub target: Option<EndpointConfig>,
    pub judge: Option<EndpointConfig>,
    pub classifier: Option<EndpointConfig>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FactorySettings {
    #[serde(default = "default_max_runs")]
    pub max_runs: usize,
    #[serde(default)]
    pub ooc_mode: OocMode,
    /// Recorded in generation metadata when set; left out by default so
    /// reruns stay byte-identical.
    #[serde(default)]
    pub timestamp: Option<String>,
}

fn default_max_runs() -> usize {
    5
}

impl Default for FactorySettings {
    fn default() -> Self {
        Self {
            max_runs: default_max_runs(),
            ooc_mode: OocMode::default(),
            timestamp: None,
        }
    }
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProbeSettings {
    #[serde(default)]
    pub reasoning_mode: bool,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct JudgeSettings {
    #[serde(default = "default_judge_seeds")]
    pub seeds: usize,
}

fn default_judge_seeds() -> usize {
    10
}

impl Default for JudgeSettings {
    fn default() -> Self {
        Self {
            seeds: default_judge_seeds(),
        }
    }
}

/// How job titles turn into job-category / position-level labels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ClassifierBackendKind {
    /// Deterministic keyword rules from the rules files.
    #[default]
    MappingFile,
    /// Zero-shot classification through the `classifier` endpoint,
    /// constrained to the label-set files.
    Endpoint,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CohortSettings {
    #[serde(default = "default_attributes")]
    pub attributes: Vec<String>,
    #[serde(default)]
    pub classifier_backend: ClassifierBackendKind,
    /// Label-set files for the endpoint backend.
    pub job_labels: Option<PathBuf>,
    pub position_labels: Option<PathBuf>,
}

fn default_attributes() -> Vec<String> {
    Attribute::ALL.iter().map(|a| a.label().to_string()).collect()
}

impl Default for CohortSettings {
    fn default() -> Self {
        Self {
            attributes: default_attributes(),
            classifier_backend: ClassifierBackendKind::default(),
            job_labels: None,
            position_labels: None,
        }
    }
}

#[derive(Debug, Clone, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub scenario: ScenarioSelection,
    #[serde(default = "default_out_dir")]
    pub out_dir: PathBuf,
    #[serde(default)]
    pub strict_degenerate: bool,
    #[serde(default)]
    pub paths: Paths,
    #[serde(default)]
    pub endpoints: Endpoints,
    #[serde(default)]
    pub factory: FactorySettings,
    #[serde(default)]
    pub probe: ProbeSettings,
    #[serde(default)]
    pub judge: JudgeSettings,
    #[serde(default)]
    pub cohorts: CohortSettings,
    /// Digest of the config file bytes, stamped into every artifact.
    #[serde(skip)]
    pub digest: String,
}

fn default_out_dir() -> PathBuf {
    PathBuf::from("out")
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        if !path.exists() {
            return Err(ConfigError::Missing(path.display().to_string()));
        }
        let text = std::fs::read_to_string(path).map_err(|e| ConfigError::Io {
            path: path.display().to_string(),
            message: e.to_string(),
        })?;
        let mut config: RunConfig =
            toml::from_str(&text).map_err(|e| ConfigError::Invalid {
                path: path.display().to_string(),
                message: e.to_string(),
            })?;
        config.digest = crate::seed::sha256_hex(text.as_bytes());
        Ok(config)
    }

    pub fn attributes(&self) -> Result<Vec<Attribute>, ConfigError> {
        self.cohorts
            .attributes
            .iter()
            .map(|label| {
                Attribute::parse(label)
                    .ok_or_else(|| ConfigError::UnknownAttribute(label.clone()))
            })
            .collect()
    }
}

/// Fail fast when a command needs a path that is absent or nonexistent.
pub fn require_path<'a>(
    value: Option<&'a PathBuf>,
    name: &'static str,
) -> Result<&'a PathBuf, ConfigError> {
    let path = value.ok_or(ConfigError::MissingPath(name))?;
    if !path.exists() {
        return Err(ConfigError::PathNotFound(path.display().to_string()));
    }
    Ok(path)
}

pub fn require_endpoint<'a>(
    value: Option<&'a EndpointConfig>,
    name: &'static str,
) -> Result<&'a EndpointConfig, ConfigError> {
    value.ok_or(ConfigError::MissingEndpoint(name))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_config_parses_with_defaults() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.toml");
        std::fs::write(
            &path,
            r#"
seed = 42

[paths]
survey = "assets/survey.json"

[endpoints.target]
base_url = "http://127.0.0.1:8080"
model_name = "target-model"
"#,
        )
        .unwrap();
        let config = RunConfig::load(&path).unwrap();
        assert_eq!(config.seed, 42);
        assert_eq!(config.factory.max_runs, 5);
        assert_eq!(config.judge.seeds, 10);
        assert_eq!(config.endpoints.target.as_ref().unwrap().max_concurrency, 8);
        assert_eq!(config.attributes().unwrap().len(), 5);
        assert!(!config.digest.is_empty());
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.toml");
        std::fs::write(&path, "sede = 42\n").unwrap();
        assert!(matches!(
            RunConfig::load(&path),
            Err(ConfigError::Invalid { .. })
        ));
    }
}
