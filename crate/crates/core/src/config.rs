//! Run configuration file (TOML).
//!
//! Every field is optional so that command-line flags and environment
//! variables can be layered on top; unset values fall back to the defaults
//! (d = 4, mu = 0.3, epsilon = 0.1).

use std::path::{Path, PathBuf};
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::error::{read_to_string, Error, Result};
use crate::eval::CoverageWeights;
use crate::llm::ProviderConfig;
use crate::populate::PopulationConfig;

pub const DEFAULT_CHUNK_BUDGET: usize = 512;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub schema_dir: Option<PathBuf>,
    pub root: Option<PathBuf>,
    pub examples_dir: Option<PathBuf>,
    pub kb_path: Option<PathBuf>,
    pub out_dir: Option<PathBuf>,
    pub mock_script: Option<PathBuf>,
    pub depth_threshold: Option<usize>,
    pub mu: Option<f64>,
    pub epsilon: Option<f64>,
    pub use_rag: Option<bool>,
    pub k_chunks: Option<usize>,
    pub retry_limit: Option<u32>,
    pub chunk_budget: Option<usize>,
    pub max_in_flight: Option<usize>,
    /// Skip the model-guided coverage step when false.
    pub coverage: Option<bool>,
    pub provider: Option<ProviderSection>,
    pub contracts: Vec<ContractEntry>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProviderSection {
    pub endpoint: Option<String>,
    pub model: Option<String>,
    pub credential_env: Option<String>,
    pub timeout_secs: Option<f64>,
    pub retry_limit: Option<u32>,
    pub embedding_model: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ContractEntry {
    pub id: String,
    pub contract_type: String,
    /// Path to the natural-language contract description.
    pub text: PathBuf,
    /// Example directory for this contract; defaults to `examples_dir/<contract_type>`.
    #[serde(default)]
    pub examples: Option<PathBuf>,
}

impl RunConfig {
    /// Parses a config file and makes its relative paths relative to the file's directory.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = read_to_string(path)?;
        let mut cfg: RunConfig =
            toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or_else(|| Path::new("."));
        cfg.rebase(base);
        Ok(cfg)
    }

    fn rebase(&mut self, base: &Path) {
        let fix = |p: &mut Option<PathBuf>| {
            if let Some(path) = p {
                if path.is_relative() {
                    *path = base.join(&*path);
                }
            }
        };
        fix(&mut self.schema_dir);
        fix(&mut self.examples_dir);
        fix(&mut self.kb_path);
        fix(&mut self.out_dir);
        fix(&mut self.mock_script);
        for c in &mut self.contracts {
            if c.text.is_relative() {
                c.text = base.join(&c.text);
            }
            fix(&mut c.examples);
        }
    }

    pub fn population(&self) -> PopulationConfig {
        let d = PopulationConfig::default();
        PopulationConfig {
            depth_threshold: self.depth_threshold.unwrap_or(d.depth_threshold),
            use_rag: self.use_rag.unwrap_or(d.use_rag),
            retry_limit: self.retry_limit.unwrap_or(d.retry_limit),
            k_chunks: self.k_chunks.unwrap_or(d.k_chunks),
            max_in_flight: self.max_in_flight.unwrap_or(d.max_in_flight),
            ..d
        }
    }

    pub fn weights(&self) -> Result<CoverageWeights> {
        let d = CoverageWeights::default();
        CoverageWeights::new(self.mu.unwrap_or(d.mu), self.epsilon.unwrap_or(d.epsilon))
    }

    pub fn provider_config(&self) -> Result<ProviderConfig> {
        let mut cfg = ProviderConfig::default();
        if let Ok(endpoint) = std::env::var(crate::llm::ENDPOINT_ENV) {
            cfg.endpoint = endpoint;
        }
        if let Ok(model) = std::env::var(crate::llm::MODEL_ENV) {
            cfg.model_name = model;
        }
        if let Some(p) = &self.provider {
            if let Some(e) = &p.endpoint {
                if std::env::var(crate::llm::ENDPOINT_ENV).is_err() {
                    cfg.endpoint = e.clone();
                }
            }
            if let Some(m) = &p.model {
                if std::env::var(crate::llm::MODEL_ENV).is_err() {
                    cfg.model_name = m.clone();
                }
            }
            if let Some(c) = &p.credential_env {
                cfg.credential_ref = Some(c.clone());
            }
            if let Some(t) = p.timeout_secs {
                if !(t.is_finite() && t > 0.0) {
                    return Err(Error::Config("provider timeout must be positive".into()));
                }
                cfg.timeout = Duration::from_secs_f64(t);
            }
            if let Some(r) = p.retry_limit {
                cfg.retry_limit = r;
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_when_unset() {
        let cfg = RunConfig::default();
        let p = cfg.population();
        assert_eq!(p.depth_threshold, 4);
        let w = cfg.weights().unwrap();
        assert_eq!((w.mu, w.epsilon), (0.3, 0.1));
    }

    #[test]
    fn load_rebases_paths_and_rejects_unknown_keys() {
        let tmp = tempfile::tempdir().unwrap();
        let path = tmp.path().join("run.toml");
        std::fs::write(
            &path,
            r#"
schema_dir = "schema"
depth_threshold = 3
mu = 0.5
[[contracts]]
id = "irs-1"
contract_type = "interest-rate-swap"
text = "contracts/irs-1.txt"
"#,
        )
        .unwrap();
        let cfg = RunConfig::load(&path).unwrap();
        assert_eq!(cfg.schema_dir.unwrap(), tmp.path().join("schema"));
        assert_eq!(cfg.contracts[0].text, tmp.path().join("contracts/irs-1.txt"));
        assert_eq!(cfg.depth_threshold, Some(3));

        std::fs::write(&path, "depth = 3\n").unwrap();
        assert!(matches!(RunConfig::load(&path), Err(Error::Config(_))));
    }

    #[test]
    fn out_of_range_weights_rejected() {
        let cfg = RunConfig {
            mu: Some(1.5),
            ..Default::default()
        };
        assert!(cfg.weights().is_err());
    }
}
