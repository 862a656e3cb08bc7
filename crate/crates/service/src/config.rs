//! The project configuration file.

use std::fs;
use std::path::{Path, PathBuf};

use bridgelab::phantom::DatasetConfig;
use bridgelab::{NetConfig, SamplerConfig, ScheduleConfig, TrainConfig};
use serde::{Deserialize, Serialize};

use crate::error::{Result, ServiceError};

/// Environment variable that replaces `data_root` from the file.
pub const DATA_ROOT_ENV: &str = "BRIDGELAB_DATA_ROOT";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ServerConfig {
    pub bind: String,
    pub port: u16,
}

impl Default for ServerConfig {
    fn default() -> Self {
        Self {
            bind: "127.0.0.1".into(),
            port: 8080,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProjectConfig {
    pub data_root: PathBuf,
    pub schedule: ScheduleConfig,
    pub net: NetConfig,
    pub train: TrainConfig,
    pub sampler: SamplerConfig,
    pub dataset: DatasetConfig,
    pub server: ServerConfig,
}

impl Default for ProjectConfig {
    fn default() -> Self {
        Self {
            data_root: PathBuf::from("data"),
            schedule: ScheduleConfig::default(),
            net: NetConfig::default(),
            train: TrainConfig::default(),
            sampler: SamplerConfig::default(),
            dataset: DatasetConfig::default(),
            server: ServerConfig::default(),
        }
    }
}

impl ProjectConfig {
    pub fn parse(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| ServiceError::Config(e.message().to_string()))
    }

    /// Reads `path` (or the defaults when `None`), applies the data-root
    /// override and validates. A relative data root resolves against the
    /// config file's directory. The data root is created if missing.
    pub fn load(path: Option<&Path>) -> Result<Self> {
        Self::load_with_env(path, std::env::var_os(DATA_ROOT_ENV).map(PathBuf::from))
    }

    pub fn load_with_env(path: Option<&Path>, data_root_override: Option<PathBuf>) -> Result<Self> {
        let mut cfg = match path {
            Some(p) => {
                let text = fs::read_to_string(p)
                    .map_err(|e| ServiceError::Config(format!("{}: {e}", p.display())))?;
                let mut cfg = Self::parse(&text)?;
                if cfg.data_root.is_relative() {
                    let base = p.parent().unwrap_or(Path::new("."));
                    cfg.data_root = base.join(&cfg.data_root);
                }
                cfg
            }
            None => Self::default(),
        };
        if let Some(root) = data_root_override {
            cfg.data_root = root;
        }
        cfg.validate()?;
        fs::create_dir_all(&cfg.data_root)
            .map_err(|e| ServiceError::Config(format!("data root {}: {e}", cfg.data_root.display())))?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let schedule = self
            .schedule
            .build()
            .map_err(|e| ServiceError::Config(format!("schedule: {e}")))?;
        self.net
            .validate()
            .map_err(|e| ServiceError::Config(format!("net: {e}")))?;
        self.train
            .validate(&schedule)
            .map_err(|e| ServiceError::Config(format!("train: {e}")))?;
        if self.sampler.scales.is_empty() {
            return Err(ServiceError::Config("sampler.scales must not be empty".into()));
        }
        if self.sampler.nfe == 0 || self.sampler.nfe > schedule.n_steps() {
            return Err(ServiceError::Config(format!(
                "sampler.nfe must lie in 1..={}",
                schedule.n_steps()
            )));
        }
        if !self.dataset.size.is_multiple_of(self.net.stride()) {
            return Err(ServiceError::Config(format!(
                "dataset.size {} is not divisible by the network stride {}",
                self.dataset.size,
                self.net.stride()
            )));
        }
        Ok(())
    }

    pub fn dataset_dir(&self) -> PathBuf {
        self.data_root.join("dataset")
    }

    pub fn runs_dir(&self) -> PathBuf {
        self.data_root.join("runs")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn example_config_parses_and_validates() {
        let cfg = ProjectConfig::parse(include_str!("../../../bridgelab.example.toml")).unwrap();
        cfg.validate().unwrap();
        assert_eq!(cfg.net.widths, vec![8, 16, 32, 32]);
        assert_eq!(cfg.train.loss_kind, bridgelab::LossKind::Endpoint);
    }

    #[test]
    fn empty_file_gives_defaults() {
        assert_eq!(ProjectConfig::parse("").unwrap(), ProjectConfig::default());
    }

    #[test]
    fn partial_sections_keep_other_defaults() {
        let cfg = ProjectConfig::parse(
            "data_root = \"/tmp/x\"\n[sampler]\nnfe = 5\n[server]\nport = 9000\n",
        )
        .unwrap();
        assert_eq!(cfg.sampler.nfe, 5);
        assert_eq!(cfg.sampler.scales, vec![1.0, 2.0, 4.0, 5.0, 8.0, 10.0]);
        assert_eq!(cfg.server.port, 9000);
        assert_eq!(cfg.server.bind, "127.0.0.1");
        assert_eq!(cfg.data_root, PathBuf::from("/tmp/x"));
    }

    #[test]
    fn rejects_unknown_keys_and_bad_values() {
        assert!(matches!(ProjectConfig::parse("nope = 1"), Err(ServiceError::Config(_))));
        assert!(matches!(ProjectConfig::parse("[sampler]\nnfe = \"ten\""), Err(ServiceError::Config(_))));
        let cfg = ProjectConfig::parse("[sampler]\nscales = []").unwrap();
        assert!(matches!(cfg.validate(), Err(ServiceError::Config(_))));
        let cfg = ProjectConfig::parse("[dataset]\nsize = 30").unwrap();
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn env_override_replaces_data_root() {
        let dir = tempfile::tempdir().unwrap();
        let file = dir.path().join("bridgelab.toml");
        fs::write(&file, "data_root = \"rel\"\n").unwrap();
        let cfg = ProjectConfig::load_with_env(Some(&file), None).unwrap();
        assert_eq!(cfg.data_root, dir.path().join("rel"));
        assert!(cfg.data_root.is_dir());
        let other = dir.path().join("elsewhere");
        let cfg = ProjectConfig::load_with_env(Some(&file), Some(other.clone())).unwrap();
        assert_eq!(cfg.data_root, other);
        assert!(other.is_dir());
    }

    #[test]
    fn missing_file_is_a_config_error() {
        let err = ProjectConfig::load_with_env(Some(Path::new("/nonexistent/x.toml")), None).unwrap_err();
        assert!(matches!(err, ServiceError::Config(_)));
    }
}
