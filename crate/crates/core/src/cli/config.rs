use std::path::{Path, PathBuf};
use std::sync::LazyLock;
use std::time::Duration;

use regex::{Captures, Regex};
use serde::Deserialize;
use sha2::{Digest, Sha256};

use crate::classifier::{ClassifierPlugin, PluginTarget};
use crate::cohort_stats::Outcome;
use crate::hub_client::CrawlConfig;
use crate::preprocess::{DomainMap, PopularityScope, Preprocessor};
use crate::stratifier::{Selector, StratificationCriteria};

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("environment variable `{0}` is not set")]
    MissingEnv(String),
    #[error("{0}")]
    Parse(String),
    #[error("invalid config: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    pub crawl: CrawlConfig,
    #[serde(default)]
    pub domain_map_path: Option<PathBuf>,
    #[serde(default)]
    pub classifier: ClassifierConfig,
    pub stratification: StratificationConfig,
    #[serde(default)]
    pub sizing: SizingConfig,
    #[serde(default)]
    pub analysis: AnalysisConfig,
    pub seed: u64,
    pub store_path: PathBuf,
    /// Derived outputs, one directory per snapshot. Defaults to
    /// `<store_path>/derived`.
    #[serde(default)]
    pub work_dir: Option<PathBuf>,
    pub report_path: PathBuf,
    /// Defaults to `<store_path>/runs.log`.
    #[serde(default)]
    pub run_log: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields, tag = "kind", rename_all = "snake_case")]
pub enum ClassifierConfig {
    #[default]
    Rule,
    Plugin {
        #[serde(default)]
        command: Option<PathBuf>,
        #[serde(default)]
        endpoint: Option<String>,
        #[serde(default = "default_batch")]
        batch_size: usize,
        #[serde(default = "default_plugin_timeout")]
        timeout_ms: u64,
    },
}

fn default_batch() -> usize {
    256
}

fn default_plugin_timeout() -> u64 {
    30_000
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StratificationConfig {
    pub criteria: Vec<Selector>,
    #[serde(default)]
    pub popularity_scope: PopularityScope,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SizingConfig {
    #[serde(default)]
    pub confidence_z: Option<f64>,
    #[serde(default)]
    pub expected_proportion_p: Option<f64>,
    #[serde(default)]
    pub margin_e: Option<f64>,
    /// Fixed total sample size, bypassing the sizing formula.
    #[serde(default)]
    pub total_n: Option<usize>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnalysisConfig {
    #[serde(default = "default_outcome")]
    pub outcome: String,
    #[serde(default = "default_group")]
    pub group: Selector,
    /// Pairs of numeric attributes correlated within each stratum.
    #[serde(default)]
    pub correlations: Vec<[String; 2]>,
}

fn default_outcome() -> String {
    "downloads".into()
}

fn default_group() -> Selector {
    Selector::MaintenanceLabel
}

impl Default for AnalysisConfig {
    fn default() -> Self {
        AnalysisConfig { outcome: default_outcome(), group: default_group(), correlations: Vec::new() }
    }
}

static ENV_REF: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"\$\{([A-Za-z_][A-Za-z0-9_]*)(?::-([^}]*))?\}").expect("valid pattern"));

/// Replaces `${VAR}` and `${VAR:-default}` with values from `lookup`.
pub fn interpolate(text: &str, lookup: impl Fn(&str) -> Option<String>) -> Result<String, ConfigError> {
    let mut missing = None;
    let out = ENV_REF.replace_all(text, |c: &Captures| {
        let name = &c[1];
        match (lookup(name), c.get(2)) {
            (Some(v), _) => v,
            (None, Some(default)) => default.as_str().to_owned(),
            (None, None) => {
                missing.get_or_insert_with(|| name.to_owned());
                String::new()
            }
        }
    });
    match missing {
        Some(name) => Err(ConfigError::MissingEnv(name)),
        None => Ok(out.into_owned()),
    }
}

/// A validated config plus what is needed to reproduce a run from it.
#[derive(Debug, Clone)]
pub struct LoadedConfig {
    pub config: PipelineConfig,
    /// SHA-256 of the config file as written, before interpolation.
    pub sha256: String,
    pub path: PathBuf,
}

impl LoadedConfig {
    pub fn load(path: &Path) -> Result<LoadedConfig, ConfigError> {
        let raw = std::fs::read_to_string(path).map_err(|source| ConfigError::Io { path: path.to_owned(), source })?;
        let sha256 = hex::encode(Sha256::digest(raw.as_bytes()));
        let text = interpolate(&raw, |k| std::env::var(k).ok())?;
        let mut config: PipelineConfig = toml::from_str(&text).map_err(|e| ConfigError::Parse(e.to_string()))?;
        let base = path.parent().unwrap_or(Path::new("."));
        config.resolve_paths(base);
        config.crawl = config.crawl.with_env_token();
        config.validate()?;
        Ok(LoadedConfig { config, sha256, path: path.to_owned() })
    }
}

fn rebase(base: &Path, p: &mut PathBuf) {
    if p.is_relative() {
        *p = base.join(&*p);
    }
}

impl PipelineConfig {
    fn resolve_paths(&mut self, base: &Path) {
        rebase(base, &mut self.store_path);
        rebase(base, &mut self.report_path);
        for p in [&mut self.domain_map_path, &mut self.work_dir, &mut self.run_log].into_iter().flatten() {
            rebase(base, p);
        }
        if let ClassifierConfig::Plugin { command: Some(c), .. } = &mut self.classifier {
            rebase(base, c);
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.crawl.validate().map_err(|e| ConfigError::Invalid(format!("crawl: {e}")))?;
        if let Some(p) = &self.domain_map_path {
            if !p.is_file() {
                return Err(ConfigError::Invalid(format!("domain_map_path {} does not exist", p.display())));
            }
        }
        match &self.classifier {
            ClassifierConfig::Rule => {}
            ClassifierConfig::Plugin { command, endpoint, batch_size, .. } => {
                match (command, endpoint) {
                    (Some(c), None) if !c.is_file() => {
                        return Err(ConfigError::Invalid(format!("plugin command {} does not exist", c.display())));
                    }
                    (Some(_), None) | (None, Some(_)) => {}
                    _ => return Err(ConfigError::Invalid("plugin needs exactly one of command, endpoint".into())),
                }
                if *batch_size == 0 {
                    return Err(ConfigError::Invalid("plugin batch_size must be >= 1".into()));
                }
            }
        }
        StratificationCriteria::new(self.stratification.criteria.clone())
            .map_err(|e| ConfigError::Invalid(format!("stratification: {e}")))?;
        self.outcome()?;
        for [x, y] in &self.analysis.correlations {
            x.parse::<Outcome>().map_err(ConfigError::Invalid)?;
            y.parse::<Outcome>().map_err(ConfigError::Invalid)?;
        }
        Ok(())
    }

    pub fn outcome(&self) -> Result<Outcome, ConfigError> {
        self.analysis.outcome.parse().map_err(ConfigError::Invalid)
    }

    pub fn criteria(&self) -> StratificationCriteria {
        StratificationCriteria::new(self.stratification.criteria.clone()).expect("validated at load")
    }

    pub fn work_dir(&self) -> PathBuf {
        self.work_dir.clone().unwrap_or_else(|| self.store_path.join("derived"))
    }

    pub fn run_log(&self) -> PathBuf {
        self.run_log.clone().unwrap_or_else(|| self.store_path.join("runs.log"))
    }

    pub fn preprocessor(&self) -> Result<Preprocessor, ConfigError> {
        let domain_map = match &self.domain_map_path {
            Some(p) => DomainMap::load(p).map_err(|e| ConfigError::Invalid(e.to_string()))?,
            None => DomainMap::default(),
        };
        Ok(Preprocessor { domain_map, popularity_scope: self.stratification.popularity_scope, vocabulary: None })
    }

    pub fn plugin(&self) -> Option<ClassifierPlugin> {
        match &self.classifier {
            ClassifierConfig::Rule => None,
            ClassifierConfig::Plugin { command, endpoint, batch_size, timeout_ms } => {
                let target = match (command, endpoint) {
                    (Some(c), _) => PluginTarget::Command(c.clone()),
                    (None, Some(e)) => PluginTarget::Endpoint(e.clone()),
                    (None, None) => unreachable!("validated at load"),
                };
                Some(ClassifierPlugin { target, batch_size: *batch_size, timeout: Duration::from_millis(*timeout_ms) })
            }
        }
    }
}
