//! Run configuration: defaults, config file, and flag/env overrides, in
//! ascending precedence.

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use serde::Deserialize;

use markmask::backends::{BackendConfig, CompletionBackend, RetryPolicy};
use markmask::prompting::DecontextTemplate;
use markmask::segment::ProtectionRules;
use markmask::silver::ChainConfig;
use markmask::student::PipelineConfig;

/// The optional TOML config file.
#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    pub k: Option<usize>,
    pub budget: Option<usize>,
    pub threshold: Option<f64>,
    pub seed: Option<u64>,
    pub parallelism: Option<usize>,
    pub out: Option<PathBuf>,
    pub cache_dir: Option<PathBuf>,
    /// Decontextualization preamble file (instructions + exemplars).
    pub prompts: Option<PathBuf>,
    /// Protection rules file for sentence segmentation.
    pub rules: Option<PathBuf>,
    #[serde(default)]
    pub backends: BTreeMap<String, String>,
}

impl FileConfig {
    pub fn load(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("cannot read config {}", path.display()))?;
        toml::from_str(&text).with_context(|| format!("bad config {}", path.display()))
    }
}

/// Fully resolved settings for one invocation.
pub struct Settings {
    pub k: usize,
    pub budget: usize,
    pub threshold: f64,
    pub seed: u64,
    pub parallelism: usize,
    pub out: Option<PathBuf>,
    pub cache_dir: Option<PathBuf>,
    pub backends: BTreeMap<String, String>,
    pub template: DecontextTemplate,
    pub rules: Arc<ProtectionRules>,
}

pub struct Overrides {
    pub k: Option<usize>,
    pub budget: Option<usize>,
    pub threshold: Option<f64>,
    pub seed: Option<u64>,
    pub parallelism: Option<usize>,
    pub out: Option<PathBuf>,
    pub cache_dir: Option<PathBuf>,
    pub prompts: Option<PathBuf>,
    pub rules: Option<PathBuf>,
    pub backends: Vec<String>,
}

impl Settings {
    pub fn resolve(file: FileConfig, flags: Overrides) -> Result<Self> {
        let mut backends = file.backends;
        for spec in &flags.backends {
            let (role, location) = spec
                .split_once('=')
                .ok_or_else(|| anyhow::anyhow!("--backend expects ROLE=SPEC, got {spec:?}"))?;
            backends.insert(role.to_string(), location.to_string());
        }
        let prompts = flags.prompts.or(file.prompts);
        let template = match &prompts {
            Some(path) => DecontextTemplate::from_file(path)
                .with_context(|| format!("cannot read prompt template {}", path.display()))?,
            None => DecontextTemplate::default(),
        };
        let rules_path = flags.rules.or(file.rules);
        let rules = match &rules_path {
            Some(path) => Arc::new(
                ProtectionRules::from_file(path)
                    .map_err(|e| anyhow::anyhow!("cannot load rules: {e}"))?,
            ),
            None => Arc::new(ProtectionRules::default()),
        };
        Ok(Self {
            k: flags.k.or(file.k).unwrap_or(5),
            budget: flags.budget.or(file.budget).unwrap_or(1024),
            threshold: flags.threshold.or(file.threshold).unwrap_or(0.5),
            seed: flags.seed.or(file.seed).unwrap_or(0),
            parallelism: flags.parallelism.or(file.parallelism).unwrap_or(4),
            out: flags.out.or(file.out),
            cache_dir: flags.cache_dir.or(file.cache_dir),
            backends,
            template,
            rules,
        })
    }

    pub fn chain_config(&self) -> ChainConfig {
        ChainConfig {
            k: self.k,
            budget: self.budget,
            threshold: self.threshold,
            parallelism: self.parallelism,
            seed: self.seed,
            template: self.template.clone(),
            rules: self.rules.clone(),
            ..ChainConfig::default()
        }
    }

    pub fn pipeline_config(&self) -> PipelineConfig {
        PipelineConfig {
            k: self.k,
            budget: self.budget,
            rules: self.rules.clone(),
            ..PipelineConfig::default()
        }
    }

    /// Build the backend for a role. Responses are cached per role under
    /// the cache directory when one is configured.
    pub fn backend(&self, role: &str) -> Result<Arc<dyn CompletionBackend>> {
        let Some(spec) = self.backends.get(role) else {
            bail!("no backend configured for role {role:?}; pass --backend {role}=<spec>");
        };
        let mut config = BackendConfig::parse_spec(spec)
            .map_err(|e| anyhow::anyhow!("bad backend for role {role:?}: {e}"))?;
        config.parallelism = self.parallelism;
        config.retry = RetryPolicy::default();
        config.cache_dir = self.cache_dir.as_ref().map(|d| d.join(role));
        config
            .build()
            .map_err(|e| anyhow::anyhow!("cannot build backend {role:?}: {e}"))
    }

    pub fn has_backend(&self, role: &str) -> bool {
        self.backends.contains_key(role)
    }
}
