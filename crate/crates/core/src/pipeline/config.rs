//! TOML configuration with `DEPWATCH_*` environment overrides.
//!
//! Every key is optional. Relative paths are taken relative to the working
//! directory. An override variable is `DEPWATCH_` followed by the upper-cased
//! dotted key with dots turned into underscores, e.g. `matcher.chunk` is
//! `DEPWATCH_MATCHER_CHUNK`.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Duration;

use serde::Deserialize;
use thiserror::Error;

use crate::genmachine::AdapterConfig;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Read {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("invalid config {path}: {message}")]
    Parse { path: String, message: String },
    #[error("{var}: {message}")]
    Env { var: String, message: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MatchMode {
    Offline,
    Remote,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    /// Root for everything not configured explicitly below.
    pub data_dir: PathBuf,
    pub store: Option<PathBuf>,
    pub output_dir: Option<PathBuf>,
    /// Attempts per task before it is dead-lettered.
    pub max_retries: u32,
    pub feeds: FeedsConfig,
    pub matcher: MatcherConfig,
    pub sbom: SbomConfig,
    pub github: GithubConfig,
    pub workers: WorkersConfig,
    pub daemon: DaemonConfig,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FeedsConfig {
    /// Directory holding `nvdcve-1.1-*.json[.gz]`, or an http(s) base URL.
    pub nvd: Option<String>,
    /// EPSS CSV path or URL.
    pub epss: Option<String>,
    pub first_year: i32,
    /// Defaults to the current year.
    pub last_year: Option<i32>,
    /// TOML file with an `[aliases]` table of extra CPE-to-purl mappings.
    pub aliases: Option<PathBuf>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MatcherConfig {
    pub mode: MatchMode,
    pub remote_url: Option<String>,
    /// `user:token` for basic auth against the remote index.
    pub credentials: Option<String>,
    pub batch: usize,
    pub chunk: usize,
    pub rate_per_minute: u32,
    pub burst: u32,
    /// 0 disables the cache.
    pub cache_ttl_hours: u64,
    pub timeout_secs: u64,
    pub max_retries: u32,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SbomConfig {
    pub shared_dir: Option<PathBuf>,
    pub timeout_secs: u64,
    pub use_go_tool: bool,
    /// Generators for other ecosystems, keyed by lower-case language name.
    pub adapters: BTreeMap<String, AdapterConfig>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GithubConfig {
    pub api: String,
    pub token: Option<String>,
    pub rate_per_minute: u32,
}

/// Worker pool size per routing key.
#[derive(Debug, Clone, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WorkersConfig {
    pub repo_mine: usize,
    pub sbom_generate: usize,
    pub components_analyze: usize,
    pub feeds_sync: usize,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DaemonConfig {
    pub interval_secs: u64,
    pub liveness_addr: String,
}

impl Default for Config {
    fn default() -> Self {
        Config {
            data_dir: PathBuf::from(".depwatch"),
            store: None,
            output_dir: None,
            max_retries: super::broker::DEFAULT_MAX_RETRIES,
            feeds: FeedsConfig::default(),
            matcher: MatcherConfig::default(),
            sbom: SbomConfig::default(),
            github: GithubConfig::default(),
            workers: WorkersConfig::default(),
            daemon: DaemonConfig::default(),
        }
    }
}

impl Default for FeedsConfig {
    fn default() -> Self {
        FeedsConfig {
            nvd: None,
            epss: None,
            first_year: crate::feeds::FIRST_FEED_YEAR,
            last_year: None,
            aliases: None,
        }
    }
}

impl Default for MatcherConfig {
    fn default() -> Self {
        MatcherConfig {
            mode: MatchMode::Offline,
            remote_url: None,
            credentials: None,
            batch: crate::matcher::DEFAULT_BATCH,
            chunk: crate::matcher::DEFAULT_CHUNK,
            rate_per_minute: 60,
            burst: 1,
            cache_ttl_hours: 24,
            timeout_secs: 30,
            max_retries: 3,
        }
    }
}

impl Default for SbomConfig {
    fn default() -> Self {
        SbomConfig {
            shared_dir: None,
            timeout_secs: crate::genmachine::DEFAULT_TIMEOUT.as_secs(),
            use_go_tool: true,
            adapters: BTreeMap::new(),
        }
    }
}

impl Default for GithubConfig {
    fn default() -> Self {
        GithubConfig {
            api: "https://api.github.com".into(),
            token: None,
            rate_per_minute: 60,
        }
    }
}

impl Default for WorkersConfig {
    fn default() -> Self {
        WorkersConfig {
            repo_mine: 1,
            sbom_generate: 2,
            components_analyze: 2,
            feeds_sync: 1,
        }
    }
}

impl Default for DaemonConfig {
    fn default() -> Self {
        DaemonConfig {
            interval_secs: 3600,
            liveness_addr: "127.0.0.1:8787".into(),
        }
    }
}

#[derive(Clone, Copy)]
enum Kind {
    Str,
    Int,
    Bool,
}

const OVERRIDES: &[(&str, Kind)] = &[
    ("data_dir", Kind::Str),
    ("store", Kind::Str),
    ("output_dir", Kind::Str),
    ("max_retries", Kind::Int),
    ("feeds.nvd", Kind::Str),
    ("feeds.epss", Kind::Str),
    ("feeds.first_year", Kind::Int),
    ("feeds.last_year", Kind::Int),
    ("feeds.aliases", Kind::Str),
    ("matcher.mode", Kind::Str),
    ("matcher.remote_url", Kind::Str),
    ("matcher.credentials", Kind::Str),
    ("matcher.batch", Kind::Int),
    ("matcher.chunk", Kind::Int),
    ("matcher.rate_per_minute", Kind::Int),
    ("matcher.burst", Kind::Int),
    ("matcher.cache_ttl_hours", Kind::Int),
    ("matcher.timeout_secs", Kind::Int),
    ("matcher.max_retries", Kind::Int),
    ("sbom.shared_dir", Kind::Str),
    ("sbom.timeout_secs", Kind::Int),
    ("sbom.use_go_tool", Kind::Bool),
    ("github.api", Kind::Str),
    ("github.token", Kind::Str),
    ("github.rate_per_minute", Kind::Int),
    ("workers.repo_mine", Kind::Int),
    ("workers.sbom_generate", Kind::Int),
    ("workers.components_analyze", Kind::Int),
    ("workers.feeds_sync", Kind::Int),
    ("daemon.interval_secs", Kind::Int),
    ("daemon.liveness_addr", Kind::Str),
];

pub fn env_var_name(key: &str) -> String {
    format!("DEPWATCH_{}", key.replace('.', "_").to_ascii_uppercase())
}

fn apply_overrides(table: &mut toml::Table, env: &dyn Fn(&str) -> Option<String>) -> Result<(), ConfigError> {
    for (key, kind) in OVERRIDES {
        let var = env_var_name(key);
        let Some(raw) = env(&var) else { continue };
        let bad = |message: String| ConfigError::Env {
            var: var.clone(),
            message,
        };
        let value = match kind {
            Kind::Str => toml::Value::String(raw),
            Kind::Int => toml::Value::Integer(raw.trim().parse().map_err(|e| bad(format!("not an integer: {e}")))?),
            Kind::Bool => toml::Value::Boolean(raw.trim().parse().map_err(|e| bad(format!("not a boolean: {e}")))?),
        };
        let mut slot = &mut *table;
        let mut parts: Vec<&str> = key.split('.').collect();
        let leaf = parts.pop().expect("non-empty key");
        for p in parts {
            let entry = slot
                .entry(p.to_string())
                .or_insert_with(|| toml::Value::Table(toml::Table::new()));
            slot = entry
                .as_table_mut()
                .ok_or_else(|| bad(format!("config key {p} is not a table")))?;
        }
        slot.insert(leaf.to_string(), value);
    }
    Ok(())
}

impl Config {
    /// Parses `text` (TOML) and applies overrides looked up through `env`.
    pub fn from_toml(text: &str, origin: &str, env: &dyn Fn(&str) -> Option<String>) -> Result<Config, ConfigError> {
        let mut table: toml::Table = toml::from_str(text).map_err(|e| ConfigError::Parse {
            path: origin.into(),
            message: e.to_string(),
        })?;
        apply_overrides(&mut table, env)?;
        let cfg: Config = table.try_into().map_err(|e: toml::de::Error| ConfigError::Parse {
            path: origin.into(),
            message: e.to_string(),
        })?;
        cfg.validate(origin)?;
        Ok(cfg)
    }

    /// Reads `path` when given (it must exist), otherwise `./depwatch.toml`
    /// when present, otherwise starts from defaults. Process environment
    /// overrides apply in every case.
    pub fn load(path: Option<&Path>) -> Result<Config, ConfigError> {
        let env = |k: &str| std::env::var(k).ok();
        let (text, origin) = match path {
            Some(p) => (
                std::fs::read_to_string(p).map_err(|e| ConfigError::Read {
                    path: p.into(),
                    source: e,
                })?,
                p.display().to_string(),
            ),
            None => match std::fs::read_to_string("depwatch.toml") {
                Ok(t) => (t, "depwatch.toml".to_string()),
                Err(_) => (String::new(), "<defaults>".to_string()),
            },
        };
        Config::from_toml(&text, &origin, &env)
    }

    fn validate(&self, origin: &str) -> Result<(), ConfigError> {
        let bad = |message: &str| {
            Err(ConfigError::Parse {
                path: origin.into(),
                message: message.into(),
            })
        };
        if self.matcher.chunk == 0 || self.matcher.batch == 0 {
            return bad("matcher.batch and matcher.chunk must be positive");
        }
        if self.matcher.rate_per_minute == 0 || self.github.rate_per_minute == 0 {
            return bad("rate limits must be positive");
        }
        if self.matcher.mode == MatchMode::Remote && self.matcher.remote_url.is_none() {
            return bad("matcher.mode = \"remote\" needs matcher.remote_url");
        }
        if self.max_retries == 0 {
            return bad("max_retries must be at least 1");
        }
        Ok(())
    }

    pub fn store_path(&self) -> PathBuf {
        self.store.clone().unwrap_or_else(|| self.data_dir.join("depwatch.db"))
    }

    pub fn output_path(&self) -> PathBuf {
        self.output_dir.clone().unwrap_or_else(|| self.data_dir.join("reports"))
    }

    pub fn shared_sbom_dir(&self) -> PathBuf {
        self.sbom.shared_dir.clone().unwrap_or_else(|| self.data_dir.join("sboms"))
    }

    pub fn clones_dir(&self) -> PathBuf {
        self.data_dir.join("clones")
    }

    pub fn worktrees_dir(&self) -> PathBuf {
        self.data_dir.join("worktrees")
    }

    pub fn sbom_timeout(&self) -> Duration {
        Duration::from_secs(self.sbom.timeout_secs)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn no_env(_: &str) -> Option<String> {
        None
    }

    #[test]
    fn defaults_from_empty_file() {
        let c = Config::from_toml("", "t", &no_env).unwrap();
        assert_eq!(c.max_retries, 3);
        assert_eq!((c.matcher.batch, c.matcher.chunk), (500, 25));
        assert_eq!(c.matcher.mode, MatchMode::Offline);
        assert_eq!(c.store_path(), PathBuf::from(".depwatch/depwatch.db"));
        assert_eq!(c.sbom.timeout_secs, 300);
    }

    #[test]
    fn file_values_and_env_overrides() {
        let text = r#"
            data_dir = "/var/lib/dw"
            [matcher]
            chunk = 10
            [workers]
            sbom_generate = 4
            [sbom.adapters.java]
            command = "gen {worktree} {out}"
            manifest = "pom.xml"
        "#;
        let env = |k: &str| match k {
            "DEPWATCH_MATCHER_CHUNK" => Some("20".to_string()),
            "DEPWATCH_DAEMON_INTERVAL_SECS" => Some("60".to_string()),
            "DEPWATCH_SBOM_USE_GO_TOOL" => Some("false".to_string()),
            _ => None,
        };
        let c = Config::from_toml(text, "t", &env).unwrap();
        assert_eq!(c.matcher.chunk, 20);
        assert_eq!(c.daemon.interval_secs, 60);
        assert!(!c.sbom.use_go_tool);
        assert_eq!(c.workers.sbom_generate, 4);
        assert_eq!(c.sbom.adapters["java"].manifest.as_deref(), Some("pom.xml"));
        assert_eq!(c.output_path(), PathBuf::from("/var/lib/dw/reports"));
    }

    #[test]
    fn bad_values_are_reported() {
        let env = |k: &str| (k == "DEPWATCH_MATCHER_BATCH").then(|| "many".to_string());
        assert!(matches!(Config::from_toml("", "t", &env), Err(ConfigError::Env { .. })));
        assert!(Config::from_toml("bogus = 1", "t", &no_env).is_err());
        assert!(Config::from_toml("[matcher]\nmode = \"remote\"", "t", &no_env).is_err());
    }

    #[test]
    fn every_override_key_exists_in_the_schema() {
        // Setting each override to a plausible value must still deserialize.
        let env = |k: &str| {
            let key = OVERRIDES.iter().find(|(key, _)| env_var_name(key) == k)?;
            Some(match key.1 {
                Kind::Str if key.0 == "matcher.mode" => "offline".into(),
                Kind::Str => "x".into(),
                Kind::Int => "5".into(),
                Kind::Bool => "true".into(),
            })
        };
        Config::from_toml("", "t", &env).unwrap();
    }
}
