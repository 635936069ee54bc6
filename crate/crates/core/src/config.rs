//! Flat `key = value` configuration.
//!
//! ```text
//! # comment
//! global_limit = 8
//! staging_dir = /data/stage
//!
//! [node dn1]          # sections are only used by fleet configs
//! bandwidth = 1000000
//! ```
//!
//! Run config keys: `global_limit`, `per_node_limit`, `quota_bytes`,
//! `quota_override`, `ewma_alpha`, `unknown_rate_prior`, `staging_dir`,
//! `credential_lifetime_s`, `refresh_margin_s`, `max_checksum_retries`,
//! `max_transport_retries`, `backoff_base_ms`, `verify_mode`. Each can be
//! overridden by an environment variable `STAGE_<KEY>` in upper case.

use std::path::PathBuf;

use crate::credential::CredentialPolicy;
use crate::engine::{RetryPolicy, VerifyMode};
use crate::scheduler::SchedulerConfig;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("config line {line}: {reason}")]
pub struct ConfigError {
    /// 0 for environment overrides and whole-file checks.
    pub line: usize,
    pub reason: String,
}

impl ConfigError {
    pub fn new(line: usize, reason: impl Into<String>) -> Self {
        Self {
            line,
            reason: reason.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Setting {
    pub line: usize,
    pub key: String,
    pub value: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Section {
    /// `None` for settings before the first section header.
    pub name: Option<String>,
    pub kind: Option<String>,
    pub settings: Vec<Setting>,
}

/// Splits a config file into the top-level block and `[kind name]`
/// sections. Repeated keys are kept in order.
pub fn parse_sections(text: &str) -> Result<Vec<Section>, ConfigError> {
    let mut sections = vec![Section::default()];
    for (i, raw) in text.lines().enumerate() {
        let line_no = i + 1;
        let line = match raw.find('#') {
            Some(p) => &raw[..p],
            None => raw,
        }
        .trim();
        if line.is_empty() {
            continue;
        }
        if let Some(inner) = line.strip_prefix('[') {
            let inner = inner
                .strip_suffix(']')
                .ok_or_else(|| ConfigError::new(line_no, "unterminated section header"))?;
            let mut parts = inner.split_whitespace();
            let (kind, name) = match (parts.next(), parts.next(), parts.next()) {
                (Some(k), Some(n), None) => (k, n),
                _ => return Err(ConfigError::new(line_no, "section header must be `[kind name]`")),
            };
            sections.push(Section {
                name: Some(name.to_string()),
                kind: Some(kind.to_string()),
                settings: Vec::new(),
            });
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| ConfigError::new(line_no, "expected `key = value`"))?;
        let key = key.trim();
        if key.is_empty() || !key.bytes().all(|b| b.is_ascii_alphanumeric() || b == b'_') {
            return Err(ConfigError::new(line_no, format!("bad key `{key}`")));
        }
        sections
            .last_mut()
            .expect("at least one section")
            .settings
            .push(Setting {
                line: line_no,
                key: key.to_string(),
                value: value.trim().to_string(),
            });
    }
    Ok(sections)
}

pub fn parse_bool(s: &str) -> Option<bool> {
    match s.to_ascii_lowercase().as_str() {
        "true" | "yes" | "1" | "on" => Some(true),
        "false" | "no" | "0" | "off" => Some(false),
        _ => None,
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct StageConfig {
    pub scheduler: SchedulerConfig,
    pub staging_dir: Option<PathBuf>,
    pub credential: CredentialPolicy,
    pub retry: RetryPolicy,
    pub verify_mode: VerifyMode,
}

pub const KEYS: [&str; 13] = [
    "global_limit",
    "per_node_limit",
    "quota_bytes",
    "quota_override",
    "ewma_alpha",
    "unknown_rate_prior",
    "staging_dir",
    "credential_lifetime_s",
    "refresh_margin_s",
    "max_checksum_retries",
    "max_transport_retries",
    "backoff_base_ms",
    "verify_mode",
];

struct Builder {
    cfg: StageConfig,
    lifetime_s: i64,
    margin_s: i64,
}

fn num<T: std::str::FromStr>(line: usize, key: &str, v: &str) -> Result<T, ConfigError> {
    v.parse()
        .map_err(|_| ConfigError::new(line, format!("`{key}`: cannot parse `{v}`")))
}

impl Builder {
    fn set(&mut self, line: usize, key: &str, v: &str) -> Result<(), ConfigError> {
        let c = &mut self.cfg;
        match key {
            "global_limit" => c.scheduler.global_limit = num(line, key, v)?,
            "per_node_limit" => c.scheduler.per_node_limit = num(line, key, v)?,
            "quota_bytes" => {
                c.scheduler.quota_bytes = match v {
                    "" | "none" => None,
                    _ => Some(num(line, key, v)?),
                }
            }
            "quota_override" => {
                c.scheduler.quota_override = parse_bool(v)
                    .ok_or_else(|| ConfigError::new(line, format!("`{key}`: not a boolean")))?
            }
            "ewma_alpha" => c.scheduler.ewma_alpha = num(line, key, v)?,
            "unknown_rate_prior" => c.scheduler.unknown_rate_prior = num(line, key, v)?,
            "staging_dir" => c.staging_dir = Some(PathBuf::from(v)),
            "credential_lifetime_s" => self.lifetime_s = num(line, key, v)?,
            "refresh_margin_s" => self.margin_s = num(line, key, v)?,
            "max_checksum_retries" => c.retry.max_checksum_retries = num(line, key, v)?,
            "max_transport_retries" => c.retry.max_transport_retries = num(line, key, v)?,
            "backoff_base_ms" => c.retry.backoff_base_ms = num(line, key, v)?,
            "verify_mode" => {
                c.verify_mode = v.parse().map_err(|e: String| ConfigError::new(line, e))?
            }
            other => return Err(ConfigError::new(line, format!("unknown key `{other}`"))),
        }
        Ok(())
    }
}

impl StageConfig {
    /// Parses `text`, then applies `STAGE_*` overrides from `env`.
    pub fn load(
        text: &str,
        env: impl IntoIterator<Item = (String, String)>,
    ) -> Result<Self, ConfigError> {
        let defaults = StageConfig::default();
        let mut b = Builder {
            lifetime_s: defaults.credential.lifetime_s(),
            margin_s: defaults.credential.refresh_margin_s(),
            cfg: defaults,
        };
        for section in parse_sections(text)? {
            if let Some(name) = &section.name {
                let line = section.settings.first().map_or(0, |s| s.line);
                return Err(ConfigError::new(
                    line,
                    format!("unexpected section `{name}` in run config"),
                ));
            }
            for s in &section.settings {
                b.set(s.line, &s.key, &s.value)?;
            }
        }
        let mut overrides: Vec<(String, String)> = env
            .into_iter()
            .filter_map(|(k, v)| {
                let key = k.strip_prefix("STAGE_")?.to_ascii_lowercase();
                KEYS.contains(&key.as_str()).then_some((key, v))
            })
            .collect();
        overrides.sort();
        for (k, v) in overrides {
            b.set(0, &k, v.trim())?;
        }

        b.cfg.credential = CredentialPolicy::new(b.lifetime_s, b.margin_s)
            .map_err(|e| ConfigError::new(0, e.to_string()))?;
        b.cfg
            .scheduler
            .validate()
            .map_err(|e| ConfigError::new(0, e))?;
        let r = &b.cfg.retry;
        if r.backoff_base_ms == 0 {
            return Err(ConfigError::new(0, "backoff_base_ms must be positive"));
        }
        Ok(b.cfg)
    }
}
