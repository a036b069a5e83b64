use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use ipr_backends::EndpointConfig;
use ipr_core::reward::RewardConfig;
use ipr_core::train::GrpoConfig;
use ipr_core::LoopConfig;

use crate::error::CliError;

/// The single configuration document shared by every subcommand.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AppConfig {
    pub reward: RewardConfig,
    #[serde(rename = "loop")]
    pub loop_: LoopConfig,
    pub endpoints: BTreeMap<String, EndpointConfig>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub world_path: Option<PathBuf>,
    pub grpo: GrpoConfig,
}

/// Unsigned integer fields whose negative values should read as validation
/// failures rather than type errors.
const UNSIGNED_FIELDS: &[(&str, &str)] = &[
    ("loop", "t_max"),
    ("loop", "repeats"),
    ("loop", "seed"),
    ("grpo", "group_size"),
    ("grpo", "steps"),
    ("grpo", "states_per_step"),
    ("grpo", "inner_epochs"),
];

/// Loads, validates and resolves a config file. Relative `world_path`s are
/// resolved against the file's directory.
pub fn load_config(path: &Path) -> Result<AppConfig, CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Validation(format!("{}: {e}", path.display())))?;
    let base = path.parent().unwrap_or(Path::new("."));
    parse_config(&text, &path.display().to_string(), base)
}

pub fn parse_config(text: &str, origin: &str, base: &Path) -> Result<AppConfig, CliError> {
    let parse_err = |e: serde_json::Error| CliError::Parse {
        origin: origin.to_string(),
        line: e.line(),
        column: e.column(),
        message: e.to_string(),
    };
    let raw: Value = serde_json::from_str(text).map_err(parse_err)?;
    precheck(&raw)?;
    let mut cfg: AppConfig = serde_json::from_str(text).map_err(parse_err)?;
    if let Some(p) = &cfg.world_path {
        if p.is_relative() {
            cfg.world_path = Some(base.join(p));
        }
    }
    validate(&cfg)?;
    Ok(cfg)
}

fn precheck(raw: &Value) -> Result<(), CliError> {
    for (section, field) in UNSIGNED_FIELDS {
        if let Some(v) = raw.get(section).and_then(|s| s.get(field)) {
            if v.as_i64().is_some_and(|n| n < 0) || v.as_f64().is_some_and(|x| x < 0.0) {
                return Err(CliError::invalid(
                    format!("{section}.{field}"),
                    format!("must be non-negative, got {v}"),
                ));
            }
        }
    }
    if let Some(eps) = raw.get("endpoints").and_then(Value::as_object) {
        for (name, ep) in eps {
            for secret in ["api_key", "apiKey", "token", "secret"] {
                if ep.get(secret).is_some() {
                    return Err(CliError::invalid(
                        format!("endpoints.{name}.{secret}"),
                        "secrets are not allowed in the config file; name an environment \
                         variable with api_key_env instead",
                    ));
                }
            }
        }
    }
    Ok(())
}

pub fn validate(cfg: &AppConfig) -> Result<(), CliError> {
    for (name, v) in [("reward.alpha", cfg.reward.alpha), ("reward.beta", cfg.reward.beta)] {
        if !v.is_finite() || v < 0.0 {
            return Err(CliError::invalid(name, format!("must be finite and >= 0, got {v}")));
        }
    }
    if cfg.loop_.t_max < 1 {
        return Err(CliError::invalid("loop.t_max", "must be >= 1"));
    }
    if cfg.loop_.repeats < 1 {
        return Err(CliError::invalid("loop.repeats", "must be >= 1"));
    }
    let g = &cfg.grpo;
    let checks: [(&str, bool, &str); 6] = [
        ("grpo.group_size", g.group_size >= 2, "must be >= 2"),
        ("grpo.clip_epsilon", g.clip_epsilon.is_finite() && g.clip_epsilon > 0.0, "must be > 0"),
        ("grpo.kl_coef", g.kl_coef.is_finite() && g.kl_coef >= 0.0, "must be >= 0"),
        ("grpo.learning_rate", g.learning_rate.is_finite() && g.learning_rate > 0.0, "must be > 0"),
        ("grpo.states_per_step", g.states_per_step >= 1, "must be >= 1"),
        ("grpo.inner_epochs", g.inner_epochs >= 1, "must be >= 1"),
    ];
    for (field, ok, msg) in checks {
        if !ok {
            return Err(CliError::invalid(field, msg));
        }
    }
    for (name, ep) in &cfg.endpoints {
        ep.validate()
            .map_err(|e| CliError::invalid(format!("endpoints.{name}"), e.to_string()))?;
    }
    if let Some(p) = &cfg.world_path {
        if !p.is_file() {
            return Err(CliError::invalid(
                "world_path",
                format!("{} does not exist", p.display()),
            ));
        }
    }
    Ok(())
}

impl AppConfig {
    pub fn endpoint(&self, name: &str) -> Result<&EndpointConfig, CliError> {
        self.endpoints
            .get(name)
            .ok_or_else(|| CliError::invalid(format!("endpoints.{name}"), "not configured"))
    }
}
