use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use xground_core::dataset::BuildConfig;
use xground_core::eval::EvalOptions;
use xground_core::grpo::GrpoConfig;
use xground_core::mtw::MtwConfig;
use xground_core::reward::RewardConfig;
use xground_core::sim::{EnvConfig, SimConfig};
use xground_core::uav::{EndpointConfig, FilterOptions, RetryPolicy};

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Paths {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub manifest: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub predictions: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub weights: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub traces: Option<PathBuf>,
    /// Prompt template set as JSON.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub templates: Option<PathBuf>,
}

/// Simulator knobs; reward and GRPO settings come from their own sections.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimSettings {
    pub group_size: usize,
    pub temperature: f64,
    pub learning_rate: f64,
    pub updates_per_step: usize,
    pub unknown_fraction: f64,
    pub policy_format: bool,
    pub env: EnvConfig,
}

impl Default for SimSettings {
    fn default() -> Self {
        let d = SimConfig::default();
        Self {
            group_size: d.group_size,
            temperature: d.temperature,
            learning_rate: d.learning_rate,
            updates_per_step: d.updates_per_step,
            unknown_fraction: d.unknown_fraction,
            policy_format: d.policy_format,
            env: d.env,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AppConfig {
    pub log_level: String,
    pub jobs: usize,
    /// Seed for every randomized step; there is no clock-based fallback.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    pub paths: Paths,
    pub eval: EvalOptions,
    pub reward: RewardConfig,
    pub grpo: GrpoConfig,
    pub build: BuildConfig,
    pub mtw: MtwConfig,
    pub endpoint: EndpointConfig,
    pub retry: RetryPolicy,
    pub filter: FilterOptions,
    pub sim: SimSettings,
}

impl Default for AppConfig {
    fn default() -> Self {
        Self {
            log_level: "info".into(),
            jobs: 1,
            seed: None,
            paths: Paths::default(),
            eval: EvalOptions::default(),
            reward: RewardConfig::default(),
            grpo: GrpoConfig::default(),
            build: BuildConfig::default(),
            mtw: MtwConfig::default(),
            endpoint: EndpointConfig::default(),
            retry: RetryPolicy::default(),
            filter: FilterOptions::default(),
            sim: SimSettings::default(),
        }
    }
}

impl AppConfig {
    pub fn from_toml(text: &str) -> Result<Self, String> {
        let cfg: AppConfig = toml::from_str(text).map_err(|e| e.to_string())?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, String> {
        let text = std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
        Self::from_toml(&text).map_err(|e| format!("{}: {e}", path.display()))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config is representable as TOML")
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.jobs == 0 {
            return Err("jobs must be >= 1".into());
        }
        self.grpo.validate().map_err(|e| e.to_string())?;
        self.build.validate().map_err(|e| e.to_string())?;
        self.sim_config().validate().map_err(|e| e.to_string())?;
        if self.reward.delta.is_nan() || self.reward.delta <= 0.0 {
            return Err("reward.delta must be > 0".into());
        }
        Ok(())
    }

    pub fn sim_config(&self) -> SimConfig {
        let s = &self.sim;
        SimConfig {
            group_size: s.group_size,
            temperature: s.temperature,
            learning_rate: s.learning_rate,
            updates_per_step: s.updates_per_step,
            grpo: self.grpo,
            reward: self.reward,
            reward_source: Default::default(),
            unknown_fraction: s.unknown_fraction,
            policy_format: s.policy_format,
            env: s.env.clone(),
        }
    }
}
