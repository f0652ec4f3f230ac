//! Experiment configuration files.
//!
//! A config is a JSON object. Only `env` is required; everything else falls
//! back to the selected preset. `trpo` and `dnc` are partial objects laid
//! over the preset's values, and unknown keys at any level are rejected.
//!
//! ```json
//! {
//!   "preset": "desk",
//!   "env": "bimodal",
//!   "variant": ["dnc", "trpo_monolithic"],
//!   "seeds": [0, 1, 2, 3, 4],
//!   "output_dir": "runs",
//!   "dnc": { "n_contexts": 2, "alpha": 0.5 },
//!   "trpo": { "max_kl": 0.02 },
//!   "sweep": { "alphas": [0.1, 1.0] }
//! }
//! ```

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::dnc::{DncConfig, RunOptions, Variant};
use crate::envs::make_env;
use crate::error::{DncError, Result};
use crate::trpo::TrpoConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    /// Small networks and batches for single-machine runs.
    #[default]
    Desk,
    /// Batch sizes, iteration counts and network widths at the scale of
    /// large simulated-robotics benchmarks.
    Large,
}

impl Preset {
    pub fn dnc(self) -> DncConfig {
        match self {
            Preset::Desk => DncConfig::default(),
            Preset::Large => DncConfig {
                per_context_batch: 30_000,
                iterations: 1000,
                distill_period: 100,
                policy_hidden: vec![150, 100, 50],
                value_hidden: vec![150, 100, 50],
                ..DncConfig::default()
            },
        }
    }

    pub fn trpo(self) -> TrpoConfig {
        TrpoConfig::default()
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Sweep {
    pub alphas: Vec<f64>,
    pub max_kls: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub preset: Preset,
    pub env_name: String,
    pub variants: Vec<Variant>,
    pub seeds: Vec<u64>,
    pub trpo: TrpoConfig,
    /// Per-run settings; `variant` is replaced by each entry of `variants`.
    pub dnc: DncConfig,
    pub sweep: Option<Sweep>,
    pub output_dir: PathBuf,
    pub eval_cadence: usize,
    pub eval_episodes: usize,
    pub record_wall_time: bool,
}

#[derive(Debug, Deserialize)]
#[serde(untagged)]
enum OneOrMany {
    One(Variant),
    Many(Vec<Variant>),
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConfig {
    preset: Option<Preset>,
    #[serde(alias = "env_name")]
    env: String,
    variant: Option<OneOrMany>,
    seeds: Option<Vec<u64>>,
    trpo: Option<Map<String, Value>>,
    dnc: Option<Map<String, Value>>,
    sweep: Option<Sweep>,
    output_dir: Option<PathBuf>,
    eval_cadence: Option<usize>,
    eval_episodes: Option<usize>,
    record_wall_time: Option<bool>,
}

/// Lays `patch` over the serialized `base`, rejecting keys `base` lacks or
/// that are listed in `forbidden`.
fn overlay<T>(base: &T, patch: Option<Map<String, Value>>, section: &str, forbidden: &[&str]) -> Result<T>
where
    T: Serialize + for<'de> Deserialize<'de>,
{
    let mut value = serde_json::to_value(base)?;
    let obj = value.as_object_mut().expect("config sections serialize as objects");
    for (k, v) in patch.unwrap_or_default() {
        if !obj.contains_key(&k) || forbidden.contains(&k.as_str()) {
            return Err(DncError::Config(format!("unknown key \"{k}\" in \"{section}\"")));
        }
        obj.insert(k, v);
    }
    serde_json::from_value(value).map_err(|e| DncError::Config(format!("in \"{section}\": {e}")))
}

impl ExperimentConfig {
    /// Config for `env` with every default of `preset`.
    pub fn with_defaults(env: &str, preset: Preset) -> Self {
        let dnc = preset.dnc();
        let opts = RunOptions::default();
        Self {
            preset,
            env_name: env.to_string(),
            variants: vec![dnc.variant],
            seeds: vec![0, 1, 2, 3, 4],
            trpo: preset.trpo(),
            dnc,
            sweep: None,
            output_dir: PathBuf::from("runs"),
            eval_cadence: opts.eval_cadence,
            eval_episodes: opts.eval_episodes,
            record_wall_time: opts.record_wall_time,
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let raw: RawConfig = serde_json::from_str(text).map_err(|e| DncError::Config(e.to_string()))?;
        let preset = raw.preset.unwrap_or_default();
        let mut cfg = Self::with_defaults(&raw.env, preset);
        cfg.trpo = overlay(&cfg.trpo, raw.trpo, "trpo", &[])?;
        cfg.dnc = overlay(&cfg.dnc, raw.dnc, "dnc", &["variant"])?;
        if let Some(v) = raw.variant {
            cfg.variants = match v {
                OneOrMany::One(v) => vec![v],
                OneOrMany::Many(v) => v,
            };
        }
        if let Some(s) = raw.seeds {
            cfg.seeds = s;
        }
        cfg.sweep = raw.sweep;
        if let Some(d) = raw.output_dir {
            cfg.output_dir = d;
        }
        if let Some(c) = raw.eval_cadence {
            cfg.eval_cadence = c;
        }
        if let Some(e) = raw.eval_episodes {
            cfg.eval_episodes = e;
        }
        if let Some(w) = raw.record_wall_time {
            cfg.record_wall_time = w;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| DncError::io(path, e))?;
        Self::from_json(&text)
    }

    /// Full JSON form; loading it back yields an identical config.
    pub fn to_json(&self) -> String {
        let mut dnc = serde_json::to_value(&self.dnc).expect("serializable");
        dnc.as_object_mut().expect("object").remove("variant");
        let mut obj = Map::new();
        obj.insert(
            "preset".into(),
            serde_json::to_value(self.preset).expect("serializable"),
        );
        obj.insert("env".into(), Value::from(self.env_name.clone()));
        obj.insert(
            "variant".into(),
            serde_json::to_value(&self.variants).expect("serializable"),
        );
        obj.insert("seeds".into(), serde_json::to_value(&self.seeds).expect("serializable"));
        obj.insert("trpo".into(), serde_json::to_value(&self.trpo).expect("serializable"));
        obj.insert("dnc".into(), dnc);
        if let Some(s) = &self.sweep {
            obj.insert("sweep".into(), serde_json::to_value(s).expect("serializable"));
        }
        obj.insert(
            "output_dir".into(),
            serde_json::to_value(&self.output_dir).expect("serializable"),
        );
        obj.insert("eval_cadence".into(), Value::from(self.eval_cadence));
        obj.insert("eval_episodes".into(), Value::from(self.eval_episodes));
        obj.insert("record_wall_time".into(), Value::from(self.record_wall_time));
        serde_json::to_string_pretty(&Value::Object(obj)).expect("serializable")
    }

    pub fn validate(&self) -> Result<()> {
        make_env(&self.env_name)?;
        if self.seeds.is_empty() {
            return Err(DncError::Config("\"seeds\" must not be empty".into()));
        }
        let mut seen = self.seeds.clone();
        seen.sort_unstable();
        seen.dedup();
        if seen.len() != self.seeds.len() {
            return Err(DncError::Config("\"seeds\" must be distinct".into()));
        }
        if self.variants.is_empty() {
            return Err(DncError::Config("\"variant\" must name at least one variant".into()));
        }
        if self.eval_cadence == 0 {
            return Err(DncError::Config("\"eval_cadence\" must be at least 1".into()));
        }
        if let Some(s) = &self.sweep {
            if s.alphas.iter().any(|a| !(*a >= 0.0 && a.is_finite())) {
                return Err(DncError::Config("\"sweep.alphas\" must be non-negative".into()));
            }
            if s.max_kls.iter().any(|k| !(*k > 0.0 && k.is_finite())) {
                return Err(DncError::Config("\"sweep.max_kls\" must be positive".into()));
            }
        }
        self.trpo.validate()?;
        for &v in &self.variants {
            DncConfig {
                variant: v,
                ..self.dnc.clone()
            }
            .validate()?;
        }
        Ok(())
    }

    pub fn run_options(&self) -> RunOptions {
        RunOptions {
            eval_cadence: self.eval_cadence,
            eval_episodes: self.eval_episodes,
            record_wall_time: self.record_wall_time,
        }
    }

    pub fn alphas(&self) -> Vec<f64> {
        match &self.sweep {
            Some(s) if !s.alphas.is_empty() => s.alphas.clone(),
            _ => vec![self.dnc.alpha],
        }
    }

    pub fn max_kls(&self) -> Vec<f64> {
        match &self.sweep {
            Some(s) if !s.max_kls.is_empty() => s.max_kls.clone(),
            _ => vec![self.trpo.max_kl],
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_config_gets_defaults() {
        let cfg = ExperimentConfig::from_json(r#"{"env": "bimodal", "variant": "dnc"}"#).unwrap();
        let expected = ExperimentConfig::with_defaults("bimodal", Preset::Desk);
        assert_eq!(cfg, expected);
        assert_eq!(cfg.dnc.per_context_batch, 2000);
        assert_eq!(cfg.dnc.iterations, 300);
        assert_eq!(cfg.dnc.distill_period, 25);
        assert_eq!(cfg.dnc.policy_hidden, vec![64, 64]);
    }

    #[test]
    fn unknown_keys_are_named() {
        for text in [
            r#"{"env": "bimodal", "alfa": 1.0}"#,
            r#"{"env": "bimodal", "dnc": {"alfa": 1.0}}"#,
            r#"{"env": "bimodal", "trpo": {"alfa": 1.0}}"#,
        ] {
            let err = ExperimentConfig::from_json(text).unwrap_err().to_string();
            assert!(err.contains("alfa"), "{err}");
        }
        let err = ExperimentConfig::from_json(r#"{"env": "bimodal", "dnc": {"variant": "dnc"}}"#).unwrap_err();
        assert!(err.to_string().contains("variant"));
    }

    #[test]
    fn invariants_are_checked() {
        assert!(ExperimentConfig::from_json(r#"{"env": "ant"}"#).is_err());
        assert!(ExperimentConfig::from_json(r#"{"env": "bimodal", "seeds": []}"#).is_err());
        assert!(ExperimentConfig::from_json(r#"{"env": "bimodal", "seeds": [1, 1]}"#).is_err());
        assert!(ExperimentConfig::from_json(r#"{"env": "bimodal", "dnc": {"alpha": -1}}"#).is_err());
        assert!(ExperimentConfig::from_json(r#"{"env": "bimodal", "variant": "dnx"}"#).is_err());
    }

    #[test]
    fn presets_and_overlays() {
        let cfg = ExperimentConfig::from_json(
            r#"{"env": "point_goal", "preset": "large", "dnc": {"alpha": 0.3}, "variant": ["dnc", "distral"]}"#,
        )
        .unwrap();
        assert_eq!(cfg.dnc.per_context_batch, 30_000);
        assert_eq!(cfg.dnc.policy_hidden, vec![150, 100, 50]);
        assert_eq!(cfg.dnc.alpha, 0.3);
        assert_eq!(cfg.variants, vec![Variant::Dnc, Variant::Distral]);
    }

    #[test]
    fn round_trip() {
        let mut cfg = ExperimentConfig::with_defaults("reach_box", Preset::Desk);
        cfg.sweep = Some(Sweep {
            alphas: vec![0.1, 1.0],
            max_kls: vec![],
        });
        cfg.trpo.max_kl = 0.0025;
        cfg.variants = vec![Variant::TrpoMonolithic, Variant::DncNoDistill];
        assert_eq!(ExperimentConfig::from_json(&cfg.to_json()).unwrap(), cfg);
        let defaults = ExperimentConfig::with_defaults("bimodal", Preset::Large);
        assert_eq!(ExperimentConfig::from_json(&defaults.to_json()).unwrap(), defaults);
    }
}
