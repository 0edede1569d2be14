use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::environments::{
    coordination_bandit, make_congestion, make_safe_distancing, make_test_game, CongestionParams,
    SafeDistancingParams, TestGameSpec,
};
use crate::error::{Error, Result};
use crate::game::ResponseMap;
use crate::learners::{AlgoConfig, DEFAULT_WINDOW};

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CoordinationParams {
    #[serde(default)]
    pub omega_r: f64,
}

/// Environment block: a name plus that environment's parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "name", rename_all = "snake_case")]
pub enum EnvConfig {
    Congestion(CongestionParams),
    #[serde(alias = "safe-distancing")]
    SafeDistancing(SafeDistancingParams),
    #[serde(alias = "test-game")]
    TestGame(TestGameSpec),
    Coordination(CoordinationParams),
}

impl EnvConfig {
    pub fn name(&self) -> &'static str {
        match self {
            EnvConfig::Congestion(_) => "congestion",
            EnvConfig::SafeDistancing(_) => "safe_distancing",
            EnvConfig::TestGame(_) => "test_game",
            EnvConfig::Coordination(_) => "coordination",
        }
    }

    pub fn build(&self) -> Result<ResponseMap> {
        match self {
            EnvConfig::Congestion(p) => make_congestion(*p),
            EnvConfig::SafeDistancing(p) => make_safe_distancing(*p),
            EnvConfig::TestGame(spec) => make_test_game(spec),
            EnvConfig::Coordination(p) => coordination_bandit(p.omega_r),
        }
    }

    /// Replication count used when the config lists no seeds.
    pub fn default_seed_count(&self) -> u64 {
        match self {
            EnvConfig::SafeDistancing(_) => 10,
            _ => 5,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            EnvConfig::Congestion(p) => p.validate(),
            EnvConfig::SafeDistancing(p) => p.validate(),
            EnvConfig::TestGame(spec) => spec.validate(),
            EnvConfig::Coordination(p) if !(p.omega_r >= 0.0 && p.omega_r.is_finite()) => {
                Err(Error::Config(format!("omega_r must be nonnegative, got {}", p.omega_r)))
            }
            EnvConfig::Coordination(_) => Ok(()),
        }
    }
}

fn default_pairs() -> usize {
    50
}
fn default_resolution() -> f64 {
    0.05
}
fn default_epsilon() -> f64 {
    0.05
}
fn default_fd_step() -> f64 {
    1e-5
}

/// Settings for the `verify` sweeps.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VerifyOptions {
    #[serde(default = "default_pairs")]
    pub pairs: usize,
    #[serde(default = "default_pairs")]
    pub triples: usize,
    #[serde(default = "default_resolution")]
    pub resolution: f64,
    #[serde(default = "default_epsilon")]
    pub epsilon: f64,
    #[serde(default = "default_fd_step")]
    pub fd_step: f64,
    #[serde(default)]
    pub seed: u64,
}

impl Default for VerifyOptions {
    fn default() -> Self {
        serde_json::from_value(Value::Object(Map::new())).expect("all fields defaulted")
    }
}

/// A fully defaulted and validated experiment description.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub env: EnvConfig,
    pub alg: AlgoConfig,
    pub seeds: Vec<u64>,
    pub output_dir: PathBuf,
    pub window: usize,
    pub record_every: usize,
    pub verify: VerifyOptions,
}

const TOP_LEVEL_KEYS: [&str; 7] = ["env", "alg", "seeds", "output_dir", "window", "record_every", "verify"];

fn shorthand(value: Value, key: &str) -> Value {
    match value {
        Value::String(s) => {
            let mut m = Map::new();
            m.insert(key.to_string(), Value::String(s));
            Value::Object(m)
        }
        other => other,
    }
}

/// Apply `path=value` overrides to a raw config document. `path` is dotted; `value`
/// is parsed as JSON when possible and taken as a string otherwise.
pub fn apply_overrides(doc: &mut Value, overrides: &[String]) -> Result<()> {
    for item in overrides {
        let (path, raw) = item
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override '{item}' is not key=value")))?;
        let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
        let keys: Vec<&str> = path.split('.').collect();
        if keys.iter().any(|k| k.is_empty()) {
            return Err(Error::Config(format!("override path '{path}' has an empty segment")));
        }
        let mut cursor = &mut *doc;
        for (depth, key) in keys.iter().enumerate() {
            if depth == 0 {
                if let Some(slot) = cursor.get_mut(*key) {
                    let tag = if *key == "env" { "name" } else { "algorithm" };
                    if matches!(*key, "env" | "alg") && keys.len() > 1 {
                        *slot = shorthand(slot.take(), tag);
                    }
                }
            }
            let obj = cursor
                .as_object_mut()
                .ok_or_else(|| Error::Config(format!("override '{path}' descends into a non-object")))?;
            if depth + 1 == keys.len() {
                obj.insert(key.to_string(), value.clone());
                break;
            }
            cursor = obj.entry(key.to_string()).or_insert_with(|| Value::Object(Map::new()));
        }
    }
    Ok(())
}

fn describe_json_error(e: &serde_json::Error) -> String {
    format!("{e} (line {}, column {})", e.line(), e.column())
}

impl ExperimentConfig {
    /// Parse a config document, fill defaults and validate every invariant.
    pub fn from_value(mut doc: Value) -> Result<Self> {
        let obj = doc
            .as_object_mut()
            .ok_or_else(|| Error::Parse("config must be a JSON object".into()))?;
        if let Some(key) = obj.keys().find(|k| !TOP_LEVEL_KEYS.contains(&k.as_str())) {
            return Err(Error::Config(format!("unknown config key '{key}'")));
        }
        let env_raw = shorthand(
            obj.remove("env").ok_or_else(|| Error::Config("missing 'env' block".into()))?,
            "name",
        );
        let alg_raw = shorthand(
            obj.remove("alg").ok_or_else(|| Error::Config("missing 'alg' block".into()))?,
            "algorithm",
        );
        if alg_raw.get("seed").is_some() {
            return Err(Error::Config("set replication seeds with the top-level 'seeds' list".into()));
        }
        let env: EnvConfig =
            serde_json::from_value(env_raw).map_err(|e| Error::Config(format!("env block: {e}")))?;
        let alg: AlgoConfig =
            serde_json::from_value(alg_raw).map_err(|e| Error::Config(format!("alg block: {e}")))?;
        let seeds: Vec<u64> = match obj.remove("seeds") {
            Some(v) => serde_json::from_value(v).map_err(|e| Error::Config(format!("seeds: {e}")))?,
            None => (0..env.default_seed_count()).collect(),
        };
        let output_dir = match obj.remove("output_dir") {
            Some(v) => serde_json::from_value(v).map_err(|e| Error::Config(format!("output_dir: {e}")))?,
            None => PathBuf::from("out"),
        };
        let take_usize = |obj: &mut Map<String, Value>, key: &str, default: usize| -> Result<usize> {
            match obj.remove(key) {
                Some(v) => serde_json::from_value(v).map_err(|e| Error::Config(format!("{key}: {e}"))),
                None => Ok(default),
            }
        };
        let window = take_usize(obj, "window", DEFAULT_WINDOW)?;
        let record_every = take_usize(obj, "record_every", 1)?;
        let verify = match obj.remove("verify") {
            Some(v) => serde_json::from_value(v).map_err(|e| Error::Config(format!("verify block: {e}")))?,
            None => VerifyOptions::default(),
        };
        let cfg = Self {
            env,
            alg,
            seeds,
            output_dir,
            window,
            record_every,
            verify,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn parse_str(text: &str, overrides: &[String]) -> Result<Self> {
        let mut doc: Value = serde_json::from_str(text).map_err(|e| Error::Parse(describe_json_error(&e)))?;
        apply_overrides(&mut doc, overrides)?;
        Self::from_value(doc)
    }

    pub fn parse_file(path: &Path, overrides: &[String]) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::parse_str(&text, overrides).map_err(|e| match e {
            Error::Parse(m) => Error::Parse(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn validate(&self) -> Result<()> {
        self.env.validate()?;
        self.alg.validate()?;
        if self.seeds.is_empty() {
            return Err(Error::Config("seeds must not be empty".into()));
        }
        let mut sorted = self.seeds.clone();
        sorted.sort_unstable();
        if let Some(w) = sorted.windows(2).find(|w| w[0] == w[1]) {
            return Err(Error::Config(format!("seeds must be distinct, {} repeats", w[0])));
        }
        if self.window < 1 {
            return Err(Error::Config("window must be at least 1".into()));
        }
        if self.record_every < 1 {
            return Err(Error::Config("record_every must be at least 1".into()));
        }
        Ok(())
    }
}
