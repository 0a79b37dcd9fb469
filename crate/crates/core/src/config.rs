//! Run configuration: defaults, TOML files and dotted `key=value` overrides.

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;
use toml::{Table, Value};

use crate::env::{Family, EXPERT_NOISE};
use crate::policy::{WeightingConfig, WeightingMode, DEFAULT_SAMPLE_STEPS};
use crate::reward::{DEFAULT_BATCH, DEFAULT_THRESHOLD, DEFAULT_TRAIN_STEPS};
use crate::worldmodel::{SampleMode, DEFAULT_STEPS};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ConfigError {
    #[error("unknown config key `{0}`")]
    UnknownKey(String),
    #[error("config key `{key}` expects {expected}, got `{got}`")]
    Type { key: String, expected: String, got: String },
    #[error("malformed override `{0}` (expected key=value)")]
    Override(String),
    #[error("invalid value for `{key}`: {reason}")]
    Invalid { key: String, reason: String },
    #[error("cannot parse config: {0}")]
    Parse(String),
    #[error("io: {0}")]
    Io(String),
}

pub type Result<T> = std::result::Result<T, ConfigError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunSection {
    pub name: String,
    pub seed: u64,
    pub families: Vec<Family>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LoopSection {
    pub iterations: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RealSection {
    /// Real rollouts per family per iteration.
    #[serde(rename = "K")]
    pub k: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DreamSection {
    /// Synthetic rollouts per family per iteration.
    #[serde(rename = "N")]
    pub n: usize,
    pub mode: SampleMode,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PretrainSection {
    /// Frozen expert trajectories per family.
    pub per_family: usize,
    /// World-model training on the pretraining corpus before any online data.
    pub wm_steps: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WarmstartSection {
    pub demos: usize,
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub expert_noise: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WmSection {
    pub lambda: f64,
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub hidden: Vec<usize>,
    pub diffusion_steps: usize,
    pub residual: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PolicySection {
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub hidden: Vec<usize>,
    pub sample_steps: usize,
    pub weighting: WeightingMode,
    pub beta: f64,
    /// Include `D_real+` in the policy update.
    pub use_real: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RewardSection {
    pub alpha: f64,
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub hidden: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalSection {
    pub episodes: usize,
    pub seed_base: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub run: RunSection,
    #[serde(rename = "loop")]
    pub loop_: LoopSection,
    pub real: RealSection,
    pub dream: DreamSection,
    pub pretrain: PretrainSection,
    pub warmstart: WarmstartSection,
    pub wm: WmSection,
    pub policy: PolicySection,
    pub reward: RewardSection,
    pub eval: EvalSection,
}

/// Families the base policy can make progress on; `stack2d` stays
/// available through `run.families`.
pub const DEFAULT_FAMILIES: [Family; 4] = [Family::Book2d, Family::Scoop2d, Family::Wipe2d, Family::Draw2d];

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            run: RunSection {
                name: "default".into(),
                seed: 0,
                families: DEFAULT_FAMILIES.to_vec(),
            },
            loop_: LoopSection { iterations: 2 },
            real: RealSection { k: 50 },
            dream: DreamSection {
                n: 500,
                mode: SampleMode::Deterministic,
            },
            pretrain: PretrainSection {
                per_family: 200,
                wm_steps: 5000,
            },
            warmstart: WarmstartSection {
                demos: 25,
                steps: 15000,
                batch: 64,
                lr: 1e-3,
                expert_noise: EXPERT_NOISE,
            },
            wm: WmSection {
                lambda: 0.5,
                steps: 5000,
                batch: 64,
                lr: 1e-3,
                hidden: vec![256, 256],
                diffusion_steps: DEFAULT_STEPS,
                residual: true,
            },
            policy: PolicySection {
                steps: 1000,
                batch: 64,
                lr: 1e-3,
                hidden: vec![256, 256, 256],
                sample_steps: DEFAULT_SAMPLE_STEPS,
                weighting: WeightingMode::Binary,
                beta: 1.0,
                use_real: true,
            },
            reward: RewardSection {
                alpha: DEFAULT_THRESHOLD,
                steps: DEFAULT_TRAIN_STEPS,
                batch: DEFAULT_BATCH,
                lr: 3e-3,
                hidden: vec![64],
            },
            eval: EvalSection {
                episodes: 200,
                seed_base: 9_000_000,
            },
        }
    }
}

impl RunConfig {
    pub fn weighting(&self) -> WeightingConfig {
        WeightingConfig {
            mode: self.policy.weighting,
            beta: self.policy.beta,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let invalid = |key: &str, reason: &str| ConfigError::Invalid {
            key: key.into(),
            reason: reason.into(),
        };
        if self.run.families.is_empty() {
            return Err(invalid("run.families", "must be nonempty"));
        }
        let mut seen = self.run.families.clone();
        seen.sort();
        seen.dedup();
        if seen.len() != self.run.families.len() {
            return Err(invalid("run.families", "duplicate family"));
        }
        if !(0.0..=1.0).contains(&self.reward.alpha) {
            return Err(invalid("reward.alpha", "must lie in [0, 1]"));
        }
        if !(self.wm.lambda.is_finite() && self.wm.lambda >= 0.0) {
            return Err(invalid("wm.lambda", "must be finite and >= 0"));
        }
        if self.policy.weighting == WeightingMode::Exponential && !(self.policy.beta.is_finite() && self.policy.beta > 0.0) {
            return Err(invalid("policy.beta", "must be finite and > 0"));
        }
        let positive = [
            ("warmstart.batch", self.warmstart.batch),
            ("wm.batch", self.wm.batch),
            ("wm.diffusion_steps", self.wm.diffusion_steps),
            ("policy.batch", self.policy.batch),
            ("policy.sample_steps", self.policy.sample_steps),
            ("reward.batch", self.reward.batch),
        ];
        for (k, v) in positive {
            if v == 0 {
                return Err(invalid(k, "must be positive"));
            }
        }
        for (k, v) in [("warmstart.lr", self.warmstart.lr), ("wm.lr", self.wm.lr), ("policy.lr", self.policy.lr), ("reward.lr", self.reward.lr)] {
            if !(v.is_finite() && v > 0.0) {
                return Err(invalid(k, "must be finite and > 0"));
            }
        }
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        load_with(text, &[])
    }

    /// Defaults, then `path` (if any), then overrides.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let text = match path {
            Some(p) => std::fs::read_to_string(p).map_err(|e| ConfigError::Io(format!("{}: {e}", p.display())))?,
            None => String::new(),
        };
        load_with(&text, overrides)
    }

    pub fn write_snapshot(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_toml()).map_err(|e| ConfigError::Io(format!("{}: {e}", path.display())))
    }
}

fn type_name(v: &Value) -> &'static str {
    match v {
        Value::String(_) => "a string",
        Value::Integer(_) => "an integer",
        Value::Float(_) => "a float",
        Value::Boolean(_) => "a boolean",
        Value::Datetime(_) => "a datetime",
        Value::Array(_) => "an array",
        Value::Table(_) => "a table",
    }
}

/// Coerce `v` to the type of `like`, or report a mismatch.
fn conform(key: &str, like: &Value, v: Value) -> Result<Value> {
    let mismatch = |v: &Value| ConfigError::Type {
        key: key.into(),
        expected: type_name(like).into(),
        got: v.to_string(),
    };
    match (like, v) {
        (Value::Float(_), Value::Integer(i)) => Ok(Value::Float(i as f64)),
        (Value::Array(a), Value::String(s)) => {
            let elem = a.first();
            let items = s
                .split(',')
                .map(str::trim)
                .filter(|x| !x.is_empty())
                .map(|x| match elem {
                    Some(e) if !matches!(e, Value::String(_)) => parse_scalar(x).and_then(|v| conform(key, e, v)).map_err(|_| mismatch(&Value::String(s.clone()))),
                    _ => Ok(Value::String(x.to_string())),
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(Value::Array(items))
        }
        (Value::Table(_), v) => Err(mismatch(&v)),
        (l, v) if std::mem::discriminant(l) == std::mem::discriminant(&v) => Ok(v),
        (_, v) => Err(mismatch(&v)),
    }
}

fn parse_scalar(raw: &str) -> Result<Value> {
    let wrapped = format!("v = {raw}");
    match wrapped.parse::<Table>() {
        Ok(mut t) => Ok(t.remove("v").expect("parsed key")),
        Err(_) => Ok(Value::String(raw.to_string())),
    }
}

/// Walk `src` against `defaults`, rejecting unknown keys and type mismatches.
fn merge(prefix: &str, defaults: &Table, src: Table, out: &mut Table) -> Result<()> {
    for (k, v) in src {
        let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
        let like = defaults.get(&k).ok_or_else(|| ConfigError::UnknownKey(key.clone()))?;
        match (like, v) {
            (Value::Table(dt), Value::Table(st)) => {
                let slot = out.get_mut(&k).and_then(Value::as_table_mut).expect("defaults shape");
                merge(&key, dt, st, slot)?;
            }
            (like, v) => {
                out.insert(k, conform(&key, like, v)?);
            }
        }
    }
    Ok(())
}

fn set_dotted(defaults: &Table, out: &mut Table, key: &str, raw: &str) -> Result<()> {
    let parts: Vec<&str> = key.split('.').collect();
    let (last, path) = parts.split_last().ok_or_else(|| ConfigError::Override(key.into()))?;
    let mut d = defaults;
    let mut o = out;
    for p in path {
        d = d.get(*p).and_then(Value::as_table).ok_or_else(|| ConfigError::UnknownKey(key.into()))?;
        o = o.get_mut(*p).and_then(Value::as_table_mut).expect("defaults shape");
    }
    let like = d.get(*last).ok_or_else(|| ConfigError::UnknownKey(key.into()))?;
    let v = conform(key, like, parse_scalar(raw)?)?;
    o.insert((*last).to_string(), v);
    Ok(())
}

fn load_with(text: &str, overrides: &[String]) -> Result<RunConfig> {
    let defaults: Table = toml::from_str(&RunConfig::default().to_toml()).expect("defaults round trip");
    let mut merged = defaults.clone();
    let file: Table = toml::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))?;
    merge("", &defaults, file, &mut merged)?;
    for o in overrides {
        let (k, v) = o.split_once('=').ok_or_else(|| ConfigError::Override(o.clone()))?;
        set_dotted(&defaults, &mut merged, k.trim(), v.trim())?;
    }
    let cfg: RunConfig = Value::Table(merged).try_into().map_err(|e: toml::de::Error| ConfigError::Parse(e.to_string()))?;
    cfg.validate()?;
    Ok(cfg)
}
