//! Run configuration (`config_version` 1) and dotted-key overrides.
//!
//! ```json
//! {
//!   "config_version": 1,
//!   "run_id": "demo",
//!   "episodes": 2000,
//!   "master_seed": 7,
//!   "seeds": [0, 1, 2],
//!   "invariant_mode": "desk",
//!   "env": {"source": "generate", "kind": "simplex_mixture", "n_states": 8,
//!           "n_actions": 5, "horizon": 3, "dim": 4, "eps_mis_target": 0.0, "seed": 1},
//!   "algorithm": {"name": "sup_lsvi_ucb", "eps_tol": 0.25, "alpha_scale": 0.02}
//! }
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::env::{make_instance, InitialStateMode, InstanceParams, MlmdpSpec};
use crate::error::{Error, Result};
use crate::invariants::InvariantMode;

pub const CONFIG_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub config_version: u32,
    pub run_id: String,
    /// Number of episodes `K`.
    pub episodes: usize,
    #[serde(default)]
    pub master_seed: u64,
    pub seeds: Vec<u64>,
    #[serde(default)]
    pub invariant_mode: InvariantMode,
    /// Wall-clock timings make output non-reproducible; off by default.
    #[serde(default)]
    pub record_wall_time: bool,
    /// Overrides the environment's own initial-state rule.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub initial_state: Option<InitialStateMode>,
    pub env: EnvSource,
    pub algorithm: AlgorithmConfig,
    #[serde(default, skip_serializing_if = "TestHooks::is_empty")]
    pub test_hooks: TestHooks,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case")]
pub enum EnvSource {
    Generate(InstanceParams),
    /// Relative paths resolve against the config file's directory.
    File { path: PathBuf },
}

fn default_delta() -> f64 {
    0.1
}

fn default_scale() -> f64 {
    1.0
}

fn default_lin_ucb_delta() -> f64 {
    0.05
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum LinUcbMode {
    /// `lambda = 1 + K eps^2` with the matching bonus scale.
    #[default]
    Inflated,
    /// `lambda = 1` with the same bonus formula.
    Standard,
    /// Explicit `lambda` and `alpha`.
    Custom,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "name", rename_all = "snake_case", deny_unknown_fields)]
pub enum AlgorithmConfig {
    SupLsviUcb {
        eps_tol: f64,
        #[serde(default = "default_delta")]
        delta: f64,
        /// 1.0 reproduces the analysed bonus; smaller values are desk-scale.
        #[serde(default = "default_scale")]
        alpha_scale: f64,
    },
    LsviUcb {
        alpha: f64,
        #[serde(default = "default_scale")]
        lambda: f64,
    },
    Expl3 {
        thres: f64,
    },
    SupLinUcbVar {
        levels: usize,
        #[serde(default = "default_scale")]
        alpha_b: f64,
    },
    Takemura {
        #[serde(default)]
        levels: Option<usize>,
        #[serde(default = "default_scale")]
        alpha_b: f64,
    },
    LinUcb {
        #[serde(default)]
        mode: LinUcbMode,
        /// Defaults to the environment's realized misspecification.
        #[serde(default)]
        eps_mis: Option<f64>,
        #[serde(default = "default_lin_ucb_delta")]
        delta: f64,
        #[serde(default)]
        lambda: Option<f64>,
        #[serde(default)]
        alpha: Option<f64>,
    },
    Optimal,
    UniformRandom,
}

impl AlgorithmConfig {
    pub fn name(&self) -> &'static str {
        match self {
            AlgorithmConfig::SupLsviUcb { .. } => "sup_lsvi_ucb",
            AlgorithmConfig::LsviUcb { .. } => "lsvi_ucb",
            AlgorithmConfig::Expl3 { .. } => "expl3",
            AlgorithmConfig::SupLinUcbVar { .. } => "sup_lin_ucb_var",
            AlgorithmConfig::Takemura { .. } => "takemura",
            AlgorithmConfig::LinUcb { .. } => "lin_ucb",
            AlgorithmConfig::Optimal => "optimal",
            AlgorithmConfig::UniformRandom => "uniform_random",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct TestHooks {
    /// Replaces the per-level stored-row ceiling checked every episode.
    #[serde(default)]
    pub psi_bound_override: Option<f64>,
}

impl TestHooks {
    pub fn is_empty(&self) -> bool {
        self.psi_bound_override.is_none()
    }
}

impl RunConfig {
    pub fn from_value(value: Value) -> Result<Self> {
        let config: RunConfig =
            serde_json::from_value(value).map_err(|e| Error::config(format!("invalid config: {e}")))?;
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        if self.config_version != CONFIG_VERSION {
            return Err(Error::config(format!(
                "unsupported config_version {} (expected {CONFIG_VERSION})",
                self.config_version
            )));
        }
        if self.episodes == 0 {
            return Err(Error::config("episodes (K) must be at least 1"));
        }
        if self.seeds.is_empty() {
            return Err(Error::config("seeds must be nonempty"));
        }
        let id_ok = !self.run_id.is_empty()
            && self.run_id.chars().all(|c| c.is_ascii_alphanumeric() || "-_.".contains(c));
        if !id_ok {
            return Err(Error::config(format!(
                "run_id {:?} must be nonempty and use only [A-Za-z0-9._-]",
                self.run_id
            )));
        }
        Ok(())
    }

    /// Generates or loads the environment. `base_dir` anchors relative paths.
    pub fn load_spec(&self, base_dir: Option<&Path>) -> Result<MlmdpSpec> {
        let mut spec = match &self.env {
            EnvSource::Generate(params) => make_instance(params)?,
            EnvSource::File { path } => {
                let full = match base_dir {
                    Some(dir) if path.is_relative() => dir.join(path),
                    _ => path.clone(),
                };
                MlmdpSpec::load(&full).map_err(|e| match e {
                    Error::Io(io) => Error::config(format!("cannot read spec {}: {io}", full.display())),
                    Error::Json(js) => Error::config(format!("malformed spec {}: {js}", full.display())),
                    other => other,
                })?
            }
        };
        if let Some(mode) = self.initial_state {
            spec.initial_state = mode;
        }
        Ok(spec)
    }
}

/// Reads a config file as raw JSON so overrides can be applied before typing.
pub fn read_config_value(path: &Path) -> Result<Value> {
    let text = fs::read_to_string(path)
        .map_err(|e| Error::config(format!("cannot read config {}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| Error::config(format!("malformed config {}: {e}", path.display())))
}

/// Parses the right-hand side of `KEY=VALUE` as JSON, falling back to a
/// plain string.
pub fn parse_override_value(raw: &str) -> Value {
    serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()))
}

/// Sets `dotted.key` inside `root`. Every intermediate object must already
/// exist; the final key may be new, and typing the result catches keys the
/// schema does not declare.
pub fn apply_override(root: &mut Value, key: &str, value: Value) -> Result<()> {
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(Error::config(format!("malformed override key {key:?}")));
    }
    let (last, parents) = parts.split_last().expect("split yields at least one part");
    let mut node = root;
    for part in parents {
        node = match node {
            Value::Object(map) => map
                .get_mut(*part)
                .ok_or_else(|| Error::config(format!("unknown config key {key:?}")))?,
            Value::Array(items) => {
                let idx: usize = part
                    .parse()
                    .map_err(|_| Error::config(format!("unknown config key {key:?}")))?;
                items
                    .get_mut(idx)
                    .ok_or_else(|| Error::config(format!("index out of range in {key:?}")))?
            }
            _ => return Err(Error::config(format!("unknown config key {key:?}"))),
        };
    }
    match node {
        Value::Object(map) => {
            map.insert((*last).to_string(), value);
            Ok(())
        }
        _ => Err(Error::config(format!("unknown config key {key:?}"))),
    }
}

/// Parses `KEY=VALUE`.
pub fn split_assignment(raw: &str) -> Result<(&str, Value)> {
    let (key, value) = raw
        .split_once('=')
        .ok_or_else(|| Error::config(format!("override {raw:?} is not KEY=VALUE")))?;
    Ok((key.trim(), parse_override_value(value.trim())))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepAxis {
    pub key: String,
    pub values: Vec<Value>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepCell {
    /// Position in the grid, last axis fastest.
    pub index: usize,
    pub assignments: Vec<(String, Value)>,
    pub config: RunConfig,
}

/// Cartesian product of `axes` applied to `base`. Each cell gets the run id
/// `<base run_id>-c<index>`. No axes yields the base config alone.
pub fn expand_sweep(base: &Value, axes: &[SweepAxis]) -> Result<Vec<SweepCell>> {
    if let Some(axis) = axes.iter().find(|a| a.values.is_empty()) {
        return Err(Error::config(format!("sweep axis {:?} has no values", axis.key)));
    }
    let total: usize = axes.iter().map(|a| a.values.len()).product();
    let mut cells = Vec::with_capacity(total);
    for index in 0..total {
        let mut rem = index;
        let mut picks = vec![0usize; axes.len()];
        for (i, axis) in axes.iter().enumerate().rev() {
            picks[i] = rem % axis.values.len();
            rem /= axis.values.len();
        }
        let mut value = base.clone();
        let mut assignments = Vec::with_capacity(axes.len());
        for (axis, &pick) in axes.iter().zip(&picks) {
            let v = axis.values[pick].clone();
            apply_override(&mut value, &axis.key, v.clone())?;
            assignments.push((axis.key.clone(), v));
        }
        if !axes.is_empty() {
            let base_id = value.get("run_id").and_then(Value::as_str).unwrap_or("run").to_string();
            apply_override(&mut value, "run_id", Value::String(format!("{base_id}-c{index}")))?;
        }
        cells.push(SweepCell { index, assignments, config: RunConfig::from_value(value)? });
    }
    Ok(cells)
}

/// Splits an optional top-level `"sweep": [axes...]` off a config document.
pub fn take_sweep_axes(root: &mut Value) -> Result<Vec<SweepAxis>> {
    match root.as_object_mut().and_then(|m| m.remove("sweep")) {
        None => Ok(Vec::new()),
        Some(axes) => serde_json::from_value(axes).map_err(|e| Error::config(format!("invalid sweep axes: {e}"))),
    }
}
