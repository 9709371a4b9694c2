use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::membank::RecallParams;
use crate::motioncue::SegmentParams;
use crate::posegraph::{SolveParams, DEFAULT_ALPHA_MEM, DEFAULT_HUBER_DELTA};

#[derive(Debug, Error, PartialEq)]
pub enum ConfigError {
    #[error("line {line}: expected key=value")]
    Syntax { line: usize },
    #[error("unknown config key `{0}`")]
    UnknownKey(String),
    #[error("bad value for `{key}`: {reason}")]
    BadValue { key: String, reason: String },
    #[error("invalid config: {0}")]
    Invalid(String),
}

/// Factor-graph settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GraphConfig {
    pub tau_min: f64,
    pub alpha_assoc: f64,
    pub huber_delta: f64,
    pub alpha_mem: f64,
    /// Pixel σ of fresh observations.
    pub sigma_px: f64,
    /// Variance of every component of the prior on the first pose.
    pub prior_var: f64,
    /// σ of the translation (m) and rotation (rad) parts of a motion factor.
    pub motion_sigma_t: f64,
    pub motion_sigma_r: f64,
    pub sigma_anchor: Option<f64>,
    /// Keypoint-track linking radius (px).
    pub link_px: f64,
    /// Lattice step for landmark sampling when a sequence has no matches.
    pub grid_step: usize,
    pub solve: SolveParams,
}

impl Default for GraphConfig {
    fn default() -> Self {
        Self {
            tau_min: 0.02,
            alpha_assoc: 0.005,
            huber_delta: DEFAULT_HUBER_DELTA,
            alpha_mem: DEFAULT_ALPHA_MEM,
            sigma_px: 1.0,
            prior_var: 1e-6,
            motion_sigma_t: 0.1,
            motion_sigma_r: 0.1,
            sigma_anchor: None,
            link_px: 1.5,
            grid_step: 8,
            solve: SolveParams::default(),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Paths {
    pub sequence: Option<PathBuf>,
    pub bank: Option<PathBuf>,
    pub out: Option<PathBuf>,
}

/// Every tunable of a pipeline run. The text form is flat `key=value` lines
/// with dotted keys for nested settings (`graph.solve.max_iter=50`).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    /// Frames between memory recalls.
    pub cadence: usize,
    /// Every `stride`-th frame contributes static points to the query cloud.
    pub stride: usize,
    pub conf_min: f64,
    pub seed: u64,
    /// Map voxel size (m); `None` uses `voxel_frac` of the first query
    /// cloud's diameter.
    pub voxel: Option<f64>,
    pub voxel_frac: f64,
    /// Keyframe feature distance; `None` uses the median distance between
    /// consecutive frames.
    pub kf_d_target: Option<f64>,
    pub segment: SegmentParams,
    pub recall: RecallParams,
    pub graph: GraphConfig,
    pub paths: Paths,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            cadence: 20,
            stride: 4,
            conf_min: 0.5,
            seed: 0,
            voxel: None,
            voxel_frac: 0.01,
            kf_d_target: None,
            segment: SegmentParams::default(),
            recall: RecallParams::default(),
            graph: GraphConfig::default(),
            paths: Paths::default(),
        }
    }
}

impl PipelineConfig {
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut cfg = Self::default();
        cfg.apply_text(text)?;
        Ok(cfg)
    }

    /// Applies `key=value` lines on top of the current values. Blank lines
    /// and `#` comments are skipped.
    pub fn apply_text(&mut self, text: &str) -> Result<(), ConfigError> {
        let mut pairs = Vec::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or(ConfigError::Syntax { line: n + 1 })?;
            pairs.push((k.trim().to_string(), v.trim().to_string()));
        }
        self.apply(pairs.iter().map(|(k, v)| (k.as_str(), v.as_str())))
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
        self.apply([(key, value)])
    }

    fn apply<'a>(&mut self, pairs: impl IntoIterator<Item = (&'a str, &'a str)>) -> Result<(), ConfigError> {
        let mut tree = serde_json::to_value(&*self).expect("config serializes");
        let schema = serde_json::to_value(Self::default()).expect("config serializes");
        for (key, raw) in pairs {
            let slot = lookup(&mut tree, key).ok_or_else(|| ConfigError::UnknownKey(key.into()))?;
            if lookup_ref(&schema, key).is_some_and(Value::is_object) {
                return Err(ConfigError::UnknownKey(key.into()));
            }
            let textual = key.starts_with("paths.") || lookup_ref(&schema, key).is_some_and(Value::is_string);
            *slot = if textual && !raw.is_empty() && raw != "none" {
                Value::String(raw.into())
            } else {
                parse_value(raw)
            };
            Self::deserialize(&tree).map_err(|e| ConfigError::BadValue {
                key: key.into(),
                reason: e.to_string(),
            })?;
        }
        let cfg = Self::deserialize(&tree).expect("checked above");
        cfg.validate()?;
        *self = cfg;
        Ok(())
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |m: &str| Err(ConfigError::Invalid(m.into()));
        if self.cadence < 1 {
            return bad("cadence must be >= 1");
        }
        if self.stride < 1 {
            return bad("stride must be >= 1");
        }
        if !(0.0..=1.0).contains(&self.conf_min) {
            return bad("conf_min must lie in [0, 1]");
        }
        if self.voxel.is_some_and(|v| !(v > 0.0)) || !(self.voxel_frac > 0.0) {
            return bad("voxel sizes must be positive");
        }
        let g = &self.graph;
        if !(g.motion_sigma_t > 0.0 && g.motion_sigma_r > 0.0 && g.prior_var > 0.0 && g.sigma_px > 0.0) {
            return bad("graph sigmas must be positive");
        }
        if !(g.alpha_mem > 0.0 && g.alpha_mem <= 1.0) {
            return bad("graph.alpha_mem must lie in (0, 1]");
        }
        if g.grid_step < 1 {
            return bad("graph.grid_step must be >= 1");
        }
        Ok(())
    }

    /// Flat `key=value` listing of every setting.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        flatten(&serde_json::to_value(self).expect("config serializes"), "", &mut out);
        out
    }
}

fn lookup<'a>(v: &'a mut Value, key: &str) -> Option<&'a mut Value> {
    key.split('.').try_fold(v, |node, part| node.as_object_mut()?.get_mut(part))
}

fn lookup_ref<'a>(v: &'a Value, key: &str) -> Option<&'a Value> {
    key.split('.').try_fold(v, |node, part| node.as_object()?.get(part))
}

fn parse_value(raw: &str) -> Value {
    if raw.is_empty() || raw == "none" {
        return Value::Null;
    }
    serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.into()))
}

fn flatten(v: &Value, prefix: &str, out: &mut String) {
    match v {
        Value::Object(m) => {
            for (k, child) in m {
                let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                flatten(child, &key, out);
            }
        }
        Value::Null => out.push_str(&format!("{prefix}=none\n")),
        Value::String(s) => out.push_str(&format!("{prefix}={s}\n")),
        other => out.push_str(&format!("{prefix}={other}\n")),
    }
}
