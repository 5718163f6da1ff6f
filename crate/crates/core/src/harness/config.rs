use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::dynamics::{PredictorMode, DEFAULT_ALPHA, DEFAULT_ETA, DEFAULT_MOMENTUM, DEFAULT_STEPS, DEFAULT_TOP_R};
use crate::error::{RdmError, Result};
use crate::filters::FilterSpec;
use crate::spectral::DEFAULT_COVERAGE;

/// Environment variable that replaces `out_dir` when set.
pub const OUT_DIR_ENV: &str = "RDM_OUT_DIR";

const MAX_DIM: usize = 4096;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ExperimentKind {
    Dynamics,
    Filters,
    Symsimsiam,
    Align,
    Verify,
}

impl std::fmt::Display for ExperimentKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            Self::Dynamics => "dynamics",
            Self::Filters => "filters",
            Self::Symsimsiam => "symsimsiam",
            Self::Align => "align",
            Self::Verify => "verify",
        };
        f.write_str(s)
    }
}

fn d_default() -> usize {
    32
}
fn k_default() -> usize {
    16
}
fn aug_std_default() -> f64 {
    0.5
}
fn samples_default() -> usize {
    256
}
fn filter_default() -> String {
    "directpred".into()
}
fn alpha_default() -> f64 {
    DEFAULT_ALPHA
}
fn eta_default() -> f64 {
    DEFAULT_ETA
}
fn momentum_default() -> f64 {
    DEFAULT_MOMENTUM
}
fn steps_default() -> usize {
    DEFAULT_STEPS
}
fn yes() -> bool {
    true
}
fn out_dir_default() -> PathBuf {
    PathBuf::from("rdm-out")
}
fn one() -> usize {
    1
}
fn top_r_default() -> usize {
    DEFAULT_TOP_R
}
fn coverage_default() -> f64 {
    DEFAULT_COVERAGE
}
fn instances_default() -> usize {
    1000
}

/// One experiment, read from a single JSON document. Every field except
/// `kind` has a default.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub kind: ExperimentKind,
    #[serde(default = "d_default")]
    pub d: usize,
    #[serde(default = "k_default")]
    pub k: usize,
    #[serde(default = "aug_std_default")]
    pub aug_std: f64,
    #[serde(default)]
    pub seed: u64,
    /// Finite population file; replaces the isotropic model as the data
    /// source when set, and fixes `k` to the population's feature size.
    #[serde(default)]
    pub population: Option<PathBuf>,
    /// Batch size `n`.
    #[serde(default = "samples_default")]
    pub samples: usize,
    #[serde(default = "filter_default")]
    pub filter: String,
    #[serde(default = "alpha_default")]
    pub alpha: f64,
    #[serde(default = "eta_default")]
    pub eta: f64,
    #[serde(default = "momentum_default")]
    pub momentum: f64,
    #[serde(default = "steps_default")]
    pub steps: usize,
    #[serde(default = "yes")]
    pub stop_gradient: bool,
    #[serde(default)]
    pub predictor_mode: PredictorMode,
    #[serde(default = "out_dir_default")]
    pub out_dir: PathBuf,
    #[serde(default = "one")]
    pub stride: usize,
    #[serde(default = "top_r_default")]
    pub top_r: usize,
    #[serde(default = "coverage_default")]
    pub coverage: f64,
    /// Instances per property for `verify`.
    #[serde(default = "instances_default")]
    pub instances: usize,
}

impl ExperimentConfig {
    /// Defaults for `kind`.
    pub fn new(kind: ExperimentKind) -> Self {
        serde_json::from_value(serde_json::json!({ "kind": kind })).expect("defaults are valid")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| RdmError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| RdmError::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// Applies `key=value` overrides. Values are read as JSON when they
    /// parse as JSON and as plain strings otherwise, so `filter=pow:-0.5`
    /// and `steps=10` both work.
    pub fn with_overrides<S: AsRef<str>>(&self, overrides: &[S]) -> Result<Self> {
        let mut doc = serde_json::to_value(self).expect("config serializes");
        let map = doc.as_object_mut().expect("config is an object");
        for item in overrides {
            let item = item.as_ref();
            let (key, raw) = item
                .split_once('=')
                .ok_or_else(|| RdmError::Config(format!("override `{item}` is not key=value")))?;
            let key = key.trim();
            if !map.contains_key(key) {
                return Err(RdmError::Config(format!("unknown config key `{key}`")));
            }
            let value = serde_json::from_str::<Value>(raw).unwrap_or_else(|_| Value::String(raw.into()));
            map.insert(key.to_string(), value);
        }
        let cfg: Self = serde_json::from_value(doc).map_err(|e| RdmError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// `RDM_OUT_DIR` when set, else `out_dir`.
    pub fn resolved_out_dir(&self) -> PathBuf {
        match std::env::var_os(OUT_DIR_ENV) {
            Some(v) if !v.is_empty() => PathBuf::from(v),
            _ => self.out_dir.clone(),
        }
    }

    pub fn filter_spec(&self) -> Result<FilterSpec> {
        self.filter.parse()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(RdmError::Config(msg));
        if self.d == 0 || self.d > MAX_DIM || self.k == 0 || self.k > MAX_DIM {
            return bad(format!("d and k must be in 1..={MAX_DIM}, got d = {}, k = {}", self.d, self.k));
        }
        if !(self.aug_std >= 0.0 && self.aug_std.is_finite()) {
            return bad(format!("aug_std must be finite and >= 0, got {}", self.aug_std));
        }
        if self.samples == 0 {
            return bad("samples must be >= 1".into());
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return bad(format!("alpha must be in (0, 1), got {}", self.alpha));
        }
        if !(self.eta >= 0.0 && self.eta.is_finite()) {
            return bad(format!("eta must be finite and >= 0, got {}", self.eta));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad(format!("momentum must be in [0, 1), got {}", self.momentum));
        }
        if self.stride == 0 || self.top_r == 0 || self.instances == 0 {
            return bad("stride, top_r and instances must be >= 1".into());
        }
        if !(self.coverage > 0.0 && self.coverage <= 1.0) {
            return bad(format!("coverage must be in (0, 1], got {}", self.coverage));
        }
        self.filter_spec()?;
        if self.kind == ExperimentKind::Dynamics
            && self.predictor_mode == PredictorMode::Refit
            && self.population.is_none()
            && self.samples < self.k
        {
            return bad(format!(
                "refit needs samples >= k, got samples = {}, k = {}",
                self.samples, self.k
            ));
        }
        Ok(())
    }
}
