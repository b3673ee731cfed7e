//! Calibration configuration and its `key = value` file format.

use std::fmt::Write as _;
use std::path::Path;

use drift_ptq_core::drift::{DriftParams, RowReduce};
use drift_ptq_core::quant::QuantSpec;
use drift_ptq_core::sim::EnvSpec;
use serde::{Deserialize, Serialize};

use crate::error::PipelineError;

/// Environment variable consulted when no `--seed` flag is given.
pub const SEED_ENV: &str = "DRIFT_PTQ_SEED";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibConfig {
    pub calibration_steps: usize,
    pub batch_size: usize,
    pub spatial_bins: usize,
    pub warmup_steps: usize,
    pub probe_steps: usize,
    pub damping: f64,
    pub w_trans: f64,
    pub w_rot: f64,
    pub scaling_gain: f64,
    pub retention_k: f64,
    pub svd_block: usize,
    pub smoothing: f64,
    pub group_size: usize,
    pub shrinkage: f64,
    pub rank_r: usize,
    pub g_min: f64,
    pub g_max: f64,
    pub seed: u64,
    /// Scripted-controller episodes in the generated dataset.
    pub episodes: usize,
    pub episode_steps: usize,
    /// Closed-loop evaluation horizon.
    pub horizon: usize,
    pub eval_seeds: usize,
    /// Ridge for the closed-form head fit.
    pub ridge: f64,
    /// Trailing denoiser blocks kept at 16 bits regardless of sensitivity.
    pub preserved_tail_blocks: usize,
    pub row_reduce: RowReduce,
}

impl Default for CalibConfig {
    fn default() -> Self {
        Self {
            calibration_steps: 512,
            batch_size: 1,
            spatial_bins: 6,
            warmup_steps: 128,
            probe_steps: 16,
            damping: 3e-4,
            w_trans: 1.8,
            w_rot: 0.15,
            scaling_gain: 1.6,
            retention_k: 30.0,
            svd_block: 16,
            smoothing: 0.15,
            group_size: 32,
            shrinkage: 0.55,
            rank_r: 16,
            g_min: 0.25,
            g_max: 4.0,
            seed: 0,
            episodes: 512,
            episode_steps: 64,
            horizon: 64,
            eval_seeds: 20,
            ridge: 1e-3,
            preserved_tail_blocks: 2,
            row_reduce: RowReduce::Mean,
        }
    }
}

/// Keys accepted in config files, in canonical order.
pub const KEYS: &[&str] = &[
    "calibration_steps",
    "batch_size",
    "spatial_bins",
    "warmup_steps",
    "probe_steps",
    "damping",
    "w_trans",
    "w_rot",
    "scaling_gain",
    "retention_k",
    "svd_block",
    "smoothing",
    "group_size",
    "shrinkage",
    "rank_r",
    "g_min",
    "g_max",
    "seed",
    "episodes",
    "episode_steps",
    "horizon",
    "eval_seeds",
    "ridge",
    "preserved_tail_blocks",
    "row_reduce",
];

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T, PipelineError> {
    value
        .parse()
        .map_err(|_| PipelineError::Config(format!("invalid value `{value}` for `{key}`")))
}

impl CalibConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), PipelineError> {
        match key {
            "calibration_steps" => self.calibration_steps = parse(key, value)?,
            "batch_size" => self.batch_size = parse(key, value)?,
            "spatial_bins" => self.spatial_bins = parse(key, value)?,
            "warmup_steps" => self.warmup_steps = parse(key, value)?,
            "probe_steps" => self.probe_steps = parse(key, value)?,
            "damping" => self.damping = parse(key, value)?,
            "w_trans" => self.w_trans = parse(key, value)?,
            "w_rot" => self.w_rot = parse(key, value)?,
            "scaling_gain" => self.scaling_gain = parse(key, value)?,
            "retention_k" => self.retention_k = parse(key, value.trim_end_matches('%'))?,
            "svd_block" => self.svd_block = parse(key, value)?,
            "smoothing" => self.smoothing = parse(key, value)?,
            "group_size" => self.group_size = parse(key, value)?,
            "shrinkage" => self.shrinkage = parse(key, value)?,
            "rank_r" => self.rank_r = parse(key, value)?,
            "g_min" => self.g_min = parse(key, value)?,
            "g_max" => self.g_max = parse(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            "episodes" => self.episodes = parse(key, value)?,
            "episode_steps" => self.episode_steps = parse(key, value)?,
            "horizon" => self.horizon = parse(key, value)?,
            "eval_seeds" => self.eval_seeds = parse(key, value)?,
            "ridge" => self.ridge = parse(key, value)?,
            "preserved_tail_blocks" => self.preserved_tail_blocks = parse(key, value)?,
            "row_reduce" => {
                self.row_reduce = value
                    .parse()
                    .map_err(|e: drift_ptq_core::Error| PipelineError::Config(e.to_string()))?
            }
            other => return Err(PipelineError::Config(format!("unknown config key `{other}`"))),
        }
        Ok(())
    }

    /// Applies `key = value` lines; `#` starts a comment. Returns the
    /// overrides in file order.
    pub fn apply_text(&mut self, text: &str) -> Result<Vec<(String, String)>, PipelineError> {
        let mut overrides = Vec::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| PipelineError::Config(format!("line {}: expected `key = value`", n + 1)))?;
            let (k, v) = (k.trim(), v.trim());
            self.set(k, v)
                .map_err(|e| PipelineError::Config(format!("line {}: {e}", n + 1)))?;
            overrides.push((k.to_string(), v.to_string()));
        }
        self.validate()?;
        Ok(overrides)
    }

    pub fn load(path: &Path) -> Result<(Self, Vec<(String, String)>), PipelineError> {
        let text = std::fs::read_to_string(path).map_err(|e| PipelineError::io(path, e))?;
        let mut cfg = Self::default();
        let overrides = cfg.apply_text(&text)?;
        Ok((cfg, overrides))
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        let bad = |what: &str| Err(PipelineError::Config(what.to_string()));
        let counts = [
            ("calibration_steps", self.calibration_steps),
            ("batch_size", self.batch_size),
            ("spatial_bins", self.spatial_bins),
            ("probe_steps", self.probe_steps),
            ("svd_block", self.svd_block),
            ("group_size", self.group_size),
            ("rank_r", self.rank_r),
            ("episodes", self.episodes),
            ("episode_steps", self.episode_steps),
            ("horizon", self.horizon),
            ("eval_seeds", self.eval_seeds),
        ];
        for (k, v) in counts {
            if v == 0 {
                return bad(&format!("`{k}` must be positive"));
            }
        }
        let reals = [
            ("damping", self.damping),
            ("w_trans", self.w_trans),
            ("w_rot", self.w_rot),
            ("scaling_gain", self.scaling_gain),
            ("smoothing", self.smoothing),
            ("shrinkage", self.shrinkage),
            ("g_min", self.g_min),
            ("g_max", self.g_max),
            ("ridge", self.ridge),
        ];
        for (k, v) in reals {
            if !(v.is_finite() && v > 0.0) {
                return bad(&format!("`{k}` must be positive and finite"));
            }
        }
        if !(0.0..=100.0).contains(&self.retention_k) {
            return bad("`retention_k` must lie in [0, 100]");
        }
        if self.shrinkage > 1.0 || self.smoothing > 1.0 {
            return bad("`shrinkage` and `smoothing` must not exceed 1");
        }
        if self.g_min > self.g_max {
            return bad("`g_min` exceeds `g_max`");
        }
        if self.warmup_steps + 2 > self.calibration_steps {
            return bad("need at least 2 calibration steps after warmup");
        }
        if self.calibration_steps > self.episodes * self.episode_steps {
            return bad("calibration_steps exceeds the dataset size");
        }
        Ok(())
    }

    pub fn drift_params(&self) -> DriftParams<f64> {
        DriftParams {
            w: [self.w_trans, self.w_trans, self.w_rot],
            lambda: self.damping,
            gain: self.scaling_gain,
        }
    }

    pub fn quant_spec(&self) -> QuantSpec {
        QuantSpec::w4(self.group_size)
    }

    /// Even bin counts split into two radial rings.
    pub fn env_spec(&self) -> EnvSpec {
        let radial = if self.spatial_bins % 2 == 0 { 2 } else { 1 };
        EnvSpec {
            radial_bins: radial,
            angular_bins: self.spatial_bins / radial,
            ..EnvSpec::default()
        }
    }

    /// Canonical `key = value` rendering accepted by [`CalibConfig::apply_text`].
    pub fn to_text(&self) -> String {
        let v = serde_json::to_value(self).expect("config serializes");
        let mut out = String::new();
        for k in KEYS {
            let val = &v[*k];
            let s = match val {
                serde_json::Value::String(s) => s.clone(),
                other => other.to_string(),
            };
            let _ = writeln!(out, "{k} = {s}");
        }
        out
    }
}

/// Seed precedence: flag, then environment, then config.
pub fn resolve_seed(flag: Option<u64>, env: Option<&str>, config: u64) -> Result<u64, PipelineError> {
    if let Some(s) = flag {
        return Ok(s);
    }
    match env {
        Some(v) if !v.trim().is_empty() => v
            .trim()
            .parse()
            .map_err(|_| PipelineError::Config(format!("{SEED_ENV}=`{v}` is not an unsigned integer"))),
        _ => Ok(config),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_match_table() {
        let c = CalibConfig::default();
        assert_eq!(c.calibration_steps, 512);
        assert_eq!(c.batch_size, 1);
        assert_eq!(c.spatial_bins, 6);
        assert_eq!(c.warmup_steps, 128);
        assert_eq!(c.probe_steps, 16);
        assert_eq!(c.damping, 3e-4);
        assert_eq!(c.w_trans, 1.8);
        assert_eq!(c.w_rot, 0.15);
        assert_eq!(c.scaling_gain, 1.6);
        assert_eq!(c.retention_k, 30.0);
        assert_eq!(c.svd_block, 16);
        assert_eq!(c.smoothing, 0.15);
        assert_eq!(c.group_size, 32);
        assert_eq!(c.shrinkage, 0.55);
        assert_eq!(c.rank_r, 16);
        assert_eq!((c.g_min, c.g_max), (0.25, 4.0));
        c.validate().unwrap();
    }

    #[test]
    fn text_round_trip() {
        let mut c = CalibConfig::default();
        c.retention_k = 50.0;
        c.row_reduce = RowReduce::Max;
        let mut back = CalibConfig::default();
        back.apply_text(&c.to_text()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn overrides_and_comments() {
        let mut c = CalibConfig::default();
        let o = c.apply_text("# header\nretention_k = 40%\n\nseed=9 # trailing\n").unwrap();
        assert_eq!(c.retention_k, 40.0);
        assert_eq!(c.seed, 9);
        assert_eq!(o, vec![("retention_k".into(), "40%".into()), ("seed".into(), "9".into())]);
    }

    #[test]
    fn rejects_unknown_and_invalid() {
        let mut c = CalibConfig::default();
        assert!(c.apply_text("bogus = 1").is_err());
        assert!(CalibConfig::default().apply_text("retention_k = 120").is_err());
        assert!(CalibConfig::default().apply_text("damping = -1").is_err());
        assert!(CalibConfig::default().apply_text("group_size").is_err());
        assert!(CalibConfig::default().apply_text("warmup_steps = 511").is_err());
    }

    #[test]
    fn seed_precedence() {
        assert_eq!(resolve_seed(Some(3), Some("5"), 1).unwrap(), 3);
        assert_eq!(resolve_seed(None, Some("5"), 1).unwrap(), 5);
        assert_eq!(resolve_seed(None, None, 1).unwrap(), 1);
        assert!(resolve_seed(None, Some("x"), 1).is_err());
    }
}
