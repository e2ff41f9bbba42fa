//! Pipeline settings and their flat `key = value` file format.
//!
//! Blank lines and lines starting with `#` are skipped. Lists are comma
//! separated. Unknown keys are rejected.

use std::fmt::Write as _;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::detector::LabelMode;
use crate::eval::ApMode;
use crate::voting::Kernel;

#[derive(Debug, Error, PartialEq)]
pub enum ConfigError {
    #[error("line {line}: expected key = value")]
    Syntax { line: usize },
    #[error("unknown key {0:?}")]
    UnknownKey(String),
    #[error("bad value for {key}: {value:?}")]
    BadValue { key: String, value: String },
    #[error("{0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub category: String,
    /// Neighbours per cluster; half the positive images when unset.
    pub k: Option<usize>,
    pub top_clusters: usize,
    pub top_matches: usize,
    pub frame_stride: usize,
    /// Select tracks in every frame rather than only in the sampled ones.
    pub select_every_frame: bool,
    pub target_cells: usize,
    pub theta: f64,
    pub bandwidth: Option<f64>,
    pub bandwidth_grid: Option<Vec<f64>>,
    pub kernel: Kernel,
    pub lsvm_rounds: usize,
    pub label_mode: LabelMode,
    pub train_steps: usize,
    pub learning_rate: f64,
    pub lambda: f64,
    pub ridge_lambda: f64,
    pub ap_mode: ApMode,
    pub heatmaps: bool,
    pub seed: Option<u64>,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            category: crate::synth::CATEGORY.to_string(),
            k: None,
            top_clusters: 200,
            top_matches: 20,
            frame_stride: 8,
            select_every_frame: false,
            target_cells: 48,
            theta: 20.0,
            bandwidth: None,
            bandwidth_grid: Some(vec![100.0, 250.0, 500.0, 1000.0]),
            kernel: Kernel::Gaussian,
            lsvm_rounds: 1,
            label_mode: LabelMode::Rcnn,
            train_steps: 2000,
            learning_rate: 0.1,
            lambda: 1e-3,
            ridge_lambda: 1e-3,
            ap_mode: ApMode::ElevenPoint,
            heatmaps: false,
            seed: None,
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T, ConfigError> {
    value.parse().map_err(|_| ConfigError::BadValue {
        key: key.to_string(),
        value: value.to_string(),
    })
}

fn none_or<T: FromStr>(key: &str, value: &str) -> Result<Option<T>, ConfigError> {
    if value == "none" || value.is_empty() {
        Ok(None)
    } else {
        parse(key, value).map(Some)
    }
}

impl PipelineConfig {
    /// Settings matched to the synthetic datasets, whose images are 16
    /// pixels wide: bandwidths are the default grid scaled by 1/100, only the
    /// top few clusters are kept since there are few proposals overall, and
    /// the box regressor is regularized harder for the short pooled features.
    pub fn synthetic_profile(seed: u64) -> Self {
        Self {
            top_clusters: 2,
            theta: 10.0,
            bandwidth_grid: Some(vec![1.0, 2.5, 5.0, 10.0]),
            select_every_frame: true,
            ridge_lambda: 10.0,
            seed: Some(seed),
            ..Self::default()
        }
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
        let v = value.trim();
        match key.trim() {
            "category" => self.category = v.to_string(),
            "k" => self.k = none_or(key, v)?,
            "top_clusters" => self.top_clusters = parse(key, v)?,
            "top_matches" => self.top_matches = parse(key, v)?,
            "frame_stride" => self.frame_stride = parse(key, v)?,
            "select_every_frame" => self.select_every_frame = parse(key, v)?,
            "target_cells" => self.target_cells = parse(key, v)?,
            "theta" => self.theta = parse(key, v)?,
            "bandwidth" => {
                self.bandwidth = none_or(key, v)?;
                if self.bandwidth.is_some() {
                    self.bandwidth_grid = None;
                }
            }
            "bandwidth_grid" => {
                self.bandwidth_grid = if v == "none" || v.is_empty() {
                    None
                } else {
                    Some(v.split(',').map(|x| parse(key, x.trim())).collect::<Result<_, _>>()?)
                };
                if self.bandwidth_grid.is_some() {
                    self.bandwidth = None;
                }
            }
            "kernel" => self.kernel = parse(key, v)?,
            "lsvm_rounds" => self.lsvm_rounds = parse(key, v)?,
            "label_mode" => self.label_mode = parse(key, v)?,
            "train_steps" => self.train_steps = parse(key, v)?,
            "learning_rate" => self.learning_rate = parse(key, v)?,
            "lambda" => self.lambda = parse(key, v)?,
            "ridge_lambda" => self.ridge_lambda = parse(key, v)?,
            "ap_mode" => {
                self.ap_mode = match v {
                    "eleven_point" => ApMode::ElevenPoint,
                    "all_point" => ApMode::AllPoint,
                    _ => return Err(ConfigError::BadValue { key: key.into(), value: v.into() }),
                }
            }
            "heatmaps" => self.heatmaps = parse(key, v)?,
            "seed" => self.seed = none_or(key, v)?,
            other => return Err(ConfigError::UnknownKey(other.to_string())),
        }
        Ok(())
    }

    pub fn parse_str(text: &str) -> Result<Self, ConfigError> {
        let mut cfg = Self::default();
        cfg.apply_str(text)?;
        Ok(cfg)
    }

    /// Applies the assignments in `text` on top of the current values.
    pub fn apply_str(&mut self, text: &str) -> Result<(), ConfigError> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or(ConfigError::Syntax { line: i + 1 })?;
            self.set(k, v)?;
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |m: String| Err(ConfigError::Invalid(m));
        for (name, v) in [
            ("top_clusters", self.top_clusters),
            ("top_matches", self.top_matches),
            ("frame_stride", self.frame_stride),
            ("target_cells", self.target_cells),
        ] {
            if v == 0 {
                return bad(format!("{name} must be positive"));
            }
        }
        if self.k == Some(0) {
            return bad("k must be positive".into());
        }
        for (name, v) in [
            ("theta", self.theta),
            ("learning_rate", self.learning_rate),
        ] {
            if !(v.is_finite() && v > 0.0) {
                return bad(format!("{name} must be positive"));
            }
        }
        for (name, v) in [("lambda", self.lambda), ("ridge_lambda", self.ridge_lambda)] {
            if !(v.is_finite() && v >= 0.0) {
                return bad(format!("{name} must be non-negative"));
            }
        }
        match (&self.bandwidth, &self.bandwidth_grid) {
            (Some(b), None) if b.is_finite() && *b > 0.0 => {}
            (None, Some(g)) if !g.is_empty() && g.iter().all(|b| b.is_finite() && *b > 0.0) => {}
            _ => return bad("exactly one of bandwidth and bandwidth_grid must be set, with positive values".into()),
        }
        Ok(())
    }

    pub fn to_conf_string(&self) -> String {
        let opt = |v: Option<String>| v.unwrap_or_else(|| "none".into());
        let mut s = String::new();
        let mut kv = |k: &str, v: String| writeln!(s, "{k} = {v}").expect("write to string");
        kv("category", self.category.clone());
        kv("k", opt(self.k.map(|v| v.to_string())));
        kv("top_clusters", self.top_clusters.to_string());
        kv("top_matches", self.top_matches.to_string());
        kv("frame_stride", self.frame_stride.to_string());
        kv("select_every_frame", self.select_every_frame.to_string());
        kv("target_cells", self.target_cells.to_string());
        kv("theta", self.theta.to_string());
        match (&self.bandwidth, &self.bandwidth_grid) {
            (Some(b), _) => kv("bandwidth", b.to_string()),
            (None, Some(g)) => kv("bandwidth_grid", g.iter().map(f64::to_string).collect::<Vec<_>>().join(",")),
            (None, None) => kv("bandwidth", "none".into()),
        }
        kv("kernel", self.kernel.to_string());
        kv("lsvm_rounds", self.lsvm_rounds.to_string());
        kv(
            "label_mode",
            match self.label_mode {
                LabelMode::Rcnn => "rcnn",
                LabelMode::Finetune => "finetune",
            }
            .into(),
        );
        kv("train_steps", self.train_steps.to_string());
        kv("learning_rate", self.learning_rate.to_string());
        kv("lambda", self.lambda.to_string());
        kv("ridge_lambda", self.ridge_lambda.to_string());
        kv(
            "ap_mode",
            match self.ap_mode {
                ApMode::ElevenPoint => "eleven_point",
                ApMode::AllPoint => "all_point",
            }
            .into(),
        );
        kv("heatmaps", self.heatmaps.to_string());
        kv("seed", opt(self.seed.map(|v| v.to_string())));
        s
    }
}
