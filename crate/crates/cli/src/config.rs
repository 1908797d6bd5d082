//! Run configuration: a JSON document mirroring the training,
//! reconstruction, and saliency hyperparameters. Precedence is CLI flag
//! over config file over built-in default; the fully resolved document is
//! echoed into every output directory as `effective-config.json`.

use std::collections::BTreeMap;
use std::path::Path;

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

use cnnvlm::vlm::TrainHyperparams;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    F32,
    F64,
}

impl std::fmt::Display for Precision {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Precision::F32 => write!(f, "f32"),
            Precision::F64 => write!(f, "f64"),
        }
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub precision: Option<Precision>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub train: Option<TrainSettings>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reconstruct: Option<ReconstructSettings>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub saliency: Option<SaliencySettings>,
}

/// Training section; unset fields fall back to the library defaults.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSettings {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lr: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub momentum: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub batch: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lr_decay_factor: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lr_decay_every: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_iters: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub clip_norm: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub directions: Option<Vec<cnnvlm::vlm::Direction>>,
    /// Scale projection columns to unit variance during the preprocess fit.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub whiten: Option<bool>,
}

impl TrainSettings {
    /// Resolve against the library defaults, with the run seed applied.
    pub fn resolve(&self, seed: u64) -> TrainHyperparams {
        let base = TrainHyperparams::default();
        TrainHyperparams {
            lr: self.lr.unwrap_or(base.lr),
            momentum: self.momentum.unwrap_or(base.momentum),
            batch: self.batch.unwrap_or(base.batch),
            lr_decay_factor: self.lr_decay_factor.unwrap_or(base.lr_decay_factor),
            lr_decay_every: self.lr_decay_every.unwrap_or(base.lr_decay_every),
            max_iters: self.max_iters.unwrap_or(base.max_iters),
            seed,
            clip_norm: self.clip_norm.unwrap_or(base.clip_norm),
            directions: self.directions.clone(),
        }
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReconstructSettings {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lambda_r: Option<f64>,
    /// Per-layer weights; layers named `conv<n>` default to 10^-(n-1),
    /// anything else to 1.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lambdas: Option<BTreeMap<String, f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lr: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub momentum: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub iters: Option<usize>,
    /// "gaussian" or "from_image".
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub init: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub init_image: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rgb_mean: Option<[f64; 3]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rgb_std: Option<[f64; 3]>,
    /// Directory of images to fit the init Gaussian on (alternative to
    /// rgb_mean/rgb_std).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rgb_stats_images: Option<String>,
    /// Tap name `phi` compares at; the final network output when unset.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target_layer: Option<String>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SaliencySettings {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sigma_rel: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out_width: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out_height: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub negative_cap: Option<usize>,
}

pub const DEFAULT_SIGMA_REL: f64 = 0.030;
pub const DEFAULT_NEGATIVE_CAP: usize = 5000;
pub const DEFAULT_LAMBDA_R: f64 = 10.0;
pub const DEFAULT_RECONSTRUCT_MOMENTUM: f64 = 0.9;

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        let config: RunConfig = serde_json::from_str(&text)
            .with_context(|| format!("parsing config {}", path.display()))?;
        Ok(config)
    }

    /// Write the resolved document next to a command's outputs.
    pub fn echo_effective(&self, out_dir: &Path) -> Result<()> {
        std::fs::create_dir_all(out_dir)?;
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(out_dir.join("effective-config.json"), text + "\n")?;
        Ok(())
    }
}

/// Default per-layer weight: `conv<n>` gets 10^-(n-1), other names 1.
pub fn default_lambda(layer: &str) -> f64 {
    layer
        .strip_prefix("conv")
        .and_then(|n| n.parse::<i32>().ok())
        .map(|n| 10f64.powi(-(n - 1)))
        .unwrap_or(1.0)
}

/// Parse `--lambdas conv1=1.0,conv2=0.1` into a weight map.
pub fn parse_lambda_spec(spec: &str) -> Result<BTreeMap<String, f64>> {
    let mut out = BTreeMap::new();
    for part in spec.split(',') {
        let part = part.trim();
        if part.is_empty() {
            continue;
        }
        let Some((name, value)) = part.split_once('=') else {
            bail!("lambda entry '{part}' must look like layer=weight");
        };
        let weight: f64 = value
            .trim()
            .parse()
            .with_context(|| format!("lambda weight '{value}'"))?;
        out.insert(name.trim().to_string(), weight);
    }
    if out.is_empty() {
        bail!("empty lambda spec");
    }
    Ok(out)
}

/// Parse `--mean-rgb 104.5,117.0,123.0`.
pub fn parse_rgb_triple(spec: &str) -> Result<[f64; 3]> {
    let parts: Vec<&str> = spec.split(',').collect();
    if parts.len() != 3 {
        bail!("expected three comma-separated values, got '{spec}'");
    }
    let mut out = [0.0; 3];
    for (slot, part) in out.iter_mut().zip(parts.iter()) {
        *slot = part
            .trim()
            .parse()
            .with_context(|| format!("rgb component '{part}'"))?;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_keys_rejected() {
        let err = serde_json::from_str::<RunConfig>(r#"{"sedd": 1}"#);
        assert!(err.is_err());
        let err = serde_json::from_str::<RunConfig>(r#"{"train": {"lrr": 1.0}}"#);
        assert!(err.is_err());
    }

    #[test]
    fn lambda_defaults_follow_conv_index() {
        assert_eq!(default_lambda("conv1"), 1.0);
        assert_eq!(default_lambda("conv3"), 0.01);
        assert_eq!(default_lambda("mixer"), 1.0);
    }

    #[test]
    fn lambda_spec_parsing() {
        let map = parse_lambda_spec("conv1=1.0, conv2=0.5").unwrap();
        assert_eq!(map["conv1"], 1.0);
        assert_eq!(map["conv2"], 0.5);
        assert!(parse_lambda_spec("conv1:1.0").is_err());
        assert!(parse_lambda_spec("").is_err());
    }

    #[test]
    fn train_settings_resolution() {
        let settings = TrainSettings {
            lr: Some(0.5),
            max_iters: Some(100),
            ..Default::default()
        };
        let hp = settings.resolve(42);
        assert_eq!(hp.lr, 0.5);
        assert_eq!(hp.max_iters, 100);
        assert_eq!(hp.seed, 42);
        assert_eq!(hp.momentum, 0.9);
        assert_eq!(hp.batch, 16);
    }
}
