//! Run configuration: built-in defaults, then an optional TOML file, then
//! command-line flags.

use std::path::Path;

use serde::{Deserialize, Serialize};

use sodkit_core::depth::EnhanceConfig;
use sodkit_core::fusion::BackboneKind;
use sodkit_core::losses::DEFAULT_WINDOW;
use sodkit_core::tensor::ResizeMode;

use crate::error::{CliError, Result};

/// Environment variable that takes precedence over `--jobs`.
pub const JOBS_ENV: &str = "SODKIT_JOBS";

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunConfig {
    pub lambda1: f64,
    pub lambda2: f64,
    pub window: usize,
    pub seed: u64,
    /// The seed came from a flag or the config file rather than the default.
    #[serde(skip)]
    pub seed_explicit: bool,
    pub channel_width: usize,
    pub input_size: usize,
    pub gt_threshold: u8,
    pub identity_weights: bool,
    pub resize_pred: bool,
    pub backbone: BackboneKind,
    pub resize_mode: ResizeMode,
    /// Worker threads for `eval`; does not affect any output.
    #[serde(skip)]
    pub jobs: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            lambda1: 0.8,
            lambda2: 1.2,
            window: DEFAULT_WINDOW,
            seed: 0,
            seed_explicit: false,
            channel_width: 64,
            input_size: 352,
            gt_threshold: 128,
            identity_weights: false,
            resize_pred: false,
            backbone: BackboneKind::Seeded,
            resize_mode: ResizeMode::Bilinear,
            jobs: default_jobs(),
        }
    }
}

pub fn default_jobs() -> usize {
    std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1)
}

/// Every field optional; used for both the config file and the flag layer.
#[derive(Debug, Clone, Default, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConfigLayer {
    pub lambda1: Option<f64>,
    pub lambda2: Option<f64>,
    pub window: Option<usize>,
    pub seed: Option<u64>,
    pub channel_width: Option<usize>,
    pub input_size: Option<usize>,
    pub gt_threshold: Option<u8>,
    pub identity_weights: Option<bool>,
    pub resize_pred: Option<bool>,
    pub backbone: Option<BackboneKind>,
    pub resize_mode: Option<ResizeMode>,
    pub jobs: Option<usize>,
}

impl ConfigLayer {
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::input(format!("cannot read config {}: {e}", path.display())))?;
        toml::from_str(&text).map_err(|e| CliError::input(format!("config {}: {e}", path.display())))
    }
}

impl RunConfig {
    pub fn apply(&mut self, layer: &ConfigLayer) {
        macro_rules! take {
            ($($f:ident),*) => {$(
                if let Some(v) = layer.$f.clone() {
                    self.$f = v;
                }
            )*};
        }
        take!(
            lambda1,
            lambda2,
            window,
            channel_width,
            input_size,
            gt_threshold,
            identity_weights,
            resize_pred,
            backbone,
            resize_mode,
            jobs
        );
        if let Some(seed) = layer.seed {
            self.seed = seed;
            self.seed_explicit = true;
        }
        if layer.identity_weights == Some(true) && layer.backbone.is_none() {
            self.backbone = BackboneKind::Mean;
        }
    }

    /// Defaults, then `file`, then `flags`, then the jobs environment variable.
    pub fn resolve(file: Option<&Path>, flags: &ConfigLayer, jobs_env: Option<&str>) -> Result<Self> {
        let mut cfg = Self::default();
        if let Some(path) = file {
            cfg.apply(&ConfigLayer::from_file(path)?);
        }
        cfg.apply(flags);
        if let Some(v) = jobs_env {
            cfg.jobs = v
                .trim()
                .parse()
                .map_err(|_| CliError::input(format!("{JOBS_ENV} must be a positive integer, got {v:?}")))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.enhance()?;
        if self.window < 3 || self.window.is_multiple_of(2) {
            return Err(CliError::input(format!("window must be odd and >= 3, got {}", self.window)));
        }
        if self.channel_width == 0 {
            return Err(CliError::input("channel width must be positive"));
        }
        if self.input_size == 0 || !self.input_size.is_multiple_of(16) {
            return Err(CliError::input(format!(
                "input size must be a positive multiple of 16, got {}",
                self.input_size
            )));
        }
        if self.jobs == 0 {
            return Err(CliError::input("jobs must be positive"));
        }
        Ok(())
    }

    pub fn enhance(&self) -> Result<EnhanceConfig> {
        Ok(EnhanceConfig::new(self.lambda1, self.lambda2)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flags_override_file_and_env_overrides_jobs() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.toml");
        std::fs::write(&path, "lambda1 = 0.5\nwindow = 5\njobs = 3\n").unwrap();
        let flags = ConfigLayer {
            window: Some(7),
            jobs: Some(2),
            ..Default::default()
        };
        let cfg = RunConfig::resolve(Some(&path), &flags, None).unwrap();
        assert_eq!((cfg.lambda1, cfg.lambda2, cfg.window, cfg.jobs), (0.5, 1.2, 7, 2));
        let cfg = RunConfig::resolve(Some(&path), &flags, Some("6")).unwrap();
        assert_eq!(cfg.jobs, 6);
        assert!(RunConfig::resolve(None, &flags, Some("zero")).is_err());
    }

    #[test]
    fn unknown_keys_and_bad_values_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.toml");
        std::fs::write(&path, "lambda = 0.5\n").unwrap();
        assert!(RunConfig::resolve(Some(&path), &ConfigLayer::default(), None).is_err());
        let flags = ConfigLayer {
            window: Some(4),
            ..Default::default()
        };
        assert!(RunConfig::resolve(None, &flags, None).is_err());
    }

    #[test]
    fn identity_weights_select_mean_backbone() {
        let flags = ConfigLayer {
            identity_weights: Some(true),
            ..Default::default()
        };
        let cfg = RunConfig::resolve(None, &flags, None).unwrap();
        assert_eq!(cfg.backbone, BackboneKind::Mean);
        let flags = ConfigLayer {
            identity_weights: Some(true),
            backbone: Some(BackboneKind::Seeded),
            ..Default::default()
        };
        assert_eq!(RunConfig::resolve(None, &flags, None).unwrap().backbone, BackboneKind::Seeded);
    }
}
