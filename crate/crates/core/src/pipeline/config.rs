use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flowhead::{BevSpec, FlowBinSpec};
use crate::geometry::{uniform_depth_bins, DepthBinSpec};
use crate::io::read_file;
use crate::semhead::{DEFAULT_ALPHA, DEFAULT_BETA, DEFAULT_K};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BinRange {
    pub count: usize,
    pub min: f64,
    pub max: f64,
}

/// Update rule of the toy fit.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Optimizer {
    /// Plain full-batch gradient descent.
    #[default]
    Gd,
    /// Bias-corrected Adam with the usual constants.
    Adam,
}

/// Everything a `gen`, `fit` or `eval` run needs besides the scene.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Scene file, relative to the config file's directory.
    pub scene: PathBuf,
    pub depth_bins: BinRange,
    /// Inter-object points per pixel.
    pub m: usize,
    pub denoise_epochs: u64,
    pub steps_per_epoch: u64,
    /// Sampled points per loss, clamped to the candidate count.
    pub k_samples: usize,
    pub alpha: f64,
    pub beta: f64,
    pub flow_bins: BinRange,
    /// Cost-volume window radius in BEV cells (1 gives 3×3).
    pub window_radius: usize,
    pub bev: BevSpec,
    pub feature_dim: usize,
    pub decoder_hidden: usize,
    pub optimizer: Optimizer,
    pub lr: f64,
    pub steps: usize,
    pub seed: u64,
    pub denoise: bool,
    pub inter_object: bool,
    pub occlusion_kernel: bool,
    pub cost_volume: bool,
    pub out: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            scene: PathBuf::new(),
            depth_bins: BinRange {
                count: 16,
                min: 0.2,
                max: 6.6,
            },
            m: 3,
            denoise_epochs: 6,
            steps_per_epoch: 10,
            k_samples: DEFAULT_K,
            alpha: DEFAULT_ALPHA,
            beta: DEFAULT_BETA,
            flow_bins: BinRange {
                count: 16,
                min: -10.0,
                max: 10.0,
            },
            window_radius: 1,
            bev: BevSpec::default(),
            feature_dim: 8,
            decoder_hidden: 16,
            optimizer: Optimizer::Gd,
            lr: 0.05,
            steps: 200,
            seed: 0,
            denoise: true,
            inter_object: true,
            occlusion_kernel: true,
            cost_volume: true,
            out: None,
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig =
            serde_json::from_str(text).map_err(|e| Error::Format(format!("config file: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Loads a config and resolves its scene path against the file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = String::from_utf8(read_file(path)?)
            .map_err(|_| Error::Format(format!("{} is not UTF-8", path.display())))?;
        let mut cfg = RunConfig::from_json(&text)?;
        if cfg.scene.is_relative() {
            if let Some(dir) = path.parent() {
                cfg.scene = dir.join(&cfg.scene);
            }
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.m == 0 || self.m > self.depth_bins.count {
            return Err(Error::invalid(format!(
                "m = {} must lie in 1..={}",
                self.m, self.depth_bins.count
            )));
        }
        if self.k_samples == 0 {
            return Err(Error::invalid("k_samples must be at least 1"));
        }
        if !(self.alpha >= 0.0 && self.beta >= 0.0) {
            return Err(Error::invalid("alpha and beta must be nonnegative"));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::invalid(format!("learning rate {}", self.lr)));
        }
        if self.feature_dim == 0 || self.decoder_hidden == 0 {
            return Err(Error::invalid("feature and hidden sizes must be positive"));
        }
        if self.steps_per_epoch == 0 {
            return Err(Error::invalid("steps_per_epoch must be positive"));
        }
        self.depth_spec()?;
        self.flow_spec()?;
        Ok(())
    }

    pub fn depth_spec(&self) -> Result<DepthBinSpec> {
        uniform_depth_bins(self.depth_bins.min, self.depth_bins.max, self.depth_bins.count)
    }

    pub fn flow_spec(&self) -> Result<FlowBinSpec> {
        FlowBinSpec::uniform(self.flow_bins.min, self.flow_bins.max, self.flow_bins.count)
    }

    /// Denoising horizon in steps; zero when denoising is off.
    pub fn denoise_steps(&self) -> u64 {
        if self.denoise {
            self.denoise_epochs * self.steps_per_epoch
        } else {
            0
        }
    }
}
