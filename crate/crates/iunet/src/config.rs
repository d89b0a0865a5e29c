//! Experiment configuration files.

use std::fs;
use std::path::{Path, PathBuf};

use iunet_core::data::{FoamSpec, GaussianMixture2D};
use iunet_core::optim::AdamConfig;
use iunet_core::IUNetConfig;
use serde::{Deserialize, Serialize};

use crate::error::{AppError, AppResult};
use crate::table::config_hash;

/// One experiment: network, task and seed. Unknown keys are rejected.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub seed: u64,
    /// Where outputs go; `--out` takes precedence.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<PathBuf>,
    pub net: IUNetConfig,
    pub task: Task,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Task {
    Denoise(DenoiseTask),
    Flow(FlowTask),
    BenchMemory(BenchTask),
}

impl Task {
    pub fn name(&self) -> &'static str {
        match self {
            Task::Denoise(_) => "denoise",
            Task::Flow(_) => "flow",
            Task::BenchMemory(_) => "bench-memory",
        }
    }
}

/// Foam phantom denoising.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DenoiseTask {
    pub phantom: FoamSpec,
    pub train_samples: usize,
    pub test_samples: usize,
    pub epochs: usize,
    pub batch_size: usize,
    #[serde(default)]
    pub optimizer: AdamConfig,
}

/// Maximum-likelihood flow on a 2D Gaussian mixture. Every pixel of a data
/// tensor is an independent draw, channel 0 holding x and channel 1 y.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FlowTask {
    pub mixture: GaussianMixture2D,
    pub train_samples: usize,
    pub val_samples: usize,
    pub epochs: usize,
    pub batch_size: usize,
    #[serde(default)]
    pub optimizer: AdamConfig,
    /// Number of tensors drawn for the sample grid.
    pub sample_count: usize,
}

/// Memory and runtime of both backward engines across coupling depths δ.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchTask {
    pub depths: Vec<usize>,
}

fn bad(msg: impl Into<String>) -> AppError {
    AppError::Config(msg.into())
}

impl RunConfig {
    pub fn from_json(text: &str) -> AppResult<Self> {
        let cfg: RunConfig = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> AppResult<Self> {
        let text = fs::read_to_string(path).map_err(|e| bad(format!("{}: {e}", path.display())))?;
        Self::from_json(&text).map_err(|e| match e {
            AppError::Json(j) => bad(format!("{}: {j}", path.display())),
            AppError::Config(m) => bad(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    /// Checks the network and task parameters and their compatibility.
    pub fn validate(&self) -> AppResult<()> {
        let net = &self.net;
        net.ladder().map_err(|e| bad(format!("net: {e}")))?;
        let data_channels = net.data_channels.unwrap_or(net.channels);
        let opt = |o: &AdamConfig| o.validate().map_err(|e| bad(format!("task.optimizer: {e}")));
        match &self.task {
            Task::Denoise(t) => {
                if net.dim != 2 || net.spatial != [t.phantom.size, t.phantom.size] {
                    return Err(bad(format!("net.spatial {:?} must equal the phantom extent [{1}, {1}]", net.spatial, t.phantom.size)));
                }
                if data_channels != 1 {
                    return Err(bad("denoising works on single-channel images: set net.data_channels to 1 or net.channels to 1"));
                }
                if t.train_samples == 0 || t.test_samples == 0 || t.batch_size == 0 {
                    return Err(bad("train_samples, test_samples and batch_size must be positive"));
                }
                if !(t.phantom.noise_sigma >= 0.0 && t.phantom.blur_radius >= 0.0) {
                    return Err(bad("noise_sigma and blur_radius must be non-negative"));
                }
                opt(&t.optimizer)
            }
            Task::Flow(t) => {
                if net.data_channels.is_some() {
                    return Err(bad("a flow needs the invertible core only: remove net.data_channels"));
                }
                if net.channels != 2 {
                    return Err(bad(format!("mixture data has 2 channels, net.channels is {}", net.channels)));
                }
                t.mixture.validate().map_err(|e| bad(format!("task.mixture: {e}")))?;
                if t.train_samples == 0 || t.val_samples == 0 || t.batch_size == 0 || t.sample_count == 0 {
                    return Err(bad("train_samples, val_samples, batch_size and sample_count must be positive"));
                }
                opt(&t.optimizer)
            }
            Task::BenchMemory(t) => {
                if t.depths.is_empty() || t.depths[0] == 0 || t.depths.windows(2).any(|w| w[0] >= w[1]) {
                    return Err(bad(format!("depths {:?} must be positive and strictly ascending", t.depths)));
                }
                Ok(())
            }
        }
    }

    /// Hash of everything that determines results (the output location
    /// excluded).
    pub fn hash(&self) -> String {
        config_hash(&RunConfig { output_dir: None, ..self.clone() })
    }
}
