//! Subcommand implementations.

use std::fs;
use std::path::{Path, PathBuf};

use crate::config::RunConfig;
use crate::error::{AppError, AppResult};

pub mod bench;
pub mod demo;
pub mod denoise;
pub mod flow;
pub mod verify;

/// A loaded configuration together with its output directory.
#[derive(Debug, Clone)]
pub struct Run {
    pub config: RunConfig,
    pub out: PathBuf,
}

impl Run {
    /// Applies the `--seed` and `--out` overrides. The output directory
    /// defaults to `out/<task>`.
    pub fn new(mut config: RunConfig, seed: Option<u64>, out: Option<PathBuf>) -> Self {
        if let Some(s) = seed {
            config.seed = s;
        }
        let out = out.or_else(|| config.output_dir.clone()).unwrap_or_else(|| Path::new("out").join(config.task.name()));
        config.output_dir = Some(out.clone());
        Run { config, out }
    }

    pub fn load(path: &Path, seed: Option<u64>, out: Option<PathBuf>) -> AppResult<Self> {
        Ok(Self::new(RunConfig::load(path)?, seed, out))
    }

    /// Creates the output directory and records the effective configuration
    /// in it.
    pub fn prepare(&self) -> AppResult<()> {
        fs::create_dir_all(&self.out).map_err(|e| AppError::io(&self.out, e))?;
        let p = self.out.join("config.json");
        let text = serde_json::to_string_pretty(&self.config)? + "\n";
        fs::write(&p, text).map_err(|e| AppError::io(&p, e))
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }
}

/// Independent sub-seeds of a run, so that adding a consumer does not shift
/// the others.
pub(crate) mod stream {
    pub const NET: u64 = 0;
    pub const TRAIN: u64 = 1;
    pub const TEST: u64 = 2;
    pub const SHUFFLE: u64 = 3;
    pub const SAMPLE: u64 = 4;
    pub const INPUT: u64 = 5;
}

pub(crate) fn sub_seed(seed: u64, stream: u64) -> u64 {
    iunet_core::rng::SplitMix64::derive(seed, stream).next_u64()
}
