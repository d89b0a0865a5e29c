//! `train-flow`: maximum-likelihood flow on a 2D Gaussian mixture.

use iunet_core::flow::{train_flow, FlowLog, FlowModel, FlowTrainConfig};
use iunet_core::{IUNet, Tensor};
use serde::Serialize;

use super::{stream, sub_seed, Run};
use crate::checkpoint;
use crate::config::{FlowTask, Task};
use crate::error::{AppError, AppResult};
use crate::formats::{write_pgm, Gray};
use crate::table::write_csv;

/// Side length of the sample histogram image.
pub const GRID: usize = 128;

#[derive(Debug, Clone, Serialize)]
pub struct FlowRow {
    pub epoch: usize,
    pub mean_train_nll_bits: f64,
    pub mean_val_nll_bits: f64,
    pub wall_time_s: f64,
    pub config_hash: String,
}

#[derive(Debug, Clone, Serialize)]
struct SampleRow {
    x: f64,
    y: f64,
    config_hash: String,
}

#[derive(Debug, Clone)]
pub struct FlowOutput {
    pub log: FlowLog,
    pub model: FlowModel,
    /// `(x, y)` pairs of every sampled pixel.
    pub points: Vec<[f64; 2]>,
}

impl FlowOutput {
    pub fn sample_mean(&self) -> [f64; 2] {
        let n = self.points.len() as f64;
        [0, 1].map(|c| self.points.iter().map(|p| p[c]).sum::<f64>() / n)
    }
}

fn task(run: &Run) -> AppResult<&FlowTask> {
    match &run.config.task {
        Task::Flow(t) => Ok(t),
        other => Err(AppError::Config(format!("train-flow needs a flow task, the config has {}", other.name()))),
    }
}

fn points(samples: &[Tensor]) -> Vec<[f64; 2]> {
    samples.iter().flat_map(|t| t.channel(0).iter().zip(t.channel(1)).map(|(&x, &y)| [x, y])).collect()
}

/// 2D histogram over `[lo, hi]²`, row 0 at the top (largest y), normalized
/// to the fullest bin.
pub fn histogram(points: &[[f64; 2]], lo: f64, hi: f64, bins: usize) -> Gray {
    let mut counts = vec![0.0f64; bins * bins];
    let scale = bins as f64 / (hi - lo);
    for p in points {
        let col = ((p[0] - lo) * scale).floor();
        let row = ((hi - p[1]) * scale).floor();
        if (0.0..bins as f64).contains(&col) && (0.0..bins as f64).contains(&row) {
            counts[row as usize * bins + col as usize] += 1.0;
        }
    }
    let peak = counts.iter().copied().fold(0.0, f64::max).max(1.0);
    Gray { width: bins, height: bins, pixels: counts.iter().map(|c| c / peak).collect() }
}

/// Trains and writes `metrics.csv`, `checkpoint.iunt`, `samples.csv` and the
/// sample and data histograms `samples.pgm` / `data.pgm`.
pub fn run(run: &Run) -> AppResult<FlowOutput> {
    let t = task(run)?;
    run.prepare()?;
    let seed = run.config.seed;
    let hash = run.config.hash();
    let spatial = &run.config.net.spatial;
    let train = t.mixture.dataset(sub_seed(seed, stream::TRAIN), t.train_samples, spatial)?;
    let val = t.mixture.dataset(sub_seed(seed, stream::TEST), t.val_samples, spatial)?;
    let mut model = FlowModel::new(IUNet::build(&run.config.net, sub_seed(seed, stream::NET))?)?;
    let cfg = FlowTrainConfig { epochs: t.epochs, batch_size: t.batch_size, optimizer: t.optimizer, seed: sub_seed(seed, stream::SHUFFLE) };
    let log = train_flow(&mut model, &train, &val, &cfg)?;
    let rows: Vec<FlowRow> = log
        .epochs
        .iter()
        .map(|e| FlowRow {
            epoch: e.epoch,
            mean_train_nll_bits: e.mean_train_nll_bits,
            mean_val_nll_bits: e.mean_val_nll_bits,
            wall_time_s: e.wall_time_s,
            config_hash: hash.clone(),
        })
        .collect();
    write_csv(&run.path("metrics.csv"), &rows)?;
    checkpoint::save(&model.net, &run.path("checkpoint.iunt"))?;
    if let Some(msg) = &log.aborted {
        return Err(AppError::Failed(format!("training diverged ({msg}); last good parameters saved")));
    }

    let samples = model.sample(t.sample_count, sub_seed(seed, stream::SAMPLE))?;
    let pts = points(&samples);
    let rows: Vec<SampleRow> = pts.iter().map(|p| SampleRow { x: p[0], y: p[1], config_hash: hash.clone() }).collect();
    write_csv(&run.path("samples.csv"), &rows)?;
    let data_pts = points(&train);
    let reach = t.mixture.means.iter().zip(&t.mixture.stds).map(|(m, s)| m[0].abs().max(m[1].abs()) + 4.0 * s).fold(0.0, f64::max);
    write_pgm(&run.path("samples.pgm"), &histogram(&pts, -reach, reach, GRID))?;
    write_pgm(&run.path("data.pgm"), &histogram(&data_pts, -reach, reach, GRID))?;
    Ok(FlowOutput { log, model, points: pts })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn histogram_orientation() {
        let g = histogram(&[[-0.9, 0.9], [-0.9, 0.9], [0.9, -0.9]], -1.0, 1.0, 2);
        assert_eq!(g.pixels, vec![1.0, 0.0, 0.0, 0.5]);
    }
}
