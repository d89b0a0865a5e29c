//! `bench-memory`: stored activations and runtime of both backward engines.

use std::time::Instant;

use iunet_core::iunet::TapeMode;
use iunet_core::rng::SplitMix64;
use iunet_core::{IUNet, Tensor};
use serde::Serialize;

use super::{stream, sub_seed, Run};
use crate::config::{BenchTask, Task};
use crate::error::{AppError, AppResult};
use crate::table::write_csv;

/// Each timing is the minimum over this many runs.
pub const REPEATS: usize = 5;

#[derive(Debug, Clone, Serialize)]
pub struct BenchRow {
    pub delta: usize,
    pub peak_me_bytes: usize,
    pub peak_conv_bytes: usize,
    pub ratio: f64,
    pub time_me_s: f64,
    pub time_conv_s: f64,
    pub me_tensor_count: usize,
    pub conv_tensor_count: usize,
    pub param_bytes: usize,
    /// Process high-water mark from `/proc/self/status`, when available.
    /// Allocator-dependent and cumulative over the run; informational only.
    pub rss_peak_kib: Option<u64>,
    pub config_hash: String,
}

fn task(run: &Run) -> AppResult<&BenchTask> {
    match &run.config.task {
        Task::BenchMemory(t) => Ok(t),
        other => Err(AppError::Config(format!("bench-memory needs a bench-memory task, the config has {}", other.name()))),
    }
}

fn rss_peak_kib() -> Option<u64> {
    let status = std::fs::read_to_string("/proc/self/status").ok()?;
    let line = status.lines().find(|l| l.starts_with("VmHWM:"))?;
    line.split_whitespace().nth(1)?.parse().ok()
}

fn min_time(mut f: impl FnMut() -> AppResult<()>) -> AppResult<f64> {
    let mut best = f64::INFINITY;
    for _ in 0..REPEATS {
        let t = Instant::now();
        f()?;
        best = best.min(t.elapsed().as_secs_f64());
    }
    Ok(best)
}

/// Checks the depth trends; `Err` names the first violated one.
pub fn check(rows: &[BenchRow]) -> Result<(), String> {
    if let Some(w) = rows.windows(2).find(|w| w[1].ratio >= w[0].ratio) {
        return Err(format!("ratio did not decrease from δ={} ({:.4}) to δ={} ({:.4})", w[0].delta, w[0].ratio, w[1].delta, w[1].ratio));
    }
    if let Some(r) = rows.iter().find(|r| r.me_tensor_count != rows[0].me_tensor_count || r.peak_me_bytes != rows[0].peak_me_bytes) {
        return Err(format!("reversible storage changed with depth at δ={}", r.delta));
    }
    if let Some(w) = rows.windows(2).find(|w| w[1].peak_conv_bytes <= w[0].peak_conv_bytes) {
        return Err(format!("conventional storage did not grow from δ={} to δ={}", w[0].delta, w[1].delta));
    }
    if let Some(r) = rows.iter().find(|r| r.time_me_s <= r.time_conv_s) {
        return Err(format!("reversible backward not slower at δ={} ({:.4}s vs {:.4}s)", r.delta, r.time_me_s, r.time_conv_s));
    }
    Ok(())
}

/// Runs one reversible and one conventional backward per depth on the same
/// network and input, writes `bench.csv` and checks the trends.
pub fn run(run: &Run) -> AppResult<Vec<BenchRow>> {
    let t = task(run)?;
    run.prepare()?;
    let seed = run.config.seed;
    let hash = run.config.hash();
    let mut rows = Vec::with_capacity(t.depths.len());
    for &delta in &t.depths {
        let mut cfg = run.config.net.clone();
        cfg.couplings = delta;
        let mut net = IUNet::build(&cfg, sub_seed(seed, stream::NET))?;
        // Nonzero γ so that no coupling is skipped as the identity.
        let mut rng = SplitMix64::new(sub_seed(seed, stream::INPUT));
        for p in net.params_mut() {
            rng.fill_normal(p, 0.1);
        }
        let shape = net.io_shape();
        let mut x = Tensor::zeros(shape[0], &shape[1..]);
        rng.fill_normal(x.as_mut_slice(), 1.0);
        let g = x.clone();

        let me = net.backward_memeff(&x, &g)?;
        let pass = net.forward(&x, TapeMode::Record)?;
        let conv = net.backward_conventional(&pass, &g)?;
        drop(pass);
        let time_me_s = min_time(|| net.backward_memeff(&x, &g).map(drop).map_err(Into::into))?;
        let time_conv_s = min_time(|| {
            let pass = net.forward(&x, TapeMode::Record)?;
            net.backward_conventional(&pass, &g).map(drop).map_err(Into::into)
        })?;
        rows.push(BenchRow {
            delta,
            peak_me_bytes: me.peak_stored_activation_bytes,
            peak_conv_bytes: conv.peak_stored_activation_bytes,
            ratio: me.peak_stored_activation_bytes as f64 / conv.peak_stored_activation_bytes as f64,
            time_me_s,
            time_conv_s,
            me_tensor_count: me.stored_tensor_count,
            conv_tensor_count: conv.stored_tensor_count,
            param_bytes: net.param_bytes(),
            rss_peak_kib: rss_peak_kib(),
            config_hash: hash.clone(),
        });
    }
    write_csv(&run.path("bench.csv"), &rows)?;
    check(&rows).map_err(AppError::Failed)?;
    Ok(rows)
}
