//! `train-denoise`: foam phantom denoising with reversible backpropagation.

use iunet_core::data::{foam_dataset, psnr, NoisySample};
use iunet_core::iunet::GradAccumulator;
use iunet_core::rng::SplitMix64;
use iunet_core::{IUNet, Tensor};
use serde::Serialize;

use super::{stream, sub_seed, Run};
use crate::checkpoint;
use crate::config::{DenoiseTask, Task};
use crate::error::{AppError, AppResult};
use crate::formats::{write_pgm, Gray};
use crate::table::write_csv;

/// Per-epoch metrics. Epoch 0 is the untrained network. Training columns
/// average over the passes of the epoch (before each update).
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DenoiseRow {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_psnr_db: f64,
    pub test_loss: f64,
    pub test_psnr_db: f64,
    pub test_psnr_input_db: f64,
    pub config_hash: String,
}

#[derive(Debug, Clone)]
pub struct DenoiseOutput {
    pub rows: Vec<DenoiseRow>,
    pub net: IUNet,
}

fn task(run: &Run) -> AppResult<&DenoiseTask> {
    match &run.config.task {
        Task::Denoise(t) => Ok(t),
        other => Err(AppError::Config(format!("train-denoise needs a denoise task, the config has {}", other.name()))),
    }
}

/// Mean of `‖f(x) − clean‖² / (2n)`.
fn loss(out: &Tensor, clean: &Tensor) -> f64 {
    let d = out.sub(clean);
    d.dot(&d) / (2.0 * d.len() as f64)
}

fn evaluate(net: &IUNet, data: &[NoisySample]) -> AppResult<(f64, f64, f64)> {
    let (mut l, mut p, mut p_in) = (0.0, 0.0, 0.0);
    for s in data {
        let (y, _) = net.apply(&s.degraded)?;
        l += loss(&y, &s.clean);
        p += psnr(&y, &s.clean, 1.0)?.db();
        p_in += psnr(&s.degraded, &s.clean, 1.0)?.db();
    }
    let n = data.len() as f64;
    Ok((l / n, p / n, p_in / n))
}

/// Trains and writes `metrics.csv`, `checkpoint.iunt` and `test_sample.pgm`
/// (clean, degraded and restored first test image side by side).
pub fn run(run: &Run) -> AppResult<DenoiseOutput> {
    let t = task(run)?;
    run.prepare()?;
    let seed = run.config.seed;
    let hash = run.config.hash();
    let train = foam_dataset(sub_seed(seed, stream::TRAIN), t.train_samples, &t.phantom)?;
    let test = foam_dataset(sub_seed(seed, stream::TEST), t.test_samples, &t.phantom)?;
    let mut net = IUNet::build(&run.config.net, sub_seed(seed, stream::NET))?;
    let mut opt = net.adam(t.optimizer)?;
    let mut rng = SplitMix64::new(sub_seed(seed, stream::SHUFFLE));

    let (tl, tp, tp_in) = evaluate(&net, &test)?;
    let (l0, p0, _) = evaluate(&net, &train)?;
    let row = |epoch, train_loss, train_psnr_db, (test_loss, test_psnr_db): (f64, f64)| DenoiseRow {
        epoch,
        train_loss,
        train_psnr_db,
        test_loss,
        test_psnr_db,
        test_psnr_input_db: tp_in,
        config_hash: hash.clone(),
    };
    let mut rows = vec![row(0, l0, p0, (tl, tp))];
    let n = (t.phantom.size * t.phantom.size) as f64;
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut acc = GradAccumulator::new(&net);
    let mut failure = None;
    'epochs: for epoch in 1..=t.epochs {
        let good = net.clone();
        for i in (1..order.len()).rev() {
            order.swap(i, rng.below(i as u64 + 1) as usize);
        }
        let (mut l, mut p) = (0.0, 0.0);
        for batch in order.chunks(t.batch_size) {
            for &k in batch {
                let s = &train[k];
                let report = net.backward_memeff_with(&s.degraded, |y, _| Ok((y.sub(&s.clean).scale(1.0 / n), 0.0)));
                let r = match report {
                    Ok(r) => r,
                    Err(e) => {
                        failure = Some(format!("epoch {epoch}: {e}"));
                        net = good;
                        break 'epochs;
                    }
                };
                l += loss(&r.output, &s.clean);
                p += psnr(&r.output, &s.clean, 1.0)?.db();
                acc.add(&r)?;
            }
            net.adam_step(&mut opt, &acc.take_mean())?;
        }
        let l = l / train.len() as f64;
        let evaluated = evaluate(&net, &test);
        match evaluated {
            Ok((tl, tp, _)) if l.is_finite() && tl.is_finite() => rows.push(row(epoch, l, p / train.len() as f64, (tl, tp))),
            Ok((tl, ..)) => {
                failure = Some(format!("epoch {epoch}: loss became non-finite (train {l}, test {tl})"));
                net = good;
                break;
            }
            Err(e) => {
                failure = Some(format!("epoch {epoch}: {e}"));
                net = good;
                break;
            }
        }
    }
    write_csv(&run.path("metrics.csv"), &rows)?;
    checkpoint::save(&net, &run.path("checkpoint.iunt"))?;
    if let Some(s) = test.first() {
        let (y, _) = net.apply(&s.degraded)?;
        let strip = Tensor::concat(&[&s.clean, &s.degraded, &y])?;
        let (h, w) = (t.phantom.size, t.phantom.size);
        let mut img = Gray { width: 3 * w, height: h, pixels: vec![0.0; 3 * w * h] };
        for k in 0..3 {
            let ch = strip.channel(k);
            for i in 0..h {
                for j in 0..w {
                    img.pixels[i * 3 * w + k * w + j] = ch[i * w + j].clamp(0.0, 1.0);
                }
            }
        }
        write_pgm(&run.path("test_sample.pgm"), &img)?;
    }
    match failure {
        Some(msg) => Err(AppError::Failed(format!("training diverged ({msg}); last good parameters saved"))),
        None => Ok(DenoiseOutput { rows, net }),
    }
}
