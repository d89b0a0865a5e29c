//! `downsample-demo`: invertible downsampling of a grayscale image.

use std::fs;
use std::path::{Path, PathBuf};

use iunet_core::resample::Mode;
use iunet_core::rng::SplitMix64;
use iunet_core::{ResampleOp, StrideSpec, Tensor};
use serde::Serialize;

use crate::error::{AppError, AppResult};
use crate::formats::{read_pgm, tile_channels, write_pgm, write_tensor, Gray};
use crate::table::{config_hash, write_csv};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum DemoMode {
    Pixelshuffle,
    Haar,
    Random,
    LearnL1,
}

#[derive(Debug, Clone, Serialize)]
pub struct DemoOptions {
    pub mode: DemoMode,
    pub seed: u64,
    /// Gradient steps of `learn-l1`.
    pub steps: usize,
    /// Initial step length of `learn-l1`.
    pub lr: f64,
    /// Std of the random θ initialization.
    pub theta_std: f64,
    /// Also write the upsampling of four constant channels.
    pub inverse_constant: bool,
}

impl Default for DemoOptions {
    fn default() -> Self {
        DemoOptions { mode: DemoMode::Pixelshuffle, seed: 0, steps: 200, lr: 0.05, theta_std: 1.0, inverse_constant: false }
    }
}

/// One `learn-l1` iterate.
#[derive(Debug, Clone, Serialize)]
pub struct L1Row {
    pub step: usize,
    pub l1: f64,
    pub orthogonality_defect: f64,
    pub step_length: f64,
    pub config_hash: String,
}

#[derive(Debug, Clone)]
pub struct DemoOutput {
    pub downsampled: Tensor,
    pub trajectory: Vec<L1Row>,
    pub files: Vec<PathBuf>,
}

fn l1(t: &Tensor) -> f64 {
    t.as_slice().iter().map(|v| v.abs()).sum()
}

/// Descent on `‖D_θ x‖₁` with subgradient `sign(D_θ x)`. A step is taken only
/// if it lowers the objective; otherwise the step length is halved.
fn learn_l1(op: &mut ResampleOp, x: &Tensor, opts: &DemoOptions, hash: &str) -> AppResult<Vec<L1Row>> {
    let mut cur = l1(&op.down_forward(x)?);
    let mut step = opts.lr;
    let mut rows = vec![L1Row { step: 0, l1: cur, orthogonality_defect: op.orthogonality_defect(), step_length: 0.0, config_hash: hash.into() }];
    for k in 1..=opts.steps {
        let y = op.down_forward(x)?;
        let sign = Tensor::from_shape_vec(&y.shape(), y.as_slice().iter().map(|&v| if v == 0.0 { 0.0 } else { v.signum() }).collect())?;
        let grad = op.grad_theta(x, &sign)?;
        let gnorm = grad.iter().map(|g| g.frobenius_norm().powi(2)).sum::<f64>().sqrt();
        if gnorm == 0.0 {
            break;
        }
        let start = op.thetas().to_vec();
        loop {
            for (t, (g, t0)) in op.thetas_mut().iter_mut().zip(grad.iter().zip(&start)) {
                *t = t0.sub(&g.scale(step / gnorm))?;
            }
            let next = l1(&op.down_forward(x)?);
            if next < cur {
                cur = next;
                break;
            }
            step *= 0.5;
            if step < 1e-12 {
                op.thetas_mut().clone_from_slice(&start);
                return Ok(rows);
            }
        }
        rows.push(L1Row { step: k, l1: cur, orthogonality_defect: op.orthogonality_defect(), step_length: step, config_hash: hash.into() });
        step = (step * 1.5).min(opts.lr);
    }
    Ok(rows)
}

/// Downsamples `image` (one channel) with the selected operator and writes
/// the four channels as a 2×2 tiled PGM plus the raw tensor.
pub fn run(image: &Path, out: &Path, opts: &DemoOptions) -> AppResult<DemoOutput> {
    let img = read_pgm(image)?;
    run_on(&img, out, opts)
}

pub fn run_on(img: &Gray, out: &Path, opts: &DemoOptions) -> AppResult<DemoOutput> {
    if !img.width.is_multiple_of(2) || !img.height.is_multiple_of(2) || img.width == 0 || img.height == 0 {
        return Err(AppError::Config(format!("shape error: image extents {}x{} are not divisible by 2", img.width, img.height)));
    }
    if !(opts.lr > 0.0 && opts.theta_std >= 0.0) {
        return Err(AppError::Config("lr must be positive and theta_std non-negative".into()));
    }
    fs::create_dir_all(out).map_err(|e| AppError::io(out, e))?;
    let stride = StrideSpec::uniform(2, 2)?;
    let mut rng = SplitMix64::new(opts.seed);
    let mut op = match opts.mode {
        DemoMode::Pixelshuffle => ResampleOp::pixel_shuffle(stride, 1, Mode::Down),
        DemoMode::Haar => ResampleOp::haar(1, Mode::Down),
        DemoMode::Random | DemoMode::LearnL1 => ResampleOp::random(stride, 1, true, opts.theta_std, Mode::Down, &mut rng),
    };
    let x = img.to_tensor();
    let hash = config_hash(opts);
    let mut files = Vec::new();
    let mut trajectory = Vec::new();
    if opts.mode == DemoMode::LearnL1 {
        trajectory = learn_l1(&mut op, &x, opts, &hash)?;
        let p = out.join("l1_trajectory.csv");
        write_csv(&p, &trajectory)?;
        files.push(p);
    }
    let y = op.down_forward(&x)?;
    let lo = y.as_slice().iter().copied().fold(0.0, f64::min);
    let hi = y.as_slice().iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let tiles = out.join("downsampled.pgm");
    write_pgm(&tiles, &tile_channels(&y, 2, lo, hi)?)?;
    let raw = out.join("downsampled.bin");
    write_tensor(&raw, &y)?;
    files.extend([tiles, raw]);
    if opts.inverse_constant {
        // Four different constant channels: any diversity between them shows
        // up as a period-2 pattern after upsampling.
        let (h, w) = (img.height / 2, img.width / 2);
        let mut c = Tensor::zeros(4, &[h, w]);
        for (k, v) in [0.2, 0.9, 0.5, 0.0].into_iter().enumerate() {
            c.channel_mut(k).fill(v);
        }
        let up = op.up_forward(&c)?;
        let lo = up.as_slice().iter().copied().fold(f64::INFINITY, f64::min);
        let hi = up.as_slice().iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let p = out.join("inverse_constant.pgm");
        write_pgm(&p, &Gray::from_tensor(&up, lo, hi)?)?;
        files.push(p);
    }
    Ok(DemoOutput { downsampled: y, trajectory, files })
}
