//! The invertible U-Net.
//!
//! The network is executed as a flat chain of invertible steps acting on a
//! current activation plus a stack of skip tensors:
//!
//! ```text
//! left:  Φᴸ₁ → split₁ → D₁ → Φᴸ₂ → split₂ → D₂ → … → Φᴸₘ
//! right: Φᴿₘ → U₂ → concat₂ → Φᴿ₂ → U₁ → concat₁ → Φᴿ₁
//! ```
//!
//! `split` pushes the skip part `cᵢ`, `concat` pops it. Every step is
//! invertible given the stack, which is what the reversible engine relies on.
//! Optional non-invertible 3^d convolutions change the channel count before
//! and after the invertible core.

use alloc::boxed::Box;
use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::time::Duration;

use crate::error::{config_err, shape_err, Error, Result};
use crate::layers::{concat, split, CouplingCache, CouplingKind, CouplingLayer, Fraction, NormScheme, SubnetGrads, AFFINE_CLAMP, LEAKY_SLOPE};
use crate::linalg::Matrix;
use crate::math;
use crate::optim::{Adam, AdamConfig};
use crate::resample::{Mode, ResampleOp, THETA_INIT_STD};
use crate::rng::SplitMix64;
use crate::tensor::{same_conv3, same_conv3_backward, Conv3Weight, StrideSpec, Tensor};
use crate::time::Stopwatch;

/// Relative round-trip error above which a reconstructed activation is
/// rejected by the reversible engine.
pub const RECONSTRUCTION_TOL: f64 = 1e-4;

#[cfg(feature = "serde")]
mod defaults {
    use super::*;
    pub fn coupling() -> CouplingKind {
        CouplingKind::Additive
    }
    pub fn norm() -> NormScheme {
        NormScheme::Layer
    }
    pub fn theta_std() -> f64 {
        THETA_INIT_STD
    }
    pub fn slope() -> f64 {
        LEAKY_SLOPE
    }
    pub fn clamp() -> f64 {
        AFFINE_CLAMP
    }
}

/// Architecture of an [`IUNet`].
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(deny_unknown_fields))]
pub struct IUNetConfig {
    /// Spatial dimensionality d ∈ {1, 2, 3}.
    pub dim: usize,
    /// Input spatial extents.
    pub spatial: Vec<usize>,
    /// Channels entering the invertible core (C₁).
    pub channels: usize,
    /// Channels of the data. When set, non-invertible 3^d convolutions map
    /// `data_channels → channels` before and `channels → data_channels`
    /// after the invertible core.
    #[cfg_attr(feature = "serde", serde(default))]
    pub data_channels: Option<usize>,
    /// Number of scales m.
    pub scales: usize,
    /// Stride of each of the m − 1 resampling steps.
    pub strides: Vec<StrideSpec>,
    /// Split fraction λᵢ of each of the m − 1 scale transitions.
    pub split_fractions: Vec<Fraction>,
    /// Coupling layers per Φ block (δ).
    pub couplings: usize,
    #[cfg_attr(feature = "serde", serde(default = "defaults::coupling"))]
    pub coupling: CouplingKind,
    #[cfg_attr(feature = "serde", serde(default = "defaults::norm"))]
    pub norm: NormScheme,
    /// One θ per resampler instead of one per channel.
    #[cfg_attr(feature = "serde", serde(default))]
    pub share_theta: bool,
    /// Downsample all channels first and split afterwards.
    #[cfg_attr(feature = "serde", serde(default))]
    pub downsample_first: bool,
    #[cfg_attr(feature = "serde", serde(default = "defaults::theta_std"))]
    pub theta_init_std: f64,
    /// Subnet conv init std; `None` means `1/sqrt(fan_in)`.
    #[cfg_attr(feature = "serde", serde(default))]
    pub conv_init_std: Option<f64>,
    #[cfg_attr(feature = "serde", serde(default = "defaults::slope"))]
    pub leaky_slope: f64,
    #[cfg_attr(feature = "serde", serde(default = "defaults::clamp"))]
    pub affine_clamp: f64,
}

impl IUNetConfig {
    /// Same stride and split fraction at every scale, defaults elsewhere.
    pub fn uniform(spatial: &[usize], channels: usize, scales: usize, stride: usize, fraction: Fraction, couplings: usize) -> Result<Self> {
        let dim = spatial.len();
        let s = StrideSpec::uniform(dim, stride)?;
        Ok(IUNetConfig {
            dim,
            spatial: spatial.to_vec(),
            channels,
            data_channels: None,
            scales,
            strides: vec![s; scales.saturating_sub(1)],
            split_fractions: vec![fraction; scales.saturating_sub(1)],
            couplings,
            coupling: CouplingKind::Additive,
            norm: NormScheme::Layer,
            share_theta: false,
            downsample_first: false,
            theta_init_std: THETA_INIT_STD,
            conv_init_std: None,
            leaky_slope: LEAKY_SLOPE,
            affine_clamp: AFFINE_CLAMP,
        })
    }

    pub fn with_coupling(mut self, kind: CouplingKind) -> Self {
        self.coupling = kind;
        self
    }

    /// Checks every structural constraint and returns the per-scale shapes.
    pub fn ladder(&self) -> Result<Ladder> {
        if !(1..=3).contains(&self.dim) {
            return Err(config_err!("spatial dimensionality must be 1, 2 or 3, got {}", self.dim));
        }
        if self.spatial.len() != self.dim || self.spatial.contains(&0) {
            return Err(config_err!("spatial extents {:?} do not match d = {}", self.spatial, self.dim));
        }
        if self.scales == 0 {
            return Err(config_err!("at least one scale is required"));
        }
        let t = self.scales - 1;
        if self.strides.len() != t || self.split_fractions.len() != t {
            return Err(config_err!(
                "{} scales need {t} strides and split fractions, got {} and {}",
                self.scales,
                self.strides.len(),
                self.split_fractions.len()
            ));
        }
        if let Some(k) = self.data_channels {
            if k == 0 {
                return Err(config_err!("data_channels must be positive"));
            }
        }
        if !(self.leaky_slope > 0.0) || !(self.affine_clamp > 0.0) || !(self.theta_init_std >= 0.0) {
            return Err(config_err!("leaky slope, clamp and init std must be positive"));
        }
        let mut channels = vec![self.channels];
        let mut spatial = vec![self.spatial.clone()];
        let mut keep = Vec::with_capacity(t);
        let mut resample_channels = Vec::with_capacity(t);
        for i in 0..t {
            let (c, n) = (channels[i], &spatial[i]);
            let s = &self.strides[i];
            if s.dim() != self.dim {
                return Err(config_err!("scale {}: {}-d stride in a {}-d network", i + 1, s.dim(), self.dim));
            }
            if n.iter().zip(s.extents()).any(|(a, b)| a % b != 0) {
                return Err(config_err!("scale {}: extents {n:?} not divisible by strides {:?}", i + 1, s.extents()));
            }
            let lambda = self.split_fractions[i];
            let sigma = s.multiplier();
            let (k, next, rc) = if self.downsample_first {
                let k = lambda.of(c * sigma).map_err(|e| config_err!("scale {}: {e}", i + 1))?;
                (k, k, c)
            } else {
                let k = lambda.of(c).map_err(|e| config_err!("scale {}: {e}", i + 1))?;
                (k, k * sigma, k)
            };
            keep.push(k);
            resample_channels.push(rc);
            channels.push(next);
            spatial.push(n.iter().zip(s.extents()).map(|(a, b)| a / b).collect());
        }
        for (i, &c) in channels.iter().enumerate() {
            if c < 2 || (self.couplings > 0 && c % 2 != 0) {
                return Err(config_err!("scale {}: {c} channels, coupling blocks need an even count ≥ 2", i + 1));
            }
            if self.couplings > 0 {
                let h = c / 2;
                let c_out = match self.coupling {
                    CouplingKind::Additive => h,
                    CouplingKind::Affine => 2 * h,
                };
                self.norm.group_size(c_out).map_err(|e| config_err!("scale {}: {e}", i + 1))?;
            }
        }
        Ok(Ladder { channels, spatial, keep, resample_channels })
    }
}

/// Per-scale shapes implied by a valid configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct Ladder {
    /// Channels Cᵢ entering Φᴸᵢ.
    pub channels: Vec<usize>,
    /// Spatial extents at scale i.
    pub spatial: Vec<Vec<usize>>,
    /// Channels sent deeper at each transition.
    pub keep: Vec<usize>,
    /// Channels on the high-resolution side of each resampler.
    pub resample_channels: Vec<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Side {
    Left,
    Right,
}

/// One link of the invertible chain.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Step {
    Coupling { side: Side, scale: usize, layer: usize },
    Split(usize),
    Down(usize),
    Up(usize),
    Concat(usize),
}

impl Step {
    fn name(&self) -> String {
        match *self {
            Step::Coupling { side: Side::Left, scale, layer } => format!("left[{scale}].coupling[{layer}]"),
            Step::Coupling { side: Side::Right, scale, layer } => format!("right[{scale}].coupling[{layer}]"),
            Step::Split(i) => format!("split[{i}]"),
            Step::Down(i) => format!("down[{i}]"),
            Step::Up(i) => format!("up[{i}]"),
            Step::Concat(i) => format!("concat[{i}]"),
        }
    }
}

/// An assembled invertible U-Net with all its parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct IUNet {
    cfg: IUNetConfig,
    ladder: Ladder,
    left: Vec<Vec<CouplingLayer>>,
    right: Vec<Vec<CouplingLayer>>,
    down: Vec<ResampleOp>,
    up: Vec<ResampleOp>,
    expand_in: Option<Conv3Weight>,
    expand_out: Option<Conv3Weight>,
}

/// Shape and name of one parameter array.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
}

/// A named gradient (or parameter) array.
#[derive(Debug, Clone, PartialEq)]
pub struct NamedArray {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

/// Gradients and activation-memory accounting of one backward pass.
#[derive(Debug, Clone)]
pub struct GradReport {
    /// One entry per parameter array, in [`IUNet::param_specs`] order.
    pub grads: Vec<NamedArray>,
    /// Network output of the forward pass the gradients belong to.
    pub output: Tensor,
    pub logdet: f64,
    /// Peak bytes of activations held for the backward pass (parameters
    /// excluded).
    pub peak_stored_activation_bytes: usize,
    /// Peak number of activation tensors held at once.
    pub stored_tensor_count: usize,
    pub wall_time: Duration,
}

impl GradReport {
    pub fn flat(&self) -> Vec<f64> {
        self.grads.iter().flat_map(|g| g.data.iter().copied()).collect()
    }

    pub fn get(&self, name: &str) -> Option<&NamedArray> {
        self.grads.iter().find(|g| g.name == name)
    }
}

/// Whether a forward pass records the activations conventional backprop needs.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TapeMode {
    None,
    Record,
}

/// Result of [`IUNet::forward`].
#[derive(Debug, Clone)]
pub struct ForwardPass {
    pub output: Tensor,
    pub logdet: f64,
    pub tape: Option<Tape>,
}

/// Activations stored by a recording forward pass.
#[derive(Debug, Clone)]
pub struct Tape {
    steps: usize,
    entries: Vec<TapeEntry>,
    input: Tensor,
    core_output: Tensor,
    mem: MemTracker,
    forward_time: Duration,
}

#[derive(Debug, Clone)]
enum TapeEntry {
    Coupling(Box<CouplingCache>),
    Resample(Tensor),
    Structural,
}

/// Running and peak totals of live activation storage.
#[derive(Debug, Clone, Default)]
struct MemTracker {
    bytes: usize,
    count: usize,
    peak_bytes: usize,
    peak_count: usize,
}

impl MemTracker {
    fn hold(&mut self, bytes: usize, count: usize) {
        self.bytes += bytes;
        self.count += count;
        self.peak_bytes = self.peak_bytes.max(self.bytes);
        self.peak_count = self.peak_count.max(self.count);
    }
    fn release(&mut self, bytes: usize, count: usize) {
        self.bytes -= bytes;
        self.count -= count;
    }
    fn hold_t(&mut self, t: &Tensor) {
        self.hold(t.nbytes(), 1)
    }
    fn release_t(&mut self, t: &Tensor) {
        self.release(t.nbytes(), 1)
    }
}

/// Gradient storage mirroring the parameter layout.
#[derive(Debug, Clone)]
struct NetGrads {
    left: Vec<Vec<Option<SubnetGrads>>>,
    right: Vec<Vec<Option<SubnetGrads>>>,
    down: Vec<Vec<Matrix>>,
    up: Vec<Vec<Matrix>>,
    expand_in: Option<Conv3Weight>,
    expand_out: Option<Conv3Weight>,
}

impl IUNet {
    /// Builds a network with deterministic initialization from `seed`.
    ///
    /// Normalization gains start at zero so every coupling layer, and with
    /// each up operator initialized to the adjoint of its down operator the
    /// whole invertible core, is the identity map.
    pub fn build(cfg: &IUNetConfig, seed: u64) -> Result<Self> {
        let ladder = cfg.ladder()?;
        let mut rng = SplitMix64::new(seed);
        let m = cfg.scales;
        let make_block = |c: usize, rng: &mut SplitMix64| -> Result<Vec<CouplingLayer>> {
            (0..cfg.couplings)
                .map(|j| {
                    let fan_in = (c / 2) * 3usize.pow(cfg.dim as u32);
                    let std = cfg.conv_init_std.unwrap_or(1.0 / math::sqrt(fan_in as f64));
                    let mut l = CouplingLayer::new(cfg.coupling, c, cfg.dim, cfg.norm, j % 2 == 1, |w| rng.fill_normal(w, std))?;
                    l.subnet.slope = cfg.leaky_slope;
                    l.clamp = cfg.affine_clamp;
                    Ok(l)
                })
                .collect()
        };
        let mut left = Vec::with_capacity(m);
        let mut right = Vec::with_capacity(m);
        for i in 0..m {
            left.push(make_block(ladder.channels[i], &mut rng)?);
        }
        for i in 0..m {
            right.push(make_block(ladder.channels[i], &mut rng)?);
        }
        let mut down = Vec::with_capacity(m - 1);
        let mut up = Vec::with_capacity(m - 1);
        for i in 0..m - 1 {
            let d = ResampleOp::random(cfg.strides[i].clone(), ladder.resample_channels[i], cfg.share_theta, cfg.theta_init_std, Mode::Down, &mut rng);
            up.push(d.with_mode(Mode::Up));
            down.push(d);
        }
        let (expand_in, expand_out) = match cfg.data_channels {
            None => (None, None),
            Some(k) => {
                let c = cfg.channels;
                let mut win = Conv3Weight::zeros(c, k, cfg.dim);
                let mut wout = Conv3Weight::zeros(k, c, cfg.dim);
                let taps = win.taps();
                let centre = taps / 2;
                for co in 0..c {
                    let ci = co % k;
                    let copies = (0..c).filter(|x| x % k == ci).count() as f64;
                    win.as_mut_slice()[(co * k + ci) * taps + centre] = 1.0;
                    wout.as_mut_slice()[(ci * c + co) * taps + centre] = 1.0 / copies;
                }
                (Some(win), Some(wout))
            }
        };
        Ok(IUNet { cfg: cfg.clone(), ladder, left, right, down, up, expand_in, expand_out })
    }

    pub fn config(&self) -> &IUNetConfig {
        &self.cfg
    }

    pub fn ladder(&self) -> &Ladder {
        &self.ladder
    }

    /// Channel counts C₁, …, Cₘ.
    pub fn channel_ladder(&self) -> &[usize] {
        &self.ladder.channels
    }

    pub fn down_ops(&self) -> &[ResampleOp] {
        &self.down
    }
    pub fn up_ops(&self) -> &[ResampleOp] {
        &self.up
    }
    pub fn down_ops_mut(&mut self) -> &mut [ResampleOp] {
        &mut self.down
    }
    pub fn up_ops_mut(&mut self) -> &mut [ResampleOp] {
        &mut self.up
    }
    pub fn blocks(&self, side: Side) -> &[Vec<CouplingLayer>] {
        match side {
            Side::Left => &self.left,
            Side::Right => &self.right,
        }
    }
    pub fn blocks_mut(&mut self, side: Side) -> &mut [Vec<CouplingLayer>] {
        match side {
            Side::Left => &mut self.left,
            Side::Right => &mut self.right,
        }
    }

    /// Shape `[C, N…]` the network accepts (and returns).
    pub fn io_shape(&self) -> Vec<usize> {
        let mut s = vec![self.cfg.data_channels.unwrap_or(self.cfg.channels)];
        s.extend_from_slice(&self.cfg.spatial);
        s
    }

    /// Whether the whole network is invertible (no expansion convolutions).
    pub fn is_invertible(&self) -> bool {
        self.expand_in.is_none()
    }

    /// The invertible chain in execution order.
    pub fn steps(&self) -> Vec<Step> {
        let m = self.cfg.scales;
        let mut steps = Vec::new();
        for i in 0..m {
            steps.extend((0..self.cfg.couplings).map(|j| Step::Coupling { side: Side::Left, scale: i, layer: j }));
            if i + 1 < m {
                if self.cfg.downsample_first {
                    steps.extend([Step::Down(i), Step::Split(i)]);
                } else {
                    steps.extend([Step::Split(i), Step::Down(i)]);
                }
            }
        }
        for i in (0..m).rev() {
            steps.extend((0..self.cfg.couplings).map(|j| Step::Coupling { side: Side::Right, scale: i, layer: j }));
            if i > 0 {
                if self.cfg.downsample_first {
                    steps.extend([Step::Concat(i - 1), Step::Up(i - 1)]);
                } else {
                    steps.extend([Step::Up(i - 1), Step::Concat(i - 1)]);
                }
            }
        }
        steps
    }

    fn layer(&self, side: Side, scale: usize, layer: usize) -> &CouplingLayer {
        &self.blocks(side)[scale][layer]
    }

    fn resampler(&self, step: Step) -> &ResampleOp {
        match step {
            Step::Down(i) => &self.down[i],
            Step::Up(i) => &self.up[i],
            _ => unreachable!("not a resampling step"),
        }
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        if x.shape() != self.io_shape() {
            return Err(shape_err!("network expects input {:?}, got {:?}", self.io_shape(), x.shape()));
        }
        Ok(())
    }

    fn step_forward(&self, step: Step, x: Tensor, stack: &mut Vec<Tensor>) -> Result<(Tensor, f64)> {
        Ok(match step {
            Step::Coupling { side, scale, layer } => self.layer(side, scale, layer).forward(&x)?,
            Step::Split(i) => {
                let (keep, skip) = split(&x, self.cfg.split_fractions[i])?;
                stack.push(skip);
                (keep, 0.0)
            }
            Step::Down(i) => (self.down[i].apply(&x)?, 0.0),
            Step::Up(i) => (self.up[i].apply(&x)?, 0.0),
            Step::Concat(_) => {
                let skip = stack.pop().ok_or_else(|| Error::Usage(String::from("skip stack underflow")))?;
                (concat(&x, &skip)?, 0.0)
            }
        })
    }

    fn step_inverse(&self, step: Step, y: Tensor, stack: &mut Vec<Tensor>) -> Result<Tensor> {
        Ok(match step {
            Step::Coupling { side, scale, layer } => self.layer(side, scale, layer).inverse(&y)?,
            Step::Split(_) => {
                let skip = stack.pop().ok_or_else(|| Error::Usage(String::from("skip stack underflow")))?;
                concat(&y, &skip)?
            }
            Step::Down(i) => self.down[i].apply_inverse(&y)?,
            Step::Up(i) => self.up[i].apply_inverse(&y)?,
            Step::Concat(i) => {
                let (keep, skip) = split(&y, self.cfg.split_fractions[i])?;
                stack.push(skip);
                keep
            }
        })
    }

    fn expand(&self, x: &Tensor) -> Result<Tensor> {
        match &self.expand_in {
            Some(w) => same_conv3(w, x),
            None => Ok(x.clone()),
        }
    }

    fn contract(&self, h: &Tensor) -> Result<Tensor> {
        match &self.expand_out {
            Some(w) => same_conv3(w, h),
            None => Ok(h.clone()),
        }
    }

    /// Runs the invertible core on an already expanded input.
    fn core_forward(&self, h: Tensor) -> Result<(Tensor, f64)> {
        let mut stack = Vec::new();
        let mut cur = h;
        let mut logdet = 0.0;
        for step in self.steps() {
            let (next, ld) = self.step_forward(step, cur, &mut stack)?;
            cur = next;
            logdet += ld;
        }
        Ok((cur, logdet))
    }

    /// `f(x)` and `log|det ∂f/∂x|` (the sum of coupling log-determinants).
    pub fn apply(&self, x: &Tensor) -> Result<(Tensor, f64)> {
        self.check_input(x)?;
        let (h, logdet) = self.core_forward(self.expand(x)?)?;
        Ok((self.contract(&h)?, logdet))
    }

    /// Forward pass, optionally recording the activations needed by
    /// [`backward_conventional`](Self::backward_conventional).
    pub fn forward(&self, x: &Tensor, mode: TapeMode) -> Result<ForwardPass> {
        match mode {
            TapeMode::None => {
                let (output, logdet) = self.apply(x)?;
                Ok(ForwardPass { output, logdet, tape: None })
            }
            TapeMode::Record => self.forward_recorded(x),
        }
    }

    /// Inverse of the invertible network.
    pub fn inverse(&self, y: &Tensor) -> Result<Tensor> {
        Ok(self.inverse_with_logdet(y)?.0)
    }

    /// Inverse and the log-determinant of the inverse map at `y`.
    pub fn inverse_with_logdet(&self, y: &Tensor) -> Result<(Tensor, f64)> {
        if !self.is_invertible() {
            return Err(Error::Usage(String::from("network with expansion convolutions is not invertible")));
        }
        self.check_input(y)?;
        let mut stack = Vec::new();
        let mut cur = y.clone();
        let mut logdet = 0.0;
        for step in self.steps().into_iter().rev() {
            if let Step::Coupling { side, scale, layer } = step {
                let (x, ld) = self.layer(side, scale, layer).inverse_with_logdet(&cur)?;
                cur = x;
                logdet += ld;
            } else {
                cur = self.step_inverse(step, cur, &mut stack)?;
            }
        }
        Ok((cur, logdet))
    }

    /// Number of scalars carried (current activation plus skip stack) after
    /// each step of the invertible core.
    pub fn dimension_trace(&self, x: &Tensor) -> Result<Vec<usize>> {
        self.check_input(x)?;
        let mut stack = Vec::new();
        let mut cur = self.expand(x)?;
        let mut out = vec![cur.len()];
        for step in self.steps() {
            cur = self.step_forward(step, cur, &mut stack)?.0;
            out.push(cur.len() + stack.iter().map(Tensor::len).sum::<usize>());
        }
        Ok(out)
    }

    fn empty_grads(&self) -> NetGrads {
        let sigma_zero = |op: &ResampleOp| op.thetas().iter().map(|t| Matrix::zeros(t.rows(), t.cols())).collect::<Vec<_>>();
        NetGrads {
            left: self.left.iter().map(|b| vec![None; b.len()]).collect(),
            right: self.right.iter().map(|b| vec![None; b.len()]).collect(),
            down: self.down.iter().map(sigma_zero).collect(),
            up: self.up.iter().map(sigma_zero).collect(),
            expand_in: None,
            expand_out: None,
        }
    }

    fn forward_recorded(&self, x: &Tensor) -> Result<ForwardPass> {
        self.check_input(x)?;
        let clock = Stopwatch::start();
        let mut mem = MemTracker::default();
        let h = self.expand(x)?;
        if self.expand_in.is_some() {
            // The expansion conv's input is the caller's x; its output is the
            // first activation the chain needs.
            mem.hold_t(&h);
        }
        let steps = self.steps();
        let mut entries = Vec::with_capacity(steps.len());
        let mut stack: Vec<Tensor> = Vec::new();
        let mut cur = h;
        let mut logdet = 0.0;
        for &step in &steps {
            let entry = match step {
                Step::Coupling { side, scale, layer } => {
                    let (y, ld, cache) = self.layer(side, scale, layer).forward_cached(&cur)?;
                    mem.hold(cache.nbytes(), CouplingCache::TENSORS);
                    logdet += ld;
                    cur = y;
                    TapeEntry::Coupling(Box::new(cache))
                }
                Step::Down(_) | Step::Up(_) => {
                    let y = self.resampler(step).apply(&cur)?;
                    mem.hold_t(&cur);
                    let input = core::mem::replace(&mut cur, y);
                    TapeEntry::Resample(input)
                }
                Step::Split(_) => {
                    let (next, _) = self.step_forward(step, cur, &mut stack)?;
                    mem.hold_t(stack.last().expect("split pushed"));
                    cur = next;
                    TapeEntry::Structural
                }
                Step::Concat(_) => {
                    mem.release_t(stack.last().ok_or_else(|| Error::Usage(String::from("skip stack underflow")))?);
                    cur = self.step_forward(step, cur, &mut stack)?.0;
                    TapeEntry::Structural
                }
            };
            entries.push(entry);
        }
        mem.hold_t(&cur);
        let output = self.contract(&cur)?;
        let forward_time = clock.elapsed();
        Ok(ForwardPass {
            output,
            logdet,
            tape: Some(Tape { steps: steps.len(), entries, input: x.clone(), core_output: cur, mem, forward_time }),
        })
    }

    fn contract_backward(&self, core_out: &Tensor, grad_out: &Tensor, grads: &mut NetGrads) -> Result<Tensor> {
        match &self.expand_out {
            Some(w) => {
                let (gw, g) = same_conv3_backward(w, core_out, grad_out)?;
                grads.expand_out = Some(gw);
                Ok(g)
            }
            None => Ok(grad_out.clone()),
        }
    }

    fn expand_backward(&self, x: &Tensor, grad_h: &Tensor, grads: &mut NetGrads) -> Result<()> {
        if let Some(w) = &self.expand_in {
            let (gw, _) = same_conv3_backward(w, x, grad_h)?;
            grads.expand_in = Some(gw);
        }
        Ok(())
    }

    fn record_coupling_grads(grads: &mut NetGrads, side: Side, scale: usize, layer: usize, g: SubnetGrads) {
        let slot = match side {
            Side::Left => &mut grads.left[scale][layer],
            Side::Right => &mut grads.right[scale][layer],
        };
        *slot = Some(g);
    }

    fn record_resample_grads(grads: &mut NetGrads, step: Step, g: Vec<Matrix>) {
        match step {
            Step::Down(i) => grads.down[i] = g,
            Step::Up(i) => grads.up[i] = g,
            _ => unreachable!(),
        }
    }

    /// Conventional reverse-mode sweep over the activations stored by a
    /// recording forward pass; `log|det|` enters the loss with weight zero.
    pub fn backward_conventional(&self, pass: &ForwardPass, grad_out: &Tensor) -> Result<GradReport> {
        self.backward_conventional_with_logdet(pass, grad_out, 0.0)
    }

    /// As [`backward_conventional`](Self::backward_conventional) for a loss
    /// `L(y, logdet)` with `∂L/∂logdet = grad_logdet`.
    pub fn backward_conventional_with_logdet(&self, pass: &ForwardPass, grad_out: &Tensor, grad_logdet: f64) -> Result<GradReport> {
        let tape = pass
            .tape
            .as_ref()
            .ok_or_else(|| Error::Usage(String::from("conventional backpropagation needs a recorded tape")))?;
        let steps = self.steps();
        if tape.steps != steps.len() || tape.input.shape() != self.io_shape() {
            return Err(Error::Usage(String::from("tape was recorded by a different network")));
        }
        grad_out
            .check_same_shape(&pass.output, "output gradient")?;
        let clock = Stopwatch::start();
        let mut mem = tape.mem.clone();
        let mut grads = self.empty_grads();
        let mut g = self.contract_backward(&tape.core_output, grad_out, &mut grads)?;
        mem.hold_t(&g);
        let mut gstack: Vec<Tensor> = Vec::new();
        for (idx, &step) in steps.iter().enumerate().rev() {
            let gnext = match (step, &tape.entries[idx]) {
                (Step::Coupling { side, scale, layer }, TapeEntry::Coupling(cache)) => {
                    let (gx, pg) = self.layer(side, scale, layer).backward_cached(cache, &g, grad_logdet)?;
                    Self::record_coupling_grads(&mut grads, side, scale, layer, pg);
                    gx
                }
                (Step::Down(_) | Step::Up(_), TapeEntry::Resample(input)) => {
                    let (gx, gt) = self.resampler(step).apply_backward(input, &g)?;
                    Self::record_resample_grads(&mut grads, step, gt);
                    gx
                }
                (Step::Concat(i), TapeEntry::Structural) => {
                    let (gk, gs) = split(&g, self.cfg.split_fractions[i])?;
                    mem.hold_t(&gs);
                    gstack.push(gs);
                    gk
                }
                (Step::Split(_), TapeEntry::Structural) => {
                    let gs = gstack.pop().ok_or_else(|| Error::Usage(String::from("gradient stack underflow")))?;
                    mem.release_t(&gs);
                    concat(&g, &gs)?
                }
                _ => return Err(Error::Usage(String::from("tape entry does not match the network"))),
            };
            if gnext.nbytes() != g.nbytes() {
                mem.release_t(&g);
                mem.hold_t(&gnext);
            }
            g = gnext;
        }
        self.expand_backward(&tape.input, &g, &mut grads)?;
        Ok(GradReport {
            grads: self.flatten_grads(grads),
            output: pass.output.clone(),
            logdet: pass.logdet,
            peak_stored_activation_bytes: mem.peak_bytes,
            stored_tensor_count: mem.peak_count,
            wall_time: tape.forward_time + clock.elapsed(),
        })
    }

    /// Memory-efficient gradients for `⟨y, grad_out⟩`-type losses: runs the
    /// forward pass without storing activations and rebuilds each step's
    /// input by inversion during the backward sweep.
    pub fn backward_memeff(&self, x: &Tensor, grad_out: &Tensor) -> Result<GradReport> {
        let g = grad_out.clone();
        self.backward_memeff_with(x, move |y, _| {
            y.check_same_shape(&g, "output gradient")?;
            Ok((g, 0.0))
        })
    }

    /// Reversible backpropagation for a loss `L(y, logdet)`. `loss_grad`
    /// receives the forward output and log-determinant and returns
    /// `(∂L/∂y, ∂L/∂logdet)`.
    pub fn backward_memeff_with<F>(&self, x: &Tensor, loss_grad: F) -> Result<GradReport>
    where
        F: FnOnce(&Tensor, f64) -> Result<(Tensor, f64)>,
    {
        self.check_input(x)?;
        let clock = Stopwatch::start();
        let mut mem = MemTracker::default();
        let steps = self.steps();

        // Forward: keep only the skip tensors cᵢ, indexed by scale.
        let mut cur = self.expand(x)?;
        mem.hold_t(&cur);
        let mut stack: Vec<Tensor> = Vec::new();
        let mut retained: Vec<Tensor> = Vec::new();
        let mut logdet = 0.0;
        for &step in &steps {
            if let Step::Concat(i) = step {
                stack.push(retained[i].clone());
            }
            let (next, ld) = self.step_forward(step, cur, &mut stack)?;
            if let Step::Split(_) = step {
                let skip = stack.pop().expect("split pushed");
                mem.hold_t(&skip);
                retained.push(skip);
            }
            cur = next;
            logdet += ld;
        }
        let core_out = cur;
        let output = self.contract(&core_out)?;
        let (grad_out, grad_logdet) = loss_grad(&output, logdet)?;
        grad_out
            .check_same_shape(&output, "output gradient")?;

        let mut grads = self.empty_grads();
        let mut g = self.contract_backward(&core_out, &grad_out, &mut grads)?;
        mem.hold_t(&g);
        let mut y = core_out;
        let mut gstack: Vec<Tensor> = Vec::new();
        let mut pending = retained;
        for &step in steps.iter().rev() {
            let (x_prev, g_prev) = match step {
                Step::Coupling { side, scale, layer } => {
                    let l = self.layer(side, scale, layer);
                    let x_rec = l.inverse(&y)?;
                    let (gx, pg, cache) = l
                        .backward_reconstructed(&y, &g, &x_rec, grad_logdet, RECONSTRUCTION_TOL)
                        .map_err(|e| Error::Numeric(format!("{}: {e}", step.name())))?;
                    // Transient working set of this layer.
                    mem.hold(cache.nbytes() + x_rec.nbytes(), CouplingCache::TENSORS + 1);
                    mem.release(cache.nbytes() + x_rec.nbytes(), CouplingCache::TENSORS + 1);
                    Self::record_coupling_grads(&mut grads, side, scale, layer, pg);
                    (x_rec, gx)
                }
                Step::Down(_) | Step::Up(_) => {
                    let op = self.resampler(step);
                    let x_rec = op.apply_inverse(&y)?;
                    let err = op.apply(&x_rec)?.rel_err(&y);
                    if !(err <= RECONSTRUCTION_TOL) {
                        return Err(Error::Numeric(format!("{}: inversion drifted, relative round-trip error {err:e}", step.name())));
                    }
                    let (gx, gt) = op.apply_backward(&x_rec, &g)?;
                    Self::record_resample_grads(&mut grads, step, gt);
                    (x_rec, gx)
                }
                Step::Concat(i) => {
                    // The skip part is taken from the retained copy at the
                    // matching split.
                    let (keep, _) = split(&y, self.cfg.split_fractions[i])?;
                    let (gk, gs) = split(&g, self.cfg.split_fractions[i])?;
                    mem.hold_t(&gs);
                    gstack.push(gs);
                    (keep, gk)
                }
                Step::Split(_) => {
                    let skip = pending.pop().ok_or_else(|| Error::Usage(String::from("skip stack underflow")))?;
                    let gs = gstack.pop().ok_or_else(|| Error::Usage(String::from("gradient stack underflow")))?;
                    let x_prev = concat(&y, &skip)?;
                    let g_prev = concat(&g, &gs)?;
                    mem.release_t(&skip);
                    mem.release_t(&gs);
                    (x_prev, g_prev)
                }
            };
            // Current activation and gradient are replaced in place.
            mem.release(y.nbytes() + g.nbytes(), 2);
            mem.hold(x_prev.nbytes() + g_prev.nbytes(), 2);
            y = x_prev;
            g = g_prev;
        }
        self.expand_backward(x, &g, &mut grads)?;
        Ok(GradReport {
            grads: self.flatten_grads(grads),
            output,
            logdet,
            peak_stored_activation_bytes: mem.peak_bytes,
            stored_tensor_count: mem.peak_count,
            wall_time: clock.elapsed(),
        })
    }

    /// Names and shapes of all parameter arrays, in a stable order.
    pub fn param_specs(&self) -> Vec<ParamSpec> {
        let mut out = Vec::new();
        self.walk(&mut |name, shape, _| out.push(ParamSpec { name, shape }));
        out
    }

    /// All parameters with their names.
    pub fn named_params(&self) -> Vec<NamedArray> {
        let mut out = Vec::new();
        self.walk(&mut |name, shape, data| out.push(NamedArray { name, shape, data: data.to_vec() }));
        out
    }

    pub fn param_count(&self) -> usize {
        self.param_specs().iter().map(|p| p.shape.iter().product::<usize>()).sum()
    }

    /// Total parameter storage in bytes.
    pub fn param_bytes(&self) -> usize {
        self.param_count() * core::mem::size_of::<f64>()
    }

    fn walk<'a>(&'a self, f: &mut dyn FnMut(String, Vec<usize>, &'a [f64])) {
        if let Some(w) = &self.expand_in {
            f(String::from("expand.in"), w.shape(), w.as_slice());
        }
        for (side, blocks) in [("left", &self.left), ("right", &self.right)] {
            for (i, block) in blocks.iter().enumerate() {
                for (j, l) in block.iter().enumerate() {
                    let s = &l.subnet;
                    f(format!("{side}.{i}.{j}.conv"), s.conv.shape(), s.conv.as_slice());
                    f(format!("{side}.{i}.{j}.gamma"), vec![s.norm.gamma.len()], &s.norm.gamma);
                    f(format!("{side}.{i}.{j}.beta"), vec![s.norm.beta.len()], &s.norm.beta);
                }
            }
        }
        for (kind, ops) in [("down", &self.down), ("up", &self.up)] {
            for (i, op) in ops.iter().enumerate() {
                for (c, t) in op.thetas().iter().enumerate() {
                    f(format!("{kind}.{i}.theta.{c}"), vec![t.rows(), t.cols()], t.as_slice());
                }
            }
        }
        if let Some(w) = &self.expand_out {
            f(String::from("expand.out"), w.shape(), w.as_slice());
        }
    }

    /// Mutable views of all parameter arrays, in [`param_specs`](Self::param_specs) order.
    pub fn params_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out: Vec<&mut [f64]> = Vec::new();
        if let Some(w) = &mut self.expand_in {
            out.push(w.as_mut_slice());
        }
        for blocks in [&mut self.left, &mut self.right] {
            for block in blocks.iter_mut() {
                for l in block.iter_mut() {
                    let s = &mut l.subnet;
                    out.push(s.conv.as_mut_slice());
                    out.push(&mut s.norm.gamma);
                    out.push(&mut s.norm.beta);
                }
            }
        }
        for ops in [&mut self.down, &mut self.up] {
            for op in ops.iter_mut() {
                for t in op.thetas_mut() {
                    out.push(t.as_mut_slice());
                }
            }
        }
        if let Some(w) = &mut self.expand_out {
            out.push(w.as_mut_slice());
        }
        out
    }

    /// Overwrites a parameter array by name.
    pub fn set_param(&mut self, name: &str, data: &[f64]) -> Result<()> {
        let specs = self.param_specs();
        let idx = specs.iter().position(|p| p.name == name).ok_or_else(|| config_err!("unknown parameter {name}"))?;
        let mut slots = self.params_mut();
        let slot = &mut slots[idx];
        if slot.len() != data.len() {
            return Err(shape_err!("parameter {name} has {} entries, got {}", slot.len(), data.len()));
        }
        slot.copy_from_slice(data);
        Ok(())
    }

    fn flatten_grads(&self, g: NetGrads) -> Vec<NamedArray> {
        let specs = self.param_specs();
        let mut data: Vec<Vec<f64>> = Vec::with_capacity(specs.len());
        if self.expand_in.is_some() {
            data.push(g.expand_in.map(|w| w.as_slice().to_vec()).unwrap_or_else(|| vec![0.0; specs[0].shape.iter().product()]));
        }
        for (blocks, gblocks) in [(&self.left, g.left), (&self.right, g.right)] {
            for (block, gblock) in blocks.iter().zip(gblocks) {
                for (l, gl) in block.iter().zip(gblock) {
                    match gl {
                        Some(sg) => {
                            data.push(sg.conv.as_slice().to_vec());
                            data.push(sg.gamma);
                            data.push(sg.beta);
                        }
                        None => {
                            data.push(vec![0.0; l.subnet.conv.as_slice().len()]);
                            data.push(vec![0.0; l.subnet.norm.gamma.len()]);
                            data.push(vec![0.0; l.subnet.norm.beta.len()]);
                        }
                    }
                }
            }
        }
        for gops in [g.down, g.up] {
            for gop in gops {
                data.extend(gop.into_iter().map(Matrix::into_vec));
            }
        }
        if self.expand_out.is_some() {
            let n = specs.last().map(|s| s.shape.iter().product()).unwrap_or(0);
            data.push(g.expand_out.map(|w| w.as_slice().to_vec()).unwrap_or_else(|| vec![0.0; n]));
        }
        debug_assert_eq!(data.len(), specs.len());
        specs.into_iter().zip(data).map(|(s, d)| NamedArray { name: s.name, shape: s.shape, data: d }).collect()
    }
}

impl IUNet {
    /// One optimizer update with per-array gradients in
    /// [`param_specs`](Self::param_specs) order.
    pub fn adam_step(&mut self, opt: &mut Adam, grads: &[Vec<f64>]) -> Result<()> {
        let gs: Vec<&[f64]> = grads.iter().map(Vec::as_slice).collect();
        let mut ps = self.params_mut();
        opt.step(&mut ps, &gs)
    }

    /// A fresh optimizer sized for this network's parameters.
    pub fn adam(&self, cfg: AdamConfig) -> Result<Adam> {
        let lens: Vec<usize> = self.param_specs().iter().map(|p| p.shape.iter().product()).collect();
        Adam::new(cfg, &lens)
    }
}

/// Running sum of gradient reports, reduced in insertion order.
#[derive(Debug, Clone)]
pub struct GradAccumulator {
    sums: Vec<Vec<f64>>,
    count: usize,
}

impl GradAccumulator {
    pub fn new(net: &IUNet) -> Self {
        GradAccumulator { sums: net.param_specs().iter().map(|p| vec![0.0; p.shape.iter().product()]).collect(), count: 0 }
    }

    pub fn add(&mut self, report: &GradReport) -> Result<()> {
        if report.grads.len() != self.sums.len() {
            return Err(shape_err!("gradient report has {} arrays, expected {}", report.grads.len(), self.sums.len()));
        }
        for (s, g) in self.sums.iter_mut().zip(&report.grads) {
            s.iter_mut().zip(&g.data).for_each(|(a, b)| *a += b);
        }
        self.count += 1;
        Ok(())
    }

    pub fn count(&self) -> usize {
        self.count
    }

    /// Mean gradient; resets the accumulator.
    pub fn take_mean(&mut self) -> Vec<Vec<f64>> {
        let k = 1.0 / self.count.max(1) as f64;
        let out = self.sums.iter().map(|s| s.iter().map(|v| v * k).collect()).collect();
        self.sums.iter_mut().for_each(|s| s.iter_mut().for_each(|v| *v = 0.0));
        self.count = 0;
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rand_tensor(rng: &mut SplitMix64, shape: &[usize]) -> Tensor {
        let mut t = Tensor::zeros(shape[0], &shape[1..]);
        rng.fill_normal(t.as_mut_slice(), 1.0);
        t
    }

    #[test]
    fn channel_ladders() {
        let cfg = IUNetConfig::uniform(&[16, 16], 4, 3, 2, Fraction::HALF, 1).unwrap();
        assert_eq!(cfg.ladder().unwrap().channels, vec![4, 8, 16]);
        let cfg = IUNetConfig::uniform(&[8, 8, 8], 8, 2, 2, Fraction::QUARTER, 1).unwrap();
        assert_eq!(cfg.ladder().unwrap().channels, vec![8, 16]);
        let cfg = IUNetConfig::uniform(&[8, 8], 4, 2, 2, Fraction::new(1, 3).unwrap(), 1).unwrap();
        match cfg.ladder() {
            Err(Error::Config(m)) => assert!(m.contains("scale 1"), "{m}"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn divisibility_violation_names_scale() {
        let cfg = IUNetConfig::uniform(&[12, 12], 2, 4, 2, Fraction::HALF, 1).unwrap();
        match cfg.ladder() {
            Err(Error::Config(m)) => assert!(m.contains("scale 3"), "{m}"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn identity_at_init_and_roundtrip() {
        let cfg = IUNetConfig::uniform(&[8, 8], 2, 3, 2, Fraction::HALF, 2).unwrap();
        let net = IUNet::build(&cfg, 3).unwrap();
        let mut rng = SplitMix64::new(4);
        let x = rand_tensor(&mut rng, &net.io_shape());
        let (y, ld) = net.apply(&x).unwrap();
        assert!(y.sub(&x).max_abs() <= 1e-15, "{}", y.sub(&x).max_abs());
        assert_eq!(ld, 0.0);
        assert!(net.inverse(&y).unwrap().rel_err(&x) < 1e-12);
    }

    #[test]
    fn shape_errors() {
        let cfg = IUNetConfig::uniform(&[8, 8], 2, 2, 2, Fraction::HALF, 1).unwrap();
        let net = IUNet::build(&cfg, 0).unwrap();
        assert!(matches!(net.apply(&Tensor::zeros(2, &[8, 4])), Err(Error::Shape(_))));
        assert!(net.inverse(&Tensor::zeros(4, &[8, 8])).is_err());
    }

    #[test]
    fn missing_tape_is_usage_error() {
        let cfg = IUNetConfig::uniform(&[8, 8], 2, 2, 2, Fraction::HALF, 1).unwrap();
        let net = IUNet::build(&cfg, 0).unwrap();
        let x = Tensor::zeros(2, &[8, 8]);
        let pass = net.forward(&x, TapeMode::None).unwrap();
        assert!(matches!(net.backward_conventional(&pass, &x), Err(Error::Usage(_))));
    }

    #[test]
    fn param_views_agree() {
        let mut cfg = IUNetConfig::uniform(&[8, 8], 2, 2, 2, Fraction::HALF, 2).unwrap();
        cfg.data_channels = Some(1);
        let mut net = IUNet::build(&cfg, 0).unwrap();
        let specs = net.param_specs();
        let lens: Vec<usize> = net.params_mut().iter().map(|s| s.len()).collect();
        assert_eq!(specs.len(), lens.len());
        for (s, l) in specs.iter().zip(&lens) {
            assert_eq!(s.shape.iter().product::<usize>(), *l, "{}", s.name);
        }
        assert_eq!(specs[0].name, "expand.in");
        assert_eq!(specs.last().unwrap().name, "expand.out");
    }
}
