//! Learnable invertible down/upsampling.
//!
//! A down operator maps channel `c` of a `C×N` tensor through its own
//! orthogonal stride-equals-kernel convolution with kernel
//! `R · exp(θ_c − θ_cᵀ)` and stacks the σ outputs of every channel, giving a
//! `σC × (N ⊘ s)` tensor. The matching up operator is the adjoint, which for
//! an orthogonal map is also the inverse.

use alloc::vec::Vec;

use crate::error::{shape_err, Error, Result};
use crate::linalg::{matrix_exp, matrix_exp_frechet, reorder_to_kernel, reorder_to_matrix, skew, skew_adjoint, Kernel, Matrix};
use crate::rng::SplitMix64;
use crate::tensor::{conv_block, conv_block_transpose, conv_kernel_adjoint, StrideSpec, Tensor};

/// Default standard deviation of the i.i.d. normal θ initialization.
pub const THETA_INIT_STD: f64 = 0.05;

/// θ whose orthogonal factor exp(θ − θᵀ) is the 2×2 Haar analysis matrix:
/// one averaging filter and three detail filters, each with unit norm.
pub fn haar_theta() -> Matrix {
    Matrix::from_rows(&[[0.0, 0.0, -1.0, -1.0], [0.0, 0.0, 1.0, 1.0], [0.0, 0.0, 0.0, 0.0], [0.0, 0.0, 0.0, 0.0]])
        .scale(core::f64::consts::FRAC_PI_4)
}

/// Whether the operator's forward direction reduces or restores resolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "lowercase"))]
pub enum Mode {
    Down,
    Up,
}

/// A learnable resampling operator over `channels` input channels (counted on
/// the high-resolution side).
#[derive(Debug, Clone, PartialEq)]
pub struct ResampleOp {
    stride: StrideSpec,
    channels: usize,
    /// One θ per channel, or a single θ shared by all channels.
    thetas: Vec<Matrix>,
    mode: Mode,
}

impl ResampleOp {
    pub fn new(stride: StrideSpec, channels: usize, thetas: Vec<Matrix>, mode: Mode) -> Result<Self> {
        let sigma = stride.multiplier();
        if channels == 0 {
            return Err(shape_err!("resampling needs at least one channel"));
        }
        if thetas.len() != 1 && thetas.len() != channels {
            return Err(shape_err!("{} θ matrices for {channels} channels", thetas.len()));
        }
        if thetas.iter().any(|t| t.rows() != sigma || t.cols() != sigma) {
            return Err(shape_err!("θ matrices must be {sigma}x{sigma}"));
        }
        Ok(ResampleOp { stride, channels, thetas, mode })
    }

    /// θ = 0 for every channel: the pixel shuffle (or its inverse).
    pub fn pixel_shuffle(stride: StrideSpec, channels: usize, mode: Mode) -> Self {
        let sigma = stride.multiplier();
        ResampleOp { stride, channels, thetas: alloc::vec![Matrix::zeros(sigma, sigma)], mode }
    }

    /// The 2D Haar transform (stride 2×2, θ = [`haar_theta`] for every channel).
    pub fn haar(channels: usize, mode: Mode) -> Self {
        let stride = StrideSpec::uniform(2, 2).expect("2x2 stride is valid");
        ResampleOp { stride, channels, thetas: alloc::vec![haar_theta()], mode }
    }

    /// θ entries drawn i.i.d. from N(0, std²).
    pub fn random(stride: StrideSpec, channels: usize, shared: bool, std: f64, mode: Mode, rng: &mut SplitMix64) -> Self {
        let sigma = stride.multiplier();
        let count = if shared { 1 } else { channels };
        let thetas = (0..count)
            .map(|_| {
                let mut m = Matrix::zeros(sigma, sigma);
                rng.fill_normal(m.as_mut_slice(), std);
                m
            })
            .collect();
        ResampleOp { stride, channels, thetas, mode }
    }

    pub fn stride(&self) -> &StrideSpec {
        &self.stride
    }
    pub fn channels(&self) -> usize {
        self.channels
    }
    pub fn mode(&self) -> Mode {
        self.mode
    }
    pub fn is_shared(&self) -> bool {
        self.thetas.len() == 1
    }
    pub fn thetas(&self) -> &[Matrix] {
        &self.thetas
    }
    pub fn thetas_mut(&mut self) -> &mut [Matrix] {
        &mut self.thetas
    }
    pub fn sigma(&self) -> usize {
        self.stride.multiplier()
    }
    /// Same θ and geometry, opposite direction.
    pub fn with_mode(&self, mode: Mode) -> Self {
        ResampleOp { mode, ..self.clone() }
    }

    fn theta_index(&self, channel: usize) -> usize {
        if self.is_shared() {
            0
        } else {
            channel
        }
    }

    /// Orthogonal matrices `exp(θ − θᵀ)`, one per θ.
    pub fn matrices(&self) -> Result<Vec<Matrix>> {
        self.thetas
            .iter()
            .map(|t| {
                if !t.is_finite() {
                    return Err(Error::Numeric(alloc::string::String::from("non-finite θ")));
                }
                matrix_exp(&skew(t)?)
            })
            .collect()
    }

    pub fn kernels(&self) -> Result<Vec<Kernel>> {
        self.matrices()?.iter().map(|m| reorder_to_kernel(m, &self.stride)).collect()
    }

    /// Largest `‖MᵀM − I‖_F` over the derived matrices (∞ for non-finite θ).
    pub fn orthogonality_defect(&self) -> f64 {
        match self.matrices() {
            Ok(ms) => ms.iter().map(Matrix::orthogonality_defect).fold(0.0, f64::max),
            Err(_) => f64::INFINITY,
        }
    }

    fn check_high_res(&self, x: &Tensor) -> Result<()> {
        if x.channels() != self.channels {
            return Err(shape_err!("resampler over {} channels got {}", self.channels, x.channels()));
        }
        Ok(())
    }

    fn check_low_res(&self, y: &Tensor) -> Result<()> {
        let sigma = self.sigma();
        if !y.channels().is_multiple_of(sigma) {
            return Err(shape_err!("{} channels are not divisible by σ = {sigma}", y.channels()));
        }
        if y.channels() / sigma != self.channels {
            return Err(shape_err!(
                "resampler over {} channels got {} low-resolution channels",
                self.channels,
                y.channels()
            ));
        }
        Ok(())
    }

    /// `D_θ`: `C×N → σC×(N⊘s)`.
    pub fn down_forward(&self, x: &Tensor) -> Result<Tensor> {
        self.check_high_res(x)?;
        let kernels = self.kernels()?;
        let mut parts = Vec::with_capacity(self.channels);
        for c in 0..self.channels {
            let xc = x.channel_range(c, c + 1);
            parts.push(conv_block(&kernels[self.theta_index(c)], &xc, &self.stride)?);
        }
        Tensor::concat(&parts.iter().collect::<Vec<_>>())
    }

    /// `D_θ* = D_θ⁻¹`: `σC×Ñ → C×N`.
    pub fn up_forward(&self, y: &Tensor) -> Result<Tensor> {
        self.check_low_res(y)?;
        let sigma = self.sigma();
        let kernels = self.kernels()?;
        let mut parts = Vec::with_capacity(self.channels);
        for c in 0..self.channels {
            let yc = y.channel_range(c * sigma, (c + 1) * sigma);
            parts.push(conv_block_transpose(&kernels[self.theta_index(c)], &yc, &self.stride)?);
        }
        Tensor::concat(&parts.iter().collect::<Vec<_>>())
    }

    /// Gradient of `⟨down_forward(x), g⟩` with respect to every θ.
    ///
    /// Per channel: `Γ(exp′(Sᵀ) · R*(conv□(g_c, x_c)))`; shared θ sums the
    /// channel contributions.
    pub fn grad_theta(&self, x: &Tensor, g: &Tensor) -> Result<Vec<Matrix>> {
        self.check_high_res(x)?;
        self.check_low_res(g)?;
        let sigma = self.sigma();
        let mut grads: Vec<Matrix> = self.thetas.iter().map(|_| Matrix::zeros(sigma, sigma)).collect();
        let skews_t: Vec<Matrix> = self.thetas.iter().map(|t| skew(t).map(|s| s.transpose())).collect::<Result<_>>()?;
        if self.is_shared() {
            // exp′ is linear in its direction, so sum the kernel adjoints first.
            let mut h = Matrix::zeros(sigma, sigma);
            for c in 0..self.channels {
                h.axpy(1.0, &self.channel_kernel_adjoint(x, g, c)?)?;
            }
            grads[0] = skew_adjoint(&matrix_exp_frechet(&skews_t[0], &h)?)?;
        } else {
            for c in 0..self.channels {
                let h = self.channel_kernel_adjoint(x, g, c)?;
                grads[c] = skew_adjoint(&matrix_exp_frechet(&skews_t[c], &h)?)?;
            }
        }
        Ok(grads)
    }

    fn channel_kernel_adjoint(&self, x: &Tensor, g: &Tensor, c: usize) -> Result<Matrix> {
        let sigma = self.sigma();
        let k = conv_kernel_adjoint(&g.channel_range(c * sigma, (c + 1) * sigma), &x.channel_range(c, c + 1), &self.stride)?;
        reorder_to_matrix(&k)
    }

    /// Input gradient of `down_forward`: the adjoint, i.e. `up_forward`.
    pub fn grad_input(&self, g: &Tensor) -> Result<Tensor> {
        self.up_forward(g)
    }

    /// Forward map in this operator's own direction.
    pub fn apply(&self, x: &Tensor) -> Result<Tensor> {
        match self.mode {
            Mode::Down => self.down_forward(x),
            Mode::Up => self.up_forward(x),
        }
    }

    /// Inverse of [`apply`](Self::apply).
    pub fn apply_inverse(&self, y: &Tensor) -> Result<Tensor> {
        match self.mode {
            Mode::Down => self.up_forward(y),
            Mode::Up => self.down_forward(y),
        }
    }

    /// Vector-Jacobian product of [`apply`](Self::apply) at `input`:
    /// `(grad_input, grad_thetas)`.
    ///
    /// For the up direction `⟨D*x, g⟩ = ⟨x, D g⟩ = ⟨D g, x⟩`, so the θ
    /// gradient is `grad_theta` with the roles of input and cotangent swapped.
    pub fn apply_backward(&self, input: &Tensor, grad_out: &Tensor) -> Result<(Tensor, Vec<Matrix>)> {
        match self.mode {
            Mode::Down => Ok((self.up_forward(grad_out)?, self.grad_theta(input, grad_out)?)),
            Mode::Up => Ok((self.down_forward(grad_out)?, self.grad_theta(grad_out, input)?)),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rand_tensor(rng: &mut SplitMix64, c: usize, spatial: &[usize]) -> Tensor {
        let mut t = Tensor::zeros(c, spatial);
        rng.fill_normal(t.as_mut_slice(), 1.0);
        t
    }

    #[test]
    fn output_shapes_follow_channel_multiplier() {
        let mut rng = SplitMix64::new(1);
        let op = ResampleOp::random(StrideSpec::uniform(2, 2).unwrap(), 1, false, 0.05, Mode::Down, &mut rng);
        assert_eq!(op.down_forward(&Tensor::zeros(1, &[4, 4])).unwrap().shape(), vec![4, 2, 2]);
        let op = ResampleOp::random(StrideSpec::uniform(3, 2).unwrap(), 1, false, 0.05, Mode::Down, &mut rng);
        assert_eq!(op.down_forward(&Tensor::zeros(1, &[4, 4, 4])).unwrap().shape(), vec![8, 2, 2, 2]);
    }

    #[test]
    fn symmetric_theta_is_pixel_shuffle() {
        let s = StrideSpec::uniform(2, 2).unwrap();
        let sym = Matrix::from_rows(&[[1.0, 2.0, 0.0, 3.0], [2.0, 0.0, 1.0, 0.0], [0.0, 1.0, 5.0, 1.0], [3.0, 0.0, 1.0, 2.0]]);
        let op = ResampleOp::new(s.clone(), 1, alloc::vec![sym], Mode::Down).unwrap();
        let ps = ResampleOp::pixel_shuffle(s, 1, Mode::Down);
        let x = Tensor::from_vec(1, &[4, 4], (0..16).map(f64::from).collect()).unwrap();
        let y = op.down_forward(&x).unwrap();
        assert_eq!(y, ps.down_forward(&x).unwrap());
        // Polyphase component (0, 1) of a 4x4 ramp.
        assert_eq!(y.channel(1), &[1.0, 3.0, 9.0, 11.0]);
    }

    #[test]
    fn roundtrip_and_norm() {
        let mut rng = SplitMix64::new(9);
        let op = ResampleOp::random(StrideSpec::new(&[2, 3]).unwrap(), 3, false, 0.5, Mode::Down, &mut rng);
        let x = rand_tensor(&mut rng, 3, &[4, 6]);
        let y = op.down_forward(&x).unwrap();
        assert!((y.norm() - x.norm()).abs() < 1e-12 * x.norm());
        assert!(op.up_forward(&y).unwrap().rel_err(&x) < 1e-12);
        let g = rand_tensor(&mut rng, 18, &[2, 2]);
        assert_eq!(op.grad_input(&g).unwrap(), op.up_forward(&g).unwrap());
        assert!((op.up_forward(&g).unwrap().norm() - g.norm()).abs() < 1e-12 * g.norm());
    }

    #[test]
    fn channel_errors() {
        let op = ResampleOp::pixel_shuffle(StrideSpec::uniform(2, 2).unwrap(), 2, Mode::Down);
        assert!(op.down_forward(&Tensor::zeros(3, &[4, 4])).is_err());
        assert!(op.up_forward(&Tensor::zeros(6, &[2, 2])).is_err());
        assert!(op.down_forward(&Tensor::zeros(2, &[4, 5])).is_err());
    }

    #[test]
    fn zero_cotangent_gives_zero_gradient() {
        let mut rng = SplitMix64::new(2);
        let op = ResampleOp::random(StrideSpec::uniform(2, 2).unwrap(), 2, false, 0.1, Mode::Down, &mut rng);
        let x = rand_tensor(&mut rng, 2, &[4, 4]);
        for g in op.grad_theta(&x, &Tensor::zeros(8, &[2, 2])).unwrap() {
            assert!(g.as_slice().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn non_finite_theta_is_reported() {
        let s = StrideSpec::uniform(1, 2).unwrap();
        let mut op = ResampleOp::pixel_shuffle(s, 1, Mode::Down);
        op.thetas_mut()[0][(0, 1)] = f64::NAN;
        assert!(matches!(op.down_forward(&Tensor::zeros(1, &[4])), Err(Error::Numeric(_))));
        assert_eq!(op.orthogonality_defect(), f64::INFINITY);
    }
}
