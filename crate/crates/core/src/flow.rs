//! Normalizing flows on top of the iUNet.
//!
//! With `z = f(x)` and a standard-normal base density q,
//! `log p(x) = log q(z) + log|det ∂f/∂x|`, where the log-determinant is the
//! sum of the coupling-layer terms. Sampling runs the inverse pass.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;
use core::f64::consts::{LN_2, PI};

use crate::error::{config_err, Error, Result};
use crate::iunet::{GradAccumulator, IUNet};
use crate::linalg::Matrix;
use crate::math;
use crate::optim::AdamConfig;
use crate::resample::{Mode, ResampleOp};
use crate::rng::SplitMix64;
use crate::tensor::{StrideSpec, Tensor};
use crate::time::Stopwatch;

/// Relative round-trip error tolerated when sampling.
pub const SAMPLE_ROUNDTRIP_TOL: f64 = 1e-8;

/// Standard-normal base density in `n` dimensions.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BaseDistribution {
    pub dim: usize,
}

impl BaseDistribution {
    pub fn log_density(&self, z: &Tensor) -> f64 {
        -0.5 * z.dot(z) - 0.5 * self.dim as f64 * math::ln(2.0 * PI)
    }
}

/// An iUNet flow with an optional fixed pixel-shuffle pre-transform.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowModel {
    pub net: IUNet,
    pub base: BaseDistribution,
    pre: Option<ResampleOp>,
}

impl FlowModel {
    pub fn new(net: IUNet) -> Result<Self> {
        if !net.is_invertible() {
            return Err(config_err!("a flow needs an invertible network (no expansion convolutions)"));
        }
        let dim = net.io_shape().iter().product();
        Ok(FlowModel { net, base: BaseDistribution { dim }, pre: None })
    }

    /// Data are pixel-shuffled with `stride` before entering the network, so
    /// the data shape is `[C/σ, N·s]` for a network shape `[C, N]`.
    pub fn with_pixel_shuffle(net: IUNet, stride: StrideSpec) -> Result<Self> {
        let mut model = Self::new(net)?;
        let shape = model.net.io_shape();
        let sigma = stride.multiplier();
        if stride.dim() != shape.len() - 1 || shape[0] % sigma != 0 {
            return Err(config_err!("pixel shuffle {:?} does not fit network input {shape:?}", stride.extents()));
        }
        model.pre = Some(ResampleOp::pixel_shuffle(stride, shape[0] / sigma, Mode::Down));
        Ok(model)
    }

    /// Shape `[C, N…]` of data tensors.
    pub fn data_shape(&self) -> Vec<usize> {
        let mut s = self.net.io_shape();
        if let Some(op) = &self.pre {
            s[0] = op.channels();
            for (n, k) in s[1..].iter_mut().zip(op.stride().extents()) {
                *n *= k;
            }
        }
        s
    }

    fn pre_forward(&self, x: &Tensor) -> Result<Tensor> {
        if x.shape() != self.data_shape() {
            return Err(crate::error::shape_err!("flow expects {:?}, got {:?}", self.data_shape(), x.shape()));
        }
        match &self.pre {
            Some(op) => op.down_forward(x),
            None => Ok(x.clone()),
        }
    }

    /// `z = f(x)` and the log-determinant.
    pub fn forward(&self, x: &Tensor) -> Result<(Tensor, f64)> {
        let (z, logdet) = self.net.apply(&self.pre_forward(x)?)?;
        if !z.is_finite() || !logdet.is_finite() {
            return Err(Error::Numeric(String::from("non-finite activations in flow forward pass")));
        }
        Ok((z, logdet))
    }

    /// `x = f⁻¹(z)`.
    pub fn inverse(&self, z: &Tensor) -> Result<Tensor> {
        let h = self.net.inverse(z)?;
        match &self.pre {
            Some(op) => op.up_forward(&h),
            None => Ok(h),
        }
    }

    /// `x = f⁻¹(z)` and `log|det ∂f⁻¹/∂z|`.
    pub fn inverse_with_logdet(&self, z: &Tensor) -> Result<(Tensor, f64)> {
        let (h, logdet) = self.net.inverse_with_logdet(z)?;
        match &self.pre {
            Some(op) => Ok((op.up_forward(&h)?, logdet)),
            None => Ok((h, logdet)),
        }
    }

    /// `(log p(x), log|det ∂f/∂x|)`.
    pub fn log_likelihood(&self, x: &Tensor) -> Result<(f64, f64)> {
        let (z, logdet) = self.forward(x)?;
        Ok((self.base.log_density(&z) + logdet, logdet))
    }

    /// Mean negative log-likelihood in bits per dimension.
    pub fn mean_nll_bits(&self, data: &[Tensor]) -> Result<f64> {
        if data.is_empty() {
            return Err(config_err!("empty dataset"));
        }
        let mut total = 0.0;
        for x in data {
            total += nll_bits_per_dim(self.log_likelihood(x)?.0, self.base.dim);
        }
        Ok(total / data.len() as f64)
    }

    /// `count` draws `f⁻¹(z)`, `z` standard normal from the stream `(seed, k)`.
    /// Each draw is checked by re-applying the forward map.
    pub fn sample(&self, count: usize, seed: u64) -> Result<Vec<Tensor>> {
        let shape = self.net.io_shape();
        (0..count as u64)
            .map(|k| {
                let mut z = Tensor::zeros(shape[0], &shape[1..]);
                SplitMix64::derive(seed, k).fill_normal(z.as_mut_slice(), 1.0);
                let x = self.inverse(&z)?;
                let err = self.forward(&x)?.0.rel_err(&z);
                if !(err <= SAMPLE_ROUNDTRIP_TOL) {
                    return Err(Error::Numeric(format!("sample {k}: inversion diverged, round-trip error {err:e}")));
                }
                Ok(x)
            })
            .collect()
    }

    /// Log-determinant of the central-difference Jacobian of `f` at `x`,
    /// assembled column by column. Intended for small flows.
    pub fn brute_force_logdet(&self, x: &Tensor, h: f64) -> Result<f64> {
        let n = x.len();
        let mut jac = Matrix::zeros(n, n);
        let mut xp = x.clone();
        for j in 0..n {
            let orig = xp.as_slice()[j];
            xp.as_mut_slice()[j] = orig + h;
            let fp = self.forward(&xp)?.0;
            xp.as_mut_slice()[j] = orig - h;
            let fm = self.forward(&xp)?.0;
            xp.as_mut_slice()[j] = orig;
            for i in 0..n {
                jac[(i, j)] = (fp.as_slice()[i] - fm.as_slice()[i]) / (2.0 * h);
            }
        }
        let (sign, logabs) = jac.slogdet()?;
        if sign == 0.0 {
            return Err(Error::Numeric(String::from("singular finite-difference Jacobian")));
        }
        Ok(logabs)
    }
}

/// `−ll / (n·log 2)`.
pub fn nll_bits_per_dim(ll: f64, n: usize) -> f64 {
    -ll / (n as f64 * LN_2)
}

/// Settings of [`train_flow`].
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(deny_unknown_fields))]
pub struct FlowTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: AdamConfig,
    /// Seed of the per-epoch shuffling.
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FlowEpoch {
    pub epoch: usize,
    pub mean_train_nll_bits: f64,
    pub mean_val_nll_bits: f64,
    /// Seconds since training started.
    pub wall_time_s: f64,
}

/// Per-epoch record of a training run. Epoch 0 is the untrained model.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct FlowLog {
    pub epochs: Vec<FlowEpoch>,
    /// Set when training stopped on a non-finite loss; the model then holds
    /// the parameters of the last finite epoch.
    pub aborted: Option<String>,
}

/// Maximum-likelihood training with reversible backpropagation and Adam.
pub fn train_flow(model: &mut FlowModel, train: &[Tensor], val: &[Tensor], cfg: &FlowTrainConfig) -> Result<FlowLog> {
    if train.is_empty() || cfg.batch_size == 0 {
        return Err(config_err!("training needs data and a positive batch size"));
    }
    let clock = Stopwatch::start();
    let mut opt = model.net.adam(cfg.optimizer)?;
    let mut rng = SplitMix64::new(cfg.seed);
    let mut log = FlowLog::default();
    let eval = |m: &FlowModel| -> Result<(f64, f64)> {
        let tr = m.mean_nll_bits(train)?;
        let va = if val.is_empty() { f64::NAN } else { m.mean_nll_bits(val)? };
        Ok((tr, va))
    };
    let (tr, va) = eval(model)?;
    log.epochs.push(FlowEpoch { epoch: 0, mean_train_nll_bits: tr, mean_val_nll_bits: va, wall_time_s: clock.elapsed().as_secs_f64() });

    let n = model.base.dim as f64;
    let scale = 1.0 / (n * LN_2);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut acc = GradAccumulator::new(&model.net);
    for epoch in 1..=cfg.epochs {
        let good = model.net.clone();
        for i in (1..order.len()).rev() {
            order.swap(i, rng.below(i as u64 + 1) as usize);
        }
        let mut failure = None;
        for batch in order.chunks(cfg.batch_size) {
            for &k in batch {
                let h = model.pre_forward(&train[k])?;
                let report = model.net.backward_memeff_with(&h, |z, _| Ok((z.scale(scale), -scale)));
                match report {
                    Ok(r) => acc.add(&r)?,
                    Err(e) => {
                        failure = Some(format!("epoch {epoch}: {e}"));
                        break;
                    }
                }
            }
            if failure.is_some() {
                break;
            }
            let grads = acc.take_mean();
            model.net.adam_step(&mut opt, &grads)?;
        }
        let metrics = match failure {
            Some(f) => Err(f),
            None => match eval(model) {
                Ok((tr, va)) if tr.is_finite() => Ok((tr, va)),
                Ok((tr, _)) => Err(format!("epoch {epoch}: training NLL became {tr}")),
                Err(e) => Err(format!("epoch {epoch}: {e}")),
            },
        };
        match metrics {
            Ok((tr, va)) => log.epochs.push(FlowEpoch {
                epoch,
                mean_train_nll_bits: tr,
                mean_val_nll_bits: va,
                wall_time_s: clock.elapsed().as_secs_f64(),
            }),
            Err(msg) => {
                model.net = good;
                log.aborted = Some(msg);
                break;
            }
        }
    }
    Ok(log)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::iunet::IUNetConfig;
    use alloc::vec;
    use crate::layers::{CouplingKind, Fraction};

    fn model(kind: CouplingKind) -> FlowModel {
        let cfg = IUNetConfig::uniform(&[4, 4], 2, 2, 2, Fraction::HALF, 2).unwrap().with_coupling(kind);
        FlowModel::new(IUNet::build(&cfg, 1).unwrap()).unwrap()
    }

    #[test]
    fn zero_input_density() {
        let m = model(CouplingKind::Affine);
        let (ll, ld) = m.log_likelihood(&Tensor::zeros(2, &[4, 4])).unwrap();
        assert_eq!(ld, 0.0);
        assert!((ll + 16.0 * math::ln(2.0 * PI)).abs() < 1e-12);
    }

    #[test]
    fn bits_conversion() {
        assert!((nll_bits_per_dim(-5.0 * LN_2, 5) - 1.0).abs() < 1e-15);
        assert_eq!(nll_bits_per_dim(0.0, 3), 0.0);
    }

    #[test]
    fn identity_samples_are_base_draws() {
        let m = model(CouplingKind::Additive);
        let s = m.sample(3, 5).unwrap();
        for (k, x) in s.iter().enumerate() {
            let mut z = Tensor::zeros(2, &[4, 4]);
            SplitMix64::derive(5, k as u64).fill_normal(z.as_mut_slice(), 1.0);
            assert!(x.rel_err(&z) < 1e-15);
        }
        assert_eq!(s, m.sample(3, 5).unwrap());
    }

    #[test]
    fn pixel_shuffle_pretransform() {
        let cfg = IUNetConfig::uniform(&[2, 2], 4, 2, 2, Fraction::HALF, 1).unwrap();
        let m = FlowModel::with_pixel_shuffle(IUNet::build(&cfg, 0).unwrap(), StrideSpec::uniform(2, 2).unwrap()).unwrap();
        assert_eq!(m.data_shape(), vec![1, 4, 4]);
        let x = Tensor::from_vec(1, &[4, 4], (0..16).map(|v| v as f64).collect()).unwrap();
        let (z, _) = m.forward(&x).unwrap();
        assert!(m.inverse(&z).unwrap().rel_err(&x) < 1e-14);
    }

    #[test]
    fn zero_epochs_keep_nll() {
        let mut m = model(CouplingKind::Affine);
        let data: Vec<Tensor> = (0..4).map(|k| Tensor::filled(2, &[4, 4], k as f64 * 0.1)).collect();
        let before = m.mean_nll_bits(&data).unwrap();
        let cfg = FlowTrainConfig { epochs: 0, batch_size: 2, optimizer: AdamConfig::default(), seed: 0 };
        let log = train_flow(&mut m, &data, &[], &cfg).unwrap();
        assert_eq!(log.epochs.len(), 1);
        assert_eq!(log.epochs[0].mean_train_nll_bits, before);
    }
}
