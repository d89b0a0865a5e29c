//! Invertible building blocks: coupling layers, their normalized conv
//! subnets, and channel split/concat.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;

use crate::error::{config_err, shape_err, Error, Result};
use crate::math;
use crate::tensor::{same_conv3, same_conv3_backward, Conv3Weight, Tensor};

/// Default leaky-ReLU negative slope in coupling subnets.
pub const LEAKY_SLOPE: f64 = 0.01;
/// Default bound on affine log-scales, `s = c · tanh(s_raw / c)`.
pub const AFFINE_CLAMP: f64 = 2.0;
/// Variance regularizer of the normalization layers.
pub const NORM_EPS: f64 = 1e-6;

/// Exact rational split fraction `num/den`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(try_from = "String", into = "String"))]
pub struct Fraction {
    num: usize,
    den: usize,
}

impl Fraction {
    pub fn new(num: usize, den: usize) -> Result<Self> {
        if den == 0 || num == 0 || num >= den {
            return Err(config_err!("split fraction {num}/{den} must lie strictly between 0 and 1"));
        }
        Ok(Fraction { num, den })
    }

    pub const HALF: Fraction = Fraction { num: 1, den: 2 };
    pub const QUARTER: Fraction = Fraction { num: 1, den: 4 };

    pub fn num(&self) -> usize {
        self.num
    }
    pub fn den(&self) -> usize {
        self.den
    }
    pub fn as_f64(&self) -> f64 {
        self.num as f64 / self.den as f64
    }

    /// `λ·c` if it is a whole number with `0 < λc < c`.
    pub fn of(&self, c: usize) -> Result<usize> {
        if !(c * self.num).is_multiple_of(self.den) {
            return Err(config_err!("{self} of {c} channels is not a whole number of channels"));
        }
        let k = c * self.num / self.den;
        if k == 0 || k >= c {
            return Err(config_err!("{self} of {c} channels leaves an empty part"));
        }
        Ok(k)
    }
}

impl fmt::Display for Fraction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}", self.num, self.den)
    }
}

impl FromStr for Fraction {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        let (n, d) = s.split_once('/').ok_or_else(|| config_err!("split fraction {s:?} is not of the form a/b"))?;
        let n = n.trim().parse().map_err(|_| config_err!("bad numerator in {s:?}"))?;
        let d = d.trim().parse().map_err(|_| config_err!("bad denominator in {s:?}"))?;
        Fraction::new(n, d)
    }
}

impl TryFrom<String> for Fraction {
    type Error = Error;
    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<Fraction> for String {
    fn from(f: Fraction) -> String {
        f.to_string()
    }
}

/// Splits off the first `λC` channels; the rest form the skip part.
pub fn split(x: &Tensor, fraction: Fraction) -> Result<(Tensor, Tensor)> {
    let k = fraction.of(x.channels())?;
    Ok((x.channel_range(0, k), x.channel_range(k, x.channels())))
}

/// Inverse of [`split`].
pub fn concat(keep: &Tensor, skip: &Tensor) -> Result<Tensor> {
    Tensor::concat(&[keep, skip])
}

/// Channel grouping of a normalization layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "lowercase"))]
pub enum NormScheme {
    /// One group spanning all channels.
    Layer,
    /// Groups of `group_size` consecutive channels.
    Group(usize),
}

impl NormScheme {
    pub fn group_size(&self, channels: usize) -> Result<usize> {
        match *self {
            NormScheme::Layer => Ok(channels),
            NormScheme::Group(g) if g > 0 && channels.is_multiple_of(g) => Ok(g),
            NormScheme::Group(g) => Err(config_err!("group size {g} does not divide {channels} channels")),
        }
    }
}

/// Per-sample normalization followed by a per-channel affine map.
#[derive(Debug, Clone, PartialEq)]
pub struct NormParams {
    pub scheme: NormScheme,
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
    pub eps: f64,
}

/// Intermediate values of [`normalize`] needed by its backward pass.
#[derive(Debug, Clone)]
pub struct NormCache {
    pub xhat: Tensor,
    pub inv_std: Vec<f64>,
}

impl NormParams {
    /// γ = 0, β = 0: the layer outputs zeros.
    pub fn zero_init(scheme: NormScheme, channels: usize) -> Result<Self> {
        scheme.group_size(channels)?;
        Ok(NormParams { scheme, gamma: vec![0.0; channels], beta: vec![0.0; channels], eps: NORM_EPS })
    }

    pub fn unit(scheme: NormScheme, channels: usize) -> Result<Self> {
        let mut p = Self::zero_init(scheme, channels)?;
        p.gamma.iter_mut().for_each(|g| *g = 1.0);
        Ok(p)
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }
}

/// Normalizes each channel group over its channels and all spatial
/// positions to zero mean and unit variance (regularized by ε), then applies
/// `γ_c · x̂ + β_c`.
pub fn normalize(p: &NormParams, x: &Tensor) -> Result<(Tensor, NormCache)> {
    let c = x.channels();
    if p.channels() != c {
        return Err(shape_err!("normalization over {} channels got {c}", p.channels()));
    }
    if !(p.eps > 0.0) {
        return Err(config_err!("normalization ε must be positive"));
    }
    let gs = p.scheme.group_size(c)?;
    let n = x.spatial_len();
    let groups = c / gs;
    let mut xhat = Tensor::zeros(c, x.spatial());
    let mut inv_std = Vec::with_capacity(groups);
    let xs = x.as_slice();
    for g in 0..groups {
        let slice = &xs[g * gs * n..(g + 1) * gs * n];
        let m = slice.len() as f64;
        let mean = slice.iter().sum::<f64>() / m;
        let var = slice.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / m;
        let is = 1.0 / math::sqrt(var + p.eps);
        inv_std.push(is);
        for (o, v) in xhat.as_mut_slice()[g * gs * n..(g + 1) * gs * n].iter_mut().zip(slice) {
            *o = (v - mean) * is;
        }
    }
    let mut y = xhat.clone();
    for ch in 0..c {
        let (ga, be) = (p.gamma[ch], p.beta[ch]);
        y.channel_mut(ch).iter_mut().for_each(|v| *v = ga * *v + be);
    }
    Ok((y, NormCache { xhat, inv_std }))
}

/// Backward of [`normalize`]: `(grad_x, grad_gamma, grad_beta)`.
pub fn normalize_backward(p: &NormParams, cache: &NormCache, grad_y: &Tensor) -> Result<(Tensor, Vec<f64>, Vec<f64>)> {
    cache.xhat.check_same_shape(grad_y, "normalization gradient")?;
    let c = grad_y.channels();
    let n = grad_y.spatial_len();
    let gs = p.scheme.group_size(c)?;
    let mut ggamma = vec![0.0; c];
    let mut gbeta = vec![0.0; c];
    let mut gxhat = Tensor::zeros(c, grad_y.spatial());
    for ch in 0..c {
        let gy = grad_y.channel(ch);
        let xh = cache.xhat.channel(ch);
        ggamma[ch] = gy.iter().zip(xh).map(|(a, b)| a * b).sum();
        gbeta[ch] = gy.iter().sum();
        let ga = p.gamma[ch];
        gxhat.channel_mut(ch).iter_mut().zip(gy).for_each(|(o, g)| *o = g * ga);
    }
    let mut gx = Tensor::zeros(c, grad_y.spatial());
    for (g, &is) in cache.inv_std.iter().enumerate() {
        let r = g * gs * n..(g + 1) * gs * n;
        let gh = &gxhat.as_slice()[r.clone()];
        let xh = &cache.xhat.as_slice()[r.clone()];
        let m = gh.len() as f64;
        let mean_g = gh.iter().sum::<f64>() / m;
        let mean_gx = gh.iter().zip(xh).map(|(a, b)| a * b).sum::<f64>() / m;
        for ((o, a), b) in gx.as_mut_slice()[r].iter_mut().zip(gh).zip(xh) {
            *o = is * (a - mean_g - b * mean_gx);
        }
    }
    Ok((gx, ggamma, gbeta))
}

/// Coupling subnet: 3^d convolution, normalization, leaky ReLU.
#[derive(Debug, Clone, PartialEq)]
pub struct Subnet {
    pub conv: Conv3Weight,
    pub norm: NormParams,
    pub slope: f64,
}

/// Everything the subnet backward needs from its forward pass.
#[derive(Debug, Clone)]
pub struct SubnetCache {
    pub input: Tensor,
    pub norm: NormCache,
    /// Pre-activation (normalization output).
    pub pre: Tensor,
    pub output: Tensor,
}

impl SubnetCache {
    pub fn nbytes(&self) -> usize {
        self.input.nbytes() + self.norm.xhat.nbytes() + self.norm.inv_std.len() * 8 + self.pre.nbytes() + self.output.nbytes()
    }
    /// Number of tensors held.
    pub const TENSORS: usize = 4;
}

#[derive(Debug, Clone, PartialEq)]
pub struct SubnetGrads {
    pub conv: Conv3Weight,
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
}

impl Subnet {
    pub fn forward(&self, x: &Tensor) -> Result<SubnetCache> {
        let u = same_conv3(&self.conv, x)?;
        let (pre, norm) = normalize(&self.norm, &u)?;
        let slope = self.slope;
        let mut output = pre.clone();
        output.as_mut_slice().iter_mut().for_each(|v| {
            if *v < 0.0 {
                *v *= slope
            }
        });
        Ok(SubnetCache { input: x.clone(), norm, pre, output })
    }

    pub fn backward(&self, cache: &SubnetCache, grad_out: &Tensor) -> Result<(Tensor, SubnetGrads)> {
        let mut gpre = grad_out.clone();
        for (g, p) in gpre.as_mut_slice().iter_mut().zip(cache.pre.as_slice()) {
            if *p < 0.0 {
                *g *= self.slope;
            }
        }
        let (gu, gamma, beta) = normalize_backward(&self.norm, &cache.norm, &gpre)?;
        let (conv, gx) = same_conv3_backward(&self.conv, &cache.input, &gu)?;
        Ok((gx, SubnetGrads { conv, gamma, beta }))
    }
}

/// Additive `(x₁, x₂ + F(x₁))` or affine `(x₁, x₂·eˢ + t)` coupling.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "lowercase"))]
pub enum CouplingKind {
    Additive,
    Affine,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CouplingLayer {
    pub kind: CouplingKind,
    pub subnet: Subnet,
    /// When set, the second channel half conditions the first.
    pub swap: bool,
    /// Affine log-scale bound.
    pub clamp: f64,
}

impl CouplingLayer {
    /// Identity-initialized layer (normalization gain zero) with conv weights
    /// from `init_conv`.
    pub fn new(
        kind: CouplingKind,
        channels: usize,
        dim: usize,
        scheme: NormScheme,
        swap: bool,
        conv_init: impl FnOnce(&mut [f64]),
    ) -> Result<Self> {
        if channels < 2 || !channels.is_multiple_of(2) {
            return Err(shape_err!("coupling layers need an even channel count ≥ 2, got {channels}"));
        }
        let h = channels / 2;
        let c_out = match kind {
            CouplingKind::Additive => h,
            CouplingKind::Affine => 2 * h,
        };
        let mut conv = Conv3Weight::zeros(c_out, h, dim);
        conv_init(conv.as_mut_slice());
        let norm = NormParams::zero_init(scheme, c_out)?;
        Ok(CouplingLayer { kind, subnet: Subnet { conv, norm, slope: LEAKY_SLOPE }, swap, clamp: AFFINE_CLAMP })
    }

    pub fn channels(&self) -> usize {
        2 * self.subnet.conv.c_in()
    }

    fn check(&self, x: &Tensor) -> Result<()> {
        if !x.channels().is_multiple_of(2) {
            return Err(shape_err!("coupling on an odd channel count {}", x.channels()));
        }
        if x.channels() != self.channels() {
            return Err(shape_err!("coupling over {} channels got {}", self.channels(), x.channels()));
        }
        Ok(())
    }

    /// `(conditioning half, transformed half)`.
    fn halves(&self, x: &Tensor) -> (Tensor, Tensor) {
        let h = x.channels() / 2;
        let (a, b) = (x.channel_range(0, h), x.channel_range(h, 2 * h));
        if self.swap {
            (b, a)
        } else {
            (a, b)
        }
    }

    fn join(&self, cond: &Tensor, trans: &Tensor) -> Tensor {
        let parts = if self.swap { [trans, cond] } else { [cond, trans] };
        Tensor::concat(&parts).expect("halves share spatial extents")
    }

    /// `(s, t)` from the subnet output; `s` already clamped.
    fn scale_shift(&self, out: &Tensor) -> (Vec<f64>, Tensor) {
        let h = out.channels() / 2;
        let raw = out.channel_range(0, h);
        let c = self.clamp;
        let s = raw.as_slice().iter().map(|&r| c * math::tanh(r / c)).collect();
        (s, out.channel_range(h, 2 * h))
    }

    /// Applies the layer, returning `(y, log|det J|)`.
    pub fn forward(&self, x: &Tensor) -> Result<(Tensor, f64)> {
        self.check(x)?;
        let (x1, x2) = self.halves(x);
        let f = self.subnet.forward(&x1)?;
        Ok(self.finish_forward(&x1, &x2, &f.output))
    }

    fn finish_forward(&self, x1: &Tensor, x2: &Tensor, f: &Tensor) -> (Tensor, f64) {
        match self.kind {
            CouplingKind::Additive => {
                let mut y2 = x2.clone();
                y2.add_assign(f);
                (self.join(x1, &y2), 0.0)
            }
            CouplingKind::Affine => {
                let (s, t) = self.scale_shift(f);
                let mut y2 = x2.clone();
                for ((y, si), ti) in y2.as_mut_slice().iter_mut().zip(&s).zip(t.as_slice()) {
                    *y = *y * math::exp(*si) + ti;
                }
                (self.join(x1, &y2), s.iter().sum())
            }
        }
    }

    pub fn inverse(&self, y: &Tensor) -> Result<Tensor> {
        Ok(self.inverse_with_logdet(y)?.0)
    }

    /// Inverse map and `log|det|` of the inverse Jacobian at `y`.
    pub fn inverse_with_logdet(&self, y: &Tensor) -> Result<(Tensor, f64)> {
        self.check(y)?;
        let (y1, y2) = self.halves(y);
        let f = self.subnet.forward(&y1)?;
        let mut x2 = y2;
        let mut logdet = 0.0;
        match self.kind {
            CouplingKind::Additive => {
                for (v, fv) in x2.as_mut_slice().iter_mut().zip(f.output.as_slice()) {
                    *v -= fv;
                }
            }
            CouplingKind::Affine => {
                let (s, t) = self.scale_shift(&f.output);
                for ((v, si), ti) in x2.as_mut_slice().iter_mut().zip(&s).zip(t.as_slice()) {
                    *v = (*v - ti) * math::exp(-si);
                }
                logdet = -s.iter().sum::<f64>();
            }
        }
        Ok((self.join(&y1, &x2), logdet))
    }

    /// Runs the subnet on the conditioning half of `x` and keeps everything
    /// the backward pass needs.
    pub fn forward_cached(&self, x: &Tensor) -> Result<(Tensor, f64, CouplingCache)> {
        self.check(x)?;
        let (x1, x2) = self.halves(x);
        let sub = self.subnet.forward(&x1)?;
        let (y, logdet) = self.finish_forward(&x1, &x2, &sub.output);
        Ok((y, logdet, CouplingCache { x2, sub }))
    }

    /// Vector-Jacobian product given the layer input `x` (stored or
    /// reconstructed), the output cotangent `grad_y` and the weight of the
    /// log-determinant in the loss.
    pub fn backward(&self, x: &Tensor, grad_y: &Tensor, grad_logdet: f64) -> Result<(Tensor, SubnetGrads)> {
        let (_, _, cache) = self.forward_cached(x)?;
        self.backward_cached(&cache, grad_y, grad_logdet)
    }

    pub fn backward_cached(&self, cache: &CouplingCache, grad_y: &Tensor, grad_logdet: f64) -> Result<(Tensor, SubnetGrads)> {
        self.check(grad_y)?;
        let (gy1, gy2) = self.halves(grad_y);
        let (gx2, gf) = match self.kind {
            CouplingKind::Additive => (gy2.clone(), gy2),
            CouplingKind::Affine => {
                let out = &cache.sub.output;
                let h = out.channels() / 2;
                let (s, _) = self.scale_shift(out);
                let raw = out.channel_range(0, h);
                let mut gx2 = gy2.clone();
                let mut gf = Tensor::zeros(2 * h, out.spatial());
                let n = gy2.len();
                let c = self.clamp;
                #[allow(clippy::needless_range_loop)]
                for i in 0..n {
                    let e = math::exp(s[i]);
                    let g = gy2.as_slice()[i];
                    gx2.as_mut_slice()[i] = g * e;
                    let gs = g * cache.x2.as_slice()[i] * e + grad_logdet;
                    let th = math::tanh(raw.as_slice()[i] / c);
                    gf.as_mut_slice()[i] = gs * (1.0 - th * th);
                    gf.as_mut_slice()[n + i] = g;
                }
                (gx2, gf)
            }
        };
        let (mut gx1, grads) = self.subnet.backward(&cache.sub, &gf)?;
        gx1.add_assign(&gy1);
        Ok((self.join(&gx1, &gx2), grads))
    }

    /// `coupling_backward(layer, y, grad_y, recomputed_x)`: the spelling used
    /// by the reversible engine, where `x` was obtained by inverting `y`.
    /// Fails if re-applying the layer to `x` does not reproduce `y` to `tol`.
    pub fn backward_reconstructed(
        &self,
        y: &Tensor,
        grad_y: &Tensor,
        recomputed_x: &Tensor,
        grad_logdet: f64,
        tol: f64,
    ) -> Result<(Tensor, SubnetGrads, CouplingCache)> {
        let (y_again, _, cache) = self.forward_cached(recomputed_x)?;
        let err = y_again.rel_err(y);
        if !(err <= tol) {
            return Err(Error::Numeric(format!("coupling inversion drifted: relative round-trip error {err:e}")));
        }
        let (gx, grads) = self.backward_cached(&cache, grad_y, grad_logdet)?;
        Ok((gx, grads, cache))
    }
}

/// Forward intermediates of one coupling layer.
#[derive(Debug, Clone)]
pub struct CouplingCache {
    pub x2: Tensor,
    pub sub: SubnetCache,
}

impl CouplingCache {
    pub fn nbytes(&self) -> usize {
        self.x2.nbytes() + self.sub.nbytes()
    }
    pub const TENSORS: usize = 1 + SubnetCache::TENSORS;
}
