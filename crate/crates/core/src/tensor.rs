//! Channel-first tensors and the convolution primitives the network needs.
//!
//! Layout is fixed: channel-major, then spatial axes row-major (last axis
//! fastest). A `C×N₁×…×N_d` tensor stores entry `(c, p)` at
//! `c * (N₁⋯N_d) + flat(p)`.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{shape_err, Result};
use crate::linalg::{reorder_to_matrix, Kernel};
use crate::math;

/// Per-axis strides of an invertible resampling step.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(try_from = "Vec<usize>", into = "Vec<usize>"))]
pub struct StrideSpec {
    s: Vec<usize>,
}

impl StrideSpec {
    /// Requires 1 ≤ d ≤ 3, every stride ≥ 1 and channel multiplier σ ≥ 2.
    pub fn new(s: &[usize]) -> Result<Self> {
        if s.is_empty() || s.len() > 3 {
            return Err(shape_err!("stride spec must have 1 to 3 axes, got {}", s.len()));
        }
        if s.contains(&0) {
            return Err(shape_err!("strides must be positive: {s:?}"));
        }
        if s.iter().product::<usize>() < 2 {
            return Err(shape_err!("channel multiplier of {s:?} is below 2"));
        }
        Ok(StrideSpec { s: s.to_vec() })
    }

    pub fn uniform(d: usize, s: usize) -> Result<Self> {
        Self::new(&vec![s; d])
    }

    pub fn dim(&self) -> usize {
        self.s.len()
    }

    pub fn extents(&self) -> &[usize] {
        &self.s
    }

    /// σ = s₁⋯s_d.
    pub fn multiplier(&self) -> usize {
        self.s.iter().product()
    }
}

impl TryFrom<Vec<usize>> for StrideSpec {
    type Error = crate::Error;
    fn try_from(v: Vec<usize>) -> Result<Self> {
        StrideSpec::new(&v)
    }
}

impl From<StrideSpec> for Vec<usize> {
    fn from(s: StrideSpec) -> Vec<usize> {
        s.s
    }
}

/// A single sample: `channels × spatial` real array.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    channels: usize,
    spatial: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(channels: usize, spatial: &[usize]) -> Self {
        assert!(channels >= 1 && spatial.iter().all(|&n| n >= 1), "extents must be positive");
        let n: usize = spatial.iter().product();
        Tensor { channels, spatial: spatial.to_vec(), data: vec![0.0; channels * n] }
    }

    pub fn filled(channels: usize, spatial: &[usize], value: f64) -> Self {
        let mut t = Self::zeros(channels, spatial);
        t.data.iter_mut().for_each(|v| *v = value);
        t
    }

    pub fn from_vec(channels: usize, spatial: &[usize], data: Vec<f64>) -> Result<Self> {
        if channels == 0 || spatial.is_empty() || spatial.contains(&0) {
            return Err(shape_err!("extents must be positive: {channels}x{spatial:?}"));
        }
        let n: usize = spatial.iter().product();
        if data.len() != channels * n {
            return Err(shape_err!(
                "{} entries do not fill a {channels}x{spatial:?} tensor",
                data.len()
            ));
        }
        Ok(Tensor { channels, spatial: spatial.to_vec(), data })
    }

    /// Full shape `[C, N₁, …, N_d]`.
    pub fn shape(&self) -> Vec<usize> {
        let mut s = Vec::with_capacity(1 + self.spatial.len());
        s.push(self.channels);
        s.extend_from_slice(&self.spatial);
        s
    }

    pub fn from_shape_vec(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        if shape.len() < 2 {
            return Err(shape_err!("shape {shape:?} needs a channel and at least one spatial axis"));
        }
        Self::from_vec(shape[0], &shape[1..], data)
    }

    pub fn channels(&self) -> usize {
        self.channels
    }
    pub fn spatial(&self) -> &[usize] {
        &self.spatial
    }
    pub fn dim(&self) -> usize {
        self.spatial.len()
    }
    pub fn spatial_len(&self) -> usize {
        self.spatial.iter().product()
    }
    pub fn len(&self) -> usize {
        self.data.len()
    }
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }
    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }
    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }
    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }
    /// Payload size in bytes.
    pub fn nbytes(&self) -> usize {
        self.data.len() * core::mem::size_of::<f64>()
    }

    pub fn channel(&self, c: usize) -> &[f64] {
        let n = self.spatial_len();
        &self.data[c * n..(c + 1) * n]
    }

    pub fn channel_mut(&mut self, c: usize) -> &mut [f64] {
        let n = self.spatial_len();
        &mut self.data[c * n..(c + 1) * n]
    }

    /// Channels `range` as a new tensor.
    pub fn channel_range(&self, start: usize, end: usize) -> Tensor {
        assert!(start < end && end <= self.channels);
        let n = self.spatial_len();
        Tensor { channels: end - start, spatial: self.spatial.clone(), data: self.data[start * n..end * n].to_vec() }
    }

    /// Stacks tensors with equal spatial extents along the channel axis.
    pub fn concat(parts: &[&Tensor]) -> Result<Tensor> {
        let first = parts.first().ok_or_else(|| shape_err!("concat of nothing"))?;
        let mut data = Vec::with_capacity(parts.iter().map(|p| p.len()).sum());
        let mut channels = 0;
        for p in parts {
            if p.spatial != first.spatial {
                return Err(shape_err!("concat of spatial {:?} and {:?}", first.spatial, p.spatial));
            }
            channels += p.channels;
            data.extend_from_slice(&p.data);
        }
        Ok(Tensor { channels, spatial: first.spatial.clone(), data })
    }

    pub fn same_shape(&self, other: &Tensor) -> bool {
        self.channels == other.channels && self.spatial == other.spatial
    }

    pub(crate) fn check_same_shape(&self, other: &Tensor, what: &str) -> Result<()> {
        if !self.same_shape(other) {
            return Err(shape_err!("{what}: {:?} vs {:?}", self.shape(), other.shape()));
        }
        Ok(())
    }

    pub fn dot(&self, other: &Tensor) -> f64 {
        self.data.iter().zip(&other.data).map(|(a, b)| a * b).sum()
    }

    pub fn norm(&self) -> f64 {
        math::sqrt(self.dot(self))
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| f64::max(m, v.abs()))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn add_assign(&mut self, other: &Tensor) {
        debug_assert!(self.same_shape(other));
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn sub(&self, other: &Tensor) -> Tensor {
        debug_assert!(self.same_shape(other));
        let data = self.data.iter().zip(&other.data).map(|(a, b)| a - b).collect();
        Tensor { channels: self.channels, spatial: self.spatial.clone(), data }
    }

    pub fn scale(&self, k: f64) -> Tensor {
        Tensor { channels: self.channels, spatial: self.spatial.clone(), data: self.data.iter().map(|v| v * k).collect() }
    }

    /// `‖self − other‖ / ‖other‖` (absolute error when `other` is zero).
    pub fn rel_err(&self, other: &Tensor) -> f64 {
        let d = self.sub(other).norm();
        let n = other.norm();
        if n == 0.0 {
            d
        } else {
            d / n
        }
    }
}

/// Batch of equally shaped samples. Core operations act per sample; this
/// wrapper maps them and averages scalar results in a fixed order.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchTensor {
    samples: Vec<Tensor>,
}

impl BatchTensor {
    pub fn new(samples: Vec<Tensor>) -> Result<Self> {
        if let Some(first) = samples.first() {
            if samples.iter().any(|s| !s.same_shape(first)) {
                return Err(shape_err!("batch samples differ in shape"));
            }
        }
        Ok(BatchTensor { samples })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }
    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
    pub fn samples(&self) -> &[Tensor] {
        &self.samples
    }
    pub fn into_samples(self) -> Vec<Tensor> {
        self.samples
    }

    pub fn map<F>(&self, mut f: F) -> Result<BatchTensor>
    where
        F: FnMut(&Tensor) -> Result<Tensor>,
    {
        let out = self.samples.iter().map(&mut f).collect::<Result<Vec<_>>>()?;
        BatchTensor::new(out)
    }

    /// Mean of a per-sample scalar, summed in sample order.
    pub fn mean_of<F>(&self, mut f: F) -> Result<f64>
    where
        F: FnMut(&Tensor) -> Result<f64>,
    {
        if self.samples.is_empty() {
            return Err(shape_err!("mean over an empty batch"));
        }
        let mut acc = 0.0;
        for s in &self.samples {
            acc += f(s)?;
        }
        Ok(acc / self.samples.len() as f64)
    }
}

/// Row-major strides of an extent list.
fn row_major_strides(extents: &[usize]) -> Vec<usize> {
    let mut st = vec![1; extents.len()];
    for i in (0..extents.len().saturating_sub(1)).rev() {
        st[i] = st[i + 1] * extents[i + 1];
    }
    st
}

/// Iterates over all multi-indices of `extents` in row-major order.
fn for_each_index(extents: &[usize], mut f: impl FnMut(&[usize])) {
    let d = extents.len();
    let total: usize = extents.iter().product();
    let mut idx = vec![0usize; d];
    for _ in 0..total {
        f(&idx);
        for ax in (0..d).rev() {
            idx[ax] += 1;
            if idx[ax] < extents[ax] {
                break;
            }
            idx[ax] = 0;
        }
    }
}

/// For every output block `p` (row-major over `N ⊘ s`) and in-block offset
/// `j` (row-major over `s`), the flat input position; entry `p * σ + j`.
fn block_gather(spatial: &[usize], stride: &StrideSpec) -> Result<(Vec<usize>, Vec<usize>)> {
    let s = stride.extents();
    if spatial.len() != s.len() {
        return Err(shape_err!("{}-d stride applied to {}-d tensor", s.len(), spatial.len()));
    }
    if spatial.iter().zip(s).any(|(n, k)| n % k != 0) {
        return Err(shape_err!("spatial extents {spatial:?} are not divisible by strides {s:?}"));
    }
    let out: Vec<usize> = spatial.iter().zip(s).map(|(n, k)| n / k).collect();
    let in_strides = row_major_strides(spatial);
    let mut offsets = Vec::with_capacity(stride.multiplier());
    for_each_index(s, |o| offsets.push(o.iter().zip(&in_strides).map(|(a, b)| a * b).sum::<usize>()));
    let mut idx = Vec::with_capacity(spatial.iter().product());
    for_each_index(&out, |p| {
        let base: usize = p.iter().zip(s).zip(&in_strides).map(|((pi, si), st)| pi * si * st).sum();
        idx.extend(offsets.iter().map(|o| base + o));
    });
    Ok((idx, out))
}

/// `(p, e)` with `p + e = a·b` exactly (Dekker's product).
#[inline]
fn two_prod(a: f64, b: f64) -> (f64, f64) {
    const SPLIT: f64 = 134_217_729.0;
    let p = a * b;
    let (ca, cb) = (SPLIT * a, SPLIT * b);
    let (ah, bh) = (ca - (ca - a), cb - (cb - b));
    let (al, bl) = (a - ah, b - bh);
    (p, ((ah * bh - p) + ah * bl + al * bh) + al * bl)
}

/// Compensated dot product: as accurate as evaluating in twice the working
/// precision, then rounding. Keeps `D⁻¹(D x)` within a few ulps of `x`.
#[inline]
fn dot2(pairs: impl Iterator<Item = (f64, f64)>) -> f64 {
    let (mut s, mut c) = (0.0, 0.0);
    for (a, b) in pairs {
        let (p, e) = two_prod(a, b);
        let t = s + p;
        let z = t - s;
        c += ((s - (t - z)) + (p - z)) + e;
        s = t;
    }
    s + c
}

fn check_kernel(k: &Kernel, stride: &StrideSpec) -> Result<usize> {
    if k.spatial() != stride.extents() {
        return Err(shape_err!("kernel extents {:?} differ from strides {:?}", k.spatial(), stride.extents()));
    }
    let sigma = stride.multiplier();
    if k.out_channels() != sigma {
        return Err(shape_err!("kernel has {} filters, channel multiplier is {sigma}", k.out_channels()));
    }
    Ok(sigma)
}

/// Stride-equals-kernel convolution of a one-channel tensor.
///
/// Windows do not overlap, so each output pixel vector is `A · patch` with
/// `A = R⁻¹(K)`; the implementation gathers all patches and multiplies them
/// by the σ×σ matrix.
pub fn conv_block(k: &Kernel, x: &Tensor, stride: &StrideSpec) -> Result<Tensor> {
    let sigma = check_kernel(k, stride)?;
    if x.channels() != 1 {
        return Err(shape_err!("conv_block expects one input channel, got {}", x.channels()));
    }
    let (idx, out_spatial) = block_gather(x.spatial(), stride)?;
    let a = reorder_to_matrix(k)?;
    let a = a.as_slice();
    let npos = idx.len() / sigma;
    let mut y = Tensor::zeros(sigma, &out_spatial);
    let xs = x.as_slice();
    let ys = y.as_mut_slice();
    let mut patch = vec![0.0; sigma];
    for p in 0..npos {
        for (j, v) in patch.iter_mut().enumerate() {
            *v = xs[idx[p * sigma + j]];
        }
        for i in 0..sigma {
            let row = &a[i * sigma..(i + 1) * sigma];
            ys[i * npos + p] = dot2(row.iter().copied().zip(patch.iter().copied()));
        }
    }
    Ok(y)
}

/// Transposed convolution: the exact adjoint of [`conv_block`].
pub fn conv_block_transpose(k: &Kernel, y: &Tensor, stride: &StrideSpec) -> Result<Tensor> {
    let sigma = check_kernel(k, stride)?;
    if y.channels() != sigma {
        return Err(shape_err!("transposed conv expects {sigma} channels, got {}", y.channels()));
    }
    if y.dim() != stride.dim() {
        return Err(shape_err!("{}-d stride applied to {}-d tensor", stride.dim(), y.dim()));
    }
    let in_spatial: Vec<usize> = y.spatial().iter().zip(stride.extents()).map(|(n, s)| n * s).collect();
    let (idx, _) = block_gather(&in_spatial, stride)?;
    let a = reorder_to_matrix(k)?;
    let a = a.as_slice();
    let npos = y.spatial_len();
    let mut x = Tensor::zeros(1, &in_spatial);
    let ys = y.as_slice();
    let xs = x.as_mut_slice();
    for p in 0..npos {
        for j in 0..sigma {
            xs[idx[p * sigma + j]] = dot2((0..sigma).map(|i| (a[i * sigma + j], ys[i * npos + p])));
        }
    }
    Ok(x)
}

/// Adjoint of `K ↦ conv_block(K, x)` in the kernel variable:
/// `⟨conv_block(K, x), g⟩ = ⟨K, conv_kernel_adjoint(g, x)⟩`.
pub fn conv_kernel_adjoint(g: &Tensor, x: &Tensor, stride: &StrideSpec) -> Result<Kernel> {
    if x.channels() != 1 {
        return Err(shape_err!("conv_kernel_adjoint expects one input channel, got {}", x.channels()));
    }
    let sigma = stride.multiplier();
    let (idx, out_spatial) = block_gather(x.spatial(), stride)?;
    if g.channels() != sigma || g.spatial() != out_spatial.as_slice() {
        return Err(shape_err!(
            "gradient shape {:?} does not match conv output [{sigma}, {out_spatial:?}]",
            g.shape()
        ));
    }
    let npos = idx.len() / sigma;
    let mut data = vec![0.0; sigma * sigma];
    let gs = g.as_slice();
    let xs = x.as_slice();
    for i in 0..sigma {
        let gi = &gs[i * npos..(i + 1) * npos];
        for (p, &gv) in gi.iter().enumerate() {
            if gv == 0.0 {
                continue;
            }
            for j in 0..sigma {
                data[i * sigma + j] += gv * xs[idx[p * sigma + j]];
            }
        }
    }
    Kernel::from_vec(sigma, stride.extents(), data)
}

/// Dense `C_out × C_in × 3^d` weights for the zero-padded, stride-1,
/// shape-preserving convolution.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv3Weight {
    c_out: usize,
    c_in: usize,
    dim: usize,
    data: Vec<f64>,
}

impl Conv3Weight {
    pub fn zeros(c_out: usize, c_in: usize, dim: usize) -> Self {
        Conv3Weight { c_out, c_in, dim, data: vec![0.0; c_out * c_in * 3usize.pow(dim as u32)] }
    }

    pub fn from_vec(c_out: usize, c_in: usize, dim: usize, data: Vec<f64>) -> Result<Self> {
        let taps = 3usize.pow(dim as u32);
        if data.len() != c_out * c_in * taps {
            return Err(shape_err!("conv weight has {} entries, expected {}", data.len(), c_out * c_in * taps));
        }
        Ok(Conv3Weight { c_out, c_in, dim, data })
    }

    /// `C_out = C_in` kernel with a unit delta at the centre tap.
    pub fn identity(c: usize, dim: usize) -> Self {
        let mut w = Self::zeros(c, c, dim);
        let centre = w.taps() / 2;
        for i in 0..c {
            let t = w.taps();
            w.data[(i * c + i) * t + centre] = 1.0;
        }
        w
    }

    pub fn taps(&self) -> usize {
        3usize.pow(self.dim as u32)
    }
    pub fn c_out(&self) -> usize {
        self.c_out
    }
    pub fn c_in(&self) -> usize {
        self.c_in
    }
    pub fn dim(&self) -> usize {
        self.dim
    }
    pub fn shape(&self) -> Vec<usize> {
        let mut s = vec![self.c_out, self.c_in];
        s.extend(core::iter::repeat_n(3, self.dim));
        s
    }
    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }
    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }
    pub fn data_mut(&mut self) -> &mut Vec<f64> {
        &mut self.data
    }

    /// Weight of tap `t` (row-major over {−1,0,1}^d) from `ci` to `co`.
    pub fn at(&self, co: usize, ci: usize, t: usize) -> f64 {
        self.data[(co * self.c_in + ci) * self.taps() + t]
    }
}

/// For each of the 3^d taps, the `(dst, src)` flat position pairs that stay
/// inside the image.
fn shift_pairs(spatial: &[usize]) -> Vec<Vec<(u32, u32)>> {
    let d = spatial.len();
    let strides = row_major_strides(spatial);
    let mut taps = Vec::with_capacity(3usize.pow(d as u32));
    for_each_index(&vec![3; d], |off| {
        let mut pairs = Vec::new();
        for_each_index(spatial, |p| {
            let mut src = 0usize;
            for ax in 0..d {
                let q = p[ax] as isize + off[ax] as isize - 1;
                if q < 0 || q >= spatial[ax] as isize {
                    return;
                }
                src += q as usize * strides[ax];
            }
            let dst: usize = p.iter().zip(&strides).map(|(a, b)| a * b).sum();
            pairs.push((dst as u32, src as u32));
        });
        taps.push(pairs);
    });
    taps
}

fn check_conv3(w: &Conv3Weight, x: &Tensor) -> Result<()> {
    if x.channels() != w.c_in {
        return Err(shape_err!("conv expects {} input channels, got {}", w.c_in, x.channels()));
    }
    if x.dim() != w.dim {
        return Err(shape_err!("{}-d conv weight applied to {}-d tensor", w.dim, x.dim()));
    }
    Ok(())
}

/// Zero-padded, stride-1 3^d convolution (cross-correlation) preserving
/// spatial extents.
pub fn same_conv3(w: &Conv3Weight, x: &Tensor) -> Result<Tensor> {
    check_conv3(w, x)?;
    let n = x.spatial_len();
    let taps = shift_pairs(x.spatial());
    let mut y = Tensor::zeros(w.c_out, x.spatial());
    let xs = x.as_slice();
    let ys = y.as_mut_slice();
    for co in 0..w.c_out {
        let yc = &mut ys[co * n..(co + 1) * n];
        for ci in 0..w.c_in {
            let xc = &xs[ci * n..(ci + 1) * n];
            for (t, pairs) in taps.iter().enumerate() {
                let wv = w.at(co, ci, t);
                if wv == 0.0 {
                    continue;
                }
                for &(dst, src) in pairs {
                    yc[dst as usize] += wv * xc[src as usize];
                }
            }
        }
    }
    Ok(y)
}

/// Vector-Jacobian product of [`same_conv3`]: returns `(grad_w, grad_x)`.
pub fn same_conv3_backward(w: &Conv3Weight, x: &Tensor, grad_y: &Tensor) -> Result<(Conv3Weight, Tensor)> {
    check_conv3(w, x)?;
    if grad_y.channels() != w.c_out || grad_y.spatial() != x.spatial() {
        return Err(shape_err!("conv output gradient has shape {:?}", grad_y.shape()));
    }
    let n = x.spatial_len();
    let taps = shift_pairs(x.spatial());
    let mut gw = Conv3Weight::zeros(w.c_out, w.c_in, w.dim);
    let mut gx = Tensor::zeros(w.c_in, x.spatial());
    let xs = x.as_slice();
    let gys = grad_y.as_slice();
    let ntaps = w.taps();
    for co in 0..w.c_out {
        let gyc = &gys[co * n..(co + 1) * n];
        for ci in 0..w.c_in {
            let xc = &xs[ci * n..(ci + 1) * n];
            let gxc = &mut gx.as_mut_slice()[ci * n..(ci + 1) * n];
            for (t, pairs) in taps.iter().enumerate() {
                let wv = w.at(co, ci, t);
                let mut acc = 0.0;
                for &(dst, src) in pairs {
                    let g = gyc[dst as usize];
                    acc += g * xc[src as usize];
                    gxc[src as usize] += wv * g;
                }
                gw.data[(co * w.c_in + ci) * ntaps + t] = acc;
            }
        }
    }
    Ok((gw, gx))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::{reorder_to_kernel, Matrix};

    fn haar() -> Matrix {
        Matrix::from_rows(&[
            [1.0, 1.0, -1.0, -1.0],
            [1.0, 1.0, 1.0, 1.0],
            [1.0, -1.0, 1.0, -1.0],
            [1.0, -1.0, -1.0, 1.0],
        ])
        .scale(0.5)
    }

    #[test]
    fn stride_spec_validation() {
        assert!(StrideSpec::new(&[]).is_err());
        assert!(StrideSpec::new(&[1]).is_err());
        assert!(StrideSpec::new(&[2, 2, 2, 2]).is_err());
        assert!(StrideSpec::new(&[0, 2]).is_err());
        assert_eq!(StrideSpec::new(&[2, 3]).unwrap().multiplier(), 6);
    }

    #[test]
    fn pixel_shuffle_of_single_patch() {
        let s = StrideSpec::new(&[2, 2]).unwrap();
        let k = reorder_to_kernel(&Matrix::identity(4), &s).unwrap();
        let x = Tensor::from_vec(1, &[2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let y = conv_block(&k, &x, &s).unwrap();
        assert_eq!(y.shape(), vec![4, 1, 1]);
        assert_eq!(y.as_slice(), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn haar_on_constant_image() {
        let s = StrideSpec::new(&[2, 2]).unwrap();
        let k = reorder_to_kernel(&haar(), &s).unwrap();
        let x = Tensor::filled(1, &[4, 6], 0.75);
        let y = conv_block(&k, &x, &s).unwrap();
        for c in 0..4 {
            let expect = if c == 1 { 1.5 } else { 0.0 };
            assert!(y.channel(c).iter().all(|&v| v == expect), "channel {c}: {:?}", y.channel(c));
        }
    }

    #[test]
    fn inverse_pixel_shuffle_tiles_checkerboard() {
        let s = StrideSpec::new(&[2, 2]).unwrap();
        let k = reorder_to_kernel(&Matrix::identity(4), &s).unwrap();
        let mut y = Tensor::zeros(4, &[2, 2]);
        for c in 0..4 {
            y.channel_mut(c).iter_mut().for_each(|v| *v = (c + 1) as f64);
        }
        let x = conv_block_transpose(&k, &y, &s).unwrap();
        #[rustfmt::skip]
        let expect = [
            1.0, 2.0, 1.0, 2.0,
            3.0, 4.0, 3.0, 4.0,
            1.0, 2.0, 1.0, 2.0,
            3.0, 4.0, 3.0, 4.0,
        ];
        assert_eq!(x.as_slice(), &expect);
    }

    #[test]
    fn divisibility_is_enforced() {
        let s = StrideSpec::new(&[2, 2]).unwrap();
        let k = reorder_to_kernel(&Matrix::identity(4), &s).unwrap();
        let x = Tensor::zeros(1, &[3, 4]);
        assert!(matches!(conv_block(&k, &x, &s), Err(crate::Error::Shape(_))));
        let y = Tensor::zeros(3, &[2, 2]);
        assert!(conv_block_transpose(&k, &y, &s).is_err());
    }

    #[test]
    fn kernel_adjoint_trivial_cases() {
        let s = StrideSpec::new(&[2, 2]).unwrap();
        let x = Tensor::from_vec(1, &[4, 4], (0..16).map(|v| v as f64).collect()).unwrap();
        let g = Tensor::zeros(4, &[2, 2]);
        let k = conv_kernel_adjoint(&g, &x, &s).unwrap();
        assert!(k.as_slice().iter().all(|&v| v == 0.0));

        // One-hot gradient at channel 2, block (1, 0): filter 2 = that patch.
        let mut g = Tensor::zeros(4, &[2, 2]);
        g.channel_mut(2)[2] = 1.0;
        let k = conv_kernel_adjoint(&g, &x, &s).unwrap();
        for i in 0..4 {
            let expect: &[f64] = if i == 2 { &[8.0, 9.0, 12.0, 13.0] } else { &[0.0; 4] };
            assert_eq!(k.filter(i), expect);
        }
        assert!(conv_kernel_adjoint(&Tensor::zeros(4, &[2, 3]), &x, &s).is_err());
    }

    #[test]
    fn conv3_identity_and_zero() {
        let x = Tensor::from_vec(2, &[3, 4], (0..24).map(|v| v as f64 * 0.5 - 3.0).collect()).unwrap();
        assert_eq!(same_conv3(&Conv3Weight::identity(2, 2), &x).unwrap(), x);
        let y = same_conv3(&Conv3Weight::zeros(3, 2, 2), &x).unwrap();
        assert_eq!(y.shape(), vec![3, 3, 4]);
        assert!(y.as_slice().iter().all(|&v| v == 0.0));
        assert!(same_conv3(&Conv3Weight::zeros(3, 1, 2), &x).is_err());
    }

    #[test]
    fn conv3_zero_padding_at_border() {
        // All-ones 1D kernel: y_i = x_{i-1} + x_i + x_{i+1}, zero outside.
        let w = Conv3Weight::from_vec(1, 1, 1, vec![1.0, 1.0, 1.0]).unwrap();
        let x = Tensor::from_vec(1, &[4], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(same_conv3(&w, &x).unwrap().as_slice(), &[3.0, 6.0, 9.0, 7.0]);
    }

    #[test]
    fn batch_mean_is_ordered_average() {
        let b = BatchTensor::new(vec![Tensor::filled(1, &[2], 1.0), Tensor::filled(1, &[2], 3.0)]).unwrap();
        assert_eq!(b.mean_of(|t| Ok(t.as_slice()[0])).unwrap(), 2.0);
        let doubled = b.map(|t| Ok(t.scale(2.0))).unwrap();
        assert_eq!(doubled.samples()[1].as_slice(), &[6.0, 6.0]);
        assert!(BatchTensor::new(vec![Tensor::zeros(1, &[2]), Tensor::zeros(1, &[3])]).is_err());
    }
}
