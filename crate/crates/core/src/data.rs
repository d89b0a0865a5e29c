//! Synthetic datasets and image metrics for the desk-scale experiments.
//!
//! Every generator is a pure function of its seed and parameters; all
//! randomness comes from [`SplitMix64`].

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{config_err, Error, Result};
use crate::math;
use crate::rng::SplitMix64;
use crate::tensor::Tensor;

/// Placement attempts per requested hole before giving up.
pub const HOLE_RETRIES: usize = 1000;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Disk {
    /// (row, column) in pixel units, pixel centres at `k + 0.5`.
    pub center: (f64, f64),
    pub radius: f64,
}

impl Disk {
    fn contains(&self, r: f64, c: f64) -> bool {
        let (dr, dc) = (r - self.center.0, c - self.center.1);
        dr * dr + dc * dc <= self.radius * self.radius
    }

    fn distance(&self, other: &Disk) -> f64 {
        let (dr, dc) = (self.center.0 - other.center.0, self.center.1 - other.center.1);
        math::sqrt(dr * dr + dc * dc)
    }
}

/// A solid disk with circular holes, rasterized to `1 × size × size`.
#[derive(Debug, Clone, PartialEq)]
pub struct FoamPhantom2D {
    pub size: usize,
    pub disk: Disk,
    pub holes: Vec<Disk>,
    /// Material 1, holes and background 0.
    pub image: Tensor,
}

impl FoamPhantom2D {
    pub fn mean(&self) -> f64 {
        self.image.as_slice().iter().sum::<f64>() / self.image.len() as f64
    }
}

/// Generates a foam phantom with `hole_count` non-overlapping holes placed by
/// rejection sampling.
pub fn gen_foam2d(seed: u64, size: usize, hole_count: usize) -> Result<FoamPhantom2D> {
    if size < 4 {
        return Err(config_err!("phantom size must be at least 4, got {size}"));
    }
    let n = size as f64;
    let mut rng = SplitMix64::new(seed);
    let radius = rng.uniform_range(0.32, 0.45) * n;
    let jitter = 0.5 * n - radius;
    let center = (0.5 * n + rng.uniform_range(-jitter, jitter) * 0.5, 0.5 * n + rng.uniform_range(-jitter, jitter) * 0.5);
    let disk = Disk { center, radius };
    let (r_min, r_max) = ((0.03 * n).max(1.0), (0.09 * n).max(1.5));
    let mut holes: Vec<Disk> = Vec::with_capacity(hole_count);
    let mut attempts = 0usize;
    while holes.len() < hole_count {
        if attempts >= HOLE_RETRIES * hole_count {
            return Err(Error::Generation(format!(
                "placed {} of {hole_count} holes in a {size}×{size} phantom after {attempts} attempts",
                holes.len()
            )));
        }
        attempts += 1;
        let r = rng.uniform_range(r_min, r_max);
        let reach = radius - r - 1.0;
        if reach <= 0.0 {
            continue;
        }
        let rho = reach * math::sqrt(rng.uniform());
        let phi = 2.0 * core::f64::consts::PI * rng.uniform();
        let hole = Disk { center: (center.0 + rho * math::sin(phi), center.1 + rho * math::cos(phi)), radius: r };
        if holes.iter().all(|h| h.distance(&hole) >= h.radius + hole.radius) {
            holes.push(hole);
        }
    }
    let mut data = vec![0.0; size * size];
    for i in 0..size {
        for j in 0..size {
            let (r, c) = (i as f64 + 0.5, j as f64 + 0.5);
            if disk.contains(r, c) && !holes.iter().any(|h| h.contains(r, c)) {
                data[i * size + j] = 1.0;
            }
        }
    }
    let image = Tensor::from_vec(1, &[size, size], data)?;
    Ok(FoamPhantom2D { size, disk, holes, image })
}

/// A clean image and its degraded observation.
#[derive(Debug, Clone, PartialEq)]
pub struct NoisySample {
    pub clean: Tensor,
    pub degraded: Tensor,
    pub seed: u64,
}

/// Separable Gaussian blur with standard deviation `radius` pixels along
/// every spatial axis, edges clamped.
pub fn gaussian_blur(x: &Tensor, radius: f64) -> Result<Tensor> {
    if !(radius >= 0.0) || !radius.is_finite() {
        return Err(config_err!("blur radius must be finite and non-negative, got {radius}"));
    }
    if radius == 0.0 {
        return Ok(x.clone());
    }
    let half = math::floor(3.0 * radius) as isize + 1;
    let mut taps: Vec<f64> = (-half..=half).map(|k| math::exp(-((k * k) as f64) / (2.0 * radius * radius))).collect();
    let total: f64 = taps.iter().sum();
    taps.iter_mut().for_each(|t| *t /= total);

    let spatial = x.spatial().to_vec();
    let mut cur = x.clone();
    for axis in 0..spatial.len() {
        let n = spatial[axis] as isize;
        let inner: usize = spatial[axis + 1..].iter().product();
        let outer = cur.len() / (inner * spatial[axis]);
        let src = cur.as_slice().to_vec();
        let dst = cur.as_mut_slice();
        for o in 0..outer {
            for p in 0..n {
                for q in 0..inner {
                    let mut acc = 0.0;
                    for (t, w) in taps.iter().enumerate() {
                        let k = (p + t as isize - half).clamp(0, n - 1) as usize;
                        acc += w * src[(o * spatial[axis] + k) * inner + q];
                    }
                    dst[(o * spatial[axis] + p as usize) * inner + q] = acc;
                }
            }
        }
    }
    Ok(cur)
}

/// Gaussian blur of standard deviation `blur_radius` followed by additive
/// Gaussian noise of standard deviation `noise_sigma`.
pub fn degrade(clean: &Tensor, noise_sigma: f64, blur_radius: f64, seed: u64) -> Result<NoisySample> {
    if !(noise_sigma >= 0.0) || !noise_sigma.is_finite() {
        return Err(config_err!("noise sigma must be finite and non-negative, got {noise_sigma}"));
    }
    let mut degraded = gaussian_blur(clean, blur_radius)?;
    if noise_sigma > 0.0 {
        let mut rng = SplitMix64::new(seed);
        for v in degraded.as_mut_slice() {
            *v += noise_sigma * rng.normal();
        }
    }
    Ok(NoisySample { clean: clean.clone(), degraded, seed })
}

/// Parameters of the foam denoising dataset.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(deny_unknown_fields))]
pub struct FoamSpec {
    pub size: usize,
    pub holes: usize,
    pub noise_sigma: f64,
    pub blur_radius: f64,
}

/// `count` phantom/degradation pairs; sample `k` uses seeds derived from
/// `(seed, k)`.
pub fn foam_dataset(seed: u64, count: usize, spec: &FoamSpec) -> Result<Vec<NoisySample>> {
    (0..count as u64)
        .map(|k| {
            let mut r = SplitMix64::derive(seed, k);
            let phantom = gen_foam2d(r.next_u64(), spec.size, spec.holes)?;
            degrade(&phantom.image, spec.noise_sigma, spec.blur_radius, r.next_u64())
        })
        .collect()
}

/// Peak signal-to-noise ratio.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Psnr {
    /// The inputs are equal (zero mean squared error).
    Identical,
    Db(f64),
}

impl Psnr {
    /// Decibels, with `+∞` for identical inputs.
    pub fn db(self) -> f64 {
        match self {
            Psnr::Identical => f64::INFINITY,
            Psnr::Db(v) => v,
        }
    }
}

/// `10·log₁₀(peak² / MSE)`.
pub fn psnr(a: &Tensor, b: &Tensor, peak: f64) -> Result<Psnr> {
    a.check_same_shape(b, "psnr")?;
    if !(peak > 0.0) {
        return Err(config_err!("peak must be positive, got {peak}"));
    }
    let mse = a.as_slice().iter().zip(b.as_slice()).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.len() as f64;
    Ok(if mse == 0.0 { Psnr::Identical } else { Psnr::Db(10.0 * math::log10(peak * peak / mse)) })
}

/// A two-dimensional Gaussian mixture with isotropic components.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(deny_unknown_fields))]
pub struct GaussianMixture2D {
    pub weights: Vec<f64>,
    pub means: Vec<[f64; 2]>,
    pub stds: Vec<f64>,
}

impl GaussianMixture2D {
    pub fn validate(&self) -> Result<()> {
        let k = self.weights.len();
        if k == 0 || self.means.len() != k || self.stds.len() != k {
            return Err(config_err!("mixture needs matching non-empty weights, means and stds"));
        }
        if self.weights.iter().any(|&w| !(w > 0.0)) || self.stds.iter().any(|&s| !(s > 0.0)) {
            return Err(config_err!("mixture weights and stds must be positive"));
        }
        Ok(())
    }

    /// Weighted mean of the component means.
    pub fn mean(&self) -> [f64; 2] {
        let total: f64 = self.weights.iter().sum();
        let mut m = [0.0; 2];
        for (w, mu) in self.weights.iter().zip(&self.means) {
            m[0] += w / total * mu[0];
            m[1] += w / total * mu[1];
        }
        m
    }

    /// One draw.
    pub fn sample(&self, rng: &mut SplitMix64) -> [f64; 2] {
        let total: f64 = self.weights.iter().sum();
        let mut u = rng.uniform() * total;
        let mut k = self.weights.len() - 1;
        for (i, w) in self.weights.iter().enumerate() {
            if u < *w {
                k = i;
                break;
            }
            u -= w;
        }
        let (a, b) = (rng.normal(), rng.normal());
        [self.means[k][0] + self.stds[k] * a, self.means[k][1] + self.stds[k] * b]
    }

    /// A `2 × spatial` tensor whose pixels are independent mixture draws
    /// (channel 0 holds the first coordinate, channel 1 the second).
    pub fn sample_tensor(&self, rng: &mut SplitMix64, spatial: &[usize]) -> Result<Tensor> {
        self.validate()?;
        let mut t = Tensor::zeros(2, spatial);
        let n = t.spatial_len();
        for p in 0..n {
            let [a, b] = self.sample(rng);
            t.as_mut_slice()[p] = a;
            t.as_mut_slice()[n + p] = b;
        }
        Ok(t)
    }

    /// `count` tensors drawn from the stream `(seed, k)`.
    pub fn dataset(&self, seed: u64, count: usize, spatial: &[usize]) -> Result<Vec<Tensor>> {
        (0..count as u64).map(|k| self.sample_tensor(&mut SplitMix64::derive(seed, k), spatial)).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn plain_disk_without_holes() {
        let p = gen_foam2d(1, 32, 0).unwrap();
        assert!(p.holes.is_empty());
        let area = p.image.as_slice().iter().sum::<f64>();
        let expect = core::f64::consts::PI * p.disk.radius * p.disk.radius;
        assert!((area - expect).abs() / expect < 0.1);
    }

    #[test]
    fn foam_is_reproducible_and_sane() {
        let a = gen_foam2d(7, 64, 20).unwrap();
        let b = gen_foam2d(7, 64, 20).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.holes.len(), 20);
        let m = a.mean();
        assert!(m > 0.0 && m < 1.0, "{m}");
        for h in &a.holes {
            assert!(h.distance(&a.disk) + h.radius <= a.disk.radius);
        }
        for (i, h) in a.holes.iter().enumerate() {
            for g in &a.holes[i + 1..] {
                assert!(h.distance(g) >= h.radius + g.radius);
            }
        }
    }

    #[test]
    fn infeasible_holes_fail() {
        assert!(matches!(gen_foam2d(0, 8, 50), Err(Error::Generation(_))));
    }

    #[test]
    fn no_degradation_is_identity() {
        let p = gen_foam2d(3, 16, 3).unwrap();
        let s = degrade(&p.image, 0.0, 0.0, 9).unwrap();
        assert_eq!(s.degraded, s.clean);
        assert_eq!(psnr(&s.degraded, &s.clean, 1.0).unwrap(), Psnr::Identical);
    }

    #[test]
    fn blur_preserves_constants() {
        let x = Tensor::filled(1, &[9, 7], 0.25);
        let y = gaussian_blur(&x, 1.3).unwrap();
        assert!(y.sub(&x).max_abs() < 1e-15);
    }

    #[test]
    fn psnr_closed_forms() {
        let a = Tensor::zeros(1, &[2, 2]);
        let b = Tensor::from_vec(1, &[2, 2], vec![1.0, 0.0, 0.0, 0.0]).unwrap();
        let v = psnr(&a, &b, 1.0).unwrap().db();
        assert!((v - 6.020599913279624).abs() < 1e-12);
        let c = Tensor::filled(1, &[2, 2], 2.0);
        assert_eq!(psnr(&a, &c, 2.0).unwrap(), Psnr::Db(0.0));
        assert!(psnr(&a, &Tensor::zeros(1, &[4]), 1.0).is_err());
    }

    #[test]
    fn mixture_mean() {
        let g = GaussianMixture2D { weights: vec![0.25, 0.75], means: vec![[-2.0, 1.0], [2.0, 0.0]], stds: vec![0.5, 0.5] };
        assert_eq!(g.mean(), [1.0, 0.25]);
        let mut rng = SplitMix64::new(2);
        let t = g.sample_tensor(&mut rng, &[64, 64]).unwrap();
        let n = t.spatial_len() as f64;
        let m0 = t.channel(0).iter().sum::<f64>() / n;
        let m1 = t.channel(1).iter().sum::<f64>() / n;
        assert!((m0 - 1.0).abs() < 0.1 && (m1 - 0.25).abs() < 0.05, "{m0} {m1}");
    }
}
