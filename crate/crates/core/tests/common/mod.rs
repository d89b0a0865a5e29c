#![allow(dead_code)]

use iunet_core::iunet::IUNet;
use iunet_core::rng::SplitMix64;
use iunet_core::Tensor;

pub fn rand_tensor(rng: &mut SplitMix64, shape: &[usize], std: f64) -> Tensor {
    let mut t = Tensor::zeros(shape[0], &shape[1..]);
    rng.fill_normal(t.as_mut_slice(), std);
    t
}

/// Replaces every parameter by a Gaussian draw so no layer is the identity.
pub fn randomize(net: &mut IUNet, rng: &mut SplitMix64, std: f64) {
    for p in net.params_mut() {
        rng.fill_normal(p, std);
    }
}

pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    let num: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let den: f64 = b.iter().map(|y| y * y).sum::<f64>().sqrt();
    if den == 0.0 {
        num
    } else {
        num / den
    }
}

/// Central difference of `f` along every coordinate of `x`.
pub fn fd_gradient(x: &mut [f64], h: f64, mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    (0..x.len())
        .map(|i| {
            let orig = x[i];
            x[i] = orig + h;
            let fp = f(x);
            x[i] = orig - h;
            let fm = f(x);
            x[i] = orig;
            (fp - fm) / (2.0 * h)
        })
        .collect()
}
