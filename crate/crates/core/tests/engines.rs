//! Reversible versus conventional backpropagation.

mod common;

use common::{rand_tensor, randomize, rel_err};
use iunet_core::iunet::{IUNet, IUNetConfig, TapeMode};
use iunet_core::layers::{CouplingKind, Fraction, NormScheme};
use iunet_core::rng::SplitMix64;
use iunet_core::tensor::StrideSpec;
use iunet_core::Error;

/// A random valid configuration drawn from `rng`.
pub fn random_config(rng: &mut SplitMix64) -> IUNetConfig {
    loop {
        let dim = 1 + rng.below(3) as usize;
        let scales = 2 + rng.below(if dim == 3 { 1 } else { 2 }) as usize;
        let s: usize = if dim == 1 && rng.below(2) == 0 { 3 } else { 2 };
        let extent = s.pow(scales as u32 - 1) * if dim == 3 { 1 } else { 2 };
        let spatial = vec![extent; dim];
        let channels = [2usize, 4][rng.below(2) as usize];
        let couplings = 1 + rng.below(3) as usize;
        let mut cfg = IUNetConfig::uniform(&spatial, channels, scales, s, Fraction::HALF, couplings).unwrap();
        cfg.coupling = if rng.below(2) == 0 { CouplingKind::Additive } else { CouplingKind::Affine };
        cfg.share_theta = rng.below(2) == 0;
        cfg.downsample_first = rng.below(3) == 0;
        cfg.theta_init_std = 0.3;
        if rng.below(3) == 0 {
            cfg.norm = NormScheme::Group(1);
        }
        if cfg.ladder().is_ok() {
            return cfg;
        }
    }
}

#[test]
fn engines_agree_on_random_configs() {
    let mut rng = SplitMix64::new(2024);
    let mut worst: f64 = 0.0;
    for case in 0..20 {
        let cfg = random_config(&mut rng);
        let mut net = IUNet::build(&cfg, case).unwrap();
        randomize(&mut net, &mut rng, 0.3);
        let x = rand_tensor(&mut rng, &net.io_shape(), 1.0);
        let w = rand_tensor(&mut rng, &net.io_shape(), 1.0);
        let pass = net.forward(&x, TapeMode::Record).unwrap();
        let conv = net.backward_conventional_with_logdet(&pass, &w, 0.25).unwrap();
        let me = net.backward_memeff_with(&x, |_, _| Ok((w.clone(), 0.25))).unwrap();
        let err = rel_err(&me.flat(), &conv.flat());
        worst = worst.max(err);
        assert!(err <= 1e-9, "case {case} {cfg:?}: {err:e}");
        assert_eq!(me.output, conv.output);
        assert_eq!(me.logdet, conv.logdet);
    }
    assert!(worst.is_finite());
}

#[test]
fn reversible_engine_reports_drift() {
    // Huge weights put the truncated exponential far outside its accurate
    // range; the reversible engine must name the block instead of returning
    // wrong gradients.
    let cfg = IUNetConfig::uniform(&[4, 4], 2, 2, 2, Fraction::HALF, 2).unwrap().with_coupling(CouplingKind::Affine);
    let mut net = IUNet::build(&cfg, 0).unwrap();
    randomize(&mut net, &mut SplitMix64::new(1), 30.0);
    let x = rand_tensor(&mut SplitMix64::new(2), &net.io_shape(), 1e6);
    match net.backward_memeff(&x, &x) {
        Err(Error::Numeric(m)) => assert!(["left[", "right[", "down[", "up["].iter().any(|b| m.starts_with(b)), "{m}"),
        other => panic!("expected a numeric error, got {other:?}"),
    }
}

fn bench_config(delta: usize) -> IUNetConfig {
    IUNetConfig::uniform(&[32, 32], 4, 4, 2, Fraction::HALF, delta).unwrap()
}

#[test]
fn memory_trend_in_depth() {
    let mut ratios = Vec::new();
    let mut me_counts = Vec::new();
    let mut me_bytes = Vec::new();
    let mut conv_bytes = Vec::new();
    for delta in [2usize, 4, 8] {
        let net = IUNet::build(&bench_config(delta), 0).unwrap();
        let x = rand_tensor(&mut SplitMix64::new(3), &net.io_shape(), 1.0);
        let me = net.backward_memeff(&x, &x).unwrap();
        let pass = net.forward(&x, TapeMode::Record).unwrap();
        let conv = net.backward_conventional(&pass, &x).unwrap();
        ratios.push(me.peak_stored_activation_bytes as f64 / conv.peak_stored_activation_bytes as f64);
        me_counts.push(me.stored_tensor_count);
        me_bytes.push(me.peak_stored_activation_bytes);
        conv_bytes.push(conv.peak_stored_activation_bytes);
    }
    assert!(ratios.windows(2).all(|w| w[0] > w[1]), "{ratios:?}");
    assert!(me_counts.windows(2).all(|w| w[0] == w[1]), "{me_counts:?}");
    assert!(me_bytes.windows(2).all(|w| w[0] == w[1]), "{me_bytes:?}");
    assert!(conv_bytes.windows(2).all(|w| w[1] > w[0]), "{conv_bytes:?}");
}

#[test]
fn stride_spec_validation() {
    assert!(StrideSpec::new(&[1]).is_err());
    assert!(StrideSpec::new(&[2, 0]).is_err());
    assert!(StrideSpec::new(&[2, 2, 2, 2]).is_err());
    assert_eq!(StrideSpec::new(&[2, 1]).unwrap().multiplier(), 2);
}
