//! Property tests of the structural invariants.

mod common;

use common::rand_tensor;
use iunet_core::iunet::{IUNet, IUNetConfig};
use iunet_core::layers::{concat, normalize, split, CouplingKind, Fraction, NormParams, NormScheme};
use iunet_core::linalg::{matrix_exp, matrix_exp_frechet, skew, Kernel, Matrix};
use iunet_core::resample::{Mode, ResampleOp};
use iunet_core::rng::SplitMix64;
use iunet_core::tensor::{conv_block, conv_block_transpose, conv_kernel_adjoint, same_conv3, same_conv3_backward, Conv3Weight, StrideSpec};
use iunet_core::Tensor;
use proptest::prelude::*;

fn rand_matrix(rng: &mut SplitMix64, n: usize, std: f64) -> Matrix {
    let mut m = Matrix::zeros(n, n);
    rng.fill_normal(m.as_mut_slice(), std);
    m
}

/// Skew matrix with Frobenius norm exactly `norm`.
fn skew_with_norm(rng: &mut SplitMix64, n: usize, norm: f64) -> Matrix {
    let s = skew(&rand_matrix(rng, n, 1.0)).unwrap();
    let f = s.frobenius_norm();
    s.scale(norm / f)
}

/// Sliding-window convolution with kernel size = stride, written out over
/// padded 3-d indices.
fn naive_conv_block(k: &Kernel, x: &Tensor, s: &[usize]) -> Tensor {
    let d = s.len();
    let mut n = [1usize; 3];
    let mut st = [1usize; 3];
    n[..d].copy_from_slice(x.spatial());
    st[..d].copy_from_slice(s);
    let out = [n[0] / st[0], n[1] / st[1], n[2] / st[2]];
    let sigma = st[0] * st[1] * st[2];
    let out_spatial: Vec<usize> = out[..d].to_vec();
    let mut y = Tensor::zeros(sigma, &out_spatial);
    let npos = out[0] * out[1] * out[2];
    for i in 0..sigma {
        let f = k.filter(i);
        for a in 0..out[0] {
            for b in 0..out[1] {
                for c in 0..out[2] {
                    let mut acc = 0.0;
                    for u in 0..st[0] {
                        for v in 0..st[1] {
                            for w in 0..st[2] {
                                let xi = ((a * st[0] + u) * n[1] + b * st[1] + v) * n[2] + c * st[2] + w;
                                acc += f[(u * st[1] + v) * st[2] + w] * x.as_slice()[xi];
                            }
                        }
                    }
                    y.as_mut_slice()[i * npos + (a * out[1] + b) * out[2] + c] = acc;
                }
            }
        }
    }
    y
}

fn stride_strategy() -> impl Strategy<Value = Vec<usize>> {
    prop_oneof![
        (2usize..=4).prop_map(|s| vec![s]),
        prop::collection::vec(2usize..=3, 2),
        Just(vec![2, 2, 2]),
        Just(vec![2, 1]),
        Just(vec![1, 3]),
    ]
    .prop_filter("σ ≥ 2", |s| s.iter().product::<usize>() >= 2)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn exp_of_skew_is_special_orthogonal(seed in any::<u64>(), n in prop::sample::select(vec![2usize, 3, 4, 8, 9]), norm in 0.0f64..10.0) {
        let mut rng = SplitMix64::new(seed);
        let s = skew_with_norm(&mut rng, n, norm);
        let m = matrix_exp(&s).unwrap();
        prop_assert!(m.orthogonality_defect() <= 1e-10, "{}", m.orthogonality_defect());
        prop_assert!((m.det().unwrap() - 1.0).abs() <= 1e-10);
        let inv = matrix_exp(&s.scale(-1.0)).unwrap();
        let prod = m.matmul(&inv).unwrap().sub(&Matrix::identity(n)).unwrap();
        prop_assert!(prod.frobenius_norm() <= 1e-10);
    }

    #[test]
    fn frechet_is_linear_with_adjoint(seed in any::<u64>(), n in 2usize..=8, a in -2.0f64..2.0, b in -2.0f64..2.0) {
        let mut rng = SplitMix64::new(seed);
        let s = rand_matrix(&mut rng, n, 0.6);
        let (h1, h2, g) = (rand_matrix(&mut rng, n, 1.0), rand_matrix(&mut rng, n, 1.0), rand_matrix(&mut rng, n, 1.0));
        let mut comb = h1.scale(a);
        comb.axpy(b, &h2).unwrap();
        let lhs = matrix_exp_frechet(&s, &comb).unwrap();
        let mut rhs = matrix_exp_frechet(&s, &h1).unwrap().scale(a);
        rhs.axpy(b, &matrix_exp_frechet(&s, &h2).unwrap()).unwrap();
        prop_assert!(lhs.sub(&rhs).unwrap().frobenius_norm() <= 1e-12 * (1.0 + rhs.frobenius_norm()));
        let left = matrix_exp_frechet(&s, &h1).unwrap().inner(&g).unwrap();
        let right = h1.inner(&matrix_exp_frechet(&s.transpose(), &g).unwrap()).unwrap();
        prop_assert!((left - right).abs() <= 1e-10 * (1.0 + left.abs()));
    }

    #[test]
    fn conv_block_matches_sliding_window(seed in any::<u64>(), s in stride_strategy(), reps in 1usize..=3) {
        let mut rng = SplitMix64::new(seed);
        let stride = StrideSpec::new(&s).unwrap();
        let sigma = stride.multiplier();
        let spatial: Vec<usize> = s.iter().map(|k| k * reps).collect();
        let mut x = Tensor::zeros(1, &spatial);
        rng.fill_normal(x.as_mut_slice(), 1.0);
        let mut kd = vec![0.0; sigma * sigma];
        rng.fill_normal(&mut kd, 1.0);
        let k = Kernel::from_vec(sigma, &s, kd).unwrap();
        let fast = conv_block(&k, &x, &stride).unwrap();
        let slow = naive_conv_block(&k, &x, &s);
        prop_assert!(fast.sub(&slow).max_abs() <= 1e-12);

        let mut g = Tensor::zeros(sigma, fast.spatial());
        rng.fill_normal(g.as_mut_slice(), 1.0);
        let lhs = fast.dot(&g);
        prop_assert!((lhs - x.dot(&conv_block_transpose(&k, &g, &stride).unwrap())).abs() <= 1e-10 * (1.0 + lhs.abs()));
        prop_assert!((lhs - k.inner(&conv_kernel_adjoint(&g, &x, &stride).unwrap())).abs() <= 1e-10 * (1.0 + lhs.abs()));
    }

    #[test]
    fn resampling_is_orthogonal(seed in any::<u64>(), s in stride_strategy(), channels in 1usize..=3, shared in any::<bool>(), std in 0.0f64..0.6) {
        let mut rng = SplitMix64::new(seed);
        let op = ResampleOp::random(StrideSpec::new(&s).unwrap(), channels, shared, std, Mode::Down, &mut rng);
        let mut shape = vec![channels];
        shape.extend(s.iter().map(|k| 2 * k));
        let x = rand_tensor(&mut rng, &shape, 1.0);
        let y = op.down_forward(&x).unwrap();
        prop_assert_eq!(y.len(), x.len());
        prop_assert!((y.norm() - x.norm()).abs() <= 1e-12 * x.norm());
        prop_assert!(op.up_forward(&y).unwrap().rel_err(&x) <= 1e-12);
        let g = rand_tensor(&mut rng, &y.shape(), 1.0);
        let lhs = y.dot(&g);
        prop_assert!((lhs - x.dot(&op.up_forward(&g).unwrap())).abs() <= 1e-10 * (1.0 + lhs.abs()));
    }

    #[test]
    fn symmetric_theta_is_pixel_shuffle(seed in any::<u64>(), s in stride_strategy()) {
        let mut rng = SplitMix64::new(seed);
        let stride = StrideSpec::new(&s).unwrap();
        let sigma = stride.multiplier();
        let a = rand_matrix(&mut rng, sigma, 1.0);
        let sym = a.add(&a.transpose()).unwrap();
        let op = ResampleOp::new(stride.clone(), 1, vec![sym], Mode::Down).unwrap();
        let shuffle = ResampleOp::pixel_shuffle(stride, 1, Mode::Down);
        let spatial: Vec<usize> = s.iter().map(|k| 2 * k).collect();
        let x = rand_tensor(&mut rng, &[&[1][..], &spatial[..]].concat(), 1.0);
        prop_assert_eq!(op.down_forward(&x).unwrap(), shuffle.down_forward(&x).unwrap());
    }

    #[test]
    fn same_conv3_adjoint(seed in any::<u64>(), dim in 1usize..=3, ci in 1usize..=3, co in 1usize..=3) {
        let mut rng = SplitMix64::new(seed);
        let spatial = vec![3usize; dim];
        let mut w = Conv3Weight::zeros(co, ci, dim);
        rng.fill_normal(w.as_mut_slice(), 1.0);
        let x = rand_tensor(&mut rng, &[&[ci][..], &spatial[..]].concat(), 1.0);
        let g = rand_tensor(&mut rng, &[&[co][..], &spatial[..]].concat(), 1.0);
        let (gw, gx) = same_conv3_backward(&w, &x, &g).unwrap();
        let lhs = same_conv3(&w, &x).unwrap().dot(&g);
        prop_assert!((lhs - x.dot(&gx)).abs() <= 1e-10 * (1.0 + lhs.abs()));
        let wg: f64 = w.as_slice().iter().zip(gw.as_slice()).map(|(a, b)| a * b).sum();
        prop_assert!((lhs - wg).abs() <= 1e-10 * (1.0 + lhs.abs()));
    }

    #[test]
    fn split_concat_round_trip(seed in any::<u64>(), den in 2usize..=4, groups in 1usize..=3) {
        let c = den * groups;
        let f = Fraction::new(1, den).unwrap();
        let x = rand_tensor(&mut SplitMix64::new(seed), &[c, 3, 2], 1.0);
        let (keep, skip) = split(&x, f).unwrap();
        prop_assert_eq!(keep.channels(), groups);
        prop_assert_eq!(concat(&keep, &skip).unwrap(), x);
    }

    #[test]
    fn normalization_statistics(seed in any::<u64>(), groups in prop::sample::select(vec![1usize, 2, 4])) {
        let x = rand_tensor(&mut SplitMix64::new(seed), &[4, 5, 3], 2.0);
        let mut p = NormParams::unit(NormScheme::Group(4 / groups), 4).unwrap();
        p.eps = 1e-300;
        let (y, _) = normalize(&p, &x).unwrap();
        let per = 4 / groups * 15;
        for g in 0..groups {
            let part = &y.as_slice()[g * per..(g + 1) * per];
            let mean = part.iter().sum::<f64>() / per as f64;
            let var = part.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / per as f64;
            prop_assert!(mean.abs() <= 1e-12 && (var - 1.0).abs() <= 1e-12);
        }
    }
}

#[test]
fn identity_init_is_exact_with_pixel_shuffle_resamplers() {
    let mut cfg = IUNetConfig::uniform(&[16, 16], 2, 4, 2, Fraction::HALF, 3).unwrap();
    cfg.theta_init_std = 0.0;
    let net = IUNet::build(&cfg, 1).unwrap();
    let x = rand_tensor(&mut SplitMix64::new(2), &net.io_shape(), 1.0);
    let (y, ld) = net.apply(&x).unwrap();
    assert_eq!(y, x);
    assert_eq!(ld, 0.0);
}

fn net_strategy() -> impl Strategy<Value = (IUNetConfig, u64)> {
    (1usize..=3, 2usize..=4, prop::bool::ANY, prop::bool::ANY, 1usize..=2, any::<u64>()).prop_filter_map(
        "valid architecture",
        |(dim, scales, affine, dsf, couplings, seed)| {
            if dim == 3 && scales > 2 {
                return None;
            }
            let extent = 1usize << (scales - 1);
            let spatial = vec![extent * if dim == 1 { 2 } else { 1 }; dim];
            let mut cfg = IUNetConfig::uniform(&spatial, 2, scales, 2, Fraction::HALF, couplings).ok()?;
            cfg.coupling = if affine { CouplingKind::Affine } else { CouplingKind::Additive };
            cfg.downsample_first = dsf;
            cfg.ladder().ok()?;
            Some((cfg, seed))
        },
    )
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn network_invariants((cfg, seed) in net_strategy()) {
        let mut net = IUNet::build(&cfg, seed).unwrap();
        let mut rng = SplitMix64::new(seed ^ 0x5eed);
        let x = rand_tensor(&mut rng, &net.io_shape(), 1.0);

        // Identity at initialization up to rounding in the resamplers, exactly
        // zero log-determinant.
        let (y, ld) = net.apply(&x).unwrap();
        prop_assert!(y.rel_err(&x) <= 1e-15, "{:e}", y.rel_err(&x));
        prop_assert_eq!(ld, 0.0);

        // The total dimension is conserved across every internal cut.
        let trace = net.dimension_trace(&x).unwrap();
        prop_assert!(trace.iter().all(|&n| n == x.len()), "{:?}", trace);

        // Round trip with non-trivial parameters.
        common::randomize(&mut net, &mut rng, 0.3);
        let (y, ld) = net.apply(&x).unwrap();
        prop_assert!(net.inverse(&y).unwrap().rel_err(&x) <= 1e-8);
        if cfg.coupling == CouplingKind::Additive {
            prop_assert_eq!(ld, 0.0);
        }
    }
}
