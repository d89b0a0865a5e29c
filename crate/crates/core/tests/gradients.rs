//! Analytic gradients against central finite differences.

mod common;

use common::{fd_gradient, rand_tensor, randomize, rel_err};
use iunet_core::iunet::{IUNet, IUNetConfig, TapeMode};
use iunet_core::layers::{CouplingKind, CouplingLayer, Fraction, NormScheme};
use iunet_core::linalg::{matrix_exp, matrix_exp_frechet, skew, Matrix};
use iunet_core::resample::{Mode, ResampleOp};
use iunet_core::rng::SplitMix64;
use iunet_core::tensor::{same_conv3, same_conv3_backward, Conv3Weight, StrideSpec};
use iunet_core::Tensor;

fn rand_matrix(rng: &mut SplitMix64, n: usize, std: f64) -> Matrix {
    let mut m = Matrix::zeros(n, n);
    rng.fill_normal(m.as_mut_slice(), std);
    m
}

#[test]
fn frechet_matches_central_differences() {
    let mut rng = SplitMix64::new(11);
    for &n in &[2usize, 4, 8, 9] {
        for _ in 0..5 {
            let s = skew(&rand_matrix(&mut rng, n, 0.7)).unwrap();
            let h = rand_matrix(&mut rng, n, 1.0);
            let analytic = matrix_exp_frechet(&s, &h).unwrap();
            let step = 1e-5;
            let mut sp = s.clone();
            sp.axpy(step, &h).unwrap();
            let mut sm = s.clone();
            sm.axpy(-step, &h).unwrap();
            let fd = matrix_exp(&sp).unwrap().sub(&matrix_exp(&sm).unwrap()).unwrap().scale(0.5 / step);
            let err = rel_err(analytic.as_slice(), fd.as_slice());
            assert!(err <= 1e-6, "n = {n}: {err:e}");
        }
    }
}

#[test]
fn frechet_of_commuting_direction() {
    // For H = S the derivative is S·exp(S).
    let mut rng = SplitMix64::new(12);
    let s = skew(&rand_matrix(&mut rng, 4, 0.5)).unwrap();
    let d = matrix_exp_frechet(&s, &s).unwrap();
    let expect = s.matmul(&matrix_exp(&s).unwrap()).unwrap();
    assert!(rel_err(d.as_slice(), expect.as_slice()) < 1e-13);
}

#[test]
fn theta_gradient_through_resampling() {
    let mut rng = SplitMix64::new(13);
    let cases: [(&[usize], usize, bool); 5] = [(&[2], 3, false), (&[3], 2, true), (&[2, 2], 2, false), (&[2, 2], 3, true), (&[2, 2, 2], 1, false)];
    for (strides, channels, shared) in cases {
        let stride = StrideSpec::new(strides).unwrap();
        let spatial: Vec<usize> = strides.iter().map(|s| s * 2).collect();
        let mut op = ResampleOp::random(stride, channels, shared, 0.5, Mode::Down, &mut rng);
        let mut shape = vec![channels];
        shape.extend(&spatial);
        let x = rand_tensor(&mut rng, &shape, 1.0);
        let w = rand_tensor(&mut rng, &op.down_forward(&x).unwrap().shape(), 1.0);
        let analytic: Vec<f64> = op.grad_theta(&x, &w).unwrap().into_iter().flat_map(Matrix::into_vec).collect();
        let mut flat: Vec<f64> = op.thetas().iter().flat_map(|t| t.as_slice().to_vec()).collect();
        let n = op.thetas()[0].as_slice().len();
        let fd = fd_gradient(&mut flat, 1e-6, |p| {
            for (k, t) in op.thetas_mut().iter_mut().enumerate() {
                t.as_mut_slice().copy_from_slice(&p[k * n..(k + 1) * n]);
            }
            op.down_forward(&x).unwrap().dot(&w)
        });
        let err = rel_err(&analytic, &fd);
        assert!(err <= 1e-5, "{strides:?} shared={shared}: {err:e}");
    }
}

#[test]
fn up_mode_backward_matches_differences() {
    let mut rng = SplitMix64::new(14);
    let mut op = ResampleOp::random(StrideSpec::uniform(2, 2).unwrap(), 2, false, 0.4, Mode::Up, &mut rng);
    let y = rand_tensor(&mut rng, &[8, 2, 2], 1.0);
    let w = rand_tensor(&mut rng, &[2, 4, 4], 1.0);
    let (gx, gt) = op.apply_backward(&y, &w).unwrap();
    let analytic: Vec<f64> = gt.into_iter().flat_map(Matrix::into_vec).collect();
    let mut flat: Vec<f64> = op.thetas().iter().flat_map(|t| t.as_slice().to_vec()).collect();
    let fd = fd_gradient(&mut flat, 1e-6, |p| {
        for (k, t) in op.thetas_mut().iter_mut().enumerate() {
            t.as_mut_slice().copy_from_slice(&p[k * 16..(k + 1) * 16]);
        }
        op.apply(&y).unwrap().dot(&w)
    });
    assert!(rel_err(&analytic, &fd) <= 1e-5);
    let mut yv = y.as_slice().to_vec();
    let fdx = fd_gradient(&mut yv, 1e-6, |v| op.apply(&Tensor::from_vec(8, &[2, 2], v.to_vec()).unwrap()).unwrap().dot(&w));
    assert!(rel_err(gx.as_slice(), &fdx) <= 1e-7);
}

#[test]
fn conv3_backward_matches_differences() {
    let mut rng = SplitMix64::new(15);
    for (dim, spatial) in [(1usize, vec![7usize]), (2, vec![5, 4]), (3, vec![3, 4, 3])] {
        let mut w = Conv3Weight::zeros(3, 2, dim);
        rng.fill_normal(w.as_mut_slice(), 0.5);
        let mut shape = vec![2];
        shape.extend(&spatial);
        let x = rand_tensor(&mut rng, &shape, 1.0);
        let mut oshape = vec![3];
        oshape.extend(&spatial);
        let g = rand_tensor(&mut rng, &oshape, 1.0);
        let (gw, gx) = same_conv3_backward(&w, &x, &g).unwrap();
        let mut wv = w.as_slice().to_vec();
        let fdw = fd_gradient(&mut wv, 1e-6, |v| {
            let w2 = Conv3Weight::from_vec(3, 2, dim, v.to_vec()).unwrap();
            same_conv3(&w2, &x).unwrap().dot(&g)
        });
        let mut xv = x.as_slice().to_vec();
        let fdx = fd_gradient(&mut xv, 1e-6, |v| same_conv3(&w, &Tensor::from_shape_vec(&shape, v.to_vec()).unwrap()).unwrap().dot(&g));
        assert!(rel_err(gw.as_slice(), &fdw) <= 1e-5, "dim {dim}");
        assert!(rel_err(gx.as_slice(), &fdx) <= 1e-5, "dim {dim}");
    }
}

/// Loss `⟨w, y⟩ + c·logdet` of a coupling layer.
fn coupling_loss(l: &CouplingLayer, x: &Tensor, w: &Tensor, c: f64) -> f64 {
    let (y, ld) = l.forward(x).unwrap();
    y.dot(w) + c * ld
}

#[test]
fn coupling_backward_matches_differences() {
    let mut rng = SplitMix64::new(16);
    for kind in [CouplingKind::Additive, CouplingKind::Affine] {
        for (swap, scheme) in [(false, NormScheme::Layer), (true, NormScheme::Group(2))] {
            let mut l = CouplingLayer::new(kind, 4, 2, scheme, swap, |w| rng.fill_normal(w, 0.4)).unwrap();
            rng.fill_normal(&mut l.subnet.norm.gamma, 0.8);
            rng.fill_normal(&mut l.subnet.norm.beta, 0.3);
            let x = rand_tensor(&mut rng, &[4, 3, 4], 1.0);
            let w = rand_tensor(&mut rng, &[4, 3, 4], 1.0);
            let c = -0.7;
            let (gx, grads) = l.backward(&x, &w, c).unwrap();

            let mut xv = x.as_slice().to_vec();
            let fdx = fd_gradient(&mut xv, 1e-6, |v| coupling_loss(&l, &Tensor::from_vec(4, &[3, 4], v.to_vec()).unwrap(), &w, c));
            assert!(rel_err(gx.as_slice(), &fdx) <= 1e-5, "{kind:?} swap={swap}");

            let mut cv = l.subnet.conv.as_slice().to_vec();
            let mut probe = l.clone();
            let fdc = fd_gradient(&mut cv, 1e-6, |v| {
                probe.subnet.conv.as_mut_slice().copy_from_slice(v);
                coupling_loss(&probe, &x, &w, c)
            });
            assert!(rel_err(grads.conv.as_slice(), &fdc) <= 1e-5, "{kind:?} conv");

            let mut gv = l.subnet.norm.gamma.clone();
            let mut probe = l.clone();
            let fdg = fd_gradient(&mut gv, 1e-6, |v| {
                probe.subnet.norm.gamma.copy_from_slice(v);
                coupling_loss(&probe, &x, &w, c)
            });
            assert!(rel_err(&grads.gamma, &fdg) <= 1e-5, "{kind:?} gamma");

            let mut bv = l.subnet.norm.beta.clone();
            let mut probe = l.clone();
            let fdb = fd_gradient(&mut bv, 1e-6, |v| {
                probe.subnet.norm.beta.copy_from_slice(v);
                coupling_loss(&probe, &x, &w, c)
            });
            assert!(rel_err(&grads.beta, &fdb) <= 1e-5, "{kind:?} beta");
        }
    }
}

fn small_net(kind: CouplingKind, seed: u64) -> IUNet {
    let cfg = IUNetConfig::uniform(&[8], 4, 2, 2, Fraction::HALF, 1).unwrap().with_coupling(kind);
    let mut net = IUNet::build(&cfg, seed).unwrap();
    randomize(&mut net, &mut SplitMix64::new(seed + 100), 0.4);
    net
}

#[test]
fn whole_net_conventional_backward_matches_differences() {
    for (kind, seed) in [(CouplingKind::Additive, 1u64), (CouplingKind::Affine, 2)] {
        let mut net = small_net(kind, seed);
        assert!(net.param_count() <= 200, "{}", net.param_count());
        let mut rng = SplitMix64::new(seed);
        let x = rand_tensor(&mut rng, &net.io_shape(), 1.0);
        let w = rand_tensor(&mut rng, &net.io_shape(), 1.0);
        let c = 0.5;
        let pass = net.forward(&x, TapeMode::Record).unwrap();
        let report = net.backward_conventional_with_logdet(&pass, &w, c).unwrap();
        let analytic = report.flat();

        let specs = net.param_specs();
        let mut flat: Vec<f64> = net.named_params().into_iter().flat_map(|p| p.data).collect();
        let fd = fd_gradient(&mut flat, 1e-6, |p| {
            let mut off = 0;
            for (slot, s) in net.params_mut().into_iter().zip(&specs) {
                let n: usize = s.shape.iter().product();
                slot.copy_from_slice(&p[off..off + n]);
                off += n;
            }
            let (y, ld) = net.apply(&x).unwrap();
            y.dot(&w) + c * ld
        });
        let err = rel_err(&analytic, &fd);
        assert!(err <= 1e-5, "{kind:?}: {err:e}");
    }
}

#[test]
fn expansion_convs_get_gradients() {
    let mut cfg = IUNetConfig::uniform(&[4, 4], 2, 2, 2, Fraction::HALF, 1).unwrap();
    cfg.data_channels = Some(1);
    let mut net = IUNet::build(&cfg, 4).unwrap();
    randomize(&mut net, &mut SplitMix64::new(5), 0.3);
    let mut rng = SplitMix64::new(6);
    let x = rand_tensor(&mut rng, &net.io_shape(), 1.0);
    let w = rand_tensor(&mut rng, &net.io_shape(), 1.0);
    let report = net.backward_memeff(&x, &w).unwrap();
    for name in ["expand.in", "expand.out"] {
        let g = report.get(name).unwrap();
        let p = net.named_params().into_iter().find(|p| p.name == name).unwrap();
        let mut v = p.data.clone();
        let fd = fd_gradient(&mut v, 1e-6, |d| {
            net.set_param(name, d).unwrap();
            net.apply(&x).unwrap().0.dot(&w)
        });
        net.set_param(name, &p.data).unwrap();
        assert!(rel_err(&g.data, &fd) <= 1e-5, "{name}");
    }
}
