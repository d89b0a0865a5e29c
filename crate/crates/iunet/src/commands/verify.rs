//! `verify`: quick invariant checks over every module.

use std::fmt::Write as _;

use iunet_core::data::{foam_dataset, psnr, FoamSpec, GaussianMixture2D, Psnr};
use iunet_core::flow::FlowModel;
use iunet_core::iunet::TapeMode;
use iunet_core::layers::{CouplingKind, Fraction};
use iunet_core::linalg::{matrix_exp, matrix_exp_frechet, skew};
use iunet_core::resample::{haar_theta, Mode};
use iunet_core::rng::SplitMix64;
use iunet_core::{IUNet, IUNetConfig, Matrix, ResampleOp, StrideSpec, Tensor};

/// Test hooks that corrupt state before the checks run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum Fault {
    /// One θ entry of the orthogonality suite becomes NaN.
    NonfiniteTheta,
}

pub const GROUPS: [&str; 9] = ["linalg", "orthogonality", "roundtrip", "gradients", "engines", "logdet", "memory", "identity", "data"];

type Check = Result<String, String>;

#[derive(Debug, Clone, PartialEq)]
pub struct GroupResult {
    pub group: &'static str,
    pub outcome: Check,
}

/// Runs `only` (or every group) and returns one result per group.
pub fn run(only: Option<&str>, fault: Option<Fault>) -> Vec<GroupResult> {
    GROUPS
        .iter()
        .filter(|g| only.is_none_or(|o| o == **g))
        .map(|&group| {
            let outcome = match group {
                "linalg" => linalg(),
                "orthogonality" => orthogonality(fault),
                "roundtrip" => roundtrip(),
                "gradients" => gradients(),
                "engines" => engines(),
                "logdet" => logdet(),
                "memory" => memory(),
                "identity" => identity(),
                _ => data(),
            };
            GroupResult { group, outcome }
        })
        .collect()
}

fn ensure(ok: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg())
    }
}

fn e2s<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let num: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let den: f64 = b.iter().map(|y| y * y).sum::<f64>().sqrt();
    if den == 0.0 {
        num
    } else {
        num / den
    }
}

fn rand_matrix(rng: &mut SplitMix64, n: usize, std: f64) -> Matrix {
    let mut m = Matrix::zeros(n, n);
    rng.fill_normal(m.as_mut_slice(), std);
    m
}

fn rand_tensor(rng: &mut SplitMix64, shape: &[usize]) -> Tensor {
    let mut t = Tensor::zeros(shape[0], &shape[1..]);
    rng.fill_normal(t.as_mut_slice(), 1.0);
    t
}

fn random_net(cfg: &IUNetConfig, seed: u64, std: f64) -> Result<IUNet, String> {
    let mut net = IUNet::build(cfg, seed).map_err(e2s)?;
    let mut rng = SplitMix64::derive(seed, 1);
    for p in net.params_mut() {
        rng.fill_normal(p, std);
    }
    Ok(net)
}

fn small_config(spatial: &[usize], scales: usize, kind: CouplingKind) -> Result<IUNetConfig, String> {
    Ok(IUNetConfig::uniform(spatial, 4, scales, 2, Fraction::HALF, 2).map_err(e2s)?.with_coupling(kind))
}

fn linalg() -> Check {
    let m = matrix_exp(&skew(&haar_theta()).map_err(e2s)?).map_err(e2s)?;
    let haar = [1.0, 1.0, -1.0, -1.0, 1.0, 1.0, 1.0, 1.0, 1.0, -1.0, 1.0, -1.0, 1.0, -1.0, -1.0, 1.0];
    let err = m.as_slice().iter().zip(haar).map(|(a, b)| (a - 0.5 * b).abs()).fold(0.0, f64::max);
    ensure(err <= 1e-12, || format!("Haar exponential off by {err:e}"))?;
    let mut rng = SplitMix64::new(11);
    let mut worst: f64 = 0.0;
    for _ in 0..5 {
        let s = skew(&rand_matrix(&mut rng, 4, 0.5)).map_err(e2s)?;
        let dir = rand_matrix(&mut rng, 4, 1.0);
        let h = 1e-5;
        let plus = matrix_exp(&s.add(&dir.scale(h)).map_err(e2s)?).map_err(e2s)?;
        let minus = matrix_exp(&s.sub(&dir.scale(h)).map_err(e2s)?).map_err(e2s)?;
        let fd = plus.sub(&minus).map_err(e2s)?.scale(0.5 / h);
        let exact = matrix_exp_frechet(&s, &dir).map_err(e2s)?;
        worst = worst.max(rel_err(exact.as_slice(), fd.as_slice()));
    }
    ensure(worst <= 1e-6, || format!("Fréchet derivative vs differences: {worst:e}"))?;
    Ok(format!("haar {err:.1e}, frechet {worst:.1e}"))
}

fn orthogonality(fault: Option<Fault>) -> Check {
    let mut rng = SplitMix64::new(12);
    let (mut defect, mut det_err): (f64, f64) = (0.0, 0.0);
    let mut count = 0;
    for d in 1..=3u32 {
        for s in [2usize, 3] {
            let sigma = s.pow(d);
            for k in 0..34 {
                let mut theta = rand_matrix(&mut rng, sigma, 1.0 / (sigma as f64).sqrt());
                if fault == Some(Fault::NonfiniteTheta) && count == 0 && k == 0 {
                    theta[(0, 1)] = f64::NAN;
                }
                count += 1;
                let m = match skew(&theta).and_then(|s| matrix_exp(&s)) {
                    Ok(m) => m,
                    Err(e) => return Err(format!("d={d} s={s}: {e}")),
                };
                let dd = m.orthogonality_defect();
                let det = m.det().map_err(e2s)?;
                ensure(dd <= 1e-10, || format!("d={d} s={s}: ‖MᵀM − I‖_F = {dd:e}"))?;
                ensure((det - 1.0).abs() <= 1e-10, || format!("d={d} s={s}: det = {det}"))?;
                defect = defect.max(dd);
                det_err = det_err.max((det - 1.0).abs());
            }
        }
    }
    Ok(format!("{count} matrices, defect {defect:.1e}, |det − 1| {det_err:.1e}"))
}

fn roundtrip() -> Check {
    let mut rng = SplitMix64::new(13);
    let mut worst: f64 = 0.0;
    for k in 0..20 {
        let (d, s) = ([1usize, 2, 3][k % 3], 2 + k % 2);
        let stride = StrideSpec::uniform(d, s).map_err(e2s)?;
        let op = ResampleOp::random(stride, 2, false, 0.3, Mode::Down, &mut rng);
        let x = rand_tensor(&mut rng, &[vec![2], vec![2 * s; d]].concat());
        let back = op.up_forward(&op.down_forward(&x).map_err(e2s)?).map_err(e2s)?;
        worst = worst.max(back.rel_err(&x));
    }
    ensure(worst <= 1e-11, || format!("resampling round trip {worst:e}"))?;
    let mut net_worst: f64 = 0.0;
    for (m, spatial) in [(2usize, [8usize, 8]), (3, [8, 8]), (4, [8, 8])] {
        for kind in [CouplingKind::Additive, CouplingKind::Affine] {
            let net = random_net(&small_config(&spatial, m, kind)?, m as u64, 0.3)?;
            let x = rand_tensor(&mut rng, &net.io_shape());
            let (y, _) = net.apply(&x).map_err(e2s)?;
            let err = net.inverse(&y).map_err(e2s)?.rel_err(&x);
            ensure(err <= 1e-8, || format!("iUNet m={m} {kind:?}: {err:e}"))?;
            net_worst = net_worst.max(err);
        }
    }
    Ok(format!("resample {worst:.1e}, iunet {net_worst:.1e}"))
}

fn gradients() -> Check {
    let mut rng = SplitMix64::new(14);
    let stride = StrideSpec::uniform(2, 2).map_err(e2s)?;
    let mut op = ResampleOp::random(stride, 1, true, 0.4, Mode::Down, &mut rng);
    let x = rand_tensor(&mut rng, &[1, 4, 4]);
    let g = rand_tensor(&mut rng, &[4, 2, 2]);
    let exact = op.grad_theta(&x, &g).map_err(e2s)?.remove(0);
    let h = 1e-6;
    let mut fd = vec![0.0; 16];
    for (i, v) in fd.iter_mut().enumerate() {
        let orig = op.thetas()[0].as_slice()[i];
        op.thetas_mut()[0].as_mut_slice()[i] = orig + h;
        let fp = op.down_forward(&x).map_err(e2s)?.dot(&g);
        op.thetas_mut()[0].as_mut_slice()[i] = orig - h;
        let fm = op.down_forward(&x).map_err(e2s)?.dot(&g);
        op.thetas_mut()[0].as_mut_slice()[i] = orig;
        *v = (fp - fm) / (2.0 * h);
    }
    let theta_err = rel_err(exact.as_slice(), &fd);
    ensure(theta_err <= 1e-5, || format!("θ gradient {theta_err:e}"))?;

    let cfg = IUNetConfig::uniform(&[8], 4, 2, 2, Fraction::HALF, 1).map_err(e2s)?.with_coupling(CouplingKind::Affine);
    let mut net = random_net(&cfg, 5, 0.3)?;
    let x = rand_tensor(&mut rng, &net.io_shape());
    let w = rand_tensor(&mut rng, &net.io_shape());
    let pass = net.forward(&x, TapeMode::Record).map_err(e2s)?;
    let exact = net.backward_conventional_with_logdet(&pass, &w, 0.5).map_err(e2s)?.flat();
    let loss = |net: &IUNet| net.apply(&x).map(|(y, ld)| y.dot(&w) + 0.5 * ld);
    let mut fd = Vec::with_capacity(exact.len());
    let n_arrays = net.param_specs().len();
    for a in 0..n_arrays {
        let len = net.params_mut()[a].len();
        for i in 0..len {
            let orig = net.params_mut()[a][i];
            net.params_mut()[a][i] = orig + h;
            let fp = loss(&net).map_err(e2s)?;
            net.params_mut()[a][i] = orig - h;
            let fm = loss(&net).map_err(e2s)?;
            net.params_mut()[a][i] = orig;
            fd.push((fp - fm) / (2.0 * h));
        }
    }
    let net_err = rel_err(&exact, &fd);
    ensure(net_err <= 1e-5, || format!("network gradient {net_err:e}"))?;
    Ok(format!("θ {theta_err:.1e}, network ({} params) {net_err:.1e}", exact.len()))
}

fn engines() -> Check {
    let mut rng = SplitMix64::new(15);
    let mut worst: f64 = 0.0;
    for (k, (spatial, m)) in [(vec![16], 3), (vec![8, 8], 3), (vec![4, 4, 4], 2)].into_iter().enumerate() {
        let kind = if k % 2 == 0 { CouplingKind::Affine } else { CouplingKind::Additive };
        let mut cfg = small_config(&spatial, m, kind)?;
        cfg.theta_init_std = 0.3;
        let net = random_net(&cfg, 20 + k as u64, 0.3)?;
        let x = rand_tensor(&mut rng, &net.io_shape());
        let w = rand_tensor(&mut rng, &net.io_shape());
        let pass = net.forward(&x, TapeMode::Record).map_err(e2s)?;
        let conv = net.backward_conventional_with_logdet(&pass, &w, 0.25).map_err(e2s)?;
        let me = net.backward_memeff_with(&x, |_, _| Ok((w.clone(), 0.25))).map_err(e2s)?;
        let err = rel_err(&me.flat(), &conv.flat());
        ensure(err <= 1e-9, || format!("{spatial:?} m={m}: engines differ by {err:e}"))?;
        worst = worst.max(err);
    }
    Ok(format!("3 configs, worst {worst:.1e}"))
}

fn logdet() -> Check {
    let mut rng = SplitMix64::new(16);
    let mut worst: f64 = 0.0;
    for kind in [CouplingKind::Affine, CouplingKind::Additive] {
        let net = random_net(&small_config(&[4, 4], 2, kind)?, 30, 0.3)?;
        let flow = FlowModel::new(net).map_err(e2s)?;
        let x = rand_tensor(&mut rng, &flow.data_shape());
        let (_, ld) = flow.forward(&x).map_err(e2s)?;
        if kind == CouplingKind::Additive {
            ensure(ld == 0.0, || format!("additive logdet {ld:e}"))?;
        } else {
            let brute = flow.brute_force_logdet(&x, 1e-5).map_err(e2s)?;
            worst = (ld - brute).abs();
            ensure(worst <= 1e-4, || format!("affine logdet {ld} vs brute force {brute}"))?;
        }
    }
    Ok(format!("affine |Δ| {worst:.1e}, additive exactly 0"))
}

fn memory() -> Check {
    let mut rng = SplitMix64::new(17);
    let mut rows = Vec::new();
    for delta in [2usize, 4, 8] {
        let cfg = IUNetConfig::uniform(&[16, 16], 4, 3, 2, Fraction::HALF, delta).map_err(e2s)?;
        let net = random_net(&cfg, 40, 0.1)?;
        let x = rand_tensor(&mut rng, &net.io_shape());
        let pass = net.forward(&x, TapeMode::Record).map_err(e2s)?;
        let conv = net.backward_conventional(&pass, &x).map_err(e2s)?;
        let me = net.backward_memeff(&x, &x).map_err(e2s)?;
        rows.push((delta, me.stored_tensor_count, me.peak_stored_activation_bytes as f64 / conv.peak_stored_activation_bytes as f64));
    }
    ensure(rows.windows(2).all(|w| w[1].2 < w[0].2), || format!("ratio not decreasing: {rows:?}"))?;
    ensure(rows.iter().all(|r| r.1 == rows[0].1), || format!("reversible tensor count depends on depth: {rows:?}"))?;
    let mut out = String::from("ratio");
    for (d, _, r) in &rows {
        let _ = write!(out, " δ{d}={r:.3}");
    }
    Ok(out)
}

fn identity() -> Check {
    let mut rng = SplitMix64::new(18);
    let mut worst: f64 = 0.0;
    for (spatial, m) in [(vec![16], 4), (vec![8, 8], 3), (vec![4, 4, 4], 2)] {
        for kind in [CouplingKind::Additive, CouplingKind::Affine] {
            let net = IUNet::build(&small_config(&spatial, m, kind)?, 50).map_err(e2s)?;
            let x = rand_tensor(&mut rng, &net.io_shape());
            let (y, ld) = net.apply(&x).map_err(e2s)?;
            let err = y.rel_err(&x);
            ensure(err <= 1e-15 && ld == 0.0, || format!("{spatial:?} {kind:?}: error {err:e}, logdet {ld:e}"))?;
            worst = worst.max(err);
        }
    }
    Ok(format!("worst relative error {worst:.1e}"))
}

fn data() -> Check {
    let spec = FoamSpec { size: 32, holes: 6, noise_sigma: 0.1, blur_radius: 1.0 };
    let a = foam_dataset(7, 2, &spec).map_err(e2s)?;
    let b = foam_dataset(7, 2, &spec).map_err(e2s)?;
    ensure(a == b, || String::from("phantom generation is not deterministic"))?;
    ensure(psnr(&a[0].clean, &a[0].clean, 1.0).map_err(e2s)? == Psnr::Identical, || String::from("PSNR of identical images"))?;
    let db = psnr(&a[0].degraded, &a[0].clean, 1.0).map_err(e2s)?.db();
    ensure(db.is_finite() && db > 0.0, || format!("degraded PSNR {db}"))?;
    let mix = GaussianMixture2D { weights: vec![0.5, 0.5], means: vec![[-1.0, 0.0], [1.0, 2.0]], stds: vec![0.3, 0.3] };
    let draws = mix.dataset(8, 500, &[4, 4]).map_err(e2s)?;
    let n = (draws.len() * 16) as f64;
    let mean = [0, 1].map(|c| draws.iter().map(|t| t.channel(c).iter().sum::<f64>()).sum::<f64>() / n);
    let target = mix.mean();
    ensure((0..2).all(|c| (mean[c] - target[c]).abs() < 0.05), || format!("mixture mean {mean:?} vs {target:?}"))?;
    Ok(format!("degraded PSNR {db:.2} dB, mixture mean ({:.3}, {:.3})", mean[0], mean[1]))
}

/// Prints one line per group; true when all passed.
pub fn report(results: &[GroupResult]) -> bool {
    for r in results {
        match &r.outcome {
            Ok(detail) => println!("PASS {:<14} {detail}", r.group),
            Err(why) => println!("FAIL {:<14} {why}", r.group),
        }
    }
    results.iter().all(|r| r.outcome.is_ok())
}
