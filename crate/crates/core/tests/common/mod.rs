#![allow(dead_code)]

use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tupcore::attacks::{minimal_targeted, project_linf, AttackConfig};
use tupcore::nn::{Architecture, Classifier};
use tupcore::data::{make_synthetic_gaussians, sample_x, LabeledDataset};
use tupcore::eval::{emit_report, EvalReport, MetricCell, MetricTable, ReportFormat};
use tupcore::nn::{train_standard, TrainConfig};
use tupcore::rat::{partition_by_prediction, rat_loss, summed_loss};
use tupcore::tup::{compute_tup, success_rate, TupConfig};
use tupcore::{Dtype, Tensor};

/// Prints one verdict line straight to stderr so it survives output capture.
pub fn verdict(id: &str, pass: bool, detail: &str) {
    let word = if pass { "PASS" } else { "FAIL" };
    let _ = writeln!(std::io::stderr(), "[acceptance] {id} {word} {detail}");
}

pub fn info(id: &str, detail: &str) {
    let _ = writeln!(std::io::stderr(), "[acceptance] {id} info {detail}");
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(rng: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(lo..hi)).collect()
}

/// A random two-class linear model and an input whose closed-form L∞
/// distance to the decision boundary lies in `[0.05, 0.5]`.
pub struct LinearCase {
    pub model: Classifier<f64>,
    pub x: Tensor<f64>,
    pub pred: usize,
    /// `|w·x + b| / ‖w‖₁` with `w = w_0 - w_1`, `b = b_0 - b_1`.
    pub distance: f64,
}

pub fn linear_case(seed: u64, n: usize) -> LinearCase {
    let mut r = rng(seed);
    loop {
        let w = uniform(&mut r, 2 * n, -1.0, 1.0);
        let b = uniform(&mut r, 2, -0.5, 0.5);
        let x = uniform(&mut r, n, 0.2, 0.8);
        let diff: Vec<f64> = (0..n).map(|i| w[i] - w[n + i]).collect();
        let score: f64 = diff.iter().zip(&x).map(|(a, v)| a * v).sum::<f64>() + b[0] - b[1];
        let l1: f64 = diff.iter().map(|a| a.abs()).sum();
        let distance = score.abs() / l1;
        if !(0.05..=0.5).contains(&distance) {
            continue;
        }
        let model = Classifier::linear(Tensor::from_f64(&[2, n], &w).unwrap(), Tensor::from_f64(&[2], &b).unwrap()).unwrap();
        let pred = if score >= 0.0 { 0 } else { 1 };
        return LinearCase { model, x: Tensor::from_f64(&[n], &x).unwrap(), pred, distance };
    }
}

/// Largest relative gap between the minimal solver's achieved norm and the
/// closed-form distance over `cases` random linear models.
pub fn linear_oracle_max_rel_error(cases: u64) -> f64 {
    let cfg = AttackConfig { epsilon: 1.0, clip_to_valid: false, ..AttackConfig::default() };
    let mut worst: f64 = 0.0;
    for seed in 0..cases {
        let c = linear_case(seed, 3 + (seed as usize % 6));
        let res = minimal_targeted(&c.model, &c.x, 1 - c.pred, &cfg).expect("feasible within 1.0");
        assert!(res.success);
        worst = worst.max((res.achieved_norm - c.distance).abs() / c.distance);
    }
    worst
}

/// Whether projection equals a componentwise clamp bitwise, and whether it is
/// at least as close in L2 as each of `samples` random feasible points.
pub fn projection_checks(seed: u64, samples: usize) -> (bool, bool) {
    let mut r = rng(seed);
    let n = 16;
    let eta = 0.3;
    let v = uniform(&mut r, n, -1.0, 1.0);
    let t = Tensor::from_f64(&[n], &v).unwrap();
    let p: Tensor<f64> = project_linf(&t, eta);
    let bitwise = p.data().iter().zip(&v).all(|(a, b)| a.to_bits() == b.clamp(-eta, eta).to_bits());
    let dist = |a: &[f64]| a.iter().zip(&v).map(|(x, y)| (x - y).powi(2)).sum::<f64>();
    let best = dist(p.data());
    let beats = (0..samples).all(|_| best <= dist(&uniform(&mut r, n, -eta, eta)));
    (bitwise, beats)
}

fn l2(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let diff: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    l2(&diff) / l2(a).max(l2(b)).max(1e-12)
}

pub fn arch_case(i: usize) -> (Architecture, Vec<usize>) {
    match i % 3 {
        0 => (Architecture::Linear, vec![7]),
        1 => (Architecture::Mlp2, vec![2, 5]),
        _ => (Architecture::Cnn, vec![1, 16, 16]),
    }
}

/// Central difference at `step`, or `None` when the loss is not smooth within
/// the step (a ReLU or max-pool switch), detected by disagreement with the
/// difference at `step / 10`.
fn central(f: &impl Fn(f64) -> f64, step: f64) -> Option<f64> {
    let d = |h: f64| (f(h) - f(-h)) / (2.0 * h);
    let (coarse, fine) = (d(step), d(step / 10.0));
    ((coarse - fine).abs() <= 1e-4 * coarse.abs().max(fine.abs()).max(1e-3)).then_some(coarse)
}

fn mean_loss_f64(m: &Classifier<f64>, x: &Tensor<f64>, y: &[usize]) -> f64 {
    let l = m.per_sample_loss(x, y).unwrap();
    l.iter().sum::<f64>() / l.len() as f64
}

/// Relative errors `(params, input)` of the analytic gradient of a model in
/// precision `T` against central differences of the mean loss evaluated on
/// the f64 cast of the same parameters. Coordinates are sampled.
pub fn gradient_errors<T: tupcore::Scalar>(instance: usize, step: f64, coords: usize) -> (f64, f64) {
    let (arch, shape) = arch_case(instance);
    let mut r = rng(1000 + instance as u64);
    let k = 3;
    let batch = 3;
    let n: usize = shape.iter().product();
    let model = Classifier::<T>::new(arch, &shape, k, instance as u64).unwrap();
    let mut bshape = vec![batch];
    bshape.extend(&shape);
    let xs = uniform(&mut r, batch * n, 0.0, 1.0);
    let ys: Vec<usize> = (0..batch).map(|_| r.random_range(0..k)).collect();
    let x = Tensor::<T>::from_f64(&bshape, &xs).unwrap();
    let g = model.loss_and_grads(&x, &ys, true).unwrap();

    let m64: Classifier<f64> = model.cast();
    let x64: Tensor<f64> = x.cast();
    let params: Vec<Tensor<f64>> = m64.parameters().into_iter().map(|(_, t)| t).collect();

    let (mut analytic, mut numeric) = (Vec::new(), Vec::new());
    for _ in 0..coords {
        let which = r.random_range(0..params.len());
        let j = r.random_range(0..params[which].len());
        let eval = |delta: f64| {
            let mut ps = params.clone();
            ps[which].data_mut()[j] += delta;
            let mut m = m64.clone();
            m.set_parameters(&ps).unwrap();
            mean_loss_f64(&m, &x64, &ys)
        };
        let Some(fd) = central(&eval, step) else { continue };
        numeric.push(fd);
        analytic.push(g.grad_params.tensors[which].data()[j].as_f64());
    }
    assert!(analytic.len() * 2 >= coords, "too many non-smooth coordinates");
    let param_err = rel_err(&analytic, &numeric);

    let gi = g.grad_input.expect("input gradient requested");
    let (mut analytic, mut numeric) = (Vec::new(), Vec::new());
    for _ in 0..coords {
        let j = r.random_range(0..x64.len());
        let eval = |delta: f64| {
            let mut xx = x64.clone();
            xx.data_mut()[j] += delta;
            mean_loss_f64(&m64, &xx, &ys)
        };
        let Some(fd) = central(&eval, step) else { continue };
        numeric.push(fd);
        analytic.push(gi.data()[j].as_f64());
    }
    (param_err, rel_err(&analytic, &numeric))
}

pub fn blobs() -> LabeledDataset<f64> {
    let means = [[0.2, 0.2], [0.8, 0.2], [0.5, 0.8], [0.2, 0.8]];
    make_synthetic_gaussians(40, &means, 0.08, 5).unwrap()
}

pub fn trained(arch: Architecture, seed: u64) -> Classifier<f64> {
    let ds = blobs();
    let mut m = Classifier::new(arch, &[2], 4, seed).unwrap();
    let cfg = TrainConfig { epochs: 30, batch_size: 16, learning_rate: 0.02, seed, precision: Dtype::F64, ..Default::default() };
    train_standard(&mut m, &ds, &cfg).unwrap();
    m
}

/// Convergence is reported exactly when the recomputed success reaches `1 - δ`,
/// and the perturbation never leaves the η-ball.
pub fn tup_contract_holds() -> bool {
    let ds = blobs();
    let mut ok = true;
    for (i, arch) in [Architecture::Linear, Architecture::Mlp2].into_iter().enumerate() {
        let m = trained(arch, i as u64);
        for (t, eta, delta) in [(0, 0.3, 0.1), (1, 0.6, 0.2), (2, 0.1, 0.05), (3, 0.45, 0.5)] {
            let x = sample_x(&ds, &m, t, 20, 3).unwrap();
            let cfg = TupConfig { target: t, eta, delta, max_passes: 4, ..Default::default() };
            let res = compute_tup(&m, &x, &cfg).unwrap();
            let s = success_rate(&m, &x.images, &res.r, t, true).unwrap();
            ok &= s == res.final_success;
            ok &= res.converged == (s >= 1.0 - delta);
            ok &= res.r.linf_norm() <= eta;
        }
    }
    ok
}

/// `rat_loss` with `r = 0` is bitwise the summed loss in the same order.
pub fn rat_zero_is_standard() -> bool {
    let ds = blobs();
    let m = trained(Architecture::Mlp2, 1);
    let part = partition_by_prediction(&m, &ds, 2, 9).unwrap();
    let l = rat_loss(&m, &ds, &part, &Tensor::zeros(&[2]), true).unwrap();
    let order = part.loss_order();
    let labels: Vec<usize> = order.iter().map(|&i| ds.labels[i]).collect();
    let reference = summed_loss(&m, &ds.images.gather_rows(&order), &labels).unwrap();
    l.total.to_bits() == reference.to_bits()
}

/// Training, TUP computation and report emission repeat bit for bit under a fixed seed.
pub fn reproducible() -> bool {
    let a = trained(Architecture::Mlp2, 4);
    let b = trained(Architecture::Mlp2, 4);
    let mut ok = a == b;
    let ds = blobs();
    let x = sample_x(&ds, &a, 1, 20, 0).unwrap();
    let cfg = TupConfig { target: 1, eta: 0.5, ..Default::default() };
    let ra = compute_tup(&a, &x, &cfg).unwrap();
    let rb = compute_tup(&b, &x, &cfg).unwrap();
    ok &= ra.r == rb.r;
    ok &= ra.trace == rb.trace;

    let dir = tempfile::tempdir().unwrap();
    let mut rep = EvalReport::new("repro", 4, serde_json::to_value(&cfg).unwrap());
    rep.tables.push(MetricTable::series("success", "value", vec![("x".into(), MetricCell::new(ra.final_success, x.len()))]));
    let first: Vec<Vec<u8>> = emit_report(&rep, dir.path(), ReportFormat::Csv).unwrap().iter().map(|p| std::fs::read(p).unwrap()).collect();
    let second: Vec<Vec<u8>> = emit_report(&rep, dir.path(), ReportFormat::Csv).unwrap().iter().map(|p| std::fs::read(p).unwrap()).collect();
    ok && first == second
}
