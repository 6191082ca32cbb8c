//! Untargeted universal perturbation with a DeepFool-style L∞ inner step.

use log::{debug, info};

use super::{materialize, project_linf, AttackConfig, PerturbationResult};
use crate::data::LabeledDataset;
use crate::error::{Error, Result};
use crate::nn::{loss, Classifier};
use crate::rng;
use crate::scalar::Scalar;
use crate::tensor::{sign, Tensor};

/// Linearization steps allowed per DeepFool call.
pub const DEEPFOOL_ITERS: usize = 50;
/// Relative overshoot applied to the accumulated DeepFool step.
pub const DEEPFOOL_OVERSHOOT: f64 = 0.02;

/// L∞ DeepFool: repeatedly steps to the linearized nearest boundary of the
/// true class until `x + (1 + overshoot)·r` leaves class `label`.
pub fn deepfool_linf<T: Scalar>(model: &Classifier<T>, x: &Tensor<T>, label: usize, max_iters: usize, overshoot: f64, clip: bool) -> Result<PerturbationResult<T>> {
    let k = model.num_classes();
    model.check_labels(&[label], 1)?;
    let n = x.len();
    let grow = T::one() + T::lit(overshoot);
    let mut r = Tensor::zeros(x.shape());
    let mut eye = Tensor::zeros(&[k, k]);
    for j in 0..k {
        eye.data_mut()[j * k + j] = T::one();
    }
    let mut iters = 0;
    let mut success = false;
    loop {
        let z = materialize(x, &r.scale(grow), clip)?;
        let copies: Vec<&[T]> = vec![z.data(); k];
        let trace = model.forward_trace(&Tensor::stack(x.shape(), &copies)?)?;
        let f = trace.logits.row(0).to_vec();
        if loss::argmax(&f) != label {
            success = true;
            break;
        }
        if iters == max_iters {
            break;
        }
        let (_, g) = model.backward(&trace, &eye, false)?;
        let gy = g.row(label);
        let mut pick: Option<(T, usize, T)> = None;
        for j in (0..k).filter(|&j| j != label) {
            let w1: T = g.row(j).iter().zip(gy).map(|(&a, &b)| (a - b).abs()).sum();
            if w1 <= T::zero() {
                continue;
            }
            let fj = (f[j] - f[label]).abs();
            let ratio = fj / w1;
            if pick.is_none_or(|(best, _, _)| ratio < best) {
                pick = Some((ratio, j, w1));
            }
        }
        let Some((_, j, w1)) = pick else { break };
        let mag = ((f[j] - f[label]).abs() + T::lit(1e-4)) / w1;
        let gj = g.row(j);
        for ((ri, &a), &b) in r.data_mut().iter_mut().zip(gj).zip(gy) {
            *ri = *ri + mag * sign(a - b);
        }
        iters += 1;
    }
    let mut delta = r.scale(grow);
    if clip {
        let z = materialize(x, &delta, true)?;
        delta = z.sub(x)?;
    }
    debug_assert_eq!(delta.len(), n);
    Ok(PerturbationResult::new(delta, success, iters))
}

/// Fraction of `images + v` whose prediction differs from the true label.
pub fn fooling_rate<T: Scalar>(model: &Classifier<T>, images: &Tensor<T>, labels: &[usize], v: &Tensor<T>, clip: bool) -> Result<f64> {
    if labels.is_empty() {
        return Err(Error::Precondition("fooling rate of an empty set".into()));
    }
    let preds = model.predict_all(&materialize(images, v, clip)?)?;
    let fooled = preds.iter().zip(labels).filter(|(p, y)| p != y).count();
    Ok(fooled as f64 / labels.len() as f64)
}

#[derive(Debug, Clone)]
pub struct UniversalOutcome<T> {
    /// The best perturbation seen (highest fooling rate on X).
    pub result: PerturbationResult<T>,
    pub fooling_rate: f64,
    pub passes: usize,
    pub converged: bool,
}

/// Runs the universal loop and always returns the best perturbation found.
pub fn universal_untargeted_best_effort<T: Scalar>(
    model: &Classifier<T>,
    x: &LabeledDataset<T>,
    eta: f64,
    delta: f64,
    max_passes: usize,
    cfg: &AttackConfig,
) -> Result<UniversalOutcome<T>> {
    if x.is_empty() {
        return Err(Error::Precondition("universal perturbation needs a nonempty X".into()));
    }
    if !(eta > 0.0) || !(delta > 0.0 && delta <= 1.0) {
        return Err(Error::Config(format!("need eta > 0 and 0 < delta <= 1, got eta={eta}, delta={delta}")));
    }
    let clip = cfg.clip_to_valid;
    let shape = x.sample_shape().to_vec();
    let mut v = Tensor::zeros(&shape);
    let mut rate = fooling_rate(model, &x.images, &x.labels, &v, clip)?;
    let mut best = (rate, v.clone());
    let mut passes = 0;
    let mut shuffler = rng::stream(cfg.seed, rng::streams::SHUFFLE);
    while rate < 1.0 - delta && passes < max_passes {
        for i in rng::permutation(x.len(), &mut shuffler) {
            let xi = Tensor::new(shape.clone(), x.image(i).to_vec())?;
            let z = materialize(&xi, &v, clip)?;
            if model.predict_one(&z)? != x.labels[i] {
                continue;
            }
            let step = deepfool_linf(model, &z, x.labels[i], DEEPFOOL_ITERS, DEEPFOOL_OVERSHOOT, clip)?;
            if step.success {
                v = project_linf(&v.add(&step.delta)?, eta);
            }
        }
        passes += 1;
        rate = fooling_rate(model, &x.images, &x.labels, &v, clip)?;
        debug!("universal pass {passes}: fooling rate {rate:.4}");
        if rate > best.0 {
            best = (rate, v.clone());
        }
    }
    let converged = best.0 >= 1.0 - delta;
    info!("universal perturbation: fooling rate {:.4} after {passes} passes", best.0);
    Ok(UniversalOutcome {
        result: PerturbationResult::new(best.1, converged, passes),
        fooling_rate: best.0,
        passes,
        converged,
    })
}

/// Untargeted universal perturbation with `‖v‖∞ ≤ η` fooling at least
/// `1 − δ` of `X`; fails with a budget error carrying the best rate otherwise.
pub fn universal_untargeted<T: Scalar>(
    model: &Classifier<T>,
    x: &LabeledDataset<T>,
    eta: f64,
    delta: f64,
    max_passes: usize,
    cfg: &AttackConfig,
) -> Result<PerturbationResult<T>> {
    let out = universal_untargeted_best_effort(model, x, eta, delta, max_passes, cfg)?;
    if !out.converged {
        return Err(Error::BudgetExceeded { passes: out.passes, best_rate: out.fooling_rate });
    }
    Ok(out.result)
}
