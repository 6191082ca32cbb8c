//! Sign-gradient attacks: FGSM and L∞ PGD.

use log::warn;

use super::{clip01, materialize, succeeded, AttackConfig, PerturbationResult, UNTIL_SUCCESS_CAP};
use crate::error::Result;
use crate::nn::loss;
use crate::nn::Classifier;
use crate::scalar::Scalar;
use crate::tensor::{sign, Tensor};

/// Result of a batched PGD run plus each sample's final margin toward its label.
pub(crate) struct Outcome<T> {
    pub results: Vec<PerturbationResult<T>>,
    /// `f_label - max_{j != label} f_j` at the returned δ.
    pub margins: Vec<f64>,
}

fn split_rows<T: Scalar>(x: &Tensor<T>, delta: &Tensor<T>) -> Vec<Tensor<T>> {
    let shape = x.shape()[1..].to_vec();
    (0..x.rows()).map(|i| Tensor::new(shape.clone(), delta.row(i).to_vec()).expect("row shape")).collect()
}

fn finish<T: Scalar>(
    model: &Classifier<T>,
    x: &Tensor<T>,
    delta: Tensor<T>,
    labels: &[usize],
    targeted: bool,
    cfg: &AttackConfig,
    iters: &[usize],
) -> Result<Outcome<T>> {
    let logits = model.logits(&materialize(x, &delta, cfg.clip_to_valid)?)?;
    let k = model.num_classes();
    let kappa = T::lit(cfg.confidence);
    let rows: Vec<&[T]> = logits.data().chunks(k).collect();
    let margins = rows.iter().zip(labels).map(|(r, &y)| loss::target_margin(r, y).as_f64()).collect();
    let results = split_rows(x, &delta)
        .into_iter()
        .enumerate()
        .map(|(i, d)| PerturbationResult::new(d, succeeded(rows[i], labels[i], targeted, kappa), iters[i]))
        .collect();
    Ok(Outcome { results, margins })
}

/// Moves `delta` one signed step, then re-projects onto the ε-ball and the valid range.
fn step_row<T: Scalar>(delta: &mut [T], x: &[T], grad: &[T], scale: T, eps: T, clip: bool) {
    for ((d, &xi), &g) in delta.iter_mut().zip(x).zip(grad) {
        let mut v = (*d + scale * sign(g)).max(-eps).min(eps);
        if clip {
            v = clip01(xi + v) - xi;
        }
        *d = v;
    }
}

/// FGSM on a batch. Untargeted steps `+ε·sign(∇J(x, y))`; targeted steps
/// `-ε·sign(∇J(x, t))`. `labels` holds true labels or targets accordingly.
pub fn fgsm_batch<T: Scalar>(
    model: &Classifier<T>,
    x: &Tensor<T>,
    labels: &[usize],
    targeted: bool,
    cfg: &AttackConfig,
) -> Result<Vec<PerturbationResult<T>>> {
    cfg.validate()?;
    let b = model.check_batch(x)?;
    model.check_labels(labels, b)?;
    let eps = T::lit(cfg.epsilon);
    let scale = if targeted { -eps } else { eps };
    let (_, g) = model.input_gradient(x, labels)?;
    let mut delta = Tensor::zeros(x.shape());
    for i in 0..b {
        step_row(delta.row_mut(i), x.row(i), g.row(i), scale, eps, cfg.clip_to_valid);
    }
    Ok(finish(model, x, delta, labels, targeted, cfg, &vec![1; b])?.results)
}

pub fn fgsm<T: Scalar>(model: &Classifier<T>, x: &Tensor<T>, label: usize, targeted: bool, cfg: &AttackConfig) -> Result<PerturbationResult<T>> {
    Ok(fgsm_batch(model, &x.unsqueeze(), &[label], targeted, cfg)?.remove(0))
}

pub(crate) fn run_pgd<T: Scalar>(
    model: &Classifier<T>,
    x: &Tensor<T>,
    labels: &[usize],
    targeted: bool,
    cfg: &AttackConfig,
    eps: f64,
    alpha: f64,
) -> Result<Outcome<T>> {
    let b = model.check_batch(x)?;
    model.check_labels(labels, b)?;
    let k = model.num_classes();
    let e = T::lit(eps);
    let scale = if targeted { -T::lit(alpha) } else { T::lit(alpha) };
    let kappa = T::lit(cfg.confidence);
    let mut delta = Tensor::zeros(x.shape());
    let mut iters = vec![0usize; b];
    let mut done = vec![false; b];
    let mut budget = cfg.max_iters;
    let mut it = 0;
    loop {
        while it < budget {
            let active: Vec<usize> = (0..b).filter(|&i| !(cfg.early_stop && done[i])).collect();
            if active.is_empty() {
                break;
            }
            let z = materialize(&x.gather_rows(&active), &delta.gather_rows(&active), cfg.clip_to_valid)?;
            let ys: Vec<usize> = active.iter().map(|&i| labels[i]).collect();
            let (logits, g) = model.input_gradient(&z, &ys)?;
            for (j, &i) in active.iter().enumerate() {
                done[i] = succeeded(&logits.data()[j * k..(j + 1) * k], labels[i], targeted, kappa);
                if done[i] && cfg.early_stop {
                    continue;
                }
                step_row(delta.row_mut(i), x.row(i), g.row(j), scale, e, cfg.clip_to_valid);
                iters[i] += 1;
            }
            it += 1;
        }
        let out = finish(model, x, delta.clone(), labels, targeted, cfg, &iters)?;
        let all = out.results.iter().all(|r| r.success);
        if !cfg.until_success || all || budget * 2 > UNTIL_SUCCESS_CAP {
            return Ok(out);
        }
        for (d, r) in done.iter_mut().zip(&out.results) {
            *d = r.success;
        }
        budget *= 2;
    }
}

/// L∞ PGD from `δ = 0` with step `α` (default `ε/4`), no random start.
///
/// With `early_stop`, a sample stops moving as soon as its current iterate
/// succeeds. With `until_success`, the budget doubles until every sample
/// succeeds or [`UNTIL_SUCCESS_CAP`] is reached.
pub fn pgd_batch<T: Scalar>(
    model: &Classifier<T>,
    x: &Tensor<T>,
    labels: &[usize],
    targeted: bool,
    cfg: &AttackConfig,
) -> Result<Vec<PerturbationResult<T>>> {
    cfg.validate()?;
    let alpha = cfg.step();
    if alpha > cfg.epsilon {
        warn!("pgd step size {alpha} exceeds epsilon {}", cfg.epsilon);
    }
    Ok(run_pgd(model, x, labels, targeted, cfg, cfg.epsilon, alpha)?.results)
}

pub fn pgd<T: Scalar>(model: &Classifier<T>, x: &Tensor<T>, label: usize, targeted: bool, cfg: &AttackConfig) -> Result<PerturbationResult<T>> {
    Ok(pgd_batch(model, &x.unsqueeze(), &[label], targeted, cfg)?.remove(0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Architecture;

    fn binary(w: &[f64], b: f64) -> Classifier<f64> {
        let n = w.len();
        let mut wt = w.to_vec();
        wt.extend(std::iter::repeat(0.0).take(n));
        Classifier::linear(Tensor::from_f64(&[2, n], &wt).unwrap(), Tensor::from_f64(&[2], &[b, 0.0]).unwrap()).unwrap()
    }

    #[test]
    fn zero_epsilon_is_identity() {
        let m = Classifier::<f32>::new(Architecture::Mlp2, &[4], 3, 1).unwrap();
        let x = Tensor::<f32>::from_f64(&[4], &[0.2, 0.4, 0.6, 0.8]).unwrap();
        let r = fgsm(&m, &x, 0, false, &AttackConfig::with_epsilon(0.0)).unwrap();
        assert_eq!(r.delta, Tensor::zeros(&[4]));
        assert_eq!(r.achieved_norm, 0.0);
    }

    #[test]
    fn zero_gradient_gives_zero_delta() {
        let m = Classifier::<f64>::zeros(Architecture::Linear, &[3], 2).unwrap();
        let x = Tensor::<f64>::from_f64(&[3], &[0.5, 0.5, 0.5]).unwrap();
        let r = fgsm(&m, &x, 0, false, &AttackConfig::with_epsilon(0.3)).unwrap();
        assert_eq!(r.delta.data(), &[0.0; 3]);
    }

    #[test]
    fn one_pgd_step_with_alpha_eps_is_fgsm() {
        let m = Classifier::<f32>::new(Architecture::Mlp2, &[6], 4, 2).unwrap();
        let x = Tensor::<f32>::from_f64(&[3, 6], &(0..18).map(|i| (i as f64 * 0.37) % 1.0).collect::<Vec<_>>()).unwrap();
        for targeted in [false, true] {
            let cfg = AttackConfig { epsilon: 0.1, step_size: Some(0.1), max_iters: 1, early_stop: false, ..Default::default() };
            let a = fgsm_batch(&m, &x, &[0, 1, 2], targeted, &cfg).unwrap();
            let b = pgd_batch(&m, &x, &[0, 1, 2], targeted, &cfg).unwrap();
            for (p, q) in a.iter().zip(&b) {
                assert_eq!(p.delta, q.delta);
            }
        }
    }

    #[test]
    fn linear_oracle_flip_iff_budget_exceeds_distance() {
        // Class 0 logit is w.x + b, class 1 logit is 0; w.x + b = -0.14 here.
        let w = [0.5, -0.3, 0.1];
        let m = binary(&w, -0.4);
        let x = Tensor::<f64>::from_f64(&[3], &[0.6, 0.3, 0.5]).unwrap();
        assert_eq!(m.predict_one(&x).unwrap(), 1);
        let dist = 0.14 / 0.9;
        for (eps, flips) in [(dist * 0.9, false), (dist * 1.1, true)] {
            let cfg = AttackConfig { epsilon: eps, clip_to_valid: false, ..Default::default() };
            assert_eq!(fgsm(&m, &x, 1, false, &cfg).unwrap().success, flips);
            assert_eq!(pgd(&m, &x, 1, false, &cfg).unwrap().success, flips);
            assert_eq!(pgd(&m, &x, 0, true, &cfg).unwrap().success, flips);
        }
    }

    #[test]
    fn pgd_stays_in_ball_and_valid_range() {
        let m = Classifier::<f32>::new(Architecture::Mlp2, &[8], 3, 7).unwrap();
        let x = Tensor::<f32>::from_f64(&[2, 8], &(0..16).map(|i| if i % 3 == 0 { 1.0 } else { 0.05 * i as f64 % 1.0 }).collect::<Vec<_>>()).unwrap();
        let cfg = AttackConfig { epsilon: 0.25, max_iters: 10, early_stop: false, ..Default::default() };
        for r in pgd_batch(&m, &x, &[0, 1], false, &cfg).unwrap() {
            assert!(r.achieved_norm <= 0.25 + 1e-6);
        }
    }

    #[test]
    fn until_success_extends_budget() {
        let m = binary(&[1.0, 1.0], -1.0);
        // Distance to the boundary is 0.35 / 2 = 0.175; α = 0.01 needs ~18 steps.
        let x = Tensor::<f64>::from_f64(&[2], &[0.2, 0.45]).unwrap();
        let cfg = AttackConfig { epsilon: 0.3, step_size: Some(0.01), max_iters: 5, clip_to_valid: false, ..Default::default() };
        assert!(!pgd(&m, &x, 1, false, &cfg).unwrap().success);
        let r = pgd(&m, &x, 1, false, &AttackConfig { until_success: true, ..cfg }).unwrap();
        assert!(r.success);
        assert!(r.iters_used > 5);
    }
}
