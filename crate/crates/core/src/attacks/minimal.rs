//! Smallest-budget targeted perturbation by bisection over targeted PGD probes.

use super::gradient::run_pgd;
use super::{AttackConfig, PerturbationResult};
use crate::error::{Error, Result};
use crate::nn::Classifier;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// First budget of the probe grid; later grid points double it.
const GRID_START: f64 = 1.0 / 64.0;

/// Finds a small `σ` with `predict(x + σ) == t` and target margin `≥ κ`.
///
/// Budgets are probed on the fixed grid `2^j / 64` until one is feasible
/// (giving up after the first grid point at or above `cfg.epsilon`), then the
/// bracket between the last infeasible and the first feasible grid point is
/// bisected down to `cfg.bisection_tol`. Each probe is a targeted PGD run with
/// `α = ε/4`, `cfg.max_iters` steps and early stopping. Because the grid does
/// not depend on `cfg.epsilon`, raising `cfg.epsilon` never changes a feasible
/// answer.
pub fn minimal_targeted<T: Scalar>(model: &Classifier<T>, x: &Tensor<T>, t: usize, cfg: &AttackConfig) -> Result<PerturbationResult<T>> {
    cfg.validate()?;
    if cfg.epsilon <= 0.0 {
        return Err(Error::Config("minimal solver needs epsilon > 0".into()));
    }
    let batch = x.unsqueeze();
    model.check_labels(&[t], 1)?;
    if model.predict(&batch)?[0] == t {
        return Err(Error::Precondition(format!("input is already classified as target {t}")));
    }
    let probe_cfg = AttackConfig { early_stop: true, until_success: false, ..cfg.clone() };
    let mut iters = 0;
    let mut best_margin = f64::NEG_INFINITY;
    let mut probe = |eps: f64| -> Result<PerturbationResult<T>> {
        let mut out = run_pgd(model, &batch, &[t], true, &probe_cfg, eps, eps / 4.0)?;
        best_margin = best_margin.max(out.margins[0]);
        let r = out.results.remove(0);
        iters += r.iters_used;
        Ok(r)
    };

    let mut lo = 0.0;
    let mut hi = GRID_START;
    let mut found = loop {
        let r = probe(hi)?;
        if r.success {
            break r;
        }
        if hi >= cfg.epsilon {
            return Err(Error::Infeasible { eps_max: cfg.epsilon, best_margin });
        }
        lo = hi;
        hi *= 2.0;
    };
    while hi - lo > cfg.bisection_tol {
        let mid = 0.5 * (lo + hi);
        let r = probe(mid)?;
        if r.success {
            hi = mid;
            found = r;
        } else {
            lo = mid;
        }
    }
    if found.achieved_norm > cfg.epsilon {
        return Err(Error::Infeasible { eps_max: cfg.epsilon, best_margin });
    }
    found.iters_used = iters;
    Ok(found)
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
    fn matches_hyperplane_distance() {
        let m = binary(&[0.5, -0.3, 0.1], -0.4);
        let x = Tensor::<f64>::from_f64(&[3], &[0.6, 0.3, 0.5]).unwrap();
        let dist = 0.14 / 0.9;
        let r = minimal_targeted(&m, &x, 0, &AttackConfig::with_epsilon(0.5)).unwrap();
        assert!(r.success);
        assert!((r.achieved_norm - dist).abs() <= 0.05 * dist, "{} vs {dist}", r.achieved_norm);
    }

    #[test]
    fn already_target_is_precondition_error() {
        let m = binary(&[0.5, -0.3, 0.1], -0.4);
        let x = Tensor::<f64>::from_f64(&[3], &[0.6, 0.3, 0.5]).unwrap();
        assert!(matches!(minimal_targeted(&m, &x, 1, &AttackConfig::default()), Err(Error::Precondition(_))));
    }

    #[test]
    fn small_budget_is_infeasible() {
        let m = binary(&[0.5, -0.3, 0.1], -0.4);
        let x = Tensor::<f64>::from_f64(&[3], &[0.6, 0.3, 0.5]).unwrap();
        let err = minimal_targeted(&m, &x, 0, &AttackConfig::with_epsilon(0.1)).unwrap_err();
        match err {
            Error::Infeasible { eps_max, best_margin } => {
                assert_eq!(eps_max, 0.1);
                assert!(best_margin < 0.0 && best_margin > -0.14);
            }
            e => panic!("unexpected {e:?}"),
        }
    }

    #[test]
    fn raising_budget_never_grows_the_answer() {
        let m = Classifier::<f64>::new(Architecture::Mlp2, &[5], 3, 11).unwrap();
        let x = Tensor::<f64>::from_f64(&[5], &[0.3, 0.7, 0.2, 0.9, 0.5]).unwrap();
        let p = m.predict_one(&x).unwrap();
        let t = (p + 1) % 3;
        let mut prev: Option<f64> = None;
        for eps in [0.3, 0.5, 0.8, 1.0] {
            if let Ok(r) = minimal_targeted(&m, &x, t, &AttackConfig::with_epsilon(eps)) {
                if let Some(q) = prev {
                    assert!(r.achieved_norm <= q);
                }
                prev = Some(r.achieved_norm);
            }
        }
    }
}
