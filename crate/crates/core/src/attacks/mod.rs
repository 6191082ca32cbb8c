//! Per-sample attack primitives and the untargeted universal baseline.

mod gradient;
mod minimal;
mod universal;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::loss;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub use gradient::{fgsm, fgsm_batch, pgd, pgd_batch};
pub use minimal::minimal_targeted;
pub use universal::{deepfool_linf, fooling_rate, universal_untargeted, universal_untargeted_best_effort, UniversalOutcome};

/// Hard cap on the iteration budget reached by `until_success` doubling.
pub const UNTIL_SUCCESS_CAP: usize = 1280;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AttackConfig {
    /// L∞ budget of one attack (`ε_max` for the minimal solver).
    pub epsilon: f64,
    /// Defaults to `epsilon / 4`.
    pub step_size: Option<f64>,
    pub max_iters: usize,
    /// Required logit margin κ for success.
    pub confidence: f64,
    pub clip_to_valid: bool,
    pub seed: u64,
    /// Stop iterating on a sample once it is successful.
    pub early_stop: bool,
    /// Keep doubling the PGD budget until success or [`UNTIL_SUCCESS_CAP`].
    pub until_success: bool,
    /// Absolute tolerance of the minimal solver's budget bisection.
    pub bisection_tol: f64,
}

impl Default for AttackConfig {
    fn default() -> Self {
        Self {
            epsilon: 0.3,
            step_size: None,
            max_iters: 40,
            confidence: 0.0,
            clip_to_valid: true,
            seed: 0,
            early_stop: true,
            until_success: false,
            bisection_tol: 1e-3,
        }
    }
}

impl AttackConfig {
    pub fn with_epsilon(epsilon: f64) -> Self {
        Self { epsilon, ..Default::default() }
    }

    /// `epsilon = 0` is accepted and yields the identity attack.
    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon >= 0.0 && self.epsilon.is_finite()) {
            return Err(Error::Config(format!("epsilon must be finite and >= 0, got {}", self.epsilon)));
        }
        if self.max_iters == 0 {
            return Err(Error::Config("max_iters must be >= 1".into()));
        }
        if !(self.confidence >= 0.0 && self.confidence.is_finite()) {
            return Err(Error::Config("confidence must be >= 0".into()));
        }
        if let Some(a) = self.step_size {
            if !(a > 0.0 && a.is_finite()) {
                return Err(Error::Config("step_size must be positive".into()));
            }
        }
        if !(self.bisection_tol > 0.0) {
            return Err(Error::Config("bisection_tol must be positive".into()));
        }
        Ok(())
    }

    pub fn step(&self) -> f64 {
        self.step_size.unwrap_or(self.epsilon / 4.0)
    }
}

/// One perturbation `δ` for one input.
#[derive(Debug, Clone, PartialEq)]
pub struct PerturbationResult<T> {
    /// Same shape as the attacked sample.
    pub delta: Tensor<T>,
    pub success: bool,
    /// `max |δ|`.
    pub achieved_norm: f64,
    pub iters_used: usize,
}

impl<T: Scalar> PerturbationResult<T> {
    pub fn new(delta: Tensor<T>, success: bool, iters_used: usize) -> Self {
        let achieved_norm = delta.linf_norm().as_f64();
        Self { delta, success, achieved_norm, iters_used }
    }
}

/// Componentwise clamp to `[-eta, eta]`, the L2-nearest point of the L∞ ball.
pub fn project_linf<T: Scalar>(r: &Tensor<T>, eta: f64) -> Tensor<T> {
    debug_assert!(eta > 0.0, "projection radius must be positive");
    let e = T::lit(eta);
    r.clamp(-e, e)
}

fn clip01<T: Scalar>(v: T) -> T {
    v.max(T::zero()).min(T::one())
}

/// The adversarial input fed to a model: `x + δ`, clipped to `[0,1]` when `clip` is set.
///
/// `delta` is either shaped like `x` or like one sample of `x`, in which
/// case it is added to every row.
pub fn materialize<T: Scalar>(x: &Tensor<T>, delta: &Tensor<T>, clip: bool) -> Result<Tensor<T>> {
    let d = delta.data();
    let broadcast = if delta.shape() == x.shape() {
        false
    } else if !x.shape().is_empty() && delta.shape() == &x.shape()[1..] {
        true
    } else {
        return Err(Error::InputShape { expected: x.shape().to_vec(), got: delta.shape().to_vec() });
    };
    let mut out = x.clone();
    let stride = if broadcast { d.len() } else { out.len() };
    for (i, v) in out.data_mut().iter_mut().enumerate() {
        let s = *v + d[i % stride.max(1)];
        *v = if clip { clip01(s) } else { s };
    }
    Ok(out)
}

/// Success test on one logit row: targeted means `argmax == label` with margin
/// at least κ; untargeted means `argmax != label` with the label trailing by κ.
pub(crate) fn succeeded<T: Scalar>(row: &[T], label: usize, targeted: bool, kappa: T) -> bool {
    let m = loss::target_margin(row, label);
    if targeted {
        loss::argmax(row) == label && m >= kappa
    } else {
        loss::argmax(row) != label && -m >= kappa
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn projection_examples() {
        let r = Tensor::<f64>::from_f64(&[2], &[0.5, -0.3]).unwrap();
        assert_eq!(project_linf(&r, 0.2).data(), &[0.2, -0.2]);
        let inside = Tensor::<f64>::from_f64(&[3], &[0.1, -0.05, 0.0]).unwrap();
        assert_eq!(project_linf(&inside, 0.2), inside);
    }

    #[test]
    fn materialize_broadcasts_and_clips() {
        let x = Tensor::<f32>::from_f64(&[2, 2], &[0.1, 0.9, 0.5, 0.5]).unwrap();
        let r = Tensor::<f32>::from_f64(&[2], &[-0.2, 0.2]).unwrap();
        let z = materialize(&x, &r, true).unwrap();
        assert_eq!(z.data(), &[0.0, 1.0, 0.3, 0.7]);
        let u = materialize(&x, &r, false).unwrap();
        assert!(u.data()[0] < 0.0 && u.data()[1] > 1.0);
        let bad = Tensor::<f32>::zeros(&[3]);
        assert!(matches!(materialize(&x, &bad, true), Err(Error::InputShape { .. })));
    }

    #[test]
    fn success_rule_respects_margin() {
        let row = [0.0f64, 2.0, 1.5];
        assert!(succeeded(&row, 1, true, 0.5));
        assert!(!succeeded(&row, 1, true, 0.6));
        assert!(succeeded(&row, 2, false, 0.5));
        assert!(!succeeded(&row, 1, false, 0.0));
    }

    #[test]
    fn config_validation() {
        assert!(AttackConfig::default().validate().is_ok());
        assert!(AttackConfig::with_epsilon(0.0).validate().is_ok());
        assert!(AttackConfig::with_epsilon(-0.1).validate().is_err());
        assert!(AttackConfig { max_iters: 0, ..Default::default() }.validate().is_err());
        assert_eq!(AttackConfig::with_epsilon(0.2).step(), 0.05);
    }
}
