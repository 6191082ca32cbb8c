//! Minibatch training with SGD-momentum or Adam.

use log::{debug, info, warn};
use serde::{Deserialize, Serialize};

use super::model::{Classifier, Gradients};
use crate::data::LabeledDataset;
use crate::error::{Error, Result};
use crate::rng;
use crate::scalar::{Dtype, Scalar};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd { momentum: f64 },
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

impl OptimizerKind {
    pub fn adam() -> Self {
        OptimizerKind::Adam { beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }

    pub fn sgd() -> Self {
        OptimizerKind::Sgd { momentum: 0.9 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub optimizer: OptimizerKind,
    pub seed: u64,
    pub precision: Dtype,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 5,
            batch_size: 64,
            learning_rate: 1e-3,
            optimizer: OptimizerKind::adam(),
            seed: 0,
            precision: Dtype::F32,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be >= 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config("learning_rate must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    /// Mean training loss of each epoch, as seen during the epoch.
    pub epoch_losses: Vec<f64>,
    pub steps: usize,
}

enum OptState<T> {
    Sgd { velocity: Vec<Vec<T>> },
    Adam { m: Vec<Vec<T>>, v: Vec<Vec<T>>, t: i32 },
}

struct Optimizer<T> {
    kind: OptimizerKind,
    lr: T,
    state: OptState<T>,
}

impl<T: Scalar> Optimizer<T> {
    fn new<M: Scalar>(kind: OptimizerKind, lr: f64, model: &Classifier<M>) -> Self {
        let zeros: Vec<Vec<T>> = model
            .parameter_specs()
            .iter()
            .map(|(_, s)| vec![T::zero(); s.iter().product()])
            .collect();
        let state = match kind {
            OptimizerKind::Sgd { .. } => OptState::Sgd { velocity: zeros },
            OptimizerKind::Adam { .. } => OptState::Adam { m: zeros.clone(), v: zeros, t: 0 },
        };
        Self { kind, lr: T::lit(lr), state }
    }

    fn step(&mut self, model: &mut Classifier<T>, grads: &Gradients<T>) {
        let lr = self.lr;
        match (&mut self.state, self.kind) {
            (OptState::Sgd { velocity }, OptimizerKind::Sgd { momentum }) => {
                let mu = T::lit(momentum);
                model.for_each_param_mut(|i, p| {
                    let g = grads.tensors[i].data();
                    for ((w, vel), &gi) in p.iter_mut().zip(velocity[i].iter_mut()).zip(g) {
                        *vel = mu * *vel + gi;
                        *w = *w - lr * *vel;
                    }
                });
            }
            (OptState::Adam { m, v, t }, OptimizerKind::Adam { beta1, beta2, eps }) => {
                *t += 1;
                let (b1, b2, e) = (T::lit(beta1), T::lit(beta2), T::lit(eps));
                let c1 = T::one() - b1.powi(*t);
                let c2 = T::one() - b2.powi(*t);
                model.for_each_param_mut(|i, p| {
                    let g = grads.tensors[i].data();
                    for (((w, mi), vi), &gi) in p.iter_mut().zip(m[i].iter_mut()).zip(v[i].iter_mut()).zip(g) {
                        *mi = b1 * *mi + (T::one() - b1) * gi;
                        *vi = b2 * *vi + (T::one() - b2) * gi * gi;
                        let mhat = *mi / c1;
                        let vhat = *vi / c2;
                        *w = *w - lr * mhat / (vhat.sqrt() + e);
                    }
                });
            }
            _ => unreachable!("optimizer state matches its kind"),
        }
    }
}

/// Generic minibatch loop over `n` samples.
///
/// `batch` materializes the inputs and labels for a list of sample indices;
/// each epoch visits a fresh seeded permutation of `0..n`. With `n == 0` no
/// step is taken and the model is left untouched.
pub fn fit<T: Scalar>(
    model: &mut Classifier<T>,
    n: usize,
    cfg: &TrainConfig,
    mut batch: impl FnMut(&[usize]) -> Result<(Tensor<T>, Vec<usize>)>,
) -> Result<TrainLog> {
    cfg.validate()?;
    let mut log = TrainLog::default();
    if n == 0 {
        warn!("training set is empty; parameters left unchanged");
        return Ok(log);
    }
    let mut opt = Optimizer::<T>::new(cfg.optimizer, cfg.learning_rate, model);
    let mut rng = rng::stream(cfg.seed, rng::streams::TRAIN);
    for epoch in 0..cfg.epochs {
        let order = rng::permutation(n, &mut rng);
        let mut total = 0.0f64;
        for chunk in order.chunks(cfg.batch_size) {
            let (x, y) = batch(chunk)?;
            let lg = model.loss_and_grads(&x, &y, false)?;
            let loss = lg.loss.as_f64();
            if !loss.is_finite() {
                return Err(Error::TrainingDiverged { epoch });
            }
            opt.step(model, &lg.grad_params);
            total += loss * chunk.len() as f64;
            log.steps += 1;
        }
        if !model.all_finite() {
            return Err(Error::TrainingDiverged { epoch });
        }
        let mean = total / n as f64;
        info!("epoch {}/{}: mean loss {:.5}", epoch + 1, cfg.epochs, mean);
        log.epoch_losses.push(mean);
    }
    debug!("training finished after {} steps", log.steps);
    Ok(log)
}

/// Standard empirical-risk training on a labeled dataset.
pub fn train_standard<T: Scalar>(model: &mut Classifier<T>, data: &LabeledDataset<T>, cfg: &TrainConfig) -> Result<TrainLog> {
    if data.sample_shape() != model.input_shape() && !data.is_empty() {
        return Err(Error::InputShape { expected: model.input_shape().to_vec(), got: data.images.shape().to_vec() });
    }
    let log = fit(model, data.len(), cfg, |idx| Ok((data.images.gather_rows(idx), idx.iter().map(|&i| data.labels[i]).collect())))?;
    if log.steps > 0 {
        model.lineage.insert("train_seed".into(), cfg.seed.to_string());
        model.lineage.insert("train_epochs".into(), cfg.epochs.to_string());
    }
    Ok(log)
}
