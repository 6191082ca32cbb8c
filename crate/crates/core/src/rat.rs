//! Region adversarial training: retrain on clean target-region points plus
//! TUP-perturbed copies of half of the remaining points.

use log::info;
use serde::{Deserialize, Serialize};

use crate::attacks::materialize;
use crate::data::LabeledDataset;
use crate::error::{Error, Result};
use crate::nn::{fit, Classifier, OptimizerKind, TrainConfig, TrainLog};
use crate::rng;
use crate::scalar::{Dtype, Scalar};
use crate::tensor::Tensor;
use crate::tup::{compute_tup, TupConfig, TupResult};

/// Per-sample losses are evaluated in fixed chunks of this many rows.
pub const LOSS_CHUNK: usize = 256;

/// Disjoint index pools covering a training set.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RatPartition {
    /// Predicted as the target, ascending.
    pub pool_t: Vec<usize>,
    /// Half of the rest (the larger half when odd); receives the perturbation.
    pub pool_d1: Vec<usize>,
    /// The other half; stays clean.
    pub pool_d2: Vec<usize>,
}

impl RatPartition {
    pub fn len(&self) -> usize {
        self.pool_t.len() + self.pool_d1.len() + self.pool_d2.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Membership mask of `pool_d1` over a set of `n` samples.
    pub fn d1_mask(&self, n: usize) -> Vec<bool> {
        let mut m = vec![false; n];
        for &i in &self.pool_d1 {
            m[i] = true;
        }
        m
    }

    /// All indices in loss order: `pool_t`, then `pool_d2`, then `pool_d1`.
    pub fn loss_order(&self) -> Vec<usize> {
        self.pool_t.iter().chain(&self.pool_d2).chain(&self.pool_d1).copied().collect()
    }
}

/// Splits by predicted label; the non-target pool is shuffled with the
/// `partition` stream and cut into `⌈M/2⌉` and `⌊M/2⌋` halves.
pub fn partition_by_prediction<T: Scalar>(model: &Classifier<T>, data: &LabeledDataset<T>, t: usize, seed: u64) -> Result<RatPartition> {
    if data.is_empty() {
        return Err(Error::Precondition("cannot partition an empty dataset".into()));
    }
    model.check_labels(&[t], 1)?;
    let preds = model.predict_all(&data.images)?;
    Ok(partition_predictions(&preds, t, seed))
}

pub fn partition_predictions(preds: &[usize], t: usize, seed: u64) -> RatPartition {
    let pool_t: Vec<usize> = (0..preds.len()).filter(|&i| preds[i] == t).collect();
    let rest: Vec<usize> = (0..preds.len()).filter(|&i| preds[i] != t).collect();
    let perm = rng::permutation(rest.len(), &mut rng::stream(seed, rng::streams::PARTITION));
    let shuffled: Vec<usize> = perm.into_iter().map(|j| rest[j]).collect();
    let cut = rest.len().div_ceil(2);
    RatPartition { pool_t, pool_d1: shuffled[..cut].to_vec(), pool_d2: shuffled[cut..].to_vec() }
}

/// Summed per-sample cross-entropy, accumulated in row order over chunks of [`LOSS_CHUNK`].
pub fn summed_loss<T: Scalar>(model: &Classifier<T>, images: &Tensor<T>, labels: &[usize]) -> Result<T> {
    Ok(per_sample(model, images, labels)?.into_iter().fold(T::zero(), |a, l| a + l))
}

fn per_sample<T: Scalar>(model: &Classifier<T>, images: &Tensor<T>, labels: &[usize]) -> Result<Vec<T>> {
    let n = images.rows();
    let mut out = Vec::with_capacity(n);
    for start in (0..n).step_by(LOSS_CHUNK) {
        let idx: Vec<usize> = (start..(start + LOSS_CHUNK).min(n)).collect();
        let ys: Vec<usize> = idx.iter().map(|&i| labels[i]).collect();
        out.extend(model.per_sample_loss(&images.gather_rows(&idx), &ys)?);
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RatLoss<T> {
    pub clean_target: T,
    pub clean_rest: T,
    pub adversarial: T,
    /// Running sum over all points in loss order.
    pub total: T,
}

/// Inputs in loss order with `pool_d1` replaced by `x + r_t`, plus true labels.
pub fn rat_inputs<T: Scalar>(data: &LabeledDataset<T>, part: &RatPartition, r_t: &Tensor<T>, clip: bool) -> Result<(Tensor<T>, Vec<usize>)> {
    if r_t.shape() != data.sample_shape() {
        return Err(Error::InputShape { expected: data.sample_shape().to_vec(), got: r_t.shape().to_vec() });
    }
    let order = part.loss_order();
    let mut images = data.images.gather_rows(&order);
    let n_clean = part.pool_t.len() + part.pool_d2.len();
    if !part.pool_d1.is_empty() {
        let adv_idx: Vec<usize> = (n_clean..order.len()).collect();
        let adv = materialize(&images.gather_rows(&adv_idx), r_t, clip)?;
        let w = images.row_len();
        images.data_mut()[n_clean * w..].copy_from_slice(adv.data());
    }
    Ok((images, order.iter().map(|&i| data.labels[i]).collect()))
}

/// `Σ_{pool_t} J(x, y) + Σ_{pool_d2} J(x, y) + Σ_{pool_d1} J(x + r_t, y)`.
///
/// With `r_t = 0` the total is bitwise equal to [`summed_loss`] over the same
/// points in [`RatPartition::loss_order`].
pub fn rat_loss<T: Scalar>(model: &Classifier<T>, data: &LabeledDataset<T>, part: &RatPartition, r_t: &Tensor<T>, clip: bool) -> Result<RatLoss<T>> {
    let (images, labels) = rat_inputs(data, part, r_t, clip)?;
    let losses = per_sample(model, &images, &labels)?;
    let (nt, n2) = (part.pool_t.len(), part.pool_d2.len());
    let mut out = RatLoss { clean_target: T::zero(), clean_rest: T::zero(), adversarial: T::zero(), total: T::zero() };
    for (j, &l) in losses.iter().enumerate() {
        if j < nt {
            out.clean_target = out.clean_target + l;
        } else if j < nt + n2 {
            out.clean_rest = out.clean_rest + l;
        } else {
            out.adversarial = out.adversarial + l;
        }
        out.total = out.total + l;
    }
    Ok(out)
}

/// One training minibatch: `d1` members become `x + r_t`, every label stays
/// the ground truth. The returned flags mark perturbed rows.
pub fn rat_batch<T: Scalar>(
    data: &LabeledDataset<T>,
    d1: &[bool],
    r_t: &Tensor<T>,
    indices: &[usize],
    clip: bool,
) -> Result<(Tensor<T>, Vec<usize>, Vec<bool>)> {
    let mut x = data.images.gather_rows(indices);
    let flags: Vec<bool> = indices.iter().map(|&i| d1[i]).collect();
    for (row, _) in flags.iter().enumerate().filter(|(_, &f)| f) {
        let z = materialize(&x.row_tensor(row), r_t, clip)?;
        x.row_mut(row).copy_from_slice(z.data());
    }
    Ok((x, indices.iter().map(|&i| data.labels[i]).collect(), flags))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RatConfig {
    pub target: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub optimizer: OptimizerKind,
    pub seed: u64,
    pub clip_to_valid: bool,
    /// Used when no perturbation is supplied; its target is overridden.
    pub tup: TupConfig,
    /// Size of the `pool_d1` prefix the TUP is computed on.
    pub tup_subset: usize,
}

impl Default for RatConfig {
    fn default() -> Self {
        Self {
            target: 0,
            epochs: 10,
            batch_size: 64,
            learning_rate: 1e-3,
            optimizer: OptimizerKind::adam(),
            seed: 0,
            clip_to_valid: true,
            tup: TupConfig::default(),
            tup_subset: 1000,
        }
    }
}

impl RatConfig {
    pub fn train_config(&self, precision: Dtype) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            learning_rate: self.learning_rate,
            optimizer: self.optimizer,
            seed: self.seed,
            precision,
        }
    }
}

/// Rows fed to the optimizer, split by pool and by whether they were perturbed.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeedCounts {
    pub target_clean: usize,
    pub target_perturbed: usize,
    pub d1_clean: usize,
    pub d1_perturbed: usize,
    pub d2_clean: usize,
    pub d2_perturbed: usize,
}

#[derive(Debug, Clone)]
pub struct RatOutcome<T> {
    pub model: Classifier<T>,
    pub partition: RatPartition,
    pub r_t: Tensor<T>,
    /// Present when the perturbation was computed here.
    pub tup: Option<TupResult<T>>,
    pub log: TrainLog,
    pub fed: FeedCounts,
}

/// Warm-started retraining of `model` on the partitioned set.
///
/// `r_t` is used when given; otherwise a TUP is computed on the pre-training
/// model over the first `tup_subset` points of `pool_d1`.
pub fn rat_train<T: Scalar>(model: &Classifier<T>, data: &LabeledDataset<T>, cfg: &RatConfig, r_t: Option<&Tensor<T>>) -> Result<RatOutcome<T>> {
    let train_cfg = cfg.train_config(T::DTYPE);
    train_cfg.validate()?;
    let part = partition_by_prediction(model, data, cfg.target, cfg.seed)?;
    info!(
        "rat partition for target {}: |pool_t|={} |d1|={} |d2|={}",
        cfg.target,
        part.pool_t.len(),
        part.pool_d1.len(),
        part.pool_d2.len()
    );
    let (r_t, tup) = match r_t {
        Some(r) => (r.clone(), None),
        None if part.pool_d1.is_empty() => (Tensor::zeros(data.sample_shape()), None),
        None => {
            let m = part.pool_d1.len().min(cfg.tup_subset.max(1));
            let x = data.subset(&part.pool_d1[..m], format!("{}/d1", data.name));
            let tcfg = TupConfig { target: cfg.target, ..cfg.tup.clone() };
            let res = compute_tup(model, &x, &tcfg)?;
            (res.r.clone(), Some(res))
        }
    };
    if r_t.shape() != data.sample_shape() {
        return Err(Error::InputShape { expected: data.sample_shape().to_vec(), got: r_t.shape().to_vec() });
    }

    let d1 = part.d1_mask(data.len());
    let mut is_t = vec![false; data.len()];
    for &i in &part.pool_t {
        is_t[i] = true;
    }
    let mut fed = FeedCounts::default();
    let mut retrained = model.clone();
    let log = fit(&mut retrained, data.len(), &train_cfg, |idx| {
        let (x, y, flags) = rat_batch(data, &d1, &r_t, idx, cfg.clip_to_valid)?;
        for (&i, &f) in idx.iter().zip(&flags) {
            let slot = match (is_t[i], d1[i], f) {
                (true, _, false) => &mut fed.target_clean,
                (true, _, true) => &mut fed.target_perturbed,
                (false, true, true) => &mut fed.d1_perturbed,
                (false, true, false) => &mut fed.d1_clean,
                (false, false, true) => &mut fed.d2_perturbed,
                (false, false, false) => &mut fed.d2_clean,
            };
            *slot += 1;
        }
        Ok((x, y))
    })?;
    retrained.lineage.insert("rat_target".into(), cfg.target.to_string());
    retrained.lineage.insert("rat_epochs".into(), cfg.epochs.to_string());
    retrained.lineage.insert("rat_seed".into(), cfg.seed.to_string());
    Ok(RatOutcome { model: retrained, partition: part, r_t, tup, log, fed })
}

/// Mean cross-entropy of a clean labeled set, for logging.
pub fn mean_loss<T: Scalar>(model: &Classifier<T>, data: &LabeledDataset<T>) -> Result<f64> {
    if data.is_empty() {
        return Ok(0.0);
    }
    Ok(summed_loss(model, &data.images, &data.labels)?.as_f64() / data.len() as f64)
}
