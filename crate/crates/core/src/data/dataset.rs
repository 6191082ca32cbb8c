use std::collections::HashSet;

use rand::seq::index;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::nn::Classifier;
use crate::rng;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Images in `[0,1]` with integer class labels.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset<T> {
    /// `N x sample_shape`.
    pub images: Tensor<T>,
    pub labels: Vec<usize>,
    pub name: String,
}

impl<T: Scalar> LabeledDataset<T> {
    pub fn new(images: Tensor<T>, labels: Vec<usize>, name: impl Into<String>) -> Result<Self> {
        if images.shape().is_empty() {
            return Err(Error::Shape("dataset images need a leading sample axis".into()));
        }
        if images.rows() != labels.len() {
            return Err(Error::CountMismatch { images: images.rows(), labels: labels.len() });
        }
        if let Some(v) = images.data().iter().find(|&&v| !(v >= T::zero() && v <= T::one())) {
            return Err(Error::Precondition(format!("pixel value {v} outside [0,1]")));
        }
        Ok(Self { images, labels, name: name.into() })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn sample_shape(&self) -> &[usize] {
        &self.images.shape()[1..]
    }

    pub fn image(&self, i: usize) -> &[T] {
        self.images.row(i)
    }

    /// Rows `indices`, in the given order.
    pub fn subset(&self, indices: &[usize], name: impl Into<String>) -> Self {
        Self {
            images: self.images.gather_rows(indices),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            name: name.into(),
        }
    }

    /// First `n` samples (or all, if fewer).
    pub fn head(&self, n: usize) -> Self {
        let idx: Vec<usize> = (0..n.min(self.len())).collect();
        self.subset(&idx, format!("{}[..{}]", self.name, idx.len()))
    }

    pub fn indices_of_class(&self, class: usize) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.labels[i] == class).collect()
    }

    /// SHA-256 over shape, labels and little-endian pixels.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        for &d in self.images.shape() {
            h.update((d as u64).to_le_bytes());
        }
        for &y in &self.labels {
            h.update((y as u64).to_le_bytes());
        }
        let mut buf = Vec::with_capacity(self.images.len() * 8);
        for &v in self.images.data() {
            v.write_le(&mut buf);
        }
        h.update(&buf);
        hex::encode(h.finalize())
    }

    pub fn cast<U: Scalar>(&self) -> LabeledDataset<U> {
        LabeledDataset { images: self.images.cast(), labels: self.labels.clone(), name: self.name.clone() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub validation_size: usize,
    pub seed: u64,
}

impl Default for SplitSpec {
    fn default() -> Self {
        Self { validation_size: 5000, seed: 0 }
    }
}

/// Seeded disjoint `(train, validation)` index split covering `0..n`.
/// Both index lists are returned in ascending order.
pub fn split_indices(n: usize, spec: &SplitSpec) -> Result<(Vec<usize>, Vec<usize>)> {
    if spec.validation_size >= n {
        return Err(Error::Precondition(format!(
            "validation size {} must be smaller than the dataset ({n})",
            spec.validation_size
        )));
    }
    let perm = rng::permutation(n, &mut rng::stream(spec.seed, rng::streams::SPLIT));
    let mut val = perm[..spec.validation_size].to_vec();
    let mut train = perm[spec.validation_size..].to_vec();
    val.sort_unstable();
    train.sort_unstable();
    Ok((train, val))
}

pub fn split_train_val<T: Scalar>(ds: &LabeledDataset<T>, spec: &SplitSpec) -> Result<(LabeledDataset<T>, LabeledDataset<T>)> {
    let (train, val) = split_indices(ds.len(), spec)?;
    Ok((ds.subset(&train, format!("{}/train", ds.name)), ds.subset(&val, format!("{}/val", ds.name))))
}

/// Uniformly samples `size` indices without replacement among samples whose
/// prediction differs from `target` and that are not in `exclude`.
///
/// Returned indices are in sampling order.
pub fn sample_x_indices(predictions: &[usize], target: usize, size: usize, seed: u64, exclude: &HashSet<usize>) -> Result<Vec<usize>> {
    let eligible: Vec<usize> = (0..predictions.len())
        .filter(|i| predictions[*i] != target && !exclude.contains(i))
        .collect();
    if eligible.len() < size {
        return Err(Error::InsufficientSamples { needed: size, available: eligible.len() });
    }
    let mut r = rng::stream(seed, rng::streams::SAMPLE);
    Ok(index::sample(&mut r, eligible.len(), size).into_iter().map(|j| eligible[j]).collect())
}

/// Draws the set `X` used to build a targeted perturbation: `size` samples
/// the model does not already assign to `target`.
pub fn sample_x<T: Scalar>(ds: &LabeledDataset<T>, model: &Classifier<T>, target: usize, size: usize, seed: u64) -> Result<LabeledDataset<T>> {
    let preds = model.predict_all(&ds.images)?;
    let idx = sample_x_indices(&preds, target, size, seed, &HashSet::new())?;
    Ok(ds.subset(&idx, format!("{}/X(t={target})", ds.name)))
}

/// Two-dimensional Gaussian blobs, one per mean, clipped to `[0,1]^2`.
/// Class `c` is generated by `means[c]`.
pub fn make_synthetic_gaussians<T: Scalar>(n_per_class: usize, means: &[[f64; 2]], std: f64, seed: u64) -> Result<LabeledDataset<T>> {
    for (i, a) in means.iter().enumerate() {
        if means[..i].contains(a) {
            return Err(Error::Precondition(format!("duplicate mean {a:?}")));
        }
    }
    if !(std >= 0.0 && std.is_finite()) {
        return Err(Error::Config("std must be finite and non-negative".into()));
    }
    let noise = Normal::new(0.0, std).map_err(|e| Error::Config(e.to_string()))?;
    let mut r = rng::stream(seed, rng::streams::SAMPLE);
    let mut xs = Vec::with_capacity(means.len() * n_per_class * 2);
    let mut ys = Vec::with_capacity(means.len() * n_per_class);
    for (c, m) in means.iter().enumerate() {
        for _ in 0..n_per_class {
            for &mu in m {
                let v = if std == 0.0 { mu } else { mu + noise.sample(&mut r) };
                xs.push(T::lit(v.clamp(0.0, 1.0)));
            }
            ys.push(c);
        }
    }
    LabeledDataset::new(Tensor::new(vec![ys.len(), 2], xs)?, ys, "gaussians")
}
