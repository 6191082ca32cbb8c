//! Softmax and cross-entropy on `batch x classes` logit buffers.

use crate::scalar::Scalar;

/// Row-wise numerically stable softmax.
pub fn softmax_rows<T: Scalar>(logits: &[T], classes: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(logits.len());
    for row in logits.chunks(classes) {
        let m = row.iter().copied().fold(T::neg_infinity(), T::max);
        let exps: Vec<T> = row.iter().map(|&v| (v - m).exp()).collect();
        let z: T = exps.iter().copied().sum();
        out.extend(exps.into_iter().map(|e| e / z));
    }
    out
}

/// `log(sum(exp(row)))`, never below `max(row)`.
fn logsumexp<T: Scalar>(row: &[T]) -> T {
    let m = row.iter().copied().fold(T::neg_infinity(), T::max);
    let z: T = row.iter().map(|&v| (v - m).exp()).sum();
    m + z.ln()
}

/// Per-sample cross-entropy `-log softmax(row)[label]`.
///
/// Computed as `logsumexp - logit`, which is non-negative in floating point
/// because the sum always includes the `exp(0)` term of the maximum.
pub fn cross_entropy_per_sample<T: Scalar>(logits: &[T], classes: usize, labels: &[usize]) -> Vec<T> {
    logits
        .chunks(classes)
        .zip(labels)
        .map(|(row, &y)| {
            let l = logsumexp(row) - row[y];
            l.max(T::zero())
        })
        .collect()
}

/// Gradient of `scale * sum_i CE_i` with respect to the logits: `scale * (p - onehot)`.
pub fn cross_entropy_grad<T: Scalar>(logits: &[T], classes: usize, labels: &[usize], scale: T) -> Vec<T> {
    let mut g = softmax_rows(logits, classes);
    for (row, &y) in g.chunks_mut(classes).zip(labels) {
        row[y] = row[y] - T::one();
        for v in row.iter_mut() {
            *v = *v * scale;
        }
    }
    g
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax<T: Scalar>(row: &[T]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// `logit[t] - max_{j != t} logit[j]`.
pub fn target_margin<T: Scalar>(row: &[T], target: usize) -> T {
    let other = row
        .iter()
        .enumerate()
        .filter(|&(j, _)| j != target)
        .map(|(_, &v)| v)
        .fold(T::neg_infinity(), T::max);
    row[target] - other
}
