//! Classification losses. Both reduce by the batch mean.

use crate::nn::sigmoid;
use crate::tensor::Scalar;

/// Returns the mean cross-entropy and the row-wise softmax probabilities.
pub(crate) fn softmax_cross_entropy<T: Scalar>(logits: &[T], labels: &[usize], k: usize) -> (T, Vec<T>) {
    let n = labels.len();
    let mut probs = Vec::with_capacity(logits.len());
    let mut total = T::zero();
    for (row, &label) in logits.chunks(k).zip(labels) {
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let exps: Vec<T> = row.iter().map(|&z| (z - max).exp()).collect();
        let z: T = exps.iter().copied().sum();
        // −log softmax[label] = log Σ exp(z − max) − (z_label − max)
        total = total + z.ln() - (row[label] - max);
        probs.extend(exps.iter().map(|&e| e / z));
    }
    (total / T::from_f64((n) as f64), probs)
}

/// `upstream · (softmax − onehot) / N`.
pub(crate) fn softmax_cross_entropy_grad<T: Scalar>(probs: &[T], labels: &[usize], upstream: T) -> Vec<T> {
    let n = labels.len();
    let k = probs.len() / n;
    let scale = upstream / T::from_f64((n) as f64);
    let mut g: Vec<T> = probs.iter().map(|&p| p * scale).collect();
    for (i, &label) in labels.iter().enumerate() {
        g[i * k + label] = (probs[i * k + label] - T::one()) * scale;
    }
    g
}

/// Mean of `max(z, 0) − z·d + log(1 + exp(−|z|))`, which equals
/// `−[d·log σ(z) + (1 − d)·log(1 − σ(z))]` without overflow.
pub(crate) fn bce_with_logits<T: Scalar>(logits: &[T], targets: &[T]) -> T {
    let total: T = logits
        .iter()
        .zip(targets)
        .map(|(&z, &d)| z.max(T::zero()) - z * d + (-z.abs()).exp().ln_1p())
        .sum();
    total / T::from_f64((logits.len()) as f64)
}

/// `upstream · (σ(z) − d) / N`.
pub(crate) fn bce_with_logits_grad<T: Scalar>(logits: &[T], targets: &[T], upstream: T) -> Vec<T> {
    let scale = upstream / T::from_f64((logits.len()) as f64);
    logits
        .iter()
        .zip(targets)
        .map(|(&z, &d)| (sigmoid(z) - d) * scale)
        .collect()
}
