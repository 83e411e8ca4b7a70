use super::Tensor;

#[derive(Debug, Clone)]
pub struct LossOutput {
    /// Mean cross-entropy over the batch.
    pub loss: f64,
    /// Per-element cross-entropy.
    pub per_sample: Vec<f64>,
    /// Gradient of `loss` with respect to the logits.
    pub grad: Tensor,
}

pub fn log_softmax_row(row: &[f64]) -> Vec<f64> {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    row.iter().map(|v| v - lse).collect()
}

/// Softmax cross-entropy with integer class targets, averaged over the batch.
pub fn softmax_cross_entropy(logits: &Tensor, targets: &[usize]) -> LossOutput {
    let n = logits.n();
    let k = logits.sample_len();
    assert_eq!(targets.len(), n, "one target per batch element");
    let mut grad = Tensor::zeros(logits.shape());
    let mut per_sample = Vec::with_capacity(n);
    for (i, &t) in targets.iter().enumerate() {
        assert!(t < k, "target {t} out of range for {k} classes");
        let logp = log_softmax_row(logits.sample(i));
        per_sample.push(-logp[t]);
        let g = grad.sample_mut(i);
        for c in 0..k {
            g[c] = (logp[c].exp() - if c == t { 1.0 } else { 0.0 }) / n as f64;
        }
    }
    LossOutput {
        loss: per_sample.iter().sum::<f64>() / n as f64,
        per_sample,
        grad,
    }
}
