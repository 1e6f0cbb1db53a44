use alloc::vec::Vec;

use crate::error::{config_err, input_err, Result};
use crate::tensor::Tensor;

/// Row-wise softmax of an N×c matrix with max subtraction.
pub fn softmax_rows(logits: &Tensor) -> Result<Tensor> {
    let (n, c) = rows_cols(logits)?;
    let mut out = Vec::with_capacity(n * c);
    for row in logits.data().chunks_exact(c) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = row.iter().map(|&v| libm::exp(v - max)).collect();
        let z: f64 = exps.iter().sum();
        out.extend(exps.into_iter().map(|e| e / z));
    }
    Tensor::from_vec(&[n, c], out)
}

fn rows_cols(logits: &Tensor) -> Result<(usize, usize)> {
    match logits.shape() {
        [n, c] => Ok((*n, *c)),
        s => Err(config_err!("logits must be an N×c matrix, got {s:?}")),
    }
}

fn check_labels(labels: &[usize], n: usize, c: usize) -> Result<()> {
    if labels.len() != n {
        return Err(input_err!("{} labels supplied for {n} logit rows", labels.len()));
    }
    if let Some((i, &l)) = labels.iter().enumerate().find(|(_, &l)| l >= c) {
        return Err(input_err!("label {l} at position {i} is outside [0, {c})"));
    }
    Ok(())
}

/// Per-row `−log softmax(row)[label]`, via log-sum-exp with max subtraction.
pub fn cross_entropy_per_row(logits: &Tensor, labels: &[usize]) -> Result<Vec<f64>> {
    let (n, c) = rows_cols(logits)?;
    check_labels(labels, n, c)?;
    Ok(logits
        .data()
        .chunks_exact(c)
        .zip(labels)
        .map(|(row, &l)| {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = libm::log(row.iter().map(|&v| libm::exp(v - max)).sum::<f64>());
            // lse ≥ 0 and max − row[l] ≥ 0, so the loss cannot go negative
            lse + (max - row[l])
        })
        .collect())
}

/// Batch mean of the per-row cross-entropy.
pub fn softmax_cross_entropy(logits: &Tensor, labels: &[usize]) -> Result<f64> {
    let per_row = cross_entropy_per_row(logits, labels)?;
    Ok(per_row.iter().sum::<f64>() / per_row.len() as f64)
}

/// Gradient of the mean loss w.r.t. the logits: `(softmax − onehot)/N`.
pub fn softmax_cross_entropy_backward(probs: &Tensor, labels: &[usize], grad_loss: f64) -> Result<Tensor> {
    let (n, c) = rows_cols(probs)?;
    check_labels(labels, n, c)?;
    let mut g = probs.scale(grad_loss / n as f64);
    for (row, &l) in g.data_mut().chunks_exact_mut(c).zip(labels) {
        row[l] -= grad_loss / n as f64;
    }
    Ok(g)
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    #[test]
    fn uniform_logits_give_log_c() {
        let logits = Tensor::full(&[3, 10], 0.7);
        let l = softmax_cross_entropy(&logits, &[0, 4, 9]).unwrap();
        assert!((l - libm::log(10.0)).abs() < 1e-12);
        assert!((l - core::f64::consts::LN_10).abs() < 1e-12);
    }

    #[test]
    fn confident_true_class_gives_tiny_loss() {
        let mut row = vec![0.0; 10];
        row[3] = 100.0;
        let logits = Tensor::from_vec(&[1, 10], row).unwrap();
        let l = softmax_cross_entropy(&logits, &[3]).unwrap();
        assert!((0.0..1e-8).contains(&l));
    }

    #[test]
    fn rejects_out_of_range_labels() {
        let logits = Tensor::zeros(&[2, 3]);
        assert!(matches!(softmax_cross_entropy(&logits, &[0, 3]), Err(crate::Error::Input(_))));
        assert!(softmax_cross_entropy(&logits, &[0]).is_err());
    }
}
