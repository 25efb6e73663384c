use super::{NnError, Tensor};

/// Numerically stable softmax of one logit vector.
pub fn softmax(z: &[f64]) -> Vec<f64> {
    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// Row-wise softmax of an `N × K` logit tensor.
pub fn softmax_batch(logits: &Tensor) -> Tensor {
    let k = logits.shape()[1];
    let data = logits.data().chunks(k).flat_map(softmax).collect();
    Tensor::new(logits.shape().to_vec(), data).expect("same shape")
}

/// Mean of `−ln p[label]` over the batch.
pub fn cross_entropy(probs: &Tensor, labels: &[usize]) -> Result<f64, NnError> {
    let k = check_labels(probs, labels)?;
    let total: f64 = probs
        .data()
        .chunks(k)
        .zip(labels)
        .map(|(p, &y)| -p[y].max(f64::MIN_POSITIVE).ln())
        .sum();
    Ok(total / labels.len() as f64)
}

/// Gradient of the mean cross-entropy with respect to the logits feeding the
/// softmax: `(p − onehot(y)) / N`.
pub fn softmax_cross_entropy_grad(probs: &Tensor, labels: &[usize]) -> Result<Tensor, NnError> {
    let k = check_labels(probs, labels)?;
    let n = labels.len() as f64;
    let mut g = probs.clone();
    for (row, &y) in g.data_mut().chunks_mut(k).zip(labels) {
        row[y] -= 1.0;
        row.iter_mut().for_each(|v| *v /= n);
    }
    Ok(g)
}

fn check_labels(probs: &Tensor, labels: &[usize]) -> Result<usize, NnError> {
    let &[n, k] = probs.shape() else {
        return Err(NnError::ShapeMismatch(format!("probabilities {:?}", probs.shape())));
    };
    if n != labels.len() || labels.iter().any(|&y| y >= k) {
        return Err(NnError::ShapeMismatch(format!(
            "{} labels for {n}×{k} probabilities",
            labels.len()
        )));
    }
    Ok(k)
}

/// `λ · Σ w²` over the given weight tensors.
pub fn l2_penalty<'a>(weights: impl IntoIterator<Item = &'a Tensor>, lambda: f64) -> f64 {
    lambda
        * weights
            .into_iter()
            .flat_map(|t| t.data().iter())
            .map(|w| w * w)
            .sum::<f64>()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn softmax_basics() {
        assert_eq!(softmax(&[3.0, 3.0]), vec![0.5, 0.5]);
        let a = softmax(&[0.3, -1.7]);
        let b = softmax(&[1000.3, 998.3]);
        assert!((a[0] - b[0]).abs() <= 1e-12 && (a[1] - b[1]).abs() <= 1e-12);
        assert!((a.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
    }

    #[test]
    fn cross_entropy_values() {
        let perfect = Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        assert_eq!(cross_entropy(&perfect, &[0, 1]).unwrap(), 0.0);
        let uniform = Tensor::filled(&[3, 2], 0.5);
        assert!((cross_entropy(&uniform, &[0, 1, 1]).unwrap() - std::f64::consts::LN_2).abs() < 1e-15);
        assert!(cross_entropy(&uniform, &[0, 2, 1]).is_err());
    }

    #[test]
    fn l2_values() {
        let w = Tensor::new(vec![1], vec![3.0]).unwrap();
        assert_eq!(l2_penalty([&w], 0.0), 0.0);
        assert!((l2_penalty([&w], 0.1) - 0.9).abs() < 1e-15);
    }
}
