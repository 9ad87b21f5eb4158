use crate::error::{bail, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Probabilities are clamped here before the logarithm.
pub const PROB_FLOOR: f64 = 1e-12;

/// Mean over pixels of `-w[label] * ln p[label]`, together with its gradient
/// with respect to the pre-softmax logits (softmax and cross-entropy fused:
/// `w[label] * (p - onehot) / pixels`).
///
/// `labels` holds one class id per pixel in `(n, h, w)` order.
pub fn pixel_cross_entropy<S: Scalar>(probs: &Tensor<S>, labels: &[u8], class_weights: &[f64]) -> Result<(f64, Tensor<S>)> {
    let d = probs.dims();
    let p = d.plane();
    if labels.len() != d.n * p {
        bail!(Data, "{} labels for {} pixels", labels.len(), d.n * p);
    }
    if class_weights.len() != d.c {
        bail!(Data, "{} class weights for {} classes", class_weights.len(), d.c);
    }
    let count = (d.n * p) as f64;
    let inv = S::from_f64(1.0 / count);
    let mut grad = probs.clone();
    let mut total = 0.0f64;
    for n in 0..d.n {
        for i in 0..p {
            let label = labels[n * p + i] as usize;
            if label >= d.c {
                bail!(Data, "label {label} out of range for {} classes", d.c);
            }
            let w = class_weights[label];
            let pl = probs.data()[d.index(n, label, 0, 0) + i].as_f64().max(PROB_FLOOR);
            total -= w * pl.ln();
            let ws = S::from_f64(w);
            for c in 0..d.c {
                let k = d.index(n, c, 0, 0) + i;
                let onehot = if c == label { S::one() } else { S::zero() };
                grad.data_mut()[k] = ws * (probs.data()[k] - onehot) * inv;
            }
        }
    }
    let loss = total / count;
    if !loss.is_finite() {
        bail!(Numeric, "non-finite loss");
    }
    Ok((loss, grad))
}

/// Fraction of pixels whose arg-max class equals the label.
pub fn pixel_accuracy<S: Scalar>(probs: &Tensor<S>, labels: &[u8]) -> f64 {
    let d = probs.dims();
    let p = d.plane();
    let mut hits = 0usize;
    for n in 0..d.n {
        for i in 0..p {
            let mut best = 0;
            for c in 1..d.c {
                if probs.data()[d.index(n, c, 0, 0) + i] > probs.data()[d.index(n, best, 0, 0) + i] {
                    best = c;
                }
            }
            hits += (best == labels[n * p + i] as usize) as usize;
        }
    }
    hits as f64 / (d.n * p) as f64
}

/// Inverse class frequency, `w_k = N / (K * N_k)`; absent classes get 0.
pub fn inverse_frequency_weights(labels: &[u8], classes: usize) -> Vec<f64> {
    let mut counts = vec![0usize; classes];
    for &l in labels {
        if (l as usize) < classes {
            counts[l as usize] += 1;
        }
    }
    let total = counts.iter().sum::<usize>() as f64;
    counts.iter().map(|&c| if c == 0 { 0.0 } else { total / (classes as f64 * c as f64) }).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Dims;

    #[test]
    fn uniform_two_class_is_ln2() {
        let p = Tensor::<f64>::filled(Dims::new(1, 2, 2, 2).unwrap(), 0.5);
        let (loss, _) = pixel_cross_entropy(&p, &[0, 1, 1, 0], &[1.0, 1.0]).unwrap();
        assert!((loss - std::f64::consts::LN_2).abs() < 1e-12);
        assert!((loss - 0.6931).abs() < 1e-4);
    }

    #[test]
    fn perfect_prediction_near_zero() {
        let p = Tensor::<f64>::from_vec(Dims::new(1, 2, 1, 2).unwrap(), vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let (loss, _) = pixel_cross_entropy(&p, &[0, 1], &[1.0, 1.0]).unwrap();
        assert!(loss <= 1e-6);
    }

    #[test]
    fn label_out_of_range() {
        let p = Tensor::<f64>::filled(Dims::new(1, 2, 1, 1).unwrap(), 0.5);
        assert!(matches!(pixel_cross_entropy(&p, &[2], &[1.0, 1.0]), Err(crate::Error::Data(_))));
    }

    #[test]
    fn inverse_frequency() {
        let w = inverse_frequency_weights(&[0, 0, 0, 1], 2);
        assert!((w[0] - 4.0 / 6.0).abs() < 1e-12);
        assert!((w[1] - 2.0).abs() < 1e-12);
    }
}
