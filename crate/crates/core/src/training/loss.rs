//! Label-smoothed cross-entropy with its analytic gradient.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Batch-mean loss and its gradient with respect to the logits.
#[derive(Clone, Debug)]
pub struct Loss {
    pub value: f64,
    pub grad: Tensor,
}

pub(crate) fn log_softmax(row: &[f64]) -> Vec<f64> {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + row.iter().map(|z| (z - m).exp()).sum::<f64>().ln();
    row.iter().map(|z| z - lse).collect()
}

pub(crate) fn check_batch(logits: &[f64], classes: usize, labels: &[usize]) -> Result<()> {
    if classes < 2 || logits.len() != labels.len() * classes || labels.is_empty() {
        return Err(Error::Shape(format!(
            "{} logits do not form a non-empty [{}, {classes}] batch",
            logits.len(),
            labels.len()
        )));
    }
    if let Some(y) = labels.iter().find(|&&y| y >= classes) {
        return Err(Error::Input(format!("label {y} out of range for {classes} classes")));
    }
    if logits.iter().any(|z| !z.is_finite()) {
        return Err(Error::Numeric("non-finite logits".into()));
    }
    Ok(())
}

/// Smoothed cross-entropy on row-major `[B, classes]` logits in double precision.
///
/// Each row's target puts `1 - eps + eps/classes` on the true class and `eps/classes`
/// elsewhere. Optional per-class weights turn the mean into a weighted mean.
pub fn cross_entropy_f64(
    logits: &[f64],
    classes: usize,
    labels: &[usize],
    smoothing: f64,
    class_weights: Option<&[f64]>,
) -> Result<(f64, Vec<f64>)> {
    check_batch(logits, classes, labels)?;
    if !(0.0..1.0).contains(&smoothing) {
        return Err(Error::Parameter(format!("label smoothing {smoothing} outside [0, 1)")));
    }
    if let Some(w) = class_weights {
        if w.len() != classes || w.iter().any(|&x| !(x > 0.0) || !x.is_finite()) {
            return Err(Error::Parameter("class weights must be positive, one per class".into()));
        }
    }
    let weight = |y: usize| class_weights.map_or(1.0, |w| w[y]);
    let total: f64 = labels.iter().map(|&y| weight(y)).sum();
    let off = smoothing / classes as f64;
    let mut value = 0.0;
    let mut grad = vec![0.0; logits.len()];
    for (b, &y) in labels.iter().enumerate() {
        let row = &logits[b * classes..(b + 1) * classes];
        let ls = log_softmax(row);
        let w = weight(y) / total;
        for c in 0..classes {
            let q = if c == y { 1.0 - smoothing + off } else { off };
            value -= w * q * ls[c];
            grad[b * classes + c] = w * (ls[c].exp() - q);
        }
    }
    Ok((value, grad))
}

/// Cross-entropy on `[B, C]` logits; the gradient is returned in single precision.
pub fn cross_entropy(logits: &Tensor, labels: &[usize], smoothing: f64) -> Result<Loss> {
    weighted_cross_entropy(logits, labels, smoothing, None)
}

pub fn weighted_cross_entropy(
    logits: &Tensor,
    labels: &[usize],
    smoothing: f64,
    class_weights: Option<&[f64]>,
) -> Result<Loss> {
    if logits.rank() != 2 {
        return Err(Error::Shape(format!("expected [B, C] logits, got {:?}", logits.shape())));
    }
    let z: Vec<f64> = logits.data().iter().map(|&v| v as f64).collect();
    let (value, grad) = cross_entropy_f64(&z, logits.dim(1), labels, smoothing, class_weights)?;
    Ok(Loss {
        value,
        grad: Tensor::new(logits.shape().to_vec(), grad.into_iter().map(|g| g as f32).collect()),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scalar_oracles() {
        let (v, _) = cross_entropy_f64(&[0.0, 0.0], 2, &[1], 0.0, None).unwrap();
        assert!((v - 2f64.ln()).abs() < 1e-12);
        let (v, _) = cross_entropy_f64(&[2.0, 0.0], 2, &[0], 0.1, None).unwrap();
        let l0 = (1.0 + (-2f64).exp()).ln();
        assert!((v - (0.95 * l0 + 0.05 * (2.0 + l0))).abs() < 1e-12);
        assert!((v - 0.2269).abs() < 1e-4);
        let (v, _) = cross_entropy_f64(&[60.0, -60.0], 2, &[0], 0.0, None).unwrap();
        assert!(v < 1e-40);
    }

    #[test]
    fn rejects_bad_input() {
        assert!(matches!(cross_entropy_f64(&[f64::NAN, 0.0], 2, &[0], 0.0, None), Err(Error::Numeric(_))));
        assert!(matches!(cross_entropy_f64(&[0.0, 0.0], 2, &[2], 0.0, None), Err(Error::Input(_))));
        assert!(matches!(cross_entropy_f64(&[0.0, 0.0], 2, &[0], 1.0, None), Err(Error::Parameter(_))));
    }
}
