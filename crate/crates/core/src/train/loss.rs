//! Classification losses on raw logits.

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

fn batch_classes<T: Real>(logits: &Tensor<T>, op: &'static str) -> Result<(usize, usize)> {
    match *logits.shape() {
        [b, k] if b >= 1 && k >= 1 => Ok((b, k)),
        _ => Err(Error::contract(
            op,
            format!("logits must be [B, K], got {:?}", logits.shape()),
        )),
    }
}

/// Mean softmax cross-entropy of `logits: [B, K]` against class indices,
/// evaluated with a max-shifted log-sum-exp. Also returns the softmax
/// probabilities, row-major `[B, K]`.
pub fn cross_entropy_forward<T: Real>(logits: &Tensor<T>, labels: &[usize]) -> Result<(T, Vec<T>)> {
    let (b, k) = batch_classes(logits, "cross_entropy")?;
    if labels.len() != b {
        return Err(Error::dim("cross_entropy", logits.shape(), &[labels.len()]));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
        return Err(Error::contract(
            "cross_entropy",
            format!("label {bad} out of range for {k} classes"),
        ));
    }
    let mut probs = Vec::with_capacity(b * k);
    let mut total = T::zero();
    for (row, &label) in logits.data().chunks_exact(k).zip(labels) {
        let (arg, m) =
            row.iter().copied().enumerate().fold(
                (0, T::neg_infinity()),
                |best, (i, v)| if v > best.1 { (i, v) } else { best },
            );
        // the max term contributes exactly 1; keep the rest separate for ln_1p
        let rest: T = row
            .iter()
            .enumerate()
            .filter(|&(i, _)| i != arg)
            .map(|(_, &v)| (v - m).exp())
            .sum();
        let z = T::one() + rest;
        total += (m - row[label]) + rest.ln_1p();
        probs.extend(row.iter().map(|&v| (v - m).exp() / z));
    }
    let loss = total / T::of(b as f64);
    if !loss.is_finite() {
        return Err(Error::Numeric {
            op: "cross_entropy".into(),
            detail: "non-finite loss".into(),
        });
    }
    Ok((loss, probs))
}

/// Mean binary cross-entropy with logits, averaged over classes and batch:
/// `max(z, 0) - z·y + ln(1 + e^{-|z|})`.
pub fn bce_forward<T: Real>(logits: &Tensor<T>, targets: &Tensor<T>) -> Result<T> {
    batch_classes(logits, "bce_multilabel")?;
    if logits.shape() != targets.shape() {
        return Err(Error::dim("bce_multilabel", logits.shape(), targets.shape()));
    }
    if targets.data().iter().any(|&y| !(y >= T::zero() && y <= T::one())) {
        return Err(Error::contract("bce_multilabel", "targets must lie in [0, 1]"));
    }
    let total: T = logits
        .data()
        .iter()
        .zip(targets.data())
        .map(|(&z, &y)| z.max(T::zero()) - z * y + (-z.abs()).exp().ln_1p())
        .sum();
    let loss = total / T::of(logits.len() as f64);
    if !loss.is_finite() {
        return Err(Error::Numeric {
            op: "bce_multilabel".into(),
            detail: "non-finite loss".into(),
        });
    }
    Ok(loss)
}

/// Mean softmax cross-entropy.
pub fn cross_entropy<T: Real>(logits: &Tensor<T>, labels: &[usize]) -> Result<T> {
    cross_entropy_forward(logits, labels).map(|(l, _)| l)
}

/// Mean binary cross-entropy over `[B, K]` logits and `{0, 1}` targets.
pub fn bce_multilabel<T: Real>(logits: &Tensor<T>, targets: &Tensor<T>) -> Result<T> {
    bce_forward(logits, targets)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uniform_logits_give_ln_k() {
        let l = cross_entropy(&Tensor::<f64>::zeros([3, 2]), &[0, 1, 1]).unwrap();
        assert!((l - std::f64::consts::LN_2).abs() < 1e-15);
        let l = cross_entropy(&Tensor::<f64>::zeros([1, 5]), &[4]).unwrap();
        assert!((l - 5f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn confident_prediction_tends_to_zero() {
        let l = cross_entropy(&Tensor::new([1, 2], vec![50.0f64, -50.0]).unwrap(), &[0]).unwrap();
        assert!(l > 0.0 && l < 1e-40);
    }

    #[test]
    fn large_logits_stay_finite() {
        let l = cross_entropy(&Tensor::new([1, 2], vec![1e4f32, -1e4]).unwrap(), &[1]).unwrap();
        assert_eq!(l, 2e4);
    }

    #[test]
    fn label_out_of_range() {
        let err = cross_entropy(&Tensor::<f64>::zeros([1, 2]), &[2]).unwrap_err();
        assert!(matches!(err, Error::Contract { .. }));
        assert!(cross_entropy(&Tensor::<f64>::zeros([2, 2]), &[0]).is_err());
    }

    #[test]
    fn bce_matches_direct_form() {
        let z = Tensor::new([2, 2], vec![0.3f64, -1.7, 4.0, 0.0]).unwrap();
        let y = Tensor::new([2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let sig = |v: f64| 1.0 / (1.0 + (-v).exp());
        let direct: f64 = z
            .data()
            .iter()
            .zip(y.data())
            .map(|(&z, &y)| -(y * sig(z).ln() + (1.0 - y) * (1.0 - sig(z)).ln()))
            .sum::<f64>()
            / 4.0;
        assert!((bce_multilabel(&z, &y).unwrap() - direct).abs() < 1e-14);
        assert!(
            (bce_multilabel::<f64>(&Tensor::zeros([1, 1]), &Tensor::ones([1, 1])).unwrap() - std::f64::consts::LN_2)
                .abs()
                < 1e-15
        );
    }
}
