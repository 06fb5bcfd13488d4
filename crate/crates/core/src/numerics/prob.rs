use std::f64::consts::PI;

use super::Tensor;
use crate::error::{invalid, Result};

/// Stable log-softmax of one distribution.
pub fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|&v| (v - max).exp()).sum::<f64>().ln();
    logits.iter().map(|&v| v - lse).collect()
}

/// Row-wise log-softmax of a 2-d tensor (a vector is one row).
pub fn log_softmax_rows(logits: &Tensor) -> Tensor {
    let mut out = logits.clone();
    for r in 0..logits.rows() {
        let ls = log_softmax(logits.row(r));
        out.row_mut(r).copy_from_slice(&ls);
    }
    out
}

/// Softmax of `logits / temperature` along the last axis.
pub fn softmax(logits: &Tensor, temperature: f64) -> Result<Tensor> {
    if !(temperature > 0.0) || !temperature.is_finite() {
        return Err(invalid(format!(
            "softmax temperature must be positive and finite, got {temperature}"
        )));
    }
    let scaled = logits.map(|v| v / temperature);
    Ok(softmax_rows(&scaled))
}

pub fn softmax_rows(logits: &Tensor) -> Tensor {
    let mut out = logits.clone();
    for r in 0..logits.rows() {
        let row = out.row_mut(r);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            total += *v;
        }
        for v in row.iter_mut() {
            *v /= total;
        }
    }
    out
}

/// Log density of `N(mean, sigma^2 I)` at `x`.
pub fn gaussian_log_density(x: &[f64], mean: &[f64], sigma: f64) -> Result<f64> {
    if x.len() != mean.len() {
        return Err(invalid(format!(
            "gaussian_log_density: x has {} dims, mean has {}",
            x.len(),
            mean.len()
        )));
    }
    if !(sigma > 0.0) {
        return Err(invalid(format!("sigma must be positive, got {sigma}")));
    }
    let d = x.len() as f64;
    let var = sigma * sigma;
    let sq: f64 = x.iter().zip(mean).map(|(a, b)| (a - b) * (a - b)).sum();
    Ok(-0.5 * d * (2.0 * PI * var).ln() - sq / (2.0 * var))
}

/// `KL(p || q)` for two categorical distributions given as probabilities.
pub fn categorical_kl(p: &[f64], q: &[f64]) -> Result<f64> {
    if p.len() != q.len() {
        return Err(invalid("categorical_kl: length mismatch"));
    }
    Ok(p.iter()
        .zip(q)
        .filter(|(&pi, _)| pi > 0.0)
        .map(|(&pi, &qi)| pi * (pi / qi).ln())
        .sum())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn softmax_examples() {
        let s = softmax(&Tensor::vector(vec![0.0, 0.0]), 1.0).unwrap();
        assert_eq!(s.data(), &[0.5, 0.5]);

        let s = softmax(&Tensor::vector(vec![2f64.ln(), 0.0]), 1.0).unwrap();
        assert!((s.data()[0] - 2.0 / 3.0).abs() < 1e-15);
        assert!((s.data()[1] - 1.0 / 3.0).abs() < 1e-15);

        let s = softmax(&Tensor::vector(vec![1000.0, 0.0]), 1.0).unwrap();
        assert!(s.is_finite());
        assert!((s.sum() - 1.0).abs() < 1e-12);
        assert!(s.data()[0] > 1.0 - 1e-12 && s.data()[1] < 1e-300);
    }

    #[test]
    fn softmax_rejects_bad_temperature() {
        let x = Tensor::vector(vec![1.0, 2.0]);
        assert!(softmax(&x, 0.0).is_err());
        assert!(softmax(&x, -1.0).is_err());
        assert!(softmax(&x, f64::NAN).is_err());
    }

    #[test]
    fn gaussian_examples() {
        let g = gaussian_log_density(&[0.3], &[0.3], 1.0).unwrap();
        assert!((g + 0.918_938_533_204_672_7).abs() < 1e-12);
        let g = gaussian_log_density(&[1.3], &[0.3], 1.0).unwrap();
        assert!((g + 1.418_938_533_204_672_7).abs() < 1e-12);
        let g = gaussian_log_density(&[0.0; 4], &[0.0; 4], 0.1).unwrap();
        assert!((g - 5.534_586_239_157_492).abs() < 1e-10, "{g}");
        assert!(gaussian_log_density(&[0.0; 3], &[0.0; 4], 0.1).is_err());
    }

    #[test]
    fn kl_hand_case() {
        let kl = categorical_kl(&[0.5, 0.5], &[0.25, 0.75]).unwrap();
        assert!((kl - 0.143_841_036).abs() < 1e-8);
        assert_eq!(categorical_kl(&[0.2, 0.8], &[0.2, 0.8]).unwrap(), 0.0);
    }

    proptest! {
        #[test]
        fn softmax_normalizes(
            logits in proptest::collection::vec(-50.0f64..50.0, 1..20),
            log_tau in -3.0f64..3.0,
        ) {
            let tau = 10f64.powf(log_tau);
            let s = softmax(&Tensor::vector(logits), tau).unwrap();
            prop_assert!(s.data().iter().all(|&p| p >= 0.0));
            prop_assert!((s.sum() - 1.0).abs() < 1e-12);
        }

        #[test]
        fn gaussian_peaks_at_mean(
            mean in proptest::collection::vec(-5.0f64..5.0, 1..6),
            delta in proptest::collection::vec(-1.0f64..1.0, 6),
            sigma in 0.01f64..3.0,
        ) {
            let x: Vec<f64> = mean.iter().zip(&delta).map(|(m, d)| m + d).collect();
            let at_mean = gaussian_log_density(&mean, &mean, sigma).unwrap();
            let off = gaussian_log_density(&x, &mean, sigma).unwrap();
            prop_assert!(at_mean >= off);
        }

        #[test]
        fn kl_nonnegative(
            a in proptest::collection::vec(-4.0f64..4.0, 2..10),
            b in proptest::collection::vec(-4.0f64..4.0, 10),
        ) {
            let p = softmax_rows(&Tensor::vector(a.clone()));
            let q = softmax_rows(&Tensor::vector(b[..a.len()].to_vec()));
            prop_assert!(categorical_kl(p.data(), q.data()).unwrap() >= -1e-15);
        }
    }
}
