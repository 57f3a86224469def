/// Logistic function, evaluated without overflow for large `|z|`.
pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Mean binary cross-entropy over raw logits and its gradient w.r.t. each logit.
///
/// Uses `max(z, 0) - z*y + ln(1 + exp(-|z|))`, which stays finite for any
/// finite logit. The gradient is `(sigmoid(z) - y) / n`.
pub fn bce_with_logits(logits: &[f64], targets: &[f64]) -> (f64, Vec<f64>) {
    assert_eq!(logits.len(), targets.len(), "logits and targets differ in length");
    let n = logits.len().max(1) as f64;
    let mut loss = 0.0;
    let grad = logits
        .iter()
        .zip(targets)
        .map(|(&z, &y)| {
            loss += z.max(0.0) - z * y + (-z.abs()).exp().ln_1p();
            (sigmoid(z) - y) / n
        })
        .collect();
    (loss / n, grad)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_logit() {
        let (loss, grad) = bce_with_logits(&[0.0], &[1.0]);
        assert!((loss - std::f64::consts::LN_2).abs() < 1e-15);
        assert_eq!(grad, vec![-0.5]);
    }

    #[test]
    fn extreme_logits_stay_finite() {
        let (loss, _) = bce_with_logits(&[40.0], &[1.0]);
        assert!((0.0..1e-15).contains(&loss));

        let (loss, grad) = bce_with_logits(&[-1000.0], &[1.0]);
        assert_eq!(loss, 1000.0);
        assert_eq!(grad, vec![-1.0]);

        let (loss, grad) = bce_with_logits(&[1000.0, -1000.0], &[0.0, 0.0]);
        assert_eq!(loss, 500.0);
        assert!(grad.iter().all(|g| g.is_finite()));
    }

    #[test]
    fn gradient_matches_finite_difference() {
        let targets = [1.0, 0.0, 1.0];
        let z = [0.3, -1.2, 2.5];
        let (_, grad) = bce_with_logits(&z, &targets);
        let h = 1e-6;
        for i in 0..3 {
            let mut plus = z;
            let mut minus = z;
            plus[i] += h;
            minus[i] -= h;
            let fd = (bce_with_logits(&plus, &targets).0 - bce_with_logits(&minus, &targets).0) / (2.0 * h);
            assert!((fd - grad[i]).abs() < 1e-9);
        }
    }

    #[test]
    fn sigmoid_symmetry() {
        for z in [-800.0, -3.0, 0.0, 2.0, 800.0] {
            assert!((sigmoid(z) + sigmoid(-z) - 1.0).abs() < 1e-15);
        }
    }
}
