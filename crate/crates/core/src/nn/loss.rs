use crate::error::{invalid, Result};

pub const HUBER_DELTA: f64 = 1.0;

/// Sum over classes of the Huber penalty on `a = k − g`; the gradient is
/// `a` clipped to `[−δ, δ]`.
pub fn huber_svm_loss(k: &[f64], g: &[f64], delta: f64) -> Result<(f64, Vec<f64>)> {
    if k.len() != g.len() {
        return Err(invalid(format!(
            "score vector has {} entries, target has {}",
            k.len(),
            g.len()
        )));
    }
    let mut loss = 0.0;
    let grad = k
        .iter()
        .zip(g)
        .map(|(&ki, &gi)| {
            let a = ki - gi;
            if a.abs() < delta {
                loss += 0.5 * a * a;
                a
            } else {
                loss += delta * (a.abs() - 0.5 * delta);
                delta * a.signum()
            }
        })
        .collect();
    Ok((loss, grad))
}

/// Max-subtracted softmax.
pub fn softmax(u: &[f64]) -> Vec<f64> {
    let m = u.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = u.iter().map(|&v| (v - m).exp()).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|v| v / z).collect()
}

/// `−log softmax(u)[label]` and its gradient `softmax(u) − onehot(label)`.
pub fn softmax_ce_loss(u: &[f64], label: usize) -> Result<(f64, Vec<f64>)> {
    if label >= u.len() {
        return Err(invalid(format!("label {label} out of range for {} classes", u.len())));
    }
    let m = u.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let z: f64 = u.iter().map(|&v| (v - m).exp()).sum();
    let loss = m + z.ln() - u[label];
    let mut grad = softmax(u);
    grad[label] -= 1.0;
    Ok((loss, grad))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn huber_examples() {
        let (l, g) = huber_svm_loss(&[0.0, 1.0], &[0.0, 1.0], 1.0).unwrap();
        assert_eq!((l, g), (0.0, vec![0.0, 0.0]));
        let (l, g) = huber_svm_loss(&[0.6], &[0.0], 1.0).unwrap();
        assert!((l - 0.18).abs() < 1e-15);
        assert!((g[0] - 0.6).abs() < 1e-15);
        let (l, g) = huber_svm_loss(&[-1.0], &[1.0], 1.0).unwrap();
        assert!((l - 1.5).abs() < 1e-15);
        assert_eq!(g, vec![-1.0]);
        assert!(huber_svm_loss(&[1.0], &[1.0, 0.0], 1.0).is_err());
    }

    #[test]
    fn cross_entropy_examples() {
        let (l, g) = softmax_ce_loss(&[0.0, 0.0], 0).unwrap();
        assert!((l - std::f64::consts::LN_2).abs() < 1e-12);
        assert!((g[0] + 0.5).abs() < 1e-12 && (g[1] - 0.5).abs() < 1e-12);
        let (l, _) = softmax_ce_loss(&[1.0, 0.0], 0).unwrap();
        let e = std::f64::consts::E;
        assert!((softmax(&[1.0, 0.0])[0] - e / (e + 1.0)).abs() < 1e-12);
        assert!((l - (1.0 + 1.0 / e).ln()).abs() < 1e-12);
        assert!((l - 0.3133).abs() < 1e-4);
        let (l, _) = softmax_ce_loss(&[40.0, 0.0], 0).unwrap();
        assert!(l < 1e-15);
        assert!(softmax_ce_loss(&[0.0], 1).is_err());
    }

    proptest! {
        #[test]
        fn softmax_sums_to_one_and_is_shift_invariant(u in proptest::collection::vec(-30.0f64..30.0, 1..8), c in -100.0f64..100.0) {
            let p = softmax(&u);
            prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-6);
            prop_assert!(p.iter().all(|&v| (0.0..=1.0).contains(&v)));
            let shifted: Vec<f64> = u.iter().map(|v| v + c).collect();
            for (a, b) in p.iter().zip(softmax(&shifted)) {
                prop_assert!((a - b).abs() < 1e-9);
            }
        }

        #[test]
        fn huber_gradient_is_bounded(k in proptest::collection::vec(-50.0f64..50.0, 1..8)) {
            let g: Vec<f64> = (0..k.len()).map(|i| f64::from(u8::from(i == 0))).collect();
            let (_, grad) = huber_svm_loss(&k, &g, HUBER_DELTA).unwrap();
            prop_assert!(grad.iter().all(|v| v.abs() <= HUBER_DELTA));
        }
    }
}
