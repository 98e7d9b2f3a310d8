//! Loss functions.
//!
//! Every loss returns the mean over the batch together with the gradient of
//! that mean with respect to the predictions. `bce_with_sigmoid` and
//! `softmax_ce` take logits; the sigmoid/softmax lives inside the loss.

use crate::error::{Error, Result};
use crate::linalg::Matrix;

use super::types::{sigmoid, LossKind};

/// Mean loss and its prediction gradient.
pub fn loss_eval(kind: LossKind, predictions: &Matrix, targets: &Matrix) -> Result<(f64, Matrix)> {
    if predictions.rows() != targets.rows() || predictions.cols() != targets.cols() {
        return Err(Error::ShapeMismatch {
            context: "loss_eval".into(),
            expected: (targets.rows(), targets.cols()),
            got: (predictions.rows(), predictions.cols()),
        });
    }
    let n = predictions.rows();
    if n == 0 {
        return Err(Error::InvalidInput {
            context: "loss over empty batch".into(),
        });
    }
    let inv_n = 1.0 / n as f64;
    let mut grad = Matrix::zeros(n, predictions.cols());
    let mut total = 0.0;
    match kind {
        LossKind::SquaredError => {
            for r in 0..n {
                let p = predictions.row(r);
                let y = targets.row(r);
                let g = grad.row_mut(r);
                for ((&pv, &yv), gv) in p.iter().zip(y.iter()).zip(g.iter_mut()) {
                    let d = pv - yv;
                    total += 0.5 * d * d;
                    *gv = d * inv_n;
                }
            }
        }
        LossKind::BceWithSigmoid => {
            for r in 0..n {
                let y = targets.row(r);
                if y.iter().any(|&v| !(0.0..=1.0).contains(&v)) {
                    return Err(Error::InvalidInput {
                        context: "bce targets must lie in [0, 1]".into(),
                    });
                }
            }
            for r in 0..n {
                let z = predictions.row(r);
                let y = targets.row(r);
                let g = grad.row_mut(r);
                for ((&zv, &yv), gv) in z.iter().zip(y.iter()).zip(g.iter_mut()) {
                    // stable softplus(z) - y·z
                    total += zv.max(0.0) - yv * zv + (-zv.abs()).exp().ln_1p();
                    *gv = (sigmoid(zv) - yv) * inv_n;
                }
            }
        }
        LossKind::SoftmaxCe => {
            for r in 0..n {
                let z = predictions.row(r);
                let y = targets.row(r);
                let zmax = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let mut denom = 0.0;
                for &zv in z {
                    denom += (zv - zmax).exp();
                }
                let log_denom = denom.ln();
                let g = grad.row_mut(r);
                for ((&zv, &yv), gv) in z.iter().zip(y.iter()).zip(g.iter_mut()) {
                    let log_p = zv - zmax - log_denom;
                    total -= yv * log_p;
                    *gv = (log_p.exp() - yv) * inv_n;
                }
            }
        }
    }
    Ok((total * inv_n, grad))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn squared_error_at_target_is_zero() {
        let p = Matrix::from_rows(&[&[1.0, -2.0], &[0.5, 3.0]]).unwrap();
        let (loss, grad) = loss_eval(LossKind::SquaredError, &p, &p).unwrap();
        assert_eq!(loss, 0.0);
        assert!(grad.data().iter().all(|&g| g == 0.0));
    }

    #[test]
    fn bce_at_zero_logit_half_target() {
        let z = Matrix::zeros(1, 3);
        let mut y = Matrix::zeros(1, 3);
        y.data_mut().fill(0.5);
        let (loss, grad) = loss_eval(LossKind::BceWithSigmoid, &z, &y).unwrap();
        // per-unit loss ln 2, summed over 3 units then averaged over 1 sample
        assert!((loss - 3.0 * std::f64::consts::LN_2).abs() < 1e-14);
        assert!(grad.data().iter().all(|&g| g.abs() < 1e-15));
    }

    #[test]
    fn bce_rejects_out_of_range_targets() {
        let z = Matrix::zeros(1, 1);
        let y = Matrix::from_rows(&[&[1.5]]).unwrap();
        assert!(matches!(
            loss_eval(LossKind::BceWithSigmoid, &z, &y),
            Err(Error::InvalidInput { .. })
        ));
    }

    #[test]
    fn softmax_ce_gradient_is_probs_minus_onehot() {
        let z = Matrix::from_rows(&[&[1.0, 2.0, 0.5]]).unwrap();
        let y = Matrix::from_rows(&[&[0.0, 1.0, 0.0]]).unwrap();
        let (_, grad) = loss_eval(LossKind::SoftmaxCe, &z, &y).unwrap();
        let denom: f64 = z.row(0).iter().map(|&v| v.exp()).sum();
        for c in 0..3 {
            let p = z.get(0, c).exp() / denom;
            let expect = p - y.get(0, c);
            assert!((grad.get(0, c) - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        for kind in [
            LossKind::SquaredError,
            LossKind::BceWithSigmoid,
            LossKind::SoftmaxCe,
        ] {
            let mut preds = Matrix::zeros(3, 4);
            let mut targets = Matrix::zeros(3, 4);
            let mut state = 0.4_f64;
            for v in preds.data_mut() {
                state = (state * 7.13 + 0.31).fract();
                *v = state * 2.0 - 1.0;
            }
            for r in 0..3 {
                // valid simplex-ish targets usable by every loss kind
                let row = targets.row_mut(r);
                row[r % 4] = 0.7;
                row[(r + 1) % 4] = 0.3;
            }
            let (_, grad) = loss_eval(kind, &preds, &targets).unwrap();
            let h = 1e-6;
            for r in 0..3 {
                for c in 0..4 {
                    let mut plus = preds.clone();
                    plus.set(r, c, preds.get(r, c) + h);
                    let mut minus = preds.clone();
                    minus.set(r, c, preds.get(r, c) - h);
                    let (lp, _) = loss_eval(kind, &plus, &targets).unwrap();
                    let (lm, _) = loss_eval(kind, &minus, &targets).unwrap();
                    let fd = (lp - lm) / (2.0 * h);
                    let an = grad.get(r, c);
                    assert!(
                        (fd - an).abs() <= 1e-6 * fd.abs().max(an.abs()).max(1e-3),
                        "{kind:?} ({r},{c}): fd {fd} vs {an}"
                    );
                }
            }
        }
    }
}
