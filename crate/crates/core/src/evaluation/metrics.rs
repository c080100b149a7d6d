use crate::error::{Error, Result};

fn check(y_true: &[f64], y_pred: &[f64]) -> Result<()> {
    if y_true.len() != y_pred.len() {
        return Err(Error::dim("metric", &[y_true.len()], &[y_pred.len()]));
    }
    if y_true.is_empty() {
        return Err(Error::EmptyInput("metric vectors"));
    }
    Ok(())
}

pub fn mae(y_true: &[f64], y_pred: &[f64]) -> Result<f64> {
    check(y_true, y_pred)?;
    Ok(y_true.iter().zip(y_pred).map(|(t, p)| (t - p).abs()).sum::<f64>() / y_true.len() as f64)
}

pub fn rmse(y_true: &[f64], y_pred: &[f64]) -> Result<f64> {
    check(y_true, y_pred)?;
    Ok((y_true.iter().zip(y_pred).map(|(t, p)| (t - p).powi(2)).sum::<f64>() / y_true.len() as f64).sqrt())
}

/// Root mean squared difference of `ln(1 + ·)`. Predictions are clamped at
/// zero; negative ground truth is rejected.
pub fn rmsle(y_true: &[f64], y_pred: &[f64]) -> Result<f64> {
    check(y_true, y_pred)?;
    if let Some((index, &value)) = y_true.iter().enumerate().find(|(_, &v)| v < 0.0) {
        return Err(Error::NegativeTruth { index, value });
    }
    let s: f64 = y_true.iter().zip(y_pred).map(|(t, p)| (t.ln_1p() - p.max(0.0).ln_1p()).powi(2)).sum();
    Ok((s / y_true.len() as f64).sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn hand_examples() {
        assert_eq!(mae(&[1.0, 3.0], &[2.0, 5.0]).unwrap(), 1.5);
        assert_eq!(rmse(&[0.0, 0.0], &[3.0, 4.0]).unwrap(), 12.5f64.sqrt());
        let e = std::f64::consts::E;
        assert!((rmsle(&[0.0], &[e - 1.0]).unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(rmsle(&[0.0], &[-0.5]).unwrap(), rmsle(&[0.0], &[0.0]).unwrap());
        let v = [1.0, 2.0, 7.5];
        assert_eq!((mae(&v, &v).unwrap(), rmse(&v, &v).unwrap(), rmsle(&v, &v).unwrap()), (0.0, 0.0, 0.0));
    }

    #[test]
    fn errors() {
        assert!(matches!(mae(&[1.0], &[1.0, 2.0]), Err(Error::Dimension { .. })));
        assert!(matches!(rmsle(&[-1.0], &[1.0]), Err(Error::NegativeTruth { index: 0, .. })));
        assert!(rmse(&[], &[]).is_err());
    }

    proptest! {
        #[test]
        fn rmse_dominates_mae(pairs in prop::collection::vec((-1e4f64..1e4, -1e4f64..1e4), 1..100)) {
            let (t, p): (Vec<f64>, Vec<f64>) = pairs.into_iter().unzip();
            prop_assert!(rmse(&t, &p).unwrap() >= mae(&t, &p).unwrap() * (1.0 - 1e-12));
        }

        #[test]
        fn permutation_invariant(pairs in prop::collection::vec((0f64..1e4, -1e4f64..1e4), 2..50), rot in 0usize..50) {
            let (t, p): (Vec<f64>, Vec<f64>) = pairs.into_iter().unzip();
            let k = rot % t.len();
            let (mut t2, mut p2) = (t.clone(), p.clone());
            t2.rotate_left(k);
            p2.rotate_left(k);
            for f in [mae, rmse, rmsle] {
                let (a, b) = (f(&t, &p).unwrap(), f(&t2, &p2).unwrap());
                prop_assert!((a - b).abs() <= 1e-9 * a.abs().max(1.0));
            }
        }
    }
}
