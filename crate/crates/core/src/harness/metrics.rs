use crate::error::{Error, Result};
use crate::parallel;
use crate::training::gaussian_nll_values;

fn check_shapes(pred: &[Vec<f64>], target: &[Vec<f64>]) -> Result<()> {
    let same = pred.len() == target.len() && pred.iter().zip(target).all(|(p, t)| p.len() == t.len());
    if !same {
        return Err(Error::Shape {
            op: "rmse",
            lhs: pred.iter().map(Vec::len).collect(),
            rhs: target.iter().map(Vec::len).collect(),
        });
    }
    Ok(())
}

/// Root mean squared error over every grid point of every profile, in μm.
/// Per-profile sums are combined in record order so the result does not
/// depend on the thread count.
pub fn rmse(pred: &[Vec<f64>], target: &[Vec<f64>]) -> Result<f64> {
    check_shapes(pred, target)?;
    let idx: Vec<usize> = (0..pred.len()).collect();
    let sums = parallel::map(&idx, |&i| {
        pred[i].iter().zip(&target[i]).map(|(p, t)| (p - t) * (p - t)).sum::<f64>()
    });
    let n: usize = pred.iter().map(Vec::len).sum();
    if n == 0 {
        return Err(Error::invalid("rmse of an empty set"));
    }
    Ok((sums.iter().sum::<f64>() / n as f64).sqrt())
}

/// Mean Gaussian NLL per grid point over all profiles.
pub fn mean_nll(mean: &[Vec<f64>], variance: &[Vec<f64>], target: &[Vec<f64>]) -> Result<f64> {
    check_shapes(mean, target)?;
    check_shapes(variance, target)?;
    let idx: Vec<usize> = (0..mean.len()).collect();
    let per = parallel::try_map(&idx, |&i| {
        Ok(gaussian_nll_values(&mean[i], &variance[i], &target[i])? * target[i].len() as f64)
    })?;
    let n: usize = target.iter().map(Vec::len).sum();
    if n == 0 {
        return Err(Error::invalid("mean NLL of an empty set"));
    }
    Ok(per.iter().sum::<f64>() / n as f64)
}

#[cfg(test)]
mod tests {
    use std::f64::consts::PI;

    use proptest::prelude::*;

    use super::*;

    // Reference implementations: flatten first, accumulate back to front with
    // compensated summation, and compute the mean before the squared
    // deviations.
    fn kahan_rev(values: impl DoubleEndedIterator<Item = f64>) -> f64 {
        let (mut sum, mut c) = (0.0, 0.0);
        for v in values.rev() {
            let y = v - c;
            let t = sum + y;
            c = (t - sum) - y;
            sum = t;
        }
        sum
    }

    fn rmse_ref(pred: &[Vec<f64>], target: &[Vec<f64>]) -> f64 {
        let p: Vec<f64> = pred.concat();
        let t: Vec<f64> = target.concat();
        let sq: Vec<f64> = p.iter().zip(&t).map(|(a, b)| (a - b).powi(2)).collect();
        (kahan_rev(sq.iter().copied()) / sq.len() as f64).sqrt()
    }

    fn nll_ref(mean: &[Vec<f64>], var: &[Vec<f64>], target: &[Vec<f64>]) -> f64 {
        let m = mean.concat();
        let v = var.concat();
        let t = target.concat();
        let logs = kahan_rev(v.iter().map(|s| (2.0 * PI * s).ln())) / 2.0;
        let quad = kahan_rev(m.iter().zip(&v).zip(&t).map(|((a, s), y)| (y - a).powi(2) / s)) / 2.0;
        (logs + quad) / t.len() as f64
    }

    #[test]
    fn identity_and_offset() {
        let y = vec![vec![1.0, 2.0], vec![3.0, 4.0, 5.0]];
        assert_eq!(rmse(&y, &y).unwrap(), 0.0);
        let shifted: Vec<Vec<f64>> = y.iter().map(|r| r.iter().map(|v| v - 0.25).collect()).collect();
        assert!((rmse(&shifted, &y).unwrap() - 0.25).abs() < 1e-15);
    }

    #[test]
    fn shape_mismatch() {
        assert!(rmse(&[vec![1.0]], &[vec![1.0, 2.0]]).is_err());
        assert!(rmse(&[vec![1.0]], &[]).is_err());
    }

    fn profiles() -> impl Strategy<Value = Vec<(Vec<f64>, Vec<f64>, Vec<f64>)>> {
        prop::collection::vec(
            (1usize..20).prop_flat_map(|g| {
                (
                    prop::collection::vec(-10.0f64..10.0, g),
                    prop::collection::vec(1e-4f64..5.0, g),
                    prop::collection::vec(-10.0f64..10.0, g),
                )
            }),
            1..30,
        )
    }

    proptest! {
        #[test]
        fn rmse_matches_reference(data in profiles()) {
            let p: Vec<Vec<f64>> = data.iter().map(|d| d.0.clone()).collect();
            let t: Vec<Vec<f64>> = data.iter().map(|d| d.2.clone()).collect();
            let a = rmse(&p, &t).unwrap();
            let b = rmse_ref(&p, &t);
            prop_assert!((a - b).abs() <= 1e-12 * (1.0 + b));
        }

        #[test]
        fn nll_matches_reference(data in profiles()) {
            let m: Vec<Vec<f64>> = data.iter().map(|d| d.0.clone()).collect();
            let v: Vec<Vec<f64>> = data.iter().map(|d| d.1.clone()).collect();
            let t: Vec<Vec<f64>> = data.iter().map(|d| d.2.clone()).collect();
            let a = mean_nll(&m, &v, &t).unwrap();
            let b = nll_ref(&m, &v, &t);
            prop_assert!((a - b).abs() <= 1e-10 * (1.0 + b.abs()));
        }
    }
}
