//! Error metrics: mean absolute percentage error over parameters, and
//! absolute / mean absolute trajectory errors.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lindblad::Trajectory;
use crate::scalar::Real;

/// MAPE as a fraction (0.01 = 1%). Entries whose reference value is exactly
/// zero are excluded from the denominator count; returns the value and how
/// many entries were excluded, or `None` if every entry was excluded.
pub fn mape_with_excluded<T: Real>(exact: &[T], predicted: &[T]) -> (Option<T>, usize) {
    assert_eq!(exact.len(), predicted.len(), "mape needs equal lengths");
    let mut sum = T::zero();
    let mut used = 0usize;
    for (&e, &p) in exact.iter().zip(predicted) {
        if e == T::zero() {
            continue;
        }
        sum += ((p - e) / e).abs();
        used += 1;
    }
    if used == 0 {
        (None, exact.len())
    } else {
        (Some(sum / T::from_f64(used as f64)), exact.len() - used)
    }
}

/// MAPE that errors out when every reference entry is zero.
pub fn mape<T: Real>(exact: &[T], predicted: &[T]) -> Result<T> {
    match mape_with_excluded(exact, predicted) {
        (Some(v), _) => Ok(v),
        (None, _) => Err(Error::UndefinedMetric),
    }
}

/// MAPE over all entries of two trajectories on the same grid.
pub fn trajectory_mape<T: Real>(exact: &Trajectory<T>, predicted: &Trajectory<T>) -> Result<T> {
    check_grids(exact, predicted)?;
    mape(exact.values(), predicted.values())
}

/// Per-time absolute errors and their time averages, per observable.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct MetricSet {
    /// `ae[obs][k] = |exp - model|` at time index `k`.
    pub ae: Vec<Vec<f64>>,
    /// Mean of each AE row.
    pub mae: Vec<f64>,
}

fn check_grids<T: Real>(a: &Trajectory<T>, b: &Trajectory<T>) -> Result<()> {
    if a.n_obs() != b.n_obs() || a.n_times() != b.n_times() {
        return Err(Error::DimensionMismatch(format!(
            "trajectory shapes differ: {}x{} vs {}x{}",
            a.n_obs(),
            a.n_times(),
            b.n_obs(),
            b.n_times()
        )));
    }
    for (x, y) in a.times().iter().zip(b.times()) {
        let scale = x.abs().max(T::one());
        if (*x - *y).abs() > scale * T::from_f64(1e-9) {
            return Err(Error::DimensionMismatch(format!(
                "time grids differ: {} vs {}",
                x.to_f64(),
                y.to_f64()
            )));
        }
    }
    Ok(())
}

pub fn ae_mae<T: Real>(exp: &Trajectory<T>, model: &Trajectory<T>) -> Result<MetricSet> {
    check_grids(exp, model)?;
    let ae: Vec<Vec<f64>> = (0..exp.n_obs())
        .map(|a| {
            exp.row(a)
                .iter()
                .zip(model.row(a))
                .map(|(&x, &y)| (x - y).abs().to_f64())
                .collect()
        })
        .collect();
    let mae = ae
        .iter()
        .map(|row| row.iter().sum::<f64>() / row.len() as f64)
        .collect();
    Ok(MetricSet { ae, mae })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mape_basic_cases() {
        assert_eq!(mape(&[2.0, -1.5], &[2.0, -1.5]).unwrap(), 0.0);
        assert_eq!(mape(&[2.0], &[1.0]).unwrap(), 0.5);
        assert!(matches!(mape::<f64>(&[0.0, 0.0], &[1.0, 2.0]), Err(Error::UndefinedMetric)));
        let (v, excluded) = mape_with_excluded(&[2.0, 0.0], &[1.0, 5.0]);
        assert_eq!(v.unwrap(), 0.5);
        assert_eq!(excluded, 1);
    }

    #[test]
    fn ae_mae_cases() {
        let times = vec![0.0, 0.5, 1.0];
        let a = Trajectory::new(times.clone(), vec![0.1; 9], 3).unwrap();
        let m = ae_mae(&a, &a).unwrap();
        assert!(m.ae.iter().flatten().all(|&x| x == 0.0));
        assert!(m.mae.iter().all(|&x| x == 0.0));

        // Constant offset of 0.1 on observable 1.
        let mut values = vec![0.1; 9];
        for k in 0..3 {
            values[3 + k] += 0.1;
        }
        let b = Trajectory::new(times, values, 3).unwrap();
        let m = ae_mae(&a, &b).unwrap();
        assert!((m.mae[1] - 0.1).abs() < 1e-15);
        assert_eq!(m.mae[0], 0.0);
        assert_eq!(m.mae[2], 0.0);
    }

    #[test]
    fn ae_mae_rejects_grid_mismatch() {
        let a = Trajectory::new(vec![0.0, 1.0], vec![0.0; 6], 3).unwrap();
        let b = Trajectory::new(vec![0.0, 2.0], vec![0.0; 6], 3).unwrap();
        assert!(ae_mae(&a, &b).is_err());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            /// MAPE over a concatenated vector is the count-weighted
            /// combination of the group MAPEs.
            #[test]
            fn grouping_consistency(
                exact_a in proptest::collection::vec(0.1f64..5.0, 1..8),
                exact_b in proptest::collection::vec(0.1f64..5.0, 1..8),
                noise in proptest::collection::vec(-0.5f64..0.5, 16),
            ) {
                let pred_a: Vec<f64> = exact_a.iter().zip(&noise).map(|(e, n)| e + n).collect();
                let pred_b: Vec<f64> =
                    exact_b.iter().zip(noise.iter().rev()).map(|(e, n)| e + n).collect();
                let m_a = mape(&exact_a, &pred_a).unwrap();
                let m_b = mape(&exact_b, &pred_b).unwrap();
                let mut exact = exact_a.clone();
                exact.extend_from_slice(&exact_b);
                let mut pred = pred_a.clone();
                pred.extend_from_slice(&pred_b);
                let m_all = mape(&exact, &pred).unwrap();
                let (na, nb) = (exact_a.len() as f64, exact_b.len() as f64);
                let combined = (na * m_a + nb * m_b) / (na + nb);
                prop_assert!((m_all - combined).abs() < 1e-12);
            }
        }
    }
}
