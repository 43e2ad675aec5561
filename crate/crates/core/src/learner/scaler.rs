use serde::{Deserialize, Serialize};

use super::LearnError;
use crate::scalar::Scalar;

/// Per-feature min-max scaling fitted on a training set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct Scaler<T> {
    pub mins: Vec<T>,
    pub maxes: Vec<T>,
}

impl<T: Scalar> Scaler<T> {
    pub fn fit(rows: &[Vec<T>]) -> Result<Self, LearnError> {
        let first = rows.first().ok_or(LearnError::TooFewRows { rows: 0, needed: 1 })?;
        let dim = first.len();
        let mut mins = first.clone();
        let mut maxes = first.clone();
        for row in rows {
            if row.len() != dim {
                return Err(LearnError::DimensionMismatch { expected: dim, got: row.len() });
            }
            for (j, &v) in row.iter().enumerate() {
                if !v.is_finite() {
                    return Err(LearnError::NonFinite(format!("feature {j} holds {v}")));
                }
                mins[j] = mins[j].min(v);
                maxes[j] = maxes[j].max(v);
            }
        }
        Ok(Scaler { mins, maxes })
    }

    pub fn dim(&self) -> usize {
        self.mins.len()
    }

    fn check(&self, x: &[T]) -> Result<(), LearnError> {
        if x.len() != self.dim() {
            return Err(LearnError::DimensionMismatch { expected: self.dim(), got: x.len() });
        }
        Ok(())
    }

    /// Maps the fitted min to 0 and max to 1; constant features map to 0.
    pub fn transform(&self, x: &[T]) -> Result<Vec<T>, LearnError> {
        self.check(x)?;
        Ok(x.iter()
            .zip(self.mins.iter().zip(&self.maxes))
            .map(|(&v, (&lo, &hi))| if hi > lo { (v - lo) / (hi - lo) } else { T::zero() })
            .collect())
    }

    pub fn inverse_transform(&self, x: &[T]) -> Result<Vec<T>, LearnError> {
        self.check(x)?;
        Ok(x.iter().zip(self.mins.iter().zip(&self.maxes)).map(|(&v, (&lo, &hi))| lo + v * (hi - lo)).collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn constant_feature_maps_to_zero() {
        let s = Scaler::fit(&[vec![1.0, 5.0], vec![3.0, 5.0]]).unwrap();
        assert_eq!(s.transform(&[2.0, 5.0]).unwrap(), vec![0.5, 0.0]);
        assert_eq!(s.inverse_transform(&[0.5, 0.0]).unwrap(), vec![2.0, 5.0]);
    }

    #[test]
    fn rejects_bad_input() {
        assert!(Scaler::<f64>::fit(&[]).is_err());
        assert!(Scaler::fit(&[vec![1.0], vec![1.0, 2.0]]).is_err());
        assert!(Scaler::fit(&[vec![f64::INFINITY]]).is_err());
        let s = Scaler::fit(&[vec![1.0, 2.0]]).unwrap();
        assert!(matches!(s.transform(&[1.0]), Err(LearnError::DimensionMismatch { .. })));
    }

    proptest! {
        #[test]
        fn training_rows_land_in_unit_box_and_round_trip(
            rows in proptest::collection::vec(proptest::collection::vec(-1e3f64..1e3, 4), 2..20)
        ) {
            let s = Scaler::fit(&rows).unwrap();
            for row in &rows {
                let t = s.transform(row).unwrap();
                prop_assert!(t.iter().all(|v| (0.0..=1.0).contains(v)));
                let back = s.inverse_transform(&t).unwrap();
                for (j, (a, b)) in back.iter().zip(row).enumerate() {
                    if s.maxes[j] > s.mins[j] {
                        prop_assert!((a - b).abs() < 1e-9);
                    }
                }
            }
        }
    }
}
