use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::scalar::Scalar;

/// Aligned features (`N x p`, every entry in `[-1, 1]`) and outcomes (`N x n`),
/// with an optional strictly increasing time index.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset<T> {
    features: Matrix<T>,
    outcomes: Matrix<T>,
    timestamps: Option<Vec<i64>>,
}

impl<T: Scalar> Dataset<T> {
    pub fn new(features: Matrix<T>, outcomes: Matrix<T>, timestamps: Option<Vec<i64>>) -> Result<Self> {
        if features.rows() != outcomes.rows() {
            return Err(Error::DimensionMismatch {
                what: "dataset rows (features vs outcomes)",
                expected: outcomes.rows(),
                found: features.rows(),
            });
        }
        if outcomes.rows() == 0 {
            return Err(Error::InvalidConfig("dataset must have at least one row".into()));
        }
        if outcomes.cols() == 0 {
            return Err(Error::InvalidConfig("dataset must have at least one outcome".into()));
        }
        for i in 0..features.rows() {
            for (j, &v) in features.row(i).iter().enumerate() {
                if !(v.abs() <= T::one()) {
                    return Err(Error::FeatureOutOfBox {
                        row: i,
                        col: j,
                        value: v.as_f64(),
                    });
                }
            }
            if outcomes.row(i).iter().any(|v| !v.is_finite()) {
                return Err(Error::Parse {
                    row: i,
                    column: "outcome".into(),
                    message: "non-finite outcome".into(),
                });
            }
        }
        if let Some(ts) = &timestamps {
            if ts.len() != outcomes.rows() {
                return Err(Error::DimensionMismatch {
                    what: "timestamps",
                    expected: outcomes.rows(),
                    found: ts.len(),
                });
            }
            if let Some(w) = ts.windows(2).position(|w| w[1] <= w[0]) {
                return Err(Error::Parse {
                    row: w + 1,
                    column: "index".into(),
                    message: "time index must be strictly increasing".into(),
                });
            }
        }
        Ok(Self {
            features,
            outcomes,
            timestamps,
        })
    }

    /// Dataset without features (`p = 0`).
    pub fn from_outcomes(outcomes: Matrix<T>) -> Result<Self> {
        let features = Matrix::zeros(outcomes.rows(), 0);
        Self::new(features, outcomes, None)
    }

    /// Attaches the index `0, 1, ..., N-1`, marking the rows as a time series.
    pub fn with_row_index(mut self) -> Self {
        self.timestamps = Some((0..self.len() as i64).collect());
        self
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.outcomes.rows()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Outcome dimension `n`.
    #[inline]
    pub fn n(&self) -> usize {
        self.outcomes.cols()
    }

    /// Feature dimension `p`.
    #[inline]
    pub fn p(&self) -> usize {
        self.features.cols()
    }

    #[inline]
    pub fn feature(&self, i: usize) -> &[T] {
        self.features.row(i)
    }

    #[inline]
    pub fn outcome(&self, i: usize) -> &[T] {
        self.outcomes.row(i)
    }

    pub fn features(&self) -> &Matrix<T> {
        &self.features
    }

    pub fn outcomes(&self) -> &Matrix<T> {
        &self.outcomes
    }

    pub fn timestamps(&self) -> Option<&[i64]> {
        self.timestamps.as_deref()
    }

    pub fn is_time_series(&self) -> bool {
        self.timestamps.is_some()
    }

    /// Same features and index, new outcomes (row count must match).
    pub fn with_outcomes(&self, outcomes: Matrix<T>) -> Result<Self> {
        Self::new(self.features.clone(), outcomes, self.timestamps.clone())
    }

    /// Keeps the given rows, in the given order. The index is kept only if the
    /// selection is strictly increasing.
    pub fn select_rows(&self, rows: &[usize]) -> Result<Self> {
        let pick = |m: &Matrix<T>| {
            let mut data = Vec::with_capacity(rows.len() * m.cols());
            for &r in rows {
                data.extend_from_slice(m.row(r));
            }
            Matrix::from_vec(rows.len(), m.cols(), data)
        };
        let increasing = rows.windows(2).all(|w| w[0] < w[1]);
        let ts = match &self.timestamps {
            Some(ts) if increasing => Some(rows.iter().map(|&r| ts[r]).collect()),
            _ => None,
        };
        Self::new(pick(&self.features)?, pick(&self.outcomes)?, ts)
    }

    /// Rows `from..`.
    pub fn tail(&self, from: usize) -> Result<Self> {
        let rows: Vec<usize> = (from..self.len()).collect();
        self.select_rows(&rows)
    }

    pub fn cast<U: Scalar>(&self) -> Dataset<U> {
        let conv = |v: T| U::lit(v.as_f64());
        Dataset {
            features: self.features.map(conv),
            outcomes: self.outcomes.map(conv),
            timestamps: self.timestamps.clone(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_features_outside_box() {
        let f = Matrix::from_rows(&[vec![0.5], vec![1.5]], 1).unwrap();
        let y = Matrix::from_rows(&[vec![1.0], vec![2.0]], 1).unwrap();
        assert!(matches!(
            Dataset::<f64>::new(f, y, None),
            Err(Error::FeatureOutOfBox { row: 1, col: 0, .. })
        ));
    }

    #[test]
    fn rejects_row_mismatch_and_bad_index() {
        let f = Matrix::<f64>::zeros(3, 1);
        let y = Matrix::<f64>::zeros(2, 1);
        assert!(Dataset::new(f, y, None).is_err());
        let f = Matrix::<f64>::zeros(2, 1);
        let y = Matrix::<f64>::zeros(2, 1);
        assert!(Dataset::new(f, y, Some(vec![3, 3])).is_err());
    }

    #[test]
    fn select_rows_keeps_index_only_when_increasing() {
        let y = Matrix::from_rows(&[vec![1.0], vec![2.0], vec![3.0]], 1).unwrap();
        let d = Dataset::<f64>::from_outcomes(y).unwrap().with_row_index();
        assert_eq!(d.select_rows(&[0, 2]).unwrap().timestamps(), Some(&[0, 2][..]));
        assert!(d.select_rows(&[2, 0]).unwrap().timestamps().is_none());
        assert_eq!(d.tail(1).unwrap().outcome(0), &[2.0]);
    }
}
