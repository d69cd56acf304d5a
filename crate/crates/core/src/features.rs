//! Column transforms that map raw features into the box `[-1, 1]`.
//!
//! Transforms are fitted on a training column and then applied to any data;
//! every output is clipped to the box, so unseen values never leave it.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TransformKind {
    Clip,
    Quantile,
    MinMax,
}

/// A fitted column transform.
#[derive(Clone, Debug, PartialEq, Serialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Transform {
    /// `max(−1, min(1, v))`.
    Clip,
    /// Piecewise-linear empirical CDF: `knots` are the distinct training
    /// values in increasing order and `levels` their mid-rank quantiles mapped
    /// to `2q − 1`. Values below the first knot map to −1 and values above the
    /// last knot map to 1.
    Quantile { knots: Vec<f64>, levels: Vec<f64> },
    /// `2 (v − min) / (max − min) − 1`, clipped.
    MinMax { min: f64, max: f64 },
}

#[inline]
fn clip(v: f64) -> f64 {
    v.clamp(-1.0, 1.0)
}

/// Fits a transform of the given kind on a training column. `name` is only
/// used in error messages.
pub fn fit_transform(kind: TransformKind, column: &[f64], name: &str) -> Result<Transform> {
    if column.is_empty() {
        return Err(Error::InvalidConfig(format!(
            "cannot fit a transform on empty column `{name}`"
        )));
    }
    if let Some(v) = column.iter().find(|v| !v.is_finite()) {
        return Err(Error::InvalidConfig(format!(
            "column `{name}` contains non-finite value {v}"
        )));
    }
    Ok(match kind {
        TransformKind::Clip => Transform::Clip,
        TransformKind::MinMax => {
            let min = column.iter().copied().fold(f64::INFINITY, f64::min);
            let max = column.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            if !(max > min) {
                return Err(Error::DegenerateColumn(name.to_string()));
            }
            Transform::MinMax { min, max }
        }
        TransformKind::Quantile => {
            let mut sorted = column.to_vec();
            sorted.sort_by(f64::total_cmp);
            let count = sorted.len() as f64;
            let mut knots = Vec::new();
            let mut levels = Vec::new();
            let mut start = 0;
            while start < sorted.len() {
                let mut end = start + 1;
                while end < sorted.len() && sorted[end] == sorted[start] {
                    end += 1;
                }
                // Tied values share the average of ranks start+1..=end.
                let rank = (start + end + 1) as f64 / 2.0;
                let q = (rank - 0.5) / count;
                knots.push(sorted[start]);
                levels.push(2.0 * q - 1.0);
                start = end;
            }
            Transform::Quantile { knots, levels }
        }
    })
}

impl Transform {
    pub fn kind(&self) -> TransformKind {
        match self {
            Transform::Clip => TransformKind::Clip,
            Transform::Quantile { .. } => TransformKind::Quantile,
            Transform::MinMax { .. } => TransformKind::MinMax,
        }
    }

    pub fn apply_value(&self, v: f64) -> f64 {
        match self {
            Transform::Clip => clip(v),
            Transform::MinMax { min, max } => clip(2.0 * (v - min) / (max - min) - 1.0),
            Transform::Quantile { knots, levels } => {
                let last = knots.len() - 1;
                if v < knots[0] {
                    return -1.0;
                }
                if v > knots[last] {
                    return 1.0;
                }
                // First knot ≥ v.
                let hi = knots.partition_point(|&k| k < v);
                if knots[hi] == v {
                    return levels[hi];
                }
                let lo = hi - 1;
                let t = (v - knots[lo]) / (knots[hi] - knots[lo]);
                clip(levels[lo] + t * (levels[hi] - levels[lo]))
            }
        }
    }

    pub fn apply(&self, column: &[f64]) -> Vec<f64> {
        column.iter().map(|&v| self.apply_value(v)).collect()
    }

    fn validate(&self) -> Result<()> {
        match self {
            Transform::Clip => Ok(()),
            Transform::MinMax { min, max } => {
                if min.is_finite() && max.is_finite() && max > min {
                    Ok(())
                } else {
                    Err(Error::Schema(format!(
                        "min-max transform needs finite min < max, got [{min}, {max}]"
                    )))
                }
            }
            Transform::Quantile { knots, levels } => {
                if knots.is_empty() || knots.len() != levels.len() {
                    return Err(Error::Schema(
                        "quantile transform needs equally many knots and levels".into(),
                    ));
                }
                let increasing = |v: &[f64]| v.windows(2).all(|w| w[0] < w[1]);
                if !increasing(knots) || !increasing(levels) || levels.iter().any(|l| !(l.abs() <= 1.0)) {
                    return Err(Error::Schema(
                        "quantile knots and levels must increase and levels lie in [-1, 1]".into(),
                    ));
                }
                Ok(())
            }
        }
    }
}

// Parsed by hand so that numbers survive serde_json's arbitrary-precision mode
// (internally tagged enums buffer their input).
impl<'de> Deserialize<'de> for Transform {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        use serde::de::Error as _;

        #[derive(Deserialize)]
        #[serde(deny_unknown_fields)]
        struct Raw {
            kind: TransformKind,
            knots: Option<Vec<f64>>,
            levels: Option<Vec<f64>>,
            min: Option<f64>,
            max: Option<f64>,
        }
        let raw = Raw::deserialize(deserializer)?;
        let out = match raw.kind {
            TransformKind::Clip => Transform::Clip,
            TransformKind::MinMax => Transform::MinMax {
                min: raw.min.ok_or_else(|| D::Error::missing_field("min"))?,
                max: raw.max.ok_or_else(|| D::Error::missing_field("max"))?,
            },
            TransformKind::Quantile => Transform::Quantile {
                knots: raw.knots.ok_or_else(|| D::Error::missing_field("knots"))?,
                levels: raw.levels.ok_or_else(|| D::Error::missing_field("levels"))?,
            },
        };
        out.validate().map_err(D::Error::custom)?;
        Ok(out)
    }
}
