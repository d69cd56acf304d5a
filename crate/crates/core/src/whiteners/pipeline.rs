use serde::{Deserialize, Serialize};

use super::rolling::{RollingEwma, RollingSma};
use super::{
    fit_constant, fit_ewma, fit_permutation, fit_sma, whitener_from_covariance, StageKind, StageValue, WhitenerStage,
};
use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::linalg::{check_len, cholesky_dense, covariance_from_whitener, LowerTriangular, Matrix, SymmetricPD};
use crate::objective::FitConfig;
use crate::parallel::map_rows;
use crate::scalar::{gaussian_constant, Scalar};
use crate::solver::{fit_diagonal, fit_joint, fit_regression, FitReport};

/// Unfitted stage configuration, as written in recipes.
#[derive(Clone, Debug, PartialEq, Serialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum StageSpec {
    Constant,
    Diagonal {
        #[serde(default)]
        lambda: f64,
    },
    Sma {
        memory: usize,
        #[serde(default)]
        loading: f64,
    },
    Ewma {
        half_life: f64,
        #[serde(default)]
        loading: f64,
    },
    Permutation {
        order: Vec<usize>,
    },
    Regression(FitConfig),
    /// Regression whitener with the joint mean block.
    Joint(FitConfig),
}

// serde's internally tagged enums buffer their input, which loses numbers
// under serde_json's arbitrary-precision mode, so the tag is dispatched by hand.
impl<'de> Deserialize<'de> for StageSpec {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        use serde::de::Error as _;

        #[derive(Deserialize)]
        #[serde(deny_unknown_fields)]
        struct Empty {}
        #[derive(Deserialize)]
        #[serde(deny_unknown_fields)]
        struct Diagonal {
            #[serde(default)]
            lambda: f64,
        }
        #[derive(Deserialize)]
        #[serde(deny_unknown_fields)]
        struct Sma {
            memory: usize,
            #[serde(default)]
            loading: f64,
        }
        #[derive(Deserialize)]
        #[serde(deny_unknown_fields)]
        struct Ewma {
            half_life: f64,
            #[serde(default)]
            loading: f64,
        }
        #[derive(Deserialize)]
        #[serde(deny_unknown_fields)]
        struct Permutation {
            order: Vec<usize>,
        }

        let mut value = serde_json::Value::deserialize(deserializer)?;
        let map = value
            .as_object_mut()
            .ok_or_else(|| D::Error::custom("stage must be a JSON object"))?;
        let kind = match map.remove("kind") {
            Some(serde_json::Value::String(k)) => k,
            Some(_) => return Err(D::Error::custom("stage `kind` must be a string")),
            None => return Err(D::Error::missing_field("kind")),
        };
        let parse = |v: serde_json::Value| -> std::result::Result<StageSpec, serde_json::Error> {
            Ok(match kind.as_str() {
                "constant" => {
                    serde_json::from_value::<Empty>(v)?;
                    StageSpec::Constant
                }
                "diagonal" => StageSpec::Diagonal {
                    lambda: serde_json::from_value::<Diagonal>(v)?.lambda,
                },
                "sma" => {
                    let s: Sma = serde_json::from_value(v)?;
                    StageSpec::Sma {
                        memory: s.memory,
                        loading: s.loading,
                    }
                }
                "ewma" => {
                    let e: Ewma = serde_json::from_value(v)?;
                    StageSpec::Ewma {
                        half_life: e.half_life,
                        loading: e.loading,
                    }
                }
                "permutation" => StageSpec::Permutation {
                    order: serde_json::from_value::<Permutation>(v)?.order,
                },
                "regression" => StageSpec::Regression(serde_json::from_value(v)?),
                "joint" => StageSpec::Joint(serde_json::from_value(v)?),
                other => {
                    return Err(serde_json::Error::custom(format!(
                        "unknown stage kind `{other}` (expected constant, diagonal, sma, ewma, permutation, regression or joint)"
                    )))
                }
            })
        };
        parse(value).map_err(|e| D::Error::custom(format!("stage `{kind}`: {e}")))
    }
}

impl StageSpec {
    pub fn name(&self) -> &'static str {
        match self {
            StageSpec::Constant => "constant",
            StageSpec::Diagonal { .. } => "diagonal",
            StageSpec::Sma { .. } => "sma",
            StageSpec::Ewma { .. } => "ewma",
            StageSpec::Permutation { .. } => "permutation",
            StageSpec::Regression(_) => "regression",
            StageSpec::Joint(_) => "joint",
        }
    }

    /// Fits the stage on `data` (already whitened by any earlier stages).
    pub fn fit<T: Scalar>(&self, data: &Dataset<T>) -> Result<(WhitenerStage<T>, Option<FitReport>)> {
        Ok(match self {
            StageSpec::Constant => (fit_constant(data)?, None),
            StageSpec::Diagonal { lambda } => {
                let (stage, report) = fit_diagonal(data, *lambda)?;
                (stage, Some(report))
            }
            StageSpec::Sma { memory, loading } => (fit_sma(data, *memory, *loading)?, None),
            StageSpec::Ewma { half_life, loading } => (fit_ewma(data, *half_life, *loading)?, None),
            StageSpec::Permutation { order } => {
                check_len("permutation length", data.n(), order.len())?;
                (fit_permutation(order.clone())?, None)
            }
            StageSpec::Regression(cfg) => {
                let (stage, report) = fit_regression(data, cfg)?;
                (stage, Some(report))
            }
            StageSpec::Joint(cfg) => {
                let (stage, report) = fit_joint(data, cfg)?;
                (stage, Some(report))
            }
        })
    }
}

/// Summary of one fitted stage within [`Pipeline::fit`].
#[derive(Clone, Debug)]
pub struct StageFitInfo {
    pub kind: StageKind,
    /// Training rows available to this stage.
    pub rows: usize,
    pub report: Option<FitReport>,
}

/// Ordered list of stages; the iterated whitener `L₁(x) ⋯ L_K(x)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Pipeline<T> {
    n: usize,
    p: usize,
    stages: Vec<WhitenerStage<T>>,
}

/// Output of [`whiten_dataset`].
#[derive(Clone, Debug)]
pub struct Whitened<T> {
    /// Surviving rows with whitened outcomes `L_Kᵀ ⋯ L₁ᵀ y`.
    pub data: Dataset<T>,
    /// Index of each surviving row in the input dataset.
    pub rows: Vec<usize>,
    /// Rows dropped during rolling-stage warm-up.
    pub dropped: usize,
    /// Per-row log-likelihood.
    pub loglik: Vec<T>,
    /// Composed lower-triangular whitener per row (empty unless requested).
    pub factors: Vec<LowerTriangular<T>>,
    /// `Σ̂(xᵢ)` per row (empty unless requested).
    pub covariances: Vec<SymmetricPD<T>>,
    /// `μ̂(xᵢ)` per row, when some stage predicts a mean.
    pub means: Option<Vec<Vec<T>>>,
}

impl<T: Scalar> Whitened<T> {
    pub fn mean_loglik(&self) -> T {
        self.loglik.iter().copied().sum::<T>() / T::from_usize_lossy(self.loglik.len())
    }
}

impl<T: Scalar> Pipeline<T> {
    pub fn new(n: usize, p: usize) -> Self {
        Self {
            n,
            p,
            stages: Vec::new(),
        }
    }

    pub fn with_stages(n: usize, p: usize, stages: Vec<WhitenerStage<T>>) -> Result<Self> {
        let mut out = Self::new(n, p);
        for s in stages {
            out.push(s)?;
        }
        Ok(out)
    }

    pub fn push(&mut self, stage: WhitenerStage<T>) -> Result<()> {
        stage.validate()?;
        check_len("stage outcome dimension", self.n, stage.dim())?;
        if let Some(p) = stage.feature_dim() {
            check_len("stage feature dimension", self.p, p)?;
        }
        self.stages.push(stage);
        Ok(())
    }

    #[inline]
    pub fn n(&self) -> usize {
        self.n
    }

    #[inline]
    pub fn p(&self) -> usize {
        self.p
    }

    pub fn stages(&self) -> &[WhitenerStage<T>] {
        &self.stages
    }

    pub fn len(&self) -> usize {
        self.stages.len()
    }

    pub fn is_empty(&self) -> bool {
        self.stages.is_empty()
    }

    /// True when no stage needs outcome history.
    pub fn is_stateless(&self) -> bool {
        !self.stages.iter().any(WhitenerStage::is_rolling)
    }

    pub fn has_mean(&self) -> bool {
        self.stages.iter().any(WhitenerStage::has_mean)
    }

    pub fn check_data(&self, data: &Dataset<T>) -> Result<()> {
        check_len("outcome dimension (model vs data)", self.n, data.n())?;
        check_len("feature dimension (model vs data)", self.p, data.p())
    }

    /// Whitens `data`, returning per-row log-likelihoods and, with `detailed`,
    /// composed factors, covariances and predicted means.
    pub fn whiten(&self, data: &Dataset<T>, detailed: bool) -> Result<Whitened<T>> {
        self.check_data(data)?;
        let total = data.len();
        let mut current = data.clone();
        let mut rows: Vec<usize> = (0..total).collect();
        let mut log_det = vec![T::zero(); total];
        let mut values: Vec<Vec<StageValue<T>>> = vec![Vec::new(); if detailed { total } else { 0 }];

        for stage in &self.stages {
            let (kept, stage_values) = stage_values(stage, &current)?;
            if kept.is_empty() {
                return Err(Error::InsufficientHistory {
                    needed: stage.warmup() + 1,
                    available: current.len(),
                });
            }
            let outcomes = map_rows(kept.len(), |r| stage_values[r].apply(current.outcome(kept[r])))?;
            let outcomes = Matrix::from_rows(&outcomes, self.n)?;
            current = current.select_rows(&kept)?.with_outcomes(outcomes)?;
            rows = kept.iter().map(|&i| rows[i]).collect();
            log_det = kept
                .iter()
                .zip(&stage_values)
                .map(|(&i, v)| log_det[i] + v.log_det())
                .collect();
            if detailed {
                let mut next = Vec::with_capacity(kept.len());
                for (&i, v) in kept.iter().zip(stage_values) {
                    let mut chain = std::mem::take(&mut values[i]);
                    chain.push(v);
                    next.push(chain);
                }
                values = next;
            }
        }

        let constant = gaussian_constant::<T>(self.n);
        let half = T::lit(0.5);
        let loglik = (0..current.len())
            .map(|r| {
                let z = current.outcome(r);
                constant + log_det[r] - half * z.iter().map(|&v| v * v).sum::<T>()
            })
            .collect();

        let (factors, covariances, means) = if detailed {
            let has_perm = self.stages.iter().any(|s| s.kind() == StageKind::Permutation);
            let factors = map_rows(values.len(), |r| compose_factor(self.n, &values[r], has_perm))?;
            let covariances = factors.iter().map(covariance_from_whitener).collect();
            let means = if self.has_mean() {
                Some(map_rows(values.len(), |r| {
                    values[r]
                        .iter()
                        .rev()
                        .try_fold(vec![T::zero(); self.n], |m, v| v.unapply(&m))
                })?)
            } else {
                None
            };
            (factors, covariances, means)
        } else {
            (Vec::new(), Vec::new(), None)
        };

        Ok(Whitened {
            data: current,
            dropped: total - rows.len(),
            rows,
            loglik,
            factors,
            covariances,
            means,
        })
    }

    /// Average log-likelihood per sample (nats) over the rows that survive warm-up.
    pub fn score(&self, data: &Dataset<T>) -> Result<T> {
        Ok(self.whiten(data, false)?.mean_loglik())
    }

    /// Composed factor and predicted mean at `x` for pipelines without rolling stages.
    pub fn evaluate_at(&self, x: &[T]) -> Result<(LowerTriangular<T>, Option<Vec<T>>)> {
        check_len("feature vector", self.p, x.len())?;
        if let Some(s) = self.stages.iter().find(|s| s.is_rolling()) {
            return Err(Error::InsufficientHistory {
                needed: s.warmup(),
                available: 0,
            });
        }
        let values = self
            .stages
            .iter()
            .map(|s| s.evaluate(x, None))
            .collect::<Result<Vec<_>>>()?;
        let has_perm = values.iter().any(|v| v.reorder.is_some());
        let factor = compose_factor(self.n, &values, has_perm)?;
        let mean = if self.has_mean() {
            Some(
                values
                    .iter()
                    .rev()
                    .try_fold(vec![T::zero(); self.n], |m, v| v.unapply(&m))?,
            )
        } else {
            None
        };
        Ok((factor, mean))
    }

    /// Fits `specs` in order, each stage on the training data whitened by the
    /// stages before it.
    pub fn fit(specs: &[StageSpec], data: &Dataset<T>) -> Result<(Self, Vec<StageFitInfo>)> {
        let mut pipeline = Self::new(data.n(), data.p());
        let mut infos = Vec::with_capacity(specs.len());
        let mut current = data.clone();
        for (k, spec) in specs.iter().enumerate() {
            let (stage, report) = spec.fit(&current)?;
            log::info!("fitted stage {k} ({}) on {} rows", spec.name(), current.len());
            infos.push(StageFitInfo {
                kind: stage.kind(),
                rows: current.len(),
                report,
            });
            if k + 1 < specs.len() {
                let single = Pipeline::with_stages(data.n(), data.p(), vec![stage.clone()])?;
                let w = single.whiten(&current, false)?;
                current = w.data;
            }
            pipeline.push(stage)?;
        }
        Ok((pipeline, infos))
    }
}

/// Stage values for every row of `data`, with the indices of rows that have one.
fn stage_values<T: Scalar>(stage: &WhitenerStage<T>, data: &Dataset<T>) -> Result<(Vec<usize>, Vec<StageValue<T>>)> {
    let n = data.n();
    let covariances: Vec<(usize, Matrix<T>)> = match stage {
        WhitenerStage::Sma(s) => {
            if !data.is_time_series() {
                return Err(Error::MissingTimestamps("sma"));
            }
            let mut roll = RollingSma::new(n, s.memory);
            let loading = T::lit(s.loading);
            let mut out = Vec::with_capacity(data.len().saturating_sub(s.memory));
            for i in 0..data.len() {
                if roll.is_ready() {
                    out.push((i, roll.covariance(loading)));
                }
                roll.push(data.outcome(i));
            }
            out
        }
        WhitenerStage::Ewma(e) => {
            if !data.is_time_series() {
                return Err(Error::MissingTimestamps("ewma"));
            }
            let mut roll = RollingEwma::new(n, T::lit(e.gamma()));
            let loading = T::lit(e.loading);
            let mut out = Vec::with_capacity(data.len().saturating_sub(e.n));
            for i in 0..data.len() {
                if roll.count() >= e.n {
                    out.push((i, roll.covariance(loading)));
                }
                roll.push(data.outcome(i));
            }
            out
        }
        _ => {
            let values = map_rows(data.len(), |i| stage.evaluate(data.feature(i), None))?;
            return Ok(((0..data.len()).collect(), values));
        }
    };
    let values = map_rows(covariances.len(), |r| {
        let (i, cov) = &covariances[r];
        whitener_from_covariance(cov)
            .map(|factor| StageValue {
                factor,
                reorder: None,
                nu: None,
            })
            .map_err(|e| match e {
                Error::SingularCovariance(msg) => Error::SingularCovariance(format!("row {i}: {msg}")),
                other => other,
            })
    })?;
    Ok((covariances.into_iter().map(|(i, _)| i).collect(), values))
}

/// Lower-triangular whitener equivalent to applying `values` in order.
///
/// Without permutations this is the product `L₁ ⋯ L_K`. With them, the
/// whitening map `W = M_K ⋯ M₁` is not triangular, and the result is
/// `chol(Wᵀ W)`, which has the same covariance and the same determinant.
fn compose_factor<T: Scalar>(n: usize, values: &[StageValue<T>], has_perm: bool) -> Result<LowerTriangular<T>> {
    if !has_perm {
        return values
            .iter()
            .try_fold(LowerTriangular::identity(n), |acc, v| acc.matmul(&v.factor));
    }
    let mut w = Matrix::identity(n);
    for v in values {
        let m = match &v.reorder {
            Some(order) => {
                let mut q = Matrix::zeros(n, n);
                for (j, &k) in order.iter().enumerate() {
                    q[(j, k)] = T::one();
                }
                q
            }
            None => v.factor.to_dense().transpose(),
        };
        w = m.matmul(&w)?;
    }
    let precision = w.transpose().matmul(&w)?;
    cholesky_dense(&precision)
}

/// Whitens `data` through `pipeline`, with composed factors, covariances and means.
pub fn whiten_dataset<T: Scalar>(pipeline: &Pipeline<T>, data: &Dataset<T>) -> Result<Whitened<T>> {
    pipeline.whiten(data, true)
}

/// Average log-likelihood per sample.
pub fn score<T: Scalar>(pipeline: &Pipeline<T>, data: &Dataset<T>) -> Result<T> {
    pipeline.score(data)
}
