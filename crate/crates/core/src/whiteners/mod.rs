//! Whiteners: feature-dependent maps `x ↦ L(x)` whose transpose turns an
//! outcome `y` into approximately standard normal `z = L(x)ᵀ y`.
//!
//! Each [`WhitenerStage`] is one fitted predictor; a [`Pipeline`] applies
//! stages in sequence, which amounts to the composed whitener
//! `L(x) = L₁(x) ⋯ L_K(x)`.

mod fit;
mod pipeline;
pub mod rolling;

use std::fmt;

pub use fit::{fit_constant, fit_ewma, fit_permutation, fit_sma, fuse, fuse_dataset, replicate_horizon};
pub use pipeline::{score, whiten_dataset, Pipeline, StageFitInfo, StageSpec, Whitened};

pub use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::linalg::{check_len, cholesky_dense, LowerTriangular, Matrix};
use crate::objective::RegressionParams;
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum StageKind {
    Constant,
    Diagonal,
    Sma,
    Ewma,
    Permutation,
    Regression,
}

impl StageKind {
    pub fn name(self) -> &'static str {
        match self {
            StageKind::Constant => "constant",
            StageKind::Diagonal => "diagonal",
            StageKind::Sma => "sma",
            StageKind::Ewma => "ewma",
            StageKind::Permutation => "permutation",
            StageKind::Regression => "regression",
        }
    }
}

impl fmt::Display for StageKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Simple moving average of the last `memory` outer products.
#[derive(Clone, Debug, PartialEq)]
pub struct SmaStage {
    pub n: usize,
    pub memory: usize,
    /// Diagonal loading `δ` added to every window (zero disables it).
    pub loading: f64,
}

/// Exponentially weighted moving average with forgetting factor `2^(−1/half_life)`.
#[derive(Clone, Debug, PartialEq)]
pub struct EwmaStage {
    pub n: usize,
    pub half_life: f64,
    pub loading: f64,
}

impl EwmaStage {
    /// Forgetting factor `γ = 2^(−1/T_half)`; an infinite half-life gives `γ = 1`.
    pub fn gamma(&self) -> f64 {
        (-1.0 / self.half_life).exp2()
    }
}

/// One fitted predictor.
#[derive(Clone, Debug, PartialEq)]
pub enum WhitenerStage<T> {
    /// Feature-independent factor `chol(Σ⁻¹)`.
    Constant(LowerTriangular<T>),
    /// `Σ̂(x) = diag(exp(A x + b))`.
    Diagonal {
        a: Matrix<T>,
        b: Vec<T>,
    },
    Sma(SmaStage),
    Ewma(EwmaStage),
    /// Reorders outcome entries: `z_j = y_{order[j]}` (zero-based).
    Permutation(Vec<usize>),
    Regression(RegressionParams<T>),
}

/// Value of a stage at one point.
#[derive(Clone, Debug, PartialEq)]
pub struct StageValue<T> {
    /// `L(x)`; the identity for a permutation stage.
    pub factor: LowerTriangular<T>,
    /// Set for permutation stages, which whiten by reordering.
    pub reorder: Option<Vec<usize>>,
    /// Whitened mean `ν(x)` of a joint regression stage.
    pub nu: Option<Vec<T>>,
}

impl<T: Scalar> StageValue<T> {
    fn triangular(factor: LowerTriangular<T>) -> Self {
        Self {
            factor,
            reorder: None,
            nu: None,
        }
    }

    /// `Lᵀ z − ν`, or the reordering of `z`.
    pub fn apply(&self, z: &[T]) -> Result<Vec<T>> {
        if let Some(order) = &self.reorder {
            check_len("outcome vector", order.len(), z.len())?;
            return Ok(order.iter().map(|&k| z[k]).collect());
        }
        let mut out = self.factor.transpose_mul(z)?;
        if let Some(nu) = &self.nu {
            out.iter_mut().zip(nu).for_each(|(o, &v)| *o -= v);
        }
        Ok(out)
    }

    /// Inverse of [`StageValue::apply`].
    pub fn unapply(&self, z: &[T]) -> Result<Vec<T>> {
        if let Some(order) = &self.reorder {
            let mut out = vec![T::zero(); z.len()];
            for (j, &k) in order.iter().enumerate() {
                out[k] = z[j];
            }
            return Ok(out);
        }
        let shifted: Vec<T> = match &self.nu {
            Some(nu) => z.iter().zip(nu).map(|(&a, &b)| a + b).collect(),
            None => z.to_vec(),
        };
        self.factor.solve_transpose(&shifted)
    }

    /// Contribution `Σ_j log L_jj` to the log-likelihood (zero for a permutation).
    pub fn log_det(&self) -> T {
        if self.reorder.is_some() {
            T::zero()
        } else {
            self.factor.log_det()
        }
    }
}

impl<T: Scalar> WhitenerStage<T> {
    pub fn kind(&self) -> StageKind {
        match self {
            WhitenerStage::Constant(_) => StageKind::Constant,
            WhitenerStage::Diagonal { .. } => StageKind::Diagonal,
            WhitenerStage::Sma(_) => StageKind::Sma,
            WhitenerStage::Ewma(_) => StageKind::Ewma,
            WhitenerStage::Permutation(_) => StageKind::Permutation,
            WhitenerStage::Regression(_) => StageKind::Regression,
        }
    }

    /// Outcome dimension `n`.
    pub fn dim(&self) -> usize {
        match self {
            WhitenerStage::Constant(l) => l.dim(),
            WhitenerStage::Diagonal { b, .. } => b.len(),
            WhitenerStage::Sma(s) => s.n,
            WhitenerStage::Ewma(e) => e.n,
            WhitenerStage::Permutation(order) => order.len(),
            WhitenerStage::Regression(p) => p.n(),
        }
    }

    /// Feature dimension, for stages that read features.
    pub fn feature_dim(&self) -> Option<usize> {
        match self {
            WhitenerStage::Diagonal { a, .. } => Some(a.cols()),
            WhitenerStage::Regression(p) => Some(p.p()),
            _ => None,
        }
    }

    /// Number of leading rows a rolling stage consumes before its first forecast.
    pub fn warmup(&self) -> usize {
        match self {
            WhitenerStage::Sma(s) => s.memory,
            WhitenerStage::Ewma(e) => e.n,
            _ => 0,
        }
    }

    pub fn is_rolling(&self) -> bool {
        matches!(self, WhitenerStage::Sma(_) | WhitenerStage::Ewma(_))
    }

    pub fn has_mean(&self) -> bool {
        matches!(self, WhitenerStage::Regression(p) if p.has_mean())
    }

    /// Checks the stage's own invariants.
    pub fn validate(&self) -> Result<()> {
        match self {
            WhitenerStage::Constant(_) => Ok(()),
            WhitenerStage::Diagonal { a, b } => check_len("rows of diagonal A", b.len(), a.rows()),
            WhitenerStage::Sma(s) => {
                if s.memory < s.n {
                    return Err(Error::InvalidMemory {
                        memory: s.memory,
                        n: s.n,
                    });
                }
                check_loading(s.loading)
            }
            WhitenerStage::Ewma(e) => {
                if !(e.half_life > 0.0) {
                    return Err(Error::InvalidHalfLife(e.half_life));
                }
                check_loading(e.loading)
            }
            WhitenerStage::Permutation(order) => validate_permutation(order),
            WhitenerStage::Regression(p) => p.check_shapes(),
        }
    }

    /// Evaluates the stage at `x`. Rolling stages read `history` (oldest
    /// first, most recent last) and fail with [`Error::InsufficientHistory`]
    /// before warm-up.
    pub fn evaluate(&self, x: &[T], history: Option<&[Vec<T>]>) -> Result<StageValue<T>> {
        if let Some(p) = self.feature_dim() {
            check_len("feature vector", p, x.len())?;
        }
        match self {
            WhitenerStage::Constant(l) => Ok(StageValue::triangular(l.clone())),
            WhitenerStage::Diagonal { a, b } => {
                let half = T::lit(0.5);
                let diag = a
                    .row_iter()
                    .zip(b)
                    .map(|(row, &bj)| {
                        let s = row.iter().zip(x).fold(bj, |s, (&av, &xv)| s + av * xv);
                        (-half * s).exp()
                    })
                    .collect();
                Ok(StageValue::triangular(LowerTriangular::from_diagonal(diag)?))
            }
            WhitenerStage::Sma(s) => {
                let hist = history.unwrap_or(&[]);
                if hist.len() < s.memory {
                    return Err(Error::InsufficientHistory {
                        needed: s.memory,
                        available: hist.len(),
                    });
                }
                let cov = rolling::sma_direct(hist, s.memory, T::lit(s.loading));
                Ok(StageValue::triangular(whitener_from_covariance(&cov)?))
            }
            WhitenerStage::Ewma(e) => {
                let hist = history.unwrap_or(&[]);
                if hist.len() < e.n {
                    return Err(Error::InsufficientHistory {
                        needed: e.n,
                        available: hist.len(),
                    });
                }
                let cov = rolling::ewma_direct(hist, T::lit(e.gamma()), T::lit(e.loading));
                Ok(StageValue::triangular(whitener_from_covariance(&cov)?))
            }
            WhitenerStage::Permutation(order) => Ok(StageValue {
                factor: LowerTriangular::identity(order.len()),
                reorder: Some(order.clone()),
                nu: None,
            }),
            WhitenerStage::Regression(p) => Ok(StageValue {
                factor: p.whitener_at(x)?,
                reorder: None,
                nu: p.nu_at(x),
            }),
        }
    }
}

fn check_loading(loading: f64) -> Result<()> {
    if loading >= 0.0 && loading.is_finite() {
        Ok(())
    } else {
        Err(Error::InvalidConfig(format!(
            "diagonal loading must be non-negative, got {loading}"
        )))
    }
}

pub(crate) fn validate_permutation(order: &[usize]) -> Result<()> {
    let mut seen = vec![false; order.len()];
    for &k in order {
        if k >= order.len() {
            return Err(Error::InvalidPermutation(format!(
                "index {k} out of range for dimension {}",
                order.len()
            )));
        }
        if std::mem::replace(&mut seen[k], true) {
            return Err(Error::InvalidPermutation(format!("index {k} repeated")));
        }
    }
    if order.is_empty() {
        return Err(Error::InvalidPermutation("empty permutation".into()));
    }
    Ok(())
}

/// `chol(Σ⁻¹)` for a rolling forecast, reporting singular windows as such.
pub(crate) fn whitener_from_covariance<T: Scalar>(cov: &Matrix<T>) -> Result<LowerTriangular<T>> {
    let g = cholesky_dense(cov).map_err(|e| Error::SingularCovariance(e.to_string()))?;
    // Σ = G Gᵀ  ⇒  Σ⁻¹ = G⁻ᵀ G⁻¹; factor it again for the lower-triangular whitener.
    let sigma = crate::linalg::covariance_from_whitener(&g);
    cholesky_dense(sigma.entries()).map_err(|e| Error::SingularCovariance(e.to_string()))
}
