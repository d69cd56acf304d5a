use std::collections::HashMap;

use super::{validate_permutation, EwmaStage, Pipeline, SmaStage, WhitenerStage};
use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::linalg::{cholesky_dense, covariance_from_whitener, Matrix, SymmetricPD};
use crate::parallel::fold_rows;
use crate::scalar::Scalar;

/// Constant whitener `chol(Σ̂⁻¹)` with `Σ̂ = (1/N) Σ yᵢ yᵢᵀ` (no mean removal).
pub fn fit_constant<T: Scalar>(data: &Dataset<T>) -> Result<WhitenerStage<T>> {
    let n = data.n();
    if data.len() < n {
        return Err(Error::SingularCovariance(format!(
            "{} samples cannot determine a {n}x{n} covariance",
            data.len()
        )));
    }
    let sum = fold_rows(
        data.len(),
        || Matrix::<T>::zeros(n, n),
        |acc, i| {
            let y = data.outcome(i);
            for r in 0..n {
                for c in 0..=r {
                    acc[(r, c)] += y[r] * y[c];
                }
            }
            Ok(())
        },
        |acc, part| {
            acc.as_mut_slice()
                .iter_mut()
                .zip(part.as_slice())
                .for_each(|(a, &b)| *a += b)
        },
    )?;
    let inv_n = T::one() / T::from_usize_lossy(data.len());
    let mut sigma = Matrix::zeros(n, n);
    for r in 0..n {
        for c in 0..=r {
            let v = sum[(r, c)] * inv_n;
            sigma[(r, c)] = v;
            sigma[(c, r)] = v;
        }
    }
    let factor = super::whitener_from_covariance(&sigma)?;
    Ok(WhitenerStage::Constant(factor))
}

/// SMA stage with the given memory; rolling evaluation happens at whitening time.
pub fn fit_sma<T: Scalar>(data: &Dataset<T>, memory: usize, loading: f64) -> Result<WhitenerStage<T>> {
    if !data.is_time_series() {
        return Err(Error::MissingTimestamps("sma"));
    }
    let stage = WhitenerStage::Sma(SmaStage {
        n: data.n(),
        memory,
        loading,
    });
    stage.validate()?;
    Ok(stage)
}

pub fn fit_ewma<T: Scalar>(data: &Dataset<T>, half_life: f64, loading: f64) -> Result<WhitenerStage<T>> {
    if !data.is_time_series() {
        return Err(Error::MissingTimestamps("ewma"));
    }
    let stage = WhitenerStage::Ewma(EwmaStage {
        n: data.n(),
        half_life,
        loading,
    });
    stage.validate()?;
    Ok(stage)
}

/// Permutation stage; `order[j]` is the input entry placed at position `j`.
pub fn fit_permutation<T: Scalar>(order: Vec<usize>) -> Result<WhitenerStage<T>> {
    validate_permutation(&order)?;
    Ok(WhitenerStage::Permutation(order))
}

fn check_same_shape<T: Scalar>(pipelines: &[Pipeline<T>]) -> Result<()> {
    let first = pipelines
        .first()
        .ok_or_else(|| Error::InvalidConfig("fusing needs at least one pipeline".into()))?;
    for p in &pipelines[1..] {
        if p.n() != first.n() {
            return Err(Error::DimensionMismatch {
                what: "outcome dimension of fused pipelines",
                expected: first.n(),
                found: p.n(),
            });
        }
        if p.p() != first.p() {
            return Err(Error::DimensionMismatch {
                what: "feature dimension of fused pipelines",
                expected: first.p(),
                found: p.p(),
            });
        }
    }
    Ok(())
}

fn fuse_precisions<T: Scalar>(precisions: &[Matrix<T>]) -> Result<SymmetricPD<T>> {
    let n = precisions[0].rows();
    let k = T::from_usize_lossy(precisions.len());
    let mut avg = Matrix::zeros(n, n);
    for p in precisions {
        avg.as_mut_slice()
            .iter_mut()
            .zip(p.as_slice())
            .for_each(|(a, &b)| *a += b);
    }
    avg.as_mut_slice().iter_mut().for_each(|v| *v /= k);
    let g = cholesky_dense(&avg)?;
    Ok(covariance_from_whitener(&g))
}

/// `Σ̂(x) = ((1/K) Σₖ Σ̂ₖ(x)⁻¹)⁻¹` for pipelines without rolling stages.
pub fn fuse<T: Scalar>(pipelines: &[Pipeline<T>], x: &[T]) -> Result<SymmetricPD<T>> {
    check_same_shape(pipelines)?;
    let precisions = pipelines
        .iter()
        .map(|p| Ok(p.evaluate_at(x)?.0.precision()))
        .collect::<Result<Vec<_>>>()?;
    fuse_precisions(&precisions)
}

/// Fused covariance for every row of `data` that survives warm-up in all
/// pipelines. Returns the surviving row indices alongside the covariances.
pub fn fuse_dataset<T: Scalar>(
    pipelines: &[Pipeline<T>],
    data: &Dataset<T>,
) -> Result<(Vec<usize>, Vec<SymmetricPD<T>>)> {
    check_same_shape(pipelines)?;
    let whitened = pipelines
        .iter()
        .map(|p| p.whiten(data, true))
        .collect::<Result<Vec<_>>>()?;
    let lookups: Vec<HashMap<usize, usize>> = whitened
        .iter()
        .map(|w| w.rows.iter().enumerate().map(|(pos, &r)| (r, pos)).collect())
        .collect();
    let mut rows = Vec::new();
    let mut out = Vec::new();
    for &r in &whitened[0].rows {
        let Some(positions) = lookups.iter().map(|l| l.get(&r).copied()).collect::<Option<Vec<_>>>() else {
            continue;
        };
        let precisions: Vec<Matrix<T>> = whitened
            .iter()
            .zip(&positions)
            .map(|(w, &pos)| w.factors[pos].precision())
            .collect();
        rows.push(r);
        out.push(fuse_precisions(&precisions)?);
    }
    Ok((rows, out))
}

/// Replicates each record over the next `horizon` outcomes:
/// `(xᵢ, yᵢ), (xᵢ, yᵢ₊₁), …, (xᵢ, yᵢ₊H₋₁)`. Records without `H` future
/// outcomes are dropped. The result carries no time index.
pub fn replicate_horizon<T: Scalar>(data: &Dataset<T>, horizon: usize) -> Result<Dataset<T>> {
    if horizon == 0 {
        return Err(Error::InvalidConfig("horizon must be at least 1".into()));
    }
    if horizon == 1 {
        return Ok(data.clone());
    }
    if data.len() < horizon {
        return Err(Error::InsufficientHistory {
            needed: horizon,
            available: data.len(),
        });
    }
    let records = data.len() - horizon + 1;
    let mut feats = Vec::with_capacity(records * horizon * data.p());
    let mut outs = Vec::with_capacity(records * horizon * data.n());
    for i in 0..records {
        for h in 0..horizon {
            feats.extend_from_slice(data.feature(i));
            outs.extend_from_slice(data.outcome(i + h));
        }
    }
    Dataset::new(
        Matrix::from_vec(records * horizon, data.p(), feats)?,
        Matrix::from_vec(records * horizon, data.n(), outs)?,
        None,
    )
}
