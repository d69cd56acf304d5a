//! Feature-dependent Gaussian covariance prediction with whiteners.
//!
//! A whitener maps features `x` to a lower-triangular `L(x)` with positive
//! diagonal; the predicted covariance is `Σ̂(x) = (L(x) L(x)ᵀ)⁻¹`. Whiteners
//! compose by iteration, and the affine (regression) whitener is fitted by
//! maximizing a concave log-likelihood with a bounded L-BFGS solver.

// NaN-rejecting `!(a > b)` checks and indexed triangular loops are deliberate.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod dataio;
pub mod dataset;
pub mod error;
pub mod features;
pub mod linalg;
pub mod objective;
mod parallel;
pub mod scalar;
pub mod solver;
pub mod whiteners;

pub use dataset::Dataset;
pub use error::{Error, Result};
pub use scalar::Scalar;

pub type MatrixF64 = linalg::Matrix<f64>;
pub type MatrixF32 = linalg::Matrix<f32>;
pub type LowerTriangularF64 = linalg::LowerTriangular<f64>;
pub type LowerTriangularF32 = linalg::LowerTriangular<f32>;
pub type SymmetricPDF64 = linalg::SymmetricPD<f64>;
pub type SymmetricPDF32 = linalg::SymmetricPD<f32>;
pub type DatasetF64 = Dataset<f64>;
pub type DatasetF32 = Dataset<f32>;
pub type RegressionParamsF64 = objective::RegressionParams<f64>;
pub type PipelineF64 = whiteners::Pipeline<f64>;
pub type PipelineF32 = whiteners::Pipeline<f32>;
pub type WhitenerStageF64 = whiteners::WhitenerStage<f64>;
