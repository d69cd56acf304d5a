//! Log-likelihood, regularizers and analytic gradients for the regression
//! whitener and its joint mean-covariance extension.
//!
//! The regression whitener has `diag(L(x)) = A x + b` and
//! `offdiag(L(x)) = C x + d`, with the off-diagonal entries packed row-major
//! (see [`crate::linalg`]). The optional mean block predicts
//! `ν(x) = E x + f`, the whitened mean, so that `μ̂(x) = L(x)⁻ᵀ ν(x)`.
//!
//! Per-sample log-likelihood:
//!
//! ```text
//! ℓ = -(n/2) log 2π + Σ_j log L_jj - ½ ‖Lᵀ y - ν‖²
//! ```
//!
//! With `u = Lᵀ y - ν` the partial derivatives are
//! `∂ℓ/∂L_jj = 1/L_jj - y_j u_j`, `∂ℓ/∂L_rc = -y_r u_c` for `r > c`, and
//! `∂ℓ/∂ν = +u` (the residual enters with a minus sign, so raising `ν`
//! towards `Lᵀ y` increases the likelihood). The parameter gradients follow
//! by the chain rule, e.g. row `j` of `∂/∂A` is `(∂ℓ/∂L_jj) xᵀ`.

use serde::{Deserialize, Serialize};

use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::linalg::{check_len, offdiag_len, LowerTriangular, Matrix};
use crate::parallel::fold_rows;
use crate::scalar::{gaussian_constant, Scalar};

/// Coefficients of the whitened-mean predictor `ν(x) = E x + f`.
#[derive(Clone, Debug, PartialEq)]
pub struct MeanParams<T> {
    pub e: Matrix<T>,
    pub f: Vec<T>,
}

/// Parameters `(A, b, C, d)` of a regression whitener, plus the optional
/// joint-mean block `(E, f)`.
#[derive(Clone, Debug, PartialEq)]
pub struct RegressionParams<T> {
    pub a: Matrix<T>,
    pub b: Vec<T>,
    pub c: Matrix<T>,
    pub d: Vec<T>,
    pub mean: Option<MeanParams<T>>,
}

impl<T: Scalar> RegressionParams<T> {
    /// All-zero parameters of the right shape.
    pub fn zeros(n: usize, p: usize, with_mean: bool) -> Self {
        let k = offdiag_len(n);
        Self {
            a: Matrix::zeros(n, p),
            b: vec![T::zero(); n],
            c: Matrix::zeros(k, p),
            d: vec![T::zero(); k],
            mean: with_mean.then(|| MeanParams {
                e: Matrix::zeros(n, p),
                f: vec![T::zero(); n],
            }),
        }
    }

    /// The constant identity whitener (`b = 1`, everything else zero).
    pub fn identity(n: usize, p: usize, with_mean: bool) -> Self {
        let mut out = Self::zeros(n, p, with_mean);
        out.b.iter_mut().for_each(|v| *v = T::one());
        out
    }

    #[inline]
    pub fn n(&self) -> usize {
        self.b.len()
    }

    #[inline]
    pub fn p(&self) -> usize {
        self.a.cols()
    }

    pub fn has_mean(&self) -> bool {
        self.mean.is_some()
    }

    /// Parameter count: `n(n+1)/2 (p+1)`, plus `n (p+1)` with a mean block.
    pub fn num_params(&self) -> usize {
        flat_len(self.n(), self.p(), self.has_mean())
    }

    pub fn check_shapes(&self) -> Result<()> {
        let (n, p) = (self.n(), self.p());
        let k = offdiag_len(n);
        if n == 0 {
            return Err(Error::InvalidConfig("regression whitener needs n >= 1".into()));
        }
        check_len("rows of A", n, self.a.rows())?;
        check_len("rows of C", k, self.c.rows())?;
        check_len("columns of C", p, self.c.cols())?;
        check_len("length of d", k, self.d.len())?;
        if let Some(m) = &self.mean {
            check_len("rows of E", n, m.e.rows())?;
            check_len("columns of E", p, m.e.cols())?;
            check_len("length of f", n, m.f.len())?;
        }
        Ok(())
    }

    /// Flattens as `A (row-major), b, C (row-major), d[, E, f]`.
    pub fn to_flat(&self) -> Vec<T> {
        let mut v = Vec::with_capacity(self.num_params());
        v.extend_from_slice(self.a.as_slice());
        v.extend_from_slice(&self.b);
        v.extend_from_slice(self.c.as_slice());
        v.extend_from_slice(&self.d);
        if let Some(m) = &self.mean {
            v.extend_from_slice(m.e.as_slice());
            v.extend_from_slice(&m.f);
        }
        v
    }

    pub fn from_flat(n: usize, p: usize, with_mean: bool, flat: &[T]) -> Result<Self> {
        check_len("flat parameter vector", flat_len(n, p, with_mean), flat.len())?;
        let k = offdiag_len(n);
        let mut rest = flat;
        let mut take = |len: usize| {
            let (head, tail) = rest.split_at(len);
            rest = tail;
            head.to_vec()
        };
        let a = Matrix::from_vec(n, p, take(n * p))?;
        let b = take(n);
        let c = Matrix::from_vec(k, p, take(k * p))?;
        let d = take(k);
        let mean = if with_mean {
            let e = Matrix::from_vec(n, p, take(n * p))?;
            Some(MeanParams { e, f: take(n) })
        } else {
            None
        };
        Ok(Self { a, b, c, d, mean })
    }

    /// `A x + b`.
    pub fn diag_at(&self, x: &[T]) -> Vec<T> {
        affine(&self.a, &self.b, x)
    }

    /// `C x + d`.
    pub fn offdiag_at(&self, x: &[T]) -> Vec<T> {
        affine(&self.c, &self.d, x)
    }

    /// `E x + f`, when a mean block is present.
    pub fn nu_at(&self, x: &[T]) -> Option<Vec<T>> {
        self.mean.as_ref().map(|m| affine(&m.e, &m.f, x))
    }

    /// `L(x)`; fails with [`Error::NonPositiveDiagonal`] when `A x + b` has a
    /// non-positive entry.
    pub fn whitener_at(&self, x: &[T]) -> Result<LowerTriangular<T>> {
        check_len("feature vector", self.p(), x.len())?;
        LowerTriangular::new(self.diag_at(x), self.offdiag_at(x))
    }

    /// Predicted mean `μ̂(x) = L(x)⁻ᵀ ν(x)` (zero without a mean block).
    pub fn predicted_mean(&self, x: &[T]) -> Result<Vec<T>> {
        match self.nu_at(x) {
            Some(nu) => self.whitener_at(x)?.solve_transpose(&nu),
            None => Ok(vec![T::zero(); self.n()]),
        }
    }
}

fn flat_len(n: usize, p: usize, with_mean: bool) -> usize {
    let base = n * (n + 1) / 2 * (p + 1);
    if with_mean {
        base + n * (p + 1)
    } else {
        base
    }
}

fn affine<T: Scalar>(m: &Matrix<T>, offset: &[T], x: &[T]) -> Vec<T> {
    m.row_iter()
        .zip(offset)
        .map(|(row, &o)| row.iter().zip(x).fold(o, |s, (&a, &xv)| s + a * xv))
        .collect()
}

/// Fitting configuration for regression whiteners.
///
/// The regularizer is
/// `λ₁ (‖A‖² + ‖C‖²) + λ₂ (‖b − 1‖² + ‖d‖²) + λ_mean (‖E‖² + ‖f‖²)
///  + λ_trace (1/N) Σᵢ ‖L(xᵢ)‖_F²`.
/// With features roughly uniform on the box, the trace term behaves like a
/// ridge on `(A, C)` with weight `λ_trace · n/12` plus an offset penalty.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FitConfig {
    /// Lower bound `ε` on every diagonal entry of `L(x)` over the feature box.
    pub epsilon: f64,
    pub lambda1: f64,
    pub lambda2: f64,
    /// Ridge weight on the mean block `(E, f)`.
    pub lambda_mean: f64,
    /// Weight of the trace-of-precision regularizer evaluated on training data.
    pub lambda_trace: f64,
    pub max_iters: usize,
    pub grad_tolerance: f64,
    pub lbfgs_memory: usize,
    /// Solve without the diagonal constraint first and fall back to the
    /// split-variable formulation only if the result is infeasible.
    pub fast_unconstrained: bool,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            epsilon: 1e-6,
            lambda1: 0.0,
            lambda2: 0.0,
            lambda_mean: 0.0,
            lambda_trace: 0.0,
            max_iters: 500,
            grad_tolerance: 1e-7,
            lbfgs_memory: 10,
            fast_unconstrained: false,
        }
    }
}

impl FitConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::InvalidConfig(msg.to_string()));
        if !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            return bad("epsilon must be positive");
        }
        for (name, v) in [
            ("lambda1", self.lambda1),
            ("lambda2", self.lambda2),
            ("lambda_mean", self.lambda_mean),
            ("lambda_trace", self.lambda_trace),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::InvalidConfig(format!("{name} must be non-negative")));
            }
        }
        if self.max_iters < 1 {
            return bad("max_iters must be at least 1");
        }
        if !(self.grad_tolerance > 0.0) {
            return bad("grad_tolerance must be positive");
        }
        if self.lbfgs_memory < 1 {
            return bad("lbfgs_memory must be at least 1");
        }
        Ok(())
    }
}

/// Result of [`check_feasible`].
#[derive(Clone, Debug, PartialEq)]
pub struct FeasibilityReport {
    pub feasible: bool,
    /// `min_j (b_j − ε − Σ_l |A_jl|)`.
    pub min_margin: f64,
    /// Row attaining the minimal margin.
    pub worst_row: usize,
}

/// Checks `‖A‖_{row,1} ≤ b − ε` row by row, which is equivalent to
/// `A x + b ≥ ε` for every `x` in the unit box.
pub fn check_feasible<T: Scalar>(params: &RegressionParams<T>, epsilon: f64) -> FeasibilityReport {
    let mut worst = (f64::INFINITY, 0);
    for (j, &bj) in params.b.iter().enumerate() {
        let l1: f64 = params.a.row(j).iter().map(|v| v.abs().as_f64()).sum();
        let margin = bj.as_f64() - epsilon - l1;
        if margin < worst.0 || margin.is_nan() {
            worst = (margin, j);
        }
    }
    FeasibilityReport {
        feasible: worst.0 >= 0.0,
        min_margin: worst.0,
        worst_row: worst.1,
    }
}

/// Log-likelihood of one sample under the regression whitener.
pub fn sample_loglik<T: Scalar>(params: &RegressionParams<T>, x: &[T], y: &[T]) -> Result<T> {
    check_len("outcome vector", params.n(), y.len())?;
    let l = params.whitener_at(x)?;
    let mut u = l.transpose_mul(y)?;
    if let Some(nu) = params.nu_at(x) {
        u.iter_mut().zip(nu).for_each(|(ui, v)| *ui -= v);
    }
    let sq: T = u.iter().map(|&v| v * v).sum();
    Ok(gaussian_constant::<T>(params.n()) + l.log_det() - T::lit(0.5) * sq)
}

/// Mean training log-likelihood minus the regularizer.
pub fn objective<T: Scalar>(params: &RegressionParams<T>, data: &Dataset<T>, cfg: &FitConfig) -> Result<T> {
    Ok(evaluate(params, data, cfg, false)?.0)
}

/// Gradient of [`objective`] with respect to every parameter block.
pub fn gradient<T: Scalar>(
    params: &RegressionParams<T>,
    data: &Dataset<T>,
    cfg: &FitConfig,
) -> Result<RegressionParams<T>> {
    let (_, g) = evaluate(params, data, cfg, true)?;
    RegressionParams::from_flat(params.n(), params.p(), params.has_mean(), &g)
}

/// Objective value and its gradient in flat layout (see [`RegressionParams::to_flat`]).
pub fn objective_and_gradient<T: Scalar>(
    params: &RegressionParams<T>,
    data: &Dataset<T>,
    cfg: &FitConfig,
) -> Result<(T, Vec<T>)> {
    evaluate(params, data, cfg, true)
}

/// Value of the ridge part of the regularizer (excludes the trace term, which
/// depends on the data).
pub fn ridge_penalty<T: Scalar>(params: &RegressionParams<T>, cfg: &FitConfig) -> T {
    let sq = |v: &[T]| v.iter().map(|&x| x * x).sum::<T>();
    let sq_shift = |v: &[T]| v.iter().map(|&x| (x - T::one()) * (x - T::one())).sum::<T>();
    let mut r = T::lit(cfg.lambda1) * (sq(params.a.as_slice()) + sq(params.c.as_slice()))
        + T::lit(cfg.lambda2) * (sq_shift(&params.b) + sq(&params.d));
    if let Some(m) = &params.mean {
        r += T::lit(cfg.lambda_mean) * (sq(m.e.as_slice()) + sq(&m.f));
    }
    r
}

/// Gradient of [`ridge_penalty`]: `2λ₁(A, C)`, `2λ₂(b − 1, d)`, `2λ_mean(E, f)`.
pub fn ridge_gradient<T: Scalar>(params: &RegressionParams<T>, cfg: &FitConfig) -> RegressionParams<T> {
    let two = T::lit(2.0);
    let (l1, l2, lm) = (
        two * T::lit(cfg.lambda1),
        two * T::lit(cfg.lambda2),
        two * T::lit(cfg.lambda_mean),
    );
    RegressionParams {
        a: params.a.map(|v| l1 * v),
        b: params.b.iter().map(|&v| l2 * (v - T::one())).collect(),
        c: params.c.map(|v| l1 * v),
        d: params.d.iter().map(|&v| l2 * v).collect(),
        mean: params.mean.as_ref().map(|m| MeanParams {
            e: m.e.map(|v| lm * v),
            f: m.f.iter().map(|&v| lm * v).collect(),
        }),
    }
}

struct Offsets {
    b: usize,
    c: usize,
    d: usize,
    e: usize,
    f: usize,
    end: usize,
}

impl Offsets {
    fn new(n: usize, p: usize, with_mean: bool) -> Self {
        let k = offdiag_len(n);
        let b = n * p;
        let c = b + n;
        let d = c + k * p;
        let e = d + k;
        let f = e + n * p;
        let end = if with_mean { f + n } else { e };
        Self { b, c, d, e, f, end }
    }
}

fn evaluate<T: Scalar>(
    params: &RegressionParams<T>,
    data: &Dataset<T>,
    cfg: &FitConfig,
    with_grad: bool,
) -> Result<(T, Vec<T>)> {
    params.check_shapes()?;
    check_len("outcome dimension", params.n(), data.n())?;
    check_len("feature dimension", params.p(), data.p())?;
    let (n, p) = (params.n(), params.p());
    let off = Offsets::new(n, p, params.has_mean());
    let grad_len = if with_grad { off.end } else { 0 };
    let trace_w = T::lit(cfg.lambda_trace);
    let two = T::lit(2.0);
    let half = T::lit(0.5);

    let (sum, mut grad) = fold_rows(
        data.len(),
        || (T::zero(), vec![T::zero(); grad_len]),
        |(acc, g), i| {
            let x = data.feature(i);
            let y = data.outcome(i);
            let diag = params.diag_at(x);
            let offd = params.offdiag_at(x);
            if let Some(j) = diag.iter().position(|&v| !(v > T::zero())) {
                return Err(Error::NonPositiveDiagonal {
                    index: j,
                    value: diag[j].as_f64(),
                });
            }
            // u = Lᵀ y − ν
            let mut u: Vec<T> = (0..n)
                .map(|c| {
                    let mut s = diag[c] * y[c];
                    for r in c + 1..n {
                        s += offd[r * (r - 1) / 2 + c] * y[r];
                    }
                    s
                })
                .collect();
            if let Some(nu) = params.nu_at(x) {
                u.iter_mut().zip(&nu).for_each(|(ui, &v)| *ui -= v);
            }
            let mut value = diag.iter().map(|d| d.ln()).sum::<T>() - half * u.iter().map(|&v| v * v).sum::<T>();
            if cfg.lambda_trace > 0.0 {
                value -= trace_w * (diag.iter().map(|&v| v * v).sum::<T>() + offd.iter().map(|&v| v * v).sum::<T>());
            }
            *acc += value;
            if !with_grad {
                return Ok(());
            }
            for j in 0..n {
                let gj = T::one() / diag[j] - y[j] * u[j] - two * trace_w * diag[j];
                let row = &mut g[j * p..(j + 1) * p];
                row.iter_mut().zip(x).for_each(|(gv, &xv)| *gv += gj * xv);
                g[off.b + j] += gj;
            }
            for r in 1..n {
                for c in 0..r {
                    let k = r * (r - 1) / 2 + c;
                    let h = -y[r] * u[c] - two * trace_w * offd[k];
                    let row = &mut g[off.c + k * p..off.c + (k + 1) * p];
                    row.iter_mut().zip(x).for_each(|(gv, &xv)| *gv += h * xv);
                    g[off.d + k] += h;
                }
            }
            if params.has_mean() {
                for j in 0..n {
                    let row = &mut g[off.e + j * p..off.e + (j + 1) * p];
                    row.iter_mut().zip(x).for_each(|(gv, &xv)| *gv += u[j] * xv);
                    g[off.f + j] += u[j];
                }
            }
            Ok(())
        },
        |(acc, g), (part_acc, part_g)| {
            *acc += part_acc;
            g.iter_mut().zip(part_g).for_each(|(a, b)| *a += b);
        },
    )?;

    let inv_n = T::one() / T::from_usize_lossy(data.len());
    let value = gaussian_constant::<T>(n) + sum * inv_n - ridge_penalty(params, cfg);
    if with_grad {
        grad.iter_mut().for_each(|v| *v *= inv_n);
        let rg = ridge_gradient(params, cfg).to_flat();
        grad.iter_mut().zip(rg).for_each(|(g, r)| *g -= r);
    }
    Ok((value, grad))
}

/// Objective of one row of the diagonal predictor `Σ̂_jj(x) = exp(a·x + β)`,
/// i.e. `(1/N) Σᵢ (−sᵢ/2 − ½ yᵢⱼ² e^{−sᵢ}) − λ ‖a‖²` with `sᵢ = a·xᵢ + β`,
/// together with its gradient `(∂a, ∂β)`. The Gaussian constant is omitted.
pub fn diagonal_row_objective<T: Scalar>(
    a: &[T],
    beta: T,
    data: &Dataset<T>,
    row: usize,
    lambda: f64,
) -> Result<(T, Vec<T>, T)> {
    check_len("diagonal coefficient row", data.p(), a.len())?;
    let p = a.len();
    let half = T::lit(0.5);
    let (value, mut grad) = fold_rows(
        data.len(),
        || (T::zero(), vec![T::zero(); p + 1]),
        |(acc, g), i| {
            let x = data.feature(i);
            let y = data.outcome(i)[row];
            let s = a.iter().zip(x).fold(beta, |s, (&av, &xv)| s + av * xv);
            let w = y * y * (-s).exp();
            *acc += -half * s - half * w;
            let ds = half * (w - T::one());
            g[..p].iter_mut().zip(x).for_each(|(gv, &xv)| *gv += ds * xv);
            g[p] += ds;
            Ok(())
        },
        |(acc, g), (pa, pg)| {
            *acc += pa;
            g.iter_mut().zip(pg).for_each(|(a, b)| *a += b);
        },
    )?;
    let inv_n = T::one() / T::from_usize_lossy(data.len());
    let lam = T::lit(lambda);
    let reg: T = a.iter().map(|&v| v * v).sum::<T>() * lam;
    grad.iter_mut().for_each(|v| *v *= inv_n);
    for (gv, &av) in grad[..p].iter_mut().zip(a) {
        *gv -= T::lit(2.0) * lam * av;
    }
    let gb = grad.pop().expect("gradient has offset slot");
    Ok((value * inv_n - reg, grad, gb))
}
