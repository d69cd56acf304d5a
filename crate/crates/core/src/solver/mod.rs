//! Fitting routines built on the bounded L-BFGS minimizer.
//!
//! The regression whitener must keep `A x + b ≥ ε` on the whole feature box,
//! i.e. `‖A_j‖₁ ≤ b_j − ε` for every row. Writing `A = A₊ − A₋` with
//! `A₊, A₋ ≥ 0` and `b = (A₊ + A₋) 1 + ε + b₊` with `b₊ ≥ 0` turns this into
//! simple bounds, which [`SplitEncoding`] handles.

mod lbfgsb;

pub use lbfgsb::{minimize, BoxProblem, MinimizeOptions, Minimum, Status};

use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::linalg::{offdiag_len, Matrix};
use crate::objective::{check_feasible, diagonal_row_objective, objective_and_gradient, FitConfig, RegressionParams};
use crate::scalar::{gaussian_constant, Scalar};
use crate::whiteners::WhitenerStage;

/// Diagnostics of one fit. Objective values are in the maximization sense
/// (mean log-likelihood minus regularizer).
#[derive(Clone, Debug, PartialEq)]
pub struct FitReport {
    pub status: Status,
    pub iterations: usize,
    pub objective: f64,
    /// Objective at the starting point.
    pub start_objective: f64,
    pub projected_gradient: f64,
    /// Rows whose diagonal constraint is active at the solution.
    pub active_rows: usize,
    /// Whether the unconstrained shortcut produced the accepted solution.
    pub used_fast_path: bool,
    /// Objective after every accepted step.
    pub history: Vec<f64>,
}

/// Flat layout `[A₊, A₋, b₊, C, d, E, f]` of the split-variable problem, with
/// the first three blocks bounded below by zero.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SplitEncoding {
    pub n: usize,
    pub p: usize,
    pub with_mean: bool,
    pub epsilon: f64,
}

impl SplitEncoding {
    pub fn new(n: usize, p: usize, with_mean: bool, epsilon: f64) -> Self {
        Self {
            n,
            p,
            with_mean,
            epsilon,
        }
    }

    fn bounded_len(&self) -> usize {
        2 * self.n * self.p + self.n
    }

    pub fn len(&self) -> usize {
        let k = offdiag_len(self.n);
        let mean = if self.with_mean { self.n * (self.p + 1) } else { 0 };
        self.bounded_len() + k * (self.p + 1) + mean
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn lower_bounds<T: Scalar>(&self) -> Vec<T> {
        let mut v = vec![T::zero(); self.bounded_len()];
        v.resize(self.len(), T::neg_infinity());
        v
    }

    pub fn upper_bounds<T: Scalar>(&self) -> Vec<T> {
        vec![T::infinity(); self.len()]
    }

    /// Identity whitener: `A₊ = A₋ = 0`, `b₊ = max(1 − ε, 0)`, the rest zero.
    pub fn identity_start<T: Scalar>(&self) -> Vec<T> {
        let mut z = vec![T::zero(); self.len()];
        let np = self.n * self.p;
        let start = T::lit((1.0 - self.epsilon).max(0.0));
        z[2 * np..2 * np + self.n].iter_mut().for_each(|v| *v = start);
        z
    }

    /// Recovers `(A, b, C, d[, E, f])` from the split variables.
    pub fn decode<T: Scalar>(&self, z: &[T]) -> Result<RegressionParams<T>> {
        crate::linalg::check_len("split parameter vector", self.len(), z.len())?;
        let (n, p) = (self.n, self.p);
        let np = n * p;
        let (plus, rest) = z.split_at(np);
        let (minus, rest) = rest.split_at(np);
        let (b_plus, rest) = rest.split_at(n);
        let eps = T::lit(self.epsilon);
        let a: Vec<T> = plus.iter().zip(minus).map(|(&u, &v)| u - v).collect();
        let b: Vec<T> = (0..n)
            .map(|j| {
                let row: T = (0..p).map(|l| plus[j * p + l] + minus[j * p + l]).sum();
                row + eps + b_plus[j]
            })
            .collect();
        let mut flat = a;
        flat.extend(b);
        flat.extend_from_slice(rest);
        RegressionParams::from_flat(n, p, self.with_mean, &flat)
    }

    /// Splits feasible parameters; `None` when `‖A_j‖₁ > b_j − ε` for some row.
    pub fn encode<T: Scalar>(&self, params: &RegressionParams<T>) -> Option<Vec<T>> {
        let (n, p) = (self.n, self.p);
        let eps = T::lit(self.epsilon);
        let a = params.a.as_slice();
        let mut z: Vec<T> = a.iter().map(|&v| v.max(T::zero())).collect();
        z.extend(a.iter().map(|&v| (-v).max(T::zero())));
        for j in 0..n {
            let l1: T = params.a.row(j).iter().map(|v| v.abs()).sum();
            let slack = params.b[j] - eps - l1;
            if !(slack >= T::zero()) {
                return None;
            }
            z.push(slack);
        }
        let flat = params.to_flat();
        z.extend_from_slice(&flat[n * p + n..]);
        Some(z)
    }

    /// Chain rule from a gradient in `(A, b, …)` layout to split variables:
    /// `∂A₊ = g_A + g_b 1ᵀ`, `∂A₋ = −g_A + g_b 1ᵀ`, `∂b₊ = g_b`.
    pub fn chain_gradient<T: Scalar>(&self, grad: &[T]) -> Vec<T> {
        let (n, p) = (self.n, self.p);
        let np = n * p;
        let (ga, rest) = grad.split_at(np);
        let (gb, rest) = rest.split_at(n);
        let mut out = Vec::with_capacity(self.len());
        out.extend((0..np).map(|i| ga[i] + gb[i / p.max(1)]));
        out.extend((0..np).map(|i| -ga[i] + gb[i / p.max(1)]));
        out.extend_from_slice(gb);
        out.extend_from_slice(rest);
        out
    }
}

fn options(cfg: &FitConfig) -> MinimizeOptions {
    MinimizeOptions {
        memory: cfg.lbfgs_memory,
        max_iters: cfg.max_iters,
        grad_tol: cfg.grad_tolerance,
        ..MinimizeOptions::default()
    }
}

fn check_outcome<T: Scalar>(status: Status, iterations: usize, pg: T, tol: f64) -> Result<()> {
    if status != Status::Converged && !(pg.as_f64() <= 10.0 * tol) {
        return Err(Error::SolverFailure {
            status: status.to_string(),
            iterations,
            projected_gradient: pg.as_f64(),
        });
    }
    Ok(())
}

fn negate<T: Scalar>((v, g): (T, Vec<T>)) -> (T, Vec<T>) {
    (-v, g.into_iter().map(|x| -x).collect())
}

/// Regression whitener fitted by maximizing the regularized log-likelihood.
pub fn fit_regression<T: Scalar>(data: &Dataset<T>, cfg: &FitConfig) -> Result<(WhitenerStage<T>, FitReport)> {
    fit_affine(data, cfg, false)
}

/// Regression whitener with the joint mean block `ν(x) = E x + f`.
pub fn fit_joint<T: Scalar>(data: &Dataset<T>, cfg: &FitConfig) -> Result<(WhitenerStage<T>, FitReport)> {
    fit_affine(data, cfg, true)
}

fn fit_affine<T: Scalar>(data: &Dataset<T>, cfg: &FitConfig, with_mean: bool) -> Result<(WhitenerStage<T>, FitReport)> {
    cfg.validate()?;
    let (n, p) = (data.n(), data.p());
    let enc = SplitEncoding::new(n, p, with_mean, cfg.epsilon);
    let opts = options(cfg);
    let start = enc.decode(&enc.identity_start::<T>())?;
    let start_objective = objective_and_gradient(&start, data, cfg)?.0.as_f64();

    if cfg.fast_unconstrained {
        let mut problem = BoxProblem::unbounded(start.num_params(), |z: &[T]| {
            let params = RegressionParams::from_flat(n, p, with_mean, z)?;
            Ok(negate(objective_and_gradient(&params, data, cfg)?))
        });
        let m = minimize(&mut problem, &start.to_flat(), &opts)?;
        let params = RegressionParams::from_flat(n, p, with_mean, &m.x)?;
        let feas = check_feasible(&params, cfg.epsilon);
        if m.status == Status::Converged && feas.feasible {
            log::info!(
                "unconstrained fit is feasible (margin {:.3e}); split formulation skipped",
                feas.min_margin
            );
            let report = FitReport {
                status: m.status,
                iterations: m.iterations,
                objective: -m.value.as_f64(),
                start_objective,
                projected_gradient: m.projected_gradient.as_f64(),
                active_rows: 0,
                used_fast_path: true,
                history: m.history.iter().map(|v| -v.as_f64()).collect(),
            };
            return Ok((WhitenerStage::Regression(params), report));
        }
        log::info!(
            "unconstrained fit rejected ({}, margin {:.3e}); solving the split formulation",
            m.status,
            feas.min_margin
        );
    }

    let mut problem = BoxProblem::new(enc.lower_bounds(), enc.upper_bounds(), |z: &[T]| {
        let params = enc.decode(z)?;
        let (v, g) = objective_and_gradient(&params, data, cfg)?;
        Ok(negate((v, enc.chain_gradient(&g))))
    })?;
    let m = minimize(&mut problem, &enc.identity_start(), &opts)?;
    check_outcome(m.status, m.iterations, m.projected_gradient, cfg.grad_tolerance)?;
    let params = enc.decode(&m.x)?;
    let feas = check_feasible(&params, cfg.epsilon);
    // Rounding in the recovery of b can leave a margin a few ulps below zero.
    let scale = params.b.iter().map(|v| v.abs().as_f64()).fold(1.0, f64::max);
    if feas.min_margin < -64.0 * T::epsilon().as_f64() * scale {
        return Err(Error::SolverFailure {
            status: format!("recovered parameters infeasible (margin {:e})", feas.min_margin),
            iterations: m.iterations,
            projected_gradient: m.projected_gradient.as_f64(),
        });
    }
    let np = n * p;
    let active_rows = m.x[2 * np..2 * np + n].iter().filter(|&&v| v <= T::zero()).count();
    log::info!("regression fit: {} of {n} diagonal constraints active", active_rows);
    let report = FitReport {
        status: m.status,
        iterations: m.iterations,
        objective: -m.value.as_f64(),
        start_objective,
        projected_gradient: m.projected_gradient.as_f64(),
        active_rows,
        used_fast_path: false,
        history: m.history.iter().map(|v| -v.as_f64()).collect(),
    };
    Ok((WhitenerStage::Regression(params), report))
}

/// Diagonal predictor `Σ̂(x) = diag(exp(A x + b))`, fitted row by row with a
/// ridge `λ ‖A_j‖²` on each row.
pub fn fit_diagonal<T: Scalar>(data: &Dataset<T>, lambda: f64) -> Result<(WhitenerStage<T>, FitReport)> {
    if !(lambda >= 0.0 && lambda.is_finite()) {
        return Err(Error::InvalidConfig(format!(
            "diagonal ridge weight must be non-negative, got {lambda}"
        )));
    }
    let (n, p) = (data.n(), data.p());
    let opts = MinimizeOptions::default();
    let inv_n = T::one() / T::from_usize_lossy(data.len());
    let mut a = Matrix::zeros(n, p);
    let mut b = Vec::with_capacity(n);
    let constant = gaussian_constant::<T>(n).as_f64();
    let mut report = FitReport {
        status: Status::Converged,
        iterations: 0,
        objective: constant,
        start_objective: constant,
        projected_gradient: 0.0,
        active_rows: 0,
        used_fast_path: false,
        history: Vec::new(),
    };
    for j in 0..n {
        let mean_sq = (0..data.len()).map(|i| data.outcome(i)[j].powi(2)).sum::<T>() * inv_n;
        if !(mean_sq > T::zero()) {
            return Err(Error::SingularCovariance(format!("outcome {j} is identically zero")));
        }
        let mut start = vec![T::zero(); p + 1];
        start[p] = mean_sq.ln();
        let mut problem = BoxProblem::unbounded(p + 1, |z: &[T]| {
            let (v, mut ga, gb) = diagonal_row_objective(&z[..p], z[p], data, j, lambda)?;
            ga.push(gb);
            Ok(negate((v, ga)))
        });
        let m = minimize(&mut problem, &start, &opts)?;
        check_outcome(m.status, m.iterations, m.projected_gradient, opts.grad_tol)?;
        a.row_mut(j).copy_from_slice(&m.x[..p]);
        b.push(m.x[p]);
        report.iterations += m.iterations;
        report.objective -= m.value.as_f64();
        report.start_objective -= m.history[0].as_f64();
        report.projected_gradient = report.projected_gradient.max(m.projected_gradient.as_f64());
        if m.status != Status::Converged {
            report.status = m.status;
        }
    }
    Ok((WhitenerStage::Diagonal { a, b }, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::objective::objective;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn normal_data(rows: usize, n: usize, p: usize, seed: u64) -> Dataset<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x: Vec<f64> = (0..rows * p).map(|_| rng.random_range(-1.0..1.0)).collect();
        let y: Vec<f64> = (0..rows * n).map(|_| rng.sample(StandardNormal)).collect();
        Dataset::new(
            Matrix::from_vec(rows, p, x).unwrap(),
            Matrix::from_vec(rows, n, y).unwrap(),
            None,
        )
        .unwrap()
    }

    #[test]
    fn encoding_round_trip_and_feasibility() {
        let enc = SplitEncoding::new(2, 2, true, 1e-3);
        let z: Vec<f64> = (0..enc.len()).map(|i| (i as f64 * 0.37).sin().abs()).collect();
        let params = enc.decode(&z).unwrap();
        let report = check_feasible(&params, 1e-3);
        assert!(report.feasible, "{report:?}");
        let back = enc.encode(&params).unwrap();
        let again = enc.decode(&back).unwrap();
        for (x, y) in params.to_flat().iter().zip(again.to_flat()) {
            assert!((x - y).abs() < 1e-12);
        }
        let mut bad = params.clone();
        bad.b[0] = 0.0;
        assert!(enc.encode(&bad).is_none());
    }

    #[test]
    fn chain_gradient_matches_differences() {
        let data = normal_data(40, 2, 2, 3);
        let cfg = FitConfig {
            lambda1: 0.1,
            lambda2: 0.05,
            ..FitConfig::default()
        };
        let enc = SplitEncoding::new(2, 2, false, cfg.epsilon);
        let z: Vec<f64> = (0..enc.len()).map(|i| 0.1 + 0.05 * i as f64).collect();
        let f = |z: &[f64]| objective(&enc.decode(z).unwrap(), &data, &cfg).unwrap();
        let (_, g) = objective_and_gradient(&enc.decode(&z).unwrap(), &data, &cfg).unwrap();
        let gz = enc.chain_gradient(&g);
        for i in 0..z.len() {
            let h = 1e-6;
            let mut up = z.clone();
            up[i] += h;
            let mut dn = z.clone();
            dn[i] -= h;
            let fd = (f(&up) - f(&dn)) / (2.0 * h);
            assert!(
                (fd - gz[i]).abs() < 1e-6 * (1.0 + fd.abs()),
                "component {i}: {fd} vs {}",
                gz[i]
            );
        }
    }

    #[test]
    fn identity_second_moment_gives_identity() {
        // ±1 outcomes have unit second moment exactly.
        let y: Vec<f64> = (0..100).map(|i| if i % 2 == 0 { 1.0 } else { -1.0 }).collect();
        let data = Dataset::from_outcomes(Matrix::from_vec(100, 1, y).unwrap()).unwrap();
        let (stage, report) = fit_regression(&data, &FitConfig::default()).unwrap();
        let WhitenerStage::Regression(params) = stage else {
            panic!()
        };
        assert!((params.b[0] - 1.0).abs() < 1e-4, "b = {}", params.b[0]);
        assert!(report.objective >= report.start_objective);
    }

    #[test]
    fn fast_path_agrees_with_split() {
        let data = normal_data(500, 2, 1, 11);
        let cfg = FitConfig::default();
        let (slow, rs) = fit_regression(&data, &cfg).unwrap();
        let (fast, rf) = fit_regression(
            &data,
            &FitConfig {
                fast_unconstrained: true,
                ..cfg
            },
        )
        .unwrap();
        assert!(rf.used_fast_path && !rs.used_fast_path);
        assert!((rs.objective - rf.objective).abs() < 1e-8);
        let (WhitenerStage::Regression(a), WhitenerStage::Regression(b)) = (slow, fast) else {
            panic!()
        };
        for (x, y) in a.to_flat().iter().zip(b.to_flat()) {
            assert!((x - y).abs() < 1e-4);
        }
    }

    #[test]
    fn joint_recovers_constant_mean() {
        let mut data = normal_data(4000, 2, 0, 5);
        let mu = [0.7, -1.3];
        let shifted: Vec<f64> = (0..data.len())
            .flat_map(|i| {
                let y = data.outcome(i);
                [y[0] + mu[0], y[1] + mu[1]]
            })
            .collect();
        data = data
            .with_outcomes(Matrix::from_vec(data.len(), 2, shifted).unwrap())
            .unwrap();
        let (stage, _) = fit_joint(&data, &FitConfig::default()).unwrap();
        let WhitenerStage::Regression(params) = stage else {
            panic!()
        };
        let mean = params.predicted_mean(&[]).unwrap();
        // The optimum is the sample mean exactly; sampling noise is ≈ 1/√4000.
        for j in 0..2 {
            let sample: f64 = (0..data.len()).map(|i| data.outcome(i)[j]).sum::<f64>() / data.len() as f64;
            assert!((mean[j] - sample).abs() < 1e-5, "{} vs {}", mean[j], sample);
            assert!((mean[j] - mu[j]).abs() < 0.1);
        }
    }

    #[test]
    fn joint_with_heavy_mean_ridge_matches_regression() {
        let data = normal_data(300, 2, 1, 8);
        let cfg = FitConfig {
            lambda_mean: 1e4,
            max_iters: 5000,
            ..FitConfig::default()
        };
        let (WhitenerStage::Regression(joint), _) = fit_joint(&data, &cfg).unwrap() else {
            panic!()
        };
        let (WhitenerStage::Regression(plain), _) = fit_regression(&data, &cfg).unwrap() else {
            panic!()
        };
        let m = joint.mean.as_ref().unwrap();
        assert!(m.e.max_abs() < 1e-3 && m.f.iter().all(|v| v.abs() < 1e-3));
        let plain_flat = plain.to_flat();
        for (x, y) in joint.to_flat().iter().zip(&plain_flat) {
            assert!((x - y).abs() < 1e-3);
        }
    }

    #[test]
    fn diagonal_scalar_optimum() {
        let data = normal_data(200, 3, 0, 2);
        let (stage, report) = fit_diagonal(&data, 0.0).unwrap();
        let WhitenerStage::Diagonal { b, .. } = stage else {
            panic!()
        };
        for j in 0..3 {
            let ms: f64 = (0..200).map(|i| data.outcome(i)[j].powi(2)).sum::<f64>() / 200.0;
            assert!((b[j] - ms.ln()).abs() < 1e-10);
        }
        assert_eq!(report.status, Status::Converged);
    }

    #[test]
    fn diagonal_heavy_ridge_and_standard_normal() {
        let data = normal_data(20000, 2, 2, 4);
        let (WhitenerStage::Diagonal { a, b }, _) = fit_diagonal(&data, 1e6).unwrap() else {
            panic!()
        };
        assert!(a.max_abs() < 1e-5);
        for j in 0..2 {
            let ms: f64 = (0..data.len()).map(|i| data.outcome(i)[j].powi(2)).sum::<f64>() / data.len() as f64;
            assert!((b[j] - ms.ln()).abs() < 1e-5);
        }
        let (WhitenerStage::Diagonal { a, b }, _) = fit_diagonal(&data, 0.0).unwrap() else {
            panic!()
        };
        assert!(a.max_abs() < 0.05 && b.iter().all(|v| v.abs() < 0.05));
    }

    #[test]
    fn diagonal_rejects_zero_outcome() {
        let data = Dataset::from_outcomes(Matrix::from_vec(3, 1, vec![0.0; 3]).unwrap()).unwrap();
        assert!(matches!(fit_diagonal(&data, 0.0), Err(Error::SingularCovariance(_))));
    }
}
