//! Brute-force checks of the analytic machinery: finite differences for the
//! gradient, a parameter grid for the solver, midpoint concavity, whitening
//! round trips and rolling-recursion equivalence.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use whitener::linalg::{covariance_from_whitener, Matrix, SymmetricPD};
use whitener::objective::{objective, objective_and_gradient, FitConfig, RegressionParams};
use whitener::solver::fit_regression;
use whitener::whiteners::rolling::{ewma_direct, sma_direct, RollingEwma, RollingSma};
use whitener::whiteners::WhitenerStage;
use whitener::Dataset;

/// Result of one suite.
#[derive(Clone, Debug)]
pub struct SuiteOutcome {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
    pub seconds: f64,
}

impl std::fmt::Display for SuiteOutcome {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "{} {}: {} ({:.2}s)",
            if self.passed { "PASS" } else { "FAIL" },
            self.name,
            self.detail,
            self.seconds
        )
    }
}

pub const SUITES: [&str; 5] = ["gradient", "grid", "concavity", "roundtrip", "recursion"];

/// Runs the named suite; `None` for an unknown name.
pub fn run_suite(name: &str, seed: u64) -> Option<SuiteOutcome> {
    let start = Instant::now();
    let (name, passed, detail) = match name {
        "gradient" => ("gradient", gradient(seed, 200)),
        "grid" => ("grid", grid(seed)),
        "concavity" => ("concavity", concavity(seed, 500)),
        "roundtrip" => ("roundtrip", roundtrip(seed, 100)),
        "recursion" => ("recursion", recursion(seed, 500)),
        _ => return None,
    }
    .into_flat();
    Some(SuiteOutcome {
        name,
        passed,
        detail,
        seconds: start.elapsed().as_secs_f64(),
    })
}

trait IntoFlat {
    fn into_flat(self) -> (&'static str, bool, String);
}

impl IntoFlat for (&'static str, (bool, String)) {
    fn into_flat(self) -> (&'static str, bool, String) {
        (self.0, self.1 .0, self.1 .1)
    }
}

fn random_data(rng: &mut ChaCha8Rng, rows: usize, n: usize, p: usize) -> Dataset<f64> {
    let x: Vec<f64> = (0..rows * p).map(|_| rng.random_range(-1.0..=1.0)).collect();
    let y: Vec<f64> = (0..rows * n)
        .map(|_| rng.sample::<f64, _>(StandardNormal) * rng.random_range(0.5..2.0))
        .collect();
    Dataset::new(
        Matrix::from_vec(rows, p, x).expect("shape"),
        Matrix::from_vec(rows, n, y).expect("shape"),
        None,
    )
    .expect("features lie in the box")
}

/// Parameters with `b_j − ‖A_j‖₁ ≥ min_slack`, hence feasible for small ε.
fn random_feasible(rng: &mut ChaCha8Rng, n: usize, p: usize, with_mean: bool, min_slack: f64) -> RegressionParams<f64> {
    let mut params = RegressionParams::zeros(n, p, with_mean);
    let mut draw = |m: &mut Matrix<f64>| {
        m.as_mut_slice()
            .iter_mut()
            .for_each(|v| *v = rng.random_range(-0.5..0.5))
    };
    draw(&mut params.a);
    draw(&mut params.c);
    if let Some(mean) = params.mean.as_mut() {
        draw(&mut mean.e);
    }
    for j in 0..n {
        let l1: f64 = params.a.row(j).iter().map(|v| v.abs()).sum();
        params.b[j] = l1 + rng.random_range(min_slack..min_slack + 1.2);
    }
    params.d.iter_mut().for_each(|v| *v = rng.random_range(-0.5..0.5));
    if let Some(mean) = params.mean.as_mut() {
        mean.f.iter_mut().for_each(|v| *v = rng.random_range(-0.5..0.5));
    }
    params
}

/// Central differences with step `1e-6`; the error of each component is
/// `|g − fd| / max(|fd|, 1)`.
pub fn gradient(seed: u64, points: usize) -> (bool, String) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let h = 1e-6;
    let mut worst: f64 = 0.0;
    let mut components = 0;
    for k in 0..points {
        let n = [1, 2, 4][k % 3];
        let p = [0, 1, 3][(k / 3) % 3];
        let with_mean = (k / 9) % 2 == 1;
        let data = random_data(&mut rng, 25, n, p);
        let params = random_feasible(&mut rng, n, p, with_mean, 0.3);
        let cfg = FitConfig {
            lambda1: rng.random_range(0.0..0.1),
            lambda2: rng.random_range(0.0..0.1),
            lambda_mean: rng.random_range(0.0..0.1),
            lambda_trace: if k % 2 == 0 { rng.random_range(0.0..0.05) } else { 0.0 },
            ..FitConfig::default()
        };
        let (_, g) = objective_and_gradient(&params, &data, &cfg).expect("feasible point");
        let theta = params.to_flat();
        let f = |t: &[f64]| {
            let q = RegressionParams::from_flat(n, p, with_mean, t).expect("length");
            objective(&q, &data, &cfg).expect("step stays feasible")
        };
        for i in 0..theta.len() {
            let mut up = theta.clone();
            up[i] += h;
            let mut dn = theta.clone();
            dn[i] -= h;
            let fd = (f(&up) - f(&dn)) / (2.0 * h);
            worst = worst.max((g[i] - fd).abs() / fd.abs().max(1.0));
            components += 1;
        }
    }
    (
        worst <= 1e-5,
        format!("{points} points, {components} components, max relative error {worst:.2e} (tolerance 1e-5)"),
    )
}

/// Solver against a 400 x 400 grid over feasible `(A, b)` for `n = p = 1`.
pub fn grid(seed: u64) -> (bool, String) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let rows = 50;
    let x: Vec<f64> = (0..rows).map(|_| rng.random_range(-1.0..=1.0)).collect();
    let y: Vec<f64> = x
        .iter()
        .map(|&xi| rng.sample::<f64, _>(StandardNormal) / (1.0 + 0.5 * xi))
        .collect();
    let data = Dataset::new(
        Matrix::from_vec(rows, 1, x).expect("shape"),
        Matrix::from_vec(rows, 1, y).expect("shape"),
        None,
    )
    .expect("valid data");
    let cfg = FitConfig::default();
    let (stage, _) = match fit_regression(&data, &cfg) {
        Ok(v) => v,
        Err(e) => return (false, format!("solver failed: {e}")),
    };
    let WhitenerStage::Regression(params) = stage else {
        return (false, "solver returned a non-regression stage".into());
    };
    let solved = objective(&params, &data, &cfg).expect("solution is feasible");

    let steps = 400;
    let (b_max, a_max) = (4.0, 4.0);
    let eps = cfg.epsilon;
    let mut best = f64::NEG_INFINITY;
    let mut probe = RegressionParams::<f64>::zeros(1, 1, false);
    for ib in 0..steps {
        let b = eps + (b_max - eps) * ib as f64 / (steps - 1) as f64;
        for ia in 0..steps {
            let a = -a_max + 2.0 * a_max * ia as f64 / (steps - 1) as f64;
            if a.abs() > b - eps {
                continue;
            }
            probe.a[(0, 0)] = a;
            probe.b[0] = b;
            if let Ok(v) = objective(&probe, &data, &cfg) {
                best = best.max(v);
            }
        }
    }
    (
        solved >= best - 1e-6,
        format!(
            "solver {solved:.9} at (A, b) = ({:.4}, {:.4}), grid best {best:.9}",
            params.a[(0, 0)],
            params.b[0]
        ),
    )
}

/// `f((θ₁+θ₂)/2) ≥ (f(θ₁)+f(θ₂))/2 − 1e-9` for the unregularized objective.
pub fn concavity(seed: u64, pairs: usize) -> (bool, String) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cfg = FitConfig::default();
    let mut worst = f64::INFINITY;
    for k in 0..pairs {
        let n = 1 + k % 3;
        let p = (k / 3) % 3;
        let with_mean = k % 2 == 0;
        let data = random_data(&mut rng, 20, n, p);
        let t1 = random_feasible(&mut rng, n, p, with_mean, 0.02);
        let t2 = random_feasible(&mut rng, n, p, with_mean, 0.02);
        let mid: Vec<f64> = t1
            .to_flat()
            .iter()
            .zip(t2.to_flat())
            .map(|(a, b)| 0.5 * (a + b))
            .collect();
        let mid = RegressionParams::from_flat(n, p, with_mean, &mid).expect("length");
        let f = |q: &RegressionParams<f64>| objective(q, &data, &cfg).expect("feasible");
        let gap = f(&mid) - 0.5 * (f(&t1) + f(&t2));
        worst = worst.min(gap);
    }
    (
        worst >= -1e-9,
        format!("{pairs} midpoints, smallest gap f(mid) - mean {worst:.3e} (tolerance -1e-9)"),
    )
}

/// `chol(Σ⁻¹) → covariance_from_whitener → invert → chol` reproduces the factor.
pub fn roundtrip(seed: u64, matrices: usize) -> (bool, String) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for k in 0..matrices {
        let n = 1 + k % 6;
        let g: Vec<f64> = (0..n * n).map(|_| rng.sample(StandardNormal)).collect();
        let mut sigma = Matrix::zeros(n, n);
        for i in 0..n {
            for j in 0..n {
                sigma[(i, j)] =
                    (0..n).map(|l| g[i * n + l] * g[j * n + l]).sum::<f64>() + if i == j { 0.5 } else { 0.0 };
            }
        }
        let result = (|| -> whitener::Result<f64> {
            let l = SymmetricPD::new(sigma)?.precision_whitener()?;
            let cov = covariance_from_whitener(&l);
            let back = cov.inverse()?.cholesky()?;
            Ok(l.to_dense()
                .as_slice()
                .iter()
                .zip(back.to_dense().as_slice())
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max))
        })();
        match result {
            Ok(d) => worst = worst.max(d),
            Err(e) => return (false, format!("matrix {k} (n = {n}): {e}")),
        }
    }
    (
        worst <= 1e-8,
        format!("{matrices} matrices, max entry difference {worst:.2e} (tolerance 1e-8)"),
    )
}

/// Rolling SMA/EWMA updates against direct sums at every step.
pub fn recursion(seed: u64, steps: usize) -> (bool, String) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = 3;
    let history: Vec<Vec<f64>> = (0..steps)
        .map(|_| {
            let scale = rng.random_range(0.2..3.0);
            (0..n).map(|_| scale * rng.sample::<f64, _>(StandardNormal)).collect()
        })
        .collect();
    let max_diff = |a: &Matrix<f64>, b: &Matrix<f64>| {
        a.as_slice()
            .iter()
            .zip(b.as_slice())
            .map(|(x, y)| (x - y).abs())
            .fold(0.0, f64::max)
    };
    let mut worst: f64 = 0.0;
    for memory in [2, 5, 50] {
        let mut roll = RollingSma::new(n, memory);
        for (i, y) in history.iter().enumerate() {
            if roll.is_ready() {
                worst = worst.max(max_diff(&roll.covariance(0.0), &sma_direct(&history[..i], memory, 0.0)));
            }
            roll.push(y);
        }
    }
    for half_life in [1.0f64, 10.0, 63.0] {
        let gamma = (-1.0 / half_life).exp2();
        let mut roll = RollingEwma::new(n, gamma);
        for (i, y) in history.iter().enumerate() {
            if roll.count() > 0 {
                worst = worst.max(max_diff(&roll.covariance(0.0), &ewma_direct(&history[..i], gamma, 0.0)));
            }
            roll.push(y);
        }
    }
    (
        worst <= 1e-10,
        format!("M in {{2, 5, 50}}, half-life in {{1, 10, 63}}, {steps} steps: max difference {worst:.2e} (tolerance 1e-10)"),
    )
}
