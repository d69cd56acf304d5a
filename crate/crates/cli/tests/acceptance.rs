//! Acceptance checks. Prints one PASS/FAIL/SKIP line per criterion and exits
//! non-zero if any criterion fails.

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use whitener::dataio::{load, split_scores, Recipe, Table};
use whitener::linalg::{LowerTriangular, Matrix};
use whitener::objective::{check_feasible, sample_loglik, FitConfig, RegressionParams};
use whitener::solver::{fit_regression, Status};
use whitener::whiteners::{Pipeline, StageSpec, WhitenerStage};
use whitener::Dataset;
use whitener_cli::fixtures::planted_whitener;
use whitener_cli::oracle;

enum Verdict {
    Pass,
    Fail,
    Skip,
}

struct Line {
    verdict: Verdict,
    name: &'static str,
    detail: String,
}

fn verdict(ok: bool) -> Verdict {
    if ok {
        Verdict::Pass
    } else {
        Verdict::Fail
    }
}

fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures").join(name)
}

fn oracle_line(name: &'static str, suite: &str, seed: u64, max_seconds: Option<f64>) -> Line {
    let o = oracle::run_suite(suite, seed).expect("known suite");
    let fast = max_seconds.is_none_or(|m| o.seconds < m);
    let budget = max_seconds.map_or(String::new(), |m| format!(", budget {m}s"));
    Line {
        verdict: verdict(o.passed && fast),
        name,
        detail: format!("{} in {:.2}s{budget}", o.detail, o.seconds),
    }
}

/// `y = L(x)⁻ᵀ z` with `x` uniform on `[-1, 1]^p`.
fn sample(
    rng: &mut ChaCha8Rng,
    rows: usize,
    p: usize,
    whitener: impl Fn(&[f64]) -> LowerTriangular<f64>,
) -> Dataset<f64> {
    let mut x = Vec::with_capacity(rows * p);
    let mut y = Vec::new();
    for _ in 0..rows {
        let xi: Vec<f64> = (0..p).map(|_| rng.random_range(-1.0..=1.0)).collect();
        let l = whitener(&xi);
        let z: Vec<f64> = (0..l.dim()).map(|_| rng.sample(StandardNormal)).collect();
        y.extend(l.solve_transpose(&z).expect("dimensions match"));
        x.extend(xi);
    }
    let n = y.len() / rows;
    Dataset::new(
        Matrix::from_vec(rows, p, x).expect("shape"),
        Matrix::from_vec(rows, n, y).expect("shape"),
        None,
    )
    .expect("valid dataset")
}

fn mean_loglik(params: &RegressionParams<f64>, data: &Dataset<f64>) -> f64 {
    (0..data.len())
        .map(|i| sample_loglik(params, data.feature(i), data.outcome(i)).expect("feasible"))
        .sum::<f64>()
        / data.len() as f64
}

fn planted_recovery() -> Line {
    let name = "planted-model recovery";
    let truth = {
        let mut t = RegressionParams::<f64>::zeros(2, 1, false);
        t.a[(0, 0)] = 0.8;
        t.a[(1, 0)] = -0.6;
        t.b = vec![1.2, 1.0];
        t.c[(0, 0)] = 0.5;
        t.d = vec![0.1];
        t
    };
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let train = sample(&mut rng, 20_000, 1, |x| planted_whitener(x[0]));
    let test = sample(&mut rng, 20_000, 1, |x| planted_whitener(x[0]));
    let fitted = match fit_regression(&train, &FitConfig::default()) {
        Ok((WhitenerStage::Regression(p), _)) => p,
        Ok(_) => unreachable!("regression fit returns a regression stage"),
        Err(e) => {
            return Line {
                verdict: Verdict::Fail,
                name,
                detail: format!("fit failed: {e}"),
            }
        }
    };
    let max_err = truth
        .to_flat()
        .iter()
        .zip(fitted.to_flat())
        .map(|(t, f)| (t - f).abs())
        .fold(0.0, f64::max);
    let (true_score, fit_score) = (mean_loglik(&truth, &test), mean_loglik(&fitted, &test));
    let gap = (true_score - fit_score).abs();
    Line {
        verdict: verdict(max_err <= 0.05 && gap <= 0.02),
        name,
        detail: format!(
            "max parameter error {max_err:.4} (tol 0.05); test score {fit_score:.4} vs true {true_score:.4}, gap {gap:.4} (tol 0.02)"
        ),
    }
}

fn fixture_scores(recipe: &str) -> whitener::Result<(f64, f64)> {
    let recipe = Recipe::from_path(fixture(recipe))?;
    let table = Table::from_path(fixture("heteroscedastic.csv"))?;
    let prepared = load(&table, &recipe)?;
    let (pipeline, _) = Pipeline::fit(&recipe.stages, &prepared.train()?.dataset()?)?;
    let (train, test) = split_scores(&pipeline, &prepared.frame, prepared.train_len)?;
    Ok((train, test.expect("fixture recipes have a test split")))
}

fn iterated_lift() -> Line {
    let name = "iterated lift";
    match (fixture_scores("constant.json"), fixture_scores("heteroscedastic.json")) {
        (Ok((_, base)), Ok((_, iterated))) => Line {
            verdict: verdict(iterated - base >= 0.1),
            name,
            detail: format!(
                "test score [constant] {base:.4}, [constant, regression] {iterated:.4}, lift {:.4} nats (need >= 0.1)",
                iterated - base
            ),
        },
        (a, b) => Line {
            verdict: Verdict::Fail,
            name,
            detail: format!("fit failed: {:?} / {:?}", a.err(), b.err()),
        },
    }
}

fn joint_mean_lift() -> Line {
    let name = "joint-mean lift";
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    let mean = |x: &[f64]| [0.6 + 0.8 * x[0], -0.4 + 0.5 * x[1]];
    let mut draw = |rows| {
        let centered = sample(&mut rng, rows, 2, |x| planted_whitener(0.5 * (x[0] - x[1])));
        let mut y = centered.outcomes().clone();
        for i in 0..rows {
            let m = mean(centered.feature(i));
            y.row_mut(i).iter_mut().zip(m).for_each(|(v, m)| *v += m);
        }
        centered.with_outcomes(y).expect("same shape")
    };
    let (train, test) = (draw(5000), draw(5000));
    let rmse = |pipeline: &Pipeline<f64>| -> whitener::Result<f64> {
        let mut sq = 0.0;
        for i in 0..test.len() {
            let (_, mu) = pipeline.evaluate_at(test.feature(i))?;
            let mu = mu.unwrap_or_else(|| vec![0.0; test.n()]);
            sq += test
                .outcome(i)
                .iter()
                .zip(&mu)
                .map(|(y, m)| (y - m).powi(2))
                .sum::<f64>();
        }
        Ok((sq / (test.len() * test.n()) as f64).sqrt())
    };
    let result = (|| -> whitener::Result<(f64, f64)> {
        let (joint, _) = Pipeline::fit(&[StageSpec::Joint(FitConfig::default())], &train)?;
        let (cov, _) = Pipeline::fit(&[StageSpec::Regression(FitConfig::default())], &train)?;
        Ok((rmse(&joint)?, rmse(&cov)?))
    })();
    match result {
        Ok((joint, zero)) => Line {
            verdict: verdict(joint < zero),
            name,
            detail: format!(
                "test RMSE joint {joint:.4} vs zero-mean {zero:.4} ({:.1}% reduction)",
                100.0 * (1.0 - joint / zero)
            ),
        },
        Err(e) => Line {
            verdict: Verdict::Fail,
            name,
            detail: format!("fit failed: {e}"),
        },
    }
}

/// Fits on data whose generating diagonal dips below zero inside the box, so
/// the bound is active, and checks every fit at all `2^p` corners.
fn feasibility() -> Line {
    let name = "feasibility guarantee";
    let mut rng = ChaCha8Rng::seed_from_u64(37);
    let (mut fits, mut active, mut corners) = (0, 0, 0usize);
    let mut worst = f64::INFINITY;
    let mut problems = Vec::new();
    for p in 1..=10 {
        for n in 1..=3 {
            let slope: Vec<f64> = (0..p).map(|_| rng.random_range(-1.0..1.0)).collect();
            let scale = 1.6 / slope.iter().map(|s: &f64| s.abs()).sum::<f64>();
            let data = sample(&mut rng, 400, p, |x| {
                let s: f64 = slope.iter().zip(x).map(|(a, v)| a * v).sum::<f64>() * scale;
                let diag: Vec<f64> = (0..n)
                    .map(|j| (1.0 + s * (1.0 - 0.3 * j as f64)).abs() + 0.01)
                    .collect();
                LowerTriangular::from_diagonal(diag).expect("positive")
            });
            let cfg = FitConfig {
                fast_unconstrained: (p + n) % 2 == 0,
                max_iters: 2000,
                ..FitConfig::default()
            };
            let (stage, report) = match fit_regression(&data, &cfg) {
                Ok(v) => v,
                Err(e) => {
                    problems.push(format!("p={p} n={n}: {e}"));
                    continue;
                }
            };
            let WhitenerStage::Regression(params) = stage else {
                unreachable!()
            };
            fits += 1;
            if report.status != Status::Converged {
                problems.push(format!("p={p} n={n}: status {:?}", report.status));
            }
            let check = check_feasible(&params, cfg.epsilon);
            if !check.feasible {
                problems.push(format!("p={p} n={n}: check_feasible margin {:e}", check.min_margin));
            }
            if check.min_margin < 1e-6 {
                active += 1;
            }
            for mask in 0u32..(1 << p) {
                let x: Vec<f64> = (0..p).map(|l| if mask >> l & 1 == 1 { 1.0 } else { -1.0 }).collect();
                let low = params.diag_at(&x).into_iter().fold(f64::INFINITY, f64::min);
                worst = worst.min(low);
                corners += 1;
                // Rounding in `A x + b` may land a few ulps under ε.
                if low < cfg.epsilon - 1e-12 {
                    problems.push(format!("p={p} n={n}: corner {x:?} has diagonal {low:e}"));
                }
            }
        }
    }
    Line {
        verdict: verdict(problems.is_empty()),
        name,
        detail: format!(
            "{fits} fits ({active} with the bound active), {corners} corners, smallest corner diagonal {worst:.3e} (eps 1e-6){}",
            if problems.is_empty() { String::new() } else { format!("; problems: {}", problems.join("; ")) }
        ),
    }
}

fn determinism() -> Line {
    let name = "determinism";
    let dir = tempfile::tempdir().expect("temp dir");
    let recipe = fixture("heteroscedastic.json");
    let data = fixture("heteroscedastic.csv");
    let run = |threads: &str, out: &str| -> Option<Vec<u8>> {
        let model = dir.path().join(out);
        let args = [
            "whitener".as_ref(),
            "--threads".as_ref(),
            threads.as_ref(),
            "--seed".as_ref(),
            "7".as_ref(),
            "fit".as_ref(),
            "--recipe".as_ref(),
            recipe.as_os_str(),
            "--data".as_ref(),
            data.as_os_str(),
            "--model".as_ref(),
            model.as_os_str(),
        ];
        let args: Vec<&std::ffi::OsStr> = args.to_vec();
        (whitener_cli::run(args) == 0)
            .then(|| std::fs::read(&model).ok())
            .flatten()
    };
    match (run("1", "a.json"), run("1", "b.json"), run("4", "c.json")) {
        (Some(a), Some(b), Some(c)) => Line {
            verdict: verdict(a == b && a == c),
            name,
            detail: format!(
                "two runs identical: {}, 1 vs 4 threads identical: {} ({} bytes)",
                a == b,
                a == c,
                a.len()
            ),
        },
        _ => Line {
            verdict: Verdict::Fail,
            name,
            detail: "a fit run failed".into(),
        },
    }
}

/// Train log-likelihoods on hand-prepared factor returns, when supplied.
fn market_data() -> Line {
    let name = "market-data reproduction";
    let Some(path) = std::env::var_os("WHITENER_MARKET_DATA") else {
        return Line {
            verdict: Verdict::Skip,
            name,
            detail: "WHITENER_MARKET_DATA not set (see docs/market-data.md)".into(),
        };
    };
    let recipes = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../docs/recipes");
    let score = |recipe: &str| -> whitener::Result<f64> {
        let recipe = Recipe::from_path(recipes.join(recipe))?;
        let table = Table::from_path(&path)?;
        let prepared = load(&table, &recipe)?;
        let (pipeline, _) = Pipeline::fit(&recipe.stages, &prepared.train()?.dataset()?)?;
        Ok(split_scores(&pipeline, &prepared.frame, prepared.train_len)?.0)
    };
    match (score("market_constant.json"), score("market_sma50.json")) {
        (Ok(c), Ok(s)) => Line {
            verdict: verdict((c - 13.60).abs() <= 0.15 && (s - 14.81).abs() <= 0.15),
            name,
            detail: format!("train log-likelihood constant {c:.3} (ref 13.60), SMA(50) {s:.3} (ref 14.81), tol 0.15"),
        },
        (a, b) => Line {
            verdict: Verdict::Fail,
            name,
            detail: format!("could not fit: {:?} / {:?}", a.err(), b.err()),
        },
    }
}

fn main() {
    let seed = 20_240_611;
    let checks: Vec<Box<dyn Fn() -> Line>> = vec![
        Box::new(move || oracle_line("gradient oracle", "gradient", seed, Some(30.0))),
        Box::new(move || oracle_line("brute-force solver oracle", "grid", seed, Some(10.0))),
        Box::new(move || oracle_line("concavity", "concavity", seed, None)),
        Box::new(move || oracle_line("whitening round trip", "roundtrip", seed, None)),
        Box::new(move || oracle_line("recursion equivalence", "recursion", seed, None)),
        Box::new(planted_recovery),
        Box::new(iterated_lift),
        Box::new(joint_mean_lift),
        Box::new(feasibility),
        Box::new(determinism),
        Box::new(market_data),
    ];
    let mut failed = 0;
    for check in checks {
        let line = check();
        let tag = match line.verdict {
            Verdict::Pass => "PASS",
            Verdict::Fail => {
                failed += 1;
                "FAIL"
            }
            Verdict::Skip => "SKIP",
        };
        println!("{tag} {}: {}", line.name, line.detail);
    }
    if failed > 0 {
        eprintln!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}
