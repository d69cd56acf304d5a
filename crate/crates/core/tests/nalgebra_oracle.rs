//! Likelihoods, factors and fitted covariances checked against dense
//! linear algebra from nalgebra.

use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use whitener::linalg::{covariance_from_whitener, LowerTriangular, Matrix, SymmetricPD};
use whitener::objective::{sample_loglik, MeanParams, RegressionParams};
use whitener::whiteners::{fit_constant, Pipeline, WhitenerStage};
use whitener::{Dataset, DatasetF32, PipelineF32};

fn dense(l: &LowerTriangular<f64>) -> DMatrix<f64> {
    let n = l.dim();
    DMatrix::from_fn(n, n, |i, j| l.get(i, j))
}

/// `log N(y; μ, Σ)` straight from the density formula.
fn gaussian_logpdf(y: &DVector<f64>, mean: &DVector<f64>, sigma: &DMatrix<f64>) -> f64 {
    let n = y.len() as f64;
    let r = y - mean;
    let inv = sigma.clone().try_inverse().expect("invertible");
    -0.5 * n * (2.0 * std::f64::consts::PI).ln()
        - 0.5 * sigma.determinant().ln()
        - 0.5 * (r.transpose() * inv * &r)[(0, 0)]
}

fn whitener_strategy(max_n: usize) -> impl Strategy<Value = LowerTriangular<f64>> {
    (1..=max_n).prop_flat_map(|n| {
        (
            prop::collection::vec(0.3..2.5f64, n),
            prop::collection::vec(-1.0..1.0f64, n * (n - 1) / 2),
        )
            .prop_map(|(d, o)| LowerTriangular::new(d, o).unwrap())
    })
}

proptest! {
    #[test]
    fn sample_loglik_matches_density(l in whitener_strategy(5), seed in any::<u64>(), with_mean in any::<bool>()) {
        let n = l.dim();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let y: Vec<f64> = (0..n).map(|_| rng.sample::<f64, _>(StandardNormal) * 2.0).collect();
        let nu: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let (diag, off) = l.clone().into_parts();
        let params = RegressionParams {
            a: Matrix::zeros(n, 0),
            b: diag,
            c: Matrix::zeros(off.len(), 0),
            d: off,
            mean: with_mean.then(|| MeanParams { e: Matrix::zeros(n, 0), f: nu.clone() }),
        };
        let lm = dense(&l);
        let sigma = (&lm * lm.transpose()).try_inverse().unwrap();
        // z = Lᵀ y − ν has mean zero when y has mean L⁻ᵀ ν.
        let mean = if with_mean {
            lm.transpose().try_inverse().unwrap() * DVector::from_vec(nu)
        } else {
            DVector::zeros(n)
        };
        let expected = gaussian_logpdf(&DVector::from_vec(y.clone()), &mean, &sigma);
        let got = sample_loglik(&params, &[], &y).unwrap();
        prop_assert!((got - expected).abs() < 1e-9 * expected.abs().max(1.0), "{got} vs {expected}");
    }

    #[test]
    fn covariance_matches_dense_inverse(l in whitener_strategy(6)) {
        let lm = dense(&l);
        let expected = (&lm * lm.transpose()).try_inverse().unwrap();
        let got = covariance_from_whitener(&l);
        for i in 0..l.dim() {
            for j in 0..l.dim() {
                prop_assert!((got.get(i, j) - expected[(i, j)]).abs() < 1e-9 * expected.amax().max(1.0));
            }
        }
    }

    #[test]
    fn cholesky_matches_nalgebra(l in whitener_strategy(6)) {
        let lm = dense(&l);
        let a = &lm * lm.transpose();
        let n = l.dim();
        let spd = SymmetricPD::new(Matrix::from_vec(n, n, a.transpose().as_slice().to_vec()).unwrap()).unwrap();
        let ours = spd.cholesky().unwrap();
        let theirs = a.cholesky().unwrap().l();
        for i in 0..n {
            for j in 0..=i {
                prop_assert!((ours.get(i, j) - theirs[(i, j)]).abs() < 1e-10);
            }
        }
    }
}

fn random_dataset(rows: usize, n: usize, seed: u64) -> Dataset<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mix: Vec<f64> = (0..n * n).map(|_| rng.sample(StandardNormal)).collect();
    let mut y = Vec::with_capacity(rows * n);
    for _ in 0..rows {
        let g: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
        y.extend((0..n).map(|i| (0..n).map(|k| mix[i * n + k] * g[k]).sum::<f64>()));
    }
    Dataset::from_outcomes(Matrix::from_vec(rows, n, y).unwrap()).unwrap()
}

#[test]
fn constant_fit_is_inverse_second_moment() {
    let data = random_dataset(300, 4, 5);
    let y = DMatrix::from_row_slice(data.len(), 4, data.outcomes().as_slice());
    let second = y.transpose() * &y / data.len() as f64;
    let WhitenerStage::Constant(l) = fit_constant(&data).unwrap() else {
        panic!("constant stage")
    };
    let lm = dense(&l);
    let recovered = (&lm * lm.transpose()).try_inverse().unwrap();
    assert!((recovered - second).amax() < 1e-10);
}

#[test]
fn composed_pipeline_scores_like_product_factor() {
    let data = random_dataset(120, 3, 6);
    let first = fit_constant(&data).unwrap();
    let second = WhitenerStage::Constant(LowerTriangular::new(vec![1.5, 0.7, 1.1], vec![0.2, -0.4, 0.3]).unwrap());
    let (WhitenerStage::Constant(l1), WhitenerStage::Constant(l2)) = (&first, &second) else {
        unreachable!()
    };
    let product = dense(l1) * dense(l2);
    let sigma = (&product * product.transpose()).try_inverse().unwrap();

    let pipeline = Pipeline::with_stages(3, 0, vec![first.clone(), second.clone()]).unwrap();
    let expected: f64 = (0..data.len())
        .map(|i| gaussian_logpdf(&DVector::from_row_slice(data.outcome(i)), &DVector::zeros(3), &sigma))
        .sum::<f64>()
        / data.len() as f64;
    assert!((pipeline.score(&data).unwrap() - expected).abs() < 1e-10);

    let (factor, mean) = pipeline.evaluate_at(&[]).unwrap();
    assert!(mean.is_none());
    assert!((dense(&factor) - product).amax() < 1e-12);
}

#[test]
fn single_precision_tracks_double() {
    let data = random_dataset(500, 3, 7);
    let data32: DatasetF32 = data.cast();
    let stage64 = fit_constant(&data).unwrap();
    let stage32 = fit_constant(&data32).unwrap();
    let score64 = Pipeline::with_stages(3, 0, vec![stage64])
        .unwrap()
        .score(&data)
        .unwrap();
    let score32 = PipelineF32::with_stages(3, 0, vec![stage32])
        .unwrap()
        .score(&data32)
        .unwrap();
    assert!((f64::from(score32) - score64).abs() < 1e-4, "{score32} vs {score64}");
}
