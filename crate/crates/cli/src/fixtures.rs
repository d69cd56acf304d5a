//! Synthetic datasets with planted heteroscedastic structure.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use whitener::linalg::LowerTriangular;

/// Seed of the bundled fixture files.
pub const FIXTURE_SEED: u64 = 20_240_611;
pub const FIXTURE_ROWS: usize = 4000;

/// Planted whitener of the fixture at normalized level `u ∈ [-1, 1]`.
pub fn planted_whitener(u: f64) -> LowerTriangular<f64> {
    LowerTriangular::new(vec![1.2 + 0.8 * u, 1.0 - 0.6 * u], vec![0.1 + 0.5 * u]).expect("planted whitener is feasible")
}

/// Time-indexed CSV with columns `t, level, noise, y0, y1`.
///
/// `level` is uniform on `[0, 40]` and drives the covariance through
/// `u = level / 20 − 1`; `noise` is an irrelevant feature. Outcomes are drawn
/// as `y = L(u)⁻ᵀ z` with `z` standard normal.
pub fn heteroscedastic_csv(rows: usize, seed: u64) -> String {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = String::from("t,level,noise,y0,y1\n");
    for t in 0..rows {
        let level: f64 = rng.random_range(0.0..40.0);
        let noise: f64 = rng.sample(StandardNormal);
        let z: [f64; 2] = [rng.sample(StandardNormal), rng.sample(StandardNormal)];
        let l = planted_whitener(level / 20.0 - 1.0);
        let y = l.solve_transpose(&z).expect("dimensions match");
        out.push_str(&format!("{t},{level},{noise},{},{}\n", y[0], y[1]));
    }
    out
}
