//! Rolling second-moment estimators for the SMA and EWMA forecasters.
//!
//! Both keep an unnormalized running sum of outer products and update it in
//! O(n²) per step, so a pass over a dataset never re-sums the window.

use std::collections::VecDeque;

use crate::linalg::Matrix;
use crate::scalar::Scalar;

fn add_outer<T: Scalar>(sum: &mut Matrix<T>, y: &[T], sign: T) {
    let n = y.len();
    for i in 0..n {
        let yi = sign * y[i];
        for j in 0..=i {
            sum[(i, j)] += yi * y[j];
        }
    }
}

fn symmetric_from_lower<T: Scalar>(lower: &Matrix<T>, scale: T, loading: T) -> Matrix<T> {
    let n = lower.rows();
    let mut out = Matrix::zeros(n, n);
    for i in 0..n {
        for j in 0..=i {
            let v = lower[(i, j)] * scale;
            out[(i, j)] = v;
            out[(j, i)] = v;
        }
        out[(i, i)] += loading;
    }
    out
}

/// `Σ̂ᵢ = (1/M) Σ_{j=1..M} y_{i−j} y_{i−j}ᵀ`, updated by adding the newest
/// outer product and removing the one that leaves the window.
pub struct RollingSma<T> {
    memory: usize,
    window: VecDeque<Vec<T>>,
    sum: Matrix<T>,
}

impl<T: Scalar> RollingSma<T> {
    pub fn new(n: usize, memory: usize) -> Self {
        Self {
            memory,
            window: VecDeque::with_capacity(memory + 1),
            sum: Matrix::zeros(n, n),
        }
    }

    /// Number of outcomes seen so far, capped at the memory.
    pub fn filled(&self) -> usize {
        self.window.len()
    }

    pub fn is_ready(&self) -> bool {
        self.window.len() == self.memory
    }

    pub fn push(&mut self, y: &[T]) {
        add_outer(&mut self.sum, y, T::one());
        self.window.push_back(y.to_vec());
        if self.window.len() > self.memory {
            let old = self.window.pop_front().expect("window is non-empty");
            add_outer(&mut self.sum, &old, -T::one());
        }
    }

    /// Current forecast plus `loading · I`.
    pub fn covariance(&self, loading: T) -> Matrix<T> {
        symmetric_from_lower(&self.sum, T::one() / T::from_usize_lossy(self.memory), loading)
    }
}

/// `Σ̂ᵢ = αᵢ Σ_{j<i} γ^{i−j} y_j y_jᵀ` with `αᵢ = (Σ_{j=1}^{i−1} γʲ)⁻¹`,
/// carried as `Sᵢ₊₁ = γ (Sᵢ + yᵢ yᵢᵀ)` and `wᵢ₊₁ = γ (wᵢ + 1)`.
pub struct RollingEwma<T> {
    gamma: T,
    count: usize,
    weight: T,
    sum: Matrix<T>,
}

impl<T: Scalar> RollingEwma<T> {
    pub fn new(n: usize, gamma: T) -> Self {
        Self {
            gamma,
            count: 0,
            weight: T::zero(),
            sum: Matrix::zeros(n, n),
        }
    }

    pub fn count(&self) -> usize {
        self.count
    }

    pub fn push(&mut self, y: &[T]) {
        add_outer(&mut self.sum, y, T::one());
        let g = self.gamma;
        self.sum.as_mut_slice().iter_mut().for_each(|v| *v *= g);
        self.weight = g * (self.weight + T::one());
        self.count += 1;
    }

    pub fn covariance(&self, loading: T) -> Matrix<T> {
        symmetric_from_lower(&self.sum, T::one() / self.weight, loading)
    }
}

/// Direct (non-recursive) EWMA sum over `history`, oldest first. Terms whose
/// weight is below `1e-12` of the largest weight are skipped.
pub fn ewma_direct<T: Scalar>(history: &[Vec<T>], gamma: T, loading: T) -> Matrix<T> {
    let n = history.first().map_or(0, |y| y.len());
    let cutoff = T::lit(1e-12) * gamma;
    let mut sum = Matrix::zeros(n, n);
    let mut norm = T::zero();
    // Most recent first: weights γ, γ², ...
    let mut w = gamma;
    for y in history.iter().rev() {
        if w >= cutoff {
            add_outer(&mut sum, y, w);
        }
        norm += w;
        w *= gamma;
    }
    symmetric_from_lower(&sum, T::one() / norm, loading)
}

/// Direct SMA average of the last `memory` rows of `history`.
pub fn sma_direct<T: Scalar>(history: &[Vec<T>], memory: usize, loading: T) -> Matrix<T> {
    let n = history.first().map_or(0, |y| y.len());
    let mut sum = Matrix::zeros(n, n);
    for y in &history[history.len() - memory..] {
        add_outer(&mut sum, y, T::one());
    }
    symmetric_from_lower(&sum, T::one() / T::from_usize_lossy(memory), loading)
}
