//! Limited-memory quasi-Newton minimization with simple bounds.
//!
//! Each iteration fixes the variables that sit on a bound with the gradient
//! pointing outward, builds an L-BFGS direction on the remaining (free)
//! variables with the two-loop recursion, and runs a backtracking search along
//! the projected path `P(x + t d)`. Curvature pairs are restricted to the free
//! set when applied and are only stored when `sᵀy > 0`.

use std::collections::VecDeque;
use std::fmt;

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Minimization problem `min f(z)` subject to `lower ≤ z ≤ upper`.
///
/// `eval` returns `(f(z), ∇f(z))`. Returning [`Error::NonPositiveDiagonal`]
/// marks `z` as outside the domain; the line search then treats `f` as `+∞`.
pub struct BoxProblem<T, F> {
    lower: Vec<T>,
    upper: Vec<T>,
    eval: F,
}

impl<T, F> BoxProblem<T, F>
where
    T: Scalar,
    F: FnMut(&[T]) -> Result<(T, Vec<T>)>,
{
    pub fn new(lower: Vec<T>, upper: Vec<T>, eval: F) -> Result<Self> {
        if lower.len() != upper.len() {
            return Err(Error::DimensionMismatch {
                what: "bound vectors",
                expected: lower.len(),
                found: upper.len(),
            });
        }
        if let Some(i) = lower.iter().zip(&upper).position(|(l, u)| !(l <= u)) {
            return Err(Error::InvalidConfig(format!("lower bound exceeds upper bound at {i}")));
        }
        Ok(Self { lower, upper, eval })
    }

    pub fn unbounded(dim: usize, eval: F) -> Self {
        Self {
            lower: vec![T::neg_infinity(); dim],
            upper: vec![T::infinity(); dim],
            eval,
        }
    }

    pub fn dim(&self) -> usize {
        self.lower.len()
    }

    pub fn lower(&self) -> &[T] {
        &self.lower
    }

    pub fn upper(&self) -> &[T] {
        &self.upper
    }

    fn project(&self, z: &mut [T]) {
        for ((v, &l), &u) in z.iter_mut().zip(&self.lower).zip(&self.upper) {
            *v = v.max(l).min(u);
        }
    }

    /// Evaluates, mapping out-of-domain points to `+∞`.
    fn eval_soft(&mut self, z: &[T]) -> Result<Option<(T, Vec<T>)>> {
        match (self.eval)(z) {
            Ok((f, g)) if f.is_finite() && g.iter().all(|v| v.is_finite()) => {
                if g.len() != z.len() {
                    return Err(Error::DimensionMismatch {
                        what: "gradient",
                        expected: z.len(),
                        found: g.len(),
                    });
                }
                Ok(Some((f, g)))
            }
            Ok(_) | Err(Error::NonPositiveDiagonal { .. }) => Ok(None),
            Err(e) => Err(e),
        }
    }

    /// `‖z − P(z − g)‖_∞`.
    pub fn projected_gradient_norm(&self, z: &[T], g: &[T]) -> T {
        z.iter()
            .zip(g)
            .zip(self.lower.iter().zip(&self.upper))
            .map(|((&zi, &gi), (&l, &u))| (zi - (zi - gi).max(l).min(u)).abs())
            .fold(T::zero(), |m, v| if v > m { v } else { m })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MinimizeOptions {
    /// Number of stored curvature pairs.
    pub memory: usize,
    pub max_iters: usize,
    /// Convergence threshold on the projected-gradient ∞-norm.
    pub grad_tol: f64,
    /// Sufficient-decrease constant.
    pub c1: f64,
    /// Curvature constant; pairs from steps that fail it are still stored when
    /// `sᵀy > 0`, but the value is used to decide whether to try a longer step.
    pub c2: f64,
    pub max_line_search: usize,
}

impl Default for MinimizeOptions {
    fn default() -> Self {
        Self {
            memory: 10,
            max_iters: 500,
            grad_tol: 1e-7,
            c1: 1e-4,
            c2: 0.9,
            max_line_search: 60,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Status {
    Converged,
    MaxIters,
    LineSearchFailure,
}

impl fmt::Display for Status {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Status::Converged => "converged",
            Status::MaxIters => "maximum iterations reached",
            Status::LineSearchFailure => "line search failure",
        })
    }
}

#[derive(Clone, Debug)]
pub struct Minimum<T> {
    pub x: Vec<T>,
    pub value: T,
    pub gradient: Vec<T>,
    pub iterations: usize,
    pub status: Status,
    pub projected_gradient: T,
    /// Objective value after each accepted step, starting with the initial value.
    pub history: Vec<T>,
}

struct Pair<T> {
    s: Vec<T>,
    y: Vec<T>,
}

fn dot_masked<T: Scalar>(a: &[T], b: &[T], free: &[bool]) -> T {
    a.iter()
        .zip(b)
        .zip(free)
        .filter(|(_, &f)| f)
        .map(|((&x, &y), _)| x * y)
        .sum()
}

/// Two-loop recursion on the free variables: returns `−H g` with zeros on the
/// fixed set.
fn lbfgs_direction<T: Scalar>(g: &[T], free: &[bool], pairs: &VecDeque<Pair<T>>) -> Vec<T> {
    let mut q: Vec<T> = g
        .iter()
        .zip(free)
        .map(|(&v, &f)| if f { v } else { T::zero() })
        .collect();
    let mut alphas = Vec::with_capacity(pairs.len());
    let mut gamma = T::one();
    let mut have_gamma = false;
    for pair in pairs.iter().rev() {
        let sy = dot_masked(&pair.s, &pair.y, free);
        if !(sy > T::zero()) {
            alphas.push(None);
            continue;
        }
        if !have_gamma {
            let yy = dot_masked(&pair.y, &pair.y, free);
            if yy > T::zero() {
                gamma = sy / yy;
                have_gamma = true;
            }
        }
        let rho = T::one() / sy;
        let alpha = rho * dot_masked(&pair.s, &q, free);
        for ((qi, &yi), &f) in q.iter_mut().zip(&pair.y).zip(free) {
            if f {
                *qi -= alpha * yi;
            }
        }
        alphas.push(Some((alpha, rho)));
    }
    q.iter_mut().for_each(|v| *v *= gamma);
    for (pair, coef) in pairs.iter().zip(alphas.into_iter().rev()) {
        let Some((alpha, rho)) = coef else { continue };
        let beta = rho * dot_masked(&pair.y, &q, free);
        for ((qi, &si), &f) in q.iter_mut().zip(&pair.s).zip(free) {
            if f {
                *qi += (alpha - beta) * si;
            }
        }
    }
    q.iter_mut().for_each(|v| *v = -*v);
    q
}

/// Minimizes `problem` from `start`, which must lie inside the box.
pub fn minimize<T, F>(problem: &mut BoxProblem<T, F>, start: &[T], opts: &MinimizeOptions) -> Result<Minimum<T>>
where
    T: Scalar,
    F: FnMut(&[T]) -> Result<(T, Vec<T>)>,
{
    let dim = problem.dim();
    if start.len() != dim {
        return Err(Error::DimensionMismatch {
            what: "starting point",
            expected: dim,
            found: start.len(),
        });
    }
    if start
        .iter()
        .zip(problem.lower.iter().zip(&problem.upper))
        .any(|(&z, (&l, &u))| !(z >= l && z <= u))
    {
        return Err(Error::InvalidConfig("starting point lies outside the box".into()));
    }
    let mut x = start.to_vec();
    let (mut f, mut g) = problem
        .eval_soft(&x)?
        .ok_or_else(|| Error::InvalidConfig("objective is not finite at the starting point".into()))?;
    let grad_tol = T::lit(opts.grad_tol);
    let c1 = T::lit(opts.c1);
    let c2 = T::lit(opts.c2);
    let mut pairs: VecDeque<Pair<T>> = VecDeque::with_capacity(opts.memory);
    let mut history = vec![f];
    let mut iterations = 0;
    let mut status = Status::MaxIters;

    while iterations < opts.max_iters {
        if problem.projected_gradient_norm(&x, &g) <= grad_tol {
            status = Status::Converged;
            break;
        }
        let free: Vec<bool> = (0..dim)
            .map(|i| {
                !((x[i] <= problem.lower[i] && g[i] > T::zero()) || (x[i] >= problem.upper[i] && g[i] < T::zero()))
            })
            .collect();

        let mut step = None;
        for attempt in 0..2 {
            if attempt == 1 {
                if pairs.is_empty() {
                    break;
                }
                // The quasi-Newton model misled the search; restart from steepest descent.
                log::debug!("iteration {iterations}: resetting curvature memory");
                pairs.clear();
            }
            let mut d = lbfgs_direction(&g, &free, &pairs);
            let mut slope = dot_masked(&g, &d, &free);
            if !(slope < T::zero()) {
                pairs.clear();
                d = g
                    .iter()
                    .zip(&free)
                    .map(|(&v, &fr)| if fr { -v } else { T::zero() })
                    .collect();
                slope = dot_masked(&g, &d, &free);
                if !(slope < T::zero()) {
                    break;
                }
            }
            if let Some(found) = line_search(problem, &x, f, &g, &d, c1, c2, opts.max_line_search)? {
                step = Some(found);
                break;
            }
        }

        let Some((x_new, f_new, g_new)) = step else {
            status = if problem.projected_gradient_norm(&x, &g) <= grad_tol {
                Status::Converged
            } else {
                Status::LineSearchFailure
            };
            break;
        };
        let s: Vec<T> = x_new.iter().zip(&x).map(|(&a, &b)| a - b).collect();
        let y: Vec<T> = g_new.iter().zip(&g).map(|(&a, &b)| a - b).collect();
        let sy: T = s.iter().zip(&y).map(|(&a, &b)| a * b).sum();
        let yy: T = y.iter().map(|&v| v * v).sum();
        if sy > T::epsilon() * yy {
            if pairs.len() == opts.memory {
                pairs.pop_front();
            }
            pairs.push_back(Pair { s, y });
        }
        x = x_new;
        f = f_new;
        g = g_new;
        history.push(f);
        iterations += 1;
    }
    if status == Status::MaxIters && problem.projected_gradient_norm(&x, &g) <= grad_tol {
        status = Status::Converged;
    }
    let projected_gradient = problem.projected_gradient_norm(&x, &g);
    Ok(Minimum {
        x,
        value: f,
        gradient: g,
        iterations,
        status,
        projected_gradient,
        history,
    })
}

type Step<T> = (Vec<T>, T, Vec<T>);
/// Maps a step length to the (projected) trial point.
type TrialPoint<'a, T, F> = &'a dyn Fn(&BoxProblem<T, F>, T) -> Vec<T>;

/// Backtracking along the projected path with the Armijo condition
/// `f(x⁺) ≤ f(x) + c₁ gᵀ(x⁺ − x)`. When the unit step is accepted without
/// touching a bound but the curvature condition fails, longer steps are tried
/// while they keep decreasing `f`.
#[allow(clippy::too_many_arguments)]
fn line_search<T, F>(
    problem: &mut BoxProblem<T, F>,
    x: &[T],
    f: T,
    g: &[T],
    d: &[T],
    c1: T,
    c2: T,
    max_steps: usize,
) -> Result<Option<Step<T>>>
where
    T: Scalar,
    F: FnMut(&[T]) -> Result<(T, Vec<T>)>,
{
    let trial = |problem: &BoxProblem<T, F>, t: T| {
        let mut z: Vec<T> = x.iter().zip(d).map(|(&xi, &di)| xi + t * di).collect();
        problem.project(&mut z);
        z
    };
    let slope0: T = g.iter().zip(d).map(|(&a, &b)| a * b).sum();
    let mut t = T::one();
    for _ in 0..max_steps {
        let z = trial(problem, t);
        let gs: T = z.iter().zip(x).zip(g).map(|((&zi, &xi), &gi)| gi * (zi - xi)).sum();
        if !(gs < T::zero()) {
            // Projection left no descent component (or the step underflowed).
            return Ok(None);
        }
        match problem.eval_soft(&z)? {
            Some((fz, gz)) if fz <= f + c1 * gs => {
                let unclipped = z.iter().zip(x).zip(d).all(|((&zi, &xi), &di)| zi == xi + t * di);
                let slope_z: T = gz.iter().zip(d).map(|(&a, &b)| a * b).sum();
                if t == T::one() && unclipped && slope_z < c2 * slope0 {
                    return extend(problem, x, d, (z, fz, gz), c2 * slope0, &trial).map(Some);
                }
                return Ok(Some((z, fz, gz)));
            }
            Some((fz, _)) => {
                // Safeguarded quadratic interpolation, falling back to halving.
                let denom = T::lit(2.0) * (fz - f - gs);
                let t_q = if denom > T::zero() {
                    -gs * t / denom
                } else {
                    t * T::lit(0.5)
                };
                t = t_q.max(t * T::lit(0.1)).min(t * T::lit(0.5));
            }
            None => t *= T::lit(0.5),
        }
    }
    Ok(None)
}

fn extend<T, F>(
    problem: &mut BoxProblem<T, F>,
    x: &[T],
    d: &[T],
    mut best: Step<T>,
    target_slope: T,
    trial: TrialPoint<'_, T, F>,
) -> Result<Step<T>>
where
    T: Scalar,
    F: FnMut(&[T]) -> Result<(T, Vec<T>)>,
{
    let mut t = T::one();
    for _ in 0..10 {
        t *= T::lit(2.0);
        let z = trial(problem, t);
        if z.iter().zip(x).zip(d).any(|((&zi, &xi), &di)| zi != xi + t * di) {
            break;
        }
        match problem.eval_soft(&z)? {
            Some((fz, gz)) if fz < best.1 => {
                let slope: T = gz.iter().zip(d).map(|(&a, &b)| a * b).sum();
                best = (z, fz, gz);
                if slope >= target_slope {
                    break;
                }
            }
            _ => break,
        }
    }
    Ok(best)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quadratic(c: Vec<f64>) -> impl FnMut(&[f64]) -> Result<(f64, Vec<f64>)> {
        move |z: &[f64]| {
            let g: Vec<f64> = z.iter().zip(&c).map(|(a, b)| a - b).collect();
            Ok((0.5 * g.iter().map(|v| v * v).sum::<f64>(), g))
        }
    }

    #[test]
    fn unbounded_quadratic() {
        let c = vec![1.0, -2.0, 3.5, 0.25];
        let mut prob = BoxProblem::unbounded(4, quadratic(c.clone()));
        let res = minimize(&mut prob, &[0.0; 4], &MinimizeOptions::default()).unwrap();
        assert_eq!(res.status, Status::Converged);
        assert!(res.iterations <= 4 + 5);
        for (a, b) in res.x.iter().zip(&c) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn clamped_quadratic() {
        let c = vec![2.0, -1.0, 0.5];
        let lower = vec![0.0, f64::NEG_INFINITY, f64::NEG_INFINITY];
        let upper = vec![1.0, f64::INFINITY, f64::INFINITY];
        let mut prob = BoxProblem::new(lower, upper, quadratic(c)).unwrap();
        let res = minimize(&mut prob, &[0.0; 3], &MinimizeOptions::default()).unwrap();
        assert_eq!(res.status, Status::Converged);
        assert_eq!(res.x[0], 1.0);
        assert!((res.x[1] + 1.0).abs() < 1e-9);
        assert!((res.x[2] - 0.5).abs() < 1e-9);
    }

    #[test]
    fn rosenbrock() {
        let rosen = |z: &[f64]| {
            let (a, b) = (z[0], z[1]);
            let f = (1.0 - a).powi(2) + 100.0 * (b - a * a).powi(2);
            let g = vec![-2.0 * (1.0 - a) - 400.0 * a * (b - a * a), 200.0 * (b - a * a)];
            Ok((f, g))
        };
        let mut prob = BoxProblem::unbounded(2, rosen);
        let opts = MinimizeOptions {
            grad_tol: 1e-10,
            ..MinimizeOptions::default()
        };
        let res = minimize(&mut prob, &[-1.2, 1.0], &opts).unwrap();
        assert_eq!(res.status, Status::Converged);
        assert!((res.x[0] - 1.0).abs() < 1e-6 && (res.x[1] - 1.0).abs() < 1e-6);
        assert!(res.history.windows(2).all(|w| w[1] <= w[0]));
    }

    #[test]
    fn rejects_start_outside_box() {
        let mut prob = BoxProblem::new(vec![0.0], vec![1.0], quadratic(vec![0.5])).unwrap();
        assert!(minimize(&mut prob, &[2.0], &MinimizeOptions::default()).is_err());
    }

    #[test]
    fn wrong_gradient_surfaces_as_line_search_failure() {
        // Gradient with the wrong sign: no descent step exists along -H g.
        let bad = |z: &[f64]| Ok((0.5 * z[0] * z[0], vec![-z[0]]));
        let mut prob = BoxProblem::unbounded(1, bad);
        let res = minimize(&mut prob, &[1.0], &MinimizeOptions::default()).unwrap();
        assert_eq!(res.status, Status::LineSearchFailure);
    }

    #[test]
    fn out_of_domain_points_are_avoided() {
        // f = x - log x on x > 0; the unit step from x = 10 overshoots into x < 0.
        let f = |z: &[f64]| {
            if z[0] <= 0.0 {
                return Err(Error::NonPositiveDiagonal { index: 0, value: z[0] });
            }
            Ok((z[0] - z[0].ln(), vec![1.0 - 1.0 / z[0]]))
        };
        let mut prob = BoxProblem::unbounded(1, f);
        let res = minimize(&mut prob, &[10.0], &MinimizeOptions::default()).unwrap();
        assert_eq!(res.status, Status::Converged);
        assert!((res.x[0] - 1.0).abs() < 1e-7);
    }
}
