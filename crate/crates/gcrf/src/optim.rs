//! Quasi-Newton ascent for smooth concave-ish objectives.
//!
//! Limited-memory BFGS with a backtracking (Armijo) line search, driven
//! one step at a time so callers can interleave their own bookkeeping
//! (graph pattern refreshes, early stopping on a holdout) between
//! steps. Every accepted step strictly satisfies the sufficient
//! increase condition, so the objective trace is non-decreasing by
//! construction.

use std::collections::VecDeque;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum OptimError {
    #[error("objective is not finite at the initial point")]
    NonFiniteInit,
}

#[derive(Debug, Clone)]
pub struct AscentOptions {
    pub max_iters: usize,
    /// Stop when the Euclidean gradient norm drops to this value.
    pub grad_tol: f64,
    /// Stop after two consecutive steps whose relative objective change
    /// is at most this value. Zero disables the objective test.
    pub obj_tol: f64,
    /// Number of curvature pairs retained.
    pub memory: usize,
    /// Line search gives up when the step factor shrinks below this.
    pub min_step: f64,
}

impl Default for AscentOptions {
    fn default() -> Self {
        Self {
            max_iters: 500,
            grad_tol: 1e-5,
            obj_tol: 1e-6,
            memory: 7,
            min_step: 1e-16,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StepStatus {
    /// Took a step; not converged yet.
    Improved,
    /// Gradient norm at or below `grad_tol` before the step.
    GradientConverged,
    /// Two consecutive steps changed the objective by at most `obj_tol`
    /// relatively.
    ObjectiveConverged,
    /// Line search could not find any ascent step above `min_step`.
    Stalled,
}

#[derive(Debug, Clone)]
pub struct AscentOutcome {
    pub x: Vec<f64>,
    pub objective: f64,
    pub grad_norm: f64,
    /// Objective after the initial evaluation and after every accepted
    /// step; non-decreasing.
    pub trace: Vec<f64>,
    pub iterations: usize,
    /// True when a gradient or objective tolerance triggered, false on
    /// the iteration cap or a stall.
    pub converged: bool,
}

const ARMIJO_C1: f64 = 1e-4;

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|a| a * a).sum::<f64>().sqrt()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Stateful maximizer. Construct with the objective and gradient at the
/// starting point, then call [`Ascent::step`] until it reports anything
/// other than [`StepStatus::Improved`].
pub struct Ascent {
    opts: AscentOptions,
    x: Vec<f64>,
    f: f64,
    g: Vec<f64>,
    /// Curvature pairs `(s, y)` with `s = dx`, `y = -(dg)`; stored in
    /// minimization orientation so the usual two-loop recursion applies.
    pairs: VecDeque<(Vec<f64>, Vec<f64>)>,
    trace: Vec<f64>,
    iterations: usize,
    small_streak: usize,
}

impl Ascent {
    pub fn new(x0: Vec<f64>, f0: f64, g0: Vec<f64>, opts: AscentOptions) -> Result<Self, OptimError> {
        if !f0.is_finite() || g0.iter().any(|v| !v.is_finite()) {
            return Err(OptimError::NonFiniteInit);
        }
        assert_eq!(x0.len(), g0.len(), "gradient length must match point length");
        Ok(Self {
            opts,
            x: x0,
            f: f0,
            g: g0,
            pairs: VecDeque::new(),
            trace: vec![f0],
            iterations: 0,
            small_streak: 0,
        })
    }

    pub fn x(&self) -> &[f64] {
        &self.x
    }

    pub fn objective(&self) -> f64 {
        self.f
    }

    pub fn grad_norm(&self) -> f64 {
        norm(&self.g)
    }

    pub fn trace(&self) -> &[f64] {
        &self.trace
    }

    pub fn iterations(&self) -> usize {
        self.iterations
    }

    /// Replaces the objective surface at the current point, e.g. after
    /// the caller changed a discrete structure the objective depends
    /// on. Curvature pairs are kept: they are approximations anyway,
    /// the step acceptance test runs against the new surface, and the
    /// steepest-ascent fallback in [`Ascent::step`] discards them the
    /// moment they stop producing ascent directions. The trace is not
    /// touched; the caller decides how the switch shows up there.
    pub fn reset_objective(&mut self, f: f64, g: Vec<f64>) -> Result<(), OptimError> {
        if !f.is_finite() || g.iter().any(|v| !v.is_finite()) {
            return Err(OptimError::NonFiniteInit);
        }
        assert_eq!(g.len(), self.x.len(), "gradient length must match point length");
        self.f = f;
        self.g = g;
        self.small_streak = 0;
        Ok(())
    }

    /// Two-loop recursion on the minimization gradient `-g`, returning
    /// an ascent direction.
    fn direction(&self) -> Vec<f64> {
        let n = self.x.len();
        let mut q: Vec<f64> = self.g.iter().map(|v| -v).collect();
        if self.pairs.is_empty() {
            // Steepest ascent, conservatively scaled on the first step.
            let gn = norm(&self.g).max(1.0);
            return self.g.iter().map(|v| v / gn).collect();
        }
        let m = self.pairs.len();
        let mut alpha = vec![0.0; m];
        for (idx, (s, y)) in self.pairs.iter().enumerate().rev() {
            let rho = 1.0 / dot(y, s);
            alpha[idx] = rho * dot(s, &q);
            for i in 0..n {
                q[i] -= alpha[idx] * y[i];
            }
        }
        let (s_last, y_last) = self.pairs.back().expect("nonempty");
        let gamma = dot(s_last, y_last) / dot(y_last, y_last);
        let mut r: Vec<f64> = q.iter().map(|v| v * gamma).collect();
        for (idx, (s, y)) in self.pairs.iter().enumerate() {
            let rho = 1.0 / dot(y, s);
            let beta = rho * dot(y, &r);
            for i in 0..n {
                r[i] += s[i] * (alpha[idx] - beta);
            }
        }
        // Minimization direction is -r; ascent moves the same way
        // because r approximates H^-1 * (-g) for the negated objective.
        r.iter().map(|v| -v).collect()
    }

    pub fn step<F>(&mut self, eval: &mut F) -> StepStatus
    where
        F: FnMut(&[f64]) -> (f64, Vec<f64>),
    {
        if self.grad_norm() <= self.opts.grad_tol {
            return StepStatus::GradientConverged;
        }

        let mut d = self.direction();
        let mut slope = dot(&self.g, &d);
        let mut fell_back = self.pairs.is_empty();
        if slope <= 0.0 {
            // Curvature information points the wrong way; discard it.
            d = self.g.clone();
            slope = dot(&self.g, &d);
            self.pairs.clear();
            fell_back = true;
        }

        let mut t = 1.0;
        loop {
            let x_new: Vec<f64> = self.x.iter().zip(&d).map(|(x, di)| x + t * di).collect();
            let (f_new, g_new) = eval(&x_new);
            let sufficient = f_new.is_finite()
                && g_new.iter().all(|v| v.is_finite())
                && f_new >= self.f + ARMIJO_C1 * t * slope;
            if sufficient {
                let s: Vec<f64> = x_new.iter().zip(&self.x).map(|(a, b)| a - b).collect();
                let y: Vec<f64> = self.g.iter().zip(&g_new).map(|(old, new)| old - new).collect();
                let sy = dot(&s, &y);
                if sy > 1e-12 * norm(&s) * norm(&y) {
                    if self.pairs.len() == self.opts.memory {
                        self.pairs.pop_front();
                    }
                    self.pairs.push_back((s, y));
                }
                let rel_change = (f_new - self.f).abs() / (1.0 + f_new.abs());
                self.x = x_new;
                self.f = f_new;
                self.g = g_new;
                self.trace.push(f_new);
                self.iterations += 1;
                if self.opts.obj_tol > 0.0 && rel_change <= self.opts.obj_tol {
                    self.small_streak += 1;
                    if self.small_streak >= 2 {
                        return StepStatus::ObjectiveConverged;
                    }
                } else {
                    self.small_streak = 0;
                }
                return StepStatus::Improved;
            }
            t *= 0.5;
            if t < self.opts.min_step {
                if fell_back {
                    return StepStatus::Stalled;
                }
                // Retry from scratch along the raw gradient.
                d = self.g.clone();
                slope = dot(&self.g, &d);
                self.pairs.clear();
                fell_back = true;
                t = 1.0;
            }
        }
    }
}

/// Runs [`Ascent`] to termination on a fixed objective.
pub fn maximize<F>(
    eval: &mut F,
    x0: Vec<f64>,
    opts: &AscentOptions,
) -> Result<AscentOutcome, OptimError>
where
    F: FnMut(&[f64]) -> (f64, Vec<f64>),
{
    let (f0, g0) = eval(&x0);
    let mut ascent = Ascent::new(x0, f0, g0, opts.clone())?;
    let mut converged = false;
    while ascent.iterations() < opts.max_iters {
        match ascent.step(eval) {
            StepStatus::Improved => {}
            StepStatus::GradientConverged | StepStatus::ObjectiveConverged => {
                converged = true;
                break;
            }
            StepStatus::Stalled => break,
        }
    }
    Ok(AscentOutcome {
        grad_norm: ascent.grad_norm(),
        objective: ascent.objective(),
        iterations: ascent.iterations(),
        x: ascent.x,
        trace: ascent.trace,
        converged,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    // f(x) = -1/2 (x-a)' A (x-a) for diagonal positive A.
    fn quadratic(a: Vec<f64>, diag: Vec<f64>) -> impl FnMut(&[f64]) -> (f64, Vec<f64>) {
        move |x: &[f64]| {
            let mut f = 0.0;
            let mut g = vec![0.0; x.len()];
            for i in 0..x.len() {
                let d = x[i] - a[i];
                f -= 0.5 * diag[i] * d * d;
                g[i] = -diag[i] * d;
            }
            (f, g)
        }
    }

    #[test]
    fn quadratic_maximum_recovered() {
        let a = vec![1.0, -2.0, 0.5, 3.0];
        let mut eval = quadratic(a.clone(), vec![4.0, 0.5, 2.0, 1.0]);
        let opts = AscentOptions { grad_tol: 1e-9, obj_tol: 0.0, ..Default::default() };
        let out = maximize(&mut eval, vec![0.0; 4], &opts).unwrap();
        assert!(out.converged);
        assert!(out.grad_norm <= 1e-9);
        for (got, want) in out.x.iter().zip(&a) {
            assert_abs_diff_eq!(got, want, epsilon = 1e-7);
        }
    }

    #[test]
    fn negated_rosenbrock_is_solved() {
        // max -[(1-x)^2 + 100 (y - x^2)^2], optimum at (1, 1).
        let mut eval = |x: &[f64]| {
            let (a, b) = (x[0], x[1]);
            let f = -((1.0 - a).powi(2) + 100.0 * (b - a * a).powi(2));
            let gx = 2.0 * (1.0 - a) + 400.0 * a * (b - a * a);
            let gy = -200.0 * (b - a * a);
            (f, vec![gx, gy])
        };
        let opts = AscentOptions { grad_tol: 1e-8, obj_tol: 0.0, max_iters: 2000, ..Default::default() };
        let out = maximize(&mut eval, vec![-1.2, 1.0], &opts).unwrap();
        assert!(out.converged, "grad norm {} after {} iters", out.grad_norm, out.iterations);
        assert_abs_diff_eq!(out.x[0], 1.0, epsilon = 1e-5);
        assert_abs_diff_eq!(out.x[1], 1.0, epsilon = 1e-5);
    }

    #[test]
    fn iteration_cap_reports_not_converged() {
        let mut eval = quadratic(vec![5.0; 6], vec![1e-4, 1.0, 10.0, 0.3, 2.0, 7.0]);
        let opts = AscentOptions { max_iters: 2, grad_tol: 1e-12, obj_tol: 0.0, ..Default::default() };
        let out = maximize(&mut eval, vec![0.0; 6], &opts).unwrap();
        assert!(!out.converged);
        assert_eq!(out.iterations, 2);
    }

    #[test]
    fn reset_objective_moves_to_new_optimum() {
        let mut eval_a = quadratic(vec![2.0, 2.0], vec![1.0, 3.0]);
        let (f0, g0) = eval_a(&[0.0, 0.0]);
        let opts = AscentOptions { grad_tol: 1e-9, obj_tol: 0.0, ..Default::default() };
        let mut ascent = Ascent::new(vec![0.0, 0.0], f0, g0, opts).unwrap();
        for _ in 0..5 {
            ascent.step(&mut eval_a);
        }
        let mut eval_b = quadratic(vec![-1.0, 4.0], vec![2.0, 1.0]);
        let (fb, gb) = eval_b(ascent.x());
        ascent.reset_objective(fb, gb).unwrap();
        while ascent.step(&mut eval_b) == StepStatus::Improved {}
        assert_abs_diff_eq!(ascent.x()[0], -1.0, epsilon = 1e-6);
        assert_abs_diff_eq!(ascent.x()[1], 4.0, epsilon = 1e-6);
    }

    #[test]
    fn non_finite_start_is_rejected() {
        assert!(matches!(
            Ascent::new(vec![0.0], f64::NAN, vec![0.0], AscentOptions::default()),
            Err(OptimError::NonFiniteInit)
        ));
    }

    proptest! {
        // Accepted steps never decrease the objective, whatever the
        // conditioning.
        #[test]
        fn trace_is_monotone(seed in 0u64..200) {
            let mut rng = StdRng::seed_from_u64(seed);
            let n = rng.random_range(1..6);
            let a: Vec<f64> = (0..n).map(|_| rng.random_range(-5.0..5.0)).collect();
            let diag: Vec<f64> = (0..n).map(|_| 10f64.powf(rng.random_range(-3.0..2.0))).collect();
            let x0: Vec<f64> = (0..n).map(|_| rng.random_range(-5.0..5.0)).collect();
            let mut eval = quadratic(a, diag);
            let out = maximize(&mut eval, x0, &AscentOptions::default()).unwrap();
            for w in out.trace.windows(2) {
                prop_assert!(w[1] >= w[0]);
            }
        }
    }
}
