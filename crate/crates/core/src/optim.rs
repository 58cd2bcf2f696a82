//! Smooth unconstrained minimization (limited-memory quasi-Newton with a
//! strong Wolfe line search) and a stochastic subgradient driver.

use crate::error::{Error, Result};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use std::collections::VecDeque;

/// A differentiable objective: value and gradient at any point.
pub trait SmoothProblem: Sync {
    fn dim(&self) -> usize;
    fn eval(&self, x: &[f64]) -> Result<(f64, Vec<f64>)>;
}

impl<F> SmoothProblem for (usize, F)
where
    F: Fn(&[f64]) -> (f64, Vec<f64>) + Sync,
{
    fn dim(&self) -> usize {
        self.0
    }
    fn eval(&self, x: &[f64]) -> Result<(f64, Vec<f64>)> {
        Ok(self.1(x))
    }
}

#[derive(Debug, Clone)]
pub struct OptimizerConfig {
    /// History pairs kept for the inverse-Hessian approximation.
    pub memory: usize,
    pub max_iterations: usize,
    /// Stop when the gradient norm falls below tolerance * max(1, |g0|).
    pub tolerance: f64,
    /// Sufficient-decrease constant (c1) of the Wolfe conditions.
    pub sufficient_decrease: f64,
    /// Curvature constant (c2) of the Wolfe conditions.
    pub curvature: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            memory: 10,
            max_iterations: 500,
            tolerance: 1e-6,
            sufficient_decrease: 1e-4,
            curvature: 0.9,
        }
    }
}

impl OptimizerConfig {
    fn validate(&self) -> Result<()> {
        if !(self.sufficient_decrease > 0.0
            && self.sufficient_decrease < self.curvature
            && self.curvature < 1.0)
        {
            return Err(Error::InvalidConfig(format!(
                "need 0 < decrease ({}) < curvature ({}) < 1",
                self.sufficient_decrease, self.curvature
            )));
        }
        if self.memory == 0 || self.max_iterations == 0 {
            return Err(Error::InvalidConfig(
                "memory and max_iterations must be positive".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OptimStatus {
    Converged,
    MaxIterations,
}

#[derive(Debug, Clone)]
pub struct Minimum {
    pub point: Vec<f64>,
    pub value: f64,
    pub iterations: usize,
    pub status: OptimStatus,
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

fn check_finite(value: f64, grad: &[f64], x: &[f64]) -> Result<()> {
    if !value.is_finite() || grad.iter().any(|g| !g.is_finite()) {
        return Err(Error::NonFinite { point: x.to_vec() });
    }
    Ok(())
}

/// Minimize a smooth problem from `x0`.
///
/// Returns the first iterate whose gradient norm is within tolerance, or the
/// best iterate seen when the iteration cap is reached. The value sequence of
/// accepted iterates is non-increasing (the line search enforces sufficient
/// decrease).
pub fn minimize(problem: &dyn SmoothProblem, x0: &[f64], cfg: &OptimizerConfig) -> Result<Minimum> {
    cfg.validate()?;
    if x0.len() != problem.dim() {
        return Err(Error::Dimension(format!(
            "x0 has {} entries, problem dimension is {}",
            x0.len(),
            problem.dim()
        )));
    }

    let mut x = x0.to_vec();
    let (mut f, mut g) = problem.eval(&x)?;
    check_finite(f, &g, &x)?;
    let g0_norm = norm(&g);
    let tol = cfg.tolerance * g0_norm.max(1.0);

    let mut history: VecDeque<(Vec<f64>, Vec<f64>, f64)> = VecDeque::new(); // (s, y, rho)
    let mut iterations = 0usize;

    while iterations < cfg.max_iterations {
        if norm(&g) <= tol {
            return Ok(Minimum {
                point: x,
                value: f,
                iterations,
                status: OptimStatus::Converged,
            });
        }
        iterations += 1;

        // two-loop recursion for the search direction
        let mut q = g.clone();
        let mut alphas = Vec::with_capacity(history.len());
        for (s, yv, rho) in history.iter().rev() {
            let alpha = rho * dot(s, &q);
            for (qi, yi) in q.iter_mut().zip(yv) {
                *qi -= alpha * yi;
            }
            alphas.push(alpha);
        }
        if let Some((s, yv, _)) = history.back() {
            let gamma = dot(s, yv) / dot(yv, yv);
            for qi in q.iter_mut() {
                *qi *= gamma;
            }
        }
        for ((s, yv, rho), alpha) in history.iter().zip(alphas.into_iter().rev()) {
            let beta = rho * dot(yv, &q);
            for (qi, si) in q.iter_mut().zip(s) {
                *qi += (alpha - beta) * si;
            }
        }
        let mut direction: Vec<f64> = q.iter().map(|v| -v).collect();
        let mut dg = dot(&direction, &g);
        if dg >= 0.0 {
            // not a descent direction; reset to steepest descent
            history.clear();
            direction = g.iter().map(|v| -v).collect();
            dg = dot(&direction, &g);
        }

        let initial_step = if history.is_empty() {
            (1.0 / norm(&g).max(1e-12)).min(1.0)
        } else {
            1.0
        };

        let ls = line_search_strong_wolfe(problem, &x, f, &g, &direction, dg, initial_step, cfg);
        let (step, f_new, g_new) = match ls {
            Ok(found) => found,
            Err(_) => {
                // fall back to backtracking steepest descent
                history.clear();
                direction = g.iter().map(|v| -v).collect();
                dg = dot(&direction, &g);
                backtracking(problem, &x, f, &direction, dg, cfg)?
            }
        };

        let mut s = vec![0.0; x.len()];
        for ((si, di), _) in s.iter_mut().zip(&direction).zip(0..) {
            *si = step * di;
        }
        let mut x_new = x.clone();
        for (xi, si) in x_new.iter_mut().zip(&s) {
            *xi += si;
        }
        let yv: Vec<f64> = g_new.iter().zip(&g).map(|(a, b)| a - b).collect();
        let sy = dot(&s, &yv);
        if sy > 1e-12 * norm(&s) * norm(&yv) {
            let rho = 1.0 / sy;
            if history.len() == cfg.memory {
                history.pop_front();
            }
            history.push_back((s, yv, rho));
        }
        x = x_new;
        f = f_new;
        g = g_new;
    }

    let status = if norm(&g) <= tol {
        OptimStatus::Converged
    } else {
        OptimStatus::MaxIterations
    };
    Ok(Minimum {
        point: x,
        value: f,
        iterations,
        status,
    })
}

/// Strong Wolfe line search (bracket then zoom with cubic interpolation).
fn line_search_strong_wolfe(
    problem: &dyn SmoothProblem,
    x: &[f64],
    f0: f64,
    _g0: &[f64],
    direction: &[f64],
    dg0: f64,
    initial_step: f64,
    cfg: &OptimizerConfig,
) -> Result<(f64, f64, Vec<f64>)> {
    let c1 = cfg.sufficient_decrease;
    let c2 = cfg.curvature;
    let max_extrapolations = 30;

    let phi = |alpha: f64| -> Result<(f64, Vec<f64>, f64)> {
        let trial: Vec<f64> = x
            .iter()
            .zip(direction)
            .map(|(xi, di)| xi + alpha * di)
            .collect();
        let (fv, gv) = problem.eval(&trial)?;
        check_finite(fv, &gv, &trial)?;
        let d = dot(&gv, direction);
        Ok((fv, gv, d))
    };

    let mut alpha_prev = 0.0;
    let mut f_prev = f0;
    let mut d_prev = dg0;
    let mut alpha = initial_step;

    for i in 0..max_extrapolations {
        let (fa, ga, da) = phi(alpha)?;
        if fa > f0 + c1 * alpha * dg0 || (i > 0 && fa >= f_prev) {
            return zoom(
                &phi, f0, dg0, c1, c2, alpha_prev, f_prev, d_prev, alpha, fa, da,
            );
        }
        if da.abs() <= -c2 * dg0 {
            return Ok((alpha, fa, ga));
        }
        if da >= 0.0 {
            return zoom(&phi, f0, dg0, c1, c2, alpha, fa, da, alpha_prev, f_prev, d_prev);
        }
        alpha_prev = alpha;
        f_prev = fa;
        d_prev = da;
        alpha *= 2.0;
    }
    Err(Error::Optimizer("line search failed to bracket".into()))
}

#[allow(clippy::too_many_arguments)]
fn zoom(
    phi: &dyn Fn(f64) -> Result<(f64, Vec<f64>, f64)>,
    f0: f64,
    dg0: f64,
    c1: f64,
    c2: f64,
    mut lo: f64,
    mut f_lo: f64,
    mut d_lo: f64,
    mut hi: f64,
    mut f_hi: f64,
    mut d_hi: f64,
) -> Result<(f64, f64, Vec<f64>)> {
    for _ in 0..40 {
        let alpha = cubic_interpolate(lo, f_lo, d_lo, hi, f_hi, d_hi);
        let (fa, ga, da) = phi(alpha)?;
        if fa > f0 + c1 * alpha * dg0 || fa >= f_lo {
            hi = alpha;
            f_hi = fa;
            d_hi = da;
        } else {
            if da.abs() <= -c2 * dg0 {
                return Ok((alpha, fa, ga));
            }
            if da * (hi - lo) >= 0.0 {
                hi = lo;
                f_hi = f_lo;
                d_hi = d_lo;
            }
            lo = alpha;
            f_lo = fa;
            d_lo = da;
        }
        if (hi - lo).abs() < 1e-14 * lo.abs().max(1.0) {
            break;
        }
    }
    Err(Error::Optimizer("zoom failed to satisfy Wolfe conditions".into()))
}

/// Minimizer of the cubic through (a, fa, da) and (b, fb, db), clamped to the
/// interior of the bracket.
fn cubic_interpolate(a: f64, fa: f64, da: f64, b: f64, fb: f64, db: f64) -> f64 {
    let (lo, hi) = if a < b { (a, b) } else { (b, a) };
    let d1 = da + db - 3.0 * (fa - fb) / (a - b);
    let disc = d1 * d1 - da * db;
    let candidate = if disc >= 0.0 {
        let d2 = disc.sqrt() * (b - a).signum();
        b - (b - a) * ((db + d2 - d1) / (db - da + 2.0 * d2))
    } else {
        0.5 * (lo + hi)
    };
    // keep strictly inside the bracket
    let margin = 0.05 * (hi - lo);
    if !candidate.is_finite() || candidate <= lo + margin || candidate >= hi - margin {
        0.5 * (lo + hi)
    } else {
        candidate
    }
}

fn backtracking(
    problem: &dyn SmoothProblem,
    x: &[f64],
    f0: f64,
    direction: &[f64],
    dg0: f64,
    cfg: &OptimizerConfig,
) -> Result<(f64, f64, Vec<f64>)> {
    let mut alpha = 1.0;
    for _ in 0..60 {
        let trial: Vec<f64> = x
            .iter()
            .zip(direction)
            .map(|(xi, di)| xi + alpha * di)
            .collect();
        let (fv, gv) = problem.eval(&trial)?;
        check_finite(fv, &gv, &trial)?;
        if fv <= f0 + cfg.sufficient_decrease * alpha * dg0 {
            return Ok((alpha, fv, gv));
        }
        alpha *= 0.5;
    }
    Err(Error::Optimizer(
        "backtracking could not find a decreasing step".into(),
    ))
}

/// Per-example subgradient source for the stochastic driver.
pub trait SubgradientOracle: Sync {
    fn dim(&self) -> usize;
    fn n_examples(&self) -> usize;
    /// Subgradient contribution of one example at `x`.
    fn subgradient(&self, example: usize, x: &[f64]) -> Result<Vec<f64>>;
}

/// Positive, non-increasing step schedule.
#[derive(Debug, Clone, Copy)]
pub enum StepSchedule {
    Constant(f64),
    /// alpha_t = alpha0 / (1 + t / tau)
    Decay { alpha0: f64, tau: f64 },
}

impl StepSchedule {
    pub fn at(&self, t: usize) -> f64 {
        match *self {
            StepSchedule::Constant(a) => a,
            StepSchedule::Decay { alpha0, tau } => alpha0 / (1.0 + t as f64 / tau),
        }
    }

    fn validate(&self) -> Result<()> {
        let ok = match *self {
            StepSchedule::Constant(a) => a > 0.0,
            StepSchedule::Decay { alpha0, tau } => alpha0 > 0.0 && tau > 0.0,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidConfig("step schedule must be positive".into()))
        }
    }
}

/// Stochastic subgradient descent: examples shuffled each epoch by a seeded
/// generator; returns the average iterate over the final epoch.
pub fn subgradient_descent(
    oracle: &dyn SubgradientOracle,
    x0: &[f64],
    epochs: usize,
    schedule: StepSchedule,
    seed: u64,
) -> Result<Vec<f64>> {
    schedule.validate()?;
    if x0.len() != oracle.dim() {
        return Err(Error::Dimension(format!(
            "x0 has {} entries, oracle dimension is {}",
            x0.len(),
            oracle.dim()
        )));
    }
    let n = oracle.n_examples();
    if n == 0 || epochs == 0 {
        return Ok(x0.to_vec());
    }
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let mut x = x0.to_vec();
    let mut order: Vec<usize> = (0..n).collect();
    let mut step_index = 0usize;
    let mut final_epoch_sum = vec![0.0; x.len()];

    for epoch in 0..epochs {
        order.shuffle(&mut rng);
        let last = epoch + 1 == epochs;
        for &idx in &order {
            let g = oracle.subgradient(idx, &x)?;
            if g.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite { point: x.clone() });
            }
            let alpha = schedule.at(step_index);
            step_index += 1;
            for (xi, gi) in x.iter_mut().zip(&g) {
                *xi -= alpha * gi;
            }
            if last {
                for (si, xi) in final_epoch_sum.iter_mut().zip(&x) {
                    *si += xi;
                }
            }
        }
    }
    let scale = 1.0 / n as f64;
    Ok(final_epoch_sum.into_iter().map(|v| v * scale).collect())
}

/// Maximum relative error between the analytic gradient and central finite
/// differences at `x`, over all coordinates. Step per coordinate is
/// `base_step * (1 + |x_i|)`.
pub fn gradient_check(problem: &dyn SmoothProblem, x: &[f64], base_step: f64) -> Result<f64> {
    let (_, g) = problem.eval(x)?;
    let mut worst: f64 = 0.0;
    let mut xp = x.to_vec();
    for i in 0..x.len() {
        let h = base_step * (1.0 + x[i].abs());
        xp[i] = x[i] + h;
        let (fp, _) = problem.eval(&xp)?;
        xp[i] = x[i] - h;
        let (fm, _) = problem.eval(&xp)?;
        xp[i] = x[i];
        let numeric = (fp - fm) / (2.0 * h);
        let denom = g[i].abs().max(numeric.abs()).max(1.0);
        worst = worst.max((g[i] - numeric).abs() / denom);
    }
    Ok(worst)
}
