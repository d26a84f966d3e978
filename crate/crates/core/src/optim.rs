//! Deterministic limited-memory BFGS with Armijo backtracking.
//!
//! Every accepted step satisfies the sufficient-decrease condition, so the
//! recorded loss history is non-increasing.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

/// A smooth function with an analytic gradient.
pub trait Objective {
    fn dim(&self) -> usize;

    /// Returns the value at `x` and writes the gradient into `grad`.
    fn value_grad(&self, x: &[f64], grad: &mut [f64]) -> f64;
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LbfgsConfig {
    pub max_iter: usize,
    /// Stop once the Euclidean gradient norm drops to this value.
    pub grad_tol: f64,
    pub memory: usize,
}

impl Default for LbfgsConfig {
    fn default() -> Self {
        Self {
            max_iter: 500,
            grad_tol: 1e-6,
            memory: 10,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Minimum {
    pub x: Vec<f64>,
    pub value: f64,
    pub grad_norm: f64,
    pub iterations: usize,
    pub converged: bool,
    /// Objective value at the start point and after each accepted step.
    pub history: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, thiserror::Error)]
pub enum OptimError {
    #[error("non-finite objective at iteration {iteration}")]
    NonFinite { iteration: usize },
}

const ARMIJO_C1: f64 = 1e-4;
const MAX_BACKTRACKS: usize = 60;

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

pub fn minimize<O: Objective>(
    obj: &O,
    x0: Vec<f64>,
    cfg: &LbfgsConfig,
) -> Result<Minimum, OptimError> {
    let n = obj.dim();
    assert_eq!(x0.len(), n, "start point has the wrong dimension");

    let mut x = x0;
    let mut g = vec![0.0; n];
    let mut f = obj.value_grad(&x, &mut g);
    if !f.is_finite() || g.iter().any(|v| !v.is_finite()) {
        return Err(OptimError::NonFinite { iteration: 0 });
    }
    let mut history = vec![f];
    let mut pairs: VecDeque<(Vec<f64>, Vec<f64>, f64)> = VecDeque::new();
    let mut iterations = 0;
    let mut converged = norm(&g) <= cfg.grad_tol;

    let mut x_new = vec![0.0; n];
    let mut g_new = vec![0.0; n];

    while !converged && iterations < cfg.max_iter {
        iterations += 1;

        // two-loop recursion
        let mut d: Vec<f64> = g.iter().map(|v| -v).collect();
        let mut alphas = Vec::with_capacity(pairs.len());
        for (s, y, rho) in pairs.iter().rev() {
            let a = rho * dot(s, &d);
            for (di, yi) in d.iter_mut().zip(y) {
                *di -= a * yi;
            }
            alphas.push(a);
        }
        let gamma = match pairs.back() {
            Some((s, y, _)) => dot(s, y) / dot(y, y),
            None => 1.0 / norm(&g).max(1.0),
        };
        for di in d.iter_mut() {
            *di *= gamma;
        }
        for ((s, y, rho), a) in pairs.iter().zip(alphas.iter().rev()) {
            let b = rho * dot(y, &d);
            for (di, si) in d.iter_mut().zip(s) {
                *di += (a - b) * si;
            }
        }

        let mut slope = dot(&g, &d);
        if !(slope < 0.0) {
            pairs.clear();
            let scale = 1.0 / norm(&g).max(1.0);
            d = g.iter().map(|v| -v * scale).collect();
            slope = dot(&g, &d);
        }

        let mut step = 1.0;
        let mut accepted = None;
        let mut saw_finite = false;
        for _ in 0..MAX_BACKTRACKS {
            for i in 0..n {
                x_new[i] = x[i] + step * d[i];
            }
            let f_try = obj.value_grad(&x_new, &mut g_new);
            let finite = f_try.is_finite() && g_new.iter().all(|v| v.is_finite());
            saw_finite |= finite;
            if finite && f_try <= f + ARMIJO_C1 * step * slope {
                accepted = Some(f_try);
                break;
            }
            step *= 0.5;
        }

        let Some(f_next) = accepted else {
            if !saw_finite {
                return Err(OptimError::NonFinite {
                    iteration: iterations,
                });
            }
            // no sufficient decrease along the direction: numerically stalled
            iterations -= 1;
            break;
        };

        let s: Vec<f64> = x_new.iter().zip(&x).map(|(a, b)| a - b).collect();
        let y: Vec<f64> = g_new.iter().zip(&g).map(|(a, b)| a - b).collect();
        let sy = dot(&s, &y);
        if sy > 1e-12 * norm(&s) * norm(&y) && sy > 0.0 {
            if pairs.len() == cfg.memory {
                pairs.pop_front();
            }
            pairs.push_back((s, y, 1.0 / sy));
        }

        std::mem::swap(&mut x, &mut x_new);
        std::mem::swap(&mut g, &mut g_new);
        f = f_next;
        history.push(f);
        converged = norm(&g) <= cfg.grad_tol;
    }

    Ok(Minimum {
        grad_norm: norm(&g),
        x,
        value: f,
        iterations,
        converged,
        history,
    })
}
