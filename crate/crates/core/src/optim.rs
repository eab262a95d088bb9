//! Limited-memory BFGS ascent with Armijo backtracking. Only steps that do not
//! decrease the objective are accepted, so the recorded trace is monotone.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct OptimOptions {
    pub max_iters: usize,
    pub history: usize,
    pub grad_tol: f64,
    /// Stop after three consecutive steps improving by less than `f_tol·(1 + |f|)`.
    pub f_tol: f64,
    pub armijo: f64,
    pub max_backtracks: usize,
    /// Largest allowed change of any single coordinate per step.
    pub max_step: f64,
}

impl Default for OptimOptions {
    fn default() -> Self {
        Self {
            max_iters: 200,
            history: 10,
            grad_tol: 1e-8,
            f_tol: 1e-11,
            armijo: 1e-4,
            max_backtracks: 40,
            max_step: 2.0,
        }
    }
}

impl OptimOptions {
    pub fn with_iters(max_iters: usize) -> Self {
        Self {
            max_iters,
            ..Self::default()
        }
    }
}

#[derive(Clone, Debug)]
pub struct OptimResult {
    pub x: Vec<f64>,
    pub value: f64,
    pub grad: Vec<f64>,
    /// Objective at the start and after every accepted step.
    pub trace: Vec<f64>,
    pub iters: usize,
    pub converged: bool,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn inf_norm(a: &[f64]) -> f64 {
    a.iter().fold(0.0f64, |m, v| m.max(v.abs()))
}

/// Maximizes `f`, which returns the objective and its gradient.
pub fn maximize<F>(mut f: F, x0: Vec<f64>, opts: &OptimOptions) -> Result<OptimResult>
where
    F: FnMut(&[f64]) -> Result<(f64, Vec<f64>)>,
{
    let (mut fx, mut g) = f(&x0)?;
    if !fx.is_finite() || g.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("objective at initial point".into()));
    }
    if g.len() != x0.len() {
        return Err(Error::dims("gradient vs parameters", g.len(), x0.len()));
    }
    let mut x = x0;
    let mut trace = vec![fx];
    let mut mem: VecDeque<(Vec<f64>, Vec<f64>, f64)> = VecDeque::new();
    let mut small_steps = 0;
    let mut converged = false;
    let mut iters = 0;

    while iters < opts.max_iters {
        if inf_norm(&g) < opts.grad_tol {
            converged = true;
            break;
        }
        iters += 1;

        // Two-loop recursion: d = H g with H the inverse-Hessian estimate of -f.
        let mut d = g.clone();
        let mut alphas = Vec::with_capacity(mem.len());
        for (s, y, rho) in mem.iter().rev() {
            let a = rho * dot(s, &d);
            d.iter_mut().zip(y).for_each(|(di, yi)| *di -= a * yi);
            alphas.push(a);
        }
        if let Some((s, y, _)) = mem.back() {
            let gamma = dot(s, y) / dot(y, y);
            d.iter_mut().for_each(|di| *di *= gamma);
        }
        for ((s, y, rho), a) in mem.iter().zip(alphas.iter().rev()) {
            let b = rho * dot(y, &d);
            d.iter_mut().zip(s).for_each(|(di, si)| *di += (a - b) * si);
        }
        let mut slope = dot(&g, &d);
        if mem.is_empty() || !(slope > 0.0) || d.iter().any(|v| !v.is_finite()) {
            mem.clear();
            let scale = 1.0 / inf_norm(&g).max(1.0);
            d = g.iter().map(|v| v * scale).collect();
            slope = dot(&g, &d);
        }
        let dmax = inf_norm(&d);
        let mut step = if dmax > opts.max_step { opts.max_step / dmax } else { 1.0 };

        let mut accepted = None;
        for _ in 0..opts.max_backtracks {
            let xn: Vec<f64> = x.iter().zip(&d).map(|(xi, di)| xi + step * di).collect();
            if let Ok((fn_, gn)) = f(&xn) {
                if fn_.is_finite()
                    && gn.iter().all(|v| v.is_finite())
                    && fn_ >= fx + opts.armijo * step * slope
                    && fn_ >= fx
                {
                    accepted = Some((xn, fn_, gn));
                    break;
                }
            }
            step *= 0.5;
        }
        let Some((xn, fn_, gn)) = accepted else {
            if mem.is_empty() {
                converged = true;
                break;
            }
            mem.clear();
            continue;
        };

        // Curvature pair for the minimization of -f.
        let s: Vec<f64> = xn.iter().zip(&x).map(|(a, b)| a - b).collect();
        let y: Vec<f64> = g.iter().zip(&gn).map(|(a, b)| a - b).collect();
        let sy = dot(&s, &y);
        if sy > 1e-12 * dot(&s, &s).sqrt() * dot(&y, &y).sqrt() && sy > 0.0 {
            mem.push_back((s, y, 1.0 / sy));
            if mem.len() > opts.history {
                mem.pop_front();
            }
        }

        let improvement = fn_ - fx;
        x = xn;
        fx = fn_;
        g = gn;
        trace.push(fx);
        if improvement < opts.f_tol * (1.0 + fx.abs()) {
            small_steps += 1;
            if small_steps >= 3 {
                converged = true;
                break;
            }
        } else {
            small_steps = 0;
        }
    }
    Ok(OptimResult {
        x,
        value: fx,
        grad: g,
        trace,
        iters,
        converged,
    })
}
