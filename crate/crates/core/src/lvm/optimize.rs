//! Monotone quasi-Newton ascent with backtracking line search.
//!
//! Directions come from limited-memory BFGS; every accepted step satisfies
//! the Armijo condition, so the objective history is non-decreasing. A point
//! where the objective cannot be evaluated (e.g. a kernel matrix that fails
//! to factorize) is treated as a rejected trial and the step is halved.

use std::collections::VecDeque;

use crate::error::{Error, Result};

const MEMORY: usize = 10;
const ARMIJO: f64 = 1e-4;
const MAX_BACKTRACKS: usize = 50;

pub(crate) struct AscentResult {
    pub theta: Vec<f64>,
    /// Objective after initialization and after every accepted step.
    pub history: Vec<f64>,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Component-wise clipping of a unit step along `dir`: coordinates pinned at
/// a bound and pushing outward are dropped.
fn effective<P: Fn(&mut [f64])>(theta: &[f64], mut dir: Vec<f64>, project: &P) -> Vec<f64> {
    let mut probe: Vec<f64> = theta.iter().zip(&dir).map(|(t, d)| t + 1e-8 * d).collect();
    project(&mut probe);
    for ((d, p), t) in dir.iter_mut().zip(&probe).zip(theta) {
        if *p == *t && *d != 0.0 {
            *d = 0.0;
        }
    }
    dir
}

/// Maximizes `eval` starting from `theta`. `project` is applied to every trial point.
pub(crate) fn maximize<F, P>(mut theta: Vec<f64>, iterations: usize, mut eval: F, project: P) -> Result<AscentResult>
where
    F: FnMut(&[f64]) -> Result<(f64, Vec<f64>)>,
    P: Fn(&mut [f64]),
{
    project(&mut theta);
    let (mut f, mut grad) = eval(&theta)?;
    if !f.is_finite() {
        return Err(Error::NonFiniteObjective);
    }
    let mut history = vec![f];
    let mut memory: VecDeque<(Vec<f64>, Vec<f64>, f64)> = VecDeque::new();

    for _ in 0..iterations {
        let gnorm = dot(&grad, &grad).sqrt();
        if gnorm < 1e-10 {
            break;
        }
        // two-loop recursion on the minimization problem (-f, -grad)
        let mut q: Vec<f64> = grad.iter().map(|g| -g).collect();
        let mut alphas = Vec::with_capacity(memory.len());
        for (s, y, rho) in memory.iter().rev() {
            let a = rho * dot(s, &q);
            for (qi, yi) in q.iter_mut().zip(y) {
                *qi -= a * yi;
            }
            alphas.push(a);
        }
        let scale = memory
            .back()
            .map(|(s, y, _)| dot(s, y) / dot(y, y))
            .unwrap_or(1.0 / gnorm);
        for qi in q.iter_mut() {
            *qi *= scale;
        }
        for ((s, y, rho), a) in memory.iter().zip(alphas.into_iter().rev()) {
            let b = rho * dot(y, &q);
            for (qi, si) in q.iter_mut().zip(s) {
                *qi += (a - b) * si;
            }
        }
        // ascent direction, restricted to what survives the projection
        let mut dir = effective(&theta, q.iter().map(|v| -v).collect(), &project);
        let mut slope = dot(&grad, &dir);
        if !(slope > 0.0) {
            memory.clear();
            dir = effective(&theta, grad.iter().map(|g| g / gnorm).collect(), &project);
            slope = dot(&grad, &dir);
            if !(slope > 0.0) {
                break;
            }
        }
        let fresh = memory.is_empty();

        let mut step = 1.0;
        let mut accepted = None;
        for _ in 0..MAX_BACKTRACKS {
            let mut trial: Vec<f64> = theta.iter().zip(&dir).map(|(t, d)| t + step * d).collect();
            project(&mut trial);
            if let Ok((ft, gt)) = eval(&trial) {
                if ft.is_finite() && ft >= f + ARMIJO * step * slope && ft > f {
                    accepted = Some((trial, ft, gt));
                    break;
                }
            }
            step *= 0.5;
        }
        let Some((trial, ft, gt)) = accepted else {
            if memory.is_empty() {
                break;
            }
            memory.clear();
            continue;
        };

        let s: Vec<f64> = trial.iter().zip(&theta).map(|(a, b)| a - b).collect();
        // gradient of the minimized function is -grad
        let y: Vec<f64> = grad.iter().zip(&gt).map(|(g0, g1)| g0 - g1).collect();
        let sy = dot(&s, &y);
        if sy > 1e-12 * dot(&s, &s).sqrt() * dot(&y, &y).sqrt() && sy > 0.0 {
            if memory.len() == MEMORY {
                memory.pop_front();
            }
            memory.push_back((s, y, 1.0 / sy));
        }
        let improvement = ft - f;
        theta = trial;
        f = ft;
        grad = gt;
        history.push(f);
        if improvement < 1e-12 * (1.0 + f.abs()) {
            if fresh {
                break;
            }
            memory.clear();
        }
    }
    Ok(AscentResult { theta, history })
}
