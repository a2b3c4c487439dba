//! Exact control-as-inference on small finite state spaces.
//!
//! The desirability recursion, the optimal controlled transitions, and the
//! trajectory posterior are computed exactly here so that the sampling-based
//! planner and the path-integral cascade can be checked against them.

use nalgebra::{DMatrix, DVector};
use rand::Rng;

use crate::error::{Error, Result};

/// A discrete-time, finite-state KL-control problem with `K` passive
/// transition matrices and `K + 1` state-cost vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct FiniteKLMDP {
    /// `transitions[k][(x, x')] = p_k(x'|x)`, k = 0..K-1
    pub transitions: Vec<DMatrix<f64>>,
    /// `costs[k][x] = q_k(x)`, k = 0..K; may be `+inf`
    pub costs: Vec<DVector<f64>>,
}

impl FiniteKLMDP {
    pub fn new(transitions: Vec<DMatrix<f64>>, costs: Vec<DVector<f64>>) -> Result<Self> {
        if transitions.is_empty() || costs.len() != transitions.len() + 1 {
            return Err(Error::invalid("need K >= 1 transition matrices and K + 1 cost vectors"));
        }
        let s = costs[0].len();
        for p in &transitions {
            if p.nrows() != s || p.ncols() != s {
                return Err(Error::invalid("transition matrices must be S x S"));
            }
            for row in p.row_iter() {
                if row.iter().any(|v| !(*v >= 0.0)) || (row.sum() - 1.0).abs() > 1e-12 {
                    return Err(Error::invalid("transition rows must be stochastic"));
                }
            }
        }
        if costs.iter().any(|q| q.len() != s || q.iter().any(|v| !(*v >= 0.0))) {
            return Err(Error::invalid("costs must be non-negative with one entry per state"));
        }
        Ok(Self { transitions, costs })
    }

    /// Random instance: Dirichlet-like rows, costs uniform in `[0, max_cost)`.
    pub fn random<R: Rng + ?Sized>(states: usize, horizon: usize, max_cost: f64, rng: &mut R) -> Self {
        let transitions = (0..horizon)
            .map(|_| {
                let mut p = DMatrix::from_fn(states, states, |_, _| -rng.random::<f64>().max(1e-300).ln());
                for mut row in p.row_iter_mut() {
                    let s = row.sum();
                    row /= s;
                }
                p
            })
            .collect();
        let costs = (0..=horizon)
            .map(|_| DVector::from_fn(states, |_, _| max_cost * rng.random::<f64>()))
            .collect();
        Self { transitions, costs }
    }

    pub fn states(&self) -> usize {
        self.costs[0].len()
    }

    pub fn horizon(&self) -> usize {
        self.transitions.len()
    }
}

/// `z_k(x) = exp(-v_k(x))` for k = 0..K.
#[derive(Debug, Clone, PartialEq)]
pub struct DesirabilityTable {
    pub z: Vec<DVector<f64>>,
}

impl DesirabilityTable {
    /// Value function `v_k = -log z_k`.
    pub fn value(&self, k: usize) -> DVector<f64> {
        self.z[k].map(|z| -z.ln())
    }
}

fn exp_neg(q: &DVector<f64>) -> DVector<f64> {
    q.map(|v| (-v).exp())
}

/// Backward recursion `z_K = exp(-q_K)`, `z_k = exp(-q_k) * G[z_{k+1}]`.
pub fn desirability(mdp: &FiniteKLMDP) -> DesirabilityTable {
    let k = mdp.horizon();
    let mut z = vec![DVector::zeros(mdp.states()); k + 1];
    z[k] = exp_neg(&mdp.costs[k]);
    for t in (0..k).rev() {
        let next = &mdp.transitions[t] * &z[t + 1];
        z[t] = exp_neg(&mdp.costs[t]).component_mul(&next);
    }
    DesirabilityTable { z }
}

/// [`desirability`], failing when the start state cannot reach any finite-cost trajectory.
pub fn solve_desirability(mdp: &FiniteKLMDP, start: usize) -> Result<DesirabilityTable> {
    let table = desirability(mdp);
    if table.z[0][start] == 0.0 {
        return Err(Error::AllZeroDesirability);
    }
    Ok(table)
}

/// Row `x` of the optimal transition at step `k`: `p_k(x'|x) z_{k+1}(x') / G[z_{k+1}](x)`.
pub fn optimal_transition(mdp: &FiniteKLMDP, z: &DesirabilityTable, k: usize, x: usize) -> Result<DVector<f64>> {
    let p = mdp.transitions[k].row(x).transpose();
    let weighted = p.component_mul(&z.z[k + 1]);
    let g = weighted.sum();
    if !(g > 0.0) {
        return Err(Error::DeadEndState { step: k, state: x });
    }
    Ok(weighted / g)
}

/// Optimal transition matrices for k = 0..K-1. Rows of dead-end states (never
/// entered under the optimal policy) keep the passive transition.
pub fn optimal_policy(mdp: &FiniteKLMDP, z: &DesirabilityTable) -> Vec<DMatrix<f64>> {
    (0..mdp.horizon())
        .map(|k| {
            let mut pi = mdp.transitions[k].clone();
            for x in 0..mdp.states() {
                if let Ok(row) = optimal_transition(mdp, z, k, x) {
                    pi.set_row(x, &row.transpose());
                }
            }
            pi
        })
        .collect()
}

fn kl_rows(pi: &DMatrix<f64>, p: &DMatrix<f64>, x: usize) -> f64 {
    let mut kl = 0.0;
    for j in 0..pi.ncols() {
        let a = pi[(x, j)];
        if a > 0.0 {
            let b = p[(x, j)];
            if b == 0.0 {
                return f64::INFINITY;
            }
            kl += a * (a / b).ln();
        }
    }
    kl
}

/// Expected total cost `E[q_K(x_K) + sum_k q_k(x_k) + KL(pi_k || p_k)]` from `x0`.
pub fn expected_cost(mdp: &FiniteKLMDP, policy: &[DMatrix<f64>], x0: usize) -> f64 {
    let s = mdp.states();
    let mut dist = DVector::zeros(s);
    dist[x0] = 1.0;
    let mut total = 0.0;
    for (k, pi) in policy.iter().enumerate() {
        for x in 0..s {
            if dist[x] > 0.0 {
                total += dist[x] * (mdp.costs[k][x] + kl_rows(pi, &mdp.transitions[k], x));
            }
        }
        dist = pi.transpose() * dist;
    }
    let k = mdp.horizon();
    for x in 0..s {
        if dist[x] > 0.0 {
            total += dist[x] * mdp.costs[k][x];
        }
    }
    total
}

/// All `S^K` trajectories `x_{1:K}` in lexicographic order.
pub fn enumerate_paths(states: usize, horizon: usize) -> Vec<Vec<usize>> {
    let total = states.pow(horizon as u32);
    (0..total)
        .map(|mut code| {
            let mut path = vec![0; horizon];
            for slot in path.iter_mut().rev() {
                *slot = code % states;
                code /= states;
            }
            path
        })
        .collect()
}

/// Normalized posterior over `x_{1:K}` given `x_0`, aligned with [`enumerate_paths`]:
/// `∝ exp(-q_K(x_K)) prod_k exp(-q_k(x_k)) p_k(x_{k+1}|x_k)`.
pub fn trajectory_posterior(mdp: &FiniteKLMDP, x0: usize) -> Result<Vec<f64>> {
    let paths = enumerate_paths(mdp.states(), mdp.horizon());
    let mut w: Vec<f64> = paths
        .iter()
        .map(|path| {
            let mut prev = x0;
            let mut v = (-mdp.costs[0][x0]).exp();
            for (k, &x) in path.iter().enumerate() {
                v *= mdp.transitions[k][(prev, x)] * (-mdp.costs[k + 1][x]).exp();
                prev = x;
            }
            v
        })
        .collect();
    let total: f64 = w.iter().sum();
    if !(total > 0.0) {
        return Err(Error::AllZeroDesirability);
    }
    w.iter_mut().for_each(|v| *v /= total);
    Ok(w)
}

/// Law of `x_{1:K}` under a Markov chain, aligned with [`enumerate_paths`].
pub fn chain_law(policy: &[DMatrix<f64>], x0: usize) -> Vec<f64> {
    let s = policy[0].nrows();
    enumerate_paths(s, policy.len())
        .iter()
        .map(|path| {
            let mut prev = x0;
            path.iter()
                .enumerate()
                .map(|(k, &x)| {
                    let p = policy[k][(prev, x)];
                    prev = x;
                    p
                })
                .product()
        })
        .collect()
}

/// Exact Viterbi over a layered graph.
///
/// `emissions[k][i]` is the log score of node `i` at layer `k`;
/// `transitions[k][(j, i)]` the log score of moving from node `j` at layer `k`
/// to node `i` at layer `k + 1`. Ties go to the lowest index, both when
/// choosing a predecessor and the final node.
pub fn exact_trellis_viterbi(emissions: &[DVector<f64>], transitions: &[DMatrix<f64>]) -> Result<(Vec<usize>, f64)> {
    if emissions.is_empty() || transitions.len() + 1 != emissions.len() {
        return Err(Error::invalid("need one transition block between consecutive layers"));
    }
    let mut delta = emissions[0].clone();
    let mut back: Vec<Vec<usize>> = Vec::with_capacity(transitions.len());
    for (k, t) in transitions.iter().enumerate() {
        let next = &emissions[k + 1];
        let mut nd = DVector::from_element(next.len(), f64::NEG_INFINITY);
        let mut ptr = vec![0; next.len()];
        for i in 0..next.len() {
            let mut best = f64::NEG_INFINITY;
            let mut arg = 0;
            for j in 0..delta.len() {
                let v = delta[j] + t[(j, i)];
                if v > best {
                    best = v;
                    arg = j;
                }
            }
            nd[i] = best + next[i];
            ptr[i] = arg;
        }
        delta = nd;
        back.push(ptr);
    }
    let (mut last, mut score) = (0, f64::NEG_INFINITY);
    for (i, &v) in delta.iter().enumerate() {
        if v > score {
            score = v;
            last = i;
        }
    }
    if score == f64::NEG_INFINITY {
        return Err(Error::NoFeasiblePath);
    }
    let mut path = vec![last];
    for ptr in back.iter().rev() {
        last = ptr[last];
        path.push(last);
    }
    path.reverse();
    Ok((path, score))
}

/// Residuals of the exact identities on one random instance.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DualityReport {
    pub states: usize,
    pub horizon: usize,
    /// max |posterior - optimal chain law| over all trajectories
    pub posterior_vs_policy: f64,
    /// |-log z_0(x0) - expected cost under the optimal policy|
    pub value_vs_cost: f64,
    /// |MAP posterior log-score - Viterbi score|, 0 when the paths agree
    pub map_vs_viterbi: f64,
}

/// Builds a random instance and evaluates the control/inference identities from state 0.
pub fn duality_residuals<R: Rng + ?Sized>(states: usize, horizon: usize, rng: &mut R) -> Result<DualityReport> {
    let mdp = FiniteKLMDP::random(states, horizon, 2.0, rng);
    let z = solve_desirability(&mdp, 0)?;
    let pi = optimal_policy(&mdp, &z);
    let post = trajectory_posterior(&mdp, 0)?;
    let law = chain_law(&pi, 0);
    let posterior_vs_policy = post.iter().zip(&law).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    let value_vs_cost = (-z.z[0][0].ln() - expected_cost(&mdp, &pi, 0)).abs();

    let (emissions, transitions) = state_trellis(&mdp, 0);
    let (vpath, vscore) = exact_trellis_viterbi(&emissions, &transitions)?;
    let paths = enumerate_paths(states, horizon);
    let (best, _) = post
        .iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |acc, (i, &p)| if p > acc.1 { (i, p) } else { acc });
    let map_score = path_log_score(&mdp, 0, &paths[best]);
    let map_vs_viterbi = if vpath[1..] == paths[best][..] { (map_score - vscore).abs() } else { f64::INFINITY };
    Ok(DualityReport {
        states,
        horizon,
        posterior_vs_policy,
        value_vs_cost,
        map_vs_viterbi,
    })
}

/// The MDP unrolled from `x0` as a layered graph (layer 0 holds only `x0`).
pub fn state_trellis(mdp: &FiniteKLMDP, x0: usize) -> (Vec<DVector<f64>>, Vec<DMatrix<f64>>) {
    let s = mdp.states();
    let mut emissions = vec![DVector::from_element(1, -mdp.costs[0][x0])];
    let mut transitions = Vec::new();
    for k in 0..mdp.horizon() {
        let rows = if k == 0 { 1 } else { s };
        transitions.push(DMatrix::from_fn(rows, s, |j, i| {
            let from = if k == 0 { x0 } else { j };
            mdp.transitions[k][(from, i)].ln()
        }));
        emissions.push(-mdp.costs[k + 1].clone());
    }
    (emissions, transitions)
}

/// Log of the unnormalized posterior weight of one trajectory.
pub fn path_log_score(mdp: &FiniteKLMDP, x0: usize, path: &[usize]) -> f64 {
    let mut prev = x0;
    let mut v = -mdp.costs[0][x0];
    for (k, &x) in path.iter().enumerate() {
        v += mdp.transitions[k][(prev, x)].ln() - mdp.costs[k + 1][x];
        prev = x;
    }
    v
}
