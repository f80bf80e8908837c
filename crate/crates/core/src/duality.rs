//! Monte Carlo evaluation of the closed-form expectation that represents
//! the initial value of the linear anticipated backward equation through
//! the auxiliary forward linear path.
//!
//! The representation pairs the terminal data with the forward path on the
//! terminal window `[T, T + delta]` and integrates the running cost below
//! it; every integral is discretized at the left point on the same grid the
//! forward engine uses, so the estimator and the path engine share one
//! convention. The jump and switch pairing terms use the discrete left
//! limit of the lagged path and the exactly integrated switch intensity.
//!
//! Two evaluation routes are provided: sampling the continuous-time noise
//! ([`evaluate_duality`]) and exhaustive or sampled enumeration of a
//! [`crate::oracle::ScenarioTree`], which shares dynamics with the backward
//! oracle solver.

use rand::Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::noise::{path_rng, ChainCellStats, ChainPath, JumpSpec, NoiseBundle, RegimeChainSpec, TimeGrid};
use crate::oracle::ScenarioTree;
use crate::sdde::{simulate_linear_sdde, DelayedPath, LinearABSDEData};

/// Terminal data of the anticipated backward equation, prescribed on the
/// whole window `[T, T + delta]` as deterministic functions of time.
pub struct TerminalData {
    /// Terminal value process `xi(t)`.
    pub xi: Box<dyn Fn(f64) -> f64 + Send + Sync>,
    /// Prescribed Brownian integrand `psi(t)`.
    pub psi: Box<dyn Fn(f64) -> f64 + Send + Sync>,
    /// Prescribed jump integrand `zeta(t, z)`.
    pub zeta: Box<dyn Fn(f64, f64) -> f64 + Send + Sync>,
    /// Prescribed switch integrand `theta(t)`, one component per regime.
    pub theta: Box<dyn Fn(f64) -> Vec<f64> + Send + Sync>,
}

impl TerminalData {
    pub fn constant(xi: f64, psi: f64, zeta: f64, theta: Vec<f64>) -> Self {
        Self {
            xi: Box::new(move |_| xi),
            psi: Box::new(move |_| psi),
            zeta: Box::new(move |_, _| zeta),
            theta: Box::new(move |_| theta.clone()),
        }
    }
}

/// Monte Carlo estimate of the duality value.
#[derive(Debug, Clone, Serialize)]
pub struct DualityEstimate {
    pub y: f64,
    #[serde(rename = "se")]
    pub standard_error: f64,
    pub n_paths: u64,
    pub dt: f64,
    pub initial_regime: usize,
    pub seed: u64,
}

/// The pathwise duality functional for one realized forward path under the
/// continuous-time noise, with the switch pairing term integrated against
/// the exact occupation-time intensity of the sampled chain.
pub(crate) fn path_functional(
    data: &LinearABSDEData,
    terminal: &TerminalData,
    jumps: &JumpSpec,
    path: &DelayedPath,
    chain: &ChainPath,
    stats: &ChainCellStats,
) -> f64 {
    let grid = path.grid();
    let k_total = grid.steps();
    let m = grid.delay_steps();
    let dt = grid.dt();
    let k_t = k_total - m;
    let d = (terminal.theta)(grid.t_end()).len();

    let mut acc = path.node_value(k_t as i64) * (terminal.xi)(grid.node_time(k_t as i64));

    for k in 0..k_t {
        let t = grid.node_time(k as i64);
        acc += path.node_value(k as i64) * (data.running_cost)(t, chain.state_before(k)) * dt;
    }

    for k in k_t..k_total {
        if k < m {
            continue; // lagged path still in the zero pre-history
        }
        let t = grid.node_time(k as i64);
        let lag = (k - m) as i64;
        let x_lag = path.node_value(lag);
        let x_lag_minus = if k == m { 0.0 } else { x_lag };
        let t_lag = grid.node_time(lag);
        let r_lag = chain.state_before(k - m);

        acc += (terminal.xi)(t) * (data.b_bar)(t_lag, r_lag) * x_lag * dt;
        acc += (terminal.psi)(t) * (data.sigma_bar)(t_lag, r_lag) * x_lag * dt;
        for &(z, w) in jumps.marks() {
            acc += (terminal.zeta)(t, z)
                * (data.eta_bar)(t_lag, r_lag, z)
                * x_lag_minus
                * jumps.rate()
                * w
                * dt;
        }
        let theta = (terminal.theta)(t);
        let gamma_bar = (data.gamma_bar)(t_lag, r_lag);
        let lam = stats.integrated_intensity(k);
        for j in 0..d {
            acc += theta[j] * gamma_bar[j] * x_lag_minus * lam[j];
        }
    }
    acc
}

fn summarize(
    values: Vec<f64>,
    grid: &TimeGrid,
    initial_regime: usize,
    seed: u64,
) -> DualityEstimate {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let standard_error = if values.len() > 1 {
        let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
        (var / n).sqrt()
    } else {
        0.0
    };
    DualityEstimate {
        y: mean,
        standard_error,
        n_paths: values.len() as u64,
        dt: grid.dt(),
        initial_regime,
        seed,
    }
}

/// Monte Carlo evaluation of the duality formula: simulates the auxiliary
/// linear path per `(seed, path_index)` stream and averages the pathwise
/// functional. The reduction is index-ordered, so the result is
/// bit-identical under any worker count.
#[allow(clippy::too_many_arguments)]
pub fn evaluate_duality(
    data: &LinearABSDEData,
    terminal: &TerminalData,
    chain_spec: &RegimeChainSpec,
    jump_spec: &JumpSpec,
    grid: &TimeGrid,
    initial_regime: usize,
    n_paths: u64,
    seed: u64,
) -> Result<DualityEstimate> {
    if n_paths == 0 {
        return Err(Error::InvalidArgument("need at least one path".into()));
    }
    if grid.delay_steps() > grid.steps() {
        return Err(Error::InvalidArgument("delay window longer than the grid".into()));
    }
    let values: Vec<f64> = (0..n_paths)
        .into_par_iter()
        .map(|i| -> Result<f64> {
            let noise = NoiseBundle::sample(chain_spec, jump_spec, grid, initial_regime, seed, i)?;
            let path = simulate_linear_sdde(data, grid, jump_spec, chain_spec, &noise)?;
            let stats = ChainCellStats::compute(&noise.chain, chain_spec)?;
            Ok(path_functional(data, terminal, jump_spec, &path, &noise.chain, &stats))
        })
        .collect::<Result<Vec<f64>>>()?;
    Ok(summarize(values, grid, initial_regime, seed))
}

/// One Euler step of the auxiliary linear path under the discrete tree
/// dynamics (Bernoulli cell increments, full-cell switch compensator).
fn tree_step(
    tree: &ScenarioTree,
    data: &LinearABSDEData,
    k: usize,
    xs: &[f64],
    regimes: &[usize],
    dw: f64,
    jump: bool,
    next_regime: usize,
) -> f64 {
    let grid = tree.grid();
    let dt = grid.dt();
    let m = grid.delay_steps();
    let t = grid.node_time(k as i64);
    let x = xs[k];
    let regime = regimes[k];
    let (x_lag, x_lag_minus, t_lag, r_lag) = if k >= m {
        let lag_minus = if k == m { 0.0 } else { xs[k - m] };
        (xs[k - m], lag_minus, grid.node_time((k - m) as i64), regimes[k - m])
    } else {
        (0.0, 0.0, t, regime)
    };

    let mut next = x + ((data.b)(t, regime) * x + (data.b_bar)(t_lag, r_lag) * x_lag) * dt;
    next += ((data.sigma)(t, regime) * x + (data.sigma_bar)(t_lag, r_lag) * x_lag) * dw;

    if let Some(z) = tree.mark() {
        let coeff = (data.eta)(t, regime, z) * x + (data.eta_bar)(t_lag, r_lag, z) * x_lag_minus;
        if jump {
            next += coeff;
        }
        next -= dt * tree.jumps().rate() * coeff;
    }

    let gamma = (data.gamma)(t, regime);
    let gamma_bar = (data.gamma_bar)(t_lag, r_lag);
    for (j, (g, gb)) in gamma.iter().zip(&gamma_bar).enumerate() {
        let realized = if next_regime == j && j != regime { 1.0 } else { 0.0 };
        let dphi = realized - tree.chain().intensity_into(regime, j) * dt;
        next += (g * x + gb * x_lag_minus) * dphi;
    }
    next
}

/// The duality functional along one tree path; switch pairing terms use
/// the tree's own compensator `lambda_ij * dt`.
fn tree_functional(
    tree: &ScenarioTree,
    data: &LinearABSDEData,
    terminal: &TerminalData,
    xs: &[f64],
    regimes: &[usize],
) -> f64 {
    let grid = tree.grid();
    let k_total = grid.steps();
    let m = grid.delay_steps();
    let dt = grid.dt();
    let k_t = k_total - m;
    let d = tree.chain().num_states();

    let mut acc = xs[k_t] * (terminal.xi)(grid.node_time(k_t as i64));
    for k in 0..k_t {
        let t = grid.node_time(k as i64);
        acc += xs[k] * (data.running_cost)(t, regimes[k]) * dt;
    }
    for k in k_t..k_total {
        if k < m {
            continue;
        }
        let t = grid.node_time(k as i64);
        let x_lag = xs[k - m];
        let x_lag_minus = if k == m { 0.0 } else { x_lag };
        let t_lag = grid.node_time((k - m) as i64);
        let r_lag = regimes[k - m];

        acc += (terminal.xi)(t) * (data.b_bar)(t_lag, r_lag) * x_lag * dt;
        acc += (terminal.psi)(t) * (data.sigma_bar)(t_lag, r_lag) * x_lag * dt;
        if let Some(z) = tree.mark() {
            acc += (terminal.zeta)(t, z)
                * (data.eta_bar)(t_lag, r_lag, z)
                * x_lag_minus
                * tree.jumps().rate()
                * dt;
        }
        let theta = (terminal.theta)(t);
        let gamma_bar = (data.gamma_bar)(t_lag, r_lag);
        for j in 0..d {
            acc += theta[j]
                * gamma_bar[j]
                * x_lag_minus
                * tree.chain().intensity_into(regimes[k], j)
                * dt;
        }
    }
    acc
}

#[allow(clippy::too_many_arguments)]
fn tree_recurse(
    tree: &ScenarioTree,
    data: &LinearABSDEData,
    terminal: &TerminalData,
    level: usize,
    prob: f64,
    xs: &mut Vec<f64>,
    regimes: &mut Vec<usize>,
    acc: &mut f64,
    prob_acc: &mut f64,
) {
    if level == tree.grid().steps() {
        *acc += prob * tree_functional(tree, data, terminal, xs, regimes);
        *prob_acc += prob;
        return;
    }
    let regime = regimes[level];
    for b in tree.branches(regime) {
        let x_next = tree_step(tree, data, level, xs, regimes, b.dw, b.jump, b.next_regime);
        xs.push(x_next);
        regimes.push(b.next_regime);
        tree_recurse(tree, data, terminal, level + 1, prob * b.prob, xs, regimes, acc, prob_acc);
        xs.pop();
        regimes.pop();
    }
}

/// Exact evaluation of the duality functional by exhaustive enumeration of
/// every tree path, weighted by its probability.
pub fn evaluate_duality_on_tree(
    data: &LinearABSDEData,
    terminal: &TerminalData,
    tree: &ScenarioTree,
) -> Result<f64> {
    let grid = tree.grid();
    if grid.delay_steps() > grid.steps() {
        return Err(Error::InvalidArgument("delay window longer than the grid".into()));
    }
    let k = grid.steps();
    let mut xs = Vec::with_capacity(k + 1);
    let mut regimes = Vec::with_capacity(k + 1);
    xs.push(1.0);
    regimes.push(tree.initial_state());
    let mut acc = 0.0;
    let mut prob_acc = 0.0;
    tree_recurse(tree, data, terminal, 0, 1.0, &mut xs, &mut regimes, &mut acc, &mut prob_acc);
    // Normalizing by the accumulated path mass (1 up to rounding) removes
    // the float bias of summing ~width^K products of probabilities.
    Ok(acc / prob_acc)
}

/// Monte Carlo evaluation under the *tree* dynamics: the same Bernoulli
/// cell increments the exhaustive enumeration uses, but sampled. Useful for
/// checking the continuous-route estimator machinery against the exact tree
/// value without any time-discretization mismatch.
pub fn evaluate_duality_sampled_tree(
    data: &LinearABSDEData,
    terminal: &TerminalData,
    tree: &ScenarioTree,
    n_paths: u64,
    seed: u64,
) -> Result<DualityEstimate> {
    if n_paths == 0 {
        return Err(Error::InvalidArgument("need at least one path".into()));
    }
    let grid = *tree.grid();
    if grid.delay_steps() > grid.steps() {
        return Err(Error::InvalidArgument("delay window longer than the grid".into()));
    }
    let k_total = grid.steps();
    let values: Vec<f64> = (0..n_paths)
        .into_par_iter()
        .map(|i| {
            let mut rng = path_rng(seed, i);
            let mut xs = Vec::with_capacity(k_total + 1);
            let mut regimes = Vec::with_capacity(k_total + 1);
            xs.push(1.0);
            regimes.push(tree.initial_state());
            for k in 0..k_total {
                let branches = tree.branches(regimes[k]);
                let u: f64 = rng.random();
                let mut pick = branches.len() - 1;
                let mut cum = 0.0;
                for (c, b) in branches.iter().enumerate() {
                    cum += b.prob;
                    if u <= cum {
                        pick = c;
                        break;
                    }
                }
                let b = branches[pick];
                let x_next = tree_step(tree, data, k, &xs, &regimes, b.dw, b.jump, b.next_regime);
                xs.push(x_next);
                regimes.push(b.next_regime);
            }
            tree_functional(tree, data, terminal, &xs, &regimes)
        })
        .collect();
    Ok(summarize(values, &grid, tree.initial_state(), seed))
}
