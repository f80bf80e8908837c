//! Picard iteration for the forward equation, realized pathwise on a fixed
//! noise ensemble.
//!
//! The contraction argument fixes `beta = 16 C^2 (1 + L) + 1` and works in
//! the exponentially weighted L2 norm; here the norm is estimated by
//! left-rectangle quadrature and ensemble averaging, and the proof's 1/2
//! contraction factor becomes a measurable diagnostic.

use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::noise::{ChainCellStats, JumpSpec, NoiseBundle, RegimeChainSpec, TimeGrid};
use crate::sdde::{DelayFunctions, DelayedPath, InitialPath, SDDECoefficients};

/// The contraction weight derived from the Lipschitz constant `C` and the
/// delay constant `L`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct BetaConfig {
    pub c: f64,
    pub l: f64,
    pub beta: f64,
}

impl BetaConfig {
    pub fn new(c: f64, l: f64) -> Result<Self> {
        if !(c > 0.0) || !(l > 0.0) {
            return Err(Error::InvalidArgument(format!("need C > 0 and L > 0, got C={c}, L={l}")));
        }
        Ok(Self { c, l, beta: 16.0 * c * c * (1.0 + l) + 1.0 })
    }
}

/// Per-iteration convergence record of a Picard solve.
#[derive(Debug, Clone, Serialize)]
pub struct PicardDiagnostics {
    pub beta: f64,
    pub iterations: usize,
    /// beta-norm of successive ensemble differences, one entry per iteration.
    pub norms: Vec<f64>,
    /// Ratios of consecutive norms, length `iterations - 1` (entries with a
    /// vanishing denominator are dropped).
    pub ratios: Vec<f64>,
    pub converged: bool,
}

fn check_shared_grid(ensemble: &[DelayedPath]) -> Result<TimeGrid> {
    let first = ensemble
        .first()
        .ok_or_else(|| Error::InvalidArgument("empty ensemble".into()))?;
    let grid = *first.grid();
    if ensemble.iter().any(|p| p.grid() != &grid) {
        return Err(Error::InvalidArgument("ensemble paths live on different grids".into()));
    }
    Ok(grid)
}

fn weighted_square_integral(grid: &TimeGrid, beta: f64, value: impl Fn(i64) -> f64) -> f64 {
    let dt = grid.dt();
    (0..grid.steps() as i64)
        .map(|k| {
            let s = grid.node_time(k) - grid.t0();
            (-beta * s).exp() * value(k).powi(2) * dt
        })
        .sum()
}

/// Monte Carlo estimate of `E[int_0^T e^{-beta s} |h(s)|^2 ds]` over the
/// forward span, by left-rectangle quadrature and ensemble averaging.
pub fn beta_norm(ensemble: &[DelayedPath], beta: f64) -> Result<f64> {
    let grid = check_shared_grid(ensemble)?;
    let per_path: Vec<f64> = ensemble
        .par_iter()
        .map(|p| weighted_square_integral(&grid, beta, |k| p.node_value(k)))
        .collect();
    // Summation in path order: deterministic under any worker count.
    Ok(per_path.iter().sum::<f64>() / ensemble.len() as f64)
}

/// The same weighted norm applied to the pathwise difference of two
/// equally sized ensembles.
pub fn beta_norm_diff(a: &[DelayedPath], b: &[DelayedPath], beta: f64) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::InvalidArgument("ensembles differ in size".into()));
    }
    let grid = check_shared_grid(a)?;
    if check_shared_grid(b)? != grid {
        return Err(Error::InvalidArgument("ensembles live on different grids".into()));
    }
    let per_path: Vec<f64> = a
        .par_iter()
        .zip(b.par_iter())
        .map(|(p, q)| weighted_square_integral(&grid, beta, |k| p.node_value(k) - q.node_value(k)))
        .collect();
    Ok(per_path.iter().sum::<f64>() / a.len() as f64)
}

/// One application of the Picard map `h`: the Euler solution whose
/// coefficient arguments are frozen from the input path, history forced to
/// the initial segment.
#[allow(clippy::too_many_arguments)]
pub fn picard_step(
    input: &DelayedPath,
    coeffs: &SDDECoefficients,
    x0: &InitialPath,
    delays: &DelayFunctions,
    grid: &TimeGrid,
    jump_spec: &JumpSpec,
    chain_spec: &RegimeChainSpec,
    noise: &NoiseBundle,
) -> Result<DelayedPath> {
    chain_spec.assert_valid()?;
    let m = grid.delay_steps() as i64;
    let k_max = grid.steps();
    let stats = ChainCellStats::compute(&noise.chain, chain_spec)?;
    let d = chain_spec.num_states();

    let mut values = Vec::with_capacity((m as usize) + k_max + 1);
    for k in -m..=0 {
        values.push(x0.node_value(k));
    }
    for k in 0..k_max {
        let t = grid.node_time(k as i64);
        // Arguments frozen from the input path.
        let x = input.node_value(k as i64);
        let regime = noise.chain.state_before(k);
        let lag = |i: usize| input.lookup(t - delays.delay(i, t));
        let (y1, y2, y3, y4) = (lag(0), lag(1), lag(2), lag(3));

        let mut next = values[(k as i64 + m) as usize] + (coeffs.drift)(t, x, y1, regime) * grid.dt();
        next += (coeffs.diffusion)(t, x, y2, regime) * noise.brownian_increments[k];
        let t_next = grid.node_time(k as i64 + 1);
        for &(_, z) in noise.jumps.events_in(t, t_next) {
            next += (coeffs.jump)(t, x, y3, regime, z);
        }
        next -= grid.dt() * jump_spec.compensator_integral(|z| (coeffs.jump)(t, x, y3, regime, z));
        let gamma = (coeffs.switch)(t, x, y4, regime);
        for j in 0..d {
            next += gamma[j] * stats.compensated_increment(k, j);
        }
        if !next.is_finite() {
            return Err(Error::NumericalBlowup { step: k, context: "Picard map step".into() });
        }
        values.push(next);
    }
    DelayedPath::from_values(*grid, values)
}

/// Picard iteration from an explicit seed ensemble. Non-convergence at
/// `max_iter` is a diagnostic outcome, not an error.
#[allow(clippy::too_many_arguments)]
pub fn picard_solve_from(
    seed: Vec<DelayedPath>,
    coeffs: &SDDECoefficients,
    x0: &InitialPath,
    delays: &DelayFunctions,
    grid: &TimeGrid,
    jump_spec: &JumpSpec,
    chain_spec: &RegimeChainSpec,
    noise_ensemble: &[NoiseBundle],
    tol: f64,
    max_iter: usize,
) -> Result<(Vec<DelayedPath>, PicardDiagnostics)> {
    if !(tol > 0.0) {
        return Err(Error::InvalidArgument("tolerance must be positive".into()));
    }
    if max_iter == 0 {
        return Err(Error::InvalidArgument("max_iter must be at least 1".into()));
    }
    if seed.len() != noise_ensemble.len() {
        return Err(Error::InvalidArgument("seed ensemble does not match noise ensemble".into()));
    }
    let beta = BetaConfig::new(coeffs.lipschitz_c, delays.l_constant())?.beta;

    let mut current = seed;
    let mut norms = Vec::new();
    let mut converged = false;
    for _ in 0..max_iter {
        let next: Result<Vec<DelayedPath>> = current
            .par_iter()
            .zip(noise_ensemble.par_iter())
            .map(|(x, noise)| picard_step(x, coeffs, x0, delays, grid, jump_spec, chain_spec, noise))
            .collect();
        let next = next?;
        let diff = beta_norm_diff(&next, &current, beta)?;
        norms.push(diff);
        current = next;
        if diff < tol {
            converged = true;
            break;
        }
    }
    let ratios = norms.windows(2).filter(|w| w[0] > 0.0).map(|w| w[1] / w[0]).collect();
    let diagnostics = PicardDiagnostics { beta, iterations: norms.len(), norms, ratios, converged };
    Ok((current, diagnostics))
}

/// Picard iteration from the default seed: the constant extension of the
/// initial value `x0(t0)`.
#[allow(clippy::too_many_arguments)]
pub fn picard_solve(
    coeffs: &SDDECoefficients,
    x0: &InitialPath,
    delays: &DelayFunctions,
    grid: &TimeGrid,
    jump_spec: &JumpSpec,
    chain_spec: &RegimeChainSpec,
    noise_ensemble: &[NoiseBundle],
    tol: f64,
    max_iter: usize,
) -> Result<(Vec<DelayedPath>, PicardDiagnostics)> {
    let m = grid.delay_steps() as i64;
    let seed_values: Vec<f64> = (-m..=grid.steps() as i64)
        .map(|k| if k <= 0 { x0.node_value(k) } else { x0.node_value(0) })
        .collect();
    let seed_path = DelayedPath::from_values(*grid, seed_values)?;
    picard_solve_from(
        vec![seed_path; noise_ensemble.len()],
        coeffs,
        x0,
        delays,
        grid,
        jump_spec,
        chain_spec,
        noise_ensemble,
        tol,
        max_iter,
    )
}

/// Default beta-norm tolerance and iteration cap.
pub const DEFAULT_TOL: f64 = 1e-8;
pub const DEFAULT_MAX_ITER: usize = 50;

#[cfg(test)]
mod tests {
    use super::*;
    use crate::noise::NoiseBundle;

    fn single_state() -> RegimeChainSpec {
        RegimeChainSpec::new(vec![vec![0.0]]).unwrap()
    }

    #[test]
    fn beta_formula() {
        let cfg = BetaConfig::new(1.0, 1.0).unwrap();
        assert_eq!(cfg.beta, 33.0);
        assert!(BetaConfig::new(1.5, 1.0).unwrap().beta > cfg.beta);
        assert!(BetaConfig::new(1.0, 1.5).unwrap().beta > cfg.beta);
    }

    #[test]
    fn beta_norm_constant_path() {
        let grid = TimeGrid::new(0.0, 1.0, 4096, 0).unwrap();
        let ones = DelayedPath::from_values(grid, vec![1.0; 4097]).unwrap();
        let beta = 33.0;
        let norm = beta_norm(std::slice::from_ref(&ones), beta).unwrap();
        let exact = (1.0 - (-beta).exp()) / beta;
        assert!((norm - exact).abs() <= beta * grid.dt(), "norm {norm} vs exact {exact}");
        let zeros = DelayedPath::from_values(grid, vec![0.0; 4097]).unwrap();
        assert_eq!(beta_norm(&[zeros], beta).unwrap(), 0.0);
    }

    #[test]
    fn mismatched_grids_rejected() {
        let g1 = TimeGrid::new(0.0, 1.0, 4, 0).unwrap();
        let g2 = TimeGrid::new(0.0, 1.0, 8, 0).unwrap();
        let a = DelayedPath::from_values(g1, vec![0.0; 5]).unwrap();
        let b = DelayedPath::from_values(g2, vec![0.0; 9]).unwrap();
        assert!(beta_norm(&[a, b], 1.0).is_err());
    }

    #[test]
    fn zero_coefficients_converge_in_one_iteration() {
        let grid = TimeGrid::new(0.0, 1.0, 8, 2).unwrap();
        let x0 = InitialPath::constant(&grid, 2.0).unwrap();
        let delays = DelayFunctions::constant(grid.delay());
        let coeffs = SDDECoefficients::zero(1);
        let noise: Vec<NoiseBundle> = (0..4)
            .map(|i| NoiseBundle::sample(&single_state(), &JumpSpec::none(), &grid, 0, 1, i).unwrap())
            .collect();
        let (paths, diag) = picard_solve(
            &coeffs, &x0, &delays, &grid, &JumpSpec::none(), &single_state(), &noise, 1e-8, 10,
        )
        .unwrap();
        assert!(diag.converged);
        assert_eq!(diag.iterations, 1);
        assert!(paths[0].values().iter().all(|&v| v == 2.0));
    }

    #[test]
    fn exact_solution_is_fixed_point() {
        use crate::sdde::simulate_sdde;
        let grid = TimeGrid::new(0.0, 1.0, 32, 8).unwrap();
        let x0 = InitialPath::constant(&grid, 1.0).unwrap();
        let delays = DelayFunctions::constant(grid.delay());
        let mut coeffs = SDDECoefficients::zero(1);
        coeffs.drift = Box::new(|_, x, y, _| 0.4 * x + 0.3 * y);
        coeffs.diffusion = Box::new(|_, x, _, _| 0.2 * x);
        coeffs.lipschitz_c = 0.7;
        let noise =
            NoiseBundle::sample(&single_state(), &JumpSpec::none(), &grid, 0, 9, 0).unwrap();
        let exact =
            simulate_sdde(&coeffs, &x0, &delays, &grid, &JumpSpec::none(), &single_state(), &noise)
                .unwrap();
        let mapped = picard_step(
            &exact, &coeffs, &x0, &delays, &grid, &JumpSpec::none(), &single_state(), &noise,
        )
        .unwrap();
        for (a, b) in exact.values().iter().zip(mapped.values()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn picard_limit_matches_direct_euler() {
        use crate::sdde::simulate_sdde;
        let grid = TimeGrid::new(0.0, 1.0, 32, 8).unwrap();
        let x0 = InitialPath::constant(&grid, 1.0).unwrap();
        let delays = DelayFunctions::constant(grid.delay());
        let mut coeffs = SDDECoefficients::zero(1);
        coeffs.drift = Box::new(|_, x, y, _| 0.5 * x + 0.5 * y);
        coeffs.diffusion = Box::new(|_, x, _, _| 0.2 * x);
        coeffs.lipschitz_c = 0.5;
        let noise: Vec<NoiseBundle> = (0..16)
            .map(|i| NoiseBundle::sample(&single_state(), &JumpSpec::none(), &grid, 0, 21, i).unwrap())
            .collect();
        let (paths, diag) = picard_solve(
            &coeffs, &x0, &delays, &grid, &JumpSpec::none(), &single_state(), &noise, 1e-30, 64,
        )
        .unwrap();
        assert!(diag.converged, "norms: {:?}", diag.norms);
        for (path, nb) in paths.iter().zip(&noise) {
            let direct =
                simulate_sdde(&coeffs, &x0, &delays, &grid, &JumpSpec::none(), &single_state(), nb)
                    .unwrap();
            for (a, b) in path.values().iter().zip(direct.values()) {
                assert!((a - b).abs() <= 1e-10);
            }
        }
    }

    #[test]
    fn two_initial_guesses_agree() {
        let grid = TimeGrid::new(0.0, 1.0, 32, 8).unwrap();
        let x0 = InitialPath::constant(&grid, 1.0).unwrap();
        let delays = DelayFunctions::constant(grid.delay());
        let mut coeffs = SDDECoefficients::zero(1);
        coeffs.drift = Box::new(|_, x, y, _| 0.5 * x + 0.5 * y);
        coeffs.lipschitz_c = 0.5;
        let noise: Vec<NoiseBundle> = (0..8)
            .map(|i| NoiseBundle::sample(&single_state(), &JumpSpec::none(), &grid, 0, 22, i).unwrap())
            .collect();
        let tol = 1e-12;
        let (pa, _) = picard_solve(
            &coeffs, &x0, &delays, &grid, &JumpSpec::none(), &single_state(), &noise, tol, 64,
        )
        .unwrap();
        // Different seed: an oscillating path far from the solution.
        let m = grid.delay_steps() as i64;
        let wild: Vec<f64> = (-m..=grid.steps() as i64)
            .map(|k| if k <= 0 { x0.node_value(k) } else { 5.0 * (-1.0f64).powi(k as i32) })
            .collect();
        let wild_path = DelayedPath::from_values(grid, wild).unwrap();
        let (pb, _) = picard_solve_from(
            vec![wild_path; noise.len()],
            &coeffs,
            &x0,
            &delays,
            &grid,
            &JumpSpec::none(),
            &single_state(),
            &noise,
            tol,
            64,
        )
        .unwrap();
        let beta = BetaConfig::new(0.5, 1.0).unwrap().beta;
        let dist = beta_norm_diff(&pa, &pb, beta).unwrap();
        assert!(dist < 2.0 * tol, "distance {dist}");
    }
}
