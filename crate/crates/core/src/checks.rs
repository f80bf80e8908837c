//! Pathwise verification of the regime-switching Ito formula and product
//! rule on simulated paths.
//!
//! Both residuals are assembled term by term in the same grouping as the
//! identities themselves: absolutely continuous parts against `dt` and the
//! exactly integrated switch intensity, martingale parts against the
//! realized-minus-compensated increments. Using the exact occupation-time
//! integral of the switch intensity in the `ds` terms makes the chain
//! contribution telescope: the identity-function residual vanishes exactly
//! and the indicator-function residual is centered, so its ensemble mean is
//! a clean statistical test.

use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::noise::{ChainCellStats, JumpSpec, NoiseBundle, RegimeChainSpec, TimeGrid};
use crate::sdde::{simulate_sdde, DelayFunctions, DelayedPath, InitialPath, SDDECoefficients};

/// A C^{1,2} test function `phi(t, y, regime)` with its analytic partials.
pub struct TestFunction {
    pub phi: Box<dyn Fn(f64, f64, usize) -> f64 + Send + Sync>,
    pub d_t: Box<dyn Fn(f64, f64, usize) -> f64 + Send + Sync>,
    pub d_y: Box<dyn Fn(f64, f64, usize) -> f64 + Send + Sync>,
    pub d_yy: Box<dyn Fn(f64, f64, usize) -> f64 + Send + Sync>,
}

impl TestFunction {
    /// `phi(t, y, i) = y`.
    pub fn identity() -> Self {
        Self {
            phi: Box::new(|_, y, _| y),
            d_t: Box::new(|_, _, _| 0.0),
            d_y: Box::new(|_, _, _| 1.0),
            d_yy: Box::new(|_, _, _| 0.0),
        }
    }

    /// `phi(t, y, i) = y^2`.
    pub fn square() -> Self {
        Self {
            phi: Box::new(|_, y, _| y * y),
            d_t: Box::new(|_, _, _| 0.0),
            d_y: Box::new(|_, y, _| 2.0 * y),
            d_yy: Box::new(|_, _, _| 2.0),
        }
    }

    /// `phi(t, y, i) = 1{i == j}`: isolates the compensated chain term.
    pub fn regime_indicator(j: usize) -> Self {
        Self {
            phi: Box::new(move |_, _, i| if i == j { 1.0 } else { 0.0 }),
            d_t: Box::new(|_, _, _| 0.0),
            d_y: Box::new(|_, _, _| 0.0),
            d_yy: Box::new(|_, _, _| 0.0),
        }
    }

    /// Verifies the declared partials against central differences at the
    /// given probe points (step 1e-5 in t, 1e-4 in y for the second
    /// derivative; relative tolerance 1e-6).
    pub fn spot_check_derivatives(&self, points: &[(f64, f64, usize)]) -> Result<()> {
        let check = |name: &str, analytic: f64, numeric: f64| -> Result<()> {
            let tol = 1e-6 * (1.0 + analytic.abs());
            if (analytic - numeric).abs() > tol {
                return Err(Error::InvalidSpec(format!(
                    "declared {name} = {analytic} disagrees with central difference {numeric}"
                )));
            }
            Ok(())
        };
        for &(t, y, i) in points {
            let h = 1e-5;
            let num_t = ((self.phi)(t + h, y, i) - (self.phi)(t - h, y, i)) / (2.0 * h);
            check("d_t", (self.d_t)(t, y, i), num_t)?;
            let num_y = ((self.phi)(t, y + h, i) - (self.phi)(t, y - h, i)) / (2.0 * h);
            check("d_y", (self.d_y)(t, y, i), num_y)?;
            let h2 = 1e-4;
            let num_yy = ((self.phi)(t, y + h2, i) - 2.0 * (self.phi)(t, y, i)
                + (self.phi)(t, y - h2, i))
                / (h2 * h2);
            check("d_yy", (self.d_yy)(t, y, i), num_yy)?;
        }
        Ok(())
    }
}

/// Pathwise Ito residual: `phi` at the endpoints minus the discretized
/// right-hand side of the change-of-variables formula along the path.
pub fn ito_residual(
    phi: &TestFunction,
    coeffs: &SDDECoefficients,
    delays: &DelayFunctions,
    jump_spec: &JumpSpec,
    chain_spec: &RegimeChainSpec,
    noise: &NoiseBundle,
    path: &DelayedPath,
) -> Result<f64> {
    let grid = path.grid();
    let dt = grid.dt();
    let d = chain_spec.num_states();

    let lhs = (phi.phi)(grid.t_end(), path.node_value(grid.steps() as i64), noise.chain.final_state())
        - (phi.phi)(grid.t0(), path.node_value(0), noise.chain.state_before(0));

    // Transitions are walked once across cells; `state` tracks the exact
    // regime alpha(s-) inside each cell, so the chain terms carry the true
    // occupation times while (t, X) stay frozen at the left node.
    let transitions = noise.chain.transitions();
    let mut trans_idx = 0usize;
    let mut state = noise.chain.state_before(0);

    let mut rhs = 0.0;
    for k in 0..grid.steps() {
        let t = grid.node_time(k as i64);
        let t_next = grid.node_time(k as i64 + 1);
        let x = path.node_value(k as i64);
        let regime = noise.chain.state_before(k);
        let lag = |i: usize| path.lookup(t - delays.delay(i, t));

        let f = (phi.phi)(t, x, regime);
        let py = (phi.d_y)(t, x, regime);
        let b = (coeffs.drift)(t, x, lag(0), regime);
        let sigma = (coeffs.diffusion)(t, x, lag(1), regime);
        let y3 = lag(2);
        let jump_coeff = |z: f64| (coeffs.jump)(t, x, y3, regime, z);
        let gamma = (coeffs.switch)(t, x, lag(3), regime);

        // Absolutely continuous parts (jump difference plus its compensated
        // counterpart below net out to the -d_y eta piece).
        rhs += dt
            * ((phi.d_t)(t, x, regime) + py * b + 0.5 * (phi.d_yy)(t, x, regime) * sigma * sigma);
        rhs += dt
            * jump_spec.compensator_integral(|z| {
                let c = jump_coeff(z);
                (phi.phi)(t, x + c, regime) - f - py * c
            });

        // Martingale parts.
        rhs += py * sigma * noise.brownian_increments[k];
        for &(_, z) in noise.jumps.events_in(t, t_next) {
            rhs += (phi.phi)(t, x + jump_coeff(z), regime) - f;
        }
        rhs -= dt
            * jump_spec.compensator_integral(|z| (phi.phi)(t, x + jump_coeff(z), regime) - f);

        // Chain terms: the lambda'-weighted difference term and the dPhi~
        // integral, with the regime argument following the exact chain path
        // inside the cell (segment-wise occupation for the ds pieces,
        // realized differences at transition times).
        let mut seg_start = t;
        loop {
            let next_trans = transitions.get(trans_idx).filter(|&&(tau, _, _)| tau <= t_next);
            let seg_end = next_trans.map_or(t_next, |&(tau, _, _)| tau);
            let seg = seg_end - seg_start;
            let f_state = (phi.phi)(t, x, state);
            let py_state = (phi.d_y)(t, x, state);
            for j in 0..d {
                let lam = chain_spec.intensity_into(state, j);
                if lam > 0.0 {
                    let diff = (phi.phi)(t, x + gamma[j], j) - f_state;
                    rhs += seg * lam * (diff - py_state * gamma[j]); // ds difference term
                    rhs -= seg * lam * diff; // compensator of the dPhi~ term
                }
            }
            match next_trans {
                Some(&(_, from, to)) => {
                    rhs += (phi.phi)(t, x + gamma[to], to) - (phi.phi)(t, x, from);
                    state = to;
                    seg_start = seg_end;
                    trans_idx += 1;
                }
                None => break,
            }
        }
    }
    Ok(lhs - rhs)
}

/// Pathwise product-rule residual for two paths driven by the same noise:
/// the increment of `X1 X2` minus the cross-variation expansion, with the
/// bracket split into its `dt`, jump and switch pieces.
#[allow(clippy::too_many_arguments)]
pub fn product_rule_residual(
    coeffs1: &SDDECoefficients,
    path1: &DelayedPath,
    coeffs2: &SDDECoefficients,
    path2: &DelayedPath,
    delays: &DelayFunctions,
    jump_spec: &JumpSpec,
    chain_spec: &RegimeChainSpec,
    noise: &NoiseBundle,
) -> Result<f64> {
    let grid = path1.grid();
    if path2.grid().steps() != grid.steps() || path2.grid().delay_steps() != grid.delay_steps() {
        return Err(Error::InvalidArgument("product rule requires a shared grid".into()));
    }
    let dt = grid.dt();
    let d = chain_spec.num_states();
    let stats = ChainCellStats::compute(&noise.chain, chain_spec)?;
    let k_max = grid.steps() as i64;

    let lhs = path1.node_value(k_max) * path2.node_value(k_max)
        - path1.node_value(0) * path2.node_value(0);

    let mut rhs = 0.0;
    for k in 0..grid.steps() {
        let ki = k as i64;
        let t = grid.node_time(ki);
        let x1 = path1.node_value(ki);
        let x2 = path2.node_value(ki);
        rhs += x1 * (path2.node_value(ki + 1) - x2) + x2 * (path1.node_value(ki + 1) - x1);

        let regime = noise.chain.state_before(k);
        let lag1 = |i: usize| path1.lookup(t - delays.delay(i, t));
        let lag2 = |i: usize| path2.lookup(t - delays.delay(i, t));
        let sigma1 = (coeffs1.diffusion)(t, x1, lag1(1), regime);
        let sigma2 = (coeffs2.diffusion)(t, x2, lag2(1), regime);
        let (y3a, y3b) = (lag1(2), lag2(2));
        let cross_jump =
            |z: f64| (coeffs1.jump)(t, x1, y3a, regime, z) * (coeffs2.jump)(t, x2, y3b, regime, z);
        let gamma1 = (coeffs1.switch)(t, x1, lag1(3), regime);
        let gamma2 = (coeffs2.switch)(t, x2, lag2(3), regime);

        // Bracket: dt part, then compensated jump and switch parts.
        rhs += sigma1 * sigma2 * dt;
        rhs += dt * jump_spec.compensator_integral(cross_jump);
        let t_next = grid.node_time(ki + 1);
        for &(_, z) in noise.jumps.events_in(t, t_next) {
            rhs += cross_jump(z);
        }
        rhs -= dt * jump_spec.compensator_integral(cross_jump);
        let lam = stats.integrated_intensity(k);
        for j in 0..d {
            rhs += gamma1[j] * gamma2[j] * lam[j];
            rhs += gamma1[j] * gamma2[j] * stats.compensated_increment(k, j);
        }
    }
    Ok(lhs - rhs)
}

/// Ensemble statistics of a residual.
#[derive(Debug, Clone, Serialize)]
pub struct ResidualStats {
    pub dt: f64,
    pub mean_abs_residual: f64,
    /// Standard error of the absolute residual mean.
    pub se: f64,
    pub n_paths: u64,
    /// Signed ensemble mean and its standard error, for centering tests.
    pub mean_residual: f64,
    pub mean_se: f64,
}

fn residual_stats(residuals: Vec<f64>, dt: f64) -> ResidualStats {
    let n = residuals.len() as f64;
    let mean_abs = residuals.iter().map(|r| r.abs()).sum::<f64>() / n;
    let mean = residuals.iter().sum::<f64>() / n;
    let (var_abs, var) = if residuals.len() > 1 {
        let va = residuals.iter().map(|r| (r.abs() - mean_abs).powi(2)).sum::<f64>() / (n - 1.0);
        let v = residuals.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / (n - 1.0);
        (va, v)
    } else {
        (0.0, 0.0)
    };
    ResidualStats {
        dt,
        mean_abs_residual: mean_abs,
        se: (var_abs / n).sqrt(),
        n_paths: residuals.len() as u64,
        mean_residual: mean,
        mean_se: (var / n).sqrt(),
    }
}

/// Simulates `n_paths` forward paths and collects Ito residual statistics.
/// Reduction is index-ordered and worker-count independent.
#[allow(clippy::too_many_arguments)]
pub fn ito_residual_ensemble(
    phi: &TestFunction,
    coeffs: &SDDECoefficients,
    x0: &InitialPath,
    delays: &DelayFunctions,
    grid: &TimeGrid,
    jump_spec: &JumpSpec,
    chain_spec: &RegimeChainSpec,
    initial_state: usize,
    n_paths: u64,
    seed: u64,
) -> Result<ResidualStats> {
    if n_paths == 0 {
        return Err(Error::InvalidArgument("need at least one path".into()));
    }
    let residuals: Vec<f64> = (0..n_paths)
        .into_par_iter()
        .map(|i| -> Result<f64> {
            let noise = NoiseBundle::sample(chain_spec, jump_spec, grid, initial_state, seed, i)?;
            let path = simulate_sdde(coeffs, x0, delays, grid, jump_spec, chain_spec, &noise)?;
            ito_residual(phi, coeffs, delays, jump_spec, chain_spec, &noise, &path)
        })
        .collect::<Result<Vec<f64>>>()?;
    Ok(residual_stats(residuals, grid.dt()))
}

/// Simulates two coupled paths per draw (same noise) and collects
/// product-rule residual statistics.
#[allow(clippy::too_many_arguments)]
pub fn product_rule_residual_ensemble(
    coeffs1: &SDDECoefficients,
    x0_1: &InitialPath,
    coeffs2: &SDDECoefficients,
    x0_2: &InitialPath,
    delays: &DelayFunctions,
    grid: &TimeGrid,
    jump_spec: &JumpSpec,
    chain_spec: &RegimeChainSpec,
    initial_state: usize,
    n_paths: u64,
    seed: u64,
) -> Result<ResidualStats> {
    if n_paths == 0 {
        return Err(Error::InvalidArgument("need at least one path".into()));
    }
    let residuals: Vec<f64> = (0..n_paths)
        .into_par_iter()
        .map(|i| -> Result<f64> {
            let noise = NoiseBundle::sample(chain_spec, jump_spec, grid, initial_state, seed, i)?;
            let p1 = simulate_sdde(coeffs1, x0_1, delays, grid, jump_spec, chain_spec, &noise)?;
            let p2 = simulate_sdde(coeffs2, x0_2, delays, grid, jump_spec, chain_spec, &noise)?;
            product_rule_residual(
                coeffs1, &p1, coeffs2, &p2, delays, jump_spec, chain_spec, &noise,
            )
        })
        .collect::<Result<Vec<f64>>>()?;
    Ok(residual_stats(residuals, grid.dt()))
}

/// Writes residual statistics as CSV with header
/// `dt,mean_abs_residual,se,n_paths`.
pub fn write_residual_csv(
    stats: &[ResidualStats],
    preamble: &[String],
    out: &mut impl std::io::Write,
) -> std::io::Result<()> {
    for line in preamble {
        writeln!(out, "# {line}")?;
    }
    writeln!(out, "dt,mean_abs_residual,se,n_paths")?;
    for s in stats {
        writeln!(out, "{:.11e},{:.11e},{:.11e},{}", s.dt, s.mean_abs_residual, s.se, s.n_paths)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn two_state() -> RegimeChainSpec {
        RegimeChainSpec::new(vec![vec![-1.0, 1.0], vec![2.0, -2.0]]).unwrap()
    }

    fn rich_coeffs() -> SDDECoefficients {
        SDDECoefficients {
            drift: Box::new(|_, x, y, r| 0.3 * x + 0.2 * y + if r == 0 { 0.1 } else { -0.1 } * x),
            diffusion: Box::new(|_, x, y, _| 0.25 * x + 0.1 * y),
            jump: Box::new(|_, x, y, _, z| (0.2 * x + 0.1 * y) * z),
            switch: Box::new(|_, x, y, r| {
                if r == 0 {
                    vec![0.0, 0.1 * x + 0.05 * y]
                } else {
                    vec![-0.08 * x, 0.0]
                }
            }),
            lipschitz_c: 2.0,
        }
    }

    fn setup(k: usize, m: usize) -> (TimeGrid, JumpSpec, DelayFunctions, InitialPath) {
        let grid = TimeGrid::new(0.0, 1.0, k, m).unwrap();
        let jumps = JumpSpec::new(0.8, vec![(1.0, 0.5), (-0.5, 0.5)]).unwrap();
        let delays = DelayFunctions::constant(grid.delay());
        let x0 = InitialPath::from_fn(&grid, |t| 1.0 + 0.5 * t).unwrap();
        (grid, jumps, delays, x0)
    }

    #[test]
    fn derivative_spot_check_accepts_correct_partials() {
        let phi = TestFunction {
            phi: Box::new(|t, y, i| t * y * y + i as f64 * y),
            d_t: Box::new(|_, y, _| y * y),
            d_y: Box::new(|t, y, i| 2.0 * t * y + i as f64),
            d_yy: Box::new(|t, _, _| 2.0 * t),
        };
        phi.spot_check_derivatives(&[(0.5, 1.2, 0), (1.0, -0.7, 1)]).unwrap();
    }

    #[test]
    fn derivative_spot_check_rejects_wrong_partials() {
        let phi = TestFunction {
            phi: Box::new(|_, y, _| y * y),
            d_t: Box::new(|_, _, _| 0.0),
            d_y: Box::new(|_, y, _| 2.0 * y),
            d_yy: Box::new(|_, _, _| 3.0), // wrong
        };
        assert!(phi.spot_check_derivatives(&[(0.0, 1.0, 0)]).is_err());
    }

    #[test]
    fn identity_function_residual_vanishes() {
        let (grid, jumps, delays, x0) = setup(16, 4);
        let chain = two_state();
        let coeffs = rich_coeffs();
        for i in 0..8 {
            let noise = NoiseBundle::sample(&chain, &jumps, &grid, 0, 11, i).unwrap();
            let path = simulate_sdde(&coeffs, &x0, &delays, &grid, &jumps, &chain, &noise).unwrap();
            let r = ito_residual(&TestFunction::identity(), &coeffs, &delays, &jumps, &chain, &noise, &path)
                .unwrap();
            assert!(r.abs() < 1e-12, "path {i}: residual {r}");
        }
    }

    #[test]
    fn square_function_matches_product_rule_with_itself() {
        let (grid, jumps, delays, x0) = setup(16, 4);
        let chain = two_state();
        let coeffs = rich_coeffs();
        for i in 0..8 {
            let noise = NoiseBundle::sample(&chain, &jumps, &grid, 0, 12, i).unwrap();
            let path = simulate_sdde(&coeffs, &x0, &delays, &grid, &jumps, &chain, &noise).unwrap();
            let r_ito = ito_residual(&TestFunction::square(), &coeffs, &delays, &jumps, &chain, &noise, &path)
                .unwrap();
            let r_prod = product_rule_residual(
                &coeffs, &path, &coeffs, &path, &delays, &jumps, &chain, &noise,
            )
            .unwrap();
            assert!((r_ito - r_prod).abs() < 1e-12, "path {i}: {r_ito} vs {r_prod}");
        }
    }

    #[test]
    fn residual_is_linear_in_phi() {
        let (grid, jumps, delays, x0) = setup(12, 3);
        let chain = two_state();
        let coeffs = rich_coeffs();
        let noise = NoiseBundle::sample(&chain, &jumps, &grid, 0, 13, 0).unwrap();
        let path = simulate_sdde(&coeffs, &x0, &delays, &grid, &jumps, &chain, &noise).unwrap();
        let phi1 = TestFunction::square();
        let phi2 = TestFunction {
            phi: Box::new(|t, y, i| t * y + i as f64),
            d_t: Box::new(|_, y, _| y),
            d_y: Box::new(|t, _, _| t),
            d_yy: Box::new(|_, _, _| 0.0),
        };
        let (a, c) = (1.5, -2.0);
        let combo = TestFunction {
            phi: Box::new(move |t, y, i| a * y * y + c * (t * y + i as f64)),
            d_t: Box::new(move |_, y, _| c * y),
            d_y: Box::new(move |t, y, _| a * 2.0 * y + c * t),
            d_yy: Box::new(move |_, _, _| a * 2.0),
        };
        let r = |phi: &TestFunction| {
            ito_residual(phi, &coeffs, &delays, &jumps, &chain, &noise, &path).unwrap()
        };
        assert!((r(&combo) - (a * r(&phi1) + c * r(&phi2))).abs() < 1e-11);
    }

    #[test]
    fn drift_only_square_residual_is_exact_quadrature_error() {
        // Pure constant drift: the only residual source is sum (b dt)^2.
        let chain = RegimeChainSpec::new(vec![vec![0.0]]).unwrap();
        let grid = TimeGrid::new(0.0, 1.0, 10, 0).unwrap();
        let delays = DelayFunctions::constant(0.0);
        let x0 = InitialPath::constant(&grid, 1.0).unwrap();
        let mut coeffs = SDDECoefficients::zero(1);
        coeffs.drift = Box::new(|_, _, _, _| 0.5);
        let noise = NoiseBundle::sample(&chain, &JumpSpec::none(), &grid, 0, 1, 0).unwrap();
        let path =
            simulate_sdde(&coeffs, &x0, &delays, &grid, &JumpSpec::none(), &chain, &noise).unwrap();
        let r = ito_residual(
            &TestFunction::square(), &coeffs, &delays, &JumpSpec::none(), &chain, &noise, &path,
        )
        .unwrap();
        let expected = 10.0 * (0.5 * grid.dt()).powi(2);
        assert!((r - expected).abs() < 1e-13, "residual {r}, expected {expected}");
    }

    #[test]
    fn regime_indicator_residual_telescopes_exactly() {
        // With coefficients zero the chain terms carry the whole formula;
        // exact occupation bookkeeping makes the residual vanish pathwise.
        let (_, jumps, _, _) = setup(8, 2);
        let grid = TimeGrid::new(0.0, 1.0, 8, 2).unwrap();
        let delays = DelayFunctions::constant(grid.delay());
        let x0 = InitialPath::constant(&grid, 1.0).unwrap();
        let chain = two_state();
        let coeffs = SDDECoefficients::zero(2);
        let stats = ito_residual_ensemble(
            &TestFunction::regime_indicator(1),
            &coeffs, &x0, &delays, &grid, &jumps, &chain, 0, 500, 21,
        )
        .unwrap();
        assert!(stats.mean_abs_residual < 1e-12, "mean abs {}", stats.mean_abs_residual);
    }


    #[test]
    fn square_residual_shrinks_with_dt() {
        let chain = two_state();
        let jumps = JumpSpec::new(0.8, vec![(1.0, 0.5), (-0.5, 0.5)]).unwrap();
        let coeffs = rich_coeffs();
        let mut means = Vec::new();
        for k in [8usize, 32] {
            let grid = TimeGrid::new(0.0, 1.0, k, k / 4).unwrap();
            let delays = DelayFunctions::constant(grid.delay());
            let x0 = InitialPath::from_fn(&grid, |t| 1.0 + 0.5 * t).unwrap();
            let stats = ito_residual_ensemble(
                &TestFunction::square(),
                &coeffs, &x0, &delays, &grid, &jumps, &chain, 0, 2000, 31,
            )
            .unwrap();
            means.push(stats.mean_abs_residual);
        }
        assert!(
            means[1] < means[0] / 1.5,
            "mean abs residuals did not shrink: {means:?}"
        );
    }

    #[test]
    fn csv_output_has_required_header() {
        let stats = vec![ResidualStats {
            dt: 0.125,
            mean_abs_residual: 1e-3,
            se: 1e-4,
            n_paths: 100,
            mean_residual: 0.0,
            mean_se: 0.0,
        }];
        let mut buf = Vec::new();
        write_residual_csv(&stats, &["meta".into()], &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("# meta\ndt,mean_abs_residual,se,n_paths\n"));
        assert!(text.contains("1.25000000000e-1"));
    }
}
