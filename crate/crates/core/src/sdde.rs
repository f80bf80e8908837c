//! Forward Euler path engine for the delayed regime-switching jump
//! diffusion, with pre-history handling and numerical validation of the
//! delay and Lipschitz assumptions.
//!
//! Coefficients are evaluated at the left endpoint of every cell
//! (predictable convention); delay lookups take the value at the greatest
//! node at or before the lagged time, which preserves adaptedness across
//! jumps.

use std::io::Write;

use rand_distr::{Distribution, Uniform};

use crate::error::{Error, Result};
use crate::noise::{path_rng, ChainCellStats, ChainPath, JumpSpec, NoiseBundle, RegimeChainSpec, TimeGrid};

pub type StateCoeffFn = Box<dyn Fn(f64, f64, f64, usize) -> f64 + Send + Sync>;
pub type JumpCoeffFn = Box<dyn Fn(f64, f64, f64, usize, f64) -> f64 + Send + Sync>;
pub type SwitchCoeffFn = Box<dyn Fn(f64, f64, f64, usize) -> Vec<f64> + Send + Sync>;
pub type DelayFn = Box<dyn Fn(f64) -> f64 + Send + Sync>;

/// The four delay maps `delta_i(t)` with their declared bound `delta` and
/// the constant `L` of the delay change-of-variables inequality.
pub struct DelayFunctions {
    delays: [DelayFn; 4],
    bound: f64,
    l_constant: f64,
}

impl DelayFunctions {
    pub fn new(delays: [DelayFn; 4], bound: f64, l_constant: f64) -> Self {
        Self { delays, bound, l_constant }
    }

    /// Uniform constant delay `delta_i(t) = delta`, for which `L = 1`.
    pub fn constant(delta: f64) -> Self {
        let mk = || -> DelayFn { Box::new(move |_t| delta) };
        Self { delays: [mk(), mk(), mk(), mk()], bound: delta, l_constant: 1.0 }
    }

    pub fn delay(&self, i: usize, t: f64) -> f64 {
        (self.delays[i])(t)
    }

    pub fn bound(&self) -> f64 {
        self.bound
    }

    pub fn l_constant(&self) -> f64 {
        self.l_constant
    }
}

/// Pre-history segment on `[t0 - delta, t0]`, stored at history grid nodes.
#[derive(Debug, Clone)]
pub struct InitialPath {
    values: Vec<f64>, // nodes -m ..= 0
}

impl InitialPath {
    pub fn from_fn(grid: &TimeGrid, f: impl Fn(f64) -> f64) -> Result<Self> {
        let m = grid.delay_steps() as i64;
        let values: Vec<f64> = (-m..=0).map(|k| f(grid.node_time(k))).collect();
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidSpec("initial path has non-finite values".into()));
        }
        Ok(Self { values })
    }

    pub fn constant(grid: &TimeGrid, c: f64) -> Result<Self> {
        Self::from_fn(grid, |_| c)
    }

    /// Value at history node `k` in `-m ..= 0`.
    pub fn node_value(&self, k: i64) -> f64 {
        let m = self.values.len() as i64 - 1;
        self.values[(k + m) as usize]
    }

    /// Sup norm over the history segment.
    pub fn sup_norm(&self) -> f64 {
        self.values.iter().fold(0.0f64, |a, v| a.max(v.abs()))
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

/// Coefficient callbacks of the forward equation, with the declared
/// Lipschitz constant of (H1).
pub struct SDDECoefficients {
    pub drift: StateCoeffFn,
    pub diffusion: StateCoeffFn,
    pub jump: JumpCoeffFn,
    pub switch: SwitchCoeffFn,
    pub lipschitz_c: f64,
}

impl SDDECoefficients {
    pub fn zero(d: usize) -> Self {
        Self {
            drift: Box::new(|_, _, _, _| 0.0),
            diffusion: Box::new(|_, _, _, _| 0.0),
            jump: Box::new(|_, _, _, _, _| 0.0),
            switch: Box::new(move |_, _, _, _| vec![0.0; d]),
            lipschitz_c: 1.0,
        }
    }

    /// (H1) spot-check: on randomized argument pairs the Lipschitz quotient
    /// of each coefficient (jump in the J-norm, switch in the S-norm) must
    /// not exceed the declared bound by more than 1%.
    pub fn spot_check_lipschitz(
        &self,
        chain: &RegimeChainSpec,
        jumps: &JumpSpec,
        grid: &TimeGrid,
        samples: usize,
        seed: u64,
    ) -> Result<()> {
        let mut rng = path_rng(seed, u64::MAX);
        let t_dist = Uniform::new(grid.t0(), grid.t_end()).expect("span");
        let x_dist = Uniform::new(-5.0f64, 5.0).expect("range");
        let c = self.lipschitz_c;
        for _ in 0..samples {
            let t = t_dist.sample(&mut rng);
            let (x1, y1, x2, y2) = (
                x_dist.sample(&mut rng),
                x_dist.sample(&mut rng),
                x_dist.sample(&mut rng),
                x_dist.sample(&mut rng),
            );
            let budget = c * ((x1 - x2).abs() + (y1 - y2).abs());
            if budget == 0.0 {
                continue;
            }
            for regime in 0..chain.num_states() {
                let db = ((self.drift)(t, x1, y1, regime) - (self.drift)(t, x2, y2, regime)).abs();
                let ds =
                    ((self.diffusion)(t, x1, y1, regime) - (self.diffusion)(t, x2, y2, regime)).abs();
                let dj = jumps
                    .compensator_integral(|z| {
                        ((self.jump)(t, x1, y1, regime, z) - (self.jump)(t, x2, y2, regime, z))
                            .powi(2)
                    })
                    .sqrt();
                let g1 = (self.switch)(t, x1, y1, regime);
                let g2 = (self.switch)(t, x2, y2, regime);
                let dg = (0..chain.num_states())
                    .map(|j| (g1[j] - g2[j]).powi(2) * chain.intensity_into(regime, j))
                    .sum::<f64>()
                    .sqrt();
                let worst = db.max(ds).max(dj).max(dg);
                if worst > 1.01 * budget {
                    return Err(Error::InvalidSpec(format!(
                        "Lipschitz spot-check failed at t={t}, regime {regime}: quotient {} exceeds declared {}",
                        worst / ((x1 - x2).abs() + (y1 - y2).abs()),
                        c
                    )));
                }
            }
        }
        Ok(())
    }

    /// (H2) spot-check: coefficients at the origin are finite on the grid.
    pub fn spot_check_origin(&self, chain: &RegimeChainSpec, jumps: &JumpSpec, grid: &TimeGrid) -> Result<()> {
        for k in 0..=grid.steps() {
            let t = grid.node_time(k as i64);
            for regime in 0..chain.num_states() {
                let mut vals = vec![
                    (self.drift)(t, 0.0, 0.0, regime),
                    (self.diffusion)(t, 0.0, 0.0, regime),
                ];
                for &(z, _) in jumps.marks() {
                    vals.push((self.jump)(t, 0.0, 0.0, regime, z));
                }
                vals.extend((self.switch)(t, 0.0, 0.0, regime));
                if vals.iter().any(|v| !v.is_finite()) {
                    return Err(Error::InvalidSpec(format!(
                        "coefficient non-finite at the origin, t={t}, regime {regime}"
                    )));
                }
            }
        }
        Ok(())
    }
}

/// A scalar path on the full grid including pre-history, with cadlag
/// left-point lookup between nodes.
#[derive(Debug, Clone, PartialEq)]
pub struct DelayedPath {
    grid: TimeGrid,
    values: Vec<f64>, // nodes -m ..= K
}

impl DelayedPath {
    pub fn from_values(grid: TimeGrid, values: Vec<f64>) -> Result<Self> {
        if values.len() != grid.delay_steps() + grid.steps() + 1 {
            return Err(Error::InvalidArgument(format!(
                "path has {} values, grid needs {}",
                values.len(),
                grid.delay_steps() + grid.steps() + 1
            )));
        }
        Ok(Self { grid, values })
    }

    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    /// Value at node `k` in `-m ..= K`.
    pub fn node_value(&self, k: i64) -> f64 {
        self.values[(k + self.grid.delay_steps() as i64) as usize]
    }

    /// Value at the greatest node at or before `t`.
    pub fn lookup(&self, t: f64) -> f64 {
        self.node_value(self.grid.node_at_or_before(t))
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Values on `[t0, T]` only (nodes `0 ..= K`).
    pub fn forward_values(&self) -> &[f64] {
        &self.values[self.grid.delay_steps()..]
    }
}

/// Outcome of the (A1)/(A2) numerical validation.
#[derive(Debug, Clone, serde::Serialize)]
pub struct AssumptionReport {
    /// Largest violation of `0 <= delta_i(t) <= t - t0 + delta` on the grid.
    pub a1_max_violation: f64,
    /// Empirical `L`: worst ratio of lagged to plain integrals over
    /// randomized nonnegative step functions.
    pub empirical_l: f64,
    pub declared_l: f64,
    pub l_exceeded: bool,
}

/// Checks (A1) at every node (hard error on violation, the simulation would
/// need future values) and estimates the (A2) constant over randomized
/// nonnegative step functions.
pub fn validate_assumptions(delays: &DelayFunctions, grid: &TimeGrid) -> Result<AssumptionReport> {
    let dt = grid.dt();
    let mut a1_max_violation = 0.0f64;
    for k in 0..=grid.steps() {
        let t = grid.node_time(k as i64);
        for i in 0..4 {
            let d = delays.delay(i, t);
            let lo_violation = -d; // delta_i(t) < 0
            let hi_violation = d - (t - grid.t0() + delays.bound()); // reaches before t0 - delta
            let v = lo_violation.max(hi_violation);
            a1_max_violation = a1_max_violation.max(v);
            if v > 1e-9 {
                return Err(Error::InvalidArgument(format!(
                    "(A1) violated at t={t} for delta_{}: lag {d} leaves [0, t - t0 + delta]",
                    i + 1
                )));
            }
            // Continuity probe: bounded difference between adjacent nodes.
            if k > 0 {
                let prev = delays.delay(i, grid.node_time(k as i64 - 1));
                if (d - prev).abs() > 10.0 * (dt + delays.bound()) {
                    return Err(Error::InvalidArgument(format!(
                        "delta_{} jumps by {} across one grid cell",
                        i + 1,
                        (d - prev).abs()
                    )));
                }
            }
        }
    }

    // (A2): sum_k g(t_k - delta_i(t_k)) dt <= L * int_{t0-delta}^{T} g, over
    // random nonnegative step functions g on the extended grid.
    let m = grid.delay_steps() as i64;
    let mut rng = path_rng(0x5dde, u64::MAX - 1);
    let u = Uniform::new(0.0f64, 1.0).expect("unit interval");
    let mut empirical_l = 0.0f64;
    for _ in 0..100 {
        let g: Vec<f64> = (0..(grid.delay_steps() + grid.steps() + 1))
            .map(|_| u.sample(&mut rng))
            .collect();
        let g_at = |k: i64| g[(k + m) as usize];
        let total: f64 = (-m..grid.steps() as i64).map(g_at).sum::<f64>() * dt;
        if total == 0.0 {
            continue;
        }
        for i in 0..4 {
            let lagged: f64 = (0..grid.steps() as i64)
                .map(|k| {
                    let t = grid.node_time(k);
                    g_at(grid.node_at_or_before(t - delays.delay(i, t)))
                })
                .sum::<f64>()
                * dt;
            empirical_l = empirical_l.max(lagged / total);
        }
    }
    Ok(AssumptionReport {
        a1_max_violation,
        empirical_l,
        declared_l: delays.l_constant(),
        // One-cell quadrature slack on the ratio estimate.
        l_exceeded: empirical_l > delays.l_constant() * (1.0 + 2.0 * dt),
    })
}

fn check_finite(x: f64, step: usize, context: &str) -> Result<f64> {
    if x.is_finite() {
        Ok(x)
    } else {
        Err(Error::NumericalBlowup { step, context: context.into() })
    }
}

/// Explicit Euler solution of the forward equation on the given noise.
///
/// Per cell `k`: drift and diffusion at the left endpoint, realized jumps
/// minus their exact compensator, and the switch coefficient against the
/// compensated chain increment (exact occupation times).
pub fn simulate_sdde(
    coeffs: &SDDECoefficients,
    x0: &InitialPath,
    delays: &DelayFunctions,
    grid: &TimeGrid,
    jump_spec: &JumpSpec,
    chain_spec: &RegimeChainSpec,
    noise: &NoiseBundle,
) -> Result<DelayedPath> {
    chain_spec.assert_valid()?;
    if x0.len() != grid.delay_steps() + 1 {
        return Err(Error::InvalidArgument("initial path does not match grid history".into()));
    }
    let m = grid.delay_steps() as i64;
    let k_max = grid.steps();
    let stats = ChainCellStats::compute(&noise.chain, chain_spec)?;
    let d = chain_spec.num_states();

    let mut values = Vec::with_capacity((m as usize) + k_max + 1);
    for k in -m..=0 {
        values.push(x0.node_value(k));
    }
    let mut path = DelayedPath { grid: *grid, values };
    path.values.resize((m as usize) + k_max + 1, 0.0);

    for k in 0..k_max {
        let t = grid.node_time(k as i64);
        let x = path.node_value(k as i64);
        let regime = noise.chain.state_before(k);
        let lag = |i: usize| path.lookup(t - delays.delay(i, t));
        let (y1, y2, y3, y4) = (lag(0), lag(1), lag(2), lag(3));

        let mut next = x + (coeffs.drift)(t, x, y1, regime) * grid.dt();
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

        let idx = (k as i64 + 1 + m) as usize;
        path.values[idx] = check_finite(next, k, "forward Euler step")?;
    }
    Ok(path)
}

/// Coefficient data for the auxiliary linear equation and the linear
/// backward driver: all callbacks depend on time and regime only.
pub struct LinearABSDEData {
    pub b: Box<dyn Fn(f64, usize) -> f64 + Send + Sync>,
    pub b_bar: Box<dyn Fn(f64, usize) -> f64 + Send + Sync>,
    pub sigma: Box<dyn Fn(f64, usize) -> f64 + Send + Sync>,
    pub sigma_bar: Box<dyn Fn(f64, usize) -> f64 + Send + Sync>,
    pub eta: Box<dyn Fn(f64, usize, f64) -> f64 + Send + Sync>,
    pub eta_bar: Box<dyn Fn(f64, usize, f64) -> f64 + Send + Sync>,
    pub gamma: Box<dyn Fn(f64, usize) -> Vec<f64> + Send + Sync>,
    pub gamma_bar: Box<dyn Fn(f64, usize) -> Vec<f64> + Send + Sync>,
    pub running_cost: Box<dyn Fn(f64, usize) -> f64 + Send + Sync>,
    /// Declared uniform bound on all coefficients.
    pub bound: f64,
}

impl LinearABSDEData {
    pub fn zero(d: usize) -> Self {
        let scalar = || -> Box<dyn Fn(f64, usize) -> f64 + Send + Sync> { Box::new(|_, _| 0.0) };
        let vector = move || -> Box<dyn Fn(f64, usize) -> Vec<f64> + Send + Sync> {
            Box::new(move |_, _| vec![0.0; d])
        };
        Self {
            b: scalar(),
            b_bar: scalar(),
            sigma: scalar(),
            sigma_bar: scalar(),
            eta: Box::new(|_, _, _| 0.0),
            eta_bar: Box::new(|_, _, _| 0.0),
            gamma: vector(),
            gamma_bar: vector(),
            running_cost: scalar(),
            bound: 0.0,
        }
    }

    /// Uniform-boundedness spot-check over grid times and regimes.
    pub fn spot_check_bound(&self, chain: &RegimeChainSpec, jumps: &JumpSpec, grid: &TimeGrid) -> Result<()> {
        let d = chain.num_states();
        for k in 0..=grid.steps() {
            let t = grid.node_time(k as i64);
            for regime in 0..d {
                let mut vals = vec![
                    (self.b)(t, regime),
                    (self.b_bar)(t, regime),
                    (self.sigma)(t, regime),
                    (self.sigma_bar)(t, regime),
                    (self.running_cost)(t, regime),
                ];
                for &(z, _) in jumps.marks() {
                    vals.push((self.eta)(t, regime, z));
                    vals.push((self.eta_bar)(t, regime, z));
                }
                vals.extend((self.gamma)(t, regime));
                vals.extend((self.gamma_bar)(t, regime));
                for v in vals {
                    if !v.is_finite() || v.abs() > self.bound + 1e-12 {
                        return Err(Error::InvalidSpec(format!(
                            "coefficient {v} at t={t}, regime {regime} exceeds declared bound {}",
                            self.bound
                        )));
                    }
                }
            }
        }
        Ok(())
    }
}

/// Euler solution of the auxiliary linear equation with unit initial value
/// and zero pre-history: `X(t0) = 1`, `X(s) = 0` on `[t0 - delta, t0)`.
///
/// The grid spans `[t0, T + delta]`; on the first delay segment the lagged
/// factor is zero and the dynamics reduce to the delay-free linear SDE.
pub fn simulate_linear_sdde(
    data: &LinearABSDEData,
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

    let mut values = vec![0.0; (m as usize) + k_max + 1];
    values[m as usize] = 1.0;
    let mut path = DelayedPath { grid: *grid, values };

    for k in 0..k_max {
        let t = grid.node_time(k as i64);
        let x = path.node_value(k as i64);
        let regime = noise.chain.state_before(k);
        let ki = k as i64;

        // Node value of the lagged factor; the bar coefficients are frozen
        // at the lagged time and regime. Before t0 + delta the lag is zero.
        let (x_lag, x_lag_minus, t_lag, regime_lag) = if ki >= m {
            let lag_minus = if ki == m { 0.0 } else { path.node_value(ki - m) };
            (
                path.node_value(ki - m),
                lag_minus,
                grid.node_time(ki - m),
                noise.chain.state_before((ki - m) as usize),
            )
        } else {
            (0.0, 0.0, t, regime)
        };

        let mut next = x
            + ((data.b)(t, regime) * x + (data.b_bar)(t_lag, regime_lag) * x_lag) * grid.dt();
        next += ((data.sigma)(t, regime) * x + (data.sigma_bar)(t_lag, regime_lag) * x_lag)
            * noise.brownian_increments[k];

        let t_next = grid.node_time(ki + 1);
        let jump_coeff = |z: f64| {
            (data.eta)(t, regime, z) * x + (data.eta_bar)(t_lag, regime_lag, z) * x_lag_minus
        };
        for &(_, z) in noise.jumps.events_in(t, t_next) {
            next += jump_coeff(z);
        }
        next -= grid.dt() * jump_spec.compensator_integral(jump_coeff);

        let gamma = (data.gamma)(t, regime);
        let gamma_bar = (data.gamma_bar)(t_lag, regime_lag);
        for j in 0..d {
            next += (gamma[j] * x + gamma_bar[j] * x_lag_minus) * stats.compensated_increment(k, j);
        }

        let idx = (ki + 1 + m) as usize;
        path.values[idx] = check_finite(next, k, "linear Euler step")?;
    }
    Ok(path)
}

/// Writes a path as CSV with mandatory header `k,t,regime,X`; times carry
/// 12 significant digits. Lines starting with `#` (metadata) may precede
/// the header.
pub fn write_path_csv(
    path: &DelayedPath,
    chain: &ChainPath,
    preamble: &[String],
    out: &mut impl Write,
) -> std::io::Result<()> {
    for line in preamble {
        writeln!(out, "# {line}")?;
    }
    writeln!(out, "k,t,regime,X")?;
    let grid = path.grid();
    let m = grid.delay_steps() as i64;
    for k in -m..=grid.steps() as i64 {
        let regime = chain.state_before(k.max(0) as usize);
        writeln!(out, "{},{:.11e},{},{:.11e}", k, grid.node_time(k), regime, path.node_value(k))?;
    }
    Ok(())
}
