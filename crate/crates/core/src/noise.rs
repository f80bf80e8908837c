//! Driving randomness: the finite-state Markov chain with its martingale
//! decomposition, the compensated compound-Poisson measure and Brownian
//! increments, all realized on a shared uniform time grid.
//!
//! The chain is sampled exactly in continuous time (exponential holding
//! times); transition times are kept at full precision and only aggregated
//! to grid cells when compensated increments are requested.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp, Normal, Poisson, Uniform};

use crate::error::{Error, Result};

/// Generator matrix of the observable continuous-time Markov chain.
///
/// Row `i` holds the transition intensities out of state `i`; the diagonal
/// is normalized at construction so every row sums to zero exactly.
#[derive(Debug, Clone)]
pub struct RegimeChainSpec {
    d: usize,
    lambda: Vec<f64>, // row-major D x D
}

impl RegimeChainSpec {
    /// Builds a generator from its rows. Off-diagonal entries must be
    /// strictly positive when `D > 1`; the diagonal is recomputed as the
    /// negated off-diagonal row sum.
    pub fn new(rows: Vec<Vec<f64>>) -> Result<Self> {
        let d = rows.len();
        if d == 0 {
            return Err(Error::InvalidSpec("generator must have at least one state".into()));
        }
        let mut lambda = vec![0.0; d * d];
        for (i, row) in rows.iter().enumerate() {
            if row.len() != d {
                return Err(Error::InvalidSpec(format!(
                    "generator row {i} has {} entries, expected {d}",
                    row.len()
                )));
            }
            let mut off_sum = 0.0;
            for (j, &v) in row.iter().enumerate() {
                if i != j {
                    if !(v > 0.0) && d > 1 {
                        return Err(Error::InvalidSpec(format!(
                            "generator entry ({i},{j}) = {v} must be strictly positive"
                        )));
                    }
                    lambda[i * d + j] = v;
                    off_sum += v;
                }
            }
            // Declared diagonal must be consistent before normalization.
            let declared = row[i];
            if (declared + off_sum).abs() > 1e-10 * (1.0 + off_sum.abs()) {
                return Err(Error::InvalidSpec(format!(
                    "generator row {i} sums to {} (diagonal {declared} vs off-diagonal {off_sum})",
                    declared + off_sum
                )));
            }
            lambda[i * d + i] = -off_sum;
        }
        Ok(Self { d, lambda })
    }

    pub fn num_states(&self) -> usize {
        self.d
    }

    pub fn rate(&self, i: usize, j: usize) -> f64 {
        self.lambda[i * self.d + j]
    }

    /// Total intensity out of state `i` (the negated diagonal).
    pub fn exit_rate(&self, i: usize) -> f64 {
        -self.lambda[i * self.d + i]
    }

    /// Instantaneous intensity of switching into `j` while the chain sits
    /// in `from`; zero into the own state.
    pub fn intensity_into(&self, from: usize, j: usize) -> f64 {
        if from == j {
            0.0
        } else {
            self.rate(from, j)
        }
    }

    /// Re-asserts the row-sum-zero invariant; run before every simulation.
    pub fn assert_valid(&self) -> Result<()> {
        for i in 0..self.d {
            let s: f64 = (0..self.d).map(|j| self.lambda[i * self.d + j]).sum();
            if s.abs() > 1e-12 {
                return Err(Error::InvalidSpec(format!("generator row {i} sums to {s}")));
            }
        }
        Ok(())
    }
}

/// Uniform grid on `[t0, t_end]` with `steps` cells, extended to the left by
/// `delay_steps` history nodes so the delay is grid-aligned: delta = m * dt.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TimeGrid {
    t0: f64,
    t_end: f64,
    steps: usize,
    delay_steps: usize,
}

impl TimeGrid {
    pub fn new(t0: f64, t_end: f64, steps: usize, delay_steps: usize) -> Result<Self> {
        if !(t0 < t_end) {
            return Err(Error::InvalidSpec(format!("need t0 < T, got [{t0}, {t_end}]")));
        }
        if steps == 0 {
            return Err(Error::InvalidSpec("step count must be positive".into()));
        }
        Ok(Self { t0, t_end, steps, delay_steps })
    }

    pub fn t0(&self) -> f64 {
        self.t0
    }

    pub fn t_end(&self) -> f64 {
        self.t_end
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn delay_steps(&self) -> usize {
        self.delay_steps
    }

    pub fn dt(&self) -> f64 {
        (self.t_end - self.t0) / self.steps as f64
    }

    pub fn delay(&self) -> f64 {
        self.delay_steps as f64 * self.dt()
    }

    /// Node time for `k` in `-delay_steps ..= steps`.
    pub fn node_time(&self, k: i64) -> f64 {
        self.t0 + k as f64 * self.dt()
    }

    /// Greatest node index with node time <= `t` (cadlag left-point lookup),
    /// clamped to the grid span including history. Tolerates a few ulps of
    /// float noise around node times.
    pub fn node_at_or_before(&self, t: f64) -> i64 {
        let r = (t - self.t0) / self.dt();
        let k = (r + 1e-9 * (1.0 + r.abs())).floor() as i64;
        k.clamp(-(self.delay_steps as i64), self.steps as i64)
    }
}

/// Realized chain trajectory: exact transition times plus per-node states
/// in the left-limit convention (`states[k]` is the regime at `t_k-`).
#[derive(Debug, Clone)]
pub struct ChainPath {
    grid: TimeGrid,
    states: Vec<usize>,
    final_state: usize,
    transitions: Vec<(f64, usize, usize)>,
}

impl ChainPath {
    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    /// Regime in force just before node `k` (`alpha(t_k-)`), `k in 0..=K`.
    pub fn state_before(&self, k: usize) -> usize {
        self.states[k]
    }

    /// Regime after the last transition on the grid span (`alpha(t_end)`).
    pub fn final_state(&self) -> usize {
        self.final_state
    }

    pub fn transitions(&self) -> &[(f64, usize, usize)] {
        &self.transitions
    }

    /// Builds a path from explicit transitions; used by tests and by the
    /// discrete-dynamics samplers. Transition times must be increasing and
    /// inside `(t0, t_end]`.
    pub fn from_transitions(
        grid: TimeGrid,
        initial_state: usize,
        transitions: Vec<(f64, usize, usize)>,
    ) -> Result<Self> {
        let mut prev = grid.t0();
        let mut state = initial_state;
        for &(t, from, to) in &transitions {
            if t <= prev && prev > grid.t0() {
                return Err(Error::InvalidArgument("transition times must be increasing".into()));
            }
            if t <= grid.t0() || t > grid.t_end() + 1e-12 {
                return Err(Error::InvalidArgument(format!(
                    "transition time {t} outside ({}, {}]",
                    grid.t0(),
                    grid.t_end()
                )));
            }
            if from != state {
                return Err(Error::InvalidArgument(format!(
                    "transition at {t} leaves state {from} but chain is in {state}"
                )));
            }
            state = to;
            prev = t;
        }
        Ok(Self::assemble(grid, initial_state, transitions))
    }

    fn assemble(grid: TimeGrid, initial_state: usize, transitions: Vec<(f64, usize, usize)>) -> Self {
        let k_max = grid.steps();
        let mut states = Vec::with_capacity(k_max + 1);
        let mut state = initial_state;
        let mut idx = 0;
        for k in 0..=k_max {
            let t_k = grid.node_time(k as i64);
            while idx < transitions.len() && transitions[idx].0 < t_k {
                state = transitions[idx].2;
                idx += 1;
            }
            states.push(state);
        }
        let final_state = transitions.last().map_or(initial_state, |&(_, _, to)| to);
        Self { grid, states, final_state, transitions }
    }

    /// Number of i -> j transitions up to and including time `t`.
    pub fn jump_counts(&self, i: usize, j: usize, t: f64) -> Result<u64> {
        if i == j {
            return Err(Error::InvalidArgument("jump counts require i != j".into()));
        }
        if t < self.grid.t0() - 1e-12 || t > self.grid.t_end() + 1e-12 {
            return Err(Error::InvalidArgument(format!("time {t} outside grid span")));
        }
        Ok(self
            .transitions
            .iter()
            .take_while(|&&(s, _, _)| s <= t)
            .filter(|&&(_, from, to)| from == i && to == j)
            .count() as u64)
    }

    /// Cumulative integrated intensity `lambda_j(t)` from exact occupation
    /// times (the compensator of `Phi_j`).
    pub fn cumulative_intensity(&self, spec: &RegimeChainSpec, j: usize, t: f64) -> f64 {
        let mut acc = 0.0;
        let mut state = self.states[0];
        let mut s = self.grid.t0();
        for &(tau, _, to) in &self.transitions {
            if tau >= t {
                break;
            }
            acc += spec.intensity_into(state, j) * (tau - s);
            state = to;
            s = tau;
        }
        acc + spec.intensity_into(state, j) * (t - s)
    }
}

/// Per-cell aggregates of the chain: switch counts into each state, exact
/// occupation-integrated intensities and the compensated increments
/// `dPhi~_j = dPhi_j - int lambda'_j ds`.
#[derive(Debug, Clone)]
pub struct ChainCellStats {
    d: usize,
    switches_into: Vec<f64>,
    integrated_intensity: Vec<f64>,
}

impl ChainCellStats {
    pub fn compute(path: &ChainPath, spec: &RegimeChainSpec) -> Result<Self> {
        spec.assert_valid()?;
        let d = spec.num_states();
        let grid = path.grid();
        let k_max = grid.steps();
        let mut switches_into = vec![0.0; k_max * d];
        let mut integrated_intensity = vec![0.0; k_max * d];

        let mut state = path.state_before(0);
        let mut idx = 0;
        for k in 0..k_max {
            let a = grid.node_time(k as i64);
            let b = grid.node_time(k as i64 + 1);
            let mut s = a;
            while idx < path.transitions.len() && path.transitions[idx].0 <= b {
                let (tau, _, to) = path.transitions[idx];
                debug_assert!(tau > a - 1e-12);
                for j in 0..d {
                    integrated_intensity[k * d + j] += spec.intensity_into(state, j) * (tau - s);
                }
                switches_into[k * d + to] += 1.0;
                state = to;
                s = tau;
                idx += 1;
            }
            for j in 0..d {
                integrated_intensity[k * d + j] += spec.intensity_into(state, j) * (b - s);
            }
        }
        Ok(Self { d, switches_into, integrated_intensity })
    }

    pub fn switches_into(&self, k: usize) -> &[f64] {
        &self.switches_into[k * self.d..(k + 1) * self.d]
    }

    /// Exact `int_{t_k}^{t_{k+1}} lambda'_j(s) ds` for each j.
    pub fn integrated_intensity(&self, k: usize) -> &[f64] {
        &self.integrated_intensity[k * self.d..(k + 1) * self.d]
    }

    /// Compensated martingale increment over cell `k`, component `j`.
    pub fn compensated_increment(&self, k: usize, j: usize) -> f64 {
        self.switches_into[k * self.d + j] - self.integrated_intensity[k * self.d + j]
    }
}

/// Per-cell compensated chain increments as a flat matrix.
pub fn compensated_chain_increments(path: &ChainPath, spec: &RegimeChainSpec) -> Result<Vec<Vec<f64>>> {
    let stats = ChainCellStats::compute(path, spec)?;
    let d = spec.num_states();
    Ok((0..path.grid().steps())
        .map(|k| (0..d).map(|j| stats.compensated_increment(k, j)).collect())
        .collect())
}

/// Finite-activity mark distribution: the Levy measure is
/// `nu = rate * mark-law` on a finite set of nonzero marks.
#[derive(Debug, Clone)]
pub struct JumpSpec {
    rate: f64,
    marks: Vec<(f64, f64)>, // (mark, weight)
}

impl JumpSpec {
    pub fn new(rate: f64, marks: Vec<(f64, f64)>) -> Result<Self> {
        if !(rate >= 0.0) {
            return Err(Error::InvalidSpec(format!("jump rate {rate} must be nonnegative")));
        }
        if rate > 0.0 {
            if marks.is_empty() {
                return Err(Error::InvalidSpec("positive jump rate requires at least one mark".into()));
            }
            let wsum: f64 = marks.iter().map(|&(_, w)| w).sum();
            if (wsum - 1.0).abs() > 1e-12 {
                return Err(Error::InvalidSpec(format!("mark weights sum to {wsum}, expected 1")));
            }
            for &(z, w) in &marks {
                if z == 0.0 {
                    return Err(Error::InvalidSpec("marks must be nonzero (nu({0}) = 0)".into()));
                }
                if !(w > 0.0) {
                    return Err(Error::InvalidSpec(format!("mark weight {w} must be positive")));
                }
            }
        }
        Ok(Self { rate, marks })
    }

    /// A spec with no jump activity.
    pub fn none() -> Self {
        Self { rate: 0.0, marks: Vec::new() }
    }

    pub fn rate(&self) -> f64 {
        self.rate
    }

    pub fn marks(&self) -> &[(f64, f64)] {
        &self.marks
    }

    /// Point mass `nu({z})` of the Levy measure.
    pub fn levy_mass(&self, z: f64) -> f64 {
        self.rate
            * self
                .marks
                .iter()
                .filter(|&&(m, _)| m == z)
                .map(|&(_, w)| w)
                .sum::<f64>()
    }

    /// `int f(z) nu(dz)` as an exact finite sum.
    pub fn compensator_integral(&self, f: impl Fn(f64) -> f64) -> f64 {
        self.rate * self.marks.iter().map(|&(z, w)| w * f(z)).sum::<f64>()
    }

    /// Mean mark under the mark law (not scaled by the rate).
    pub fn mean_mark(&self) -> f64 {
        self.marks.iter().map(|&(z, w)| w * z).sum()
    }
}

/// `int f(z) nu(dz)` for a finite-activity spec.
pub fn jump_compensator_integral(spec: &JumpSpec, f: impl Fn(f64) -> f64) -> f64 {
    spec.compensator_integral(f)
}

/// Realized compound-Poisson events, ordered by time.
#[derive(Debug, Clone, Default)]
pub struct JumpPath {
    events: Vec<(f64, f64)>, // (time, mark)
}

impl JumpPath {
    pub fn events(&self) -> &[(f64, f64)] {
        &self.events
    }

    /// Events with time in `(a, b]`.
    pub fn events_in(&self, a: f64, b: f64) -> &[(f64, f64)] {
        let lo = self.events.partition_point(|&(t, _)| t <= a);
        let hi = self.events.partition_point(|&(t, _)| t <= b);
        &self.events[lo..hi]
    }
}

/// Deterministic per-path RNG stream keyed by `(seed, path_index)`, so an
/// ensemble is reproducible regardless of how paths are scheduled across
/// workers.
pub fn path_rng(seed: u64, path_index: u64) -> ChaCha8Rng {
    let mut key = [0u8; 32];
    key[..8].copy_from_slice(&seed.to_le_bytes());
    key[8..16].copy_from_slice(&path_index.to_le_bytes());
    key[16..24].copy_from_slice(b"sddejr\0\0");
    ChaCha8Rng::from_seed(key)
}

/// Exact continuous-time (Gillespie) chain sampling: exponential holding
/// times at rate `-lambda_ii`, next state proportional to `lambda_ij`.
pub fn sample_chain_path(
    spec: &RegimeChainSpec,
    grid: &TimeGrid,
    initial_state: usize,
    rng: &mut ChaCha8Rng,
) -> Result<ChainPath> {
    spec.assert_valid()?;
    let d = spec.num_states();
    if initial_state >= d {
        return Err(Error::InvalidArgument(format!(
            "initial state {initial_state} out of range for D={d}"
        )));
    }
    let mut transitions = Vec::new();
    let mut state = initial_state;
    let mut t = grid.t0();
    if d > 1 {
        loop {
            let exit = spec.exit_rate(state);
            if exit <= 0.0 {
                return Err(Error::InvalidSpec(format!(
                    "degenerate generator row {state}: exit rate is zero with D > 1"
                )));
            }
            let hold = Exp::new(exit).expect("positive rate").sample(rng);
            t += hold;
            if t > grid.t_end() {
                break;
            }
            // Next state proportional to off-diagonal intensities.
            let u: f64 = Uniform::new(0.0, 1.0).expect("unit interval").sample(rng);
            let mut acc = 0.0;
            let mut next = state;
            for j in 0..d {
                if j == state {
                    continue;
                }
                acc += spec.rate(state, j) / exit;
                if u <= acc {
                    next = j;
                    break;
                }
            }
            if next == state {
                next = (0..d).rev().find(|&j| j != state).unwrap();
            }
            transitions.push((t, state, next));
            state = next;
        }
    }
    Ok(ChainPath::assemble(*grid, initial_state, transitions))
}

/// Compound-Poisson event sampling: Poisson count over the span, uniform
/// event times, i.i.d. marks.
pub fn sample_jump_path(spec: &JumpSpec, grid: &TimeGrid, rng: &mut ChaCha8Rng) -> JumpPath {
    if spec.rate() == 0.0 {
        return JumpPath::default();
    }
    let span = grid.t_end() - grid.t0();
    let n = Poisson::new(spec.rate() * span).expect("positive mean").sample(rng) as usize;
    let time_dist = Uniform::new(grid.t0(), grid.t_end()).expect("nonempty span");
    let mark_dist = Uniform::new(0.0f64, 1.0).expect("unit interval");
    let mut events: Vec<(f64, f64)> = (0..n)
        .map(|_| {
            let t = time_dist.sample(rng);
            let u = mark_dist.sample(rng);
            let mut acc = 0.0;
            let mut mark = spec.marks().last().expect("nonempty marks").0;
            for &(z, w) in spec.marks() {
                acc += w;
                if u <= acc {
                    mark = z;
                    break;
                }
            }
            (t, mark)
        })
        .collect();
    events.sort_by(|a, b| a.0.partial_cmp(&b.0).expect("finite times"));
    JumpPath { events }
}

/// All driving randomness for one path on a shared grid.
#[derive(Debug, Clone)]
pub struct NoiseBundle {
    pub chain: ChainPath,
    pub jumps: JumpPath,
    /// Brownian increments per cell, length `steps`.
    pub brownian_increments: Vec<f64>,
}

impl NoiseBundle {
    /// Samples chain, jumps and Brownian increments from the `(seed,
    /// path_index)` stream. The draw order is fixed, so two runs with the
    /// same key are bit-identical under any worker count.
    pub fn sample(
        chain_spec: &RegimeChainSpec,
        jump_spec: &JumpSpec,
        grid: &TimeGrid,
        initial_state: usize,
        seed: u64,
        path_index: u64,
    ) -> Result<Self> {
        let mut rng = path_rng(seed, path_index);
        let chain = sample_chain_path(chain_spec, grid, initial_state, &mut rng)?;
        let jumps = sample_jump_path(jump_spec, grid, &mut rng);
        let normal = Normal::new(0.0, grid.dt().sqrt()).expect("positive dt");
        let brownian_increments = (0..grid.steps()).map(|_| normal.sample(&mut rng)).collect();
        Ok(Self { chain, jumps, brownian_increments })
    }

    pub fn grid(&self) -> &TimeGrid {
        self.chain.grid()
    }
}
