//! Independent verification route: an exhaustive discrete scenario tree for
//! (Brownian sign, single-mark jump, regime switch) on which conditional
//! expectations are exact weighted sums, plus a backward solver for the
//! linear anticipated equation with projection-extracted martingale
//! integrands.
//!
//! Everything here is exact arithmetic over the tree — no sampling error.
//! Chain branching uses cell-Bernoulli probabilities (at most one switch
//! per cell), which differs from the exact continuous-time sampling of the
//! forward Monte Carlo by O(dt^2) per cell.

use serde::Serialize;

use crate::duality::TerminalData;
use crate::error::{Error, Result};
use crate::noise::{JumpSpec, RegimeChainSpec, TimeGrid};
use crate::sdde::LinearABSDEData;

/// Maximum tree depth and path budget.
pub const MAX_DEPTH: usize = 8;
pub const MAX_PATHS: u128 = 30_000_000;

/// One child branch of a tree node.
#[derive(Debug, Clone, Copy)]
pub struct Branch {
    pub prob: f64,
    /// Brownian increment, +-sqrt(dt).
    pub dw: f64,
    /// Whether the single jump mark fires in the cell.
    pub jump: bool,
    pub next_regime: usize,
}

/// Exhaustive discrete scenario tree on a uniform grid.
///
/// Per step and factor: Brownian +-sqrt(dt) with probability 1/2 each, the
/// single jump mark with probability `rate * dt`, and a chain switch from
/// `i` to `j != i` with probability `lambda_ij * dt`. Degenerate factors
/// (zero jump rate, one regime) collapse to a single branch.
pub struct ScenarioTree {
    grid: TimeGrid,
    chain: RegimeChainSpec,
    jumps: JumpSpec,
    initial_state: usize,
    /// Child branches per current regime, fixed ordering.
    branch_table: Vec<Vec<Branch>>,
    total_paths: u128,
}

/// Builds the tree, validating that every branch probability lies in (0, 1)
/// and that the exhaustive path count stays within budget.
pub fn build_tree(
    chain: &RegimeChainSpec,
    jumps: &JumpSpec,
    grid: &TimeGrid,
    initial_state: usize,
) -> Result<ScenarioTree> {
    chain.assert_valid()?;
    if initial_state >= chain.num_states() {
        return Err(Error::InvalidArgument(format!("initial state {initial_state} out of range")));
    }
    if grid.steps() > MAX_DEPTH {
        return Err(Error::ResourceLimit(format!(
            "tree depth {} exceeds the maximum of {MAX_DEPTH}",
            grid.steps()
        )));
    }
    if jumps.rate() > 0.0 && jumps.marks().len() != 1 {
        return Err(Error::InvalidArgument(
            "tree mode requires a single jump mark; use the Monte Carlo route for multi-mark models".into(),
        ));
    }
    let dt = grid.dt();
    let d = chain.num_states();
    let jump_prob = jumps.rate() * dt;
    if jump_prob >= 1.0 {
        return Err(Error::DtTooLarge(format!("jump branch probability {jump_prob} >= 1")));
    }
    for i in 0..d {
        let stay = 1.0 - chain.exit_rate(i) * dt;
        if stay <= 0.0 {
            return Err(Error::DtTooLarge(format!(
                "stay probability {stay} <= 0 in regime {i}; refine the grid"
            )));
        }
    }

    let sqrt_dt = dt.sqrt();
    let bw: Vec<(f64, f64)> = vec![(0.5, sqrt_dt), (0.5, -sqrt_dt)];
    let jm: Vec<(f64, bool)> = if jumps.rate() > 0.0 {
        vec![(1.0 - jump_prob, false), (jump_prob, true)]
    } else {
        vec![(1.0, false)]
    };
    let mut branch_table = Vec::with_capacity(d);
    for i in 0..d {
        let mut chain_branches: Vec<(f64, usize)> = vec![(1.0 - chain.exit_rate(i) * dt, i)];
        if d > 1 {
            for j in 0..d {
                if j != i {
                    chain_branches.push((chain.rate(i, j) * dt, j));
                }
            }
        }
        let mut branches = Vec::new();
        for &(pb, dw) in &bw {
            for &(pj, jump) in &jm {
                for &(pc, next_regime) in &chain_branches {
                    branches.push(Branch { prob: pb * pj * pc, dw, jump, next_regime });
                }
            }
        }
        branch_table.push(branches);
    }
    let width = branch_table[0].len() as u128;
    let total_paths = width.pow(grid.steps() as u32);
    if total_paths > MAX_PATHS {
        return Err(Error::ResourceLimit(format!(
            "tree would enumerate {total_paths} paths (limit {MAX_PATHS})"
        )));
    }
    Ok(ScenarioTree {
        grid: *grid,
        chain: chain.clone(),
        jumps: jumps.clone(),
        initial_state,
        branch_table,
        total_paths,
    })
}

impl ScenarioTree {
    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn chain(&self) -> &RegimeChainSpec {
        &self.chain
    }

    pub fn jumps(&self) -> &JumpSpec {
        &self.jumps
    }

    pub fn initial_state(&self) -> usize {
        self.initial_state
    }

    pub fn total_paths(&self) -> u128 {
        self.total_paths
    }

    /// Per-node branching factor.
    pub fn width(&self) -> usize {
        self.branch_table[0].len()
    }

    /// Child branches out of a node in the given regime, in the fixed
    /// enumeration order.
    pub fn branches(&self, regime: usize) -> &[Branch] {
        &self.branch_table[regime]
    }

    /// The single tree mark, if jump activity is present.
    pub fn mark(&self) -> Option<f64> {
        self.jumps.marks().first().map(|&(z, _)| z)
    }

    /// Compensated chain increment along a branch out of `regime`.
    pub fn delta_phi_tilde(&self, regime: usize, branch: &Branch, j: usize) -> f64 {
        let realized = if branch.next_regime == j && j != regime { 1.0 } else { 0.0 };
        realized - self.chain.intensity_into(regime, j) * self.grid.dt()
    }

    /// Compensated jump increment along a branch.
    pub fn delta_n_tilde(&self, branch: &Branch) -> f64 {
        (branch.jump as u8 as f64) - self.jumps.rate() * self.grid.dt()
    }

    /// Regime of every node, level by level (level k has width^k nodes in
    /// branch-digit order).
    pub fn regimes_by_level(&self) -> Vec<Vec<u8>> {
        let width = self.width();
        let mut levels: Vec<Vec<u8>> = vec![vec![self.initial_state as u8]];
        for _ in 0..self.grid.steps() {
            let prev = levels.last().expect("nonempty");
            let mut next = Vec::with_capacity(prev.len() * width);
            for &r in prev {
                for b in self.branches(r as usize) {
                    next.push(b.next_regime as u8);
                }
            }
            levels.push(next);
        }
        levels
    }
}

/// Values of the backward solution on one tree level: either one value per
/// node or a level-constant (the terminal window, where the data are
/// deterministic functions of time).
pub enum LevelValues {
    Uniform { y: f64, z: f64, q: f64, v: Vec<f64> },
    Full { y: Vec<f64>, z: Vec<f64>, q: Vec<f64>, v: Vec<f64> },
}

impl LevelValues {
    fn y(&self, node: usize) -> f64 {
        match self {
            LevelValues::Uniform { y, .. } => *y,
            LevelValues::Full { y, .. } => y[node],
        }
    }

    fn z(&self, node: usize) -> f64 {
        match self {
            LevelValues::Uniform { z, .. } => *z,
            LevelValues::Full { z, .. } => z[node],
        }
    }

    fn q(&self, node: usize) -> f64 {
        match self {
            LevelValues::Uniform { q, .. } => *q,
            LevelValues::Full { q, .. } => q[node],
        }
    }

    fn v(&self, node: usize, j: usize, d: usize) -> f64 {
        match self {
            LevelValues::Uniform { v, .. } => v[j],
            LevelValues::Full { v, .. } => v[node * d + j],
        }
    }
}

/// Exact backward solution on the tree: Y, Z, Q and the D-vector V at every
/// node of every level, with the terminal window holding the prescribed
/// terminal data.
pub struct BackwardSolution {
    grid: TimeGrid,
    d: usize,
    levels: Vec<LevelValues>,
}

impl BackwardSolution {
    pub fn root_y(&self) -> f64 {
        self.levels[0].y(0)
    }

    pub fn y(&self, level: usize, node: usize) -> f64 {
        self.levels[level].y(node)
    }

    pub fn z(&self, level: usize, node: usize) -> f64 {
        self.levels[level].z(node)
    }

    pub fn q(&self, level: usize, node: usize) -> f64 {
        self.levels[level].q(node)
    }

    pub fn v(&self, level: usize, node: usize, j: usize) -> f64 {
        self.levels[level].v(node, j, self.d)
    }

    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }
}

/// Conditional expectation of level-(k+r) values seen from a node at level
/// k, by exact descent through the branch probabilities.
fn descend<F: Fn(usize) -> f64 + Copy>(
    tree: &ScenarioTree,
    regimes: &[Vec<u8>],
    level: usize,
    node: usize,
    steps: usize,
    field: F,
) -> f64 {
    if steps == 0 {
        return field(node);
    }
    let regime = regimes[level][node] as usize;
    let width = tree.width();
    let mut acc = 0.0;
    let mut mass = 0.0;
    for (c, b) in tree.branches(regime).iter().enumerate() {
        acc += b.prob * descend(tree, regimes, level + 1, node * width + c, steps - 1, field);
        mass += b.prob;
    }
    // Normalize away the rounding slack of the branch probability sum.
    acc / mass
}

/// Exact backward induction for the linear anticipated equation.
///
/// Per node: the child-weighted expectation gives `E[Y_{k+1}]`; the
/// martingale integrands are least-squares projections of `Y_{k+1}` onto
/// the compensated increments (factors with zero variance are skipped);
/// anticipated terms are exact iterated sums `m` levels down, replaced by
/// the terminal data inside the window; the scalar step is implicit in Y
/// and explicit in (Z, Q, V).
pub fn solve_absde_backward(
    tree: &ScenarioTree,
    data: &LinearABSDEData,
    terminal: &TerminalData,
) -> Result<BackwardSolution> {
    let grid = *tree.grid();
    let k_total = grid.steps();
    let m = grid.delay_steps();
    if m > k_total {
        return Err(Error::InvalidArgument("delay window longer than the grid".into()));
    }
    let d = tree.chain().num_states();
    let dt = grid.dt();
    let mark = tree.mark();
    let rate = tree.jumps().rate();
    let regimes = tree.regimes_by_level();
    let width = tree.width();

    // Terminal window: levels K-m ..= K hold the prescribed data.
    let mut levels: Vec<Option<LevelValues>> = (0..=k_total).map(|_| None).collect();
    for k in (k_total - m)..=k_total {
        let t = grid.node_time(k as i64);
        levels[k] = Some(LevelValues::Uniform {
            y: (terminal.xi)(t),
            z: (terminal.psi)(t),
            q: mark.map_or(0.0, |z| (terminal.zeta)(t, z)),
            v: (terminal.theta)(t),
        });
    }

    for k in (0..k_total - m).rev() {
        let t = grid.node_time(k as i64);
        let n_nodes = regimes[k].len();
        let mut y_lv = vec![0.0; n_nodes];
        let mut z_lv = vec![0.0; n_nodes];
        let mut q_lv = vec![0.0; n_nodes];
        let mut v_lv = vec![0.0; n_nodes * d];

        let child = levels[k + 1].as_ref().expect("child level computed");
        let anticipated = if m > 0 {
            levels[k + m].as_ref()
        } else {
            None // anticipated terms coincide with the current unknowns
        };
        for n in 0..n_nodes {
            let regime = regimes[k][n] as usize;
            let branches = tree.branches(regime);

            // Projections onto the orthogonal compensated increments.
            let mut e_y = 0.0;
            let mut mass = 0.0;
            let mut e_yw = 0.0;
            let mut e_yn = 0.0;
            let mut e_yphi = vec![0.0; d];
            for (c, b) in branches.iter().enumerate() {
                let yc = child.y(n * width + c);
                e_y += b.prob * yc;
                mass += b.prob;
                e_yw += b.prob * yc * b.dw;
                e_yn += b.prob * yc * tree.delta_n_tilde(b);
                for (j, e) in e_yphi.iter_mut().enumerate() {
                    *e += b.prob * yc * tree.delta_phi_tilde(regime, b, j);
                }
            }
            let e_y = e_y / mass; // normalized: constants propagate exactly
            let z = e_yw / dt; // E[dW^2] = dt exactly
            let jump_var = rate * dt * (1.0 - rate * dt);
            let q = if jump_var > 0.0 { e_yn / jump_var } else { 0.0 };
            let mut v = vec![0.0; d];
            for j in 0..d {
                let p = tree.chain().intensity_into(regime, j) * dt;
                let var = p * (1.0 - p);
                if var > 0.0 {
                    v[j] = e_yphi[j] / var;
                }
            }

            // Anticipated terms, exact iterated sums m levels down. When
            // m == 0 they are the current-node unknowns and Y moves to the
            // left-hand side.
            let (a_y, a_z, a_q, a_v): (f64, f64, f64, Vec<f64>) = match anticipated {
                None => (0.0, z, q, v.clone()),
                Some(ant) => {
                    let a_y = descend(tree, &regimes, k, n, m, |nn| ant.y(nn));
                    let a_z = descend(tree, &regimes, k, n, m, |nn| ant.z(nn));
                    let a_q = descend(tree, &regimes, k, n, m, |nn| ant.q(nn));
                    let a_v = (0..d)
                        .map(|j| descend(tree, &regimes, k, n, m, |nn| ant.v(nn, j, d)))
                        .collect();
                    (a_y, a_z, a_q, a_v)
                }
            };

            let b_k = (data.b)(t, regime);
            let implicit = if m == 0 {
                1.0 - (b_k + (data.b_bar)(t, regime)) * dt
            } else {
                1.0 - b_k * dt
            };
            if implicit <= 0.0 {
                return Err(Error::DtTooLarge(format!(
                    "implicit coefficient {implicit} <= 0 at level {k}; refine the grid"
                )));
            }

            let mut driver = (data.sigma)(t, regime) * z
                + (data.sigma_bar)(t, regime) * a_z
                + (data.running_cost)(t, regime);
            if m > 0 {
                driver += (data.b_bar)(t, regime) * a_y;
            }
            if let Some(zstar) = mark {
                driver += rate * (data.eta)(t, regime, zstar) * q;
                driver += rate * (data.eta_bar)(t, regime, zstar) * a_q;
            }
            let gamma = (data.gamma)(t, regime);
            let gamma_bar = (data.gamma_bar)(t, regime);
            for j in 0..d {
                let lam = tree.chain().intensity_into(regime, j);
                driver += lam * (gamma[j] * v[j] + gamma_bar[j] * a_v[j]);
            }

            y_lv[n] = (e_y + dt * driver) / implicit;
            z_lv[n] = z;
            q_lv[n] = q;
            v_lv[n * d..(n + 1) * d].copy_from_slice(&v);
        }
        levels[k] = Some(LevelValues::Full { y: y_lv, z: z_lv, q: q_lv, v: v_lv });
    }

    Ok(BackwardSolution {
        grid,
        d,
        levels: levels.into_iter().map(|l| l.expect("all levels computed")).collect(),
    })
}

/// Forward/backward agreement report on a tree.
#[derive(Debug, Clone, Serialize)]
pub struct GapReport {
    pub y_forward: f64,
    pub y_backward: f64,
    pub gap: f64,
    #[serde(rename = "K")]
    pub k: usize,
    pub dt: f64,
    pub paths: u128,
}

/// Evaluates both sides of the duality on the same tree and reports the
/// absolute gap.
pub fn duality_gap(
    tree: &ScenarioTree,
    data: &LinearABSDEData,
    terminal: &TerminalData,
) -> Result<GapReport> {
    let y_forward = crate::duality::evaluate_duality_on_tree(data, terminal, tree)?;
    let y_backward = solve_absde_backward(tree, data, terminal)?.root_y();
    Ok(GapReport {
        y_forward,
        y_backward,
        gap: (y_forward - y_backward).abs(),
        k: tree.grid().steps(),
        dt: tree.grid().dt(),
        paths: tree.total_paths(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::duality::TerminalData;

    fn two_state() -> RegimeChainSpec {
        RegimeChainSpec::new(vec![vec![-1.0, 1.0], vec![2.0, -2.0]]).unwrap()
    }

    #[test]
    fn brownian_only_tree() {
        let chain = RegimeChainSpec::new(vec![vec![0.0]]).unwrap();
        let grid = TimeGrid::new(0.0, 1.0, 2, 0).unwrap();
        let tree = build_tree(&chain, &JumpSpec::none(), &grid, 0).unwrap();
        assert_eq!(tree.total_paths(), 4);
        assert_eq!(tree.width(), 2);
        for b in tree.branches(0) {
            assert!((b.prob - 0.25 * 2.0).abs() < 1e-15); // two branches of 1/2
        }
    }

    #[test]
    fn branch_probabilities_sum_to_one() {
        let chain = two_state();
        let jumps = JumpSpec::new(0.5, vec![(0.5, 1.0)]).unwrap();
        let grid = TimeGrid::new(0.0, 0.75, 3, 0).unwrap();
        let tree = build_tree(&chain, &jumps, &grid, 0).unwrap();
        // jump branch probability rate*dt = 0.125
        let jp: f64 = tree.branches(0).iter().filter(|b| b.jump).map(|b| b.prob).sum();
        assert!((jp - 0.125).abs() < 1e-15);
        for i in 0..2 {
            let total: f64 = tree.branches(i).iter().map(|b| b.prob).sum();
            assert!((total - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn path_probabilities_sum_to_one() {
        let chain = two_state();
        let jumps = JumpSpec::new(0.5, vec![(0.5, 1.0)]).unwrap();
        let grid = TimeGrid::new(0.0, 1.0, 4, 1).unwrap();
        let tree = build_tree(&chain, &jumps, &grid, 0).unwrap();
        fn total(tree: &ScenarioTree, level: usize, regime: usize, prob: f64) -> f64 {
            if level == tree.grid().steps() {
                return prob;
            }
            tree.branches(regime)
                .iter()
                .map(|b| total(tree, level + 1, b.next_regime, prob * b.prob))
                .sum()
        }
        assert!((total(&tree, 0, 0, 1.0) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn compensated_increments_have_zero_mean() {
        let chain = two_state();
        let jumps = JumpSpec::new(0.5, vec![(0.5, 1.0)]).unwrap();
        let grid = TimeGrid::new(0.0, 1.0, 4, 0).unwrap();
        let tree = build_tree(&chain, &jumps, &grid, 0).unwrap();
        for i in 0..2 {
            for j in 0..2 {
                let mean: f64 = tree
                    .branches(i)
                    .iter()
                    .map(|b| b.prob * tree.delta_phi_tilde(i, b, j))
                    .sum();
                assert!(mean.abs() < 1e-15, "E[dPhi~_{j}] = {mean} from {i}");
            }
            let mean_n: f64 =
                tree.branches(i).iter().map(|b| b.prob * tree.delta_n_tilde(b)).sum();
            assert!(mean_n.abs() < 1e-15);
            let mean_w: f64 = tree.branches(i).iter().map(|b| b.prob * b.dw).sum();
            assert!(mean_w.abs() < 1e-15);
        }
    }

    #[test]
    fn increments_are_orthogonal() {
        let chain = two_state();
        let jumps = JumpSpec::new(0.5, vec![(0.5, 1.0)]).unwrap();
        let grid = TimeGrid::new(0.0, 1.0, 4, 0).unwrap();
        let tree = build_tree(&chain, &jumps, &grid, 0).unwrap();
        for i in 0..2 {
            for j in 0..2 {
                let wn: f64 = tree
                    .branches(i)
                    .iter()
                    .map(|b| b.prob * b.dw * tree.delta_n_tilde(b))
                    .sum();
                let wphi: f64 = tree
                    .branches(i)
                    .iter()
                    .map(|b| b.prob * b.dw * tree.delta_phi_tilde(i, b, j))
                    .sum();
                let nphi: f64 = tree
                    .branches(i)
                    .iter()
                    .map(|b| b.prob * tree.delta_n_tilde(b) * tree.delta_phi_tilde(i, b, j))
                    .sum();
                assert!(wn.abs() < 1e-15 && wphi.abs() < 1e-15 && nphi.abs() < 1e-15);
            }
        }
    }

    #[test]
    fn dt_too_large_rejected() {
        let chain = RegimeChainSpec::new(vec![vec![-5.0, 5.0], vec![5.0, -5.0]]).unwrap();
        let grid = TimeGrid::new(0.0, 1.0, 2, 0).unwrap(); // dt = 0.5, exit 5*0.5 > 1
        assert!(matches!(
            build_tree(&chain, &JumpSpec::none(), &grid, 0),
            Err(Error::DtTooLarge(_))
        ));
    }

    #[test]
    fn depth_limit_enforced() {
        let chain = two_state();
        let grid = TimeGrid::new(0.0, 1.0, 9, 0).unwrap();
        assert!(matches!(
            build_tree(&chain, &JumpSpec::none(), &grid, 0),
            Err(Error::ResourceLimit(_))
        ));
    }

    #[test]
    fn zero_driver_backward_is_constant() {
        let chain = two_state();
        let jumps = JumpSpec::new(0.5, vec![(0.5, 1.0)]).unwrap();
        let grid = TimeGrid::new(0.0, 1.0, 4, 1).unwrap();
        let tree = build_tree(&chain, &jumps, &grid, 0).unwrap();
        let data = LinearABSDEData::zero(2);
        let c = 2.5;
        let terminal = TerminalData::constant(c, 0.0, 0.0, vec![0.0; 2]);
        let sol = solve_absde_backward(&tree, &data, &terminal).unwrap();
        let regimes = tree.regimes_by_level();
        for k in 0..=4 {
            for n in 0..regimes[k].len() {
                assert!((sol.y(k, n) - c).abs() < 1e-14);
                assert_eq!(sol.z(k, n), 0.0);
                assert_eq!(sol.q(k, n), 0.0);
                for j in 0..2 {
                    assert_eq!(sol.v(k, n, j), 0.0);
                }
            }
        }
    }

    #[test]
    fn constant_drift_backward_is_implicit_euler() {
        let chain = RegimeChainSpec::new(vec![vec![0.0]]).unwrap();
        let grid = TimeGrid::new(0.0, 1.0, 8, 0).unwrap();
        let tree = build_tree(&chain, &JumpSpec::none(), &grid, 0).unwrap();
        let r = 0.4;
        let mut data = LinearABSDEData::zero(1);
        data.b = Box::new(move |_, _| r);
        data.bound = r;
        let terminal = TerminalData::constant(1.0, 0.0, 0.0, vec![0.0]);
        let sol = solve_absde_backward(&tree, &data, &terminal).unwrap();
        let expected = (1.0 - r * grid.dt()).powi(-8);
        assert!((sol.root_y() - expected).abs() < 1e-12);
        assert!((sol.root_y() - r.exp()).abs() < 0.05);
    }

    #[test]
    fn diffusion_driver_leaves_z_zero() {
        // sigma enters the driver but Y stays deterministic, so the
        // projection onto dW vanishes at every node.
        let chain = RegimeChainSpec::new(vec![vec![0.0]]).unwrap();
        let grid = TimeGrid::new(0.0, 1.0, 6, 0).unwrap();
        let tree = build_tree(&chain, &JumpSpec::none(), &grid, 0).unwrap();
        let mut data = LinearABSDEData::zero(1);
        data.sigma = Box::new(|_, _| 0.3);
        data.bound = 0.3;
        let terminal = TerminalData::constant(1.0, 0.0, 0.0, vec![0.0]);
        let sol = solve_absde_backward(&tree, &data, &terminal).unwrap();
        let regimes = tree.regimes_by_level();
        for k in 0..6 {
            for n in 0..regimes[k].len() {
                assert!(sol.z(k, n).abs() < 1e-14);
            }
        }
        assert!((sol.root_y() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn martingale_increment_orthogonality_at_nodes() {
        let chain = two_state();
        let jumps = JumpSpec::new(0.5, vec![(0.5, 1.0)]).unwrap();
        let grid = TimeGrid::new(0.0, 1.0, 4, 1).unwrap();
        let tree = build_tree(&chain, &jumps, &grid, 0).unwrap();
        let mut data = LinearABSDEData::zero(2);
        data.b = Box::new(|_, r| if r == 0 { 0.2 } else { -0.1 });
        data.sigma = Box::new(|_, _| 0.3);
        data.bound = 0.3;
        let terminal = TerminalData::constant(1.0, 0.1, 0.1, vec![0.1, 0.1]);
        let sol = solve_absde_backward(&tree, &data, &terminal).unwrap();
        let regimes = tree.regimes_by_level();
        let width = tree.width();
        for k in 0..3 {
            for n in 0..regimes[k].len() {
                let regime = regimes[k][n] as usize;
                let mut resid = 0.0;
                let e_y: f64 = tree
                    .branches(regime)
                    .iter()
                    .enumerate()
                    .map(|(c, b)| b.prob * sol.y(k + 1, n * width + c))
                    .sum();
                for (c, b) in tree.branches(regime).iter().enumerate() {
                    let dev = sol.y(k + 1, n * width + c) - e_y;
                    let mut expl = sol.z(k, n) * b.dw + sol.q(k, n) * tree.delta_n_tilde(b);
                    for j in 0..2 {
                        expl += sol.v(k, n, j) * tree.delta_phi_tilde(regime, b, j);
                    }
                    resid += b.prob * (dev - expl);
                }
                assert!(resid.abs() < 1e-10, "node ({k},{n}): residual {resid}");
            }
        }
    }
}
