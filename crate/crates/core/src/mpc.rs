//! Finite-horizon integer MPC over the direction alphabet and its
//! receding-horizon rollout.

use std::fmt::Write as _;

use crate::emulation::{check_finite_state, DropoutPolicy, Emulation};
use crate::error::{check_dim, Error, Result};
use crate::lti::{Matrix, Trajectory, TrajectoryKind, Vector};
use crate::quantization::{ActivationPattern, DropoutMask};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum SearchStrategy {
    Exhaustive,
    #[default]
    BranchAndBound,
}

/// Weights, horizon and search settings of the integer program.
#[derive(Debug, Clone, PartialEq)]
pub struct MpcConfig {
    horizon: usize,
    p: Matrix,
    q: Matrix,
    r: Matrix,
    pub search: SearchStrategy,
    pub node_budget: u64,
    /// Penalize only the first input instead of every stage input.
    pub terminal_input_penalty_only: bool,
}

pub const DEFAULT_NODE_BUDGET: u64 = 1_000_000;

fn check_spd(name: &str, m: &Matrix) -> Result<()> {
    if !m.is_square() {
        return Err(Error::NotSquare {
            rows: m.nrows(),
            cols: m.ncols(),
        });
    }
    if (m - m.transpose()).amax() > 1e-12 * m.amax().max(1.0) {
        return Err(Error::InvalidArgument(format!("{name} is not symmetric")));
    }
    if m.clone().cholesky().is_none() {
        return Err(Error::InvalidArgument(format!(
            "{name} is not positive definite"
        )));
    }
    Ok(())
}

impl MpcConfig {
    pub fn new(horizon: usize, p: Matrix, q: Matrix, r: Matrix) -> Result<Self> {
        if horizon == 0 {
            return Err(Error::InvalidArgument("horizon must be at least 1".into()));
        }
        check_spd("P", &p)?;
        check_spd("Q", &q)?;
        check_dim("P/Q dimension", p.nrows(), q.nrows())?;
        check_spd("R", &r)?;
        Ok(Self {
            horizon,
            p,
            q,
            r,
            search: SearchStrategy::default(),
            node_budget: DEFAULT_NODE_BUDGET,
            terminal_input_penalty_only: false,
        })
    }

    /// `P = Q = 5 I`, `R = 0.05 I`, horizon 2.
    pub fn standard(n: usize, m: usize) -> Self {
        Self::new(
            2,
            Matrix::identity(n, n) * 5.0,
            Matrix::identity(n, n) * 5.0,
            Matrix::identity(m, m) * 0.05,
        )
        .expect("default weights are positive definite")
    }

    pub fn with_search(mut self, search: SearchStrategy) -> Self {
        self.search = search;
        self
    }

    pub fn with_horizon(mut self, horizon: usize) -> Result<Self> {
        if horizon == 0 {
            return Err(Error::InvalidArgument("horizon must be at least 1".into()));
        }
        self.horizon = horizon;
        Ok(self)
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    pub fn p(&self) -> &Matrix {
        &self.p
    }

    pub fn q(&self) -> &Matrix {
        &self.q
    }

    pub fn r(&self) -> &Matrix {
        &self.r
    }

    /// Same problem with `R` replaced (only positive semidefinite checks are
    /// skipped so `R = 0` can be studied).
    pub fn with_input_weight_unchecked(mut self, r: Matrix) -> Self {
        self.r = r;
        self
    }

    pub fn with_state_weights(mut self, p: Matrix, q: Matrix) -> Result<Self> {
        check_spd("P", &p)?;
        check_spd("Q", &q)?;
        self.p = p;
        self.q = q;
        Ok(self)
    }

    fn input_penalty(&self, stage: usize, u: &ActivationPattern) -> f64 {
        if self.terminal_input_penalty_only && stage > 0 {
            0.0
        } else {
            u.squared_norm(&self.r)
        }
    }
}

fn quad(w: &Matrix, v: &Vector) -> f64 {
    v.dot(&(w * v))
}

fn stage_cost(cfg: &MpcConfig, x: &Vector, x_ref: &Vector, input_penalty: f64) -> f64 {
    quad(&cfg.q, &(x - x_ref)) + input_penalty
}

fn reference_horizon(emu: &Emulation, x_ref0: &Vector, horizon: usize) -> Result<Vec<Vector>> {
    let phi = emu.flow()?;
    let mut refs = Vec::with_capacity(horizon + 1);
    refs.push(x_ref0.clone());
    for n in 0..horizon {
        let next = &*phi * &refs[n];
        refs.push(next);
    }
    Ok(refs)
}

/// `J = Σ_n (|x_n - x_ref(n)|²_Q + |u_n|²_R) + |x_N - x_ref(N)|²_P`.
pub fn mpc_cost(
    inputs: &[ActivationPattern],
    x_qs0: &Vector,
    x_ref0: &Vector,
    emu: &Emulation,
    cfg: &MpcConfig,
) -> Result<f64> {
    check_dim("mpc input count", cfg.horizon, inputs.len())?;
    check_dim("mpc state", emu.dim(), x_qs0.len())?;
    check_dim("mpc reference", emu.dim(), x_ref0.len())?;
    check_dim("mpc weights", emu.dim(), cfg.q.nrows())?;
    let refs = reference_horizon(emu, x_ref0, cfg.horizon)?;
    let mut x = x_qs0.clone();
    let mut cost = 0.0;
    for (n, u) in inputs.iter().enumerate() {
        check_dim("mpc pattern", emu.channels(), u.channels())?;
        cost += stage_cost(cfg, &x, &refs[n], cfg.input_penalty(n, u));
        x = emu.plant.quantized_step(&x, &u.to_vector())?;
    }
    Ok(cost + quad(&cfg.p, &(&x - &refs[cfg.horizon])))
}

/// Optimal input sequence with its cost.
#[derive(Debug, Clone, PartialEq)]
pub struct MpcSolution {
    pub inputs: Vec<ActivationPattern>,
    /// Indices into the full alphabet, one per stage.
    pub direction_indices: Vec<usize>,
    pub cost: f64,
    pub first_direction: Vector,
    pub nodes: u64,
}

impl MpcSolution {
    pub fn first_index(&self) -> usize {
        self.direction_indices[0]
    }
}

struct Candidate {
    index: usize,
    rep: ActivationPattern,
    direction: Vector,
    penalty_first: f64,
    penalty_later: f64,
}

struct Search<'a> {
    emu: &'a Emulation,
    cfg: &'a MpcConfig,
    refs: Vec<Vector>,
    candidates: Vec<Candidate>,
    prune: bool,
    nodes: u64,
    best: Option<(f64, Vec<usize>)>,
    path: Vec<usize>,
}

impl Search<'_> {
    fn visit(&mut self, depth: usize, x: &Vector, prefix: f64) -> Result<()> {
        if depth == self.cfg.horizon {
            let total = prefix + quad(&self.cfg.p, &(x - &self.refs[depth]));
            // Lexicographic visiting order: only a strict improvement replaces.
            if self.best.as_ref().is_none_or(|(b, _)| total < *b) {
                self.best = Some((total, self.path.clone()));
            }
            return Ok(());
        }
        for c in 0..self.candidates.len() {
            self.nodes += 1;
            if self.nodes > self.cfg.node_budget {
                return Err(Error::NodeBudgetExceeded(self.cfg.node_budget));
            }
            let cand = &self.candidates[c];
            let penalty = if depth == 0 {
                cand.penalty_first
            } else {
                cand.penalty_later
            };
            let cost = prefix + stage_cost(self.cfg, x, &self.refs[depth], penalty);
            // Remaining terms are nonnegative and float addition of a
            // nonnegative term never decreases the sum.
            if self.prune && self.best.as_ref().is_some_and(|(b, _)| cost >= *b) {
                continue;
            }
            let next = self.emu.plant.step_direction(x, &cand.direction);
            self.path.push(c);
            self.visit(depth + 1, &next, cost)?;
            self.path.pop();
        }
        Ok(())
    }
}

/// Globally optimal input sequence over the directions available under `mask`.
pub fn solve_mpc(
    x_qs: &Vector,
    x_ref: &Vector,
    emu: &Emulation,
    cfg: &MpcConfig,
    mask: &DropoutMask,
) -> Result<MpcSolution> {
    check_dim("mpc state", emu.dim(), x_qs.len())?;
    check_dim("mpc reference", emu.dim(), x_ref.len())?;
    check_dim("mpc weights", emu.dim(), cfg.q.nrows())?;
    check_dim("mpc input weight", emu.channels(), cfg.r.nrows())?;
    let available = emu.available(mask)?;
    if available.is_empty() {
        return Err(Error::EmptyCandidates);
    }
    let candidates = available
        .indices()
        .iter()
        .zip(available.representatives())
        .map(|(&index, rep)| Candidate {
            index,
            direction: &emu.plant.b_d * rep.to_vector(),
            penalty_first: cfg.input_penalty(0, rep),
            penalty_later: cfg.input_penalty(1, rep),
            rep: rep.clone(),
        })
        .collect();
    let mut search = Search {
        emu,
        cfg,
        refs: reference_horizon(emu, x_ref, cfg.horizon)?,
        candidates,
        prune: cfg.search == SearchStrategy::BranchAndBound,
        nodes: 0,
        best: None,
        path: Vec::with_capacity(cfg.horizon),
    };
    search.visit(0, x_qs, 0.0)?;
    let (cost, path) = search.best.take().ok_or(Error::EmptyCandidates)?;
    let inputs: Vec<ActivationPattern> = path
        .iter()
        .map(|&c| search.candidates[c].rep.clone())
        .collect();
    let direction_indices: Vec<usize> = path.iter().map(|&c| search.candidates[c].index).collect();
    Ok(MpcSolution {
        first_direction: search.candidates[path[0]].direction.clone(),
        inputs,
        direction_indices,
        cost,
        nodes: search.nodes,
    })
}

/// Receding-horizon emulation record.
#[derive(Debug, Clone)]
pub struct Rollout {
    pub quantized: Trajectory,
    pub reference: Trajectory,
    /// Applied pattern per step.
    pub inputs: Vec<ActivationPattern>,
    /// Index of the applied direction in the full alphabet, per step.
    pub directions: Vec<usize>,
    /// Optimal horizon cost per step (`NaN` for policies without one).
    pub costs: Vec<f64>,
    pub masks: Vec<DropoutMask>,
}

impl Rollout {
    pub fn steps(&self) -> usize {
        self.directions.len()
    }

    pub fn tracking_errors(&self) -> Vec<f64> {
        self.quantized
            .states()
            .iter()
            .zip(self.reference.states())
            .map(|(q, r)| (q - r).norm())
            .collect()
    }

    pub fn terminal_error(&self) -> f64 {
        (self.quantized.last() - self.reference.last()).norm()
    }

    pub fn terminal_norm(&self) -> f64 {
        self.quantized.last().norm()
    }

    /// CSV `k,t,xqs_0..,xref_0..,dir_index,cost,dropped_channels`; the last
    /// row has no input so its trailing fields are empty.
    pub fn to_csv(&self) -> String {
        let n = self.quantized.dim();
        let h = self.quantized.h();
        let mut out = String::from("k,t");
        for i in 0..n {
            let _ = write!(out, ",xqs_{i}");
        }
        for i in 0..n {
            let _ = write!(out, ",xref_{i}");
        }
        out.push_str(",dir_index,cost,dropped_channels\n");
        for (k, (q, r)) in self
            .quantized
            .states()
            .iter()
            .zip(self.reference.states())
            .enumerate()
        {
            let _ = write!(out, "{k},{}", k as f64 * h);
            for v in q.iter().chain(r.iter()) {
                let _ = write!(out, ",{v}");
            }
            if k < self.steps() {
                let cost = if self.costs[k].is_nan() {
                    String::new()
                } else {
                    self.costs[k].to_string()
                };
                let _ = write!(out, ",{},{cost},{}", self.directions[k], self.masks[k].to_field());
            } else {
                out.push_str(",,,");
            }
            out.push('\n');
        }
        out
    }
}

/// Drives both systems for `steps` steps with a per-step direction chooser.
pub(crate) fn drive<F>(
    emu: &Emulation,
    x0: &Vector,
    steps: usize,
    policy: &DropoutPolicy,
    mut choose: F,
) -> Result<Rollout>
where
    F: FnMut(usize, &Vector, &Vector, &DropoutMask) -> Result<(usize, ActivationPattern, f64)>,
{
    check_dim("rollout start", emu.dim(), x0.len())?;
    let phi = emu.flow()?;
    let mut sampler = policy.sampler(emu.channels())?;
    let mut xq = vec![x0.clone()];
    let mut xr = vec![x0.clone()];
    let mut inputs = Vec::with_capacity(steps);
    let mut directions = Vec::with_capacity(steps);
    let mut costs = Vec::with_capacity(steps);
    let mut masks = Vec::with_capacity(steps);
    for k in 0..steps {
        let mask = sampler.next_mask();
        let (index, rep, cost) = choose(k, &xq[k], &xr[k], &mask)?;
        let next_q = emu.plant.quantized_step(&xq[k], &rep.to_vector())?;
        check_finite_state(k + 1, &next_q)?;
        let next_r = &*phi * &xr[k];
        xq.push(next_q);
        xr.push(next_r);
        inputs.push(rep);
        directions.push(index);
        costs.push(cost);
        masks.push(mask);
    }
    Ok(Rollout {
        quantized: Trajectory::new(xq, emu.h(), TrajectoryKind::Quantized)?,
        reference: Trajectory::new(xr, emu.h(), TrajectoryKind::Reference)?,
        inputs,
        directions,
        costs,
        masks,
    })
}

/// Receding horizon: solve, apply the first input, advance both systems.
pub fn mpc_rollout(
    x0: &Vector,
    steps: usize,
    emu: &Emulation,
    cfg: &MpcConfig,
    policy: &DropoutPolicy,
) -> Result<Rollout> {
    if steps < 1 {
        return Err(Error::InvalidArgument("rollout length must be at least 1".into()));
    }
    drive(emu, x0, steps, policy, |_, xq, xr, mask| {
        let sol = solve_mpc(xq, xr, emu, cfg, mask)?;
        Ok((sol.first_index(), sol.inputs[0].clone(), sol.cost))
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::quantization::nearest_direction;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn v(a: f64, b: f64) -> Vector {
        Vector::from_vec(vec![a, b])
    }

    #[test]
    fn standstill_costs_nothing() {
        let emu = Emulation::two_state_example()
            .with_reference(Matrix::zeros(2, 2))
            .unwrap();
        let cfg = MpcConfig::standard(2, 4);
        let zeros = vec![ActivationPattern::zeros(4); 2];
        let x = v(0.4, -0.3);
        assert_eq!(mpc_cost(&zeros, &x, &x, &emu, &cfg).unwrap(), 0.0);
    }

    #[test]
    fn one_step_cost_matches_hand_formula() {
        let emu = Emulation::two_state_example();
        let cfg = MpcConfig::standard(2, 4).with_horizon(1).unwrap();
        let x0 = v(1.0, 0.0);
        let j = mpc_cost(&[ActivationPattern::zeros(4)], &x0, &x0, &emu, &cfg).unwrap();
        // Stage 0 has zero error and zero input; only the terminal P-term remains.
        let phi = crate::lti::matrix_exponential(&(emu.reference.matrix() * 0.05), 1e-14).unwrap();
        let diff = &phi * &x0 - &x0;
        let expect = 5.0 * (diff[0] * diff[0] + diff[1] * diff[1]);
        assert!((j - expect).abs() <= 1e-15 * expect.max(1.0));
    }

    #[test]
    fn doubling_q_doubles_state_portion() {
        let emu = Emulation::two_state_example();
        let base = MpcConfig::standard(2, 4).with_horizon(3).unwrap();
        let doubled = base
            .clone()
            .with_state_weights(base.p().clone(), base.q() * 2.0)
            .unwrap();
        let zero_q = |cfg: &MpcConfig| cfg.clone().with_state_weights(cfg.p().clone(), Matrix::identity(2, 2) * 1e-300).unwrap();
        let u = vec![
            ActivationPattern::new(vec![1, 0, 0, 1]).unwrap(),
            ActivationPattern::new(vec![0, -1, 1, 0]).unwrap(),
            ActivationPattern::new(vec![1, 1, 0, 0]).unwrap(),
        ];
        let (xq, xr) = (v(0.3, 0.1), v(0.5, -0.2));
        let j1 = mpc_cost(&u, &xq, &xr, &emu, &base).unwrap();
        let j2 = mpc_cost(&u, &xq, &xr, &emu, &doubled).unwrap();
        let rest = mpc_cost(&u, &xq, &xr, &emu, &zero_q(&base)).unwrap();
        assert!(((j2 - rest) - 2.0 * (j1 - rest)).abs() < 1e-12);
    }

    #[test]
    fn origin_prefers_zero_sequence() {
        let emu = Emulation::two_state_example();
        let cfg = MpcConfig::standard(2, 4);
        let sol = solve_mpc(&Vector::zeros(2), &Vector::zeros(2), &emu, &cfg, &DropoutMask::none(4)).unwrap();
        assert_eq!(sol.cost, 0.0);
        assert!(sol.direction_indices.iter().all(|&i| i == emu.alphabet.zero_index()));
    }

    #[test]
    fn branch_and_bound_matches_exhaustive_from_default_start() {
        let emu = Emulation::two_state_example();
        let cfg = MpcConfig::standard(2, 4);
        let x0 = v(1.0, 0.0);
        let bb = solve_mpc(&x0, &x0, &emu, &cfg, &DropoutMask::none(4)).unwrap();
        let ex = solve_mpc(&x0, &x0, &emu, &cfg.clone().with_search(SearchStrategy::Exhaustive), &DropoutMask::none(4)).unwrap();
        assert_eq!(bb.cost, ex.cost);
        assert_eq!(bb.direction_indices, ex.direction_indices);
        assert_eq!(ex.nodes, 25 + 25 * 25);
        assert!(bb.nodes <= ex.nodes);
        assert_eq!(mpc_cost(&bb.inputs, &x0, &x0, &emu, &cfg).unwrap(), bb.cost);
    }

    #[test]
    fn one_step_without_input_weight_is_nearest_direction() {
        let emu = Emulation::two_state_example();
        let cfg = MpcConfig::standard(2, 4)
            .with_horizon(1)
            .unwrap()
            .with_input_weight_unchecked(Matrix::zeros(4, 4));
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..200 {
            let xq = v(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
            let xr = &xq + v(rng.random_range(-0.15..0.15), rng.random_range(-0.15..0.15));
            let sol = solve_mpc(&xq, &xr, &emu, &cfg, &DropoutMask::none(4)).unwrap();
            let target = emu.reference.reference_step(&xr, 0.05).unwrap() - &emu.plant.a_d * &xq;
            let (_, nearest) = nearest_direction(&emu.alphabet, &target, false).unwrap();
            assert_eq!(sol.first_index(), nearest);
        }
    }

    #[test]
    fn node_budget_is_enforced() {
        let emu = Emulation::two_state_example();
        let mut cfg = MpcConfig::standard(2, 4).with_search(SearchStrategy::Exhaustive);
        cfg.node_budget = 100;
        let x0 = v(1.0, 0.0);
        assert!(matches!(
            solve_mpc(&x0, &x0, &emu, &cfg, &DropoutMask::none(4)),
            Err(Error::NodeBudgetExceeded(100))
        ));
    }

    #[test]
    fn masks_never_improve_the_optimum() {
        let emu = Emulation::two_state_example();
        let cfg = MpcConfig::standard(2, 4);
        let (xq, xr) = (v(0.7, -0.2), v(0.75, -0.1));
        let full = solve_mpc(&xq, &xr, &emu, &cfg, &DropoutMask::none(4)).unwrap();
        let one = solve_mpc(&xq, &xr, &emu, &cfg, &DropoutMask::new(4, [1]).unwrap()).unwrap();
        let two = solve_mpc(&xq, &xr, &emu, &cfg, &DropoutMask::new(4, [1, 2]).unwrap()).unwrap();
        assert!(full.cost <= one.cost && one.cost <= two.cost);
        for u in &two.inputs {
            assert_eq!(u.entries()[1], 0);
            assert_eq!(u.entries()[2], 0);
        }
    }

    #[test]
    fn literal_input_penalty_switch() {
        let emu = Emulation::two_state_example();
        let mut cfg = MpcConfig::standard(2, 4);
        let u = vec![ActivationPattern::new(vec![1, 0, 0, 0]).unwrap(); 2];
        let x = v(0.0, 0.0);
        let per_stage = mpc_cost(&u, &x, &x, &emu, &cfg).unwrap();
        cfg.terminal_input_penalty_only = true;
        let single = mpc_cost(&u, &x, &x, &emu, &cfg).unwrap();
        assert!((per_stage - single - 0.05).abs() < 1e-15);
    }

    #[test]
    fn zero_start_rollout_stays_put() {
        let emu = Emulation::two_state_example();
        let r = mpc_rollout(&Vector::zeros(2), 20, &emu, &MpcConfig::standard(2, 4), &DropoutPolicy::None).unwrap();
        assert!(r.quantized.states().iter().all(|s| s.norm() == 0.0));
        assert!(r.reference.states().iter().all(|s| s.norm() == 0.0));
        assert!(mpc_rollout(&Vector::zeros(2), 0, &emu, &MpcConfig::standard(2, 4), &DropoutPolicy::None).is_err());
    }

    #[test]
    fn rollout_csv_layout() {
        let emu = Emulation::two_state_example();
        let r = mpc_rollout(&v(1.0, 0.0), 3, &emu, &MpcConfig::standard(2, 4), &DropoutPolicy::Fixed(DropoutMask::new(4, [0, 3]).unwrap())).unwrap();
        let csv = r.to_csv();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "k,t,xqs_0,xqs_1,xref_0,xref_1,dir_index,cost,dropped_channels");
        assert_eq!(lines.len(), 5);
        assert!(lines[1].ends_with(",0;3"));
        assert!(lines[4].ends_with(",,,"));
    }
}
