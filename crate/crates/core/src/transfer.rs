//! Transfer of trained policies to a reference system related by a known
//! similarity transform `H_o = O H O⁻¹`.
//!
//! A base policy sees features in its own coordinates, so target features are
//! pulled back through `blkdiag(O⁻¹, …, O⁻¹)`, the chosen direction is pushed
//! forward by `O`, and the result is snapped onto the target alphabet.

use std::fmt::Write as _;

use rayon::prelude::*;

use crate::dqn::{self, DqnAgent, DqnConfig, EmulationState, TrainLog};
use crate::emulation::{DropoutPolicy, Emulation};
use crate::error::{check_dim, Error, Result};
use crate::lti::{Matrix, Vector};
use crate::mpc::{drive, Rollout};
use crate::nn::Mlp;
use crate::quantization::{squared_distance, DirectionAlphabet, MappingRule, MaskedAlphabet, NearestBackend};
use crate::supervised::{extract_features, FeatureSpec};

/// Relative determinant threshold below which `O` counts as singular.
pub const SINGULAR_TOL: f64 = 1e-12;
/// Set-equality tolerance used by the invariance check.
pub const INVARIANCE_TOL: f64 = 1e-9;

/// An invertible change of coordinates with its cached inverse.
#[derive(Debug, Clone, PartialEq)]
pub struct TransferMap {
    o: Matrix,
    o_inv: Matrix,
}

impl TransferMap {
    pub fn new(o: Matrix) -> Result<Self> {
        if !o.is_square() {
            return Err(Error::NotSquare {
                rows: o.nrows(),
                cols: o.ncols(),
            });
        }
        check_nonsingular(&o)?;
        let o_inv = o
            .clone()
            .try_inverse()
            .ok_or_else(|| Error::Singular(o.determinant()))?;
        let n = o.nrows();
        let residual = (&o * &o_inv - Matrix::identity(n, n)).amax();
        if residual > 1e-10 {
            return Err(Error::Singular(residual));
        }
        Ok(Self { o, o_inv })
    }

    pub fn identity(n: usize) -> Self {
        Self {
            o: Matrix::identity(n, n),
            o_inv: Matrix::identity(n, n),
        }
    }

    pub fn o(&self) -> &Matrix {
        &self.o
    }

    pub fn o_inv(&self) -> &Matrix {
        &self.o_inv
    }

    pub fn dim(&self) -> usize {
        self.o.nrows()
    }

    pub fn inverse(&self) -> Self {
        Self {
            o: self.o_inv.clone(),
            o_inv: self.o.clone(),
        }
    }

    /// `blkdiag(O⁻¹, O⁻¹)`, pulling a packed target state back to base coordinates.
    pub fn lift(&self) -> Matrix {
        self.lift_blocks(2)
    }

    /// `blkdiag(O, O)`.
    pub fn lift_inverse(&self) -> Matrix {
        block_diag(&self.o, 2)
    }

    /// `O⁻¹` repeated `blocks` times on the diagonal.
    pub fn lift_blocks(&self, blocks: usize) -> Matrix {
        block_diag(&self.o_inv, blocks)
    }
}

fn block_diag(m: &Matrix, blocks: usize) -> Matrix {
    let n = m.nrows();
    let mut out = Matrix::zeros(n * blocks, n * blocks);
    for b in 0..blocks {
        out.view_mut((b * n, b * n), (n, n)).copy_from(m);
    }
    out
}

fn check_nonsingular(o: &Matrix) -> Result<()> {
    let det = o.determinant();
    // Hadamard's bound makes the ratio scale-free and at most one.
    let scale: f64 = o.column_iter().map(|c| c.norm()).product();
    if !det.is_finite() || scale == 0.0 || det.abs() < SINGULAR_TOL * scale {
        return Err(Error::Singular(det));
    }
    Ok(())
}

/// `O H O⁻¹`.
pub fn conjugate_system(h: &Matrix, o: &Matrix) -> Result<Matrix> {
    let map = TransferMap::new(o.clone())?;
    check_dim("conjugated system", map.dim(), h.nrows())?;
    if !h.is_square() {
        return Err(Error::NotSquare {
            rows: h.nrows(),
            cols: h.ncols(),
        });
    }
    Ok(&map.o * h * &map.o_inv)
}

/// Whether `{O d}` and the alphabet agree as sets, each alphabet entry being
/// matched at most once.
pub fn is_alphabet_invariant(o: &Matrix, alphabet: &DirectionAlphabet, tol: f64) -> bool {
    if o.nrows() != alphabet.dim() || o.ncols() != alphabet.dim() {
        return false;
    }
    let mut used = vec![false; alphabet.len()];
    let tol2 = tol * tol;
    alphabet.directions().iter().all(|d| {
        let image = o * d;
        let hit = alphabet
            .directions()
            .iter()
            .enumerate()
            .position(|(j, t)| !used[j] && squared_distance(t.as_slice(), image.as_slice()) <= tol2);
        match hit {
            Some(j) => {
                used[j] = true;
                true
            }
            None => false,
        }
    })
}

/// A policy that scores the base alphabet from a feature vector.
pub trait BasePolicy {
    fn input_dim(&self) -> usize;

    fn scores(&self, features: &Vector) -> Result<Vector>;

    /// Features of the current situation, in whatever coordinates the states are given in.
    fn features(&self, x_qs: &Vector, x_ref: &Vector, x_ref_next: &Vector, x_qs_prev: &Vector, h: f64)
        -> Result<Vector>;
}

impl BasePolicy for DqnAgent {
    fn input_dim(&self) -> usize {
        self.q_net.input_dim()
    }

    fn scores(&self, features: &Vector) -> Result<Vector> {
        self.q_values(features)
    }

    fn features(&self, x_qs: &Vector, x_ref: &Vector, _: &Vector, _: &Vector, _: f64) -> Result<Vector> {
        Ok(EmulationState::new(x_qs, x_ref).pack())
    }
}

/// A trained direction classifier together with its feature layout.
#[derive(Debug, Clone)]
pub struct ClassifierPolicy {
    pub model: Mlp,
    pub spec: FeatureSpec,
}

impl BasePolicy for ClassifierPolicy {
    fn input_dim(&self) -> usize {
        self.model.input_dim()
    }

    fn scores(&self, features: &Vector) -> Result<Vector> {
        self.model.predict(features)
    }

    fn features(&self, x_qs: &Vector, x_ref: &Vector, x_ref_next: &Vector, x_qs_prev: &Vector, h: f64)
        -> Result<Vector> {
        extract_features(x_qs, x_ref, x_ref_next, Some(x_qs_prev), self.spec, h)
    }
}

/// One decision of a transferred policy.
#[derive(Debug, Clone, PartialEq)]
pub struct TransferStep {
    /// Index of the base policy's choice in the base alphabet.
    pub base_index: usize,
    /// `O` applied to the base direction.
    pub d_o_raw: Vector,
    pub d_star: Vector,
    /// Index of `d_star` in the target alphabet.
    pub target_index: usize,
    pub correction_norm: f64,
}

/// A base policy wrapped for use on the transformed problem.
#[derive(Debug, Clone)]
pub struct TransferredPolicy<P> {
    pub base: P,
    pub map: TransferMap,
    base_alphabet: DirectionAlphabet,
    rule: MappingRule,
    lift: Matrix,
    invariant: bool,
}

impl<P: BasePolicy> TransferredPolicy<P> {
    /// The mapping rule's alphabet is the target alphabet; zero is excluded
    /// from nearest-neighbour corrections when `exclude_zero` is set.
    pub fn new(
        base: P,
        map: TransferMap,
        base_alphabet: DirectionAlphabet,
        target: DirectionAlphabet,
        exclude_zero: bool,
        backend: NearestBackend,
    ) -> Result<Self> {
        let n = map.dim();
        check_dim("base alphabet", n, base_alphabet.dim())?;
        check_dim("target alphabet", n, target.dim())?;
        if base.input_dim() % n != 0 {
            return Err(Error::Architecture(format!(
                "policy input width {} is not a multiple of the state dimension {n}",
                base.input_dim()
            )));
        }
        let lift = map.lift_blocks(base.input_dim() / n);
        let invariant = base_alphabet == target && is_alphabet_invariant(map.o(), &target, INVARIANCE_TOL);
        let rule = MappingRule::new(target, exclude_zero, backend)?;
        Ok(Self {
            base,
            map,
            base_alphabet,
            rule,
            lift,
            invariant,
        })
    }

    pub fn is_invariant(&self) -> bool {
        self.invariant
    }

    pub fn target(&self) -> &DirectionAlphabet {
        self.rule.alphabet()
    }

    pub fn rule(&self) -> &MappingRule {
        &self.rule
    }

    fn base_choice(&self, f_o: &Vector) -> Result<(usize, Vector)> {
        check_dim("transferred features", self.lift.nrows(), f_o.len())?;
        let f = &self.lift * f_o;
        let scores = self.base.scores(&f)?;
        let index = MaskedAlphabet::full(&self.base_alphabet).argmax(&scores)?;
        Ok((index, self.map.o() * self.base_alphabet.direction(index)))
    }

    fn finish(&self, base_index: usize, d_o_raw: Vector, d_star: Vector, target_index: usize) -> TransferStep {
        let correction_norm = (&d_star - &d_o_raw).norm();
        TransferStep {
            base_index,
            d_o_raw,
            d_star,
            target_index,
            correction_norm,
        }
    }
}

/// Pull features back, evaluate the base policy, push the direction forward
/// and snap it onto the target alphabet.
pub fn transfer_policy_step<P: BasePolicy>(tp: &TransferredPolicy<P>, f_o: &Vector) -> Result<TransferStep> {
    let (base_index, d_o_raw) = tp.base_choice(f_o)?;
    if tp.invariant {
        if let Some(i) = tp.target().index_of(&d_o_raw) {
            let d_star = tp.target().direction(i).clone();
            return Ok(tp.finish(base_index, d_o_raw, d_star, i));
        }
    }
    let (d_star, i) = tp.rule.map(&d_o_raw)?;
    Ok(tp.finish(base_index, d_o_raw, d_star, i))
}

/// As [`transfer_policy_step`], but only directions in `available` may be chosen.
pub fn transfer_policy_step_masked<P: BasePolicy>(
    tp: &TransferredPolicy<P>,
    f_o: &Vector,
    available: &MaskedAlphabet,
) -> Result<TransferStep> {
    let step = transfer_policy_step(tp, f_o)?;
    if available.contains(step.target_index) {
        return Ok(step);
    }
    let target = tp.target();
    let skip_zero = tp.rule.excludes_zero() && available.len() > 1;
    let mut best: Option<(f64, usize)> = None;
    for &i in available.indices() {
        if skip_zero && i == target.zero_index() {
            continue;
        }
        let dist = squared_distance(target.direction(i).as_slice(), step.d_o_raw.as_slice());
        if best.is_none_or(|(b, _)| dist < b) {
            best = Some((dist, i));
        }
    }
    let (_, i) = best.ok_or(Error::EmptyCandidates)?;
    let TransferStep { base_index, d_o_raw, .. } = step;
    Ok(tp.finish(base_index, d_o_raw, target.direction(i).clone(), i))
}

/// Rollout of a transferred policy on the target problem.
pub fn transferred_rollout<P: BasePolicy>(
    tp: &TransferredPolicy<P>,
    emu: &Emulation,
    x0: &Vector,
    steps: usize,
    policy: &DropoutPolicy,
) -> Result<(Rollout, Vec<TransferStep>)> {
    if emu.alphabet.directions() != tp.target().directions() {
        return Err(Error::Precondition(
            "the emulation's alphabet must be the policy's target alphabet".into(),
        ));
    }
    let phi = emu.flow()?;
    let h = emu.h();
    let mut prev: Option<Vector> = None;
    let mut log = Vec::with_capacity(steps);
    let rollout = drive(emu, x0, steps, policy, |_, xq, xr, mask| {
        let next_ref = &*phi * xr;
        let f_o = tp.base.features(xq, xr, &next_ref, prev.as_ref().unwrap_or(xq), h)?;
        prev = Some(xq.clone());
        let (step, rep) = if mask.is_empty() {
            let step = transfer_policy_step(tp, &f_o)?;
            let rep = emu.alphabet.representative(step.target_index).clone();
            (step, rep)
        } else {
            let available = emu.available(mask)?;
            let step = transfer_policy_step_masked(tp, &f_o, &available)?;
            let rep = available
                .representative_for(step.target_index)
                .expect("masked step picks an available index")
                .clone();
            (step, rep)
        };
        let index = step.target_index;
        log.push(step);
        Ok((index, rep, f64::NAN))
    })?;
    Ok((rollout, log))
}

/// Absorb `lift` into the first layer: `W₁ ← W₁·lift`, other parameters copied.
pub fn absorb_first_layer(net: &Mlp, lift: &Matrix) -> Result<Mlp> {
    let first = net
        .layers()
        .first()
        .ok_or_else(|| Error::Architecture("network has no layers".into()))?;
    if lift.nrows() != first.weights.ncols() || !lift.is_square() {
        return Err(Error::Architecture(format!(
            "first layer takes {} inputs but the transform is {}×{}",
            first.weights.ncols(),
            lift.nrows(),
            lift.ncols()
        )));
    }
    let mut out = net.clone();
    let w = &out.layers()[0].weights * lift;
    out.layers_mut()[0].weights = w;
    Ok(out)
}

/// Network realizing `s_o ↦ q_net(blkdiag(O⁻¹, O⁻¹) s_o)`.
pub fn transform_q_weights(q_net: &Mlp, map: &TransferMap) -> Result<Mlp> {
    check_dim("transformed network input", 2 * map.dim(), q_net.input_dim())?;
    absorb_first_layer(q_net, &map.lift())
}

/// The agent for the transformed problem. Its blockwise input scaling
/// commutes with the lift, so absorbing into the raw weights is exact.
pub fn transform_agent(agent: &DqnAgent, map: &TransferMap) -> Result<DqnAgent> {
    let mut out = agent.clone();
    out.q_net = transform_q_weights(&agent.q_net, map)?;
    out.target_net = out.q_net.clone();
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TheoremRow {
    pub state_id: usize,
    pub agree: bool,
    /// Target-alphabet index of `O` applied to the base greedy direction.
    pub base_dir_index: usize,
    /// Target-alphabet index of the transformed network's greedy direction.
    pub transferred_dir_index: usize,
    pub nn_correction_norm: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TheoremReport {
    pub rows: Vec<TheoremRow>,
}

impl TheoremReport {
    pub fn agreement_rate(&self) -> f64 {
        if self.rows.is_empty() {
            return 1.0;
        }
        self.rows.iter().filter(|r| r.agree).count() as f64 / self.rows.len() as f64
    }

    /// CSV `state_id,agree,base_dir_index,transferred_dir_index,nn_correction_norm`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("state_id,agree,base_dir_index,transferred_dir_index,nn_correction_norm\n");
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{},{},{},{},{}",
                r.state_id, r.agree as u8, r.base_dir_index, r.transferred_dir_index, r.nn_correction_norm
            );
        }
        out
    }
}

/// Compare the absorbed network's greedy choice against `O` applied to the
/// base agent's greedy choice at the pulled-back state.
pub fn verify_theorem1(
    agent: &DqnAgent,
    map: &TransferMap,
    alphabet: &DirectionAlphabet,
    states: &[Vector],
) -> Result<TheoremReport> {
    let transformed = transform_agent(agent, map)?;
    verify_with_network(agent, &transformed, map, alphabet, states)
}

/// [`verify_theorem1`] against an arbitrary candidate for the transformed agent.
pub fn verify_with_network(
    agent: &DqnAgent,
    transformed: &DqnAgent,
    map: &TransferMap,
    alphabet: &DirectionAlphabet,
    states: &[Vector],
) -> Result<TheoremReport> {
    if !is_alphabet_invariant(map.o(), alphabet, INVARIANCE_TOL) {
        return Err(Error::Precondition(
            "the alphabet is not invariant under the transform".into(),
        ));
    }
    check_dim("agent actions", alphabet.len(), agent.actions())?;
    let full = MaskedAlphabet::full(alphabet);
    let lift = map.lift();
    let image_index = |i: usize| -> Result<(usize, f64)> {
        let image = map.o() * alphabet.direction(i);
        let j = alphabet.index_of(&image).ok_or_else(|| {
            Error::Precondition(format!("image of direction {i} is not in the alphabet"))
        })?;
        Ok((j, (alphabet.direction(j) - image).norm()))
    };
    let rows = states
        .iter()
        .enumerate()
        .map(|(state_id, s_o)| {
            check_dim("sampled state", lift.nrows(), s_o.len())?;
            let base = full.argmax(&agent.q_values(&(&lift * s_o))?)?;
            let new = full.argmax(&transformed.q_values(s_o)?)?;
            let (base_dir_index, _) = image_index(base)?;
            let (transferred_dir_index, nn_correction_norm) = image_index(new)?;
            Ok(TheoremRow {
                state_id,
                agree: base_dir_index == transferred_dir_index,
                base_dir_index,
                transferred_dir_index,
                nn_correction_norm,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(TheoremReport { rows })
}

/// Packed states `[e; x_ref]` with every entry uniform in `[-radius, radius]`.
pub fn sample_states(count: usize, n: usize, radius: f64, seed: u64) -> Vec<Vector> {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|_| Vector::from_fn(2 * n, |_, _| rng.random_range(-radius..=radius)))
        .collect()
}

/// Per-seed outcome of a warm-versus-cold comparison.
#[derive(Debug, Clone, PartialEq)]
pub struct WarmStartRun {
    pub seed: u64,
    pub warm_error: f64,
    pub cold_error: f64,
    pub warm_log: TrainLog,
    pub cold_log: TrainLog,
}

#[derive(Debug, Clone, PartialEq)]
pub struct WarmStartReport {
    pub runs: Vec<WarmStartRun>,
}

impl WarmStartReport {
    pub fn warm_mean(&self) -> f64 {
        mean(self.runs.iter().map(|r| r.warm_error))
    }

    pub fn cold_mean(&self) -> f64 {
        mean(self.runs.iter().map(|r| r.cold_error))
    }

    /// CSV `seed,warm_error,cold_error`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("seed,warm_error,cold_error\n");
        for r in &self.runs {
            let _ = writeln!(out, "{},{},{}", r.seed, r.warm_error, r.cold_error);
        }
        out
    }
}

fn mean(values: impl Iterator<Item = f64>) -> f64 {
    let (sum, count) = values.fold((0.0, 0usize), |(s, c), v| (s + v, c + 1));
    if count == 0 {
        f64::NAN
    } else {
        sum / count as f64
    }
}

/// Mean terminal emulation error `|x_ref(T) - x_qs(T)|` of greedy rollouts.
pub fn mean_terminal_error(agent: &DqnAgent, emu: &Emulation, starts: &[Vector], steps: usize) -> Result<f64> {
    let errors = starts
        .iter()
        .map(|x0| dqn::greedy_rollout(agent, emu, x0, steps, &DropoutPolicy::None).map(|r| r.terminal_error()))
        .collect::<Result<Vec<_>>>()?;
    Ok(mean(errors.into_iter()))
}

/// Train a copy of `base` and a freshly initialized agent on `target` with the
/// same configuration and environment seed, for each seed.
pub fn warm_start_train(
    base: &DqnAgent,
    target: &Emulation,
    cfg: &DqnConfig,
    seeds: &[u64],
    starts: &[Vector],
    eval_steps: usize,
) -> Result<WarmStartReport> {
    let probe = DqnAgent::new(base.q_net.input_dim(), base.actions(), cfg)?;
    if !probe.q_net.same_architecture(&base.q_net) {
        return Err(Error::Architecture(
            "base agent does not match the configured architecture".into(),
        ));
    }
    let runs = seeds
        .par_iter()
        .map(|&seed| {
            let cfg = DqnConfig { seed, ..cfg.clone() };
            let mut warm = DqnAgent::from_network(base.q_net.clone(), &cfg);
            let mut cold = DqnAgent::new(base.q_net.input_dim(), base.actions(), &cfg)?;
            let warm_log = dqn::train(&mut warm, target, &cfg)?;
            let cold_log = dqn::train(&mut cold, target, &cfg)?;
            Ok(WarmStartRun {
                seed,
                warm_error: mean_terminal_error(&warm, target, starts, eval_steps)?,
                cold_error: mean_terminal_error(&cold, target, starts, eval_steps)?,
                warm_log,
                cold_log,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(WarmStartReport { runs })
}
