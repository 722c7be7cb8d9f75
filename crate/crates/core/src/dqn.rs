//! DQN for the emulation task, trained on the per-cue maximum of the
//! target-network loss and the mean squared Bellman error.
//!
//! The state is `s = [x_ref - x_qs; x_ref]`, the action set is the direction
//! alphabet, and greedy decisions only consider directions still reachable
//! under the current dropout mask.

use std::collections::VecDeque;
use std::fmt::Write as _;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::emulation::{DropoutPolicy, Emulation};
use crate::error::{check_dim, Error, Result};
use crate::lti::{Matrix, Vector};
use crate::mpc::{drive, Rollout};
use crate::nn::{Activation, AdamConfig, Mlp, Optimizer, Trainer};
use crate::quantization::MaskedAlphabet;

/// `s = [e; x_ref]` with `e = x_ref - x_qs`.
#[derive(Debug, Clone, PartialEq)]
pub struct EmulationState {
    pub error: Vector,
    pub x_ref: Vector,
}

impl EmulationState {
    pub fn new(x_qs: &Vector, x_ref: &Vector) -> Self {
        Self {
            error: x_ref - x_qs,
            x_ref: x_ref.clone(),
        }
    }

    pub fn dim(&self) -> usize {
        self.x_ref.len()
    }

    pub fn x_qs(&self) -> Vector {
        &self.x_ref - &self.error
    }

    pub fn pack(&self) -> Vector {
        let n = self.dim();
        Vector::from_iterator(2 * n, self.error.iter().chain(self.x_ref.iter()).copied())
    }

    pub fn unpack(s: &Vector) -> Result<Self> {
        if s.len() % 2 != 0 {
            return Err(Error::InvalidArgument("packed state must have even length".into()));
        }
        if s.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("emulation state".into()));
        }
        let n = s.len() / 2;
        Ok(Self {
            error: s.rows(0, n).into_owned(),
            x_ref: s.rows(n, n).into_owned(),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum RewardMode {
    /// `r_t = -|e(t)|²`, independent of the action taken at `t`.
    Literal,
    /// `r_t = -|e(t+1)|²`.
    #[default]
    NextError,
}

impl RewardMode {
    pub fn as_str(self) -> &'static str {
        match self {
            RewardMode::Literal => "literal",
            RewardMode::NextError => "next_error",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "literal" => Ok(RewardMode::Literal),
            "next_error" => Ok(RewardMode::NextError),
            other => Err(Error::InvalidArgument(format!("unknown reward mode `{other}`"))),
        }
    }
}

/// One environment step from `s` along direction `d_index`; the reward is
/// the negated squared error (before scaling).
pub fn env_transition(
    s: &EmulationState,
    d_index: usize,
    emu: &Emulation,
    mode: RewardMode,
) -> Result<(EmulationState, f64)> {
    check_dim("transition state", emu.dim(), s.dim())?;
    if d_index >= emu.alphabet.len() {
        return Err(Error::InvalidArgument(format!(
            "direction index {d_index} out of range for {} directions",
            emu.alphabet.len()
        )));
    }
    let x_qs = s.x_qs();
    let next_qs = emu.plant.step_direction(&x_qs, emu.alphabet.direction(d_index));
    let next_ref = &*emu.flow()? * &s.x_ref;
    let next = EmulationState::new(&next_qs, &next_ref);
    let r = match mode {
        RewardMode::Literal => -s.error.norm_squared(),
        RewardMode::NextError => -next.error.norm_squared(),
    };
    Ok((next, r))
}

#[derive(Debug, Clone, PartialEq)]
pub struct MemoryCue {
    pub s: Vector,
    pub d_index: usize,
    pub r: f64,
    pub s_next: Vector,
}

/// Fixed-capacity FIFO of cues.
#[derive(Debug, Clone)]
pub struct ReplayMemory {
    cues: VecDeque<MemoryCue>,
    capacity: usize,
}

impl ReplayMemory {
    pub fn new(capacity: usize) -> Result<Self> {
        if capacity == 0 {
            return Err(Error::InvalidArgument("replay capacity must be positive".into()));
        }
        Ok(Self {
            cues: VecDeque::with_capacity(capacity.min(1 << 16)),
            capacity,
        })
    }

    pub fn push(&mut self, cue: MemoryCue) {
        if self.cues.len() == self.capacity {
            self.cues.pop_front();
        }
        self.cues.push_back(cue);
    }

    pub fn len(&self) -> usize {
        self.cues.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cues.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn iter(&self) -> impl Iterator<Item = &MemoryCue> {
        self.cues.iter()
    }

    /// Up to `k` distinct cues drawn uniformly.
    pub fn sample<R: Rng + ?Sized>(&self, k: usize, rng: &mut R) -> Vec<&MemoryCue> {
        let k = k.min(self.cues.len());
        index::sample(rng, self.cues.len(), k)
            .into_iter()
            .map(|i| &self.cues[i])
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DqnConfig {
    pub hidden: usize,
    pub gamma: f64,
    pub sync_period: usize,
    pub replay_capacity: usize,
    pub batch_size: usize,
    pub epsilon_start: f64,
    pub epsilon_end: f64,
    /// Fraction of all training steps over which ε decays linearly.
    pub epsilon_decay_fraction: f64,
    pub reward_mode: RewardMode,
    /// Positive multiplier on rewards; leaves the optimal policy unchanged.
    pub reward_scale: f64,
    /// Multiplier on the error block of the state fed to the network.
    pub error_scale: f64,
    pub optimizer: Optimizer,
    pub adam: AdamConfig,
    pub episodes: usize,
    pub steps: usize,
    pub start_radius: f64,
    /// Dropout applied while exploring.
    pub training_dropout: DropoutPolicy,
    pub seed: u64,
}

impl Default for DqnConfig {
    fn default() -> Self {
        Self {
            hidden: 200,
            gamma: 0.9,
            sync_period: 10,
            replay_capacity: 10_000,
            batch_size: 64,
            epsilon_start: 1.0,
            epsilon_end: 0.05,
            epsilon_decay_fraction: 0.5,
            reward_mode: RewardMode::NextError,
            reward_scale: 1.0,
            error_scale: 1.0,
            optimizer: Optimizer::Adam,
            adam: AdamConfig::default(),
            episodes: 60,
            steps: 200,
            start_radius: 1.0,
            training_dropout: DropoutPolicy::None,
            seed: 0,
        }
    }
}

impl DqnConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            return Err(Error::InvalidArgument(format!("discount must lie in (0, 1), got {}", self.gamma)));
        }
        for (name, e) in [("epsilon_start", self.epsilon_start), ("epsilon_end", self.epsilon_end)] {
            if !(0.0..=1.0).contains(&e) {
                return Err(Error::InvalidArgument(format!("{name} must lie in [0, 1], got {e}")));
            }
        }
        if self.sync_period == 0 || self.batch_size == 0 || self.hidden == 0 {
            return Err(Error::InvalidArgument(
                "sync period, batch size and hidden width must be positive".into(),
            ));
        }
        if !(self.reward_scale > 0.0) || !(self.error_scale > 0.0) {
            return Err(Error::InvalidArgument("reward and error scales must be positive".into()));
        }
        Ok(())
    }
}

/// Q-network, target network and the hyperparameters that use them.
#[derive(Debug, Clone)]
pub struct DqnAgent {
    pub q_net: Mlp,
    pub target_net: Mlp,
    pub epsilon: f64,
    pub gamma: f64,
    pub sync_period: usize,
    pub batch_size: usize,
    pub error_scale: f64,
    trainer: Trainer,
}

/// Batch loss with its decomposition and the `q_net` gradients.
#[derive(Debug, Clone)]
pub struct LossReport {
    pub loss: f64,
    pub l_dqn: f64,
    pub l_msbe: f64,
    /// Cues whose Bellman-residual branch was strictly larger.
    pub msbe_active: usize,
    pub per_cue: Vec<(f64, f64)>,
    pub grads: crate::nn::Gradients,
}

impl DqnAgent {
    /// `2n → hidden (relu) → |Dir| (linear)`; both networks start equal.
    pub fn new(state_dim: usize, actions: usize, cfg: &DqnConfig) -> Result<Self> {
        cfg.validate()?;
        let q_net = Mlp::new(
            &[state_dim, cfg.hidden, actions],
            &[Activation::Relu, Activation::Linear],
            cfg.seed,
        )?;
        Ok(Self::from_network(q_net, cfg))
    }

    pub fn from_network(q_net: Mlp, cfg: &DqnConfig) -> Self {
        Self {
            target_net: q_net.clone(),
            trainer: Trainer::new(&q_net, cfg.optimizer, cfg.adam),
            q_net,
            epsilon: cfg.epsilon_start,
            gamma: cfg.gamma,
            sync_period: cfg.sync_period,
            batch_size: cfg.batch_size,
            error_scale: cfg.error_scale,
        }
    }

    /// Fresh optimizer state, same parameters.
    pub fn reset_optimizer(&mut self, cfg: &DqnConfig) {
        self.trainer = Trainer::new(&self.q_net, cfg.optimizer, cfg.adam);
    }

    pub fn actions(&self) -> usize {
        self.q_net.output_dim()
    }

    /// Network input for a packed state: the error block is scaled.
    pub fn network_input(&self, s: &Vector) -> Vector {
        let n = s.len() / 2;
        let mut x = s.clone();
        x.rows_mut(0, n).scale_mut(self.error_scale);
        x
    }

    fn network_inputs(&self, states: &[&Vector]) -> Matrix {
        let cols: Vec<Vector> = states.iter().map(|s| self.network_input(s)).collect();
        Matrix::from_columns(&cols)
    }

    pub fn q_values(&self, s: &Vector) -> Result<Vector> {
        self.q_net.predict(&self.network_input(s))
    }

    pub fn greedy(&self, s: &Vector, available: &MaskedAlphabet) -> Result<usize> {
        available.argmax(&self.q_values(s)?)
    }

    /// ε-greedy over the available directions.
    pub fn select_action<R: Rng + ?Sized>(
        &self,
        s: &Vector,
        available: &MaskedAlphabet,
        rng: &mut R,
    ) -> Result<usize> {
        if available.is_empty() {
            return Err(Error::EmptyCandidates);
        }
        if self.epsilon > 0.0 && rng.random::<f64>() < self.epsilon {
            return Ok(available.indices()[rng.random_range(0..available.len())]);
        }
        self.greedy(s, available)
    }

    pub fn sync_target(&mut self) -> Result<()> {
        self.target_net.copy_from(&self.q_net)
    }

    /// Per cue `max{l_DQN, l_MSBE}`, averaged. Gradient flows through
    /// `Q_φ(s, d)` always and through `max_d' Q_φ(s', d')` only where the
    /// Bellman-residual branch is strictly larger.
    pub fn compute_loss(&self, batch: &[&MemoryCue]) -> Result<LossReport> {
        if batch.is_empty() {
            return Err(Error::InvalidArgument("loss batch must be non-empty".into()));
        }
        let b = batch.len();
        let actions = self.actions();
        for c in batch {
            if c.d_index >= actions {
                return Err(Error::InvalidArgument(format!("cue action {} out of range", c.d_index)));
            }
        }
        let mut states: Vec<&Vector> = batch.iter().map(|c| &c.s).collect();
        states.extend(batch.iter().map(|c| &c.s_next));
        let joint = self.network_inputs(&states);
        let cache = self.q_net.forward_batch(&joint)?;
        let target_next = self.target_net.predict_batch(&joint.columns(b, b).into_owned())?;
        let q = cache.output();

        let mut d_out = Matrix::zeros(actions, 2 * b);
        let mut per_cue = Vec::with_capacity(b);
        let (mut total, mut sum_dqn, mut sum_msbe, mut active) = (0.0, 0.0, 0.0, 0);
        let scale = 1.0 / b as f64;
        for (j, c) in batch.iter().enumerate() {
            let q_sd = q[(c.d_index, j)];
            let max_target = target_next.column(j).max();
            let (arg_next, max_online) = {
                let col = q.column(b + j);
                let mut best = 0;
                for i in 1..actions {
                    if col[i] > col[best] {
                        best = i;
                    }
                }
                (best, col[best])
            };
            let delta_dqn = c.r + self.gamma * max_target - q_sd;
            let delta_msbe = c.r + self.gamma * max_online - q_sd;
            let (l_dqn, l_msbe) = (delta_dqn * delta_dqn, delta_msbe * delta_msbe);
            per_cue.push((l_dqn, l_msbe));
            sum_dqn += l_dqn;
            sum_msbe += l_msbe;
            if l_msbe > l_dqn {
                active += 1;
                total += l_msbe;
                d_out[(c.d_index, j)] -= 2.0 * delta_msbe * scale;
                d_out[(arg_next, b + j)] += 2.0 * self.gamma * delta_msbe * scale;
            } else {
                total += l_dqn;
                d_out[(c.d_index, j)] -= 2.0 * delta_dqn * scale;
            }
        }
        let loss = total * scale;
        if !loss.is_finite() {
            return Err(Error::NonFinite(format!(
                "DQN loss (l_dqn {}, l_msbe {})",
                sum_dqn * scale,
                sum_msbe * scale
            )));
        }
        let grads = self.q_net.backward(&cache, &d_out)?;
        Ok(LossReport {
            loss,
            l_dqn: sum_dqn * scale,
            l_msbe: sum_msbe * scale,
            msbe_active: active,
            per_cue,
            grads,
        })
    }

    /// Text container: agent hyperparameters followed by the Q-network.
    pub fn save(&self) -> String {
        let mut out = String::from("quantem-dqn 1\n");
        let _ = writeln!(out, "gamma {:e}", self.gamma);
        let _ = writeln!(out, "epsilon {:e}", self.epsilon);
        let _ = writeln!(out, "sync_period {}", self.sync_period);
        let _ = writeln!(out, "batch_size {}", self.batch_size);
        let _ = writeln!(out, "error_scale {:e}", self.error_scale);
        out.push_str(&self.q_net.save());
        out
    }

    pub fn load(text: &str, cfg: &DqnConfig) -> Result<Self> {
        let lines: Vec<&str> = text.lines().collect();
        if lines.first().map(|l| l.trim()) != Some("quantem-dqn 1") {
            return Err(Error::Parse {
                line: 1,
                message: "expected `quantem-dqn 1` header".into(),
            });
        }
        let get = |i: usize, key: &str| -> Result<String> {
            lines
                .get(i)
                .and_then(|l| l.trim().strip_prefix(key))
                .map(|v| v.trim().to_string())
                .ok_or(Error::Parse {
                    line: i + 1,
                    message: format!("expected `{key}`"),
                })
        };
        let parse_f = |i: usize, s: String| {
            s.parse::<f64>().map_err(|e| Error::Parse {
                line: i + 1,
                message: e.to_string(),
            })
        };
        let parse_u = |i: usize, s: String| {
            s.parse::<usize>().map_err(|e| Error::Parse {
                line: i + 1,
                message: e.to_string(),
            })
        };
        let gamma = parse_f(1, get(1, "gamma")?)?;
        let epsilon = parse_f(2, get(2, "epsilon")?)?;
        let sync_period = parse_u(3, get(3, "sync_period")?)?;
        let batch_size = parse_u(4, get(4, "batch_size")?)?;
        let error_scale = parse_f(5, get(5, "error_scale")?)?;
        let net_text = lines[6..].join("\n");
        let q_net = Mlp::load(&net_text).map_err(|e| match e {
            Error::Parse { line, message } => Error::Parse {
                line: line + 6,
                message,
            },
            other => other,
        })?;
        let mut agent = Self::from_network(q_net, cfg);
        agent.gamma = gamma;
        agent.epsilon = epsilon;
        agent.sync_period = sync_period;
        agent.batch_size = batch_size;
        agent.error_scale = error_scale;
        Ok(agent)
    }
}

/// One row of the training log.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainStep {
    pub episode: usize,
    pub step: usize,
    pub loss: f64,
    pub l_dqn: f64,
    pub l_msbe: f64,
    pub epsilon: f64,
    /// Undiscounted return accumulated so far in the episode.
    pub episode_return: f64,
}

/// Loss values recorded around a target sync, on the same minibatch.
#[derive(Debug, Clone, PartialEq)]
pub struct SyncRecord {
    pub update: usize,
    /// `max{l_DQN(φ_new; φ_old), l_MSBE(φ_new)}` before the copy.
    pub loss_before: f64,
    pub l_dqn_after: f64,
    pub l_msbe_after: f64,
}

impl SyncRecord {
    /// After the copy both branches coincide, and the post-copy loss is
    /// bounded by the pre-copy max-loss.
    pub fn holds(&self) -> bool {
        self.l_dqn_after == self.l_msbe_after && self.l_msbe_after <= self.loss_before
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainLog {
    pub steps: Vec<TrainStep>,
    pub episode_returns: Vec<f64>,
    pub syncs: Vec<SyncRecord>,
}

impl TrainLog {
    /// CSV `episode,step,loss,l_dqn,l_msbe,epsilon,return`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("episode,step,loss,l_dqn,l_msbe,epsilon,return\n");
        for s in &self.steps {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{}",
                s.episode, s.step, s.loss, s.l_dqn, s.l_msbe, s.epsilon, s.episode_return
            );
        }
        out
    }
}

fn epsilon_at(cfg: &DqnConfig, step: usize, total: usize) -> f64 {
    let horizon = (cfg.epsilon_decay_fraction * total as f64).max(1.0);
    let frac = (step as f64 / horizon).min(1.0);
    cfg.epsilon_start + (cfg.epsilon_end - cfg.epsilon_start) * frac
}

/// Episodic training loop: act ε-greedily, store the cue, fit one minibatch
/// per step, copy φ to the target every `sync_period` updates.
pub fn train(agent: &mut DqnAgent, emu: &Emulation, cfg: &DqnConfig) -> Result<TrainLog> {
    cfg.validate()?;
    check_dim("agent input", 2 * emu.dim(), agent.q_net.input_dim())?;
    check_dim("agent actions", emu.alphabet.len(), agent.actions())?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ 0xD0);
    let mut masks = cfg.training_dropout.sampler(emu.channels())?;
    let mut memory = ReplayMemory::new(cfg.replay_capacity)?;
    let full = MaskedAlphabet::full(&emu.alphabet);
    let total = cfg.episodes * cfg.steps;
    let mut log = TrainLog::default();
    let mut global = 0usize;
    let mut updates = 0usize;
    for episode in 0..cfg.episodes {
        let angle = rng.random_range(0.0..std::f64::consts::TAU);
        let x0 = start_point(emu.dim(), angle, cfg.start_radius);
        let mut state = EmulationState::new(&x0, &x0);
        let mut episode_return = 0.0;
        for step in 0..cfg.steps {
            agent.epsilon = epsilon_at(cfg, global, total);
            global += 1;
            let mask = masks.next_mask();
            let available = if mask.is_empty() {
                full.clone()
            } else {
                emu.available(&mask)?
            };
            let s = state.pack();
            let d = agent.select_action(&s, &available, &mut rng)?;
            let (next, r) = env_transition(&state, d, emu, cfg.reward_mode)?;
            let r = r * cfg.reward_scale;
            episode_return += r;
            memory.push(MemoryCue {
                s,
                d_index: d,
                r,
                s_next: next.pack(),
            });
            state = next;
            if state.error.norm() > crate::emulation::DIVERGENCE_NORM {
                return Err(Error::Diverged {
                    step,
                    norm: state.error.norm(),
                });
            }

            let batch = memory.sample(cfg.batch_size, &mut rng);
            let report = agent.compute_loss(&batch)?;
            agent.trainer.step(&mut agent.q_net, &report.grads)?;
            updates += 1;
            log.steps.push(TrainStep {
                episode,
                step,
                loss: report.loss,
                l_dqn: report.l_dqn,
                l_msbe: report.l_msbe,
                epsilon: agent.epsilon,
                episode_return,
            });
            if updates % cfg.sync_period == 0 {
                let before = agent.compute_loss(&batch)?;
                agent.sync_target()?;
                let after = agent.compute_loss(&batch)?;
                log.syncs.push(SyncRecord {
                    update: updates,
                    loss_before: before.loss,
                    l_dqn_after: after.l_dqn,
                    l_msbe_after: after.l_msbe,
                });
            }
        }
        log.episode_returns.push(episode_return);
    }
    Ok(log)
}

fn start_point(n: usize, angle: f64, radius: f64) -> Vector {
    let mut x = Vector::zeros(n);
    x[0] = radius * angle.cos();
    if n > 1 {
        x[1] = radius * angle.sin();
    }
    x
}

/// ε = 0 rollout with per-step dropout masks.
pub fn greedy_rollout(
    agent: &DqnAgent,
    emu: &Emulation,
    x0: &Vector,
    steps: usize,
    policy: &DropoutPolicy,
) -> Result<Rollout> {
    check_dim("agent input", 2 * emu.dim(), agent.q_net.input_dim())?;
    check_dim("agent actions", emu.alphabet.len(), agent.actions())?;
    let full = MaskedAlphabet::full(&emu.alphabet);
    drive(emu, x0, steps, policy, |_, xq, xr, mask| {
        let s = EmulationState::new(xq, xr).pack();
        let available = if mask.is_empty() {
            full.clone()
        } else {
            emu.available(mask)?
        };
        let index = agent.greedy(&s, &available)?;
        let rep = available
            .representative_for(index)
            .expect("greedy picks an available index")
            .clone();
        Ok((index, rep, f64::NAN))
    })
}

/// Eight evenly spaced starts on the unit circle (2-D problems).
pub fn compass_starts() -> Vec<Vector> {
    crate::supervised::circle_starts(8, 1.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::quantization::DropoutMask;

    fn small_cfg() -> DqnConfig {
        DqnConfig {
            hidden: 12,
            episodes: 2,
            steps: 30,
            batch_size: 8,
            sync_period: 7,
            ..DqnConfig::default()
        }
    }

    fn v(a: f64, b: f64) -> Vector {
        Vector::from_vec(vec![a, b])
    }

    #[test]
    fn pack_order_is_error_then_reference() {
        let s = EmulationState::new(&v(0.2, 0.1), &v(1.0, -1.0));
        assert_eq!(s.pack(), Vector::from_vec(vec![0.8, -1.1, 1.0, -1.0]));
        assert_eq!(EmulationState::unpack(&s.pack()).unwrap(), s);
        assert!(EmulationState::unpack(&Vector::zeros(3)).is_err());
    }

    #[test]
    fn origin_transition_has_zero_reward() {
        let emu = Emulation::two_state_example();
        let s = EmulationState::new(&Vector::zeros(2), &Vector::zeros(2));
        for mode in [RewardMode::Literal, RewardMode::NextError] {
            let (next, r) = env_transition(&s, emu.alphabet.zero_index(), &emu, mode).unwrap();
            assert_eq!(r, 0.0);
            assert_eq!(next, s);
        }
        assert!(env_transition(&s, 25, &emu, RewardMode::Literal).is_err());
    }

    #[test]
    fn transition_reward_by_hand() {
        let emu = Emulation::two_state_example();
        let x_ref = v(1.0, 0.0);
        let x_qs = v(0.9, 0.0);
        let s = EmulationState::new(&x_qs, &x_ref);
        let d = emu.alphabet.index_of(&v(0.05, 0.0)).unwrap();
        let (_, r) = env_transition(&s, d, &emu, RewardMode::NextError).unwrap();
        let next_ref = emu.reference.reference_step(&x_ref, 0.05).unwrap();
        let e = next_ref - v(0.95, 0.0);
        assert!((r + e.norm_squared()).abs() < 1e-15);
        let (_, r) = env_transition(&s, d, &emu, RewardMode::Literal).unwrap();
        assert!((r + 0.01).abs() < 1e-15);
    }

    #[test]
    fn transitions_depend_only_on_packed_state() {
        let emu = Emulation::two_state_example();
        let s = EmulationState::new(&v(0.31, -0.42), &v(0.35, -0.4));
        let replay = EmulationState::unpack(&s.pack()).unwrap();
        for d in 0..25 {
            assert_eq!(
                env_transition(&s, d, &emu, RewardMode::NextError).unwrap(),
                env_transition(&replay, d, &emu, RewardMode::NextError).unwrap()
            );
        }
    }

    #[test]
    fn replay_memory_evicts_oldest() {
        let mut m = ReplayMemory::new(3).unwrap();
        for i in 0..5 {
            m.push(MemoryCue { s: Vector::zeros(1), d_index: i, r: 0.0, s_next: Vector::zeros(1) });
        }
        assert_eq!(m.len(), 3);
        let kept: Vec<usize> = m.iter().map(|c| c.d_index).collect();
        assert_eq!(kept, vec![2, 3, 4]);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(m.sample(10, &mut rng).len(), 3);
        assert!(ReplayMemory::new(0).is_err());
    }

    #[test]
    fn greedy_selection_with_hand_set_outputs() {
        let emu = Emulation::two_state_example();
        let mut agent = DqnAgent::new(4, 25, &small_cfg()).unwrap();
        agent.epsilon = 0.0;
        // Zero the network and let the output bias prefer index 19, then 3.
        for l in agent.q_net.layers_mut() {
            l.weights.fill(0.0);
            l.biases.fill(0.0);
        }
        let last = agent.q_net.layers().len() - 1;
        agent.q_net.layers_mut()[last].biases[19] = 3.0;
        agent.q_net.layers_mut()[last].biases[3] = 2.0;
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let s = Vector::from_vec(vec![0.1, 0.0, 1.0, 0.0]);
        let full = MaskedAlphabet::full(&emu.alphabet);
        for _ in 0..10 {
            assert_eq!(agent.select_action(&s, &full, &mut rng).unwrap(), 19);
        }
        // Direction 19 is (0.05, 0.1); reaching y = 0.1 needs both y channels.
        let masked = emu.available(&DropoutMask::new(4, [1]).unwrap()).unwrap();
        assert!(!masked.contains(19));
        let q = agent.q_values(&s).unwrap();
        let brute = masked
            .indices()
            .iter()
            .copied()
            .fold(None, |best: Option<usize>, i| match best {
                Some(b) if q[b] >= q[i] => Some(b),
                _ => Some(i),
            })
            .unwrap();
        assert_eq!(agent.select_action(&s, &masked, &mut rng).unwrap(), brute);
        assert_eq!(brute, 3);
    }

    #[test]
    fn full_exploration_is_uniform() {
        let emu = Emulation::two_state_example();
        let mut agent = DqnAgent::new(4, 25, &small_cfg()).unwrap();
        agent.epsilon = 1.0;
        let masked = emu.available(&DropoutMask::new(4, [0]).unwrap()).unwrap();
        let mut counts = vec![0usize; 25];
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let draws = 10_000;
        let s = Vector::zeros(4);
        for _ in 0..draws {
            counts[agent.select_action(&s, &masked, &mut rng).unwrap()] += 1;
        }
        let k = masked.len() as f64;
        let expected = draws as f64 / k;
        let chi2: f64 = masked
            .indices()
            .iter()
            .map(|&i| (counts[i] as f64 - expected).powi(2) / expected)
            .sum();
        for i in 0..25 {
            if !masked.contains(i) {
                assert_eq!(counts[i], 0);
            }
        }
        // 14 degrees of freedom; the 0.999 quantile is about 36.1.
        assert!(chi2 < 36.1, "chi2 = {chi2}");
    }

    fn random_batch(seed: u64, b: usize) -> Vec<MemoryCue> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..b)
            .map(|_| MemoryCue {
                s: Vector::from_fn(4, |_, _| rng.random_range(-1.0..1.0)),
                d_index: rng.random_range(0..25),
                r: -rng.random_range(0.0..0.5),
                s_next: Vector::from_fn(4, |_, _| rng.random_range(-1.0..1.0)),
            })
            .collect()
    }

    #[test]
    fn identical_networks_make_both_losses_equal() {
        let agent = DqnAgent::new(4, 25, &small_cfg()).unwrap();
        let cues = random_batch(3, 16);
        let refs: Vec<&MemoryCue> = cues.iter().collect();
        let rep = agent.compute_loss(&refs).unwrap();
        assert_eq!(rep.l_dqn, rep.l_msbe);
        assert_eq!(rep.loss, rep.l_msbe);
        assert_eq!(rep.msbe_active, 0);
    }

    #[test]
    fn zero_discount_reduces_to_regression() {
        let cfg = DqnConfig { gamma: 0.5, ..small_cfg() };
        let mut agent = DqnAgent::new(4, 25, &cfg).unwrap();
        agent.gamma = 0.0;
        let cues = random_batch(4, 1);
        let q = agent.q_values(&cues[0].s).unwrap()[cues[0].d_index];
        let rep = agent.compute_loss(&[&cues[0]]).unwrap();
        assert!((rep.loss - (cues[0].r - q).powi(2)).abs() < 1e-15);
    }

    #[test]
    fn loss_dominates_both_branches() {
        let mut agent = DqnAgent::new(4, 25, &small_cfg()).unwrap();
        agent.target_net = Mlp::new(&[4, 12, 25], &[Activation::Relu, Activation::Linear], 99).unwrap();
        let cues = random_batch(5, 32);
        let refs: Vec<&MemoryCue> = cues.iter().collect();
        let rep = agent.compute_loss(&refs).unwrap();
        for &(a, b) in &rep.per_cue {
            assert!(a.max(b) >= a && a.max(b) >= b);
        }
        assert!(rep.loss >= rep.l_dqn && rep.loss >= rep.l_msbe);
        assert!(rep.msbe_active > 0 && rep.msbe_active < 32);
    }

    #[test]
    fn loss_gradient_matches_central_differences() {
        let mut agent = DqnAgent::new(4, 25, &small_cfg()).unwrap();
        agent.target_net = Mlp::new(&[4, 12, 25], &[Activation::Relu, Activation::Linear], 7).unwrap();
        let cues = random_batch(6, 12);
        let refs: Vec<&MemoryCue> = cues.iter().collect();
        let rep = agent.compute_loss(&refs).unwrap();
        assert!(rep.msbe_active > 0, "max branch must be exercised");
        let g = rep.grads.to_flat();
        let p = agent.q_net.parameters();
        let eps = 1e-5;
        let mut checked = 0;
        for i in 0..p.len() {
            let mut q = p.clone();
            q[i] += eps;
            let mut plus = agent.clone();
            plus.q_net.set_parameters(&q).unwrap();
            q[i] -= 2.0 * eps;
            let mut minus = agent.clone();
            minus.q_net.set_parameters(&q).unwrap();
            let lp = plus.compute_loss(&refs).unwrap();
            let lm = minus.compute_loss(&refs).unwrap();
            // Skip parameters whose perturbation flips a branch or a max.
            if lp.msbe_active != rep.msbe_active || lm.msbe_active != rep.msbe_active {
                continue;
            }
            let fd = (lp.loss - lm.loss) / (2.0 * eps);
            let rel = (fd - g[i]).abs() / fd.abs().max(g[i].abs()).max(1e-8);
            assert!(rel < 1e-5, "param {i}: fd {fd} vs analytic {}", g[i]);
            checked += 1;
        }
        assert!(checked > p.len() * 9 / 10);
    }

    #[test]
    fn zero_episodes_leave_agent_unchanged() {
        let emu = Emulation::two_state_example();
        let cfg = DqnConfig { episodes: 0, ..small_cfg() };
        let mut agent = DqnAgent::new(4, 25, &cfg).unwrap();
        let before = agent.q_net.clone();
        let log = train(&mut agent, &emu, &cfg).unwrap();
        assert!(log.steps.is_empty());
        assert_eq!(agent.q_net, before);
    }

    #[test]
    fn training_is_deterministic_and_syncs_hold() {
        let emu = Emulation::two_state_example();
        let cfg = small_cfg();
        let mut a = DqnAgent::new(4, 25, &cfg).unwrap();
        let mut b = DqnAgent::new(4, 25, &cfg).unwrap();
        let la = train(&mut a, &emu, &cfg).unwrap();
        let lb = train(&mut b, &emu, &cfg).unwrap();
        assert_eq!(la, lb);
        assert_eq!(a.q_net.parameters(), b.q_net.parameters());
        assert_eq!(la.syncs.len(), 60 / 7);
        assert!(la.syncs.iter().all(|s| s.holds()));
        assert_eq!(la.to_csv().lines().count(), 61);
    }

    #[test]
    fn invalid_configs_are_rejected() {
        assert!(DqnAgent::new(4, 25, &DqnConfig { gamma: 1.0, ..small_cfg() }).is_err());
        assert!(DqnAgent::new(4, 25, &DqnConfig { epsilon_start: 1.5, ..small_cfg() }).is_err());
        assert!(DqnAgent::new(4, 25, &DqnConfig { sync_period: 0, ..small_cfg() }).is_err());
    }

    #[test]
    fn agent_save_load_round_trip() {
        let cfg = small_cfg();
        let mut agent = DqnAgent::new(4, 25, &cfg).unwrap();
        agent.epsilon = 0.25;
        let back = DqnAgent::load(&agent.save(), &cfg).unwrap();
        assert_eq!(back.q_net.parameters(), agent.q_net.parameters());
        assert_eq!(back.epsilon, 0.25);
        assert_eq!(back.target_net.parameters(), agent.q_net.parameters());
        assert!(DqnAgent::load("quantem-dqn 1\ngamma x\n", &cfg).is_err());
    }

    #[test]
    fn zero_start_greedy_rollout_never_leaves_origin_when_zero_is_best() {
        let emu = Emulation::two_state_example();
        let mut agent = DqnAgent::new(4, 25, &small_cfg()).unwrap();
        for l in agent.q_net.layers_mut() {
            l.weights.fill(0.0);
            l.biases.fill(0.0);
        }
        let last = agent.q_net.layers().len() - 1;
        agent.q_net.layers_mut()[last].biases[12] = 1.0;
        let r = greedy_rollout(&agent, &emu, &Vector::zeros(2), 40, &DropoutPolicy::Random { k: 1, seed: 1 }).unwrap();
        assert!(r.quantized.states().iter().all(|s| s.norm() == 0.0));
    }
}
