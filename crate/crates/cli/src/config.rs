//! Experiment configuration read from TOML.
//!
//! The system block has no defaults: every field must be written out. All
//! other blocks are optional and fall back to the library defaults.

use std::path::PathBuf;

use quantem_core::dqn::{DqnConfig, RewardMode};
use quantem_core::emulation::{DropoutPolicy, Emulation};
use quantem_core::mpc::{MpcConfig, SearchStrategy, DEFAULT_NODE_BUDGET};
use quantem_core::nn::AdamConfig;
use quantem_core::quantization::DropoutMask;
use quantem_core::supervised::{ClassifierArch, ClassifierTraining, FeatureSpec};
use quantem_core::{ContinuousLti, Matrix, Vector};
use serde::Deserialize;

/// A configuration problem, anchored to a line of the source when possible.
#[derive(Debug, thiserror::Error)]
#[error("{origin}:{line}: {message}")]
pub struct ConfigError {
    pub origin: String,
    pub line: usize,
    pub message: String,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub system: SystemBlock,
    #[serde(default)]
    pub mpc: MpcBlock,
    #[serde(default)]
    pub supervised: SupervisedBlock,
    #[serde(default)]
    pub dqn: DqnBlock,
    #[serde(default)]
    pub dropout: DropoutBlock,
    #[serde(default)]
    pub transfer: TransferBlock,
    #[serde(default)]
    pub run: RunBlock,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SystemBlock {
    /// State dimension `n`.
    pub n: usize,
    /// Channel count `m`.
    pub m: usize,
    pub a: Vec<Vec<f64>>,
    pub b: Vec<Vec<f64>>,
    /// Reference system matrix.
    pub h: Vec<Vec<f64>>,
    /// Sample interval.
    pub step: f64,
}

/// Either `s·I` or an explicit matrix.
#[derive(Debug, Clone, Deserialize)]
#[serde(untagged)]
pub enum Weight {
    Scalar(f64),
    Matrix(Vec<Vec<f64>>),
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MpcBlock {
    pub horizon: usize,
    pub p: Weight,
    pub q: Weight,
    pub r: Weight,
    pub search: String,
    pub node_budget: u64,
    pub terminal_input_penalty_only: bool,
}

impl Default for MpcBlock {
    fn default() -> Self {
        Self {
            horizon: 2,
            p: Weight::Scalar(5.0),
            q: Weight::Scalar(5.0),
            r: Weight::Scalar(0.05),
            search: "branch_and_bound".into(),
            node_budget: DEFAULT_NODE_BUDGET,
            terminal_input_penalty_only: false,
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SupervisedBlock {
    pub features: String,
    pub train_starts: usize,
    pub train_steps: usize,
    pub start_radius_min: f64,
    pub start_radius_max: f64,
    pub test_starts: usize,
    pub test_steps: usize,
    pub width: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
}

impl Default for SupervisedBlock {
    fn default() -> Self {
        Self {
            features: FeatureSpec::default().as_str().into(),
            train_starts: 50,
            train_steps: 200,
            start_radius_min: 0.5,
            start_radius_max: 1.5,
            test_starts: 12,
            test_steps: 70,
            width: 64,
            epochs: 20,
            batch_size: 64,
            learning_rate: AdamConfig::default().lr,
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DqnBlock {
    pub hidden: usize,
    pub gamma: f64,
    pub sync_period: usize,
    pub replay_capacity: usize,
    pub batch_size: usize,
    pub epsilon_start: f64,
    pub epsilon_end: f64,
    pub epsilon_decay_fraction: f64,
    pub reward_mode: String,
    pub reward_scale: f64,
    pub error_scale: f64,
    pub learning_rate: f64,
    pub episodes: usize,
    pub steps: usize,
    pub start_radius: f64,
}

impl Default for DqnBlock {
    fn default() -> Self {
        let d = DqnConfig::default();
        Self {
            hidden: d.hidden,
            gamma: d.gamma,
            sync_period: d.sync_period,
            replay_capacity: d.replay_capacity,
            batch_size: d.batch_size,
            epsilon_start: d.epsilon_start,
            epsilon_end: d.epsilon_end,
            epsilon_decay_fraction: d.epsilon_decay_fraction,
            reward_mode: d.reward_mode.as_str().into(),
            reward_scale: d.reward_scale,
            error_scale: d.error_scale,
            learning_rate: d.adam.lr,
            episodes: d.episodes,
            steps: d.steps,
            start_radius: d.start_radius,
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DropoutBlock {
    /// `none`, `fixed` or `random`.
    pub mode: String,
    pub k: usize,
    pub channels: Vec<usize>,
    pub seed: u64,
}

impl Default for DropoutBlock {
    fn default() -> Self {
        Self {
            mode: "none".into(),
            k: 1,
            channels: Vec::new(),
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TransferBlock {
    /// Coordinate change `O`; the new reference is `O H O⁻¹`.
    pub o: Option<Vec<Vec<f64>>>,
    /// Reference system for warm-start training; defaults to the conjugate.
    pub target_h: Option<Vec<Vec<f64>>>,
    /// `dqn` or `classifier`.
    pub policy: String,
    pub exclude_zero: bool,
    pub warm_episodes: usize,
    pub seeds: Vec<u64>,
}

impl Default for TransferBlock {
    fn default() -> Self {
        Self {
            o: None,
            target_h: None,
            policy: "dqn".into(),
            exclude_zero: true,
            warm_episodes: 20,
            seeds: vec![0, 1, 2, 3, 4],
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunBlock {
    /// Rollout length `T`.
    pub steps: usize,
    pub starts: Vec<Vec<f64>>,
    pub seed: u64,
    pub out_dir: Option<PathBuf>,
}

impl Default for RunBlock {
    fn default() -> Self {
        Self {
            steps: 200,
            starts: vec![vec![1.0, 0.0]],
            seed: 0,
            out_dir: None,
        }
    }
}

/// 1-based line of the first `key =` assignment inside `[section]`.
fn locate(text: &str, section: &str, key: &str) -> Option<usize> {
    let header = format!("[{section}]");
    let mut inside = false;
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.starts_with('[') {
            inside = line == header;
            if inside && key.is_empty() {
                return Some(i + 1);
            }
            continue;
        }
        if inside {
            if let Some((lhs, _)) = line.split_once('=') {
                if lhs.trim() == key {
                    return Some(i + 1);
                }
            }
        }
    }
    None
}

/// Validated configuration with its source text retained for hashing.
#[derive(Debug, Clone)]
pub struct LoadedConfig {
    pub raw: ExperimentConfig,
    pub text: String,
    origin: String,
}

impl LoadedConfig {
    pub fn parse(text: &str, origin: &str) -> Result<Self, ConfigError> {
        let raw: ExperimentConfig = toml::from_str(text).map_err(|e| {
            let line = e
                .span()
                .map(|s| text[..s.start.min(text.len())].matches('\n').count() + 1)
                .unwrap_or(1);
            ConfigError {
                origin: origin.into(),
                line,
                message: e.message().to_string(),
            }
        })?;
        let cfg = Self {
            raw,
            text: text.to_string(),
            origin: origin.into(),
        };
        cfg.validate()?;
        Ok(cfg)
    }

    fn err(&self, section: &str, key: &str, message: impl Into<String>) -> ConfigError {
        ConfigError {
            origin: self.origin.clone(),
            line: locate(&self.text, section, key)
                .or_else(|| locate(&self.text, section, ""))
                .unwrap_or(1),
            message: format!("{section}.{key}: {}", message.into()),
        }
    }

    /// Build every derived object once so errors surface before any work starts.
    fn validate(&self) -> Result<(), ConfigError> {
        self.emulation()?;
        self.mpc()?;
        self.feature_spec()?;
        self.dqn(0)?;
        self.dropout()?;
        self.transfer_matrix()?;
        self.warm_target()?;
        self.starts()?;
        match self.raw.transfer.policy.as_str() {
            "dqn" | "classifier" => {}
            other => return Err(self.err("transfer", "policy", format!("unknown policy `{other}`"))),
        }
        if self.raw.transfer.seeds.is_empty() {
            return Err(self.err("transfer", "seeds", "at least one seed is required"));
        }
        let s = &self.raw.supervised;
        if !(s.start_radius_min > 0.0 && s.start_radius_min <= s.start_radius_max) {
            return Err(self.err("supervised", "start_radius_min", "radii must satisfy 0 < min <= max"));
        }
        if s.width == 0 || s.batch_size == 0 {
            return Err(self.err("supervised", "width", "width and batch size must be positive"));
        }
        Ok(())
    }

    fn matrix(&self, section: &str, key: &str, rows: &[Vec<f64>], shape: (usize, usize)) -> Result<Matrix, ConfigError> {
        if rows.len() != shape.0 || rows.iter().any(|r| r.len() != shape.1) {
            return Err(self.err(section, key, format!("expected a {}×{} matrix", shape.0, shape.1)));
        }
        if rows.iter().flatten().any(|v| !v.is_finite()) {
            return Err(self.err(section, key, "entries must be finite"));
        }
        Ok(Matrix::from_row_iterator(shape.0, shape.1, rows.iter().flatten().copied()))
    }

    fn weight(&self, key: &str, w: &Weight, dim: usize) -> Result<Matrix, ConfigError> {
        match w {
            Weight::Scalar(s) => Ok(Matrix::identity(dim, dim) * *s),
            Weight::Matrix(rows) => self.matrix("mpc", key, rows, (dim, dim)),
        }
    }

    pub fn emulation(&self) -> Result<Emulation, ConfigError> {
        let s = &self.raw.system;
        if s.n == 0 || s.m == 0 {
            return Err(self.err("system", "n", "state and channel counts must be positive"));
        }
        let a = self.matrix("system", "a", &s.a, (s.n, s.n))?;
        let b = self.matrix("system", "b", &s.b, (s.n, s.m))?;
        let h = self.matrix("system", "h", &s.h, (s.n, s.n))?;
        if !(s.step > 0.0 && s.step.is_finite()) {
            return Err(self.err("system", "step", "sample interval must be positive"));
        }
        let emu = Emulation::new(&a, &b, h, s.step).map_err(|e| self.err("system", "h", e.to_string()))?;
        if !emu.reference.is_stable() {
            return Err(self.err("system", "h", "reference matrix must be Hurwitz"));
        }
        Ok(emu)
    }

    pub fn mpc(&self) -> Result<MpcConfig, ConfigError> {
        let b = &self.raw.mpc;
        let n = self.raw.system.n;
        let m = self.raw.system.m;
        let mut cfg = MpcConfig::new(
            b.horizon,
            self.weight("p", &b.p, n)?,
            self.weight("q", &b.q, n)?,
            self.weight("r", &b.r, m)?,
        )
        .map_err(|e| self.err("mpc", "horizon", e.to_string()))?;
        cfg.search = match b.search.as_str() {
            "exhaustive" => SearchStrategy::Exhaustive,
            "branch_and_bound" => SearchStrategy::BranchAndBound,
            other => return Err(self.err("mpc", "search", format!("unknown strategy `{other}`"))),
        };
        cfg.node_budget = b.node_budget;
        cfg.terminal_input_penalty_only = b.terminal_input_penalty_only;
        Ok(cfg)
    }

    pub fn feature_spec(&self) -> Result<FeatureSpec, ConfigError> {
        FeatureSpec::parse(&self.raw.supervised.features)
            .map_err(|e| self.err("supervised", "features", e.to_string()))
    }

    pub fn classifier(&self, seed: u64) -> (ClassifierArch, ClassifierTraining) {
        let s = &self.raw.supervised;
        let training = ClassifierTraining {
            epochs: s.epochs,
            batch_size: s.batch_size,
            adam: AdamConfig {
                lr: s.learning_rate,
                ..AdamConfig::default()
            },
            seed,
            ..ClassifierTraining::default()
        };
        (ClassifierArch::three_hidden(s.width), training)
    }

    pub fn dqn(&self, seed: u64) -> Result<DqnConfig, ConfigError> {
        let d = &self.raw.dqn;
        let reward_mode =
            RewardMode::parse(&d.reward_mode).map_err(|e| self.err("dqn", "reward_mode", e.to_string()))?;
        let cfg = DqnConfig {
            hidden: d.hidden,
            gamma: d.gamma,
            sync_period: d.sync_period,
            replay_capacity: d.replay_capacity,
            batch_size: d.batch_size,
            epsilon_start: d.epsilon_start,
            epsilon_end: d.epsilon_end,
            epsilon_decay_fraction: d.epsilon_decay_fraction,
            reward_mode,
            reward_scale: d.reward_scale,
            error_scale: d.error_scale,
            adam: AdamConfig {
                lr: d.learning_rate,
                ..AdamConfig::default()
            },
            episodes: d.episodes,
            steps: d.steps,
            start_radius: d.start_radius,
            seed,
            ..DqnConfig::default()
        };
        cfg.validate().map_err(|e| self.err("dqn", "gamma", e.to_string()))?;
        if d.replay_capacity == 0 {
            return Err(self.err("dqn", "replay_capacity", "capacity must be positive"));
        }
        Ok(cfg)
    }

    /// Dropout from the config, with `k` overridden when given.
    pub fn dropout_with(&self, k: Option<usize>) -> Result<DropoutPolicy, ConfigError> {
        let d = &self.raw.dropout;
        let m = self.raw.system.m;
        let mode = if k.is_some() { "random" } else { d.mode.as_str() };
        match mode {
            "none" => Ok(DropoutPolicy::None),
            "fixed" => DropoutMask::new(m, d.channels.iter().copied())
                .map(DropoutPolicy::Fixed)
                .map_err(|e| self.err("dropout", "channels", e.to_string())),
            "random" => {
                let k = k.unwrap_or(d.k);
                if k > m {
                    return Err(self.err("dropout", "k", format!("cannot drop {k} of {m} channels")));
                }
                Ok(DropoutPolicy::Random { k, seed: d.seed })
            }
            other => Err(self.err("dropout", "mode", format!("unknown mode `{other}`"))),
        }
    }

    pub fn dropout(&self) -> Result<DropoutPolicy, ConfigError> {
        self.dropout_with(None)
    }

    pub fn transfer_matrix(&self) -> Result<Option<Matrix>, ConfigError> {
        let n = self.raw.system.n;
        self.raw
            .transfer
            .o
            .as_ref()
            .map(|rows| {
                let o = self.matrix("transfer", "o", rows, (n, n))?;
                quantem_core::transfer::TransferMap::new(o.clone())
                    .map_err(|e| self.err("transfer", "o", e.to_string()))?;
                Ok(o)
            })
            .transpose()
    }

    /// Reference matrix of the new problem for warm-start training.
    pub fn warm_target(&self) -> Result<Option<Matrix>, ConfigError> {
        let n = self.raw.system.n;
        if let Some(rows) = &self.raw.transfer.target_h {
            let h = self.matrix("transfer", "target_h", rows, (n, n))?;
            let stable = ContinuousLti::new(h.clone()).is_ok_and(|sys| sys.is_stable());
            if !stable {
                return Err(self.err("transfer", "target_h", "target matrix must be Hurwitz"));
            }
            return Ok(Some(h));
        }
        let Some(o) = self.transfer_matrix()? else {
            return Ok(None);
        };
        let h = self.matrix("system", "h", &self.raw.system.h, (n, n))?;
        quantem_core::transfer::conjugate_system(&h, &o)
            .map(Some)
            .map_err(|e| self.err("transfer", "o", e.to_string()))
    }

    pub fn starts(&self) -> Result<Vec<Vector>, ConfigError> {
        let n = self.raw.system.n;
        if self.raw.run.starts.is_empty() {
            return Err(self.err("run", "starts", "at least one start is required"));
        }
        self.raw
            .run
            .starts
            .iter()
            .map(|s| {
                if s.len() != n || s.iter().any(|v| !v.is_finite()) {
                    Err(self.err("run", "starts", format!("each start needs {n} finite entries")))
                } else {
                    Ok(Vector::from_column_slice(s))
                }
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = "[system]\nn = 2\nm = 4\na = [[0.0, 0.0], [0.0, 0.0]]\nb = [[1.0, 0.0, -1.0, 0.0], [0.0, 1.0, 0.0, 1.0]]\nh = [[0.0, 1.0], [-1.0, -2.0]]\nstep = 0.05\n";

    #[test]
    fn minimal_config_uses_block_defaults() {
        let cfg = LoadedConfig::parse(MINIMAL, "test.toml").unwrap();
        assert_eq!(cfg.emulation().unwrap().alphabet.len(), 25);
        assert_eq!(cfg.mpc().unwrap().horizon(), 2);
        assert!(matches!(cfg.dropout().unwrap(), DropoutPolicy::None));
        assert!(cfg.transfer_matrix().unwrap().is_none());
    }

    #[test]
    fn system_fields_are_mandatory() {
        let text = MINIMAL.replace("step = 0.05\n", "");
        let err = LoadedConfig::parse(&text, "x.toml").unwrap_err();
        assert!(err.message.contains("step"), "{err}");
    }

    #[test]
    fn unknown_keys_point_at_their_line() {
        let text = format!("{MINIMAL}\n[dqn]\ngamma = 0.9\nlearning_rat = 0.1\n");
        let err = LoadedConfig::parse(&text, "x.toml").unwrap_err();
        assert_eq!(err.line, 11, "{err}");
        assert!(err.message.contains("learning_rat"));
    }

    #[test]
    fn shape_errors_point_at_the_key() {
        let text = MINIMAL.replace("h = [[0.0, 1.0], [-1.0, -2.0]]", "h = [[0.0, 1.0]]");
        let err = LoadedConfig::parse(&text, "x.toml").unwrap_err();
        assert_eq!(err.line, 6);
        assert!(err.to_string().starts_with("x.toml:6:"));
    }

    #[test]
    fn unstable_reference_is_rejected() {
        let text = MINIMAL.replace("h = [[0.0, 1.0], [-1.0, -2.0]]", "h = [[1.0, 0.0], [0.0, -1.0]]");
        assert!(LoadedConfig::parse(&text, "x.toml").is_err());
    }

    #[test]
    fn bad_values_in_optional_blocks_are_reported() {
        for (block, needle) in [
            ("[mpc]\nsearch = \"greedy\"\n", "search"),
            ("[dropout]\nmode = \"random\"\nk = 9\n", "k"),
            ("[transfer]\no = [[1.0, 2.0], [2.0, 4.0]]\n", "transfer.o"),
            ("[dqn]\ngamma = 1.5\n", "dqn"),
        ] {
            let err = LoadedConfig::parse(&format!("{MINIMAL}{block}"), "x.toml").unwrap_err();
            assert!(err.message.contains(needle), "{err}");
            assert!(err.line > 7, "{err}");
        }
    }

    #[test]
    fn scalar_and_matrix_weights() {
        let text = format!("{MINIMAL}[mpc]\np = [[5.0, 0.0], [0.0, 5.0]]\nr = 0.1\n");
        let cfg = LoadedConfig::parse(&text, "x.toml").unwrap().mpc().unwrap();
        assert_eq!(cfg.p(), &(Matrix::identity(2, 2) * 5.0));
        assert_eq!(cfg.r(), &(Matrix::identity(4, 4) * 0.1));
    }

    #[test]
    fn conjugate_is_the_default_warm_target() {
        let text = format!("{MINIMAL}[transfer]\no = [[0.0, 1.0], [-1.0, 0.0]]\n");
        let cfg = LoadedConfig::parse(&text, "x.toml").unwrap();
        let h = cfg.warm_target().unwrap().unwrap();
        assert_eq!(h, Matrix::from_row_slice(2, 2, &[-2.0, 1.0, -1.0, 0.0]));
    }
}
