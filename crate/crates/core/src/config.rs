//! Run configuration: a flat `key = value` file with every knob of a
//! training run. Unknown keys and out-of-range values are hard errors.

use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use thiserror::Error;

use crate::base_policy::BaseKind;
use crate::encoder::{BcConfig, EncoderKind};
use crate::env::{ObsMode, TaskConfig, TaskKind};
use crate::ot::{CostMetric, OtRewardConfig, SinkhornConfig};
use crate::residual::{Guidance, ResidualConfig};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("line {line}: expected `key = value`")]
    Syntax { line: usize },
    #[error("unknown config key `{0}`")]
    UnknownKey(String),
    #[error("duplicate config key `{0}`")]
    DuplicateKey(String),
    #[error("invalid value `{value}` for `{key}`: {reason}")]
    InvalidValue { key: String, value: String, reason: String },
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub task: TaskKind,
    pub obs_mode: ObsMode,
    pub episode_length: usize,
    pub grid_size: usize,
    pub base_policy: BaseKind,
    pub guidance: Guidance,
    pub fix_encoder: bool,
    pub condition_on_base_action: bool,
    pub offset_reg: bool,
    pub offset_reg_weight: f64,
    pub zero_init_actor: bool,
    pub seed: u64,
    pub episodes: usize,
    pub lr: f64,
    pub gamma: f64,
    pub n_step: usize,
    pub batch_size: usize,
    pub buffer_size: usize,
    pub update_every: usize,
    pub tau: f64,
    pub feature_dim: usize,
    pub hidden_dim: usize,
    pub exploration_std: f64,
    pub beta: f64,
    pub reward_scale: f64,
    pub action_repeat: usize,
    pub seed_frames: usize,
    pub cost_metric: CostMetric,
    pub ot_epsilon: f64,
    pub sinkhorn_max_iters: usize,
    pub sinkhorn_tol: f64,
    pub encoder: EncoderKind,
    pub z_dim: usize,
    pub bc_hidden_dim: usize,
    pub bc_epochs: usize,
    pub bc_lr: f64,
    pub vinn_k: usize,
    pub vinn_temperature: f64,
    /// Full evaluation over every eval position each this many episodes.
    pub eval_every: usize,
    /// Stop once a full evaluation reaches this success rate.
    pub stop_success: Option<f64>,
    /// Record host wall-clock time instead of simulated interaction time.
    pub wall_clock: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            task: TaskKind::Insert,
            obs_mode: ObsMode::State,
            episode_length: 60,
            grid_size: 16,
            base_policy: BaseKind::Vinn,
            guidance: Guidance::Guided,
            fix_encoder: true,
            condition_on_base_action: true,
            offset_reg: false,
            offset_reg_weight: 10.0,
            zero_init_actor: true,
            seed: 0,
            episodes: 300,
            lr: 1e-4,
            gamma: 0.99,
            n_step: 3,
            batch_size: 256,
            buffer_size: 5000,
            update_every: 2,
            tau: 0.01,
            feature_dim: 50,
            hidden_dim: 1024,
            exploration_std: 0.1,
            beta: 0.3,
            reward_scale: 10.0,
            action_repeat: 1,
            seed_frames: 260,
            cost_metric: CostMetric::Cosine,
            ot_epsilon: 0.05,
            sinkhorn_max_iters: 500,
            sinkhorn_tol: 1e-6,
            encoder: EncoderKind::Mlp,
            z_dim: 32,
            bc_hidden_dim: 256,
            bc_epochs: 2000,
            bc_lr: 1e-3,
            vinn_k: 3,
            vinn_temperature: 1.0,
            eval_every: 10,
            stop_success: None,
            wall_clock: false,
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T, ConfigError>
where
    T::Err: std::fmt::Display,
{
    value.parse::<T>().map_err(|e| ConfigError::InvalidValue {
        key: key.into(),
        value: value.into(),
        reason: e.to_string(),
    })
}

fn parse_bool(key: &str, value: &str) -> Result<bool, ConfigError> {
    match value {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(ConfigError::InvalidValue {
            key: key.into(),
            value: value.into(),
            reason: "expected true or false".into(),
        }),
    }
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "off".to_string(), |x| x.to_string())
}

impl RunConfig {
    /// Every recognised key, in file order.
    pub const KEYS: &'static [&'static str] = &[
        "task",
        "obs_mode",
        "episode_length",
        "grid_size",
        "base_policy",
        "guidance",
        "fix_encoder",
        "condition_on_base_action",
        "offset_reg",
        "offset_reg_weight",
        "zero_init_actor",
        "seed",
        "episodes",
        "lr",
        "gamma",
        "n_step",
        "batch_size",
        "buffer_size",
        "update_every",
        "tau",
        "feature_dim",
        "hidden_dim",
        "exploration_std",
        "beta",
        "reward_scale",
        "action_repeat",
        "seed_frames",
        "cost_metric",
        "ot_epsilon",
        "sinkhorn_max_iters",
        "sinkhorn_tol",
        "encoder",
        "z_dim",
        "bc_hidden_dim",
        "bc_epochs",
        "bc_lr",
        "vinn_k",
        "vinn_temperature",
        "eval_every",
        "stop_success",
        "wall_clock",
    ];

    /// Sets one field from its textual value. Range checks happen in
    /// [`RunConfig::validate`].
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
        let v = value.trim();
        match key {
            "task" => self.task = parse(key, v)?,
            "obs_mode" => self.obs_mode = parse(key, v)?,
            "episode_length" => self.episode_length = parse(key, v)?,
            "grid_size" => self.grid_size = parse(key, v)?,
            "base_policy" => self.base_policy = parse(key, v)?,
            "guidance" => self.guidance = parse(key, v)?,
            "fix_encoder" => self.fix_encoder = parse_bool(key, v)?,
            "condition_on_base_action" => self.condition_on_base_action = parse_bool(key, v)?,
            "offset_reg" => self.offset_reg = parse_bool(key, v)?,
            "offset_reg_weight" => self.offset_reg_weight = parse(key, v)?,
            "zero_init_actor" => self.zero_init_actor = parse_bool(key, v)?,
            "seed" => self.seed = parse(key, v)?,
            "episodes" => self.episodes = parse(key, v)?,
            "lr" => self.lr = parse(key, v)?,
            "gamma" => self.gamma = parse(key, v)?,
            "n_step" => self.n_step = parse(key, v)?,
            "batch_size" => self.batch_size = parse(key, v)?,
            "buffer_size" => self.buffer_size = parse(key, v)?,
            "update_every" => self.update_every = parse(key, v)?,
            "tau" => self.tau = parse(key, v)?,
            "feature_dim" => self.feature_dim = parse(key, v)?,
            "hidden_dim" => self.hidden_dim = parse(key, v)?,
            "exploration_std" => self.exploration_std = parse(key, v)?,
            "beta" => self.beta = parse(key, v)?,
            "reward_scale" => self.reward_scale = parse(key, v)?,
            "action_repeat" => self.action_repeat = parse(key, v)?,
            "seed_frames" => self.seed_frames = parse(key, v)?,
            "cost_metric" => self.cost_metric = parse(key, v)?,
            "ot_epsilon" => self.ot_epsilon = parse(key, v)?,
            "sinkhorn_max_iters" => self.sinkhorn_max_iters = parse(key, v)?,
            "sinkhorn_tol" => self.sinkhorn_tol = parse(key, v)?,
            "encoder" => self.encoder = parse(key, v)?,
            "z_dim" => self.z_dim = parse(key, v)?,
            "bc_hidden_dim" => self.bc_hidden_dim = parse(key, v)?,
            "bc_epochs" => self.bc_epochs = parse(key, v)?,
            "bc_lr" => self.bc_lr = parse(key, v)?,
            "vinn_k" => self.vinn_k = parse(key, v)?,
            "vinn_temperature" => self.vinn_temperature = parse(key, v)?,
            "eval_every" => self.eval_every = parse(key, v)?,
            "stop_success" => {
                self.stop_success = if v == "off" { None } else { Some(parse(key, v)?) }
            }
            "wall_clock" => self.wall_clock = parse_bool(key, v)?,
            other => return Err(ConfigError::UnknownKey(other.into())),
        }
        Ok(())
    }

    /// Textual value of one field, in the same syntax `set` accepts.
    pub fn get(&self, key: &str) -> Option<String> {
        Some(match key {
            "task" => self.task.name().into(),
            "obs_mode" => self.obs_mode.name().into(),
            "episode_length" => self.episode_length.to_string(),
            "grid_size" => self.grid_size.to_string(),
            "base_policy" => self.base_policy.name().into(),
            "guidance" => self.guidance.name().into(),
            "fix_encoder" => self.fix_encoder.to_string(),
            "condition_on_base_action" => self.condition_on_base_action.to_string(),
            "offset_reg" => self.offset_reg.to_string(),
            "offset_reg_weight" => self.offset_reg_weight.to_string(),
            "zero_init_actor" => self.zero_init_actor.to_string(),
            "seed" => self.seed.to_string(),
            "episodes" => self.episodes.to_string(),
            "lr" => self.lr.to_string(),
            "gamma" => self.gamma.to_string(),
            "n_step" => self.n_step.to_string(),
            "batch_size" => self.batch_size.to_string(),
            "buffer_size" => self.buffer_size.to_string(),
            "update_every" => self.update_every.to_string(),
            "tau" => self.tau.to_string(),
            "feature_dim" => self.feature_dim.to_string(),
            "hidden_dim" => self.hidden_dim.to_string(),
            "exploration_std" => self.exploration_std.to_string(),
            "beta" => self.beta.to_string(),
            "reward_scale" => self.reward_scale.to_string(),
            "action_repeat" => self.action_repeat.to_string(),
            "seed_frames" => self.seed_frames.to_string(),
            "cost_metric" => self.cost_metric.name().into(),
            "ot_epsilon" => self.ot_epsilon.to_string(),
            "sinkhorn_max_iters" => self.sinkhorn_max_iters.to_string(),
            "sinkhorn_tol" => self.sinkhorn_tol.to_string(),
            "encoder" => self.encoder.name().into(),
            "z_dim" => self.z_dim.to_string(),
            "bc_hidden_dim" => self.bc_hidden_dim.to_string(),
            "bc_epochs" => self.bc_epochs.to_string(),
            "bc_lr" => self.bc_lr.to_string(),
            "vinn_k" => self.vinn_k.to_string(),
            "vinn_temperature" => self.vinn_temperature.to_string(),
            "eval_every" => self.eval_every.to_string(),
            "stop_success" => fmt_opt(self.stop_success),
            "wall_clock" => self.wall_clock.to_string(),
            _ => return None,
        })
    }

    /// Parses a config file body on top of the defaults.
    pub fn from_text(text: &str) -> Result<Self, ConfigError> {
        let mut cfg = RunConfig::default();
        let mut seen = std::collections::HashSet::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or(ConfigError::Syntax { line: i + 1 })?;
            let k = k.trim();
            if k.is_empty() {
                return Err(ConfigError::Syntax { line: i + 1 });
            }
            if !seen.insert(k.to_string()) {
                return Err(ConfigError::DuplicateKey(k.into()));
            }
            cfg.set(k, v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        Self::from_text(&std::fs::read_to_string(path)?)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for k in Self::KEYS {
            let _ = writeln!(s, "{k} = {}", self.get(k).expect("known key"));
        }
        s
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let fail = |key: &str, reason: &str| {
            Err(ConfigError::InvalidValue {
                key: key.into(),
                value: self.get(key).unwrap_or_default(),
                reason: reason.into(),
            })
        };
        let positive = [
            ("lr", self.lr),
            ("tau", self.tau),
            ("beta", self.beta),
            ("reward_scale", self.reward_scale),
            ("ot_epsilon", self.ot_epsilon),
            ("sinkhorn_tol", self.sinkhorn_tol),
            ("bc_lr", self.bc_lr),
            ("vinn_temperature", self.vinn_temperature),
        ];
        for (k, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return fail(k, "must be a positive finite number");
            }
        }
        let counts = [
            ("episode_length", self.episode_length),
            ("n_step", self.n_step),
            ("batch_size", self.batch_size),
            ("buffer_size", self.buffer_size),
            ("update_every", self.update_every),
            ("feature_dim", self.feature_dim),
            ("hidden_dim", self.hidden_dim),
            ("action_repeat", self.action_repeat),
            ("sinkhorn_max_iters", self.sinkhorn_max_iters),
            ("z_dim", self.z_dim),
            ("bc_hidden_dim", self.bc_hidden_dim),
            ("bc_epochs", self.bc_epochs),
            ("vinn_k", self.vinn_k),
            ("eval_every", self.eval_every),
        ];
        for (k, v) in counts {
            if v == 0 {
                return fail(k, "must be at least 1");
            }
        }
        if !(0.0..=1.0).contains(&self.gamma) {
            return fail("gamma", "must lie in [0, 1]");
        }
        if self.tau > 1.0 {
            return fail("tau", "must lie in (0, 1]");
        }
        if !(self.exploration_std >= 0.0 && self.exploration_std.is_finite()) {
            return fail("exploration_std", "must be non-negative");
        }
        if !(self.offset_reg_weight >= 0.0 && self.offset_reg_weight.is_finite()) {
            return fail("offset_reg_weight", "must be non-negative");
        }
        if self.batch_size > self.buffer_size {
            return fail("batch_size", "must not exceed buffer_size");
        }
        if let Some(s) = self.stop_success {
            if !(0.0..=1.0).contains(&s) {
                return fail("stop_success", "must lie in [0, 1] or be off");
            }
        }
        if self.obs_mode == ObsMode::Grid && self.grid_size < 2 {
            return fail("grid_size", "must be at least 2");
        }
        if !self.fix_encoder && self.encoder == EncoderKind::Identity {
            return fail("fix_encoder", "an identity encoder has no parameters to update");
        }
        Ok(())
    }

    pub fn task_config(&self) -> TaskConfig {
        let mut t = TaskConfig::new(self.task);
        t.obs_mode = self.obs_mode;
        t.episode_length = self.episode_length;
        t.grid_size = self.grid_size;
        t
    }

    pub fn bc_config(&self) -> BcConfig {
        BcConfig {
            encoder: self.encoder,
            epochs: self.bc_epochs,
            lr: self.bc_lr,
            seed: self.seed,
            z_dim: self.z_dim,
            hidden_dim: self.bc_hidden_dim,
            ..BcConfig::default()
        }
    }

    pub fn ot_config(&self) -> OtRewardConfig {
        OtRewardConfig {
            metric: self.cost_metric,
            sinkhorn: SinkhornConfig {
                epsilon: self.ot_epsilon,
                max_iters: self.sinkhorn_max_iters,
                tol: self.sinkhorn_tol,
            },
            scale: self.reward_scale,
        }
    }

    pub fn residual_config(&self, z_dim: usize, action_dim: usize) -> ResidualConfig {
        ResidualConfig {
            z_dim,
            action_dim,
            feature_dim: self.feature_dim,
            hidden_dim: self.hidden_dim,
            beta: self.beta,
            exploration_std: self.exploration_std,
            condition_on_base_action: self.condition_on_base_action,
            zero_init_actor: self.zero_init_actor,
            lr: self.lr,
            gamma: self.gamma,
            n_step: self.n_step,
            tau: self.tau,
            offset_reg_weight: self.offset_reg_weight,
        }
    }

    /// The config with the seed cleared; runs that agree on this key differ
    /// only by seed.
    pub fn identity_key(&self) -> String {
        let mut c = self.clone();
        c.seed = 0;
        c.to_text()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate_and_round_trip() {
        let cfg = RunConfig::default();
        cfg.validate().unwrap();
        assert_eq!(RunConfig::from_text(&cfg.to_text()).unwrap(), cfg);
        assert_eq!(cfg.hidden_dim, 1024);
        assert_eq!(cfg.batch_size, 256);
        assert_eq!(cfg.seed_frames, 260);
    }

    #[test]
    fn every_key_is_settable() {
        let cfg = RunConfig::default();
        for k in RunConfig::KEYS {
            let mut c = RunConfig::default();
            c.set(k, &cfg.get(k).unwrap()).unwrap();
            assert_eq!(c, cfg, "{k}");
        }
    }

    #[test]
    fn parses_overrides_and_comments() {
        let cfg = RunConfig::from_text("# run\ntask = push\nguidance=unguided  # axis\n\nstop_success = 0.8\n").unwrap();
        assert_eq!(cfg.task, TaskKind::Push);
        assert_eq!(cfg.guidance, Guidance::Unguided);
        assert_eq!(cfg.stop_success, Some(0.8));
    }

    #[test]
    fn rejects_bad_input() {
        assert!(matches!(RunConfig::from_text("colour = red"), Err(ConfigError::UnknownKey(_))));
        assert!(matches!(RunConfig::from_text("task push"), Err(ConfigError::Syntax { line: 1 })));
        assert!(matches!(RunConfig::from_text("seed = 1\nseed = 2"), Err(ConfigError::DuplicateKey(_))));
        assert!(matches!(RunConfig::from_text("task = stack"), Err(ConfigError::InvalidValue { .. })));
        assert!(matches!(RunConfig::from_text("gamma = 1.5"), Err(ConfigError::InvalidValue { .. })));
        assert!(matches!(RunConfig::from_text("batch_size = 0"), Err(ConfigError::InvalidValue { .. })));
        assert!(matches!(
            RunConfig::from_text("encoder = identity\nfix_encoder = false"),
            Err(ConfigError::InvalidValue { .. })
        ));
    }

    #[test]
    fn identity_key_ignores_seed() {
        let a = RunConfig { seed: 1, ..RunConfig::default() };
        let b = RunConfig { seed: 7, ..RunConfig::default() };
        assert_eq!(a.identity_key(), b.identity_key());
        let c = RunConfig { guidance: Guidance::Unguided, ..a.clone() };
        assert_ne!(a.identity_key(), c.identity_key());
    }
}
