//! Demonstration trajectories and their on-disk text format.
//!
//! ```text
//! fish-demos 1 task=insert obs_dim=7 action_dim=2 trajectories=3
//! trajectory 0 steps=24
//! step 0.1 0.5 0.5 0.3 0.85 0.5 0 ; 1 -0.8
//! ...
//! final 0.85 0.5 0.85 0.5 0.85 0.5 0
//! ```
//!
//! Every `step` record holds an observation and the action taken from it;
//! `final` holds the observation reached after the last action. Numbers use
//! shortest round-trip decimal text, so a save/load cycle is bit exact.

use std::fmt::Write as _;
use std::path::Path;

use thiserror::Error;

use crate::env::{expert_rollout, TaskConfig, TaskKind};

#[derive(Debug, Error)]
pub enum DemoError {
    #[error("empty demo set")]
    Empty,
    #[error("demo set must hold 1 to 3 trajectories, got {0}")]
    Count(usize),
    #[error("trajectory {0} is empty")]
    EmptyTrajectory(usize),
    #[error("trajectory {index}: {msg}")]
    Shape { index: usize, msg: String },
    #[error("trajectory {index} step {step}: action outside bounds")]
    ActionOutOfBounds { index: usize, step: usize },
    #[error("scripted expert failed from object position ({0}, {1})")]
    ExpertFailed(f64, f64),
    #[error("demo file line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error(transparent)]
    Env(#[from] crate::env::EnvError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    /// `observations.len() == actions.len() + 1`; the last entry is the
    /// observation after the final action.
    pub observations: Vec<Vec<f64>>,
    pub actions: Vec<Vec<f64>>,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }

    /// `(o_t, a_t)` pairs.
    pub fn pairs(&self) -> impl Iterator<Item = (&[f64], &[f64])> {
        self.observations.iter().zip(&self.actions).map(|(o, a)| (o.as_slice(), a.as_slice()))
    }

    /// Observations reached after each action, `o_1 ..= o_T`.
    pub fn next_observations(&self) -> &[Vec<f64>] {
        &self.observations[1..]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DemoSet {
    pub task: TaskKind,
    pub obs_dim: usize,
    pub action_dim: usize,
    pub trajectories: Vec<Trajectory>,
}

impl DemoSet {
    pub fn new(task: TaskKind, trajectories: Vec<Trajectory>) -> Result<Self, DemoError> {
        let first = trajectories.first().ok_or(DemoError::Empty)?;
        let obs_dim = first.observations.first().map_or(0, Vec::len);
        let action_dim = first.actions.first().map_or(0, Vec::len);
        let set = DemoSet {
            task,
            obs_dim,
            action_dim,
            trajectories,
        };
        set.validate(None)?;
        Ok(set)
    }

    /// Checks shapes and, when bounds are given, that every action lies
    /// inside them.
    pub fn validate(&self, bounds: Option<(f64, f64)>) -> Result<(), DemoError> {
        if self.trajectories.is_empty() {
            return Err(DemoError::Empty);
        }
        if self.trajectories.len() > 3 {
            return Err(DemoError::Count(self.trajectories.len()));
        }
        for (index, t) in self.trajectories.iter().enumerate() {
            if t.actions.is_empty() {
                return Err(DemoError::EmptyTrajectory(index));
            }
            if t.observations.len() != t.actions.len() + 1 {
                return Err(DemoError::Shape {
                    index,
                    msg: "need one more observation than actions".into(),
                });
            }
            if t.observations.iter().any(|o| o.len() != self.obs_dim) {
                return Err(DemoError::Shape {
                    index,
                    msg: format!("observation dimension differs from {}", self.obs_dim),
                });
            }
            if t.actions.iter().any(|a| a.len() != self.action_dim) {
                return Err(DemoError::Shape {
                    index,
                    msg: format!("action dimension differs from {}", self.action_dim),
                });
            }
            if t.observations.iter().chain(&t.actions).flatten().any(|v| !v.is_finite()) {
                return Err(DemoError::Shape {
                    index,
                    msg: "non-finite value".into(),
                });
            }
            if let Some((lo, hi)) = bounds {
                if let Some(step) = t.actions.iter().position(|a| a.iter().any(|v| *v < lo || *v > hi)) {
                    return Err(DemoError::ActionOutOfBounds { index, step });
                }
            }
        }
        Ok(())
    }

    pub fn pair_count(&self) -> usize {
        self.trajectories.iter().map(Trajectory::len).sum()
    }

    pub fn to_text(&self) -> String {
        let mut s = format!(
            "fish-demos 1 task={} obs_dim={} action_dim={} trajectories={}\n",
            self.task.name(),
            self.obs_dim,
            self.action_dim,
            self.trajectories.len()
        );
        let join = |v: &[f64]| v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(" ");
        for (i, t) in self.trajectories.iter().enumerate() {
            let _ = writeln!(s, "trajectory {i} steps={}", t.len());
            for (o, a) in t.pairs() {
                let _ = writeln!(s, "step {} ; {}", join(o), join(a));
            }
            let _ = writeln!(s, "final {}", join(t.observations.last().expect("validated")));
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self, DemoError> {
        let perr = |line: usize, msg: String| DemoError::Parse { line, msg };
        let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l.trim())).filter(|(_, l)| !l.is_empty());
        let (_, header) = lines.next().ok_or_else(|| perr(1, "missing header".into()))?;
        let mut fields = header.split_whitespace();
        if fields.next() != Some("fish-demos") {
            return Err(perr(1, "bad magic".into()));
        }
        if fields.next() != Some("1") {
            return Err(perr(1, "unsupported format version".into()));
        }
        let (mut task, mut obs_dim, mut action_dim, mut count) = (None, None, None, None);
        for kv in fields {
            let (k, v) = kv.split_once('=').ok_or_else(|| perr(1, format!("bad header field `{kv}`")))?;
            let num = || v.parse::<usize>().map_err(|_| perr(1, format!("bad value for {k}")));
            match k {
                "task" => task = Some(v.parse::<TaskKind>().map_err(|e| perr(1, e))?),
                "obs_dim" => obs_dim = Some(num()?),
                "action_dim" => action_dim = Some(num()?),
                "trajectories" => count = Some(num()?),
                _ => return Err(perr(1, format!("unknown header field `{k}`"))),
            }
        }
        let missing = |f: &str| perr(1, format!("header missing {f}"));
        let task = task.ok_or_else(|| missing("task"))?;
        let obs_dim = obs_dim.ok_or_else(|| missing("obs_dim"))?;
        let action_dim = action_dim.ok_or_else(|| missing("action_dim"))?;
        let count = count.ok_or_else(|| missing("trajectories"))?;

        let parse_vec = |line: usize, body: &str, n: usize| -> Result<Vec<f64>, DemoError> {
            let v = body
                .split_whitespace()
                .map(|t| t.parse::<f64>().map_err(|_| perr(line, format!("bad number `{t}`"))))
                .collect::<Result<Vec<_>, _>>()?;
            if v.len() != n {
                return Err(perr(line, format!("expected {n} values, found {}", v.len())));
            }
            Ok(v)
        };

        let mut trajectories = Vec::with_capacity(count);
        for index in 0..count {
            let (ln, head) = lines.next().ok_or_else(|| perr(0, format!("missing trajectory {index}")))?;
            let steps = head
                .strip_prefix(&format!("trajectory {index} steps="))
                .and_then(|s| s.parse::<usize>().ok())
                .ok_or_else(|| perr(ln, format!("expected header of trajectory {index}")))?;
            let mut observations = Vec::with_capacity(steps + 1);
            let mut actions = Vec::with_capacity(steps);
            for _ in 0..steps {
                let (ln, rec) = lines.next().ok_or_else(|| perr(ln, "truncated trajectory".into()))?;
                let body = rec.strip_prefix("step ").ok_or_else(|| perr(ln, "expected step record".into()))?;
                let (o, a) = body.split_once(';').ok_or_else(|| perr(ln, "step record without `;`".into()))?;
                observations.push(parse_vec(ln, o, obs_dim)?);
                actions.push(parse_vec(ln, a, action_dim)?);
            }
            let (ln, rec) = lines.next().ok_or_else(|| perr(ln, "missing final record".into()))?;
            let body = rec.strip_prefix("final ").ok_or_else(|| perr(ln, "expected final record".into()))?;
            observations.push(parse_vec(ln, body, obs_dim)?);
            trajectories.push(Trajectory { observations, actions });
        }
        if let Some((ln, _)) = lines.next() {
            return Err(perr(ln, "trailing records".into()));
        }
        let set = DemoSet {
            task,
            obs_dim,
            action_dim,
            trajectories,
        };
        set.validate(None)?;
        Ok(set)
    }

    pub fn save(&self, path: &Path) -> Result<(), DemoError> {
        std::fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, DemoError> {
        Self::from_text(&std::fs::read_to_string(path)?)
    }
}

/// Runs the scripted expert from every demo position of the task.
pub fn record_demos(cfg: &TaskConfig) -> Result<DemoSet, DemoError> {
    cfg.validate()?;
    let mut trajectories = Vec::with_capacity(cfg.demo_positions.len());
    for p in &cfg.demo_positions {
        let (_, observations, actions, ok) = expert_rollout(cfg, *p)?;
        if !ok {
            return Err(DemoError::ExpertFailed(p[0], p[1]));
        }
        trajectories.push(Trajectory { observations, actions });
    }
    let set = DemoSet::new(cfg.task, trajectories)?;
    set.validate(Some((cfg.action_low, cfg.action_high)))?;
    Ok(set)
}
