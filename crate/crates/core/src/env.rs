//! Planar point-agent manipulation tasks.
//!
//! The agent is velocity controlled inside the unit square. `reach` asks it to
//! touch the object; `push` and `insert` ask it to grab the object (contact
//! within the grasp radius) and bring it to the goal, with `insert` requiring
//! the object to be released inside a narrow slot.

use rand::Rng;
use thiserror::Error;

pub type Vec2 = [f64; 2];

pub const ACTION_DIM: usize = 2;
/// agent (2) + object (2) + goal (2) + carrying flag
pub const STATE_OBS_DIM: usize = 7;

#[derive(Debug, Error, PartialEq)]
pub enum EnvError {
    #[error("object position ({0}, {1}) lies outside the object region")]
    OutsideRegion(f64, f64),
    #[error("invalid task config: {0}")]
    InvalidConfig(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum TaskKind {
    Reach,
    Push,
    Insert,
}

impl TaskKind {
    pub fn name(self) -> &'static str {
        match self {
            TaskKind::Reach => "reach",
            TaskKind::Push => "push",
            TaskKind::Insert => "insert",
        }
    }
}

impl std::str::FromStr for TaskKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "reach" => Ok(TaskKind::Reach),
            "push" => Ok(TaskKind::Push),
            "insert" => Ok(TaskKind::Insert),
            other => Err(format!("unknown task `{other}`")),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ObsMode {
    State,
    Grid,
}

impl ObsMode {
    pub fn name(self) -> &'static str {
        match self {
            ObsMode::State => "state",
            ObsMode::Grid => "grid",
        }
    }
}

impl std::str::FromStr for ObsMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "state" => Ok(ObsMode::State),
            "grid" => Ok(ObsMode::Grid),
            other => Err(format!("unknown observation mode `{other}`")),
        }
    }
}

/// Axis-aligned box, bounds inclusive.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Region {
    pub min: Vec2,
    pub max: Vec2,
}

impl Region {
    pub fn contains(&self, p: Vec2) -> bool {
        (0..2).all(|k| p[k] >= self.min[k] && p[k] <= self.max[k])
    }

    pub fn clamp(&self, p: Vec2) -> Vec2 {
        [p[0].clamp(self.min[0], self.max[0]), p[1].clamp(self.min[1], self.max[1])]
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec2 {
        [
            self.min[0] + (self.max[0] - self.min[0]) * rng.random::<f64>(),
            self.min[1] + (self.max[1] - self.min[1]) * rng.random::<f64>(),
        ]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TaskConfig {
    pub task: TaskKind,
    pub episode_length: usize,
    pub workspace: Region,
    pub object_region: Region,
    pub agent_start: Vec2,
    pub goal: Vec2,
    pub demo_positions: Vec<Vec2>,
    pub eval_positions: Vec<Vec2>,
    pub action_low: f64,
    pub action_high: f64,
    pub dt: f64,
    pub grasp_radius: f64,
    pub success_radius: f64,
    pub slot_half_width: f64,
    /// Proportional gain of the scripted expert.
    pub expert_gain: f64,
    pub obs_mode: ObsMode,
    pub grid_size: usize,
}

impl TaskConfig {
    /// Default layout: agent starts on the left, goal (or slot) sits on the
    /// right, objects are placed in a vertical band between them.
    pub fn new(task: TaskKind) -> Self {
        let demo_positions = match task {
            TaskKind::Reach => vec![[0.5, 0.5]],
            TaskKind::Push | TaskKind::Insert => vec![[0.5, 0.3], [0.5, 0.5], [0.5, 0.7]],
        };
        TaskConfig {
            task,
            episode_length: 60,
            workspace: Region {
                min: [0.0, 0.0],
                max: [1.0, 1.0],
            },
            object_region: Region {
                min: [0.4, 0.15],
                max: [0.6, 0.85],
            },
            agent_start: [0.1, 0.5],
            goal: [0.85, 0.5],
            demo_positions,
            eval_positions: vec![
                [0.44, 0.16],
                [0.56, 0.19],
                [0.48, 0.23],
                [0.59, 0.33],
                [0.42, 0.45],
                [0.58, 0.62],
                [0.59, 0.7],
                [0.46, 0.77],
                [0.53, 0.81],
                [0.41, 0.84],
            ],
            action_low: -1.0,
            action_high: 1.0,
            dt: 0.05,
            grasp_radius: 0.05,
            success_radius: 0.05,
            slot_half_width: 0.015,
            expert_gain: 4.0,
            obs_mode: ObsMode::State,
            grid_size: 16,
        }
    }

    pub fn validate(&self) -> Result<(), EnvError> {
        let bad = |m: String| Err(EnvError::InvalidConfig(m));
        if self.episode_length == 0 {
            return bad("episode length must be positive".into());
        }
        if !(self.dt > 0.0) || !(self.grasp_radius > 0.0) || !(self.success_radius > 0.0) || !(self.slot_half_width > 0.0) {
            return bad("dt and radii must be positive".into());
        }
        if !(self.action_low < self.action_high) {
            return bad("empty action bounds".into());
        }
        if self.demo_positions.is_empty() || self.demo_positions.len() > 3 {
            return bad(format!("need 1 to 3 demo positions, got {}", self.demo_positions.len()));
        }
        if self.eval_positions.len() != 10 {
            return bad(format!("need exactly 10 eval positions, got {}", self.eval_positions.len()));
        }
        for p in self.demo_positions.iter().chain(&self.eval_positions) {
            if !self.object_region.contains(*p) {
                return bad(format!("position ({}, {}) outside object region", p[0], p[1]));
            }
        }
        if self.demo_positions.iter().any(|d| self.eval_positions.contains(d)) {
            return bad("demo and eval positions overlap".into());
        }
        if self.obs_mode == ObsMode::Grid && self.grid_size < 2 {
            return bad("grid size must be at least 2".into());
        }
        Ok(())
    }

    pub fn action_dim(&self) -> usize {
        ACTION_DIM
    }

    pub fn obs_dim(&self) -> usize {
        match self.obs_mode {
            ObsMode::State => STATE_OBS_DIM,
            ObsMode::Grid => self.grid_size * self.grid_size,
        }
    }

    pub fn clamp_action(&self, a: &[f64]) -> Vec2 {
        [
            a[0].clamp(self.action_low, self.action_high),
            a[1].clamp(self.action_low, self.action_high),
        ]
    }

    /// Center of the slot the object must be released in (insert) or the
    /// push target.
    pub fn goal_pos(&self) -> Vec2 {
        self.goal
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EnvState {
    pub agent_pos: Vec2,
    pub object_pos: Vec2,
    pub goal_pos: Vec2,
    pub carrying: bool,
    pub t: usize,
}

/// Where to place the object on reset.
#[derive(Debug)]
pub enum Placement<'a, R: Rng + ?Sized> {
    At(Vec2),
    Sample(&'a mut R),
}

fn dist(a: Vec2, b: Vec2) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt()
}

pub fn reset<R: Rng + ?Sized>(cfg: &TaskConfig, placement: Placement<'_, R>) -> Result<(EnvState, Vec<f64>), EnvError> {
    let object_pos = match placement {
        Placement::At(p) => {
            if !cfg.object_region.contains(p) {
                return Err(EnvError::OutsideRegion(p[0], p[1]));
            }
            p
        }
        Placement::Sample(rng) => cfg.object_region.sample(rng),
    };
    let state = EnvState {
        agent_pos: cfg.agent_start,
        object_pos,
        goal_pos: cfg.goal_pos(),
        carrying: false,
        t: 0,
    };
    let obs = observe(&state, cfg);
    Ok((state, obs))
}

pub fn reset_at(cfg: &TaskConfig, object_pos: Vec2) -> Result<(EnvState, Vec<f64>), EnvError> {
    reset::<rand::rngs::ThreadRng>(cfg, Placement::At(object_pos))
}

fn in_slot(p: Vec2, cfg: &TaskConfig) -> bool {
    let g = cfg.goal_pos();
    (p[0] - g[0]).abs() <= cfg.slot_half_width && (p[1] - g[1]).abs() <= cfg.slot_half_width
}

/// Pure transition function. Actions are clamped to the bounds first.
pub fn step(state: &EnvState, action: &[f64], cfg: &TaskConfig) -> (EnvState, Vec<f64>, bool) {
    let a = cfg.clamp_action(action);
    let mut next = *state;
    next.agent_pos = cfg
        .workspace
        .clamp([state.agent_pos[0] + cfg.dt * a[0], state.agent_pos[1] + cfg.dt * a[1]]);
    if cfg.task != TaskKind::Reach {
        if next.carrying {
            next.object_pos = next.agent_pos;
        } else if dist(next.agent_pos, next.object_pos) <= cfg.grasp_radius && !success(&next, cfg) {
            next.carrying = true;
            next.object_pos = next.agent_pos;
        }
        if cfg.task == TaskKind::Insert && next.carrying && in_slot(next.object_pos, cfg) {
            next.carrying = false;
        }
    }
    next.t = (state.t + 1).min(cfg.episode_length);
    let done = next.t >= cfg.episode_length || success(&next, cfg);
    let obs = observe(&next, cfg);
    (next, obs, done)
}

/// Success predicates use closed balls / boxes.
pub fn success(state: &EnvState, cfg: &TaskConfig) -> bool {
    match cfg.task {
        TaskKind::Reach => dist(state.agent_pos, state.object_pos) <= cfg.success_radius,
        TaskKind::Push => dist(state.object_pos, state.goal_pos) <= cfg.success_radius,
        TaskKind::Insert => !state.carrying && in_slot(state.object_pos, cfg),
    }
}

/// Proportional controller toward the object, then toward the goal once the
/// object is held.
pub fn scripted_expert(state: &EnvState, cfg: &TaskConfig) -> Vec<f64> {
    let target = if cfg.task == TaskKind::Reach || !state.carrying {
        state.object_pos
    } else {
        state.goal_pos
    };
    let a = [
        cfg.expert_gain * (target[0] - state.agent_pos[0]),
        cfg.expert_gain * (target[1] - state.agent_pos[1]),
    ];
    cfg.clamp_action(&a).to_vec()
}

/// Grid cell containing `p`.
pub fn grid_cell(p: Vec2, cfg: &TaskConfig) -> (usize, usize) {
    let g = cfg.grid_size;
    let cell = |v: f64, lo: f64, hi: f64| -> usize {
        let u = ((v - lo) / (hi - lo) * g as f64).floor();
        (u.max(0.0) as usize).min(g - 1)
    };
    (
        cell(p[0], cfg.workspace.min[0], cfg.workspace.max[0]),
        cell(p[1], cfg.workspace.min[1], cfg.workspace.max[1]),
    )
}

pub const GRID_AGENT: f64 = 0.5;
pub const GRID_OBJECT: f64 = 0.25;
pub const GRID_GOAL: f64 = 0.125;

pub fn observe(state: &EnvState, cfg: &TaskConfig) -> Vec<f64> {
    match cfg.obs_mode {
        ObsMode::State => vec![
            state.agent_pos[0],
            state.agent_pos[1],
            state.object_pos[0],
            state.object_pos[1],
            state.goal_pos[0],
            state.goal_pos[1],
            if state.carrying { 1.0 } else { 0.0 },
        ],
        ObsMode::Grid => {
            let g = cfg.grid_size;
            let mut grid = vec![0.0; g * g];
            for (p, v) in [
                (state.agent_pos, GRID_AGENT),
                (state.object_pos, GRID_OBJECT),
                (state.goal_pos, GRID_GOAL),
            ] {
                let (cx, cy) = grid_cell(p, cfg);
                grid[cy * g + cx] += v;
            }
            grid
        }
    }
}

/// Rolls the scripted expert out from the given object position.
pub fn expert_rollout(cfg: &TaskConfig, object_pos: Vec2) -> Result<(Vec<EnvState>, Vec<Vec<f64>>, Vec<Vec<f64>>, bool), EnvError> {
    let (mut state, obs) = reset_at(cfg, object_pos)?;
    let mut states = vec![state];
    let mut observations = vec![obs];
    let mut actions = Vec::new();
    loop {
        let a = scripted_expert(&state, cfg);
        let (next, obs, done) = step(&state, &a, cfg);
        actions.push(a);
        observations.push(obs);
        states.push(next);
        state = next;
        if done {
            break;
        }
    }
    let ok = success(&state, cfg);
    Ok((states, observations, actions, ok))
}
