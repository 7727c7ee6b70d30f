//! Orchestration: demo recording, pretraining, the online training loop with
//! end-of-episode OT labeling, greedy evaluation, and multi-seed sweeps.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::path::Path;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::base_policy::{BaseKind, BasePolicy, BasePolicyError, EpisodeCursor, OpenLoopBank, VinnIndex};
use crate::config::{ConfigError, RunConfig};
use crate::demos::{self, DemoError, DemoSet};
use crate::encoder::{bc_pretrain, EncoderError, EncoderKind, Encoder};
use crate::env::{self, EnvError, Placement, TaskConfig};
use crate::nn::{AdamConfig, AdamState, Checkpoint, DenseNet, Matrix, NnError};
use crate::ot::{ot_rewards, CostMetric, OtError};
use crate::residual::{compose_action, ActionMask, ResidualActorCritic, ResidualError, ReplayBuffer, Transition};

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Demo(#[from] DemoError),
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    Base(#[from] BasePolicyError),
    #[error(transparent)]
    Residual(#[from] ResidualError),
    #[error(transparent)]
    Ot(#[from] OtError),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("checkpoint does not match config: {0}")]
    Mismatch(String),
    #[error("invalid sweep: {0}")]
    Sweep(String),
    #[error("{what}: {source}")]
    Context {
        what: String,
        #[source]
        source: Box<HarnessError>,
    },
}

trait Context<T> {
    fn context(self, what: impl FnOnce() -> String) -> Result<T, HarnessError>;
}

impl<T, E: Into<HarnessError>> Context<T> for Result<T, E> {
    fn context(self, what: impl FnOnce() -> String) -> Result<T, HarnessError> {
        self.map_err(|e| HarnessError::Context {
            what: what(),
            source: Box::new(e.into()),
        })
    }
}

pub const METRICS_HEADER: &str = "episode,env_steps,ot_reward_total,eval_success,mean_abs_offset,lambda,wall_secs";
pub const EVALS_HEADER: &str = "episode,success_rate,mean_abs_offset";
pub const TRANSITIONS_HEADER: &str = "episode,t,base_0,base_1,action_0,action_1,offset_0,offset_1,mask_0,mask_1";

/// Scripted-expert demonstrations from every demo position.
pub fn record_demos(cfg: &RunConfig) -> Result<DemoSet, HarnessError> {
    Ok(demos::record_demos(&cfg.task_config())?)
}

/// Output of the offline phase.
#[derive(Clone, Debug, PartialEq)]
pub struct Pretrained {
    pub encoder: Encoder,
    pub bc_actor: DenseNet,
}

impl Pretrained {
    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::new();
        ck.meta.insert("encoder_kind".into(), self.encoder.kind().name().into());
        ck.meta.insert("obs_dim".into(), self.encoder.obs_dim().to_string());
        if let Some(net) = self.encoder.net() {
            ck.insert("encoder", net.clone());
        }
        ck.insert("bc_actor", self.bc_actor.clone());
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self, HarnessError> {
        let kind: EncoderKind = meta(ck, "encoder_kind")?
            .parse()
            .map_err(HarnessError::Mismatch)?;
        let obs_dim: usize = meta(ck, "obs_dim")?
            .parse()
            .map_err(|_| HarnessError::Mismatch("obs_dim is not a count".into()))?;
        let encoder = match kind {
            EncoderKind::Identity => Encoder::identity(obs_dim),
            EncoderKind::Mlp => Encoder::mlp(ck.net("encoder")?.clone()),
        };
        Ok(Pretrained {
            encoder,
            bc_actor: ck.net("bc_actor")?.clone(),
        })
    }
}

fn meta<'a>(ck: &'a Checkpoint, key: &str) -> Result<&'a str, HarnessError> {
    ck.meta
        .get(key)
        .map(String::as_str)
        .ok_or_else(|| HarnessError::Mismatch(format!("missing `{key}` entry")))
}

/// Behavior cloning on the demonstrations; yields the encoder used online
/// and the parametric baseline actor.
pub fn pretrain(cfg: &RunConfig, demos: &DemoSet) -> Result<Pretrained, HarnessError> {
    let r = bc_pretrain(demos, &cfg.bc_config())?;
    Ok(Pretrained {
        encoder: r.encoder,
        bc_actor: r.actor,
    })
}

pub fn build_base(cfg: &RunConfig, demos: &DemoSet, pre: &Pretrained) -> Result<BasePolicy, HarnessError> {
    Ok(match cfg.base_policy {
        BaseKind::OpenLoop => BasePolicy::OpenLoop(OpenLoopBank::from_demos(demos, &pre.encoder)?),
        BaseKind::Vinn => BasePolicy::Vinn(VinnIndex::from_demos(
            demos,
            &pre.encoder,
            cfg.vinn_k,
            cfg.vinn_temperature,
            CostMetric::Euclidean,
        )?),
        BaseKind::Bc => BasePolicy::Bc(pre.bc_actor.clone()),
    })
}

/// One line of `metrics.csv`.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricsRow {
    pub episode: usize,
    pub env_steps: usize,
    pub ot_reward_total: f64,
    pub eval_success: bool,
    pub mean_abs_offset: f64,
    pub lambda: Option<f64>,
    pub wall_secs: f64,
}

impl MetricsRow {
    pub fn to_csv(&self) -> String {
        format!(
            "{},{},{},{},{},{},{}",
            self.episode,
            self.env_steps,
            self.ot_reward_total,
            u8::from(self.eval_success),
            self.mean_abs_offset,
            self.lambda.map_or_else(String::new, |l| l.to_string()),
            self.wall_secs
        )
    }
}

/// Full evaluation over all eval positions after `episode` training episodes.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalRow {
    pub episode: usize,
    pub success_rate: f64,
    pub mean_abs_offset: f64,
}

/// One executed step, kept for the safety-envelope checks.
#[derive(Clone, Debug, PartialEq)]
pub struct StepLog {
    pub episode: usize,
    pub t: usize,
    pub base_action: Vec<f64>,
    pub action: Vec<f64>,
    pub offset: Vec<f64>,
    pub mask: Vec<f64>,
}

/// Result of [`train`].
pub struct TrainOutput {
    pub metrics: Vec<MetricsRow>,
    pub evals: Vec<EvalRow>,
    pub steps: Vec<StepLog>,
    pub agent: ResidualActorCritic,
    pub encoder: Encoder,
    pub base: BasePolicy,
    pub base_fingerprint_before: u64,
    pub base_fingerprint_after: u64,
    pub env_steps: usize,
    /// Environment step count at each critic+actor update.
    pub update_steps: Vec<usize>,
    /// Number of steps before the first update was possible.
    pub seed_phase_steps: usize,
}

impl TrainOutput {
    pub fn final_success(&self) -> f64 {
        self.evals.last().map_or(0.0, |e| e.success_rate)
    }

    /// First evaluated episode count at which the success rate reached
    /// `threshold`.
    pub fn episodes_to(&self, threshold: f64) -> Option<usize> {
        self.evals.iter().find(|e| e.success_rate >= threshold).map(|e| e.episode)
    }

    pub fn final_mean_abs_offset(&self) -> f64 {
        self.evals.last().map_or(0.0, |e| e.mean_abs_offset)
    }

    pub fn metrics_csv(&self) -> String {
        let mut s = String::from(METRICS_HEADER);
        s.push('\n');
        for r in &self.metrics {
            s.push_str(&r.to_csv());
            s.push('\n');
        }
        s
    }

    pub fn evals_csv(&self) -> String {
        let mut s = String::from(EVALS_HEADER);
        s.push('\n');
        for e in &self.evals {
            let _ = writeln!(s, "{},{},{}", e.episode, e.success_rate, e.mean_abs_offset);
        }
        s
    }

    pub fn transitions_csv(&self) -> String {
        let mut s = String::from(TRANSITIONS_HEADER);
        s.push('\n');
        for l in &self.steps {
            let _ = write!(s, "{},{}", l.episode, l.t);
            for v in l.base_action.iter().chain(&l.action).chain(&l.offset).chain(&l.mask) {
                let _ = write!(s, ",{v}");
            }
            s.push('\n');
        }
        s
    }

    pub fn checkpoint(&self, cfg: &RunConfig) -> Checkpoint {
        agent_checkpoint(cfg, &self.agent, &self.encoder)
    }

    /// Writes metrics, evaluations, transition log, config and final
    /// checkpoint into `dir`.
    pub fn write_to(&self, cfg: &RunConfig, dir: &Path) -> Result<(), HarnessError> {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("metrics.csv"), self.metrics_csv())?;
        std::fs::write(dir.join("evals.csv"), self.evals_csv())?;
        std::fs::write(dir.join("transitions.csv"), self.transitions_csv())?;
        std::fs::write(dir.join("config.txt"), cfg.to_text())?;
        self.checkpoint(cfg).save(&dir.join("checkpoint.txt"))?;
        Ok(())
    }
}

pub fn agent_checkpoint(cfg: &RunConfig, agent: &ResidualActorCritic, encoder: &Encoder) -> Checkpoint {
    let mut ck = Checkpoint::new();
    ck.meta.insert("task".into(), cfg.task.name().into());
    ck.meta.insert("encoder_kind".into(), encoder.kind().name().into());
    ck.meta.insert("obs_dim".into(), encoder.obs_dim().to_string());
    ck.meta.insert("z_dim".into(), encoder.z_dim().to_string());
    ck.meta.insert("guidance".into(), agent.mask.level.name().into());
    ck.meta.insert(
        "condition_on_base_action".into(),
        agent.cfg.condition_on_base_action.to_string(),
    );
    ck.insert("actor", agent.actor.clone());
    ck.insert("critic1", agent.critics[0].clone());
    ck.insert("critic2", agent.critics[1].clone());
    ck.insert("target1", agent.targets[0].clone());
    ck.insert("target2", agent.targets[1].clone());
    if let Some(net) = encoder.net() {
        ck.insert("encoder", net.clone());
    }
    ck
}

fn stream(seed: u64, k: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(k);
    rng
}

fn mean_abs(v: &[f64]) -> f64 {
    if v.is_empty() {
        0.0
    } else {
        v.iter().map(|x| x.abs()).sum::<f64>() / v.len() as f64
    }
}

/// Steps the environment `repeat` times with one action.
fn env_step(state: &env::EnvState, a: &[f64], task: &TaskConfig, repeat: usize) -> (env::EnvState, Vec<f64>, bool) {
    let mut s = *state;
    let mut obs = Vec::new();
    let mut done = false;
    for _ in 0..repeat {
        let (n, o, d) = env::step(&s, a, task);
        s = n;
        obs = o;
        done = d;
        if done {
            break;
        }
    }
    (s, obs, done)
}

/// Outcome of one greedy episode.
#[derive(Clone, Debug, PartialEq)]
pub struct EpisodeOutcome {
    pub success: bool,
    pub steps: usize,
    pub mean_abs_offset: f64,
}

/// Base action clipped to the task's action bounds, so the masked dims of the
/// composed action reproduce it exactly.
fn bounded_base_action(
    base: &BasePolicy,
    cursor: EpisodeCursor,
    z: &[f64],
    t: usize,
    task: &TaskConfig,
) -> Result<Vec<f64>, HarnessError> {
    let mut a = base.act(cursor, z, t)?;
    for v in &mut a {
        *v = v.clamp(task.action_low, task.action_high);
    }
    Ok(a)
}
/// Runs one episode without exploration noise from a fixed object position.
/// With `agent = None` the base policy acts alone.
pub fn greedy_episode(
    task: &TaskConfig,
    encoder: &Encoder,
    base: &BasePolicy,
    agent: Option<&ResidualActorCritic>,
    object_pos: [f64; 2],
    action_repeat: usize,
) -> Result<EpisodeOutcome, HarnessError> {
    let (mut state, obs) = env::reset_at(task, object_pos)?;
    let mut z = encoder.encode(&obs)?;
    let cursor = base.start_episode(&z)?;
    let mut offsets = Vec::new();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut t = 0;
    loop {
        let a_b = bounded_base_action(base, cursor, &z, t, task)?;
        let a_r = match agent {
            Some(ac) => ac.residual_act(&z, &a_b, false, &mut rng)?,
            None => vec![0.0; a_b.len()],
        };
        offsets.extend(a_r.iter().copied());
        let a = compose_action(&a_b, &a_r, task.action_low, task.action_high);
        let (next, obs, done) = env_step(&state, &a, task, action_repeat);
        state = next;
        t += 1;
        if done {
            break;
        }
        z = encoder.encode(&obs)?;
    }
    Ok(EpisodeOutcome {
        success: env::success(&state, task),
        steps: t,
        mean_abs_offset: mean_abs(&offsets),
    })
}

/// Greedy success rate over all eval positions.
pub fn evaluate_policy(
    task: &TaskConfig,
    encoder: &Encoder,
    base: &BasePolicy,
    agent: Option<&ResidualActorCritic>,
    action_repeat: usize,
) -> Result<(f64, f64), HarnessError> {
    let mut wins = 0usize;
    let mut offset = 0.0;
    for &p in &task.eval_positions {
        let o = greedy_episode(task, encoder, base, agent, p, action_repeat)?;
        wins += usize::from(o.success);
        offset += o.mean_abs_offset;
    }
    let n = task.eval_positions.len() as f64;
    Ok((wins as f64 / n, offset / n))
}

/// Loads a trained checkpoint and evaluates it on the held-out positions.
pub fn evaluate(cfg: &RunConfig, demos: &DemoSet, pre: &Pretrained, ck: &Checkpoint) -> Result<f64, HarnessError> {
    let task = cfg.task_config();
    let base = build_base(cfg, demos, pre)?;
    let encoder = match ck.nets.get("encoder") {
        Some(net) => Encoder::mlp(net.clone()),
        None => pre.encoder.clone(),
    };
    let ac = restore_agent(cfg, ck, encoder.z_dim(), task.action_dim())?;
    Ok(evaluate_policy(&task, &encoder, &base, Some(&ac), cfg.action_repeat)?.0)
}

fn widths(net: &DenseNet) -> Vec<usize> {
    std::iter::once(net.input_dim()).chain(net.layers().iter().map(|l| l.out_dim)).collect()
}

fn restore_agent(cfg: &RunConfig, ck: &Checkpoint, z_dim: usize, action_dim: usize) -> Result<ResidualActorCritic, HarnessError> {
    let rcfg = cfg.residual_config(z_dim, action_dim);
    let mask = ActionMask::for_level(cfg.guidance, action_dim)?;
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut ac = ResidualActorCritic::new(rcfg, mask, &mut rng)?;
    let [c1, c2] = &mut ac.critics;
    let [t1, t2] = &mut ac.targets;
    for (name, slot) in [
        ("actor", &mut ac.actor),
        ("critic1", c1),
        ("critic2", c2),
        ("target1", t1),
        ("target2", t2),
    ] {
        let net = ck.net(name)?;
        if !net.same_architecture(slot) {
            return Err(HarnessError::Mismatch(format!(
                "network `{name}` has layer widths {:?}, config expects {:?}",
                widths(net),
                widths(slot)
            )));
        }
        *slot = net.clone();
    }
    Ok(ac)
}

/// Nearest-demo OT labeling: rewards against the demo yielding the highest
/// total.
fn label_episode(
    behavior: &[Vec<f64>],
    experts: &[Vec<Vec<f64>>],
    cfg: &RunConfig,
) -> Result<(Vec<f64>, f64), HarnessError> {
    let ot = cfg.ot_config();
    let mut best: Option<(Vec<f64>, f64)> = None;
    for e in experts {
        let r = ot_rewards(behavior, e, &ot)?;
        if best.as_ref().is_none_or(|(_, t)| r.total > *t) {
            best = Some((r.per_step, r.total));
        }
    }
    best.ok_or(HarnessError::Demo(DemoError::Empty))
}

fn expert_embeddings(demos: &DemoSet, encoder: &Encoder) -> Result<Vec<Vec<Vec<f64>>>, HarnessError> {
    demos
        .trajectories
        .iter()
        .map(|t| Ok(encoder.encode_all(t.next_observations())?))
        .collect()
}

/// Online phase: the residual actor-critic is trained over the frozen base
/// policy with OT rewards computed at the end of every episode.
pub fn train(
    cfg: &RunConfig,
    demos: &DemoSet,
    pre: &Pretrained,
    mut on_episode: Option<&mut dyn FnMut(&MetricsRow)>,
) -> Result<TrainOutput, HarnessError> {
    cfg.validate()?;
    let task = cfg.task_config();
    task.validate()?;
    if demos.task != cfg.task || demos.obs_dim != task.obs_dim() {
        return Err(HarnessError::Mismatch(format!(
            "demos are for task {} with obs_dim {}, config wants {} with {}",
            demos.task.name(),
            demos.obs_dim,
            cfg.task.name(),
            task.obs_dim()
        )));
    }
    if pre.encoder.obs_dim() != task.obs_dim() {
        return Err(HarnessError::Mismatch("encoder input does not match observation size".into()));
    }
    let start = Instant::now();
    let base = build_base(cfg, demos, pre)?;
    let fingerprint = base.fingerprint();
    let mut encoder = if cfg.fix_encoder {
        pre.encoder.clone().freeze()
    } else {
        pre.encoder.clone()
    };
    let mut enc_adam = encoder.net().map(|n| {
        AdamState::new(
            n,
            AdamConfig {
                lr: cfg.lr,
                ..AdamConfig::default()
            },
        )
    });

    let action_dim = task.action_dim();
    let mut init_rng = stream(cfg.seed, 0);
    let mut reset_rng = stream(cfg.seed, 1);
    let mut explore_rng = stream(cfg.seed, 2);
    let mut sample_rng = stream(cfg.seed, 3);
    let mask = ActionMask::for_level(cfg.guidance, action_dim)?;
    let mut ac = ResidualActorCritic::new(cfg.residual_config(encoder.z_dim(), action_dim), mask, &mut init_rng)?;
    let mut buffer = ReplayBuffer::new(cfg.buffer_size);
    let mut experts = expert_embeddings(demos, &encoder)?;

    let mut metrics = Vec::with_capacity(cfg.episodes);
    let mut evals = Vec::new();
    let mut steps_log = Vec::new();
    let mut update_steps = Vec::new();
    let mut seed_phase_steps = None;
    let mut env_steps = 0usize;

    let (rate, off) = evaluate_policy(&task, &encoder, &base, Some(&ac), cfg.action_repeat)?;
    evals.push(EvalRow {
        episode: 0,
        success_rate: rate,
        mean_abs_offset: off,
    });

    for episode in 0..cfg.episodes {
        let (mut state, mut obs) = env::reset(&task, Placement::Sample(&mut reset_rng))?;
        let mut z = encoder.encode(&obs)?;
        let cursor = base.start_episode(&z)?;
        let mut transitions: Vec<Transition> = Vec::with_capacity(task.episode_length);
        let mut greedy_offsets = Vec::with_capacity(task.episode_length * action_dim);
        let mut lambdas = Vec::new();
        let mut t = 0;
        loop {
            let a_b = bounded_base_action(&base, cursor, &z, t, &task)?;
            let greedy = ac.residual_act(&z, &a_b, false, &mut explore_rng)?;
            greedy_offsets.extend(greedy.iter().copied());
            let seeding = env_steps < cfg.seed_frames || buffer.len() < cfg.batch_size;
            let a_r = if seeding {
                ac.noise_offset(&mut explore_rng)
            } else {
                ac.explore_offset(&greedy, &mut explore_rng)
            };
            let a = compose_action(&a_b, &a_r, task.action_low, task.action_high);
            let (next, next_obs, done) = env_step(&state, &a, &task, cfg.action_repeat);
            let next_z = encoder.encode(&next_obs)?;
            steps_log.push(StepLog {
                episode,
                t,
                base_action: a_b.clone(),
                action: a.clone(),
                offset: a_r,
                mask: ac.mask.values().to_vec(),
            });
            transitions.push(Transition {
                obs: obs.clone(),
                z: z.clone(),
                action: a,
                base_action: a_b,
                next_obs: next_obs.clone(),
                next_z: next_z.clone(),
                reward: None,
                last: false,
            });
            env_steps += 1;
            t += 1;

            if !seeding {
                seed_phase_steps.get_or_insert(env_steps - 1);
                if (env_steps - seed_phase_steps.unwrap_or(0)).is_multiple_of(cfg.update_every) {
                    let lambda = update(cfg, &mut ac, &mut encoder, enc_adam.as_mut(), &buffer, &mut sample_rng)
                        .context(|| format!("update at step {env_steps}"))?;
                    update_steps.push(env_steps);
                    if let Some(l) = lambda {
                        lambdas.push(l);
                    }
                }
            }

            state = next;
            obs = next_obs;
            z = next_z;
            if done {
                break;
            }
        }

        if !cfg.fix_encoder {
            experts = expert_embeddings(demos, &encoder)?;
            for tr in &mut transitions {
                tr.next_z = encoder.encode(&tr.next_obs)?;
            }
        }
        let behavior: Vec<Vec<f64>> = transitions.iter().map(|tr| tr.next_z.clone()).collect();
        let (rewards, total) =
            label_episode(&behavior, &experts, cfg).context(|| format!("labeling episode {episode}"))?;
        for (tr, r) in transitions.iter_mut().zip(rewards) {
            tr.reward = Some(r);
        }
        buffer.push_episode(transitions)?;

        let eval_pos = task.eval_positions[episode % task.eval_positions.len()];
        let eval = greedy_episode(&task, &encoder, &base, Some(&ac), eval_pos, cfg.action_repeat)?;
        let wall_secs = if cfg.wall_clock {
            start.elapsed().as_secs_f64()
        } else {
            (env_steps * cfg.action_repeat) as f64 * task.dt
        };
        let row = MetricsRow {
            episode,
            env_steps,
            ot_reward_total: total,
            eval_success: eval.success,
            mean_abs_offset: mean_abs(&greedy_offsets),
            lambda: cfg
                .offset_reg
                .then(|| if lambdas.is_empty() { 0.0 } else { lambdas.iter().sum::<f64>() / lambdas.len() as f64 }),
            wall_secs,
        };
        if let Some(cb) = on_episode.as_deref_mut() {
            cb(&row);
        }
        metrics.push(row);

        let done_episodes = episode + 1;
        if done_episodes % cfg.eval_every == 0 || done_episodes == cfg.episodes {
            let (rate, off) = evaluate_policy(&task, &encoder, &base, Some(&ac), cfg.action_repeat)?;
            evals.push(EvalRow {
                episode: done_episodes,
                success_rate: rate,
                mean_abs_offset: off,
            });
            if cfg.stop_success.is_some_and(|s| rate >= s) {
                break;
            }
        }
    }

    Ok(TrainOutput {
        metrics,
        evals,
        steps: steps_log,
        agent: ac,
        encoder,
        base_fingerprint_before: fingerprint,
        base_fingerprint_after: base.fingerprint(),
        base,
        env_steps,
        update_steps,
        seed_phase_steps: seed_phase_steps.unwrap_or(env_steps),
    })
}

/// One critic update, one actor update, one target update. Returns the
/// soft Q-filter weight when offset regularization is on.
fn update(
    cfg: &RunConfig,
    ac: &mut ResidualActorCritic,
    encoder: &mut Encoder,
    enc_adam: Option<&mut AdamState>,
    buffer: &ReplayBuffer,
    rng: &mut ChaCha8Rng,
) -> Result<Option<f64>, HarnessError> {
    let mut batch = buffer.sample_batch(cfg.batch_size, cfg.n_step, cfg.gamma, rng)?;
    if cfg.fix_encoder {
        ac.critic_update(&batch, false)?;
    } else {
        let net = encoder.net().ok_or(EncoderError::NoParameters)?;
        let cache = net.forward_batch(&batch.obs)?;
        batch.z = cache.output().clone();
        batch.boot_z = net.forward_batch(&batch.boot_obs)?.output().clone();
        let up = ac.critic_update(&batch, true)?;
        let dz: Matrix = up.z_grad.expect("requested embedding gradient");
        let (grads, _) = net.backward_batch(&cache, &dz)?;
        encoder.apply_gradients(&grads, enc_adam.ok_or(EncoderError::NoParameters)?)?;
    }
    let lambda = if cfg.offset_reg {
        Some(ac.soft_q_filter(&batch)?)
    } else {
        None
    };
    ac.actor_update(&batch, lambda)?;
    ac.update_targets()?;
    Ok(lambda)
}

/// Everything a single run produces, from demos to the trained agent.
pub struct RunArtifacts {
    pub demos: DemoSet,
    pub pretrained: Pretrained,
    pub output: TrainOutput,
}

pub fn run(cfg: &RunConfig) -> Result<RunArtifacts, HarnessError> {
    let demos = record_demos(cfg)?;
    let pretrained = pretrain(cfg, &demos)?;
    let output = train(cfg, &demos, &pretrained, None)?;
    Ok(RunArtifacts {
        demos,
        pretrained,
        output,
    })
}

/// A labelled configuration in a sweep.
#[derive(Clone, Debug, PartialEq)]
pub struct SweepCell {
    pub label: String,
    pub cfg: RunConfig,
}

/// Cells varying guidance level only.
pub fn guidance_cells(base: &RunConfig) -> Vec<SweepCell> {
    use crate::residual::Guidance::*;
    [Guided, SemiGuided, Unguided]
        .into_iter()
        .map(|g| SweepCell {
            label: g.name().into(),
            cfg: RunConfig {
                guidance: g,
                ..base.clone()
            },
        })
        .collect()
}

/// The 2x2 grid over `fix_encoder` and `condition_on_base_action`.
pub fn encoder_grid_cells(base: &RunConfig) -> Vec<SweepCell> {
    let mut cells = Vec::new();
    for fix in [true, false] {
        for cond in [true, false] {
            cells.push(SweepCell {
                label: format!("fix_encoder={fix} condition_on_base_action={cond}"),
                cfg: RunConfig {
                    fix_encoder: fix,
                    condition_on_base_action: cond,
                    ..base.clone()
                },
            });
        }
    }
    cells
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunSummary {
    pub final_success: f64,
    pub episodes_to_threshold: Option<usize>,
    pub final_mean_abs_offset: f64,
    pub evals: Vec<EvalRow>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepRun {
    pub label: String,
    pub seed: u64,
    pub result: Result<RunSummary, String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepReport {
    pub labels: Vec<String>,
    pub threshold: f64,
    pub runs: Vec<SweepRun>,
}

/// Median of finite values; `None` entries sort above every number.
pub fn median_opt(values: &[Option<f64>]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(|a, b| match (a, b) {
        (Some(x), Some(y)) => x.total_cmp(y),
        (Some(_), None) => std::cmp::Ordering::Less,
        (None, Some(_)) => std::cmp::Ordering::Greater,
        (None, None) => std::cmp::Ordering::Equal,
    });
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        match (v[n / 2 - 1], v[n / 2]) {
            (Some(a), Some(b)) => Some((a + b) / 2.0),
            _ => None,
        }
    }
}

pub fn median(values: &[f64]) -> f64 {
    median_opt(&values.iter().map(|v| Some(*v)).collect::<Vec<_>>()).unwrap_or(f64::NAN)
}

impl SweepReport {
    fn ok_runs<'a>(&'a self, label: &'a str) -> impl Iterator<Item = &'a RunSummary> + 'a {
        self.runs
            .iter()
            .filter(move |r| r.label == label)
            .filter_map(|r| r.result.as_ref().ok())
    }

    pub fn median_final_success(&self, label: &str) -> f64 {
        median(&self.ok_runs(label).map(|s| s.final_success).collect::<Vec<_>>())
    }

    /// `None` when the median run never reached the threshold.
    pub fn median_episodes_to_threshold(&self, label: &str) -> Option<f64> {
        median_opt(
            &self
                .ok_runs(label)
                .map(|s| s.episodes_to_threshold.map(|e| e as f64))
                .collect::<Vec<_>>(),
        )
    }

    pub fn median_final_offset(&self, label: &str) -> f64 {
        median(&self.ok_runs(label).map(|s| s.final_mean_abs_offset).collect::<Vec<_>>())
    }

    pub fn failures(&self) -> impl Iterator<Item = &SweepRun> {
        self.runs.iter().filter(|r| r.result.is_err())
    }

    /// Per-label medians over seeds.
    pub fn summary_table(&self) -> String {
        let mut s = String::from("label,seeds,failures,median_final_success,median_episodes_to_threshold,median_final_mean_abs_offset\n");
        for l in &self.labels {
            let seeds = self.runs.iter().filter(|r| &r.label == l).count();
            let failed = self.runs.iter().filter(|r| &r.label == l && r.result.is_err()).count();
            let _ = writeln!(
                s,
                "{},{},{},{},{},{}",
                l,
                seeds,
                failed,
                self.median_final_success(l),
                self.median_episodes_to_threshold(l)
                    .map_or_else(|| "never".to_string(), |v| v.to_string()),
                self.median_final_offset(l)
            );
        }
        s
    }

    /// Median success rate against training episodes, one column per
    /// label. Runs that stopped early carry their last value forward.
    pub fn curve_table(&self) -> String {
        let mut episodes: Vec<usize> = self
            .runs
            .iter()
            .filter_map(|r| r.result.as_ref().ok())
            .flat_map(|s| s.evals.iter().map(|e| e.episode))
            .collect();
        episodes.sort_unstable();
        episodes.dedup();
        let mut s = String::from("episode");
        for l in &self.labels {
            let _ = write!(s, ",{l}");
        }
        s.push('\n');
        for ep in episodes {
            let _ = write!(s, "{ep}");
            for l in &self.labels {
                let vals: Vec<f64> = self
                    .ok_runs(l)
                    .filter_map(|r| r.evals.iter().rev().find(|e| e.episode <= ep).map(|e| e.success_rate))
                    .collect();
                let _ = write!(s, ",{}", median(&vals));
            }
            s.push('\n');
        }
        s
    }
}

/// Runs every distinct cell over every seed. Cells whose configs differ
/// only in label collapse to the first; failing runs are recorded and the
/// sweep continues. Demos and pretraining are shared by all cells with the
/// same task and pretraining settings.
pub fn sweep(
    cells: &[SweepCell],
    seeds: &[u64],
    threshold: f64,
    out_dir: Option<&Path>,
) -> Result<SweepReport, HarnessError> {
    let mut uniq_seeds: Vec<u64> = Vec::new();
    for s in seeds {
        if !uniq_seeds.contains(s) {
            uniq_seeds.push(*s);
        }
    }
    if uniq_seeds.len() < 3 {
        return Err(HarnessError::Sweep(format!("need at least 3 distinct seeds, got {}", uniq_seeds.len())));
    }
    let mut kept: Vec<&SweepCell> = Vec::new();
    for c in cells {
        if !kept.iter().any(|k| k.cfg.identity_key() == c.cfg.identity_key()) {
            kept.push(c);
        }
    }
    if kept.is_empty() {
        return Err(HarnessError::Sweep("no configurations".into()));
    }
    let task = kept[0].cfg.task_config();
    if kept.iter().any(|c| c.cfg.task_config() != task) {
        return Err(HarnessError::Sweep("cells must share task and eval positions".into()));
    }

    let mut demo_cache: BTreeMap<String, DemoSet> = BTreeMap::new();
    let mut pre_cache: HashMap<String, Pretrained> = HashMap::new();
    let mut runs = Vec::new();
    for cell in &kept {
        for &seed in &uniq_seeds {
            let cfg = RunConfig {
                seed,
                ..cell.cfg.clone()
            };
            let result = (|| -> Result<RunSummary, HarnessError> {
                let tkey = format!("{:?}", cfg.task_config());
                if !demo_cache.contains_key(&tkey) {
                    demo_cache.insert(tkey.clone(), record_demos(&cfg)?);
                }
                let demos = &demo_cache[&tkey];
                let pkey = format!("{tkey}{:?}", cfg.bc_config());
                if !pre_cache.contains_key(&pkey) {
                    pre_cache.insert(pkey.clone(), pretrain(&cfg, demos)?);
                }
                let out = train(&cfg, demos, &pre_cache[&pkey], None)?;
                if let Some(dir) = out_dir {
                    let sub = dir.join(sanitize(&cell.label)).join(format!("seed{seed}"));
                    out.write_to(&cfg, &sub)?;
                }
                Ok(RunSummary {
                    final_success: out.final_success(),
                    episodes_to_threshold: out.episodes_to(threshold),
                    final_mean_abs_offset: out.final_mean_abs_offset(),
                    evals: out.evals,
                })
            })();
            runs.push(SweepRun {
                label: cell.label.clone(),
                seed,
                result: result.map_err(|e| e.to_string()),
            });
        }
    }
    let report = SweepReport {
        labels: kept.iter().map(|c| c.label.clone()).collect(),
        threshold,
        runs,
    };
    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("summary.csv"), report.summary_table())?;
        std::fs::write(dir.join("curves.csv"), report.curve_table())?;
    }
    Ok(report)
}

fn sanitize(label: &str) -> String {
    label
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '_' || c == '-' { c } else { '_' })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::TaskKind;

    fn tiny(task: TaskKind) -> RunConfig {
        RunConfig {
            task,
            hidden_dim: 16,
            feature_dim: 8,
            z_dim: 8,
            bc_hidden_dim: 16,
            bc_epochs: 50,
            batch_size: 32,
            seed_frames: 40,
            episodes: 3,
            eval_every: 2,
            ..RunConfig::default()
        }
    }

    #[test]
    fn zero_episodes_emit_no_rows() {
        let cfg = RunConfig { episodes: 0, ..tiny(TaskKind::Reach) };
        let art = run(&cfg).unwrap();
        assert!(art.output.metrics.is_empty());
        assert_eq!(art.output.metrics_csv(), format!("{METRICS_HEADER}\n"));
        assert_eq!(art.output.evals.len(), 1);
    }

    #[test]
    fn untrained_agent_matches_base() {
        let cfg = RunConfig { episodes: 0, ..tiny(TaskKind::Push) };
        let art = run(&cfg).unwrap();
        let task = cfg.task_config();
        let (base_rate, _) = evaluate_policy(&task, &art.pretrained.encoder, &art.output.base, None, 1).unwrap();
        assert_eq!(art.output.final_success(), base_rate);
    }

    #[test]
    fn metrics_rows_are_monotone_and_labeled() {
        let cfg = tiny(TaskKind::Reach);
        let art = run(&cfg).unwrap();
        let m = &art.output.metrics;
        assert_eq!(m.len(), 3);
        assert!(m.windows(2).all(|w| w[1].episode == w[0].episode + 1 && w[1].env_steps > w[0].env_steps));
        assert!(m.iter().all(|r| r.ot_reward_total <= 0.0 && r.lambda.is_none()));
        assert_eq!(art.output.base_fingerprint_before, art.output.base_fingerprint_after);
    }

    #[test]
    fn checkpoint_evaluates_like_the_trained_agent() {
        let cfg = tiny(TaskKind::Reach);
        let art = run(&cfg).unwrap();
        let ck = Checkpoint::from_text(&art.output.checkpoint(&cfg).to_text()).unwrap();
        let rate = evaluate(&cfg, &art.demos, &art.pretrained, &ck).unwrap();
        assert_eq!(rate, art.output.final_success());
        let other = RunConfig {
            condition_on_base_action: false,
            ..cfg.clone()
        };
        assert!(matches!(
            evaluate(&other, &art.demos, &art.pretrained, &ck),
            Err(HarnessError::Mismatch(_))
        ));
    }

    #[test]
    fn pretrained_round_trips_through_checkpoint() {
        let cfg = tiny(TaskKind::Reach);
        let demos = record_demos(&cfg).unwrap();
        let pre = pretrain(&cfg, &demos).unwrap();
        let ck = Checkpoint::from_text(&pre.to_checkpoint().to_text()).unwrap();
        assert_eq!(Pretrained::from_checkpoint(&ck).unwrap(), pre);
    }

    #[test]
    fn medians() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), 2.5);
        assert_eq!(median_opt(&[Some(1.0), None, None]), None);
        assert_eq!(median_opt(&[Some(1.0), Some(5.0), None]), Some(5.0));
    }

    #[test]
    fn sweep_dedups_and_needs_three_seeds() {
        let cfg = RunConfig { episodes: 0, ..tiny(TaskKind::Reach) };
        let cells = vec![
            SweepCell { label: "a".into(), cfg: cfg.clone() },
            SweepCell { label: "b".into(), cfg: cfg.clone() },
        ];
        assert!(matches!(sweep(&cells, &[0, 1, 1], 0.8, None), Err(HarnessError::Sweep(_))));
        let rep = sweep(&cells, &[0, 1, 2, 2], 0.8, None).unwrap();
        assert_eq!(rep.labels, vec!["a".to_string()]);
        assert_eq!(rep.runs.len(), 3);
        assert_eq!(encoder_grid_cells(&cfg).len(), 4);
        assert_eq!(guidance_cells(&cfg).len(), 3);
    }

    #[test]
    fn sweep_records_failures_and_continues() {
        let good = RunConfig { episodes: 0, ..tiny(TaskKind::Reach) };
        let bad = RunConfig { vinn_temperature: -1.0, ..good.clone() };
        let cells = vec![
            SweepCell { label: "bad".into(), cfg: bad },
            SweepCell { label: "good".into(), cfg: good },
        ];
        let rep = sweep(&cells, &[0, 1, 2], 0.8, None).unwrap();
        assert_eq!(rep.failures().count(), 3);
        assert_eq!(rep.runs.iter().filter(|r| r.result.is_ok()).count(), 3);
        assert!(rep.summary_table().lines().count() == 3);
    }
}
